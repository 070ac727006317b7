#pragma once

// Binary checkpoint container.
//
//   "NSMRGCKP" | u32 version | u64 config hash | u64 epoch | u64 step
//   u32 n | n x (u32 name_len, name, u64 rows, u64 cols, f64[rows*cols])
//   u8 has_optim | [u64 step, f64 lr, b1, b2, eps, u32 n, n x m tensor, n x v tensor]
//   u64 FNV-1a of every preceding byte
//
// Integers and doubles are little-endian.

#include <bit>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "nsmrg/model.hpp"
#include "nsmrg/nn.hpp"

namespace nsmrg {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'N', 'S', 'M', 'R', 'G', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
    std::string path;
    Tensor value;

    friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

struct Checkpoint {
    std::uint32_t version = kCheckpointVersion;
    std::uint64_t config_hash = 0;
    std::uint64_t epoch = 0;
    std::uint64_t step = 0;
    std::vector<NamedTensor> tensors;
    bool has_optim = false;
    OptimState optim;

    const Tensor* find(std::string_view path) const {
        for (const auto& t : tensors)
            if (t.path == path) return &t.value;
        return nullptr;
    }
};

/// Bitwise comparison, including optimizer moments.
inline bool same_checkpoint(const Checkpoint& a, const Checkpoint& b) {
    auto same_optim = [](const OptimState& x, const OptimState& y) {
        return x.step == y.step && x.cfg.lr == y.cfg.lr && x.cfg.beta1 == y.cfg.beta1 && x.cfg.beta2 == y.cfg.beta2 &&
               x.cfg.eps == y.cfg.eps && x.m == y.m && x.v == y.v;
    };
    return a.version == b.version && a.config_hash == b.config_hash && a.epoch == b.epoch && a.step == b.step &&
           a.tensors == b.tensors && a.has_optim == b.has_optim && (!a.has_optim || same_optim(a.optim, b.optim));
}

inline Checkpoint make_checkpoint(const Model& m, const OptimState* optim, std::uint64_t config_hash,
                                  std::uint64_t epoch) {
    Checkpoint c;
    c.config_hash = config_hash;
    c.epoch = epoch;
    m.for_each([&](const std::string& path, const Tensor& t) { c.tensors.push_back({path, t}); });
    if (optim) {
        c.has_optim = true;
        c.optim = *optim;
        c.step = optim->step;
    }
    return c;
}

/// Copies tensors into `m` (and `optim` when given). Paths and shapes must match.
inline void apply_checkpoint(const Checkpoint& c, Model& m, OptimState* optim, std::uint64_t expected_hash) {
    if (c.config_hash != expected_hash)
        throw CompatibilityError("checkpoint config hash " + std::to_string(c.config_hash) + " != " +
                                 std::to_string(expected_hash));
    std::size_t i = 0;
    std::vector<std::pair<Tensor*, const Tensor*>> writes;
    m.for_each([&](const std::string& path, Tensor& t) {
        if (i >= c.tensors.size() || c.tensors[i].path != path)
            throw CompatibilityError("checkpoint is missing tensor " + path);
        if (!t.same_shape(c.tensors[i].value))
            throw CompatibilityError("checkpoint tensor " + path + " has shape " + shape_str(c.tensors[i].value) +
                                     ", model expects " + shape_str(t));
        writes.emplace_back(&t, &c.tensors[i].value);
        ++i;
    });
    if (i != c.tensors.size()) throw CompatibilityError("checkpoint carries extra tensors");
    for (auto [dst, src] : writes) *dst = *src;
    if (optim && c.has_optim) *optim = c.optim;
}

namespace ckpt_detail {

class Writer {
public:
    template <class T>
    void pod(const T& v) {
        const auto* p = reinterpret_cast<const char*>(&v);
        buf_.insert(buf_.end(), p, p + sizeof(T));
    }
    void bytes(const void* p, std::size_t n) {
        const auto* c = static_cast<const char*>(p);
        buf_.insert(buf_.end(), c, c + n);
    }
    void tensor(const Tensor& t) {
        pod<std::uint64_t>(t.rows);
        pod<std::uint64_t>(t.cols);
        bytes(t.data.data(), t.data.size() * sizeof(double));
    }
    std::vector<char>& buffer() { return buf_; }

private:
    std::vector<char> buf_;
};

class Reader {
public:
    Reader(const char* p, std::size_t n) : p_(p), n_(n) {}

    template <class T>
    T pod() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, p_ + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    std::string str(std::size_t len) {
        need(len);
        std::string s(p_ + pos_, len);
        pos_ += len;
        return s;
    }
    Tensor tensor() {
        const auto rows = pod<std::uint64_t>();
        const auto cols = pod<std::uint64_t>();
        if (cols != 0 && rows > (n_ - pos_) / sizeof(double) / cols) throw TruncationError("checkpoint: truncated tensor");
        Tensor t(rows, cols);
        need(t.data.size() * sizeof(double));
        std::memcpy(t.data.data(), p_ + pos_, t.data.size() * sizeof(double));
        pos_ += t.data.size() * sizeof(double);
        return t;
    }
    std::size_t pos() const { return pos_; }

private:
    void need(std::size_t k) const {
        if (k > n_ - pos_) throw TruncationError("checkpoint: file truncated at byte " + std::to_string(pos_));
    }
    const char* p_;
    std::size_t n_;
    std::size_t pos_ = 0;
};

}  // namespace ckpt_detail

inline std::vector<char> serialize_checkpoint(const Checkpoint& c) {
    ckpt_detail::Writer w;
    w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
    w.pod<std::uint32_t>(c.version);
    w.pod<std::uint64_t>(c.config_hash);
    w.pod<std::uint64_t>(c.epoch);
    w.pod<std::uint64_t>(c.step);
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(c.tensors.size()));
    for (const auto& t : c.tensors) {
        w.pod<std::uint32_t>(static_cast<std::uint32_t>(t.path.size()));
        w.bytes(t.path.data(), t.path.size());
        w.tensor(t.value);
    }
    w.pod<std::uint8_t>(c.has_optim ? 1 : 0);
    if (c.has_optim) {
        w.pod<std::uint64_t>(c.optim.step);
        w.pod<double>(c.optim.cfg.lr);
        w.pod<double>(c.optim.cfg.beta1);
        w.pod<double>(c.optim.cfg.beta2);
        w.pod<double>(c.optim.cfg.eps);
        w.pod<std::uint32_t>(static_cast<std::uint32_t>(c.optim.m.size()));
        for (const auto& t : c.optim.m) w.tensor(t);
        for (const auto& t : c.optim.v) w.tensor(t);
    }
    const std::uint64_t sum = fnv1a_bytes(w.buffer().data(), w.buffer().size());
    w.pod<std::uint64_t>(sum);
    return std::move(w.buffer());
}

inline Checkpoint deserialize_checkpoint(const std::vector<char>& buf) {
    if (buf.size() < sizeof kCheckpointMagic + sizeof(std::uint32_t))
        throw TruncationError("checkpoint: file shorter than its header");
    if (std::memcmp(buf.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0)
        throw StateError("checkpoint: bad magic, not a checkpoint file");
    ckpt_detail::Reader r(buf.data(), buf.size());
    r.str(sizeof kCheckpointMagic);
    Checkpoint c;
    c.version = r.pod<std::uint32_t>();
    if (c.version != kCheckpointVersion)
        throw VersionError("checkpoint schema version " + std::to_string(c.version) + " unsupported (expected " +
                           std::to_string(kCheckpointVersion) + ")");
    c.config_hash = r.pod<std::uint64_t>();
    c.epoch = r.pod<std::uint64_t>();
    c.step = r.pod<std::uint64_t>();
    const auto n = r.pod<std::uint32_t>();
    for (std::uint32_t i = 0; i < n; ++i) {
        const auto len = r.pod<std::uint32_t>();
        std::string path = r.str(len);
        c.tensors.push_back({std::move(path), r.tensor()});
    }
    c.has_optim = r.pod<std::uint8_t>() != 0;
    if (c.has_optim) {
        c.optim.step = r.pod<std::uint64_t>();
        c.optim.cfg.lr = r.pod<double>();
        c.optim.cfg.beta1 = r.pod<double>();
        c.optim.cfg.beta2 = r.pod<double>();
        c.optim.cfg.eps = r.pod<double>();
        const auto k = r.pod<std::uint32_t>();
        for (std::uint32_t i = 0; i < k; ++i) c.optim.m.push_back(r.tensor());
        for (std::uint32_t i = 0; i < k; ++i) c.optim.v.push_back(r.tensor());
    }
    const std::size_t body = r.pos();
    const auto stored = r.pod<std::uint64_t>();
    if (r.pos() != buf.size()) throw StateError("checkpoint: trailing bytes after checksum");
    if (stored != fnv1a_bytes(buf.data(), body)) throw StateError("checkpoint: checksum mismatch");
    return c;
}

/// Writes to a temporary file and renames, so readers never see a partial file.
inline void save_checkpoint(const std::string& path, const Checkpoint& c) {
    const auto bytes = serialize_checkpoint(c);
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw StateError("cannot write checkpoint " + tmp);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw StateError("short write on checkpoint " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) throw StateError("cannot move checkpoint into place at " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw StateError("cannot open checkpoint " + path);
    std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize_checkpoint(buf);
}

}  // namespace nsmrg
