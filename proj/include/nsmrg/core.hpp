#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace nsmrg {

// ---------------------------------------------------------------------------
// Errors. One type per failure class so callers (and tests) can discriminate.
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

#define NSMRG_DEFINE_ERROR(Name) \
    struct Name : Error {        \
        using Error::Error;      \
    }

NSMRG_DEFINE_ERROR(DimensionError);
NSMRG_DEFINE_ERROR(ConfigError);
NSMRG_DEFINE_ERROR(PreconditionError);
NSMRG_DEFINE_ERROR(TrainingError);
NSMRG_DEFINE_ERROR(DomainError);
NSMRG_DEFINE_ERROR(StructureError);
NSMRG_DEFINE_ERROR(ConsistencyError);
NSMRG_DEFINE_ERROR(ArgumentError);
NSMRG_DEFINE_ERROR(LibraryError);
NSMRG_DEFINE_ERROR(RetrievalError);
NSMRG_DEFINE_ERROR(RoundError);
NSMRG_DEFINE_ERROR(LookupError);
NSMRG_DEFINE_ERROR(CompatibilityError);
NSMRG_DEFINE_ERROR(RoutingError);
NSMRG_DEFINE_ERROR(SignatureError);
NSMRG_DEFINE_ERROR(CoordinationError);
NSMRG_DEFINE_ERROR(VersionError);
NSMRG_DEFINE_ERROR(TruncationError);
NSMRG_DEFINE_ERROR(StateError);

#undef NSMRG_DEFINE_ERROR

/// Parse failure carrying a 1-based line and column.
struct ParseError : Error {
    ParseError(std::size_t line, std::size_t column, const std::string& what)
        : Error("line " + std::to_string(line) + ", column " + std::to_string(column) + ": " + what),
          line(line),
          column(column) {}
    std::size_t line;
    std::size_t column;
};

// ---------------------------------------------------------------------------
// Dense row-major matrix. Vectors are 1 x n tensors.
// ---------------------------------------------------------------------------

using Vec = std::vector<double>;

struct Tensor {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Tensor() = default;
    Tensor(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    static Tensor from_rows(std::initializer_list<std::initializer_list<double>> init) {
        Tensor t;
        t.rows = init.size();
        t.cols = t.rows ? init.begin()->size() : 0;
        for (const auto& row : init) {
            if (row.size() != t.cols) throw DimensionError("from_rows: ragged initializer");
            t.data.insert(t.data.end(), row.begin(), row.end());
        }
        return t;
    }

    static Tensor row_vector(std::span<const double> v) {
        Tensor t(1, v.size());
        std::copy(v.begin(), v.end(), t.data.begin());
        return t;
    }

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

    std::size_t size() const { return data.size(); }
    bool empty() const { return data.empty(); }
    bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }

    bool all_finite() const {
        return std::all_of(data.begin(), data.end(), [](double x) { return std::isfinite(x); });
    }

    void fill(double v) { std::fill(data.begin(), data.end(), v); }

    friend bool operator==(const Tensor&, const Tensor&) = default;
};

inline std::string shape_str(const Tensor& t) {
    return std::to_string(t.rows) + "x" + std::to_string(t.cols);
}

inline void require_shape(const Tensor& t, std::size_t r, std::size_t c, std::string_view what) {
    if (t.rows != r || t.cols != c) {
        throw DimensionError(std::string(what) + ": expected " + std::to_string(r) + "x" + std::to_string(c) +
                             ", got " + shape_str(t));
    }
}

/// C = A * B
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.cols != b.rows) throw DimensionError("matmul: " + shape_str(a) + " * " + shape_str(b));
    Tensor c(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        double* out = c.data.data() + i * c.cols;
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            const double* brow = b.data.data() + k * b.cols;
            for (std::size_t j = 0; j < b.cols; ++j) out[j] += aik * brow[j];
        }
    }
    return c;
}

/// C += A^T * B
inline void matmul_tn_acc(const Tensor& a, const Tensor& b, Tensor& c) {
    if (a.rows != b.rows || c.rows != a.cols || c.cols != b.cols)
        throw DimensionError("matmul_tn: " + shape_str(a) + "^T * " + shape_str(b));
    for (std::size_t k = 0; k < a.rows; ++k) {
        const double* brow = b.data.data() + k * b.cols;
        for (std::size_t i = 0; i < a.cols; ++i) {
            const double aki = a(k, i);
            if (aki == 0.0) continue;
            double* out = c.data.data() + i * c.cols;
            for (std::size_t j = 0; j < b.cols; ++j) out[j] += aki * brow[j];
        }
    }
}

/// C = A * B^T
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.cols != b.cols) throw DimensionError("matmul_nt: " + shape_str(a) + " * " + shape_str(b) + "^T");
    Tensor c(a.rows, b.rows);
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double* arow = a.data.data() + i * a.cols;
        for (std::size_t j = 0; j < b.rows; ++j) {
            const double* brow = b.data.data() + j * b.cols;
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols; ++k) s += arow[k] * brow[k];
            c(i, j) = s;
        }
    }
    return c;
}

inline void add_inplace(Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw DimensionError("add: " + shape_str(a) + " + " + shape_str(b));
    for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline double logit(double p) { return std::log(p) - std::log1p(-p); }

// ---------------------------------------------------------------------------
// Hashing (FNV-1a 64) for config fingerprints, cache validation and message keys.
// ---------------------------------------------------------------------------

inline constexpr std::uint64_t kFnvOffset = 1469598103934665603ULL;
inline constexpr std::uint64_t kFnvPrime = 1099511628211ULL;

inline std::uint64_t fnv1a_bytes(const void* bytes, std::size_t n, std::uint64_t h = kFnvOffset) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= kFnvPrime;
    }
    return h;
}

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = kFnvOffset) { return fnv1a_bytes(s.data(), s.size(), h); }

inline std::uint64_t fnv1a(std::span<const double> v, std::uint64_t h = kFnvOffset) {
    return fnv1a_bytes(v.data(), v.size() * sizeof(double), h);
}

// ---------------------------------------------------------------------------
// Deterministic random stream: splitmix64 over (seed, counter). Substreams are
// derived by mixing an index into the seed, so parallel consumers never share
// draws and results do not depend on scheduling.
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

class RngStream {
public:
    using result_type = std::uint64_t;

    explicit RngStream(std::uint64_t seed = 0) : seed_(seed) {}

    std::uint64_t seed() const { return seed_; }
    std::uint64_t counter() const { return counter_; }

    std::uint64_t next_u64() { return splitmix64(seed_ ^ splitmix64(counter_++)); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    std::size_t index(std::size_t n) {
        if (n == 0) throw ArgumentError("RngStream::index: empty range");
        return static_cast<std::size_t>(uniform() * static_cast<double>(n));
    }

    bool bernoulli(double p) { return uniform() < p; }

    /// Standard normal via Box-Muller; one value per call.
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    RngStream fork(std::uint64_t stream) const { return RngStream(splitmix64(seed_ * 0x100000001B3ULL ^ splitmix64(stream + 1))); }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[index(i)]);
    }

    // UniformRandomBitGenerator surface.
    static constexpr result_type min() { return 0; }
    static constexpr result_type max() { return ~result_type{0}; }
    result_type operator()() { return next_u64(); }

private:
    std::uint64_t seed_;
    std::uint64_t counter_ = 0;
};

/// Gaussian init with the given standard deviation.
inline void init_normal(Tensor& t, RngStream& rng, double stddev) {
    for (auto& x : t.data) x = rng.normal() * stddev;
}

}  // namespace nsmrg
