#pragma once

// Shared generators and independent oracles for the unit suites and the
// acceptance binary. Oracles here never call the code they check.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include <unistd.h>

#include "nsmrg/nsmrg.hpp"

namespace nsmrg::testing {

// ---------------------------------------------------------------------------
// Generators
// ---------------------------------------------------------------------------

inline Tensor random_tensor(RngStream& rng, std::size_t r, std::size_t c, double scale = 1.0) {
    Tensor t(r, c);
    for (auto& v : t.data) v = rng.normal() * scale;
    return t;
}

inline Vec random_vec(RngStream& rng, std::size_t n, double scale = 1.0) {
    Vec v(n);
    for (auto& x : v) x = rng.normal() * scale;
    return v;
}

/// Uniform in [lo, hi]; with probability `edge` an endpoint instead.
inline Vec random_unit_vec(RngStream& rng, std::size_t n, double edge = 0.0, double lo = 0.0, double hi = 1.0) {
    Vec v(n);
    for (auto& x : v) {
        if (edge > 0.0 && rng.bernoulli(edge))
            x = rng.bernoulli(0.5) ? lo : hi;
        else
            x = rng.uniform(lo, hi);
    }
    return v;
}

/// Random binary tree over `concepts` leaves with up to `max_depth` levels.
inline int grow_tree(RuleTree& t, RngStream& rng, std::size_t concepts, int depth) {
    if (depth <= 0 || rng.bernoulli(0.25)) return t.leaf(static_cast<int>(rng.index(concepts)));
    switch (rng.index(4)) {
        case 0: return t.not_(grow_tree(t, rng, concepts, depth - 1));
        case 1: {
            const int a = grow_tree(t, rng, concepts, depth - 1);
            return t.and_(a, grow_tree(t, rng, concepts, depth - 1));
        }
        case 2: {
            const int a = grow_tree(t, rng, concepts, depth - 1);
            return t.or_(a, grow_tree(t, rng, concepts, depth - 1));
        }
        default: {
            const int a = grow_tree(t, rng, concepts, depth - 1);
            const int b = grow_tree(t, rng, concepts, depth - 1);
            return t.blend(a, b, rng.uniform(0.05, 0.95));
        }
    }
}

inline RuleTree random_tree(RngStream& rng, std::size_t concepts, int max_depth = 4) {
    RuleTree t;
    t.id = "T";
    grow_tree(t, rng, concepts, max_depth);
    return t;
}

// ---------------------------------------------------------------------------
// Oracles
// ---------------------------------------------------------------------------

/// Recursive interpreter over the product family, from the root down.
inline double naive_eval(const RuleTree& t, const Vec& c, int node = -1) {
    if (node < 0) node = t.root();
    const RuleNode& n = t.nodes[static_cast<std::size_t>(node)];
    switch (n.kind) {
        case OpKind::Leaf: return c[static_cast<std::size_t>(n.concept_index)];
        case OpKind::Not: return 1.0 - naive_eval(t, c, n.left);
        case OpKind::And: return naive_eval(t, c, n.left) * naive_eval(t, c, n.right);
        case OpKind::Or: {
            const double a = naive_eval(t, c, n.left), b = naive_eval(t, c, n.right);
            return a + b - a * b;
        }
        case OpKind::Blend: {
            const double a = naive_eval(t, c, n.left), b = naive_eval(t, c, n.right);
            const double w = 1.0 / (1.0 + std::exp(-t.gates.data[static_cast<std::size_t>(n.gate)]));
            return w * a * b + (1.0 - w) * (a + b - a * b);
        }
    }
    return std::numeric_limits<double>::quiet_NaN();
}

/// Full scan, full sort: similarity descending, then insertion index.
inline std::vector<std::size_t> brute_force_top(const Vec& q, const std::vector<Vec>& store, std::size_t n) {
    std::vector<std::pair<double, std::size_t>> all;
    double nq = 0.0;
    for (double v : q) nq += v * v;
    for (std::size_t i = 0; i < store.size(); ++i) {
        double d = 0.0, ns = 0.0;
        for (std::size_t j = 0; j < q.size(); ++j) {
            d += q[j] * store[i][j];
            ns += store[i][j] * store[i][j];
        }
        all.emplace_back(d / (std::sqrt(nq) * std::sqrt(ns)), i);
    }
    std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
        return a.first > b.first || (a.first == b.first && a.second < b.second);
    });
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < std::min(n, all.size()); ++i) out.push_back(all[i].second);
    return out;
}

inline double dist(const Vec& a, const Vec& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

inline double radius_of(const std::vector<Vec>& pts, const std::vector<std::size_t>& centers) {
    double r = 0.0;
    for (const auto& p : pts) {
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t c : centers) best = std::min(best, dist(p, pts[c]));
        r = std::max(r, best);
    }
    return r;
}

/// Minimum covering radius over every k-subset.
inline double exhaustive_k_center(const std::vector<Vec>& pts, std::size_t k) {
    const std::size_t n = pts.size();
    std::vector<bool> pick(n, false);
    std::fill(pick.begin(), pick.begin() + static_cast<std::ptrdiff_t>(k), true);
    double best = std::numeric_limits<double>::infinity();
    do {
        std::vector<std::size_t> c;
        for (std::size_t i = 0; i < n; ++i)
            if (pick[i]) c.push_back(i);
        best = std::min(best, radius_of(pts, c));
    } while (std::prev_permutation(pick.begin(), pick.end()));
    return best;
}

// ---------------------------------------------------------------------------
// Gradient checks
// ---------------------------------------------------------------------------

/// Relative error used throughout: |a - n| / max(1, |a|).
inline double rel_err(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
}

/// Central differences on up to `per_tensor` random coordinates of every
/// model tensor. `objective(model, grad*)` returns the scalar; the gradient is
/// accumulated into a zeroed model-shaped buffer when `grad` is non-null.
inline double model_grad_check(const Model& m0, const std::function<double(const Model&, Model*)>& objective,
                               RngStream& rng, std::size_t per_tensor = 6, double h = 1e-5,
                               std::size_t* checked = nullptr) {
    Model grad = m0.zeros_like();
    objective(m0, &grad);
    std::vector<const Tensor*> g;
    grad.for_each([&](const std::string&, const Tensor& t) { g.push_back(&t); });
    Model m = m0;
    std::vector<Tensor*> params;
    m.for_each([&](const std::string&, Tensor& t) { params.push_back(&t); });
    double worst = 0.0;
    for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor& t = *params[p];
        if (t.empty()) continue;
        for (std::size_t s = 0; s < std::min(per_tensor, t.size()); ++s) {
            const std::size_t i = rng.index(t.size());
            const double orig = t.data[i];
            t.data[i] = orig + h;
            const double up = objective(m, nullptr);
            t.data[i] = orig - h;
            const double down = objective(m, nullptr);
            t.data[i] = orig;
            worst = std::max(worst, rel_err(g[p]->data[i], (up - down) / (2.0 * h)));
            if (checked) ++*checked;
        }
    }
    return worst;
}

// ---------------------------------------------------------------------------
// Small fixtures
// ---------------------------------------------------------------------------

/// A world and model small enough for exhaustive gradient checks.
struct TinySetup {
    SyntheticWorld world;
    Model model;
};

inline TinySetup tiny_setup(std::uint64_t seed, std::size_t n = 8) {
    WorldSpec spec;
    spec.patches = 4;
    spec.width = 16;
    spec.noise = 0.1;
    TinySetup s{gen_synthetic_dataset(spec, n, 2, seed), {}};
    ModelDims dims{16, 4, 2, 8, 8};
    RngStream rng(seed + 17);
    s.model = Model::init(dims, s.world.library, s.world.templates.size(), 0.1, rng);
    return s;
}

/// Scratch directory removed on scope exit.
struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& tag) {
        static std::size_t counter = 0;
        path = std::filesystem::temp_directory_path() /
               ("nsmrg-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    std::string str() const { return path.string(); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

// ---------------------------------------------------------------------------
// Gradient instances
// ---------------------------------------------------------------------------

/// Perturbs up to `per_tensor` coordinates of each tensor in `params`;
/// `grads[i]` holds the analytic gradient of `f` for `params[i]`.
inline double tensors_grad_check(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads,
                                 const std::function<double()>& f, RngStream& rng, std::size_t per_tensor = 8,
                                 double h = 1e-5) {
    double worst = 0.0;
    for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor& t = *params[p];
        for (std::size_t s = 0; s < std::min(per_tensor, t.size()); ++s) {
            const std::size_t i = rng.index(t.size());
            const double orig = t.data[i];
            t.data[i] = orig + h;
            const double up = f();
            t.data[i] = orig - h;
            const double down = f();
            t.data[i] = orig;
            worst = std::max(worst, rel_err(grads[p]->data[i], (up - down) / (2.0 * h)));
        }
    }
    return worst;
}

/// sum(Y .* R) for a fixed random R: a generic scalar readout.
inline double readout(const Tensor& y, const Tensor& r) {
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += y.data[i] * r.data[i];
    return s;
}

// One random instance per call; each returns the worst relative error.

inline double grad_instance_projection(RngStream& rng) {
    const std::size_t m = 2 + rng.index(4), in = 2 + rng.index(6), out = 1 + rng.index(6);
    Tensor x = random_tensor(rng, m, in);
    ProjectionParams p{random_tensor(rng, in, out), random_tensor(rng, 1, out)};
    const Tensor r = random_tensor(rng, m, out);
    ProjectionParams g{Tensor(in, out), Tensor(1, out)};
    Tensor dx;
    project_features_backward(x, p, r, g, &dx);
    auto f = [&] { return readout(project_features(x, p), r); };
    return tensors_grad_check({&p.weight, &p.bias, &x}, {&g.weight, &g.bias, &dx}, f, rng);
}

inline double grad_instance_encoder(RngStream& rng) {
    const std::size_t heads = 1 + rng.index(3);
    const std::size_t width = heads * (1 + rng.index(3));
    const std::size_t m = 2 + rng.index(4), ffn = 2 + rng.index(6);
    EncoderParams p = EncoderParams::init(width, heads, ffn, rng);
    p.ln1_gain = random_tensor(rng, 1, width, 0.5);
    for (auto& v : p.ln1_gain.data) v += 1.0;
    p.ln2_bias = random_tensor(rng, 1, width, 0.3);
    Tensor x = random_tensor(rng, m, width);
    const Tensor r = random_tensor(rng, m, width);
    EncoderCache cache;
    encode_attend(x, p, Dropout::off(), &cache);
    EncoderParams g = p.zeros_like();
    Tensor dx;
    encode_attend_backward(cache, p, r, g, &dx);
    auto f = [&] { return readout(encode_attend(x, p), r); };
    std::vector<Tensor*> params{&x};
    std::vector<const Tensor*> grads{&dx};
    p.for_each("", [&](const std::string&, Tensor& t) { params.push_back(&t); });
    g.for_each("", [&](const std::string&, Tensor& t) { grads.push_back(&t); });
    return tensors_grad_check(params, grads, f, rng, 6);
}

inline double grad_instance_concept_head(RngStream& rng) {
    const std::size_t in = 2 + rng.index(6), hidden = 2 + rng.index(8), k = 1 + rng.index(6);
    ConceptHeadParams p = ConceptHeadParams::init(in, hidden, k, 0.0, rng);
    p.b1 = random_tensor(rng, 1, hidden, 0.5);
    p.b2 = random_tensor(rng, 1, k, 0.5);
    Tensor x = random_tensor(rng, 1, in);
    const Vec r = random_vec(rng, k);
    ConceptHeadCache cache;
    predict_concepts(x.data, p, Dropout::off(), &cache);
    ConceptHeadParams g{Tensor(in, hidden), Tensor(1, hidden), Tensor(hidden, k), Tensor(1, k), 0.0};
    Tensor dx(1, in);
    dx.data = predict_concepts_backward(cache, p, r, g);
    auto f = [&] {
        const Vec c = predict_concepts(x.data, p);
        double s = 0.0;
        for (std::size_t i = 0; i < k; ++i) s += c[i] * r[i];
        return s;
    };
    return tensors_grad_check({&p.w1, &p.b1, &p.w2, &p.b2, &x}, {&g.w1, &g.b1, &g.w2, &g.b2, &dx}, f, rng);
}

inline double grad_instance_focal(RngStream& rng) {
    const std::size_t k = 1 + rng.index(16);
    Tensor probs(1, k);
    probs.data = random_unit_vec(rng, k, 0.0, 0.01, 0.99);
    Vec y(k);
    for (auto& v : y) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
    const double gamma = rng.bernoulli(0.5) ? 2.0 : rng.uniform(0.0, 3.0);
    const double alpha = rng.uniform(0.05, 0.95);
    Tensor g(1, k);
    g.data = focal_loss(probs.data, y, gamma, alpha).grad;
    auto f = [&] { return focal_loss(probs.data, y, gamma, alpha).loss; };
    return tensors_grad_check({&probs}, {&g}, f, rng, 16);
}

inline double grad_instance_tree(RngStream& rng) {
    const std::size_t k = 2 + rng.index(8);
    RuleTree t = random_tree(rng, k, 4);
    Tensor c(1, k);
    c.data = random_unit_vec(rng, k, 0.0, 0.02, 0.98);
    RuleEvalCache cache;
    eval_rule_tree(t, c.data, &cache);
    const double up = rng.uniform(-2.0, 2.0);
    const RuleGradient rg = backprop_rule_tree(t, cache, up, c.data);
    Tensor dc(1, k);
    dc.data = rg.d_concepts;
    Tensor draw(1, t.gate_count());
    draw.data = rg.d_raw;
    auto f = [&] { return up * eval_rule_tree(t, c.data); };
    return tensors_grad_check({&c, &t.gates}, {&dc, &draw}, f, rng, 16);
}

/// Full composite objective on the tiny model, including the log-variances s_i.
inline double grad_instance_composite(RngStream& rng, std::uint64_t seed) {
    TinySetup s = tiny_setup(seed, 4);
    for (auto& v : s.model.loss.log_vars.data) v += rng.uniform(-0.5, 0.5);
    for (auto& r : s.model.rules.rules)
        for (auto& g : r.tree.gates.data) g = rng.uniform(-2.0, 2.0);
    ObjectiveOptions o;
    o.use_rule_loss = rng.bernoulli(0.75);
    std::vector<BatchItem> batch;
    for (const auto& smp : s.world.train) batch.push_back({&smp.x, &smp.targets});
    auto objective = [&](const Model& m, Model* g) { return batch_objective(m, batch, o, g).loss.total; };
    return model_grad_check(s.model, objective, rng, 4);
}

}  // namespace nsmrg::testing
