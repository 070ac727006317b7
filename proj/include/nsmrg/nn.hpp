#pragma once

// Dense kernels for the concept extractor: projection, one self-attention
// encoder block, mean pooling, the two-layer concept MLP, focal loss and Adam.
// Every forward has a matching backward with exact gradients; there is no
// autodiff tape, each kernel owns its cache.

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "nsmrg/core.hpp"

namespace nsmrg {

/// Inverted dropout: kept units are scaled by 1/(1-rate).
struct Dropout {
    double rate = 0.0;
    RngStream* rng = nullptr;

    static Dropout off() { return {}; }
    bool active() const { return rate > 0.0 && rng != nullptr; }
};

// ---------------------------------------------------------------------------
// Projection  V = X W + b
// ---------------------------------------------------------------------------

struct ProjectionParams {
    Tensor weight;  // C' x D
    Tensor bias;    // 1 x D

    static ProjectionParams init(std::size_t in, std::size_t out, RngStream& rng) {
        ProjectionParams p{Tensor(in, out), Tensor(1, out)};
        init_normal(p.weight, rng, 1.0 / std::sqrt(static_cast<double>(in)));
        return p;
    }

    template <class F>
    void for_each(const std::string& prefix, F&& f) {
        f(prefix + ".weight", weight);
        f(prefix + ".bias", bias);
    }
};

inline Tensor project_features(const Tensor& x, const ProjectionParams& p) {
    if (x.cols != p.weight.rows) {
        throw DimensionError("project_features: input has " + std::to_string(x.cols) + " columns, weight expects " +
                             std::to_string(p.weight.rows));
    }
    require_shape(p.bias, 1, p.weight.cols, "project_features bias");
    Tensor v = matmul(x, p.weight);
    for (std::size_t m = 0; m < v.rows; ++m)
        for (std::size_t d = 0; d < v.cols; ++d) v(m, d) += p.bias.data[d];
    return v;
}

/// Accumulates parameter gradients into `grad`; writes dX into `d_x` when given.
inline void project_features_backward(const Tensor& x, const ProjectionParams& p, const Tensor& d_v,
                                      ProjectionParams& grad, Tensor* d_x) {
    matmul_tn_acc(x, d_v, grad.weight);
    for (std::size_t m = 0; m < d_v.rows; ++m)
        for (std::size_t d = 0; d < d_v.cols; ++d) grad.bias.data[d] += d_v(m, d);
    if (d_x) *d_x = matmul_nt(d_v, p.weight);
}

// ---------------------------------------------------------------------------
// Layer norm over each row.
// ---------------------------------------------------------------------------

inline constexpr double kLayerNormEps = 1e-10;

struct LayerNormCache {
    Tensor normalized;  // pre gain/bias
    Vec inv_std;
};

inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, LayerNormCache* cache) {
    Tensor y(x.rows, x.cols);
    Tensor n(x.rows, x.cols);
    Vec inv_std(x.rows);
    const double c = static_cast<double>(x.cols);
    for (std::size_t r = 0; r < x.rows; ++r) {
        auto row = x.row(r);
        double mean = 0.0;
        for (double v : row) mean += v;
        mean /= c;
        double var = 0.0;
        for (double v : row) var += (v - mean) * (v - mean);
        var /= c;
        inv_std[r] = 1.0 / std::sqrt(var + kLayerNormEps);
        for (std::size_t j = 0; j < x.cols; ++j) {
            n(r, j) = (row[j] - mean) * inv_std[r];
            y(r, j) = n(r, j) * gain.data[j] + bias.data[j];
        }
    }
    if (cache) {
        cache->normalized = std::move(n);
        cache->inv_std = std::move(inv_std);
    }
    return y;
}

inline Tensor layer_norm_backward(const LayerNormCache& cache, const Tensor& gain, const Tensor& d_y, Tensor& d_gain,
                                  Tensor& d_bias) {
    const auto& n = cache.normalized;
    Tensor d_x(d_y.rows, d_y.cols);
    const double c = static_cast<double>(d_y.cols);
    for (std::size_t r = 0; r < d_y.rows; ++r) {
        double mean_dn = 0.0;
        double mean_dn_n = 0.0;
        for (std::size_t j = 0; j < d_y.cols; ++j) {
            const double dn = d_y(r, j) * gain.data[j];
            d_gain.data[j] += d_y(r, j) * n(r, j);
            d_bias.data[j] += d_y(r, j);
            mean_dn += dn;
            mean_dn_n += dn * n(r, j);
        }
        mean_dn /= c;
        mean_dn_n /= c;
        for (std::size_t j = 0; j < d_y.cols; ++j) {
            const double dn = d_y(r, j) * gain.data[j];
            d_x(r, j) = cache.inv_std[r] * (dn - mean_dn - n(r, j) * mean_dn_n);
        }
    }
    return d_x;
}

// ---------------------------------------------------------------------------
// Self-attention encoder block (post-norm):
//   H  = LN1(X + drop(Attn(X)))
//   X' = LN2(H + relu(H W1) W2)
// Query/key/value matrices are stored C' x C'; head h owns columns
// [h*dh, (h+1)*dh).
// ---------------------------------------------------------------------------

struct EncoderParams {
    std::size_t heads = 8;
    Tensor wq, wk, wv, wo;  // C' x C'
    Tensor ff1;             // C' x F
    Tensor ff2;             // F x C'
    Tensor ln1_gain, ln1_bias, ln2_gain, ln2_bias;  // 1 x C'

    static EncoderParams init(std::size_t width, std::size_t heads, std::size_t ffn, RngStream& rng) {
        if (heads == 0 || width % heads != 0) {
            throw ConfigError("encoder: width " + std::to_string(width) + " not divisible by " + std::to_string(heads) +
                              " heads");
        }
        EncoderParams p;
        p.heads = heads;
        const double s = 1.0 / std::sqrt(static_cast<double>(width));
        for (Tensor* t : {&p.wq, &p.wk, &p.wv, &p.wo}) {
            *t = Tensor(width, width);
            init_normal(*t, rng, s);
        }
        p.ff1 = Tensor(width, ffn);
        init_normal(p.ff1, rng, std::sqrt(2.0 / static_cast<double>(width)));
        p.ff2 = Tensor(ffn, width);
        init_normal(p.ff2, rng, 1.0 / std::sqrt(static_cast<double>(ffn)));
        p.ln1_gain = Tensor(1, width, 1.0);
        p.ln2_gain = Tensor(1, width, 1.0);
        p.ln1_bias = Tensor(1, width);
        p.ln2_bias = Tensor(1, width);
        return p;
    }

    /// Zero tensors with this shape (for gradient buffers).
    EncoderParams zeros_like() const {
        EncoderParams z = *this;
        z.for_each("", [](const std::string&, Tensor& t) { t.fill(0.0); });
        return z;
    }

    std::size_t width() const { return wq.rows; }

    template <class F>
    void for_each(const std::string& prefix, F&& f) {
        f(prefix + ".wq", wq);
        f(prefix + ".wk", wk);
        f(prefix + ".wv", wv);
        f(prefix + ".wo", wo);
        f(prefix + ".ff1", ff1);
        f(prefix + ".ff2", ff2);
        f(prefix + ".ln1_gain", ln1_gain);
        f(prefix + ".ln1_bias", ln1_bias);
        f(prefix + ".ln2_gain", ln2_gain);
        f(prefix + ".ln2_bias", ln2_bias);
    }
};

struct EncoderCache {
    Tensor input;
    Tensor q, k, v;
    std::vector<Tensor> attention;  // per head, M x M, rows sum to 1
    Tensor heads_out;                // concatenated head outputs, M x C'
    Tensor dropout_mask;             // scaled mask (empty when dropout off)
    LayerNormCache ln1;
    Tensor h;   // LN1 output
    Tensor f1;  // H W1 before relu
    Tensor z;   // relu(f1)
    LayerNormCache ln2;
};

inline void validate_encoder(const Tensor& x, const EncoderParams& p) {
    const std::size_t c = x.cols;
    if (p.heads == 0 || c % p.heads != 0) {
        throw ConfigError("encode_attend: feature width " + std::to_string(c) + " not divisible by " +
                          std::to_string(p.heads) + " heads");
    }
    for (const Tensor* t : {&p.wq, &p.wk, &p.wv, &p.wo}) require_shape(*t, c, c, "encoder attention weight");
    if (p.ff1.rows != c || p.ff2.cols != c || p.ff1.cols != p.ff2.rows)
        throw DimensionError("encoder feed-forward shapes " + shape_str(p.ff1) + ", " + shape_str(p.ff2));
    for (const Tensor* t : {&p.ln1_gain, &p.ln1_bias, &p.ln2_gain, &p.ln2_bias}) require_shape(*t, 1, c, "layer norm");
}

inline Tensor encode_attend(const Tensor& x, const EncoderParams& p, Dropout dropout = Dropout::off(),
                            EncoderCache* cache = nullptr) {
    validate_encoder(x, p);
    const std::size_t m = x.rows;
    const std::size_t c = x.cols;
    const std::size_t dh = c / p.heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Tensor q = matmul(x, p.wq);
    Tensor k = matmul(x, p.wk);
    Tensor v = matmul(x, p.wv);
    Tensor heads_out(m, c);
    std::vector<Tensor> attention(p.heads, Tensor(m, m));

    for (std::size_t h = 0; h < p.heads; ++h) {
        Tensor& a = attention[h];
        const std::size_t off = h * dh;
        for (std::size_t i = 0; i < m; ++i) {
            double mx = -INFINITY;
            for (std::size_t j = 0; j < m; ++j) {
                double s = 0.0;
                for (std::size_t d = 0; d < dh; ++d) s += q(i, off + d) * k(j, off + d);
                a(i, j) = s * scale;
                mx = std::max(mx, a(i, j));
            }
            double z = 0.0;
            for (std::size_t j = 0; j < m; ++j) {
                a(i, j) = std::exp(a(i, j) - mx);
                z += a(i, j);
            }
            for (std::size_t j = 0; j < m; ++j) a(i, j) /= z;
            for (std::size_t j = 0; j < m; ++j) {
                const double w = a(i, j);
                for (std::size_t d = 0; d < dh; ++d) heads_out(i, off + d) += w * v(j, off + d);
            }
        }
    }

    Tensor attn = matmul(heads_out, p.wo);
    Tensor mask;
    if (dropout.active()) {
        mask = Tensor(m, c);
        const double keep = 1.0 / (1.0 - dropout.rate);
        for (auto& e : mask.data) e = dropout.rng->bernoulli(dropout.rate) ? 0.0 : keep;
        for (std::size_t i = 0; i < attn.size(); ++i) attn.data[i] *= mask.data[i];
    }
    add_inplace(attn, x);

    LayerNormCache ln1;
    Tensor h = layer_norm(attn, p.ln1_gain, p.ln1_bias, &ln1);
    Tensor f1 = matmul(h, p.ff1);
    Tensor z = f1;
    for (auto& e : z.data) e = std::max(0.0, e);
    Tensor r2 = matmul(z, p.ff2);
    add_inplace(r2, h);
    LayerNormCache ln2;
    Tensor out = layer_norm(r2, p.ln2_gain, p.ln2_bias, &ln2);

    if (cache) {
        cache->input = x;
        cache->q = std::move(q);
        cache->k = std::move(k);
        cache->v = std::move(v);
        cache->attention = std::move(attention);
        cache->heads_out = std::move(heads_out);
        cache->dropout_mask = std::move(mask);
        cache->ln1 = std::move(ln1);
        cache->h = std::move(h);
        cache->f1 = std::move(f1);
        cache->z = std::move(z);
        cache->ln2 = std::move(ln2);
    }
    return out;
}

inline void encode_attend_backward(const EncoderCache& cache, const EncoderParams& p, const Tensor& d_out,
                                   EncoderParams& grad, Tensor* d_x) {
    const std::size_t m = cache.input.rows;
    const std::size_t c = cache.input.cols;
    const std::size_t dh = c / p.heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    // LN2 and the feed-forward residual.
    Tensor d_r2 = layer_norm_backward(cache.ln2, p.ln2_gain, d_out, grad.ln2_gain, grad.ln2_bias);
    Tensor d_h = d_r2;
    matmul_tn_acc(cache.z, d_r2, grad.ff2);
    Tensor d_z = matmul_nt(d_r2, p.ff2);
    for (std::size_t i = 0; i < d_z.size(); ++i)
        if (cache.f1.data[i] <= 0.0) d_z.data[i] = 0.0;
    matmul_tn_acc(cache.h, d_z, grad.ff1);
    add_inplace(d_h, matmul_nt(d_z, p.ff1));

    // LN1 and the attention residual.
    Tensor d_r1 = layer_norm_backward(cache.ln1, p.ln1_gain, d_h, grad.ln1_gain, grad.ln1_bias);
    Tensor d_input = d_r1;
    Tensor d_attn = d_r1;
    if (!cache.dropout_mask.empty())
        for (std::size_t i = 0; i < d_attn.size(); ++i) d_attn.data[i] *= cache.dropout_mask.data[i];

    matmul_tn_acc(cache.heads_out, d_attn, grad.wo);
    Tensor d_heads = matmul_nt(d_attn, p.wo);

    Tensor d_q(m, c), d_k(m, c), d_v(m, c);
    Vec d_a(m);
    for (std::size_t h = 0; h < p.heads; ++h) {
        const Tensor& a = cache.attention[h];
        const std::size_t off = h * dh;
        for (std::size_t i = 0; i < m; ++i) {
            double row_dot = 0.0;
            for (std::size_t j = 0; j < m; ++j) {
                double s = 0.0;
                for (std::size_t d = 0; d < dh; ++d) s += d_heads(i, off + d) * cache.v(j, off + d);
                d_a[j] = s;
                row_dot += s * a(i, j);
                for (std::size_t d = 0; d < dh; ++d) d_v(j, off + d) += a(i, j) * d_heads(i, off + d);
            }
            for (std::size_t j = 0; j < m; ++j) {
                const double ds = a(i, j) * (d_a[j] - row_dot) * scale;
                if (ds == 0.0) continue;
                for (std::size_t d = 0; d < dh; ++d) {
                    d_q(i, off + d) += ds * cache.k(j, off + d);
                    d_k(j, off + d) += ds * cache.q(i, off + d);
                }
            }
        }
    }
    matmul_tn_acc(cache.input, d_q, grad.wq);
    matmul_tn_acc(cache.input, d_k, grad.wk);
    matmul_tn_acc(cache.input, d_v, grad.wv);
    if (d_x) {
        add_inplace(d_input, matmul_nt(d_q, p.wq));
        add_inplace(d_input, matmul_nt(d_k, p.wk));
        add_inplace(d_input, matmul_nt(d_v, p.wv));
        *d_x = std::move(d_input);
    }
}

// ---------------------------------------------------------------------------
// Mean pooling over rows.
// ---------------------------------------------------------------------------

inline Vec pool_mean(const Tensor& x) {
    if (x.rows == 0 || x.cols == 0) throw PreconditionError("pool_mean: empty matrix");
    Vec out(x.cols, 0.0);
    for (std::size_t m = 0; m < x.rows; ++m)
        for (std::size_t j = 0; j < x.cols; ++j) out[j] += x(m, j);
    for (auto& v : out) v /= static_cast<double>(x.rows);
    return out;
}

inline Tensor pool_mean_backward(std::size_t rows, std::span<const double> d_pooled) {
    Tensor d(rows, d_pooled.size());
    for (std::size_t m = 0; m < rows; ++m)
        for (std::size_t j = 0; j < d_pooled.size(); ++j) d(m, j) = d_pooled[j] / static_cast<double>(rows);
    return d;
}

// ---------------------------------------------------------------------------
// Concept head  c = sigmoid(relu(x W1 + b1) W2 + b2), dropout on the hidden layer.
// ---------------------------------------------------------------------------

struct ConceptHeadParams {
    Tensor w1;  // C' x H
    Tensor b1;  // 1 x H
    Tensor w2;  // H x K
    Tensor b2;  // 1 x K
    double dropout_rate = 0.1;

    static ConceptHeadParams init(std::size_t in, std::size_t hidden, std::size_t concepts, double dropout,
                                  RngStream& rng) {
        ConceptHeadParams p{Tensor(in, hidden), Tensor(1, hidden), Tensor(hidden, concepts), Tensor(1, concepts),
                            dropout};
        init_normal(p.w1, rng, std::sqrt(2.0 / static_cast<double>(in)));
        init_normal(p.w2, rng, 1.0 / std::sqrt(static_cast<double>(hidden)));
        return p;
    }

    std::size_t concepts() const { return w2.cols; }

    template <class F>
    void for_each(const std::string& prefix, F&& f) {
        f(prefix + ".w1", w1);
        f(prefix + ".b1", b1);
        f(prefix + ".w2", w2);
        f(prefix + ".b2", b2);
    }
};

struct ConceptHeadCache {
    Vec input;
    Vec pre_hidden;
    Vec mask;    // scaled keep mask; empty when dropout off
    Vec hidden;  // after relu and dropout
    Vec probs;
};

inline Vec predict_concepts(std::span<const double> pooled, const ConceptHeadParams& p, Dropout dropout = Dropout::off(),
                            ConceptHeadCache* cache = nullptr) {
    if (pooled.size() != p.w1.rows)
        throw DimensionError("predict_concepts: pooled width " + std::to_string(pooled.size()) + ", W1 expects " +
                             std::to_string(p.w1.rows));
    const std::size_t hidden = p.w1.cols;
    require_shape(p.b1, 1, hidden, "concept head b1");
    if (p.w2.rows != hidden) throw DimensionError("concept head W2 rows " + std::to_string(p.w2.rows));
    require_shape(p.b2, 1, p.w2.cols, "concept head b2");

    Vec pre(p.b1.data);
    for (std::size_t i = 0; i < pooled.size(); ++i) {
        const double xi = pooled[i];
        for (std::size_t h = 0; h < hidden; ++h) pre[h] += xi * p.w1(i, h);
    }
    Vec act(hidden);
    for (std::size_t h = 0; h < hidden; ++h) act[h] = std::max(0.0, pre[h]);
    Vec mask;
    if (dropout.active()) {
        mask.resize(hidden);
        const double keep = 1.0 / (1.0 - dropout.rate);
        for (std::size_t h = 0; h < hidden; ++h) {
            mask[h] = dropout.rng->bernoulli(dropout.rate) ? 0.0 : keep;
            act[h] *= mask[h];
        }
    }
    Vec probs(p.b2.data);
    for (std::size_t h = 0; h < hidden; ++h) {
        if (act[h] == 0.0) continue;
        for (std::size_t k = 0; k < probs.size(); ++k) probs[k] += act[h] * p.w2(h, k);
    }
    for (auto& v : probs) v = sigmoid(v);
    if (cache) {
        cache->input.assign(pooled.begin(), pooled.end());
        cache->pre_hidden = std::move(pre);
        cache->mask = std::move(mask);
        cache->hidden = std::move(act);
        cache->probs = probs;
    }
    return probs;
}

/// Backward from dL/dc. Returns dL/d(pooled).
inline Vec predict_concepts_backward(const ConceptHeadCache& cache, const ConceptHeadParams& p,
                                     std::span<const double> d_probs, ConceptHeadParams& grad) {
    const std::size_t hidden = p.w1.cols;
    const std::size_t k_count = p.w2.cols;
    Vec d_logit(k_count);
    for (std::size_t k = 0; k < k_count; ++k) d_logit[k] = d_probs[k] * cache.probs[k] * (1.0 - cache.probs[k]);
    Vec d_hidden(hidden, 0.0);
    for (std::size_t h = 0; h < hidden; ++h) {
        for (std::size_t k = 0; k < k_count; ++k) {
            grad.w2(h, k) += cache.hidden[h] * d_logit[k];
            d_hidden[h] += p.w2(h, k) * d_logit[k];
        }
    }
    for (std::size_t k = 0; k < k_count; ++k) grad.b2.data[k] += d_logit[k];
    for (std::size_t h = 0; h < hidden; ++h) {
        if (!cache.mask.empty()) d_hidden[h] *= cache.mask[h];
        if (cache.pre_hidden[h] <= 0.0) d_hidden[h] = 0.0;
    }
    Vec d_in(cache.input.size(), 0.0);
    for (std::size_t i = 0; i < cache.input.size(); ++i) {
        for (std::size_t h = 0; h < hidden; ++h) {
            grad.w1(i, h) += cache.input[i] * d_hidden[h];
            d_in[i] += p.w1(i, h) * d_hidden[h];
        }
    }
    for (std::size_t h = 0; h < hidden; ++h) grad.b1.data[h] += d_hidden[h];
    return d_in;
}

// ---------------------------------------------------------------------------
// Alpha-balanced binary focal loss, averaged over concepts.
// ---------------------------------------------------------------------------

inline constexpr double kProbClamp = 1e-7;

struct LossAndGrad {
    double loss = 0.0;
    Vec grad;
};

inline LossAndGrad focal_loss(std::span<const double> probs, std::span<const double> targets, double gamma = 2.0,
                              double alpha_bal = 0.25) {
    if (probs.size() != targets.size()) throw DimensionError("focal_loss: prediction/target length mismatch");
    if (probs.empty()) throw DimensionError("focal_loss: empty input");
    if (gamma < 0.0) throw ArgumentError("focal_loss: gamma must be >= 0");
    if (!(alpha_bal > 0.0 && alpha_bal < 1.0)) throw ArgumentError("focal_loss: alpha_bal must lie in (0,1)");

    const double n = static_cast<double>(probs.size());
    LossAndGrad out{0.0, Vec(probs.size(), 0.0)};
    for (std::size_t k = 0; k < probs.size(); ++k) {
        const double raw = probs[k];
        const double p = std::clamp(raw, kProbClamp, 1.0 - kProbClamp);
        const bool clamped = p != raw;
        const double y = targets[k];
        const double q = 1.0 - p;
        const double pos_w = std::pow(q, gamma);
        const double neg_w = std::pow(p, gamma);
        out.loss += -alpha_bal * y * pos_w * std::log(p) - (1.0 - alpha_bal) * (1.0 - y) * neg_w * std::log(q);
        if (clamped) continue;
        const double d_pos_w = gamma > 0.0 ? gamma * std::pow(q, gamma - 1.0) : 0.0;  // d(q^g)/dq
        const double d_neg_w = gamma > 0.0 ? gamma * std::pow(p, gamma - 1.0) : 0.0;  // d(p^g)/dp
        const double d_pos = -alpha_bal * y * (-d_pos_w * std::log(p) + pos_w / p);
        const double d_neg = -(1.0 - alpha_bal) * (1.0 - y) * (d_neg_w * std::log(q) - neg_w / q);
        out.grad[k] = (d_pos + d_neg) / n;
    }
    out.loss /= n;
    return out;
}

/// Mean binary cross-entropy with clamped probabilities.
inline LossAndGrad bce_loss(std::span<const double> probs, std::span<const double> targets) {
    if (probs.size() != targets.size()) throw DimensionError("bce_loss: prediction/target length mismatch");
    LossAndGrad out{0.0, Vec(probs.size(), 0.0)};
    if (probs.empty()) return out;
    const double n = static_cast<double>(probs.size());
    for (std::size_t k = 0; k < probs.size(); ++k) {
        const double p = std::clamp(probs[k], kProbClamp, 1.0 - kProbClamp);
        const double y = targets[k];
        out.loss += -(y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
        if (p == probs[k]) out.grad[k] = (-y / p + (1.0 - y) / (1.0 - p)) / n;
    }
    out.loss /= n;
    return out;
}

// ---------------------------------------------------------------------------
// Adam.
// ---------------------------------------------------------------------------

struct ParamRef {
    std::string path;
    Tensor* value = nullptr;
    const Tensor* grad = nullptr;
};

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct OptimState {
    AdamConfig cfg;
    std::uint64_t step = 0;
    std::vector<Tensor> m;
    std::vector<Tensor> v;
};

/// One bias-corrected Adam update. Validates every gradient before touching
/// any parameter, so a failure leaves params and state unchanged.
inline void adam_step(std::span<const ParamRef> params, OptimState& s) {
    for (const auto& p : params) {
        if (!p.value || !p.grad) throw ArgumentError("adam_step: null tensor for " + p.path);
        if (!p.value->same_shape(*p.grad))
            throw DimensionError("adam_step: gradient shape " + shape_str(*p.grad) + " != parameter shape " +
                                 shape_str(*p.value) + " at " + p.path);
        if (!p.grad->all_finite()) throw TrainingError("adam_step: non-finite gradient at " + p.path);
    }
    if (s.m.empty()) {
        for (const auto& p : params) {
            s.m.emplace_back(p.value->rows, p.value->cols);
            s.v.emplace_back(p.value->rows, p.value->cols);
        }
    }
    if (s.m.size() != params.size()) throw DimensionError("adam_step: optimizer state has wrong parameter count");
    for (std::size_t i = 0; i < params.size(); ++i)
        if (!s.m[i].same_shape(*params[i].value))
            throw DimensionError("adam_step: moment shape mismatch at " + params[i].path);

    ++s.step;
    const auto& c = s.cfg;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(s.step));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(s.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& w = params[i].value->data;
        const auto& g = params[i].grad->data;
        auto& m = s.m[i].data;
        auto& v = s.v[i].data;
        for (std::size_t j = 0; j < w.size(); ++j) {
            m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
            v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
            const double m_hat = m[j] / bc1;
            const double v_hat = v[j] / bc2;
            w[j] -= c.lr * m_hat / (std::sqrt(v_hat) + c.eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Central-difference gradient check.
// ---------------------------------------------------------------------------

/// f(theta, grad_out) returns the value and, when grad_out is non-null, writes
/// the analytic gradient. Returns max_i |analytic_i - numeric_i| / max(1, |analytic_i|).
using DiffFn = std::function<double(const Vec&, Vec*)>;

inline double finite_diff_check(const DiffFn& f, const Vec& theta0, double h = 1e-5) {
    Vec analytic(theta0.size(), 0.0);
    f(theta0, &analytic);
    double worst = 0.0;
    Vec theta = theta0;
    for (std::size_t i = 0; i < theta0.size(); ++i) {
        theta[i] = theta0[i] + h;
        const double up = f(theta, nullptr);
        theta[i] = theta0[i] - h;
        const double down = f(theta, nullptr);
        theta[i] = theta0[i];
        const double numeric = (up - down) / (2.0 * h);
        worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i])));
    }
    return worst;
}

}  // namespace nsmrg
