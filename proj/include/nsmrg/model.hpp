#pragma once

// Full differentiable pipeline:
//   X -> encoder -> mean pool -> concept head -> rule trees
//                           \-> template-selection logits, slot regressors
//   X -> projection -> mean  (retrieval / k-center embedding only)
// plus the homoscedastic composite objective over the task losses.

#include <array>
#include <string>
#include <vector>

#include "nsmrg/core.hpp"
#include "nsmrg/generation.hpp"
#include "nsmrg/logic.hpp"
#include "nsmrg/nn.hpp"

namespace nsmrg {

struct ModelDims {
    std::size_t width = 32;   // C'
    std::size_t embed = 32;   // D
    std::size_t heads = 8;
    std::size_t ffn = 128;    // F
    std::size_t hidden = 64;  // H_mlp
};

// ---------------------------------------------------------------------------
// Composite loss with learned log-variances s_i = log sigma_i^2.
// ---------------------------------------------------------------------------

enum TaskIndex : std::size_t { kTaskRep = 0, kTaskConcept = 1, kTaskTemplate = 2, kTaskRule = 3 };
inline constexpr std::size_t kTaskCount = 4;
inline constexpr std::array<const char*, kTaskCount> kTaskNames{"rep", "concept", "task", "rule"};
inline constexpr std::array<double, kTaskCount> kDefaultLambdas{1.0, 2.0, 1.0, 1.0};
inline constexpr double kDefaultRidge = 1e-4;

struct LossWeights {
    Tensor log_vars{1, kTaskCount};
    double ridge = kDefaultRidge;

    /// s_i chosen so that 1/(2 sigma_i^2) equals lambda_i.
    static LossWeights from_lambdas(const std::array<double, kTaskCount>& lambdas, double ridge = kDefaultRidge) {
        if (ridge < 0.0) throw ConfigError("ridge coefficient must be >= 0");
        LossWeights w;
        w.ridge = ridge;
        for (std::size_t i = 0; i < kTaskCount; ++i) {
            if (!(lambdas[i] > 0.0)) throw ConfigError(std::string("loss weight for ") + kTaskNames[i] + " must be > 0");
            w.log_vars.data[i] = -std::log(2.0 * lambdas[i]);
        }
        return w;
    }

    double variance(std::size_t i) const { return std::exp(log_vars.data[i]); }
    double effective(std::size_t i) const { return std::exp(-log_vars.data[i]) / 2.0; }
};

struct CompositeLoss {
    double total = 0.0;
    std::array<double, kTaskCount> weights{};
    std::array<double, kTaskCount> d_log_vars{};
};

/// total = sum_i [exp(-s_i)/2 * L_i + s_i/2] + ridge * theta_sq over active tasks.
/// Inactive tasks contribute nothing and their s_i receives no gradient.
inline CompositeLoss composite_loss(const std::array<double, kTaskCount>& parts, const LossWeights& w,
                                    double theta_sq = 0.0,
                                    const std::array<bool, kTaskCount>& active = {true, true, true, true}) {
    CompositeLoss out;
    for (std::size_t i = 0; i < kTaskCount; ++i) {
        if (!std::isfinite(parts[i])) throw TrainingError(std::string("non-finite loss for task ") + kTaskNames[i]);
        if (parts[i] < 0.0) throw TrainingError(std::string("negative loss for task ") + kTaskNames[i]);
        out.weights[i] = w.effective(i);
        if (!active[i]) continue;
        const double s = w.log_vars.data[i];
        out.total += out.weights[i] * parts[i] + s / 2.0;
        out.d_log_vars[i] = -out.weights[i] * parts[i] + 0.5;
    }
    if (!std::isfinite(theta_sq)) throw TrainingError("non-finite parameter norm");
    out.total += w.ridge * theta_sq;
    return out;
}

// ---------------------------------------------------------------------------
// Model.
// ---------------------------------------------------------------------------

struct Model {
    ModelDims dims;
    ProjectionParams proj;
    EncoderParams enc;
    ConceptHeadParams head;
    RuleLibrary rules;
    Tensor tmpl_w, tmpl_b;  // C' x T, 1 x T
    std::vector<std::string> regressors;
    Tensor reg_w, reg_b;  // C' x Q, 1 x Q
    LossWeights loss;

    static Model init(const ModelDims& dims, RuleLibrary rules, std::size_t template_count, double dropout,
                      RngStream& rng, const std::array<double, kTaskCount>& lambdas = kDefaultLambdas,
                      double ridge = kDefaultRidge) {
        if (rules.concepts.empty()) throw ConfigError("model: rule library declares no concepts");
        if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("model: dropout rate must lie in [0,1)");
        Model m;
        m.dims = dims;
        RngStream r_proj = rng.fork(1), r_enc = rng.fork(2), r_head = rng.fork(3), r_task = rng.fork(4);
        m.proj = ProjectionParams::init(dims.width, dims.embed, r_proj);
        m.enc = EncoderParams::init(dims.width, dims.heads, dims.ffn, r_enc);
        m.head = ConceptHeadParams::init(dims.width, dims.hidden, rules.concepts.size(), dropout, r_head);
        m.regressors = rules.regressors();
        m.rules = std::move(rules);
        const double s = 1.0 / std::sqrt(static_cast<double>(dims.width));
        m.tmpl_w = Tensor(dims.width, template_count);
        m.tmpl_b = Tensor(1, template_count);
        init_normal(m.tmpl_w, r_task, s);
        m.reg_w = Tensor(dims.width, m.regressors.size());
        m.reg_b = Tensor(1, m.regressors.size());
        init_normal(m.reg_w, r_task, s);
        m.loss = LossWeights::from_lambdas(lambdas, ridge);
        return m;
    }

    std::size_t concepts() const { return head.concepts(); }
    std::size_t rule_count() const { return rules.size(); }
    std::size_t template_count() const { return tmpl_w.cols; }

    /// Visits every learnable tensor with a stable path.
    template <class F>
    void for_each(F&& f) {
        proj.for_each("proj", f);
        enc.for_each("enc", f);
        head.for_each("head", f);
        for (auto& r : rules.rules) f("rules." + r.tree.id + ".gates", r.tree.gates);
        f("task.tmpl_w", tmpl_w);
        f("task.tmpl_b", tmpl_b);
        f("task.reg_w", reg_w);
        f("task.reg_b", reg_b);
        f("loss.log_vars", loss.log_vars);
    }

    template <class F>
    void for_each(F&& f) const {
        const_cast<Model*>(this)->for_each([&](const std::string& path, Tensor& t) { f(path, std::as_const(t)); });
    }

    Model zeros_like() const {
        Model z = *this;
        z.for_each([](const std::string&, Tensor& t) { t.fill(0.0); });
        return z;
    }

    /// Paths subject to the ridge penalty: dense weight matrices on the training path.
    static bool ridge_applies(const std::string& path) {
        static const std::array<std::string_view, 10> names{".wq", ".wk", ".wv", ".wo", ".ff1", ".ff2", ".w1", ".w2",
                                                            "tmpl_w", "reg_w"};
        if (path.rfind("proj.", 0) == 0) return false;
        return std::any_of(names.begin(), names.end(), [&](std::string_view n) {
            return path.size() >= n.size() && path.compare(path.size() - n.size(), n.size(), n) == 0;
        });
    }

    double ridge_norm_sq() const {
        double s = 0.0;
        for_each([&](const std::string& path, const Tensor& t) {
            if (ridge_applies(path))
                for (double x : t.data) s += x * x;
        });
        return s;
    }
};

struct ForwardOptions {
    bool rules_on_hard = false;  // straight-through: rule trees see hardened concepts
    double hard_threshold = 0.5;
};

struct Forward {
    Vec embedding;  // mean of projected patches (D)
    Vec pooled;     // x-bar (C')
    Vec concepts;   // K
    Vec rules;      // R
    Vec template_logits;
    Vec numeric;  // Q
};

struct ForwardCache {
    EncoderCache enc;
    ConceptHeadCache head;
    std::vector<RuleEvalCache> rule;
    Vec rule_input;
};

inline Forward forward(const Model& m, const Tensor& x, Dropout head_dropout = Dropout::off(),
                       ForwardCache* cache = nullptr, const ForwardOptions& opts = {}) {
    if (!x.all_finite()) throw DimensionError("forward: feature matrix has non-finite entries");
    if (x.rows == 0) throw PreconditionError("forward: feature matrix has no rows");
    Forward f;
    f.embedding = pool_mean(project_features(x, m.proj));
    const Tensor encoded = encode_attend(x, m.enc, Dropout::off(), cache ? &cache->enc : nullptr);
    f.pooled = pool_mean(encoded);
    f.concepts = predict_concepts(f.pooled, m.head, head_dropout, cache ? &cache->head : nullptr);

    Vec rule_input = opts.rules_on_hard ? harden(f.concepts, opts.hard_threshold).as_values() : f.concepts;
    f.rules.resize(m.rule_count());
    if (cache) cache->rule.resize(m.rule_count());
    for (std::size_t j = 0; j < m.rule_count(); ++j)
        f.rules[j] = eval_rule_tree(m.rules.rules[j].tree, rule_input, cache ? &cache->rule[j] : nullptr);
    if (cache) cache->rule_input = std::move(rule_input);

    f.template_logits = m.tmpl_b.data;
    f.numeric = m.reg_b.data;
    for (std::size_t i = 0; i < f.pooled.size(); ++i) {
        const double xi = f.pooled[i];
        for (std::size_t t = 0; t < f.template_logits.size(); ++t) f.template_logits[t] += xi * m.tmpl_w(i, t);
        for (std::size_t q = 0; q < f.numeric.size(); ++q) f.numeric[q] += xi * m.reg_w(i, q);
    }
    return f;
}

/// dL/d(outputs) of one sample, already scaled by task weights.
struct Upstream {
    Vec d_concepts;
    Vec d_rules;
    Vec d_template_logits;
    Vec d_numeric;
};

/// Accumulates parameter gradients into `grad`. The projection is not on the
/// path of any active objective and receives nothing.
inline void backward(const Model& m, const ForwardCache& c, const Upstream& up, Model& grad) {
    Vec d_concepts = up.d_concepts;
    for (std::size_t j = 0; j < m.rule_count(); ++j) {
        if (up.d_rules[j] == 0.0) continue;
        const auto& tree = m.rules.rules[j].tree;
        const auto g = backprop_rule_tree(tree, c.rule[j], up.d_rules[j], c.rule_input);
        // Hardened inputs pass gradient straight through to the soft concepts.
        const Vec through = harden_backward(g.d_concepts);
        for (std::size_t k = 0; k < d_concepts.size(); ++k) d_concepts[k] += through[k];
        auto& gg = grad.rules.rules[j].tree.gates.data;
        for (std::size_t i = 0; i < gg.size(); ++i) gg[i] += g.d_raw[i];
    }
    Vec d_pooled = predict_concepts_backward(c.head, m.head, d_concepts, grad.head);
    const auto& xbar = c.head.input;
    for (std::size_t i = 0; i < xbar.size(); ++i) {
        for (std::size_t t = 0; t < up.d_template_logits.size(); ++t) {
            grad.tmpl_w(i, t) += xbar[i] * up.d_template_logits[t];
            d_pooled[i] += m.tmpl_w(i, t) * up.d_template_logits[t];
        }
        for (std::size_t q = 0; q < up.d_numeric.size(); ++q) {
            grad.reg_w(i, q) += xbar[i] * up.d_numeric[q];
            d_pooled[i] += m.reg_w(i, q) * up.d_numeric[q];
        }
    }
    for (std::size_t t = 0; t < up.d_template_logits.size(); ++t) grad.tmpl_b.data[t] += up.d_template_logits[t];
    for (std::size_t q = 0; q < up.d_numeric.size(); ++q) grad.reg_b.data[q] += up.d_numeric[q];
    const Tensor d_encoded = pool_mean_backward(c.enc.input.rows, d_pooled);
    encode_attend_backward(c.enc, m.enc, d_encoded, grad.enc, nullptr);
}

// ---------------------------------------------------------------------------
// Per-sample supervision and losses.
// ---------------------------------------------------------------------------

struct Targets {
    Vec concepts;       // K, 0/1
    Vec rules;          // R, 0/1
    Vec templates;      // T, 0/1
    Vec template_mask;  // T, 1 where the template is supervised
    Vec numeric;        // Q
    Vec numeric_mask;   // Q
};

struct ObjectiveOptions {
    double gamma = 2.0;
    double alpha_bal = 0.25;
    bool use_rule_loss = true;
    ForwardOptions forward;
};

/// Masked mean BCE on logits: softplus(z) - y z.
inline LossAndGrad masked_bce_logits(std::span<const double> logits, std::span<const double> y,
                                     std::span<const double> mask) {
    LossAndGrad out{0.0, Vec(logits.size(), 0.0)};
    double n = 0.0;
    for (double w : mask) n += w;
    if (n == 0.0) return out;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        if (mask[i] == 0.0) continue;
        const double z = logits[i];
        const double softplus = z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
        out.loss += mask[i] * (softplus - y[i] * z);
        out.grad[i] = mask[i] * (sigmoid(z) - y[i]) / n;
    }
    out.loss /= n;
    return out;
}

inline LossAndGrad masked_mse(std::span<const double> pred, std::span<const double> y, std::span<const double> mask) {
    LossAndGrad out{0.0, Vec(pred.size(), 0.0)};
    double n = 0.0;
    for (double w : mask) n += w;
    if (n == 0.0) return out;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double e = pred[i] - y[i];
        out.loss += mask[i] * e * e;
        out.grad[i] = 2.0 * mask[i] * e / n;
    }
    out.loss /= n;
    return out;
}

/// Mean BCE whose gradient is taken at the clamped probability, so exact
/// 0/1 activations from hardened inputs still produce a signal.
inline LossAndGrad rule_bce(std::span<const double> probs, std::span<const double> y) {
    LossAndGrad out{0.0, Vec(probs.size(), 0.0)};
    if (probs.empty()) return out;
    const double n = static_cast<double>(probs.size());
    for (std::size_t j = 0; j < probs.size(); ++j) {
        const double p = std::clamp(probs[j], kProbClamp, 1.0 - kProbClamp);
        out.loss += -(y[j] * std::log(p) + (1.0 - y[j]) * std::log(1.0 - p));
        out.grad[j] = (p - y[j]) / (p * (1.0 - p)) / n;
    }
    out.loss /= n;
    return out;
}

struct SampleLosses {
    std::array<double, kTaskCount> parts{};
    LossAndGrad concept_term, rule_term, template_term, numeric_term;
};

inline SampleLosses sample_losses(const Forward& f, const Targets& y, const ObjectiveOptions& o) {
    SampleLosses s;
    s.concept_term = focal_loss(f.concepts, y.concepts, o.gamma, o.alpha_bal);
    s.rule_term = o.use_rule_loss ? rule_bce(f.rules, y.rules) : LossAndGrad{0.0, Vec(f.rules.size(), 0.0)};
    s.template_term = masked_bce_logits(f.template_logits, y.templates, y.template_mask);
    s.numeric_term = masked_mse(f.numeric, y.numeric, y.numeric_mask);
    s.parts[kTaskRep] = 0.0;
    s.parts[kTaskConcept] = s.concept_term.loss;
    s.parts[kTaskTemplate] = s.template_term.loss + s.numeric_term.loss;
    s.parts[kTaskRule] = s.rule_term.loss;
    return s;
}

inline std::array<bool, kTaskCount> active_tasks(const ObjectiveOptions& o) {
    return {false, true, true, o.use_rule_loss};
}

struct BatchItem {
    const Tensor* x;
    const Targets* y;
};

struct BatchResult {
    CompositeLoss loss;
    std::array<double, kTaskCount> parts{};  // batch means
};

/// Composite objective over a batch (per-task losses are batch means). When
/// `grad` is non-null it receives the exact gradient of `loss.total`.
inline BatchResult batch_objective(const Model& m, std::span<const BatchItem> batch, const ObjectiveOptions& o,
                                   Model* grad) {
    if (batch.empty()) throw PreconditionError("batch_objective: empty batch");
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    std::array<double, kTaskCount> w{};
    for (std::size_t i = 0; i < kTaskCount; ++i) w[i] = m.loss.effective(i);
    const auto active = active_tasks(o);

    BatchResult r;
    ForwardCache cache;
    for (const auto& item : batch) {
        const Forward f = forward(m, *item.x, Dropout::off(), grad ? &cache : nullptr, o.forward);
        const SampleLosses s = sample_losses(f, *item.y, o);
        for (std::size_t i = 0; i < kTaskCount; ++i) r.parts[i] += s.parts[i] * inv_b;
        if (!grad) continue;
        Upstream up;
        up.d_concepts = s.concept_term.grad;
        for (auto& g : up.d_concepts) g *= w[kTaskConcept] * inv_b;
        up.d_rules = s.rule_term.grad;
        for (auto& g : up.d_rules) g *= active[kTaskRule] ? w[kTaskRule] * inv_b : 0.0;
        up.d_template_logits = s.template_term.grad;
        for (auto& g : up.d_template_logits) g *= w[kTaskTemplate] * inv_b;
        up.d_numeric = s.numeric_term.grad;
        for (auto& g : up.d_numeric) g *= w[kTaskTemplate] * inv_b;
        backward(m, cache, up, *grad);
    }
    r.loss = composite_loss(r.parts, m.loss, m.ridge_norm_sq(), active);
    if (grad) {
        for (std::size_t i = 0; i < kTaskCount; ++i) grad->loss.log_vars.data[i] += r.loss.d_log_vars[i];
        const double ridge = m.loss.ridge;
        std::vector<Tensor*> grads;
        grad->for_each([&](const std::string&, Tensor& g) { grads.push_back(&g); });
        std::size_t idx = 0;
        m.for_each([&](const std::string& path, const Tensor& t) {
            Tensor& g = *grads[idx++];
            if (!Model::ridge_applies(path)) return;
            for (std::size_t i = 0; i < t.data.size(); ++i) g.data[i] += 2.0 * ridge * t.data[i];
        });
    }
    return r;
}

// ---------------------------------------------------------------------------
// Decoding a forward pass into clauses.
// ---------------------------------------------------------------------------

inline std::map<std::string, double> numeric_map(const Model& m, const Forward& f) {
    std::map<std::string, double> out;
    for (std::size_t q = 0; q < m.regressors.size(); ++q) out[m.regressors[q]] = f.numeric[q];
    return out;
}

inline std::vector<Clause> decode_forward(const Model& m, const TemplateLibrary& templates, const Forward& f,
                                          const KgScoreFn& kg = {}, const DecodeOptions& opts = {}) {
    if (m.rule_count() == 0) return {};
    Vec scores(f.template_logits.size());
    for (std::size_t t = 0; t < scores.size(); ++t) scores[t] = sigmoid(f.template_logits[t]);
    const auto top = top_h_rules(f.rules, m.rule_count());
    DecodeContext ctx{m.rules, templates, f.rules, f.concepts, scores, numeric_map(m, f), kg, opts};
    return decode_rules(top, ctx);
}

}  // namespace nsmrg
