#pragma once

// Training configuration, evaluation metrics and the training loop (full
// supervision or active rounds) over a synthetic world.

#include <algorithm>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "nsmrg/active.hpp"
#include "nsmrg/checkpoint.hpp"
#include "nsmrg/generation.hpp"
#include "nsmrg/model.hpp"
#include "nsmrg/world.hpp"

namespace nsmrg {

// ---------------------------------------------------------------------------
// Configuration.
// ---------------------------------------------------------------------------

struct TrainConfig {
    std::uint64_t seed = 7;

    ModelDims dims;
    double dropout = 0.1;

    WorldSpec world;
    std::size_t n_train = 2000;
    std::size_t n_test = 200;

    std::size_t epochs = 15;
    std::size_t batch_size = 6;
    double lr = 1e-4;
    double gamma = 2.0;
    double alpha_bal = 0.25;
    std::array<double, kTaskCount> lambdas = kDefaultLambdas;
    double ridge = kDefaultRidge;
    bool use_rule_loss = true;
    bool train_through_harden = false;
    bool prior_bias = true;  // start the concept output bias at logit(labeled prevalence)

    bool active = false;
    Policy policy = Policy::EntropyKCenter;
    std::size_t rounds = 5;
    std::size_t k = 16;
    std::size_t m_cand = 0;  // 0 means 4k
    std::size_t t_mc = 5;
    std::size_t initial_labeled = 16;
    std::size_t pool_size = 0;  // 0 means every unlabeled training sample
    double eta = 0.0;
    bool bernoulli_entropy = false;
    bool prefilter = false;

    std::size_t n_r = 3;
    DecodeOptions decode;
    double review_threshold = kReviewThreshold;

    std::size_t candidate_window() const { return m_cand ? m_cand : 4 * k; }

    ObjectiveOptions objective() const {
        ObjectiveOptions o;
        o.gamma = gamma;
        o.alpha_bal = alpha_bal;
        o.use_rule_loss = use_rule_loss;
        o.forward.rules_on_hard = train_through_harden;
        o.forward.hard_threshold = decode.hard_threshold;
        return o;
    }

    void validate() const {
        auto need = [](bool ok, const char* what) {
            if (!ok) throw ConfigError(what);
        };
        need(dims.width > 0 && dims.embed > 0 && dims.ffn > 0 && dims.hidden > 0, "dims must be positive");
        need(dims.heads > 0 && dims.width % dims.heads == 0, "model.width must be divisible by model.heads");
        need(dropout >= 0.0 && dropout < 1.0, "model.dropout must lie in [0,1)");
        need(batch_size > 0, "train.batch_size must be positive");
        need(lr >= 0.0, "train.lr must be >= 0");
        need(gamma >= 0.0, "train.gamma must be >= 0");
        need(alpha_bal > 0.0 && alpha_bal < 1.0, "train.alpha_bal must lie in (0,1)");
        need(ridge >= 0.0, "train.ridge must be >= 0");
        for (double l : lambdas) need(l > 0.0, "train.lambdas must be positive");
        need(n_train > 0 && n_test > 0, "world.n_train and world.n_test must be positive");
        need(k > 0 && t_mc > 0, "active.k and active.t_mc must be positive");
        need(eta >= 0.0 && eta < 1.0, "active.eta must lie in [0,1)");
        need(n_r > 0, "generation.n_r must be positive");
        need(decode.hard_threshold > 0.0 && decode.hard_threshold < 1.0, "generation.hard_threshold must lie in (0,1)");
    }
};

namespace config_detail {

using nlohmann::json;

inline void reject_unknown(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + ": expected an object");
    for (const auto& [k, v] : j.items()) {
        if (std::none_of(keys.begin(), keys.end(), [&](const char* s) { return k == s; }))
            throw ConfigError("unknown config key '" + (where.empty() ? k : where + "." + k) + "'");
    }
}

template <class T>
void read(const json& j, const char* key, T& out, const std::string& where) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError("config key '" + where + "." + key + "' has the wrong type");
    }
}

}  // namespace config_detail

inline constexpr int kConfigVersion = 1;

inline nlohmann::json to_json(const TrainConfig& c) {
    return {
        {"version", kConfigVersion},
        {"seed", c.seed},
        {"model",
         {{"width", c.dims.width}, {"embed", c.dims.embed}, {"heads", c.dims.heads}, {"ffn", c.dims.ffn},
          {"hidden", c.dims.hidden}, {"dropout", c.dropout}}},
        {"world",
         {{"patches", c.world.patches}, {"noise", c.world.noise}, {"embed_scale", c.world.embed_scale},
          {"orthogonal", c.world.orthogonal}, {"offset_scale", c.world.offset_scale}, {"min_fraction", c.world.min_fraction},
          {"alpha_and", c.world.alpha_and}, {"alpha_or", c.world.alpha_or},
          {"rare_prevalence", c.world.rare_prevalence}, {"n_train", c.n_train}, {"n_test", c.n_test}}},
        {"train",
         {{"epochs", c.epochs}, {"batch_size", c.batch_size}, {"lr", c.lr}, {"gamma", c.gamma},
          {"alpha_bal", c.alpha_bal}, {"lambdas", c.lambdas}, {"ridge", c.ridge}, {"use_rule_loss", c.use_rule_loss},
          {"train_through_harden", c.train_through_harden}, {"prior_bias", c.prior_bias}}},
        {"active",
         {{"enabled", c.active}, {"policy", to_string(c.policy)}, {"rounds", c.rounds}, {"k", c.k},
          {"m_cand", c.m_cand}, {"t_mc", c.t_mc}, {"initial_labeled", c.initial_labeled},
          {"pool_size", c.pool_size}, {"eta", c.eta}, {"bernoulli_entropy", c.bernoulli_entropy},
          {"prefilter", c.prefilter}}},
        {"generation",
         {{"n_r", c.n_r}, {"fire_threshold", c.decode.fire_threshold}, {"hard_threshold", c.decode.hard_threshold},
          {"vote_margin", c.decode.vote_margin}, {"cannot_exclude_band", c.decode.cannot_exclude_band},
          {"review_threshold", c.review_threshold}}},
    };
}

/// Missing keys keep defaults; unknown keys are rejected.
inline TrainConfig config_from_json(const nlohmann::json& j) {
    using namespace config_detail;
    TrainConfig c;
    reject_unknown(j, {"version", "seed", "model", "world", "train", "active", "generation"}, "");
    if (j.contains("version") && j["version"] != kConfigVersion)
        throw VersionError("config version " + j["version"].dump() + " unsupported (expected 1)");
    read(j, "seed", c.seed, "");
    if (j.contains("model")) {
        const auto& m = j["model"];
        reject_unknown(m, {"width", "embed", "heads", "ffn", "hidden", "dropout"}, "model");
        read(m, "width", c.dims.width, "model");
        read(m, "embed", c.dims.embed, "model");
        read(m, "heads", c.dims.heads, "model");
        read(m, "ffn", c.dims.ffn, "model");
        read(m, "hidden", c.dims.hidden, "model");
        read(m, "dropout", c.dropout, "model");
    }
    if (j.contains("world")) {
        const auto& w = j["world"];
        reject_unknown(w, {"patches", "noise", "embed_scale", "orthogonal", "offset_scale", "min_fraction", "alpha_and", "alpha_or",
                           "rare_prevalence", "n_train", "n_test"},
                       "world");
        read(w, "patches", c.world.patches, "world");
        read(w, "noise", c.world.noise, "world");
        read(w, "embed_scale", c.world.embed_scale, "world");
        read(w, "orthogonal", c.world.orthogonal, "world");
        read(w, "offset_scale", c.world.offset_scale, "world");
        read(w, "min_fraction", c.world.min_fraction, "world");
        read(w, "alpha_and", c.world.alpha_and, "world");
        read(w, "alpha_or", c.world.alpha_or, "world");
        read(w, "rare_prevalence", c.world.rare_prevalence, "world");
        read(w, "n_train", c.n_train, "world");
        read(w, "n_test", c.n_test, "world");
    }
    if (j.contains("train")) {
        const auto& t = j["train"];
        reject_unknown(t, {"epochs", "batch_size", "lr", "gamma", "alpha_bal", "lambdas", "ridge", "use_rule_loss",
                           "train_through_harden", "prior_bias"},
                       "train");
        read(t, "epochs", c.epochs, "train");
        read(t, "batch_size", c.batch_size, "train");
        read(t, "lr", c.lr, "train");
        read(t, "gamma", c.gamma, "train");
        read(t, "alpha_bal", c.alpha_bal, "train");
        read(t, "lambdas", c.lambdas, "train");
        read(t, "ridge", c.ridge, "train");
        read(t, "use_rule_loss", c.use_rule_loss, "train");
        read(t, "train_through_harden", c.train_through_harden, "train");
        read(t, "prior_bias", c.prior_bias, "train");
    }
    if (j.contains("active")) {
        const auto& a = j["active"];
        reject_unknown(a, {"enabled", "policy", "rounds", "k", "m_cand", "t_mc", "initial_labeled", "pool_size", "eta",
                           "bernoulli_entropy", "prefilter"},
                       "active");
        read(a, "enabled", c.active, "active");
        std::string policy = to_string(c.policy);
        read(a, "policy", policy, "active");
        c.policy = parse_policy(policy);
        read(a, "rounds", c.rounds, "active");
        read(a, "k", c.k, "active");
        read(a, "m_cand", c.m_cand, "active");
        read(a, "t_mc", c.t_mc, "active");
        read(a, "initial_labeled", c.initial_labeled, "active");
        read(a, "pool_size", c.pool_size, "active");
        read(a, "eta", c.eta, "active");
        read(a, "bernoulli_entropy", c.bernoulli_entropy, "active");
        read(a, "prefilter", c.prefilter, "active");
    }
    if (j.contains("generation")) {
        const auto& g = j["generation"];
        reject_unknown(g, {"n_r", "fire_threshold", "hard_threshold", "vote_margin", "cannot_exclude_band",
                           "review_threshold"},
                       "generation");
        read(g, "n_r", c.n_r, "generation");
        read(g, "fire_threshold", c.decode.fire_threshold, "generation");
        read(g, "hard_threshold", c.decode.hard_threshold, "generation");
        read(g, "vote_margin", c.decode.vote_margin, "generation");
        read(g, "cannot_exclude_band", c.decode.cannot_exclude_band, "generation");
        read(g, "review_threshold", c.review_threshold, "generation");
    }
    c.world.width = c.dims.width;
    c.validate();
    return c;
}

inline TrainConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config " + path + ": " + e.what());
    }
    return config_from_json(j);
}

/// Fingerprint of the seed, model and world sections of the canonical JSON.
/// Training, selection and decoding knobs may differ between runs that share
/// one checkpoint.
inline std::uint64_t config_hash(const TrainConfig& c) {
    const json j = to_json(c);
    return fnv1a(json{{"seed", j.at("seed")}, {"model", j.at("model")}, {"world", j.at("world")}}.dump());
}

inline SyntheticWorld make_world(const TrainConfig& c) {
    WorldSpec spec = c.world;
    spec.width = c.dims.width;
    return gen_synthetic_dataset(spec, c.n_train, c.n_test, c.seed);
}

inline Model make_model(const TrainConfig& c, const SyntheticWorld& w) {
    RngStream rng = RngStream(c.seed).fork(1000);
    return Model::init(c.dims, w.library, w.templates.size(), c.dropout, rng, c.lambdas, c.ridge);
}

// ---------------------------------------------------------------------------
// Metrics.
// ---------------------------------------------------------------------------

/// Per-concept F1 averaged over concepts. A concept with no positives and no
/// positive predictions scores 1.
inline double macro_f1(const std::vector<Vec>& probs, const std::vector<Vec>& labels, double threshold = 0.5) {
    if (probs.size() != labels.size() || probs.empty()) throw DimensionError("macro_f1: bad input sizes");
    const std::size_t k = labels.front().size();
    double sum = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
        double tp = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < probs.size(); ++i) {
            const bool p = probs[i][c] >= threshold;
            const bool y = labels[i][c] >= 0.5;
            tp += p && y;
            fp += p && !y;
            fn += !p && y;
        }
        sum += (tp + fp + fn) == 0 ? 1.0 : 2.0 * tp / (2.0 * tp + fp + fn);
    }
    return sum / static_cast<double>(k);
}

/// Mann-Whitney AUC with average ranks for ties; NaN when one class is absent.
inline double roc_auc(std::span<const double> scores, std::span<const double> labels) {
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double pos = 0, rank_sum = 0;
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
        const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
        for (std::size_t t = i; t < j; ++t)
            if (labels[idx[t]] >= 0.5) {
                rank_sum += avg_rank;
                ++pos;
            }
        i = j;
    }
    const double neg = static_cast<double>(scores.size()) - pos;
    if (pos == 0 || neg == 0) return std::numeric_limits<double>::quiet_NaN();
    return (rank_sum - pos * (pos + 1) / 2.0) / (pos * neg);
}

/// Mean AUC over rules that have both classes present.
inline double rule_auc(const std::vector<Vec>& acts, const std::vector<Vec>& bits) {
    if (acts.empty()) return std::numeric_limits<double>::quiet_NaN();
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t j = 0; j < acts.front().size(); ++j) {
        Vec s, y;
        for (std::size_t i = 0; i < acts.size(); ++i) {
            s.push_back(acts[i][j]);
            y.push_back(bits[i][j]);
        }
        const double a = roc_auc(s, y);
        if (std::isnan(a)) continue;
        sum += a;
        ++n;
    }
    return n ? sum / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

struct ClauseCounts {
    double matched = 0, predicted = 0, truth = 0;

    double precision() const { return predicted == 0 ? 1.0 : matched / predicted; }
    double recall() const { return truth == 0 ? 1.0 : matched / truth; }
};

/// Micro counts of clause keys (multiset intersection).
inline void count_clauses(const std::vector<Clause>& pred, const std::vector<Clause>& truth, ClauseCounts& acc) {
    std::multiset<std::string> t;
    for (const auto& c : truth) t.insert(c.key());
    for (const auto& c : pred) {
        auto it = t.find(c.key());
        if (it != t.end()) {
            acc.matched += 1;
            t.erase(it);
        }
    }
    acc.predicted += static_cast<double>(pred.size());
    acc.truth += static_cast<double>(truth.size());
}

struct MetricsRecord {
    std::string split = "test";
    std::size_t epoch = 0;
    std::size_t round = 0;
    std::size_t samples = 0;
    std::size_t labeled = 0;
    double loss = 0.0;
    std::array<double, 4> bleu{};
    double rouge_l = 0.0;
    double macro_f1 = 0.0;
    double rule_auc = 0.0;
    double clause_precision = 0.0;
    double clause_recall = 0.0;
    double flagged_rate = 0.0;
};

namespace metrics_detail {
inline nlohmann::json num(double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); }
inline double num(const nlohmann::json& j) {
    return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}
}  // namespace metrics_detail

inline constexpr int kMetricsVersion = 1;

inline nlohmann::json to_json(const MetricsRecord& m) {
    using metrics_detail::num;
    return {{"version", kMetricsVersion},
            {"split", m.split},
            {"epoch", m.epoch},
            {"round", m.round},
            {"samples", m.samples},
            {"labeled", m.labeled},
            {"loss", num(m.loss)},
            {"bleu", {num(m.bleu[0]), num(m.bleu[1]), num(m.bleu[2]), num(m.bleu[3])}},
            {"rouge_l", num(m.rouge_l)},
            {"macro_f1", num(m.macro_f1)},
            {"rule_auc", num(m.rule_auc)},
            {"clause_precision", num(m.clause_precision)},
            {"clause_recall", num(m.clause_recall)},
            {"flagged_rate", num(m.flagged_rate)}};
}

inline MetricsRecord metrics_from_json(const nlohmann::json& j) {
    using metrics_detail::num;
    if (j.value("version", 0) != kMetricsVersion)
        throw VersionError("metrics record version " + std::to_string(j.value("version", 0)) + " unsupported");
    MetricsRecord m;
    m.split = j.at("split").get<std::string>();
    m.epoch = j.at("epoch").get<std::size_t>();
    m.round = j.at("round").get<std::size_t>();
    m.samples = j.at("samples").get<std::size_t>();
    m.labeled = j.at("labeled").get<std::size_t>();
    m.loss = num(j.at("loss"));
    for (std::size_t i = 0; i < 4; ++i) m.bleu[i] = num(j.at("bleu").at(i));
    m.rouge_l = num(j.at("rouge_l"));
    m.macro_f1 = num(j.at("macro_f1"));
    m.rule_auc = num(j.at("rule_auc"));
    m.clause_precision = num(j.at("clause_precision"));
    m.clause_recall = num(j.at("clause_recall"));
    m.flagged_rate = num(j.at("flagged_rate"));
    return m;
}

inline void append_metrics(const std::string& path, const MetricsRecord& m) {
    std::ofstream out(path, std::ios::app);
    if (!out) throw StateError("cannot append metrics to " + path);
    out << to_json(m).dump() << '\n';
}

inline std::vector<MetricsRecord> load_metrics(const std::string& path) {
    std::vector<MetricsRecord> out;
    std::ifstream in(path);
    if (!in) throw StateError("cannot open metrics file " + path);
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.empty()) continue;
        try {
            out.push_back(metrics_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(n, 1, std::string("metrics file: ") + e.what());
        }
    }
    return out;
}

/// Byte-exact rendering of a trace, for determinism comparisons.
inline std::string trace_text(const std::vector<MetricsRecord>& trace) {
    std::string s;
    for (const auto& m : trace) s += to_json(m).dump() + "\n";
    return s;
}

// ---------------------------------------------------------------------------
// Inference and evaluation.
// ---------------------------------------------------------------------------

struct InferenceResult {
    Forward forward;
    std::vector<RuleEvalCache> node_values;  // per rule, for explanations
    Draft draft;
    double entropy = 0.0;
};

struct InferenceOptions {
    DecodeOptions decode;
    std::size_t n_r = 3;
    double review_threshold = kReviewThreshold;
    KgScoreFn kg;
};

/// Encoder, concepts, rules, decode, retrieval, fill, verify.
inline InferenceResult run_inference(const Model& m, const TemplateLibrary& templates, const Tensor& x,
                                     const ExemplarStore* store, const InferenceOptions& o) {
    InferenceResult r;
    r.forward = forward(m, x);
    r.node_values.resize(m.rule_count());
    for (std::size_t j = 0; j < m.rule_count(); ++j)
        eval_rule_tree(m.rules.rules[j].tree, r.forward.concepts, &r.node_values[j]);
    const auto clauses = decode_forward(m, templates, r.forward, o.kg, o.decode);
    std::vector<Retrieved> hits;
    static const ExemplarStore empty;
    const ExemplarStore& s = store ? *store : empty;
    if (!s.empty() && norm2(r.forward.embedding) > 0.0) hits = retrieve(r.forward.embedding, s, o.n_r);
    r.draft = verify_draft(fill_templates(clauses, hits, s, templates), o.review_threshold);
    r.entropy = entropy(r.forward.rules);
    return r;
}

inline MetricsRecord evaluate(const Model& m, const SyntheticWorld& w, const std::vector<Sample>& split,
                              const InferenceOptions& o, const ExemplarStore* store = nullptr) {
    MetricsRecord rec;
    rec.samples = split.size();
    if (split.empty()) return rec;
    std::vector<Vec> probs, labels, acts, bits;
    ClauseCounts counts;
    double flagged = 0.0;
    for (const auto& s : split) {
        const auto r = run_inference(m, w.templates, s.x, store, o);
        probs.push_back(r.forward.concepts);
        labels.push_back(s.labels);
        acts.push_back(r.forward.rules);
        bits.push_back(s.targets.rules);
        count_clauses(r.draft.clauses, s.clauses, counts);
        flagged += r.draft.review_required ? 1.0 : 0.0;
        const auto ts = score_text(r.draft.text(), s.reference);
        for (std::size_t i = 0; i < 4; ++i) rec.bleu[i] += ts.bleu[i];
        rec.rouge_l += ts.rouge_l;
    }
    const double n = static_cast<double>(split.size());
    for (auto& b : rec.bleu) b /= n;
    rec.rouge_l /= n;
    rec.macro_f1 = macro_f1(probs, labels, o.decode.hard_threshold);
    rec.rule_auc = rule_auc(acts, bits);
    rec.clause_precision = counts.precision();
    rec.clause_recall = counts.recall();
    rec.flagged_rate = flagged / n;
    return rec;
}

inline InferenceOptions inference_options(const TrainConfig& c, KgScoreFn kg = {}) {
    return {c.decode, c.n_r, c.review_threshold, std::move(kg)};
}

// ---------------------------------------------------------------------------
// Training loop.
// ---------------------------------------------------------------------------

struct LabeledItem {
    std::size_t id;
    Targets targets;
};

/// Sets the concept head output bias to logit of each concept's prevalence in
/// `items`, clamped to [0.01, 0.99].
inline void init_prior_bias(Model& m, const std::vector<LabeledItem>& items) {
    if (items.empty()) return;
    const std::size_t k = m.head.concepts();
    for (std::size_t c = 0; c < k; ++c) {
        double pos = 0.0;
        for (const auto& it : items) pos += it.targets.concepts[c] >= 0.5 ? 1.0 : 0.0;
        const double p = std::clamp(pos / static_cast<double>(items.size()), 0.01, 0.99);
        m.head.b2.data[c] = logit(p);
    }
}

/// Holds model, gradient buffer and optimizer with stable parameter refs.
class Trainer {
public:
    Trainer(Model model, const TrainConfig& cfg) : model_(std::move(model)), cfg_(cfg) {
        grad_ = model_.zeros_like();
        optim_.cfg.lr = cfg.lr;
        std::vector<Tensor*> g;
        grad_.for_each([&](const std::string&, Tensor& t) { g.push_back(&t); });
        std::size_t i = 0;
        model_.for_each([&](const std::string& path, Tensor& t) { refs_.push_back({path, &t, g[i++]}); });
    }

    Trainer(const Trainer&) = delete;
    Trainer& operator=(const Trainer&) = delete;

    Model& model() { return model_; }
    const Model& model() const { return model_; }
    OptimState& optim() { return optim_; }

    /// One pass over `items` in an order drawn from `rng`. Returns the mean
    /// composite loss. A non-finite loss or gradient aborts before any update.
    double epoch(const SyntheticWorld& w, const std::vector<LabeledItem>& items, RngStream& rng) {
        std::vector<std::size_t> order(items.size());
        std::iota(order.begin(), order.end(), 0);
        rng.shuffle(order);
        const auto opts = cfg_.objective();
        double total = 0.0;
        std::size_t batches = 0;
        std::vector<BatchItem> batch;
        for (std::size_t start = 0; start < order.size(); start += cfg_.batch_size) {
            batch.clear();
            for (std::size_t i = start; i < std::min(order.size(), start + cfg_.batch_size); ++i) {
                const auto& it = items[order[i]];
                batch.push_back({&w.sample(it.id).x, &it.targets});
            }
            grad_.for_each([](const std::string&, Tensor& t) { t.fill(0.0); });
            const auto r = batch_objective(model_, batch, opts, &grad_);
            if (!std::isfinite(r.loss.total)) throw TrainingError("non-finite composite loss");
            adam_step(refs_, optim_);
            total += r.loss.total;
            ++batches;
        }
        return batches ? total / static_cast<double>(batches) : 0.0;
    }

private:
    Model model_;
    Model grad_;
    OptimState optim_;
    std::vector<ParamRef> refs_;
    TrainConfig cfg_;
};

struct TrainHooks {
    std::function<void(const MetricsRecord&)> on_record;
    std::string round_log;         // append selection rounds here when set
    std::string divergence_checkpoint;  // last finite state lands here on abort
    const ExemplarStore* store = nullptr;
    KgScoreFn kg;
    bool evaluate_each_epoch = true;
};

struct TrainResult {
    Model model;
    OptimState optim;
    std::vector<MetricsRecord> trace;
    std::vector<SelectionRound> rounds;
    std::vector<std::size_t> labeled;  // reveal order
    std::vector<std::size_t> unlabeled;
    std::size_t epochs_run = 0;
};

inline RngStream train_root(const TrainConfig& cfg) { return RngStream(cfg.seed).fork(2000); }

inline SimulatedAnnotator make_annotator(const SyntheticWorld& w, const TrainConfig& cfg) {
    return SimulatedAnnotator(w, cfg.eta, cfg.seed ^ 0xA5A5A5A5ULL);
}

struct ActivePartition {
    std::vector<std::size_t> labeled;    // reveal order
    std::vector<std::size_t> unlabeled;  // ascending
};

/// A seeded shuffle of the training ids; the first `initial_labeled` start labeled.
inline ActivePartition initial_partition(const SyntheticWorld& w, const TrainConfig& cfg) {
    ActivePartition p;
    std::vector<std::size_t> ids(w.train.size());
    std::iota(ids.begin(), ids.end(), 0);
    RngStream init_rng = train_root(cfg).fork(1u << 20);
    init_rng.shuffle(ids);
    const std::size_t n0 = std::min(cfg.initial_labeled, ids.size());
    p.labeled.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n0));
    p.unlabeled.assign(ids.begin() + static_cast<std::ptrdiff_t>(n0), ids.end());
    std::sort(p.unlabeled.begin(), p.unlabeled.end());
    return p;
}

/// Pool draw, MC scoring and policy selection for one round.
inline SelectionRound select_for_round(const Model& m, const SyntheticWorld& w, const TrainConfig& cfg,
                                       const std::vector<std::size_t>& unlabeled, std::size_t round) {
    const RngStream root = train_root(cfg);
    std::vector<std::size_t> ids = unlabeled;
    if (cfg.pool_size && ids.size() > cfg.pool_size) {
        RngStream prng = root.fork((2u << 20) + round);
        prng.shuffle(ids);
        ids.resize(cfg.pool_size);
        std::sort(ids.begin(), ids.end());
    }
    CandidatePool pool = score_pool(m, w, ids, cfg.t_mc, root.fork((3u << 20) + round), cfg.bernoulli_entropy);
    RngStream srng = root.fork((4u << 20) + round);
    return select_round(pool, cfg.k, cfg.candidate_window(), cfg.policy, srng, round);
}

/// The selected ids the annotator labels. With the prefilter on, samples
/// whose current draft needs no edits are skipped.
inline std::vector<std::size_t> ids_to_reveal(const Model& m, const SyntheticWorld& w, const TrainConfig& cfg,
                                              const SimulatedAnnotator& annotator, const SelectionRound& sel,
                                              const KgScoreFn& kg = {}) {
    std::vector<std::size_t> out;
    for (std::size_t id : sel.chosen) {
        if (cfg.prefilter) {
            const auto draft = decode_forward(m, w.templates, forward(m, w.sample(id).x), kg, cfg.decode);
            if (annotator.simulate_feedback(draft, id).edits.empty()) continue;
        }
        out.push_back(id);
    }
    return out;
}

inline std::vector<std::size_t> without_ids(const std::vector<std::size_t>& ids, const std::vector<std::size_t>& drop) {
    const std::set<std::size_t> d(drop.begin(), drop.end());
    std::vector<std::size_t> out;
    for (std::size_t id : ids)
        if (!d.count(id)) out.push_back(id);
    return out;
}

inline TrainResult train_loop(const SyntheticWorld& w, const TrainConfig& cfg, const TrainHooks& hooks = {}) {
    cfg.validate();
    const RngStream root = train_root(cfg);

    // Initial labeled set: everything in full mode, a shuffled prefix when active.
    const SimulatedAnnotator annotator = make_annotator(w, cfg);
    std::vector<LabeledItem> items;
    std::vector<std::size_t> unlabeled;
    auto reveal = [&](std::size_t id) { items.push_back({id, w.make_targets(annotator.noisy_labels(id))}); };
    if (!cfg.active) {
        for (const auto& s : w.train) items.push_back({s.id, s.targets});
    } else {
        auto part = initial_partition(w, cfg);
        for (std::size_t id : part.labeled) reveal(id);
        unlabeled = std::move(part.unlabeled);
    }

    Model initial = make_model(cfg, w);
    if (cfg.prior_bias) init_prior_bias(initial, items);
    Trainer trainer(std::move(initial), cfg);
    TrainResult out;
    const auto opts = inference_options(cfg, hooks.kg);
    std::size_t epoch_counter = 0;

    auto record = [&](double loss, std::size_t round, std::size_t labeled) {
        MetricsRecord m = evaluate(trainer.model(), w, w.test, opts, hooks.store);
        m.epoch = epoch_counter;
        m.round = round;
        m.loss = loss;
        m.labeled = labeled;
        out.trace.push_back(m);
        if (hooks.on_record) hooks.on_record(m);
    };

    auto run_epochs = [&](const std::vector<LabeledItem>& items, std::size_t round, bool eval_each) {
        double loss = 0.0;
        for (std::size_t e = 0; e < cfg.epochs; ++e) {
            RngStream erng = root.fork(epoch_counter);
            try {
                loss = trainer.epoch(w, items, erng);
            } catch (const TrainingError&) {
                if (!hooks.divergence_checkpoint.empty())
                    save_checkpoint(hooks.divergence_checkpoint,
                                    make_checkpoint(trainer.model(), &trainer.optim(), config_hash(cfg), epoch_counter));
                throw;
            }
            ++epoch_counter;
            if (eval_each) record(loss, round, items.size());
        }
        if (!eval_each) record(loss, round, items.size());
    };

    if (!cfg.active) {
        run_epochs(items, 0, hooks.evaluate_each_epoch);
    } else {
        for (std::size_t round = 0;; ++round) {
            run_epochs(items, round, false);
            if (round == cfg.rounds) break;
            SelectionRound sel = select_for_round(trainer.model(), w, cfg, unlabeled, round);
            for (std::size_t id : ids_to_reveal(trainer.model(), w, cfg, annotator, sel, hooks.kg)) reveal(id);
            unlabeled = without_ids(unlabeled, sel.chosen);
            if (!hooks.round_log.empty()) append_round_log(hooks.round_log, sel);
            out.rounds.push_back(std::move(sel));
        }
    }
    for (const auto& it : items) out.labeled.push_back(it.id);
    out.unlabeled = std::move(unlabeled);
    out.epochs_run = epoch_counter;
    out.optim = trainer.optim();
    out.model = std::move(trainer.model());
    return out;
}

}  // namespace nsmrg
