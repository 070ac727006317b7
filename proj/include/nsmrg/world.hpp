#pragma once

// Synthetic chest-film world: sixteen concepts with fixed priors, eight
// ground-truth rules, a 24-template inventory and patch features that embed
// the concept bits linearly. Everything is a pure function of (spec, seed).

#include <array>
#include <string>
#include <vector>

#include "nsmrg/core.hpp"
#include "nsmrg/generation.hpp"
#include "nsmrg/logic.hpp"
#include "nsmrg/model.hpp"

namespace nsmrg {

struct WorldSpec {
    std::size_t patches = 16;  // M
    std::size_t width = 32;    // C'
    double noise = 0.0;        // per-entry Gaussian std on X
    double embed_scale = 1.0;  // RMS of concept embedding entries
    bool orthogonal = true;    // orthogonalize concept embeddings (K <= C')
    double offset_scale = 0.5; // std of the fixed per-patch offsets
    double min_fraction = 1.0; // a present concept marks at least this share of patches
    double alpha_and = 0.99;   // BLEND prior where the truth rule conjoins
    double alpha_or = 0.01;    // BLEND prior where the truth rule disjoins
    double rare_prevalence = 0.02;
};

namespace world_detail {

struct ConceptDef {
    const char* name;
    double prior;
};

// Exclusive groups (left/right, lower/upper lobe) are drawn jointly, see draw_labels.
inline constexpr std::array<ConceptDef, 16> kConcepts{{
    {"effusion", 0.30},       {"left", 0.40},          {"right", 0.40},       {"large", 0.30},
    {"cardiomegaly", 0.25},   {"edema", 0.20},         {"consolidation", 0.20}, {"air_bronchogram", 0.40},
    {"pneumothorax", 0.10},   {"atelectasis", 0.20},   {"lower_lobe", 0.40},  {"upper_lobe", 0.35},
    {"nodule", 0.15},         {"calcified", 0.40},     {"fracture", 0.02},    {"hernia", 0.02},
}};

enum C : int {
    kEffusion, kLeft, kRight, kLarge, kCardiomegaly, kEdema, kConsolidation, kAirBronchogram,
    kPneumothorax, kAtelectasis, kLowerLobe, kUpperLobe, kNodule, kCalcified, kFracture, kHernia
};

struct RuleDef {
    const char* id;
    const char* name;
    const char* formula;  // crisp AND / OR / NOT
    const char* templates;
    const char* slots;
    int selector_a;  // first template when on
    int selector_b;  // second template when on (and selector_a off); third otherwise
};

inline constexpr std::array<RuleDef, 8> kRules{{
    {"R1", "pleural_effusion", "effusion AND NOT pneumothorax", "T01,T02,T03",
     "laterality=left>left,right>right; size=@effusion_size", kLarge, kAtelectasis},
    {"R2", "hydropneumothorax", "effusion AND pneumothorax", "T04,T05,T06", "laterality=left>left,right>right", kLarge,
     kAtelectasis},
    {"R3", "heart_failure", "cardiomegaly AND edema", "T07,T08,T09", "", kLarge, kConsolidation},
    {"R4", "pneumonia", "consolidation AND (air_bronchogram OR NOT atelectasis)", "T10,T11,T12",
     "region=lower_lobe>lower lobe,upper_lobe>upper lobe", kAirBronchogram, kLarge},
    {"R5", "lobar_collapse", "atelectasis AND (lower_lobe OR upper_lobe)", "T13,T14,T15",
     "region=lower_lobe>lower lobe,upper_lobe>upper lobe", kLarge, kEffusion},
    {"R6", "pulmonary_nodule", "nodule AND NOT calcified", "T16,T17,T18",
     "region=lower_lobe>lower lobe,upper_lobe>upper lobe; size=@nodule_size", kLarge, kConsolidation},
    {"R7", "granuloma", "nodule AND calcified", "T19,T20,T21", "region=lower_lobe>lower lobe,upper_lobe>upper lobe",
     kLarge, kEffusion},
    {"R8", "incidental", "fracture OR hernia", "T22,T23,T24", "finding=fracture>rib fracture,hernia>hiatal hernia",
     kLarge, kEffusion},
}};

inline constexpr const char* kTemplates = R"(nsmrg-templates 1
T01 | large {laterality} pleural effusion measuring {size} cm {extent}. | laterality:laterality:required; size:measurement:required; extent:qualifier:optional:layering/loculated
T02 | {laterality} pleural effusion with adjacent atelectasis {extent}. | laterality:laterality:required; extent:qualifier:optional:layering/loculated
T03 | small {laterality} pleural effusion {extent}. | laterality:laterality:required; extent:qualifier:optional:layering/loculated
T04 | large {laterality} hydropneumothorax. | laterality:laterality:required
T05 | {laterality} hydropneumothorax with adjacent atelectasis. | laterality:laterality:required
T06 | small {laterality} hydropneumothorax. | laterality:laterality:required
T07 | marked cardiomegaly with pulmonary edema {severity}. | severity:qualifier:optional:interstitial/alveolar
T08 | cardiomegaly with pulmonary edema and superimposed consolidation. |
T09 | cardiomegaly with mild pulmonary edema {severity}. | severity:qualifier:optional:interstitial/alveolar
T10 | {region} consolidation with air bronchograms, concerning for pneumonia. | region:region:required
T11 | extensive {region} consolidation concerning for pneumonia. | region:region:required
T12 | {region} airspace consolidation. | region:region:required
T13 | {region} lobar collapse. | region:region:required
T14 | {region} atelectasis with adjacent effusion. | region:region:required
T15 | {region} subsegmental atelectasis. | region:region:required
T16 | {region} pulmonary nodule measuring {size} cm, recommend follow-up. | region:region:required; size:measurement:required
T17 | {region} nodule adjacent to consolidation. | region:region:required
T18 | {region} pulmonary nodule measuring {size} cm. | region:region:required; size:measurement:required
T19 | large calcified granuloma in the {region}. | region:region:required
T20 | calcified {region} granuloma near the effusion. | region:region:required
T21 | calcified {region} granuloma. | region:region:required
T22 | large {finding}. | finding:concept-phrase:required
T23 | {finding} with small effusion. | finding:concept-phrase:required
T24 | {finding}. | finding:concept-phrase:required
)";

/// Replaces AND / OR tokens with BLEND(alpha) priors.
inline std::string blend_formula(std::string_view crisp, double alpha_and, double alpha_or) {
    auto fmt = [](double a) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "BLEND(%g)", a);
        return std::string(buf);
    };
    std::string out;
    std::size_t i = 0;
    while (i < crisp.size()) {
        if (crisp.compare(i, 3, "AND") == 0) {
            out += fmt(alpha_and);
            i += 3;
        } else if (crisp.compare(i, 2, "OR") == 0 && (i + 2 >= crisp.size() || crisp[i + 2] == ' ')) {
            out += fmt(alpha_or);
            i += 2;
        } else {
            out += crisp[i++];
        }
    }
    return out;
}

}  // namespace world_detail

inline constexpr std::size_t kWorldConcepts = 16;
inline constexpr std::size_t kWorldRules = 8;

/// Rule library text. `crisp` keeps AND/OR (ground truth); otherwise binary
/// operators become learnable BLEND gates with the spec's priors.
inline std::string world_rule_text(const WorldSpec& spec, bool crisp) {
    std::string out = "nsmrg-rules 1\nconcepts";
    for (const auto& c : world_detail::kConcepts) out += std::string(" ") + c.name;
    out += "\n";
    for (const auto& r : world_detail::kRules) {
        const std::string formula =
            crisp ? std::string(r.formula) : world_detail::blend_formula(r.formula, spec.alpha_and, spec.alpha_or);
        out += std::string(r.id) + " | " + r.name + " | " + formula + " | " + r.templates + " | " + r.slots + "\n";
    }
    return out;
}

inline std::string world_template_text() { return world_detail::kTemplates; }

/// Concept co-occurrence plausibility for the toy knowledge graph (tab separated).
inline std::string world_kg_text() {
    return "concept_a\tconcept_b\tscore\n"
           "effusion\tleft\t1.0\n"
           "effusion\tright\t1.0\n"
           "pneumothorax\tleft\t1.0\n"
           "pneumothorax\tright\t1.0\n"
           "left\tright\t0.0\n"
           "lower_lobe\tupper_lobe\t0.0\n"
           "consolidation\tlower_lobe\t0.9\n"
           "consolidation\tupper_lobe\t0.8\n"
           "atelectasis\tlower_lobe\t0.9\n"
           "atelectasis\tupper_lobe\t0.7\n"
           "nodule\tlower_lobe\t0.8\n"
           "nodule\tupper_lobe\t0.9\n"
           "fracture\thernia\t0.6\n";
}

struct Sample {
    std::size_t id = 0;
    Tensor x;
    Vec labels;  // K bits
    Vec numeric; // regressor truth, by library regressor order
    Targets targets;
    std::vector<Clause> clauses;
    std::string reference;
};

struct SyntheticWorld {
    WorldSpec spec;
    std::uint64_t seed = 0;
    RuleLibrary truth;    // crisp rules
    RuleLibrary library;  // learnable counterpart handed to models
    TemplateLibrary templates;
    Tensor embed;    // K x C'
    Tensor offsets;  // M x C'
    std::vector<Sample> train;
    std::vector<Sample> test;

    std::size_t concepts() const { return truth.concepts.size(); }

    const Sample& sample(std::size_t id) const {
        if (id < train.size()) return train[id];
        if (id - train.size() < test.size()) return test[id - train.size()];
        throw LookupError("unknown sample " + std::to_string(id));
    }

    /// Index among a rule's templates picked by its selector concepts.
    static std::size_t template_choice(std::size_t rule, std::span<const double> labels) {
        const auto& r = world_detail::kRules[rule];
        if (labels[r.selector_a] >= 0.5) return 0;
        if (labels[r.selector_b] >= 0.5) return 1;
        return 2;
    }

    Vec rule_bits(std::span<const double> labels) const {
        Vec out(truth.size());
        for (std::size_t j = 0; j < truth.size(); ++j) out[j] = eval_rule_tree(truth.rules[j].tree, labels);
        return out;
    }

    /// Regressor truth is linear in the bits.
    Vec numeric_truth(std::span<const double> labels) const {
        Vec out;
        for (const auto& name : library.regressors()) {
            if (name == "effusion_size") out.push_back(1.5 + 2.5 * labels[world_detail::kLarge]);
            else if (name == "nodule_size") out.push_back(0.6 + 0.8 * labels[world_detail::kLarge]);
            else out.push_back(0.0);
        }
        return out;
    }

    Vec numeric_mask(std::span<const double> labels) const {
        Vec out;
        for (const auto& name : library.regressors()) {
            if (name == "effusion_size") out.push_back(labels[world_detail::kEffusion]);
            else if (name == "nodule_size") out.push_back(labels[world_detail::kNodule]);
            else out.push_back(0.0);
        }
        return out;
    }

    Targets make_targets(std::span<const double> labels) const {
        Targets t;
        t.concepts.assign(labels.begin(), labels.end());
        t.rules = rule_bits(labels);
        t.templates.assign(templates.size(), 0.0);
        t.template_mask.assign(templates.size(), 0.0);
        for (std::size_t j = 0; j < truth.size(); ++j) {
            if (t.rules[j] < 0.5) continue;
            const auto& ids = truth.rules[j].templates;
            const std::size_t pick = template_choice(j, labels);
            for (std::size_t i = 0; i < ids.size(); ++i) {
                const int ti = templates.index_of(ids[i]);
                t.template_mask[ti] = 1.0;
                t.templates[ti] = i == pick ? 1.0 : 0.0;
            }
        }
        t.numeric = numeric_truth(labels);
        t.numeric_mask = numeric_mask(labels);
        return t;
    }

    /// Clauses decoded from crisp rules on the given bits.
    std::vector<Clause> truth_clauses(std::span<const double> labels) const {
        const Targets t = make_targets(labels);
        std::map<std::string, double> numeric;
        const auto names = library.regressors();
        for (std::size_t q = 0; q < names.size(); ++q) numeric[names[q]] = t.numeric[q];
        DecodeContext ctx{truth, templates, t.rules, labels, t.templates, numeric, {}, {}};
        const auto top = top_h_rules(t.rules, truth.size());
        return decode_rules(top, ctx);
    }

    std::string reference_text(const std::vector<Clause>& clauses) const {
        Draft d;
        d.clauses = clauses;
        return d.text();
    }

    /// Patch features: fixed offsets, each present concept written onto a
    /// random subset of patches, plus isotropic noise.
    Tensor features(std::span<const double> labels, RngStream& rng) const {
        Tensor x = offsets;
        std::vector<std::size_t> order(spec.patches);
        for (std::size_t k = 0; k < labels.size(); ++k) {
            if (labels[k] < 0.5) continue;
            const double frac = rng.uniform(spec.min_fraction, 1.0);
            const auto count = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(frac * spec.patches)));
            std::iota(order.begin(), order.end(), 0);
            rng.shuffle(order);
            for (std::size_t i = 0; i < count; ++i)
                for (std::size_t c = 0; c < spec.width; ++c) x(order[i], c) += embed(k, c);
        }
        if (spec.noise > 0.0)
            for (auto& v : x.data) v += spec.noise * rng.normal();
        return x;
    }

    Vec draw_labels(RngStream& rng) const {
        using namespace world_detail;
        Vec b(kWorldConcepts, 0.0);
        for (std::size_t k = 0; k < kWorldConcepts; ++k) {
            double p = kConcepts[k].prior;
            if (k == kFracture || k == kHernia) p = spec.rare_prevalence;
            if (k == kLeft || k == kRight || k == kLowerLobe || k == kUpperLobe) continue;
            b[k] = rng.bernoulli(p) ? 1.0 : 0.0;
        }
        const double side = rng.uniform();
        if (side < kConcepts[kLeft].prior) b[kLeft] = 1.0;
        else if (side < kConcepts[kLeft].prior + kConcepts[kRight].prior) b[kRight] = 1.0;
        const double lobe = rng.uniform();
        if (lobe < kConcepts[kLowerLobe].prior) b[kLowerLobe] = 1.0;
        else if (lobe < kConcepts[kLowerLobe].prior + kConcepts[kUpperLobe].prior) b[kUpperLobe] = 1.0;
        return b;
    }

    Sample make_sample(std::size_t id, Vec labels, RngStream& rng) const {
        Sample s;
        s.id = id;
        s.x = features(labels, rng);
        s.targets = make_targets(labels);
        s.numeric = s.targets.numeric;
        s.clauses = truth_clauses(labels);
        s.reference = reference_text(s.clauses);
        s.labels = std::move(labels);
        return s;
    }
};

/// Deterministic in (spec, seed). Sample ids: train 0..n_train-1, then test.
inline SyntheticWorld gen_synthetic_dataset(const WorldSpec& spec, std::size_t n_train, std::size_t n_test,
                                            std::uint64_t seed) {
    if (spec.patches == 0 || spec.width == 0) throw ConfigError("world: patches and width must be positive");
    if (spec.width < kWorldConcepts) throw ConfigError("world: width must be >= the concept count for a full-rank embedding");
    if (spec.noise < 0.0 || !(spec.min_fraction > 0.0 && spec.min_fraction <= 1.0))
        throw ConfigError("world: bad noise or min_fraction");
    SyntheticWorld w;
    w.spec = spec;
    w.seed = seed;
    w.truth = parse_rule_library(world_rule_text(spec, true));
    w.library = parse_rule_library(world_rule_text(spec, false));
    w.templates = parse_template_library(world_template_text());
    validate_library(w.truth, w.templates);

    RngStream base(seed);
    RngStream r_embed = base.fork(100);
    w.embed = Tensor(kWorldConcepts, spec.width);
    init_normal(w.embed, r_embed, spec.embed_scale);
    if (spec.orthogonal) {
        // Gram-Schmidt on the rows, then rescale to the same RMS entry size.
        const double target = spec.embed_scale * std::sqrt(static_cast<double>(spec.width));
        for (std::size_t k = 0; k < kWorldConcepts; ++k) {
            auto row = w.embed.row(k);
            for (std::size_t j = 0; j < k; ++j) {
                const auto prev = w.embed.row(j);
                const double proj = dot(row, prev) / dot(prev, prev);
                for (std::size_t c = 0; c < spec.width; ++c) row[c] -= proj * prev[c];
            }
            const double n = norm2(row);
            for (auto& v : row) v *= target / n;
        }
    }
    w.offsets = Tensor(spec.patches, spec.width);
    init_normal(w.offsets, r_embed, spec.offset_scale);

    RngStream r_labels = base.fork(200);
    RngStream r_feat = base.fork(300);
    for (std::size_t i = 0; i < n_train + n_test; ++i) {
        RngStream fr = r_feat.fork(i);
        Sample s = w.make_sample(i, w.draw_labels(r_labels), fr);
        (i < n_train ? w.train : w.test).push_back(std::move(s));
    }
    return w;
}

}  // namespace nsmrg
