#pragma once

// Active uncertainty minimization: MC-dropout rule activations, predictive
// entropy, greedy k-center over [v; c], round selection policies and a
// noisy ground-truth annotator.

#include <fstream>
#include <limits>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "nsmrg/model.hpp"
#include "nsmrg/world.hpp"

namespace nsmrg {

struct McResult {
    Vec mean_rules;
    std::vector<Vec> passes;
    Vec mean_concepts;
    Vec embedding;  // pooled projection v
};

/// T stochastic passes with dropout in the concept head. Pass t draws its
/// mask from rng.fork(t), so results do not depend on evaluation order.
inline McResult mc_rule_activations(const Model& m, const Tensor& x, std::size_t t_mc, const RngStream& rng) {
    if (t_mc < 1) throw ArgumentError("mc_rule_activations: T_MC must be >= 1");
    McResult r;
    const Forward base = forward(m, x);
    r.embedding = base.embedding;
    r.mean_rules.assign(m.rule_count(), 0.0);
    r.mean_concepts.assign(m.concepts(), 0.0);
    for (std::size_t t = 0; t < t_mc; ++t) {
        RngStream stream = rng.fork(t);
        const Vec c = predict_concepts(base.pooled, m.head, Dropout{m.head.dropout_rate, &stream});
        Vec rules(m.rule_count());
        for (std::size_t j = 0; j < rules.size(); ++j) rules[j] = eval_rule_tree(m.rules.rules[j].tree, c);
        for (std::size_t j = 0; j < rules.size(); ++j) r.mean_rules[j] += rules[j];
        for (std::size_t k = 0; k < c.size(); ++k) r.mean_concepts[k] += c[k];
        r.passes.push_back(std::move(rules));
    }
    for (auto& v : r.mean_rules) v /= static_cast<double>(t_mc);
    for (auto& v : r.mean_concepts) v /= static_cast<double>(t_mc);
    return r;
}

inline double xlogx(double p) { return p > 0.0 ? p * std::log(p) : 0.0; }

/// -sum r ln r (natural log, 0 ln 0 = 0). With `bernoulli`, each rule counts
/// as a binary variable: -sum [r ln r + (1-r) ln(1-r)].
inline double entropy(std::span<const double> r, bool bernoulli = false) {
    double h = 0.0;
    for (double v : r) {
        const double p = std::clamp(v, 0.0, 1.0);
        h -= xlogx(p);
        if (bernoulli) h -= xlogx(1.0 - p);
    }
    return std::max(0.0, h);
}

inline double euclidean(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

/// Greedy farthest-first traversal; ties go to the smallest index.
inline std::vector<std::size_t> greedy_k_center(const std::vector<Vec>& points, std::size_t k, std::size_t seed_index) {
    if (k < 1 || k > points.size())
        throw ArgumentError("greedy_k_center: k=" + std::to_string(k) + " outside [1," + std::to_string(points.size()) + "]");
    if (seed_index >= points.size()) throw ArgumentError("greedy_k_center: seed index out of range");
    std::vector<std::size_t> picks{seed_index};
    std::vector<double> dist(points.size());
    for (std::size_t i = 0; i < points.size(); ++i) dist[i] = euclidean(points[i], points[seed_index]);
    std::vector<bool> taken(points.size(), false);
    taken[seed_index] = true;
    while (picks.size() < k) {
        std::size_t best = points.size();
        for (std::size_t i = 0; i < points.size(); ++i)
            if (!taken[i] && (best == points.size() || dist[i] > dist[best])) best = i;
        picks.push_back(best);
        taken[best] = true;
        for (std::size_t i = 0; i < points.size(); ++i) dist[i] = std::min(dist[i], euclidean(points[i], points[best]));
    }
    return picks;
}

/// max over points of the distance to the nearest center.
inline double covering_radius(const std::vector<Vec>& points, std::span<const std::size_t> centers) {
    double r = 0.0;
    for (const auto& p : points) {
        double d = std::numeric_limits<double>::infinity();
        for (std::size_t c : centers) d = std::min(d, euclidean(p, points[c]));
        r = std::max(r, d);
    }
    return r;
}

enum class Policy { Random, Entropy, KCenter, EntropyKCenter };

inline const char* to_string(Policy p) {
    switch (p) {
        case Policy::Random: return "random";
        case Policy::Entropy: return "entropy";
        case Policy::KCenter: return "kcenter";
        case Policy::EntropyKCenter: return "entropy+kcenter";
    }
    return "?";
}

inline Policy parse_policy(std::string_view s) {
    if (s == "random") return Policy::Random;
    if (s == "entropy") return Policy::Entropy;
    if (s == "kcenter") return Policy::KCenter;
    if (s == "entropy+kcenter") return Policy::EntropyKCenter;
    throw ConfigError("unknown policy '" + std::string(s) + "'");
}

struct Candidate {
    std::size_t id = 0;
    Vec joint;  // [v; c]
    Vec rules;  // MC mean
    double entropy = 0.0;
    bool selected = false;
};

struct CandidatePool {
    std::vector<Candidate> items;

    std::size_t unselected() const {
        return static_cast<std::size_t>(std::count_if(items.begin(), items.end(), [](const Candidate& c) { return !c.selected; }));
    }
};

/// Scores candidates with MC dropout; candidate `id` uses substream rng.fork(id).
inline CandidatePool score_pool(const Model& m, const SyntheticWorld& w, std::span<const std::size_t> ids,
                                std::size_t t_mc, const RngStream& rng, bool bernoulli = false) {
    CandidatePool pool;
    pool.items.reserve(ids.size());
    for (std::size_t id : ids) {
        const auto mc = mc_rule_activations(m, w.sample(id).x, t_mc, rng.fork(id));
        Candidate c;
        c.id = id;
        c.joint = mc.embedding;
        c.joint.insert(c.joint.end(), mc.mean_concepts.begin(), mc.mean_concepts.end());
        c.entropy = entropy(mc.mean_rules, bernoulli);
        c.rules = mc.mean_rules;
        pool.items.push_back(std::move(c));
    }
    return pool;
}

struct SelectionRound {
    std::size_t round = 0;
    std::size_t k = 0;
    std::vector<std::size_t> chosen;  // sample ids
    std::vector<double> entropies;    // of chosen, same order
    Policy policy = Policy::EntropyKCenter;
    std::uint64_t seed = 0;
};

inline SelectionRound select_round(CandidatePool& pool, std::size_t k, std::size_t m_cand, Policy policy,
                                   RngStream& rng, std::size_t round = 0) {
    std::vector<std::size_t> open;  // positions in pool.items
    for (std::size_t i = 0; i < pool.items.size(); ++i)
        if (!pool.items[i].selected) open.push_back(i);
    if (k == 0 || open.size() < k)
        throw RoundError("select_round: need " + std::to_string(k) + " unselected candidates, have " +
                         std::to_string(open.size()));
    SelectionRound out{round, k, {}, {}, policy, rng.seed()};
    auto by_entropy = [&] {
        auto v = open;
        std::stable_sort(v.begin(), v.end(),
                         [&](std::size_t a, std::size_t b) { return pool.items[a].entropy > pool.items[b].entropy; });
        return v;
    };
    auto k_center_over = [&](const std::vector<std::size_t>& positions) {
        std::vector<Vec> pts;
        for (std::size_t p : positions) pts.push_back(pool.items[p].joint);
        std::vector<std::size_t> picked;
        for (std::size_t i : greedy_k_center(pts, k, 0)) picked.push_back(positions[i]);
        return picked;
    };
    std::vector<std::size_t> picks;
    switch (policy) {
        case Policy::Random: {
            auto v = open;
            rng.shuffle(v);
            picks.assign(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k));
            break;
        }
        case Policy::Entropy: {
            const auto v = by_entropy();
            picks.assign(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k));
            break;
        }
        case Policy::KCenter: picks = k_center_over(open); break;
        case Policy::EntropyKCenter: {
            auto v = by_entropy();
            v.resize(std::min(v.size(), std::max(m_cand, k)));
            picks = k_center_over(v);  // seeded by the highest-entropy candidate
            break;
        }
    }
    for (std::size_t p : picks) {
        pool.items[p].selected = true;
        out.chosen.push_back(pool.items[p].id);
        out.entropies.push_back(pool.items[p].entropy);
    }
    return out;
}

inline constexpr int kRoundLogVersion = 1;

inline nlohmann::json to_json(const SelectionRound& r) {
    return {{"version", kRoundLogVersion}, {"round", r.round},          {"policy", to_string(r.policy)}, {"k", r.k},
            {"chosen", r.chosen},        {"entropies", r.entropies},      {"seed", r.seed}};
}

inline SelectionRound round_from_json(const nlohmann::json& j) {
    if (j.value("version", 0) != kRoundLogVersion)
        throw VersionError("round log version " + std::to_string(j.value("version", 0)) + " unsupported");
    SelectionRound r;
    r.round = j.at("round").get<std::size_t>();
    r.policy = parse_policy(j.at("policy").get<std::string>());
    r.k = j.at("k").get<std::size_t>();
    r.chosen = j.at("chosen").get<std::vector<std::size_t>>();
    r.entropies = j.at("entropies").get<std::vector<double>>();
    r.seed = j.at("seed").get<std::uint64_t>();
    return r;
}

inline void append_round_log(const std::string& path, const SelectionRound& r) {
    std::ofstream out(path, std::ios::app);
    if (!out) throw StateError("cannot append round log " + path);
    out << to_json(r).dump() << '\n';
}

inline std::vector<SelectionRound> load_round_log(const std::string& path) {
    std::vector<SelectionRound> out;
    std::ifstream in(path);
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.empty()) continue;
        try {
            out.push_back(round_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(n, 1, std::string("round log: ") + e.what());
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Simulated annotator.
// ---------------------------------------------------------------------------

struct ClauseEdit {
    std::string key;
    bool add = true;  // false: remove from the draft

    friend bool operator==(const ClauseEdit&, const ClauseEdit&) = default;
};

struct Correction {
    std::size_t sample = 0;
    Vec labels;  // possibly corrupted
    std::size_t flipped = 0;
    std::vector<Clause> clauses;
    std::vector<ClauseEdit> edits;
};

/// Symmetric difference of clause keys, removals first, each sorted.
inline std::vector<ClauseEdit> clause_edits(const std::vector<Clause>& draft, const std::vector<Clause>& corrected) {
    std::set<std::string> a, b;
    for (const auto& c : draft) a.insert(c.key());
    for (const auto& c : corrected) b.insert(c.key());
    std::vector<ClauseEdit> out;
    for (const auto& k : a)
        if (!b.count(k)) out.push_back({k, false});
    for (const auto& k : b)
        if (!a.count(k)) out.push_back({k, true});
    return out;
}

struct SimulatedAnnotator {
    const SyntheticWorld* world = nullptr;
    double eta = 0.0;
    std::uint64_t seed = 0;

    SimulatedAnnotator(const SyntheticWorld& w, double error_rate, std::uint64_t s) : world(&w), eta(error_rate), seed(s) {
        if (!(eta >= 0.0 && eta < 1.0)) throw ConfigError("annotator error rate must lie in [0,1)");
    }

    /// Flips are a pure function of (seed, sample id).
    Vec noisy_labels(std::size_t sample_id, std::size_t* flipped = nullptr) const {
        Vec labels = world->sample(sample_id).labels;
        RngStream rng = RngStream(seed).fork(sample_id);
        std::size_t n = 0;
        for (auto& b : labels)
            if (rng.bernoulli(eta)) {
                b = 1.0 - b;
                ++n;
            }
        if (flipped) *flipped = n;
        return labels;
    }

    Correction simulate_feedback(const std::vector<Clause>& draft, std::size_t sample_id) const {
        Correction c;
        c.sample = sample_id;
        c.labels = noisy_labels(sample_id, &c.flipped);
        c.clauses = world->truth_clauses(c.labels);
        c.edits = clause_edits(draft, c.clauses);
        return c;
    }
};

}  // namespace nsmrg
