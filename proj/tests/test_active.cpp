#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"

using namespace nsmrg;
using namespace nsmrg::testing;

namespace {

Candidate candidate(std::size_t id, Vec joint, double h) {
    Candidate c;
    c.id = id;
    c.joint = std::move(joint);
    c.entropy = h;
    return c;
}

CandidatePool random_pool(RngStream& rng, std::size_t n) {
    CandidatePool pool;
    for (std::size_t i = 0; i < n; ++i) pool.items.push_back(candidate(100 + i, random_vec(rng, 3), rng.uniform()));
    return pool;
}

}  // namespace

// ---------------------------------------------------------------------------
// Entropy
// ---------------------------------------------------------------------------

TEST(Entropy, HandValues) {
    EXPECT_EQ(entropy(Vec{1.0, 1.0}), 0.0);
    EXPECT_NEAR(entropy(Vec{std::exp(-1.0)}), std::exp(-1.0), 1e-15);
    EXPECT_NEAR(entropy(Vec{0.5, 0.5}), std::log(2.0), 1e-15);
    EXPECT_EQ(entropy(Vec{}), 0.0);
    EXPECT_EQ(entropy(Vec{0.0}), 0.0);
}

TEST(Entropy, BernoulliVariant) {
    EXPECT_NEAR(entropy(Vec{0.5}, true), std::log(2.0), 1e-15);
    EXPECT_EQ(entropy(Vec{0.0, 1.0}, true), 0.0);
    EXPECT_NEAR(entropy(Vec{0.2}, true), -(0.2 * std::log(0.2) + 0.8 * std::log(0.8)), 1e-15);
}

TEST(Entropy, NonNegativePermutationInvariantAndZeroOnCorners) {
    RngStream rng(3);
    for (int t = 0; t < 1000; ++t) {
        Vec r(1 + rng.index(10));
        for (auto& v : r) v = rng.uniform();
        const double h = entropy(r);
        EXPECT_GE(h, 0.0);
        Vec s = r;
        std::sort(s.begin(), s.end());
        EXPECT_NEAR(entropy(s), h, 1e-12);
        for (auto& v : s) v = v < 0.5 ? 0.0 : 1.0;
        EXPECT_EQ(entropy(s), 0.0);
        EXPECT_EQ(entropy(s, true), 0.0);
    }
}

// ---------------------------------------------------------------------------
// Greedy k-center
// ---------------------------------------------------------------------------

TEST(KCenter, LineExample) {
    const std::vector<Vec> pts{{0}, {1}, {10}};
    EXPECT_EQ(greedy_k_center(pts, 2, 0), (std::vector<std::size_t>{0, 2}));
    EXPECT_EQ(greedy_k_center(pts, 3, 0), (std::vector<std::size_t>{0, 2, 1}));
}

TEST(KCenter, TiesGoToSmallestIndex) {
    const std::vector<Vec> pts{{0}, {-1}, {1}};
    EXPECT_EQ(greedy_k_center(pts, 2, 0), (std::vector<std::size_t>{0, 1}));
}

TEST(KCenter, Errors) {
    const std::vector<Vec> pts{{0}, {1}};
    EXPECT_THROW(greedy_k_center(pts, 0, 0), ArgumentError);
    EXPECT_THROW(greedy_k_center(pts, 3, 0), ArgumentError);
    EXPECT_THROW(greedy_k_center(pts, 1, 2), ArgumentError);
}

TEST(KCenter, TwelvePointsWithinTwiceOptimum) {
    RngStream rng(12);
    std::vector<Vec> pts;
    for (int i = 0; i < 12; ++i) pts.push_back(random_vec(rng, 2));
    const auto picks = greedy_k_center(pts, 3, 0);
    EXPECT_LE(covering_radius(pts, picks), 2.0 * exhaustive_k_center(pts, 3) + 1e-12);
}

TEST(KCenter, TwoApproximationProperty) {
    RngStream rng(99);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 1 + rng.index(12);
        const std::size_t dim = 1 + rng.index(4);
        std::vector<Vec> pts;
        for (std::size_t i = 0; i < n; ++i) pts.push_back(random_vec(rng, dim));
        const std::size_t k = 1 + rng.index(n);
        const std::size_t seed = rng.index(n);
        const auto picks = greedy_k_center(pts, k, seed);
        ASSERT_EQ(picks.size(), k);
        EXPECT_EQ(picks[0], seed);
        EXPECT_EQ(std::set<std::size_t>(picks.begin(), picks.end()).size(), k);
        EXPECT_LE(covering_radius(pts, picks), 2.0 * exhaustive_k_center(pts, k) + 1e-12);
    }
}

// ---------------------------------------------------------------------------
// MC dropout
// ---------------------------------------------------------------------------

TEST(McDropout, MeanOfPasses) {
    auto s = tiny_setup(4);
    const RngStream rng(8);
    const auto r = mc_rule_activations(s.model, s.world.train[0].x, 5, rng);
    ASSERT_EQ(r.passes.size(), 5u);
    for (std::size_t j = 0; j < r.mean_rules.size(); ++j) {
        double sum = 0.0;
        for (const auto& p : r.passes) sum += p[j];
        EXPECT_NEAR(r.mean_rules[j], sum / 5.0, 1e-15);
    }
    EXPECT_THROW(mc_rule_activations(s.model, s.world.train[0].x, 0, rng), ArgumentError);
}

TEST(McDropout, DeterministicForFixedSeed) {
    auto s = tiny_setup(4);
    const auto a = mc_rule_activations(s.model, s.world.train[1].x, 5, RngStream(21));
    const auto b = mc_rule_activations(s.model, s.world.train[1].x, 5, RngStream(21));
    EXPECT_EQ(a.mean_rules, b.mean_rules);
    EXPECT_EQ(a.passes, b.passes);
    const auto c = mc_rule_activations(s.model, s.world.train[1].x, 5, RngStream(22));
    EXPECT_NE(a.passes, c.passes);
}

TEST(McDropout, PassesDifferWithDropout) {
    auto s = tiny_setup(4);
    const auto r = mc_rule_activations(s.model, s.world.train[2].x, 4, RngStream(1));
    bool differ = false;
    for (std::size_t t = 1; t < r.passes.size(); ++t) differ |= r.passes[t] != r.passes[0];
    EXPECT_TRUE(differ);
}

TEST(McDropout, ZeroRateCollapses) {
    auto s = tiny_setup(4);
    s.model.head.dropout_rate = 0.0;
    const auto r = mc_rule_activations(s.model, s.world.train[2].x, 5, RngStream(1));
    for (const auto& p : r.passes) EXPECT_EQ(p, r.passes[0]);
    const Forward f = forward(s.model, s.world.train[2].x);
    for (std::size_t j = 0; j < f.rules.size(); ++j) EXPECT_NEAR(r.mean_rules[j], f.rules[j], 1e-15);
}

TEST(McDropout, ScorePoolShapesAndSubstreams) {
    auto s = tiny_setup(4);
    const std::vector<std::size_t> ids{0, 3, 5};
    const RngStream rng(9);
    const auto pool = score_pool(s.model, s.world, ids, 3, rng);
    ASSERT_EQ(pool.items.size(), 3u);
    for (const auto& c : pool.items) {
        EXPECT_EQ(c.joint.size(), s.model.dims.embed + s.model.concepts());
        EXPECT_GE(c.entropy, 0.0);
    }
    // Scoring a subset reproduces the same values: per-candidate substreams.
    const std::vector<std::size_t> one{5};
    const auto single = score_pool(s.model, s.world, one, 3, rng);
    EXPECT_EQ(single.items[0].entropy, pool.items[2].entropy);
    EXPECT_EQ(single.items[0].joint, pool.items[2].joint);
    EXPECT_THROW(score_pool(s.model, s.world, std::vector<std::size_t>{999}, 3, rng), LookupError);
}

// ---------------------------------------------------------------------------
// Selection rounds
// ---------------------------------------------------------------------------

TEST(Select, EntropyTopK) {
    CandidatePool pool;
    const Vec h{0.1, 0.9, 0.5, 0.7, 0.3};
    for (std::size_t i = 0; i < h.size(); ++i) pool.items.push_back(candidate(i, {double(i)}, h[i]));
    RngStream rng(1);
    const auto r = select_round(pool, 2, 8, Policy::Entropy, rng);
    EXPECT_EQ(r.chosen, (std::vector<std::size_t>{1, 3}));
    EXPECT_EQ(r.entropies, (std::vector<double>{0.9, 0.7}));
    EXPECT_EQ(pool.unselected(), 3u);
}

TEST(Select, KCenterSeededByFirstUnselected) {
    CandidatePool pool;
    for (std::size_t i = 0; i < 4; ++i) pool.items.push_back(candidate(i, {double(i * i)}, 0.0));
    RngStream rng(1);
    EXPECT_EQ(select_round(pool, 2, 8, Policy::KCenter, rng).chosen, (std::vector<std::size_t>{0, 3}));
    EXPECT_EQ(select_round(pool, 2, 8, Policy::KCenter, rng).chosen, (std::vector<std::size_t>{1, 2}));
}

TEST(Select, KEqualsMCandDegeneratesToEntropy) {
    RngStream gen(17);
    for (int trial = 0; trial < 50; ++trial) {
        auto a = random_pool(gen, 30);
        auto b = a;
        RngStream r1(1), r2(1);
        const auto ek = select_round(a, 6, 6, Policy::EntropyKCenter, r1);
        const auto e = select_round(b, 6, 6, Policy::Entropy, r2);
        EXPECT_EQ(std::set<std::size_t>(ek.chosen.begin(), ek.chosen.end()),
                  std::set<std::size_t>(e.chosen.begin(), e.chosen.end()));
        EXPECT_EQ(ek.chosen[0], e.chosen[0]);
    }
}

TEST(Select, RandomDeterministicForSeed) {
    RngStream gen(2);
    const auto base = random_pool(gen, 40);
    auto a = base, b = base;
    RngStream r1(77), r2(77);
    EXPECT_EQ(select_round(a, 8, 32, Policy::Random, r1).chosen, select_round(b, 8, 32, Policy::Random, r2).chosen);
}

TEST(Select, DiversityPicksFarCluster) {
    // Top entropy are near-duplicates at the origin; a far cluster sits just
    // below them inside the M_cand window.
    CandidatePool pool;
    for (std::size_t i = 0; i < 8; ++i) pool.items.push_back(candidate(i, {0.001 * i, 0.0}, 0.9 - 0.001 * i));
    for (std::size_t i = 0; i < 4; ++i) pool.items.push_back(candidate(100 + i, {50.0, 0.001 * i}, 0.8 - 0.001 * i));
    for (std::size_t i = 0; i < 20; ++i) pool.items.push_back(candidate(200 + i, {-50.0, 1.0 * i}, 0.1));
    auto a = pool, b = pool;
    RngStream r1(1), r2(1);
    const auto ek = select_round(a, 4, 12, Policy::EntropyKCenter, r1);
    const auto e = select_round(b, 4, 12, Policy::Entropy, r2);
    auto far = [](const SelectionRound& r) {
        return std::count_if(r.chosen.begin(), r.chosen.end(), [](std::size_t id) { return id >= 100 && id < 200; });
    };
    EXPECT_GE(far(ek), 1);
    EXPECT_EQ(far(e), 0);
    EXPECT_EQ(ek.chosen[0], 0u);  // highest entropy seeds the traversal
    for (auto id : ek.chosen) EXPECT_LT(id, 200u) << "outside M_cand window";
}

TEST(Select, InsufficientCandidates) {
    RngStream gen(3);
    auto pool = random_pool(gen, 5);
    RngStream rng(1);
    EXPECT_THROW(select_round(pool, 6, 8, Policy::Entropy, rng), RoundError);
    EXPECT_THROW(select_round(pool, 0, 8, Policy::Entropy, rng), RoundError);
    select_round(pool, 4, 8, Policy::Entropy, rng);
    EXPECT_THROW(select_round(pool, 2, 8, Policy::Random, rng), RoundError);
}

TEST(Select, RoundsNeverRepeatProperty) {
    RngStream gen(8);
    const std::vector<Policy> policies{Policy::Random, Policy::Entropy, Policy::KCenter, Policy::EntropyKCenter};
    for (int trial = 0; trial < 40; ++trial) {
        auto pool = random_pool(gen, 20 + gen.index(40));
        RngStream rng(trial);
        std::set<std::size_t> seen;
        std::size_t round = 0;
        while (true) {
            const std::size_t k = 1 + gen.index(6);
            if (pool.unselected() < k) break;
            const auto before = pool.unselected();
            const auto r = select_round(pool, k, 4 * k, policies[gen.index(4)], rng, round++);
            EXPECT_EQ(r.chosen.size(), k);
            EXPECT_EQ(pool.unselected(), before - k);
            for (auto id : r.chosen) EXPECT_TRUE(seen.insert(id).second) << "id " << id << " selected twice";
        }
    }
}

TEST(Select, PolicyNames) {
    for (auto p : {Policy::Random, Policy::Entropy, Policy::KCenter, Policy::EntropyKCenter})
        EXPECT_EQ(parse_policy(to_string(p)), p);
    EXPECT_THROW(parse_policy("greedy"), ConfigError);
}

// ---------------------------------------------------------------------------
// Round log
// ---------------------------------------------------------------------------

TEST(RoundLog, AppendAndLoad) {
    TempDir dir("rounds");
    SelectionRound a{0, 2, {4, 9}, {0.5, 0.25}, Policy::Entropy, 7};
    SelectionRound b{1, 2, {1, 3}, {0.1, 0.1}, Policy::EntropyKCenter, 8};
    append_round_log(dir.file("rounds.jsonl"), a);
    append_round_log(dir.file("rounds.jsonl"), b);
    const auto got = load_round_log(dir.file("rounds.jsonl"));
    ASSERT_EQ(got.size(), 2u);
    EXPECT_EQ(to_json(got[0]), to_json(a));
    EXPECT_EQ(to_json(got[1]), to_json(b));
    EXPECT_TRUE(load_round_log(dir.file("none.jsonl")).empty());
}

TEST(RoundLog, VersionAndParseErrors) {
    auto j = to_json(SelectionRound{});
    j["version"] = 2;
    EXPECT_THROW(round_from_json(j), VersionError);
    TempDir dir("rounds-bad");
    std::ofstream(dir.file("bad.jsonl")) << to_json(SelectionRound{}).dump() << "\n{nope\n";
    try {
        load_round_log(dir.file("bad.jsonl"));
        FAIL();
    } catch (const ParseError& e) {
        EXPECT_EQ(e.line, 2u);
    }
}

// ---------------------------------------------------------------------------
// Simulated annotator
// ---------------------------------------------------------------------------

TEST(Annotator, CorrectDraftNeedsNoEdits) {
    const auto w = gen_synthetic_dataset(WorldSpec{}, 50, 0, 5);
    const SimulatedAnnotator a(w, 0.0, 1);
    for (const auto& s : w.train) {
        const auto c = a.simulate_feedback(s.clauses, s.id);
        EXPECT_TRUE(c.edits.empty());
        EXPECT_EQ(c.labels, s.labels);
        EXPECT_EQ(c.flipped, 0u);
    }
}

TEST(Annotator, MissingClauseIsTheOnlyEdit) {
    const auto w = gen_synthetic_dataset(WorldSpec{}, 80, 0, 5);
    const SimulatedAnnotator a(w, 0.0, 1);
    std::size_t checked = 0;
    for (const auto& s : w.train) {
        if (s.clauses.empty()) continue;
        auto draft = s.clauses;
        const auto missing = draft.back().key();
        draft.pop_back();
        const auto c = a.simulate_feedback(draft, s.id);
        ASSERT_EQ(c.edits.size(), 1u);
        EXPECT_EQ(c.edits[0], (ClauseEdit{missing, true}));
        ++checked;
    }
    EXPECT_GT(checked, 10u);
}

TEST(Annotator, SpuriousClauseIsRemoved) {
    Clause extra;
    extra.rule_id = "R9";
    extra.template_id = "T99";
    const std::vector<Clause> corrected;
    EXPECT_EQ(clause_edits({extra}, corrected), (std::vector<ClauseEdit>{{"R9|T99", false}}));
}

TEST(Annotator, FlipRateConcentration) {
    const auto w = gen_synthetic_dataset(WorldSpec{}, 1000, 0, 6);
    const SimulatedAnnotator a(w, 0.1, 42);
    std::size_t flipped = 0, bits = 0;
    for (const auto& s : w.train) {
        std::size_t n = 0;
        const auto noisy = a.noisy_labels(s.id, &n);
        std::size_t diff = 0;
        for (std::size_t k = 0; k < noisy.size(); ++k) diff += noisy[k] != s.labels[k];
        EXPECT_EQ(diff, n);
        flipped += n;
        bits += noisy.size();
    }
    EXPECT_NEAR(static_cast<double>(flipped) / static_cast<double>(bits), 0.1, 0.02);
}

TEST(Annotator, PureFunctionOfSeedAndSample) {
    const auto w = gen_synthetic_dataset(WorldSpec{}, 20, 0, 6);
    const SimulatedAnnotator a(w, 0.3, 42), b(w, 0.3, 42);
    std::vector<Vec> fwd(20), rev(20);
    for (std::size_t id = 0; id < 20; ++id) fwd[id] = a.noisy_labels(id);
    for (std::size_t id = 20; id-- > 0;) rev[id] = b.noisy_labels(id);
    EXPECT_EQ(fwd, rev);
    EXPECT_THROW(a.noisy_labels(20), LookupError);
    EXPECT_THROW(SimulatedAnnotator(w, 1.0, 1), ConfigError);
    EXPECT_THROW(SimulatedAnnotator(w, -0.1, 1), ConfigError);
}
