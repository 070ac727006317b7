#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"

using namespace nsmrg;
using namespace nsmrg::testing;

namespace {

TrainConfig small_config() {
    TrainConfig c;
    c.seed = 3;
    c.dims = {16, 8, 2, 16, 16};
    c.world.patches = 4;
    c.world.width = 16;
    c.world.noise = 0.1;
    c.n_train = 48;
    c.n_test = 16;
    c.epochs = 2;
    c.lr = 1e-3;
    return c;
}

Checkpoint random_checkpoint(std::uint64_t seed) {
    auto s = tiny_setup(seed);
    RngStream rng(seed);
    s.model.for_each([&](const std::string&, Tensor& t) {
        for (auto& v : t.data) v = rng.normal();
    });
    OptimState o;
    o.step = 5;
    o.cfg.lr = 3e-4;
    s.model.for_each([&](const std::string&, Tensor& t) {
        o.m.push_back(random_tensor(rng, t.rows, t.cols));
        o.v.push_back(random_tensor(rng, t.rows, t.cols));
    });
    return make_checkpoint(s.model, &o, 0xfeedULL, 4);
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

TEST(Config, JsonRoundTrip) {
    auto c = small_config();
    c.policy = Policy::KCenter;
    c.lambdas = {1.5, 2.5, 0.5, 1.0};
    c.decode.vote_margin = 0.125;
    const auto j = to_json(c);
    EXPECT_EQ(to_json(config_from_json(j)), j);
    EXPECT_EQ(config_hash(config_from_json(j)), config_hash(c));
}

TEST(Config, MissingKeysKeepDefaults) {
    const auto c = config_from_json(json::object());
    EXPECT_EQ(c.seed, TrainConfig{}.seed);
    EXPECT_EQ(c.batch_size, 6u);
    EXPECT_EQ(c.lambdas, kDefaultLambdas);
    EXPECT_EQ(c.candidate_window(), 64u);
}

TEST(Config, Errors) {
    EXPECT_THROW(config_from_json(json{{"version", 2}}), VersionError);
    EXPECT_THROW(config_from_json(json{{"sede", 1}}), ConfigError);
    EXPECT_THROW(config_from_json(json{{"model", {{"depth", 3}}}}), ConfigError);
    EXPECT_THROW(config_from_json(json{{"train", {{"lr", "fast"}}}}), ConfigError);
    EXPECT_THROW(config_from_json(json{{"model", {{"width", 30}, {"heads", 4}}}}), ConfigError);
    EXPECT_THROW(config_from_json(json{{"active", {{"policy", "greedy"}}}}), ConfigError);
    EXPECT_THROW(config_from_json(json{{"active", {{"eta", 1.0}}}}), ConfigError);
    EXPECT_THROW(config_from_json(json{{"train", {{"lambdas", {1.0, 0.0, 1.0, 1.0}}}}}), ConfigError);
    EXPECT_THROW(config_from_json(json::array()), ConfigError);
    EXPECT_THROW(load_config("/nonexistent/config.json"), ConfigError);
    TempDir dir("config");
    std::ofstream(dir.file("bad.json")) << "{ \"seed\": ";
    EXPECT_THROW(load_config(dir.file("bad.json")), ConfigError);
}

TEST(Config, HashCoversShapesAndDataOnly) {
    const auto base = small_config();
    auto c = base;
    c.policy = Policy::Random;
    c.k = 3;
    c.epochs = 9;
    c.decode.fire_threshold = 0.4;
    EXPECT_EQ(config_hash(c), config_hash(base));
    c = base;
    c.seed = 4;
    EXPECT_NE(config_hash(c), config_hash(base));
    c = base;
    c.dims.hidden = 32;
    EXPECT_NE(config_hash(c), config_hash(base));
    c = base;
    c.world.noise = 0.2;
    EXPECT_NE(config_hash(c), config_hash(base));
}

// ---------------------------------------------------------------------------
// Synthetic world
// ---------------------------------------------------------------------------

TEST(World, SameSeedIsByteIdentical) {
    WorldSpec spec;
    spec.noise = 0.3;
    const auto a = gen_synthetic_dataset(spec, 30, 10, 9);
    const auto b = gen_synthetic_dataset(spec, 30, 10, 9);
    for (std::size_t id = 0; id < 40; ++id) {
        EXPECT_EQ(a.sample(id).x.data, b.sample(id).x.data);
        EXPECT_EQ(a.sample(id).labels, b.sample(id).labels);
        EXPECT_EQ(a.sample(id).reference, b.sample(id).reference);
    }
    const auto c = gen_synthetic_dataset(spec, 30, 10, 10);
    EXPECT_NE(a.sample(0).x.data, c.sample(0).x.data);
    EXPECT_THROW(a.sample(40), LookupError);
}

TEST(World, NoiselessLinearProbeIsExact) {
    WorldSpec spec;
    const auto w = gen_synthetic_dataset(spec, 200, 0, 2);
    for (const auto& s : w.train)
        for (std::size_t k = 0; k < w.concepts(); ++k) {
            double num = 0.0, den = 0.0;
            for (std::size_t c = 0; c < spec.width; ++c) {
                num += (s.x(0, c) - w.offsets(0, c)) * w.embed(k, c);
                den += w.embed(k, c) * w.embed(k, c);
            }
            ASSERT_EQ(num / den >= 0.5, s.labels[k] >= 0.5) << "sample " << s.id << " concept " << k;
        }
}

TEST(World, RarePrevalence) {
    WorldSpec spec;
    spec.patches = 2;
    spec.width = 16;
    const auto w = gen_synthetic_dataset(spec, 10000, 0, 4);
    double fracture = 0.0, hernia = 0.0;
    for (const auto& s : w.train) {
        fracture += s.labels[14];
        hernia += s.labels[15];
    }
    EXPECT_NEAR(fracture / 1e4, 0.02, 0.01);
    EXPECT_NEAR(hernia / 1e4, 0.02, 0.01);
}

TEST(World, ExclusiveGroupsAndSpecErrors) {
    const auto w = gen_synthetic_dataset(WorldSpec{}, 500, 0, 1);
    for (const auto& s : w.train) {
        EXPECT_LE(s.labels[1] + s.labels[2], 1.0);
        EXPECT_LE(s.labels[10] + s.labels[11], 1.0);
    }
    WorldSpec bad;
    bad.width = 8;
    EXPECT_THROW(gen_synthetic_dataset(bad, 1, 1, 1), ConfigError);
    bad = WorldSpec{};
    bad.min_fraction = 0.0;
    EXPECT_THROW(gen_synthetic_dataset(bad, 1, 1, 1), ConfigError);
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

TEST(Metrics, MacroF1HandValue) {
    // Concept 0: tp 1, fp 1, fn 0 -> 2/3. Concept 1: never positive -> 1.
    const std::vector<Vec> probs{{0.9, 0.1}, {0.8, 0.2}, {0.1, 0.3}};
    const std::vector<Vec> labels{{1, 0}, {0, 0}, {0, 0}};
    EXPECT_NEAR(macro_f1(probs, labels), (2.0 / 3.0 + 1.0) / 2.0, 1e-15);
    EXPECT_EQ(macro_f1(labels, labels), 1.0);
    EXPECT_THROW(macro_f1({}, {}), DimensionError);
}

TEST(Metrics, AucWithTies) {
    EXPECT_DOUBLE_EQ(roc_auc(Vec{0.1, 0.4, 0.35, 0.8}, Vec{0, 0, 1, 1}), 0.75);
    EXPECT_DOUBLE_EQ(roc_auc(Vec{0.5, 0.5}, Vec{0, 1}), 0.5);
    EXPECT_DOUBLE_EQ(roc_auc(Vec{0.1, 0.9}, Vec{0, 1}), 1.0);
    EXPECT_TRUE(std::isnan(roc_auc(Vec{0.1, 0.9}, Vec{1, 1})));
    // Rule 1 is single-class and skipped.
    const std::vector<Vec> acts{{0.1, 0.5}, {0.9, 0.5}}, bits{{0, 1}, {1, 1}};
    EXPECT_DOUBLE_EQ(rule_auc(acts, bits), 1.0);
}

TEST(Metrics, AucMatchesPairCountingOracle) {
    RngStream rng(6);
    for (int t = 0; t < 200; ++t) {
        const std::size_t n = 2 + rng.index(30);
        Vec s(n), y(n);
        for (std::size_t i = 0; i < n; ++i) {
            s[i] = static_cast<double>(rng.index(5));
            y[i] = rng.bernoulli(0.4);
        }
        double wins = 0, pairs = 0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                if (y[i] == 1 && y[j] == 0) {
                    pairs += 1;
                    wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
                }
        const double auc = roc_auc(s, y);
        if (pairs == 0)
            EXPECT_TRUE(std::isnan(auc));
        else
            EXPECT_NEAR(auc, wins / pairs, 1e-12);
    }
}

TEST(Metrics, ClauseCountsPerfectAndPartial) {
    const auto w = gen_synthetic_dataset(WorldSpec{}, 100, 0, 8);
    ClauseCounts perfect;
    for (const auto& s : w.train) count_clauses(s.clauses, s.clauses, perfect);
    EXPECT_EQ(perfect.precision(), 1.0);
    EXPECT_EQ(perfect.recall(), 1.0);
    EXPECT_GT(perfect.truth, 0.0);

    ClauseCounts empty;
    for (const auto& s : w.train) count_clauses({}, s.clauses, empty);
    EXPECT_EQ(empty.precision(), 1.0);
    EXPECT_EQ(empty.recall(), 0.0);
}

TEST(Metrics, RecordRoundTripIncludingNaN) {
    TempDir dir("metrics");
    MetricsRecord m;
    m.split = "test";
    m.epoch = 3;
    m.round = 1;
    m.samples = 20;
    m.labeled = 48;
    m.loss = 0.1 + 0.2;
    m.bleu = {0.5, 0.25, 1.0 / 3.0, std::nan("")};
    m.rule_auc = std::nan("");
    m.macro_f1 = 0.9999999999999999;
    append_metrics(dir.file("m.jsonl"), m);
    append_metrics(dir.file("m.jsonl"), m);
    const auto got = load_metrics(dir.file("m.jsonl"));
    ASSERT_EQ(got.size(), 2u);
    EXPECT_EQ(trace_text(got), trace_text({m, m}));
    EXPECT_EQ(got[0].loss, m.loss);
    EXPECT_TRUE(std::isnan(got[0].rule_auc));

    auto j = to_json(m);
    j["version"] = 9;
    EXPECT_THROW(metrics_from_json(j), VersionError);
    EXPECT_THROW(load_metrics(dir.file("none.jsonl")), StateError);
    std::ofstream(dir.file("bad.jsonl")) << to_json(m).dump() << "\nnot json\n";
    EXPECT_THROW(load_metrics(dir.file("bad.jsonl")), ParseError);
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

TEST(Checkpoint, RoundTripIsBitwise) {
    TempDir dir("ckpt");
    const auto c = random_checkpoint(1);
    save_checkpoint(dir.file("c.bin"), c);
    const auto d = load_checkpoint(dir.file("c.bin"));
    EXPECT_TRUE(same_checkpoint(c, d));
    EXPECT_FALSE(std::filesystem::exists(dir.file("c.bin.tmp")));

    auto s = tiny_setup(1);
    OptimState o;
    apply_checkpoint(d, s.model, &o, 0xfeedULL);
    EXPECT_TRUE(same_checkpoint(make_checkpoint(s.model, &o, 0xfeedULL, 4), c));
}

TEST(Checkpoint, TruncationAndCorruption) {
    const auto bytes = serialize_checkpoint(random_checkpoint(2));
    for (std::size_t cut : {std::size_t{1}, std::size_t{9}, bytes.size() / 2, bytes.size() - 4}) {
        std::vector<char> t(bytes.begin(), bytes.end() - static_cast<std::ptrdiff_t>(cut));
        EXPECT_THROW(deserialize_checkpoint(t), TruncationError) << "cut " << cut;
    }
    auto flipped = bytes;
    flipped[bytes.size() / 2] ^= 0x10;
    EXPECT_THROW(deserialize_checkpoint(flipped), StateError);
    auto extra = bytes;
    extra.push_back(0);
    EXPECT_THROW(deserialize_checkpoint(extra), StateError);
    auto magic = bytes;
    magic[0] = 'X';
    EXPECT_THROW(deserialize_checkpoint(magic), StateError);
    auto version = bytes;
    version[8] = 2;
    EXPECT_THROW(deserialize_checkpoint(version), VersionError);
    EXPECT_THROW(load_checkpoint("/nonexistent/c.bin"), StateError);
}

TEST(Checkpoint, ApplyRejectsMismatches) {
    const auto c = random_checkpoint(3);
    auto s = tiny_setup(3);
    const auto before = make_checkpoint(s.model, nullptr, 0xfeedULL, 0);
    EXPECT_THROW(apply_checkpoint(c, s.model, nullptr, 0xbeefULL), CompatibilityError);

    TrainConfig cfg = small_config();
    cfg.dims.hidden = 32;
    cfg.world.width = 16;
    Model other = make_model(cfg, s.world);
    EXPECT_THROW(apply_checkpoint(c, other, nullptr, 0xfeedULL), CompatibilityError);

    auto missing = c;
    missing.tensors.pop_back();
    EXPECT_THROW(apply_checkpoint(missing, s.model, nullptr, 0xfeedULL), CompatibilityError);
    // A refused checkpoint leaves the model untouched.
    EXPECT_TRUE(same_checkpoint(make_checkpoint(s.model, nullptr, 0xfeedULL, 0), before));
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

TEST(Init, LossWeightsMatchLambdas) {
    const auto cfg = small_config();
    const auto w = make_world(cfg);
    const Model m = make_model(cfg, w);
    for (std::size_t i = 0; i < kTaskCount; ++i) EXPECT_EQ(m.loss.effective(i), kDefaultLambdas[i]);
    EXPECT_NEAR(m.loss.log_vars.data[1], std::log(0.25), 1e-15);
}

TEST(Init, PriorBiasIsLogitOfPrevalence) {
    const auto cfg = small_config();
    const auto w = make_world(cfg);
    Model m = make_model(cfg, w);
    std::vector<LabeledItem> items;
    for (const auto& s : w.train) items.push_back({s.id, s.targets});
    init_prior_bias(m, items);
    for (std::size_t k = 0; k < w.concepts(); ++k) {
        double pos = 0.0;
        for (const auto& s : w.train) pos += s.labels[k];
        const double p = std::clamp(pos / static_cast<double>(w.train.size()), 0.01, 0.99);
        EXPECT_NEAR(m.head.b2.data[k], std::log(p / (1.0 - p)), 1e-12);
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

TEST(Train, ZeroLearningRateLeavesParameters) {
    auto cfg = small_config();
    cfg.lr = 0.0;
    cfg.prior_bias = false;
    const auto w = make_world(cfg);
    const auto init = make_checkpoint(make_model(cfg, w), nullptr, 0, 0);
    const auto r = train_loop(w, cfg);
    const auto after = make_checkpoint(r.model, nullptr, 0, 0);
    EXPECT_EQ(after.tensors, init.tensors);
    EXPECT_EQ(r.epochs_run, cfg.epochs);
    EXPECT_EQ(r.trace.size(), cfg.epochs);
}

TEST(Train, LossDecreasesAndParametersMove) {
    auto cfg = small_config();
    cfg.epochs = 6;
    const auto w = make_world(cfg);
    const auto r = train_loop(w, cfg);
    ASSERT_EQ(r.trace.size(), 6u);
    EXPECT_LT(r.trace.back().loss, r.trace.front().loss);
    EXPECT_GT(r.optim.step, 0u);
    for (const auto& m : r.trace) {
        EXPECT_EQ(m.samples, cfg.n_test);
        EXPECT_EQ(m.labeled, cfg.n_train);
    }
}

TEST(Train, BitDeterministic) {
    auto cfg = small_config();
    const auto w = make_world(cfg);
    const auto a = train_loop(w, cfg);
    const auto b = train_loop(make_world(cfg), cfg);
    EXPECT_EQ(trace_text(a.trace), trace_text(b.trace));
    EXPECT_TRUE(same_checkpoint(make_checkpoint(a.model, &a.optim, 1, 2), make_checkpoint(b.model, &b.optim, 1, 2)));
}

TEST(Train, ActiveRoundsGrowLabeledSetWithoutRepeats) {
    auto cfg = small_config();
    cfg.active = true;
    cfg.rounds = 3;
    cfg.k = 4;
    cfg.initial_labeled = 8;
    cfg.epochs = 1;
    TempDir dir("active");
    TrainHooks hooks;
    hooks.round_log = dir.file("rounds.jsonl");
    const auto w = make_world(cfg);
    const auto r = train_loop(w, cfg, hooks);
    EXPECT_EQ(r.rounds.size(), 3u);
    EXPECT_EQ(r.trace.size(), 4u);
    EXPECT_EQ(r.labeled.size(), 8u + 3u * 4u);
    std::set<std::size_t> all(r.labeled.begin(), r.labeled.end());
    EXPECT_EQ(all.size(), r.labeled.size());
    for (auto id : r.unlabeled) EXPECT_FALSE(all.count(id));
    EXPECT_EQ(r.labeled.size() + r.unlabeled.size(), cfg.n_train);
    for (std::size_t i = 0; i < r.trace.size(); ++i) {
        EXPECT_EQ(r.trace[i].round, i);
        EXPECT_EQ(r.trace[i].labeled, 8u + 4u * i);
    }
    const auto log = load_round_log(hooks.round_log);
    ASSERT_EQ(log.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(log[i].chosen, r.rounds[i].chosen);
}

TEST(Train, DivergenceAbortsWithCheckpoint) {
    auto cfg = small_config();
    auto w = make_world(cfg);
    w.train[5].x(0, 0) = 1e300;  // overflows inside the encoder
    TempDir dir("diverge");
    TrainHooks hooks;
    hooks.divergence_checkpoint = dir.file("diverged.bin");
    EXPECT_THROW(train_loop(w, cfg, hooks), TrainingError);
    const auto c = load_checkpoint(hooks.divergence_checkpoint);
    EXPECT_EQ(c.config_hash, config_hash(cfg));
    for (const auto& t : c.tensors)
        for (double v : t.value.data) ASSERT_TRUE(std::isfinite(v)) << t.path;
}

TEST(Train, EvaluatePerfectPredictionsOnNoiselessWorld) {
    // Decoding the ground-truth bits reproduces the reference clauses, so
    // clause precision and recall of the oracle are exactly one.
    const auto w = gen_synthetic_dataset(WorldSpec{}, 0, 150, 12);
    ClauseCounts counts;
    for (const auto& s : w.test) count_clauses(w.truth_clauses(s.labels), s.clauses, counts);
    EXPECT_EQ(counts.precision(), 1.0);
    EXPECT_EQ(counts.recall(), 1.0);
}

TEST(Train, EvaluateFieldsAreInRange) {
    const auto cfg = small_config();
    const auto w = make_world(cfg);
    const Model m = make_model(cfg, w);
    const auto rec = evaluate(m, w, w.test, inference_options(cfg));
    EXPECT_EQ(rec.samples, w.test.size());
    for (double v : {rec.macro_f1, rec.clause_precision, rec.clause_recall, rec.flagged_rate, rec.rouge_l}) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
    EXPECT_EQ(evaluate(m, w, {}, inference_options(cfg)).samples, 0u);
}
