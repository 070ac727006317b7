#include <gtest/gtest.h>

#include "support.hpp"

using namespace nsmrg;
using namespace nsmrg::testing;

TEST(Projection, AddsBiasToEveryRow) {
    const Tensor x = Tensor::from_rows({{1, 2}, {3, 4}});
    ProjectionParams p{Tensor::from_rows({{1, 0, 2}, {0, 1, -1}}), Tensor::from_rows({{0.5, -0.5, 0}})};
    const Tensor v = project_features(x, p);
    EXPECT_EQ(v, Tensor::from_rows({{1.5, 1.5, 0}, {3.5, 3.5, 2}}));
}

TEST(Projection, RejectsWidthMismatch) {
    RngStream rng(1);
    const ProjectionParams p = ProjectionParams::init(4, 3, rng);
    EXPECT_THROW(project_features(Tensor(2, 5), p), DimensionError);
}

TEST(LayerNorm, RowsHaveZeroMeanUnitVariance) {
    RngStream rng(2);
    const Tensor x = random_tensor(rng, 5, 12, 3.0);
    const Tensor y = layer_norm(x, Tensor(1, 12, 1.0), Tensor(1, 12), nullptr);
    for (std::size_t r = 0; r < y.rows; ++r) {
        double mean = 0, var = 0;
        for (double v : y.row(r)) mean += v;
        mean /= 12;
        for (double v : y.row(r)) var += (v - mean) * (v - mean);
        EXPECT_NEAR(mean, 0.0, 1e-12);
        EXPECT_NEAR(var / 12, 1.0, 1e-9);
    }
}

TEST(LayerNorm, ConstantRowStaysFinite) {
    const Tensor y = layer_norm(Tensor(1, 8, 3.0), Tensor(1, 8, 1.0), Tensor(1, 8), nullptr);
    EXPECT_TRUE(y.all_finite());
    for (double v : y.data) EXPECT_EQ(v, 0.0);
}

TEST(Encoder, AttentionRowsAreDistributions) {
    RngStream rng(3);
    const EncoderParams p = EncoderParams::init(8, 4, 16, rng);
    EncoderCache cache;
    const Tensor out = encode_attend(random_tensor(rng, 6, 8), p, Dropout::off(), &cache);
    ASSERT_EQ(cache.attention.size(), 4u);
    for (const auto& a : cache.attention)
        for (std::size_t i = 0; i < a.rows; ++i) {
            double s = 0;
            for (double v : a.row(i)) {
                EXPECT_GE(v, 0.0);
                s += v;
            }
            EXPECT_NEAR(s, 1.0, 1e-12);
        }
    EXPECT_EQ(out.rows, 6u);
    EXPECT_EQ(out.cols, 8u);
}

TEST(Encoder, HeadsMustDivideWidth) {
    RngStream rng(4);
    EXPECT_THROW(EncoderParams::init(10, 4, 8, rng), ConfigError);
    EncoderParams p = EncoderParams::init(8, 4, 8, rng);
    p.heads = 3;
    EXPECT_THROW(encode_attend(Tensor(2, 8), p), ConfigError);
}

TEST(Encoder, PermutingPatchesPermutesOutputRows) {
    RngStream rng(5);
    const EncoderParams p = EncoderParams::init(8, 2, 8, rng);
    const Tensor x = random_tensor(rng, 4, 8);
    Tensor xp(4, 8);
    const std::array<std::size_t, 4> perm{2, 0, 3, 1};
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 8; ++j) xp(i, j) = x(perm[i], j);
    const Tensor y = encode_attend(x, p), yp = encode_attend(xp, p);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(yp(i, j), y(perm[i], j), 1e-12);
}

TEST(Pool, MeanOfRowsAndEmptyInput) {
    EXPECT_EQ(pool_mean(Tensor::from_rows({{1, 2}, {3, 6}})), (Vec{2, 4}));
    EXPECT_THROW(pool_mean(Tensor(0, 3)), PreconditionError);
}

TEST(ConceptHead, ProbabilitiesInUnitInterval) {
    RngStream rng(6);
    const ConceptHeadParams p = ConceptHeadParams::init(8, 16, 5, 0.1, rng);
    for (int i = 0; i < 50; ++i) {
        const Vec c = predict_concepts(random_vec(rng, 8, 4.0), p);
        for (double v : c) {
            EXPECT_GT(v, 0.0);
            EXPECT_LT(v, 1.0);
        }
    }
}

TEST(ConceptHead, DropoutOffIsDeterministicAndMaskIsInverted) {
    RngStream rng(7);
    const ConceptHeadParams p = ConceptHeadParams::init(6, 400, 3, 0.25, rng);
    const Vec x = random_vec(rng, 6);
    EXPECT_EQ(predict_concepts(x, p), predict_concepts(x, p));
    RngStream d(8);
    ConceptHeadCache cache;
    predict_concepts(x, p, Dropout{0.25, &d}, &cache);
    std::size_t zeros = 0;
    for (double m : cache.mask) {
        EXPECT_TRUE(m == 0.0 || std::abs(m - 1.0 / 0.75) < 1e-15);
        zeros += m == 0.0;
    }
    EXPECT_NEAR(static_cast<double>(zeros) / 400.0, 0.25, 0.07);
}

TEST(ConceptHead, WidthMismatchThrows) {
    RngStream rng(9);
    const ConceptHeadParams p = ConceptHeadParams::init(6, 4, 3, 0.1, rng);
    EXPECT_THROW(predict_concepts(Vec(5, 0.0), p), DimensionError);
}

// Focal loss with gamma = 0 is alpha-weighted BCE.
TEST(FocalLoss, GammaZeroMatchesWeightedCrossEntropy) {
    const Vec p{0.2, 0.7, 0.9}, y{1, 0, 1};
    const double a = 0.25;
    const double expect = (-a * std::log(0.2) - (1 - a) * std::log(0.3) - a * std::log(0.9)) / 3.0;
    EXPECT_NEAR(focal_loss(p, y, 0.0, a).loss, expect, 1e-14);
}

TEST(FocalLoss, HandValueAtDefaults) {
    // y=1, p=0.5: 0.25 * 0.25 * ln 2
    EXPECT_NEAR(focal_loss(Vec{0.5}, Vec{1}).loss, 0.0625 * std::log(2.0), 1e-15);
    // y=0, p=0.5: 0.75 * 0.25 * ln 2
    EXPECT_NEAR(focal_loss(Vec{0.5}, Vec{0}).loss, 0.1875 * std::log(2.0), 1e-15);
}

TEST(FocalLoss, DownweightsEasyExamples) {
    EXPECT_LT(focal_loss(Vec{0.95}, Vec{1}).loss, 0.01 * focal_loss(Vec{0.95}, Vec{1}, 0.0).loss);
}

TEST(FocalLoss, SaturatedProbabilitiesStayFinite) {
    const auto r = focal_loss(Vec{0.0, 1.0, 1.0}, Vec{1, 0, 1});
    EXPECT_TRUE(std::isfinite(r.loss));
    for (double g : r.grad) EXPECT_TRUE(std::isfinite(g));
}

TEST(FocalLoss, ArgumentErrors) {
    EXPECT_THROW(focal_loss(Vec{0.5}, Vec{1, 0}), DimensionError);
    EXPECT_THROW(focal_loss(Vec{}, Vec{}), DimensionError);
    EXPECT_THROW(focal_loss(Vec{0.5}, Vec{1}, -1.0), ArgumentError);
    EXPECT_THROW(focal_loss(Vec{0.5}, Vec{1}, 2.0, 1.0), ArgumentError);
}

TEST(Gradients, RandomInstancesPassCentralDifferences) {
    RngStream rng(11);
    for (int i = 0; i < 20; ++i) {
        EXPECT_LT(grad_instance_projection(rng), 1e-4);
        EXPECT_LT(grad_instance_encoder(rng), 1e-4);
        EXPECT_LT(grad_instance_concept_head(rng), 1e-4);
        EXPECT_LT(grad_instance_focal(rng), 1e-4);
        EXPECT_LT(grad_instance_composite(rng, 500 + i), 1e-4);
    }
}

TEST(Gradients, FiniteDiffHelperOnQuadratic) {
    const DiffFn f = [](const Vec& t, Vec* g) {
        if (g) *g = {2 * t[0], 6 * t[1]};
        return t[0] * t[0] + 3 * t[1] * t[1];
    };
    EXPECT_LT(finite_diff_check(f, {0.3, -1.2}), 1e-8);
    const DiffFn wrong = [](const Vec& t, Vec* g) {
        if (g) *g = {t[0], t[1]};
        return t[0] * t[0] + t[1] * t[1];
    };
    EXPECT_GT(finite_diff_check(wrong, {1.0, 1.0}), 0.1);
}

TEST(Adam, FirstStepMovesEachWeightByLearningRate) {
    Tensor w = Tensor::from_rows({{1.0, -2.0, 0.5}});
    const Tensor g = Tensor::from_rows({{0.3, -4.0, 1e-3}});
    OptimState s;
    s.cfg.lr = 0.01;
    const std::vector<ParamRef> refs{{"w", &w, &g}};
    adam_step(refs, s);
    // m_hat = g and v_hat = g^2 after one step, so the update is lr * g / (|g| + eps).
    for (std::size_t i = 0; i < 3; ++i) {
        const double gi = g.data[i];
        const double expect = std::array{1.0, -2.0, 0.5}[i] - 0.01 * gi / (std::abs(gi) + 1e-8);
        EXPECT_NEAR(w.data[i], expect, 1e-15);
    }
    EXPECT_EQ(s.step, 1u);
}

TEST(Adam, NonFiniteGradientLeavesEverythingUntouched) {
    Tensor a = Tensor::from_rows({{1.0}}), b = Tensor::from_rows({{2.0}});
    const Tensor ga = Tensor::from_rows({{0.5}}), gb = Tensor::from_rows({{NAN}});
    OptimState s;
    const std::vector<ParamRef> refs{{"a", &a, &ga}, {"b", &b, &gb}};
    EXPECT_THROW(adam_step(refs, s), TrainingError);
    EXPECT_EQ(a.data[0], 1.0);
    EXPECT_EQ(b.data[0], 2.0);
    EXPECT_EQ(s.step, 0u);
    EXPECT_TRUE(s.m.empty());
}

TEST(Adam, ShapeMismatchIsReported) {
    Tensor a(2, 2);
    const Tensor ga(2, 3);
    OptimState s;
    const std::vector<ParamRef> refs{{"a", &a, &ga}};
    EXPECT_THROW(adam_step(refs, s), DimensionError);
}

TEST(LossWeights, InitialEffectiveWeightsMatchLambdas) {
    const LossWeights w = LossWeights::from_lambdas(kDefaultLambdas);
    const std::array<double, 4> expect{1.0, 2.0, 1.0, 1.0};
    for (std::size_t i = 0; i < kTaskCount; ++i) {
        EXPECT_DOUBLE_EQ(w.effective(i), expect[i]);
        EXPECT_DOUBLE_EQ(w.log_vars.data[i], -std::log(2.0 * expect[i]));
    }
    EXPECT_THROW(LossWeights::from_lambdas({1, 0, 1, 1}), ConfigError);
    EXPECT_THROW(LossWeights::from_lambdas(kDefaultLambdas, -1.0), ConfigError);
}

TEST(CompositeLoss, HandComputedTotalAndInactiveTasks) {
    LossWeights w = LossWeights::from_lambdas({1, 2, 1, 1}, 0.5);
    const std::array<double, 4> parts{0.0, 0.4, 0.3, 0.2};
    double expect = 0.5 * 4.0;  // ridge * theta_sq
    for (std::size_t i : {1u, 2u, 3u}) expect += w.effective(i) * parts[i] + w.log_vars.data[i] / 2.0;
    const auto r = composite_loss(parts, w, 4.0, {false, true, true, true});
    EXPECT_NEAR(r.total, expect, 1e-15);
    EXPECT_EQ(r.d_log_vars[0], 0.0);
    EXPECT_NEAR(r.d_log_vars[1], -2.0 * 0.4 + 0.5, 1e-15);
    EXPECT_THROW(composite_loss({0, NAN, 0, 0}, w), TrainingError);
    EXPECT_THROW(composite_loss({0, -1, 0, 0}, w), TrainingError);
}

TEST(CompositeLoss, DisabledRuleLossFreezesItsVariance) {
    TinySetup s = tiny_setup(21, 4);
    ObjectiveOptions o;
    o.use_rule_loss = false;
    std::vector<BatchItem> batch;
    for (const auto& smp : s.world.train) batch.push_back({&smp.x, &smp.targets});
    Model g = s.model.zeros_like();
    batch_objective(s.model, batch, o, &g);
    EXPECT_EQ(g.loss.log_vars.data[kTaskRule], 0.0);
    EXPECT_EQ(g.loss.log_vars.data[kTaskRep], 0.0);
    for (const auto& r : g.rules.rules)
        for (double v : r.tree.gates.data) EXPECT_EQ(v, 0.0);
    EXPECT_NE(g.loss.log_vars.data[kTaskConcept], 0.0);
}

TEST(Model, ProjectionGetsNoGradientAndIsExcludedFromRidge) {
    TinySetup s = tiny_setup(22, 4);
    std::vector<BatchItem> batch;
    for (const auto& smp : s.world.train) batch.push_back({&smp.x, &smp.targets});
    Model g = s.model.zeros_like();
    batch_objective(s.model, batch, {}, &g);
    for (double v : g.proj.weight.data) EXPECT_EQ(v, 0.0);
    EXPECT_FALSE(Model::ridge_applies("proj.weight"));
    EXPECT_TRUE(Model::ridge_applies("enc.wq"));
    EXPECT_FALSE(Model::ridge_applies("head.b2"));
}

TEST(Model, ForwardRejectsBadInput) {
    TinySetup s = tiny_setup(23, 2);
    EXPECT_THROW(forward(s.model, Tensor(0, 16)), PreconditionError);
    Tensor x(2, 16);
    x.data[3] = INFINITY;
    EXPECT_THROW(forward(s.model, x), DimensionError);
    EXPECT_THROW(forward(s.model, Tensor(2, 15)), DimensionError);
}
