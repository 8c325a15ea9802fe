#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "fastinst/loss/hungarian.hpp"
#include "fastinst/loss/losses.hpp"
#include "fastinst/testing/oracles.hpp"
#include "fastinst/testing/suites.hpp"

using namespace fastinst;
using TD = Tensor<double>;
using Pairs = std::vector<std::pair<std::size_t, std::size_t>>;

namespace {

CostMatrix random_cost(Rng& rng, std::size_t r, std::size_t c, bool coarse) {
    CostMatrix m(r, c);
    for (auto& v : m.values) v = coarse ? static_cast<double>(rng.uniform_int(0, 3)) : rng.uniform(-1.0, 1.0);
    return m;
}

InstanceTarget box_target(int cls, std::size_t H, std::size_t W, std::size_t y0, std::size_t y1, std::size_t x0, std::size_t x1) {
    InstanceTarget t{cls, BinaryMask(H, W)};
    for (std::size_t y = y0; y < y1; ++y)
        for (std::size_t x = x0; x < x1; ++x) t.mask.set(y, x);
    return t;
}

/// Activation map from explicit per-pixel logits.
ActivationMap<double> activation_from_logits(std::size_t h, std::size_t w, std::vector<double> logits, std::size_t C) {
    ActivationMap<double> act;
    act.height = h;
    act.width = w;
    act.logits = TD::from({h * w, C}, std::move(logits), true);
    act.probs = softmax_lastdim(act.logits);
    return act;
}

LayerPrediction<double> prediction(std::vector<double> cls, std::vector<double> masks, std::size_t na, std::size_t C,
                                   std::size_t L) {
    LayerPrediction<double> p;
    p.class_logits = TD::from({na, C}, std::move(cls), true);
    p.mask_logits = TD::from({na, L}, std::move(masks), true);
    return p;
}

LossConfig weights_only(double cls, double ce, double dice) {
    LossConfig cfg;
    cfg.weights.cls = cls;
    cfg.weights.ce = ce;
    cfg.weights.dice = dice;
    cfg.use_location_cost = false;
    return cfg;
}

}  // namespace

TEST(Hungarian, SmallExamples) {
    CostMatrix one(1, 1, 0.0);
    auto m = hungarian_match(one);
    EXPECT_EQ(m.pairs, (Pairs{{0, 0}}));
    EXPECT_EQ(m.total_cost, 0.0);
    CostMatrix two(2, 2);
    two.values = {1, 2, 2, 1};
    m = hungarian_match(two);
    EXPECT_EQ(m.pairs, (Pairs{{0, 0}, {1, 1}}));
    EXPECT_DOUBLE_EQ(m.total_cost, 2.0);
    EXPECT_TRUE(hungarian_match(CostMatrix(0, 3)).pairs.empty());
}

TEST(Hungarian, TiesResolveToLexicographicallySmallestPairs) {
    EXPECT_EQ(hungarian_match(CostMatrix(2, 3, 1.0)).pairs, (Pairs{{0, 0}, {1, 1}}));
    EXPECT_EQ(hungarian_match(CostMatrix(3, 2, 1.0)).pairs, (Pairs{{0, 0}, {1, 1}}));
    CostMatrix m(2, 2);
    m.values = {1, 1, 1, 1};
    EXPECT_EQ(hungarian_match(m).pairs, (Pairs{{0, 0}, {1, 1}}));
}

TEST(Hungarian, RejectsNonFiniteCost) {
    CostMatrix m(2, 2, 0.0);
    m(1, 0) = std::nan("");
    EXPECT_THROW(hungarian_match(m), std::invalid_argument);
    m(1, 0) = INFINITY;
    EXPECT_THROW(hungarian_match(m), std::invalid_argument);
}

TEST(Hungarian, MatchesExhaustiveSearchOnRandomMatrices) {
    auto rng = Rng::split(1, "hungarian", 0);
    for (int seed = 0; seed < 200; ++seed) {
        for (auto [r, c] : {std::pair{7u, 4u}, std::pair{4u, 7u}}) {
            auto cost = random_cost(rng, r, c, seed % 2 == 0);
            auto m = hungarian_match(cost);
            EXPECT_EQ(m.pairs.size(), 4u);
            EXPECT_NEAR(m.total_cost, oracle::brute_force_assignment_cost(cost), 1e-9);
            auto optima = oracle::brute_force_optimal_pairings(cost);
            ASSERT_FALSE(optima.empty());
            EXPECT_EQ(m.pairs, *std::min_element(optima.begin(), optima.end()));
        }
    }
}

TEST(LocationCost, InsideOutsideAndSinglePixel) {
    BinaryMask fine(32, 32);
    for (std::size_t y = 0; y < 16; ++y)
        for (std::size_t x = 0; x < 16; ++x) fine.set(y, x);
    fine.set(31, 31);  // one positive fine pixel in the last cell
    auto grid = downsample_any(fine, 16);
    EXPECT_EQ(grid, oracle::naive_max_pool(fine, 16));
    EXPECT_EQ(location_cost(0, grid), 0.0);
    EXPECT_EQ(location_cost(1, grid), 1.0);
    EXPECT_EQ(location_cost(3, grid), 0.0);
    auto targets = prepare_targets<double>({{1, fine}}, 16);
    EXPECT_EQ(targets.source_any[0], grid);
    EXPECT_EQ(targets.e3_h, 4u);
    EXPECT_EQ(targets.e3_majority.shape(), (Shape{1, 16}));
}

TEST(ActivationLoss, DominantLocationCostPicksTheInsidePixel) {
    // 3x3 source grid (stride 16 on a 48x48 image); the target covers the center cell only.
    auto target = box_target(2, 48, 48, 16, 32, 16, 32);
    auto targets = prepare_targets<double>({target}, 16);
    std::vector<double> logits(9 * 4, 0.0);
    for (std::size_t i = 0; i < 9; ++i) logits[i * 4 + 1] = i == 4 ? 6.0 : 9.0;  // center p ~ 0.99, others higher
    auto act = activation_from_logits(3, 3, logits, 4);
    EXPECT_GT(act.probs[4 * 4 + 1], 0.99);
    LossConfig cfg;
    auto out = instance_activation_loss(act, targets, cfg);
    EXPECT_EQ(out.matching.pairs, (Pairs{{4, 0}}));
    EXPECT_EQ(out.location_cost, 0.0);
    cfg.use_location_cost = false;
    EXPECT_NE(instance_activation_loss(act, targets, cfg).matching.pairs, (Pairs{{4, 0}}));
}

TEST(ActivationLoss, PerfectOneHotPredictionsGiveZeroLoss) {
    auto target = box_target(1, 48, 48, 0, 16, 0, 16);
    auto targets = prepare_targets<double>({target}, 16);
    std::vector<double> logits(9 * 4, 0.0);
    for (std::size_t i = 0; i < 9; ++i) logits[i * 4 + (i == 0 ? 0 : 3)] = 50.0;
    auto out = instance_activation_loss(activation_from_logits(3, 3, logits, 4), targets, LossConfig{});
    EXPECT_EQ(out.matching.pairs, (Pairs{{0, 0}}));
    EXPECT_LT(out.loss.item(), 1e-12);
}

TEST(ActivationLoss, MatchingEqualsExhaustiveOptimumOn5x5) {
    auto rng = Rng::split(2, "act", 0);
    for (int trial = 0; trial < 20; ++trial) {
        auto a = box_target(1, 80, 80, 0, 40, 0, 30), b = box_target(3, 80, 80, 30, 80, 40, 80);
        auto targets = prepare_targets<double>({a, b}, 16);
        std::vector<double> logits(25 * 4);
        for (auto& v : logits) v = 2.0 * rng.normal();
        auto act = activation_from_logits(5, 5, logits, 4);
        LossConfig cfg;
        cfg.weights.loc = trial % 2 ? 1000.0 : 0.5;
        auto out = instance_activation_loss(act, targets, cfg);
        CostMatrix cost(25, 2);
        for (std::size_t i = 0; i < 25; ++i)
            for (std::size_t j = 0; j < 2; ++j)
                cost(i, j) = -act.probs[i * 4 + static_cast<std::size_t>(targets.classes[j] - 1)] +
                             cfg.weights.loc * (targets.source_any[j].bits[i] ? 0.0 : 1.0);
        auto optima = oracle::brute_force_optimal_pairings(cost);
        EXPECT_NE(std::find(optima.begin(), optima.end(), out.matching.pairs), optima.end());
        EXPECT_EQ(out.matching.pairs.size(), 2u);
        if (cfg.weights.loc >= 2.0) {
            for (auto [i, j] : out.matching.pairs) EXPECT_TRUE(targets.source_any[j].bits[i]);
        }
    }
}

TEST(ActivationLoss, NoTargetsMeansAllVoidCrossEntropy) {
    TargetSet<double> none;
    std::vector<double> logits(4 * 3, 0.0);
    auto out = instance_activation_loss(activation_from_logits(2, 2, logits, 3), none, LossConfig{});
    EXPECT_TRUE(out.matching.pairs.empty());
    EXPECT_NEAR(out.loss.item(), 20.0 * std::log(3.0), 1e-12);
}

TEST(ActivationLoss, FixedSemanticTargetsWithoutBipartiteMatching) {
    auto target = box_target(2, 32, 32, 0, 16, 0, 32);
    auto targets = prepare_targets<double>({target}, 16);
    std::vector<double> logits(4 * 4, 0.0);
    auto act = activation_from_logits(2, 2, logits, 4);
    LossConfig cfg;
    cfg.use_bipartite = false;
    auto out = instance_activation_loss(act, targets, cfg);
    EXPECT_TRUE(out.matching.pairs.empty());
    // Every pixel has uniform probabilities, so the weighted CE is log 4 regardless of targets.
    EXPECT_NEAR(out.loss.item(), 20.0 * std::log(4.0), 1e-12);
}

TEST(PredictionLoss, PerfectPredictionLimit) {
    auto target = box_target(1, 32, 32, 0, 16, 0, 16);
    auto targets = prepare_targets<double>({target}, 16);
    const std::size_t L = 16;
    std::vector<double> masks(L);
    for (std::size_t p = 0; p < L; ++p) masks[p] = targets.e3_majority[p] > 0.5 ? 50.0 : -50.0;
    auto pred = prediction({50.0, 0.0, 0.0, 0.0}, masks, 1, 4, L);
    MatchingAssignment sigma{{{0, 0}}, 0.0};
    EXPECT_LT(prediction_layer_loss(pred, targets, sigma, weights_only(0, 0, 1)).item(), 1e-12);
    EXPECT_LT(prediction_layer_loss(pred, targets, sigma, weights_only(0, 1, 0)).item(), 1e-3);
    EXPECT_LT(prediction_layer_loss(pred, targets, sigma, weights_only(1, 0, 0)).item(), 1e-12);
}

TEST(PredictionLoss, DisjointMaskDiceIsNearlyOne) {
    auto target = box_target(1, 32, 32, 0, 16, 0, 16);
    auto targets = prepare_targets<double>({target}, 16);
    std::vector<double> masks(16);
    for (std::size_t p = 0; p < 16; ++p) masks[p] = targets.e3_majority[p] > 0.5 ? -50.0 : 50.0;
    auto pred = prediction({0, 0, 0, 0}, masks, 1, 4, 16);
    const double dice = prediction_layer_loss(pred, targets, {{{0, 0}}, 0.0}, weights_only(0, 0, 1)).item();
    EXPECT_NEAR(dice, 1.0 - 1.0 / 17.0, 1e-9);
}

TEST(PredictionLoss, PerLayerMatchingsAreExhaustiveOptima) {
    auto rng = Rng::split(3, "pred", 0);
    auto a = box_target(1, 32, 32, 0, 16, 0, 32), b = box_target(2, 32, 32, 16, 32, 0, 16);
    auto targets = prepare_targets<double>({a, b}, 16);
    const std::vector<std::size_t> locations = {0, 1, 2};
    for (int trial = 0; trial < 30; ++trial) {
        std::vector<LayerPrediction<double>> preds;
        for (std::size_t l = 0; l < 2; ++l) {
            std::vector<double> cls(3 * 4), masks(3 * 16);
            for (auto& v : cls) v = rng.normal();
            for (auto& v : masks) v = 3.0 * rng.normal();
            preds.push_back(prediction(cls, masks, 3, 4, 16));
        }
        LossConfig cfg;
        cfg.weights.loc = trial % 2 ? 1.5 : 0.0;
        auto out = prediction_loss(preds, targets, locations, cfg);
        ASSERT_EQ(out.matchings.size(), 2u);
        for (std::size_t l = 0; l < 2; ++l) {
            auto optima = oracle::brute_force_optimal_pairings(prediction_cost(preds[l], targets, locations, cfg));
            EXPECT_EQ(out.matchings[l].pairs, *std::min_element(optima.begin(), optima.end()));
            EXPECT_EQ(out.matchings[l].pairs.size(), 2u);
        }
        EXPECT_NEAR(out.loss.item(), out.per_layer[0] + out.per_layer[1], 1e-12);
    }
}

TEST(PredictionLoss, CostTermsMatchLayerLossDefinitions) {
    // With one query and one target, the matched cost's mask part equals the layer loss's mask part.
    auto target = box_target(1, 32, 32, 0, 16, 8, 24);
    auto targets = prepare_targets<double>({target}, 16);
    auto rng = Rng::split(4, "terms", 0);
    std::vector<double> masks(16);
    for (auto& v : masks) v = rng.normal();
    auto pred = prediction({0.3, -0.2, 0.1, 0.0}, masks, 1, 4, 16);
    auto cfg = weights_only(0, 5, 5);
    const double cost = prediction_cost(pred, targets, {0}, cfg)(0, 0);
    EXPECT_NEAR(cost, prediction_layer_loss(pred, targets, {{{0, 0}}, 0.0}, cfg).item(), 1e-12);
}

TEST(PredictionLoss, ZeroTargetsGiveClassOnlyLoss) {
    TargetSet<double> none;
    auto pred = prediction(std::vector<double>(2 * 4, 0.0), std::vector<double>(2 * 16, 1.0), 2, 4, 16);
    auto out = prediction_loss<double>({pred}, none, {0, 1}, LossConfig{});
    EXPECT_TRUE(out.matchings[0].pairs.empty());
    EXPECT_NEAR(out.loss.item(), 2.0 * std::log(4.0), 1e-12);
    EXPECT_NEAR(gt_guided_loss<double>({pred}, {}, none, LossConfig{}).item(), 2.0 * std::log(4.0), 1e-12);
}

TEST(GuidedLoss, EqualsFinalLayerLossOnIdenticalPredictions) {
    auto target = box_target(2, 32, 32, 0, 16, 0, 16);
    auto targets = prepare_targets<double>({target}, 16);
    auto rng = Rng::split(5, "guided", 0);
    std::vector<double> cls(3 * 4), masks(3 * 16);
    for (auto& v : cls) v = rng.normal();
    for (auto& v : masks) v = rng.normal();
    auto pred = prediction(cls, masks, 3, 4, 16);
    auto normal = prediction_loss<double>({pred, pred}, targets, {0, 1, 2}, LossConfig{});
    auto guided = gt_guided_loss<double>({pred}, normal.matchings.back(), targets, LossConfig{});
    EXPECT_DOUBLE_EQ(guided.item(), normal.per_layer.back());
    EXPECT_THROW(gt_guided_loss<double>({pred}, {{{0, 3}}, 0.0}, targets, LossConfig{}), std::invalid_argument);
    EXPECT_THROW(gt_guided_loss<double>({pred}, {{{5, 0}}, 0.0}, targets, LossConfig{}), std::invalid_argument);
    EXPECT_THROW(gt_guided_loss<double>({}, {}, targets, LossConfig{}), std::invalid_argument);
}

TEST(TotalLoss, SumOfComponentsAndAblationSwitches) {
    DatasetSpec spec;
    spec.height = spec.width = 64;
    auto scene = generate_scene(spec, 1);
    ModelConfig mc;
    mc.dim = 16;
    mc.na = 8;
    mc.nb = 2;
    FastInstModel<double> model(mc);
    auto fwd = model.forward(cast_tensor<double>(scene.image));
    auto targets = prepare_targets<double>(scene.instances, 16);
    auto full = total_loss(model, fwd, targets, LossConfig{});
    ASSERT_TRUE(full.gt.has_value());
    ASSERT_TRUE(full.match_location_cost.has_value());
    EXPECT_NEAR(full.total.item(), full.ia + full.pred + *full.gt, 1e-9);
    EXPECT_EQ(full.final_matching.pairs.size(), std::min<std::size_t>(8, scene.instances.size()));

    LossConfig no_gt;
    no_gt.use_gt_guidance = false;
    auto without = total_loss(model, fwd, targets, no_gt);
    EXPECT_FALSE(without.gt.has_value());
    EXPECT_NEAR(without.total.item(), without.ia + without.pred, 1e-9);
    EXPECT_DOUBLE_EQ(without.ia, full.ia);

    LossConfig no_loc;
    no_loc.use_location_cost = false;
    EXPECT_FALSE(total_loss(model, fwd, targets, no_loc).match_location_cost.has_value());
}

TEST(TotalLoss, GradcheckEveryParameterGroupSampled) {
    suites::GradientOptions opt;
    opt.coords_per_group = 12;
    auto r = suites::gradient_integrity(opt);
    EXPECT_TRUE(r.passed) << r.detail;
}

TEST(TotalLoss, FixedAssignmentNeverBeatsRematching) {
    auto r = suites::fixed_matching_optimality(12);
    EXPECT_TRUE(r.passed) << r.detail;
}
