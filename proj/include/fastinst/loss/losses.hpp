#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "fastinst/core/ops.hpp"
#include "fastinst/data/mask.hpp"
#include "fastinst/data/scene.hpp"
#include "fastinst/loss/hungarian.hpp"
#include "fastinst/model/fastinst.hpp"

namespace fastinst {

struct LossWeights {
    double cls = 2.0;
    double ce = 5.0;
    double dice = 5.0;
    double cls_q = 20.0;
    double loc = 1000.0;
    double no_object = 0.1;
};

struct LossConfig {
    LossWeights weights;
    bool use_gt_guidance = true;
    bool use_location_cost = true;
    /// When false the activation head is trained with fixed per-pixel semantic targets.
    bool use_bipartite = true;
};

/// Ground truth of one image at every resolution the losses need.
template <typename T>
struct TargetSet {
    std::vector<int> classes;             // 1..K
    std::vector<BinaryMask> e3_any;       // attention guidance, any-positive downsampling
    std::vector<BinaryMask> source_any;   // location cost on the query source grid
    Tensor<T> e3_majority;                // (N_obj, L) mask-loss targets; undefined when N_obj = 0
    std::size_t e3_h = 0, e3_w = 0;

    std::size_t size() const { return classes.size(); }
};

template <typename T>
TargetSet<T> prepare_targets(const std::vector<InstanceTarget>& instances, std::size_t source_stride) {
    TargetSet<T> t;
    std::vector<T> majority;
    for (const auto& inst : instances) {
        t.classes.push_back(inst.class_id);
        t.e3_any.push_back(downsample_any(inst.mask, 8));
        t.source_any.push_back(downsample_any(inst.mask, source_stride));
        auto m = downsample_majority(inst.mask, 8);
        t.e3_h = m.height;
        t.e3_w = m.width;
        for (auto b : m.bits) majority.push_back(static_cast<T>(b));
    }
    if (!t.classes.empty()) t.e3_majority = Tensor<T>::from({t.classes.size(), t.e3_h * t.e3_w}, std::move(majority));
    return t;
}

/// 0 when the cell lies in the target's (max-pool downsampled) region, else 1.
inline double location_cost(std::size_t cell, const BinaryMask& target_on_grid) {
    return target_on_grid.bits.at(cell) ? 0.0 : 1.0;
}

namespace detail {

inline std::vector<std::size_t> encode_pairs(const MatchingAssignment& m) {
    std::vector<std::size_t> flat;
    for (auto [q, t] : m.pairs) {
        flat.push_back(q);
        flat.push_back(t);
    }
    return flat;
}

inline MatchingAssignment decode_pairs(const std::vector<std::size_t>& flat) {
    MatchingAssignment m;
    for (std::size_t i = 0; i + 1 < flat.size(); i += 2) m.pairs.emplace_back(flat[i], flat[i + 1]);
    return m;
}

}  // namespace detail

template <typename T>
struct ActivationLoss {
    Tensor<T> loss;
    MatchingAssignment matching;
    double location_cost = 0.0;  // sum of the weighted location terms of matched pairs
};

/// Instance activation loss: Hungarian matching of source-grid pixels to
/// targets under cost -p_{i,c_j} + w_loc * L_loc, then a cross-entropy where
/// matched pixels predict their target's class and every other pixel
/// predicts "no object" at the down-weighted rate.
template <typename T>
ActivationLoss<T> instance_activation_loss(const ActivationMap<T>& act, const TargetSet<T>& targets, const LossConfig& cfg,
                                           RoutingTape* tape = nullptr) {
    const std::size_t P = act.pixels(), C = act.probs.dim(1), K = C - 1;
    const auto& w = cfg.weights;
    std::vector<std::size_t> labels(P, K);
    std::vector<T> weights(P, static_cast<T>(w.no_object));
    ActivationLoss<T> out;

    if (!targets.size()) {
        // nothing to match
    } else if (cfg.use_bipartite) {
        auto flat = routed(tape, [&] {
            CostMatrix cost(P, targets.size());
            for (std::size_t i = 0; i < P; ++i)
                for (std::size_t j = 0; j < targets.size(); ++j) {
                    double c = -static_cast<double>(act.probs[i * C + static_cast<std::size_t>(targets.classes[j] - 1)]);
                    if (cfg.use_location_cost) c += w.loc * location_cost(i, targets.source_any[j]);
                    cost(i, j) = c;
                }
            return detail::encode_pairs(hungarian_match(cost));
        });
        out.matching = detail::decode_pairs(flat);
        for (auto [i, j] : out.matching.pairs) {
            labels[i] = static_cast<std::size_t>(targets.classes[j] - 1);
            weights[i] = T(1);
            if (cfg.use_location_cost) out.location_cost += w.loc * location_cost(i, targets.source_any[j]);
        }
    } else {
        for (std::size_t i = 0; i < P; ++i)
            for (std::size_t j = 0; j < targets.size(); ++j)
                if (targets.source_any[j].bits[i]) {
                    labels[i] = static_cast<std::size_t>(targets.classes[j] - 1);
                    weights[i] = T(1);
                    break;
                }
    }
    out.loss = scale(cross_entropy(act.logits, labels, weights), static_cast<T>(w.cls_q));
    return out;
}

/// Matching cost between every IA query and every target for one layer.
template <typename T>
CostMatrix prediction_cost(const LayerPrediction<T>& pred, const TargetSet<T>& targets, const std::vector<std::size_t>& locations,
                           const LossConfig& cfg) {
    const auto& w = cfg.weights;
    const std::size_t Na = pred.class_logits.dim(0), C = pred.class_logits.dim(1), L = pred.mask_logits.dim(1);
    const std::size_t N = targets.size();
    CostMatrix cost(Na, N);
    std::vector<double> tsum(N, 0.0);
    for (std::size_t j = 0; j < N; ++j)
        for (std::size_t p = 0; p < L; ++p) tsum[j] += static_cast<double>(targets.e3_majority[j * L + p]);
    for (std::size_t q = 0; q < Na; ++q) {
        const T* logits = pred.class_logits.ptr() + q * C;
        const double mx = static_cast<double>(*std::max_element(logits, logits + C));
        double z = 0;
        for (std::size_t c = 0; c < C; ++c) z += std::exp(static_cast<double>(logits[c]) - mx);
        const T* m = pred.mask_logits.ptr() + q * L;
        double softplus_sum = 0, sig_sum = 0;
        std::vector<double> sig(L);
        for (std::size_t p = 0; p < L; ++p) {
            const double x = static_cast<double>(m[p]);
            softplus_sum += std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
            sig[p] = 1.0 / (1.0 + std::exp(-x));
            sig_sum += sig[p];
        }
        for (std::size_t j = 0; j < N; ++j) {
            const T* t = targets.e3_majority.ptr() + j * L;
            double xt = 0, st = 0;
            for (std::size_t p = 0; p < L; ++p) {
                xt += static_cast<double>(m[p]) * static_cast<double>(t[p]);
                st += sig[p] * static_cast<double>(t[p]);
            }
            const double prob = std::exp(static_cast<double>(logits[targets.classes[j] - 1]) - mx) / z;
            const double bce = (softplus_sum - xt) / static_cast<double>(L);
            const double dice = 1.0 - (2.0 * st + 1.0) / (sig_sum + tsum[j] + 1.0);
            double c = -w.cls * prob + w.ce * bce + w.dice * dice;
            if (cfg.use_location_cost) c += w.loc * location_cost(locations.at(q), targets.source_any[j]);
            cost(q, j) = c;
        }
    }
    return cost;
}

/// One layer's prediction loss under a fixed assignment:
/// w_ce * BCE + w_dice * Dice over matched pairs (each normalized by the
/// target count) plus w_cls * weighted cross-entropy over all IA queries.
template <typename T>
Tensor<T> prediction_layer_loss(const LayerPrediction<T>& pred, const TargetSet<T>& targets, const MatchingAssignment& sigma,
                                const LossConfig& cfg) {
    const auto& w = cfg.weights;
    const std::size_t Na = pred.class_logits.dim(0), K = pred.class_logits.dim(1) - 1;
    const std::size_t L = pred.mask_logits.dim(1);
    std::vector<std::size_t> labels(Na, K);
    std::vector<T> weights(Na, static_cast<T>(w.no_object));
    std::vector<std::size_t> rows, cols;
    for (auto [q, t] : sigma.pairs) {
        if (q >= Na || t >= targets.size())
            throw std::invalid_argument("prediction loss: assignment pair (" + std::to_string(q) + "," + std::to_string(t) +
                                        ") inconsistent with " + std::to_string(Na) + " queries and " +
                                        std::to_string(targets.size()) + " targets");
        labels[q] = static_cast<std::size_t>(targets.classes[t] - 1);
        weights[q] = T(1);
        rows.push_back(q);
        cols.push_back(t);
    }
    auto loss = scale(cross_entropy(pred.class_logits, labels, weights), static_cast<T>(w.cls));
    if (rows.empty()) return loss;
    const T num_masks = static_cast<T>(targets.size());
    auto logits = gather_rows(pred.mask_logits, rows);
    auto target_rows = gather_rows(targets.e3_majority, cols);
    auto bce = scale(sum(bce_with_logits(logits, target_rows)), static_cast<T>(w.ce) / (static_cast<T>(L) * num_masks));
    auto dice = scale(sum(dice_loss_rows(logits, target_rows)), static_cast<T>(w.dice) / num_masks);
    return sum_scalars<T>({loss, bce, dice});
}

template <typename T>
struct PredictionLoss {
    Tensor<T> loss;
    std::vector<double> per_layer;
    std::vector<MatchingAssignment> matchings;  // one per layer; back() is the final-layer assignment
    double location_cost = 0.0;
};

/// Deep-supervised prediction loss over layers 0..D, each with its own matching.
template <typename T>
PredictionLoss<T> prediction_loss(const std::vector<LayerPrediction<T>>& preds, const TargetSet<T>& targets,
                                  const std::vector<std::size_t>& locations, const LossConfig& cfg, RoutingTape* tape = nullptr) {
    PredictionLoss<T> out;
    std::vector<Tensor<T>> terms;
    for (const auto& pred : preds) {
        MatchingAssignment sigma;
        if (targets.size()) {
            sigma = detail::decode_pairs(
                routed(tape, [&] { return detail::encode_pairs(hungarian_match(prediction_cost(pred, targets, locations, cfg))); }));
            if (cfg.use_location_cost)
                for (auto [q, t] : sigma.pairs) out.location_cost += cfg.weights.loc * location_cost(locations.at(q), targets.source_any[t]);
        }
        auto term = prediction_layer_loss(pred, targets, sigma, cfg);
        out.per_layer.push_back(static_cast<double>(term.item()));
        terms.push_back(term);
        out.matchings.push_back(std::move(sigma));
    }
    out.loss = sum_scalars(terms);
    return out;
}

/// Loss of the guided re-forward outputs (layers 1..D) under the fixed final-layer assignment.
template <typename T>
Tensor<T> gt_guided_loss(const std::vector<LayerPrediction<T>>& guided, const MatchingAssignment& sigma,
                         const TargetSet<T>& targets, const LossConfig& cfg) {
    if (guided.empty()) throw std::invalid_argument("gt_guided_loss: no guided predictions");
    std::vector<Tensor<T>> terms;
    for (const auto& pred : guided) terms.push_back(prediction_layer_loss(pred, targets, sigma, cfg));
    return sum_scalars(terms);
}

template <typename T>
struct LossBreakdown {
    Tensor<T> total;
    double ia = 0.0;
    double pred = 0.0;
    std::optional<double> gt;                     // absent when guidance is disabled or D = 0
    std::optional<double> match_location_cost;    // absent when the location cost is disabled
    std::vector<double> pred_per_layer;
    MatchingAssignment final_matching;
    MatchingAssignment activation_matching;
};

/// L = L_IA-q + L_pred + L'_pred for one image.
template <typename T>
LossBreakdown<T> total_loss(const FastInstModel<T>& model, const ForwardOutput<T>& fwd, const TargetSet<T>& targets,
                            const LossConfig& cfg, RoutingTape* tape = nullptr) {
    LossBreakdown<T> out;
    auto ia = instance_activation_loss(fwd.activation, targets, cfg, tape);
    auto pred = prediction_loss(fwd.decoder.predictions, targets, fwd.queries.locations, cfg, tape);
    std::vector<Tensor<T>> terms{ia.loss, pred.loss};
    out.ia = static_cast<double>(ia.loss.item());
    out.pred = static_cast<double>(pred.loss.item());
    out.pred_per_layer = pred.per_layer;
    out.final_matching = pred.matchings.back();
    out.activation_matching = ia.matching;
    if (cfg.use_location_cost) out.match_location_cost = ia.location_cost + pred.location_cost;

    const std::size_t D = model.decoder().depth();
    if (cfg.use_gt_guidance && D > 0) {
        std::vector<LayerPrediction<T>> guided;
        for (std::size_t l = 1; l <= D; ++l)
            guided.push_back(model.decoder().gt_guided_forward(l, fwd.decoder.pixel_inputs[l - 1], fwd.decoder.query_inputs[l - 1],
                                                               fwd.positions, out.final_matching, targets.e3_any));
        auto gt = gt_guided_loss(guided, out.final_matching, targets, cfg);
        out.gt = static_cast<double>(gt.item());
        terms.push_back(gt);
    }
    out.total = sum_scalars(terms);
    return out;
}

}  // namespace fastinst
