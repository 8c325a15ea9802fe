#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "fastinst/core/ops.hpp"
#include "fastinst/data/mask.hpp"
#include "fastinst/model/decoder.hpp"

namespace fastinst {

struct Detection {
    int class_id = 0;  // 1..K
    double score = 0.0;
    double class_prob = 0.0;
    double mask_score = 0.0;
    std::size_t query_index = 0;
    BinaryMask mask;
};

/// Turns the final-layer prediction of the IA-guided queries into scored detections.
/// Queries whose most likely class is "no object" are dropped; the rest are sorted
/// by descending score with ties kept in query order.
template <typename T>
std::vector<Detection> postprocess(const LayerPrediction<T>& pred, std::size_t e3_h, std::size_t e3_w, std::size_t image_h,
                                   std::size_t image_w) {
    NoGradGuard no_grad;
    const std::size_t Na = pred.class_logits.dim(0), C = pred.class_logits.dim(1);
    auto probs = softmax_lastdim(pred.class_logits);
    auto up = bilinear_resize(reshape(pred.mask_logits, {Na, e3_h, e3_w}), image_h, image_w);
    const std::size_t HW = image_h * image_w;

    std::vector<Detection> dets;
    for (std::size_t q = 0; q < Na; ++q) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < C; ++c)
            if (probs[q * C + c] > probs[q * C + best]) best = c;
        if (best == C - 1) continue;
        Detection d;
        d.class_id = static_cast<int>(best) + 1;
        d.class_prob = static_cast<double>(probs[q * C + best]);
        d.query_index = q;
        d.mask = BinaryMask(image_h, image_w);
        double fg_sum = 0.0;
        std::size_t fg = 0;
        for (std::size_t p = 0; p < HW; ++p) {
            const double s = 1.0 / (1.0 + std::exp(-static_cast<double>(up[q * HW + p])));
            if (s > 0.5) {
                d.mask.bits[p] = 1;
                fg_sum += s;
                ++fg;
            }
        }
        d.mask_score = fg ? fg_sum / static_cast<double>(fg) : 0.0;
        d.score = d.class_prob * d.mask_score;
        dets.push_back(std::move(d));
    }
    std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
    return dets;
}

}  // namespace fastinst
