#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "fastinst/data/mask.hpp"
#include "fastinst/data/scene.hpp"
#include "fastinst/train/postprocess.hpp"

namespace fastinst {

struct EvalOptions {
    std::size_t max_dets = 100;
    /// Side length the COCO area thresholds (32^2, 96^2) are defined for.
    double reference_size = 640.0;
    /// Side length of the evaluated images; 0 takes it from the first ground-truth mask.
    double image_size = 0.0;
};

struct EvalResult {
    double ap = 0, ap50 = 0, ap75 = 0, ap_s = 0, ap_m = 0, ap_l = 0, ar100 = 0;
    std::size_t num_images = 0, num_gt = 0, num_dets = 0;
};

inline constexpr std::size_t kNumIouThresholds = 10;
inline constexpr std::size_t kRecallPoints = 101;

inline double iou_threshold(std::size_t t) { return 0.5 + 0.05 * static_cast<double>(t); }

namespace detail {

struct AreaRange {
    double lo, hi;
    bool contains(double a) const { return a >= lo && a < hi; }
};

struct CategoryImageEval {
    // Per threshold: for each kept detection, whether it matched and whether it is ignored.
    std::array<std::vector<char>, kNumIouThresholds> matched, ignored;
    std::vector<double> scores;
    std::size_t num_gt = 0;  // non-ignored
};

/// Greedy matching of one image's detections of one category, mirroring the COCO rules:
/// each detection, by descending score, takes the unmatched ground truth of highest IoU
/// above the threshold, preferring non-ignored ground truth.
inline CategoryImageEval match_image(const std::vector<const Detection*>& dets, const std::vector<const InstanceTarget*>& gts,
                                     const AreaRange& range) {
    CategoryImageEval out;
    std::vector<std::size_t> gt_order(gts.size());
    std::iota(gt_order.begin(), gt_order.end(), std::size_t{0});
    std::vector<char> gt_ignore(gts.size());
    for (std::size_t g = 0; g < gts.size(); ++g) gt_ignore[g] = !range.contains(static_cast<double>(gts[g]->mask.area()));
    std::stable_sort(gt_order.begin(), gt_order.end(), [&](std::size_t a, std::size_t b) { return gt_ignore[a] < gt_ignore[b]; });
    for (auto g : gt_order) out.num_gt += !gt_ignore[g];

    std::vector<std::vector<double>> iou(dets.size(), std::vector<double>(gts.size()));
    for (std::size_t d = 0; d < dets.size(); ++d)
        for (std::size_t g = 0; g < gts.size(); ++g) iou[d][g] = mask_iou(dets[d]->mask, gts[g]->mask);

    for (std::size_t t = 0; t < kNumIouThresholds; ++t) {
        std::vector<char> gt_taken(gts.size(), 0);
        out.matched[t].assign(dets.size(), 0);
        out.ignored[t].assign(dets.size(), 0);
        for (std::size_t d = 0; d < dets.size(); ++d) {
            double best_iou = std::min(iou_threshold(t), 1.0 - 1e-10);
            std::ptrdiff_t match = -1;
            for (auto g : gt_order) {
                if (gt_taken[g]) continue;
                if (match >= 0 && !gt_ignore[static_cast<std::size_t>(match)] && gt_ignore[g]) break;
                if (iou[d][g] < best_iou) continue;
                best_iou = iou[d][g];
                match = static_cast<std::ptrdiff_t>(g);
            }
            if (match >= 0) {
                gt_taken[static_cast<std::size_t>(match)] = 1;
                out.matched[t][d] = 1;
                out.ignored[t][d] = gt_ignore[static_cast<std::size_t>(match)];
            } else {
                out.ignored[t][d] = !range.contains(static_cast<double>(dets[d]->mask.area()));
            }
        }
    }
    for (const auto* d : dets) out.scores.push_back(d->score);
    return out;
}

/// 101-point interpolated precision and final recall for one category at one threshold.
inline std::pair<double, double> precision_recall(const std::vector<const CategoryImageEval*>& evals, std::size_t t) {
    std::size_t num_gt = 0;
    struct Entry {
        double score;
        bool tp;
    };
    std::vector<Entry> entries;
    for (const auto* e : evals) {
        num_gt += e->num_gt;
        for (std::size_t d = 0; d < e->scores.size(); ++d)
            if (!e->ignored[t][d]) entries.push_back({e->scores[d], e->matched[t][d] != 0});
    }
    if (num_gt == 0) return {-1.0, -1.0};
    std::stable_sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) { return a.score > b.score; });
    std::vector<double> precision, recall;
    double tp = 0, fp = 0;
    for (const auto& e : entries) {
        (e.tp ? tp : fp) += 1;
        recall.push_back(tp / static_cast<double>(num_gt));
        precision.push_back(tp / (tp + fp));
    }
    for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
    double ap = 0;
    for (std::size_t r = 0; r < kRecallPoints; ++r) {
        const double level = static_cast<double>(r) / static_cast<double>(kRecallPoints - 1);
        auto it = std::lower_bound(recall.begin(), recall.end(), level - 1e-12);
        if (it != recall.end()) ap += precision[static_cast<std::size_t>(it - recall.begin())];
    }
    return {ap / static_cast<double>(kRecallPoints), recall.empty() ? 0.0 : recall.back()};
}

}  // namespace detail

/// COCO-style mask AP/AR. Detections of each image must already be sorted by
/// descending score; equal scores keep their given order (lower index first).
/// Size buckets use the COCO thresholds scaled by (image_size / reference_size)^2.
/// Buckets or metrics with no ground truth report -1.
inline EvalResult evaluate(const std::vector<std::vector<Detection>>& detections,
                           const std::vector<std::vector<InstanceTarget>>& ground_truth, const EvalOptions& opt = {}) {
    if (detections.size() != ground_truth.size()) throw std::invalid_argument("evaluate: detection and ground-truth image counts differ");
    EvalResult res;
    res.num_images = ground_truth.size();
    double size = opt.image_size;
    int max_class = 0;
    for (const auto& img : ground_truth)
        for (const auto& g : img) {
            if (size <= 0) size = static_cast<double>(std::max(g.mask.height, g.mask.width));
            max_class = std::max(max_class, g.class_id);
            ++res.num_gt;
        }
    for (const auto& img : detections)
        for (const auto& d : img) max_class = std::max(max_class, d.class_id);
    if (size <= 0) size = opt.reference_size;
    const double s = (size / opt.reference_size) * (size / opt.reference_size);
    const double inf = std::numeric_limits<double>::infinity();
    const std::array<detail::AreaRange, 4> ranges{{{0, inf}, {0, 32.0 * 32.0 * s}, {32.0 * 32.0 * s, 96.0 * 96.0 * s}, {96.0 * 96.0 * s, inf}}};

    // [range][threshold] accumulators of per-category AP / recall
    std::array<std::array<std::vector<double>, kNumIouThresholds>, 4> ap_values, recall_values;
    for (int c = 1; c <= max_class; ++c) {
        std::array<std::vector<detail::CategoryImageEval>, 4> per_range;
        for (std::size_t i = 0; i < ground_truth.size(); ++i) {
            std::vector<const Detection*> dets;
            for (const auto& d : detections[i])
                if (d.class_id == c && dets.size() < opt.max_dets) dets.push_back(&d);
            std::vector<const InstanceTarget*> gts;
            for (const auto& g : ground_truth[i])
                if (g.class_id == c) gts.push_back(&g);
            for (std::size_t r = 0; r < ranges.size(); ++r) per_range[r].push_back(detail::match_image(dets, gts, ranges[r]));
        }
        for (std::size_t r = 0; r < ranges.size(); ++r) {
            std::vector<const detail::CategoryImageEval*> ptrs;
            for (const auto& e : per_range[r]) ptrs.push_back(&e);
            for (std::size_t t = 0; t < kNumIouThresholds; ++t) {
                auto [ap, rc] = detail::precision_recall(ptrs, t);
                if (ap < 0) continue;
                ap_values[r][t].push_back(ap);
                recall_values[r][t].push_back(rc);
            }
        }
    }
    for (const auto& img : detections) res.num_dets += img.size();

    auto mean_of = [](const std::vector<double>& v) {
        return v.empty() ? -1.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    };
    auto mean_over_thresholds = [&](const std::array<std::vector<double>, kNumIouThresholds>& per_t) {
        std::vector<double> all;
        for (const auto& v : per_t) all.insert(all.end(), v.begin(), v.end());
        return mean_of(all);
    };
    res.ap = mean_over_thresholds(ap_values[0]);
    res.ap50 = mean_of(ap_values[0][0]);
    res.ap75 = mean_of(ap_values[0][5]);
    res.ap_s = mean_over_thresholds(ap_values[1]);
    res.ap_m = mean_over_thresholds(ap_values[2]);
    res.ap_l = mean_over_thresholds(ap_values[3]);
    res.ar100 = mean_over_thresholds(recall_values[0]);
    return res;
}

}  // namespace fastinst
