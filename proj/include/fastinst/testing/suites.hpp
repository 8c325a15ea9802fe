#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "fastinst/core/gradcheck.hpp"
#include "fastinst/data/scene.hpp"
#include "fastinst/loss/losses.hpp"
#include "fastinst/model/fastinst.hpp"
#include "fastinst/testing/oracles.hpp"
#include "fastinst/train/evaluate.hpp"

namespace fastinst::suites {

struct SuiteResult {
    std::string name;
    bool passed = false;
    std::string detail;
    double seconds = 0.0;
};

template <typename F>
SuiteResult timed(const std::string& name, F&& body) {
    SuiteResult r;
    r.name = name;
    const auto t0 = std::chrono::steady_clock::now();
    try {
        body(r);
    } catch (const std::exception& e) {
        r.passed = false;
        r.detail = std::string("exception: ") + e.what();
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

inline std::string fmt(double v) {
    std::ostringstream os;
    os.precision(3);
    os << std::scientific << v;
    return os.str();
}

struct GradientOptions {
    std::size_t coords_per_group = 200;
    double eps = 1e-4;
    double tol = 1e-4;
    std::uint64_t seed = 0;
};

/// End-to-end finite-difference check of the total loss on a 2-instance 64x64 scene
/// (D=1, dim=16), sampling coordinates separately for every parameter group.
inline SuiteResult gradient_integrity(const GradientOptions& opt = {}) {
    return timed("gradient integrity", [&](SuiteResult& r) {
        DatasetSpec spec;
        spec.height = spec.width = 64;
        spec.min_instances = spec.max_instances = 2;
        spec.seed = opt.seed;
        const auto scene = generate_scene(spec, 0);
        ModelConfig cfg;
        cfg.dim = 16;
        cfg.layers = 1;
        cfg.na = 8;
        cfg.nb = 4;
        cfg.seed = opt.seed;
        FastInstModel<double> model(cfg);
        const auto image = cast_tensor<double>(scene.image);
        const auto targets = prepare_targets<double>(scene.instances, level_stride(cfg.source_level));
        LossConfig lc;

        RoutingTape tape;
        bool recorded = false;
        auto objective = [&] {
            if (recorded) tape.replay();
            auto out = model.forward(image, &tape);
            auto loss = total_loss(model, out, targets, lc, &tape);
            recorded = true;
            return loss.total;
        };
        std::map<std::string, std::vector<Tensor<double>>> groups;
        for (const auto& [name, t] : model.params().all()) groups[param_group(name)].push_back(t);

        std::ostringstream os;
        double worst = 0.0;
        bool ok = true;
        std::size_t checked = 0;
        for (const auto& [group, tensors] : groups) {
            GradCheckOptions go;
            go.eps = opt.eps;
            go.tol = opt.tol;
            go.max_coords_total = opt.coords_per_group;
            go.seed = opt.seed + std::hash<std::string>{}(group);
            recorded = false;
            tape = RoutingTape{};
            auto rep = finite_diff_gradcheck(objective, tensors, go);
            ok = ok && rep.passed;
            worst = std::max(worst, rep.max_relative_error);
            checked += rep.coordinates_checked;
            if (!rep.passed) os << group << " rel=" << fmt(rep.max_relative_error) << " " << rep.failure << "; ";
        }
        r.passed = ok;
        os << groups.size() << " groups, " << checked << " coords, max rel err " << fmt(worst);
        r.detail = os.str();
    });
}

/// Hungarian total cost against exhaustive search on random matrices with both sides at most 7.
inline SuiteResult hungarian_oracle(std::size_t count = 500, std::uint64_t seed = 0) {
    return timed("hungarian oracle", [&](SuiteResult& r) {
        std::size_t bad = 0;
        for (std::size_t i = 0; i < count; ++i) {
            auto rng = Rng::split(seed, "hungarian-suite", i);
            CostMatrix c(static_cast<std::size_t>(rng.uniform_int(1, 7)), static_cast<std::size_t>(rng.uniform_int(1, 7)));
            const bool integer = i % 2 == 0;
            for (auto& v : c.values) v = integer ? static_cast<double>(rng.uniform_int(0, 4)) : rng.uniform(-5.0, 5.0);
            const auto m = hungarian_match(c);
            const double brute = oracle::brute_force_assignment_cost(c);
            if (m.total_cost != brute && std::abs(m.total_cost - brute) > 1e-12 * std::max(1.0, std::abs(brute))) ++bad;
            if (m.pairs.size() != std::min(c.rows, c.cols)) ++bad;
        }
        r.passed = bad == 0;
        r.detail = std::to_string(count) + " matrices, " + std::to_string(bad) + " mismatches";
    });
}

/// Local-maximum-first selection against the literal full-scan oracle.
inline SuiteResult local_max_oracle(std::size_t count = 200, std::uint64_t seed = 0) {
    return timed("local-maximum-first oracle", [&](SuiteResult& r) {
        std::size_t bad = 0;
        for (std::size_t i = 0; i < count; ++i) {
            auto rng = Rng::split(seed, "selection-suite", i);
            const auto h = static_cast<std::size_t>(rng.uniform_int(1, 24)), w = static_cast<std::size_t>(rng.uniform_int(1, 24));
            const auto K = static_cast<std::size_t>(rng.uniform_int(1, 4));
            const std::size_t C = K + 1, P = h * w;
            // Every third map uses coarse levels, producing ties and plateaus.
            const bool coarse = i % 3 == 0;
            std::vector<double> probs(P * C);
            for (std::size_t p = 0; p < P; ++p) {
                double z = 0;
                for (std::size_t c = 0; c < C; ++c) {
                    probs[p * C + c] = coarse ? static_cast<double>(rng.uniform_int(1, 3)) : rng.uniform(0.01, 1.0);
                    z += probs[p * C + c];
                }
                for (std::size_t c = 0; c < C; ++c) probs[p * C + c] /= z;
            }
            const auto want = static_cast<std::size_t>(rng.uniform_int(1, static_cast<std::int64_t>(P)));
            const auto got = select_ia_queries<double>(probs, h, w, C, want, true);
            if (got != oracle::naive_select(probs, h, w, C, want, true)) ++bad;
        }
        r.passed = bad == 0;
        r.detail = std::to_string(count) + " maps, " + std::to_string(bad) + " mismatches";
    });
}

/// Blocked (query, pixel) pairs get no attention, rows sum to one, and empty
/// mask rows are replaced before they reach the attention kernel.
inline SuiteResult masked_attention(std::size_t count = 20, std::uint64_t seed = 0) {
    return timed("masked-attention invariant", [&](SuiteResult& r) {
        double worst_blocked = 0.0, worst_row = 0.0;
        std::size_t fallback_rows = 0;
        bool kernel_rejects = false;
        for (std::size_t i = 0; i < count; ++i) {
            auto rng = Rng::split(seed, "attention-suite", i);
            ModelConfig cfg;
            cfg.dim = 16;
            cfg.na = static_cast<std::size_t>(rng.uniform_int(2, 6));
            cfg.nb = static_cast<std::size_t>(rng.uniform_int(0, 3));
            cfg.seed = seed + i;
            ParamStore<double> store(cfg.seed);
            DecoderLayer<double> layer(store, 1, cfg);
            const std::size_t L = static_cast<std::size_t>(rng.uniform_int(4, 30)), N = cfg.na + cfg.nb;
            auto random = [&](std::size_t rows) {
                std::vector<double> v(rows * cfg.dim);
                for (auto& x : v) x = rng.normal();
                return Tensor<double>::from({rows, cfg.dim}, std::move(v));
            };
            std::vector<double> logits(cfg.na * L);
            for (auto& x : logits) x = rng.normal();
            const auto empty_row = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(cfg.na - 1)));
            for (std::size_t p = 0; p < L; ++p) logits[empty_row * L + p] = -std::abs(logits[empty_row * L + p]) - 0.1;
            LayerPrediction<double> prev;
            prev.mask_logits = Tensor<double>::from({cfg.na, L}, logits);
            const auto mask = build_attention_mask(prev, cfg.nb);
            for (std::size_t q = 0; q < N; ++q) {
                if (mask.row_blocked(q)) throw std::logic_error("mask builder produced a fully blocked row");
                bool all = true;
                for (std::size_t p = 0; p < L; ++p) all = all && mask.at(q, p);
                fallback_rows += (q == empty_row && all);
            }
            std::vector<double> weights;
            layer(random(L), random(N), {random(L), random(N)}, mask, &weights);
            for (std::size_t q = 0; q < N; ++q) {
                double row = 0;
                for (std::size_t p = 0; p < L; ++p) {
                    row += weights[q * L + p];
                    if (!mask.at(q, p)) worst_blocked = std::max(worst_blocked, weights[q * L + p]);
                }
                worst_row = std::max(worst_row, std::abs(row - 1.0));
            }
            if (i == 0) {
                AllowMask blocked = mask;
                std::fill_n(blocked.allow.begin(), L, std::uint8_t{0});
                try {
                    attention(random(N), random(L), random(L), &blocked);
                } catch (const std::invalid_argument&) {
                    kernel_rejects = true;
                }
            }
        }
        r.passed = worst_blocked <= 1e-6 && worst_row <= 1e-6 && fallback_rows == count && kernel_rejects;
        r.detail = "max blocked weight " + fmt(worst_blocked) + ", max |row sum - 1| " + fmt(worst_row) + ", fallback rows " +
                   std::to_string(fallback_rows) + "/" + std::to_string(count) + ", kernel rejects blocked rows: " +
                   (kernel_rejects ? "yes" : "no");
    });
}

/// Binary E3 masks equal to a prediction's own thresholded mask logits.
template <typename T>
std::vector<BinaryMask> thresholded_masks(const LayerPrediction<T>& pred, std::size_t h, std::size_t w) {
    std::vector<BinaryMask> out;
    const std::size_t L = pred.mask_logits.dim(1);
    for (std::size_t q = 0; q < pred.mask_logits.dim(0); ++q) {
        BinaryMask m(h, w);
        for (std::size_t p = 0; p < L; ++p) m.bits[p] = pred.mask_logits[q * L + p] > T(0);
        out.push_back(std::move(m));
    }
    return out;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    double d = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) d = std::max(d, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    return d;
}

/// Guided re-forward with the previous layer's own masks reproduces the normal
/// layer output, and the guided loss under sigma equals the final-layer loss.
inline SuiteResult gt_guided_consistency(std::uint64_t seed = 0) {
    return timed("GT-guided consistency", [&](SuiteResult& r) {
        DatasetSpec spec;
        spec.seed = seed;
        ModelConfig cfg;
        cfg.layers = 3;
        cfg.seed = seed;
        FastInstModel<double> model(cfg);
        double worst_forward = 0, worst_loss = 0;
        for (std::int64_t img = 0; img < 3; ++img) {
            const auto scene = generate_scene(spec, img);
            const auto out = model.forward(cast_tensor<double>(scene.image));
            MatchingAssignment identity;
            for (std::size_t q = 0; q < cfg.na; ++q) identity.pairs.emplace_back(q, q);
            for (std::size_t l = 1; l <= cfg.layers; ++l) {
                const auto masks = thresholded_masks(out.decoder.predictions[l - 1], out.e3_h, out.e3_w);
                const auto guided = model.decoder().gt_guided_forward(l, out.decoder.pixel_inputs[l - 1], out.decoder.query_inputs[l - 1],
                                                                      out.positions, identity, masks);
                worst_forward = std::max({worst_forward, max_abs_diff(guided.class_logits, out.decoder.predictions[l].class_logits),
                                          max_abs_diff(guided.mask_logits, out.decoder.predictions[l].mask_logits)});
            }
            const auto targets = prepare_targets<double>(scene.instances, level_stride(cfg.source_level));
            LossConfig lc;
            const auto pl = prediction_loss(out.decoder.predictions, targets, out.queries.locations, lc);
            const double guided = gt_guided_loss<double>({out.final_prediction()}, pl.matchings.back(), targets, lc).item();
            worst_loss = std::max(worst_loss, std::abs(guided - pl.per_layer.back()));
        }
        r.passed = worst_forward <= 1e-6 && worst_loss <= 1e-9;
        r.detail = "max forward diff " + fmt(worst_forward) + ", max loss diff " + fmt(worst_loss);
    });
}

/// Pairwise decomposition of the per-layer prediction loss: with the number of matched
/// pairs fixed, loss(sigma) = constant + sum over pairs of this matrix.
template <typename T>
CostMatrix prediction_loss_pair_terms(const LayerPrediction<T>& pred, const TargetSet<T>& targets, const LossConfig& cfg) {
    const auto& w = cfg.weights;
    const std::size_t Na = pred.class_logits.dim(0), C = pred.class_logits.dim(1), L = pred.mask_logits.dim(1), N = targets.size();
    const std::size_t matched = std::min(Na, N);
    const double weight_sum = static_cast<double>(matched) + w.no_object * static_cast<double>(Na - matched);
    CostMatrix m(Na, N);
    for (std::size_t q = 0; q < Na; ++q) {
        double mx = -1e300;
        for (std::size_t c = 0; c < C; ++c) mx = std::max(mx, static_cast<double>(pred.class_logits[q * C + c]));
        double z = 0;
        for (std::size_t c = 0; c < C; ++c) z += std::exp(static_cast<double>(pred.class_logits[q * C + c]) - mx);
        auto ce = [&](std::size_t c) { return -(static_cast<double>(pred.class_logits[q * C + c]) - mx - std::log(z)); };
        for (std::size_t j = 0; j < N; ++j) {
            double bce = 0, inter = 0, ps = 0, ts = 0;
            for (std::size_t p = 0; p < L; ++p) {
                const double x = static_cast<double>(pred.mask_logits[q * L + p]), t = static_cast<double>(targets.e3_majority[j * L + p]);
                bce += std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x)));
                const double s = 1.0 / (1.0 + std::exp(-x));
                inter += s * t;
                ps += s;
                ts += t;
            }
            const double dice = 1.0 - (2.0 * inter + 1.0) / (ps + ts + 1.0);
            const double cls = (ce(static_cast<std::size_t>(targets.classes[j] - 1)) - w.no_object * ce(C - 1)) / weight_sum;
            m(q, j) = w.cls * cls + (w.ce * bce / static_cast<double>(L) + w.dice * dice) / static_cast<double>(N);
        }
    }
    return m;
}

/// On random instances the loss under a re-matched optimal assignment never
/// exceeds the loss under the fixed assignment, and is strictly lower at least once.
inline SuiteResult fixed_matching_optimality(std::size_t count = 100, std::uint64_t seed = 0) {
    return timed("fixed-matching optimality", [&](SuiteResult& r) {
        std::size_t violations = 0, strict = 0;
        LossConfig lc;
        for (std::size_t i = 0; i < count; ++i) {
            auto rng = Rng::split(seed, "optimality-suite", i);
            const std::size_t Na = static_cast<std::size_t>(rng.uniform_int(2, 6)), K = 3, h = 4, w = 4, L = h * w;
            const std::size_t N = static_cast<std::size_t>(rng.uniform_int(1, 4));
            auto random_pred = [&] {
                LayerPrediction<double> p;
                std::vector<double> cl(Na * (K + 1)), ml(Na * L);
                for (auto& x : cl) x = 2.0 * rng.normal();
                for (auto& x : ml) x = 3.0 * rng.normal();
                p.class_logits = Tensor<double>::from({Na, K + 1}, cl);
                p.mask_logits = Tensor<double>::from({Na, L}, ml);
                return p;
            };
            std::vector<InstanceTarget> inst;
            for (std::size_t j = 0; j < N; ++j) {
                InstanceTarget t;
                t.class_id = static_cast<int>(rng.uniform_int(1, static_cast<std::int64_t>(K)));
                t.mask = BinaryMask(8 * h, 8 * w);
                for (std::size_t y = 0; y < t.mask.height; ++y)
                    for (std::size_t x = 0; x < t.mask.width; ++x) t.mask.set(y, x, rng.uniform() < 0.4);
                inst.push_back(std::move(t));
            }
            const auto targets = prepare_targets<double>(inst, 16);
            const auto final_pred = random_pred();
            const auto guided_pred = random_pred();
            std::vector<std::size_t> locations(Na);
            for (auto& l : locations) l = static_cast<std::size_t>(rng.uniform_int(0, 3));
            const auto sigma = hungarian_match(prediction_cost(final_pred, targets, locations, lc));
            const double fixed = gt_guided_loss<double>({guided_pred}, sigma, targets, lc).item();
            const auto best = hungarian_match(prediction_loss_pair_terms(guided_pred, targets, lc));
            const double rematched = prediction_layer_loss(guided_pred, targets, best, lc).item();
            if (rematched > fixed + 1e-9 * std::max(1.0, std::abs(fixed))) ++violations;
            if (rematched < fixed - 1e-9 * std::max(1.0, std::abs(fixed))) ++strict;
        }
        r.passed = violations == 0 && strict > 0;
        r.detail = std::to_string(count) + " instances, " + std::to_string(violations) + " violations, " + std::to_string(strict) +
                   " strictly better";
    });
}

/// D+1 prediction sets for D in {0,1,3}; heads are private to their layer.
inline SuiteResult deep_supervision(std::uint64_t seed = 0) {
    return timed("deep-supervision structure", [&](SuiteResult& r) {
        DatasetSpec spec;
        spec.seed = seed;
        const auto image = cast_tensor<double>(generate_scene(spec, 0).image);
        std::ostringstream os;
        bool ok = true;
        for (std::size_t D : {0u, 1u, 3u}) {
            ModelConfig cfg;
            cfg.layers = D;
            cfg.seed = seed;
            FastInstModel<double> model(cfg);
            RoutingTape tape;
            const auto base = model.forward(image, &tape);
            ok = ok && base.decoder.predictions.size() == D + 1;
            os << "D=" << D << ": " << base.decoder.predictions.size() << " sets";
            for (std::size_t k = 0; k <= D; ++k) {
                for (bool class_only : {true, false}) {
                    const std::string prefix = "head/layer" + std::to_string(k) + (class_only ? "/cls" : "");
                    std::vector<std::vector<double>> saved;
                    for (auto t : model.params().with_prefix(prefix)) {
                        saved.push_back(t.to_vector());
                        for (auto& v : t.mutable_data()) v += 0.05;
                    }
                    // Mask-branch mutations run with the recorded attention masks.
                    if (!class_only) tape.replay();
                    const auto mutated = model.forward(image, class_only ? nullptr : &tape);
                    for (std::size_t l = 0; l <= D; ++l) {
                        const double d = std::max(max_abs_diff(mutated.decoder.predictions[l].class_logits, base.decoder.predictions[l].class_logits),
                                                  max_abs_diff(mutated.decoder.predictions[l].mask_logits, base.decoder.predictions[l].mask_logits));
                        if ((l == k) != (d > 0)) ok = false;
                    }
                    std::size_t i = 0;
                    for (auto t : model.params().with_prefix(prefix)) {
                        auto data = t.mutable_data();
                        std::copy(saved[i].begin(), saved[i].end(), data.begin());
                        ++i;
                    }
                }
            }
            os << "; ";
        }
        r.passed = ok;
        r.detail = os.str() + (ok ? "only the mutated layer changed" : "structure violated");
    });
}

/// Hand-enumerated three-detection, two-ground-truth precision-recall case, plus perfect predictions.
inline SuiteResult evaluator_correctness() {
    return timed("evaluator correctness", [&](SuiteResult& r) {
        const std::size_t S = 96;
        auto block = [&](std::size_t y0, std::size_t x0, std::size_t hh, std::size_t ww) {
            BinaryMask m(S, S);
            for (std::size_t y = y0; y < y0 + hh; ++y)
                for (std::size_t x = x0; x < x0 + ww; ++x) m.set(y, x);
            return m;
        };
        const std::vector<InstanceTarget> gt{{1, block(0, 0, 10, 10)}, {1, block(40, 40, 10, 10)}};
        // d1 equals the first object, d2 overlaps nothing, d3 covers 78 of the second object's 100 pixels (IoU 0.78).
        BinaryMask d3 = block(40, 40, 7, 10);
        for (std::size_t x = 40; x < 48; ++x) d3.set(47, x);
        std::vector<Detection> dets{{1, 0.9, 0.9, 1.0, 0, gt[0].mask}, {1, 0.8, 0.8, 1.0, 1, block(80, 80, 5, 5)}, {1, 0.7, 0.7, 1.0, 2, d3}};
        const auto res = evaluate({dets}, {gt});
        // Thresholds 0.50..0.75 rank (hit, miss, hit): precision envelope 1 up to recall 0.5, then 2/3.
        // Thresholds 0.80..0.95 rank (hit, miss, miss): precision 1 up to recall 0.5, then nothing.
        const double ap_hit = (51.0 + 50.0 * 2.0 / 3.0) / 101.0, ap_miss = 51.0 / 101.0;
        const double want_ap = (6 * ap_hit + 4 * ap_miss) / 10.0, want_ar = (6 * 1.0 + 4 * 0.5) / 10.0;
        const bool hand = std::abs(res.ap - want_ap) < 1e-12 && std::abs(res.ap50 - ap_hit) < 1e-12 &&
                          std::abs(res.ap75 - ap_hit) < 1e-12 && std::abs(res.ar100 - want_ar) < 1e-12;
        std::vector<Detection> perfect{{1, 0.9, 0.9, 1.0, 0, gt[0].mask}, {1, 0.8, 0.8, 1.0, 1, gt[1].mask}};
        const auto p = evaluate({perfect}, {gt});
        const bool perfect_ok = p.ap == 1.0 && p.ap50 == 1.0 && p.ap75 == 1.0 && p.ar100 == 1.0;
        r.passed = hand && perfect_ok;
        r.detail = "AP " + std::to_string(res.ap) + " (want " + std::to_string(want_ap) + "), AP50 " + std::to_string(res.ap50) +
                   ", AR100 " + std::to_string(res.ar100) + ", perfect AP " + std::to_string(p.ap);
    });
}

}  // namespace fastinst::suites
