#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "fastinst/core/rng.hpp"
#include "fastinst/core/tensor.hpp"

namespace fastinst {

struct GradCheckReport {
    double max_relative_error = 0.0;
    std::size_t worst_coordinate = 0;  // flat index into the concatenated parameter list
    std::size_t coordinates_checked = 0;
    bool passed = true;
    std::string failure;  // set when the objective went non-finite
};

struct GradCheckOptions {
    double eps = 1e-4;
    double tol = 1e-4;
    /// Per-tensor cap on checked coordinates; 0 means every coordinate.
    std::size_t max_coords_per_tensor = 0;
    /// Cap on checked coordinates across all tensors together, sampled uniformly; 0 means no cap.
    std::size_t max_coords_total = 0;
    std::uint64_t seed = 0;
};

/// Compares reverse-mode gradients with central differences
/// (f(x+eps) - f(x-eps)) / 2eps, using |a-b| / max(1,|a|,|b|).
///
/// `objective` must rebuild its graph on every call and be deterministic.
inline GradCheckReport finite_diff_gradcheck(const std::function<Tensor<double>()>& objective,
                                             std::vector<Tensor<double>> params, const GradCheckOptions& opts = {}) {
    GradCheckReport report;
    for (auto& p : params) p.zero_grad();
    {
        auto f = objective();
        if (!std::isfinite(f.item())) {
            report.passed = false;
            report.failure = "objective is non-finite at the base point";
            return report;
        }
        f.backward();
    }

    // Coordinates to check, as (tensor, index) pairs.
    std::vector<std::pair<std::size_t, std::size_t>> chosen;
    for (std::size_t t = 0; t < params.size(); ++t) {
        const std::size_t n = params[t].numel();
        std::vector<std::size_t> coords(n);
        std::iota(coords.begin(), coords.end(), std::size_t{0});
        if (opts.max_coords_per_tensor && n > opts.max_coords_per_tensor) {
            auto rng = Rng::split(opts.seed, "gradcheck", t);
            for (std::size_t i = 0; i < opts.max_coords_per_tensor; ++i) {
                auto j = i + static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n - i - 1)));
                std::swap(coords[i], coords[j]);
            }
            coords.resize(opts.max_coords_per_tensor);
            std::sort(coords.begin(), coords.end());
        }
        for (auto c : coords) chosen.emplace_back(t, c);
    }
    if (opts.max_coords_total && chosen.size() > opts.max_coords_total) {
        auto rng = Rng::split(opts.seed, "gradcheck-total", 0);
        for (std::size_t i = 0; i < opts.max_coords_total; ++i) {
            auto j = i + static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(chosen.size() - i - 1)));
            std::swap(chosen[i], chosen[j]);
        }
        chosen.resize(opts.max_coords_total);
        std::sort(chosen.begin(), chosen.end());
    }

    std::vector<std::vector<double>> analytic;
    std::vector<std::size_t> offsets;
    std::size_t base = 0;
    for (const auto& p : params) {
        analytic.emplace_back(p.grad().begin(), p.grad().end());
        offsets.push_back(base);
        base += p.numel();
    }
    for (auto [t, c] : chosen) {
        auto values = params[t].mutable_data();
        const double saved = values[c];
        values[c] = saved + opts.eps;
        const double plus = objective().item();
        values[c] = saved - opts.eps;
        const double minus = objective().item();
        values[c] = saved;
        ++report.coordinates_checked;
        if (!std::isfinite(plus) || !std::isfinite(minus)) {
            report.passed = false;
            report.worst_coordinate = offsets[t] + c;
            report.max_relative_error = std::numeric_limits<double>::infinity();
            report.failure = "objective is non-finite at coordinate " + std::to_string(offsets[t] + c);
            return report;
        }
        const double numeric = (plus - minus) / (2.0 * opts.eps);
        const double a = analytic[t][c];
        const double rel = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
        if (rel > report.max_relative_error) {
            report.max_relative_error = rel;
            report.worst_coordinate = offsets[t] + c;
        }
    }
    report.passed = report.max_relative_error <= opts.tol;
    return report;
}

}  // namespace fastinst
