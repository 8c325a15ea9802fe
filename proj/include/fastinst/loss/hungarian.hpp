#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "fastinst/model/decoder.hpp"

namespace fastinst {

/// Row-major (rows, cols) cost matrix.
struct CostMatrix {
    std::size_t rows = 0, cols = 0;
    std::vector<double> values;

    CostMatrix() = default;
    CostMatrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), values(r * c, fill) {}

    double& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
};

namespace detail {

/// Kuhn-Munkres with potentials for rows <= cols; fills row_to_col, returns the optimum.
inline double hungarian_rows_le_cols(const CostMatrix& cost, std::vector<std::size_t>& row_to_col) {
    const std::size_t n = cost.rows, m = cost.cols;
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
    std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(m + 1, inf);
        std::vector<char> used(m + 1, 0);
        do {
            used[j0] = 1;
            const std::size_t i0 = p[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= m; ++j) {
                if (used[j]) continue;
                const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= m; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0);
    }
    row_to_col.assign(n, 0);
    double total = 0.0;
    for (std::size_t j = 1; j <= m; ++j)
        if (p[j]) row_to_col[p[j] - 1] = j - 1;
    for (std::size_t i = 0; i < n; ++i) total += cost(i, row_to_col[i]);
    return total;
}

/// Minimum total cost of a matching of size min(|rows|, |cols|) within the given subsets.
inline double optimal_cost(const CostMatrix& cost, const std::vector<std::size_t>& rows, const std::vector<std::size_t>& cols) {
    if (rows.empty() || cols.empty()) return 0.0;
    const bool transpose = rows.size() > cols.size();
    const auto& r = transpose ? cols : rows;
    const auto& c = transpose ? rows : cols;
    CostMatrix sub(r.size(), c.size());
    for (std::size_t i = 0; i < r.size(); ++i)
        for (std::size_t j = 0; j < c.size(); ++j) sub(i, j) = transpose ? cost(c[j], r[i]) : cost(r[i], c[j]);
    std::vector<std::size_t> assignment;
    return hungarian_rows_le_cols(sub, assignment);
}

inline bool same_cost(double a, double b, double scale) { return std::abs(a - b) <= 1e-9 * std::max(1.0, scale); }

}  // namespace detail

/// Minimum-cost injective assignment of min(rows, cols) pairs.
///
/// Among optimal assignments the pair list (sorted by row) that is
/// lexicographically smallest is returned: rows are decided in ascending
/// order, each taking the smallest column that still admits an optimal
/// completion. Costs within 1e-9 relative are treated as equal.
inline MatchingAssignment hungarian_match(const CostMatrix& cost) {
    for (double v : cost.values)
        if (!std::isfinite(v)) throw std::invalid_argument("hungarian_match: cost matrix has a non-finite entry");
    MatchingAssignment result;
    if (cost.rows == 0 || cost.cols == 0) return result;

    std::vector<std::size_t> all_rows(cost.rows), all_cols(cost.cols);
    for (std::size_t i = 0; i < cost.rows; ++i) all_rows[i] = i;
    for (std::size_t j = 0; j < cost.cols; ++j) all_cols[j] = j;
    const double optimum = detail::optimal_cost(cost, all_rows, all_cols);
    const std::size_t target_pairs = std::min(cost.rows, cost.cols);

    std::vector<std::size_t> free_cols = all_cols;
    double fixed = 0.0;
    for (std::size_t i = 0; i < cost.rows && result.pairs.size() < target_pairs; ++i) {
        const std::vector<std::size_t> later_rows(all_rows.begin() + static_cast<std::ptrdiff_t>(i + 1), all_rows.end());
        const std::size_t still_needed = target_pairs - result.pairs.size();
        bool placed = false;
        for (std::size_t k = 0; k < free_cols.size(); ++k) {
            if (std::min(later_rows.size(), free_cols.size() - 1) < still_needed - 1) break;
            std::vector<std::size_t> rest = free_cols;
            rest.erase(rest.begin() + static_cast<std::ptrdiff_t>(k));
            const double completion = fixed + cost(i, free_cols[k]) + detail::optimal_cost(cost, later_rows, rest);
            if (detail::same_cost(completion, optimum, std::abs(optimum))) {
                fixed += cost(i, free_cols[k]);
                result.pairs.emplace_back(i, free_cols[k]);
                free_cols = std::move(rest);
                placed = true;
                break;
            }
        }
        // Otherwise row i stays unmatched; only possible when rows outnumber columns.
        (void)placed;
    }
    if (result.pairs.size() != target_pairs) throw std::logic_error("hungarian_match: failed to complete an optimal matching");
    result.total_cost = 0.0;
    for (auto [r, c] : result.pairs) result.total_cost += cost(r, c);
    return result;
}

}  // namespace fastinst
