#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "fastinst/core/nn.hpp"
#include "fastinst/model/config.hpp"

namespace fastinst {

/// Per-pixel (K+1)-way class distribution over one pyramid level.
/// Column c-1 holds class c (1..K); the last column is "no object".
template <typename T>
struct ActivationMap {
    Tensor<T> logits;  // (P, K+1)
    Tensor<T> probs;   // (P, K+1)
    std::size_t height = 0, width = 0;

    std::size_t pixels() const { return height * width; }
    std::size_t num_classes() const { return probs.dim(1) - 1; }
};

/// Two convolutions (3x3 then 1x1) and a softmax over classes.
template <typename T>
class AuxClassHead {
   public:
    AuxClassHead() = default;
    AuxClassHead(ParamStore<T>& store, std::size_t dim, int num_classes)
        : conv1_(store, "query/aux_head/conv1", dim, dim, 3), conv2_(store, "query/aux_head/conv2", dim, num_classes + 1, 1) {}

    ActivationMap<T> operator()(const Tensor<T>& feature) const {
        ActivationMap<T> act;
        act.height = feature.dim(1);
        act.width = feature.dim(2);
        act.logits = to_tokens(conv2_(gelu(conv1_(feature))));
        act.probs = softmax_lastdim(act.logits);
        return act;
    }

    const Conv<T>& conv1() const { return conv1_; }
    const Conv<T>& conv2() const { return conv2_; }

   private:
    Conv<T> conv1_, conv2_;
};

/// Per-pixel best real class k_i and its probability p_{i,k_i}. Ties go to the lower class.
template <typename T>
void foreground_scores(std::span<const T> probs, std::size_t classes_with_void, std::vector<std::size_t>& best_class,
                       std::vector<T>& score) {
    const std::size_t C = classes_with_void, P = probs.size() / C;
    best_class.assign(P, 0);
    score.assign(P, T(0));
    for (std::size_t i = 0; i < P; ++i) {
        std::size_t best = 0;
        for (std::size_t k = 1; k + 1 < C; ++k)
            if (probs[i * C + k] > probs[i * C + best]) best = k;
        best_class[i] = best;
        score[i] = probs[i * C + best];
    }
}

/// Local-maximum-first selection of `count` pixels from a (h*w, K+1) probability map.
///
/// A pixel is a candidate when its foreground score is >= the same-class
/// probability of every in-bounds 8-neighbor. Candidates are taken first by
/// descending score, then the remaining pixels fill any shortfall in the same
/// order. Equal scores are ordered by ascending flat index. With
/// `local_max_first` false every pixel is a candidate (plain top-k).
template <typename T>
std::vector<std::size_t> select_ia_queries(std::span<const T> probs, std::size_t height, std::size_t width,
                                           std::size_t classes_with_void, std::size_t count, bool local_max_first = true) {
    const std::size_t P = height * width, C = classes_with_void;
    if (probs.size() != P * C) throw std::invalid_argument("select_ia_queries: probability map size mismatch");
    std::vector<std::size_t> best;
    std::vector<T> score;
    foreground_scores(probs, C, best, score);

    std::vector<std::uint8_t> candidate(P, 1);
    if (local_max_first) {
        for (std::size_t y = 0; y < height; ++y)
            for (std::size_t x = 0; x < width; ++x) {
                const std::size_t i = y * width + x;
                for (int dy = -1; dy <= 1 && candidate[i]; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        if (!dy && !dx) continue;
                        const auto ny = static_cast<std::ptrdiff_t>(y) + dy, nx = static_cast<std::ptrdiff_t>(x) + dx;
                        if (ny < 0 || nx < 0 || ny >= static_cast<std::ptrdiff_t>(height) || nx >= static_cast<std::ptrdiff_t>(width))
                            continue;
                        const std::size_t n = static_cast<std::size_t>(ny) * width + static_cast<std::size_t>(nx);
                        if (probs[n * C + best[i]] > score[i]) {
                            candidate[i] = 0;
                            break;
                        }
                    }
            }
    }

    std::vector<std::size_t> order(P);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (candidate[a] != candidate[b]) return candidate[a] > candidate[b];
        return score[a] > score[b];
    });
    order.resize(std::min(count, P));
    return order;
}

/// Concatenated IA-guided and auxiliary queries.
template <typename T>
struct QuerySet {
    Tensor<T> embeddings;                // (Na+Nb, dim)
    Tensor<T> pos;                       // (Na+Nb, dim)
    std::vector<std::size_t> locations;  // flat indices on the source grid, one per IA-guided query
    std::size_t grid_h = 0, grid_w = 0;
    std::size_t na = 0, nb = 0;

    std::size_t size() const { return na + nb; }
};

/// Non-parametric 2-D sine embedding at normalized cell centers; first half
/// encodes y, second half x.
template <typename T>
std::vector<T> sine_embedding(double y_norm, double x_norm, std::size_t dim) {
    const std::size_t half = dim / 2;
    std::vector<T> out(dim);
    auto fill = [&](double coord, std::size_t offset) {
        const double pos = coord * 2.0 * std::numbers::pi;
        for (std::size_t j = 0; j < half / 2; ++j) {
            const double freq = std::pow(10000.0, 2.0 * static_cast<double>(j) / static_cast<double>(half));
            out[offset + 2 * j] = static_cast<T>(std::sin(pos / freq));
            out[offset + 2 * j + 1] = static_cast<T>(std::cos(pos / freq));
        }
    };
    fill(y_norm, 0);
    fill(x_norm, half);
    return out;
}

template <typename T>
class PositionalEmbedding {
   public:
    PositionalEmbedding() = default;
    PositionalEmbedding(ParamStore<T>& store, const ModelConfig& cfg) : kind_(cfg.pos), dim_(cfg.dim) {
        const std::size_t S = cfg.pos_table_side();
        if (kind_ == PosKind::Learnable) table_ = store.add("query/pos/table", {cfg.dim, S, S}, Init::Normal, 0.5);
        if (cfg.nb) aux_ = store.add("query/pos/aux", {cfg.nb, cfg.dim}, Init::Normal, 0.5);
    }

    /// Flattened (h*w, dim) embedding for a pixel grid.
    Tensor<T> grid(std::size_t h, std::size_t w) const {
        if (kind_ == PosKind::Learnable) return to_tokens(bilinear_resize(table_, h, w));
        std::vector<T> values;
        values.reserve(h * w * dim_);
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                auto e = sine_embedding<T>((static_cast<double>(y) + 0.5) / static_cast<double>(h),
                                           (static_cast<double>(x) + 0.5) / static_cast<double>(w), dim_);
                values.insert(values.end(), e.begin(), e.end());
            }
        return Tensor<T>::from({h * w, dim_}, std::move(values));
    }

    /// Embeddings for IA-guided queries at `locations` on an (h,w) grid, followed by auxiliary rows.
    Tensor<T> queries(std::size_t h, std::size_t w, const std::vector<std::size_t>& locations) const {
        for (auto loc : locations)
            if (loc >= h * w) throw std::invalid_argument("query location outside the source grid");
        auto ia = gather_rows(grid(h, w), locations);
        return aux_.defined() ? concat0<T>({ia, aux_}) : ia;
    }

    const Tensor<T>& table() const { return table_; }
    const Tensor<T>& aux() const { return aux_; }
    PosKind kind() const { return kind_; }

   private:
    PosKind kind_ = PosKind::Learnable;
    std::size_t dim_ = 0;
    Tensor<T> table_;  // (dim, S, S)
    Tensor<T> aux_;    // (Nb, dim)
};

}  // namespace fastinst
