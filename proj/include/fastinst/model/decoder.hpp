#pragma once

#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "fastinst/core/nn.hpp"
#include "fastinst/data/mask.hpp"
#include "fastinst/model/config.hpp"

namespace fastinst {

/// Class and mask logits of the IA-guided queries at one decoder layer.
template <typename T>
struct LayerPrediction {
    Tensor<T> class_logits;  // (Na, K+1)
    Tensor<T> mask_logits;   // (Na, L) over the flattened E3 grid
    std::size_t layer_index = 0;
};

/// Query -> target pairs; query indices refer to IA-guided queries.
struct MatchingAssignment {
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    double total_cost = 0.0;

    bool operator==(const MatchingAssignment&) const = default;
};

/// Masked-attention permissions for the next layer: IA rows allow pixels whose
/// predicted mask probability exceeds 0.5 (logit > 0), auxiliary rows allow
/// everything, and any IA row left empty falls back to allowing everything.
template <typename T>
AllowMask build_attention_mask(const LayerPrediction<T>& prev, std::size_t aux_count) {
    const std::size_t na = prev.mask_logits.dim(0), L = prev.mask_logits.dim(1);
    AllowMask mask{na + aux_count, L, std::vector<std::uint8_t>((na + aux_count) * L, 1)};
    for (std::size_t q = 0; q < na; ++q) {
        bool any = false;
        for (std::size_t p = 0; p < L; ++p) {
            // sigmoid(x) > 0.5 <=> x > 0
            const bool on = prev.mask_logits[q * L + p] > T(0);
            mask.allow[q * L + p] = on;
            any = any || on;
        }
        if (!any) std::fill_n(mask.allow.begin() + static_cast<std::ptrdiff_t>(q * L), L, std::uint8_t{1});
    }
    return mask;
}

/// Attention mask for the guided re-forward: matched IA queries see exactly
/// their target's E3 mask, everything else attends freely.
inline AllowMask build_guided_mask(const MatchingAssignment& sigma, const std::vector<BinaryMask>& targets_e3,
                                   std::size_t na, std::size_t nb) {
    if (targets_e3.empty() && !sigma.pairs.empty()) throw std::invalid_argument("guided mask: matching without targets");
    const std::size_t L = targets_e3.empty() ? 0 : targets_e3[0].bits.size();
    AllowMask mask{na + nb, L, {}};
    if (L == 0) return mask;
    mask.allow.assign((na + nb) * L, 1);
    for (auto [q, t] : sigma.pairs) {
        if (q >= na) throw std::invalid_argument("guided mask: query index " + std::to_string(q) + " is not an IA-guided query");
        if (t >= targets_e3.size()) throw std::invalid_argument("guided mask: target index out of range");
        const auto& m = targets_e3[t];
        if (m.empty()) continue;
        std::copy(m.bits.begin(), m.bits.end(), mask.allow.begin() + static_cast<std::ptrdiff_t>(q * L));
    }
    return mask;
}

/// Per-layer prediction head: class MLP and mask-embedding MLP on the
/// IA-guided queries, linear projection on pixel features.
template <typename T>
class PredictionHead {
   public:
    PredictionHead() = default;
    PredictionHead(ParamStore<T>& store, std::size_t layer, std::size_t dim, int num_classes) : layer_(layer) {
        const std::string name = "head/layer" + std::to_string(layer);
        norm_ = LayerNorm<T>(store, name + "/norm", dim);
        cls_ = Mlp3<T>(store, name + "/cls", dim, dim, num_classes + 1);
        mask_ = Mlp3<T>(store, name + "/mask", dim, dim, dim);
        pixel_proj_ = Linear<T>(store, name + "/pixel_proj", dim, dim);
    }

    LayerPrediction<T> operator()(const Tensor<T>& queries, const Tensor<T>& pixels, std::size_t na) const {
        std::vector<std::size_t> ia(na);
        std::iota(ia.begin(), ia.end(), std::size_t{0});
        auto q = norm_(na == queries.dim(0) ? queries : gather_rows(queries, ia));
        LayerPrediction<T> out;
        out.layer_index = layer_;
        out.class_logits = cls_(q);
        out.mask_logits = matmul_nt(mask_(q), pixel_proj_(pixels));
        return out;
    }

   private:
    std::size_t layer_ = 0;
    LayerNorm<T> norm_;
    Mlp3<T> cls_, mask_;
    Linear<T> pixel_proj_;
};

template <typename T>
struct FeedForward {
    Linear<T> fc1, fc2;

    FeedForward() = default;
    FeedForward(ParamStore<T>& store, const std::string& name, std::size_t dim, std::size_t hidden)
        : fc1(store, name + "/fc1", dim, hidden), fc2(store, name + "/fc2", hidden, dim) {}

    Tensor<T> operator()(const Tensor<T>& x) const { return fc2(gelu(fc1(x))); }
};

/// Positional embeddings shared by every decoder layer.
template <typename T>
struct DecoderPositions {
    Tensor<T> pixel;  // (L, dim)
    Tensor<T> query;  // (N, dim)
};

/// One dual-path layer: a pixel update (cross-attention to the queries, FFN)
/// and a query update (masked cross-attention to the pixels, self-attention,
/// FFN). Every sublayer is pre-norm with a residual connection; positions are
/// added to attention queries and keys only.
template <typename T>
class DecoderLayer {
   public:
    DecoderLayer() = default;
    DecoderLayer(ParamStore<T>& store, std::size_t layer, const ModelConfig& cfg) : order_(cfg.order) {
        const std::string name = "decoder/layer" + std::to_string(layer);
        const std::size_t dim = cfg.dim;
        pix_norm_attn_ = LayerNorm<T>(store, name + "/pixel/norm_attn", dim);
        pix_cross_ = MultiHeadAttention<T>(store, name + "/pixel/cross", dim, cfg.heads);
        pix_norm_ffn_ = LayerNorm<T>(store, name + "/pixel/norm_ffn", dim);
        pix_ffn_ = FeedForward<T>(store, name + "/pixel/ffn", dim, cfg.ffn_width());
        q_norm_cross_ = LayerNorm<T>(store, name + "/query/norm_cross", dim);
        q_cross_ = MultiHeadAttention<T>(store, name + "/query/cross", dim, cfg.heads);
        q_norm_self_ = LayerNorm<T>(store, name + "/query/norm_self", dim);
        q_self_ = MultiHeadAttention<T>(store, name + "/query/self", dim, cfg.heads);
        q_norm_ffn_ = LayerNorm<T>(store, name + "/query/norm_ffn", dim);
        q_ffn_ = FeedForward<T>(store, name + "/query/ffn", dim, cfg.ffn_width());
    }

    Tensor<T> pixel_update(const Tensor<T>& X, const Tensor<T>& Q, const DecoderPositions<T>& pos) const {
        auto h = pix_norm_attn_(X);
        auto x = add(X, pix_cross_(add(h, pos.pixel), add(Q, pos.query), Q, nullptr));
        return add(x, pix_ffn_(pix_norm_ffn_(x)));
    }

    Tensor<T> query_update(const Tensor<T>& Q, const Tensor<T>& X, const DecoderPositions<T>& pos, const AllowMask& mask,
                           std::vector<T>* cross_weights) const {
        auto h = q_norm_cross_(Q);
        auto q = add(Q, q_cross_(add(h, pos.query), add(X, pos.pixel), X, &mask, cross_weights));
        auto n = q_norm_self_(q);
        auto s = add(n, pos.query);
        q = add(q, q_self_(s, s, n, nullptr));
        return add(q, q_ffn_(q_norm_ffn_(q)));
    }

    /// Returns (X', Q').
    std::pair<Tensor<T>, Tensor<T>> operator()(const Tensor<T>& X, const Tensor<T>& Q, const DecoderPositions<T>& pos,
                                               const AllowMask& mask, std::vector<T>* cross_weights = nullptr) const {
        if (mask.rows != Q.dim(0) || mask.cols != X.dim(0))
            throw std::invalid_argument("decoder layer: attention mask shape does not match queries x pixels");
        if (order_ == DecoderOrder::PixelThenQuery) {
            auto x = pixel_update(X, Q, pos);
            auto q = query_update(Q, x, pos, mask, cross_weights);
            return {x, q};
        }
        auto q = query_update(Q, X, pos, mask, cross_weights);
        auto x = pixel_update(X, q, pos);
        return {x, q};
    }

   private:
    DecoderOrder order_ = DecoderOrder::PixelThenQuery;
    LayerNorm<T> pix_norm_attn_, pix_norm_ffn_, q_norm_cross_, q_norm_self_, q_norm_ffn_;
    MultiHeadAttention<T> pix_cross_, q_cross_, q_self_;
    FeedForward<T> pix_ffn_, q_ffn_;
};

/// Everything the decoder produced for one image.
template <typename T>
struct DecoderTrace {
    std::vector<LayerPrediction<T>> predictions;  // D+1 entries, layer 0 first
    std::vector<Tensor<T>> pixel_inputs;           // X fed to layer l (index l-1)
    std::vector<Tensor<T>> query_inputs;           // Q fed to layer l (index l-1)
    std::vector<AllowMask> masks;                  // attention mask used by layer l (index l-1)
    std::vector<T> last_cross_weights;             // (N, L) head-averaged, last layer; empty when D = 0
};

template <typename T>
class DualPathDecoder {
   public:
    DualPathDecoder() = default;
    DualPathDecoder(ParamStore<T>& store, const ModelConfig& cfg) : na_(cfg.na), nb_(cfg.nb) {
        for (std::size_t l = 0; l <= cfg.layers; ++l) heads_.emplace_back(store, l, cfg.dim, cfg.num_classes);
        for (std::size_t l = 1; l <= cfg.layers; ++l) layers_.emplace_back(store, l, cfg);
    }

    std::size_t depth() const { return layers_.size(); }

    /// X0: flattened E3 (L, dim); Q0: (Na+Nb, dim).
    DecoderTrace<T> operator()(const Tensor<T>& X0, const Tensor<T>& Q0, const DecoderPositions<T>& pos,
                               RoutingTape* tape = nullptr) const {
        DecoderTrace<T> trace;
        auto X = X0;
        auto Q = Q0;
        trace.predictions.push_back(heads_[0](Q, X, na_));
        for (std::size_t l = 1; l <= layers_.size(); ++l) {
            const auto& prev = trace.predictions.back();
            const std::size_t L = prev.mask_logits.dim(1);
            auto bits = routed(tape, [&] {
                auto m = build_attention_mask(prev, nb_);
                return std::vector<std::size_t>(m.allow.begin(), m.allow.end());
            });
            AllowMask mask{na_ + nb_, L, std::vector<std::uint8_t>(bits.begin(), bits.end())};
            trace.pixel_inputs.push_back(X);
            trace.query_inputs.push_back(Q);
            const bool last = (l == layers_.size());
            std::tie(X, Q) = layers_[l - 1](X, Q, pos, mask, last ? &trace.last_cross_weights : nullptr);
            trace.masks.push_back(std::move(mask));
            trace.predictions.push_back(heads_[l](Q, X, na_));
        }
        return trace;
    }

    /// Re-runs layer `l` (1..D) on that layer's inputs with the attention mask
    /// replaced by the matched ground-truth masks, then applies layer l's head.
    LayerPrediction<T> gt_guided_forward(std::size_t l, const Tensor<T>& X_in, const Tensor<T>& Q_in,
                                         const DecoderPositions<T>& pos, const MatchingAssignment& sigma,
                                         const std::vector<BinaryMask>& targets_e3) const {
        if (l == 0 || l > layers_.size()) throw std::invalid_argument("gt_guided_forward: layer out of range");
        auto mask = targets_e3.empty() ? AllowMask::all(na_ + nb_, X_in.dim(0)) : build_guided_mask(sigma, targets_e3, na_, nb_);
        auto [X, Q] = layers_[l - 1](X_in, Q_in, pos, mask);
        return heads_[l](Q, X, na_);
    }

    const DecoderLayer<T>& layer(std::size_t l) const { return layers_.at(l - 1); }
    const PredictionHead<T>& head(std::size_t l) const { return heads_.at(l); }
    std::size_t na() const { return na_; }
    std::size_t nb() const { return nb_; }

   private:
    std::size_t na_ = 0, nb_ = 0;
    std::vector<PredictionHead<T>> heads_;
    std::vector<DecoderLayer<T>> layers_;
};

}  // namespace fastinst
