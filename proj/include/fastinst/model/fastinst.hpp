#pragma once

#include <string>
#include <vector>

#include "fastinst/core/nn.hpp"
#include "fastinst/model/config.hpp"
#include "fastinst/model/decoder.hpp"
#include "fastinst/model/pixel.hpp"
#include "fastinst/model/query.hpp"

namespace fastinst {

template <typename T, typename U>
Tensor<T> cast_tensor(const Tensor<U>& x) {
    if constexpr (std::is_same_v<T, U>) {
        return x;
    } else {
        std::vector<T> values(x.data().begin(), x.data().end());
        return Tensor<T>::from(x.shape(), std::move(values));
    }
}

template <typename T>
struct ForwardOutput {
    FeaturePyramid<T> features;  // E3, E4, E5
    ActivationMap<T> activation;
    QuerySet<T> queries;
    DecoderPositions<T> positions;
    DecoderTrace<T> decoder;
    std::size_t image_h = 0, image_w = 0;
    std::size_t e3_h = 0, e3_w = 0;

    const LayerPrediction<T>& final_prediction() const { return decoder.predictions.back(); }
};

/// The full network: backbone, pixel decoder, auxiliary class head with
/// IA-guided query selection, positional embeddings, and the dual-path decoder.
template <typename T>
class FastInstModel {
   public:
    explicit FastInstModel(const ModelConfig& cfg) : cfg_((cfg.validate(), cfg)), store_(cfg.seed) {
        backbone_ = Backbone<T>(store_);
        pixel_ = PixelDecoder<T>(store_, cfg.dim, cfg.use_ppm);
        aux_head_ = AuxClassHead<T>(store_, cfg.dim, cfg.num_classes);
        pos_ = PositionalEmbedding<T>(store_, cfg);
        if (cfg.nb) aux_queries_ = store_.add("query/aux_embed", {cfg.nb, cfg.dim}, Init::Normal, 0.5);
        decoder_ = DualPathDecoder<T>(store_, cfg);
    }

    FastInstModel(const FastInstModel&) = delete;
    FastInstModel& operator=(const FastInstModel&) = delete;

    ForwardOutput<T> forward(const Tensor<T>& image, RoutingTape* tape = nullptr) const {
        ForwardOutput<T> out;
        out.image_h = image.dim(1);
        out.image_w = image.dim(2);
        out.features = pixel_(backbone_(image));
        const auto& e3 = out.features.levels[0];
        const auto& source = out.features.at(cfg_.source_level);
        out.e3_h = e3.dim(1);
        out.e3_w = e3.dim(2);

        out.activation = aux_head_(source);
        const std::size_t P = out.activation.pixels();
        if (cfg_.na > P)
            throw std::invalid_argument("query.na = " + std::to_string(cfg_.na) + " exceeds the " + std::to_string(P) +
                                        " pixels of the query source level");
        auto selected = routed(tape, [&] {
            return select_ia_queries<T>(out.activation.probs.data(), out.activation.height, out.activation.width,
                                        out.activation.probs.dim(1), cfg_.na, cfg_.local_max_first);
        });

        auto& qs = out.queries;
        qs.na = cfg_.na;
        qs.nb = cfg_.nb;
        qs.grid_h = out.activation.height;
        qs.grid_w = out.activation.width;
        qs.locations = selected;
        auto ia = gather_rows(to_tokens(source), selected);
        qs.embeddings = aux_queries_.defined() ? concat0<T>({ia, aux_queries_}) : ia;
        qs.pos = pos_.queries(qs.grid_h, qs.grid_w, selected);
        out.positions = {pos_.grid(out.e3_h, out.e3_w), qs.pos};

        out.decoder = decoder_(to_tokens(e3), qs.embeddings, out.positions, tape);
        return out;
    }

    const ModelConfig& config() const { return cfg_; }
    ParamStore<T>& params() { return store_; }
    const ParamStore<T>& params() const { return store_; }
    const Backbone<T>& backbone() const { return backbone_; }
    const PixelDecoder<T>& pixel_decoder() const { return pixel_; }
    const AuxClassHead<T>& aux_head() const { return aux_head_; }
    const PositionalEmbedding<T>& positional() const { return pos_; }
    const DualPathDecoder<T>& decoder() const { return decoder_; }

   private:
    ModelConfig cfg_;
    ParamStore<T> store_;
    Backbone<T> backbone_;
    PixelDecoder<T> pixel_;
    AuxClassHead<T> aux_head_;
    PositionalEmbedding<T> pos_;
    Tensor<T> aux_queries_;
    DualPathDecoder<T> decoder_;
};

}  // namespace fastinst
