#pragma once

#include <array>
#include <string>
#include <vector>

#include "fastinst/core/nn.hpp"
#include "fastinst/model/config.hpp"

namespace fastinst {

/// Three maps at strides 8/16/32.
template <typename T>
struct FeaturePyramid {
    std::array<Tensor<T>, 3> levels;

    const Tensor<T>& at(SourceLevel level) const { return levels[static_cast<std::size_t>(level)]; }
};

/// Backbone widths: stem, C3, C4, C5.
inline constexpr std::array<std::size_t, 4> kBackboneWidths = {24, 32, 48, 64};

/// Small plain convnet: a stride-4 stem followed by three stride-2 stages.
/// Normalization is a per-pixel layer norm across channels, which carries no
/// batch statistics.
template <typename T>
class Backbone {
   public:
    Backbone() = default;
    explicit Backbone(ParamStore<T>& store) {
        const auto& w = kBackboneWidths;
        stem1_ = Conv<T>(store, "backbone/stem1", 3, 16, 3, 2);
        stem2_ = Conv<T>(store, "backbone/stem2", 16, w[0], 3, 2);
        for (std::size_t s = 0; s < 3; ++s) {
            const std::string name = "backbone/stage" + std::to_string(s + 3);
            down_[s] = Conv<T>(store, name + "/down", w[s], w[s + 1], 3, 2);
            norm_[s] = LayerNorm<T>(store, name + "/norm", w[s + 1]);
            conv_[s] = Conv<T>(store, name + "/conv", w[s + 1], w[s + 1], 3, 1);
        }
    }

    FeaturePyramid<T> operator()(const Tensor<T>& image) const {
        if (image.rank() != 3 || image.dim(0) != 3)
            throw std::invalid_argument("backbone: expected a (3,H,W) image, got " + shape_str(image.shape()));
        if (image.dim(1) % 32 || image.dim(2) % 32)
            throw std::invalid_argument("backbone: image extents must be divisible by 32, got " + shape_str(image.shape()));
        auto x = gelu(stem2_(gelu(stem1_(image))));
        FeaturePyramid<T> out;
        for (std::size_t s = 0; s < 3; ++s) {
            x = gelu(channel_layer_norm(down_[s](x), norm_[s].gamma, norm_[s].beta));
            x = gelu(conv_[s](x));
            out.levels[s] = x;
        }
        return out;
    }

   private:
    Conv<T> stem1_, stem2_;
    std::array<Conv<T>, 3> down_, conv_;
    std::array<LayerNorm<T>, 3> norm_;
};

inline constexpr std::array<std::size_t, 4> kPpmBins = {1, 2, 3, 6};

/// Pyramid pooling on the projected top level: average-pool at each bin size,
/// 1x1 reduce, upsample back, concatenate with the input, 1x1 fuse.
template <typename T>
class PyramidPooling {
   public:
    PyramidPooling() = default;
    PyramidPooling(ParamStore<T>& store, const std::string& name, std::size_t dim) {
        const std::size_t reduced = std::max<std::size_t>(1, dim / kPpmBins.size());
        for (std::size_t b = 0; b < kPpmBins.size(); ++b)
            reduce_.emplace_back(store, name + "/bin" + std::to_string(kPpmBins[b]), dim, reduced, 1);
        fuse_ = Conv<T>(store, name + "/fuse", dim + reduced * kPpmBins.size(), dim, 1);
    }

    /// Upsampled per-bin branches (before the reduce conv), exposed for inspection.
    std::vector<Tensor<T>> pooled_branches(const Tensor<T>& x) const {
        std::vector<Tensor<T>> out;
        for (auto bin : kPpmBins) out.push_back(bilinear_resize(adaptive_avg_pool(x, bin, bin), x.dim(1), x.dim(2)));
        return out;
    }

    Tensor<T> operator()(const Tensor<T>& x) const {
        std::vector<Tensor<T>> parts{x};
        for (std::size_t b = 0; b < kPpmBins.size(); ++b) {
            auto pooled = adaptive_avg_pool(x, kPpmBins[b], kPpmBins[b]);
            parts.push_back(bilinear_resize(gelu(reduce_[b](pooled)), x.dim(1), x.dim(2)));
        }
        return gelu(fuse_(concat0(parts)));
    }

   private:
    std::vector<Conv<T>> reduce_;
    Conv<T> fuse_;
};

/// Lightweight pixel decoder: 1x1 laterals, optional pyramid pooling on the
/// top level, top-down bilinear upsample-and-add, 3x3 smoothing per level.
template <typename T>
class PixelDecoder {
   public:
    PixelDecoder() = default;
    PixelDecoder(ParamStore<T>& store, std::size_t dim, bool use_ppm) : use_ppm_(use_ppm) {
        for (std::size_t i = 0; i < 3; ++i) {
            const std::string level = std::to_string(i + 3);
            lateral_[i] = Conv<T>(store, "pixel/lateral" + level, kBackboneWidths[i + 1], dim, 1);
            smooth_[i] = Conv<T>(store, "pixel/smooth" + level, dim, dim, 3);
        }
        if (use_ppm_) ppm_ = PyramidPooling<T>(store, "pixel/ppm", dim);
    }

    FeaturePyramid<T> operator()(const FeaturePyramid<T>& c) const {
        auto top = lateral_[2](c.levels[2]);
        if (use_ppm_) top = ppm_(top);
        FeaturePyramid<T> e;
        e.levels[2] = smooth_[2](top);
        for (int i = 1; i >= 0; --i) {
            auto lat = lateral_[i](c.levels[i]);
            top = add(lat, bilinear_resize(top, lat.dim(1), lat.dim(2)));
            e.levels[i] = smooth_[i](top);
        }
        return e;
    }

    const PyramidPooling<T>& ppm() const { return ppm_; }
    bool use_ppm() const { return use_ppm_; }
    const Conv<T>& lateral(std::size_t i) const { return lateral_[i]; }
    const Conv<T>& smooth(std::size_t i) const { return smooth_[i]; }

   private:
    bool use_ppm_ = true;
    std::array<Conv<T>, 3> lateral_, smooth_;
    PyramidPooling<T> ppm_;
};

}  // namespace fastinst
