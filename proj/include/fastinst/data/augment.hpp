#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>

#include "fastinst/core/ops.hpp"
#include "fastinst/core/rng.hpp"
#include "fastinst/data/scene.hpp"

namespace fastinst {

/// Scale jitter on the shorter edge, cap on the longer edge, then a random
/// crop (zero padded when needed) to a fixed training size.
struct AugmentConfig {
    std::size_t short_min = 64;
    std::size_t short_max = 128;
    std::size_t long_max = 172;
    std::size_t crop_h = 96;
    std::size_t crop_w = 96;

    /// Full-resolution profile: shorter edge 416..640, longer edge at most 864.
    static AugmentConfig full_scale() { return {416, 640, 864, 640, 640}; }

    /// Leaves samples of size (h,w) untouched.
    static AugmentConfig identity(std::size_t h, std::size_t w) { return {std::min(h, w), std::min(h, w), std::max(h, w), h, w}; }
};

namespace detail {

/// Nearest-neighbor source index with half-pixel centers.
inline std::size_t nearest_src(std::size_t dst, std::size_t in, std::size_t out) {
    auto s = static_cast<std::size_t>((static_cast<double>(dst) + 0.5) * static_cast<double>(in) / static_cast<double>(out));
    return std::min(s, in - 1);
}

inline BinaryMask resize_nearest(const BinaryMask& m, std::size_t h, std::size_t w) {
    if (m.height == h && m.width == w) return m;
    BinaryMask out(h, w);
    for (std::size_t y = 0; y < h; ++y) {
        const std::size_t sy = nearest_src(y, m.height, h);
        for (std::size_t x = 0; x < w; ++x) out.set(y, x, m.at(sy, nearest_src(x, m.width, w)));
    }
    return out;
}

}  // namespace detail

inline SceneSample augment(const SceneSample& sample, Rng& rng, const AugmentConfig& cfg) {
    const std::size_t H = sample.height(), W = sample.width();
    const std::size_t short_edge = std::min(H, W), long_edge = std::max(H, W);
    const auto target_short =
        static_cast<double>(rng.uniform_int(static_cast<std::int64_t>(cfg.short_min), static_cast<std::int64_t>(cfg.short_max)));
    double factor = target_short / static_cast<double>(short_edge);
    if (static_cast<double>(long_edge) * factor > static_cast<double>(cfg.long_max))
        factor = static_cast<double>(cfg.long_max) / static_cast<double>(long_edge);
    const auto rh = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(H) * factor)));
    const auto rw = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(W) * factor)));

    Tensor<float> resized;
    {
        NoGradGuard guard;
        resized = bilinear_resize(sample.image, rh, rw);
    }

    const std::size_t off_y = rh > cfg.crop_h ? static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(rh - cfg.crop_h))) : 0;
    const std::size_t off_x = rw > cfg.crop_w ? static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(rw - cfg.crop_w))) : 0;

    std::vector<float> crop(3 * cfg.crop_h * cfg.crop_w, 0.0f);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < cfg.crop_h && y + off_y < rh; ++y)
            for (std::size_t x = 0; x < cfg.crop_w && x + off_x < rw; ++x)
                crop[(c * cfg.crop_h + y) * cfg.crop_w + x] = resized[(c * rh + y + off_y) * rw + x + off_x];

    SceneSample out;
    out.image = Tensor<float>::from({3, cfg.crop_h, cfg.crop_w}, std::move(crop));
    out.image_id = sample.image_id;
    for (const auto& inst : sample.instances) {
        auto scaled = detail::resize_nearest(inst.mask, rh, rw);
        BinaryMask m(cfg.crop_h, cfg.crop_w);
        for (std::size_t y = 0; y < cfg.crop_h && y + off_y < rh; ++y)
            for (std::size_t x = 0; x < cfg.crop_w && x + off_x < rw; ++x) m.set(y, x, scaled.at(y + off_y, x + off_x));
        if (!m.empty()) out.instances.push_back({inst.class_id, std::move(m)});
    }
    return out;
}

}  // namespace fastinst
