#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "fastinst/core/parallel.hpp"
#include "fastinst/core/rng.hpp"
#include "fastinst/core/tensor.hpp"
#include "fastinst/data/mask.hpp"

namespace fastinst {

/// Shape categories, class ids 1..5. Class identity is geometry only.
inline const std::array<std::string, 5> kShapeNames = {"circle", "square", "triangle", "ring", "cross"};

struct DatasetSpec {
    int num_classes = 3;
    std::size_t height = 96;
    std::size_t width = 96;
    int min_instances = 2;
    int max_instances = 6;
    std::size_t min_instance_area = 16;
    std::size_t num_images = 64;
    std::uint64_t seed = 0;

    void validate() const {
        if (num_classes < 1 || num_classes > static_cast<int>(kShapeNames.size()))
            throw std::invalid_argument("num_classes must be in [1," + std::to_string(kShapeNames.size()) + "]");
        if (height == 0 || width == 0 || height % 32 || width % 32)
            throw std::invalid_argument("image extents must be positive multiples of 32");
        if (min_instances < 1 || max_instances < min_instances)
            throw std::invalid_argument("instance range must satisfy 1 <= min <= max");
    }
};

struct InstanceTarget {
    int class_id = 0;  // 1..K
    BinaryMask mask;

    bool operator==(const InstanceTarget&) const = default;
};

struct SceneSample {
    Tensor<float> image;  // (3,H,W), values in [0,1]
    std::vector<InstanceTarget> instances;
    std::int64_t image_id = 0;

    std::size_t height() const { return image.dim(1); }
    std::size_t width() const { return image.dim(2); }
};

/// Geometry and paint of one drawn shape.
struct ShapeRecord {
    int class_id = 1;
    double cx = 0, cy = 0;  // pixel coordinates of the center
    double radius = 1;
    double angle = 0;  // radians
    std::array<std::uint8_t, 3> color{255, 255, 255};
};

/// True when the point (px,py) lies inside the shape.
inline bool shape_contains(const ShapeRecord& s, double px, double py) {
    const double dx = px - s.cx, dy = py - s.cy;
    const double c = std::cos(s.angle), sn = std::sin(s.angle);
    const double u = c * dx + sn * dy, v = -sn * dx + c * dy;
    const double r = s.radius;
    switch (s.class_id) {
        case 1: return dx * dx + dy * dy <= r * r;
        case 2: return std::abs(u) <= 0.8 * r && std::abs(v) <= 0.8 * r;
        case 3: {
            // Equilateral triangle with circumradius r.
            std::array<std::pair<double, double>, 3> p;
            for (int k = 0; k < 3; ++k) {
                const double a = -std::numbers::pi / 2 + 2 * std::numbers::pi * k / 3;
                p[k] = {r * std::cos(a), r * std::sin(a)};
            }
            auto edge = [&](int i, int j) {
                return (p[j].first - p[i].first) * (v - p[i].second) - (p[j].second - p[i].second) * (u - p[i].first);
            };
            const double e0 = edge(0, 1), e1 = edge(1, 2), e2 = edge(2, 0);
            return (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
        }
        case 4: {
            const double d2 = dx * dx + dy * dy;
            return d2 <= r * r && d2 >= 0.3 * r * r;
        }
        case 5: {
            const double arm = 0.35 * r;
            return (std::abs(u) <= r && std::abs(v) <= arm) || (std::abs(v) <= r && std::abs(u) <= arm);
        }
        default: throw std::invalid_argument("unknown shape class " + std::to_string(s.class_id));
    }
}

/// Samples pixel centers (x+0.5, y+0.5).
inline BinaryMask rasterize_shape(const ShapeRecord& s, std::size_t height, std::size_t width) {
    BinaryMask mask(height, width);
    for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x)
            if (shape_contains(s, static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5)) mask.set(y, x);
    return mask;
}

/// 8-bit RGB raster used as the canonical pixel store; float images are derived as byte/255.
struct Rgb8 {
    std::size_t height = 0, width = 0;
    std::vector<std::uint8_t> pixels;  // HWC

    Tensor<float> to_tensor() const {
        std::vector<float> chw(3 * height * width);
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t i = 0; i < height * width; ++i)
                chw[c * height * width + i] = static_cast<float>(pixels[i * 3 + c]) / 255.0f;
        return Tensor<float>::from({3, height, width}, std::move(chw));
    }
};

/// Painter's algorithm over `shapes` (back to front). Annotations are visible
/// regions; shapes whose visible area falls under `min_area` are dropped.
inline std::vector<InstanceTarget> compose_scene(Rgb8& canvas, const std::vector<ShapeRecord>& shapes,
                                                 std::size_t min_area) {
    const std::size_t H = canvas.height, W = canvas.width;
    std::vector<int> owner(H * W, -1);
    for (std::size_t k = 0; k < shapes.size(); ++k) {
        auto m = rasterize_shape(shapes[k], H, W);
        for (std::size_t i = 0; i < H * W; ++i) {
            if (!m.bits[i]) continue;
            owner[i] = static_cast<int>(k);
            for (std::size_t c = 0; c < 3; ++c) canvas.pixels[i * 3 + c] = shapes[k].color[c];
        }
    }
    std::vector<InstanceTarget> out;
    for (std::size_t k = 0; k < shapes.size(); ++k) {
        InstanceTarget t{shapes[k].class_id, BinaryMask(H, W)};
        for (std::size_t i = 0; i < H * W; ++i) t.mask.bits[i] = owner[i] == static_cast<int>(k);
        if (t.mask.area() >= min_area && !t.mask.empty()) out.push_back(std::move(t));
    }
    return out;
}

namespace detail {

inline std::uint8_t to_byte(double v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

inline Rgb8 textured_background(Rng& rng, std::size_t H, std::size_t W) {
    Rgb8 bg{H, W, std::vector<std::uint8_t>(H * W * 3)};
    std::array<double, 3> a{}, b{};
    for (auto& v : a) v = rng.uniform(0.1, 0.6);
    for (auto& v : b) v = rng.uniform(0.1, 0.6);
    const double theta = rng.uniform(0, 2 * std::numbers::pi);
    const double fx = rng.uniform(0.05, 0.3), fy = rng.uniform(0.05, 0.3);
    const double dirx = std::cos(theta), diry = std::sin(theta);
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            const double t = 0.5 + 0.5 * (dirx * (static_cast<double>(x) / W - 0.5) + diry * (static_cast<double>(y) / H - 0.5));
            const double ripple = 0.04 * std::sin(fx * x) * std::cos(fy * y);
            for (std::size_t c = 0; c < 3; ++c) {
                const double noise = 0.03 * (rng.uniform() - 0.5);
                bg.pixels[(y * W + x) * 3 + c] = to_byte(a[c] * (1 - t) + b[c] * t + ripple + noise);
            }
        }
    return bg;
}

}  // namespace detail

/// Shape layout sampled for one attempt of `generate_scene`.
inline std::vector<ShapeRecord> sample_layout(const DatasetSpec& spec, Rng& rng) {
    const auto n = rng.uniform_int(spec.min_instances, spec.max_instances);
    const double side = static_cast<double>(std::min(spec.height, spec.width));
    std::vector<ShapeRecord> shapes;
    for (std::int64_t k = 0; k < n; ++k) {
        ShapeRecord s;
        s.class_id = static_cast<int>(rng.uniform_int(1, spec.num_classes));
        s.radius = rng.uniform(0.09, 0.2) * side;
        s.cx = rng.uniform(s.radius * 0.6, static_cast<double>(spec.width) - s.radius * 0.6);
        s.cy = rng.uniform(s.radius * 0.6, static_cast<double>(spec.height) - s.radius * 0.6);
        s.angle = rng.uniform(0, 2 * std::numbers::pi);
        for (auto& c : s.color) c = static_cast<std::uint8_t>(rng.uniform_int(40, 255));
        shapes.push_back(s);
    }
    return shapes;
}

inline constexpr int kSceneRetries = 16;

/// Deterministic scene for (spec.seed, index).
inline SceneSample generate_scene(const DatasetSpec& spec, std::int64_t index) {
    spec.validate();
    if (index < 0) throw std::invalid_argument("scene index must be nonnegative");
    for (int attempt = 0; attempt < kSceneRetries; ++attempt) {
        auto rng = Rng::split(spec.seed, "scene", static_cast<std::uint64_t>(index), static_cast<std::uint64_t>(attempt));
        auto canvas = detail::textured_background(rng, spec.height, spec.width);
        auto shapes = sample_layout(spec, rng);
        auto instances = compose_scene(canvas, shapes, spec.min_instance_area);
        if (instances.empty()) continue;
        return SceneSample{canvas.to_tensor(), std::move(instances), index};
    }
    throw std::runtime_error("generate_scene: no instance survived after " + std::to_string(kSceneRetries) +
                             " attempts for index " + std::to_string(index));
}

inline std::vector<SceneSample> generate_dataset(const DatasetSpec& spec) {
    std::vector<SceneSample> out(spec.num_images);
    parallel_for(spec.num_images, [&](std::size_t i) { out[i] = generate_scene(spec, static_cast<std::int64_t>(i)); });
    return out;
}

}  // namespace fastinst
