#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace fastinst {

/// Row-major binary mask.
struct BinaryMask {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> bits;

    BinaryMask() = default;
    BinaryMask(std::size_t h, std::size_t w) : height(h), width(w), bits(h * w, 0) {}

    bool at(std::size_t y, std::size_t x) const { return bits[y * width + x] != 0; }
    void set(std::size_t y, std::size_t x, bool v = true) { bits[y * width + x] = v ? 1 : 0; }
    std::size_t area() const { return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1})); }
    bool empty() const { return area() == 0; }

    bool operator==(const BinaryMask&) const = default;
};

/// Row-major run-length encoding; counts alternate zeros/ones starting with a
/// (possibly empty) run of zeros.
inline std::vector<std::uint32_t> rle_encode(const BinaryMask& mask) {
    std::vector<std::uint32_t> counts;
    std::uint8_t current = 0;
    std::uint32_t run = 0;
    for (auto b : mask.bits) {
        const std::uint8_t v = b ? 1 : 0;
        if (v != current) {
            counts.push_back(run);
            run = 0;
            current = v;
        }
        ++run;
    }
    counts.push_back(run);
    return counts;
}

inline BinaryMask rle_decode(const std::vector<std::uint32_t>& counts, std::size_t height, std::size_t width) {
    const std::uint64_t total = std::accumulate(counts.begin(), counts.end(), std::uint64_t{0});
    if (total != static_cast<std::uint64_t>(height) * width)
        throw std::invalid_argument("rle_decode: counts sum to " + std::to_string(total) + ", expected " +
                                    std::to_string(height * width));
    BinaryMask mask(height, width);
    std::size_t pos = 0;
    std::uint8_t value = 0;
    for (auto run : counts) {
        std::fill_n(mask.bits.begin() + static_cast<std::ptrdiff_t>(pos), run, value);
        pos += run;
        value ^= 1;
    }
    return mask;
}

/// Downsample by an integer factor; a cell is set if any covered pixel is set.
inline BinaryMask downsample_any(const BinaryMask& mask, std::size_t factor) {
    const std::size_t h = (mask.height + factor - 1) / factor, w = (mask.width + factor - 1) / factor;
    BinaryMask out(h, w);
    for (std::size_t y = 0; y < mask.height; ++y)
        for (std::size_t x = 0; x < mask.width; ++x)
            if (mask.at(y, x)) out.set(y / factor, x / factor);
    return out;
}

/// Downsample by an integer factor; a cell is set when more than half of its pixels are set.
inline BinaryMask downsample_majority(const BinaryMask& mask, std::size_t factor) {
    const std::size_t h = mask.height / factor, w = mask.width / factor;
    BinaryMask out(h, w);
    for (std::size_t cy = 0; cy < h; ++cy)
        for (std::size_t cx = 0; cx < w; ++cx) {
            std::size_t on = 0;
            for (std::size_t y = cy * factor; y < (cy + 1) * factor; ++y)
                for (std::size_t x = cx * factor; x < (cx + 1) * factor; ++x) on += mask.at(y, x);
            out.set(cy, cx, 2 * on > factor * factor);
        }
    return out;
}

inline double mask_iou(const BinaryMask& a, const BinaryMask& b) {
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.bits.size(); ++i) {
        inter += (a.bits[i] & b.bits[i]);
        uni += (a.bits[i] | b.bits[i]);
    }
    return uni ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

}  // namespace fastinst
