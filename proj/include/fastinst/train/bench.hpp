#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fastinst/core/rng.hpp"
#include "fastinst/model/fastinst.hpp"
#include "fastinst/train/postprocess.hpp"

namespace fastinst {

struct BenchResult {
    double mean_ms = 0, median_ms = 0, p95_ms = 0, fps = 0;
    std::size_t iters = 0, warmup = 0;
    std::size_t input_h = 0, input_w = 0;
    std::string config_hash;
    std::vector<double> samples_ms;

    nlohmann::json to_json() const {
        return {{"mean_ms", mean_ms}, {"median_ms", median_ms}, {"p95_ms", p95_ms}, {"fps", fps},       {"iters", iters},
                {"warmup", warmup},   {"input_h", input_h},     {"input_w", input_w}, {"config_hash", config_hash}};
    }
};

/// 64-bit FNV-1a of the compact JSON text, as 16 hex digits.
inline std::string config_hash(const nlohmann::json& config) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : config.dump()) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

/// Summary statistics of per-run timings; p95 uses the nearest-rank rule.
inline BenchResult summarize_timings(std::vector<double> ms) {
    BenchResult r;
    r.samples_ms = ms;
    r.iters = ms.size();
    if (ms.empty()) return r;
    std::sort(ms.begin(), ms.end());
    const std::size_t n = ms.size();
    r.mean_ms = std::accumulate(ms.begin(), ms.end(), 0.0) / static_cast<double>(n);
    r.median_ms = n % 2 ? ms[n / 2] : 0.5 * (ms[n / 2 - 1] + ms[n / 2]);
    const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(n)));
    r.p95_ms = ms[std::max<std::size_t>(rank, 1) - 1];
    r.fps = r.mean_ms > 0 ? 1000.0 / r.mean_ms : 0.0;
    return r;
}

/// Wall-clock latency of forward plus post-processing at batch size 1 on a fixed random image.
template <typename T>
BenchResult benchmark_latency(const FastInstModel<T>& model, std::size_t height, std::size_t width, std::size_t warmup,
                              std::size_t iters, const nlohmann::json& config = nlohmann::json::object()) {
    NoGradGuard no_grad;
    auto rng = Rng::split(model.config().seed, "bench-input", height * 100003 + width);
    std::vector<T> pixels(3 * height * width);
    for (auto& p : pixels) p = static_cast<T>(rng.uniform());
    const auto image = Tensor<T>::from({3, height, width}, std::move(pixels));

    auto run_once = [&] {
        auto out = model.forward(image);
        return postprocess(out.final_prediction(), out.e3_h, out.e3_w, out.image_h, out.image_w).size();
    };
    for (std::size_t i = 0; i < warmup; ++i) run_once();
    std::vector<double> ms;
    for (std::size_t i = 0; i < iters; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        run_once();
        ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
    }
    auto r = summarize_timings(std::move(ms));
    r.warmup = warmup;
    r.input_h = height;
    r.input_w = width;
    r.config_hash = config_hash(config);
    return r;
}

}  // namespace fastinst
