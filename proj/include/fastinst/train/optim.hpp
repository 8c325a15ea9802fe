#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fastinst/core/nn.hpp"

namespace fastinst {

struct TrainConfig {
    double base_lr = 1e-4;
    double weight_decay = 0.05;
    double backbone_lr_mult = 0.1;
    std::vector<double> decay_fractions{0.9, 0.95};
    double decay_factor = 0.1;
    std::size_t batch_size = 4;
    std::size_t total_iters = 5000;
    std::uint64_t seed = 0;
    bool augment = true;
    std::size_t log_every = 1;
    std::size_t checkpoint_every = 0;  // 0: only the final checkpoint
    std::size_t eval_every = 0;        // 0: evaluate only at the end

    /// 50 epochs at batch 16 over a dataset of `dataset_size` images.
    static TrainConfig full_scale(std::size_t dataset_size) {
        TrainConfig cfg;
        cfg.batch_size = 16;
        cfg.total_iters = 50 * ((dataset_size + cfg.batch_size - 1) / cfg.batch_size);
        return cfg;
    }

    void validate() const {
        if (base_lr < 0 || weight_decay < 0 || backbone_lr_mult < 0 || decay_factor < 0)
            throw std::invalid_argument("train: learning rates, weight decay and decay factor must be nonnegative");
        for (std::size_t i = 0; i < decay_fractions.size(); ++i) {
            const double f = decay_fractions[i];
            if (!(f > 0.0 && f <= 1.0)) throw std::invalid_argument("train.decay_fractions must lie in (0,1]");
            if (i && !(f > decay_fractions[i - 1])) throw std::invalid_argument("train.decay_fractions must be strictly increasing");
        }
        if (batch_size == 0) throw std::invalid_argument("train.batch_size must be positive");
    }
};

struct LearningRates {
    double main = 0.0;
    double backbone = 0.0;
};

/// Piecewise-constant step schedule; the backbone runs at a fixed multiple of the main rate.
inline LearningRates lr_at(std::size_t iter, const TrainConfig& cfg) {
    double lr = cfg.base_lr;
    const double progress = cfg.total_iters ? static_cast<double>(iter) / static_cast<double>(cfg.total_iters) : 0.0;
    for (double f : cfg.decay_fractions)
        if (progress >= f) lr *= cfg.decay_factor;
    return {lr, lr * cfg.backbone_lr_mult};
}

/// Per-parameter first and second moment estimates plus the shared step count.
template <typename T>
struct AdamWState {
    std::map<std::string, std::vector<T>> m, v;
    std::size_t step = 0;
};

struct AdamWOptions {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// One AdamW step with decoupled weight decay. `lr_for` maps a parameter name to its rate.
/// Gradients are scanned first so a non-finite value leaves every parameter and moment untouched.
template <typename T, typename LrFn>
void adamw_step(ParamStore<T>& params, AdamWState<T>& state, LrFn&& lr_for, double weight_decay, const AdamWOptions& opt = {}) {
    for (const auto& [name, p] : params.all())
        for (T g : p.grad())
            if (!std::isfinite(static_cast<double>(g))) throw std::runtime_error("adamw_step: non-finite gradient in " + name);

    ++state.step;
    const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.step));
    for (const auto& [name, param] : params.all()) {
        Tensor<T> p = param;
        auto& m = state.m[name];
        auto& v = state.v[name];
        if (m.empty()) {
            m.assign(p.numel(), T(0));
            v.assign(p.numel(), T(0));
        }
        const double lr = lr_for(name);
        auto data = p.mutable_data();
        auto grad = p.grad();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double g = static_cast<double>(grad[i]);
            const double mi = opt.beta1 * static_cast<double>(m[i]) + (1.0 - opt.beta1) * g;
            const double vi = opt.beta2 * static_cast<double>(v[i]) + (1.0 - opt.beta2) * g * g;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            const double theta = static_cast<double>(data[i]);
            const double update = lr * weight_decay * theta + lr * (mi / bc1) / (std::sqrt(vi / bc2) + opt.eps);
            data[i] = static_cast<T>(theta - update);
        }
    }
}

/// Rates per parameter under the schedule: backbone parameters take the reduced rate.
inline auto scheduled_lr(const LearningRates& rates) {
    return [rates](const std::string& name) { return param_group(name) == "backbone" ? rates.backbone : rates.main; };
}

}  // namespace fastinst
