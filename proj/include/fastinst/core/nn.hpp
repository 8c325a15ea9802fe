#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "fastinst/core/ops.hpp"
#include "fastinst/core/rng.hpp"
#include "fastinst/core/tensor.hpp"

namespace fastinst {

enum class Init { Zeros, Ones, Uniform, Normal };

/// Named parameter registry. Names are slash-separated; the first component is
/// the parameter group ("backbone", "pixel", "query", "decoder", "head").
/// Each parameter draws its initial values from its own stream keyed by name,
/// so adding or removing a parameter never perturbs the others.
template <typename T>
class ParamStore {
   public:
    explicit ParamStore(std::uint64_t seed = 0) : seed_(seed) {}

    Tensor<T> add(const std::string& name, Shape shape, Init init, double scale = 0.0) {
        if (params_.count(name)) throw std::logic_error("duplicate parameter " + name);
        const std::size_t n = shape_numel(shape);
        std::vector<T> values(n, T(0));
        auto rng = Rng::split(seed_, "init:" + name, 0);
        for (auto& v : values) {
            switch (init) {
                case Init::Zeros: v = T(0); break;
                case Init::Ones: v = T(1); break;
                case Init::Uniform: v = static_cast<T>(rng.uniform(-scale, scale)); break;
                case Init::Normal: v = static_cast<T>(scale * rng.normal()); break;
            }
        }
        auto t = Tensor<T>::from(std::move(shape), std::move(values), true);
        params_.emplace(name, t);
        return t;
    }

    const std::map<std::string, Tensor<T>>& all() const { return params_; }
    Tensor<T> at(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw std::out_of_range("unknown parameter " + name);
        return it->second;
    }
    bool contains(const std::string& name) const { return params_.count(name) != 0; }

    std::vector<Tensor<T>> with_prefix(const std::string& prefix) const {
        std::vector<Tensor<T>> out;
        for (const auto& [name, t] : params_)
            if (name.compare(0, prefix.size(), prefix) == 0) out.push_back(t);
        return out;
    }

    std::vector<Tensor<T>> tensors() const {
        std::vector<Tensor<T>> out;
        for (const auto& [name, t] : params_) out.push_back(t);
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& [name, t] : params_) n += t.numel();
        return n;
    }

    void zero_grad() {
        for (auto& [name, t] : params_) t.zero_grad();
    }

   private:
    std::uint64_t seed_;
    std::map<std::string, Tensor<T>> params_;
};

/// Group label of a parameter name: text before the first '/', refined to
/// "decoder/layerN" and "head/layerN" for per-layer parameters.
inline std::string param_group(const std::string& name) {
    auto first = name.find('/');
    if (first == std::string::npos) return name;
    auto top = name.substr(0, first);
    if (top == "decoder" || top == "head" || top == "query") {
        auto second = name.find('/', first + 1);
        return name.substr(0, second);
    }
    return top;
}

template <typename T>
struct Linear {
    Tensor<T> weight, bias;

    Linear() = default;
    Linear(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out) {
        const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
        weight = store.add(name + "/weight", {out, in}, Init::Uniform, bound);
        bias = store.add(name + "/bias", {out}, Init::Zeros);
    }

    Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }
};

template <typename T>
struct Conv {
    Tensor<T> weight, bias;
    std::size_t stride = 1, pad = 0;

    Conv() = default;
    Conv(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out, std::size_t kernel,
         std::size_t stride_ = 1)
        : stride(stride_), pad(kernel / 2) {
        const double bound = std::sqrt(6.0 / static_cast<double>(in * kernel * kernel));
        weight = store.add(name + "/weight", {out, in, kernel, kernel}, Init::Uniform, bound);
        bias = store.add(name + "/bias", {out}, Init::Zeros);
    }

    Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, std::optional<Tensor<T>>(bias), stride, pad); }
};

template <typename T>
struct LayerNorm {
    Tensor<T> gamma, beta;

    LayerNorm() = default;
    LayerNorm(ParamStore<T>& store, const std::string& name, std::size_t width) {
        gamma = store.add(name + "/gamma", {width}, Init::Ones);
        beta = store.add(name + "/beta", {width}, Init::Zeros);
    }

    Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gamma, beta); }
};

/// Three linear layers with GELU between them.
template <typename T>
struct Mlp3 {
    Linear<T> fc1, fc2, fc3;

    Mlp3() = default;
    Mlp3(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t hidden, std::size_t out)
        : fc1(store, name + "/fc1", in, hidden), fc2(store, name + "/fc2", hidden, hidden), fc3(store, name + "/fc3", hidden, out) {}

    Tensor<T> operator()(const Tensor<T>& x) const { return fc3(gelu(fc2(gelu(fc1(x))))); }
};

template <typename T>
struct MultiHeadAttention {
    Linear<T> q_proj, k_proj, v_proj, out_proj;
    std::size_t heads = 1;

    MultiHeadAttention() = default;
    MultiHeadAttention(ParamStore<T>& store, const std::string& name, std::size_t dim, std::size_t heads_)
        : q_proj(store, name + "/q", dim, dim),
          k_proj(store, name + "/k", dim, dim),
          v_proj(store, name + "/v", dim, dim),
          out_proj(store, name + "/out", dim, dim),
          heads(heads_) {
        if (heads == 0 || dim % heads != 0)
            throw std::invalid_argument("attention width " + std::to_string(dim) + " not divisible by " +
                                        std::to_string(heads) + " heads");
    }

    /// `weights_out`, when set, receives head-averaged (Nq,Nk) attention weights.
    Tensor<T> operator()(const Tensor<T>& query, const Tensor<T>& key, const Tensor<T>& value, const AllowMask* mask,
                         std::vector<T>* weights_out = nullptr) const {
        auto q = q_proj(query);
        auto k = k_proj(key);
        auto v = v_proj(value);
        const std::size_t dim = q.dim(1), hd = dim / heads;
        std::vector<Tensor<T>> outs;
        outs.reserve(heads);
        std::vector<T> head_weights;
        if (weights_out) weights_out->assign(query.dim(0) * key.dim(0), T(0));
        for (std::size_t h = 0; h < heads; ++h) {
            outs.push_back(attention(slice_cols(q, h * hd, hd), slice_cols(k, h * hd, hd), slice_cols(v, h * hd, hd), mask,
                                     weights_out ? &head_weights : nullptr));
            if (weights_out)
                for (std::size_t i = 0; i < head_weights.size(); ++i)
                    (*weights_out)[i] += head_weights[i] / static_cast<T>(heads);
        }
        return out_proj(heads == 1 ? outs[0] : concat_cols(outs));
    }
};

}  // namespace fastinst
