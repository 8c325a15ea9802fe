#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fastinst/core/tensor.hpp"

namespace fastinst {

/// Finite logit written into blocked attention positions.
inline constexpr double kBlockedLogit = -1e9;

/// Variance epsilon for every layer normalization.
inline constexpr double kLayerNormEps = 1e-5;

namespace kernel {

// C[M,N] += A[M,K] * B[K,N]
template <typename T>
void mm_nn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
    for (std::size_t i = 0; i < M; ++i) {
        T* c = C + i * N;
        const T* a = A + i * K;
        for (std::size_t k = 0; k < K; ++k) {
            const T av = a[k];
            if (av == T(0)) continue;
            const T* b = B + k * N;
            for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

// C[M,N] += A[M,K] * B[N,K]^T
template <typename T>
void mm_nt(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
    for (std::size_t i = 0; i < M; ++i) {
        const T* a = A + i * K;
        for (std::size_t j = 0; j < N; ++j) {
            const T* b = B + j * K;
            T acc = 0;
            for (std::size_t k = 0; k < K; ++k) acc += a[k] * b[k];
            C[i * N + j] += acc;
        }
    }
}

// C[M,N] += A[K,M]^T * B[K,N]
template <typename T>
void mm_tn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
    for (std::size_t k = 0; k < K; ++k) {
        const T* a = A + k * M;
        const T* b = B + k * N;
        for (std::size_t i = 0; i < M; ++i) {
            const T av = a[i];
            if (av == T(0)) continue;
            T* c = C + i * N;
            for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

}  // namespace kernel

namespace detail {

inline void require(bool ok, const std::string& what) {
    if (!ok) throw std::invalid_argument(what);
}

template <typename T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* op) {
    require(t.rank() == rank, std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                                  shape_str(t.shape()));
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    require(a.shape() == b.shape(),
            std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <typename T>
void accumulate(Node<T>& target, std::size_t i, T value) {
    if (target.requires_grad) target.grad[i] += value;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    return detail::make_result<T>(a.shape(), std::move(out), {&a, &b}, [](Node<T>& self) {
        for (auto& p : self.parents) {
            if (!p->requires_grad) continue;
            for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
        }
    });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    return detail::make_result<T>(a.shape(), std::move(out), {&a, &b}, [](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            detail::accumulate(pa, i, self.grad[i]);
            detail::accumulate(pb, i, -self.grad[i]);
        }
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    return detail::make_result<T>(a.shape(), std::move(out), {&a, &b}, [](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            detail::accumulate(pa, i, self.grad[i] * pb.data[i]);
            detail::accumulate(pb, i, self.grad[i] * pa.data[i]);
        }
    });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
    return detail::make_result<T>(a.shape(), std::move(out), {&a}, [factor](Node<T>& self) {
        auto& p = *self.parents[0];
        for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] * factor;
    });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T value) {
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + value;
    return detail::make_result<T>(a.shape(), std::move(out), {&a}, [](Node<T>& self) {
        auto& p = *self.parents[0];
        for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
    });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(1) / (T(1) + std::exp(-a[i]));
    return detail::make_result<T>(a.shape(), std::move(out), {&a}, [](Node<T>& self) {
        auto& p = *self.parents[0];
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const T s = self.data[i];
            p.grad[i] += self.grad[i] * s * (T(1) - s);
        }
    });
}

/// Exact (erf-based) GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
    const T inv_sqrt2 = T(1) / std::sqrt(T(2));
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(0.5) * a[i] * (T(1) + std::erf(a[i] * inv_sqrt2));
    return detail::make_result<T>(a.shape(), std::move(out), {&a}, [inv_sqrt2](Node<T>& self) {
        auto& p = *self.parents[0];
        const T inv_sqrt_2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const T x = p.data[i];
            const T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
            const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * x * x);
            p.grad[i] += self.grad[i] * (cdf + x * pdf);
        }
    });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    T total = 0;
    for (auto v : a.data()) total += v;
    return detail::make_result<T>({1}, {total}, {&a}, [](Node<T>& self) {
        auto& p = *self.parents[0];
        for (auto& g : p.grad) g += self.grad[0];
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
    return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

/// Sum of a list of scalars, in list order.
template <typename T>
Tensor<T> sum_scalars(const std::vector<Tensor<T>>& terms) {
    detail::require(!terms.empty(), "sum_scalars: empty term list");
    T total = 0;
    for (const auto& t : terms) {
        detail::require(t.numel() == 1, "sum_scalars: non-scalar term " + shape_str(t.shape()));
        total += t[0];
    }
    return detail::make_result<T>({1}, {total}, terms, [](Node<T>& self) {
        for (auto& p : self.parents) {
            if (p->requires_grad) p->grad[0] += self.grad[0];
        }
    });
}

/// (M,L) -> (M) row sums.
template <typename T>
Tensor<T> row_sum(const Tensor<T>& a) {
    detail::require_rank(a, 2, "row_sum");
    const std::size_t M = a.dim(0), L = a.dim(1);
    std::vector<T> out(M, T(0));
    for (std::size_t i = 0; i < M; ++i)
        for (std::size_t j = 0; j < L; ++j) out[i] += a[i * L + j];
    return detail::make_result<T>({M}, std::move(out), {&a}, [L](Node<T>& self) {
        auto& p = *self.parents[0];
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            for (std::size_t j = 0; j < L; ++j) p.grad[i * L + j] += self.grad[i];
    });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    detail::require(shape_numel(shape) == a.numel(),
                    "reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape) + " changes element count");
    return detail::make_result<T>(std::move(shape), a.to_vector(), {&a}, [](Node<T>& self) {
        auto& p = *self.parents[0];
        for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
    });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    detail::require_rank(a, 2, "transpose");
    const std::size_t R = a.dim(0), C = a.dim(1);
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < R; ++i)
        for (std::size_t j = 0; j < C; ++j) out[j * R + i] = a[i * C + j];
    return detail::make_result<T>({C, R}, std::move(out), {&a}, [R, C](Node<T>& self) {
        auto& p = *self.parents[0];
        for (std::size_t i = 0; i < R; ++i)
            for (std::size_t j = 0; j < C; ++j) p.grad[i * C + j] += self.grad[j * R + i];
    });
}

/// Concatenates along axis 0; trailing extents must agree.
template <typename T>
Tensor<T> concat0(const std::vector<Tensor<T>>& parts) {
    detail::require(!parts.empty(), "concat0: no inputs");
    Shape shape = parts[0].shape();
    Shape tail(shape.begin() + 1, shape.end());
    std::size_t rows = 0;
    std::vector<T> out;
    for (const auto& p : parts) {
        detail::require(Shape(p.shape().begin() + 1, p.shape().end()) == tail,
                        "concat0: trailing shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(shape));
        rows += p.dim(0);
        out.insert(out.end(), p.data().begin(), p.data().end());
    }
    shape[0] = rows;
    return detail::make_result<T>(std::move(shape), std::move(out), parts, [](Node<T>& self) {
        std::size_t offset = 0;
        for (auto& p : self.parents) {
            if (p->requires_grad)
                for (std::size_t i = 0; i < p->data.size(); ++i) p->grad[i] += self.grad[offset + i];
            offset += p->data.size();
        }
    });
}

/// Concatenates 2-D tensors along columns.
template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
    detail::require(!parts.empty(), "concat_cols: no inputs");
    const std::size_t R = parts[0].dim(0);
    std::size_t C = 0;
    for (const auto& p : parts) {
        detail::require_rank(p, 2, "concat_cols");
        detail::require(p.dim(0) == R, "concat_cols: row count mismatch");
        C += p.dim(1);
    }
    std::vector<T> out(R * C);
    std::size_t col = 0;
    for (const auto& p : parts) {
        const std::size_t w = p.dim(1);
        for (std::size_t i = 0; i < R; ++i)
            for (std::size_t j = 0; j < w; ++j) out[i * C + col + j] = p[i * w + j];
        col += w;
    }
    return detail::make_result<T>({R, C}, std::move(out), parts, [R, C](Node<T>& self) {
        std::size_t col = 0;
        for (auto& p : self.parents) {
            const std::size_t w = p->shape[1];
            if (p->requires_grad)
                for (std::size_t i = 0; i < R; ++i)
                    for (std::size_t j = 0; j < w; ++j) p->grad[i * w + j] += self.grad[i * C + col + j];
            col += w;
        }
    });
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t start, std::size_t len) {
    detail::require_rank(a, 2, "slice_cols");
    const std::size_t R = a.dim(0), C = a.dim(1);
    detail::require(len > 0 && start + len <= C, "slice_cols: range out of bounds");
    std::vector<T> out(R * len);
    for (std::size_t i = 0; i < R; ++i)
        for (std::size_t j = 0; j < len; ++j) out[i * len + j] = a[i * C + start + j];
    return detail::make_result<T>({R, len}, std::move(out), {&a}, [R, C, start, len](Node<T>& self) {
        auto& p = *self.parents[0];
        for (std::size_t i = 0; i < R; ++i)
            for (std::size_t j = 0; j < len; ++j) p.grad[i * C + start + j] += self.grad[i * len + j];
    });
}

/// Row gather along axis 0 of a 2-D tensor; repeated indices accumulate in backward.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& a, const std::vector<std::size_t>& rows) {
    detail::require_rank(a, 2, "gather_rows");
    detail::require(!rows.empty(), "gather_rows: empty index list");
    const std::size_t N = a.dim(0), D = a.dim(1);
    std::vector<T> out(rows.size() * D);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        detail::require(rows[r] < N, "gather_rows: index " + std::to_string(rows[r]) + " out of range");
        std::copy_n(a.ptr() + rows[r] * D, D, out.begin() + static_cast<std::ptrdiff_t>(r * D));
    }
    return detail::make_result<T>({rows.size(), D}, std::move(out), {&a}, [rows, D](Node<T>& self) {
        auto& p = *self.parents[0];
        for (std::size_t r = 0; r < rows.size(); ++r)
            for (std::size_t j = 0; j < D; ++j) p.grad[rows[r] * D + j] += self.grad[r * D + j];
    });
}

/// (C,H,W) -> (H*W, C): channel-last token view of a feature map.
template <typename T>
Tensor<T> to_tokens(const Tensor<T>& x) {
    detail::require_rank(x, 3, "to_tokens");
    return transpose(reshape(x, {x.dim(0), x.dim(1) * x.dim(2)}));
}

/// (H*W, C) -> (C,H,W).
template <typename T>
Tensor<T> from_tokens(const Tensor<T>& tokens, std::size_t h, std::size_t w) {
    detail::require_rank(tokens, 2, "from_tokens");
    detail::require(tokens.dim(0) == h * w, "from_tokens: token count does not match extents");
    return reshape(transpose(tokens), {tokens.dim(1), h, w});
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_rank(a, 2, "matmul");
    detail::require_rank(b, 2, "matmul");
    const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
    detail::require(b.dim(0) == K, "matmul: inner extents differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    std::vector<T> out(M * N, T(0));
    kernel::mm_nn(M, N, K, a.ptr(), b.ptr(), out.data());
    return detail::make_result<T>({M, N}, std::move(out), {&a, &b}, [M, N, K](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) kernel::mm_nt(M, K, N, self.grad.data(), pb.data.data(), pa.grad.data());
        if (pb.requires_grad) kernel::mm_tn(K, N, M, pa.data.data(), self.grad.data(), pb.grad.data());
    });
}

/// a(M,K) * b(N,K)^T -> (M,N)
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_rank(a, 2, "matmul_nt");
    detail::require_rank(b, 2, "matmul_nt");
    const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(0);
    detail::require(b.dim(1) == K,
                    "matmul_nt: inner extents differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
    std::vector<T> out(M * N, T(0));
    kernel::mm_nt(M, N, K, a.ptr(), b.ptr(), out.data());
    return detail::make_result<T>({M, N}, std::move(out), {&a, &b}, [M, N, K](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) kernel::mm_nn(M, K, N, self.grad.data(), pb.data.data(), pa.grad.data());
        if (pb.requires_grad) kernel::mm_tn(N, K, M, self.grad.data(), pa.data.data(), pb.grad.data());
    });
}

/// x(N,in) * w(out,in)^T + bias(out)
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
    detail::require_rank(x, 2, "linear");
    detail::require_rank(w, 2, "linear");
    const std::size_t N = x.dim(0), In = x.dim(1), Out = w.dim(0);
    detail::require(w.dim(1) == In, "linear: weight " + shape_str(w.shape()) + " does not accept input " +
                                        shape_str(x.shape()));
    detail::require(bias.numel() == Out, "linear: bias length mismatch");
    std::vector<T> out(N * Out);
    for (std::size_t i = 0; i < N; ++i) std::copy_n(bias.ptr(), Out, out.begin() + static_cast<std::ptrdiff_t>(i * Out));
    kernel::mm_nt(N, Out, In, x.ptr(), w.ptr(), out.data());
    return detail::make_result<T>({N, Out}, std::move(out), {&x, &w, &bias}, [N, In, Out](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        auto& pb = *self.parents[2];
        if (px.requires_grad) kernel::mm_nn(N, In, Out, self.grad.data(), pw.data.data(), px.grad.data());
        if (pw.requires_grad) kernel::mm_tn(Out, In, N, self.grad.data(), px.data.data(), pw.grad.data());
        if (pb.requires_grad)
            for (std::size_t i = 0; i < N; ++i)
                for (std::size_t j = 0; j < Out; ++j) pb.grad[j] += self.grad[i * Out + j];
    });
}

// ---------------------------------------------------------------------------
// Normalization and softmax

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
    detail::require(x.rank() >= 1, "softmax_lastdim: rank 0 input");
    const std::size_t C = x.shape().back();
    const std::size_t R = x.numel() / C;
    std::vector<T> out(x.numel());
    for (std::size_t r = 0; r < R; ++r) {
        const T* in = x.ptr() + r * C;
        T* o = out.data() + r * C;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < C; ++j) {
            if (std::isnan(in[j])) throw std::invalid_argument("softmax_lastdim: NaN input at row " + std::to_string(r));
            mx = std::max(mx, in[j]);
        }
        T total = 0;
        for (std::size_t j = 0; j < C; ++j) total += (o[j] = std::exp(in[j] - mx));
        for (std::size_t j = 0; j < C; ++j) o[j] /= total;
    }
    return detail::make_result<T>(x.shape(), std::move(out), {&x}, [R, C](Node<T>& self) {
        auto& p = *self.parents[0];
        for (std::size_t r = 0; r < R; ++r) {
            const T* y = self.data.data() + r * C;
            const T* g = self.grad.data() + r * C;
            T dot = 0;
            for (std::size_t j = 0; j < C; ++j) dot += y[j] * g[j];
            for (std::size_t j = 0; j < C; ++j) p.grad[r * C + j] += y[j] * (g[j] - dot);
        }
    });
}

template <typename T>
Tensor<T> log_softmax_lastdim(const Tensor<T>& x) {
    const std::size_t C = x.shape().back();
    const std::size_t R = x.numel() / C;
    std::vector<T> out(x.numel());
    for (std::size_t r = 0; r < R; ++r) {
        const T* in = x.ptr() + r * C;
        T mx = *std::max_element(in, in + C);
        if (std::isnan(mx)) throw std::invalid_argument("log_softmax_lastdim: NaN input");
        T total = 0;
        for (std::size_t j = 0; j < C; ++j) total += std::exp(in[j] - mx);
        const T lse = mx + std::log(total);
        for (std::size_t j = 0; j < C; ++j) out[r * C + j] = in[j] - lse;
    }
    return detail::make_result<T>(x.shape(), std::move(out), {&x}, [R, C](Node<T>& self) {
        auto& p = *self.parents[0];
        for (std::size_t r = 0; r < R; ++r) {
            T gsum = 0;
            for (std::size_t j = 0; j < C; ++j) gsum += self.grad[r * C + j];
            for (std::size_t j = 0; j < C; ++j)
                p.grad[r * C + j] += self.grad[r * C + j] - std::exp(self.data[r * C + j]) * gsum;
        }
    });
}

/// Layer norm over the last axis with affine gamma/beta.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta) {
    const std::size_t C = x.shape().back();
    const std::size_t R = x.numel() / C;
    detail::require(gamma.numel() == C && beta.numel() == C, "layer_norm: affine length mismatch");
    std::vector<T> out(x.numel());
    std::vector<T> xhat(x.numel());
    std::vector<T> inv_std(R);
    for (std::size_t r = 0; r < R; ++r) {
        const T* in = x.ptr() + r * C;
        T mu = 0;
        for (std::size_t j = 0; j < C; ++j) mu += in[j];
        mu /= static_cast<T>(C);
        T var = 0;
        for (std::size_t j = 0; j < C; ++j) var += (in[j] - mu) * (in[j] - mu);
        var /= static_cast<T>(C);
        inv_std[r] = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
        for (std::size_t j = 0; j < C; ++j) {
            xhat[r * C + j] = (in[j] - mu) * inv_std[r];
            out[r * C + j] = xhat[r * C + j] * gamma[j] + beta[j];
        }
    }
    return detail::make_result<T>(
        x.shape(), std::move(out), {&x, &gamma, &beta},
        [R, C, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
            auto& px = *self.parents[0];
            auto& pg = *self.parents[1];
            auto& pb = *self.parents[2];
            for (std::size_t r = 0; r < R; ++r) {
                const T* g = self.grad.data() + r * C;
                const T* xh = xhat.data() + r * C;
                if (pg.requires_grad || pb.requires_grad) {
                    for (std::size_t j = 0; j < C; ++j) {
                        if (pg.requires_grad) pg.grad[j] += g[j] * xh[j];
                        if (pb.requires_grad) pb.grad[j] += g[j];
                    }
                }
                if (px.requires_grad) {
                    T mean_dy = 0, mean_dy_xh = 0;
                    for (std::size_t j = 0; j < C; ++j) {
                        const T dy = g[j] * pg.data[j];
                        mean_dy += dy;
                        mean_dy_xh += dy * xh[j];
                    }
                    mean_dy /= static_cast<T>(C);
                    mean_dy_xh /= static_cast<T>(C);
                    for (std::size_t j = 0; j < C; ++j) {
                        const T dy = g[j] * pg.data[j];
                        px.grad[r * C + j] += inv_std[r] * (dy - mean_dy - xh[j] * mean_dy_xh);
                    }
                }
            }
        });
}

/// Layer norm across channels at every pixel of a (C,H,W) map.
template <typename T>
Tensor<T> channel_layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta) {
    detail::require_rank(x, 3, "channel_layer_norm");
    return from_tokens(layer_norm(to_tokens(x), gamma, beta), x.dim(1), x.dim(2));
}

// ---------------------------------------------------------------------------
// Spatial ops on (C,H,W) maps

/// Cross-correlation with square kernel, zero padding, optional bias.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const std::optional<Tensor<T>>& bias, std::size_t stride,
                 std::size_t pad) {
    detail::require_rank(x, 3, "conv2d");
    detail::require_rank(w, 4, "conv2d");
    const std::size_t Cin = x.dim(0), H = x.dim(1), W = x.dim(2);
    const std::size_t Cout = w.dim(0), k = w.dim(2);
    detail::require(w.dim(1) == Cin, "conv2d: weight expects " + std::to_string(w.dim(1)) + " input channels, got " +
                                         std::to_string(Cin));
    detail::require(w.dim(3) == k && (k == 1 || k == 3), "conv2d: kernel must be 1x1 or 3x3");
    detail::require(stride >= 1, "conv2d: stride must be positive");
    detail::require(H + 2 * pad >= k && W + 2 * pad >= k, "conv2d: input smaller than kernel");
    if (bias) detail::require(bias->numel() == Cout, "conv2d: bias length mismatch");
    const std::size_t Ho = (H + 2 * pad - k) / stride + 1;
    const std::size_t Wo = (W + 2 * pad - k) / stride + 1;
    const std::size_t P = Ho * Wo;
    const std::size_t CKK = Cin * k * k;
    const bool direct = (k == 1 && stride == 1 && pad == 0);

    // im2col: rows indexed by (cin, ky, kx), columns by output pixel.
    std::vector<T> cols;
    if (!direct) {
        cols.assign(CKK * P, T(0));
        for (std::size_t c = 0; c < Cin; ++c)
            for (std::size_t ky = 0; ky < k; ++ky)
                for (std::size_t kx = 0; kx < k; ++kx) {
                    T* row = cols.data() + ((c * k + ky) * k + kx) * P;
                    for (std::size_t oy = 0; oy < Ho; ++oy) {
                        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                        for (std::size_t ox = 0; ox < Wo; ++ox) {
                            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                            row[oy * Wo + ox] = x[(c * H + static_cast<std::size_t>(iy)) * W + static_cast<std::size_t>(ix)];
                        }
                    }
                }
    }
    const T* col_ptr = direct ? x.ptr() : cols.data();

    std::vector<T> out(Cout * P, T(0));
    if (bias)
        for (std::size_t o = 0; o < Cout; ++o) std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(o * P), P, (*bias)[o]);
    kernel::mm_nn(Cout, P, CKK, w.ptr(), col_ptr, out.data());

    auto backward = [=, cols = std::move(cols), has_bias = bias.has_value()](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        const T* cp = direct ? px.data.data() : cols.data();
        if (pw.requires_grad) kernel::mm_nt(Cout, CKK, P, self.grad.data(), cp, pw.grad.data());
        if (has_bias) {
            auto& pb = *self.parents[2];
            if (pb.requires_grad)
                for (std::size_t o = 0; o < Cout; ++o)
                    for (std::size_t i = 0; i < P; ++i) pb.grad[o] += self.grad[o * P + i];
        }
        if (!px.requires_grad) return;
        if (direct) {
            kernel::mm_tn(CKK, P, Cout, pw.data.data(), self.grad.data(), px.grad.data());
            return;
        }
        std::vector<T> dcols(CKK * P, T(0));
        kernel::mm_tn(CKK, P, Cout, pw.data.data(), self.grad.data(), dcols.data());
        for (std::size_t c = 0; c < Cin; ++c)
            for (std::size_t ky = 0; ky < k; ++ky)
                for (std::size_t kx = 0; kx < k; ++kx) {
                    const T* row = dcols.data() + ((c * k + ky) * k + kx) * P;
                    for (std::size_t oy = 0; oy < Ho; ++oy) {
                        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                        for (std::size_t ox = 0; ox < Wo; ++ox) {
                            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                            px.grad[(c * H + static_cast<std::size_t>(iy)) * W + static_cast<std::size_t>(ix)] += row[oy * Wo + ox];
                        }
                    }
                }
    };
    if (bias) return detail::make_result<T>({Cout, Ho, Wo}, std::move(out), {&x, &w, &*bias}, std::move(backward));
    return detail::make_result<T>({Cout, Ho, Wo}, std::move(out), {&x, &w}, std::move(backward));
}

namespace detail {

/// Source taps for one axis of a half-pixel (align_corners=false) bilinear resize.
struct LinearTaps {
    std::vector<std::size_t> lo, hi;
    std::vector<double> frac;
};

inline LinearTaps linear_taps(std::size_t in, std::size_t out) {
    LinearTaps taps;
    taps.lo.resize(out);
    taps.hi.resize(out);
    taps.frac.resize(out);
    const double ratio = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
        double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
        if (src < 0) src = 0;
        auto i0 = static_cast<std::size_t>(src);
        if (i0 > in - 1) i0 = in - 1;
        taps.lo[o] = i0;
        taps.hi[o] = i0 + (i0 < in - 1 ? 1 : 0);
        taps.frac[o] = src - static_cast<double>(i0);
    }
    return taps;
}

}  // namespace detail

/// Bilinear resize of a (C,H,W) map with half-pixel centers (align_corners=false).
template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
    detail::require_rank(x, 3, "bilinear_resize");
    detail::require(out_h >= 1 && out_w >= 1, "bilinear_resize: output extents must be positive");
    const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
    if (H == out_h && W == out_w) return reshape(x, x.shape());
    auto ty = detail::linear_taps(H, out_h);
    auto tx = detail::linear_taps(W, out_w);
    std::vector<T> out(C * out_h * out_w);
    for (std::size_t c = 0; c < C; ++c) {
        const T* in = x.ptr() + c * H * W;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
            const T fy = static_cast<T>(ty.frac[oy]);
            const T* r0 = in + ty.lo[oy] * W;
            const T* r1 = in + ty.hi[oy] * W;
            for (std::size_t ox = 0; ox < out_w; ++ox) {
                const T fx = static_cast<T>(tx.frac[ox]);
                const T top = r0[tx.lo[ox]] * (T(1) - fx) + r0[tx.hi[ox]] * fx;
                const T bot = r1[tx.lo[ox]] * (T(1) - fx) + r1[tx.hi[ox]] * fx;
                out[(c * out_h + oy) * out_w + ox] = top * (T(1) - fy) + bot * fy;
            }
        }
    }
    return detail::make_result<T>({C, out_h, out_w}, std::move(out), {&x},
                                  [=, ty = std::move(ty), tx = std::move(tx)](Node<T>& self) {
                                      auto& p = *self.parents[0];
                                      for (std::size_t c = 0; c < C; ++c) {
                                          T* gin = p.grad.data() + c * H * W;
                                          for (std::size_t oy = 0; oy < out_h; ++oy) {
                                              const T fy = static_cast<T>(ty.frac[oy]);
                                              for (std::size_t ox = 0; ox < out_w; ++ox) {
                                                  const T fx = static_cast<T>(tx.frac[ox]);
                                                  const T g = self.grad[(c * out_h + oy) * out_w + ox];
                                                  gin[ty.lo[oy] * W + tx.lo[ox]] += g * (T(1) - fy) * (T(1) - fx);
                                                  gin[ty.lo[oy] * W + tx.hi[ox]] += g * (T(1) - fy) * fx;
                                                  gin[ty.hi[oy] * W + tx.lo[ox]] += g * fy * (T(1) - fx);
                                                  gin[ty.hi[oy] * W + tx.hi[ox]] += g * fy * fx;
                                              }
                                          }
                                      }
                                  });
}

/// Adaptive average pooling of a (C,H,W) map to (C,out_h,out_w); bins span
/// [floor(i*H/out), ceil((i+1)*H/out)).
template <typename T>
Tensor<T> adaptive_avg_pool(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
    detail::require_rank(x, 3, "adaptive_avg_pool");
    const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
    auto bounds = [](std::size_t i, std::size_t in, std::size_t out) {
        return std::pair{(i * in) / out, ((i + 1) * in + out - 1) / out};
    };
    std::vector<T> out(C * out_h * out_w);
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t oy = 0; oy < out_h; ++oy) {
            auto [y0, y1] = bounds(oy, H, out_h);
            for (std::size_t ox = 0; ox < out_w; ++ox) {
                auto [x0, x1] = bounds(ox, W, out_w);
                T acc = 0;
                for (std::size_t y = y0; y < y1; ++y)
                    for (std::size_t xx = x0; xx < x1; ++xx) acc += x[(c * H + y) * W + xx];
                out[(c * out_h + oy) * out_w + ox] = acc / static_cast<T>((y1 - y0) * (x1 - x0));
            }
        }
    return detail::make_result<T>({C, out_h, out_w}, std::move(out), {&x}, [=](Node<T>& self) {
        auto& p = *self.parents[0];
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t oy = 0; oy < out_h; ++oy) {
                auto [y0, y1] = bounds(oy, H, out_h);
                for (std::size_t ox = 0; ox < out_w; ++ox) {
                    auto [x0, x1] = bounds(ox, W, out_w);
                    const T g = self.grad[(c * out_h + oy) * out_w + ox] / static_cast<T>((y1 - y0) * (x1 - x0));
                    for (std::size_t y = y0; y < y1; ++y)
                        for (std::size_t xx = x0; xx < x1; ++xx) p.grad[(c * H + y) * W + xx] += g;
                }
            }
    });
}

// ---------------------------------------------------------------------------
// Attention

/// Boolean (rows, cols) attention permission; true = may attend.
struct AllowMask {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::uint8_t> allow;

    static AllowMask all(std::size_t r, std::size_t c) { return {r, c, std::vector<std::uint8_t>(r * c, 1)}; }
    bool at(std::size_t r, std::size_t c) const { return allow[r * cols + c] != 0; }
    bool row_blocked(std::size_t r) const {
        return std::none_of(allow.begin() + static_cast<std::ptrdiff_t>(r * cols),
                            allow.begin() + static_cast<std::ptrdiff_t>((r + 1) * cols), [](auto v) { return v != 0; });
    }
    bool operator==(const AllowMask&) const = default;
};

/// Replaces blocked logits with the sentinel; blocked positions receive no gradient.
template <typename T>
Tensor<T> apply_allow_mask(const Tensor<T>& scores, const AllowMask& mask) {
    detail::require_rank(scores, 2, "apply_allow_mask");
    detail::require(mask.rows == scores.dim(0) && mask.cols == scores.dim(1), "apply_allow_mask: mask shape mismatch");
    std::vector<T> out = scores.to_vector();
    for (std::size_t i = 0; i < out.size(); ++i)
        if (!mask.allow[i]) out[i] = static_cast<T>(kBlockedLogit);
    return detail::make_result<T>(scores.shape(), std::move(out), {&scores}, [allow = mask.allow](Node<T>& self) {
        auto& p = *self.parents[0];
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            if (allow[i]) p.grad[i] += self.grad[i];
    });
}

/// Single-head scaled dot-product attention, softmax(q k^T / sqrt(d)) v.
/// A mask row with no allowed column is rejected; callers apply their fallback first.
/// When `weights_out` is given it receives the (Nq,Nk) attention weights.
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const AllowMask* mask = nullptr,
                    std::vector<T>* weights_out = nullptr) {
    detail::require_rank(q, 2, "attention");
    detail::require_rank(k, 2, "attention");
    detail::require_rank(v, 2, "attention");
    detail::require(q.dim(1) == k.dim(1), "attention: query/key width mismatch");
    detail::require(k.dim(0) == v.dim(0), "attention: key/value count mismatch");
    if (mask) {
        for (std::size_t r = 0; r < mask->rows; ++r)
            if (mask->row_blocked(r))
                throw std::invalid_argument("attention: row " + std::to_string(r) + " has every key blocked");
    }
    const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(q.dim(1)));
    auto scores = scale(matmul_nt(q, k), inv_sqrt_d);
    if (mask) scores = apply_allow_mask(scores, *mask);
    auto weights = softmax_lastdim(scores);
    if (weights_out) *weights_out = weights.to_vector();
    return matmul(weights, v);
}

// ---------------------------------------------------------------------------
// Losses

/// Weighted softmax cross-entropy: sum_i w_i * ce_i / sum_i w_i.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<std::size_t>& targets, const std::vector<T>& weights) {
    detail::require_rank(logits, 2, "cross_entropy");
    const std::size_t N = logits.dim(0), C = logits.dim(1);
    detail::require(targets.size() == N && weights.size() == N, "cross_entropy: target/weight length mismatch");
    T wsum = 0;
    for (auto w : weights) wsum += w;
    detail::require(wsum > T(0), "cross_entropy: weights sum to zero");
    std::vector<T> probs(N * C);
    T loss = 0;
    for (std::size_t i = 0; i < N; ++i) {
        detail::require(targets[i] < C, "cross_entropy: target class out of range");
        const T* in = logits.ptr() + i * C;
        const T mx = *std::max_element(in, in + C);
        T total = 0;
        for (std::size_t j = 0; j < C; ++j) total += (probs[i * C + j] = std::exp(in[j] - mx));
        for (std::size_t j = 0; j < C; ++j) probs[i * C + j] /= total;
        loss += weights[i] * (mx + std::log(total) - in[targets[i]]);
    }
    loss /= wsum;
    return detail::make_result<T>({1}, {loss}, {&logits},
                                  [N, C, wsum, targets, weights, probs = std::move(probs)](Node<T>& self) {
                                      auto& p = *self.parents[0];
                                      const T g = self.grad[0] / wsum;
                                      for (std::size_t i = 0; i < N; ++i)
                                          for (std::size_t j = 0; j < C; ++j) {
                                              const T onehot = (j == targets[i]) ? T(1) : T(0);
                                              p.grad[i * C + j] += g * weights[i] * (probs[i * C + j] - onehot);
                                          }
                                  });
}

/// Elementwise binary cross-entropy on logits, stable form max(x,0) - x t + log(1 + e^{-|x|}).
template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const Tensor<T>& targets) {
    detail::require_same_shape(logits, targets, "bce_with_logits");
    std::vector<T> out(logits.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T x = logits[i];
        out[i] = std::max(x, T(0)) - x * targets[i] + std::log1p(std::exp(-std::abs(x)));
    }
    return detail::make_result<T>(logits.shape(), std::move(out), {&logits}, [t = targets](Node<T>& self) {
        auto& p = *self.parents[0];
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const T s = T(1) / (T(1) + std::exp(-p.data[i]));
            p.grad[i] += self.grad[i] * (s - t[i]);
        }
    });
}

/// Per-row dice loss on mask logits: 1 - (2 sum(p t) + 1) / (sum p + sum t + 1), p = sigmoid(x).
template <typename T>
Tensor<T> dice_loss_rows(const Tensor<T>& logits, const Tensor<T>& targets) {
    detail::require_same_shape(logits, targets, "dice_loss_rows");
    detail::require_rank(logits, 2, "dice_loss_rows");
    const std::size_t M = logits.dim(0), L = logits.dim(1);
    std::vector<T> probs(M * L), num(M), den(M), out(M);
    for (std::size_t i = 0; i < M; ++i) {
        T inter = 0, ps = 0, ts = 0;
        for (std::size_t j = 0; j < L; ++j) {
            const T p = T(1) / (T(1) + std::exp(-logits[i * L + j]));
            probs[i * L + j] = p;
            inter += p * targets[i * L + j];
            ps += p;
            ts += targets[i * L + j];
        }
        num[i] = T(2) * inter + T(1);
        den[i] = ps + ts + T(1);
        out[i] = T(1) - num[i] / den[i];
    }
    return detail::make_result<T>(
        {M}, std::move(out), {&logits},
        [M, L, t = targets, probs = std::move(probs), num = std::move(num), den = std::move(den)](Node<T>& self) {
            auto& p = *self.parents[0];
            for (std::size_t i = 0; i < M; ++i) {
                const T g = self.grad[i];
                for (std::size_t j = 0; j < L; ++j) {
                    const T pr = probs[i * L + j];
                    const T dloss_dp = -(T(2) * t[i * L + j] * den[i] - num[i]) / (den[i] * den[i]);
                    p.grad[i * L + j] += g * dloss_dp * pr * (T(1) - pr);
                }
            }
        });
}

}  // namespace fastinst
