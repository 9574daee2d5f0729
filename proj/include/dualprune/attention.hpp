#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "dualprune/error.hpp"
#include "dualprune/tensor.hpp"

namespace dualprune {

// Kernel exponents above this are refused rather than silently overflowed.
inline constexpr double kKernelLogLimit = 700.0;

struct KernelParams {
    std::size_t head_dim = 1;

    double sqrt_dim() const {
        if (head_dim < 1) {
            throw ConfigError("kernel: head dim must be at least 1");
        }
        return std::sqrt(static_cast<double>(head_dim));
    }
};

// log of the exponential kernel: x.y / sqrt(d). Kept in log space so callers
// decide when (and whether) to exponentiate.
inline double exp_kernel_log(std::span<const double> x, std::span<const double> y,
                             const KernelParams& params) {
    if (x.size() != y.size()) {
        throw DataError("kernel: vector length mismatch");
    }
    return dot(x, y) / params.sqrt_dim();
}

inline double guarded_exp(double log_value, const std::string& context) {
    if (log_value > kKernelLogLimit) {
        throw NumericError("kernel: exponent " + std::to_string(log_value) +
                           " exceeds the overflow guard (" + context + ")");
    }
    return std::exp(log_value);
}

// log of the kernel cosine in the induced feature space:
// log k(x,y) - (log k(x,x) + log k(y,y)) / 2.
inline double kernel_cosine_log(std::span<const double> x, std::span<const double> y,
                                const KernelParams& params) {
    return exp_kernel_log(x, y, params) -
           0.5 * (exp_kernel_log(x, x, params) + exp_kernel_log(y, y, params));
}

// The same quantity computed directly as a Gaussian RBF: -|x-y|^2 / (2 sqrt(d)).
inline double rbf_log(std::span<const double> x, std::span<const double> y,
                      const KernelParams& params) {
    if (x.size() != y.size()) {
        throw DataError("kernel: vector length mismatch");
    }
    return -squared_distance(x, y) / (2.0 * params.sqrt_dim());
}

namespace detail {

inline void require_finite(std::span<const double> v, const char* what) {
    if (!all_finite(v)) {
        throw DataError(std::string("attention: non-finite ") + what);
    }
}

inline void require_finite(const MatView& m, const char* what) {
    if (!all_finite({m.ptr, m.rows * m.cols})) {
        throw DataError(std::string("attention: non-finite ") + what);
    }
}

}  // namespace detail

// Max-shifted softmax weights over q.k_i / sqrt(d).
inline std::vector<double> softmax_weights(std::span<const double> q, const MatView& keys,
                                           const KernelParams& params) {
    if (keys.rows < 1) {
        throw DataError("attention: need at least one token");
    }
    detail::require_finite(q, "query");
    detail::require_finite(keys, "keys");

    std::vector<double> logits(keys.rows);
    for (std::size_t i = 0; i < keys.rows; ++i) {
        logits[i] = exp_kernel_log(q, keys.row(i), params);
    }
    const double shift = *std::max_element(logits.begin(), logits.end());
    double total = 0.0;
    for (double& l : logits) {
        l = std::exp(l - shift);
        total += l;
    }
    for (double& l : logits) {
        l /= total;
    }
    return logits;
}

inline std::vector<double> softmax_attention(std::span<const double> q, const MatView& keys,
                                             const MatView& values, const KernelParams& params) {
    if (keys.rows != values.rows) {
        throw DataError("attention: keys and values disagree on token count");
    }
    detail::require_finite(values, "values");
    const std::vector<double> weights = softmax_weights(q, keys, params);
    std::vector<double> out(values.cols, 0.0);
    for (std::size_t i = 0; i < values.rows; ++i) {
        const auto v = values.row(i);
        for (std::size_t j = 0; j < values.cols; ++j) {
            out[j] += weights[i] * v[j];
        }
    }
    return out;
}

// Unnormalized linear attention, primal form: sum_i (q.k_i) v_i.
inline std::vector<double> linear_attention_primal(std::span<const double> q, const MatView& keys,
                                                   const MatView& values) {
    if (keys.rows != values.rows) {
        throw DataError("attention: keys and values disagree on token count");
    }
    detail::require_finite(q, "query");
    detail::require_finite(keys, "keys");
    detail::require_finite(values, "values");

    std::vector<double> out(values.cols, 0.0);
    for (std::size_t i = 0; i < keys.rows; ++i) {
        const double alpha = dot(q, keys.row(i));
        const auto v = values.row(i);
        for (std::size_t j = 0; j < values.cols; ++j) {
            out[j] += alpha * v[j];
        }
    }
    return out;
}

// Accumulated dual weight of linear attention: sum_i k_i^T v_i, a [d, d_v]
// matrix where every summand has rank at most 1.
inline Tensor dual_weight_linear(const MatView& keys, const MatView& values) {
    if (keys.rows != values.rows) {
        throw DataError("attention: keys and values disagree on token count");
    }
    Tensor w({keys.cols, values.cols});
    for (std::size_t i = 0; i < keys.rows; ++i) {
        const auto k = keys.row(i);
        const auto v = values.row(i);
        for (std::size_t a = 0; a < keys.cols; ++a) {
            for (std::size_t b = 0; b < values.cols; ++b) {
                w(a, b) += k[a] * v[b];
            }
        }
    }
    return w;
}

// q * W for a [d, d_v] dual weight.
inline std::vector<double> apply_dual_weight(std::span<const double> q, const Tensor& w) {
    if (w.rank() != 2 || q.size() != w.dim(0)) {
        throw DataError("attention: query/dual-weight shape mismatch");
    }
    std::vector<double> out(w.dim(1), 0.0);
    for (std::size_t a = 0; a < w.dim(0); ++a) {
        for (std::size_t b = 0; b < w.dim(1); ++b) {
            out[b] += q[a] * w(a, b);
        }
    }
    return out;
}

}  // namespace dualprune
