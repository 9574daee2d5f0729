#pragma once

#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "dualprune/attention.hpp"
#include "dualprune/batch.hpp"
#include "dualprune/error.hpp"
#include "dualprune/tensor.hpp"

namespace dualprune {

// Pairwise structure of the rank-1 dual updates for two index sets, kept in
// two factors: value_gram[i,j] = v_i.v_j and log_key_kernel[i,j] =
// k_i.k_j / sqrt(d). Their product (after exponentiation) is the Frobenius
// inner product <dW_i, dW_j> without ever materializing a feature map.
struct DualGram {
    std::vector<std::size_t> rows;
    std::vector<std::size_t> cols;
    Tensor value_gram;      // [|rows|, |cols|]
    Tensor log_key_kernel;  // [|rows|, |cols|]

    // <dW_rows[i], dW_cols[j]>_F, guarded against exponent overflow.
    double inner(std::size_t i, std::size_t j) const {
        const double log_k = log_key_kernel(i, j);
        if (log_k > kKernelLogLimit) {
            throw NumericError("gram: kernel exponent overflow at token pair (" +
                               std::to_string(rows[i]) + ", " + std::to_string(cols[j]) +
                               "): log value " + std::to_string(log_k));
        }
        return value_gram(i, j) * std::exp(log_k);
    }
};

inline DualGram gram(const MatView& keys, const MatView& values,
                     std::span<const std::size_t> sel_a, std::span<const std::size_t> sel_b,
                     const KernelParams& params) {
    for (std::size_t idx : sel_a) {
        if (idx >= keys.rows) {
            throw DataError("gram: row index " + std::to_string(idx) + " out of range");
        }
    }
    for (std::size_t idx : sel_b) {
        if (idx >= keys.rows) {
            throw DataError("gram: column index " + std::to_string(idx) + " out of range");
        }
    }
    DualGram g;
    g.rows.assign(sel_a.begin(), sel_a.end());
    g.cols.assign(sel_b.begin(), sel_b.end());
    g.value_gram = Tensor({sel_a.size(), sel_b.size()});
    g.log_key_kernel = Tensor({sel_a.size(), sel_b.size()});
    for (std::size_t i = 0; i < sel_a.size(); ++i) {
        for (std::size_t j = 0; j < sel_b.size(); ++j) {
            g.value_gram(i, j) = dot(values.row(sel_a[i]), values.row(sel_b[j]));
            g.log_key_kernel(i, j) = exp_kernel_log(keys.row(sel_a[i]), keys.row(sel_b[j]), params);
        }
    }
    return g;
}

namespace detail {

// |W_A|^2 (or <W_A, W_A> for A == B) summed cell-by-cell in fixed row-major
// order so results are independent of caller parallelism.
inline double gram_sum(const DualGram& g) {
    double acc = 0.0;
    for (std::size_t i = 0; i < g.rows.size(); ++i) {
        for (std::size_t j = 0; j < g.cols.size(); ++j) {
            acc += g.inner(i, j);
        }
    }
    return acc;
}

}  // namespace detail

// |W_S - W_N|_F / |W_N|_F for one head, where S = kept and N = all. Both
// norms expand through the Gram identity; since kept is a subset, the
// difference is exactly the removed tokens' accumulated update.
inline double dual_weight_relative_error_head(std::span<const std::size_t> kept,
                                              std::span<const std::size_t> all,
                                              const MatView& keys, const MatView& values,
                                              const KernelParams& params) {
    if (all.empty()) {
        throw DataError("dual-weight error: reference set is empty");
    }
    std::vector<bool> is_kept(keys.rows, false);
    for (std::size_t idx : kept) {
        bool found = false;
        for (std::size_t a : all) {
            if (a == idx) {
                found = true;
                break;
            }
        }
        if (!found) {
            throw DataError("dual-weight error: kept index " + std::to_string(idx) +
                            " is not in the reference set");
        }
        is_kept[idx] = true;
    }
    std::vector<std::size_t> removed;
    removed.reserve(all.size());
    for (std::size_t idx : all) {
        if (!is_kept[idx]) {
            removed.push_back(idx);
        }
    }

    const double denom_sq = detail::gram_sum(gram(keys, values, all, all, params));
    if (denom_sq <= 0.0) {
        throw DataError("dual-weight error: reference dual weight has zero norm");
    }
    double num_sq = detail::gram_sum(gram(keys, values, removed, removed, params));
    if (num_sq < 0.0) {
        // Cancellation in the double sum can leave a tiny negative radicand.
        if (num_sq > -1e-9 * denom_sq) {
            num_sq = 0.0;
        } else {
            throw NumericError("dual-weight error: radicand " + std::to_string(num_sq) +
                               " is negative beyond the cancellation tolerance");
        }
    }
    return std::sqrt(num_sq / denom_sq);
}

// Head-averaged relative error over the batch's image tokens.
inline double dual_weight_relative_error(const TokenBatch& batch,
                                         std::span<const std::size_t> kept,
                                         std::vector<double>* per_head = nullptr) {
    std::vector<std::size_t> all(batch.n_img);
    std::iota(all.begin(), all.end(), std::size_t{0});
    const KernelParams params{batch.head_dim()};

    double total = 0.0;
    if (per_head != nullptr) {
        per_head->clear();
    }
    for (std::size_t h = 0; h < batch.heads(); ++h) {
        const double err = dual_weight_relative_error_head(kept, all, head_slice(batch.keys, h),
                                                           head_slice(batch.values, h), params);
        if (per_head != nullptr) {
            per_head->push_back(err);
        }
        total += err;
    }
    return total / static_cast<double>(batch.heads());
}

}  // namespace dualprune
