#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "dualprune/attention.hpp"
#include "dualprune/batch.hpp"
#include "dualprune/error.hpp"
#include "dualprune/rng.hpp"
#include "dualprune/rope.hpp"
#include "dualprune/tensor.hpp"

namespace dualprune {

// Per-token relevance formula. iwp is the dual-form metric k(q,k_i)|v_i|;
// the rest are the comparison scorers (alignment-only, update-norm-only,
// plain norms, and the random/uniform controls).
enum class ScorerKind { iwp, alignment, delta_w_norm, value_norm, key_norm, random_draw, uniform };

enum class QueryMode { mean_text, mean_image, last_text };

enum class SimilaritySpace { dual_weight, kernelized_key, key_cosine, value_cosine, hidden_cosine };

// Head aggregation for duplication cells: average the squared per-head
// similarities (default) or square the averaged similarity.
enum class HeadAggregation { mean_of_squares, square_of_mean };

struct Scorer {
    ScorerKind kind = ScorerKind::iwp;
    QueryMode query_mode = QueryMode::mean_text;
    std::uint64_t seed = 0;  // consumed by the random scorer only
};

struct ScoreVector {
    std::vector<double> scores;  // [n_img], min-max normalized to [0,1]
    Tensor raw_per_head;         // [H, n_img] pre-normalization values
    bool degenerate = false;     // all raw values equal; scores pinned to 0.5
};

struct SimilarityBlock {
    std::vector<std::size_t> rows;
    std::vector<std::size_t> cols;
    Tensor cells;  // [|rows|, |cols|], squared head-aggregated similarity in [0,1]
    bool zero_norm_flagged = false;
};

inline bool scorer_uses_query(ScorerKind kind) {
    return kind == ScorerKind::iwp || kind == ScorerKind::alignment;
}

namespace detail {

inline std::vector<double> aggregate_rows(const MatView& q, QueryMode mode, std::size_t n_img,
                                          std::size_t n_text) {
    const std::size_t n = n_img + n_text;
    std::vector<double> out(q.cols, 0.0);
    switch (mode) {
        case QueryMode::mean_text: {
            if (n_text == 0) {
                throw ConfigError("query aggregation: mean_text requires text tokens");
            }
            for (std::size_t i = n_img; i < n; ++i) {
                const auto row = q.row(i);
                for (std::size_t j = 0; j < q.cols; ++j) {
                    out[j] += row[j];
                }
            }
            for (double& v : out) {
                v /= static_cast<double>(n_text);
            }
            return out;
        }
        case QueryMode::mean_image: {
            if (n_img == 0) {
                throw ConfigError("query aggregation: mean_image requires image tokens");
            }
            for (std::size_t i = 0; i < n_img; ++i) {
                const auto row = q.row(i);
                for (std::size_t j = 0; j < q.cols; ++j) {
                    out[j] += row[j];
                }
            }
            for (double& v : out) {
                v /= static_cast<double>(n_img);
            }
            return out;
        }
        case QueryMode::last_text: {
            if (n_text == 0) {
                throw ConfigError("query aggregation: last_text requires text tokens");
            }
            const auto row = q.row(n - 1);
            out.assign(row.begin(), row.end());
            return out;
        }
    }
    throw ConfigError("query aggregation: unknown mode");
}

// Sentinel for log(0) terms (zero-norm values): the exponentiated raw score
// is exactly 0.
inline constexpr double kLogZero = -std::numeric_limits<double>::infinity();

}  // namespace detail

// Aggregated query of one head, computed on the rows as stored in the batch.
inline std::vector<double> aggregate_query(const TokenBatch& batch, QueryMode mode,
                                           std::size_t head) {
    return detail::aggregate_rows(head_slice(batch.queries, head), mode, batch.n_img,
                                  batch.n_text);
}

// Information-magnitude scores over the image tokens: per-head raw values,
// head mean, then min-max normalization to [0,1]. Kernel-based scorers are
// evaluated in log space with one global max shift; the shift is a common
// positive factor, so the normalized result is exactly shift-free.
inline ScoreVector magnitude_scores(const TokenBatch& batch, const Scorer& scorer,
                                    const RopeParams& rope) {
    const std::size_t h_count = batch.heads();
    const std::size_t n_img = batch.n_img;
    const KernelParams params{batch.head_dim()};

    ScoreVector result;
    result.raw_per_head = Tensor({h_count, n_img});

    const bool log_space = scorer.kind == ScorerKind::iwp ||
                           scorer.kind == ScorerKind::alignment ||
                           scorer.kind == ScorerKind::delta_w_norm;

    if (log_space) {
        Tensor logs({h_count, n_img});
        double shift = detail::kLogZero;
        for (std::size_t h = 0; h < h_count; ++h) {
            const MatView stored_keys = head_slice(batch.keys, h);
            Tensor rotated_keys;
            MatView keys = stored_keys;
            if (rope.rotate) {
                rotated_keys = apply_rope(stored_keys, batch.positions, rope);
                keys = mat_view(rotated_keys);
            }
            std::vector<double> q;
            if (scorer_uses_query(scorer.kind)) {
                if (rope.rotate) {
                    // Rotate the query rows at their own positions, then aggregate.
                    const Tensor rotated_q =
                        apply_rope(head_slice(batch.queries, h), batch.positions, rope);
                    q = detail::aggregate_rows(mat_view(rotated_q), scorer.query_mode,
                                               batch.n_img, batch.n_text);
                } else {
                    q = aggregate_query(batch, scorer.query_mode, h);
                }
            }
            const MatView values = head_slice(batch.values, h);
            for (std::size_t i = 0; i < n_img; ++i) {
                double log_raw = 0.0;
                switch (scorer.kind) {
                    case ScorerKind::iwp: {
                        const double vn = norm(values.row(i));
                        log_raw = vn == 0.0 ? detail::kLogZero
                                            : exp_kernel_log(q, keys.row(i), params) + std::log(vn);
                        break;
                    }
                    case ScorerKind::alignment:
                        log_raw = exp_kernel_log(q, keys.row(i), params);
                        break;
                    case ScorerKind::delta_w_norm: {
                        const double vn = norm(values.row(i));
                        log_raw = vn == 0.0
                                      ? detail::kLogZero
                                      : 0.5 * exp_kernel_log(keys.row(i), keys.row(i), params) +
                                            std::log(vn);
                        break;
                    }
                    default:
                        break;
                }
                logs(h, i) = log_raw;
                shift = std::max(shift, log_raw);
            }
        }
        if (shift == detail::kLogZero) {
            shift = 0.0;  // every raw value is exactly zero
        }
        for (std::size_t h = 0; h < h_count; ++h) {
            for (std::size_t i = 0; i < n_img; ++i) {
                result.raw_per_head(h, i) =
                    logs(h, i) == detail::kLogZero ? 0.0 : std::exp(logs(h, i) - shift);
            }
        }
    } else {
        std::vector<double> random_draws;
        if (scorer.kind == ScorerKind::random_draw) {
            Rng rng(scorer.seed);
            random_draws.resize(n_img);
            for (double& v : random_draws) {
                v = rng.uniform();
            }
        }
        for (std::size_t h = 0; h < h_count; ++h) {
            const MatView keys = head_slice(batch.keys, h);
            const MatView values = head_slice(batch.values, h);
            for (std::size_t i = 0; i < n_img; ++i) {
                switch (scorer.kind) {
                    case ScorerKind::value_norm:
                        result.raw_per_head(h, i) = norm(values.row(i));
                        break;
                    case ScorerKind::key_norm:
                        result.raw_per_head(h, i) = norm(keys.row(i));
                        break;
                    case ScorerKind::random_draw:
                        result.raw_per_head(h, i) = random_draws[i];
                        break;
                    case ScorerKind::uniform:
                        result.raw_per_head(h, i) = 1.0;
                        break;
                    default:
                        throw ConfigError("magnitude: unknown scorer kind");
                }
            }
        }
    }

    // Head mean, then min-max over image tokens.
    std::vector<double> mean(n_img, 0.0);
    for (std::size_t h = 0; h < h_count; ++h) {
        for (std::size_t i = 0; i < n_img; ++i) {
            mean[i] += result.raw_per_head(h, i);
        }
    }
    for (double& v : mean) {
        v /= static_cast<double>(h_count);
    }
    const auto [lo_it, hi_it] = std::minmax_element(mean.begin(), mean.end());
    const double lo = *lo_it;
    const double hi = *hi_it;
    result.scores.resize(n_img);
    if (hi == lo) {
        result.degenerate = true;
        std::fill(result.scores.begin(), result.scores.end(), 0.5);
    } else {
        for (std::size_t i = 0; i < n_img; ++i) {
            result.scores[i] = (mean[i] - lo) / (hi - lo);
        }
    }
    return result;
}

// Squared, head-aggregated duplication similarities between two image-token
// index sets. The dual_weight space factorizes into the value cosine times
// the kernel cosine, with the latter evaluated as a Gaussian RBF of the
// (by default RoPE-rotated) keys.
inline SimilarityBlock duplication_block(const TokenBatch& batch,
                                         std::span<const std::size_t> rows,
                                         std::span<const std::size_t> cols, SimilaritySpace space,
                                         const RopeParams& rope,
                                         HeadAggregation agg = HeadAggregation::mean_of_squares) {
    for (std::size_t idx : rows) {
        if (idx >= batch.n_img) {
            throw DataError("duplication: row index " + std::to_string(idx) +
                            " is not an image token");
        }
    }
    for (std::size_t idx : cols) {
        if (idx >= batch.n_img) {
            throw DataError("duplication: column index " + std::to_string(idx) +
                            " is not an image token");
        }
    }

    SimilarityBlock block;
    block.rows.assign(rows.begin(), rows.end());
    block.cols.assign(cols.begin(), cols.end());
    block.cells = Tensor({rows.size(), cols.size()});

    if (space == SimilaritySpace::hidden_cosine) {
        if (!batch.hidden.has_value()) {
            throw ConfigError("duplication: hidden_cosine requires the batch's hidden tensor");
        }
        const MatView hid = mat_view(*batch.hidden);
        for (std::size_t i = 0; i < rows.size(); ++i) {
            for (std::size_t j = 0; j < cols.size(); ++j) {
                const double s =
                    cosine(hid.row(rows[i]), hid.row(cols[j]), &block.zero_norm_flagged);
                block.cells(i, j) = s * s;
            }
        }
        return block;
    }

    const std::size_t h_count = batch.heads();
    const KernelParams params{batch.head_dim()};
    const bool uses_keys = space != SimilaritySpace::value_cosine;

    Tensor sums({rows.size(), cols.size()});
    for (std::size_t h = 0; h < h_count; ++h) {
        const MatView stored_keys = head_slice(batch.keys, h);
        Tensor rotated_keys;
        MatView keys = stored_keys;
        if (uses_keys && rope.rotate) {
            rotated_keys = apply_rope(stored_keys, batch.positions, rope);
            keys = mat_view(rotated_keys);
        }
        const MatView values = head_slice(batch.values, h);
        for (std::size_t i = 0; i < rows.size(); ++i) {
            for (std::size_t j = 0; j < cols.size(); ++j) {
                double s = 0.0;
                switch (space) {
                    case SimilaritySpace::dual_weight: {
                        const double value_cos = cosine(values.row(rows[i]), values.row(cols[j]),
                                                        &block.zero_norm_flagged);
                        const double kernel_cos =
                            std::exp(rbf_log(keys.row(rows[i]), keys.row(cols[j]), params));
                        s = value_cos * kernel_cos;
                        break;
                    }
                    case SimilaritySpace::kernelized_key:
                        s = std::exp(rbf_log(keys.row(rows[i]), keys.row(cols[j]), params));
                        break;
                    case SimilaritySpace::key_cosine:
                        s = cosine(keys.row(rows[i]), keys.row(cols[j]),
                                   &block.zero_norm_flagged);
                        break;
                    case SimilaritySpace::value_cosine:
                        s = cosine(values.row(rows[i]), values.row(cols[j]),
                                   &block.zero_norm_flagged);
                        break;
                    case SimilaritySpace::hidden_cosine:
                        break;  // handled above
                }
                sums(i, j) += agg == HeadAggregation::mean_of_squares ? s * s : s;
            }
        }
    }
    const double inv_h = 1.0 / static_cast<double>(h_count);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t j = 0; j < cols.size(); ++j) {
            const double m = sums(i, j) * inv_h;
            block.cells(i, j) = agg == HeadAggregation::mean_of_squares ? m : m * m;
        }
    }
    return block;
}

}  // namespace dualprune
