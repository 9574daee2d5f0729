#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "dualprune/attention.hpp"
#include "dualprune/batch.hpp"
#include "dualprune/error.hpp"
#include "dualprune/gram.hpp"
#include "dualprune/metrics.hpp"
#include "dualprune/selection.hpp"

namespace dualprune {

// One evaluated method: how well its kept subset preserves the dual weight
// and the attention outputs seen by the text-token probe queries.
struct MethodEval {
    std::string method;
    std::size_t kept_count = 0;
    double kept_ratio = 0.0;
    std::vector<double> dual_weight_rel_error_per_head;
    double dual_weight_rel_error_mean = 0.0;
    double attn_output_cosine = 1.0;
    double attn_output_l2_rel = 0.0;
    double oracle_iou = 1.0;  // Jaccard overlap with the sequential oracle at equal K
    double wall_time_ms = 0.0;
    std::size_t duplication_cells = 0;
    std::vector<std::size_t> kept;
};

struct EvalReport {
    std::uint64_t seed = 0;
    std::vector<MethodEval> rows;
};

// Runs one named selection method under the given configuration. "none"
// keeps every image token regardless of budget.
inline SelectionResult run_method(const std::string& method, const TokenBatch& batch,
                                  const PruneConfig& cfg) {
    if (method == "none") {
        SelectionResult res;
        res.kept.resize(batch.n_img);
        std::iota(res.kept.begin(), res.kept.end(), std::size_t{0});
        res.s_max.assign(batch.n_img, 0.0);
        res.trace.push_back({batch.n_img, res.kept, std::vector<double>(batch.n_img, 0.0)});
        return res;
    }
    if (method == "random") {
        return random_select(batch.n_img, cfg.keep_count(batch.n_img), cfg.seed);
    }

    Scorer scorer = cfg.scorer;
    scorer.seed = cfg.seed;
    const ScoreVector scores = magnitude_scores(batch, scorer, cfg.rope_magnitude);
    if (method == "iwp" || method == "pcmmr") {
        return pc_mmr(scores, batch, cfg);
    }
    if (method == "topk") {
        return top_k(scores, cfg.keep_count(batch.n_img));
    }
    if (method == "mmr-additive") {
        return sequential_mmr_additive(scores, batch, cfg);
    }
    if (method == "oracle") {
        return sequential_mmr_multiplicative(scores, batch, cfg);
    }
    throw ConfigError("unknown method '" + method +
                      "' (expected iwp, topk, mmr-additive, random, oracle, or none)");
}

namespace detail {

// Gathered per-head key/value rows for a token subset, in index order.
struct GatheredHead {
    Tensor keys;    // [n, d]
    Tensor values;  // [n, d_v]
};

inline GatheredHead gather_head(const TokenBatch& batch, std::size_t head,
                                std::span<const std::size_t> tokens) {
    const MatView k = head_slice(batch.keys, head);
    const MatView v = head_slice(batch.values, head);
    GatheredHead out{Tensor({tokens.size(), k.cols}), Tensor({tokens.size(), v.cols})};
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const auto krow = k.row(tokens[i]);
        const auto vrow = v.row(tokens[i]);
        for (std::size_t j = 0; j < k.cols; ++j) {
            out.keys(i, j) = krow[j];
        }
        for (std::size_t j = 0; j < v.cols; ++j) {
            out.values(i, j) = vrow[j];
        }
    }
    return out;
}

}  // namespace detail

// Softmax-attention perturbation for the text-token probe queries: mean
// output cosine and mean relative L2 distance between the full token set and
// (kept image tokens + all text tokens).
inline void attention_perturbation(const TokenBatch& batch, std::span<const std::size_t> kept,
                                   double* mean_cosine, double* mean_l2_rel) {
    const KernelParams params{batch.head_dim()};
    std::vector<std::size_t> pruned_tokens(kept.begin(), kept.end());
    for (std::size_t t = batch.n_img; t < batch.tokens(); ++t) {
        pruned_tokens.push_back(t);
    }

    double cos_acc = 0.0;
    double l2_acc = 0.0;
    std::size_t probes = 0;
    for (std::size_t h = 0; h < batch.heads(); ++h) {
        const MatView q = head_slice(batch.queries, h);
        const MatView keys = head_slice(batch.keys, h);
        const MatView values = head_slice(batch.values, h);
        const detail::GatheredHead pruned = detail::gather_head(batch, h, pruned_tokens);
        for (std::size_t t = batch.n_img; t < batch.tokens(); ++t) {
            const auto probe = q.row(t);
            const std::vector<double> full = softmax_attention(probe, keys, values, params);
            const std::vector<double> reduced = softmax_attention(
                probe, mat_view(pruned.keys), mat_view(pruned.values), params);
            std::vector<double> diff(full.size());
            for (std::size_t j = 0; j < full.size(); ++j) {
                diff[j] = reduced[j] - full[j];
            }
            const double delta = norm(diff);
            cos_acc += delta == 0.0 ? 1.0 : cosine(full, reduced);
            const double base = norm(full);
            l2_acc += base == 0.0 ? (delta == 0.0 ? 0.0 : 1.0) : delta / base;
            ++probes;
        }
    }
    *mean_cosine = cos_acc / static_cast<double>(probes);
    *mean_l2_rel = l2_acc / static_cast<double>(probes);
}

inline double jaccard(std::span<const std::size_t> a, std::span<const std::size_t> b) {
    std::vector<std::size_t> sa(a.begin(), a.end());
    std::vector<std::size_t> sb(b.begin(), b.end());
    std::sort(sa.begin(), sa.end());
    std::sort(sb.begin(), sb.end());
    std::vector<std::size_t> inter;
    std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(inter));
    const std::size_t uni = sa.size() + sb.size() - inter.size();
    return uni == 0 ? 1.0 : static_cast<double>(inter.size()) / static_cast<double>(uni);
}

// Evaluates an already-chosen kept set. Only the indices matter, so
// selections produced outside this library are evaluable unchanged.
inline MethodEval evaluate_kept(const TokenBatch& batch, const std::string& method,
                                std::span<const std::size_t> kept, std::size_t duplication_cells,
                                const PruneConfig& cfg) {
    for (std::size_t idx : kept) {
        if (idx >= batch.n_img) {
            throw DataError("evaluate: kept index " + std::to_string(idx) +
                            " is not an image token");
        }
    }
    if (kept.empty()) {
        throw ConfigError("evaluate: kept set must contain at least one token");
    }

    MethodEval row;
    row.method = method;
    row.kept.assign(kept.begin(), kept.end());
    std::sort(row.kept.begin(), row.kept.end());
    if (std::adjacent_find(row.kept.begin(), row.kept.end()) != row.kept.end()) {
        throw DataError("evaluate: kept set contains duplicate indices");
    }
    row.kept_count = row.kept.size();
    row.kept_ratio = static_cast<double>(row.kept_count) / static_cast<double>(batch.n_img);
    row.duplication_cells = duplication_cells;

    row.dual_weight_rel_error_mean =
        dual_weight_relative_error(batch, row.kept, &row.dual_weight_rel_error_per_head);
    if (row.dual_weight_rel_error_mean < 0.0 || row.dual_weight_rel_error_mean > 1.0 + 1e-6) {
        throw DataError("evaluate: dual-weight relative error " +
                        std::to_string(row.dual_weight_rel_error_mean) + " out of [0, 1+1e-6]");
    }

    attention_perturbation(batch, row.kept, &row.attn_output_cosine, &row.attn_output_l2_rel);

    // Sequential oracle at the same keep count, same scoring configuration.
    PruneConfig oracle_cfg = cfg;
    oracle_cfg.rho = static_cast<double>(batch.n_img - row.kept_count) /
                     static_cast<double>(batch.n_img);
    if (oracle_cfg.keep_count(batch.n_img) != row.kept_count) {
        throw DataError("evaluate: oracle keep count failed to match the row's kept set");
    }
    const SelectionResult oracle = run_method("oracle", batch, oracle_cfg);
    row.oracle_iou = jaccard(row.kept, oracle.kept);
    return row;
}

// Runs and evaluates each named method in order.
inline EvalReport evaluate_methods(const TokenBatch& batch, const PruneConfig& cfg,
                                   const std::vector<std::string>& methods, bool timing = false) {
    EvalReport report;
    report.seed = cfg.seed;
    for (const std::string& method : methods) {
        const auto start = std::chrono::steady_clock::now();
        const SelectionResult sel = run_method(method, batch, cfg);
        const auto stop = std::chrono::steady_clock::now();
        MethodEval row = evaluate_kept(batch, method, sel.kept, sel.duplication_cells, cfg);
        if (timing) {
            row.wall_time_ms =
                std::chrono::duration<double, std::milli>(stop - start).count();
        }
        report.rows.push_back(std::move(row));
    }
    return report;
}

}  // namespace dualprune
