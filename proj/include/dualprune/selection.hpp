#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "dualprune/batch.hpp"
#include "dualprune/error.hpp"
#include "dualprune/metrics.hpp"
#include "dualprune/rng.hpp"
#include "dualprune/rope.hpp"

namespace dualprune {

// Penalty applied to a candidate's normalized score P given its accumulated
// max duplication s:
//   power:       P * (1 - s)^lambda          (lambda >= 0, default)
//   exponential: P * exp(-lambda * s)        (lambda >= 0)
//   additive:    lambda * P - (1 - lambda) * s   (lambda in [0, 1])
enum class PenaltyForm { power, exponential, additive };

struct PruneConfig {
    double rho = 0.889;     // fraction of image tokens removed
    double lambda = 5.0;    // duplication penalty strength
    std::size_t b0 = 2;     // initial chunk size
    std::size_t growth = 2; // chunk growth factor g
    PenaltyForm penalty = PenaltyForm::power;
    Scorer scorer;          // kind + query mode + seed for the random scorer
    SimilaritySpace space = SimilaritySpace::dual_weight;
    HeadAggregation head_agg = HeadAggregation::mean_of_squares;
    RopeParams rope_magnitude{10000.0, false};
    RopeParams rope_duplication{10000.0, true};
    int layer = 4;
    std::uint64_t seed = 0;

    std::size_t keep_count(std::size_t n_img) const {
        if (!(rho >= 0.0 && rho <= 1.0)) {
            throw ConfigError("prune: reduction ratio must lie in [0, 1], got " +
                              std::to_string(rho));
        }
        // Round half up.
        const std::size_t k = static_cast<std::size_t>(
            std::floor((1.0 - rho) * static_cast<double>(n_img) + 0.5));
        if (k < 1 || k > n_img) {
            throw ConfigError("prune: keep count " + std::to_string(k) +
                              " out of range [1, " + std::to_string(n_img) + "]");
        }
        return k;
    }

    void validate() const {
        if (lambda < 0.0) {
            throw ConfigError("prune: lambda must be non-negative");
        }
        if (penalty == PenaltyForm::additive && lambda > 1.0) {
            throw ConfigError("prune: additive penalty requires lambda in [0, 1], got " +
                              std::to_string(lambda));
        }
        if (b0 < 1) {
            throw ConfigError("prune: initial chunk size must be at least 1");
        }
        if (growth < 1) {
            throw ConfigError("prune: growth factor must be at least 1");
        }
    }
};

inline double penalty_value(PenaltyForm form, double lambda, double score, double s_max) {
    switch (form) {
        case PenaltyForm::power:
            return score * std::pow(1.0 - s_max, lambda);
        case PenaltyForm::exponential:
            return score * std::exp(-lambda * s_max);
        case PenaltyForm::additive:
            return lambda * score - (1.0 - lambda) * s_max;
    }
    throw ConfigError("prune: unknown penalty form");
}

struct ChunkTrace {
    std::size_t chunk_size = 0;
    std::vector<std::size_t> selected;   // in pick order within the chunk
    std::vector<double> penalized;       // scores at pick time
};

struct SelectionResult {
    std::vector<std::size_t> kept;  // sorted ascending, exactly K entries
    std::vector<ChunkTrace> trace;
    std::vector<double> s_max;      // [n_img] accumulated max duplication
    std::size_t duplication_cells = 0;
};

namespace detail {

// Candidates ranked by penalized score, ties broken by lower token index.
inline void rank_candidates(std::vector<std::size_t>& candidates,
                            const std::vector<double>& penalized) {
    std::sort(candidates.begin(), candidates.end(), [&](std::size_t a, std::size_t b) {
        if (penalized[a] != penalized[b]) {
            return penalized[a] > penalized[b];
        }
        return a < b;
    });
}

inline void finalize(SelectionResult& res) {
    std::sort(res.kept.begin(), res.kept.end());
}

inline void require_scores(const ScoreVector& scores, std::size_t n_img) {
    if (scores.scores.size() != n_img) {
        throw DataError("prune: score vector length " + std::to_string(scores.scores.size()) +
                        " does not match image-token count " + std::to_string(n_img));
    }
}

}  // namespace detail

// Progressive Chunked MMR. Each round moves the L_new = min(b, K - |C|)
// candidates with the highest penalized scores into the kept set, measures
// duplication only between that new chunk and the remaining candidates,
// folds it into each candidate's running max, re-penalizes, and grows the
// chunk size b <- b * g. Evaluates at most K * N_img duplication cells.
inline SelectionResult pc_mmr(const ScoreVector& scores, const TokenBatch& batch,
                              const PruneConfig& cfg) {
    cfg.validate();
    detail::require_scores(scores, batch.n_img);
    const std::size_t n_img = batch.n_img;
    const std::size_t k = cfg.keep_count(n_img);

    std::vector<std::size_t> candidates(n_img);
    std::iota(candidates.begin(), candidates.end(), std::size_t{0});

    SelectionResult res;
    res.s_max.assign(n_img, 0.0);
    std::vector<double> penalized(n_img);
    for (std::size_t i = 0; i < n_img; ++i) {
        penalized[i] = penalty_value(cfg.penalty, cfg.lambda, scores.scores[i], 0.0);
    }

    std::size_t b = cfg.b0;
    while (res.kept.size() < k) {
        const std::size_t l_new = std::min(b, k - res.kept.size());
        detail::rank_candidates(candidates, penalized);

        ChunkTrace trace;
        trace.chunk_size = l_new;
        trace.selected.assign(candidates.begin(), candidates.begin() + l_new);
        for (std::size_t idx : trace.selected) {
            trace.penalized.push_back(penalized[idx]);
        }
        res.kept.insert(res.kept.end(), trace.selected.begin(), trace.selected.end());
        candidates.erase(candidates.begin(), candidates.begin() + l_new);
        res.trace.push_back(std::move(trace));

        if (res.kept.size() == k || candidates.empty()) {
            break;
        }

        const SimilarityBlock block =
            duplication_block(batch, res.trace.back().selected, candidates, cfg.space,
                              cfg.rope_duplication, cfg.head_agg);
        res.duplication_cells += res.trace.back().selected.size() * candidates.size();
        for (std::size_t j = 0; j < candidates.size(); ++j) {
            double col_max = 0.0;
            for (std::size_t i = 0; i < block.rows.size(); ++i) {
                col_max = std::max(col_max, block.cells(i, j));
            }
            const std::size_t u = candidates[j];
            res.s_max[u] = std::max(res.s_max[u], col_max);
            penalized[u] = penalty_value(cfg.penalty, cfg.lambda, scores.scores[u], res.s_max[u]);
        }

        b = (b > k / cfg.growth) ? k : b * cfg.growth;
        b = std::max<std::size_t>(b, 1);
    }

    detail::finalize(res);
    return res;
}

// One-token-at-a-time greedy with the same multiplicative penalty rule;
// the O(K * N) sequential reference that PC-MMR must reproduce at
// b0 = 1, g = 1.
inline SelectionResult sequential_mmr_multiplicative(const ScoreVector& scores,
                                                     const TokenBatch& batch,
                                                     const PruneConfig& cfg) {
    cfg.validate();
    detail::require_scores(scores, batch.n_img);
    const std::size_t n_img = batch.n_img;
    const std::size_t k = cfg.keep_count(n_img);

    std::vector<std::size_t> candidates(n_img);
    std::iota(candidates.begin(), candidates.end(), std::size_t{0});

    SelectionResult res;
    res.s_max.assign(n_img, 0.0);
    std::vector<double> penalized(n_img);
    for (std::size_t i = 0; i < n_img; ++i) {
        penalized[i] = penalty_value(cfg.penalty, cfg.lambda, scores.scores[i], 0.0);
    }

    while (res.kept.size() < k) {
        std::size_t best_pos = 0;
        for (std::size_t j = 1; j < candidates.size(); ++j) {
            if (penalized[candidates[j]] > penalized[candidates[best_pos]]) {
                best_pos = j;
            }
        }
        const std::size_t picked = candidates[best_pos];
        res.trace.push_back({1, {picked}, {penalized[picked]}});
        res.kept.push_back(picked);
        candidates.erase(candidates.begin() + best_pos);
        if (res.kept.size() == k || candidates.empty()) {
            break;
        }

        const std::size_t row[1] = {picked};
        const SimilarityBlock block = duplication_block(batch, row, candidates, cfg.space,
                                                        cfg.rope_duplication, cfg.head_agg);
        res.duplication_cells += candidates.size();
        for (std::size_t j = 0; j < candidates.size(); ++j) {
            const std::size_t u = candidates[j];
            res.s_max[u] = std::max(res.s_max[u], block.cells(0, j));
            penalized[u] = penalty_value(cfg.penalty, cfg.lambda, scores.scores[u], res.s_max[u]);
        }
    }

    detail::finalize(res);
    return res;
}

// Classic additive MMR: i* = argmax [lambda * P_i - (1 - lambda) * max_j S_ij]
// over the remaining candidates. Here lambda is the convex-combination
// weight and must lie in [0, 1]; the first pick is the score argmax.
inline SelectionResult sequential_mmr_additive(const ScoreVector& scores, const TokenBatch& batch,
                                               const PruneConfig& cfg) {
    if (cfg.lambda < 0.0 || cfg.lambda > 1.0) {
        throw ConfigError("mmr-additive: lambda must lie in [0, 1], got " +
                          std::to_string(cfg.lambda));
    }
    detail::require_scores(scores, batch.n_img);
    const std::size_t n_img = batch.n_img;
    const std::size_t k = cfg.keep_count(n_img);

    std::vector<std::size_t> candidates(n_img);
    std::iota(candidates.begin(), candidates.end(), std::size_t{0});

    SelectionResult res;
    res.s_max.assign(n_img, 0.0);

    bool first = true;
    while (res.kept.size() < k) {
        std::size_t best_pos = 0;
        double best_score = 0.0;
        for (std::size_t j = 0; j < candidates.size(); ++j) {
            const std::size_t u = candidates[j];
            const double value = first ? scores.scores[u]
                                       : cfg.lambda * scores.scores[u] -
                                             (1.0 - cfg.lambda) * res.s_max[u];
            if (j == 0 || value > best_score) {
                best_pos = j;
                best_score = value;
            }
        }
        const std::size_t picked = candidates[best_pos];
        res.trace.push_back({1, {picked}, {best_score}});
        res.kept.push_back(picked);
        candidates.erase(candidates.begin() + best_pos);
        first = false;
        if (res.kept.size() == k || candidates.empty()) {
            break;
        }

        const std::size_t row[1] = {picked};
        const SimilarityBlock block = duplication_block(batch, row, candidates, cfg.space,
                                                        cfg.rope_duplication, cfg.head_agg);
        res.duplication_cells += candidates.size();
        for (std::size_t j = 0; j < candidates.size(); ++j) {
            const std::size_t u = candidates[j];
            res.s_max[u] = std::max(res.s_max[u], block.cells(0, j));
        }
    }

    detail::finalize(res);
    return res;
}

// Pure relevance: the K highest scores, ties broken by lower index.
inline SelectionResult top_k(const ScoreVector& scores, std::size_t k) {
    const std::size_t n_img = scores.scores.size();
    if (k < 1 || k > n_img) {
        throw ConfigError("top-k: keep count " + std::to_string(k) + " out of range [1, " +
                          std::to_string(n_img) + "]");
    }
    std::vector<std::size_t> order(n_img);
    std::iota(order.begin(), order.end(), std::size_t{0});
    detail::rank_candidates(order, scores.scores);

    SelectionResult res;
    res.s_max.assign(n_img, 0.0);
    ChunkTrace trace;
    trace.chunk_size = k;
    trace.selected.assign(order.begin(), order.begin() + k);
    for (std::size_t idx : trace.selected) {
        trace.penalized.push_back(scores.scores[idx]);
    }
    res.kept = trace.selected;
    res.trace.push_back(std::move(trace));
    detail::finalize(res);
    return res;
}

// Uniform K-subset via partial Fisher-Yates; deterministic per seed.
inline SelectionResult random_select(std::size_t n_img, std::size_t k, std::uint64_t seed) {
    if (k < 1 || k > n_img) {
        throw ConfigError("random: keep count " + std::to_string(k) + " out of range [1, " +
                          std::to_string(n_img) + "]");
    }
    std::vector<std::size_t> pool(n_img);
    std::iota(pool.begin(), pool.end(), std::size_t{0});
    Rng rng(seed);
    for (std::size_t i = 0; i < k; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.uniform_below(n_img - i));
        std::swap(pool[i], pool[j]);
    }

    SelectionResult res;
    res.s_max.assign(n_img, 0.0);
    ChunkTrace trace;
    trace.chunk_size = k;
    trace.selected.assign(pool.begin(), pool.begin() + k);
    trace.penalized.assign(k, 0.0);
    res.kept = trace.selected;
    res.trace.push_back(std::move(trace));
    detail::finalize(res);
    return res;
}

// --- config name tables (shared by the CLI and report emission) -------------

inline std::string to_string(ScorerKind kind) {
    switch (kind) {
        case ScorerKind::iwp: return "iwp";
        case ScorerKind::alignment: return "alignment";
        case ScorerKind::delta_w_norm: return "delta_w_norm";
        case ScorerKind::value_norm: return "value_norm";
        case ScorerKind::key_norm: return "key_norm";
        case ScorerKind::random_draw: return "random";
        case ScorerKind::uniform: return "uniform";
    }
    return "?";
}

inline ScorerKind parse_scorer_kind(const std::string& name) {
    if (name == "iwp") return ScorerKind::iwp;
    if (name == "alignment") return ScorerKind::alignment;
    if (name == "delta_w_norm") return ScorerKind::delta_w_norm;
    if (name == "value_norm") return ScorerKind::value_norm;
    if (name == "key_norm") return ScorerKind::key_norm;
    if (name == "random") return ScorerKind::random_draw;
    if (name == "uniform") return ScorerKind::uniform;
    throw ConfigError("unknown scorer '" + name + "'");
}

inline std::string to_string(QueryMode mode) {
    switch (mode) {
        case QueryMode::mean_text: return "mean_text";
        case QueryMode::mean_image: return "mean_image";
        case QueryMode::last_text: return "last_text";
    }
    return "?";
}

inline QueryMode parse_query_mode(const std::string& name) {
    if (name == "mean_text") return QueryMode::mean_text;
    if (name == "mean_image") return QueryMode::mean_image;
    if (name == "last_text") return QueryMode::last_text;
    throw ConfigError("unknown query mode '" + name + "'");
}

inline std::string to_string(SimilaritySpace space) {
    switch (space) {
        case SimilaritySpace::dual_weight: return "dual_weight";
        case SimilaritySpace::kernelized_key: return "kernelized_key";
        case SimilaritySpace::key_cosine: return "key_cosine";
        case SimilaritySpace::value_cosine: return "value_cosine";
        case SimilaritySpace::hidden_cosine: return "hidden_cosine";
    }
    return "?";
}

inline SimilaritySpace parse_similarity_space(const std::string& name) {
    if (name == "dual_weight") return SimilaritySpace::dual_weight;
    if (name == "kernelized_key") return SimilaritySpace::kernelized_key;
    if (name == "key_cosine") return SimilaritySpace::key_cosine;
    if (name == "value_cosine") return SimilaritySpace::value_cosine;
    if (name == "hidden_cosine") return SimilaritySpace::hidden_cosine;
    throw ConfigError("unknown similarity space '" + name + "'");
}

inline std::string to_string(PenaltyForm form) {
    switch (form) {
        case PenaltyForm::power: return "power";
        case PenaltyForm::exponential: return "exponential";
        case PenaltyForm::additive: return "additive";
    }
    return "?";
}

inline PenaltyForm parse_penalty_form(const std::string& name) {
    if (name == "power") return PenaltyForm::power;
    if (name == "exponential") return PenaltyForm::exponential;
    if (name == "additive") return PenaltyForm::additive;
    throw ConfigError("unknown penalty form '" + name + "'");
}

inline std::string to_string(HeadAggregation agg) {
    return agg == HeadAggregation::mean_of_squares ? "mean_of_squares" : "square_of_mean";
}

inline HeadAggregation parse_head_aggregation(const std::string& name) {
    if (name == "mean_of_squares") return HeadAggregation::mean_of_squares;
    if (name == "square_of_mean") return HeadAggregation::square_of_mean;
    throw ConfigError("unknown head aggregation '" + name + "'");
}

}  // namespace dualprune
