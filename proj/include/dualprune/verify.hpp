#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dualprune/attention.hpp"
#include "dualprune/batch.hpp"
#include "dualprune/error.hpp"
#include "dualprune/gram.hpp"
#include "dualprune/metrics.hpp"
#include "dualprune/rng.hpp"
#include "dualprune/selection.hpp"
#include "dualprune/tensor.hpp"

namespace dualprune {

// Self-contained identity suite behind the `verify` subcommand: each check
// regenerates its own fixtures from the seed, so a fresh build can be
// exercised without any input files. `fault` names a check whose computation
// is deliberately perturbed, to prove the suite can fail.
struct VerifyOptions {
    std::size_t trials = 500;
    std::uint64_t seed = 1;
    std::string fault;  // empty, or one of the check names ("rbf" aliases "rbf-identity")
};

struct CheckResult {
    std::string name;
    bool pass = false;
    double max_error = 0.0;
    double tolerance = 0.0;
    std::size_t trials = 0;
};

namespace verify_detail {

inline bool faulted(const VerifyOptions& opts, const std::string& name) {
    if (opts.fault.empty()) {
        return false;
    }
    if (opts.fault == name) {
        return true;
    }
    return opts.fault == "rbf" && name == "rbf-identity";
}

inline std::vector<double> random_vector(Rng& rng, std::size_t d) {
    std::vector<double> v(d);
    for (double& x : v) {
        x = rng.normal();
    }
    return v;
}

inline Tensor random_matrix(Rng& rng, std::size_t rows, std::size_t cols) {
    Tensor t({rows, cols});
    for (double& x : t.data()) {
        x = rng.normal();
    }
    return t;
}

// Primal linear attention vs q * W_N.
inline CheckResult check_dual_linear(const VerifyOptions& opts) {
    CheckResult r{"dual-linear", false, 0.0, 1e-10, opts.trials};
    Rng rng(opts.seed ^ 0x1d1a1ull);
    const double nudge = faulted(opts, r.name) ? 1e-8 : 0.0;
    for (std::size_t t = 0; t < opts.trials; ++t) {
        const std::size_t n = 1 + rng.uniform_below(64);
        const std::size_t d = 1 + rng.uniform_below(32);
        const std::size_t dv = 1 + rng.uniform_below(32);
        const Tensor keys = random_matrix(rng, n, d);
        const Tensor values = random_matrix(rng, n, dv);
        const std::vector<double> q = random_vector(rng, d);

        const std::vector<double> primal =
            linear_attention_primal(q, mat_view(keys), mat_view(values));
        std::vector<double> dual =
            apply_dual_weight(q, dual_weight_linear(mat_view(keys), mat_view(values)));
        dual[0] += nudge;

        std::vector<double> diff(primal.size());
        for (std::size_t j = 0; j < diff.size(); ++j) {
            diff[j] = primal[j] - dual[j];
        }
        r.max_error = std::max(r.max_error, norm(diff) / (1.0 + norm(primal)));
    }
    r.pass = r.max_error <= r.tolerance;
    return r;
}

// Softmax attention vs the normalized kernel expansion.
inline CheckResult check_softmax_kernel(const VerifyOptions& opts) {
    CheckResult r{"softmax-kernel", false, 0.0, 1e-12, opts.trials};
    Rng rng(opts.seed ^ 0x50f7ull);
    const double scale = faulted(opts, r.name) ? 1.0 + 1e-8 : 1.0;
    for (std::size_t t = 0; t < opts.trials; ++t) {
        const std::size_t n = 1 + rng.uniform_below(32);
        const std::size_t d = 1 + rng.uniform_below(16);
        const std::size_t dv = 1 + rng.uniform_below(16);
        const KernelParams params{d};
        const Tensor keys = random_matrix(rng, n, d);
        const Tensor values = random_matrix(rng, n, dv);
        const std::vector<double> q = random_vector(rng, d);

        const std::vector<double> reference =
            softmax_attention(q, mat_view(keys), mat_view(values), params);

        // Kernel route: eta_N(q) * sum_i kappa(q, k_i) v_i, exponentiated naively.
        double eta_denominator = 0.0;
        std::vector<double> expansion(dv, 0.0);
        const MatView k = mat_view(keys);
        const MatView v = mat_view(values);
        for (std::size_t i = 0; i < n; ++i) {
            const double kappa = std::exp(exp_kernel_log(q, k.row(i), params));
            eta_denominator += kappa;
            for (std::size_t j = 0; j < dv; ++j) {
                expansion[j] += kappa * v.row(i)[j];
            }
        }
        for (double& x : expansion) {
            x *= scale / eta_denominator;
        }

        std::vector<double> diff(dv);
        for (std::size_t j = 0; j < dv; ++j) {
            diff[j] = expansion[j] - reference[j];
        }
        const double denom = norm(reference);
        r.max_error = std::max(r.max_error, denom == 0.0 ? norm(diff) : norm(diff) / denom);
    }
    r.pass = r.max_error <= r.tolerance;
    return r;
}

// Kernel-cosine route vs the direct Gaussian RBF route.
inline CheckResult check_rbf_identity(const VerifyOptions& opts) {
    CheckResult r{"rbf-identity", false, 0.0, 1e-9, std::max<std::size_t>(opts.trials, 1000)};
    Rng rng(opts.seed ^ 0x4bfull);
    const double denom_scale = faulted(opts, r.name) ? 1.0 + 1e-6 : 1.0;
    for (std::size_t t = 0; t < r.trials; ++t) {
        const std::size_t d = 1 + rng.uniform_below(32);
        const KernelParams params{d};
        const std::vector<double> x = random_vector(rng, d);
        const std::vector<double> y = random_vector(rng, d);
        const double via_kernel = std::exp(kernel_cosine_log(x, y, params));
        const double via_rbf =
            std::exp(-squared_distance(x, y) / (2.0 * params.sqrt_dim() * denom_scale));
        r.max_error = std::max(r.max_error, std::abs(via_kernel - via_rbf));
    }
    r.pass = r.max_error <= r.tolerance;
    return r;
}

// Rank-1 update magnitude: Gram diagonal vs sqrt(kappa(k,k)) * |v|.
inline CheckResult check_frobenius(const VerifyOptions& opts) {
    CheckResult r{"frobenius", false, 0.0, 1e-12, std::max<std::size_t>(opts.trials, 1000)};
    Rng rng(opts.seed ^ 0xf40ull);
    const double scale = faulted(opts, r.name) ? 1.0 + 1e-8 : 1.0;
    for (std::size_t t = 0; t < r.trials; ++t) {
        const std::size_t d = 1 + rng.uniform_below(32);
        const std::size_t dv = 1 + rng.uniform_below(32);
        const KernelParams params{d};
        const Tensor keys = random_matrix(rng, 1, d);
        const Tensor values = random_matrix(rng, 1, dv);
        const std::size_t sel[1] = {0};
        const DualGram g = gram(mat_view(keys), mat_view(values), sel, sel, params);
        const double from_gram = std::sqrt(g.inner(0, 0));
        const double direct = scale *
                              std::sqrt(std::exp(exp_kernel_log(keys.data(), keys.data(), params))) *
                              norm(values.data());
        r.max_error =
            std::max(r.max_error, std::abs(from_gram - direct) / std::max(direct, 1e-300));
    }
    r.pass = r.max_error <= r.tolerance;
    return r;
}

// Dual-weight similarity: direct inner-product route vs the factorized
// value-cosine x kernel-cosine route, per head.
inline CheckResult check_factorization(const VerifyOptions& opts) {
    CheckResult r{"factorization", false, 0.0, 1e-10, std::max<std::size_t>(opts.trials, 1000)};
    Rng rng(opts.seed ^ 0xfac7ull);
    const double scale = faulted(opts, r.name) ? 1.0 + 1e-8 : 1.0;
    for (std::size_t t = 0; t < r.trials; ++t) {
        const std::size_t d = 2 + rng.uniform_below(15);
        const std::size_t dv = 1 + rng.uniform_below(16);
        const KernelParams params{d};
        const Tensor keys = random_matrix(rng, 2, d);
        const Tensor values = random_matrix(rng, 2, dv);
        const std::size_t sel[2] = {0, 1};
        const DualGram g = gram(mat_view(keys), mat_view(values), sel, sel, params);
        const double direct = g.inner(0, 1) / std::sqrt(g.inner(0, 0) * g.inner(1, 1));
        const double factorized =
            scale * cosine(mat_view(values).row(0), mat_view(values).row(1)) *
            std::exp(rbf_log(mat_view(keys).row(0), mat_view(keys).row(1), params));
        r.max_error = std::max(r.max_error, std::abs(direct - factorized));
    }
    r.pass = r.max_error <= r.tolerance;
    return r;
}

// PC-MMR at b0 = 1, g = 1 vs the one-at-a-time sequential rule: exact set
// equality on planted-redundancy batches.
inline CheckResult check_pcmmr_oracle(const VerifyOptions& opts) {
    CheckResult r{"pcmmr-oracle", false, 0.0, 0.0, std::max<std::size_t>(opts.trials / 10, 20)};
    Rng rng(opts.seed ^ 0x9c3ull);
    for (std::size_t t = 0; t < r.trials; ++t) {
        SynthSpec spec;
        spec.heads = 1 + rng.uniform_below(2);
        spec.n_img = 8 + rng.uniform_below(57);
        spec.n_text = 1 + rng.uniform_below(8);
        spec.head_dim = 4 + 2 * rng.uniform_below(7);
        spec.value_dim = 2 + rng.uniform_below(15);
        spec.cluster_count = 1 + rng.uniform_below(std::min<std::size_t>(spec.n_img, 6));
        spec.cluster_noise = 0.05;
        spec.seed = rng.next_u64();
        const TokenBatch batch = generate_synthetic_batch(spec);

        PruneConfig cfg;
        cfg.rho = 0.5 + 0.4 * rng.uniform();
        cfg.b0 = 1;
        cfg.growth = 1;
        cfg.seed = spec.seed;
        const ScoreVector scores =
            magnitude_scores(batch, {ScorerKind::iwp, QueryMode::mean_text, cfg.seed},
                             cfg.rope_magnitude);

        PruneConfig oracle_cfg = cfg;
        if (faulted(opts, r.name)) {
            oracle_cfg.lambda = 0.0;  // degrade the reference to pure top-k
        }
        const SelectionResult chunked = pc_mmr(scores, batch, cfg);
        const SelectionResult sequential =
            sequential_mmr_multiplicative(scores, batch, oracle_cfg);
        if (chunked.kept != sequential.kept) {
            r.max_error += 1.0;  // counts mismatching instances
        }
    }
    r.pass = r.max_error == 0.0;
    return r;
}

}  // namespace verify_detail

inline std::vector<CheckResult> run_verification(const VerifyOptions& opts) {
    static const char* kKnownFaults[] = {"dual-linear", "softmax-kernel", "rbf", "rbf-identity",
                                         "frobenius",   "factorization",  "pcmmr-oracle"};
    if (!opts.fault.empty()) {
        bool known = false;
        for (const char* name : kKnownFaults) {
            if (opts.fault == name) {
                known = true;
                break;
            }
        }
        if (!known) {
            throw ConfigError("verify: unknown fault target '" + opts.fault + "'");
        }
    }
    if (opts.trials < 1) {
        throw ConfigError("verify: trials must be at least 1");
    }
    return {
        verify_detail::check_dual_linear(opts),   verify_detail::check_softmax_kernel(opts),
        verify_detail::check_rbf_identity(opts),  verify_detail::check_frobenius(opts),
        verify_detail::check_factorization(opts), verify_detail::check_pcmmr_oracle(opts),
    };
}

}  // namespace dualprune
