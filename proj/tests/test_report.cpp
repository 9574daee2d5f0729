#include <catch2/catch_amalgamated.hpp>

#include <numeric>
#include <string>
#include <vector>

#include "dualprune/batch.hpp"
#include "dualprune/evaluate.hpp"
#include "dualprune/report.hpp"
#include "dualprune/selection.hpp"

using namespace dualprune;

namespace {

TokenBatch small_batch(std::uint64_t seed = 44) {
    SynthSpec spec;
    spec.n_img = 16;
    spec.n_text = 3;
    spec.heads = 2;
    spec.head_dim = 8;
    spec.value_dim = 8;
    spec.cluster_count = 4;
    spec.seed = seed;
    return generate_synthetic_batch(spec);
}

}  // namespace

TEST_CASE("keeping everything preserves the attention outputs exactly") {
    const TokenBatch batch = small_batch();
    PruneConfig cfg;
    cfg.rho = 0.5;
    const EvalReport report = evaluate_methods(batch, cfg, {"none"});
    REQUIRE(report.rows.size() == 1);
    const MethodEval& row = report.rows[0];
    CHECK(row.dual_weight_rel_error_mean == 0.0);
    CHECK(row.attn_output_cosine == 1.0);
    CHECK(row.attn_output_l2_rel == 0.0);
    CHECK(row.kept_count == batch.n_img);
    CHECK(row.oracle_iou == 1.0);
}

TEST_CASE("pruning negligible tokens barely perturbs the attention outputs") {
    // Image tokens 8..15 get values scaled down to noise level; dropping
    // them should leave the probe outputs nearly unchanged, while dropping
    // the heavy half instead visibly moves them.
    TokenBatch batch = small_batch();
    for (std::size_t h = 0; h < batch.heads(); ++h) {
        for (std::size_t i = 8; i < 16; ++i) {
            for (std::size_t j = 0; j < batch.value_dim(); ++j) {
                batch.values(h, i, j) *= 1e-4;
            }
        }
    }
    std::vector<std::size_t> keep_heavy = {0, 1, 2, 3, 4, 5, 6, 7};
    std::vector<std::size_t> keep_light = {8, 9, 10, 11, 12, 13, 14, 15};

    double cos_heavy = 0.0, l2_heavy = 0.0, cos_light = 0.0, l2_light = 0.0;
    attention_perturbation(batch, keep_heavy, &cos_heavy, &l2_heavy);
    attention_perturbation(batch, keep_light, &cos_light, &l2_light);
    CHECK(cos_heavy > cos_light);
    CHECK(l2_heavy < l2_light);
    CHECK(cos_heavy > 0.9);

    const double err_heavy = dual_weight_relative_error(batch, keep_heavy);
    const double err_light = dual_weight_relative_error(batch, keep_light);
    CHECK(err_heavy < err_light);
}

TEST_CASE("jaccard overlap") {
    const std::vector<std::size_t> a = {1, 2, 3, 4};
    const std::vector<std::size_t> b = {3, 4, 5, 6};
    CHECK(jaccard(a, b) == Catch::Approx(2.0 / 6.0).epsilon(1e-15));
    CHECK(jaccard(a, a) == 1.0);
    CHECK(jaccard(a, std::vector<std::size_t>{9}) == 0.0);
}

TEST_CASE("evaluate_kept validates its inputs") {
    const TokenBatch batch = small_batch();
    const PruneConfig cfg;

    SECTION("text-token index") {
        const std::vector<std::size_t> bad = {0, batch.n_img};
        CHECK_THROWS_AS(evaluate_kept(batch, "x", bad, 0, cfg), DataError);
    }
    SECTION("empty kept set") {
        CHECK_THROWS_AS(evaluate_kept(batch, "x", std::vector<std::size_t>{}, 0, cfg),
                        ConfigError);
    }
    SECTION("duplicate indices") {
        const std::vector<std::size_t> bad = {1, 1};
        CHECK_THROWS_AS(evaluate_kept(batch, "x", bad, 0, cfg), DataError);
    }
}

TEST_CASE("evaluation consumes only the kept index set") {
    const TokenBatch batch = small_batch();
    PruneConfig cfg;
    cfg.rho = 0.75;
    const SelectionResult sel = run_method("iwp", batch, cfg);
    const MethodEval direct = evaluate_kept(batch, "iwp", sel.kept, sel.duplication_cells, cfg);

    // An externally produced copy of the same indices evaluates identically.
    std::vector<std::size_t> external(sel.kept.begin(), sel.kept.end());
    const MethodEval via_external = evaluate_kept(batch, "ext", external, 0, cfg);
    CHECK(via_external.dual_weight_rel_error_mean == direct.dual_weight_rel_error_mean);
    CHECK(via_external.attn_output_cosine == direct.attn_output_cosine);
    CHECK(via_external.oracle_iou == direct.oracle_iou);
}

TEST_CASE("report rows cover the requested methods in order") {
    const TokenBatch batch = small_batch();
    PruneConfig cfg;
    cfg.rho = 0.75;
    cfg.seed = 5;
    const std::vector<std::string> methods = {"iwp", "topk", "random", "none"};
    const EvalReport report = evaluate_methods(batch, cfg, methods);
    REQUIRE(report.rows.size() == methods.size());
    for (std::size_t i = 0; i < methods.size(); ++i) {
        CHECK(report.rows[i].method == methods[i]);
        CHECK(report.rows[i].dual_weight_rel_error_mean >= 0.0);
        CHECK(report.rows[i].dual_weight_rel_error_mean <= 1.0 + 1e-6);
        CHECK(report.rows[i].attn_output_cosine >= -1.0);
        CHECK(report.rows[i].attn_output_cosine <= 1.0);
        CHECK(report.rows[i].wall_time_ms == 0.0);  // timing off by default
    }
    // Budget contract: every pruning method keeps exactly round((1-rho) * N).
    const std::size_t k = cfg.keep_count(batch.n_img);
    CHECK(report.rows[0].kept_count == k);
    CHECK(report.rows[1].kept_count == k);
    CHECK(report.rows[2].kept_count == k);
    CHECK(report.rows[3].kept_count == batch.n_img);
}

TEST_CASE("report JSON is canonical: parse then re-emit reproduces the bytes") {
    const TokenBatch batch = small_batch();
    PruneConfig cfg;
    cfg.rho = 0.75;
    const EvalReport report = evaluate_methods(batch, cfg, {"iwp", "topk"});
    const std::string text = canonical_dump(report_to_json(report, cfg));
    const ordered_json parsed = ordered_json::parse(text);
    CHECK(canonical_dump(parsed) == text);
    CHECK(parsed["schema"] == kReportSchema);
    CHECK(parsed["rows"].size() == 2);
}

TEST_CASE("selection JSON is canonical and complete") {
    const TokenBatch batch = small_batch();
    PruneConfig cfg;
    cfg.rho = 0.889;
    const SelectionResult sel = run_method("iwp", batch, cfg);
    const std::string text = canonical_dump(selection_to_json("iwp", sel, cfg));
    const ordered_json parsed = ordered_json::parse(text);
    CHECK(canonical_dump(parsed) == text);
    CHECK(parsed["kept"].get<std::vector<std::size_t>>() == sel.kept);
    CHECK(parsed["schema"] == kSelectionSchema);
    CHECK(parsed["config"]["rho"] == cfg.rho);
    CHECK(parsed["duplication_cells_evaluated"] == sel.duplication_cells);
    CHECK(parsed["trace"].size() == sel.trace.size());
}

TEST_CASE("CSV has a fixed header and one row per method") {
    const TokenBatch batch = small_batch();
    PruneConfig cfg;
    cfg.rho = 0.75;
    const EvalReport report = evaluate_methods(batch, cfg, {"iwp", "topk", "random"});
    const std::string csv = report_to_csv(report);

    std::vector<std::string> lines;
    std::size_t start = 0;
    while (start < csv.size()) {
        const std::size_t end = csv.find('\n', start);
        lines.push_back(csv.substr(start, end - start));
        start = end + 1;
    }
    REQUIRE(lines.size() == 4);
    CHECK(lines[0] ==
          "method,kept_count,kept_ratio,dual_weight_rel_error_mean,attn_output_cosine,"
          "attn_output_l2_rel,oracle_iou,wall_time_ms,duplication_cells_evaluated");
    CHECK(lines[1].substr(0, 4) == "iwp,");
    CHECK(lines[2].substr(0, 5) == "topk,");
    CHECK(lines[3].substr(0, 7) == "random,");

    // 17-significant-digit numbers survive a text round trip.
    const std::string mean_field = [&] {
        std::size_t comma = 0;
        std::size_t from = 0;
        for (int i = 0; i < 3; ++i) {
            from = lines[1].find(',', from) + 1;
        }
        comma = lines[1].find(',', from);
        return lines[1].substr(from, comma - from);
    }();
    CHECK(std::stod(mean_field) == report.rows[0].dual_weight_rel_error_mean);
}

TEST_CASE("unknown method names are configuration errors") {
    const TokenBatch batch = small_batch();
    PruneConfig cfg;
    cfg.rho = 0.5;
    CHECK_THROWS_AS(run_method("fancy", batch, cfg), ConfigError);
}

TEST_CASE("enum name tables round-trip") {
    for (ScorerKind kind : {ScorerKind::iwp, ScorerKind::alignment, ScorerKind::delta_w_norm,
                            ScorerKind::value_norm, ScorerKind::key_norm, ScorerKind::random_draw,
                            ScorerKind::uniform}) {
        CHECK(parse_scorer_kind(to_string(kind)) == kind);
    }
    for (SimilaritySpace space :
         {SimilaritySpace::dual_weight, SimilaritySpace::kernelized_key,
          SimilaritySpace::key_cosine, SimilaritySpace::value_cosine,
          SimilaritySpace::hidden_cosine}) {
        CHECK(parse_similarity_space(to_string(space)) == space);
    }
    for (PenaltyForm form :
         {PenaltyForm::power, PenaltyForm::exponential, PenaltyForm::additive}) {
        CHECK(parse_penalty_form(to_string(form)) == form);
    }
    for (QueryMode mode : {QueryMode::mean_text, QueryMode::mean_image, QueryMode::last_text}) {
        CHECK(parse_query_mode(to_string(mode)) == mode);
    }
    CHECK_THROWS_AS(parse_scorer_kind("bogus"), ConfigError);
}
