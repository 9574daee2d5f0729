// dualprune: generate synthetic token batches, prune them under a chosen
// configuration, evaluate how well a kept subset preserves the dual weight
// and the attention outputs, and run the identity verification suite.
//
// Exit codes: 0 success, 1 verification failure, 2 configuration error,
// 3 data/I-O error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dualprune/batch.hpp"
#include "dualprune/error.hpp"
#include "dualprune/evaluate.hpp"
#include "dualprune/report.hpp"
#include "dualprune/selection.hpp"
#include "dualprune/verify.hpp"
#include "dualprune/version.hpp"

namespace {

using dualprune::ConfigError;
using dualprune::DataError;
using dualprune::PruneConfig;

struct ConfigFlags {
    double budget = -1.0;      // reduction ratio rho
    double keep_ratio = -1.0;  // 1 - rho
    double lambda = 5.0;
    std::size_t b0 = 2;
    std::size_t growth = 2;
    std::string penalty = "power";
    std::string scorer = "iwp";
    std::string space = "dual_weight";
    std::string query_mode = "mean_text";
    std::string head_agg = "mean_of_squares";
    std::string rope_magnitude = "off";
    std::string rope_duplication = "on";
    double rope_base = 10000.0;
    int layer = 4;
    std::uint64_t seed = 0;
};

void add_config_flags(CLI::App* cmd, ConfigFlags* flags, bool budget_required) {
    auto* budget = cmd->add_option("--budget", flags->budget,
                                   "Reduction ratio rho in [0, 1]: fraction of image tokens removed");
    auto* keep = cmd->add_option("--keep-ratio", flags->keep_ratio,
                                 "Fraction of image tokens kept (alternative to --budget)");
    budget->excludes(keep);
    keep->excludes(budget);
    if (budget_required) {
        // One of the two must be given; checked after parsing so the error
        // message can name both flags.
    }
    cmd->add_option("--lambda", flags->lambda, "Duplication penalty strength (default 5)");
    cmd->add_option("--b0", flags->b0, "Initial chunk size (default 2)");
    cmd->add_option("--growth", flags->growth, "Chunk growth factor g (default 2)");
    cmd->add_option("--penalty", flags->penalty, "Penalty form: power, exponential, additive");
    cmd->add_option("--scorer", flags->scorer,
                    "Magnitude scorer: iwp, alignment, delta_w_norm, value_norm, key_norm, "
                    "random, uniform");
    cmd->add_option("--space", flags->space,
                    "Similarity space: dual_weight, kernelized_key, key_cosine, value_cosine, "
                    "hidden_cosine");
    cmd->add_option("--query-mode", flags->query_mode,
                    "Query aggregation: mean_text, mean_image, last_text");
    cmd->add_option("--head-agg", flags->head_agg,
                    "Duplication head aggregation: mean_of_squares, square_of_mean");
    cmd->add_option("--rope-magnitude", flags->rope_magnitude,
                    "Apply RoPE in the magnitude metric: on, off (default off)");
    cmd->add_option("--rope-duplication", flags->rope_duplication,
                    "Apply RoPE in the duplication metric: on, off (default on)");
    cmd->add_option("--rope-base", flags->rope_base, "RoPE base (default 10000)");
    cmd->add_option("--layer", flags->layer, "Pruning layer index (default 4)");
    cmd->add_option("--seed", flags->seed, "Seed for the random scorer / random method");
}

bool parse_on_off(const std::string& value, const char* flag) {
    if (value == "on") {
        return true;
    }
    if (value == "off") {
        return false;
    }
    throw ConfigError(std::string(flag) + " expects 'on' or 'off', got '" + value + "'");
}

PruneConfig resolve_config(const ConfigFlags& flags, bool budget_required) {
    if (flags.budget >= 0.0 && flags.keep_ratio >= 0.0) {
        throw ConfigError("--budget and --keep-ratio are mutually exclusive");
    }
    PruneConfig cfg;
    if (flags.budget >= 0.0) {
        cfg.rho = flags.budget;
    } else if (flags.keep_ratio >= 0.0) {
        if (flags.keep_ratio < 0.0 || flags.keep_ratio > 1.0) {
            throw ConfigError("--keep-ratio must lie in [0, 1]");
        }
        cfg.rho = 1.0 - flags.keep_ratio;
    } else if (budget_required) {
        throw ConfigError("one of --budget or --keep-ratio is required");
    }
    cfg.lambda = flags.lambda;
    cfg.b0 = flags.b0;
    cfg.growth = flags.growth;
    cfg.penalty = dualprune::parse_penalty_form(flags.penalty);
    cfg.scorer.kind = dualprune::parse_scorer_kind(flags.scorer);
    cfg.scorer.query_mode = dualprune::parse_query_mode(flags.query_mode);
    cfg.scorer.seed = flags.seed;
    cfg.space = dualprune::parse_similarity_space(flags.space);
    cfg.head_agg = dualprune::parse_head_aggregation(flags.head_agg);
    cfg.rope_magnitude = {flags.rope_base, parse_on_off(flags.rope_magnitude, "--rope-magnitude")};
    cfg.rope_duplication = {flags.rope_base,
                            parse_on_off(flags.rope_duplication, "--rope-duplication")};
    cfg.layer = flags.layer;
    cfg.seed = flags.seed;
    cfg.validate();
    return cfg;
}

int cmd_synth(const dualprune::SynthSpec& spec, int layer, const std::string& out_dir) {
    const dualprune::TokenBatch batch = dualprune::generate_synthetic_batch(spec, layer);
    const std::string manifest = dualprune::save_batch(batch, out_dir);
    std::cout << manifest << "\n";
    return 0;
}

int cmd_prune(const std::string& manifest, const std::string& method, const PruneConfig& cfg,
              const std::string& out_path) {
    const dualprune::TokenBatch batch = dualprune::load_batch(manifest);
    const dualprune::SelectionResult sel = dualprune::run_method(method, batch, cfg);
    const std::string text =
        dualprune::canonical_dump(dualprune::selection_to_json(method, sel, cfg));
    if (out_path.empty()) {
        std::cout << text;
    } else {
        dualprune::write_text_file(out_path, text);
        std::cout << out_path << "\n";
    }
    return 0;
}

struct SelectionFile {
    std::string method;
    std::vector<std::size_t> kept;
    std::size_t duplication_cells = 0;
};

SelectionFile load_selection(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw dualprune::IoError("selection: cannot open " + path);
    }
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw dualprune::FormatError("selection: invalid JSON in " + path + ": " + e.what());
    }
    if (!j.contains("kept")) {
        throw dualprune::FormatError("selection: missing 'kept' array in " + path);
    }
    SelectionFile sel;
    try {
        sel.kept = j["kept"].get<std::vector<std::size_t>>();
        if (j.contains("method")) {
            sel.method = j["method"].get<std::string>();
        } else {
            sel.method = std::filesystem::path(path).stem().string();
        }
        if (j.contains("duplication_cells_evaluated")) {
            sel.duplication_cells = j["duplication_cells_evaluated"].get<std::size_t>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw dualprune::FormatError("selection: bad field type in " + path + ": " + e.what());
    }
    return sel;
}

int cmd_evaluate(const std::string& manifest, const std::vector<std::string>& methods,
                 const std::vector<std::string>& selection_files, const PruneConfig& cfg,
                 bool timing, const std::string& format, const std::string& out_path) {
    if (methods.empty() && selection_files.empty()) {
        throw ConfigError("evaluate: provide --method or --selection");
    }
    if (format != "json" && format != "csv") {
        throw ConfigError("evaluate: unknown format '" + format + "' (expected json or csv)");
    }
    const dualprune::TokenBatch batch = dualprune::load_batch(manifest);

    dualprune::EvalReport report;
    report.seed = cfg.seed;
    for (const std::string& path : selection_files) {
        const SelectionFile sel = load_selection(path);
        report.rows.push_back(dualprune::evaluate_kept(batch, sel.method, sel.kept,
                                                       sel.duplication_cells, cfg));
    }
    if (!methods.empty()) {
        dualprune::EvalReport inline_rows =
            dualprune::evaluate_methods(batch, cfg, methods, timing);
        for (auto& row : inline_rows.rows) {
            report.rows.push_back(std::move(row));
        }
    }

    const std::string text = format == "json"
                                 ? dualprune::canonical_dump(report_to_json(report, cfg))
                                 : dualprune::report_to_csv(report);
    if (out_path.empty()) {
        std::cout << text;
    } else {
        dualprune::write_text_file(out_path, text);
        std::cout << out_path << "\n";
    }
    return 0;
}

int cmd_verify(const dualprune::VerifyOptions& opts) {
    const std::vector<dualprune::CheckResult> results = dualprune::run_verification(opts);
    bool all_pass = true;
    std::vector<std::string> failed;
    for (const auto& r : results) {
        std::printf("%s %-15s max_err=%.17g tol=%.17g trials=%zu\n", r.pass ? "PASS" : "FAIL",
                    r.name.c_str(), r.max_error, r.tolerance, r.trials);
        if (!r.pass) {
            all_pass = false;
            failed.push_back(r.name);
        }
    }
    if (all_pass) {
        std::printf("verify: all %zu checks passed\n", results.size());
        return 0;
    }
    std::string names;
    for (const auto& name : failed) {
        names += (names.empty() ? "" : ", ") + name;
    }
    std::printf("verify: FAILED checks: %s\n", names.c_str());
    return 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Dual-form token pruning toolkit"};
    app.require_subcommand(1);
    app.set_version_flag("--version", dualprune::kVersion);

    // synth
    auto* synth = app.add_subcommand("synth", "Generate a synthetic token batch with planted "
                                              "redundancy and write it as NPY files + manifest");
    dualprune::SynthSpec spec;
    int synth_layer = 4;
    std::string synth_out;
    synth->add_option("--n-img", spec.n_img, "Image-token count (default 64)");
    synth->add_option("--n-text", spec.n_text, "Text-token count (default 8)");
    synth->add_option("--heads", spec.heads, "Attention head count (default 2)");
    synth->add_option("--dim", spec.head_dim, "Per-head query/key dimension (default 16)");
    synth->add_option("--dim-v", spec.value_dim, "Per-head value dimension (defaults to --dim)");
    synth->add_option("--clusters", spec.cluster_count, "Planted cluster count (default 4)");
    synth->add_option("--noise", spec.cluster_noise, "Within-cluster noise scale (default 0.05)");
    synth->add_option("--key-norm-cap", spec.key_norm_cap,
                      "Key norm cap (default sqrt(2 * dim))");
    synth->add_option("--seed", spec.seed, "Generator seed (default 7)");
    synth->add_option("--layer", synth_layer, "Layer index recorded in the manifest (default 4)");
    synth->add_option("-o,--out", synth_out, "Output directory")->required();

    // prune
    auto* prune = app.add_subcommand("prune", "Select a kept image-token subset");
    std::string prune_manifest;
    std::string prune_method;
    std::string prune_out;
    ConfigFlags prune_flags;
    prune->add_option("--manifest", prune_manifest, "Batch manifest path")->required();
    prune->add_option("--method", prune_method,
                      "Selection method: iwp, topk, mmr-additive, random, oracle, none")
        ->required();
    prune->add_option("--out", prune_out, "Selection JSON output path (default: stdout)");
    add_config_flags(prune, &prune_flags, true);

    // evaluate
    auto* evaluate = app.add_subcommand(
        "evaluate", "Evaluate kept subsets: dual-weight preservation, attention-output "
                    "perturbation, oracle overlap");
    std::string eval_manifest;
    std::vector<std::string> eval_methods;
    std::vector<std::string> eval_selections;
    std::string eval_format = "json";
    std::string eval_out;
    bool eval_timing = false;
    ConfigFlags eval_flags;
    evaluate->add_option("--manifest", eval_manifest, "Batch manifest path")->required();
    evaluate->add_option("--method", eval_methods, "Method to run and evaluate (repeatable)");
    evaluate->add_option("--selection", eval_selections,
                         "Existing selection JSON to evaluate (repeatable)");
    evaluate->add_option("--format", eval_format, "Report format: json (default) or csv");
    evaluate->add_option("--out", eval_out, "Report output path (default: stdout)");
    evaluate->add_flag("--timing", eval_timing,
                       "Record wall-clock times (off by default; timed reports are not "
                       "byte-reproducible)");
    add_config_flags(evaluate, &eval_flags, false);

    // verify
    auto* verify = app.add_subcommand("verify", "Run the identity verification suite");
    dualprune::VerifyOptions verify_opts;
    verify->add_option("--trials", verify_opts.trials, "Random trials per check (default 500)");
    verify->add_option("--seed", verify_opts.seed, "Fixture seed (default 1)");
    verify->add_option("--break", verify_opts.fault,
                       "Deliberately perturb the named check (fault-injection hook)");

    try {
        app.parse(argc, argv);

        if (synth->parsed()) {
            if (synth->count("--dim-v") == 0) {
                spec.value_dim = spec.head_dim;
            }
            return cmd_synth(spec, synth_layer, synth_out);
        }
        if (prune->parsed()) {
            const PruneConfig cfg = resolve_config(prune_flags, true);
            return cmd_prune(prune_manifest, prune_method, cfg, prune_out);
        }
        if (evaluate->parsed()) {
            bool budget_needed = false;
            for (const std::string& method : eval_methods) {
                if (method != "none") {
                    budget_needed = true;
                }
            }
            const PruneConfig cfg = resolve_config(eval_flags, budget_needed);
            return cmd_evaluate(eval_manifest, eval_methods, eval_selections, cfg, eval_timing,
                                eval_format, eval_out);
        }
        if (verify->parsed()) {
            return cmd_verify(verify_opts);
        }
        std::cerr << "error: no subcommand given\n";
        return 2;
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}
