#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "dualprune/batch.hpp"
#include "test_util.hpp"

#ifndef DUALPRUNE_CLI_PATH
#error "DUALPRUNE_CLI_PATH must point at the built CLI binary"
#endif

namespace {

struct CliResult {
    int exit_code = -1;
    std::string out;
};

// Runs the CLI with stdout+stderr captured; the command string is /bin/sh
// syntax, so arguments with spaces need quoting at the call site.
CliResult run_cli(const std::string& args, const TempDir& dir, const std::string& tag) {
    const std::string capture = dir.file("cli_" + tag + ".out");
    const std::string command =
        std::string(DUALPRUNE_CLI_PATH) + " " + args + " >" + capture + " 2>&1";
    const int status = std::system(command.c_str());
    CliResult result;
    result.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    result.out = read_file_bytes(capture);
    return result;
}

std::string first_line(const std::string& text) {
    return text.substr(0, text.find('\n'));
}

}  // namespace

TEST_CASE("synth writes a loadable manifest and is byte-reproducible") {
    TempDir dir;
    const std::string flags =
        "--n-img 64 --n-text 8 --heads 2 --dim 16 --clusters 4 --seed 7";
    const CliResult a = run_cli("synth " + flags + " -o " + dir.file("a"), dir, "synth_a");
    REQUIRE(a.exit_code == 0);
    const std::string manifest = first_line(a.out);
    REQUIRE(std::filesystem::exists(manifest));

    const dualprune::TokenBatch batch = dualprune::load_batch(manifest);
    CHECK(batch.n_img == 64);
    CHECK(batch.n_text == 8);
    CHECK(batch.heads() == 2);
    CHECK(batch.head_dim() == 16);
    CHECK(batch.value_dim() == 16);  // --dim-v defaults to --dim
    CHECK(batch.layer_index == 4);

    const CliResult b = run_cli("synth " + flags + " -o " + dir.file("b"), dir, "synth_b");
    REQUIRE(b.exit_code == 0);
    for (const char* name : {"queries.npy", "keys.npy", "values.npy", "manifest.json"}) {
        CHECK(read_file_bytes(dir.file("a/") + name) == read_file_bytes(dir.file("b/") + name));
    }
}

TEST_CASE("synth rejects inconsistent sizes with exit code 2") {
    TempDir dir;
    const CliResult r =
        run_cli("synth --clusters 100 --n-img 64 -o " + dir.file("x"), dir, "synth_bad");
    CHECK(r.exit_code == 2);
}

TEST_CASE("prune honors the budget arithmetic") {
    TempDir dir;
    const CliResult s = run_cli("synth --seed 7 -o " + dir.file("batch"), dir, "synth");
    REQUIRE(s.exit_code == 0);
    const std::string manifest = first_line(s.out);

    SECTION("rho = 0.889 keeps round(0.111 * 64) = 7 tokens") {
        const CliResult r = run_cli(
            "prune --manifest " + manifest + " --method iwp --budget 0.889", dir, "prune7");
        REQUIRE(r.exit_code == 0);
        const auto j = nlohmann::json::parse(r.out);
        CHECK(j["kept"].size() == 7);
        CHECK(j["keep_count"] == 7);
        // kept is sorted and unique
        std::vector<std::size_t> kept = j["kept"].get<std::vector<std::size_t>>();
        CHECK(std::is_sorted(kept.begin(), kept.end()));
        CHECK(std::adjacent_find(kept.begin(), kept.end()) == kept.end());
    }
    SECTION("budget 0 keeps everything") {
        const CliResult r = run_cli(
            "prune --manifest " + manifest + " --method topk --budget 0", dir, "prune_all");
        REQUIRE(r.exit_code == 0);
        const auto j = nlohmann::json::parse(r.out);
        CHECK(j["kept"].size() == 64);
    }
    SECTION("--keep-ratio mirrors --budget") {
        const CliResult a = run_cli(
            "prune --manifest " + manifest + " --method topk --budget 0.889", dir, "prune_b");
        const CliResult b = run_cli(
            "prune --manifest " + manifest + " --method topk --keep-ratio 0.111", dir, "prune_k");
        REQUIRE(a.exit_code == 0);
        REQUIRE(b.exit_code == 0);
        CHECK(nlohmann::json::parse(a.out)["kept"] == nlohmann::json::parse(b.out)["kept"]);
        const CliResult both = run_cli("prune --manifest " + manifest +
                                           " --method topk --budget 0.5 --keep-ratio 0.5",
                                       dir, "prune_both");
        CHECK(both.exit_code == 2);
    }
    SECTION("missing budget is a configuration error") {
        const CliResult r =
            run_cli("prune --manifest " + manifest + " --method iwp", dir, "prune_nobudget");
        CHECK(r.exit_code == 2);
    }
    SECTION("additive method demands lambda in [0,1]") {
        const CliResult r = run_cli(
            "prune --manifest " + manifest + " --method mmr-additive --budget 0.5", dir,
            "prune_lambda");
        CHECK(r.exit_code == 2);
        const CliResult ok = run_cli("prune --manifest " + manifest +
                                         " --method mmr-additive --budget 0.5 --lambda 0.5",
                                     dir, "prune_lambda_ok");
        CHECK(ok.exit_code == 0);
    }
    SECTION("bad manifest path is a data error") {
        const CliResult r = run_cli(
            "prune --manifest " + dir.file("nope.json") + " --method iwp --budget 0.5", dir,
            "prune_badmanifest");
        CHECK(r.exit_code == 3);
    }
}

TEST_CASE("iwp coverage of planted clusters is at least top_k coverage") {
    TempDir dir;
    const CliResult s = run_cli("synth --seed 7 -o " + dir.file("batch"), dir, "synth");
    REQUIRE(s.exit_code == 0);
    const std::string manifest = first_line(s.out);
    const dualprune::TokenBatch batch = dualprune::load_batch(manifest);
    REQUIRE(batch.cluster_assignment.has_value());

    const auto coverage = [&](const std::string& method, const std::string& tag) {
        const CliResult r = run_cli("prune --manifest " + manifest + " --method " + method +
                                        " --budget 0.889",
                                    dir, tag);
        REQUIRE(r.exit_code == 0);
        const auto kept = nlohmann::json::parse(r.out)["kept"].get<std::vector<std::size_t>>();
        std::set<std::size_t> clusters;
        for (std::size_t idx : kept) {
            clusters.insert((*batch.cluster_assignment)[idx]);
        }
        return clusters.size();
    };
    CHECK(coverage("iwp", "cov_iwp") >= coverage("topk", "cov_topk"));
}

TEST_CASE("evaluate reports the trivial keep-all row") {
    TempDir dir;
    const CliResult s = run_cli("synth --seed 7 --n-img 24 -o " + dir.file("batch"), dir, "synth");
    REQUIRE(s.exit_code == 0);
    const std::string manifest = first_line(s.out);

    const CliResult r = run_cli(
        "evaluate --manifest " + manifest + " --method none", dir, "eval_none");
    REQUIRE(r.exit_code == 0);
    const auto j = nlohmann::json::parse(r.out);
    REQUIRE(j["rows"].size() == 1);
    CHECK(j["rows"][0]["dual_weight_rel_error_mean"] == 0.0);
    CHECK(j["rows"][0]["attn_output_cosine"] == 1.0);
}

TEST_CASE("evaluate consumes selection files and validates them") {
    TempDir dir;
    const CliResult s = run_cli("synth --seed 9 --n-img 32 -o " + dir.file("batch"), dir, "synth");
    REQUIRE(s.exit_code == 0);
    const std::string manifest = first_line(s.out);

    const std::string sel_path = dir.file("sel.json");
    const CliResult p = run_cli("prune --manifest " + manifest +
                                    " --method iwp --budget 0.75 --out " + sel_path,
                                dir, "prune_out");
    REQUIRE(p.exit_code == 0);
    REQUIRE(std::filesystem::exists(sel_path));

    SECTION("selection row is evaluated under its method name") {
        const CliResult r = run_cli(
            "evaluate --manifest " + manifest + " --selection " + sel_path, dir, "eval_sel");
        REQUIRE(r.exit_code == 0);
        const auto j = nlohmann::json::parse(r.out);
        REQUIRE(j["rows"].size() == 1);
        CHECK(j["rows"][0]["method"] == "iwp");
        CHECK(j["rows"][0]["kept_count"] == 8);
    }
    SECTION("mismatched selection indices exit 3") {
        write_file_bytes(dir.file("bad.json"), "{\"method\": \"ext\", \"kept\": [0, 1000]}");
        const CliResult r = run_cli(
            "evaluate --manifest " + manifest + " --selection " + dir.file("bad.json"), dir,
            "eval_bad");
        CHECK(r.exit_code == 3);
    }
    SECTION("a bare external kept array is enough") {
        write_file_bytes(dir.file("ext.json"), "{\"kept\": [0, 3, 5, 9]}");
        const CliResult r = run_cli(
            "evaluate --manifest " + manifest + " --selection " + dir.file("ext.json"), dir,
            "eval_ext");
        REQUIRE(r.exit_code == 0);
        const auto j = nlohmann::json::parse(r.out);
        CHECK(j["rows"][0]["method"] == "ext");  // falls back to the file stem
        CHECK(j["rows"][0]["kept_count"] == 4);
    }
    SECTION("neither methods nor selections exits 2") {
        const CliResult r = run_cli("evaluate --manifest " + manifest, dir, "eval_none_given");
        CHECK(r.exit_code == 2);
    }
    SECTION("csv format emits one row per method") {
        const CliResult r = run_cli("evaluate --manifest " + manifest +
                                        " --method topk --method random --budget 0.75 "
                                        "--format csv",
                                    dir, "eval_csv");
        REQUIRE(r.exit_code == 0);
        CHECK(r.out.find("method,kept_count,") == 0);
        CHECK(std::count(r.out.begin(), r.out.end(), '\n') == 3);  // header + 2 rows
    }
    SECTION("unknown format exits 2") {
        const CliResult r = run_cli("evaluate --manifest " + manifest +
                                        " --method topk --budget 0.75 --format yaml",
                                    dir, "eval_fmt");
        CHECK(r.exit_code == 2);
    }
}

TEST_CASE("verify passes on a fresh build and fails under fault injection") {
    TempDir dir;
    SECTION("clean run") {
        const CliResult r = run_cli("verify --trials 120 --seed 1", dir, "verify");
        CHECK(r.exit_code == 0);
        CHECK(r.out.find("FAIL") == std::string::npos);
        CHECK(r.out.find("PASS dual-linear") != std::string::npos);
        CHECK(r.out.find("PASS rbf-identity") != std::string::npos);
    }
    SECTION("broken rbf denominator is caught and named") {
        const CliResult r = run_cli("verify --trials 120 --seed 1 --break rbf", dir, "verify_rbf");
        CHECK(r.exit_code == 1);
        CHECK(r.out.find("FAIL rbf-identity") != std::string::npos);
        CHECK(r.out.find("FAILED checks: rbf-identity") != std::string::npos);
    }
    SECTION("unknown fault target exits 2") {
        const CliResult r = run_cli("verify --break nonsense", dir, "verify_unknown");
        CHECK(r.exit_code == 2);
    }
    SECTION("reruns are digit-identical") {
        const CliResult a = run_cli("verify --trials 150 --seed 3", dir, "verify_a");
        const CliResult b = run_cli("verify --trials 150 --seed 3", dir, "verify_b");
        REQUIRE(a.exit_code == 0);
        CHECK(a.out == b.out);
    }
}

TEST_CASE("synth -> prune -> evaluate pipeline is byte-deterministic") {
    TempDir dir;
    const auto pipeline = [&](const std::string& name) {
        const CliResult s =
            run_cli("synth --seed 11 -o " + dir.file(name), dir, name + "_synth");
        REQUIRE(s.exit_code == 0);
        const std::string manifest = first_line(s.out);
        const CliResult p = run_cli("prune --manifest " + manifest +
                                        " --method iwp --budget 0.889 --seed 11 --out " +
                                        dir.file(name + "_sel.json"),
                                    dir, name + "_prune");
        REQUIRE(p.exit_code == 0);
        const CliResult e = run_cli("evaluate --manifest " + manifest + " --selection " +
                                        dir.file(name + "_sel.json") +
                                        " --method topk --method random --budget 0.889 "
                                        "--seed 11 --out " +
                                        dir.file(name + "_report.json"),
                                    dir, name + "_eval");
        REQUIRE(e.exit_code == 0);
    };
    pipeline("run1");
    pipeline("run2");
    CHECK(read_file_bytes(dir.file("run1_sel.json")) == read_file_bytes(dir.file("run2_sel.json")));
    CHECK(read_file_bytes(dir.file("run1_report.json")) ==
          read_file_bytes(dir.file("run2_report.json")));
    CHECK(read_file_bytes(dir.file("run1/keys.npy")) == read_file_bytes(dir.file("run2/keys.npy")));
}
