#pragma once

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dualprune/error.hpp"
#include "dualprune/evaluate.hpp"
#include "dualprune/selection.hpp"
#include "dualprune/version.hpp"

namespace dualprune {

using ordered_json = nlohmann::ordered_json;

// Full resolved configuration; embedded in every artifact so a row can be
// re-run from the report alone.
inline ordered_json config_to_json(const PruneConfig& cfg) {
    ordered_json j;
    j["rho"] = cfg.rho;
    j["lambda"] = cfg.lambda;
    j["b0"] = cfg.b0;
    j["growth"] = cfg.growth;
    j["penalty"] = to_string(cfg.penalty);
    j["scorer"] = to_string(cfg.scorer.kind);
    j["query_mode"] = to_string(cfg.scorer.query_mode);
    j["space"] = to_string(cfg.space);
    j["head_agg"] = to_string(cfg.head_agg);
    j["rope_magnitude"] = cfg.rope_magnitude.rotate;
    j["rope_duplication"] = cfg.rope_duplication.rotate;
    j["rope_base"] = cfg.rope_magnitude.base;
    j["layer"] = cfg.layer;
    j["seed"] = cfg.seed;
    return j;
}

// Deliberately carries no file paths: fixed seeds must yield byte-identical
// selections regardless of where the inputs live.
inline ordered_json selection_to_json(const std::string& method, const SelectionResult& sel,
                                      const PruneConfig& cfg) {
    ordered_json j;
    j["schema"] = kSelectionSchema;
    j["artifact_version"] = kVersion;
    j["method"] = method;
    j["config"] = config_to_json(cfg);
    j["keep_count"] = sel.kept.size();
    j["kept"] = sel.kept;
    ordered_json trace = ordered_json::array();
    for (const ChunkTrace& t : sel.trace) {
        ordered_json entry;
        entry["chunk_size"] = t.chunk_size;
        entry["selected"] = t.selected;
        entry["penalized"] = t.penalized;
        trace.push_back(std::move(entry));
    }
    j["trace"] = std::move(trace);
    j["s_max"] = sel.s_max;
    j["duplication_cells_evaluated"] = sel.duplication_cells;
    return j;
}

inline ordered_json report_to_json(const EvalReport& report, const PruneConfig& cfg) {
    ordered_json j;
    j["schema"] = kReportSchema;
    j["artifact_version"] = kVersion;
    j["seed"] = report.seed;
    j["config"] = config_to_json(cfg);
    ordered_json rows = ordered_json::array();
    for (const MethodEval& row : report.rows) {
        ordered_json r;
        r["method"] = row.method;
        r["kept_count"] = row.kept_count;
        r["kept_ratio"] = row.kept_ratio;
        r["dual_weight_rel_error_mean"] = row.dual_weight_rel_error_mean;
        r["dual_weight_rel_error_per_head"] = row.dual_weight_rel_error_per_head;
        r["attn_output_cosine"] = row.attn_output_cosine;
        r["attn_output_l2_rel"] = row.attn_output_l2_rel;
        r["oracle_iou"] = row.oracle_iou;
        r["wall_time_ms"] = row.wall_time_ms;
        r["duplication_cells_evaluated"] = row.duplication_cells;
        r["kept"] = row.kept;
        rows.push_back(std::move(r));
    }
    j["rows"] = std::move(rows);
    return j;
}

namespace detail {

inline std::string format_g17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace detail

// One row per method; numeric fields use 17 significant digits so 64-bit
// values survive a round trip through the text.
inline std::string report_to_csv(const EvalReport& report) {
    std::string csv =
        "method,kept_count,kept_ratio,dual_weight_rel_error_mean,attn_output_cosine,"
        "attn_output_l2_rel,oracle_iou,wall_time_ms,duplication_cells_evaluated\n";
    for (const MethodEval& row : report.rows) {
        csv += row.method;
        csv += ',' + std::to_string(row.kept_count);
        csv += ',' + detail::format_g17(row.kept_ratio);
        csv += ',' + detail::format_g17(row.dual_weight_rel_error_mean);
        csv += ',' + detail::format_g17(row.attn_output_cosine);
        csv += ',' + detail::format_g17(row.attn_output_l2_rel);
        csv += ',' + detail::format_g17(row.oracle_iou);
        csv += ',' + detail::format_g17(row.wall_time_ms);
        csv += ',' + std::to_string(row.duplication_cells);
        csv += '\n';
    }
    return csv;
}

// Canonical serialized form: key order fixed at construction, two-space
// indent, trailing newline. Parse -> dump reproduces the bytes.
inline std::string canonical_dump(const ordered_json& j) { return j.dump(2) + "\n"; }

inline void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::trunc | std::ios::binary);
    if (!out) {
        throw IoError("report: cannot open " + path + " for writing");
    }
    out << content;
    if (!out) {
        throw IoError("report: write failed for " + path);
    }
}

}  // namespace dualprune
