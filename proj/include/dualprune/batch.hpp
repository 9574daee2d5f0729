#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dualprune/error.hpp"
#include "dualprune/npy.hpp"
#include "dualprune/rng.hpp"
#include "dualprune/tensor.hpp"

namespace dualprune {

inline constexpr const char* kManifestSchema = "dualprune-manifest-v1";

// One layer's token sequence: per-head projections plus modality split.
// Image tokens occupy indices [0, n_img), text tokens [n_img, n_img + n_text).
struct TokenBatch {
    Tensor queries;  // [H, N, d]
    Tensor keys;     // [H, N, d]
    Tensor values;   // [H, N, d_v]
    std::optional<Tensor> hidden;  // [N, d_model], used only by the hidden-state similarity baseline
    std::size_t n_img = 0;
    std::size_t n_text = 0;
    std::vector<std::int64_t> positions;  // strictly increasing sequence indices
    int layer_index = 0;
    // Generator ground truth: planted cluster id per image token.
    std::optional<std::vector<std::size_t>> cluster_assignment;

    std::size_t heads() const { return queries.dim(0); }
    std::size_t tokens() const { return queries.dim(1); }
    std::size_t head_dim() const { return queries.dim(2); }
    std::size_t value_dim() const { return values.dim(2); }
    bool is_image(std::size_t token) const { return token < n_img; }

    void validate() const {
        if (queries.rank() != 3 || keys.rank() != 3 || values.rank() != 3) {
            throw DataError("batch: queries/keys/values must be rank-3 [H, N, d]");
        }
        const std::size_t h = queries.dim(0);
        const std::size_t n = queries.dim(1);
        if (keys.dim(0) != h || values.dim(0) != h) {
            throw DataError("batch: head-count mismatch across queries/keys/values");
        }
        if (keys.dim(1) != n || values.dim(1) != n) {
            throw DataError("batch: token-count mismatch across queries/keys/values");
        }
        if (keys.dim(2) != queries.dim(2)) {
            throw DataError("batch: queries and keys must share the head dimension");
        }
        if (hidden.has_value()) {
            if (hidden->rank() != 2 || hidden->dim(0) != n) {
                throw DataError("batch: hidden must be rank-2 [N, d_model] with matching N");
            }
        }
        if (n_img < 1 || n_text < 1) {
            throw DataError("batch: need at least one image token and one text token");
        }
        if (n_img + n_text != n) {
            throw DataError("batch: n_img + n_text does not match token count");
        }
        if (positions.size() != n) {
            throw DataError("batch: positions length does not match token count");
        }
        for (std::size_t i = 0; i < positions.size(); ++i) {
            if (positions[i] < 0 || (i > 0 && positions[i] <= positions[i - 1])) {
                throw DataError("batch: positions must be non-negative and strictly increasing");
            }
        }
        if (!queries.all_finite() || !keys.all_finite() || !values.all_finite() ||
            (hidden.has_value() && !hidden->all_finite())) {
            throw DataError("batch: non-finite tensor value");
        }
        if (cluster_assignment.has_value() && cluster_assignment->size() != n_img) {
            throw DataError("batch: cluster assignment length does not match image-token count");
        }
    }
};

// Parameters for the synthetic generator. Image tokens are planted around
// shared per-cluster centroids so ground-truth duplicate groups are known;
// text tokens are drawn independently.
struct SynthSpec {
    std::size_t heads = 2;
    std::size_t n_img = 64;
    std::size_t n_text = 8;
    std::size_t head_dim = 16;
    std::size_t value_dim = 16;
    std::size_t cluster_count = 4;
    double cluster_noise = 0.05;
    double key_norm_cap = 0.0;  // 0 selects the default sqrt(2 * head_dim)
    std::uint64_t seed = 7;

    double resolved_key_norm_cap() const {
        return key_norm_cap > 0.0 ? key_norm_cap
                                  : std::sqrt(2.0 * static_cast<double>(head_dim));
    }

    void validate() const {
        if (heads < 1 || n_img < 1 || n_text < 1 || head_dim < 1 || value_dim < 1) {
            throw ConfigError("synth: all sizes must be at least 1");
        }
        if (cluster_count < 1) {
            throw ConfigError("synth: cluster count must be at least 1");
        }
        if (cluster_count > n_img) {
            throw ConfigError("synth: cluster count " + std::to_string(cluster_count) +
                              " exceeds image-token count " + std::to_string(n_img));
        }
        if (cluster_noise < 0.0) {
            throw ConfigError("synth: cluster noise must be non-negative");
        }
        if (key_norm_cap < 0.0) {
            throw ConfigError("synth: key norm cap must be positive");
        }
    }
};

namespace detail {

inline void fill_normal(Rng& rng, std::span<double> out) {
    for (double& v : out) {
        v = rng.normal();
    }
}

inline void cap_row_norm(std::span<double> row, double cap) {
    const double n = norm(std::span<const double>(row.data(), row.size()));
    if (n > cap) {
        const double scale = cap / n;
        for (double& v : row) {
            v *= scale;
        }
    }
}

}  // namespace detail

// Per-token salience spread: image-token values are scaled by
// exp(kSalienceSigma * z) so magnitude-aware selection has signal to rank
// within and across clusters. Cosine-based duplication is scale-invariant,
// so planted duplicates stay duplicates.
inline constexpr double kSalienceSigma = 0.125;

// Deterministic in the full spec including the seed. Draw order is fixed:
// centroids first (head-major), then per-token salience scales, then image
// tokens, then text tokens. Centroid key/value norms are normalized to
// sqrt(dim) so cluster update magnitudes are comparable; the exponential
// kernel would otherwise turn centroid-norm spread into orders-of-magnitude
// mass imbalance between clusters.
inline TokenBatch generate_synthetic_batch(const SynthSpec& spec, int layer = 4) {
    spec.validate();
    Rng rng(spec.seed);

    const std::size_t h_count = spec.heads;
    const std::size_t n = spec.n_img + spec.n_text;
    const std::size_t d = spec.head_dim;
    const std::size_t dv = spec.value_dim;
    const double cap = spec.resolved_key_norm_cap();

    // Per-head centroids; the token->cluster map is shared across heads so a
    // planted duplicate pair is duplicated in every head.
    Tensor centroid_keys({h_count, spec.cluster_count, d});
    Tensor centroid_values({h_count, spec.cluster_count, dv});
    for (std::size_t h = 0; h < h_count; ++h) {
        for (std::size_t c = 0; c < spec.cluster_count; ++c) {
            std::span<double> ck{&centroid_keys(h, c, 0), d};
            std::span<double> cv{&centroid_values(h, c, 0), dv};
            detail::fill_normal(rng, ck);
            detail::fill_normal(rng, cv);
            const double kn = norm(std::span<const double>(ck.data(), d));
            if (kn > 0.0) {
                const double scale = std::sqrt(static_cast<double>(d)) / kn;
                for (double& v : ck) {
                    v *= scale;
                }
            }
            const double vn = norm(std::span<const double>(cv.data(), dv));
            if (vn > 0.0) {
                const double scale = std::sqrt(static_cast<double>(dv)) / vn;
                for (double& v : cv) {
                    v *= scale;
                }
            }
        }
    }

    std::vector<double> salience(spec.n_img);
    for (double& s : salience) {
        s = std::exp(kSalienceSigma * rng.normal());
    }

    TokenBatch batch;
    batch.queries = Tensor({h_count, n, d});
    batch.keys = Tensor({h_count, n, d});
    batch.values = Tensor({h_count, n, dv});
    batch.n_img = spec.n_img;
    batch.n_text = spec.n_text;
    batch.layer_index = layer;

    std::vector<std::size_t> assignment(spec.n_img);
    for (std::size_t i = 0; i < spec.n_img; ++i) {
        assignment[i] = i % spec.cluster_count;
    }

    std::vector<double> noise(std::max(d, dv));
    for (std::size_t h = 0; h < h_count; ++h) {
        for (std::size_t i = 0; i < spec.n_img; ++i) {
            const std::size_t c = assignment[i];
            detail::fill_normal(rng, {&batch.queries(h, i, 0), d});
            detail::fill_normal(rng, std::span<double>(noise.data(), d));
            for (std::size_t j = 0; j < d; ++j) {
                batch.keys(h, i, j) = centroid_keys(h, c, j) + spec.cluster_noise * noise[j];
            }
            detail::fill_normal(rng, std::span<double>(noise.data(), dv));
            for (std::size_t j = 0; j < dv; ++j) {
                batch.values(h, i, j) =
                    salience[i] * (centroid_values(h, c, j) + spec.cluster_noise * noise[j]);
            }
        }
        for (std::size_t t = 0; t < spec.n_text; ++t) {
            const std::size_t i = spec.n_img + t;
            detail::fill_normal(rng, {&batch.queries(h, i, 0), d});
            detail::fill_normal(rng, {&batch.keys(h, i, 0), d});
            detail::fill_normal(rng, {&batch.values(h, i, 0), dv});
        }
        // Keep exp(k.k'/sqrt(d)) finite in 64-bit.
        for (std::size_t i = 0; i < n; ++i) {
            detail::cap_row_norm({&batch.keys(h, i, 0), d}, cap);
        }
    }

    batch.positions.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        batch.positions[i] = static_cast<std::int64_t>(i);
    }
    batch.cluster_assignment = std::move(assignment);
    batch.validate();
    return batch;
}

// --- manifest I/O -----------------------------------------------------------

inline TokenBatch load_batch(const std::string& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) {
        throw IoError("manifest: cannot open " + manifest_path);
    }
    nlohmann::json m;
    try {
        in >> m;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("manifest: invalid JSON in " + manifest_path + ": " + e.what());
    }

    if (m.contains("schema") && m["schema"] != kManifestSchema) {
        throw UnsupportedError("manifest: unknown schema '" + m["schema"].get<std::string>() +
                               "' in " + manifest_path);
    }
    for (const char* field : {"queries", "keys", "values", "n_img", "n_text", "layer"}) {
        if (!m.contains(field)) {
            throw FormatError(std::string("manifest: missing field '") + field + "' in " +
                              manifest_path);
        }
    }

    const auto dir = std::filesystem::path(manifest_path).parent_path();
    const auto resolve = [&](const std::string& rel) { return (dir / rel).string(); };

    TokenBatch batch;
    try {
        batch.queries = npy::read(resolve(m["queries"].get<std::string>()));
        batch.keys = npy::read(resolve(m["keys"].get<std::string>()));
        batch.values = npy::read(resolve(m["values"].get<std::string>()));
        if (m.contains("hidden") && !m["hidden"].is_null()) {
            batch.hidden = npy::read(resolve(m["hidden"].get<std::string>()));
        }
        batch.n_img = m["n_img"].get<std::size_t>();
        batch.n_text = m["n_text"].get<std::size_t>();
        batch.layer_index = m["layer"].get<int>();
        if (m.contains("positions") && !m["positions"].is_null()) {
            batch.positions = m["positions"].get<std::vector<std::int64_t>>();
        } else {
            batch.positions.resize(batch.n_img + batch.n_text);
            for (std::size_t i = 0; i < batch.positions.size(); ++i) {
                batch.positions[i] = static_cast<std::int64_t>(i);
            }
        }
        if (m.contains("cluster_assignment") && !m["cluster_assignment"].is_null()) {
            batch.cluster_assignment = m["cluster_assignment"].get<std::vector<std::size_t>>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("manifest: bad field type in " + manifest_path + ": " + e.what());
    }

    batch.validate();
    return batch;
}

// Writes the tensors as NPY files plus a manifest next to them; returns the
// manifest path. Default consecutive positions are omitted from the manifest.
inline std::string save_batch(const TokenBatch& batch, const std::string& out_dir) {
    batch.validate();
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) {
        throw IoError("manifest: cannot create directory " + out_dir + ": " + ec.message());
    }
    const std::filesystem::path dir(out_dir);

    npy::write((dir / "queries.npy").string(), batch.queries);
    npy::write((dir / "keys.npy").string(), batch.keys);
    npy::write((dir / "values.npy").string(), batch.values);
    if (batch.hidden.has_value()) {
        npy::write((dir / "hidden.npy").string(), *batch.hidden);
    }

    nlohmann::ordered_json m;
    m["schema"] = kManifestSchema;
    m["queries"] = "queries.npy";
    m["keys"] = "keys.npy";
    m["values"] = "values.npy";
    if (batch.hidden.has_value()) {
        m["hidden"] = "hidden.npy";
    }
    m["n_img"] = batch.n_img;
    m["n_text"] = batch.n_text;
    m["layer"] = batch.layer_index;
    bool default_positions = true;
    for (std::size_t i = 0; i < batch.positions.size(); ++i) {
        if (batch.positions[i] != static_cast<std::int64_t>(i)) {
            default_positions = false;
            break;
        }
    }
    if (!default_positions) {
        m["positions"] = batch.positions;
    }
    if (batch.cluster_assignment.has_value()) {
        m["cluster_assignment"] = *batch.cluster_assignment;
    }

    const std::string manifest_path = (dir / "manifest.json").string();
    std::ofstream out(manifest_path, std::ios::trunc);
    if (!out) {
        throw IoError("manifest: cannot open " + manifest_path + " for writing");
    }
    out << m.dump(2) << '\n';
    if (!out) {
        throw IoError("manifest: write failed for " + manifest_path);
    }
    return manifest_path;
}

}  // namespace dualprune
