#include <catch2/catch_amalgamated.hpp>

#include <vector>

#include "dualprune/batch.hpp"
#include "dualprune/rng.hpp"
#include "dualprune/tensor.hpp"
#include "test_util.hpp"

using namespace dualprune;

TEST_CASE("single noiseless cluster makes all image keys identical") {
    SynthSpec spec;
    spec.cluster_count = 1;
    spec.cluster_noise = 0.0;
    spec.n_img = 12;
    const TokenBatch batch = generate_synthetic_batch(spec);
    for (std::size_t h = 0; h < batch.heads(); ++h) {
        const MatView keys = head_slice(batch.keys, h);
        for (std::size_t i = 1; i < batch.n_img; ++i) {
            for (std::size_t j = 0; j < keys.cols; ++j) {
                REQUIRE(keys(i, j) == keys(0, j));
            }
        }
    }
}

TEST_CASE("generation is a pure function of the spec") {
    SynthSpec spec;
    spec.seed = 991;
    const TokenBatch a = generate_synthetic_batch(spec);
    const TokenBatch b = generate_synthetic_batch(spec);
    CHECK(a.queries == b.queries);
    CHECK(a.keys == b.keys);
    CHECK(a.values == b.values);
    CHECK(a.positions == b.positions);
    CHECK(a.cluster_assignment == b.cluster_assignment);

    spec.seed = 992;
    const TokenBatch c = generate_synthetic_batch(spec);
    CHECK_FALSE(a.keys == c.keys);
}

TEST_CASE("planted clusters are visible in key cosines") {
    SynthSpec spec;  // H=2, N_img=64, N_text=8, d=16, d_v=16, 4 clusters, noise 0.05
    spec.seed = 7;
    const TokenBatch batch = generate_synthetic_batch(spec);
    REQUIRE(batch.cluster_assignment.has_value());
    const auto& clusters = *batch.cluster_assignment;

    double within = 0.0, cross = 0.0;
    std::size_t n_within = 0, n_cross = 0;
    for (std::size_t h = 0; h < batch.heads(); ++h) {
        const MatView keys = head_slice(batch.keys, h);
        for (std::size_t i = 0; i < batch.n_img; ++i) {
            for (std::size_t j = i + 1; j < batch.n_img; ++j) {
                const double c = cosine(keys.row(i), keys.row(j));
                if (clusters[i] == clusters[j]) {
                    within += c;
                    ++n_within;
                } else {
                    cross += c;
                    ++n_cross;
                }
            }
        }
    }
    REQUIRE(n_within > 0);
    REQUIRE(n_cross > 0);
    CHECK(within / static_cast<double>(n_within) > cross / static_cast<double>(n_cross));
}

TEST_CASE("generated batches satisfy the batch invariants") {
    Rng rng(55);
    for (int trial = 0; trial < 25; ++trial) {
        SynthSpec spec;
        spec.heads = 1 + rng.uniform_below(4);
        spec.n_img = 1 + rng.uniform_below(40);
        spec.n_text = 1 + rng.uniform_below(10);
        spec.head_dim = 1 + rng.uniform_below(24);
        spec.value_dim = 1 + rng.uniform_below(24);
        spec.cluster_count = 1 + rng.uniform_below(spec.n_img);
        spec.cluster_noise = rng.uniform() * 0.5;
        spec.seed = rng.next_u64();
        const TokenBatch batch = generate_synthetic_batch(spec);
        REQUIRE_NOTHROW(batch.validate());

        const double cap = spec.resolved_key_norm_cap();
        for (std::size_t h = 0; h < batch.heads(); ++h) {
            const MatView keys = head_slice(batch.keys, h);
            for (std::size_t i = 0; i < batch.tokens(); ++i) {
                REQUIRE(norm(keys.row(i)) <= cap * (1.0 + 1e-12));
            }
        }
    }
}

TEST_CASE("spec validation rejects bad parameters") {
    SynthSpec spec;
    spec.cluster_count = 100;
    spec.n_img = 64;
    CHECK_THROWS_AS(generate_synthetic_batch(spec), ConfigError);

    SynthSpec negative_noise;
    negative_noise.cluster_noise = -0.1;
    CHECK_THROWS_AS(generate_synthetic_batch(negative_noise), ConfigError);
}

TEST_CASE("manifest round trip preserves the batch") {
    TempDir dir;
    SynthSpec spec;
    spec.seed = 31;
    const TokenBatch batch = generate_synthetic_batch(spec);
    const std::string manifest = save_batch(batch, dir.file("batch"));
    const TokenBatch back = load_batch(manifest);
    CHECK(back.queries == batch.queries);
    CHECK(back.keys == batch.keys);
    CHECK(back.values == batch.values);
    CHECK(back.n_img == batch.n_img);
    CHECK(back.n_text == batch.n_text);
    CHECK(back.layer_index == batch.layer_index);
    CHECK(back.positions == batch.positions);
    CHECK(back.cluster_assignment == batch.cluster_assignment);
    CHECK_FALSE(back.hidden.has_value());
}

TEST_CASE("manifest consistency errors are reported") {
    TempDir dir;
    SynthSpec spec;
    spec.n_img = 8;
    spec.n_text = 2;
    const TokenBatch batch = generate_synthetic_batch(spec);
    const std::string manifest = save_batch(batch, dir.file("batch"));

    SECTION("token-count mismatch between keys and values") {
        Tensor bad_values({batch.heads(), batch.tokens() - 1, batch.value_dim()});
        npy::write(dir.file("batch") + "/values.npy", bad_values);
        CHECK_THROWS_AS(load_batch(manifest), DataError);
    }
    SECTION("missing tensor file") {
        std::filesystem::remove(dir.file("batch") + "/keys.npy");
        CHECK_THROWS_AS(load_batch(manifest), IoError);
    }
    SECTION("missing required field") {
        write_file_bytes(manifest, "{\"queries\": \"queries.npy\"}");
        CHECK_THROWS_AS(load_batch(manifest), FormatError);
    }
    SECTION("invalid json") {
        write_file_bytes(manifest, "{nope");
        CHECK_THROWS_AS(load_batch(manifest), FormatError);
    }
}

TEST_CASE("manifest with hidden tensor loads it") {
    TempDir dir;
    SynthSpec spec;
    spec.n_img = 4;
    spec.n_text = 2;
    TokenBatch batch = generate_synthetic_batch(spec);
    batch.hidden = Tensor({batch.tokens(), 5});
    for (std::size_t i = 0; i < batch.hidden->size(); ++i) {
        (*batch.hidden)(i) = static_cast<double>(i) * 0.25;
    }
    const std::string manifest = save_batch(batch, dir.file("batch"));
    const TokenBatch back = load_batch(manifest);
    REQUIRE(back.hidden.has_value());
    CHECK(*back.hidden == *batch.hidden);
}
