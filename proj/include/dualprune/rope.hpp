#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "dualprune/error.hpp"
#include "dualprune/tensor.hpp"

namespace dualprune {

// Rotary position embedding with interleaved even/odd pairing: dimensions
// (2j, 2j+1) rotate by pos * base^(-2j/d). Norm-preserving per row.
struct RopeParams {
    double base = 10000.0;
    bool rotate = true;

    void validate(std::size_t dim) const {
        if (base <= 1.0) {
            throw ConfigError("rope: base must exceed 1");
        }
        if (rotate && dim % 2 != 0) {
            throw ConfigError("rope: head dim must be even, got " + std::to_string(dim));
        }
    }
};

inline void rope_rotate_row(std::span<double> row, std::int64_t position, const RopeParams& params) {
    params.validate(row.size());
    if (!params.rotate) {
        return;
    }
    const double d = static_cast<double>(row.size());
    for (std::size_t j = 0; j * 2 < row.size(); ++j) {
        const double freq = std::pow(params.base, -2.0 * static_cast<double>(j) / d);
        const double angle = static_cast<double>(position) * freq;
        const double c = std::cos(angle);
        const double s = std::sin(angle);
        const double x = row[2 * j];
        const double y = row[2 * j + 1];
        row[2 * j] = x * c - y * s;
        row[2 * j + 1] = x * s + y * c;
    }
}

// Rotates each row of an [N, d] matrix at its own position.
inline Tensor apply_rope(const MatView& mat, std::span<const std::int64_t> positions,
                         const RopeParams& params) {
    if (positions.size() != mat.rows) {
        throw DataError("rope: positions length does not match row count");
    }
    Tensor out({mat.rows, mat.cols});
    for (std::size_t i = 0; i < mat.rows; ++i) {
        const auto src = mat.row(i);
        std::span<double> dst{&out(i, 0), mat.cols};
        for (std::size_t j = 0; j < mat.cols; ++j) {
            dst[j] = src[j];
        }
        rope_rotate_row(dst, positions[i], params);
    }
    return out;
}

}  // namespace dualprune
