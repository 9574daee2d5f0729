#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dualprune/error.hpp"

namespace dualprune {

// Dense row-major tensor of doubles. Shapes are immutable after
// construction; element storage is contiguous.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape)
        : shape_(std::move(shape)), data_(element_count(shape_), 0.0) {}

    Tensor(std::vector<std::size_t> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (element_count(shape_) != data_.size()) {
            throw DataError("tensor shape/data mismatch: shape holds " +
                            std::to_string(element_count(shape_)) + " elements, data holds " +
                            std::to_string(data_.size()));
        }
    }

    static std::size_t element_count(const std::vector<std::size_t>& shape) {
        return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                               [](std::size_t a, std::size_t b) { return a * b; });
    }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

    std::span<const double> data() const { return data_; }
    std::span<double> data() { return data_; }

    double operator()(std::size_t i) const { return data_[i]; }
    double& operator()(std::size_t i) { return data_[i]; }
    double operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
    double& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    double operator()(std::size_t i, std::size_t j, std::size_t k) const {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    double& operator()(std::size_t i, std::size_t j, std::size_t k) {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }

    bool all_finite() const {
        for (double v : data_) {
            if (!std::isfinite(v)) {
                return false;
            }
        }
        return true;
    }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

// Read-only 2-D view, used for per-head slices of [H, N, d] tensors.
struct MatView {
    const double* ptr = nullptr;
    std::size_t rows = 0;
    std::size_t cols = 0;

    std::span<const double> row(std::size_t i) const { return {ptr + i * cols, cols}; }
    double operator()(std::size_t i, std::size_t j) const { return ptr[i * cols + j]; }
};

inline MatView mat_view(const Tensor& t) {
    if (t.rank() != 2) {
        throw DataError("mat_view expects a rank-2 tensor, got rank " + std::to_string(t.rank()));
    }
    return {t.data().data(), t.dim(0), t.dim(1)};
}

// View of head h in a [H, N, d] tensor.
inline MatView head_slice(const Tensor& t, std::size_t h) {
    if (t.rank() != 3) {
        throw DataError("head_slice expects a rank-3 tensor, got rank " + std::to_string(t.rank()));
    }
    if (h >= t.dim(0)) {
        throw DataError("head index " + std::to_string(h) + " out of range for " +
                        std::to_string(t.dim(0)) + " heads");
    }
    const std::size_t n = t.dim(1);
    const std::size_t d = t.dim(2);
    return {t.data().data() + h * n * d, n, d};
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        acc += a[i] * b[i];
    }
    return acc;
}

inline double squared_norm(std::span<const double> a) { return dot(a, a); }

inline double norm(std::span<const double> a) { return std::sqrt(squared_norm(a)); }

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double diff = a[i] - b[i];
        acc += diff * diff;
    }
    return acc;
}

// Cosine similarity with the zero-norm convention used throughout: a vector
// of zero norm carries no direction, so its cosine with anything is 0.
// `flagged` is set when the convention fires. Clamped to [-1, 1] so squared
// similarities stay inside [0, 1] under roundoff.
inline double cosine(std::span<const double> a, std::span<const double> b, bool* flagged = nullptr) {
    const double na = norm(a);
    const double nb = norm(b);
    if (na == 0.0 || nb == 0.0) {
        if (flagged != nullptr) {
            *flagged = true;
        }
        return 0.0;
    }
    const double c = dot(a, b) / (na * nb);
    return c < -1.0 ? -1.0 : (c > 1.0 ? 1.0 : c);
}

inline bool all_finite(std::span<const double> a) {
    for (double v : a) {
        if (!std::isfinite(v)) {
            return false;
        }
    }
    return true;
}

}  // namespace dualprune
