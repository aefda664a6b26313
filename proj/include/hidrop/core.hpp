// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace hidrop {

// Row-major dense matrix of 64-bit floats. All exported operations keep
// entries finite; NaN/Inf escaping an op is a bug.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0)
        : rows(r), cols(c), data(r * c, fill) {}

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

// splitmix64: the one PRNG used everywhere. Chosen because its output is a
// pure function of the 64-bit seed with no platform-dependent state, so
// golden values reproduce across machines. Fill order is always row-major.
struct SplitMix64 {
    std::uint64_t state;

    explicit SplitMix64(std::uint64_t seed) : state(seed) {}

    std::uint64_t next() {
        std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1), 53-bit resolution
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    std::uint64_t below(std::uint64_t n) { return next() % n; }
};

inline double dot(std::span<const double> u, std::span<const double> v) {
    double s = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) s += u[i] * v[i];
    return s;
}

inline double norm2(std::span<const double> u) { return std::sqrt(dot(u, u)); }

// Cosine similarity, clamped to [-1, 1] against rounding excursions.
inline double cosine(std::span<const double> u, std::span<const double> v) {
    if (u.size() != v.size())
        throw std::invalid_argument("cosine: length mismatch (" + std::to_string(u.size()) +
                                    " vs " + std::to_string(v.size()) + ")");
    const double nu = norm2(u);
    const double nv = norm2(v);
    if (nu == 0.0 || nv == 0.0)
        throw std::invalid_argument("cosine: zero-norm vector");
    double c = dot(u, v) / (nu * nv);
    if (c > 1.0) c = 1.0;
    if (c < -1.0) c = -1.0;
    return c;
}

// Numerically stabilized softmax. mask, when given, marks entries to keep
// (1) or drop (0); dropped entries come back as exact 0.
inline std::vector<double> softmax(std::span<const double> row,
                                   const std::vector<std::uint8_t>* mask = nullptr) {
    const std::size_t n = row.size();
    if (mask && mask->size() != n)
        throw std::invalid_argument("softmax: mask length mismatch");
    double mx = -std::numeric_limits<double>::infinity();
    std::size_t kept = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (mask && !(*mask)[i]) continue;
        ++kept;
        if (row[i] > mx) mx = row[i];
    }
    if (kept == 0)
        throw std::invalid_argument("softmax: all entries masked");
    std::vector<double> out(n, 0.0);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (mask && !(*mask)[i]) continue;
        out[i] = std::exp(row[i] - mx);
        sum += out[i];
    }
    for (std::size_t i = 0; i < n; ++i)
        if (!mask || (*mask)[i]) out[i] /= sum;
    return out;
}

// Rotary embedding parameters. head_dim must be even; angles are
// position * base^(-2k/head_dim) for pair index k.
struct RopeParams {
    std::size_t head_dim = 0;
    double base = 10000.0;

    void validate() const {
        if (head_dim == 0 || head_dim % 2 != 0)
            throw std::invalid_argument("RopeParams: head_dim must be positive and even");
        if (!(base > 1.0))
            throw std::invalid_argument("RopeParams: base must be > 1");
    }
};

// Standard pairwise RoPE rotation of a per-head vector at an integer
// position id. Norm-preserving; position 0 is the identity.
inline std::vector<double> rope_rotate(std::span<const double> x, std::int64_t position,
                                       const RopeParams& params) {
    params.validate();
    if (x.size() != params.head_dim)
        throw std::invalid_argument("rope_rotate: vector length != head_dim");
    std::vector<double> out(x.size());
    const double d = static_cast<double>(params.head_dim);
    for (std::size_t k = 0; 2 * k < x.size(); ++k) {
        const double theta =
            static_cast<double>(position) * std::pow(params.base, -2.0 * static_cast<double>(k) / d);
        const double c = std::cos(theta);
        const double s = std::sin(theta);
        const double a = x[2 * k];
        const double b = x[2 * k + 1];
        out[2 * k] = a * c - b * s;
        out[2 * k + 1] = a * s + b * c;
    }
    return out;
}

// Deterministic random matrix: splitmix64 seeded with `seed`, entries drawn
// uniform in [-scale, scale), filled row-major.
inline Matrix seeded_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed, double scale) {
    if (!(scale > 0.0))
        throw std::invalid_argument("seeded_matrix: scale must be positive");
    Matrix m(rows, cols);
    SplitMix64 rng(seed);
    for (double& v : m.data) v = rng.uniform(-scale, scale);
    return m;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows)
        throw std::invalid_argument("matmul: inner dimension mismatch");
    Matrix c(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            const double* brow = b.data.data() + k * b.cols;
            double* crow = c.data.data() + i * b.cols;
            for (std::size_t j = 0; j < b.cols; ++j) crow[j] += aik * brow[j];
        }
    }
    return c;
}

}  // namespace hidrop
