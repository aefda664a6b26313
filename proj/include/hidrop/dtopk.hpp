// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

#include "hidrop/core.hpp"

namespace hidrop {

// Rank relaxation used inside the differentiable top-k.
//   Hard: c'_i = (1/n) |{j : c_i >= c_j}|  (a token ties with itself, so the
//         minimum rank is 1/n and ranks are multiples of 1/n)
//   Soft: cross-term indicators are replaced by sigmoid((c_i - c_j)/tau);
//         the self comparison stays exact (always 1), so the soft rank
//         converges to the hard rank as tau -> 0 on tie-free inputs.
enum class RankVariant { Hard, Soft };

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline std::vector<double> normalized_rank(std::span<const double> c, RankVariant variant,
                                           double tau = 0.0) {
    const std::size_t n = c.size();
    if (n == 0)
        throw std::invalid_argument("normalized_rank: empty score vector");
    if (variant == RankVariant::Soft && !(tau > 0.0))
        throw std::invalid_argument("normalized_rank: soft variant needs tau > 0");
    std::vector<double> r(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            if (variant == RankVariant::Hard || i == j)
                acc += (c[i] >= c[j]) ? 1.0 : 0.0;
            else
                acc += sigmoid((c[i] - c[j]) / tau);
        }
        r[i] = acc / static_cast<double>(n);
    }
    return r;
}

// Differentiable top-k mask: ranks pushed through sigmoid(lambda * (c' - a)),
// hard selection by thresholding the soft value at 0.5 (equivalently c' > a).
struct SoftMask {
    std::size_t n = 0;
    std::vector<double> scores;
    std::vector<double> normalized_ranks;
    std::vector<double> soft_values;
    std::vector<std::uint8_t> hard_keep;
    double a = 0.0;
    double lambda = 1.0;
    RankVariant variant = RankVariant::Hard;
    double tau = 0.0;  // soft-rank temperature, 0 for hard variant
};

inline SoftMask soft_mask(std::span<const double> c, double a, double lambda,
                          RankVariant variant = RankVariant::Hard, double tau = 0.0) {
    if (!(a >= 0.0 && a < 1.0))
        throw std::invalid_argument("soft_mask: pruning ratio a must lie in [0, 1)");
    if (!(lambda > 0.0))
        throw std::invalid_argument("soft_mask: lambda must be positive");
    SoftMask m;
    m.n = c.size();
    m.scores.assign(c.begin(), c.end());
    if (variant == RankVariant::Soft && tau == 0.0)
        tau = 1.0 / static_cast<double>(m.n);  // default temperature 1/n
    m.normalized_ranks = normalized_rank(c, variant, tau);
    m.a = a;
    m.lambda = lambda;
    m.variant = variant;
    m.tau = tau;
    m.soft_values.resize(m.n);
    m.hard_keep.resize(m.n);
    for (std::size_t i = 0; i < m.n; ++i) {
        m.soft_values[i] = sigmoid(lambda * (m.normalized_ranks[i] - a));
        m.hard_keep[i] = m.normalized_ranks[i] > a ? 1 : 0;
    }
    return m;
}

// Threshold that keeps exactly k of n tokens under hard ranks (which are
// multiples of 1/n): a = (n-k)/n + 1/(2n), placed halfway between the k-th
// and (k+1)-th rank levels.
inline double keep_count_to_ratio(std::size_t k, std::size_t n) {
    if (k == 0 || k > n)
        throw std::invalid_argument("keep_count_to_ratio: need 0 < k <= n");
    const double nd = static_cast<double>(n);
    return (nd - static_cast<double>(k)) / nd + 1.0 / (2.0 * nd);
}

// Analytic gradients of the soft mask.
//   d_a[i]        = d soft_values[i] / d a = -lambda * s_i (1 - s_i)
//   d_scores(i,j) = d soft_values[i] / d c_j (soft-rank variant only; the
//                   hard rank is piecewise constant in c, so its gradient
//                   w.r.t. the scores is defined as zero)
struct MaskGradients {
    std::vector<double> d_a;
    Matrix d_scores;  // n x n Jacobian
};

inline MaskGradients mask_gradients(const SoftMask& m) {
    MaskGradients g;
    g.d_a.resize(m.n);
    g.d_scores = Matrix(m.n, m.n, 0.0);
    for (std::size_t i = 0; i < m.n; ++i) {
        const double s = m.soft_values[i];
        g.d_a[i] = -m.lambda * s * (1.0 - s);
    }
    if (m.variant == RankVariant::Soft) {
        const double n = static_cast<double>(m.n);
        for (std::size_t i = 0; i < m.n; ++i) {
            const double outer = m.lambda * m.soft_values[i] * (1.0 - m.soft_values[i]);
            double diag = 0.0;
            for (std::size_t j = 0; j < m.n; ++j) {
                if (j == i) continue;  // sigmoid(0) self term is constant in c_i
                const double p = sigmoid((m.scores[i] - m.scores[j]) / m.tau);
                const double dp = p * (1.0 - p) / (m.tau * n);
                g.d_scores(i, j) = -outer * dp;
                diag += dp;
            }
            g.d_scores(i, i) = outer * diag;
        }
    }
    return g;
}

// Hard top-k selection with the deterministic tie rule: rank descending,
// then original index ascending, truncated to exactly k survivors. Returned
// indices are in original order.
inline std::vector<std::size_t> select_top_k(std::span<const double> c, std::size_t k) {
    const std::size_t n = c.size();
    if (k > n)
        throw std::invalid_argument("select_top_k: k exceeds candidate count");
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t i, std::size_t j) { return c[i] > c[j]; });
    order.resize(k);
    std::sort(order.begin(), order.end());
    return order;
}

}  // namespace hidrop
