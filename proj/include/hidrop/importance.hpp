// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "hidrop/core.hpp"
#include "hidrop/dtopk.hpp"
#include "hidrop/layout.hpp"

namespace hidrop {

// Saliency strategies, named after the scoring variants they implement:
// a single final-text-token query, one query per conversation round (the
// final token of each text segment), or every text token, each optionally
// weighted by the query's hidden-state L2 norm.
enum class SaliencyStrategy { LastToken1R, LastTokenNR, LastTokenNR_L2, AllToken, AllToken_L2 };

enum class SoftmaxDomain { VisionOnly, CausalFull };
enum class HeadAgg { Mean, Max };

struct SaliencyConfig {
    SaliencyStrategy strategy = SaliencyStrategy::LastTokenNR;
    SoftmaxDomain domain = SoftmaxDomain::VisionOnly;
    HeadAgg head_agg = HeadAgg::Mean;
};

inline const char* saliency_name(SaliencyStrategy s) {
    switch (s) {
        case SaliencyStrategy::LastToken1R: return "last-token-1r";
        case SaliencyStrategy::LastTokenNR: return "last-token-nr";
        case SaliencyStrategy::LastTokenNR_L2: return "last-token-nr-l2";
        case SaliencyStrategy::AllToken: return "all-token";
        case SaliencyStrategy::AllToken_L2: return "all-token-l2";
    }
    return "?";
}

inline SaliencyStrategy saliency_from_name(const std::string& s) {
    for (SaliencyStrategy v : {SaliencyStrategy::LastToken1R, SaliencyStrategy::LastTokenNR,
                               SaliencyStrategy::LastTokenNR_L2, SaliencyStrategy::AllToken,
                               SaliencyStrategy::AllToken_L2})
        if (s == saliency_name(v)) return v;
    throw std::invalid_argument("unknown saliency strategy '" + s + "'");
}

namespace detail {

inline bool uses_l2(SaliencyStrategy s) {
    return s == SaliencyStrategy::LastTokenNR_L2 || s == SaliencyStrategy::AllToken_L2;
}

// Query positions for a strategy: last live text token, last token per
// segment, or all live text tokens.
inline std::vector<std::size_t> query_positions(const SequenceLayout& layout,
                                                std::span<const std::uint8_t> live,
                                                SaliencyStrategy strategy) {
    std::vector<std::size_t> text;
    for (std::size_t t = layout.text_begin(); t < layout.size(); ++t)
        if (live[t]) text.push_back(t);
    if (text.empty())
        throw std::invalid_argument("saliency: no live text query positions");
    switch (strategy) {
        case SaliencyStrategy::LastToken1R:
            return {text.back()};
        case SaliencyStrategy::AllToken:
        case SaliencyStrategy::AllToken_L2:
            return text;
        case SaliencyStrategy::LastTokenNR:
        case SaliencyStrategy::LastTokenNR_L2: {
            std::vector<std::size_t> rounds;
            for (std::size_t i = 0; i < text.size(); ++i) {
                const bool last_of_segment =
                    i + 1 == text.size() ||
                    layout.tokens[text[i + 1]].segment != layout.tokens[text[i]].segment;
                if (last_of_segment) rounds.push_back(text[i]);
            }
            return rounds;
        }
    }
    throw std::logic_error("saliency: unreachable");
}

}  // namespace detail

// Vision-token saliency from a lightweight auxiliary attention pass:
// per-head attention rows of the configured text queries over the live
// vision keys (softmax over the configured domain), aggregated over heads
// and then over queries. q_heads/k_heads are per-head token x head_dim
// matrices with RoPE already applied; hidden supplies the query-norm
// weights for the L2 variants. Returns one score per live vision token,
// in original index order.
inline std::vector<double> saliency(std::span<const Matrix> q_heads, std::span<const Matrix> k_heads,
                                    const Matrix& hidden, const SequenceLayout& layout,
                                    std::span<const std::uint8_t> live, const SaliencyConfig& cfg) {
    if (q_heads.size() != k_heads.size() || q_heads.empty())
        throw std::invalid_argument("saliency: per-head q/k mismatch");
    const std::size_t head_dim = q_heads[0].cols;
    const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));

    std::vector<std::size_t> vision;
    for (std::size_t t = layout.vision_begin(); t < layout.vision_end(); ++t)
        if (live[t]) vision.push_back(t);
    if (vision.empty())
        throw std::invalid_argument("saliency: no live vision tokens");

    const auto queries = detail::query_positions(layout, live, cfg.strategy);

    std::vector<double> weights(queries.size(), 1.0 / static_cast<double>(queries.size()));
    if (detail::uses_l2(cfg.strategy)) {
        double total = 0.0;
        for (std::size_t i = 0; i < queries.size(); ++i) {
            weights[i] = norm2(hidden.row(queries[i]));
            total += weights[i];
        }
        if (total == 0.0)
            throw std::invalid_argument("saliency: all query norms are zero");
        for (double& w : weights) w /= total;
    }

    std::vector<double> scores(vision.size(), 0.0);
    for (std::size_t qi = 0; qi < queries.size(); ++qi) {
        const std::size_t q = queries[qi];
        std::vector<double> per_token(vision.size(), 0.0);
        for (std::size_t h = 0; h < q_heads.size(); ++h) {
            std::vector<double> row;
            if (cfg.domain == SoftmaxDomain::VisionOnly) {
                row.resize(vision.size());
                for (std::size_t i = 0; i < vision.size(); ++i)
                    row[i] = scale * dot(q_heads[h].row(q), k_heads[h].row(vision[i]));
                row = softmax(row);
            } else {
                // softmax over the full causal live key set, then slice out
                // the vision columns (no renormalization)
                std::vector<std::size_t> keys;
                for (std::size_t t = 0; t <= q; ++t)
                    if (live[t]) keys.push_back(t);
                std::vector<double> logits(keys.size());
                for (std::size_t i = 0; i < keys.size(); ++i)
                    logits[i] = scale * dot(q_heads[h].row(q), k_heads[h].row(keys[i]));
                const auto probs = softmax(logits);
                row.assign(vision.size(), 0.0);
                for (std::size_t i = 0; i < keys.size(); ++i) {
                    const auto it = std::lower_bound(vision.begin(), vision.end(), keys[i]);
                    if (it != vision.end() && *it == keys[i])
                        row[static_cast<std::size_t>(it - vision.begin())] = probs[i];
                }
            }
            for (std::size_t i = 0; i < vision.size(); ++i) {
                if (cfg.head_agg == HeadAgg::Mean)
                    per_token[i] += row[i] / static_cast<double>(q_heads.size());
                else
                    per_token[i] = std::max(per_token[i], row[i]);
            }
        }
        for (std::size_t i = 0; i < vision.size(); ++i) scores[i] += weights[qi] * per_token[i];
    }
    return scores;
}

struct Selection {
    SoftMask mask;
    std::vector<std::size_t> survivors;  // global token indices, ascending
};

// Saliency -> DTop-K with a = keep_count_to_ratio(k, n_live) -> exactly k
// survivors in original index order. Boundary ties break toward the lower
// original index; the keep set is then truncated/extended to exactly k.
inline Selection score_and_select(std::span<const Matrix> q_heads, std::span<const Matrix> k_heads,
                                  const Matrix& hidden, const SequenceLayout& layout,
                                  std::span<const std::uint8_t> live, const SaliencyConfig& cfg,
                                  std::size_t k, double lambda,
                                  RankVariant variant = RankVariant::Hard) {
    std::vector<std::size_t> vision;
    for (std::size_t t = layout.vision_begin(); t < layout.vision_end(); ++t)
        if (live[t]) vision.push_back(t);
    if (k > vision.size())
        throw std::invalid_argument("score_and_select: k exceeds live vision tokens");

    const auto scores = saliency(q_heads, k_heads, hidden, layout, live, cfg);
    Selection sel;
    sel.mask = soft_mask(scores, keep_count_to_ratio(k, vision.size()), lambda, variant);
    const auto kept = select_top_k(scores, k);
    for (std::size_t i : kept) sel.survivors.push_back(vision[i]);
    return sel;
}

}  // namespace hidrop
