// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "hidrop/core.hpp"
#include "hidrop/dtopk.hpp"
#include "hidrop/trace.hpp"

namespace hidrop {

// Consecutive-layer representation similarity for one modality: for each
// transition l -> l+1, the mean over samples of the mean over that
// modality's tokens of cosine(x_t^l, x_t^{l+1}).
inline std::vector<double> s_intra(std::span<const LayerTrace> traces, Modality modality) {
    if (traces.empty())
        throw std::invalid_argument("s_intra: no traces");
    const std::size_t L = traces[0].layers;
    std::vector<double> out(L, 0.0);
    for (const LayerTrace& tr : traces) {
        if (tr.layers != L)
            throw std::invalid_argument("s_intra: traces disagree on layer count");
        const auto toks = tr.tokens_of(modality);
        if (toks.empty())
            throw std::invalid_argument(std::string("s_intra: modality ") +
                                        modality_name(modality) + " absent from trace '" +
                                        tr.sample_id + "'");
        for (std::size_t l = 0; l < L; ++l) {
            double acc = 0.0;
            for (std::size_t t : toks)
                acc += cosine(tr.hidden[l].row(t), tr.hidden[l + 1].row(t));
            out[l] += acc / static_cast<double>(toks.size());
        }
    }
    for (double& v : out) v /= static_cast<double>(traces.size());
    return out;
}

namespace detail {

inline std::vector<double> mean_pooled(const Matrix& hidden, std::span<const std::size_t> toks) {
    std::vector<double> v(hidden.cols, 0.0);
    for (std::size_t t : toks) {
        auto row = hidden.row(t);
        for (std::size_t c = 0; c < v.size(); ++c) v[c] += row[c];
    }
    for (double& x : v) x /= static_cast<double>(toks.size());
    return v;
}

}  // namespace detail

// Cross-modal influence probe: per layer, the mean over pairs of the
// cosine between the instruction representation (mean-pooled text tokens)
// under a mismatched image and under the reference image.
inline std::vector<double> s_cross(
    std::span<const std::pair<const LayerTrace*, const LayerTrace*>> pairs) {
    if (pairs.empty())
        throw std::invalid_argument("s_cross: no trace pairs");
    const std::size_t L = pairs[0].first->layers;
    std::vector<double> out(L + 1, 0.0);
    for (const auto& [mis, ref] : pairs) {
        if (mis->layers != L || ref->layers != L)
            throw std::invalid_argument("s_cross: traces disagree on layer count");
        const auto ti_mis = mis->tokens_of(Modality::Textual);
        const auto ti_ref = ref->tokens_of(Modality::Textual);
        if (ti_mis.size() != ti_ref.size())
            throw std::invalid_argument("s_cross: instruction spans differ in length (" +
                                        std::to_string(ti_mis.size()) + " vs " +
                                        std::to_string(ti_ref.size()) + ")");
        if (ti_mis.empty())
            throw std::invalid_argument("s_cross: no instruction tokens");
        for (std::size_t l = 0; l <= L; ++l) {
            const auto hm = detail::mean_pooled(mis->hidden[l], ti_mis);
            const auto hr = detail::mean_pooled(ref->hidden[l], ti_ref);
            out[l] += cosine(hm, hr);
        }
    }
    for (double& v : out) v /= static_cast<double>(pairs.size());
    return out;
}

// Pairs traces sharing a sample_id prefix by their pairing tags. The
// convention is one "mismatched" and one "reference" trace per pair,
// matched in sorted order.
inline std::vector<double> s_cross(std::span<const LayerTrace> traces) {
    std::vector<const LayerTrace*> mis, ref;
    for (const LayerTrace& tr : traces) {
        if (tr.pairing == "mismatched") mis.push_back(&tr);
        else if (tr.pairing == "reference") ref.push_back(&tr);
    }
    if (mis.size() != ref.size() || mis.empty())
        throw std::invalid_argument("s_cross: need equally many mismatched and reference traces");
    std::vector<std::pair<const LayerTrace*, const LayerTrace*>> pairs;
    for (std::size_t i = 0; i < mis.size(); ++i) pairs.emplace_back(mis[i], ref[i]);
    return s_cross(std::span<const std::pair<const LayerTrace*, const LayerTrace*>>(pairs));
}

namespace detail {

// Head-wise attention received by vision token i from text queries at one
// layer: a length-H vector of per-head means over live text query rows.
inline std::vector<double> received_attention(const LayerTrace& tr, std::size_t layer,
                                              std::size_t token) {
    const auto& heads = tr.attention[layer];
    std::vector<double> out(heads.size(), 0.0);
    std::size_t n_queries = 0;
    for (std::size_t q = 0; q < tr.n_tokens(); ++q) {
        if (tr.tokens[q].modality != Modality::Textual) continue;
        if (!tr.live[layer].empty() && !tr.live[layer][q]) continue;
        ++n_queries;
        for (std::size_t h = 0; h < heads.size(); ++h) out[h] += heads[h](q, token);
    }
    if (n_queries == 0)
        throw std::invalid_argument("ilvas: no live text queries at layer " + std::to_string(layer));
    for (double& v : out) v /= static_cast<double>(n_queries);
    return out;
}

}  // namespace detail

// Inter-layer visual attention similarity: the K vision tokens most
// attended at layer l (by head-averaged received attention), scored by the
// cosine between their head-wise attention vectors at layers l and l+n,
// averaged over tokens and then over traces.
inline double ilvas(std::span<const LayerTrace> traces, std::size_t layer, std::size_t window,
                    std::size_t top_k) {
    if (traces.empty())
        throw std::invalid_argument("ilvas: no traces");
    double total = 0.0;
    for (const LayerTrace& tr : traces) {
        if (!tr.has_attention(layer) || !tr.has_attention(layer + window))
            throw std::invalid_argument("ilvas: attention not recorded at layers " +
                                        std::to_string(layer) + " and " +
                                        std::to_string(layer + window));
        // candidates must be live at both endpoints of the window, or
        // their received-attention vector at l+n would be identically zero
        auto live_at = [&](std::size_t l, std::size_t tok) {
            return tr.live[l].empty() || tr.live[l][tok];
        };
        std::vector<std::size_t> vision;
        for (const TokenInfo& t : tr.tokens)
            if (t.modality == Modality::Visual && live_at(layer, t.index) &&
                live_at(layer + window, t.index))
                vision.push_back(t.index);
        if (top_k > vision.size())
            throw std::invalid_argument("ilvas: top_k " + std::to_string(top_k) +
                                        " exceeds live vision tokens (" +
                                        std::to_string(vision.size()) + ")");
        std::vector<std::vector<double>> recv_l(vision.size());
        std::vector<double> key(vision.size());
        for (std::size_t i = 0; i < vision.size(); ++i) {
            recv_l[i] = detail::received_attention(tr, layer, vision[i]);
            double mean = 0.0;
            for (double v : recv_l[i]) mean += v;
            key[i] = mean / static_cast<double>(recv_l[i].size());
        }
        const auto top = select_top_k(key, top_k);
        double acc = 0.0;
        for (std::size_t i : top) {
            const auto recv_n = detail::received_attention(tr, layer + window, vision[i]);
            acc += cosine(recv_l[i], recv_n);
        }
        total += acc / static_cast<double>(top_k);
    }
    return total / static_cast<double>(traces.size());
}

// Per-layer ILVAS scores over [first_layer, first_layer + scores.size()).
struct IlvasCurve {
    std::size_t first_layer = 0;
    std::vector<double> scores;
    std::size_t window = 0;
    std::size_t top_k = 0;

    std::size_t last_layer() const { return first_layer + scores.size() - 1; }
};

inline IlvasCurve ilvas_curve(std::span<const LayerTrace> traces, std::size_t l_lo,
                              std::size_t l_hi, std::size_t window, std::size_t top_k) {
    if (l_hi < l_lo)
        throw std::invalid_argument("ilvas_curve: empty layer window");
    IlvasCurve c;
    c.first_layer = l_lo;
    c.window = window;
    c.top_k = top_k;
    for (std::size_t l = l_lo; l <= l_hi; ++l) c.scores.push_back(ilvas(traces, l, window, top_k));
    return c;
}

// Filtering-layer selection: strict local maxima of the curve restricted
// to [l_lo, l_hi], with a boundary layer included when it dominates its
// single neighbor and tie plateaus resolved to their leftmost layer.
// valleys flips the comparison to pick local minima instead.
inline std::vector<std::size_t> select_filter_layers(const IlvasCurve& curve, std::size_t l_lo,
                                                     std::size_t l_hi, bool valleys = false) {
    if (l_lo < curve.first_layer || l_hi > curve.last_layer())
        throw std::invalid_argument("select_filter_layers: window not covered by the curve");
    if (l_hi - l_lo + 1 < 3)
        throw std::invalid_argument("select_filter_layers: window must span at least 3 layers");
    auto score = [&](std::size_t l) {
        double s = curve.scores[l - curve.first_layer];
        return valleys ? -s : s;
    };
    std::vector<std::size_t> out;
    for (std::size_t l = l_lo; l <= l_hi; ++l) {
        const double s = score(l);
        if (l == l_lo) {
            if (s > score(l + 1)) out.push_back(l);
            continue;
        }
        if (l == l_hi) {
            if (s > score(l - 1)) out.push_back(l);
            continue;
        }
        if (s > score(l + 1)) {
            // walk left across any plateau; the leftmost plateau layer wins
            std::size_t left = l;
            while (left > l_lo && score(left - 1) == s) --left;
            if (left == l) {
                if (s > score(l - 1)) out.push_back(l);
            } else if (left > l_lo && s > score(left - 1)) {
                out.push_back(left);
            } else if (left == l_lo) {
                out.push_back(left);
            }
        }
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

}  // namespace hidrop
