// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace hidrop {

// Transformer block dimensions driving the FLOPs model.
struct ModelShape {
    std::size_t layers = 0;  // L
    std::size_t hidden = 0;  // d
    std::size_t ffn = 0;     // m
    std::size_t heads = 0;   // H

    void validate() const {
        if (layers == 0 || hidden == 0 || ffn == 0 || heads == 0)
            throw std::invalid_argument("ModelShape: all dimensions must be positive");
        if (hidden % heads != 0)
            throw std::invalid_argument("ModelShape: hidden not divisible by heads");
    }
    std::size_t head_dim() const { return hidden / heads; }
};

// Declarative per-layer vision-token budget. Layers are 1-based; an
// exit_layer of L+1 means the vision tokens never leave. stage_counts has
// one entry per inter-filter span, |filter_layers| + 1 in total, starting
// at the full token count n_v.
struct PruneSchedule {
    std::size_t inject_layer = 1;
    std::size_t exit_layer = 0;
    std::vector<std::size_t> filter_layers;
    std::vector<std::size_t> stage_counts;
    std::size_t n_v = 0;

    static PruneSchedule vanilla(std::size_t n_v, std::size_t layers) {
        PruneSchedule s;
        s.inject_layer = 1;
        s.exit_layer = layers + 1;
        s.stage_counts = {n_v};
        s.n_v = n_v;
        return s;
    }

    void validate(std::size_t layers) const {
        if (n_v == 0 && !filter_layers.empty())
            throw std::invalid_argument("PruneSchedule: filter layers need n_v > 0");
        if (inject_layer < 1)
            throw std::invalid_argument("PruneSchedule: inject_layer must be >= 1");
        if (exit_layer > layers + 1 || exit_layer <= inject_layer)
            throw std::invalid_argument(
                "PruneSchedule: need inject_layer < exit_layer <= L+1");
        if (!std::is_sorted(filter_layers.begin(), filter_layers.end()) ||
            std::adjacent_find(filter_layers.begin(), filter_layers.end()) != filter_layers.end())
            throw std::invalid_argument("PruneSchedule: filter_layers must be strictly increasing");
        if (!filter_layers.empty()) {
            if (filter_layers.front() < inject_layer)
                throw std::invalid_argument("PruneSchedule: inject_layer must be <= min(filter_layers)");
            if (filter_layers.back() >= exit_layer)
                throw std::invalid_argument("PruneSchedule: max(filter_layers) must be < exit_layer");
        }
        if (stage_counts.size() != filter_layers.size() + 1)
            throw std::invalid_argument("PruneSchedule: stage_counts length must be |filter_layers|+1");
        if (stage_counts.front() != n_v)
            throw std::invalid_argument("PruneSchedule: stage_counts[0] must equal n_v");
        for (std::size_t s = 1; s < stage_counts.size(); ++s)
            if (stage_counts[s] >= stage_counts[s - 1])
                throw std::invalid_argument("PruneSchedule: stage_counts must be strictly decreasing");
    }

    nlohmann::json to_json() const {
        return {{"inject_layer", inject_layer},
                {"exit_layer", exit_layer},
                {"filter_layers", filter_layers},
                {"stage_counts", stage_counts},
                {"n_v", n_v}};
    }

    static PruneSchedule from_json(const nlohmann::json& j) {
        PruneSchedule s;
        for (const char* key : {"inject_layer", "exit_layer", "filter_layers", "stage_counts", "n_v"})
            if (!j.contains(key))
                throw std::invalid_argument(std::string("PruneSchedule: missing key '") + key + "'");
        s.inject_layer = j.at("inject_layer").get<std::size_t>();
        s.exit_layer = j.at("exit_layer").get<std::size_t>();
        s.filter_layers = j.at("filter_layers").get<std::vector<std::size_t>>();
        s.stage_counts = j.at("stage_counts").get<std::vector<std::size_t>>();
        s.n_v = j.at("n_v").get<std::size_t>();
        return s;
    }
};

// Per-layer vision-token counts n_l (1-based layer l maps to index l-1).
// The drop happens AT each filter layer: layer f already runs on the
// reduced set, selection logically closing out layer f-1.
inline std::vector<std::size_t> layer_token_counts(const PruneSchedule& sched, std::size_t layers) {
    sched.validate(layers);
    std::vector<std::size_t> n(layers, 0);
    for (std::size_t l = 1; l <= layers; ++l) {
        if (l < sched.inject_layer || l >= sched.exit_layer) continue;
        std::size_t stage = 0;
        for (std::size_t f : sched.filter_layers)
            if (f <= l) ++stage;
        n[l - 1] = sched.stage_counts[stage];
    }
    return n;
}

inline double average_tokens(std::span<const std::size_t> counts, std::size_t layers) {
    double sum = 0.0;
    for (std::size_t v : counts) sum += static_cast<double>(v);
    return sum / static_cast<double>(layers);
}

// Vision-token FLOPs per block: 4 n d^2 + 2 n^2 d + 3 n d m, summed over
// layers. Exact in 64-bit integer arithmetic at the model sizes in play.
inline std::uint64_t flops(std::span<const std::size_t> counts, const ModelShape& shape) {
    shape.validate();
    if (counts.size() != shape.layers)
        throw std::invalid_argument("flops: counts length must equal layer count");
    const std::uint64_t d = shape.hidden;
    const std::uint64_t m = shape.ffn;
    std::uint64_t total = 0;
    for (std::size_t v : counts) {
        const std::uint64_t n = v;
        total += 4 * n * d * d + 2 * n * n * d + 3 * n * d * m;
    }
    return total;
}

// Keep-ratio decay curves over the normalized pruning window t in [0,1].
// ED is plain exponential; GED raises t to an exponent p first, so p < 1
// steepens the early drop. Both anchor r(0)=1 and r(1)=r_end, and GED with
// p=1 is exactly ED.
enum class DecayKind { ED, GED };

struct DecayCurve {
    DecayKind kind = DecayKind::ED;
    double p = 1.0;      // GED exponent
    double r_end = 1.0;  // final keep ratio, in (0, 1]
};

inline double decay_keep_ratio(const DecayCurve& curve, double t) {
    if (!(t >= 0.0 && t <= 1.0))
        throw std::invalid_argument("decay_keep_ratio: t must lie in [0, 1]");
    if (!(curve.r_end > 0.0 && curve.r_end <= 1.0))
        throw std::invalid_argument("decay_keep_ratio: r_end must lie in (0, 1]");
    double e = t;
    if (curve.kind == DecayKind::GED) {
        if (!(curve.p > 0.0))
            throw std::invalid_argument("decay_keep_ratio: exponent p must be positive");
        e = std::pow(t, curve.p);
    }
    return std::pow(curve.r_end, e);
}

namespace detail {

// Span widths: how many layers run at each stage count.
inline std::vector<std::size_t> stage_widths(std::size_t inject, std::size_t exit,
                                             const std::vector<std::size_t>& filters) {
    std::vector<std::size_t> w;
    std::size_t prev = inject;
    for (std::size_t f : filters) {
        w.push_back(f - prev);
        prev = f;
    }
    w.push_back(exit - prev);
    return w;
}

}  // namespace detail

// Searches for concave stage counts (each stage at most half the previous)
// whose average token count lands within 1 of target_avg. Deterministic:
// a binary search on a per-stage decay ratio, then the final stage absorbs
// the residual.
inline PruneSchedule schedule_from_budget(std::size_t inject, std::size_t exit,
                                          std::vector<std::size_t> filters, std::size_t n_v,
                                          double target_avg, std::size_t layers) {
    PruneSchedule probe;
    probe.inject_layer = inject;
    probe.exit_layer = exit;
    probe.filter_layers = filters;
    probe.n_v = n_v;
    probe.stage_counts.assign(filters.size() + 1, 0);
    probe.stage_counts[0] = n_v;
    for (std::size_t s = 1; s < probe.stage_counts.size(); ++s)
        probe.stage_counts[s] = probe.stage_counts[s - 1] > 1 ? probe.stage_counts[s - 1] - 1 : 1;
    // structural validation only; counts are filled in below
    {
        PruneSchedule shapecheck = probe;
        for (std::size_t s = 1; s < shapecheck.stage_counts.size(); ++s)
            if (shapecheck.stage_counts[s] >= shapecheck.stage_counts[s - 1])
                throw std::invalid_argument("schedule_from_budget: too many filter stages for n_v");
        shapecheck.validate(layers);
    }

    const std::size_t S = filters.size();
    const auto widths = detail::stage_widths(inject, exit, filters);
    const double target_total = target_avg * static_cast<double>(layers);

    // Feasible range under the concavity constraint (stage <= previous/2):
    // max uses the exact-halving chain; min drops as fast as strictly
    // decreasing positive integers allow, i.e. a reversed doubling chain.
    auto total_of = [&](const std::vector<std::size_t>& counts) {
        double t = 0.0;
        for (std::size_t s = 0; s <= S; ++s) t += static_cast<double>(widths[s] * counts[s]);
        return t;
    };
    std::vector<std::size_t> lo_counts(S + 1), hi_counts(S + 1);
    lo_counts[0] = hi_counts[0] = n_v;
    for (std::size_t s = 1; s <= S; ++s) {
        hi_counts[s] = hi_counts[s - 1] / 2;
        lo_counts[s] = std::size_t{1} << (S - s);
        if (lo_counts[s] > hi_counts[s])
            throw std::invalid_argument("schedule_from_budget: n_v too small for this many stages");
    }
    const double min_total = total_of(lo_counts);
    const double max_total = total_of(hi_counts);
    if (target_total < min_total - static_cast<double>(layers) ||
        target_total > max_total + static_cast<double>(layers))
        throw std::invalid_argument(
            "schedule_from_budget: infeasible budget; feasible average range is [" +
            std::to_string(min_total / static_cast<double>(layers)) + ", " +
            std::to_string(max_total / static_cast<double>(layers)) + "]");

    auto counts_for_ratio = [&](double rho) {
        std::vector<std::size_t> c(S + 1);
        c[0] = n_v;
        for (std::size_t s = 1; s <= S; ++s) {
            auto v = static_cast<std::size_t>(std::floor(static_cast<double>(c[s - 1]) * rho));
            c[s] = std::clamp(v, lo_counts[s], c[s - 1] / 2);
        }
        return c;
    };

    double lo = 0.0, hi = 0.5;
    for (int iter = 0; iter < 64; ++iter) {
        const double mid = 0.5 * (lo + hi);
        if (total_of(counts_for_ratio(mid)) < target_total)
            lo = mid;
        else
            hi = mid;
    }
    auto counts = counts_for_ratio(hi);

    // Final stage absorbs the residual.
    if (S > 0) {
        double rest = 0.0;
        for (std::size_t s = 0; s < S; ++s) rest += static_cast<double>(widths[s] * counts[s]);
        const double ideal = (target_total - rest) / static_cast<double>(widths[S]);
        auto v = static_cast<std::size_t>(std::llround(std::max(ideal, 1.0)));
        counts[S] = std::clamp(v, std::size_t{1}, counts[S - 1] / 2);
    }

    // Local repair when rounding or clamping left us off target: walk the
    // stages from the back, nudging one count at a time.
    auto err = [&](const std::vector<std::size_t>& c) {
        return total_of(c) - target_total;
    };
    for (int pass = 0; pass < 4 * static_cast<int>(n_v) && std::abs(err(counts)) > static_cast<double>(layers);
         ++pass) {
        const double e = err(counts);
        bool moved = false;
        for (std::size_t s = S; s >= 1; --s) {
            if (e > 0.0 && counts[s] > lo_counts[s] &&
                (s == S || counts[s + 1] <= (counts[s] - 1) / 2)) {
                --counts[s];
                moved = true;
                break;
            }
            if (e < 0.0 && counts[s] < counts[s - 1] / 2) {
                ++counts[s];
                moved = true;
                break;
            }
        }
        if (!moved) break;
    }

    PruneSchedule out = probe;
    out.stage_counts = counts;
    out.validate(layers);
    if (std::abs(err(counts)) > static_cast<double>(layers))
        throw std::invalid_argument("schedule_from_budget: could not meet budget within 1 average token");
    return out;
}

// Throughput constants for the prefill-latency estimate. Unitless; only
// relative comparisons are meaningful.
struct CostModel {
    double per_layer_base = 0.0;   // fixed cost of a transformer layer
    double per_token = 0.0;        // incremental cost per live token per layer
    double vision_path = 0.0;      // vision encoder + projector, one shot
    double stage_overhead = 0.0;   // token-selection cost per filter event
    std::size_t text_tokens = 0;   // system + text tokens, live on all layers

    void validate() const {
        if (per_layer_base < 0 || per_token < 0 || vision_path < 0 || stage_overhead < 0)
            throw std::invalid_argument("CostModel: constants must be nonnegative");
    }
};

enum class PrefillMode { Serial, Decoupled };

// Structural latency model. Serial runs the vision path before any layer;
// decoupled overlaps it with the text-only layers below the injection
// point. Filter events each pay one stage_overhead.
inline double prefill_latency(std::span<const std::size_t> counts, const ModelShape& shape,
                              const CostModel& cost, PrefillMode mode) {
    shape.validate();
    cost.validate();
    if (counts.size() != shape.layers)
        throw std::invalid_argument("prefill_latency: counts length must equal layer count");

    auto layer_cost = [&](std::size_t n_vision) {
        return cost.per_layer_base +
               cost.per_token * static_cast<double>(n_vision + cost.text_tokens);
    };

    // First layer with vision present; filter events are strict decreases
    // between consecutive nonzero counts.
    std::size_t inject = counts.size() + 1;
    std::size_t filter_events = 0;
    std::size_t prev_nonzero = 0;
    bool seen = false;
    for (std::size_t l = 0; l < counts.size(); ++l) {
        if (counts[l] == 0) continue;
        if (!seen) {
            inject = l + 1;
            seen = true;
        } else if (counts[l] < prev_nonzero) {
            ++filter_events;
        }
        prev_nonzero = counts[l];
    }

    double layers_total = 0.0;
    double shallow_text = 0.0;
    for (std::size_t l = 1; l <= counts.size(); ++l) {
        const double c = layer_cost(counts[l - 1]);
        layers_total += c;
        if (l < inject) shallow_text += c;
    }
    const double overhead = static_cast<double>(filter_events) * cost.stage_overhead;

    if (mode == PrefillMode::Serial)
        return cost.vision_path + layers_total + overhead;
    return std::max(cost.vision_path, shallow_text) + (layers_total - shallow_text) + overhead;
}

}  // namespace hidrop
