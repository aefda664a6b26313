// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "hidrop/core.hpp"
#include "hidrop/dtopk.hpp"
#include "hidrop/importance.hpp"
#include "hidrop/layout.hpp"
#include "hidrop/schedule.hpp"
#include "hidrop/trace.hpp"

namespace hidrop {

// Pre-norm decoder block weights: attention projections, gated-free
// up/down FFN, and the two norm gains.
struct LayerWeights {
    Matrix wq, wk, wv, wo;     // d x d
    Matrix w_up;               // d x m
    Matrix w_down;             // m x d
    std::vector<double> norm_attn, norm_ffn;
};

// Desk-scale deterministic transformer. Weights are a pure function of
// (shape, seed); layer_output_scale lets probe tests damp deep layers.
struct ToyModel {
    ModelShape shape;
    RopeParams rope;
    std::uint64_t seed = 0;
    std::size_t vocab = 32;
    std::vector<LayerWeights> layers;
    std::vector<double> final_norm;
    Matrix w_vocab;  // d x vocab
    std::vector<double> layer_output_scale;

    static ToyModel build(const ModelShape& shape, std::uint64_t seed, std::size_t vocab = 32) {
        shape.validate();
        ToyModel m;
        m.shape = shape;
        m.rope = RopeParams{shape.head_dim(), 10000.0};
        m.rope.validate();
        m.seed = seed;
        m.vocab = vocab;
        const double scale = 1.0 / std::sqrt(static_cast<double>(shape.hidden));
        SplitMix64 seeder(seed);
        for (std::size_t l = 0; l < shape.layers; ++l) {
            LayerWeights w;
            w.wq = seeded_matrix(shape.hidden, shape.hidden, seeder.next(), scale);
            w.wk = seeded_matrix(shape.hidden, shape.hidden, seeder.next(), scale);
            w.wv = seeded_matrix(shape.hidden, shape.hidden, seeder.next(), scale);
            w.wo = seeded_matrix(shape.hidden, shape.hidden, seeder.next(), scale);
            w.w_up = seeded_matrix(shape.hidden, shape.ffn, seeder.next(), scale);
            w.w_down = seeded_matrix(shape.ffn, shape.hidden, seeder.next(),
                                     1.0 / std::sqrt(static_cast<double>(shape.ffn)));
            w.norm_attn.assign(shape.hidden, 1.0);
            w.norm_ffn.assign(shape.hidden, 1.0);
            m.layers.push_back(std::move(w));
        }
        m.final_norm.assign(shape.hidden, 1.0);
        m.w_vocab = seeded_matrix(shape.hidden, vocab, seeder.next(), scale);
        m.layer_output_scale.assign(shape.layers, 1.0);
        return m;
    }
};

// Synthetic embeddings for a layout (the "projector output" for vision
// tokens, toy word embeddings for the rest).
inline Matrix make_embeddings(const SequenceLayout& layout, std::size_t dim, std::uint64_t seed) {
    return seeded_matrix(layout.size(), dim, seed, 1.0);
}

// removal physically drops pruned rows; masking keeps the full sequence
// and only removes pruned tokens from every later query's key set.
enum class PruneExec { Removal, Masking };

struct LaneEvent {
    std::string lane;  // "vision", "text" or "joint"
    std::string op;
    double cost = 0.0;
};

// Per-layer KV store. Rows are written once when their layer runs; prune
// events only flip liveness, never rewrite rows.
struct KvCache {
    std::vector<std::vector<Matrix>> keys;    // [layer][head] tokens x head_dim
    std::vector<std::vector<Matrix>> values;  // [layer][head]
    std::vector<std::vector<std::uint8_t>> live;  // [layer][token] at compute time
};

struct ForwardOptions {
    PruneExec exec = PruneExec::Removal;
    PeMode pe;
    SaliencyConfig saliency;
    RankVariant rank_variant = RankVariant::Hard;
    double lambda = 0.0;            // 0 = default sharpness, n_v
    bool train_soft_scale = false;  // multiply survivors by their soft value
    bool record_hidden = false;
    bool record_attention = false;
    std::size_t attn_layer_lo = 1;  // attention recording window, inclusive
    std::size_t attn_layer_hi = static_cast<std::size_t>(-1);
    std::vector<std::size_t> aux_probe_layers;  // run the saliency pass without acting on it
};

struct ForwardResult {
    Matrix final_hidden;               // tokens x d after the last layer
    std::vector<double> final_logits;  // last text token, after the final norm
    std::vector<std::vector<std::uint8_t>> live;  // [layer-1][token], key-liveness during layer
    std::vector<std::size_t> vision_counts;       // realized n_l
    SequenceLayout layout;                        // position ids after PE events
    KvCache kv;
    std::vector<Matrix> hidden_per_layer;              // 0..L when recorded
    std::vector<std::vector<Matrix>> attention;        // [layer][head] when recorded
    std::vector<LaneEvent> lane_log;                   // decoupled prefill only
};

namespace detail {

inline std::vector<double> rmsnorm(std::span<const double> x, std::span<const double> gain) {
    double ms = 0.0;
    for (double v : x) ms += v * v;
    ms = ms / static_cast<double>(x.size()) + 1e-6;
    const double inv = 1.0 / std::sqrt(ms);
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * inv * gain[i];
    return out;
}

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }

// Per-head projection of one normalized row through a d x d weight,
// RoPE-rotated at the token's position id.
inline void project_heads(std::span<const double> xn, const Matrix& w, std::size_t heads,
                          std::size_t head_dim, std::int64_t position, const RopeParams& rope,
                          bool rotate, std::vector<std::vector<double>>& out) {
    const std::size_t d = xn.size();
    std::vector<double> full(d, 0.0);
    for (std::size_t i = 0; i < d; ++i) {
        const double xi = xn[i];
        if (xi == 0.0) continue;
        const double* wrow = w.data.data() + i * w.cols;
        for (std::size_t j = 0; j < d; ++j) full[j] += xi * wrow[j];
    }
    out.resize(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        std::span<const double> slice(full.data() + h * head_dim, head_dim);
        if (rotate)
            out[h] = rope_rotate(slice, position, rope);
        else
            out[h].assign(slice.begin(), slice.end());
    }
}

// Vision K/V rows at one layer, from the raw embeddings. Shared between
// forward (at the injection layer) and the decoupled prefill's vision
// lane so the two paths are bit-identical.
struct VisionKv {
    std::vector<Matrix> k, v;  // [head] n_vision x head_dim, row i = vision slot i
};

inline VisionKv vision_kv_at_injection(const ToyModel& model, const Matrix& embeddings,
                                       const SequenceLayout& layout, std::size_t inject_layer) {
    const std::size_t H = model.shape.heads;
    const std::size_t dh = model.shape.head_dim();
    const LayerWeights& w = model.layers[inject_layer - 1];
    VisionKv kv;
    kv.k.assign(H, Matrix(layout.n_vision, dh));
    kv.v.assign(H, Matrix(layout.n_vision, dh));
    std::vector<std::vector<double>> kh, vh;
    for (std::size_t i = 0; i < layout.n_vision; ++i) {
        const std::size_t t = layout.vision_begin() + i;
        const auto xn = rmsnorm(embeddings.row(t), w.norm_attn);
        project_heads(xn, w.wk, H, dh, layout.tokens[t].position_id, model.rope, true, kh);
        project_heads(xn, w.wv, H, dh, 0, model.rope, false, vh);
        for (std::size_t h = 0; h < H; ++h) {
            std::copy(kh[h].begin(), kh[h].end(), kv.k[h].row(i).begin());
            std::copy(vh[h].begin(), vh[h].end(), kv.v[h].row(i).begin());
        }
    }
    return kv;
}

}  // namespace detail

// The full lifecycle: text-only layers below the injection point, vision
// entering at inject_layer, DTop-K selection at each filter layer, and all
// remaining vision tokens leaving at exit_layer.
inline ForwardResult forward(const ToyModel& model, const Matrix& embeddings,
                             const SequenceLayout& layout_in, const PruneSchedule& sched,
                             const ForwardOptions& opts = {},
                             const detail::VisionKv* injected_kv = nullptr) {
    const std::size_t L = model.shape.layers;
    const std::size_t d = model.shape.hidden;
    const std::size_t H = model.shape.heads;
    const std::size_t dh = model.shape.head_dim();
    sched.validate(L);
    if (layout_in.n_vision != sched.n_v)
        throw std::invalid_argument("forward: layout vision count does not match schedule n_v");
    if (embeddings.rows != layout_in.size() || embeddings.cols != d)
        throw std::invalid_argument("forward: embeddings shape mismatch");
    const double lambda =
        opts.lambda > 0.0 ? opts.lambda : static_cast<double>(std::max<std::size_t>(sched.n_v, 1));

    ForwardResult res;
    res.layout = layout_in;
    SequenceLayout& layout = res.layout;
    const std::size_t n = layout.size();

    Matrix x(n, d);
    std::vector<std::uint8_t> alive(n, 0);     // participates as a key
    std::vector<std::uint8_t> computed(n, 0);  // row is updated by layers
    for (std::size_t t = 0; t < n; ++t) {
        if (!layout.is_vision(t)) {
            std::copy(embeddings.row(t).begin(), embeddings.row(t).end(), x.row(t).begin());
            alive[t] = computed[t] = 1;
        }
    }

    res.kv.keys.resize(L);
    res.kv.values.resize(L);
    res.kv.live.resize(L);
    if (opts.record_hidden) {
        res.hidden_per_layer.resize(L + 1);
        res.hidden_per_layer[0] = embeddings;
    }
    if (opts.record_attention) res.attention.resize(L + 1);
    res.live.resize(L);
    res.vision_counts.assign(L, 0);

    std::size_t stage = 0;
    std::vector<std::vector<double>> qh, kh, vh;

    for (std::size_t l = 1; l <= L; ++l) {
        const LayerWeights& w = model.layers[l - 1];

        // lifecycle events close out the previous layer
        if (l == sched.inject_layer) {
            for (std::size_t t = layout.vision_begin(); t < layout.vision_end(); ++t) {
                std::copy(embeddings.row(t).begin(), embeddings.row(t).end(), x.row(t).begin());
                alive[t] = computed[t] = 1;
            }
        }
        if (l == sched.exit_layer) {
            for (std::size_t t = layout.vision_begin(); t < layout.vision_end(); ++t) {
                alive[t] = 0;
                if (opts.exec == PruneExec::Removal) computed[t] = 0;
            }
        }
        const bool is_filter = std::find(sched.filter_layers.begin(), sched.filter_layers.end(),
                                         l) != sched.filter_layers.end();
        const bool is_probe = std::find(opts.aux_probe_layers.begin(), opts.aux_probe_layers.end(),
                                        l) != opts.aux_probe_layers.end();
        if ((is_filter || is_probe) && l >= sched.inject_layer && l < sched.exit_layer) {
            // auxiliary attention pass over this layer's q/k states
            std::vector<Matrix> q_aux(H, Matrix(n, dh)), k_aux(H, Matrix(n, dh));
            for (std::size_t t = 0; t < n; ++t) {
                if (!alive[t]) continue;
                const auto xn = detail::rmsnorm(x.row(t), w.norm_attn);
                detail::project_heads(xn, w.wq, H, dh, layout.tokens[t].position_id, model.rope,
                                      true, qh);
                detail::project_heads(xn, w.wk, H, dh, layout.tokens[t].position_id, model.rope,
                                      true, kh);
                for (std::size_t h = 0; h < H; ++h) {
                    std::copy(qh[h].begin(), qh[h].end(), q_aux[h].row(t).begin());
                    std::copy(kh[h].begin(), kh[h].end(), k_aux[h].row(t).begin());
                }
            }
            if (is_filter) {
                ++stage;
                const std::size_t k_target = sched.stage_counts[stage];
                Selection sel = score_and_select(q_aux, k_aux, x, layout, alive, opts.saliency,
                                                 k_target, lambda, opts.rank_variant);
                std::vector<std::uint8_t> keep(n, 0);
                for (std::size_t s : sel.survivors) keep[s] = 1;
                std::size_t live_idx = 0;
                for (std::size_t t = layout.vision_begin(); t < layout.vision_end(); ++t) {
                    if (!alive[t]) continue;
                    if (!keep[t]) {
                        alive[t] = 0;
                        if (opts.exec == PruneExec::Removal) computed[t] = 0;
                    } else if (opts.train_soft_scale) {
                        const double sv = sel.mask.soft_values[live_idx];
                        for (double& vv : x.row(t)) vv *= sv;
                    }
                    ++live_idx;
                }
                apply_pe(layout, opts.pe, sel.survivors);
            } else {
                // probe only: compute the scores and discard them
                (void)saliency(q_aux, k_aux, x, layout, alive, opts.saliency);
            }
        }

        res.live[l - 1] = alive;
        for (std::size_t t = layout.vision_begin(); t < layout.vision_end(); ++t)
            if (alive[t]) ++res.vision_counts[l - 1];

        // attention
        std::vector<Matrix> k_heads(H, Matrix(n, dh)), v_heads(H, Matrix(n, dh)),
            q_heads(H, Matrix(n, dh));
        for (std::size_t t = 0; t < n; ++t) {
            if (!computed[t]) continue;
            const bool use_cached_vision_kv =
                injected_kv && l == sched.inject_layer && layout.is_vision(t);
            const auto xn = detail::rmsnorm(x.row(t), w.norm_attn);
            detail::project_heads(xn, w.wq, H, dh, layout.tokens[t].position_id, model.rope, true,
                                  qh);
            if (use_cached_vision_kv) {
                const std::size_t slot = t - layout.vision_begin();
                for (std::size_t h = 0; h < H; ++h) {
                    std::copy(qh[h].begin(), qh[h].end(), q_heads[h].row(t).begin());
                    auto kr = injected_kv->k[h].row(slot);
                    auto vr = injected_kv->v[h].row(slot);
                    std::copy(kr.begin(), kr.end(), k_heads[h].row(t).begin());
                    std::copy(vr.begin(), vr.end(), v_heads[h].row(t).begin());
                }
                continue;
            }
            detail::project_heads(xn, w.wk, H, dh, layout.tokens[t].position_id, model.rope, true,
                                  kh);
            detail::project_heads(xn, w.wv, H, dh, 0, model.rope, false, vh);
            for (std::size_t h = 0; h < H; ++h) {
                std::copy(qh[h].begin(), qh[h].end(), q_heads[h].row(t).begin());
                std::copy(kh[h].begin(), kh[h].end(), k_heads[h].row(t).begin());
                std::copy(vh[h].begin(), vh[h].end(), v_heads[h].row(t).begin());
            }
        }
        res.kv.keys[l - 1] = k_heads;
        res.kv.values[l - 1] = v_heads;
        res.kv.live[l - 1] = alive;

        const bool record_attn = opts.record_attention && l >= opts.attn_layer_lo &&
                                 l <= opts.attn_layer_hi;
        if (record_attn) res.attention[l].assign(H, Matrix(n, n));

        const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
        Matrix attn_out(n, d);
        for (std::size_t t = 0; t < n; ++t) {
            if (!computed[t]) continue;
            std::vector<std::size_t> keys;
            for (std::size_t s = 0; s <= t; ++s)
                if (alive[s]) keys.push_back(s);
            if (keys.empty()) continue;  // inert row, nothing to attend to
            for (std::size_t h = 0; h < H; ++h) {
                std::vector<double> logits(keys.size());
                for (std::size_t i = 0; i < keys.size(); ++i)
                    logits[i] = scale * dot(q_heads[h].row(t), k_heads[h].row(keys[i]));
                const auto probs = softmax(logits);
                if (record_attn)
                    for (std::size_t i = 0; i < keys.size(); ++i)
                        res.attention[l][h](t, keys[i]) = probs[i];
                auto out = attn_out.row(t);
                for (std::size_t i = 0; i < keys.size(); ++i) {
                    const double p = probs[i];
                    auto vr = v_heads[h].row(keys[i]);
                    for (std::size_t j = 0; j < dh; ++j) out[h * dh + j] += p * vr[j];
                }
            }
        }

        const double lscale = model.layer_output_scale[l - 1];
        for (std::size_t t = 0; t < n; ++t) {
            if (!computed[t]) continue;
            // output projection + residual
            std::vector<double> proj(d, 0.0);
            auto arow = attn_out.row(t);
            for (std::size_t i = 0; i < d; ++i) {
                const double a = arow[i];
                if (a == 0.0) continue;
                const double* wrow = w.wo.data.data() + i * d;
                for (std::size_t j = 0; j < d; ++j) proj[j] += a * wrow[j];
            }
            auto xr = x.row(t);
            for (std::size_t j = 0; j < d; ++j) xr[j] += lscale * proj[j];

            // FFN
            const auto xn = detail::rmsnorm(xr, w.norm_ffn);
            std::vector<double> up(model.shape.ffn, 0.0);
            for (std::size_t i = 0; i < d; ++i) {
                const double xi = xn[i];
                if (xi == 0.0) continue;
                const double* wrow = w.w_up.data.data() + i * model.shape.ffn;
                for (std::size_t j = 0; j < model.shape.ffn; ++j) up[j] += xi * wrow[j];
            }
            std::vector<double> down(d, 0.0);
            for (std::size_t i = 0; i < model.shape.ffn; ++i) {
                const double u = detail::silu(up[i]);
                if (u == 0.0) continue;
                const double* wrow = w.w_down.data.data() + i * d;
                for (std::size_t j = 0; j < d; ++j) down[j] += u * wrow[j];
            }
            for (std::size_t j = 0; j < d; ++j) xr[j] += lscale * down[j];
        }

        if (opts.record_hidden) res.hidden_per_layer[l] = x;
    }

    res.final_hidden = std::move(x);
    const std::size_t last = n - 1;
    const auto fn = detail::rmsnorm(res.final_hidden.row(last), model.final_norm);
    res.final_logits.assign(model.vocab, 0.0);
    for (std::size_t i = 0; i < d; ++i) {
        const double xi = fn[i];
        const double* wrow = model.w_vocab.data.data() + i * model.vocab;
        for (std::size_t j = 0; j < model.vocab; ++j) res.final_logits[j] += xi * wrow[j];
    }
    return res;
}

// Two-lane prefill: the vision lane produces the injection-layer KV while
// the text lane runs the shallow layers; outputs are bit-identical to
// forward(). The lane log is the input to the latency model, not a
// wall-clock measurement.
inline ForwardResult decoupled_prefill(const ToyModel& model, const Matrix& embeddings,
                                       const SequenceLayout& layout, const PruneSchedule& sched,
                                       const ForwardOptions& opts = {}) {
    if (sched.inject_layer <= 1)
        throw std::invalid_argument("decoupled_prefill: needs inject_layer > 1");
    const auto kv = detail::vision_kv_at_injection(model, embeddings, layout, sched.inject_layer);
    ForwardResult res = forward(model, embeddings, layout, sched, opts, &kv);
    res.lane_log.push_back({"vision", "encode+project", 1.0});
    res.lane_log.push_back({"vision", "kv@inject", 1.0});
    for (std::size_t l = 1; l < sched.inject_layer; ++l)
        res.lane_log.push_back({"text", "layer " + std::to_string(l) + " (overlapped)", 1.0});
    for (std::size_t l = sched.inject_layer; l <= model.shape.layers; ++l)
        res.lane_log.push_back({"joint", "layer " + std::to_string(l), 1.0});
    return res;
}

inline std::size_t overlapped_text_layers(const ForwardResult& res) {
    std::size_t c = 0;
    for (const LaneEvent& e : res.lane_log)
        if (e.lane == "text") ++c;
    return c;
}

// Early-exit sweep: final-logit L2 distance from the never-exit reference,
// per candidate exit layer.
inline std::vector<std::pair<std::size_t, double>> early_exit_probe(
    const ToyModel& model, const Matrix& embeddings, const SequenceLayout& layout,
    const PruneSchedule& base, std::span<const std::size_t> exit_layers,
    const ForwardOptions& opts = {}) {
    PruneSchedule ref_sched = base;
    ref_sched.exit_layer = model.shape.layers + 1;
    const auto ref = forward(model, embeddings, layout, ref_sched, opts);
    std::vector<std::pair<std::size_t, double>> out;
    for (std::size_t e : exit_layers) {
        PruneSchedule s = base;
        s.exit_layer = e;
        double dist = 0.0;
        if (e == model.shape.layers + 1) {
            dist = 0.0;
        } else {
            const auto run = forward(model, embeddings, layout, s, opts);
            for (std::size_t i = 0; i < ref.final_logits.size(); ++i) {
                const double diff = run.final_logits[i] - ref.final_logits[i];
                dist += diff * diff;
            }
            dist = std::sqrt(dist);
        }
        out.emplace_back(e, dist);
    }
    return out;
}

// Packages a forward run in the trace file schema. Layer 0 holds the
// embeddings; liveness at layer 0 reflects whether vision has entered yet.
inline LayerTrace emit_trace(const ToyModel& model, const Matrix& embeddings,
                             const PruneSchedule& sched, const ForwardResult& res,
                             std::string sample_id, std::string pairing = "") {
    if (res.hidden_per_layer.empty())
        throw std::invalid_argument("emit_trace: forward run did not record hidden states");
    LayerTrace tr;
    tr.sample_id = std::move(sample_id);
    tr.layers = model.shape.layers;
    tr.dim = model.shape.hidden;
    tr.heads = model.shape.heads;
    tr.pairing = std::move(pairing);
    tr.tokens = res.layout.tokens;
    tr.hidden = res.hidden_per_layer;
    tr.live.resize(tr.layers + 1);
    tr.live[0].assign(res.layout.size(), 1);
    for (std::size_t t = res.layout.vision_begin(); t < res.layout.vision_end(); ++t)
        tr.live[0][t] = sched.inject_layer == 1 ? 1 : 0;
    for (std::size_t l = 1; l <= tr.layers; ++l) tr.live[l] = res.live[l - 1];
    tr.attention.resize(tr.layers + 1);
    if (!res.attention.empty())
        for (std::size_t l = 1; l <= tr.layers; ++l)
            if (l < res.attention.size()) tr.attention[l] = res.attention[l];
    (void)embeddings;
    return tr;
}

}  // namespace hidrop
