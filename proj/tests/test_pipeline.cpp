// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <sstream>

#include "hidrop/metrics.hpp"
#include "hidrop/pipeline.hpp"

using namespace hidrop;

namespace {

struct Instance {
    ToyModel model;
    SequenceLayout layout;
    Matrix emb;
};

Instance make_instance(std::size_t L, std::size_t d, std::size_t H, std::size_t m,
                       std::size_t n_sys, std::size_t n_vis, std::size_t n_txt,
                       std::uint64_t seed, PeMode pe = {}) {
    Instance inst{ToyModel::build(ModelShape{L, d, m, H}, seed),
                  SequenceLayout::make(n_sys, n_vis, n_txt, pe), {}};
    inst.emb = make_embeddings(inst.layout, d, seed + 1);
    return inst;
}

// naive single-path transformer reference with no pruning lifecycle,
// mirroring the arithmetic order of the production pass
Matrix plain_forward(const ToyModel& model, const Matrix& emb, const SequenceLayout& layout) {
    const std::size_t n = layout.size(), d = model.shape.hidden, H = model.shape.heads;
    const std::size_t dh = model.shape.head_dim();
    Matrix x = emb;
    std::vector<std::vector<double>> qh, kh, vh;
    for (std::size_t l = 1; l <= model.shape.layers; ++l) {
        const LayerWeights& w = model.layers[l - 1];
        std::vector<Matrix> q(H, Matrix(n, dh)), k(H, Matrix(n, dh)), v(H, Matrix(n, dh));
        for (std::size_t t = 0; t < n; ++t) {
            const auto xn = detail::rmsnorm(x.row(t), w.norm_attn);
            detail::project_heads(xn, w.wq, H, dh, layout.tokens[t].position_id, model.rope, true, qh);
            detail::project_heads(xn, w.wk, H, dh, layout.tokens[t].position_id, model.rope, true, kh);
            detail::project_heads(xn, w.wv, H, dh, 0, model.rope, false, vh);
            for (std::size_t h = 0; h < H; ++h) {
                std::copy(qh[h].begin(), qh[h].end(), q[h].row(t).begin());
                std::copy(kh[h].begin(), kh[h].end(), k[h].row(t).begin());
                std::copy(vh[h].begin(), vh[h].end(), v[h].row(t).begin());
            }
        }
        const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
        Matrix attn(n, d);
        for (std::size_t t = 0; t < n; ++t) {
            for (std::size_t h = 0; h < H; ++h) {
                std::vector<double> logits(t + 1);
                for (std::size_t s = 0; s <= t; ++s)
                    logits[s] = scale * dot(q[h].row(t), k[h].row(s));
                const auto p = softmax(logits);
                auto out = attn.row(t);
                for (std::size_t s = 0; s <= t; ++s)
                    for (std::size_t j = 0; j < dh; ++j) out[h * dh + j] += p[s] * v[h](s, j);
            }
        }
        for (std::size_t t = 0; t < n; ++t) {
            std::vector<double> proj(d, 0.0);
            for (std::size_t i = 0; i < d; ++i) {
                const double a = attn(t, i);
                if (a == 0.0) continue;
                for (std::size_t j = 0; j < d; ++j) proj[j] += a * w.wo(i, j);
            }
            auto xr = x.row(t);
            for (std::size_t j = 0; j < d; ++j) xr[j] += proj[j];
            const auto xn = detail::rmsnorm(xr, w.norm_ffn);
            std::vector<double> up(model.shape.ffn, 0.0);
            for (std::size_t i = 0; i < d; ++i) {
                const double xi = xn[i];
                if (xi == 0.0) continue;
                for (std::size_t j = 0; j < model.shape.ffn; ++j) up[j] += xi * w.w_up(i, j);
            }
            std::vector<double> down(d, 0.0);
            for (std::size_t i = 0; i < model.shape.ffn; ++i) {
                const double u = detail::silu(up[i]);
                if (u == 0.0) continue;
                for (std::size_t j = 0; j < d; ++j) down[j] += u * w.w_down(i, j);
            }
            for (std::size_t j = 0; j < d; ++j) xr[j] += down[j];
        }
    }
    return x;
}

PruneSchedule random_schedule(std::size_t L, std::size_t n_v, SplitMix64& rng) {
    PruneSchedule s;
    s.n_v = n_v;
    s.inject_layer = 1 + rng.below(L / 2);
    s.exit_layer = s.inject_layer + 2 + rng.below(L - s.inject_layer);
    if (s.exit_layer > L + 1) s.exit_layer = L + 1;
    // up to two filter layers strictly inside the window
    std::size_t f1 = s.inject_layer + rng.below(s.exit_layer - s.inject_layer);
    if (f1 >= s.inject_layer && f1 < s.exit_layer && n_v >= 3) {
        s.filter_layers = {f1};
        std::size_t keep = 1 + rng.below(n_v - 1);
        s.stage_counts = {n_v, keep};
        std::size_t f2 = f1 + 1 + rng.below(2);
        if (f2 > f1 && f2 < s.exit_layer && keep > 1) {
            s.filter_layers.push_back(f2);
            s.stage_counts.push_back(1 + rng.below(keep - 1));
        }
    } else {
        s.stage_counts = {n_v};
    }
    s.validate(L);
    return s;
}

}  // namespace

TEST_CASE("vanilla schedule matches the plain reference bit-exactly") {
    auto inst = make_instance(4, 16, 2, 32, 1, 3, 3, 7);
    const auto sched = PruneSchedule::vanilla(3, 4);
    const auto res = forward(inst.model, inst.emb, inst.layout, sched);
    const auto ref = plain_forward(inst.model, inst.emb, inst.layout);
    REQUIRE(res.final_hidden.data == ref.data);
    for (auto c : res.vision_counts) CHECK(c == 3);
}

TEST_CASE("inject at layer 1 with no filters is the standard multimodal forward") {
    auto inst = make_instance(4, 16, 2, 32, 1, 3, 3, 8);
    PruneSchedule s;
    s.inject_layer = 1;
    s.exit_layer = 5;
    s.stage_counts = {3};
    s.n_v = 3;
    const auto res = forward(inst.model, inst.emb, inst.layout, s);
    const auto ref = plain_forward(inst.model, inst.emb, inst.layout);
    CHECK(res.final_hidden.data == ref.data);
}

TEST_CASE("removal and masking agree at surviving positions") {
    SplitMix64 rng(99);
    for (int it = 0; it < 20; ++it) {
        const std::size_t d = rng.below(2) ? 32 : 64;
        const std::size_t L = rng.below(2) ? 8 : 12;
        const std::size_t n_v = rng.below(2) ? 8 : 16;
        auto inst = make_instance(L, d, 4, 2 * d, 2, n_v, 4, 1000 + it);
        auto sched = random_schedule(L, n_v, rng);

        ForwardOptions rem, mask;
        rem.exec = PruneExec::Removal;
        rem.record_hidden = true;
        mask.exec = PruneExec::Masking;
        mask.record_hidden = true;
        const auto a = forward(inst.model, inst.emb, inst.layout, sched, rem);
        const auto b = forward(inst.model, inst.emb, inst.layout, sched, mask);

        double max_diff = 0.0;
        for (std::size_t l = 1; l <= L; ++l)
            for (std::size_t t = 0; t < inst.layout.size(); ++t) {
                if (!a.live[l - 1][t]) continue;
                for (std::size_t c = 0; c < d; ++c)
                    max_diff = std::max(max_diff, std::abs(a.hidden_per_layer[l](t, c) -
                                                           b.hidden_per_layer[l](t, c)));
            }
        REQUIRE(max_diff < 1e-6);
        REQUIRE(a.vision_counts == b.vision_counts);
    }
}

TEST_CASE("text-only prefix property") {
    auto inst = make_instance(8, 32, 4, 64, 2, 6, 4, 55);
    PruneSchedule s;
    s.inject_layer = 5;
    s.exit_layer = 9;
    s.stage_counts = {6};
    s.n_v = 6;
    ForwardOptions opts;
    opts.record_hidden = true;
    const auto run = forward(inst.model, inst.emb, inst.layout, s, opts);

    // reference: the same model on a vision-free layout with the same
    // position ids for the non-vision tokens
    SequenceLayout text_only = SequenceLayout::make(2, 0, 4);
    Matrix emb_t(6, 32);
    std::size_t r = 0;
    for (std::size_t t = 0; t < inst.layout.size(); ++t) {
        if (inst.layout.is_vision(t)) continue;
        text_only.tokens[r].position_id = inst.layout.tokens[t].position_id;
        std::copy(inst.emb.row(t).begin(), inst.emb.row(t).end(), emb_t.row(r).begin());
        ++r;
    }
    ForwardOptions topts;
    topts.record_hidden = true;
    const auto ref = forward(inst.model, emb_t, text_only, PruneSchedule::vanilla(0, 8), topts);

    for (std::size_t l = 1; l < s.inject_layer; ++l) {
        std::size_t rr = 0;
        for (std::size_t t = 0; t < inst.layout.size(); ++t) {
            if (inst.layout.is_vision(t)) continue;
            for (std::size_t c = 0; c < 32; ++c)
                REQUIRE(run.hidden_per_layer[l](t, c) == ref.hidden_per_layer[l](rr, c));
            ++rr;
        }
    }
}

TEST_CASE("decoupled prefill is bit-identical to forward") {
    SplitMix64 rng(7331);
    for (int it = 0; it < 10; ++it) {
        auto inst = make_instance(8, 32, 4, 64, 1, 8, 4, 2000 + it);
        auto sched = random_schedule(8, 8, rng);
        if (sched.inject_layer <= 1) sched.inject_layer = 2;
        if (sched.exit_layer <= sched.inject_layer + 1) sched.exit_layer = sched.inject_layer + 2;
        if (!sched.filter_layers.empty() && sched.filter_layers.front() < sched.inject_layer) {
            sched.filter_layers.clear();
            sched.stage_counts = {sched.n_v};
        }
        if (sched.exit_layer > 9) sched.exit_layer = 9;
        sched.validate(8);
        const auto a = forward(inst.model, inst.emb, inst.layout, sched);
        const auto b = decoupled_prefill(inst.model, inst.emb, inst.layout, sched);
        REQUIRE(a.final_hidden.data == b.final_hidden.data);
        REQUIRE(a.final_logits == b.final_logits);
        CHECK(overlapped_text_layers(b) == sched.inject_layer - 1);
    }

    // minimal overlap window
    auto inst = make_instance(6, 16, 2, 32, 1, 4, 3, 4242);
    PruneSchedule s;
    s.inject_layer = 2;
    s.exit_layer = 7;
    s.stage_counts = {4};
    s.n_v = 4;
    const auto run = decoupled_prefill(inst.model, inst.emb, inst.layout, s);
    CHECK(overlapped_text_layers(run) == 1);

    CHECK_THROWS_AS(decoupled_prefill(inst.model, inst.emb, inst.layout,
                                      PruneSchedule::vanilla(4, 6)),
                    std::invalid_argument);
}

TEST_CASE("lane log is consistent with the latency model ordering") {
    auto inst = make_instance(8, 16, 2, 32, 1, 4, 3, 77);
    PruneSchedule s;
    s.inject_layer = 4;
    s.exit_layer = 9;
    s.stage_counts = {4};
    s.n_v = 4;
    const auto run = decoupled_prefill(inst.model, inst.emb, inst.layout, s);
    const auto counts = layer_token_counts(s, 8);
    CostModel cm{1.0, 0.01, 2.0, 0.1, 4};
    const double serial = prefill_latency(counts, inst.model.shape, cm, PrefillMode::Serial);
    const double dec = prefill_latency(counts, inst.model.shape, cm, PrefillMode::Decoupled);
    CHECK(dec <= serial);
    CHECK(overlapped_text_layers(run) == 3);
}

TEST_CASE("apply_pe variants") {
    // persistent: ids never change
    auto lay = SequenceLayout::make(5, 4, 3);
    auto before = lay.tokens;
    std::vector<std::size_t> survivors{5, 7};
    apply_pe(lay, PeMode{PeVariant::Persistent, 0}, survivors);
    for (std::size_t t = 0; t < lay.size(); ++t)
        CHECK(lay.tokens[t].position_id == before[t].position_id);

    // compacted: survivors (5,7) -> ids (5,6); first text id shifts 9 -> 7
    apply_pe(lay, PeMode{PeVariant::Compacted, 0}, survivors);
    CHECK(lay.tokens[5].position_id == 5);
    CHECK(lay.tokens[7].position_id == 6);
    CHECK(lay.tokens[9].position_id == 7);

    // group: disjoint ranges, unchanged across events
    auto glay = SequenceLayout::make(2, 3, 3, PeMode{PeVariant::Group, 4096});
    CHECK(glay.tokens[0].position_id == 0);
    CHECK(glay.tokens[1].position_id == 1);
    CHECK(glay.tokens[2].position_id == 4096);
    CHECK(glay.tokens[4].position_id == 4098);
    CHECK(glay.tokens[5].position_id == 2);  // text continues the text range
    auto gbefore = glay.tokens;
    apply_pe(glay, PeMode{PeVariant::Group, 4096}, std::vector<std::size_t>{3});
    for (std::size_t t = 0; t < glay.size(); ++t)
        CHECK(glay.tokens[t].position_id == gbefore[t].position_id);

    CHECK_THROWS_AS(apply_pe(glay, PeMode{PeVariant::Compacted, 0}, std::vector<std::size_t>{0}),
                    std::invalid_argument);
}

TEST_CASE("persistent PE preserves pairwise offsets, compacted breaks them") {
    auto inst = make_instance(8, 32, 4, 64, 2, 8, 4, 321);
    PruneSchedule s;
    s.inject_layer = 2;
    s.exit_layer = 8;
    s.filter_layers = {4};
    s.stage_counts = {8, 3};
    s.n_v = 8;

    ForwardOptions pers;
    pers.pe = PeMode{PeVariant::Persistent, 0};
    const auto before = inst.layout.tokens;
    const auto a = forward(inst.model, inst.emb, inst.layout, s, pers);
    for (std::size_t i = 0; i < a.layout.size(); ++i)
        for (std::size_t j = i + 1; j < a.layout.size(); ++j)
            CHECK(a.layout.tokens[j].position_id - a.layout.tokens[i].position_id ==
                  before[j].position_id - before[i].position_id);

    ForwardOptions comp;
    comp.exec = PruneExec::Removal;
    comp.pe = PeMode{PeVariant::Compacted, 0};
    const auto b = forward(inst.model, inst.emb, inst.layout, s, comp);
    // a non-suffix vision token was pruned, so at least one surviving
    // pairwise difference must have changed
    bool violated = false;
    for (std::size_t i = 0; i < b.layout.size() && !violated; ++i)
        for (std::size_t j = i + 1; j < b.layout.size(); ++j) {
            if (!b.live[s.filter_layers[0] - 1][i] || !b.live[s.filter_layers[0] - 1][j]) continue;
            if (b.layout.tokens[j].position_id - b.layout.tokens[i].position_id !=
                before[j].position_id - before[i].position_id) {
                violated = true;
                break;
            }
        }
    CHECK(violated);
}

TEST_CASE("kv rows of survivors are never rewritten across prune events") {
    auto inst = make_instance(8, 32, 4, 64, 1, 8, 3, 888);
    PruneSchedule s;
    s.inject_layer = 2;
    s.exit_layer = 8;
    s.filter_layers = {4, 6};
    s.stage_counts = {8, 4, 2};
    s.n_v = 8;
    const auto run = forward(inst.model, inst.emb, inst.layout, s);
    // re-run and compare: deterministic, and the KV rows recorded for the
    // injection layer equal a recomputation from the raw embeddings
    const auto kv = detail::vision_kv_at_injection(inst.model, inst.emb, inst.layout, 2);
    for (std::size_t h = 0; h < 4; ++h)
        for (std::size_t i = 0; i < 8; ++i) {
            const std::size_t t = inst.layout.vision_begin() + i;
            for (std::size_t c = 0; c < 8; ++c) {
                REQUIRE(run.kv.keys[1][h](t, c) == kv.k[h](i, c));
                REQUIRE(run.kv.values[1][h](t, c) == kv.v[h](i, c));
            }
        }
}

TEST_CASE("forward is deterministic") {
    auto inst = make_instance(6, 16, 2, 32, 1, 6, 3, 777);
    PruneSchedule s;
    s.inject_layer = 2;
    s.exit_layer = 6;
    s.filter_layers = {3};
    s.stage_counts = {6, 2};
    s.n_v = 6;
    const auto a = forward(inst.model, inst.emb, inst.layout, s);
    const auto b = forward(inst.model, inst.emb, inst.layout, s);
    CHECK(a.final_hidden.data == b.final_hidden.data);
    CHECK(a.final_logits == b.final_logits);
}

TEST_CASE("auxiliary saliency pass does not perturb the main forward") {
    auto inst = make_instance(6, 16, 2, 32, 1, 4, 3, 111);
    const auto sched = PruneSchedule::vanilla(4, 6);
    ForwardOptions plain;
    ForwardOptions probed;
    probed.aux_probe_layers = {2, 3, 4};
    const auto a = forward(inst.model, inst.emb, inst.layout, sched, plain);
    const auto b = forward(inst.model, inst.emb, inst.layout, sched, probed);
    CHECK(a.final_hidden.data == b.final_hidden.data);
}

TEST_CASE("train-mode soft scaling perturbs survivors, inference mode does not") {
    auto inst = make_instance(6, 16, 2, 32, 1, 6, 3, 222);
    PruneSchedule s;
    s.inject_layer = 1;
    s.exit_layer = 7;
    s.filter_layers = {3};
    s.stage_counts = {6, 3};
    s.n_v = 6;
    ForwardOptions inf, train;
    train.train_soft_scale = true;
    const auto a = forward(inst.model, inst.emb, inst.layout, s, inf);
    const auto b = forward(inst.model, inst.emb, inst.layout, s, train);
    CHECK(a.final_hidden.data != b.final_hidden.data);
}

TEST_CASE("early exit probe on a depth-damped model") {
    auto inst = make_instance(8, 32, 4, 64, 1, 6, 3, 99);
    // damp deep layers so a perturbation entering later matters less
    for (std::size_t l = 0; l < 8; ++l)
        inst.model.layer_output_scale[l] = std::pow(0.25, static_cast<double>(l));
    PruneSchedule base;
    base.inject_layer = 1;
    base.exit_layer = 9;
    base.stage_counts = {6};
    base.n_v = 6;
    std::vector<std::size_t> exits{2, 3, 4, 5, 6, 7, 8, 9};
    const auto probe = early_exit_probe(inst.model, inst.emb, inst.layout, base, exits);
    REQUIRE(probe.size() == exits.size());
    CHECK(probe.back().second == 0.0);  // exit at L+1 never removes anything
    CHECK(probe.front().second >= probe[probe.size() - 2].second);
    for (std::size_t i = 1; i < probe.size(); ++i)
        CHECK(probe[i].second <= probe[i - 1].second + 1e-9);
}

TEST_CASE("pipeline emits traces that the metrics accept") {
    auto inst = make_instance(6, 16, 2, 32, 1, 6, 4, 313);
    PruneSchedule s;
    s.inject_layer = 2;
    s.exit_layer = 7;
    s.filter_layers = {4};
    s.stage_counts = {6, 3};
    s.n_v = 6;
    ForwardOptions opts;
    opts.record_hidden = true;
    opts.record_attention = true;
    const auto run = forward(inst.model, inst.emb, inst.layout, s, opts);
    const auto tr = emit_trace(inst.model, inst.emb, s, run, "run0");

    std::stringstream ss;
    write_trace(ss, tr);
    std::vector<SchemaIssue> issues;
    const auto back = read_traces(ss, &issues);
    for (const auto& i : issues) UNSCOPED_INFO("line " << i.line << ": " << i.message);
    REQUIRE(issues.empty());
    REQUIRE(back.size() == 1);

    const auto si = s_intra(back, Modality::Textual);
    CHECK(si.size() == 6);
    for (double v : si) {
        CHECK(v >= -1.0);
        CHECK(v <= 1.0);
    }
    // ilvas over the window where vision is alive at both ends
    const double score = ilvas(back, 2, 1, 3);
    CHECK(score >= -1.0);
    CHECK(score <= 1.0);
}
