// SPDX-License-Identifier: Apache-2.0
#pragma once

// End-to-end invariant suite shared by the `verify` subcommand and the
// acceptance test binary. Each check is self-contained, deterministic for a
// fixed seed, and reports its worst observed error.

#include <chrono>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "hidrop/dtopk.hpp"
#include "hidrop/metrics.hpp"
#include "hidrop/pipeline.hpp"
#include "hidrop/schedule.hpp"

namespace hidrop {

struct CheckResult {
    std::string name;
    bool pass = false;
    double max_error = 0.0;
    double seconds = 0.0;
    std::string detail;
};

struct VerifyOptions {
    std::uint64_t seed = 2026;
    // negative control: perturb one FLOPs golden so the check must fail
    bool corrupt_golden = false;
};

namespace verify_detail {

inline double rel_tol_err(double got, double want) {
    return std::abs(got - want) / std::abs(want);
}

// ---- check bodies -------------------------------------------------------

inline CheckResult check_flops_goldens(const VerifyOptions& opt) {
    CheckResult r{"flops-goldens"};
    struct Golden {
        ModelShape shape;
        double want;
    };
    std::vector<Golden> goldens = {
        {{32, 4096, 11008, 32}, 3.82e12},
        {{40, 5120, 13824, 40}, 7.44e12},
        {{32, 2560, 6912, 32}, 1.52e12},
    };
    if (opt.corrupt_golden) goldens[0].want = 5.00e12;
    for (const Golden& g : goldens) {
        std::vector<std::size_t> counts(g.shape.layers, 576);
        const double got = static_cast<double>(flops(counts, g.shape));
        r.max_error = std::max(r.max_error, rel_tol_err(got, g.want));
    }
    r.pass = r.max_error < 0.01;
    r.detail = "vanilla 576-token totals vs the three reference model shapes, 1% tolerance";
    return r;
}

inline CheckResult check_budget_reductions(const VerifyOptions&) {
    CheckResult r{"budget-reductions"};
    const std::pair<double, double> rows[] = {{80.0, 86.1}, {64.0, 88.9}, {48.0, 91.7}};
    for (const auto& [avg, want] : rows) {
        const double got = 100.0 * (1.0 - avg / 576.0);
        r.max_error = std::max(r.max_error, std::abs(got - want));
    }
    r.pass = r.max_error < 0.05;
    r.detail = "reduction percentages for average budgets 80/64/48 of 576";
    return r;
}

inline CheckResult check_prune_mask_equivalence(const VerifyOptions& opt) {
    CheckResult r{"prune-mask-equivalence"};
    SplitMix64 rng(opt.seed);
    r.pass = true;
    for (int it = 0; it < 20; ++it) {
        const std::size_t d = rng.below(2) ? 32 : 64;
        const std::size_t L = rng.below(2) ? 8 : 12;
        const std::size_t n_v = rng.below(2) ? 8 : 16;
        ToyModel model = ToyModel::build(ModelShape{L, d, 2 * d, 4}, rng.next());
        SequenceLayout layout = SequenceLayout::make(2, n_v, 4);
        Matrix emb = make_embeddings(layout, d, rng.next());

        PruneSchedule s;
        s.n_v = n_v;
        s.inject_layer = 1 + rng.below(L / 2);
        s.exit_layer = std::min(L + 1, s.inject_layer + 2 + rng.below(L - s.inject_layer));
        const std::size_t f = s.inject_layer + rng.below(s.exit_layer - s.inject_layer);
        if (f >= s.inject_layer && f < s.exit_layer) {
            s.filter_layers = {f};
            s.stage_counts = {n_v, 1 + rng.below(n_v - 1)};
        } else {
            s.stage_counts = {n_v};
        }

        ForwardOptions rem, mask;
        rem.exec = PruneExec::Removal;
        rem.record_hidden = true;
        mask.exec = PruneExec::Masking;
        mask.record_hidden = true;
        const auto a = forward(model, emb, layout, s, rem);
        const auto b = forward(model, emb, layout, s, mask);
        for (std::size_t l = 1; l <= L; ++l)
            for (std::size_t t = 0; t < layout.size(); ++t) {
                if (!a.live[l - 1][t]) continue;
                for (std::size_t c = 0; c < d; ++c)
                    r.max_error = std::max(r.max_error,
                                           std::abs(a.hidden_per_layer[l](t, c) -
                                                    b.hidden_per_layer[l](t, c)));
            }
    }
    r.pass = r.max_error < 1e-6;
    r.detail = "removal vs masking hidden states at surviving positions, 20 random instances";
    return r;
}

inline CheckResult check_dtopk_gradients(const VerifyOptions& opt) {
    CheckResult r{"dtopk-gradients"};
    SplitMix64 rng(opt.seed + 1);
    const double h = 1e-6;
    double da_err = 0.0;
    for (int it = 0; it < 100; ++it) {
        const std::size_t n = 4 + rng.below(29);
        const std::size_t k = 1 + rng.below(n);
        std::vector<double> c(n);
        for (double& v : c) v = rng.uniform(-1.0, 1.0);
        const double a = keep_count_to_ratio(k, n);
        const double lambda = rng.uniform(4.0, 64.0);
        const auto m = soft_mask(c, a, lambda);
        const auto g = mask_gradients(m);
        const auto plus = soft_mask(c, a + h, lambda);
        const auto minus = soft_mask(c, a - h, lambda);
        double analytic_norm = 0.0, diff_norm = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double fd = (plus.soft_values[i] - minus.soft_values[i]) / (2.0 * h);
            analytic_norm = std::max(analytic_norm, std::abs(g.d_a[i]));
            diff_norm = std::max(diff_norm, std::abs(g.d_a[i] - fd));
        }
        da_err = std::max(da_err, diff_norm / std::max(analytic_norm, 1.0));
    }

    double jac_err = 0.0;
    for (int it = 0; it < 20; ++it) {
        const std::size_t n = 8;
        std::vector<double> c(n);
        for (std::size_t i = 0; i < n; ++i)
            c[i] = static_cast<double>(i) * 0.21 + rng.uniform(0.0, 0.05);
        const double a = keep_count_to_ratio(1 + rng.below(n), n);
        const double lambda = rng.uniform(4.0, 32.0);
        const auto m = soft_mask(c, a, lambda, RankVariant::Soft);
        const auto g = mask_gradients(m);
        double analytic_norm = 0.0, diff_norm = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            auto cp = c, cm = c;
            cp[j] += h;
            cm[j] -= h;
            const auto mp = soft_mask(cp, a, lambda, RankVariant::Soft);
            const auto mm = soft_mask(cm, a, lambda, RankVariant::Soft);
            for (std::size_t i = 0; i < n; ++i) {
                const double fd = (mp.soft_values[i] - mm.soft_values[i]) / (2.0 * h);
                analytic_norm = std::max(analytic_norm, std::abs(g.d_scores(i, j)));
                diff_norm = std::max(diff_norm, std::abs(g.d_scores(i, j) - fd));
            }
        }
        jac_err = std::max(jac_err, diff_norm / std::max(analytic_norm, 1.0));
    }
    r.max_error = std::max(da_err / 1e-4, jac_err / 1e-3);  // normalized to each bound
    r.pass = da_err < 1e-4 && jac_err < 1e-3;
    r.detail = "threshold gradient (100 masks) and soft-rank Jacobian (n=8) vs central differences";
    return r;
}

inline CheckResult check_dtopk_count_exactness(const VerifyOptions& opt) {
    CheckResult r{"dtopk-count-exactness"};
    SplitMix64 rng(opt.seed + 2);
    r.pass = true;
    for (std::size_t n = 1; n <= 64; ++n) {
        std::vector<double> c(n);
        for (std::size_t i = 0; i < n; ++i)
            c[i] = static_cast<double>(i) * 1e-3 + rng.uniform(0.0, 4e-4);  // tie-free
        for (std::size_t k = 1; k <= n; ++k) {
            const auto m = soft_mask(c, keep_count_to_ratio(k, n), static_cast<double>(n));
            std::size_t kept = 0;
            for (auto v : m.hard_keep) kept += v;
            if (kept != k) {
                r.pass = false;
                r.max_error = std::max(
                    r.max_error, std::abs(static_cast<double>(kept) - static_cast<double>(k)));
            }
        }
    }
    r.detail = "hard survivor count equals k for every (n, k), n <= 64, tie-free scores";
    return r;
}

inline CheckResult check_large_lambda(const VerifyOptions& opt) {
    CheckResult r{"large-lambda-consistency"};
    SplitMix64 rng(opt.seed + 3);
    for (int it = 0; it < 100; ++it) {
        const std::size_t n = 4 + rng.below(61);
        std::vector<double> c(n);
        for (std::size_t i = 0; i < n; ++i)
            c[i] = static_cast<double>(i) * 1e-2 + rng.uniform(0.0, 4e-3);
        const std::size_t k = 1 + rng.below(n);
        const double lambda = 1e4 * static_cast<double>(n);
        const auto m = soft_mask(c, keep_count_to_ratio(k, n), lambda);
        for (std::size_t i = 0; i < n; ++i)
            r.max_error = std::max(
                r.max_error, std::abs(m.soft_values[i] - static_cast<double>(m.hard_keep[i])));
    }
    // the default lambda = n_v at full scale: survivor count stays exact
    std::vector<double> c(576);
    for (std::size_t i = 0; i < 576; ++i) c[i] = rng.uniform(-1.0, 1.0);
    const auto m = soft_mask(c, keep_count_to_ratio(64, 576), 576.0);
    std::size_t kept = 0;
    for (auto v : m.hard_keep) kept += v;
    r.pass = r.max_error < 1e-3 && kept == 64;
    r.detail = "soft mask saturates to the hard mask at lambda = 1e4 n; default lambda = 576 kept exact";
    return r;
}

inline CheckResult check_pe_geometry(const VerifyOptions& opt) {
    CheckResult r{"pe-geometry"};
    SplitMix64 rng(opt.seed + 4);
    bool persistent_ok = true, compacted_violates = true;
    for (int it = 0; it < 10; ++it) {
        const std::size_t n_v = 6 + rng.below(10);
        SequenceLayout lay = SequenceLayout::make(2, n_v, 4);
        const auto before = lay.tokens;
        // prune a non-suffix vision token: drop the first, keep the rest
        std::vector<std::size_t> survivors;
        for (std::size_t t = lay.vision_begin() + 1; t < lay.vision_end(); ++t)
            survivors.push_back(t);

        SequenceLayout pers = lay;
        apply_pe(pers, PeMode{PeVariant::Persistent, 0}, survivors);
        SequenceLayout comp = lay;
        apply_pe(comp, PeMode{PeVariant::Compacted, 0}, survivors);

        bool violated = false;
        for (std::size_t i = 0; i + 1 < lay.size(); ++i)
            for (std::size_t j = i + 1; j < lay.size(); ++j) {
                const auto want = before[j].position_id - before[i].position_id;
                if (pers.tokens[j].position_id - pers.tokens[i].position_id != want)
                    persistent_ok = false;
                const bool live_i = i != lay.vision_begin();
                const bool live_j = j != lay.vision_begin();
                if (live_i && live_j &&
                    comp.tokens[j].position_id - comp.tokens[i].position_id != want)
                    violated = true;
            }
        if (!violated) compacted_violates = false;
    }
    r.pass = persistent_ok && compacted_violates;
    r.max_error = r.pass ? 0.0 : 1.0;
    r.detail = "persistent ids keep all pairwise offsets; compacted breaks one after a "
               "non-suffix prune (expected-failure semantics of the compacted variant)";
    return r;
}

inline CheckResult check_metric_oracles(const VerifyOptions& opt) {
    CheckResult r{"metric-oracles"};
    SplitMix64 rng(opt.seed + 5);

    auto naive_cosine = [](std::span<const double> a, std::span<const double> b) {
        double num = 0, na = 0, nb = 0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            num += a[i] * b[i];
            na += a[i] * a[i];
            nb += b[i] * b[i];
        }
        return num / (std::sqrt(na) * std::sqrt(nb));
    };

    auto make = [&](const std::string& id, const std::string& pairing) {
        LayerTrace tr;
        tr.sample_id = id;
        tr.layers = 3;
        tr.dim = 4;
        tr.heads = 2;
        tr.pairing = pairing;
        tr.tokens = {{0, Modality::System, 0, 0},  {1, Modality::Visual, 1, 0},
                     {2, Modality::Visual, 2, 0},  {3, Modality::Visual, 3, 0},
                     {4, Modality::Textual, 4, 0}, {5, Modality::Textual, 5, 0}};
        for (std::size_t l = 0; l <= tr.layers; ++l) {
            Matrix h(6, 4);
            for (double& v : h.data) v = rng.uniform(-1.0, 1.0);
            tr.hidden.push_back(h);
            tr.live.emplace_back(6, 1);
        }
        tr.attention.resize(tr.layers + 1);
        for (std::size_t l = 1; l <= tr.layers; ++l)
            for (std::size_t hh = 0; hh < tr.heads; ++hh) {
                Matrix a(6, 6);
                for (std::size_t q = 0; q < 6; ++q) {
                    double sum = 0.0;
                    for (std::size_t k = 0; k <= q; ++k) sum += (a(q, k) = rng.uniform(0.01, 1.0));
                    for (std::size_t k = 0; k <= q; ++k) a(q, k) /= sum;
                }
                tr.attention[l].push_back(a);
            }
        return tr;
    };

    std::vector<LayerTrace> traces;
    for (int i = 0; i < 20; ++i)
        traces.push_back(make("s" + std::to_string(i), i % 2 ? "reference" : "mismatched"));

    // s_intra oracle
    {
        const auto got = s_intra(traces, Modality::Textual);
        for (std::size_t l = 0; l < 3; ++l) {
            double acc = 0.0;
            for (const auto& tr : traces) {
                double per = 0.0;
                for (std::size_t t : {std::size_t{4}, std::size_t{5}})
                    per += naive_cosine(tr.hidden[l].row(t), tr.hidden[l + 1].row(t));
                acc += per / 2.0;
            }
            acc /= static_cast<double>(traces.size());
            r.max_error = std::max(r.max_error, std::abs(got[l] - acc));
            if (got[l] < -1.0 || got[l] > 1.0) r.max_error = 1.0;
        }
    }

    // s_cross oracle
    {
        const auto got = s_cross(traces);
        std::vector<const LayerTrace*> mis, ref;
        for (const auto& tr : traces)
            (tr.pairing == "mismatched" ? mis : ref).push_back(&tr);
        for (std::size_t l = 0; l <= 3; ++l) {
            double acc = 0.0;
            for (std::size_t p = 0; p < mis.size(); ++p) {
                std::vector<double> hm(4, 0.0), hr(4, 0.0);
                for (std::size_t t : {std::size_t{4}, std::size_t{5}})
                    for (std::size_t c = 0; c < 4; ++c) {
                        hm[c] += mis[p]->hidden[l](t, c) / 2.0;
                        hr[c] += ref[p]->hidden[l](t, c) / 2.0;
                    }
                acc += naive_cosine(hm, hr);
            }
            acc /= static_cast<double>(mis.size());
            r.max_error = std::max(r.max_error, std::abs(got[l] - acc));
        }
    }

    // ilvas oracle at (layer 1, window 1, top_k 2)
    {
        const double got = ilvas(traces, 1, 1, 2);
        double acc = 0.0;
        for (const auto& tr : traces) {
            auto recv = [&](std::size_t layer, std::size_t tok) {
                std::vector<double> v(2, 0.0);
                for (std::size_t hh = 0; hh < 2; ++hh)
                    v[hh] = 0.5 * (tr.attention[layer][hh](4, tok) + tr.attention[layer][hh](5, tok));
                return v;
            };
            std::vector<std::size_t> vis{1, 2, 3};
            std::vector<double> key;
            for (std::size_t t : vis) {
                auto v = recv(1, t);
                key.push_back(0.5 * (v[0] + v[1]));
            }
            auto order = select_top_k(key, 2);
            double per = 0.0;
            for (std::size_t i : order) per += naive_cosine(recv(1, vis[i]), recv(2, vis[i]));
            acc += per / 2.0;
        }
        acc /= static_cast<double>(traces.size());
        r.max_error = std::max(r.max_error, std::abs(got - acc));
    }

    r.pass = r.max_error < 1e-12;
    r.detail = "s_intra, s_cross, ilvas vs naive loop oracles on 20 random traces";
    return r;
}

inline CheckResult check_ged_family(const VerifyOptions&) {
    CheckResult r{"ged-family"};
    const double r_end = 1.0 / 576.0;
    r.pass = true;
    for (double p : {0.25, 0.5, 1.0, 2.0}) {
        DecayCurve c{DecayKind::GED, p, r_end};
        r.max_error = std::max(r.max_error, std::abs(decay_keep_ratio(c, 0.0) - 1.0));
        r.max_error = std::max(r.max_error, std::abs(decay_keep_ratio(c, 1.0) - r_end));
    }
    DecayCurve ed{DecayKind::ED, 1.0, r_end};
    DecayCurve p1{DecayKind::GED, 1.0, r_end};
    DecayCurve half{DecayKind::GED, 0.5, r_end};
    for (int i = 1; i < 100; ++i) {
        const double t = i / 100.0;
        r.max_error = std::max(r.max_error,
                               std::abs(decay_keep_ratio(p1, t) - decay_keep_ratio(ed, t)));
        if (!(decay_keep_ratio(half, t) < decay_keep_ratio(ed, t))) r.pass = false;
    }
    if (r.max_error >= 1e-12) r.pass = false;
    r.detail = "endpoint anchoring, p=1 equals plain exponential decay, p=0.5 strictly below it";
    return r;
}

inline CheckResult check_decoupled_prefill(const VerifyOptions& opt) {
    CheckResult r{"decoupled-prefill"};
    SplitMix64 rng(opt.seed + 6);
    r.pass = true;
    for (int it = 0; it < 10; ++it) {
        const std::size_t L = 8;
        ToyModel model = ToyModel::build(ModelShape{L, 32, 64, 4}, rng.next());
        SequenceLayout layout = SequenceLayout::make(1, 8, 4);
        Matrix emb = make_embeddings(layout, 32, rng.next());
        PruneSchedule s;
        s.n_v = 8;
        s.inject_layer = 2 + rng.below(4);
        s.exit_layer = std::min(L + 1, s.inject_layer + 2 + rng.below(4));
        s.stage_counts = {8};
        const auto a = forward(model, emb, layout, s);
        const auto b = decoupled_prefill(model, emb, layout, s);
        if (a.final_hidden.data != b.final_hidden.data || a.final_logits != b.final_logits)
            r.pass = false;
    }
    PruneSchedule hd;
    hd.inject_layer = 9;
    hd.exit_layer = 25;
    hd.filter_layers = {10, 14, 16, 18};
    hd.stage_counts = {576, 256, 128, 64, 9};
    hd.n_v = 576;
    const auto counts = layer_token_counts(hd, 32);
    ModelShape shape{32, 64, 128, 4};
    for (int it = 0; it < 100; ++it) {
        CostModel cm;
        cm.per_layer_base = rng.uniform(0.0, 2.0);
        cm.per_token = rng.uniform(0.0, 0.01);
        cm.vision_path = rng.uniform(0.0, 20.0);
        cm.stage_overhead = rng.uniform(0.0, 1.0);
        cm.text_tokens = rng.below(64);
        const double serial = prefill_latency(counts, shape, cm, PrefillMode::Serial);
        const double dec = prefill_latency(counts, shape, cm, PrefillMode::Decoupled);
        if (dec > serial + 1e-12) r.pass = false;
        r.max_error = std::max(r.max_error, dec - serial);
    }
    r.max_error = std::max(r.max_error, 0.0);
    r.detail = "two-lane prefill bit-identical to the single pass; overlap never slower";
    return r;
}

inline CheckResult check_end_to_end(const VerifyOptions& opt) {
    CheckResult r{"end-to-end-loop"};
    const std::size_t L = 32, d = 32, H = 2, n_v = 576;
    ToyModel model = ToyModel::build(ModelShape{L, d, 2 * d, H}, opt.seed + 7);
    SequenceLayout layout = SequenceLayout::make(2, n_v, 12);
    Matrix emb = make_embeddings(layout, d, opt.seed + 8);

    // probe pass: vision enters early, nothing pruned, attention recorded
    // over the layer window the curve needs
    PruneSchedule probe;
    probe.inject_layer = 3;
    probe.exit_layer = L + 1;
    probe.stage_counts = {n_v};
    probe.n_v = n_v;
    ForwardOptions popts;
    popts.record_hidden = true;
    popts.record_attention = true;
    popts.attn_layer_lo = 4;
    popts.attn_layer_hi = 14;
    const auto run = forward(model, emb, layout, probe, popts);
    const LayerTrace tr = emit_trace(model, emb, probe, run, "e2e");
    std::vector<LayerTrace> traces{tr};

    const auto curve = ilvas_curve(traces, 4, 13, 1, 20);
    auto filters = select_filter_layers(curve, 4, 13);
    if (filters.empty()) filters = {8};  // flat curve fallback; never hit with random data
    // two stages keep every filter placement comfortably inside the
    // feasible range of a 64-average budget
    if (filters.size() > 2) filters.resize(2);

    const std::size_t inject = filters.front() - 1;
    const std::size_t exit_layer = inject + 16;
    const auto sched = schedule_from_budget(inject, exit_layer, filters, n_v, 64.0, L);

    const auto final_run = forward(model, emb, layout, sched);
    double avg = 0.0;
    for (std::size_t c : final_run.vision_counts) avg += static_cast<double>(c);
    avg /= static_cast<double>(L);
    r.max_error = std::abs(avg - 64.0);
    r.pass = r.max_error <= 1.0;
    r.detail = "trace -> ilvas -> filter layers " + [&] {
        std::string s;
        for (std::size_t f : filters) s += (s.empty() ? "" : ",") + std::to_string(f);
        return s;
    }() + " -> 64-average schedule -> realized average " + std::to_string(avg);
    return r;
}

}  // namespace verify_detail

inline std::vector<CheckResult> run_acceptance_checks(const VerifyOptions& opt = {}) {
    using Body = std::function<CheckResult(const VerifyOptions&)>;
    const std::vector<Body> bodies = {
        verify_detail::check_flops_goldens,     verify_detail::check_budget_reductions,
        verify_detail::check_prune_mask_equivalence, verify_detail::check_dtopk_gradients,
        verify_detail::check_dtopk_count_exactness,  verify_detail::check_large_lambda,
        verify_detail::check_pe_geometry,       verify_detail::check_metric_oracles,
        verify_detail::check_ged_family,        verify_detail::check_decoupled_prefill,
        verify_detail::check_end_to_end,
    };
    std::vector<CheckResult> out;
    for (const Body& body : bodies) {
        const auto t0 = std::chrono::steady_clock::now();
        CheckResult r = body(opt);
        r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        out.push_back(std::move(r));
    }
    return out;
}

}  // namespace hidrop
