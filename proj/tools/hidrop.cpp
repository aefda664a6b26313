// SPDX-License-Identifier: Apache-2.0
//
// hidrop — command-line surface for the token-dropping toolkit.
//
// Subcommands: flops, sweep-ged, schedule-plan, metrics, simulate, verify.
// All tabular output is CSV with a header row and a `# config-hash:` comment
// line; --json mirrors the same rows as a JSON document. Every command is
// deterministic given its flags and seeds.

#include <cstdio>
#include <fstream>
#include <future>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "hidrop/metrics.hpp"
#include "hidrop/pipeline.hpp"
#include "hidrop/verify.hpp"

using nlohmann::json;
using namespace hidrop;

namespace {

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

// FNV-1a over the canonical config dump; stable provenance tag for CSVs
std::string config_hash(const json& config) {
    const std::string s = config.dump();
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};

void emit(const Table& t, const json& config, const std::string& out_path, bool as_json) {
    std::ostringstream csv;
    csv << "# config-hash: " << config_hash(config) << "\n";
    for (std::size_t i = 0; i < t.header.size(); ++i)
        csv << (i ? "," : "") << t.header[i];
    csv << "\n";
    for (const auto& row : t.rows) {
        for (std::size_t i = 0; i < row.size(); ++i) csv << (i ? "," : "") << row[i];
        csv << "\n";
    }

    std::string body = csv.str();
    if (as_json) {
        json rows = json::array();
        for (const auto& row : t.rows) {
            json r = json::object();
            for (std::size_t i = 0; i < row.size(); ++i) r[t.header[i]] = row[i];
            rows.push_back(r);
        }
        body = json{{"config", config}, {"config_hash", config_hash(config)}, {"rows", rows}}
                   .dump(2) +
               "\n";
    }
    if (out_path.empty() || out_path == "-") {
        std::cout << body;
    } else {
        std::ofstream f(out_path, std::ios::binary);
        if (!f) throw std::runtime_error("cannot open output file '" + out_path + "'");
        f << body;
    }
}

ModelShape shape_preset(const std::string& name) {
    if (name == "2.7b") return {32, 2560, 6912, 32};
    if (name == "7b") return {32, 4096, 11008, 32};
    if (name == "13b") return {40, 5120, 13824, 40};
    throw CLI::ValidationError("--preset", "unknown model preset '" + name + "'");
}

PruneSchedule schedule_preset(const std::string& name, std::size_t layers, std::size_t n_v) {
    if (name == "vanilla") return PruneSchedule::vanilla(n_v, layers);
    if (name == "hidrop") {
        PruneSchedule s;
        if (n_v == 576 && layers == 32) {
            s.inject_layer = 9;
            s.exit_layer = 25;
            s.filter_layers = {10, 14, 16, 18};
            s.stage_counts = {576, 256, 128, 64, 9};
        } else if (n_v == 576 && layers == 40) {
            s.inject_layer = 9;
            s.exit_layer = 25;
            s.filter_layers = {10, 14, 16, 18};
            s.stage_counts = {576, 256, 128, 64, 9};
        } else {
            throw CLI::ValidationError(
                "--schedule-preset",
                "the hidrop preset is defined for n_v=576 with 32 or 40 layers");
        }
        s.n_v = n_v;
        return s;
    }
    throw CLI::ValidationError("--schedule-preset", "unknown schedule preset '" + name + "'");
}

PruneSchedule load_schedule(const std::string& file, const std::string& preset,
                            std::size_t layers, std::size_t n_v) {
    if (!file.empty()) {
        std::ifstream f(file);
        if (!f) throw std::runtime_error("cannot open schedule file '" + file + "'");
        json j;
        try {
            f >> j;
        } catch (const json::exception& e) {
            throw std::runtime_error("schedule file '" + file + "': " + e.what());
        }
        PruneSchedule s = PruneSchedule::from_json(j);
        s.validate(layers);
        return s;
    }
    return schedule_preset(preset, layers, n_v);
}

Modality modality_flag(const std::string& s) {
    if (s == "text") return Modality::Textual;
    if (s == "vision") return Modality::Visual;
    if (s == "system") return Modality::System;
    throw CLI::ValidationError("--modality", "expected text, vision or system");
}

PeMode pe_flag(const std::string& s) {
    if (s == "persistent") return {PeVariant::Persistent, 4096};
    if (s == "compacted") return {PeVariant::Compacted, 4096};
    if (s == "group") return {PeVariant::Group, 4096};
    throw CLI::ValidationError("--pe", "expected persistent, compacted or group");
}

std::vector<LayerTrace> load_traces(const std::vector<std::string>& files) {
    std::vector<LayerTrace> all;
    for (const std::string& file : files) {
        std::ifstream f(file);
        if (!f) throw std::runtime_error("cannot open trace file '" + file + "'");
        std::vector<SchemaIssue> issues;
        auto traces = read_traces(f, &issues);
        if (!issues.empty()) {
            std::ostringstream msg;
            msg << "trace file '" << file << "' has schema violations:";
            for (const auto& i : issues) msg << "\n  line " << i.line << ": " << i.message;
            throw std::runtime_error(msg.str());
        }
        for (auto& t : traces) all.push_back(std::move(t));
    }
    return all;
}

// ---- subcommand bodies --------------------------------------------------

struct CommonOut {
    std::string out;
    bool as_json = false;
};

void add_common(CLI::App* cmd, CommonOut& o) {
    cmd->add_option("-o,--out", o.out, "Output path ('-' or empty = stdout)");
    cmd->add_flag("--json", o.as_json, "Emit JSON instead of CSV");
}

int cmd_flops(const std::string& preset, const std::string& sched_file,
              const std::string& sched_preset, std::size_t n_v, const CommonOut& o) {
    const ModelShape shape = shape_preset(preset);
    const PruneSchedule sched = load_schedule(sched_file, sched_preset, shape.layers, n_v);
    const auto counts = layer_token_counts(sched, shape.layers);
    const double avg = average_tokens(counts, shape.layers);
    const auto total = flops(counts, shape);
    const double reduction = 100.0 * (1.0 - avg / static_cast<double>(sched.n_v));

    json config = {{"command", "flops"}, {"preset", preset}, {"schedule", sched.to_json()}};
    Table t;
    t.header = {"layer", "n_tokens", "layer_flops"};
    for (std::size_t l = 1; l <= shape.layers; ++l) {
        std::vector<std::size_t> one(shape.layers, 0);
        one[l - 1] = counts[l - 1];
        t.rows.push_back({std::to_string(l), std::to_string(counts[l - 1]),
                          std::to_string(flops(one, shape))});
    }
    emit(t, config, o.out, o.as_json);

    std::fprintf(stderr, "model %s  d=%zu m=%zu L=%zu\n", preset.c_str(), shape.hidden, shape.ffn,
                 shape.layers);
    std::fprintf(stderr, "total:     %.2f TFLOPs\n", static_cast<double>(total) / 1e12);
    std::fprintf(stderr, "avg tokens: %.2f of %zu\n", avg, sched.n_v);
    std::fprintf(stderr, "reduction: %.1f%%\n", reduction);
    return 0;
}

int cmd_sweep_ged(std::vector<double> ps, std::size_t n_v, double r_final, std::size_t steps,
                  const CommonOut& o) {
    for (double p : ps)
        if (!(p > 0.0)) throw CLI::ValidationError("--p", "exponents must be positive");
    std::sort(ps.begin(), ps.end());
    const double r_end = r_final / static_cast<double>(n_v);

    // one curve per exponent, evaluated in parallel, merged in sorted order
    std::vector<std::future<std::vector<double>>> jobs;
    for (double p : ps)
        jobs.push_back(std::async(std::launch::async, [=] {
            std::vector<double> curve;
            DecayCurve c{DecayKind::GED, p, r_end};
            for (std::size_t i = 0; i <= steps; ++i)
                curve.push_back(decay_keep_ratio(c, static_cast<double>(i) / steps) *
                                static_cast<double>(n_v));
            return curve;
        }));
    std::vector<std::vector<double>> curves;
    for (auto& j : jobs) curves.push_back(j.get());

    // lower exponents must sit below higher ones at every interior point
    for (std::size_t a = 0; a + 1 < curves.size(); ++a)
        for (std::size_t i = 1; i < steps; ++i)
            if (ps[a] < ps[a + 1] && curves[a][i] >= curves[a + 1][i])
                throw std::runtime_error("decay ordering violated at t=" +
                                         fmt(static_cast<double>(i) / steps));

    json config = {{"command", "sweep-ged"}, {"p", ps}, {"n_v", n_v}, {"steps", steps},
                   {"r_end", r_end}};
    Table t;
    t.header = {"t"};
    for (double p : ps) t.header.push_back("p=" + fmt(p));
    for (std::size_t i = 0; i <= steps; ++i) {
        std::vector<std::string> row{fmt(static_cast<double>(i) / steps)};
        for (const auto& c : curves) row.push_back(fmt(c[i]));
        t.rows.push_back(std::move(row));
    }
    emit(t, config, o.out, o.as_json);
    return 0;
}

int cmd_schedule_plan(std::size_t inject, std::size_t exit_layer,
                      std::vector<std::size_t> filters, std::size_t n_v, double target,
                      std::size_t layers, const std::string& schedule_out, const CommonOut& o) {
    const auto sched = schedule_from_budget(inject, exit_layer, filters, n_v, target, layers);
    const auto counts = layer_token_counts(sched, layers);

    json config = {{"command", "schedule-plan"}, {"target", target}, {"layers", layers},
                   {"schedule", sched.to_json()}};
    Table t;
    t.header = {"layer", "n_tokens"};
    for (std::size_t l = 1; l <= layers; ++l)
        t.rows.push_back({std::to_string(l), std::to_string(counts[l - 1])});
    emit(t, config, o.out, o.as_json);

    const std::string sched_text = sched.to_json().dump(2) + "\n";
    if (schedule_out.empty()) {
        std::fputs(sched_text.c_str(), stderr);
    } else {
        std::ofstream f(schedule_out, std::ios::binary);
        if (!f) throw std::runtime_error("cannot open '" + schedule_out + "'");
        f << sched_text;
    }
    std::fprintf(stderr, "realized average: %.3f (target %.3f)\n",
                 average_tokens(counts, layers), target);
    return 0;
}

int cmd_metrics(const std::vector<std::string>& files, const std::string& which,
                const std::string& modality, std::vector<std::size_t> windows,
                std::vector<std::size_t> top_ks, std::size_t l_lo, std::size_t l_hi, bool valleys,
                const CommonOut& o) {
    const auto traces = load_traces(files);
    json config = {{"command", "metrics"}, {"which", which}, {"files", files}};
    Table t;

    if (which == "s_intra") {
        const auto curve = s_intra(traces, modality_flag(modality));
        config["modality"] = modality;
        t.header = {"transition", "s_intra"};
        for (std::size_t l = 0; l < curve.size(); ++l)
            t.rows.push_back({std::to_string(l) + "->" + std::to_string(l + 1), fmt(curve[l])});
    } else if (which == "s_cross") {
        const auto curve = s_cross(traces);
        t.header = {"layer", "s_cross"};
        for (std::size_t l = 0; l < curve.size(); ++l)
            t.rows.push_back({std::to_string(l), fmt(curve[l])});
    } else if (which == "ilvas") {
        if (l_hi < l_lo) throw CLI::ValidationError("--l-hi", "need l_lo <= l_hi");
        config["windows"] = windows;
        config["top_k"] = top_ks;
        config["l_lo"] = l_lo;
        config["l_hi"] = l_hi;

        // grid sweep: one column per (top_k, window) cell, in parallel
        struct Cell {
            std::size_t k, n;
            IlvasCurve curve;
        };
        std::vector<std::future<Cell>> jobs;
        for (std::size_t k : top_ks)
            for (std::size_t n : windows)
                jobs.push_back(std::async(std::launch::async, [&, k, n] {
                    return Cell{k, n, ilvas_curve(traces, l_lo, l_hi, n, k)};
                }));
        std::vector<Cell> cells;
        for (auto& j : jobs) cells.push_back(j.get());
        std::sort(cells.begin(), cells.end(), [](const Cell& a, const Cell& b) {
            return std::tie(a.k, a.n) < std::tie(b.k, b.n);
        });

        t.header = {"layer"};
        for (const Cell& c : cells)
            t.header.push_back("K=" + std::to_string(c.k) + ",n=" + std::to_string(c.n));
        for (std::size_t l = l_lo; l <= l_hi; ++l) {
            std::vector<std::string> row{std::to_string(l)};
            for (const Cell& c : cells) row.push_back(fmt(c.curve.scores[l - l_lo]));
            t.rows.push_back(std::move(row));
        }

        const auto selected = select_filter_layers(cells.front().curve, l_lo, l_hi, valleys);
        std::ostringstream sel;
        for (std::size_t f : selected) sel << (sel.tellp() > 0 ? "," : "") << f;
        std::fprintf(stderr, "selected filter layers (K=%zu, n=%zu%s): %s\n",
                     cells.front().k, cells.front().n, valleys ? ", valleys" : "",
                     sel.str().c_str());
        config["selected_filter_layers"] = selected;
    } else {
        throw CLI::ValidationError("--which", "expected s_intra, s_cross or ilvas");
    }
    emit(t, config, o.out, o.as_json);
    return 0;
}

int cmd_simulate(std::size_t layers, std::size_t dim, std::size_t heads, std::size_t ffn,
                 std::size_t n_system, std::size_t n_vision, std::size_t n_text,
                 std::uint64_t seed, const std::string& sched_file,
                 const std::string& sched_preset, bool masking, bool decoupled,
                 const std::string& pe, const std::string& strategy, bool record_attention,
                 std::size_t attn_lo, std::size_t attn_hi, const std::string& trace_out,
                 const std::string& sample_id, const CommonOut& o) {
    if (ffn == 0) ffn = 2 * dim;
    const ModelShape shape{layers, dim, ffn, heads};
    const ToyModel model = ToyModel::build(shape, seed);
    const PeMode pem = pe_flag(pe);
    const SequenceLayout layout = SequenceLayout::make(n_system, n_vision, n_text, pem);
    const Matrix emb = make_embeddings(layout, dim, seed + 1);
    const PruneSchedule sched = load_schedule(sched_file, sched_preset, layers, n_vision);

    ForwardOptions opts;
    opts.exec = masking ? PruneExec::Masking : PruneExec::Removal;
    opts.pe = pem;
    opts.saliency.strategy = saliency_from_name(strategy);
    opts.record_hidden = !trace_out.empty();
    opts.record_attention = record_attention;
    opts.attn_layer_lo = attn_lo;
    opts.attn_layer_hi = attn_hi;

    const ForwardResult res = decoupled
                                  ? decoupled_prefill(model, emb, layout, sched, opts)
                                  : forward(model, emb, layout, sched, opts);

    json config = {{"command", "simulate"}, {"seed", seed},
                   {"shape", {{"layers", layers}, {"dim", dim}, {"heads", heads}, {"ffn", ffn}}},
                   {"tokens", {{"system", n_system}, {"vision", n_vision}, {"text", n_text}}},
                   {"schedule", sched.to_json()}, {"pe", pe}, {"strategy", strategy},
                   {"exec", masking ? "masking" : "removal"}, {"decoupled", decoupled}};
    Table t;
    t.header = {"layer", "vision_tokens"};
    for (std::size_t l = 1; l <= layers; ++l)
        t.rows.push_back({std::to_string(l), std::to_string(res.vision_counts[l - 1])});
    emit(t, config, o.out, o.as_json);

    if (!trace_out.empty()) {
        std::ofstream f(trace_out, std::ios::binary);
        if (!f) throw std::runtime_error("cannot open trace output '" + trace_out + "'");
        write_trace(f, emit_trace(model, emb, sched, res, sample_id));
    }

    double avg = 0.0, checksum = 0.0;
    for (std::size_t c : res.vision_counts) avg += static_cast<double>(c);
    for (double v : res.final_logits) checksum += v;
    std::fprintf(stderr, "avg vision tokens: %.3f\n", avg / static_cast<double>(layers));
    std::fprintf(stderr, "final logit sum:   %s\n", fmt(checksum).c_str());
    for (const LaneEvent& e : res.lane_log)
        std::fprintf(stderr, "lane %-6s %s\n", e.lane.c_str(), e.op.c_str());
    return 0;
}

int cmd_verify(std::uint64_t seed, bool corrupt_golden) {
    VerifyOptions opt;
    opt.seed = seed;
    opt.corrupt_golden = corrupt_golden;
    const auto results = run_acceptance_checks(opt);
    bool all = true;
    for (const CheckResult& r : results) {
        all = all && r.pass;
        std::printf("[%s] %-26s max_error=%-12s %6.2fs  %s\n", r.pass ? "PASS" : "FAIL",
                    r.name.c_str(), fmt(r.max_error).c_str(), r.seconds, r.detail.c_str());
    }
    std::printf("%zu/%zu checks passed\n",
                static_cast<std::size_t>(std::count_if(results.begin(), results.end(),
                                                       [](const auto& r) { return r.pass; })),
                results.size());
    return all ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"token-dropping schedule, metric and pipeline toolkit"};
    app.require_subcommand(1);

    // flops
    std::string f_preset = "7b", f_sched_file, f_sched_preset = "vanilla";
    std::size_t f_nv = 576;
    CommonOut f_out;
    auto* flops_cmd = app.add_subcommand("flops", "Per-layer token counts and FLOPs report");
    flops_cmd->add_option("--preset", f_preset, "Model shape preset: 2.7b, 7b, 13b")
        ->capture_default_str();
    flops_cmd->add_option("--schedule", f_sched_file, "Schedule JSON file");
    flops_cmd->add_option("--schedule-preset", f_sched_preset, "vanilla or hidrop")
        ->capture_default_str();
    flops_cmd->add_option("--n-v", f_nv, "Vision token count")->capture_default_str();
    add_common(flops_cmd, f_out);

    // sweep-ged
    std::vector<double> g_ps{0.25, 0.5, 1.0, 2.0};
    std::size_t g_nv = 576, g_steps = 100;
    double g_final = 1.0;
    CommonOut g_out;
    auto* ged_cmd = app.add_subcommand("sweep-ged", "Keep-count decay curves per exponent p");
    ged_cmd->add_option("--p", g_ps, "Decay exponents")->capture_default_str();
    ged_cmd->add_option("--n-v", g_nv, "Initial token count")->capture_default_str();
    ged_cmd->add_option("--final", g_final, "Final token count")->capture_default_str();
    ged_cmd->add_option("--steps", g_steps, "Grid resolution")->capture_default_str();
    add_common(ged_cmd, g_out);

    // schedule-plan
    std::size_t p_inject = 9, p_exit = 25, p_nv = 576, p_layers = 32;
    std::vector<std::size_t> p_filters{10, 14, 16, 18};
    double p_target = 64.0;
    std::string p_sched_out;
    CommonOut p_out;
    auto* plan_cmd = app.add_subcommand("schedule-plan", "Build a schedule for a token budget");
    plan_cmd->add_option("--inject", p_inject, "Injection layer")->capture_default_str();
    plan_cmd->add_option("--exit", p_exit, "Exit layer")->capture_default_str();
    plan_cmd->add_option("--filters", p_filters, "Filter layers")->capture_default_str();
    plan_cmd->add_option("--n-v", p_nv, "Vision token count")->capture_default_str();
    plan_cmd->add_option("--target", p_target, "Average token budget")->capture_default_str();
    plan_cmd->add_option("--layers", p_layers, "Model depth")->capture_default_str();
    plan_cmd->add_option("--schedule-out", p_sched_out, "Write the schedule JSON here");
    add_common(plan_cmd, p_out);

    // metrics
    std::vector<std::string> m_files;
    std::string m_which = "s_intra", m_modality = "text";
    std::vector<std::size_t> m_windows{4}, m_topks{20};
    std::size_t m_llo = 1, m_lhi = 1;
    bool m_valleys = false;
    CommonOut m_out;
    auto* met_cmd = app.add_subcommand("metrics", "Layer curves from trace files");
    met_cmd->add_option("--trace", m_files, "Trace files (JSONL)")->required();
    met_cmd->add_option("--which", m_which, "s_intra, s_cross or ilvas")->capture_default_str();
    met_cmd->add_option("--modality", m_modality, "s_intra modality: text, vision, system")
        ->capture_default_str();
    met_cmd->add_option("--window", m_windows, "ilvas layer offsets n")->capture_default_str();
    met_cmd->add_option("--top-k", m_topks, "ilvas top-K sizes")->capture_default_str();
    met_cmd->add_option("--l-lo", m_llo, "First layer of the ilvas window")->capture_default_str();
    met_cmd->add_option("--l-hi", m_lhi, "Last layer of the ilvas window")->capture_default_str();
    met_cmd->add_flag("--valleys", m_valleys, "Select local minima instead of maxima");
    add_common(met_cmd, m_out);

    // simulate
    std::size_t s_layers = 8, s_dim = 32, s_heads = 4, s_ffn = 0;
    std::size_t s_nsys = 1, s_nvis = 16, s_ntxt = 8;
    std::uint64_t s_seed = 2026;
    std::string s_sched_file, s_sched_preset = "vanilla", s_pe = "persistent";
    std::string s_strategy = "last-token-nr", s_trace_out, s_sample = "sim0";
    bool s_mask = false, s_dec = false, s_attn = false;
    std::size_t s_attn_lo = 1, s_attn_hi = static_cast<std::size_t>(-1);
    CommonOut s_out;
    auto* sim_cmd = app.add_subcommand("simulate", "Run the deterministic toy pipeline");
    sim_cmd->add_option("--layers", s_layers)->capture_default_str();
    sim_cmd->add_option("--dim", s_dim)->capture_default_str();
    sim_cmd->add_option("--heads", s_heads)->capture_default_str();
    sim_cmd->add_option("--ffn", s_ffn, "FFN width (0 = 2*dim)")->capture_default_str();
    sim_cmd->add_option("--n-system", s_nsys)->capture_default_str();
    sim_cmd->add_option("--n-vision", s_nvis)->capture_default_str();
    sim_cmd->add_option("--n-text", s_ntxt)->capture_default_str();
    sim_cmd->add_option("--seed", s_seed)->capture_default_str();
    sim_cmd->add_option("--schedule", s_sched_file, "Schedule JSON file");
    sim_cmd->add_option("--schedule-preset", s_sched_preset, "vanilla or hidrop")
        ->capture_default_str();
    sim_cmd->add_flag("--masking", s_mask, "Mask pruned tokens instead of removing them");
    sim_cmd->add_flag("--decoupled", s_dec, "Two-lane prefill");
    sim_cmd->add_option("--pe", s_pe, "persistent, compacted or group")->capture_default_str();
    sim_cmd->add_option("--strategy", s_strategy, "Saliency strategy name")
        ->capture_default_str();
    sim_cmd->add_flag("--record-attention", s_attn);
    sim_cmd->add_option("--attn-lo", s_attn_lo)->capture_default_str();
    sim_cmd->add_option("--attn-hi", s_attn_hi, "Last attention-recorded layer");
    sim_cmd->add_option("--trace-out", s_trace_out, "Write a JSONL trace here");
    sim_cmd->add_option("--sample-id", s_sample)->capture_default_str();
    add_common(sim_cmd, s_out);

    // verify
    std::uint64_t v_seed = 2026;
    bool v_corrupt = false;
    auto* ver_cmd = app.add_subcommand("verify", "Run the invariant suite; exit 0 iff all pass");
    ver_cmd->add_option("--seed", v_seed)->capture_default_str();
    ver_cmd->add_flag("--corrupt-golden", v_corrupt,
                      "Negative control: perturb a reference constant");

    CLI11_PARSE(app, argc, argv);

    try {
        if (flops_cmd->parsed())
            return cmd_flops(f_preset, f_sched_file, f_sched_preset, f_nv, f_out);
        if (ged_cmd->parsed()) return cmd_sweep_ged(g_ps, g_nv, g_final, g_steps, g_out);
        if (plan_cmd->parsed())
            return cmd_schedule_plan(p_inject, p_exit, p_filters, p_nv, p_target, p_layers,
                                     p_sched_out, p_out);
        if (met_cmd->parsed())
            return cmd_metrics(m_files, m_which, m_modality, m_windows, m_topks, m_llo, m_lhi,
                               m_valleys, m_out);
        if (sim_cmd->parsed())
            return cmd_simulate(s_layers, s_dim, s_heads, s_ffn, s_nsys, s_nvis, s_ntxt, s_seed,
                                s_sched_file, s_sched_preset, s_mask, s_dec, s_pe, s_strategy,
                                s_attn, s_attn_lo, s_attn_hi, s_trace_out, s_sample, s_out);
        if (ver_cmd->parsed()) return cmd_verify(v_seed, v_corrupt);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
