// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <istream>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "hidrop/core.hpp"
#include "hidrop/layout.hpp"

namespace hidrop {

// Recorded hidden states (layers 0..L, layer 0 = embeddings) and optional
// per-head attention maps (layers 1..L) for one sample. Values are stored
// on disk as 32-bit floats and promoted to 64-bit on load; metrics always
// run in 64-bit.
struct LayerTrace {
    std::string sample_id;
    std::size_t layers = 0;  // L
    std::size_t dim = 0;
    std::size_t heads = 0;
    std::string pairing;  // "", "reference" or "mismatched"
    std::vector<TokenInfo> tokens;
    std::vector<Matrix> hidden;                       // layers+1 entries, tokens x dim
    std::vector<std::vector<std::uint8_t>> live;      // layers+1 entries
    std::vector<std::vector<Matrix>> attention;       // layers+1 entries; [l] empty = not recorded

    std::size_t n_tokens() const { return tokens.size(); }

    bool has_attention(std::size_t layer) const {
        return layer < attention.size() && !attention[layer].empty();
    }

    std::vector<std::size_t> tokens_of(Modality m) const {
        std::vector<std::size_t> out;
        for (const TokenInfo& t : tokens)
            if (t.modality == m) out.push_back(t.index);
        return out;
    }
};

namespace detail {

inline nlohmann::json f32_row(std::span<const double> row) {
    nlohmann::json a = nlohmann::json::array();
    for (double v : row) a.push_back(static_cast<float>(v));
    return a;
}

inline nlohmann::json f32_matrix(const Matrix& m) {
    nlohmann::json a = nlohmann::json::array();
    for (std::size_t r = 0; r < m.rows; ++r) a.push_back(f32_row(m.row(r)));
    return a;
}

inline Matrix matrix_from_json(const nlohmann::json& j) {
    Matrix m(j.size(), j.empty() ? 0 : j[0].size());
    for (std::size_t r = 0; r < m.rows; ++r) {
        if (j[r].size() != m.cols)
            throw std::invalid_argument("trace: ragged matrix row");
        for (std::size_t c = 0; c < m.cols; ++c)
            m(r, c) = static_cast<double>(j[r][c].get<float>());
    }
    return m;
}

}  // namespace detail

// One JSON object per line: a header record carrying the token table,
// followed by one layer record per layer index 0..L.
inline void write_trace(std::ostream& os, const LayerTrace& tr) {
    nlohmann::json header = {
        {"kind", "header"},
        {"sample_id", tr.sample_id},
        {"layers", tr.layers},
        {"dim", tr.dim},
        {"heads", tr.heads},
    };
    if (!tr.pairing.empty()) header["pairing"] = tr.pairing;
    nlohmann::json toks = nlohmann::json::array();
    for (const TokenInfo& t : tr.tokens)
        toks.push_back({{"index", t.index},
                        {"modality", modality_name(t.modality)},
                        {"position_id", t.position_id},
                        {"segment", t.segment}});
    header["tokens"] = toks;
    os << header.dump() << '\n';

    for (std::size_t l = 0; l <= tr.layers; ++l) {
        nlohmann::json rec = {
            {"kind", "layer"},
            {"sample_id", tr.sample_id},
            {"layer", l},
            {"hidden", detail::f32_matrix(tr.hidden[l])},
        };
        if (l < tr.live.size() && !tr.live[l].empty()) rec["live"] = tr.live[l];
        if (tr.has_attention(l)) {
            nlohmann::json heads = nlohmann::json::array();
            for (const Matrix& h : tr.attention[l]) heads.push_back(detail::f32_matrix(h));
            rec["attention"] = heads;
        }
        os << rec.dump() << '\n';
    }
}

inline void write_traces(std::ostream& os, std::span<const LayerTrace> traces) {
    for (const LayerTrace& tr : traces) write_trace(os, tr);
}

struct SchemaIssue {
    std::size_t line = 0;
    std::string message;
};

// Parses a JSONL trace stream, accumulating schema violations instead of
// throwing on the first one. Traces come back sorted by sample_id.
inline std::vector<LayerTrace> read_traces(std::istream& is, std::vector<SchemaIssue>* issues = nullptr) {
    std::map<std::string, LayerTrace> by_sample;
    std::map<std::string, std::vector<bool>> seen_layers;
    std::vector<SchemaIssue> local;
    auto complain = [&](std::size_t line, std::string msg) {
        local.push_back({line, std::move(msg)});
    };

    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const std::exception& e) {
            complain(lineno, std::string("invalid JSON: ") + e.what());
            continue;
        }
        try {
            const std::string kind = j.value("kind", "");
            const std::string sid = j.value("sample_id", "");
            if (sid.empty()) {
                complain(lineno, "missing sample_id");
                continue;
            }
            if (kind == "header") {
                if (by_sample.count(sid)) {
                    complain(lineno, "duplicate header for sample '" + sid + "'");
                    continue;
                }
                LayerTrace tr;
                tr.sample_id = sid;
                tr.layers = j.at("layers").get<std::size_t>();
                tr.dim = j.at("dim").get<std::size_t>();
                tr.heads = j.at("heads").get<std::size_t>();
                tr.pairing = j.value("pairing", "");
                if (!tr.pairing.empty() && tr.pairing != "reference" && tr.pairing != "mismatched")
                    complain(lineno, "pairing must be 'reference' or 'mismatched'");
                for (const auto& t : j.at("tokens")) {
                    TokenInfo tok;
                    tok.index = t.at("index").get<std::size_t>();
                    tok.modality = modality_from_name(t.at("modality").get<std::string>());
                    tok.position_id = t.at("position_id").get<std::int64_t>();
                    tok.segment = t.value("segment", std::size_t{0});
                    tr.tokens.push_back(tok);
                }
                tr.hidden.resize(tr.layers + 1);
                tr.live.resize(tr.layers + 1);
                tr.attention.resize(tr.layers + 1);
                seen_layers[sid].assign(tr.layers + 1, false);
                by_sample.emplace(sid, std::move(tr));
            } else if (kind == "layer") {
                auto it = by_sample.find(sid);
                if (it == by_sample.end()) {
                    complain(lineno, "layer record before header for sample '" + sid + "'");
                    continue;
                }
                LayerTrace& tr = it->second;
                const std::size_t l = j.at("layer").get<std::size_t>();
                if (l > tr.layers) {
                    complain(lineno, "layer index " + std::to_string(l) + " out of range");
                    continue;
                }
                if (seen_layers[sid][l])
                    complain(lineno, "duplicate layer " + std::to_string(l));
                seen_layers[sid][l] = true;
                Matrix h = detail::matrix_from_json(j.at("hidden"));
                if (h.rows != tr.tokens.size() || h.cols != tr.dim)
                    complain(lineno, "hidden shape " + std::to_string(h.rows) + "x" +
                                         std::to_string(h.cols) + " does not match header");
                tr.hidden[l] = std::move(h);
                if (j.contains("live")) {
                    tr.live[l] = j.at("live").get<std::vector<std::uint8_t>>();
                    if (tr.live[l].size() != tr.tokens.size())
                        complain(lineno, "live bitmap length mismatch");
                } else {
                    tr.live[l].assign(tr.tokens.size(), 1);
                }
                if (j.contains("attention")) {
                    if (l == 0) complain(lineno, "attention not allowed at layer 0");
                    const auto& heads = j.at("attention");
                    if (heads.size() != tr.heads)
                        complain(lineno, "attention head count " + std::to_string(heads.size()) +
                                             " does not match header");
                    for (const auto& hj : heads) {
                        Matrix a = detail::matrix_from_json(hj);
                        if (a.rows != tr.tokens.size() || a.cols != tr.tokens.size())
                            complain(lineno, "attention map must be tokens x tokens");
                        // each live query row is a distribution; dead rows are all-zero
                        for (std::size_t q = 0; q < a.rows; ++q) {
                            double sum = 0.0;
                            bool neg = false;
                            for (std::size_t k = 0; k < a.cols; ++k) {
                                if (a(q, k) < 0.0) neg = true;
                                sum += a(q, k);
                            }
                            if (neg)
                                complain(lineno, "negative attention weight at query " + std::to_string(q));
                            if (sum != 0.0 && std::abs(sum - 1.0) > 1e-3)
                                complain(lineno, "attention row " + std::to_string(q) +
                                                     " sums to " + std::to_string(sum) + ", expected 1");
                        }
                        tr.attention[l].push_back(std::move(a));
                    }
                }
            } else {
                complain(lineno, "unknown record kind '" + kind + "'");
            }
        } catch (const std::exception& e) {
            complain(lineno, e.what());
        }
    }
    for (const auto& [sid, seen] : seen_layers)
        for (std::size_t l = 0; l < seen.size(); ++l)
            if (!seen[l]) complain(0, "sample '" + sid + "' is missing layer " + std::to_string(l));

    if (issues)
        *issues = std::move(local);
    else if (!local.empty())
        throw std::runtime_error("trace schema violation at line " + std::to_string(local[0].line) +
                                 ": " + local[0].message);
    std::vector<LayerTrace> out;
    out.reserve(by_sample.size());
    for (auto& [sid, tr] : by_sample) out.push_back(std::move(tr));
    return out;
}

}  // namespace hidrop
