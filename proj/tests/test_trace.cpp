// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <sstream>

#include "hidrop/trace.hpp"

using namespace hidrop;

namespace {

LayerTrace small_trace(const std::string& id, std::uint64_t seed, const std::string& pairing = "") {
    LayerTrace tr;
    tr.sample_id = id;
    tr.layers = 2;
    tr.dim = 3;
    tr.heads = 2;
    tr.pairing = pairing;
    tr.tokens = {{0, Modality::System, 0, 0},
                 {1, Modality::Visual, 1, 0},
                 {2, Modality::Textual, 2, 0}};
    SplitMix64 rng(seed);
    for (std::size_t l = 0; l <= tr.layers; ++l) {
        Matrix h(3, 3);
        for (double& v : h.data) v = rng.uniform(-1, 1);
        tr.hidden.push_back(h);
        tr.live.emplace_back(3, 1);
    }
    tr.attention.resize(tr.layers + 1);
    for (std::size_t l = 1; l <= tr.layers; ++l) {
        for (std::size_t h = 0; h < tr.heads; ++h) {
            Matrix a(3, 3);
            for (std::size_t q = 0; q < 3; ++q) {
                double sum = 0.0;
                for (std::size_t k = 0; k <= q; ++k) sum += (a(q, k) = rng.uniform(0.01, 1.0));
                for (std::size_t k = 0; k <= q; ++k) a(q, k) /= sum;
            }
            tr.attention[l].push_back(a);
        }
    }
    return tr;
}

}  // namespace

TEST_CASE("trace round trip through jsonl") {
    auto tr = small_trace("s0", 1);
    std::stringstream ss;
    write_trace(ss, tr);

    auto back = read_traces(ss);
    REQUIRE(back.size() == 1);
    const LayerTrace& b = back[0];
    CHECK(b.sample_id == "s0");
    CHECK(b.layers == 2);
    CHECK(b.dim == 3);
    CHECK(b.heads == 2);
    CHECK(b.tokens.size() == 3);
    CHECK(b.tokens[1].modality == Modality::Visual);
    // values survive the 32-bit storage round trip
    for (std::size_t l = 0; l <= 2; ++l)
        for (std::size_t i = 0; i < 9; ++i)
            CHECK_THAT(b.hidden[l].data[i], Catch::Matchers::WithinAbs(tr.hidden[l].data[i], 1e-6));
    CHECK(b.has_attention(1));
    CHECK(b.has_attention(2));
    CHECK_FALSE(b.has_attention(0));
}

TEST_CASE("write is deterministic") {
    auto tr = small_trace("s0", 1);
    std::stringstream a, b;
    write_trace(a, tr);
    write_trace(b, tr);
    CHECK(a.str() == b.str());
}

TEST_CASE("schema violations carry line numbers") {
    auto tr = small_trace("s0", 1);
    std::stringstream ss;
    write_trace(ss, tr);
    std::string text = ss.str();

    SECTION("malformed attention row") {
        // corrupt the trace: scale one attention row so it no longer sums to 1
        auto bad = small_trace("s0", 1);
        for (double& v : bad.attention[1][0].row(2)) v *= 2.0;
        std::stringstream bs;
        write_trace(bs, bad);
        std::vector<SchemaIssue> issues;
        read_traces(bs, &issues);
        REQUIRE_FALSE(issues.empty());
        CHECK(issues[0].message.find("sums to") != std::string::npos);
        CHECK(issues[0].line > 0);
    }

    SECTION("layer record before header") {
        std::istringstream is(R"({"kind":"layer","sample_id":"zzz","layer":0,"hidden":[[1.0]]})");
        std::vector<SchemaIssue> issues;
        read_traces(is, &issues);
        REQUIRE_FALSE(issues.empty());
        CHECK(issues[0].line == 1);
        CHECK(issues[0].message.find("header") != std::string::npos);
    }

    SECTION("invalid json") {
        std::istringstream is("{not json\n");
        std::vector<SchemaIssue> issues;
        read_traces(is, &issues);
        REQUIRE_FALSE(issues.empty());
    }

    SECTION("missing layer detected") {
        // drop the last line (layer 2)
        auto pos = text.rfind("{\"hidden\"");
        pos = text.rfind('\n', text.size() - 2);
        std::istringstream is(text.substr(0, pos + 1));
        std::vector<SchemaIssue> issues;
        read_traces(is, &issues);
        bool found = false;
        for (const auto& i : issues)
            if (i.message.find("missing layer") != std::string::npos) found = true;
        CHECK(found);
    }

    SECTION("throwing overload raises on first issue") {
        std::istringstream is("{bad\n");
        CHECK_THROWS_AS(read_traces(is), std::runtime_error);
    }
}

TEST_CASE("multiple samples sorted by id") {
    std::stringstream ss;
    write_trace(ss, small_trace("b", 2, "reference"));
    write_trace(ss, small_trace("a", 3, "mismatched"));
    auto traces = read_traces(ss);
    REQUIRE(traces.size() == 2);
    CHECK(traces[0].sample_id == "a");
    CHECK(traces[0].pairing == "mismatched");
    CHECK(traces[1].sample_id == "b");
}
