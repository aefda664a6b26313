// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <numeric>

#include "hidrop/importance.hpp"

using namespace hidrop;

namespace {

struct Toy {
    SequenceLayout layout;
    std::vector<Matrix> q, k;
    Matrix hidden;
    std::vector<std::uint8_t> live;
};

Toy make_toy(std::size_t n_sys, std::size_t n_vis, std::size_t n_txt, std::size_t heads,
             std::size_t head_dim, std::uint64_t seed, std::size_t segments = 1) {
    Toy t;
    t.layout = SequenceLayout::make(n_sys, n_vis, n_txt, {}, segments);
    const std::size_t n = t.layout.size();
    SplitMix64 rng(seed);
    for (std::size_t h = 0; h < heads; ++h) {
        t.q.push_back(seeded_matrix(n, head_dim, rng.next(), 1.0));
        t.k.push_back(seeded_matrix(n, head_dim, rng.next(), 1.0));
    }
    t.hidden = seeded_matrix(n, 4, rng.next(), 1.0);
    t.live.assign(n, 1);
    return t;
}

// materializes the full attention matrix per head and slices it, per the
// strategy definitions, with no shared code with saliency()
std::vector<double> saliency_oracle(const Toy& t, const SaliencyConfig& cfg) {
    const std::size_t heads = t.q.size();
    const std::size_t dh = t.q[0].cols;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const std::size_t n = t.layout.size();

    std::vector<std::size_t> vision, text;
    for (std::size_t i = 0; i < n; ++i) {
        if (!t.live[i]) continue;
        if (t.layout.tokens[i].modality == Modality::Visual) vision.push_back(i);
        if (t.layout.tokens[i].modality == Modality::Textual) text.push_back(i);
    }

    std::vector<std::size_t> queries;
    switch (cfg.strategy) {
        case SaliencyStrategy::LastToken1R:
            queries = {text.back()};
            break;
        case SaliencyStrategy::AllToken:
        case SaliencyStrategy::AllToken_L2:
            queries = text;
            break;
        default:
            for (std::size_t i = 0; i < text.size(); ++i)
                if (i + 1 == text.size() ||
                    t.layout.tokens[text[i + 1]].segment != t.layout.tokens[text[i]].segment)
                    queries.push_back(text[i]);
    }

    std::vector<double> w(queries.size(), 1.0 / static_cast<double>(queries.size()));
    if (cfg.strategy == SaliencyStrategy::LastTokenNR_L2 ||
        cfg.strategy == SaliencyStrategy::AllToken_L2) {
        double total = 0;
        for (std::size_t i = 0; i < queries.size(); ++i) {
            w[i] = norm2(t.hidden.row(queries[i]));
            total += w[i];
        }
        for (double& x : w) x /= total;
    }

    std::vector<double> scores(vision.size(), 0.0);
    for (std::size_t qi = 0; qi < queries.size(); ++qi) {
        const std::size_t q = queries[qi];
        std::vector<double> agg(vision.size(), 0.0);
        for (std::size_t h = 0; h < heads; ++h) {
            // full attention row over the domain
            std::vector<std::size_t> domain;
            if (cfg.domain == SoftmaxDomain::VisionOnly)
                domain = vision;
            else
                for (std::size_t s = 0; s <= q; ++s)
                    if (t.live[s]) domain.push_back(s);
            std::vector<double> logits;
            for (std::size_t s : domain) logits.push_back(scale * dot(t.q[h].row(q), t.k[h].row(s)));
            double mx = *std::max_element(logits.begin(), logits.end());
            double sum = 0;
            for (double& l : logits) sum += (l = std::exp(l - mx));
            for (double& l : logits) l /= sum;
            for (std::size_t vi = 0; vi < vision.size(); ++vi) {
                double p = 0;
                for (std::size_t di = 0; di < domain.size(); ++di)
                    if (domain[di] == vision[vi]) p = logits[di];
                if (cfg.head_agg == HeadAgg::Mean)
                    agg[vi] += p / static_cast<double>(heads);
                else
                    agg[vi] = std::max(agg[vi], p);
            }
        }
        for (std::size_t vi = 0; vi < vision.size(); ++vi) scores[vi] += w[qi] * agg[vi];
    }
    return scores;
}

}  // namespace

TEST_CASE("saliency trivial cases") {
    // single vision token under vision-only domain
    auto t = make_toy(1, 1, 2, 2, 4, 5);
    SaliencyConfig cfg;
    auto s = saliency(t.q, t.k, t.hidden, t.layout, t.live, cfg);
    REQUIRE(s.size() == 1);
    CHECK(s[0] == 1.0);

    // two identical vision keys, one query
    auto t2 = make_toy(0, 2, 1, 1, 4, 6);
    for (std::size_t c = 0; c < 4; ++c) t2.k[0](1, c) = t2.k[0](0, c);
    cfg.strategy = SaliencyStrategy::LastToken1R;
    s = saliency(t2.q, t2.k, t2.hidden, t2.layout, t2.live, cfg);
    CHECK_THAT(s[0], Catch::Matchers::WithinAbs(0.5, 1e-12));
    CHECK_THAT(s[1], Catch::Matchers::WithinAbs(0.5, 1e-12));

    // no live vision tokens
    auto t3 = make_toy(1, 1, 1, 1, 4, 7);
    t3.live[1] = 0;
    CHECK_THROWS_WITH(saliency(t3.q, t3.k, t3.hidden, t3.layout, t3.live, cfg),
                      Catch::Matchers::ContainsSubstring("vision"));
}

TEST_CASE("saliency matches the full-attention oracle for all strategies") {
    for (std::uint64_t seed : {11u, 12u, 13u}) {
        auto t = make_toy(1, 3, 2, 2, 4, seed, 2);
        for (auto strategy :
             {SaliencyStrategy::LastToken1R, SaliencyStrategy::LastTokenNR,
              SaliencyStrategy::LastTokenNR_L2, SaliencyStrategy::AllToken,
              SaliencyStrategy::AllToken_L2}) {
            for (auto domain : {SoftmaxDomain::VisionOnly, SoftmaxDomain::CausalFull}) {
                SaliencyConfig cfg{strategy, domain, HeadAgg::Mean};
                auto got = saliency(t.q, t.k, t.hidden, t.layout, t.live, cfg);
                auto want = saliency_oracle(t, cfg);
                REQUIRE(got.size() == want.size());
                for (std::size_t i = 0; i < got.size(); ++i)
                    CHECK_THAT(got[i], Catch::Matchers::WithinAbs(want[i], 1e-12));
            }
        }
    }
}

TEST_CASE("vision-only saliency is a probability vector") {
    auto t = make_toy(2, 5, 4, 3, 4, 21, 2);
    for (auto strategy : {SaliencyStrategy::LastToken1R, SaliencyStrategy::LastTokenNR,
                          SaliencyStrategy::LastTokenNR_L2, SaliencyStrategy::AllToken,
                          SaliencyStrategy::AllToken_L2}) {
        SaliencyConfig cfg{strategy, SoftmaxDomain::VisionOnly, HeadAgg::Mean};
        auto s = saliency(t.q, t.k, t.hidden, t.layout, t.live, cfg);
        double sum = 0;
        for (double v : s) {
            CHECK(v >= 0.0);
            sum += v;
        }
        CHECK_THAT(sum, Catch::Matchers::WithinAbs(1.0, 1e-12));
    }
}

TEST_CASE("survivor set invariant under uniform query scaling (single query)") {
    // one query: softmax is rank-preserving in its logits, so a uniform
    // temperature change cannot reorder the scores
    auto t = make_toy(1, 6, 3, 1, 4, 33);
    SaliencyConfig cfg{SaliencyStrategy::LastToken1R, SoftmaxDomain::VisionOnly, HeadAgg::Mean};
    auto sel = score_and_select(t.q, t.k, t.hidden, t.layout, t.live, cfg, 3, 576.0);

    auto scaled = t;
    for (auto& qh : scaled.q)
        for (double& v : qh.data) v *= 4.0;
    // scores change, but the argsort (and so the survivor set) does not
    auto sel2 = score_and_select(scaled.q, scaled.k, scaled.hidden, scaled.layout, scaled.live,
                                 cfg, 3, 576.0);
    CHECK(sel.survivors == sel2.survivors);
}

TEST_CASE("score_and_select") {
    auto t = make_toy(1, 4, 2, 1, 4, 44);
    SaliencyConfig cfg{SaliencyStrategy::LastToken1R, SoftmaxDomain::VisionOnly, HeadAgg::Mean};

    // identity selection at k = n_live
    auto all = score_and_select(t.q, t.k, t.hidden, t.layout, t.live, cfg, 4, 576.0);
    CHECK(all.survivors == std::vector<std::size_t>{1, 2, 3, 4});

    // top-2 matches a brute-force argsort of the saliency scores
    auto scores = saliency(t.q, t.k, t.hidden, t.layout, t.live, cfg);
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    std::vector<std::size_t> want{idx[0] + 1, idx[1] + 1};  // +1: vision block starts at token 1
    std::sort(want.begin(), want.end());
    auto top2 = score_and_select(t.q, t.k, t.hidden, t.layout, t.live, cfg, 2, 576.0);
    CHECK(top2.survivors == want);

    // all-equal saliency: first k by index
    auto tied = t;
    for (auto& kh : tied.k)
        for (std::size_t r = 1; r <= 4; ++r)
            for (std::size_t c = 0; c < 4; ++c) kh(r, c) = kh(1, c);
    auto sel = score_and_select(tied.q, tied.k, tied.hidden, tied.layout, tied.live, cfg, 2, 576.0);
    CHECK(sel.survivors == std::vector<std::size_t>{1, 2});

    CHECK_THROWS_AS(score_and_select(t.q, t.k, t.hidden, t.layout, t.live, cfg, 5, 576.0),
                    std::invalid_argument);
}
