// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include "hidrop/core.hpp"

using namespace hidrop;

TEST_CASE("cosine basics") {
    std::vector<double> u{1, 2, 3};
    CHECK(cosine(u, u) == 1.0);

    std::vector<double> e1{1, 0}, e2{0, 1};
    CHECK(cosine(e1, e2) == 0.0);

    std::vector<double> a{1, 1}, b{1, 0};
    CHECK_THAT(cosine(a, b), Catch::Matchers::WithinAbs(0.7071067811865475, 1e-15));

    std::vector<double> z{0, 0};
    CHECK_THROWS_AS(cosine(z, e1), std::invalid_argument);
    std::vector<double> wrong{1.0};
    CHECK_THROWS_AS(cosine(wrong, e1), std::invalid_argument);
}

TEST_CASE("cosine symmetry and scale invariance") {
    SplitMix64 rng(42);
    for (int it = 0; it < 100; ++it) {
        std::vector<double> u(5), v(5);
        for (auto& x : u) x = rng.uniform(-2, 2);
        for (auto& x : v) x = rng.uniform(-2, 2);
        CHECK(cosine(u, v) == cosine(v, u));
        const double alpha = rng.uniform(0.1, 10.0);
        std::vector<double> su = u;
        for (auto& x : su) x *= alpha;
        CHECK_THAT(cosine(su, v), Catch::Matchers::WithinAbs(cosine(u, v), 1e-12));
    }
}

TEST_CASE("softmax basics") {
    std::vector<double> zeros{0, 0, 0};
    auto p = softmax(zeros);
    for (double x : p) CHECK_THAT(x, Catch::Matchers::WithinAbs(1.0 / 3.0, 1e-15));

    std::vector<double> big{1000, 0};
    p = softmax(big);
    CHECK_THAT(p[0], Catch::Matchers::WithinAbs(1.0, 1e-12));
    CHECK(p[1] >= 0.0);
    CHECK(std::isfinite(p[0]));

    std::vector<double> two{0, 0};
    std::vector<std::uint8_t> mask{1, 0};
    p = softmax(two, &mask);
    CHECK(p[0] == 1.0);
    CHECK(p[1] == 0.0);

    std::vector<std::uint8_t> none{0, 0};
    CHECK_THROWS_AS(softmax(two, &none), std::invalid_argument);
}

TEST_CASE("softmax translation invariance") {
    SplitMix64 rng(7);
    for (int it = 0; it < 50; ++it) {
        std::vector<double> x(6), shifted(6);
        const double c = rng.uniform(-30, 30);
        for (std::size_t i = 0; i < x.size(); ++i) {
            x[i] = rng.uniform(-5, 5);
            shifted[i] = x[i] + c;
        }
        auto p = softmax(x), q = softmax(shifted);
        for (std::size_t i = 0; i < x.size(); ++i)
            CHECK_THAT(p[i], Catch::Matchers::WithinAbs(q[i], 1e-12));
    }
}

TEST_CASE("rope rotation") {
    RopeParams params{8, 10000.0};
    SplitMix64 rng(11);
    std::vector<double> x(8);
    for (auto& v : x) v = rng.uniform(-1, 1);

    auto id = rope_rotate(x, 0, params);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(id[i] == x[i]);

    auto r7 = rope_rotate(x, 7, params);
    CHECK_THAT(norm2(r7), Catch::Matchers::WithinAbs(norm2(x), 1e-12));

    std::vector<double> odd(7);
    CHECK_THROWS_AS(rope_rotate(odd, 1, params), std::invalid_argument);
}

TEST_CASE("rope relative property") {
    RopeParams params{8, 10000.0};
    SplitMix64 rng(123);
    // fixed offset pairs from the op example, then 100 random triples
    std::vector<double> q(8), k(8);
    for (auto& v : q) v = rng.uniform(-1, 1);
    for (auto& v : k) v = rng.uniform(-1, 1);
    const double d1 = dot(rope_rotate(q, 3, params), rope_rotate(k, 7, params));
    const double d2 = dot(rope_rotate(q, 10, params), rope_rotate(k, 14, params));
    CHECK_THAT(d1, Catch::Matchers::WithinAbs(d2, 1e-12));

    for (int it = 0; it < 100; ++it) {
        for (auto& v : q) v = rng.uniform(-1, 1);
        for (auto& v : k) v = rng.uniform(-1, 1);
        const auto p1 = static_cast<std::int64_t>(rng.below(50));
        const auto off = static_cast<std::int64_t>(rng.below(20));
        const auto shift = static_cast<std::int64_t>(rng.below(30));
        const double a = dot(rope_rotate(q, p1, params), rope_rotate(k, p1 + off, params));
        const double b =
            dot(rope_rotate(q, p1 + shift, params), rope_rotate(k, p1 + shift + off, params));
        CHECK_THAT(a, Catch::Matchers::WithinAbs(b, 1e-12));
    }
}

TEST_CASE("seeded_matrix determinism") {
    auto a = seeded_matrix(4, 5, 99, 1.0);
    auto b = seeded_matrix(4, 5, 99, 1.0);
    CHECK(a.data == b.data);

    auto c = seeded_matrix(4, 5, 100, 1.0);
    CHECK(a.data != c.data);

    auto big = seeded_matrix(100, 100, 1, 1.0);
    double mean = 0.0;
    for (double v : big.data) mean += v;
    mean /= static_cast<double>(big.data.size());
    CHECK(std::abs(mean) < 0.05);
    CHECK(big.all_finite());

    CHECK_THROWS_AS(seeded_matrix(2, 2, 0, 0.0), std::invalid_argument);
}
