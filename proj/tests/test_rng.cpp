#include "transdiff/rng.hpp"

#include <doctest.h>

using namespace transdiff;

TEST_CASE("same (seed, stream) reproduces bitwise-identical tensors") {
    SeededRng a(42, 7), b(42, 7);
    auto ta = rng_normal<double>(a, {8, 8});
    auto tb = rng_normal<double>(b, {8, 8});
    CHECK(bitwise_equal(ta, tb));
}

TEST_CASE("different seeds give different draws") {
    SeededRng a(1, 0), b(2, 0);
    auto ta = rng_normal<double>(a, {16});
    auto tb = rng_normal<double>(b, {16});
    CHECK(max_abs_diff(ta, tb) > 0.0);

    SeededRng c(1, 0), d(1, 1);
    auto tc = rng_normal<double>(c, {16});
    auto td = rng_normal<double>(d, {16});
    CHECK(max_abs_diff(tc, td) > 0.0);
}

TEST_CASE("draws are a pure function of the counter") {
    SeededRng rng(9, 3);
    std::vector<double> seq;
    for (int i = 0; i < 10; ++i) seq.push_back(rng.normal());
    for (int i = 0; i < 10; ++i) CHECK(rng.normal_at(static_cast<std::uint64_t>(i)) == seq[i]);
    CHECK(rng.counter() == 10);
}

TEST_CASE("sample moments of 1e5 normal draws") {
    SeededRng rng(123, 0);
    const int n = 100000;
    double s = 0, s2 = 0;
    for (int i = 0; i < n; ++i) {
        const double x = rng.normal();
        s += x;
        s2 += x * x;
    }
    const double mean = s / n;
    const double stddev = std::sqrt(s2 / n - mean * mean);
    CHECK(std::abs(mean) <= 0.02);
    CHECK(std::abs(stddev - 1.0) <= 0.02);
}

TEST_CASE("uniform draws stay in (0, 1] and cover the range") {
    SeededRng rng(5, 5);
    double lo = 1.0, hi = 0.0;
    for (int i = 0; i < 10000; ++i) {
        const double u = rng.uniform();
        CHECK(u > 0.0);
        CHECK(u <= 1.0);
        lo = std::min(lo, u);
        hi = std::max(hi, u);
    }
    CHECK(lo < 0.01);
    CHECK(hi > 0.99);
}

TEST_CASE("index_below respects the bound") {
    SeededRng rng(11, 0);
    std::vector<int> hits(7, 0);
    for (int i = 0; i < 7000; ++i) ++hits[static_cast<std::size_t>(rng.index_below(7))];
    for (int h : hits) CHECK(h > 700);  // roughly uniform
}
