#include <array>
#include <cmath>

#include "doctest.h"
#include "psvdd/sampling.hpp"

using namespace psvdd;
using namespace psvdd::sampling;

TEST_CASE("extract_grid counts") {
    CHECK(extract_grid(256, 256, 64, 16).coords.size() == 169);
    CHECK(extract_grid(256, 256, 32, 4).coords.size() == 3249);
    auto one = extract_grid(48, 48, 48, 5);
    REQUIRE(one.coords.size() == 1);
    CHECK(one.coords[0] == Coord{0, 0});
    CHECK_THROWS_AS(extract_grid(31, 64, 32, 4), ArgumentError);
    CHECK_THROWS_AS(extract_grid(64, 64, 32, 0), ArgumentError);

    Rng rng(3);
    for (int t = 0; t < 300; ++t) {
        const std::size_t h = 1 + rng() % 90, w = 1 + rng() % 90;
        const std::size_t k = 1 + rng() % std::min(h, w), s = 1 + rng() % 20;
        auto g = extract_grid(h, w, k, s);
        CHECK(g.coords.size() == ((h - k) / s + 1) * ((w - k) / s + 1));
        for (const auto& c : g.coords) {
            CHECK(c.row % s == 0);
            CHECK(c.col % s == 0);
            CHECK(c.row + k <= h);
            CHECK(c.col + k <= w);
        }
    }
}

TEST_CASE("covering_grid adds edge-flush patches only when needed") {
    CHECK(covering_grid(256, 256, 64, 16).coords.size() == 169);
    auto g = covering_grid(70, 50, 32, 16);
    // rows 0,16,32 + 38; cols 0,16 + 18
    CHECK(g.coords.size() == 4 * 3);
    std::vector<int> covered(70 * 50, 0);
    for (const auto& c : g.coords) {
        for (std::size_t r = c.row; r < c.row + 32; ++r) {
            for (std::size_t q = c.col; q < c.col + 32; ++q) covered[r * 50 + q] = 1;
        }
    }
    for (int v : covered) CHECK(v == 1);
}

TEST_CASE("jitter pairs") {
    Rng rng(1);
    for (int t = 0; t < 100; ++t) {
        auto p = sample_jitter_pair(256, 256, 64, 0, rng);
        CHECK(p.anchor == p.jittered);
    }
    const std::size_t k = 32, j = default_jitter(k);
    for (int t = 0; t < 10000; ++t) {
        auto p = sample_jitter_pair(100, 120, k, j, rng);
        const long dr = long(p.jittered.row) - long(p.anchor.row);
        const long dc = long(p.jittered.col) - long(p.anchor.col);
        CHECK(std::abs(dr) <= long(j));
        CHECK(std::abs(dc) <= long(j));
        CHECK(p.anchor.row + k <= 100);
        CHECK(p.jittered.row + k <= 100);
        CHECK(p.anchor.col + k <= 120);
        CHECK(p.jittered.col + k <= 120);
    }
    Rng a(42), b(42);
    for (int t = 0; t < 50; ++t) {
        auto x = sample_jitter_pair(256, 256, 64, 8, a);
        auto y = sample_jitter_pair(256, 256, 64, 8, b);
        CHECK(x.anchor == y.anchor);
        CHECK(x.jittered == y.jittered);
    }
    CHECK_THROWS_AS(sample_jitter_pair(20, 256, 32, 4, rng), ArgumentError);
}

TEST_CASE("position pairs: label geometry") {
    Rng rng(5);
    const std::size_t k = 32;
    for (int t = 0; t < 500; ++t) {
        auto p = sample_position_pair(200, 256, k, 0, rng);
        const long dr = long(p.second.row) - long(p.first.row);
        const long dc = long(p.second.col) - long(p.first.col);
        CHECK(dr == kNeighbourOffsets[p.label][0] * long(k));
        CHECK(dc == kNeighbourOffsets[p.label][1] * long(k));
        if (dr == -long(k) && dc == 0) CHECK(p.label == 1);
    }
    // Each label corresponds to a distinct non-centre cell.
    std::array<std::array<int, 3>, 3> seen{};
    for (const auto& off : kNeighbourOffsets) seen[off[0] + 1][off[1] + 1] += 1;
    for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c) CHECK(seen[r][c] == ((r == 1 && c == 1) ? 0 : 1));
    }
}

TEST_CASE("position pairs: uniform labels and in-bounds patches") {
    Rng rng(2024);
    std::array<int, 8> counts{};
    for (int t = 0; t < 80000; ++t) {
        auto p = sample_position_pair(256, 256, 64, 8, rng);
        REQUIRE(p.label >= 0);
        REQUIRE(p.label < 8);
        counts[p.label] += 1;
        if (t < 10000) {
            CHECK(p.first.row + 64 <= 256);
            CHECK(p.second.row + 64 <= 256);
            CHECK(p.first.col + 64 <= 256);
            CHECK(p.second.col + 64 <= 256);
        }
    }
    const double expected = 80000.0 / 8;
    const double sigma = std::sqrt(80000.0 * (1.0 / 8) * (7.0 / 8));
    double chi2 = 0;
    for (int c : counts) {
        CHECK(std::abs(c - expected) <= 3 * sigma);
        chi2 += (c - expected) * (c - expected) / expected;
    }
    CHECK(chi2 < 24.32);  // df = 7, p = 0.001
    CHECK_THROWS_AS(sample_position_pair(200, 256, 64, 8, rng), ArgumentError);
}

TEST_CASE("perturb_rgb") {
    Rng rng(9);
    Tensor<float> patch({8, 8, 3});
    std::uniform_real_distribution<float> u(0, 1);
    for (auto& v : patch.values()) v = u(rng);
    const auto original = patch;

    CHECK(perturb_rgb(patch, rng, 0.0f) == patch);

    Tensor<float> ones({4, 4, 3}, 1.0f);
    int saturated = 0;
    for (int t = 0; t < 100; ++t) {
        auto out = perturb_rgb(ones, rng);
        for (std::size_t ch = 0; ch < 3; ++ch) {
            const float v = out[ch];
            CHECK(v >= 0.9f - 1e-6f);
            CHECK(v <= 1.0f);
            if (v == 1.0f) ++saturated;
            for (std::size_t i = ch; i < out.size(); i += 3) CHECK(out[i] == v);
        }
    }
    CHECK(saturated > 0);

    for (int t = 0; t < 10000; ++t) {
        auto out = perturb_rgb(patch, rng);
        for (float v : out.values()) {
            REQUIRE(v >= 0.0f);
            REQUIRE(v <= 1.0f);
        }
    }
    CHECK(patch == original);
}

TEST_CASE("patch-carrying samplers crop the sampled windows") {
    Rng rng(77);
    Tensor<float> image({128, 128, 3});
    for (std::size_t i = 0; i < image.size(); ++i) image[i] = float(i % 251) / 251.0f;
    auto jp = sample_jitter_patches(image, 32, 4, rng);
    CHECK(jp.anchor.shape() == numerics::Shape{32, 32, 3});
    CHECK(jp.anchor.at(0, 0, 0) == image.at(jp.coords.anchor.row, jp.coords.anchor.col, 0));
    auto pp = sample_position_patches(image, 32, 4, rng);
    CHECK(pp.second.at(31, 31, 2) == image.at(pp.coords.second.row + 31, pp.coords.second.col + 31, 2));
}
