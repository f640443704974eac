#include <cmath>
#include <filesystem>
#include <random>
#include <sstream>
#include <thread>

#include "doctest.h"
#include "psvdd/feature_index.hpp"

using namespace psvdd;
using namespace psvdd::index;

namespace {

Tensor<float> uniform(std::size_t n, std::size_t d, std::mt19937_64& rng) {
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    Tensor<float> t({n, d});
    for (auto& v : t.values()) v = u(rng);
    return t;
}

std::vector<Provenance> numbered(std::size_t n) {
    std::vector<Provenance> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = {std::uint32_t(i / 100), std::uint32_t(i % 100), std::uint32_t(i * 7)};
    return p;
}

std::vector<float> row(const Tensor<float>& t, std::size_t i) {
    const std::size_t d = t.dim(1);
    return {t.data() + i * d, t.data() + (i + 1) * d};
}

double naive_min(const Tensor<float>& feats, const std::vector<float>& q) {
    double best = 1e300;
    for (std::size_t i = 0; i < feats.dim(0); ++i) {
        double s = 0;
        for (std::size_t j = 0; j < q.size(); ++j) {
            const double d = double(q[j]) - double(feats.at(i, j));
            s += d * d;
        }
        best = std::min(best, std::sqrt(s));
    }
    return best;
}

IndexBuildConfig exact_cfg() {
    IndexBuildConfig c;
    c.mode = IndexMode::Exact;
    return c;
}

}  // namespace

TEST_CASE("single stored feature") {
    Tensor<float> one({1, 4}, std::vector<float>{0.1f, 0.2f, 0.3f, 0.4f});
    auto idx = build_index(one, {{3, 4, 5}}, IndexBuildConfig{});
    std::mt19937_64 rng(1);
    for (int t = 0; t < 20; ++t) {
        auto q = row(uniform(1, 4, rng), 0);
        auto e = idx.nn_exact(q);
        auto a = idx.nn_approx(q);
        CHECK(e.id == 0);
        CHECK(a.id == 0);
        CHECK(a.distance == e.distance);
        CHECK(e.provenance == Provenance{3, 4, 5});
    }
}

TEST_CASE("nn_exact examples") {
    Tensor<float> zero({1, 3});
    auto idx = build_index(zero, numbered(1), exact_cfg());
    CHECK(idx.nn_exact(std::vector<float>{1, 0, 0}).distance == 1.0f);

    std::mt19937_64 rng(2);
    auto feats = uniform(1000, 64, rng);
    auto big = build_index(feats, numbered(1000), exact_cfg());
    auto hit = big.nn_exact(row(feats, 417));
    CHECK(hit.distance == 0.0f);
    CHECK(hit.id == 417);
    CHECK(hit.provenance == numbered(1000)[417]);

    for (int t = 0; t < 100; ++t) {
        auto q = row(uniform(1, 64, rng), 0);
        CHECK(std::abs(double(big.nn_exact(q).distance) - naive_min(feats, q)) < 1e-6);
    }
    CHECK_THROWS_AS(big.nn_exact(std::vector<float>(63)), DimensionError);
    CHECK_THROWS_AS(big.nn_approx(row(feats, 0)), ArgumentError);
}

TEST_CASE("nn_exact minimality and tie-breaking") {
    std::mt19937_64 rng(3);
    for (int t = 0; t < 20; ++t) {
        auto feats = uniform(30, 5, rng);
        auto idx = build_index(feats, numbered(30), exact_cfg());
        auto q = row(uniform(1, 5, rng), 0);
        auto r = idx.nn_exact(q);
        for (std::size_t i = 0; i < 30; ++i) {
            double s = 0;
            for (std::size_t j = 0; j < 5; ++j) s += std::pow(double(q[j]) - feats.at(i, j), 2);
            CHECK(double(r.distance) <= std::sqrt(s) + 1e-7);
        }
    }
    // Duplicates are kept; the earliest insertion wins.
    Tensor<float> dup({4, 2}, std::vector<float>{5, 5, 1, 1, 1, 1, 1, 1});
    auto idx = build_index(dup, numbered(4), exact_cfg());
    CHECK(idx.size() == 4);
    CHECK(idx.nn_exact(std::vector<float>{1, 1}).id == 1);
    CHECK(idx.nn_exact(std::vector<float>{1, 1.5f}).id == 1);
}

TEST_CASE("approx search against the exact oracle") {
    std::mt19937_64 rng(4);
    auto feats = uniform(10000, 64, rng);
    auto idx = build_index(feats, numbered(10000), IndexBuildConfig{});
    int hits = 0;
    double ratio = 0;
    for (int t = 0; t < 1000; ++t) {
        auto q = row(uniform(1, 64, rng), 0);
        auto e = idx.nn_exact(q);
        auto a = idx.nn_approx(q);
        REQUIRE(a.distance >= e.distance);
        // Self-consistency: the reported distance belongs to the reported id.
        double s = 0;
        auto f = idx.feature(a.id);
        for (std::size_t j = 0; j < 64; ++j) s += std::pow(double(q[j]) - double(f[j]), 2);
        CHECK(std::abs(std::sqrt(s) - double(a.distance)) < 1e-5);
        CHECK(a.provenance == idx.provenance(a.id));
        hits += a.id == e.id;
        ratio += double(a.distance) / double(e.distance);
    }
    MESSAGE("recall@1 = " << hits / 1000.0 << ", mean distance ratio = " << ratio / 1000.0);
    CHECK(hits / 1000.0 >= 0.95);
    CHECK(ratio / 1000.0 <= 1.02);
}

TEST_CASE("build is deterministic for a fixed seed") {
    std::mt19937_64 rng(5);
    auto feats = uniform(3000, 16, rng);
    IndexBuildConfig cfg;
    cfg.seed = 77;
    cfg.search_budget = 8;
    auto a = build_index(feats, numbered(3000), cfg);
    auto b = build_index(feats, numbered(3000), cfg);
    for (int t = 0; t < 100; ++t) {
        auto q = row(uniform(1, 16, rng), 0);
        auto x = a.nn_approx(q);
        auto y = b.nn_approx(q);
        CHECK(x.id == y.id);
        CHECK(x.distance == y.distance);
    }
}

TEST_CASE("concurrent queries match serial execution") {
    std::mt19937_64 rng(6);
    auto feats = uniform(5000, 32, rng);
    IndexBuildConfig cfg;
    cfg.search_budget = 16;
    auto idx = build_index(feats, numbered(5000), cfg);
    auto queries = uniform(400, 32, rng);
    auto serial = idx.nearest_batch(queries, 1);
    auto parallel = idx.nearest_batch(queries, 4);
    REQUIRE(serial.size() == parallel.size());
    for (std::size_t i = 0; i < serial.size(); ++i) {
        CHECK(serial[i].id == parallel[i].id);
        CHECK(serial[i].distance == parallel[i].distance);
    }
    // Independent readers hammering the same index.
    std::vector<std::vector<std::size_t>> seen(4);
    {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < 4; ++t) {
            pool.emplace_back([&, t] {
                for (std::size_t i = 0; i < queries.dim(0); ++i) seen[t].push_back(idx.nn_approx(row(queries, i)).id);
            });
        }
    }
    for (const auto& s : seen) {
        REQUIRE(s.size() == serial.size());
        for (std::size_t i = 0; i < s.size(); ++i) CHECK(s[i] == serial[i].id);
    }
}

TEST_CASE("index persistence") {
    std::mt19937_64 rng(7);
    auto feats = uniform(500, 8, rng);
    IndexBuildConfig cfg;
    cfg.seed = 1234567890123ull;
    cfg.search_budget = 4;
    auto idx = build_index(feats, numbered(500), cfg);
    const auto path = std::filesystem::temp_directory_path() / "psvdd_index_test.psix";
    idx.save(path);
    auto back = FeatureIndex::load(path);
    std::filesystem::remove(path);
    CHECK(back.size() == 500);
    CHECK(back.dim() == 8);
    CHECK(back.mode() == IndexMode::Approx);
    CHECK(back.config().seed == cfg.seed);
    CHECK(back.provenance(123) == idx.provenance(123));
    for (int t = 0; t < 50; ++t) {
        auto q = row(uniform(1, 8, rng), 0);
        CHECK(back.nn_approx(q).id == idx.nn_approx(q).id);
        CHECK(back.nn_exact(q).distance == idx.nn_exact(q).distance);
    }

    std::stringstream buf;
    idx.write(buf);
    std::string bytes = buf.str();
    std::string bad_magic = bytes;
    bad_magic[0] = 'X';
    std::istringstream in1(bad_magic);
    CHECK_THROWS_AS(FeatureIndex::read(in1), IoError);
    std::istringstream in2(bytes.substr(0, bytes.size() / 2));
    CHECK_THROWS_AS(FeatureIndex::read(in2), IoError);
    std::string bad_version = bytes;
    bad_version[4] = 9;
    std::istringstream in3(bad_version);
    CHECK_THROWS_AS(FeatureIndex::read(in3), IoError);
    CHECK_THROWS_AS(FeatureIndex::load("/nonexistent/dir/x.psix"), IoError);
}

TEST_CASE("build errors") {
    CHECK_THROWS_AS(build_index(Tensor<float>({0, 4}), {}, IndexBuildConfig{}), ArgumentError);
    CHECK_THROWS_AS(build_index(Tensor<float>({3, 4}), numbered(2), IndexBuildConfig{}), DimensionError);
    CHECK_THROWS_AS(build_index(Tensor<float>({3}), numbered(3), IndexBuildConfig{}), DimensionError);
    IndexBuildConfig bad;
    bad.trees = 0;
    CHECK_THROWS_AS(build_index(Tensor<float>({3, 4}), numbered(3), bad), ArgumentError);
    Tensor<float> nan({2, 2});
    nan[1] = std::nanf("");
    CHECK_THROWS_AS(build_index(nan, numbered(2), IndexBuildConfig{}), NumericalError);
}
