#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>

#include "doctest.h"
#include "psvdd/training.hpp"
#include "support/gradcheck.hpp"

using namespace psvdd;
using namespace psvdd::training;
using numerics::Shape;

namespace {

Tensor<float> vec(std::initializer_list<float> v) { return Tensor<float>(Shape{v.size()}, std::vector<float>(v)); }

Var<double> cvar(Tensor<double> t) { return Var<double>::constant(std::move(t)); }

// Smooth structured images: ramps plus stripes with per-image phase.
std::vector<Tensor<float>> toy_images(std::size_t n, std::size_t size, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    std::vector<Tensor<float>> out;
    for (std::size_t k = 0; k < n; ++k) {
        Tensor<float> img({size, size, 3});
        const float phase = u(rng) * 6.28f;
        for (std::size_t r = 0; r < size; ++r) {
            for (std::size_t c = 0; c < size; ++c) {
                const float stripe = 0.5f + 0.4f * std::sin(0.35f * float(c) + phase);
                img.at(r, c, 0) = stripe;
                img.at(r, c, 1) = float(r) / float(size);
                img.at(r, c, 2) = 0.5f * stripe + 0.5f * float(c) / float(size);
            }
        }
        out.push_back(std::move(img));
    }
    return out;
}

model::EncoderConfig tiny_encoder(std::size_t d = 8) {
    model::EncoderConfig cfg;
    cfg.embed_dim = d;
    cfg.channels = {4, 6, 8};
    return cfg;
}

bool same_bytes(const std::vector<numerics::NamedTensor>& a, const std::vector<numerics::NamedTensor>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].name != b[i].name || a[i].tensor.shape() != b[i].tensor.shape()) return false;
        if (std::memcmp(a[i].tensor.data(), b[i].tensor.data(), a[i].tensor.size() * sizeof(float)) != 0) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("compute_center") {
    auto v = vec({1.5f, -2.0f, 0.25f});
    std::vector<Tensor<float>> one{v};
    CHECK(compute_center(one).c == v);

    std::vector<Tensor<float>> sym{vec({1, 0, 0}), vec({-1, 0, 0})};
    const auto zero = compute_center(sym).c;
    for (float x : zero.values()) CHECK(x == 0.0f);

    std::mt19937_64 rng(11);
    std::normal_distribution<float> n(0.0f, 3.0f);
    std::vector<Tensor<float>> many;
    std::vector<double> oracle(64, 0.0);
    for (int i = 0; i < 100; ++i) {
        Tensor<float> t(Shape{64});
        for (std::size_t j = 0; j < 64; ++j) {
            t[j] = n(rng);
            oracle[j] += double(t[j]);
        }
        many.push_back(std::move(t));
    }
    auto c = compute_center(many).c;
    for (std::size_t j = 0; j < 64; ++j) CHECK(std::abs(double(c[j]) - oracle[j] / 100.0) < 1e-6);

    CHECK_THROWS_AS(compute_center({}), ArgumentError);
    std::vector<Tensor<float>> ragged{vec({1, 2}), vec({1, 2, 3})};
    CHECK_THROWS_AS(compute_center(ragged), DimensionError);
}

TEST_CASE("loss_svdd_classic") {
    Tensor<double> c(Shape{4}, std::vector<double>{0.5, -1, 2, 0});
    Tensor<double> same(Shape{3, 4});
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t j = 0; j < 4; ++j) same.at(i, j) = c[j];
    }
    CHECK(loss_svdd_classic(cvar(same), cvar(c), 0.0).value()[0] == 0.0);

    Tensor<double> far(Shape{1, 4}, std::vector<double>{0.5, 2, 2, 0});
    CHECK(loss_svdd_classic(cvar(far), cvar(c), 0.0).value()[0] == doctest::Approx(3.0));

    std::mt19937_64 rng(4);
    auto f = testing::random_tensor({10, 16}, rng);
    auto cc = testing::random_tensor({16}, rng);
    double oracle = 0;
    for (std::size_t i = 0; i < 10; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < 16; ++j) s += (f.at(i, j) - cc[j]) * (f.at(i, j) - cc[j]);
        oracle += std::sqrt(s);
    }
    CHECK(std::abs(loss_svdd_classic(cvar(f), cvar(cc), 0.0).value()[0] - oracle) < 1e-6);

    CHECK_THROWS_AS(loss_svdd_classic(cvar(f), cvar(testing::random_tensor({15}, rng))), DimensionError);
}

TEST_CASE("loss_svdd_prime") {
    std::mt19937_64 rng(6);
    auto a = testing::random_tensor({5, 8}, rng);
    CHECK(loss_svdd_prime(cvar(a), cvar(a), 0.0).value()[0] == 0.0);

    Tensor<double> e1(Shape{1, 3}, std::vector<double>{1, 0, 0});
    Tensor<double> e2(Shape{1, 3}, std::vector<double>{0, 1, 0});
    CHECK(loss_svdd_prime(cvar(e1), cvar(e2), 0.0).value()[0] == doctest::Approx(std::sqrt(2.0)));

    auto p = testing::random_tensor({10, 32}, rng);
    auto q = testing::random_tensor({10, 32}, rng);
    double oracle = 0;
    for (std::size_t i = 0; i < 10; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < 32; ++j) s += (p.at(i, j) - q.at(i, j)) * (p.at(i, j) - q.at(i, j));
        oracle += std::sqrt(s);
    }
    CHECK(std::abs(loss_svdd_prime(cvar(p), cvar(q), 0.0).value()[0] - oracle) < 1e-6);
    CHECK_THROWS_AS(loss_svdd_prime(cvar(p), cvar(testing::random_tensor({10, 31}, rng))), DimensionError);
}

TEST_CASE("loss_ssl and total_loss") {
    auto zeros = cvar(Tensor<double>(Shape{8}));
    CHECK(loss_ssl(zeros, 3).value()[0] == doctest::Approx(std::log(8.0)));
    CHECK_THROWS_AS(loss_ssl(zeros, 8), ArgumentError);
    CHECK_THROWS_AS(loss_ssl(zeros, -1), ArgumentError);
    CHECK_THROWS_AS(loss_ssl(cvar(Tensor<double>(Shape{7})), 0), DimensionError);

    auto s = cvar(Tensor<double>(Shape{}, std::vector<double>{0.5}));
    auto l = cvar(Tensor<double>(Shape{}, std::vector<double>{1.0}));
    CHECK(total_loss(s, l, LossWeights{0.0}).value()[0] == 1.0);
    CHECK(total_loss(s, l, LossWeights{1.0}).value()[0] == 1.5);
    CHECK(total_loss(s, l, LossWeights{2.0}).value()[0] == 2.0);
    // Linear in lambda with the terms held fixed.
    const double t0 = total_loss(s, l, LossWeights{0.3}).value()[0];
    const double t1 = total_loss(s, l, LossWeights{0.7}).value()[0];
    CHECK(t1 - t0 == doctest::Approx(0.4 * 0.5));
    CHECK_THROWS_AS(LossWeights{-1.0}.validate(), ArgumentError);
    CHECK_THROWS_AS(LossWeights{std::numeric_limits<double>::infinity()}.validate(), ArgumentError);
}

TEST_CASE("losses are non-negative") {
    std::mt19937_64 rng(8);
    for (int t = 0; t < 50; ++t) {
        auto a = testing::random_tensor({4, 6}, rng, -5, 5);
        auto b = testing::random_tensor({4, 6}, rng, -5, 5);
        auto c = testing::random_tensor({6}, rng, -5, 5);
        CHECK(loss_svdd_prime(cvar(a), cvar(b)).value()[0] >= 0);
        CHECK(loss_svdd_classic(cvar(a), cvar(c)).value()[0] >= 0);
        CHECK(loss_ssl(cvar(testing::random_tensor({8}, rng, -9, 9)), int(rng() % 8)).value()[0] >= 0);
    }
}

TEST_CASE("centre of a symmetric feature set is stationary for the classic loss") {
    // The mean coincides with the minimiser of summed distances when the set is
    // centrally symmetric, so translating every feature has zero first-order effect.
    std::mt19937_64 rng(21);
    auto half = testing::random_tensor({6, 5}, rng, -2, 2);
    Tensor<double> feats(Shape{12, 5});
    for (std::size_t i = 0; i < 6; ++i) {
        for (std::size_t j = 0; j < 5; ++j) {
            feats.at(i, j) = 1.0 + half.at(i, j);
            feats.at(i + 6, j) = 1.0 - half.at(i, j);
        }
    }
    std::vector<Tensor<float>> list;
    for (std::size_t i = 0; i < 12; ++i) {
        Tensor<float> row(Shape{5});
        for (std::size_t j = 0; j < 5; ++j) row[j] = float(feats.at(i, j));
        list.push_back(row);
    }
    auto center = compute_center(list).c.cast<double>();
    auto fv = Var<double>::parameter(feats);
    numerics::backward(loss_svdd_classic(fv, cvar(center)));
    for (std::size_t j = 0; j < 5; ++j) {
        double translation = 0;
        for (std::size_t i = 0; i < 12; ++i) translation += fv.grad().at(i, j);
        CHECK(std::abs(translation) < 1e-6);
    }
}

TEST_CASE("loss gradients w.r.t. encoder inputs match finite differences") {
    auto m = model::init_random<double>(tiny_encoder(4), 3);
    std::mt19937_64 rng(12);
    const std::vector<Tensor<double>> pair{testing::random_tensor({1, 32, 32, 3}, rng, 0, 1),
                                           testing::random_tensor({1, 32, 32, 3}, rng, 0, 1)};
    auto svdd = [&](const std::vector<Var<double>>& x) {
        return loss_svdd_prime(m.encoder.encode_small_batch(x[0]), m.encoder.encode_small_batch(x[1]));
    };
    CHECK(testing::gradient_relative_error(svdd, pair) < 1e-5);

    const auto center = testing::random_tensor({4}, rng);
    auto classic = [&](const std::vector<Var<double>>& x) {
        return loss_svdd_classic(m.encoder.encode_small_batch(x[0]), cvar(center));
    };
    CHECK(testing::gradient_relative_error(classic, {pair[0]}) < 1e-5);

    const int labels[] = {5};
    auto ssl = [&](const std::vector<Var<double>>& x) {
        auto logits = m.classifier.forward(m.encoder.encode_small_batch(x[0]), m.encoder.encode_small_batch(x[1]));
        return loss_ssl_batch(logits, labels);
    };
    CHECK(testing::gradient_relative_error(ssl, pair) < 1e-5);
}

TEST_CASE("sample_step_batch") {
    auto images = toy_images(3, 128, 1);
    TrainConfig cfg;
    cfg.batch_size = 16;
    sampling::Rng rng(5);
    auto b = sample_step_batch(images, 32, cfg, rng);
    CHECK(b.jitter_anchor.shape() == Shape{16, 32, 32, 3});
    CHECK(b.position_second.shape() == Shape{16, 32, 32, 3});
    REQUIRE(b.labels.size() == 16);
    for (int y : b.labels) CHECK((y >= 0 && y < 8));
    for (float v : b.position_first.values()) CHECK((v >= 0.0f && v <= 1.0f));

    sampling::Rng again(5);
    auto c = sample_step_batch(images, 32, cfg, again);
    CHECK(c.jitter_partner == b.jitter_partner);
    CHECK(c.labels == b.labels);
    CHECK_THROWS_AS(sample_step_batch({}, 32, cfg, rng), ArgumentError);
}

TEST_CASE("lambda = 0 leaves only the self-supervised gradient") {
    auto images = toy_images(4, 128, 2);
    TrainConfig cfg;
    cfg.batch_size = 8;
    cfg.weights.lambda = 0.0;
    sampling::Rng rng(3);
    const auto batch = sample_step_batch(images, 32, cfg, rng);

    auto a = model::init_random<float>(tiny_encoder(), 9);
    auto la = step_losses(a.encoder, a.classifier, batch, cfg);
    numerics::backward(la.total);

    auto b = model::init_random<float>(tiny_encoder(), 9);
    auto lb = step_losses(b.encoder, b.classifier, batch, cfg);
    numerics::backward(lb.ssl);

    CHECK(la.svdd.value()[0] > 0);
    auto pa = a.encoder.small_parameters();
    auto pb = b.encoder.small_parameters();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        CHECK(std::memcmp(pa[i].grad().data(), pb[i].grad().data(), pa[i].grad().size() * sizeof(float)) == 0);
    }
}

TEST_CASE("one small Adam step lowers a frozen batch's loss") {
    auto images = toy_images(4, 128, 3);
    TrainConfig cfg;
    cfg.batch_size = 16;
    sampling::Rng rng(8);
    const auto batch = sample_step_batch(images, 32, cfg, rng);
    auto m = model::init_random<float>(model::EncoderConfig{}, 4);
    auto params = m.encoder.small_parameters();
    for (auto& p : m.classifier.parameters()) params.push_back(p);
    numerics::AdamConfig adam;
    adam.learning_rate = 1e-5;
    auto state = numerics::make_adam_state<float>(params, adam);

    auto before = step_losses(m.encoder, m.classifier, batch, cfg);
    numerics::backward(before.total);
    numerics::adam_step<float>(params, state);
    auto after = step_losses(m.encoder, m.classifier, batch, cfg);
    CHECK(after.total.value()[0] < before.total.value()[0]);
}

TEST_CASE("training makes progress on a toy dataset") {
    auto images = toy_images(8, 128, 4);
    TrainConfig cfg;
    cfg.train_big = false;
    cfg.steps_small = 200;
    cfg.batch_size = 16;
    cfg.adam.learning_rate = 1e-3;
    cfg.seed = 17;
    auto result = train(images, cfg, tiny_encoder());
    REQUIRE(result.history.size() == 200);
    double first = 0, last = 0;
    for (std::size_t i = 0; i < 20; ++i) {
        first += result.history[i].total;
        last += result.history[180 + i].total;
    }
    CHECK(last < first);
}

TEST_CASE("training is deterministic and covers both scales") {
    auto images = toy_images(3, 224, 5);
    TrainConfig cfg;
    cfg.steps_small = 3;
    cfg.steps_big = 2;
    cfg.batch_size = 4;
    cfg.seed = 99;
    auto a = train(images, cfg, tiny_encoder());
    auto b = train(images, cfg, tiny_encoder());
    CHECK(same_bytes(a.model.encoder.export_tensors(), b.model.encoder.export_tensors()));
    CHECK(same_bytes(a.model.classifier_big.export_tensors("c"), b.model.classifier_big.export_tensors("c")));
    REQUIRE(a.history.size() == 5);
    CHECK(a.history[0].scale == 32);
    CHECK(a.history[4].scale == 64);

    // Without joint training the small encoder is frozen at K = 64.
    TrainConfig small_only = cfg;
    small_only.train_big = false;
    auto s = train(images, small_only, tiny_encoder());
    auto small_a = a.model.encoder.small_parameters();
    auto small_s = s.model.encoder.small_parameters();
    for (std::size_t i = 0; i < small_a.size(); ++i) CHECK(small_a[i].value() == small_s[i].value());
    for (const auto& p : small_a) CHECK(p.requires_grad());

    TrainConfig joint = cfg;
    joint.joint = true;
    auto j = train(images, joint, tiny_encoder());
    CHECK_FALSE(j.model.encoder.small_parameters()[0].value() == small_s[0].value());
}

TEST_CASE("classic objective trains against a fixed centre") {
    auto images = toy_images(3, 128, 6);
    TrainConfig cfg;
    cfg.objective = Objective::SvddClassic;
    cfg.train_big = false;
    cfg.steps_small = 5;
    cfg.batch_size = 8;
    cfg.center_samples = 64;
    auto r = train(images, cfg, tiny_encoder());
    REQUIRE(r.history.size() == 5);
    for (const auto& rec : r.history) {
        CHECK(rec.ssl == 0.0);
        CHECK(rec.total == rec.svdd);
        CHECK(rec.svdd > 0);
    }
}

TEST_CASE("train errors") {
    TrainConfig cfg;
    CHECK_THROWS_AS(train({}, cfg, tiny_encoder()), ArgumentError);
    auto images = toy_images(2, 128, 7);
    images[1][0] = std::numeric_limits<float>::quiet_NaN();
    for (auto& v : images[0].values()) v = std::numeric_limits<float>::quiet_NaN();
    cfg.train_big = false;
    cfg.steps_small = 3;
    cfg.batch_size = 4;
    CHECK_THROWS_AS(train(images, cfg, tiny_encoder()), NumericalError);
    TrainConfig bad;
    bad.batch_size = 0;
    CHECK_THROWS_AS(train(toy_images(1, 128, 1), bad, tiny_encoder()), ArgumentError);
}

TEST_CASE("loss history CSV") {
    std::vector<LossRecord> h{{32, 0, 1.0, 2.0, 3.0}, {64, 0, 0.5, 0.25, 0.75}, {32, 1, 0.5, 1.5, 2.0}};
    const auto path = std::filesystem::temp_directory_path() / "psvdd_loss_test.csv";
    write_loss_csv(path, h, 32);
    std::ifstream in(path);
    std::string line;
    std::vector<std::string> lines;
    while (std::getline(in, line)) lines.push_back(line);
    REQUIRE(lines.size() == 3);
    CHECK(lines[0] == "step,l_svdd_prime,l_ssl,total");
    CHECK(lines[1] == "0,1,2,3");
    CHECK(lines[2] == "1,0.5,1.5,2");
    std::filesystem::remove(path);
}
