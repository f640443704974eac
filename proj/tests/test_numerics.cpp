#include <cmath>
#include <random>
#include <sstream>

#include "doctest.h"
#include "psvdd/numerics/autograd.hpp"
#include "psvdd/numerics/optim.hpp"
#include "psvdd/numerics/serialize.hpp"
#include "support/gradcheck.hpp"

using namespace psvdd;
using namespace psvdd::numerics;
using psvdd::testing::gradient_relative_error;
using psvdd::testing::random_tensor;

namespace {
Var<double> cst(Shape s, std::vector<double> v) { return Var<double>::constant(Tensor<double>(std::move(s), std::move(v))); }
}  // namespace

TEST_CASE("conv2d identity and sum cases") {
    auto y = conv2d(cst({1, 1, 1}, {5}), cst({1, 1, 1, 1}, {1}), cst({1}, {0}), 1);
    CHECK(y.shape() == Shape{1, 1, 1});
    CHECK(y.value()[0] == 5.0);

    auto z = conv2d(cst({2, 2, 1}, {1, 2, 3, 4}), cst({2, 2, 1, 1}, {1, 1, 1, 1}), cst({1}, {0}), 1);
    CHECK(z.shape() == Shape{1, 1, 1});
    CHECK(z.value()[0] == 10.0);
}

TEST_CASE("conv2d output extents follow the floor formula") {
    std::mt19937_64 rng(7);
    std::uniform_int_distribution<std::size_t> ext(1, 12), st(1, 4);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t h = ext(rng), w = ext(rng);
        const std::size_t kh = std::uniform_int_distribution<std::size_t>(1, h)(rng);
        const std::size_t kw = std::uniform_int_distribution<std::size_t>(1, w)(rng);
        const std::size_t s = st(rng);
        auto y = conv2d(Var<double>::constant(Tensor<double>({h, w, 2})),
                        Var<double>::constant(Tensor<double>({kh, kw, 2, 3})),
                        Var<double>::constant(Tensor<double>({3})), s);
        CHECK(y.shape() == Shape{(h - kh) / s + 1, (w - kw) / s + 1, 3});
    }
}

TEST_CASE("conv2d rejects mismatched shapes") {
    CHECK_THROWS_AS(conv2d(cst({2, 2, 1}, {1, 2, 3, 4}), Var<double>::constant(Tensor<double>({3, 3, 1, 1})),
                           cst({1}, {0}), 1),
                    DimensionError);
    CHECK_THROWS_AS(conv2d(cst({2, 2, 1}, {1, 2, 3, 4}), Var<double>::constant(Tensor<double>({1, 1, 2, 1})),
                           cst({1}, {0}), 1),
                    DimensionError);
    CHECK_THROWS_AS(conv2d(cst({2, 2, 1}, {1, 2, 3, 4}), Var<double>::constant(Tensor<double>({1, 1, 1, 2})),
                           cst({1}, {0}), 1),
                    DimensionError);
}

TEST_CASE("conv2d gradient matches finite differences") {
    std::mt19937_64 rng(11);
    auto x = random_tensor({8, 8, 3}, rng, 0.0, 1.0);
    auto k = random_tensor({3, 3, 3, 4}, rng);
    auto b = random_tensor({4}, rng);
    auto fn = [](const std::vector<Var<double>>& v) {
        return sum(leaky_relu(conv2d(v[0], v[1], v[2], 2), 0.1));
    };
    CHECK(gradient_relative_error(fn, {x, k, b}) < 1e-4);

    // Batched input shares the kernel across images.
    auto xb = random_tensor({2, 7, 9, 3}, rng, 0.0, 1.0);
    CHECK(gradient_relative_error(fn, {xb, k, b}) < 1e-4);
}

TEST_CASE("leaky_relu values") {
    auto y = leaky_relu(cst({3}, {1.0, -1.0, 0.0}), 0.1);
    CHECK(y.value()[0] == 1.0);
    CHECK(y.value()[1] == doctest::Approx(-0.1));
    CHECK(y.value()[2] == 0.0);
    CHECK_THROWS_AS(leaky_relu(cst({1}, {1.0}), 1.0), ArgumentError);

    // Subgradient at exactly zero is alpha.
    auto p = Var<double>::parameter(Tensor<double>({1}, {0.0}));
    backward(sum(leaky_relu(p, 0.1)));
    CHECK(p.grad()[0] == doctest::Approx(0.1));
}

TEST_CASE("linear identity, bias-only and gradient") {
    auto x = cst({3}, {1, 2, 3});
    auto eye = cst({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    auto y = linear(x, eye, cst({3}, {0, 0, 0}));
    CHECK(y.value() == x.value());

    auto z = linear(x, Var<double>::constant(Tensor<double>({3, 2})), cst({2}, {4, -5}));
    CHECK(z.value()[0] == 4.0);
    CHECK(z.value()[1] == -5.0);

    CHECK_THROWS_AS(linear(x, Var<double>::constant(Tensor<double>({2, 2})), cst({2}, {0, 0})), DimensionError);

    std::mt19937_64 rng(3);
    auto fn = [](const std::vector<Var<double>>& v) { return sum(leaky_relu(linear(v[0], v[1], v[2]), 0.1)); };
    CHECK(gradient_relative_error(fn, {random_tensor({16}, rng), random_tensor({16, 8}, rng), random_tensor({8}, rng)}) <
          1e-4);
    CHECK(gradient_relative_error(fn, {random_tensor({5, 16}, rng), random_tensor({16, 8}, rng),
                                       random_tensor({8}, rng)}) < 1e-4);
}

TEST_CASE("softmax_cross_entropy examples") {
    for (int label = 0; label < 8; ++label) {
        auto l = softmax_cross_entropy(Var<double>::constant(Tensor<double>({8}, 0.3)), label);
        CHECK(l.value()[0] == doctest::Approx(std::log(8.0)).epsilon(1e-12));
    }
    std::vector<double> confident(8, 0.0);
    confident[2] = 1e4;
    CHECK(softmax_cross_entropy(cst({8}, confident), 2).value()[0] == doctest::Approx(0.0));

    // Independent softmax-then-log in 64-bit.
    double denom = std::exp(1.0) + 7.0;
    double expected = -std::log(std::exp(1.0) / denom);
    CHECK(softmax_cross_entropy(cst({8}, {1, 0, 0, 0, 0, 0, 0, 0}), 0).value()[0] ==
          doctest::Approx(expected).epsilon(1e-12));

    CHECK_THROWS_AS(softmax_cross_entropy(cst({8}, confident), 8), ArgumentError);
    CHECK_THROWS_AS(softmax_cross_entropy(cst({8}, confident), -1), ArgumentError);
}

TEST_CASE("softmax_cross_entropy is non-negative and equals ln k only for constant logits") {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 100; ++trial) {
        auto logits = random_tensor({8}, rng, -3, 3);
        const int label = static_cast<int>(rng() % 8);
        const double v = softmax_cross_entropy(Var<double>::constant(logits), label).value()[0];
        CHECK(v >= 0.0);
    }
    // Non-constant logits: the mean over labels exceeds ln k strictly.
    auto logits = random_tensor({8}, rng, -3, 3);
    double avg = 0;
    for (int y = 0; y < 8; ++y) avg += softmax_cross_entropy(Var<double>::constant(logits), y).value()[0] / 8;
    CHECK(avg > std::log(8.0));
}

TEST_CASE("batched cross-entropy gradient") {
    std::mt19937_64 rng(9);
    std::vector<int> labels{0, 3, 7, 1};
    auto fn = [&](const std::vector<Var<double>>& v) { return softmax_cross_entropy_mean(v[0], labels); };
    CHECK(gradient_relative_error(fn, {random_tensor({4, 8}, rng, -2, 2)}) < 1e-4);
}

TEST_CASE("backward basics and accumulation contract") {
    auto p = Var<double>::parameter(Tensor<double>({2, 3}, {1, 2, 3, 4, 5, 6}));
    backward(sum(p));
    for (double g : p.grad().values()) CHECK(g == 1.0);

    p.zero_grad();
    backward(sum(scale(p, 0.0)));
    for (double g : p.grad().values()) CHECK(g == 0.0);

    CHECK_THROWS_AS(backward(p), ArgumentError);

    // Same graph twice doubles the gradient.
    std::mt19937_64 rng(1);
    auto w = Var<double>::parameter(random_tensor({4, 3}, rng));
    auto x = Var<double>::constant(random_tensor({2, 4}, rng));
    auto loss = sum(row_norms(linear(x, w, Var<double>::constant(Tensor<double>({3}))), 1e-9));
    backward(loss);
    Tensor<double> once = w.grad();
    backward(loss);
    for (std::size_t i = 0; i < once.size(); ++i) CHECK(w.grad()[i] == doctest::Approx(2 * once[i]));
}

TEST_CASE("composite conv -> relu -> linear -> CE matches finite differences") {
    std::mt19937_64 rng(21);
    auto fn = [](const std::vector<Var<double>>& v) {
        auto h = leaky_relu(conv2d(v[0], v[1], v[2], 1), 0.1);
        auto flat = reshape(h, {h.value().size()});
        return softmax_cross_entropy(linear(flat, v[3], v[4]), 5);
    };
    CHECK(gradient_relative_error(fn, {random_tensor({5, 5, 2}, rng, 0, 1), random_tensor({3, 3, 2, 2}, rng),
                                       random_tensor({2}, rng), random_tensor({18, 8}, rng),
                                       random_tensor({8}, rng)}) < 1e-4);
}

TEST_CASE("elementwise helpers have correct gradients") {
    std::mt19937_64 rng(4);
    auto fn = [](const std::vector<Var<double>>& v) {
        auto d = sub_row(add(v[0], v[1]), v[2]);
        auto s = slice_rows(d, 1, 3);
        return add(mean(row_norms(s, 1e-9)), scale(sum(sub(v[0], v[1])), 0.25));
    };
    CHECK(gradient_relative_error(fn, {random_tensor({4, 5}, rng), random_tensor({4, 5}, rng),
                                       random_tensor({5}, rng)}) < 1e-4);
}

TEST_CASE("adam_step") {
    SUBCASE("zero gradient leaves parameters unchanged") {
        std::vector<Var<double>> params{Var<double>::parameter(Tensor<double>({3}, {1, -2, 3}))};
        auto state = make_adam_state<double>(params, {1e-3});
        adam_step<double>(params, state);
        CHECK(params[0].value() == Tensor<double>({3}, {1, -2, 3}));
        CHECK(state.step == 1);
    }
    SUBCASE("single step matches scalar formula") {
        std::vector<Var<double>> params{Var<double>::parameter(Tensor<double>({1}, {0.5}))};
        params[0].mutable_grad()[0] = 1.0;
        auto state = make_adam_state<double>(params, {1e-3, 0.9, 0.999, 1e-8});
        adam_step<double>(params, state);
        // Hand-coded: m = 0.1, v = 0.001, mhat = 1, vhat = 1.
        const double m = 0.1, v = 0.001;
        const double mhat = m / (1 - 0.9), vhat = v / (1 - 0.999);
        const double expected = 0.5 - 1e-3 * mhat / (std::sqrt(vhat) + 1e-8);
        CHECK(params[0].value()[0] == doctest::Approx(expected).epsilon(1e-12));
        CHECK(0.5 - params[0].value()[0] == doctest::Approx(1e-3).epsilon(1e-6));
        CHECK(params[0].grad()[0] == 1.0);
    }
    SUBCASE("same-sign gradients move monotonically") {
        std::vector<Var<double>> params{Var<double>::parameter(Tensor<double>({1}, {0.0}))};
        auto state = make_adam_state<double>(params, {1e-2});
        double prev = 0.0;
        for (int i = 0; i < 2; ++i) {
            params[0].mutable_grad()[0] = -0.7;
            adam_step<double>(params, state);
            CHECK(params[0].value()[0] > prev);
            prev = params[0].value()[0];
        }
    }
}

TEST_CASE("parameter container round trip and corruption") {
    std::vector<NamedTensor> tensors{{"small.conv1.weight", Tensor<float>({2, 1, 3}, {1, 2, 3, 4, 5, 6})},
                                     {"bias", Tensor<float>({2}, {-0.5f, 1e-7f})}};
    std::stringstream buf;
    write_parameters(buf, tensors);
    const std::string bytes = buf.str();
    CHECK(bytes.substr(0, 4) == "PSVD");
    auto back = read_parameters(buf);
    REQUIRE(back.size() == 2);
    CHECK(back[0].name == "small.conv1.weight");
    CHECK(back[0].tensor == tensors[0].tensor);
    CHECK(back[1].tensor == tensors[1].tensor);

    std::stringstream bad("XXXX");
    CHECK_THROWS_AS(read_parameters(bad), IoError);
    std::stringstream truncated(bytes.substr(0, bytes.size() - 3));
    CHECK_THROWS_AS(read_parameters(truncated), IoError);
}
