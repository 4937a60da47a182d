#include <cmath>
#include <numeric>

#include "condhar/layers.hpp"
#include "condhar/ops.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace condhar;

namespace {

// Sum of squares against a fixed random projection, so every output element
// carries a distinct upstream gradient.
Tensor probe_loss(const Tensor& y, std::uint64_t seed = 77) {
    std::mt19937_64 rng(seed);
    auto w = oracle::random_tensor(y.shape(), rng);
    return sum(mul(y, w));
}

}  // namespace

TEST_SUITE("layers") {

TEST_CASE("activation values") {
    auto x = Tensor({4}, {-2.0, -0.5, 0.5, 2.0});
    CHECK(relu(x).data()[0] == 0.0);
    CHECK(relu(x).data()[3] == 2.0);
    CHECK(sigmoid(x).data()[2] == doctest::Approx(oracle::sigmoid(0.5)));
    CHECK(tanh(x).data()[1] == doctest::Approx(std::tanh(-0.5)));
    CHECK(leaky_relu(x).data()[0] == doctest::Approx(-0.02));
    CHECK(elu(x).data()[0] == doctest::Approx(std::exp(-2.0) - 1.0));
}

TEST_CASE("sigmoid is stable for large magnitudes") {
    auto x = Tensor({2}, {-800.0, 800.0});
    const auto y = sigmoid(x);
    CHECK(y.data()[0] >= 0.0);
    CHECK(y.data()[1] == 1.0);
}

TEST_CASE("activation gradients") {
    std::mt19937_64 rng(5);
    // keep away from the kinks at 0
    auto x = Tensor({6}, {-1.5, -0.7, -0.2, 0.3, 0.9, 1.7});
    for (auto f : {+[](const Tensor& t) { return relu(t); }, +[](const Tensor& t) { return sigmoid(t); },
                   +[](const Tensor& t) { return condhar::tanh(t); },
                   +[](const Tensor& t) { return leaky_relu(t); },
                   +[](const Tensor& t) { return elu(t); }}) {
        CHECK(grad_check([&](const Tensor& t) { return probe_loss(f(t)); }, x) < 1e-6);
    }
}

TEST_CASE("softmax rows sum to one and resist overflow") {
    auto x = Tensor::from_rows({{1000, 1001, 1002}, {-5, 0, 5}});
    const auto p = softmax(x);
    for (std::size_t r = 0; r < 2; ++r) {
        double s = 0;
        for (std::size_t c = 0; c < 3; ++c) s += p.at({r, c});
        CHECK(s == doctest::Approx(1.0));
    }
    const double z = std::exp(-2.0) + std::exp(-1.0) + 1.0;
    CHECK(p.at({0, 2}) == doctest::Approx(1.0 / z));
}

TEST_CASE("cross entropy matches -log p") {
    auto probs = Tensor::from_rows({{0.7, 0.2, 0.1}, {0.1, 0.1, 0.8}});
    const std::vector<int> labels{0, 2};
    const double expected = -(std::log(0.7) + std::log(0.8)) / 2.0;
    CHECK(cross_entropy_loss(probs, labels).item() == doctest::Approx(expected));
}

TEST_CASE("fused softmax cross entropy equals the composition") {
    std::mt19937_64 rng(8);
    auto logits = oracle::random_tensor({5, 4}, rng, false, -3, 3);
    const std::vector<int> labels{0, 3, 1, 1, 2};
    CHECK(softmax_cross_entropy(logits, labels).item() ==
          doctest::Approx(cross_entropy_loss(softmax(logits), labels).item()).epsilon(1e-12));
    CHECK(grad_check([&](const Tensor& t) { return softmax_cross_entropy(t, labels); }, logits) < 1e-6);
    CHECK(grad_check([&](const Tensor& t) { return cross_entropy_loss(softmax(t), labels); }, logits) < 1e-6);
}

TEST_CASE("labels outside the class range are rejected") {
    auto logits = Tensor::zeros({2, 3});
    const std::vector<int> bad{0, 3};
    CHECK_THROWS_AS(softmax_cross_entropy(logits, bad), DataError);
    const std::vector<int> neg{-1, 0};
    CHECK_THROWS_AS(cross_entropy_loss(softmax(logits), neg), DataError);
}

TEST_CASE("batch norm train mode matches the textbook formula") {
    std::mt19937_64 rng(11);
    const std::size_t B = 3, T = 4, C = 2;
    auto x = oracle::random_tensor({B, T, C}, rng, false, -2, 2);
    auto st = BatchNormState::create(C);
    st.gamma.mutable_data()[0] = 1.5;
    st.beta.mutable_data()[1] = -0.25;
    const auto y = batch_norm(x, st, Mode::train);

    const auto d = x.data();
    const double n = B * T;
    for (std::size_t c = 0; c < C; ++c) {
        double mu = 0, var = 0;
        for (std::size_t i = 0; i < B * T; ++i) mu += d[i * C + c];
        mu /= n;
        for (std::size_t i = 0; i < B * T; ++i) var += (d[i * C + c] - mu) * (d[i * C + c] - mu);
        const double biased = var / n, unbiased = var / (n - 1);
        const double g = st.gamma.data()[c], b = st.beta.data()[c];
        for (std::size_t i = 0; i < B * T; ++i) {
            CHECK(y.data()[i * C + c] ==
                  doctest::Approx(g * (d[i * C + c] - mu) / std::sqrt(biased + 1e-5) + b).epsilon(1e-12));
        }
        CHECK(st.running_mean[c] == doctest::Approx(0.1 * mu));
        CHECK(st.running_var[c] == doctest::Approx(0.9 + 0.1 * unbiased));
    }
}

TEST_CASE("batch norm eval mode uses running statistics only") {
    auto st = BatchNormState::create(1);
    st.running_mean = {2.0};
    st.running_var = {4.0};
    auto x = Tensor({1, 2, 1}, {2.0, 6.0});
    const auto y = batch_norm(x, st, Mode::eval);
    CHECK(y.data()[0] == doctest::Approx(0.0));
    CHECK(y.data()[1] == doctest::Approx(4.0 / std::sqrt(4.0 + 1e-5)));
    CHECK(st.running_mean[0] == 2.0);  // untouched
}

TEST_CASE("batch norm gradients in both modes") {
    std::mt19937_64 rng(12);
    auto x = oracle::random_tensor({3, 5, 2}, rng, false, -2, 2);
    for (Mode mode : {Mode::train, Mode::eval}) {
        auto st = BatchNormState::create(2);
        st.running_mean = {0.3, -0.2};
        st.running_var = {1.7, 0.6};
        st.gamma.mutable_data()[1] = 0.8;
        auto f = [&](const Tensor& t) {
            auto copy = st;  // running statistics must not drift between probes
            return probe_loss(batch_norm(t, copy, mode));
        };
        CHECK(grad_check(f, x) < 1e-4);
        auto params = [&] {
            auto copy = st;
            return probe_loss(batch_norm(x, copy, mode));
        };
        CHECK(grad_check_params(params, {st.gamma, st.beta}) < 1e-4);
    }
}

TEST_CASE("batch norm rejects degenerate train batches") {
    auto st = BatchNormState::create(2);
    CHECK_THROWS_AS(batch_norm(Tensor::zeros({1, 1, 2}), st, Mode::train), DataError);
    CHECK_NOTHROW(batch_norm(Tensor::zeros({1, 1, 2}), st, Mode::eval));
    CHECK_THROWS_AS(BatchNormState::create(2, 0.0), ConfigError);
    CHECK_THROWS_AS(BatchNormState::create(2, 0.1, 0.0), ConfigError);
}

TEST_CASE("max pool matches a sliding loop") {
    std::mt19937_64 rng(13);
    for (auto [T, size, stride] : {std::tuple{8, 2, 2}, {9, 3, 2}, {7, 4, 1}, {5, 5, 5}}) {
        const std::size_t B = 2, C = 3;
        auto x = oracle::random_tensor({B, std::size_t(T), C}, rng);
        const auto y = max_pool_temporal(x, size, stride);
        const std::size_t To = (T - size) / stride + 1;
        REQUIRE(y.shape() == Shape{B, To, C});
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t t = 0; t < To; ++t)
                for (std::size_t c = 0; c < C; ++c) {
                    double m = -1e300;
                    for (std::size_t k = 0; k < std::size_t(size); ++k)
                        m = std::max(m, x.data()[(b * T + t * stride + k) * C + c]);
                    CHECK(y.data()[(b * To + t) * C + c] == m);
                }
        CHECK(grad_check([&](const Tensor& t) { return probe_loss(max_pool_temporal(t, size, stride)); }, x) < 1e-6);
    }
}

TEST_CASE("max pool ties route the gradient to the earliest sample") {
    auto x = Tensor({1, 2, 1}, {1.0, 1.0}, true);
    backward(sum(max_pool_temporal(x, 2, 2)));
    CHECK(x.grad() == std::vector<double>{1.0, 0.0});
    CHECK_THROWS_AS(max_pool_temporal(Tensor::zeros({1, 2, 1}), 3, 1), ConfigError);
}

TEST_CASE("dense layer equals x W + b and has correct gradients") {
    std::mt19937_64 rng(14);
    auto x = oracle::random_tensor({4, 3}, rng);
    auto W = oracle::random_tensor({3, 2}, rng, true);
    auto b = oracle::random_tensor({2}, rng, true);
    const auto y = dense(x, W, b);
    auto ref = oracle::matmul({x.data().begin(), x.data().end()}, {W.data().begin(), W.data().end()}, 4, 3, 2);
    for (std::size_t i = 0; i < ref.size(); ++i) ref[i] += b.data()[i % 2];
    CHECK(oracle::max_abs_diff(y.data(), ref) < 1e-12);
    CHECK(grad_check([&](const Tensor& t) { return probe_loss(dense(t, W, b)); }, x) < 1e-6);
    CHECK(grad_check_params([&] { return probe_loss(dense(x, W, b)); }, {W, b}) < 1e-6);
}

TEST_CASE("dropout is the identity in eval mode and at rate zero") {
    auto x = Tensor({5}, {1, 2, 3, 4, 5});
    CHECK(dropout(x, {0.5}, Mode::eval, 1).node() == x.node());
    CHECK(dropout(x, {0.0}, Mode::train, 1).node() == x.node());
    CHECK_THROWS_AS(dropout(x, {1.0}, Mode::train, 1), ConfigError);
    CHECK_THROWS_AS(dropout(x, {-0.1}, Mode::train, 1), ConfigError);
}

TEST_CASE("dropout masks follow the seed and preserve the mean") {
    auto x = Tensor::full({20000}, 1.0);
    const auto a = dropout(x, {0.3}, Mode::train, 42);
    const auto b = dropout(x, {0.3}, Mode::train, 42);
    CHECK(std::vector<double>(a.data().begin(), a.data().end()) ==
          std::vector<double>(b.data().begin(), b.data().end()));
    std::size_t zeros = 0;
    double total = 0;
    for (double v : a.data()) {
        zeros += (v == 0.0);
        if (v != 0.0) CHECK(v == doctest::Approx(1.0 / 0.7));
        total += v;
    }
    CHECK(static_cast<double>(zeros) / 20000.0 == doctest::Approx(0.3).epsilon(0.05));
    CHECK(total / 20000.0 == doctest::Approx(1.0).epsilon(0.03));
}

TEST_CASE("dropout gradient uses the same mask") {
    auto x = Tensor({6}, {1, 2, 3, 4, 5, 6});
    CHECK(grad_check([](const Tensor& t) { return probe_loss(dropout(t, {0.5}, Mode::train, 3)); }, x) < 1e-8);
}

}
