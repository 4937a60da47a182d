#include "condhar/condconv.hpp"
#include "condhar/layers.hpp"
#include "condhar/ops.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace condhar;

namespace {

Tensor probe_loss(const Tensor& y, std::uint64_t seed = 91) {
    std::mt19937_64 rng(seed);
    return sum(mul(y, oracle::random_tensor(y.shape(), rng)));
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

CondConvLayer make_layer(std::size_t n, std::size_t K, std::size_t ci, std::size_t co,
                         std::uint64_t seed, double routing_init = 0.5) {
    std::mt19937_64 a(seed), b(seed + 1000);
    return CondConvLayer::create(n, K, ci, co, a, b, true, routing_init);
}

// alpha[b, i] = sigmoid(sum_c mean_t(x[b, :, c]) * R[c, i])
std::vector<double> route_oracle(const Tensor& x, const Tensor& R) {
    const std::size_t B = x.dim(0), T = x.dim(1), C = x.dim(2), n = R.dim(1);
    std::vector<double> out(B * n);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < n; ++i) {
            double z = 0;
            for (std::size_t c = 0; c < C; ++c) {
                double m = 0;
                for (std::size_t t = 0; t < T; ++t) m += x.data()[(b * T + t) * C + c];
                z += (m / T) * R.data()[c * n + i];
            }
            out[b * n + i] = oracle::sigmoid(z);
        }
    return out;
}

}  // namespace

TEST_SUITE("conv") {

TEST_CASE("conv geometry for same and valid padding") {
    auto g = conv_geometry(10, 5, 1, Padding::same);
    CHECK(g.out_len == 10);
    CHECK(g.pad_total == 4);
    CHECK(g.pad_left == 2);
    g = conv_geometry(10, 4, 1, Padding::same);
    CHECK(g.pad_total == 3);
    CHECK(g.pad_left == 1);  // extra sample on the right
    g = conv_geometry(10, 3, 2, Padding::same);
    CHECK(g.out_len == 5);
    g = conv_geometry(10, 3, 1, Padding::valid);
    CHECK(g.out_len == 8);
    CHECK(g.pad_total == 0);
    CHECK_THROWS_AS(conv_geometry(3, 5, 1, Padding::valid), ConfigError);
}

TEST_CASE("conv_temporal matches the quadruple loop") {
    std::mt19937_64 rng(21);
    for (auto [T, K, stride, pad] : {std::tuple{12, 3, 1, Padding::same}, {12, 5, 1, Padding::valid},
                                     {11, 4, 2, Padding::same}, {9, 1, 1, Padding::valid},
                                     {7, 7, 3, Padding::same}}) {
        const std::size_t B = 3, Ci = 2, Co = 4;
        auto x = oracle::random_tensor({B, std::size_t(T), Ci}, rng);
        auto w = oracle::random_tensor({std::size_t(K), Ci, Co}, rng);
        const auto y = conv_temporal(x, w, stride, pad);
        const auto g = conv_geometry(T, K, stride, pad);
        const auto ref = oracle::conv1d(values(x), values(w), B, T, Ci, K, Co, stride, g.pad_left, g.out_len);
        REQUIRE(y.shape() == Shape{B, g.out_len, Co});
        CHECK(oracle::max_abs_diff(y.data(), ref) < 1e-12);
    }
}

TEST_CASE("single-tap kernel scales the signal") {
    auto x = Tensor({1, 3, 1}, {1, 2, 3});
    const auto y = conv_temporal(x, Tensor({1, 1, 1}, {2.0}), 1, Padding::valid);
    CHECK(values(y) == std::vector<double>{2, 4, 6});
}

TEST_CASE("conv gradients") {
    std::mt19937_64 rng(22);
    auto x = oracle::random_tensor({2, 9, 3}, rng);
    auto w = oracle::random_tensor({3, 3, 2}, rng, true);
    for (std::size_t stride : {1, 2}) {
        for (Padding p : {Padding::same, Padding::valid}) {
            CHECK(grad_check([&](const Tensor& t) { return probe_loss(conv_temporal(t, w, stride, p)); }, x) < 1e-6);
            CHECK(grad_check_params([&] { return probe_loss(conv_temporal(x, w, stride, p)); }, {w}) < 1e-6);
        }
    }
}

TEST_CASE("conv rejects channel mismatches") {
    CHECK_THROWS_AS(conv_temporal(Tensor::zeros({1, 5, 2}), Tensor::zeros({3, 3, 1})), DimensionError);
}

}

TEST_SUITE("condconv") {

TEST_CASE("routing matches the explicit loop") {
    std::mt19937_64 rng(31);
    auto x = oracle::random_tensor({4, 7, 3}, rng);
    auto R = oracle::random_tensor({3, 5}, rng);
    const auto a = route(x, R);
    REQUIRE(a.shape() == Shape{4, 5});
    CHECK(oracle::max_abs_diff(a.data(), route_oracle(x, R)) < 1e-14);
    for (double v : a.data()) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
    }
}

TEST_CASE("routing with zero R gives one half") {
    std::mt19937_64 rng(32);
    auto x = oracle::random_tensor({2, 5, 3}, rng);
    const auto a = route(x, Tensor::zeros({3, 4}));
    for (double v : a.data()) CHECK(v == 0.5);
}

TEST_CASE("routing activation variants") {
    auto x = Tensor({1, 1, 1}, {1.0});
    auto R = Tensor({1, 2}, {-2.0, 3.0});
    CHECK(route(x, R, RoutingActivation::relu).data()[0] == 0.0);
    CHECK(route(x, R, RoutingActivation::tanh).data()[1] == doctest::Approx(std::tanh(3.0)));
    const auto s = route(x, R, RoutingActivation::softmax);
    CHECK(s.data()[0] + s.data()[1] == doctest::Approx(1.0));
    CHECK(routing_activation_from_string("elu") == RoutingActivation::elu);
    CHECK_THROWS_AS(routing_activation_from_string("gelu"), ConfigError);
}

TEST_CASE("kernel combination matches the explicit sum") {
    std::mt19937_64 rng(33);
    const std::size_t B = 3, n = 4, K = 3, Ci = 2, Co = 5;
    auto alpha = oracle::random_tensor({B, n}, rng, false, 0, 1);
    auto experts = oracle::random_tensor({n, K, Ci, Co}, rng);
    const auto k = combine_kernels(alpha, experts);
    REQUIRE(k.shape() == Shape{B, K, Ci, Co});
    const std::size_t E = K * Ci * Co;
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t j = 0; j < E; ++j) {
            double s = 0;
            for (std::size_t i = 0; i < n; ++i) s += alpha.data()[b * n + i] * experts.data()[i * E + j];
            CHECK(k.data()[b * E + j] == doctest::Approx(s).epsilon(1e-14));
        }
}

TEST_CASE("combine-then-convolve equals the per-expert sum") {
    std::mt19937_64 rng(34);
    for (std::size_t n : {1, 2, 4, 8}) {
        auto layer = make_layer(n, 3, 3, 4, 100 + n);
        auto x = oracle::random_tensor({3, 10, 3}, rng);
        const auto fused = condconv_forward(x, layer);
        const auto ref = condconv_as_sum(x, layer);
        CHECK(oracle::max_rel_error(values(fused), values(ref)) < 1e-10);

        // independent oracle: relu(sum_i alpha_i (W_i * x) + bias) by loops
        const auto alpha = route_oracle(x, layer.routing);
        std::vector<double> acc(fused.size(), 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            const auto yi = oracle::conv1d(values(x), values(layer.expert(i)), 3, 10, 3, 3, 4, 1, 1, 10);
            for (std::size_t b = 0; b < 3; ++b)
                for (std::size_t j = 0; j < 40; ++j) acc[b * 40 + j] += alpha[b * n + i] * yi[b * 40 + j];
        }
        for (std::size_t j = 0; j < acc.size(); ++j) acc[j] = std::max(0.0, acc[j] + layer.bias.data()[j % 4]);
        CHECK(oracle::max_abs_diff(fused.data(), acc) < 1e-10);
    }
}

TEST_CASE("mixed_conv equals per-example convolution with combined kernels") {
    std::mt19937_64 rng(35);
    auto x = oracle::random_tensor({3, 8, 2}, rng);
    auto alpha = oracle::random_tensor({3, 3}, rng, false, 0, 1);
    auto experts = oracle::random_tensor({3, 5, 2, 3}, rng);
    const auto a = mixed_conv(x, alpha, experts, 2, Padding::same);
    const auto b = conv_temporal_per_example(x, combine_kernels(alpha, experts), 2, Padding::same);
    CHECK(values(a) == values(b));
}

TEST_CASE("single pinned expert is bitwise a standard convolution") {
    std::mt19937_64 rng(36);
    auto layer = make_layer(1, 5, 3, 6, 7);
    layer.pinned_routing = 1.0;
    const Tensor kernel = layer.expert(0);
    for (int trial = 0; trial < 10; ++trial) {
        auto x = oracle::random_tensor({2, 16, 3}, rng);
        const auto a = condconv_forward(x, layer);
        const auto b = relu(add_bias(conv_temporal(x, kernel), layer.bias));
        CHECK(values(a) == values(b));
    }
}

TEST_CASE("pinned routing leaves R without gradient") {
    std::mt19937_64 rng(37);
    auto layer = make_layer(2, 3, 2, 2, 9);
    layer.pinned_routing = 1.0;
    auto x = oracle::random_tensor({2, 6, 2}, rng);
    backward(probe_loss(condconv_forward(x, layer)));
    for (double g : layer.routing.grad()) CHECK(g == 0.0);
    const auto alpha = routing_weights(x, layer);
    for (double a : alpha.data()) CHECK(a == 1.0);
}

TEST_CASE("condconv gradients reach input, experts, routing and bias") {
    std::mt19937_64 rng(38);
    for (std::size_t n : {1, 3}) {
        auto layer = make_layer(n, 3, 2, 3, 50 + n);
        auto x = oracle::random_tensor({3, 7, 2}, rng);
        auto f = [&] { return probe_loss(condconv_preactivation(x, layer)); };
        CHECK(grad_check([&](const Tensor& t) { return probe_loss(condconv_preactivation(t, layer)); }, x) < 1e-6);
        CHECK(grad_check_params(f, {layer.experts, layer.routing, layer.bias}) < 1e-6);
    }
}

TEST_CASE("explicit combine path has the same gradients as the fused path") {
    std::mt19937_64 rng(39);
    auto x = oracle::random_tensor({2, 6, 2}, rng);
    auto alpha = oracle::random_tensor({2, 3}, rng, true, 0, 1);
    auto experts = oracle::random_tensor({3, 3, 2, 2}, rng, true);
    backward(probe_loss(mixed_conv(x, alpha, experts)));
    const auto ga = alpha.grad(), ge = experts.grad();
    alpha.zero_grad();
    experts.zero_grad();
    backward(probe_loss(conv_temporal_per_example(x, combine_kernels(alpha, experts))));
    CHECK(oracle::max_rel_error(ga, alpha.grad()) < 1e-12);
    CHECK(oracle::max_rel_error(ge, experts.grad()) < 1e-12);
}

TEST_CASE("pointwise head requires a unit kernel") {
    std::mt19937_64 rng(40);
    auto head = make_layer(2, 1, 4, 3, 11);
    auto x = oracle::random_tensor({2, 5, 4}, rng);
    const auto y = condconv_pointwise_head(x, head);
    CHECK(y.shape() == Shape{2, 3});
    auto wide = make_layer(2, 3, 4, 3, 12);
    CHECK_THROWS_AS(condconv_pointwise_head(x, wide), ConfigError);
}

TEST_CASE("initial routing stays near one half") {
    auto layer = make_layer(4, 3, 8, 8, 13, 1e-2);
    for (double r : layer.routing.data()) CHECK(std::abs(r) <= 1e-2 / std::sqrt(8.0));
    const double bound = std::sqrt(6.0 / (3 * 8));
    for (double w : layer.experts.data()) CHECK(std::abs(w) <= bound);
}

}
