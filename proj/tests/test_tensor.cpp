#include <cmath>
#include <limits>

#include "condhar/ops.hpp"
#include "condhar/tensor.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace condhar;

TEST_SUITE("tensor") {

TEST_CASE("matmul matches the triple loop") {
    std::mt19937_64 rng(1);
    for (auto [m, k, p] : {std::tuple{1, 1, 1}, {2, 3, 4}, {7, 5, 3}, {16, 9, 11}}) {
        auto a = oracle::random_tensor({std::size_t(m), std::size_t(k)}, rng);
        auto b = oracle::random_tensor({std::size_t(k), std::size_t(p)}, rng);
        const auto c = matmul(a, b);
        const auto ref = oracle::matmul({a.data().begin(), a.data().end()},
                                        {b.data().begin(), b.data().end()}, m, k, p);
        REQUIRE(c.shape() == Shape{std::size_t(m), std::size_t(p)});
        CHECK(oracle::max_abs_diff(c.data(), ref) < 1e-12);
    }
}

TEST_CASE("matmul rejects mismatched inner dimensions") {
    CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 2})), DimensionError);
    CHECK_THROWS_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2})), DimensionError);
}

TEST_CASE("2x2 identity product") {
    auto a = Tensor::from_rows({{1, 2}, {3, 4}});
    auto eye = Tensor::from_rows({{1, 0}, {0, 1}});
    const auto c = matmul(a, eye);
    CHECK(c.at({0, 0}) == 1);
    CHECK(c.at({0, 1}) == 2);
    CHECK(c.at({1, 0}) == 3);
    CHECK(c.at({1, 1}) == 4);
}

TEST_CASE("elementwise ops and reductions") {
    auto a = Tensor::from_rows({{1, -2, 3}});
    auto b = Tensor::from_rows({{4, 5, -6}});
    CHECK(add(a, b).data()[2] == -3);
    CHECK(sub(a, b).data()[0] == -3);
    CHECK(mul(a, b).data()[1] == -10);
    CHECK(scale(a, 0.5).data()[2] == 1.5);
    CHECK(sum(a).item() == 2);
    CHECK(mean(b).item() == doctest::Approx(1.0));
    CHECK(reshape(a, {3, 1}).shape() == Shape{3, 1});
    CHECK_THROWS_AS(reshape(a, {2, 2}), DimensionError);
}

TEST_CASE("add_bias and mean_over_time") {
    auto x = Tensor({1, 2, 2}, {1, 2, 3, 4});
    auto m = mean_over_time(x);
    CHECK(m.shape() == Shape{1, 2});
    CHECK(m.data()[0] == 2);
    CHECK(m.data()[1] == 3);
    auto y = add_bias(x, Tensor({2}, {10, 20}));
    CHECK(y.data()[3] == 24);
}

TEST_CASE("gradient of a composite expression by hand") {
    // f(a, b) = sum((a*b) + a) -> df/da = b + 1, df/db = a
    auto a = Tensor({3}, {1, 2, 3}, true);
    auto b = Tensor({3}, {4, 5, 6}, true);
    backward(sum(add(mul(a, b), a)));
    CHECK(a.grad() == std::vector<double>{5, 6, 7});
    CHECK(b.grad() == std::vector<double>{1, 2, 3});
}

TEST_CASE("gradients accumulate across backward calls until zeroed") {
    auto a = Tensor({2}, {1, 2}, true);
    backward(sum(scale(a, 3.0)));
    backward(sum(scale(a, 3.0)));
    CHECK(a.grad() == std::vector<double>{6, 6});
    a.zero_grad();
    CHECK(a.grad() == std::vector<double>{0, 0});
}

TEST_CASE("shared subexpression receives gradient from every use") {
    auto x = Tensor({1}, {3}, true);
    auto y = mul(x, x);  // x^2
    backward(sum(add(y, y)));
    CHECK(x.grad()[0] == doctest::Approx(12.0));
}

TEST_CASE("graph collects nodes in creation order") {
    auto a = Tensor({2}, {1, 2}, true);
    auto b = scale(a, 2.0);
    auto c = add(b, a);
    auto loss = sum(c);
    const auto g = Graph::collect(loss);
    REQUIRE(g.size() == 4);
    for (std::size_t i = 1; i < g.size(); ++i) CHECK(g.nodes()[i - 1]->id < g.nodes()[i]->id);
    CHECK(g.nodes().back().get() == loss.node().get());
}

TEST_CASE("backward needs a scalar root") {
    auto a = Tensor({2}, {1, 2}, true);
    CHECK_THROWS_AS(backward(scale(a, 2.0)), ContractError);
}

TEST_CASE("non-finite forward values raise NumericError") {
    const double inf = std::numeric_limits<double>::infinity();
    auto a = Tensor({1}, {inf});
    CHECK_THROWS_AS(scale(a, 1.0), NumericError);
}

TEST_CASE("grad_check agrees with a closed-form derivative") {
    // f(x) = sum(x * x * x); the check itself must report a tiny error.
    auto x = Tensor({4}, {0.3, -1.2, 2.0, 0.7});
    const double err = grad_check([](const Tensor& t) { return sum(mul(mul(t, t), t)); }, x);
    CHECK(err < 1e-8);
}

TEST_CASE("grad_check rejects step sizes outside [1e-7, 1e-3]") {
    auto x = Tensor({1}, {1.0});
    auto f = [](const Tensor& t) { return sum(t); };
    CHECK_THROWS_AS(grad_check(f, x, 1e-9), ContractError);
    CHECK_THROWS_AS(grad_check(f, x, 1e-2), ContractError);
}

TEST_CASE("op gradients pass finite differences") {
    std::mt19937_64 rng(3);
    auto w = oracle::random_tensor({3, 2}, rng);
    auto x = oracle::random_tensor({4, 3}, rng);
    CHECK(grad_check([&](const Tensor& t) { return sum(mul(matmul(t, w), matmul(t, w))); }, x) < 1e-6);
    auto bias = oracle::random_tensor({3}, rng);
    CHECK(grad_check([&](const Tensor& t) { return sum(mul(add_bias(t, bias), t)); }, x) < 1e-6);
    auto seq = oracle::random_tensor({2, 5, 3}, rng);
    CHECK(grad_check([](const Tensor& t) { auto m = mean_over_time(t); return sum(mul(m, m)); }, seq) < 1e-6);
}

TEST_CASE("parallel_for results do not depend on the thread count") {
    std::mt19937_64 rng(9);
    auto x = oracle::random_tensor({8, 32, 4}, rng, true);
    auto k = oracle::random_tensor({5, 4, 6}, rng, true);
    std::vector<std::vector<double>> outs, grads;
    for (std::size_t threads : {1, 2, 3, 8}) {
        set_num_threads(threads);
        x.zero_grad();
        k.zero_grad();
        auto y = conv_temporal(x, k);
        backward(sum(mul(y, y)));
        outs.emplace_back(y.data().begin(), y.data().end());
        grads.push_back(k.grad());
    }
    set_num_threads(1);
    for (std::size_t i = 1; i < outs.size(); ++i) {
        CHECK(outs[i] == outs[0]);
        CHECK(grads[i] == grads[0]);
    }
}

TEST_CASE("clone makes a new leaf and detach drops tracking") {
    auto a = Tensor({2}, {1, 2}, true);
    auto c = a.clone();
    CHECK(c.node() != a.node());
    CHECK(c.node()->parents.empty());
    const auto d = a.detach();
    CHECK_FALSE(d.requires_grad());
    CHECK(d.data()[1] == 2);
}

}
