#include <cmath>

#include "condhar/analysis.hpp"
#include "doctest.h"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace condhar;

namespace {

ModelSpec three_block(std::size_t experts, bool conditional = true) {
    ModelSpec s = parse_shorthand("C(6)-C(8)-C(10)-FC-Sm");
    s.convs_per_block = 2;
    s.kernel_length = 3;
    s.n_experts = experts;
    s.head = HeadKind::pointwise;
    if (!conditional) s.condconv_mask.assign(7, false);
    return s;
}

WindowedDataset random_windows(std::size_t count, std::size_t T, std::size_t C, std::size_t classes,
                               std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    WindowedDataset ds;
    ds.window_len = T;
    ds.channels = C;
    ds.n_classes = classes;
    for (std::size_t i = 0; i < count; ++i) {
        for (std::size_t k = 0; k < T * C; ++k) ds.data.push_back(2.0 * unit_uniform(rng) - 1.0);
        ds.labels.push_back(static_cast<int>(i % classes));
        ds.subjects.push_back("s");
        ds.sessions.push_back("s");
        ds.starts.push_back(0);
    }
    return ds;
}

std::size_t tensor_elements(const Model& m) {
    std::size_t n = 0;
    for (const auto& p : m.parameters()) n += p.tensor.size();
    return n;
}

}  // namespace

TEST_SUITE("analysis") {

TEST_CASE("a 1x1 convolution over one sample costs one multiply-add") {
    LayerInfo L{"c", LayerKind::conv, 1, 1, 1, 1, 1, 1, 0, true};
    const auto c = layer_cost(L);
    CHECK(c.multiply_adds == 1);
    CHECK(c.flops == 2);
    CHECK(c.params == 2);
    LayerInfo d{"fc", LayerKind::dense, 1, 7, 1, 3, 0, 0, 0, true};
    CHECK(layer_cost(d).params == 7 * 3 + 3);
    CHECK(layer_cost(d).multiply_adds == 21);
}

TEST_CASE("conv cost matches a direct count over output positions") {
    const auto m = build_model(three_block(1, false), {40, 3}, 5);
    for (const auto& L : m.layers()) {
        if (L.kind != LayerKind::conv) continue;
        std::size_t macs = 0;
        for (std::size_t t = 0; t < L.t_out; ++t)
            for (std::size_t o = 0; o < L.c_out; ++o) macs += L.kernel * L.c_in;
        CHECK(layer_cost(L).multiply_adds == macs);
    }
}

TEST_CASE("extra experts add combination and routing cost only") {
    const std::pair<std::size_t, std::size_t> shape{40, 3};
    const auto base = count_flops(three_block(1), shape, 5);
    const auto model = build_model(three_block(1), shape, 5);
    // independent oracle: per conditional layer, each extra expert adds one
    // kernel combination and one routing column
    std::size_t per_expert_macs = 0, per_expert_params = 0, cond_layers = 0;
    for (const auto& L : model.layers()) {
        if (L.kind == LayerKind::condconv || L.kind == LayerKind::pointwise_condconv) {
            per_expert_macs += L.kernel * L.c_in * L.c_out + L.c_in;
            per_expert_params += L.kernel * L.c_in * L.c_out + L.c_in;
            ++cond_layers;
        }
    }
    REQUIRE(cond_layers == 7);
    for (std::size_t n : {2, 3, 4, 8, 16}) {
        const auto r = count_flops(three_block(n), shape, 5);
        CHECK(r.flops - base.flops == 2 * (n - 1) * per_expert_macs);
        CHECK(r.params - base.params == (n - 1) * per_expert_params);
        CHECK(r.elementwise_flops - base.elementwise_flops == (n - 1) * cond_layers);
        CHECK(r.n_experts == n);
    }
    const auto rows = flops_sweep(three_block(1), shape, 5, {1, 2, 4});
    CHECK(rows[2].flops - rows[0].flops == 3 * (rows[1].flops - rows[0].flops));  // affine in n
    CHECK(rows[0].ratio == 1.0);
    CHECK(rows[2].ratio == doctest::Approx(static_cast<double>(rows[2].flops) / rows[0].flops));
}

TEST_CASE("a conditional model adds the extra experts and the routing matrices") {
    const std::pair<std::size_t, std::size_t> shape{40, 3};
    const auto plain = build_model(three_block(1, false), shape, 5);
    const std::size_t plain_params = count_params(plain);
    std::size_t kernels = 0, routing = 0;
    for (const auto& L : plain.layers()) {
        if (L.kind == LayerKind::conv || L.kind == LayerKind::pointwise_conv) {
            kernels += (L.kind == LayerKind::conv ? L.kernel : 1) * L.c_in * L.c_out;
            routing += L.c_in;
        }
    }
    for (std::size_t n : {1, 2, 4}) {
        const auto cond = build_model(three_block(n), shape, 5);
        CHECK(count_params(cond) == plain_params + (n - 1) * kernels + n * routing);
    }
}

TEST_CASE("parameter count equals the stored tensor sizes") {
    for (std::size_t n : {1, 3}) {
        for (bool cond : {false, true}) {
            auto spec = three_block(n, cond);
            const auto m = build_model(spec, {40, 3}, 5);
            CHECK(count_params(m) == tensor_elements(m));
            spec.head = HeadKind::dense;
            if (cond) spec.condconv_mask.clear();
            const auto d = build_model(spec, {40, 3}, 5);
            CHECK(count_params(d) == tensor_elements(d));
        }
    }
}

TEST_CASE("flops table and sweep csv") {
    const auto r = count_flops(three_block(2), {40, 3}, 5);
    CHECK(r.table().find("condconv1") != std::string::npos);
    CHECK(r.counting_convention == kFlopsConvention);
    const auto csv = render_sweep_csv(flops_sweep(three_block(1), {40, 3}, 5, {1, 2}));
    CHECK(csv.rfind("n_experts,flops,mflops,params,ratio\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
}

TEST_CASE("confusion report ranks the off-diagonal cells") {
    const std::vector<int> truth{0, 0, 1, 1, 2, 2, 2};
    const std::vector<int> perfect = truth;
    const auto ok = confusion_report(evaluate_predictions(truth, perfect, 3), {"a", "b", "c"});
    CHECK(ok.ranked.empty());
    CHECK(ok.evaluation.accuracy == 1.0);

    const std::vector<int> swapped{1, 1, 0, 0, 2, 2, 0};
    const auto r = confusion_report(evaluate_predictions(truth, swapped, 3), {"a", "b", "c"});
    REQUIRE(r.ranked.size() == 3);
    CHECK(r.ranked[0].count == 2);
    CHECK(r.ranked[2].truth == 2);
    CHECK(r.ranked[2].predicted == 0);
    CHECK(r.table.find("a") != std::string::npos);
    CHECK(r.csv.find("b") != std::string::npos);
}

TEST_CASE("confusion matrix of a model equals evaluate") {
    auto m = build_model(three_block(2), {40, 3}, 4, 3);
    const auto ds = random_windows(30, 40, 3, 4, 8);
    const auto report = confusion_matrix_report(m, ds);
    const auto ev = evaluate(m, ds);
    CHECK(report.evaluation.confusion == ev.confusion);
    CHECK(report.evaluation.accuracy == ev.accuracy);
}

TEST_CASE("pinned routing gives one half everywhere") {
    auto spec = three_block(3);
    spec.pinned_routing = 0.5;
    auto m = build_model(spec, {40, 3}, 4);
    const auto ds = random_windows(13, 40, 3, 4, 1);
    const auto st = routing_stats(m, ds, {}, 20, 5);
    REQUIRE(st.layers.size() == 7);
    for (const auto& L : st.layers) {
        CHECK(L.alphas.size() == 13 * 3);
        for (const auto& row : L.mean)
            for (double v : row) CHECK(v == 0.5);
        for (const auto& row : L.stddev)
            for (double v : row) CHECK(v == 0.0);
    }
    CHECK(st.sample_count() == 13 * 7 * 3);
    std::size_t mass = st.out_of_range;
    for (auto h : st.histogram) mass += h;
    CHECK(mass == 13 * 7 * 3);
    CHECK(st.histogram[10] == mass);
    CHECK(st.edge_mass == 0.0);
}

TEST_CASE("routing weights agree across batchings and match the routing oracle") {
    auto m = build_model(three_block(2), {40, 3}, 4, 5);
    const auto ds = random_windows(9, 40, 3, 4, 2);
    const auto a = routing_stats(m, ds, {}, 20, 2);
    const auto b = routing_stats(m, ds, {}, 20, 256);
    for (std::size_t l = 0; l < a.layers.size(); ++l) CHECK(a.layers[l].alphas == b.layers[l].alphas);

    // the first layer routes the raw input: sigmoid(mean_t(x) R)
    const auto params = m.parameters();
    const auto R = params[1].tensor;  // condconv1.routing [3 x 2]
    REQUIRE(params[1].name == "condconv1.routing");
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto ex = ds.example(i);
        for (std::size_t e = 0; e < 2; ++e) {
            double z = 0;
            for (std::size_t c = 0; c < 3; ++c) {
                double mu = 0;
                for (std::size_t t = 0; t < 40; ++t) mu += ex[t * 3 + c];
                z += (mu / 40.0) * R.data()[c * 2 + e];
            }
            CHECK(a.layers[0].alphas[i * 2 + e] == doctest::Approx(oracle::sigmoid(z)).epsilon(1e-12));
        }
    }
}

TEST_CASE("a single example has zero spread") {
    auto m = build_model(three_block(2), {40, 3}, 4, 5);
    const auto ds = random_windows(1, 40, 3, 4, 2);
    const auto st = routing_stats(m, ds);
    for (const auto& L : st.layers)
        for (double v : L.stddev[0]) CHECK(v == 0.0);
}

TEST_CASE("routing selection and errors") {
    auto m = build_model(three_block(2), {40, 3}, 4);
    const auto ds = random_windows(4, 40, 3, 4, 2);
    const auto idx = m.condconv_layer_indices();
    const auto st = routing_stats(m, ds, {idx[2]});
    REQUIRE(st.layers.size() == 1);
    CHECK(st.layers[0].name == m.layers()[idx[2]].name);
    CHECK_THROWS_AS(routing_stats(m, ds, {1}), ConfigError);  // bn1
    auto plain = build_model(three_block(1, false), {40, 3}, 4);
    CHECK_THROWS_AS(routing_stats(plain, ds), ConfigError);
    CHECK_THROWS_AS(routing_stats(m, ds.subset(std::vector<std::size_t>{})), DataError);
    CHECK(routing_means_csv(st).rfind("layer,class,expert,mean,std,count\n", 0) == 0);
    CHECK(routing_histogram_csv(st).rfind("bucket_left,bucket_right,count\n", 0) == 0);
}

TEST_CASE("class divergence") {
    CHECK(class_divergence({{0.5, 0.5}, {0.5, 0.5}, {0.5, 0.5}}, {3, 3, 3}) == 0.0);
    CHECK(class_divergence({{1, 0}, {0, 1}}, {1, 1}) == doctest::Approx(std::sqrt(2.0)));
    // empty classes are skipped
    CHECK(class_divergence({{1, 0}, {9, 9}, {0, 1}}, {1, 0, 1}) == doctest::Approx(std::sqrt(2.0)));
    CHECK_THROWS_AS(class_divergence({{1, 0}, {0, 1}}, {1, 0}), DataError);

    std::mt19937_64 rng(4);
    std::vector<std::vector<double>> means(5, std::vector<double>(3));
    for (auto& row : means)
        for (auto& v : row) v = unit_uniform(rng);
    double total = 0;
    int pairs = 0;
    for (std::size_t a = 0; a < 5; ++a)
        for (std::size_t b = 0; b < 5; ++b) {
            if (a == b) continue;
            double d = 0;
            for (std::size_t e = 0; e < 3; ++e) d += std::pow(means[a][e] - means[b][e], 2);
            total += std::sqrt(d);
            ++pairs;
        }
    CHECK(class_divergence(means, {1, 1, 1, 1, 1}) == doctest::Approx(total / pairs));
}

TEST_CASE("depth divergence over layers") {
    RoutingStats st;
    st.n_classes = 2;
    st.class_counts = {1, 1};
    for (double gap : {0.0, 0.1, 0.4}) {
        LayerRouting L;
        L.name = "l" + std::to_string(gap);
        L.n_experts = 1;
        L.mean = {{0.5}, {0.5 + gap}};
        st.layers.push_back(L);
    }
    const auto r = depth_divergence(st);
    CHECK(r.scores[2] == doctest::Approx(0.4));
    CHECK(r.increasing);
    std::swap(st.layers[0], st.layers[1]);
    CHECK_FALSE(depth_divergence(st).increasing);
    st.layers.resize(1);
    CHECK_THROWS_AS(depth_divergence(st), ConfigError);
}

}
