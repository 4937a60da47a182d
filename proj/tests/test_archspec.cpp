#include <string>

#include "condhar/archspec.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace condhar;

namespace {

std::size_t parse_error_position(const std::string& text) {
    try {
        parse_shorthand(text);
    } catch (const ParseError& e) {
        return e.position();
    }
    FAIL("expected a parse error for '" << text << "'");
    return 0;
}

ModelSpec small_spec(std::size_t experts) {
    ModelSpec s = parse_shorthand("C(4)-C(6)-FC-Sm");
    s.convs_per_block = 1;
    s.kernel_length = 3;
    s.n_experts = experts;
    return s;
}

}  // namespace

TEST_SUITE("archspec") {

TEST_CASE("shorthand round-trips") {
    for (const char* text : {"C(64)-C(128)-C(384)-FC-Sm", "C(64)-C(128)-C(256)-FC-Sm",
                             "C(128)-C(256)-C(384)-FC-Sm",
                             "C(64)-C(64)-C(128)-C(128)-C(256)-FC-Sm", "C(1)-FC-Sm"}) {
        CHECK(render_shorthand(parse_shorthand(text)) == text);
    }
    const auto s = parse_shorthand("C(64)-C(128)-C(384)-FC-Sm");
    REQUIRE(s.blocks.size() == 5);
    CHECK(std::get<ConvBlock>(s.blocks[2]).filters == 384);
    CHECK(s.conv_block_count() == 3);
}

TEST_CASE("block tokens are case-insensitive and spaces are ignored") {
    CHECK(render_shorthand(parse_shorthand("c(64) - Fc - sm")) == "C(64)-FC-Sm");
    CHECK(render_shorthand(parse_shorthand("C(64)-C(64)-C(128)-C(128)-C(256)-Fc-Sm")) ==
          "C(64)-C(64)-C(128)-C(128)-C(256)-FC-Sm");
}

TEST_CASE("parse errors report the offending position") {
    CHECK(parse_error_position("") == 0);
    CHECK(parse_error_position("C(64)-X-Sm") == 6);
    CHECK(parse_error_position("C(64)-FC") == 8);
    CHECK(parse_error_position("C(64)-Sm-FC") == 6);
    CHECK(parse_error_position("C(64)-FC-Sm-Sm") == 9);
    CHECK(parse_error_position("C(0)-FC-Sm") == 2);
    CHECK(parse_error_position("C()-FC-Sm") == 2);
    CHECK(parse_error_position("C(12-FC-Sm") == 4);
    CHECK(parse_error_position("C(4)FC-Sm") == 4);
}

TEST_CASE("model spec JSON round-trip") {
    ModelSpec s = parse_shorthand("C(8)-C(16)-FC-Sm");
    s.convs_per_block = 1;
    s.kernel_length = 3;
    s.block_pools = {std::nullopt, PoolSpec{3, 2}};
    s.head = HeadKind::pointwise;
    s.n_experts = 4;
    s.condconv_mask = {true, false, true};
    s.pinned_routing = 0.5;
    s.routing_activation = RoutingActivation::softmax;
    s.dropout_rate = 0.25;
    nlohmann::json j = s;
    CHECK(j["shorthand"] == "C(8)-C(16)-FC-Sm");
    const auto back = j.get<ModelSpec>();
    CHECK(back == s);
    CHECK(nlohmann::json::parse(j.dump()).get<ModelSpec>() == s);
}

TEST_CASE("built layer stack and shapes") {
    ModelSpec s = parse_shorthand("C(8)-C(16)-FC-Sm");  // 2 convs per block, K=5, pool 2/2
    s.condconv_mask = {false, false, false, false, false};
    const auto m = build_model(s, {32, 3}, 5);
    const auto& L = m.layers();
    std::vector<std::string> names;
    for (const auto& l : L) names.push_back(l.name);
    CHECK(names == std::vector<std::string>{"conv1", "bn1", "relu1", "conv2", "bn2", "relu2",
                                            "pool1", "conv3", "bn3", "relu3", "conv4", "bn4",
                                            "relu4", "pool2", "dropout", "fc", "softmax"});
    CHECK(L[0].c_in == 3);
    CHECK(L[0].c_out == 8);
    CHECK(L[6].t_out == 16);
    CHECK(L[13].t_out == 8);
    CHECK(L[15].t_in * L[15].c_in == 8 * 16);
    CHECK(L[15].c_out == 5);

    std::mt19937_64 rng(1);
    auto mm = m;
    ForwardContext ctx;
    const auto y = mm.forward(oracle::random_tensor({2, 32, 3}, rng), ctx);
    CHECK(y.shape() == Shape{2, 5});
    CHECK_THROWS_AS(mm.forward(oracle::random_tensor({2, 31, 3}, rng), ctx), DimensionError);
}

TEST_CASE("conditional layers follow n_experts and the mask") {
    ModelSpec s = small_spec(3);
    s.head = HeadKind::pointwise;
    const auto m = build_model(s, {16, 2}, 4);
    CHECK(m.condconv_layer_indices().size() == 3);
    CHECK(m.layers()[0].kind == LayerKind::condconv);
    CHECK(m.layers()[0].n_experts == 3);
    CHECK(m.layers()[m.layers().size() - 2].kind == LayerKind::pointwise_condconv);

    s.condconv_mask = {false, true, false};
    const auto m2 = build_model(s, {16, 2}, 4);
    CHECK(m2.condconv_layer_indices().size() == 1);
    CHECK(m2.layers()[m2.condconv_layer_indices()[0]].name == "condconv2");

    ModelSpec dense = small_spec(2);
    dense.condconv_mask = {true, true, true};
    CHECK_THROWS_AS(build_model(dense, {16, 2}, 4), ConfigError);
    dense.condconv_mask = {true};
    CHECK_THROWS_AS(build_model(dense, {16, 2}, 4), ConfigError);
}

TEST_CASE("architecture errors name the failing block") {
    ModelSpec s = parse_shorthand("C(64)-C(128)-C(384)-FC-Sm");
    try {
        build_model(s, {4, 3}, 6);  // 4 -> 2 -> 1, too short for the third pool
        FAIL("expected ArchitectureError");
    } catch (const ArchitectureError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("block3 C(384)") != std::string::npos);
    }
    s.padding = Padding::valid;
    try {
        build_model(s, {12, 3}, 6);
        FAIL("expected ArchitectureError");
    } catch (const ArchitectureError& e) {
        CHECK(std::string(e.what()).find("block2 C(128)") != std::string::npos);
    }
    CHECK_THROWS_AS(build_model(parse_shorthand("C(4)-FC-FC-Sm"), {16, 1}, 2), ArchitectureError);
    CHECK_THROWS_AS(build_model(parse_shorthand("FC-C(4)-FC-Sm"), {16, 1}, 2), ArchitectureError);
    CHECK_THROWS_AS(build_model(parse_shorthand("C(4)-FC-Sm"), {16, 1}, 1), ArchitectureError);
}

TEST_CASE("parameters have stable names and sizes") {
    ModelSpec s = small_spec(2);
    s.condconv_mask = {true, false, false};
    const auto m = build_model(s, {16, 3}, 4);
    const auto p = m.parameters();
    std::vector<std::string> names;
    for (const auto& t : p) names.push_back(t.name);
    CHECK(names == std::vector<std::string>{"condconv1.experts", "condconv1.routing",
                                            "condconv1.bias", "bn1.gamma", "bn1.beta",
                                            "conv2.kernel", "conv2.bias", "bn2.gamma",
                                            "bn2.beta", "fc.W", "fc.b"});
    CHECK(p[0].tensor.shape() == Shape{2, 3, 3, 4});
    CHECK(p[1].tensor.shape() == Shape{3, 2});
    CHECK(p[5].tensor.shape() == Shape{3, 4, 6});
    CHECK(m.buffers().size() == 4);
}

TEST_CASE("a layer's initial weights do not depend on the other layers' kinds") {
    ModelSpec a = small_spec(1);
    a.condconv_mask = {false, false, false};
    ModelSpec b = a;
    b.condconv_mask = {true, false, false};
    const auto ma = build_model(a, {16, 3}, 4, 9);
    const auto mb = build_model(b, {16, 3}, 4, 9);
    auto find = [](const Model& m, const std::string& name) {
        for (const auto& t : m.parameters())
            if (t.name == name) return std::vector<double>(t.tensor.data().begin(), t.tensor.data().end());
        FAIL("missing " << name);
        return std::vector<double>{};
    };
    CHECK(find(ma, "conv2.kernel") == find(mb, "conv2.kernel"));
    CHECK(find(ma, "fc.W") == find(mb, "fc.W"));
    // A single expert starts from the plain kernel.
    CHECK(find(ma, "conv1.kernel") == find(mb, "condconv1.experts"));
    const auto mc = build_model(a, {16, 3}, 4, 10);
    CHECK(find(ma, "conv2.kernel") != find(mc, "conv2.kernel"));
}

TEST_CASE("model copies share parameter storage") {
    auto m = build_model(small_spec(1), {16, 2}, 3);
    auto copy = m;
    copy.parameters()[0].tensor.mutable_data()[0] = 123.0;
    CHECK(m.parameters()[0].tensor.data()[0] == 123.0);
}

}
