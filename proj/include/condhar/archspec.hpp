#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "condhar/condconv.hpp"
#include "condhar/layers.hpp"
#include "json.hpp"

namespace condhar {

// ---- shorthand -------------------------------------------------------------
//
//   spec  := block ("-" block)*
//   block := "C(" int ")" | "FC" | "Sm"      (FC case-insensitive, spaces ignored)
//
// e.g. "C(64)-C(128)-C(384)-FC-Sm": three convolution blocks, one fully
// connected classifier, softmax output.

struct ConvBlock {
    std::size_t filters = 0;
    bool operator==(const ConvBlock&) const = default;
};
struct FullyConnected {
    bool operator==(const FullyConnected&) const = default;
};
struct SoftmaxHead {
    bool operator==(const SoftmaxHead&) const = default;
};
using Block = std::variant<ConvBlock, FullyConnected, SoftmaxHead>;

struct PoolSpec {
    std::size_t size = 2;
    std::size_t stride = 2;
    bool operator==(const PoolSpec&) const = default;
};

enum class HeadKind { dense, pointwise };

const char* to_string(HeadKind h);
HeadKind head_kind_from_string(std::string_view s);

/// Architecture shorthand plus the hyperparameters the shorthand leaves out.
struct ModelSpec {
    std::vector<Block> blocks;
    std::size_t convs_per_block = 2;
    std::size_t kernel_length = 5;
    Padding padding = Padding::same;
    // Pooling after each convolution block. `block_pools`, when non-empty,
    // overrides `pool` per block (one entry per ConvBlock).
    std::optional<PoolSpec> pool = PoolSpec{};
    std::vector<std::optional<PoolSpec>> block_pools;
    HeadKind head = HeadKind::dense;
    std::size_t n_experts = 1;
    // One flag per convolution layer, then one for the head. Empty means every
    // convolution is conditional and a pointwise head is too.
    std::vector<bool> condconv_mask;
    RoutingActivation routing_activation = RoutingActivation::sigmoid;
    std::optional<double> pinned_routing;
    double routing_init = 1e-2;
    double dropout_rate = 0.5;
    double bn_momentum = 0.1;
    double bn_epsilon = 1e-5;

    bool operator==(const ModelSpec&) const = default;

    std::size_t conv_block_count() const;
    std::size_t conv_layer_count() const { return conv_block_count() * convs_per_block; }
    std::optional<PoolSpec> pool_for(std::size_t block) const;
    // Mask with defaults filled in; validated against the block list.
    std::vector<bool> resolved_mask() const;
};

ModelSpec parse_shorthand(std::string_view text);
std::string render_shorthand(const ModelSpec& spec);

void to_json(nlohmann::json& j, const ModelSpec& spec);
void from_json(const nlohmann::json& j, ModelSpec& spec);

// ---- built model -----------------------------------------------------------

enum class LayerKind {
    conv,
    condconv,
    batch_norm,
    relu,
    max_pool,
    dropout,
    dense,
    pointwise_conv,
    pointwise_condconv,
    softmax
};

const char* to_string(LayerKind k);

/// Static description of one layer: resolved shapes per example.
struct LayerInfo {
    std::string name;
    LayerKind kind = LayerKind::relu;
    std::size_t t_in = 0, c_in = 0, t_out = 0, c_out = 0;
    std::size_t kernel = 0;     // conv kernel length; pool size
    std::size_t stride = 0;
    std::size_t n_experts = 0;  // conditional layers only
    bool has_bias = false;
};

struct ForwardContext {
    Mode mode = Mode::eval;
    std::uint64_t dropout_seed = 0;
    // When set, receives (layer index, routing weights) for every conditional layer.
    std::vector<std::pair<std::size_t, Tensor>>* routing_capture = nullptr;
};

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

class Model {
public:
    // Logits [batch x classes] for input [batch x T x C].
    Tensor forward(const Tensor& x, ForwardContext& ctx);
    // Eval-mode class probabilities.
    Tensor predict_proba(const Tensor& x);

    // Learnable tensors in a fixed order with stable names.
    std::vector<NamedTensor> parameters() const;
    // BN running statistics, as (name, tensor) pairs: "<layer>.running_mean" ...
    std::vector<NamedTensor> buffers() const;
    void load_buffers(const std::vector<NamedTensor>& values);

    const std::vector<LayerInfo>& layers() const { return info_; }
    const ModelSpec& spec() const { return spec_; }
    std::size_t input_length() const { return input_len_; }
    std::size_t input_channels() const { return input_ch_; }
    std::size_t n_classes() const { return n_classes_; }
    std::vector<std::size_t> condconv_layer_indices() const;

private:
    friend Model build_model(const ModelSpec&, std::pair<std::size_t, std::size_t>, std::size_t,
                             std::uint64_t);

    struct StdConv {
        Tensor kernel;  // [K x C_in x C_out]
        Tensor bias;
        std::size_t stride = 1;
        Padding padding = Padding::same;
    };
    struct Pool {
        std::size_t size, stride;
    };
    struct Dense {
        Tensor W, b;
    };
    using Impl = std::variant<std::monostate, StdConv, CondConvLayer, BatchNormState, Pool, Dense>;

    ModelSpec spec_;
    std::size_t input_len_ = 0, input_ch_ = 0, n_classes_ = 0;
    std::vector<LayerInfo> info_;
    std::vector<Impl> impl_;
};

// Per conv block: convs_per_block x [Conv|CondConv -> BN -> ReLU], then the
// block's max-pool; then one dropout, the classifier (dense on the flattened
// features, or a 1x1 convolution averaged over time), and softmax.
// Initialization is seeded per layer so a layer's weights do not depend on
// which other layers are conditional.
Model build_model(const ModelSpec& spec, std::pair<std::size_t, std::size_t> input_shape,
                  std::size_t n_classes, std::uint64_t seed = 0);

}  // namespace condhar
