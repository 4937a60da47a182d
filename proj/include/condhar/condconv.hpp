#pragma once

#include <cstddef>
#include <optional>
#include <random>
#include <string_view>

#include "condhar/layers.hpp"
#include "condhar/ops.hpp"
#include "condhar/tensor.hpp"

namespace condhar {

// Squashing applied to the routing logits. Only sigmoid is used outside the
// activation-comparison experiments.
enum class RoutingActivation { sigmoid, tanh, softmax, leaky_relu, elu, relu };

const char* to_string(RoutingActivation a);
RoutingActivation routing_activation_from_string(std::string_view s);

/// Conditionally parameterized temporal convolution.
///
/// Holds n expert kernels of identical shape, stacked as [n x K x C_in x C_out],
/// and a routing projection R of shape [C_in x n]. For an example x the layer
/// computes routing weights alpha = S(mean_t(x) * R), mixes the experts into a
/// single kernel sum_i alpha_i * W_i, and convolves once with it.
struct CondConvLayer {
    Tensor experts;  // [n x K x C_in x C_out]
    Tensor routing;  // [C_in x n]
    Tensor bias;     // [C_out]; undefined when the layer has no bias
    std::size_t stride = 1;
    Padding padding = Padding::same;
    RoutingActivation activation = RoutingActivation::sigmoid;
    // When set, every routing weight is this constant and R is bypassed.
    std::optional<double> pinned_routing;

    // Experts use the fan-in scaled uniform initializer of a standard
    // convolution (bound sqrt(6 / (K * C_in))); R is drawn from
    // U(-b, b) with b = routing_init / sqrt(C_in) so initial weights sit near S(0).
    static CondConvLayer create(std::size_t n_experts, std::size_t kernel_length,
                                std::size_t c_in, std::size_t c_out, std::mt19937_64& expert_rng,
                                std::mt19937_64& routing_rng, bool with_bias = true,
                                double routing_init = 1e-2);

    std::size_t n_experts() const { return experts.dim(0); }
    std::size_t kernel_length() const { return experts.dim(1); }
    std::size_t c_in() const { return experts.dim(2); }
    std::size_t c_out() const { return experts.dim(3); }
    Tensor expert(std::size_t i) const;  // detached [K x C_in x C_out] copy
};

// alpha = S(GlobalAveragePool_time(x) * R): [batch x T x C_in], [C_in x n] -> [batch x n]
Tensor route(const Tensor& x, const Tensor& R,
             RoutingActivation activation = RoutingActivation::sigmoid);

// Routing weights the layer would use for x (pinned constant or route()).
Tensor routing_weights(const Tensor& x, const CondConvLayer& layer);

// kernel[b] = sum_i alpha[b, i] * experts[i]  ->  [batch x K x C_in x C_out]
Tensor combine_kernels(const Tensor& alpha, const Tensor& experts);

// Combine-then-convolve without materializing all per-example kernels at
// once: one convolution per example with that example's mixed kernel.
// Numerically identical to conv_temporal_per_example(x, combine_kernels(...)).
Tensor mixed_conv(const Tensor& x, const Tensor& alpha, const Tensor& experts,
                  std::size_t stride = 1, Padding padding = Padding::same);

// Mixed convolution plus bias, before the nonlinearity. `alpha_out`, when
// given, receives the routing weights used.
Tensor condconv_preactivation(const Tensor& x, const CondConvLayer& layer,
                              Tensor* alpha_out = nullptr);

// relu((sum_i alpha_i W_i) * x + bias)
Tensor condconv_forward(const Tensor& x, const CondConvLayer& layer);

// relu(sum_i alpha_i (W_i * x) + bias). n convolutions per example; reference
// only, not differentiable.
Tensor condconv_as_sum(const Tensor& x, const CondConvLayer& layer);

// 1x1 conditional convolution followed by a mean over the remaining time axis:
// [batch x T x C] -> [batch x classes] logits. Requires K == 1.
Tensor condconv_pointwise_head(const Tensor& x, const CondConvLayer& layer,
                               Tensor* alpha_out = nullptr);

}  // namespace condhar
