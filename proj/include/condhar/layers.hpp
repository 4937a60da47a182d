#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "condhar/ops.hpp"
#include "condhar/tensor.hpp"

namespace condhar {

enum class Mode { train, eval };

// ---- activations -----------------------------------------------------------

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor leaky_relu(const Tensor& x, double slope = 0.01);
Tensor elu(const Tensor& x, double alpha = 1.0);

// Row-wise softmax of a [rows x classes] tensor (max-subtracted).
Tensor softmax(const Tensor& x);

// ---- batch normalization ---------------------------------------------------

/// Per-channel normalization over the batch and temporal axes of
/// [batch x T x C] activations.
struct BatchNormState {
    Tensor gamma;  // [C], learnable
    Tensor beta;   // [C], learnable
    std::vector<double> running_mean;
    std::vector<double> running_var;  // unbiased batch variance, EMA-smoothed
    double momentum = 0.1;
    double epsilon = 1e-5;

    static BatchNormState create(std::size_t channels, double momentum = 0.1,
                                 double epsilon = 1e-5);
    std::size_t channels() const { return running_mean.size(); }
};

// Train mode standardizes by the batch statistics and updates the running
// statistics; eval mode uses only the running statistics.
Tensor batch_norm(const Tensor& x, BatchNormState& state, Mode mode);

// ---- pooling / dense / dropout ---------------------------------------------

// Per-channel temporal max. T_out = floor((T - size) / stride) + 1; ties pick
// the earliest sample.
Tensor max_pool_temporal(const Tensor& x, std::size_t size, std::size_t stride);

// x [batch x d] * W [d x u] + b [u]
Tensor dense(const Tensor& x, const Tensor& W, const Tensor& b);

struct DropoutConfig {
    double rate = 0.5;
};

// Inverted dropout: train mode zeroes each element with probability `rate`
// and scales survivors by 1/(1-rate); eval mode returns `x` itself.
Tensor dropout(const Tensor& x, const DropoutConfig& cfg, Mode mode, std::uint64_t seed);

// ---- losses ----------------------------------------------------------------

// mean_i -log(probs[i, labels[i]]) for row-stochastic `probs`.
Tensor cross_entropy_loss(const Tensor& probs, std::span<const int> labels);

// Fused softmax + cross-entropy on raw logits; gradient (softmax - onehot)/batch.
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);

// Uniform double in [0, 1) from the top 53 bits of a 64-bit draw.
template <class Rng>
double unit_uniform(Rng& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

}  // namespace condhar
