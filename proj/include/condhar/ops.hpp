#pragma once

#include <cstddef>
#include <span>
#include <string_view>

#include "condhar/tensor.hpp"

namespace condhar {

// ---- algebra ---------------------------------------------------------------

// [m x k] * [k x p] -> [m x p]
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);  // identical shapes
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor scale(const Tensor& a, double factor);
Tensor sum(const Tensor& a);   // -> [1]
Tensor mean(const Tensor& a);  // -> [1]
Tensor reshape(const Tensor& a, Shape shape);

// Adds a vector of length shape.back() to every row of `a`.
Tensor add_bias(const Tensor& a, const Tensor& bias);

// [batch x T x C] -> [batch x C], mean over the temporal axis.
Tensor mean_over_time(const Tensor& x);

// ---- temporal convolution --------------------------------------------------

enum class Padding { valid, same };

const char* to_string(Padding p);
Padding padding_from_string(std::string_view s);

struct ConvGeometry {
    std::size_t in_len = 0;
    std::size_t kernel = 0;
    std::size_t stride = 1;
    std::size_t pad_left = 0;
    std::size_t pad_total = 0;
    std::size_t out_len = 0;
};

// T_out = floor((T + pad_total - K) / stride) + 1. "same" pads so that
// T_out = ceil(T / stride), splitting the padding with the extra sample on the
// right. Throws ConfigError when the kernel is longer than the padded input.
ConvGeometry conv_geometry(std::size_t in_len, std::size_t kernel, std::size_t stride,
                           Padding padding);

// Single-example kernels shared by every convolution in the library, so the
// standard and conditional paths accumulate in the same order.
//   x: [T x C_in], w: [K x C_in x C_out], y: [T_out x C_out] (overwritten)
void conv1d_forward(const ConvGeometry& g, std::size_t c_in, std::size_t c_out,
                    const double* x, const double* w, double* y);
// dx accumulates; dw is overwritten with this example's kernel gradient.
void conv1d_backward(const ConvGeometry& g, std::size_t c_in, std::size_t c_out,
                     const double* x, const double* w, const double* dy, double* dx,
                     double* dw);

/// Cross-correlation along time (no kernel flip):
///   out[b, t, o] = sum_{k, c} x[b, t*stride + k - pad_left, c] * kernel[k, c, o]
/// with zero padding outside the input.
///   input:  [batch x T x C_in]
///   kernel: [K x C_in x C_out]
Tensor conv_temporal(const Tensor& input, const Tensor& kernel, std::size_t stride = 1,
                     Padding padding = Padding::same);

// Same, with a distinct kernel per example: kernels [batch x K x C_in x C_out].
Tensor conv_temporal_per_example(const Tensor& input, const Tensor& kernels,
                                 std::size_t stride = 1, Padding padding = Padding::same);

}  // namespace condhar
