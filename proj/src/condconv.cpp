#include "condhar/condconv.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace condhar {

const char* to_string(RoutingActivation a) {
    switch (a) {
        case RoutingActivation::sigmoid: return "sigmoid";
        case RoutingActivation::tanh: return "tanh";
        case RoutingActivation::softmax: return "softmax";
        case RoutingActivation::leaky_relu: return "leaky_relu";
        case RoutingActivation::elu: return "elu";
        case RoutingActivation::relu: return "relu";
    }
    return "sigmoid";
}

RoutingActivation routing_activation_from_string(std::string_view s) {
    for (auto a : {RoutingActivation::sigmoid, RoutingActivation::tanh, RoutingActivation::softmax,
                   RoutingActivation::leaky_relu, RoutingActivation::elu, RoutingActivation::relu}) {
        if (s == to_string(a)) return a;
    }
    throw ConfigError("unknown routing activation '" + std::string(s) + "'");
}

CondConvLayer CondConvLayer::create(std::size_t n_experts, std::size_t kernel_length,
                                    std::size_t c_in, std::size_t c_out,
                                    std::mt19937_64& expert_rng, std::mt19937_64& routing_rng,
                                    bool with_bias, double routing_init) {
    if (n_experts == 0) throw ConfigError("CondConv needs at least one expert");
    if (kernel_length == 0 || c_in == 0 || c_out == 0) {
        throw ConfigError("CondConv kernel extents must be positive");
    }
    CondConvLayer layer;
    const double bound = std::sqrt(6.0 / static_cast<double>(kernel_length * c_in));
    std::vector<double> w(n_experts * kernel_length * c_in * c_out);
    for (auto& v : w) v = (2.0 * unit_uniform(expert_rng) - 1.0) * bound;
    layer.experts = Tensor({n_experts, kernel_length, c_in, c_out}, std::move(w), true);
    // Shrink with fan-in so the initial logits stay small for wide inputs.
    const double r_bound = routing_init / std::sqrt(static_cast<double>(c_in));
    std::vector<double> r(c_in * n_experts);
    for (auto& v : r) v = (2.0 * unit_uniform(routing_rng) - 1.0) * r_bound;
    layer.routing = Tensor({c_in, n_experts}, std::move(r), true);
    if (with_bias) layer.bias = Tensor::zeros({c_out}, true);
    return layer;
}

Tensor CondConvLayer::expert(std::size_t i) const {
    if (i >= n_experts()) throw DimensionError("expert index out of range");
    const std::size_t sz = kernel_length() * c_in() * c_out();
    const auto d = experts.data();
    return Tensor({kernel_length(), c_in(), c_out()},
                  std::vector<double>(d.begin() + i * sz, d.begin() + (i + 1) * sz));
}

Tensor route(const Tensor& x, const Tensor& R, RoutingActivation activation) {
    if (x.rank() != 3 || R.rank() != 2 || R.dim(0) != x.dim(2)) {
        throw DimensionError("route: input " + shape_str(x.shape()) +
                             " incompatible with routing matrix " + shape_str(R.shape()));
    }
    Tensor logits = matmul(mean_over_time(x), R);
    switch (activation) {
        case RoutingActivation::sigmoid: return sigmoid(logits);
        case RoutingActivation::tanh: return tanh(logits);
        case RoutingActivation::softmax: return softmax(logits);
        case RoutingActivation::leaky_relu: return leaky_relu(logits);
        case RoutingActivation::elu: return elu(logits);
        case RoutingActivation::relu: return relu(logits);
    }
    return sigmoid(logits);
}

Tensor routing_weights(const Tensor& x, const CondConvLayer& layer) {
    if (layer.pinned_routing) {
        if (x.rank() != 3) throw DimensionError("routing input must be [batch x T x C]");
        return Tensor::full({x.dim(0), layer.n_experts()}, *layer.pinned_routing);
    }
    if (layer.routing.dim(1) != layer.n_experts()) {
        throw DimensionError("routing matrix has " + std::to_string(layer.routing.dim(1)) +
                             " columns for " + std::to_string(layer.n_experts()) + " experts");
    }
    return route(x, layer.routing, layer.activation);
}

namespace {

void check_alpha(const Tensor& alpha, const Tensor& experts, std::size_t batch) {
    if (experts.rank() != 4) {
        throw ConfigError("experts must be stacked as [n x K x C_in x C_out], got " +
                          shape_str(experts.shape()));
    }
    if (alpha.rank() != 2 || alpha.dim(0) != batch || alpha.dim(1) != experts.dim(0)) {
        throw DimensionError("routing weights " + shape_str(alpha.shape()) + " do not match " +
                             std::to_string(batch) + " examples and " +
                             std::to_string(experts.dim(0)) + " experts");
    }
}

// kernel = sum_i a[i] * W_i, accumulated in expert order from zero.
void mix(const double* a, const double* W, std::size_t n, std::size_t sz, double* kernel) {
    std::fill(kernel, kernel + sz, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const double ai = a[i];
        const double* wi = W + i * sz;
        for (std::size_t j = 0; j < sz; ++j) kernel[j] += ai * wi[j];
    }
}

}  // namespace

Tensor combine_kernels(const Tensor& alpha, const Tensor& experts) {
    if (alpha.rank() != 2) throw DimensionError("combine_kernels: alpha must be [batch x n]");
    check_alpha(alpha, experts, alpha.dim(0));
    const std::size_t B = alpha.dim(0), n = experts.dim(0);
    const std::size_t sz = experts.size() / n;
    std::vector<double> out(B * sz);
    const auto A = alpha.data();
    const auto W = experts.data();
    for (std::size_t b = 0; b < B; ++b) mix(A.data() + b * n, W.data(), n, sz, out.data() + b * sz);
    auto an = alpha.node(), wn = experts.node();
    Shape shape{B, experts.dim(1), experts.dim(2), experts.dim(3)};
    return make_result("combine_kernels", std::move(shape), std::move(out), {alpha, experts},
                       [an, wn, B, n, sz](Node& self) {
                           const auto& G = self.grad;
                           if (an->requires_grad) {
                               auto& ga = an->grad_buffer();
                               for (std::size_t b = 0; b < B; ++b) {
                                   for (std::size_t i = 0; i < n; ++i) {
                                       double acc = 0.0;
                                       for (std::size_t j = 0; j < sz; ++j) {
                                           acc += G[b * sz + j] * wn->data[i * sz + j];
                                       }
                                       ga[b * n + i] += acc;
                                   }
                               }
                           }
                           if (wn->requires_grad) {
                               auto& gw = wn->grad_buffer();
                               for (std::size_t b = 0; b < B; ++b) {
                                   for (std::size_t i = 0; i < n; ++i) {
                                       const double a = an->data[b * n + i];
                                       for (std::size_t j = 0; j < sz; ++j) {
                                           gw[i * sz + j] += a * G[b * sz + j];
                                       }
                                   }
                               }
                           }
                       });
}

Tensor mixed_conv(const Tensor& x, const Tensor& alpha, const Tensor& experts, std::size_t stride,
                  Padding padding) {
    if (x.rank() != 3) {
        throw DimensionError("CondConv input must be [batch x T x C_in], got " + shape_str(x.shape()));
    }
    check_alpha(alpha, experts, x.dim(0));
    if (experts.dim(2) != x.dim(2)) {
        throw DimensionError("CondConv experts expect " + std::to_string(experts.dim(2)) +
                             " input channels, input has " + std::to_string(x.dim(2)));
    }
    const std::size_t B = x.dim(0), n = experts.dim(0), c_in = experts.dim(2),
                      c_out = experts.dim(3);
    const ConvGeometry geo = conv_geometry(x.dim(1), experts.dim(1), stride, padding);
    const std::size_t sz = geo.kernel * c_in * c_out;
    const std::size_t in_sz = geo.in_len * c_in, out_sz = geo.out_len * c_out;
    std::vector<double> out(B * out_sz);
    const double* X = x.data().data();
    const double* A = alpha.data().data();
    const double* W = experts.data().data();
    parallel_for(B, [&](std::size_t lo, std::size_t hi) {
        std::vector<double> kernel(sz);
        for (std::size_t b = lo; b < hi; ++b) {
            mix(A + b * n, W, n, sz, kernel.data());
            conv1d_forward(geo, c_in, c_out, X + b * in_sz, kernel.data(), out.data() + b * out_sz);
        }
    });
    auto xn = x.node(), an = alpha.node(), wn = experts.node();
    return make_result(
        "mixed_conv", {B, geo.out_len, c_out}, std::move(out), {x, alpha, experts},
        [xn, an, wn, geo, B, n, c_in, c_out, sz, in_sz, out_sz](Node& self) {
            double* dx = xn->requires_grad ? xn->grad_buffer().data() : nullptr;
            double* da = an->requires_grad ? an->grad_buffer().data() : nullptr;
            double* dw = wn->requires_grad ? wn->grad_buffer().data() : nullptr;
            const bool need_dk = da || dw;
            const std::size_t lanes = std::max<std::size_t>(1, num_threads());
            std::vector<double> kernels(lanes * sz), dks(need_dk ? lanes * sz : 0);
            for (std::size_t base = 0; base < B; base += lanes) {
                const std::size_t cnt = std::min(lanes, B - base);
                parallel_for(cnt, [&](std::size_t lo, std::size_t hi) {
                    for (std::size_t j = lo; j < hi; ++j) {
                        const std::size_t b = base + j;
                        double* kernel = kernels.data() + j * sz;
                        double* dk = need_dk ? dks.data() + j * sz : nullptr;
                        mix(an->data.data() + b * n, wn->data.data(), n, sz, kernel);
                        conv1d_backward(geo, c_in, c_out, xn->data.data() + b * in_sz, kernel,
                                        self.grad.data() + b * out_sz,
                                        dx ? dx + b * in_sz : nullptr, dk);
                        if (da) {
                            for (std::size_t i = 0; i < n; ++i) {
                                const double* wi = wn->data.data() + i * sz;
                                double acc = 0.0;
                                for (std::size_t k = 0; k < sz; ++k) acc += dk[k] * wi[k];
                                da[b * n + i] += acc;
                            }
                        }
                    }
                });
                if (dw) {
                    for (std::size_t j = 0; j < cnt; ++j) {
                        const std::size_t b = base + j;
                        const double* dk = dks.data() + j * sz;
                        for (std::size_t i = 0; i < n; ++i) {
                            const double a = an->data[b * n + i];
                            double* dwi = dw + i * sz;
                            for (std::size_t k = 0; k < sz; ++k) dwi[k] += a * dk[k];
                        }
                    }
                }
            }
        });
}

Tensor condconv_preactivation(const Tensor& x, const CondConvLayer& layer, Tensor* alpha_out) {
    Tensor alpha = routing_weights(x, layer);
    if (alpha_out) *alpha_out = alpha;
    Tensor y = mixed_conv(x, alpha, layer.experts, layer.stride, layer.padding);
    return layer.bias.defined() ? add_bias(y, layer.bias) : y;
}

Tensor condconv_forward(const Tensor& x, const CondConvLayer& layer) {
    return relu(condconv_preactivation(x, layer));
}

Tensor condconv_as_sum(const Tensor& x, const CondConvLayer& layer) {
    const Tensor alpha = routing_weights(x.detach(), layer).detach();
    check_alpha(alpha, layer.experts, x.dim(0));
    const std::size_t n = layer.n_experts();
    std::vector<double> acc;
    Shape shape;
    for (std::size_t i = 0; i < n; ++i) {
        const Tensor yi = conv_temporal(x.detach(), layer.expert(i), layer.stride, layer.padding);
        if (acc.empty()) {
            shape = yi.shape();
            acc.assign(yi.size(), 0.0);
        }
        const std::size_t per = yi.size() / shape[0];
        const auto Y = yi.data();
        for (std::size_t b = 0; b < shape[0]; ++b) {
            const double a = alpha.data()[b * n + i];
            for (std::size_t k = 0; k < per; ++k) acc[b * per + k] += a * Y[b * per + k];
        }
    }
    if (layer.bias.defined()) {
        const auto bias = layer.bias.data();
        for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += bias[k % bias.size()];
    }
    for (auto& v : acc) v = std::max(v, 0.0);
    return Tensor(std::move(shape), std::move(acc));
}

Tensor condconv_pointwise_head(const Tensor& x, const CondConvLayer& layer, Tensor* alpha_out) {
    if (layer.kernel_length() != 1) {
        throw ConfigError("pointwise CondConv head needs kernel length 1, got " +
                          std::to_string(layer.kernel_length()));
    }
    return mean_over_time(condconv_preactivation(x, layer, alpha_out));
}

}  // namespace condhar
