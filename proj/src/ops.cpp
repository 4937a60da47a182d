#include "condhar/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace condhar {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
    }
}

std::vector<double> copy_of(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul: cannot multiply " + shape_str(a.shape()) + " by " +
                             shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), p = b.dim(1);
    const auto A = a.data();
    const auto B = b.data();
    std::vector<double> out(m * p, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        double* row = out.data() + i * p;
        for (std::size_t j = 0; j < k; ++j) {
            const double aij = A[i * k + j];
            const double* brow = B.data() + j * p;
            for (std::size_t c = 0; c < p; ++c) row[c] += aij * brow[c];
        }
    }
    auto an = a.node();
    auto bn = b.node();
    return make_result("matmul", {m, p}, std::move(out), {a, b}, [an, bn, m, k, p](Node& self) {
        const auto& G = self.grad;
        if (an->requires_grad) {
            auto& ga = an->grad_buffer();
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < k; ++j) {
                    double acc = 0.0;
                    const double* brow = bn->data.data() + j * p;
                    const double* grow = G.data() + i * p;
                    for (std::size_t c = 0; c < p; ++c) acc += grow[c] * brow[c];
                    ga[i * k + j] += acc;
                }
            }
        }
        if (bn->requires_grad) {
            auto& gb = bn->grad_buffer();
            for (std::size_t i = 0; i < m; ++i) {
                const double* grow = G.data() + i * p;
                for (std::size_t j = 0; j < k; ++j) {
                    const double aij = an->data[i * k + j];
                    double* gbrow = gb.data() + j * p;
                    for (std::size_t c = 0; c < p; ++c) gbrow[c] += aij * grow[c];
                }
            }
        }
    });
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    auto out = copy_of(a);
    const auto B = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i];
    auto an = a.node(), bn = b.node();
    return make_result("add", a.shape(), std::move(out), {a, b}, [an, bn](Node& self) {
        for (auto* p : {an.get(), bn.get()}) {
            if (!p->requires_grad) continue;
            auto& g = p->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    auto out = copy_of(a);
    const auto B = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= B[i];
    auto an = a.node(), bn = b.node();
    return make_result("sub", a.shape(), std::move(out), {a, b}, [an, bn](Node& self) {
        if (an->requires_grad) {
            auto& g = an->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            auto& g = bn->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    auto out = copy_of(a);
    const auto B = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= B[i];
    auto an = a.node(), bn = b.node();
    return make_result("mul", a.shape(), std::move(out), {a, b}, [an, bn](Node& self) {
        if (an->requires_grad) {
            auto& g = an->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bn->data[i];
        }
        if (bn->requires_grad) {
            auto& g = bn->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * an->data[i];
        }
    });
}

Tensor scale(const Tensor& a, double factor) {
    auto out = copy_of(a);
    for (auto& v : out) v *= factor;
    auto an = a.node();
    return make_result("scale", a.shape(), std::move(out), {a}, [an, factor](Node& self) {
        auto& g = an->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
    });
}

Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    auto an = a.node();
    return make_result("sum", {1}, {s}, {a}, [an](Node& self) {
        auto& g = an->grad_buffer();
        for (auto& v : g) v += self.grad[0];
    });
}

Tensor mean(const Tensor& a) {
    if (a.size() == 0) throw DimensionError("mean of empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (numel(shape) != a.size()) {
        throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                             shape_str(shape));
    }
    auto an = a.node();
    return make_result("reshape", std::move(shape), copy_of(a), {a}, [an](Node& self) {
        auto& g = an->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

Tensor add_bias(const Tensor& a, const Tensor& bias) {
    if (a.rank() == 0 || bias.rank() != 1 || bias.dim(0) != a.shape().back()) {
        throw DimensionError("add_bias: bias " + shape_str(bias.shape()) +
                             " does not match trailing axis of " + shape_str(a.shape()));
    }
    const std::size_t width = bias.dim(0);
    auto out = copy_of(a);
    const auto B = bias.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i % width];
    auto an = a.node(), bn = bias.node();
    return make_result("add_bias", a.shape(), std::move(out), {a, bias},
                       [an, bn, width](Node& self) {
                           if (an->requires_grad) {
                               auto& g = an->grad_buffer();
                               for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                           }
                           if (bn->requires_grad) {
                               auto& g = bn->grad_buffer();
                               for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                   g[i % width] += self.grad[i];
                               }
                           }
                       });
}

Tensor mean_over_time(const Tensor& x) {
    if (x.rank() != 3) {
        throw DimensionError("mean_over_time expects [batch x T x C], got " +
                             shape_str(x.shape()));
    }
    const std::size_t B = x.dim(0), T = x.dim(1), C = x.dim(2);
    const auto X = x.data();
    std::vector<double> out(B * C, 0.0);
    const double inv = 1.0 / static_cast<double>(T);
    for (std::size_t b = 0; b < B; ++b) {
        double* o = out.data() + b * C;
        for (std::size_t t = 0; t < T; ++t) {
            const double* row = X.data() + (b * T + t) * C;
            for (std::size_t c = 0; c < C; ++c) o[c] += row[c];
        }
        for (std::size_t c = 0; c < C; ++c) o[c] *= inv;
    }
    auto xn = x.node();
    return make_result("mean_over_time", {B, C}, std::move(out), {x},
                       [xn, B, T, C, inv](Node& self) {
                           auto& g = xn->grad_buffer();
                           for (std::size_t b = 0; b < B; ++b) {
                               for (std::size_t t = 0; t < T; ++t) {
                                   double* row = g.data() + (b * T + t) * C;
                                   for (std::size_t c = 0; c < C; ++c) {
                                       row[c] += self.grad[b * C + c] * inv;
                                   }
                               }
                           }
                       });
}

const char* to_string(Padding p) { return p == Padding::same ? "same" : "valid"; }

Padding padding_from_string(std::string_view s) {
    if (s == "same") return Padding::same;
    if (s == "valid") return Padding::valid;
    throw ConfigError("unknown padding mode '" + std::string(s) + "'");
}

ConvGeometry conv_geometry(std::size_t in_len, std::size_t kernel, std::size_t stride,
                           Padding padding) {
    if (stride == 0) throw ConfigError("convolution stride must be >= 1");
    if (kernel == 0) throw ConfigError("convolution kernel length must be >= 1");
    ConvGeometry g;
    g.in_len = in_len;
    g.kernel = kernel;
    g.stride = stride;
    if (padding == Padding::same) {
        const std::size_t out = (in_len + stride - 1) / stride;
        const std::size_t needed = (out == 0 ? 0 : (out - 1) * stride) + kernel;
        g.pad_total = needed > in_len ? needed - in_len : 0;
        g.pad_left = g.pad_total / 2;
    }
    if (kernel > in_len + g.pad_total) {
        throw ConfigError("kernel length " + std::to_string(kernel) +
                          " exceeds padded input length " + std::to_string(in_len + g.pad_total));
    }
    g.out_len = (in_len + g.pad_total - kernel) / stride + 1;
    return g;
}

void conv1d_forward(const ConvGeometry& g, std::size_t c_in, std::size_t c_out,
                    const double* x, const double* w, double* y) {
    std::fill(y, y + g.out_len * c_out, 0.0);
    for (std::size_t t = 0; t < g.out_len; ++t) {
        double* yrow = y + t * c_out;
        for (std::size_t k = 0; k < g.kernel; ++k) {
            const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t * g.stride + k) -
                                       static_cast<std::ptrdiff_t>(g.pad_left);
            if (src < 0 || src >= static_cast<std::ptrdiff_t>(g.in_len)) continue;
            const double* xrow = x + static_cast<std::size_t>(src) * c_in;
            const double* wk = w + k * c_in * c_out;
            for (std::size_t ci = 0; ci < c_in; ++ci) {
                const double xv = xrow[ci];
                const double* wrow = wk + ci * c_out;
                for (std::size_t co = 0; co < c_out; ++co) yrow[co] += xv * wrow[co];
            }
        }
    }
}

void conv1d_backward(const ConvGeometry& g, std::size_t c_in, std::size_t c_out,
                     const double* x, const double* w, const double* dy, double* dx,
                     double* dw) {
    if (dw) std::fill(dw, dw + g.kernel * c_in * c_out, 0.0);
    for (std::size_t t = 0; t < g.out_len; ++t) {
        const double* dyrow = dy + t * c_out;
        for (std::size_t k = 0; k < g.kernel; ++k) {
            const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t * g.stride + k) -
                                       static_cast<std::ptrdiff_t>(g.pad_left);
            if (src < 0 || src >= static_cast<std::ptrdiff_t>(g.in_len)) continue;
            const std::size_t s = static_cast<std::size_t>(src);
            const double* wk = w + k * c_in * c_out;
            if (dx) {
                double* dxrow = dx + s * c_in;
                for (std::size_t ci = 0; ci < c_in; ++ci) {
                    const double* wrow = wk + ci * c_out;
                    double acc = 0.0;
                    for (std::size_t co = 0; co < c_out; ++co) acc += dyrow[co] * wrow[co];
                    dxrow[ci] += acc;
                }
            }
            if (dw) {
                const double* xrow = x + s * c_in;
                double* dwk = dw + k * c_in * c_out;
                for (std::size_t ci = 0; ci < c_in; ++ci) {
                    const double xv = xrow[ci];
                    double* dwrow = dwk + ci * c_out;
                    for (std::size_t co = 0; co < c_out; ++co) dwrow[co] += xv * dyrow[co];
                }
            }
        }
    }
}

namespace {

struct ConvDims {
    std::size_t batch, c_in, c_out;
    ConvGeometry geo;
};

ConvDims check_conv(const Tensor& input, const Shape& kshape, bool per_example,
                    std::size_t stride, Padding padding) {
    if (input.rank() != 3) {
        throw DimensionError("conv_temporal: input must be [batch x T x C_in], got " +
                             shape_str(input.shape()));
    }
    const std::size_t lead = per_example ? 1 : 0;
    if (kshape.size() != 3 + lead || kshape[lead + 1] != input.dim(2) ||
        (per_example && kshape[0] != input.dim(0))) {
        throw DimensionError("conv_temporal: kernel " + shape_str(kshape) +
                             " incompatible with input " + shape_str(input.shape()));
    }
    ConvDims d;
    d.batch = input.dim(0);
    d.c_in = input.dim(2);
    d.c_out = kshape[lead + 2];
    d.geo = conv_geometry(input.dim(1), kshape[lead], stride, padding);
    return d;
}

}  // namespace

Tensor conv_temporal(const Tensor& input, const Tensor& kernel, std::size_t stride,
                     Padding padding) {
    const ConvDims d = check_conv(input, kernel.shape(), false, stride, padding);
    const std::size_t in_sz = d.geo.in_len * d.c_in;
    const std::size_t out_sz = d.geo.out_len * d.c_out;
    std::vector<double> out(d.batch * out_sz);
    const double* X = input.data().data();
    const double* W = kernel.data().data();
    parallel_for(d.batch, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t b = lo; b < hi; ++b) {
            conv1d_forward(d.geo, d.c_in, d.c_out, X + b * in_sz, W, out.data() + b * out_sz);
        }
    });
    auto xn = input.node(), wn = kernel.node();
    return make_result(
        "conv_temporal", {d.batch, d.geo.out_len, d.c_out}, std::move(out), {input, kernel},
        [xn, wn, d, in_sz, out_sz](Node& self) {
            const std::size_t wsz = wn->data.size();
            double* dx = xn->requires_grad ? xn->grad_buffer().data() : nullptr;
            double* dw = wn->requires_grad ? wn->grad_buffer().data() : nullptr;
            // Per-example kernel gradients are summed in ascending example order
            // whatever the thread count.
            const std::size_t lanes = std::max<std::size_t>(1, num_threads());
            std::vector<double> scratch(dw ? lanes * wsz : 0);
            for (std::size_t base = 0; base < d.batch; base += lanes) {
                const std::size_t n = std::min(lanes, d.batch - base);
                parallel_for(n, [&](std::size_t lo, std::size_t hi) {
                    for (std::size_t j = lo; j < hi; ++j) {
                        const std::size_t b = base + j;
                        conv1d_backward(d.geo, d.c_in, d.c_out, xn->data.data() + b * in_sz,
                                        wn->data.data(), self.grad.data() + b * out_sz,
                                        dx ? dx + b * in_sz : nullptr,
                                        dw ? scratch.data() + j * wsz : nullptr);
                    }
                });
                if (dw) {
                    for (std::size_t j = 0; j < n; ++j) {
                        const double* s = scratch.data() + j * wsz;
                        for (std::size_t i = 0; i < wsz; ++i) dw[i] += s[i];
                    }
                }
            }
        });
}

Tensor conv_temporal_per_example(const Tensor& input, const Tensor& kernels, std::size_t stride,
                                 Padding padding) {
    const ConvDims d = check_conv(input, kernels.shape(), true, stride, padding);
    const std::size_t in_sz = d.geo.in_len * d.c_in;
    const std::size_t out_sz = d.geo.out_len * d.c_out;
    const std::size_t wsz = d.geo.kernel * d.c_in * d.c_out;
    std::vector<double> out(d.batch * out_sz);
    const double* X = input.data().data();
    const double* W = kernels.data().data();
    parallel_for(d.batch, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t b = lo; b < hi; ++b) {
            conv1d_forward(d.geo, d.c_in, d.c_out, X + b * in_sz, W + b * wsz,
                           out.data() + b * out_sz);
        }
    });
    auto xn = input.node(), wn = kernels.node();
    return make_result(
        "conv_temporal_per_example", {d.batch, d.geo.out_len, d.c_out}, std::move(out),
        {input, kernels}, [xn, wn, d, in_sz, out_sz, wsz](Node& self) {
            double* dx = xn->requires_grad ? xn->grad_buffer().data() : nullptr;
            double* dw = wn->requires_grad ? wn->grad_buffer().data() : nullptr;
            parallel_for(d.batch, [&](std::size_t lo, std::size_t hi) {
                std::vector<double> tmp(dw ? wsz : 0);
                for (std::size_t b = lo; b < hi; ++b) {
                    conv1d_backward(d.geo, d.c_in, d.c_out, xn->data.data() + b * in_sz,
                                    wn->data.data() + b * wsz, self.grad.data() + b * out_sz,
                                    dx ? dx + b * in_sz : nullptr, dw ? tmp.data() : nullptr);
                    if (dw) {
                        double* dst = dw + b * wsz;
                        for (std::size_t i = 0; i < wsz; ++i) dst[i] += tmp[i];
                    }
                }
            });
        });
}

}  // namespace condhar
