#include "condhar/layers.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

namespace condhar {

namespace {

template <class Fwd, class Deriv>
Tensor unary(const char* name, const Tensor& x, Fwd fwd, Deriv deriv) {
    std::vector<double> out(x.size());
    const auto X = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(X[i]);
    auto xn = x.node();
    // deriv(x, y) gives dy/dx from the input and the output value.
    return make_result(name, x.shape(), out, {x}, [xn, out, deriv](Node& self) {
        auto& g = xn->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * deriv(xn->data[i], out[i]);
    });
}

}  // namespace

Tensor relu(const Tensor& x) {
    return unary(
        "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
        [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
    return unary(
        "sigmoid", x,
        [](double v) {
            if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
            const double e = std::exp(v);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& x) {
    return unary(
        "tanh", x, [](double v) { return std::tanh(v); },
        [](double, double y) { return 1.0 - y * y; });
}

Tensor leaky_relu(const Tensor& x, double slope) {
    return unary(
        "leaky_relu", x, [slope](double v) { return v > 0.0 ? v : slope * v; },
        [slope](double v, double) { return v > 0.0 ? 1.0 : slope; });
}

Tensor elu(const Tensor& x, double alpha) {
    return unary(
        "elu", x, [alpha](double v) { return v > 0.0 ? v : alpha * std::expm1(v); },
        [alpha](double v, double y) { return v > 0.0 ? 1.0 : y + alpha; });
}

Tensor softmax(const Tensor& x) {
    if (x.rank() != 2) throw DimensionError("softmax expects a 2-D tensor, got " + shape_str(x.shape()));
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    const auto X = x.data();
    std::vector<double> out(x.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = X.data() + r * cols;
        double* o = out.data() + r * cols;
        const double mx = *std::max_element(in, in + cols);
        double z = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            o[c] = std::exp(in[c] - mx);
            z += o[c];
        }
        for (std::size_t c = 0; c < cols; ++c) o[c] /= z;
    }
    auto xn = x.node();
    return make_result("softmax", x.shape(), out, {x}, [xn, out, rows, cols](Node& self) {
        auto& g = xn->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* y = out.data() + r * cols;
            const double* gy = self.grad.data() + r * cols;
            double dot = 0.0;
            for (std::size_t c = 0; c < cols; ++c) dot += gy[c] * y[c];
            for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += y[c] * (gy[c] - dot);
        }
    });
}

BatchNormState BatchNormState::create(std::size_t channels, double momentum, double epsilon) {
    if (!(momentum > 0.0 && momentum < 1.0)) throw ConfigError("batch norm momentum must lie in (0,1)");
    if (!(epsilon > 0.0)) throw ConfigError("batch norm epsilon must be positive");
    BatchNormState s;
    s.gamma = Tensor::full({channels}, 1.0, true);
    s.beta = Tensor::zeros({channels}, true);
    s.running_mean.assign(channels, 0.0);
    s.running_var.assign(channels, 1.0);
    s.momentum = momentum;
    s.epsilon = epsilon;
    return s;
}

Tensor batch_norm(const Tensor& x, BatchNormState& state, Mode mode) {
    if (x.rank() != 3 || x.dim(2) != state.channels()) {
        throw DimensionError("batch_norm: input " + shape_str(x.shape()) + " vs " +
                             std::to_string(state.channels()) + " channels");
    }
    const std::size_t C = x.dim(2);
    const std::size_t N = x.dim(0) * x.dim(1);
    const auto X = x.data();
    std::vector<double> mu(C, 0.0), var(C, 0.0);
    if (mode == Mode::train) {
        if (N < 2) throw DataError("batch_norm: degenerate batch (batch x T < 2) in train mode");
        for (std::size_t i = 0; i < N; ++i)
            for (std::size_t c = 0; c < C; ++c) mu[c] += X[i * C + c];
        for (auto& m : mu) m /= static_cast<double>(N);
        for (std::size_t i = 0; i < N; ++i) {
            for (std::size_t c = 0; c < C; ++c) {
                const double d = X[i * C + c] - mu[c];
                var[c] += d * d;
            }
        }
        for (std::size_t c = 0; c < C; ++c) {
            const double unbiased = var[c] / static_cast<double>(N - 1);
            var[c] /= static_cast<double>(N);
            state.running_mean[c] =
                (1.0 - state.momentum) * state.running_mean[c] + state.momentum * mu[c];
            state.running_var[c] =
                (1.0 - state.momentum) * state.running_var[c] + state.momentum * unbiased;
        }
    } else {
        mu = state.running_mean;
        var = state.running_var;
    }
    std::vector<double> inv_std(C);
    for (std::size_t c = 0; c < C; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + state.epsilon);

    const auto G = state.gamma.data();
    const auto Bt = state.beta.data();
    std::vector<double> xhat(x.size()), out(x.size());
    for (std::size_t i = 0; i < N; ++i) {
        for (std::size_t c = 0; c < C; ++c) {
            const std::size_t k = i * C + c;
            xhat[k] = (X[k] - mu[c]) * inv_std[c];
            out[k] = G[c] * xhat[k] + Bt[c];
        }
    }
    auto xn = x.node(), gn = state.gamma.node(), bn = state.beta.node();
    const bool batch_stats = mode == Mode::train;
    return make_result(
        "batch_norm", x.shape(), std::move(out), {x, state.gamma, state.beta},
        [xn, gn, bn, xhat = std::move(xhat), inv_std, N, C, batch_stats](Node& self) {
            const auto& dy = self.grad;
            std::vector<double> sum_dy(C, 0.0), sum_dy_xhat(C, 0.0);
            for (std::size_t i = 0; i < N; ++i) {
                for (std::size_t c = 0; c < C; ++c) {
                    sum_dy[c] += dy[i * C + c];
                    sum_dy_xhat[c] += dy[i * C + c] * xhat[i * C + c];
                }
            }
            if (gn->requires_grad) {
                auto& g = gn->grad_buffer();
                for (std::size_t c = 0; c < C; ++c) g[c] += sum_dy_xhat[c];
            }
            if (bn->requires_grad) {
                auto& g = bn->grad_buffer();
                for (std::size_t c = 0; c < C; ++c) g[c] += sum_dy[c];
            }
            if (xn->requires_grad) {
                auto& g = xn->grad_buffer();
                const double invN = 1.0 / static_cast<double>(N);
                for (std::size_t i = 0; i < N; ++i) {
                    for (std::size_t c = 0; c < C; ++c) {
                        const std::size_t k = i * C + c;
                        const double gs = gn->data[c] * inv_std[c];
                        if (batch_stats) {
                            g[k] += gs * (dy[k] - invN * sum_dy[c] - xhat[k] * invN * sum_dy_xhat[c]);
                        } else {
                            g[k] += gs * dy[k];
                        }
                    }
                }
            }
        });
}

Tensor max_pool_temporal(const Tensor& x, std::size_t size, std::size_t stride) {
    if (x.rank() != 3) throw DimensionError("max_pool_temporal expects [batch x T x C], got " + shape_str(x.shape()));
    if (size == 0 || stride == 0) throw ConfigError("pool size and stride must be >= 1");
    const std::size_t B = x.dim(0), T = x.dim(1), C = x.dim(2);
    if (size > T) {
        throw ConfigError("pool size " + std::to_string(size) + " exceeds temporal length " +
                          std::to_string(T));
    }
    const std::size_t To = (T - size) / stride + 1;
    const auto X = x.data();
    std::vector<double> out(B * To * C);
    std::vector<std::size_t> arg(out.size());
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t t = 0; t < To; ++t) {
            for (std::size_t c = 0; c < C; ++c) {
                std::size_t best = (b * T + t * stride) * C + c;
                for (std::size_t k = 1; k < size; ++k) {
                    const std::size_t idx = (b * T + t * stride + k) * C + c;
                    if (X[idx] > X[best]) best = idx;
                }
                const std::size_t o = (b * To + t) * C + c;
                out[o] = X[best];
                arg[o] = best;
            }
        }
    }
    auto xn = x.node();
    return make_result("max_pool_temporal", {B, To, C}, std::move(out), {x},
                       [xn, arg = std::move(arg)](Node& self) {
                           auto& g = xn->grad_buffer();
                           for (std::size_t o = 0; o < arg.size(); ++o) g[arg[o]] += self.grad[o];
                       });
}

Tensor dense(const Tensor& x, const Tensor& W, const Tensor& b) {
    if (x.rank() != 2 || W.rank() != 2 || b.rank() != 1 || x.dim(1) != W.dim(0) ||
        b.dim(0) != W.dim(1)) {
        throw DimensionError("dense: x " + shape_str(x.shape()) + ", W " + shape_str(W.shape()) +
                             ", b " + shape_str(b.shape()) + " do not agree");
    }
    return add_bias(matmul(x, W), b);
}

Tensor dropout(const Tensor& x, const DropoutConfig& cfg, Mode mode, std::uint64_t seed) {
    if (!(cfg.rate >= 0.0 && cfg.rate < 1.0)) {
        throw ConfigError("dropout rate must lie in [0, 1), got " + std::to_string(cfg.rate));
    }
    if (mode == Mode::eval || cfg.rate == 0.0) return x;
    std::mt19937_64 rng(seed);
    const double keep_scale = 1.0 / (1.0 - cfg.rate);
    std::vector<double> mask(x.size());
    for (auto& m : mask) m = unit_uniform(rng) < cfg.rate ? 0.0 : keep_scale;
    std::vector<double> out(x.data().begin(), x.data().end());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
    auto xn = x.node();
    return make_result("dropout", x.shape(), std::move(out), {x},
                       [xn, mask = std::move(mask)](Node& self) {
                           auto& g = xn->grad_buffer();
                           for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * mask[i];
                       });
}

namespace {

void check_labels(const Tensor& t, std::span<const int> labels, const char* op) {
    if (t.rank() != 2) throw DimensionError(std::string(op) + " expects [batch x classes]");
    if (labels.size() != t.dim(0)) {
        throw DimensionError(std::string(op) + ": " + std::to_string(labels.size()) +
                             " labels for batch of " + std::to_string(t.dim(0)));
    }
    for (int l : labels) {
        if (l < 0 || static_cast<std::size_t>(l) >= t.dim(1)) {
            throw DataError(std::string(op) + ": label " + std::to_string(l) +
                            " outside [0, " + std::to_string(t.dim(1)) + ")");
        }
    }
}

}  // namespace

Tensor cross_entropy_loss(const Tensor& probs, std::span<const int> labels) {
    check_labels(probs, labels, "cross_entropy_loss");
    const std::size_t B = probs.dim(0), K = probs.dim(1);
    const auto P = probs.data();
    double loss = 0.0;
    for (std::size_t i = 0; i < B; ++i) loss -= std::log(P[i * K + labels[i]]);
    loss /= static_cast<double>(B);
    auto pn = probs.node();
    std::vector<int> lab(labels.begin(), labels.end());
    return make_result("cross_entropy", {1}, {loss}, {probs}, [pn, lab, B, K](Node& self) {
        auto& g = pn->grad_buffer();
        for (std::size_t i = 0; i < B; ++i) {
            const std::size_t k = i * K + lab[i];
            g[k] -= self.grad[0] / (static_cast<double>(B) * pn->data[k]);
        }
    });
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
    check_labels(logits, labels, "softmax_cross_entropy");
    const std::size_t B = logits.dim(0), K = logits.dim(1);
    const auto Z = logits.data();
    std::vector<double> probs(B * K);
    double loss = 0.0;
    for (std::size_t i = 0; i < B; ++i) {
        const double* z = Z.data() + i * K;
        double* p = probs.data() + i * K;
        const double mx = *std::max_element(z, z + K);
        double s = 0.0;
        for (std::size_t c = 0; c < K; ++c) {
            p[c] = std::exp(z[c] - mx);
            s += p[c];
        }
        for (std::size_t c = 0; c < K; ++c) p[c] /= s;
        loss += (mx + std::log(s)) - z[labels[i]];
    }
    loss /= static_cast<double>(B);
    auto zn = logits.node();
    std::vector<int> lab(labels.begin(), labels.end());
    return make_result("softmax_cross_entropy", {1}, {loss}, {logits},
                       [zn, lab, probs = std::move(probs), B, K](Node& self) {
                           auto& g = zn->grad_buffer();
                           const double s = self.grad[0] / static_cast<double>(B);
                           for (std::size_t i = 0; i < B; ++i) {
                               for (std::size_t c = 0; c < K; ++c) {
                                   const double onehot = static_cast<int>(c) == lab[i] ? 1.0 : 0.0;
                                   g[i * K + c] += s * (probs[i * K + c] - onehot);
                               }
                           }
                       });
}

}  // namespace condhar
