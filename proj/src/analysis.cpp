#include "condhar/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <sstream>

namespace condhar {

// ---- cost accounting -------------------------------------------------------

LayerCost layer_cost(const LayerInfo& L) {
    LayerCost c;
    c.name = L.name;
    c.kind = L.kind;
    const std::size_t K = L.kernel, ci = L.c_in, co = L.c_out, n = L.n_experts;
    auto routing = [&](std::size_t t_in) {
        // global average pool, projection, gating nonlinearity
        c.multiply_adds += ci * t_in + ci * n;
        c.elementwise_flops += n;
        c.params += ci * n;
    };
    switch (L.kind) {
        case LayerKind::conv:
            c.multiply_adds = L.t_out * co * K * ci;
            c.elementwise_flops = L.t_out * co;  // bias
            c.params = K * ci * co + co;
            break;
        case LayerKind::condconv:
            c.multiply_adds = L.t_out * co * K * ci + n * K * ci * co;
            c.elementwise_flops = L.has_bias ? L.t_out * co : 0;
            c.params = n * K * ci * co + (L.has_bias ? co : 0);
            routing(L.t_in);
            break;
        case LayerKind::pointwise_conv:
            c.multiply_adds = L.t_in * ci * co;
            c.elementwise_flops = 2 * L.t_in * co;  // bias, temporal mean
            c.params = ci * co + co;
            break;
        case LayerKind::pointwise_condconv:
            c.multiply_adds = L.t_in * ci * co + n * ci * co;
            c.elementwise_flops = (L.has_bias ? L.t_in * co : 0) + L.t_in * co;
            c.params = n * ci * co + (L.has_bias ? co : 0);
            routing(L.t_in);
            break;
        case LayerKind::dense:
            c.multiply_adds = L.t_in * ci * co;
            c.elementwise_flops = co;
            c.params = L.t_in * ci * co + co;
            break;
        case LayerKind::batch_norm:
            c.elementwise_flops = L.t_out * L.c_out;
            c.params = 2 * L.c_out;
            break;
        case LayerKind::relu:
        case LayerKind::max_pool:
        case LayerKind::softmax:
            c.elementwise_flops = L.t_out * L.c_out;
            break;
        case LayerKind::dropout:
            break;
    }
    c.flops = 2 * c.multiply_adds;
    return c;
}

FlopsReport count_flops(const Model& model) {
    FlopsReport r;
    r.n_experts = model.spec().n_experts;
    for (const auto& L : model.layers()) {
        auto c = layer_cost(L);
        r.multiply_adds += c.multiply_adds;
        r.flops += c.flops;
        r.elementwise_flops += c.elementwise_flops;
        r.params += c.params;
        r.per_layer.push_back(std::move(c));
    }
    return r;
}

FlopsReport count_flops(const ModelSpec& spec, std::pair<std::size_t, std::size_t> input_shape,
                        std::size_t n_classes) {
    return count_flops(build_model(spec, input_shape, n_classes));
}

std::size_t count_params(const Model& model) { return count_flops(model).params; }

std::string FlopsReport::table() const {
    std::ostringstream os;
    os << std::left << std::setw(16) << "layer" << std::setw(20) << "kind" << std::right
       << std::setw(14) << "mult-adds" << std::setw(14) << "flops" << std::setw(14)
       << "elementwise" << std::setw(12) << "params" << '\n';
    for (const auto& c : per_layer) {
        os << std::left << std::setw(16) << c.name << std::setw(20) << to_string(c.kind)
           << std::right << std::setw(14) << c.multiply_adds << std::setw(14) << c.flops
           << std::setw(14) << c.elementwise_flops << std::setw(12) << c.params << '\n';
    }
    os << std::left << std::setw(36) << "total" << std::right << std::setw(14) << multiply_adds
       << std::setw(14) << flops << std::setw(14) << elementwise_flops << std::setw(12) << params
       << '\n';
    os << "n_experts: " << n_experts << '\n' << "convention: " << counting_convention << '\n';
    return os.str();
}

std::vector<FlopsSweepRow> flops_sweep(const ModelSpec& spec,
                                       std::pair<std::size_t, std::size_t> input_shape,
                                       std::size_t n_classes,
                                       const std::vector<std::size_t>& experts) {
    std::vector<FlopsSweepRow> rows;
    for (std::size_t n : experts) {
        ModelSpec s = spec;
        s.n_experts = n;
        const auto r = count_flops(s, input_shape, n_classes);
        FlopsSweepRow row{n, r.flops, r.params, 1.0};
        if (!rows.empty()) {
            row.ratio = static_cast<double>(r.flops) / static_cast<double>(rows.front().flops);
        }
        rows.push_back(row);
    }
    return rows;
}

std::string render_sweep_csv(const std::vector<FlopsSweepRow>& rows) {
    std::ostringstream os;
    os << "n_experts,flops,mflops,params,ratio\n";
    char buf[64];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%.4f,", static_cast<double>(r.flops) / 1e6);
        os << r.n_experts << ',' << r.flops << ',' << buf << r.params << ',';
        std::snprintf(buf, sizeof buf, "%.6f", r.ratio);
        os << buf << '\n';
    }
    return os.str();
}

// ---- confusion -------------------------------------------------------------

ConfusionReport confusion_report(const Evaluation& ev, const std::vector<std::string>& class_names) {
    ConfusionReport r;
    r.evaluation = ev;
    const std::size_t K = ev.confusion.size();
    auto name = [&](std::size_t c) {
        return c < class_names.size() ? class_names[c] : std::to_string(c);
    };
    for (std::size_t i = 0; i < K; ++i)
        for (std::size_t j = 0; j < K; ++j)
            if (i != j && ev.confusion[i][j] > 0) r.ranked.push_back({i, j, ev.confusion[i][j]});
    std::stable_sort(r.ranked.begin(), r.ranked.end(),
                     [](const auto& a, const auto& b) { return a.count > b.count; });

    std::size_t w = 6;
    for (std::size_t c = 0; c < K; ++c) w = std::max(w, name(c).size() + 1);
    std::ostringstream t;
    t << std::left << std::setw(static_cast<int>(w)) << "true\\pred";
    for (std::size_t j = 0; j < K; ++j) t << std::right << std::setw(static_cast<int>(w)) << name(j);
    t << std::right << std::setw(9) << "acc" << '\n';
    char buf[32];
    for (std::size_t i = 0; i < K; ++i) {
        t << std::left << std::setw(static_cast<int>(w)) << name(i) << std::right;
        for (std::size_t j = 0; j < K; ++j) t << std::setw(static_cast<int>(w)) << ev.confusion[i][j];
        if (std::isnan(ev.per_class_accuracy[i])) {
            t << std::setw(9) << "-";
        } else {
            std::snprintf(buf, sizeof buf, "%.4f", ev.per_class_accuracy[i]);
            t << std::setw(9) << buf;
        }
        t << '\n';
    }
    std::snprintf(buf, sizeof buf, "%.4f", ev.accuracy);
    t << "accuracy " << buf << " over " << ev.total << " examples\n";
    if (!r.ranked.empty()) {
        t << "most frequent confusions:\n";
        for (std::size_t k = 0; k < std::min<std::size_t>(10, r.ranked.size()); ++k) {
            t << "  " << name(r.ranked[k].truth) << " -> " << name(r.ranked[k].predicted) << ": "
              << r.ranked[k].count << '\n';
        }
    }
    r.table = t.str();

    std::ostringstream c;
    c << "true";
    for (std::size_t j = 0; j < K; ++j) c << ',' << name(j);
    c << '\n';
    for (std::size_t i = 0; i < K; ++i) {
        c << name(i);
        for (std::size_t j = 0; j < K; ++j) c << ',' << ev.confusion[i][j];
        c << '\n';
    }
    r.csv = c.str();
    return r;
}

ConfusionReport confusion_matrix_report(Model& model, const WindowedDataset& ds,
                                        const std::vector<std::string>& class_names) {
    return confusion_report(evaluate(model, ds), class_names);
}

// ---- routing ---------------------------------------------------------------

std::size_t RoutingStats::sample_count() const {
    std::size_t n = 0;
    for (const auto& L : layers) n += L.alphas.size();
    return n;
}

RoutingStats routing_stats(Model& model, const WindowedDataset& ds,
                           const std::vector<std::size_t>& layer_selection, std::size_t buckets,
                           std::size_t batch_size) {
    const auto cond = model.condconv_layer_indices();
    if (cond.empty()) throw ConfigError("model has no conditional convolution layers");
    if (ds.empty()) throw DataError("routing statistics need a non-empty dataset");
    if (buckets == 0 || batch_size == 0) throw ConfigError("buckets and batch size must be >= 1");
    std::vector<std::size_t> selected = layer_selection.empty() ? cond : layer_selection;
    for (auto s : selected) {
        if (std::find(cond.begin(), cond.end(), s) == cond.end()) {
            throw ConfigError("layer " + std::to_string(s) + " is not a conditional layer");
        }
    }

    RoutingStats st;
    st.n_classes = model.n_classes();
    st.labels = ds.labels;
    st.class_counts.assign(st.n_classes, 0);
    for (int l : ds.labels) ++st.class_counts.at(static_cast<std::size_t>(l));
    for (auto s : selected) {
        LayerRouting L;
        L.layer_index = s;
        L.name = model.layers()[s].name;
        L.n_experts = model.layers()[s].n_experts;
        st.layers.push_back(std::move(L));
    }

    std::vector<std::size_t> idx;
    for (std::size_t b = 0; b < ds.size(); b += batch_size) {
        idx.resize(std::min(batch_size, ds.size() - b));
        for (std::size_t k = 0; k < idx.size(); ++k) idx[k] = b + k;
        std::vector<std::pair<std::size_t, Tensor>> captured;
        ForwardContext ctx;
        ctx.mode = Mode::eval;
        ctx.routing_capture = &captured;
        model.forward(ds.batch(idx), ctx);
        for (auto& L : st.layers) {
            for (const auto& [layer, alpha] : captured) {
                if (layer != L.layer_index) continue;
                // pinned routing yields one row shared by the batch
                const auto d = alpha.data();
                for (std::size_t k = 0; k < idx.size(); ++k) {
                    const std::size_t row = alpha.dim(0) == 1 ? 0 : k;
                    L.alphas.insert(L.alphas.end(), d.begin() + row * L.n_experts,
                                    d.begin() + (row + 1) * L.n_experts);
                }
            }
        }
    }

    for (auto& L : st.layers) {
        const std::size_t n = L.n_experts;
        L.mean.assign(st.n_classes, std::vector<double>(n, 0.0));
        L.stddev.assign(st.n_classes, std::vector<double>(n, 0.0));
        for (std::size_t i = 0; i < ds.size(); ++i)
            for (std::size_t e = 0; e < n; ++e) L.mean[ds.labels[i]][e] += L.alphas[i * n + e];
        for (std::size_t c = 0; c < st.n_classes; ++c)
            for (auto& m : L.mean[c]) m = st.class_counts[c] ? m / static_cast<double>(st.class_counts[c]) : 0.0;
        for (std::size_t i = 0; i < ds.size(); ++i) {
            for (std::size_t e = 0; e < n; ++e) {
                const double d = L.alphas[i * n + e] - L.mean[ds.labels[i]][e];
                L.stddev[ds.labels[i]][e] += d * d;
            }
        }
        for (std::size_t c = 0; c < st.n_classes; ++c) {
            for (auto& s : L.stddev[c]) {
                s = st.class_counts[c] ? std::sqrt(s / static_cast<double>(st.class_counts[c])) : 0.0;
            }
        }
    }

    st.bucket_edges.resize(buckets + 1);
    for (std::size_t k = 0; k <= buckets; ++k) {
        st.bucket_edges[k] = static_cast<double>(k) / static_cast<double>(buckets);
    }
    st.histogram.assign(buckets, 0);
    double s1 = 0, s2 = 0, s3 = 0, s4 = 0;
    std::size_t edge = 0, total = 0;
    for (const auto& L : st.layers) {
        for (double a : L.alphas) {
            ++total;
            if (a < 0.0 || a > 1.0) {
                ++st.out_of_range;
                continue;
            }
            const auto k = std::min(buckets - 1, static_cast<std::size_t>(a * static_cast<double>(buckets)));
            ++st.histogram[k];
            edge += (a < 0.1 || a > 0.9);
            s1 += a;
        }
    }
    const double N = static_cast<double>(total);
    st.edge_mass = total ? static_cast<double>(edge) / N : 0.0;
    const double mu = total ? s1 / N : 0.0;
    for (const auto& L : st.layers) {
        for (double a : L.alphas) {
            const double d = a - mu;
            s2 += d * d;
            s3 += d * d * d;
            s4 += d * d * d * d;
        }
    }
    if (total > 3 && s2 > 0.0) {
        const double m2 = s2 / N, m3 = s3 / N, m4 = s4 / N;
        const double g = m3 / std::pow(m2, 1.5);
        const double k = m4 / (m2 * m2) - 3.0;
        st.bimodality_coefficient =
            (g * g + 1.0) / (k + 3.0 * (N - 1) * (N - 1) / ((N - 2) * (N - 3)));
    }
    return st;
}

namespace {

std::string g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

std::string routing_means_csv(const RoutingStats& s) {
    std::ostringstream os;
    os << "layer,class,expert,mean,std,count\n";
    for (const auto& L : s.layers)
        for (std::size_t c = 0; c < s.n_classes; ++c)
            for (std::size_t e = 0; e < L.n_experts; ++e)
                os << L.name << ',' << c << ',' << e << ',' << g17(L.mean[c][e]) << ','
                   << g17(L.stddev[c][e]) << ',' << s.class_counts[c] << '\n';
    return os.str();
}

std::string routing_histogram_csv(const RoutingStats& s) {
    std::ostringstream os;
    os << "bucket_left,bucket_right,count\n";
    for (std::size_t k = 0; k < s.histogram.size(); ++k) {
        os << g17(s.bucket_edges[k]) << ',' << g17(s.bucket_edges[k + 1]) << ',' << s.histogram[k] << '\n';
    }
    return os.str();
}

std::string routing_samples_csv(const RoutingStats& s) {
    std::ostringstream os;
    std::size_t n_max = 0;
    for (const auto& L : s.layers) n_max = std::max(n_max, L.n_experts);
    os << "layer,example,label";
    for (std::size_t e = 0; e < n_max; ++e) os << ",alpha_" << e;
    os << '\n';
    for (const auto& L : s.layers) {
        for (std::size_t i = 0; i < s.labels.size(); ++i) {
            os << L.name << ',' << i << ',' << s.labels[i];
            for (std::size_t e = 0; e < L.n_experts; ++e) os << ',' << g17(L.alphas[i * L.n_experts + e]);
            os << '\n';
        }
    }
    return os.str();
}

double class_divergence(const std::vector<std::vector<double>>& class_means,
                        const std::vector<std::size_t>& class_counts) {
    std::vector<std::size_t> present;
    for (std::size_t c = 0; c < class_means.size(); ++c) {
        if (c < class_counts.size() && class_counts[c] > 0) present.push_back(c);
    }
    if (present.size() < 2) throw DataError("divergence needs at least two populated classes");
    double total = 0.0;
    std::size_t pairs = 0;
    for (std::size_t a = 0; a < present.size(); ++a) {
        for (std::size_t b = a + 1; b < present.size(); ++b) {
            const auto& u = class_means[present[a]];
            const auto& v = class_means[present[b]];
            double d2 = 0.0;
            for (std::size_t e = 0; e < u.size(); ++e) d2 += (u[e] - v[e]) * (u[e] - v[e]);
            total += std::sqrt(d2);
            ++pairs;
        }
    }
    return total / static_cast<double>(pairs);
}

DivergenceReport depth_divergence(const RoutingStats& stats) {
    if (stats.layers.size() < 2) throw ConfigError("depth divergence needs at least two layers");
    DivergenceReport r;
    for (const auto& L : stats.layers) {
        r.layers.push_back(L.name);
        r.scores.push_back(class_divergence(L.mean, stats.class_counts));
    }
    r.increasing = true;
    for (std::size_t i = 1; i < r.scores.size(); ++i) r.increasing &= r.scores[i] > r.scores[i - 1];
    return r;
}

}  // namespace condhar
