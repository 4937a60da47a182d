#include "condhar/archspec.hpp"

#include <cctype>
#include <cmath>
#include <random>

namespace condhar {

const char* to_string(HeadKind h) { return h == HeadKind::dense ? "dense" : "pointwise"; }

HeadKind head_kind_from_string(std::string_view s) {
    if (s == "dense") return HeadKind::dense;
    if (s == "pointwise" || s == "pointwise-condconv") return HeadKind::pointwise;
    throw ConfigError("unknown head kind '" + std::string(s) + "'");
}

const char* to_string(LayerKind k) {
    switch (k) {
        case LayerKind::conv: return "conv";
        case LayerKind::condconv: return "condconv";
        case LayerKind::batch_norm: return "batch_norm";
        case LayerKind::relu: return "relu";
        case LayerKind::max_pool: return "max_pool";
        case LayerKind::dropout: return "dropout";
        case LayerKind::dense: return "dense";
        case LayerKind::pointwise_conv: return "pointwise_conv";
        case LayerKind::pointwise_condconv: return "pointwise_condconv";
        case LayerKind::softmax: return "softmax";
    }
    return "?";
}

std::size_t ModelSpec::conv_block_count() const {
    std::size_t n = 0;
    for (const auto& b : blocks) n += std::holds_alternative<ConvBlock>(b) ? 1 : 0;
    return n;
}

std::optional<PoolSpec> ModelSpec::pool_for(std::size_t block) const {
    if (block_pools.empty()) return pool;
    if (block >= block_pools.size()) {
        throw ConfigError("block_pools has " + std::to_string(block_pools.size()) +
                          " entries but block " + std::to_string(block) + " was requested");
    }
    return block_pools[block];
}

std::vector<bool> ModelSpec::resolved_mask() const {
    const std::size_t convs = conv_layer_count();
    if (condconv_mask.empty()) {
        std::vector<bool> m(convs, true);
        m.push_back(head == HeadKind::pointwise);
        return m;
    }
    if (condconv_mask.size() != convs + 1) {
        throw ConfigError("condconv_mask needs " + std::to_string(convs + 1) +
                          " entries (one per convolution layer plus the head), got " +
                          std::to_string(condconv_mask.size()));
    }
    if (head == HeadKind::dense && condconv_mask.back()) {
        throw ConfigError("a dense head cannot be conditional; use the pointwise head");
    }
    return condconv_mask;
}

// ---- shorthand -------------------------------------------------------------

namespace {

class ShorthandParser {
public:
    explicit ShorthandParser(std::string_view s) : s_(s) {}

    ModelSpec parse() {
        ModelSpec spec;
        skip_ws();
        if (pos_ == s_.size()) throw ParseError("empty architecture spec", pos_);
        while (true) {
            const std::size_t start = pos_;
            spec.blocks.push_back(block());
            if (std::holds_alternative<SoftmaxHead>(spec.blocks.back()) &&
                spec.blocks.size() > 1 &&
                std::any_of(spec.blocks.begin(), spec.blocks.end() - 1, [](const Block& b) {
                    return std::holds_alternative<SoftmaxHead>(b);
                })) {
                throw ParseError("more than one softmax head", start);
            }
            skip_ws();
            if (pos_ == s_.size()) break;
            if (s_[pos_] != '-') throw ParseError("expected '-' between blocks", pos_);
            ++pos_;
            skip_ws();
            if (std::holds_alternative<SoftmaxHead>(spec.blocks.back())) {
                throw ParseError("softmax head 'Sm' must be the last block", start);
            }
        }
        if (!std::holds_alternative<SoftmaxHead>(spec.blocks.back())) {
            throw ParseError("missing softmax head 'Sm'", pos_);
        }
        return spec;
    }

private:
    void skip_ws() {
        while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
    }

    char peek_lower(std::size_t off = 0) const {
        std::size_t p = pos_;
        // whitespace inside a token is ignored as well
        for (std::size_t seen = 0;; ++p) {
            while (p < s_.size() && std::isspace(static_cast<unsigned char>(s_[p]))) ++p;
            if (p >= s_.size()) return '\0';
            if (seen == off) return static_cast<char>(std::tolower(static_cast<unsigned char>(s_[p])));
            ++seen;
        }
    }

    void advance(std::size_t chars) {
        for (std::size_t i = 0; i < chars; ++i) {
            skip_ws();
            ++pos_;
        }
    }

    Block block() {
        const std::size_t start = pos_;
        const char c0 = peek_lower();
        const char c1 = peek_lower(1);
        if (c0 == 'c') {
            advance(1);
            skip_ws();
            if (pos_ >= s_.size() || s_[pos_] != '(') throw ParseError("expected '(' after 'C'", pos_);
            ++pos_;
            skip_ws();
            const std::size_t num_start = pos_;
            std::size_t value = 0;
            while (pos_ < s_.size() && std::isdigit(static_cast<unsigned char>(s_[pos_]))) {
                value = value * 10 + static_cast<std::size_t>(s_[pos_] - '0');
                if (value > 1'000'000) throw ParseError("filter count too large", num_start);
                ++pos_;
            }
            if (pos_ == num_start) throw ParseError("expected filter count", num_start);
            if (value == 0) throw ParseError("filter count must be positive", num_start);
            skip_ws();
            if (pos_ >= s_.size() || s_[pos_] != ')') throw ParseError("expected ')'", pos_);
            ++pos_;
            return ConvBlock{value};
        }
        if (c0 == 'f' && c1 == 'c') {
            advance(2);
            return FullyConnected{};
        }
        if (c0 == 's' && c1 == 'm') {
            advance(2);
            return SoftmaxHead{};
        }
        throw ParseError("unknown block token", start);
    }

    std::string_view s_;
    std::size_t pos_ = 0;
};

}  // namespace

ModelSpec parse_shorthand(std::string_view text) { return ShorthandParser(text).parse(); }

std::string render_shorthand(const ModelSpec& spec) {
    std::string out;
    for (const auto& b : spec.blocks) {
        if (!out.empty()) out += '-';
        if (const auto* c = std::get_if<ConvBlock>(&b)) {
            out += "C(" + std::to_string(c->filters) + ")";
        } else if (std::holds_alternative<FullyConnected>(b)) {
            out += "FC";
        } else {
            out += "Sm";
        }
    }
    return out;
}

// ---- JSON ------------------------------------------------------------------

namespace {

nlohmann::json pool_json(const std::optional<PoolSpec>& p) {
    if (!p) return nullptr;
    return {{"size", p->size}, {"stride", p->stride}};
}

std::optional<PoolSpec> pool_from(const nlohmann::json& j) {
    if (j.is_null()) return std::nullopt;
    PoolSpec p;
    p.size = j.value("size", p.size);
    p.stride = j.value("stride", p.stride);
    return p;
}

}  // namespace

void to_json(nlohmann::json& j, const ModelSpec& spec) {
    j = nlohmann::json{{"shorthand", render_shorthand(spec)},
                       {"convs_per_block", spec.convs_per_block},
                       {"kernel_length", spec.kernel_length},
                       {"padding", to_string(spec.padding)},
                       {"pool", pool_json(spec.pool)},
                       {"head", to_string(spec.head)},
                       {"n_experts", spec.n_experts},
                       {"condconv_mask", spec.condconv_mask},
                       {"routing_activation", to_string(spec.routing_activation)},
                       {"routing_init", spec.routing_init},
                       {"dropout_rate", spec.dropout_rate},
                       {"bn_momentum", spec.bn_momentum},
                       {"bn_epsilon", spec.bn_epsilon}};
    if (!spec.block_pools.empty()) {
        auto arr = nlohmann::json::array();
        for (const auto& p : spec.block_pools) arr.push_back(pool_json(p));
        j["block_pools"] = arr;
    }
    j["pinned_routing"] = spec.pinned_routing ? nlohmann::json(*spec.pinned_routing) : nullptr;
}

void from_json(const nlohmann::json& j, ModelSpec& spec) {
    ModelSpec s = parse_shorthand(j.at("shorthand").get<std::string>());
    s.convs_per_block = j.value("convs_per_block", s.convs_per_block);
    s.kernel_length = j.value("kernel_length", s.kernel_length);
    if (j.contains("padding")) s.padding = padding_from_string(j["padding"].get<std::string>());
    if (j.contains("pool")) s.pool = pool_from(j["pool"]);
    if (j.contains("block_pools")) {
        for (const auto& p : j["block_pools"]) s.block_pools.push_back(pool_from(p));
    }
    if (j.contains("head")) s.head = head_kind_from_string(j["head"].get<std::string>());
    s.n_experts = j.value("n_experts", s.n_experts);
    if (j.contains("condconv_mask")) s.condconv_mask = j["condconv_mask"].get<std::vector<bool>>();
    if (j.contains("routing_activation")) {
        s.routing_activation =
            routing_activation_from_string(j["routing_activation"].get<std::string>());
    }
    if (j.contains("pinned_routing") && !j["pinned_routing"].is_null()) {
        s.pinned_routing = j["pinned_routing"].get<double>();
    }
    s.routing_init = j.value("routing_init", s.routing_init);
    s.dropout_rate = j.value("dropout_rate", s.dropout_rate);
    s.bn_momentum = j.value("bn_momentum", s.bn_momentum);
    s.bn_epsilon = j.value("bn_epsilon", s.bn_epsilon);
    spec = std::move(s);
}

// ---- builder ---------------------------------------------------------------

namespace {

enum class InitRole : std::uint64_t { kernel = 0, routing = 1, classifier = 2 };

std::mt19937_64 layer_rng(std::uint64_t seed, std::size_t layer, InitRole role) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(layer), static_cast<std::uint32_t>(role)};
    return std::mt19937_64(seq);
}

Tensor uniform_tensor(Shape shape, double bound, std::mt19937_64& rng) {
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = (2.0 * unit_uniform(rng) - 1.0) * bound;
    return Tensor(std::move(shape), std::move(v), true);
}

}  // namespace

Model build_model(const ModelSpec& spec, std::pair<std::size_t, std::size_t> input_shape,
                  std::size_t n_classes, std::uint64_t seed) {
    auto [T, C] = input_shape;
    if (T == 0 || C == 0) throw ArchitectureError("input shape must be positive");
    if (n_classes < 2) throw ArchitectureError("need at least two classes");
    if (spec.blocks.empty() || !std::holds_alternative<SoftmaxHead>(spec.blocks.back())) {
        throw ArchitectureError("spec must end with the softmax head");
    }
    if (spec.convs_per_block == 0) throw ConfigError("convs_per_block must be >= 1");
    if (spec.n_experts == 0) throw ConfigError("n_experts must be >= 1");
    if (!(spec.dropout_rate >= 0.0 && spec.dropout_rate < 1.0)) {
        throw ConfigError("dropout rate must lie in [0, 1)");
    }
    // Conv blocks, then exactly one FC classifier, then Sm.
    const std::size_t nb = spec.blocks.size();
    if (nb < 2 || !std::holds_alternative<FullyConnected>(spec.blocks[nb - 2])) {
        throw ArchitectureError("'" + render_shorthand(spec) +
                                "' needs a single FC classifier directly before Sm");
    }
    for (std::size_t i = 0; i + 2 < nb; ++i) {
        if (!std::holds_alternative<ConvBlock>(spec.blocks[i])) {
            throw ArchitectureError("'" + render_shorthand(spec) +
                                    "': only convolution blocks may precede the classifier");
        }
    }
    if (!spec.block_pools.empty() && spec.block_pools.size() != spec.conv_block_count()) {
        throw ConfigError("block_pools needs one entry per convolution block");
    }
    const std::vector<bool> mask = spec.resolved_mask();

    Model m;
    m.spec_ = spec;
    m.input_len_ = T;
    m.input_ch_ = C;
    m.n_classes_ = n_classes;

    auto push = [&m](LayerInfo info, Model::Impl impl) {
        m.info_.push_back(std::move(info));
        m.impl_.push_back(std::move(impl));
    };

    std::size_t conv_idx = 0;
    for (std::size_t bi = 0; bi + 2 < nb; ++bi) {
        const std::size_t filters = std::get<ConvBlock>(spec.blocks[bi]).filters;
        const std::string block_name = "block" + std::to_string(bi + 1) + " C(" +
                                       std::to_string(filters) + ")";
        for (std::size_t j = 0; j < spec.convs_per_block; ++j, ++conv_idx) {
            ConvGeometry geo;
            try {
                geo = conv_geometry(T, spec.kernel_length, 1, spec.padding);
            } catch (const ConfigError&) {
                throw ArchitectureError(block_name + ": temporal length " + std::to_string(T) +
                                        " is shorter than kernel length " +
                                        std::to_string(spec.kernel_length));
            }
            const std::string lname = "conv" + std::to_string(conv_idx + 1);
            LayerInfo info{lname, LayerKind::conv, T, C, geo.out_len, filters,
                           spec.kernel_length, 1, 0, true};
            auto krng = layer_rng(seed, conv_idx, InitRole::kernel);
            if (mask[conv_idx]) {
                auto rrng = layer_rng(seed, conv_idx, InitRole::routing);
                CondConvLayer cc = CondConvLayer::create(spec.n_experts, spec.kernel_length, C,
                                                         filters, krng, rrng, true,
                                                         spec.routing_init);
                cc.padding = spec.padding;
                cc.activation = spec.routing_activation;
                cc.pinned_routing = spec.pinned_routing;
                info.kind = LayerKind::condconv;
                info.name = "condconv" + std::to_string(conv_idx + 1);
                info.n_experts = spec.n_experts;
                push(info, std::move(cc));
            } else {
                const double bound = std::sqrt(6.0 / static_cast<double>(spec.kernel_length * C));
                Model::StdConv sc{uniform_tensor({spec.kernel_length, C, filters}, bound, krng),
                                  Tensor::zeros({filters}, true), 1, spec.padding};
                push(info, std::move(sc));
            }
            T = geo.out_len;
            C = filters;
            push(LayerInfo{"bn" + std::to_string(conv_idx + 1), LayerKind::batch_norm, T, C, T, C},
                 BatchNormState::create(C, spec.bn_momentum, spec.bn_epsilon));
            push(LayerInfo{"relu" + std::to_string(conv_idx + 1), LayerKind::relu, T, C, T, C},
                 std::monostate{});
        }
        if (auto p = spec.pool_for(bi)) {
            if (p->size == 0 || p->stride == 0) throw ConfigError("pool size/stride must be >= 1");
            if (p->size > T) {
                throw ArchitectureError(block_name + ": temporal length " + std::to_string(T) +
                                        " is shorter than pool size " + std::to_string(p->size));
            }
            const std::size_t To = (T - p->size) / p->stride + 1;
            push(LayerInfo{"pool" + std::to_string(bi + 1), LayerKind::max_pool, T, C, To, C,
                           p->size, p->stride},
                 Model::Pool{p->size, p->stride});
            T = To;
        }
    }

    push(LayerInfo{"dropout", LayerKind::dropout, T, C, T, C}, std::monostate{});

    auto crng = layer_rng(seed, conv_idx, InitRole::classifier);
    if (spec.head == HeadKind::dense) {
        const std::size_t d = T * C;
        const double bound = std::sqrt(6.0 / static_cast<double>(d + n_classes));
        push(LayerInfo{"fc", LayerKind::dense, T, C, 1, n_classes, 0, 0, 0, true},
             Model::Dense{uniform_tensor({d, n_classes}, bound, crng),
                          Tensor::zeros({n_classes}, true)});
    } else if (mask.back()) {
        auto rrng = layer_rng(seed, conv_idx, InitRole::routing);
        CondConvLayer cc = CondConvLayer::create(spec.n_experts, 1, C, n_classes, crng, rrng, true,
                                                 spec.routing_init);
        cc.activation = spec.routing_activation;
        cc.pinned_routing = spec.pinned_routing;
        push(LayerInfo{"head_condconv", LayerKind::pointwise_condconv, T, C, 1, n_classes, 1, 1,
                       spec.n_experts, true},
             std::move(cc));
    } else {
        const double bound = std::sqrt(6.0 / static_cast<double>(C));
        push(LayerInfo{"head_conv", LayerKind::pointwise_conv, T, C, 1, n_classes, 1, 1, 0, true},
             Model::StdConv{uniform_tensor({1, C, n_classes}, bound, crng),
                            Tensor::zeros({n_classes}, true), 1, Padding::valid});
    }
    push(LayerInfo{"softmax", LayerKind::softmax, 1, n_classes, 1, n_classes}, std::monostate{});
    return m;
}

// ---- model -----------------------------------------------------------------

Tensor Model::forward(const Tensor& x, ForwardContext& ctx) {
    if (x.rank() != 3 || x.dim(1) != input_len_ || x.dim(2) != input_ch_) {
        throw DimensionError("model expects [batch x " + std::to_string(input_len_) + " x " +
                             std::to_string(input_ch_) + "], got " + shape_str(x.shape()));
    }
    Tensor h = x;
    for (std::size_t i = 0; i < impl_.size(); ++i) {
        const LayerInfo& info = info_[i];
        auto& impl = impl_[i];
        switch (info.kind) {
            case LayerKind::conv: {
                const auto& c = std::get<StdConv>(impl);
                h = add_bias(conv_temporal(h, c.kernel, c.stride, c.padding), c.bias);
                break;
            }
            case LayerKind::condconv: {
                Tensor alpha;
                h = condconv_preactivation(h, std::get<CondConvLayer>(impl), &alpha);
                if (ctx.routing_capture) ctx.routing_capture->emplace_back(i, alpha);
                break;
            }
            case LayerKind::batch_norm:
                h = batch_norm(h, std::get<BatchNormState>(impl), ctx.mode);
                break;
            case LayerKind::relu: h = relu(h); break;
            case LayerKind::max_pool: {
                const auto& p = std::get<Pool>(impl);
                h = max_pool_temporal(h, p.size, p.stride);
                break;
            }
            case LayerKind::dropout:
                h = dropout(h, DropoutConfig{spec_.dropout_rate}, ctx.mode, ctx.dropout_seed);
                break;
            case LayerKind::dense: {
                const auto& d = std::get<Dense>(impl);
                h = dense(reshape(h, {h.dim(0), h.dim(1) * h.dim(2)}), d.W, d.b);
                break;
            }
            case LayerKind::pointwise_conv: {
                const auto& c = std::get<StdConv>(impl);
                h = mean_over_time(add_bias(conv_temporal(h, c.kernel, 1, Padding::valid), c.bias));
                break;
            }
            case LayerKind::pointwise_condconv: {
                Tensor alpha;
                h = condconv_pointwise_head(h, std::get<CondConvLayer>(impl), &alpha);
                if (ctx.routing_capture) ctx.routing_capture->emplace_back(i, alpha);
                break;
            }
            case LayerKind::softmax:
                break;  // logits are returned; the loss fuses the softmax
        }
    }
    return h;
}

Tensor Model::predict_proba(const Tensor& x) {
    ForwardContext ctx;
    ctx.mode = Mode::eval;
    return softmax(forward(x.detach(), ctx));
}

std::vector<NamedTensor> Model::parameters() const {
    std::vector<NamedTensor> out;
    for (std::size_t i = 0; i < impl_.size(); ++i) {
        const std::string& n = info_[i].name;
        if (const auto* c = std::get_if<StdConv>(&impl_[i])) {
            out.push_back({n + ".kernel", c->kernel});
            out.push_back({n + ".bias", c->bias});
        } else if (const auto* cc = std::get_if<CondConvLayer>(&impl_[i])) {
            out.push_back({n + ".experts", cc->experts});
            out.push_back({n + ".routing", cc->routing});
            if (cc->bias.defined()) out.push_back({n + ".bias", cc->bias});
        } else if (const auto* bn = std::get_if<BatchNormState>(&impl_[i])) {
            out.push_back({n + ".gamma", bn->gamma});
            out.push_back({n + ".beta", bn->beta});
        } else if (const auto* d = std::get_if<Dense>(&impl_[i])) {
            out.push_back({n + ".W", d->W});
            out.push_back({n + ".b", d->b});
        }
    }
    return out;
}

std::vector<NamedTensor> Model::buffers() const {
    std::vector<NamedTensor> out;
    for (std::size_t i = 0; i < impl_.size(); ++i) {
        if (const auto* bn = std::get_if<BatchNormState>(&impl_[i])) {
            const std::size_t c = bn->channels();
            out.push_back({info_[i].name + ".running_mean", Tensor({c}, bn->running_mean)});
            out.push_back({info_[i].name + ".running_var", Tensor({c}, bn->running_var)});
        }
    }
    return out;
}

void Model::load_buffers(const std::vector<NamedTensor>& values) {
    std::size_t k = 0;
    for (std::size_t i = 0; i < impl_.size(); ++i) {
        auto* bn = std::get_if<BatchNormState>(&impl_[i]);
        if (!bn) continue;
        for (auto* dst : {&bn->running_mean, &bn->running_var}) {
            if (k >= values.size() || values[k].tensor.size() != dst->size()) {
                throw DataError("buffer list does not match model batch-norm layers");
            }
            const auto d = values[k].tensor.data();
            dst->assign(d.begin(), d.end());
            ++k;
        }
    }
    if (k != values.size()) throw DataError("buffer list has extra entries");
}

std::vector<std::size_t> Model::condconv_layer_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < info_.size(); ++i) {
        if (info_[i].kind == LayerKind::condconv || info_[i].kind == LayerKind::pointwise_condconv) {
            out.push_back(i);
        }
    }
    return out;
}

}  // namespace condhar
