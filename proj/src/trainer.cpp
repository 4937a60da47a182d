#include "condhar/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "binio.hpp"
#include "condhar/layers.hpp"

namespace condhar {

namespace fs = std::filesystem;

// ---- configuration ---------------------------------------------------------

void TrainConfig::validate() const {
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (eval_batch_size == 0) throw ConfigError("eval_batch_size must be >= 1");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("dropout_rate must lie in [0, 1)");
    if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
        throw ConfigError("validation_fraction must lie in [0, 1)");
    }
    if (const auto* s = std::get_if<StepDecay>(&lr_schedule)) {
        if (!(s->init > 0.0)) throw ConfigError("learning rate must be positive");
        if (!(s->factor > 0.0 && s->factor <= 1.0)) {
            throw ConfigError("decay factor must lie in (0, 1]");
        }
        if (s->every_n_epochs == 0) throw ConfigError("every_n_epochs must be >= 1");
    } else {
        const auto& m = std::get<Milestones>(lr_schedule);
        if (m.phases.empty()) throw ConfigError("milestone schedule has no phases");
        double prev = std::numeric_limits<double>::infinity(), total = 0.0;
        for (const auto& p : m.phases) {
            if (!(p.lr > 0.0)) throw ConfigError("learning rates must be positive");
            if (p.lr > prev) throw ConfigError("milestone learning rates must be non-increasing");
            if (!(p.fraction > 0.0)) throw ConfigError("milestone fractions must be positive");
            prev = p.lr;
            total += p.fraction;
        }
        if (std::abs(total - 1.0) > 1e-9) {
            throw ConfigError("milestone fractions must sum to 1");
        }
    }
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"batch_size", c.batch_size},
                       {"epochs", c.epochs},
                       {"seed", c.seed},
                       {"dropout_rate", c.dropout_rate},
                       {"validation_fraction", c.validation_fraction},
                       {"eval_batch_size", c.eval_batch_size}};
    if (!c.checkpoint_dir.empty()) j["checkpoint_dir"] = c.checkpoint_dir.generic_string();
    if (const auto* s = std::get_if<StepDecay>(&c.lr_schedule)) {
        j["lr_schedule"] = {{"type", "step_decay"},
                            {"init", s->init},
                            {"factor", s->factor},
                            {"every_n_epochs", s->every_n_epochs}};
    } else {
        auto phases = nlohmann::json::array();
        for (const auto& p : std::get<Milestones>(c.lr_schedule).phases) {
            phases.push_back({{"fraction", p.fraction}, {"lr", p.lr}});
        }
        j["lr_schedule"] = {{"type", "milestones"}, {"phases", phases}};
    }
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
    TrainConfig d;
    d.batch_size = j.value("batch_size", d.batch_size);
    d.epochs = j.value("epochs", d.epochs);
    d.seed = j.value("seed", d.seed);
    d.dropout_rate = j.value("dropout_rate", d.dropout_rate);
    d.validation_fraction = j.value("validation_fraction", d.validation_fraction);
    d.eval_batch_size = j.value("eval_batch_size", d.eval_batch_size);
    d.checkpoint_dir = j.value("checkpoint_dir", std::string());
    if (j.contains("lr_schedule")) {
        const auto& s = j["lr_schedule"];
        const std::string type = s.value("type", std::string("step_decay"));
        if (type == "step_decay") {
            StepDecay sd;
            sd.init = s.value("init", sd.init);
            sd.factor = s.value("factor", sd.factor);
            sd.every_n_epochs = s.value("every_n_epochs", sd.every_n_epochs);
            d.lr_schedule = sd;
        } else if (type == "milestones") {
            Milestones m;
            for (const auto& p : s.at("phases")) {
                m.phases.push_back({p.at("fraction").get<double>(), p.at("lr").get<double>()});
            }
            d.lr_schedule = m;
        } else {
            throw ConfigError("unknown lr_schedule type '" + type + "'");
        }
    }
    d.validate();
    c = std::move(d);
}

double lr_at(const TrainConfig& config, std::size_t epoch) {
    if (const auto* s = std::get_if<StepDecay>(&config.lr_schedule)) {
        return s->init * std::pow(s->factor, static_cast<double>(epoch / s->every_n_epochs));
    }
    const auto& phases = std::get<Milestones>(config.lr_schedule).phases;
    const double e = static_cast<double>(epoch);
    const double total = static_cast<double>(config.epochs);
    double end = 0.0;
    for (const auto& p : phases) {
        end += p.fraction;
        if (e < end * total) return p.lr;
    }
    return phases.back().lr;
}

// ---- optimizer -------------------------------------------------------------

void adam_step(std::vector<Tensor>& params, const std::vector<std::vector<double>>& grads,
               AdamState& state, double lr) {
    if (!(lr > 0.0)) throw ContractError("learning rate must be positive");
    if (params.size() != grads.size()) throw DimensionError("one gradient per parameter expected");
    for (std::size_t p = 0; p < params.size(); ++p) {
        if (grads[p].size() != params[p].size()) {
            throw DimensionError("gradient " + std::to_string(p) + " has " +
                                 std::to_string(grads[p].size()) + " entries, parameter has " +
                                 std::to_string(params[p].size()));
        }
        for (std::size_t i = 0; i < grads[p].size(); ++i) {
            if (!std::isfinite(grads[p][i])) {
                throw NumericError("non-finite gradient in parameter " + std::to_string(p) +
                                   " at entry " + std::to_string(i));
            }
        }
    }
    if (state.m.empty()) {
        for (const auto& t : params) {
            state.m.emplace_back(t.size(), 0.0);
            state.v.emplace_back(t.size(), 0.0);
        }
    }
    if (state.m.size() != params.size()) throw DimensionError("Adam state does not match parameters");
    ++state.t;
    const double t = static_cast<double>(state.t);
    const double c1 = 1.0 - std::pow(state.beta1, t);
    const double c2 = 1.0 - std::pow(state.beta2, t);
    for (std::size_t p = 0; p < params.size(); ++p) {
        auto w = params[p].mutable_data();
        auto& m = state.m[p];
        auto& v = state.v[p];
        const auto& g = grads[p];
        for (std::size_t i = 0; i < w.size(); ++i) {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            const double mh = m[i] / c1;
            const double vh = v[i] / c2;
            w[i] -= lr * mh / (std::sqrt(vh) + state.epsilon);
        }
    }
}

// ---- evaluation ------------------------------------------------------------

std::vector<int> predict(Model& model, const WindowedDataset& ds, std::size_t batch_size) {
    if (batch_size == 0) throw ConfigError("batch size must be >= 1");
    std::vector<int> out;
    out.reserve(ds.size());
    std::vector<std::size_t> idx;
    for (std::size_t b = 0; b < ds.size(); b += batch_size) {
        idx.resize(std::min(batch_size, ds.size() - b));
        std::iota(idx.begin(), idx.end(), b);
        ForwardContext ctx;
        ctx.mode = Mode::eval;
        const Tensor logits = model.forward(ds.batch(idx), ctx);
        const std::size_t K = logits.dim(1);
        const auto d = logits.data();
        for (std::size_t r = 0; r < idx.size(); ++r) {
            const auto row = d.subspan(r * K, K);
            out.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
        }
    }
    return out;
}

Evaluation evaluate_predictions(std::span<const int> truth, std::span<const int> predicted,
                                std::size_t n_classes) {
    if (truth.empty()) throw DataError("cannot evaluate on an empty dataset");
    if (truth.size() != predicted.size()) throw DimensionError("prediction count mismatch");
    Evaluation ev;
    ev.total = truth.size();
    ev.confusion.assign(n_classes, std::vector<std::size_t>(n_classes, 0));
    std::size_t correct = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        const auto t = static_cast<std::size_t>(truth[i]);
        const auto p = static_cast<std::size_t>(predicted[i]);
        if (truth[i] < 0 || t >= n_classes || predicted[i] < 0 || p >= n_classes) {
            throw DataError("label outside [0, " + std::to_string(n_classes) + ")");
        }
        ++ev.confusion[t][p];
        correct += (t == p);
    }
    ev.accuracy = static_cast<double>(correct) / static_cast<double>(ev.total);
    for (std::size_t c = 0; c < n_classes; ++c) {
        const std::size_t row = std::accumulate(ev.confusion[c].begin(), ev.confusion[c].end(),
                                                std::size_t{0});
        ev.per_class_accuracy.push_back(row ? static_cast<double>(ev.confusion[c][c]) /
                                                  static_cast<double>(row)
                                            : std::numeric_limits<double>::quiet_NaN());
    }
    return ev;
}

Evaluation evaluate(Model& model, const WindowedDataset& ds, std::size_t batch_size) {
    if (ds.empty()) throw DataError("cannot evaluate on an empty dataset");
    const auto pred = predict(model, ds, batch_size);
    return evaluate_predictions(ds.labels, pred, model.n_classes());
}

// ---- history ---------------------------------------------------------------

namespace {

std::string g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

void write_history_csv(const History& h, const fs::path& path) {
    const bool with_val =
        std::any_of(h.epochs.begin(), h.epochs.end(), [](const auto& r) { return r.val_acc.has_value(); });
    std::ostringstream os;
    os << "epoch,lr,train_loss,test_acc" << (with_val ? ",val_acc" : "") << '\n';
    for (const auto& r : h.epochs) {
        os << r.epoch << ',' << g17(r.lr) << ',' << g17(r.train_loss) << ',' << g17(r.test_acc);
        if (with_val) os << ',' << (r.val_acc ? g17(*r.val_acc) : std::string());
        os << '\n';
    }
    atomic_write(path, os.str());
}

void atomic_write(const fs::path& path, const std::string& bytes) {
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) throw DataError("write failed: " + tmp.string());
    }
    fs::rename(tmp, path);
}

// ---- snapshots -------------------------------------------------------------

ModelSnapshot snapshot(const Model& model) {
    ModelSnapshot s;
    for (const auto& p : model.parameters()) {
        const auto d = p.tensor.data();
        s.params.emplace_back(d.begin(), d.end());
    }
    for (const auto& b : model.buffers()) {
        const auto d = b.tensor.data();
        s.buffers.emplace_back(d.begin(), d.end());
    }
    return s;
}

void restore(Model& model, const ModelSnapshot& snap) {
    auto params = model.parameters();
    if (params.size() != snap.params.size()) throw DataError("snapshot does not match model parameters");
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto dst = params[i].tensor.mutable_data();
        if (dst.size() != snap.params[i].size()) {
            throw DataError("snapshot tensor '" + params[i].name + "' has the wrong size");
        }
        std::copy(snap.params[i].begin(), snap.params[i].end(), dst.begin());
    }
    auto bufs = model.buffers();
    if (bufs.size() != snap.buffers.size()) throw DataError("snapshot does not match model buffers");
    for (std::size_t i = 0; i < bufs.size(); ++i) {
        bufs[i].tensor = Tensor({snap.buffers[i].size()}, snap.buffers[i]);
    }
    model.load_buffers(bufs);
}

// ---- trainer ---------------------------------------------------------------

Trainer::Trainer(Model model, TrainConfig config)
    : model_(std::move(model)), config_(std::move(config)), rng_(config_.seed) {
    config_.validate();
}

Model Trainer::best_model() const {
    // Rebuild so the returned model does not share tensors with the trainer.
    Model m = build_model(model_.spec(), {model_.input_length(), model_.input_channels()},
                          model_.n_classes());
    restore(m, best_ ? *best_ : snapshot(model_));
    return m;
}

double Trainer::run_epoch(const WindowedDataset& train_ds, double lr) {
    const std::size_t N = train_ds.size();
    std::vector<std::size_t> order(N);
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = N; i > 1; --i) {
        std::swap(order[i - 1], order[static_cast<std::size_t>(rng_() % i)]);
    }
    std::vector<Tensor> params;
    for (auto& p : model_.parameters()) params.push_back(p.tensor);

    double loss_sum = 0.0;
    std::vector<std::vector<double>> grads(params.size());
    for (std::size_t b = 0; b < N; b += config_.batch_size) {
        const std::span<const std::size_t> idx(order.data() + b, std::min(config_.batch_size, N - b));
        ForwardContext ctx;
        ctx.mode = Mode::train;
        ctx.dropout_seed = rng_();
        const Tensor logits = model_.forward(train_ds.batch(idx), ctx);
        const auto labels = train_ds.batch_labels(idx);
        const Tensor loss = softmax_cross_entropy(logits, labels);
        backward(loss);
        for (std::size_t p = 0; p < params.size(); ++p) {
            grads[p] = params[p].grad();
            params[p].zero_grad();
        }
        adam_step(params, grads, adam_, lr);
        loss_sum += loss.item() * static_cast<double>(idx.size());
    }
    return loss_sum / static_cast<double>(N);
}

const History& Trainer::train(const WindowedDataset& train_ds, const WindowedDataset& test_ds,
                              const EpochCallback& on_epoch) {
    if (next_epoch_ >= config_.epochs || history_.halted) return history_;
    if (train_ds.empty()) throw DataError("training set is empty");
    if (test_ds.empty()) throw DataError("test set is empty");
    for (const auto* ds : {&train_ds, &test_ds}) {
        if (ds->window_len != model_.input_length() || ds->channels != model_.input_channels()) {
            throw DimensionError("dataset windows are " + std::to_string(ds->window_len) + " x " +
                                 std::to_string(ds->channels) + ", model expects " +
                                 std::to_string(model_.input_length()) + " x " +
                                 std::to_string(model_.input_channels()));
        }
    }

    const WindowedDataset* fit_set = &train_ds;
    WindowedDataset fit_part, val_part;
    if (config_.validation_fraction > 0.0) {
        // Fixed carving from the config seed, independent of the trainer RNG.
        auto [fit_idx, val_idx] =
            stratified_indices(train_ds.labels, 1.0 - config_.validation_fraction, config_.seed);
        fit_part = train_ds.subset(fit_idx);
        val_part = train_ds.subset(val_idx);
        if (fit_part.empty() || val_part.empty()) throw DataError("validation split left a side empty");
        fit_set = &fit_part;
    }

    for (std::size_t epoch = next_epoch_; epoch < config_.epochs; ++epoch) {
        const double lr = lr_at(config_, epoch);
        const ModelSnapshot good = snapshot(model_);
        const AdamState good_adam = adam_;
        const auto good_rng = rng_;
        EpochRecord rec;
        rec.epoch = epoch;
        rec.lr = lr;
        try {
            rec.train_loss = run_epoch(*fit_set, lr);
            if (!std::isfinite(rec.train_loss)) throw NumericError("non-finite training loss");
            rec.test_acc = evaluate(model_, test_ds, config_.eval_batch_size).accuracy;
            if (config_.validation_fraction > 0.0) {
                rec.val_acc = evaluate(model_, val_part, config_.eval_batch_size).accuracy;
            }
        } catch (const NumericError& e) {
            restore(model_, good);
            adam_ = good_adam;
            rng_ = good_rng;
            history_.halted = true;
            history_.halt_reason = "epoch " + std::to_string(epoch) + ": " + e.what();
            break;
        }
        const double sel = rec.val_acc ? *rec.val_acc : rec.test_acc;
        history_.epochs.push_back(rec);
        next_epoch_ = epoch + 1;
        const bool improved = !history_.best_epoch || sel > history_.best_acc;
        if (improved) {
            history_.best_epoch = epoch;
            history_.best_acc = sel;
            best_ = snapshot(model_);
        }
        if (!config_.checkpoint_dir.empty()) {
            save_checkpoint(config_.checkpoint_dir / "last.ckpt");
            if (improved) save_model(best_model(), config_.checkpoint_dir / "best.ckpt");
        }
        if (on_epoch) on_epoch(rec);
    }
    return history_;
}

// ---- checkpoint container --------------------------------------------------
//
//   8 bytes magic, u64 header length, JSON header, then the float64 payload of
//   every section listed in header["sections"] in order.

namespace {

constexpr char kModelMagic[8] = {'C', 'H', 'M', 'O', 'D', 'E', 'L', '1'};
constexpr char kTrainMagic[8] = {'C', 'H', 'T', 'R', 'A', 'I', 'N', '1'};
constexpr int kFormatVersion = 1;

struct Section {
    std::string name;
    std::vector<double> values;
};

std::string encode(const char (&magic)[8], nlohmann::json header, const std::vector<Section>& sections) {
    auto list = nlohmann::json::array();
    for (const auto& s : sections) list.push_back({{"name", s.name}, {"count", s.values.size()}});
    header["sections"] = list;
    header["format_version"] = kFormatVersion;
    const std::string h = header.dump();
    std::ostringstream os(std::ios::binary);
    os.write(magic, 8);
    binio::write_u64(os, h.size());
    os.write(h.data(), static_cast<std::streamsize>(h.size()));
    for (const auto& s : sections)
        for (double v : s.values) binio::write_f64(os, v);
    return os.str();
}

std::pair<nlohmann::json, std::vector<Section>> decode(const fs::path& path, const char (&magic)[8]) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("file not found: " + path.string());
    char m[8];
    if (!in.read(m, 8) || std::memcmp(m, magic, 8) != 0) {
        throw DataError(path.string() + ": not a " +
                        std::string(magic == kModelMagic ? "model" : "training") + " checkpoint");
    }
    const auto len = binio::read_u64(in);
    try {
        auto header = nlohmann::json::parse(binio::read_string(in, len));
        if (header.value("format_version", 0) != kFormatVersion) {
            throw DataError(path.string() + ": unsupported checkpoint version");
        }
        std::vector<Section> sections;
        for (const auto& s : header.at("sections")) {
            const auto count = s.at("count").get<std::size_t>();
            if (count > binio::remaining(in) / 8) throw DataError(path.string() + ": truncated file");
            Section sec{s.at("name"), std::vector<double>(count)};
            for (auto& v : sec.values) v = binio::read_f64(in);
            sections.push_back(std::move(sec));
        }
        return {std::move(header), std::move(sections)};
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path.string() + ": malformed checkpoint header (" + e.what() + ")");
    }
}

nlohmann::json model_header(const Model& model) {
    return nlohmann::json{{"spec", model.spec()},
                          {"shorthand", render_shorthand(model.spec())},
                          {"input_length", model.input_length()},
                          {"input_channels", model.input_channels()},
                          {"n_classes", model.n_classes()}};
}

void append_model(const Model& model, const ModelSnapshot& snap, const std::string& prefix,
                  std::vector<Section>& out) {
    const auto params = model.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) out.push_back({prefix + params[i].name, snap.params[i]});
    const auto bufs = model.buffers();
    for (std::size_t i = 0; i < bufs.size(); ++i) out.push_back({prefix + bufs[i].name, snap.buffers[i]});
}

Model model_from_header(const nlohmann::json& h) {
    const ModelSpec spec = h.at("spec").get<ModelSpec>();
    return build_model(spec, {h.at("input_length").get<std::size_t>(), h.at("input_channels").get<std::size_t>()},
                       h.at("n_classes").get<std::size_t>());
}

// Reads the sections named `prefix` + tensor name, in model order.
ModelSnapshot take_model(const Model& model, const std::vector<Section>& sections,
                         const std::string& prefix, std::size_t& pos) {
    ModelSnapshot snap;
    auto next = [&](const std::string& name) -> const std::vector<double>& {
        if (pos >= sections.size() || sections[pos].name != prefix + name) {
            throw DataError("checkpoint is missing tensor '" + prefix + name + "'");
        }
        return sections[pos++].values;
    };
    for (const auto& p : model.parameters()) snap.params.push_back(next(p.name));
    for (const auto& b : model.buffers()) snap.buffers.push_back(next(b.name));
    return snap;
}

nlohmann::json history_json(const History& h) {
    auto epochs = nlohmann::json::array();
    for (const auto& r : h.epochs) {
        nlohmann::json e{{"epoch", r.epoch}, {"lr", r.lr}, {"train_loss", r.train_loss}, {"test_acc", r.test_acc}};
        if (r.val_acc) e["val_acc"] = *r.val_acc;
        epochs.push_back(e);
    }
    nlohmann::json j{{"epochs", epochs}, {"best_acc", h.best_acc}, {"halted", h.halted},
                     {"halt_reason", h.halt_reason}};
    j["best_epoch"] = h.best_epoch ? nlohmann::json(*h.best_epoch) : nullptr;
    return j;
}

History history_from_json(const nlohmann::json& j) {
    History h;
    for (const auto& e : j.at("epochs")) {
        EpochRecord r{e.at("epoch"), e.at("lr"), e.at("train_loss"), e.at("test_acc"), std::nullopt};
        if (e.contains("val_acc")) r.val_acc = e["val_acc"].get<double>();
        h.epochs.push_back(r);
    }
    if (!j.at("best_epoch").is_null()) h.best_epoch = j["best_epoch"].get<std::size_t>();
    h.best_acc = j.at("best_acc");
    h.halted = j.at("halted");
    h.halt_reason = j.at("halt_reason");
    return h;
}

}  // namespace

void save_model(const Model& model, const fs::path& path) {
    std::vector<Section> sections;
    append_model(model, snapshot(model), "", sections);
    atomic_write(path, encode(kModelMagic, model_header(model), sections));
}

Model load_model(const fs::path& path) {
    auto [header, sections] = decode(path, kModelMagic);
    Model m = model_from_header(header);
    std::size_t pos = 0;
    restore(m, take_model(m, sections, "", pos));
    return m;
}

void Trainer::save_checkpoint(const fs::path& path) const {
    // The output location is not part of the training state.
    TrainConfig cfg = config_;
    cfg.checkpoint_dir.clear();
    nlohmann::json h{{"model", model_header(model_)},
                     {"train_config", cfg},
                     {"history", history_json(history_)},
                     {"next_epoch", next_epoch_},
                     {"has_best", best_.has_value()},
                     {"adam", {{"t", adam_.t}, {"beta1", adam_.beta1}, {"beta2", adam_.beta2},
                               {"epsilon", adam_.epsilon}}}};
    std::ostringstream rng_state;
    rng_state << rng_;
    h["rng_state"] = rng_state.str();

    std::vector<Section> sections;
    append_model(model_, snapshot(model_), "", sections);
    if (best_) append_model(model_, *best_, "best.", sections);
    const auto params = model_.parameters();
    for (std::size_t i = 0; i < adam_.m.size(); ++i) {
        sections.push_back({"adam.m." + params[i].name, adam_.m[i]});
        sections.push_back({"adam.v." + params[i].name, adam_.v[i]});
    }
    atomic_write(path, encode(kTrainMagic, h, sections));
}

Trainer Trainer::resume(const fs::path& path) {
    auto [h, sections] = decode(path, kTrainMagic);
    Model m = model_from_header(h.at("model"));
    std::size_t pos = 0;
    restore(m, take_model(m, sections, "", pos));
    std::optional<ModelSnapshot> best;
    if (h.at("has_best").get<bool>()) best = take_model(m, sections, "best.", pos);

    Trainer t(std::move(m), h.at("train_config").get<TrainConfig>());
    t.best_ = std::move(best);
    t.history_ = history_from_json(h.at("history"));
    t.next_epoch_ = h.at("next_epoch");
    const auto& a = h.at("adam");
    t.adam_.t = a.at("t");
    t.adam_.beta1 = a.at("beta1");
    t.adam_.beta2 = a.at("beta2");
    t.adam_.epsilon = a.at("epsilon");
    for (; pos < sections.size(); pos += 2) {
        if (pos + 1 >= sections.size() || sections[pos].name.rfind("adam.m.", 0) != 0) {
            throw DataError(path.string() + ": malformed optimizer state");
        }
        t.adam_.m.push_back(sections[pos].values);
        t.adam_.v.push_back(sections[pos + 1].values);
    }
    std::istringstream rs(h.at("rng_state").get<std::string>());
    rs >> t.rng_;
    if (!rs) throw DataError(path.string() + ": corrupt RNG state");
    return t;
}

}  // namespace condhar
