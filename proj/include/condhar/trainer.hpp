#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "condhar/archspec.hpp"
#include "condhar/data.hpp"
#include "json.hpp"

namespace condhar {

// ---- configuration ---------------------------------------------------------

// lr = init * factor^floor(epoch / every_n_epochs)
struct StepDecay {
    double init = 1e-3;
    double factor = 1.0;
    std::size_t every_n_epochs = 1;
    bool operator==(const StepDecay&) const = default;
};

// Consecutive phases, each lasting `fraction` of the configured epochs.
struct Milestones {
    struct Phase {
        double fraction = 1.0;
        double lr = 1e-3;
        bool operator==(const Phase&) const = default;
    };
    std::vector<Phase> phases;
    bool operator==(const Milestones&) const = default;
};

using LrSchedule = std::variant<StepDecay, Milestones>;

struct TrainConfig {
    std::size_t batch_size = 32;
    std::size_t epochs = 400;
    LrSchedule lr_schedule = StepDecay{};
    std::uint64_t seed = 0;
    double dropout_rate = 0.5;  // copied into the model spec by callers that build models
    // When set, last.ckpt / best.ckpt are written here during training.
    std::filesystem::path checkpoint_dir;
    // > 0 carves a stratified validation split out of the training set and
    // selects the best epoch on it instead of on the test set.
    double validation_fraction = 0.0;
    std::size_t eval_batch_size = 256;

    void validate() const;  // throws ConfigError
    bool operator==(const TrainConfig&) const = default;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

double lr_at(const TrainConfig& config, std::size_t epoch);

// ---- optimizer -------------------------------------------------------------

struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::uint64_t t = 0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;

    bool operator==(const AdamState&) const = default;
};

// One bias-corrected Adam update. Buffers are created on the first call.
// Every gradient is checked before any parameter is touched; a non-finite
// entry throws NumericError and leaves params and state unchanged.
void adam_step(std::vector<Tensor>& params, const std::vector<std::vector<double>>& grads,
               AdamState& state, double lr);

// ---- evaluation ------------------------------------------------------------

struct Evaluation {
    double accuracy = 0.0;
    std::vector<double> per_class_accuracy;  // NaN for classes absent from the set
    std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
    std::size_t total = 0;
};

std::vector<int> predict(Model& model, const WindowedDataset& ds, std::size_t batch_size = 256);
Evaluation evaluate_predictions(std::span<const int> truth, std::span<const int> predicted,
                                std::size_t n_classes);
// Eval mode: running BN statistics, no dropout. Throws DataError on an empty set.
Evaluation evaluate(Model& model, const WindowedDataset& ds, std::size_t batch_size = 256);

// ---- training --------------------------------------------------------------

struct EpochRecord {
    std::size_t epoch = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    double test_acc = 0.0;
    std::optional<double> val_acc;
    bool operator==(const EpochRecord&) const = default;
};

struct History {
    std::vector<EpochRecord> epochs;
    std::optional<std::size_t> best_epoch;
    double best_acc = 0.0;  // on the selection set
    bool halted = false;
    std::string halt_reason;
    bool operator==(const History&) const = default;
};

void write_history_csv(const History& h, const std::filesystem::path& path);

// Weights and BN statistics of a model, detached from it.
struct ModelSnapshot {
    std::vector<std::vector<double>> params;
    std::vector<std::vector<double>> buffers;
    bool operator==(const ModelSnapshot&) const = default;
};

ModelSnapshot snapshot(const Model& model);
void restore(Model& model, const ModelSnapshot& snap);

class Trainer {
public:
    Trainer(Model model, TrainConfig config);

    using EpochCallback = std::function<void(const EpochRecord&)>;

    // Runs the remaining epochs (all of them for a fresh trainer, the rest
    // after resume()). A NaN loss or gradient restores the state from the
    // start of the failing epoch and stops.
    const History& train(const WindowedDataset& train_ds, const WindowedDataset& test_ds,
                         const EpochCallback& on_epoch = {});

    Model& model() { return model_; }
    const TrainConfig& config() const { return config_; }
    void set_checkpoint_dir(std::filesystem::path dir) { config_.checkpoint_dir = std::move(dir); }
    // Changes the epoch budget, e.g. to extend a resumed run. Milestone
    // schedules are rescaled to the new budget.
    void set_epochs(std::size_t epochs) { config_.epochs = epochs; }
    const History& history() const { return history_; }
    const AdamState& adam() const { return adam_; }
    std::size_t next_epoch() const { return next_epoch_; }
    // Model carrying the weights of the best epoch (the current weights when
    // no epoch has run).
    Model best_model() const;

    // Full training state: model, optimizer, RNG, history, best snapshot.
    void save_checkpoint(const std::filesystem::path& path) const;
    static Trainer resume(const std::filesystem::path& path);

private:
    double run_epoch(const WindowedDataset& train_ds, double lr);

    Model model_;
    TrainConfig config_;
    AdamState adam_;
    std::mt19937_64 rng_;
    History history_;
    std::size_t next_epoch_ = 0;
    std::optional<ModelSnapshot> best_;
};

// ---- model checkpoints -----------------------------------------------------

// Model-only checkpoint (spec, input shape, classes, weights, BN statistics).
void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);

// Writes `bytes` to a sibling temp file and renames it over `path`.
void atomic_write(const std::filesystem::path& path, const std::string& bytes);

}  // namespace condhar
