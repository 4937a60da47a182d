#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "condhar/analysis.hpp"
#include "condhar/archspec.hpp"
#include "condhar/data.hpp"
#include "condhar/trainer.hpp"
#include "json.hpp"

namespace condhar {

// ---- run configuration -----------------------------------------------------

enum class SourceKind { canonical, synthetic, windows };

struct DataSource {
    SourceKind kind = SourceKind::synthetic;
    std::filesystem::path path;        // canonical CSV
    std::filesystem::path train_path;  // pre-segmented dataset files
    std::filesystem::path test_path;
    DatasetProfile profile;            // canonical only
    MotifMixtureConfig motif;          // synthetic only
    // Stratified share of the windowed data kept before splitting (1 = all).
    double subset_fraction = 1.0;
    std::vector<std::string> class_names;
};

struct RunConfig {
    std::string name = "run";
    DataSource data;
    ModelSpec model;
    TrainConfig train;
    std::uint64_t seed = 0;  // model init, split, shuffling and dropout
    std::filesystem::path output_dir = "runs/run";

    void validate() const;  // throws ConfigError
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

// Relative data paths resolve against the config file's directory.
RunConfig load_run_config(const std::filesystem::path& path);

struct PreparedData {
    WindowedDataset train;
    WindowedDataset test;
    std::vector<std::string> class_names;
    std::vector<std::string> warnings;
};

PreparedData prepare_data(const RunConfig& config);

// ---- run directories -------------------------------------------------------

// Exclusive lock on a run directory, released on destruction.
class RunLock {
public:
    explicit RunLock(const std::filesystem::path& dir);
    ~RunLock();
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

private:
    std::filesystem::path file_;
};

struct RunResult {
    History history;
    Evaluation best_evaluation;
    FlopsReport flops;
    std::filesystem::path dir;
};

// Trains per `config` into config.output_dir: config.json, history.csv,
// best.ckpt (model), final.ckpt (training state), report.json, report.txt.
// With `resume_from`, continues a training-state checkpoint instead.
RunResult run_training(const RunConfig& config, std::ostream& log,
                       const std::optional<std::filesystem::path>& resume_from = std::nullopt);

// Accepts model checkpoints and training-state checkpoints.
Model load_any_model(const std::filesystem::path& path);

// ---- entry point -----------------------------------------------------------

enum ExitCode : int { exit_ok = 0, exit_usage = 1, exit_data = 2, exit_numeric = 3 };

// Parses argv and dispatches convert | segment | train | analyze. Errors are
// reported on `err` and mapped to exit codes.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace condhar
