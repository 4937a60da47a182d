#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "condhar/tensor.hpp"
#include "json.hpp"

namespace condhar {

/// Multichannel sensor recording with per-sample labels and provenance.
/// Consecutive samples sharing (subject, session) form one session.
struct SensorStream {
    std::vector<std::string> channel_names;
    double sample_rate_hz = 0.0;
    std::vector<double> samples;  // [length x channels], row-major
    std::vector<int> labels;
    std::vector<std::string> subjects;
    std::vector<std::string> sessions;
    std::vector<std::string> class_names;  // optional, index = label id

    std::size_t channels() const { return channel_names.size(); }
    std::size_t length() const { return labels.size(); }
    void validate() const;  // throws DataError
    // [begin, end) sample ranges of each session, in stream order.
    std::vector<std::pair<std::size_t, std::size_t>> session_runs() const;
};

// ---- canonical CSV ---------------------------------------------------------
//
//   # rate_hz=20 [classes=Walking|Jogging|...]
//   subject,session,label,<ch1>,<ch2>,...
//   33,33,1,-0.69,12.68,0.50
//
// UTF-8, LF line endings, '.' decimal separator. Pre-windowed datasets are
// stored with one session per window.

enum class NanPolicy { error, drop_row };

struct IngestReport {
    std::size_t rows_read = 0;
    std::size_t rows_dropped = 0;
    std::vector<std::string> warnings;
};

SensorStream ingest_canonical(const std::filesystem::path& path,
                              NanPolicy nan_policy = NanPolicy::error,
                              IngestReport* report = nullptr);
void write_canonical(const SensorStream& stream, const std::filesystem::path& path);

// ---- WISDM raw text --------------------------------------------------------

// Activity names in label-id order.
const std::vector<std::string>& wisdm_classes();

struct ConversionReport {
    std::size_t records = 0;
    std::size_t written = 0;
    std::size_t skipped = 0;
    std::map<std::string, std::size_t> class_counts;
    std::vector<std::string> skipped_samples;  // first few offending records

    std::string summary() const;
};

// Parses user,activity,timestamp,x,y,z records terminated by ';' and writes a
// 20 Hz canonical file with subject = session = user. Malformed records are
// skipped and counted.
ConversionReport convert_wisdm(const std::filesystem::path& raw_path,
                               const std::filesystem::path& out_path);

// Keeps every round(from/to)-th sample of each session, starting at the
// session's first sample.
SensorStream resample(const SensorStream& stream, double to_hz);

// ---- profiles --------------------------------------------------------------

enum class Normalization { none, zscore };
enum class SplitStrategy { random, sessions };

struct SessionKey {
    std::string subject;  // "*" matches any
    std::string session;
    bool matches(const std::string& subj, const std::string& sess) const;
    bool operator==(const SessionKey&) const = default;
};

struct DatasetProfile {
    std::string name;
    std::size_t window_len = 0;
    std::size_t step = 0;
    // Step for windows of test sessions (session splits only); defaults to `step`.
    std::optional<std::size_t> test_step;
    std::optional<double> resample_to_hz;
    Normalization normalization = Normalization::none;
    SplitStrategy split = SplitStrategy::random;
    double train_fraction = 0.7;
    std::vector<SessionKey> train_sessions;
    std::vector<SessionKey> test_sessions;
    std::size_t classes = 0;

    double overlap_percent() const;
    void validate() const;  // throws ConfigError
    bool operator==(const DatasetProfile&) const = default;
};

void to_json(nlohmann::json& j, const DatasetProfile& p);
void from_json(const nlohmann::json& j, DatasetProfile& p);

// Step that realizes an overlap percentage: round(window * (1 - overlap/100)).
std::size_t step_for_overlap(std::size_t window_len, double overlap_percent);

// Built-in recipes for the four benchmark datasets.
DatasetProfile wisdm_profile();
DatasetProfile pamap2_profile();
DatasetProfile unimib_profile();
DatasetProfile opportunity_profile();

// ---- windowed datasets -----------------------------------------------------

struct NormalizationStats {
    std::vector<double> mean;
    std::vector<double> std;
    bool operator==(const NormalizationStats&) const = default;
};

enum class SplitTag { all, train, test };
const char* to_string(SplitTag t);

inline constexpr const char* kMajorityLabelPolicy = "majority-vote, ties to lowest class id";

struct WindowedDataset {
    std::size_t window_len = 0;
    std::size_t step = 0;
    std::size_t channels = 0;
    std::size_t n_classes = 0;
    double sample_rate_hz = 0.0;
    std::vector<double> data;  // [count x window_len x channels]
    std::vector<int> labels;
    std::vector<std::string> subjects;
    std::vector<std::string> sessions;
    std::vector<std::size_t> starts;  // window start within its session
    std::string label_policy = kMajorityLabelPolicy;
    std::optional<NormalizationStats> normalization;
    SplitTag split_tag = SplitTag::all;

    std::size_t size() const { return labels.size(); }
    bool empty() const { return labels.empty(); }
    std::span<const double> example(std::size_t i) const;
    // [indices.size() x window_len x channels]
    Tensor batch(std::span<const std::size_t> indices) const;
    std::vector<int> batch_labels(std::span<const std::size_t> indices) const;
    WindowedDataset subset(std::span<const std::size_t> indices) const;
    std::vector<std::size_t> class_histogram() const;
    bool operator==(const WindowedDataset&) const = default;
};

// floor((L - window) / step) + 1 for L >= window, else 0.
std::size_t window_count(std::size_t length, std::size_t window_len, std::size_t step);

// Slides a window over every session independently; windows never cross a
// session boundary. Output order: session order, then start index.
WindowedDataset segment_windows(const SensorStream& stream, const DatasetProfile& profile,
                                std::vector<std::string>* warnings = nullptr);
// Same, with an explicit step.
WindowedDataset segment_windows(const SensorStream& stream, std::size_t window_len,
                                std::size_t step, std::size_t n_classes,
                                std::vector<std::string>* warnings = nullptr);

// Per-channel mean/std over every sample of every window. Channels with
// std < 1e-8 get std = 1 and a warning.
NormalizationStats fit_normalization(const WindowedDataset& train,
                                     std::vector<std::string>* warnings = nullptr);
WindowedDataset apply_normalization(const WindowedDataset& ds, const NormalizationStats& stats);

// Fits on `train` only, applies the same statistics to both.
std::pair<WindowedDataset, WindowedDataset> normalize(const WindowedDataset& train,
                                                      const WindowedDataset& test,
                                                      Normalization policy,
                                                      std::vector<std::string>* warnings = nullptr);

// Random: seeded, stratified per class, exactly round(fraction * N) training
// examples. Sessions: partitions windows by the profile's session lists.
std::pair<WindowedDataset, WindowedDataset> split(const WindowedDataset& ds,
                                                  const DatasetProfile& profile,
                                                  std::uint64_t seed,
                                                  std::vector<std::string>* warnings = nullptr);

// Stratified index split used by split() and by validation carving.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> stratified_indices(
    std::span<const int> labels, double train_fraction, std::uint64_t seed);

// ---- dataset files ---------------------------------------------------------

void save_dataset(const WindowedDataset& ds, const std::filesystem::path& path);
WindowedDataset load_dataset(const std::filesystem::path& path);

std::uint64_t fnv1a64(std::span<const unsigned char> bytes);
std::string file_hash(const std::filesystem::path& path);  // 16 hex digits

// ---- synthetic data --------------------------------------------------------

/// Classes that are each a mixture of two temporal motifs. The mode of an
/// example shifts the channel means, and the same motif shape stands for
/// different classes in different modes, so a single fixed kernel bank has to
/// cover every (class, mode) pattern.
struct MotifMixtureConfig {
    std::size_t classes = 4;
    std::size_t window_len = 64;
    std::size_t channels = 2;
    std::size_t train_per_class = 150;
    std::size_t test_per_class = 100;
    double noise = 1.0;
    double mode_offset = 1.5;
    std::uint64_t seed = 0;
};

std::pair<WindowedDataset, WindowedDataset> make_motif_mixture(const MotifMixtureConfig& cfg);

}  // namespace condhar
