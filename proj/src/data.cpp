#include "condhar/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "binio.hpp"
#include "condhar/layers.hpp"

namespace condhar {

namespace fs = std::filesystem;

// ---- stream ----------------------------------------------------------------

void SensorStream::validate() const {
    if (!(sample_rate_hz > 0.0)) throw DataError("sample rate must be positive");
    if (channel_names.empty()) throw DataError("stream has no channels");
    const std::size_t L = labels.size();
    if (samples.size() != L * channels()) {
        throw DataError("channels have unequal lengths: " + std::to_string(samples.size()) +
                        " values for " + std::to_string(L) + " samples x " +
                        std::to_string(channels()) + " channels");
    }
    if (subjects.size() != L || sessions.size() != L) {
        throw DataError("provenance columns do not match the sample count");
    }
}

std::vector<std::pair<std::size_t, std::size_t>> SensorStream::session_runs() const {
    std::vector<std::pair<std::size_t, std::size_t>> runs;
    std::size_t begin = 0;
    for (std::size_t i = 1; i <= length(); ++i) {
        if (i == length() || subjects[i] != subjects[begin] || sessions[i] != sessions[begin]) {
            if (i > begin) runs.emplace_back(begin, i);
            begin = i;
        }
    }
    return runs;
}

// ---- canonical CSV ---------------------------------------------------------

namespace {

std::vector<std::string> split_on(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

bool parse_double(const std::string& s, double& out) {
    const std::string t = trim(s);
    if (t.empty()) return false;
    char* end = nullptr;
    out = std::strtod(t.c_str(), &end);
    return end == t.c_str() + t.size();
}

bool parse_int(const std::string& s, int& out) {
    const std::string t = trim(s);
    if (t.empty()) return false;
    char* end = nullptr;
    const long v = std::strtol(t.c_str(), &end, 10);
    if (end != t.c_str() + t.size()) return false;
    out = static_cast<int>(v);
    return true;
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

SensorStream ingest_canonical(const fs::path& path, NanPolicy nan_policy, IngestReport* report) {
    std::ifstream in(path);
    if (!in) throw DataError("file not found: " + path.string());
    IngestReport local;
    IngestReport& rep = report ? *report : local;
    SensorStream s;

    std::string line;
    std::size_t line_no = 0;
    bool have_rate = false;
    // header comment lines
    while (true) {
        const auto pos = in.tellg();
        if (!std::getline(in, line)) break;
        ++line_no;
        const std::string t = trim(line);
        if (t.empty()) continue;
        if (t[0] != '#') {
            in.seekg(pos);
            --line_no;
            break;
        }
        std::istringstream kv(t.substr(1));
        std::string tok;
        while (kv >> tok) {
            const auto eq = tok.find('=');
            if (eq == std::string::npos) continue;
            const std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
            if (key == "rate_hz") {
                if (!parse_double(val, s.sample_rate_hz) || !(s.sample_rate_hz > 0.0)) {
                    throw DataError(path.string() + ":" + std::to_string(line_no) +
                                    ": invalid rate_hz '" + val + "'");
                }
                have_rate = true;
            } else if (key == "classes") {
                s.class_names = split_on(val, '|');
            }
        }
    }
    if (!have_rate) throw DataError(path.string() + ": missing '# rate_hz=<float>' header line");

    if (!std::getline(in, line)) throw DataError(path.string() + ": missing column header row");
    ++line_no;
    auto header = split_on(trim(line), ',');
    for (auto& h : header) h = trim(h);
    if (header.size() < 4 || header[0] != "subject" || header[1] != "session" ||
        header[2] != "label") {
        throw DataError(path.string() + ":" + std::to_string(line_no) +
                        ": header must be 'subject,session,label,<channels...>'");
    }
    s.channel_names.assign(header.begin() + 3, header.end());
    const std::size_t C = s.channel_names.size();

    std::vector<double> row(C);
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        ++rep.rows_read;
        const auto cells = split_on(line, ',');
        const std::string where = path.string() + ":" + std::to_string(line_no);
        if (cells.size() != C + 3) {
            throw DataError(where + ": expected " + std::to_string(C + 3) + " cells, found " +
                            std::to_string(cells.size()));
        }
        int label = 0;
        if (!parse_int(cells[2], label) || label < 0) {
            throw DataError(where + ": invalid label '" + trim(cells[2]) + "'");
        }
        bool has_nan = false;
        for (std::size_t c = 0; c < C; ++c) {
            if (!parse_double(cells[3 + c], row[c])) {
                throw DataError(where + ": non-numeric value '" + trim(cells[3 + c]) +
                                "' in channel " + s.channel_names[c]);
            }
            if (!std::isfinite(row[c])) has_nan = true;
        }
        if (has_nan) {
            if (nan_policy == NanPolicy::error) throw DataError(where + ": non-finite value");
            ++rep.rows_dropped;
            rep.warnings.push_back(where + ": dropped row with non-finite value");
            continue;
        }
        s.subjects.push_back(trim(cells[0]));
        s.sessions.push_back(trim(cells[1]));
        s.labels.push_back(label);
        s.samples.insert(s.samples.end(), row.begin(), row.end());
    }
    s.validate();
    return s;
}

void write_canonical(const SensorStream& stream, const fs::path& path) {
    stream.validate();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << "# rate_hz=" << fmt_double(stream.sample_rate_hz);
    if (!stream.class_names.empty()) {
        out << " classes=";
        for (std::size_t i = 0; i < stream.class_names.size(); ++i) {
            out << (i ? "|" : "") << stream.class_names[i];
        }
    }
    out << "\nsubject,session,label";
    for (const auto& c : stream.channel_names) out << ',' << c;
    out << '\n';
    const std::size_t C = stream.channels();
    for (std::size_t i = 0; i < stream.length(); ++i) {
        out << stream.subjects[i] << ',' << stream.sessions[i] << ',' << stream.labels[i];
        for (std::size_t c = 0; c < C; ++c) out << ',' << fmt_double(stream.samples[i * C + c]);
        out << '\n';
    }
    if (!out) throw DataError("write failed: " + path.string());
}

// ---- WISDM -----------------------------------------------------------------

const std::vector<std::string>& wisdm_classes() {
    static const std::vector<std::string> names{"Walking", "Jogging", "Upstairs",
                                                "Downstairs", "Sitting", "Standing"};
    return names;
}

std::string ConversionReport::summary() const {
    std::ostringstream os;
    os << "records=" << records << " written=" << written << " skipped=" << skipped;
    for (const auto& [k, v] : class_counts) os << ' ' << k << '=' << v;
    return os.str();
}

ConversionReport convert_wisdm(const fs::path& raw_path, const fs::path& out_path) {
    std::ifstream in(raw_path, std::ios::binary);
    if (!in) throw DataError("file not found: " + raw_path.string());
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    SensorStream s;
    s.channel_names = {"acc_x", "acc_y", "acc_z"};
    s.sample_rate_hz = 20.0;
    s.class_names = wisdm_classes();
    ConversionReport rep;

    auto skip = [&rep](const std::string& rec) {
        ++rep.skipped;
        if (rep.skipped_samples.size() < 10) rep.skipped_samples.push_back(rec);
    };

    std::string rec;
    auto flush = [&]() {
        std::string r = trim(rec);
        rec.clear();
        // records may be separated by newlines without a ';'
        if (r.empty()) return;
        ++rep.records;
        auto f = split_on(r, ',');
        for (auto& x : f) x = trim(x);
        // tolerate one trailing empty field ("...,z,;")
        if (f.size() == 7 && f.back().empty()) f.pop_back();
        if (f.size() != 6) return skip(r);
        const auto& names = wisdm_classes();
        const auto it = std::find(names.begin(), names.end(), f[1]);
        if (it == names.end() || f[0].empty()) return skip(r);
        double xyz[3];
        for (int c = 0; c < 3; ++c) {
            if (!parse_double(f[3 + c], xyz[c]) || !std::isfinite(xyz[c])) return skip(r);
        }
        double ts = 0;
        if (!parse_double(f[2], ts)) return skip(r);
        s.subjects.push_back(f[0]);
        s.sessions.push_back(f[0]);
        s.labels.push_back(static_cast<int>(it - names.begin()));
        s.samples.insert(s.samples.end(), xyz, xyz + 3);
        ++rep.written;
        ++rep.class_counts[f[1]];
    };
    for (char c : text) {
        if (c == ';' || c == '\n') {
            flush();
        } else {
            rec += c;
        }
    }
    flush();
    if (rep.written == 0) throw DataError("no valid WISDM records in " + raw_path.string());
    write_canonical(s, out_path);
    return rep;
}

SensorStream resample(const SensorStream& stream, double to_hz) {
    if (!(to_hz > 0.0) || !(stream.sample_rate_hz > 0.0)) {
        throw DataError("resample: sample rates must be positive");
    }
    if (to_hz > stream.sample_rate_hz) {
        throw DataError("resample: cannot upsample from " + fmt_double(stream.sample_rate_hz) +
                        " Hz to " + fmt_double(to_hz) + " Hz");
    }
    const auto factor =
        static_cast<std::size_t>(std::llround(stream.sample_rate_hz / to_hz));
    if (factor <= 1) return stream;
    SensorStream out;
    out.channel_names = stream.channel_names;
    out.class_names = stream.class_names;
    out.sample_rate_hz = stream.sample_rate_hz / static_cast<double>(factor);
    const std::size_t C = stream.channels();
    for (const auto& [b, e] : stream.session_runs()) {
        for (std::size_t i = b; i < e; i += factor) {
            out.labels.push_back(stream.labels[i]);
            out.subjects.push_back(stream.subjects[i]);
            out.sessions.push_back(stream.sessions[i]);
            out.samples.insert(out.samples.end(), stream.samples.begin() + i * C,
                               stream.samples.begin() + (i + 1) * C);
        }
    }
    return out;
}

// ---- profiles --------------------------------------------------------------

bool SessionKey::matches(const std::string& subj, const std::string& sess) const {
    return (subject == "*" || subject == subj) && (session == "*" || session == sess);
}

double DatasetProfile::overlap_percent() const {
    if (window_len == 0) return 0.0;
    return 100.0 * (1.0 - static_cast<double>(step) / static_cast<double>(window_len));
}

void DatasetProfile::validate() const {
    if (window_len == 0) throw ConfigError("profile '" + name + "': window_len must be >= 1");
    if (step == 0) throw ConfigError("profile '" + name + "': step must be >= 1");
    if (test_step && *test_step == 0) throw ConfigError("profile '" + name + "': test_step must be >= 1");
    if (classes < 2) throw ConfigError("profile '" + name + "': need at least two classes");
    if (split == SplitStrategy::random && !(train_fraction > 0.0 && train_fraction < 1.0)) {
        throw ConfigError("profile '" + name + "': train_fraction must lie in (0,1)");
    }
    if (split == SplitStrategy::sessions && (train_sessions.empty() || test_sessions.empty())) {
        throw ConfigError("profile '" + name + "': session split needs train and test sessions");
    }
    if (resample_to_hz && !(*resample_to_hz > 0.0)) {
        throw ConfigError("profile '" + name + "': resample rate must be positive");
    }
}

void to_json(nlohmann::json& j, const DatasetProfile& p) {
    auto keys = [](const std::vector<SessionKey>& v) {
        auto arr = nlohmann::json::array();
        for (const auto& k : v) arr.push_back({{"subject", k.subject}, {"session", k.session}});
        return arr;
    };
    j = nlohmann::json{{"name", p.name},
                       {"window_len", p.window_len},
                       {"step", p.step},
                       {"normalization", p.normalization == Normalization::zscore ? "zscore" : "none"},
                       {"split", p.split == SplitStrategy::random ? "random" : "sessions"},
                       {"train_fraction", p.train_fraction},
                       {"train_sessions", keys(p.train_sessions)},
                       {"test_sessions", keys(p.test_sessions)},
                       {"classes", p.classes}};
    j["test_step"] = p.test_step ? nlohmann::json(*p.test_step) : nullptr;
    j["resample_to_hz"] = p.resample_to_hz ? nlohmann::json(*p.resample_to_hz) : nullptr;
}

void from_json(const nlohmann::json& j, DatasetProfile& p) {
    DatasetProfile d;
    d.name = j.value("name", std::string("custom"));
    d.window_len = j.at("window_len").get<std::size_t>();
    if (j.contains("step")) {
        d.step = j["step"].get<std::size_t>();
    } else if (j.contains("overlap_percent")) {
        d.step = step_for_overlap(d.window_len, j["overlap_percent"].get<double>());
    } else {
        throw ConfigError("profile '" + d.name + "' needs 'step' or 'overlap_percent'");
    }
    if (j.contains("test_step") && !j["test_step"].is_null()) d.test_step = j["test_step"].get<std::size_t>();
    if (j.contains("resample_to_hz") && !j["resample_to_hz"].is_null()) {
        d.resample_to_hz = j["resample_to_hz"].get<double>();
    }
    const std::string norm = j.value("normalization", std::string("none"));
    if (norm == "zscore") {
        d.normalization = Normalization::zscore;
    } else if (norm != "none") {
        throw ConfigError("unknown normalization '" + norm + "'");
    }
    const std::string sp = j.value("split", std::string("random"));
    if (sp == "sessions") {
        d.split = SplitStrategy::sessions;
    } else if (sp != "random") {
        throw ConfigError("unknown split strategy '" + sp + "'");
    }
    d.train_fraction = j.value("train_fraction", d.train_fraction);
    auto keys = [](const nlohmann::json& arr) {
        std::vector<SessionKey> v;
        for (const auto& k : arr) {
            v.push_back({k.value("subject", std::string("*")), k.value("session", std::string("*"))});
        }
        return v;
    };
    if (j.contains("train_sessions")) d.train_sessions = keys(j["train_sessions"]);
    if (j.contains("test_sessions")) d.test_sessions = keys(j["test_sessions"]);
    d.classes = j.at("classes").get<std::size_t>();
    d.validate();
    p = std::move(d);
}

std::size_t step_for_overlap(std::size_t window_len, double overlap_percent) {
    if (!(overlap_percent >= 0.0 && overlap_percent < 100.0)) {
        throw ConfigError("overlap must lie in [0, 100)");
    }
    const auto step = static_cast<std::size_t>(
        std::llround(static_cast<double>(window_len) * (1.0 - overlap_percent / 100.0)));
    return std::max<std::size_t>(1, step);
}

DatasetProfile wisdm_profile() {
    DatasetProfile p;
    p.name = "wisdm";
    p.window_len = 200;  // 10 s at 20 Hz
    p.step = 10;         // 0.5 s, 95 % overlap
    p.split = SplitStrategy::random;
    p.train_fraction = 0.7;
    p.classes = 6;
    return p;
}

DatasetProfile pamap2_profile() {
    DatasetProfile p;
    p.name = "pamap2";
    p.window_len = 512;
    // 78 % overlap: 512 * 0.22 = 112.64; 113 rounds to 77.9 %, 112 to 78.1 %.
    p.step = step_for_overlap(512, 78.0);
    p.resample_to_hz = 100.0 / 3.0;
    p.normalization = Normalization::zscore;
    p.split = SplitStrategy::random;
    p.train_fraction = 0.7;
    p.classes = 12;
    return p;
}

DatasetProfile unimib_profile() {
    DatasetProfile p;
    p.name = "unimib";
    p.window_len = 151;  // pre-windowed: one session per window
    p.step = 151;
    p.split = SplitStrategy::random;
    p.train_fraction = 0.7;
    p.classes = 17;
    return p;
}

DatasetProfile opportunity_profile() {
    DatasetProfile p;
    p.name = "opportunity";
    p.window_len = 64;
    p.step = 8;
    p.split = SplitStrategy::sessions;
    for (const char* subj : {"S1", "S2", "S3"}) {
        for (const char* sess : {"ADL1", "ADL2", "ADL3"}) p.train_sessions.push_back({subj, sess});
    }
    p.test_sessions = {{"*", "ADL4"}, {"*", "ADL5"}};
    p.classes = 18;
    return p;
}

// ---- windowed dataset ------------------------------------------------------

const char* to_string(SplitTag t) {
    switch (t) {
        case SplitTag::all: return "all";
        case SplitTag::train: return "train";
        case SplitTag::test: return "test";
    }
    return "all";
}

namespace {

SplitTag split_tag_from(const std::string& s) {
    if (s == "train") return SplitTag::train;
    if (s == "test") return SplitTag::test;
    if (s == "all") return SplitTag::all;
    throw DataError("unknown split tag '" + s + "'");
}

}  // namespace

std::span<const double> WindowedDataset::example(std::size_t i) const {
    const std::size_t sz = window_len * channels;
    return std::span<const double>(data).subspan(i * sz, sz);
}

Tensor WindowedDataset::batch(std::span<const std::size_t> indices) const {
    const std::size_t sz = window_len * channels;
    std::vector<double> out(indices.size() * sz);
    for (std::size_t k = 0; k < indices.size(); ++k) {
        if (indices[k] >= size()) throw DimensionError("example index out of range");
        std::copy_n(data.begin() + indices[k] * sz, sz, out.begin() + k * sz);
    }
    return Tensor({indices.size(), window_len, channels}, std::move(out));
}

std::vector<int> WindowedDataset::batch_labels(std::span<const std::size_t> indices) const {
    std::vector<int> out;
    out.reserve(indices.size());
    for (auto i : indices) out.push_back(labels.at(i));
    return out;
}

WindowedDataset WindowedDataset::subset(std::span<const std::size_t> indices) const {
    WindowedDataset out = *this;
    out.data.clear();
    out.labels.clear();
    out.subjects.clear();
    out.sessions.clear();
    out.starts.clear();
    const std::size_t sz = window_len * channels;
    for (auto i : indices) {
        if (i >= size()) throw DimensionError("example index out of range");
        out.data.insert(out.data.end(), data.begin() + i * sz, data.begin() + (i + 1) * sz);
        out.labels.push_back(labels[i]);
        out.subjects.push_back(subjects[i]);
        out.sessions.push_back(sessions[i]);
        out.starts.push_back(starts[i]);
    }
    return out;
}

std::vector<std::size_t> WindowedDataset::class_histogram() const {
    std::vector<std::size_t> h(n_classes, 0);
    for (int l : labels) {
        if (l >= 0 && static_cast<std::size_t>(l) < n_classes) ++h[l];
    }
    return h;
}

std::size_t window_count(std::size_t length, std::size_t window_len, std::size_t step) {
    if (step == 0 || window_len == 0) throw ConfigError("window length and step must be >= 1");
    if (length < window_len) return 0;
    return (length - window_len) / step + 1;
}

namespace {

template <class StepFn>
WindowedDataset segment_impl(const SensorStream& stream, std::size_t window_len,
                             std::size_t step, StepFn step_for, std::size_t n_classes,
                             std::vector<std::string>* warnings) {
    stream.validate();
    if (window_len == 0 || step == 0) throw ConfigError("window length and step must be >= 1");
    WindowedDataset ds;
    ds.window_len = window_len;
    ds.step = step;
    ds.channels = stream.channels();
    ds.n_classes = n_classes;
    ds.sample_rate_hz = stream.sample_rate_hz;
    const std::size_t C = stream.channels();
    std::vector<std::size_t> votes(n_classes);
    for (const auto& [b, e] : stream.session_runs()) {
        const std::size_t run_step = step_for(stream.subjects[b], stream.sessions[b]);
        const std::size_t n = window_count(e - b, window_len, run_step);
        for (std::size_t w = 0; w < n; ++w) {
            const std::size_t start = b + w * run_step;
            std::fill(votes.begin(), votes.end(), 0);
            for (std::size_t i = start; i < start + window_len; ++i) {
                const int l = stream.labels[i];
                if (l < 0 || static_cast<std::size_t>(l) >= n_classes) {
                    throw DataError("label " + std::to_string(l) + " at sample " +
                                    std::to_string(i) + " outside [0, " +
                                    std::to_string(n_classes) + ")");
                }
                ++votes[l];
            }
            const auto best = std::max_element(votes.begin(), votes.end());  // first max wins
            ds.labels.push_back(static_cast<int>(best - votes.begin()));
            ds.subjects.push_back(stream.subjects[b]);
            ds.sessions.push_back(stream.sessions[b]);
            ds.starts.push_back(start - b);
            ds.data.insert(ds.data.end(), stream.samples.begin() + start * C,
                           stream.samples.begin() + (start + window_len) * C);
        }
    }
    if (ds.empty() && warnings) {
        warnings->push_back("window length " + std::to_string(window_len) +
                            " exceeds every session; dataset is empty");
    }
    return ds;
}

}  // namespace

WindowedDataset segment_windows(const SensorStream& stream, std::size_t window_len,
                                std::size_t step, std::size_t n_classes,
                                std::vector<std::string>* warnings) {
    return segment_impl(
        stream, window_len, step, [step](const std::string&, const std::string&) { return step; },
        n_classes, warnings);
}

WindowedDataset segment_windows(const SensorStream& stream, const DatasetProfile& profile,
                                std::vector<std::string>* warnings) {
    profile.validate();
    auto step_for = [&profile](const std::string& subj, const std::string& sess) {
        if (profile.test_step && profile.split == SplitStrategy::sessions) {
            for (const auto& k : profile.test_sessions) {
                if (k.matches(subj, sess)) return *profile.test_step;
            }
        }
        return profile.step;
    };
    return segment_impl(stream, profile.window_len, profile.step, step_for, profile.classes,
                        warnings);
}

NormalizationStats fit_normalization(const WindowedDataset& train,
                                     std::vector<std::string>* warnings) {
    if (train.empty()) throw DataError("cannot fit normalization on an empty dataset");
    const std::size_t C = train.channels;
    const std::size_t N = train.size() * train.window_len;
    NormalizationStats st;
    st.mean.assign(C, 0.0);
    st.std.assign(C, 0.0);
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t c = 0; c < C; ++c) st.mean[c] += train.data[i * C + c];
    for (auto& m : st.mean) m /= static_cast<double>(N);
    for (std::size_t i = 0; i < N; ++i) {
        for (std::size_t c = 0; c < C; ++c) {
            const double d = train.data[i * C + c] - st.mean[c];
            st.std[c] += d * d;
        }
    }
    for (std::size_t c = 0; c < C; ++c) {
        st.std[c] = std::sqrt(st.std[c] / static_cast<double>(N));
        if (st.std[c] < 1e-8) {
            if (warnings) {
                warnings->push_back("channel " + std::to_string(c) +
                                    " has zero variance; using unit scale");
            }
            st.std[c] = 1.0;
        }
    }
    return st;
}

WindowedDataset apply_normalization(const WindowedDataset& ds, const NormalizationStats& stats) {
    if (stats.mean.size() != ds.channels || stats.std.size() != ds.channels) {
        throw DimensionError("normalization statistics do not match the channel count");
    }
    WindowedDataset out = ds;
    const std::size_t C = ds.channels;
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        const std::size_t c = i % C;
        out.data[i] = (out.data[i] - stats.mean[c]) / stats.std[c];
    }
    out.normalization = stats;
    return out;
}

std::pair<WindowedDataset, WindowedDataset> normalize(const WindowedDataset& train,
                                                      const WindowedDataset& test,
                                                      Normalization policy,
                                                      std::vector<std::string>* warnings) {
    if (policy == Normalization::none) return {train, test};
    const auto stats = fit_normalization(train, warnings);
    return {apply_normalization(train, stats), apply_normalization(test, stats)};
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> stratified_indices(
    std::span<const int> labels, double train_fraction, std::uint64_t seed) {
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
        throw ConfigError("train fraction must lie in (0,1)");
    }
    int max_label = -1;
    for (int l : labels) max_label = std::max(max_label, l);
    std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(max_label + 1));
    for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);

    std::mt19937_64 rng(seed);
    for (auto& v : by_class) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(rng() % i);
            std::swap(v[i - 1], v[j]);
        }
    }
    // Largest-remainder allocation hits round(fraction * N) exactly.
    const auto total = static_cast<std::size_t>(
        std::llround(train_fraction * static_cast<double>(labels.size())));
    std::vector<std::size_t> take(by_class.size());
    std::vector<std::pair<double, std::size_t>> remainders;
    std::size_t assigned = 0;
    for (std::size_t c = 0; c < by_class.size(); ++c) {
        const double exact = train_fraction * static_cast<double>(by_class[c].size());
        take[c] = static_cast<std::size_t>(std::floor(exact));
        assigned += take[c];
        remainders.emplace_back(-(exact - std::floor(exact)), c);
    }
    std::sort(remainders.begin(), remainders.end());
    for (std::size_t k = 0; assigned < total && k < remainders.size(); ++k) {
        const std::size_t c = remainders[k].second;
        if (take[c] < by_class[c].size()) {
            ++take[c];
            ++assigned;
        }
    }
    std::vector<std::size_t> train, test;
    for (std::size_t c = 0; c < by_class.size(); ++c) {
        train.insert(train.end(), by_class[c].begin(), by_class[c].begin() + take[c]);
        test.insert(test.end(), by_class[c].begin() + take[c], by_class[c].end());
    }
    std::sort(train.begin(), train.end());
    std::sort(test.begin(), test.end());
    return {train, test};
}

std::pair<WindowedDataset, WindowedDataset> split(const WindowedDataset& ds,
                                                  const DatasetProfile& profile,
                                                  std::uint64_t seed,
                                                  std::vector<std::string>* warnings) {
    profile.validate();
    std::vector<std::size_t> train_idx, test_idx;
    if (profile.split == SplitStrategy::random) {
        std::tie(train_idx, test_idx) = stratified_indices(ds.labels, profile.train_fraction, seed);
    } else {
        std::size_t unassigned = 0;
        for (std::size_t i = 0; i < ds.size(); ++i) {
            const auto hit = [&](const std::vector<SessionKey>& keys) {
                return std::any_of(keys.begin(), keys.end(), [&](const SessionKey& k) {
                    return k.matches(ds.subjects[i], ds.sessions[i]);
                });
            };
            const bool tr = hit(profile.train_sessions), te = hit(profile.test_sessions);
            if (tr && te) {
                throw ConfigError("session " + ds.subjects[i] + "/" + ds.sessions[i] +
                                  " is listed for both train and test");
            }
            if (tr) {
                train_idx.push_back(i);
            } else if (te) {
                test_idx.push_back(i);
            } else {
                ++unassigned;
            }
        }
        if (unassigned && warnings) {
            warnings->push_back(std::to_string(unassigned) +
                                " windows belong to sessions outside the split lists");
        }
    }
    auto train = ds.subset(train_idx);
    auto test = ds.subset(test_idx);
    train.split_tag = SplitTag::train;
    test.split_tag = SplitTag::test;
    if (warnings) {
        const auto htr = train.class_histogram(), hte = test.class_histogram();
        for (std::size_t c = 0; c < ds.n_classes; ++c) {
            if (htr[c] == 0 || hte[c] == 0) {
                warnings->push_back("class " + std::to_string(c) + " is empty in the " +
                                    (htr[c] == 0 ? "train" : "test") + " split");
            }
        }
    }
    return {std::move(train), std::move(test)};
}

// ---- dataset files ---------------------------------------------------------

namespace {

constexpr char kDatasetMagic[8] = {'C', 'H', 'D', 'S', '0', '0', '0', '1'};

}  // namespace

using binio::read_f64;
using binio::read_u64;
using binio::write_f64;
using binio::write_u64;

void save_dataset(const WindowedDataset& ds, const fs::path& path) {
    nlohmann::json h{{"window_len", ds.window_len},
                     {"step", ds.step},
                     {"channels", ds.channels},
                     {"n_classes", ds.n_classes},
                     {"sample_rate_hz", ds.sample_rate_hz},
                     {"count", ds.size()},
                     {"labels", ds.labels},
                     {"subjects", ds.subjects},
                     {"sessions", ds.sessions},
                     {"starts", ds.starts},
                     {"label_policy", ds.label_policy},
                     {"split", to_string(ds.split_tag)}};
    if (ds.normalization) {
        h["normalization"] = {{"mean", ds.normalization->mean}, {"std", ds.normalization->std}};
    } else {
        h["normalization"] = nullptr;
    }
    const std::string header = h.dump();
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw DataError("cannot write " + path.string());
        out.write(kDatasetMagic, 8);
        write_u64(out, header.size());
        out.write(header.data(), static_cast<std::streamsize>(header.size()));
        for (double v : ds.data) write_f64(out, v);
        if (!out) throw DataError("write failed: " + path.string());
    }
    fs::rename(tmp, path);
}

WindowedDataset load_dataset(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("file not found: " + path.string());
    char magic[8];
    if (!in.read(magic, 8) || std::memcmp(magic, kDatasetMagic, 8) != 0) {
        throw DataError(path.string() + ": not a dataset file");
    }
    const std::uint64_t hlen = read_u64(in);
    const std::string header = binio::read_string(in, hlen);
    nlohmann::json h;
    WindowedDataset ds;
    std::size_t count = 0;
    try {
        h = nlohmann::json::parse(header);
        ds.window_len = h.at("window_len");
        ds.step = h.at("step");
        ds.channels = h.at("channels");
        ds.n_classes = h.at("n_classes");
        ds.sample_rate_hz = h.at("sample_rate_hz");
        ds.labels = h.at("labels").get<std::vector<int>>();
        ds.subjects = h.at("subjects").get<std::vector<std::string>>();
        ds.sessions = h.at("sessions").get<std::vector<std::string>>();
        ds.starts = h.at("starts").get<std::vector<std::size_t>>();
        ds.label_policy = h.at("label_policy");
        ds.split_tag = split_tag_from(h.at("split"));
        if (!h.at("normalization").is_null()) {
            ds.normalization = NormalizationStats{h["normalization"]["mean"], h["normalization"]["std"]};
        }
        count = h.at("count");
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path.string() + ": malformed dataset header (" + e.what() + ")");
    }
    if (ds.labels.size() != count) throw DataError(path.string() + ": label count mismatch");
    if (count * ds.window_len * ds.channels > binio::remaining(in) / 8) {
        throw DataError(path.string() + ": truncated file");
    }
    ds.data.resize(count * ds.window_len * ds.channels);
    for (auto& v : ds.data) v = read_f64(in);
    return ds;
}

std::uint64_t fnv1a64(std::span<const unsigned char> bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string file_hash(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("file not found: " + path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(bytes)));
    return buf;
}

// ---- synthetic -------------------------------------------------------------

namespace {

double gaussian(std::mt19937_64& rng) {
    const double u1 = std::max(unit_uniform(rng), 1e-300);
    const double u2 = unit_uniform(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace

std::pair<WindowedDataset, WindowedDataset> make_motif_mixture(const MotifMixtureConfig& cfg) {
    if (cfg.classes < 2 || cfg.channels < 2 || cfg.window_len < 8) {
        throw ConfigError("motif mixture needs >= 2 classes, >= 2 channels, window >= 8");
    }
    // Period (in samples) of each motif shape. Mode 1 reuses the mode-0 shapes
    // rotated by one class.
    std::vector<double> periods(cfg.classes);
    for (std::size_t c = 0; c < cfg.classes; ++c) {
        periods[c] = 4.0 * std::pow(1.6, static_cast<double>(c));
    }
    std::mt19937_64 rng(cfg.seed);
    auto make = [&](std::size_t per_class, SplitTag tag) {
        WindowedDataset ds;
        ds.window_len = cfg.window_len;
        ds.step = cfg.window_len;
        ds.channels = cfg.channels;
        ds.n_classes = cfg.classes;
        ds.sample_rate_hz = 1.0;
        ds.split_tag = tag;
        ds.label_policy = "synthetic";
        for (std::size_t k = 0; k < per_class; ++k) {
            for (std::size_t c = 0; c < cfg.classes; ++c) {
                const std::size_t mode = rng() % 2;
                const double period = periods[(c + mode) % cfg.classes];
                const double phase = 2.0 * std::numbers::pi * unit_uniform(rng);
                const double amp = 0.8 + 0.4 * unit_uniform(rng);
                for (std::size_t t = 0; t < cfg.window_len; ++t) {
                    const double arg = 2.0 * std::numbers::pi * static_cast<double>(t) / period + phase;
                    for (std::size_t ch = 0; ch < cfg.channels; ++ch) {
                        double v = amp * std::sin(arg + static_cast<double>(ch) * std::numbers::pi / 2.0);
                        if (ch == mode) v += cfg.mode_offset;
                        v += cfg.noise * gaussian(rng);
                        ds.data.push_back(v);
                    }
                }
                ds.labels.push_back(static_cast<int>(c));
                ds.subjects.push_back("synthetic");
                ds.sessions.push_back("mode" + std::to_string(mode));
                ds.starts.push_back(0);
            }
        }
        return ds;
    };
    auto train = make(cfg.train_per_class, SplitTag::train);
    auto test = make(cfg.test_per_class, SplitTag::test);
    return {std::move(train), std::move(test)};
}

}  // namespace condhar
