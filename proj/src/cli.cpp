#include "condhar/cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"

namespace condhar {

namespace fs = std::filesystem;

// ---- run configuration -----------------------------------------------------

namespace {

const char* to_string(SourceKind k) {
    switch (k) {
        case SourceKind::canonical: return "canonical";
        case SourceKind::synthetic: return "synthetic";
        case SourceKind::windows: return "windows";
    }
    return "synthetic";
}

SourceKind source_kind_from(const std::string& s) {
    if (s == "canonical") return SourceKind::canonical;
    if (s == "synthetic") return SourceKind::synthetic;
    if (s == "windows") return SourceKind::windows;
    throw ConfigError("unknown data source '" + s + "' (canonical, synthetic, windows)");
}

nlohmann::json motif_json(const MotifMixtureConfig& m) {
    return {{"classes", m.classes},           {"window_len", m.window_len},
            {"channels", m.channels},         {"train_per_class", m.train_per_class},
            {"test_per_class", m.test_per_class}, {"noise", m.noise},
            {"mode_offset", m.mode_offset},   {"seed", m.seed}};
}

MotifMixtureConfig motif_from(const nlohmann::json& j) {
    MotifMixtureConfig m;
    m.classes = j.value("classes", m.classes);
    m.window_len = j.value("window_len", m.window_len);
    m.channels = j.value("channels", m.channels);
    m.train_per_class = j.value("train_per_class", m.train_per_class);
    m.test_per_class = j.value("test_per_class", m.test_per_class);
    m.noise = j.value("noise", m.noise);
    m.mode_offset = j.value("mode_offset", m.mode_offset);
    m.seed = j.value("seed", m.seed);
    return m;
}

void write_text(const fs::path& path, const std::string& text) { atomic_write(path, text); }

}  // namespace

void RunConfig::validate() const {
    if (name.empty()) throw ConfigError("run name must not be empty");
    train.validate();
    if (!(data.subset_fraction > 0.0 && data.subset_fraction <= 1.0)) {
        throw ConfigError("subset_fraction must lie in (0, 1]");
    }
    switch (data.kind) {
        case SourceKind::canonical:
            if (data.path.empty()) throw ConfigError("canonical source needs 'path'");
            data.profile.validate();
            break;
        case SourceKind::windows:
            if (data.train_path.empty() || data.test_path.empty()) {
                throw ConfigError("windows source needs 'train' and 'test'");
            }
            break;
        case SourceKind::synthetic: break;
    }
    if (model.n_experts == 0) throw ConfigError("n_experts must be >= 1");
}

void to_json(nlohmann::json& j, const RunConfig& c) {
    nlohmann::json data{{"source", to_string(c.data.kind)},
                        {"subset_fraction", c.data.subset_fraction},
                        {"class_names", c.data.class_names}};
    switch (c.data.kind) {
        case SourceKind::canonical:
            data["path"] = c.data.path.generic_string();
            data["profile"] = c.data.profile;
            break;
        case SourceKind::windows:
            data["train"] = c.data.train_path.generic_string();
            data["test"] = c.data.test_path.generic_string();
            break;
        case SourceKind::synthetic: data["motif"] = motif_json(c.data.motif); break;
    }
    j = nlohmann::json{{"name", c.name},
                       {"data", data},
                       {"model", c.model},
                       {"train", c.train},
                       {"seed", c.seed},
                       {"output_dir", c.output_dir.generic_string()}};
}

void from_json(const nlohmann::json& j, RunConfig& c) {
    RunConfig r;
    r.name = j.value("name", r.name);
    const auto& d = j.at("data");
    r.data.kind = source_kind_from(d.value("source", std::string("synthetic")));
    r.data.subset_fraction = d.value("subset_fraction", 1.0);
    if (d.contains("class_names")) r.data.class_names = d["class_names"].get<std::vector<std::string>>();
    switch (r.data.kind) {
        case SourceKind::canonical:
            r.data.path = d.at("path").get<std::string>();
            if (d.at("profile").is_string()) {
                const std::string p = d["profile"];
                if (p == "wisdm") {
                    r.data.profile = wisdm_profile();
                } else if (p == "pamap2") {
                    r.data.profile = pamap2_profile();
                } else if (p == "unimib") {
                    r.data.profile = unimib_profile();
                } else if (p == "opportunity") {
                    r.data.profile = opportunity_profile();
                } else {
                    throw ConfigError("unknown built-in profile '" + p + "'");
                }
            } else {
                r.data.profile = d["profile"].get<DatasetProfile>();
            }
            break;
        case SourceKind::windows:
            r.data.train_path = d.at("train").get<std::string>();
            r.data.test_path = d.at("test").get<std::string>();
            break;
        case SourceKind::synthetic:
            if (d.contains("motif")) r.data.motif = motif_from(d["motif"]);
            break;
    }
    r.model = j.at("model").get<ModelSpec>();
    if (j.contains("train")) r.train = j["train"].get<TrainConfig>();
    r.seed = j.value("seed", r.seed);
    r.output_dir = j.value("output_dir", r.output_dir.generic_string());
    r.validate();
    c = std::move(r);
}

RunConfig load_run_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config not found: " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    RunConfig c;
    try {
        c = j.get<RunConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    const fs::path base = path.parent_path();
    for (auto* p : {&c.data.path, &c.data.train_path, &c.data.test_path}) {
        if (!p->empty() && p->is_relative()) *p = base / *p;
    }
    return c;
}

PreparedData prepare_data(const RunConfig& config) {
    PreparedData out;
    const auto& src = config.data;
    out.class_names = src.class_names;
    auto take_subset = [&](WindowedDataset& ds) {
        if (src.subset_fraction >= 1.0 || ds.empty()) return;
        auto [keep, rest] = stratified_indices(ds.labels, src.subset_fraction, config.seed);
        ds = ds.subset(keep);
    };
    switch (src.kind) {
        case SourceKind::synthetic: {
            std::tie(out.train, out.test) = make_motif_mixture(src.motif);
            break;
        }
        case SourceKind::windows: {
            out.train = load_dataset(src.train_path);
            out.test = load_dataset(src.test_path);
            break;
        }
        case SourceKind::canonical: {
            IngestReport rep;
            SensorStream stream = ingest_canonical(src.path, NanPolicy::drop_row, &rep);
            out.warnings.insert(out.warnings.end(), rep.warnings.begin(), rep.warnings.end());
            if (out.class_names.empty()) out.class_names = stream.class_names;
            if (src.profile.resample_to_hz) stream = resample(stream, *src.profile.resample_to_hz);
            WindowedDataset all = segment_windows(stream, src.profile, &out.warnings);
            take_subset(all);
            std::tie(out.train, out.test) = split(all, src.profile, config.seed, &out.warnings);
            if (src.profile.normalization != Normalization::none) {
                if (out.train.empty()) {
                    out.warnings.push_back("training split is empty; normalization skipped");
                } else {
                    std::tie(out.train, out.test) =
                        normalize(out.train, out.test, src.profile.normalization, &out.warnings);
                }
            }
            break;
        }
    }
    return out;
}

// ---- run directories -------------------------------------------------------

RunLock::RunLock(const fs::path& dir) : file_(dir / ".lock") {
    fs::create_directories(dir);
    std::FILE* f = std::fopen(file_.c_str(), "wx");
    if (!f) throw ConfigError("run directory is locked by another process: " + dir.string());
    std::fclose(f);
}

RunLock::~RunLock() {
    std::error_code ec;
    fs::remove(file_, ec);
}

Model load_any_model(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("file not found: " + path.string());
    char magic[8] = {};
    in.read(magic, 8);
    if (std::string(magic, 8) == "CHTRAIN1") return Trainer::resume(path).model();
    return load_model(path);
}

namespace {

void check_compatible(const Model& m, const WindowedDataset& ds, const std::string& what) {
    if (ds.window_len != m.input_length() || ds.channels != m.input_channels()) {
        throw DimensionError(what + " windows are " + std::to_string(ds.window_len) + " x " +
                             std::to_string(ds.channels) + " but the model expects " +
                             std::to_string(m.input_length()) + " x " +
                             std::to_string(m.input_channels()));
    }
    if (ds.n_classes != m.n_classes()) {
        throw DimensionError(what + " has " + std::to_string(ds.n_classes) +
                             " classes but the model has " + std::to_string(m.n_classes()));
    }
}

std::string fixed(double v, int digits = 4) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

}  // namespace

RunResult run_training(const RunConfig& config, std::ostream& log,
                       const std::optional<fs::path>& resume_from) {
    config.validate();
    RunResult result;
    result.dir = config.output_dir;
    RunLock lock(config.output_dir);

    PreparedData data = prepare_data(config);
    for (const auto& w : data.warnings) log << "warning: " << w << '\n';
    if (data.train.empty() || data.test.empty()) {
        throw DataError("no windows to train on (train " + std::to_string(data.train.size()) +
                        ", test " + std::to_string(data.test.size()) + ")");
    }

    ModelSpec spec = config.model;
    spec.dropout_rate = config.train.dropout_rate;
    TrainConfig tc = config.train;
    tc.seed = config.seed;
    tc.checkpoint_dir = config.output_dir;

    std::optional<Trainer> trainer;
    if (resume_from) {
        trainer.emplace(Trainer::resume(*resume_from));
        trainer->set_checkpoint_dir(config.output_dir);
        trainer->set_epochs(config.train.epochs);
    } else {
        Model model = build_model(spec, {data.train.window_len, data.train.channels},
                                  data.train.n_classes, config.seed);
        trainer.emplace(std::move(model), tc);
    }
    check_compatible(trainer->model(), data.train, "training set");
    check_compatible(trainer->model(), data.test, "test set");

    write_text(config.output_dir / "config.json", nlohmann::json(config).dump(2) + "\n");
    save_model(trainer->best_model(), config.output_dir / "best.ckpt");

    trainer->train(data.train, data.test, [&](const EpochRecord& r) {
        log << "epoch " << r.epoch << " lr " << r.lr << " loss " << fixed(r.train_loss, 6)
            << " test_acc " << fixed(r.test_acc) << '\n';
    });
    const History& h = trainer->history();
    if (h.halted) log << "training halted: " << h.halt_reason << '\n';

    write_history_csv(h, config.output_dir / "history.csv");
    trainer->save_checkpoint(config.output_dir / "final.ckpt");
    std::error_code ec;
    fs::remove(config.output_dir / "last.ckpt", ec);

    Model best = trainer->best_model();
    save_model(best, config.output_dir / "best.ckpt");
    result.history = h;
    result.best_evaluation = evaluate(best, data.test, tc.eval_batch_size);
    result.flops = count_flops(best);

    const auto conf = confusion_report(result.best_evaluation, data.class_names);
    nlohmann::json report{{"name", config.name},
                          {"shorthand", render_shorthand(best.spec())},
                          {"n_experts", best.spec().n_experts},
                          {"epochs_run", h.epochs.size()},
                          {"halted", h.halted},
                          {"halt_reason", h.halt_reason},
                          {"selection", config.train.validation_fraction > 0.0
                                            ? "best validation accuracy"
                                            : "best test accuracy (selected on test)"},
                          {"test_accuracy", result.best_evaluation.accuracy},
                          {"confusion", result.best_evaluation.confusion},
                          {"flops", result.flops.flops},
                          {"multiply_adds", result.flops.multiply_adds},
                          {"elementwise_flops", result.flops.elementwise_flops},
                          {"params", result.flops.params},
                          {"flops_convention", result.flops.counting_convention},
                          {"train_windows", data.train.size()},
                          {"test_windows", data.test.size()},
                          {"warnings", data.warnings},
                          {"config", config}};
    report["best_epoch"] = h.best_epoch ? nlohmann::json(*h.best_epoch) : nullptr;
    write_text(config.output_dir / "report.json", report.dump(2) + "\n");

    std::ostringstream txt;
    txt << "run: " << config.name << '\n'
        << "model: " << render_shorthand(best.spec()) << "  n_experts=" << best.spec().n_experts
        << '\n'
        << "epochs run: " << h.epochs.size() << '\n'
        << "best epoch: " << (h.best_epoch ? std::to_string(*h.best_epoch) : std::string("none"))
        << '\n'
        << "test accuracy at best epoch: " << fixed(result.best_evaluation.accuracy) << '\n'
        << "MFLOPs (2 x mult-adds): " << fixed(static_cast<double>(result.flops.flops) / 1e6, 3)
        << "  params: " << result.flops.params << "\n\n"
        << conf.table << '\n'
        << result.flops.table();
    write_text(config.output_dir / "report.txt", txt.str());
    return result;
}

// ---- commands --------------------------------------------------------------

namespace {

void apply_env_threads() {
    if (const char* t = std::getenv("CONDHAR_THREADS")) {
        const long n = std::strtol(t, nullptr, 10);
        if (n < 1) throw ConfigError("CONDHAR_THREADS must be a positive integer");
        set_num_threads(static_cast<std::size_t>(n));
    } else {
        set_num_threads(1);
    }
}

struct Overrides {
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> epochs;
    std::optional<std::size_t> experts;
    std::optional<std::string> out;
};

RunConfig configured(const std::string& path, const Overrides& o) {
    RunConfig c = load_run_config(path);
    if (o.seed) c.seed = *o.seed;
    if (o.epochs) c.train.epochs = *o.epochs;
    if (o.experts) c.model.n_experts = *o.experts;
    if (o.out) c.output_dir = *o.out;
    c.validate();
    return c;
}

int cmd_convert(const std::string& dataset, const fs::path& in, const fs::path& out,
                std::ostream& os) {
    if (dataset != "wisdm") throw ConfigError("convert supports --dataset wisdm");
    const auto rep = convert_wisdm(in, out);
    os << rep.summary() << '\n';
    for (const auto& s : rep.skipped_samples) os << "skipped: " << s << '\n';
    return exit_ok;
}

int cmd_segment(const RunConfig& c, std::ostream& os) {
    RunLock lock(c.output_dir);
    PreparedData data = prepare_data(c);
    for (const auto& w : data.warnings) os << "warning: " << w << '\n';
    const fs::path train = c.output_dir / (c.name + ".train.ds");
    const fs::path test = c.output_dir / (c.name + ".test.ds");
    save_dataset(data.train, train);
    save_dataset(data.test, test);
    nlohmann::json summary{
        {"name", c.name},
        {"train", {{"file", train.filename().string()}, {"hash", file_hash(train)},
                   {"windows", data.train.size()}, {"class_histogram", data.train.class_histogram()}}},
        {"test", {{"file", test.filename().string()}, {"hash", file_hash(test)},
                  {"windows", data.test.size()}, {"class_histogram", data.test.class_histogram()}}},
        {"window_len", data.train.window_len},
        {"channels", data.train.channels},
        {"class_names", data.class_names},
        {"warnings", data.warnings}};
    write_text(c.output_dir / (c.name + ".segments.json"), summary.dump(2) + "\n");
    os << "train " << data.train.size() << " windows  " << summary["train"]["hash"].get<std::string>()
       << '\n'
       << "test  " << data.test.size() << " windows  " << summary["test"]["hash"].get<std::string>()
       << '\n';
    return exit_ok;
}

int cmd_analyze(const fs::path& checkpoint, const std::optional<std::string>& dataset_path,
                const std::optional<RunConfig>& config, const std::string& which,
                const fs::path& out_dir, std::ostream& os) {
    Model model = load_any_model(checkpoint);
    fs::create_directories(out_dir);
    if (which == "flops") {
        const auto report = count_flops(model);
        std::vector<std::size_t> ns{1, 2, 4, 8, 16};
        const auto rows =
            flops_sweep(model.spec(), {model.input_length(), model.input_channels()},
                        model.n_classes(), ns);
        write_text(out_dir / "flops.txt", report.table());
        write_text(out_dir / "flops_sweep.csv", render_sweep_csv(rows));
        os << report.table() << '\n' << render_sweep_csv(rows);
        return exit_ok;
    }

    WindowedDataset ds;
    std::vector<std::string> names;
    if (dataset_path) {
        ds = load_dataset(*dataset_path);
    } else if (config) {
        auto prepared = prepare_data(*config);
        ds = std::move(prepared.test);
        names = prepared.class_names;
    } else {
        throw ConfigError("analyze --which " + which + " needs --dataset or --config");
    }
    if (ds.empty()) throw DataError("analysis dataset is empty");
    check_compatible(model, ds, "dataset");

    if (which == "confusion") {
        const auto r = confusion_matrix_report(model, ds, names);
        write_text(out_dir / "confusion.txt", r.table);
        write_text(out_dir / "confusion.csv", r.csv);
        os << r.table;
    } else if (which == "routing" || which == "divergence") {
        const auto st = routing_stats(model, ds);
        if (which == "routing") {
            write_text(out_dir / "routing_means.csv", routing_means_csv(st));
            write_text(out_dir / "routing_histogram.csv", routing_histogram_csv(st));
            write_text(out_dir / "routing_samples.csv", routing_samples_csv(st));
            std::ostringstream s;
            s << "layers: " << st.layers.size() << "  examples: " << st.labels.size()
              << "  weights: " << st.sample_count() << '\n'
              << "edge mass (<0.1 or >0.9): " << fixed(st.edge_mass) << '\n'
              << "bimodality coefficient: " << fixed(st.bimodality_coefficient) << '\n';
            write_text(out_dir / "routing.txt", s.str());
            os << s.str();
        } else {
            const auto d = depth_divergence(st);
            std::ostringstream s;
            s << "layer,divergence\n";
            for (std::size_t i = 0; i < d.layers.size(); ++i) {
                s << d.layers[i] << ',' << fixed(d.scores[i], 6) << '\n';
            }
            write_text(out_dir / "divergence.csv", s.str());
            os << s.str() << "increasing with depth: " << (d.increasing ? "yes" : "no") << '\n';
        }
    } else {
        throw ConfigError("unknown analysis '" + which + "' (flops, confusion, routing, divergence)");
    }
    return exit_ok;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Conditionally parameterized convolutions for activity recognition"};
    app.require_subcommand(1);

    Overrides ov;
    std::string config_path;
    auto add_common = [&](CLI::App* sub, bool need_config) {
        auto* c = sub->add_option("--config", config_path, "run configuration (JSON)");
        if (need_config) c->required();
        sub->add_option("--seed", ov.seed, "seed for init, split, shuffling and dropout");
        sub->add_option("--epochs", ov.epochs, "number of training epochs");
        sub->add_option("--experts", ov.experts, "experts per conditional layer");
        sub->add_option("--out", ov.out, "output directory");
    };

    std::string dataset_name, in_path, out_path;
    auto* convert = app.add_subcommand("convert", "convert a raw dataset to the canonical CSV");
    convert->add_option("--dataset", dataset_name, "raw format (wisdm)")->required();
    convert->add_option("--in", in_path, "raw input file")->required();
    convert->add_option("--out", out_path, "canonical output file")->required();

    auto* segment = app.add_subcommand("segment", "window, split and normalize a dataset");
    add_common(segment, true);

    auto* train = app.add_subcommand("train", "train a model into a run directory");
    add_common(train, true);
    std::optional<std::string> resume;
    train->add_option("--resume", resume, "continue from a final.ckpt / last.ckpt");

    auto* analyze = app.add_subcommand("analyze", "cost and routing reports for a checkpoint");
    add_common(analyze, false);
    std::string checkpoint, which = "flops";
    std::optional<std::string> dataset_file;
    analyze->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
    analyze->add_option("--dataset", dataset_file, "segmented dataset file (.ds)");
    analyze->add_option("--which", which, "flops | confusion | routing | divergence")
        ->check(CLI::IsMember({"flops", "confusion", "routing", "divergence"}));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err) == 0 ? exit_ok : exit_usage;
    }

    try {
        apply_env_threads();
        if (*convert) return cmd_convert(dataset_name, in_path, out_path, out);
        if (*segment) return cmd_segment(configured(config_path, ov), out);
        if (*train) {
            const RunConfig c = configured(config_path, ov);
            const auto r = run_training(
                c, err, resume ? std::optional<fs::path>(*resume) : std::nullopt);
            out << "best epoch "
                << (r.history.best_epoch ? std::to_string(*r.history.best_epoch) : "none")
                << "  test accuracy " << fixed(r.best_evaluation.accuracy) << "  run "
                << r.dir.string() << '\n';
            return r.history.halted ? exit_numeric : exit_ok;
        }
        std::optional<RunConfig> cfg;
        if (!config_path.empty()) cfg = configured(config_path, ov);
        const fs::path out_dir = ov.out ? fs::path(*ov.out) : fs::path(checkpoint).parent_path() / "analysis";
        return cmd_analyze(checkpoint, dataset_file, cfg, which, out_dir, out);
    } catch (const NumericError& e) {
        err << "numeric error: " << e.what() << '\n';
        return exit_numeric;
    } catch (const DataError& e) {
        err << "data error: " << e.what() << '\n';
        return exit_data;
    } catch (const DimensionError& e) {
        err << "data error: " << e.what() << '\n';
        return exit_data;
    } catch (const fs::filesystem_error& e) {
        err << "data error: " << e.what() << '\n';
        return exit_data;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return exit_usage;
    }
}

}  // namespace condhar
