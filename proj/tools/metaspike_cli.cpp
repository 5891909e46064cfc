// Command-line driver for meta-training spiking networks and running the
// analysis experiments. Every command is deterministic given the config file
// and seed; outputs are CSV tables, checkpoints, and split manifests under
// the output directory.
//
// Exit codes: 0 success, 2 config validation error, 3 data/format error,
// 4 numerical failure.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "metaspike/metaspike.hpp"

namespace fs = std::filesystem;
using namespace metaspike;
using harness::MetricsRecord;
using harness::RunConfig;

namespace {

struct CommonArgs {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<int> trials;
    std::optional<std::string> precision;
    std::optional<std::string> mode;
    bool force = false;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "config file (key = value lines)");
    cmd->add_option("--seed", args.seed, "override run.seed");
    cmd->add_option("--out", args.out, "override run.out_dir");
    cmd->add_option("--trials", args.trials, "override eval.trials");
    cmd->add_option("--precision", args.precision, "f32 or f64")
        ->check(CLI::IsMember({"f32", "f64"}));
    cmd->add_option("--mode", args.mode, "maml or fomaml")->check(CLI::IsMember({"maml", "fomaml"}));
    cmd->add_flag("--force", args.force, "load checkpoints despite config hash mismatch");
}

RunConfig make_config(const CommonArgs& args) {
    RunConfig cfg = args.config_path.empty() ? RunConfig{} : harness::load_config(args.config_path);
    if (args.seed) cfg.run_seed = *args.seed;
    if (args.out) cfg.run_out_dir = *args.out;
    if (args.trials) cfg.eval_trials = *args.trials;
    if (args.precision) cfg.run_precision = *args.precision;
    if (args.mode) cfg.meta_mode = *args.mode;
    cfg.validate();
    return cfg;
}

void write_timing(const fs::path& dir, const std::string& name, double seconds) {
    std::ofstream f(dir / (name + "_timing.txt"));
    f << name << " wall_clock_s " << seconds << "\n";
}

std::string checkpoint_path(const RunConfig& cfg) {
    return (fs::path(cfg.run_out_dir) / "checkpoint.bin").string();
}

void print_summary(const MetricsRecord& rec, const std::string& col) {
    const auto vals = rec.column_values(col);
    std::printf("%s: mean %.4f +- %.4f over %zu rows\n", col.c_str(), harness::mean_of(vals),
                harness::stddev_of(vals), vals.size());
}

template <typename S>
int cmd_meta_train(const RunConfig& cfg) {
    auto rt = harness::Runtime<S>::create(cfg);
    fs::create_directories(cfg.run_out_dir);
    auto result = harness::run_meta_train(rt);
    harness::checkpoint_save(result.checkpoint, checkpoint_path(cfg));
    harness::save_metrics(result.metrics, (fs::path(cfg.run_out_dir) / "train_metrics.csv").string());
    std::ofstream mf(fs::path(cfg.run_out_dir) / "split_manifest.txt");
    mf << episodes::write_split_manifest(rt.split);
    write_timing(cfg.run_out_dir, "meta_train", result.metrics.wall_clock_s);
    const auto losses = result.metrics.column_values("outer_loss");
    std::printf("meta-train: %d iterations, final outer loss %.4f\n", cfg.train_meta_iterations,
                losses.empty() ? 0.0 : losses.back());
    std::printf("checkpoint: %s\n", checkpoint_path(cfg).c_str());
    return 0;
}

template <typename S>
int cmd_meta_eval(const RunConfig& cfg, bool force) {
    auto rt = harness::Runtime<S>::create(cfg);
    auto ckpt = harness::checkpoint_load<S>(checkpoint_path(cfg), harness::config_arch_hash(cfg), force);
    auto rec = harness::run_meta_eval(rt, ckpt.params, cfg.meta_hyper<S>(), cfg.eval_split,
                                      cfg.eval_trials, cfg.eval_episodes_per_trial);
    fs::create_directories(cfg.run_out_dir);
    harness::save_metrics(rec, (fs::path(cfg.run_out_dir) / "eval_metrics.csv").string());
    write_timing(cfg.run_out_dir, "meta_eval", rec.wall_clock_s);
    print_summary(rec, "accuracy");
    return 0;
}

template <typename S>
int cmd_sweep_steps(const RunConfig& cfg, const std::vector<int>& steps, bool force) {
    auto rt = harness::Runtime<S>::create(cfg);
    auto ckpt = harness::checkpoint_load<S>(checkpoint_path(cfg), harness::config_arch_hash(cfg), force);
    auto rec = harness::sweep_adaptation_steps(rt, ckpt.params, steps);
    fs::create_directories(cfg.run_out_dir);
    harness::save_metrics(rec, (fs::path(cfg.run_out_dir) / "sweep_steps.csv").string());
    for (int s : steps) {
        std::vector<double> accs;
        for (const auto& row : rec.rows)
            if (row[0] == std::to_string(s)) accs.push_back(std::stod(row[2]));
        std::printf("steps %d: accuracy %.4f +- %.4f\n", s, harness::mean_of(accs),
                    harness::stddev_of(accs));
    }
    return 0;
}

template <typename S>
int cmd_freeze_layers(const RunConfig& cfg, const std::vector<std::string>& plan_texts, bool force) {
    auto rt = harness::Runtime<S>::create(cfg);
    auto ckpt = harness::checkpoint_load<S>(checkpoint_path(cfg), harness::config_arch_hash(cfg), force);
    std::vector<harness::FreezePlan> plans;
    for (const auto& t : plan_texts) plans.push_back(harness::parse_freeze_plan(t, rt.spec.layer_names()));
    auto rec = harness::sweep_freeze_layers(rt, ckpt.params, plans);
    fs::create_directories(cfg.run_out_dir);
    harness::save_metrics(rec, (fs::path(cfg.run_out_dir) / "freeze_layers.csv").string());
    for (const auto& plan : plans) {
        std::vector<double> accs;
        for (const auto& row : rec.rows)
            if (row[0] == plan.name) accs.push_back(std::stod(row[2]));
        std::printf("plan %-12s accuracy %.4f +- %.4f\n", plan.name.c_str(), harness::mean_of(accs),
                    harness::stddev_of(accs));
    }
    return 0;
}

template <typename S>
int cmd_update_stats(const RunConfig& cfg) {
    auto rt = harness::Runtime<S>::create(cfg);
    auto study = harness::run_update_stats(rt);
    fs::create_directories(cfg.run_out_dir);
    harness::save_metrics(study.summary, (fs::path(cfg.run_out_dir) / "update_stats.csv").string());
    harness::save_metrics(study.histogram, (fs::path(cfg.run_out_dir) / "update_hist.csv").string());
    auto report = [](const char* name, const meta::UpdateStats& st) {
        const auto& ro = st.per_layer.back();
        std::printf("%-12s readout avg %.6g sum %.6g max %.6g nonzero %lld/%lld\n", name, ro.avg,
                    ro.sum, ro.max, static_cast<long long>(ro.nonzero),
                    static_cast<long long>(ro.total));
    };
    report("maml-inner", study.maml_inner);
    report("maml-outer", study.maml_outer);
    report("non-meta", study.non_meta);
    report("thresholded", study.thresholded);
    std::printf("threshold used: %.6g\n", study.threshold_used);
    const double ratio = study.non_meta.per_layer.back().avg > 0
                             ? study.maml_inner.per_layer.back().avg / study.non_meta.per_layer.back().avg
                             : 0.0;
    std::printf("inner/non-meta readout avg ratio: %.3f\n", ratio);
    return 0;
}

template <typename S>
int cmd_transfer(const RunConfig& cfg) {
    auto rt = harness::Runtime<S>::create(cfg);
    auto result = harness::run_transfer_baseline(rt);
    fs::create_directories(cfg.run_out_dir);
    harness::save_metrics(result.metrics, (fs::path(cfg.run_out_dir) / "transfer_baseline.csv").string());
    std::printf("pre-training: %d iterations, running accuracy %.3f\n", result.pretrain_iterations_run,
                result.pretrain_accuracy);
    for (int s = 0; s <= cfg.transfer_max_shots; ++s) {
        std::vector<double> accs;
        for (const auto& row : result.metrics.rows)
            if (row[0] == std::to_string(s)) accs.push_back(std::stod(row[2]));
        std::printf("shots %2d: accuracy %.4f +- %.4f\n", s, harness::mean_of(accs),
                    harness::stddev_of(accs));
    }
    return 0;
}

template <typename S>
int dispatch(const std::string& command, const RunConfig& cfg, const CommonArgs& args,
             const std::vector<int>& steps, const std::vector<std::string>& plans) {
    if (command == "meta-train") return cmd_meta_train<S>(cfg);
    if (command == "meta-eval") return cmd_meta_eval<S>(cfg, args.force);
    if (command == "sweep-steps") return cmd_sweep_steps<S>(cfg, steps, args.force);
    if (command == "freeze-layers") return cmd_freeze_layers<S>(cfg, plans, args.force);
    if (command == "update-stats") return cmd_update_stats<S>(cfg);
    if (command == "transfer-baseline") return cmd_transfer<S>(cfg);
    throw ConfigError("unknown command '" + command + "'");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"metaspike: few-shot meta-learning for spiking neural networks"};
    app.require_subcommand(1);

    CommonArgs args;
    std::vector<int> steps = {0, 1, 2, 5};
    std::vector<std::string> plans = {"none", "convs", "all"};

    auto* gen = app.add_subcommand("gen-synth", "write the synthetic corpus as EVS1 files");
    add_common(gen, args);
    auto* train = app.add_subcommand("meta-train", "meta-train an initialization");
    add_common(train, args);
    auto* eval = app.add_subcommand("meta-eval", "few-shot evaluation of a checkpoint");
    add_common(eval, args);
    auto* sweep = app.add_subcommand("sweep-steps", "accuracy vs number of adaptation steps");
    add_common(sweep, args);
    sweep->add_option("--steps", steps, "adaptation step counts");
    auto* freeze = app.add_subcommand("freeze-layers", "accuracy with layers frozen during adaptation");
    add_common(freeze, args);
    freeze->add_option("--plans", plans, "freeze plans: none, convs, all, or layer+layer lists");
    auto* stats = app.add_subcommand("update-stats", "update-magnitude comparison vs a non-meta twin");
    add_common(stats, args);
    auto* transfer = app.add_subcommand("transfer-baseline", "readout-only transfer learning baseline");
    add_common(transfer, args);
    auto* printcfg = app.add_subcommand("print-config", "print the full config with defaults applied");
    add_common(printcfg, args);

    CLI11_PARSE(app, argc, argv);

    try {
        const std::string command = app.get_subcommands().front()->get_name();
        RunConfig cfg = make_config(args);
        if (command == "print-config") {
            std::cout << harness::print_config(cfg);
            return 0;
        }
        if (command == "gen-synth") {
            harness::generate_synth_corpus(cfg, cfg.run_out_dir);
            std::printf("wrote %d classes x %d samples to %s\n", cfg.data_classes,
                        cfg.data_samples_per_class, cfg.run_out_dir.c_str());
            return 0;
        }
        if (cfg.precision() == harness::Precision::f32)
            return dispatch<float>(command, cfg, args, steps, plans);
        return dispatch<double>(command, cfg, args, steps, plans);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const FormatError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 4;
    } catch (const StructuralError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
