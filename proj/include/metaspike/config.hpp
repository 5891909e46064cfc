#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "metaspike/errors.hpp"
#include "metaspike/episodes.hpp"
#include "metaspike/meta.hpp"
#include "metaspike/snn.hpp"

// Run configuration: a flat `key = value` document. Every key has a default;
// unknown keys are rejected. `print-config` emits the full schema with
// current values, and that canonical form is what the checkpoint
// compatibility hash is computed over (architecture-relevant keys only).

namespace metaspike::harness {

enum class Precision { f32, f64 };

struct RunConfig {
    // dataset
    std::string data_source = "synthetic"; // synthetic | evs1
    std::string data_dir;                  // evs1 root (class_<c>/sample_<k>.evs)
    int data_classes = 20;
    int data_width = 16;
    int data_height = 16;
    double data_duration_ms = 100;
    int data_samples_per_class = 64;
    bool data_compose_double = true;
    int data_downsample_x = 2;
    int data_downsample_y = 2;
    double data_crop_t0_ms = 0;
    double data_crop_t1_ms = 0; // 0 = no crop
    double data_bin_ms = 1;
    bool data_binarize = false;
    double data_noise_rate = 0.1;

    // meta split: either partition the classes (sizes count classes; tasks
    // are all ordered pairs within a subset) or partition the task pairs
    // directly (sizes count tasks, classes shared across parts).
    std::string split_by = "classes"; // classes | tasks
    int split_train = 12;
    int split_val = 4;
    int split_test = 4;

    // network
    std::vector<int> net_conv_channels = {4, 8};

    // neuron. The benchmark lowers the threshold below the NeuronConfig
    // default: at desk scale the event streams are sparse, and deeper layers
    // of an untrained network stay silent against a threshold of 1.
    double neuron_dt_ms = 1;
    double neuron_tau_mem_ms = 20;
    double neuron_tau_syn_ms = 10;
    double neuron_tau_rfr_ms = 10;
    double neuron_u_th = 0.2;
    double neuron_rho = 0.2;
    double neuron_surrogate_beta = 10;

    // recording window
    double snn_loss_window_ms = 30;

    // meta-learning
    double meta_inner_lr = 1.0;
    double meta_outer_lr = 2e-3;
    int meta_inner_steps = 1;
    int meta_tasks_per_batch = 8;
    std::string meta_mode = "maml";            // maml | fomaml
    std::string meta_update_threshold = "none"; // none | auto | <number>
    std::vector<std::string> meta_freeze;

    // episode shape
    int episode_ways = 5;
    int episode_shots = 1;
    int episode_query = 5;

    // training
    int train_meta_iterations = 300;
    int train_eval_every = 50;
    int train_eval_episodes = 10;

    // evaluation
    int eval_trials = 10;
    int eval_episodes_per_trial = 10;
    std::string eval_split = "test"; // train | val | test

    // transfer baseline
    int transfer_pretrain_iterations = 200;
    double transfer_pretrain_target_acc = 0.95;
    int transfer_readout_steps = 20;
    int transfer_max_shots = 10;
    int transfer_query_per_class = 4;

    // update-magnitude study
    int stats_train_iterations = 60;
    int stats_hist_bins = 50;
    double stats_hist_lo = 1e-8;
    double stats_hist_hi = 1.0;

    // run
    std::uint64_t run_seed = 1;
    std::string run_precision = "f64"; // f32 | f64
    int run_threads = 0;               // 0 = hardware concurrency
    std::string run_out_dir = "out";

    Precision precision() const {
        if (run_precision == "f32") return Precision::f32;
        if (run_precision == "f64") return Precision::f64;
        throw ConfigError("run.precision must be f32 or f64, got '" + run_precision + "'");
    }

    void validate() const;

    episodes::SynthConfig synth_config() const {
        episodes::SynthConfig c;
        c.width = static_cast<std::uint16_t>(data_width);
        c.height = static_cast<std::uint16_t>(data_height);
        c.duration_us = static_cast<std::uint32_t>(data_duration_ms * 1000.0);
        c.noise_rate = data_noise_rate;
        return c;
    }

    episodes::Pipeline pipeline() const {
        episodes::Pipeline p;
        p.compose = data_compose_double;
        p.down_x = data_downsample_x;
        p.down_y = data_downsample_y;
        p.crop_t0_us = static_cast<std::uint32_t>(data_crop_t0_ms * 1000.0);
        p.crop_t1_us = static_cast<std::uint32_t>(data_crop_t1_ms * 1000.0);
        p.bin_ms = data_bin_ms;
        p.binarize = data_binarize;
        return p;
    }

    // Geometry of the frames the network consumes, after composition and
    // downsampling.
    void frame_geometry(std::int64_t& h, std::int64_t& w) const {
        std::int64_t W = data_width, H = data_height;
        if (data_compose_double) W *= 2;
        W = (W + data_downsample_x - 1) / data_downsample_x;
        H = (H + data_downsample_y - 1) / data_downsample_y;
        h = H;
        w = W;
    }

    snn::NetworkSpec network_spec() const {
        snn::NetworkSpec spec;
        spec.in_channels = 2;
        frame_geometry(spec.in_h, spec.in_w);
        spec.conv_channels.assign(net_conv_channels.begin(), net_conv_channels.end());
        spec.ways = episode_ways;
        return spec;
    }

    template <typename S>
    snn::NeuronConfig<S> neuron_config() const {
        snn::NeuronConfig<S> c;
        c.dt = static_cast<S>(neuron_dt_ms);
        c.tau_mem = static_cast<S>(neuron_tau_mem_ms);
        c.tau_syn = static_cast<S>(neuron_tau_syn_ms);
        c.tau_rfr = static_cast<S>(neuron_tau_rfr_ms);
        c.u_th = static_cast<S>(neuron_u_th);
        c.rho = static_cast<S>(neuron_rho);
        c.surrogate_beta = static_cast<S>(neuron_surrogate_beta);
        return c;
    }

    template <typename S>
    meta::MetaHyper<S> meta_hyper() const {
        meta::MetaHyper<S> h;
        h.inner_lr = static_cast<S>(meta_inner_lr);
        h.outer_lr = static_cast<S>(meta_outer_lr);
        h.inner_steps = meta_inner_steps;
        h.tasks_per_meta_batch = meta_tasks_per_batch;
        h.mode = meta_mode == "fomaml" ? meta::MetaMode::first_order : meta::MetaMode::second_order;
        if (meta_update_threshold == "none") {
            h.threshold_rule = meta::ThresholdRule::none;
        } else if (meta_update_threshold == "auto") {
            h.threshold_rule = meta::ThresholdRule::range_fraction;
        } else {
            h.threshold_rule = meta::ThresholdRule::fixed;
            h.threshold_value = static_cast<S>(std::stod(meta_update_threshold));
        }
        for (const auto& n : meta_freeze) h.freeze_set.insert(n);
        return h;
    }

    std::int64_t total_steps() const {
        return static_cast<std::int64_t>(effective_duration_ms() / data_bin_ms + 0.5);
    }
    double effective_duration_ms() const {
        if (data_crop_t1_ms > data_crop_t0_ms) return data_crop_t1_ms - data_crop_t0_ms;
        return data_duration_ms;
    }
    std::int64_t loss_window_steps() const {
        return static_cast<std::int64_t>(snn_loss_window_ms / data_bin_ms + 0.5);
    }
    std::int64_t burn_in_steps() const { return total_steps() - loss_window_steps(); }
};

namespace detail {

struct FieldBinding {
    std::string key;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
    bool arch_relevant = false;
};

inline std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        double d = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument("trailing");
        return d;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': cannot parse number '" + v + "'");
    }
}

inline std::int64_t parse_int(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        long long n = std::stoll(v, &used);
        if (used != v.size()) throw std::invalid_argument("trailing");
        return n;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': cannot parse integer '" + v + "'");
    }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("key '" + key + "': expected true/false, got '" + v + "'");
}

inline std::string fmt_double(double d) {
    std::ostringstream oss;
    oss.precision(17);
    oss << d;
    return oss.str();
}

inline std::vector<FieldBinding>& bindings() {
    static std::vector<FieldBinding> b = [] {
        std::vector<FieldBinding> v;
        auto str = [&v](const char* key, std::string RunConfig::* f, bool arch = false) {
            v.push_back({key, [f](const RunConfig& c) { return c.*f; },
                         [f](RunConfig& c, const std::string& s) { c.*f = s; }, arch});
        };
        auto num = [&v](const char* key, double RunConfig::* f, bool arch = false) {
            v.push_back({key, [f](const RunConfig& c) { return fmt_double(c.*f); },
                         [key, f](RunConfig& c, const std::string& s) { c.*f = parse_double(key, s); },
                         arch});
        };
        auto integer = [&v](const char* key, int RunConfig::* f, bool arch = false) {
            v.push_back({key, [f](const RunConfig& c) { return std::to_string(c.*f); },
                         [key, f](RunConfig& c, const std::string& s) {
                             c.*f = static_cast<int>(parse_int(key, s));
                         },
                         arch});
        };
        auto boolean = [&v](const char* key, bool RunConfig::* f, bool arch = false) {
            v.push_back({key, [f](const RunConfig& c) { return (c.*f) ? "true" : "false"; },
                         [key, f](RunConfig& c, const std::string& s) { c.*f = parse_bool(key, s); },
                         arch});
        };

        str("data.source", &RunConfig::data_source);
        str("data.dir", &RunConfig::data_dir);
        integer("data.classes", &RunConfig::data_classes);
        integer("data.width", &RunConfig::data_width, true);
        integer("data.height", &RunConfig::data_height, true);
        num("data.duration_ms", &RunConfig::data_duration_ms);
        integer("data.samples_per_class", &RunConfig::data_samples_per_class);
        boolean("data.compose_double", &RunConfig::data_compose_double, true);
        integer("data.downsample_x", &RunConfig::data_downsample_x, true);
        integer("data.downsample_y", &RunConfig::data_downsample_y, true);
        num("data.crop_t0_ms", &RunConfig::data_crop_t0_ms);
        num("data.crop_t1_ms", &RunConfig::data_crop_t1_ms);
        num("data.bin_ms", &RunConfig::data_bin_ms);
        boolean("data.binarize", &RunConfig::data_binarize);
        num("data.noise_rate", &RunConfig::data_noise_rate);

        str("split.by", &RunConfig::split_by);
        integer("split.train", &RunConfig::split_train);
        integer("split.val", &RunConfig::split_val);
        integer("split.test", &RunConfig::split_test);

        v.push_back({"net.conv_channels",
                     [](const RunConfig& c) {
                         std::string s;
                         for (std::size_t i = 0; i < c.net_conv_channels.size(); ++i)
                             s += (i ? "," : "") + std::to_string(c.net_conv_channels[i]);
                         return s;
                     },
                     [](RunConfig& c, const std::string& s) {
                         c.net_conv_channels.clear();
                         std::istringstream in(s);
                         std::string part;
                         while (std::getline(in, part, ','))
                             c.net_conv_channels.push_back(
                                 static_cast<int>(parse_int("net.conv_channels", trim(part))));
                     },
                     true});

        num("neuron.dt_ms", &RunConfig::neuron_dt_ms);
        num("neuron.tau_mem_ms", &RunConfig::neuron_tau_mem_ms);
        num("neuron.tau_syn_ms", &RunConfig::neuron_tau_syn_ms);
        num("neuron.tau_rfr_ms", &RunConfig::neuron_tau_rfr_ms);
        num("neuron.u_th", &RunConfig::neuron_u_th);
        num("neuron.rho", &RunConfig::neuron_rho);
        num("neuron.surrogate_beta", &RunConfig::neuron_surrogate_beta);

        num("snn.loss_window_ms", &RunConfig::snn_loss_window_ms);

        num("meta.inner_lr", &RunConfig::meta_inner_lr);
        num("meta.outer_lr", &RunConfig::meta_outer_lr);
        integer("meta.inner_steps", &RunConfig::meta_inner_steps);
        integer("meta.tasks_per_meta_batch", &RunConfig::meta_tasks_per_batch);
        str("meta.mode", &RunConfig::meta_mode);
        str("meta.update_threshold", &RunConfig::meta_update_threshold);
        v.push_back({"meta.freeze",
                     [](const RunConfig& c) {
                         std::string s;
                         for (std::size_t i = 0; i < c.meta_freeze.size(); ++i)
                             s += (i ? "," : "") + c.meta_freeze[i];
                         return s;
                     },
                     [](RunConfig& c, const std::string& s) {
                         c.meta_freeze.clear();
                         std::istringstream in(s);
                         std::string part;
                         while (std::getline(in, part, ',')) {
                             auto t = trim(part);
                             if (!t.empty()) c.meta_freeze.push_back(t);
                         }
                     },
                     false});

        integer("episode.ways", &RunConfig::episode_ways, true);
        integer("episode.shots", &RunConfig::episode_shots);
        integer("episode.query_per_class", &RunConfig::episode_query);

        integer("train.meta_iterations", &RunConfig::train_meta_iterations);
        integer("train.eval_every", &RunConfig::train_eval_every);
        integer("train.eval_episodes", &RunConfig::train_eval_episodes);

        integer("eval.trials", &RunConfig::eval_trials);
        integer("eval.episodes_per_trial", &RunConfig::eval_episodes_per_trial);
        str("eval.split", &RunConfig::eval_split);

        integer("transfer.pretrain_iterations", &RunConfig::transfer_pretrain_iterations);
        num("transfer.pretrain_target_acc", &RunConfig::transfer_pretrain_target_acc);
        integer("transfer.readout_steps", &RunConfig::transfer_readout_steps);
        integer("transfer.max_shots", &RunConfig::transfer_max_shots);
        integer("transfer.query_per_class", &RunConfig::transfer_query_per_class);

        integer("stats.train_iterations", &RunConfig::stats_train_iterations);
        integer("stats.hist_bins", &RunConfig::stats_hist_bins);
        num("stats.hist_lo", &RunConfig::stats_hist_lo);
        num("stats.hist_hi", &RunConfig::stats_hist_hi);

        v.push_back({"run.seed",
                     [](const RunConfig& c) { return std::to_string(c.run_seed); },
                     [](RunConfig& c, const std::string& s) {
                         c.run_seed = static_cast<std::uint64_t>(parse_int("run.seed", s));
                     },
                     false});
        str("run.precision", &RunConfig::run_precision);
        integer("run.threads", &RunConfig::run_threads);
        str("run.out_dir", &RunConfig::run_out_dir);
        return v;
    }();
    return b;
}

}  // namespace detail

inline void apply_config_line(RunConfig& cfg, const std::string& key, const std::string& value) {
    for (auto& b : detail::bindings()) {
        if (b.key == key) {
            b.set(cfg, value);
            return;
        }
    }
    throw ConfigError("unknown config key '" + key + "'");
}

inline RunConfig parse_config(const std::string& text) {
    RunConfig cfg;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value', got '" + line + "'");
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        apply_config_line(cfg, key, value);
    }
    return cfg;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file '" + path + "'");
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return parse_config(text);
}

inline std::string print_config(const RunConfig& cfg) {
    std::ostringstream out;
    for (auto& b : detail::bindings()) out << b.key << " = " << b.get(cfg) << "\n";
    return out.str();
}

// FNV-1a over the architecture-relevant keys; guards checkpoints against
// being loaded into an incompatible network.
inline std::uint64_t config_arch_hash(const RunConfig& cfg) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](const std::string& s) {
        for (unsigned char c : s) {
            h ^= c;
            h *= 0x100000001b3ULL;
        }
    };
    for (auto& b : detail::bindings())
        if (b.arch_relevant) {
            mix(b.key);
            mix("=");
            mix(b.get(cfg));
            mix(";");
        }
    return h;
}

inline void RunConfig::validate() const {
    if (data_source != "synthetic" && data_source != "evs1")
        throw ConfigError("data.source must be synthetic or evs1");
    if (data_source == "evs1" && data_dir.empty())
        throw ConfigError("data.dir required when data.source = evs1");
    if (data_classes < 2) throw ConfigError("data.classes must be >= 2");
    if (data_width < 8 || data_height < 8) throw ConfigError("data geometry must be >= 8x8");
    if (data_duration_ms < 50) throw ConfigError("data.duration_ms must be >= 50");
    if (data_samples_per_class < 2) throw ConfigError("data.samples_per_class must be >= 2");
    if (data_downsample_x < 1 || data_downsample_y < 1)
        throw ConfigError("downsample factors must be >= 1");
    if (data_bin_ms <= 0) throw ConfigError("data.bin_ms must be > 0");
    if (data_noise_rate < 0) throw ConfigError("data.noise_rate must be >= 0");
    if (data_crop_t1_ms < 0 || data_crop_t0_ms < 0 ||
        (data_crop_t1_ms != 0 && data_crop_t1_ms <= data_crop_t0_ms))
        throw ConfigError("invalid temporal crop window");

    if (split_by != "classes" && split_by != "tasks")
        throw ConfigError("split.by must be classes or tasks");
    if (split_train < 1 || split_val < 1 || split_test < 1)
        throw ConfigError("split sizes must be >= 1");
    if (split_by == "classes") {
        if (split_train + split_val + split_test > data_classes)
            throw ConfigError("class split sizes exceed data.classes");
    } else {
        const std::int64_t n_tasks =
            static_cast<std::int64_t>(data_classes) * static_cast<std::int64_t>(data_classes);
        if (split_train + split_val + split_test > n_tasks)
            throw ConfigError("split sizes exceed number of tasks (" + std::to_string(n_tasks) + ")");
    }

    if (net_conv_channels.empty()) throw ConfigError("net.conv_channels must name at least one layer");

    if (meta_mode != "maml" && meta_mode != "fomaml") throw ConfigError("meta.mode must be maml or fomaml");
    if (meta_update_threshold != "none" && meta_update_threshold != "auto") {
        try {
            if (std::stod(meta_update_threshold) < 0) throw std::invalid_argument("negative");
        } catch (const std::exception&) {
            throw ConfigError("meta.update_threshold must be none, auto, or a non-negative number");
        }
    }

    if (episode_ways < 2) throw ConfigError("episode.ways must be >= 2");
    const int min_part = std::min({split_train, split_val, split_test});
    const std::int64_t min_tasks =
        split_by == "classes" ? std::int64_t(min_part) * min_part : std::int64_t(min_part);
    if (episode_ways > min_tasks)
        throw ConfigError("episode.ways exceeds the smallest split's task count");
    if (episode_shots < 1) throw ConfigError("episode.shots must be >= 1");
    if (episode_query < 1) throw ConfigError("episode.query_per_class must be >= 1");
    if (episode_shots + episode_query > data_samples_per_class)
        throw ConfigError("shots + query exceed samples per class");

    if (eval_trials < 1 || eval_episodes_per_trial < 1) throw ConfigError("eval counts must be >= 1");
    if (eval_split != "train" && eval_split != "val" && eval_split != "test")
        throw ConfigError("eval.split must be train, val, or test");
    if (run_precision != "f32" && run_precision != "f64")
        throw ConfigError("run.precision must be f32 or f64");
    if (run_threads < 0) throw ConfigError("run.threads must be >= 0");

    // Cross-checks that need the derived geometry: constructing these
    // validates chaining (pool divisibility, window vs duration).
    try {
        network_spec().validate();
        neuron_config<double>().validate();
        meta_hyper<double>().validate();
        auto spec = network_spec();
        for (const auto& f : meta_freeze) {
            const auto names = spec.layer_names();
            if (std::find(names.begin(), names.end(), f) == names.end())
                throw ConfigError("meta.freeze names unknown layer '" + f + "'");
        }
    } catch (const StructuralError& e) {
        throw ConfigError(e.what());
    }
    if (loss_window_steps() < 1) throw ConfigError("snn.loss_window_ms shorter than one bin");
    if (loss_window_steps() > total_steps())
        throw ConfigError("snn.loss_window_ms exceeds the frame sequence");
}

}  // namespace metaspike::harness
