#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include "metaspike/checkpoint.hpp"
#include "metaspike/config.hpp"
#include "metaspike/episodes.hpp"
#include "metaspike/meta.hpp"
#include "metaspike/metrics.hpp"
#include "metaspike/snn.hpp"

// The experiment suite: meta training and evaluation, the adaptation-step
// and layer-freezing sweeps, the update-magnitude study, and the transfer
// learning baseline. Everything is deterministic given (config, seed):
// dataset content and the task split derive from the data configuration
// alone, while the command seed drives initialization and sampling order.

namespace metaspike::harness {

using episodes::Episode;
using episodes::TaskPair;
using meta::MetaHyper;
using snn::ParamSet;

namespace seeds {
// Stream tags for seed derivation.
constexpr std::uint64_t kDataset = 0x445653;  // class stream jitter/noise
constexpr std::uint64_t kSplit = 0x53504c49;  // task partition
constexpr std::uint64_t kInit = 0x1717;       // network initialization
constexpr std::uint64_t kTrain = 0xa1;        // training episode draws
constexpr std::uint64_t kValEval = 0xea;      // periodic validation draws
constexpr std::uint64_t kEval = 0xe1;         // evaluation episode draws
constexpr std::uint64_t kBaseline = 0xb5;     // non-meta baseline draws
constexpr std::uint64_t kTransfer = 0x7f;     // transfer-learning draws
}  // namespace seeds

template <typename S>
struct Runtime {
    RunConfig cfg;
    snn::NetworkSpec spec;
    std::vector<snn::NeuronConfig<S>> neuron_cfgs;
    std::shared_ptr<episodes::ClassStreamSource> source;
    episodes::Pipeline pipe;
    episodes::MetaSplit split;
    int threads = 1;

    static Runtime create(const RunConfig& cfg) {
        cfg.validate();
        Runtime rt;
        rt.cfg = cfg;
        rt.spec = cfg.network_spec();
        rt.neuron_cfgs.assign(rt.spec.conv_channels.size() + 1, cfg.template neuron_config<S>());

        // Dataset identity and split are functions of the data configuration,
        // not of the command seed: checkpoints trained and evaluated under
        // different seeds still agree on what the tasks are.
        const std::uint64_t data_seed =
            mix_seed(seeds::kDataset,
                     {std::uint64_t(cfg.data_classes), std::uint64_t(cfg.data_width),
                      std::uint64_t(cfg.data_height), std::uint64_t(cfg.data_duration_ms),
                      std::uint64_t(cfg.data_samples_per_class)});
        if (cfg.data_source == "synthetic") {
            rt.source = std::make_shared<episodes::SyntheticSource>(
                cfg.synth_config(), cfg.data_samples_per_class, data_seed);
        } else {
            rt.source = std::make_shared<episodes::Evs1DirSource>(cfg.data_dir);
        }
        rt.pipe = cfg.pipeline();

        std::vector<int> class_ids(static_cast<std::size_t>(cfg.data_classes));
        for (int i = 0; i < cfg.data_classes; ++i) class_ids[static_cast<std::size_t>(i)] = i;
        const std::uint64_t split_seed =
            mix_seed(seeds::kSplit, {std::uint64_t(cfg.data_classes), std::uint64_t(cfg.split_train),
                                     std::uint64_t(cfg.split_val), std::uint64_t(cfg.split_test)});
        rt.split = cfg.split_by == "classes"
                       ? episodes::make_class_splits(class_ids, std::size_t(cfg.split_train),
                                                     std::size_t(cfg.split_val),
                                                     std::size_t(cfg.split_test), split_seed)
                       : episodes::make_meta_splits(class_ids, std::size_t(cfg.split_train),
                                                    std::size_t(cfg.split_val),
                                                    std::size_t(cfg.split_test), split_seed);

        rt.threads = cfg.run_threads > 0 ? cfg.run_threads
                                         : std::max(1u, std::thread::hardware_concurrency());
        return rt;
    }

    const std::vector<TaskPair>& part(const std::string& name) const {
        if (name == "train") return split.train;
        if (name == "val") return split.val;
        if (name == "test") return split.test;
        throw ConfigError("unknown split '" + name + "'");
    }

    Episode draw(const std::vector<TaskPair>& part_tasks, int shots, int query, std::uint64_t seed) const {
        return episodes::sample_episode(part_tasks, *source, pipe, cfg.episode_ways, shots, query, seed);
    }

    snn::ForwardOptions<S> forward_options() const {
        snn::ForwardOptions<S> opt;
        opt.loss_window_steps = cfg.loss_window_steps();
        opt.burn_in_steps = cfg.burn_in_steps();
        return opt;
    }
};

// Loss closure over one labeled batch.
template <typename S>
meta::LossFn<S> batch_loss_fn(const Runtime<S>& rt, std::shared_ptr<episodes::StepBatch<S>> batch) {
    const Runtime<S>* rtp = &rt;
    return [rtp, batch](const ParamSet<S>& p) {
        auto traj = snn::snn_forward(p, rtp->spec, batch->frames, rtp->neuron_cfgs,
                                     rtp->forward_options());
        return snn::readout_and_loss(traj, batch->targets).loss;
    };
}

template <typename S>
meta::EpisodeObjective<S> episode_objective(const Runtime<S>& rt, const Episode& ep) {
    meta::EpisodeObjective<S> obj;
    obj.support = batch_loss_fn(rt, std::make_shared<episodes::StepBatch<S>>(
                                        episodes::to_step_batch<S>(ep.support)));
    obj.query = batch_loss_fn(rt, std::make_shared<episodes::StepBatch<S>>(
                                      episodes::to_step_batch<S>(ep.query)));
    return obj;
}

// Adapt on the support set, then score query predictions.
template <typename S>
double episode_query_accuracy(const Runtime<S>& rt, const ParamSet<S>& theta0, const Episode& ep,
                              const MetaHyper<S>& hyper) {
    auto support = std::make_shared<episodes::StepBatch<S>>(episodes::to_step_batch<S>(ep.support));
    auto adapted = meta::inner_adapt(theta0, batch_loss_fn(rt, support), hyper, false);
    auto query = episodes::to_step_batch<S>(ep.query);
    ad::NoGradGuard ng;
    auto traj = snn::snn_forward(adapted, rt.spec, query.frames, rt.neuron_cfgs, rt.forward_options());
    auto res = snn::readout_and_loss(traj, query.targets);
    std::int64_t hits = 0;
    for (std::size_t i = 0; i < res.predictions.size(); ++i)
        if (res.predictions[i] == query.targets[i]) ++hits;
    return double(hits) / double(res.predictions.size());
}

// Per-trial mean query accuracy over freshly drawn episodes.
template <typename S>
MetricsRecord run_meta_eval(const Runtime<S>& rt, const ParamSet<S>& theta0, const MetaHyper<S>& hyper,
                            const std::string& split_name, int trials, int episodes_per_trial,
                            std::uint64_t eval_stream = seeds::kEval) {
    const auto& part = rt.part(split_name);
    MetricsRecord rec;
    rec.columns = {"trial", "accuracy"};
    const auto t0 = std::chrono::steady_clock::now();
    for (int trial = 0; trial < trials; ++trial) {
        double acc = 0;
        for (int e = 0; e < episodes_per_trial; ++e) {
            const auto ep = rt.draw(part, rt.cfg.episode_shots, rt.cfg.episode_query,
                                    mix_seed(rt.cfg.run_seed, {eval_stream, std::uint64_t(trial),
                                                               std::uint64_t(e)}));
            acc += episode_query_accuracy(rt, theta0, ep, hyper);
        }
        acc /= double(episodes_per_trial);
        rec.add_row({std::to_string(trial), format_metric(acc)});
    }
    rec.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rec;
}

template <typename S>
struct TrainResult {
    Checkpoint<S> checkpoint;
    MetricsRecord metrics;
};

template <typename S>
TrainResult<S> run_meta_train(const Runtime<S>& rt) {
    const RunConfig& cfg = rt.cfg;
    auto hyper = cfg.template meta_hyper<S>();
    TrainResult<S> out;
    out.checkpoint.params =
        snn::build_network<S>(rt.spec, mix_seed(cfg.run_seed, {seeds::kInit}));
    out.checkpoint.adam = meta::AdamState<S>::zeros_for(out.checkpoint.params);
    out.checkpoint.config_hash = config_arch_hash(cfg);
    out.metrics.columns = {"iteration", "outer_loss", "val_accuracy"};

    const auto t0 = std::chrono::steady_clock::now();
    for (int iter = 0; iter < cfg.train_meta_iterations; ++iter) {
        std::vector<meta::EpisodeObjective<S>> batch;
        for (int slot = 0; slot < hyper.tasks_per_meta_batch; ++slot) {
            const auto ep = rt.draw(rt.split.train, cfg.episode_shots, cfg.episode_query,
                                    mix_seed(cfg.run_seed, {seeds::kTrain, std::uint64_t(iter),
                                                            std::uint64_t(slot)}));
            batch.push_back(episode_objective(rt, ep));
        }
        auto step = meta::meta_step(out.checkpoint.params, batch, hyper, out.checkpoint.adam,
                                    rt.threads);

        double val_acc = std::numeric_limits<double>::quiet_NaN();
        const bool eval_now = cfg.train_eval_every > 0 && ((iter + 1) % cfg.train_eval_every == 0 ||
                                                           iter + 1 == cfg.train_meta_iterations);
        if (eval_now && cfg.train_eval_episodes > 0) {
            double acc = 0;
            for (int e = 0; e < cfg.train_eval_episodes; ++e) {
                const auto ep = rt.draw(rt.split.val, cfg.episode_shots, cfg.episode_query,
                                        mix_seed(cfg.run_seed, {seeds::kValEval, std::uint64_t(iter),
                                                                std::uint64_t(e)}));
                acc += episode_query_accuracy(rt, out.checkpoint.params, ep, hyper);
            }
            val_acc = acc / double(cfg.train_eval_episodes);
        }
        out.metrics.add_row({std::to_string(iter), format_metric(step.outer_loss_value),
                             format_metric(val_acc)});
    }
    out.metrics.wall_clock_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

// Accuracy-vs-steps table; steps 0 means evaluation without adaptation.
template <typename S>
MetricsRecord sweep_adaptation_steps(const Runtime<S>& rt, const ParamSet<S>& theta0,
                                     const std::vector<int>& steps_list) {
    if (steps_list.empty()) throw StructuralError("sweep_adaptation_steps: empty steps list");
    auto hyper = rt.cfg.template meta_hyper<S>();
    MetricsRecord rec;
    rec.columns = {"inner_steps", "trial", "accuracy"};
    for (int steps : steps_list) {
        if (steps < 0) throw StructuralError("sweep_adaptation_steps: negative step count");
        MetaHyper<S> h = hyper;
        h.inner_steps = steps;
        auto sub = run_meta_eval(rt, theta0, h, rt.cfg.eval_split, rt.cfg.eval_trials,
                                 rt.cfg.eval_episodes_per_trial);
        for (const auto& row : sub.rows) rec.add_row({std::to_string(steps), row[0], row[1]});
    }
    return rec;
}

struct FreezePlan {
    std::string name;
    std::vector<std::string> layers;
};

template <typename S>
MetricsRecord sweep_freeze_layers(const Runtime<S>& rt, const ParamSet<S>& theta0,
                                  const std::vector<FreezePlan>& plans) {
    if (plans.empty()) throw StructuralError("sweep_freeze_layers: no plans");
    const auto known = rt.spec.layer_names();
    auto hyper = rt.cfg.template meta_hyper<S>();
    MetricsRecord rec;
    rec.columns = {"plan", "trial", "accuracy"};
    for (const auto& plan : plans) {
        MetaHyper<S> h = hyper;
        h.freeze_set.clear();
        for (const auto& l : plan.layers) {
            if (std::find(known.begin(), known.end(), l) == known.end())
                throw ConfigError("freeze plan '" + plan.name + "' names unknown layer '" + l + "'");
            h.freeze_set.insert(l);
        }
        auto sub = run_meta_eval(rt, theta0, h, rt.cfg.eval_split, rt.cfg.eval_trials,
                                 rt.cfg.eval_episodes_per_trial);
        for (const auto& row : sub.rows) rec.add_row({plan.name, row[0], row[1]});
    }
    return rec;
}

// Expands short plan names: "none", "convs" (all conv layers), "all", or an
// explicit +-separated layer list.
inline FreezePlan parse_freeze_plan(const std::string& text, const std::vector<std::string>& layer_names) {
    FreezePlan plan;
    plan.name = text;
    if (text == "none") return plan;
    if (text == "convs" || text == "all") {
        for (const auto& n : layer_names)
            if (text == "all" || n.rfind("conv", 0) == 0) plan.layers.push_back(n);
        return plan;
    }
    std::istringstream in(text);
    std::string part;
    while (std::getline(in, part, '+'))
        if (!part.empty()) plan.layers.push_back(part);
    return plan;
}

// ---- update-magnitude study ---------------------------------------------------

template <typename S>
struct UpdateStudy {
    meta::UpdateStats maml_inner;
    meta::UpdateStats maml_outer;
    meta::UpdateStats non_meta;
    meta::UpdateStats thresholded; // inner step with the range gate
    double threshold_used = 0;
    MetricsRecord histogram; // log-binned output-layer |dw| counts per regime
    MetricsRecord summary;
};

// Output-layer |after - before| values (weights and bias).
template <typename S>
std::vector<double> readout_update_magnitudes(const ParamSet<S>& before, const ParamSet<S>& after) {
    std::vector<double> mags;
    const auto& lb = before.layers.back();
    const auto& la = after.layers.back();
    for (std::int64_t j = 0; j < lb.weight.size(); ++j)
        mags.push_back(std::abs(double(la.weight.value()[j]) - double(lb.weight.value()[j])));
    for (std::int64_t j = 0; j < lb.bias.size(); ++j)
        mags.push_back(std::abs(double(la.bias.value()[j]) - double(lb.bias.value()[j])));
    return mags;
}

// One plain-SGD training step on a pooled episode batch (support and query
// together): the non-meta regime, sharing architecture, data pipeline, and
// optimizer with the inner loop.
template <typename S>
ParamSet<S> non_meta_sgd_step(const Runtime<S>& rt, const ParamSet<S>& params, const Episode& ep,
                              S lr) {
    std::vector<Episode::Item> pooled = ep.support;
    pooled.insert(pooled.end(), ep.query.begin(), ep.query.end());
    auto batch = std::make_shared<episodes::StepBatch<S>>(episodes::to_step_batch<S>(pooled));
    MetaHyper<S> h = rt.cfg.template meta_hyper<S>();
    h.inner_lr = lr;
    h.inner_steps = 1;
    h.threshold_rule = meta::ThresholdRule::none;
    h.freeze_set.clear();
    return meta::inner_adapt(params, batch_loss_fn(rt, batch), h, false);
}

template <typename S>
UpdateStudy<S> run_update_stats(const Runtime<S>& rt) {
    const RunConfig& cfg = rt.cfg;
    UpdateStudy<S> out;

    // Meta model, trained briefly.
    RunConfig train_cfg = cfg;
    train_cfg.train_meta_iterations = cfg.stats_train_iterations;
    train_cfg.train_eval_every = 0;
    auto rt_train = Runtime<S>::create(train_cfg);
    auto trained = run_meta_train(rt_train);
    ParamSet<S>& theta_meta = trained.checkpoint.params;

    // Non-meta twin: identical seed-derived initialization, plain SGD over
    // pooled episode batches for the same number of iterations.
    ParamSet<S> theta_base = snn::build_network<S>(rt.spec, mix_seed(cfg.run_seed, {seeds::kInit}));
    for (int iter = 0; iter < cfg.stats_train_iterations; ++iter) {
        const auto ep = rt.draw(rt.split.train, cfg.episode_shots, cfg.episode_query,
                                mix_seed(cfg.run_seed, {seeds::kBaseline, std::uint64_t(iter)}));
        theta_base = non_meta_sgd_step(rt, theta_base, ep, S(cfg.meta_inner_lr));
    }

    auto hyper = cfg.template meta_hyper<S>();
    const auto probe_ep = rt.draw(rt.split.train, cfg.episode_shots, cfg.episode_query,
                                  mix_seed(cfg.run_seed, {seeds::kBaseline, 0xFFFF}));
    auto support = std::make_shared<episodes::StepBatch<S>>(episodes::to_step_batch<S>(probe_ep.support));

    // MAML inner-loop update on a fresh task.
    MetaHyper<S> h1 = hyper;
    h1.inner_steps = 1;
    h1.threshold_rule = meta::ThresholdRule::none;
    auto theta_in = meta::inner_adapt(theta_meta, batch_loss_fn(rt, support), h1, false);
    out.maml_inner = meta::update_stats(theta_meta, theta_in);
    const auto mags_inner = readout_update_magnitudes(theta_meta, theta_in);

    // Thresholded variant of the same update.
    MetaHyper<S> ht = h1;
    ht.threshold_rule = meta::ThresholdRule::range_fraction;
    {
        // Recover the gate actually applied for reporting.
        auto grads = ad::backward(batch_loss_fn(rt, support)(theta_meta), theta_meta.all_params(), false);
        double lo = std::numeric_limits<double>::infinity(), hi = 0;
        for (const auto& p : theta_meta.all_params()) {
            const auto& g = grads.at(p).value();
            for (std::int64_t j = 0; j < g.size(); ++j) {
                const double mag = std::abs(double(hyper.inner_lr) * double(g[j]));
                lo = std::min(lo, mag);
                hi = std::max(hi, mag);
            }
        }
        out.threshold_used = double(ht.range_fraction) * (hi - lo);
    }
    auto theta_th = meta::thresholded_inner_adapt(theta_meta, batch_loss_fn(rt, support), ht);
    out.thresholded = meta::update_stats(theta_meta, theta_th);
    const auto mags_thresh = readout_update_magnitudes(theta_meta, theta_th);

    // Non-meta update between two consecutive training iterations.
    std::vector<double> mags_base;
    {
        const auto ep = rt.draw(rt.split.train, cfg.episode_shots, cfg.episode_query,
                                mix_seed(cfg.run_seed, {seeds::kBaseline, 0x10000}));
        auto after = non_meta_sgd_step(rt, theta_base, ep, S(cfg.meta_inner_lr));
        out.non_meta = meta::update_stats(theta_base, after);
        mags_base = readout_update_magnitudes(theta_base, after);
        theta_base = after;
    }

    // MAML outer-loop update: one more meta step. Mutates theta_meta, so it
    // comes after every comparison against the pre-step values.
    std::vector<double> mags_outer;
    {
        ParamSet<S> before;
        for (const auto& l : theta_meta.layers)
            before.layers.push_back({l.name, ad::Var<S>::leaf(l.weight.value(), true),
                                     ad::Var<S>::leaf(l.bias.value(), true)});
        std::vector<meta::EpisodeObjective<S>> batch;
        for (int slot = 0; slot < hyper.tasks_per_meta_batch; ++slot) {
            const auto ep = rt.draw(rt.split.train, cfg.episode_shots, cfg.episode_query,
                                    mix_seed(cfg.run_seed, {seeds::kTrain, 0xFFFFF, std::uint64_t(slot)}));
            batch.push_back(episode_objective(rt, ep));
        }
        meta::meta_step(theta_meta, batch, hyper, trained.checkpoint.adam, rt.threads);
        out.maml_outer = meta::update_stats(before, theta_meta);
        mags_outer = readout_update_magnitudes(before, theta_meta);
    }

    // Histogram over output-layer update magnitudes, log-spaced bins.
    out.histogram.columns = {"regime", "bin_lo", "bin_hi", "count"};
    auto add_hist = [&](const std::string& regime, const std::vector<double>& mags) {
        const int bins = cfg.stats_hist_bins;
        const double llo = std::log10(cfg.stats_hist_lo), lhi = std::log10(cfg.stats_hist_hi);
        std::vector<std::int64_t> counts(static_cast<std::size_t>(bins), 0);
        for (double m : mags) {
            if (m <= 0) continue;
            const double l = std::log10(m);
            int b = static_cast<int>((l - llo) / (lhi - llo) * bins);
            if (b < 0) b = 0;
            if (b >= bins) b = bins - 1;
            ++counts[static_cast<std::size_t>(b)];
        }
        for (int b = 0; b < bins; ++b) {
            const double lo = std::pow(10.0, llo + (lhi - llo) * b / bins);
            const double hi = std::pow(10.0, llo + (lhi - llo) * (b + 1) / bins);
            out.histogram.add_row({regime, format_metric(lo), format_metric(hi),
                                   std::to_string(counts[static_cast<std::size_t>(b)])});
        }
    };
    add_hist("maml_inner", mags_inner);
    add_hist("maml_outer", mags_outer);
    add_hist("non_meta", mags_base);
    add_hist("thresholded", mags_thresh);

    out.summary.columns = {"regime", "layer", "avg", "sum", "max", "nonzero", "total"};
    auto add_summary = [&](const std::string& regime, const meta::UpdateStats& st) {
        auto add = [&](const meta::LayerUpdateStats& l) {
            out.summary.add_row({regime, l.name, format_metric(l.avg), format_metric(l.sum),
                                 format_metric(l.max), std::to_string(l.nonzero),
                                 std::to_string(l.total)});
        };
        for (const auto& l : st.per_layer) add(l);
        add(st.overall);
    };
    add_summary("maml_inner", out.maml_inner);
    add_summary("maml_outer", out.maml_outer);
    add_summary("non_meta", out.non_meta);
    add_summary("thresholded", out.thresholded);
    return out;
}

// ---- transfer-learning baseline -------------------------------------------------

template <typename S>
struct TransferResult {
    MetricsRecord metrics; // shots, trial, accuracy
    double pretrain_accuracy = 0;
    int pretrain_iterations_run = 0;
};

// Pre-trains on pooled meta-train tasks (task index = class label), then
// re-initializes the readout and trains it alone on progressively more shots
// of held-out tasks.
template <typename S>
TransferResult<S> run_transfer_baseline(const Runtime<S>& rt) {
    const RunConfig& cfg = rt.cfg;
    const int n_pool = static_cast<int>(rt.split.train.size());
    snn::NetworkSpec pre_spec = rt.spec;
    pre_spec.ways = n_pool;
    ParamSet<S> pre = snn::build_network<S>(pre_spec, mix_seed(cfg.run_seed, {seeds::kInit}));
    auto adam = meta::AdamState<S>::zeros_for(pre);

    Runtime<S> rt_pre = rt;
    rt_pre.spec = pre_spec;

    TransferResult<S> out;
    const int batch_size = 16;
    Rng order_rng(mix_seed(cfg.run_seed, {seeds::kTransfer, 0}));
    double running_acc = 0;
    for (int iter = 0; iter < cfg.transfer_pretrain_iterations; ++iter) {
        std::vector<Episode::Item> batch_items;
        std::vector<std::int64_t> labels;
        for (int b = 0; b < batch_size; ++b) {
            const std::int64_t task_idx = static_cast<std::int64_t>(order_rng.below(std::uint64_t(n_pool)));
            const std::int64_t sample_idx =
                static_cast<std::int64_t>(order_rng.below(std::uint64_t(cfg.data_samples_per_class)));
            Episode::Item item;
            item.frames = episodes::task_sample(*rt.source, rt.pipe,
                                                rt.split.train[static_cast<std::size_t>(task_idx)],
                                                sample_idx);
            item.label = task_idx;
            batch_items.push_back(std::move(item));
        }
        auto batch = std::make_shared<episodes::StepBatch<S>>(episodes::to_step_batch<S>(batch_items));

        ad::Var<S> loss;
        std::vector<std::int64_t> preds;
        {
            auto traj = snn::snn_forward(pre, pre_spec, batch->frames, rt.neuron_cfgs,
                                         rt.forward_options());
            auto res = snn::readout_and_loss(traj, batch->targets);
            loss = res.loss;
            preds = res.predictions;
        }
        auto grads = ad::backward(loss, pre.all_params(), false);
        std::vector<Tensor<S>> gvals;
        auto all = pre.all_params();
        for (const auto& p : all) gvals.push_back(grads.at(p).value());
        meta::adam_update(all, gvals, adam, S(cfg.meta_outer_lr));

        std::int64_t hits = 0;
        for (std::size_t i = 0; i < preds.size(); ++i)
            if (preds[i] == batch->targets[i]) ++hits;
        const double acc = double(hits) / double(preds.size());
        running_acc = iter == 0 ? acc : 0.9 * running_acc + 0.1 * acc;
        out.pretrain_iterations_run = iter + 1;
        out.pretrain_accuracy = running_acc;
        if (running_acc >= cfg.transfer_pretrain_target_acc) break;
    }

    // Transfer: conv trunk from pre-training (frozen), fresh readout sized
    // for the episode, readout-only adaptation. With the trunk frozen the
    // per-sample features are fixed, so they are computed once per episode
    // and the readout trains over the cached features.
    out.metrics.columns = {"shots", "trial", "accuracy"};
    MetaHyper<S> hyper = cfg.template meta_hyper<S>();
    hyper.inner_steps = cfg.transfer_readout_steps;
    hyper.threshold_rule = meta::ThresholdRule::none;
    hyper.freeze_set.clear();

    ParamSet<S> trunk;
    for (std::size_t li = 0; li + 1 < pre.layers.size(); ++li) trunk.layers.push_back(pre.layers[li]);
    trunk.layers.push_back(pre.layers.back()); // unused by snn_trunk_features

    const auto& ncfg = rt.neuron_cfgs.back();
    const std::int64_t burn_in = rt.cfg.burn_in_steps();
    const std::int64_t window = rt.cfg.loss_window_steps();

    for (int trial = 0; trial < cfg.eval_trials; ++trial) {
        // One episode per trial, sized for the largest shot count; smaller
        // shot counts truncate the support set so the query stays fixed.
        const auto ep = rt.draw(rt.part(cfg.eval_split), std::max(cfg.transfer_max_shots, 1),
                                cfg.transfer_query_per_class,
                                mix_seed(cfg.run_seed, {seeds::kTransfer, 2, std::uint64_t(trial)}));
        auto sup_batch = episodes::to_step_batch<S>(ep.support);
        auto qry_batch = episodes::to_step_batch<S>(ep.query);
        const auto sup_feats =
            snn::snn_trunk_features(trunk, rt.spec, sup_batch.frames, rt.neuron_cfgs);
        const auto qry_feats =
            snn::snn_trunk_features(trunk, rt.spec, qry_batch.frames, rt.neuron_cfgs);

        ParamSet<S> ro_init = snn::build_network<S>(
            rt.spec, mix_seed(cfg.run_seed, {seeds::kTransfer, 1, std::uint64_t(trial)}));
        ParamSet<S> readout_only;
        readout_only.layers.push_back(ro_init.layers.back());

        for (int shots = 0; shots <= cfg.transfer_max_shots; ++shots) {
            // keep exactly `shots` support rows per class
            std::vector<std::int64_t> keep;
            std::vector<int> per_class(static_cast<std::size_t>(cfg.episode_ways), 0);
            for (std::size_t i = 0; i < ep.support.size(); ++i) {
                auto& c = per_class[static_cast<std::size_t>(ep.support[i].label)];
                if (c < shots) {
                    keep.push_back(static_cast<std::int64_t>(i));
                    ++c;
                }
            }
            MetaHyper<S> h = hyper;
            if (shots == 0) h.inner_steps = 0;

            std::vector<Tensor<S>> kept_feats;
            std::vector<std::int64_t> kept_targets;
            if (!keep.empty()) {
                const std::int64_t Bk = static_cast<std::int64_t>(keep.size());
                const std::int64_t F = sup_feats[0].dim(1);
                for (const auto& f : sup_feats) {
                    Tensor<S> sub({Bk, F});
                    for (std::int64_t r = 0; r < Bk; ++r)
                        std::copy(f.data() + keep[static_cast<std::size_t>(r)] * F,
                                  f.data() + (keep[static_cast<std::size_t>(r)] + 1) * F,
                                  sub.data() + r * F);
                    kept_feats.push_back(std::move(sub));
                }
                for (std::int64_t r : keep)
                    kept_targets.push_back(ep.support[static_cast<std::size_t>(r)].label);
            }

            meta::LossFn<S> support_loss = [&](const ParamSet<S>& p) {
                auto traj = snn::readout_over_features(p.layers[0], kept_feats, ncfg, burn_in, window);
                return snn::readout_and_loss(traj, kept_targets).loss;
            };
            auto adapted = shots == 0 ? readout_only
                                      : meta::inner_adapt(readout_only, support_loss, h, false);

            ad::NoGradGuard ng;
            auto traj =
                snn::readout_over_features(adapted.layers[0], qry_feats, ncfg, burn_in, window);
            auto res = snn::readout_and_loss(traj, qry_batch.targets);
            std::int64_t hits = 0;
            for (std::size_t i = 0; i < res.predictions.size(); ++i)
                if (res.predictions[i] == qry_batch.targets[i]) ++hits;
            const double acc = double(hits) / double(res.predictions.size());
            out.metrics.add_row({std::to_string(shots), std::to_string(trial), format_metric(acc)});
        }
    }
    return out;
}

// ---- synthetic corpus export -----------------------------------------------------

// Writes the synthetic class streams as an EVS1 directory tree plus the
// split manifest, so the evs1 data source replays the exact same dataset.
inline void generate_synth_corpus(const RunConfig& cfg, const std::string& out_dir) {
    cfg.validate();
    if (cfg.data_source != "synthetic")
        throw ConfigError("gen-synth requires data.source = synthetic");
    namespace fs = std::filesystem;
    auto rt = Runtime<double>::create(cfg);
    fs::create_directories(out_dir);
    for (int c = 0; c < cfg.data_classes; ++c) {
        const fs::path dir = fs::path(out_dir) / ("class_" + std::to_string(c));
        fs::create_directories(dir);
        for (int k = 0; k < cfg.data_samples_per_class; ++k) {
            const auto stream = rt.source->stream(c, k);
            events::save_events(stream, (dir / episodes::Evs1DirSource::sample_name(k)).string());
        }
    }
    std::ofstream mf(fs::path(out_dir) / "split_manifest.txt");
    mf << episodes::write_split_manifest(rt.split);
    std::ofstream cf(fs::path(out_dir) / "config.txt");
    cf << print_config(cfg);
}

}  // namespace metaspike::harness
