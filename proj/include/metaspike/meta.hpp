#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <future>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "metaspike/autodiff.hpp"
#include "metaspike/errors.hpp"
#include "metaspike/snn.hpp"

// Bi-level optimization: per-task SGD adaptation in the inner loop, meta
// optimization of the initialization in the outer loop. In second-order mode
// the inner gradients stay part of the graph so the outer backward
// differentiates through the adaptation step; first-order mode detaches them
// and never builds that part of the graph.

namespace metaspike::meta {

using ad::Var;
using snn::ParamSet;

enum class MetaMode { second_order, first_order };

enum class ThresholdRule { none, fixed, range_fraction };

template <typename S>
struct MetaHyper {
    S inner_lr = S(0.1);
    S outer_lr = S(1e-3);
    int inner_steps = 1;
    int tasks_per_meta_batch = 8;
    MetaMode mode = MetaMode::second_order;
    ThresholdRule threshold_rule = ThresholdRule::none;
    S threshold_value = S(0);   // fixed rule
    S range_fraction = S(0.05); // range_fraction rule
    std::set<std::string> freeze_set;

    void validate() const {
        if (!(inner_lr > S(0))) throw StructuralError("MetaHyper: inner_lr must be > 0");
        if (!(outer_lr > S(0))) throw StructuralError("MetaHyper: outer_lr must be > 0");
        if (inner_steps < 0) throw StructuralError("MetaHyper: inner_steps must be >= 0");
        if (tasks_per_meta_batch < 1) throw StructuralError("MetaHyper: tasks_per_meta_batch must be >= 1");
        if (threshold_rule == ThresholdRule::fixed && threshold_value < S(0))
            throw StructuralError("MetaHyper: update threshold must be >= 0");
    }
};

// theta' = theta - lr * g, built as graph ops so the update remains
// differentiable w.r.t. theta whenever g carries lineage.
template <typename S>
Var<S> sgd_update(const Var<S>& param, const Var<S>& grad, S lr) {
    if (param.shape() != grad.shape())
        throw StructuralError("sgd_update: gradient shape " + shape_str(grad.shape()) +
                              " does not match parameter " + shape_str(param.shape()));
    return ad::sub(param, ad::scale(grad, lr));
}

template <typename S>
struct AdamState {
    std::vector<Tensor<S>> m;
    std::vector<Tensor<S>> v;
    std::int64_t t = 0;
    S b1 = S(0.9), b2 = S(0.999), eps = S(1e-8);

    static AdamState zeros_for(const ParamSet<S>& params) {
        AdamState st;
        for (const auto& p : params.all_params()) {
            st.m.push_back(Tensor<S>::zeros(p.shape()));
            st.v.push_back(Tensor<S>::zeros(p.shape()));
        }
        return st;
    }
};

// Standard bias-corrected ADAM on raw values; used only at the outer loop,
// where no differentiability is required.
template <typename S>
void adam_update(std::vector<Var<S>>& params, const std::vector<Tensor<S>>& grads, AdamState<S>& state,
                 S lr) {
    if (params.size() != grads.size() || params.size() != state.m.size())
        throw StructuralError("adam_update: state size mismatch");
    state.t += 1;
    const S bc1 = S(1) - static_cast<S>(std::pow(double(state.b1), double(state.t)));
    const S bc2 = S(1) - static_cast<S>(std::pow(double(state.b2), double(state.t)));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor<S>& value = params[i].mutable_value();
        if (grads[i].shape() != value.shape())
            throw StructuralError("adam_update: gradient shape mismatch");
        Tensor<S>& m = state.m[i];
        Tensor<S>& v = state.v[i];
        for (std::int64_t j = 0; j < value.size(); ++j) {
            const S g = grads[i][j];
            m[j] = state.b1 * m[j] + (S(1) - state.b1) * g;
            v[j] = state.b2 * v[j] + (S(1) - state.b2) * g * g;
            const S mhat = m[j] / bc1;
            const S vhat = v[j] / bc2;
            value[j] -= lr * mhat / (static_cast<S>(std::sqrt(double(vhat))) + state.eps);
        }
    }
}

// A task loss as a function of parameters. Episode adapters close over the
// data; toy problems close over whatever they like.
template <typename S>
using LossFn = std::function<Var<S>(const ParamSet<S>&)>;

template <typename S>
struct EpisodeObjective {
    LossFn<S> support; // adaptation loss (D_trn)
    LossFn<S> query;   // evaluation loss (D_val)
};

namespace detail {

template <typename S>
ParamSet<S> adapt(const ParamSet<S>& start, const LossFn<S>& support_loss, const MetaHyper<S>& hyper,
                  bool record_second_order, bool thresholded) {
    hyper.validate();
    if (!support_loss) throw StructuralError("inner_adapt: empty support objective");
    ParamSet<S> cur = start;
    for (int step = 0; step < hyper.inner_steps; ++step) {
        Var<S> loss = support_loss(cur);
        std::vector<Var<S>> wrt;
        std::vector<std::size_t> wrt_layer;
        for (std::size_t li = 0; li < cur.layers.size(); ++li) {
            if (hyper.freeze_set.count(cur.layers[li].name)) continue;
            wrt.push_back(cur.layers[li].weight);
            wrt.push_back(cur.layers[li].bias);
            wrt_layer.push_back(li);
        }
        if (wrt.empty()) return cur; // everything frozen
        auto grads = ad::backward(loss, wrt, record_second_order);

        std::optional<S> gate;
        if (thresholded) {
            if (hyper.threshold_rule == ThresholdRule::fixed) {
                gate = hyper.threshold_value;
            } else {
                // Per-step gate: a fraction of the range of proposed update
                // magnitudes across all adapted parameters.
                S lo = std::numeric_limits<S>::infinity();
                S hi = S(0);
                for (const auto& w : wrt) {
                    const auto& g = grads.at(w).value();
                    for (std::int64_t j = 0; j < g.size(); ++j) {
                        const S mag = std::abs(hyper.inner_lr * g[j]);
                        lo = std::min(lo, mag);
                        hi = std::max(hi, mag);
                    }
                }
                gate = hyper.range_fraction * (hi - lo);
            }
        }

        std::size_t wi = 0;
        for (std::size_t li : wrt_layer) {
            auto step_param = [&](Var<S>& param) {
                const Var<S>& g = grads.at(wrt[wi++]);
                if (!gate) {
                    param = sgd_update(param, g, hyper.inner_lr);
                    return;
                }
                // Updates whose magnitude falls below the gate keep the
                // previous value. The mask is data-dependent but enters the
                // graph as a constant, like any other routing decision.
                Tensor<S> mask(g.shape());
                const auto& gv = g.value();
                for (std::int64_t j = 0; j < gv.size(); ++j)
                    mask[j] = std::abs(hyper.inner_lr * gv[j]) >= *gate ? S(1) : S(0);
                param = ad::sub(param, ad::scale(ad::mul(g, Var<S>::constant(std::move(mask))),
                                                 hyper.inner_lr));
            };
            step_param(cur.layers[li].weight);
            step_param(cur.layers[li].bias);
        }

        // Without second-order recording the update chain back to theta_0 is
        // never differentiated, and the backward above has already released
        // this step's graph; detaching keeps later steps off the dead graph.
        if (!record_second_order)
            for (std::size_t li : wrt_layer) {
                auto& l = cur.layers[li];
                if (l.weight.has_lineage()) l.weight = Var<S>::leaf(l.weight.value(), true);
                if (l.bias.has_lineage()) l.bias = Var<S>::leaf(l.bias.value(), true);
            }
    }
    return cur;
}

}  // namespace detail

template <typename S>
ParamSet<S> inner_adapt(const ParamSet<S>& theta0, const std::type_identity_t<LossFn<S>>& support_loss,
                        const MetaHyper<S>& hyper, bool record_second_order) {
    return detail::adapt(theta0, support_loss, hyper, record_second_order,
                         hyper.threshold_rule != ThresholdRule::none);
}

template <typename S>
ParamSet<S> thresholded_inner_adapt(const ParamSet<S>& theta0,
                                    const std::type_identity_t<LossFn<S>>& support_loss,
                                    const MetaHyper<S>& hyper, bool record_second_order = false) {
    MetaHyper<S> h = hyper;
    if (h.threshold_rule == ThresholdRule::none) h.threshold_rule = ThresholdRule::range_fraction;
    return detail::adapt(theta0, support_loss, h, record_second_order, true);
}

// Sum over episodes of the query loss at the adapted parameters.
template <typename S>
Var<S> outer_loss(const ParamSet<S>& theta0, const std::vector<EpisodeObjective<S>>& batch,
                  const MetaHyper<S>& hyper) {
    if (batch.empty()) throw StructuralError("outer_loss: empty task batch");
    Var<S> total;
    for (const auto& ep : batch) {
        auto adapted = inner_adapt(theta0, ep.support, hyper, hyper.mode == MetaMode::second_order);
        Var<S> q = ep.query(adapted);
        total = total.defined() ? ad::add(total, q) : q;
    }
    return total;
}

template <typename S>
struct MetaStepResult {
    S outer_loss_value = S(0);
    std::vector<S> episode_losses;
};

// One outer-loop update. Episode gradients are computed independently
// (optionally on a few threads) and combined by ordered summation before the
// ADAM update, so the result does not depend on scheduling.
template <typename S>
MetaStepResult<S> meta_step(ParamSet<S>& theta0, const std::vector<EpisodeObjective<S>>& batch,
                            const MetaHyper<S>& hyper, AdamState<S>& adam, int threads = 1) {
    if (batch.empty()) throw StructuralError("meta_step: empty task batch");
    hyper.validate();
    auto wrt = theta0.all_params();
    const bool second = hyper.mode == MetaMode::second_order;

    struct EpisodeGrads {
        std::vector<Tensor<S>> grads;
        S loss;
    };
    // Second-order mode differentiates through the adaptation back to
    // theta_0; first-order mode takes the query gradient at theta_N and
    // applies it to theta_0 directly (the adapted parameters are leaves).
    auto run_episode = [&](const EpisodeObjective<S>& ep) {
        auto adapted = inner_adapt(theta0, ep.support, hyper, second);
        Var<S> q = ep.query(adapted);
        auto targets = second ? wrt : adapted.all_params();
        auto gm = ad::backward(q, targets, false);
        EpisodeGrads out;
        out.loss = q.item();
        out.grads.reserve(targets.size());
        for (const auto& w : targets) out.grads.push_back(gm.at(w).value());
        return out;
    };

    std::vector<EpisodeGrads> results(batch.size());
    if (threads <= 1 || batch.size() == 1) {
        for (std::size_t i = 0; i < batch.size(); ++i) results[i] = run_episode(batch[i]);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::future<void>> pool;
        for (int t = 0; t < threads; ++t)
            pool.push_back(std::async(std::launch::async, [&]() {
                for (;;) {
                    const std::size_t i = next.fetch_add(1);
                    if (i >= batch.size()) return;
                    results[i] = run_episode(batch[i]);
                }
            }));
        for (auto& f : pool) f.get();
    }

    MetaStepResult<S> out;
    std::vector<Tensor<S>> total;
    total.reserve(wrt.size());
    for (const auto& w : wrt) total.push_back(Tensor<S>::zeros(w.shape()));
    for (const auto& r : results) {
        out.episode_losses.push_back(r.loss);
        out.outer_loss_value += r.loss;
        for (std::size_t i = 0; i < total.size(); ++i)
            for (std::int64_t j = 0; j < total[i].size(); ++j) total[i][j] += r.grads[i][j];
    }
    if (!std::isfinite(double(out.outer_loss_value)))
        throw NumericError("meta_step: non-finite outer loss");
    adam_update(wrt, total, adam, hyper.outer_lr);
    return out;
}

struct LayerUpdateStats {
    std::string name;
    double avg = 0, sum = 0, max = 0;
    std::int64_t nonzero = 0, total = 0;
};

struct UpdateStats {
    std::vector<LayerUpdateStats> per_layer;
    LayerUpdateStats overall;
};

// Magnitude statistics of theta_after - theta_before, per layer and overall.
template <typename S>
UpdateStats update_stats(const ParamSet<S>& before, const ParamSet<S>& after) {
    if (before.layers.size() != after.layers.size())
        throw StructuralError("update_stats: layer count mismatch");
    UpdateStats st;
    st.overall.name = "overall";
    for (std::size_t li = 0; li < before.layers.size(); ++li) {
        const auto& lb = before.layers[li];
        const auto& la = after.layers[li];
        if (lb.weight.shape() != la.weight.shape() || lb.bias.shape() != la.bias.shape())
            throw StructuralError("update_stats: shape mismatch in layer " + lb.name);
        LayerUpdateStats ls;
        ls.name = lb.name;
        auto accumulate = [&](const Tensor<S>& b, const Tensor<S>& a) {
            for (std::int64_t j = 0; j < b.size(); ++j) {
                const double mag = std::abs(double(a[j]) - double(b[j]));
                ls.sum += mag;
                ls.max = std::max(ls.max, mag);
                if (mag != 0.0) ++ls.nonzero;
                ++ls.total;
            }
        };
        accumulate(lb.weight.value(), la.weight.value());
        accumulate(lb.bias.value(), la.bias.value());
        ls.avg = ls.total ? ls.sum / double(ls.total) : 0.0;
        st.overall.sum += ls.sum;
        st.overall.max = std::max(st.overall.max, ls.max);
        st.overall.nonzero += ls.nonzero;
        st.overall.total += ls.total;
        st.per_layer.push_back(std::move(ls));
    }
    st.overall.avg = st.overall.total ? st.overall.sum / double(st.overall.total) : 0.0;
    return st;
}

}  // namespace metaspike::meta
