#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "metaspike/autodiff.hpp"
#include "metaspike/errors.hpp"
#include "metaspike/rng.hpp"

// Leaky integrate-and-fire layers with a surrogate spike derivative, and the
// convolutional architecture built from them. Membrane dynamics per step:
//
//   u = W*p - rho*r + b        (W*p is the layer's linear operator on the
//   s = step(u - u_th)          membrane trace, dense or convolutional)
//   p' = alpha*p + (1-alpha)*q
//   q' = beta*q  + (1-beta)*s_pre
//   r' = gamma*r + (1-gamma)*s
//
// The forward spike is the exact unit step; its backward substitutes the
// fast-sigmoid derivative 1/(beta|x|+1)^2, which is differentiable once
// more, so the whole network supports second-order gradients.

namespace metaspike::snn {

using ad::Var;

template <typename S>
struct NeuronConfig {
    S dt = S(1);        // ms
    S tau_mem = S(20);  // ms
    S tau_syn = S(10);  // ms
    S tau_rfr = S(10);  // ms
    S u_th = S(1);
    S rho = S(1);
    S surrogate_beta = S(10);

    void validate() const {
        if (!(dt > S(0))) throw StructuralError("NeuronConfig: dt must be > 0");
        if (!(tau_mem > dt) || !(tau_syn > dt) || !(tau_rfr > dt))
            throw StructuralError("NeuronConfig: time constants must exceed dt");
        if (!(u_th > S(0))) throw StructuralError("NeuronConfig: u_th must be > 0");
        if (rho < S(0)) throw StructuralError("NeuronConfig: rho must be >= 0");
        if (!(surrogate_beta > S(0))) throw StructuralError("NeuronConfig: surrogate_beta must be > 0");
    }
};

template <typename S>
struct DecayConstants {
    S alpha, beta, gamma;
};

template <typename S>
DecayConstants<S> decay_constants(const NeuronConfig<S>& c) {
    c.validate();
    return {static_cast<S>(std::exp(-double(c.dt) / double(c.tau_mem))),
            static_cast<S>(std::exp(-double(c.dt) / double(c.tau_syn))),
            static_cast<S>(std::exp(-double(c.dt) / double(c.tau_rfr)))};
}

// Surrogate derivative of the spike nonlinearity at x = u - u_th.
template <typename S>
S fast_sigmoid_grad(S x, S beta) {
    const S d = beta * std::abs(x) + S(1);
    return S(1) / (d * d);
}

// d/dx of the above; sign(0) = 0 keeps it defined (and odd) at threshold.
template <typename S>
S fast_sigmoid_grad2(S x, S beta) {
    const S d = beta * std::abs(x) + S(1);
    return S(-2) * beta * kernels::sign_of(x) / (d * d * d);
}

// Spike forward modes. `hard` emits the exact unit step {0,1}. `smooth`
// replaces the forward with the fast sigmoid x/(1+beta|x|) itself, whose
// autodiff derivative equals the hard mode's surrogate exactly; it exists so
// gradient checks can compare against finite differences of a function that
// is actually differentiable.
enum class SpikeMode { hard, smooth };

template <typename S>
ad::CustomOpHandle<S> make_spike_op(S beta) {
    return ad::register_custom<S>(
        "spike_step",
        [](const Tensor<S>& x) {
            return kernels::unary(x, [](S v) { return v >= S(0) ? S(1) : S(0); });
        },
        [beta](const Tensor<S>& x, const Tensor<S>& g) {
            return kernels::binary(g, x, [beta](S gv, S xv) { return gv * fast_sigmoid_grad(xv, beta); });
        },
        [beta](const Tensor<S>& x, const Tensor<S>& g) {
            return kernels::binary(g, x, [beta](S gv, S xv) { return gv * fast_sigmoid_grad2(xv, beta); });
        });
}

// s = spike(u), thresholded at cfg.u_th.
template <typename S>
Var<S> surrogate_spike(const Var<S>& u, const NeuronConfig<S>& cfg, SpikeMode mode = SpikeMode::hard) {
    auto x = ad::add_const(u, -cfg.u_th);
    if (mode == SpikeMode::smooth) {
        const S beta = cfg.surrogate_beta;
        auto denom = ad::add_const(ad::scale(ad::abs(x), beta), S(1));
        return ad::div(x, denom);
    }
    thread_local std::unordered_map<double, ad::CustomOpHandle<S>> cache;
    auto& h = cache[static_cast<double>(cfg.surrogate_beta)];
    if (!h) h = make_spike_op<S>(cfg.surrogate_beta);
    return ad::custom_apply(h, x);
}

// Traces and membrane for one layer. p, q follow the presynaptic layout;
// r, u the postsynaptic one.
template <typename S>
struct LifState {
    Var<S> p, q, r, u;
};

template <typename S>
LifState<S> zero_state(const Shape& pre, const Shape& post) {
    LifState<S> st;
    st.p = Var<S>::constant(Tensor<S>::zeros(pre));
    st.q = Var<S>::constant(Tensor<S>::zeros(pre));
    st.r = Var<S>::constant(Tensor<S>::zeros(post));
    st.u = Var<S>::constant(Tensor<S>::zeros(post));
    return st;
}

template <typename S>
struct LifStepResult {
    LifState<S> state;
    Var<S> spikes;
    Var<S> membrane;
};

// One timestep of a LIF layer. `linop` applies the layer's linear map
// (dense or convolutional, bias included) to the membrane trace.
template <typename S, typename LinOp>
LifStepResult<S> lif_step(const LifState<S>& state, const Var<S>& presyn_spikes, LinOp&& linop,
                          const NeuronConfig<S>& cfg, SpikeMode mode = SpikeMode::hard,
                          bool emit_spikes = true) {
    if (state.p.shape() != presyn_spikes.shape())
        throw StructuralError("lif_step: presynaptic spikes do not match trace shape");
    const auto dc = decay_constants(cfg);
    Var<S> drive = linop(state.p);
    Var<S> u = cfg.rho != S(0) && emit_spikes ? ad::sub(drive, ad::scale(state.r, cfg.rho)) : drive;

    LifStepResult<S> out;
    out.membrane = u;
    LifState<S>& ns = out.state;
    ns.p = ad::add(ad::scale(state.p, dc.alpha), ad::scale(state.q, S(1) - dc.alpha));
    ns.q = ad::add(ad::scale(state.q, dc.beta), ad::scale(presyn_spikes, S(1) - dc.beta));
    ns.u = u;
    if (emit_spikes) {
        out.spikes = surrogate_spike(u, cfg, mode);
        ns.r = ad::add(ad::scale(state.r, dc.gamma), ad::scale(out.spikes, S(1) - dc.gamma));
    } else {
        ns.r = state.r;
    }
    return out;
}

// Architecture: a chain of (5x5 conv, stride 1, same padding, 2x2 max pool)
// LIF layers followed by one dense readout integrator. Spatial sizes must
// stay even wherever a pool applies.
struct NetworkSpec {
    std::int64_t in_channels = 2;
    std::int64_t in_h = 0;
    std::int64_t in_w = 0;
    std::vector<std::int64_t> conv_channels;
    std::int64_t ways = 5;
    static constexpr std::int64_t kernel = 5;
    static constexpr std::int64_t stride = 1;
    static constexpr std::int64_t padding = 2; // same-padding for the 5x5 kernel

    void validate() const {
        if (in_channels <= 0 || in_h <= 0 || in_w <= 0)
            throw StructuralError("NetworkSpec: invalid input geometry");
        if (ways < 2) throw StructuralError("NetworkSpec: ways must be >= 2");
        std::int64_t h = in_h, w = in_w;
        for (std::size_t i = 0; i < conv_channels.size(); ++i) {
            if (conv_channels[i] <= 0) throw StructuralError("NetworkSpec: non-positive channel count");
            if (h % 2 != 0 || w % 2 != 0)
                throw StructuralError("NetworkSpec: spatial size " + std::to_string(h) + "x" +
                                      std::to_string(w) + " not divisible by pool at layer " +
                                      std::to_string(i + 1));
            h /= 2;
            w /= 2;
        }
    }

    // (C,H,W) after each conv and after each pool, in layer order.
    std::vector<Shape> layer_shapes() const {
        validate();
        std::vector<Shape> shapes;
        std::int64_t h = in_h, w = in_w;
        for (std::int64_t c : conv_channels) {
            shapes.push_back({c, h, w});
            h /= 2;
            w /= 2;
            shapes.push_back({c, h, w});
        }
        return shapes;
    }

    std::int64_t readout_inputs() const {
        auto shapes = layer_shapes();
        if (shapes.empty()) return in_channels * in_h * in_w;
        const Shape& last = shapes.back();
        return last[0] * last[1] * last[2];
    }

    std::vector<std::string> layer_names() const {
        std::vector<std::string> names;
        for (std::size_t i = 0; i < conv_channels.size(); ++i)
            names.push_back("conv" + std::to_string(i + 1));
        names.push_back("readout");
        return names;
    }
};

template <typename S>
struct LayerParams {
    std::string name;
    Var<S> weight;
    Var<S> bias;
};

template <typename S>
struct ParamSet {
    std::vector<LayerParams<S>> layers;

    LayerParams<S>& layer(const std::string& name) {
        for (auto& l : layers)
            if (l.name == name) return l;
        throw StructuralError("no layer named '" + name + "'");
    }
    const LayerParams<S>& layer(const std::string& name) const {
        for (const auto& l : layers)
            if (l.name == name) return l;
        throw StructuralError("no layer named '" + name + "'");
    }

    std::vector<Var<S>> all_params() const {
        std::vector<Var<S>> out;
        for (const auto& l : layers) {
            out.push_back(l.weight);
            out.push_back(l.bias);
        }
        return out;
    }

    std::int64_t count_values() const {
        std::int64_t n = 0;
        for (const auto& l : layers) n += l.weight.size() + l.bias.size();
        return n;
    }
};

// Uniform init in +-sqrt(1/fan_in), zero biases, deterministic under seed.
template <typename S>
ParamSet<S> build_network(const NetworkSpec& spec, std::uint64_t seed) {
    spec.validate();
    Rng rng(seed);
    ParamSet<S> params;
    std::int64_t cin = spec.in_channels;
    const auto names = spec.layer_names();
    for (std::size_t i = 0; i < spec.conv_channels.size(); ++i) {
        const std::int64_t cout = spec.conv_channels[i];
        const double bound = std::sqrt(1.0 / double(cin * spec.kernel * spec.kernel));
        Tensor<S> w({cout, cin, spec.kernel, spec.kernel});
        for (std::int64_t j = 0; j < w.size(); ++j)
            w[j] = static_cast<S>(rng.uniform(-bound, bound));
        LayerParams<S> layer;
        layer.name = names[i];
        layer.weight = Var<S>::leaf(std::move(w), true);
        layer.bias = Var<S>::leaf(Tensor<S>::zeros({cout}), true);
        params.layers.push_back(std::move(layer));
        cin = cout;
    }
    const std::int64_t fan_in = spec.readout_inputs();
    const double bound = std::sqrt(1.0 / double(fan_in));
    Tensor<S> w({fan_in, spec.ways});
    for (std::int64_t j = 0; j < w.size(); ++j) w[j] = static_cast<S>(rng.uniform(-bound, bound));
    LayerParams<S> readout;
    readout.name = names.back();
    readout.weight = Var<S>::leaf(std::move(w), true);
    readout.bias = Var<S>::leaf(Tensor<S>::zeros({spec.ways}), true);
    params.layers.push_back(std::move(readout));
    return params;
}

template <typename S>
struct ForwardOptions {
    std::int64_t burn_in_steps = 0;     // run without recording lineage
    std::int64_t loss_window_steps = 0; // recorded tail; 0 = all steps
    SpikeMode mode = SpikeMode::hard;
};

// Runs the whole network from zero state over T frames and returns the
// readout membrane trajectory [T_loss, B, ways]. Steps inside the burn-in
// execute the same dynamics but record no lineage, which is what keeps the
// backward memory footprint proportional to the loss window.
template <typename S>
Var<S> snn_forward(const ParamSet<S>& params, const NetworkSpec& spec,
                   const std::vector<Tensor<S>>& frames, const std::vector<NeuronConfig<S>>& configs,
                   const ForwardOptions<S>& opt) {
    spec.validate();
    const std::int64_t T = static_cast<std::int64_t>(frames.size());
    if (T == 0) throw StructuralError("snn_forward: empty frame sequence");
    const std::int64_t n_layers = static_cast<std::int64_t>(spec.conv_channels.size()) + 1;
    if (static_cast<std::int64_t>(configs.size()) != n_layers)
        throw StructuralError("snn_forward: need one NeuronConfig per layer");
    const std::int64_t window = opt.loss_window_steps > 0 ? opt.loss_window_steps : T;
    if (window > T) throw StructuralError("snn_forward: loss window longer than sequence");
    if (opt.burn_in_steps + window != T)
        throw StructuralError("snn_forward: burn_in + loss window must equal sequence length");

    const std::int64_t B = frames[0].dim(0);
    if (frames[0].shape() != Shape{B, spec.in_channels, spec.in_h, spec.in_w})
        throw StructuralError("snn_forward: frame shape " + shape_str(frames[0].shape()) +
                              " does not match network input");

    // Per-layer states.
    std::vector<LifState<S>> conv_states;
    std::int64_t h = spec.in_h, w = spec.in_w, cin = spec.in_channels;
    for (std::size_t i = 0; i < spec.conv_channels.size(); ++i) {
        conv_states.push_back(zero_state<S>({B, cin, h, w}, {B, spec.conv_channels[i], h, w}));
        cin = spec.conv_channels[i];
        h /= 2;
        w /= 2;
    }
    const std::int64_t F = spec.readout_inputs();
    LifState<S> ro_state = zero_state<S>({B, F}, {B, spec.ways});

    std::vector<Var<S>> trajectory;
    trajectory.reserve(static_cast<std::size_t>(window));

    auto step = [&](std::int64_t t) {
        Var<S> x = Var<S>::constant(frames[static_cast<std::size_t>(t)]);
        for (std::size_t i = 0; i < spec.conv_channels.size(); ++i) {
            const auto& lp = params.layers[i];
            auto res = lif_step(
                conv_states[i], x,
                [&](const Var<S>& p) {
                    return ad::conv2d(p, lp.weight, lp.bias, spec.stride, spec.padding);
                },
                configs[i], opt.mode, true);
            conv_states[i] = res.state;
            x = ad::maxpool2(res.spikes);
        }
        auto flat = ad::reshape(x, Shape{B, F});
        const auto& ro = params.layers.back();
        auto res = lif_step(
            ro_state, flat,
            [&](const Var<S>& p) {
                return ad::add(ad::matmul(p, ro.weight),
                               ad::broadcast_to(ad::reshape(ro.bias, Shape{1, spec.ways}),
                                                Shape{B, spec.ways}));
            },
            configs.back(), opt.mode, /*emit_spikes=*/false);
        ro_state = res.state;
        return res.membrane;
    };

    {
        ad::NoGradGuard ng;
        for (std::int64_t t = 0; t < opt.burn_in_steps; ++t) step(t);
    }
    for (std::int64_t t = opt.burn_in_steps; t < T; ++t) trajectory.push_back(step(t));
    return ad::stack0(trajectory);
}

// Runs only the convolutional trunk and returns the flattened pooled spike
// maps per timestep, without lineage. Useful when the trunk is frozen: the
// readout can then be trained repeatedly over cached features.
template <typename S>
std::vector<Tensor<S>> snn_trunk_features(const ParamSet<S>& params, const NetworkSpec& spec,
                                          const std::vector<Tensor<S>>& frames,
                                          const std::vector<NeuronConfig<S>>& configs,
                                          SpikeMode mode = SpikeMode::hard) {
    spec.validate();
    const std::int64_t B = frames.empty() ? 0 : frames[0].dim(0);
    if (frames.empty()) throw StructuralError("snn_trunk_features: empty frame sequence");
    std::vector<LifState<S>> states;
    std::int64_t h = spec.in_h, w = spec.in_w, cin = spec.in_channels;
    for (std::size_t i = 0; i < spec.conv_channels.size(); ++i) {
        states.push_back(zero_state<S>({B, cin, h, w}, {B, spec.conv_channels[i], h, w}));
        cin = spec.conv_channels[i];
        h /= 2;
        w /= 2;
    }
    const std::int64_t F = spec.readout_inputs();
    std::vector<Tensor<S>> features;
    features.reserve(frames.size());
    ad::NoGradGuard ng;
    for (const auto& frame : frames) {
        Var<S> x = Var<S>::constant(frame);
        for (std::size_t i = 0; i < spec.conv_channels.size(); ++i) {
            const auto& lp = params.layers[i];
            auto res = lif_step(
                states[i], x,
                [&](const Var<S>& p) {
                    return ad::conv2d(p, lp.weight, lp.bias, spec.stride, spec.padding);
                },
                configs[i], mode, true);
            states[i] = res.state;
            x = ad::maxpool2(res.spikes);
        }
        features.push_back(ad::reshape(x, Shape{B, F}).value());
    }
    return features;
}

// Readout integrator over precomputed trunk features; same burn-in and
// window semantics as snn_forward.
template <typename S>
Var<S> readout_over_features(const LayerParams<S>& readout, const std::vector<Tensor<S>>& features,
                             const NeuronConfig<S>& config, std::int64_t burn_in_steps,
                             std::int64_t loss_window_steps) {
    const std::int64_t T = static_cast<std::int64_t>(features.size());
    if (T == 0) throw StructuralError("readout_over_features: empty features");
    const std::int64_t window = loss_window_steps > 0 ? loss_window_steps : T;
    if (burn_in_steps + window != T)
        throw StructuralError("readout_over_features: burn_in + loss window must equal length");
    const std::int64_t B = features[0].dim(0);
    const std::int64_t F = features[0].dim(1);
    const std::int64_t K = readout.weight.shape()[1];
    LifState<S> st = zero_state<S>({B, F}, {B, K});
    std::vector<Var<S>> trajectory;
    auto step = [&](std::int64_t t) {
        auto res = lif_step(
            st, Var<S>::constant(features[static_cast<std::size_t>(t)]),
            [&](const Var<S>& p) {
                return ad::add(ad::matmul(p, readout.weight),
                               ad::broadcast_to(ad::reshape(readout.bias, Shape{1, K}), Shape{B, K}));
            },
            config, SpikeMode::hard, /*emit_spikes=*/false);
        st = res.state;
        return res.membrane;
    };
    {
        ad::NoGradGuard ng;
        for (std::int64_t t = 0; t < burn_in_steps; ++t) step(t);
    }
    for (std::int64_t t = burn_in_steps; t < T; ++t) trajectory.push_back(step(t));
    return ad::stack0(trajectory);
}

template <typename S>
struct ReadoutResult {
    std::vector<std::int64_t> predictions;
    Var<S> logits; // [B, K], max over the time axis
    Var<S> loss;
};

// Peak membrane over the loss window per output unit; argmax for the class;
// cross-entropy on the peak logits. Ties go to the lower class index.
template <typename S>
ReadoutResult<S> readout_and_loss(const Var<S>& membranes, const std::vector<std::int64_t>& targets) {
    if (membranes.shape().size() != 3)
        throw StructuralError("readout_and_loss expects [T,B,K] membranes");
    const std::int64_t B = membranes.shape()[1], K = membranes.shape()[2];
    ReadoutResult<S> out;
    out.logits = ad::reduce_max(membranes, {0});
    out.predictions.resize(static_cast<std::size_t>(B));
    for (std::int64_t b = 0; b < B; ++b) {
        std::int64_t best = 0;
        S bv = out.logits.value()[b * K];
        for (std::int64_t k = 1; k < K; ++k)
            if (out.logits.value()[b * K + k] > bv) {
                bv = out.logits.value()[b * K + k];
                best = k;
            }
        out.predictions[static_cast<std::size_t>(b)] = best;
    }
    out.loss = ad::softmax_cross_entropy(out.logits, targets);
    return out;
}

// Weight gradient of a single dense spiking layer at one timestep, written
// as the product of the error signal, the surrogate factor at the membrane,
// and the presynaptic trace:  dL/dw_ij = (dL/ds_i) * sigma'(u_i) * p_j.
template <typename S>
Tensor<S> three_factor_grad(const Tensor<S>& loss_grad_at_spikes, const Tensor<S>& u,
                            const Tensor<S>& p, const NeuronConfig<S>& cfg) {
    if (loss_grad_at_spikes.shape() != u.shape())
        throw StructuralError("three_factor_grad: error signal and membrane shapes differ");
    if (u.rank() != 2 || p.rank() != 2 || u.dim(0) != p.dim(0))
        throw StructuralError("three_factor_grad expects [B,K] membranes and [B,F] traces");
    const std::int64_t B = u.dim(0), K = u.dim(1), F = p.dim(1);
    Tensor<S> post({B, K});
    for (std::int64_t i = 0; i < B * K; ++i)
        post[i] = loss_grad_at_spikes[i] * fast_sigmoid_grad(u[i] - cfg.u_th, cfg.surrogate_beta);
    // [F,K] = p^T . post, matching the dense weight layout.
    Tensor<S> out({F, K});
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t j = 0; j < F; ++j) {
            const S pj = p[b * F + j];
            if (pj == S(0)) continue;
            for (std::int64_t k = 0; k < K; ++k) out[j * K + k] += pj * post[b * K + k];
        }
    return out;
}

}  // namespace metaspike::snn
