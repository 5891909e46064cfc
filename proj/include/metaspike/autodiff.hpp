#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "metaspike/errors.hpp"
#include "metaspike/tensor.hpp"

// Reverse-mode automatic differentiation over dense tensors.
//
// Every operation's backward pass is itself built out of these same
// operations, so running a backward pass with recording enabled yields
// gradients that can be differentiated again. That is the mechanism behind
// second-order meta-gradients: the inner-loop gradient stays a live graph
// node and the outer backward differentiates through it.

namespace metaspike::ad {

enum class Op : std::uint8_t {
    leaf,
    add,
    sub,
    mul,
    div,
    neg,
    abs_v,
    exp_v,
    log_v,
    sign_v,
    scale_c,     // x * c0
    add_c,       // x + c0
    clamp_min_c, // max(x, c0)
    ge_mask_c,   // x >= c0 ? 1 : 0, derivative defined as 0
    matmul,
    transpose2,
    conv,    // cross-correlation, no bias
    conv_dx, // adjoint of conv w.r.t. input
    conv_dk, // adjoint of conv w.r.t. kernel
    maxpool2,
    scatter_flat,
    gather_flat,
    reduce_sum,
    reduce_mean,
    reduce_max,
    broadcast_to,
    reshape,
    stack0,   // stack along a new leading axis
    slice0,   // select index along the leading axis
    scatter0, // place a slice at an index of a zero tensor
    custom_fwd,
    custom_bwd,
};

template <typename S>
class Var;

// Elementwise custom operation. `backward` maps (input, upstream grad) to the
// input gradient; `second_backward` is the derivative of `backward` w.r.t.
// the input and is required whenever the gradient itself must stay
// differentiable. Curvature terms enter the second-order graph as constants,
// which bounds exactness at two orders of differentiation.
template <typename S>
struct CustomOp {
    std::string name;
    std::function<Tensor<S>(const Tensor<S>&)> forward;
    std::function<Tensor<S>(const Tensor<S>&, const Tensor<S>&)> backward;
    std::function<Tensor<S>(const Tensor<S>&, const Tensor<S>&)> second_backward;
};

template <typename S>
using CustomOpHandle = std::shared_ptr<const CustomOp<S>>;

template <typename S>
CustomOpHandle<S> register_custom(std::string name,
                                  std::function<Tensor<S>(const Tensor<S>&)> forward,
                                  std::function<Tensor<S>(const Tensor<S>&, const Tensor<S>&)> backward,
                                  std::function<Tensor<S>(const Tensor<S>&, const Tensor<S>&)> second_backward = nullptr) {
    if (!forward || !backward) throw StructuralError("custom op needs forward and backward functions");
    auto op = std::make_shared<CustomOp<S>>();
    op->name = std::move(name);
    op->forward = std::move(forward);
    op->backward = std::move(backward);
    op->second_backward = std::move(second_backward);
    return op;
}

inline std::uint64_t next_node_id() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

// Thread-local recording switch. While disabled, operations produce plain
// value nodes without lineage.
struct GradMode {
    static bool& flag() {
        thread_local bool enabled = true;
        return enabled;
    }
    static bool enabled() { return flag(); }
};

class NoGradGuard {
public:
    NoGradGuard() : prev_(GradMode::flag()) { GradMode::flag() = false; }
    ~NoGradGuard() { GradMode::flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

class GradModeGuard {
public:
    explicit GradModeGuard(bool enabled) : prev_(GradMode::flag()) { GradMode::flag() = enabled; }
    ~GradModeGuard() { GradMode::flag() = prev_; }
    GradModeGuard(const GradModeGuard&) = delete;
    GradModeGuard& operator=(const GradModeGuard&) = delete;

private:
    bool prev_;
};

// Number of lineage-carrying nodes alive on this thread. Used by tests to
// observe that first-order runs never build the second-order graph.
inline std::int64_t& live_recorded_nodes() {
    thread_local std::int64_t n = 0;
    return n;
}

template <typename S>
struct NodeData {
    Tensor<S> value;
    std::uint64_t id = 0;
    bool requires_grad = false; // trainable leaf
    bool needs_grad = false;    // reaches a trainable leaf
    bool released = false;      // lineage dropped by a non-retaining backward
    Op op = Op::leaf;
    std::vector<Var<S>> parents;

    // Op attributes.
    S c0 = S(0);
    std::int64_t i0 = 0, i1 = 0; // stride/pad, or slice index/extent
    Shape shape_attr;
    std::vector<int> axes;
    std::shared_ptr<const std::vector<std::int64_t>> indices;
    CustomOpHandle<S> custom;

    ~NodeData() {
        if (op != Op::leaf && !released) --live_recorded_nodes();
    }
};

template <typename S>
class Var {
public:
    Var() = default;

    const Tensor<S>& value() const { return node_->value; }
    Tensor<S>& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    std::int64_t size() const { return node_->value.size(); }
    S item() const { return node_->value.item(); }
    std::uint64_t id() const { return node_->id; }
    bool defined() const { return node_ != nullptr; }
    bool requires_grad() const { return node_->requires_grad; }
    bool needs_grad() const { return node_->needs_grad; }
    bool has_lineage() const { return node_->op != Op::leaf && !node_->released; }

    NodeData<S>* node() const { return node_.get(); }

    // Same value, no lineage, not trainable.
    Var detach() const { return constant(node_->value); }

    static Var leaf(Tensor<S> value, bool requires_grad) {
        auto n = std::make_shared<NodeData<S>>();
        n->value = std::move(value);
        n->id = next_node_id();
        n->requires_grad = requires_grad;
        n->needs_grad = requires_grad;
        return Var(std::move(n));
    }

    static Var constant(Tensor<S> value) { return leaf(std::move(value), false); }

    static Var make(Tensor<S> value, Op op, std::vector<Var> parents) {
        bool track = GradMode::enabled();
        if (track) {
            track = false;
            for (const auto& p : parents)
                if (p.needs_grad()) {
                    track = true;
                    break;
                }
        }
        if (!track) return constant(std::move(value));
        auto n = std::make_shared<NodeData<S>>();
        n->value = std::move(value);
        n->id = next_node_id();
        n->needs_grad = true;
        n->op = op;
        n->parents = std::move(parents);
        ++live_recorded_nodes();
        return Var(std::move(n));
    }

private:
    explicit Var(std::shared_ptr<NodeData<S>> n) : node_(std::move(n)) {}
    std::shared_ptr<NodeData<S>> node_;
};

template <typename S>
Var<S> make_node(const Shape& shape, std::vector<S> values, bool requires_grad = false) {
    return Var<S>::leaf(Tensor<S>(shape, std::move(values)), requires_grad);
}

template <typename S>
Var<S> zeros_like(const Var<S>& v) {
    return Var<S>::constant(Tensor<S>::zeros(v.shape()));
}

template <typename S>
Var<S> ones_like(const Var<S>& v) {
    return Var<S>::constant(Tensor<S>::ones(v.shape()));
}

// ---- operation constructors ---------------------------------------------------

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
    return Var<S>::make(kernels::binary(a.value(), b.value(), [](S x, S y) { return x + y; }), Op::add,
                        {a, b});
}

template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
    return Var<S>::make(kernels::binary(a.value(), b.value(), [](S x, S y) { return x - y; }), Op::sub,
                        {a, b});
}

template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
    return Var<S>::make(kernels::binary(a.value(), b.value(), [](S x, S y) { return x * y; }), Op::mul,
                        {a, b});
}

// No special-casing of zero denominators; non-finite values propagate.
template <typename S>
Var<S> div(const Var<S>& a, const Var<S>& b) {
    return Var<S>::make(kernels::binary(a.value(), b.value(), [](S x, S y) { return x / y; }), Op::div,
                        {a, b});
}

template <typename S>
Var<S> neg(const Var<S>& a) {
    return Var<S>::make(kernels::unary(a.value(), [](S x) { return -x; }), Op::neg, {a});
}

template <typename S>
Var<S> abs(const Var<S>& a) {
    return Var<S>::make(kernels::unary(a.value(), [](S x) { return std::abs(x); }), Op::abs_v, {a});
}

template <typename S>
Var<S> exp(const Var<S>& a) {
    return Var<S>::make(kernels::unary(a.value(), [](S x) { return std::exp(x); }), Op::exp_v, {a});
}

template <typename S>
Var<S> log(const Var<S>& a) {
    return Var<S>::make(kernels::unary(a.value(), [](S x) { return std::log(x); }), Op::log_v, {a});
}

// sign(0) = 0; derivative 0 everywhere.
template <typename S>
Var<S> sign(const Var<S>& a) {
    return Var<S>::make(kernels::unary(a.value(), [](S x) { return kernels::sign_of(x); }), Op::sign_v,
                        {a});
}

template <typename S>
Var<S> scale(const Var<S>& a, S c) {
    auto v = Var<S>::make(kernels::unary(a.value(), [c](S x) { return x * c; }), Op::scale_c, {a});
    if (v.has_lineage()) v.node()->c0 = c;
    return v;
}

template <typename S>
Var<S> add_const(const Var<S>& a, S c) {
    return Var<S>::make(kernels::unary(a.value(), [c](S x) { return x + c; }), Op::add_c, {a});
}

template <typename S>
Var<S> clamp_min(const Var<S>& a, S c) {
    auto v = Var<S>::make(kernels::unary(a.value(), [c](S x) { return x < c ? c : x; }), Op::clamp_min_c,
                          {a});
    if (v.has_lineage()) v.node()->c0 = c;
    return v;
}

template <typename S>
Var<S> ge_mask(const Var<S>& a, S c) {
    return Var<S>::make(kernels::unary(a.value(), [c](S x) { return x >= c ? S(1) : S(0); }),
                        Op::ge_mask_c, {a});
}

template <typename S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
    return Var<S>::make(kernels::matmul(a.value(), b.value()), Op::matmul, {a, b});
}

template <typename S>
Var<S> transpose(const Var<S>& a) {
    return Var<S>::make(kernels::transpose2(a.value()), Op::transpose2, {a});
}

template <typename S>
Var<S> conv2d_raw(const Var<S>& x, const Var<S>& k, std::int64_t stride, std::int64_t pad) {
    auto v = Var<S>::make(kernels::conv2d_fwd(x.value(), k.value(), stride, pad), Op::conv, {x, k});
    if (v.has_lineage()) {
        v.node()->i0 = stride;
        v.node()->i1 = pad;
    }
    return v;
}

template <typename S>
Var<S> conv2d_dx_op(const Var<S>& g, const Var<S>& k, std::int64_t stride, std::int64_t pad,
                    std::int64_t H, std::int64_t W) {
    auto v = Var<S>::make(kernels::conv2d_dx(g.value(), k.value(), stride, pad, H, W), Op::conv_dx,
                          {g, k});
    if (v.has_lineage()) {
        v.node()->i0 = stride;
        v.node()->i1 = pad;
        v.node()->shape_attr = {H, W};
    }
    return v;
}

template <typename S>
Var<S> conv2d_dk_op(const Var<S>& x, const Var<S>& g, std::int64_t stride, std::int64_t pad,
                    std::int64_t kh, std::int64_t kw) {
    auto v = Var<S>::make(kernels::conv2d_dk(x.value(), g.value(), stride, pad, kh, kw), Op::conv_dk,
                          {x, g});
    if (v.has_lineage()) {
        v.node()->i0 = stride;
        v.node()->i1 = pad;
        v.node()->shape_attr = {kh, kw};
    }
    return v;
}

// conv2d with bias, cross-correlation convention.
template <typename S>
Var<S> conv2d(const Var<S>& x, const Var<S>& k, const Var<S>& bias, std::int64_t stride,
              std::int64_t pad) {
    if (bias.shape() != Shape{k.shape()[0]})
        throw StructuralError("conv2d bias must have shape [out_channels]");
    auto y = conv2d_raw(x, k, stride, pad);
    auto b4 = reshape(bias, Shape{1, k.shape()[0], 1, 1});
    return add(y, b4);
}

template <typename S>
Var<S> maxpool2(const Var<S>& x) {
    std::vector<std::int64_t> idx;
    Tensor<S> y = kernels::maxpool2(x.value(), idx);
    auto v = Var<S>::make(std::move(y), Op::maxpool2, {x});
    if (v.has_lineage()) {
        v.node()->indices = std::make_shared<const std::vector<std::int64_t>>(std::move(idx));
        v.node()->shape_attr = x.shape();
    }
    return v;
}

template <typename S>
Var<S> scatter_flat_op(const Var<S>& g, std::shared_ptr<const std::vector<std::int64_t>> indices,
                       const Shape& out_shape) {
    auto v = Var<S>::make(kernels::scatter_flat(g.value(), *indices, out_shape), Op::scatter_flat, {g});
    if (v.has_lineage()) {
        v.node()->indices = std::move(indices);
        v.node()->shape_attr = out_shape;
    }
    return v;
}

template <typename S>
Var<S> gather_flat_op(const Var<S>& x, std::shared_ptr<const std::vector<std::int64_t>> indices,
                      const Shape& out_shape) {
    auto v = Var<S>::make(kernels::gather_flat(x.value(), *indices, out_shape), Op::gather_flat, {x});
    if (v.has_lineage()) {
        v.node()->indices = std::move(indices);
        v.node()->shape_attr = x.shape();
    }
    return v;
}

template <typename S>
Var<S> reduce_sum(const Var<S>& a, const std::vector<int>& axes = {}) {
    std::vector<int> ax = axes;
    if (ax.empty())
        for (std::size_t i = 0; i < a.shape().size(); ++i) ax.push_back(static_cast<int>(i));
    auto v = Var<S>::make(kernels::reduce_sum(a.value(), ax), Op::reduce_sum, {a});
    if (v.has_lineage()) {
        v.node()->axes = ax;
        v.node()->shape_attr = a.shape();
    }
    return v;
}

template <typename S>
Var<S> reduce_mean(const Var<S>& a, const std::vector<int>& axes = {}) {
    std::vector<int> ax = axes;
    if (ax.empty())
        for (std::size_t i = 0; i < a.shape().size(); ++i) ax.push_back(static_cast<int>(i));
    Tensor<S> sum = kernels::reduce_sum(a.value(), ax);
    std::int64_t count = 1;
    for (int x : ax) count *= a.shape()[static_cast<std::size_t>(x)];
    const S inv = S(1) / static_cast<S>(count);
    Tensor<S> out = kernels::unary(sum, [inv](S v) { return v * inv; });
    auto v = Var<S>::make(std::move(out), Op::reduce_mean, {a});
    if (v.has_lineage()) {
        v.node()->axes = ax;
        v.node()->shape_attr = a.shape();
        v.node()->c0 = inv;
    }
    return v;
}

// Max over axes; gradient routes to the first maximal element in row-major
// order.
template <typename S>
Var<S> reduce_max(const Var<S>& a, const std::vector<int>& axes = {}) {
    std::vector<int> ax = axes;
    if (ax.empty())
        for (std::size_t i = 0; i < a.shape().size(); ++i) ax.push_back(static_cast<int>(i));
    std::vector<std::int64_t> idx;
    Tensor<S> out = kernels::reduce_max(a.value(), ax, idx);
    auto v = Var<S>::make(std::move(out), Op::reduce_max, {a});
    if (v.has_lineage()) {
        v.node()->axes = ax;
        v.node()->shape_attr = a.shape();
        v.node()->indices = std::make_shared<const std::vector<std::int64_t>>(std::move(idx));
    }
    return v;
}

template <typename S>
Var<S> broadcast_to(const Var<S>& a, const Shape& target) {
    if (a.shape() == target) return a;
    auto v = Var<S>::make(kernels::broadcast_to(a.value(), target), Op::broadcast_to, {a});
    if (v.has_lineage()) v.node()->shape_attr = a.shape();
    return v;
}

template <typename S>
Var<S> reshape(const Var<S>& a, const Shape& target) {
    if (a.shape() == target) return a;
    auto v = Var<S>::make(a.value().reshaped(target), Op::reshape, {a});
    if (v.has_lineage()) v.node()->shape_attr = a.shape();
    return v;
}

template <typename S>
Var<S> stack0(const std::vector<Var<S>>& parts) {
    if (parts.empty()) throw StructuralError("stack0 of zero tensors");
    const Shape& s0 = parts[0].shape();
    Shape out_shape;
    out_shape.push_back(static_cast<std::int64_t>(parts.size()));
    out_shape.insert(out_shape.end(), s0.begin(), s0.end());
    Tensor<S> out(out_shape);
    const std::int64_t chunk = parts[0].size();
    for (std::size_t t = 0; t < parts.size(); ++t) {
        if (parts[t].shape() != s0) throw StructuralError("stack0 of mismatched shapes");
        std::copy(parts[t].value().data(), parts[t].value().data() + chunk,
                  out.data() + static_cast<std::int64_t>(t) * chunk);
    }
    return Var<S>::make(std::move(out), Op::stack0, parts);
}

template <typename S>
Var<S> slice0(const Var<S>& a, std::int64_t index) {
    const Shape& s = a.shape();
    if (s.empty() || index < 0 || index >= s[0]) throw StructuralError("slice0 index out of range");
    Shape out_shape(s.begin() + 1, s.end());
    const std::int64_t chunk = shape_size(out_shape);
    Tensor<S> out(out_shape);
    std::copy(a.value().data() + index * chunk, a.value().data() + (index + 1) * chunk, out.data());
    auto v = Var<S>::make(std::move(out), Op::slice0, {a});
    if (v.has_lineage()) {
        v.node()->i0 = index;
        v.node()->i1 = s[0];
    }
    return v;
}

template <typename S>
Var<S> scatter0(const Var<S>& a, std::int64_t index, std::int64_t extent) {
    const Shape& s = a.shape();
    if (index < 0 || index >= extent) throw StructuralError("scatter0 index out of range");
    Shape out_shape;
    out_shape.push_back(extent);
    out_shape.insert(out_shape.end(), s.begin(), s.end());
    Tensor<S> out(out_shape);
    std::copy(a.value().data(), a.value().data() + a.size(), out.data() + index * a.size());
    auto v = Var<S>::make(std::move(out), Op::scatter0, {a});
    if (v.has_lineage()) {
        v.node()->i0 = index;
        v.node()->i1 = extent;
    }
    return v;
}

template <typename S>
Var<S> custom_apply(const CustomOpHandle<S>& handle, const Var<S>& x) {
    if (!handle) throw StructuralError("null custom op handle");
    Tensor<S> y = handle->forward(x.value());
    if (y.shape() != x.shape()) throw StructuralError("custom op must preserve shape");
    auto v = Var<S>::make(std::move(y), Op::custom_fwd, {x});
    if (v.has_lineage()) v.node()->custom = handle;
    return v;
}

template <typename S>
Var<S> custom_backward_node(const CustomOpHandle<S>& handle, const Var<S>& x, const Var<S>& g) {
    Tensor<S> v = handle->backward(x.value(), g.value());
    if (v.shape() != x.shape()) throw StructuralError("custom op backward must preserve shape");
    auto out = Var<S>::make(std::move(v), Op::custom_bwd, {x, g});
    if (out.has_lineage()) out.node()->custom = handle;
    return out;
}

// Convenience operators.
template <typename S>
Var<S> operator+(const Var<S>& a, const Var<S>& b) {
    return add(a, b);
}
template <typename S>
Var<S> operator-(const Var<S>& a, const Var<S>& b) {
    return sub(a, b);
}
template <typename S>
Var<S> operator*(const Var<S>& a, const Var<S>& b) {
    return mul(a, b);
}
template <typename S>
Var<S> operator/(const Var<S>& a, const Var<S>& b) {
    return div(a, b);
}
template <typename S>
Var<S> operator-(const Var<S>& a) {
    return neg(a);
}

enum class ElementwiseKind { add, sub, mul, div, neg, abs, exp, sign, scale_by_constant, clamp_min };

// Dispatch surface used by callers that treat the op kind as data.
template <typename S>
Var<S> elementwise(ElementwiseKind kind, const Var<S>& a, const Var<S>* b = nullptr, S c = S(0)) {
    auto need_b = [&]() -> const Var<S>& {
        if (!b) throw StructuralError("binary elementwise op needs a second operand");
        return *b;
    };
    switch (kind) {
        case ElementwiseKind::add: return add(a, need_b());
        case ElementwiseKind::sub: return sub(a, need_b());
        case ElementwiseKind::mul: return mul(a, need_b());
        case ElementwiseKind::div: return div(a, need_b());
        case ElementwiseKind::neg: return neg(a);
        case ElementwiseKind::abs: return abs(a);
        case ElementwiseKind::exp: return exp(a);
        case ElementwiseKind::sign: return sign(a);
        case ElementwiseKind::scale_by_constant: return scale(a, c);
        case ElementwiseKind::clamp_min: return clamp_min(a, c);
    }
    throw StructuralError("unknown elementwise kind");
}

enum class ReduceKind { sum, mean, max };

template <typename S>
Var<S> reduce(ReduceKind kind, const Var<S>& a, const std::vector<int>& axes = {}) {
    switch (kind) {
        case ReduceKind::sum: return reduce_sum(a, axes);
        case ReduceKind::mean: return reduce_mean(a, axes);
        case ReduceKind::max: return reduce_max(a, axes);
    }
    throw StructuralError("unknown reduce kind");
}

// Mean over the batch of -log softmax(logits)[target], stabilized by
// max-subtraction. The shift is detached: it cancels analytically, so
// keeping it out of the graph changes nothing but the node count.
template <typename S>
Var<S> softmax_cross_entropy(const Var<S>& logits, const std::vector<std::int64_t>& targets) {
    if (logits.shape().size() != 2) throw StructuralError("softmax_cross_entropy expects [B,K] logits");
    const std::int64_t B = logits.shape()[0], K = logits.shape()[1];
    if (static_cast<std::int64_t>(targets.size()) != B)
        throw StructuralError("targets size does not match batch");
    Tensor<S> onehot({B, K});
    for (std::int64_t b = 0; b < B; ++b) {
        const std::int64_t t = targets[static_cast<std::size_t>(b)];
        if (t < 0 || t >= K)
            throw StructuralError("target " + std::to_string(t) + " out of range [0," + std::to_string(K) + ")");
        onehot[b * K + t] = S(1);
    }
    Var<S> shift;
    {
        NoGradGuard ng;
        shift = reshape(reduce_max(logits, {1}), Shape{B, 1});
    }
    auto centered = sub(logits, broadcast_to(shift, logits.shape()));
    auto expz = exp(centered);
    auto lse = log(reduce_sum(expz, {1}));                                        // [B]
    auto picked = reduce_sum(mul(centered, Var<S>::constant(std::move(onehot))), {1}); // [B]
    return reduce_mean(sub(lse, picked));
}

// ---- backward -------------------------------------------------------------------

template <typename S>
class GradMap {
public:
    void set(std::uint64_t id, Var<S> g) { grads_[id] = std::move(g); }

    bool contains(const Var<S>& v) const { return grads_.count(v.id()) != 0; }

    const Var<S>& at(const Var<S>& v) const {
        auto it = grads_.find(v.id());
        if (it == grads_.end()) throw StructuralError("no gradient recorded for node");
        return it->second;
    }

    std::size_t size() const { return grads_.size(); }

private:
    std::unordered_map<std::uint64_t, Var<S>> grads_;
};

namespace detail {

// Gradient of `g` reduced back to `target` after implicit broadcasting.
template <typename S>
Var<S> unbroadcast(const Var<S>& g, const Shape& target) {
    if (g.shape() == target) return g;
    const std::size_t gr = g.shape().size(), tr = target.size();
    std::vector<int> axes;
    for (std::size_t i = 0; i < gr; ++i) {
        if (i < gr - tr)
            axes.push_back(static_cast<int>(i));
        else if (target[i - (gr - tr)] == 1 && g.shape()[i] != 1)
            axes.push_back(static_cast<int>(i));
    }
    Var<S> r = axes.empty() ? g : reduce_sum(g, axes);
    return reshape(r, target);
}

template <typename S>
Shape keepdim_shape(const Shape& in, const std::vector<int>& axes) {
    Shape s = in;
    for (int a : axes) s[static_cast<std::size_t>(a)] = 1;
    return s;
}

// Emits gradient contributions to each parent of `n` given upstream grad `g`.
// Runs under the caller's GradMode: enabled means the contributions stay
// differentiable.
template <typename S>
void backprop_node(NodeData<S>* n, const Var<S>& g,
                   const std::function<void(std::size_t, Var<S>)>& accumulate) {
    const auto& ps = n->parents;
    auto want = [&](std::size_t i) { return ps[i].needs_grad(); };
    switch (n->op) {
        case Op::leaf:
            return;
        case Op::add:
            if (want(0)) accumulate(0, unbroadcast(g, ps[0].shape()));
            if (want(1)) accumulate(1, unbroadcast(g, ps[1].shape()));
            return;
        case Op::sub:
            if (want(0)) accumulate(0, unbroadcast(g, ps[0].shape()));
            if (want(1)) accumulate(1, unbroadcast(neg(g), ps[1].shape()));
            return;
        case Op::mul:
            if (want(0)) accumulate(0, unbroadcast(mul(g, ps[1]), ps[0].shape()));
            if (want(1)) accumulate(1, unbroadcast(mul(g, ps[0]), ps[1].shape()));
            return;
        case Op::div:
            if (want(0)) accumulate(0, unbroadcast(div(g, ps[1]), ps[0].shape()));
            if (want(1))
                accumulate(1, unbroadcast(neg(div(mul(g, ps[0]), mul(ps[1], ps[1]))), ps[1].shape()));
            return;
        case Op::neg:
            if (want(0)) accumulate(0, neg(g));
            return;
        case Op::abs_v:
            if (want(0)) accumulate(0, mul(g, sign(ps[0])));
            return;
        case Op::exp_v:
            if (want(0)) accumulate(0, mul(g, exp(ps[0])));
            return;
        case Op::log_v:
            if (want(0)) accumulate(0, div(g, ps[0]));
            return;
        case Op::sign_v:
        case Op::ge_mask_c:
            return; // derivative defined as 0
        case Op::scale_c:
            if (want(0)) accumulate(0, scale(g, n->c0));
            return;
        case Op::add_c:
            if (want(0)) accumulate(0, g);
            return;
        case Op::clamp_min_c:
            if (want(0)) accumulate(0, mul(g, ge_mask(ps[0], n->c0)));
            return;
        case Op::matmul:
            if (want(0)) accumulate(0, matmul(g, transpose(ps[1])));
            if (want(1)) accumulate(1, matmul(transpose(ps[0]), g));
            return;
        case Op::transpose2:
            if (want(0)) accumulate(0, transpose(g));
            return;
        case Op::conv: { // y = conv(x, k)
            const auto& x = ps[0];
            const auto& k = ps[1];
            if (want(0))
                accumulate(0, conv2d_dx_op(g, k, n->i0, n->i1, x.shape()[2], x.shape()[3]));
            if (want(1)) accumulate(1, conv2d_dk_op(x, g, n->i0, n->i1, k.shape()[2], k.shape()[3]));
            return;
        }
        case Op::conv_dx: { // y = conv_dx(gy, k); <h, conv_dx(gy,k)> = <conv(h,k), gy>
            const auto& gy = ps[0];
            const auto& k = ps[1];
            if (want(0)) accumulate(0, conv2d_raw(g, k, n->i0, n->i1));
            if (want(1)) accumulate(1, conv2d_dk_op(g, gy, n->i0, n->i1, k.shape()[2], k.shape()[3]));
            return;
        }
        case Op::conv_dk: { // y = conv_dk(x, gy); <m, conv_dk(x,gy)> = <conv(x,m), gy>
            const auto& x = ps[0];
            const auto& gy = ps[1];
            if (want(0))
                accumulate(0, conv2d_dx_op(gy, g, n->i0, n->i1, x.shape()[2], x.shape()[3]));
            if (want(1)) accumulate(1, conv2d_raw(x, g, n->i0, n->i1));
            return;
        }
        case Op::maxpool2:
            if (want(0)) accumulate(0, scatter_flat_op(g, n->indices, n->shape_attr));
            return;
        case Op::scatter_flat: {
            if (want(0)) {
                Shape gshape = ps[0].shape();
                accumulate(0, gather_flat_op(g, n->indices, gshape));
            }
            return;
        }
        case Op::gather_flat:
            if (want(0)) accumulate(0, scatter_flat_op(g, n->indices, n->shape_attr));
            return;
        case Op::reduce_sum:
            if (want(0))
                accumulate(0, broadcast_to(reshape(g, keepdim_shape<S>(n->shape_attr, n->axes)),
                                           n->shape_attr));
            return;
        case Op::reduce_mean:
            if (want(0))
                accumulate(0, scale(broadcast_to(reshape(g, keepdim_shape<S>(n->shape_attr, n->axes)),
                                                 n->shape_attr),
                                    n->c0));
            return;
        case Op::reduce_max:
            if (want(0)) accumulate(0, scatter_flat_op(g, n->indices, n->shape_attr));
            return;
        case Op::broadcast_to:
            if (want(0)) accumulate(0, unbroadcast(g, n->shape_attr));
            return;
        case Op::reshape:
            if (want(0)) accumulate(0, reshape(g, n->shape_attr));
            return;
        case Op::stack0:
            for (std::size_t i = 0; i < ps.size(); ++i)
                if (want(i)) accumulate(i, slice0(g, static_cast<std::int64_t>(i)));
            return;
        case Op::slice0:
            if (want(0)) accumulate(0, scatter0(g, n->i0, n->i1));
            return;
        case Op::scatter0:
            if (want(0)) accumulate(0, slice0(g, n->i0));
            return;
        case Op::custom_fwd: {
            if (!want(0)) return;
            if (GradMode::enabled()) {
                if (!n->custom->second_backward)
                    throw StructuralError("custom op '" + n->custom->name +
                                          "' lacks second_backward; cannot record a second-order graph");
                accumulate(0, custom_backward_node(n->custom, ps[0], g));
            } else {
                accumulate(0, Var<S>::constant(n->custom->backward(ps[0].value(), g.value())));
            }
            return;
        }
        case Op::custom_bwd: {
            // y = backward(x, gy). d y / d x enters as a constant (bounds the
            // engine at second order); d y / d gy = backward(x, 1).
            const auto& x = ps[0];
            const auto& gy = ps[1];
            if (want(0))
                accumulate(0, mul(g, Var<S>::constant(n->custom->second_backward(x.value(), gy.value()))));
            if (want(1))
                accumulate(1, mul(g, Var<S>::constant(n->custom->backward(
                                         x.value(), Tensor<S>::ones(x.shape())))));
            return;
        }
    }
    throw StructuralError("unhandled op in backward");
}

}  // namespace detail

// Reverse-mode sweep from a scalar loss. Returns gradients for every `wrt`
// node (zeros when unreachable). With create_graph the returned gradients
// carry lineage and can be differentiated again; without it, the lineage of
// all interior nodes visited is released to cap memory, and a second sweep
// over the same graph raises an error.
template <typename S>
GradMap<S> backward(const Var<S>& loss, const std::vector<Var<S>>& wrt, bool create_graph = false) {
    if (loss.size() != 1) throw StructuralError("backward needs a scalar loss, got " + shape_str(loss.shape()));

    // Topological order over the lineage-bearing subgraph.
    std::vector<NodeData<S>*> topo;
    std::unordered_set<NodeData<S>*> seen;
    {
        std::vector<std::pair<NodeData<S>*, std::size_t>> stack;
        if (loss.node()->op != Op::leaf || loss.needs_grad()) {
            if (loss.node()->released) throw StructuralError("backward over a released graph");
            stack.emplace_back(loss.node(), 0);
            seen.insert(loss.node());
        }
        while (!stack.empty()) {
            auto& [n, next] = stack.back();
            if (next < n->parents.size()) {
                NodeData<S>* p = stack.back().first->parents[next].node();
                ++next;
                if (p->needs_grad && !seen.count(p)) {
                    if (p->released) throw StructuralError("backward over a released graph");
                    seen.insert(p);
                    stack.emplace_back(p, 0);
                }
            } else {
                topo.push_back(n);
                stack.pop_back();
            }
        }
    }

    std::unordered_map<NodeData<S>*, Var<S>> grads;
    {
        GradModeGuard mode(create_graph);
        if (!topo.empty())
            grads[topo.back()] = Var<S>::constant(Tensor<S>::ones(loss.shape()));
        for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
            NodeData<S>* n = *it;
            auto git = grads.find(n);
            if (git == grads.end()) continue;
            Var<S> g = git->second;
            detail::backprop_node<S>(n, g, [&](std::size_t pi, Var<S> contrib) {
                NodeData<S>* p = n->parents[pi].node();
                auto pit = grads.find(p);
                if (pit == grads.end())
                    grads.emplace(p, std::move(contrib));
                else
                    pit->second = add(pit->second, contrib);
            });
        }
    }

    GradMap<S> out;
    for (const auto& w : wrt) {
        auto it = grads.find(w.node());
        if (it != grads.end())
            out.set(w.id(), it->second);
        else
            out.set(w.id(), Var<S>::constant(Tensor<S>::zeros(w.shape())));
    }

    if (!create_graph) {
        for (NodeData<S>* n : topo) {
            if (n->op == Op::leaf) continue;
            n->parents.clear();
            n->indices.reset();
            n->custom.reset();
            n->released = true;
            --live_recorded_nodes();
        }
    }
    return out;
}

}  // namespace metaspike::ad
