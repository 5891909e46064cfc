#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "metaspike/errors.hpp"

namespace metaspike {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_size(const Shape& s) {
    std::int64_t n = 1;
    for (std::int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream oss;
    oss << '[';
    for (std::size_t i = 0; i < s.size(); ++i) oss << (i ? "," : "") << s[i];
    oss << ']';
    return oss.str();
}

inline Shape row_major_strides(const Shape& s) {
    Shape st(s.size());
    std::int64_t acc = 1;
    for (std::size_t i = s.size(); i-- > 0;) {
        st[i] = acc;
        acc *= s[i];
    }
    return st;
}

// Broadcast result shape, rightmost-aligned, size-1 axes stretch.
inline Shape broadcast_shapes(const Shape& a, const Shape& b) {
    const std::size_t r = std::max(a.size(), b.size());
    Shape out(r);
    for (std::size_t i = 0; i < r; ++i) {
        const std::int64_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
        const std::int64_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (da != db && da != 1 && db != 1)
            throw StructuralError("shapes not broadcast-compatible: " + shape_str(a) + " vs " +
                                  shape_str(b));
        out[i] = std::max(da, db);
    }
    return out;
}

// Dense row-major array. Rank 0 denotes a scalar (size 1).
template <typename S>
class Tensor {
public:
    Tensor() : shape_{}, data_(1, S(0)) {}

    explicit Tensor(Shape shape) : shape_(std::move(shape)) {
        validate_shape();
        data_.assign(static_cast<std::size_t>(shape_size(shape_)), S(0));
    }

    Tensor(Shape shape, std::vector<S> values) : shape_(std::move(shape)), data_(std::move(values)) {
        validate_shape();
        if (static_cast<std::int64_t>(data_.size()) != shape_size(shape_))
            throw StructuralError("value count " + std::to_string(data_.size()) +
                                  " does not match shape " + shape_str(shape_));
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor full(Shape shape, S v) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }

    static Tensor ones(Shape shape) { return full(std::move(shape), S(1)); }

    static Tensor scalar(S v) { return Tensor({}, {v}); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::int64_t size() const noexcept { return static_cast<std::int64_t>(data_.size()); }

    S* data() noexcept { return data_.data(); }
    const S* data() const noexcept { return data_.data(); }
    std::vector<S>& values() noexcept { return data_; }
    const std::vector<S>& values() const noexcept { return data_; }

    S& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    S operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    S item() const {
        if (data_.size() != 1) throw StructuralError("item() on non-scalar tensor " + shape_str(shape_));
        return data_[0];
    }

    std::int64_t dim(std::size_t i) const { return shape_[i]; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    Tensor reshaped(Shape s) const {
        if (shape_size(s) != size())
            throw StructuralError("reshape " + shape_str(shape_) + " -> " + shape_str(s) +
                                  " changes element count");
        Tensor t;
        t.shape_ = std::move(s);
        t.data_ = data_;
        return t;
    }

    template <typename T>
    Tensor<T> cast() const {
        std::vector<T> v(data_.size());
        for (std::size_t i = 0; i < data_.size(); ++i) v[i] = static_cast<T>(data_[i]);
        Tensor<T> t;
        t = Tensor<T>(shape_, std::move(v));
        return t;
    }

private:
    void validate_shape() const {
        for (std::int64_t d : shape_)
            if (d <= 0) throw StructuralError("non-positive dimension in shape " + shape_str(shape_));
    }

    Shape shape_;
    std::vector<S> data_;
};

namespace kernels {

// ---- elementwise with broadcasting -----------------------------------------

template <typename S, typename F>
Tensor<S> binary(const Tensor<S>& a, const Tensor<S>& b, F f) {
    if (a.shape() == b.shape()) {
        Tensor<S> out(a.shape());
        const S* pa = a.data();
        const S* pb = b.data();
        S* po = out.data();
        const std::int64_t n = a.size();
        for (std::int64_t i = 0; i < n; ++i) po[i] = f(pa[i], pb[i]);
        return out;
    }
    const Shape os = broadcast_shapes(a.shape(), b.shape());
    Tensor<S> out(os);
    const std::size_t r = os.size();
    // Strides padded to the output rank; 0 on stretched axes.
    auto padded = [&](const Tensor<S>& t) {
        Shape st(r, 0);
        const Shape ts = t.shape();
        const Shape tst = row_major_strides(ts);
        for (std::size_t i = 0; i < ts.size(); ++i) {
            const std::size_t oi = i + (r - ts.size());
            st[oi] = ts[i] == 1 ? 0 : tst[i];
        }
        return st;
    };
    const Shape sa = padded(a);
    const Shape sb = padded(b);
    std::vector<std::int64_t> idx(r, 0);
    const S* pa = a.data();
    const S* pb = b.data();
    S* po = out.data();
    const std::int64_t n = out.size();
    std::int64_t oa = 0, ob = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        po[i] = f(pa[oa], pb[ob]);
        for (std::size_t ax = r; ax-- > 0;) {
            ++idx[ax];
            oa += sa[ax];
            ob += sb[ax];
            if (idx[ax] < os[ax]) break;
            oa -= sa[ax] * os[ax];
            ob -= sb[ax] * os[ax];
            idx[ax] = 0;
        }
    }
    return out;
}

template <typename S, typename F>
Tensor<S> unary(const Tensor<S>& a, F f) {
    Tensor<S> out(a.shape());
    const S* pa = a.data();
    S* po = out.data();
    const std::int64_t n = a.size();
    for (std::int64_t i = 0; i < n; ++i) po[i] = f(pa[i]);
    return out;
}

template <typename S>
S sign_of(S x) {
    return x > S(0) ? S(1) : (x < S(0) ? S(-1) : S(0));
}

// ---- matmul -----------------------------------------------------------------

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw StructuralError("matmul needs rank-2 operands, got " + shape_str(a.shape()) + " and " +
                              shape_str(b.shape()));
    const std::int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2)
        throw StructuralError("matmul inner dimensions differ: " + shape_str(a.shape()) + " vs " +
                              shape_str(b.shape()));
    Tensor<S> out({m, n});
    const S* pa = a.data();
    const S* pb = b.data();
    S* po = out.data();
    for (std::int64_t i = 0; i < m; ++i) {
        S* orow = po + i * n;
        for (std::int64_t l = 0; l < k; ++l) {
            const S av = pa[i * k + l];
            if (av == S(0)) continue;
            const S* brow = pb + l * n;
            for (std::int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    return out;
}

template <typename S>
Tensor<S> transpose2(const Tensor<S>& a) {
    if (a.rank() != 2) throw StructuralError("transpose needs rank-2 operand");
    const std::int64_t m = a.dim(0), n = a.dim(1);
    Tensor<S> out({n, m});
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
    return out;
}

// ---- conv2d (cross-correlation) ----------------------------------------------
//
// The three kernels below are mutual adjoints: forward, gradient w.r.t. input,
// gradient w.r.t. kernel. Each one's derivatives are again expressible with
// the same three, which is what makes repeated differentiation exact.

inline std::int64_t conv_out_extent(std::int64_t in, std::int64_t k, std::int64_t stride,
                                    std::int64_t pad) {
    return (in + 2 * pad - k) / stride + 1;
}

inline void conv_check(std::int64_t H, std::int64_t W, std::int64_t kh, std::int64_t kw,
                       std::int64_t stride, std::int64_t pad) {
    if (stride < 1) throw StructuralError("conv stride must be >= 1");
    if (pad < 0) throw StructuralError("conv padding must be >= 0");
    if (kh > H + 2 * pad || kw > W + 2 * pad)
        throw StructuralError("conv kernel exceeds padded input extent");
}

template <typename S>
Tensor<S> conv2d_fwd(const Tensor<S>& x, const Tensor<S>& k, std::int64_t stride, std::int64_t pad) {
    if (x.rank() != 4 || k.rank() != 4) throw StructuralError("conv2d expects [B,C,H,W] and [Co,Ci,kh,kw]");
    const std::int64_t B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::int64_t Co = k.dim(0), Ci2 = k.dim(1), kh = k.dim(2), kw = k.dim(3);
    if (Ci != Ci2) throw StructuralError("conv2d channel mismatch");
    conv_check(H, W, kh, kw, stride, pad);
    const std::int64_t Ho = conv_out_extent(H, kh, stride, pad);
    const std::int64_t Wo = conv_out_extent(W, kw, stride, pad);
    Tensor<S> y({B, Co, Ho, Wo});
    const S* px = x.data();
    const S* pk = k.data();
    S* py = y.data();
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t co = 0; co < Co; ++co)
            for (std::int64_t ci = 0; ci < Ci; ++ci)
                for (std::int64_t r = 0; r < kh; ++r)
                    for (std::int64_t c = 0; c < kw; ++c) {
                        const S w = pk[((co * Ci + ci) * kh + r) * kw + c];
                        if (w == S(0)) continue;
                        for (std::int64_t oh = 0; oh < Ho; ++oh) {
                            const std::int64_t ih = oh * stride - pad + r;
                            if (ih < 0 || ih >= H) continue;
                            const S* xrow = px + ((b * Ci + ci) * H + ih) * W;
                            S* yrow = py + ((b * Co + co) * Ho + oh) * Wo;
                            for (std::int64_t ow = 0; ow < Wo; ++ow) {
                                const std::int64_t iw = ow * stride - pad + c;
                                if (iw < 0 || iw >= W) continue;
                                yrow[ow] += w * xrow[iw];
                            }
                        }
                    }
    return y;
}

template <typename S>
Tensor<S> conv2d_dx(const Tensor<S>& g, const Tensor<S>& k, std::int64_t stride, std::int64_t pad,
                    std::int64_t H, std::int64_t W) {
    const std::int64_t B = g.dim(0), Co = g.dim(1), Ho = g.dim(2), Wo = g.dim(3);
    const std::int64_t Ci = k.dim(1), kh = k.dim(2), kw = k.dim(3);
    if (k.dim(0) != Co) throw StructuralError("conv2d_dx channel mismatch");
    Tensor<S> dx({B, Ci, H, W});
    const S* pg = g.data();
    const S* pk = k.data();
    S* px = dx.data();
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t co = 0; co < Co; ++co)
            for (std::int64_t ci = 0; ci < Ci; ++ci)
                for (std::int64_t r = 0; r < kh; ++r)
                    for (std::int64_t c = 0; c < kw; ++c) {
                        const S w = pk[((co * Ci + ci) * kh + r) * kw + c];
                        if (w == S(0)) continue;
                        for (std::int64_t oh = 0; oh < Ho; ++oh) {
                            const std::int64_t ih = oh * stride - pad + r;
                            if (ih < 0 || ih >= H) continue;
                            S* xrow = px + ((b * Ci + ci) * H + ih) * W;
                            const S* grow = pg + ((b * Co + co) * Ho + oh) * Wo;
                            for (std::int64_t ow = 0; ow < Wo; ++ow) {
                                const std::int64_t iw = ow * stride - pad + c;
                                if (iw < 0 || iw >= W) continue;
                                xrow[iw] += w * grow[ow];
                            }
                        }
                    }
    return dx;
}

template <typename S>
Tensor<S> conv2d_dk(const Tensor<S>& x, const Tensor<S>& g, std::int64_t stride, std::int64_t pad,
                    std::int64_t kh, std::int64_t kw) {
    const std::int64_t B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::int64_t Co = g.dim(1), Ho = g.dim(2), Wo = g.dim(3);
    if (g.dim(0) != B) throw StructuralError("conv2d_dk batch mismatch");
    Tensor<S> dk({Co, Ci, kh, kw});
    const S* px = x.data();
    const S* pg = g.data();
    S* pk = dk.data();
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t co = 0; co < Co; ++co)
            for (std::int64_t ci = 0; ci < Ci; ++ci)
                for (std::int64_t r = 0; r < kh; ++r)
                    for (std::int64_t c = 0; c < kw; ++c) {
                        S acc = S(0);
                        for (std::int64_t oh = 0; oh < Ho; ++oh) {
                            const std::int64_t ih = oh * stride - pad + r;
                            if (ih < 0 || ih >= H) continue;
                            const S* xrow = px + ((b * Ci + ci) * H + ih) * W;
                            const S* grow = pg + ((b * Co + co) * Ho + oh) * Wo;
                            for (std::int64_t ow = 0; ow < Wo; ++ow) {
                                const std::int64_t iw = ow * stride - pad + c;
                                if (iw < 0 || iw >= W) continue;
                                acc += xrow[iw] * grow[ow];
                            }
                        }
                        pk[((co * Ci + ci) * kh + r) * kw + c] += acc;
                    }
    return dk;
}

// ---- 2x2 max pooling ----------------------------------------------------------

template <typename S>
Tensor<S> maxpool2(const Tensor<S>& x, std::vector<std::int64_t>& argmax_flat) {
    if (x.rank() != 4) throw StructuralError("maxpool2 expects [B,C,H,W]");
    const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (H % 2 != 0 || W % 2 != 0)
        throw StructuralError("maxpool2 requires even spatial dims, got " + shape_str(x.shape()));
    const std::int64_t Ho = H / 2, Wo = W / 2;
    Tensor<S> y({B, C, Ho, Wo});
    argmax_flat.assign(static_cast<std::size_t>(y.size()), 0);
    const S* px = x.data();
    S* py = y.data();
    std::int64_t o = 0;
    for (std::int64_t bc = 0; bc < B * C; ++bc) {
        const S* plane = px + bc * H * W;
        for (std::int64_t oh = 0; oh < Ho; ++oh)
            for (std::int64_t ow = 0; ow < Wo; ++ow, ++o) {
                // Row-major first-index tie-break: strict > keeps the earliest.
                std::int64_t best = (2 * oh) * W + 2 * ow;
                S bv = plane[best];
                const std::int64_t cand[3] = {(2 * oh) * W + 2 * ow + 1, (2 * oh + 1) * W + 2 * ow,
                                              (2 * oh + 1) * W + 2 * ow + 1};
                for (std::int64_t ci : cand)
                    if (plane[ci] > bv) {
                        bv = plane[ci];
                        best = ci;
                    }
                py[o] = bv;
                argmax_flat[static_cast<std::size_t>(o)] = bc * H * W + best;
            }
    }
    return y;
}

// out[indices[i]] += g[i]
template <typename S>
Tensor<S> scatter_flat(const Tensor<S>& g, const std::vector<std::int64_t>& indices, const Shape& out_shape) {
    Tensor<S> out(out_shape);
    if (static_cast<std::int64_t>(indices.size()) != g.size())
        throw StructuralError("scatter_flat index count mismatch");
    S* po = out.data();
    const S* pg = g.data();
    for (std::size_t i = 0; i < indices.size(); ++i) po[indices[i]] += pg[i];
    return out;
}

// out[i] = x[indices[i]]
template <typename S>
Tensor<S> gather_flat(const Tensor<S>& x, const std::vector<std::int64_t>& indices, const Shape& out_shape) {
    Tensor<S> out(out_shape);
    if (static_cast<std::int64_t>(indices.size()) != out.size())
        throw StructuralError("gather_flat index count mismatch");
    S* po = out.data();
    const S* px = x.data();
    for (std::size_t i = 0; i < indices.size(); ++i) po[i] = px[indices[i]];
    return out;
}

// ---- reductions ----------------------------------------------------------------

inline void check_axes(const Shape& shape, const std::vector<int>& axes) {
    std::vector<bool> seen(shape.size(), false);
    for (int a : axes) {
        if (a < 0 || a >= static_cast<int>(shape.size()))
            throw StructuralError("reduce axis " + std::to_string(a) + " out of range for " +
                                  shape_str(shape));
        if (seen[static_cast<std::size_t>(a)]) throw StructuralError("duplicate reduce axis");
        seen[static_cast<std::size_t>(a)] = true;
    }
}

inline Shape reduced_shape(const Shape& shape, const std::vector<int>& axes, bool keepdims) {
    Shape out;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        const bool cut = std::find(axes.begin(), axes.end(), static_cast<int>(i)) != axes.end();
        if (!cut)
            out.push_back(shape[i]);
        else if (keepdims)
            out.push_back(1);
    }
    return out;
}

// Maps every input flat index to its output flat index for a reduction.
class ReduceMap {
public:
    ReduceMap(const Shape& shape, const std::vector<int>& axes) {
        check_axes(shape, axes);
        const std::size_t r = shape.size();
        in_shape_ = shape;
        keep_.assign(r, true);
        for (int a : axes) keep_[static_cast<std::size_t>(a)] = false;
        Shape out_shape;
        for (std::size_t i = 0; i < r; ++i)
            if (keep_[i]) out_shape.push_back(shape[i]);
        out_strides_.assign(r, 0);
        Shape ost = row_major_strides(out_shape);
        std::size_t oi = 0;
        for (std::size_t i = 0; i < r; ++i)
            if (keep_[i]) out_strides_[i] = ost[oi++];
        out_size_ = shape_size(out_shape);
        out_shape_ = std::move(out_shape);
    }

    const Shape& out_shape() const { return out_shape_; }
    std::int64_t out_size() const { return out_size_; }

    template <typename Fn>
    void for_each(Fn fn) const {
        const std::size_t r = in_shape_.size();
        std::vector<std::int64_t> idx(r, 0);
        std::int64_t out = 0;
        const std::int64_t n = shape_size(in_shape_);
        for (std::int64_t i = 0; i < n; ++i) {
            fn(i, out);
            for (std::size_t ax = r; ax-- > 0;) {
                ++idx[ax];
                out += out_strides_[ax];
                if (idx[ax] < in_shape_[ax]) break;
                out -= out_strides_[ax] * in_shape_[ax];
                idx[ax] = 0;
            }
        }
    }

private:
    Shape in_shape_;
    Shape out_shape_;
    std::vector<bool> keep_;
    Shape out_strides_;
    std::int64_t out_size_ = 0;
};

template <typename S>
Tensor<S> reduce_sum(const Tensor<S>& x, const std::vector<int>& axes) {
    ReduceMap map(x.shape(), axes);
    Tensor<S> out(map.out_shape());
    const S* px = x.data();
    S* po = out.data();
    map.for_each([&](std::int64_t i, std::int64_t o) { po[o] += px[i]; });
    return out;
}

template <typename S>
Tensor<S> reduce_max(const Tensor<S>& x, const std::vector<int>& axes,
                     std::vector<std::int64_t>& argmax_flat) {
    ReduceMap map(x.shape(), axes);
    Tensor<S> out(map.out_shape());
    argmax_flat.assign(static_cast<std::size_t>(map.out_size()), -1);
    const S* px = x.data();
    S* po = out.data();
    map.for_each([&](std::int64_t i, std::int64_t o) {
        auto& am = argmax_flat[static_cast<std::size_t>(o)];
        if (am < 0 || px[i] > po[o]) {
            po[o] = px[i];
            am = i;
        }
    });
    return out;
}

template <typename S>
Tensor<S> broadcast_to(const Tensor<S>& x, const Shape& target) {
    if (x.shape() == target) return x;
    if (broadcast_shapes(x.shape(), target) != target)
        throw StructuralError("cannot broadcast " + shape_str(x.shape()) + " to " + shape_str(target));
    return binary(x, Tensor<S>::zeros(target), [](S a, S) { return a; });
}

}  // namespace kernels
}  // namespace metaspike
