#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "metaspike/autodiff.hpp"
#include "metaspike/rng.hpp"
#include "oracles.hpp"

using namespace metaspike;
using namespace metaspike::ad;
using Catch::Approx;

namespace {

Var<double> leafd(const Shape& shape, std::vector<double> v, bool rg = true) {
    return make_node<double>(shape, std::move(v), rg);
}

double grad_at(const GradMap<double>& gm, const Var<double>& x, std::int64_t i = 0) {
    return gm.at(x).value()[i];
}

}  // namespace

TEST_CASE("make_node basics") {
    auto c = make_node<double>({2}, {1, 2}, false);
    CHECK(c.value()[0] == 1);
    CHECK(c.value()[1] == 2);
    CHECK_FALSE(c.requires_grad());

    auto s = make_node<double>({}, {3.0});
    CHECK(s.item() == 3.0);
    CHECK(s.shape().empty());

    CHECK_THROWS_AS(make_node<double>({2}, {1, 2, 3}), StructuralError);
}

TEST_CASE("elementwise values and gradients") {
    auto a = leafd({2}, {1, 2});
    auto b = leafd({2}, {3, 4});
    auto sum = add(a, b);
    CHECK(sum.value()[0] == 4);
    CHECK(sum.value()[1] == 6);

    SECTION("mul backward gives 2x") {
        auto x = leafd({}, {3.0});
        auto y = mul(x, x);
        auto g = backward(y, {x});
        CHECK(grad_at(g, x) == Approx(6.0));
    }

    SECTION("abs conventions") {
        auto x = leafd({3}, {-2.0, 0.0, 1.5});
        auto y = reduce_sum(abs(x));
        CHECK(abs(x).value()[0] == 2.0);
        auto g = backward(y, {x});
        CHECK(grad_at(g, x, 0) == -1.0);
        CHECK(grad_at(g, x, 1) == 0.0); // defined as 0 at the kink
        CHECK(grad_at(g, x, 2) == 1.0);
    }

    SECTION("sign has zero derivative") {
        auto x = leafd({3}, {-2.0, 0.0, 1.5});
        auto y = reduce_sum(sign(x));
        CHECK(sign(x).value()[0] == -1.0);
        CHECK(sign(x).value()[1] == 0.0);
        auto g = backward(y, {x});
        for (int i = 0; i < 3; ++i) CHECK(grad_at(g, x, i) == 0.0);
    }

    SECTION("dispatch surface") {
        auto x = leafd({2}, {1, -4});
        auto r = elementwise(ElementwiseKind::abs, x);
        CHECK(r.value()[1] == 4);
        auto sc = elementwise<double>(ElementwiseKind::scale_by_constant, x, nullptr, 2.5);
        CHECK(sc.value()[0] == 2.5);
        CHECK_THROWS_AS(elementwise(ElementwiseKind::add, x), StructuralError);
    }

    SECTION("div propagates non-finite values") {
        auto x = leafd({2}, {1.0, -1.0});
        auto z = Var<double>::constant(Tensor<double>({2}, {0.0, 2.0}));
        auto r = div(x, z);
        CHECK(std::isinf(r.value()[0]));
        CHECK(r.value()[1] == -0.5);
    }
}

TEST_CASE("broadcasting") {
    auto a = leafd({2, 2}, {1, 2, 3, 4});
    auto b = leafd({2}, {10, 20});
    auto y = add(a, b);
    CHECK(y.value()[0] == 11);
    CHECK(y.value()[3] == 24);

    auto loss = reduce_sum(y);
    auto g = backward(loss, {a, b});
    CHECK(grad_at(g, b, 0) == 2.0); // summed over the stretched axis
    CHECK(grad_at(g, b, 1) == 2.0);

    auto bad = leafd({3}, {1, 2, 3});
    CHECK_THROWS_AS(add(a, bad), StructuralError);
}

TEST_CASE("matmul") {
    auto eye = leafd({2, 2}, {1, 0, 0, 1});
    auto v = leafd({2, 1}, {5, 7});
    auto r = matmul(eye, v);
    CHECK(r.value()[0] == 5);
    CHECK(r.value()[1] == 7);

    auto a = leafd({1, 2}, {1, 2});
    auto b = leafd({2, 1}, {3, 4});
    CHECK(matmul(a, b).value()[0] == 11);

    auto ones = Var<double>::constant(Tensor<double>({2, 1}, {1, 1}));
    auto s = reduce_sum(matmul(a, ones));
    auto g = backward(s, {a});
    CHECK(grad_at(g, a, 0) == 1.0);

    CHECK_THROWS_AS(matmul(a, leafd({3, 1}, {1, 2, 3})), StructuralError);
}

TEST_CASE("conv2d") {
    SECTION("all-ones") {
        auto x = Var<double>::constant(Tensor<double>::ones({1, 1, 3, 3}));
        auto k = leafd({1, 1, 3, 3}, std::vector<double>(9, 1.0));
        auto b = leafd({1}, {0.0});
        auto y = conv2d(x, k, b, 1, 0);
        CHECK(y.shape() == Shape{1, 1, 1, 1});
        CHECK(y.value()[0] == 9.0);
    }

    SECTION("delta kernel reproduces the input") {
        Rng rng(3);
        Tensor<double> xt({1, 1, 6, 6});
        for (std::int64_t i = 0; i < xt.size(); ++i) xt[i] = rng.uniform(-1, 1);
        auto x = Var<double>::constant(xt);
        Tensor<double> kt({1, 1, 5, 5});
        kt[2 * 5 + 2] = 1.0;
        auto y = conv2d(x, Var<double>::constant(kt), Var<double>::constant(Tensor<double>::zeros({1})),
                        1, 2);
        REQUIRE(y.shape() == x.shape());
        for (std::int64_t i = 0; i < xt.size(); ++i) CHECK(y.value()[i] == Approx(xt[i]));
    }

    SECTION("bias gradient equals B*H'*W', cross-checked by finite differences") {
        const std::int64_t B = 2;
        Rng rng(7);
        Tensor<double> xt({B, 1, 4, 4});
        for (std::int64_t i = 0; i < xt.size(); ++i) xt[i] = rng.uniform(-1, 1);
        Tensor<double> kt({1, 1, 3, 3});
        for (std::int64_t i = 0; i < kt.size(); ++i) kt[i] = rng.uniform(-1, 1);

        auto bias = leafd({1}, {0.3});
        auto y = conv2d(Var<double>::constant(xt), Var<double>::constant(kt), bias, 1, 0);
        const std::int64_t hw = y.shape()[2] * y.shape()[3];
        auto g = backward(reduce_sum(y), {bias});
        CHECK(grad_at(g, bias) == Approx(double(B * hw)));

        auto f = [&](const std::vector<double>& bv) {
            auto yy = conv2d(Var<double>::constant(xt), Var<double>::constant(kt),
                             Var<double>::constant(Tensor<double>({1}, {bv[0]})), 1, 0);
            return reduce_sum(yy).item();
        };
        auto fd = oracles::central_diff(f, {0.3}, 1e-5);
        CHECK(grad_at(g, bias) == Approx(fd[0]).epsilon(1e-6));
    }

    SECTION("kernel and input gradients match finite differences") {
        Rng rng(11);
        std::vector<double> xv(2 * 2 * 4 * 4), kv(3 * 2 * 3 * 3), bv(3);
        for (auto& v : xv) v = rng.uniform(-1, 1);
        for (auto& v : kv) v = rng.uniform(-1, 1);
        for (auto& v : bv) v = rng.uniform(-1, 1);

        auto eval = [&](const std::vector<double>& x, const std::vector<double>& k,
                        const std::vector<double>& b) {
            auto y = conv2d(Var<double>::constant(Tensor<double>({2, 2, 4, 4}, x)),
                            Var<double>::constant(Tensor<double>({3, 2, 3, 3}, k)),
                            Var<double>::constant(Tensor<double>({3}, b)), 1, 1);
            // weigh the outputs so gradients are not uniform
            auto w = mul(y, y);
            return reduce_sum(w).item();
        };

        auto x = make_node<double>({2, 2, 4, 4}, xv, true);
        auto k = make_node<double>({3, 2, 3, 3}, kv, true);
        auto b = make_node<double>({3}, bv, true);
        auto y = conv2d(x, k, b, 1, 1);
        auto loss = reduce_sum(mul(y, y));
        auto g = backward(loss, {x, k, b});

        auto fdx = oracles::central_diff([&](const std::vector<double>& v) { return eval(v, kv, bv); },
                                         xv, 1e-5);
        auto fdk = oracles::central_diff([&](const std::vector<double>& v) { return eval(xv, v, bv); },
                                         kv, 1e-5);
        CHECK(oracles::grad_discrepancy(g.at(x).value().values(), fdx, 1e-6) < 1e-6);
        CHECK(oracles::grad_discrepancy(g.at(k).value().values(), fdk, 1e-6) < 1e-6);
    }

    SECTION("kernel larger than padded input") {
        auto x = Var<double>::constant(Tensor<double>::ones({1, 1, 3, 3}));
        auto k = Var<double>::constant(Tensor<double>::ones({1, 1, 5, 5}));
        auto b = Var<double>::constant(Tensor<double>::zeros({1}));
        CHECK_THROWS_AS(conv2d(x, k, b, 1, 0), StructuralError);
    }
}

TEST_CASE("maxpool2") {
    auto x = leafd({1, 1, 2, 2}, {1, 2, 3, 4});
    auto y = maxpool2(x);
    CHECK(y.value()[0] == 4.0);

    SECTION("tie-break to first in row-major order") {
        auto t = leafd({1, 1, 2, 2}, {5, 5, 5, 5});
        auto p = maxpool2(t);
        CHECK(p.value()[0] == 5.0);
        auto g = backward(reduce_sum(p), {t});
        CHECK(grad_at(g, t, 0) == 1.0);
        CHECK(grad_at(g, t, 1) == 0.0);
        CHECK(grad_at(g, t, 2) == 0.0);
        CHECK(grad_at(g, t, 3) == 0.0);
    }

    SECTION("gradient matches finite differences on a random 4x4") {
        Rng rng(5);
        std::vector<double> xv(16);
        for (auto& v : xv) v = rng.uniform(-1, 1);
        auto xx = make_node<double>({1, 1, 4, 4}, xv, true);
        auto loss = reduce_sum(mul(maxpool2(xx), Var<double>::constant(Tensor<double>(
                                                     {1, 1, 2, 2}, {1.0, 2.0, 3.0, 4.0}))));
        auto g = backward(loss, {xx});
        auto f = [&](const std::vector<double>& v) {
            auto p = maxpool2(Var<double>::constant(Tensor<double>({1, 1, 4, 4}, v)));
            return reduce_sum(mul(p, Var<double>::constant(
                                         Tensor<double>({1, 1, 2, 2}, {1.0, 2.0, 3.0, 4.0}))))
                .item();
        };
        auto fd = oracles::central_diff(f, xv, 1e-5);
        CHECK(oracles::grad_discrepancy(g.at(xx).value().values(), fd) < 1e-6);
    }

    CHECK_THROWS_AS(maxpool2(leafd({1, 1, 3, 2}, std::vector<double>(6, 0.0))), StructuralError);
}

TEST_CASE("reductions") {
    auto x = leafd({3}, {1, 2, 3});
    CHECK(reduce_sum(x).item() == 6.0);
    CHECK(reduce(ReduceKind::sum, x).item() == 6.0);

    auto m = leafd({2, 2}, {1, 3, 3, 5});
    auto mean0 = reduce_mean(m, {0});
    CHECK(mean0.value()[0] == 2.0);
    CHECK(mean0.value()[1] == 4.0);

    SECTION("max with first-index tie-break") {
        auto t = leafd({3}, {2, 7, 7});
        auto mx = reduce_max(t);
        CHECK(mx.item() == 7.0);
        auto g = backward(mx, {t});
        CHECK(grad_at(g, t, 0) == 0.0);
        CHECK(grad_at(g, t, 1) == 1.0);
        CHECK(grad_at(g, t, 2) == 0.0);
    }

    CHECK_THROWS_AS(reduce_sum(x, {1}), StructuralError);
}

TEST_CASE("softmax cross entropy") {
    auto uniform = leafd({1, 5}, {0, 0, 0, 0, 0});
    auto l1 = softmax_cross_entropy(uniform, {2});
    CHECK(l1.item() == Approx(std::log(5.0)).epsilon(1e-12));

    // ln(1 + e^-10), evaluated directly
    auto sharp = leafd({1, 2}, {10, 0});
    auto l2 = softmax_cross_entropy(sharp, {0});
    CHECK(l2.item() == Approx(4.5398899216870535e-05).epsilon(1e-10));

    SECTION("gradient is softmax minus one-hot") {
        auto g = backward(softmax_cross_entropy(uniform, {0}), {uniform});
        CHECK(grad_at(g, uniform, 0) == Approx(-0.8));
        for (int i = 1; i < 5; ++i) CHECK(grad_at(g, uniform, i) == Approx(0.2));
    }

    CHECK_THROWS_AS(softmax_cross_entropy(uniform, {5}), StructuralError);
    CHECK_THROWS_AS(softmax_cross_entropy(uniform, {-1}), StructuralError);
}

TEST_CASE("custom ops") {
    SECTION("identity with zero curvature") {
        auto op = register_custom<double>(
            "identity", [](const Tensor<double>& x) { return x; },
            [](const Tensor<double>&, const Tensor<double>& g) { return g; },
            [](const Tensor<double>& x, const Tensor<double>&) { return Tensor<double>::zeros(x.shape()); });
        auto x = leafd({}, {2.0});
        auto y = custom_apply(op, x);
        auto g = backward(y, {x}, true);
        CHECK(grad_at(g, x) == 1.0);
        auto g2 = backward(g.at(x), {x});
        CHECK(grad_at(g2, x) == 0.0);
    }

    SECTION("custom square matches built-in mul in both orders") {
        auto sq = register_custom<double>(
            "square",
            [](const Tensor<double>& x) {
                return kernels::unary(x, [](double v) { return v * v; });
            },
            [](const Tensor<double>& x, const Tensor<double>& g) {
                return kernels::binary(g, x, [](double gv, double xv) { return gv * 2 * xv; });
            },
            [](const Tensor<double>& x, const Tensor<double>& g) {
                return kernels::binary(g, x, [](double gv, double) { return gv * 2; });
            });
        auto x1 = leafd({}, {1.7});
        auto x2 = leafd({}, {1.7});
        auto g1 = backward(custom_apply(sq, x1), {x1}, true);
        auto g2 = backward(mul(x2, x2), {x2}, true);
        CHECK(grad_at(g1, x1) == Approx(grad_at(g2, x2)).epsilon(1e-15));
        auto h1 = backward(g1.at(x1), {x1});
        auto h2 = backward(g2.at(x2), {x2});
        CHECK(grad_at(h1, x1) == Approx(grad_at(h2, x2)).epsilon(1e-15));
    }

    SECTION("missing second_backward rejected only for second-order recording") {
        auto op = register_custom<double>(
            "halfway", [](const Tensor<double>& x) { return x; },
            [](const Tensor<double>&, const Tensor<double>& g) { return g; });
        auto x = leafd({}, {1.0});
        auto y1 = custom_apply(op, x);
        CHECK_NOTHROW(backward(y1, {x}, false));
        auto y2 = custom_apply(op, x);
        CHECK_THROWS_AS(backward(y2, {x}, true), StructuralError);
    }
}

TEST_CASE("backward semantics") {
    SECTION("second derivative of x^2") {
        auto x = leafd({}, {3.0});
        auto y = mul(x, x);
        auto g = backward(y, {x}, true);
        CHECK(grad_at(g, x) == Approx(6.0));
        auto g2 = backward(g.at(x), {x});
        CHECK(grad_at(g2, x) == Approx(2.0));
    }

    SECTION("constants yield zero gradients") {
        auto c = Var<double>::constant(Tensor<double>({3}, {1, 2, 3}));
        auto w = leafd({2}, {1, 1});
        auto loss = reduce_sum(c);
        auto g = backward(loss, {w});
        CHECK(grad_at(g, w, 0) == 0.0);
        CHECK(grad_at(g, w, 1) == 0.0);
    }

    SECTION("non-scalar loss rejected") {
        auto x = leafd({2}, {1, 2});
        CHECK_THROWS_AS(backward(x, {x}), StructuralError);
    }

    SECTION("random composite graph matches finite differences, h=1e-6") {
        Rng rng(17);
        std::vector<double> xv(6);
        for (auto& v : xv) v = rng.uniform(0.5, 1.5);
        auto f = [&](const std::vector<double>& v) {
            auto x = Var<double>::constant(Tensor<double>({2, 3}, v));
            auto a = exp(scale(x, 0.5));
            auto b = mul(x, x);
            auto c = div(add(a, b), add_const(abs(x), 1.0));
            return reduce_sum(mul(c, c)).item();
        };
        auto x = make_node<double>({2, 3}, xv, true);
        auto a = exp(scale(x, 0.5));
        auto b = mul(x, x);
        auto c = div(add(a, b), add_const(abs(x), 1.0));
        auto g = backward(reduce_sum(mul(c, c)), {x});
        auto fd = oracles::central_diff(f, xv, 1e-6);
        CHECK(oracles::grad_discrepancy(g.at(x).value().values(), fd) < 1e-8);
    }
}

TEST_CASE("autodiff invariants") {
    SECTION("recorded function agrees with central differences at h=1e-5") {
        Rng rng(23);
        std::vector<double> xv(8);
        for (auto& v : xv) v = rng.uniform(-1.0, 1.0);
        auto build = [&](const Var<double>& x) {
            auto y = matmul(reshape(x, Shape{2, 4}),
                            Var<double>::constant(Tensor<double>(
                                {4, 2}, {0.3, -1.0, 0.7, 0.2, -0.5, 0.9, 1.1, -0.4})));
            auto z = clamp_min(y, -0.35);
            return reduce_mean(mul(z, exp(scale(z, 0.3))));
        };
        auto x = make_node<double>({8}, xv, true);
        auto g = backward(build(x), {x});
        auto fd = oracles::central_diff(
            [&](const std::vector<double>& v) {
                return build(Var<double>::constant(Tensor<double>({8}, v))).item();
            },
            xv, 1e-5);
        const auto& got = g.at(x).value().values();
        for (std::size_t i = 0; i < got.size(); ++i) {
            if (std::abs(got[i]) > 1e-8)
                CHECK(std::abs(got[i] - fd[i]) / std::abs(got[i]) < 1e-4);
            else
                CHECK(std::abs(got[i] - fd[i]) < 1e-7);
        }
    }

    SECTION("double backward reproduces analytic second derivatives of a polynomial") {
        // f(x) = x^3 + 2x^2 - x; f'' = 6x + 4
        for (double xv : {-1.3, 0.4, 2.2}) {
            auto x = leafd({}, {xv});
            auto x2 = mul(x, x);
            auto f = add(sub(mul(x2, x), x), scale(x2, 2.0));
            auto g = backward(f, {x}, true);
            auto h = backward(g.at(x), {x});
            CHECK(std::abs(grad_at(h, x) - (6 * xv + 4)) < 1e-10);
        }
    }

    SECTION("linearity of the gradient operator") {
        Rng rng(31);
        std::vector<double> xv(5);
        for (auto& v : xv) v = rng.uniform(-2, 2);
        const double a = 1.7, b = -0.6;
        auto x1 = make_node<double>({5}, xv, true);
        auto f = reduce_sum(mul(x1, x1));
        auto g = reduce_sum(exp(scale(x1, 0.2)));
        auto combo = add(scale(f, a), scale(g, b));
        auto gc = backward(combo, {x1}, true);
        auto gf = backward(f, {x1}, true);
        auto gg = backward(g, {x1}, true);
        for (int i = 0; i < 5; ++i) {
            const double want = a * gf.at(x1).value()[i] + b * gg.at(x1).value()[i];
            CHECK(std::abs(gc.at(x1).value()[i] - want) < 1e-12);
        }
    }

    SECTION("unreachable parameters get exact zeros") {
        auto x = leafd({2}, {1, 2});
        auto y = leafd({2}, {3, 4});
        auto loss = reduce_sum(mul(x, x));
        auto g = backward(loss, {x, y});
        CHECK(grad_at(g, y, 0) == 0.0);
        CHECK(grad_at(g, y, 1) == 0.0);
    }

    SECTION("replay is bitwise identical") {
        Rng rng(41);
        std::vector<double> xv(12);
        for (auto& v : xv) v = rng.uniform(-1, 1);
        auto run = [&]() {
            auto x = make_node<double>({3, 4}, xv, true);
            auto y = reduce_sum(mul(exp(scale(x, 0.1)), add_const(x, 0.5)));
            auto g = backward(y, {x});
            std::pair<double, std::vector<double>> out{y.item(), g.at(x).value().values()};
            return out;
        };
        auto r1 = run();
        auto r2 = run();
        CHECK(r1.first == r2.first);
        for (std::size_t i = 0; i < r1.second.size(); ++i) CHECK(r1.second[i] == r2.second[i]);
    }
}

TEST_CASE("graph release after non-retaining backward") {
    auto x = leafd({}, {2.0});
    auto y = mul(mul(x, x), x);
    auto g1 = backward(y, {x});
    CHECK(grad_at(g1, x) == Approx(12.0));
    CHECK_THROWS_AS(backward(y, {x}), StructuralError);

    SECTION("create_graph retains") {
        auto x2 = leafd({}, {2.0});
        auto y2 = mul(x2, x2);
        auto a = backward(y2, {x2}, true);
        auto b = backward(y2, {x2}, true);
        CHECK(grad_at(a, x2) == grad_at(b, x2));
    }
}

TEST_CASE("recorded-node accounting") {
    const auto base = live_recorded_nodes();
    {
        auto x = leafd({4}, {1, 2, 3, 4});
        auto y = reduce_sum(mul(x, x));
        CHECK(live_recorded_nodes() > base);
        auto g = backward(y, {x}, false);
        (void)g;
    }
    CHECK(live_recorded_nodes() == base);
}

TEST_CASE("float instantiation works end to end") {
    auto x = make_node<float>({2}, {1.5f, -0.5f}, true);
    auto y = reduce_sum(mul(x, x));
    auto g = backward(y, {x});
    CHECK(g.at(x).value()[0] == Approx(3.0f));
    CHECK(g.at(x).value()[1] == Approx(-1.0f));
}
