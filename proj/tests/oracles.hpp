#pragma once

// Test-only oracles, independent of the library's differentiation path:
// central finite differences, and a tiny recurrence calculator for the
// neuron dynamics. These compute expected values; the library must agree.

#include <cmath>
#include <functional>
#include <vector>

namespace oracles {

// Central difference gradient of a scalar function of a flat vector.
inline std::vector<double> central_diff(const std::function<double(const std::vector<double>&)>& f,
                                        std::vector<double> x, double h) {
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = x[i];
        x[i] = orig + h;
        const double fp = f(x);
        x[i] = orig - h;
        const double fm = f(x);
        x[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

// Componentwise comparison helper: relative error where the reference is
// large, absolute where it is tiny.
inline double grad_discrepancy(const std::vector<double>& got, const std::vector<double>& ref,
                               double abs_floor = 1e-8) {
    double worst = 0;
    for (std::size_t i = 0; i < got.size(); ++i) {
        const double denom = std::abs(ref[i]);
        const double err = std::abs(got[i] - ref[i]);
        worst = std::max(worst, denom > abs_floor ? err / denom : err);
    }
    return worst;
}

// Scalar LIF trace recurrence, straight from the update equations.
struct LifScalarOracle {
    double alpha, beta, gamma, rho, u_th;
    double p = 0, q = 0, r = 0;

    // Returns (u, s) for this step given weight w, bias b, presyn spike s_pre.
    std::pair<double, double> step(double w, double b, double s_pre) {
        const double u = w * p - rho * r + b;
        const double s = u >= u_th ? 1.0 : 0.0;
        const double p_next = alpha * p + (1 - alpha) * q;
        const double q_next = beta * q + (1 - beta) * s_pre;
        const double r_next = gamma * r + (1 - gamma) * s;
        p = p_next;
        q = q_next;
        r = r_next;
        return {u, s};
    }
};

// Scripted ADAM recurrence for cross-checking the implementation.
struct AdamScalarOracle {
    double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    double m = 0, v = 0;
    long t = 0;

    double step(double theta, double g, double lr) {
        ++t;
        m = b1 * m + (1 - b1) * g;
        v = b2 * v + (1 - b2) * g * g;
        const double mhat = m / (1 - std::pow(b1, t));
        const double vhat = v / (1 - std::pow(b2, t));
        return theta - lr * mhat / (std::sqrt(vhat) + eps);
    }
};

}  // namespace oracles
