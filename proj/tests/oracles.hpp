#pragma once

// Independent reference implementations used as test oracles. These
// deliberately take different routes than the library code: eigenvalue
// extremes come from shifted power iteration rather than a packed solver,
// integrals from closed forms or plain Monte Carlo, derivatives from
// difference quotients.

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <vector>

namespace oracle {

struct Extremes {
    double min;
    double max;
};

// Shifted power iteration. A + cI makes the largest eigenvalue dominant in
// magnitude, cI - A does the same for the smallest; the Rayleigh quotient of
// the converged vector is the estimate.
inline Extremes power_iteration_extremes(const Eigen::MatrixXd& a, int iters = 30000) {
    const Eigen::Index n = a.rows();
    const double c = a.cwiseAbs().rowwise().sum().maxCoeff() + 1.0;

    auto dominant = [&](const Eigen::MatrixXd& m) {
        Eigen::VectorXd v = Eigen::VectorXd::Ones(n);
        for (Eigen::Index i = 0; i < n; ++i) v(i) += 1e-3 * static_cast<double>(i % 7);
        v.normalize();
        for (int it = 0; it < iters; ++it) {
            v = m * v;
            v.normalize();
        }
        return v.dot(m * v);
    };

    Eigen::MatrixXd id = Eigen::MatrixXd::Identity(n, n);
    Extremes e{};
    e.max = dominant(a + c * id) - c;
    e.min = c - dominant(c * id - a);
    return e;
}

// Central difference of a scalar function along coordinate k.
inline double central_diff(const std::function<double(const Eigen::VectorXd&)>& f,
                           const Eigen::VectorXd& x, int k, double h) {
    Eigen::VectorXd xp = x, xm = x;
    xp(k) += h;
    xm(k) -= h;
    return (f(xp) - f(xm)) / (2.0 * h);
}

struct MeanSe {
    double mean;
    double se;
};

inline MeanSe mc_mean_se(const std::vector<double>& xs) {
    const double n = static_cast<double>(xs.size());
    double m = 0.0;
    for (double x : xs) m += x;
    m /= n;
    double v = 0.0;
    for (double x : xs) v += (x - m) * (x - m);
    v /= (n - 1.0);
    return {m, std::sqrt(v / n)};
}

// Closed-form values frozen for quadrature checks.
// int_0^1 sin(pi x) dx = 2/pi, so the product integral over the unit square
// is (2/pi)^2.
inline constexpr double kSinSinUnitSquare = 4.0 / (M_PI * M_PI);

// Phi^{-1}(0.975), the 97.5% normal quantile.
inline constexpr double kZ975 = 1.959963984540054;

} // namespace oracle
