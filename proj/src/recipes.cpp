#include "ope/recipes.hpp"

#include <cmath>

namespace ope {

namespace {

Vector vec1(double x) {
    Vector v(1);
    v(0) = x;
    return v;
}

struct Dynamics {
    Box sbox{{0.0, 1.0}};
    Box abox{{0.0, 1.0}};
    TransitionKernel trans;
    PolicyDensity target;
    PolicyDensity behavior;
};

Dynamics shared_dynamics() {
    Dynamics d;
    d.trans = truncated_normal_transition(
        d.sbox,
        [](const Vector& s, const Vector& a) { return vec1(0.2 + 0.5 * s(0) + 0.2 * a(0)); }, 0.3);
    d.target = truncated_normal_policy(
        d.abox, [](const Vector& s) { return vec1(0.7 - 0.3 * s(0)); }, 0.3);
    d.behavior = truncated_normal_policy(
        d.abox, [](const Vector& s) { return vec1(0.3 + 0.4 * s(0)); }, 0.4);
    return d;
}

InitialDist uniform_init(const Box& sbox) {
    InitialDist init;
    init.point = false;
    const double vol = box_volume(sbox);
    init.density = [vol](const Vector&) { return 1.0 / vol; };
    return init;
}

void check_alpha(const MultiIndex& alpha) {
    if (alpha.size() != 2)
        throw input_error("recipe derivative: alpha must have one entry per (s,a) dimension");
    if (alpha[0] < 0 || alpha[1] < 0)
        throw input_error("recipe derivative: alpha entries must be nonnegative");
}

Recipe make_benchmark_2d(double gamma, double noise_sd) {
    Dynamics d = shared_dynamics();
    Recipe r;
    r.id = "benchmark-2d";
    auto qstar = [](const Vector& s, const Vector& a) {
        return std::sin(M_PI * s(0)) * std::cos(M_PI * a(0) / 2.0);
    };
    r.designed = designed_q_mdp(qstar, d.trans, d.abox, d.target, d.behavior, gamma, noise_sd);
    // d^k/dx^k sin(w x) = w^k sin(w x + k pi/2), likewise for cos
    r.q_star_deriv = [](const Vector& s, const Vector& a, const MultiIndex& alpha) {
        check_alpha(alpha);
        const double ks = static_cast<double>(alpha[0]);
        const double ka = static_cast<double>(alpha[1]);
        const double fs = std::pow(M_PI, ks) * std::sin(M_PI * s(0) + ks * M_PI / 2.0);
        const double fa =
            std::pow(M_PI / 2.0, ka) * std::cos(M_PI * a(0) / 2.0 + ka * M_PI / 2.0);
        return fs * fa;
    };
    r.init = uniform_init(d.sbox);
    return r;
}

Recipe make_span_2d(double gamma, double noise_sd) {
    Dynamics d = shared_dynamics();
    Recipe r;
    r.id = "span-2d";
    BasisSpec spec;
    spec.family = BasisFamily::Cosine;
    spec.per_dim = {3, 3};
    spec.domain = {{0.0, 1.0}, {0.0, 1.0}};
    Vector c(9);
    c << 0.8, -0.4, 0.25, 0.5, -0.2, 0.1, 0.3, -0.15, 0.05;
    auto qstar = [spec, c](const Vector& s, const Vector& a) {
        Matrix pt(1, 2);
        pt << s(0), a(0);
        return (eval_basis(spec, pt) * c)(0);
    };
    r.designed = designed_q_mdp(qstar, d.trans, d.abox, d.target, d.behavior, gamma, noise_sd);
    r.q_star_deriv = [spec, c](const Vector& s, const Vector& a, const MultiIndex& alpha) {
        check_alpha(alpha);
        Matrix pt(1, 2);
        pt << s(0), a(0);
        if (alpha[0] == 0 && alpha[1] == 0) return (eval_basis(spec, pt) * c)(0);
        return (eval_basis_deriv(spec, pt, alpha) * c)(0);
    };
    r.init = uniform_init(d.sbox);
    return r;
}

} // namespace

const std::vector<std::string>& recipe_ids() {
    static const std::vector<std::string> ids = {"benchmark-2d", "span-2d"};
    return ids;
}

Recipe make_recipe(const std::string& id, double gamma, double noise_sd) {
    if (id == "benchmark-2d") return make_benchmark_2d(gamma, noise_sd);
    if (id == "span-2d") return make_span_2d(gamma, noise_sd);
    std::string msg = "unknown recipe '" + id + "'; available:";
    for (const auto& known : recipe_ids()) msg += " " + known;
    throw input_error(msg);
}

} // namespace ope
