#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ope/npiv.hpp"
#include "oracles.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <cstdio>
#include <filesystem>

using ope::Box;
using ope::Matrix;
using ope::Vector;

namespace {

Vector vec1(double x) {
    Vector v(1);
    v(0) = x;
    return v;
}

ope::BasisSpec cos_spec(int m) {
    ope::BasisSpec spec;
    spec.family = ope::BasisFamily::Cosine;
    spec.degree = 3;
    spec.per_dim = {m, m};
    spec.domain = {{0.0, 1.0}, {0.0, 1.0}};
    return spec;
}

struct Bench {
    ope::DesignedMdp designed;
    Box sbox{{0.0, 1.0}};
    Box abox{{0.0, 1.0}};
};

Bench make_bench(double gamma = 0.9, double noise = 0.25) {
    Bench b;
    auto mean_fn = [](const Vector& s, const Vector& a) {
        return vec1(0.2 + 0.5 * s(0) + 0.2 * a(0));
    };
    auto trans = ope::truncated_normal_transition(b.sbox, mean_fn, 0.3);
    auto target =
        ope::truncated_normal_policy(b.abox, [](const Vector& s) { return vec1(0.7 - 0.3 * s(0)); }, 0.3);
    auto behavior =
        ope::truncated_normal_policy(b.abox, [](const Vector& s) { return vec1(0.3 + 0.4 * s(0)); }, 0.4);
    b.designed = ope::designed_q_mdp(
        [](const Vector& s, const Vector& a) {
            return std::sin(M_PI * s(0)) * std::cos(M_PI * a(0) / 2.0);
        },
        trans, b.abox, target, behavior, gamma, noise);
    return b;
}

// benchmark variant whose ground truth lies exactly in the span of cos_spec(m)
struct SpanBench {
    ope::DesignedMdp designed;
    ope::BasisSpec spec;
    Vector cstar;
    Box sbox{{0.0, 1.0}};
    Box abox{{0.0, 1.0}};
};

SpanBench make_span_bench(int m, double gamma, double noise) {
    SpanBench sb;
    sb.spec = cos_spec(m);
    const Eigen::Index j = sb.spec.size();
    sb.cstar.resize(j);
    for (Eigen::Index i = 0; i < j; ++i)
        sb.cstar(i) = (i % 2 == 0 ? 1.0 : -1.0) * (1.0 + static_cast<double>(i % 3)) /
                      (2.0 + static_cast<double>(i));
    const auto spec = sb.spec;
    const Vector c = sb.cstar;
    auto qstar = [spec, c](const Vector& s, const Vector& a) {
        Matrix pt(1, 2);
        pt << s(0), a(0);
        return (ope::eval_basis(spec, pt) * c)(0);
    };
    auto mean_fn = [](const Vector& s, const Vector& a) {
        return vec1(0.2 + 0.5 * s(0) + 0.2 * a(0));
    };
    auto trans = ope::truncated_normal_transition(sb.sbox, mean_fn, 0.3);
    auto target =
        ope::truncated_normal_policy(sb.abox, [](const Vector& s) { return vec1(0.7 - 0.3 * s(0)); }, 0.3);
    auto behavior =
        ope::truncated_normal_policy(sb.abox, [](const Vector& s) { return vec1(0.3 + 0.4 * s(0)); }, 0.4);
    sb.designed = ope::designed_q_mdp(qstar, trans, sb.abox, target, behavior, gamma, noise);
    return sb;
}

// population moments under the estimated stationary occupation density:
// gb = E[b b'], sigma = E[b kappa_pi'], mr = E[b rbar]
struct PopMoments {
    Matrix gb;
    Matrix sigma;
    Vector mr;
};

PopMoments pop_moments(const ope::MdpSpec& mdp, const ope::PolicyDensity& target,
                       const ope::BasisSpec& psi_spec, const ope::BasisSpec& b_spec,
                       const ope::StationaryDensity& stat) {
    const auto arule = ope::tensor_gauss_rule(mdp.action_box, 32);
    const auto& srule = stat.state_rule;
    const Eigen::Index ns = srule.size(), na = arule.size(), ks = srule.size();
    const Eigen::Index j = psi_spec.size(), k = b_spec.size();

    const Matrix psi_pi = ope::policy_basis(psi_spec, target, srule.nodes, arule);

    PopMoments out;
    out.gb = Matrix::Zero(k, k);
    out.sigma = Matrix::Zero(k, j);
    out.mr = Vector::Zero(k);
    for (Eigen::Index i = 0; i < ns; ++i) {
        const Vector s = srule.nodes.row(i);
        for (Eigen::Index l = 0; l < na; ++l) {
            const Vector a = arule.nodes.row(l);
            const double w = srule.weights(i) * stat.f(i) * arule.weights(l) *
                             mdp.behavior.density(s, a);
            if (w == 0.0) continue;
            Matrix pt(1, 2);
            pt << s(0), a(0);
            const Matrix brow = ope::eval_basis(b_spec, pt);
            const Matrix psirow = ope::eval_basis(psi_spec, pt);
            Vector tpsi = Vector::Zero(j);
            double rbar = 0.0;
            for (Eigen::Index kk = 0; kk < ks; ++kk) {
                const Vector sp = srule.nodes.row(kk);
                const double u = srule.weights(kk) * mdp.transition.density(s, a, sp);
                if (u == 0.0) continue;
                tpsi += u * psi_pi.row(kk).transpose();
                rbar += u * mdp.reward_fn(s, a, sp);
            }
            const Vector kappa = psirow.row(0).transpose() - mdp.gamma * tpsi;
            out.gb += w * brow.row(0).transpose() * brow.row(0);
            out.sigma += w * brow.row(0).transpose() * kappa.transpose();
            out.mr += w * rbar * brow.row(0).transpose();
        }
    }
    return out;
}

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

} // namespace

TEST_CASE("assemble: shapes, row order, gamma-zero identity, ratio guards") {
    Bench b = make_bench(0.9, 0.1);
    const auto data = ope::sample_trajectories(b.designed.mdp, b.designed.mdp.behavior, 5, 8, 0, 3);
    const auto arule = ope::tensor_gauss_rule(b.abox, 32);
    const auto spec = cos_spec(3);
    const auto sys = ope::assemble(data, spec, spec, b.designed.mdp.target, 0.9, arule);
    CHECK(sys.rows() == 40);
    CHECK(sys.n_coef() == 9);
    CHECK(sys.n_instruments() == 9);
    CHECK((sys.gamma_pi - (sys.psi - 0.9 * sys.g_pi)).cwiseAbs().maxCoeff() <= 1e-14);

    // rows follow the dataset order
    Matrix pt(1, 2);
    pt << data.s(13, 0), data.a(13, 0);
    CHECK((sys.psi.row(13) - ope::eval_basis(spec, pt).row(0)).cwiseAbs().maxCoeff() == 0.0);

    const auto sys0 = ope::assemble(data, spec, spec, b.designed.mdp.target, 0.0, arule);
    CHECK((sys0.gamma_pi - sys0.psi).cwiseAbs().maxCoeff() == 0.0);

    const auto one = ope::sample_trajectories(b.designed.mdp, b.designed.mdp.behavior, 1, 1, 0, 3);
    CHECK(ope::assemble(one, spec, spec, b.designed.mdp.target, 0.9, arule).rows() == 1);

    CHECK_THROWS_AS(ope::assemble(data, cos_spec(4), cos_spec(3), b.designed.mdp.target, 0.9, arule),
                    ope::config_error);
    CHECK_THROWS_AS(ope::assemble(data, cos_spec(3), cos_spec(5), b.designed.mdp.target, 0.9, arule),
                    ope::config_error); // 25 > 2 * 9
}

TEST_CASE("assemble: sample cross moments match population quadrature") {
    SpanBench sb = make_span_bench(3, 0.9, 0.25);
    const auto data =
        ope::sample_trajectories(sb.designed.mdp, sb.designed.mdp.behavior, 100, 100, 200, 1701);
    const auto arule = ope::tensor_gauss_rule(sb.abox, 32);
    const auto sys = ope::assemble(data, sb.spec, sb.spec, sb.designed.mdp.target, 0.9, arule);

    const auto stat = ope::estimate_stationary(sb.designed.mdp, sb.designed.mdp.behavior);
    const auto pop = pop_moments(sb.designed.mdp, sb.designed.mdp.target, sb.spec, sb.spec, stat);

    const Eigen::Index n = data.n_traj, t = data.horizon;
    const Matrix sample = sys.b.transpose() * sys.gamma_pi / static_cast<double>(n * t);
    for (Eigen::Index col = 0; col < sys.n_coef(); ++col) {
        for (Eigen::Index row = 0; row < sys.n_instruments(); ++row) {
            // SE from independent per-trajectory means
            std::vector<double> tm(static_cast<size_t>(n));
            for (Eigen::Index i = 0; i < n; ++i) {
                double acc = 0.0;
                for (Eigen::Index tt = 0; tt < t; ++tt)
                    acc += sys.b(i * t + tt, row) * sys.gamma_pi(i * t + tt, col);
                tm[static_cast<size_t>(i)] = acc / static_cast<double>(t);
            }
            const auto [m, se] = oracle::mc_mean_se(tm);
            CHECK(std::abs(m - pop.sigma(row, col)) < 3.0 * se + 1e-9);
            CHECK(std::abs(m - sample(row, col)) < 1e-12); // same computation, two routes
        }
    }
}

TEST_CASE("fit_2sls: gamma zero with B = Psi is ordinary least squares") {
    Bench b = make_bench(0.0, 0.25);
    const auto data = ope::sample_trajectories(b.designed.mdp, b.designed.mdp.behavior, 40, 25, 0, 9);
    const auto arule = ope::tensor_gauss_rule(b.abox, 32);
    const auto spec = cos_spec(3);
    const auto sys = ope::assemble(data, spec, spec, b.designed.mdp.target, 0.0, arule);
    const auto fit = ope::fit_2sls(sys);

    const Vector ols = (sys.psi.transpose() * sys.psi)
                           .ldlt()
                           .solve(sys.psi.transpose() * sys.r);
    CHECK((fit.coef - ols).cwiseAbs().maxCoeff() < 1e-8);
    CHECK(!fit.diag.rank_deficient);
    CHECK(fit.diag.rank_instruments == 9);
    CHECK(fit.diag.rank_projected == 9);
    CHECK(fit.diag.grad_norm <= 1e-8 * sys.r.norm());
}

TEST_CASE("fit_2sls: matches the raw closed form at full rank") {
    Bench b = make_bench(0.9, 0.25);
    const auto data = ope::sample_trajectories(b.designed.mdp, b.designed.mdp.behavior, 50, 40, 0, 17);
    const auto arule = ope::tensor_gauss_rule(b.abox, 32);
    const auto sys = ope::assemble(data, cos_spec(3), cos_spec(4), b.designed.mdp.target, 0.9, arule);
    const auto fit = ope::fit_2sls(sys);

    // textbook route with explicit inverses, no whitening
    const Matrix btb = sys.b.transpose() * sys.b;
    const Matrix gtb = sys.gamma_pi.transpose() * sys.b;
    const Matrix mid = gtb * btb.ldlt().solve(gtb.transpose());
    const Vector rhs = gtb * btb.ldlt().solve(sys.b.transpose() * sys.r);
    const Vector direct = mid.ldlt().solve(rhs);
    CHECK((fit.coef - direct).cwiseAbs().maxCoeff() < 1e-8);
    CHECK(fit.diag.grad_norm <= 1e-8 * sys.r.norm());
    CHECK(fit.diag.cond_projected >= 1.0);
}

TEST_CASE("fit_2sls: LSTD nesting, B = Psi solves the temporal-difference normal equations") {
    Bench b = make_bench(0.9, 0.25);
    const auto data = ope::sample_trajectories(b.designed.mdp, b.designed.mdp.behavior, 50, 40, 0, 23);
    const auto arule = ope::tensor_gauss_rule(b.abox, 32);
    const auto spec = cos_spec(3);
    const auto sys = ope::assemble(data, spec, spec, b.designed.mdp.target, 0.9, arule);
    const auto fit = ope::fit_2sls(sys);

    const Matrix a = sys.psi.transpose() * sys.gamma_pi;
    const Vector rhs = sys.psi.transpose() * sys.r;
    const Vector lstd = a.partialPivLu().solve(rhs);
    CHECK((fit.coef - lstd).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("fit_2sls: noiseless in-span data recovers exact coefficients") {
    SpanBench sb = make_span_bench(4, 0.9, 0.0);
    const auto data =
        ope::sample_trajectories(sb.designed.mdp, sb.designed.mdp.behavior, 100, 20, 0, 29);
    const auto arule = ope::tensor_gauss_rule(sb.abox, 32);
    const auto sys = ope::assemble(data, sb.spec, sb.spec, sb.designed.mdp.target, 0.9, arule);

    // rewards must be exactly Gamma_pi c* (same action rule as the designer)
    CHECK((sys.r - sys.gamma_pi * sb.cstar).cwiseAbs().maxCoeff() < 1e-12);

    const auto fit = ope::fit_2sls(sys);
    CHECK((fit.coef - sb.cstar).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("fit_2sls: input guards and rank-deficiency flag") {
    Bench b = make_bench(0.9, 0.25);
    const auto data = ope::sample_trajectories(b.designed.mdp, b.designed.mdp.behavior, 4, 2, 0, 5);
    const auto arule = ope::tensor_gauss_rule(b.abox, 32);
    const auto sys = ope::assemble(data, cos_spec(3), cos_spec(3), b.designed.mdp.target, 0.9, arule);
    CHECK_THROWS_AS(ope::fit_2sls(sys), ope::input_error); // 8 rows < 9 instruments

    auto big = ope::assemble(
        ope::sample_trajectories(b.designed.mdp, b.designed.mdp.behavior, 30, 20, 0, 5),
        cos_spec(3), cos_spec(3), b.designed.mdp.target, 0.9, arule);
    auto tampered = big;
    tampered.r(0) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(ope::fit_2sls(tampered), ope::input_error);
    tampered = big;
    tampered.gamma_pi(0, 0) += 1e-6;
    CHECK_THROWS_AS(ope::fit_2sls(tampered), ope::input_error);

    // duplicated feature column: flagged, still finite
    auto dup = big;
    dup.psi.col(8) = dup.psi.col(7);
    dup.g_pi.col(8) = dup.g_pi.col(7);
    dup.b.col(8) = dup.b.col(7);
    dup.gamma_pi = dup.psi - 0.9 * dup.g_pi;
    const auto fit = ope::fit_2sls(dup);
    CHECK(fit.diag.rank_deficient);
    CHECK(fit.diag.rank_instruments < 9);
    CHECK(fit.coef.allFinite());
}

TEST_CASE("fit_2sls: coefficients vary smoothly in gamma") {
    Bench b = make_bench(0.9, 0.25);
    const auto data = ope::sample_trajectories(b.designed.mdp, b.designed.mdp.behavior, 50, 40, 0, 37);
    const auto arule = ope::tensor_gauss_rule(b.abox, 32);
    const auto sys = ope::assemble(data, cos_spec(3), cos_spec(4), b.designed.mdp.target, 0.9, arule);

    auto with_gamma = [&](double g) {
        ope::AssembledSystem s2 = sys;
        s2.gamma = g;
        s2.gamma_pi = sys.psi - g * sys.g_pi;
        return ope::fit_2sls(s2);
    };

    // analytic derivative of the closed form c = A^{-1} b, with
    // A = Gamma' P Gamma, b = Gamma' P R, dGamma/dgamma = -G
    const Matrix btb = sys.b.transpose() * sys.b;
    auto proj = [&](const Matrix& x) { return (sys.b * btb.ldlt().solve(sys.b.transpose() * x)).eval(); };
    const Matrix pg = proj(sys.gamma_pi);
    const Matrix a = sys.gamma_pi.transpose() * pg;
    const Vector c0 = with_gamma(0.9).coef;
    const Matrix da = -(sys.g_pi.transpose() * pg) - sys.gamma_pi.transpose() * proj(sys.g_pi);
    const Vector db = -(sys.g_pi.transpose() * proj(Matrix(sys.r)));
    const Vector dc = a.ldlt().solve(db - da * c0);

    const double h = 1e-5;
    const Vector fd = (with_gamma(0.9 + h).coef - with_gamma(0.9 - h).coef) / (2.0 * h);
    CHECK((fd - dc).cwiseAbs().maxCoeff() < 1e-4 * (1.0 + dc.cwiseAbs().maxCoeff()));
}

TEST_CASE("fit_2sls: population projected objective shrinks with more data") {
    SpanBench sb = make_span_bench(3, 0.9, 0.25);
    const auto arule = ope::tensor_gauss_rule(sb.abox, 32);
    const auto stat = ope::estimate_stationary(sb.designed.mdp, sb.designed.mdp.behavior);
    const auto pop = pop_moments(sb.designed.mdp, sb.designed.mdp.target, sb.spec, sb.spec, stat);
    const Matrix gb_inv = ope::pinv_truncated(pop.gb);
    auto pop_objective = [&](const Vector& c) {
        const Vector g = pop.mr - pop.sigma * c;
        return g.dot(gb_inv * g);
    };

    const std::vector<Eigen::Index> ns = {25, 100, 400};
    std::vector<double> means;
    for (size_t lvl = 0; lvl < ns.size(); ++lvl) {
        double acc = 0.0;
        for (int rep = 0; rep < 50; ++rep) {
            const auto data = ope::sample_trajectories(
                sb.designed.mdp, sb.designed.mdp.behavior, ns[lvl], 10, 50,
                9000 + static_cast<std::uint64_t>(lvl) * 100 + static_cast<std::uint64_t>(rep));
            const auto sys = ope::assemble(data, sb.spec, sb.spec, sb.designed.mdp.target, 0.9, arule);
            acc += pop_objective(ope::fit_2sls(sys).coef);
        }
        means.push_back(acc / 50.0);
    }
    CHECK(means[1] < means[0]);
    CHECK(means[2] < means[1]);
}

TEST_CASE("predict_q and derivatives") {
    Bench b = make_bench(0.9, 0.25);
    const auto data = ope::sample_trajectories(b.designed.mdp, b.designed.mdp.behavior, 50, 40, 0, 41);
    const auto arule = ope::tensor_gauss_rule(b.abox, 32);
    const auto spec = cos_spec(3);
    const auto sys = ope::assemble(data, spec, spec, b.designed.mdp.target, 0.9, arule);
    auto fit = ope::fit_2sls(sys);

    // unit coefficient vector picks out the first basis function
    ope::SieveFit e1 = fit;
    e1.coef.setZero();
    e1.coef(0) = 1.0;
    Matrix pts(3, 2);
    pts << 0.1, 0.2, 0.5, 0.6, 0.9, 0.3;
    const Vector p = ope::predict_q(e1, pts);
    const Matrix vals = ope::eval_basis(spec, pts);
    CHECK((p - vals.col(0)).cwiseAbs().maxCoeff() < 1e-15);

    // zero order derivative is the prediction itself
    const Vector d0 = ope::predict_q_deriv(fit, pts, {0, 0});
    CHECK((d0 - ope::predict_q(fit, pts)).cwiseAbs().maxCoeff() < 1e-15);

    // first derivative matches central differences at interior points
    ope::SeededStream rng(4, 4);
    for (int i = 0; i < 50; ++i) {
        const double sv = 0.05 + 0.9 * rng.uniform01();
        const double av = 0.05 + 0.9 * rng.uniform01();
        const double an = ope::predict_q_deriv(fit, vec1(sv), vec1(av), {1, 0});
        Vector pt(2);
        pt << sv, av;
        const double fd = oracle::central_diff(
            [&](const Vector& x) { return ope::predict_q(fit, x.head(1), x.tail(1)); }, pt, 0, 1e-5);
        CHECK(std::abs(an - fd) < 1e-6);
    }
}

TEST_CASE("fit json round trip preserves everything") {
    Bench b = make_bench(0.9, 0.25);
    const auto data = ope::sample_trajectories(b.designed.mdp, b.designed.mdp.behavior, 30, 20, 0, 43);
    const auto arule = ope::tensor_gauss_rule(b.abox, 32);
    const auto sys = ope::assemble(data, cos_spec(3), cos_spec(3), b.designed.mdp.target, 0.9, arule);
    const auto fit = ope::fit_2sls(sys);

    const auto back = ope::fit_from_json(ope::fit_to_json(fit));
    CHECK((back.coef - fit.coef).cwiseAbs().maxCoeff() == 0.0);
    CHECK(back.gamma == fit.gamma);
    CHECK(back.psi_spec.family == fit.psi_spec.family);
    CHECK(back.psi_spec.per_dim == fit.psi_spec.per_dim);
    CHECK(back.psi_spec.domain[0].lo == fit.psi_spec.domain[0].lo);
    CHECK(back.diag.grad_norm == fit.diag.grad_norm);
    CHECK(back.diag.rank_projected == fit.diag.rank_projected);

    const std::string path = temp_path("ope_fit_roundtrip.json");
    ope::write_fit_json(fit, path);
    const auto disk = ope::read_fit_json(path);
    CHECK((disk.coef - fit.coef).cwiseAbs().maxCoeff() == 0.0);
    std::remove(path.c_str());

    CHECK_THROWS_AS(ope::fit_from_json("{not json"), ope::input_error);
    CHECK_THROWS_AS(ope::fit_from_json("{\"gamma\": 0.9}"), ope::input_error);
    CHECK_THROWS_AS(ope::read_fit_json(temp_path("ope_missing_fit.json")), ope::input_error);
}

TEST_CASE("bellman residual norms vanish at the exact solution") {
    SpanBench sb = make_span_bench(3, 0.9, 0.0);
    const auto data =
        ope::sample_trajectories(sb.designed.mdp, sb.designed.mdp.behavior, 60, 30, 0, 47);
    const auto arule = ope::tensor_gauss_rule(sb.abox, 32);
    const auto sys = ope::assemble(data, sb.spec, sb.spec, sb.designed.mdp.target, 0.9, arule);
    const auto fit = ope::fit_2sls(sys);

    // evaluation points and stationary weights from the occupation density
    const auto stat = ope::estimate_stationary(sb.designed.mdp, sb.designed.mdp.behavior);
    const auto aq = ope::tensor_gauss_rule(sb.abox, 16);
    const Eigen::Index ns = stat.state_rule.size(), na = aq.size();
    Matrix pts(ns * na, 2);
    Vector wts(ns * na);
    for (Eigen::Index i = 0; i < ns; ++i)
        for (Eigen::Index l = 0; l < na; ++l) {
            pts(i * na + l, 0) = stat.state_rule.nodes(i, 0);
            pts(i * na + l, 1) = aq.nodes(l, 0);
            wts(i * na + l) = stat.state_rule.weights(i) * stat.f(i) * aq.weights(l) *
                              sb.designed.mdp.behavior.density(stat.state_rule.nodes.row(i),
                                                               aq.nodes.row(l));
        }
    const auto srule = ope::tensor_gauss_rule(sb.sbox, 64);
    const auto res =
        ope::bellman_residual_norms(fit, sb.designed.mdp, sb.designed.mdp.target, pts, wts, srule);
    CHECK(res.sup < 1e-8);
    CHECK(res.l2 < 1e-8);
    CHECK(res.l2 <= res.sup + 1e-15);
}

TEST_CASE("bellman residual at gamma zero is the regression residual") {
    Bench b = make_bench(0.0, 0.0);
    const auto data = ope::sample_trajectories(b.designed.mdp, b.designed.mdp.behavior, 30, 20, 0, 53);
    const auto arule = ope::tensor_gauss_rule(b.abox, 32);
    const auto sys = ope::assemble(data, cos_spec(2), cos_spec(2), b.designed.mdp.target, 0.0, arule);
    const auto fit = ope::fit_2sls(sys);

    Matrix pts(4, 2);
    pts << 0.2, 0.3, 0.5, 0.5, 0.8, 0.1, 0.35, 0.9;
    const Vector wts = Vector::Ones(4);
    const auto srule = ope::tensor_gauss_rule(b.sbox, 64);
    const auto res = ope::bellman_residual_norms(fit, b.designed.mdp, b.designed.mdp.target, pts, wts,
                                                 srule);
    double sup = 0.0;
    for (Eigen::Index i = 0; i < 4; ++i) {
        const Vector s = pts.row(i).head(1), a = pts.row(i).tail(1);
        double rbar = 0.0;
        for (Eigen::Index k = 0; k < srule.size(); ++k) {
            const Vector sp = srule.nodes.row(k);
            rbar += srule.weights(k) * b.designed.mdp.transition.density(s, a, sp) *
                    b.designed.mdp.reward_fn(s, a, sp);
        }
        sup = std::max(sup, std::abs(rbar - ope::predict_q(fit, s, a)));
    }
    CHECK(std::abs(res.sup - sup) < 1e-12);

    CHECK_THROWS_AS(ope::bellman_residual_norms(fit, b.designed.mdp, b.designed.mdp.target, pts,
                                                Vector::Ones(3), srule),
                    ope::input_error);
}

TEST_CASE("plugin value: point masses, zero coefficients, quadrature route") {
    Bench b = make_bench(0.9, 0.25);
    const auto data = ope::sample_trajectories(b.designed.mdp, b.designed.mdp.behavior, 40, 30, 0, 59);
    const auto arule = ope::tensor_gauss_rule(b.abox, 32);
    const auto sys = ope::assemble(data, cos_spec(3), cos_spec(3), b.designed.mdp.target, 0.9, arule);
    auto fit = ope::fit_2sls(sys);
    const auto srule = ope::tensor_gauss_rule(b.sbox, 32);

    ope::InitialDist pinit;
    pinit.point = true;
    pinit.location = vec1(0.4);
    auto pt_policy = ope::point_mass_policy(b.abox, [](const Vector&) { return vec1(0.7); });
    CHECK(std::abs(ope::plugin_value(fit, pt_policy, pinit, srule, arule) -
                   ope::predict_q(fit, vec1(0.4), vec1(0.7))) < 1e-14);

    ope::SieveFit zero = fit;
    zero.coef.setZero();
    ope::InitialDist uinit;
    uinit.density = [](const Vector&) { return 1.0; };
    CHECK(ope::plugin_value(zero, b.designed.mdp.target, uinit, srule, arule) == 0.0);

    // direct double quadrature of the prediction agrees
    const double v = ope::plugin_value(fit, b.designed.mdp.target, uinit, srule, arule);
    double direct = 0.0;
    for (Eigen::Index i = 0; i < srule.size(); ++i)
        for (Eigen::Index l = 0; l < arule.size(); ++l)
            direct += srule.weights(i) * arule.weights(l) *
                      b.designed.mdp.target.density(srule.nodes.row(i), arule.nodes.row(l)) *
                      ope::predict_q(fit, srule.nodes.row(i), arule.nodes.row(l));
    CHECK(std::abs(v - direct) < 1e-12);
}

TEST_CASE("bootstrap value: deterministic, consistent with plugin, spread positive") {
    SpanBench sb = make_span_bench(3, 0.9, 0.25);
    const auto data =
        ope::sample_trajectories(sb.designed.mdp, sb.designed.mdp.behavior, 200, 25, 20, 61);
    const auto arule = ope::tensor_gauss_rule(sb.abox, 32);
    const auto sys = ope::assemble(data, sb.spec, sb.spec, sb.designed.mdp.target, 0.9, arule);
    const auto fit = ope::fit_2sls(sys);
    const auto srule = ope::tensor_gauss_rule(sb.sbox, 32);
    ope::InitialDist uinit;
    uinit.density = [](const Vector&) { return 1.0; };

    const auto bv =
        ope::bootstrap_value(sys, sb.designed.mdp.target, uinit, srule, arule, 100, 77);
    const double direct = ope::plugin_value(fit, sb.designed.mdp.target, uinit, srule, arule);
    CHECK(std::abs(bv.value - direct) < 1e-10);
    CHECK(bv.se > 0.0);
    CHECK(bv.replicates.size() == 100);

    const auto bv2 =
        ope::bootstrap_value(sys, sb.designed.mdp.target, uinit, srule, arule, 100, 77);
    CHECK((bv.replicates - bv2.replicates).cwiseAbs().maxCoeff() == 0.0);

    // replicate spread brackets the point estimate loosely
    CHECK(std::abs(bv.replicates.mean() - bv.value) < 5.0 * bv.se);
}

TEST_CASE("choose_J follows the dimension rule") {
    const auto l2 = ope::choose_J(1e4, 2.0, 2, "l2", 1.0);
    CHECK(l2.j_raw == doctest::Approx(std::pow(1e4, 1.0 / 3.0)).epsilon(1e-12));
    CHECK(l2.per_dim == 5);
    CHECK(l2.j == 25);

    const auto dbl = ope::choose_J(1e4, 2.0, 2, "l2", 2.0);
    CHECK(dbl.j_raw == doctest::Approx(2.0 * l2.j_raw).epsilon(1e-12));

    const auto sup = ope::choose_J(1e4, 2.0, 2, "sup", 1.0);
    CHECK(sup.j_raw == doctest::Approx(std::pow(1e4 / std::log(1e4), 1.0 / 3.0)).epsilon(1e-12));
    CHECK(sup.j <= l2.j);

    CHECK_THROWS_AS(ope::choose_J(1e4, 1.0, 2, "sup", 1.0), ope::capability_error);
    CHECK_THROWS_AS(ope::choose_J(1e4, 2.0, 2, "max", 1.0), ope::input_error);
    CHECK_THROWS_AS(ope::choose_J(1.0, 2.0, 2, "l2", 1.0), ope::input_error);
    CHECK_THROWS_AS(ope::choose_J(1e4, -1.0, 2, "l2", 1.0), ope::input_error);
    CHECK_THROWS_AS(ope::choose_J(1e4, 2.0, 2, "l2", 0.0), ope::input_error);
}

TEST_CASE("multiplier selection returns finite scores for every candidate") {
    Bench b = make_bench(0.9, 0.25);
    const auto data = ope::sample_trajectories(b.designed.mdp, b.designed.mdp.behavior, 50, 40, 10, 67);
    const auto arule = ope::tensor_gauss_rule(b.abox, 32);
    Box sa_domain = {{0.0, 1.0}, {0.0, 1.0}};
    const auto scores = ope::select_j_multiplier(data, ope::BasisFamily::Cosine, 3, sa_domain,
                                                 b.designed.mdp.target, 0.9, arule, 2.0, "l2",
                                                 {0.5, 1.0, 2.0});
    REQUIRE(scores.size() == 3);
    for (const auto& sc : scores) {
        CHECK(std::isfinite(sc.criterion));
        CHECK(sc.criterion >= 0.0);
        CHECK(sc.j >= 1);
    }
    CHECK(scores[0].j <= scores[2].j);
    CHECK_THROWS_AS(ope::select_j_multiplier(data, ope::BasisFamily::Cosine, 3, sa_domain,
                                             b.designed.mdp.target, 0.9, arule, 2.0, "l2", {}),
                    ope::input_error);
}
