#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ope/diagnostics.hpp"
#include "oracles.hpp"

#include <json.hpp>

#include <cmath>
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

Bench make_pm_bench(double gamma = 0.9) {
    Bench b;
    auto mean_fn = [](const Vector& s, const Vector& a) {
        return vec1(0.2 + 0.5 * s(0) + 0.2 * a(0));
    };
    auto trans = ope::truncated_normal_transition(b.sbox, mean_fn, 0.3);
    auto target = ope::point_mass_policy(
        b.abox, [](const Vector& s) { return vec1(0.25 + 0.5 * s(0)); });
    auto behavior =
        ope::truncated_normal_policy(b.abox, [](const Vector& s) { return vec1(0.3 + 0.4 * s(0)); }, 0.4);
    b.designed = ope::designed_q_mdp(
        [](const Vector& s, const Vector& a) {
            return std::sin(M_PI * s(0)) * std::cos(M_PI * a(0) / 2.0);
        },
        trans, b.abox, target, behavior, gamma, 0.2);
    return b;
}

using QFun = std::function<double(const Vector&, const Vector&)>;

// bounded smooth test function with random oscillation and a random bump
QFun random_smooth(ope::SeededStream& rng) {
    const double c0 = rng.uniform(-1.0, 1.0);
    const double c1 = rng.uniform(-2.0, 2.0);
    const double w1 = rng.uniform(0.5, 3.0);
    const double w2 = rng.uniform(0.5, 3.0);
    const double p1 = rng.uniform(0.0, 2.0 * M_PI);
    const double c2 = rng.uniform(-1.5, 1.5);
    const double mu = rng.uniform(0.1, 0.9);
    const double nu = rng.uniform(0.1, 0.9);
    const double len = rng.uniform(0.05, 0.3);
    return [=](const Vector& s, const Vector& a) {
        const double ds = s(0) - mu;
        const double da = a(0) - nu;
        const double bump = std::exp(-(ds * ds + da * da) / (2.0 * len));
        return c0 + c1 * std::sin(w1 * M_PI * s(0) + p1) * std::cos(w2 * M_PI * a(0)) + c2 * bump;
    };
}

} // namespace

TEST_CASE("report invariants and determinism on the benchmark") {
    Bench b = make_bench();
    const auto spec = cos_spec(3);
    const auto rep =
        ope::compute_report(b.designed.mdp, b.designed.mdp.target, spec, spec, 2000, 5, 64, 32, 41, 41);

    CHECK(rep.j == 9);
    CHECK(rep.k == 9);
    CHECK(rep.gamma == doctest::Approx(0.9));
    CHECK(rep.e_j > 0.0);
    CHECK(rep.omega_j > 0.0);
    CHECK(rep.e_j <= rep.omega_j * (1.0 + 0.9) * (1.0 + 0.9) + 1e-9);
    CHECK(rep.s_jk > 0.0);
    CHECK(rep.s_jk <= 1.0 + 1e-9);
    CHECK(rep.tau_j >= 1.0 - 1e-6);
    CHECK(rep.tau_j <= rep.tau_bound);
    CHECK(rep.xi_psi >= 1.0); // the constant function sits in the basis
    CHECK(rep.zeta_b == rep.xi_psi);
    CHECK(rep.zeta_kappa > 0.0);
    CHECK(rep.p_min > 0.0);
    CHECK(rep.p_max >= rep.p_min);
    CHECK(std::isfinite(rep.tau_bound));
    CHECK_FALSE(rep.singular_flag);
    CHECK(rep.se_e_j >= 0.0);
    CHECK(rep.se_omega_j >= 0.0);
    CHECK(rep.se_s_jk >= 0.0);
    CHECK(rep.se_tau_j >= 0.0);
    CHECK(rep.proj_residual >= 0.0);
    CHECK(rep.mc_points == 2000);
    CHECK(rep.sup_grid == 41);
    CHECK(rep.seed == 5);

    const auto rep2 =
        ope::compute_report(b.designed.mdp, b.designed.mdp.target, spec, spec, 2000, 5, 64, 32, 41, 41);
    CHECK(rep2.e_j == rep.e_j);
    CHECK(rep2.omega_j == rep.omega_j);
    CHECK(rep2.s_jk == rep.s_jk);
    CHECK(rep2.tau_j == rep.tau_j);
    CHECK(rep2.se_tau_j == rep.se_tau_j);
    CHECK(rep2.zeta_kappa == rep.zeta_kappa);
    CHECK(rep2.proj_residual == rep.proj_residual);

    const auto rep3 =
        ope::compute_report(b.designed.mdp, b.designed.mdp.target, spec, spec, 2000, 6, 64, 32, 41, 41);
    CHECK(rep3.e_j != rep.e_j);
}

TEST_CASE("zero discount collapses attenuation and alignment") {
    Bench b = make_bench(0.0);
    const auto spec = cos_spec(3);
    const auto rep =
        ope::compute_report(b.designed.mdp, b.designed.mdp.target, spec, spec, 1500, 9, 64, 32, 41, 41);
    CHECK(rep.tau_j == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(rep.s_jk == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(rep.se_tau_j <= 1e-9);
    // with identical features the h Gram equals the psi Gram here
    CHECK(rep.e_j == doctest::Approx(rep.omega_j).epsilon(1e-12));

    const auto chk = ope::check_ej_bound(rep);
    CHECK(chk.pass);
    CHECK(chk.margin_statement >= chk.margin_chain);
}

TEST_CASE("attenuation grows with the sieve and respects the coverage cap") {
    Bench b = make_bench();
    double prev_tau = 0.0;
    double prev_ej = std::numeric_limits<double>::infinity();
    double prev_omega = std::numeric_limits<double>::infinity();
    for (int m = 3; m <= 6; ++m) {
        const auto spec = cos_spec(m);
        const auto rep = ope::compute_report(b.designed.mdp, b.designed.mdp.target, spec, spec, 4000,
                                             11, 64, 32, 41, 41);
        INFO("per-dim count m = ", m);
        CHECK(rep.tau_j >= prev_tau - 1e-9);
        CHECK(rep.tau_j >= 1.0 - 1e-6);
        CHECK(rep.tau_j <= rep.tau_bound);
        // nested spans: the smaller Gram is a principal submatrix, so the
        // minimum eigenvalue cannot rise with m
        CHECK(rep.e_j <= prev_ej + 1e-12);
        CHECK(rep.omega_j <= prev_omega + 1e-12);
        CHECK_FALSE(rep.singular_flag);
        const auto chk = ope::check_ej_bound(rep);
        CHECK(chk.pass);
        prev_tau = rep.tau_j;
        prev_ej = rep.e_j;
        prev_omega = rep.omega_j;
    }
}

TEST_CASE("projection defect shrinks with richer instruments") {
    Bench b = make_bench();
    const auto psi = cos_spec(3);
    const auto rep_same = ope::compute_report(b.designed.mdp, b.designed.mdp.target, psi,
                                              cos_spec(3), 3000, 17, 64, 32, 41, 41);
    const auto rep_rich = ope::compute_report(b.designed.mdp, b.designed.mdp.target, psi,
                                              cos_spec(4), 3000, 17, 64, 32, 41, 41);
    // same sample and same random directions, nested instrument spans
    CHECK(rep_rich.proj_residual <= rep_same.proj_residual + 1e-12);
    CHECK(rep_rich.k == 16);
    CHECK(rep_rich.s_jk > 0.0);
    CHECK(rep_rich.s_jk <= 1.0 + 1e-9);
}

TEST_CASE("report rejects unusable inputs") {
    Bench b = make_bench();
    const auto spec = cos_spec(3);
    CHECK_THROWS_AS(ope::compute_report(b.designed.mdp, b.designed.mdp.target, spec, spec, 89, 1),
                    ope::input_error);
    ope::BasisSpec wrong = spec;
    wrong.per_dim = {3};
    wrong.domain = {{0.0, 1.0}};
    CHECK_THROWS_AS(ope::compute_report(b.designed.mdp, b.designed.mdp.target, wrong, spec, 2000, 1),
                    ope::input_error);
    CHECK_THROWS_AS(
        ope::compute_report(b.designed.mdp, b.designed.mdp.target, spec, spec, 2000, 1, 1, 32),
        ope::input_error);
    CHECK_THROWS_AS(
        ope::compute_report(b.designed.mdp, b.designed.mdp.target, spec, spec, 2000, 1, 64, 0),
        ope::input_error);
}

TEST_CASE("report json carries every field") {
    Bench b = make_bench();
    const auto spec = cos_spec(3);
    const auto rep =
        ope::compute_report(b.designed.mdp, b.designed.mdp.target, spec, spec, 1200, 3, 48, 16, 21, 21);

    const auto parsed = nlohmann::json::parse(ope::report_to_json(rep));
    CHECK(parsed.at("schema_version").get<int>() == 1);
    CHECK(parsed.at("j").get<long>() == rep.j);
    CHECK(parsed.at("k").get<long>() == rep.k);
    CHECK(parsed.at("gamma").get<double>() == rep.gamma);
    CHECK(parsed.at("e_j").get<double>() == rep.e_j);
    CHECK(parsed.at("omega_j").get<double>() == rep.omega_j);
    CHECK(parsed.at("s_jk").get<double>() == rep.s_jk);
    CHECK(parsed.at("tau_j").get<double>() == rep.tau_j);
    CHECK(parsed.at("se_tau_j").get<double>() == rep.se_tau_j);
    CHECK(parsed.at("zeta_b").get<double>() == rep.zeta_b);
    CHECK(parsed.at("zeta_kappa").get<double>() == rep.zeta_kappa);
    CHECK(parsed.at("xi_psi").get<double>() == rep.xi_psi);
    CHECK(parsed.at("p_min").get<double>() == rep.p_min);
    CHECK(parsed.at("p_max").get<double>() == rep.p_max);
    CHECK(parsed.at("tau_bound").get<double>() == rep.tau_bound);
    CHECK(parsed.at("proj_residual").get<double>() == rep.proj_residual);
    CHECK(parsed.at("singular_flag").get<bool>() == rep.singular_flag);
    CHECK(parsed.at("mc_points").get<int>() == rep.mc_points);
    CHECK(parsed.at("seed").get<std::uint64_t>() == rep.seed);

    const auto dir = std::filesystem::temp_directory_path() / "ope_diag_test";
    std::filesystem::create_directories(dir);
    const std::string path = (dir / "report.json").string();
    ope::write_report_json(rep, path);
    std::ifstream in(path);
    nlohmann::json from_file;
    in >> from_file;
    CHECK(from_file.at("tau_j").get<double>() == rep.tau_j);
    CHECK(from_file.at("sup_grid").get<int>() == 21);

    ope::IllPosednessReport degenerate;
    degenerate.tau_bound = std::numeric_limits<double>::infinity();
    const auto dj = nlohmann::json::parse(ope::report_to_json(degenerate));
    CHECK(dj.at("tau_bound").get<std::string>() == "inf");
}

TEST_CASE("l2 chain collapses for identical pairs and is tight for constants") {
    Bench b = make_bench();
    const auto& mdp = b.designed.mdp;
    const auto stat = ope::estimate_stationary(mdp, mdp.behavior);
    const auto cov = ope::coverage_bounds(mdp, mdp.target, stat, 41);

    QFun qs = [](const Vector& s, const Vector& a) { return std::sin(s(0)) + a(0); };
    auto same = ope::check_wellposedness_l2(mdp, mdp.target, {qs}, {qs}, stat, cov);
    REQUIRE(same.pairs.size() == 1);
    CHECK(same.pairs[0].lhs <= 1e-12);
    CHECK(same.pairs[0].mid <= 1e-12);
    CHECK(same.pairs[0].rhs <= 1e-12);
    CHECK(same.violations == 0);

    QFun qc = [](const Vector&, const Vector&) { return 2.5; };
    QFun zero = [](const Vector&, const Vector&) { return 0.0; };
    auto cst = ope::check_wellposedness_l2(mdp, mdp.target, {qc}, {zero}, stat, cov);
    REQUIRE(cst.pairs.size() == 1);
    // constant difference: the middle and right terms are both c (1 - gamma)
    CHECK(cst.pairs[0].mid == doctest::Approx(2.5 * 0.1).epsilon(1e-6));
    CHECK(cst.pairs[0].rhs == doctest::Approx(cst.pairs[0].mid).epsilon(1e-9));
    CHECK(cst.pairs[0].margin_low > 0.0);
    CHECK(cst.violations == 0);

    CHECK_THROWS_AS(ope::check_wellposedness_l2(mdp, mdp.target, {qc}, {qc, zero}, stat, cov),
                    ope::input_error);
    CHECK_THROWS_AS(ope::check_wellposedness_l2(mdp, mdp.target, {}, {}, stat, cov),
                    ope::input_error);
}

TEST_CASE("l2 chain holds for random smooth pairs") {
    Bench b = make_bench();
    const auto& mdp = b.designed.mdp;
    const auto stat = ope::estimate_stationary(mdp, mdp.behavior);
    const auto cov = ope::coverage_bounds(mdp, mdp.target, stat, 41);

    ope::SeededStream rng(2024, 7);
    std::vector<QFun> first, second;
    for (int i = 0; i < 200; ++i) {
        first.push_back(random_smooth(rng));
        second.push_back(random_smooth(rng));
    }
    const auto res = ope::check_wellposedness_l2(mdp, mdp.target, first, second, stat, cov);
    REQUIRE(res.pairs.size() == 200);
    CHECK(res.violations == 0);
    CHECK(res.worst_margin >= -1e-6);
    for (const auto& c : res.pairs) {
        CHECK(c.rhs + 1e-12 >= c.mid);
        CHECK(c.mid + 1e-6 >= c.lhs);
    }
}

TEST_CASE("sup chain holds on operator-closed evaluation sets") {
    Bench b = make_bench();
    const auto& mdp = b.designed.mdp;

    ope::SeededStream rng(99, 3);
    std::vector<QFun> dqs;
    for (int i = 0; i < 100; ++i) dqs.push_back(random_smooth(rng));
    const auto res = ope::check_contraction_sup(mdp, mdp.target, dqs);
    REQUIRE(res.cases.size() == 100);
    CHECK(res.violations == 0);
    CHECK(res.worst_margin >= -1e-6);

    // constant difference: the middle inequality is an equality
    QFun qc = [](const Vector&, const Vector&) { return 1.7; };
    const auto cst = ope::check_contraction_sup(mdp, mdp.target, {qc});
    REQUIRE(cst.cases.size() == 1);
    CHECK(std::abs(cst.cases[0].margin_2) <= 1e-8);
    CHECK(cst.cases[0].margin_1 > 0.1);
    CHECK(cst.violations == 0);
}

TEST_CASE("sup chain degenerates to equalities at zero discount") {
    Bench b = make_bench(0.0);
    const auto& mdp = b.designed.mdp;
    ope::SeededStream rng(5, 5);
    std::vector<QFun> dqs;
    for (int i = 0; i < 5; ++i) dqs.push_back(random_smooth(rng));
    const auto res = ope::check_contraction_sup(mdp, mdp.target, dqs);
    for (const auto& c : res.cases) {
        CHECK(std::abs(c.margin_1) <= 1e-12);
        CHECK(std::abs(c.margin_2) <= 1e-12);
        CHECK(std::abs(c.margin_3) <= 1e-12);
        CHECK(c.dq_sup == c.h_sup);
        CHECK(c.dq_sup == c.th_sup);
    }
    CHECK(res.violations == 0);
}

TEST_CASE("sup chain covers point-mass targets") {
    Bench b = make_pm_bench();
    const auto& mdp = b.designed.mdp;

    ope::SeededStream rng(42, 1);
    std::vector<QFun> dqs;
    for (int i = 0; i < 20; ++i) dqs.push_back(random_smooth(rng));
    // ridge peaked exactly on the target's action line, so the sup lives at
    // points the fixed action grid misses
    dqs.push_back([](const Vector& s, const Vector& a) {
        const double d = a(0) - (0.25 + 0.5 * s(0));
        return std::exp(-d * d / 0.002);
    });
    const auto res = ope::check_contraction_sup(mdp, mdp.target, dqs);
    CHECK(res.violations == 0);
    CHECK(res.worst_margin >= -1e-6);

    const auto& ridge = res.cases.back();
    CHECK(ridge.dq_sup == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("floor bound check reads the report correctly") {
    ope::IllPosednessReport rep;
    rep.e_j = 0.5;
    rep.omega_j = 1.0;
    rep.p_min = 0.2;
    rep.p_max = 2.0;
    rep.gamma = 0.5;
    auto chk = ope::check_ej_bound(rep);
    CHECK(chk.bound_chain == doctest::Approx(0.1 * 0.25).epsilon(1e-12));
    CHECK(chk.bound_statement == doctest::Approx(0.02 * 0.25).epsilon(1e-12));
    CHECK(chk.margin_chain == doctest::Approx(0.5 - 0.025).epsilon(1e-12));
    CHECK(chk.pass);
    CHECK(chk.margin_statement >= chk.margin_chain);

    rep.e_j = 1e-4;
    rep.p_min = 1.8;
    rep.gamma = 0.0;
    chk = ope::check_ej_bound(rep);
    CHECK_FALSE(chk.pass);

    rep.p_max = 0.0;
    CHECK_THROWS_AS(ope::check_ej_bound(rep), ope::input_error);
}

TEST_CASE("projection recovers span members and decays off span") {
    const auto rule = ope::tensor_gauss_rule({{0.0, 1.0}, {0.0, 1.0}}, 24);

    const auto spec = cos_spec(3);
    Vector c(9);
    c << 1.0, -0.5, 0.25, 0.0, 2.0, -1.0, 0.5, 0.1, -0.3;
    auto f_span = [&](const Vector& x) {
        Matrix pt(1, 2);
        pt << x(0), x(1);
        return (ope::eval_basis(spec, pt) * c)(0);
    };
    const auto rec = ope::project_onto_sieve(f_span, spec, rule.nodes, rule.weights);
    CHECK((rec.coef - c).cwiseAbs().maxCoeff() <= 1e-10);
    CHECK(rec.residual_l2 <= 1e-10);
    CHECK_FALSE(rec.rank_warning);

    auto f_off = [](const Vector& x) { return std::sin(3.0 * M_PI * x(0)); };
    const auto r3 = ope::project_onto_sieve(f_off, cos_spec(3), rule.nodes, rule.weights);
    const auto r6 = ope::project_onto_sieve(f_off, cos_spec(6), rule.nodes, rule.weights);
    CHECK(r3.residual_l2 > 0.0);
    CHECK(r6.residual_l2 < r3.residual_l2);
    CHECK(r6.residual_l2 < 0.6 * r3.residual_l2);

    Matrix few = rule.nodes.topRows(5);
    Vector few_w = rule.weights.head(5);
    CHECK_THROWS_AS(ope::project_onto_sieve(f_off, spec, few, few_w), ope::input_error);

    Vector bad_w = rule.weights;
    bad_w(0) = -1.0;
    CHECK_THROWS_AS(ope::project_onto_sieve(f_off, spec, rule.nodes, bad_w), ope::input_error);
    CHECK_THROWS_AS(
        ope::project_onto_sieve(f_off, spec, rule.nodes, Vector::Zero(rule.nodes.rows())),
        ope::input_error);
    CHECK_THROWS_AS(ope::project_onto_sieve(f_off, spec, rule.nodes.topRows(3), rule.weights),
                    ope::input_error);

    auto f_nan = [](const Vector&) { return std::nan(""); };
    CHECK_THROWS_AS(ope::project_onto_sieve(f_nan, spec, rule.nodes, rule.weights),
                    ope::input_error);

    Matrix rep_pts = rule.nodes.row(0).replicate(12, 1);
    Vector rep_w = Vector::Ones(12);
    auto degenerate = ope::project_onto_sieve(f_off, spec, rep_pts, rep_w);
    CHECK(degenerate.rank_warning);
    CHECK(degenerate.coef.allFinite());
}
