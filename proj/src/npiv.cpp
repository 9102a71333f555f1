#include "ope/npiv.hpp"

#include <Eigen/Eigenvalues>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace ope {

namespace {

Matrix hstack_sa(const Matrix& s, const Matrix& a) {
    Matrix sa(s.rows(), s.cols() + a.cols());
    sa << s, a;
    return sa;
}

// shared by fit_2sls and the bootstrap: solve from the moment matrices
// gb = B'B/n, bg = B'Gamma/n, br = B'R/n
struct StatsSolve {
    Vector coef;
    FitDiagnostics diag;
};

StatsSolve solve_from_stats(const Matrix& gb, const Matrix& bg, const Vector& br, double rtol,
                            Eigen::Index nt) {
    StatsSolve out;
    out.diag.rtol = rtol;

    const auto w = sym_inv_sqrt(gb, rtol);
    out.diag.rank_instruments = w.rank;
    const Matrix u = w.m * bg;
    const Vector v = w.m * br;

    Matrix m = u.transpose() * u;
    m = ((m + m.transpose()) * 0.5).eval();
    Eigen::SelfAdjointEigenSolver<Matrix> es(m);
    if (es.info() != Eigen::Success) throw input_error("fit: eigen decomposition failed");
    const Vector& lam = es.eigenvalues(); // ascending
    const Eigen::Index j = m.rows();
    const double lmax = std::max(lam(j - 1), 0.0);
    const double cut = rtol * lmax;
    Vector inv = Vector::Zero(j);
    Eigen::Index rank = 0;
    double lmin_kept = lmax;
    for (Eigen::Index i = 0; i < j; ++i) {
        if (lam(i) > cut && lam(i) > 0.0) {
            inv(i) = 1.0 / lam(i);
            lmin_kept = std::min(lmin_kept, lam(i));
            ++rank;
        }
    }
    out.diag.rank_projected = rank;
    out.diag.cond_projected = rank > 0 ? lmax / lmin_kept : 0.0;
    out.diag.rank_deficient = w.rank < gb.rows() || rank < j;

    const Vector rhs = u.transpose() * v;
    out.coef = es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose() * rhs;
    out.diag.grad_norm =
        static_cast<double>(nt) * (u.transpose() * (v - u * out.coef)).cwiseAbs().maxCoeff();
    if (!out.coef.allFinite()) throw input_error("fit: non-finite coefficients");
    return out;
}

} // namespace

AssembledSystem assemble(const Dataset& data, const BasisSpec& psi_spec, const BasisSpec& b_spec,
                         const PolicyDensity& target, double gamma,
                         const QuadratureRule& action_rule, double instrument_ratio_cap) {
    validate_basis_spec(psi_spec);
    validate_basis_spec(b_spec);
    if (!(gamma >= 0.0 && gamma < 1.0)) throw input_error("assemble: discount must lie in [0, 1)");
    if (data.rows() == 0) throw input_error("assemble: empty dataset");
    const int d = data.state_dims + data.action_dims;
    if (psi_spec.dims() != d || b_spec.dims() != d)
        throw input_error("assemble: basis dimension does not match the dataset");

    const Eigen::Index j = psi_spec.size();
    const Eigen::Index k = b_spec.size();
    if (k < j)
        throw config_error("assemble: K = " + std::to_string(k) +
                           " instruments but J = " + std::to_string(j) +
                           " coefficients; need K >= J");
    if (static_cast<double>(k) > instrument_ratio_cap * static_cast<double>(j))
        throw config_error("assemble: K = " + std::to_string(k) + " exceeds " +
                           std::to_string(instrument_ratio_cap) + " * J");

    AssembledSystem sys;
    sys.psi_spec = psi_spec;
    sys.b_spec = b_spec;
    sys.gamma = gamma;
    sys.n_traj = data.n_traj;
    sys.horizon = data.horizon;
    const Matrix sa = hstack_sa(data.s, data.a);
    sys.psi = eval_basis(psi_spec, sa);
    sys.b = eval_basis(b_spec, sa);
    sys.g_pi = policy_basis(psi_spec, target, data.sp, action_rule);
    sys.gamma_pi = sys.psi - gamma * sys.g_pi;
    sys.r = data.r;
    return sys;
}

SieveFit fit_2sls(const AssembledSystem& sys, double rtol) {
    if (rtol <= 0.0 || rtol >= 1.0) throw input_error("fit: rtol must lie in (0, 1)");
    const Eigen::Index nt = sys.rows();
    const Eigen::Index j = sys.n_coef();
    const Eigen::Index k = sys.n_instruments();
    if (nt < k) throw input_error("fit: need at least K rows, have " + std::to_string(nt));
    if (!sys.psi.allFinite() || !sys.b.allFinite() || !sys.g_pi.allFinite() || !sys.r.allFinite())
        throw input_error("fit: non-finite design matrices");
    if (k < j) throw config_error("fit: fewer instruments than coefficients");

    const double scale = 1.0 + sys.psi.cwiseAbs().maxCoeff();
    if ((sys.gamma_pi - (sys.psi - sys.gamma * sys.g_pi)).cwiseAbs().maxCoeff() > 1e-14 * scale)
        throw input_error("fit: gamma_pi is inconsistent with psi - gamma * g_pi");

    Matrix gb = sys.b.transpose() * sys.b / static_cast<double>(nt);
    gb = ((gb + gb.transpose()) * 0.5).eval();
    const Matrix bg = sys.b.transpose() * sys.gamma_pi / static_cast<double>(nt);
    const Vector br = sys.b.transpose() * sys.r / static_cast<double>(nt);

    auto solved = solve_from_stats(gb, bg, br, rtol, nt);
    SieveFit fit;
    fit.psi_spec = sys.psi_spec;
    fit.gamma = sys.gamma;
    fit.coef = std::move(solved.coef);
    fit.diag = solved.diag;
    return fit;
}

Vector predict_q(const SieveFit& fit, const Matrix& sa_points) {
    if (fit.coef.size() != fit.psi_spec.size())
        throw input_error("predict: coefficient length does not match the basis");
    return eval_basis(fit.psi_spec, sa_points) * fit.coef;
}

double predict_q(const SieveFit& fit, const Vector& s, const Vector& a) {
    Matrix pt(1, s.size() + a.size());
    pt << s.transpose(), a.transpose();
    return predict_q(fit, pt)(0);
}

Vector predict_q_deriv(const SieveFit& fit, const Matrix& sa_points, const MultiIndex& alpha) {
    if (fit.coef.size() != fit.psi_spec.size())
        throw input_error("predict: coefficient length does not match the basis");
    return eval_basis_deriv(fit.psi_spec, sa_points, alpha) * fit.coef;
}

double predict_q_deriv(const SieveFit& fit, const Vector& s, const Vector& a,
                       const MultiIndex& alpha) {
    Matrix pt(1, s.size() + a.size());
    pt << s.transpose(), a.transpose();
    return predict_q_deriv(fit, pt, alpha)(0);
}

namespace {

nlohmann::json spec_to_json(const BasisSpec& spec) {
    nlohmann::json j;
    j["family"] = family_name(spec.family);
    j["degree"] = spec.degree;
    j["per_dim"] = spec.per_dim;
    nlohmann::json dom = nlohmann::json::array();
    for (const auto& iv : spec.domain) dom.push_back({iv.lo, iv.hi});
    j["domain"] = dom;
    return j;
}

BasisSpec spec_from_json(const nlohmann::json& j) {
    BasisSpec spec;
    spec.family = family_from_name(j.at("family").get<std::string>());
    spec.degree = j.at("degree").get<int>();
    spec.per_dim = j.at("per_dim").get<std::vector<int>>();
    for (const auto& iv : j.at("domain"))
        spec.domain.push_back({iv.at(0).get<double>(), iv.at(1).get<double>()});
    validate_basis_spec(spec);
    return spec;
}

} // namespace

std::string fit_to_json(const SieveFit& fit) {
    nlohmann::json j;
    j["schema_version"] = 1;
    j["gamma"] = fit.gamma;
    j["psi_spec"] = spec_to_json(fit.psi_spec);
    j["coef"] = std::vector<double>(fit.coef.data(), fit.coef.data() + fit.coef.size());
    j["diagnostics"] = {{"rank_instruments", fit.diag.rank_instruments},
                        {"rank_projected", fit.diag.rank_projected},
                        {"cond_projected", fit.diag.cond_projected},
                        {"rank_deficient", fit.diag.rank_deficient},
                        {"grad_norm", fit.diag.grad_norm},
                        {"rtol", fit.diag.rtol}};
    return j.dump(2);
}

SieveFit fit_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const std::exception& e) {
        throw input_error(std::string("fit json: parse failure: ") + e.what());
    }
    try {
        SieveFit fit;
        fit.gamma = j.at("gamma").get<double>();
        fit.psi_spec = spec_from_json(j.at("psi_spec"));
        const auto coef = j.at("coef").get<std::vector<double>>();
        fit.coef = Eigen::Map<const Vector>(coef.data(), static_cast<Eigen::Index>(coef.size()));
        const auto& d = j.at("diagnostics");
        fit.diag.rank_instruments = d.at("rank_instruments").get<Eigen::Index>();
        fit.diag.rank_projected = d.at("rank_projected").get<Eigen::Index>();
        fit.diag.cond_projected = d.at("cond_projected").get<double>();
        fit.diag.rank_deficient = d.at("rank_deficient").get<bool>();
        fit.diag.grad_norm = d.at("grad_norm").get<double>();
        fit.diag.rtol = d.at("rtol").get<double>();
        if (fit.coef.size() != fit.psi_spec.size())
            throw input_error("fit json: coefficient length does not match the basis");
        if (!fit.coef.allFinite()) throw input_error("fit json: non-finite coefficients");
        return fit;
    } catch (const input_error&) {
        throw;
    } catch (const std::exception& e) {
        throw input_error(std::string("fit json: missing or mistyped field: ") + e.what());
    }
}

void write_fit_json(const SieveFit& fit, const std::string& path) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp);
        if (!f) throw input_error("cannot open " + tmp + " for writing");
        f << fit_to_json(fit) << "\n";
        if (!f.good()) throw input_error("write failure on " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        std::remove(tmp.c_str());
        throw input_error("could not move temporary file onto " + path);
    }
}

SieveFit read_fit_json(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw input_error("cannot open " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return fit_from_json(ss.str());
}

BellmanResidual bellman_residual_norms(const SieveFit& fit, const MdpSpec& mdp,
                                       const PolicyDensity& target, const Matrix& sa_points,
                                       const Vector& weights, const QuadratureRule& state_rule,
                                       int action_nodes) {
    const int ds = mdp.state_dims();
    if (sa_points.cols() != ds + mdp.action_dims())
        throw input_error("bellman residual: point dimension mismatch");
    if (weights.size() != sa_points.rows())
        throw input_error("bellman residual: weights length mismatch");
    if (weights.minCoeff() < 0.0) throw input_error("bellman residual: negative weights");
    const double wsum = weights.sum();
    if (!(wsum > 0.0)) throw input_error("bellman residual: weights sum to zero");

    // policy-averaged fitted Q at the next-state quadrature nodes, once
    const Eigen::Index ks = state_rule.size();
    const Matrix pi_psi = policy_basis(fit.psi_spec, target, state_rule.nodes,
                                       tensor_gauss_rule(mdp.action_box, action_nodes));
    const Vector pi_q = pi_psi * fit.coef;

    const Vector qhat = predict_q(fit, sa_points);
    double sup = 0.0, acc = 0.0;
    for (Eigen::Index i = 0; i < sa_points.rows(); ++i) {
        const Vector s = sa_points.row(i).head(ds);
        const Vector a = sa_points.row(i).tail(sa_points.cols() - ds);
        double rbar = 0.0, tpq = 0.0;
        for (Eigen::Index k = 0; k < ks; ++k) {
            const Vector sp = state_rule.nodes.row(k);
            const double w = state_rule.weights(k) * mdp.transition.density(s, a, sp);
            if (w == 0.0) continue;
            rbar += w * mdp.reward_fn(s, a, sp);
            tpq += w * pi_q(k);
        }
        const double rho = rbar + fit.gamma * tpq - qhat(i);
        sup = std::max(sup, std::abs(rho));
        acc += weights(i) * rho * rho;
    }
    return {sup, std::sqrt(acc / wsum)};
}

double plugin_value(const SieveFit& fit, const PolicyDensity& target, const InitialDist& init,
                    const QuadratureRule& state_rule, const QuadratureRule& action_rule) {
    auto value_at_state = [&](const Vector& s) {
        if (target.point_mass()) return predict_q(fit, s, target.point_location(s));
        double acc = 0.0;
        for (Eigen::Index l = 0; l < action_rule.size(); ++l) {
            const Vector a = action_rule.nodes.row(l);
            const double p = target.density(s, a);
            if (p < 0.0) throw input_error("plugin value: negative policy density");
            if (p != 0.0) acc += action_rule.weights(l) * p * predict_q(fit, s, a);
        }
        return acc;
    };
    if (init.point) return value_at_state(init.location);
    if (!init.density) throw input_error("plugin value: initial distribution missing a density");
    double acc = 0.0;
    for (Eigen::Index i = 0; i < state_rule.size(); ++i) {
        const Vector s = state_rule.nodes.row(i);
        const double p = init.density(s);
        if (p < 0.0) throw input_error("plugin value: negative initial density");
        if (p != 0.0) acc += state_rule.weights(i) * p * value_at_state(s);
    }
    return acc;
}

BootstrapValue bootstrap_value(const AssembledSystem& sys, const PolicyDensity& target,
                               const InitialDist& init, const QuadratureRule& state_rule,
                               const QuadratureRule& action_rule, int n_boot,
                               std::uint64_t seed, double rtol) {
    if (n_boot < 2) throw input_error("bootstrap: need at least 2 replicates");
    const Eigen::Index n = sys.n_traj, t = sys.horizon;
    if (n < 2) throw input_error("bootstrap: need at least 2 trajectories");
    if (n * t != sys.rows()) throw input_error("bootstrap: rows do not form an N x T panel");
    const Eigen::Index j = sys.n_coef(), k = sys.n_instruments();

    // value functional weights m: v = m' c for any coefficient vector
    Vector m(j);
    {
        auto state_features = [&](const Vector& s) -> Vector {
            if (target.point_mass()) {
                Matrix pt(1, s.size() + target.point_location(s).size());
                pt << s.transpose(), target.point_location(s).transpose();
                return eval_basis(sys.psi_spec, pt).row(0);
            }
            Matrix pi_psi =
                policy_basis(sys.psi_spec, target, s.transpose(), action_rule);
            return pi_psi.row(0);
        };
        if (init.point) {
            m = state_features(init.location);
        } else {
            if (!init.density) throw input_error("bootstrap: initial distribution missing a density");
            m.setZero();
            for (Eigen::Index i = 0; i < state_rule.size(); ++i) {
                const Vector s = state_rule.nodes.row(i);
                const double p = init.density(s);
                if (p != 0.0) m += state_rule.weights(i) * p * state_features(s);
            }
        }
    }

    // per-trajectory sufficient statistics
    std::vector<Matrix> s_bb(static_cast<size_t>(n));
    std::vector<Matrix> s_bg(static_cast<size_t>(n));
    std::vector<Vector> s_br(static_cast<size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto bi = sys.b.middleRows(i * t, t);
        s_bb[static_cast<size_t>(i)] = bi.transpose() * bi;
        s_bg[static_cast<size_t>(i)] = bi.transpose() * sys.gamma_pi.middleRows(i * t, t);
        s_br[static_cast<size_t>(i)] = bi.transpose() * sys.r.segment(i * t, t);
    }

    const double nt = static_cast<double>(n * t);
    Matrix gb = Matrix::Zero(k, k), bg = Matrix::Zero(k, j);
    Vector br = Vector::Zero(k);
    for (Eigen::Index i = 0; i < n; ++i) {
        gb += s_bb[static_cast<size_t>(i)];
        bg += s_bg[static_cast<size_t>(i)];
        br += s_br[static_cast<size_t>(i)];
    }
    gb /= nt;
    gb = ((gb + gb.transpose()) * 0.5).eval();
    bg /= nt;
    br /= nt;

    BootstrapValue out;
    out.value = m.dot(solve_from_stats(gb, bg, br, rtol, n * t).coef);
    out.replicates.resize(n_boot);

    SeededStream rng(seed, 0x626f6f74); // fixed stream id for the resampler
    Matrix gb_b(k, k), bg_b(k, j);
    Vector br_b(k);
    for (int rep = 0; rep < n_boot; ++rep) {
        gb_b.setZero();
        bg_b.setZero();
        br_b.setZero();
        for (Eigen::Index draw = 0; draw < n; ++draw) {
            const auto idx = static_cast<size_t>(std::min<Eigen::Index>(
                n - 1, static_cast<Eigen::Index>(rng.uniform01() * static_cast<double>(n))));
            gb_b += s_bb[idx];
            bg_b += s_bg[idx];
            br_b += s_br[idx];
        }
        gb_b /= nt;
        gb_b = ((gb_b + gb_b.transpose()) * 0.5).eval();
        out.replicates(rep) = m.dot(solve_from_stats(gb_b, bg_b / nt, br_b / nt, rtol, n * t).coef);
    }
    const double mean = out.replicates.mean();
    out.se = std::sqrt((out.replicates.array() - mean).square().sum() /
                       static_cast<double>(n_boot - 1));
    return out;
}

JChoice choose_J(double nt, double smoothness, int dims, const std::string& norm,
                 double multiplier) {
    if (nt < 2.0) throw input_error("choose_J: need NT >= 2");
    if (smoothness <= 0.0) throw input_error("choose_J: smoothness must be positive");
    if (dims < 1) throw input_error("choose_J: dims must be positive");
    if (multiplier <= 0.0) throw input_error("choose_J: multiplier must be positive");
    double base = 0.0;
    if (norm == "l2") {
        base = nt;
    } else if (norm == "sup") {
        if (2.0 * smoothness <= static_cast<double>(dims))
            throw capability_error("choose_J: sup-norm rule needs 2p > d");
        base = nt / std::log(nt);
    } else {
        throw input_error("choose_J: norm must be 'sup' or 'l2'");
    }
    JChoice out;
    out.j_raw = multiplier * std::pow(base, dims / (2.0 * smoothness + dims));
    int m = static_cast<int>(std::ceil(std::pow(out.j_raw, 1.0 / dims) - 1e-9));
    m = std::max(m, 1);
    if (m > 96) throw capability_error("choose_J: per-dimension count exceeds the basis cap");
    out.per_dim = m;
    out.j = 1;
    for (int i = 0; i < dims; ++i) out.j *= m;
    return out;
}

std::vector<MultiplierScore> select_j_multiplier(
    const Dataset& data, BasisFamily family, int degree, const Box& sa_domain,
    const PolicyDensity& target, double gamma, const QuadratureRule& action_rule,
    double smoothness, const std::string& norm, const std::vector<double>& multipliers,
    double holdout_fraction, double rtol) {
    if (multipliers.empty()) throw input_error("multiplier selection: empty candidate list");
    if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0))
        throw input_error("multiplier selection: holdout fraction must lie in (0, 1)");
    if (data.n_traj < 2) throw input_error("multiplier selection: need at least 2 trajectories");

    const Eigen::Index n_hold =
        std::max<Eigen::Index>(1, static_cast<Eigen::Index>(std::floor(
                                      static_cast<double>(data.n_traj) * holdout_fraction)));
    const Eigen::Index n_train = data.n_traj - n_hold;
    const Eigen::Index t = data.horizon;
    const int d = data.state_dims + data.action_dims;
    if (static_cast<int>(sa_domain.size()) != d)
        throw input_error("multiplier selection: domain dimension mismatch");

    std::vector<MultiplierScore> out;
    for (double mult : multipliers) {
        const auto jc = choose_J(static_cast<double>(n_train * t), smoothness, d, norm, mult);
        int m = jc.per_dim;
        if (family == BasisFamily::BSpline) m = std::max(m, degree + 1);
        BasisSpec spec;
        spec.family = family;
        spec.degree = degree;
        spec.per_dim.assign(static_cast<size_t>(d), m);
        spec.domain = sa_domain;

        const auto sys = assemble(data, spec, spec, target, gamma, action_rule);
        AssembledSystem train = sys;
        train.n_traj = n_train;
        train.psi = sys.psi.topRows(n_train * t);
        train.g_pi = sys.g_pi.topRows(n_train * t);
        train.gamma_pi = sys.gamma_pi.topRows(n_train * t);
        train.b = sys.b.topRows(n_train * t);
        train.r = sys.r.head(n_train * t);
        const auto fit = fit_2sls(train, rtol);

        const Eigen::Index nv = n_hold * t;
        const Matrix bv = sys.b.bottomRows(nv);
        const Vector resid = sys.r.tail(nv) - sys.gamma_pi.bottomRows(nv) * fit.coef;
        const Vector g = bv.transpose() * resid / static_cast<double>(nv);
        Matrix gbv = bv.transpose() * bv / static_cast<double>(nv);
        gbv = ((gbv + gbv.transpose()) * 0.5).eval();
        const double crit = g.dot(pinv_truncated(gbv, rtol) * g);
        out.push_back({mult, spec.size() > 0 ? static_cast<int>(spec.size()) : 0, crit});
    }
    return out;
}

} // namespace ope
