#include "ope/diagnostics.hpp"

#include "ope/basis.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

namespace ope {

namespace {

constexpr double kRtol = 1e-10;

int default_sup_grid(int dims) {
    if (dims <= 2) return 201;
    if (dims <= 4) return 51;
    return 21;
}

// Inclusive uniform tensor grid, last dimension fastest, materialized in
// chunks so high-dimensional scans stay within memory.
struct UniformGrid {
    std::vector<std::vector<double>> axes;
    Eigen::Index total = 1;

    int dims() const { return static_cast<int>(axes.size()); }

    void fill_rows(Eigen::Index start, Eigen::Index count, Matrix& out) const {
        const int d = dims();
        out.resize(count, d);
        for (Eigen::Index r = 0; r < count; ++r) {
            Eigen::Index rem = start + r;
            for (int dim = d - 1; dim >= 0; --dim) {
                const Eigen::Index m = static_cast<Eigen::Index>(axes[dim].size());
                out(r, dim) = axes[dim][rem % m];
                rem /= m;
            }
        }
    }
};

UniformGrid uniform_grid(const Box& box, int per_dim) {
    if (per_dim < 2) throw input_error("uniform_grid: need at least 2 points per dimension");
    UniformGrid g;
    g.axes.resize(box.size());
    for (std::size_t d = 0; d < box.size(); ++d) {
        auto& ax = g.axes[d];
        ax.resize(per_dim);
        const double lo = box[d].lo, hi = box[d].hi;
        for (int i = 0; i < per_dim; ++i)
            ax[i] = lo + (hi - lo) * static_cast<double>(i) / (per_dim - 1);
        ax.front() = lo;
        ax.back() = hi;
        g.total *= per_dim;
    }
    return g;
}

Matrix symmetrized(const Matrix& a) { return 0.5 * (a + a.transpose()); }

void atomic_write(const std::string& path, const std::string& text) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw input_error("cannot open for writing: " + tmp);
        out << text;
        if (!out.good()) throw input_error("write failed: " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        std::remove(tmp.c_str());
        throw input_error("rename failed for: " + path);
    }
}

// The four spectral statistics from a set of moment matrices. Shared by the
// full-sample estimate and the jackknife replicates.
struct SpectralStats {
    double e_j = 0.0;
    double omega_j = 0.0;
    double s_jk = 0.0;
    double tau_j = 0.0;
    bool singular = false;
};

SpectralStats spectral_stats(const Matrix& g_psi, const Matrix& g_b, const Matrix& m_t,
                             const Matrix& g_kappa, const Matrix& cross) {
    SpectralStats st;
    const Eigen::Index j = g_psi.rows();
    const Eigen::Index k = g_b.rows();
    st.e_j = std::max(0.0, sym_eig_extremes(g_kappa).min);
    st.omega_j = std::max(0.0, sym_eig_extremes(g_psi).min);

    const InvSqrtResult wb = sym_inv_sqrt(g_b, kRtol);
    const InvSqrtResult wk = sym_inv_sqrt(g_kappa, kRtol);
    const InvSqrtResult wm = sym_inv_sqrt(m_t, kRtol);
    st.singular = wb.rank < k || wk.rank < j || wm.rank < j;

    st.s_jk = min_singular(wb.m * cross * wk.m);
    const Matrix pencil = symmetrized(wm.m * g_kappa * wm.m);
    st.tau_j = std::sqrt(std::max(0.0, sym_eig_extremes(pencil).max));
    return st;
}

} // namespace

IllPosednessReport compute_report(const MdpSpec& mdp, const PolicyDensity& target,
                                  const BasisSpec& psi_spec, const BasisSpec& b_spec,
                                  int mc_points, std::uint64_t seed, int state_nodes,
                                  int action_nodes, int sup_grid, int cov_grid) {
    validate_basis_spec(psi_spec);
    validate_basis_spec(b_spec);
    const int ds = mdp.state_dims();
    const int da = mdp.action_dims();
    if (psi_spec.dims() != ds + da || b_spec.dims() != ds + da)
        throw input_error("compute_report: basis dimensions must match state + action dims");
    const double g = mdp.gamma;
    if (!(g >= 0.0 && g < 1.0)) throw input_error("compute_report: gamma must lie in [0,1)");
    const Eigen::Index j = psi_spec.size();
    const Eigen::Index k = b_spec.size();
    const Eigen::Index need = 10 * std::max(j, k);
    if (mc_points < need)
        throw input_error("compute_report: mc_points must be at least 10*max(J,K)");
    if (state_nodes < 2 || action_nodes < 1)
        throw input_error("compute_report: need state_nodes >= 2 and action_nodes >= 1");

    const StationaryDensity stat = estimate_stationary(mdp, mdp.behavior, state_nodes, action_nodes);
    const CoverageBounds cov = coverage_bounds(mdp, target, stat, cov_grid);

    // One batch of the behavior chain, trajectory count chosen so ten
    // jackknife blocks stay trajectory-aligned.
    const Eigen::Index n = mc_points;
    const Eigen::Index horizon = std::max<Eigen::Index>(1, std::min<Eigen::Index>(200, n / 10));
    const Eigen::Index n_traj = (n + horizon - 1) / horizon;
    const Dataset data = sample_trajectories(mdp, mdp.behavior, n_traj, horizon, 200, seed);

    Matrix sa(n, ds + da);
    sa.leftCols(ds) = data.s.topRows(n);
    sa.rightCols(da) = data.a.topRows(n);
    const Matrix psi = eval_basis(psi_spec, sa);
    const Matrix b = eval_basis(b_spec, sa);

    const QuadratureRule arule = tensor_gauss_rule(mdp.action_box, action_nodes);
    const QuadratureRule srule = tensor_gauss_rule(mdp.state_box, state_nodes);
    const Matrix psi_pi_next = policy_basis(psi_spec, target, data.sp.topRows(n), arule);
    const Matrix psi_pi_sigma = policy_basis(psi_spec, target, srule.nodes, arule);

    // Conditional mean of the h features given (s,a): quadrature over the
    // next state against the transition density.
    Matrix dmat(n, srule.size());
    for (Eigen::Index i = 0; i < n; ++i) {
        const Vector si = data.s.row(i).transpose();
        const Vector ai = data.a.row(i).transpose();
        for (Eigen::Index q = 0; q < srule.size(); ++q)
            dmat(i, q) =
                srule.weights(q) * mdp.transition.density(si, ai, srule.nodes.row(q).transpose());
    }
    const Matrix kbar = psi - g * (dmat * psi_pi_sigma);
    const Matrix kdiff = g * (dmat * psi_pi_sigma - psi_pi_next); // kappa - kbar

    // Trajectory-aligned blocks for the jackknife.
    constexpr int kBlocks = 10;
    std::vector<Matrix> bm(kBlocks), bv(kBlocks), bpsi(kBlocks), bb(kBlocks), bs(kBlocks);
    std::vector<Eigen::Index> cnt(kBlocks, 0);
    for (int blk = 0; blk < kBlocks; ++blk) {
        const Eigen::Index t_lo = blk * n_traj / kBlocks;
        const Eigen::Index t_hi = (blk + 1) * n_traj / kBlocks;
        const Eigen::Index lo = std::min(n, t_lo * horizon);
        const Eigen::Index hi = std::min(n, t_hi * horizon);
        const Eigen::Index c = hi - lo;
        cnt[blk] = c;
        const auto kb = kbar.middleRows(lo, c);
        const auto kd = kdiff.middleRows(lo, c);
        const auto ps = psi.middleRows(lo, c);
        const auto bi = b.middleRows(lo, c);
        bm[blk] = kb.transpose() * kb;
        bv[blk] = kd.transpose() * kd;
        bpsi[blk] = ps.transpose() * ps;
        bb[blk] = bi.transpose() * bi;
        bs[blk] = bi.transpose() * kb;
    }

    Matrix sum_m = Matrix::Zero(j, j), sum_v = Matrix::Zero(j, j), sum_psi = Matrix::Zero(j, j);
    Matrix sum_b = Matrix::Zero(k, k), sum_s = Matrix::Zero(k, j);
    for (int blk = 0; blk < kBlocks; ++blk) {
        sum_m += bm[blk];
        sum_v += bv[blk];
        sum_psi += bpsi[blk];
        sum_b += bb[blk];
        sum_s += bs[blk];
    }

    const double dn = static_cast<double>(n);
    // Law-of-total-variance split: the h-feature Gram is the mean Gram plus
    // the residual Gram, so it dominates the mean Gram by construction and
    // the attenuation estimate cannot dip below one.
    const Matrix m_t = symmetrized(sum_m / dn);
    const Matrix g_kappa = symmetrized((sum_m + sum_v) / dn);
    const Matrix g_psi = symmetrized(sum_psi / dn);
    const Matrix g_b = symmetrized(sum_b / dn);
    const Matrix cross = sum_s / dn;

    const SpectralStats full = spectral_stats(g_psi, g_b, m_t, g_kappa, cross);

    // Delete-one-block jackknife.
    std::vector<SpectralStats> reps;
    reps.reserve(kBlocks);
    for (int blk = 0; blk < kBlocks; ++blk) {
        if (cnt[blk] == 0 || cnt[blk] == n) continue;
        const double dm = static_cast<double>(n - cnt[blk]);
        const Matrix m_g = symmetrized((sum_m - bm[blk]) / dm);
        const Matrix k_g = symmetrized((sum_m + sum_v - bm[blk] - bv[blk]) / dm);
        const Matrix p_g = symmetrized((sum_psi - bpsi[blk]) / dm);
        const Matrix b_g = symmetrized((sum_b - bb[blk]) / dm);
        const Matrix s_g = (sum_s - bs[blk]) / dm;
        reps.push_back(spectral_stats(p_g, b_g, m_g, k_g, s_g));
    }
    auto jack_se = [&](auto pick) {
        const std::size_t m = reps.size();
        if (m < 2) return 0.0;
        double mean = 0.0;
        for (const auto& r : reps) mean += pick(r);
        mean /= static_cast<double>(m);
        double ss = 0.0;
        for (const auto& r : reps) {
            const double d = pick(r) - mean;
            ss += d * d;
        }
        return std::sqrt(ss * (static_cast<double>(m) - 1.0) / static_cast<double>(m));
    };

    IllPosednessReport rep;
    rep.j = j;
    rep.k = k;
    rep.gamma = g;
    rep.e_j = full.e_j;
    rep.omega_j = full.omega_j;
    rep.s_jk = full.s_jk;
    rep.tau_j = full.tau_j;
    rep.se_e_j = jack_se([](const SpectralStats& r) { return r.e_j; });
    rep.se_omega_j = jack_se([](const SpectralStats& r) { return r.omega_j; });
    rep.se_s_jk = jack_se([](const SpectralStats& r) { return r.s_jk; });
    rep.se_tau_j = jack_se([](const SpectralStats& r) { return r.tau_j; });
    rep.singular_flag = full.singular;
    rep.mc_points = mc_points;
    rep.seed = seed;

    rep.p_min = cov.p_min;
    rep.p_max = cov.p_max;
    if (rep.p_min > 0.0 && g < 1.0) {
        rep.tau_bound = std::sqrt(rep.p_max * (1.0 + rep.p_max * g * g / rep.p_min)) /
                        (std::sqrt(rep.p_min) * (1.0 - g));
    } else {
        rep.tau_bound = std::numeric_limits<double>::infinity();
    }

    // Grid suprema of the feature norms. Deterministic scans; reported values
    // are lower bounds for the true suprema.
    Box sa_box = mdp.state_box;
    sa_box.insert(sa_box.end(), mdp.action_box.begin(), mdp.action_box.end());
    const int gpts = sup_grid > 0 ? sup_grid : default_sup_grid(ds + da);
    rep.sup_grid = gpts;
    const UniformGrid grid_sa = uniform_grid(sa_box, gpts);

    int sp_pts = gpts;
    {
        auto s_total = [&](int p) {
            double t = 1.0;
            for (int dd = 0; dd < ds; ++dd) t *= p;
            return t;
        };
        while (sp_pts > 3 &&
               static_cast<double>(grid_sa.total) * s_total(sp_pts) > 5e7)
            sp_pts = (sp_pts + 1) / 2;
    }
    const UniformGrid grid_s = uniform_grid(mdp.state_box, sp_pts);
    Matrix s_rows(grid_s.total, ds);
    grid_s.fill_rows(0, grid_s.total, s_rows);
    const Matrix y = policy_basis(psi_spec, target, s_rows, arule); // psi averaged under target
    const Vector y_sq = y.rowwise().squaredNorm();

    double zeta_b_sq = 0.0, xi_psi_sq = 0.0, zeta_kappa_sq = 0.0;
    const Eigen::Index chunk = 8192;
    Matrix pts;
    for (Eigen::Index start = 0; start < grid_sa.total; start += chunk) {
        const Eigen::Index c = std::min(chunk, grid_sa.total - start);
        grid_sa.fill_rows(start, c, pts);
        const Matrix px = eval_basis(psi_spec, pts);
        const Matrix bx = eval_basis(b_spec, pts);
        const Vector px_sq = px.rowwise().squaredNorm();
        xi_psi_sq = std::max(xi_psi_sq, px_sq.maxCoeff());
        zeta_b_sq = std::max(zeta_b_sq, bx.rowwise().squaredNorm().maxCoeff());
        // |psi(s,a) - g * y(s')|^2 maximized over the pair grid.
        const Matrix inner = px * y.transpose(); // c x n_s
        for (Eigen::Index r = 0; r < c; ++r) {
            for (Eigen::Index q = 0; q < grid_s.total; ++q) {
                const double val = px_sq(r) + g * g * y_sq(q) - 2.0 * g * inner(r, q);
                if (val > zeta_kappa_sq) zeta_kappa_sq = val;
            }
        }
    }
    rep.zeta_b = std::sqrt(std::max(0.0, zeta_b_sq));
    rep.xi_psi = std::sqrt(std::max(0.0, xi_psi_sq));
    rep.zeta_kappa = std::sqrt(std::max(0.0, zeta_kappa_sq));

    // Sup over random unit coefficient directions of the instrument-space
    // projection residual of T h.
    {
        const InvSqrtResult wb = sym_inv_sqrt(g_b, kRtol);
        const Matrix p = wb.m * cross; // K x J
        const Matrix defect = symmetrized(m_t - p.transpose() * p);
        SeededStream rng(seed, 0x70726f6aULL);
        double worst = 0.0;
        for (int draw = 0; draw < 20; ++draw) {
            Vector c(j);
            for (Eigen::Index idx = 0; idx < j; ++idx) c(idx) = rng.normal();
            const double nrm = c.norm();
            if (nrm <= 0.0) continue;
            c /= nrm;
            worst = std::max(worst, c.dot(defect * c));
        }
        rep.proj_residual = std::sqrt(std::max(0.0, worst));
    }

    return rep;
}

std::string report_to_json(const IllPosednessReport& rep) {
    nlohmann::json out;
    out["schema_version"] = 1;
    out["j"] = rep.j;
    out["k"] = rep.k;
    out["gamma"] = rep.gamma;
    out["e_j"] = rep.e_j;
    out["omega_j"] = rep.omega_j;
    out["s_jk"] = rep.s_jk;
    out["tau_j"] = rep.tau_j;
    out["se_e_j"] = rep.se_e_j;
    out["se_omega_j"] = rep.se_omega_j;
    out["se_s_jk"] = rep.se_s_jk;
    out["se_tau_j"] = rep.se_tau_j;
    out["zeta_b"] = rep.zeta_b;
    out["zeta_kappa"] = rep.zeta_kappa;
    out["xi_psi"] = rep.xi_psi;
    out["p_min"] = rep.p_min;
    out["p_max"] = rep.p_max;
    out["tau_bound"] = std::isfinite(rep.tau_bound) ? nlohmann::json(rep.tau_bound)
                                                    : nlohmann::json("inf");
    out["proj_residual"] = rep.proj_residual;
    out["singular_flag"] = rep.singular_flag;
    out["mc_points"] = rep.mc_points;
    out["sup_grid"] = rep.sup_grid;
    out["seed"] = rep.seed;
    return out.dump(2);
}

void write_report_json(const IllPosednessReport& rep, const std::string& path) {
    atomic_write(path, report_to_json(rep) + "\n");
}

WellPosednessResult check_wellposedness_l2(
    const MdpSpec& mdp, const PolicyDensity& target,
    const std::vector<std::function<double(const Vector&, const Vector&)>>& q_first,
    const std::vector<std::function<double(const Vector&, const Vector&)>>& q_second,
    const StationaryDensity& stat, const CoverageBounds& cov, int action_nodes, double slack) {
    if (q_first.size() != q_second.size())
        throw input_error("check_wellposedness_l2: the two function lists must have equal length");
    if (q_first.empty()) throw input_error("check_wellposedness_l2: empty function list");
    if (!(cov.p_min > 0.0) || !(cov.p_max >= cov.p_min))
        throw input_error("check_wellposedness_l2: coverage bounds must satisfy 0 < p_min <= p_max");
    const double g = mdp.gamma;
    if (!(g >= 0.0 && g < 1.0))
        throw input_error("check_wellposedness_l2: gamma must lie in [0,1)");

    const QuadratureRule& srule = stat.state_rule;
    const Eigen::Index m = srule.size();
    const QuadratureRule arule = tensor_gauss_rule(mdp.action_box, action_nodes);
    const Eigen::Index na = arule.size();
    const bool pm_target = target.point_mass();
    const bool pm_behavior = mdp.behavior.point_mass();

    // Evaluation rows of the occupation measure: each state node crossed with
    // the action nodes (or the single behavior action for point-mass
    // behavior), weighted by the stationary density.
    struct Row {
        Eigen::Index state_idx;
        Vector action;
        double weight;
    };
    std::vector<Row> rows;
    rows.reserve(static_cast<std::size_t>(m) * (pm_behavior ? 1 : na));
    for (Eigen::Index i = 0; i < m; ++i) {
        const Vector si = srule.nodes.row(i).transpose();
        const double base = srule.weights(i) * stat.f(i);
        if (pm_behavior) {
            rows.push_back({i, mdp.behavior.point_location(si), base});
        } else {
            for (Eigen::Index l = 0; l < na; ++l) {
                const Vector al = arule.nodes.row(l).transpose();
                rows.push_back({i, al, base * arule.weights(l) *
                                           mdp.behavior.density(si, al)});
            }
        }
    }
    const Eigen::Index nr = static_cast<Eigen::Index>(rows.size());

    // Transition quadrature weights per row, shared across all pairs.
    Matrix dk(nr, m);
    for (Eigen::Index r = 0; r < nr; ++r) {
        const Vector si = srule.nodes.row(rows[r].state_idx).transpose();
        for (Eigen::Index q = 0; q < m; ++q)
            dk(r, q) = srule.weights(q) *
                       mdp.transition.density(si, rows[r].action, srule.nodes.row(q).transpose());
    }

    const double lead = std::sqrt(cov.p_min / cov.p_max) * (1.0 - g);

    WellPosednessResult res;
    res.slack = slack;
    res.worst_margin = std::numeric_limits<double>::infinity();
    for (std::size_t pair = 0; pair < q_first.size(); ++pair) {
        const auto& qa = q_first[pair];
        const auto& qb = q_second[pair];
        auto dq = [&](const Vector& s, const Vector& a) { return qa(s, a) - qb(s, a); };

        // Target-policy average of the difference at each state node.
        Vector pd(m);
        for (Eigen::Index q = 0; q < m; ++q) {
            const Vector sq = srule.nodes.row(q).transpose();
            if (pm_target) {
                pd(q) = dq(sq, target.point_location(sq));
            } else {
                double acc = 0.0;
                for (Eigen::Index l = 0; l < na; ++l) {
                    const Vector al = arule.nodes.row(l).transpose();
                    acc += arule.weights(l) * target.density(sq, al) * dq(sq, al);
                }
                pd(q) = acc;
            }
        }

        double nsq_dq = 0.0, nsq_th = 0.0, nsq_h = 0.0;
        for (Eigen::Index r = 0; r < nr; ++r) {
            const Vector si = srule.nodes.row(rows[r].state_idx).transpose();
            const double dv = dq(si, rows[r].action);
            const double w = rows[r].weight;
            nsq_dq += w * dv * dv;
            double t_pd = 0.0, h_sq = 0.0;
            for (Eigen::Index q = 0; q < m; ++q) {
                t_pd += dk(r, q) * pd(q);
                const double h = dv - g * pd(q);
                h_sq += dk(r, q) * h * h;
            }
            const double th = dv - g * t_pd;
            nsq_th += w * th * th;
            nsq_h += w * h_sq;
        }

        L2ChainCheck c;
        c.lhs = lead * std::sqrt(std::max(0.0, nsq_dq));
        c.mid = std::sqrt(std::max(0.0, nsq_th));
        c.rhs = std::sqrt(std::max(0.0, nsq_h));
        c.margin_low = c.mid - c.lhs;
        c.margin_high = c.rhs - c.mid;
        res.worst_margin = std::min({res.worst_margin, c.margin_low, c.margin_high});
        if (c.margin_low < -slack) ++res.violations;
        if (c.margin_high < -slack) ++res.violations;
        res.pairs.push_back(c);
    }
    return res;
}

ContractionResult check_contraction_sup(
    const MdpSpec& mdp, const PolicyDensity& target,
    const std::vector<std::function<double(const Vector&, const Vector&)>>& dq_list,
    int state_nodes, int action_nodes, double slack) {
    if (dq_list.empty()) throw input_error("check_contraction_sup: empty function list");
    const double g = mdp.gamma;
    if (!(g >= 0.0 && g < 1.0))
        throw input_error("check_contraction_sup: gamma must lie in [0,1)");
    if (state_nodes < 2 || action_nodes < 1)
        throw input_error("check_contraction_sup: need state_nodes >= 2 and action_nodes >= 1");

    const QuadratureRule srule = tensor_gauss_rule(mdp.state_box, state_nodes);
    const QuadratureRule arule = tensor_gauss_rule(mdp.action_box, action_nodes);
    const Eigen::Index m = srule.size();
    const Eigen::Index na = arule.size();
    const bool pm = target.point_mass();
    // Operator-closed evaluation set: state quadrature nodes crossed with the
    // action-average nodes, plus the target's chosen action per state when it
    // is a point mass. Every point the inner averages touch is scored, so the
    // chain holds up to quadrature weight-sum slack.
    const Eigen::Index ncol = na + (pm ? 1 : 0);

    Matrix tw; // target-average weights per state node, density targets only
    std::vector<Vector> pm_actions;
    if (pm) {
        pm_actions.resize(m);
        for (Eigen::Index i = 0; i < m; ++i)
            pm_actions[i] = target.point_location(srule.nodes.row(i).transpose());
    } else {
        tw.resize(m, na);
        for (Eigen::Index i = 0; i < m; ++i) {
            const Vector si = srule.nodes.row(i).transpose();
            for (Eigen::Index l = 0; l < na; ++l)
                tw(i, l) = arule.weights(l) *
                           target.density(si, arule.nodes.row(l).transpose());
        }
    }

    // Transition quadrature weights for every evaluation point.
    std::vector<Matrix> dk(static_cast<std::size_t>(ncol));
    for (Eigen::Index c = 0; c < ncol; ++c) {
        dk[c].resize(m, m);
        for (Eigen::Index i = 0; i < m; ++i) {
            const Vector si = srule.nodes.row(i).transpose();
            const Vector ai = (c < na) ? Vector(arule.nodes.row(c).transpose()) : pm_actions[i];
            for (Eigen::Index q = 0; q < m; ++q)
                dk[c](i, q) = srule.weights(q) *
                              mdp.transition.density(si, ai, srule.nodes.row(q).transpose());
        }
    }

    ContractionResult res;
    res.slack = slack;
    res.worst_margin = std::numeric_limits<double>::infinity();
    for (const auto& dq : dq_list) {
        Matrix delta(m, ncol);
        for (Eigen::Index i = 0; i < m; ++i) {
            const Vector si = srule.nodes.row(i).transpose();
            for (Eigen::Index l = 0; l < na; ++l)
                delta(i, l) = dq(si, arule.nodes.row(l).transpose());
            if (pm) delta(i, na) = dq(si, pm_actions[i]);
        }
        Vector pd(m);
        for (Eigen::Index i = 0; i < m; ++i)
            pd(i) = pm ? delta(i, na) : tw.row(i).dot(delta.row(i).head(na));

        SupChainCheck c;
        c.dq_sup = delta.cwiseAbs().maxCoeff();
        const double pd_min = pd.minCoeff();
        const double pd_max = pd.maxCoeff();
        c.h_sup = std::max(delta.maxCoeff() - g * pd_min, g * pd_max - delta.minCoeff());
        double th_sup = 0.0;
        for (Eigen::Index col = 0; col < ncol; ++col) {
            const Vector th = delta.col(col) - g * (dk[static_cast<std::size_t>(col)] * pd);
            th_sup = std::max(th_sup, th.cwiseAbs().maxCoeff());
        }
        c.th_sup = th_sup;
        c.margin_1 = c.dq_sup - c.h_sup / (1.0 + g);
        c.margin_2 = c.th_sup / (1.0 - g) - c.dq_sup;
        c.margin_3 = (c.h_sup - c.th_sup) / (1.0 - g);
        res.worst_margin = std::min({res.worst_margin, c.margin_1, c.margin_2, c.margin_3});
        if (c.margin_1 < -slack) ++res.violations;
        if (c.margin_2 < -slack) ++res.violations;
        if (c.margin_3 < -slack) ++res.violations;
        res.cases.push_back(c);
    }
    return res;
}

EjBoundCheck check_ej_bound(const IllPosednessReport& rep) {
    if (!(rep.p_max > 0.0) || !(rep.p_min > 0.0))
        throw input_error("check_ej_bound: report lacks positive coverage bounds");
    const double shrink = (1.0 - rep.gamma) * (1.0 - rep.gamma);
    EjBoundCheck out;
    out.bound_chain = (rep.p_min / rep.p_max) * shrink * rep.omega_j;
    out.bound_statement = (rep.p_min * rep.p_min / rep.p_max) * shrink * rep.omega_j;
    out.margin_chain = rep.e_j - out.bound_chain;
    out.margin_statement = rep.e_j - out.bound_statement;
    out.slack = 3.0 * (rep.se_e_j + (rep.p_min / rep.p_max) * shrink * rep.se_omega_j) + 1e-9;
    out.pass = out.margin_chain >= -out.slack;
    return out;
}

ProjectionResult project_onto_sieve(const std::function<double(const Vector&)>& f,
                                    const BasisSpec& spec, const Matrix& points,
                                    const Vector& weights) {
    validate_basis_spec(spec);
    if (points.rows() != weights.size())
        throw input_error("project_onto_sieve: points and weights must align");
    if (points.rows() < spec.size())
        throw input_error("project_onto_sieve: need at least as many points as basis functions");
    if (weights.minCoeff() < 0.0)
        throw input_error("project_onto_sieve: weights must be nonnegative");
    const double wsum = weights.sum();
    if (!(wsum > 0.0)) throw input_error("project_onto_sieve: weights must not all vanish");

    const Eigen::Index n = points.rows();
    const Matrix psi = eval_basis(spec, points);
    Vector fv(n);
    for (Eigen::Index i = 0; i < n; ++i) fv(i) = f(points.row(i).transpose());
    if (!fv.allFinite()) throw input_error("project_onto_sieve: function values must be finite");

    const Vector half = weights.array().sqrt();
    const Matrix a = half.asDiagonal() * psi;
    const Vector yv = half.asDiagonal() * fv;
    const Matrix gram = symmetrized(a.transpose() * a);

    ProjectionResult out;
    out.rank_warning = sym_inv_sqrt(gram, kRtol).rank < spec.size();
    out.coef = pinv_truncated(gram, kRtol) * (a.transpose() * yv);
    const Vector resid = fv - psi * out.coef;
    out.residual_l2 = std::sqrt((weights.array() * resid.array().square()).sum() / wsum);
    return out;
}

} // namespace ope
