#pragma once

#include "ope/basis.hpp"
#include "ope/mdp.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace ope {

// Design matrices of the two-stage regression. Rows follow the dataset's
// (trajectory, step)-lexicographic order, so assembly is reproducible under
// any scheduling.
struct AssembledSystem {
    BasisSpec psi_spec; // sieve for the Q function, J columns
    BasisSpec b_spec;   // instrument basis, K columns
    double gamma = 0.0;
    Eigen::Index n_traj = 0;
    Eigen::Index horizon = 0;
    Matrix psi;      // NT x J, psi(s,a)
    Matrix g_pi;     // NT x J, policy-averaged features at the next state
    Matrix gamma_pi; // NT x J, psi - gamma * g_pi
    Matrix b;        // NT x K, b(s,a)
    Vector r;        // NT rewards

    Eigen::Index rows() const { return r.size(); }
    Eigen::Index n_coef() const { return psi.cols(); }
    Eigen::Index n_instruments() const { return b.cols(); }
};

// Evaluates both bases on the dataset and the policy average at next states
// (action integral via action_rule). Requires J <= K <= ratio_cap * J.
AssembledSystem assemble(const Dataset& data, const BasisSpec& psi_spec, const BasisSpec& b_spec,
                         const PolicyDensity& target, double gamma,
                         const QuadratureRule& action_rule, double instrument_ratio_cap = 2.0);

struct FitDiagnostics {
    Eigen::Index rank_instruments = 0; // numerical rank of B'B
    Eigen::Index rank_projected = 0;   // rank of the projected normal matrix
    double cond_projected = 0.0;       // ratio of kept extreme eigenvalues
    bool rank_deficient = false;
    double grad_norm = 0.0; // |Gamma' P_B (R - Gamma c)|_inf at the solution
    double rtol = 0.0;
};

struct SieveFit {
    BasisSpec psi_spec;
    double gamma = 0.0;
    Vector coef;
    FitDiagnostics diag;
};

// Two-stage least squares: project the reward vector and the feature
// difference onto the instrument space, then least squares. Internally
// whitened by the symmetric inverse square root of B'B/NT; the result is
// algebraically the textbook closed form. Rank deficiency is flagged and
// handled by truncated pseudo-inverse, never silently regularized.
SieveFit fit_2sls(const AssembledSystem& sys, double rtol = 1e-10);

Vector predict_q(const SieveFit& fit, const Matrix& sa_points);
double predict_q(const SieveFit& fit, const Vector& s, const Vector& a);
Vector predict_q_deriv(const SieveFit& fit, const Matrix& sa_points, const MultiIndex& alpha);
double predict_q_deriv(const SieveFit& fit, const Vector& s, const Vector& a,
                       const MultiIndex& alpha);

// JSON round trip at 17 significant digits.
std::string fit_to_json(const SieveFit& fit);
SieveFit fit_from_json(const std::string& text);
void write_fit_json(const SieveFit& fit, const std::string& path);
SieveFit read_fit_json(const std::string& path);

// Model-based residual rho(s,a) = rbar(s,a) + gamma (P_pi Qhat)(s,a) - Qhat(s,a),
// evaluated at the supplied (s,a) points. sup is the max over the points; l2
// is weighted by `weights` (nonnegative, normalized internally), so passing
// occupation-density quadrature weights gives the stationary L2 norm.
struct BellmanResidual {
    double sup = 0.0;
    double l2 = 0.0;
};

BellmanResidual bellman_residual_norms(const SieveFit& fit, const MdpSpec& mdp,
                                       const PolicyDensity& target, const Matrix& sa_points,
                                       const Vector& weights, const QuadratureRule& state_rule,
                                       int action_nodes = 32);

// v = E_F integral pi(a|s) Qhat(s,a) da by quadrature; point masses on either
// side evaluate directly.
double plugin_value(const SieveFit& fit, const PolicyDensity& target, const InitialDist& init,
                    const QuadratureRule& state_rule, const QuadratureRule& action_rule);

// Nonparametric bootstrap over whole trajectories: resample N trajectory
// indices with replacement, refit from per-trajectory sufficient statistics,
// re-evaluate the value functional.
struct BootstrapValue {
    double value = 0.0; // point estimate from the full sample
    double se = 0.0;    // standard deviation of the replicates
    Vector replicates;
};

BootstrapValue bootstrap_value(const AssembledSystem& sys, const PolicyDensity& target,
                               const InitialDist& init, const QuadratureRule& state_rule,
                               const QuadratureRule& action_rule, int n_boot = 200,
                               std::uint64_t seed = 0, double rtol = 1e-10);

// Sieve-dimension rule J ~ base^{d/(2p+d)} with base = NT (l2 norm) or
// NT/log(NT) (sup norm), scaled by `multiplier` and rounded up to the next
// tensor-feasible J = m^d. Sup mode requires 2p > d.
struct JChoice {
    int j = 0;       // m^d
    int per_dim = 0; // m
    double j_raw = 0.0;
};

JChoice choose_J(double nt, double smoothness, int dims, const std::string& norm,
                 double multiplier);

// Holdout sweep over candidate multipliers: fit on the first trajectories,
// score on the rest with the instrument-projected residual criterion
// g' G_b^- g, g = B'(R - Gamma c)/n. Returns scores sorted as given;
// smallest criterion wins.
struct MultiplierScore {
    double multiplier = 0.0;
    int j = 0;
    double criterion = 0.0;
};

std::vector<MultiplierScore> select_j_multiplier(
    const Dataset& data, BasisFamily family, int degree, const Box& sa_domain,
    const PolicyDensity& target, double gamma, const QuadratureRule& action_rule,
    double smoothness, const std::string& norm, const std::vector<double>& multipliers,
    double holdout_fraction = 0.2, double rtol = 1e-10);

} // namespace ope
