#pragma once

#include "ope/npiv.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace ope {

// Spectral quantities of the sieve evaluation problem, estimated from a
// simulated batch of the behavior chain plus quadrature for conditional
// expectations. Jackknife standard errors use ten trajectory-aligned blocks.
struct IllPosednessReport {
    Eigen::Index j = 0;
    Eigen::Index k = 0;
    double gamma = 0.0;

    double e_j = 0.0;     // smallest eigenvalue of the h-feature Gram
    double omega_j = 0.0; // smallest eigenvalue of the psi Gram
    double s_jk = 0.0;    // smallest singular value of the whitened cross matrix
    double tau_j = 0.0;   // attenuation sup |h| / |T h| over the sieve span

    double se_e_j = 0.0;
    double se_omega_j = 0.0;
    double se_s_jk = 0.0;
    double se_tau_j = 0.0;

    double zeta_b = 0.0;     // grid sup of the instrument feature norm
    double zeta_kappa = 0.0; // grid sup of the h-feature norm over (s,a,s')
    double xi_psi = 0.0;     // grid sup of the psi feature norm

    double p_min = 0.0; // occupation-density floor (grid estimate)
    double p_max = 0.0; // max of occupation density and composite kernel
    double tau_bound = 0.0; // coverage-implied cap sqrt(p_max (1 + p_max g^2 / p_min)) / (sqrt(p_min) (1-g))

    double proj_residual = 0.0; // sup over sampled h of |(instrument-projected T - T) h|

    bool singular_flag = false; // some Gram fell below rtol; values use pseudo-inverses
    int mc_points = 0;
    int sup_grid = 0;
    std::uint64_t seed = 0;
};

// mc_points transitions are simulated under the behavior policy (burned in),
// feature moments averaged, conditional expectations taken by quadrature on
// state_nodes Gauss-Legendre points. The h-feature Gram is assembled as
// (conditional-mean Gram) + (conditional-residual Gram), which enforces the
// averaging inequality tau >= 1 in finite samples.
IllPosednessReport compute_report(const MdpSpec& mdp, const PolicyDensity& target,
                                  const BasisSpec& psi_spec, const BasisSpec& b_spec,
                                  int mc_points, std::uint64_t seed, int state_nodes = 64,
                                  int action_nodes = 32, int sup_grid = 0, int cov_grid = 0);

std::string report_to_json(const IllPosednessReport& report);
void write_report_json(const IllPosednessReport& report, const std::string& path);

// Three-term L2 chain for a difference function dq = q1 - q2:
//   sqrt(p_min/p_max) (1-g) |dq|  <=  |T h(dq)|  <=  |h(dq)|
// under the occupation density (left two) and its product with the
// transition (right). Margins are (mid - lhs) and (rhs - mid).
struct L2ChainCheck {
    double lhs = 0.0;
    double mid = 0.0;
    double rhs = 0.0;
    double margin_low = 0.0;
    double margin_high = 0.0;
};

struct WellPosednessResult {
    std::vector<L2ChainCheck> pairs;
    double worst_margin = 0.0;
    int violations = 0; // margins below -slack
    double slack = 0.0;
};

WellPosednessResult check_wellposedness_l2(
    const MdpSpec& mdp, const PolicyDensity& target,
    const std::vector<std::function<double(const Vector&, const Vector&)>>& q_first,
    const std::vector<std::function<double(const Vector&, const Vector&)>>& q_second,
    const StationaryDensity& stat, const CoverageBounds& cov, int action_nodes = 32,
    double slack = 1e-6);

// Sup-norm chain for a bounded difference function dq:
//   (1/(1+g)) |h(dq)|  <=  |dq|  <=  (1/(1-g)) |T h(dq)|  <=  (1/(1-g)) |h(dq)|
// All suprema are taken over an operator-closed evaluation set: the state
// quadrature nodes crossed with the action-average nodes, so every point the
// inner averages touch is itself scored.
struct SupChainCheck {
    double h_sup = 0.0;
    double dq_sup = 0.0;
    double th_sup = 0.0;
    double margin_1 = 0.0; // dq_sup - h_sup/(1+g)
    double margin_2 = 0.0; // th_sup/(1-g) - dq_sup
    double margin_3 = 0.0; // (h_sup - th_sup)/(1-g)
};

struct ContractionResult {
    std::vector<SupChainCheck> cases;
    double worst_margin = 0.0;
    int violations = 0;
    double slack = 0.0;
};

ContractionResult check_contraction_sup(
    const MdpSpec& mdp, const PolicyDensity& target,
    const std::vector<std::function<double(const Vector&, const Vector&)>>& dq_list,
    int state_nodes = 64, int action_nodes = 32, double slack = 1e-6);

// Lower-bound check on the h-feature Gram floor: the proof-chain factor
//   e_J >= (p_min/p_max) (1-g)^2 omega_J
// is asserted (minus Monte Carlo slack); the stronger-looking reading with
// p_min^2 is reported alongside, never asserted.
struct EjBoundCheck {
    bool pass = false;
    double bound_chain = 0.0;
    double bound_statement = 0.0;
    double margin_chain = 0.0;
    double margin_statement = 0.0;
    double slack = 0.0;
};

EjBoundCheck check_ej_bound(const IllPosednessReport& report);

// Weighted least-squares projection of f onto the basis span; used to
// measure sieve approximation error.
struct ProjectionResult {
    Vector coef;
    double residual_l2 = 0.0; // weighted root mean square residual
    bool rank_warning = false;
};

ProjectionResult project_onto_sieve(const std::function<double(const Vector&)>& f,
                                    const BasisSpec& spec, const Matrix& points,
                                    const Vector& weights);

} // namespace ope
