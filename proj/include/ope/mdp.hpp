#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ope/numerics.hpp"
#include "ope/policy.hpp"

namespace ope {

// Markov transition kernel on a compact state box: an evaluable conditional
// density q(s' | s, a) paired with an exact sampler for it.
struct TransitionKernel {
    Box state_box;
    std::function<double(const Vector& s, const Vector& a, const Vector& sp)> density;
    std::function<Vector(const Vector& s, const Vector& a, SeededStream& rng)> sampler;

    int state_dims() const { return static_cast<int>(state_box.size()); }
};

// Per-dimension truncated normal around mean_fn(s, a); sampling is inverse
// CDF, so draws always land inside the box.
TransitionKernel truncated_normal_transition(
    Box state_box, std::function<Vector(const Vector& s, const Vector& a)> mean_fn, double sd);

// Generative model of the environment plus the two policies of interest.
// reward_fn is the deterministic reward component; observed rewards add
// centered Gaussian noise with standard deviation noise_sd, clipped at 4 sd
// (the clip is symmetric, so the conditional mean stays exactly zero).
struct MdpSpec {
    Box state_box;
    Box action_box;
    TransitionKernel transition;
    std::function<double(const Vector& s, const Vector& a, const Vector& sp)> reward_fn;
    double noise_sd = 0.0;
    double r_max = 0.0; // bound on |reward_fn| plus the clipped noise
    double gamma = 0.9;
    PolicyDensity target;
    PolicyDensity behavior;

    int state_dims() const { return static_cast<int>(state_box.size()); }
    int action_dims() const { return static_cast<int>(action_box.size()); }
};

// Sanity checks: discount in [0,1), policy normalization at probe states,
// reward bound on a scan grid. Throws input_error on violation.
void validate_mdp(const MdpSpec& mdp, int probe_per_dim = 5, int action_nodes = 32);

// Batch of N trajectories with T transitions each, stored flat with
// (trajectory, step)-lexicographic rows.
struct Dataset {
    int state_dims = 0;
    int action_dims = 0;
    Eigen::Index n_traj = 0;
    Eigen::Index horizon = 0;
    std::uint64_t seed = 0;
    int burn_in = 0;
    Matrix s;  // NT x ds
    Matrix a;  // NT x da
    Vector r;  // NT
    Matrix sp; // NT x ds

    Eigen::Index rows() const { return r.size(); }
};

// Simulate under the behavior policy. Each trajectory draws from its own
// (seed, trajectory-index) stream, so output is independent of scheduling
// and reproducible. Initial states are uniform on the state box, followed by
// burn_in unrecorded steps.
Dataset sample_trajectories(const MdpSpec& mdp, const PolicyDensity& behavior,
                            Eigen::Index n_traj, Eigen::Index horizon, int burn_in,
                            std::uint64_t seed);

// Verifies s'(i,t) == s(i,t+1) within each trajectory.
void check_chain_consistency(const Dataset& data);

void write_dataset_csv(const Dataset& data, const std::string& path);
Dataset read_dataset_csv(const std::string& path);
void write_dataset_binary(const Dataset& data, const std::string& path);
Dataset read_dataset_binary(const std::string& path);

// Q function tabulated on a tensor grid over the state and action boxes,
// evaluated anywhere by multilinear interpolation.
struct OracleQ {
    Box state_box;
    Box action_box;
    std::vector<int> grid_per_dim;              // one entry per (s,a) dimension
    std::vector<std::vector<double>> axes;      // grid coordinates per dimension
    Vector values;                              // lexicographic, last dim fastest
    std::string provenance;                     // "designed" or "fixed-point"
    double tol = 0.0;                           // fixed-point stopping tolerance
    int iterations = 0;
    double final_change = 0.0;                  // last sup-norm update size
    double residual = 0.0;                      // implied sup distance bound

    double operator()(const Vector& s, const Vector& a) const;
};

// Tabulates a closed-form Q on the grid ("designed" provenance).
OracleQ tabulate_q(const Box& state_box, const Box& action_box,
                   const std::function<double(const Vector&, const Vector&)>& q,
                   int grid_per_dim);

// Solves Q = rbar + gamma * P_pi Q on a tensor grid by contraction
// iteration. State integrals use state_rule; the action integral inside the
// policy average uses an internal Gauss-Legendre rule with action_nodes
// points per dimension. Stops when the sup-norm update falls below
// tol * (1 - gamma); throws convergence_error past max_iter.
OracleQ fixed_point_oracle(const MdpSpec& mdp, const PolicyDensity& target, int grid_per_dim,
                           const QuadratureRule& state_rule, double tol = 1e-8,
                           int max_iter = 100000, int action_nodes = 32);

// Benchmark construction with a known ground truth: rewards are assembled so
// that the supplied q_star is exactly the fixed point of the evaluation
// operator for `target`.
struct DesignedMdp {
    MdpSpec mdp;
    std::function<double(const Vector& s, const Vector& a)> q_star;
};

DesignedMdp designed_q_mdp(std::function<double(const Vector&, const Vector&)> q_star,
                           TransitionKernel base_transition, Box action_box,
                           PolicyDensity target, PolicyDensity behavior, double gamma,
                           double noise_sd, int action_nodes = 32);

// Conditional expectation over the next state: (T f)(s,a) with f(s,a,s').
Vector apply_T(const MdpSpec& mdp,
               const std::function<double(const Vector&, const Vector&, const Vector&)>& f,
               const Matrix& sa_points, const QuadratureRule& state_rule);

// Initial state distribution for value functionals: a point mass or a
// density over the state box.
struct InitialDist {
    bool point = false;
    Vector location;
    std::function<double(const Vector& s)> density;
};

// v = E_F integral pi(a|s) Q(s,a) da, by quadrature (or direct evaluation at
// point masses on either side).
double oracle_value(const OracleQ& q, const PolicyDensity& target, const InitialDist& init,
                    const QuadratureRule& state_rule, const QuadratureRule& action_rule);

// Stationary occupation density of the behavior-policy chain, estimated by
// transfer-operator power iteration on a Gauss-Legendre state grid. The
// (s,a) density factorizes as f(s) * pi_b(a|s); f is evaluable off-grid via
// one application of the kernel to the converged node values.
struct StationaryDensity {
    QuadratureRule state_rule;
    Vector f; // state density at the rule's nodes
    std::function<double(const Vector& s)> state_density;
    std::function<double(const Vector& s, const Vector& a)> density;
    int iterations = 0;
    double final_change = 0.0;
};

StationaryDensity estimate_stationary(const MdpSpec& mdp, const PolicyDensity& behavior,
                                      int state_nodes = 64, int action_nodes = 32,
                                      double tol = 1e-12, int max_iter = 50000);

// Occupation-density range and the one-step composite kernel bound used in
// coverage reporting. All quantities are grid estimates and labeled so.
struct CoverageBounds {
    double p_min = 0.0;  // min(dbar)
    double p_max = 0.0;  // max(sup dbar, sup q * pi_target)
    double dbar_min = 0.0;
    double dbar_max = 0.0;
    double pair_kernel_max = 0.0;
    int grid_per_dim = 0;
};

CoverageBounds coverage_bounds(const MdpSpec& mdp, const PolicyDensity& target,
                               const StationaryDensity& stat, int grid_per_dim = 0);

} // namespace ope
