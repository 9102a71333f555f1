#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <random>
#include <vector>

#include "ope/errors.hpp"

namespace ope {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Axis-aligned box, one interval per dimension.
struct Interval {
    double lo = 0.0;
    double hi = 1.0;
    double width() const { return hi - lo; }
};
using Box = std::vector<Interval>;

double box_volume(const Box& box);
bool box_contains(const Box& box, const Eigen::Ref<const Vector>& x, double tol = 0.0);

// Truncated-SVD pseudo-inverse. Singular values below rtol * sigma_max are
// dropped. Non-finite entries are rejected up front.
Matrix pinv_truncated(const Matrix& a, double rtol = 1e-10);

struct EigExtremes {
    double min = 0.0;
    double max = 0.0;
    Vector min_vec;
    Vector max_vec;
};

// Extreme eigenpairs of a symmetric matrix. Asymmetry beyond 1e-10 relative
// is an input_error rather than silently symmetrizing.
EigExtremes sym_eig_extremes(const Matrix& a);

// Smallest singular value (0 for an empty matrix).
double min_singular(const Matrix& a);

// Symmetric inverse square root with eigenvalue truncation: eigenvalues
// below rtol * lambda_max contribute nothing. Returns the rank alongside.
struct InvSqrtResult {
    Matrix m;
    int rank = 0;
};
InvSqrtResult sym_inv_sqrt(const Matrix& a, double rtol = 1e-10);

// Tensor-product Gauss-Legendre rule over a box. Exact for per-dimension
// polynomial degree <= 2*nodes_per_dim-1; weights are positive and sum to the
// box volume.
struct QuadratureRule {
    Matrix nodes;     // n x d, one point per row
    Vector weights;   // n
    Box box;
    int nodes_per_dim = 0;
    Eigen::Index size() const { return weights.size(); }
    int dims() const { return static_cast<int>(box.size()); }
};

QuadratureRule tensor_gauss_rule(const Box& box, int nodes_per_dim);

// One-dimensional Gauss-Legendre nodes/weights on [-1, 1].
void gauss_legendre(int n, std::vector<double>& nodes, std::vector<double>& weights);

// Standard normal CDF and its inverse (Acklam's approximation polished with
// one Halley step; good to ~1e-15 over the full open interval).
double norm_cdf(double x);
double norm_ppf(double p);

// Reproducible RNG stream addressed by (seed, stream id). All distribution
// transforms are inverse-CDF based so sequences are bit-identical across
// standard libraries, not just across runs of one binary.
class SeededStream {
  public:
    SeededStream(std::uint64_t seed, std::uint64_t stream_id);

    std::uint64_t seed() const { return seed_; }
    std::uint64_t stream_id() const { return stream_; }

    std::uint64_t next_u64() { return eng_(); }
    // Uniform on the open interval (0, 1); never returns an exact endpoint.
    double uniform01();
    double uniform(double lo, double hi);
    double normal();
    // Standard normal clipped to [-clip, clip]. The clip is symmetric, so the
    // mean stays exactly zero.
    double clipped_normal(double clip);

  private:
    std::mt19937_64 eng_;
    std::uint64_t seed_ = 0;
    std::uint64_t stream_ = 0;
};

// splitmix64 step, exposed for deriving sub-seeds from (seed, index) pairs.
std::uint64_t splitmix64(std::uint64_t& state);
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream_id);

// One-dimensional normal truncated to [lo, hi]. Sampling is inverse-CDF so a
// single uniform draw maps deterministically to a point inside the interval.
struct TruncatedNormal {
    double mean = 0.0;
    double sd = 1.0;
    double lo = 0.0;
    double hi = 1.0;

    double density(double x) const;
    double sample(SeededStream& rng) const;
};

} // namespace ope
