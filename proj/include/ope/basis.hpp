#pragma once

#include <vector>

#include "ope/numerics.hpp"
#include "ope/policy.hpp"

namespace ope {

enum class BasisFamily { BSpline, Cosine, Legendre };

const char* family_name(BasisFamily f);
BasisFamily family_from_name(const std::string& name);

// Tensor-product sieve basis over a rectangle. per_dim holds the number of
// univariate functions in each dimension, so the total count is their
// product. Columns are ordered lexicographically in the per-dimension
// indices: the last dimension varies fastest. Cosine and Legendre families
// are orthonormal for the uniform measure on the domain; B-splines use a
// clamped uniform knot vector (endpoint knots repeated degree+1 times).
struct BasisSpec {
    BasisFamily family = BasisFamily::Cosine;
    int degree = 3; // B-spline order parameter; ignored by the other families
    std::vector<int> per_dim;
    Box domain;

    int dims() const { return static_cast<int>(per_dim.size()); }
    Eigen::Index size() const {
        Eigen::Index j = 1;
        for (int m : per_dim) j *= m;
        return j;
    }
};

// Throws config_error/input_error if the spec is unusable.
void validate_basis_spec(const BasisSpec& spec);

using MultiIndex = std::vector<int>;

Eigen::Index flatten_index(const MultiIndex& mi, const std::vector<int>& per_dim);
MultiIndex unflatten_index(Eigen::Index flat, const std::vector<int>& per_dim);

// Stateless point evaluator. Construction validates the spec and precomputes
// knot vectors; evaluation writes the J basis values (or derivative values)
// for one point into `out`. Thread-safe: no mutable state.
class BasisEvaluator {
  public:
    explicit BasisEvaluator(BasisSpec spec);

    const BasisSpec& spec() const { return spec_; }
    Eigen::Index size() const { return spec_.size(); }

    void values(const double* x, double* out) const;
    // alpha: per-dimension derivative orders. Orders are unrestricted for the
    // smooth families; B-splines support |alpha|_1 <= degree-1.
    void derivs(const double* x, const int* alpha, double* out) const;

  private:
    BasisSpec spec_;
    std::vector<std::vector<double>> knots_; // per dimension, B-spline only

    void eval_dim(int dim, double x, int order, double* vals) const;
    void tensor_fill(const double* const* dim_vals, double* out) const;
};

// Basis values at each point (rows of `points` are points, columns follow the
// lexicographic ordering contract). Out-of-domain points raise input_error
// naming the point and dimension.
Matrix eval_basis(const BasisSpec& spec, const Matrix& points);

// Mixed partial derivatives, one column per basis function.
Matrix eval_basis_deriv(const BasisSpec& spec, const Matrix& points, const MultiIndex& alpha);

// Rows of the action-integrated basis: for each state s, the vector
// integral_pi(a|s) psi(s,a) da, computed with `action_rule` (or a single
// evaluation for point-mass policies). The basis domain must be the product
// state_box x action_box with the state dimensions first.
Matrix policy_basis(const BasisSpec& spec, const PolicyDensity& policy, const Matrix& s_points,
                    const QuadratureRule& action_rule);

struct GramResult {
    Matrix g;
    bool rank_warning = false; // fewer points than basis functions
};

// (1/n) Psi^T Psi, exactly symmetrized.
GramResult gram_matrix(const BasisSpec& spec, const Matrix& points);

} // namespace ope
