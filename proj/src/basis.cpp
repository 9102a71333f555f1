#include "ope/basis.hpp"

#include <cmath>
#include <cstring>
#include <numbers>
#include <sstream>

namespace ope {

namespace {

// Hard caps keep per-point evaluation on the stack.
constexpr int kMaxDims = 6;
constexpr int kMaxDegree = 10;
constexpr int kMaxPerDim = 96;
constexpr int kDimBuf = kMaxPerDim + kMaxDegree + 1;

std::string point_to_string(const double* x, int d) {
    std::ostringstream os;
    os << "(";
    for (int k = 0; k < d; ++k) os << (k ? ", " : "") << x[k];
    os << ")";
    return os.str();
}

} // namespace

const char* family_name(BasisFamily f) {
    switch (f) {
        case BasisFamily::BSpline: return "bspline";
        case BasisFamily::Cosine: return "cosine";
        case BasisFamily::Legendre: return "legendre";
    }
    return "?";
}

BasisFamily family_from_name(const std::string& name) {
    if (name == "bspline") return BasisFamily::BSpline;
    if (name == "cosine") return BasisFamily::Cosine;
    if (name == "legendre") return BasisFamily::Legendre;
    throw config_error("unknown basis family '" + name + "' (bspline|cosine|legendre)");
}

void validate_basis_spec(const BasisSpec& spec) {
    const int d = spec.dims();
    if (d < 1 || d > kMaxDims)
        throw config_error("basis spec: need between 1 and " + std::to_string(kMaxDims) +
                           " dimensions, got " + std::to_string(d));
    if (spec.domain.size() != static_cast<size_t>(d))
        throw config_error("basis spec: domain has " + std::to_string(spec.domain.size()) +
                           " intervals for " + std::to_string(d) + " dimensions");
    for (int k = 0; k < d; ++k) {
        if (!(spec.domain[static_cast<size_t>(k)].hi > spec.domain[static_cast<size_t>(k)].lo))
            throw config_error("basis spec: degenerate domain interval in dimension " +
                               std::to_string(k));
        const int m = spec.per_dim[static_cast<size_t>(k)];
        if (m < 1 || m > kMaxPerDim)
            throw config_error("basis spec: per-dim count out of range in dimension " +
                               std::to_string(k));
        if (spec.family == BasisFamily::BSpline && m < spec.degree + 1)
            throw config_error("basis spec: B-spline needs at least degree+1 = " +
                               std::to_string(spec.degree + 1) +
                               " functions per dimension, got " + std::to_string(m));
    }
    if (spec.family == BasisFamily::BSpline && (spec.degree < 1 || spec.degree > kMaxDegree))
        throw config_error("basis spec: B-spline degree out of range");
}

Eigen::Index flatten_index(const MultiIndex& mi, const std::vector<int>& per_dim) {
    if (mi.size() != per_dim.size()) throw input_error("flatten_index: dimension mismatch");
    Eigen::Index flat = 0;
    for (size_t k = 0; k < per_dim.size(); ++k) {
        if (mi[k] < 0 || mi[k] >= per_dim[k]) throw input_error("flatten_index: index out of range");
        flat = flat * per_dim[k] + mi[k];
    }
    return flat;
}

MultiIndex unflatten_index(Eigen::Index flat, const std::vector<int>& per_dim) {
    MultiIndex mi(per_dim.size(), 0);
    for (size_t k = per_dim.size(); k-- > 0;) {
        mi[k] = static_cast<int>(flat % per_dim[k]);
        flat /= per_dim[k];
    }
    if (flat != 0) throw input_error("unflatten_index: index out of range");
    return mi;
}

BasisEvaluator::BasisEvaluator(BasisSpec spec) : spec_(std::move(spec)) {
    validate_basis_spec(spec_);
    if (spec_.family == BasisFamily::BSpline) {
        knots_.resize(static_cast<size_t>(spec_.dims()));
        for (int k = 0; k < spec_.dims(); ++k) {
            const int m = spec_.per_dim[static_cast<size_t>(k)];
            const int p = spec_.degree;
            const auto& iv = spec_.domain[static_cast<size_t>(k)];
            // Clamped uniform knots: endpoints repeated p+1 times, m-p-1
            // equally spaced interior knots.
            auto& t = knots_[static_cast<size_t>(k)];
            t.assign(static_cast<size_t>(m + p + 1), iv.lo);
            const int spans = m - p;
            for (int i = 0; i <= p; ++i) t[static_cast<size_t>(m + i)] = iv.hi;
            for (int i = 1; i < spans; ++i)
                t[static_cast<size_t>(p + i)] = iv.lo + iv.width() * i / spans;
        }
    }
}

// Univariate evaluation: writes the m_k values of the requested derivative
// order into vals.
void BasisEvaluator::eval_dim(int dim, double x, int order, double* vals) const {
    const int m = spec_.per_dim[static_cast<size_t>(dim)];
    const auto& iv = spec_.domain[static_cast<size_t>(dim)];
    const double w = iv.width();

    switch (spec_.family) {
        case BasisFamily::Cosine: {
            const double u = (x - iv.lo) / w;
            vals[0] = order == 0 ? 1.0 : 0.0;
            for (int j = 1; j < m; ++j) {
                const double freq = j * std::numbers::pi;
                const double scale = std::pow(freq / w, order);
                vals[j] = std::numbers::sqrt2 * scale *
                          std::cos(freq * u + 0.5 * std::numbers::pi * order);
            }
            return;
        }
        case BasisFamily::Legendre: {
            // Shifted, orthonormal for the uniform measure on the interval.
            // Derivative table via P^(r)_{j+1} = P^(r)_{j-1} + (2j+1) P^(r-1)_j.
            const double t = 2.0 * (x - iv.lo) / w - 1.0;
            double table[kMaxDegree + 1][kDimBuf];
            const int r = order;
            for (int k = 0; k <= r; ++k)
                for (int j = 0; j < m; ++j) table[k][j] = 0.0;
            if (m > 0) table[0][0] = 1.0;
            if (m > 1) table[0][1] = t;
            for (int j = 1; j + 1 < m; ++j)
                table[0][j + 1] = ((2.0 * j + 1.0) * t * table[0][j] - j * table[0][j - 1]) / (j + 1.0);
            for (int k = 1; k <= r; ++k) {
                if (m > 1) table[k][1] = k == 1 ? 1.0 : 0.0;
                for (int j = 1; j + 1 < m; ++j)
                    table[k][j + 1] = table[k][j - 1] + (2.0 * j + 1.0) * table[k - 1][j];
            }
            const double chain = std::pow(2.0 / w, order);
            for (int j = 0; j < m; ++j)
                vals[j] = std::sqrt(2.0 * j + 1.0) * chain * table[r][j];
            return;
        }
        case BasisFamily::BSpline: {
            const int p = spec_.degree;
            const auto& t = knots_[static_cast<size_t>(dim)];
            const int q0 = p - order; // start from plain values of this degree
            // Degree-q basis functions on this knot vector number m+p-q.
            double cur[kDimBuf];
            int count = m + p - q0;
            // Degree 0: span indicators. The last nonzero-width span is
            // closed on the right so x = hi evaluates cleanly.
            {
                const int c0 = m + p;
                double deg0[kDimBuf];
                int last_real = -1;
                for (int i = 0; i < c0; ++i) {
                    deg0[i] = (x >= t[static_cast<size_t>(i)] && x < t[static_cast<size_t>(i + 1)])
                                  ? 1.0 : 0.0;
                    if (t[static_cast<size_t>(i + 1)] > t[static_cast<size_t>(i)]) last_real = i;
                }
                if (x == t.back() && last_real >= 0) deg0[last_real] = 1.0;
                // Raise degree to q0 by the Cox-de Boor recursion.
                for (int q = 1; q <= q0; ++q) {
                    const int cq = m + p - q;
                    for (int i = 0; i < cq; ++i) {
                        double acc = 0.0;
                        const double den1 = t[static_cast<size_t>(i + q)] - t[static_cast<size_t>(i)];
                        if (den1 > 0.0) acc += (x - t[static_cast<size_t>(i)]) / den1 * deg0[i];
                        const double den2 =
                            t[static_cast<size_t>(i + q + 1)] - t[static_cast<size_t>(i + 1)];
                        if (den2 > 0.0)
                            acc += (t[static_cast<size_t>(i + q + 1)] - x) / den2 * deg0[i + 1];
                        cur[i] = acc;
                    }
                    std::memcpy(deg0, cur, sizeof(double) * static_cast<size_t>(cq));
                }
                std::memcpy(cur, deg0, sizeof(double) * static_cast<size_t>(count));
            }
            // Differentiate `order` times, raising the degree back up to p.
            for (int q = q0; q < p; ++q) {
                const int cq1 = count - 1;
                double nxt[kDimBuf];
                for (int i = 0; i < cq1; ++i) {
                    double acc = 0.0;
                    const double den1 = t[static_cast<size_t>(i + q + 1)] - t[static_cast<size_t>(i)];
                    if (den1 > 0.0) acc += cur[i] / den1;
                    const double den2 =
                        t[static_cast<size_t>(i + q + 2)] - t[static_cast<size_t>(i + 1)];
                    if (den2 > 0.0) acc -= cur[i + 1] / den2;
                    nxt[i] = (q + 1) * acc;
                }
                std::memcpy(cur, nxt, sizeof(double) * static_cast<size_t>(cq1));
                count = cq1;
            }
            std::memcpy(vals, cur, sizeof(double) * static_cast<size_t>(m));
            return;
        }
    }
}

void BasisEvaluator::tensor_fill(const double* const* dim_vals, double* out) const {
    const int d = spec_.dims();
    const Eigen::Index j_total = spec_.size();
    if (d == 1) {
        std::memcpy(out, dim_vals[0], sizeof(double) * static_cast<size_t>(j_total));
        return;
    }
    // Lexicographic: last dimension fastest.
    int idx[kMaxDims] = {0};
    double prefix[kMaxDims + 1];
    prefix[0] = 1.0;
    for (int k = 0; k < d; ++k) prefix[k + 1] = prefix[k] * dim_vals[k][0];
    for (Eigen::Index c = 0;; ++c) {
        out[c] = prefix[d];
        int k = d - 1;
        for (; k >= 0; --k) {
            if (++idx[k] < spec_.per_dim[static_cast<size_t>(k)]) break;
            idx[k] = 0;
        }
        if (k < 0) break;
        for (int kk = k; kk < d; ++kk) prefix[kk + 1] = prefix[kk] * dim_vals[kk][idx[kk]];
    }
}

void BasisEvaluator::values(const double* x, double* out) const {
    const int d = spec_.dims();
    double buf[kMaxDims][kDimBuf];
    const double* ptrs[kMaxDims];
    for (int k = 0; k < d; ++k) {
        const auto& iv = spec_.domain[static_cast<size_t>(k)];
        if (!(x[k] >= iv.lo && x[k] <= iv.hi))
            throw input_error("basis evaluation: point " + point_to_string(x, d) +
                              " is outside dimension " + std::to_string(k) + " domain [" +
                              std::to_string(iv.lo) + ", " + std::to_string(iv.hi) + "]");
        eval_dim(k, x[k], 0, buf[k]);
        ptrs[k] = buf[k];
    }
    tensor_fill(ptrs, out);
}

void BasisEvaluator::derivs(const double* x, const int* alpha, double* out) const {
    const int d = spec_.dims();
    int total = 0;
    for (int k = 0; k < d; ++k) {
        if (alpha[k] < 0) throw input_error("basis derivative: negative order");
        total += alpha[k];
    }
    if (spec_.family == BasisFamily::BSpline && total > spec_.degree - 1)
        throw capability_error("basis derivative: B-spline of degree " +
                               std::to_string(spec_.degree) + " supports total order <= " +
                               std::to_string(spec_.degree - 1) + ", requested " +
                               std::to_string(total));
    if (total > kMaxDegree)
        throw capability_error("basis derivative: total order capped at " +
                               std::to_string(kMaxDegree));
    double buf[kMaxDims][kDimBuf];
    const double* ptrs[kMaxDims];
    for (int k = 0; k < d; ++k) {
        const auto& iv = spec_.domain[static_cast<size_t>(k)];
        if (!(x[k] >= iv.lo && x[k] <= iv.hi))
            throw input_error("basis derivative: point " + point_to_string(x, d) +
                              " is outside dimension " + std::to_string(k) + " domain [" +
                              std::to_string(iv.lo) + ", " + std::to_string(iv.hi) + "]");
        eval_dim(k, x[k], alpha[k], buf[k]);
        ptrs[k] = buf[k];
    }
    tensor_fill(ptrs, out);
}

Matrix eval_basis(const BasisSpec& spec, const Matrix& points) {
    BasisEvaluator ev(spec);
    if (points.cols() != spec.dims())
        throw input_error("eval_basis: points have " + std::to_string(points.cols()) +
                          " columns, basis has " + std::to_string(spec.dims()) + " dimensions");
    Matrix out(points.rows(), ev.size());
    Eigen::RowVectorXd row(points.cols());
    std::vector<double> buf(static_cast<size_t>(ev.size()));
    for (Eigen::Index i = 0; i < points.rows(); ++i) {
        row = points.row(i);
        ev.values(row.data(), buf.data());
        for (Eigen::Index j = 0; j < out.cols(); ++j) out(i, j) = buf[static_cast<size_t>(j)];
    }
    return out;
}

Matrix eval_basis_deriv(const BasisSpec& spec, const Matrix& points, const MultiIndex& alpha) {
    BasisEvaluator ev(spec);
    if (points.cols() != spec.dims())
        throw input_error("eval_basis_deriv: point/basis dimension mismatch");
    if (alpha.size() != static_cast<size_t>(spec.dims()))
        throw input_error("eval_basis_deriv: alpha has wrong length");
    Matrix out(points.rows(), ev.size());
    Eigen::RowVectorXd row(points.cols());
    std::vector<double> buf(static_cast<size_t>(ev.size()));
    for (Eigen::Index i = 0; i < points.rows(); ++i) {
        row = points.row(i);
        ev.derivs(row.data(), alpha.data(), buf.data());
        for (Eigen::Index j = 0; j < out.cols(); ++j) out(i, j) = buf[static_cast<size_t>(j)];
    }
    return out;
}

Matrix policy_basis(const BasisSpec& spec, const PolicyDensity& policy, const Matrix& s_points,
                    const QuadratureRule& action_rule) {
    BasisEvaluator ev(spec);
    const int d = spec.dims();
    const int da = policy.action_dims();
    const int ds = d - da;
    if (ds < 1)
        throw input_error("policy_basis: basis dimension must exceed action dimension");
    if (s_points.cols() != ds)
        throw input_error("policy_basis: state points have " + std::to_string(s_points.cols()) +
                          " columns, expected " + std::to_string(ds));

    Matrix out = Matrix::Zero(s_points.rows(), ev.size());
    std::vector<double> x(static_cast<size_t>(d));
    std::vector<double> psi(static_cast<size_t>(ev.size()));

    if (policy.point_mass()) {
        Vector s(ds);
        for (Eigen::Index i = 0; i < s_points.rows(); ++i) {
            s = s_points.row(i);
            const Vector a0 = policy.point_location(s);
            for (int k = 0; k < ds; ++k) x[static_cast<size_t>(k)] = s(k);
            for (int k = 0; k < da; ++k) x[static_cast<size_t>(ds + k)] = a0(k);
            ev.values(x.data(), psi.data());
            for (Eigen::Index j = 0; j < out.cols(); ++j) out(i, j) = psi[static_cast<size_t>(j)];
        }
        return out;
    }

    if (action_rule.dims() != da)
        throw input_error("policy_basis: quadrature rule dimension does not match the action space");
    for (int k = 0; k < da; ++k) {
        const auto& ri = action_rule.box[static_cast<size_t>(k)];
        const auto& pi = policy.action_box[static_cast<size_t>(k)];
        if (std::abs(ri.lo - pi.lo) > 1e-12 || std::abs(ri.hi - pi.hi) > 1e-12)
            throw input_error("policy_basis: quadrature rule box does not match the action box");
    }

    // Cache quadrature nodes as vectors once; the row loop is the hot path.
    const Eigen::Index nq = action_rule.size();
    std::vector<Vector> a_nodes(static_cast<size_t>(nq));
    for (Eigen::Index l = 0; l < nq; ++l) a_nodes[static_cast<size_t>(l)] = action_rule.nodes.row(l);

    Vector s(ds);
    for (Eigen::Index i = 0; i < s_points.rows(); ++i) {
        s = s_points.row(i);
        for (int k = 0; k < ds; ++k) x[static_cast<size_t>(k)] = s(k);
        for (Eigen::Index l = 0; l < nq; ++l) {
            const Vector& a = a_nodes[static_cast<size_t>(l)];
            const double dens = policy.density(s, a);
            if (dens < 0.0)
                throw input_error("policy_basis: negative policy density at quadrature node " +
                                  std::to_string(l));
            if (dens == 0.0) continue;
            const double w = action_rule.weights(l) * dens;
            for (int k = 0; k < da; ++k) x[static_cast<size_t>(ds + k)] = a(k);
            ev.values(x.data(), psi.data());
            for (Eigen::Index j = 0; j < out.cols(); ++j)
                out(i, j) += w * psi[static_cast<size_t>(j)];
        }
    }
    return out;
}

GramResult gram_matrix(const BasisSpec& spec, const Matrix& points) {
    GramResult res;
    const Matrix psi = eval_basis(spec, points);
    res.g = (psi.transpose() * psi) / static_cast<double>(points.rows());
    res.g = 0.5 * (res.g + res.g.transpose()).eval();
    res.rank_warning = points.rows() < psi.cols();
    return res;
}

} // namespace ope
