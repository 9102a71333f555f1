#include "ope/numerics.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <string>

namespace ope {

double box_volume(const Box& box) {
    double v = 1.0;
    for (const auto& iv : box) v *= iv.width();
    return v;
}

bool box_contains(const Box& box, const Eigen::Ref<const Vector>& x, double tol) {
    if (static_cast<size_t>(x.size()) != box.size()) return false;
    for (Eigen::Index k = 0; k < x.size(); ++k) {
        const auto& iv = box[static_cast<size_t>(k)];
        if (x[k] < iv.lo - tol || x[k] > iv.hi + tol) return false;
    }
    return true;
}

Matrix pinv_truncated(const Matrix& a, double rtol) {
    if (!a.allFinite()) throw input_error("pinv_truncated: matrix has non-finite entries");
    if (a.size() == 0) return Matrix(a.cols(), a.rows());
    Eigen::JacobiSVD<Matrix> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Vector& sv = svd.singularValues();
    const double cut = rtol * sv(0);
    Vector inv = Vector::Zero(sv.size());
    for (Eigen::Index i = 0; i < sv.size(); ++i)
        if (sv(i) > cut && sv(i) > 0.0) inv(i) = 1.0 / sv(i);
    return svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
}

EigExtremes sym_eig_extremes(const Matrix& a) {
    if (!a.allFinite()) throw input_error("sym_eig_extremes: matrix has non-finite entries");
    if (a.rows() != a.cols()) throw input_error("sym_eig_extremes: matrix is not square");
    const double scale = a.cwiseAbs().maxCoeff();
    const double asym = (a - a.transpose()).cwiseAbs().maxCoeff();
    if (scale > 0.0 && asym > 1e-10 * scale)
        throw input_error("sym_eig_extremes: matrix asymmetry " + std::to_string(asym / scale) +
                          " exceeds 1e-10 relative");
    Eigen::SelfAdjointEigenSolver<Matrix> es(a);
    if (es.info() != Eigen::Success)
        throw input_error("sym_eig_extremes: eigendecomposition failed");
    EigExtremes out;
    const Eigen::Index n = a.rows();
    out.min = es.eigenvalues()(0);
    out.max = es.eigenvalues()(n - 1);
    out.min_vec = es.eigenvectors().col(0);
    out.max_vec = es.eigenvectors().col(n - 1);
    return out;
}

double min_singular(const Matrix& a) {
    if (!a.allFinite()) throw input_error("min_singular: matrix has non-finite entries");
    if (a.size() == 0) return 0.0;
    Eigen::JacobiSVD<Matrix> svd(a);
    return svd.singularValues()(svd.singularValues().size() - 1);
}

InvSqrtResult sym_inv_sqrt(const Matrix& a, double rtol) {
    if (a.rows() != a.cols()) throw input_error("sym_inv_sqrt: matrix is not square");
    Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (a + a.transpose()));
    if (es.info() != Eigen::Success)
        throw input_error("sym_inv_sqrt: eigendecomposition failed");
    const Vector& ev = es.eigenvalues();
    const double cut = rtol * std::max(0.0, ev(ev.size() - 1));
    Vector inv = Vector::Zero(ev.size());
    InvSqrtResult out;
    for (Eigen::Index i = 0; i < ev.size(); ++i) {
        if (ev(i) > cut && ev(i) > 0.0) {
            inv(i) = 1.0 / std::sqrt(ev(i));
            ++out.rank;
        }
    }
    out.m = es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
    return out;
}

void gauss_legendre(int n, std::vector<double>& nodes, std::vector<double>& weights) {
    if (n < 1) throw input_error("gauss_legendre: need at least one node");
    nodes.assign(static_cast<size_t>(n), 0.0);
    weights.assign(static_cast<size_t>(n), 0.0);
    const int m = (n + 1) / 2;
    for (int i = 0; i < m; ++i) {
        // Chebyshev-based starting guess, then Newton on P_n.
        double x = std::cos(std::numbers::pi * (i + 0.75) / (n + 0.5));
        double pp = 0.0;
        for (int it = 0; it < 100; ++it) {
            double p0 = 1.0, p1 = x;
            for (int k = 2; k <= n; ++k) {
                const double p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
                p0 = p1;
                p1 = p2;
            }
            pp = n * (x * p1 - p0) / (x * x - 1.0);
            const double dx = p1 / pp;
            x -= dx;
            if (std::abs(dx) < 1e-15) break;
        }
        // One more evaluation at the converged point for the weight.
        double p0 = 1.0, p1 = x;
        for (int k = 2; k <= n; ++k) {
            const double p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
            p0 = p1;
            p1 = p2;
        }
        pp = n * (x * p1 - p0) / (x * x - 1.0);
        const double w = 2.0 / ((1.0 - x * x) * pp * pp);
        nodes[static_cast<size_t>(i)] = -x;
        nodes[static_cast<size_t>(n - 1 - i)] = x;
        weights[static_cast<size_t>(i)] = w;
        weights[static_cast<size_t>(n - 1 - i)] = w;
    }
    if (n % 2 == 1) nodes[static_cast<size_t>(n / 2)] = 0.0;
}

QuadratureRule tensor_gauss_rule(const Box& box, int nodes_per_dim) {
    if (box.empty()) throw input_error("tensor_gauss_rule: empty box");
    if (nodes_per_dim < 1) throw input_error("tensor_gauss_rule: nodes_per_dim must be >= 1");
    for (size_t k = 0; k < box.size(); ++k) {
        if (!(box[k].hi > box[k].lo))
            throw input_error("tensor_gauss_rule: degenerate interval in dimension " +
                              std::to_string(k));
    }
    std::vector<double> x1, w1;
    gauss_legendre(nodes_per_dim, x1, w1);

    const int d = static_cast<int>(box.size());
    Eigen::Index n = 1;
    for (int k = 0; k < d; ++k) n *= nodes_per_dim;

    QuadratureRule rule;
    rule.box = box;
    rule.nodes_per_dim = nodes_per_dim;
    rule.nodes.resize(n, d);
    rule.weights.resize(n);

    std::vector<int> idx(static_cast<size_t>(d), 0);
    for (Eigen::Index r = 0; r < n; ++r) {
        double w = 1.0;
        for (int k = 0; k < d; ++k) {
            const auto& iv = box[static_cast<size_t>(k)];
            const double half = 0.5 * iv.width();
            const double mid = 0.5 * (iv.lo + iv.hi);
            const size_t j = static_cast<size_t>(idx[static_cast<size_t>(k)]);
            rule.nodes(r, k) = mid + half * x1[j];
            w *= half * w1[j];
        }
        rule.weights(r) = w;
        for (int k = d - 1; k >= 0; --k) {
            if (++idx[static_cast<size_t>(k)] < nodes_per_dim) break;
            idx[static_cast<size_t>(k)] = 0;
        }
    }
    return rule;
}

double norm_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

namespace {

// Acklam's rational approximation to the standard normal quantile.
double ppf_acklam(double p) {
    static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                               -2.759285104469687e+02, 1.383577518672690e+02,
                               -3.066479806614716e+01, 2.506628277459239e+00};
    static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                               -1.556989798598866e+02, 6.680131188771972e+01,
                               -1.328068155288572e+01};
    static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                               -2.400758277161838e+00, -2.549732539343734e+00,
                               4.374664141464968e+00,  2.938163982698783e+00};
    static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                               2.445134137142996e+00, 3.754408661907416e+00};
    const double plow = 0.02425;
    if (p < plow) {
        const double q = std::sqrt(-2.0 * std::log(p));
        return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
               ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }
    if (p > 1.0 - plow) {
        const double q = std::sqrt(-2.0 * std::log(1.0 - p));
        return -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
               ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }
    const double q = p - 0.5;
    const double r = q * q;
    return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
           (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
}

} // namespace

double norm_ppf(double p) {
    if (!(p > 0.0 && p < 1.0)) throw input_error("norm_ppf: p must lie strictly in (0,1)");
    double x = ppf_acklam(p);
    // One Halley step against the exact CDF tightens Acklam's ~1e-9 to ~1e-15.
    static const double inv_sqrt2pi = 0.3989422804014327;
    const double e = norm_cdf(x) - p;
    const double u = e / (inv_sqrt2pi * std::exp(-0.5 * x * x));
    x -= u / (1.0 + 0.5 * x * u);
    return x;
}

std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream_id) {
    std::uint64_t s = seed;
    std::uint64_t a = splitmix64(s);
    s ^= stream_id * 0xD2B74407B1CE6E93ULL;
    std::uint64_t b = splitmix64(s);
    return a ^ (b + 0x9E3779B97F4A7C15ULL + (a << 6) + (a >> 2));
}

SeededStream::SeededStream(std::uint64_t seed, std::uint64_t stream_id)
    : eng_(mix_seed(seed, stream_id)), seed_(seed), stream_(stream_id) {}

double SeededStream::uniform01() {
    // 53 mantissa bits, then nudge 0 up to keep the interval open.
    const double u = static_cast<double>(eng_() >> 11) * 0x1.0p-53;
    return u > 0.0 ? u : 0x1.0p-53;
}

double SeededStream::uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

double SeededStream::normal() { return norm_ppf(uniform01()); }

double SeededStream::clipped_normal(double clip) {
    const double z = normal();
    if (z > clip) return clip;
    if (z < -clip) return -clip;
    return z;
}

double TruncatedNormal::density(double x) const {
    if (x < lo || x > hi) return 0.0;
    const double za = (lo - mean) / sd;
    const double zb = (hi - mean) / sd;
    const double z = (x - mean) / sd;
    static const double inv_sqrt2pi = 0.3989422804014327;
    const double mass = norm_cdf(zb) - norm_cdf(za);
    return inv_sqrt2pi * std::exp(-0.5 * z * z) / (sd * mass);
}

double TruncatedNormal::sample(SeededStream& rng) const {
    const double ca = norm_cdf((lo - mean) / sd);
    const double cb = norm_cdf((hi - mean) / sd);
    const double u = ca + (cb - ca) * rng.uniform01();
    const double x = mean + sd * norm_ppf(std::min(std::max(u, 1e-300), 1.0 - 1e-16));
    return std::min(std::max(x, lo), hi);
}

} // namespace ope
