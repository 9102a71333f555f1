#pragma once

#include <functional>
#include <utility>

#include "ope/numerics.hpp"

namespace ope {

// Conditional action distribution a | s. Either a proper density with a
// sampler, or a point mass at a state-dependent location (the point-mass
// branch skips quadrature everywhere downstream).
struct PolicyDensity {
    Box action_box;
    std::function<double(const Vector& s, const Vector& a)> density;
    std::function<Vector(const Vector& s, SeededStream& rng)> sampler;
    std::function<Vector(const Vector& s)> point_location; // non-null => point mass

    bool point_mass() const { return static_cast<bool>(point_location); }
    int action_dims() const { return static_cast<int>(action_box.size()); }
};

// Per-dimension truncated normal centered at mean_fn(s).
inline PolicyDensity truncated_normal_policy(Box action_box,
                                             std::function<Vector(const Vector&)> mean_fn,
                                             double sd) {
    PolicyDensity p;
    p.action_box = std::move(action_box);
    auto box = p.action_box;
    p.density = [box, mean_fn, sd](const Vector& s, const Vector& a) {
        const Vector m = mean_fn(s);
        double d = 1.0;
        for (Eigen::Index k = 0; k < a.size(); ++k) {
            const auto& iv = box[static_cast<size_t>(k)];
            d *= TruncatedNormal{m(k), sd, iv.lo, iv.hi}.density(a(k));
        }
        return d;
    };
    p.sampler = [box, mean_fn, sd](const Vector& s, SeededStream& rng) {
        const Vector m = mean_fn(s);
        Vector a(static_cast<Eigen::Index>(box.size()));
        for (size_t k = 0; k < box.size(); ++k)
            a(static_cast<Eigen::Index>(k)) =
                TruncatedNormal{m(static_cast<Eigen::Index>(k)), sd, box[k].lo, box[k].hi}.sample(rng);
        return a;
    };
    return p;
}

inline PolicyDensity uniform_policy(Box action_box) {
    PolicyDensity p;
    p.action_box = std::move(action_box);
    auto box = p.action_box;
    const double inv_vol = 1.0 / box_volume(box);
    p.density = [box, inv_vol](const Vector&, const Vector& a) {
        for (Eigen::Index k = 0; k < a.size(); ++k) {
            const auto& iv = box[static_cast<size_t>(k)];
            if (a(k) < iv.lo || a(k) > iv.hi) return 0.0;
        }
        return inv_vol;
    };
    p.sampler = [box](const Vector&, SeededStream& rng) {
        Vector a(static_cast<Eigen::Index>(box.size()));
        for (size_t k = 0; k < box.size(); ++k)
            a(static_cast<Eigen::Index>(k)) = rng.uniform(box[k].lo, box[k].hi);
        return a;
    };
    return p;
}

inline PolicyDensity point_mass_policy(Box action_box,
                                       std::function<Vector(const Vector&)> location) {
    PolicyDensity p;
    p.action_box = std::move(action_box);
    p.point_location = std::move(location);
    p.sampler = [loc = p.point_location](const Vector& s, SeededStream&) { return loc(s); };
    return p;
}

// Quadrature check that the density integrates to one over the action box at
// each probe state. Throws input_error on violation.
void check_policy_normalization(const PolicyDensity& policy, const Matrix& probe_states,
                                const QuadratureRule& rule, double tol = 1e-6);

} // namespace ope
