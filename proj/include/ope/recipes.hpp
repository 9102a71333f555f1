#pragma once

#include <string>
#include <vector>

#include "ope/basis.hpp"
#include "ope/mdp.hpp"

namespace ope {

// Named synthetic environment with an exactly known ground-truth Q, its
// derivatives, and a default initial distribution for value functionals.
struct Recipe {
    std::string id;
    DesignedMdp designed;
    // alpha = (0,...,0) returns q_star itself
    std::function<double(const Vector& s, const Vector& a, const MultiIndex& alpha)> q_star_deriv;
    InitialDist init;
};

// Available ids:
//   benchmark-2d  scalar state and action on [0,1], truncated-normal
//                 transition and policies, q* = sin(pi s) cos(pi a / 2)
//   span-2d       same dynamics, q* a fixed vector in the 3x3 cosine span,
//                 so moderate sieves recover it exactly
const std::vector<std::string>& recipe_ids();

Recipe make_recipe(const std::string& id, double gamma, double noise_sd);

} // namespace ope
