#pragma once

#include <stdexcept>
#include <string>

namespace ope {

// Error taxonomy. Everything derives from std::runtime_error so callers can
// catch coarsely; the CLI maps input/config errors to exit 1 and numerical
// failures to exit 2.

// Bad values handed to an operation: NaN inputs, points outside a domain,
// malformed files, negative densities.
struct input_error : std::runtime_error {
    explicit input_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Structurally inconsistent configuration (unknown keys, K < J, bad ladders).
struct config_error : std::runtime_error {
    explicit config_error(const std::string& msg) : std::runtime_error(msg) {}
};

// The request is well-formed but outside what the implementation supports,
// e.g. a derivative order a spline family cannot provide.
struct capability_error : std::runtime_error {
    explicit capability_error(const std::string& msg) : std::runtime_error(msg) {}
};

// An iterative scheme ran out of iterations before meeting its tolerance.
struct convergence_error : std::runtime_error {
    convergence_error(const std::string& msg, double residual)
        : std::runtime_error(msg), residual(residual) {}
    double residual;
};

// Simulation produced an invalid transition (left the state box, etc).
struct generation_error : std::runtime_error {
    explicit generation_error(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace ope
