#pragma once

#include <functional>
#include <vector>

namespace pspde {

struct NelderMeadSettings {
    std::vector<double> step;  // initial simplex offsets per coordinate
    double xtol = 1e-9;        // relative simplex size at convergence
    double ftol = 1e-13;       // relative spread of simplex values at convergence
    int max_evals = 2000;
    int stall_evals = 50;      // evaluations without a new best before giving up
};

struct NelderMeadResult {
    std::vector<double> x;
    double f = 0.0;
    int evals = 0;
    bool converged = false;
    bool stalled = false;
};

/// Derivative-free simplex minimisation with the standard coefficients. Non-finite
/// objective values are treated as +infinity.
NelderMeadResult nelder_mead(const std::function<double(const std::vector<double>&)>& f, std::vector<double> x0,
                             const NelderMeadSettings& settings);

}  // namespace pspde
