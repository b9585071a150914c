#include "pspde/optim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "pspde/error.hpp"

namespace pspde {

NelderMeadResult nelder_mead(const std::function<double(const std::vector<double>&)>& f, std::vector<double> x0,
                             const NelderMeadSettings& settings) {
    const std::size_t n = x0.size();
    if (n == 0) throw ValidationError("Nelder-Mead needs at least one parameter");
    if (settings.step.size() != n) throw ValidationError("Nelder-Mead step has the wrong length");

    NelderMeadResult res;
    double best = std::numeric_limits<double>::infinity();
    int since_best = 0;
    auto eval = [&](const std::vector<double>& x) {
        double v = f(x);
        if (!std::isfinite(v)) v = std::numeric_limits<double>::infinity();
        ++res.evals;
        if (v < best) {
            best = v;
            since_best = 0;
        } else {
            ++since_best;
        }
        return v;
    };

    std::vector<std::vector<double>> simplex(n + 1, x0);
    std::vector<double> fv(n + 1);
    for (std::size_t i = 0; i < n; ++i) simplex[i + 1][i] += settings.step[i];
    for (std::size_t i = 0; i <= n; ++i) fv[i] = eval(simplex[i]);

    std::vector<std::size_t> idx(n + 1);
    std::vector<double> centroid(n), xr(n), xe(n), xc(n);
    while (true) {
        std::iota(idx.begin(), idx.end(), 0);
        std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return fv[a] < fv[b]; });
        {
            auto s2 = simplex;
            auto f2 = fv;
            for (std::size_t i = 0; i <= n; ++i) {
                simplex[i] = s2[idx[i]];
                fv[i] = f2[idx[i]];
            }
        }
        double size = 0.0;
        for (std::size_t i = 1; i <= n; ++i)
            for (std::size_t k = 0; k < n; ++k)
                size = std::max(size, std::abs(simplex[i][k] - simplex[0][k]) / (std::abs(simplex[0][k]) + 1e-12));
        const double spread = std::abs(fv[n] - fv[0]);
        if (size <= settings.xtol && spread <= settings.ftol * (std::abs(fv[0]) + 1e-300)) {
            res.converged = true;
            break;
        }
        if (size <= 1e-3 * settings.xtol) {
            // collapsed simplex: nothing left to resolve
            res.converged = true;
            break;
        }
        if (res.evals >= settings.max_evals) break;
        if (since_best >= settings.stall_evals) {
            res.stalled = true;
            break;
        }

        std::fill(centroid.begin(), centroid.end(), 0.0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = 0; k < n; ++k) centroid[k] += simplex[i][k] / static_cast<double>(n);
        for (std::size_t k = 0; k < n; ++k) xr[k] = centroid[k] + (centroid[k] - simplex[n][k]);
        const double fr = eval(xr);
        if (fr < fv[0]) {
            for (std::size_t k = 0; k < n; ++k) xe[k] = centroid[k] + 2.0 * (centroid[k] - simplex[n][k]);
            const double fe = eval(xe);
            if (fe < fr) {
                simplex[n] = xe;
                fv[n] = fe;
            } else {
                simplex[n] = xr;
                fv[n] = fr;
            }
            continue;
        }
        if (fr < fv[n - 1]) {
            simplex[n] = xr;
            fv[n] = fr;
            continue;
        }
        const bool outside = fr < fv[n];
        for (std::size_t k = 0; k < n; ++k)
            xc[k] = outside ? centroid[k] + 0.5 * (xr[k] - centroid[k]) : centroid[k] + 0.5 * (simplex[n][k] - centroid[k]);
        const double fc = eval(xc);
        if (fc < (outside ? fr : fv[n])) {
            simplex[n] = xc;
            fv[n] = fc;
            continue;
        }
        // shrink toward the best vertex
        for (std::size_t i = 1; i <= n; ++i) {
            for (std::size_t k = 0; k < n; ++k) simplex[i][k] = simplex[0][k] + 0.5 * (simplex[i][k] - simplex[0][k]);
            fv[i] = eval(simplex[i]);
        }
    }
    const auto it = std::min_element(fv.begin(), fv.end());
    res.x = simplex[static_cast<std::size_t>(it - fv.begin())];
    res.f = *it;
    return res;
}

}  // namespace pspde
