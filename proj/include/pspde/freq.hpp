#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "pspde/linalg.hpp"
#include "pspde/model.hpp"
#include "pspde/pde.hpp"

namespace pspde {

enum class ConstraintMode { none, ls, lagrange };

const char* to_string(ConstraintMode m);

// ---- single solves on explicit inputs (canonical coefficient order) ----

/// (tau B^T B + gamma R)^{-1} (tau B^T zeta - gamma r)
Eigen::VectorXd solve_ridge(const DesignMatrix& design, const Eigen::VectorXd& zeta, const PenaltyQuadratic& q,
                            double tau, double gamma);

/// (tau B^T B + gamma R + kappa H^T H)^{-1} (tau B^T zeta - gamma r + kappa H^T v)
Eigen::VectorXd solve_ls_constrained(const DesignMatrix& design, const Eigen::VectorXd& zeta,
                                     const PenaltyQuadratic& q, double tau, double gamma, const ConstraintSet& cons,
                                     double kappa);

/// Saddle-point solve of the bordered system; returns (c, omega).
std::pair<Eigen::VectorXd, Eigen::VectorXd> solve_lagrange(const DesignMatrix& design, const Eigen::VectorXd& zeta,
                                                           const PenaltyQuadratic& q, double tau, double gamma,
                                                           const ConstraintSet& cons);

struct SchallResult {
    double gamma = 0.0;
    bool escalated = false;  // PEN <= 0: gamma multiplied by 10
    double edf = 0.0;        // trace of the influence matrix
    double df_res = 0.0;
    double df_pen = 0.0;
    double pen = 0.0;
    double rss = 0.0;
};

/// gamma_new = tau * (RSS / df_res) / (PEN / df_pen) for the unconstrained
/// ridge solve; `nullity` is the rank deficiency of R (computed if negative).
SchallResult schall_update(const DesignMatrix& design, const Eigen::VectorXd& zeta, const Eigen::VectorXd& c,
                           const PenaltyQuadratic& q, double tau, double gamma, int nullity = -1);

/// Rank deficiency of a symmetric matrix (eigenvalues below rel * max).
int nullity(const Eigen::MatrixXd& sym, double rel = 1e-10);

// ---- full estimation on a precomputed problem ----

/// One inner solve at fixed (theta, tau, gamma).
struct InnerSolution {
    Eigen::VectorXd c;      // internal order
    Eigen::VectorXd omega;  // Lagrange multipliers (lagrange mode)
    double rss = 0.0;
    double pen = 0.0;
    double edf = 0.0;  // filled by with_trace solves
    bool ridge_floor = false;
};

class InnerSolver {
public:
    InnerSolver(const SmoothingProblem& problem, ConstraintMode mode, double kappa);

    /// Solves at (theta, tau, gamma). With `with_trace` the influence-matrix
    /// trace is computed too.
    InnerSolution solve(std::span<const double> theta, double tau, double gamma, bool with_trace = false);

    [[nodiscard]] const SmoothingProblem& problem() const noexcept { return *problem_; }
    [[nodiscard]] ConstraintMode mode() const noexcept { return mode_; }

private:
    const SmoothingProblem* problem_;
    ConstraintMode mode_;
    double kappa_;
    BandMatrix R_;
    Eigen::VectorXd r_;
    double l_ = 0.0;
    BandMatrix A_;
    BandCholesky chol_;
};

struct FitSettings {
    std::vector<double> theta0;
    double gamma0 = 0.0;  // 0: penalty-dominated start, see auto_gamma0
    double tau0 = 0.0;    // <= 0: 1 / var(zeta)
    ConstraintMode mode = ConstraintMode::none;
    double kappa = 1e6;
    int max_iter = 200;
    double tol = 1e-6;
    double initial_step = 0.1;  // relative simplex step for the first outer iteration
    int stall_evals = 50;
    int nullity = -1;  // rank deficiency of R; computed at theta0 when negative
};

struct TraceRow {
    int iteration = 0;
    std::vector<double> theta;
    double tau = 0.0;
    double gamma = 0.0;
    double objective = 0.0;  // profiled log-likelihood N/2 log tau - tau/2 RSS
    double rss = 0.0;
    double pen = 0.0;
    double edf = 0.0;
    int evals = 0;
    bool stalled = false;  // simplex gave up without meeting its tolerances
};

struct FreqFit {
    Eigen::VectorXd c_hat;  // canonical order
    std::vector<double> theta_hat;
    double tau_hat = 0.0;
    double gamma_hat = 0.0;
    std::optional<double> kappa;
    Eigen::VectorXd omega;
    std::vector<TraceRow> trace;
    ConstraintMode mode = ConstraintMode::none;
    bool converged = false;
    bool simplex_stalled = false;
    bool gamma_escalated = false;
    bool ridge_floor = false;
    int iterations = 0;
    int nullity = 0;
    double rss = 0.0;
    double edf = 0.0;
    int n_obs = 0;
};

/// Starting adhesion 1e4 * tau0 * mean diag(B^T B) / mean diag(R(theta0)),
/// so that the first theta search sees a penalty-dominated inner solve.
double auto_gamma0(const SmoothingProblem& problem, std::span<const double> theta0, double tau0);

FreqFit fit_frequentist(const SmoothingProblem& problem, const FitSettings& settings);

struct BootstrapSettings {
    int replicates = 1000;
    double level = 0.95;
    std::uint64_t seed = 1;
};

struct BootstrapResult {
    std::vector<double> lo;  // per parameter
    std::vector<double> hi;
    std::vector<std::vector<double>> draws;  // kept replicates x parameters
    int dropped = 0;
    std::vector<std::string> drop_reasons;
};

/// Residual bootstrap around the fitted surface, refits warm-started at the
/// estimates, percentile intervals. Replicates run in parallel.
BootstrapResult bootstrap_ci(const FreqFit& fit, const SmoothingProblem& problem, const FitSettings& settings,
                             const BootstrapSettings& boot);

/// Percentile intervals from stored replicate draws at another level.
std::pair<std::vector<double>, std::vector<double>> percentile_intervals(const std::vector<std::vector<double>>& draws,
                                                                         double level);

}  // namespace pspde
