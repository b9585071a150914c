#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pspde/bayes.hpp"
#include "pspde/freq.hpp"
#include "pspde/model.hpp"

namespace pspde {

/// exp(-(theta2/theta1) x2) / (1 + (x1 - x2/theta1)^2), the solution of
/// u_x1 + theta1 u_x2 + theta2 u = 0 with u(x1, 0) = 1/(1 + x1^2).
double diffusion_solution(double x1, double x2, std::span<const double> theta);

/// u_x1 + theta1 u_x2 + theta2 u = 0
PdeSpec diffusion_pde();

/// Initial condition u(x1, 0) = 1/(1 + x1^2) on the knot grid of the x2 = lo face.
std::vector<Condition> diffusion_conditions(const TensorBasis& basis);

enum class EstimatorMethod { freq, bayes };

struct EstimatorSpec {
    EstimatorMethod method = EstimatorMethod::freq;
    ConstraintMode mode = ConstraintMode::ls;

    [[nodiscard]] std::string label() const;
};

struct AxisSpec {
    double lo = 0.0;
    double hi = 1.0;
    int n = 2;

    [[nodiscard]] std::vector<double> points() const;
};

struct BasisDimSpec {
    double lo = 0.0;
    double hi = 1.0;
    int degree = 3;
    int n_basis = 10;                     // equidistant interior knots
    std::vector<double> interior_knots;   // overrides n_basis when non-empty

    [[nodiscard]] BasisSpec1D build() const;
};

struct StudyConfig {
    std::vector<double> theta_true{0.5, 1.5};
    std::vector<double> noise_sd{0.01};
    std::vector<AxisSpec> grid{{-3.0, 3.0, 50}, {0.0, 1.0, 50}};
    std::vector<BasisDimSpec> basis{{-3.0, 3.0, 3, 28, {}}, {0.0, 1.0, 3, 13, {}}};
    int replicates = 50;
    std::vector<EstimatorSpec> estimators{{EstimatorMethod::freq, ConstraintMode::ls}};
    std::uint64_t seed = 1;
    FitSettings fit;          // theta0 defaults to (1, 1)
    ChainSettings chain;
    Hyperparams hyper;
    QuadratureRule quadrature;

    StudyConfig();
    void validate() const;
    [[nodiscard]] TensorBasis tensor_basis() const;
};

/// Noisy observations of the analytic surface on the study grid for noise
/// level `level` and replicate `replicate`; seeded from (seed, level, replicate).
Dataset simulate_dataset(const StudyConfig& config, int level, int replicate);

/// One replicate's estimates for one estimator and noise level.
struct ReplicateResult {
    int level = 0;
    int replicate = 0;
    int estimator = 0;
    bool ok = false;
    std::string error;
    std::vector<double> estimate;   // theta then tau
    std::vector<double> post_sd;    // bayes only
    std::vector<double> lo80, hi80, lo95, hi95;  // bayes only (HPD)
    double gamma = 0.0;
    double tau = 0.0;
};

struct MetricsRow {
    std::string estimator;
    double noise_sd = 0.0;
    std::string parameter;
    double truth = 0.0;
    int replicates = 0;
    double r_bias = 0.0;   // percent
    double r_rmse = 0.0;
    double r_std = 0.0;    // population standard deviation of relative errors
    double mpsd = std::nan("");  // bayes, absolute
    double cp80 = std::nan("");
    double cp95 = std::nan("");
    double mean_estimate = 0.0;
};

struct MetricsTable {
    std::vector<MetricsRow> rows;
    std::vector<ReplicateResult> raw;
    int failures = 0;

    void write(const std::string& path, const std::string& header_comment = "") const;
    void write_raw(const std::string& path, const std::vector<std::string>& param_names,
                   const std::string& header_comment = "") const;
};

/// Relative-error summaries of estimates against truth.
struct RelativeMetrics {
    double r_bias = 0.0;
    double r_rmse = 0.0;
    double r_std = 0.0;
};
RelativeMetrics relative_metrics(const std::vector<double>& estimates, double truth);

MetricsTable run_study(const StudyConfig& config);

}  // namespace pspde
