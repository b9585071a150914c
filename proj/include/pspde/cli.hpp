#pragma once

#include <cstdint>
#include <exception>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "pspde/bayes.hpp"
#include "pspde/finance.hpp"
#include "pspde/freq.hpp"
#include "pspde/sim.hpp"

namespace pspde::cli {

using json = nlohmann::json;

enum class Command { fit, simulate, calibrate };

const char* to_string(Command c);

/// Right-hand side of a condition. Polynomials are per dimension and
/// multiply; rational divides two such products.
struct TargetSpec {
    enum class Kind { constant, values, polynomial, rational };
    Kind kind = Kind::constant;
    double value = 0.0;
    std::vector<double> values;           // one per explicit point
    std::vector<Polynomial> numerator;    // polynomial, rational
    std::vector<Polynomial> denominator;  // rational
};

struct ConditionSpec {
    std::string label;
    int face_dim = -1;  // 0-based; -1 means explicit points
    bool face_upper = false;
    bool face_edges = true;
    Eigen::MatrixXd points;
    std::vector<int> deriv;
    TargetSpec target;
};

/// Observations for `fit`: a CSV file (columns x1..xp, z) or the analytic
/// diffusion surface on a grid plus noise.
struct DataSpec {
    std::string input;
    std::vector<double> theta_true{0.5, 1.5};
    double noise_sd = 0.01;
    std::vector<AxisSpec> grid{{-3.0, 3.0, 50}, {0.0, 1.0, 50}};
    int replicate = 0;
};

struct EstimatorConfig {
    EstimatorMethod method = EstimatorMethod::freq;
    ConstraintMode mode = ConstraintMode::ls;
    double kappa = 1e6;
    std::vector<double> theta0;  // default: ones (fit, simulate), 0.2 (calibrate)
    double gamma0 = 0.0;
    double tau0 = 0.0;
    int max_iter = 200;
    double tol = 1e-6;
    int bootstrap = 0;  // replicates; calibrate needs at least 2
    double level = 0.95;
    int iterations = 20000;
    int burn_in = 5000;
    int thin = 1;
    bool kappa_random = false;
    double min_acceptance = 0.05;
    Hyperparams hyper;
};

struct StudySection {
    std::vector<double> theta_true{0.5, 1.5};
    std::vector<double> noise_sd{0.01};
    std::vector<AxisSpec> grid{{-3.0, 3.0, 50}, {0.0, 1.0, 50}};
    int replicates = 50;
    std::vector<EstimatorSpec> estimators{{EstimatorMethod::freq, ConstraintMode::ls}};
};

struct CalibrationSection {
    Coordinates coordinates = Coordinates::scaled;
    std::optional<BsDomain> domain;
    std::optional<double> rate;
    int n_interior = 25;
    int degree = 3;
    double strike_gap = 1.0;
    std::optional<SyntheticQuotesSpec> synthetic;  // used when io.input is empty
};

struct RunConfig {
    Command command = Command::fit;
    std::uint64_t seed = 0;
    std::vector<BasisDimSpec> basis;           // fit, simulate
    PdeSpec pde;                               // fit
    std::vector<ConditionSpec> conditions;     // fit
    DataSpec data;                             // fit
    EstimatorConfig estimator;
    QuadratureRule quadrature;                 // fit, simulate
    StudySection study;                        // simulate
    CalibrationSection calibration;            // calibrate
    std::string input;                         // io.input (calibrate quotes)
    std::string output_dir = "out";
    std::vector<AxisSpec> surface;             // io.surface; empty: 50 points per axis over the domain
};

/// Reads and validates a config file; `//` comments are allowed.
RunConfig parse_config(const std::string& path);
RunConfig parse_config(const json& j);

/// Effective config with every default filled in.
json to_json(const RunConfig& config);
bool operator==(const RunConfig& a, const RunConfig& b);

/// FNV-1a of the compact effective config, as 16 hex digits.
std::string config_hash(const RunConfig& config);
/// "config_hash=... seed=..." for output headers.
std::string provenance(const RunConfig& config);

/// Conditions of a fit config, resolved against its basis.
std::vector<Condition> build_conditions(const RunConfig& config, const TensorBasis& basis);

struct EstimateRow {
    std::string parameter;
    double point = 0.0;
    double lo = std::nan("");
    double hi = std::nan("");
    std::string method;
};

struct RunResult {
    std::vector<EstimateRow> estimates;
    std::vector<std::string> files;
};

struct RunOptions {
    int threads = 1;
    std::ostream* log = nullptr;  // progress messages when set
};

/// Dispatches the command and writes its artifacts into output_dir.
RunResult run(const RunConfig& config, const RunOptions& options = {});

/// One row per grid point (dimension 1 fastest): x1..xp, value. `c` is canonical.
void export_surface(const Eigen::VectorXd& c, const TensorBasis& basis, const GridAxes& axes, const std::string& path,
                    const std::string& header_comment = "", const std::vector<std::string>& names = {});

/// 2 config or input error, 3 numerical failure, 4 I/O error, 1 otherwise.
int exit_code(const std::exception& e);

}  // namespace pspde::cli
