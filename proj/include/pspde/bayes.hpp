#pragma once

#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "pspde/freq.hpp"
#include "pspde/linalg.hpp"
#include "pspde/model.hpp"
#include "pspde/pde.hpp"

namespace pspde {

struct ThetaPrior {
    enum class Kind { normal, point, uniform, flat };
    Kind kind = Kind::flat;
    double a = 0.0;  // normal: mean; point: value; uniform: lower
    double b = 1.0;  // normal: sd; uniform: upper

    static ThetaPrior normal(double mean, double sd) { return {Kind::normal, mean, sd}; }
    static ThetaPrior point(double value) { return {Kind::point, value, 0.0}; }
    static ThetaPrior uniform(double lo, double hi) { return {Kind::uniform, lo, hi}; }
    static ThetaPrior flat() { return {Kind::flat, 0.0, 0.0}; }

    [[nodiscard]] double log_density(double x) const;
    [[nodiscard]] bool fixed() const noexcept { return kind == Kind::point; }
    void validate(const std::string& name) const;
};

struct Hyperparams {
    double a_tau = 1.0, b_tau = 1e-6;
    double a_gamma = 1.0, b_gamma = 1e-8;
    double a_kappa = 1.0, b_kappa = 1e-6;
    std::vector<ThetaPrior> theta_prior;  // empty: flat on every component

    void validate(std::size_t n_theta) const;
    [[nodiscard]] double log_theta_prior(std::span<const double> theta) const;
};

/// Unnormalised log density of G(shape, rate) at x > 0.
double log_gamma_density(double x, double shape, double rate);

/// Relative ridge added to R(theta) before any determinant or inverse.
inline constexpr double kPenaltyFloor = 1e-10;

/// Prior N(V1^{-1} v1, V1^{-1}) of the coefficients, canonical order, with
/// V1 = gamma R_f (+ kappa H^T H) and v1 = -gamma r (+ kappa H^T v), where
/// R_f = R + floor * I.
struct PriorComponents {
    Eigen::SparseMatrix<double> V1;
    Eigen::VectorXd v1;
    double logdet_V1 = 0.0;
    double floor = 0.0;          // ridge added to R
    bool extra_floor = false;    // V1 needed more than the standard floor
};

PriorComponents prior_components(const PenaltyQuadratic& q, double gamma, const ConstraintSet* cons = nullptr,
                                 std::optional<double> kappa = std::nullopt);

/// One exact draw from N(V2^{-1} v2, V2^{-1}) with V2 = tau B^T B + V1 and
/// v2 = tau B^T zeta + v1 (canonical order).
Eigen::VectorXd draw_coefficients(const PriorComponents& prior, const DesignMatrix& design,
                                  const Eigen::VectorXd& zeta, double tau, std::mt19937_64& rng);

/// Mean V2^{-1} v2 of the coefficient conditional.
Eigen::VectorXd coefficient_mean(const PriorComponents& prior, const DesignMatrix& design, const Eigen::VectorXd& zeta,
                                 double tau);

struct GammaParams {
    double shape = 0.0;
    double rate = 0.0;
};

struct PrecisionDraw {
    double tau = 0.0;
    double gamma = 0.0;
    GammaParams tau_conditional;
    GammaParams gamma_conditional;
};

/// tau | c ~ G(N/2 + a_tau, RSS/2 + b_tau) and, without conditions,
/// gamma | theta, c ~ G(M/2 + a_gamma, (c^T R_f c + 2 c^T r + r^T R_f^{-1} r)/2 + b_gamma).
/// `c` is canonical. Throws when the problem carries conditions (the gamma
/// conditional has no closed form there).
PrecisionDraw draw_precisions(const SmoothingProblem& problem, std::span<const double> theta,
                              const Eigen::VectorXd& c, const Hyperparams& hyper, std::mt19937_64& rng);

/// Draw from a gamma distribution with the given shape and rate.
double draw_gamma(const GammaParams& g, std::mt19937_64& rng);

/// Evaluates the coefficient-marginalised log posterior (up to a constant).
/// With conditions in ls mode the soft-condition prior term enters V1, v1
/// and, when kappa is random, its gamma prior.
class MarginalPosterior {
public:
    MarginalPosterior(const SmoothingProblem& problem, Hyperparams hyper, bool use_conditions,
                      bool kappa_random = false);

    struct Terms {
        double value = -std::numeric_limits<double>::infinity();
        double logdet_V1 = 0.0, logdet_V2 = 0.0;
        // tau zeta^T zeta - v2^T V2^{-1} v2 + v1^T V1^{-1} v1, evaluated as
        // tau RSS(m) + (m - m1)^T V1 (m - m1) with m = V2^{-1} v2, m1 = V1^{-1} v1
        double rss = 0.0, prior_quad = 0.0;
        bool extra_floor = false;
    };

    /// -infinity on factorisation failure or outside the prior support.
    Terms evaluate(std::span<const double> theta, double gamma, double tau, double kappa = 0.0);
    double operator()(std::span<const double> theta, double gamma, double tau, double kappa = 0.0) {
        return evaluate(theta, gamma, tau, kappa).value;
    }

    /// Log joint density of (c, theta, gamma, tau[, kappa]); c canonical.
    double log_joint(const Eigen::VectorXd& c, std::span<const double> theta, double gamma, double tau,
                     double kappa = 0.0);
    /// log N(c; V2^{-1} v2, V2^{-1}) without the 2 pi constant; c canonical.
    double log_conditional(const Eigen::VectorXd& c, std::span<const double> theta, double gamma, double tau,
                           double kappa = 0.0);

    [[nodiscard]] const Hyperparams& hyper() const noexcept { return hyper_; }
    [[nodiscard]] bool uses_conditions() const noexcept { return use_conditions_; }
    [[nodiscard]] bool kappa_random() const noexcept { return kappa_random_; }

private:
    const SmoothingProblem* problem_;
    Hyperparams hyper_;
    bool use_conditions_;
    bool kappa_random_;
    BandMatrix R_, V1_, V2_;
    Eigen::VectorXd r_, v1_, v2_;
    double l_ = 0.0;
    BandCholesky chol1_, chol2_;

    bool build(std::span<const double> theta, double gamma, double tau, double kappa, bool& extra_floor);
    double prior_terms(std::span<const double> theta, double gamma, double tau, double kappa) const;
};

double log_marginal_posterior(const SmoothingProblem& problem, std::span<const double> theta, double gamma,
                              double tau, const Hyperparams& hyper, bool use_conditions = false,
                              double kappa = 0.0, bool kappa_random = false);

struct ChainSettings {
    int iterations = 20000;
    int burn_in = 5000;
    int thin = 1;
    std::uint64_t seed = 1;
    ConstraintMode mode = ConstraintMode::none;  // none or ls
    double kappa = 1e6;
    bool kappa_random = false;
    bool init_from_fit = true;  // start at a frequentist fit
    std::vector<double> theta_init;  // used when init_from_fit is false
    double gamma_init = 1.0;
    double tau_init = 1.0;
    double target_low = 0.30;
    double target_high = 0.40;
    double min_acceptance = 0.05;
    FitSettings fit;  // for the initial frequentist fit

    void validate() const;
};

struct PosteriorChain {
    std::vector<std::string> names;  // theta names, then gamma, tau[, kappa]
    Eigen::MatrixXd draws;           // kept iterations x names
    std::vector<double> log_post;
    double acceptance_theta = 0.0;
    double acceptance_precision = 0.0;
    double theta_scale = 0.0;
    double precision_scale = 0.0;
    ChainSettings settings;
    bool ridge_floor = false;
    std::vector<double> init;

    [[nodiscard]] std::vector<double> column(int k) const;
};

PosteriorChain run_chain(const SmoothingProblem& problem, const Hyperparams& hyper, const ChainSettings& settings);

/// Gibbs sampler that keeps c: c | ., tau | c, gamma | c at fixed theta
/// (no conditions). Columns: gamma, tau.
PosteriorChain run_gibbs(const SmoothingProblem& problem, std::span<const double> theta, const Hyperparams& hyper,
                         const ChainSettings& settings);

/// Shortest interval containing ceil(level * n) sorted draws.
std::pair<double, double> hpd_interval(std::vector<double> draws, double level);

/// Batch-means Monte Carlo standard error of the mean.
double mcse_batch_means(const std::vector<double>& draws);

struct ParameterSummary {
    std::string name;
    double mean = 0.0, sd = 0.0, mcse = 0.0;
    double hpd80_lo = 0.0, hpd80_hi = 0.0, hpd95_lo = 0.0, hpd95_hi = 0.0;
};

std::vector<ParameterSummary> summarize(const PosteriorChain& chain);

/// One row per kept draw, columns named by parameter.
void write_chain(const PosteriorChain& chain, const std::string& path, const std::string& header_comment = "");

}  // namespace pspde
