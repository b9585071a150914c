#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "pspde/bayes.hpp"
#include "pspde/freq.hpp"
#include "pspde/model.hpp"
#include "pspde/pde.hpp"

namespace pspde {

struct OptionQuote {
    double spot = 0.0;
    double strike = 0.0;
    double tau = 0.0;  // time to maturity in years
    double rate = 0.0;
    std::optional<double> ivol;
    double price = 0.0;
};

/// raw: (S, time to maturity), prices C. scaled: (log(S/E), time to maturity), prices C/E.
enum class Coordinates { raw, scaled };

const char* to_string(Coordinates c);

/// First axis is S (raw) or log-moneyness (scaled); second is time to maturity.
struct BsDomain {
    double x_lo = -0.5;
    double x_hi = 0.5;
    double t_lo = 0.0;
    double t_hi = 1.0;
};

struct BsProblem {
    PdeSpec pde;
    TensorBasis basis;
    std::vector<Condition> conditions;
    ConstraintSet constraints;
    BsDomain domain;
    Coordinates coordinates = Coordinates::scaled;
    double rate = 0.0;
    double strike_ref = 1.0;
};

/// Black-Scholes operator in time to maturity with theta = sigma:
/// raw     -C_t + r S C_S + sigma^2/2 S^2 C_SS - r C = 0
/// scaled  -c_t + r c_m + sigma^2/2 (c_mm - c_m) - r c = 0
/// Conditions: payoff at t = 0, zero on the low edge, discounted intrinsic
/// value on the high edge, sampled on the knot grid of each face. Payoff rows
/// closer than `strike_gap` knot spans to the strike are left out: a C^2
/// spline cannot follow the kink, and pinning it there drags sigma towards 0.
BsProblem bs_spec(double rate, const BsDomain& domain, double strike_ref, Coordinates coordinates,
                  int n_interior = 25, int degree = 3, double strike_gap = 1.0);

/// European call price; tau = 0 gives the payoff.
double bs_price_closed_form(double spot, double strike, double tau, double rate, double sigma);

/// Reads `spot,strike,tau,rate,ivol,price` (ivol column optional, cells may
/// be empty). Invalid rows are skipped and described in `diagnostics`.
std::vector<OptionQuote> ingest_options(const std::string& path, std::vector<std::string>* diagnostics = nullptr);

void write_options(const std::vector<OptionQuote>& quotes, const std::string& path);

struct SyntheticQuotesSpec {
    double sigma = 0.10;
    double rate = 0.05;
    double spot = 1.0;
    double m_lo = -0.4, m_hi = 0.4;
    int n_m = 40;
    double t_lo = 0.05, t_hi = 1.0;
    int n_t = 20;
    double noise_sd = 0.001;  // absolute, on the price
};

/// Closed-form prices on a moneyness x maturity grid plus Gaussian noise;
/// quotes whose noisy price is not positive are dropped.
std::vector<OptionQuote> synthetic_quotes(const SyntheticQuotesSpec& spec, std::uint64_t seed);

enum class CalibrationMethod { freq, bayes };

struct CalibrationSettings {
    Coordinates coordinates = Coordinates::scaled;
    std::optional<BsDomain> domain;  // default: x in [-0.5, 0.5] (scaled), t in [0, max tau]
    std::optional<double> rate;      // default: mean quote rate
    int n_interior = 25;
    int degree = 3;
    double strike_gap = 1.0;
    CalibrationMethod method = CalibrationMethod::freq;
    ConstraintMode mode = ConstraintMode::ls;
    double kappa = 1e6;
    double sigma0 = 0.2;
    FitSettings fit;
    BootstrapSettings boot;
    ChainSettings chain;
    Hyperparams hyper;  // empty theta prior: uniform(0, 5) on sigma
    double level = 0.95;
    QuadratureRule quadrature;
};

struct CalibrationResult {
    double sigma_hat = 0.0;
    double lo = 0.0;
    double hi = 0.0;
    double level = 0.95;
    CalibrationMethod method = CalibrationMethod::freq;
    double gamma_hat = 0.0;
    double tau_hat = 0.0;
    Eigen::VectorXd c_hat;  // canonical; posterior-mean coefficients for bayes
    BsProblem problem;
    std::optional<FreqFit> fit;
    std::optional<BootstrapResult> bootstrap;
    std::optional<PosteriorChain> chain;
    int n_quotes = 0;
};

/// Maps quotes to the model coordinates: points (N x 2) and responses.
Dataset quotes_dataset(const std::vector<OptionQuote>& quotes, Coordinates coordinates, double strike_ref);

CalibrationResult calibrate_volatility(const std::vector<OptionQuote>& quotes, const CalibrationSettings& settings);

}  // namespace pspde
