#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>

#include "pspde/error.hpp"
#include "pspde/finance.hpp"

using namespace pspde;

namespace {

std::string temp_file(const std::string& name, const std::string& body) {
    const std::string path = ::testing::TempDir() + name;
    std::ofstream(path) << body;
    return path;
}

// condition row value for the first row with the given label at x
std::optional<double> row_value(const BsProblem& bs, const std::string& label, double x0, double x1) {
    for (int i = 0; i < bs.constraints.rows(); ++i) {
        const auto& m = bs.constraints.meta[static_cast<std::size_t>(i)];
        if (m.label == label && std::abs(m.x[0] - x0) < 1e-9 && std::abs(m.x[1] - x1) < 1e-9)
            return bs.constraints.v[i];
    }
    return std::nullopt;
}

CalibrationSettings quick_settings(int boot = 20) {
    CalibrationSettings s;
    s.boot.replicates = boot;
    s.boot.seed = 3;
    return s;
}

double adherence(const CalibrationResult& r) {
    const ConstraintSet& c = r.problem.constraints;
    return (c.H * r.c_hat - c.v).cwiseAbs().maxCoeff();
}

}  // namespace

TEST(BsSpec, RawTermsAndMultipliers) {
    const BsProblem bs = bs_spec(0.05, {0.0, 2.0, 0.0, 1.0}, 1.0, Coordinates::raw);
    ASSERT_EQ(bs.pde.terms.size(), 4u);
    const std::vector<double> sigma{0.1};
    const PdeTerm& diff = bs.pde.terms[2];
    EXPECT_NEAR(diff.multiplier.value(sigma), 0.005, 1e-15);
    EXPECT_EQ(diff.deriv_orders, (std::vector<int>{2, 0}));
    ASSERT_FALSE(diff.coeff_polys.empty());
    EXPECT_EQ(diff.coeff_polys[0].coeffs, (std::vector<double>{0.0, 0.0, 1.0}));
    EXPECT_NEAR(bs.pde.terms[1].multiplier.value(sigma), 0.05, 1e-15);
    EXPECT_NEAR(bs.pde.terms[3].multiplier.value(sigma), -0.05, 1e-15);
    // time to maturity flips the sign of the time derivative
    EXPECT_EQ(std::abs(bs.pde.terms[0].multiplier.value(sigma)), 1.0);
    EXPECT_EQ(bs.basis.dim(0).size(), 29);
    EXPECT_EQ(bs.basis.dim(1).size(), 29);
}

TEST(BsSpec, TerminalRows) {
    const double E = 1.5;
    const BsProblem bs = bs_spec(0.05, {0.0, 3.0, 0.0, 1.0}, E, Coordinates::raw, 25, 3, 0.0);
    const auto at_strike = row_value(bs, "terminal payoff", E, 0.0);
    ASSERT_TRUE(at_strike.has_value());
    EXPECT_EQ(*at_strike, 0.0);
    const auto at_2e = row_value(bs, "terminal payoff", 2 * E, 0.0);
    ASSERT_TRUE(at_2e.has_value());
    EXPECT_NEAR(*at_2e, E, 1e-12);
    // default gap leaves the strike row out
    const BsProblem gapped = bs_spec(0.05, {0.0, 3.0, 0.0, 1.0}, E, Coordinates::raw);
    EXPECT_FALSE(row_value(gapped, "terminal payoff", E, 0.0).has_value());
    EXPECT_EQ(gapped.constraints.rows() + 1, bs.constraints.rows());
}

TEST(BsSpec, EdgeRows) {
    const double r = 0.05, E = 1.0;
    const BsProblem bs = bs_spec(r, {0.0, 2.0, 0.0, 1.0}, E, Coordinates::raw);
    for (int i = 0; i < bs.constraints.rows(); ++i) {
        const auto& m = bs.constraints.meta[static_cast<std::size_t>(i)];
        const double v = bs.constraints.v[i];
        if (m.label == "low edge") {
            EXPECT_EQ(m.x[0], 0.0);
            EXPECT_EQ(v, 0.0);
        } else if (m.label == "high edge") {
            EXPECT_EQ(m.x[0], 2.0);
            EXPECT_NEAR(v, 2.0 - E * std::exp(-r * m.x[1]), 1e-14);
        }
    }
    const BsProblem sc = bs_spec(r, {-0.5, 0.5, 0.0, 1.0}, 1.0, Coordinates::scaled);
    int high = 0;
    for (int i = 0; i < sc.constraints.rows(); ++i) {
        const auto& m = sc.constraints.meta[static_cast<std::size_t>(i)];
        if (m.label != "high edge") continue;
        ++high;
        EXPECT_EQ(m.x[0], 0.5);
        EXPECT_NEAR(sc.constraints.v[i], std::exp(0.5) - std::exp(-r * m.x[1]), 1e-14);
    }
    EXPECT_GT(high, 20);
}

TEST(BsSpec, Errors) {
    EXPECT_THROW(bs_spec(0.05, {1.5, 3.0, 0.0, 1.0}, 1.0, Coordinates::raw), ValidationError);
    EXPECT_THROW(bs_spec(0.05, {0.1, 0.5, 0.0, 1.0}, 1.0, Coordinates::scaled), ValidationError);
    EXPECT_THROW(bs_spec(0.05, {0.0, 0.0, 0.0, 1.0}, 1.0, Coordinates::raw), ValidationError);
    EXPECT_THROW(bs_spec(-0.01, {0.0, 2.0, 0.0, 1.0}, 1.0, Coordinates::raw), ValidationError);
    EXPECT_THROW(bs_spec(0.05, {0.0, 2.0, 0.0, 1.0}, 1.0, Coordinates::raw, 25, 3, -1.0), ValidationError);
}

TEST(ClosedForm, Limits) {
    const double E = 1.0, r = 0.05, s = 0.2;
    EXPECT_NEAR(bs_price_closed_form(1.3, E, 0.0, r, s), 0.3, 1e-15);
    EXPECT_EQ(bs_price_closed_form(0.7, E, 0.0, r, s), 0.0);
    EXPECT_NEAR(bs_price_closed_form(1.3, E, 1e-10, r, s), 0.3, 1e-9);
    const double T = 0.5;
    EXPECT_NEAR(bs_price_closed_form(20.0, E, T, r, s), 20.0 - E * std::exp(-r * T), 1e-12);
    EXPECT_LT(bs_price_closed_form(0.2, E, T, r, s), 1e-12);
    // textbook value: S = 100, E = 100, T = 1, r = 0.05, sigma = 0.2
    EXPECT_NEAR(bs_price_closed_form(100.0, 100.0, 1.0, 0.05, 0.2), 10.450583572185565, 1e-9);
}

TEST(ClosedForm, SatisfiesRawOperator) {
    const double E = 1.0, r = 0.05, s = 0.1;
    const BsProblem bs = bs_spec(r, {0.0, 2.0, 0.0, 1.0}, E, Coordinates::raw);
    const std::vector<double> theta{s};
    double worst = 0.0;
    for (double S = 0.7; S <= 1.5; S += 0.1)
        for (double T = 0.2; T <= 0.9; T += 0.15) {
            const double h = 1e-4;
            const auto C = [&](double a, double b) { return bs_price_closed_form(a, E, b, r, s); };
            const std::vector<double> x{S, T};
            const auto deriv = [&](std::span<const int> k) {
                if (k[0] == 2) return (C(S + h, T) - 2 * C(S, T) + C(S - h, T)) / (h * h);
                if (k[0] == 1) return (C(S + h, T) - C(S - h, T)) / (2 * h);
                if (k[1] == 1) return (C(S, T + h) - C(S, T - h)) / (2 * h);
                return C(S, T);
            };
            // direct operator, independent of the spec terms
            const double direct = -deriv(std::vector<int>{0, 1}) + r * S * deriv(std::vector<int>{1, 0}) +
                                  0.5 * s * s * S * S * deriv(std::vector<int>{2, 0}) - r * C(S, T);
            worst = std::max(worst, std::abs(direct));
            EXPECT_NEAR(bs.pde.residual(x, theta, deriv), direct, 1e-10);
        }
    EXPECT_LT(worst, 1e-4);
}

TEST(ClosedForm, SatisfiesScaledOperator) {
    const double r = 0.05, s = 0.1, h = 1e-4;
    const BsProblem bs = bs_spec(r, {-0.5, 0.5, 0.0, 1.0}, 1.0, Coordinates::scaled);
    const std::vector<double> theta{s};
    // c(m, t) = C(S = e^m, E = 1, t)
    const auto c = [&](double m, double t) { return bs_price_closed_form(std::exp(m), 1.0, t, r, s); };
    double worst = 0.0;
    for (double m = -0.3; m <= 0.3; m += 0.07)
        for (double t = 0.2; t <= 0.9; t += 0.15) {
            const std::vector<double> x{m, t};
            const auto deriv = [&](std::span<const int> k) {
                if (k[0] == 2) return (c(m + h, t) - 2 * c(m, t) + c(m - h, t)) / (h * h);
                if (k[0] == 1) return (c(m + h, t) - c(m - h, t)) / (2 * h);
                if (k[1] == 1) return (c(m, t + h) - c(m, t - h)) / (2 * h);
                return c(m, t);
            };
            worst = std::max(worst, std::abs(bs.pde.residual(x, theta, deriv)));
        }
    EXPECT_LT(worst, 1e-4);
}

TEST(Ingest, WellFormedFile) {
    std::string body = "spot,strike,tau,rate,ivol,price\n";
    for (int k = 0; k < 2800; ++k) {
        const double E = 0.8 + 0.4 * (k % 40) / 39.0, T = 0.05 + 0.9 * (k / 40) / 69.0;
        body += "1," + std::to_string(E) + "," + std::to_string(T) + ",0.05,0.1," +
                std::to_string(0.01 + bs_price_closed_form(1.0, E, T, 0.05, 0.1)) + "\n";
    }
    const std::string path = temp_file("quotes_ok.csv", body);
    std::vector<std::string> diag;
    const auto quotes = ingest_options(path, &diag);
    EXPECT_EQ(quotes.size(), 2800u);
    EXPECT_TRUE(diag.empty());
    EXPECT_TRUE(quotes[0].ivol.has_value());
    std::remove(path.c_str());
}

TEST(Ingest, SkipsInvalidRowsWithLineNumbers) {
    std::string body = "price,spot,strike,tau,rate\n";  // any column order, no ivol
    for (int k = 0; k < 40; ++k) body += "0.1,1,1,0.5,0.05\n";
    body += "-0.1,1,1,0.5,0.05\n";  // line 42
    const std::string path = temp_file("quotes_skip.csv", body);
    std::vector<std::string> diag;
    const auto quotes = ingest_options(path, &diag);
    EXPECT_EQ(quotes.size(), 40u);
    ASSERT_EQ(diag.size(), 1u);
    EXPECT_NE(diag[0].find("42"), std::string::npos);
    EXPECT_FALSE(quotes[0].ivol.has_value());
    std::remove(path.c_str());
}

TEST(Ingest, HardErrors) {
    const std::string empty = temp_file("quotes_empty.csv", "");
    EXPECT_THROW(ingest_options(empty), IoError);
    const std::string missing = temp_file("quotes_missing.csv", "spot,strike,tau,price\n1,1,0.5,0.1\n");
    EXPECT_THROW(ingest_options(missing), IoError);
    std::string body = "spot,strike,tau,rate,ivol,price\n";
    for (int k = 0; k < 18; ++k) body += "1,1,0.5,0.05,,0.1\n";
    body += "1,1,-0.5,0.05,,0.1\n1,-1,0.5,0.05,,0.1\n";  // 10% bad
    const std::string many = temp_file("quotes_many_bad.csv", body);
    EXPECT_THROW(ingest_options(many), IoError);
    EXPECT_THROW(ingest_options(::testing::TempDir() + "no_such_file.csv"), IoError);
    for (const auto& p : {empty, missing, many}) std::remove(p.c_str());
}

TEST(Ingest, RoundTrip) {
    SyntheticQuotesSpec spec;
    spec.n_m = 5;
    spec.n_t = 4;
    const auto q = synthetic_quotes(spec, 1);
    const std::string path = ::testing::TempDir() + "quotes_rt.csv";
    write_options(q, path);
    const auto back = ingest_options(path);
    ASSERT_EQ(back.size(), q.size());
    for (std::size_t i = 0; i < q.size(); ++i) {
        EXPECT_EQ(back[i].price, q[i].price);
        EXPECT_EQ(back[i].strike, q[i].strike);
        EXPECT_EQ(back[i].tau, q[i].tau);
    }
    std::remove(path.c_str());
}

TEST(Synthetic, GridAndNoise) {
    SyntheticQuotesSpec spec;
    spec.noise_sd = 0.0;
    const auto clean = synthetic_quotes(spec, 1);
    EXPECT_LE(clean.size(), 800u);
    EXPECT_GT(clean.size(), 700u);
    for (const auto& q : clean)
        EXPECT_EQ(q.price, bs_price_closed_form(q.spot, q.strike, q.tau, q.rate, 0.1));
    spec.noise_sd = 0.001;
    const auto a = synthetic_quotes(spec, 7);
    const auto b = synthetic_quotes(spec, 7);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].price, b[i].price);
}

TEST(Calibrate, SyntheticRecovery) {
    const auto quotes = synthetic_quotes(SyntheticQuotesSpec{}, 7);
    const CalibrationResult r = calibrate_volatility(quotes, quick_settings());
    EXPECT_NEAR(r.sigma_hat, 0.10, 0.005);
    EXPECT_LT(r.lo, r.hi);
    EXPECT_LE(r.lo, r.sigma_hat);
    EXPECT_GE(r.hi, r.sigma_hat);
    EXPECT_LE(adherence(r), 1e-3 * (1.0 + r.problem.constraints.v.cwiseAbs().maxCoeff()));
}

// direct fit without the bootstrap
static FreqFit fit_quotes(const BsProblem& bs, const std::vector<OptionQuote>& quotes, ConstraintMode mode) {
    const Dataset d = quotes_dataset(quotes, Coordinates::scaled, 1.0);
    std::optional<ConstraintSet> cons;
    if (mode != ConstraintMode::none) cons = bs.constraints;
    const SmoothingProblem P(bs.basis, bs.pde, d, cons);
    FitSettings fs;
    fs.theta0 = {0.2};
    fs.mode = mode;
    FreqFit f = fit_frequentist(P, fs);
    f.theta_hat[0] = std::abs(f.theta_hat[0]);
    return f;
}

static FreqFit noise_free_fit(const BsProblem& bs, double t_lo, ConstraintMode mode) {
    SyntheticQuotesSpec spec;
    spec.noise_sd = 0.0;
    spec.t_lo = t_lo;
    return fit_quotes(bs, synthetic_quotes(spec, 1), mode);
}

TEST(Calibrate, NoiseFreeRecoveryAwayFromExpiry) {
    // domain clear of the payoff kink at t = 0
    const BsProblem bs = bs_spec(0.05, {-0.5, 0.5, 0.25, 1.0}, 1.0, Coordinates::scaled);
    const FreqFit f = noise_free_fit(bs, 0.3, ConstraintMode::none);
    EXPECT_TRUE(f.converged);
    EXPECT_NEAR(f.theta_hat[0], 0.10, 1e-3 * 0.10);
}

TEST(Calibrate, NoiseFreeDefaultDomain) {
    // the kink at (0, 0) biases sigma downwards by about half a percent
    const BsProblem bs = bs_spec(0.05, {-0.5, 0.5, 0.0, 1.0}, 1.0, Coordinates::scaled);
    const FreqFit f = noise_free_fit(bs, 0.05, ConstraintMode::ls);
    EXPECT_TRUE(f.converged);
    EXPECT_LT(f.theta_hat[0], 0.10);
    EXPECT_GT(f.theta_hat[0], 0.099);

    // price non-increasing in strike on the quote grid, C(E) = E c(log(1/E), t)
    SyntheticQuotesSpec spec;
    const std::vector<int> d0{0, 0};
    for (int j = 0; j < spec.n_t; ++j) {
        const double t = spec.t_lo + (spec.t_hi - spec.t_lo) * j / (spec.n_t - 1);
        Eigen::MatrixXd pts(spec.n_m, 2);
        std::vector<double> E(static_cast<std::size_t>(spec.n_m));
        for (int i = 0; i < spec.n_m; ++i) {
            const double m = spec.m_hi - (spec.m_hi - spec.m_lo) * i / (spec.n_m - 1);
            E[static_cast<std::size_t>(i)] = std::exp(-m);
            pts(i, 0) = m;
            pts(i, 1) = t;
        }
        const Eigen::VectorXd c = tensor_design(bs.basis, pts, d0).B * f.c_hat;
        for (int i = 1; i < spec.n_m; ++i) {
            const auto k = static_cast<std::size_t>(i);
            EXPECT_LE(E[k] * c[i], E[k - 1] * c[i - 1] + 1e-4 * E[k]) << "t " << t << " E " << E[k];
        }
    }
}

TEST(Calibrate, LagrangeAdherence) {
    const BsProblem bs = bs_spec(0.05, {-0.5, 0.5, 0.0, 1.0}, 1.0, Coordinates::scaled);
    const FreqFit f = fit_quotes(bs, synthetic_quotes(SyntheticQuotesSpec{}, 7), ConstraintMode::lagrange);
    const double viol = (bs.constraints.H * f.c_hat - bs.constraints.v).cwiseAbs().maxCoeff();
    EXPECT_LE(viol, 1e-8 * (1.0 + bs.constraints.v.cwiseAbs().maxCoeff()));
    EXPECT_NEAR(f.theta_hat[0], 0.10, 0.005);
}

TEST(Calibrate, BayesianMode) {
    const auto quotes = synthetic_quotes(SyntheticQuotesSpec{}, 7);
    CalibrationSettings s;
    s.method = CalibrationMethod::bayes;
    s.chain.iterations = 1500;
    s.chain.burn_in = 500;
    const CalibrationResult r = calibrate_volatility(quotes, s);
    EXPECT_NEAR(r.sigma_hat, 0.10, 0.005);
    EXPECT_LT(r.lo, r.hi);
    ASSERT_TRUE(r.chain.has_value());
    EXPECT_EQ(r.chain->names.front(), "sigma");
}

TEST(Calibrate, InputErrors) {
    SyntheticQuotesSpec spec;
    spec.n_m = 5;
    spec.n_t = 5;
    EXPECT_THROW(calibrate_volatility(synthetic_quotes(spec, 1), CalibrationSettings{}), ValidationError);
    const auto quotes = synthetic_quotes(SyntheticQuotesSpec{}, 7);
    CalibrationSettings s;
    s.domain = BsDomain{-0.2, 0.2, 0.0, 1.0};
    EXPECT_THROW(calibrate_volatility(quotes, s), ValidationError);
    CalibrationSettings raw;
    raw.coordinates = Coordinates::raw;
    EXPECT_THROW(calibrate_volatility(quotes, raw), ValidationError);  // several strikes
}
