#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "pspde/error.hpp"
#include "pspde/freq.hpp"
#include "pspde/kernels.hpp"
#include "pspde/optim.hpp"
#include "pspde/sim.hpp"

using namespace pspde;

namespace {

DesignMatrix identity_design(int n) {
    DesignMatrix d;
    d.B.resize(n, n);
    d.B.setIdentity();
    return d;
}

PenaltyQuadratic identity_penalty(int n) {
    PenaltyQuadratic q;
    q.R.resize(n, n);
    q.R.setIdentity();
    q.r = Eigen::VectorXd::Zero(n);
    return q;
}

// small diffusion instance: 10 x 8 basis, 20 x 15 grid
struct Small {
    StudyConfig cfg;
    TensorBasis basis;
    ConstraintSet cons;
    Dataset data;
    PenaltyQuadratic q;
    std::vector<double> theta{0.5, 1.5};

    explicit Small(double sd = 0.01, int rep = 0) {
        cfg.basis = {{-3.0, 3.0, 3, 10, {}}, {0.0, 1.0, 3, 8, {}}};
        cfg.grid = {{-3.0, 3.0, 20}, {0.0, 1.0, 15}};
        cfg.noise_sd = {sd};
        basis = cfg.tensor_basis();
        cons = build_constraints(diffusion_conditions(basis), basis);
        data = simulate_dataset(cfg, 0, rep);
        q = assemble_penalty(diffusion_pde(), basis, theta, QuadratureRule{});
    }
    [[nodiscard]] DesignMatrix design() const {
        const std::vector<int> zero{0, 0};
        return tensor_design(basis, *data.grid, zero);
    }
};

// full-size diffusion problem shared by the slower tests
const SmoothingProblem& diffusion_problem() {
    static const SmoothingProblem p = [] {
        StudyConfig cfg;
        const TensorBasis basis = cfg.tensor_basis();
        return SmoothingProblem(basis, diffusion_pde(), simulate_dataset(cfg, 0, 0),
                                build_constraints(diffusion_conditions(basis), basis));
    }();
    return p;
}

double J(const DesignMatrix& d, const Eigen::VectorXd& z, const PenaltyQuadratic& q, double tau, double gamma,
         const Eigen::VectorXd& c) {
    const double N = static_cast<double>(z.size());
    return 0.5 * N * std::log(tau) - 0.5 * tau * (z - d.B * c).squaredNorm() - 0.5 * gamma * penalty_value(q, c);
}

}  // namespace

TEST(Ridge, ScalarCase) {
    const Eigen::VectorXd z = (Eigen::VectorXd(4) << 1.0, -2.0, 0.5, 3.0).finished();
    const Eigen::VectorXd c = solve_ridge(identity_design(4), z, identity_penalty(4), 3.0, 2.0);
    for (int i = 0; i < 4; ++i) EXPECT_NEAR(c[i], 3.0 * z[i] / 5.0, 1e-14);
}

TEST(Ridge, MatchesDenseSolve) {
    Small s;
    const DesignMatrix d = s.design();
    const Eigen::MatrixXd B(d.B);
    const Eigen::MatrixXd R(s.q.R);
    const double tau = 1e4, gamma = 1e5;
    const Eigen::MatrixXd A = tau * B.transpose() * B + gamma * R;
    const Eigen::VectorXd ref = A.ldlt().solve(tau * B.transpose() * s.data.zeta - gamma * s.q.r);
    const Eigen::VectorXd c = solve_ridge(d, s.data.zeta, s.q, tau, gamma);
    EXPECT_LT((c - ref).norm(), 1e-8 * ref.norm());
}

TEST(Ridge, GammaZeroSquareDesignInterpolates) {
    // design = basis evaluated at Greville-like points: square and invertible
    const TensorBasis basis({equidistant_basis(0.0, 1.0, 2, 6)});
    Eigen::MatrixXd pts(6, 1);
    pts << 0.0, 0.15, 0.35, 0.65, 0.85, 1.0;
    const std::vector<int> zero{0};
    const DesignMatrix d = tensor_design(basis, pts, zero);
    const Eigen::VectorXd z = (Eigen::VectorXd(6) << 1, 2, 0, -1, 3, 2).finished();
    PenaltyQuadratic q = identity_penalty(6);
    const Eigen::VectorXd c1 = solve_ridge(d, z, q, 1.0, 0.0);
    const Eigen::VectorXd c2 = solve_ridge(d, z, q, 1e4, 0.0);
    EXPECT_LT((d.B * c1 - z).norm(), 1e-10);
    EXPECT_LT((c1 - c2).norm(), 1e-10);
}

TEST(Ridge, InnerSolveMaximisesJ) {
    Small s;
    const DesignMatrix d = s.design();
    const double tau = 1e4, gamma = 1e5;
    const Eigen::VectorXd c = solve_ridge(d, s.data.zeta, s.q, tau, gamma);
    const double j0 = J(d, s.data.zeta, s.q, tau, gamma, c);
    std::mt19937_64 rng(3);
    std::normal_distribution<double> nd;
    for (int k = 0; k < 50; ++k) {
        Eigen::VectorXd e(c.size());
        for (Eigen::Index i = 0; i < e.size(); ++i) e[i] = nd(rng);
        e *= 1e-4 / e.norm();
        EXPECT_LE(J(d, s.data.zeta, s.q, tau, gamma, c + e), j0);
    }
}

TEST(Ridge, RejectsBadInputs) {
    const Eigen::VectorXd z = Eigen::VectorXd::Ones(4);
    EXPECT_THROW(solve_ridge(identity_design(4), z, identity_penalty(4), 0.0, 1.0), ValidationError);
    EXPECT_THROW(solve_ridge(identity_design(4), z, identity_penalty(3), 1.0, 1.0), ValidationError);
    EXPECT_THROW(solve_ridge(identity_design(4), Eigen::VectorXd::Ones(3), identity_penalty(4), 1.0, 1.0),
                 ValidationError);
}

TEST(LeastSquaresConditions, KappaZeroIsRidge) {
    Small s;
    const DesignMatrix d = s.design();
    const Eigen::VectorXd a = solve_ridge(d, s.data.zeta, s.q, 1e4, 1e5);
    const Eigen::VectorXd b = solve_ls_constrained(d, s.data.zeta, s.q, 1e4, 1e5, s.cons, 0.0);
    EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-12 * (1.0 + a.cwiseAbs().maxCoeff()));
}

TEST(LeastSquaresConditions, AlreadyFeasibleUnchanged) {
    Small s;
    const DesignMatrix d = s.design();
    const Eigen::VectorXd a = solve_ridge(d, s.data.zeta, s.q, 1e4, 1e5);
    ConstraintSet c = s.cons;
    c.v = c.H * a;
    const Eigen::VectorXd b = solve_ls_constrained(d, s.data.zeta, s.q, 1e4, 1e5, c, 1e6);
    EXPECT_LT((a - b).norm(), 1e-10 * (1.0 + a.norm()));
}

TEST(LeastSquaresConditions, LargeKappaNearlyFeasible) {
    const SmoothingProblem& P = diffusion_problem();
    const std::vector<double> th{0.5, 1.5};
    const PenaltyQuadratic q = P.penalty().assemble(th);
    const Eigen::VectorXd c = solve_ls_constrained(P.design(), P.zeta(), q, 1e4, 1e6, P.constraints(), 1e6);
    const auto& v = P.constraints().v;
    EXPECT_LE((P.constraints().H * c - v).cwiseAbs().maxCoeff(), 1e-3 * (1.0 + v.cwiseAbs().maxCoeff()));
}

TEST(Lagrange, ExactFeasibility) {
    Small s;
    const auto [c, w] = solve_lagrange(s.design(), s.data.zeta, s.q, 1e4, 1e5, s.cons);
    EXPECT_LE((s.cons.H * c - s.cons.v).cwiseAbs().maxCoeff(), 1e-8 * (1.0 + s.cons.v.cwiseAbs().maxCoeff()));
    EXPECT_EQ(w.size(), s.cons.rows());
}

TEST(Lagrange, MatchesDenseKkt) {
    Small s;
    const DesignMatrix d = s.design();
    const Eigen::MatrixXd B(d.B), R(s.q.R), H(s.cons.H);
    const double tau = 1e4, gamma = 1e5;
    const auto n = B.cols(), k = H.rows();
    Eigen::MatrixXd K = Eigen::MatrixXd::Zero(n + k, n + k);
    K.topLeftCorner(n, n) = tau * B.transpose() * B + gamma * R;
    K.topRightCorner(n, k) = H.transpose();
    K.bottomLeftCorner(k, n) = H;
    Eigen::VectorXd rhs(n + k);
    rhs << tau * B.transpose() * s.data.zeta - gamma * s.q.r, s.cons.v;
    const Eigen::VectorXd ref = K.fullPivLu().solve(rhs);
    const auto [c, w] = solve_lagrange(d, s.data.zeta, s.q, tau, gamma, s.cons);
    EXPECT_LT((c - ref.head(n)).norm(), 1e-7 * ref.head(n).norm());
    EXPECT_LT((w - ref.tail(k)).norm(), 1e-6 * (1.0 + ref.tail(k).norm()));
}

TEST(Lagrange, FeasibleOptimumHasZeroMultipliers) {
    Small s;
    const DesignMatrix d = s.design();
    const Eigen::VectorXd a = solve_ridge(d, s.data.zeta, s.q, 1e4, 1e5);
    ConstraintSet c = s.cons;
    c.v = c.H * a;
    const auto [x, w] = solve_lagrange(d, s.data.zeta, s.q, 1e4, 1e5, c);
    EXPECT_LT(w.cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_LT((x - a).norm(), 1e-8 * (1.0 + a.norm()));
}

TEST(Lagrange, RedundantRowsAreNamed) {
    Small s;
    auto conds = diffusion_conditions(s.basis);
    conds.push_back(conds.front());
    const ConstraintSet dup = build_constraints(conds, s.basis);
    try {
        solve_lagrange(s.design(), s.data.zeta, s.q, 1e4, 1e5, dup);
        FAIL() << "expected a rank error";
    } catch (const NumericalError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("redundant rows"), std::string::npos);
        EXPECT_NE(msg.find(std::to_string(s.cons.rows())), std::string::npos);
    }
}

TEST(Lagrange, KappaLimitIsMonotone) {
    const SmoothingProblem& P = diffusion_problem();
    const std::vector<double> th{0.5, 1.5};
    const PenaltyQuadratic q = P.penalty().assemble(th);
    const auto [cl, w] = solve_lagrange(P.design(), P.zeta(), q, 1e4, 1e6, P.constraints());
    double prev = std::numeric_limits<double>::infinity();
    for (double kappa : {1e2, 1e4, 1e6, 1e8}) {
        const Eigen::VectorXd c = solve_ls_constrained(P.design(), P.zeta(), q, 1e4, 1e6, P.constraints(), kappa);
        const double dist = (c - cl).norm();
        EXPECT_LT(dist, prev) << "kappa " << kappa;
        prev = dist;
    }
}

TEST(Schall, EscalatesWhenPenaltyVanishes) {
    Small s;
    const DesignMatrix d = s.design();
    const Eigen::VectorXd zero = Eigen::VectorXd::Zero(s.basis.size());
    const SchallResult r = schall_update(d, s.data.zeta, zero, s.q, 1e4, 7.0);
    EXPECT_TRUE(r.escalated);
    EXPECT_DOUBLE_EQ(r.gamma, 70.0);
}

TEST(Schall, VarianceRatioFormula) {
    Small s;
    const DesignMatrix d = s.design();
    const double tau = 1e4, gamma = 1e5;
    const Eigen::VectorXd c = solve_ridge(d, s.data.zeta, s.q, tau, gamma);
    const SchallResult r = schall_update(d, s.data.zeta, c, s.q, tau, gamma);
    // influence trace from the dense hat matrix
    const Eigen::MatrixXd B(d.B), R(s.q.R);
    const Eigen::MatrixXd A = tau * B.transpose() * B + gamma * R;
    const double edf = tau * A.ldlt().solve(B.transpose() * B).trace();
    EXPECT_NEAR(r.edf, edf, 1e-8 * edf);
    const int null = nullity(R);
    const double rss = (s.data.zeta - B * c).squaredNorm();
    const double expect = tau * (rss / (s.data.zeta.size() - edf)) / (penalty_value(s.q, c) / (edf - null));
    EXPECT_FALSE(r.escalated);
    EXPECT_NEAR(r.gamma, expect, 1e-8 * expect);
}

TEST(Schall, Nullity) {
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(4, 4);
    m(0, 0) = 2.0;
    m(1, 1) = 1.0;
    EXPECT_EQ(nullity(m), 2);
    EXPECT_EQ(nullity(Eigen::MatrixXd::Identity(3, 3)), 0);
}

TEST(NelderMead, Rosenbrock) {
    NelderMeadSettings s;
    s.step = {0.5, 0.5};
    s.max_evals = 5000;
    s.stall_evals = 500;
    const auto r = nelder_mead(
        [](const std::vector<double>& x) {
            return 100.0 * std::pow(x[1] - x[0] * x[0], 2) + std::pow(1.0 - x[0], 2);
        },
        {-1.2, 1.0}, s);
    EXPECT_TRUE(r.converged);
    EXPECT_NEAR(r.x[0], 1.0, 1e-6);
    EXPECT_NEAR(r.x[1], 1.0, 1e-6);
}

TEST(NelderMead, FlagsStall) {
    NelderMeadSettings s;
    s.step = {1.0};
    s.stall_evals = 20;
    s.xtol = 0.0;
    s.ftol = 0.0;
    // constant objective: no evaluation ever improves on the first
    const auto r = nelder_mead([](const std::vector<double>&) { return 1.0; }, {0.0}, s);
    EXPECT_TRUE(r.stalled);
    EXPECT_FALSE(r.converged);
}

TEST(Fit, DiffusionLeastSquaresConditions) {
    const SmoothingProblem& P = diffusion_problem();
    FitSettings fs;
    fs.theta0 = {1.0, 1.0};
    fs.mode = ConstraintMode::ls;
    const FreqFit f = fit_frequentist(P, fs);
    EXPECT_TRUE(f.converged);
    EXPECT_NEAR(f.theta_hat[0], 0.5, 0.5 * 0.01);
    EXPECT_NEAR(f.theta_hat[1], 1.5, 1.5 * 0.01);
    EXPECT_GT(f.gamma_hat, 0.0);
    EXPECT_FALSE(f.trace.empty());
    ASSERT_TRUE(f.kappa.has_value());
    // profiled precision
    const double rss = (P.zeta() - P.design().B * f.c_hat).squaredNorm();
    EXPECT_NEAR(f.tau_hat * rss, static_cast<double>(P.n_obs()), 1e-9 * P.n_obs());
    // fitted surface against the closed form
    const std::vector<double> th{0.5, 1.5};
    const Eigen::VectorXd fitted = P.design().B * f.c_hat;
    double ss = 0.0;
    for (Eigen::Index i = 0; i < fitted.size(); ++i) {
        const double u = diffusion_solution(P.points()(i, 0), P.points()(i, 1), th);
        ss += (fitted[i] - u) * (fitted[i] - u);
    }
    EXPECT_LT(std::sqrt(ss / static_cast<double>(fitted.size())), 0.02);
}

TEST(Fit, LagrangeIsExactlyFeasible) {
    const SmoothingProblem& P = diffusion_problem();
    FitSettings fs;
    fs.theta0 = {1.0, 1.0};
    fs.mode = ConstraintMode::lagrange;
    const FreqFit f = fit_frequentist(P, fs);
    const auto& v = P.constraints().v;
    EXPECT_LE((P.constraints().H * f.c_hat - v).cwiseAbs().maxCoeff(), 1e-8 * (1.0 + v.cwiseAbs().maxCoeff()));
    EXPECT_EQ(f.omega.size(), P.constraints().rows());
    EXPECT_NEAR(f.theta_hat[0], 0.5, 0.5 * 0.01);
    EXPECT_NEAR(f.theta_hat[1], 1.5, 1.5 * 0.01);
}

TEST(Fit, SchallStationaryAtConvergence) {
    StudyConfig cfg;
    const TensorBasis basis = cfg.tensor_basis();
    const SmoothingProblem P(basis, diffusion_pde(), simulate_dataset(cfg, 0, 0));
    FitSettings fs;
    fs.theta0 = {1.0, 1.0};
    const FreqFit f = fit_frequentist(P, fs);
    ASSERT_TRUE(f.converged);
    const PenaltyQuadratic q = P.penalty().assemble(f.theta_hat);
    const SchallResult r = schall_update(P.design(), P.zeta(), f.c_hat, q, f.tau_hat, f.gamma_hat, f.nullity);
    EXPECT_LT(std::abs(r.gamma - f.gamma_hat), 0.01 * f.gamma_hat);
}

TEST(Fit, NoiseFree) {
    StudyConfig cfg;
    cfg.noise_sd = {0.0};
    const TensorBasis basis = cfg.tensor_basis();
    const SmoothingProblem P(basis, diffusion_pde(), simulate_dataset(cfg, 0, 0),
                             build_constraints(diffusion_conditions(basis), basis));
    FitSettings fs;
    fs.theta0 = {1.0, 1.0};
    fs.mode = ConstraintMode::ls;
    const FreqFit f = fit_frequentist(P, fs);
    EXPECT_NEAR(f.theta_hat[0], 0.5, 0.5e-3);
    EXPECT_NEAR(f.theta_hat[1], 1.5, 1.5e-3);
    EXPECT_GT(f.gamma_hat, 1e6);
}

TEST(Fit, Deterministic) {
    Small s;
    const SmoothingProblem P(s.basis, diffusion_pde(), s.data, s.cons);
    FitSettings fs;
    fs.theta0 = {1.0, 1.0};
    fs.mode = ConstraintMode::ls;
    const FreqFit a = fit_frequentist(P, fs);
    const FreqFit b = fit_frequentist(P, fs);
    ASSERT_EQ(a.trace.size(), b.trace.size());
    for (std::size_t i = 0; i < a.trace.size(); ++i) {
        EXPECT_EQ(a.trace[i].theta, b.trace[i].theta);
        EXPECT_EQ(a.trace[i].gamma, b.trace[i].gamma);
        EXPECT_EQ(a.trace[i].tau, b.trace[i].tau);
    }
    EXPECT_EQ(a.c_hat, b.c_hat);
}

TEST(Fit, RejectsBadSettings) {
    Small s;
    const SmoothingProblem P(s.basis, diffusion_pde(), s.data, s.cons);
    FitSettings fs;
    fs.theta0 = {1.0};
    EXPECT_THROW(fit_frequentist(P, fs), ValidationError);
    fs.theta0 = {1.0, 1.0};
    fs.gamma0 = -1.0;
    EXPECT_THROW(fit_frequentist(P, fs), ValidationError);
    const SmoothingProblem bare(s.basis, diffusion_pde(), s.data);
    FitSettings ok;
    ok.theta0 = {1.0, 1.0};
    ok.mode = ConstraintMode::lagrange;
    EXPECT_THROW(fit_frequentist(bare, ok), ValidationError);
}

TEST(Fit, LagrangeStdSmallerThanUnconditioned) {
    // full-size study basis: the 10 x 8 one is too coarse for the conditioned fit
    StudyConfig cfg;
    const TensorBasis basis = cfg.tensor_basis();
    const ConstraintSet cons = build_constraints(diffusion_conditions(basis), basis);
    std::vector<double> none1, lag1;
    for (int rep = 0; rep < 20; ++rep) {
        const SmoothingProblem P(basis, diffusion_pde(), simulate_dataset(cfg, 0, rep), cons);
        FitSettings fs;
        fs.theta0 = {1.0, 1.0};
        fs.mode = ConstraintMode::none;
        none1.push_back(fit_frequentist(P, fs).theta_hat[0]);
        fs.mode = ConstraintMode::lagrange;
        lag1.push_back(fit_frequentist(P, fs).theta_hat[0]);
    }
    EXPECT_LT(relative_metrics(lag1, 0.5).r_std, relative_metrics(none1, 0.5).r_std);
}

TEST(Bootstrap, NestedLevelsAndDeterminism) {
    Small s;
    const SmoothingProblem P(s.basis, diffusion_pde(), s.data, s.cons);
    FitSettings fs;
    fs.theta0 = {1.0, 1.0};
    fs.mode = ConstraintMode::ls;
    const FreqFit f = fit_frequentist(P, fs);
    BootstrapSettings bs;
    bs.replicates = 40;
    bs.seed = 11;
    const BootstrapResult a = bootstrap_ci(f, P, fs, bs);
    const int saved = kernels::max_threads();
    kernels::set_threads(1);
    const BootstrapResult b = bootstrap_ci(f, P, fs, bs);
    kernels::set_threads(saved);
    EXPECT_EQ(a.draws, b.draws);
    EXPECT_EQ(static_cast<int>(a.draws.size()) + a.dropped, 40);
    const auto [lo80, hi80] = percentile_intervals(a.draws, 0.80);
    for (int k = 0; k < 2; ++k) {
        EXPECT_LE(a.lo[static_cast<std::size_t>(k)], lo80[static_cast<std::size_t>(k)]);
        EXPECT_GE(a.hi[static_cast<std::size_t>(k)], hi80[static_cast<std::size_t>(k)]);
        EXPECT_LE(a.lo[static_cast<std::size_t>(k)], f.theta_hat[static_cast<std::size_t>(k)] + 1e-3);
    }
}

TEST(Bootstrap, ZeroNoiseIsDegenerate) {
    Small s;
    // residuals of an exact spline surface are zero
    const SmoothingProblem P0(s.basis, diffusion_pde(), s.data, s.cons);
    FitSettings fs;
    fs.theta0 = {1.0, 1.0};
    fs.mode = ConstraintMode::ls;
    const FreqFit f0 = fit_frequentist(P0, fs);
    const Eigen::VectorXd surface = P0.design().B * f0.c_hat;
    const SmoothingProblem P = P0.with_response(surface);
    const FreqFit f = fit_frequentist(P, fs);
    BootstrapSettings bs;
    bs.replicates = 20;
    const BootstrapResult r = bootstrap_ci(f, P, fs, bs);
    for (std::size_t k = 0; k < 2; ++k) EXPECT_LT(r.hi[k] - r.lo[k], 1e-6);
}

TEST(Bootstrap, PercentileQuantiles) {
    std::vector<std::vector<double>> draws;
    for (int i = 0; i <= 100; ++i) draws.push_back({static_cast<double>(i)});
    const auto [lo, hi] = percentile_intervals(draws, 0.9);
    EXPECT_DOUBLE_EQ(lo[0], 5.0);
    EXPECT_DOUBLE_EQ(hi[0], 95.0);
    EXPECT_THROW(percentile_intervals(draws, 1.0), ValidationError);
}
