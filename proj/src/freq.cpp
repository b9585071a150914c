#include "pspde/freq.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <omp.h>

#include "pspde/error.hpp"
#include "pspde/kernels.hpp"
#include "pspde/optim.hpp"
#include "pspde/rng.hpp"

namespace pspde {

const char* to_string(ConstraintMode m) {
    switch (m) {
        case ConstraintMode::none: return "none";
        case ConstraintMode::ls: return "ls";
        case ConstraintMode::lagrange: return "lagrange";
    }
    return "?";
}

namespace {

struct SystemSolution {
    Eigen::VectorXd c;
    Eigen::VectorXd omega;
    RidgeFloor floor;
    double constraint_trace = 0.0;  // tr(S^{-1} W^T G W), lagrange only
};

// Solves A c = b, or the bordered system with H^T given as Ht (n x K).
// `G` (optional) is the band whose influence correction is wanted.
SystemSolution solve_system(BandMatrix& A, BandCholesky& chol, const Eigen::VectorXd& b, const Eigen::MatrixXd* Ht,
                            const Eigen::VectorXd* v, const BandMatrix* G = nullptr) {
    SystemSolution out;
    out.floor = factorize_with_floor(chol, A);
    out.c = chol.solve(b);
    if (Ht == nullptr) return out;

    Eigen::MatrixXd W = *Ht;
    chol.solve_in_place(W);
    const Eigen::MatrixXd S = Ht->transpose() * W;
    Eigen::LLT<Eigen::MatrixXd> llt(S);
    if (llt.info() != Eigen::Success)
        throw NumericalError("condition matrix H is rank deficient: the bordered system is singular");
    out.omega = llt.solve(Ht->transpose() * out.c - *v);
    out.c -= W * out.omega;
    const double tol = 1e-10 * (1.0 + v->cwiseAbs().maxCoeff());
    for (int it = 0; it < 4; ++it) {
        const Eigen::VectorXd r2 = *v - Ht->transpose() * out.c;
        const Eigen::VectorXd r1 = b - A.multiply(out.c) - *Ht * out.omega;
        if (r2.cwiseAbs().maxCoeff() <= tol && r1.norm() <= 1e-13 * b.norm()) break;
        Eigen::VectorXd dc = chol.solve(r1);
        const Eigen::VectorXd dw = llt.solve(Ht->transpose() * dc - r2);
        dc -= W * dw;
        out.c += dc;
        out.omega += dw;
    }
    if (G != nullptr) {
        Eigen::MatrixXd GW(W.rows(), W.cols());
        for (Eigen::Index k = 0; k < W.cols(); ++k) GW.col(k) = G->multiply(W.col(k));
        const Eigen::MatrixXd T = W.transpose() * GW;
        out.constraint_trace = llt.solve(T).trace();
    }
    return out;
}

int bandwidth_of(const Eigen::SparseMatrix<double>& m) {
    int kd = 0;
    for (int k = 0; k < m.outerSize(); ++k)
        for (Eigen::SparseMatrix<double>::InnerIterator it(m, k); it; ++it)
            kd = std::max(kd, static_cast<int>(std::abs(it.row() - it.col())));
    return kd;
}

// Band setup for the explicit-input solvers (identity coefficient order).
struct ExplicitSystem {
    CoefficientOrder order;
    BandMatrix BtB;
    BandMatrix A;
    Eigen::VectorXd b;
};

ExplicitSystem explicit_system(const DesignMatrix& design, const Eigen::VectorXd& zeta, const PenaltyQuadratic& q,
                               double tau, double gamma, const ConstraintSet* cons, double kappa) {
    const Eigen::Index n = design.cols();
    if (design.rows() != zeta.size())
        throw ValidationError("design has " + std::to_string(design.rows()) + " rows, response has " +
                              std::to_string(zeta.size()));
    if (q.R.rows() != n || q.r.size() != n) throw ValidationError("penalty size does not match the design");
    if (!(tau > 0.0)) throw ValidationError("tau must be positive");
    if (!(gamma >= 0.0)) throw ValidationError("gamma must be non-negative");
    const Eigen::SparseMatrix<double> Bc(design.B);
    const Eigen::SparseMatrix<double> BtB = Bc.transpose() * Bc;
    int kd = std::max(bandwidth_of(BtB), bandwidth_of(q.R));
    Eigen::SparseMatrix<double> HtH;
    if (cons != nullptr) {
        if (cons->H.cols() != n) throw ValidationError("condition matrix does not match the design");
        const Eigen::SparseMatrix<double> Hc(cons->H);
        HtH = Hc.transpose() * Hc;
        kd = std::max(kd, bandwidth_of(HtH));
    }
    ExplicitSystem s;
    s.order = CoefficientOrder::identity(static_cast<int>(n), kd);
    s.BtB = s.order.band(BtB);
    s.A = BandMatrix(static_cast<int>(n), s.order.bandwidth());
    s.A.axpy(tau, s.BtB);
    s.order.accumulate(q.R, gamma, s.A);
    s.b = tau * (design.B.transpose() * zeta) - gamma * q.r;
    if (cons != nullptr && kappa > 0.0) {
        s.order.accumulate(HtH, kappa, s.A);
        s.b += kappa * (cons->H.transpose() * cons->v);
    }
    return s;
}

SchallResult schall_from(double tau, double gamma, double rss, double pen, double edf, int n_obs, int nullity) {
    SchallResult s;
    s.edf = edf;
    s.rss = rss;
    s.pen = pen;
    s.df_res = n_obs - edf;
    s.df_pen = edf - nullity;
    if (!(pen > 0.0) || !(s.df_pen > 0.0) || !(s.df_res > 0.0) || !(rss > 0.0)) {
        s.escalated = true;
        s.gamma = gamma * 10.0;
        return s;
    }
    s.gamma = tau * (rss / s.df_res) / (pen / s.df_pen);
    return s;
}

double variance(const Eigen::VectorXd& x) {
    const double m = x.mean();
    return (x.array() - m).square().sum() / std::max<Eigen::Index>(x.size() - 1, 1);
}

}  // namespace

Eigen::VectorXd solve_ridge(const DesignMatrix& design, const Eigen::VectorXd& zeta, const PenaltyQuadratic& q,
                            double tau, double gamma) {
    ExplicitSystem s = explicit_system(design, zeta, q, tau, gamma, nullptr, 0.0);
    BandCholesky chol;
    return solve_system(s.A, chol, s.b, nullptr, nullptr).c;
}

Eigen::VectorXd solve_ls_constrained(const DesignMatrix& design, const Eigen::VectorXd& zeta,
                                     const PenaltyQuadratic& q, double tau, double gamma, const ConstraintSet& cons,
                                     double kappa) {
    if (!(kappa >= 0.0)) throw ValidationError("kappa must be non-negative");
    ExplicitSystem s = explicit_system(design, zeta, q, tau, gamma, &cons, kappa);
    BandCholesky chol;
    return solve_system(s.A, chol, s.b, nullptr, nullptr).c;
}

std::pair<Eigen::VectorXd, Eigen::VectorXd> solve_lagrange(const DesignMatrix& design, const Eigen::VectorXd& zeta,
                                                           const PenaltyQuadratic& q, double tau, double gamma,
                                                           const ConstraintSet& cons) {
    const auto red = redundant_rows(cons);
    if (!red.empty()) {
        std::ostringstream os;
        os << "condition matrix is rank deficient; redundant rows:";
        for (int r : red) os << ' ' << r;
        throw NumericalError(os.str());
    }
    ExplicitSystem s = explicit_system(design, zeta, q, tau, gamma, nullptr, 0.0);
    const Eigen::MatrixXd Ht = Eigen::MatrixXd(cons.H).transpose();
    BandCholesky chol;
    SystemSolution sol = solve_system(s.A, chol, s.b, &Ht, &cons.v);
    return {sol.c, sol.omega};
}

int nullity(const Eigen::MatrixXd& sym, double rel) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym, Eigen::EigenvaluesOnly);
    const auto& ev = es.eigenvalues();
    const double top = ev.cwiseAbs().maxCoeff();
    int k = 0;
    for (Eigen::Index i = 0; i < ev.size(); ++i)
        if (ev[i] <= rel * top) ++k;
    return k;
}

SchallResult schall_update(const DesignMatrix& design, const Eigen::VectorXd& zeta, const Eigen::VectorXd& c,
                           const PenaltyQuadratic& q, double tau, double gamma, int null_dim) {
    ExplicitSystem s = explicit_system(design, zeta, q, tau, gamma, nullptr, 0.0);
    BandCholesky chol;
    factorize_with_floor(chol, s.A);
    const double edf = tau * trace_product(chol.selected_inverse(), s.BtB);
    const double rss = (zeta - design.B * c).squaredNorm();
    if (null_dim < 0) null_dim = nullity(Eigen::MatrixXd(q.R));
    return schall_from(tau, gamma, rss, penalty_value(q, c), edf, static_cast<int>(zeta.size()), null_dim);
}

InnerSolver::InnerSolver(const SmoothingProblem& problem, ConstraintMode mode, double kappa)
    : problem_(&problem), mode_(mode), kappa_(kappa) {
    if (mode != ConstraintMode::none && !problem.has_constraints())
        throw ValidationError(std::string("constraint mode '") + to_string(mode) + "' needs conditions");
    if (mode == ConstraintMode::ls && !(kappa >= 0.0)) throw ValidationError("kappa must be non-negative");
    if (mode == ConstraintMode::lagrange) {
        const auto red = redundant_rows(problem.constraints());
        if (!red.empty()) {
            std::ostringstream os;
            os << "condition matrix is rank deficient; redundant rows:";
            for (int r : red) os << ' ' << r;
            throw NumericalError(os.str());
        }
    }
}

InnerSolution InnerSolver::solve(std::span<const double> theta, double tau, double gamma, bool with_trace) {
    const SmoothingProblem& P = *problem_;
    P.penalty().assemble(theta, R_, r_, l_);
    A_.assign_sum(tau, P.BtB(), gamma, R_);
    Eigen::VectorXd b = tau * P.Btz() - gamma * r_;
    if (mode_ == ConstraintMode::ls) {
        A_.axpy(kappa_, P.HtH());
        b += kappa_ * P.Htv();
    }
    const bool lagrange = mode_ == ConstraintMode::lagrange;
    SystemSolution s = solve_system(A_, chol_, b, lagrange ? &P.Ht() : nullptr,
                                    lagrange ? &P.constraints().v : nullptr, with_trace ? &P.BtB() : nullptr);
    InnerSolution out;
    out.c = std::move(s.c);
    out.omega = std::move(s.omega);
    out.ridge_floor = s.floor.applied;
    out.rss = P.rss(out.c);
    out.pen = R_.quad_form(out.c) + 2.0 * out.c.dot(r_) + l_;
    if (with_trace) out.edf = tau * (trace_product(chol_.selected_inverse(), P.BtB()) - s.constraint_trace);
    return out;
}

double auto_gamma0(const SmoothingProblem& problem, std::span<const double> theta0, double tau0) {
    BandMatrix R;
    Eigen::VectorXd r;
    double l = 0.0;
    problem.penalty().assemble(theta0, R, r, l);
    const double dr = R.mean_diagonal();
    const double g = 1e4 * tau0 * problem.BtB().mean_diagonal() / dr;
    if (!(dr > 0.0) || !std::isfinite(g) || !(g > 0.0)) return 1.0;
    return g;
}

FreqFit fit_frequentist(const SmoothingProblem& problem, const FitSettings& settings) {
    const std::size_t nt = problem.pde().theta_names.size();
    if (settings.theta0.size() != nt)
        throw ValidationError("theta0 has " + std::to_string(settings.theta0.size()) + " components, PDE declares " +
                              std::to_string(nt));
    if (nt == 0) throw ValidationError("the PDE has no parameters to estimate");
    if (!(settings.gamma0 >= 0.0)) throw ValidationError("initial gamma must be positive (or 0 for automatic)");
    InnerSolver solver(problem, settings.mode, settings.kappa);
    const int N = problem.n_obs();

    std::vector<double> theta = settings.theta0;
    double tau = settings.tau0 > 0.0 ? settings.tau0 : 1.0 / std::max(variance(problem.zeta()), 1e-300);
    double gamma = settings.gamma0 > 0.0 ? settings.gamma0 : auto_gamma0(problem, theta, tau);

    FreqFit fit;
    fit.mode = settings.mode;
    fit.n_obs = N;
    if (settings.mode == ConstraintMode::ls) fit.kappa = settings.kappa;
    if (settings.nullity >= 0) {
        fit.nullity = settings.nullity;
    } else {
        BandMatrix R;
        Eigen::VectorXd r;
        double l = 0.0;
        problem.penalty().assemble(theta, R, r, l);
        Eigen::MatrixXd Rd = R.to_dense();
        // directions pinned by the conditions carry no data-driven freedom
        if (settings.mode != ConstraintMode::none) {
            const Eigen::MatrixXd HtH = problem.HtH().to_dense();
            const double h = HtH.diagonal().maxCoeff();
            if (h > 0.0) Rd += (Rd.diagonal().maxCoeff() / h) * HtH;
        }
        fit.nullity = nullity(Rd);
    }

    std::vector<double> step(nt);
    for (std::size_t k = 0; k < nt; ++k) step[k] = settings.initial_step * std::max(std::abs(theta[k]), 1e-3);

    double last_change = 1.0;
    std::vector<double> log_gammas;  // plain Schall steps since the last extrapolation
    for (int it = 1; it <= settings.max_iter; ++it) {
        NelderMeadSettings nm;
        nm.step = step;
        nm.stall_evals = settings.stall_evals;
        // the simplex need not be much sharper than the current outer progress
        nm.xtol = std::clamp(1e-2 * last_change, nm.xtol, 1e-4);
        const auto rss_at = [&](const std::vector<double>& th) { return solver.solve(th, tau, gamma).rss; };
        auto res = nelder_mead(rss_at, theta, nm);
        if (res.stalled && !res.converged) {
            // one restart from the best point with a much smaller simplex; a stall
            // here usually means the start was already optimal for this gamma
            NelderMeadSettings again = nm;
            for (std::size_t k = 0; k < nt; ++k)
                again.step[k] = std::max(1e-2 * nm.step[k], 1e-7 * std::max(std::abs(res.x[k]), 1e-3));
            const int used = res.evals;
            res = nelder_mead(rss_at, res.x, again);
            res.evals += used;
        }
        if (res.stalled && !res.converged) fit.simplex_stalled = true;

        const InnerSolution sol = solver.solve(res.x, tau, gamma, true);
        const double tau_new = N / sol.rss;
        const SchallResult sch = schall_from(tau_new, gamma, sol.rss, sol.pen, sol.edf, N, fit.nullity);
        fit.gamma_escalated = fit.gamma_escalated || sch.escalated;
        fit.ridge_floor = fit.ridge_floor || sol.ridge_floor;

        // escalation keeps gamma/tau growing; a drop is limited to one decade per
        // iteration so theta can follow gamma down from the penalty-dominated start
        double gamma_new = sch.escalated ? sch.gamma * tau_new / tau : sch.gamma;
        const double floor = 0.1 * gamma * tau_new / tau;
        if (sch.escalated || gamma_new <= floor) {
            log_gammas.clear();
        } else {
            log_gammas.push_back(std::log(gamma_new));
            if (log_gammas.size() == 3) {
                // Aitken step on log gamma; only for steady monotone convergence
                const double d1 = log_gammas[1] - log_gammas[0], d2 = log_gammas[2] - log_gammas[1];
                const double ratio = d2 / d1;
                if (std::isfinite(ratio) && ratio > 0.0 && ratio < 0.95)
                    gamma_new = std::exp(log_gammas[2] + d2 * ratio / (1.0 - ratio));
                log_gammas.clear();
            }
        }
        gamma_new = std::max(gamma_new, floor);
        double change = std::abs(gamma_new - gamma) / gamma;
        for (std::size_t k = 0; k < nt; ++k) {
            const double d = res.x[k] - theta[k];
            change = std::max(change, std::abs(d) / std::max(std::abs(theta[k]), 1e-12));
            step[k] = std::clamp(4.0 * std::abs(d), 1e-7 * std::max(std::abs(res.x[k]), 1e-3),
                                 settings.initial_step * std::max(std::abs(res.x[k]), 1e-3));
        }
        theta = res.x;
        tau = tau_new;
        gamma = gamma_new;

        TraceRow row;
        row.iteration = it;
        row.theta = theta;
        row.tau = tau;
        row.gamma = gamma;
        row.rss = sol.rss;
        row.pen = sol.pen;
        row.edf = sol.edf;
        row.evals = res.evals;
        row.stalled = res.stalled && !res.converged;
        row.objective = 0.5 * N * std::log(tau) - 0.5 * tau * sol.rss;
        fit.trace.push_back(std::move(row));
        fit.iterations = it;
        last_change = change;
        if (change < settings.tol) {
            fit.converged = true;
            break;
        }
    }
    if (fit.simplex_stalled) fit.converged = false;

    const InnerSolution fin = solver.solve(theta, tau, gamma, true);
    fit.theta_hat = theta;
    fit.gamma_hat = gamma;
    fit.rss = fin.rss;
    fit.tau_hat = N / fin.rss;
    fit.edf = fin.edf;
    fit.c_hat = problem.order().to_canonical(fin.c);
    fit.omega = fin.omega;
    fit.ridge_floor = fit.ridge_floor || fin.ridge_floor;
    return fit;
}

namespace {

double quantile_sorted(const std::vector<double>& s, double p) {
    if (s.empty()) return std::nan("");
    const double h = (static_cast<double>(s.size()) - 1.0) * p;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const std::size_t hi = std::min(lo + 1, s.size() - 1);
    return s[lo] + (h - static_cast<double>(lo)) * (s[hi] - s[lo]);
}

}  // namespace

std::pair<std::vector<double>, std::vector<double>> percentile_intervals(const std::vector<std::vector<double>>& draws,
                                                                         double level) {
    if (!(level > 0.0 && level < 1.0)) throw ValidationError("interval level must lie in (0, 1)");
    if (draws.empty()) throw ValidationError("no bootstrap replicates");
    const std::size_t np = draws.front().size();
    std::vector<double> lo(np), hi(np);
    for (std::size_t k = 0; k < np; ++k) {
        std::vector<double> col;
        col.reserve(draws.size());
        for (const auto& d : draws) col.push_back(d[k]);
        std::sort(col.begin(), col.end());
        lo[k] = quantile_sorted(col, 0.5 * (1.0 - level));
        hi[k] = quantile_sorted(col, 0.5 * (1.0 + level));
    }
    return {lo, hi};
}

BootstrapResult bootstrap_ci(const FreqFit& fit, const SmoothingProblem& problem, const FitSettings& settings,
                             const BootstrapSettings& boot) {
    if (boot.replicates < 2) throw ValidationError("bootstrap needs at least 2 replicates");
    if (!(boot.level > 0.0 && boot.level < 1.0)) throw ValidationError("interval level must lie in (0, 1)");
    const Eigen::VectorXd fitted = problem.design().B * fit.c_hat;
    Eigen::VectorXd resid = problem.zeta() - fitted;
    resid.array() -= resid.mean();
    const auto N = static_cast<std::size_t>(resid.size());

    FitSettings warm = settings;
    warm.theta0 = fit.theta_hat;
    warm.gamma0 = fit.gamma_hat;
    warm.tau0 = fit.tau_hat;
    warm.nullity = fit.nullity;
    warm.initial_step = std::min(settings.initial_step, 0.01);

    const int B = boot.replicates;
    std::vector<std::vector<double>> theta(static_cast<std::size_t>(B));
    std::vector<std::string> failure(static_cast<std::size_t>(B));
#pragma omp parallel for schedule(dynamic)
    for (int b = 0; b < B; ++b) {
        auto rng = make_rng(boot.seed, {static_cast<std::uint64_t>(b)});
        std::uniform_int_distribution<std::size_t> pick(0, N - 1);
        Eigen::VectorXd z(resid.size());
        for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = fitted[i] + resid[static_cast<Eigen::Index>(pick(rng))];
        try {
            const SmoothingProblem pb = problem.with_response(z);
            const FreqFit f = fit_frequentist(pb, warm);
            if (!f.converged)
                failure[static_cast<std::size_t>(b)] = "replicate " + std::to_string(b) + ": not converged";
            else
                theta[static_cast<std::size_t>(b)] = f.theta_hat;
        } catch (const std::exception& e) {
            failure[static_cast<std::size_t>(b)] = "replicate " + std::to_string(b) + ": " + e.what();
        }
    }
    BootstrapResult out;
    for (int b = 0; b < B; ++b) {
        if (failure[static_cast<std::size_t>(b)].empty()) {
            out.draws.push_back(std::move(theta[static_cast<std::size_t>(b)]));
        } else {
            ++out.dropped;
            out.drop_reasons.push_back(failure[static_cast<std::size_t>(b)]);
        }
    }
    if (out.dropped * 10 > B)
        throw NumericalError("bootstrap dropped " + std::to_string(out.dropped) + " of " + std::to_string(B) +
                             " replicates (more than 10%)");
    std::tie(out.lo, out.hi) = percentile_intervals(out.draws, boot.level);
    return out;
}

}  // namespace pspde
