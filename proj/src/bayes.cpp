#include "pspde/bayes.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

#include "pspde/error.hpp"
#include "pspde/rng.hpp"

namespace pspde {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

bool positive_finite(double x) { return std::isfinite(x) && x > 0.0; }

double penalty_floor(double mean_diag) {
    return kPenaltyFloor * (mean_diag > 0.0 && std::isfinite(mean_diag) ? mean_diag : 1.0);
}

}  // namespace

double log_gamma_density(double x, double shape, double rate) { return (shape - 1.0) * std::log(x) - rate * x; }

double ThetaPrior::log_density(double x) const {
    switch (kind) {
        case Kind::normal: {
            const double z = (x - a) / b;
            return -0.5 * z * z - std::log(b);
        }
        case Kind::point: return x == a ? 0.0 : kNegInf;
        case Kind::uniform: return (x >= a && x <= b) ? -std::log(b - a) : kNegInf;
        case Kind::flat: return 0.0;
    }
    return kNegInf;
}

void ThetaPrior::validate(const std::string& name) const {
    switch (kind) {
        case Kind::normal:
            if (!std::isfinite(a) || !positive_finite(b))
                throw ValidationError("normal prior on " + name + " needs a finite mean and positive sd");
            break;
        case Kind::point:
            if (!std::isfinite(a)) throw ValidationError("point prior on " + name + " needs a finite value");
            break;
        case Kind::uniform:
            if (!std::isfinite(a) || !std::isfinite(b) || !(a < b))
                throw ValidationError("uniform prior on " + name + " needs finite lower < upper");
            break;
        case Kind::flat: break;
    }
}

void Hyperparams::validate(std::size_t n_theta) const {
    const std::pair<const char*, double> vals[] = {{"a_tau", a_tau},     {"b_tau", b_tau},     {"a_gamma", a_gamma},
                                                   {"b_gamma", b_gamma}, {"a_kappa", a_kappa}, {"b_kappa", b_kappa}};
    for (const auto& [name, v] : vals)
        if (!positive_finite(v)) throw ValidationError(std::string(name) + " must be positive");
    if (!theta_prior.empty() && theta_prior.size() != n_theta)
        throw ValidationError("theta prior has " + std::to_string(theta_prior.size()) + " components, PDE declares " +
                              std::to_string(n_theta));
    for (std::size_t k = 0; k < theta_prior.size(); ++k) theta_prior[k].validate("theta[" + std::to_string(k) + "]");
}

double Hyperparams::log_theta_prior(std::span<const double> theta) const {
    double s = 0.0;
    for (std::size_t k = 0; k < theta_prior.size() && k < theta.size(); ++k) {
        s += theta_prior[k].log_density(theta[k]);
        if (s == kNegInf) return s;
    }
    return s;
}

// ---- explicit-input prior and conditionals ----

PriorComponents prior_components(const PenaltyQuadratic& q, double gamma, const ConstraintSet* cons,
                                 std::optional<double> kappa) {
    if (!positive_finite(gamma)) throw ValidationError("gamma must be positive");
    if ((cons != nullptr) != kappa.has_value())
        throw ValidationError("kappa must be given exactly when conditions are given");
    const Eigen::Index n = q.R.rows();
    if (q.R.cols() != n || q.r.size() != n) throw ValidationError("penalty matrix and vector sizes differ");

    PriorComponents p;
    const double mean_diag = q.R.diagonal().sum() / static_cast<double>(std::max<Eigen::Index>(n, 1));
    p.floor = penalty_floor(mean_diag);
    Eigen::SparseMatrix<double> I(n, n);
    I.setIdentity();
    p.V1 = gamma * (q.R + p.floor * I);
    p.v1 = -gamma * q.r;
    if (cons != nullptr) {
        if (!positive_finite(*kappa)) throw ValidationError("kappa must be positive");
        if (cons->H.cols() != n) throw ValidationError("condition matrix does not match the penalty");
        const Eigen::SparseMatrix<double> H(cons->H);
        p.V1 += *kappa * Eigen::SparseMatrix<double>(H.transpose() * H);
        p.v1 += *kappa * (cons->H.transpose() * cons->v);
    }
    p.V1.makeCompressed();
    const CoefficientOrder order = CoefficientOrder::from_pattern(p.V1);
    BandMatrix band = order.band(p.V1);
    BandCholesky chol;
    const RidgeFloor extra = factorize_with_floor(chol, band);
    if (extra.applied) {
        p.extra_floor = true;
        p.V1 += extra.value * I;
    }
    p.logdet_V1 = chol.log_det();
    return p;
}

namespace {

struct PosteriorSystem {
    BandCholesky chol;
    Eigen::VectorXd v2;
};

PosteriorSystem posterior_system(const PriorComponents& prior, const DesignMatrix& design, const Eigen::VectorXd& zeta,
                                 double tau) {
    if (!positive_finite(tau)) throw ValidationError("tau must be positive");
    if (design.rows() != zeta.size()) throw ValidationError("design rows and response length differ");
    if (design.cols() != prior.V1.rows()) throw ValidationError("design columns and prior size differ");
    const Eigen::SparseMatrix<double> B(design.B);
    Eigen::SparseMatrix<double> V2 = tau * Eigen::SparseMatrix<double>(B.transpose() * B) + prior.V1;
    V2.makeCompressed();
    const CoefficientOrder order = CoefficientOrder::from_pattern(V2);
    PosteriorSystem s;
    if (!s.chol.factorize(order.band(V2))) throw NumericalError("V2 is not positive definite");
    s.v2 = tau * (design.B.transpose() * zeta) + prior.v1;
    return s;
}

}  // namespace

Eigen::VectorXd coefficient_mean(const PriorComponents& prior, const DesignMatrix& design, const Eigen::VectorXd& zeta,
                                 double tau) {
    const PosteriorSystem s = posterior_system(prior, design, zeta, tau);
    return s.chol.solve(s.v2);
}

Eigen::VectorXd draw_coefficients(const PriorComponents& prior, const DesignMatrix& design,
                                  const Eigen::VectorXd& zeta, double tau, std::mt19937_64& rng) {
    const PosteriorSystem s = posterior_system(prior, design, zeta, tau);
    std::normal_distribution<double> nd;
    Eigen::VectorXd z(s.v2.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = nd(rng);
    return s.chol.solve(s.v2) + s.chol.solve_transposed_factor(z);
}

double draw_gamma(const GammaParams& g, std::mt19937_64& rng) {
    if (!positive_finite(g.shape) || !positive_finite(g.rate))
        throw NumericalError("gamma conditional needs positive shape and rate (shape " + std::to_string(g.shape) +
                             ", rate " + std::to_string(g.rate) + ")");
    std::gamma_distribution<double> gd(g.shape, 1.0 / g.rate);
    return gd(rng);
}

namespace {

// rate term (c + R_f^{-1} r)^T R_f (c + R_f^{-1} r) for internal-order inputs
double penalty_quadratic(BandMatrix Rf, const Eigen::VectorXd& r, const Eigen::VectorXd& c, BandCholesky& chol) {
    factorize_with_floor(chol, Rf);
    const Eigen::VectorXd d = c + (r.isZero(0.0) ? Eigen::VectorXd::Zero(r.size()) : chol.solve(r));
    return Rf.quad_form(d);
}

}  // namespace

PrecisionDraw draw_precisions(const SmoothingProblem& problem, std::span<const double> theta,
                              const Eigen::VectorXd& c, const Hyperparams& hyper, std::mt19937_64& rng) {
    if (problem.has_constraints())
        throw ValidationError("the gamma conditional has no closed form with soft conditions in the prior");
    hyper.validate(problem.pde().theta_names.size());
    if (c.size() != problem.n_coef()) throw ValidationError("coefficient vector has the wrong length");
    const Eigen::VectorXd ci = problem.order().to_internal(c);

    BandMatrix R;
    Eigen::VectorXd r;
    double l = 0.0;
    problem.penalty().assemble(theta, R, r, l);
    R.add_diagonal(penalty_floor(R.mean_diagonal()));
    BandCholesky chol;

    PrecisionDraw out;
    out.tau_conditional = {0.5 * problem.n_obs() + hyper.a_tau, 0.5 * problem.rss(ci) + hyper.b_tau};
    out.gamma_conditional = {0.5 * problem.n_coef() + hyper.a_gamma,
                             0.5 * penalty_quadratic(R, r, ci, chol) + hyper.b_gamma};
    out.tau = draw_gamma(out.tau_conditional, rng);
    out.gamma = draw_gamma(out.gamma_conditional, rng);
    return out;
}

// ---- marginal posterior ----

MarginalPosterior::MarginalPosterior(const SmoothingProblem& problem, Hyperparams hyper, bool use_conditions,
                                     bool kappa_random)
    : problem_(&problem), hyper_(std::move(hyper)), use_conditions_(use_conditions), kappa_random_(kappa_random) {
    hyper_.validate(problem.pde().theta_names.size());
    if (use_conditions && !problem.has_constraints())
        throw ValidationError("conditions requested but the problem has none");
    if (kappa_random && !use_conditions) throw ValidationError("a random kappa needs conditions");
}

bool MarginalPosterior::build(std::span<const double> theta, double gamma, double tau, double kappa,
                              bool& extra_floor) {
    const SmoothingProblem& P = *problem_;
    P.penalty().assemble(theta, R_, r_, l_);
    const double floor = penalty_floor(R_.mean_diagonal());
    V1_ = R_;
    V1_.add_diagonal(floor);
    V1_.scale(gamma);
    v1_ = -gamma * r_;
    if (use_conditions_) {
        V1_.axpy(kappa, P.HtH());
        v1_ += kappa * P.Htv();
    }
    try {
        extra_floor = factorize_with_floor(chol1_, V1_).applied;
    } catch (const NumericalError&) {
        return false;
    }
    V2_ = V1_;
    V2_.axpy(tau, P.BtB());
    v2_ = v1_ + tau * P.Btz();
    return chol2_.factorize(V2_);
}

double MarginalPosterior::prior_terms(std::span<const double> theta, double gamma, double tau, double kappa) const {
    double s = log_gamma_density(tau, hyper_.a_tau, hyper_.b_tau) +
               log_gamma_density(gamma, hyper_.a_gamma, hyper_.b_gamma);
    if (kappa_random_) s += log_gamma_density(kappa, hyper_.a_kappa, hyper_.b_kappa);
    return s + hyper_.log_theta_prior(theta);
}

MarginalPosterior::Terms MarginalPosterior::evaluate(std::span<const double> theta, double gamma, double tau,
                                                     double kappa) {
    Terms t;
    if (theta.size() != problem_->pde().theta_names.size())
        throw ValidationError("theta has the wrong number of components");
    if (!positive_finite(gamma) || !positive_finite(tau)) return t;
    if (use_conditions_ && !positive_finite(kappa)) return t;
    for (double x : theta)
        if (!std::isfinite(x)) return t;
    const double prior = prior_terms(theta, gamma, tau, kappa);
    if (!std::isfinite(prior)) return t;
    if (!build(theta, gamma, tau, kappa, t.extra_floor)) return t;

    const Eigen::VectorXd m = chol2_.solve(v2_);
    const Eigen::VectorXd m1 = v1_.isZero(0.0) ? Eigen::VectorXd::Zero(v1_.size()) : chol1_.solve(v1_);
    t.logdet_V1 = chol1_.log_det();
    t.logdet_V2 = chol2_.log_det();
    t.rss = problem_->rss(m);
    t.prior_quad = V1_.quad_form(m - m1);
    const double N = problem_->n_obs();
    t.value = 0.5 * N * std::log(tau) + 0.5 * (t.logdet_V1 - t.logdet_V2) - 0.5 * (tau * t.rss + t.prior_quad) + prior;
    if (!std::isfinite(t.value)) t.value = kNegInf;
    return t;
}

double MarginalPosterior::log_joint(const Eigen::VectorXd& c, std::span<const double> theta, double gamma, double tau,
                                    double kappa) {
    if (c.size() != problem_->n_coef()) throw ValidationError("coefficient vector has the wrong length");
    if (!positive_finite(gamma) || !positive_finite(tau)) return kNegInf;
    if (use_conditions_ && !positive_finite(kappa)) return kNegInf;
    bool extra = false;
    if (!build(theta, gamma, tau, kappa, extra)) return kNegInf;
    const Eigen::VectorXd ci = problem_->order().to_internal(c);
    const double q1 = v1_.dot(chol1_.solve(v1_));
    const double N = problem_->n_obs();
    // |V1|^{1/2} exp(-(c^T V1 c - 2 c^T v1 + v1^T V1^{-1} v1) / 2) is the normalised coefficient prior
    return 0.5 * N * std::log(tau) - 0.5 * tau * problem_->rss(ci) + 0.5 * chol1_.log_det() -
           0.5 * (V1_.quad_form(ci) - 2.0 * ci.dot(v1_) + q1) + prior_terms(theta, gamma, tau, kappa);
}

double MarginalPosterior::log_conditional(const Eigen::VectorXd& c, std::span<const double> theta, double gamma,
                                          double tau, double kappa) {
    if (c.size() != problem_->n_coef()) throw ValidationError("coefficient vector has the wrong length");
    bool extra = false;
    if (!build(theta, gamma, tau, kappa, extra)) return kNegInf;
    const Eigen::VectorXd d = problem_->order().to_internal(c) - chol2_.solve(v2_);
    return 0.5 * chol2_.log_det() - 0.5 * V2_.quad_form(d);
}

double log_marginal_posterior(const SmoothingProblem& problem, std::span<const double> theta, double gamma,
                              double tau, const Hyperparams& hyper, bool use_conditions, double kappa,
                              bool kappa_random) {
    MarginalPosterior post(problem, hyper, use_conditions, kappa_random);
    return post(theta, gamma, tau, kappa);
}

// ---- samplers ----

void ChainSettings::validate() const {
    if (iterations <= 0) throw ValidationError("chain iterations must be positive");
    if (burn_in < 0 || burn_in >= iterations) throw ValidationError("burn-in must lie in [0, iterations)");
    if (thin <= 0) throw ValidationError("thinning must be positive");
    if (mode == ConstraintMode::lagrange)
        throw ValidationError("the Bayesian sampler supports constraint modes none and ls only");
    if (mode == ConstraintMode::ls && !positive_finite(kappa)) throw ValidationError("kappa must be positive");
    if (!(target_low > 0.0 && target_low < target_high && target_high < 1.0))
        throw ValidationError("acceptance target must satisfy 0 < low < high < 1");
    if (!(min_acceptance >= 0.0 && min_acceptance < 1.0)) throw ValidationError("minimum acceptance must lie in [0, 1)");
}

std::vector<double> PosteriorChain::column(int k) const {
    std::vector<double> out(static_cast<std::size_t>(draws.rows()));
    for (Eigen::Index i = 0; i < draws.rows(); ++i) out[static_cast<std::size_t>(i)] = draws(i, k);
    return out;
}

namespace {

// Gaussian random-walk block with burn-in adaptation of scale and shape.
class AdaptiveWalk {
public:
    AdaptiveWalk(Eigen::VectorXd sd, double target) : target_(target) {
        L_ = sd.asDiagonal();
        dim_ = static_cast<int>(sd.size());
    }

    [[nodiscard]] int dim() const noexcept { return dim_; }
    [[nodiscard]] double scale() const noexcept { return std::exp(log_scale_); }

    Eigen::VectorXd propose(const Eigen::VectorXd& x, std::mt19937_64& rng) const {
        std::normal_distribution<double> nd;
        Eigen::VectorXd z(dim_);
        for (int i = 0; i < dim_; ++i) z[i] = nd(rng);
        return x + scale() * (L_ * z);
    }

    // Robbins-Monro step on the log scale; the shape follows the empirical
    // covariance of the second half of the burn-in so far.
    void adapt(int t, bool accepted, const Eigen::VectorXd& x) {
        const double eta = std::min(0.05, 1.0 / std::sqrt(static_cast<double>(t + 1)));
        log_scale_ += eta * ((accepted ? 1.0 : 0.0) - target_);
        history_.push_back(x);
        const int n = static_cast<int>(history_.size());
        if (n >= 400 && n % 100 == 0) {
            const int from = n / 2;
            const int m = n - from;
            Eigen::VectorXd mean = Eigen::VectorXd::Zero(dim_);
            for (int i = from; i < n; ++i) mean += history_[static_cast<std::size_t>(i)];
            mean /= m;
            Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(dim_, dim_);
            for (int i = from; i < n; ++i) {
                const Eigen::VectorXd d = history_[static_cast<std::size_t>(i)] - mean;
                cov.noalias() += d * d.transpose();
            }
            cov /= std::max(m - 1, 1);
            const double tr = cov.trace() / dim_;
            if (!(tr > 0.0) || !std::isfinite(tr)) return;
            cov.diagonal().array() += 1e-8 * tr;
            Eigen::LLT<Eigen::MatrixXd> llt(cov);
            if (llt.info() != Eigen::Success) return;
            // shape only; the step size stays with the scale adaptation
            const double old = (L_ * L_.transpose()).trace() / dim_;
            const Eigen::MatrixXd Lnew = llt.matrixL();
            L_ = Lnew * std::sqrt(old / tr);
        }
    }

private:
    double target_;
    int dim_ = 0;
    double log_scale_ = 0.0;
    Eigen::MatrixXd L_;
    std::vector<Eigen::VectorXd> history_;
};

}  // namespace

PosteriorChain run_chain(const SmoothingProblem& problem, const Hyperparams& hyper, const ChainSettings& settings) {
    settings.validate();
    const std::size_t nt = problem.pde().theta_names.size();
    hyper.validate(nt);
    const bool use_cond = settings.mode == ConstraintMode::ls;
    if (use_cond && !problem.has_constraints()) throw ValidationError("constraint mode 'ls' needs conditions");
    MarginalPosterior post(problem, hyper, use_cond, use_cond && settings.kappa_random);

    PosteriorChain chain;
    chain.settings = settings;
    chain.names = problem.pde().theta_names;
    chain.names.emplace_back("gamma");
    chain.names.emplace_back("tau");
    const bool kappa_random = post.kappa_random();
    if (kappa_random) chain.names.emplace_back("kappa");

    std::vector<double> theta;
    double gamma = settings.gamma_init, tau = settings.tau_init;
    if (settings.init_from_fit) {
        FitSettings f = settings.fit;
        f.mode = settings.mode;
        f.kappa = settings.kappa;
        if (f.theta0.empty()) f.theta0 = settings.theta_init.empty() ? std::vector<double>(nt, 1.0) : settings.theta_init;
        const FreqFit fit = fit_frequentist(problem, f);
        theta = fit.theta_hat;
        gamma = fit.gamma_hat;
        tau = fit.tau_hat;
    } else {
        if (settings.theta_init.size() != nt) throw ValidationError("theta_init has the wrong number of components");
        theta = settings.theta_init;
    }
    double kappa = settings.kappa;

    std::vector<int> free;
    for (std::size_t k = 0; k < nt; ++k) {
        if (!hyper.theta_prior.empty() && hyper.theta_prior[k].fixed())
            theta[k] = hyper.theta_prior[k].a;
        else
            free.push_back(static_cast<int>(k));
    }
    chain.init = theta;
    chain.init.push_back(gamma);
    chain.init.push_back(tau);
    if (kappa_random) chain.init.push_back(kappa);

    double lp = post(theta, gamma, tau, kappa);
    if (!std::isfinite(lp)) throw NumericalError("log posterior is not finite at the initial state");

    const double target = 0.5 * (settings.target_low + settings.target_high);
    Eigen::VectorXd sd_t(static_cast<Eigen::Index>(free.size()));
    for (std::size_t i = 0; i < free.size(); ++i)
        sd_t[static_cast<Eigen::Index>(i)] = 1e-3 * std::max(std::abs(theta[static_cast<std::size_t>(free[i])]), 1e-3);
    AdaptiveWalk walk_t(sd_t, target);
    const int np = kappa_random ? 3 : 2;
    AdaptiveWalk walk_p(Eigen::VectorXd::Constant(np, 0.05), target);

    auto rng = make_rng(settings.seed, {0x6368u});
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    auto accept = [&](double lp_new) {
        if (!std::isfinite(lp_new)) return false;
        return lp_new >= lp || std::log(unif(rng)) < lp_new - lp;
    };

    const int kept = (settings.iterations - settings.burn_in + settings.thin - 1) / settings.thin;
    chain.draws.resize(kept, static_cast<Eigen::Index>(chain.names.size()));
    chain.log_post.reserve(static_cast<std::size_t>(kept));
    long acc_t = 0, acc_p = 0;
    int row = 0;
    std::vector<double> th_new(theta);
    Eigen::VectorXd xt(sd_t.size());
    Eigen::VectorXd xp(np);
    for (int it = 0; it < settings.iterations; ++it) {
        const bool burn = it < settings.burn_in;
        if (!free.empty()) {
            for (std::size_t i = 0; i < free.size(); ++i)
                xt[static_cast<Eigen::Index>(i)] = theta[static_cast<std::size_t>(free[i])];
            const Eigen::VectorXd prop = walk_t.propose(xt, rng);
            th_new = theta;
            for (std::size_t i = 0; i < free.size(); ++i)
                th_new[static_cast<std::size_t>(free[i])] = prop[static_cast<Eigen::Index>(i)];
            const double lp_new = post(th_new, gamma, tau, kappa);
            const bool ok = accept(lp_new);
            if (ok) {
                theta = th_new;
                lp = lp_new;
                xt = prop;
            }
            if (burn)
                walk_t.adapt(it, ok, xt);
            else
                acc_t += ok;
        }
        {
            xp[0] = std::log(gamma);
            xp[1] = std::log(tau);
            if (kappa_random) xp[2] = std::log(kappa);
            const Eigen::VectorXd prop = walk_p.propose(xp, rng);
            const double g = std::exp(prop[0]), t = std::exp(prop[1]);
            const double k = kappa_random ? std::exp(prop[2]) : kappa;
            // log-scale walk: add the Jacobian of the exp transform
            double jac_new = prop[0] + prop[1], jac_old = xp[0] + xp[1];
            if (kappa_random) {
                jac_new += prop[2];
                jac_old += xp[2];
            }
            const double lp_new = post(theta, g, t, k);
            bool ok = false;
            if (std::isfinite(lp_new)) {
                const double a = (lp_new + jac_new) - (lp + jac_old);
                ok = a >= 0.0 || std::log(unif(rng)) < a;
            }
            if (ok) {
                gamma = g;
                tau = t;
                kappa = k;
                lp = lp_new;
                xp = prop;
            }
            if (burn)
                walk_p.adapt(it, ok, xp);
            else
                acc_p += ok;
        }
        if (!burn && (it - settings.burn_in) % settings.thin == 0) {
            for (std::size_t k = 0; k < nt; ++k) chain.draws(row, static_cast<Eigen::Index>(k)) = theta[k];
            chain.draws(row, static_cast<Eigen::Index>(nt)) = gamma;
            chain.draws(row, static_cast<Eigen::Index>(nt + 1)) = tau;
            if (kappa_random) chain.draws(row, static_cast<Eigen::Index>(nt + 2)) = kappa;
            chain.log_post.push_back(lp);
            ++row;
        }
    }
    const double n_after = settings.iterations - settings.burn_in;
    chain.acceptance_theta = free.empty() ? 1.0 : static_cast<double>(acc_t) / n_after;
    chain.acceptance_precision = static_cast<double>(acc_p) / n_after;
    chain.theta_scale = free.empty() ? 0.0 : walk_t.scale();
    chain.precision_scale = walk_p.scale();
    if (chain.acceptance_theta < settings.min_acceptance || chain.acceptance_precision < settings.min_acceptance) {
        std::ostringstream os;
        os << "sampler acceptance below " << settings.min_acceptance << " after adaptation: theta block "
           << chain.acceptance_theta << " (scale " << chain.theta_scale << "), precision block "
           << chain.acceptance_precision << " (scale " << chain.precision_scale << ")";
        throw NumericalError(os.str());
    }
    return chain;
}

PosteriorChain run_gibbs(const SmoothingProblem& problem, std::span<const double> theta, const Hyperparams& hyper,
                         const ChainSettings& settings) {
    settings.validate();
    hyper.validate(problem.pde().theta_names.size());
    if (problem.has_constraints()) throw ValidationError("the Gibbs sampler supports problems without conditions only");
    if (theta.size() != problem.pde().theta_names.size())
        throw ValidationError("theta has the wrong number of components");
    if (!positive_finite(settings.gamma_init) || !positive_finite(settings.tau_init))
        throw ValidationError("Gibbs sampler needs positive initial gamma and tau");

    BandMatrix R;
    Eigen::VectorXd r;
    double l = 0.0;
    problem.penalty().assemble(theta, R, r, l);
    R.add_diagonal(penalty_floor(R.mean_diagonal()));
    BandCholesky cholR;
    factorize_with_floor(cholR, R);
    const Eigen::VectorXd mu = r.isZero(0.0) ? Eigen::VectorXd::Zero(r.size()) : Eigen::VectorXd(-cholR.solve(r));

    PosteriorChain chain;
    chain.settings = settings;
    chain.names = {"gamma", "tau"};
    const int kept = (settings.iterations - settings.burn_in + settings.thin - 1) / settings.thin;
    chain.draws.resize(kept, 2);
    chain.init = {settings.gamma_init, settings.tau_init};

    auto rng = make_rng(settings.seed, {0x6762u});
    std::normal_distribution<double> nd;
    double gamma = settings.gamma_init, tau = settings.tau_init;
    const GammaParams tau_shape{0.5 * problem.n_obs() + hyper.a_tau, 0.0};
    const GammaParams gamma_shape{0.5 * problem.n_coef() + hyper.a_gamma, 0.0};
    BandMatrix V2;
    BandCholesky chol;
    Eigen::VectorXd z(problem.n_coef());
    int row = 0;
    for (int it = 0; it < settings.iterations; ++it) {
        V2 = R;
        V2.scale(gamma);
        V2.axpy(tau, problem.BtB());
        if (!chol.factorize(V2)) throw NumericalError("V2 is not positive definite in the Gibbs sampler");
        const Eigen::VectorXd v2 = tau * problem.Btz() + gamma * R.multiply(mu);
        for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = nd(rng);
        const Eigen::VectorXd c = chol.solve(v2) + chol.solve_transposed_factor(z);
        tau = draw_gamma({tau_shape.shape, 0.5 * problem.rss(c) + hyper.b_tau}, rng);
        gamma = draw_gamma({gamma_shape.shape, 0.5 * R.quad_form(c - mu) + hyper.b_gamma}, rng);
        if (it >= settings.burn_in && (it - settings.burn_in) % settings.thin == 0) {
            chain.draws(row, 0) = gamma;
            chain.draws(row, 1) = tau;
            ++row;
        }
    }
    chain.acceptance_theta = 1.0;
    chain.acceptance_precision = 1.0;
    return chain;
}

// ---- summaries ----

std::pair<double, double> hpd_interval(std::vector<double> draws, double level) {
    if (!(level > 0.0 && level < 1.0)) throw ValidationError("HPD level must lie in (0, 1)");
    if (draws.size() < 100)
        throw ValidationError("HPD interval needs at least 100 draws, got " + std::to_string(draws.size()));
    std::sort(draws.begin(), draws.end());
    const std::size_t n = draws.size();
    const auto k = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(level * static_cast<double>(n))));
    std::size_t best = 0;
    double width = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i + k <= n; ++i) {
        const double w = draws[i + k - 1] - draws[i];
        if (w < width) {
            width = w;
            best = i;
        }
    }
    return {draws[best], draws[best + k - 1]};
}

double mcse_batch_means(const std::vector<double>& draws) {
    const std::size_t n = draws.size();
    if (n < 4) throw ValidationError("batch means need at least 4 draws");
    const auto b = static_cast<std::size_t>(std::floor(std::sqrt(static_cast<double>(n))));
    const std::size_t a = n / b;
    const std::size_t start = n - a * b;
    std::vector<double> means(a, 0.0);
    for (std::size_t j = 0; j < a; ++j) {
        for (std::size_t i = 0; i < b; ++i) means[j] += draws[start + j * b + i];
        means[j] /= static_cast<double>(b);
    }
    double mean = 0.0;
    for (double m : means) mean += m;
    mean /= static_cast<double>(a);
    double ss = 0.0;
    for (double m : means) ss += (m - mean) * (m - mean);
    const double sigma2 = static_cast<double>(b) * ss / static_cast<double>(a - 1);
    return std::sqrt(sigma2 / static_cast<double>(a * b));
}

std::vector<ParameterSummary> summarize(const PosteriorChain& chain) {
    std::vector<ParameterSummary> out;
    for (std::size_t k = 0; k < chain.names.size(); ++k) {
        const std::vector<double> col = chain.column(static_cast<int>(k));
        ParameterSummary s;
        s.name = chain.names[k];
        const double n = static_cast<double>(col.size());
        for (double x : col) s.mean += x;
        s.mean /= n;
        for (double x : col) s.sd += (x - s.mean) * (x - s.mean);
        s.sd = std::sqrt(s.sd / std::max(n - 1.0, 1.0));
        s.mcse = mcse_batch_means(col);
        std::tie(s.hpd80_lo, s.hpd80_hi) = hpd_interval(col, 0.80);
        std::tie(s.hpd95_lo, s.hpd95_hi) = hpd_interval(col, 0.95);
        out.push_back(std::move(s));
    }
    return out;
}

void write_chain(const PosteriorChain& chain, const std::string& path, const std::string& header_comment) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open " + path + " for writing");
    if (!header_comment.empty()) os << "# " << header_comment << '\n';
    for (std::size_t k = 0; k < chain.names.size(); ++k) os << (k ? "," : "") << chain.names[k];
    os << ",log_post\n";
    os << std::setprecision(17);
    for (Eigen::Index i = 0; i < chain.draws.rows(); ++i) {
        for (Eigen::Index k = 0; k < chain.draws.cols(); ++k) os << (k ? "," : "") << chain.draws(i, k);
        os << ',' << (static_cast<std::size_t>(i) < chain.log_post.size() ? chain.log_post[static_cast<std::size_t>(i)]
                                                                         : std::nan(""));
        os << '\n';
    }
    if (!os) throw IoError("failed writing " + path);
}

}  // namespace pspde
