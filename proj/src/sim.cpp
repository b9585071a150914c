#include "pspde/sim.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>

#include "pspde/error.hpp"
#include "pspde/rng.hpp"

namespace pspde {

double diffusion_solution(double x1, double x2, std::span<const double> theta) {
    if (theta.size() != 2) throw ValidationError("diffusion solution needs two parameters");
    if (theta[0] == 0.0) throw ValidationError("diffusion solution needs theta1 != 0");
    const double s = x1 - x2 / theta[0];
    return std::exp(-(theta[1] / theta[0]) * x2) / (1.0 + s * s);
}

PdeSpec diffusion_pde() {
    PdeSpec pde;
    pde.p = 2;
    pde.theta_names = {"theta1", "theta2"};
    pde.terms.push_back({Multiplier{1.0, {}}, {}, {1, 0}, "u_x1"});
    pde.terms.push_back({Multiplier{1.0, {1, 0}}, {}, {0, 1}, "theta1*u_x2"});
    pde.terms.push_back({Multiplier{1.0, {0, 1}}, {}, {0, 0}, "theta2*u"});
    return pde;
}

std::vector<Condition> diffusion_conditions(const TensorBasis& basis) {
    Condition init;
    init.points = face_knot_points(basis, 1, false);
    init.deriv_orders = {0, 0};
    init.target = [](std::span<const double> x) { return 1.0 / (1.0 + x[0] * x[0]); };
    init.label = "initial";
    return {init};
}

std::string EstimatorSpec::label() const {
    return std::string(method == EstimatorMethod::freq ? "freq" : "bayes") + "-" + to_string(mode);
}

std::vector<double> AxisSpec::points() const {
    if (n < 2 || !(lo < hi)) throw ValidationError("grid axis needs n >= 2 and lo < hi");
    std::vector<double> x(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) x[static_cast<std::size_t>(i)] = lo + (hi - lo) * i / (n - 1);
    x.back() = hi;
    return x;
}

BasisSpec1D BasisDimSpec::build() const {
    if (!interior_knots.empty()) return build_knots(lo, hi, degree, interior_knots);
    return equidistant_basis(lo, hi, degree, n_basis);
}

StudyConfig::StudyConfig() {
    fit.theta0 = {1.0, 1.0};
    fit.mode = ConstraintMode::ls;
    chain.mode = ConstraintMode::ls;
}

void StudyConfig::validate() const {
    if (theta_true.size() != 2) throw ValidationError("the diffusion study has two parameters");
    if (theta_true[0] == 0.0 || !std::isfinite(theta_true[0]) || !std::isfinite(theta_true[1]))
        throw ValidationError("theta_true must be finite with theta1 != 0");
    if (noise_sd.empty()) throw ValidationError("at least one noise level is needed");
    for (double s : noise_sd)
        if (!(s >= 0.0) || !std::isfinite(s)) throw ValidationError("noise sd must be finite and non-negative");
    if (grid.size() != 2 || basis.size() != 2) throw ValidationError("grid and basis need two dimensions");
    if (replicates < 2) throw ValidationError("the study needs at least 2 replicates");
    if (estimators.empty()) throw ValidationError("no estimators configured");
    for (const auto& e : estimators)
        if (e.method == EstimatorMethod::bayes && e.mode == ConstraintMode::lagrange)
            throw ValidationError("the Bayesian estimator supports conditions by least squares only");
    if (fit.theta0.size() != 2) throw ValidationError("theta0 needs two components");
    for (int d = 0; d < 2; ++d) {
        const auto& g = grid[static_cast<std::size_t>(d)];
        const auto& b = basis[static_cast<std::size_t>(d)];
        static_cast<void>(g.points());
        if (g.lo < b.lo || g.hi > b.hi)
            throw ValidationError("grid axis " + std::to_string(d + 1) + " leaves the basis domain");
    }
    static_cast<void>(tensor_basis());
    quadrature.validate();
}

TensorBasis StudyConfig::tensor_basis() const {
    std::vector<BasisSpec1D> dims;
    for (const auto& b : basis) dims.push_back(b.build());
    return TensorBasis(std::move(dims));
}

namespace {

GridAxes study_axes(const StudyConfig& config) {
    GridAxes axes;
    for (const auto& g : config.grid) axes.push_back(g.points());
    return axes;
}

Eigen::VectorXd analytic_surface(const Eigen::MatrixXd& pts, std::span<const double> theta) {
    Eigen::VectorXd u(pts.rows());
    for (Eigen::Index i = 0; i < pts.rows(); ++i) u[i] = diffusion_solution(pts(i, 0), pts(i, 1), theta);
    return u;
}

}  // namespace

Dataset simulate_dataset(const StudyConfig& config, int level, int replicate) {
    if (level < 0 || level >= static_cast<int>(config.noise_sd.size()))
        throw ValidationError("noise level index " + std::to_string(level) + " out of range");
    if (replicate < 0) throw ValidationError("replicate index must be non-negative");
    Dataset d = Dataset::on_grid(study_axes(config), {});
    Eigen::VectorXd zeta = analytic_surface(d.points, config.theta_true);
    const double sd = config.noise_sd[static_cast<std::size_t>(level)];
    auto rng = make_rng(config.seed, {static_cast<std::uint64_t>(level), static_cast<std::uint64_t>(replicate)});
    std::normal_distribution<double> nd;
    for (Eigen::Index i = 0; i < zeta.size(); ++i) zeta[i] += sd * nd(rng);
    d.zeta = std::move(zeta);
    return d;
}

RelativeMetrics relative_metrics(const std::vector<double>& estimates, double truth) {
    if (estimates.empty()) throw ValidationError("no estimates to summarise");
    if (truth == 0.0 || !std::isfinite(truth)) throw ValidationError("relative metrics need a finite non-zero truth");
    const double n = static_cast<double>(estimates.size());
    double m = 0.0, m2 = 0.0;
    for (double e : estimates) {
        const double rel = (e - truth) / truth;
        m += rel;
        m2 += rel * rel;
    }
    m /= n;
    m2 /= n;
    double var = 0.0;
    for (double e : estimates) {
        const double rel = (e - truth) / truth;
        var += (rel - m) * (rel - m);
    }
    var /= n;
    return {100.0 * m, std::sqrt(m2), std::sqrt(var)};
}

namespace {

ReplicateResult run_one(const StudyConfig& config, const SmoothingProblem& base, int level, int rep, int est) {
    ReplicateResult out;
    out.level = level;
    out.replicate = rep;
    out.estimator = est;
    const EstimatorSpec& spec = config.estimators[static_cast<std::size_t>(est)];
    try {
        const Dataset data = simulate_dataset(config, level, rep);
        const SmoothingProblem problem = base.with_response(data.zeta);
        if (spec.method == EstimatorMethod::freq) {
            FitSettings fs = config.fit;
            fs.mode = spec.mode;
            const FreqFit fit = fit_frequentist(problem, fs);
            if (!fit.converged) throw NumericalError("fit did not converge");
            out.estimate = fit.theta_hat;
            out.gamma = fit.gamma_hat;
            out.tau = fit.tau_hat;
        } else {
            ChainSettings cs = config.chain;
            cs.mode = spec.mode;
            cs.fit.mode = spec.mode;
            if (cs.fit.theta0.empty()) cs.fit.theta0 = config.fit.theta0;
            auto seeder = make_rng(config.seed, {static_cast<std::uint64_t>(level), static_cast<std::uint64_t>(rep),
                                                 static_cast<std::uint64_t>(est), 0xBA7E5ull});
            cs.seed = seeder();
            const PosteriorChain chain = run_chain(problem, config.hyper, cs);
            const auto summary = summarize(chain);
            for (const auto& s : summary) {
                if (s.name == "gamma") {
                    out.gamma = s.mean;
                    continue;
                }
                if (s.name == "kappa") continue;
                if (s.name == "tau") out.tau = s.mean;
                else out.estimate.push_back(s.mean);
                out.post_sd.push_back(s.sd);
                out.lo80.push_back(s.hpd80_lo);
                out.hi80.push_back(s.hpd80_hi);
                out.lo95.push_back(s.hpd95_lo);
                out.hi95.push_back(s.hpd95_hi);
            }
        }
        out.ok = true;
    } catch (const std::exception& e) {
        out.ok = false;
        out.error = e.what();
    }
    return out;
}

}  // namespace

MetricsTable run_study(const StudyConfig& config) {
    config.validate();
    const TensorBasis basis = config.tensor_basis();
    const PdeSpec pde = diffusion_pde();
    std::optional<ConstraintSet> cons;
    bool need_cons = false;
    for (const auto& e : config.estimators) need_cons = need_cons || e.mode != ConstraintMode::none;
    if (need_cons) cons = build_constraints(diffusion_conditions(basis), basis);
    const Dataset d0 = simulate_dataset(config, 0, 0);
    const SmoothingProblem base(basis, pde, d0, cons, config.quadrature);

    const int L = static_cast<int>(config.noise_sd.size());
    const int R = config.replicates;
    const int E = static_cast<int>(config.estimators.size());
    const int total = L * R * E;
    std::vector<ReplicateResult> results(static_cast<std::size_t>(total));
#pragma omp parallel for schedule(dynamic)
    for (int t = 0; t < total; ++t) {
        const int est = t % E;
        const int rep = (t / E) % R;
        const int level = t / (E * R);
        results[static_cast<std::size_t>(t)] = run_one(config, base, level, rep, est);
    }

    MetricsTable table;
    // deterministic fold: tasks are stored by (level, replicate, estimator)
    for (int level = 0; level < L; ++level) {
        const double sd = config.noise_sd[static_cast<std::size_t>(level)];
        const double tau_true = sd > 0.0 ? 1.0 / (sd * sd) : std::numeric_limits<double>::infinity();
        for (int est = 0; est < E; ++est) {
            const EstimatorSpec& spec = config.estimators[static_cast<std::size_t>(est)];
            std::vector<const ReplicateResult*> ok;
            int failed = 0;
            for (int rep = 0; rep < R; ++rep) {
                const auto& r = results[static_cast<std::size_t>((level * R + rep) * E + est)];
                if (r.ok)
                    ok.push_back(&r);
                else
                    ++failed;
            }
            table.failures += failed;
            if (failed * 10 > R) {
                std::string first;
                for (int rep = 0; rep < R && first.empty(); ++rep) {
                    const auto& r = results[static_cast<std::size_t>((level * R + rep) * E + est)];
                    if (!r.ok) first = "replicate " + std::to_string(rep) + ": " + r.error;
                }
                throw NumericalError(spec.label() + " at noise sd " + std::to_string(sd) + ": " +
                                     std::to_string(failed) + " of " + std::to_string(R) +
                                     " replicates failed (more than 10%); first failure: " + first);
            }
            const bool bayes = spec.method == EstimatorMethod::bayes;
            const std::vector<std::string> names{"theta1", "theta2", "tau"};
            for (std::size_t k = 0; k < names.size(); ++k) {
                MetricsRow row;
                row.estimator = spec.label();
                row.noise_sd = sd;
                row.parameter = names[k];
                row.truth = k < 2 ? config.theta_true[k] : tau_true;
                row.replicates = static_cast<int>(ok.size());
                std::vector<double> est_k;
                for (const auto* r : ok) est_k.push_back(k < 2 ? r->estimate[k] : r->tau);
                double mean = 0.0;
                for (double e : est_k) mean += e;
                row.mean_estimate = mean / static_cast<double>(est_k.size());
                if (std::isfinite(row.truth)) {
                    const RelativeMetrics m = relative_metrics(est_k, row.truth);
                    row.r_bias = m.r_bias;
                    row.r_rmse = m.r_rmse;
                    row.r_std = m.r_std;
                } else {
                    row.r_bias = row.r_rmse = row.r_std = std::nan("");
                }
                if (bayes) {
                    double psd = 0.0;
                    int c80 = 0, c95 = 0;
                    for (const auto* r : ok) {
                        psd += r->post_sd[k];
                        c80 += r->lo80[k] <= row.truth && row.truth <= r->hi80[k];
                        c95 += r->lo95[k] <= row.truth && row.truth <= r->hi95[k];
                    }
                    const double n = static_cast<double>(ok.size());
                    row.mpsd = psd / n;
                    row.cp80 = 100.0 * c80 / n;
                    row.cp95 = 100.0 * c95 / n;
                }
                table.rows.push_back(std::move(row));
            }
            MetricsRow g;
            g.estimator = spec.label();
            g.noise_sd = sd;
            g.parameter = "gamma";
            g.truth = g.r_bias = g.r_rmse = g.r_std = std::nan("");
            g.replicates = static_cast<int>(ok.size());
            for (const auto* r : ok) g.mean_estimate += r->gamma;
            g.mean_estimate /= static_cast<double>(ok.size());
            table.rows.push_back(std::move(g));
        }
    }
    table.raw = std::move(results);
    return table;
}

void MetricsTable::write(const std::string& path, const std::string& header_comment) const {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open " + path + " for writing");
    if (!header_comment.empty()) os << "# " << header_comment << '\n';
    os << "# e = (estimate - truth) / truth over successful replicates\n"
          "# r_bias_pct = 100 * mean(e); r_rmse = sqrt(mean(e^2)); r_std = population sd of e\n"
          "# mpsd = mean posterior sd (absolute); cp80, cp95 = percent of replicates whose HPD interval covers truth\n"
          "# estimate = point estimate (posterior mean for bayes); failures = "
       << failures << '\n';
    os << "estimator,noise_sd,parameter,truth,replicates,r_bias_pct,r_rmse,r_std,mpsd,cp80,cp95,mean_estimate\n";
    os << std::setprecision(10);
    for (const auto& r : rows)
        os << r.estimator << ',' << r.noise_sd << ',' << r.parameter << ',' << r.truth << ',' << r.replicates << ','
           << r.r_bias << ',' << r.r_rmse << ',' << r.r_std << ',' << r.mpsd << ',' << r.cp80 << ',' << r.cp95 << ','
           << r.mean_estimate << '\n';
    if (!os) throw IoError("failed writing " + path);
}

void MetricsTable::write_raw(const std::string& path, const std::vector<std::string>& param_names,
                             const std::string& header_comment) const {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open " + path + " for writing");
    if (!header_comment.empty()) os << "# " << header_comment << '\n';
    os << "level,replicate,estimator,ok";
    for (const auto& n : param_names) os << ',' << n;
    os << ",tau,gamma,error\n";
    os << std::setprecision(17);
    for (const auto& r : raw) {
        os << r.level << ',' << r.replicate << ',' << r.estimator << ',' << (r.ok ? 1 : 0);
        for (std::size_t k = 0; k < param_names.size(); ++k)
            os << ',' << (k < r.estimate.size() ? r.estimate[k] : std::nan(""));
        std::string err = r.error;
        std::replace(err.begin(), err.end(), ',', ';');
        std::replace(err.begin(), err.end(), '\n', ' ');
        os << ',' << r.tau << ',' << r.gamma << ',' << err << '\n';
    }
    if (!os) throw IoError("failed writing " + path);
}

}  // namespace pspde
