#include "pspde/finance.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "pspde/error.hpp"
#include "pspde/rng.hpp"

namespace pspde {

const char* to_string(Coordinates c) { return c == Coordinates::raw ? "raw" : "scaled"; }

namespace {

double norm_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

Polynomial monomial(int k) {
    Polynomial p;
    p.coeffs.assign(static_cast<std::size_t>(k + 1), 0.0);
    p.coeffs.back() = 1.0;
    return p;
}

}  // namespace

double bs_price_closed_form(double spot, double strike, double tau, double rate, double sigma) {
    if (!(spot > 0.0) || !(strike > 0.0)) throw ValidationError("spot and strike must be positive");
    if (!(tau >= 0.0)) throw ValidationError("time to maturity must be non-negative");
    if (!(sigma > 0.0)) throw ValidationError("sigma must be positive");
    if (!std::isfinite(rate)) throw ValidationError("rate must be finite");
    if (tau == 0.0) return std::max(spot - strike, 0.0);
    const double sq = sigma * std::sqrt(tau);
    const double d1 = (std::log(spot / strike) + (rate + 0.5 * sigma * sigma) * tau) / sq;
    const double d2 = d1 - sq;
    return spot * norm_cdf(d1) - strike * std::exp(-rate * tau) * norm_cdf(d2);
}

BsProblem bs_spec(double rate, const BsDomain& domain, double strike_ref, Coordinates coordinates, int n_interior,
                  int degree, double strike_gap) {
    if (!std::isfinite(rate)) throw ValidationError("rate must be finite");
    if (rate < 0.0) throw ValidationError("rate must be non-negative");
    if (!(strike_ref > 0.0)) throw ValidationError("reference strike must be positive");
    if (!(domain.x_lo < domain.x_hi) || !(domain.t_lo < domain.t_hi) || !std::isfinite(domain.x_lo) ||
        !std::isfinite(domain.x_hi) || !std::isfinite(domain.t_lo) || !std::isfinite(domain.t_hi))
        throw ValidationError("Black-Scholes domain is degenerate");
    if (domain.t_lo < 0.0) throw ValidationError("time to maturity must start at 0 or later");
    const bool raw = coordinates == Coordinates::raw;
    const double kink = raw ? strike_ref : 0.0;
    if (!(domain.x_lo < kink && kink < domain.x_hi))
        throw ValidationError(std::string("domain must contain the strike (") + (raw ? "S = E" : "log-moneyness 0") +
                              ") strictly inside");
    if (raw && domain.x_lo < 0.0) throw ValidationError("spot range must be non-negative");
    if (n_interior < 0) throw ValidationError("interior knot count must be non-negative");
    if (!(strike_gap >= 0.0)) throw ValidationError("strike gap must be non-negative");

    BsProblem bs;
    bs.domain = domain;
    bs.coordinates = coordinates;
    bs.rate = rate;
    bs.strike_ref = strike_ref;
    bs.basis = TensorBasis({equidistant_basis(domain.x_lo, domain.x_hi, degree, n_interior + degree + 1),
                            equidistant_basis(domain.t_lo, domain.t_hi, degree, n_interior + degree + 1)});

    PdeSpec& pde = bs.pde;
    pde.p = 2;
    pde.theta_names = {"sigma"};
    pde.terms.push_back({Multiplier{-1.0, {}}, {}, {0, 1}, "-u_t"});
    if (raw) {
        pde.terms.push_back({Multiplier{rate, {}}, {monomial(1), Polynomial{}}, {1, 0}, "r*S*u_S"});
        pde.terms.push_back({Multiplier{0.5, {2}}, {monomial(2), Polynomial{}}, {2, 0}, "sigma^2/2*S^2*u_SS"});
    } else {
        pde.terms.push_back({Multiplier{rate, {}}, {}, {1, 0}, "r*u_m"});
        pde.terms.push_back({Multiplier{0.5, {2}}, {}, {2, 0}, "sigma^2/2*u_mm"});
        pde.terms.push_back({Multiplier{-0.5, {2}}, {}, {1, 0}, "-sigma^2/2*u_m"});
    }
    pde.terms.push_back({Multiplier{-rate, {}}, {}, {0, 0}, "-r*u"});
    pde.validate();
    pde.check_basis(bs.basis);

    const double E = strike_ref;
    const double xh = domain.x_hi;
    Condition terminal;
    {
        const Eigen::MatrixXd all = face_knot_points(bs.basis, 1, false);
        const double gap = strike_gap * (domain.x_hi - domain.x_lo) / (n_interior + 1) * (1.0 - 1e-9);
        std::vector<Eigen::Index> keep;
        for (Eigen::Index i = 0; i < all.rows(); ++i)
            if (!(std::abs(all(i, 0) - kink) < gap)) keep.push_back(i);
        terminal.points = all(keep, Eigen::all);
    }
    terminal.deriv_orders = {0, 0};
    if (raw)
        terminal.target = [E](std::span<const double> x) { return std::max(x[0] - E, 0.0); };
    else
        terminal.target = [](std::span<const double> x) { return std::max(std::exp(x[0]) - 1.0, 0.0); };
    terminal.label = "terminal payoff";

    Condition low;
    low.points = face_knot_points(bs.basis, 0, false, false);
    low.deriv_orders = {0, 0};
    low.target = [](std::span<const double>) { return 0.0; };
    low.label = "low edge";

    Condition high;
    high.points = face_knot_points(bs.basis, 0, true, false);
    high.deriv_orders = {0, 0};
    if (raw)
        high.target = [E, xh, rate](std::span<const double> x) { return xh - E * std::exp(-rate * x[1]); };
    else
        high.target = [xh, rate](std::span<const double> x) { return std::exp(xh) - std::exp(-rate * x[1]); };
    high.label = "high edge";

    bs.conditions = {terminal, low, high};
    bs.constraints = build_constraints(bs.conditions, bs.basis);
    return bs;
}

// ---- quotes ----

namespace {

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

std::vector<std::string> split(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(trim(cell));
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

bool parse_double(const std::string& s, double& v) {
    if (s.empty()) return false;
    const char* b = s.data();
    const char* e = b + s.size();
    if (*b == '+') ++b;
    const auto res = std::from_chars(b, e, v);
    return res.ec == std::errc() && res.ptr == e;
}

}  // namespace

std::vector<OptionQuote> ingest_options(const std::string& path, std::vector<std::string>* diagnostics) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open option file " + path);
    std::string line;
    int lineno = 0;
    std::vector<std::string> header;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        header = split(t);
        break;
    }
    if (header.empty()) throw IoError(path + ": empty file");

    const std::vector<std::string> required{"spot", "strike", "tau", "rate", "price"};
    std::map<std::string, int> col;
    std::vector<std::string> unknown;
    for (std::size_t i = 0; i < header.size(); ++i) {
        const std::string& h = header[i];
        if (std::find(required.begin(), required.end(), h) == required.end() && h != "ivol")
            unknown.push_back(h);
        if (col.count(h)) throw IoError(path + ": duplicate column '" + h + "'");
        col[h] = static_cast<int>(i);
    }
    std::string missing;
    for (const auto& r : required)
        if (!col.count(r)) missing += (missing.empty() ? "" : ", ") + r;
    if (!missing.empty()) throw IoError(path + ": missing columns: " + missing);
    if (!unknown.empty()) {
        std::string u;
        for (const auto& s : unknown) u += (u.empty() ? "" : ", ") + s;
        throw IoError(path + ": unknown columns: " + u);
    }

    std::vector<OptionQuote> quotes;
    std::vector<std::string> diag;
    int rows = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        ++rows;
        const auto cells = split(t);
        const std::string where = path + ":" + std::to_string(lineno) + ": ";
        if (cells.size() != header.size()) {
            diag.push_back(where + "expected " + std::to_string(header.size()) + " fields, found " +
                           std::to_string(cells.size()));
            continue;
        }
        OptionQuote q;
        bool ok = true;
        std::string bad;
        auto get = [&](const char* name, double& v) {
            if (!parse_double(cells[static_cast<std::size_t>(col[name])], v)) {
                ok = false;
                bad = name;
            }
        };
        get("spot", q.spot);
        get("strike", q.strike);
        get("tau", q.tau);
        get("rate", q.rate);
        get("price", q.price);
        if (!ok) {
            diag.push_back(where + "cannot parse '" + bad + "'");
            continue;
        }
        if (col.count("ivol")) {
            const std::string& c = cells[static_cast<std::size_t>(col["ivol"])];
            double v = 0.0;
            if (!c.empty()) {
                if (!parse_double(c, v)) {
                    diag.push_back(where + "cannot parse 'ivol'");
                    continue;
                }
                q.ivol = v;
            }
        }
        std::string why;
        if (!(q.spot > 0.0) || !std::isfinite(q.spot)) why = "spot must be positive";
        else if (!(q.strike > 0.0) || !std::isfinite(q.strike)) why = "strike must be positive";
        else if (!(q.price > 0.0) || !std::isfinite(q.price)) why = "price must be positive";
        else if (!(q.tau >= 0.0) || !std::isfinite(q.tau)) why = "time to maturity must be non-negative";
        else if (!std::isfinite(q.rate)) why = "rate must be finite";
        if (!why.empty()) {
            diag.push_back(where + why);
            continue;
        }
        quotes.push_back(q);
    }
    if (rows == 0) throw IoError(path + ": no data rows");
    const int skipped = rows - static_cast<int>(quotes.size());
    if (diagnostics != nullptr) *diagnostics = diag;
    if (skipped * 20 > rows)
        throw IoError(path + ": " + std::to_string(skipped) + " of " + std::to_string(rows) +
                      " rows invalid (more than 5%); first: " + diag.front());
    return quotes;
}

void write_options(const std::vector<OptionQuote>& quotes, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os << "spot,strike,tau,rate,ivol,price\n" << std::setprecision(17);
    for (const auto& q : quotes) {
        os << q.spot << ',' << q.strike << ',' << q.tau << ',' << q.rate << ',';
        if (q.ivol) os << *q.ivol;
        os << ',' << q.price << '\n';
    }
    if (!os) throw IoError("failed writing " + path);
}

std::vector<OptionQuote> synthetic_quotes(const SyntheticQuotesSpec& spec, std::uint64_t seed) {
    if (spec.n_m < 1 || spec.n_t < 1) throw ValidationError("synthetic grid needs at least one point per axis");
    if (!(spec.noise_sd >= 0.0)) throw ValidationError("noise sd must be non-negative");
    auto lin = [](double lo, double hi, int n, int i) { return n == 1 ? lo : lo + (hi - lo) * i / (n - 1); };
    auto rng = make_rng(seed, {0x6273u});
    std::normal_distribution<double> nd;
    std::vector<OptionQuote> out;
    for (int j = 0; j < spec.n_t; ++j) {
        for (int i = 0; i < spec.n_m; ++i) {
            OptionQuote q;
            q.spot = spec.spot;
            q.strike = spec.spot * std::exp(-lin(spec.m_lo, spec.m_hi, spec.n_m, i));
            q.tau = lin(spec.t_lo, spec.t_hi, spec.n_t, j);
            q.rate = spec.rate;
            q.ivol = spec.sigma;
            q.price = bs_price_closed_form(q.spot, q.strike, q.tau, q.rate, spec.sigma) + spec.noise_sd * nd(rng);
            if (q.price > 0.0) out.push_back(q);
        }
    }
    return out;
}

// ---- calibration ----

Dataset quotes_dataset(const std::vector<OptionQuote>& quotes, Coordinates coordinates, double strike_ref) {
    Dataset d;
    d.points.resize(static_cast<Eigen::Index>(quotes.size()), 2);
    d.zeta.resize(static_cast<Eigen::Index>(quotes.size()));
    for (std::size_t i = 0; i < quotes.size(); ++i) {
        const auto& q = quotes[i];
        const auto r = static_cast<Eigen::Index>(i);
        if (coordinates == Coordinates::scaled) {
            d.points(r, 0) = std::log(q.spot / q.strike);
            d.zeta[r] = q.price / q.strike;
        } else {
            if (q.strike != strike_ref)
                throw ValidationError("raw coordinates need a single strike; quote " + std::to_string(i) +
                                      " has strike " + std::to_string(q.strike));
            d.points(r, 0) = q.spot;
            d.zeta[r] = q.price;
        }
        d.points(r, 1) = q.tau;
    }
    return d;
}

CalibrationResult calibrate_volatility(const std::vector<OptionQuote>& quotes, const CalibrationSettings& settings) {
    if (quotes.size() < 100)
        throw ValidationError("calibration needs at least 100 quotes, got " + std::to_string(quotes.size()));
    if (!(settings.level > 0.0 && settings.level < 1.0)) throw ValidationError("interval level must lie in (0, 1)");
    if (!(settings.sigma0 > 0.0)) throw ValidationError("initial sigma must be positive");
    const bool raw = settings.coordinates == Coordinates::raw;

    double rate = 0.0;
    if (settings.rate) {
        rate = *settings.rate;
    } else {
        for (const auto& q : quotes) rate += q.rate;
        rate /= static_cast<double>(quotes.size());
    }
    const double strike_ref = raw ? quotes.front().strike : 1.0;
    double tmax = 0.0, smax = 0.0;
    for (const auto& q : quotes) {
        tmax = std::max(tmax, q.tau);
        smax = std::max(smax, q.spot);
    }
    BsDomain domain;
    if (settings.domain) {
        domain = *settings.domain;
    } else {
        domain.t_hi = tmax > 0.0 ? tmax : 1.0;
        if (raw) {
            domain.x_lo = 0.0;
            domain.x_hi = std::max(2.0 * strike_ref, 1.05 * smax);
        }
    }

    CalibrationResult out;
    out.method = settings.method;
    out.level = settings.level;
    out.problem = bs_spec(rate, domain, strike_ref, settings.coordinates, settings.n_interior, settings.degree,
                          settings.strike_gap);
    Dataset data = quotes_dataset(quotes, settings.coordinates, strike_ref);
    for (Eigen::Index i = 0; i < data.points.rows(); ++i) {
        const double x = data.points(i, 0), t = data.points(i, 1);
        if (x < domain.x_lo || x > domain.x_hi || t < domain.t_lo || t > domain.t_hi) {
            std::ostringstream os;
            os << "quote " << i << " maps to (" << x << ", " << t << "), outside the domain [" << domain.x_lo << ", "
               << domain.x_hi << "] x [" << domain.t_lo << ", " << domain.t_hi << "]";
            throw ValidationError(os.str());
        }
    }
    out.n_quotes = static_cast<int>(quotes.size());
    std::optional<ConstraintSet> cons;
    if (settings.mode != ConstraintMode::none) cons = out.problem.constraints;
    const SmoothingProblem problem(out.problem.basis, out.problem.pde, data, cons, settings.quadrature);

    FitSettings fs = settings.fit;
    fs.theta0 = {settings.sigma0};
    fs.mode = settings.mode;
    fs.kappa = settings.kappa;
    FreqFit fit = fit_frequentist(problem, fs);
    // sigma enters squared; report the positive root
    fit.theta_hat[0] = std::abs(fit.theta_hat[0]);

    if (settings.method == CalibrationMethod::freq) {
        BootstrapSettings boot = settings.boot;
        boot.level = settings.level;
        BootstrapResult b = bootstrap_ci(fit, problem, fs, boot);
        for (auto& d : b.draws) d[0] = std::abs(d[0]);
        std::tie(b.lo, b.hi) = percentile_intervals(b.draws, settings.level);
        out.sigma_hat = fit.theta_hat[0];
        out.lo = b.lo[0];
        out.hi = b.hi[0];
        out.gamma_hat = fit.gamma_hat;
        out.tau_hat = fit.tau_hat;
        out.c_hat = fit.c_hat;
        out.bootstrap = std::move(b);
        out.fit = std::move(fit);
        return out;
    }

    if (settings.mode == ConstraintMode::lagrange)
        throw ValidationError("Bayesian calibration supports constraint modes none and ls only");
    Hyperparams hyper = settings.hyper;
    if (hyper.theta_prior.empty()) hyper.theta_prior = {ThetaPrior::uniform(0.0, 5.0)};
    ChainSettings cs = settings.chain;
    cs.mode = settings.mode;
    cs.kappa = settings.kappa;
    cs.init_from_fit = false;
    cs.theta_init = fit.theta_hat;
    cs.gamma_init = fit.gamma_hat;
    cs.tau_init = fit.tau_hat;
    PosteriorChain chain = run_chain(problem, hyper, cs);
    const std::vector<double> s = chain.column(0);
    double mean = 0.0;
    for (double x : s) mean += x;
    out.sigma_hat = mean / static_cast<double>(s.size());
    std::tie(out.lo, out.hi) = hpd_interval(s, settings.level);
    const auto summary = summarize(chain);
    out.gamma_hat = summary[1].mean;
    out.tau_hat = summary[2].mean;
    std::optional<double> kappa;
    if (cons) kappa = chain.names.size() > 3 ? summary[3].mean : settings.kappa;
    const std::vector<double> theta{out.sigma_hat};
    const PriorComponents prior =
        prior_components(problem.penalty().assemble(theta), out.gamma_hat, cons ? &*cons : nullptr, kappa);
    out.c_hat = coefficient_mean(prior, problem.design(), problem.zeta(), out.tau_hat);
    out.fit = std::move(fit);
    out.chain = std::move(chain);
    return out;
}

}  // namespace pspde
