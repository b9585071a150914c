#include "pspde/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

#include "pspde/error.hpp"
#include "pspde/kernels.hpp"
#include "pspde/rng.hpp"

namespace pspde::cli {

namespace fs = std::filesystem;

const char* to_string(Command c) {
    switch (c) {
        case Command::fit: return "fit";
        case Command::simulate: return "simulate";
        case Command::calibrate: return "calibrate";
    }
    return "?";
}

namespace {

// ---- strict section reader ----

class Section {
public:
    Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(where() + " must be an object");
    }

    [[nodiscard]] bool has(const std::string& k) const { return j_.contains(k); }
    [[nodiscard]] std::string child(const std::string& k) const { return path_.empty() ? k : path_ + "." + k; }
    [[nodiscard]] std::string where() const { return path_.empty() ? "config" : path_; }

    const json& raw(const std::string& k) {
        used_.insert(k);
        return j_.at(k);
    }
    Section sub(const std::string& k) { return {raw(k), child(k)}; }

    double num(const std::string& k, double def) {
        if (!has(k)) return def;
        const json& v = raw(k);
        if (!v.is_number()) throw ConfigError(child(k) + ": expected a number");
        return v.get<double>();
    }
    int integer(const std::string& k, int def) {
        if (!has(k)) return def;
        const json& v = raw(k);
        if (!v.is_number_integer()) throw ConfigError(child(k) + ": expected an integer");
        return v.get<int>();
    }
    bool flag(const std::string& k, bool def) {
        if (!has(k)) return def;
        const json& v = raw(k);
        if (!v.is_boolean()) throw ConfigError(child(k) + ": expected true or false");
        return v.get<bool>();
    }
    std::string str(const std::string& k, const std::string& def) {
        if (!has(k)) return def;
        const json& v = raw(k);
        if (!v.is_string()) throw ConfigError(child(k) + ": expected a string");
        return v.get<std::string>();
    }
    std::vector<double> nums(const std::string& k, const std::vector<double>& def) {
        if (!has(k)) return def;
        return number_list(raw(k), child(k));
    }

    static std::vector<double> number_list(const json& v, const std::string& path) {
        if (!v.is_array()) throw ConfigError(path + ": expected a list of numbers");
        std::vector<double> out;
        for (const auto& x : v) {
            if (!x.is_number()) throw ConfigError(path + ": expected a list of numbers");
            out.push_back(x.get<double>());
        }
        return out;
    }
    static std::vector<int> int_list(const json& v, const std::string& path) {
        if (!v.is_array()) throw ConfigError(path + ": expected a list of integers");
        std::vector<int> out;
        for (const auto& x : v) {
            if (!x.is_number_integer()) throw ConfigError(path + ": expected a list of integers");
            out.push_back(x.get<int>());
        }
        return out;
    }

    void finish() const {
        std::string bad;
        for (const auto& [k, v] : j_.items())
            if (!used_.count(k)) bad += (bad.empty() ? "" : ", ") + child(k);
        if (!bad.empty()) throw ConfigError("unknown keys: " + bad);
    }

private:
    const json& j_;
    std::string path_;
    std::set<std::string> used_;
};

template <class E>
E parse_enum(const std::string& s, const std::vector<std::pair<const char*, E>>& names, const std::string& path) {
    std::string allowed;
    for (const auto& [n, e] : names) {
        if (s == n) return e;
        allowed += (allowed.empty() ? "" : ", ") + std::string(n);
    }
    throw ConfigError(path + ": '" + s + "' is not one of " + allowed);
}

const std::vector<std::pair<const char*, ConstraintMode>> kModes{
    {"none", ConstraintMode::none}, {"ls", ConstraintMode::ls}, {"lagrange", ConstraintMode::lagrange}};
const std::vector<std::pair<const char*, EstimatorMethod>> kMethods{{"freq", EstimatorMethod::freq},
                                                                    {"bayes", EstimatorMethod::bayes}};
const std::vector<std::pair<const char*, Coordinates>> kCoords{{"raw", Coordinates::raw},
                                                               {"scaled", Coordinates::scaled}};
const std::vector<std::pair<const char*, QuadratureKind>> kQuad{{"romberg", QuadratureKind::romberg},
                                                                {"uniform", QuadratureKind::uniform}};

const char* method_name(EstimatorMethod m) { return m == EstimatorMethod::freq ? "freq" : "bayes"; }
const char* quad_name(QuadratureKind k) { return k == QuadratureKind::romberg ? "romberg" : "uniform"; }

std::vector<AxisSpec> parse_axes(const json& v, const std::string& path) {
    if (!v.is_array()) throw ConfigError(path + ": expected a list of axes");
    std::vector<AxisSpec> out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        Section s(v[i], path + "[" + std::to_string(i) + "]");
        AxisSpec a;
        a.lo = s.num("lo", a.lo);
        a.hi = s.num("hi", a.hi);
        a.n = s.integer("n", a.n);
        s.finish();
        if (!(a.lo < a.hi) || a.n < 2) throw ConfigError(s.where() + ": needs lo < hi and n >= 2");
        out.push_back(a);
    }
    return out;
}

json axes_json(const std::vector<AxisSpec>& axes) {
    json a = json::array();
    for (const auto& x : axes) a.push_back({{"lo", x.lo}, {"hi", x.hi}, {"n", x.n}});
    return a;
}

std::vector<BasisDimSpec> parse_basis(const json& v, const std::string& path) {
    if (!v.is_array() || v.empty()) throw ConfigError(path + ": expected a non-empty list of dimensions");
    std::vector<BasisDimSpec> out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        Section s(v[i], path + "[" + std::to_string(i) + "]");
        BasisDimSpec b;
        b.lo = s.num("lo", b.lo);
        b.hi = s.num("hi", b.hi);
        b.degree = s.integer("degree", b.degree);
        b.n_basis = s.integer("n_basis", b.n_basis);
        b.interior_knots = s.nums("interior_knots", {});
        s.finish();
        try {
            static_cast<void>(b.build());
        } catch (const ValidationError& e) {
            throw ConfigError(s.where() + ": " + e.what());
        }
        out.push_back(b);
    }
    return out;
}

json basis_json(const std::vector<BasisDimSpec>& basis) {
    json a = json::array();
    for (const auto& b : basis) {
        json d{{"lo", b.lo}, {"hi", b.hi}, {"degree", b.degree}};
        if (b.interior_knots.empty()) d["n_basis"] = b.n_basis;
        else d["interior_knots"] = b.interior_knots;
        a.push_back(d);
    }
    return a;
}

std::vector<Polynomial> parse_polys(const json& v, const std::string& path, std::size_t p) {
    if (!v.is_array() || v.size() != p)
        throw ConfigError(path + ": expected " + std::to_string(p) + " coefficient lists, one per dimension");
    std::vector<Polynomial> out;
    for (std::size_t d = 0; d < p; ++d)
        out.push_back(Polynomial{Section::number_list(v[d], path + "[" + std::to_string(d) + "]")});
    return out;
}

json polys_json(const std::vector<Polynomial>& polys) {
    json a = json::array();
    for (const auto& q : polys) a.push_back(q.coeffs);
    return a;
}

Multiplier parse_multiplier(const json& v, const std::string& path, const std::vector<std::string>& theta,
                            const std::string& owner) {
    Section s(v, path);
    Multiplier m;
    m.constant = s.num("constant", 1.0);
    if (s.has("powers")) {
        Section pw = s.sub("powers");
        m.theta_powers.assign(theta.size(), 0);
        for (const auto& [name, val] : s.raw("powers").items()) {
            const auto it = std::find(theta.begin(), theta.end(), name);
            if (it == theta.end())
                throw ConfigError(owner + " refers to undeclared parameter '" + name + "' (" + pw.child(name) + ")");
            const int k = pw.integer(name, 0);
            if (k < 0) throw ConfigError(pw.child(name) + ": powers must be non-negative");
            m.theta_powers[static_cast<std::size_t>(it - theta.begin())] = k;
        }
        while (!m.theta_powers.empty() && m.theta_powers.back() == 0) m.theta_powers.pop_back();
        pw.finish();
    }
    s.finish();
    return m;
}

json multiplier_json(const Multiplier& m, const std::vector<std::string>& theta) {
    json j{{"constant", m.constant}};
    json pw = json::object();
    for (std::size_t k = 0; k < m.theta_powers.size(); ++k)
        if (m.theta_powers[k] != 0) pw[theta[k]] = m.theta_powers[k];
    if (!pw.empty()) j["powers"] = pw;
    return j;
}

PdeSpec parse_pde(Section s, std::size_t p) {
    PdeSpec pde;
    pde.p = static_cast<int>(p);
    if (!s.has("theta")) throw ConfigError(s.child("theta") + " is required");
    const json& th = s.raw("theta");
    if (!th.is_array() || th.empty()) throw ConfigError(s.child("theta") + ": expected a list of parameter names");
    for (const auto& n : th) {
        if (!n.is_string()) throw ConfigError(s.child("theta") + ": expected a list of parameter names");
        pde.theta_names.push_back(n.get<std::string>());
    }
    if (!s.has("terms")) throw ConfigError(s.child("terms") + " is required");
    const json& terms = s.raw("terms");
    if (!terms.is_array() || terms.empty()) throw ConfigError(s.child("terms") + ": expected a non-empty list");
    for (std::size_t i = 0; i < terms.size(); ++i) {
        Section t(terms[i], s.child("terms") + "[" + std::to_string(i) + "]");
        PdeTerm term;
        term.label = t.str("label", "term " + std::to_string(i + 1));
        const std::string owner = "term '" + term.label + "'";
        if (t.has("multiplier")) term.multiplier = parse_multiplier(t.raw("multiplier"), t.child("multiplier"),
                                                                    pde.theta_names, owner);
        if (t.has("coefficients")) term.coeff_polys = parse_polys(t.raw("coefficients"), t.child("coefficients"), p);
        if (!t.has("deriv")) throw ConfigError(t.child("deriv") + " is required");
        term.deriv_orders = Section::int_list(t.raw("deriv"), t.child("deriv"));
        t.finish();
        pde.terms.push_back(std::move(term));
    }
    if (s.has("forcing")) {
        Section f = s.sub("forcing");
        ForcingTerm ft;
        if (f.has("multiplier"))
            ft.multiplier = parse_multiplier(f.raw("multiplier"), f.child("multiplier"), pde.theta_names, "forcing");
        if (f.has("coefficients")) ft.polys = parse_polys(f.raw("coefficients"), f.child("coefficients"), p);
        f.finish();
        pde.forcing = ft;
    }
    s.finish();
    try {
        pde.validate();
    } catch (const ValidationError& e) {
        throw ConfigError(std::string("pde: ") + e.what());
    }
    return pde;
}

json pde_json(const PdeSpec& pde) {
    json terms = json::array();
    for (const auto& t : pde.terms) {
        json j{{"label", t.label}, {"multiplier", multiplier_json(t.multiplier, pde.theta_names)},
               {"deriv", t.deriv_orders}};
        if (!t.coeff_polys.empty()) j["coefficients"] = polys_json(t.coeff_polys);
        terms.push_back(j);
    }
    json j{{"theta", pde.theta_names}, {"terms", terms}};
    if (pde.forcing) {
        json f{{"multiplier", multiplier_json(pde.forcing->multiplier, pde.theta_names)}};
        if (!pde.forcing->polys.empty()) f["coefficients"] = polys_json(pde.forcing->polys);
        j["forcing"] = f;
    }
    return j;
}

TargetSpec parse_target(Section s, std::size_t p, bool explicit_points) {
    TargetSpec t;
    const std::string kind = s.str("kind", "constant");
    if (kind == "constant") {
        t.kind = TargetSpec::Kind::constant;
        t.value = s.num("value", 0.0);
    } else if (kind == "values") {
        if (!explicit_points) throw ConfigError(s.where() + ": kind 'values' needs explicit points");
        t.kind = TargetSpec::Kind::values;
        t.values = s.nums("values", {});
    } else if (kind == "polynomial" || kind == "rational") {
        t.kind = kind == "polynomial" ? TargetSpec::Kind::polynomial : TargetSpec::Kind::rational;
        if (!s.has("numerator")) throw ConfigError(s.child("numerator") + " is required");
        t.numerator = parse_polys(s.raw("numerator"), s.child("numerator"), p);
        if (t.kind == TargetSpec::Kind::rational) {
            if (!s.has("denominator")) throw ConfigError(s.child("denominator") + " is required");
            t.denominator = parse_polys(s.raw("denominator"), s.child("denominator"), p);
        }
    } else {
        throw ConfigError(s.child("kind") + ": '" + kind + "' is not one of constant, values, polynomial, rational");
    }
    s.finish();
    return t;
}

json target_json(const TargetSpec& t) {
    switch (t.kind) {
        case TargetSpec::Kind::constant: return {{"kind", "constant"}, {"value", t.value}};
        case TargetSpec::Kind::values: return {{"kind", "values"}, {"values", t.values}};
        case TargetSpec::Kind::polynomial: return {{"kind", "polynomial"}, {"numerator", polys_json(t.numerator)}};
        case TargetSpec::Kind::rational:
            return {{"kind", "rational"},
                    {"numerator", polys_json(t.numerator)},
                    {"denominator", polys_json(t.denominator)}};
    }
    return {};
}

std::vector<ConditionSpec> parse_conditions(const json& v, const std::string& path, std::size_t p) {
    if (!v.is_array()) throw ConfigError(path + ": expected a list of conditions");
    std::vector<ConditionSpec> out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        Section s(v[i], path + "[" + std::to_string(i) + "]");
        ConditionSpec c;
        c.label = s.str("label", "condition " + std::to_string(i + 1));
        if (s.has("face") == s.has("points")) throw ConfigError(s.where() + ": give exactly one of face, points");
        if (s.has("face")) {
            Section f = s.sub("face");
            const int dim = f.integer("dim", 0);
            if (dim < 1 || dim > static_cast<int>(p))
                throw ConfigError(f.child("dim") + ": must lie in 1.." + std::to_string(p));
            c.face_dim = dim - 1;
            c.face_upper = parse_enum<bool>(f.str("side", "lo"), {{"lo", false}, {"hi", true}}, f.child("side"));
            c.face_edges = f.flag("edges", true);
            f.finish();
        } else {
            const json& pts = s.raw("points");
            if (!pts.is_array() || pts.empty()) throw ConfigError(s.child("points") + ": expected a list of points");
            c.points.resize(static_cast<Eigen::Index>(pts.size()), static_cast<Eigen::Index>(p));
            for (std::size_t r = 0; r < pts.size(); ++r) {
                const auto x = Section::number_list(pts[r], s.child("points") + "[" + std::to_string(r) + "]");
                if (x.size() != p) throw ConfigError(s.child("points") + ": each point needs " + std::to_string(p) +
                                                     " coordinates");
                for (std::size_t d = 0; d < p; ++d)
                    c.points(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(d)) = x[d];
            }
        }
        if (s.has("deriv")) c.deriv = Section::int_list(s.raw("deriv"), s.child("deriv"));
        else c.deriv.assign(p, 0);
        if (c.deriv.size() != p) throw ConfigError(s.child("deriv") + ": needs " + std::to_string(p) + " entries");
        if (!s.has("target")) throw ConfigError(s.child("target") + " is required");
        c.target = parse_target(s.sub("target"), p, c.face_dim < 0);
        if (c.target.kind == TargetSpec::Kind::values &&
            static_cast<Eigen::Index>(c.target.values.size()) != c.points.rows())
            throw ConfigError(s.child("target") + ": needs one value per point");
        s.finish();
        out.push_back(std::move(c));
    }
    return out;
}

json conditions_json(const std::vector<ConditionSpec>& conds) {
    json a = json::array();
    for (const auto& c : conds) {
        json j{{"label", c.label}, {"deriv", c.deriv}, {"target", target_json(c.target)}};
        if (c.face_dim >= 0) {
            j["face"] = {{"dim", c.face_dim + 1}, {"side", c.face_upper ? "hi" : "lo"}, {"edges", c.face_edges}};
        } else {
            json pts = json::array();
            for (Eigen::Index r = 0; r < c.points.rows(); ++r) {
                std::vector<double> x(c.points.row(r).data(), c.points.row(r).data() + 0);
                x.clear();
                for (Eigen::Index d = 0; d < c.points.cols(); ++d) x.push_back(c.points(r, d));
                pts.push_back(x);
            }
            j["points"] = pts;
        }
        a.push_back(j);
    }
    return a;
}

ThetaPrior parse_theta_prior(Section s) {
    const std::string kind = s.str("kind", "flat");
    ThetaPrior p;
    if (kind == "flat") p = ThetaPrior::flat();
    else if (kind == "normal") p = ThetaPrior::normal(s.num("mean", 0.0), s.num("sd", 1.0));
    else if (kind == "uniform") p = ThetaPrior::uniform(s.num("lo", 0.0), s.num("hi", 1.0));
    else if (kind == "point") p = ThetaPrior::point(s.num("value", 0.0));
    else throw ConfigError(s.child("kind") + ": '" + kind + "' is not one of flat, normal, uniform, point");
    s.finish();
    try {
        p.validate(s.where());
    } catch (const ValidationError& e) {
        throw ConfigError(e.what());
    }
    return p;
}

json theta_prior_json(const ThetaPrior& p) {
    switch (p.kind) {
        case ThetaPrior::Kind::flat: return {{"kind", "flat"}};
        case ThetaPrior::Kind::normal: return {{"kind", "normal"}, {"mean", p.a}, {"sd", p.b}};
        case ThetaPrior::Kind::uniform: return {{"kind", "uniform"}, {"lo", p.a}, {"hi", p.b}};
        case ThetaPrior::Kind::point: return {{"kind", "point"}, {"value", p.a}};
    }
    return {};
}

std::vector<std::string> theta_names_for(const RunConfig& c) {
    if (c.command == Command::fit) return c.pde.theta_names;
    if (c.command == Command::simulate) return {"theta1", "theta2"};
    return {"sigma"};
}

// Keys each command accepts in the estimator section.
std::set<std::string> estimator_keys(Command c) {
    std::set<std::string> k{"kappa", "theta0", "gamma0", "tau0", "max_iter", "tol", "chain", "priors"};
    if (c != Command::simulate) k.insert({"method", "mode", "bootstrap", "level"});
    return k;
}

void parse_estimator(Section s, RunConfig& c) {
    EstimatorConfig& e = c.estimator;
    const auto allowed = estimator_keys(c.command);
    for (const char* k : {"method", "mode", "bootstrap", "level"})
        if (s.has(k) && !allowed.count(k))
            throw ConfigError(s.child(k) + " is not used by " + to_string(c.command) + " (see study.estimators)");
    const std::vector<std::string> names = theta_names_for(c);
    e.method = parse_enum(s.str("method", method_name(e.method)), kMethods, s.child("method"));
    e.mode = parse_enum(s.str("mode", to_string(e.mode)), kModes, s.child("mode"));
    e.kappa = s.num("kappa", e.kappa);
    const std::vector<double> def0(names.size(), c.command == Command::calibrate ? 0.2 : 1.0);
    e.theta0 = s.nums("theta0", def0);
    if (e.theta0.size() != names.size())
        throw ConfigError(s.child("theta0") + ": needs " + std::to_string(names.size()) + " values");
    e.gamma0 = s.num("gamma0", e.gamma0);
    e.tau0 = s.num("tau0", e.tau0);
    e.max_iter = s.integer("max_iter", e.max_iter);
    e.tol = s.num("tol", e.tol);
    e.bootstrap = s.integer("bootstrap", c.command == Command::calibrate ? 1000 : 0);
    e.level = s.num("level", e.level);
    if (!(e.kappa > 0.0)) throw ConfigError(s.child("kappa") + ": must be positive");
    if (e.max_iter < 1) throw ConfigError(s.child("max_iter") + ": must be at least 1");
    if (!(e.tol > 0.0)) throw ConfigError(s.child("tol") + ": must be positive");
    if (e.bootstrap < 0 || e.bootstrap == 1) throw ConfigError(s.child("bootstrap") + ": 0 or at least 2 replicates");
    if (c.command == Command::calibrate && e.method == EstimatorMethod::freq && e.bootstrap < 2)
        throw ConfigError(s.child("bootstrap") + ": calibration needs at least 2 replicates");
    if (!(e.level > 0.0 && e.level < 1.0)) throw ConfigError(s.child("level") + ": must lie in (0, 1)");
    if (e.method == EstimatorMethod::bayes && e.mode == ConstraintMode::lagrange)
        throw ConfigError(s.child("mode") + ": the Bayesian estimator supports none and ls");

    if (s.has("chain")) {
        Section ch = s.sub("chain");
        e.iterations = ch.integer("iterations", e.iterations);
        e.burn_in = ch.integer("burn_in", e.burn_in);
        e.thin = ch.integer("thin", e.thin);
        e.kappa_random = ch.flag("kappa_random", e.kappa_random);
        e.min_acceptance = ch.num("min_acceptance", e.min_acceptance);
        ch.finish();
    }
    ChainSettings probe;
    probe.iterations = e.iterations;
    probe.burn_in = e.burn_in;
    probe.thin = e.thin;
    probe.min_acceptance = e.min_acceptance;
    try {
        probe.validate();
    } catch (const ValidationError& err) {
        throw ConfigError(s.child("chain") + ": " + err.what());
    }

    Hyperparams& h = e.hyper;
    h.theta_prior.clear();
    std::map<std::string, ThetaPrior> given;
    if (s.has("priors")) {
        Section pr = s.sub("priors");
        h.a_tau = pr.num("a_tau", h.a_tau);
        h.b_tau = pr.num("b_tau", h.b_tau);
        h.a_gamma = pr.num("a_gamma", h.a_gamma);
        h.b_gamma = pr.num("b_gamma", h.b_gamma);
        h.a_kappa = pr.num("a_kappa", h.a_kappa);
        h.b_kappa = pr.num("b_kappa", h.b_kappa);
        if (pr.has("theta")) {
            Section th = pr.sub("theta");
            for (const auto& [name, val] : pr.raw("theta").items()) {
                if (std::find(names.begin(), names.end(), name) == names.end())
                    throw ConfigError(th.child(name) + ": undeclared parameter '" + name + "'");
                static_cast<void>(th.raw(name));
                given[name] = parse_theta_prior(Section(val, th.child(name)));
            }
            th.finish();
        }
        pr.finish();
    }
    const ThetaPrior fallback =
        c.command == Command::calibrate ? ThetaPrior::uniform(0.0, 5.0) : ThetaPrior::flat();
    for (const auto& n : names) h.theta_prior.push_back(given.count(n) ? given[n] : fallback);
    try {
        h.validate(names.size());
    } catch (const ValidationError& err) {
        throw ConfigError(s.child("priors") + ": " + err.what());
    }
    s.finish();
}

json estimator_json(const RunConfig& c) {
    const EstimatorConfig& e = c.estimator;
    const std::vector<std::string> names = theta_names_for(c);
    json pri{{"a_tau", e.hyper.a_tau},     {"b_tau", e.hyper.b_tau},     {"a_gamma", e.hyper.a_gamma},
             {"b_gamma", e.hyper.b_gamma}, {"a_kappa", e.hyper.a_kappa}, {"b_kappa", e.hyper.b_kappa}};
    json th = json::object();
    for (std::size_t k = 0; k < names.size(); ++k) th[names[k]] = theta_prior_json(e.hyper.theta_prior[k]);
    pri["theta"] = th;
    json j{{"kappa", e.kappa},
           {"theta0", e.theta0},
           {"gamma0", e.gamma0},
           {"tau0", e.tau0},
           {"max_iter", e.max_iter},
           {"tol", e.tol},
           {"chain",
            {{"iterations", e.iterations},
             {"burn_in", e.burn_in},
             {"thin", e.thin},
             {"kappa_random", e.kappa_random},
             {"min_acceptance", e.min_acceptance}}},
           {"priors", pri}};
    if (c.command != Command::simulate) {
        j["method"] = method_name(e.method);
        j["mode"] = to_string(e.mode);
        j["bootstrap"] = e.bootstrap;
        j["level"] = e.level;
    }
    return j;
}

QuadratureRule parse_quadrature(Section s) {
    QuadratureRule q;
    q.kind = parse_enum(s.str("kind", quad_name(q.kind)), kQuad, s.child("kind"));
    q.points_per_span = s.integer("points_per_span", q.points_per_span);
    q.uniform_nodes = s.integer("uniform_nodes", q.uniform_nodes);
    s.finish();
    try {
        q.validate();
    } catch (const ValidationError& e) {
        throw ConfigError(std::string("quadrature: ") + e.what());
    }
    return q;
}

json quadrature_json(const QuadratureRule& q) {
    return {{"kind", quad_name(q.kind)}, {"points_per_span", q.points_per_span}, {"uniform_nodes", q.uniform_nodes}};
}

EstimatorSpec parse_estimator_label(const std::string& s, const std::string& path) {
    const auto dash = s.find('-');
    if (dash == std::string::npos) throw ConfigError(path + ": expected method-mode such as freq-ls, got '" + s + "'");
    EstimatorSpec e;
    e.method = parse_enum(s.substr(0, dash), kMethods, path);
    e.mode = parse_enum(s.substr(dash + 1), kModes, path);
    return e;
}

void require_sections(const Section& s, Command c, const std::set<std::string>& allowed) {
    static const std::vector<std::string> all{"basis",      "pde",   "conditions",  "data",
                                              "quadrature", "study", "calibration", "estimator"};
    for (const auto& k : all)
        if (s.has(k) && !allowed.count(k))
            throw ConfigError("section '" + k + "' is not used by the " + to_string(c) + " command");
}

void check_domain(const std::vector<AxisSpec>& axes, const std::vector<BasisDimSpec>& basis, const std::string& path) {
    if (axes.size() != basis.size())
        throw ConfigError(path + ": needs " + std::to_string(basis.size()) + " axes, one per basis dimension");
    for (std::size_t d = 0; d < axes.size(); ++d)
        if (axes[d].lo < basis[d].lo || axes[d].hi > basis[d].hi)
            throw ConfigError(path + "[" + std::to_string(d) + "]: leaves the basis domain");
}

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001b3ull;
    }
    return h;
}

}  // namespace

// ---- parsing ----

RunConfig parse_config(const json& j) {
    Section root(j, "");
    RunConfig c;
    if (!root.has("command")) throw ConfigError("command is required (fit, simulate or calibrate)");
    c.command = parse_enum<Command>(root.str("command", ""),
                                    {{"fit", Command::fit}, {"simulate", Command::simulate},
                                     {"calibrate", Command::calibrate}},
                                    "command");
    if (!root.has("seed")) throw ConfigError("seed is required");
    {
        const json& sd = root.raw("seed");
        if (!sd.is_number_unsigned() && !(sd.is_number_integer() && sd.get<std::int64_t>() >= 0))
            throw ConfigError("seed: expected a non-negative integer");
        c.seed = sd.get<std::uint64_t>();
    }

    switch (c.command) {
        case Command::fit: require_sections(root, c.command, {"basis", "pde", "conditions", "data", "quadrature",
                                                              "estimator"}); break;
        case Command::simulate: require_sections(root, c.command, {"basis", "quadrature", "study", "estimator"});
            break;
        case Command::calibrate: require_sections(root, c.command, {"calibration", "estimator"}); break;
    }

    if (c.command != Command::calibrate) {
        if (root.has("basis")) c.basis = parse_basis(root.raw("basis"), "basis");
        else if (c.command == Command::simulate) c.basis = StudyConfig{}.basis;
        else throw ConfigError("basis is required");
        if (root.has("quadrature")) c.quadrature = parse_quadrature(root.sub("quadrature"));
    }
    const std::size_t p = c.basis.size();

    if (c.command == Command::fit) {
        if (!root.has("pde")) throw ConfigError("pde is required");
        c.pde = parse_pde(root.sub("pde"), p);
        try {
            std::vector<BasisSpec1D> dims;
            for (const auto& b : c.basis) dims.push_back(b.build());
            c.pde.check_basis(TensorBasis(std::move(dims)));
        } catch (const ValidationError& e) {
            throw ConfigError(std::string("pde: ") + e.what());
        }
        if (root.has("conditions")) c.conditions = parse_conditions(root.raw("conditions"), "conditions", p);
        DataSpec& d = c.data;
        if (root.has("data")) {
            Section s = root.sub("data");
            d.input = s.str("input", "");
            if (!d.input.empty()) {
                for (const char* k : {"theta_true", "noise_sd", "grid", "replicate"})
                    if (s.has(k)) throw ConfigError(s.child(k) + " only applies to simulated data (no input)");
            }
            d.theta_true = s.nums("theta_true", d.theta_true);
            d.noise_sd = s.num("noise_sd", d.noise_sd);
            if (s.has("grid")) d.grid = parse_axes(s.raw("grid"), s.child("grid"));
            d.replicate = s.integer("replicate", d.replicate);
            s.finish();
        }
        if (d.input.empty()) {
            if (p != 2 || c.pde.theta_names.size() != 2)
                throw ConfigError("data: simulated data is the two-parameter diffusion surface; give data.input");
            check_domain(d.grid, c.basis, "data.grid");
            if (d.theta_true.size() != 2 || d.theta_true[0] == 0.0)
                throw ConfigError("data.theta_true: needs two values with theta1 != 0");
            if (!(d.noise_sd >= 0.0)) throw ConfigError("data.noise_sd: must be non-negative");
            if (d.replicate < 0) throw ConfigError("data.replicate: must be non-negative");
        }
    }

    if (c.command == Command::simulate) {
        StudySection& st = c.study;
        if (root.has("study")) {
            Section s = root.sub("study");
            st.theta_true = s.nums("theta_true", st.theta_true);
            st.noise_sd = s.nums("noise_sd", st.noise_sd);
            if (s.has("grid")) st.grid = parse_axes(s.raw("grid"), s.child("grid"));
            st.replicates = s.integer("replicates", st.replicates);
            if (s.has("estimators")) {
                const json& es = s.raw("estimators");
                if (!es.is_array() || es.empty())
                    throw ConfigError(s.child("estimators") + ": expected a list such as [\"freq-ls\"]");
                st.estimators.clear();
                for (const auto& e : es) {
                    if (!e.is_string()) throw ConfigError(s.child("estimators") + ": expected strings");
                    st.estimators.push_back(parse_estimator_label(e.get<std::string>(), s.child("estimators")));
                }
            }
            s.finish();
        }
        if (p != 2) throw ConfigError("basis: the diffusion study needs two dimensions");
        check_domain(st.grid, c.basis, "study.grid");
    }

    if (c.command == Command::calibrate) {
        CalibrationSection& cal = c.calibration;
        if (root.has("calibration")) {
            Section s = root.sub("calibration");
            cal.coordinates = parse_enum(s.str("coordinates", to_string(cal.coordinates)), kCoords,
                                         s.child("coordinates"));
            if (s.has("domain")) {
                Section d = s.sub("domain");
                BsDomain dom;
                dom.x_lo = d.num("x_lo", dom.x_lo);
                dom.x_hi = d.num("x_hi", dom.x_hi);
                dom.t_lo = d.num("t_lo", dom.t_lo);
                dom.t_hi = d.num("t_hi", dom.t_hi);
                d.finish();
                cal.domain = dom;
            }
            if (s.has("rate")) cal.rate = s.num("rate", 0.0);
            cal.n_interior = s.integer("n_interior", cal.n_interior);
            cal.degree = s.integer("degree", cal.degree);
            cal.strike_gap = s.num("strike_gap", cal.strike_gap);
            if (s.has("synthetic")) {
                Section y = s.sub("synthetic");
                SyntheticQuotesSpec q;
                q.sigma = y.num("sigma", q.sigma);
                q.rate = y.num("rate", q.rate);
                q.spot = y.num("spot", q.spot);
                q.m_lo = y.num("m_lo", q.m_lo);
                q.m_hi = y.num("m_hi", q.m_hi);
                q.n_m = y.integer("n_m", q.n_m);
                q.t_lo = y.num("t_lo", q.t_lo);
                q.t_hi = y.num("t_hi", q.t_hi);
                q.n_t = y.integer("n_t", q.n_t);
                q.noise_sd = y.num("noise_sd", q.noise_sd);
                y.finish();
                if (q.n_m < 1 || q.n_t < 1 || !(q.noise_sd >= 0.0) || !(q.sigma > 0.0) || !(q.spot > 0.0))
                    throw ConfigError(y.where() + ": needs positive sigma and spot, n_m, n_t >= 1, noise_sd >= 0");
                cal.synthetic = q;
            }
            s.finish();
        }
        if (cal.n_interior < 0 || cal.degree < 1) throw ConfigError("calibration: bad n_interior or degree");
        if (!(cal.strike_gap >= 0.0)) throw ConfigError("calibration.strike_gap: must be non-negative");
    }

    if (root.has("estimator")) {
        parse_estimator(root.sub("estimator"), c);
    } else {
        parse_estimator(Section(json::object(), "estimator"), c);
    }

    if (root.has("io")) {
        Section s = root.sub("io");
        c.input = s.str("input", "");
        c.output_dir = s.str("output_dir", c.output_dir);
        if (s.has("surface")) c.surface = parse_axes(s.raw("surface"), s.child("surface"));
        s.finish();
    }
    if (c.command == Command::fit) {
        if (!c.input.empty()) throw ConfigError("io.input: fit reads its observations from data.input");
        if (!c.surface.empty()) check_domain(c.surface, c.basis, "io.surface");
        if (c.estimator.mode != ConstraintMode::none && c.conditions.empty())
            throw ConfigError("estimator.mode: " + std::string(to_string(c.estimator.mode)) +
                              " needs at least one condition");
    }
    if (c.command == Command::simulate && (!c.input.empty() || !c.surface.empty()))
        throw ConfigError("io: simulate takes no input file and exports no surface");
    if (c.command == Command::calibrate) {
        if (c.input.empty() == !c.calibration.synthetic.has_value())
            throw ConfigError("calibrate needs exactly one of io.input and calibration.synthetic");
        if (!c.surface.empty() && c.surface.size() != 2) throw ConfigError("io.surface: needs two axes");
    }
    if (c.output_dir.empty()) throw ConfigError("io.output_dir: must not be empty");
    root.finish();
    return c;
}

RunConfig parse_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path);
    json j;
    try {
        j = json::parse(in, nullptr, true, true);
    } catch (const json::parse_error& e) {
        throw ConfigError(path + ": " + e.what());
    }
    return parse_config(j);
}

json to_json(const RunConfig& c) {
    json j{{"command", to_string(c.command)}, {"seed", c.seed}, {"estimator", estimator_json(c)}};
    json io{{"output_dir", c.output_dir}};
    if (!c.input.empty()) io["input"] = c.input;
    if (!c.surface.empty()) io["surface"] = axes_json(c.surface);
    j["io"] = io;
    if (c.command != Command::calibrate) {
        j["basis"] = basis_json(c.basis);
        j["quadrature"] = quadrature_json(c.quadrature);
    }
    if (c.command == Command::fit) {
        j["pde"] = pde_json(c.pde);
        j["conditions"] = conditions_json(c.conditions);
        if (!c.data.input.empty()) {
            j["data"] = {{"input", c.data.input}};
        } else {
            j["data"] = {{"theta_true", c.data.theta_true},
                         {"noise_sd", c.data.noise_sd},
                         {"grid", axes_json(c.data.grid)},
                         {"replicate", c.data.replicate}};
        }
    }
    if (c.command == Command::simulate) {
        json es = json::array();
        for (const auto& e : c.study.estimators) es.push_back(e.label());
        j["study"] = {{"theta_true", c.study.theta_true},
                      {"noise_sd", c.study.noise_sd},
                      {"grid", axes_json(c.study.grid)},
                      {"replicates", c.study.replicates},
                      {"estimators", es}};
    }
    if (c.command == Command::calibrate) {
        const CalibrationSection& cal = c.calibration;
        json s{{"coordinates", to_string(cal.coordinates)},
               {"n_interior", cal.n_interior},
               {"degree", cal.degree},
               {"strike_gap", cal.strike_gap}};
        if (cal.domain)
            s["domain"] = {{"x_lo", cal.domain->x_lo},
                           {"x_hi", cal.domain->x_hi},
                           {"t_lo", cal.domain->t_lo},
                           {"t_hi", cal.domain->t_hi}};
        if (cal.rate) s["rate"] = *cal.rate;
        if (cal.synthetic) {
            const auto& q = *cal.synthetic;
            s["synthetic"] = {{"sigma", q.sigma}, {"rate", q.rate}, {"spot", q.spot}, {"m_lo", q.m_lo},
                              {"m_hi", q.m_hi},   {"n_m", q.n_m},   {"t_lo", q.t_lo}, {"t_hi", q.t_hi},
                              {"n_t", q.n_t},     {"noise_sd", q.noise_sd}};
        }
        j["calibration"] = s;
    }
    return j;
}

bool operator==(const RunConfig& a, const RunConfig& b) { return to_json(a) == to_json(b); }

std::string config_hash(const RunConfig& config) {
    char buf[17];
    json j = to_json(config);
    j["io"].erase("output_dir");  // where results go is not part of the run
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(j.dump())));
    return buf;
}

std::string provenance(const RunConfig& config) {
    return "config_hash=" + config_hash(config) + " seed=" + std::to_string(config.seed);
}

std::vector<Condition> build_conditions(const RunConfig& config, const TensorBasis& basis) {
    std::vector<Condition> out;
    for (const auto& cs : config.conditions) {
        Condition c;
        c.label = cs.label;
        c.deriv_orders = cs.deriv;
        c.points = cs.face_dim >= 0 ? face_knot_points(basis, cs.face_dim, cs.face_upper, cs.face_edges) : cs.points;
        const TargetSpec t = cs.target;
        switch (t.kind) {
            case TargetSpec::Kind::constant:
                c.target = [v = t.value](std::span<const double>) { return v; };
                break;
            case TargetSpec::Kind::values: {
                // explicit points: look the value up by row
                auto pts = std::make_shared<Eigen::MatrixXd>(cs.points);
                auto vals = std::make_shared<std::vector<double>>(t.values);
                c.target = [pts, vals](std::span<const double> x) {
                    for (Eigen::Index r = 0; r < pts->rows(); ++r) {
                        bool same = true;
                        for (Eigen::Index d = 0; d < pts->cols() && same; ++d)
                            same = (*pts)(r, d) == x[static_cast<std::size_t>(d)];
                        if (same) return (*vals)[static_cast<std::size_t>(r)];
                    }
                    throw ValidationError("condition point not found");
                };
                break;
            }
            case TargetSpec::Kind::polynomial:
            case TargetSpec::Kind::rational:
                c.target = [t](std::span<const double> x) {
                    double num = 1.0, den = 1.0;
                    for (std::size_t d = 0; d < t.numerator.size(); ++d) num *= t.numerator[d](x[d]);
                    for (std::size_t d = 0; d < t.denominator.size(); ++d) den *= t.denominator[d](x[d]);
                    if (den == 0.0) throw ValidationError("condition target divides by zero");
                    return num / den;
                };
                break;
        }
        out.push_back(std::move(c));
    }
    return out;
}

// ---- output ----

void export_surface(const Eigen::VectorXd& c, const TensorBasis& basis, const GridAxes& axes, const std::string& path,
                    const std::string& header_comment, const std::vector<std::string>& names) {
    const int p = basis.dimension();
    if (static_cast<int>(axes.size()) != p) throw ValidationError("surface grid needs one axis per dimension");
    if (c.size() != basis.size()) throw ValidationError("coefficient vector does not match the basis");
    for (int d = 0; d < p; ++d) {
        const auto& ax = axes[static_cast<std::size_t>(d)];
        const auto& b = basis.dim(d);
        if (ax.empty()) throw ValidationError("surface axis " + std::to_string(d + 1) + " is empty");
        for (double x : ax)
            if (x < b.lo || x > b.hi)
                throw ValidationError("surface axis " + std::to_string(d + 1) + " leaves the basis domain");
    }
    if (!names.empty() && static_cast<int>(names.size()) != p + 1)
        throw ValidationError("surface export needs p + 1 column names");
    const Eigen::MatrixXd pts = grid_points(axes);
    const std::vector<int> d0(static_cast<std::size_t>(p), 0);
    const Eigen::VectorXd u = tensor_design(basis, pts, d0).B * c;

    std::ofstream os(path);
    if (!os) throw IoError("cannot open " + path + " for writing");
    if (!header_comment.empty()) os << "# " << header_comment << '\n';
    for (int d = 0; d < p; ++d) {
        if (d) os << ',';
        os << (names.empty() ? "x" + std::to_string(d + 1) : names[static_cast<std::size_t>(d)]);
    }
    os << ',' << (names.empty() ? "u_hat" : names.back()) << '\n';
    os << std::setprecision(17);
    for (Eigen::Index i = 0; i < pts.rows(); ++i) {
        for (int d = 0; d < p; ++d) os << pts(i, d) << ',';
        os << u[i] << '\n';
    }
    if (!os) throw IoError("failed writing " + path);
}

int exit_code(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ValidationError*>(&e) ||
        dynamic_cast<const json::exception*>(&e))
        return 2;
    if (dynamic_cast<const NumericalError*>(&e)) return 3;
    if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const fs::filesystem_error*>(&e)) return 4;
    return 1;
}

// ---- commands ----

namespace {

struct Writer {
    const RunConfig& config;
    RunResult& result;
    std::string dir;

    std::string path(const std::string& name) const { return (fs::path(dir) / name).string(); }

    std::ofstream open(const std::string& name, const char* comment = "# ") {
        const std::string p = path(name);
        std::ofstream os(p);
        if (!os) throw IoError("cannot open " + p + " for writing");
        os << comment << provenance(config) << '\n';
        result.files.push_back(p);
        return os;
    }
    void track(const std::string& name) { result.files.push_back(path(name)); }
};

void write_estimates(Writer& w) {
    auto os = w.open("estimates.csv");
    os << "parameter,point,lo,hi,method\n" << std::setprecision(17);
    for (const auto& r : w.result.estimates)
        os << r.parameter << ',' << r.point << ',' << r.lo << ',' << r.hi << ',' << r.method << '\n';
    if (!os) throw IoError("failed writing estimates");
}

void write_trace(Writer& w, const FreqFit& fit, const std::vector<std::string>& names) {
    auto os = w.open("trace.csv");
    os << "iteration";
    for (const auto& n : names) os << ',' << n;
    os << ",tau,gamma,objective,rss,pen,edf,evals,stalled\n" << std::setprecision(17);
    for (const auto& t : fit.trace) {
        os << t.iteration;
        for (double x : t.theta) os << ',' << x;
        os << ',' << t.tau << ',' << t.gamma << ',' << t.objective << ',' << t.rss << ',' << t.pen << ',' << t.edf
           << ',' << t.evals << ',' << (t.stalled ? 1 : 0) << '\n';
    }
    if (!os) throw IoError("failed writing trace");
}

void write_effective(Writer& w) {
    // parse_config skips the // line
    auto os = w.open("effective_config.json", "// ");
    os << to_json(w.config).dump(2) << '\n';
    if (!os) throw IoError("failed writing effective config");
}

GridAxes default_axes(const std::vector<AxisSpec>& surface, const std::vector<std::pair<double, double>>& domain) {
    GridAxes axes;
    if (!surface.empty()) {
        for (const auto& a : surface) axes.push_back(a.points());
        return axes;
    }
    for (const auto& [lo, hi] : domain) axes.push_back(AxisSpec{lo, hi, 50}.points());
    return axes;
}

Dataset read_observations(const std::string& path, int p) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open data file " + path);
    std::string line;
    int lineno = 0;
    std::vector<std::string> header;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::stringstream ss(line);
        for (std::string cell; std::getline(ss, cell, ',');) {
            cell.erase(0, cell.find_first_not_of(" \t\r"));
            cell.erase(cell.find_last_not_of(" \t\r") + 1);
            header.push_back(cell);
        }
        break;
    }
    std::vector<std::string> expect;
    for (int d = 0; d < p; ++d) expect.push_back("x" + std::to_string(d + 1));
    expect.push_back("z");
    if (header != expect) {
        std::string e;
        for (const auto& s : expect) e += (e.empty() ? "" : ",") + s;
        throw IoError(path + ": header must be " + e);
    }
    std::vector<double> vals;
    int rows = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#' || line.find_first_not_of(" \t\r") == std::string::npos) continue;
        std::stringstream ss(line);
        int n = 0;
        for (std::string cell; std::getline(ss, cell, ',');) {
            std::size_t used = 0;
            double v = 0.0;
            try {
                v = std::stod(cell, &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used == 0 || cell.find_first_not_of(" \t\r", used) != std::string::npos || !std::isfinite(v))
                throw IoError(path + ":" + std::to_string(lineno) + ": '" + cell + "' is not a number");
            vals.push_back(v);
            ++n;
        }
        if (n != p + 1)
            throw IoError(path + ":" + std::to_string(lineno) + ": expected " + std::to_string(p + 1) + " values");
        ++rows;
    }
    if (rows == 0) throw IoError(path + ": no observations");
    Dataset d;
    d.points.resize(rows, p);
    d.zeta.resize(rows);
    for (int r = 0; r < rows; ++r) {
        for (int k = 0; k < p; ++k) d.points(r, k) = vals[static_cast<std::size_t>(r * (p + 1) + k)];
        d.zeta[r] = vals[static_cast<std::size_t>(r * (p + 1) + p)];
    }
    return d;
}

FitSettings fit_settings(const RunConfig& c) {
    FitSettings fs;
    fs.theta0 = c.estimator.theta0;
    fs.gamma0 = c.estimator.gamma0;
    fs.tau0 = c.estimator.tau0;
    fs.mode = c.estimator.mode;
    fs.kappa = c.estimator.kappa;
    fs.max_iter = c.estimator.max_iter;
    fs.tol = c.estimator.tol;
    return fs;
}

ChainSettings chain_settings(const RunConfig& c) {
    ChainSettings cs;
    cs.iterations = c.estimator.iterations;
    cs.burn_in = c.estimator.burn_in;
    cs.thin = c.estimator.thin;
    cs.mode = c.estimator.mode;
    cs.kappa = c.estimator.kappa;
    cs.kappa_random = c.estimator.kappa_random;
    cs.min_acceptance = c.estimator.min_acceptance;
    cs.fit = fit_settings(c);
    cs.seed = make_rng(c.seed, {0x63686169ull})();
    return cs;
}

void log_line(const RunOptions& o, const std::string& s) {
    if (o.log) *o.log << s << std::endl;
}

void run_fit(const RunConfig& c, const RunOptions& o, Writer& w) {
    std::vector<BasisSpec1D> dims;
    for (const auto& b : c.basis) dims.push_back(b.build());
    const TensorBasis basis(std::move(dims));
    const int p = basis.dimension();

    Dataset data;
    if (!c.data.input.empty()) {
        data = read_observations(c.data.input, p);
    } else {
        StudyConfig sc;
        sc.theta_true = c.data.theta_true;
        sc.noise_sd = {c.data.noise_sd};
        sc.grid = c.data.grid;
        sc.basis = c.basis;
        sc.seed = c.seed;
        data = simulate_dataset(sc, 0, c.data.replicate);
    }
    std::optional<ConstraintSet> cons;
    if (c.estimator.mode != ConstraintMode::none) cons = build_constraints(build_conditions(c, basis), basis);
    const SmoothingProblem problem(basis, c.pde, data, cons, c.quadrature);
    log_line(o, "fit: " + std::to_string(problem.n_obs()) + " observations, " + std::to_string(problem.n_coef()) +
                    " coefficients, mode " + to_string(c.estimator.mode));

    const auto& names = c.pde.theta_names;
    Eigen::VectorXd c_hat;
    const FitSettings fs = fit_settings(c);
    if (c.estimator.method == EstimatorMethod::freq) {
        const FreqFit fit = fit_frequentist(problem, fs);
        log_line(o, std::string("fit: ") + (fit.converged ? "converged" : "did not converge") + " after " +
                        std::to_string(fit.iterations) + " iterations");
        if (!fit.converged) throw NumericalError("frequentist fit did not converge");
        std::vector<double> lo(names.size(), std::nan("")), hi(names.size(), std::nan(""));
        if (c.estimator.bootstrap >= 2) {
            BootstrapSettings bs;
            bs.replicates = c.estimator.bootstrap;
            bs.level = c.estimator.level;
            bs.seed = make_rng(c.seed, {0x626f6f74ull})();
            const BootstrapResult b = bootstrap_ci(fit, problem, fs, bs);
            lo = b.lo;
            hi = b.hi;
            log_line(o, "bootstrap: " + std::to_string(b.draws.size()) + " replicates kept");
        }
        for (std::size_t k = 0; k < names.size(); ++k)
            w.result.estimates.push_back({names[k], fit.theta_hat[k], lo[k], hi[k], "freq"});
        w.result.estimates.push_back({"gamma", fit.gamma_hat, std::nan(""), std::nan(""), "freq"});
        w.result.estimates.push_back({"tau", fit.tau_hat, std::nan(""), std::nan(""), "freq"});
        if (fit.kappa) w.result.estimates.push_back({"kappa", *fit.kappa, std::nan(""), std::nan(""), "freq"});
        write_trace(w, fit, names);
        c_hat = fit.c_hat;
    } else {
        const PosteriorChain chain = run_chain(problem, c.estimator.hyper, chain_settings(c));
        log_line(o, "chain: acceptance theta " + std::to_string(chain.acceptance_theta) + ", precisions " +
                        std::to_string(chain.acceptance_precision));
        std::vector<double> means;
        for (std::size_t k = 0; k < chain.names.size(); ++k) {
            const std::vector<double> col = chain.column(static_cast<int>(k));
            double m = 0.0;
            for (double x : col) m += x;
            m /= static_cast<double>(col.size());
            const auto [lo, hi] = hpd_interval(col, c.estimator.level);
            w.result.estimates.push_back({chain.names[k], m, lo, hi, "bayes"});
            means.push_back(m);
        }
        write_chain(chain, w.path("chain.csv"), provenance(c));
        w.track("chain.csv");
        const std::size_t nt = names.size();
        const std::vector<double> theta(means.begin(), means.begin() + static_cast<std::ptrdiff_t>(nt));
        std::optional<double> kappa;
        if (cons) kappa = c.estimator.kappa_random ? means[nt + 2] : c.estimator.kappa;
        const PriorComponents prior = prior_components(problem.penalty().assemble(theta), means[nt],
                                                       cons ? &*cons : nullptr, kappa);
        c_hat = coefficient_mean(prior, problem.design(), problem.zeta(), means[nt + 1]);
    }
    std::vector<std::pair<double, double>> dom;
    for (const auto& b : c.basis) dom.emplace_back(b.lo, b.hi);
    export_surface(c_hat, basis, default_axes(c.surface, dom), w.path("surface.csv"), provenance(c));
    w.track("surface.csv");
    write_estimates(w);
}

void run_simulate(const RunConfig& c, const RunOptions& o, Writer& w) {
    StudyConfig sc;
    sc.theta_true = c.study.theta_true;
    sc.noise_sd = c.study.noise_sd;
    sc.grid = c.study.grid;
    sc.basis = c.basis;
    sc.replicates = c.study.replicates;
    sc.estimators = c.study.estimators;
    sc.seed = c.seed;
    sc.fit = fit_settings(c);
    sc.chain = chain_settings(c);
    sc.hyper = c.estimator.hyper;
    sc.quadrature = c.quadrature;
    log_line(o, "simulate: " + std::to_string(sc.replicates) + " replicates x " + std::to_string(sc.noise_sd.size()) +
                    " noise levels x " + std::to_string(sc.estimators.size()) + " estimators");
    const MetricsTable t = run_study(sc);
    t.write(w.path("metrics.csv"), provenance(c));
    w.track("metrics.csv");
    t.write_raw(w.path("replicates.csv"), {"theta1", "theta2"}, provenance(c));
    w.track("replicates.csv");
    for (const auto& r : t.rows)
        w.result.estimates.push_back({r.estimator + "/" + r.parameter, r.mean_estimate, std::nan(""), std::nan(""),
                                      "sd=" + std::to_string(r.noise_sd)});
    log_line(o, "simulate: " + std::to_string(t.failures) + " failed replicates");
}

void run_calibrate(const RunConfig& c, const RunOptions& o, Writer& w) {
    std::vector<OptionQuote> quotes;
    if (!c.input.empty()) {
        std::vector<std::string> diag;
        quotes = ingest_options(c.input, &diag);
        for (const auto& d : diag) log_line(o, "ingest: " + d);
    } else {
        quotes = synthetic_quotes(*c.calibration.synthetic, make_rng(c.seed, {0x71756f74ull})());
        write_options(quotes, w.path("quotes.csv"));
        w.track("quotes.csv");
    }
    log_line(o, "calibrate: " + std::to_string(quotes.size()) + " quotes");

    CalibrationSettings s;
    s.coordinates = c.calibration.coordinates;
    s.domain = c.calibration.domain;
    s.rate = c.calibration.rate;
    s.n_interior = c.calibration.n_interior;
    s.degree = c.calibration.degree;
    s.strike_gap = c.calibration.strike_gap;
    s.method = c.estimator.method == EstimatorMethod::freq ? CalibrationMethod::freq : CalibrationMethod::bayes;
    s.mode = c.estimator.mode;
    s.kappa = c.estimator.kappa;
    s.sigma0 = c.estimator.theta0[0];
    s.fit = fit_settings(c);
    s.boot.replicates = c.estimator.bootstrap;
    s.boot.seed = make_rng(c.seed, {0x626f6f74ull})();
    s.chain = chain_settings(c);
    s.hyper = c.estimator.hyper;
    s.level = c.estimator.level;
    const CalibrationResult r = calibrate_volatility(quotes, s);
    const char* m = method_name(c.estimator.method);
    w.result.estimates.push_back({"sigma", r.sigma_hat, r.lo, r.hi, m});
    w.result.estimates.push_back({"gamma", r.gamma_hat, std::nan(""), std::nan(""), m});
    w.result.estimates.push_back({"tau", r.tau_hat, std::nan(""), std::nan(""), m});
    if (r.fit && s.method == CalibrationMethod::freq) write_trace(w, *r.fit, {"sigma"});
    if (r.chain) {
        write_chain(*r.chain, w.path("chain.csv"), provenance(c));
        w.track("chain.csv");
    }
    const BsDomain& d = r.problem.domain;
    const bool raw = r.problem.coordinates == Coordinates::raw;
    export_surface(r.c_hat, r.problem.basis, default_axes(c.surface, {{d.x_lo, d.x_hi}, {d.t_lo, d.t_hi}}),
                   w.path("surface.csv"), provenance(c),
                   raw ? std::vector<std::string>{"spot", "maturity", "price"}
                       : std::vector<std::string>{"moneyness", "maturity", "price"});
    w.track("surface.csv");
    log_line(o, "calibrate: sigma " + std::to_string(r.sigma_hat));
    write_estimates(w);
}

}  // namespace

RunResult run(const RunConfig& config, const RunOptions& options) {
    if (options.threads < 1) throw ConfigError("--threads must be at least 1");
    kernels::set_threads(options.threads);
    std::error_code ec;
    fs::create_directories(config.output_dir, ec);
    if (ec) throw IoError("cannot create output directory " + config.output_dir + ": " + ec.message());
    RunResult result;
    Writer w{config, result, config.output_dir};
    write_effective(w);
    switch (config.command) {
        case Command::fit: run_fit(config, options, w); break;
        case Command::simulate: run_simulate(config, options, w); break;
        case Command::calibrate: run_calibrate(config, options, w); break;
    }
    return result;
}

}  // namespace pspde::cli
