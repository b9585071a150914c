#include "pspde/pde.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <sstream>

#include "pspde/error.hpp"
#include "pspde/kernels.hpp"

namespace pspde {

double Multiplier::value(std::span<const double> theta) const {
    double v = constant;
    for (std::size_t k = 0; k < theta_powers.size(); ++k) {
        const int pw = theta_powers[k];
        if (pw == 0) continue;
        if (k >= theta.size()) throw ValidationError("multiplier references a missing theta component");
        double t = 1.0;
        for (int e = 0; e < pw; ++e) t *= theta[k];
        v *= t;
    }
    return v;
}

double Polynomial::operator()(double x) const {
    if (coeffs.empty()) return 1.0;
    double v = 0.0;
    for (auto it = coeffs.rbegin(); it != coeffs.rend(); ++it) v = v * x + *it;
    return v;
}

int Polynomial::degree() const {
    if (coeffs.empty()) return 0;
    int d = static_cast<int>(coeffs.size()) - 1;
    while (d > 0 && coeffs[static_cast<std::size_t>(d)] == 0.0) --d;
    return d;
}

bool Polynomial::is_zero() const {
    if (coeffs.empty()) return false;
    return std::all_of(coeffs.begin(), coeffs.end(), [](double c) { return c == 0.0; });
}

Polynomial Polynomial::operator*(const Polynomial& other) const {
    if (coeffs.empty()) return other;
    if (other.coeffs.empty()) return *this;
    Polynomial out;
    out.coeffs.assign(coeffs.size() + other.coeffs.size() - 1, 0.0);
    for (std::size_t i = 0; i < coeffs.size(); ++i)
        for (std::size_t j = 0; j < other.coeffs.size(); ++j) out.coeffs[i + j] += coeffs[i] * other.coeffs[j];
    return out;
}

namespace {

std::string term_name(const PdeTerm& t, std::size_t k) {
    return t.label.empty() ? "term #" + std::to_string(k + 1) : "term '" + t.label + "'";
}

void check_polys(const std::vector<Polynomial>& polys, int p, const std::string& who) {
    if (!polys.empty() && static_cast<int>(polys.size()) != p)
        throw ValidationError(who + " has " + std::to_string(polys.size()) + " coefficient polynomials, expected " +
                              std::to_string(p));
    for (const auto& poly : polys)
        for (double c : poly.coeffs)
            if (!std::isfinite(c)) throw ValidationError(who + " has a non-finite polynomial coefficient");
}

void check_multiplier(const Multiplier& m, std::size_t n_theta, const std::string& who) {
    if (!std::isfinite(m.constant)) throw ValidationError(who + " has a non-finite multiplier constant");
    if (m.theta_powers.size() > n_theta)
        throw ValidationError(who + " references theta component " + std::to_string(m.theta_powers.size()) +
                              " but only " + std::to_string(n_theta) + " are declared");
    for (int pw : m.theta_powers)
        if (pw < 0) throw ValidationError(who + " has a negative theta exponent");
}

const Polynomial& poly_at(const std::vector<Polynomial>& polys, int d) {
    static const Polynomial one{};
    return polys.empty() ? one : polys[static_cast<std::size_t>(d)];
}

std::vector<int> padded(const std::vector<int>& pw, std::size_t n) {
    std::vector<int> out(n, 0);
    std::copy(pw.begin(), pw.end(), out.begin());
    return out;
}

double monomial(const std::vector<int>& powers, std::span<const double> theta) {
    double v = 1.0;
    for (std::size_t k = 0; k < powers.size(); ++k)
        for (int e = 0; e < powers[k]; ++e) v *= theta[k];
    return v;
}

}  // namespace

void PdeSpec::validate() const {
    if (p < 1) throw ValidationError("PDE needs at least one dimension");
    if (terms.empty()) throw ValidationError("PDE needs at least one term");
    for (std::size_t k = 0; k < terms.size(); ++k) {
        const auto& t = terms[k];
        const std::string who = term_name(t, k);
        if (static_cast<int>(t.deriv_orders.size()) != p)
            throw ValidationError(who + " has " + std::to_string(t.deriv_orders.size()) + " derivative orders, expected " +
                                  std::to_string(p));
        for (int a : t.deriv_orders)
            if (a < 0) throw ValidationError(who + " has a negative derivative order");
        check_polys(t.coeff_polys, p, who);
        check_multiplier(t.multiplier, theta_names.size(), who);
    }
    if (forcing) {
        check_polys(forcing->polys, p, "forcing term");
        check_multiplier(forcing->multiplier, theta_names.size(), "forcing term");
    }
}

int PdeSpec::order() const {
    int best = 0;
    for (const auto& t : terms) {
        int s = 0;
        for (int a : t.deriv_orders) s += a;
        best = std::max(best, s);
    }
    return best;
}

int PdeSpec::max_deriv(int d) const {
    int best = 0;
    for (const auto& t : terms) best = std::max(best, t.deriv_orders.at(static_cast<std::size_t>(d)));
    return best;
}

void PdeSpec::check_basis(const TensorBasis& basis) const {
    if (basis.dimension() != p)
        throw ValidationError("PDE has " + std::to_string(p) + " dimensions, basis has " +
                              std::to_string(basis.dimension()));
    for (std::size_t k = 0; k < terms.size(); ++k)
        for (int d = 0; d < p; ++d) {
            const int a = terms[k].deriv_orders[static_cast<std::size_t>(d)];
            if (a > basis.dim(d).degree)
                throw ValidationError(term_name(terms[k], k) + ": derivative order " + std::to_string(a) +
                                      " in dimension " + std::to_string(d + 1) + " exceeds basis degree " +
                                      std::to_string(basis.dim(d).degree));
        }
}

double PdeSpec::residual(std::span<const double> x, std::span<const double> theta,
                         const std::function<double(std::span<const int>)>& derivative) const {
    double f = 0.0;
    for (const auto& t : terms) {
        double a = t.multiplier.value(theta);
        for (int d = 0; d < p; ++d) a *= poly_at(t.coeff_polys, d)(x[static_cast<std::size_t>(d)]);
        f += a * derivative(t.deriv_orders);
    }
    if (forcing) {
        double g = forcing->multiplier.value(theta);
        for (int d = 0; d < p; ++d) g *= poly_at(forcing->polys, d)(x[static_cast<std::size_t>(d)]);
        f += g;
    }
    return f;
}

void QuadratureRule::validate() const {
    if (points_per_span < 2)
        throw ValidationError("quadrature needs at least 2 points per knot span, got " + std::to_string(points_per_span));
    if (kind == QuadratureKind::uniform && uniform_nodes < 2)
        throw ValidationError("uniform quadrature needs at least 2 nodes, got " + std::to_string(uniform_nodes));
}

QuadratureNodes quadrature_nodes(const BasisSpec1D& spec, const QuadratureRule& rule, int integrand_degree) {
    rule.validate();
    QuadratureNodes q;
    if (rule.kind == QuadratureKind::uniform) {
        const int n = rule.uniform_nodes;
        const double h = (spec.hi - spec.lo) / (n - 1);
        for (int i = 0; i < n; ++i) {
            q.x.push_back(i == n - 1 ? spec.hi : spec.lo + i * h);
            q.w.push_back((i == 0 || i == n - 1) ? 0.5 * h : h);
            q.span.push_back(-1);
        }
        return q;
    }
    const int m = rule.points_per_span;
    // Romberg: trapezoid sums on m, 2m, ..., m 2^L subintervals combined so
    // that polynomials up to degree 2L+1 are integrated exactly.
    const int levels = (rule.kind == QuadratureKind::romberg) ? std::clamp(integrand_degree / 2, 1, 10) : 0;
    const int fine = m << levels;
    std::vector<std::vector<double>> table(static_cast<std::size_t>(levels + 1));
    for (int k = 0; k <= levels; ++k) {
        auto& w = table[static_cast<std::size_t>(k)];
        w.assign(static_cast<std::size_t>(fine + 1), 0.0);
        const int step = 1 << (levels - k);
        const double h = 1.0 / (m << k);
        for (int i = 0; i <= fine; i += step) w[static_cast<std::size_t>(i)] = (i == 0 || i == fine) ? 0.5 * h : h;
    }
    // R[k][j] = R[k][j-1] + (R[k][j-1] - R[k-1][j-1]) / (4^j - 1), kept in place
    for (int j = 1; j <= levels; ++j) {
        const double f = 1.0 / (std::pow(4.0, j) - 1.0);
        for (int k = levels; k >= j; --k) {
            auto& cur = table[static_cast<std::size_t>(k)];
            const auto& prev = table[static_cast<std::size_t>(k - 1)];
            for (std::size_t i = 0; i < cur.size(); ++i) cur[i] += (cur[i] - prev[i]) * f;
        }
    }
    const auto& unit = table[static_cast<std::size_t>(levels)];
    const auto bp = spec.breakpoints();
    for (std::size_t s = 0; s + 1 < bp.size(); ++s) {
        const double a = bp[s];
        const double b = bp[s + 1];
        const int span = spec.degree + static_cast<int>(s);
        for (int i = 0; i <= fine; ++i) {
            const double wi = unit[static_cast<std::size_t>(i)];
            if (wi == 0.0) continue;
            q.x.push_back(i == fine ? b : a + (b - a) * i / fine);
            q.w.push_back((b - a) * wi);
            q.span.push_back(span);
        }
    }
    return q;
}

namespace {

int eval_node(const BasisSpec1D& spec, const QuadratureNodes& q, std::size_t k, int deriv, std::span<double> out) {
    return q.span[k] < 0 ? eval_local(spec, q.x[k], deriv, out) : eval_local_in_span(spec, q.span[k], q.x[k], deriv, out);
}

void check_deriv(const BasisSpec1D& spec, int deriv) {
    if (deriv < 0 || deriv > spec.degree)
        throw ValidationError("derivative order " + std::to_string(deriv) + " exceeds basis degree " +
                              std::to_string(spec.degree));
}

}  // namespace

Eigen::MatrixXd weighted_gram_1d(const BasisSpec1D& spec, int deriv_i, int deriv_j, const Polynomial& poly_i,
                                 const Polynomial& poly_j, const QuadratureRule& rule) {
    check_deriv(spec, deriv_i);
    check_deriv(spec, deriv_j);
    const int M = spec.size();
    Eigen::MatrixXd G = Eigen::MatrixXd::Zero(M, M);
    if (poly_i.is_zero() || poly_j.is_zero()) {
        rule.validate();
        return G;
    }
    const int deg = poly_i.degree() + poly_j.degree() + 2 * spec.degree - deriv_i - deriv_j;
    const QuadratureNodes q = quadrature_nodes(spec, rule, deg);
    const int w = spec.degree + 1;
    std::array<double, 16> bi{};
    std::array<double, 16> bj{};
    for (std::size_t k = 0; k < q.x.size(); ++k) {
        const double a = q.w[k] * poly_i(q.x[k]) * poly_j(q.x[k]);
        if (a == 0.0) continue;
        const int fi = eval_node(spec, q, k, deriv_i, bi);
        const int fj = eval_node(spec, q, k, deriv_j, bj);
        for (int r = 0; r < w; ++r)
            for (int c = 0; c < w; ++c)
                G(fi + r, fj + c) += a * bi[static_cast<std::size_t>(r)] * bj[static_cast<std::size_t>(c)];
    }
    return G;
}

Eigen::MatrixXd weighted_gram_1d(const BasisSpec1D& spec, int deriv_i, int deriv_j, const Polynomial& poly_i,
                                 const Polynomial& poly_j, int quad_points_per_span) {
    QuadratureRule rule;
    rule.points_per_span = quad_points_per_span;
    return weighted_gram_1d(spec, deriv_i, deriv_j, poly_i, poly_j, rule);
}

Eigen::VectorXd weighted_moment_1d(const BasisSpec1D& spec, int deriv, const Polynomial& poly,
                                   const QuadratureRule& rule) {
    check_deriv(spec, deriv);
    Eigen::VectorXd s = Eigen::VectorXd::Zero(spec.size());
    if (poly.is_zero()) {
        rule.validate();
        return s;
    }
    const QuadratureNodes q = quadrature_nodes(spec, rule, poly.degree() + spec.degree - deriv);
    std::array<double, 16> b{};
    for (std::size_t k = 0; k < q.x.size(); ++k) {
        const double a = q.w[k] * poly(q.x[k]);
        const int f = eval_node(spec, q, k, deriv, b);
        for (int r = 0; r <= spec.degree; ++r) s[f + r] += a * b[static_cast<std::size_t>(r)];
    }
    return s;
}

double squared_integral_1d(const BasisSpec1D& spec, const Polynomial& f, const QuadratureRule& rule) {
    const QuadratureNodes q = quadrature_nodes(spec, rule, 2 * f.degree());
    double s = 0.0;
    for (std::size_t k = 0; k < q.x.size(); ++k) {
        const double v = f(q.x[k]);
        s += q.w[k] * v * v;
    }
    return s;
}

double penalty_value(const PenaltyQuadratic& q, const Eigen::VectorXd& c) {
    if (c.size() != q.R.cols() || q.r.size() != c.size())
        throw ValidationError("penalty_value: coefficient vector has length " + std::to_string(c.size()) +
                              ", penalty has " + std::to_string(q.R.cols()));
    return c.dot(q.R * c) + 2.0 * c.dot(q.r) + q.l;
}

PenaltyAssembler::PenaltyAssembler(PdeSpec pde, TensorBasis basis, QuadratureRule rule, CoefficientOrder order,
                                   bool parallel)
    : pde_(std::move(pde)), basis_(std::move(basis)), rule_(rule), order_(std::move(order)) {
    pde_.validate();
    pde_.check_basis(basis_);
    rule_.validate();
    if (order_.size() != basis_.size()) throw ValidationError("coefficient order does not match the basis");
    const int p = pde_.p;
    const std::size_t nt = pde_.theta_names.size();
    const auto& terms = pde_.terms;

    auto matrix_group = [&](const std::vector<int>& pw) -> BandMatrix& {
        for (auto& g : R_groups_)
            if (g.powers == pw) return g.block;
        R_groups_.push_back({pw, BandMatrix(order_.size(), order_.bandwidth())});
        return R_groups_.back().block;
    };

    for (std::size_t k = 0; k < terms.size(); ++k) {
        for (std::size_t k2 = k; k2 < terms.size(); ++k2) {
            const auto& a = terms[k];
            const auto& b = terms[k2];
            const double w = a.multiplier.constant * b.multiplier.constant;
            if (w == 0.0) continue;
            std::vector<int> pw = padded(a.multiplier.theta_powers, nt);
            const auto pb = padded(b.multiplier.theta_powers, nt);
            for (std::size_t i = 0; i < nt; ++i) pw[i] += pb[i];
            std::vector<Eigen::MatrixXd> factors;
            for (int d = 0; d < p; ++d)
                factors.push_back(weighted_gram_1d(basis_.dim(d), a.deriv_orders[static_cast<std::size_t>(d)],
                                                   b.deriv_orders[static_cast<std::size_t>(d)], poly_at(a.coeff_polys, d),
                                                   poly_at(b.coeff_polys, d), rule_));
            BandMatrix& target = matrix_group(pw);
            if (parallel)
                kernels::kron_band_accumulate(basis_, order_, factors, w, k != k2, target);
            else
                kernels::kron_band_accumulate_serial(basis_, order_, factors, w, k != k2, target);
        }
    }

    if (pde_.forcing) {
        const auto& f = *pde_.forcing;
        const auto pf = padded(f.multiplier.theta_powers, nt);
        for (const auto& t : terms) {
            const double w = t.multiplier.constant * f.multiplier.constant;
            if (w == 0.0) continue;
            std::vector<int> pw = padded(t.multiplier.theta_powers, nt);
            for (std::size_t i = 0; i < nt; ++i) pw[i] += pf[i];
            std::vector<Eigen::VectorXd> factors;
            for (int d = 0; d < p; ++d)
                factors.push_back(weighted_moment_1d(basis_.dim(d), t.deriv_orders[static_cast<std::size_t>(d)],
                                                     poly_at(t.coeff_polys, d) * poly_at(f.polys, d), rule_));
            Eigen::VectorXd v = order_.to_internal(w * kernels::kron_vector(factors));
            auto it = std::find_if(r_groups_.begin(), r_groups_.end(), [&](const auto& g) { return g.powers == pw; });
            if (it == r_groups_.end())
                r_groups_.push_back({pw, std::move(v)});
            else
                it->block += v;
        }
        double lf = f.multiplier.constant * f.multiplier.constant;
        for (int d = 0; d < p; ++d) lf *= squared_integral_1d(basis_.dim(d), poly_at(f.polys, d), rule_);
        std::vector<int> pw = pf;
        for (int& e : pw) e *= 2;
        l_groups_.push_back({pw, lf});
    }
}

void PenaltyAssembler::assemble(std::span<const double> theta, BandMatrix& R, Eigen::VectorXd& r, double& l) const {
    if (theta.size() != pde_.theta_names.size())
        throw ValidationError("theta has " + std::to_string(theta.size()) + " components, PDE declares " +
                              std::to_string(pde_.theta_names.size()));
    if (R.size() != order_.size() || R.bandwidth() != order_.bandwidth())
        R = BandMatrix(order_.size(), order_.bandwidth());
    else
        R.set_zero();
    for (const auto& g : R_groups_) R.axpy(monomial(g.powers, theta), g.block);
    r.setZero(order_.size());
    for (const auto& g : r_groups_) r += monomial(g.powers, theta) * g.block;
    l = 0.0;
    for (const auto& g : l_groups_) l += monomial(g.powers, theta) * g.value;
}

PenaltyQuadratic PenaltyAssembler::assemble(std::span<const double> theta) const {
    BandMatrix R;
    Eigen::VectorXd r;
    PenaltyQuadratic q;
    assemble(theta, R, r, q.l);
    q.R = order_.sparse(R);
    q.r = order_.to_canonical(r);
    return q;
}

PenaltyQuadratic assemble_penalty(const PdeSpec& pde, const TensorBasis& basis, std::span<const double> theta,
                                  const QuadratureRule& rule) {
    PenaltyAssembler a(pde, basis, rule, CoefficientOrder::for_basis(basis));
    return a.assemble(theta);
}

PenaltyQuadratic assemble_penalty(const PdeSpec& pde, const TensorBasis& basis, std::span<const double> theta,
                                  int quad_points_per_span) {
    QuadratureRule rule;
    rule.points_per_span = quad_points_per_span;
    return assemble_penalty(pde, basis, theta, rule);
}

ConstraintSet build_constraints(const std::vector<Condition>& conditions, const TensorBasis& basis) {
    std::vector<Eigen::Triplet<double>> trip;
    std::vector<double> v;
    ConstraintSet out;
    int row = 0;
    for (std::size_t k = 0; k < conditions.size(); ++k) {
        const auto& c = conditions[k];
        const std::string who = c.label.empty() ? "condition #" + std::to_string(k + 1) : "condition '" + c.label + "'";
        if (c.points.rows() == 0) throw ValidationError(who + " has no sample points");
        if (!c.target) throw ValidationError(who + " has no target function");
        for (Eigen::Index i = 0; i < c.points.rows(); ++i) {
            std::vector<double> x(static_cast<std::size_t>(c.points.cols()));
            for (Eigen::Index d = 0; d < c.points.cols(); ++d) x[static_cast<std::size_t>(d)] = c.points(i, d);
            if (!basis.contains(x)) {
                std::ostringstream os;
                os << who << ": point " << i << " lies outside the basis domain";
                throw ValidationError(os.str());
            }
        }
        const DesignMatrix H = tensor_design(basis, c.points, c.deriv_orders);
        for (Eigen::Index i = 0; i < H.rows(); ++i) {
            for (SparseRowMatrix::InnerIterator it(H.B, i); it; ++it)
                if (it.value() != 0.0) trip.emplace_back(row, static_cast<int>(it.col()), it.value());
            std::vector<double> x(static_cast<std::size_t>(c.points.cols()));
            for (Eigen::Index d = 0; d < c.points.cols(); ++d) x[static_cast<std::size_t>(d)] = c.points(i, d);
            v.push_back(c.target(x));
            out.meta.push_back({x, c.deriv_orders, c.label});
            ++row;
        }
    }
    out.H = SparseRowMatrix(row, basis.size());
    out.H.setFromTriplets(trip.begin(), trip.end());
    out.v = Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
    return out;
}

std::vector<int> redundant_rows(const ConstraintSet& cons) {
    const Eigen::MatrixXd H = Eigen::MatrixXd(cons.H);
    std::vector<int> out;
    if (H.rows() == 0) return out;
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(H.transpose());
    qr.setThreshold(1e-10);
    if (qr.rank() == H.rows()) return out;
    // locate the dependent rows greedily, in row order
    std::vector<Eigen::VectorXd> basis_rows;
    for (Eigen::Index i = 0; i < H.rows(); ++i) {
        Eigen::VectorXd r = H.row(i).transpose();
        const double n0 = r.norm();
        for (int pass = 0; pass < 2; ++pass)
            for (const auto& q : basis_rows) r -= q.dot(r) * q;
        if (r.norm() <= 1e-9 * std::max(n0, 1e-300)) {
            out.push_back(static_cast<int>(i));
        } else {
            basis_rows.push_back(r / r.norm());
        }
    }
    return out;
}

Eigen::MatrixXd face_knot_points(const TensorBasis& basis, int dim, bool upper, bool include_edges) {
    if (dim < 0 || dim >= basis.dimension())
        throw ValidationError("face dimension " + std::to_string(dim + 1) + " out of range");
    GridAxes axes;
    for (int d = 0; d < basis.dimension(); ++d) {
        const auto& s = basis.dim(d);
        if (d == dim) {
            axes.push_back({upper ? s.hi : s.lo});
            continue;
        }
        auto bp = s.breakpoints();
        if (!include_edges) bp = std::vector<double>(bp.begin() + 1, bp.end() - 1);
        axes.push_back(std::move(bp));
    }
    return grid_points(axes);
}

}  // namespace pspde
