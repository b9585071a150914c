#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "pspde/basis.hpp"
#include "pspde/linalg.hpp"

namespace pspde {

/// constant * prod_k theta_k^pow_k
struct Multiplier {
    double constant = 1.0;
    std::vector<int> theta_powers;  // may be shorter than theta; missing powers are 0

    [[nodiscard]] double value(std::span<const double> theta) const;
};

/// Polynomial in one variable, ascending coefficients. Empty means 1.
struct Polynomial {
    std::vector<double> coeffs;

    [[nodiscard]] double operator()(double x) const;
    [[nodiscard]] int degree() const;
    [[nodiscard]] bool is_zero() const;
    [[nodiscard]] Polynomial operator*(const Polynomial& other) const;
    static Polynomial constant(double c) { return Polynomial{{c}}; }
};

/// multiplier * prod_d a_d(x_d) * D^alpha u
struct PdeTerm {
    Multiplier multiplier;
    std::vector<Polynomial> coeff_polys;  // per dimension; empty list means all ones
    std::vector<int> deriv_orders;
    std::string label;
};

/// multiplier * prod_d f_d(x_d), a source term free of u.
struct ForcingTerm {
    Multiplier multiplier;
    std::vector<Polynomial> polys;
};

struct PdeSpec {
    int p = 0;
    std::vector<PdeTerm> terms;
    std::optional<ForcingTerm> forcing;
    std::vector<std::string> theta_names;

    /// Throws ValidationError on malformed terms.
    void validate() const;
    /// Highest total derivative order over all terms.
    [[nodiscard]] int order() const;
    /// Highest derivative order in dimension d.
    [[nodiscard]] int max_deriv(int d) const;
    /// Checks derivative orders against the basis degrees, naming term and dimension.
    void check_basis(const TensorBasis& basis) const;
    /// F(x, u) for a function given through its partial derivatives.
    [[nodiscard]] double residual(std::span<const double> x, std::span<const double> theta,
                                  const std::function<double(std::span<const int>)>& derivative) const;
};

enum class QuadratureKind {
    romberg,    // per-span trapezoid with Richardson extrapolation, exact on the span polynomials
    trapezoid,  // per-span composite trapezoid
    uniform,    // global uniform trapezoid grid, independent of the knots
};

struct QuadratureRule {
    QuadratureKind kind = QuadratureKind::romberg;
    int points_per_span = 32;  // subintervals per knot span
    int uniform_nodes = 400;   // nodes per dimension for the uniform kind

    void validate() const;
};

/// Nodes, weights and (for per-span rules) the span each node belongs to.
struct QuadratureNodes {
    std::vector<double> x;
    std::vector<double> w;
    std::vector<int> span;  // -1: evaluate with the default span lookup
};

/// Quadrature over [lo, hi] of `spec` able to integrate piecewise polynomials
/// of the given degree (only used by the romberg kind).
QuadratureNodes quadrature_nodes(const BasisSpec1D& spec, const QuadratureRule& rule, int integrand_degree);

/// M x M matrix approximating int a_i(x) a_j(x) B^(di)(x) B^(dj)(x)^T dx.
Eigen::MatrixXd weighted_gram_1d(const BasisSpec1D& spec, int deriv_i, int deriv_j, const Polynomial& poly_i,
                                 const Polynomial& poly_j, const QuadratureRule& rule);
Eigen::MatrixXd weighted_gram_1d(const BasisSpec1D& spec, int deriv_i, int deriv_j, const Polynomial& poly_i,
                                 const Polynomial& poly_j, int quad_points_per_span);

/// M-vector approximating int a(x) f(x) B^(d)(x) dx.
Eigen::VectorXd weighted_moment_1d(const BasisSpec1D& spec, int deriv, const Polynomial& poly,
                                   const QuadratureRule& rule);

/// int f(x)^2 dx over the basis domain.
double squared_integral_1d(const BasisSpec1D& spec, const Polynomial& f, const QuadratureRule& rule);

/// PEN(c) = c^T R c + 2 c^T r + l, canonical coefficient order.
struct PenaltyQuadratic {
    Eigen::SparseMatrix<double> R;
    Eigen::VectorXd r;
    double l = 0.0;
};

double penalty_value(const PenaltyQuadratic& q, const Eigen::VectorXd& c);

/// Caches the theta-independent Kronecker blocks of a PDE penalty, grouped by
/// theta monomial, so that R(theta) is a short weighted sum of bands.
class PenaltyAssembler {
public:
    PenaltyAssembler(PdeSpec pde, TensorBasis basis, QuadratureRule rule, CoefficientOrder order,
                     bool parallel = true);

    [[nodiscard]] const PdeSpec& pde() const noexcept { return pde_; }
    [[nodiscard]] const TensorBasis& basis() const noexcept { return basis_; }
    [[nodiscard]] const CoefficientOrder& order() const noexcept { return order_; }
    [[nodiscard]] bool has_forcing() const noexcept { return !r_groups_.empty(); }
    [[nodiscard]] int group_count() const noexcept { return static_cast<int>(R_groups_.size()); }

    /// R (internal band), r (internal order) and l at theta.
    void assemble(std::span<const double> theta, BandMatrix& R, Eigen::VectorXd& r, double& l) const;
    /// Canonical-order quadratic.
    [[nodiscard]] PenaltyQuadratic assemble(std::span<const double> theta) const;

private:
    struct MatrixGroup {
        std::vector<int> powers;
        BandMatrix block;
    };
    struct VectorGroup {
        std::vector<int> powers;
        Eigen::VectorXd block;  // internal order
    };
    struct ScalarGroup {
        std::vector<int> powers;
        double value = 0.0;
    };

    PdeSpec pde_;
    TensorBasis basis_;
    QuadratureRule rule_;
    CoefficientOrder order_;
    std::vector<MatrixGroup> R_groups_;
    std::vector<VectorGroup> r_groups_;
    std::vector<ScalarGroup> l_groups_;
};

PenaltyQuadratic assemble_penalty(const PdeSpec& pde, const TensorBasis& basis, std::span<const double> theta,
                                  const QuadratureRule& rule = {});
PenaltyQuadratic assemble_penalty(const PdeSpec& pde, const TensorBasis& basis, std::span<const double> theta,
                                  int quad_points_per_span);

/// One differential condition D^alpha u(x0) = v(x0) on a set of points.
struct Condition {
    Eigen::MatrixXd points;  // K x p
    std::vector<int> deriv_orders;
    std::function<double(std::span<const double>)> target;
    std::string label;
};

struct ConstraintMeta {
    std::vector<double> x;
    std::vector<int> deriv_orders;
    std::string label;
};

/// H c = v, canonical coefficient order.
struct ConstraintSet {
    SparseRowMatrix H;
    Eigen::VectorXd v;
    std::vector<ConstraintMeta> meta;

    [[nodiscard]] int rows() const noexcept { return static_cast<int>(H.rows()); }
    [[nodiscard]] bool empty() const noexcept { return H.rows() == 0; }
};

ConstraintSet build_constraints(const std::vector<Condition>& conditions, const TensorBasis& basis);

/// Rows that are linear combinations of earlier rows (rank-revealing QR).
std::vector<int> redundant_rows(const ConstraintSet& cons);

/// Knot grid restricted to the face x_dim = lo (upper=false) or hi. With
/// include_edges=false the face's own boundary is left out.
Eigen::MatrixXd face_knot_points(const TensorBasis& basis, int dim, bool upper, bool include_edges = true);

}  // namespace pspde
