#pragma once

#include <span>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

namespace pspde {

/// One-dimensional clamped B-spline basis on [lo, hi].
///
/// The full knot vector repeats each boundary knot degree+1 times, so the
/// basis interpolates at both ends and has size() = interior + degree + 1
/// functions. Points equal to `hi` are evaluated as left limits, which makes
/// the last basis function equal to 1 there.
struct BasisSpec1D {
    double lo = 0.0;
    double hi = 1.0;
    int degree = 3;
    std::vector<double> interior_knots;
    std::vector<double> knots;  // clamped, length size() + degree + 1

    [[nodiscard]] int size() const noexcept {
        return static_cast<int>(interior_knots.size()) + degree + 1;
    }
    /// Index of the knot span [knots[s], knots[s+1]) holding x.
    [[nodiscard]] int find_span(double x) const;
    /// Distinct knot positions (lo, interior..., hi).
    [[nodiscard]] std::vector<double> breakpoints() const;
};

/// Builds a clamped basis; throws ValidationError naming the offending knot.
BasisSpec1D build_knots(double lo, double hi, int degree, std::vector<double> interior_knots);

/// Clamped basis with `n_basis` functions and equidistant interior knots.
BasisSpec1D equidistant_basis(double lo, double hi, int degree, int n_basis);

/// Values of the degree+1 basis functions that are active at x (derivative
/// order `deriv`). Returns the index of the first active function.
int eval_local(const BasisSpec1D& spec, double x, int deriv, std::span<double> out);

/// As eval_local but using the polynomial piece of knot span `span`, so
/// that x on a span boundary gives the one-sided limit from inside the span.
int eval_local_in_span(const BasisSpec1D& spec, int span, double x, int deriv, std::span<double> out);

/// Dense N x M matrix of basis (derivative) values.
Eigen::MatrixXd eval_basis_1d(const BasisSpec1D& spec, std::span<const double> points, int deriv);

/// Tensor product of per-dimension bases. Coefficients are laid out with
/// dimension 1 fastest: index = j1 + M1 * (j2 + M2 * (j3 + ...)).
class TensorBasis {
public:
    TensorBasis() = default;
    explicit TensorBasis(std::vector<BasisSpec1D> dims);

    [[nodiscard]] int dimension() const noexcept { return static_cast<int>(dims_.size()); }
    [[nodiscard]] const BasisSpec1D& dim(int d) const { return dims_.at(d); }
    [[nodiscard]] const std::vector<BasisSpec1D>& dims() const noexcept { return dims_; }
    /// Total coefficient count, the product of per-dimension sizes.
    [[nodiscard]] int size() const noexcept { return size_; }
    [[nodiscard]] int stride(int d) const { return strides_.at(d); }
    /// Number of active tensor functions at any point.
    [[nodiscard]] int local_size() const noexcept { return local_size_; }
    [[nodiscard]] bool contains(std::span<const double> x) const;

private:
    std::vector<BasisSpec1D> dims_;
    std::vector<int> strides_;
    int size_ = 0;
    int local_size_ = 0;
};

using SparseRowMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor>;

struct DesignMatrix {
    SparseRowMatrix B;
    std::vector<int> deriv_orders;

    [[nodiscard]] Eigen::Index rows() const noexcept { return B.rows(); }
    [[nodiscard]] Eigen::Index cols() const noexcept { return B.cols(); }
};

/// Grid axes: the evaluation grid is the outer product of the axes, with
/// axis 1 varying fastest in the row order.
using GridAxes = std::vector<std::vector<double>>;

/// Scatter mode: one row per point (rows of `points`, N x p).
DesignMatrix tensor_design(const TensorBasis& basis, const Eigen::MatrixXd& points,
                           std::span<const int> deriv_orders);

/// Grid mode: Kronecker product B_p (x) ... (x) B_1 of per-axis matrices.
DesignMatrix tensor_design(const TensorBasis& basis, const GridAxes& axes,
                           std::span<const int> deriv_orders);

/// Outer product of the axes as an N x p point matrix, axis 1 fastest.
Eigen::MatrixXd grid_points(const GridAxes& axes);

}  // namespace pspde
