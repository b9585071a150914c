#pragma once

#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

namespace pspde {

class TensorBasis;

/// Symmetric band matrix in LAPACK lower band storage (column-major,
/// leading dimension kd+1). Only the lower triangle inside the band is kept.
class BandMatrix {
public:
    BandMatrix() = default;
    BandMatrix(int n, int kd);

    [[nodiscard]] int size() const noexcept { return n_; }
    [[nodiscard]] int bandwidth() const noexcept { return kd_; }
    [[nodiscard]] int ld() const noexcept { return kd_ + 1; }

    /// Lower-band element, requires 0 <= i - j <= kd.
    double& lower(int i, int j) noexcept { return ab_[static_cast<std::size_t>(i - j + j * (kd_ + 1))]; }
    [[nodiscard]] double lower(int i, int j) const noexcept {
        return ab_[static_cast<std::size_t>(i - j + j * (kd_ + 1))];
    }
    /// Symmetric access; zero outside the band.
    [[nodiscard]] double operator()(int i, int j) const noexcept;

    void set_zero();
    void axpy(double a, const BandMatrix& x);
    /// this = a x + b y (same shape), reshaping this as needed.
    void assign_sum(double a, const BandMatrix& x, double b, const BandMatrix& y);
    void scale(double a);
    void add_diagonal(double value);
    [[nodiscard]] double mean_diagonal() const;
    [[nodiscard]] double max_abs() const;

    [[nodiscard]] Eigen::VectorXd multiply(const Eigen::VectorXd& x) const;
    [[nodiscard]] double quad_form(const Eigen::VectorXd& x) const;
    [[nodiscard]] Eigen::MatrixXd to_dense() const;

    double* data() noexcept { return ab_.data(); }
    [[nodiscard]] const double* data() const noexcept { return ab_.data(); }

private:
    int n_ = 0;
    int kd_ = 0;
    std::vector<double> ab_;
};

/// Cholesky factor A = L L^T of a symmetric positive definite band matrix.
class BandCholesky {
public:
    /// Returns false when A is not numerically positive definite.
    bool factorize(const BandMatrix& a);

    [[nodiscard]] bool ok() const noexcept { return ok_; }
    [[nodiscard]] int size() const noexcept { return factor_.size(); }
    [[nodiscard]] double log_det() const;

    void solve_in_place(Eigen::Ref<Eigen::MatrixXd> rhs) const;
    [[nodiscard]] Eigen::VectorXd solve(const Eigen::VectorXd& b) const;
    /// Solves L^T x = z; with z ~ N(0, I), x ~ N(0, A^{-1}).
    [[nodiscard]] Eigen::VectorXd solve_transposed_factor(const Eigen::VectorXd& z) const;

    /// Entries of A^{-1} inside the band of A (Takahashi recursion).
    [[nodiscard]] BandMatrix selected_inverse() const;

private:
    BandMatrix factor_;
    bool ok_ = false;
};

/// Sum over the band of Z(i,j) * G(i,j) for symmetric Z, G of equal bandwidth,
/// i.e. trace(Z G).
double trace_product(const BandMatrix& z, const BandMatrix& g);

struct RidgeFloor {
    bool applied = false;
    double value = 0.0;
};

/// Factorizes `a`; on failure adds rel * mean(diag) to the diagonal of `a`
/// and retries, growing the floor tenfold up to four times. Throws
/// NumericalError when all attempts fail.
RidgeFloor factorize_with_floor(BandCholesky& chol, BandMatrix& a, double rel = 1e-10);

/// Maps canonical coefficient indices (dimension 1 fastest) to the internal
/// order used by the band solvers, where the smallest dimension runs fastest
/// so that the bandwidth is minimal.
class CoefficientOrder {
public:
    CoefficientOrder() = default;

    static CoefficientOrder identity(int n, int kd);
    static CoefficientOrder for_basis(const TensorBasis& basis);
    /// Identity order with bandwidth taken from the pattern of `m`.
    static CoefficientOrder from_pattern(const Eigen::SparseMatrix<double>& m);

    [[nodiscard]] int size() const noexcept { return static_cast<int>(to_internal_.size()); }
    [[nodiscard]] int bandwidth() const noexcept { return kd_; }
    [[nodiscard]] int internal(int canonical) const { return to_internal_[canonical]; }
    [[nodiscard]] int canonical(int internal) const { return to_canonical_[internal]; }

    [[nodiscard]] Eigen::VectorXd to_internal(const Eigen::VectorXd& canonical) const;
    [[nodiscard]] Eigen::VectorXd to_canonical(const Eigen::VectorXd& internal) const;
    /// Band form (internal order) of a symmetric matrix given in canonical order.
    [[nodiscard]] BandMatrix band(const Eigen::SparseMatrix<double>& sym) const;
    /// Accumulates weight * m into `out` (same order and bandwidth).
    void accumulate(const Eigen::SparseMatrix<double>& sym, double weight, BandMatrix& out) const;
    /// Full symmetric canonical-order matrix from an internal band.
    [[nodiscard]] Eigen::SparseMatrix<double> sparse(const BandMatrix& band) const;

private:
    std::vector<int> to_internal_;
    std::vector<int> to_canonical_;
    int kd_ = 0;
};

}  // namespace pspde
