#include "pspde/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include <lapacke.h>

#include "pspde/basis.hpp"
#include "pspde/error.hpp"

namespace pspde {

BandMatrix::BandMatrix(int n, int kd)
    : n_(n), kd_(std::min(kd, std::max(n - 1, 0))),
      ab_(static_cast<std::size_t>(n) * static_cast<std::size_t>(kd_ + 1), 0.0) {}

double BandMatrix::operator()(int i, int j) const noexcept {
    if (i < j) std::swap(i, j);
    if (i - j > kd_) return 0.0;
    return lower(i, j);
}

void BandMatrix::set_zero() { std::fill(ab_.begin(), ab_.end(), 0.0); }

void BandMatrix::axpy(double a, const BandMatrix& x) {
    const std::size_t len = ab_.size();
    const double* src = x.ab_.data();
    double* dst = ab_.data();
    for (std::size_t k = 0; k < len; ++k) dst[k] += a * src[k];
}

void BandMatrix::assign_sum(double a, const BandMatrix& x, double b, const BandMatrix& y) {
    if (x.n_ != y.n_ || x.kd_ != y.kd_) throw ValidationError("band sum: shape mismatch");
    n_ = x.n_;
    kd_ = x.kd_;
    ab_.resize(x.ab_.size());
    const double* px = x.ab_.data();
    const double* py = y.ab_.data();
    double* dst = ab_.data();
    for (std::size_t k = 0; k < ab_.size(); ++k) dst[k] = a * px[k] + b * py[k];
}

void BandMatrix::scale(double a) {
    for (double& v : ab_) v *= a;
}

void BandMatrix::add_diagonal(double value) {
    for (int j = 0; j < n_; ++j) lower(j, j) += value;
}

double BandMatrix::mean_diagonal() const {
    if (n_ == 0) return 0.0;
    double s = 0.0;
    for (int j = 0; j < n_; ++j) s += lower(j, j);
    return s / n_;
}

double BandMatrix::max_abs() const {
    double m = 0.0;
    for (double v : ab_) m = std::max(m, std::abs(v));
    return m;
}

Eigen::VectorXd BandMatrix::multiply(const Eigen::VectorXd& x) const {
    Eigen::VectorXd y = Eigen::VectorXd::Zero(n_);
    for (int j = 0; j < n_; ++j) {
        const int iend = std::min(n_ - 1, j + kd_);
        y[j] += lower(j, j) * x[j];
        for (int i = j + 1; i <= iend; ++i) {
            const double a = lower(i, j);
            y[i] += a * x[j];
            y[j] += a * x[i];
        }
    }
    return y;
}

double BandMatrix::quad_form(const Eigen::VectorXd& x) const {
    double s = 0.0;
    for (int j = 0; j < n_; ++j) {
        const int iend = std::min(n_ - 1, j + kd_);
        double off = 0.0;
        for (int i = j + 1; i <= iend; ++i) off += lower(i, j) * x[i];
        s += x[j] * (lower(j, j) * x[j] + 2.0 * off);
    }
    return s;
}

Eigen::MatrixXd BandMatrix::to_dense() const {
    Eigen::MatrixXd d = Eigen::MatrixXd::Zero(n_, n_);
    for (int j = 0; j < n_; ++j) {
        const int iend = std::min(n_ - 1, j + kd_);
        for (int i = j; i <= iend; ++i) {
            d(i, j) = lower(i, j);
            d(j, i) = lower(i, j);
        }
    }
    return d;
}

bool BandCholesky::factorize(const BandMatrix& a) {
    factor_ = a;
    if (a.size() == 0) {
        ok_ = true;
        return true;
    }
    const lapack_int info = LAPACKE_dpbtrf_work(LAPACK_COL_MAJOR, 'L', factor_.size(), factor_.bandwidth(),
                                                factor_.data(), factor_.ld());
    ok_ = (info == 0);
    // the _work routine skips the NaN scan; a non-finite input shows up on the diagonal
    for (int j = 0; ok_ && j < factor_.size(); ++j) ok_ = std::isfinite(factor_.lower(j, j));
    return ok_;
}

double BandCholesky::log_det() const {
    double s = 0.0;
    for (int j = 0; j < factor_.size(); ++j) s += std::log(factor_.lower(j, j));
    return 2.0 * s;
}

void BandCholesky::solve_in_place(Eigen::Ref<Eigen::MatrixXd> rhs) const {
    if (!ok_) throw NumericalError("band solve requested on a failed factorization");
    if (rhs.rows() != factor_.size()) throw ValidationError("band solve: dimension mismatch");
    if (rhs.cols() == 0 || rhs.rows() == 0) return;
    const lapack_int info =
        LAPACKE_dpbtrs_work(LAPACK_COL_MAJOR, 'L', factor_.size(), factor_.bandwidth(),
                            static_cast<lapack_int>(rhs.cols()), factor_.data(), factor_.ld(), rhs.data(),
                            static_cast<lapack_int>(rhs.outerStride()));
    if (info != 0) throw NumericalError("dpbtrs failed with info " + std::to_string(info));
}

Eigen::VectorXd BandCholesky::solve(const Eigen::VectorXd& b) const {
    Eigen::VectorXd x = b;
    solve_in_place(x);
    return x;
}

Eigen::VectorXd BandCholesky::solve_transposed_factor(const Eigen::VectorXd& z) const {
    if (!ok_) throw NumericalError("band solve requested on a failed factorization");
    Eigen::VectorXd x = z;
    const lapack_int info = LAPACKE_dtbtrs(LAPACK_COL_MAJOR, 'L', 'T', 'N', factor_.size(), factor_.bandwidth(),
                                           1, factor_.data(), factor_.ld(), x.data(), factor_.size());
    if (info != 0) throw NumericalError("dtbtrs failed with info " + std::to_string(info));
    return x;
}

BandMatrix BandCholesky::selected_inverse() const {
    if (!ok_) throw NumericalError("selected inverse requested on a failed factorization");
    const int n = factor_.size();
    const int kd = factor_.bandwidth();
    BandMatrix z(n, kd);
    // Z = L^{-T} L^{-1}, so L^T Z = L^{-1} (upper part is diag(1/L_ii)).
    // Row i of Z inside the band only needs rows k > i already computed.
    for (int i = n - 1; i >= 0; --i) {
        const int kend = std::min(n - 1, i + kd);
        const double lii = factor_.lower(i, i);
        for (int j = kend; j >= i; --j) {
            double s = (j == i) ? 1.0 / lii : 0.0;
            for (int k = i + 1; k <= kend; ++k) {
                const double zkj = (k >= j) ? z.lower(k, j) : z.lower(j, k);
                s -= factor_.lower(k, i) * zkj;
            }
            z.lower(j, i) = s / lii;
        }
    }
    return z;
}

double trace_product(const BandMatrix& z, const BandMatrix& g) {
    if (z.size() != g.size()) throw ValidationError("trace_product: dimension mismatch");
    const int n = z.size();
    const int kd = std::min(z.bandwidth(), g.bandwidth());
    double s = 0.0;
    for (int j = 0; j < n; ++j) {
        s += z.lower(j, j) * g.lower(j, j);
        const int iend = std::min(n - 1, j + kd);
        for (int i = j + 1; i <= iend; ++i) s += 2.0 * z.lower(i, j) * g.lower(i, j);
    }
    return s;
}

RidgeFloor factorize_with_floor(BandCholesky& chol, BandMatrix& a, double rel) {
    if (chol.factorize(a)) return {};
    const double scale = std::max(std::abs(a.mean_diagonal()), 1e-300);
    double added = 0.0;
    double floor = rel * scale;
    for (int attempt = 0; attempt < 5; ++attempt) {
        a.add_diagonal(floor - added);
        added = floor;
        if (chol.factorize(a)) return {true, added};
        floor *= 10.0;
    }
    throw NumericalError(
        "system matrix is not positive definite even after a ridge floor of " + std::to_string(added) +
        "; use more knots, a larger adhesion parameter, or fewer conditions");
}

CoefficientOrder CoefficientOrder::identity(int n, int kd) {
    CoefficientOrder o;
    o.to_internal_.resize(static_cast<std::size_t>(n));
    std::iota(o.to_internal_.begin(), o.to_internal_.end(), 0);
    o.to_canonical_ = o.to_internal_;
    o.kd_ = std::min(kd, std::max(n - 1, 0));
    return o;
}

CoefficientOrder CoefficientOrder::for_basis(const TensorBasis& basis) {
    const int p = basis.dimension();
    std::vector<int> dims(static_cast<std::size_t>(p));
    std::iota(dims.begin(), dims.end(), 0);
    // Smallest dimension fastest; ties keep the canonical order.
    std::stable_sort(dims.begin(), dims.end(),
                     [&](int a, int b) { return basis.dim(a).size() < basis.dim(b).size(); });
    std::vector<int> internal_stride(static_cast<std::size_t>(p));
    int stride = 1;
    int kd = 0;
    for (int d : dims) {
        internal_stride[static_cast<std::size_t>(d)] = stride;
        kd += basis.dim(d).degree * stride;
        stride *= basis.dim(d).size();
    }
    const int n = basis.size();
    CoefficientOrder o;
    o.to_internal_.resize(static_cast<std::size_t>(n));
    o.to_canonical_.resize(static_cast<std::size_t>(n));
    for (int c = 0; c < n; ++c) {
        int rem = c;
        int idx = 0;
        for (int d = 0; d < p; ++d) {
            const int m = basis.dim(d).size();
            idx += (rem % m) * internal_stride[static_cast<std::size_t>(d)];
            rem /= m;
        }
        o.to_internal_[static_cast<std::size_t>(c)] = idx;
        o.to_canonical_[static_cast<std::size_t>(idx)] = c;
    }
    o.kd_ = std::min(kd, std::max(n - 1, 0));
    return o;
}

CoefficientOrder CoefficientOrder::from_pattern(const Eigen::SparseMatrix<double>& m) {
    int kd = 0;
    for (int k = 0; k < m.outerSize(); ++k)
        for (Eigen::SparseMatrix<double>::InnerIterator it(m, k); it; ++it)
            kd = std::max(kd, static_cast<int>(std::abs(it.row() - it.col())));
    return identity(static_cast<int>(m.rows()), kd);
}

Eigen::VectorXd CoefficientOrder::to_internal(const Eigen::VectorXd& canonical) const {
    Eigen::VectorXd out(canonical.size());
    for (Eigen::Index c = 0; c < canonical.size(); ++c) out[to_internal_[static_cast<std::size_t>(c)]] = canonical[c];
    return out;
}

Eigen::VectorXd CoefficientOrder::to_canonical(const Eigen::VectorXd& internal) const {
    Eigen::VectorXd out(internal.size());
    for (Eigen::Index c = 0; c < internal.size(); ++c) out[c] = internal[to_internal_[static_cast<std::size_t>(c)]];
    return out;
}

BandMatrix CoefficientOrder::band(const Eigen::SparseMatrix<double>& sym) const {
    BandMatrix out(size(), kd_);
    accumulate(sym, 1.0, out);
    return out;
}

void CoefficientOrder::accumulate(const Eigen::SparseMatrix<double>& sym, double weight, BandMatrix& out) const {
    if (sym.rows() != size() || sym.cols() != size() || out.size() != size())
        throw ValidationError("band conversion: dimension mismatch");
    for (int k = 0; k < sym.outerSize(); ++k) {
        for (Eigen::SparseMatrix<double>::InnerIterator it(sym, k); it; ++it) {
            const int i = to_internal_[static_cast<std::size_t>(it.row())];
            const int j = to_internal_[static_cast<std::size_t>(it.col())];
            if (i < j) continue;  // lower triangle carries the symmetric pair
            if (i - j > out.bandwidth()) {
                if (it.value() == 0.0) continue;
                throw ValidationError("band conversion: entry outside the band");
            }
            out.lower(i, j) += weight * it.value();
        }
    }
}

Eigen::SparseMatrix<double> CoefficientOrder::sparse(const BandMatrix& band) const {
    const int n = size();
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(static_cast<std::size_t>(n) * static_cast<std::size_t>(2 * band.bandwidth() + 1));
    for (int j = 0; j < n; ++j) {
        const int iend = std::min(n - 1, j + band.bandwidth());
        const int cj = to_canonical_[static_cast<std::size_t>(j)];
        for (int i = j; i <= iend; ++i) {
            const double v = band.lower(i, j);
            if (v == 0.0) continue;
            const int ci = to_canonical_[static_cast<std::size_t>(i)];
            trip.emplace_back(ci, cj, v);
            if (i != j) trip.emplace_back(cj, ci, v);
        }
    }
    Eigen::SparseMatrix<double> out(n, n);
    out.setFromTriplets(trip.begin(), trip.end());
    return out;
}

}  // namespace pspde
