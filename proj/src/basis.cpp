#include "pspde/basis.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <sstream>

#include "pspde/error.hpp"
#include "pspde/kernels.hpp"

namespace pspde {

namespace {

constexpr int kMaxDegree = 15;

double domain_tol(const BasisSpec1D& s) { return 1e-12 * (s.hi - s.lo); }

// Nonzero basis functions and their derivatives up to order n at x in span
// `span` (de Boor / Piegl-Tiller). ders[k][j] is the k-th derivative of basis
// function span - degree + j.
void ders_basis(const BasisSpec1D& s, int span, double x, int n,
                std::array<std::array<double, kMaxDegree + 1>, kMaxDegree + 1>& ders) {
    const int p = s.degree;
    const auto& u = s.knots;
    std::array<std::array<double, kMaxDegree + 1>, kMaxDegree + 1> ndu{};
    std::array<double, kMaxDegree + 1> left{};
    std::array<double, kMaxDegree + 1> right{};
    ndu[0][0] = 1.0;
    for (int j = 1; j <= p; ++j) {
        left[j] = x - u[span + 1 - j];
        right[j] = u[span + j] - x;
        double saved = 0.0;
        for (int r = 0; r < j; ++r) {
            ndu[j][r] = right[r + 1] + left[j - r];
            const double temp = ndu[r][j - 1] / ndu[j][r];
            ndu[r][j] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        ndu[j][j] = saved;
    }
    for (int j = 0; j <= p; ++j) ders[0][j] = ndu[j][p];

    std::array<std::array<double, kMaxDegree + 1>, 2> a{};
    for (int r = 0; r <= p; ++r) {
        int s1 = 0;
        int s2 = 1;
        a[0][0] = 1.0;
        for (int k = 1; k <= n; ++k) {
            double d = 0.0;
            const int rk = r - k;
            const int pk = p - k;
            if (r >= k) {
                a[s2][0] = a[s1][0] / ndu[pk + 1][rk];
                d = a[s2][0] * ndu[rk][pk];
            }
            const int j1 = (rk >= -1) ? 1 : -rk;
            const int j2 = (r - 1 <= pk) ? k - 1 : p - r;
            for (int j = j1; j <= j2; ++j) {
                a[s2][j] = (a[s1][j] - a[s1][j - 1]) / ndu[pk + 1][rk + j];
                d += a[s2][j] * ndu[rk + j][pk];
            }
            if (r <= pk) {
                a[s2][k] = -a[s1][k - 1] / ndu[pk + 1][r];
                d += a[s2][k] * ndu[r][pk];
            }
            ders[k][r] = d;
            std::swap(s1, s2);
        }
    }
    int f = p;
    for (int k = 1; k <= n; ++k) {
        for (int j = 0; j <= p; ++j) ders[k][j] *= f;
        f *= (p - k);
    }
}

}  // namespace

int BasisSpec1D::find_span(double x) const {
    const int n = size() - 1;
    if (x >= knots[static_cast<std::size_t>(n + 1)]) return n;  // left limit at hi
    if (x <= knots[static_cast<std::size_t>(degree)]) return degree;
    const auto first = knots.begin() + degree;
    const auto last = knots.begin() + n + 1;
    const auto it = std::upper_bound(first, last, x);
    return static_cast<int>(it - knots.begin()) - 1;
}

std::vector<double> BasisSpec1D::breakpoints() const {
    std::vector<double> b;
    b.reserve(interior_knots.size() + 2);
    b.push_back(lo);
    b.insert(b.end(), interior_knots.begin(), interior_knots.end());
    b.push_back(hi);
    return b;
}

BasisSpec1D build_knots(double lo, double hi, int degree, std::vector<double> interior_knots) {
    if (!(std::isfinite(lo) && std::isfinite(hi)) || !(lo < hi)) {
        std::ostringstream os;
        os << "basis domain [" << lo << ", " << hi << "] is empty or not finite";
        throw ValidationError(os.str());
    }
    if (degree < 0 || degree > kMaxDegree)
        throw ValidationError("basis degree " + std::to_string(degree) + " outside [0, 15]");
    for (std::size_t k = 0; k < interior_knots.size(); ++k) {
        const double t = interior_knots[k];
        if (!(t > lo && t < hi)) {
            std::ostringstream os;
            os << "interior knot #" << k << " (" << t << ") is not strictly inside (" << lo << ", " << hi << ")";
            throw ValidationError(os.str());
        }
        if (k > 0 && !(t > interior_knots[k - 1])) {
            std::ostringstream os;
            os << "interior knot #" << k << " (" << t << ") is not greater than knot #" << (k - 1) << " ("
               << interior_knots[k - 1] << ")";
            throw ValidationError(os.str());
        }
    }
    BasisSpec1D s;
    s.lo = lo;
    s.hi = hi;
    s.degree = degree;
    s.interior_knots = std::move(interior_knots);
    s.knots.assign(static_cast<std::size_t>(degree + 1), lo);
    s.knots.insert(s.knots.end(), s.interior_knots.begin(), s.interior_knots.end());
    s.knots.insert(s.knots.end(), static_cast<std::size_t>(degree + 1), hi);
    return s;
}

BasisSpec1D equidistant_basis(double lo, double hi, int degree, int n_basis) {
    const int n_interior = n_basis - degree - 1;
    if (n_interior < 0)
        throw ValidationError("a degree-" + std::to_string(degree) + " basis needs at least " +
                              std::to_string(degree + 1) + " functions, got " + std::to_string(n_basis));
    std::vector<double> interior(static_cast<std::size_t>(n_interior));
    for (int k = 0; k < n_interior; ++k) interior[static_cast<std::size_t>(k)] = lo + (hi - lo) * (k + 1) / (n_interior + 1);
    return build_knots(lo, hi, degree, std::move(interior));
}

int eval_local(const BasisSpec1D& spec, double x, int deriv, std::span<double> out) {
    if (deriv < 0 || deriv > spec.degree)
        throw ValidationError("derivative order " + std::to_string(deriv) + " exceeds basis degree " +
                              std::to_string(spec.degree));
    const double tol = domain_tol(spec);
    if (!(x >= spec.lo - tol && x <= spec.hi + tol)) {
        std::ostringstream os;
        os << "point " << x << " is outside the basis domain [" << spec.lo << ", " << spec.hi << "]";
        throw ValidationError(os.str());
    }
    x = std::clamp(x, spec.lo, spec.hi);
    const int span = spec.find_span(x);
    std::array<std::array<double, kMaxDegree + 1>, kMaxDegree + 1> ders{};
    ders_basis(spec, span, x, deriv, ders);
    for (int j = 0; j <= spec.degree; ++j) out[static_cast<std::size_t>(j)] = ders[deriv][j];
    return span - spec.degree;
}

int eval_local_in_span(const BasisSpec1D& spec, int span, double x, int deriv, std::span<double> out) {
    if (deriv < 0 || deriv > spec.degree)
        throw ValidationError("derivative order " + std::to_string(deriv) + " exceeds basis degree " +
                              std::to_string(spec.degree));
    if (span < spec.degree || span >= spec.size())
        throw ValidationError("knot span " + std::to_string(span) + " out of range");
    std::array<std::array<double, kMaxDegree + 1>, kMaxDegree + 1> ders{};
    ders_basis(spec, span, x, deriv, ders);
    for (int j = 0; j <= spec.degree; ++j) out[static_cast<std::size_t>(j)] = ders[deriv][j];
    return span - spec.degree;
}

Eigen::MatrixXd eval_basis_1d(const BasisSpec1D& spec, std::span<const double> points, int deriv) {
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(points.size()), spec.size());
    std::array<double, kMaxDegree + 1> local{};
    for (std::size_t i = 0; i < points.size(); ++i) {
        const int first = eval_local(spec, points[i], deriv, local);
        for (int j = 0; j <= spec.degree; ++j) out(static_cast<Eigen::Index>(i), first + j) = local[static_cast<std::size_t>(j)];
    }
    return out;
}

TensorBasis::TensorBasis(std::vector<BasisSpec1D> dims) : dims_(std::move(dims)) {
    if (dims_.empty()) throw ValidationError("tensor basis needs at least one dimension");
    strides_.resize(dims_.size());
    size_ = 1;
    local_size_ = 1;
    for (std::size_t d = 0; d < dims_.size(); ++d) {
        strides_[d] = size_;
        size_ *= dims_[d].size();
        local_size_ *= dims_[d].degree + 1;
    }
}

bool TensorBasis::contains(std::span<const double> x) const {
    if (static_cast<int>(x.size()) != dimension()) return false;
    for (int d = 0; d < dimension(); ++d) {
        const auto& s = dims_[static_cast<std::size_t>(d)];
        const double tol = domain_tol(s);
        if (!(x[static_cast<std::size_t>(d)] >= s.lo - tol && x[static_cast<std::size_t>(d)] <= s.hi + tol)) return false;
    }
    return true;
}

namespace {

void check_derivs(const TensorBasis& basis, std::span<const int> deriv_orders) {
    if (static_cast<int>(deriv_orders.size()) != basis.dimension())
        throw ValidationError("derivative order list has length " + std::to_string(deriv_orders.size()) +
                              ", basis has " + std::to_string(basis.dimension()) + " dimensions");
    for (int d = 0; d < basis.dimension(); ++d) {
        const int k = deriv_orders[static_cast<std::size_t>(d)];
        if (k < 0 || k > basis.dim(d).degree)
            throw ValidationError("derivative order " + std::to_string(k) + " in dimension " + std::to_string(d + 1) +
                                  " exceeds basis degree " + std::to_string(basis.dim(d).degree));
    }
}

DesignMatrix from_rows(const TensorBasis& basis, Eigen::Index n_rows, const kernels::DesignRows& rows,
                       std::span<const int> deriv_orders) {
    const int k = basis.local_size();
    std::vector<int> outer(static_cast<std::size_t>(n_rows) + 1);
    for (Eigen::Index i = 0; i <= n_rows; ++i) outer[static_cast<std::size_t>(i)] = static_cast<int>(i) * k;
    Eigen::Map<const SparseRowMatrix> view(n_rows, basis.size(), static_cast<Eigen::Index>(rows.cols.size()),
                                           outer.data(), rows.cols.data(), rows.values.data());
    DesignMatrix out;
    out.B = view;
    out.deriv_orders.assign(deriv_orders.begin(), deriv_orders.end());
    return out;
}

}  // namespace

DesignMatrix tensor_design(const TensorBasis& basis, const Eigen::MatrixXd& points, std::span<const int> deriv_orders) {
    if (points.cols() != basis.dimension())
        throw ValidationError("points have " + std::to_string(points.cols()) + " columns, basis has " +
                              std::to_string(basis.dimension()) + " dimensions");
    check_derivs(basis, deriv_orders);
    const kernels::DesignRows rows = kernels::design_rows(basis, points, deriv_orders);
    return from_rows(basis, points.rows(), rows, deriv_orders);
}

Eigen::MatrixXd grid_points(const GridAxes& axes) {
    Eigen::Index n = 1;
    for (const auto& a : axes) n *= static_cast<Eigen::Index>(a.size());
    Eigen::MatrixXd pts(n, static_cast<Eigen::Index>(axes.size()));
    for (Eigen::Index r = 0; r < n; ++r) {
        Eigen::Index rem = r;
        for (std::size_t d = 0; d < axes.size(); ++d) {
            const auto len = static_cast<Eigen::Index>(axes[d].size());
            pts(r, static_cast<Eigen::Index>(d)) = axes[d][static_cast<std::size_t>(rem % len)];
            rem /= len;
        }
    }
    return pts;
}

DesignMatrix tensor_design(const TensorBasis& basis, const GridAxes& axes, std::span<const int> deriv_orders) {
    if (static_cast<int>(axes.size()) != basis.dimension())
        throw ValidationError("grid has " + std::to_string(axes.size()) + " axes, basis has " +
                              std::to_string(basis.dimension()) + " dimensions");
    check_derivs(basis, deriv_orders);
    // Per-axis local evaluations, then the Kronecker row expansion.
    const int p = basis.dimension();
    std::vector<std::vector<int>> first(static_cast<std::size_t>(p));
    std::vector<std::vector<double>> vals(static_cast<std::size_t>(p));
    for (int d = 0; d < p; ++d) {
        const auto& spec = basis.dim(d);
        const int w = spec.degree + 1;
        const auto& ax = axes[static_cast<std::size_t>(d)];
        first[static_cast<std::size_t>(d)].resize(ax.size());
        vals[static_cast<std::size_t>(d)].resize(ax.size() * static_cast<std::size_t>(w));
        for (std::size_t i = 0; i < ax.size(); ++i)
            first[static_cast<std::size_t>(d)][i] = eval_local(
                spec, ax[i], deriv_orders[static_cast<std::size_t>(d)],
                std::span<double>(vals[static_cast<std::size_t>(d)].data() + i * static_cast<std::size_t>(w),
                                  static_cast<std::size_t>(w)));
    }
    Eigen::Index n_rows = 1;
    for (const auto& a : axes) n_rows *= static_cast<Eigen::Index>(a.size());
    const int k = basis.local_size();
    kernels::DesignRows rows;
    rows.cols.resize(static_cast<std::size_t>(n_rows * k));
    rows.values.resize(static_cast<std::size_t>(n_rows * k));
    std::vector<int> idx(static_cast<std::size_t>(p));
    for (Eigen::Index r = 0; r < n_rows; ++r) {
        Eigen::Index rem = r;
        for (int d = 0; d < p; ++d) {
            const auto len = static_cast<Eigen::Index>(axes[static_cast<std::size_t>(d)].size());
            idx[static_cast<std::size_t>(d)] = static_cast<int>(rem % len);
            rem /= len;
        }
        kernels::expand_tensor_row(
            basis,
            [&](int d) { return first[static_cast<std::size_t>(d)][static_cast<std::size_t>(idx[static_cast<std::size_t>(d)])]; },
            [&](int d, int j) {
                const int w = basis.dim(d).degree + 1;
                return vals[static_cast<std::size_t>(d)][static_cast<std::size_t>(idx[static_cast<std::size_t>(d)] * w + j)];
            },
            std::span<int>(rows.cols.data() + r * k, static_cast<std::size_t>(k)),
            std::span<double>(rows.values.data() + r * k, static_cast<std::size_t>(k)));
    }
    return from_rows(basis, n_rows, rows, deriv_orders);
}

}  // namespace pspde
