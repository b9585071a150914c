#include "pspde/kernels.hpp"

#include <algorithm>
#include <array>
#include <string>

#include <omp.h>

#include "pspde/error.hpp"

namespace pspde::kernels {

namespace {

constexpr int kMaxLocal = 16;

void fill_row(const TensorBasis& basis, const Eigen::MatrixXd& points, Eigen::Index r, std::span<const int> deriv,
              int* cols, double* vals) {
    const int p = basis.dimension();
    std::array<int, 8> first{};
    std::array<std::array<double, kMaxLocal>, 8> local{};
    for (int d = 0; d < p; ++d)
        first[static_cast<std::size_t>(d)] =
            eval_local(basis.dim(d), points(r, d), deriv[static_cast<std::size_t>(d)], local[static_cast<std::size_t>(d)]);
    const auto k = static_cast<std::size_t>(basis.local_size());
    expand_tensor_row(
        basis, [&](int d) { return first[static_cast<std::size_t>(d)]; },
        [&](int d, int j) { return local[static_cast<std::size_t>(d)][static_cast<std::size_t>(j)]; },
        std::span<int>(cols, k), std::span<double>(vals, k));
}

void check_dimension(const TensorBasis& basis) {
    if (basis.dimension() > 8) throw ValidationError("at most 8 dimensions are supported");
}

// Lower-triangle contribution of one design row, internal order.
inline void row_outer(const SparseRowMatrix& B, Eigen::Index r, const CoefficientOrder& order, BandMatrix& out,
                      std::vector<int>& idx, std::vector<double>& val) {
    idx.clear();
    val.clear();
    for (SparseRowMatrix::InnerIterator it(B, r); it; ++it) {
        idx.push_back(order.internal(static_cast<int>(it.col())));
        val.push_back(it.value());
    }
    const std::size_t k = idx.size();
    for (std::size_t a = 0; a < k; ++a) {
        for (std::size_t b = 0; b < k; ++b) {
            if (idx[a] < idx[b]) continue;
            out.lower(idx[a], idx[b]) += val[a] * val[b];
        }
    }
}

void check_factors(const TensorBasis& basis, const std::vector<Eigen::MatrixXd>& factors) {
    if (static_cast<int>(factors.size()) != basis.dimension())
        throw ValidationError("Kronecker factor count does not match the basis dimension");
    for (int d = 0; d < basis.dimension(); ++d) {
        const auto& f = factors[static_cast<std::size_t>(d)];
        if (f.rows() != basis.dim(d).size() || f.cols() != basis.dim(d).size())
            throw ValidationError("Kronecker factor " + std::to_string(d + 1) + " has the wrong size");
    }
}

// Entries of column j (internal) of the Kronecker product inside the band.
template <class Sink>
void kron_column(const TensorBasis& basis, const CoefficientOrder& order, const std::vector<Eigen::MatrixXd>& factors,
                 bool symmetrize, int j, Sink sink) {
    const int p = basis.dimension();
    std::array<int, 8> cj{};
    std::array<int, 8> delta{};
    std::array<int, 8> deg{};
    int rem = order.canonical(j);
    for (int d = 0; d < p; ++d) {
        const int m = basis.dim(d).size();
        cj[static_cast<std::size_t>(d)] = rem % m;
        rem /= m;
        deg[static_cast<std::size_t>(d)] = basis.dim(d).degree;
        delta[static_cast<std::size_t>(d)] = -deg[static_cast<std::size_t>(d)];
    }
    while (true) {
        bool inside = true;
        int ci = 0;
        double a = 1.0;
        double at = 1.0;
        for (int d = 0; d < p && inside; ++d) {
            const auto du = static_cast<std::size_t>(d);
            const int id = cj[du] + delta[du];
            if (id < 0 || id >= basis.dim(d).size()) {
                inside = false;
                break;
            }
            ci += id * basis.stride(d);
            a *= factors[du](id, cj[du]);
            if (symmetrize) at *= factors[du](cj[du], id);
        }
        if (inside) {
            const int i = order.internal(ci);
            if (i >= j) sink(i, symmetrize ? a + at : a);
        }
        int d = 0;
        for (; d < p; ++d) {
            const auto du = static_cast<std::size_t>(d);
            if (++delta[du] <= deg[du]) break;
            delta[du] = -deg[du];
        }
        if (d == p) break;
    }
}

}  // namespace

DesignRows design_rows(const TensorBasis& basis, const Eigen::MatrixXd& points, std::span<const int> deriv) {
    check_dimension(basis);
    const Eigen::Index n = points.rows();
    const int k = basis.local_size();
    DesignRows rows;
    rows.cols.resize(static_cast<std::size_t>(n * k));
    rows.values.resize(static_cast<std::size_t>(n * k));
    // exceptions cannot cross the parallel region
    std::vector<std::string> errors(static_cast<std::size_t>(max_threads()));
#pragma omp parallel for schedule(static)
    for (Eigen::Index r = 0; r < n; ++r) {
        try {
            fill_row(basis, points, r, deriv, rows.cols.data() + r * k, rows.values.data() + r * k);
        } catch (const std::exception& e) {
            errors[static_cast<std::size_t>(omp_get_thread_num())] = e.what();
        }
    }
    for (const auto& e : errors)
        if (!e.empty()) throw ValidationError(e);
    return rows;
}

DesignRows design_rows_serial(const TensorBasis& basis, const Eigen::MatrixXd& points, std::span<const int> deriv) {
    check_dimension(basis);
    const Eigen::Index n = points.rows();
    const int k = basis.local_size();
    DesignRows rows;
    rows.cols.resize(static_cast<std::size_t>(n * k));
    rows.values.resize(static_cast<std::size_t>(n * k));
    for (Eigen::Index r = 0; r < n; ++r) fill_row(basis, points, r, deriv, rows.cols.data() + r * k, rows.values.data() + r * k);
    return rows;
}

BandMatrix crossprod_band(const SparseRowMatrix& B, const CoefficientOrder& order) {
    const int n = order.size();
    const int nt = max_threads();
    std::vector<BandMatrix> partial(static_cast<std::size_t>(nt), BandMatrix(n, order.bandwidth()));
#pragma omp parallel
    {
        auto& mine = partial[static_cast<std::size_t>(omp_get_thread_num())];
        std::vector<int> idx;
        std::vector<double> val;
#pragma omp for schedule(static)
        for (Eigen::Index r = 0; r < B.rows(); ++r) row_outer(B, r, order, mine, idx, val);
    }
    // fixed-order reduction keeps results independent of scheduling
    BandMatrix out = std::move(partial[0]);
    for (std::size_t t = 1; t < partial.size(); ++t) out.axpy(1.0, partial[t]);
    return out;
}

BandMatrix crossprod_band_serial(const SparseRowMatrix& B, const CoefficientOrder& order) {
    BandMatrix out(order.size(), order.bandwidth());
    std::vector<int> idx;
    std::vector<double> val;
    for (Eigen::Index r = 0; r < B.rows(); ++r) row_outer(B, r, order, out, idx, val);
    return out;
}

void kron_band_accumulate(const TensorBasis& basis, const CoefficientOrder& order,
                          const std::vector<Eigen::MatrixXd>& factors, double weight, bool symmetrize,
                          BandMatrix& out) {
    check_dimension(basis);
    check_factors(basis, factors);
    const int n = order.size();
    // each column is owned by one thread
#pragma omp parallel for schedule(static)
    for (int j = 0; j < n; ++j) {
        kron_column(basis, order, factors, symmetrize, j,
                    [&](int i, double v) { out.lower(i, j) += weight * v; });
    }
}

void kron_band_accumulate_serial(const TensorBasis& basis, const CoefficientOrder& order,
                                 const std::vector<Eigen::MatrixXd>& factors, double weight, bool symmetrize,
                                 BandMatrix& out) {
    check_dimension(basis);
    check_factors(basis, factors);
    for (int j = 0; j < order.size(); ++j) {
        kron_column(basis, order, factors, symmetrize, j,
                    [&](int i, double v) { out.lower(i, j) += weight * v; });
    }
}

Eigen::VectorXd kron_vector(const std::vector<Eigen::VectorXd>& factors) {
    Eigen::VectorXd out = Eigen::VectorXd::Ones(1);
    for (const auto& f : factors) {
        Eigen::VectorXd next(out.size() * f.size());
        for (Eigen::Index j = 0; j < f.size(); ++j) next.segment(j * out.size(), out.size()) = f[j] * out;
        out.swap(next);
    }
    return out;
}

int max_threads() { return omp_get_max_threads(); }

void set_threads(int n) {
    if (n >= 1) omp_set_num_threads(n);
}

}  // namespace pspde::kernels
