#pragma once

// Hot loops of the assembly pipeline. Each kernel has an OpenMP version and a
// plain serial reference with identical semantics; tests compare the two and
// bench/ times them.

#include <span>
#include <vector>

#include <Eigen/Dense>

#include "pspde/basis.hpp"
#include "pspde/linalg.hpp"

namespace pspde::kernels {

/// Row-major storage of a design with exactly local_size() entries per row.
struct DesignRows {
    std::vector<int> cols;
    std::vector<double> values;
};

/// Expands per-dimension local values into the local_size() tensor entries
/// of one row, dimension 1 fastest.
template <class First, class Value>
void expand_tensor_row(const TensorBasis& basis, First first, Value value, std::span<int> cols,
                       std::span<double> vals) {
    const int p = basis.dimension();
    cols[0] = 0;
    vals[0] = 1.0;
    int filled = 1;
    for (int d = 0; d < p; ++d) {
        const int w = basis.dim(d).degree + 1;
        const int f = first(d);
        const int stride = basis.stride(d);
        // grow in place, last block first so sources are not overwritten
        for (int j = w - 1; j >= 0; --j) {
            const double b = value(d, j);
            const int off = (f + j) * stride;
            for (int k = 0; k < filled; ++k) {
                cols[static_cast<std::size_t>(j * filled + k)] = cols[static_cast<std::size_t>(k)] + off;
                vals[static_cast<std::size_t>(j * filled + k)] = vals[static_cast<std::size_t>(k)] * b;
            }
        }
        filled *= w;
    }
}

DesignRows design_rows(const TensorBasis& basis, const Eigen::MatrixXd& points, std::span<const int> deriv);
DesignRows design_rows_serial(const TensorBasis& basis, const Eigen::MatrixXd& points, std::span<const int> deriv);

/// B^T B accumulated into a band in the internal coefficient order.
BandMatrix crossprod_band(const SparseRowMatrix& B, const CoefficientOrder& order);
BandMatrix crossprod_band_serial(const SparseRowMatrix& B, const CoefficientOrder& order);

/// weight * (S_p (x) ... (x) S_1) added to `out`; with `symmetrize` the
/// transpose is added as well. Factors are given per dimension, dimension 1
/// first, and must match the basis sizes.
void kron_band_accumulate(const TensorBasis& basis, const CoefficientOrder& order,
                          const std::vector<Eigen::MatrixXd>& factors, double weight, bool symmetrize,
                          BandMatrix& out);
void kron_band_accumulate_serial(const TensorBasis& basis, const CoefficientOrder& order,
                                 const std::vector<Eigen::MatrixXd>& factors, double weight, bool symmetrize,
                                 BandMatrix& out);

/// s_p (x) ... (x) s_1 in canonical order.
Eigen::VectorXd kron_vector(const std::vector<Eigen::VectorXd>& factors);

/// Number of OpenMP threads the parallel kernels will use.
int max_threads();
void set_threads(int n);

}  // namespace pspde::kernels
