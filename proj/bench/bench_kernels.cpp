// Serial reference kernels against their OpenMP versions on the diffusion
// study shapes (2500 points, 28 x 13 cubic basis).

#include <benchmark/benchmark.h>

#include <random>

#include "pspde/kernels.hpp"
#include "pspde/pde.hpp"

using namespace pspde;

namespace {

TensorBasis study_basis(int scale) {
    return TensorBasis({equidistant_basis(-3.0, 3.0, 3, 28 * scale), equidistant_basis(0.0, 1.0, 3, 13 * scale)});
}

Eigen::MatrixXd points(int n) {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u1(-3.0, 3.0), u2(0.0, 1.0);
    Eigen::MatrixXd p(n, 2);
    for (int i = 0; i < n; ++i) {
        p(i, 0) = u1(rng);
        p(i, 1) = u2(rng);
    }
    return p;
}

template <bool Parallel>
void BM_DesignRows(benchmark::State& st) {
    const TensorBasis tb = study_basis(1);
    const Eigen::MatrixXd pts = points(static_cast<int>(st.range(0)));
    const int der[2] = {0, 0};
    kernels::set_threads(static_cast<int>(st.range(1)));
    for (auto _ : st) {
        auto rows = Parallel ? kernels::design_rows(tb, pts, der) : kernels::design_rows_serial(tb, pts, der);
        benchmark::DoNotOptimize(rows.values.data());
    }
    st.SetItemsProcessed(st.iterations() * st.range(0));
}

template <bool Parallel>
void BM_Crossprod(benchmark::State& st) {
    const TensorBasis tb = study_basis(1);
    const auto order = CoefficientOrder::for_basis(tb);
    const int der[2] = {0, 0};
    const DesignMatrix D = tensor_design(tb, points(static_cast<int>(st.range(0))), der);
    kernels::set_threads(static_cast<int>(st.range(1)));
    for (auto _ : st) {
        BandMatrix m = Parallel ? kernels::crossprod_band(D.B, order) : kernels::crossprod_band_serial(D.B, order);
        benchmark::DoNotOptimize(m);
    }
}

template <bool Parallel>
void BM_KronBand(benchmark::State& st) {
    const TensorBasis tb = study_basis(static_cast<int>(st.range(0)));
    const auto order = CoefficientOrder::for_basis(tb);
    const Eigen::MatrixXd S1 = weighted_gram_1d(tb.dim(0), 1, 1, {}, {}, 8);
    const Eigen::MatrixXd S2 = weighted_gram_1d(tb.dim(1), 0, 0, {}, {}, 8);
    kernels::set_threads(static_cast<int>(st.range(1)));
    for (auto _ : st) {
        BandMatrix out(order.size(), order.bandwidth());
        if (Parallel)
            kernels::kron_band_accumulate(tb, order, {S1, S2}, 1.0, true, out);
        else
            kernels::kron_band_accumulate_serial(tb, order, {S1, S2}, 1.0, true, out);
        benchmark::DoNotOptimize(out);
    }
}

void thread_args(benchmark::internal::Benchmark* b, std::initializer_list<int64_t> sizes) {
    const int hw = kernels::max_threads();
    for (int64_t s : sizes)
        for (int t = 1; t <= hw; t *= 2) b->Args({s, t});
}

}  // namespace

BENCHMARK(BM_DesignRows<false>)->Apply([](auto* b) { thread_args(b, {2500, 40000}); });
BENCHMARK(BM_DesignRows<true>)->Apply([](auto* b) { thread_args(b, {2500, 40000}); });
BENCHMARK(BM_Crossprod<false>)->Apply([](auto* b) { thread_args(b, {2500, 40000}); });
BENCHMARK(BM_Crossprod<true>)->Apply([](auto* b) { thread_args(b, {2500, 40000}); });
BENCHMARK(BM_KronBand<false>)->Apply([](auto* b) { thread_args(b, {1, 2}); });
BENCHMARK(BM_KronBand<true>)->Apply([](auto* b) { thread_args(b, {1, 2}); });

BENCHMARK_MAIN();
