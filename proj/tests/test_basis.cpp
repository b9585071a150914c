#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "pspde/basis.hpp"
#include "pspde/error.hpp"

using namespace pspde;

namespace {

// Cox-de Boor by direct recursion, used as an oracle.
double cox_de_boor(const std::vector<double>& t, int i, int k, double x) {
    if (k == 0) {
        if (t[i] <= x && x < t[i + 1]) return 1.0;
        return 0.0;
    }
    double v = 0.0;
    const double d1 = t[i + k] - t[i];
    const double d2 = t[i + k + 1] - t[i + 1];
    if (d1 > 0) v += (x - t[i]) / d1 * cox_de_boor(t, i, k - 1, x);
    if (d2 > 0) v += (t[i + k + 1] - x) / d2 * cox_de_boor(t, i + 1, k - 1, x);
    return v;
}

}  // namespace

TEST(BuildKnots, CountsBasisFunctions) {
    EXPECT_EQ(equidistant_basis(0.0, 1.0, 3, 29).size(), 29);
    EXPECT_EQ(equidistant_basis(0.0, 1.0, 3, 29).interior_knots.size(), 25u);
    EXPECT_EQ(build_knots(0.0, 1.0, 0, {}).size(), 1);
    EXPECT_EQ(equidistant_basis(-3.0, 3.0, 3, 28).interior_knots.size(), 24u);
    const auto s = build_knots(0.0, 1.0, 2, {0.5});
    ASSERT_EQ(s.knots.size(), 7u);
    EXPECT_EQ(s.knots.front(), 0.0);
    EXPECT_EQ(s.knots[2], 0.0);
    EXPECT_EQ(s.knots[3], 0.5);
    EXPECT_EQ(s.knots.back(), 1.0);
}

TEST(BuildKnots, RejectsBadKnotsByName) {
    try {
        build_knots(0.0, 1.0, 3, {0.2, 0.1});
        FAIL();
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("#1"), std::string::npos);
    }
    try {
        build_knots(0.0, 1.0, 3, {0.5, 1.0});
        FAIL();
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("#1"), std::string::npos);
    }
    EXPECT_THROW(build_knots(1.0, 1.0, 3, {}), ValidationError);
    EXPECT_THROW(build_knots(0.0, 1.0, 3, {0.0}), ValidationError);
}

TEST(EvalBasis, MatchesRecursiveOracle) {
    const auto s = build_knots(-1.0, 2.0, 3, {-0.4, 0.1, 0.3, 1.2});
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> u(-1.0, 2.0);
    std::vector<double> pts;
    for (int i = 0; i < 50; ++i) pts.push_back(u(rng));
    const Eigen::MatrixXd B = eval_basis_1d(s, pts, 0);
    for (std::size_t i = 0; i < pts.size(); ++i)
        for (int j = 0; j < s.size(); ++j) EXPECT_NEAR(B(static_cast<Eigen::Index>(i), j), cox_de_boor(s.knots, j, 3, pts[i]), 1e-14);
}

TEST(EvalBasis, PartitionOfUnityAndDerivativeSum) {
    const auto s = equidistant_basis(-3.0, 3.0, 3, 28);
    std::vector<double> pts;
    for (int i = 0; i <= 200; ++i) pts.push_back(-3.0 + 6.0 * i / 200.0);
    const Eigen::MatrixXd B0 = eval_basis_1d(s, pts, 0);
    const Eigen::MatrixXd B1 = eval_basis_1d(s, pts, 1);
    for (Eigen::Index i = 0; i < B0.rows(); ++i) {
        EXPECT_NEAR(B0.row(i).sum(), 1.0, 1e-12);
        EXPECT_NEAR(B1.row(i).sum(), 0.0, 1e-10);
        EXPECT_LE((B0.row(i).array() != 0.0).count(), 4);
    }
}

TEST(EvalBasis, HatMidpoint) {
    const auto s = build_knots(0.0, 3.0, 1, {1.0, 2.0});
    const double x = 1.5;
    const Eigen::MatrixXd B = eval_basis_1d(s, std::span<const double>(&x, 1), 0);
    EXPECT_DOUBLE_EQ(B(0, 1), 0.5);
    EXPECT_DOUBLE_EQ(B(0, 2), 0.5);
}

TEST(EvalBasis, RightEndpointIsLeftLimit) {
    const auto s = equidistant_basis(0.0, 1.0, 3, 8);
    const double x = 1.0;
    const Eigen::MatrixXd B = eval_basis_1d(s, std::span<const double>(&x, 1), 0);
    EXPECT_DOUBLE_EQ(B(0, 7), 1.0);
    EXPECT_DOUBLE_EQ(B.row(0).sum(), 1.0);
}

TEST(EvalBasis, DerivativeMatchesFiniteDifference) {
    const auto s = build_knots(0.0, 1.0, 3, {0.2, 0.45, 0.7});
    const double h = 1e-6;
    for (double x : {0.1, 0.33, 0.5, 0.61, 0.9}) {
        for (int k = 1; k <= 2; ++k) {
            const double xs[3] = {x - h, x, x + h};
            const Eigen::MatrixXd lo = eval_basis_1d(s, std::span<const double>(xs, 3), k - 1);
            const Eigen::MatrixXd d = eval_basis_1d(s, std::span<const double>(xs, 3), k);
            for (int j = 0; j < s.size(); ++j) {
                const double fd = (lo(2, j) - lo(0, j)) / (2 * h);
                EXPECT_NEAR(d(1, j), fd, 1e-6 * std::max(1.0, std::abs(fd)));
            }
        }
    }
}

TEST(EvalBasis, Errors) {
    const auto s = equidistant_basis(0.0, 1.0, 2, 5);
    const double out_pt = 1.5;
    const double in_pt = 0.5;
    EXPECT_THROW(eval_basis_1d(s, std::span<const double>(&out_pt, 1), 0), ValidationError);
    EXPECT_THROW(eval_basis_1d(s, std::span<const double>(&in_pt, 1), 3), ValidationError);
}

TEST(TensorDesign, GridShapeAndPartition) {
    TensorBasis tb({equidistant_basis(0.0, 1.0, 3, 6), equidistant_basis(-1.0, 1.0, 2, 5)});
    EXPECT_EQ(tb.size(), 30);
    EXPECT_EQ(tb.local_size(), 12);
    const GridAxes axes{{0.0, 0.4, 1.0}, {-1.0, -0.2, 0.3, 1.0}};
    const int zero[2] = {0, 0};
    const DesignMatrix D = tensor_design(tb, axes, zero);
    EXPECT_EQ(D.rows(), 12);
    EXPECT_EQ(D.cols(), 30);
    const Eigen::MatrixXd dense(D.B);
    for (Eigen::Index i = 0; i < dense.rows(); ++i) EXPECT_NEAR(dense.row(i).sum(), 1.0, 1e-12);
}

TEST(TensorDesign, GridIsKroneckerOfAxes) {
    const auto s1 = equidistant_basis(0.0, 1.0, 3, 6);
    const auto s2 = equidistant_basis(-1.0, 1.0, 2, 5);
    TensorBasis tb({s1, s2});
    const std::vector<double> a1{0.0, 0.25, 0.6, 1.0};
    const std::vector<double> a2{-0.9, 0.0, 0.7};
    const int der[2] = {1, 2};
    const Eigen::MatrixXd D(tensor_design(tb, GridAxes{a1, a2}, der).B);
    const Eigen::MatrixXd B1 = eval_basis_1d(s1, a1, 1);
    const Eigen::MatrixXd B2 = eval_basis_1d(s2, a2, 2);
    // rows: axis 1 fastest; columns: dimension 1 fastest
    for (Eigen::Index r2 = 0; r2 < B2.rows(); ++r2)
        for (Eigen::Index r1 = 0; r1 < B1.rows(); ++r1)
            for (Eigen::Index c2 = 0; c2 < B2.cols(); ++c2)
                for (Eigen::Index c1 = 0; c1 < B1.cols(); ++c1)
                    EXPECT_DOUBLE_EQ(D(r1 + B1.rows() * r2, c1 + B1.cols() * c2), B1(r1, c1) * B2(r2, c2));
}

TEST(TensorDesign, ScatterMatchesGrid) {
    TensorBasis tb({equidistant_basis(0.0, 1.0, 3, 7), equidistant_basis(0.0, 2.0, 3, 6)});
    const GridAxes axes{{0.0, 0.31, 0.77}, {0.1, 0.9, 1.5, 2.0}};
    const int der[2] = {1, 0};
    const Eigen::MatrixXd G(tensor_design(tb, axes, der).B);
    // scatter rows listed in reverse to exercise reordering
    Eigen::MatrixXd pts = grid_points(axes);
    Eigen::MatrixXd rev = pts.colwise().reverse();
    const Eigen::MatrixXd S(tensor_design(tb, rev, der).B);
    for (Eigen::Index i = 0; i < G.rows(); ++i)
        EXPECT_LE((G.row(i) - S.row(G.rows() - 1 - i)).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(TensorDesign, OneDimensionalReducesToEval) {
    const auto s = equidistant_basis(0.0, 1.0, 3, 9);
    TensorBasis tb({s});
    Eigen::MatrixXd pts(5, 1);
    pts << 0.0, 0.13, 0.5, 0.92, 1.0;
    const int der[1] = {1};
    const Eigen::MatrixXd D(tensor_design(tb, pts, der).B);
    std::vector<double> v(pts.data(), pts.data() + 5);
    EXPECT_LE((D - eval_basis_1d(s, v, 1)).cwiseAbs().maxCoeff(), 0.0);
}

TEST(TensorDesign, DimensionMismatch) {
    TensorBasis tb({equidistant_basis(0.0, 1.0, 3, 7), equidistant_basis(0.0, 2.0, 3, 6)});
    Eigen::MatrixXd pts(2, 3);
    pts.setZero();
    const int der[2] = {0, 0};
    EXPECT_THROW(tensor_design(tb, pts, der), ValidationError);
    Eigen::MatrixXd pts2 = Eigen::MatrixXd::Zero(2, 2);
    const int der3[3] = {0, 0, 0};
    EXPECT_THROW(tensor_design(tb, pts2, der3), ValidationError);
}
