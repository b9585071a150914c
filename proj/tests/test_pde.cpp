#include <gtest/gtest.h>

#include <random>

#include "pspde/error.hpp"
#include "pspde/pde.hpp"

using namespace pspde;

namespace {

PdeSpec diffusion_pde() {
    PdeSpec pde;
    pde.p = 2;
    pde.theta_names = {"theta1", "theta2"};
    pde.terms.push_back({{1.0, {}}, {}, {1, 0}, "u_x1"});
    pde.terms.push_back({{1.0, {1}}, {}, {0, 1}, "theta1 u_x2"});
    pde.terms.push_back({{1.0, {0, 1}}, {}, {0, 0}, "theta2 u"});
    return pde;
}

// Gauss-Legendre nodes on [-1, 1] (Golub-Welsch).
void gauss_legendre(int n, std::vector<double>& x, std::vector<double>& w) {
    Eigen::MatrixXd J = Eigen::MatrixXd::Zero(n, n);
    for (int i = 1; i < n; ++i) J(i, i - 1) = J(i - 1, i) = i / std::sqrt(4.0 * i * i - 1.0);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(J);
    x.resize(static_cast<std::size_t>(n));
    w.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        x[static_cast<std::size_t>(i)] = es.eigenvalues()[i];
        w[static_cast<std::size_t>(i)] = 2.0 * es.eigenvectors()(0, i) * es.eigenvectors()(0, i);
    }
}

// Per-span Gauss-Legendre oracle for int a_i a_j B^(di) B^(dj)^T.
Eigen::MatrixXd gram_oracle(const BasisSpec1D& s, int di, int dj, const Polynomial& pi, const Polynomial& pj) {
    std::vector<double> gx, gw;
    gauss_legendre(12, gx, gw);
    const auto bp = s.breakpoints();
    Eigen::MatrixXd G = Eigen::MatrixXd::Zero(s.size(), s.size());
    for (std::size_t k = 0; k + 1 < bp.size(); ++k) {
        const double a = bp[k], b = bp[k + 1];
        for (std::size_t q = 0; q < gx.size(); ++q) {
            const double x = 0.5 * (a + b) + 0.5 * (b - a) * gx[q];
            const Eigen::MatrixXd Bi = eval_basis_1d(s, std::span<const double>(&x, 1), di);
            const Eigen::MatrixXd Bj = eval_basis_1d(s, std::span<const double>(&x, 1), dj);
            G += 0.5 * (b - a) * gw[q] * pi(x) * pj(x) * Bi.transpose() * Bj;
        }
    }
    return G;
}

}  // namespace

TEST(WeightedGram, HatDiagonalIsTwoThirds) {
    const auto s = build_knots(0.0, 5.0, 1, {1.0, 2.0, 3.0, 4.0});
    const Eigen::MatrixXd G = weighted_gram_1d(s, 0, 0, {}, {}, 32);
    for (int i = 1; i < 5; ++i) EXPECT_NEAR(G(i, i), 2.0 / 3.0, 1e-14);
    EXPECT_NEAR(G(0, 0), 1.0 / 3.0, 1e-14);
    EXPECT_NEAR(G(1, 2), 1.0 / 6.0, 1e-14);
}

TEST(WeightedGram, ZeroPolyAndSymmetry) {
    const auto s = equidistant_basis(0.0, 2.0, 3, 9);
    EXPECT_EQ(weighted_gram_1d(s, 1, 0, Polynomial{{0.0}}, {}, 32).cwiseAbs().maxCoeff(), 0.0);
    const Polynomial a{{0.5, 1.0, -0.3}};
    const Eigen::MatrixXd G = weighted_gram_1d(s, 2, 2, a, a, 32);
    EXPECT_LE((G - G.transpose()).cwiseAbs().maxCoeff(), 1e-14 * G.cwiseAbs().maxCoeff());
    EXPECT_THROW(weighted_gram_1d(s, 0, 0, {}, {}, 1), ValidationError);
    EXPECT_THROW(weighted_gram_1d(s, 4, 0, {}, {}, 32), ValidationError);
}

TEST(WeightedGram, MatchesGaussLegendreOracle) {
    const auto s = build_knots(-1.0, 2.0, 3, {-0.5, 0.2, 0.25, 1.1});
    const Polynomial a{{1.0, 0.5}};
    const Polynomial b{{0.0, 0.0, 1.0}};
    for (int di = 0; di <= 3; ++di)
        for (int dj = 0; dj <= 3; ++dj) {
            const Eigen::MatrixXd G = weighted_gram_1d(s, di, dj, a, b, 32);
            const Eigen::MatrixXd O = gram_oracle(s, di, dj, a, b);
            EXPECT_LE((G - O).cwiseAbs().maxCoeff(), 1e-11 * O.cwiseAbs().maxCoeff()) << di << "," << dj;
        }
}

TEST(WeightedGram, PlainTrapezoidIsSecondOrder) {
    const auto s = equidistant_basis(0.0, 1.0, 3, 8);
    QuadratureRule r1{QuadratureKind::trapezoid, 8, 400};
    QuadratureRule r2{QuadratureKind::trapezoid, 16, 400};
    const Eigen::MatrixXd O = gram_oracle(s, 1, 1, {}, {});
    const double e1 = (weighted_gram_1d(s, 1, 1, {}, {}, r1) - O).cwiseAbs().maxCoeff();
    const double e2 = (weighted_gram_1d(s, 1, 1, {}, {}, r2) - O).cwiseAbs().maxCoeff();
    EXPECT_NEAR(e1 / e2, 4.0, 0.2);
}

TEST(AssemblePenalty, HomogeneousHasNoLinearPart) {
    const TensorBasis tb({equidistant_basis(-3, 3, 3, 10), equidistant_basis(0, 1, 3, 8)});
    const std::vector<double> theta{0.5, 1.5};
    const PenaltyQuadratic q = assemble_penalty(diffusion_pde(), tb, theta);
    EXPECT_EQ(q.r.cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(q.l, 0.0);
    EXPECT_GT(q.R.norm(), 0.0);
    Eigen::VectorXd zero = Eigen::VectorXd::Zero(tb.size());
    EXPECT_EQ(penalty_value(q, zero), 0.0);
    EXPECT_THROW(penalty_value(q, Eigen::VectorXd::Zero(3)), ValidationError);
}

TEST(AssemblePenalty, IdentityTermGivesTensorGram) {
    PdeSpec pde;
    pde.p = 2;
    pde.terms.push_back({{1.0, {}}, {}, {0, 0}, "u"});
    const auto s1 = equidistant_basis(0, 1, 2, 5);
    const auto s2 = equidistant_basis(0, 2, 3, 6);
    const TensorBasis tb({s1, s2});
    const PenaltyQuadratic q = assemble_penalty(pde, tb, std::vector<double>{});
    const Eigen::MatrixXd G1 = weighted_gram_1d(s1, 0, 0, {}, {}, 32);
    const Eigen::MatrixXd G2 = weighted_gram_1d(s2, 0, 0, {}, {}, 32);
    const Eigen::MatrixXd R(q.R);
    for (int a = 0; a < 6; ++a)
        for (int b = 0; b < 6; ++b)
            for (int i = 0; i < 5; ++i)
                for (int j = 0; j < 5; ++j) EXPECT_NEAR(R(i + 5 * a, j + 5 * b), G2(a, b) * G1(i, j), 1e-12);
}

TEST(AssemblePenalty, MatchesDenseQuadratureOracle) {
    // p = 2, M <= 8 per dimension, forcing and polynomial coefficients included
    PdeSpec pde;
    pde.p = 2;
    pde.theta_names = {"a", "b"};
    pde.terms.push_back({{1.0, {}}, {}, {2, 0}, "u_xx"});
    pde.terms.push_back({{-0.7, {1}}, {Polynomial{{1.0, 2.0}}, Polynomial{}}, {0, 1}, ""});
    pde.terms.push_back({{1.0, {0, 2}}, {Polynomial{}, Polynomial{{0.0, 1.0}}}, {0, 0}, ""});
    pde.forcing = ForcingTerm{{2.0, {1}}, {Polynomial{{0.0, 1.0}}, Polynomial{{1.0, 0.0, -1.0}}}};
    const auto s1 = build_knots(0.0, 1.0, 3, {0.3, 0.6});
    const auto s2 = build_knots(-1.0, 1.0, 2, {-0.2, 0.5});
    const TensorBasis tb({s1, s2});
    const std::vector<double> theta{1.3, -0.4};
    const PenaltyQuadratic q = assemble_penalty(pde, tb, theta);

    // oracle: tensor Gauss-Legendre on each cell of the knot grid
    std::vector<double> gx, gw;
    gauss_legendre(10, gx, gw);
    const auto b1 = s1.breakpoints();
    const auto b2 = s2.breakpoints();
    std::mt19937_64 rng(11);
    std::normal_distribution<double> z;
    for (int trial = 0; trial < 20; ++trial) {
        Eigen::VectorXd c(tb.size());
        for (auto& v : c) v = z(rng);
        double oracle = 0.0;
        for (std::size_t a = 0; a + 1 < b1.size(); ++a)
            for (std::size_t b = 0; b + 1 < b2.size(); ++b)
                for (std::size_t i = 0; i < gx.size(); ++i)
                    for (std::size_t j = 0; j < gx.size(); ++j) {
                        const double x1 = 0.5 * (b1[a] + b1[a + 1]) + 0.5 * (b1[a + 1] - b1[a]) * gx[i];
                        const double x2 = 0.5 * (b2[b] + b2[b + 1]) + 0.5 * (b2[b + 1] - b2[b]) * gx[j];
                        const double w = 0.25 * (b1[a + 1] - b1[a]) * (b2[b + 1] - b2[b]) * gw[i] * gw[j];
                        Eigen::MatrixXd pt(1, 2);
                        pt << x1, x2;
                        const double x[2] = {x1, x2};
                        const double F = pde.residual(x, theta, [&](std::span<const int> d) {
                            return (Eigen::MatrixXd(tensor_design(tb, pt, d).B) * c)(0);
                        });
                        oracle += w * F * F;
                    }
        EXPECT_NEAR(penalty_value(q, c), oracle, 1e-6 * oracle);
    }
}

TEST(AssemblePenalty, ThetaPowerScalesSelfBlock) {
    PdeSpec pde;
    pde.p = 2;
    pde.theta_names = {"t"};
    pde.terms.push_back({{1.0, {1}}, {}, {0, 1}, ""});
    const TensorBasis tb({equidistant_basis(0, 1, 3, 6), equidistant_basis(0, 1, 3, 5)});
    const PenaltyQuadratic a = assemble_penalty(pde, tb, std::vector<double>{0.8});
    const PenaltyQuadratic b = assemble_penalty(pde, tb, std::vector<double>{1.6});
    EXPECT_LE((Eigen::MatrixXd(b.R) - 4.0 * Eigen::MatrixXd(a.R)).cwiseAbs().maxCoeff(),
              1e-14 * Eigen::MatrixXd(b.R).cwiseAbs().maxCoeff());
}

TEST(AssemblePenalty, QuadratureConvergence) {
    const TensorBasis tb({equidistant_basis(-3, 3, 3, 10), equidistant_basis(0, 1, 3, 8)});
    const std::vector<double> theta{0.5, 1.5};
    const Eigen::MatrixXd R32(assemble_penalty(diffusion_pde(), tb, theta, 32).R);
    const Eigen::MatrixXd R64(assemble_penalty(diffusion_pde(), tb, theta, 64).R);
    for (Eigen::Index i = 0; i < R32.rows(); ++i)
        for (Eigen::Index j = 0; j < R32.cols(); ++j)
            EXPECT_LE(std::abs(R32(i, j) - R64(i, j)), 1e-8 * std::abs(R64(i, j)) + 1e-300);
}

TEST(AssemblePenalty, SymmetricPositiveSemidefinite) {
    const TensorBasis tb({equidistant_basis(-3, 3, 3, 8), equidistant_basis(0, 1, 3, 6)});
    const std::vector<double> theta{0.5, 1.5};
    const Eigen::MatrixXd R(assemble_penalty(diffusion_pde(), tb, theta).R);
    const double n = R.cwiseAbs().maxCoeff();
    EXPECT_LE((R - R.transpose()).cwiseAbs().maxCoeff(), 1e-12 * n);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(R);
    EXPECT_GE(es.eigenvalues().minCoeff(), -1e-8 * es.eigenvalues().cwiseAbs().maxCoeff());
}

TEST(AssemblePenalty, DerivativeBeyondDegreeNamesTerm) {
    PdeSpec pde;
    pde.p = 2;
    pde.terms.push_back({{1.0, {}}, {}, {0, 3}, "u_ttt"});
    const TensorBasis tb({equidistant_basis(0, 1, 3, 6), equidistant_basis(0, 1, 2, 5)});
    try {
        assemble_penalty(pde, tb, std::vector<double>{});
        FAIL();
    } catch (const ValidationError& e) {
        const std::string m = e.what();
        EXPECT_NE(m.find("u_ttt"), std::string::npos);
        EXPECT_NE(m.find("dimension 2"), std::string::npos);
    }
}

TEST(Constraints, InitialConditionAndEdges) {
    const TensorBasis tb({equidistant_basis(-3, 3, 3, 28), equidistant_basis(0, 1, 3, 13)});
    Condition init;
    init.points = face_knot_points(tb, 1, false);
    init.deriv_orders = {0, 0};
    init.target = [](std::span<const double> x) { return 1.0 / (1.0 + x[0] * x[0]); };
    const ConstraintSet cs = build_constraints({init}, tb);
    EXPECT_EQ(cs.rows(), 26);
    Condition at_zero = init;
    at_zero.points = Eigen::MatrixXd::Zero(1, 2);
    EXPECT_DOUBLE_EQ(build_constraints({at_zero}, tb).v[0], 1.0);
    EXPECT_TRUE(redundant_rows(cs).empty());

    Condition interior;
    interior.points = Eigen::MatrixXd(1, 2);
    interior.points << 0.3, 0.4;
    interior.deriv_orders = {0, 0};
    interior.target = [](std::span<const double>) { return 0.0; };
    const ConstraintSet ci = build_constraints({interior}, tb);
    EXPECT_NEAR(Eigen::MatrixXd(ci.H).row(0).sum(), 1.0, 1e-12);

    Condition empty = interior;
    empty.points = Eigen::MatrixXd(0, 2);
    EXPECT_THROW(build_constraints({empty}, tb), ValidationError);
}

TEST(Constraints, DuplicateRowsAreReported) {
    const TensorBasis tb({equidistant_basis(0, 1, 3, 6), equidistant_basis(0, 1, 3, 6)});
    Condition a;
    a.points = face_knot_points(tb, 1, false);
    a.deriv_orders = {0, 0};
    a.target = [](std::span<const double>) { return 0.0; };
    Condition b = a;
    b.points = face_knot_points(tb, 0, false);
    // both faces contain the corner (0, 0)
    const ConstraintSet cs = build_constraints({a, b}, tb);
    const auto red = redundant_rows(cs);
    ASSERT_EQ(red.size(), 1u);
    EXPECT_EQ(red[0], static_cast<int>(a.points.rows()));
    Condition c = a;
    c.points = face_knot_points(tb, 1, false, false);
    EXPECT_EQ(c.points.rows(), a.points.rows() - 2);
}
