#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "nesc/dense.hpp"
#include "nesc/quadrature.hpp"

using namespace nesc;

TEST(GaussLegendre, OnePoint) {
  auto q = gauss_legendre(1);
  ASSERT_EQ(q.size(), 1u);
  EXPECT_NEAR(q.nodes[0], 0.0, 1e-16);
  EXPECT_NEAR(q.weights[0], 2.0, 1e-15);
}

TEST(GaussLegendre, TwoPointQuadratic) {
  auto q = gauss_legendre(2);
  EXPECT_NEAR(q.integrate([](double x) { return x * x; }), 2.0 / 3.0, 1e-15);
}

TEST(GaussLegendre, ExpAgainstAdaptive) {
  auto q = gauss_legendre(16);
  double ref = adaptive_quad([](double x) { return std::exp(x); }, -1, 1, 1e-15);
  EXPECT_NEAR(q.integrate([](double x) { return std::exp(x); }), ref, 1e-14);
  EXPECT_NEAR(ref, std::exp(1.0) - std::exp(-1.0), 1e-14);
}

TEST(GaussLegendre, ExactnessUpTo64) {
  for (int n : {1, 2, 3, 7, 16, 20, 33, 64}) {
    auto q = gauss_legendre(n);
    for (std::size_t i = 1; i < q.size(); ++i) EXPECT_LT(q.nodes[i - 1], q.nodes[i]);
    for (int d = 0; d <= 2 * n - 1; ++d) {
      double exact = (d % 2) ? 0.0 : 2.0 / (d + 1);
      double v = q.integrate([d](double x) { return std::pow(x, d); });
      EXPECT_NEAR(v, exact, 1e-13) << "n=" << n << " d=" << d;
    }
  }
}

TEST(GaussLegendre, RejectsZero) { EXPECT_THROW(gauss_legendre(0), std::invalid_argument); }

TEST(GaussJacobi, WeightSum) {
  const double s = 2.0 * std::sqrt(2.0);
  EXPECT_NEAR(gauss_jacobi(1, -0.5, 0).integrate([](double) { return 1.0; }), s, 1e-14);
  EXPECT_NEAR(gauss_jacobi(4, -0.5, 0).integrate([](double) { return 1.0; }), s, 1e-14);
}

TEST(GaussJacobi, CubicAgainstAdaptive) {
  auto q = gauss_jacobi(8, -0.5, 0);
  double ref = adaptive_quad([](double x) { return x * x * x / std::sqrt(1 - x); }, -1, 1, 1e-14);
  EXPECT_NEAR(q.integrate([](double x) { return x * x * x; }), ref, 1e-12);
}

TEST(GaussJacobi, ExactnessUpTo64) {
  // moments of (1-x)^{-1/2}: substitute u = 1-x and expand (1-u)^d
  auto moment = [](int d) {
    long double s = 0, binom = 1;
    for (int j = 0; j <= d; ++j) {
      s += binom * ((j % 2) ? -1.0L : 1.0L) * std::pow(2.0L, j + 0.5L) / (j + 0.5L);
      binom = binom * (d - j) / (j + 1);
    }
    return static_cast<double>(s);
  };
  for (int n : {1, 3, 10, 20, 40, 64}) {
    auto q = gauss_jacobi(n, -0.5, 0);
    for (std::size_t i = 1; i < q.size(); ++i) EXPECT_LT(q.nodes[i - 1], q.nodes[i]);
    for (double w : q.weights) EXPECT_GT(w, 0);
    for (int d = 0; d <= std::min(2 * n - 1, 12); ++d) {
      double v = q.integrate([d](double x) { return std::pow(x, d); });
      EXPECT_NEAR(v, moment(d), 1e-13 * (1 + std::abs(moment(d)))) << "n=" << n << " d=" << d;
    }
  }
}

TEST(GaussJacobi, RejectsBadExponent) {
  EXPECT_THROW(gauss_jacobi(4, -1.0, 0), std::invalid_argument);
  EXPECT_THROW(gauss_jacobi(4, 0, -1.5), std::invalid_argument);
}

TEST(AdaptiveQuad, Constant) { EXPECT_NEAR(adaptive_quad([](double) { return 1.0; }, 0, 1, 1e-10), 1.0, 1e-14); }

TEST(AdaptiveQuad, LogSingularity) {
  EXPECT_NEAR(adaptive_quad([](double x) { return std::log(1 / x); }, 0, 1, 1e-10), 1.0, 1e-10);
}

TEST(AdaptiveQuad, InverseSqrtEndpoint) {
  EXPECT_NEAR(adaptive_quad([](double x) { return 1 / std::sqrt(1 - x); }, -1, 1, 1e-10), 2 * std::sqrt(2.0),
              1e-9);
}

TEST(AdaptiveQuad, NonConvergenceIsDistinct) {
  auto r = adaptive_quad_result([](double x) { return 1.0 / x; }, 0, 1, 1e-12, 20);
  EXPECT_FALSE(r.converged);
  EXPECT_THROW(adaptive_quad([](double x) { return 1.0 / x; }, 0, 1, 1e-12), QuadratureNotConverged);
}

TEST(GradedNodes, IntegratesLogSingularity) {
  NodeList nl;
  graded_nodes(0.0, 1.0, 0.3, 0.25, 1e-14, nl);
  double s = 0;
  for (std::size_t i = 0; i < nl.x.size(); ++i) s += nl.w[i] * std::log(std::abs(nl.x[i] - 0.3));
  double exact = 0.3 * std::log(0.3) - 0.3 + 0.7 * std::log(0.7) - 0.7;
  EXPECT_NEAR(s, exact, 1e-13);
}

TEST(SolveDense, Identity) {
  VectorXd b = VectorXd::LinSpaced(5, 1, 5);
  EXPECT_LT((solve_dense(MatrixXd::Identity(5, 5), b) - b).norm(), 1e-15);
}

TEST(SolveDense, Diagonal) {
  MatrixXd A = VectorXd::LinSpaced(4, 1, 4).asDiagonal();
  VectorXd x = solve_dense(A, VectorXd::Ones(4));
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(x(i), 1.0 / (i + 1), 1e-15);
}

TEST(SolveDense, RandomResidual) {
  std::mt19937 rng(3);
  std::normal_distribution<double> nd;
  MatrixXd A(50, 50);
  for (int i = 0; i < 50; ++i)
    for (int j = 0; j < 50; ++j) A(i, j) = nd(rng);
  A += 10 * MatrixXd::Identity(50, 50);
  VectorXd b(50);
  for (int i = 0; i < 50; ++i) b(i) = nd(rng);
  LUFactor lu(A);
  VectorXd x = lu.solve(b);
  EXPECT_LT((A * x - b).norm() / (A.norm() * x.norm()), 1e-14);
  VectorXd x2 = lu.solve(2 * b);
  EXPECT_LT((x2 - 2 * x).norm(), 1e-13 * x.norm());
}

TEST(SolveDense, SingularReportsPivot) {
  MatrixXd A = MatrixXd::Identity(4, 4);
  A(2, 2) = 0;
  try {
    LUFactor lu(A);
    FAIL();
  } catch (const SingularMatrixError& e) {
    EXPECT_EQ(e.pivot, 2);
  }
}

TEST(Gmres, IdentityOneIteration) {
  VectorXd b = VectorXd::Random(30);
  auto r = gmres([](const VectorXd& x, VectorXd& y) { y = x; }, b, 1e-12, 10);
  EXPECT_TRUE(r.converged);
  EXPECT_EQ(r.iterations, 1);
  EXPECT_LT((r.x - b).norm(), 1e-14 * b.norm());
}

TEST(Gmres, DistinctEigenvalues) {
  VectorXd d(40);
  for (int i = 0; i < 40; ++i) d(i) = 1.0 + (i % 4);
  VectorXd b = VectorXd::Random(40);
  auto r = gmres([&](const VectorXd& x, VectorXd& y) { y = d.cwiseProduct(x); }, b, 1e-12, 40);
  EXPECT_TRUE(r.converged);
  EXPECT_LE(r.iterations, 4);
}

TEST(Gmres, MatchesDenseSolveAndMonotone) {
  std::mt19937 rng(11);
  std::uniform_real_distribution<double> ud(-1, 1);
  MatrixXd A = MatrixXd::Identity(100, 100);
  for (int i = 0; i < 100; ++i)
    for (int j = 0; j < 100; ++j) A(i, j) += 0.02 * ud(rng);
  VectorXd b(100);
  for (int i = 0; i < 100; ++i) b(i) = ud(rng);
  auto r = gmres([&](const VectorXd& x, VectorXd& y) { y = A * x; }, b, 1e-13, 100);
  ASSERT_TRUE(r.converged);
  EXPECT_LT((r.x - solve_dense(A, b)).norm() / r.x.norm(), 1e-10);
  EXPECT_LE((b - A * r.x).norm() / b.norm(), 1e-13);
  for (std::size_t i = 1; i < r.history.size(); ++i) EXPECT_LE(r.history[i], r.history[i - 1]);
}

TEST(Gmres, MaxIterReported) {
  VectorXd d = VectorXd::LinSpaced(50, 1, 1000);
  VectorXd b = VectorXd::Ones(50);
  auto r = gmres([&](const VectorXd& x, VectorXd& y) { y = d.cwiseProduct(x); }, b, 1e-14, 3);
  EXPECT_FALSE(r.converged);
  EXPECT_EQ(r.iterations, 3);
  EXPECT_GT(r.history.back(), 1e-14);
}

TEST(InterpDecomp, RankOne) {
  VectorXd u = VectorXd::Random(20), v = VectorXd::Random(30);
  MatrixXd A = u * v.transpose();
  auto id = interp_decomp(A, 1e-12);
  EXPECT_EQ(id.rank, 1);
  MatrixXd S(20, 1);
  S.col(0) = A.col(id.skeleton[0]);
  EXPECT_LT((A - S * id.coeffs).norm(), 1e-14 * A.norm());
}

TEST(InterpDecomp, IdentityFullRank) {
  auto id = interp_decomp(MatrixXd::Identity(8, 8), 1e-12);
  EXPECT_EQ(id.rank, 8);
}

TEST(InterpDecomp, SeparatedKernel) {
  std::mt19937 rng(5);
  std::uniform_real_distribution<double> ud(0, 1);
  const int m = 300, n = 400;
  MatrixXd A(m, n);
  std::vector<double> xs(m), ys(n);
  for (auto& x : xs) x = 3 + ud(rng);
  for (auto& y : ys) y = ud(rng);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) A(i, j) = 1.0 / std::abs(xs[i] - ys[j]) + std::log(std::abs(xs[i] - ys[j]));
  auto id = interp_decomp(A, 1e-10);
  MatrixXd S(m, id.rank);
  for (int k = 0; k < id.rank; ++k) {
    S.col(k) = A.col(id.skeleton[k]);
    EXPECT_NEAR(id.coeffs(k, id.skeleton[k]), 1.0, 1e-15);
  }
  double a2 = Eigen::JacobiSVD<MatrixXd>(A).singularValues()(0);
  double e2 = Eigen::JacobiSVD<MatrixXd>(A - S * id.coeffs).singularValues()(0);
  EXPECT_LT(e2 / a2, 1e-8);
  EXPECT_LT(id.rank, 40);
}

TEST(InterpDecomp, LowRankPlusNoise) {
  std::mt19937 rng(9);
  std::normal_distribution<double> nd;
  MatrixXd U(80, 10), V(10, 120), E(80, 120);
  for (int i = 0; i < U.size(); ++i) U.data()[i] = nd(rng);
  for (int i = 0; i < V.size(); ++i) V.data()[i] = nd(rng);
  for (int i = 0; i < E.size(); ++i) E.data()[i] = nd(rng);
  MatrixXd A = U * V + 1e-12 * E;
  const double tol = 1e-9;
  auto id = interp_decomp(A, tol);
  MatrixXd S(80, id.rank);
  for (int k = 0; k < id.rank; ++k) S.col(k) = A.col(id.skeleton[k]);
  double a2 = Eigen::JacobiSVD<MatrixXd>(A).singularValues()(0);
  double e2 = Eigen::JacobiSVD<MatrixXd>(A - S * id.coeffs).singularValues()(0);
  EXPECT_EQ(id.rank, 10);
  EXPECT_LT(e2, 10 * tol * a2);
}
