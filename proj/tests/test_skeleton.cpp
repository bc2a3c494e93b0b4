#include <gtest/gtest.h>

#include <filesystem>
#include <numbers>
#include <random>

#include "nesc/skeleton.hpp"

using namespace nesc;
constexpr double pi = std::numbers::pi;

namespace {

const OnePatchOperator& small_op(ProblemKind k) {
  static const OnePatchOperator a = solve_onepatch(ProblemKind::interior, build_basis(6, 0.08), build_fine_grid(0.08, 8, 12, 14));
  static const OnePatchOperator b = solve_onepatch(ProblemKind::exterior, build_basis(6, 0.08), build_fine_grid(0.08, 8, 12, 14));
  return k == ProblemKind::interior ? a : b;
}

Vec3 random_far_point(std::mt19937& rng, double rmin) {
  std::uniform_real_distribution<double> U(0, 1);
  // uniform over the cap complement t >= rmin
  double z = std::cos(rmin) - U(rng) * (std::cos(rmin) + 1);
  double ph = 2 * pi * U(rng), s = std::sqrt(1 - z * z);
  return {s * std::cos(ph), s * std::sin(ph), z};
}

// worst error of the skeleton sum against the full fine-grid sum, relative to the largest field value
double oracle_error(const OnePatchOperator& op, const OutgoingOperator& out, double rmin, int ntarget, unsigned seed) {
  std::mt19937 rng(seed);
  std::normal_distribution<double> N;
  const auto& g = op.grid;
  double worst = 0;
  for (int rep = 0; rep < 3; ++rep) {
    double emax = 0, fmax = 0;
    Eigen::VectorXd f(op.K());
    for (int j = 0; j < op.K(); ++j) f[j] = N(rng);
    Eigen::VectorXd sig = op.B * f, rho = out.T * f;
    for (int q = 0; q < ntarget; ++q) {
      Vec3 x = random_far_point(rng, rmin);
      double full = 0, skel = 0;
      for (int l = 0; l < g.n_f(); ++l) full += green_surface(op.kind, x, local_node(g, l)) * sig[l] * g.w[l];
      for (int m = 0; m < out.p(); ++m) skel += green_surface(op.kind, x, local_node(g, out.skeleton[m])) * rho[m];
      emax = std::max(emax, std::abs(full - skel));
      fmax = std::max(fmax, std::abs(full));
    }
    worst = std::max(worst, emax / fmax);
  }
  return worst;
}

}  // namespace

TEST(TrainingGrid, CoversCapComplement) {
  const double eps = 0.05;
  auto pts = build_training_grid(eps, 2 * eps);
  EXPECT_EQ(pts.size(), 48u * 96u);
  double tmin = 10, tmax = 0;
  Vec3 n(0, 0, 1);
  for (const auto& p : pts) {
    EXPECT_NEAR(p.norm(), 1.0, 1e-14);
    double t = sphere_dist(n, p);
    tmin = std::min(tmin, t);
    tmax = std::max(tmax, t);
  }
  EXPECT_GE(tmin, 2 * eps - 1e-14);
  EXPECT_NEAR(tmax, pi, 1e-7);
  EXPECT_THROW(build_training_grid(eps, 1.5 * eps), std::invalid_argument);
}

TEST(TrainingGrid, GradedTowardInnerRadius) {
  auto pts = build_training_grid(0.05, 0.1);
  Vec3 n(0, 0, 1);
  double d0 = sphere_dist(n, pts[96]) - sphere_dist(n, pts[0]);
  double d1 = sphere_dist(n, pts[2 * 96]) - sphere_dist(n, pts[96]);
  EXPECT_NEAR(d1 / d0, 1.15, 1e-9);
}

TEST(Outgoing, FullSumOracleBothKinds) {
  for (auto kind : {ProblemKind::interior, ProblemKind::exterior}) {
    const auto& op = small_op(kind);
    const double tol = 1e-11;
    auto out = build_outgoing(op, tol);
    EXPECT_LT(out.p(), op.n_f());
    EXPECT_EQ(out.T.rows(), out.p());
    EXPECT_EQ(out.T.cols(), op.K());
    for (int s : out.skeleton) {
      EXPECT_GE(s, 0);
      EXPECT_LT(s, op.n_f());
    }
    EXPECT_LT(oracle_error(op, out, out.inner_radius, 20, 7), 10 * tol) << to_string(kind);
  }
}

TEST(Outgoing, RankMonotoneInTolerance) {
  const auto& op = small_op(ProblemKind::interior);
  auto lo = build_outgoing(op, 1e-7), hi = build_outgoing(op, 1e-11);
  EXPECT_LE(lo.p(), hi.p());
  EXPECT_LT(oracle_error(op, lo, lo.inner_radius, 10, 3), 1e-6);
}

TEST(Outgoing, TrainingRefinementStability) {
  const auto& op = small_op(ProblemKind::exterior);
  auto a = build_outgoing(op, 1e-11);
  TrainingOptions fine;
  fine.n_rad = 96;
  fine.n_ang = 192;
  auto b = build_outgoing(op, 1e-11, -1, 1, fine);
  EXPECT_LE(std::abs(a.p() - b.p()), 2) << a.p() << " vs " << b.p();
}

TEST(Outgoing, PaperRadiusCompression) {
  auto op = solve_onepatch(ProblemKind::interior, build_basis(15, 0.0447), build_fine_grid(0.0447, 13, 20, 32));
  auto out = build_outgoing(op, 1e-11);
  std::cout << "[ p ] eps=0.0447 M=15 n_f=" << op.n_f() << " p=" << out.p() << "\n";
  EXPECT_LT(out.p() * 10, op.n_f());
  EXPECT_LT(oracle_error(op, out, out.inner_radius, 10, 11), 1e-10);
}

TEST(OutgoingPerLevel, RanksAndAccuracy) {
  const auto& op = small_op(ProblemKind::interior);
  const double tol = 1e-11;
  auto base = build_outgoing(op, tol);
  std::vector<double> radii{2 * op.epsilon, 0.3, 0.8, 1.6};
  auto lv = build_outgoing_per_level(op, base, radii);
  ASSERT_EQ(lv.size(), radii.size());
  EXPECT_EQ(lv[0].skeleton, base.skeleton);
  EXPECT_EQ((lv[0].T - base.T).cwiseAbs().maxCoeff(), 0.0);
  for (std::size_t i = 1; i < lv.size(); ++i) {
    EXPECT_LE(lv[i].p(), lv[i - 1].p());
    EXPECT_LT(oracle_error(op, lv[i], radii[i], 10, 20 + i), 10 * tol) << radii[i];
  }
  EXPECT_LT(lv.back().p(), base.p());
  EXPECT_THROW(build_outgoing_per_level(op, base, {0.5, 0.3}), std::invalid_argument);
}

TEST(OutgoingCache, RoundTrip) {
  const auto& op = small_op(ProblemKind::exterior);
  auto dir = std::filesystem::temp_directory_path() / "nesc_skel_cache_test";
  std::filesystem::remove_all(dir);
  bool hit = true;
  auto a = get_outgoing(op, 1e-9, -1, dir.string(), 1, &hit);
  EXPECT_FALSE(hit);
  auto b = get_outgoing(op, 1e-9, -1, dir.string(), 1, &hit);
  EXPECT_TRUE(hit);
  EXPECT_EQ(a.skeleton, b.skeleton);
  EXPECT_EQ((a.T - b.T).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(a.t, b.t);
  auto c = get_outgoing(op, 1e-8, -1, dir.string(), 1, &hit);
  EXPECT_FALSE(hit);
  std::filesystem::remove_all(dir);
}
