#include <gtest/gtest.h>

#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>

#include "nesc/sphere_geom.hpp"

using namespace nesc;
constexpr double pi = std::numbers::pi;

static LayoutSpec spec_of(LayoutKind k, int N, double f, double sep = 3.0, std::uint64_t seed = 1) {
  LayoutSpec s;
  s.kind = k;
  s.N = N;
  s.area_fraction = f;
  s.min_sep_factor = sep;
  s.seed = seed;
  return s;
}

TEST(SphereDist, Basics) {
  Vec3 x(1, 0, 0), y(0, 1, 0);
  EXPECT_EQ(sphere_dist(x, x), 0.0);
  EXPECT_NEAR(sphere_dist(x, -x), pi, 1e-15);
  EXPECT_NEAR(sphere_dist(x, y), pi / 2, 1e-15);
  Vec3 z = Vec3(1, 1e-12, 0).normalized();
  EXPECT_NEAR(sphere_dist(x, z), 1e-12, 1e-24);
}

TEST(Layout, FibonacciEpsilon) {
  auto L = make_layout(spec_of(LayoutKind::fibonacci, 100, 0.05));
  EXPECT_NEAR(L.epsilon, 0.0447, 1e-4);
  EXPECT_NEAR(L.area_fraction(), 0.05, 1e-4);
}

TEST(Layout, FibonacciDeterministic) {
  auto a = make_layout(spec_of(LayoutKind::fibonacci, 100, 0.05));
  auto b = make_layout(spec_of(LayoutKind::fibonacci, 100, 0.05));
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.centers[i], b.centers[i]);
}

TEST(Layout, RandomSeparation) {
  for (std::uint64_t seed : {1u, 2u, 77u}) {
    auto L = make_layout(spec_of(LayoutKind::random, 2, 0.05, 3.0, seed));
    EXPECT_GE(sphere_dist(L.centers[0], L.centers[1]), 3.0 * L.epsilon);
  }
  auto L = make_layout(spec_of(LayoutKind::random, 400, 0.05, 2.0, 4));
  EXPECT_GE(min_pair_distance(L.centers), 2.0 * L.epsilon);
  for (const auto& c : L.centers) EXPECT_NEAR(c.norm(), 1.0, 1e-15);
}

TEST(Layout, ClusteredInsideDisks) {
  LayoutSpec s;
  s.kind = LayoutKind::clustered;
  s.N = 1000;
  s.epsilon = 0.005;
  s.min_sep_factor = 3.0;
  auto L = make_layout(s);
  auto d = dodecahedron_vertices();
  ASSERT_EQ(d.size(), 20u);
  const double rd = cluster_disk_radius();
  EXPECT_NEAR(20 * 2 * pi * (1 - std::cos(rd)), pi, 1e-13);
  for (const auto& c : L.centers) {
    double best = 10;
    for (const auto& v : d) best = std::min(best, sphere_dist(c, v));
    EXPECT_LE(best, rd + 1e-12);
  }
  EXPECT_GE(min_pair_distance(L.centers), 3.0 * L.epsilon);
}

TEST(Layout, InfeasibleReportsCount) {
  LayoutSpec s = spec_of(LayoutKind::random, 200, 0.6, 3.0);
  s.max_attempts_per_patch = 50;
  try {
    make_layout(s);
    FAIL();
  } catch (const LayoutError& e) {
    EXPECT_LT(e.achieved, 200);
    EXPECT_GT(e.achieved, 0);
  }
}

TEST(Layout, RejectsBothEpsilonAndFraction) {
  LayoutSpec s = spec_of(LayoutKind::random, 10, 0.05);
  s.epsilon = 0.1;
  EXPECT_THROW(make_layout(s), std::invalid_argument);
}

TEST(Layout, FromFile) {
  const char* path = "test_layout_points.txt";
  {
    std::ofstream o(path);
    o << "# two patches\n0 0 1\n0 0 -1  # south\n\n1 0 0\n";
  }
  LayoutSpec s;
  s.kind = LayoutKind::from_file;
  s.path = path;
  s.epsilon = 0.1;
  auto L = make_layout(s);
  EXPECT_EQ(L.N, 3);
  EXPECT_EQ(L.centers[1], Vec3(0, 0, -1));
  std::remove(path);
}

TEST(PatchPoint, CenterAndEdge) {
  LayoutSpec s;
  s.kind = LayoutKind::from_file;
  const char* path = "test_layout_np.txt";
  {
    std::ofstream o(path);
    o << "0 0 1\n";
  }
  s.path = path;
  s.epsilon = 0.2;
  auto L = make_layout(s);
  std::remove(path);
  EXPECT_LT((L.patch_point(0, 0, 1.3) - Vec3(0, 0, 1)).norm(), 1e-16);
  // frame of the north pole aligns e1 with the global x axis
  Vec3 p = L.patch_point(0, 0.2, 0);
  EXPECT_LT((p - Vec3(std::sin(0.2), 0, std::cos(0.2))).norm(), 1e-15);
  EXPECT_THROW(L.patch_point(0, 0.3, 0), std::out_of_range);
}

TEST(PatchPoint, RoundTrip) {
  auto L = make_layout(spec_of(LayoutKind::random, 30, 0.05, 3.0, 9));
  std::mt19937 rng(1);
  std::uniform_real_distribution<double> U(0, 1);
  for (int i = 0; i < 30; ++i) {
    double t = L.epsilon * (0.01 + 0.99 * U(rng)), th = pi * (2 * U(rng) - 1);
    auto [t2, th2] = L.patch_coords(i, L.patch_point(i, t, th));
    EXPECT_NEAR(t2, t, 1e-13);
    EXPECT_NEAR(th2, th, 1e-13);
  }
}

TEST(Frame, NearXAxis) {
  Frame f = make_frame(Vec3(1, 1e-10, 0));
  EXPECT_NEAR(f.e1.dot(f.c), 0, 1e-15);
  EXPECT_NEAR(f.e1.norm(), 1, 1e-15);
  EXPECT_NEAR(f.e2.dot(f.e1), 0, 1e-15);
}

TEST(BoundingCircle, SinglePoint) {
  auto bc = bounding_circle({Vec3(0, 1, 0)});
  EXPECT_EQ(bc.radius, 0.0);
  EXPECT_LT((bc.center - Vec3(0, 1, 0)).norm(), 1e-16);
}

TEST(BoundingCircle, TwoPoints) {
  Vec3 a(1, 0, 0), b = Vec3(1, 1, 0).normalized();
  auto bc = bounding_circle({a, b});
  EXPECT_NEAR(bc.radius, pi / 8, 1e-15);
  EXPECT_LT((bc.center - (a + b).normalized()).norm(), 1e-15);
}

TEST(BoundingCircle, MinimalAndOrderIndependent) {
  std::mt19937 rng(2);
  std::uniform_real_distribution<double> U(0, 1);
  Frame f = make_frame(Vec3(0.3, -0.4, 0.8));
  std::vector<Vec3> pts;
  for (int i = 0; i < 50; ++i) pts.push_back(f.point(0.4 * std::sqrt(U(rng)), 2 * pi * U(rng)));
  auto bc = bounding_circle(pts);
  int on_boundary = 0;
  for (auto& p : pts) {
    EXPECT_LE(sphere_dist(bc.center, p), bc.radius + 1e-13);
    if (sphere_dist(bc.center, p) > bc.radius - 1e-9) ++on_boundary;
  }
  EXPECT_GE(on_boundary, 1);
  // no cap of radius R - 1e-9 contains all points: probe centers around the optimum
  Frame g = make_frame(bc.center);
  for (int k = 0; k < 64; ++k) {
    Vec3 c2 = g.point(1e-7 * U(rng), 2 * pi * U(rng));
    double worst = 0;
    for (auto& p : pts) worst = std::max(worst, sphere_dist(c2, p));
    EXPECT_GT(worst, bc.radius - 1e-9);
  }
  std::reverse(pts.begin(), pts.end());
  EXPECT_NEAR(bounding_circle(pts).radius, bc.radius, 1e-12);
  EXPECT_NEAR(bounding_circle(pts, 0.05).radius, bc.radius + 0.05, 1e-12);
}

TEST(BoundingCircle, RejectsHemisphere) {
  EXPECT_THROW(bounding_circle({Vec3(1, 0, 0), Vec3(-1, 0, 0), Vec3(0, 1, 0)}), std::invalid_argument);
}
