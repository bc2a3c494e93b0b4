#pragma once

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "nesc/quadrature.hpp"

namespace nesc {

// R_n^m(r) = (-1)^{(n-m)/2} r^m P_{(n-m)/2}^{(m,0)}(1 - 2r^2), m >= 0.
inline double zernike_radial(int n, int m, double r) {
  if (m < 0 || m > n || (n - m) % 2 != 0) throw std::invalid_argument("zernike_radial: need 0 <= m <= n, n - m even");
  const int k = (n - m) / 2;
  double pk, pk1;
  detail::jacobi_pair(k, m, 0.0, 1.0 - 2.0 * r * r, pk, pk1);
  return ((k % 2) ? -1.0 : 1.0) * std::pow(r, m) * pk;
}

// Z_n^m: cos(m th) branch for m >= 0, sin(|m| th) for m < 0.
inline double zernike_eval(int n, int m, double r, double theta) {
  const int am = std::abs(m);
  if (am > n || (n - am) % 2 != 0) throw std::invalid_argument("zernike_eval: need |m| <= n, n - |m| even");
  double R = zernike_radial(n, am, r);
  return m >= 0 ? R * std::cos(am * theta) : R * std::sin(am * theta);
}

// int_0^{2pi} int_0^1 (Z_n^m)^2 r dr dth
inline double zernike_norm2(int n, int m) { return (m == 0 ? 2.0 : 1.0) * std::numbers::pi / (2.0 * n + 2.0); }

struct ZernikeMode {
  int n, m;
};

// Modes with 0 <= |m| <= n <= M, n - |m| even; ordered by n, then m = 0, +1, -1, +2, -2, ...
inline std::vector<ZernikeMode> zernike_modes(int M) {
  std::vector<ZernikeMode> out;
  for (int n = 0; n <= M; ++n)
    for (int am = n % 2; am <= n; am += 2) {
      if (am == 0) {
        out.push_back({n, 0});
      } else {
        out.push_back({n, am});
        out.push_back({n, -am});
      }
    }
  return out;
}

// Orthonormal scaled Zernike basis on a patch of radius epsilon, in polar coordinates (t, th)
// about the center with t in [0, epsilon]. Inner products use the flat polar measure t dt dth.
struct ZernikeBasis {
  int M = 0, K = 0, n_rad = 0, n_ang = 0;
  double epsilon = 0;
  std::vector<ZernikeMode> modes;
  std::vector<double> scale;  // q_j = scale_j * Z(t / epsilon, th)
  // sampling nodes, radial index major: node i = ir * n_ang + ia
  std::vector<double> t_nodes, theta_nodes;
  std::vector<double> t, theta, w;
  Eigen::MatrixXd Q;  // K* x K: q_j at the sampling nodes
  Eigen::MatrixXd P;  // K x K*: discrete transform

  int num_nodes() const { return static_cast<int>(t.size()); }
  double flat_area() const { return std::numbers::pi * epsilon * epsilon; }

  void eval_all(double tt, double th, double* out) const {
    if (tt < 0 || tt > epsilon * (1 + 1e-12)) throw std::out_of_range("ZernikeBasis: point outside the patch");
    const double r = tt / epsilon, x = 1.0 - 2.0 * r * r;
    for (int j = 0; j < K; ++j) {
      const int n = modes[j].n, am = std::abs(modes[j].m), k = (n - am) / 2;
      double pk, pk1;
      detail::jacobi_pair(k, am, 0.0, x, pk, pk1);
      double R = ((k % 2) ? -1.0 : 1.0) * std::pow(r, am) * pk;
      out[j] = scale[j] * R * (modes[j].m >= 0 ? std::cos(am * th) : std::sin(am * th));
    }
  }

  double eval(int j, double tt, double th) const {
    return scale[j] * zernike_eval(modes[j].n, modes[j].m, tt / epsilon, th);
  }

  Eigen::VectorXd analyze(const Eigen::VectorXd& samples) const {
    if (samples.size() != num_nodes()) throw std::invalid_argument("analyze: sample count does not match K*");
    return P * samples;
  }

  std::vector<double> synthesize(const Eigen::VectorXd& coeffs, const std::vector<std::pair<double, double>>& pts) const {
    if (coeffs.size() != K) throw std::invalid_argument("synthesize: coefficient count does not match K");
    std::vector<double> v(pts.size()), row(K);
    for (std::size_t i = 0; i < pts.size(); ++i) {
      eval_all(pts[i].first, pts[i].second, row.data());
      double s = 0;
      for (int j = 0; j < K; ++j) s += row[j] * coeffs[j];
      v[i] = s;
    }
    return v;
  }
};

inline ZernikeBasis build_basis(int M, double epsilon) {
  if (M < 0) throw std::invalid_argument("build_basis: M must be >= 0");
  if (!(epsilon > 0) || epsilon >= std::numbers::pi / 4) throw std::invalid_argument("build_basis: epsilon out of range");
  ZernikeBasis b;
  b.M = M;
  b.epsilon = epsilon;
  b.modes = zernike_modes(M);
  b.K = static_cast<int>(b.modes.size());
  for (auto md : b.modes) b.scale.push_back(1.0 / (epsilon * std::sqrt(zernike_norm2(md.n, md.m))));
  b.n_rad = M + 1;
  b.n_ang = 2 * M + 2;
  auto g = gauss_legendre(b.n_rad);
  for (int i = 0; i < b.n_rad; ++i) b.t_nodes.push_back(0.5 * epsilon * (1.0 + g.nodes[i]));
  for (int j = 0; j < b.n_ang; ++j) b.theta_nodes.push_back(2.0 * std::numbers::pi * j / b.n_ang);
  for (int i = 0; i < b.n_rad; ++i)
    for (int j = 0; j < b.n_ang; ++j) {
      b.t.push_back(b.t_nodes[i]);
      b.theta.push_back(b.theta_nodes[j]);
      b.w.push_back(0.5 * epsilon * g.weights[i] * b.t_nodes[i] * 2.0 * std::numbers::pi / b.n_ang);
    }
  const int ns = b.num_nodes();
  b.Q.resize(ns, b.K);
  std::vector<double> row(b.K);
  for (int i = 0; i < ns; ++i) {
    b.eval_all(b.t[i], b.theta[i], row.data());
    for (int j = 0; j < b.K; ++j) b.Q(i, j) = row[j];
  }
  b.P = b.Q.transpose();
  for (int i = 0; i < ns; ++i) b.P.col(i) *= b.w[i];
  return b;
}

}  // namespace nesc
