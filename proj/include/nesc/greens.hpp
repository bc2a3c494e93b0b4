#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "nesc/quadrature.hpp"
#include "nesc/sphere_geom.hpp"

// SIMD variant of log from libmvec, usable with -fopenmp-simd -fno-math-errno.
#if defined(__GNUC__) && !defined(__clang__) && defined(__x86_64__) && !defined(__FAST_MATH__)
#pragma omp declare simd notinbranch
extern "C" double log(double) noexcept;
#endif

namespace nesc {

enum class ProblemKind { exterior, interior };

inline const char* to_string(ProblemKind k) { return k == ProblemKind::exterior ? "exterior" : "interior"; }

inline ProblemKind problem_kind_from_string(const std::string& s) {
  if (s == "exterior") return ProblemKind::exterior;
  if (s == "interior") return ProblemKind::interior;
  throw std::invalid_argument("unknown problem kind '" + s + "'");
}

// On-surface kernel as a function of the chord length rho.
template <ProblemKind K>
inline double surface_kernel(double rho) {
  if constexpr (K == ProblemKind::exterior)
    return 2.0 / rho - std::log1p(2.0 / rho);
  else
    return 2.0 / rho + std::log(4.0 / (rho * (2.0 + rho)));
}

inline double surface_kernel(ProblemKind k, double rho) {
  return k == ProblemKind::exterior ? surface_kernel<ProblemKind::exterior>(rho)
                                    : surface_kernel<ProblemKind::interior>(rho);
}

inline double green_surface(ProblemKind k, const Vec3& x, const Vec3& y) {
  double rho = (x - y).norm();
  if (rho == 0.0) throw std::invalid_argument("green_surface: coincident points");
  return surface_kernel(k, rho);
}

inline double green_offsurface(ProblemKind k, const Vec3& x, const Vec3& y) {
  double rx = x.norm();
  if (k == ProblemKind::exterior ? !(rx > 1.0) : !(rx < 1.0))
    throw std::invalid_argument("green_offsurface: target on the wrong side of the sphere");
  double r = (x - y).norm(), xy = x.dot(y);
  if (k == ProblemKind::exterior) return 2.0 / r + std::log((rx - xy) / (1.0 - xy + r));
  return 2.0 / r + std::log(2.0 / (1.0 - xy + r));
}

// sum_m s[m] G(x, y_m) over points stored by coordinate; y_m must not coincide with x.
template <ProblemKind K>
inline double kernel_sum(const Vec3& x, const double* __restrict y0, const double* __restrict y1,
                         const double* __restrict y2, const double* __restrict s, int n) {
  const double x0 = x[0], x1 = x[1], x2 = x[2];
  double acc = 0;
#pragma omp simd reduction(+ : acc)
  for (int m = 0; m < n; ++m) {
    const double d0 = x0 - y0[m], d1 = x1 - y1[m], d2 = x2 - y2[m];
    const double rho = std::sqrt(d0 * d0 + d1 * d1 + d2 * d2);
    double g;
    if constexpr (K == ProblemKind::exterior)
      g = 2.0 / rho + log(rho / (rho + 2.0));
    else
      g = 2.0 / rho + log(4.0 / (rho * (2.0 + rho)));
    acc += s[m] * g;
  }
  return acc;
}

inline double kernel_sum(ProblemKind k, const Vec3& x, const double* y0, const double* y1, const double* y2,
                         const double* s, int n) {
  return k == ProblemKind::exterior ? kernel_sum<ProblemKind::exterior>(x, y0, y1, y2, s, n)
                                    : kernel_sum<ProblemKind::interior>(x, y0, y1, y2, s, n);
}

// Off-surface analogue of kernel_sum; x must lie on the correct side of the sphere.
template <ProblemKind K>
inline double offsurface_sum(const Vec3& x, const double* __restrict y0, const double* __restrict y1,
                             const double* __restrict y2, const double* __restrict s, int n) {
  const double x0 = x[0], x1 = x[1], x2 = x[2], rx = x.norm();
  double acc = 0;
#pragma omp simd reduction(+ : acc)
  for (int m = 0; m < n; ++m) {
    const double d0 = x0 - y0[m], d1 = x1 - y1[m], d2 = x2 - y2[m];
    const double r = std::sqrt(d0 * d0 + d1 * d1 + d2 * d2);
    const double xy = x0 * y0[m] + x1 * y1[m] + x2 * y2[m];
    double g;
    if constexpr (K == ProblemKind::exterior)
      g = 2.0 / r + log((rx - xy) / (1.0 - xy + r));
    else
      g = 2.0 / r + log(2.0 / (1.0 - xy + r));
    acc += s[m] * g;
  }
  return acc;
}

inline double offsurface_sum(ProblemKind k, const Vec3& x, const double* y0, const double* y1, const double* y2,
                             const double* s, int n) {
  return k == ProblemKind::exterior ? offsurface_sum<ProblemKind::exterior>(x, y0, y1, y2, s, n)
                                    : offsurface_sum<ProblemKind::interior>(x, y0, y1, y2, s, n);
}

namespace detail {

// Carlson symmetric elliptic integrals by duplication.
inline double carlson_rf(double x, double y, double z) {
  for (int it = 0; it < 100; ++it) {
    double sx = std::sqrt(x), sy = std::sqrt(y), sz = std::sqrt(z);
    double lam = sx * (sy + sz) + sy * sz;
    x = 0.25 * (x + lam);
    y = 0.25 * (y + lam);
    z = 0.25 * (z + lam);
    double a = (x + y + z) / 3.0;
    double dx = 1 - x / a, dy = 1 - y / a, dz = 1 - z / a;
    if (std::max({std::abs(dx), std::abs(dy), std::abs(dz)}) < 1e-4) {
      double e2 = dx * dy - dz * dz, e3 = dx * dy * dz;
      return (1 - e2 / 10 + e3 / 14 + e2 * e2 / 24 - 3 * e2 * e3 / 44) / std::sqrt(a);
    }
  }
  return std::numeric_limits<double>::quiet_NaN();
}

inline double carlson_rd(double x, double y, double z) {
  double sum = 0, fac = 1;
  for (int it = 0; it < 100; ++it) {
    double sx = std::sqrt(x), sy = std::sqrt(y), sz = std::sqrt(z);
    double lam = sx * (sy + sz) + sy * sz;
    sum += fac / (sz * (z + lam));
    fac *= 0.25;
    x = 0.25 * (x + lam);
    y = 0.25 * (y + lam);
    z = 0.25 * (z + lam);
    double a = (x + y + 3 * z) / 5.0;
    double dx = 1 - x / a, dy = 1 - y / a, dz = 1 - z / a;
    if (std::max({std::abs(dx), std::abs(dy), std::abs(dz)}) < 1e-4) {
      double ea = dx * dy, eb = dz * dz, ec = ea - eb, ed = ea - 6 * eb, ee = ed + ec + ec;
      double s = 1 + ed * (-3.0 / 14 + 9.0 / 88 * ed - 4.5 / 26 * dz * ee) +
                 dz * (ee / 6 + dz * (-9.0 / 22 * ec + 3.0 / 26 * dz * ea));
      return 3 * sum + fac * s / (a * std::sqrt(a));
    }
  }
  return std::numeric_limits<double>::quiet_NaN();
}

}  // namespace detail

// Half-integer Legendre functions of the second kind Q_{n-1/2}(chi), n = 0..nmax, for chi > 1.
// chim1 = chi - 1 is passed separately to keep precision when chi is close to 1.
inline void legendre_q_half(int nmax, double chim1, double* q) {
  const double chi = 1.0 + chim1;
  const double kp2 = chim1 / (chi + 1.0), k2 = 2.0 / (chi + 1.0), k = std::sqrt(k2);
  const double K = detail::carlson_rf(0.0, kp2, 1.0);
  const double q0 = k * K;
  q[0] = q0;
  if (nmax == 0) return;
  const double eta = std::log1p(chim1 + std::sqrt(chim1 * (chim1 + 2.0)));
  if (2.0 * nmax * eta <= 3.0) {
    double E = K - k2 / 3.0 * detail::carlson_rd(0.0, kp2, 1.0);
    q[1] = chi * k * K - std::sqrt(2.0 * (chi + 1.0)) * E;
    for (int n = 1; n < nmax; ++n) q[n + 1] = (2.0 * n * chi * q[n] - (n - 0.5) * q[n - 1]) / (n + 0.5);
    return;
  }
  // Miller's backward recurrence, normalized by the exact Q_{-1/2}
  const int L = nmax + static_cast<int>(std::ceil(36.0 / eta)) + 10;
  double qa = 0.0, qb = 1e-280;  // Q_{j+1/2}, Q_{j-1/2}
  for (int j = L; j >= 1; --j) {
    double qm = (2.0 * j * chi * qb - (j + 0.5) * qa) / (j - 0.5);
    qa = qb;
    qb = qm;
    if (j - 1 <= nmax) q[j - 1] = qm;
    if (std::abs(qb) > 1e250) {
      qa *= 1e-250;
      qb *= 1e-250;
      for (int i = j - 1; i <= nmax; ++i) q[i] *= 1e-250;
    }
  }
  const double s = q0 / q[0];
  for (int n = 0; n <= nmax; ++n) q[n] *= s;
}

// Modal kernels: (1/pi) int_0^pi f(|x - x'|) cos(n th) dth for ring points at polar arcs t, t'.
inline void modal_g1_all(int nmax, double t, double tp, double* out) {
  const double s = std::sin(t) * std::sin(tp);
  const double h = std::sin(0.5 * (t - tp));
  if (h == 0.0) throw std::invalid_argument("modal_g1: coincident rings (t == t')");
  legendre_q_half(nmax, 2.0 * h * h / s, out);
  const double c = 2.0 / (std::numbers::pi * std::sqrt(s));
  for (int n = 0; n <= nmax; ++n) out[n] *= c;
}

inline void modal_g2_all(int nmax, double t, double tp, double* out) {
  const double t1 = std::min(t, tp), t2 = std::max(t, tp);
  out[0] = -std::log(std::cos(0.5 * t1) * std::sin(0.5 * t2));
  const double x = std::tan(0.5 * t1) / std::tan(0.5 * t2);
  double p = 1.0;
  for (int n = 1; n <= nmax; ++n) {
    p *= x;
    out[n] = p / (2.0 * n);
  }
}

namespace detail {

// Location (distance from th = 0) of the nearest complex singularity of |x - x'|(th).
inline double ring_singularity(double t, double tp) {
  const double a = 4.0 * std::pow(std::sin(0.5 * (t - tp)), 2), b = 4.0 * std::sin(t) * std::sin(tp);
  return 2.0 * std::asinh(std::sqrt(a / b));
}

inline void theta_nodes(int nmax, double t, double tp, NodeList& nl) {
  nl.clear();
  const double s = std::clamp(ring_singularity(t, tp), 1e-6, std::numbers::pi);
  const double hmax = std::min(std::numbers::pi / 8, 3.0 / std::max(1, nmax));
  graded_nodes<12>(0.0, std::numbers::pi, 0.0, hmax, s / std::numbers::pi, nl);
}

}  // namespace detail

inline void modal_g3_all(int nmax, double t, double tp, double* out) {
  thread_local NodeList nl;
  detail::theta_nodes(nmax, t, tp, nl);
  std::fill(out, out + nmax + 1, 0.0);
  const double st = std::sin(t) * std::sin(tp);
  const double dh = std::sin(0.5 * (t - tp));
  for (std::size_t i = 0; i < nl.x.size(); ++i) {
    const double th = nl.x[i], sh = std::sin(0.5 * th);
    const double rho = 2.0 * std::sqrt(dh * dh + st * sh * sh);
    const double f = nl.w[i] * std::log1p(0.5 * rho) / std::numbers::pi;
    const double c1 = std::cos(th);
    double cm = 1.0, cn = c1;
    out[0] += f;
    if (nmax >= 1) out[1] += f * c1;
    for (int n = 2; n <= nmax; ++n) {
      double cp = 2.0 * c1 * cn - cm;
      out[n] += f * cp;
      cm = cn;
      cn = cp;
    }
  }
}

inline double modal_g1(int n, double t, double tp) {
  std::vector<double> v(n + 1);
  modal_g1_all(n, t, tp, v.data());
  return v[n];
}
inline double modal_g2(int n, double t, double tp) {
  std::vector<double> v(n + 1);
  modal_g2_all(n, t, tp, v.data());
  return v[n];
}
inline double modal_g3(int n, double t, double tp) {
  std::vector<double> v(n + 1);
  modal_g3_all(n, t, tp, v.data());
  return v[n];
}

// G_n = g1 + s g2 - g3 with s = -1 (exterior), +1 (interior).
inline void modal_kernel_all(ProblemKind k, int nmax, double t, double tp, double* out) {
  thread_local std::vector<double> a, b;
  a.resize(nmax + 1);
  b.resize(nmax + 1);
  modal_g1_all(nmax, t, tp, out);
  modal_g2_all(nmax, t, tp, a.data());
  modal_g3_all(nmax, t, tp, b.data());
  const double s = k == ProblemKind::exterior ? -1.0 : 1.0;
  for (int n = 0; n <= nmax; ++n) out[n] += s * a[n] - b[n];
}

inline double modal_kernel(ProblemKind k, int n, double t, double tp) {
  std::vector<double> v(n + 1);
  modal_kernel_all(k, n, t, tp, v.data());
  return v[n];
}

}  // namespace nesc
