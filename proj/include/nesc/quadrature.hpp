#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <queue>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

namespace nesc {

struct QuadratureRule {
  std::vector<double> nodes;
  std::vector<double> weights;

  std::size_t size() const { return nodes.size(); }

  template <class F>
  double integrate(F&& f) const {
    double s = 0;
    for (std::size_t i = 0; i < nodes.size(); ++i) s += weights[i] * f(nodes[i]);
    return s;
  }
};

namespace detail {

// P_n^{(a,b)}(x) and P_{n-1}^{(a,b)}(x) by the three-term recurrence.
inline void jacobi_pair(int n, double a, double b, double x, double& pn, double& pn1) {
  double p0 = 1.0;
  if (n == 0) {
    pn = p0;
    pn1 = 0.0;
    return;
  }
  double p1 = 0.5 * (a - b) + 0.5 * (a + b + 2.0) * x;
  for (int k = 2; k <= n; ++k) {
    double s = 2.0 * k + a + b;
    double c1 = 2.0 * k * (k + a + b) * (s - 2.0);
    double c2 = (s - 1.0) * (s * (s - 2.0) * x + a * a - b * b);
    double c3 = 2.0 * (k + a - 1.0) * (k + b - 1.0) * s;
    double p2 = (c2 * p1 - c3 * p0) / c1;
    p0 = p1;
    p1 = p2;
  }
  pn = p1;
  pn1 = p0;
}

// d/dx P_n^{(a,b)} from P_n and P_{n-1}.
inline double jacobi_deriv(int n, double a, double b, double x, double pn, double pn1) {
  double s = 2.0 * n + a + b;
  return (n * ((a - b) - s * x) * pn + 2.0 * (n + a) * (n + b) * pn1) / (s * (1.0 - x * x));
}

// Eigenvalues of the symmetric Jacobi matrix, used as starting guesses.
inline std::vector<double> jacobi_guesses(int n, double a, double b) {
  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(n, n);
  for (int k = 0; k < n; ++k) {
    double s = 2.0 * k + a + b;
    J(k, k) = (s == 0.0) ? (b - a) / (a + b + 2.0) : (b * b - a * a) / (s * (s + 2.0));
    if (k + 1 < n) {
      double kk = k + 1.0;
      double s1 = 2.0 * kk + a + b;
      double v = 4.0 * kk * (kk + a) * (kk + b) * (kk + a + b) / (s1 * s1 * (s1 + 1.0) * (s1 - 1.0));
      J(k, k + 1) = J(k + 1, k) = std::sqrt(v);
    }
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(J, Eigen::EigenvaluesOnly);
  std::vector<double> x(n);
  for (int k = 0; k < n; ++k) x[k] = es.eigenvalues()(k);
  return x;
}

}  // namespace detail

inline QuadratureRule gauss_jacobi(int n, double alpha, double beta) {
  if (n < 1) throw std::invalid_argument("gauss_jacobi: n must be >= 1");
  if (!(alpha > -1.0) || !(beta > -1.0)) throw std::invalid_argument("gauss_jacobi: alpha, beta must exceed -1");
  QuadratureRule q;
  q.nodes = detail::jacobi_guesses(n, alpha, beta);
  q.weights.resize(n);
  double lc = std::lgamma(n + alpha + 1.0) + std::lgamma(n + beta + 1.0) - std::lgamma(n + alpha + beta + 1.0) -
              std::lgamma(n + 1.0) + (alpha + beta + 1.0) * std::log(2.0);
  for (int i = 0; i < n; ++i) {
    double x = q.nodes[i], pn, pn1, dp = 1;
    for (int it = 0; it < 100; ++it) {
      detail::jacobi_pair(n, alpha, beta, x, pn, pn1);
      dp = detail::jacobi_deriv(n, alpha, beta, x, pn, pn1);
      double dx = pn / dp;
      x -= dx;
      if (std::abs(dx) <= 1e-16 * (1.0 + std::abs(x))) break;
    }
    detail::jacobi_pair(n, alpha, beta, x, pn, pn1);
    dp = detail::jacobi_deriv(n, alpha, beta, x, pn, pn1);
    q.nodes[i] = x;
    q.weights[i] = std::exp(lc) / ((1.0 - x * x) * dp * dp);
  }
  return q;
}

inline QuadratureRule gauss_legendre(int n) {
  if (n < 1) throw std::invalid_argument("gauss_legendre: n must be >= 1");
  QuadratureRule q;
  q.nodes.resize(n);
  q.weights.resize(n);
  for (int i = 0; i < n; ++i) {
    double x = -std::cos(std::numbers::pi * (i + 0.75) / (n + 0.5)), pn = 1, pn1 = 0, dp = 1;
    for (int it = 0; it < 100; ++it) {
      detail::jacobi_pair(n, 0, 0, x, pn, pn1);
      dp = n * (pn1 - x * pn) / (1.0 - x * x);
      double dx = pn / dp;
      x -= dx;
      if (std::abs(dx) <= 1e-16) break;
    }
    detail::jacobi_pair(n, 0, 0, x, pn, pn1);
    dp = n * (pn1 - x * pn) / (1.0 - x * x);
    q.nodes[i] = x;
    q.weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
  }
  if (n % 2 == 1) q.nodes[n / 2] = 0.0;
  return q;
}

// Cached Gauss-Legendre rule of fixed order (thread-safe static init).
template <int N>
const QuadratureRule& gl_rule() {
  static const QuadratureRule q = gauss_legendre(N);
  return q;
}

struct QuadResult {
  double value = 0;
  double error = 0;
  int panels = 0;
  bool converged = true;
};

class QuadratureNotConverged : public std::runtime_error {
 public:
  QuadResult partial;
  explicit QuadratureNotConverged(const QuadResult& r)
      : std::runtime_error("adaptive quadrature did not converge within the depth cap"), partial(r) {}
};

// Globally adaptive Gauss quadrature: each panel is scored by |G15(panel) - G15(halves)|
// and the worst panel is bisected until the summed estimate drops below tol*(1+|I|).
// The integral is taken in the variable u of x = a + (b-a)(3u^2 - 2u^3), which flattens
// integrable endpoint singularities and keeps nodes off the endpoints.
template <class F>
QuadResult adaptive_quad_result(F&& f, double a, double b, double tol, int max_depth = 50) {
  const auto& g = gl_rule<15>();
  const double L = b - a, xa = a, xb = b;
  auto g15 = [&](double lo, double hi) {
    double c = 0.5 * (lo + hi), h = 0.5 * (hi - lo), s = 0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      double u = c + h * g.nodes[i], v = 1.0 - u;
      double x = (u < 0.5) ? xa + L * u * u * (3.0 - 2.0 * u) : xb - L * v * v * (3.0 - 2.0 * v);
      s += g.weights[i] * f(x) * 6.0 * L * u * v;
    }
    return s * h;
  };
  a = 0.0;
  b = 1.0;
  struct Panel {
    double lo, hi, coarse, fine, err;
    int depth;
    bool operator<(const Panel& o) const { return err < o.err; }
  };
  auto make = [&](double lo, double hi, double coarse, int depth) {
    double m = 0.5 * (lo + hi);
    double fine = g15(lo, m) + g15(m, hi);
    return Panel{lo, hi, coarse, fine, std::abs(fine - coarse), depth};
  };
  std::priority_queue<Panel> heap;
  heap.push(make(a, b, g15(a, b), 0));
  double total = heap.top().fine, err = heap.top().err;
  QuadResult r;
  // the target never drops below a few ulps of the running total
  const double floor_rel = 64.0 * std::numeric_limits<double>::epsilon();
  while (err > std::max(tol, floor_rel) * (1.0 + std::abs(total))) {
    Panel p = heap.top();
    if (p.depth >= max_depth || heap.size() > 100000) {
      r.value = total;
      r.error = err;
      r.panels = static_cast<int>(heap.size());
      r.converged = false;
      return r;
    }
    heap.pop();
    double m = 0.5 * (p.lo + p.hi);
    Panel l = make(p.lo, m, g15(p.lo, m), p.depth + 1);
    Panel rr = make(m, p.hi, g15(m, p.hi), p.depth + 1);
    total += l.fine + rr.fine - p.fine;
    err += l.err + rr.err - p.err;
    heap.push(l);
    heap.push(rr);
  }
  // resum to shed accumulated update roundoff
  double s = 0, e = 0;
  r.panels = static_cast<int>(heap.size());
  while (!heap.empty()) {
    s += heap.top().fine;
    e += heap.top().err;
    heap.pop();
  }
  r.value = s;
  r.error = e;
  return r;
}

template <class F>
double adaptive_quad(F&& f, double a, double b, double tol) {
  QuadResult r = adaptive_quad_result(std::forward<F>(f), a, b, tol);
  if (!r.converged) throw QuadratureNotConverged(r);
  return r.value;
}

// Composite Gauss-Legendre nodes on [a,b] graded geometrically toward the point s.
// Subpanels have length at most their distance to s (and at most hmax); the innermost
// panel touching s has length below floor_rel*(b-a).
struct NodeList {
  std::vector<double> x, w;
  void clear() {
    x.clear();
    w.clear();
  }
};

template <int Q = 12>
void graded_nodes(double a, double b, double s, double hmax, double floor_rel, NodeList& out) {
  const auto& g = gl_rule<Q>();
  auto add_panel = [&](double lo, double hi) {
    double c = 0.5 * (lo + hi), h = 0.5 * (hi - lo);
    for (std::size_t i = 0; i < g.size(); ++i) {
      out.x.push_back(c + h * g.nodes[i]);
      out.w.push_back(h * g.weights[i]);
    }
  };
  auto add_uniform = [&](double lo, double hi) {
    int n = std::max(1, static_cast<int>(std::ceil((hi - lo) / hmax - 1e-12)));
    double h = (hi - lo) / n;
    for (int i = 0; i < n; ++i) add_panel(lo + i * h, (i + 1 == n) ? hi : lo + (i + 1) * h);
  };
  // one side of s: the attracting point lies at distance d0 >= 0 beyond the near end
  auto graded_side = [&](double lo, double hi, double d0, int dir) {
    double len = hi - lo;
    if (len <= 0) return;
    double c = std::min(len, std::max(d0, floor_rel * (b - a)));
    std::vector<double> cuts{0.0, c};
    while (c < len) {
      c = std::min(len, 2.0 * c + d0);
      cuts.push_back(c);
    }
    for (std::size_t i = 0; i + 1 < cuts.size(); ++i) {
      double p0 = dir > 0 ? lo + cuts[i] : hi - cuts[i + 1];
      double p1 = dir > 0 ? lo + cuts[i + 1] : hi - cuts[i];
      add_uniform(p0, p1);
    }
  };
  if (s <= a) {
    graded_side(a, b, a - s, +1);
  } else if (s >= b) {
    graded_side(a, b, s - b, -1);
  } else {
    graded_side(a, s, 0.0, -1);
    graded_side(s, b, 0.0, +1);
  }
}

}  // namespace nesc
