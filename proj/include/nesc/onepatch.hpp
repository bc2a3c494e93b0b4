#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "nesc/dense.hpp"
#include "nesc/greens.hpp"
#include "nesc/parallel.hpp"
#include "nesc/quadrature.hpp"
#include "nesc/zernike.hpp"

namespace nesc {

// Radial panels dyadically refined toward t = epsilon, k nodes per panel (Gauss-Legendre,
// Gauss-Jacobi(-1/2, 0) on the last panel), times n_theta equispaced angles.
// Fine-grid node index = ir * n_theta + ia.
struct FineGrid {
  double epsilon = 0;
  int m = 0, k = 0, n_theta = 0;
  std::vector<double> a;        // panel boundaries, size m + 1
  std::vector<double> ref_leg;  // reference nodes on [-1, 1]
  std::vector<double> ref_jac;
  std::vector<double> bary_leg, bary_jac;
  std::vector<double> t;   // radial nodes, size m * k
  std::vector<double> sq;  // sqrt(eps - t) on the last panel, 1 elsewhere
  std::vector<double> wt;  // radial weights for int g sigma sin t dt
  std::vector<double> theta;
  std::vector<double> w;  // fine-grid weights, size n_f

  int n_rad() const { return m * k; }
  int n_f() const { return m * k * n_theta; }
  int n_modes() const { return (n_theta - 1) / 2; }
  double node_t(int i) const { return t[i / n_theta]; }
  double node_theta(int i) const { return theta[i % n_theta]; }

  // Lagrange basis of panel p at t' (for the last panel the basis represents sigma * sqrt(eps - t')).
  void lagrange(int p, double tp, double* out) const {
    const double lo = a[p], hi = a[p + 1];
    const double x = (2.0 * tp - lo - hi) / (hi - lo);
    const auto& xs = (p == m - 1) ? ref_jac : ref_leg;
    const auto& lam = (p == m - 1) ? bary_jac : bary_leg;
    double den = 0;
    for (int l = 0; l < k; ++l) {
      double d = x - xs[l];
      if (d == 0.0) {
        for (int j = 0; j < k; ++j) out[j] = (j == l);
        return;
      }
      out[l] = lam[l] / d;
      den += out[l];
    }
    for (int l = 0; l < k; ++l) out[l] /= den;
  }
};

namespace detail {
inline std::vector<double> barycentric_weights(const std::vector<double>& x) {
  std::vector<double> lam(x.size(), 1.0);
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = 0; j < x.size(); ++j)
      if (i != j) lam[i] /= (x[i] - x[j]);
  // rescale to O(1) to keep the ratio well inside the exponent range
  double mx = 0;
  for (double v : lam) mx = std::max(mx, std::abs(v));
  for (double& v : lam) v /= mx;
  return lam;
}
}  // namespace detail

inline FineGrid build_fine_grid(double epsilon, int m, int k, int n_theta) {
  if (m < 1) throw std::invalid_argument("build_fine_grid: need m >= 1 panels");
  if (k < 2) throw std::invalid_argument("build_fine_grid: need k >= 2 nodes per panel");
  if (n_theta < 1) throw std::invalid_argument("build_fine_grid: need n_theta >= 1");
  if (!(epsilon > 0) || epsilon >= std::numbers::pi / 4)
    throw std::invalid_argument("build_fine_grid: epsilon must lie in (0, pi/4)");
  if (m > 40) throw std::invalid_argument("build_fine_grid: too many dyadic panels");
  FineGrid g;
  g.epsilon = epsilon;
  g.m = m;
  g.k = k;
  g.n_theta = n_theta;
  for (int j = 0; j < m; ++j) g.a.push_back(epsilon * (1.0 - std::ldexp(1.0, -j)));
  g.a[0] = 0.0;
  g.a.push_back(epsilon);
  auto gl = gauss_legendre(k);
  auto gj = gauss_jacobi(k, -0.5, 0.0);
  g.ref_leg = gl.nodes;
  g.ref_jac = gj.nodes;
  g.bary_leg = detail::barycentric_weights(gl.nodes);
  g.bary_jac = detail::barycentric_weights(gj.nodes);
  for (int p = 0; p < m; ++p) {
    const double lo = g.a[p], hi = g.a[p + 1], h = 0.5 * (hi - lo);
    const bool last = (p == m - 1);
    const auto& q = last ? gj : gl;
    for (int l = 0; l < k; ++l) {
      double tt = lo + h * (1.0 + q.nodes[l]);
      g.t.push_back(tt);
      if (last) {
        // (eps - t)^(-1/2) dt = sqrt(h) (1 - x)^(-1/2) dx
        double s = std::sqrt(epsilon - tt);
        g.sq.push_back(s);
        g.wt.push_back(std::sqrt(h) * q.weights[l] * s * std::sin(tt));
      } else {
        g.sq.push_back(1.0);
        g.wt.push_back(h * q.weights[l] * std::sin(tt));
      }
    }
  }
  for (int j = 0; j < n_theta; ++j) g.theta.push_back(2.0 * std::numbers::pi * j / n_theta);
  for (int i = 0; i < g.n_rad(); ++i)
    for (int j = 0; j < n_theta; ++j) g.w.push_back(g.wt[i] * 2.0 * std::numbers::pi / n_theta);
  return g;
}

// Rows of the modal systems for one target arc t:
// R(n, p*k + l) = 2 pi int_{panel p} G_n(t, t') L_{p,l}(t') sin t' [(eps - t')^(-1/2) on the last panel] dt'.
inline Eigen::MatrixXd modal_rows(ProblemKind kind, const FineGrid& g, double t, int nmax) {
  Eigen::MatrixXd R = Eigen::MatrixXd::Zero(nmax + 1, g.n_rad());
  thread_local NodeList nl;
  thread_local std::vector<double> L, G;
  L.resize(g.k);
  G.resize(nmax + 1);
  const double twopi = 2.0 * std::numbers::pi;
  for (int p = 0; p < g.m; ++p) {
    const double lo = g.a[p], hi = g.a[p + 1];
    const bool last = (p == g.m - 1);
    nl.clear();
    if (!last) {
      graded_nodes<24>(lo, hi, t, 0.5 * (hi - lo), 1e-14, nl);
    } else {
      // t' = eps - u^2 removes the inverse square root
      const double U = std::sqrt(g.epsilon - lo);
      const double us = std::sqrt(std::max(0.0, g.epsilon - t));
      graded_nodes<24>(0.0, U, us, 0.5 * U, 1e-14, nl);
    }
    for (std::size_t q = 0; q < nl.x.size(); ++q) {
      double tp, wq;
      if (!last) {
        tp = nl.x[q];
        wq = nl.w[q];
      } else {
        tp = g.epsilon - nl.x[q] * nl.x[q];
        wq = 2.0 * nl.w[q];
      }
      if (tp == t) continue;
      modal_kernel_all(kind, nmax, t, tp, G.data());
      g.lagrange(p, tp, L.data());
      const double c = twopi * wq * std::sin(tp);
      for (int n = 0; n <= nmax; ++n) {
        const double cg = c * G[n];
        for (int l = 0; l < g.k; ++l) R(n, p * g.k + l) += cg * L[l];
      }
    }
  }
  return R;
}

// Collocation matrices for modes 0..nmax: rows at the grid's radial nodes.
inline std::vector<Eigen::MatrixXd> build_modal_systems(ProblemKind kind, const FineGrid& g, int nmax, int workers = 1) {
  std::vector<Eigen::MatrixXd> A(nmax + 1, Eigen::MatrixXd(g.n_rad(), g.n_rad()));
  parallel_for(g.n_rad(), workers, [&](int i) {
    Eigen::MatrixXd R = modal_rows(kind, g, g.t[i], nmax);
    for (int n = 0; n <= nmax; ++n) A[n].row(i) = R.row(n);
  });
  return A;
}

inline Eigen::MatrixXd build_modal_system(ProblemKind kind, const FineGrid& g, int n) {
  return build_modal_systems(kind, g, n)[n];
}

// Real Fourier coefficients (a_n cos + b_n sin) of samples on the grid angles, per radial node.
struct ModalData {
  std::vector<Eigen::VectorXd> c, s;  // index n, vectors over radial nodes
};

inline ModalData angular_transform(const FineGrid& g, const Eigen::VectorXd& samples, int nmax) {
  ModalData d;
  const int nt = g.n_theta;
  for (int n = 0; n <= nmax; ++n) {
    Eigen::VectorXd c = Eigen::VectorXd::Zero(g.n_rad()), s = Eigen::VectorXd::Zero(g.n_rad());
    for (int i = 0; i < g.n_rad(); ++i)
      for (int j = 0; j < nt; ++j) {
        double v = samples[i * nt + j];
        c[i] += v * std::cos(n * g.theta[j]);
        s[i] += v * std::sin(n * g.theta[j]);
      }
    double f = (n == 0 || 2 * n == nt) ? 1.0 / nt : 2.0 / nt;
    d.c.push_back(c * f);
    d.s.push_back(s * f);
  }
  return d;
}

struct OnePatchOperator {
  ProblemKind kind = ProblemKind::interior;
  double epsilon = 0;
  int M = 0;
  ZernikeBasis basis;
  FineGrid grid;
  std::vector<LUFactor> lu;  // one per Fourier mode 0..n_modes
  Eigen::MatrixXd B;         // n_f x K
  Eigen::RowVectorXd I;      // 1 x K

  int K() const { return basis.K; }
  int n_f() const { return grid.n_f(); }

  // Solves S sigma = f for data sampled on the collocation radii x grid angles; returns sigma on the fine grid.
  Eigen::VectorXd solve(const Eigen::VectorXd& data) const {
    const int nm = static_cast<int>(lu.size()) - 1;
    ModalData d = angular_transform(grid, data, nm);
    Eigen::VectorXd sig = Eigen::VectorXd::Zero(n_f());
    for (int n = 0; n <= nm; ++n) {
      Eigen::MatrixXd rhs(grid.n_rad(), 2);
      rhs.col(0) = d.c[n];
      rhs.col(1) = d.s[n];
      if (rhs.cwiseAbs().maxCoeff() == 0.0) continue;
      Eigen::MatrixXd x = lu[n].solve(rhs);
      for (int i = 0; i < grid.n_rad(); ++i) {
        double gc = x(i, 0) / grid.sq[i], gs = x(i, 1) / grid.sq[i];
        for (int j = 0; j < grid.n_theta; ++j)
          sig[i * grid.n_theta + j] += gc * std::cos(n * grid.theta[j]) + gs * std::sin(n * grid.theta[j]);
      }
    }
    return sig;
  }
};

inline OnePatchOperator solve_onepatch(ProblemKind kind, const ZernikeBasis& basis, const FineGrid& grid,
                                       int workers = 1) {
  if (std::abs(basis.epsilon - grid.epsilon) > 1e-15 * grid.epsilon)
    throw std::invalid_argument("solve_onepatch: basis and grid radii differ");
  OnePatchOperator op;
  op.kind = kind;
  op.epsilon = grid.epsilon;
  op.M = basis.M;
  op.basis = basis;
  op.grid = grid;
  const int nm = grid.n_modes();
  auto A = build_modal_systems(kind, grid, nm, workers);
  op.lu.resize(nm + 1);
  parallel_for(nm + 1, workers, [&](int n) { op.lu[n].factor(std::move(A[n])); });
  op.B.resize(grid.n_f(), basis.K);
  std::vector<double> row(basis.K);
  Eigen::MatrixXd Qf(grid.n_f(), basis.K);
  for (int i = 0; i < grid.n_f(); ++i) {
    basis.eval_all(grid.node_t(i), grid.node_theta(i), row.data());
    for (int j = 0; j < basis.K; ++j) Qf(i, j) = row[j];
  }
  parallel_for(basis.K, workers, [&](int j) { op.B.col(j) = op.solve(Qf.col(j)); });
  Eigen::Map<const Eigen::RowVectorXd> w(grid.w.data(), grid.n_f());
  op.I = w * op.B;
  return op;
}

// Applies the one-patch operator S to a fine-grid density at arbitrary patch-local points (t, theta).
// Rows for the radial targets are built once and can be reused for many densities.
struct LocalEvaluator {
  const FineGrid* g = nullptr;
  int nmax = 0;
  std::vector<double> t_targets;
  std::vector<Eigen::MatrixXd> rows;  // per radial target

  LocalEvaluator() = default;
  LocalEvaluator(ProblemKind kind, const FineGrid& grid, std::vector<double> radii, int workers = 1)
      : g(&grid), nmax(grid.n_modes()), t_targets(std::move(radii)) {
    rows.resize(t_targets.size());
    parallel_for(static_cast<int>(t_targets.size()), workers,
                 [&](int i) { rows[i] = modal_rows(kind, grid, t_targets[i], nmax); });
  }

  // values[r * thetas.size() + a] = (S sigma)(t_targets[r], thetas[a])
  Eigen::VectorXd apply(const Eigen::VectorXd& sigma, const std::vector<double>& thetas) const {
    ModalData d = angular_transform(*g, sigma, nmax);
    for (int n = 0; n <= nmax; ++n)
      for (int i = 0; i < g->n_rad(); ++i) {
        d.c[n][i] *= g->sq[i];
        d.s[n][i] *= g->sq[i];
      }
    const int na = static_cast<int>(thetas.size());
    Eigen::VectorXd out = Eigen::VectorXd::Zero(t_targets.size() * na);
    for (std::size_t r = 0; r < t_targets.size(); ++r)
      for (int n = 0; n <= nmax; ++n) {
        double vc = rows[r].row(n).dot(d.c[n]), vs = rows[r].row(n).dot(d.s[n]);
        for (int a = 0; a < na; ++a) out[r * na + a] += vc * std::cos(n * thetas[a]) + vs * std::sin(n * thetas[a]);
      }
    return out;
  }
};

// Independent Legendre-Fourier grid on a patch: per-panel Gauss-Legendre of order k + 3 in t,
// n_theta + 1 angles offset by half a step.
struct CheckGrid {
  std::vector<double> t, wt, theta;
  double wtheta = 0;
};

inline CheckGrid make_check_grid(const FineGrid& g) {
  CheckGrid c;
  auto gl = gauss_legendre(g.k + 3);
  for (int p = 0; p < g.m; ++p) {
    double lo = g.a[p], hi = g.a[p + 1], h = 0.5 * (hi - lo);
    for (std::size_t l = 0; l < gl.size(); ++l) {
      double tt = lo + h * (1.0 + gl.nodes[l]);
      c.t.push_back(tt);
      c.wt.push_back(h * gl.weights[l] * std::sin(tt));
    }
  }
  const int na = g.n_theta + 1;
  for (int a = 0; a < na; ++a) c.theta.push_back(2.0 * std::numbers::pi * (a + 0.5) / na);
  c.wtheta = 2.0 * std::numbers::pi / na;
  return c;
}

inline double cap_area(double epsilon) { return 4.0 * std::numbers::pi * std::pow(std::sin(0.5 * epsilon), 2); }

// ||S(B c) - Q c||_{L2(patch)} / |patch| on a grid that does not overlap the collocation grid.
class OnePatchResidual {
 public:
  OnePatchResidual(const OnePatchOperator& op, int workers = 1)
      : op_(&op), cg_(make_check_grid(op.grid)), ev_(op.kind, op.grid, cg_.t, workers) {
    const int na = static_cast<int>(cg_.theta.size());
    Qc_.resize(cg_.t.size() * na, op.K());
    std::vector<double> row(op.K());
    for (std::size_t r = 0; r < cg_.t.size(); ++r)
      for (int a = 0; a < na; ++a) {
        op.basis.eval_all(cg_.t[r], cg_.theta[a], row.data());
        for (int j = 0; j < op.K(); ++j) Qc_(r * na + a, j) = row[j];
      }
  }

  double operator()(const Eigen::VectorXd& coeffs) const {
    Eigen::VectorXd sig = op_->B * coeffs;
    Eigen::VectorXd r = ev_.apply(sig, cg_.theta) - Qc_ * coeffs;
    const int na = static_cast<int>(cg_.theta.size());
    double s = 0;
    for (std::size_t i = 0; i < cg_.t.size(); ++i)
      for (int a = 0; a < na; ++a) s += cg_.wt[i] * cg_.wtheta * r[i * na + a] * r[i * na + a];
    return std::sqrt(s) / cap_area(op_->epsilon);
  }

  const CheckGrid& grid() const { return cg_; }

 private:
  const OnePatchOperator* op_;
  CheckGrid cg_;
  LocalEvaluator ev_;
  Eigen::MatrixXd Qc_;
};

inline double residual_onepatch(const OnePatchOperator& op, const Eigen::VectorXd& coeffs) {
  return OnePatchResidual(op)(coeffs);
}

// ---- cache ----------------------------------------------------------------------------

struct OnePatchKey {
  ProblemKind kind = ProblemKind::interior;
  double epsilon = 0;
  int M = 15, m = 13, k = 20, n_theta = 32;

  std::string filename() const {
    std::ostringstream s;
    s.precision(17);
    std::uint64_t bits;
    std::memcpy(&bits, &epsilon, sizeof bits);
    s << "onepatch_" << to_string(kind) << "_e" << std::hex << bits << std::dec << "_M" << M << "_m" << m << "_k" << k
      << "_nt" << n_theta << ".bin";
    return s.str();
  }
};

inline OnePatchKey key_of(const OnePatchOperator& op) {
  return {op.kind, op.epsilon, op.M, op.grid.m, op.grid.k, op.grid.n_theta};
}

inline constexpr std::uint32_t kOnePatchCacheVersion = 1;

namespace detail {
template <class T>
void put(std::ostream& o, const T& v) {
  o.write(reinterpret_cast<const char*>(&v), sizeof v);
}
template <class T>
T get(std::istream& i) {
  T v;
  i.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!i) throw std::runtime_error("cache file truncated");
  return v;
}
inline void put_mat(std::ostream& o, const Eigen::MatrixXd& A) {
  put<std::int64_t>(o, A.rows());
  put<std::int64_t>(o, A.cols());
  o.write(reinterpret_cast<const char*>(A.data()), sizeof(double) * A.size());
}
inline Eigen::MatrixXd get_mat(std::istream& i) {
  auto r = get<std::int64_t>(i), c = get<std::int64_t>(i);
  Eigen::MatrixXd A(r, c);
  i.read(reinterpret_cast<char*>(A.data()), sizeof(double) * A.size());
  if (!i) throw std::runtime_error("cache file truncated");
  return A;
}
}  // namespace detail

inline void save_onepatch(const OnePatchOperator& op, const std::string& path) {
  std::ofstream o(path, std::ios::binary);
  if (!o) throw std::runtime_error("cannot write cache file '" + path + "'");
  o.write("NESCOP", 6);
  detail::put(o, kOnePatchCacheVersion);
  auto key = key_of(op);
  detail::put<std::int32_t>(o, static_cast<std::int32_t>(key.kind));
  detail::put(o, key.epsilon);
  detail::put<std::int32_t>(o, key.M);
  detail::put<std::int32_t>(o, key.m);
  detail::put<std::int32_t>(o, key.k);
  detail::put<std::int32_t>(o, key.n_theta);
  detail::put_mat(o, op.B);
  detail::put_mat(o, op.I);
  detail::put<std::int32_t>(o, static_cast<std::int32_t>(op.lu.size()));
  for (const auto& f : op.lu) {
    detail::put_mat(o, f.packed());
    for (int p : f.pivots()) detail::put<std::int32_t>(o, p);
  }
}

// Loads a cached operator; throws if the file is missing, of another version, or keyed differently.
inline OnePatchOperator load_onepatch(const std::string& path, const OnePatchKey& want) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open cache file '" + path + "'");
  char magic[6];
  in.read(magic, 6);
  if (!in || std::string(magic, 6) != "NESCOP") throw std::runtime_error("not a one-patch cache file");
  if (detail::get<std::uint32_t>(in) != kOnePatchCacheVersion) throw std::runtime_error("cache version mismatch");
  OnePatchKey k;
  k.kind = static_cast<ProblemKind>(detail::get<std::int32_t>(in));
  k.epsilon = detail::get<double>(in);
  k.M = detail::get<std::int32_t>(in);
  k.m = detail::get<std::int32_t>(in);
  k.k = detail::get<std::int32_t>(in);
  k.n_theta = detail::get<std::int32_t>(in);
  if (k.kind != want.kind || k.epsilon != want.epsilon || k.M != want.M || k.m != want.m || k.k != want.k ||
      k.n_theta != want.n_theta)
    throw std::runtime_error("cache key mismatch");
  OnePatchOperator op;
  op.kind = k.kind;
  op.epsilon = k.epsilon;
  op.M = k.M;
  op.basis = build_basis(k.M, k.epsilon);
  op.grid = build_fine_grid(k.epsilon, k.m, k.k, k.n_theta);
  op.B = detail::get_mat(in);
  op.I = detail::get_mat(in);
  int nl = detail::get<std::int32_t>(in);
  op.lu.resize(nl);
  for (auto& f : op.lu) {
    Eigen::MatrixXd P = detail::get_mat(in);
    std::vector<int> piv(P.rows());
    for (auto& p : piv) p = detail::get<std::int32_t>(in);
    f.set(std::move(P), std::move(piv));
  }
  if (op.B.rows() != op.grid.n_f() || op.B.cols() != op.basis.K) throw std::runtime_error("cache shape mismatch");
  return op;
}

// Loads from cache_dir when a matching file exists, otherwise builds and (if cache_dir is set) stores.
inline OnePatchOperator get_onepatch(const OnePatchKey& key, const std::string& cache_dir, int workers,
                                     bool* from_cache = nullptr) {
  if (from_cache) *from_cache = false;
  std::string path;
  if (!cache_dir.empty()) {
    path = (std::filesystem::path(cache_dir) / key.filename()).string();
    if (std::filesystem::exists(path)) {
      try {
        auto op = load_onepatch(path, key);
        if (from_cache) *from_cache = true;
        return op;
      } catch (const std::exception&) {
        // stale or foreign file: rebuild below
      }
    }
  }
  auto op = solve_onepatch(key.kind, build_basis(key.M, key.epsilon),
                           build_fine_grid(key.epsilon, key.m, key.k, key.n_theta), workers);
  if (!path.empty()) {
    std::filesystem::create_directories(cache_dir);
    save_onepatch(op, path);
  }
  return op;
}

}  // namespace nesc
