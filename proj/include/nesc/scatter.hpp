#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <memory>
#include <mutex>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "nesc/dense.hpp"
#include "nesc/greens.hpp"
#include "nesc/onepatch.hpp"
#include "nesc/parallel.hpp"
#include "nesc/quadrature.hpp"
#include "nesc/skeleton.hpp"
#include "nesc/sphere_geom.hpp"
#include "nesc/tree.hpp"

namespace nesc {

struct PointSoA {
  std::vector<double> x, y, z;

  void reserve(std::size_t n) {
    x.reserve(n);
    y.reserve(n);
    z.reserve(n);
  }
  void push(const Vec3& p) {
    x.push_back(p[0]);
    y.push_back(p[1]);
    z.push_back(p[2]);
  }
  void clear() {
    x.clear();
    y.clear();
    z.clear();
  }
  int size() const { return static_cast<int>(x.size()); }
};

struct ScatterOptions {
  double id_tol = 1e-11;
  double incoming_tol = 1e-8;
  bool per_level_T = false;
  int workers = 1;
  double kernel_cost = 4.0;  // one kernel evaluation in multiply-adds, for the grid/direct choice
  std::string cache_dir;
};

struct StageTiming {
  double outgoing = 0, incoming = 0, evaluate = 0, analyze = 0;
  int matvecs = 0;

  double total() const { return outgoing + incoming + evaluate + analyze; }
};

struct ScatterStats {
  int grid_boxes = 0, direct_boxes = 0;
  double mean_grid_size = 0;
  std::vector<double> level_radius;  // per level, coarse to fine
  std::vector<int> level_rank;
  bool outgoing_cached = false;
  double setup_seconds = 0;
};

namespace detail {
struct CheckData {
  CheckGrid grid;
  LocalEvaluator eval;
};
}  // namespace detail

struct ScatterState {
  ProblemKind kind = ProblemKind::interior;
  PatchLayout layout;
  std::shared_ptr<const OnePatchOperator> op;
  ScatterOptions opt;
  std::vector<OutgoingOperator> outgoing;  // [0] is the base operator
  std::vector<int> level_op;               // outgoing operator used by the interaction lists of each level
  SphereTree tree;
  std::vector<GroupGrid> grids;
  std::vector<char> grid_mode;  // per box
  std::vector<int> grid_boxes;
  std::vector<std::vector<Vec3>> znodes;  // Zernike sampling nodes of every patch
  std::vector<PointSoA> skel;             // per outgoing operator, patch-major skeleton positions
  Eigen::VectorXd ones_rhs;               // analyze(1)
  ScatterStats stats;
  mutable StageTiming timing;

  int N() const { return layout.N; }
  int K() const { return op->K(); }
  int Kstar() const { return op->basis.num_nodes(); }

  const detail::CheckData& check() const {
    std::lock_guard<std::mutex> g(*check_mu_);
    if (!check_) {
      auto cg = make_check_grid(op->grid);
      auto ev = LocalEvaluator(kind, op->grid, cg.t, opt.workers);
      check_ = std::make_shared<detail::CheckData>(detail::CheckData{std::move(cg), std::move(ev)});
    }
    return *check_;
  }

 private:
  mutable std::shared_ptr<detail::CheckData> check_;
  std::shared_ptr<std::mutex> check_mu_ = std::make_shared<std::mutex>();
};

namespace detail {

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline std::vector<int> ilist_sources(const SphereTree& T, int box) {
  std::vector<int> src;
  for (int c : T.boxes[box].ilist) src.insert(src.end(), T.boxes[c].members.begin(), T.boxes[c].members.end());
  std::sort(src.begin(), src.end());
  return src;
}

inline std::vector<int> neighbor_sources(const SphereTree& T, int box) {
  std::vector<int> src;
  for (int c : T.boxes[box].neighbors) src.insert(src.end(), T.boxes[c].members.begin(), T.boxes[c].members.end());
  std::sort(src.begin(), src.end());
  return src;
}

// Skeleton points and strengths of the listed patches, in list order.
inline void gather(const PointSoA& sk, const Eigen::MatrixXd& rho, const std::vector<int>& patches, PointSoA& pts,
                   std::vector<double>& s) {
  const int p = static_cast<int>(rho.rows());
  pts.clear();
  s.clear();
  pts.reserve(patches.size() * p);
  s.reserve(patches.size() * p);
  for (int j : patches) {
    const std::size_t o = static_cast<std::size_t>(j) * p;
    pts.x.insert(pts.x.end(), sk.x.begin() + o, sk.x.begin() + o + p);
    pts.y.insert(pts.y.end(), sk.y.begin() + o, sk.y.begin() + o + p);
    pts.z.insert(pts.z.end(), sk.z.begin() + o, sk.z.begin() + o + p);
    s.insert(s.end(), rho.col(j).data(), rho.col(j).data() + p);
  }
}

}  // namespace detail

inline ScatterState make_scatter_state(ProblemKind kind, const PatchLayout& layout,
                                       std::shared_ptr<const OnePatchOperator> op, const ScatterOptions& opt = {}) {
  auto t0 = std::chrono::steady_clock::now();
  if (!op) throw std::invalid_argument("make_scatter_state: missing one-patch operator");
  if (op->kind != kind) throw std::invalid_argument("make_scatter_state: one-patch operator is for the other problem");
  if (std::abs(op->epsilon - layout.epsilon) > 1e-14 * layout.epsilon)
    throw std::invalid_argument("make_scatter_state: one-patch radius differs from the layout");
  if (!(opt.id_tol > 0 && opt.id_tol < 1) || !(opt.incoming_tol > 0 && opt.incoming_tol < 1))
    throw std::invalid_argument("make_scatter_state: tolerances must lie in (0, 1)");
  ScatterState S;
  S.kind = kind;
  S.layout = layout;
  S.op = op;
  S.opt = opt;
  const double eps = layout.epsilon;
  const int N = layout.N;

  OutgoingOperator base =
      get_outgoing(*op, opt.id_tol, -1, opt.cache_dir, opt.workers, &S.stats.outgoing_cached);
  S.tree = build_tree(layout);
  IncomingOptions iopt;
  iopt.tol = opt.incoming_tol;
  S.grids = build_incoming_grids(S.tree, layout, kind, iopt);

  // grid or direct evaluation per box
  const int Ks = op->basis.num_nodes();
  S.grid_mode.assign(S.tree.boxes.size(), 0);
  double qsum = 0;
  for (std::size_t id = 0; id < S.tree.boxes.size(); ++id) {
    const auto& b = S.tree.boxes[id];
    if (b.ilist.empty()) continue;
    const auto& gg = S.grids[id];
    // skeleton sources must also be valid at the nearest point of the disk
    bool ok = gg.usable && gg.nearest + eps - gg.circle.radius >= 2 * eps * (1 - 1e-12);
    double n_src = 0;
    for (int c : b.ilist) n_src += static_cast<double>(S.tree.boxes[c].members.size());
    const double ms = static_cast<double>(b.members.size()), p = base.p(), kc = opt.kernel_cost;
    if (ok) {
      const double q = gg.grid.size();
      double grid_cost = kc * n_src * p * q + ms * Ks * (0.5 * q + 20) + q * (gg.grid.n_a + gg.grid.n_r);
      double direct_cost = kc * n_src * p * ms * Ks;
      ok = grid_cost < direct_cost;
    }
    if (ok) {
      S.grid_mode[id] = 1;
      S.grid_boxes.push_back(static_cast<int>(id));
      qsum += gg.grid.size();
    }
  }
  S.stats.grid_boxes = static_cast<int>(S.grid_boxes.size());
  S.stats.mean_grid_size = S.grid_boxes.empty() ? 0 : qsum / S.grid_boxes.size();
  for (std::size_t id = 0; id < S.tree.boxes.size(); ++id)
    if (!S.tree.boxes[id].ilist.empty() && !S.grid_mode[id]) ++S.stats.direct_boxes;

  // smallest source-to-target distance of each level, measured from the source centres
  const int D = S.tree.depth;
  std::vector<double> r(D + 1, std::numbers::pi);
  for (int l = 0; l <= D; ++l)
    for (int id : S.tree.levels[l]) {
      const auto& b = S.tree.boxes[id];
      if (b.ilist.empty()) continue;
      for (int c : b.ilist)
        for (int j : S.tree.boxes[c].members) {
          if (S.grid_mode[id]) {
            r[l] = std::min(r[l], sphere_dist(S.grids[id].circle.center, layout.centers[j]) - S.grids[id].circle.radius);
          } else {
            for (int i : b.members) r[l] = std::min(r[l], sphere_dist(layout.centers[i], layout.centers[j]) - eps);
          }
        }
    }
  for (int l = 1; l <= D; ++l) r[l] = std::min(r[l], r[l - 1]);
  for (double& v : r) v = std::max(v, 2 * eps);
  S.outgoing.push_back(std::move(base));
  S.level_op.assign(D + 1, 0);
  if (opt.per_level_T) {
    std::vector<double> radii(r.rbegin(), r.rend());  // finest first
    auto lv = build_outgoing_per_level(*op, S.outgoing[0], radii, opt.workers);
    for (int l = 0; l <= D; ++l) {
      const auto& o = lv[D - l];
      if (o.p() == S.outgoing[0].p() && o.skeleton == S.outgoing[0].skeleton) continue;
      S.outgoing.push_back(o);
      S.level_op[l] = static_cast<int>(S.outgoing.size()) - 1;
    }
  }
  S.stats.level_radius = r;
  for (int l = 0; l <= D; ++l) S.stats.level_rank.push_back(S.outgoing[S.level_op[l]].p());

  S.znodes.resize(N);
  for (int i = 0; i < N; ++i) {
    S.znodes[i].resize(Ks);
    for (int k = 0; k < Ks; ++k) S.znodes[i][k] = layout.frames[i].point(op->basis.t[k], op->basis.theta[k]);
  }
  for (const auto& o : S.outgoing) {
    PointSoA sk;
    sk.reserve(static_cast<std::size_t>(N) * o.p());
    for (int j = 0; j < N; ++j)
      for (int m = 0; m < o.p(); ++m) sk.push(layout.frames[j].point(o.t[m], o.theta[m]));
    S.skel.push_back(std::move(sk));
  }
  S.ones_rhs = op->basis.analyze(Eigen::VectorXd::Ones(Ks));
  S.stats.setup_seconds = detail::seconds_since(t0);
  return S;
}

// Outgoing strengths of every patch plus the expansions held by the grid boxes.
struct IncomingField {
  std::vector<Eigen::MatrixXd> rho;    // per outgoing operator, p x N
  std::vector<Eigen::MatrixXd> coeff;  // per box; empty unless the box works on a grid
};

inline IncomingField build_incoming_field(const ScatterState& S, const Eigen::MatrixXd& F) {
  if (F.rows() != S.K() || F.cols() != S.N()) throw std::invalid_argument("build_incoming_field: shape mismatch");
  auto t0 = std::chrono::steady_clock::now();
  IncomingField fld;
  for (const auto& o : S.outgoing) fld.rho.push_back(o.T * F);
  S.timing.outgoing += detail::seconds_since(t0);
  t0 = std::chrono::steady_clock::now();
  fld.coeff.resize(S.tree.boxes.size());
  parallel_for(static_cast<int>(S.grid_boxes.size()), S.opt.workers, [&](int n) {
    const int id = S.grid_boxes[n];
    const int o = S.level_op[S.tree.boxes[id].level];
    const auto& g = S.grids[id].grid;
    PointSoA pts;
    std::vector<double> s;
    detail::gather(S.skel[o], fld.rho[o], detail::ilist_sources(S.tree, id), pts, s);
    Eigen::VectorXd v(g.size());
    for (int q = 0; q < g.size(); ++q)
      v[q] = kernel_sum(S.kind, g.nodes[q], pts.x.data(), pts.y.data(), pts.z.data(), s.data(), pts.size());
    fld.coeff[id] = g.coefficients(v);
  });
  S.timing.incoming += detail::seconds_since(t0);
  return fld;
}

// Adds sum_{j != i} S_ij sigma_j at points of patch i (points must lie on the patch).
inline void incoming_at(const ScatterState& S, const IncomingField& fld, int i, const std::vector<Vec3>& pts,
                        double* out) {
  const int np = static_cast<int>(pts.size());
  PointSoA src;
  std::vector<double> s;
  auto direct = [&](int o, const std::vector<int>& patches) {
    if (patches.empty()) return;
    detail::gather(S.skel[o], fld.rho[o], patches, src, s);
    for (int k = 0; k < np; ++k)
      out[k] += kernel_sum(S.kind, pts[k], src.x.data(), src.y.data(), src.z.data(), s.data(), src.size());
  };
  for (int l = 0; l <= S.tree.depth; ++l) {
    const int id = S.tree.box_of[l][i];
    if (S.tree.boxes[id].ilist.empty()) continue;
    if (S.grid_mode[id]) {
      const auto& g = S.grids[id].grid;
      const auto& C = fld.coeff[id];
      for (int k = 0; k < np; ++k) out[k] += g.eval(C, pts[k]);
    } else {
      direct(S.level_op[l], detail::ilist_sources(S.tree, id));
    }
  }
  direct(0, detail::neighbor_sources(S.tree, S.tree.box_of[S.tree.depth][i]));
}

// y = x + P sum_{j != i} S_ij B x_j, blocks of K per patch.
inline void apply_system_fast(const ScatterState& S, const Eigen::VectorXd& x, Eigen::VectorXd& y) {
  const int K = S.K(), N = S.N(), Ks = S.Kstar();
  if (x.size() != static_cast<Eigen::Index>(K) * N) throw std::invalid_argument("apply_system_fast: size mismatch");
  Eigen::Map<const Eigen::MatrixXd> F(x.data(), K, N);
  IncomingField fld = build_incoming_field(S, F);
  auto t0 = std::chrono::steady_clock::now();
  Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(Ks, N);
  parallel_for(N, S.opt.workers, [&](int i) { incoming_at(S, fld, i, S.znodes[i], acc.col(i).data()); });
  S.timing.evaluate += detail::seconds_since(t0);
  t0 = std::chrono::steady_clock::now();
  y.resize(x.size());
  Eigen::Map<Eigen::MatrixXd> Y(y.data(), K, N);
  Y.noalias() = S.op->basis.P * acc;
  Y += F;
  S.timing.analyze += detail::seconds_since(t0);
  ++S.timing.matvecs;
}

// Same map by direct fine-grid sums: O(n_f K* N^2).
inline void apply_system_direct(const ScatterState& S, const Eigen::VectorXd& x, Eigen::VectorXd& y) {
  const int K = S.K(), N = S.N(), Ks = S.Kstar();
  const auto& op = *S.op;
  const auto& g = op.grid;
  const int nf = g.n_f();
  if (x.size() != static_cast<Eigen::Index>(K) * N) throw std::invalid_argument("apply_system_direct: size mismatch");
  Eigen::Map<const Eigen::MatrixXd> F(x.data(), K, N);
  Eigen::Map<const Eigen::VectorXd> w(g.w.data(), nf);
  Eigen::MatrixXd SW = (op.B * F).array().colwise() * w.array();
  PointSoA all;
  all.reserve(static_cast<std::size_t>(N) * nf);
  for (int j = 0; j < N; ++j)
    for (int l = 0; l < nf; ++l) all.push(S.layout.frames[j].point(g.node_t(l), g.node_theta(l)));
  Eigen::MatrixXd acc(Ks, N);
  parallel_for(N, S.opt.workers, [&](int i) {
    const std::size_t lo = static_cast<std::size_t>(i) * nf, hi = lo + nf, tot = static_cast<std::size_t>(N) * nf;
    for (int k = 0; k < Ks; ++k) {
      const Vec3& p = S.znodes[i][k];
      acc(k, i) = kernel_sum(S.kind, p, all.x.data(), all.y.data(), all.z.data(), SW.data(), static_cast<int>(lo)) +
                  kernel_sum(S.kind, p, all.x.data() + hi, all.y.data() + hi, all.z.data() + hi, SW.data() + hi,
                             static_cast<int>(tot - hi));
    }
  });
  y.resize(x.size());
  Eigen::Map<Eigen::MatrixXd> Y(y.data(), K, N);
  Y.noalias() = op.basis.P * acc;
  Y += F;
}

// ---- solve and post-processing ----------------------------------------------------------

inline double mfpt_from_isigma(double I_sigma) { return 1.0 / (3.0 * I_sigma) - 0.6; }

struct SolveResult {
  ProblemKind kind = ProblemKind::interior;
  Eigen::MatrixXd coeffs;  // K x N
  double I_sigma = 0, J = std::numeric_limits<double>::quiet_NaN(), mu = std::numeric_limits<double>::quiet_NaN();
  double D = std::numeric_limits<double>::quiet_NaN();
  int iterations = 0;
  bool converged = false;
  std::vector<double> history;
  std::vector<double> iteration_seconds;
  double solve_seconds = 0;
  StageTiming timing;
};

inline void fill_scalars(SolveResult& r, const OnePatchOperator& op) {
  r.I_sigma = (op.I * r.coeffs).sum();
  if (r.kind == ProblemKind::exterior) {
    r.J = -r.I_sigma;
  } else {
    r.D = -r.I_sigma;
    if (r.D == 0.0) throw std::runtime_error("solve: D = -I_sigma vanished");
    r.mu = mfpt_from_isigma(r.I_sigma);
  }
}

inline SolveResult solve(const ScatterState& S, double gmres_tol, int max_iter,
                         const std::function<void(int, double)>& progress = {}) {
  if (!(gmres_tol > 0 && gmres_tol < 1)) throw std::invalid_argument("solve: gmres_tol must lie in (0, 1)");
  if (max_iter < 1) throw std::invalid_argument("solve: max_iter must be positive");
  const int K = S.K(), N = S.N();
  Eigen::VectorXd b(static_cast<Eigen::Index>(K) * N);
  for (int i = 0; i < N; ++i) b.segment(static_cast<Eigen::Index>(i) * K, K) = S.ones_rhs;
  SolveResult r;
  r.kind = S.kind;
  const StageTiming before = S.timing;
  auto t0 = std::chrono::steady_clock::now();
  auto last = t0;
  auto res = gmres([&](const Eigen::VectorXd& x, Eigen::VectorXd& y) { apply_system_fast(S, x, y); }, b, gmres_tol,
                   max_iter, [&](int k, double rel) {
                     auto now = std::chrono::steady_clock::now();
                     r.iteration_seconds.push_back(std::chrono::duration<double>(now - last).count());
                     last = now;
                     if (progress) progress(k, rel);
                   });
  r.solve_seconds = detail::seconds_since(t0);
  r.timing.outgoing = S.timing.outgoing - before.outgoing;
  r.timing.incoming = S.timing.incoming - before.incoming;
  r.timing.evaluate = S.timing.evaluate - before.evaluate;
  r.timing.analyze = S.timing.analyze - before.analyze;
  r.timing.matvecs = S.timing.matvecs - before.matvecs;
  r.coeffs = Eigen::Map<const Eigen::MatrixXd>(res.x.data(), K, N);
  r.iterations = res.iterations;
  r.converged = res.converged;
  r.history = std::move(res.history);
  fill_scalars(r, *S.op);
  return r;
}

inline Eigen::VectorXd recover_density(const ScatterState& S, const SolveResult& r, int i) {
  if (i < 0 || i >= S.N()) throw std::out_of_range("recover_density: patch index");
  return S.op->B * r.coeffs.col(i);
}

// ||S sigma_i + sum_{j != i} S_ij sigma_j - 1||_{L2(patch i)} / |patch| for each listed patch.
inline std::vector<double> residuals_l2(const ScatterState& S, const Eigen::MatrixXd& coeffs,
                                        const std::vector<int>& patches) {
  const auto& cd = S.check();
  const auto& cg = cd.grid;
  const int nt = static_cast<int>(cg.t.size()), na = static_cast<int>(cg.theta.size());
  IncomingField fld = build_incoming_field(S, coeffs);
  std::vector<double> out(patches.size());
  const double area = cap_area(S.layout.epsilon);
  parallel_for(static_cast<int>(patches.size()), S.opt.workers, [&](int n) {
    const int i = patches[n];
    if (i < 0 || i >= S.N()) throw std::out_of_range("residuals_l2: patch index");
    std::vector<Vec3> pts;
    pts.reserve(static_cast<std::size_t>(nt) * na);
    for (int a = 0; a < nt; ++a)
      for (int b = 0; b < na; ++b) pts.push_back(S.layout.frames[i].point(cg.t[a], cg.theta[b]));
    Eigen::VectorXd v = cd.eval.apply(S.op->B * coeffs.col(i), cg.theta);
    incoming_at(S, fld, i, pts, v.data());
    double s = 0;
    for (int a = 0; a < nt; ++a)
      for (int b = 0; b < na; ++b) s += cg.wt[a] * cg.wtheta * std::pow(v[a * na + b] - 1.0, 2);
    out[n] = std::sqrt(s) / area;
  });
  return out;
}

inline double residual_l2(const ScatterState& S, const SolveResult& r, int i) {
  return residuals_l2(S, r.coeffs, {i})[0];
}

// ---- off-surface field ------------------------------------------------------------------

namespace detail {

// Single layer of one patch at an off-surface point by adaptive quadrature of the trigonometric /
// panel-polynomial interpolant of its fine-grid density.
inline double near_patch_potential(ProblemKind kind, const FineGrid& g, const Frame& fr, const Eigen::VectorXd& sigma,
                                   const Vec3& x, double tol) {
  const int nm = g.n_modes();
  ModalData md = angular_transform(g, sigma, nm);
  // interpolate sigma * sqrt(eps - t) on the last panel
  for (int n = 0; n <= nm; ++n)
    for (int i = 0; i < g.n_rad(); ++i) {
      md.c[n][i] *= g.sq[i];
      md.s[n][i] *= g.sq[i];
    }
  const Vec3 xl(x.dot(fr.e1), x.dot(fr.e2), x.dot(fr.c));
  const double rx = std::hypot(xl[0], xl[1]), thx = std::atan2(xl[1], xl[0]), x2 = xl.squaredNorm();
  std::vector<double> lag(g.k), cn(nm + 1), sn(nm + 1);
  double total = 0;
  for (int p = 0; p < g.m; ++p) {
    const bool last = (p == g.m - 1);
    // on the last panel this is sigma * sqrt(eps - t'), integrated below in s with t' = eps - s^2
    auto ring = [&](double tp) {
      g.lagrange(p, tp, lag.data());
      for (int n = 0; n <= nm; ++n) {
        double a = 0, b = 0;
        for (int l = 0; l < g.k; ++l) {
          a += lag[l] * md.c[n][p * g.k + l];
          b += lag[l] * md.s[n][p * g.k + l];
        }
        cn[n] = a;
        sn[n] = b;
      }
      const double st = std::sin(tp), ct = std::cos(tp);
      const double dmin = std::sqrt(std::max(x2 + 1 - 2 * (xl[2] * ct + rx * st), 1e-300));
      const int nth = std::min(200000, 2 * g.n_theta + static_cast<int>(std::ceil(40.0 * st / dmin)));
      double sum = 0;
      for (int a = 0; a < nth; ++a) {
        const double th = thx + 2.0 * std::numbers::pi * a / nth;
        const Vec3 y(st * std::cos(th), st * std::sin(th), ct);
        double sg = 0;
        for (int n = 0; n <= nm; ++n) sg += cn[n] * std::cos(n * th) + sn[n] * std::sin(n * th);
        sum += green_offsurface(kind, xl, y) * sg;
      }
      return sum * 2.0 * std::numbers::pi / nth * st;
    };
    if (last)
      total += adaptive_quad([&](double u) { return 2 * ring(g.epsilon - u * u); }, 0, std::sqrt(g.epsilon - g.a[p]), tol);
    else
      total += adaptive_quad(ring, g.a[p], g.a[p + 1], tol);
  }
  return total;
}

// Distance from an off-surface point to the closed cap of patch i.
inline double cap_distance(const PatchLayout& L, int i, const Vec3& x) {
  const double r = x.norm();
  const Vec3 u = x / r;
  const double a = sphere_dist(L.centers[i], u);
  if (a <= L.epsilon) return std::abs(r - 1.0);
  const Frame& fr = L.frames[i];
  auto [t, th] = fr.coords(u);
  return (x - fr.point(L.epsilon, th)).norm();
}

}  // namespace detail

struct FieldOptions {
  bool near = true;           // adaptive quadrature for points close to a patch
  double near_factor = 0.5;   // "close" means within near_factor * epsilon of the patch
  double near_tol = 1e-12;
  bool complement = false;    // exterior: report 1 - u
  bool raw = false;           // report the single layer itself (u or v)
};

// u (exterior) or the MFPT v_bar = (v - 1) / (3 D) + (1 - |x|^2) / 6 (interior) at off-surface points.
inline std::vector<double> evaluate_field(const ScatterState& S, const SolveResult& r, const std::vector<Vec3>& pts,
                                          const FieldOptions& fo = {}) {
  const auto& op = *S.op;
  const auto& g = op.grid;
  const int N = S.N(), nf = g.n_f();
  const double eps = S.layout.epsilon;
  for (const auto& x : pts) {
    double rx = x.norm();
    if (S.kind == ProblemKind::interior ? !(rx < 1.0) : !(rx > 1.0))
      throw std::invalid_argument("evaluate_field: point on the wrong side of the sphere");
  }
  Eigen::MatrixXd sig = op.B * r.coeffs;
  Eigen::Map<const Eigen::VectorXd> w(g.w.data(), nf);
  Eigen::MatrixXd SW = sig.array().colwise() * w.array();
  std::vector<PointSoA> nodes(N);
  for (int j = 0; j < N; ++j) {
    nodes[j].reserve(nf);
    for (int l = 0; l < nf; ++l) nodes[j].push(S.layout.frames[j].point(g.node_t(l), g.node_theta(l)));
  }
  std::vector<double> out(pts.size());
  parallel_for(static_cast<int>(pts.size()), S.opt.workers, [&](int n) {
    const Vec3& x = pts[n];
    double v = 0;
    for (int j = 0; j < N; ++j) {
      const double d = (x - S.layout.centers[j]).norm() <= 3 * eps ? detail::cap_distance(S.layout, j, x) : 1.0;
      if (d < fo.near_factor * eps) {
        if (!fo.near && d < 0.1 * eps)
          throw std::invalid_argument("evaluate_field: point within 0.1 epsilon of a patch");
        if (fo.near) {
          v += detail::near_patch_potential(S.kind, g, S.layout.frames[j], sig.col(j), x, fo.near_tol);
          continue;
        }
      }
      const auto& P = nodes[j];
      v += offsurface_sum(S.kind, x, P.x.data(), P.y.data(), P.z.data(), SW.col(j).data(), nf);
    }
    if (fo.raw)
      out[n] = v;
    else if (S.kind == ProblemKind::interior)
      out[n] = (v - 1.0) / (3.0 * r.D) + (1.0 - x.squaredNorm()) / 6.0;
    else
      out[n] = fo.complement ? 1.0 - v : v;
  });
  return out;
}

// Volume average of v_bar by Gauss-Legendre in r times a Gauss-Legendre (cos theta) x trapezoid (phi) grid.
inline double average_mfpt_volume(const ScatterState& S, const SolveResult& r, int n_rad = 3, int n_lat = 80) {
  if (S.kind != ProblemKind::interior) throw std::invalid_argument("average_mfpt_volume: interior problems only");
  auto gr = gauss_legendre(n_rad), gz = gauss_legendre(n_lat);
  const int n_lon = 2 * n_lat;
  std::vector<Vec3> pts;
  std::vector<double> wts;
  for (int a = 0; a < n_rad; ++a) {
    const double rr = 0.5 * (1 + gr.nodes[a]), wr = 0.5 * gr.weights[a] * rr * rr;
    for (int b = 0; b < n_lat; ++b) {
      const double z = gz.nodes[b], s = std::sqrt(1 - z * z);
      for (int c = 0; c < n_lon; ++c) {
        const double ph = 2.0 * std::numbers::pi * c / n_lon;
        pts.push_back(rr * Vec3(s * std::cos(ph), s * std::sin(ph), z));
        wts.push_back(wr * gz.weights[b] * 2.0 * std::numbers::pi / n_lon);
      }
    }
  }
  auto v = evaluate_field(S, r, pts);
  double sum = 0;
  for (std::size_t n = 0; n < v.size(); ++n) sum += wts[n] * v[n];
  return sum / (4.0 * std::numbers::pi / 3.0);
}

}  // namespace nesc
