#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "nesc/greens.hpp"
#include "nesc/sphere_geom.hpp"

namespace nesc {

// Cube face of a direction: axis of the largest |coordinate| (ties go to x, then y, then z),
// face = 2 * axis + (coordinate < 0).
inline int cube_face(const Vec3& x) {
  int axis = 0;
  double best = std::abs(x[0]);
  for (int a = 1; a < 3; ++a)
    if (std::abs(x[a]) > best) {
      best = std::abs(x[a]);
      axis = a;
    }
  return 2 * axis + (x[axis] < 0 ? 1 : 0);
}

// In-plane axes of a face, in cyclic order after the normal axis.
inline std::array<int, 2> face_axes(int face) {
  int a = face / 2;
  return {(a + 1) % 3, (a + 2) % 3};
}

// Central projection onto the face plane: coordinates in [-1, 1]^2.
inline std::array<double, 2> face_coords(int face, const Vec3& x) {
  int a = face / 2;
  auto ax = face_axes(face);
  double d = std::abs(x[a]);
  return {x[ax[0]] / d, x[ax[1]] / d};
}

struct TreeBox {
  int level = 0, face = 0;
  std::int64_t i = 0, j = 0;  // square [-1 + i h, -1 + (i+1) h] x [-1 + j h, ...], h = 2^(1 - level)
  int parent = -1;
  std::vector<int> children, members, neighbors, ilist;
};

// Cube-projected quadtrees, one per face, merged level by level. Boxes with a single patch are continued
// by single-child chains down to the deepest level, so every patch owns exactly one box per level and the
// leaf level is uniform.
struct SphereTree {
  int n_patches = 0;
  int depth = 0;  // leaf level
  std::vector<TreeBox> boxes;
  std::vector<std::vector<int>> levels;  // box ids per level
  std::vector<std::vector<int>> box_of;  // box_of[level][patch]

  int leaf_level() const { return depth; }
  std::string dump() const;
};

inline constexpr int kMaxTreeDepth = 30;

namespace detail {

// Integer bounds of a box on the cube surface scaled by 2^level: the cube is [-2^l, 2^l]^3.
inline std::array<std::int64_t, 6> box_bounds3(const TreeBox& b) {
  const std::int64_t L = std::int64_t(1) << b.level;
  const int a = b.face / 2;
  auto ax = face_axes(b.face);
  std::array<std::int64_t, 6> r{};
  const std::int64_t s = (b.face % 2) ? -L : L;
  r[2 * a] = r[2 * a + 1] = s;
  // face coordinate u = x[ax]/|x[a]| scaled by L: [-L + 2 i, -L + 2 (i + 1)] in units of h / 2
  r[2 * ax[0]] = -L + 2 * b.i;
  r[2 * ax[0] + 1] = -L + 2 * (b.i + 1);
  r[2 * ax[1]] = -L + 2 * b.j;
  r[2 * ax[1] + 1] = -L + 2 * (b.j + 1);
  return r;
}

inline bool boxes_touch(const TreeBox& a, const TreeBox& b) {
  auto p = box_bounds3(a), q = box_bounds3(b);
  for (int d = 0; d < 3; ++d)
    if (p[2 * d + 1] < q[2 * d] || q[2 * d + 1] < p[2 * d]) return false;
  return true;
}

struct BoxKey {
  int level, face;
  std::int64_t i, j;
  bool operator<(const BoxKey& o) const { return std::tie(level, face, i, j) < std::tie(o.level, o.face, o.i, o.j); }
};

}  // namespace detail

inline SphereTree build_tree(const std::vector<Vec3>& centers) {
  SphereTree T;
  const int N = static_cast<int>(centers.size());
  T.n_patches = N;
  if (N == 0) throw std::invalid_argument("build_tree: no patches");
  std::vector<int> face(N);
  std::vector<std::array<double, 2>> uv(N);
  for (int p = 0; p < N; ++p) {
    face[p] = cube_face(centers[p]);
    uv[p] = face_coords(face[p], centers[p]);
  }
  // child quadrant of patch p inside a box at (level, i, j)
  auto quadrant = [&](int p, int level, std::int64_t i, std::int64_t j) {
    const double h = std::ldexp(2.0, -level);
    int di = uv[p][0] >= -1.0 + (i + 0.5) * h ? 1 : 0;
    int dj = uv[p][1] >= -1.0 + (j + 0.5) * h ? 1 : 0;
    return std::pair<int, int>{di, dj};
  };
  T.levels.emplace_back();
  for (int f = 0; f < 6; ++f) {
    TreeBox b;
    b.face = f;
    for (int p = 0; p < N; ++p)
      if (face[p] == f) b.members.push_back(p);
    if (b.members.empty()) continue;
    T.levels[0].push_back(static_cast<int>(T.boxes.size()));
    T.boxes.push_back(std::move(b));
  }
  // adaptive subdivision to one patch per box
  bool split_any = true;
  for (int level = 0; split_any; ++level) {
    split_any = false;
    for (int id : T.levels[level])
      if (T.boxes[id].members.size() > 1) split_any = true;
    if (!split_any) break;
    if (level + 1 > kMaxTreeDepth)
      throw std::runtime_error("build_tree: depth cap reached; patch centres too close or coincident");
    T.levels.emplace_back();
    for (int id : T.levels[level]) {
      if (T.boxes[id].members.size() <= 1) continue;
      std::map<std::pair<int, int>, std::vector<int>> parts;
      const TreeBox par = T.boxes[id];
      for (int p : par.members) parts[quadrant(p, level, par.i, par.j)].push_back(p);
      for (auto& [q, mem] : parts) {
        TreeBox c;
        c.level = level + 1;
        c.face = par.face;
        c.i = 2 * par.i + q.first;
        c.j = 2 * par.j + q.second;
        c.parent = id;
        c.members = std::move(mem);
        int cid = static_cast<int>(T.boxes.size());
        T.boxes[id].children.push_back(cid);
        T.levels[level + 1].push_back(cid);
        T.boxes.push_back(std::move(c));
      }
    }
  }
  T.depth = static_cast<int>(T.levels.size()) - 1;
  // single-patch chains down to the leaf level
  for (int level = 0; level < T.depth; ++level) {
    for (int id : std::vector<int>(T.levels[level])) {
      if (!T.boxes[id].children.empty()) continue;
      const TreeBox par = T.boxes[id];
      auto q = quadrant(par.members[0], level, par.i, par.j);
      TreeBox c;
      c.level = level + 1;
      c.face = par.face;
      c.i = 2 * par.i + q.first;
      c.j = 2 * par.j + q.second;
      c.parent = id;
      c.members = par.members;
      int cid = static_cast<int>(T.boxes.size());
      T.boxes[id].children.push_back(cid);
      T.levels[level + 1].push_back(cid);
      T.boxes.push_back(std::move(c));
    }
  }
  T.box_of.assign(T.depth + 1, std::vector<int>(N, -1));
  for (int level = 0; level <= T.depth; ++level)
    for (int id : T.levels[level])
      for (int p : T.boxes[id].members) T.box_of[level][p] = id;
  // neighbours: same-level boxes whose closed squares touch on the cube surface
  std::map<detail::BoxKey, int> index;
  for (std::size_t id = 0; id < T.boxes.size(); ++id) {
    const auto& b = T.boxes[id];
    index[{b.level, b.face, b.i, b.j}] = static_cast<int>(id);
  }
  for (std::size_t id = 0; id < T.boxes.size(); ++id) {
    auto& b = T.boxes[id];
    const std::int64_t L = std::int64_t(1) << b.level;
    auto bb = detail::box_bounds3(b);
    for (int f = 0; f < 6; ++f) {
      const int a = f / 2;
      const std::int64_t s = (f % 2) ? -L : L;
      if (s < bb[2 * a] - 2 || s > bb[2 * a + 1] + 2) continue;
      auto ax = face_axes(f);
      // candidate index ranges covering the box's bounds widened by one box
      auto range = [&](int d) {
        std::int64_t lo = (bb[2 * d] - 2 + L) / 2, hi = (bb[2 * d + 1] + 2 + L) / 2;
        return std::pair<std::int64_t, std::int64_t>{std::max<std::int64_t>(0, lo - 1),
                                                     std::min<std::int64_t>(L - 1, hi)};
      };
      auto [i0, i1] = range(ax[0]);
      auto [j0, j1] = range(ax[1]);
      for (std::int64_t i = i0; i <= i1; ++i)
        for (std::int64_t j = j0; j <= j1; ++j) {
          auto it = index.find({b.level, f, i, j});
          if (it == index.end() || it->second == static_cast<int>(id)) continue;
          if (detail::boxes_touch(b, T.boxes[it->second])) b.neighbors.push_back(it->second);
        }
    }
    std::sort(b.neighbors.begin(), b.neighbors.end());
  }
  // interaction lists: children of the parent's neighbours (and of the parent) that are not neighbours;
  // at level 0 the parent is the whole sphere
  for (std::size_t id = 0; id < T.boxes.size(); ++id) {
    auto& b = T.boxes[id];
    std::vector<int> cand;
    if (b.level == 0) {
      cand = T.levels[0];
    } else {
      const auto& par = T.boxes[b.parent];
      cand = par.children;
      for (int n : par.neighbors) cand.insert(cand.end(), T.boxes[n].children.begin(), T.boxes[n].children.end());
    }
    for (int c : cand)
      if (c != static_cast<int>(id) && !std::binary_search(b.neighbors.begin(), b.neighbors.end(), c))
        b.ilist.push_back(c);
    std::sort(b.ilist.begin(), b.ilist.end());
  }
  return T;
}

inline SphereTree build_tree(const PatchLayout& L) { return build_tree(L.centers); }

inline std::vector<std::vector<int>> neighbor_lists(const SphereTree& T) {
  std::vector<std::vector<int>> out;
  for (const auto& b : T.boxes) out.push_back(b.neighbors);
  return out;
}

struct PairAudit {
  long missing = 0, duplicated = 0;
  std::size_t max_ilist = 0, max_leaf_neighbors = 0;
  bool ok() const { return missing == 0 && duplicated == 0; }
};

// Counts every ordered pair (i, j), i != j, over interaction lists at all levels plus leaf-level neighbours.
inline PairAudit audit_pair_coverage(const SphereTree& T) {
  const int N = T.n_patches;
  std::vector<std::uint8_t> cnt(static_cast<std::size_t>(N) * N, 0);
  PairAudit a;
  auto add = [&](const TreeBox& tgt, const TreeBox& src) {
    for (int i : tgt.members)
      for (int j : src.members) {
        auto& c = cnt[static_cast<std::size_t>(i) * N + j];
        if (c < 255) ++c;
      }
  };
  for (const auto& b : T.boxes) {
    a.max_ilist = std::max(a.max_ilist, b.ilist.size());
    for (int c : b.ilist) add(b, T.boxes[c]);
    if (b.level == T.depth) {
      a.max_leaf_neighbors = std::max(a.max_leaf_neighbors, b.neighbors.size());
      for (int c : b.neighbors) add(b, T.boxes[c]);
    }
  }
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < N; ++j) {
      if (i == j) continue;
      auto c = cnt[static_cast<std::size_t>(i) * N + j];
      if (c == 0) ++a.missing;
      if (c > 1) ++a.duplicated;
    }
  return a;
}

inline std::string SphereTree::dump() const {
  std::ostringstream s;
  s << "tree: patches " << n_patches << ", leaf level " << depth << ", boxes " << boxes.size() << "\n";
  for (int l = 0; l <= depth; ++l) {
    std::size_t occ = 0, il = 0, nb = 0, ilmax = 0, nbmax = 0, multi = 0;
    for (int id : levels[l]) {
      const auto& b = boxes[id];
      occ = std::max(occ, b.members.size());
      multi += b.members.size() > 1;
      il += b.ilist.size();
      nb += b.neighbors.size();
      ilmax = std::max(ilmax, b.ilist.size());
      nbmax = std::max(nbmax, b.neighbors.size());
    }
    const double nbx = levels[l].empty() ? 0.0 : 1.0 / levels[l].size();
    s << "level " << l << ": boxes " << levels[l].size() << ", multi-patch " << multi << ", max occupancy " << occ
      << ", ilist mean " << il * nbx << " max " << ilmax << ", neighbours mean " << nb * nbx << " max " << nbmax
      << "\n";
  }
  return s.str();
}

// ---- incoming grids --------------------------------------------------------------------

// Parity-restricted Chebyshev-Fourier grid on a spherical disk of radius R: n_r positive Chebyshev-Gauss
// radii of the 2 n_r point rule on [-R, R], times n_a (even) equispaced angles. Node index ir * n_a + ia.
struct IncomingGrid {
  Frame frame;
  double R = 0;
  int n_r = 0, n_a = 0;
  std::vector<double> x;       // Chebyshev nodes in (0, 1)
  std::vector<Vec3> nodes;     // on the sphere
  Eigen::MatrixXd radial;      // n_r x n_r: radial transform for even m (rows: k = 0, 2, ...), odd m in oddrad
  Eigen::MatrixXd oddrad;      // rows: k = 1, 3, ...
  Eigen::MatrixXd ang;         // n_a x n_a angular transform

  int size() const { return n_r * n_a; }
  int n_modes() const { return n_a / 2; }

  // Coefficients: one row per angular function (cos m for m = 0..n_a/2, then sin m for m = 1..n_a/2 - 1),
  // each holding the n_r Chebyshev coefficients of matching parity (degrees m % 2, m % 2 + 2, ...).
  Eigen::MatrixXd coefficients(const Eigen::VectorXd& samples) const {
    Eigen::Map<const Eigen::MatrixXd> S(samples.data(), n_a, n_r);
    Eigen::MatrixXd F = ang * S;
    Eigen::MatrixXd C(n_a, n_r);
    for (int row = 0; row < n_a; ++row) C.row(row) = F.row(row) * (odd_row(row) ? oddrad : radial).transpose();
    return C;
  }

  bool odd_row(int row) const { return (row <= n_modes() ? row : row - n_modes()) % 2; }

  // Evaluates the expansion at a point given in the grid's local polar coordinates (t <= R).
  double eval_local(const Eigen::MatrixXd& C, double t, double th) const {
    const int H = n_modes();
    const double r = t / R;
    thread_local std::vector<double> Tk;
    Tk.resize(2 * n_r);
    Tk[0] = 1;
    if (2 * n_r > 1) Tk[1] = r;
    for (int k = 2; k < 2 * n_r; ++k) Tk[k] = 2 * r * Tk[k - 1] - Tk[k - 2];
    const double c1 = std::cos(th), s1 = std::sin(th);
    double cm = 1, sm = 0, out = 0;
    for (int m = 0; m <= H; ++m) {
      const int par = m % 2;
      double rc = 0;
      for (int q = 0; q < n_r; ++q) rc += C(m, q) * Tk[2 * q + par];
      out += rc * cm;
      if (m > 0 && m < H) {
        double rs = 0;
        for (int q = 0; q < n_r; ++q) rs += C(H + m, q) * Tk[2 * q + par];
        out += rs * sm;
      }
      double cn = cm * c1 - sm * s1;
      sm = sm * c1 + cm * s1;
      cm = cn;
    }
    return out;
  }

  double eval(const Eigen::MatrixXd& C, const Vec3& p) const {
    auto [t, th] = frame.coords(p);
    if (t > R * (1 + 1e-12)) throw std::out_of_range("IncomingGrid: point outside the bounding circle");
    return eval_local(C, t, th);
  }

  // Dense interpolation matrix from grid samples to the given points.
  Eigen::MatrixXd interp_matrix(const std::vector<Vec3>& pts) const {
    Eigen::MatrixXd E(pts.size(), size());
    for (int q = 0; q < size(); ++q) {
      Eigen::VectorXd e = Eigen::VectorXd::Unit(size(), q);
      Eigen::MatrixXd C = coefficients(e);
      for (std::size_t i = 0; i < pts.size(); ++i) E(i, q) = eval(C, pts[i]);
    }
    return E;
  }
};

inline IncomingGrid make_incoming_grid(const BoundingCircle& bc, int n_r, int n_a) {
  if (n_r < 1 || n_a < 2 || n_a % 2) throw std::invalid_argument("make_incoming_grid: need n_r >= 1 and even n_a");
  IncomingGrid g;
  g.frame = make_frame(bc.center);
  g.R = bc.radius;
  g.n_r = n_r;
  g.n_a = n_a;
  const int Nc = 2 * n_r;
  for (int i = 0; i < n_r; ++i) g.x.push_back(std::cos((2 * i + 1) * std::numbers::pi / (2 * Nc)));
  for (int i = 0; i < n_r; ++i)
    for (int a = 0; a < n_a; ++a) g.nodes.push_back(g.frame.point(g.R * g.x[i], 2.0 * std::numbers::pi * a / n_a));
  const int H = n_a / 2;
  g.ang.setZero(n_a, n_a);
  for (int a = 0; a < n_a; ++a) {
    const double th = 2.0 * std::numbers::pi * a / n_a;
    for (int m = 0; m <= H; ++m) {
      const double f = (m == 0 || m == H) ? 1.0 / n_a : 2.0 / n_a;
      g.ang(m, a) = f * std::cos(m * th);
      if (m > 0 && m < H) g.ang(H + m, a) = f * std::sin(m * th);
    }
  }
  g.radial.resize(n_r, n_r);
  g.oddrad.resize(n_r, n_r);
  for (int q = 0; q < n_r; ++q)
    for (int i = 0; i < n_r; ++i) {
      const double th = (2 * i + 1) * std::numbers::pi / (2 * Nc);
      int ke = 2 * q, ko = 2 * q + 1;
      // c_k = (2 / Nc) sum over all nodes = (4 / Nc) sum over the positive half, halved for k = 0
      g.radial(q, i) = (ke == 0 ? 2.0 : 4.0) / Nc * std::cos(ke * th);
      g.oddrad(q, i) = 4.0 / Nc * std::cos(ko * th);
    }
  return g;
}

struct IncomingOptions {
  double tol = 1e-8;
  int n_r_max = 40;
  int n_a_max = 160;
  int n_probe = 8;  // point sources per test ring
};

namespace detail {

// Largest relative size of the two trailing radial coefficients and of the two trailing angular rows.
inline std::pair<double, double> tails(const IncomingGrid& g, const Eigen::MatrixXd& C) {
  const int H = g.n_modes();
  double mx = C.cwiseAbs().maxCoeff();
  if (mx == 0) return {0, 0};
  double rt = C.rightCols(std::min(2, g.n_r)).cwiseAbs().maxCoeff();
  double at = 0;
  for (int row = 0; row < g.n_a; ++row) {
    int m = row <= H ? row : row - H;
    if (m >= H - 1) at = std::max(at, C.row(row).cwiseAbs().maxCoeff());
  }
  return {rt / mx, at / mx};
}

}  // namespace detail

// Grows (n_r, n_a) until point sources at arc distance `src_dist` from the circle centre have trailing
// coefficients below tol. Returns n_r = 0 if the caps are reached.
inline IncomingGrid adapt_incoming_grid(ProblemKind kind, const BoundingCircle& bc, double src_dist,
                                        const IncomingOptions& opt) {
  Frame fr = make_frame(bc.center);
  std::vector<Vec3> srcs;
  for (int a = 0; a < opt.n_probe; ++a) srcs.push_back(fr.point(src_dist, 2 * std::numbers::pi * (a + 0.25) / opt.n_probe));
  int n_r = 4, n_a = 8;
  for (;;) {
    IncomingGrid g = make_incoming_grid(bc, n_r, n_a);
    double rt = 0, at = 0;
    for (const auto& s : srcs) {
      Eigen::VectorXd v(g.size());
      for (int q = 0; q < g.size(); ++q) v[q] = green_surface(kind, g.nodes[q], s);
      auto [r, a] = detail::tails(g, g.coefficients(v));
      rt = std::max(rt, r);
      at = std::max(at, a);
    }
    if (rt <= opt.tol && at <= opt.tol) return g;
    if (rt > opt.tol) n_r += 2;
    if (at > opt.tol) n_a += 4;
    if (n_r > opt.n_r_max || n_a > opt.n_a_max) {
      g.n_r = 0;
      return g;
    }
  }
}

// Per-box incoming grid plus the measured distance from its centre to the nearest interaction-list source
// point. `usable` is false when the box has no interaction list or no grid converged within the caps.
struct GroupGrid {
  bool usable = false;
  BoundingCircle circle;
  double nearest = 0;
  IncomingGrid grid;
};

inline std::vector<GroupGrid> build_incoming_grids(const SphereTree& T, const PatchLayout& L, ProblemKind kind,
                                                   const IncomingOptions& opt) {
  std::vector<GroupGrid> out(T.boxes.size());
  for (std::size_t id = 0; id < T.boxes.size(); ++id) {
    const auto& b = T.boxes[id];
    if (b.ilist.empty()) continue;
    auto& gg = out[id];
    std::vector<Vec3> pts;
    for (int p : b.members) pts.push_back(L.centers[p]);
    gg.circle = bounding_circle(pts, L.epsilon);
    double d = 10;
    for (int c : b.ilist)
      for (int j : T.boxes[c].members) d = std::min(d, sphere_dist(gg.circle.center, L.centers[j]) - L.epsilon);
    gg.nearest = d;
    // sources must be clearly outside the disk for spectral convergence
    if (d <= 1.05 * gg.circle.radius) continue;
    gg.grid = adapt_incoming_grid(kind, gg.circle, d, opt);
    gg.usable = gg.grid.n_r > 0;
  }
  return out;
}

}  // namespace nesc
