#pragma once

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "nesc/dense.hpp"
#include "nesc/greens.hpp"
#include "nesc/onepatch.hpp"
#include "nesc/parallel.hpp"
#include "nesc/sphere_geom.hpp"

namespace nesc {

struct TrainingOptions {
  int n_rad = 48;
  int n_ang = 96;
  double ratio = 1.15;  // geometric growth of the radial spacing away from the inner radius
};

// Tensor grid on the spherical annulus inner_radius <= t <= outer_radius about the north pole,
// frame e1 = x, e2 = y. Radial index major.
inline std::vector<Vec3> build_training_grid(double epsilon, double inner_radius,
                                             double outer_radius = std::numbers::pi,
                                             const TrainingOptions& opt = {}) {
  if (inner_radius < 2.0 * epsilon * (1 - 1e-12))
    throw std::invalid_argument("build_training_grid: inner radius below 2 epsilon");
  if (!(outer_radius > inner_radius) || outer_radius > std::numbers::pi * (1 + 1e-15))
    throw std::invalid_argument("build_training_grid: need inner < outer <= pi");
  if (opt.n_rad < 2 || opt.n_ang < 1) throw std::invalid_argument("build_training_grid: grid too small");
  std::vector<double> t(opt.n_rad);
  double s = 0;
  for (int j = 0; j < opt.n_rad; ++j) {
    t[j] = s;
    s += std::pow(opt.ratio, j);
  }
  const double span = outer_radius - inner_radius, last = t.back();
  for (double& v : t) v = inner_radius + span * v / last;
  std::vector<Vec3> pts;
  pts.reserve(static_cast<std::size_t>(opt.n_rad) * opt.n_ang);
  for (double tt : t)
    for (int a = 0; a < opt.n_ang; ++a) {
      double th = 2.0 * std::numbers::pi * a / opt.n_ang;
      pts.emplace_back(std::sin(tt) * std::cos(th), std::sin(tt) * std::sin(th), std::cos(tt));
    }
  return pts;
}

// Fine-grid node of a generic patch centred at the north pole.
inline Vec3 local_node(const FineGrid& g, int l) {
  double t = g.node_t(l), th = g.node_theta(l);
  return {std::sin(t) * std::cos(th), std::sin(t) * std::sin(th), std::cos(t)};
}

// Skeletonized outgoing representation: for targets at arc distance >= inner_radius from the patch centre,
// sum_l G(x, x_l) (B f)_l w_l ~= sum_m G(x, x_skel[m]) (T f)_m.
struct OutgoingOperator {
  std::vector<int> skeleton;  // fine-grid indices
  std::vector<double> t, theta;  // local coordinates of the skeleton nodes
  Eigen::MatrixXd T;           // p x K
  double inner_radius = 0;
  double id_tol = 0;

  int p() const { return static_cast<int>(skeleton.size()); }
};

// The pivot threshold of the ID is this fraction of the requested field accuracy.
inline constexpr double kIdPivotFraction = 0.1;

namespace detail {

inline void fill_skeleton_coords(const FineGrid& g, OutgoingOperator& out) {
  out.t.clear();
  out.theta.clear();
  for (int l : out.skeleton) {
    out.t.push_back(g.node_t(l));
    out.theta.push_back(g.node_theta(l));
  }
}

// ID of the column-scaled kernel matrix A(j, l) scale_l, A(j, l) = G(train_j, src_l).
// Coefficients are returned for the unscaled columns.
inline IDResult kernel_id(ProblemKind kind, const std::vector<Vec3>& train, const std::vector<Vec3>& src,
                          const Eigen::VectorXd& scale, double tol, int workers) {
  const int nt = static_cast<int>(train.size()), nc = static_cast<int>(src.size());
  Eigen::MatrixXd A(nt, nc);
  parallel_for(nc, workers, [&](int l) {
    for (int j = 0; j < nt; ++j) A(j, l) = green_surface(kind, train[j], src[l]) * scale[l];
  });
  IDResult id = interp_decomp(std::move(A), tol);
  for (int m = 0; m < id.rank; ++m) id.coeffs.row(m) *= scale[id.skeleton[m]];
  for (int l = 0; l < nc; ++l) id.coeffs.col(l) /= scale[l];
  return id;
}

}  // namespace detail

inline OutgoingOperator build_outgoing(const OnePatchOperator& op, double id_tol, double inner_radius = -1,
                                       int workers = 1, const TrainingOptions& topt = {}) {
  if (!(id_tol > 0 && id_tol < 1)) throw std::invalid_argument("build_outgoing: id_tol must lie in (0, 1)");
  if (inner_radius < 0) inner_radius = 2.0 * op.epsilon;
  const auto& g = op.grid;
  auto train = build_training_grid(op.epsilon, inner_radius, std::numbers::pi, topt);
  std::vector<Vec3> src(g.n_f());
  for (int l = 0; l < g.n_f(); ++l) src[l] = local_node(g, l);
  Eigen::Map<const Eigen::VectorXd> w(g.w.data(), g.n_f());
  Eigen::MatrixXd WB = w.asDiagonal() * op.B;
  // columns weighted by the size of the source strengths they carry
  Eigen::VectorXd scale = WB.rowwise().norm().cwiseMax(1e-300);
  IDResult id = detail::kernel_id(op.kind, train, src, scale, kIdPivotFraction * id_tol, workers);
  OutgoingOperator out;
  out.skeleton = id.skeleton;
  out.inner_radius = inner_radius;
  out.id_tol = id_tol;
  out.T = id.coeffs * WB;
  detail::fill_skeleton_coords(g, out);
  return out;
}

// One operator per radius (finest level first, radii non-decreasing toward coarse levels).
// Radii at or below the base radius reuse the base operator; larger radii recompress the base skeleton.
inline std::vector<OutgoingOperator> build_outgoing_per_level(const OnePatchOperator& op, const OutgoingOperator& base,
                                                              const std::vector<double>& radii, int workers = 1,
                                                              const TrainingOptions& topt = {}) {
  std::vector<OutgoingOperator> out;
  const auto& g = op.grid;
  for (std::size_t i = 0; i < radii.size(); ++i) {
    if (i > 0 && radii[i] < radii[i - 1] * (1 - 1e-12))
      throw std::invalid_argument("build_outgoing_per_level: radii must not decrease toward coarse levels");
    const double r = radii[i];
    if (r <= base.inner_radius * (1 + 1e-12) || r >= std::numbers::pi) {
      out.push_back(base);
      continue;
    }
    const OutgoingOperator& prev = out.empty() ? base : out.back();
    auto train = build_training_grid(op.epsilon, r, std::numbers::pi, topt);
    std::vector<Vec3> src(prev.p());
    for (int m = 0; m < prev.p(); ++m) src[m] = local_node(g, prev.skeleton[m]);
    Eigen::VectorXd scale = prev.T.rowwise().norm().cwiseMax(1e-300);
    IDResult id = detail::kernel_id(op.kind, train, src, scale, kIdPivotFraction * base.id_tol, workers);
    OutgoingOperator lv;
    lv.inner_radius = r;
    lv.id_tol = base.id_tol;
    for (int j : id.skeleton) lv.skeleton.push_back(prev.skeleton[j]);
    lv.T = id.coeffs * prev.T;
    detail::fill_skeleton_coords(g, lv);
    out.push_back(std::move(lv));
  }
  return out;
}

// ---- cache, stored next to the one-patch bundle ---------------------------------------

inline std::string outgoing_filename(const OnePatchKey& key, double id_tol, double inner_radius) {
  std::uint64_t a, b;
  std::memcpy(&a, &id_tol, sizeof a);
  std::memcpy(&b, &inner_radius, sizeof b);
  std::ostringstream s;
  s << key.filename() << ".tol" << std::hex << a << "_r" << b << ".skel";
  return s.str();
}

inline void save_outgoing(const OutgoingOperator& out, const std::string& path) {
  std::ofstream o(path, std::ios::binary);
  if (!o) throw std::runtime_error("cannot write cache file '" + path + "'");
  o.write("NESCSK", 6);
  detail::put(o, kOnePatchCacheVersion);
  detail::put(o, out.id_tol);
  detail::put(o, out.inner_radius);
  detail::put<std::int32_t>(o, out.p());
  for (int s : out.skeleton) detail::put<std::int32_t>(o, s);
  detail::put_mat(o, out.T);
}

inline OutgoingOperator load_outgoing(const std::string& path, const OnePatchOperator& op, double id_tol,
                                      double inner_radius) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open cache file '" + path + "'");
  char magic[6];
  in.read(magic, 6);
  if (!in || std::string(magic, 6) != "NESCSK") throw std::runtime_error("not a skeleton cache file");
  if (detail::get<std::uint32_t>(in) != kOnePatchCacheVersion) throw std::runtime_error("cache version mismatch");
  OutgoingOperator out;
  out.id_tol = detail::get<double>(in);
  out.inner_radius = detail::get<double>(in);
  if (out.id_tol != id_tol || out.inner_radius != inner_radius) throw std::runtime_error("cache key mismatch");
  int p = detail::get<std::int32_t>(in);
  for (int i = 0; i < p; ++i) {
    int s = detail::get<std::int32_t>(in);
    if (s < 0 || s >= op.n_f()) throw std::runtime_error("skeleton index out of range");
    out.skeleton.push_back(s);
  }
  out.T = detail::get_mat(in);
  if (out.T.rows() != p || out.T.cols() != op.K()) throw std::runtime_error("cache shape mismatch");
  detail::fill_skeleton_coords(op.grid, out);
  return out;
}

inline OutgoingOperator get_outgoing(const OnePatchOperator& op, double id_tol, double inner_radius,
                                     const std::string& cache_dir, int workers, bool* from_cache = nullptr) {
  if (from_cache) *from_cache = false;
  if (inner_radius < 0) inner_radius = 2.0 * op.epsilon;
  std::string path;
  if (!cache_dir.empty()) {
    path = (std::filesystem::path(cache_dir) / outgoing_filename(key_of(op), id_tol, inner_radius)).string();
    if (std::filesystem::exists(path)) {
      try {
        auto out = load_outgoing(path, op, id_tol, inner_radius);
        if (from_cache) *from_cache = true;
        return out;
      } catch (const std::exception&) {
      }
    }
  }
  auto out = build_outgoing(op, id_tol, inner_radius, workers);
  if (!path.empty()) {
    std::filesystem::create_directories(cache_dir);
    save_outgoing(out, path);
  }
  return out;
}

}  // namespace nesc
