#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace nesc {

using Vec3 = Eigen::Vector3d;

inline double sphere_dist(const Vec3& x, const Vec3& y) { return std::atan2(x.cross(y).norm(), x.dot(y)); }

// Orthonormal triad at a point of the sphere: c is the point, e1 the theta = 0 direction.
struct Frame {
  Vec3 c, e1, e2;

  Vec3 point(double t, double theta) const {
    return std::cos(t) * c + std::sin(t) * (std::cos(theta) * e1 + std::sin(theta) * e2);
  }
  // (t, theta) of a unit vector in this frame
  std::pair<double, double> coords(const Vec3& x) const {
    double a = x.dot(e1), b = x.dot(e2);
    return {std::atan2(std::hypot(a, b), x.dot(c)), std::atan2(b, a)};
  }
};

inline Frame make_frame(const Vec3& center) {
  Frame f;
  f.c = center.normalized();
  Vec3 ax = Vec3::UnitX();
  Vec3 e = ax - ax.dot(f.c) * f.c;
  if (e.norm() < 1e-8) {
    ax = Vec3::UnitY();
    e = ax - ax.dot(f.c) * f.c;
  }
  e -= e.dot(f.c) * f.c;
  f.e1 = e.normalized();
  f.e2 = f.c.cross(f.e1);
  return f;
}

enum class LayoutKind { random, fibonacci, clustered, from_file };

inline const char* to_string(LayoutKind k) {
  switch (k) {
    case LayoutKind::random: return "random";
    case LayoutKind::fibonacci: return "fibonacci";
    case LayoutKind::clustered: return "clustered";
    case LayoutKind::from_file: return "from_file";
  }
  return "?";
}

inline LayoutKind layout_kind_from_string(const std::string& s) {
  if (s == "random") return LayoutKind::random;
  if (s == "fibonacci") return LayoutKind::fibonacci;
  if (s == "clustered") return LayoutKind::clustered;
  if (s == "from_file") return LayoutKind::from_file;
  throw std::invalid_argument("unknown layout kind '" + s + "'");
}

struct PatchLayout {
  int N = 0;
  double epsilon = 0;
  std::vector<Vec3> centers;
  std::vector<Frame> frames;
  LayoutKind kind = LayoutKind::random;
  std::uint64_t seed = 0;
  double min_sep_factor = 3.0;

  double area_fraction() const { return N * std::pow(std::sin(0.5 * epsilon), 2); }
  double patch_area() const { return 4.0 * std::numbers::pi * std::pow(std::sin(0.5 * epsilon), 2); }

  Vec3 patch_point(int i, double t, double theta) const {
    if (t < 0 || t > epsilon * (1 + 1e-14)) throw std::out_of_range("patch_point: t outside [0, epsilon]");
    return frames[i].point(t, theta);
  }
  std::pair<double, double> patch_coords(int i, const Vec3& x) const { return frames[i].coords(x); }
};

struct LayoutSpec {
  LayoutKind kind = LayoutKind::random;
  int N = 1;
  std::optional<double> area_fraction;
  std::optional<double> epsilon;
  std::uint64_t seed = 1;
  double min_sep_factor = 3.0;
  std::string path;           // from_file
  int max_attempts_per_patch = 20000;
};

class LayoutError : public std::runtime_error {
 public:
  int achieved;
  LayoutError(const std::string& what, int got) : std::runtime_error(what), achieved(got) {}
};

inline double epsilon_from_area_fraction(double f, int N) { return 2.0 * std::sqrt(f / N); }

// Spherical radius of each of the 20 cluster disks: together they cover a quarter of the sphere.
inline double cluster_disk_radius() { return std::acos(1.0 - 1.0 / 40.0); }

inline std::vector<Vec3> dodecahedron_vertices() {
  const double p = std::numbers::phi, ip = 1.0 / std::numbers::phi;
  std::vector<Vec3> v;
  for (int sx : {-1, 1})
    for (int sy : {-1, 1})
      for (int sz : {-1, 1}) v.emplace_back(sx, sy, sz);
  for (int s1 : {-1, 1})
    for (int s2 : {-1, 1}) {
      v.emplace_back(0, s1 * ip, s2 * p);
      v.emplace_back(s1 * ip, s2 * p, 0);
      v.emplace_back(s1 * p, 0, s2 * ip);
    }
  for (auto& x : v) x.normalize();
  return v;
}

inline std::vector<Vec3> fibonacci_points(int N) {
  std::vector<Vec3> pts(N);
  const double g2 = std::numbers::phi * std::numbers::phi;
  for (int i = 1; i <= N; ++i) {
    double z = 1.0 - (2.0 * i - 1.0) / N;
    double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    double ph = 2.0 * std::numbers::pi * i / g2;
    pts[i - 1] = Vec3(r * std::cos(ph), r * std::sin(ph), z);
  }
  return pts;
}

inline std::vector<Vec3> read_centers(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open layout file '" + path + "'");
  std::vector<Vec3> pts;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto h = line.find('#');
    if (h != std::string::npos) line.erase(h);
    std::istringstream ss(line);
    double x, y, z;
    if (!(ss >> x)) continue;
    if (!(ss >> y >> z)) throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected 'x y z'");
    Vec3 v(x, y, z);
    if (std::abs(v.norm() - 1.0) > 1e-6)
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": center is not a unit vector");
    pts.push_back(v.normalized());
  }
  return pts;
}

inline double min_pair_distance(const std::vector<Vec3>& c) {
  double m = std::numbers::pi;
  for (std::size_t i = 0; i < c.size(); ++i)
    for (std::size_t j = i + 1; j < c.size(); ++j) m = std::min(m, sphere_dist(c[i], c[j]));
  return m;
}

inline PatchLayout make_layout(const LayoutSpec& spec) {
  if (spec.area_fraction.has_value() == spec.epsilon.has_value())
    throw std::invalid_argument("make_layout: exactly one of area_fraction / epsilon must be given");
  if (spec.min_sep_factor < 2.0) throw std::invalid_argument("make_layout: min_sep_factor must be >= 2");
  PatchLayout L;
  L.kind = spec.kind;
  L.seed = spec.seed;
  L.min_sep_factor = spec.min_sep_factor;
  std::vector<Vec3> fixed;
  if (spec.kind == LayoutKind::from_file) fixed = read_centers(spec.path);
  L.N = spec.kind == LayoutKind::from_file ? static_cast<int>(fixed.size()) : spec.N;
  if (L.N < 1) throw std::invalid_argument("make_layout: N must be >= 1");
  L.epsilon = spec.epsilon ? *spec.epsilon : epsilon_from_area_fraction(*spec.area_fraction, L.N);
  if (!(L.epsilon > 0) || L.epsilon >= std::numbers::pi / 4)
    throw std::invalid_argument("make_layout: epsilon must lie in (0, pi/4)");
  const double dmin = spec.min_sep_factor * L.epsilon;

  if (spec.kind == LayoutKind::fibonacci || spec.kind == LayoutKind::from_file) {
    L.centers = spec.kind == LayoutKind::fibonacci ? fibonacci_points(L.N) : fixed;
    // report the largest prefix that satisfies the separation constraint
    for (int i = 0; i < L.N; ++i)
      for (int j = 0; j < i; ++j)
        if (sphere_dist(L.centers[i], L.centers[j]) < dmin)
          throw LayoutError("layout violates the separation constraint at patch " + std::to_string(i), i);
  } else {
    std::mt19937_64 rng(spec.seed);
    std::uniform_real_distribution<double> U(0.0, 1.0);
    auto dodec = dodecahedron_vertices();
    std::vector<Frame> dframes;
    for (auto& v : dodec) dframes.push_back(make_frame(v));
    const double rd = cluster_disk_radius();
    long budget = static_cast<long>(spec.max_attempts_per_patch) * L.N;
    while (static_cast<int>(L.centers.size()) < L.N) {
      if (budget-- <= 0)
        throw LayoutError("could not place " + std::to_string(L.N) + " patches; placed " +
                              std::to_string(L.centers.size()),
                          static_cast<int>(L.centers.size()));
      Vec3 x;
      if (spec.kind == LayoutKind::random) {
        double z = 2.0 * U(rng) - 1.0, ph = 2.0 * std::numbers::pi * U(rng);
        double r = std::sqrt(std::max(0.0, 1.0 - z * z));
        x = Vec3(r * std::cos(ph), r * std::sin(ph), z);
      } else {
        int d = std::min(19, static_cast<int>(20 * U(rng)));
        double ct = 1.0 - U(rng) * (1.0 - std::cos(rd));
        double ph = 2.0 * std::numbers::pi * U(rng);
        x = dframes[d].point(std::acos(ct), ph);
      }
      bool ok = true;
      for (const auto& c : L.centers)
        if (sphere_dist(c, x) < dmin) {
          ok = false;
          break;
        }
      if (ok) L.centers.push_back(x.normalized());
    }
  }
  for (const auto& c : L.centers) L.frames.push_back(make_frame(c));
  return L;
}

struct BoundingCircle {
  Vec3 center = Vec3::UnitZ();
  double radius = 0;
};

namespace detail {

inline BoundingCircle cap2(const Vec3& a, const Vec3& b) {
  Vec3 m = a + b;
  if (m.norm() < 1e-300) throw std::invalid_argument("bounding_circle: antipodal points");
  m.normalize();
  return {m, 0.5 * sphere_dist(a, b)};
}

inline BoundingCircle cap3(const Vec3& a, const Vec3& b, const Vec3& c) {
  Vec3 n = (b - a).cross(c - a);
  if (n.norm() < 1e-300) {
    // collinear on a great circle: fall back to the widest pair
    BoundingCircle best = cap2(a, b);
    for (auto bc : {cap2(a, c), cap2(b, c)})
      if (bc.radius > best.radius) best = bc;
    return best;
  }
  n.normalize();
  if (n.dot(a + b + c) < 0) n = -n;
  return {n, std::max({sphere_dist(n, a), sphere_dist(n, b), sphere_dist(n, c)})};
}

inline bool inside(const BoundingCircle& bc, const Vec3& p) { return sphere_dist(bc.center, p) <= bc.radius + 1e-14; }

}  // namespace detail

// Smallest spherical cap containing the points (Welzl move-to-front), enlarged by pad.
inline BoundingCircle bounding_circle(const std::vector<Vec3>& pts_in, double pad = 0.0) {
  if (pts_in.empty()) throw std::invalid_argument("bounding_circle: empty point set");
  std::vector<Vec3> P = pts_in;
  std::mt19937 rng(12345);
  std::shuffle(P.begin(), P.end(), rng);
  BoundingCircle bc{P[0].normalized(), 0.0};
  for (std::size_t i = 1; i < P.size(); ++i) {
    if (detail::inside(bc, P[i])) continue;
    bc = {P[i].normalized(), 0.0};
    for (std::size_t j = 0; j < i; ++j) {
      if (detail::inside(bc, P[j])) continue;
      bc = detail::cap2(P[i], P[j]);
      for (std::size_t k = 0; k < j; ++k) {
        if (detail::inside(bc, P[k])) continue;
        bc = detail::cap3(P[i], P[j], P[k]);
      }
    }
  }
  if (bc.radius >= 0.5 * std::numbers::pi - 1e-12)
    throw std::invalid_argument("bounding_circle: points are not contained in an open hemisphere");
  bc.radius += pad;
  return bc;
}

}  // namespace nesc
