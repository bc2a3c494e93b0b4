#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "nesc/scatter.hpp"

namespace nesc {

enum class Toggle { off, on, automatic };

struct RunConfig {
  ProblemKind kind = ProblemKind::interior;
  LayoutKind layout = LayoutKind::random;
  std::string layout_path;
  int N = 0;
  std::optional<double> area_fraction, epsilon;
  std::uint64_t seed = 1;
  double min_sep_factor = 4.0;
  int M = 15, m = 13, k = 20;
  double id_tol = 1e-11, gmres_tol = 1e-10, incoming_tol = 1e-8;
  int max_iter = 100;
  Toggle per_level_T = Toggle::automatic;
  std::optional<double> field_radius;  // unset: 1 -+ epsilon / 5
  int field_n_lat = 90, field_n_lon = 180;
  std::string field_path;
  std::string cache_dir;
  int workers = 1;
  std::string output_dir = ".";
  bool write_density = false;
  int residual_samples = 10;
  std::vector<int> bench_N{1000, 2000, 4000};
  int bench_iters = 3;

  bool per_level(int n) const { return per_level_T == Toggle::on || (per_level_T == Toggle::automatic && n > 10000); }
};

class ConfigError : public std::runtime_error {
 public:
  std::string key;
  ConfigError(std::string k, const std::string& msg) : std::runtime_error("config key '" + k + "': " + msg), key(std::move(k)) {}
};

class StageError : public std::runtime_error {
 public:
  std::string stage;
  StageError(std::string s, const std::string& msg) : std::runtime_error("[" + s + "] " + msg), stage(std::move(s)) {}
};

namespace detail {

inline std::string trim(const std::string& s) {
  auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return {};
  auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline long long to_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    long long x = std::stoll(v, &pos);
    if (pos == v.size()) return x;
  } catch (const std::exception&) {
  }
  throw ConfigError(key, "expected an integer, got '" + v + "'");
}

inline int to_int32(const std::string& key, const std::string& v) {
  long long x = to_int(key, v);
  if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max()) throw ConfigError(key, "out of range");
  return static_cast<int>(x);
}

inline double to_real(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    double x = std::stod(v, &pos);
    if (pos == v.size() && std::isfinite(x)) return x;
  } catch (const std::exception&) {
  }
  throw ConfigError(key, "expected a finite number, got '" + v + "'");
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(key, "expected true/false, got '" + v + "'");
}

inline std::string fmt(double x, int digits = 8) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, x);
  return buf;
}

inline std::string opt_str(const std::optional<double>& x) { return x ? fmt(*x, 17) : "unset"; }

struct KeySpec {
  const char* name;
  const char* help;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

}  // namespace detail

// Every configuration key: drives config files, command-line flags and the summary echo.
inline const std::vector<detail::KeySpec>& config_keys() {
  using namespace detail;
  static const std::vector<KeySpec> keys = {
      {"kind", "interior | exterior",
       [](RunConfig& c, const std::string& v) {
         try {
           c.kind = problem_kind_from_string(v);
         } catch (const std::invalid_argument&) {
           throw ConfigError("kind", "expected interior or exterior, got '" + v + "'");
         }
       },
       [](const RunConfig& c) { return std::string(to_string(c.kind)); }},
      {"layout", "random | fibonacci | clustered | from_file",
       [](RunConfig& c, const std::string& v) {
         try {
           c.layout = layout_kind_from_string(v);
         } catch (const std::invalid_argument&) {
           throw ConfigError("layout", "unknown layout '" + v + "'");
         }
       },
       [](const RunConfig& c) { return std::string(to_string(c.layout)); }},
      {"layout_path", "centre file for layout = from_file (x y z per line)",
       [](RunConfig& c, const std::string& v) { c.layout_path = v; }, [](const RunConfig& c) { return c.layout_path; }},
      {"N", "number of patches", [](RunConfig& c, const std::string& v) { c.N = to_int32("N", v); },
       [](const RunConfig& c) { return std::to_string(c.N); }},
      {"area_fraction", "patch area fraction f (default 0.05 when epsilon is unset)",
       [](RunConfig& c, const std::string& v) { c.area_fraction = to_real("area_fraction", v); },
       [](const RunConfig& c) { return opt_str(c.area_fraction); }},
      {"epsilon", "patch radius (arc length)",
       [](RunConfig& c, const std::string& v) { c.epsilon = to_real("epsilon", v); },
       [](const RunConfig& c) { return opt_str(c.epsilon); }},
      {"seed", "layout seed",
       [](RunConfig& c, const std::string& v) {
         long long s = to_int("seed", v);
         if (s < 0) throw ConfigError("seed", "must be non-negative");
         c.seed = static_cast<std::uint64_t>(s);
       },
       [](const RunConfig& c) { return std::to_string(c.seed); }},
      {"min_sep_factor", "minimum centre separation in units of epsilon",
       [](RunConfig& c, const std::string& v) { c.min_sep_factor = to_real("min_sep_factor", v); },
       [](const RunConfig& c) { return fmt(c.min_sep_factor, 17); }},
      {"M", "Zernike degree", [](RunConfig& c, const std::string& v) { c.M = to_int32("M", v); },
       [](const RunConfig& c) { return std::to_string(c.M); }},
      {"m", "radial panels", [](RunConfig& c, const std::string& v) { c.m = to_int32("m", v); },
       [](const RunConfig& c) { return std::to_string(c.m); }},
      {"k", "nodes per panel", [](RunConfig& c, const std::string& v) { c.k = to_int32("k", v); },
       [](const RunConfig& c) { return std::to_string(c.k); }},
      {"id_tol", "skeletonization tolerance",
       [](RunConfig& c, const std::string& v) { c.id_tol = to_real("id_tol", v); },
       [](const RunConfig& c) { return fmt(c.id_tol, 17); }},
      {"gmres_tol", "GMRES relative residual tolerance",
       [](RunConfig& c, const std::string& v) { c.gmres_tol = to_real("gmres_tol", v); },
       [](const RunConfig& c) { return fmt(c.gmres_tol, 17); }},
      {"incoming_tol", "incoming grid tolerance",
       [](RunConfig& c, const std::string& v) { c.incoming_tol = to_real("incoming_tol", v); },
       [](const RunConfig& c) { return fmt(c.incoming_tol, 17); }},
      {"max_iter", "GMRES iteration cap", [](RunConfig& c, const std::string& v) { c.max_iter = to_int32("max_iter", v); },
       [](const RunConfig& c) { return std::to_string(c.max_iter); }},
      {"per_level_T", "per-level outgoing operators: on | off | auto (on above 10000 patches)",
       [](RunConfig& c, const std::string& v) {
         if (v == "auto")
           c.per_level_T = Toggle::automatic;
         else
           c.per_level_T = to_bool("per_level_T", v) ? Toggle::on : Toggle::off;
       },
       [](const RunConfig& c) {
         return std::string(c.per_level_T == Toggle::on ? "on" : c.per_level_T == Toggle::off ? "off" : "auto");
       }},
      {"field_radius", "radius of the field sample sphere (default 1 -+ epsilon/5)",
       [](RunConfig& c, const std::string& v) { c.field_radius = to_real("field_radius", v); },
       [](const RunConfig& c) { return opt_str(c.field_radius); }},
      {"field_n_lat", "field grid latitudes", [](RunConfig& c, const std::string& v) { c.field_n_lat = to_int32("field_n_lat", v); },
       [](const RunConfig& c) { return std::to_string(c.field_n_lat); }},
      {"field_n_lon", "field grid longitudes", [](RunConfig& c, const std::string& v) { c.field_n_lon = to_int32("field_n_lon", v); },
       [](const RunConfig& c) { return std::to_string(c.field_n_lon); }},
      {"field_path", "write field samples here (empty: no field output)",
       [](RunConfig& c, const std::string& v) { c.field_path = v; }, [](const RunConfig& c) { return c.field_path; }},
      {"cache_dir", "operator cache directory (empty: no cache)",
       [](RunConfig& c, const std::string& v) { c.cache_dir = v; }, [](const RunConfig& c) { return c.cache_dir; }},
      {"workers", "worker threads", [](RunConfig& c, const std::string& v) { c.workers = to_int32("workers", v); },
       [](const RunConfig& c) { return std::to_string(c.workers); }},
      {"output_dir", "directory for summary.txt, coefficients.txt, density.txt",
       [](RunConfig& c, const std::string& v) { c.output_dir = v; }, [](const RunConfig& c) { return c.output_dir; }},
      {"write_density", "also dump fine-grid densities",
       [](RunConfig& c, const std::string& v) { c.write_density = to_bool("write_density", v); },
       [](const RunConfig& c) { return std::string(c.write_density ? "true" : "false"); }},
      {"residual_samples", "patches sampled for L2 residuals",
       [](RunConfig& c, const std::string& v) { c.residual_samples = to_int32("residual_samples", v); },
       [](const RunConfig& c) { return std::to_string(c.residual_samples); }},
      {"bench_N", "comma-separated patch counts for bench",
       [](RunConfig& c, const std::string& v) {
         std::vector<int> out;
         std::stringstream ss(v);
         std::string tok;
         while (std::getline(ss, tok, ',')) out.push_back(to_int32("bench_N", trim(tok)));
         if (out.empty()) throw ConfigError("bench_N", "empty list");
         c.bench_N = out;
       },
       [](const RunConfig& c) {
         std::string s;
         for (std::size_t i = 0; i < c.bench_N.size(); ++i) s += (i ? "," : "") + std::to_string(c.bench_N[i]);
         return s;
       }},
      {"bench_iters", "GMRES iterations timed per bench size",
       [](RunConfig& c, const std::string& v) { c.bench_iters = to_int32("bench_iters", v); },
       [](const RunConfig& c) { return std::to_string(c.bench_iters); }},
  };
  return keys;
}

inline void set_config_key(RunConfig& c, const std::string& key, const std::string& value) {
  for (const auto& k : config_keys())
    if (key == k.name) return k.set(c, value);
  throw ConfigError(key, "unknown key");
}

// need_N is false for bench, which takes its sizes from bench_N.
inline void validate(const RunConfig& c, bool need_N = true) {
  if (c.area_fraction && c.epsilon) throw ConfigError("epsilon", "conflicts with area_fraction; set only one");
  if (need_N && c.layout != LayoutKind::from_file && c.N < 1) throw ConfigError("N", "must be >= 1");
  if (c.layout == LayoutKind::from_file && c.layout_path.empty())
    throw ConfigError("layout_path", "required for layout = from_file");
  if (c.area_fraction && !(*c.area_fraction > 0 && *c.area_fraction < 1))
    throw ConfigError("area_fraction", "must lie in (0, 1)");
  if (c.epsilon && !(*c.epsilon > 0 && *c.epsilon < std::numbers::pi / 4))
    throw ConfigError("epsilon", "must lie in (0, pi/4)");
  if (!(c.min_sep_factor >= 2)) throw ConfigError("min_sep_factor", "must be >= 2");
  if (c.M < 0) throw ConfigError("M", "must be >= 0");
  if (c.m < 1) throw ConfigError("m", "must be >= 1");
  if (c.k < 2) throw ConfigError("k", "must be >= 2");
  auto tol = [](const char* key, double v) {
    if (!(v > 0 && v < 1)) throw ConfigError(key, "must lie in (0, 1)");
  };
  tol("id_tol", c.id_tol);
  tol("gmres_tol", c.gmres_tol);
  tol("incoming_tol", c.incoming_tol);
  if (c.max_iter < 1) throw ConfigError("max_iter", "must be >= 1");
  if (c.workers < 1) throw ConfigError("workers", "must be >= 1");
  if (c.residual_samples < 0) throw ConfigError("residual_samples", "must be >= 0");
  if (c.field_n_lat < 1) throw ConfigError("field_n_lat", "must be >= 1");
  if (c.field_n_lon < 1) throw ConfigError("field_n_lon", "must be >= 1");
  if (c.field_radius) {
    double r = *c.field_radius;
    if (c.kind == ProblemKind::interior ? !(r > 0 && r < 1) : !(r > 1))
      throw ConfigError("field_radius", "on the wrong side of the sphere for a " + std::string(to_string(c.kind)) + " problem");
  }
  if (c.bench_iters < 1) throw ConfigError("bench_iters", "must be >= 1");
  for (int n : c.bench_N)
    if (n < 1) throw ConfigError("bench_N", "sizes must be >= 1");
}

using Overrides = std::vector<std::pair<std::string, std::string>>;

// Flat "key = value" text; '#' starts a comment.
inline RunConfig parse_config_text(const std::string& text, const Overrides& overrides = {}, bool need_N = true) {
  RunConfig c;
  std::istringstream in(text);
  std::string line;
  std::map<std::string, int> seen;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto h = line.find('#');
    if (h != std::string::npos) line.erase(h);
    line = detail::trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(line, "line " + std::to_string(lineno) + ": expected 'key = value'");
    std::string key = detail::trim(line.substr(0, eq)), val = detail::trim(line.substr(eq + 1));
    if (seen.count(key)) throw ConfigError(key, "line " + std::to_string(lineno) + ": duplicate key");
    seen[key] = lineno;
    set_config_key(c, key, val);
  }
  for (const auto& [k, v] : overrides) set_config_key(c, k, v);
  validate(c, need_N);
  return c;
}

inline RunConfig parse_config(const std::string& path, const Overrides& overrides = {}, bool need_N = true) {
  std::string text;
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config", "cannot read '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    text = ss.str();
  }
  return parse_config_text(text, overrides, need_N);
}

inline std::string echo_config(const RunConfig& c) {
  std::ostringstream o;
  for (const auto& k : config_keys()) o << "config." << k.name << " = " << k.get(c) << "\n";
  return o.str();
}

// ---- orchestration ----------------------------------------------------------------------

namespace detail {

template <class F>
auto staged(const char* stage, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }
}

inline LayoutSpec layout_spec(const RunConfig& c, int N) {
  LayoutSpec s;
  s.kind = c.layout;
  s.N = N;
  s.path = c.layout_path;
  s.seed = c.seed;
  s.min_sep_factor = c.min_sep_factor;
  if (c.epsilon)
    s.epsilon = c.epsilon;
  else
    s.area_fraction = c.area_fraction.value_or(0.05);
  return s;
}

inline OnePatchKey onepatch_key(const RunConfig& c, double epsilon) {
  OnePatchKey k;
  k.kind = c.kind;
  k.epsilon = epsilon;
  k.M = c.M;
  k.m = c.m;
  k.k = c.k;
  k.n_theta = 2 * c.M + 2;
  return k;
}

inline ScatterOptions scatter_options(const RunConfig& c, int N) {
  ScatterOptions o;
  o.id_tol = c.id_tol;
  o.incoming_tol = c.incoming_tol;
  o.per_level_T = c.per_level(N);
  o.workers = c.workers;
  o.cache_dir = c.cache_dir;
  return o;
}

inline std::vector<int> sample_patches(int N, int count) {
  std::vector<int> p;
  count = std::min(count, N);
  for (int s = 0; s < count; ++s) {
    int i = count == 1 ? 0 : static_cast<int>(std::llround(static_cast<double>(s) * (N - 1) / (count - 1)));
    if (p.empty() || p.back() != i) p.push_back(i);
  }
  return p;
}

}  // namespace detail

struct Prepared {
  PatchLayout layout;
  std::shared_ptr<const OnePatchOperator> op;
  bool onepatch_cached = false;
  double t_layout = 0, t_precompute = 0;
};

// Layout plus the cached or freshly built one-patch operator.
inline Prepared prepare(const RunConfig& c, int N, std::ostream& log) {
  Prepared p;
  auto t0 = std::chrono::steady_clock::now();
  p.layout = detail::staged("layout", [&] { return make_layout(detail::layout_spec(c, N)); });
  p.t_layout = detail::seconds_since(t0);
  t0 = std::chrono::steady_clock::now();
  p.op = detail::staged("precompute", [&] {
    auto key = detail::onepatch_key(c, p.layout.epsilon);
    return std::make_shared<const OnePatchOperator>(get_onepatch(key, c.cache_dir, c.workers, &p.onepatch_cached));
  });
  p.t_precompute = detail::seconds_since(t0);
  if (p.onepatch_cached)
    log << "precompute: one-patch operator loaded from cache, step skipped\n";
  else
    log << "precompute: one-patch operator built in " << detail::fmt(p.t_precompute, 4) << " s\n";
  return p;
}

inline int write_field_samples(const ScatterState& S, const SolveResult& r, double radius, int n_lat, int n_lon,
                               const std::string& path) {
  if (S.kind == ProblemKind::interior ? !(radius > 0 && radius < 1) : !(radius > 1))
    throw std::invalid_argument("write_field_samples: radius " + detail::fmt(radius) + " is on the wrong side for a " +
                                to_string(S.kind) + " problem");
  if (n_lat < 1 || n_lon < 1) throw std::invalid_argument("write_field_samples: empty grid");
  std::vector<Vec3> pts;
  pts.reserve(static_cast<std::size_t>(n_lat) * n_lon);
  for (int a = 0; a < n_lat; ++a) {
    const double th = (a + 0.5) * std::numbers::pi / n_lat;
    for (int b = 0; b < n_lon; ++b) {
      const double ph = 2.0 * std::numbers::pi * b / n_lon;
      pts.push_back(radius * Vec3(std::sin(th) * std::cos(ph), std::sin(th) * std::sin(ph), std::cos(th)));
    }
  }
  auto v = evaluate_field(S, r, pts);
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << "# nesc field kind=" << to_string(S.kind) << " N=" << S.N() << " epsilon=" << detail::fmt(S.layout.epsilon, 17)
      << " radius=" << detail::fmt(radius, 17) << " n_lat=" << n_lat << " n_lon=" << n_lon
      << " value=" << (S.kind == ProblemKind::interior ? "mfpt" : "u") << " columns: x y z value\n";
  char buf[128];
  for (std::size_t n = 0; n < pts.size(); ++n) {
    std::snprintf(buf, sizeof buf, "%.10g %.10g %.10g %.12g\n", pts[n][0], pts[n][1], pts[n][2], v[n]);
    out << buf;
  }
  if (!out) throw std::runtime_error("write failed for '" + path + "'");
  return static_cast<int>(pts.size());
}

struct RunReport {
  RunConfig config;
  std::shared_ptr<ScatterState> state;
  SolveResult result;
  std::vector<int> residual_patches;
  std::vector<double> residuals;
  double coeff_tail = 0;
  bool onepatch_cached = false;
  double t_layout = 0, t_precompute = 0, t_tree = 0, t_solve = 0, t_post = 0;
  std::string summary;
  std::vector<std::string> files;
};

namespace detail {

// Largest ratio, over patches, of the degree-M coefficient block norm to the full block norm.
inline double coefficient_tail(const ZernikeBasis& b, const Eigen::MatrixXd& C) {
  double worst = 0;
  for (int i = 0; i < C.cols(); ++i) {
    double all = C.col(i).norm(), top = 0;
    for (int j = 0; j < b.K; ++j)
      if (b.modes[j].n == b.M) top += C(j, i) * C(j, i);
    if (all > 0) worst = std::max(worst, std::sqrt(top) / all);
  }
  return worst;
}

inline std::string make_summary(const RunReport& R) {
  const auto& r = R.result;
  const auto& S = *R.state;
  std::ostringstream o;
  o << "# nesc solve summary\n" << echo_config(R.config);
  o << "N = " << S.N() << "\n";
  o << "epsilon = " << fmt(S.layout.epsilon) << "\n";
  o << "area_fraction = " << fmt(S.layout.area_fraction()) << "\n";
  o << "K = " << S.K() << "\n";
  o << "I_sigma = " << fmt(r.I_sigma) << "\n";
  if (r.kind == ProblemKind::interior) {
    o << "mu = " << fmt(r.mu) << "\n";
    o << "D = " << fmt(r.D) << "\n";
  } else {
    o << "J = " << fmt(r.J) << "\n";
  }
  o << "gmres_iterations = " << r.iterations << "\n";
  o << "gmres_converged = " << (r.converged ? "true" : "false") << "\n";
  o << "gmres_relative_residual = " << fmt(r.history.empty() ? 1.0 : r.history.back(), 3) << "\n";
  o << "coefficient_tail = " << fmt(R.coeff_tail, 3) << "\n";
  double rmax = 0;
  for (std::size_t n = 0; n < R.residuals.size(); ++n) {
    o << "residual.patch_" << R.residual_patches[n] << " = " << fmt(R.residuals[n], 3) << "\n";
    rmax = std::max(rmax, R.residuals[n]);
  }
  if (!R.residuals.empty()) o << "residual.max = " << fmt(rmax, 3) << "\n";
  o << "tree.depth = " << S.tree.depth << "\n";
  o << "tree.grid_boxes = " << S.stats.grid_boxes << "\n";
  o << "tree.direct_boxes = " << S.stats.direct_boxes << "\n";
  o << "tree.per_level_T = " << (S.opt.per_level_T ? "on" : "off") << "\n";
  o << "precompute.onepatch = " << (R.onepatch_cached ? "cached" : "built") << "\n";
  o << "precompute.outgoing = " << (S.stats.outgoing_cached ? "cached" : "built") << "\n";
  o << "time.layout = " << fmt(R.t_layout, 4) << "\n";
  o << "time.precompute = " << fmt(R.t_precompute, 4) << "\n";
  o << "time.tree = " << fmt(R.t_tree, 4) << "\n";
  o << "time.solve = " << fmt(R.t_solve, 4) << "\n";
  double per = r.iteration_seconds.empty()
                   ? 0.0
                   : std::accumulate(r.iteration_seconds.begin(), r.iteration_seconds.end(), 0.0) /
                         static_cast<double>(r.iteration_seconds.size());
  o << "time.per_iteration = " << fmt(per, 4) << "\n";
  const double nm = std::max(1, r.timing.matvecs);
  o << "time.matvec.outgoing = " << fmt(r.timing.outgoing / nm, 4) << "\n";
  o << "time.matvec.incoming = " << fmt(r.timing.incoming / nm, 4) << "\n";
  o << "time.matvec.evaluate = " << fmt(r.timing.evaluate / nm, 4) << "\n";
  o << "time.matvec.analyze = " << fmt(r.timing.analyze / nm, 4) << "\n";
  o << "time.post = " << fmt(R.t_post, 4) << "\n";
  return o.str();
}

}  // namespace detail

// Precompute, tree, solve, post-process; writes summary.txt and coefficients.txt into output_dir.
inline RunReport run(const RunConfig& c, std::ostream& log) {
  validate(c);
  RunReport R;
  R.config = c;
  auto P = prepare(c, c.N, log);
  R.onepatch_cached = P.onepatch_cached;
  R.t_layout = P.t_layout;
  R.t_precompute = P.t_precompute;
  const int N = P.layout.N;
  auto t0 = std::chrono::steady_clock::now();
  R.state = detail::staged("tree", [&] {
    return std::make_shared<ScatterState>(
        make_scatter_state(c.kind, P.layout, P.op, detail::scatter_options(c, N)));
  });
  R.t_tree = detail::seconds_since(t0);
  const auto& S = *R.state;
  log << "tree: depth " << S.tree.depth << ", " << S.stats.grid_boxes << " grid boxes, outgoing operator "
      << (S.stats.outgoing_cached ? "loaded from cache" : "built") << "\n";
  t0 = std::chrono::steady_clock::now();
  R.result = detail::staged("solve", [&] {
    return solve(S, c.gmres_tol, c.max_iter, [&](int k, double rel) {
      log << "gmres " << k << " " << detail::fmt(rel, 3) << "\n";
    });
  });
  R.t_solve = detail::seconds_since(t0);
  if (!R.result.converged) log << "solve: GMRES did not reach gmres_tol in " << c.max_iter << " iterations\n";
  t0 = std::chrono::steady_clock::now();
  detail::staged("post", [&] {
    R.coeff_tail = detail::coefficient_tail(S.op->basis, R.result.coeffs);
    R.residual_patches = detail::sample_patches(N, c.residual_samples);
    if (!R.residual_patches.empty()) R.residuals = residuals_l2(S, R.result.coeffs, R.residual_patches);
    std::filesystem::create_directories(c.output_dir);
    auto dir = std::filesystem::path(c.output_dir);
    {
      auto path = (dir / "coefficients.txt").string();
      std::ofstream out(path);
      if (!out) throw std::runtime_error("cannot write '" + path + "'");
      out << "# nesc coefficients kind=" << to_string(c.kind) << " N=" << N << " K=" << S.K() << " M=" << c.M
          << " epsilon=" << detail::fmt(S.layout.epsilon, 17) << " rows=patches\n";
      char buf[32];
      for (int i = 0; i < N; ++i) {
        for (int j = 0; j < S.K(); ++j) {
          std::snprintf(buf, sizeof buf, "%.17g", R.result.coeffs(j, i));
          out << (j ? " " : "") << buf;
        }
        out << "\n";
      }
      R.files.push_back(path);
    }
    if (c.write_density) {
      auto path = (dir / "density.txt").string();
      std::ofstream out(path);
      if (!out) throw std::runtime_error("cannot write '" + path + "'");
      const auto& g = S.op->grid;
      out << "# nesc density kind=" << to_string(c.kind) << " N=" << N << " nodes=" << g.n_f()
          << " columns: patch t theta weight sigma\n";
      char buf[128];
      for (int i = 0; i < N; ++i) {
        Eigen::VectorXd sig = recover_density(S, R.result, i);
        for (int l = 0; l < g.n_f(); ++l) {
          std::snprintf(buf, sizeof buf, "%d %.17g %.17g %.17g %.17g\n", i, g.node_t(l), g.node_theta(l), g.w[l], sig[l]);
          out << buf;
        }
      }
      R.files.push_back(path);
    }
    if (!c.field_path.empty()) {
      const double eps = S.layout.epsilon;
      double radius = c.field_radius.value_or(c.kind == ProblemKind::interior ? 1 - eps / 5 : 1 + eps / 5);
      write_field_samples(S, R.result, radius, c.field_n_lat, c.field_n_lon, c.field_path);
      R.files.push_back(c.field_path);
    }
    return 0;
  });
  R.t_post = detail::seconds_since(t0);
  R.summary = detail::make_summary(R);
  detail::staged("post", [&] {
    auto path = (std::filesystem::path(c.output_dir) / "summary.txt").string();
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write '" + path + "'");
    out << R.summary;
    R.files.push_back(path);
    return 0;
  });
  return R;
}

// ---- benchmark --------------------------------------------------------------------------

struct NlogNFit {
  double c = 0;
  std::vector<double> deviation;  // (t - c N log N) / (c N log N)
  double max_abs_deviation = 0;
};

// c fitted in log space (geometric mean of t / (N log N)), the natural scale for timings.
inline NlogNFit fit_nlogn(const std::vector<int>& N, const std::vector<double>& t) {
  if (N.size() != t.size() || N.empty()) throw std::invalid_argument("fit_nlogn: size mismatch");
  NlogNFit f;
  double s = 0;
  for (std::size_t i = 0; i < N.size(); ++i) {
    if (N[i] < 2 || !(t[i] > 0)) throw std::invalid_argument("fit_nlogn: need N >= 2 and positive times");
    s += std::log(t[i] / (N[i] * std::log(static_cast<double>(N[i]))));
  }
  f.c = std::exp(s / static_cast<double>(N.size()));
  for (std::size_t i = 0; i < N.size(); ++i) {
    double model = f.c * N[i] * std::log(static_cast<double>(N[i]));
    f.deviation.push_back((t[i] - model) / model);
    f.max_abs_deviation = std::max(f.max_abs_deviation, std::abs(f.deviation.back()));
  }
  return f;
}

struct BenchPoint {
  int N = 0;
  double epsilon = 0;
  double setup_seconds = 0;
  double per_iteration = 0;
  int iterations = 0;
  StageTiming timing;
};

struct BenchReport {
  std::vector<BenchPoint> points;
  NlogNFit fit;
  double total_seconds = 0;
};

// Time per GMRES iteration over bench_N; per_level_T = auto counts as on here.
inline BenchReport run_bench(const RunConfig& c0, std::ostream& log) {
  RunConfig c = c0;
  validate(c, false);
  if (c.epsilon) throw ConfigError("epsilon", "bench scales epsilon with N; give area_fraction instead");
  if (c.per_level_T == Toggle::automatic) c.per_level_T = Toggle::on;
  BenchReport B;
  auto t_all = std::chrono::steady_clock::now();
  std::vector<int> Ns;
  std::vector<double> ts;
  for (int N : c.bench_N) {
    auto t0 = std::chrono::steady_clock::now();
    auto P = prepare(c, N, log);
    auto S = detail::staged("tree", [&] { return make_scatter_state(c.kind, P.layout, P.op, detail::scatter_options(c, N)); });
    BenchPoint b;
    b.N = N;
    b.epsilon = P.layout.epsilon;
    b.setup_seconds = detail::seconds_since(t0);
    auto r = detail::staged("solve", [&] { return solve(S, c.gmres_tol, c.bench_iters); });
    b.iterations = static_cast<int>(r.iteration_seconds.size());
    if (b.iterations == 0) throw StageError("bench", "GMRES finished without iterating");
    b.per_iteration = std::accumulate(r.iteration_seconds.begin(), r.iteration_seconds.end(), 0.0) / b.iterations;
    b.timing = r.timing;
    log << "bench N=" << N << " epsilon=" << detail::fmt(b.epsilon) << " setup " << detail::fmt(b.setup_seconds, 4)
        << " s, " << detail::fmt(b.per_iteration, 4) << " s/iteration over " << b.iterations << "\n";
    B.points.push_back(b);
    Ns.push_back(N);
    ts.push_back(b.per_iteration);
  }
  if (Ns.size() >= 2) B.fit = fit_nlogn(Ns, ts);
  B.total_seconds = detail::seconds_since(t_all);
  return B;
}

inline std::string bench_table(const BenchReport& B) {
  std::ostringstream o;
  o << "# N epsilon setup_s per_iteration_s ratio_to_first nlogn_ratio deviation\n";
  for (std::size_t i = 0; i < B.points.size(); ++i) {
    const auto& p = B.points[i];
    const auto& q = B.points[0];
    double nl = p.N * std::log(static_cast<double>(p.N)) / (q.N * std::log(static_cast<double>(q.N)));
    o << p.N << " " << detail::fmt(p.epsilon) << " " << detail::fmt(p.setup_seconds, 4) << " "
      << detail::fmt(p.per_iteration, 4) << " " << detail::fmt(p.per_iteration / q.per_iteration, 4) << " "
      << detail::fmt(nl, 4) << " " << (B.fit.deviation.size() > i ? detail::fmt(B.fit.deviation[i], 3) : "-") << "\n";
  }
  o << "fit.c = " << detail::fmt(B.fit.c, 4) << "\n";
  o << "fit.max_abs_deviation = " << detail::fmt(B.fit.max_abs_deviation, 3) << "\n";
  o << "time.total = " << detail::fmt(B.total_seconds, 4) << "\n";
  return o.str();
}

// ---- invariant suite --------------------------------------------------------------------

struct CheckLine {
  std::string name;
  bool pass = false;
  std::string detail;
};

inline std::vector<CheckLine> run_checks(const RunConfig& c, std::ostream& log) {
  validate(c);
  std::vector<CheckLine> out;
  auto add = [&](std::string name, bool pass, std::string d) {
    log << (pass ? "PASS " : "FAIL ") << name << ": " << d << "\n";
    out.push_back({std::move(name), pass, std::move(d)});
  };
  auto P = prepare(c, c.N, log);
  const auto& L = P.layout;
  const auto& op = *P.op;
  const double dmin = min_pair_distance(L.centers);
  add("layout_separation", L.N < 2 || dmin >= c.min_sep_factor * L.epsilon * (1 - 1e-12),
      "min distance / epsilon = " + detail::fmt(L.N < 2 ? 0.0 : dmin / L.epsilon, 6));

  double worst = 0;
  OnePatchResidual opres(op, c.workers);
  for (int j = 0; j < op.K(); ++j) worst = std::max(worst, opres(Eigen::VectorXd::Unit(op.K(), j)));
  add("onepatch_residual", worst < 1e-8, "max over basis data " + detail::fmt(worst, 3));

  auto S = detail::staged("tree", [&] { return make_scatter_state(c.kind, L, P.op, detail::scatter_options(c, L.N)); });
  auto audit = audit_pair_coverage(S.tree);
  add("tree_pair_coverage", audit.ok() && audit.max_ilist <= 27 && audit.max_leaf_neighbors <= 8,
      "missing " + std::to_string(audit.missing) + ", duplicated " + std::to_string(audit.duplicated) + ", max ilist " +
          std::to_string(audit.max_ilist));

  std::mt19937 rng(c.seed);
  std::normal_distribution<double> nd;
  Eigen::VectorXd x(static_cast<Eigen::Index>(S.K()) * S.N()), yf, yf2, yd;
  for (auto& v : x) v = nd(rng);
  apply_system_fast(S, x, yf);
  apply_system_fast(S, x, yf2);
  apply_system_direct(S, x, yd);
  const double rel = (yf - yd).norm() / yd.norm();
  const double allow = 100 * (c.incoming_tol + c.id_tol);
  add("fast_vs_direct", rel < allow, "relative difference " + detail::fmt(rel, 3) + " (allowed " + detail::fmt(allow, 3) + ")");
  add("matvec_deterministic", (yf - yf2).cwiseAbs().maxCoeff() == 0.0, "repeated matvec bitwise equal");

  auto r = detail::staged("solve", [&] { return solve(S, c.gmres_tol, c.max_iter); });
  add("gmres_converged", r.converged, std::to_string(r.iterations) + " iterations");
  auto res = residuals_l2(S, r.coeffs, detail::sample_patches(S.N(), std::max(1, c.residual_samples)));
  double rmax = *std::max_element(res.begin(), res.end());
  const double bound = 10 * std::max(detail::coefficient_tail(op.basis, r.coeffs), c.gmres_tol);
  add("patch_residuals", rmax < bound,
      "max sampled residual " + detail::fmt(rmax, 3) + " (bound from coefficient tail " + detail::fmt(bound, 3) + ")");
  if (c.kind == ProblemKind::interior) {
    add("mu_from_isigma", r.mu == 1.0 / (3.0 * r.I_sigma) - 0.6, "mu = " + detail::fmt(r.mu));
    FieldOptions fo;
    fo.raw = true;
    double v0 = evaluate_field(S, r, {Vec3::Zero()}, fo)[0];
    double err = std::abs(v0 - 2 * r.I_sigma);
    add("centre_value", err < 1e-9 * std::max(1.0, std::abs(2 * r.I_sigma)), "|v(0) - 2 I_sigma| = " + detail::fmt(err, 3));
  } else {
    add("flux_identity", r.J == -r.I_sigma, "J = " + detail::fmt(r.J));
    FieldOptions fo;
    fo.raw = true;
    const double R = 1e4;
    double acc = 0;
    const std::vector<Vec3> dirs{Vec3(1, 0, 0), Vec3(-1, 0, 0), Vec3(0, 1, 0), Vec3(0, -1, 0), Vec3(0, 0, 1), Vec3(0, 0, -1)};
    std::vector<Vec3> pts;
    for (const auto& d : dirs) pts.push_back(R * d);
    for (double u : evaluate_field(S, r, pts, fo)) acc += R * u;
    acc /= static_cast<double>(dirs.size());
    double err = std::abs(acc - r.I_sigma) / std::abs(r.I_sigma);
    add("far_field", err < 1e-3, "|x| u -> " + detail::fmt(acc) + " vs I_sigma " + detail::fmt(r.I_sigma));
  }
  return out;
}

// ---- command line -----------------------------------------------------------------------

struct Command {
  std::string name;
  RunConfig config;
};

// Returns nullopt when CLI11 handled the arguments itself (help); exit_code is set in that case.
inline std::optional<Command> parse_command_line(int argc, const char* const* argv, int& exit_code, std::ostream& out,
                                                 std::ostream& err) {
  CLI::App app{"nesc: narrow escape and narrow capture on the unit sphere"};
  app.require_subcommand(1);
  struct Sub {
    CLI::App* app;
    std::string config;
    std::map<std::string, std::string> values;
  };
  std::vector<std::unique_ptr<Sub>> subs;
  const std::vector<std::pair<std::string, std::string>> names{
      {"solve", "precompute, build the tree, solve and write outputs"},
      {"precompute", "build and cache the one-patch and outgoing operators"},
      {"bench", "time per GMRES iteration over bench_N and an N log N fit"},
      {"check", "run the invariant suite on the configured problem"}};
  for (const auto& [name, help] : names) {
    auto s = std::make_unique<Sub>();
    s->app = app.add_subcommand(name, help);
    s->app->add_option("-c,--config", s->config, "flat key = value config file");
    for (const auto& k : config_keys()) s->app->add_option(std::string("--") + k.name, s->values[k.name], k.help);
    subs.push_back(std::move(s));
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    exit_code = app.exit(e, out, err);
    return std::nullopt;
  }
  for (auto& s : subs)
    if (s->app->parsed()) {
      Overrides ov;
      for (const auto& k : config_keys()) {
        auto* o = s->app->get_option(std::string("--") + k.name);
        if (o->count() > 0) ov.emplace_back(k.name, s->values[k.name]);
      }
      Command cmd;
      cmd.name = s->app->get_name();
      cmd.config = parse_config(s->config, ov, cmd.name != "bench");
      return cmd;
    }
  exit_code = 2;
  return std::nullopt;
}

inline int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  try {
    int code = 0;
    std::optional<Command> cmd;
    try {
      cmd = parse_command_line(argc, argv, code, out, err);
    } catch (const ConfigError& e) {
      throw StageError("config", e.what());
    }
    if (!cmd) return code;
    const RunConfig& c = cmd->config;
    if (cmd->name == "solve") {
      auto R = run(c, err);
      out << R.summary;
      return R.result.converged ? 0 : 3;
    }
    if (cmd->name == "precompute") {
      auto P = prepare(c, c.N, err);
      detail::staged("precompute", [&] {
        bool hit = false;
        auto t0 = std::chrono::steady_clock::now();
        auto o = get_outgoing(*P.op, c.id_tol, -1, c.cache_dir, c.workers, &hit);
        err << "precompute: outgoing operator (rank " << o.p() << ") "
            << (hit ? "loaded from cache" : "built in " + detail::fmt(detail::seconds_since(t0), 4) + " s") << "\n";
        return 0;
      });
      out << echo_config(c) << "epsilon = " << detail::fmt(P.layout.epsilon) << "\n"
          << "onepatch = " << (P.onepatch_cached ? "cached" : "built") << "\n"
          << "cache_dir = " << (c.cache_dir.empty() ? "(none: nothing stored)" : c.cache_dir) << "\n";
      return 0;
    }
    if (cmd->name == "bench") {
      auto B = run_bench(c, err);
      out << echo_config(c) << bench_table(B);
      return 0;
    }
    auto lines = run_checks(c, out);
    int failed = 0;
    for (const auto& l : lines) failed += !l.pass;
    out << (failed ? std::to_string(failed) + " check(s) failed\n" : "all checks passed\n");
    return failed ? 1 : 0;
  } catch (const StageError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const ConfigError& e) {
    err << "error: [config] " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: [run] " << e.what() << "\n";
    return 1;
  }
}

}  // namespace nesc
