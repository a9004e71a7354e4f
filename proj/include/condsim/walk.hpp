#pragma once

// Exact event-driven simulation of the variable-speed walk X: from x the walk
// crosses edge x (to x+1) or edge x-1 (to x-1), each edge ringing as an
// inhomogeneous Poisson clock with intensity b_t(edge).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "condsim/env.hpp"
#include "condsim/errors.hpp"
#include "condsim/io.hpp"
#include "condsim/parallel.hpp"
#include "condsim/random.hpp"

namespace condsim::walk {

using env::EnvironmentWindow;
using env::EnvSpec;

inline constexpr std::uint64_t kDefaultMaxSteps = 10'000'000;

struct PathRecord {
  std::int64_t start_vertex = 0;
  std::vector<double> jump_times;
  std::vector<std::int64_t> positions;  // position after each jump
  double horizon = 0.0;
  std::uint64_t seed = 0;
  bool truncated = false;

  std::size_t jumps_until(double t) const {
    return static_cast<std::size_t>(std::upper_bound(jump_times.begin(), jump_times.end(), t) - jump_times.begin());
  }
  // Right-continuous step interpolation.
  std::int64_t position_at(double t) const {
    const std::size_t k = jumps_until(t);
    return k == 0 ? start_vertex : positions[k - 1];
  }
};

// Grows the window around vertex x so that both incident edges are present.
// Fresh space is at least as wide as the current window.
inline EnvironmentWindow widen_around(const EnvironmentWindow& env, std::int64_t x) {
  const std::int64_t width = std::max<std::int64_t>(64, env.x_max() - env.x_min());
  const std::int64_t lo = std::min(env.x_min(), x - width);
  const std::int64_t hi = std::max(env.x_max(), x + width);
  return env::extend(env, lo, hi, env.t_min(), env.t_max());
}

// Core loop; on_jump(time, new_position) is called for every jump in order.
// Returns true when the step guard stopped the path.
template <class OnJump>
bool run_x(const EnvironmentWindow& env_in, std::int64_t x0, double horizon, std::uint64_t seed,
           std::uint64_t max_steps, bool allow_extension, OnJump&& on_jump) {
  if (!(horizon >= 0.0)) throw ConfigError("simulate_x: horizon must be non-negative");
  if (horizon == 0.0) return false;
  if (!env_in.covers_time(0.0) || !env_in.covers_time(horizon))
    throw ConfigError("simulate_x: environment window does not cover [0, horizon]");
  EnvironmentWindow env = env_in;
  Rng rng(seed);
  double t = 0.0;
  std::int64_t x = x0;
  for (std::uint64_t step = 0;; ++step) {
    if (!env.has_edge(x) || !env.has_edge(x - 1)) {
      if (!allow_extension)
        throw WindowExhausted("walk left the environment window at vertex " + std::to_string(x), x);
      env = widen_around(env, x);
    }
    // Both clocks are resampled after every jump; by memorylessness of the
    // exponential targets this is the same law as keeping residual clocks.
    const double tr = env.next_ring(x, t, rng.exponential());
    const double tl = env.next_ring(x - 1, t, rng.exponential());
    const double tn = std::min(tr, tl);
    if (!(tn <= horizon)) return false;
    if (step >= max_steps) return true;
    x += (tr <= tl) ? 1 : -1;
    t = tn;
    on_jump(t, x);
  }
}

inline PathRecord simulate_x(const EnvironmentWindow& env, std::int64_t x0, double horizon, std::uint64_t seed,
                             std::uint64_t max_steps = kDefaultMaxSteps, bool allow_extension = true) {
  PathRecord p;
  p.start_vertex = x0;
  p.horizon = horizon;
  p.seed = seed;
  p.truncated = run_x(env, x0, horizon, seed, max_steps, allow_extension, [&](double t, std::int64_t x) {
    p.jump_times.push_back(t);
    p.positions.push_back(x);
  });
  return p;
}

// Positions of a path at increasing sample times, without storing the path.
inline std::vector<std::int64_t> sample_x(const EnvironmentWindow& env, std::int64_t x0,
                                          const std::vector<double>& sample_times, std::uint64_t seed,
                                          std::uint64_t max_steps, bool allow_extension, bool* truncated = nullptr,
                                          std::uint64_t* jumps = nullptr) {
  std::vector<std::int64_t> out(sample_times.size(), x0);
  if (sample_times.empty()) return out;
  std::size_t k = 0;
  std::int64_t cur = x0;
  std::uint64_t count = 0;
  const bool trunc = run_x(env, x0, sample_times.back(), seed, max_steps, allow_extension, [&](double t, std::int64_t x) {
    while (k < sample_times.size() && sample_times[k] < t) out[k++] = cur;
    cur = x;
    ++count;
  });
  while (k < sample_times.size()) out[k++] = cur;
  if (truncated) *truncated = trunc;
  if (jumps) *jumps = count;
  return out;
}

enum class Mode { quenched, annealed };

inline const char* to_string(Mode m) { return m == Mode::quenched ? "quenched" : "annealed"; }

struct EnsembleOptions {
  std::int64_t x0 = 0;
  std::uint64_t max_steps = kDefaultMaxSteps;
  bool allow_extension = true;
  unsigned threads = 0;
};

struct EnsembleSummary {
  Mode mode = Mode::quenched;
  std::size_t n_paths = 0;
  std::vector<double> sample_times;
  std::vector<std::int64_t> positions;  // row-major, n_paths x sample_times
  EnvSpec spec;
  std::uint64_t master_seed = 0;
  std::vector<std::uint64_t> env_seeds;  // one entry when quenched
  std::size_t truncated_paths = 0;
  std::vector<std::uint64_t> jump_counts;

  std::int64_t at(std::size_t path, std::size_t time) const { return positions[path * sample_times.size() + time]; }
  std::vector<double> column(std::size_t time) const {
    std::vector<double> c(n_paths);
    for (std::size_t i = 0; i < n_paths; ++i) c[i] = static_cast<double>(at(i, time));
    return c;
  }
};

// Default spatial half-width: 6 sqrt(2 E[b] horizon) + 64.
inline std::int64_t default_half_width(const EnvSpec& spec, double horizon) {
  double mb = env::mean_rate(spec);
  if (!std::isfinite(mb)) mb = 1.0;  // heavy upper tails rely on extension
  return static_cast<std::int64_t>(std::ceil(6.0 * std::sqrt(2.0 * mb * horizon))) + 64;
}

inline EnvironmentWindow default_walk_window(const EnvSpec& spec, std::int64_t x0, double horizon,
                                             std::uint64_t env_seed) {
  const std::int64_t w = default_half_width(spec, horizon);
  return env::build_env(spec, x0 - w, x0 + w, 0.0, std::max(horizon, 1e-9), env_seed);
}

inline std::uint64_t path_seed(std::uint64_t master, std::size_t i) { return derive_tag(master, Tag::WalkPath, i); }
inline std::uint64_t env_seed(std::uint64_t master, std::size_t i) { return derive_tag(master, Tag::WalkEnv, i); }

inline void check_times(const std::vector<double>& ts) {
  if (ts.empty()) throw ConfigError("ensemble needs at least one sample time");
  for (std::size_t i = 0; i < ts.size(); ++i)
    if (!(ts[i] > 0.0) || (i > 0 && !(ts[i] > ts[i - 1])))
      throw ConfigError("sample times must be positive and strictly increasing");
}

// Quenched ensembles share an environment given by the caller (or a default
// window); annealed ensembles draw a fresh environment per path.
inline EnsembleSummary ensemble_x(const EnvSpec& spec, Mode mode, std::size_t n_paths,
                                  const std::vector<double>& sample_times, std::uint64_t master_seed,
                                  const EnsembleOptions& opt = {}, const EnvironmentWindow* quenched_env = nullptr) {
  if (n_paths == 0) throw ConfigError("ensemble needs n_paths >= 1");
  check_times(sample_times);
  EnsembleSummary s;
  s.mode = mode;
  s.n_paths = n_paths;
  s.sample_times = sample_times;
  s.spec = spec;
  s.master_seed = master_seed;
  s.positions.assign(n_paths * sample_times.size(), 0);
  s.jump_counts.assign(n_paths, 0);
  const double horizon = sample_times.back();
  std::vector<char> trunc(n_paths, 0);
  EnvironmentWindow shared;
  if (mode == Mode::quenched) {
    if (quenched_env) {
      shared = *quenched_env;
      s.env_seeds = {shared.seed()};
    } else {
      s.env_seeds = {env_seed(master_seed, 0)};
      shared = default_walk_window(spec, opt.x0, horizon, s.env_seeds[0]);
    }
  } else {
    s.env_seeds.resize(n_paths);
    for (std::size_t i = 0; i < n_paths; ++i) s.env_seeds[i] = env_seed(master_seed, i);
  }
  parallel_for(n_paths, resolve_threads(opt.threads), [&](std::size_t i) {
    try {
      bool tr = false;
      std::uint64_t jumps = 0;
      std::vector<std::int64_t> pos;
      if (mode == Mode::quenched) {
        pos = sample_x(shared, opt.x0, sample_times, path_seed(master_seed, i), opt.max_steps, opt.allow_extension,
                       &tr, &jumps);
      } else {
        const EnvironmentWindow e = default_walk_window(spec, opt.x0, horizon, s.env_seeds[i]);
        pos = sample_x(e, opt.x0, sample_times, path_seed(master_seed, i), opt.max_steps, opt.allow_extension, &tr,
                       &jumps);
      }
      std::copy(pos.begin(), pos.end(), s.positions.begin() + static_cast<std::ptrdiff_t>(i * sample_times.size()));
      trunc[i] = tr ? 1 : 0;
      s.jump_counts[i] = jumps;
    } catch (const WindowExhausted& e) {
      throw WindowExhausted("path " + std::to_string(i) + ": " + e.what(), e.vertex());
    }
  });
  s.truncated_paths = static_cast<std::size_t>(std::count(trunc.begin(), trunc.end(), 1));
  return s;
}

// X_{n t} / sqrt(n) per path (rows) and grid time (columns).
inline std::vector<std::vector<double>> rescale_paths(const EnsembleSummary& s, double n,
                                                      const std::vector<double>& t_grid) {
  if (!(n > 0.0)) throw ConfigError("rescale_paths: n must be positive");
  if (t_grid.size() != s.sample_times.size()) throw ConfigError("rescale_paths: grid size mismatch");
  for (std::size_t j = 0; j < t_grid.size(); ++j) {
    const double want = n * t_grid[j];
    if (std::abs(want - s.sample_times[j]) > 1e-12 * std::max(1.0, std::abs(want)))
      throw ConfigError("rescale_paths: sample time " + io::fmt(s.sample_times[j]) + " is not n*t for t = " +
                        io::fmt(t_grid[j]));
  }
  const double scale = 1.0 / std::sqrt(n);
  std::vector<std::vector<double>> out(s.n_paths, std::vector<double>(t_grid.size()));
  for (std::size_t i = 0; i < s.n_paths; ++i)
    for (std::size_t j = 0; j < t_grid.size(); ++j) out[i][j] = static_cast<double>(s.at(i, j)) * scale;
  return out;
}

inline std::vector<std::vector<double>> rescale_paths(const EnsembleSummary& s, double n) {
  std::vector<double> grid(s.sample_times.size());
  for (std::size_t j = 0; j < grid.size(); ++j) grid[j] = s.sample_times[j] / n;
  return rescale_paths(s, n, grid);
}

// ---------------------------------------------------------------------------
// Export

inline std::string to_csv(const EnsembleSummary& s) {
  std::ostringstream os;
  os << "path_id,time,position\n";
  for (std::size_t i = 0; i < s.n_paths; ++i)
    for (std::size_t j = 0; j < s.sample_times.size(); ++j)
      os << i << ',' << io::fmt(s.sample_times[j]) << ',' << s.at(i, j) << '\n';
  return os.str();
}

inline std::string to_csv(const std::vector<PathRecord>& paths) {
  std::ostringstream os;
  os << "path_id,time,position\n";
  for (std::size_t i = 0; i < paths.size(); ++i) {
    os << i << ",0," << paths[i].start_vertex << '\n';
    for (std::size_t k = 0; k < paths[i].jump_times.size(); ++k)
      os << i << ',' << io::fmt(paths[i].jump_times[k]) << ',' << paths[i].positions[k] << '\n';
  }
  return os.str();
}

// Binary trace layout, all fields little-endian 64-bit:
//   magic "CSIMTRC\0" | version (u64) | mode (u64) | master_seed (u64)
//   n_paths (u64) | n_times (u64) | times (f64 x n_times)
//   positions (i64, row-major n_paths x n_times)
inline constexpr char kTraceMagic[8] = {'C', 'S', 'I', 'M', 'T', 'R', 'C', '\0'};
inline constexpr std::uint64_t kTraceVersion = 1;

inline void write_trace(std::ostream& os, const EnsembleSummary& s) {
  os.write(kTraceMagic, 8);
  io::put_u64(os, kTraceVersion);
  io::put_u64(os, s.mode == Mode::quenched ? 0 : 1);
  io::put_u64(os, s.master_seed);
  io::put_u64(os, s.n_paths);
  io::put_u64(os, s.sample_times.size());
  for (double t : s.sample_times) io::put_f64(os, t);
  for (std::int64_t p : s.positions) io::put_i64(os, p);
}

inline EnsembleSummary read_trace(std::istream& is) {
  char magic[8];
  if (!is.read(magic, 8) || !std::equal(magic, magic + 8, kTraceMagic)) throw ConfigError("not a condsim trace");
  if (io::get_u64(is) != kTraceVersion) throw ConfigError("unsupported trace version");
  EnsembleSummary s;
  s.mode = io::get_u64(is) == 0 ? Mode::quenched : Mode::annealed;
  s.master_seed = io::get_u64(is);
  s.n_paths = io::get_u64(is);
  const std::uint64_t nt = io::get_u64(is);
  s.sample_times.resize(nt);
  for (auto& t : s.sample_times) t = io::get_f64(is);
  s.positions.resize(s.n_paths * nt);
  for (auto& p : s.positions) p = io::get_i64(is);
  return s;
}

}  // namespace condsim::walk
