#pragma once

// The dual walk Y, run backward in environment time: at elapsed time s it sits
// at y and jumps to y +- 1 with total rate 2 b_{-s}(y). Paths are produced by
// the time-change construction Y_t = Z_{N(A(t))}, where Z is a discrete simple
// random walk, N a unit Poisson process with arrivals tau_k, and
// A(t) = int_0^t 2 b_{-s}(Y_s) ds. The inverse clock W is built arrival by
// arrival by solving
//   int_{W(tau_k)}^{W(tau_{k+1})} 2 b_{-s}(Z_k) ds = tau_{k+1} - tau_k
// in closed form on the piecewise-constant track of edge Z_k.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "condsim/env.hpp"
#include "condsim/errors.hpp"
#include "condsim/io.hpp"
#include "condsim/parallel.hpp"
#include "condsim/random.hpp"
#include "condsim/stats.hpp"
#include "condsim/walk.hpp"

namespace condsim::dual {

using env::EnvironmentWindow;
using env::EnvSpec;

struct DualPathRecord {
  std::int64_t start_vertex = 0;
  std::vector<std::int8_t> srw_steps;    // Z_k - Z_{k-1}, one per arrival used
  std::vector<double> poisson_arrivals;  // tau_1 < tau_2 < ...
  std::vector<double> w_values;          // W(tau_k), the jump times of Y
  double horizon = 0.0;
  std::vector<std::pair<double, double>> clock_samples;  // (t, A(t))
  std::uint64_t seed = 0;
  bool truncated = false;

  std::size_t jumps_until(double t) const {
    return static_cast<std::size_t>(std::upper_bound(w_values.begin(), w_values.end(), t) - w_values.begin());
  }
  // Y_t = Z_{N(A(t))}.
  std::int64_t position_at(double t) const {
    std::int64_t z = start_vertex;
    const std::size_t n = jumps_until(t);
    for (std::size_t k = 0; k < n; ++k) z += srw_steps[k];
    return z;
  }
  std::int64_t final_position() const { return position_at(horizon); }
};

struct DualOptions {
  std::uint64_t max_steps = walk::kDefaultMaxSteps;
  bool allow_extension = true;
  // Negate every step direction. A path from x and a mirrored path from
  // -1-x with the same seed are antithetic partners.
  bool mirror_steps = false;
};

namespace detail {

// Shared construction. on_arrival(tau, w, step) fires for every arrival whose
// W lies within the horizon. Returns (final vertex, truncated flag) and fills
// A at the requested clock times (sorted ascending, within [0, horizon]).
template <class OnArrival>
std::pair<std::int64_t, bool> run_y(const EnvironmentWindow& env_in, std::int64_t x0, double horizon,
                                    std::uint64_t seed, const std::vector<double>& clock_times,
                                    std::vector<double>& clock_values, const DualOptions& opt,
                                    OnArrival&& on_arrival) {
  if (!(horizon >= 0.0)) throw ConfigError("simulate_y: horizon must be non-negative");
  clock_values.assign(clock_times.size(), 0.0);
  if (horizon == 0.0) return {x0, false};
  if (!env_in.covers_time(0.0) || !env_in.covers_time(-horizon))
    throw ConfigError("simulate_y: environment window does not cover [-horizon, 0]");
  EnvironmentWindow env = env_in;
  Rng rng(seed);
  std::int64_t z = x0;
  double tau = 0.0, w = 0.0;
  std::size_t next_clock = 0;
  auto ensure = [&](std::int64_t v) {
    if (env.has_edge(v)) return;
    if (!opt.allow_extension)
      throw WindowExhausted("dual walk left the environment window at vertex " + std::to_string(v), v);
    env = walk::widen_around(env, v);
  };
  // A on [w, w_next) is tau + 2 int_{w}^{t} b_{-u}(z) du.
  auto fill_clock = [&](double w_next) {
    while (next_clock < clock_times.size() && clock_times[next_clock] < w_next) {
      const double t = clock_times[next_clock];
      clock_values[next_clock++] = tau + 2.0 * env.integrated_rate(z, -t, -w);
    }
  };
  for (std::uint64_t step = 0;; ++step) {
    ensure(z);
    const double gap = rng.exponential();
    const int dir = opt.mirror_steps ? -rng.sign() : rng.sign();
    const double back = env.prev_ring(z, -w, 0.5 * gap);
    const double w_next = -back;  // +inf when the window start is passed
    if (!(w_next <= horizon)) {
      fill_clock(env::kInf);
      return {z, false};
    }
    if (step >= opt.max_steps) {
      fill_clock(env::kInf);
      return {z, true};
    }
    fill_clock(w_next);
    tau += gap;
    w = w_next;
    z += dir;
    on_arrival(tau, w, dir);
  }
}

}  // namespace detail

inline std::vector<double> normalized_clock_times(std::vector<double> ts, double horizon) {
  for (double t : ts)
    if (!(t >= 0.0 && t <= horizon)) throw ConfigError("clock sample times must lie in [0, horizon]");
  ts.push_back(horizon);
  std::sort(ts.begin(), ts.end());
  ts.erase(std::unique(ts.begin(), ts.end()), ts.end());
  return ts;
}

inline DualPathRecord simulate_y(const EnvironmentWindow& env, std::int64_t x0, double horizon, std::uint64_t seed,
                                 std::vector<double> clock_times = {}, const DualOptions& opt = {}) {
  DualPathRecord p;
  p.start_vertex = x0;
  p.horizon = horizon;
  p.seed = seed;
  clock_times = normalized_clock_times(std::move(clock_times), horizon);
  std::vector<double> values;
  const auto res = detail::run_y(env, x0, horizon, seed, clock_times, values, opt, [&](double tau, double w, int d) {
    p.poisson_arrivals.push_back(tau);
    p.w_values.push_back(w);
    p.srw_steps.push_back(static_cast<std::int8_t>(d));
  });
  p.truncated = res.second;
  for (std::size_t i = 0; i < clock_times.size(); ++i) p.clock_samples.emplace_back(clock_times[i], values[i]);
  return p;
}

// A(t) recomputed from the realized path by integrating 2 b_{-s}(Y_s).
inline double recompute_clock(const EnvironmentWindow& env_in, const DualPathRecord& p, double t) {
  EnvironmentWindow env = env_in;
  double acc = 0.0, s = 0.0;
  std::int64_t y = p.start_vertex;
  for (std::size_t k = 0; k < p.w_values.size() && p.w_values[k] <= t; ++k) {
    if (!env.has_edge(y)) env = walk::widen_around(env, y);
    acc += 2.0 * env.integrated_rate(y, -p.w_values[k], -s);
    s = p.w_values[k];
    y += p.srw_steps[k];
  }
  if (!env.has_edge(y)) env = walk::widen_around(env, y);
  acc += 2.0 * env.integrated_rate(y, -t, -s);
  return acc;
}

// Compact ensemble output: the end point, A at the clock times and the
// arrival count of each path.
struct DualSummary {
  std::size_t n_paths = 0;
  double horizon = 0.0;
  std::vector<double> clock_times;
  std::vector<double> clock_values;  // row-major n_paths x clock_times
  std::vector<std::int64_t> final_positions;
  std::vector<std::uint64_t> arrivals;
  std::size_t truncated_paths = 0;
  std::uint64_t master_seed = 0;

  double clock(std::size_t path, std::size_t j) const { return clock_values[path * clock_times.size() + j]; }
};

inline std::uint64_t path_seed(std::uint64_t master, std::size_t i) { return derive_tag(master, Tag::DualPath, i); }
inline std::uint64_t env_seed(std::uint64_t master, std::size_t i) { return derive_tag(master, Tag::DualEnv, i); }

inline EnvironmentWindow default_dual_window(const EnvSpec& spec, std::int64_t x0, double horizon,
                                             std::uint64_t env_seed) {
  const std::int64_t w = walk::default_half_width(spec, horizon);
  return env::build_env(spec, x0 - w, x0 + w, -std::max(horizon, 1e-9), 0.0, env_seed);
}

struct DualEnsembleOptions {
  std::int64_t x0 = 0;
  bool annealed = false;
  unsigned threads = 0;
  DualOptions path;
};

// Quenched (shared window, given or default) or annealed ensemble of dual paths.
inline DualSummary ensemble_y(const EnvSpec& spec, std::size_t n_paths, double horizon, std::uint64_t master_seed,
                              std::vector<double> clock_times = {}, const DualEnsembleOptions& opt = {},
                              const EnvironmentWindow* quenched_env = nullptr) {
  if (n_paths == 0) throw ConfigError("dual ensemble needs n_paths >= 1");
  DualSummary s;
  s.n_paths = n_paths;
  s.horizon = horizon;
  s.master_seed = master_seed;
  s.clock_times = normalized_clock_times(std::move(clock_times), horizon);
  const std::size_t nc = s.clock_times.size();
  s.clock_values.assign(n_paths * nc, 0.0);
  s.final_positions.assign(n_paths, 0);
  s.arrivals.assign(n_paths, 0);
  std::vector<char> trunc(n_paths, 0);
  EnvironmentWindow shared;
  if (!opt.annealed)
    shared = quenched_env ? *quenched_env : default_dual_window(spec, opt.x0, horizon, env_seed(master_seed, 0));
  parallel_for(n_paths, resolve_threads(opt.threads), [&](std::size_t i) {
    const EnvironmentWindow e = opt.annealed ? default_dual_window(spec, opt.x0, horizon, env_seed(master_seed, i))
                                             : shared;
    std::vector<double> values;
    std::uint64_t count = 0;
    try {
      const auto res = detail::run_y(e, opt.x0, horizon, path_seed(master_seed, i), s.clock_times, values, opt.path,
                                     [&](double, double, int) { ++count; });
      s.final_positions[i] = res.first;
      trunc[i] = res.second ? 1 : 0;
    } catch (const WindowExhausted& ex) {
      throw WindowExhausted("dual path " + std::to_string(i) + ": " + ex.what(), ex.vertex());
    }
    s.arrivals[i] = count;
    std::copy(values.begin(), values.end(), s.clock_values.begin() + static_cast<std::ptrdiff_t>(i * nc));
  });
  s.truncated_paths = static_cast<std::size_t>(std::count(trunc.begin(), trunc.end(), 1));
  return s;
}

inline DualSummary summarize(const std::vector<DualPathRecord>& paths) {
  if (paths.empty()) throw ConfigError("empty dual ensemble");
  DualSummary s;
  s.n_paths = paths.size();
  s.horizon = paths.front().horizon;
  for (const auto& c : paths.front().clock_samples) s.clock_times.push_back(c.first);
  for (const auto& p : paths) {
    if (p.horizon != s.horizon || p.clock_samples.size() != s.clock_times.size())
      throw ConfigError("dual ensemble paths must share horizon and clock grid");
    for (const auto& c : p.clock_samples) s.clock_values.push_back(c.second);
    s.final_positions.push_back(p.final_position());
    s.arrivals.push_back(p.w_values.size());
    if (p.truncated) ++s.truncated_paths;
  }
  return s;
}

struct ClockSlope {
  stats::Estimate slope;  // mean of A(horizon)/horizon with SE
  double spread = 0.0;    // sample standard deviation across paths
  double ci_low = 0.0, ci_high = 0.0;
};

// Estimates lim A(t)/t from A(horizon)/horizon across paths.
inline ClockSlope clock_slope(const DualSummary& s) {
  if (s.n_paths == 0) throw ConfigError("clock_slope: empty ensemble");
  if (!(s.horizon > 0.0)) throw ConfigError("clock_slope: horizon must be positive");
  const std::size_t j = s.clock_times.size() - 1;
  std::vector<double> r(s.n_paths);
  for (std::size_t i = 0; i < s.n_paths; ++i) r[i] = s.clock(i, j) / s.horizon;
  ClockSlope c;
  c.slope = stats::mean_se(r);
  c.spread = c.slope.se * std::sqrt(static_cast<double>(s.n_paths));
  c.ci_low = c.slope.value - 1.96 * c.slope.se;
  c.ci_high = c.slope.value + 1.96 * c.slope.se;
  return c;
}

inline ClockSlope clock_slope(const std::vector<DualPathRecord>& paths) { return clock_slope(summarize(paths)); }

struct CltCheck {
  double ks_distance = 0.0;
  std::size_t n = 0;
  double sigma2 = 0.0;
  double p_value = 1.0;
};

// KS distance of Y_h / sqrt(h) against N(0, sigma2_hat) with the clock-slope estimate.
inline CltCheck dual_clt_check(const DualSummary& s) {
  if (s.n_paths < 100) throw ConfigError("dual_clt_check needs at least 100 paths");
  CltCheck c;
  c.sigma2 = clock_slope(s).slope.value;
  if (!(c.sigma2 > 0.0)) throw NumericalError("dual_clt_check: non-positive clock slope");
  std::vector<double> z(s.n_paths);
  const double scale = 1.0 / std::sqrt(s.horizon);
  for (std::size_t i = 0; i < s.n_paths; ++i) z[i] = static_cast<double>(s.final_positions[i]) * scale;
  c.n = s.n_paths;
  c.ks_distance = stats::ks_normal(std::move(z), 0.0, std::sqrt(c.sigma2));
  c.p_value = stats::ks_pvalue(c.ks_distance, static_cast<double>(c.n));
  return c;
}

inline CltCheck dual_clt_check(const std::vector<DualPathRecord>& paths) { return dual_clt_check(summarize(paths)); }

// ---------------------------------------------------------------------------
// Export

inline std::string paths_csv(const std::vector<DualPathRecord>& paths) {
  std::ostringstream os;
  os << "path_id,time,position\n";
  for (std::size_t i = 0; i < paths.size(); ++i) {
    std::int64_t y = paths[i].start_vertex;
    os << i << ",0," << y << '\n';
    for (std::size_t k = 0; k < paths[i].w_values.size(); ++k) {
      y += paths[i].srw_steps[k];
      os << i << ',' << io::fmt(paths[i].w_values[k]) << ',' << y << '\n';
    }
  }
  return os.str();
}

inline std::string clock_csv(const DualSummary& s) {
  std::ostringstream os;
  os << "path_id,t,A_t\n";
  for (std::size_t i = 0; i < s.n_paths; ++i)
    for (std::size_t j = 0; j < s.clock_times.size(); ++j)
      os << i << ',' << io::fmt(s.clock_times[j]) << ',' << io::fmt(s.clock(i, j)) << '\n';
  return os.str();
}

inline std::string final_positions_csv(const DualSummary& s) {
  std::ostringstream os;
  os << "path_id,time,position\n";
  for (std::size_t i = 0; i < s.n_paths; ++i) os << i << ',' << io::fmt(s.horizon) << ',' << s.final_positions[i] << '\n';
  return os.str();
}

}  // namespace condsim::dual
