#pragma once

// Kolmogorov equations of the dual walk on a finite spatial window, solved
// slice by slice (rates are constant between consecutive track breakpoints)
// by uniformization: with Lambda >= the largest total rate and
// P = I + G / Lambda,
//   exp(Delta G) = sum_k Poisson(k; Lambda Delta) P^k .
// On the window vertex v jumps to v +- 1 with rate b(v) each, so
//   (P h)(v) = d(v) h(v) + (b(v)/Lambda) (h(v+1) + h(v-1)).
// P acts on functions of the source variable (backward equation), its
// transpose on measures in the target variable (forward equation).
//
// K(s,x;t,y), t <= s, is the probability that the dual walk started at x at
// time s is at y at time t when run backward. K_n additionally requires fewer
// than n jumps; it is computed with one vector per jump count ("layer").

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "condsim/env.hpp"
#include "condsim/errors.hpp"
#include "condsim/io.hpp"
#include "condsim/parallel.hpp"
#include "condsim/random.hpp"
#include "condsim/stats.hpp"

namespace condsim::kernel {

using env::EnvironmentWindow;
using env::EnvSpec;
using json = nlohmann::json;

inline constexpr int kAllJumps = -1;
// Largest Lambda * Delta handled in one uniformization step; longer slices are
// split so that exp(-Lambda Delta) stays far from underflow.
inline constexpr double kMaxSubslice = 64.0;

enum class Boundary { absorbing, reflecting };

inline const char* to_string(Boundary b) { return b == Boundary::absorbing ? "absorbing" : "reflecting"; }

struct WindowSpec {
  std::int64_t radius = 64;
  std::optional<std::int64_t> center;  // defaults to the anchor vertex
  Boundary boundary = Boundary::absorbing;
  double tol = 1e-12;                  // Poisson truncation, whole solve
  std::size_t max_terms = 1'000'000;   // per uniformization step
};

// ---------------------------------------------------------------------------
// Poisson weights

// pmf_0..pmf_K of Poisson(x), with K the first index past the mean whose tail
// bound pmf_K x / (K + 1 - x) is below tol.
inline std::vector<double> poisson_terms(double x, double tol, std::size_t max_terms, const std::string& where) {
  std::vector<double> pmf;
  if (!(x > 0.0)) {
    pmf.push_back(1.0);
    return pmf;
  }
  double p = std::exp(-x);
  pmf.push_back(p);
  for (std::size_t k = 0;; ++k) {
    const double kk = static_cast<double>(k);
    if (kk + 1.0 > x && p * x / (kk + 1.0 - x) <= tol) break;
    if (k + 1 > max_terms)
      throw NumericalError("uniformization did not reach tolerance within " + std::to_string(max_terms) +
                           " terms (" + where + ", Lambda*Delta=" + io::fmt(x) + ")");
    p *= x / (kk + 1.0);
    pmf.push_back(p);
  }
  return pmf;
}

// Q_k = P(N >= k + 1) for N ~ Poisson(y), k = 0..K, by suffix sums.
inline std::vector<double> poisson_upper_tails(double y, std::size_t K) {
  std::vector<double> q(K + 1, 0.0);
  if (!(y > 0.0)) return q;
  std::vector<double> pmf = poisson_terms(y, 1e-30, 1u << 30, "upper tails");
  if (pmf.size() < K + 2) {
    double p = pmf.back();
    while (pmf.size() < K + 2) {
      p *= y / static_cast<double>(pmf.size());
      pmf.push_back(p);
    }
  }
  double acc = 0.0;
  for (std::size_t j = pmf.size(); j-- > K + 1;) acc += pmf[j];
  for (std::size_t k = K + 1; k-- > 0;) {
    q[k] = acc;
    acc += pmf[k];
  }
  return q;
}

// w1_k(eps) = int_0^Delta exp(-eps u) Poisson(k; Lambda u) du for k = 0..K.
inline std::vector<double> laplace_weights(double lambda, double eps, double delta, std::size_t K) {
  std::vector<double> w(K + 1, 0.0);
  const double a = lambda + eps;
  if (!(a > 0.0)) {
    w[0] = delta;
    return w;
  }
  const std::vector<double> q = poisson_upper_tails(a * delta, K);
  double ratio = 1.0 / a;
  const double r = lambda / a;
  for (std::size_t k = 0; k <= K; ++k) {
    w[k] = ratio * q[k];
    ratio *= r;
  }
  return w;
}

// ---------------------------------------------------------------------------
// Slice operators

// Coefficients of P on window indices 0..W-1: P(i,i) = d, P(i,i+1) = r, P(i,i-1) = l.
struct Coeffs {
  std::vector<double> d, r, l;
  double lambda = 0.0;
};

inline void make_coeffs(const std::vector<double>& b, Boundary bd, double lambda, Coeffs& c) {
  const std::size_t W = b.size();
  c.d.resize(W);
  c.r.resize(W);
  c.l.resize(W);
  c.lambda = lambda;
  if (lambda <= 0.0) {
    std::fill(c.d.begin(), c.d.end(), 1.0);
    std::fill(c.r.begin(), c.r.end(), 0.0);
    std::fill(c.l.begin(), c.l.end(), 0.0);
    return;
  }
  const double inv = 1.0 / lambda;
  for (std::size_t i = 0; i < W; ++i) {
    const double q = b[i] * inv;
    c.r[i] = q;
    c.l[i] = q;
    c.d[i] = 1.0 - 2.0 * q;
  }
  if (bd == Boundary::reflecting) {
    c.l[0] = 0.0;
    c.d[0] = 1.0 - b[0] * inv;
    c.r[W - 1] = 0.0;
    c.d[W - 1] = 1.0 - b[W - 1] * inv;
    if (W == 1) c.d[0] = 1.0;
  }
}

// Layered vector: L layers of W entries. Unlayered vectors (L = 1, layered =
// false) keep jumps in the same layer.
struct Layers {
  std::size_t L = 1, W = 0;
  bool layered = false;
  std::vector<double> v;

  Layers() = default;
  Layers(std::size_t layers, std::size_t width, bool is_layered)
      : L(layers), W(width), layered(is_layered), v(layers * width, 0.0) {}
  double* layer(std::size_t j) { return v.data() + j * W; }
  const double* layer(std::size_t j) const { return v.data() + j * W; }
  double total() const {
    double s = 0.0;
    for (double x : v) s += x;
    return s;
  }
  double at(std::size_t i) const {
    double s = 0.0;
    for (std::size_t j = 0; j < L; ++j) s += v[j * W + i];
    return s;
  }
};

// Index range [lo, hi) outside of which all layers vanish.
struct Range {
  std::size_t lo = 0, hi = 0;
};

inline Range grow(Range a, std::size_t by, std::size_t W) {
  a.lo = a.lo > by ? a.lo - by : 0;
  a.hi = std::min(W, a.hi + by);
  return a;
}

// out = P in (backward). Entries outside the range are zero on input and output.
inline void apply_backward(const Coeffs& c, const Layers& in, Layers& out, Range rg) {
  const std::size_t W = in.W;
  for (std::size_t j = 0; j < in.L; ++j) {
    const double* h = in.layer(j);
    double* o = out.layer(j);
    const double* src = in.layered ? (j > 0 ? in.layer(j - 1) : nullptr) : h;
    for (std::size_t i = rg.lo; i < rg.hi; ++i) {
      double v = c.d[i] * h[i];
      if (src) {
        if (i + 1 < W) v += c.r[i] * src[i + 1];
        if (i > 0) v += c.l[i] * src[i - 1];
      }
      o[i] = v;
    }
  }
}

struct Loss {
  double absorbed = 0.0;
  double overflow = 0.0;
};

// out = P^T in (forward). Mass crossing the window ends is absorbed; in
// layered mode mass jumping out of the last layer overflows.
inline Loss apply_forward(const Coeffs& c, const Layers& in, Layers& out, Range rg) {
  const std::size_t W = in.W;
  Loss loss;
  for (std::size_t j = 0; j < in.L; ++j) {
    const double* m = in.layer(j);
    double* o = out.layer(j);
    const double* src = in.layered ? (j > 0 ? in.layer(j - 1) : nullptr) : m;
    for (std::size_t i = rg.lo; i < rg.hi; ++i) {
      double v = c.d[i] * m[i];
      if (src) {
        if (i > 0) v += c.r[i - 1] * src[i - 1];
        if (i + 1 < W) v += c.l[i + 1] * src[i + 1];
      }
      o[i] = v;
    }
    const bool last = in.layered && j + 1 == in.L;
    if (last) {
      for (std::size_t i = rg.lo; i < rg.hi; ++i) loss.overflow += (c.l[i] + c.r[i]) * m[i];
    } else {
      loss.absorbed += c.l[0] * m[0] + c.r[W - 1] * m[W - 1];
    }
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Slice iteration

struct RateEvent {
  double t;
  std::int64_t idx;  // window index, or -1 for all edges (shared track)
  double value;
};

// Rate of edge x on the piece just below t (left limit).
inline double rate_left(const EnvironmentWindow& env, std::int64_t x, double t) {
  const env::TrackRef r = env.track(x);
  const double tb = env.to_base(t);
  std::size_t i = r.piece_at(tb);
  if (i > 0 && r.breaks[i] >= tb) --i;
  return r.values[i];
}

// Walks the time interval from t_from to t_to (either direction) through the
// constant-rate slices of edges lo_edge .. lo_edge + W - 1, with additional
// cuts at the given record times (ordered in the walking direction).
// on_slice(t_a, t_b, rates) evolves across one slice; on_record(k, t) fires at
// record time k after the slice ending there.
template <class OnSlice, class OnRecord>
void for_each_slice(const EnvironmentWindow& env, std::int64_t lo_edge, std::size_t W, double t_from, double t_to,
                    const std::vector<double>& record_times, OnSlice&& on_slice, OnRecord&& on_record) {
  const bool up = t_to >= t_from;
  const double lo_t = std::min(t_from, t_to), hi_t = std::max(t_from, t_to);
  std::vector<double> rates(W);
  std::vector<RateEvent> ev;
  const bool shared = env.store().shared;
  for (std::size_t i = 0; i < W; ++i) {
    const std::int64_t x = lo_edge + static_cast<std::int64_t>(i);
    rates[i] = up ? env.rate_at(x, t_from) : rate_left(env, x, t_from);
    if (shared && i > 0) continue;
    const env::TrackRef r = env.track(x);
    const std::size_t first = r.piece_at(env.to_base(lo_t));
    for (std::size_t k = first + 1; k < r.pieces; ++k) {
      const double t = env.from_base(r.breaks[k]);
      if (t >= hi_t) break;
      if (t <= lo_t) continue;
      ev.push_back({t, shared ? -1 : static_cast<std::int64_t>(i), up ? r.values[k] : r.values[k - 1]});
    }
  }
  if (up)
    std::sort(ev.begin(), ev.end(), [](const RateEvent& a, const RateEvent& b) { return a.t < b.t; });
  else
    std::sort(ev.begin(), ev.end(), [](const RateEvent& a, const RateEvent& b) { return a.t > b.t; });
  auto before = [up](double a, double b) { return up ? a < b : a > b; };
  double cur = t_from;
  std::size_t e = 0, rec = 0;
  while (rec < record_times.size() && !before(cur, record_times[rec]) && record_times[rec] == cur) on_record(rec++, cur);
  for (;;) {
    double next = t_to;
    if (e < ev.size() && before(ev[e].t, next)) next = ev[e].t;
    if (rec < record_times.size() && before(record_times[rec], next)) next = record_times[rec];
    if (next != cur) on_slice(cur, next, static_cast<const std::vector<double>&>(rates));
    cur = next;
    while (e < ev.size() && ev[e].t == cur) {
      if (ev[e].idx < 0)
        std::fill(rates.begin(), rates.end(), ev[e].value);
      else
        rates[static_cast<std::size_t>(ev[e].idx)] = ev[e].value;
      ++e;
    }
    while (rec < record_times.size() && record_times[rec] == cur) on_record(rec++, cur);
    if (cur == t_to) break;
  }
}

inline double max_rate_in(const std::vector<double>& b, Range rg) {
  double m = 0.0;
  for (std::size_t i = rg.lo; i < rg.hi; ++i) m = std::max(m, b[i]);
  return m;
}

// Number of slices between t_from and t_to, used to split the tolerance.
inline std::size_t count_slices(const EnvironmentWindow& env, std::int64_t lo_edge, std::size_t W, double a,
                                double b) {
  const double lo_t = std::min(a, b), hi_t = std::max(a, b);
  std::size_t n = 1;
  const std::size_t tracks = env.store().shared ? 1 : W;
  for (std::size_t i = 0; i < tracks; ++i) {
    const env::TrackRef r = env.track(lo_edge + static_cast<std::int64_t>(i));
    const double* lo = std::upper_bound(r.breaks, r.breaks + r.pieces + 1, env.to_base(lo_t));
    const double* hi = std::lower_bound(r.breaks, r.breaks + r.pieces + 1, env.to_base(hi_t));
    if (hi > lo) n += static_cast<std::size_t>(hi - lo);
  }
  return n;
}

// Makes sure the environment covers the window edges and the time span,
// extending deterministically in space when needed.
inline EnvironmentWindow cover(const EnvironmentWindow& env, std::int64_t lo_edge, std::int64_t hi_edge, double t0,
                               double t1) {
  const double lo_t = std::min(t0, t1), hi_t = std::max(t0, t1);
  if (!env.covers_time(lo_t) || !env.covers_time(hi_t))
    throw ConfigError("environment window [" + io::fmt(env.t_min()) + ", " + io::fmt(env.t_max()) +
                      "] does not cover the time span [" + io::fmt(lo_t) + ", " + io::fmt(hi_t) +
                      "]; build a larger window");
  if (env.has_edge(lo_edge) && env.has_edge(hi_edge)) return env;
  return env::extend(env, std::min(env.x_min(), lo_edge), std::max(env.x_max(), hi_edge + 1), env.t_min(),
                     env.t_max());
}

// ---------------------------------------------------------------------------
// Kernel grids

enum class Anchoring { source, target };

struct KernelGrid {
  Anchoring anchoring = Anchoring::source;
  double anchor_time = 0.0;
  std::int64_t anchor_vertex = 0;
  int n_jumps = kAllJumps;
  WindowSpec window;
  std::int64_t v_lo = 0;  // first window vertex
  std::size_t width = 0;
  // Grid times in solve order, starting at the anchor time.
  std::vector<double> times;
  std::vector<double> values;  // times.size() x width
  // Source anchoring only: cumulative lost mass split by cause.
  std::vector<double> mass_deficit, absorbed, overflow, truncation;

  double at(std::size_t ti, std::int64_t v) const {
    if (v < v_lo || v >= v_lo + static_cast<std::int64_t>(width)) return 0.0;
    return values[ti * width + static_cast<std::size_t>(v - v_lo)];
  }
  double row_sum(std::size_t ti) const {
    double s = 0.0;
    for (std::size_t i = 0; i < width; ++i) s += values[ti * width + i];
    return s;
  }
  std::vector<double> row(std::size_t ti) const {
    return std::vector<double>(values.begin() + static_cast<std::ptrdiff_t>(ti * width),
                               values.begin() + static_cast<std::ptrdiff_t>((ti + 1) * width));
  }
  std::int64_t v_hi() const { return v_lo + static_cast<std::int64_t>(width) - 1; }
};

namespace detail {

inline void check_window(const WindowSpec& w) {
  if (w.radius < 1) throw ConfigError("window radius must be >= 1");
  if (!(w.tol > 0.0)) throw ConfigError("window tolerance must be positive");
}

inline std::size_t n_subslices(double lambda, double delta) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(lambda * delta / kMaxSubslice)));
}

inline std::vector<double> slice_terms(double x, double tol, std::size_t max_terms, double ta, double tb,
                                       double lambda) {
  try {
    return poisson_terms(x, tol, max_terms, "uniformization");
  } catch (const NumericalError& e) {
    throw NumericalError(std::string(e.what()) + " on slice [" + io::fmt(std::min(ta, tb)) + ", " +
                         io::fmt(std::max(ta, tb)) + "] with rate bound " + io::fmt(lambda));
  }
}

inline double sum_in(const Layers& v, Range rg) {
  double s = 0.0;
  for (std::size_t j = 0; j < v.L; ++j) {
    const double* p = v.layer(j);
    for (std::size_t i = rg.lo; i < rg.hi; ++i) s += p[i];
  }
  return s;
}

struct StepLoss {
  double absorbed = 0.0, overflow = 0.0, truncation = 0.0;
};

// cur <- sum_k pmf_k P^k cur (P^T when forward). Only entries inside `support`
// may be nonzero; the support grows by the number of terms and never shrinks,
// so stale scratch entries always lie inside it. on_power(k, P^k cur, range)
// sees every power before it is advanced.
template <class OnPower>
void step(const Coeffs& co, const std::vector<double>& pmf, bool forward, Layers& cur, Layers& nxt, Layers& acc,
          Range& support, StepLoss& loss, OnPower&& on_power) {
  const std::size_t K = pmf.size() - 1;
  double SK = 0.0;
  for (double p : pmf) SK += p;
  const double m0 = forward ? sum_in(cur, support) : 0.0;
  const Range rg = grow(support, K, cur.W);
  for (std::size_t j = 0; j < acc.L; ++j) std::fill(acc.layer(j) + rg.lo, acc.layer(j) + rg.hi, 0.0);
  double Sj = 0.0;
  for (std::size_t k = 0;; ++k) {
    on_power(k, static_cast<const Layers&>(cur), rg);
    for (std::size_t j = 0; j < cur.L; ++j) {
      const double* src = cur.layer(j);
      double* dst = acc.layer(j);
      for (std::size_t i = rg.lo; i < rg.hi; ++i) dst[i] += pmf[k] * src[i];
    }
    Sj += pmf[k];
    if (k == K) break;
    if (forward) {
      const Loss l = apply_forward(co, cur, nxt, rg);
      loss.absorbed += l.absorbed * (SK - Sj);
      loss.overflow += l.overflow * (SK - Sj);
    } else {
      apply_backward(co, cur, nxt, rg);
    }
    std::swap(cur.v, nxt.v);
  }
  std::swap(cur.v, acc.v);
  support = rg;
  if (forward) loss.truncation += m0 * (1.0 - SK);
}

struct NoPower {
  void operator()(std::size_t, const Layers&, Range) const {}
};

// Rough rate scale used to size windows and tail horizons.
inline double rate_scale(const EnvironmentWindow& env) {
  const double sup = env::sup_rate(env.spec());
  if (std::isfinite(sup)) return sup;
  const double m = env::mean_rate(env.spec());
  return std::isfinite(m) ? 10.0 * m : 10.0;
}

}  // namespace detail

// Solves for K (n_jumps = kAllJumps) or K_n on the window. Source anchoring
// (s, x) evolves the target variable down to time `other` <= s; target
// anchoring (t, y) evolves the source variable up to time `other` >= t.
// A grid row is recorded at the anchor time and at every slice end.
inline KernelGrid solve_kernel(const EnvironmentWindow& env_in, Anchoring anchoring, double time, std::int64_t vertex,
                               double other, const WindowSpec& win, int n_jumps = kAllJumps) {
  detail::check_window(win);
  if (anchoring == Anchoring::source && other > time)
    throw ConfigError("source-anchored solve needs the other time <= source time");
  if (anchoring == Anchoring::target && other < time)
    throw ConfigError("target-anchored solve needs the other time >= target time");
  if (n_jumps < kAllJumps) throw ConfigError("n_jumps must be >= 0");
  const std::int64_t c = win.center.value_or(vertex);
  const std::int64_t lo = c - win.radius;
  const std::size_t W = static_cast<std::size_t>(2 * win.radius + 1);
  if (vertex < lo || vertex >= lo + static_cast<std::int64_t>(W))
    throw ConfigError("anchor vertex lies outside the kernel window");
  const EnvironmentWindow env = cover(env_in, lo, lo + static_cast<std::int64_t>(W) - 1, time, other);

  KernelGrid g;
  g.anchoring = anchoring;
  g.anchor_time = time;
  g.anchor_vertex = vertex;
  g.n_jumps = n_jumps;
  g.window = win;
  g.v_lo = lo;
  g.width = W;

  const bool layered = n_jumps != kAllJumps;
  const std::size_t L = layered ? static_cast<std::size_t>(n_jumps) : 1;
  Layers cur(std::max<std::size_t>(L, 1), W, layered);
  Layers nxt = cur, acc = cur;
  const std::size_t a0 = static_cast<std::size_t>(vertex - lo);
  if (L > 0) cur.layer(0)[a0] = 1.0;
  Range support{a0, a0 + 1};
  const bool forward = anchoring == Anchoring::source;
  detail::StepLoss loss;

  auto record = [&](double t) {
    g.times.push_back(t);
    for (std::size_t i = 0; i < W; ++i) g.values.push_back(L > 0 ? cur.at(i) : 0.0);
    if (forward) {
      g.absorbed.push_back(loss.absorbed);
      g.overflow.push_back(loss.overflow);
      g.truncation.push_back(loss.truncation);
      g.mass_deficit.push_back(L > 0 ? loss.absorbed + loss.overflow + loss.truncation : 1.0);
    }
  };
  record(time);
  if (other == time) return g;
  const double slice_tol = win.tol / static_cast<double>(count_slices(env, lo, W, time, other));
  Coeffs co;
  for_each_slice(
      env, lo, W, time, other, {},
      [&](double ta, double tb, const std::vector<double>& b) {
        const double delta = std::abs(tb - ta);
        const double lambda = 2.0 * max_rate_in(b, Range{0, W});
        make_coeffs(b, win.boundary, lambda, co);
        const std::size_t subs = detail::n_subslices(lambda, delta);
        const double x = lambda * delta / static_cast<double>(subs);
        for (std::size_t k = 0; k < subs; ++k) {
          const auto pmf =
              detail::slice_terms(x, slice_tol / static_cast<double>(subs), win.max_terms, ta, tb, lambda);
          detail::step(co, pmf, forward, cur, nxt, acc, support, loss, detail::NoPower{});
        }
        record(tb);
      },
      [](std::size_t, double) {});
  return g;
}

// K_n from a source point; n = 0 gives the zero kernel.
inline KernelGrid kernel_n(const EnvironmentWindow& env, double s, std::int64_t x, double t, const WindowSpec& win,
                           int n) {
  if (n < 0) throw ConfigError("kernel_n needs n >= 0");
  return solve_kernel(env, Anchoring::source, s, x, t, win, n);
}

// Single entry K_n(s,x;t,y) from a source solve centred at x.
inline double kernel_entry(const EnvironmentWindow& env, double s, std::int64_t x, double t, std::int64_t y,
                           const WindowSpec& win, int n_jumps = kAllJumps) {
  const KernelGrid g = solve_kernel(env, Anchoring::source, s, x, t, win, n_jumps);
  return g.at(g.times.size() - 1, y);
}

struct KernelProbe {
  double s = 0.0;
  std::int64_t x = 0;
  double t = 0.0;
  std::int64_t y = 0;
};

// Probes with t in [t_lo, t_hi - span], s - t in (0, span], |x| <= x_range and
// |y - x| <= reach.
inline std::vector<KernelProbe> random_probes(std::size_t count, std::uint64_t seed, double t_lo, double t_hi,
                                              double span, std::int64_t x_range, std::int64_t reach) {
  if (!(t_hi - t_lo > span) || span <= 0.0) throw ConfigError("random_probes: time range shorter than span");
  Rng rng(derive_tag(seed, Tag::KernelProbe, 0));
  std::vector<KernelProbe> out;
  for (std::size_t i = 0; i < count; ++i) {
    KernelProbe p;
    p.t = t_lo + rng.uniform() * (t_hi - t_lo - span);
    p.s = p.t + span * (0.05 + 0.95 * rng.uniform());
    p.x = static_cast<std::int64_t>(std::floor(rng.uniform() * static_cast<double>(2 * x_range + 1))) - x_range;
    p.y = p.x + static_cast<std::int64_t>(std::floor(rng.uniform() * static_cast<double>(2 * reach + 1))) - reach;
    out.push_back(p);
  }
  return out;
}

// max |K on shift_view(env,u,z) at (s,x;t,y) - K on env at (s+u,x+z;t+u,y+z)|.
inline double shift_covariance_check(const EnvironmentWindow& env, const std::vector<KernelProbe>& probes, double u,
                                     std::int64_t z, const WindowSpec& win) {
  const EnvironmentWindow view = env::shift_view(env, u, z);
  double worst = 0.0;
  for (const auto& p : probes) {
    WindowSpec a = win, b = win;
    a.center = p.x;
    b.center = p.x + z;
    const double lhs = kernel_entry(view, p.s, p.x, p.t, p.y, a);
    const double rhs = kernel_entry(env, p.s + u, p.x + z, p.t + u, p.y + z, b);
    worst = std::max(worst, std::abs(lhs - rhs));
  }
  return worst;
}

struct ConsistencyReport {
  double backward_forward = 0.0;    // max |source solve - target solve|
  double chapman_kolmogorov = 0.0;  // max |K - sum_z K K| at the midpoint
  std::size_t probes = 0;
};

// Source and target solves share one window centred at the probe's x.
inline ConsistencyReport consistency_check(const EnvironmentWindow& env, const std::vector<KernelProbe>& probes,
                                           const WindowSpec& win) {
  ConsistencyReport r;
  for (const auto& p : probes) {
    WindowSpec w = win;
    w.center = p.x;
    const KernelGrid src = solve_kernel(env, Anchoring::source, p.s, p.x, p.t, w);
    const KernelGrid tgt = solve_kernel(env, Anchoring::target, p.t, p.y, p.s, w);
    const double k_src = src.at(src.times.size() - 1, p.y);
    const double k_tgt = tgt.at(tgt.times.size() - 1, p.x);
    r.backward_forward = std::max(r.backward_forward, std::abs(k_src - k_tgt));
    const double u = 0.5 * (p.s + p.t);
    const KernelGrid upper = solve_kernel(env, Anchoring::source, p.s, p.x, u, w);
    const KernelGrid lower = solve_kernel(env, Anchoring::target, p.t, p.y, u, w);
    double ck = 0.0;
    for (std::int64_t v = upper.v_lo; v <= upper.v_hi(); ++v)
      ck += upper.at(upper.times.size() - 1, v) * lower.at(lower.times.size() - 1, v);
    r.chapman_kolmogorov = std::max(r.chapman_kolmogorov, std::abs(ck - k_src));
    ++r.probes;
  }
  return r;
}

// ---------------------------------------------------------------------------
// phi_eps, phi_{eps,n} and chi_{eps,n}

struct PhiEpsOptions {
  double epsilon = 0.1;
  int n_jumps = kAllJumps;
  double tail_tol = 1e-10;  // e^{-eps T} at the integration horizon T
  std::int64_t radius = 0;  // 0 picks n + 2 for finite n, a diffusive bound otherwise
  Boundary boundary = Boundary::absorbing;
  double tol = 1e-12;
  std::size_t max_terms = 1'000'000;
  bool with_chi = false;  // also compute chi_{eps,n} (finite n only)
  unsigned threads = 0;
};

struct PhiEpsValue {
  double value = 0.0;
  double t_max = 0.0;
  double closure = 0.0;  // e^{-eps T} times the mass left at T, added to value
  std::int64_t radius = 0;
};

namespace detail {

inline void check_phi_options(const PhiEpsOptions& o) {
  if (!(o.epsilon > 0.0) || !std::isfinite(o.epsilon)) throw ConfigError("epsilon must be positive");
  if (!(o.tail_tol > 0.0 && o.tail_tol < 1.0)) throw ConfigError("tail tolerance must lie in (0, 1)");
  if (o.n_jumps < kAllJumps) throw ConfigError("n_jumps must be >= 0 or infinite");
}

inline double phi_horizon(const PhiEpsOptions& o) { return std::log(1.0 / o.tail_tol) / o.epsilon; }

inline std::int64_t phi_radius(const EnvironmentWindow& env, const PhiEpsOptions& o, double T) {
  if (o.radius > 0) return o.radius;
  if (o.n_jumps != kAllJumps) return o.n_jumps + 2;
  return static_cast<std::int64_t>(std::ceil(7.0 * std::sqrt(2.0 * rate_scale(env) * T))) + 8;
}

}  // namespace detail

// phi_eps (or phi_{eps,n}) at the space-time shift (t, x): evolves
// h_u = K(t+u, . ; t, x) upward with the backward generator and integrates
// eps e^{-eps u} sum_y h_u(y) exactly on every slice. Past the horizon T the
// mass is frozen: the remainder is approximated by e^{-eps T} sum_y h_T(y).
inline PhiEpsValue phi_eps_at(const EnvironmentWindow& env_in, double t, std::int64_t x, const PhiEpsOptions& o) {
  detail::check_phi_options(o);
  const double eps = o.epsilon;
  const double T = detail::phi_horizon(o);
  const EnvironmentWindow view0 = env::shift_view(env_in, t, x);
  const std::int64_t R = detail::phi_radius(view0, o, T);
  const std::size_t W = static_cast<std::size_t>(2 * R + 1);
  if (!view0.covers_time(0.0) || !view0.covers_time(T))
    throw ConfigError("phi_eps at t=" + io::fmt(t) + " needs the environment to cover [" + io::fmt(t) + ", " +
                      io::fmt(t + T) + "] for tail tolerance " + io::fmt(o.tail_tol) +
                      "; build a larger window or loosen the tolerance");
  const EnvironmentWindow view = cover(view0, -R, R, 0.0, T);

  PhiEpsValue out;
  out.t_max = T;
  out.radius = R;
  if (o.n_jumps == 0) return out;
  const bool layered = o.n_jumps != kAllJumps;
  Layers cur(layered ? static_cast<std::size_t>(o.n_jumps) : 1, W, layered);
  Layers nxt = cur, acc = cur;
  cur.layer(0)[static_cast<std::size_t>(R)] = 1.0;
  Range support{static_cast<std::size_t>(R), static_cast<std::size_t>(R) + 1};
  detail::StepLoss loss;
  Coeffs co;
  double total = 0.0;
  const double slice_tol = o.tol / static_cast<double>(count_slices(view, -R, W, 0.0, T));
  for_each_slice(
      view, -R, W, 0.0, T, {},
      [&](double ta, double tb, const std::vector<double>& b) {
        const double delta = tb - ta;
        const double lambda = 2.0 * max_rate_in(b, Range{0, W});
        make_coeffs(b, o.boundary, lambda, co);
        const std::size_t subs = detail::n_subslices(lambda, delta);
        const double d = delta / static_cast<double>(subs);
        for (std::size_t k = 0; k < subs; ++k) {
          const auto pmf = detail::slice_terms(lambda * d, slice_tol / static_cast<double>(subs), o.max_terms, ta,
                                               tb, lambda);
          const auto w1 = laplace_weights(lambda, eps, d, pmf.size() - 1);
          const double scale = eps * std::exp(-eps * (ta + static_cast<double>(k) * d));
          detail::step(co, pmf, false, cur, nxt, acc, support, loss,
                       [&](std::size_t j, const Layers& v, Range rg) { total += scale * w1[j] * detail::sum_in(v, rg); });
        }
      },
      [](std::size_t, double) {});
  out.closure = std::exp(-eps * T) * detail::sum_in(cur, support);
  out.value = total + out.closure;
  return out;
}

struct ChiEpsValue {
  double value = 0.0;
  double bound = 0.0;       // (2n+1) int_0^T e^{-eps t} [b_t(0) + b_t(-1)] dt
  double t_max = 0.0;
  double tail_bound = 0.0;  // bound on the neglected part past T
};

namespace detail {

// int_0^inf e^{-eps u} [c0 b_u(0) phi_{eps,n}(u, 0) + cm1 b_u(-1) phi_{eps,n}(u, -1)] du
// at the shift (t, x). With l_u = c0 b_u(0) e_0 + cm1 b_u(-1) e_{-1} injected
// into the zero-jump layer, m_u = int_0^u K_n(u, .; r, .) l_r dr solves
// dm/du = L_u m + l_u, and the integral equals eps int e^{-eps u} 1^T m_u du.
inline ChiEpsValue injected_integral(const EnvironmentWindow& env_in, double t, std::int64_t x, double eps, int n,
                                     double c0, double cm1, double tail_tol, double tol, std::size_t max_terms) {
  if (!(eps > 0.0)) throw ConfigError("epsilon must be positive");
  if (n < 0) throw ConfigError("chi_eps needs a finite n >= 0");
  const EnvironmentWindow view0 = env::shift_view(env_in, t, x);
  const double B = rate_scale(view0);
  const double scale = std::max(1.0, (2.0 * n + 1.0) * 2.0 * B / eps);
  const double T = std::log(scale / tail_tol) / eps;
  if (!view0.covers_time(0.0) || !view0.covers_time(T))
    throw ConfigError("chi_eps at t=" + io::fmt(t) + " needs the environment to cover [" + io::fmt(t) + ", " +
                      io::fmt(t + T) + "]; build a larger window");
  const std::int64_t R = n + 2;
  const std::size_t W = static_cast<std::size_t>(2 * R + 1);
  const EnvironmentWindow view = cover(view0, -R, R, 0.0, T);
  ChiEpsValue out;
  out.t_max = T;
  out.tail_bound = std::exp(-eps * T) * scale;
  const std::size_t i0 = static_cast<std::size_t>(R), im1 = i0 - 1;
  const std::size_t L = static_cast<std::size_t>(std::max(n, 1));
  Layers m(L, W, true), q = m, mn = m, qn = m, acc = m;
  Coeffs co;
  const Range full{0, W};
  double total = 0.0, bound = 0.0;
  const double slice_tol = tol / static_cast<double>(count_slices(view, -R, W, 0.0, T));
  for_each_slice(
      view, -R, W, 0.0, T, {},
      [&](double ta, double tb, const std::vector<double>& b) {
        bound += (b[i0] + b[im1]) * (std::exp(-eps * ta) - std::exp(-eps * tb)) / eps;
        if (n == 0) return;
        const double delta = tb - ta;
        const double lambda = 2.0 * max_rate_in(b, full);
        make_coeffs(b, Boundary::absorbing, lambda, co);
        const std::size_t subs = n_subslices(lambda, delta);
        const double d = delta / static_cast<double>(subs);
        for (std::size_t s = 0; s < subs; ++s) {
          const auto pmf = slice_terms(lambda * d, slice_tol / static_cast<double>(subs), max_terms, ta, tb, lambda);
          const std::size_t K = pmf.size() - 1;
          const auto we = laplace_weights(lambda, eps, d, K);
          const auto w0 = laplace_weights(lambda, 0.0, d, K);
          const double e = std::exp(-eps * d);
          const double sc = std::exp(-eps * (ta + static_cast<double>(s) * d));
          std::fill(q.v.begin(), q.v.end(), 0.0);
          q.layer(0)[i0] = c0 * b[i0];
          q.layer(0)[im1] = cm1 * b[im1];
          std::fill(acc.v.begin(), acc.v.end(), 0.0);
          for (std::size_t k = 0;; ++k) {
            // eps * w2_k = w1_k(eps) - e^{-eps d} w1_k(0)
            total += sc * (eps * we[k] * m.total() + (we[k] - e * w0[k]) * q.total());
            for (std::size_t i = 0; i < acc.v.size(); ++i) acc.v[i] += pmf[k] * m.v[i] + w0[k] * q.v[i];
            if (k == K) break;
            apply_backward(co, m, mn, full);
            apply_backward(co, q, qn, full);
            std::swap(m.v, mn.v);
            std::swap(q.v, qn.v);
          }
          std::swap(m.v, acc.v);
        }
      },
      [](std::size_t, double) {});
  out.value = n == 0 ? 0.0 : total;
  out.bound = (2.0 * n + 1.0) * bound;
  return out;
}

}  // namespace detail

// chi_{eps,n} = int_0^inf e^{-eps u} [b_u(0) phi_{eps,n}(u,0) - b_u(-1) phi_{eps,n}(u,-1)] du
// at the shift (t, x), with the bound (2n+1) int e^{-eps u} [b_u(0) + b_u(-1)] du.
inline ChiEpsValue chi_eps_at(const EnvironmentWindow& env, double t, std::int64_t x, double eps, int n,
                              double tail_tol = 1e-10, double tol = 1e-13, std::size_t max_terms = 1'000'000) {
  return detail::injected_integral(env, t, x, eps, n, 1.0, -1.0, tail_tol, tol, max_terms);
}

// The shift identity between chi_{eps,n} and phi_{eps,n+1}. Differentiating
// phi_{eps,n+1}(t, 0) in t with the forward equation for the truncated
// kernels, whose loss term carries K_{n+1} while the gain term carries K_n,
// gives exactly
//   chi_{eps,n}(0,1) - chi_{eps,n} = phi_{eps,n+1} - 1 + D_n,
//   D_n = 2 int_0^inf e^{-eps u} b_u(0) [phi_{eps,n+1} - phi_{eps,n}](u, 0) du,
// and D_n -> 0 as n -> infinity. `stated` is the residual without D_n.
struct ChiPhiIdentity {
  double lhs = 0.0;          // chi_{eps,n}(0,1) - chi_{eps,n}
  double phi_next = 0.0;     // phi_{eps,n+1}
  double correction = 0.0;   // D_n
  double stated = 0.0;       // lhs - (phi_next - 1)
  double corrected = 0.0;    // lhs - (phi_next - 1 + D_n)
};

inline ChiPhiIdentity chi_phi_identity(const EnvironmentWindow& env, double t, std::int64_t x, double eps, int n,
                                       double tail_tol = 1e-10) {
  ChiPhiIdentity r;
  const double tol = 1e-13;
  const std::size_t cap = 1'000'000;
  r.lhs = chi_eps_at(env, t, x + 1, eps, n, tail_tol, tol, cap).value - chi_eps_at(env, t, x, eps, n, tail_tol, tol, cap).value;
  PhiEpsOptions o;
  o.epsilon = eps;
  o.n_jumps = n + 1;
  o.tail_tol = tail_tol * 1e-3;
  r.phi_next = phi_eps_at(env, t, x, o).value;
  const double up = detail::injected_integral(env, t, x, eps, n + 1, 1.0, 0.0, tail_tol, tol, cap).value;
  const double lo = detail::injected_integral(env, t, x, eps, n, 1.0, 0.0, tail_tol, tol, cap).value;
  r.correction = 2.0 * (up - lo);
  r.stated = r.lhs - (r.phi_next - 1.0);
  r.corrected = r.stated - r.correction;
  return r;
}

struct PhiEpsPoint {
  double t = 0.0;
  std::int64_t x = 0;
  double phi = 0.0;
  double chi = std::numeric_limits<double>::quiet_NaN();
  double chi_bound = std::numeric_limits<double>::quiet_NaN();
};

struct PhiEpsRecord {
  double epsilon = 0.0;
  int n_jumps = kAllJumps;
  std::vector<PhiEpsPoint> points;
  double t_max_integral = 0.0;
  double tail_bound = 0.0;  // e^{-eps t_max_integral}
  std::int64_t radius = 0;
  double tol = 0.0;
};

// phi_eps (and optionally chi_{eps,n}) on a grid of shifts; shifts are
// independent solves and run concurrently.
inline PhiEpsRecord phi_eps(const EnvironmentWindow& env, const PhiEpsOptions& o,
                            const std::vector<std::pair<double, std::int64_t>>& shifts) {
  detail::check_phi_options(o);
  if (o.with_chi && o.n_jumps == kAllJumps) throw ConfigError("chi_eps is computed for finite n only");
  PhiEpsRecord rec;
  rec.epsilon = o.epsilon;
  rec.n_jumps = o.n_jumps;
  rec.t_max_integral = detail::phi_horizon(o);
  rec.tail_bound = std::exp(-o.epsilon * rec.t_max_integral);
  rec.tol = o.tol;
  rec.points.resize(shifts.size());
  std::vector<std::int64_t> radii(shifts.size(), 0);
  parallel_for(shifts.size(), resolve_threads(o.threads), [&](std::size_t i) {
    PhiEpsPoint& p = rec.points[i];
    p.t = shifts[i].first;
    p.x = shifts[i].second;
    const PhiEpsValue v = phi_eps_at(env, p.t, p.x, o);
    p.phi = v.value;
    radii[i] = v.radius;
    if (o.with_chi) {
      const ChiEpsValue c = chi_eps_at(env, p.t, p.x, o.epsilon, o.n_jumps);
      p.chi = c.value;
      p.chi_bound = c.bound;
    }
  });
  for (auto r : radii) rec.radius = std::max(rec.radius, r);
  return rec;
}

// ---------------------------------------------------------------------------
// Field route: phi_eps on a whole space-time block in one downward pass.

struct PhiEpsField {
  double epsilon = 0.0;
  std::int64_t x_lo = 0;
  std::size_t width = 0;
  double t_top = 0.0;
  Boundary boundary = Boundary::absorbing;
  std::vector<double> times;   // ascending record times
  std::vector<double> values;  // times.size() x width
  std::vector<double> chi;     // same layout when requested; NaN at x_lo

  std::int64_t x_hi() const { return x_lo + static_cast<std::int64_t>(width) - 1; }
  std::size_t time_index(double t) const {
    const auto it = std::lower_bound(times.begin(), times.end(), t);
    if (it == times.end() || *it != t) throw RangeError("time " + io::fmt(t) + " is not a record time of the field");
    return static_cast<std::size_t>(it - times.begin());
  }
  double at(std::size_t ti, std::int64_t x) const {
    if (x < x_lo || x > x_hi()) throw RangeError("vertex " + std::to_string(x) + " outside the field");
    return values[ti * width + static_cast<std::size_t>(x - x_lo)];
  }
  double chi_at(std::size_t ti, std::int64_t x) const {
    if (chi.empty()) throw ConfigError("field was computed without chi");
    if (x <= x_lo || x > x_hi()) throw RangeError("vertex " + std::to_string(x) + " outside the chi field");
    return chi[ti * width + static_cast<std::size_t>(x - x_lo)];
  }
};

// Phi(t, x) = phi_eps at shift (t, x) for x in [x_lo, x_hi], obtained from
//   Phi(t0) = sum_k (P^T)^k [ e^{-eps D} pmf_k Phi(t1) + eps w1_k(eps) 1 ]
// on every slice [t0, t1], starting from `terminal` (default 1) at t_top.
// Values are accurate where e^{-eps (t_top - t)} is negligible and the
// vertex is far from the window ends. With chi requested the pass also
// accumulates C(t, x) = int_t^inf e^{-eps(u-t)} [b_u(x) Phi(u,x) - b_u(x-1) Phi(u,x-1)] du,
// which is chi_eps at shift (t, x).
inline PhiEpsField phi_eps_field(const EnvironmentWindow& env_in, double eps, std::int64_t x_lo, std::int64_t x_hi,
                                 double t_top, std::vector<double> record_times, Boundary bd = Boundary::absorbing,
                                 double tol = 1e-12, bool with_chi = false,
                                 const std::vector<double>* terminal = nullptr, std::size_t max_terms = 1'000'000) {
  if (!(eps > 0.0)) throw ConfigError("epsilon must be positive");
  if (x_hi <= x_lo) throw ConfigError("field needs x_hi > x_lo");
  if (record_times.empty()) throw ConfigError("field needs at least one record time");
  std::sort(record_times.begin(), record_times.end(), std::greater<double>());
  record_times.erase(std::unique(record_times.begin(), record_times.end()), record_times.end());
  if (record_times.front() > t_top) throw ConfigError("record times must not exceed the top time");
  const double t_bottom = record_times.back();
  const std::size_t W = static_cast<std::size_t>(x_hi - x_lo + 1);
  const EnvironmentWindow env = cover(env_in, x_lo, x_hi, t_bottom, t_top);

  PhiEpsField f;
  f.epsilon = eps;
  f.x_lo = x_lo;
  f.width = W;
  f.t_top = t_top;
  f.boundary = bd;
  Layers phi(1, W, false), tmp = phi, r = phi;
  if (terminal) {
    if (terminal->size() != W) throw ConfigError("terminal field has the wrong width");
    phi.v = *terminal;
  } else {
    std::fill(phi.v.begin(), phi.v.end(), 1.0);
  }
  std::vector<double> C(W, 0.0), psi(W, 0.0);
  Layers pr(1, W, false);
  const Range full{0, W};
  Coeffs co;
  std::vector<std::vector<double>> rec_phi(record_times.size()), rec_chi(record_times.size());

  auto horner = [&](std::size_t K, auto&& term, Layers& out) {
    for (std::size_t i = 0; i < W; ++i) out.v[i] = term(K, i);
    for (std::size_t k = K; k-- > 0;) {
      apply_forward(co, out, tmp, full);
      for (std::size_t i = 0; i < W; ++i) out.v[i] = tmp.v[i] + term(k, i);
    }
  };

  const double slice_tol = tol / static_cast<double>(count_slices(env, x_lo, W, t_bottom, t_top));
  for_each_slice(
      env, x_lo, W, t_top, t_bottom, record_times,
      [&](double ta, double tb, const std::vector<double>& b) {
        const double delta = ta - tb;
        const double lambda = 2.0 * max_rate_in(b, full);
        make_coeffs(b, bd, lambda, co);
        const std::size_t subs = detail::n_subslices(lambda, delta);
        const double d = delta / static_cast<double>(subs);
        for (std::size_t s = 0; s < subs; ++s) {
          const auto pmf =
              detail::slice_terms(lambda * d, slice_tol / static_cast<double>(subs), max_terms, ta, tb, lambda);
          const std::size_t K = pmf.size() - 1;
          const auto we = laplace_weights(lambda, eps, d, K);
          const double e = std::exp(-eps * d);
          if (with_chi) {
            const auto w0 = laplace_weights(lambda, 0.0, d, K);
            horner(K, [&](std::size_t k, std::size_t i) { return e * w0[k] * phi.v[i] + (we[k] - e * w0[k]); }, pr);
            for (std::size_t i = W; i-- > 1;) C[i] = e * C[i] + b[i] * pr.v[i] - b[i - 1] * pr.v[i - 1];
          }
          horner(K, [&](std::size_t k, std::size_t i) { return e * pmf[k] * phi.v[i] + eps * we[k]; }, r);
          std::swap(phi.v, r.v);
        }
      },
      [&](std::size_t k, double) {
        rec_phi[k] = phi.v;
        if (with_chi) {
          rec_chi[k] = C;
          rec_chi[k][0] = std::numeric_limits<double>::quiet_NaN();
        }
      });
  for (std::size_t k = record_times.size(); k-- > 0;) {
    f.times.push_back(record_times[k]);
    f.values.insert(f.values.end(), rec_phi[k].begin(), rec_phi[k].end());
    if (with_chi) f.chi.insert(f.chi.end(), rec_chi[k].begin(), rec_chi[k].end());
  }
  return f;
}

// ---------------------------------------------------------------------------
// Weighted L2 estimate E[b phi_eps^2] <= E[b]

struct WeightedL2 {
  double epsilon = 0.0;
  std::string route;                 // "annealed" or "ergodic"
  stats::Estimate b_phi2, b, b_phi, phi;
  stats::Estimate gap;               // E[b phi^2] - E[b], paired
  stats::Estimate eps_chi2;          // eps E[chi^2], ergodic route only
  double identity_residual = std::numeric_limits<double>::quiet_NaN();  // eps E chi^2 + E b phi^2 - E b phi
  std::size_t samples = 0;
  bool holds() const { return gap.value <= 3.0 * gap.se; }
};

// Monte Carlo over annealed environments: phi_eps and b_0(0) at the origin.
inline WeightedL2 weighted_l2_check(const EnvSpec& spec, double eps, std::size_t n_env_samples, std::uint64_t seed,
                                    unsigned threads = 0, double tail_tol = 1e-10) {
  env::require_compliant(spec, "weighted_l2_check");
  if (n_env_samples < 2) throw ConfigError("weighted_l2_check needs at least 2 environments");
  PhiEpsOptions o;
  o.epsilon = eps;
  o.tail_tol = tail_tol;
  const double T = detail::phi_horizon(o);
  std::vector<double> b(n_env_samples), bp2(n_env_samples), bp(n_env_samples), ph(n_env_samples),
      gap(n_env_samples);
  parallel_for(n_env_samples, resolve_threads(threads), [&](std::size_t i) {
    const auto e0 = env::build_env(spec, -1, 2, 0.0, T + 1.0, derive_tag(seed, Tag::KernelEnv, i));
    const std::int64_t R = detail::phi_radius(e0, o, T);
    const auto e = env::extend(e0, -R, R + 1, 0.0, T + 1.0);
    const double p = phi_eps_at(e, 0.0, 0, o).value;
    b[i] = e.rate_at(0, 0.0);
    bp2[i] = b[i] * p * p;
    bp[i] = b[i] * p;
    ph[i] = p;
    gap[i] = bp2[i] - b[i];
  });
  WeightedL2 w;
  w.epsilon = eps;
  w.route = "annealed";
  w.samples = n_env_samples;
  w.b = stats::mean_se(b);
  w.b_phi2 = stats::mean_se(bp2);
  w.b_phi = stats::mean_se(bp);
  w.phi = stats::mean_se(ph);
  w.gap = stats::mean_se(gap);
  return w;
}

struct ErgodicOptions {
  std::int64_t half_width = 50;     // sampled vertices |x| <= half_width
  double span = 2000.0;             // sampled times [0, span]
  double time_step = 1.0;           // spacing of sampled times
  double relax = 7.0;               // the top sits relax / eps above the span
  std::int64_t margin = 0;          // 0 picks 4 sqrt(2 B / eps) + 10
  std::size_t batches = 20;
  double tol = 1e-12;
};

// Space-time average over one environment (stationarity and ergodicity in
// place of environment sampling), with SEs from time-block batch means.
inline WeightedL2 weighted_l2_ergodic(const EnvSpec& spec, double eps, std::uint64_t seed,
                                      const ErgodicOptions& eo = {}) {
  env::require_compliant(spec, "weighted_l2_ergodic");
  if (!(eo.span > 0.0) || !(eo.time_step > 0.0)) throw ConfigError("ergodic span and step must be positive");
  double B = env::sup_rate(spec);
  if (!std::isfinite(B)) B = 10.0 * env::mean_rate(spec);
  const std::int64_t margin =
      eo.margin > 0 ? eo.margin : static_cast<std::int64_t>(std::ceil(4.0 * std::sqrt(2.0 * B / eps))) + 10;
  const std::int64_t x_lo = -eo.half_width - margin, x_hi = eo.half_width + margin;
  const double t_top = eo.span + eo.relax / eps;
  const auto e = env::build_env(spec, x_lo - 1, x_hi + 1, 0.0, t_top, derive_tag(seed, Tag::KernelEnv, 0));
  std::vector<double> rt;
  const std::size_t nt = static_cast<std::size_t>(std::floor(eo.span / eo.time_step)) + 1;
  for (std::size_t k = 0; k < nt; ++k) rt.push_back(static_cast<double>(k) * eo.time_step);
  const PhiEpsField f = phi_eps_field(e, eps, x_lo, x_hi, t_top, rt, Boundary::absorbing, eo.tol, true);
  std::vector<double> b, bp2, bp, ph, gap, ec2;
  for (std::size_t ti = 0; ti < f.times.size(); ++ti) {
    for (std::int64_t x = -eo.half_width; x <= eo.half_width; ++x) {
      const double rate = e.rate_at(x, f.times[ti]);
      const double p = f.at(ti, x);
      b.push_back(rate);
      bp2.push_back(rate * p * p);
      bp.push_back(rate * p);
      ph.push_back(p);
      gap.push_back(rate * p * p - rate);
      const double c = f.chi_at(ti, x);
      ec2.push_back(eps * c * c);
    }
  }
  WeightedL2 w;
  w.epsilon = eps;
  w.route = "ergodic";
  w.samples = b.size();
  w.b = stats::batch_means(b, eo.batches);
  w.b_phi2 = stats::batch_means(bp2, eo.batches);
  w.b_phi = stats::batch_means(bp, eo.batches);
  w.phi = stats::batch_means(ph, eo.batches);
  w.gap = stats::batch_means(gap, eo.batches);
  w.eps_chi2 = stats::batch_means(ec2, eo.batches);
  w.identity_residual = w.eps_chi2.value + w.b_phi2.value - w.b_phi.value;
  return w;
}

// ---------------------------------------------------------------------------
// Export

inline std::string to_csv(const KernelGrid& g) {
  std::string out = "time,vertex,value\n";
  for (std::size_t ti = 0; ti < g.times.size(); ++ti)
    for (std::size_t i = 0; i < g.width; ++i) {
      out += io::fmt(g.times[ti]);
      out += ',';
      out += std::to_string(g.v_lo + static_cast<std::int64_t>(i));
      out += ',';
      out += io::fmt(g.values[ti * g.width + i]);
      out += '\n';
    }
  return out;
}

inline json summary_json(const KernelGrid& g) {
  json j;
  j["schema_version"] = 1;
  j["anchoring"] = g.anchoring == Anchoring::source ? "source" : "target";
  j["anchor_time"] = g.anchor_time;
  j["anchor_vertex"] = g.anchor_vertex;
  j["n_jumps"] = g.n_jumps == kAllJumps ? json("inf") : json(g.n_jumps);
  j["window"] = {{"radius", g.window.radius},
                 {"v_lo", g.v_lo},
                 {"v_hi", g.v_hi()},
                 {"boundary", to_string(g.window.boundary)},
                 {"tol", g.window.tol}};
  j["grid_times"] = g.times.size();
  if (!g.times.empty()) {
    const std::size_t last = g.times.size() - 1;
    j["final_time"] = g.times[last];
    j["final_row_sum"] = g.row_sum(last);
    if (!g.mass_deficit.empty()) {
      j["final_mass_deficit"] = g.mass_deficit[last];
      j["final_absorbed"] = g.absorbed[last];
      j["final_overflow"] = g.overflow[last];
      j["final_truncation"] = g.truncation[last];
    }
  }
  return j;
}

inline std::string to_csv(const PhiEpsRecord& r) {
  std::string out = "time,vertex,value\n";
  for (const auto& p : r.points) out += io::fmt(p.t) + "," + std::to_string(p.x) + "," + io::fmt(p.phi) + "\n";
  return out;
}

inline json summary_json(const PhiEpsRecord& r) {
  json j;
  j["schema_version"] = 1;
  j["epsilon"] = r.epsilon;
  j["n_jumps"] = r.n_jumps == kAllJumps ? json("inf") : json(r.n_jumps);
  j["t_max_integral"] = r.t_max_integral;
  j["tail_bound"] = r.tail_bound;
  j["radius"] = r.radius;
  j["tol"] = r.tol;
  json pts = json::array();
  for (const auto& p : r.points) {
    json q = {{"t", p.t}, {"x", p.x}, {"phi", p.phi}};
    if (!std::isnan(p.chi)) {
      q["chi"] = p.chi;
      q["chi_bound"] = p.chi_bound;
    }
    pts.push_back(q);
  }
  j["points"] = pts;
  return j;
}

}  // namespace condsim::kernel
