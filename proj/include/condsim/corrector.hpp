#pragma once
// Invariant density phi, harmonic coordinates psi(t, x) and the corrector
// chi(t, x) = psi(t, x) - x, with the structural checks that go with them:
// self-consistency of phi under the kernel, the parabolic equation and the
// cocycle property of psi, positivity of spatial gradients, a dual-walk Monte
// Carlo representation of chi, and sublinearity in diffusive boxes.
//
// psi is obtained by projection. Starting from phi at a top time, phi is
// evolved downward with the conservative (reflecting) adjoint generator on a
// finite window, and the flux J(s, x) = b_s(x) phi(s, x) - b_s(x-1) phi(s, x-1)
// is integrated exactly per constant-rate slice:
//   psi(t, x) = S(x) - int_0^t J(s, x) ds,
//   S(x) = sum_{0 <= k < x} phi(0, k)  for x > 0,  -sum_{x <= k < 0} phi(0, k)  for x < 0.
// Then psi(t, x+1) - psi(t, x) = phi(t, x) and d/dt psi + L_t psi = 0 hold on
// every interior vertex.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "condsim/dual.hpp"
#include "condsim/env.hpp"
#include "condsim/errors.hpp"
#include "condsim/io.hpp"
#include "condsim/kernel.hpp"
#include "condsim/parallel.hpp"
#include "condsim/random.hpp"
#include "condsim/stats.hpp"

namespace condsim::corrector {

using env::EnvironmentWindow;
using env::EnvSpec;
using nlohmann::json;

enum class PhiMethod { kernel_extrapolated, static_closed_form, homogeneous_unit };

inline const char* to_string(PhiMethod m) {
  switch (m) {
    case PhiMethod::kernel_extrapolated: return "kernel-extrapolated";
    case PhiMethod::static_closed_form: return "static-closed-form";
    case PhiMethod::homogeneous_unit: return "homogeneous-unit";
  }
  return "?";
}

inline PhiMethod method_from_string(const std::string& s) {
  if (s == "kernel-extrapolated") return PhiMethod::kernel_extrapolated;
  if (s == "static-closed-form") return PhiMethod::static_closed_form;
  if (s == "homogeneous-unit") return PhiMethod::homogeneous_unit;
  throw ConfigError("unknown phi method '" + s + "'");
}

// Cheapest exact method for the spec.
inline PhiMethod auto_method(const EnvSpec& spec) {
  if (env::is_spatially_homogeneous(spec)) return PhiMethod::homogeneous_unit;
  if (env::is_static(spec)) return PhiMethod::static_closed_form;
  return PhiMethod::kernel_extrapolated;
}

struct PhiParams {
  std::vector<double> eps_schedule{0.1, 0.01, 0.001};
  double relax = 7.0;       // phi_eps starts from 1 at relax / eps above the grid
  std::int64_t margin = 0;  // 0 picks 4 sqrt(2 B / eps) + 10 per eps
  double tol = 1e-12;
  unsigned threads = 0;
};

// phi on times x [x_lo, x_hi].
struct PhiField {
  PhiMethod method = PhiMethod::homogeneous_unit;
  EnvironmentWindow env;
  std::int64_t x_lo = 0;
  std::size_t width = 0;
  std::vector<double> times;   // ascending
  std::vector<double> values;  // times x width
  // kernel-extrapolated only: the schedule and raw phi_eps fields, same layout
  std::vector<double> eps_schedule;
  std::vector<std::vector<double>> raw;
  std::size_t fallbacks = 0;   // points where the extrapolation was not positive
  stats::Estimate spatial_mean;  // mean over the window at the first time (batch-means SE)

  std::int64_t x_hi() const { return x_lo + static_cast<std::int64_t>(width) - 1; }
  bool contains(std::int64_t x) const { return x >= x_lo && x <= x_hi(); }
  std::size_t time_index(double t) const {
    const auto it = std::lower_bound(times.begin(), times.end(), t);
    if (it == times.end() || *it != t) throw RangeError("time " + io::fmt(t) + " is not a phi grid time");
    return static_cast<std::size_t>(it - times.begin());
  }
  double at(std::size_t ti, std::int64_t x) const {
    if (!contains(x)) throw RangeError("vertex " + std::to_string(x) + " outside the phi field");
    return values[ti * width + static_cast<std::size_t>(x - x_lo)];
  }
  double& at(std::size_t ti, std::int64_t x) { return values[ti * width + static_cast<std::size_t>(x - x_lo)]; }
  std::vector<double> row(std::size_t ti) const {
    return std::vector<double>(values.begin() + static_cast<std::ptrdiff_t>(ti * width),
                               values.begin() + static_cast<std::ptrdiff_t>((ti + 1) * width));
  }
};

namespace detail {

inline void check_grid(std::vector<double>& times, std::int64_t x_lo, std::int64_t x_hi, const char* who) {
  if (times.empty()) throw ConfigError(std::string(who) + ": grid needs at least one time");
  if (x_hi < x_lo) throw ConfigError(std::string(who) + ": grid needs x_lo <= x_hi");
  for (double t : times)
    if (!std::isfinite(t)) throw ConfigError(std::string(who) + ": grid times must be finite");
  std::sort(times.begin(), times.end());
  times.erase(std::unique(times.begin(), times.end()), times.end());
}

// Value at h = 0 of the polynomial through (h_i, v_i), h = sqrt(eps).
inline double extrapolate_zero(const std::vector<double>& h, const std::vector<double>& v) {
  double out = 0.0;
  for (std::size_t i = 0; i < h.size(); ++i) {
    double w = 1.0;
    for (std::size_t j = 0; j < h.size(); ++j)
      if (j != i) w *= h[j] / (h[j] - h[i]);
    out += w * v[i];
  }
  return out;
}

inline stats::Estimate row_mean(const std::vector<double>& row) {
  if (row.size() >= 40) return stats::batch_means(row, 10);
  return stats::mean_se(row);
}

}  // namespace detail

inline std::int64_t default_margin(const EnvironmentWindow& env, double eps) {
  return static_cast<std::int64_t>(std::ceil(4.0 * std::sqrt(2.0 * kernel::detail::rate_scale(env) / eps))) + 10;
}

// Builds phi on the grid. The kernel method runs phi_eps_field for every eps
// of the schedule and extrapolates to eps = 0 with a polynomial in sqrt(eps)
// through all schedule points; a non-positive extrapolated value falls back to
// the smallest-eps value. The window is extended in space and time as needed.
inline PhiField build_phi(const EnvironmentWindow& env_in, PhiMethod method, std::vector<double> times,
                          std::int64_t x_lo, std::int64_t x_hi, const PhiParams& p = {}) {
  detail::check_grid(times, x_lo, x_hi, "build_phi");
  const EnvSpec& spec = env_in.spec();
  if (method == PhiMethod::homogeneous_unit && !env::is_spatially_homogeneous(spec))
    throw ConfigError("homogeneous-unit phi needs a spatially homogeneous environment");
  if (method == PhiMethod::static_closed_form && !env::is_static(spec))
    throw ConfigError("static-closed-form phi needs a static environment");
  PhiField f;
  f.method = method;
  f.x_lo = x_lo;
  f.width = static_cast<std::size_t>(x_hi - x_lo + 1);
  f.times = times;
  f.values.assign(times.size() * f.width, 1.0);
  f.env = env::extend(env_in, std::min(env_in.x_min(), x_lo - 1), std::max(env_in.x_max(), x_hi + 2),
                      std::min(env_in.t_min(), times.front()), std::max(env_in.t_max(), times.back()));

  if (method == PhiMethod::static_closed_form) {
    const double ch = 1.0 / env::mean_inverse_rate(spec);
    if (!(ch > 0.0)) throw ConfigError("static-closed-form phi needs E[1/a] < infinity");
    for (std::size_t ti = 0; ti < times.size(); ++ti)
      for (std::int64_t x = x_lo; x <= x_hi; ++x) f.at(ti, x) = ch / f.env.rate_at(x, times[ti]);
  } else if (method == PhiMethod::kernel_extrapolated) {
    if (p.eps_schedule.empty()) throw ConfigError("build_phi: empty eps schedule");
    for (double e : p.eps_schedule)
      if (!(e > 0.0)) throw ConfigError("build_phi: eps values must be positive");
    f.eps_schedule = p.eps_schedule;
    std::sort(f.eps_schedule.begin(), f.eps_schedule.end(), std::greater<double>());
    const double eps_min = f.eps_schedule.back();
    std::int64_t widest = 0;
    for (double e : f.eps_schedule) widest = std::max(widest, p.margin > 0 ? p.margin : default_margin(f.env, e));
    f.env = env::extend(f.env, std::min(f.env.x_min(), x_lo - widest - 1), std::max(f.env.x_max(), x_hi + widest + 2),
                        f.env.t_min(), std::max(f.env.t_max(), times.back() + p.relax / eps_min));
    f.raw.resize(f.eps_schedule.size());
    parallel_for(f.eps_schedule.size(), resolve_threads(p.threads), [&](std::size_t k) {
      const double eps = f.eps_schedule[k];
      const std::int64_t m = p.margin > 0 ? p.margin : default_margin(f.env, eps);
      const auto fe = kernel::phi_eps_field(f.env, eps, x_lo - m, x_hi + m, times.back() + p.relax / eps, times,
                                            kernel::Boundary::absorbing, p.tol);
      auto& out = f.raw[k];
      out.resize(f.values.size());
      for (std::size_t ti = 0; ti < times.size(); ++ti)
        for (std::int64_t x = x_lo; x <= x_hi; ++x)
          out[ti * f.width + static_cast<std::size_t>(x - x_lo)] = fe.at(ti, x);
    });
    std::vector<double> h, v(f.eps_schedule.size());
    for (double e : f.eps_schedule) h.push_back(std::sqrt(e));
    for (std::size_t i = 0; i < f.values.size(); ++i) {
      for (std::size_t k = 0; k < v.size(); ++k) v[k] = f.raw[k][i];
      double x = detail::extrapolate_zero(h, v);
      if (!(x > 0.0)) {
        x = v.back();
        ++f.fallbacks;
      }
      f.values[i] = x;
    }
  }
  f.spatial_mean = detail::row_mean(f.row(0));
  return f;
}

// ---------------------------------------------------------------------------
// Self-consistency phi(t0, x) = sum_y phi(t0 + t, y) K(t0 + t, y; t0, x)

struct SelfConsistency {
  double t0 = 0.0, t = 0.0;
  std::int64_t radius = 0;
  std::vector<std::int64_t> probes;
  std::vector<double> lhs, rhs, residuals;  // relative
  double max_residual = 0.0;
};

// Evaluated at the first grid time t0 (t0 + t must also be a grid time). With
// no probes given, up to 20 evenly spaced vertices whose kernel window fits in
// the field are used. The kernel radius defaults to 7 sqrt(2 B t) + 8.
inline SelfConsistency phi_selfconsistency(const PhiField& phi, double t, std::vector<std::int64_t> probes = {},
                                           std::int64_t radius = 0, double tol = 1e-13) {
  if (!(t > 0.0)) throw ConfigError("phi_selfconsistency needs t > 0");
  SelfConsistency r;
  r.t0 = phi.times.front();
  r.t = t;
  const std::size_t top = phi.time_index(r.t0 + t);
  const double B = kernel::detail::rate_scale(phi.env);
  r.radius = radius > 0 ? radius : static_cast<std::int64_t>(std::ceil(7.0 * std::sqrt(2.0 * B * t))) + 8;
  const std::int64_t lo = phi.x_lo + r.radius, hi = phi.x_hi() - r.radius;
  if (probes.empty()) {
    if (hi < lo) throw ConfigError("phi field is too narrow for a kernel window of radius " + std::to_string(r.radius));
    const std::int64_t n = std::min<std::int64_t>(20, hi - lo + 1);
    for (std::int64_t k = 0; k < n; ++k) probes.push_back(lo + (n == 1 ? 0 : k * (hi - lo) / (n - 1)));
  }
  for (std::int64_t x : probes)
    if (x < lo || x > hi) throw ConfigError("probe vertex " + std::to_string(x) + " lacks kernel room in the field");
  r.probes = probes;
  kernel::WindowSpec win;
  win.radius = r.radius;
  win.tol = tol;
  for (std::int64_t x : probes) {
    const auto g = kernel::solve_kernel(phi.env, kernel::Anchoring::target, r.t0, x, r.t0 + t, win);
    const std::size_t last = g.times.size() - 1;
    double s = 0.0;
    for (std::int64_t y = g.v_lo; y <= g.v_hi(); ++y) s += g.at(last, y) * phi.at(top, y);
    const double l = phi.at(0, x);
    r.lhs.push_back(l);
    r.rhs.push_back(s);
    r.residuals.push_back(std::abs(l - s) / std::abs(l));
    r.max_residual = std::max(r.max_residual, r.residuals.back());
  }
  return r;
}

// ---------------------------------------------------------------------------
// psi by projection

struct PsiField {
  EnvironmentWindow env;
  PhiMethod phi_method = PhiMethod::homogeneous_unit;
  double tol = 1e-12;
  // Projection window [f_lo, f_lo + f_width) and the phi it starts from.
  std::int64_t f_lo = 0;
  std::size_t f_width = 0;
  double t_top = 0.0;
  std::vector<double> phi_top;
  // psi grid
  std::int64_t x_lo = 0, x_hi = 0;
  std::vector<double> times;       // ascending, contains 0
  std::vector<double> psi;         // times x width()
  std::vector<double> phi_rows;    // times x f_width, projected phi
  std::vector<double> flux_rows;   // times x f_width, int_t^{t_top} J(s, x) ds
  std::vector<double> S;           // psi(0, x) over [f_lo, f_hi], S(0) = 0

  std::size_t width() const { return static_cast<std::size_t>(x_hi - x_lo + 1); }
  std::int64_t f_hi() const { return f_lo + static_cast<std::int64_t>(f_width) - 1; }
  std::size_t time_index(double t) const {
    const auto it = std::lower_bound(times.begin(), times.end(), t);
    if (it == times.end() || *it != t) throw RangeError("time " + io::fmt(t) + " is not a psi grid time");
    return static_cast<std::size_t>(it - times.begin());
  }
  void check_x(std::int64_t x) const {
    if (x < x_lo || x > x_hi) throw RangeError("vertex " + std::to_string(x) + " outside the psi field");
  }
  double at(std::size_t ti, std::int64_t x) const {
    check_x(x);
    return psi[ti * width() + static_cast<std::size_t>(x - x_lo)];
  }
  double chi_at(std::size_t ti, std::int64_t x) const { return at(ti, x) - static_cast<double>(x); }
  double phi_at(std::size_t ti, std::int64_t x) const {
    return phi_rows[ti * f_width + static_cast<std::size_t>(x - f_lo)];
  }
  // psi(t, x) at any t in [times.front(), t_top].
  double evaluate(double t, std::int64_t x) const;
};

namespace detail {

// Evolves phi (window [f_lo, f_lo + W)) down from t_from to t_to with the
// reflecting adjoint, adding int J ds over each slice to I. Record times must
// be descending. on_record(k, t) fires after the slice that ends there.
template <class OnRecord>
void project_down(const EnvironmentWindow& env, std::int64_t f_lo, std::size_t W, double t_from, double t_to,
                  std::vector<double>& phi, std::vector<double>& I, const std::vector<double>& records, double tol,
                  OnRecord&& on_record) {
  using namespace kernel;
  Layers power(1, W, false), tmp = power;
  std::vector<double> next(W), integral(W);
  Coeffs co;
  const Range full{0, W};
  auto normalize = [](std::vector<double>& w, double total) {
    double s = 0.0;
    for (double v : w) s += v;
    if (s > 0.0)
      for (double& v : w) v *= total / s;
  };
  const double slice_tol =
      tol / static_cast<double>(count_slices(env, f_lo, W, t_to, t_from) + records.size());
  for_each_slice(
      env, f_lo, W, t_from, t_to, records,
      [&](double ta, double tb, const std::vector<double>& b) {
        const double delta = ta - tb;
        const double lambda = 2.0 * max_rate_in(b, full);
        make_coeffs(b, Boundary::reflecting, lambda, co);
        const std::size_t subs = kernel::detail::n_subslices(lambda, delta);
        const double d = delta / static_cast<double>(subs);
        for (std::size_t s = 0; s < subs; ++s) {
          auto pmf = kernel::detail::slice_terms(lambda * d, slice_tol / static_cast<double>(subs), 1'000'000, ta,
                                                 tb, lambda);
          const std::size_t K = pmf.size() - 1;
          auto w0 = laplace_weights(lambda, 0.0, d, K);
          // The reflecting adjoint conserves total phi; renormalizing the
          // truncated weights keeps that exact instead of leaking the tail.
          normalize(pmf, 1.0);
          normalize(w0, d);
          // One pass over the powers (P^T)^k phi feeds both sums.
          power.v = phi;
          for (std::size_t i = 0; i < W; ++i) {
            next[i] = pmf[0] * phi[i];
            integral[i] = w0[0] * phi[i];
          }
          for (std::size_t k = 1; k <= K; ++k) {
            apply_forward(co, power, tmp, full);
            std::swap(power.v, tmp.v);
            for (std::size_t i = 0; i < W; ++i) {
              next[i] += pmf[k] * power.v[i];
              integral[i] += w0[k] * power.v[i];
            }
          }
          for (std::size_t i = 1; i < W; ++i) I[i] += b[i] * integral[i] - b[i - 1] * integral[i - 1];
          phi.swap(next);
        }
      },
      std::forward<OnRecord>(on_record));
}

inline PsiField project_psi(const EnvironmentWindow& env_in, PhiMethod method, double t_top, std::int64_t f_lo,
                            std::vector<double> phi_top, std::vector<double> times, std::int64_t x_lo,
                            std::int64_t x_hi, double tol) {
  check_grid(times, x_lo, x_hi, "build_psi");
  const std::size_t W = phi_top.size();
  const std::int64_t f_hi = f_lo + static_cast<std::int64_t>(W) - 1;
  if (!std::binary_search(times.begin(), times.end(), 0.0)) throw ConfigError("psi grid times must include 0");
  if (x_lo > 0 || x_hi < 0) throw ConfigError("psi grid vertices must include 0");
  if (times.back() > t_top)
    throw ConfigError("psi grid reaches time " + io::fmt(times.back()) + " above the phi top time " + io::fmt(t_top));
  if (x_lo - 1 < f_lo || x_hi + 1 > f_hi)
    throw ConfigError("psi vertices [" + std::to_string(x_lo) + ", " + std::to_string(x_hi) +
                      "] need phi on [" + std::to_string(x_lo - 1) + ", " + std::to_string(x_hi + 1) + "]");
  for (double v : phi_top)
    if (!(v > 0.0) || !std::isfinite(v)) throw NumericalError("phi must be positive and finite to build psi");
  PsiField f;
  f.env = kernel::cover(env_in, f_lo, f_hi, times.front(), t_top);
  f.phi_method = method;
  f.tol = tol;
  f.f_lo = f_lo;
  f.f_width = W;
  f.t_top = t_top;
  f.phi_top = phi_top;
  f.x_lo = x_lo;
  f.x_hi = x_hi;
  f.times = times;
  const std::size_t n = times.size();
  f.phi_rows.resize(n * W);
  f.flux_rows.resize(n * W);
  std::vector<double> rec(times.rbegin(), times.rend());
  std::vector<double> phi = phi_top, I(W, 0.0);
  project_down(f.env, f_lo, W, t_top, times.front(), phi, I, rec, tol, [&](std::size_t k, double) {
    const std::size_t ti = n - 1 - k;
    std::copy(phi.begin(), phi.end(), f.phi_rows.begin() + static_cast<std::ptrdiff_t>(ti * W));
    std::copy(I.begin(), I.end(), f.flux_rows.begin() + static_cast<std::ptrdiff_t>(ti * W));
  });
  const std::size_t t0 = f.time_index(0.0);
  const std::size_t o = static_cast<std::size_t>(-f_lo);  // index of vertex 0
  f.S.assign(W, 0.0);
  for (std::size_t i = o + 1; i < W; ++i) f.S[i] = f.S[i - 1] + f.phi_rows[t0 * W + i - 1];
  for (std::size_t i = o; i-- > 0;) f.S[i] = f.S[i + 1] - f.phi_rows[t0 * W + i];
  f.psi.resize(n * f.width());
  for (std::size_t ti = 0; ti < n; ++ti)
    for (std::int64_t x = x_lo; x <= x_hi; ++x) {
      const std::size_t i = static_cast<std::size_t>(x - f_lo);
      f.psi[ti * f.width() + static_cast<std::size_t>(x - x_lo)] =
          f.S[i] - (f.flux_rows[t0 * W + i] - f.flux_rows[ti * W + i]);
    }
  return f;
}

}  // namespace detail

inline double PsiField::evaluate(double t, std::int64_t x) const {
  check_x(x);
  if (!(t >= times.front() && t <= t_top))
    throw RangeError("time " + io::fmt(t) + " outside the psi field [" + io::fmt(times.front()) + ", " +
                     io::fmt(t_top) + "]");
  const std::size_t i = static_cast<std::size_t>(x - f_lo);
  const std::size_t t0 = time_index(0.0);
  const auto it = std::lower_bound(times.begin(), times.end(), t);
  std::vector<double> phi, I;
  double from;
  if (it == times.end()) {
    phi = phi_top;
    I.assign(f_width, 0.0);
    from = t_top;
  } else {
    const std::size_t k = static_cast<std::size_t>(it - times.begin());
    if (*it == t) return psi[k * width() + static_cast<std::size_t>(x - x_lo)];
    phi.assign(phi_rows.begin() + static_cast<std::ptrdiff_t>(k * f_width),
               phi_rows.begin() + static_cast<std::ptrdiff_t>((k + 1) * f_width));
    I.assign(flux_rows.begin() + static_cast<std::ptrdiff_t>(k * f_width),
             flux_rows.begin() + static_cast<std::ptrdiff_t>((k + 1) * f_width));
    from = *it;
  }
  detail::project_down(env, f_lo, f_width, from, t, phi, I, {}, tol, [](std::size_t, double) {});
  return S[i] - (flux_rows[t0 * f_width + i] - I[i]);
}

// psi on the grid times x [x_lo, x_hi], projected from phi at its last grid
// time. phi must cover [x_lo - 1, x_hi + 1]; the whole phi row is used as the
// projection window, and the grid times must lie in [.., last phi time] and
// include 0.
inline PsiField build_psi(const EnvironmentWindow& env, const PhiField& phi, std::vector<double> times,
                          std::int64_t x_lo, std::int64_t x_hi, double tol = 1e-12) {
  if (phi.times.empty()) throw ConfigError("build_psi: empty phi field");
  const std::size_t top = phi.times.size() - 1;
  return detail::project_psi(env, phi.method, phi.times[top], phi.x_lo, phi.row(top), std::move(times), x_lo, x_hi,
                             tol);
}

// psi of the shifted environment, psi o tau_{t, x}, from the same phi data.
inline PsiField shifted_psi(const PsiField& psi, double t, std::int64_t x, std::vector<double> times,
                            std::int64_t x_lo, std::int64_t x_hi) {
  return detail::project_psi(env::shift_view(psi.env, t, x), psi.phi_method, psi.t_top - t, psi.f_lo - x,
                             psi.phi_top, std::move(times), x_lo, x_hi, psi.tol);
}

// ---------------------------------------------------------------------------
// Structural checks

struct GradientCheck {
  double min_gradient = std::numeric_limits<double>::infinity();
  double max_identity_error = 0.0;  // |psi(t,x+1) - psi(t,x) - phi(t,x)|
  std::size_t points = 0;
  bool positive() const { return min_gradient > 0.0; }
};

inline GradientCheck gradient_check(const PsiField& psi) {
  GradientCheck g;
  for (std::size_t ti = 0; ti < psi.times.size(); ++ti)
    for (std::int64_t x = psi.x_lo; x < psi.x_hi; ++x) {
      const double d = psi.at(ti, x + 1) - psi.at(ti, x);
      g.min_gradient = std::min(g.min_gradient, d);
      g.max_identity_error = std::max(g.max_identity_error, std::abs(d - psi.phi_at(ti, x)));
      ++g.points;
    }
  return g;
}

struct PdeResidual {
  double max_abs = 0.0;
  std::size_t probes = 0;
};

// d/dt psi + L_t psi at random interior points by central differences, with
// the step kept inside the constant-rate stretch of the nearby edges.
inline PdeResidual pde_residual(const PsiField& psi, std::size_t n_probes, std::uint64_t seed) {
  if (psi.x_hi - psi.x_lo < 2) throw ConfigError("pde_residual needs at least 3 psi vertices");
  const double t_lo = psi.times.front(), t_hi = std::min(psi.times.back(), psi.t_top);
  if (!(t_hi > t_lo)) throw ConfigError("pde_residual needs a psi grid spanning positive time");
  PdeResidual r;
  Rng rng(derive_tag(seed, Tag::CorrectorProbe, 0));
  std::size_t attempts = 0;
  while (r.probes < n_probes) {
    if (++attempts > 100 * n_probes + 100) throw NumericalError("pde_residual: no probe away from rate changes");
    const double t = t_lo + (t_hi - t_lo) * rng.uniform();
    const std::int64_t x = psi.x_lo + 1 + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(psi.x_hi - psi.x_lo - 1)));
    double dist = std::min(t - t_lo, t_hi - t);
    for (std::int64_t e = std::max(psi.f_lo, x - 3); e <= std::min(psi.f_hi(), x + 2); ++e) {
      const env::TrackRef tr = psi.env.track(e);
      const double tb = psi.env.to_base(t);
      const std::size_t i = tr.piece_at(tb);
      dist = std::min({dist, tb - tr.breaks[i], tr.breaks[i + 1] - tb});
    }
    if (!(dist > 1e-7)) continue;
    const double h = std::min(1e-4, 0.25 * dist);
    const double dt = (psi.evaluate(t + h, x) - psi.evaluate(t - h, x)) / (2.0 * h);
    const double p0 = psi.evaluate(t, x);
    const double L = psi.env.rate_at(x, t) * (psi.evaluate(t, x + 1) - p0) +
                     psi.env.rate_at(x - 1, t) * (psi.evaluate(t, x - 1) - p0);
    r.max_abs = std::max(r.max_abs, std::abs(dt + L));
    ++r.probes;
  }
  return r;
}

struct CocycleResidual {
  double max_abs = 0.0;
  std::size_t probes = 0;
};

// psi(t+s, x+y) - psi(t, x) - psi o tau_{t,x}(s, y) at random probes with
// (t, x) a grid point and t + s a grid time.
inline CocycleResidual cocycle_residual(const PsiField& psi, std::size_t n_probes, std::uint64_t seed) {
  CocycleResidual r;
  Rng rng(derive_tag(seed, Tag::CorrectorProbe, 1));
  const std::size_t nt = psi.times.size();
  for (std::size_t p = 0; p < n_probes; ++p) {
    const std::size_t i = rng.below(nt), j = rng.below(nt);
    const std::int64_t w = psi.x_hi - psi.x_lo + 1;
    const std::int64_t x = psi.x_lo + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(w)));
    const std::int64_t xy = psi.x_lo + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(w)));
    const double t = psi.times[i], s = psi.times[j] - t;
    const std::int64_t y = xy - x;
    // The shifted field must reach (0, 0) and (s, y) on its own grid.
    std::vector<double> ts = {0.0, s};
    const PsiField sh = shifted_psi(psi, t, x, ts, std::min<std::int64_t>(0, y), std::max<std::int64_t>(0, y));
    const double v = psi.at(j, xy) - psi.at(i, x) - sh.at(sh.time_index(s), y);
    r.max_abs = std::max(r.max_abs, std::abs(v));
    ++r.probes;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Dual-walk representation of chi(-t, 0)

struct ChiDualOptions {
  double M = 6.0;
  unsigned threads = 0;
  bool antithetic = true;
};

struct ChiDualEstimate {
  stats::Estimate chi;  // chi(-t, 0)
  double t = 0.0;
  std::int64_t x_max = 0;  // start vertices -x_max-1 .. x_max
  std::size_t n_paths = 0;
  double tail_proxy = 0.0;  // |contribution| of the outermost tenth of the start vertices
  std::size_t truncated_paths = 0;
};

// chi(-t, 0) = sum_{x>=0} phi(0,x) P^x(Y_t < 0) - sum_{x<0} phi(0,x) P^x(Y_t >= 0),
// with phi taken from the grid time 0 of the field. Start vertices x and
// -1-x are simulated as pairs; with antithetic pairing the partner path uses
// the same seed and mirrored steps.
inline ChiDualEstimate chi_dual_mc(const EnvironmentWindow& env, const PhiField& phi, double t, std::size_t n_paths,
                                   std::uint64_t seed, const ChiDualOptions& o = {}) {
  if (!(t > 0.0)) throw ConfigError("chi_dual_mc needs t > 0");
  if (n_paths < 2) throw ConfigError("chi_dual_mc needs at least 2 paths per vertex");
  if (!(o.M > 0.0)) throw ConfigError("chi_dual_mc needs M > 0");
  const std::size_t t0 = phi.time_index(0.0);
  ChiDualEstimate r;
  r.t = t;
  r.n_paths = n_paths;
  r.x_max = static_cast<std::int64_t>(std::ceil(o.M * std::sqrt(t)));
  if (!phi.contains(-r.x_max - 1) || !phi.contains(r.x_max))
    throw ConfigError("phi field must cover start vertices [" + std::to_string(-r.x_max - 1) + ", " +
                      std::to_string(r.x_max) + "]");
  const std::int64_t half = walk::default_half_width(env.spec(), t) + r.x_max + 1;
  const EnvironmentWindow e =
      env::extend(env, std::min(env.x_min(), -half), std::max(env.x_max(), half), std::min(env.t_min(), -t),
                  std::max(env.t_max(), 0.0));
  const std::size_t pairs = static_cast<std::size_t>(r.x_max + 1);
  std::vector<double> mean(pairs), var(pairs);
  std::vector<std::size_t> trunc(pairs);
  parallel_for(pairs, resolve_threads(o.threads), [&](std::size_t k) {
    const std::int64_t x = static_cast<std::int64_t>(k), xm = -1 - x;
    const double fp = phi.at(t0, x), fm = phi.at(t0, xm);
    dual::DualOptions plain, mirrored;
    mirrored.mirror_steps = o.antithetic;
    std::vector<double> z(n_paths);
    std::vector<double> none;
    for (std::size_t j = 0; j < n_paths; ++j) {
      const std::uint64_t s1 = derive_tag(seed, Tag::CorrectorProbe, (static_cast<std::uint64_t>(k) << 32) | j);
      const std::uint64_t s2 = o.antithetic ? s1 : derive(s1, 0xA5);
      std::vector<double> cv;
      const auto a = dual::detail::run_y(e, x, t, s1, none, cv, plain, [](double, double, int) {});
      const auto b = dual::detail::run_y(e, xm, t, s2, none, cv, mirrored, [](double, double, int) {});
      trunc[k] += (a.second ? 1 : 0) + (b.second ? 1 : 0);
      z[j] = (a.first < 0 ? fp : 0.0) - (b.first >= 0 ? fm : 0.0);
    }
    const auto est = stats::mean_se(z);
    mean[k] = est.value;
    var[k] = est.se * est.se;
  });
  double m = 0.0, v = 0.0;
  for (std::size_t k = 0; k < pairs; ++k) {
    m += mean[k];
    v += var[k];
    r.truncated_paths += trunc[k];
  }
  const std::size_t tail_from = pairs - std::max<std::size_t>(1, pairs / 10);
  for (std::size_t k = tail_from; k < pairs; ++k) r.tail_proxy += std::abs(mean[k]);
  r.chi = {m, std::sqrt(v), n_paths * pairs * 2};
  return r;
}

// chi(-t, 0) from the projection, i.e. int_{-t}^0 J(s, 0) ds, with phi at grid
// time 0 as the top. The window spans the phi field.
inline double chi_direct(const EnvironmentWindow& env, const PhiField& phi, double t) {
  const std::size_t t0 = phi.time_index(0.0);
  const PsiField psi =
      detail::project_psi(env, phi.method, 0.0, phi.x_lo, phi.row(t0), {-t, 0.0}, 0, 0, 1e-12);
  return psi.at(0, 0);
}

// ---------------------------------------------------------------------------
// Sublinearity in diffusive boxes

struct SublinearityRow {
  double n = 0.0;
  double box_ratio = 0.0;       // max_{|x| <= sqrt n, 0 <= t <= n} |chi(t,x)| / sqrt n
  double spatial_ratio = 0.0;   // max_{|x| <= sqrt n} |chi(0,x)| / sqrt n
  double temporal_ratio = 0.0;  // max_{0 <= t <= n} |chi(t,0)| / sqrt n
};

inline std::vector<SublinearityRow> sublinearity_report(const PsiField& psi, const std::vector<double>& n_list) {
  std::vector<SublinearityRow> out;
  const std::size_t t0 = psi.time_index(0.0);
  for (double n : n_list) {
    if (!(n > 0.0)) throw ConfigError("diffusive box sizes must be positive");
    const double rn = std::sqrt(n);
    const std::int64_t r = static_cast<std::int64_t>(std::floor(rn));
    if (-r < psi.x_lo || r > psi.x_hi || psi.times.back() < n)
      throw ConfigError("psi grid does not cover the diffusive box of size " + io::fmt(n));
    SublinearityRow row;
    row.n = n;
    for (std::size_t ti = t0; ti < psi.times.size() && psi.times[ti] <= n; ++ti) {
      for (std::int64_t x = -r; x <= r; ++x) row.box_ratio = std::max(row.box_ratio, std::abs(psi.chi_at(ti, x)));
      row.temporal_ratio = std::max(row.temporal_ratio, std::abs(psi.chi_at(ti, 0)));
    }
    for (std::int64_t x = -r; x <= r; ++x) row.spatial_ratio = std::max(row.spatial_ratio, std::abs(psi.chi_at(t0, x)));
    row.box_ratio /= rn;
    row.spatial_ratio /= rn;
    row.temporal_ratio /= rn;
    out.push_back(row);
  }
  return out;
}

// One environment per seed: phi at the top time n_max, psi on [0, n_max] x
// [-sqrt(n_max), sqrt(n_max)] with `steps` equally spaced times.
struct CorrectorFields {
  EnvironmentWindow env;
  PhiField phi;
  PsiField psi;
};

inline CorrectorFields diffusive_fields(const EnvSpec& spec, double n_max, std::uint64_t seed, std::size_t steps = 200,
                                        std::int64_t pad = 20, const PhiParams& p = {},
                                        std::optional<PhiMethod> method = std::nullopt) {
  if (!(n_max > 0.0) || steps < 1) throw ConfigError("diffusive_fields needs n_max > 0 and steps >= 1");
  const std::int64_t r = static_cast<std::int64_t>(std::floor(std::sqrt(n_max)));
  const std::int64_t f = r + pad;
  CorrectorFields c;
  c.env = env::build_env(spec, -f - 1, f + 2, 0.0, n_max, derive_tag(seed, Tag::CorrectorEnv, 0));
  c.phi = build_phi(c.env, method.value_or(auto_method(spec)), {n_max}, -f, f, p);
  std::vector<double> ts;
  for (std::size_t k = 0; k <= steps; ++k) ts.push_back(n_max * static_cast<double>(k) / static_cast<double>(steps));
  ts.back() = n_max;
  c.psi = build_psi(c.phi.env, c.phi, ts, -r, r);
  return c;
}

// ---------------------------------------------------------------------------
// Export

inline std::string to_csv(const PhiField& f) {
  std::string out = "t,x,value\n";
  for (std::size_t ti = 0; ti < f.times.size(); ++ti)
    for (std::int64_t x = f.x_lo; x <= f.x_hi(); ++x)
      out += io::fmt(f.times[ti]) + "," + std::to_string(x) + "," + io::fmt(f.at(ti, x)) + "\n";
  return out;
}

inline json metadata_json(const PhiField& f) {
  json j;
  j["schema_version"] = 1;
  j["field"] = "phi";
  j["method"] = to_string(f.method);
  j["x_lo"] = f.x_lo;
  j["x_hi"] = f.x_hi();
  j["times"] = f.times;
  j["eps_schedule"] = f.eps_schedule;
  j["extrapolation"] = f.eps_schedule.empty() ? "none" : "polynomial in sqrt(eps)";
  j["fallbacks"] = f.fallbacks;
  j["normalization"] = {{"spatial_mean", f.spatial_mean.value},
                        {"se", f.spatial_mean.se},
                        {"n", f.spatial_mean.n}};
  j["env_spec"] = env::spec_to_json(f.env.spec());
  j["env_seed"] = f.env.seed();
  return j;
}

inline std::string to_csv(const PsiField& f) {
  std::string out = "t,x,value\n";
  for (std::size_t ti = 0; ti < f.times.size(); ++ti)
    for (std::int64_t x = f.x_lo; x <= f.x_hi; ++x)
      out += io::fmt(f.times[ti]) + "," + std::to_string(x) + "," + io::fmt(f.at(ti, x)) + "\n";
  return out;
}

inline json metadata_json(const PsiField& f) {
  json j;
  j["schema_version"] = 1;
  j["field"] = "psi";
  j["phi_source"] = to_string(f.phi_method);
  j["construction"] = "reflecting adjoint projection from the phi top time";
  j["time_integration_tol"] = f.tol;
  j["t_top"] = f.t_top;
  j["projection_window"] = {f.f_lo, f.f_hi()};
  j["x_lo"] = f.x_lo;
  j["x_hi"] = f.x_hi;
  j["times"] = f.times;
  j["env_seed"] = f.env.seed();
  return j;
}

}  // namespace condsim::corrector
