#pragma once
// End-to-end experiments: run configuration, diagnostics report, the
// invariance check (three diffusivity estimators, KS table, martingale checks
// on psi(t, X_t)), the b phi^2 versus b phi comparison, sublinearity trends and
// the two moment counterexamples.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "condsim/corrector.hpp"
#include "condsim/dual.hpp"
#include "condsim/env.hpp"
#include "condsim/errors.hpp"
#include "condsim/io.hpp"
#include "condsim/kernel.hpp"
#include "condsim/parallel.hpp"
#include "condsim/random.hpp"
#include "condsim/stats.hpp"
#include "condsim/walk.hpp"

namespace condsim::harness {

using env::EnvironmentWindow;
using env::EnvSpec;
using nlohmann::json;
using stats::Estimate;

inline constexpr int kConfigSchema = 1;
inline constexpr int kReportSchema = 1;

// ---------------------------------------------------------------------------
// Run configuration

struct Tolerances {
  double sigma2_rel = 0.05;
  double se_multiplier = 3.0;
  double concordance_se = 2.0;
  double r_beta_rel = 0.10;
  double growth_min = 3.0;
  double control_growth_max = 1.3;
  double control_level_abs = 0.05;
  std::vector<double> ks_max;  // one per n_ladder entry, empty = not gated
  bool operator==(const Tolerances&) const = default;
};

struct WindowConfig {
  std::int64_t x_min = -50, x_max = 50;
  double t_min = 0.0, t_max = 10.0;
  bool operator==(const WindowConfig&) const = default;
};

struct KernelConfig {
  double s = 1.0;
  std::int64_t x = 0;
  double t = 0.0;
  std::int64_t radius = 64;
  int n_jumps = kernel::kAllJumps;
  double tol = 1e-12;
  double epsilon = 0.1;
  std::size_t probes = 50;
  bool operator==(const KernelConfig&) const = default;
};

struct RunConfig {
  int schema_version = kConfigSchema;
  std::string experiment = "invariance";  // invariance | remark84 | sublinearity | counterexample_lower | counterexample_upper
  EnvSpec env;
  std::optional<EnvSpec> control_env;
  std::uint64_t seed = 1;
  unsigned threads = 0;
  std::string mode = "quenched";
  double horizon = 100.0;
  std::size_t n_paths = 1000;
  std::vector<double> n_ladder{100.0, 1000.0, 10000.0};
  double ks_time = 1.0;
  std::vector<double> sample_times;
  std::size_t replicates = 20;
  double martingale_horizon = 50.0;
  std::size_t martingale_paths = 1000;
  std::size_t martingale_steps = 20;
  std::size_t martingale_envs = 10;
  double dual_horizon = 1000.0;
  std::size_t dual_paths = 500;
  std::vector<double> eps_schedule{0.1, 0.01, 0.001};
  double beta = 1.0;
  double delta = 0.5;
  double quantile = 0.9;
  std::vector<double> r_beta_times{100.0, 1000.0, 10000.0};
  std::size_t r_beta_samples = 2000;
  std::int64_t field_half_width = 200;
  double field_span = 0.0;
  double field_step = 1.0;
  std::size_t field_steps = 200;
  WindowConfig window;
  KernelConfig kernel;
  std::optional<double> expected_sigma2;
  Tolerances tolerances;
  std::string out_dir = "out";
  std::string format = "csv";
  bool operator==(const RunConfig&) const = default;
};

namespace detail {

// Reads only the listed keys; anything else is a configuration error.
class Reader {
 public:
  Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + " must be a JSON object");
  }
  template <class T>
  void get(const char* key, T& out) {
    seen_.push_back(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }
  const json* sub(const char* key) {
    seen_.push_back(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }
  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (std::find(seen_.begin(), seen_.end(), it.key()) == seen_.end())
        throw ConfigError("unknown key '" + it.key() + "' in " + where_);
  }

 private:
  const json& j_;
  std::string where_;
  std::vector<std::string> seen_;
};

inline void check_positive(double v, const char* name) {
  if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(std::string(name) + " must be positive and finite");
}

}  // namespace detail

inline json to_json(const RunConfig& c) {
  json j;
  j["schema_version"] = c.schema_version;
  j["experiment"] = c.experiment;
  j["env"] = env::spec_to_json(c.env);
  if (c.control_env) j["control_env"] = env::spec_to_json(*c.control_env);
  j["seed"] = c.seed;
  j["threads"] = c.threads;
  j["mode"] = c.mode;
  j["horizon"] = c.horizon;
  j["n_paths"] = c.n_paths;
  j["n_ladder"] = c.n_ladder;
  j["ks_time"] = c.ks_time;
  j["sample_times"] = c.sample_times;
  j["replicates"] = c.replicates;
  j["martingale_horizon"] = c.martingale_horizon;
  j["martingale_paths"] = c.martingale_paths;
  j["martingale_steps"] = c.martingale_steps;
  j["martingale_envs"] = c.martingale_envs;
  j["dual_horizon"] = c.dual_horizon;
  j["dual_paths"] = c.dual_paths;
  j["eps_schedule"] = c.eps_schedule;
  j["beta"] = c.beta;
  j["delta"] = c.delta;
  j["quantile"] = c.quantile;
  j["r_beta_times"] = c.r_beta_times;
  j["r_beta_samples"] = c.r_beta_samples;
  j["field_half_width"] = c.field_half_width;
  j["field_span"] = c.field_span;
  j["field_step"] = c.field_step;
  j["field_steps"] = c.field_steps;
  j["window"] = {{"x_min", c.window.x_min}, {"x_max", c.window.x_max}, {"t_min", c.window.t_min},
                 {"t_max", c.window.t_max}};
  j["kernel"] = {{"s", c.kernel.s},           {"x", c.kernel.x},           {"t", c.kernel.t},
                 {"radius", c.kernel.radius}, {"n_jumps", c.kernel.n_jumps}, {"tol", c.kernel.tol},
                 {"epsilon", c.kernel.epsilon}, {"probes", c.kernel.probes}};
  if (c.expected_sigma2) j["expected_sigma2"] = *c.expected_sigma2;
  const Tolerances& t = c.tolerances;
  j["tolerances"] = {{"sigma2_rel", t.sigma2_rel},
                     {"se_multiplier", t.se_multiplier},
                     {"concordance_se", t.concordance_se},
                     {"r_beta_rel", t.r_beta_rel},
                     {"growth_min", t.growth_min},
                     {"control_growth_max", t.control_growth_max},
                     {"control_level_abs", t.control_level_abs},
                     {"ks_max", t.ks_max}};
  j["output"] = {{"dir", c.out_dir}, {"format", c.format}};
  return j;
}

inline void validate(const RunConfig& c) {
  static const std::vector<std::string> kinds = {"invariance", "remark84", "sublinearity", "counterexample_lower",
                                                 "counterexample_upper"};
  if (std::find(kinds.begin(), kinds.end(), c.experiment) == kinds.end())
    throw ConfigError("unknown experiment '" + c.experiment + "'");
  if (c.mode != "quenched" && c.mode != "annealed") throw ConfigError("mode must be 'quenched' or 'annealed'");
  if (c.format != "csv" && c.format != "json") throw ConfigError("format must be 'csv' or 'json'");
  env::validate(c.env);
  if (c.control_env) env::validate(*c.control_env);
  detail::check_positive(c.horizon, "horizon");
  detail::check_positive(c.ks_time, "ks_time");
  detail::check_positive(c.martingale_horizon, "martingale_horizon");
  detail::check_positive(c.dual_horizon, "dual_horizon");
  detail::check_positive(c.beta, "beta");
  detail::check_positive(c.delta, "delta");
  detail::check_positive(c.field_step, "field_step");
  if (!(c.quantile > 0.0 && c.quantile < 1.0)) throw ConfigError("quantile must lie in (0, 1)");
  if (c.n_paths < 2 || c.martingale_paths < 2 || c.dual_paths < 2 || c.replicates < 1 || c.r_beta_samples < 2)
    throw ConfigError("path and replicate counts must be at least 2 (replicates at least 1)");
  if (c.martingale_steps < 2 || c.field_steps < 1 || c.martingale_envs < 1)
    throw ConfigError("martingale_steps >= 2, field_steps >= 1 and martingale_envs >= 1");
  if (c.n_ladder.empty()) throw ConfigError("n_ladder must not be empty");
  for (double n : c.n_ladder) detail::check_positive(n, "n_ladder entries");
  if (!std::is_sorted(c.n_ladder.begin(), c.n_ladder.end())) throw ConfigError("n_ladder must be ascending");
  for (double t : c.r_beta_times) detail::check_positive(t, "r_beta_times entries");
  for (double e : c.eps_schedule) detail::check_positive(e, "eps_schedule entries");
  if (c.eps_schedule.empty()) throw ConfigError("eps_schedule must not be empty");
  if (!c.tolerances.ks_max.empty() && c.tolerances.ks_max.size() != c.n_ladder.size())
    throw ConfigError("tolerances.ks_max needs one entry per n_ladder entry");
  if (c.field_half_width < 1) throw ConfigError("field_half_width must be >= 1");
  if (!(c.field_span >= 0.0)) throw ConfigError("field_span must be >= 0");
  if (!(c.window.x_min < c.window.x_max) || !(c.window.t_min < c.window.t_max))
    throw ConfigError("window needs x_min < x_max and t_min < t_max");
}

inline RunConfig config_from_json(const json& j) {
  RunConfig c;
  detail::Reader r(j, "config");
  r.get("schema_version", c.schema_version);
  if (c.schema_version != kConfigSchema)
    throw ConfigError("unsupported config schema_version " + std::to_string(c.schema_version));
  r.get("experiment", c.experiment);
  if (const json* e = r.sub("env"))
    c.env = env::spec_from_json(*e);
  else
    throw ConfigError("config needs an 'env' section");
  if (const json* e = r.sub("control_env")) c.control_env = env::spec_from_json(*e);
  r.get("seed", c.seed);
  r.get("threads", c.threads);
  r.get("mode", c.mode);
  r.get("horizon", c.horizon);
  r.get("n_paths", c.n_paths);
  r.get("n_ladder", c.n_ladder);
  r.get("ks_time", c.ks_time);
  r.get("sample_times", c.sample_times);
  r.get("replicates", c.replicates);
  r.get("martingale_horizon", c.martingale_horizon);
  r.get("martingale_paths", c.martingale_paths);
  r.get("martingale_steps", c.martingale_steps);
  r.get("martingale_envs", c.martingale_envs);
  r.get("dual_horizon", c.dual_horizon);
  r.get("dual_paths", c.dual_paths);
  r.get("eps_schedule", c.eps_schedule);
  r.get("beta", c.beta);
  r.get("delta", c.delta);
  r.get("quantile", c.quantile);
  r.get("r_beta_times", c.r_beta_times);
  r.get("r_beta_samples", c.r_beta_samples);
  r.get("field_half_width", c.field_half_width);
  r.get("field_span", c.field_span);
  r.get("field_step", c.field_step);
  r.get("field_steps", c.field_steps);
  if (const json* w = r.sub("window")) {
    detail::Reader rw(*w, "config.window");
    rw.get("x_min", c.window.x_min);
    rw.get("x_max", c.window.x_max);
    rw.get("t_min", c.window.t_min);
    rw.get("t_max", c.window.t_max);
    rw.finish();
  }
  if (const json* k = r.sub("kernel")) {
    detail::Reader rk(*k, "config.kernel");
    rk.get("s", c.kernel.s);
    rk.get("x", c.kernel.x);
    rk.get("t", c.kernel.t);
    rk.get("radius", c.kernel.radius);
    rk.get("n_jumps", c.kernel.n_jumps);
    rk.get("tol", c.kernel.tol);
    rk.get("epsilon", c.kernel.epsilon);
    rk.get("probes", c.kernel.probes);
    rk.finish();
  }
  if (const json* e = r.sub("expected_sigma2")) {
    if (!e->is_number()) throw ConfigError("expected_sigma2 must be a number");
    c.expected_sigma2 = e->get<double>();
  }
  if (const json* t = r.sub("tolerances")) {
    detail::Reader rt(*t, "config.tolerances");
    rt.get("sigma2_rel", c.tolerances.sigma2_rel);
    rt.get("se_multiplier", c.tolerances.se_multiplier);
    rt.get("concordance_se", c.tolerances.concordance_se);
    rt.get("r_beta_rel", c.tolerances.r_beta_rel);
    rt.get("growth_min", c.tolerances.growth_min);
    rt.get("control_growth_max", c.tolerances.control_growth_max);
    rt.get("control_level_abs", c.tolerances.control_level_abs);
    rt.get("ks_max", c.tolerances.ks_max);
    rt.finish();
  }
  if (const json* o = r.sub("output")) {
    detail::Reader ro(*o, "config.output");
    ro.get("dir", c.out_dir);
    ro.get("format", c.format);
    ro.finish();
  }
  r.finish();
  validate(c);
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(io::read_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError("cannot parse " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

// Hash of everything that can change a reported number. Worker count and
// output location are excluded.
inline std::string config_hash(const RunConfig& c) {
  json j = to_json(c);
  j.erase("threads");
  j.erase("output");
  const std::string s = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// Diagnostics report

struct Check {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct KsRow {
  double n = 0.0, time = 0.0, ks = 0.0, p_value = 0.0;
  std::size_t paths = 0;
  std::optional<double> threshold;
};

struct MartingaleStats {
  Estimate mean_increment, lag1_autocorr, qv_over_t;
  std::string qv_method;  // "pathwise" or "isometry"
  std::size_t paths = 0, exits = 0;
  double horizon = 0.0;
};

struct RBetaPoint {
  double t = 0.0;
  Estimate value;
  double upper_bound = 0.0;
};

struct TightnessRow {
  double n = 0.0;
  double median = 0.0;
  std::vector<double> per_replicate;
};

struct DiagnosticsReport {
  int schema_version = kReportSchema;
  std::string experiment;
  std::string config_hash;
  std::uint64_t master_seed = 0;
  json env_spec;
  std::optional<Estimate> sigma2_empirical, sigma2_bphi2, sigma2_qv, sigma2_dual, theta_mean;
  std::vector<KsRow> ks_table;
  std::optional<MartingaleStats> martingale;
  std::vector<corrector::SublinearityRow> sublinearity_ratios;  // medians over replicates
  std::vector<std::vector<corrector::SublinearityRow>> sublinearity_replicates;
  std::vector<RBetaPoint> r_beta_curve;
  std::vector<TightnessRow> tightness_quantiles;
  json w_ref = json::object();
  json sections = json::object();  // experiment-specific tables
  std::vector<Check> checks;
  std::vector<std::pair<std::string, std::string>> errors;  // (stage, message)

  bool partial() const { return !errors.empty(); }
  bool all_passed() const {
    if (partial()) return false;
    return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.passed; });
  }
  void check(std::string name, bool ok, std::string detail) { checks.push_back({std::move(name), ok, std::move(detail)}); }
};

inline json to_json(const Estimate& e) { return {{"value", e.value}, {"se", e.se}, {"n", e.n}}; }

inline json to_json(const DiagnosticsReport& r) {
  json j;
  j["schema_version"] = r.schema_version;
  j["experiment"] = r.experiment;
  j["config_hash"] = r.config_hash;
  j["seeds"] = {{"master", r.master_seed}};
  j["env_spec"] = r.env_spec;
  auto opt = [](const std::optional<Estimate>& e) { return e ? to_json(*e) : json(nullptr); };
  j["sigma2_walk"] = {{"empirical_variance", opt(r.sigma2_empirical)},
                      {"two_b_phi2", opt(r.sigma2_bphi2)},
                      {"quadratic_variation", opt(r.sigma2_qv)}};
  j["sigma2_dual"] = opt(r.sigma2_dual);
  j["theta_mean"] = opt(r.theta_mean);
  json ks = json::array();
  for (const auto& k : r.ks_table)
    ks.push_back({{"n", k.n},
                  {"time", k.time},
                  {"ks", k.ks},
                  {"p_value", k.p_value},
                  {"paths", k.paths},
                  {"threshold", k.threshold ? json(*k.threshold) : json(nullptr)}});
  j["ks_table"] = ks;
  if (r.martingale) {
    const auto& m = *r.martingale;
    j["martingale_stats"] = {{"mean_increment", to_json(m.mean_increment)},
                             {"lag1_autocorr", to_json(m.lag1_autocorr)},
                             {"qv_over_t", to_json(m.qv_over_t)},
                             {"qv_method", m.qv_method},
                             {"paths", m.paths},
                             {"exits", m.exits},
                             {"horizon", m.horizon}};
  } else {
    j["martingale_stats"] = nullptr;
  }
  json sub = json::array();
  for (const auto& s : r.sublinearity_ratios)
    sub.push_back({{"n", s.n}, {"box", s.box_ratio}, {"spatial", s.spatial_ratio}, {"temporal", s.temporal_ratio}});
  j["sublinearity_ratios"] = sub;
  json rb = json::array();
  for (const auto& p : r.r_beta_curve) rb.push_back({{"t", p.t}, {"value", to_json(p.value)}, {"upper_bound", p.upper_bound}});
  j["r_beta_curve"] = rb;
  json tq = json::array();
  for (const auto& q : r.tightness_quantiles) tq.push_back({{"n", q.n}, {"median", q.median}, {"per_replicate", q.per_replicate}});
  j["tightness_quantiles"] = tq;
  j["W_ref"] = r.w_ref;
  j["sections"] = r.sections;
  json ch = json::array();
  for (const auto& c : r.checks) ch.push_back({{"name", c.name}, {"passed", c.passed}, {"detail", c.detail}});
  j["checks"] = ch;
  json er = json::array();
  for (const auto& [stage, msg] : r.errors) er.push_back({{"stage", stage}, {"message", msg}});
  j["errors"] = er;
  j["partial"] = r.partial();
  return j;
}

namespace detail {

inline DiagnosticsReport new_report(const RunConfig& c) {
  DiagnosticsReport r;
  r.experiment = c.experiment;
  r.config_hash = config_hash(c);
  r.master_seed = c.seed;
  r.env_spec = env::spec_to_json(c.env);
  return r;
}

// Runs a stage; numerical and range failures mark the report partial, while
// configuration errors propagate.
template <class F>
void stage(DiagnosticsReport& r, const char* name, F&& f) {
  try {
    f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    r.errors.emplace_back(name, e.what());
  }
}

inline std::string fmt_est(const Estimate& e) { return io::fmt(e.value) + " +- " + io::fmt(e.se); }

inline Estimate scale(Estimate e, double k) {
  e.value *= k;
  e.se *= std::abs(k);
  return e;
}

inline bool within_rel(double v, double ref, double rel) { return std::abs(v - ref) <= rel * std::abs(ref); }

inline std::uint64_t stage_seed(std::uint64_t master, std::uint64_t k) { return derive_tag(master, Tag::HarnessStage, k); }

inline std::vector<double> ladder_times(const RunConfig& c) {
  std::vector<double> ts;
  for (double n : c.n_ladder) ts.push_back(n * c.ks_time);
  return ts;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Corrector stage shared by the invariance check

struct QuenchedFields {
  corrector::PhiField phi;
  corrector::PsiField psi;
  std::int64_t reach = 0;  // psi covers [-reach, reach]
};

inline QuenchedFields quenched_fields(const RunConfig& c, std::uint64_t env_seed) {
  const double T = c.martingale_horizon;
  double B = env::sup_rate(c.env);
  if (!std::isfinite(B)) throw ConfigError("the martingale stage needs bounded rates");
  QuenchedFields q;
  q.reach = static_cast<std::int64_t>(std::ceil(6.0 * std::sqrt(2.0 * B * T))) + 10;
  const std::int64_t pad = 20;
  const auto e = env::build_env(c.env, -q.reach - pad - 1, q.reach + pad + 2, 0.0, T, env_seed);
  corrector::PhiParams p;
  p.eps_schedule = c.eps_schedule;
  p.threads = c.threads;
  q.phi = corrector::build_phi(e, corrector::auto_method(c.env), {T}, -q.reach - pad, q.reach + pad, p);
  std::vector<double> ts;
  for (std::size_t k = 0; k <= c.martingale_steps; ++k)
    ts.push_back(T * static_cast<double>(k) / static_cast<double>(c.martingale_steps));
  ts.back() = T;
  q.psi = corrector::build_psi(q.phi.env, q.phi, ts, -q.reach, q.reach);
  return q;
}

// Theta o tau_{t,x} = b_t(x) phi(t,x)^2 + b_t(x-1) phi(t,x-1)^2 and b phi^2,
// averaged over the psi grid times for each |x| <= half, then over x and the
// environments with batch means (one batch per environment at least).
struct ErgodicPhi {
  Estimate b_phi2, b_phi, theta, gap;  // gap = b phi^2 - b phi
};

inline ErgodicPhi ergodic_phi(const std::vector<QuenchedFields>& fields, std::int64_t half) {
  std::vector<double> bp2, bp, th, gap;
  for (const auto& f : fields) {
    const corrector::PsiField& psi = f.psi;
    const double n = static_cast<double>(psi.times.size());
    for (std::int64_t x = -half; x <= half; ++x) {
      double a = 0.0, b = 0.0, c = 0.0;
      for (std::size_t ti = 0; ti < psi.times.size(); ++ti) {
        const double t = psi.times[ti];
        const double r0 = psi.env.rate_at(x, t), r1 = psi.env.rate_at(x - 1, t);
        const double p0 = psi.phi_at(ti, x), p1 = psi.phi_at(ti, x - 1);
        a += r0 * p0 * p0;
        b += r0 * p0;
        c += r0 * p0 * p0 + r1 * p1 * p1;
      }
      bp2.push_back(a / n);
      bp.push_back(b / n);
      th.push_back(c / n);
      gap.push_back((a - b) / n);
    }
  }
  const std::size_t nb = std::min(std::max<std::size_t>(20, fields.size()), bp2.size() / 2);
  auto est = [&](const std::vector<double>& v) { return nb >= 2 ? stats::batch_means(v, nb) : stats::mean_se(v); };
  return {est(bp2), est(bp), est(th), est(gap)};
}

// M_t = psi(t, X_t) on the psi grid for paths spread round-robin over the
// environments. With time-independent phi the bracket <M>_T is integrated
// exactly along each path; otherwise E[(M_T - M_0)^2] stands in for E<M>_T.
inline MartingaleStats martingale_stats(const RunConfig& c, const std::vector<QuenchedFields>& fields,
                                        std::uint64_t seed) {
  const corrector::PsiField& psi0 = fields.front().psi;
  const double T = psi0.times.back();
  const std::size_t K = psi0.times.size() - 1;
  const bool time_independent = psi0.phi_method != corrector::PhiMethod::kernel_extrapolated;
  std::vector<std::vector<double>> inc(c.martingale_paths);
  std::vector<double> qv(c.martingale_paths, 0.0);
  std::vector<char> exited(c.martingale_paths, 0);
  parallel_for(c.martingale_paths, resolve_threads(c.threads), [&](std::size_t i) {
    const QuenchedFields& f = fields[i % fields.size()];
    const corrector::PsiField& psi = f.psi;
    const auto p = walk::simulate_x(psi.env, 0, T, derive(seed, i));
    std::vector<double> M(K + 1);
    for (std::size_t k = 0; k <= K; ++k) {
      const std::int64_t x = p.position_at(psi.times[k]);
      if (x < -f.reach || x > f.reach) {
        exited[i] = 1;
        return;
      }
      M[k] = psi.at(k, x);
    }
    for (std::size_t k = 0; k < K; ++k) inc[i].push_back(M[k + 1] - M[k]);
    if (!time_independent) {
      qv[i] = (M[K] - M[0]) * (M[K] - M[0]);
      return;
    }
    // d<M> = [b(X) phi(X)^2 + b(X-1) phi(X-1)^2] dt between jumps.
    double a = 0.0, s = 0.0;
    std::int64_t x = p.start_vertex;
    auto hold = [&](double u) {
      const double f0 = psi.phi_at(0, x), f1 = psi.phi_at(0, x - 1);
      a += f0 * f0 * psi.env.integrated_rate(x, s, u) + f1 * f1 * psi.env.integrated_rate(x - 1, s, u);
    };
    for (std::size_t k = 0; k < p.jump_times.size(); ++k) {
      hold(p.jump_times[k]);
      s = p.jump_times[k];
      x = p.positions[k];
    }
    hold(T);
    qv[i] = a;
  });
  MartingaleStats m;
  m.horizon = T;
  m.qv_method = time_independent ? "pathwise" : "isometry";
  std::vector<double> total, q, a, b;
  for (std::size_t i = 0; i < c.martingale_paths; ++i) {
    if (exited[i]) {
      ++m.exits;
      continue;
    }
    double s = 0.0;
    for (double d : inc[i]) s += d;
    total.push_back(s);
    q.push_back(qv[i] / T);
    for (std::size_t k = 0; k + 1 < inc[i].size(); ++k) {
      a.push_back(inc[i][k]);
      b.push_back(inc[i][k + 1]);
    }
  }
  m.paths = total.size();
  if (total.size() < 2) throw NumericalError("martingale stage: fewer than 2 paths stayed inside the psi window");
  m.mean_increment = stats::mean_se(total);
  m.qv_over_t = stats::mean_se(q);
  // Lag-1 correlation with an SE from the products, robust to unequal variances.
  const double ma = stats::mean_se(a).value, mb = stats::mean_se(b).value;
  double va = 0.0, vb = 0.0;
  std::vector<double> prod(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    va += (a[i] - ma) * (a[i] - ma);
    vb += (b[i] - mb) * (b[i] - mb);
    prod[i] = (a[i] - ma) * (b[i] - mb);
  }
  const double sd = std::sqrt(va / static_cast<double>(a.size()) * vb / static_cast<double>(b.size()));
  const auto pe = stats::mean_se(prod);
  m.lag1_autocorr = {sd > 0.0 ? pe.value / sd : 0.0, sd > 0.0 ? pe.se / sd : 0.0, prod.size()};
  return m;
}

// ---------------------------------------------------------------------------
// Invariance check

inline DiagnosticsReport run_invariance_check(const RunConfig& c) {
  env::require_compliant(c.env, "run_invariance_check");
  DiagnosticsReport r = detail::new_report(c);
  const auto& tol = c.tolerances;
  walk::EnsembleSummary ens;
  std::vector<double> ks_times = detail::ladder_times(c);

  detail::stage(r, "walk", [&] {
    std::vector<double> ts = ks_times;
    ts.push_back(c.horizon);
    std::sort(ts.begin(), ts.end());
    ts.erase(std::unique(ts.begin(), ts.end()), ts.end());
    walk::EnsembleOptions o;
    o.threads = c.threads;
    ens = walk::ensemble_x(c.env, c.mode == "annealed" ? walk::Mode::annealed : walk::Mode::quenched, c.n_paths, ts,
                           detail::stage_seed(c.seed, 1), o);
    const std::size_t hi = static_cast<std::size_t>(std::find(ts.begin(), ts.end(), c.horizon) - ts.begin());
    r.sigma2_empirical = detail::scale(stats::variance_se(ens.column(hi)), 1.0 / c.horizon);
    r.sections["walk"] = {{"mode", c.mode}, {"paths", c.n_paths}, {"horizon", c.horizon},
                          {"truncated_paths", ens.truncated_paths}};
  });

  detail::stage(r, "corrector", [&] {
    std::vector<QuenchedFields> fields;
    double min_gradient = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < c.martingale_envs; ++k) {
      fields.push_back(quenched_fields(c, derive(detail::stage_seed(c.seed, 2), k)));
      min_gradient = std::min(min_gradient, corrector::gradient_check(fields.back().psi).min_gradient);
    }
    const ErgodicPhi e = ergodic_phi(fields, fields.front().reach / 2);
    r.sigma2_bphi2 = detail::scale(e.b_phi2, 2.0);
    r.theta_mean = e.theta;
    r.martingale = martingale_stats(c, fields, detail::stage_seed(c.seed, 3));
    r.sigma2_qv = r.martingale->qv_over_t;
    r.sections["corrector"] = {{"phi_method", corrector::to_string(fields.front().phi.method)},
                               {"environments", fields.size()},
                               {"psi_reach", fields.front().reach},
                               {"min_gradient", min_gradient}};
  });

  detail::stage(r, "dual", [&] {
    dual::DualEnsembleOptions o;
    o.threads = c.threads;
    o.annealed = c.mode == "annealed";
    const auto s = dual::ensemble_y(c.env, c.dual_paths, c.dual_horizon, detail::stage_seed(c.seed, 4), {}, o);
    r.sigma2_dual = dual::clock_slope(s).slope;
  });

  // Reference Gaussian: the expected value when given, otherwise the
  // empirical variance.
  double s2 = c.expected_sigma2.value_or(r.sigma2_empirical ? r.sigma2_empirical->value : 0.0);
  r.w_ref = {{"mean", 0.0},
             {"variance_per_unit_time", s2},
             {"source", c.expected_sigma2 ? "expected_sigma2" : "empirical_variance"}};
  if (!ens.positions.empty() && s2 > 0.0) {
    for (std::size_t i = 0; i < c.n_ladder.size(); ++i) {
      const double n = c.n_ladder[i];
      const auto it = std::find(ens.sample_times.begin(), ens.sample_times.end(), ks_times[i]);
      std::vector<double> xs;
      for (double v : ens.column(static_cast<std::size_t>(it - ens.sample_times.begin()))) xs.push_back(v / std::sqrt(n));
      KsRow k;
      k.n = n;
      k.time = ks_times[i];
      k.paths = xs.size();
      k.ks = stats::ks_normal(xs, 0.0, std::sqrt(s2 * c.ks_time));
      k.p_value = stats::ks_pvalue(k.ks, static_cast<double>(xs.size()));
      if (!tol.ks_max.empty()) k.threshold = tol.ks_max[i];
      r.ks_table.push_back(k);
    }
  }

  // Checks.
  std::vector<std::pair<std::string, Estimate>> est;
  if (r.sigma2_empirical) est.emplace_back("empirical_variance", *r.sigma2_empirical);
  if (r.sigma2_bphi2) est.emplace_back("two_b_phi2", *r.sigma2_bphi2);
  if (r.sigma2_qv) est.emplace_back("quadratic_variation", *r.sigma2_qv);
  if (c.expected_sigma2)
    for (const auto& [name, e] : est)
      r.check("sigma2_" + name + "_within_rel", detail::within_rel(e.value, *c.expected_sigma2, tol.sigma2_rel),
              detail::fmt_est(e) + " vs " + io::fmt(*c.expected_sigma2));
  for (std::size_t i = 0; i < est.size(); ++i)
    for (std::size_t j = i + 1; j < est.size(); ++j) {
      const auto& a = est[i].second;
      const auto& b = est[j].second;
      const double lim = tol.concordance_se * std::sqrt(a.se * a.se + b.se * b.se) + 1e-9 * std::abs(a.value);
      r.check("concordance_" + est[i].first + "_" + est[j].first, std::abs(a.value - b.value) <= lim,
              io::fmt(a.value) + " vs " + io::fmt(b.value) + ", limit " + io::fmt(lim));
    }
  if (r.martingale) {
    const auto& m = *r.martingale;
    r.check("martingale_mean_increment", std::abs(m.mean_increment.value) <= tol.se_multiplier * m.mean_increment.se,
            detail::fmt_est(m.mean_increment));
    r.check("martingale_lag1_autocorr", std::abs(m.lag1_autocorr.value) <= tol.se_multiplier * m.lag1_autocorr.se,
            detail::fmt_est(m.lag1_autocorr));
  }
  for (const auto& k : r.ks_table)
    if (k.threshold)
      r.check("ks_n_" + io::fmt(k.n), k.ks <= *k.threshold, io::fmt(k.ks) + " vs " + io::fmt(*k.threshold));
  return r;
}

// ---------------------------------------------------------------------------
// E[b phi^2] against E[b phi]

inline DiagnosticsReport run_remark84(const RunConfig& c) {
  env::require_compliant(c.env, "run_remark84");
  DiagnosticsReport r = detail::new_report(c);
  detail::stage(r, "phi", [&] {
    const std::int64_t w = c.field_half_width;
    std::vector<double> ts;
    const std::size_t nt = static_cast<std::size_t>(std::floor(c.field_span / c.field_step)) + 1;
    for (std::size_t k = 0; k < nt; ++k) ts.push_back(static_cast<double>(k) * c.field_step);
    const auto e = env::build_env(c.env, -w - 2, w + 2, 0.0, ts.back() + 1.0, detail::stage_seed(c.seed, 5));
    corrector::PhiParams p;
    p.eps_schedule = c.eps_schedule;
    p.threads = c.threads;
    const auto phi = corrector::build_phi(e, corrector::auto_method(c.env), ts, -w, w, p);
    std::vector<double> bp2, bp, gap;
    for (std::int64_t x = -w; x <= w; ++x) {
      double a = 0.0, b = 0.0;
      for (std::size_t ti = 0; ti < ts.size(); ++ti) {
        const double rate = phi.env.rate_at(x, ts[ti]), f = phi.at(ti, x);
        a += rate * f * f;
        b += rate * f;
      }
      bp2.push_back(2.0 * a / static_cast<double>(ts.size()));
      bp.push_back(2.0 * b / static_cast<double>(ts.size()));
      gap.push_back(2.0 * (a - b) / static_cast<double>(ts.size()));
    }
    // Neighbouring vertices share phi through the kernel, so batch means are
    // used whenever phi is not a local function of the environment.
    const bool local = phi.method != corrector::PhiMethod::kernel_extrapolated;
    auto est = [&](const std::vector<double>& v) { return local ? stats::mean_se(v) : stats::batch_means(v, 20); };
    const Estimate E2 = est(bp2), E1 = est(bp), G = est(gap);
    r.sigma2_bphi2 = E2;
    r.sections["remark84"] = {{"two_b_phi2", to_json(E2)},
                              {"two_b_phi", to_json(E1)},
                              {"gap", to_json(G)},
                              {"normalized_gap", E2.value != 0.0 ? G.value / E2.value : 0.0},
                              {"normalized_gap_se", E2.value != 0.0 ? G.se / E2.value : 0.0},
                              {"agree_at_measured_precision",
                               std::abs(G.value) <= c.tolerances.concordance_se * G.se + 1e-12},
                              {"phi_method", corrector::to_string(phi.method)},
                              {"vertices", 2 * w + 1},
                              {"times", ts.size()}};
    // With a closed-form phi the gap vanishes identically, so it is gated;
    // otherwise the comparison is only reported.
    if (local)
      r.check("remark84_gap_within_se", std::abs(G.value) <= c.tolerances.concordance_se * G.se + 1e-12,
              detail::fmt_est(G));
  });
  detail::stage(r, "dual", [&] {
    dual::DualEnsembleOptions o;
    o.threads = c.threads;
    o.annealed = true;
    const auto s = dual::ensemble_y(c.env, c.dual_paths, c.dual_horizon, detail::stage_seed(c.seed, 4), {}, o);
    r.sigma2_dual = dual::clock_slope(s).slope;
    if (c.expected_sigma2)
      r.check("sigma2_dual_within_rel", detail::within_rel(r.sigma2_dual->value, *c.expected_sigma2, c.tolerances.sigma2_rel),
              detail::fmt_est(*r.sigma2_dual) + " vs " + io::fmt(*c.expected_sigma2));
  });
  if (c.expected_sigma2 && r.sigma2_bphi2)
    r.check("two_b_phi2_within_rel", detail::within_rel(r.sigma2_bphi2->value, *c.expected_sigma2, c.tolerances.sigma2_rel),
            detail::fmt_est(*r.sigma2_bphi2) + " vs " + io::fmt(*c.expected_sigma2));
  return r;
}

// ---------------------------------------------------------------------------
// Sublinearity in diffusive boxes over replicate environments

inline DiagnosticsReport run_sublinearity(const RunConfig& c) {
  env::require_compliant(c.env, "run_sublinearity");
  DiagnosticsReport r = detail::new_report(c);
  detail::stage(r, "sublinearity", [&] {
    const double n_max = c.n_ladder.back();
    corrector::PhiParams p;
    p.eps_schedule = c.eps_schedule;
    r.sublinearity_replicates.assign(c.replicates, {});
    parallel_for(c.replicates, resolve_threads(c.threads), [&](std::size_t k) {
      const auto f = corrector::diffusive_fields(c.env, n_max, derive_tag(c.seed, Tag::Replicate, k), c.field_steps,
                                                 20, p);
      r.sublinearity_replicates[k] = corrector::sublinearity_report(f.psi, c.n_ladder);
    });
    bool decreasing = true;
    for (std::size_t i = 0; i < c.n_ladder.size(); ++i) {
      corrector::SublinearityRow m;
      m.n = c.n_ladder[i];
      std::vector<double> b, s, t;
      for (const auto& rep : r.sublinearity_replicates) {
        b.push_back(rep[i].box_ratio);
        s.push_back(rep[i].spatial_ratio);
        t.push_back(rep[i].temporal_ratio);
      }
      m.box_ratio = stats::median(b);
      m.spatial_ratio = stats::median(s);
      m.temporal_ratio = stats::median(t);
      if (i > 0 && !(m.box_ratio < r.sublinearity_ratios.back().box_ratio)) decreasing = false;
      r.sublinearity_ratios.push_back(m);
    }
    std::string d;
    for (const auto& m : r.sublinearity_ratios) d += io::fmt(m.box_ratio) + " ";
    r.check("box_ratio_median_decreasing", decreasing, d);
  });
  return r;
}

// ---------------------------------------------------------------------------
// Lower-moment counterexample

struct TailCurve {
  std::vector<double> times;
  std::vector<std::vector<double>> fractions;  // replicate x time
  std::vector<double> medians;
};

// Annealed P(|X_t| >= delta sqrt t) per replicate along the times.
inline TailCurve annealed_tail(const EnvSpec& spec, const std::vector<double>& times, double delta,
                               std::size_t replicates, std::size_t paths, std::uint64_t seed, unsigned threads) {
  TailCurve tc;
  tc.times = times;
  tc.fractions.assign(replicates, std::vector<double>(times.size(), 0.0));
  for (std::size_t k = 0; k < replicates; ++k) {
    walk::EnsembleOptions o;
    o.threads = threads;
    const auto s = walk::ensemble_x(spec, walk::Mode::annealed, paths, times, derive_tag(seed, Tag::Replicate, k), o);
    for (std::size_t j = 0; j < times.size(); ++j) {
      std::size_t hits = 0;
      for (std::size_t i = 0; i < paths; ++i)
        if (std::abs(static_cast<double>(s.at(i, j))) >= delta * std::sqrt(times[j])) ++hits;
      tc.fractions[k][j] = static_cast<double>(hits) / static_cast<double>(paths);
    }
  }
  for (std::size_t j = 0; j < times.size(); ++j) {
    std::vector<double> col;
    for (const auto& f : tc.fractions) col.push_back(f[j]);
    tc.medians.push_back(stats::median(col));
  }
  return tc;
}

// R_beta(t) = (1 / (beta sqrt t)) E[ w(X_{t u}) ], u ~ Exp(beta), with
// w(x) = (2 r + 1 - |x|)^+ and r = floor(sqrt t): the pair count of the box
// |x|, |y| <= r at separation x, by translation invariance.
inline RBetaPoint r_beta(const EnvSpec& spec, double t, double beta, std::size_t samples, std::uint64_t seed,
                         unsigned threads) {
  const double r = std::floor(std::sqrt(t));
  std::vector<double> w(samples);
  parallel_for(samples, resolve_threads(threads), [&](std::size_t i) {
    Rng rng(derive(seed, i, 0));
    const double u = rng.exponential() / beta;
    const double h = t * u;
    const auto e = walk::default_walk_window(spec, 0, h, derive(seed, i, 1));
    const auto p = walk::simulate_x(e, 0, h, derive(seed, i, 2));
    const double x = std::abs(static_cast<double>(p.position_at(h)));
    w[i] = std::max(0.0, 2.0 * r + 1.0 - x) / (beta * std::sqrt(t));
  });
  RBetaPoint pt;
  pt.t = t;
  pt.value = stats::mean_se(w);
  pt.upper_bound = (2.0 * std::sqrt(t) + 1.0) / (std::sqrt(t) * beta);
  return pt;
}

inline double gaussian_tail_two_sided(double sigma2, double delta) {
  return 2.0 * (1.0 - stats::normal_cdf(delta / std::sqrt(sigma2)));
}

inline DiagnosticsReport run_counterexample_lower(const RunConfig& c) {
  DiagnosticsReport r = detail::new_report(c);
  const auto& tol = c.tolerances;
  const std::vector<double> times = detail::ladder_times(c);
  detail::stage(r, "tail", [&] {
    const TailCurve tc = annealed_tail(c.env, times, c.delta, c.replicates, c.n_paths, detail::stage_seed(c.seed, 6),
                                       c.threads);
    bool dec = true;
    for (std::size_t j = 1; j < tc.medians.size(); ++j) dec = dec && tc.medians[j] < tc.medians[j - 1];
    json rows = json::array();
    for (std::size_t j = 0; j < times.size(); ++j) {
      std::vector<double> col;
      for (const auto& f : tc.fractions) col.push_back(f[j]);
      rows.push_back({{"t", times[j]}, {"median", tc.medians[j]}, {"per_replicate", col}});
    }
    r.sections["tail_probability"] = {{"delta", c.delta}, {"rows", rows}};
    std::string d;
    for (double m : tc.medians) d += io::fmt(m) + " ";
    r.check("tail_probability_median_strictly_decreasing", dec, d);
  });
  detail::stage(r, "r_beta", [&] {
    for (std::size_t k = 0; k < c.r_beta_times.size(); ++k)
      r.r_beta_curve.push_back(r_beta(c.env, c.r_beta_times[k], c.beta, c.r_beta_samples,
                                      derive(detail::stage_seed(c.seed, 7), k), c.threads));
    bool below = true;
    for (const auto& p : r.r_beta_curve) below = below && p.value.value <= p.upper_bound + tol.se_multiplier * p.value.se;
    r.check("r_beta_below_upper_bound", below, "R_beta(t) <= (2 sqrt t + 1) / (beta sqrt t) + k SE at every t");
    if (!r.r_beta_curve.empty()) {
      const auto& last = r.r_beta_curve.back();
      r.check("r_beta_near_two_over_beta", detail::within_rel(last.value.value, 2.0 / c.beta, tol.r_beta_rel),
              "t = " + io::fmt(last.t) + ": " + detail::fmt_est(last.value) + " vs " + io::fmt(2.0 / c.beta));
    }
  });
  if (c.control_env) {
    detail::stage(r, "control", [&] {
      env::require_compliant(*c.control_env, "lower counterexample control");
      const TailCurve tc = annealed_tail(*c.control_env, times, c.delta, c.replicates, c.n_paths,
                                         detail::stage_seed(c.seed, 8), c.threads);
      const double s2 = 2.0 / env::mean_inverse_rate(*c.control_env);
      const double level = gaussian_tail_two_sided(s2, c.delta);
      r.sections["control"] = {{"env", env::spec_to_json(*c.control_env)},
                               {"medians", tc.medians},
                               {"times", times},
                               {"gaussian_level", level},
                               {"sigma2", s2}};
      r.check("control_tail_stabilizes", std::abs(tc.medians.back() - level) <= tol.control_level_abs && level > 0.0,
              io::fmt(tc.medians.back()) + " vs Gaussian level " + io::fmt(level));
    });
  }
  return r;
}

// ---------------------------------------------------------------------------
// Upper-moment counterexample

// X_t = Z_{N(A(t))} with A(t) = 2 int_0^t eta_s ds for spatially homogeneous
// rates: N(A) ~ Poisson(A) and Z_N = 2 Bin(N, 1/2) - N.
inline std::int64_t sample_homogeneous_x(double A, Rng& rng) {
  std::poisson_distribution<std::int64_t> pois(A);
  const std::int64_t N = A > 0.0 ? pois(rng) : 0;
  std::binomial_distribution<std::int64_t> bin(N, 0.5);
  return 2 * bin(rng) - N;
}

struct UpperRun {
  std::vector<double> times;
  std::vector<std::vector<double>> quantiles;  // env x n
  std::vector<std::vector<double>> clock;      // env x n, A(t)/t
  std::vector<double> growth;                  // per env, last / first quantile
};

inline UpperRun upper_run(const EnvSpec& spec, const RunConfig& c, std::uint64_t seed) {
  if (!env::is_spatially_homogeneous(spec))
    throw ConfigError("the upper counterexample sampler needs spatially homogeneous rates");
  UpperRun u;
  u.times = detail::ladder_times(c);
  const double T = u.times.back();
  u.quantiles.assign(c.replicates, {});
  u.clock.assign(c.replicates, {});
  u.growth.assign(c.replicates, 0.0);
  parallel_for(c.replicates, resolve_threads(c.threads), [&](std::size_t k) {
    const auto e = env::build_env(spec, 0, 1, 0.0, T, derive_tag(seed, Tag::Replicate, k));
    for (std::size_t j = 0; j < u.times.size(); ++j) {
      const double t = u.times[j], n = c.n_ladder[j];
      const double A = 2.0 * e.integrated_rate(0, 0.0, t);
      Rng rng(derive(seed, k, j));
      std::vector<double> v(c.n_paths);
      for (auto& x : v) x = std::abs(static_cast<double>(sample_homogeneous_x(A, rng))) / std::sqrt(n);
      u.quantiles[k].push_back(stats::quantile(v, c.quantile));
      u.clock[k].push_back(A / t);
    }
    u.growth[k] = u.quantiles[k].back() / u.quantiles[k].front();
  });
  return u;
}

inline DiagnosticsReport run_counterexample_upper(const RunConfig& c) {
  DiagnosticsReport r = detail::new_report(c);
  const auto& tol = c.tolerances;
  auto medians = [](const std::vector<std::vector<double>>& m, std::size_t j) {
    std::vector<double> col;
    for (const auto& row : m) col.push_back(row[j]);
    return stats::median(col);
  };
  detail::stage(r, "quantiles", [&] {
    const UpperRun u = upper_run(c.env, c, detail::stage_seed(c.seed, 9));
    json clock = json::array();
    bool inc = true;
    double prev = -1.0;
    for (std::size_t j = 0; j < u.times.size(); ++j) {
      TightnessRow row;
      row.n = c.n_ladder[j];
      for (const auto& q : u.quantiles) row.per_replicate.push_back(q[j]);
      row.median = medians(u.quantiles, j);
      r.tightness_quantiles.push_back(row);
      const double m = medians(u.clock, j);
      inc = inc && m > prev;
      prev = m;
      clock.push_back({{"t", u.times[j]}, {"median_A_over_t", m}});
    }
    const double g = stats::median(u.growth);
    r.sections["upper"] = {{"growth_per_env", u.growth}, {"median_growth", g}, {"clock", clock},
                           {"quantile_level", c.quantile}};
    r.check("quantile_growth", g >= tol.growth_min, io::fmt(g) + " vs " + io::fmt(tol.growth_min));
    r.check("clock_over_t_increasing", inc, "median A(t)/t along the ladder");
  });
  if (c.control_env) {
    detail::stage(r, "control", [&] {
      const UpperRun u = upper_run(*c.control_env, c, detail::stage_seed(c.seed, 10));
      const double g = stats::median(u.growth);
      std::vector<double> q;
      for (std::size_t j = 0; j < u.times.size(); ++j) q.push_back(medians(u.quantiles, j));
      r.sections["control"] = {{"env", env::spec_to_json(*c.control_env)}, {"median_growth", g},
                               {"median_quantiles", q}};
      r.check("control_growth_small", g < tol.control_growth_max, io::fmt(g) + " vs " + io::fmt(tol.control_growth_max));
    });
  }
  return r;
}

inline DiagnosticsReport run_experiment(const RunConfig& c) {
  if (c.experiment == "invariance") return run_invariance_check(c);
  if (c.experiment == "remark84") return run_remark84(c);
  if (c.experiment == "sublinearity") return run_sublinearity(c);
  if (c.experiment == "counterexample_lower") return run_counterexample_lower(c);
  if (c.experiment == "counterexample_upper") return run_counterexample_upper(c);
  throw ConfigError("unknown experiment '" + c.experiment + "'");
}

// ---------------------------------------------------------------------------
// Long-format tables

struct Table {
  std::string name;
  std::vector<std::string> columns;
  std::vector<std::vector<json>> rows;
};

inline std::vector<Table> report_tables(const DiagnosticsReport& r) {
  std::vector<Table> out;
  if (!r.ks_table.empty()) {
    Table t{"ks_table", {"n", "time", "ks", "p_value", "paths", "threshold"}, {}};
    for (const auto& k : r.ks_table)
      t.rows.push_back({k.n, k.time, k.ks, k.p_value, k.paths, k.threshold ? json(*k.threshold) : json(nullptr)});
    out.push_back(t);
  }
  {
    Table t{"sigma2", {"estimator", "value", "se", "n"}, {}};
    auto add = [&](const char* n, const std::optional<Estimate>& e) {
      if (e) t.rows.push_back({n, e->value, e->se, e->n});
    };
    add("empirical_variance", r.sigma2_empirical);
    add("two_b_phi2", r.sigma2_bphi2);
    add("quadratic_variation", r.sigma2_qv);
    add("dual_clock_slope", r.sigma2_dual);
    add("theta_mean", r.theta_mean);
    if (!t.rows.empty()) out.push_back(t);
  }
  if (!r.sublinearity_replicates.empty()) {
    Table t{"sublinearity", {"replicate", "n", "box_ratio", "spatial_ratio", "temporal_ratio"}, {}};
    for (std::size_t k = 0; k < r.sublinearity_replicates.size(); ++k)
      for (const auto& s : r.sublinearity_replicates[k])
        t.rows.push_back({k, s.n, s.box_ratio, s.spatial_ratio, s.temporal_ratio});
    out.push_back(t);
  }
  if (!r.r_beta_curve.empty()) {
    Table t{"r_beta", {"t", "value", "se", "upper_bound"}, {}};
    for (const auto& p : r.r_beta_curve) t.rows.push_back({p.t, p.value.value, p.value.se, p.upper_bound});
    out.push_back(t);
  }
  if (!r.tightness_quantiles.empty()) {
    Table t{"tightness_quantiles", {"n", "replicate", "quantile"}, {}};
    for (const auto& q : r.tightness_quantiles)
      for (std::size_t k = 0; k < q.per_replicate.size(); ++k) t.rows.push_back({q.n, k, q.per_replicate[k]});
    out.push_back(t);
  }
  return out;
}

inline std::string cell(const json& v) {
  if (v.is_null()) return "";
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_float()) return io::fmt(v.get<double>());
  return v.dump();
}

inline std::string to_csv(const Table& t) {
  std::string s;
  for (std::size_t i = 0; i < t.columns.size(); ++i) s += (i ? "," : "") + t.columns[i];
  s += '\n';
  for (const auto& row : t.rows) {
    for (std::size_t i = 0; i < row.size(); ++i) s += (i ? "," : "") + cell(row[i]);
    s += '\n';
  }
  return s;
}

inline json to_json(const Table& t) {
  json rows = json::array();
  for (const auto& row : t.rows) {
    json o;
    for (std::size_t i = 0; i < row.size(); ++i) o[t.columns[i]] = row[i];
    rows.push_back(o);
  }
  return rows;
}

}  // namespace condsim::harness
