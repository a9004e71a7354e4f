#pragma once
// Command-line front end. Subcommands read a RunConfig and write tables and
// JSON summaries under the output directory.
//
// Exit codes: 0 ok, 1 configuration or usage error, 2 numerical failure,
// 3 a --check found a failed diagnostic.

#include <CLI11.hpp>

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "condsim/corrector.hpp"
#include "condsim/dual.hpp"
#include "condsim/env.hpp"
#include "condsim/errors.hpp"
#include "condsim/harness.hpp"
#include "condsim/io.hpp"
#include "condsim/kernel.hpp"
#include "condsim/walk.hpp"

namespace condsim::cli {

using harness::RunConfig;
using nlohmann::json;
namespace fs = std::filesystem;

enum Exit : int { kOk = 0, kConfig = 1, kNumerical = 2, kCheckFailed = 3 };

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<unsigned> threads;
  std::optional<std::string> format;
  bool check = false;
  std::string which;  // counterexample variant
};

namespace detail {

struct Context {
  RunConfig cfg;
  fs::path out;
  bool json_tables = false;
  std::ostream& log;

  void write(const std::string& name, const std::string& text) const {
    io::write_file(out / name, text);
    log << "wrote " << (out / name).string() << '\n';
  }
  void write_json(const std::string& name, const json& j) const { write(name, j.dump(2) + "\n"); }
  // A long-format table as CSV or as a JSON array of row objects.
  void write_table(const std::string& stem, const harness::Table& t) const {
    if (json_tables)
      write_json(stem + ".json", harness::to_json(t));
    else
      write(stem + ".csv", harness::to_csv(t));
  }
};

inline json header(const RunConfig& c, const char* command) {
  return {{"schema_version", 1},
          {"command", command},
          {"config_hash", harness::config_hash(c)},
          {"seed", c.seed},
          {"env_spec", env::spec_to_json(c.env)}};
}

// Converts an already rendered "a,b,c\n..." CSV into a table so that JSON
// output shares the exporters' column order and number formatting.
inline harness::Table table_from_csv(std::string name, const std::string& csv) {
  harness::Table t{std::move(name), {}, {}};
  std::size_t pos = 0;
  bool first = true;
  while (pos < csv.size()) {
    const std::size_t end = csv.find('\n', pos);
    const std::string line = csv.substr(pos, end - pos);
    pos = end == std::string::npos ? csv.size() : end + 1;
    std::vector<std::string> cells;
    std::size_t a = 0;
    while (true) {
      const std::size_t b = line.find(',', a);
      cells.push_back(line.substr(a, b - a));
      if (b == std::string::npos) break;
      a = b + 1;
    }
    if (first) {
      t.columns = cells;
      first = false;
      continue;
    }
    std::vector<json> row;
    for (const auto& c : cells) {
      char* e = nullptr;
      const double v = std::strtod(c.c_str(), &e);
      row.push_back(e && *e == '\0' && !c.empty() ? json(v) : json(c));
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

inline int cmd_env(const Context& ctx) {
  const auto& c = ctx.cfg;
  const auto& w = c.window;
  const auto e = env::build_env(c.env, w.x_min, w.x_max, w.t_min, w.t_max, derive_tag(c.seed, Tag::WalkEnv, 0));
  ctx.write("env_window.txt", env::dump_window(e));
  harness::Table t{"env", {"edge", "t_start", "t_end", "rate"}, {}};
  for (std::int64_t x = e.x_min(); x < e.x_max(); ++x) {
    const env::TrackRef r = e.track(x);
    for (std::size_t i = 0; i < r.pieces; ++i) {
      const double a = std::max(e.from_base(r.breaks[i]), w.t_min);
      const double b = std::min(e.from_base(r.breaks[i + 1]), w.t_max);
      if (b > a) t.rows.push_back({x, a, b, r.values[i]});
    }
  }
  ctx.write_table("env", t);
  json s = header(c, "env");
  s["window"] = {{"x_min", w.x_min}, {"x_max", w.x_max}, {"t_min", w.t_min}, {"t_max", w.t_max}};
  s["pieces"] = t.rows.size();
  ctx.write_json("env_summary.json", s);
  return kOk;
}

inline int cmd_simulate(const Context& ctx, bool check) {
  const auto& c = ctx.cfg;
  std::vector<double> ts = c.sample_times.empty() ? std::vector<double>{c.horizon} : c.sample_times;
  walk::EnsembleOptions o;
  o.threads = c.threads;
  const auto mode = c.mode == "annealed" ? walk::Mode::annealed : walk::Mode::quenched;
  const auto s = walk::ensemble_x(c.env, mode, c.n_paths, ts, c.seed, o);
  ctx.write_table("paths", table_from_csv("paths", walk::to_csv(s)));
  {
    std::ostringstream os;
    walk::write_trace(os, s);
    ctx.write("paths.trace", os.str());
  }
  json sum = header(c, "simulate");
  sum["mode"] = c.mode;
  sum["n_paths"] = c.n_paths;
  sum["truncated_paths"] = s.truncated_paths;
  json per = json::array();
  for (std::size_t j = 0; j < s.sample_times.size(); ++j) {
    const auto v = stats::variance_se(s.column(j));
    per.push_back({{"time", s.sample_times[j]}, {"variance_over_t", v.value / s.sample_times[j]},
                   {"se", v.se / s.sample_times[j]}});
  }
  sum["variance"] = per;
  ctx.write_json("simulate_summary.json", sum);
  if (check && s.truncated_paths != 0) {
    ctx.log << "check failed: " << s.truncated_paths << " truncated paths\n";
    return kCheckFailed;
  }
  return kOk;
}

inline int cmd_dual(const Context& ctx, bool check) {
  const auto& c = ctx.cfg;
  dual::DualEnsembleOptions o;
  o.threads = c.threads;
  o.annealed = c.mode == "annealed";
  const auto s = dual::ensemble_y(c.env, c.dual_paths, c.dual_horizon, c.seed, c.sample_times, o);
  ctx.write_table("clock", table_from_csv("clock", dual::clock_csv(s)));
  ctx.write_table("dual_positions", table_from_csv("dual_positions", dual::final_positions_csv(s)));
  const auto cs = dual::clock_slope(s);
  json sum = header(c, "dual");
  sum["mode"] = c.mode;
  sum["n_paths"] = c.dual_paths;
  sum["horizon"] = c.dual_horizon;
  sum["clock_slope"] = {{"value", cs.slope.value}, {"se", cs.slope.se}, {"spread", cs.spread},
                        {"ci_low", cs.ci_low}, {"ci_high", cs.ci_high}};
  ctx.write_json("dual_summary.json", sum);
  if (check && !(std::isfinite(cs.slope.value) && cs.slope.value > 0.0)) {
    ctx.log << "check failed: clock slope " << cs.slope.value << '\n';
    return kCheckFailed;
  }
  return kOk;
}

inline int cmd_kernel(const Context& ctx, bool check) {
  const auto& c = ctx.cfg;
  const auto& k = c.kernel;
  const std::int64_t r = k.radius;
  const auto e = env::build_env(c.env, k.x - r - 1, k.x + r + 1, std::min(k.t, k.s), std::max(k.t, k.s) + 1e-9,
                                derive_tag(c.seed, Tag::KernelEnv, 0));
  kernel::WindowSpec w;
  w.radius = r;
  w.tol = k.tol;
  const auto g = kernel::solve_kernel(e, kernel::Anchoring::source, k.s, k.x, k.t, w, k.n_jumps);
  ctx.write_table("kernel", table_from_csv("kernel", kernel::to_csv(g)));
  json sum = kernel::summary_json(g);
  sum["config_hash"] = harness::config_hash(c);
  sum["seed"] = c.seed;
  ctx.write_json("kernel_summary.json", sum);
  if (check) {
    const double rs = g.row_sum(g.times.size() - 1);
    if (!(rs <= 1.0 + 1e-10 && rs >= 0.0)) {
      ctx.log << "check failed: final row sum " << io::fmt(rs) << '\n';
      return kCheckFailed;
    }
  }
  return kOk;
}

inline int cmd_corrector(const Context& ctx, bool check) {
  const auto& c = ctx.cfg;
  const auto& w = c.window;
  if (w.t_min != 0.0) throw ConfigError("corrector: window.t_min must be 0 (psi is anchored at time 0)");
  if (w.x_min > 0 || w.x_max < 0) throw ConfigError("corrector: the window must contain vertex 0");
  const std::int64_t pad = 20;
  env::require_compliant(c.env, "corrector");
  const auto e = env::build_env(c.env, w.x_min - pad - 1, w.x_max + pad + 2, 0.0, w.t_max,
                                derive_tag(c.seed, Tag::CorrectorEnv, 0));
  corrector::PhiParams p;
  p.eps_schedule = c.eps_schedule;
  p.threads = c.threads;
  const auto phi = corrector::build_phi(e, corrector::auto_method(c.env), {w.t_max}, w.x_min - pad, w.x_max + pad, p);
  std::vector<double> ts;
  for (std::size_t k = 0; k <= c.field_steps; ++k)
    ts.push_back(w.t_max * static_cast<double>(k) / static_cast<double>(c.field_steps));
  ts.back() = w.t_max;
  const auto psi = corrector::build_psi(phi.env, phi, ts, w.x_min, w.x_max);
  // phi.json and psi.json hold the metadata, so JSON tables take a suffix.
  const std::string suffix = ctx.json_tables ? "_table" : "";
  ctx.write_table("phi" + suffix, table_from_csv("phi", corrector::to_csv(phi)));
  ctx.write_json("phi.json", corrector::metadata_json(phi));
  ctx.write_table("psi" + suffix, table_from_csv("psi", corrector::to_csv(psi)));
  ctx.write_json("psi.json", corrector::metadata_json(psi));
  const auto g = corrector::gradient_check(psi);
  const auto pde = corrector::pde_residual(psi, c.kernel.probes, derive_tag(c.seed, Tag::CorrectorProbe, 0));
  json sum = header(c, "corrector");
  sum["min_gradient"] = g.min_gradient;
  sum["gradient_identity_error"] = g.max_identity_error;
  sum["pde_residual_max"] = pde.max_abs;
  sum["pde_probes"] = pde.probes;
  std::vector<double> n_list;
  for (double n : c.n_ladder)
    if (n <= w.t_max && std::floor(std::sqrt(n)) <= static_cast<double>(std::min(-w.x_min, w.x_max))) n_list.push_back(n);
  if (!n_list.empty()) {
    json rows = json::array();
    for (const auto& s : corrector::sublinearity_report(psi, n_list))
      rows.push_back({{"n", s.n}, {"box", s.box_ratio}, {"spatial", s.spatial_ratio}, {"temporal", s.temporal_ratio}});
    sum["sublinearity"] = rows;
  }
  ctx.write_json("corrector_summary.json", sum);
  if (check && !(g.positive() && pde.max_abs < 1e-6)) {
    ctx.log << "check failed: min gradient " << io::fmt(g.min_gradient) << ", PDE residual " << io::fmt(pde.max_abs)
            << '\n';
    return kCheckFailed;
  }
  return kOk;
}

inline int cmd_report(const Context& ctx, bool check) {
  const auto r = harness::run_experiment(ctx.cfg);
  ctx.write_json("report.json", harness::to_json(r));
  for (const auto& t : harness::report_tables(r)) ctx.write_table(t.name, t);
  for (const auto& ch : r.checks)
    ctx.log << (ch.passed ? "PASS " : "FAIL ") << ch.name << ": " << ch.detail << '\n';
  for (const auto& [stage, msg] : r.errors) ctx.log << "ERROR in stage " << stage << ": " << msg << '\n';
  if (check && !r.all_passed()) return kCheckFailed;
  return kOk;
}

}  // namespace detail

// Runs body and maps library errors to exit codes, reporting them on err.
template <class F>
int guarded(std::ostream& err, F&& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << '\n';
    return kConfig;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return kNumerical;
  } catch (const WindowExhausted& e) {
    err << "numerical failure: " << e.what() << '\n';
    return kNumerical;
  } catch (const RangeError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return kNumerical;
  }
}

// Runs the tool with the given arguments (argv[0] is the program name).
inline int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"condsim: random walks in dynamic random environments"};
  app.name("condsim");
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* s) {
    s->add_option("--config", o.config, "RunConfig JSON file")->required()->check(CLI::ExistingFile);
    s->add_option("--seed", o.seed, "Master seed (overrides the config)");
    s->add_option("--out", o.out, "Output directory (overrides the config)");
    s->add_option("--threads", o.threads, "Worker threads; CONDSIM_THREADS takes precedence");
    s->add_option("--format", o.format, "Table format")->check(CLI::IsMember({"csv", "json"}));
    s->add_flag("--check", o.check, "Exit with code 3 when a diagnostic check fails");
  };
  std::vector<std::pair<CLI::App*, std::string>> subs;
  auto sub = [&](const char* name, const char* help) {
    CLI::App* s = app.add_subcommand(name, help);
    common(s);
    subs.emplace_back(s, name);
    return s;
  };
  sub("env", "Generate an environment window and export its tracks");
  sub("simulate", "Simulate the walk ensemble and write positions");
  sub("dual", "Simulate the dual walk and write its clock");
  sub("kernel", "Solve the transition kernel on a window");
  sub("corrector", "Build the invariant density and parabolic coordinates");
  sub("diagnose", "Run the experiment named in the config and write a report");
  CLI::App* ce = sub("counterexample", "Run a moment counterexample suite");
  ce->add_option("variant", o.which, "lower or upper")->required()->check(CLI::IsMember({"lower", "upper"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const CLI::App* active = nullptr;
    for (const auto& [s, name] : subs)
      if (s->parsed()) active = s;
    err << (active ? active->help() : app.help());
    return kConfig;
  }

  std::string command;
  for (const auto& [s, name] : subs)
    if (s->parsed()) command = name;

  return guarded(err, [&] {
    RunConfig cfg = harness::load_config(o.config);
    if (o.seed) cfg.seed = *o.seed;
    if (o.threads) cfg.threads = *o.threads;
    if (o.out) cfg.out_dir = *o.out;
    if (o.format) cfg.format = *o.format;
    if (command == "counterexample") cfg.experiment = "counterexample_" + o.which;
    harness::validate(cfg);
    detail::Context ctx{cfg, fs::path(cfg.out_dir), cfg.format == "json", out};
    if (command == "env") return detail::cmd_env(ctx);
    if (command == "simulate") return detail::cmd_simulate(ctx, o.check);
    if (command == "dual") return detail::cmd_dual(ctx, o.check);
    if (command == "kernel") return detail::cmd_kernel(ctx, o.check);
    if (command == "corrector") return detail::cmd_corrector(ctx, o.check);
    return detail::cmd_report(ctx, o.check);
  });
}

}  // namespace condsim::cli
