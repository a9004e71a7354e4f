#pragma once

// Dynamical conductance fields on Z: specifications, realized windows,
// piecewise-constant rate tracks and space-time shift views.
//
// Coordinates. An edge {x, x+1} is named by its left vertex x; b_t(x) is its
// conductance at time t. A window holds vertices [x_min, x_max] and therefore
// edges [x_min, x_max - 1] on the time span [t_min, t_max].

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include "json.hpp"

#include "condsim/errors.hpp"
#include "condsim/random.hpp"

namespace condsim::env {

using json = nlohmann::json;
inline constexpr int kSchemaVersion = 1;
inline constexpr double kInf = std::numeric_limits<double>::infinity();

// ---------------------------------------------------------------------------
// Marginal laws

struct DiscreteLaw {
  std::vector<double> values;
  std::vector<double> weights;
  bool operator==(const DiscreteLaw&) const = default;
};

// a = U^exponent + shift with U uniform on (0,1).
struct UniformPowerLaw {
  double exponent = 1.0;
  double shift = 0.0;
  bool operator==(const UniformPowerLaw&) const = default;
};

// P(a > s) = (scale/s)^alpha for s >= scale.
struct ParetoLaw {
  double alpha = 1.0;
  double scale = 1.0;
  bool operator==(const ParetoLaw&) const = default;
};

using MarginalLaw = std::variant<DiscreteLaw, UniformPowerLaw, ParetoLaw>;

inline void validate_law(const MarginalLaw& law, bool allow_zero = false) {
  std::visit(
      [&](const auto& l) {
        using L = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<L, DiscreteLaw>) {
          if (l.values.empty() || l.values.size() != l.weights.size())
            throw ConfigError("discrete law needs matching, non-empty values and weights");
          double total = 0.0;
          for (std::size_t i = 0; i < l.values.size(); ++i) {
            if (!std::isfinite(l.values[i]) || l.values[i] < 0.0 || (!allow_zero && l.values[i] == 0.0))
              throw ConfigError("discrete law values must be positive and finite");
            if (!(l.weights[i] >= 0.0)) throw ConfigError("discrete law weights must be non-negative");
            total += l.weights[i];
          }
          if (std::abs(total - 1.0) > 1e-9) throw ConfigError("discrete law weights must sum to 1");
        } else if constexpr (std::is_same_v<L, UniformPowerLaw>) {
          if (!(l.exponent > 0.0) || !std::isfinite(l.exponent))
            throw ConfigError("uniform-power law needs a positive exponent");
          if (!(l.shift >= 0.0) || !std::isfinite(l.shift))
            throw ConfigError("uniform-power law shift must be non-negative");
        } else {
          if (!(l.alpha > 0.0) || !(l.scale > 0.0) || !std::isfinite(l.alpha) || !std::isfinite(l.scale))
            throw ConfigError("Pareto law needs positive alpha and scale");
        }
      },
      law);
}

inline double law_mean(const MarginalLaw& law) {
  return std::visit(
      [](const auto& l) -> double {
        using L = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<L, DiscreteLaw>) {
          double m = 0.0;
          for (std::size_t i = 0; i < l.values.size(); ++i) m += l.weights[i] * l.values[i];
          return m;
        } else if constexpr (std::is_same_v<L, UniformPowerLaw>) {
          return 1.0 / (l.exponent + 1.0) + l.shift;
        } else {
          return l.alpha > 1.0 ? l.alpha * l.scale / (l.alpha - 1.0) : kInf;
        }
      },
      law);
}

inline double law_mean_inverse(const MarginalLaw& law) {
  return std::visit(
      [](const auto& l) -> double {
        using L = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<L, DiscreteLaw>) {
          double m = 0.0;
          for (std::size_t i = 0; i < l.values.size(); ++i)
            if (l.weights[i] > 0.0) m += l.weights[i] / l.values[i];
          return m;
        } else if constexpr (std::is_same_v<L, UniformPowerLaw>) {
          if (l.shift == 0.0) return l.exponent < 1.0 ? 1.0 / (1.0 - l.exponent) : kInf;
          const double k = l.exponent, s = l.shift;
          return boost::math::quadrature::gauss_kronrod<double, 31>::integrate(
              [k, s](double u) { return 1.0 / (std::pow(u, k) + s); }, 0.0, 1.0, 15, 1e-14);
        } else {
          return l.alpha / ((l.alpha + 1.0) * l.scale);
        }
      },
      law);
}

inline double law_sup(const MarginalLaw& law) {
  return std::visit(
      [](const auto& l) -> double {
        using L = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<L, DiscreteLaw>) {
          double m = 0.0;
          for (std::size_t i = 0; i < l.values.size(); ++i)
            if (l.weights[i] > 0.0) m = std::max(m, l.values[i]);
          return m;
        } else if constexpr (std::is_same_v<L, UniformPowerLaw>) {
          return 1.0 + l.shift;
        } else {
          return kInf;
        }
      },
      law);
}

inline double sample_law(const MarginalLaw& law, Rng& rng) {
  return std::visit(
      [&rng](const auto& l) -> double {
        using L = std::decay_t<decltype(l)>;
        const double u = rng.uniform();
        if constexpr (std::is_same_v<L, DiscreteLaw>) {
          double acc = 0.0;
          for (std::size_t i = 0; i < l.values.size(); ++i) {
            acc += l.weights[i];
            if (u < acc) return l.values[i];
          }
          for (std::size_t i = l.values.size(); i-- > 0;)
            if (l.weights[i] > 0.0) return l.values[i];
          return l.values.back();
        } else if constexpr (std::is_same_v<L, UniformPowerLaw>) {
          return std::pow(u, l.exponent) + l.shift;
        } else {
          return l.scale * std::pow(u, -1.0 / l.alpha);
        }
      },
      law);
}

// ---------------------------------------------------------------------------
// Environment specifications

struct Constant {
  double c = 1.0;
  bool operator==(const Constant&) const = default;
};
struct StaticIID {
  MarginalLaw law;
  bool operator==(const StaticIID&) const = default;
};
// Two-state switching per edge, independent across edges. rate_on is the exit
// rate of the high (ON) state and rate_off the exit rate of the low (OFF)
// state, so the stationary probability of the high value is
// rate_off / (rate_on + rate_off).
struct OnOffSwitching {
  double rate_on = 1.0;
  double rate_off = 1.0;
  double low = 0.1;
  double high = 1.0;
  bool operator==(const OnOffSwitching&) const = default;
};
// One level process eta_t shared by all edges: it jumps at switch_rate to an
// independent draw from the level law.
struct HomogeneousInSpace {
  MarginalLaw law;
  double switch_rate = 1.0;
  bool operator==(const HomogeneousInSpace&) const = default;
};
// Static a = U^exponent; the inverse moment is infinite once exponent >= 1.
struct StaticHeavyInverse {
  double exponent = 2.0;
  bool operator==(const StaticHeavyInverse&) const = default;
};
// Homogeneous levels drawn from Pareto(pareto_alpha) with unit scale.
struct HomogeneousHeavyUpper {
  double pareto_alpha = 0.75;
  double switch_rate = 1.0;
  bool operator==(const HomogeneousHeavyUpper&) const = default;
};

using Kind = std::variant<Constant, StaticIID, OnOffSwitching, HomogeneousInSpace, StaticHeavyInverse,
                          HomogeneousHeavyUpper>;

// Which moment condition fails: finite E[1/b] (lower), finite E[b] (upper),
// or strict positivity of the rates.
enum class MomentFailure { none, lower_moment, upper_moment, positivity };

inline const char* to_string(MomentFailure f) {
  switch (f) {
    case MomentFailure::none: return "none";
    case MomentFailure::lower_moment: return "lower_moment";
    case MomentFailure::upper_moment: return "upper_moment";
    case MomentFailure::positivity: return "positivity";
  }
  return "none";
}

struct Compliance {
  bool compliant = true;
  MomentFailure failure = MomentFailure::none;
};

struct EnvSpec {
  Kind kind = Constant{};
  std::optional<bool> assumption1_compliant;  // as declared by the caller
  bool out_of_theory = false;                 // admits OnOff with a zero low value
  bool operator==(const EnvSpec&) const = default;
};

inline MarginalLaw marginal_of(const EnvSpec& spec) {
  return std::visit(
      [](const auto& k) -> MarginalLaw {
        using K = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<K, Constant>) return DiscreteLaw{{k.c}, {1.0}};
        else if constexpr (std::is_same_v<K, StaticIID>) return k.law;
        else if constexpr (std::is_same_v<K, OnOffSwitching>) {
          const double ph = k.rate_off / (k.rate_on + k.rate_off);
          return DiscreteLaw{{k.low, k.high}, {1.0 - ph, ph}};
        } else if constexpr (std::is_same_v<K, HomogeneousInSpace>) return k.law;
        else if constexpr (std::is_same_v<K, StaticHeavyInverse>) return UniformPowerLaw{k.exponent, 0.0};
        else return ParetoLaw{k.pareto_alpha, 1.0};
      },
      spec.kind);
}

// Mean, inverse mean and supremum of the one-edge marginal of b_t(x).
inline double mean_rate(const EnvSpec& s) { return law_mean(marginal_of(s)); }
inline double mean_inverse_rate(const EnvSpec& s) { return law_mean_inverse(marginal_of(s)); }
inline double sup_rate(const EnvSpec& s) { return law_sup(marginal_of(s)); }

inline bool is_static(const EnvSpec& s) {
  return std::holds_alternative<Constant>(s.kind) || std::holds_alternative<StaticIID>(s.kind) ||
         std::holds_alternative<StaticHeavyInverse>(s.kind);
}

inline bool is_spatially_homogeneous(const EnvSpec& s) {
  return std::holds_alternative<Constant>(s.kind) || std::holds_alternative<HomogeneousInSpace>(s.kind) ||
         std::holds_alternative<HomogeneousHeavyUpper>(s.kind);
}

inline Compliance classify(const EnvSpec& spec) {
  if (const auto* o = std::get_if<OnOffSwitching>(&spec.kind); o && o->low == 0.0)
    return {false, MomentFailure::positivity};
  const MarginalLaw law = marginal_of(spec);
  if (!std::isfinite(law_mean_inverse(law))) return {false, MomentFailure::lower_moment};
  if (!std::isfinite(law_mean(law))) return {false, MomentFailure::upper_moment};
  return {true, MomentFailure::none};
}

inline void validate(const EnvSpec& spec) {
  auto positive = [](double v, const char* what) {
    if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(std::string(what) + " must be positive and finite");
  };
  std::visit(
      [&](const auto& k) {
        using K = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<K, Constant>) positive(k.c, "constant rate c");
        else if constexpr (std::is_same_v<K, StaticIID>) validate_law(k.law);
        else if constexpr (std::is_same_v<K, OnOffSwitching>) {
          positive(k.rate_on, "rate_on");
          positive(k.rate_off, "rate_off");
          positive(k.high, "high value");
          if (!(k.low >= 0.0) || !std::isfinite(k.low)) throw ConfigError("low value must be non-negative");
          if (k.low == 0.0 && !spec.out_of_theory)
            throw ConfigError("OnOff with a zero low value requires out_of_theory = true");
        } else if constexpr (std::is_same_v<K, HomogeneousInSpace>) {
          validate_law(k.law);
          positive(k.switch_rate, "switch_rate");
        } else if constexpr (std::is_same_v<K, StaticHeavyInverse>) {
          positive(k.exponent, "exponent");
        } else {
          positive(k.pareto_alpha, "pareto_alpha");
          positive(k.switch_rate, "switch_rate");
        }
      },
      spec.kind);
  const Compliance c = classify(spec);
  if (spec.assumption1_compliant.value_or(false) && !c.compliant)
    throw ConfigError(std::string("spec declared assumption1_compliant but its ") + to_string(c.failure) +
                      " condition fails");
}

// Theory-checking code paths call this before doing anything else.
inline void require_compliant(const EnvSpec& spec, const char* who) {
  const Compliance c = classify(spec);
  if (!c.compliant)
    throw ConfigError(std::string(who) + " requires a compliant environment (" + to_string(c.failure) +
                      " condition fails)");
}

// ---------------------------------------------------------------------------
// JSON schema (schema_version 1)

inline json law_to_json(const MarginalLaw& law) {
  return std::visit(
      [](const auto& l) -> json {
        using L = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<L, DiscreteLaw>)
          return json{{"type", "discrete"}, {"values", l.values}, {"weights", l.weights}};
        else if constexpr (std::is_same_v<L, UniformPowerLaw>)
          return json{{"type", "uniform_power"}, {"exponent", l.exponent}, {"shift", l.shift}};
        else
          return json{{"type", "pareto"}, {"alpha", l.alpha}, {"scale", l.scale}};
      },
      law);
}

inline MarginalLaw law_from_json(const json& j) {
  const std::string type = j.at("type").get<std::string>();
  if (type == "discrete")
    return DiscreteLaw{j.at("values").get<std::vector<double>>(), j.at("weights").get<std::vector<double>>()};
  if (type == "uniform_power") return UniformPowerLaw{j.at("exponent").get<double>(), j.value("shift", 0.0)};
  if (type == "pareto") return ParetoLaw{j.at("alpha").get<double>(), j.value("scale", 1.0)};
  throw ConfigError("unknown law type '" + type + "'");
}

inline json spec_to_json(const EnvSpec& spec) {
  json j = std::visit(
      [](const auto& k) -> json {
        using K = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<K, Constant>) return json{{"kind", "constant"}, {"c", k.c}};
        else if constexpr (std::is_same_v<K, StaticIID>)
          return json{{"kind", "static_iid"}, {"law", law_to_json(k.law)}};
        else if constexpr (std::is_same_v<K, OnOffSwitching>)
          return json{{"kind", "onoff"}, {"rate_on", k.rate_on}, {"rate_off", k.rate_off}, {"low", k.low},
                      {"high", k.high}};
        else if constexpr (std::is_same_v<K, HomogeneousInSpace>)
          return json{{"kind", "homogeneous"}, {"law", law_to_json(k.law)}, {"switch_rate", k.switch_rate}};
        else if constexpr (std::is_same_v<K, StaticHeavyInverse>)
          return json{{"kind", "static_heavy_inverse"}, {"exponent", k.exponent}};
        else
          return json{{"kind", "homogeneous_heavy_upper"}, {"pareto_alpha", k.pareto_alpha},
                      {"switch_rate", k.switch_rate}};
      },
      spec.kind);
  j["schema_version"] = kSchemaVersion;
  if (spec.assumption1_compliant) j["assumption1_compliant"] = *spec.assumption1_compliant;
  j["out_of_theory"] = spec.out_of_theory;
  return j;
}

inline EnvSpec spec_from_json(const json& j) {
  try {
    const int version = j.value("schema_version", kSchemaVersion);
    if (version != kSchemaVersion)
      throw ConfigError("unsupported environment schema_version " + std::to_string(version));
    EnvSpec s;
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "constant") s.kind = Constant{j.at("c").get<double>()};
    else if (kind == "static_iid") s.kind = StaticIID{law_from_json(j.at("law"))};
    else if (kind == "onoff")
      s.kind = OnOffSwitching{j.at("rate_on").get<double>(), j.at("rate_off").get<double>(), j.at("low").get<double>(),
                              j.at("high").get<double>()};
    else if (kind == "homogeneous")
      s.kind = HomogeneousInSpace{law_from_json(j.at("law")), j.value("switch_rate", 1.0)};
    else if (kind == "static_heavy_inverse") s.kind = StaticHeavyInverse{j.at("exponent").get<double>()};
    else if (kind == "homogeneous_heavy_upper")
      s.kind = HomogeneousHeavyUpper{j.at("pareto_alpha").get<double>(), j.value("switch_rate", 1.0)};
    else
      throw ConfigError("unknown environment kind '" + kind + "'");
    if (j.contains("assumption1_compliant")) s.assumption1_compliant = j.at("assumption1_compliant").get<bool>();
    s.out_of_theory = j.value("out_of_theory", false);
    validate(s);
    return s;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed environment spec: ") + e.what());
  }
}

// FNV-1a over the canonical JSON text (object keys are sorted by the library).
inline std::uint64_t spec_hash(const EnvSpec& spec) {
  const std::string text = spec_to_json(spec).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Realized windows

// Tracks in base coordinates (the coordinates in which the window was built).
// Track k owns breaks[offset[k] .. offset[k+1]) and the values that sit
// between consecutive breaks, values[offset[k] - k ...]. A shared store holds a
// single track used by every edge.
struct TrackStore {
  std::int64_t x_min = 0, x_max = 1;
  double t_min = 0.0, t_max = 1.0;
  bool shared = false;
  std::vector<std::size_t> offset;
  std::vector<double> breaks;
  std::vector<double> values;

  std::size_t track_of(std::int64_t edge) const { return shared ? 0 : static_cast<std::size_t>(edge - x_min); }
};

struct TrackRef {
  const double* breaks = nullptr;  // pieces + 1 entries
  const double* values = nullptr;  // pieces entries
  std::size_t pieces = 0;

  // Index of the piece containing base time tb, with the last piece closed at t_max.
  std::size_t piece_at(double tb) const {
    if (pieces == 1) return 0;
    const double* it = std::upper_bound(breaks, breaks + pieces + 1, tb);
    std::size_t i = static_cast<std::size_t>(it - breaks);
    i = i == 0 ? 0 : i - 1;
    return std::min(i, pieces - 1);
  }
};

namespace detail {

// Two-sided stationary path of a Markov jump process whose holding rate
// depends on the current state, anchored at time 0: the state at 0 is drawn
// from the stationary law, then holding times are drawn forward and backward
// from independent substreams. Because generation always starts at the anchor,
// any window sees the same realization on its overlap with any other window.
template <class AnchorFn, class RateFn, class NextFn>
void two_sided_track(double t_min, double t_max, std::uint64_t anchor_seed, std::uint64_t fwd_seed,
                     std::uint64_t bwd_seed, AnchorFn anchor, RateFn rate, NextFn next, std::vector<double>& breaks,
                     std::vector<double>& values) {
  Rng ra(anchor_seed), rf(fwd_seed), rb(bwd_seed);
  const double s0 = anchor(ra);
  // Backward: switch times b_1 > b_2 > ... above t_min, each with the state
  // holding just before it. Both chains used here are reversible, so the
  // time reversal has the same holding rates and jump law.
  std::vector<std::pair<double, double>> back;
  for (double t = 0.0, s = s0;;) {
    const double tn = t - rb.exponential() / rate(s);
    if (!(tn > t_min)) break;
    s = next(s, rb);
    back.emplace_back(tn, s);
    t = tn;
  }
  // Ascending (switch time, state from that time on).
  std::vector<std::pair<double, double>> seq;
  const double first_state = back.empty() ? s0 : back.back().second;
  for (std::size_t i = back.size(); i-- > 0;) seq.emplace_back(back[i].first, i == 0 ? s0 : back[i - 1].second);
  for (double t = 0.0, s = s0;;) {
    const double tn = t + rf.exponential() / rate(s);
    if (!(tn < t_max)) break;
    s = next(s, rf);
    seq.emplace_back(tn, s);
    t = tn;
  }
  double state = first_state;
  std::size_t i = 0;
  while (i < seq.size() && seq[i].first <= t_min) state = seq[i++].second;
  breaks.push_back(t_min);
  values.push_back(state);
  for (; i < seq.size() && seq[i].first < t_max; ++i) {
    if (seq[i].second == values.back()) continue;
    if (seq[i].first <= breaks.back()) {
      values.back() = seq[i].second;
      continue;
    }
    breaks.push_back(seq[i].first);
    values.push_back(seq[i].second);
  }
  breaks.push_back(t_max);
}

inline std::uint64_t edge_key(std::int64_t edge) { return static_cast<std::uint64_t>(edge); }

inline std::shared_ptr<TrackStore> generate(const EnvSpec& spec, std::int64_t x_min, std::int64_t x_max, double t_min,
                                            double t_max, std::uint64_t seed) {
  auto st = std::make_shared<TrackStore>();
  st->x_min = x_min;
  st->x_max = x_max;
  st->t_min = t_min;
  st->t_max = t_max;
  st->shared = is_spatially_homogeneous(spec);
  const std::size_t n_tracks = st->shared ? 1 : static_cast<std::size_t>(x_max - x_min);
  st->offset.reserve(n_tracks + 1);
  st->offset.push_back(0);
  auto close_track = [&]() { st->offset.push_back(st->breaks.size()); };

  std::visit(
      [&](const auto& k) {
        using K = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<K, Constant>) {
          st->breaks = {t_min, t_max};
          st->values = {k.c};
          close_track();
        } else if constexpr (std::is_same_v<K, StaticIID> || std::is_same_v<K, StaticHeavyInverse>) {
          const MarginalLaw law = marginal_of(spec);
          st->breaks.reserve(2 * n_tracks);
          st->values.reserve(n_tracks);
          for (std::int64_t e = x_min; e < x_max; ++e) {
            Rng rng(derive_tag(seed, Tag::EnvEdgeStatic, edge_key(e)));
            st->breaks.push_back(t_min);
            st->breaks.push_back(t_max);
            st->values.push_back(sample_law(law, rng));
            close_track();
          }
        } else if constexpr (std::is_same_v<K, OnOffSwitching>) {
          const double p_high = k.rate_off / (k.rate_on + k.rate_off);
          for (std::int64_t e = x_min; e < x_max; ++e) {
            const std::uint64_t key = edge_key(e);
            two_sided_track(
                t_min, t_max, derive_tag(seed, Tag::EnvEdgeAnchor, key), derive_tag(seed, Tag::EnvEdgeForward, key),
                derive_tag(seed, Tag::EnvEdgeBackward, key),
                [&](Rng& r) { return r.uniform() < p_high ? k.high : k.low; },
                [&](double s) { return s == k.high ? k.rate_on : k.rate_off; },
                [&](double s, Rng&) { return s == k.high ? k.low : k.high; }, st->breaks, st->values);
            close_track();
          }
        } else {
          const MarginalLaw law = marginal_of(spec);
          const double rate = k.switch_rate;
          two_sided_track(
              t_min, t_max, derive_tag(seed, Tag::EnvLevelAnchor, 0), derive_tag(seed, Tag::EnvLevelForward, 0),
              derive_tag(seed, Tag::EnvLevelBackward, 0), [&](Rng& r) { return sample_law(law, r); },
              [&](double) { return rate; }, [&](double, Rng& r) { return sample_law(law, r); }, st->breaks,
              st->values);
          close_track();
        }
      },
      spec.kind);
  return st;
}

}  // namespace detail

// An immutable realized environment, possibly viewed through a space-time
// shift. Copies are cheap and share the underlying tracks.
class EnvironmentWindow {
 public:
  EnvironmentWindow() = default;
  EnvironmentWindow(EnvSpec spec, std::uint64_t seed, std::shared_ptr<const TrackStore> store, double shift_t = 0.0,
                    std::int64_t shift_x = 0)
      : spec_(std::move(spec)), seed_(seed), store_(std::move(store)), shift_t_(shift_t), shift_x_(shift_x) {}

  const EnvSpec& spec() const { return spec_; }
  std::uint64_t seed() const { return seed_; }
  const TrackStore& store() const { return *store_; }
  std::shared_ptr<const TrackStore> store_ptr() const { return store_; }
  double shift_t() const { return shift_t_; }
  std::int64_t shift_x() const { return shift_x_; }

  // Bounds in view coordinates.
  std::int64_t x_min() const { return store_->x_min - shift_x_; }
  std::int64_t x_max() const { return store_->x_max - shift_x_; }
  double t_min() const { return store_->t_min - shift_t_; }
  double t_max() const { return store_->t_max - shift_t_; }

  double to_base(double t) const { return t + shift_t_; }
  double from_base(double tb) const { return tb - shift_t_; }

  bool has_edge(std::int64_t x) const {
    const std::int64_t xb = x + shift_x_;
    return xb >= store_->x_min && xb < store_->x_max;
  }
  bool covers_time(double t) const {
    const double tb = to_base(t);
    return tb >= store_->t_min && tb <= store_->t_max;
  }

  TrackRef track(std::int64_t x) const {
    if (!has_edge(x)) throw RangeError("edge " + std::to_string(x) + " outside environment window");
    const std::size_t k = store_->track_of(x + shift_x_);
    TrackRef r;
    r.breaks = store_->breaks.data() + store_->offset[k];
    r.values = store_->values.data() + (store_->offset[k] - k);
    r.pieces = store_->offset[k + 1] - store_->offset[k] - 1;
    return r;
  }

  // b_t(x), right-continuous.
  double rate_at(std::int64_t x, double t) const {
    const double tb = to_base(t);
    if (!(tb >= store_->t_min && tb <= store_->t_max))
      throw RangeError("time " + std::to_string(t) + " outside environment window");
    const TrackRef r = track(x);
    return r.values[r.piece_at(tb)];
  }

  // Exact integral of b_s(x) over [t0, t1].
  double integrated_rate(std::int64_t x, double t0, double t1) const {
    if (t1 < t0) throw RangeError("integrated_rate: reversed interval");
    const double a = to_base(t0), b = to_base(t1);
    if (a < store_->t_min || b > store_->t_max) throw RangeError("integrated_rate: interval outside window");
    if (a == b) return 0.0;
    const TrackRef r = track(x);
    std::size_t i = r.piece_at(a);
    double acc = 0.0, cur = a;
    for (; i < r.pieces; ++i) {
      const double end = std::min(r.breaks[i + 1], b);
      acc += r.values[i] * (end - cur);
      cur = end;
      if (cur >= b) break;
    }
    return acc;
  }

  // Smallest u >= t with integral of b over [t, u] equal to target; +inf when
  // the window ends first.
  double next_ring(std::int64_t x, double t, double target) const {
    const TrackRef r = track(x);
    const double tb = to_base(t);
    std::size_t i = r.piece_at(tb);
    double cur = tb, acc = 0.0;
    for (; i < r.pieces; ++i) {
      const double len = r.breaks[i + 1] - cur;
      const double mass = r.values[i] * len;
      if (acc + mass >= target) return from_base(cur + (target - acc) / r.values[i]);
      acc += mass;
      cur = r.breaks[i + 1];
    }
    return kInf;
  }

  // Largest u <= t with integral of b over [u, t] equal to target; -inf when
  // the window starts first.
  double prev_ring(std::int64_t x, double t, double target) const {
    const TrackRef r = track(x);
    const double tb = to_base(t);
    std::size_t i = r.piece_at(tb);
    if (i > 0 && r.breaks[i] == tb) --i;  // the piece ending at tb governs times just below it
    double cur = tb, acc = 0.0;
    for (std::size_t k = i + 1; k-- > 0;) {
      const double len = cur - r.breaks[k];
      const double mass = r.values[k] * len;
      if (acc + mass >= target) return from_base(cur - (target - acc) / r.values[k]);
      acc += mass;
      cur = r.breaks[k];
    }
    return -kInf;
  }

  // Largest rate on edges [x_lo, x_hi] during [t0, t1].
  double max_rate(std::int64_t x_lo, std::int64_t x_hi, double t0, double t1) const {
    double m = 0.0;
    const double a = to_base(t0), b = to_base(t1);
    const std::int64_t lo = std::max(x_lo, x_min()), hi = std::min(x_hi, x_max() - 1);
    for (std::int64_t x = lo; x <= hi; ++x) {
      const TrackRef r = track(x);
      const std::size_t i0 = r.piece_at(a);
      for (std::size_t i = i0; i < r.pieces && (i == i0 || r.breaks[i] < b); ++i) m = std::max(m, r.values[i]);
      if (store_->shared) break;
    }
    return m;
  }

 private:
  EnvSpec spec_;
  std::uint64_t seed_ = 0;
  std::shared_ptr<const TrackStore> store_;
  double shift_t_ = 0.0;
  std::int64_t shift_x_ = 0;
};

inline EnvironmentWindow build_env(const EnvSpec& spec, std::int64_t x_min, std::int64_t x_max, double t_min,
                                   double t_max, std::uint64_t seed) {
  validate(spec);
  if (!(x_min < x_max)) throw ConfigError("build_env: need x_min < x_max");
  if (!(t_min < t_max) || !std::isfinite(t_min) || !std::isfinite(t_max))
    throw ConfigError("build_env: need finite t_min < t_max");
  return EnvironmentWindow(spec, seed, detail::generate(spec, x_min, x_max, t_min, t_max, seed));
}

// Window over explicitly given tracks: breaks[k] and values[k] describe edge
// x_min + k. Every track must span the same [t_min, t_max].
inline EnvironmentWindow window_from_tracks(const EnvSpec& spec, std::uint64_t seed, std::int64_t x_min,
                                            const std::vector<std::vector<double>>& breaks,
                                            const std::vector<std::vector<double>>& values) {
  if (breaks.empty() || breaks.size() != values.size()) throw ConfigError("window_from_tracks: track count mismatch");
  auto st = std::make_shared<TrackStore>();
  st->x_min = x_min;
  st->x_max = x_min + static_cast<std::int64_t>(breaks.size());
  st->t_min = breaks.front().front();
  st->t_max = breaks.front().back();
  st->offset.push_back(0);
  for (std::size_t k = 0; k < breaks.size(); ++k) {
    const auto& b = breaks[k];
    const auto& v = values[k];
    if (b.size() < 2 || v.size() + 1 != b.size()) throw ConfigError("window_from_tracks: need one value per piece");
    if (b.front() != st->t_min || b.back() != st->t_max) throw ConfigError("window_from_tracks: tracks must share span");
    for (std::size_t i = 1; i < b.size(); ++i)
      if (!(b[i] > b[i - 1])) throw ConfigError("window_from_tracks: breakpoints must increase strictly");
    for (double r : v)
      if (!(r > 0.0) || !std::isfinite(r)) throw ConfigError("window_from_tracks: rates must be positive and finite");
    st->breaks.insert(st->breaks.end(), b.begin(), b.end());
    st->values.insert(st->values.end(), v.begin(), v.end());
    st->offset.push_back(st->breaks.size());
  }
  return EnvironmentWindow(spec, seed, std::move(st));
}

inline double rate_at(const EnvironmentWindow& env, std::int64_t x, double t) { return env.rate_at(x, t); }
inline double integrated_rate(const EnvironmentWindow& env, std::int64_t x, double t0, double t1) {
  return env.integrated_rate(x, t0, t1);
}

// View in which (x, t) reads the original at (x + y, t + s). Offsets add, so
// shift_view(shift_view(e, s, y), u, z) is the same view as shift_view(e, s+u, y+z).
inline EnvironmentWindow shift_view(const EnvironmentWindow& env, double s, std::int64_t y) {
  return EnvironmentWindow(env.spec(), env.seed(), env.store_ptr(), env.shift_t() + s, env.shift_x() + y);
}

// A larger window with the same spec, seed and shift; the tracks agree with
// the original on the overlap. Bounds are in view coordinates.
inline EnvironmentWindow extend(const EnvironmentWindow& env, std::int64_t x_min, std::int64_t x_max, double t_min,
                                double t_max) {
  const TrackStore& st = env.store();
  const std::int64_t bx0 = std::min(st.x_min, x_min + env.shift_x());
  const std::int64_t bx1 = std::max(st.x_max, x_max + env.shift_x());
  const double bt0 = std::min(st.t_min, env.to_base(t_min));
  const double bt1 = std::max(st.t_max, env.to_base(t_max));
  if (bx0 == st.x_min && bx1 == st.x_max && bt0 == st.t_min && bt1 == st.t_max) return env;
  return EnvironmentWindow(env.spec(), env.seed(), detail::generate(env.spec(), bx0, bx1, bt0, bt1, env.seed()),
                           env.shift_t(), env.shift_x());
}

// Portable text dump: a header, then one line per edge with its breakpoints
// and values (view coordinates).
inline std::string dump_window(const EnvironmentWindow& env) {
  std::ostringstream os;
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(spec_hash(env.spec())));
  os << "# condsim environment window\n";
  os << "schema_version " << kSchemaVersion << "\n";
  os << "spec_hash " << buf << "\n";
  os << "seed " << env.seed() << "\n";
  os << "spec " << spec_to_json(env.spec()).dump() << "\n";
  os << "x_min " << env.x_min() << " x_max " << env.x_max() << " t_min " << num(env.t_min()) << " t_max "
     << num(env.t_max()) << "\n";
  for (std::int64_t x = env.x_min(); x < env.x_max(); ++x) {
    const TrackRef r = env.track(x);
    os << "edge " << x << " breaks";
    for (std::size_t i = 0; i <= r.pieces; ++i) os << ' ' << num(env.from_base(r.breaks[i]));
    os << " values";
    for (std::size_t i = 0; i < r.pieces; ++i) os << ' ' << num(r.values[i]);
    os << '\n';
  }
  return os.str();
}

}  // namespace condsim::env
