#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "condsim/env.hpp"
#include "condsim/stats.hpp"

using namespace condsim;
using namespace condsim::env;

namespace {

EnvSpec onoff(double on = 1.0, double off = 1.0, double low = 0.1, double high = 1.0) {
  EnvSpec s;
  s.kind = OnOffSwitching{on, off, low, high};
  return s;
}
EnvSpec static12() {
  EnvSpec s;
  s.kind = StaticIID{DiscreteLaw{{1.0, 2.0}, {0.5, 0.5}}};
  return s;
}
EnvSpec constant(double c) {
  EnvSpec s;
  s.kind = Constant{c};
  return s;
}
EnvSpec homogeneous() {
  EnvSpec s;
  s.kind = HomogeneousInSpace{DiscreteLaw{{0.5, 1.0, 3.0}, {0.3, 0.3, 0.4}}, 0.7};
  return s;
}

}  // namespace

TEST(EnvBuild, ConstantWindowHasSingleValueTracks) {
  const auto w = build_env(constant(1.0), 0, 4, 0.0, 10.0, 7);
  for (std::int64_t x = 0; x < 4; ++x) {
    const TrackRef r = w.track(x);
    ASSERT_EQ(r.pieces, 1u);
    EXPECT_EQ(r.values[0], 1.0);
    EXPECT_EQ(r.breaks[0], 0.0);
    EXPECT_EQ(r.breaks[1], 10.0);
  }
}

TEST(EnvBuild, OnOffLongRunFractionHighMatchesStationaryLaw) {
  const double T = 1e4;
  const auto w = build_env(onoff(), 0, 1, 0.0, T, 11);
  const TrackRef r = w.track(0);
  double high_time = 0.0;
  for (std::size_t i = 0; i < r.pieces; ++i)
    if (r.values[i] == 1.0) high_time += r.breaks[i + 1] - r.breaks[i];
  const double frac = high_time / T;
  // Two-state chain: the time average has asymptotic variance 2 p (1-p) / ((r_on + r_off) T).
  const double p = 0.5;
  const double se = std::sqrt(2.0 * p * (1.0 - p) / (2.0 * T));
  EXPECT_NEAR(frac, p, 3.0 * se);
}

TEST(EnvBuild, StaticInverseMeanMatchesHarmonicValue) {
  const auto w = build_env(static12(), 0, 100000, 0.0, 1.0, 5);
  std::vector<double> inv;
  inv.reserve(100000);
  for (std::int64_t x = 0; x < 100000; ++x) inv.push_back(1.0 / w.rate_at(x, 0.5));
  const auto e = stats::mean_se(inv);
  EXPECT_NEAR(e.value, 0.75, 3.0 * e.se);
}

TEST(EnvBuild, RejectsInvalidParameters) {
  EXPECT_THROW(build_env(constant(0.0), 0, 4, 0.0, 1.0, 1), ConfigError);
  EXPECT_THROW(build_env(constant(1.0), 4, 4, 0.0, 1.0, 1), ConfigError);
  EXPECT_THROW(build_env(constant(1.0), 0, 4, 1.0, 1.0, 1), ConfigError);
  EXPECT_THROW(build_env(onoff(-1.0), 0, 4, 0.0, 1.0, 1), ConfigError);
  EnvSpec bad;
  bad.kind = StaticIID{DiscreteLaw{{1.0, 2.0}, {0.5, 0.6}}};
  EXPECT_THROW(build_env(bad, 0, 4, 0.0, 1.0, 1), ConfigError);
}

TEST(EnvSpecFlags, ClassificationAndDeclaredCompliance) {
  EXPECT_TRUE(classify(constant(1.0)).compliant);
  EXPECT_TRUE(classify(static12()).compliant);
  EXPECT_TRUE(classify(onoff()).compliant);
  EXPECT_TRUE(classify(homogeneous()).compliant);

  EnvSpec heavy_inv;
  heavy_inv.kind = StaticHeavyInverse{2.0};
  EXPECT_FALSE(classify(heavy_inv).compliant);
  EXPECT_EQ(classify(heavy_inv).failure, MomentFailure::lower_moment);

  EnvSpec heavy_up;
  heavy_up.kind = HomogeneousHeavyUpper{0.75, 1.0};
  EXPECT_FALSE(classify(heavy_up).compliant);
  EXPECT_EQ(classify(heavy_up).failure, MomentFailure::upper_moment);

  heavy_up.assumption1_compliant = true;
  EXPECT_THROW(validate(heavy_up), ConfigError);
  heavy_inv.assumption1_compliant = true;
  EXPECT_THROW(build_env(heavy_inv, 0, 4, 0.0, 1.0, 1), ConfigError);

  // A light-tailed power law stays compliant.
  EnvSpec light;
  light.kind = StaticHeavyInverse{0.5};
  EXPECT_TRUE(classify(light).compliant);
}

TEST(EnvSpecFlags, ZeroLowValueNeedsOutOfTheoryFlag) {
  EnvSpec s = onoff(1.0, 1.0, 0.0, 1.0);
  EXPECT_THROW(validate(s), ConfigError);
  s.out_of_theory = true;
  EXPECT_NO_THROW(validate(s));
  EXPECT_EQ(classify(s).failure, MomentFailure::positivity);
  EXPECT_THROW(require_compliant(s, "test"), ConfigError);
}

TEST(EnvSpecFlags, LawMoments) {
  EXPECT_DOUBLE_EQ(law_mean_inverse(DiscreteLaw{{1.0, 2.0}, {0.5, 0.5}}), 0.75);
  EXPECT_DOUBLE_EQ(law_mean(UniformPowerLaw{2.0, 0.0}), 1.0 / 3.0);
  EXPECT_TRUE(std::isinf(law_mean_inverse(UniformPowerLaw{2.0, 0.0})));
  // E[1/(U^2 + 0.1)] = arctan(1/sqrt(0.1)) / sqrt(0.1)
  EXPECT_NEAR(law_mean_inverse(UniformPowerLaw{2.0, 0.1}), std::atan(1.0 / std::sqrt(0.1)) / std::sqrt(0.1), 1e-12);
  EXPECT_TRUE(std::isinf(law_mean(ParetoLaw{0.75, 1.0})));
  EXPECT_DOUBLE_EQ(law_mean(ParetoLaw{2.0, 1.0}), 2.0);
}

TEST(EnvSpecJson, RoundTripIsIdentity) {
  std::vector<EnvSpec> specs = {constant(2.0), static12(), onoff(1.0, 3.0, 0.1, 1.0), homogeneous()};
  EnvSpec h;
  h.kind = StaticHeavyInverse{2.0};
  h.assumption1_compliant = false;
  specs.push_back(h);
  EnvSpec u;
  u.kind = HomogeneousHeavyUpper{0.75, 1.0};
  specs.push_back(u);
  EnvSpec p;
  p.kind = StaticIID{UniformPowerLaw{2.0, 0.1}};
  specs.push_back(p);
  for (const auto& s : specs) {
    const auto j = spec_to_json(s);
    EXPECT_EQ(j.at("schema_version"), kSchemaVersion);
    EXPECT_EQ(spec_from_json(j), s);
    EXPECT_EQ(spec_hash(spec_from_json(j)), spec_hash(s));
  }
  EXPECT_NE(spec_hash(constant(1.0)), spec_hash(constant(2.0)));
  auto j = spec_to_json(constant(1.0));
  j["schema_version"] = 99;
  EXPECT_THROW(spec_from_json(j), ConfigError);
  EXPECT_THROW(spec_from_json(json{{"kind", "nope"}}), ConfigError);
}

TEST(EnvQuery, RateAtConventions) {
  const auto c = build_env(constant(2.5), -3, 3, -1.0, 5.0, 3);
  EXPECT_EQ(c.rate_at(0, 0.0), 2.5);
  EXPECT_EQ(c.rate_at(-3, 4.9), 2.5);
  const auto w = window_from_tracks(constant(1.0), 0, 0, {{0.0, 1.0, 2.0}}, {{3.0, 7.0}});
  EXPECT_EQ(w.rate_at(0, 1.0), 7.0);
  EXPECT_EQ(w.rate_at(0, 0.999), 3.0);
  EXPECT_EQ(w.rate_at(0, 2.0), 7.0);
  EXPECT_THROW(w.rate_at(0, 3.0), RangeError);
  EXPECT_THROW(w.rate_at(1, 0.5), RangeError);
}

TEST(EnvQuery, IntegratedRateExamples) {
  const auto c = build_env(constant(1.0), 0, 2, 0.0, 2.0, 3);
  EXPECT_EQ(c.integrated_rate(0, 0.0, 2.0), 2.0);
  const auto w = window_from_tracks(constant(1.0), 0, 0, {{0.0, 1.0, 3.0}}, {{2.0, 5.0}});
  EXPECT_DOUBLE_EQ(w.integrated_rate(0, 0.5, 2.0), 6.0);
  EXPECT_EQ(w.integrated_rate(0, 1.5, 1.5), 0.0);
  EXPECT_THROW(w.integrated_rate(0, 2.0, 1.0), RangeError);
}

TEST(EnvQuery, IntegratedRateAdditivity) {
  const auto w = build_env(onoff(), -5, 5, -20.0, 20.0, 99);
  Rng rng(4);
  for (int i = 0; i < 200; ++i) {
    double a = -20.0 + 40.0 * rng.uniform(), b = -20.0 + 40.0 * rng.uniform(), c = -20.0 + 40.0 * rng.uniform();
    double v[3] = {a, b, c};
    std::sort(v, v + 3);
    const std::int64_t x = -5 + static_cast<std::int64_t>(rng() % 10);
    const double whole = w.integrated_rate(x, v[0], v[2]);
    const double parts = w.integrated_rate(x, v[0], v[1]) + w.integrated_rate(x, v[1], v[2]);
    EXPECT_NEAR(whole, parts, 1e-12 * std::max(1.0, whole));
  }
}

TEST(EnvQuery, RingInversionMatchesIntegral) {
  const auto w = build_env(onoff(0.5, 2.0, 0.2, 3.0), -2, 2, -50.0, 50.0, 8);
  Rng rng(5);
  for (int i = 0; i < 200; ++i) {
    const double t = -40.0 + 80.0 * rng.uniform();
    const double target = rng.exponential();
    const double up = w.next_ring(0, t, target);
    if (std::isfinite(up)) {
      EXPECT_NEAR(w.integrated_rate(0, t, up), target, 1e-11);
    }
    const double down = w.prev_ring(-1, t, target);
    if (std::isfinite(down)) {
      EXPECT_NEAR(w.integrated_rate(-1, down, t), target, 1e-11);
    }
  }
  EXPECT_TRUE(std::isinf(w.next_ring(0, 49.0, 1e6)));
  EXPECT_TRUE(std::isinf(w.prev_ring(0, -49.0, 1e6)));
}

TEST(EnvShift, IdentityInverseAndComposition) {
  const auto w = build_env(onoff(), -20, 20, -30.0, 30.0, 12);
  const auto id = shift_view(w, 0.0, 0);
  const auto back = shift_view(shift_view(w, 3.25, 4), -3.25, -4);
  const auto two = shift_view(shift_view(w, 1.5, 2), 2.0, -5);
  const auto one = shift_view(w, 3.5, -3);
  Rng rng(1);
  for (int i = 0; i < 500; ++i) {
    const std::int64_t x = -10 + static_cast<std::int64_t>(rng() % 20);
    const double t = -20.0 + 40.0 * rng.uniform();
    EXPECT_EQ(id.rate_at(x, t), w.rate_at(x, t));
    EXPECT_EQ(back.rate_at(x, t), w.rate_at(x, t));
    const double t2 = -15.0 + 25.0 * rng.uniform();
    EXPECT_EQ(two.rate_at(x, t2), one.rate_at(x, t2));
  }
  const auto c = build_env(constant(1.7), -5, 5, 0.0, 10.0, 1);
  const auto cs = shift_view(c, 2.0, 3);
  EXPECT_EQ(cs.rate_at(-7, 0.5), 1.7);
}

TEST(EnvShift, CovarianceIsBitExact) {
  const auto w = build_env(onoff(), -40, 40, -50.0, 50.0, 21);
  Rng rng(2);
  for (int i = 0; i < 100; ++i) {
    const double s = -10.0 + 20.0 * rng.uniform();
    const std::int64_t y = -10 + static_cast<std::int64_t>(rng() % 21);
    const std::int64_t x = -20 + static_cast<std::int64_t>(rng() % 40);
    const double t = -30.0 + 60.0 * rng.uniform();
    const auto v = shift_view(w, s, y);
    EXPECT_EQ(v.rate_at(x, t), w.rate_at(x + y, t + s));
  }
}

TEST(EnvDeterminism, RegenerationAndExtensionAgreeOnOverlap) {
  for (const auto& spec : {onoff(), static12(), homogeneous()}) {
    const auto a = build_env(spec, -10, 10, -5.0, 5.0, 77);
    const auto b = build_env(spec, -10, 10, -5.0, 5.0, 77);
    const auto big = build_env(spec, -30, 25, -40.0, 60.0, 77);
    const auto ext = extend(a, -30, 25, -40.0, 60.0);
    for (std::int64_t x = -10; x < 10; ++x) {
      const TrackRef ra = a.track(x), rb = b.track(x);
      ASSERT_EQ(ra.pieces, rb.pieces);
      for (std::size_t i = 0; i < ra.pieces; ++i) {
        EXPECT_EQ(ra.values[i], rb.values[i]);
        EXPECT_EQ(ra.breaks[i], rb.breaks[i]);
      }
      for (double t = -5.0; t <= 5.0; t += 0.01) {
        EXPECT_EQ(a.rate_at(x, t), big.rate_at(x, t));
        EXPECT_EQ(a.rate_at(x, t), ext.rate_at(x, t));
      }
    }
  }
}

TEST(EnvProperties, PositivityOfCompliantSpecs) {
  for (const auto& spec : {onoff(), static12(), homogeneous(), constant(0.3)}) {
    const auto w = build_env(spec, -50, 50, -20.0, 20.0, 3);
    for (std::int64_t x = -50; x < 50; ++x) {
      const TrackRef r = w.track(x);
      for (std::size_t i = 0; i < r.pieces; ++i) {
        EXPECT_GT(r.values[i], 0.0);
        EXPECT_TRUE(std::isfinite(r.values[i]));
        EXPECT_LT(r.breaks[i], r.breaks[i + 1]);
      }
    }
  }
}

TEST(EnvProperties, DynamicMarginalsAreStationaryInTime) {
  const std::vector<double> times = {-45.0, -30.0, -17.5, -5.0, 0.0, 0.1, 8.0, 19.0, 33.0, 47.0};
  for (const auto& spec : {onoff(1.0, 3.0, 0.1, 1.0), homogeneous()}) {
    // Homogeneous fields have one level per window, so sample across seeds.
    const bool per_seed = is_spatially_homogeneous(spec);
    std::vector<std::vector<double>> samples(times.size());
    if (per_seed) {
      for (std::uint64_t seed = 0; seed < 2000; ++seed) {
        const auto w = build_env(spec, 0, 1, -50.0, 50.0, seed);
        for (std::size_t k = 0; k < times.size(); ++k) samples[k].push_back(w.rate_at(0, times[k]));
      }
    } else {
      const auto w = build_env(spec, 0, 2000, -50.0, 50.0, 31);
      for (std::int64_t x = 0; x < 2000; ++x)
        for (std::size_t k = 0; k < times.size(); ++k) samples[k].push_back(w.rate_at(x, times[k]));
    }
    std::vector<double> pooled;
    for (const auto& s : samples) pooled.insert(pooled.end(), s.begin(), s.end());
    for (std::size_t k = 0; k < times.size(); ++k) {
      const auto r = stats::ks_two_sample(samples[k], pooled);
      EXPECT_GT(r.p_value, 0.01) << "time " << times[k];
    }
    // And the marginal matches the law: mean within 4 SE.
    const auto m = stats::mean_se(pooled);
    EXPECT_NEAR(m.value, mean_rate(spec), 4.0 * m.se * std::sqrt(10.0));
  }
}

TEST(EnvProperties, HeavyInverseMomentDiverges) {
  const MarginalLaw law = UniformPowerLaw{2.0, 0.0};
  std::vector<double> med_a, med_inv;
  for (std::size_t n : {1000u, 10000u, 100000u}) {
    std::vector<double> ma, mi;
    for (std::uint64_t rep = 0; rep < 20; ++rep) {
      Rng rng(derive(123, rep, n));
      double sa = 0.0, si = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double a = sample_law(law, rng);
        sa += a;
        si += 1.0 / a;
      }
      ma.push_back(sa / static_cast<double>(n));
      mi.push_back(si / static_cast<double>(n));
    }
    med_a.push_back(stats::median(ma));
    med_inv.push_back(stats::median(mi));
  }
  EXPECT_LT(med_inv[0], med_inv[1]);
  EXPECT_LT(med_inv[1], med_inv[2]);
  for (double m : med_a) EXPECT_NEAR(m, 1.0 / 3.0, 0.02);
}

TEST(EnvDump, HeaderAndOneLinePerEdge) {
  const auto w = build_env(onoff(), -2, 3, 0.0, 5.0, 9);
  const std::string d = dump_window(w);
  EXPECT_NE(d.find("spec_hash "), std::string::npos);
  EXPECT_NE(d.find("seed 9\n"), std::string::npos);
  std::size_t edges = 0, pos = 0;
  while ((pos = d.find("\nedge ", pos)) != std::string::npos) {
    ++edges;
    ++pos;
  }
  EXPECT_EQ(edges, 5u);
  EXPECT_EQ(dump_window(build_env(onoff(), -2, 3, 0.0, 5.0, 9)), d);
}
