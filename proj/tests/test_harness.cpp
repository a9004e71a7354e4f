#include <gtest/gtest.h>

#include <cmath>

#include "condsim/harness.hpp"

using namespace condsim;
using condsim::harness::RunConfig;

namespace {

env::EnvSpec spec(env::Kind k) {
  env::EnvSpec s;
  s.kind = std::move(k);
  return s;
}

RunConfig small_invariance(env::EnvSpec spec) {
  RunConfig c;
  c.experiment = "invariance";
  c.env = std::move(spec);
  c.seed = 11;
  c.horizon = 50.0;
  c.n_paths = 400;
  c.n_ladder = {10.0, 50.0};
  c.martingale_horizon = 10.0;
  c.martingale_paths = 300;
  c.martingale_steps = 10;
  c.dual_horizon = 100.0;
  c.dual_paths = 100;
  c.eps_schedule = {0.1, 0.01};
  return c;
}

}  // namespace

TEST(Config, JsonRoundTripIsExact) {
  RunConfig c = small_invariance(spec(env::OnOffSwitching{1.0, 1.0, 0.1, 1.0}));
  c.control_env = spec(env::Constant{2.0});
  c.expected_sigma2 = 1.25;
  c.tolerances.ks_max = {0.1, 0.2};
  c.format = "json";
  const RunConfig back = harness::config_from_json(harness::to_json(c));
  EXPECT_EQ(back, c);
  EXPECT_EQ(harness::config_hash(back), harness::config_hash(c));
}

TEST(Config, HashIgnoresThreadsAndOutputOnly) {
  RunConfig a = small_invariance(spec(env::Constant{1.0}));
  RunConfig b = a;
  b.threads = 8;
  b.out_dir = "elsewhere";
  b.format = "json";
  EXPECT_EQ(harness::config_hash(a), harness::config_hash(b));
  b.seed = 12;
  EXPECT_NE(harness::config_hash(a), harness::config_hash(b));
}

TEST(Config, UnknownKeysAndBadValuesAreConfigErrors) {
  auto j = harness::to_json(small_invariance(spec(env::Constant{1.0})));
  auto bad = j;
  bad["horizn"] = 3;
  EXPECT_THROW(harness::config_from_json(bad), ConfigError);
  bad = j;
  bad["tolerances"]["typo"] = 1;
  EXPECT_THROW(harness::config_from_json(bad), ConfigError);
  bad = j;
  bad["schema_version"] = 2;
  EXPECT_THROW(harness::config_from_json(bad), ConfigError);
  bad = j;
  bad["horizon"] = -1.0;
  EXPECT_THROW(harness::config_from_json(bad), ConfigError);
  bad = j;
  bad["mode"] = "sideways";
  EXPECT_THROW(harness::config_from_json(bad), ConfigError);
  bad = j;
  bad.erase("env");
  EXPECT_THROW(harness::config_from_json(bad), ConfigError);
  bad = j;
  bad["tolerances"]["ks_max"] = {0.1};
  EXPECT_THROW(harness::config_from_json(bad), ConfigError);
}

TEST(Invariance, ConstantRatesGiveExactCorrectorEstimators) {
  RunConfig c = small_invariance(spec(env::Constant{1.0}));
  c.expected_sigma2 = 2.0;
  const auto r = harness::run_invariance_check(c);
  ASSERT_FALSE(r.partial());
  ASSERT_TRUE(r.sigma2_bphi2 && r.sigma2_qv && r.sigma2_empirical && r.sigma2_dual);
  // phi = 1, so 2 E[b phi^2] and the pathwise quadratic variation are exact.
  EXPECT_NEAR(r.sigma2_bphi2->value, 2.0, 1e-12);
  EXPECT_NEAR(r.sigma2_qv->value, 2.0, 1e-12);
  EXPECT_NEAR(r.theta_mean->value, 2.0, 1e-12);
  EXPECT_EQ(r.martingale->qv_method, "pathwise");
  EXPECT_EQ(r.martingale->exits, 0u);
  EXPECT_NEAR(r.sigma2_empirical->value, 2.0, 4.0 * r.sigma2_empirical->se);
  EXPECT_NEAR(r.sigma2_dual->value, 2.0, 4.0 * r.sigma2_dual->se);
  ASSERT_EQ(r.ks_table.size(), 2u);
  for (const auto& k : r.ks_table) EXPECT_GT(k.p_value, 1e-4);
}

TEST(Invariance, StaticEnvironmentMatchesHarmonicMean) {
  // a ~ U^2 + 0.1: E[1/a] = atan(1/sqrt(0.1)) / sqrt(0.1).
  const env::EnvSpec s = spec(env::StaticIID{env::UniformPowerLaw{2.0, 0.1}});
  const double s2 = 2.0 * std::sqrt(0.1) / std::atan(1.0 / std::sqrt(0.1));
  RunConfig c = small_invariance(s);
  c.expected_sigma2 = s2;
  const auto r = harness::run_invariance_check(c);
  ASSERT_FALSE(r.partial());
  EXPECT_EQ(r.martingale->qv_method, "pathwise");
  EXPECT_NEAR(r.sigma2_qv->value, s2, 4.0 * r.sigma2_qv->se);
  EXPECT_NEAR(r.sigma2_bphi2->value, s2, 4.0 * r.sigma2_bphi2->se);
  EXPECT_NEAR(r.martingale->mean_increment.value, 0.0, 4.0 * r.martingale->mean_increment.se);
  EXPECT_NEAR(r.martingale->lag1_autocorr.value, 0.0, 4.0 * r.martingale->lag1_autocorr.se);
}

TEST(Invariance, NonCompliantSpecIsRejected) {
  RunConfig c = small_invariance(spec(env::StaticHeavyInverse{3.0}));
  EXPECT_THROW(harness::run_invariance_check(c), ConfigError);
}

TEST(Invariance, ReportIsIdenticalForOneAndEightWorkers) {
  RunConfig c = small_invariance(spec(env::OnOffSwitching{1.0, 1.0, 0.1, 1.0}));
  c.n_paths = 100;
  c.martingale_paths = 50;
  c.martingale_horizon = 4.0;
  c.martingale_envs = 2;
  c.dual_paths = 40;
  c.threads = 1;
  const auto a = harness::to_json(harness::run_invariance_check(c)).dump();
  c.threads = 8;
  const auto b = harness::to_json(harness::run_invariance_check(c)).dump();
  EXPECT_EQ(a, b);
}

TEST(Remark84, StaticGapVanishes) {
  // Static: 2 E[b phi^2] - 2 E[b phi] = 2 c^2 E[1/a] - 2 c = 0 with c = 1 / E[1/a],
  // so the per-vertex gap averages to zero.
  RunConfig c;
  c.experiment = "remark84";
  c.env = spec(env::StaticIID{env::UniformPowerLaw{2.0, 0.1}});
  c.field_half_width = 2000;
  c.dual_paths = 50;
  c.dual_horizon = 50.0;
  const auto r = harness::run_remark84(c);
  ASSERT_FALSE(r.partial());
  const auto& g = r.sections["remark84"]["gap"];
  EXPECT_LE(std::abs(g["value"].get<double>()), 2.0 * g["se"].get<double>() + 1e-12);
  const double s2 = 2.0 * std::sqrt(0.1) / std::atan(1.0 / std::sqrt(0.1));
  EXPECT_NEAR(r.sigma2_bphi2->value, s2, 4.0 * r.sigma2_bphi2->se);
}

TEST(Upper, ExactSamplerMatchesSimulatedWalk) {
  const env::EnvSpec s = spec(env::HomogeneousHeavyUpper{1.5, 1.0});
  const double t = 20.0;
  std::vector<double> a, b;
  for (std::size_t k = 0; k < 2000; ++k) {
    const auto e = env::build_env(s, -400, 400, 0.0, t, derive(99, k));
    Rng rng(derive(7, k));
    a.push_back(static_cast<double>(harness::sample_homogeneous_x(2.0 * e.integrated_rate(0, 0.0, t), rng)));
    b.push_back(static_cast<double>(walk::simulate_x(e, 0, t, derive(8, k)).position_at(t)));
  }
  const auto ks = stats::ks_two_sample(a, b);
  EXPECT_GT(ks.p_value, 1e-3) << ks.distance;
}

TEST(Upper, ConstantRatesHaveNoQuantileGrowth) {
  RunConfig c;
  c.experiment = "counterexample_upper";
  c.env = spec(env::Constant{1.0});
  c.n_ladder = {100.0, 10000.0};
  c.replicates = 3;
  c.n_paths = 4000;
  const auto r = harness::run_counterexample_upper(c);
  ASSERT_FALSE(r.partial());
  const double g = r.sections["upper"]["median_growth"].get<double>();
  EXPECT_NEAR(g, 1.0, 0.1);
  // A(t) / t = 2 exactly.
  for (const auto& row : r.sections["upper"]["clock"]) EXPECT_NEAR(row["median_A_over_t"].get<double>(), 2.0, 1e-12);
}

TEST(Lower, RBetaForConstantRatesNearTwoOverBeta) {
  const auto p = harness::r_beta(spec(env::Constant{1.0}), 400.0, 1.0, 2000, 5, 0);
  EXPECT_LE(p.value.value, p.upper_bound);
  EXPECT_GT(p.value.value, 1.0);
  EXPECT_NEAR(p.upper_bound, 41.0 / 20.0, 1e-12);
}

TEST(Report, JsonHasSchemaAndTablesRender) {
  RunConfig c;
  c.experiment = "counterexample_upper";
  c.env = spec(env::Constant{1.0});
  c.n_ladder = {10.0, 100.0};
  c.replicates = 2;
  c.n_paths = 100;
  const auto r = harness::run_experiment(c);
  const auto j = harness::to_json(r);
  EXPECT_EQ(j["schema_version"], harness::kReportSchema);
  EXPECT_EQ(j["config_hash"], harness::config_hash(c));
  EXPECT_FALSE(j["partial"].get<bool>());
  const auto tables = harness::report_tables(r);
  ASSERT_FALSE(tables.empty());
  bool found = false;
  for (const auto& t : tables)
    if (t.name == "tightness_quantiles") {
      found = true;
      EXPECT_EQ(harness::to_csv(t).substr(0, 21), "n,replicate,quantile\n");
      EXPECT_EQ(t.rows.size(), 4u);
    }
  EXPECT_TRUE(found);
}
