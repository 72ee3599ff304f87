#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "gridprobe/harness.hpp"
#include "gridprobe/scenario.hpp"
#include "support.hpp"

using namespace gridprobe;

namespace {

constexpr double kExact = std::numeric_limits<double>::infinity();

double sorted_percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q / 100.0 * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] * (1.0 - (pos - lo)) + v[hi] * (pos - lo);
}

}  // namespace

TEST_CASE("percentiles interpolate linearly") {
  CHECK(percentile({1.0, 2.0, 3.0, 4.0, 5.0}, 50.0) == 3.0);
  CHECK(percentile({4.0, 1.0, 3.0, 2.0}, 50.0) == 2.5);
  CHECK(percentile({0.0, 10.0}, 10.0) == doctest::Approx(1.0));
  CHECK(std::isnan(median({})));
  CHECK(median({1.0, kExact, kExact}) == kExact);
}

TEST_CASE("scenario config round trip and overrides") {
  const ScenarioConfig cfg = ScenarioConfig::load(testing::data_path("scenarios/probing_t4.json"));
  CHECK(cfg.horizon == 4);
  CHECK(cfg.mode == DataMode::phasor);
  CHECK(cfg.non_metered.size() == 8u);
  const ScenarioConfig again = ScenarioConfig::from_json(cfg.to_json());
  CHECK(again.non_metered == cfg.non_metered);
  CHECK(again.snr_loads_db == cfg.snr_loads_db);
  CHECK(again.gamma == cfg.gamma);

  const Scenario sc = build_scenario(cfg);
  CHECK(sc.setup.non_metered_count() == 8);
  CHECK((sc.box.lower.array() <= sc.box.upper.array()).all());
  // Net injections of pure loads are non-positive.
  CHECK(sc.s_o.maxCoeff() <= 0.0);

  const Scenario two = with_setup(sc, 2, DataMode::nonphasor);
  CHECK(two.setup.non_metered == sc.setup.non_metered);
  CHECK(two.setup.horizon == 2);

  ScenarioConfig bad = cfg;
  bad.non_metered.push_back("999");
  CHECK_THROWS(build_scenario(bad));
}

TEST_CASE("synthetic load profiles peak at the requested level") {
  const LoadProfile profile = synthetic_profile({"a", "b", "c"}, 96, 0.5, 0.9, 3);
  CHECK(profile.intervals() == 96);
  CHECK(profile.active.maxCoeff() == doctest::Approx(0.5));
  CHECK(profile.active.minCoeff() >= 0.0);
  const double ratio = profile.reactive(10, 1) / profile.active(10, 1);
  CHECK(ratio == doctest::Approx(std::tan(std::acos(0.9))));
}

TEST_CASE("random state sequences respect their ranges") {
  const StateSequence seq = random_states(20, 3, 0.9, 1.1, 1.5, 4);
  REQUIRE(seq.size() == 3u);
  for (const auto& s : seq) {
    CHECK(s.u.minCoeff() >= 0.9);
    CHECK(s.u.maxCoeff() <= 1.1);
    CHECK(s.theta.cwiseAbs().maxCoeff() <= 1.5 * M_PI / 180.0);
  }
}

TEST_CASE("condition study without non-metered buses is finite at one slot") {
  ScenarioConfig cfg = ScenarioConfig::load(testing::data_path("scenarios/probing_t4.json"));
  const Scenario base = build_scenario(cfg);
  cfg.probing = base.feeder.bus_ids();
  cfg.non_metered.clear();
  cfg.horizon = 1;
  const Scenario sc = build_scenario(cfg);
  ConditionStudyOptions opts;
  opts.trials = 20;
  opts.horizons = {1};
  const ConditionStudy study = run_condition_study(sc, opts);
  CHECK(study.values.rows() == 20);
  CHECK(study.values.allFinite());
}

TEST_CASE("condition study shares states across columns and is deterministic") {
  const Scenario sc = testing::bundled_scenario("probing_t4");
  ConditionStudyOptions opts;
  opts.trials = 30;
  const ConditionStudy a = run_condition_study(sc, opts);
  opts.threads = 1;
  const ConditionStudy b = run_condition_study(sc, opts);
  CHECK(a.values == b.values);
  CHECK(a.columns.size() == 4u);
  CHECK(a.median_of(4, DataMode::phasor) < a.median_of(4, DataMode::nonphasor));
}

TEST_CASE("violation sweep trends") {
  const Scenario sc = testing::bundled_scenario("probing_t4");
  const std::vector<double> gammas{2.0, 4.0, 8.0};
  const std::vector<VoltageBand> bands{{0.95, 1.05}, {0.9, 1.1}, {0.5, 1.5}};
  const auto cells = run_violation_sweep(sc, gammas, bands);
  REQUIRE(cells.size() == 9u);
  // Cells run band by band, gamma fastest.
  const auto cell = [&](std::size_t g, std::size_t b) { return cells[b * gammas.size() + g]; };
  double lowest = 100.0;
  for (const auto& c : cells) lowest = std::min(lowest, c.percent);
  CHECK(cell(2, 2).percent == lowest);
  for (std::size_t g = 0; g < gammas.size(); ++g) {
    // A band covering every reachable voltage admits everything.
    CHECK(cell(g, 2).percent == 0.0);
    CHECK(cell(g, 1).percent <= cell(g, 0).percent);
  }
  for (std::size_t b = 0; b < bands.size(); ++b) {
    CHECK(cell(1, b).percent <= cell(0, b).percent);
    CHECK(cell(2, b).percent <= cell(1, b).percent);
  }
}

TEST_CASE("zero-noise Monte Carlo control trial recovers the loads") {
  const Scenario sc = testing::bundled_scenario("probing_t4");
  MonteCarloOptions opts;
  opts.trials = 2;
  opts.snr_metered_db = kExact;
  opts.snr_loads_db = kExact;
  const MonteCarloReport report = run_p2l_montecarlo(sc, opts);
  REQUIRE(report.records.size() == 2u);
  for (const auto& r : report.records) {
    REQUIRE(r.ok);
    CHECK(r.active_percent.cwiseAbs().maxCoeff() < 1e-4);
    CHECK(r.reactive_percent.cwiseAbs().maxCoeff() < 1e-4);
  }
}

TEST_CASE("Monte Carlo aggregates recompute from the records and ignore thread count") {
  const Scenario sc = testing::bundled_scenario("probing_t4");
  MonteCarloOptions opts;
  opts.trials = 4;
  opts.threads = 1;
  const MonteCarloReport serial = run_p2l_montecarlo(sc, opts);
  opts.threads = 3;
  const MonteCarloReport pooled = run_p2l_montecarlo(sc, opts);
  REQUIRE(serial.records.size() == 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(serial.records[i].seed == pooled.records[i].seed);
    CHECK(serial.records[i].rmse == pooled.records[i].rmse);
    CHECK(serial.records[i].estimated_loads == pooled.records[i].estimated_loads);
  }

  std::vector<double> active, rmse;
  int failures = 0;
  for (const auto& r : serial.records) {
    if (!r.ok) {
      ++failures;
      continue;
    }
    rmse.push_back(r.rmse);
    for (Eigen::Index i = 0; i < r.active_percent.size(); ++i) {
      if (!std::isnan(r.active_percent(i))) active.push_back(r.active_percent(i));
    }
  }
  const MonteCarloSummary s = serial.summary();
  CHECK(s.trials == 4);
  CHECK(s.failures == failures);
  CHECK(s.median_rmse == doctest::Approx(sorted_percentile(rmse, 50.0)));
  CHECK(s.active_p10 == doctest::Approx(sorted_percentile(active, 10.0)));
  CHECK(s.active_interdecile ==
        doctest::Approx(sorted_percentile(active, 90.0) - sorted_percentile(active, 10.0)));
}

TEST_CASE("trial loads are drawn inside the box") {
  const Scenario sc = testing::bundled_scenario("probing_t4");
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const Eigen::VectorXd s = trial_loads(sc, seed);
    CHECK((s.array() >= sc.box.lower.array()).all());
    CHECK((s.array() <= sc.box.upper.array()).all());
  }
  CHECK(trial_loads(sc, 3) == trial_loads(sc, 3));
}

TEST_CASE("design conditioning rows") {
  const Scenario sc = testing::bundled_scenario("probing_t4");
  const auto rows = run_design_conditioning(sc, 1, 20, 1);
  REQUIRE(rows.size() == 1u);
  CHECK(rows[0].random.size() == 20u);
  CHECK(std::isfinite(rows[0].designed));
  CHECK(rows[0].random_p10 <= rows[0].random_median);
  CHECK(rows[0].beats_random() == (rows[0].designed <= rows[0].random_p10));
}
