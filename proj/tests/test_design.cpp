#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "gridprobe/design.hpp"
#include "gridprobe/harness.hpp"
#include "support.hpp"

using namespace gridprobe;
using testing::random_tree;

namespace {

DistanceMatrix from_states(const Eigen::MatrixXd& y) {
  DistanceMatrix dist;
  const Eigen::Index l = y.cols();
  dist.y_tilde = y;
  dist.c = y.colwise().squaredNorm().transpose();
  dist.d.resize(l, l);
  for (Eigen::Index i = 0; i < l; ++i) {
    for (Eigen::Index j = 0; j < l; ++j) dist.d(i, j) = (y.col(i) - y.col(j)).squaredNorm();
  }
  return dist;
}

DistanceMatrix random_distances(int l, std::mt19937_64& rng, int dim = 6) {
  std::normal_distribution<double> g(0.0, 1.0);
  return from_states(Eigen::MatrixXd::NullaryExpr(dim, l, [&] { return g(rng); }));
}

// Maximizing a concave f over {0 <= x <= 1, sum x = T}: some mu has
// g_i = mu on free entries, g_i <= mu where x_i = 0 and g_i >= mu where x_i = 1.
double kkt_violation(const Eigen::VectorXd& x, const Eigen::VectorXd& g, double active = 1e-7) {
  double lo = -INFINITY, hi = INFINITY;  // feasible range of mu
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    if (x(i) <= active) lo = std::max(lo, g(i));
    else if (x(i) >= 1.0 - active) hi = std::min(hi, g(i));
    else {
      lo = std::max(lo, g(i));
      hi = std::min(hi, g(i));
    }
  }
  const double scale = std::max(1.0, g.cwiseAbs().maxCoeff());
  return std::max(0.0, lo - hi) / scale;
}

Eigen::VectorXd objective_gradient(const DistanceMatrix& dist, const Eigen::VectorXd& x, int horizon) {
  return 2.0 * horizon * dist.c - 4.0 * dist.y_tilde.transpose() * (dist.y_tilde * x);
}

bool vertex_oracle(const Eigen::VectorXd& s_m, const LdfModel& ldf, const LoadUncertainty& box,
                   const VoltageBand& band) {
  const Eigen::Index o2 = box.lower.size();
  const Eigen::VectorXd base =
      Eigen::VectorXd::Constant(ldf.buses(), ldf.base_voltage) + ldf.magnitude_offset() + ldf.k * s_m;
  for (long mask = 0; mask < (1L << o2); ++mask) {
    Eigen::VectorXd s_o(o2);
    for (Eigen::Index j = 0; j < o2; ++j) s_o(j) = (mask >> j) & 1 ? box.upper(j) : box.lower(j);
    const Eigen::VectorXd u = base + ldf.l * s_o;
    if (u.minCoeff() < band.lower || u.maxCoeff() > band.upper) return false;
  }
  return true;
}

Eigen::VectorXd uniform(Eigen::Index n, double lo, double hi, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> d(lo, hi);
  return Eigen::VectorXd::NullaryExpr(n, [&] { return d(rng); });
}

}  // namespace

TEST_CASE("sampled devices respect their limits") {
  const FeederModel f = random_tree(4, 1);
  const ProbingSetup setup{{0, 1}, {2, 3}, 2, DataMode::phasor};
  InverterFleet fleet;
  fleet.buses.push_back({0, {}, -0.1, -0.05});
  for (int k = 0; k < 5; ++k) fleet.buses[0].inverters.push_back({InverterClass::storage, 0.3, 0.2});
  fleet.buses.push_back({1, {}, 0.0, 0.0});
  for (int k = 0; k < 5; ++k) fleet.buses[1].inverters.push_back({InverterClass::solar, 0.25, 0.1});
  fleet.buses[1].inverters.push_back({InverterClass::solar, 0.2, 0.0});

  const CandidateLibrary lib = sample_library(setup, fleet, 10000, 3);
  REQUIRE(lib.size() == 10000);
  long draws = 0;
  bool q_spread_low = false, q_spread_high = false;
  for (int k = 0; k < lib.size(); ++k) {
    CHECK(satisfies_device_limits(setup, fleet, lib.candidates[k], lib.devices[k]));
    const Eigen::MatrixXd& dev = lib.devices[k];
    for (Eigen::Index r = 0; r < dev.rows(); ++r, ++draws) {
      const Inverter& inv = r < 5 ? fleet.buses[0].inverters[r] : fleet.buses[1].inverters[r - 5];
      const double p = dev(r, 0), q = dev(r, 1);
      if (p * p + q * q > inv.capacity * inv.capacity + 1e-12) FAIL("apparent power exceeded");
      if (inv.kind == InverterClass::solar && (p < 0.0 || p > inv.p_max)) FAIL("solar p out of range");
      if (inv.kind == InverterClass::storage && std::abs(p) > inv.p_max) FAIL("storage p out of range");
    }
    // The zero-availability solar device only moves q.
    CHECK(dev(10, 0) == 0.0);
    q_spread_low |= dev(10, 1) < -0.19;
    q_spread_high |= dev(10, 1) > 0.19;
  }
  CHECK(draws == 110000);
  CHECK(q_spread_low);
  CHECK(q_spread_high);

  Eigen::MatrixXd tampered = lib.devices[0];
  tampered(0, 0) = 0.5;
  CHECK_FALSE(satisfies_device_limits(setup, fleet, lib.candidates[0], tampered));
}

TEST_CASE("library sampling is deterministic") {
  const Scenario sc = testing::bundled_scenario("probing_t4");
  CHECK(sc.config.candidates == 100);
  CHECK(sc.config.p_max == doctest::Approx(0.2));
  const CandidateLibrary a = sample_library(sc.setup, sc.fleet, sc.config.candidates, 5);
  const CandidateLibrary b = sample_library(sc.setup, sc.fleet, sc.config.candidates, 5);
  const CandidateLibrary c = sample_library(sc.setup, sc.fleet, sc.config.candidates, 6);
  CHECK(a.size() == 100);
  for (int k = 0; k < a.size(); ++k) CHECK(a.candidates[k] == b.candidates[k]);
  CHECK(a.candidates[0] != c.candidates[0]);
}

TEST_CASE("compliance without non-metered buses is a direct voltage check") {
  const FeederModel f = random_tree(6, 9);
  ProbingSetup setup{{0, 1, 2, 3, 4, 5}, {}, 1, DataMode::phasor};
  const LdfModel ldf = build_ldf(f, setup);
  const LoadUncertainty empty{Eigen::VectorXd(), Eigen::VectorXd()};
  std::mt19937_64 rng(1);
  int agree = 0, compliant = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const Eigen::VectorXd s = uniform(12, -0.4, 0.4, rng);
    const VoltageBand band{0.99, 1.01};
    const Eigen::VectorXd u = Eigen::VectorXd::Ones(6) + ldf.k * s;
    const bool direct = u.minCoeff() >= band.lower && u.maxCoeff() <= band.upper;
    const bool lp = is_network_compliant(s, ldf, empty, band);
    agree += direct == lp;
    compliant += lp;
  }
  CHECK(agree == 100);
  CHECK(compliant > 0);
  CHECK(compliant < 100);
}

TEST_CASE("compliance on a point box is a direct voltage check") {
  const FeederModel f = random_tree(7, 21);
  const ProbingSetup setup = testing::alternating_setup(f, 2, DataMode::phasor);
  const LdfModel ldf = build_ldf(f, setup);
  std::mt19937_64 rng(2);
  int agree = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const Eigen::VectorXd s = uniform(ldf.k.cols(), -0.4, 0.4, rng);
    const Eigen::VectorXd load = uniform(ldf.l.cols(), -0.3, 0.0, rng);
    const LoadUncertainty box{load, load};
    const VoltageBand band{0.985, 1.015};
    const Eigen::VectorXd u = Eigen::VectorXd::Ones(f.size()) + ldf.k * s + ldf.l * load;
    const bool direct = u.minCoeff() >= band.lower && u.maxCoeff() <= band.upper;
    agree += direct == is_network_compliant(s, ldf, box, band);
  }
  CHECK(agree == 100);
}

TEST_CASE("Farkas LP agrees with vertex enumeration") {
  std::mt19937_64 rng(2024);
  int disagreements = 0, compliant = 0, full_route_mismatch = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const int o = 1 + trial % 4;
    const FeederModel f = random_tree(o + 3 + trial % 3, 500 + trial, 0.005);
    ProbingSetup setup;
    setup.horizon = 2;
    setup.mode = DataMode::phasor;
    for (int n = 0; n < f.size(); ++n) (n < o ? setup.non_metered : setup.probing).push_back(n);
    const LdfModel ldf = build_ldf(f, setup);
    const Eigen::VectorXd s = uniform(ldf.k.cols(), -0.3, 0.3, rng);
    const Eigen::VectorXd center = uniform(2 * o, -0.3, 0.0, rng);
    const Eigen::VectorXd half = uniform(2 * o, 0.0, 0.15, rng);
    const LoadUncertainty box{center - half, center + half};
    std::uniform_real_distribution<double> width(0.005, 0.06);
    const VoltageBand band{1.0 - width(rng), 1.0 + width(rng)};

    const Compliance verdict = check_compliance(s, ldf, box, band);
    REQUIRE(verdict != Compliance::solver_failure);
    const bool lp = verdict == Compliance::compliant;
    disagreements += lp != vertex_oracle(s, ldf, box, band);
    compliant += lp;

    const lp::FeasibilityResult whole = lp::solve_phase1(farkas_problem(s, ldf, box, band));
    full_route_mismatch += (whole.status == lp::Status::feasible) != lp;
  }
  CHECK(disagreements == 0);
  CHECK(full_route_mismatch == 0);
  // Both verdicts must be well represented for the comparison to mean anything.
  CHECK(compliant >= 40);
  CHECK(compliant <= 160);
}

TEST_CASE("compliance is monotone in the band and the box") {
  const Scenario sc = testing::bundled_scenario("probing_t4");
  const LdfModel ldf = build_ldf(sc.feeder, sc.setup);
  const CandidateLibrary lib = sample_library(sc.setup, sc.fleet, 60, 4);
  const LoadUncertainty narrow = LoadUncertainty::around(sc.s_o, 8.0);
  const LoadUncertainty wide = LoadUncertainty::around(sc.s_o, 2.0);
  const VoltageBand tight{0.97, 1.03}, loose{0.95, 1.05};
  for (const auto& s : lib.candidates) {
    if (is_network_compliant(s, ldf, wide, tight)) {
      CHECK(is_network_compliant(s, ldf, wide, loose));
      CHECK(is_network_compliant(s, ldf, narrow, tight));
    }
  }
}

TEST_CASE("reduce_library keeps compliant candidates") {
  const Scenario sc = testing::bundled_scenario("probing_t4");
  const LdfModel ldf = build_ldf(sc.feeder, sc.setup);
  CandidateLibrary zeros;
  for (int k = 0; k < 5; ++k) {
    zeros.candidates.push_back(Eigen::VectorXd::Zero(2 * sc.setup.probing_count()));
    zeros.origin.push_back(k);
    zeros.devices.push_back(Eigen::MatrixXd::Zero(sc.setup.probing_count(), 2));
  }
  const ReducedLibrary kept = reduce_library(zeros, ldf, sc.box, sc.config.band, 4);
  CHECK(kept.library.size() == 5);
  CHECK(kept.screening.violation_percent() == 0.0);

  const VoltageBand impossible{0.9999, 1.0001};
  CHECK_THROWS_AS(reduce_library(zeros, ldf, sc.box, impossible, 4), InsufficientCandidatesError);

  std::vector<double> percents;
  const CandidateLibrary lib = sample_library(sc.setup, sc.fleet, 60, 9);
  for (double gamma : {1.5, 3.0, 6.0, 12.0}) {
    const ScreeningResult r =
        screen_library(lib, ldf, LoadUncertainty::around(sc.s_o, gamma), VoltageBand{0.95, 1.05});
    percents.push_back(r.violation_percent());
  }
  for (std::size_t i = 1; i < percents.size(); ++i) CHECK(percents[i] <= percents[i - 1]);
}

TEST_CASE("distance matrix agrees with direct state differences") {
  const Scenario sc = testing::bundled_scenario("probing_t4");
  const LdfModel ldf = build_ldf(sc.feeder, sc.setup);
  CandidateLibrary lib = sample_library(sc.setup, sc.fleet, 12, 2);
  lib.candidates.push_back(lib.candidates[3]);
  lib.origin.push_back(99);
  lib.devices.push_back(lib.devices[3]);
  const DistanceMatrix dist = distance_matrix(lib, ldf);
  const Eigen::MatrixXd response = ldf.probing_response();
  const int l = dist.size();
  for (int i = 0; i < l; ++i) {
    CHECK(dist.d(i, i) == 0.0);
    for (int j = 0; j < l; ++j) {
      CHECK(dist.d(i, j) == dist.d(j, i));
      CHECK(dist.d(i, j) >= 0.0);
      const double direct = (response * (lib.candidates[i] - lib.candidates[j])).squaredNorm();
      CHECK(std::abs(dist.d(i, j) - direct) <= 1e-12 * std::max(1.0, direct) + 1e-18);
    }
    CHECK(dist.c(i) == doctest::Approx((response * lib.candidates[i]).squaredNorm()).epsilon(1e-12));
  }
  CHECK(dist.d(3, l - 1) == 0.0);
}

TEST_CASE("diversity identity holds on random subsets") {
  std::mt19937_64 rng(77);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int l = 5 + trial % 20;
    const int horizon = 1 + trial % std::min(l, 6);
    const DistanceMatrix dist = random_distances(l, rng);
    std::vector<int> idx(l);
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(horizon);
    std::sort(idx.begin(), idx.end());
    Eigen::VectorXd x = Eigen::VectorXd::Zero(l);
    for (int i : idx) x(i) = 1.0;
    const double quadratic = x.dot(dist.d * x);
    const double concave = relaxed_objective(dist, x, horizon);
    CHECK(diversity(dist, idx) == doctest::Approx(quadratic).epsilon(1e-12));
    worst = std::max(worst, std::abs(quadratic - concave) / std::max(1.0, std::abs(quadratic)));
  }
  CHECK(worst <= 1e-9);
}

TEST_CASE("exhaustive search edge cases") {
  std::mt19937_64 rng(5);
  const DistanceMatrix dist = random_distances(6, rng);
  const Selection all = msd_exhaustive(dist, 6);
  CHECK(all.indices == std::vector<int>{0, 1, 2, 3, 4, 5});
  CHECK(all.value == doctest::Approx(dist.d.sum()));

  Eigen::Index r = 0, c = 0;
  dist.d.maxCoeff(&r, &c);
  const Selection pair = msd_exhaustive(dist, 2);
  CHECK(pair.indices == std::vector<int>{static_cast<int>(std::min(r, c)), static_cast<int>(std::max(r, c))});

  Eigen::MatrixXd line(3, 3);
  const Eigen::Vector3d e(0.3, -0.1, 0.2);
  line << 0.0 * e, 1.0 * e, 2.0 * e;
  const DistanceMatrix collinear = from_states(line);
  const Selection ends = msd_exhaustive(collinear, 2);
  CHECK(ends.indices == std::vector<int>{0, 2});
  CHECK(ends.value == doctest::Approx(2.0 * 4.0 * e.squaredNorm()));

  // Ties go to the lexicographically smallest set.
  const DistanceMatrix ties = from_states(Eigen::MatrixXd::Identity(4, 4));
  CHECK(msd_exhaustive(ties, 2).indices == std::vector<int>{0, 1});

  CHECK_THROWS_AS(msd_exhaustive(random_distances(40, rng), 10, 1e6), SearchLimitError);
}

TEST_CASE("capped simplex projection") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g(0.0, 2.0);
  for (int trial = 0; trial < 200; ++trial) {
    const int l = 3 + trial % 10;
    const double total = 1 + trial % (l - 1);
    const Eigen::VectorXd z = Eigen::VectorXd::NullaryExpr(l, [&] { return g(rng); });
    const Eigen::VectorXd x = project_capped_simplex(z, total);
    CHECK(x.sum() == doctest::Approx(total).epsilon(1e-12));
    CHECK(x.minCoeff() >= 0.0);
    CHECK(x.maxCoeff() <= 1.0);
    // Projection optimality: (z - x) is in the normal cone at x.
    CHECK(kkt_violation(x, z - x, 1e-12) <= 1e-12);
  }
}

TEST_CASE("relaxation bounds the exhaustive optimum and satisfies KKT") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 60; ++trial) {
    const int l = 6 + trial % 7;
    const int horizon = 2 + trial % 3;
    const DistanceMatrix dist = random_distances(l, rng);
    const Relaxation relax = msd_relax(dist, horizon);
    const Selection best = msd_exhaustive(dist, horizon);
    CHECK(relax.x.sum() == doctest::Approx(horizon).epsilon(1e-12));
    CHECK(relax.x.minCoeff() >= 0.0);
    CHECK(relax.x.maxCoeff() <= 1.0);
    CHECK(relax.value >= best.value);
    CHECK(relax.kkt_residual <= 1e-6);
    if (l == 12 && horizon == 4) {
      CHECK(kkt_violation(relax.x, objective_gradient(dist, relax.x, horizon)) <= 1e-6);
    }
  }
  for (int trial = 0; trial < 20; ++trial) {
    const DistanceMatrix dist = random_distances(12, rng);
    const Relaxation relax = msd_relax(dist, 4);
    CHECK(kkt_violation(relax.x, objective_gradient(dist, relax.x, 4)) <= 1e-6);
  }
  const DistanceMatrix square = random_distances(4, rng);
  CHECK(msd_relax(square, 4).x == Eigen::VectorXd::Ones(4));
}

TEST_CASE("rounding draws have mean (1 - beta) T") {
  std::mt19937_64 rng(11);
  const int horizon = 4;
  Eigen::VectorXd x_hat = uniform(12, 0.0, 1.0, rng);
  x_hat = project_capped_simplex(x_hat, horizon);
  const double beta = 0.1;
  const int draws = 10000;
  double sum = 0.0, sum_sq = 0.0;
  for (int k = 0; k < draws; ++k) {
    const double size = static_cast<double>(rounding_draw(x_hat, beta, rng).size());
    sum += size;
    sum_sq += size * size;
  }
  const double mean = sum / draws;
  const double se = std::sqrt((sum_sq / draws - mean * mean) / draws);
  CHECK(std::abs(mean - (1.0 - beta) * horizon) <= 3.0 * se);
}

TEST_CASE("rounding an integral point returns its support") {
  std::mt19937_64 rng(12);
  const DistanceMatrix dist = random_distances(8, rng);
  Eigen::VectorXd x = Eigen::VectorXd::Zero(8);
  x(1) = x(4) = x(6) = 1.0;
  const Selection sel = randomized_rounding(x, dist, 3, 0.0, 5, 1);
  CHECK(sel.indices == std::vector<int>{1, 4, 6});
  CHECK_FALSE(sel.repaired);
  CHECK(sel.value == doctest::Approx(diversity(dist, {1, 4, 6})));
}

TEST_CASE("rounding repairs when no draw has the right size") {
  std::mt19937_64 rng(13);
  const DistanceMatrix dist = random_distances(8, rng);
  const Eigen::VectorXd x = Eigen::VectorXd::Constant(8, 0.5);
  const Selection sel = randomized_rounding(x, dist, 4, 1.0, 3, 1);
  CHECK(sel.repaired);
  CHECK(sel.indices.size() == 4u);
}

TEST_CASE("relaxation plus rounding stays close to the exhaustive optimum") {
  std::mt19937_64 rng(31);
  int good = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const int l = 6 + trial % 7;
    const int horizon = 2 + trial % 3;
    const DistanceMatrix dist = random_distances(l, rng);
    const Relaxation relax = msd_relax(dist, horizon);
    const Selection sel = randomized_rounding(relax.x, dist, horizon, 0.1, 100, 1000 + trial);
    const Selection best = msd_exhaustive(dist, horizon);
    CHECK(sel.indices.size() == static_cast<std::size_t>(horizon));
    good += sel.value >= 0.75 * best.value;
  }
  CHECK(good >= 190);
}

TEST_CASE("rounding is deterministic for a seed") {
  std::mt19937_64 rng(14);
  const DistanceMatrix dist = random_distances(20, rng);
  const Relaxation relax = msd_relax(dist, 5);
  const Selection a = randomized_rounding(relax.x, dist, 5, 0.1, 50, 9);
  const Selection b = randomized_rounding(relax.x, dist, 5, 0.1, 50, 9);
  CHECK(a.indices == b.indices);
  CHECK(a.value == b.value);
}

TEST_CASE("pipeline on the bundled feeder yields compliant implementable probes") {
  const Scenario sc = testing::bundled_scenario("probing_t4");
  REQUIRE(sc.setup.horizon == 4);
  REQUIRE(sc.setup.non_metered_count() == 8);
  DesignOptions opts;
  opts.candidates = 100;
  opts.seed = 3;
  const ProbingDesign design =
      design_pipeline(sc.feeder, sc.setup, sc.fleet, sc.box, sc.config.band, opts);
  const LdfModel ldf = build_ldf(sc.feeder, sc.setup);
  REQUIRE(design.setpoints.size() == 4u);
  for (std::size_t t = 0; t < 4; ++t) {
    CHECK(is_network_compliant(design.setpoints[t], ldf, sc.box, sc.config.band));
    CHECK(satisfies_device_limits(sc.setup, sc.fleet, design.setpoints[t], design.device_setpoints[t]));
  }
  CHECK(design.report.library_size == 100);
  CHECK(design.report.selected.size() == 4u);

  const ProbingDesign again =
      design_pipeline(sc.feeder, sc.setup, sc.fleet, sc.box, sc.config.band, opts);
  for (std::size_t t = 0; t < 4; ++t) CHECK(again.setpoints[t] == design.setpoints[t]);

  opts.method = SelectionMethod::relaxation;
  const ProbingDesign relaxed =
      design_pipeline(sc.feeder, sc.setup, sc.fleet, sc.box, sc.config.band, opts);
  CHECK(relaxed.report.relaxation_bound >= relaxed.report.diversity);
}

TEST_CASE("one and two slot designs") {
  const Scenario base = testing::bundled_scenario("probing_t4");
  const LdfModel ldf = build_ldf(base.feeder, base.setup);
  DesignOptions opts;
  opts.seed = 4;

  ProbingSetup one = base.setup;
  one.horizon = 1;
  const ProbingDesign single = design_probes(ldf, one, base.fleet, base.box, base.config.band, opts);
  const DistanceMatrix dist = distance_matrix(single.reduced, ldf);
  Eigen::Index far = 0;
  dist.c.maxCoeff(&far);
  REQUIRE(single.setpoints.size() == 1u);
  CHECK(single.setpoints[0] == single.reduced.candidates[far]);

  ProbingSetup two = base.setup;
  two.horizon = 2;
  const ProbingDesign pair = design_probes(ldf, two, base.fleet, base.box, base.config.band, opts);
  const Selection best = msd_exhaustive(distance_matrix(pair.reduced, ldf), 2);
  CHECK(pair.report.selected == best.indices);
}
