#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "gridprobe/acpf.hpp"
#include "gridprobe/feeder.hpp"
#include "gridprobe/scenario.hpp"

namespace testing {

using namespace gridprobe;

inline std::string data_path(const std::string& rel) { return std::string(GRIDPROBE_DATA_DIR) + "/" + rel; }

inline FeederModel bundled_feeder() { return FeederModel::load(data_path("feeder34.json")); }

inline Scenario bundled_scenario(const std::string& name) {
  return build_scenario(ScenarioConfig::load(data_path("scenarios/" + name + ".json")));
}

/// Random radial feeder: bus k > 0 hangs off a uniformly chosen earlier bus.
inline FeederModel random_tree(int n, std::uint64_t seed, double shunt = 0.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> imp(0.005, 0.05);
  std::uniform_real_distribution<double> b(0.0, shunt);
  std::vector<Bus> buses{{"s", true}};
  std::vector<Line> lines;
  for (int k = 1; k <= n; ++k) {
    buses.push_back({"b" + std::to_string(k), false});
    const int parent = std::uniform_int_distribution<int>(0, k - 1)(rng);
    const std::string from = parent == 0 ? "s" : "b" + std::to_string(parent);
    lines.push_back({from, buses.back().id, imp(rng), imp(rng), shunt > 0.0 ? b(rng) : 0.0});
  }
  return FeederModel(buses, lines);
}

inline FeederModel two_bus(double r, double x) {
  return FeederModel({{"s", true}, {"b", false}}, {{"s", "b", r, x, 0.0}});
}

inline BusState random_state(int n, std::mt19937_64& rng, double spread = 0.05, double angle = 0.03) {
  std::uniform_real_distribution<double> du(1.0 - spread, 1.0 + spread);
  std::uniform_real_distribution<double> dt(-angle, angle);
  BusState s;
  s.u.resize(n);
  s.theta.resize(n);
  for (int i = 0; i < n; ++i) {
    s.u(i) = du(rng);
    s.theta(i) = dt(rng);
  }
  return s;
}

/// Every other non-substation bus non-metered, the rest probing.
inline ProbingSetup alternating_setup(const FeederModel& feeder, int horizon, DataMode mode,
                                      int max_non_metered = 1 << 30) {
  ProbingSetup setup;
  setup.horizon = horizon;
  setup.mode = mode;
  for (int n = 0; n < feeder.size(); ++n) {
    if (n % 2 == 1 && setup.non_metered_count() < max_non_metered) setup.non_metered.push_back(n);
    else setup.probing.push_back(n);
  }
  return setup;
}

inline double max_abs(const Eigen::MatrixXd& m) { return m.size() ? m.cwiseAbs().maxCoeff() : 0.0; }

}  // namespace testing
