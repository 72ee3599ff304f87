#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "gridprobe/design.hpp"
#include "gridprobe/estimator.hpp"
#include "gridprobe/feeder.hpp"

namespace gridprobe {

/// Active/reactive consumption (pu, positive = load) per interval and bus.
struct LoadProfile {
  std::vector<std::string> bus_ids;
  Eigen::MatrixXd active;    // intervals x buses
  Eigen::MatrixXd reactive;  // intervals x buses

  int intervals() const { return static_cast<int>(active.rows()); }
  int column_of(const std::string& id) const;
};

/// Residential-like daily curves: a base level with morning and evening
/// peaks, a per-bus time shift and scale, and multiplicative noise. The
/// largest active value over all buses and intervals equals `peak`.
LoadProfile synthetic_profile(const std::vector<std::string>& bus_ids, int intervals, double peak,
                              double power_factor, std::uint64_t seed);

/// Reads a CSV with an `interval` column followed by one column per bus
/// id holding active consumption in pu. A column `<id>:q` gives reactive
/// consumption; otherwise it follows from the lagging power factor.
LoadProfile read_profile_csv(const std::filesystem::path& path, double power_factor);

class ScenarioError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ScenarioConfig {
  std::filesystem::path feeder;
  // Explicit placement (bus ids) or a seeded random draw of `random_non_metered` buses.
  std::vector<std::string> probing;
  std::vector<std::string> non_metered;
  std::optional<int> random_non_metered;
  std::uint64_t placement_seed = 1;
  int horizon = 4;
  DataMode mode = DataMode::phasor;

  std::string fleet_class = "storage";  // storage | solar | mixed
  double capacity = 0.2;
  double p_max = 0.2;

  int candidates = 100;
  VoltageBand band{0.9, 1.1};
  std::optional<double> gamma;  // box (1 -+ 1/gamma) s_O
  double box_lower_factor = 0.0;
  double box_upper_factor = 2.0;

  double snr_metered_db = 80.0;
  double snr_loads_db = 60.0;
  Penalty penalty = Penalty::squared;
  bool use_load_box = true;
  bool loads_in_box = true;  // Monte Carlo truth drawn inside the box, else nominal
  std::vector<std::string> zero_injection;

  int trials = 100;
  std::uint64_t seed = 1;

  // Load data: synthetic generator unless `load_file` is set.
  std::filesystem::path load_file;
  int load_intervals = 96;
  int load_interval = 76;
  double load_peak = 0.5;
  double power_factor = 0.9;
  std::uint64_t load_seed = 7;

  // Experiment grids.
  std::vector<double> sweep_gammas{2.0, 4.0, 8.0, 16.0};
  std::vector<VoltageBand> sweep_bands{{0.95, 1.05}, {0.92, 1.08}, {0.9, 1.1}};
  std::vector<int> condition_horizons{2, 4};
  std::vector<double> snr_grid{40.0, 60.0, 80.0};

  static ScenarioConfig from_json(const nlohmann::json& doc,
                                  const std::filesystem::path& base_dir = {});
  static ScenarioConfig load(const std::filesystem::path& path);
  nlohmann::json to_json() const;
};

/// A scenario with every referenced file loaded and every set resolved.
struct Scenario {
  ScenarioConfig config;
  FeederModel feeder;
  ProbingSetup setup;
  InverterFleet fleet;
  Injections nominal;      // net injections (negative loads) at all buses
  Eigen::VectorXd s_o;     // nominal non-metered injections [p_O; q_O]
  LoadUncertainty box;
  std::vector<int> zero_injection;

  /// Penalty settings for estimation under the configured load noise.
  PenaltyConfig penalty_config() const;
};

Scenario build_scenario(const ScenarioConfig& config);

/// Same scenario with a different horizon or data mode; placement unchanged.
Scenario with_setup(const Scenario& base, int horizon, DataMode mode);

/// Uniform random state sequence: magnitudes in [u_lo, u_hi], angles in
/// [-angle_deg, angle_deg] degrees, independently per bus and slot.
StateSequence random_states(int buses, int slots, double u_lo, double u_hi, double angle_deg,
                            std::uint64_t seed);

}  // namespace gridprobe
