#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "gridprobe/scenario.hpp"

namespace gridprobe {

/// Linear-interpolation percentile (q in [0, 100]) of the finite entries.
/// NaN when there are none.
double percentile(std::vector<double> values, double q);
double median(std::vector<double> values);

// ---------------------------------------------------------------------------
// Condition numbers of the probing Jacobian at random state sequences.

struct ConditionStudyOptions {
  int trials = 1000;
  std::vector<int> horizons{2, 4};
  std::vector<DataMode> modes{DataMode::nonphasor, DataMode::phasor};
  double u_lower = 0.9;
  double u_upper = 1.1;
  double angle_deg = 1.5;
  unsigned threads = 0;
};

struct ConditionStudy {
  std::vector<std::string> columns;  // "T<h>_<mode>"
  std::vector<int> horizons;
  std::vector<DataMode> modes;
  Eigen::MatrixXd values;            // trials x columns, +inf when singular

  int column(int horizon, DataMode mode) const;
  double median_of(int horizon, DataMode mode) const;
};

/// Every trial draws one state sequence of the largest horizon; a column
/// with horizon h uses its first h slots, so modes and horizons are
/// compared on the same states.
ConditionStudy run_condition_study(const Scenario& scenario, const ConditionStudyOptions& options);

// ---------------------------------------------------------------------------
// Rejected-candidate percentage over load-box and voltage-band grids.

struct ViolationCell {
  double gamma = 0.0;
  VoltageBand band;
  int candidates = 0;
  int violating = 0;
  int solver_failures = 0;
  double percent = 0.0;
};

/// One library (seeded from the scenario) is screened in every cell.
std::vector<ViolationCell> run_violation_sweep(const Scenario& scenario,
                                               const std::vector<double>& gammas,
                                               const std::vector<VoltageBand>& bands);

// ---------------------------------------------------------------------------
// Conditioning of designed setpoints against random compliant subsets.

struct DesignConditioning {
  int repetition = 0;
  std::uint64_t seed = 0;
  int reduced_size = 0;
  double designed = 0.0;
  std::vector<double> random;  // one per random subset
  double random_p10 = 0.0;
  double random_median = 0.0;

  /// Finite and no worse than the random 10th percentile.
  bool beats_random() const { return std::isfinite(designed) && designed <= random_p10; }
};

/// Jacobians are evaluated at the power-flow states the setpoints induce
/// under the nominal loads.
std::vector<DesignConditioning> run_design_conditioning(const Scenario& scenario, int repetitions,
                                                        int random_subsets, unsigned threads = 0);

// ---------------------------------------------------------------------------
// Monte Carlo probing and estimation.

struct MonteCarloOptions {
  bool msd = true;
  std::optional<DataMode> mode;
  std::optional<double> snr_metered_db;
  std::optional<double> snr_loads_db;
  std::optional<int> trials;
  unsigned threads = 0;
};

struct TrialRecord {
  int trial = 0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string failure;
  double rmse = 0.0;
  double condition = 0.0;  // at the true states
  double violation_percent = 0.0;
  int reduced_size = 0;
  double diversity = 0.0;
  int iterations = 0;
  bool converged = false;
  double objective = 0.0;
  Eigen::VectorXd true_loads;  // slot-averaged [p_O; q_O]
  Eigen::VectorXd estimated_loads;
  Eigen::VectorXd active_percent;
  Eigen::VectorXd reactive_percent;
  double design_seconds = 0.0;
  double estimate_seconds = 0.0;
};

struct MonteCarloSummary {
  int trials = 0;
  int failures = 0;
  double failure_rate = 0.0;
  double median_rmse = 0.0;
  double median_condition = 0.0;
  double active_p10 = 0.0;
  double active_p90 = 0.0;
  double active_interdecile = 0.0;
  double median_abs_active = 0.0;
  double median_abs_reactive = 0.0;
  double max_abs_active = 0.0;
  double max_abs_reactive = 0.0;
};

struct MonteCarloReport {
  Scenario scenario;
  MonteCarloOptions options;
  double snr_metered_db = 0.0;
  double snr_loads_db = 0.0;
  std::vector<TrialRecord> records;

  /// Aggregates over successful trials, pooling the per-bus errors.
  MonteCarloSummary summary() const;
};

/// Base non-metered injections of one trial: a uniform draw inside the load
/// box, or the nominal loads when the scenario disables the draw.
Eigen::VectorXd trial_loads(const Scenario& scenario, std::uint64_t seed);

/// Per trial: design probes (MSD or a random compliant subset), simulate
/// the induced states, meter them, estimate, score. Trial seeds derive
/// from the master seed, so results do not depend on the thread count.
MonteCarloReport run_p2l_montecarlo(const Scenario& scenario, const MonteCarloOptions& options);

// ---------------------------------------------------------------------------
// Report files.

std::string format_number(double value);

void write_condition_study(const ConditionStudy& study, const std::filesystem::path& dir);
void write_violation_sweep(const std::vector<ViolationCell>& cells, const std::filesystem::path& dir);
void write_design_conditioning(const std::vector<DesignConditioning>& rows,
                               const std::filesystem::path& dir);
void write_montecarlo(const MonteCarloReport& report, const std::filesystem::path& dir);
void write_design(const Scenario& scenario, const ProbingDesign& design,
                  const std::filesystem::path& dir);

/// meta.json: experiment name and description, scenario echo, seeds, build
/// information and the wall-clock figures kept out of the numeric reports.
void write_meta(const std::filesystem::path& dir, const std::string& experiment,
                const std::string& description, const Scenario& scenario,
                const nlohmann::json& extra = {});

}  // namespace gridprobe
