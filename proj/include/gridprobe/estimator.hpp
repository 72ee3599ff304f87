#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "gridprobe/acpf.hpp"
#include "gridprobe/design.hpp"
#include "gridprobe/feeder.hpp"

namespace gridprobe {

/// Multiplicative noise level for a signal-to-noise ratio: x(1 + eps) with
/// eps ~ N(0, sigma^2), sigma = 10^(-snr/20). Infinite SNR gives sigma = 0.
double snr_to_sigma(double snr_db);

/// Probing data at the probing buses for one slot, each vector in the
/// order of ProbingSetup::probing. `theta` is empty without phasor data.
struct SlotData {
  Eigen::VectorXd u;
  Eigen::VectorXd theta;
  Eigen::VectorXd p;
  Eigen::VectorXd q;
};

struct MeasurementSet {
  DataMode mode = DataMode::nonphasor;
  std::vector<SlotData> values;
  std::vector<SlotData> sigma;  // absolute standard deviation per channel

  int slots() const { return static_cast<int>(values.size()); }
  void validate(const ProbingSetup& setup) const;
};

/// Relative noise used to derive channel scales when the data are exact;
/// channel scales must stay positive.
inline constexpr double kExactDataRelativeSigma = 1e-6;
/// Floor (pu) on the magnitude a relative noise scale is applied to.
inline constexpr double kScaleFloor = 1e-3;

/// Corrupts the probing-bus quantities of `states` as x(1 + eps).
MeasurementSet simulate_measurements(const FeederModel& feeder, const ProbingSetup& setup,
                                     const StateSequence& states, double snr_metered_db,
                                     std::uint64_t seed);

/// Per-slot non-metered injections (1 + eps_t) s_O, drawn independently per slot.
std::vector<Eigen::VectorXd> perturb_loads(const Eigen::VectorXd& s_o, int slots, double snr_db,
                                           std::uint64_t seed);

struct ProbingSimulation {
  StateSequence states;
  std::vector<Eigen::VectorXd> loads;  // true s_O per slot
  MeasurementSet measurements;
};

/// Ground truth for a probing run: perturb the loads, solve the power flow
/// for each slot under setpoint s_M^t, then meter the probing buses.
ProbingSimulation simulate_probing(const FeederModel& feeder, const ProbingSetup& setup,
                                   const std::vector<Eigen::VectorXd>& setpoints,
                                   const Eigen::VectorXd& nominal_loads, double snr_metered_db,
                                   double snr_loads_db, std::uint64_t seed);

enum class Penalty { squared, absolute };

std::string to_string(Penalty penalty);
Penalty parse_penalty(const std::string& text);

struct PenaltyConfig {
  Penalty metering = Penalty::squared;
  Penalty coupling = Penalty::squared;
  /// Per-row scale of the coupling slacks, 2O entries [p_O; q_O]. Empty
  /// selects coupling_relative_sigma times the box center (or kScaleFloor).
  Eigen::VectorXd coupling_sigma;
  double coupling_relative_sigma = 1e-3;
  std::optional<LoadUncertainty> load_box;
  std::vector<int> zero_injection_buses;  // non-substation indices, must be in O
  double absolute_smoothing = 1e-6;

  void validate(const ProbingSetup& setup) const;
};

class SingularJacobianError : public std::runtime_error {
 public:
  SingularJacobianError(const std::string& what, double condition)
      : std::runtime_error(what), condition_(condition) {}
  double condition() const { return condition_; }

 private:
  double condition_;
};

class EstimationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EstimationDiagnostics {
  double objective = 0.0;
  double gradient_norm = 0.0;  // share of the weighted residual in the Jacobian range
  double residual_norm = 0.0;  // max |h(x) - z| of the unweighted equations
  double metering_rms = 0.0;   // RMS of the scaled metering residuals
  double coupling_rms = 0.0;   // RMS of the scaled coupling residuals
  double condition = 0.0;      // of the equation Jacobian at the solution
  int iterations = 0;
  bool converged = false;
  std::string start;
};

struct LoadEstimate {
  std::vector<Eigen::VectorXd> per_slot;  // s_O = [p_O; q_O] per slot
  Eigen::VectorXd average;
  Eigen::VectorXd spread;  // max minus min across slots
};

struct EstimationResult {
  StateSequence states;
  LoadEstimate loads;
  EstimationDiagnostics diagnostics;

  nlohmann::json to_json(const FeederModel& feeder, const ProbingSetup& setup) const;
};

/// Non-metered injections implied by the estimated states, slot by slot.
LoadEstimate recover_loads(const FeederModel& feeder, const ProbingSetup& setup,
                           const StateSequence& states);

struct NoiselessOptions {
  double tolerance = 1e-8;
  int max_iterations = 50;
  double singular_condition = 1e12;
};

/// Gauss-Newton on the stacked metering and coupling equations. Throws
/// SingularJacobianError when the Jacobian loses column rank and
/// EstimationError when the residual does not reach the tolerance.
EstimationResult solve_noiseless(const FeederModel& feeder, const ProbingSetup& setup,
                                 const MeasurementSet& data, const StateSequence* init = nullptr,
                                 const NoiselessOptions& options = {});

/// Penalized probing-to-learn objective over the stacked slot states
/// x = [u_1; theta_1; ...; u_T; theta_T].
class P2LObjective {
 public:
  P2LObjective(const FeederModel& feeder, const ProbingSetup& setup, const MeasurementSet& data,
               const PenaltyConfig& config);

  int variables() const { return 2 * buses_ * slots_; }
  int residual_count() const { return static_cast<int>(penalty_.size()); }

  /// Scaled residuals (r_k / sigma_k) in a fixed row order.
  Eigen::VectorXd residuals(const Eigen::VectorXd& x) const;
  Eigen::MatrixXd jacobian(const Eigen::VectorXd& x) const;
  double value(const Eigen::VectorXd& x) const;
  Eigen::VectorXd gradient(const Eigen::VectorXd& x) const;

  /// IRLS weights for the current residuals; 1 for squared rows.
  Eigen::VectorXd irls_weights(const Eigen::VectorXd& r) const;
  double value_from_residuals(const Eigen::VectorXd& r) const;

  bool is_coupling_row(int row) const { return group_[row] == 1; }
  bool is_metering_row(int row) const { return group_[row] == 0; }

  StateSequence unstack(const Eigen::VectorXd& x) const;
  static Eigen::VectorXd stack(const StateSequence& states);

 private:
  const FeederModel& feeder_;
  const ProbingSetup& setup_;
  const MeasurementSet& data_;
  PenaltyConfig config_;
  int buses_;
  int slots_;
  double zero_sigma_ = 1.0;
  Eigen::VectorXd coupling_sigma_;
  std::vector<Penalty> penalty_;
  std::vector<int> group_;  // 0 metering, 1 coupling, 2 zero-injection, 3 load box
};

struct NoisyOptions {
  double gradient_tolerance = 1e-6;
  // Stop once an accepted step lowers the noise-normalized objective by
  // less than objective_tolerance * (1 + objective).
  double objective_tolerance = 1e-9;
  int max_iterations = 200;
  bool multi_start = true;
};

/// Local minimizer of the penalized objective by Levenberg-Marquardt
/// (IRLS for absolute-value penalties). Starts from `init` when given,
/// otherwise from the flat and LDF warm starts and keeps the better one.
EstimationResult estimate_noisy(const FeederModel& feeder, const ProbingSetup& setup,
                                const MeasurementSet& data, const PenaltyConfig& config,
                                const StateSequence* init = nullptr,
                                const NoisyOptions& options = {});

struct ErrorMetrics {
  double state_rmse = 0.0;
  Eigen::VectorXd active_percent;    // O entries; NaN where |p| is below the guard
  Eigen::VectorXd reactive_percent;  // O entries; NaN where |q| is below the guard
  Eigen::VectorXd active_absolute;
  Eigen::VectorXd reactive_absolute;
};

inline constexpr double kPercentGuard = 1e-6;

/// State RMSE over the rectangular phasors and per-bus load errors of the
/// slot-averaged estimate against the slot-averaged true loads.
ErrorMetrics error_metrics(const StateSequence& true_states,
                           const std::vector<Eigen::VectorXd>& true_loads,
                           const EstimationResult& estimate);

}  // namespace gridprobe
