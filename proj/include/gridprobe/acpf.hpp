#pragma once

#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "gridprobe/feeder.hpp"

namespace gridprobe {

/// Voltage magnitudes (pu) and angles (rad) at the non-substation buses.
/// The substation is implicitly at (base_voltage, 0).
struct BusState {
  Eigen::VectorXd u;
  Eigen::VectorXd theta;

  static BusState flat(const FeederModel& feeder);
  /// Stacked [u; theta].
  Eigen::VectorXd stacked() const;
  static BusState from_stacked(const Eigen::VectorXd& x);
  /// Complex phasors u * exp(j theta).
  Eigen::VectorXcd phasors() const;
};

using StateSequence = std::vector<BusState>;

struct Injections {
  Eigen::VectorXd p;
  Eigen::VectorXd q;

  static Injections zero(int n);
  Eigen::VectorXd stacked() const;
};

/// Net active/reactive injections at the non-substation buses.
Injections injections(const FeederModel& feeder, const BusState& state);

/// Complex power drawn from the substation into the feeder.
std::complex<double> substation_injection(const FeederModel& feeder, const BusState& state);

/// d[p; q] / d[u; theta], a 2N x 2N matrix.
Eigen::MatrixXd injection_jacobian(const FeederModel& feeder, const BusState& state);

class PowerFlowError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PowerFlowOptions {
  double tolerance = 1e-10;
  int max_iterations = 50;
  int max_halvings = 10;
};

struct PowerFlowResult {
  BusState state;
  int iterations = 0;
  double residual = 0.0;
};

/// Newton-Raphson power flow with every non-substation bus a PQ bus.
/// Starts from the flat profile unless `init` is given; throws
/// PowerFlowError on non-convergence.
PowerFlowResult solve_pf(const FeederModel& feeder, const Injections& target,
                         const PowerFlowOptions& options = {},
                         const BusState* init = nullptr);

enum class RowKind { magnitude, angle, active, reactive, coupling_active, coupling_reactive };

struct RowLabel {
  RowKind kind;
  int bus;   // non-substation index
  int slot;  // for coupling rows: the earlier slot t of the (t, t+1) pair
};

/// Jacobian of the probing-to-learn equations with respect to the stacked
/// slot states [u_1; theta_1; ...; u_T; theta_T].
///
/// Per slot the metering rows are ordered magnitude, angle (phasor mode
/// only), active, reactive, each over the probing buses. The coupling rows
/// for all consecutive slot pairs follow after the last slot.
struct P2LJacobian {
  Eigen::MatrixXd matrix;
  std::vector<RowLabel> rows;
  int rows_per_slot = 0;
  int slots = 0;
  int buses = 0;

  int column_of(int slot, bool angle, int bus) const {
    return slot * 2 * buses + (angle ? buses : 0) + bus;
  }
};

int metering_rows_per_slot(const ProbingSetup& setup);

/// Values of the metering and coupling functions in the row order of
/// assemble_p2l_jacobian.
Eigen::VectorXd p2l_equations(const FeederModel& feeder, const ProbingSetup& setup,
                              const StateSequence& states);

P2LJacobian assemble_p2l_jacobian(const FeederModel& feeder, const ProbingSetup& setup,
                                  const StateSequence& states);

inline constexpr double kInfiniteCondition = std::numeric_limits<double>::infinity();

/// sigma_max / sigma_min; +inf when the matrix is column-rank deficient
/// (sigma_min < 1e-14 sigma_max, or fewer rows than columns).
double condition_number(const Eigen::MatrixXd& matrix);
inline double condition_number(const P2LJacobian& jacobian) {
  return condition_number(jacobian.matrix);
}

}  // namespace gridprobe
