#pragma once

#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "gridprobe/acpf.hpp"
#include "gridprobe/feeder.hpp"

namespace gridprobe {

class LdfError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Linear map from power injections to approximate voltage deviations,
///
///   [u - u0 1; theta] = offset + [K L; Mtheta Ntheta] [s_M; s_O],
///
/// with s_M = [p_M; q_M] and s_O = [p_O; q_O] stacked in the bus order of
/// the probing setup. `offset` is zero when linearizing about the flat
/// profile of a feeder without shunts.
struct LdfModel {
  Eigen::MatrixXd k;        // N x 2M
  Eigen::MatrixXd l;        // N x 2O
  Eigen::MatrixXd m_theta;  // N x 2M
  Eigen::MatrixXd n_theta;  // N x 2O
  Eigen::VectorXd offset;   // 2N
  std::vector<int> probing;
  std::vector<int> non_metered;
  double base_voltage = 1.0;

  int buses() const { return static_cast<int>(k.rows()); }

  /// y = [u - u0 1; theta] predicted for the given injections.
  Eigen::VectorXd approx_state(const Eigen::VectorXd& s_m, const Eigen::VectorXd& s_o) const;
  /// [K; Mtheta], the 2N x 2M response to probing injections.
  Eigen::MatrixXd probing_response() const;
  /// Predicted magnitudes shift u - u0 1 contributed by everything except s_O.
  Eigen::VectorXd magnitude_offset() const { return offset.head(buses()); }
};

/// Inverts the polar power-flow Jacobian at `reference` (flat profile when
/// null) and partitions the columns into probing and non-metered blocks.
LdfModel build_ldf(const FeederModel& feeder, const ProbingSetup& setup,
                   const BusState* reference = nullptr);

/// Stacks per-bus injections into s_M or s_O order for `buses`.
Eigen::VectorXd stack_injections(const Injections& s, const std::vector<int>& buses);
/// Scatters s_M and s_O back into full per-bus vectors.
Injections scatter_injections(int n, const ProbingSetup& setup, const Eigen::VectorXd& s_m,
                              const Eigen::VectorXd& s_o);

}  // namespace gridprobe
