#pragma once

#include <Eigen/Dense>

namespace gridprobe::lp {

/// Feasibility of { x >= 0 : A_eq x = b_eq, A_ub x <= b_ub }.
struct FeasibilityProblem {
  Eigen::MatrixXd a_eq;
  Eigen::VectorXd b_eq;
  Eigen::MatrixXd a_ub;
  Eigen::VectorXd b_ub;

  Eigen::Index variables() const { return std::max(a_eq.cols(), a_ub.cols()); }
};

enum class Status { feasible, infeasible, numerical_failure };

struct FeasibilityResult {
  Status status = Status::numerical_failure;
  double infeasibility = 0.0;  // optimal phase-1 objective (total violation)
  Eigen::VectorXd x;
  int iterations = 0;
};

struct SimplexOptions {
  double feasibility_tolerance = 1e-8;
  double pivot_tolerance = 1e-11;
  int max_iterations = 50000;
};

/// Phase-1 simplex: minimizes the sum of artificial variables over the
/// constraint set. Feasible iff that minimum is within the tolerance.
FeasibilityResult solve_phase1(const FeasibilityProblem& problem, const SimplexOptions& options = {});

}  // namespace gridprobe::lp
