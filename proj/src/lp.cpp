#include "gridprobe/lp.hpp"

#include <cmath>
#include <limits>
#include <vector>

namespace gridprobe::lp {

FeasibilityResult solve_phase1(const FeasibilityProblem& problem, const SimplexOptions& options) {
  const Eigen::Index n = problem.variables();
  const Eigen::Index m_eq = problem.a_eq.rows();
  const Eigen::Index m_ub = problem.a_ub.rows();
  const Eigen::Index rows = m_eq + m_ub;
  if ((m_eq > 0 && problem.a_eq.cols() != n) || (m_ub > 0 && problem.a_ub.cols() != n) ||
      problem.b_eq.size() != m_eq || problem.b_ub.size() != m_ub) {
    throw std::invalid_argument("LP constraint dimensions are inconsistent");
  }

  FeasibilityResult result;
  result.x = Eigen::VectorXd::Zero(n);
  if (rows == 0) {
    result.status = Status::feasible;
    return result;
  }

  // Column layout: [x (n) | slacks (m_ub) | artificials (n_art) | rhs].
  std::vector<int> needs_artificial;
  for (Eigen::Index i = 0; i < m_eq; ++i) needs_artificial.push_back(static_cast<int>(i));
  for (Eigen::Index i = 0; i < m_ub; ++i) {
    if (problem.b_ub(i) < 0.0) needs_artificial.push_back(static_cast<int>(m_eq + i));
  }
  const Eigen::Index n_art = static_cast<Eigen::Index>(needs_artificial.size());
  const Eigen::Index art0 = n + m_ub;
  const Eigen::Index cols = art0 + n_art;

  Eigen::MatrixXd tab = Eigen::MatrixXd::Zero(rows + 1, cols + 1);
  std::vector<Eigen::Index> basis(rows, -1);
  if (m_eq > 0) {
    tab.topLeftCorner(m_eq, n) = problem.a_eq;
    tab.block(0, cols, m_eq, 1) = problem.b_eq;
  }
  if (m_ub > 0) {
    tab.block(m_eq, 0, m_ub, n) = problem.a_ub;
    tab.block(m_eq, n, m_ub, m_ub).setIdentity();
    tab.block(m_eq, cols, m_ub, 1) = problem.b_ub;
  }
  for (Eigen::Index i = 0; i < rows; ++i) {
    if (tab(i, cols) < 0.0) {
      tab.row(i).head(art0) *= -1.0;
      tab(i, cols) *= -1.0;
    }
  }
  for (Eigen::Index i = 0; i < m_ub; ++i) {
    if (problem.b_ub(i) >= 0.0) basis[m_eq + i] = n + i;
  }
  for (Eigen::Index a = 0; a < n_art; ++a) {
    const int r = needs_artificial[a];
    tab(r, art0 + a) = 1.0;
    basis[r] = art0 + a;
  }
  if (!tab.allFinite()) return result;

  // Objective row holds reduced costs of "minimize sum of artificials";
  // its rhs entry is minus the current objective value.
  Eigen::Index obj = rows;
  for (int r : needs_artificial) tab.row(obj) -= tab.row(r);
  for (Eigen::Index a = 0; a < n_art; ++a) tab(obj, art0 + a) = 0.0;

  const double scale = std::max(1.0, tab.topRows(rows).cwiseAbs().maxCoeff());
  const double cost_tol = 1e-12 * scale;
  int stalled = 0;
  double last_obj = -tab(obj, cols);
  for (result.iterations = 0; result.iterations < options.max_iterations; ++result.iterations) {
    // Dantzig pricing; fall back to Bland's rule while degenerate to avoid cycling.
    const bool bland = stalled > 50;
    Eigen::Index enter = -1;
    double best = -cost_tol;
    for (Eigen::Index j = 0; j < cols; ++j) {
      const double rc = tab(obj, j);
      if (rc < best) {
        enter = j;
        if (bland) break;
        best = rc;
      }
    }
    if (enter < 0) break;

    Eigen::Index leave = -1;
    double ratio = std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < rows; ++i) {
      const double a = tab(i, enter);
      if (a <= options.pivot_tolerance) continue;
      const double r = tab(i, cols) / a;
      if (r < ratio - 1e-14 || (r <= ratio + 1e-14 && leave >= 0 && basis[i] < basis[leave])) {
        ratio = r;
        leave = i;
      }
    }
    if (leave < 0) {
      // Phase-1 objective is bounded below by zero; an unbounded ray means
      // the tableau has lost accuracy.
      return result;
    }

    const double pivot = tab(leave, enter);
    tab.row(leave) /= pivot;
    for (Eigen::Index i = 0; i <= rows; ++i) {
      if (i == leave) continue;
      const double factor = tab(i, enter);
      if (factor != 0.0) tab.row(i) -= factor * tab.row(leave);
    }
    basis[leave] = enter;

    const double now = -tab(obj, cols);
    if (now < last_obj - 1e-15 * scale) {
      stalled = 0;
      last_obj = now;
    } else {
      ++stalled;
    }
  }
  if (result.iterations >= options.max_iterations || !tab.allFinite()) return result;

  for (Eigen::Index i = 0; i < rows; ++i) {
    if (basis[i] < n) result.x(basis[i]) = tab(i, cols);
  }
  result.infeasibility = std::max(0.0, -tab(obj, cols));
  result.status = result.infeasibility <= options.feasibility_tolerance ? Status::feasible
                                                                        : Status::infeasible;
  return result;
}

}  // namespace gridprobe::lp
