#include "gridprobe/design.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <unordered_map>

#include "gridprobe/parallel.hpp"

namespace gridprobe {

namespace {

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

// Position of each probing bus inside s_M.
std::unordered_map<int, int> probing_positions(const ProbingSetup& setup) {
  std::unordered_map<int, int> pos;
  for (int i = 0; i < setup.probing_count(); ++i) pos.emplace(setup.probing[i], i);
  return pos;
}

int device_count(const InverterFleet& fleet) {
  int count = 0;
  for (const auto& assets : fleet.buses) count += static_cast<int>(assets.inverters.size());
  return count;
}

}  // namespace

LoadUncertainty LoadUncertainty::around(const Eigen::VectorXd& s_o, double gamma) {
  if (!(gamma > 0.0)) throw std::invalid_argument("load uncertainty gamma must be positive");
  return scaled(s_o, 1.0 - 1.0 / gamma, 1.0 + 1.0 / gamma);
}

LoadUncertainty LoadUncertainty::scaled(const Eigen::VectorXd& s_o, double lo_factor,
                                        double hi_factor) {
  const Eigen::VectorXd a = lo_factor * s_o;
  const Eigen::VectorXd b = hi_factor * s_o;
  return {a.cwiseMin(b), a.cwiseMax(b)};
}

void LoadUncertainty::validate() const {
  if (lower.size() != upper.size()) throw std::invalid_argument("load box bounds differ in size");
  if ((lower.array() > upper.array()).any()) throw std::invalid_argument("load box is empty");
}

void VoltageBand::validate(double base_voltage) const {
  if (!(lower < base_voltage && base_voltage < upper)) {
    throw std::invalid_argument("voltage band must strictly contain the substation voltage");
  }
}

CandidateLibrary sample_library(const ProbingSetup& setup, const InverterFleet& fleet, int count,
                                std::uint64_t seed) {
  if (count < 1) throw std::invalid_argument("library size must be at least 1");
  const auto pos = probing_positions(setup);
  const int m = setup.probing_count();
  const int devices = device_count(fleet);
  for (const auto& assets : fleet.buses) {
    if (!pos.count(assets.bus)) throw std::invalid_argument("fleet bus is not a probing bus");
  }

  CandidateLibrary lib;
  lib.candidates.resize(count);
  lib.devices.resize(count);
  lib.origin.resize(count);
  for (int k = 0; k < count; ++k) {
    std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(k)));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    Eigen::VectorXd s = Eigen::VectorXd::Zero(2 * m);
    Eigen::MatrixXd dev(devices, 2);
    int row = 0;
    for (const auto& assets : fleet.buses) {
      const int i = pos.at(assets.bus);
      s(i) += assets.p_fixed;
      s(m + i) += assets.q_fixed;
      for (const auto& inv : assets.inverters) {
        const double p_lo = inv.kind == InverterClass::solar ? 0.0 : -inv.p_max;
        const double p = p_lo + (inv.p_max - p_lo) * unit(rng);
        const double q_max = std::sqrt(std::max(0.0, inv.capacity * inv.capacity - p * p));
        const double q = -q_max + 2.0 * q_max * unit(rng);
        dev(row, 0) = p;
        dev(row, 1) = q;
        ++row;
        s(i) += p;
        s(m + i) += q;
      }
    }
    lib.candidates[k] = std::move(s);
    lib.devices[k] = std::move(dev);
    lib.origin[k] = k;
  }
  return lib;
}

bool satisfies_device_limits(const ProbingSetup& setup, const InverterFleet& fleet,
                             const Eigen::VectorXd& s_m, const Eigen::MatrixXd& devices,
                             double tolerance) {
  const auto pos = probing_positions(setup);
  const int m = setup.probing_count();
  if (s_m.size() != 2 * m || devices.rows() != device_count(fleet)) return false;
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(2 * m);
  int row = 0;
  for (const auto& assets : fleet.buses) {
    const int i = pos.at(assets.bus);
    sum(i) += assets.p_fixed;
    sum(m + i) += assets.q_fixed;
    for (const auto& inv : assets.inverters) {
      const double p = devices(row, 0);
      const double q = devices(row, 1);
      ++row;
      const double p_lo = inv.kind == InverterClass::solar ? 0.0 : -inv.p_max;
      if (p < p_lo - tolerance || p > inv.p_max + tolerance) return false;
      if (p * p + q * q > inv.capacity * inv.capacity + tolerance) return false;
      sum(i) += p;
      sum(m + i) += q;
    }
  }
  return (sum - s_m).lpNorm<Eigen::Infinity>() <= tolerance;
}

namespace {

// Right-hand side d of the voltage polytope { s_O : C s_O <= d }.
Eigen::VectorXd voltage_rhs(const Eigen::VectorXd& s_m, const LdfModel& ldf,
                            const VoltageBand& band) {
  const int n = ldf.buses();
  const Eigen::VectorXd shift = ldf.k * s_m + ldf.magnitude_offset();
  Eigen::VectorXd d(2 * n);
  d.head(n) = shift.array() + (ldf.base_voltage - band.lower);
  d.tail(n) = -shift.array() - (ldf.base_voltage - band.upper);
  return d;
}

// Row i of C = [-L; L].
Eigen::VectorXd voltage_row(const LdfModel& ldf, int i) {
  const int n = ldf.buses();
  return i < n ? Eigen::VectorXd(-ldf.l.row(i).transpose())
               : Eigen::VectorXd(ldf.l.row(i - n).transpose());
}

}  // namespace

lp::FeasibilityProblem farkas_problem(const Eigen::VectorXd& s_m, const LdfModel& ldf,
                                      const LoadUncertainty& box, const VoltageBand& band) {
  const int n = ldf.buses();
  const int o2 = static_cast<int>(ldf.l.cols());
  const int rows = 2 * n;
  const int width = 2 * o2;  // columns of E
  const Eigen::VectorXd d = voltage_rhs(s_m, ldf, band);

  lp::FeasibilityProblem prob;
  prob.a_eq = Eigen::MatrixXd::Zero(rows * o2, rows * width);
  prob.b_eq.resize(rows * o2);
  prob.a_ub = Eigen::MatrixXd::Zero(rows, rows * width);
  prob.b_ub = d;
  for (int i = 0; i < rows; ++i) {
    const Eigen::VectorXd c = voltage_row(ldf, i);
    for (int j = 0; j < o2; ++j) {
      // (E [-I; I])_{ij} = -E_{i,j} + E_{i,o2+j}
      prob.a_eq(i * o2 + j, i * width + j) = -1.0;
      prob.a_eq(i * o2 + j, i * width + o2 + j) = 1.0;
      prob.b_eq(i * o2 + j) = c(j);
      prob.a_ub(i, i * width + j) = -box.lower(j);
      prob.a_ub(i, i * width + o2 + j) = box.upper(j);
    }
  }
  return prob;
}

Compliance check_compliance(const Eigen::VectorXd& s_m, const LdfModel& ldf,
                            const LoadUncertainty& box, const VoltageBand& band) {
  box.validate();
  const int n = ldf.buses();
  const int o2 = static_cast<int>(ldf.l.cols());
  if (box.lower.size() != o2) throw std::invalid_argument("load box does not match the LDF model");
  if (s_m.size() != ldf.k.cols()) throw std::invalid_argument("candidate has wrong dimension");
  const Eigen::VectorXd d = voltage_rhs(s_m, ldf, band);

  lp::FeasibilityProblem row_lp;
  row_lp.a_eq = Eigen::MatrixXd::Zero(o2, 2 * o2);
  row_lp.b_eq.resize(o2);
  row_lp.a_ub.resize(1, 2 * o2);
  row_lp.a_ub << -box.lower.transpose(), box.upper.transpose();
  row_lp.b_ub.resize(1);
  for (int j = 0; j < o2; ++j) {
    row_lp.a_eq(j, j) = -1.0;
    row_lp.a_eq(j, o2 + j) = 1.0;
  }

  bool failed = false;
  for (int i = 0; i < 2 * n; ++i) {
    row_lp.b_eq = voltage_row(ldf, i);
    row_lp.b_ub(0) = d(i);
    const lp::FeasibilityResult res = lp::solve_phase1(row_lp);
    if (res.status == lp::Status::infeasible) return Compliance::violating;
    if (res.status == lp::Status::numerical_failure) failed = true;
  }
  return failed ? Compliance::solver_failure : Compliance::compliant;
}

double ScreeningResult::violation_percent() const {
  if (verdicts.empty()) return 0.0;
  return 100.0 * static_cast<double>(violating + solver_failures) /
         static_cast<double>(verdicts.size());
}

ScreeningResult screen_library(const CandidateLibrary& library, const LdfModel& ldf,
                               const LoadUncertainty& box, const VoltageBand& band) {
  band.validate(ldf.base_voltage);
  box.validate();
  ScreeningResult out;
  out.verdicts.resize(library.size());
  parallel_for(library.candidates.size(), [&](std::size_t k) {
    out.verdicts[k] = check_compliance(library.candidates[k], ldf, box, band);
  });
  for (Compliance v : out.verdicts) {
    if (v == Compliance::violating) ++out.violating;
    if (v == Compliance::solver_failure) ++out.solver_failures;
  }
  return out;
}

ReducedLibrary reduce_library(const CandidateLibrary& library, const LdfModel& ldf,
                              const LoadUncertainty& box, const VoltageBand& band, int horizon) {
  ReducedLibrary out;
  out.screening = screen_library(library, ldf, box, band);
  for (int k = 0; k < library.size(); ++k) {
    if (out.screening.verdicts[k] != Compliance::compliant) continue;
    out.library.candidates.push_back(library.candidates[k]);
    out.library.origin.push_back(library.origin[k]);
    if (k < static_cast<int>(library.devices.size())) out.library.devices.push_back(library.devices[k]);
  }
  if (out.library.size() < horizon) {
    throw InsufficientCandidatesError(
        "only " + std::to_string(out.library.size()) + " of " + std::to_string(library.size()) +
        " candidates are network-compliant but " + std::to_string(horizon) +
        " are needed; broaden the voltage band or tighten the load uncertainty");
  }
  return out;
}

DistanceMatrix distance_matrix(const CandidateLibrary& reduced, const LdfModel& ldf) {
  const Eigen::MatrixXd response = ldf.probing_response();
  const int count = reduced.size();
  DistanceMatrix dist;
  dist.y_tilde.resize(response.rows(), count);
  for (int l = 0; l < count; ++l) dist.y_tilde.col(l) = response * reduced.candidates[l];
  dist.c = dist.y_tilde.colwise().squaredNorm().transpose();

  // (s_l - s_l')' (K'K + M'M) (s_l - s_l')
  const Eigen::MatrixXd gram = response.transpose() * response;
  dist.d = Eigen::MatrixXd::Zero(count, count);
  for (int a = 0; a < count; ++a) {
    for (int b = a + 1; b < count; ++b) {
      const Eigen::VectorXd diff = reduced.candidates[a] - reduced.candidates[b];
      const double v = diff.dot(gram * diff);
      dist.d(a, b) = v;
      dist.d(b, a) = v;
    }
  }
  return dist;
}

double diversity(const DistanceMatrix& dist, const std::vector<int>& indices) {
  double total = 0.0;
  for (int a : indices) {
    for (int b : indices) total += dist.d(a, b);
  }
  return total;
}

double relaxed_objective(const DistanceMatrix& dist, const Eigen::VectorXd& x, int horizon) {
  return 2.0 * horizon * dist.c.dot(x) - 2.0 * (dist.y_tilde * x).squaredNorm();
}

Selection msd_exhaustive(const DistanceMatrix& dist, int horizon, double combination_limit) {
  const int count = dist.size();
  if (horizon < 1 || horizon > count) throw std::invalid_argument("subset size out of range");
  double combos = 1.0;
  for (int i = 0; i < horizon; ++i) combos = combos * (count - i) / (i + 1);
  if (combos > combination_limit) {
    throw SearchLimitError("exhaustive search over " + std::to_string(combos) +
                           " subsets exceeds the limit");
  }

  Selection best;
  best.value = -1.0;
  std::vector<int> current;
  current.reserve(horizon);
  // Depth-first in lexicographic order; `partial` is the sum over unordered
  // pairs already chosen. Strict improvement keeps the first optimum found.
  auto recurse = [&](auto&& self, int start, double partial) -> void {
    if (static_cast<int>(current.size()) == horizon) {
      const double value = 2.0 * partial;
      if (value > best.value * (1.0 + 1e-12) || best.indices.empty()) {
        best.value = value;
        best.indices = current;
      }
      return;
    }
    const int remaining = horizon - static_cast<int>(current.size());
    for (int j = start; j <= count - remaining; ++j) {
      double add = 0.0;
      for (int i : current) add += dist.d(i, j);
      current.push_back(j);
      self(self, j + 1, partial + add);
      current.pop_back();
    }
  };
  recurse(recurse, 0, 0.0);
  best.value = diversity(dist, best.indices);
  return best;
}

Eigen::VectorXd project_capped_simplex(const Eigen::VectorXd& z, double total) {
  const Eigen::Index n = z.size();
  if (total < 0.0 || total > static_cast<double>(n)) {
    throw std::invalid_argument("capped simplex is empty");
  }
  // sum_i clamp(z_i - tau, 0, 1) is non-increasing and piecewise linear in
  // tau with breakpoints at z_i and z_i - 1; locate the segment hitting
  // `total` by scanning the sorted breakpoints.
  std::vector<double> knots;
  knots.reserve(2 * n);
  for (Eigen::Index i = 0; i < n; ++i) {
    knots.push_back(z(i));
    knots.push_back(z(i) - 1.0);
  }
  std::sort(knots.begin(), knots.end());
  auto mass = [&](double tau) {
    return (z.array() - tau).max(0.0).min(1.0).sum();
  };
  // mass(knots.front()) = n >= total and mass(knots.back()) = 0 <= total.
  std::size_t lo = 0;
  std::size_t hi = knots.size() - 1;
  while (hi - lo > 1) {
    const std::size_t mid = (lo + hi) / 2;
    if (mass(knots[mid]) >= total) lo = mid; else hi = mid;
  }
  const double m_lo = mass(knots[lo]);
  const double m_hi = mass(knots[hi]);
  double tau = knots[lo];
  if (m_lo != m_hi) tau = knots[lo] + (m_lo - total) * (knots[hi] - knots[lo]) / (m_lo - m_hi);
  return (z.array() - tau).max(0.0).min(1.0).matrix();
}

namespace {

// Natural residual |x - P(x - grad / lip)|_inf of the minimization form.
double kkt_residual(const Eigen::VectorXd& x, const Eigen::VectorXd& grad, double lip, int horizon) {
  return (x - project_capped_simplex(x - grad / lip, horizon)).lpNorm<Eigen::Infinity>();
}

// Solves the equality-constrained QP on the free coordinates of `x` with
// the bounded ones held fixed. Returns false when the result leaves the box.
bool polish_active_set(const Eigen::MatrixXd& hess, const Eigen::VectorXd& lin, int horizon,
                       Eigen::VectorXd& x) {
  const Eigen::Index n = x.size();
  std::vector<Eigen::Index> free_idx;
  double fixed_mass = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (x(i) <= 1e-9) continue;
    if (x(i) >= 1.0 - 1e-9) {
      fixed_mass += 1.0;
      continue;
    }
    free_idx.push_back(i);
  }
  const auto f = static_cast<Eigen::Index>(free_idx.size());
  if (f == 0) return false;
  Eigen::VectorXd snapped = x;
  for (Eigen::Index i = 0; i < n; ++i) snapped(i) = x(i) <= 1e-9 ? 0.0 : (x(i) >= 1.0 - 1e-9 ? 1.0 : x(i));

  // [H_FF  -1] [x_F]   [-(lin_F + H_F,fixed x_fixed)]
  // [1'     0] [lam] = [horizon - fixed_mass        ]
  Eigen::MatrixXd kkt = Eigen::MatrixXd::Zero(f + 1, f + 1);
  Eigen::VectorXd rhs(f + 1);
  for (Eigen::Index a = 0; a < f; ++a) {
    double coupling = lin(free_idx[a]);
    for (Eigen::Index j = 0; j < n; ++j) {
      if (std::find(free_idx.begin(), free_idx.end(), j) == free_idx.end()) {
        coupling += hess(free_idx[a], j) * snapped(j);
      }
    }
    for (Eigen::Index b = 0; b < f; ++b) kkt(a, b) = hess(free_idx[a], free_idx[b]);
    kkt(a, f) = -1.0;
    kkt(f, a) = 1.0;
    rhs(a) = -coupling;
  }
  rhs(f) = horizon - fixed_mass;
  Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(kkt);
  const Eigen::VectorXd sol = cod.solve(rhs);
  if (!sol.allFinite() || (kkt * sol - rhs).norm() > 1e-9 * (1.0 + rhs.norm())) return false;
  for (Eigen::Index a = 0; a < f; ++a) {
    if (sol(a) < -1e-12 || sol(a) > 1.0 + 1e-12) return false;
  }
  for (Eigen::Index a = 0; a < f; ++a) snapped(free_idx[a]) = std::clamp(sol(a), 0.0, 1.0);
  x = snapped;
  return true;
}

}  // namespace

Relaxation msd_relax(const DistanceMatrix& dist, int horizon, const RelaxationOptions& options) {
  const int count = dist.size();
  if (horizon < 1 || horizon > count) throw std::invalid_argument("subset size out of range");
  Relaxation out;
  if (horizon == count) {
    out.x = Eigen::VectorXd::Ones(count);
    out.value = relaxed_objective(dist, out.x, horizon);
    out.converged = true;
    return out;
  }

  // minimize g(x) = 2 x'Qx - 2T c'x, Q = Y'Y; gradient 4Qx - 2Tc.
  const Eigen::MatrixXd hess = 4.0 * dist.y_tilde.transpose() * dist.y_tilde;
  const Eigen::VectorXd lin = -2.0 * horizon * dist.c;
  auto grad = [&](const Eigen::VectorXd& x) { return Eigen::VectorXd(hess * x + lin); };
  auto objective = [&](const Eigen::VectorXd& x) { return 0.5 * x.dot(hess * x) + lin.dot(x); };

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(hess, Eigen::EigenvaluesOnly);
  const double lip = std::max(eig.eigenvalues().maxCoeff(), 1e-300);

  Eigen::VectorXd x = Eigen::VectorXd::Constant(count, static_cast<double>(horizon) / count);
  Eigen::VectorXd y = x;
  double t = 1.0;
  double residual = kkt_residual(x, grad(x), lip, horizon);
  int it = 0;
  for (; it < options.max_iterations && residual > options.tolerance; ++it) {
    const Eigen::VectorXd x_next = project_capped_simplex(y - grad(y) / lip, horizon);
    const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    // Adaptive restart when the objective goes up.
    if (objective(x_next) > objective(x)) {
      y = x;
      t = 1.0;
      continue;
    }
    y = x_next + ((t - 1.0) / t_next) * (x_next - x);
    x = x_next;
    t = t_next;

    if (it % 50 == 49) {
      Eigen::VectorXd polished = x;
      if (polish_active_set(hess, lin, horizon, polished)) {
        const double r = kkt_residual(polished, grad(polished), lip, horizon);
        if (r <= options.tolerance && objective(polished) <= objective(x) + 1e-12 * std::abs(objective(x))) {
          x = polished;
          residual = r;
          ++it;
          break;
        }
      }
    }
    residual = kkt_residual(x, grad(x), lip, horizon);
  }
  out.x = x;
  out.iterations = it;
  out.kkt_residual = residual;
  out.converged = residual <= options.tolerance;
  out.value = relaxed_objective(dist, x, horizon);
  return out;
}

std::vector<int> rounding_draw(const Eigen::VectorXd& x_hat, double beta, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<int> pick;
  for (Eigen::Index i = 0; i < x_hat.size(); ++i) {
    const double prob = std::clamp((1.0 - beta) * x_hat(i), 0.0, 1.0);
    if (unit(rng) < prob) pick.push_back(static_cast<int>(i));
  }
  return pick;
}

Selection randomized_rounding(const Eigen::VectorXd& x_hat, const DistanceMatrix& dist,
                              int horizon, double beta, int draws, std::uint64_t seed) {
  const int count = dist.size();
  if (x_hat.size() != count) throw std::invalid_argument("relaxed point has wrong dimension");
  if (draws < 1) throw std::invalid_argument("need at least one rounding draw");
  if (horizon < 1 || horizon > count) throw std::invalid_argument("subset size out of range");

  std::mt19937_64 rng(seed);
  Selection best;
  best.value = -1.0;
  std::vector<int> fallback;
  int fallback_gap = count + 1;
  double fallback_value = -1.0;

  for (int draw = 0; draw < draws; ++draw) {
    const std::vector<int> pick = rounding_draw(x_hat, beta, rng);
    const double value = diversity(dist, pick);
    const int gap = std::abs(static_cast<int>(pick.size()) - horizon);
    if (gap == 0) {
      if (value > best.value) {
        best.value = value;
        best.indices = pick;
      }
    } else if (gap < fallback_gap || (gap == fallback_gap && value > fallback_value)) {
      fallback = pick;
      fallback_gap = gap;
      fallback_value = value;
    }
  }
  if (!best.indices.empty()) return best;

  // Greedy repair of the closest infeasible draw by marginal diversity.
  std::vector<bool> in(count, false);
  for (int i : fallback) in[i] = true;
  auto gain = [&](int j) {
    double g = 0.0;
    for (int i = 0; i < count; ++i) {
      if (in[i] && i != j) g += 2.0 * dist.d(i, j);
    }
    return g;
  };
  int size = static_cast<int>(fallback.size());
  while (size > horizon) {
    int drop = -1;
    double loss = 0.0;
    for (int j = 0; j < count; ++j) {
      if (!in[j]) continue;
      const double g = gain(j);
      if (drop < 0 || g < loss) {
        drop = j;
        loss = g;
      }
    }
    in[drop] = false;
    --size;
  }
  while (size < horizon) {
    int add = -1;
    double best_gain = 0.0;
    for (int j = 0; j < count; ++j) {
      if (in[j]) continue;
      const double g = gain(j);
      if (add < 0 || g > best_gain) {
        add = j;
        best_gain = g;
      }
    }
    in[add] = true;
    ++size;
  }
  best.indices.clear();
  for (int i = 0; i < count; ++i) {
    if (in[i]) best.indices.push_back(i);
  }
  best.value = diversity(dist, best.indices);
  best.repaired = true;
  return best;
}

nlohmann::json DesignReport::to_json() const {
  return {{"library_size", library_size},
          {"reduced_size", reduced_size},
          {"violation_percent", violation_percent},
          {"solver_failures", solver_failures},
          {"method", method},
          {"selected", selected},
          {"origin", origin},
          {"diversity", diversity},
          {"relaxation_bound", relaxation_bound},
          {"rounding_repaired", rounding_repaired},
          {"seconds", {{"sample", sample_seconds}, {"screen", screen_seconds}, {"select", select_seconds}}}};
}

ProbingDesign design_probes(const LdfModel& ldf, const ProbingSetup& setup,
                            const InverterFleet& fleet, const LoadUncertainty& box,
                            const VoltageBand& band, const DesignOptions& options) {
  const int horizon = setup.horizon;
  ProbingDesign out;
  DesignReport& rep = out.report;

  auto start = std::chrono::steady_clock::now();
  const CandidateLibrary library =
      sample_library(setup, fleet, options.candidates, derive_seed(options.seed, 0));
  rep.sample_seconds = seconds_since(start);
  rep.library_size = library.size();

  start = std::chrono::steady_clock::now();
  ReducedLibrary reduced = reduce_library(library, ldf, box, band, horizon);
  rep.screen_seconds = seconds_since(start);
  rep.reduced_size = reduced.library.size();
  rep.violation_percent = reduced.screening.violation_percent();
  rep.solver_failures = reduced.screening.solver_failures;
  out.reduced = std::move(reduced.library);

  start = std::chrono::steady_clock::now();
  const DistanceMatrix dist = distance_matrix(out.reduced, ldf);
  const int count = dist.size();
  Selection sel;
  SelectionMethod method = options.method;
  if (method == SelectionMethod::random_subset) {
    std::mt19937_64 rng(derive_seed(options.seed, 1));
    std::vector<int> all(count);
    std::iota(all.begin(), all.end(), 0);
    std::shuffle(all.begin(), all.end(), rng);
    sel.indices.assign(all.begin(), all.begin() + horizon);
    std::sort(sel.indices.begin(), sel.indices.end());
    sel.value = diversity(dist, sel.indices);
    rep.method = "random_subset";
  } else if (horizon == 1) {
    // A single probe has no pairwise diversity; take the candidate whose
    // predicted state lies farthest from the flat profile.
    Eigen::Index arg = 0;
    dist.c.maxCoeff(&arg);
    sel.indices = {static_cast<int>(arg)};
    sel.value = 0.0;
    rep.method = "farthest_single";
  } else {
    if (method == SelectionMethod::automatic) {
      double combos = 1.0;
      for (int i = 0; i < horizon; ++i) combos = combos * (count - i) / (i + 1);
      method = (horizon == 2 || combos <= options.exhaustive_limit) ? SelectionMethod::exhaustive
                                                                     : SelectionMethod::relaxation;
    }
    if (method == SelectionMethod::exhaustive) {
      sel = msd_exhaustive(dist, horizon, std::max(options.exhaustive_limit, 1e6));
      rep.method = "exhaustive";
    } else {
      const Relaxation relax = msd_relax(dist, horizon);
      rep.relaxation_bound = relax.value;
      sel = randomized_rounding(relax.x, dist, horizon, options.beta, options.rounding_draws,
                                derive_seed(options.seed, 2));
      rep.rounding_repaired = sel.repaired;
      rep.method = "relaxation_rounding";
    }
  }
  rep.select_seconds = seconds_since(start);
  rep.selected = sel.indices;
  rep.diversity = sel.value;
  for (int idx : sel.indices) {
    rep.origin.push_back(out.reduced.origin[idx]);
    out.setpoints.push_back(out.reduced.candidates[idx]);
    if (idx < static_cast<int>(out.reduced.devices.size())) {
      out.device_setpoints.push_back(out.reduced.devices[idx]);
    }
  }
  return out;
}

ProbingDesign design_pipeline(const FeederModel& feeder, const ProbingSetup& setup,
                              const InverterFleet& fleet, const LoadUncertainty& box,
                              const VoltageBand& band, const DesignOptions& options) {
  setup.validate(feeder);
  fleet.validate(feeder, setup);
  band.validate(feeder.base_voltage());
  box.validate();
  const LdfModel ldf = build_ldf(feeder, setup);
  return design_probes(ldf, setup, fleet, box, band, options);
}

}  // namespace gridprobe
