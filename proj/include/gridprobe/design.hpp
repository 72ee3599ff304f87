#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "gridprobe/feeder.hpp"
#include "gridprobe/ldf.hpp"
#include "gridprobe/lp.hpp"

namespace gridprobe {

/// Candidate probing injection vectors s_M = [p_M; q_M], in probing-bus order.
struct CandidateLibrary {
  std::vector<Eigen::VectorXd> candidates;
  std::vector<int> origin;  // draw index in the original sample
  /// Per-candidate device setpoints, one (p, q) row per inverter in fleet order.
  std::vector<Eigen::MatrixXd> devices;

  int size() const { return static_cast<int>(candidates.size()); }
};

/// Box of anticipated non-metered injections, s_O in [lower, upper].
struct LoadUncertainty {
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;

  /// Box (1 -+ 1/gamma) s_O, ordered element-wise so that negative (load)
  /// injections still give lower <= upper.
  static LoadUncertainty around(const Eigen::VectorXd& s_o, double gamma);
  /// Box spanned element-wise by lo_factor * s_O and hi_factor * s_O.
  static LoadUncertainty scaled(const Eigen::VectorXd& s_o, double lo_factor, double hi_factor);
  void validate() const;
  Eigen::VectorXd center() const { return 0.5 * (lower + upper); }
};

struct VoltageBand {
  double lower = 0.95;
  double upper = 1.05;

  void validate(double base_voltage) const;
};

enum class Compliance { compliant, violating, solver_failure };

/// Device-level sampling of implementable setpoints, one candidate per draw.
CandidateLibrary sample_library(const ProbingSetup& setup, const InverterFleet& fleet, int count,
                                std::uint64_t seed);

/// Re-checks a candidate: every device within its class limits and the
/// per-bus sums plus fixed injections reproducing `s_m`.
bool satisfies_device_limits(const ProbingSetup& setup, const InverterFleet& fleet,
                             const Eigen::VectorXd& s_m, const Eigen::MatrixXd& devices,
                             double tolerance = 1e-9);

/// The full polytope-containment LP for candidate `s_m`: E >= 0 with
/// E [-I; I] = [-L; L] and E [-lower; upper] <= [K s + (u0 - u_lo) 1; -K s - (u0 - u_hi) 1].
/// Variables are E in row-major order.
lp::FeasibilityProblem farkas_problem(const Eigen::VectorXd& s_m, const LdfModel& ldf,
                                      const LoadUncertainty& box, const VoltageBand& band);

/// Solves the containment LP. Rows of E are uncoupled, so each row is an
/// independent phase-1 LP; the candidate is compliant iff all are feasible.
Compliance check_compliance(const Eigen::VectorXd& s_m, const LdfModel& ldf,
                            const LoadUncertainty& box, const VoltageBand& band);

inline bool is_network_compliant(const Eigen::VectorXd& s_m, const LdfModel& ldf,
                                 const LoadUncertainty& box, const VoltageBand& band) {
  return check_compliance(s_m, ldf, box, band) == Compliance::compliant;
}

class InsufficientCandidatesError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ScreeningResult {
  std::vector<Compliance> verdicts;
  int violating = 0;
  int solver_failures = 0;

  /// Share of rejected candidates (violating or unsolved), in percent.
  double violation_percent() const;
};

ScreeningResult screen_library(const CandidateLibrary& library, const LdfModel& ldf,
                               const LoadUncertainty& box, const VoltageBand& band);

struct ReducedLibrary {
  CandidateLibrary library;
  ScreeningResult screening;
};

/// Keeps the compliant candidates; throws InsufficientCandidatesError when
/// fewer than `horizon` survive.
ReducedLibrary reduce_library(const CandidateLibrary& library, const LdfModel& ldf,
                              const LoadUncertainty& box, const VoltageBand& band, int horizon);

/// Pairwise squared distances of the LDF-predicted states of the candidates.
struct DistanceMatrix {
  Eigen::MatrixXd d;        // L x L
  Eigen::MatrixXd y_tilde;  // 2N x L, predicted state per candidate
  Eigen::VectorXd c;        // squared norms of the columns of y_tilde

  int size() const { return static_cast<int>(d.rows()); }
};

DistanceMatrix distance_matrix(const CandidateLibrary& reduced, const LdfModel& ldf);

struct Selection {
  std::vector<int> indices;  // ascending, into the reduced library
  double value = 0.0;        // sum over ordered pairs of the distances
  bool repaired = false;     // rounding fell back to greedy repair
};

/// Sum of D over all ordered pairs of `indices`.
double diversity(const DistanceMatrix& dist, const std::vector<int>& indices);
/// Concave form 2T c'x - 2 |Y x|^2 of the diversity objective.
double relaxed_objective(const DistanceMatrix& dist, const Eigen::VectorXd& x, int horizon);

class SearchLimitError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Exact max-sum diversity by enumeration; ties resolve to the
/// lexicographically smallest index set.
Selection msd_exhaustive(const DistanceMatrix& dist, int horizon,
                         double combination_limit = 1e6);

struct Relaxation {
  Eigen::VectorXd x;
  double value = 0.0;  // relaxed_objective(x)
  double kkt_residual = 0.0;
  int iterations = 0;
  bool converged = false;
};

struct RelaxationOptions {
  double tolerance = 1e-9;
  int max_iterations = 200000;
};

/// Euclidean projection onto {0 <= x <= 1, sum(x) = total}.
Eigen::VectorXd project_capped_simplex(const Eigen::VectorXd& z, double total);

/// Maximizes the concave diversity objective over the capped simplex.
Relaxation msd_relax(const DistanceMatrix& dist, int horizon, const RelaxationOptions& options = {});

/// One Bernoulli draw: index i is kept with probability (1 - beta) x_hat(i).
std::vector<int> rounding_draw(const Eigen::VectorXd& x_hat, double beta, std::mt19937_64& rng);

Selection randomized_rounding(const Eigen::VectorXd& x_hat, const DistanceMatrix& dist,
                              int horizon, double beta, int draws, std::uint64_t seed);

enum class SelectionMethod {
  automatic,     // exhaustive when small enough, otherwise relaxation + rounding
  exhaustive,
  relaxation,
  random_subset  // no diversity step: T compliant candidates picked at random
};

struct DesignOptions {
  int candidates = 100;
  std::uint64_t seed = 1;
  SelectionMethod method = SelectionMethod::automatic;
  double beta = 0.1;
  int rounding_draws = 100;
  double exhaustive_limit = 2e5;
};

struct DesignReport {
  int library_size = 0;
  int reduced_size = 0;
  double violation_percent = 0.0;
  int solver_failures = 0;
  std::string method;
  std::vector<int> selected;  // indices into the reduced library
  std::vector<int> origin;    // draw indices of the selected candidates
  double diversity = 0.0;
  double relaxation_bound = 0.0;  // f(x_hat) when the relaxation ran
  bool rounding_repaired = false;
  double sample_seconds = 0.0;
  double screen_seconds = 0.0;
  double select_seconds = 0.0;

  nlohmann::json to_json() const;
};

struct ProbingDesign {
  std::vector<Eigen::VectorXd> setpoints;  // T vectors s_M^t
  std::vector<Eigen::MatrixXd> device_setpoints;
  CandidateLibrary reduced;
  DesignReport report;
};

ProbingDesign design_pipeline(const FeederModel& feeder, const ProbingSetup& setup,
                              const InverterFleet& fleet, const LoadUncertainty& box,
                              const VoltageBand& band, const DesignOptions& options);

/// Same as design_pipeline with a prebuilt LDF model.
ProbingDesign design_probes(const LdfModel& ldf, const ProbingSetup& setup,
                            const InverterFleet& fleet, const LoadUncertainty& box,
                            const VoltageBand& band, const DesignOptions& options);

}  // namespace gridprobe
