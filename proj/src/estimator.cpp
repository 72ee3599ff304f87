#include "gridprobe/estimator.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <random>

#include "gridprobe/ldf.hpp"
#include "gridprobe/parallel.hpp"

namespace gridprobe {

double snr_to_sigma(double snr_db) {
  if (std::isinf(snr_db) && snr_db > 0.0) return 0.0;
  if (!std::isfinite(snr_db)) throw std::invalid_argument("SNR must be finite or +inf");
  return std::pow(10.0, -snr_db / 20.0);
}

void MeasurementSet::validate(const ProbingSetup& setup) const {
  const Eigen::Index m = setup.probing_count();
  if (mode != setup.mode) throw std::invalid_argument("measurement mode does not match the setup");
  if (static_cast<int>(values.size()) != setup.horizon || sigma.size() != values.size()) {
    throw std::invalid_argument("measurement set does not cover every probing slot");
  }
  for (std::size_t t = 0; t < values.size(); ++t) {
    for (const SlotData* d : {&values[t], &sigma[t]}) {
      if (d->u.size() != m || d->p.size() != m || d->q.size() != m ||
          d->theta.size() != (mode == DataMode::phasor ? m : 0)) {
        throw std::invalid_argument("measurement slot is incomplete");
      }
    }
    const SlotData& s = sigma[t];
    if ((s.u.array() <= 0.0).any() || (s.p.array() <= 0.0).any() || (s.q.array() <= 0.0).any() ||
        (s.theta.array() <= 0.0).any()) {
      throw std::invalid_argument("measurement noise scales must be positive");
    }
  }
}

MeasurementSet simulate_measurements(const FeederModel& feeder, const ProbingSetup& setup,
                                     const StateSequence& states, double snr_metered_db,
                                     std::uint64_t seed) {
  const double sigma = snr_to_sigma(snr_metered_db);
  const double scale_rel = sigma > 0.0 ? sigma : kExactDataRelativeSigma;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto noisy = [&](double x) { return sigma > 0.0 ? x * (1.0 + sigma * normal(rng)) : x; };
  auto scale = [&](double x) { return scale_rel * std::max(std::abs(x), kScaleFloor); };

  const int m = setup.probing_count();
  const bool phasor = setup.mode == DataMode::phasor;
  MeasurementSet out;
  out.mode = setup.mode;
  for (const auto& state : states) {
    const Injections s = injections(feeder, state);
    SlotData v{Eigen::VectorXd(m), phasor ? Eigen::VectorXd(m) : Eigen::VectorXd(),
               Eigen::VectorXd(m), Eigen::VectorXd(m)};
    SlotData sd = v;
    for (int i = 0; i < m; ++i) {
      const int b = setup.probing[i];
      v.u(i) = noisy(state.u(b));
      if (phasor) v.theta(i) = noisy(state.theta(b));
      v.p(i) = noisy(s.p(b));
      v.q(i) = noisy(s.q(b));
      sd.u(i) = scale(v.u(i));
      if (phasor) sd.theta(i) = scale(v.theta(i));
      sd.p(i) = scale(v.p(i));
      sd.q(i) = scale(v.q(i));
    }
    out.values.push_back(std::move(v));
    out.sigma.push_back(std::move(sd));
  }
  return out;
}

std::vector<Eigen::VectorXd> perturb_loads(const Eigen::VectorXd& s_o, int slots, double snr_db,
                                           std::uint64_t seed) {
  const double sigma = snr_to_sigma(snr_db);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const Eigen::Index o = s_o.size() / 2;
  std::vector<Eigen::VectorXd> out;
  for (int t = 0; t < slots; ++t) {
    Eigen::VectorXd s = s_o;
    if (sigma > 0.0) {
      // One relative perturbation per bus and slot, shared by p and q.
      for (Eigen::Index i = 0; i < o; ++i) {
        const double f = 1.0 + sigma * normal(rng);
        s(i) *= f;
        s(o + i) *= f;
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

ProbingSimulation simulate_probing(const FeederModel& feeder, const ProbingSetup& setup,
                                   const std::vector<Eigen::VectorXd>& setpoints,
                                   const Eigen::VectorXd& nominal_loads, double snr_metered_db,
                                   double snr_loads_db, std::uint64_t seed) {
  if (static_cast<int>(setpoints.size()) != setup.horizon) {
    throw std::invalid_argument("need one setpoint vector per probing slot");
  }
  ProbingSimulation sim;
  sim.loads = perturb_loads(nominal_loads, setup.horizon, snr_loads_db, derive_seed(seed, 0));
  for (int t = 0; t < setup.horizon; ++t) {
    const Injections target = scatter_injections(feeder.size(), setup, setpoints[t], sim.loads[t]);
    sim.states.push_back(solve_pf(feeder, target).state);
  }
  sim.measurements =
      simulate_measurements(feeder, setup, sim.states, snr_metered_db, derive_seed(seed, 1));
  return sim;
}

std::string to_string(Penalty penalty) {
  return penalty == Penalty::squared ? "wls" : "wlav";
}

Penalty parse_penalty(const std::string& text) {
  if (text == "wls" || text == "squared") return Penalty::squared;
  if (text == "wlav" || text == "absolute") return Penalty::absolute;
  throw std::invalid_argument("unknown penalty '" + text + "'");
}

void PenaltyConfig::validate(const ProbingSetup& setup) const {
  const Eigen::Index o2 = 2 * setup.non_metered_count();
  if (coupling_sigma.size() != 0 &&
      (coupling_sigma.size() != o2 || (coupling_sigma.array() <= 0.0).any())) {
    throw std::invalid_argument("coupling scales must be positive, one per coupled quantity");
  }
  if (!(coupling_relative_sigma > 0.0) || !(absolute_smoothing > 0.0)) {
    throw std::invalid_argument("penalty scales must be positive");
  }
  if (load_box) {
    load_box->validate();
    if (load_box->lower.size() != o2) throw std::invalid_argument("load box has wrong dimension");
  }
  for (int b : zero_injection_buses) {
    if (std::find(setup.non_metered.begin(), setup.non_metered.end(), b) == setup.non_metered.end()) {
      throw std::invalid_argument("zero-injection buses must be non-metered");
    }
  }
}

LoadEstimate recover_loads(const FeederModel& feeder, const ProbingSetup& setup,
                           const StateSequence& states) {
  LoadEstimate out;
  const int o = setup.non_metered_count();
  out.average = Eigen::VectorXd::Zero(2 * o);
  out.spread = Eigen::VectorXd::Zero(2 * o);
  if (o == 0 || states.empty()) return out;
  Eigen::VectorXd lo = Eigen::VectorXd::Constant(2 * o, std::numeric_limits<double>::infinity());
  Eigen::VectorXd hi = -lo;
  for (const auto& state : states) {
    Eigen::VectorXd s = stack_injections(injections(feeder, state), setup.non_metered);
    out.average += s;
    lo = lo.cwiseMin(s);
    hi = hi.cwiseMax(s);
    out.per_slot.push_back(std::move(s));
  }
  out.average /= static_cast<double>(states.size());
  out.spread = hi - lo;
  return out;
}

nlohmann::json EstimationResult::to_json(const FeederModel& feeder,
                                         const ProbingSetup& setup) const {
  using nlohmann::json;
  json doc;
  doc["states"] = json::array();
  for (const auto& s : states) {
    doc["states"].push_back({{"u", std::vector<double>(s.u.data(), s.u.data() + s.u.size())},
                             {"theta", std::vector<double>(s.theta.data(), s.theta.data() + s.theta.size())}});
  }
  doc["bus_ids"] = feeder.bus_ids();
  const int o = setup.non_metered_count();
  doc["loads"] = json::array();
  for (int i = 0; i < o && loads.average.size() == 2 * o; ++i) {
    doc["loads"].push_back({{"bus", feeder.bus_id(setup.non_metered[i])},
                            {"p", loads.average(i)},
                            {"q", loads.average(o + i)},
                            {"p_spread", loads.spread(i)},
                            {"q_spread", loads.spread(o + i)}});
  }
  doc["diagnostics"] = {{"objective", diagnostics.objective},
                        {"gradient_norm", diagnostics.gradient_norm},
                        {"residual_norm", diagnostics.residual_norm},
                        {"metering_rms", diagnostics.metering_rms},
                        {"coupling_rms", diagnostics.coupling_rms},
                        {"condition", std::isfinite(diagnostics.condition) ? json(diagnostics.condition) : json("inf")},
                        {"iterations", diagnostics.iterations},
                        {"converged", diagnostics.converged},
                        {"start", diagnostics.start}};
  return doc;
}

namespace {

// Measured values in the row order of p2l_equations (coupling targets zero).
Eigen::VectorXd stacked_measurements(const ProbingSetup& setup, const MeasurementSet& data) {
  const int per_slot = metering_rows_per_slot(setup);
  const int o = setup.non_metered_count();
  const int t_count = data.slots();
  Eigen::VectorXd z = Eigen::VectorXd::Zero(per_slot * t_count + 2 * o * std::max(t_count - 1, 0));
  int row = 0;
  for (const auto& v : data.values) {
    z.segment(row, v.u.size()) = v.u;
    row += static_cast<int>(v.u.size());
    if (setup.mode == DataMode::phasor) {
      z.segment(row, v.theta.size()) = v.theta;
      row += static_cast<int>(v.theta.size());
    }
    z.segment(row, v.p.size()) = v.p;
    row += static_cast<int>(v.p.size());
    z.segment(row, v.q.size()) = v.q;
    row += static_cast<int>(v.q.size());
  }
  return z;
}

StateSequence unstack_states(const Eigen::VectorXd& x, int buses, int slots) {
  StateSequence states;
  for (int t = 0; t < slots; ++t) states.push_back(BusState::from_stacked(x.segment(2 * buses * t, 2 * buses)));
  return states;
}

StateSequence flat_sequence(const FeederModel& feeder, int slots) {
  return StateSequence(slots, BusState::flat(feeder));
}

// Per-slot power flows with the measured probing injections and the
// anticipated non-metered injections `s_o` (zero when empty). Identical
// slots would make the coupled Jacobian singular, so slots whose flow
// fails fall back to flat individually.
StateSequence measured_injection_start(const FeederModel& feeder, const ProbingSetup& setup,
                                       const MeasurementSet& data, const Eigen::VectorXd& s_o) {
  const int n = feeder.size();
  const int m = setup.probing_count();
  const Eigen::VectorXd anticipated =
      s_o.size() > 0 ? s_o : Eigen::VectorXd::Zero(2 * setup.non_metered_count());
  StateSequence states;
  for (int t = 0; t < setup.horizon; ++t) {
    Eigen::VectorXd s_m(2 * m);
    s_m << data.values[t].p, data.values[t].q;
    try {
      states.push_back(solve_pf(feeder, scatter_injections(n, setup, s_m, anticipated)).state);
    } catch (const PowerFlowError&) {
      states.push_back(BusState::flat(feeder));
    }
  }
  return states;
}

}  // namespace

EstimationResult solve_noiseless(const FeederModel& feeder, const ProbingSetup& setup,
                                 const MeasurementSet& data, const StateSequence* init,
                                 const NoiselessOptions& options) {
  setup.validate(feeder);
  data.validate(setup);
  const int n = feeder.size();
  const int t_count = setup.horizon;
  const Eigen::VectorXd z = stacked_measurements(setup, data);
  if (z.size() < 2 * n * t_count) {
    throw SingularJacobianError("probing equations (" + std::to_string(z.size()) +
                                    ") are fewer than the unknown states (" +
                                    std::to_string(2 * n * t_count) + ")",
                                kInfiniteCondition);
  }

  StateSequence states = init ? *init : measured_injection_start(feeder, setup, data, Eigen::VectorXd());
  if (static_cast<int>(states.size()) != t_count) throw std::invalid_argument("initial state has wrong length");
  Eigen::VectorXd x = P2LObjective::stack(states);
  Eigen::VectorXd r = p2l_equations(feeder, setup, states) - z;
  double norm = r.lpNorm<Eigen::Infinity>();

  EstimationResult out;
  int iter = 0;
  double condition = 0.0;
  // One damped Newton step; false when no halving reduces the residual.
  auto newton_step = [&]() {
    const P2LJacobian jac = assemble_p2l_jacobian(feeder, setup, states);
    condition = condition_number(jac.matrix);
    if (!(condition < options.singular_condition)) {
      throw SingularJacobianError("probing Jacobian is singular or ill-conditioned (condition " +
                                      std::to_string(condition) + ")",
                                  condition);
    }
    const Eigen::VectorXd step = jac.matrix.colPivHouseholderQr().solve(-r);
    double scale = 1.0;
    for (int h = 0; h <= 10; ++h, scale *= 0.5) {
      const Eigen::VectorXd x_try = x + scale * step;
      StateSequence trial = unstack_states(x_try, n, t_count);
      bool positive = true;
      for (const auto& s : trial) positive = positive && (s.u.array() > 0.0).all();
      if (!positive) continue;
      const Eigen::VectorXd r_try = p2l_equations(feeder, setup, trial) - z;
      if (r_try.norm() < r.norm()) {
        x = x_try;
        states = std::move(trial);
        r = r_try;
        norm = r.lpNorm<Eigen::Infinity>();
        return true;
      }
    }
    return false;
  };
  for (; norm > options.tolerance && iter < options.max_iterations; ++iter) {
    if (!newton_step()) break;
  }
  if (norm <= options.tolerance) {
    // Quadratic convergence makes a couple of extra steps nearly free and
    // takes the residual to round-off, which ill-conditioned setups need.
    for (int polish = 0; polish < 2 && norm > 0.0; ++polish) {
      if (!newton_step()) break;
    }
  }
  if (norm > options.tolerance) {
    throw EstimationError("noiseless probing equations did not converge (residual " +
                          std::to_string(norm) + " after " + std::to_string(iter) + " iterations)");
  }
  if (condition == 0.0) condition = condition_number(assemble_p2l_jacobian(feeder, setup, states).matrix);

  out.states = std::move(states);
  out.loads = recover_loads(feeder, setup, out.states);
  out.diagnostics.iterations = iter;
  out.diagnostics.residual_norm = norm;
  out.diagnostics.objective = r.squaredNorm();
  out.diagnostics.condition = condition;
  out.diagnostics.converged = true;
  out.diagnostics.start = init ? "given" : "power_flow";
  return out;
}

P2LObjective::P2LObjective(const FeederModel& feeder, const ProbingSetup& setup,
                           const MeasurementSet& data, const PenaltyConfig& config)
    : feeder_(feeder), setup_(setup), data_(data), config_(config), buses_(feeder.size()),
      slots_(setup.horizon) {
  setup.validate(feeder);
  data.validate(setup);
  config.validate(setup);
  const int m = setup.probing_count();
  const int o = setup.non_metered_count();

  if (config_.coupling_sigma.size() == 2 * o) {
    coupling_sigma_ = config_.coupling_sigma;
  } else {
    coupling_sigma_.resize(2 * o);
    for (int i = 0; i < 2 * o; ++i) {
      const double nominal = config_.load_box ? std::abs(config_.load_box->center()(i)) : 0.0;
      coupling_sigma_(i) = config_.coupling_relative_sigma * std::max(nominal, kScaleFloor);
    }
  }
  double smallest = std::numeric_limits<double>::infinity();
  for (const auto& s : data.sigma) {
    smallest = std::min({smallest, s.u.minCoeff(), s.p.minCoeff(), s.q.minCoeff()});
    if (s.theta.size() > 0) smallest = std::min(smallest, s.theta.minCoeff());
  }
  if (o > 0) smallest = std::min(smallest, coupling_sigma_.minCoeff());
  // Weight 1/sigma^2 a million times the largest data weight.
  zero_sigma_ = smallest * 1e-3;

  for (int t = 0; t < slots_; ++t) {
    const int metering = (setup.mode == DataMode::phasor ? 4 : 3) * m;
    for (int k = 0; k < metering; ++k) {
      penalty_.push_back(config_.metering);
      group_.push_back(0);
    }
  }
  for (int t = 0; t + 1 < slots_; ++t) {
    for (int k = 0; k < 2 * o; ++k) {
      penalty_.push_back(config_.coupling);
      group_.push_back(1);
    }
  }
  const int zero_rows = 2 * static_cast<int>(config_.zero_injection_buses.size()) * slots_;
  for (int k = 0; k < zero_rows; ++k) {
    penalty_.push_back(Penalty::squared);
    group_.push_back(2);
  }
  if (config_.load_box) {
    for (int k = 0; k < 2 * o * slots_; ++k) {
      penalty_.push_back(Penalty::squared);
      group_.push_back(3);
    }
  }
}

Eigen::VectorXd P2LObjective::stack(const StateSequence& states) {
  if (states.empty()) return {};
  const Eigen::Index n = states.front().u.size();
  Eigen::VectorXd x(2 * n * static_cast<Eigen::Index>(states.size()));
  for (std::size_t t = 0; t < states.size(); ++t) x.segment(2 * n * t, 2 * n) = states[t].stacked();
  return x;
}

StateSequence P2LObjective::unstack(const Eigen::VectorXd& x) const {
  return unstack_states(x, buses_, slots_);
}

Eigen::VectorXd P2LObjective::residuals(const Eigen::VectorXd& x) const {
  const StateSequence states = unstack(x);
  const int o = setup_.non_metered_count();
  const bool phasor = setup_.mode == DataMode::phasor;
  Eigen::VectorXd r(residual_count());
  std::vector<Injections> inj;
  int row = 0;
  for (int t = 0; t < slots_; ++t) {
    inj.push_back(injections(feeder_, states[t]));
    const SlotData& z = data_.values[t];
    const SlotData& sd = data_.sigma[t];
    const BusState& s = states[t];
    const int m = setup_.probing_count();
    if (phasor) {
      for (int i = 0; i < m; ++i) {
        const int b = setup_.probing[i];
        const double c = std::cos(z.theta(i));
        const double sn = std::sin(z.theta(i));
        const double sig_re = std::hypot(c * sd.u(i), z.u(i) * sn * sd.theta(i));
        r(row++) = (s.u(b) * std::cos(s.theta(b)) - z.u(i) * c) / sig_re;
      }
      for (int i = 0; i < m; ++i) {
        const int b = setup_.probing[i];
        const double c = std::cos(z.theta(i));
        const double sn = std::sin(z.theta(i));
        const double sig_im = std::hypot(sn * sd.u(i), z.u(i) * c * sd.theta(i));
        r(row++) = (s.u(b) * std::sin(s.theta(b)) - z.u(i) * sn) / sig_im;
      }
    } else {
      for (int i = 0; i < m; ++i) r(row++) = (s.u(setup_.probing[i]) - z.u(i)) / sd.u(i);
    }
    for (int i = 0; i < m; ++i) r(row++) = (inj[t].p(setup_.probing[i]) - z.p(i)) / sd.p(i);
    for (int i = 0; i < m; ++i) r(row++) = (inj[t].q(setup_.probing[i]) - z.q(i)) / sd.q(i);
  }
  for (int t = 0; t + 1 < slots_; ++t) {
    for (int i = 0; i < o; ++i) {
      const int b = setup_.non_metered[i];
      r(row++) = (inj[t].p(b) - inj[t + 1].p(b)) / coupling_sigma_(i);
    }
    for (int i = 0; i < o; ++i) {
      const int b = setup_.non_metered[i];
      r(row++) = (inj[t].q(b) - inj[t + 1].q(b)) / coupling_sigma_(o + i);
    }
  }
  for (int t = 0; t < slots_; ++t) {
    for (int b : config_.zero_injection_buses) {
      r(row++) = inj[t].p(b) / zero_sigma_;
      r(row++) = inj[t].q(b) / zero_sigma_;
    }
  }
  if (config_.load_box) {
    const LoadUncertainty& box = *config_.load_box;
    for (int t = 0; t < slots_; ++t) {
      const Eigen::VectorXd s = stack_injections(inj[t], setup_.non_metered);
      for (int k = 0; k < 2 * o; ++k) {
        const double excess = std::max(0.0, s(k) - box.upper(k)) + std::min(0.0, s(k) - box.lower(k));
        r(row++) = excess / coupling_sigma_(k);
      }
    }
  }
  return r;
}

Eigen::MatrixXd P2LObjective::jacobian(const Eigen::VectorXd& x) const {
  const StateSequence states = unstack(x);
  const int n = buses_;
  const int m = setup_.probing_count();
  const int o = setup_.non_metered_count();
  const bool phasor = setup_.mode == DataMode::phasor;
  Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(residual_count(), variables());
  std::vector<Eigen::MatrixXd> slot_jac;
  std::vector<Injections> inj;
  int row = 0;
  for (int t = 0; t < slots_; ++t) {
    slot_jac.push_back(injection_jacobian(feeder_, states[t]));
    inj.push_back(injections(feeder_, states[t]));
    const SlotData& z = data_.values[t];
    const SlotData& sd = data_.sigma[t];
    const BusState& s = states[t];
    const int col0 = 2 * n * t;
    if (phasor) {
      for (int i = 0; i < m; ++i) {
        const int b = setup_.probing[i];
        const double sig = std::hypot(std::cos(z.theta(i)) * sd.u(i),
                                      z.u(i) * std::sin(z.theta(i)) * sd.theta(i));
        jac(row, col0 + b) = std::cos(s.theta(b)) / sig;
        jac(row, col0 + n + b) = -s.u(b) * std::sin(s.theta(b)) / sig;
        ++row;
      }
      for (int i = 0; i < m; ++i) {
        const int b = setup_.probing[i];
        const double sig = std::hypot(std::sin(z.theta(i)) * sd.u(i),
                                      z.u(i) * std::cos(z.theta(i)) * sd.theta(i));
        jac(row, col0 + b) = std::sin(s.theta(b)) / sig;
        jac(row, col0 + n + b) = s.u(b) * std::cos(s.theta(b)) / sig;
        ++row;
      }
    } else {
      for (int i = 0; i < m; ++i) {
        jac(row, col0 + setup_.probing[i]) = 1.0 / sd.u(i);
        ++row;
      }
    }
    for (int i = 0; i < m; ++i) {
      jac.block(row++, col0, 1, 2 * n) = slot_jac[t].row(setup_.probing[i]) / sd.p(i);
    }
    for (int i = 0; i < m; ++i) {
      jac.block(row++, col0, 1, 2 * n) = slot_jac[t].row(n + setup_.probing[i]) / sd.q(i);
    }
  }
  for (int t = 0; t + 1 < slots_; ++t) {
    for (int pass = 0; pass < 2; ++pass) {
      for (int i = 0; i < o; ++i) {
        const int r = pass * n + setup_.non_metered[i];
        const double sig = coupling_sigma_(pass * o + i);
        jac.block(row, 2 * n * t, 1, 2 * n) = slot_jac[t].row(r) / sig;
        jac.block(row, 2 * n * (t + 1), 1, 2 * n) = -slot_jac[t + 1].row(r) / sig;
        ++row;
      }
    }
  }
  for (int t = 0; t < slots_; ++t) {
    for (int b : config_.zero_injection_buses) {
      jac.block(row++, 2 * n * t, 1, 2 * n) = slot_jac[t].row(b) / zero_sigma_;
      jac.block(row++, 2 * n * t, 1, 2 * n) = slot_jac[t].row(n + b) / zero_sigma_;
    }
  }
  if (config_.load_box) {
    const LoadUncertainty& box = *config_.load_box;
    for (int t = 0; t < slots_; ++t) {
      const Eigen::VectorXd s = stack_injections(inj[t], setup_.non_metered);
      for (int k = 0; k < 2 * o; ++k) {
        if (s(k) > box.upper(k) || s(k) < box.lower(k)) {
          const int r = (k < o ? 0 : n) + setup_.non_metered[k % o];
          jac.block(row, 2 * n * t, 1, 2 * n) = slot_jac[t].row(r) / coupling_sigma_(k);
        }
        ++row;
      }
    }
  }
  return jac;
}

Eigen::VectorXd P2LObjective::irls_weights(const Eigen::VectorXd& r) const {
  Eigen::VectorXd w = Eigen::VectorXd::Ones(r.size());
  const double delta = config_.absolute_smoothing;
  for (Eigen::Index k = 0; k < r.size(); ++k) {
    // d/dr sqrt(r^2 + delta^2) = 2 w r
    if (penalty_[k] == Penalty::absolute) w(k) = 0.5 / std::sqrt(r(k) * r(k) + delta * delta);
  }
  return w;
}

double P2LObjective::value_from_residuals(const Eigen::VectorXd& r) const {
  const double delta = config_.absolute_smoothing;
  double total = 0.0;
  for (Eigen::Index k = 0; k < r.size(); ++k) {
    total += penalty_[k] == Penalty::squared ? r(k) * r(k) : std::sqrt(r(k) * r(k) + delta * delta);
  }
  return total;
}

double P2LObjective::value(const Eigen::VectorXd& x) const {
  return value_from_residuals(residuals(x));
}

Eigen::VectorXd P2LObjective::gradient(const Eigen::VectorXd& x) const {
  const Eigen::VectorXd r = residuals(x);
  const Eigen::VectorXd w = irls_weights(r);
  return 2.0 * jacobian(x).transpose() * (w.array() * r.array()).matrix();
}

namespace {

struct DescentOutcome {
  Eigen::VectorXd x;
  double value = 0.0;
  double gradient_norm = 0.0;
  int iterations = 0;
  bool converged = false;
};

bool states_positive(const Eigen::VectorXd& x, int buses) {
  for (Eigen::Index i = 0; i < x.size(); i += 2 * buses) {
    if ((x.segment(i, buses).array() <= 0.0).any()) return false;
  }
  return true;
}

// Share of the (reweighted) residual that lies in the range of the
// Jacobian: the norm of the Gauss-Newton prediction relative to the
// residual norm. Zero exactly at stationary points, invariant to channel
// and variable scaling, and unlike a gradient test not fooled by
// ill-conditioned directions.
double range_fraction(const Eigen::VectorXd& qtb, const Eigen::VectorXd& b) {
  const double bn = b.norm();
  return bn == 0.0 ? 0.0 : qtb.norm() / bn;
}

// Per-slot power flows from stacked injections [p_1; q_1; ...], each warm
// started from the matching slot of `warm`. Empty when a slot has no
// solution near its warm start.
std::optional<Eigen::VectorXd> states_from_injections(const FeederModel& feeder, const Eigen::VectorXd& s,
                                                      const Eigen::VectorXd& warm) {
  const int n = feeder.size();
  const PowerFlowOptions pf;
  Eigen::VectorXd x(s.size());
  for (Eigen::Index off = 0; off < s.size(); off += 2 * n) {
    Injections target{s.segment(off, n), s.segment(off + n, n)};
    const BusState init = BusState::from_stacked(warm.segment(off, 2 * n));
    try {
      x.segment(off, 2 * n) = solve_pf(feeder, target, pf, &init).state.stacked();
    } catch (const PowerFlowError&) {
      return std::nullopt;
    }
  }
  return x;
}

Eigen::VectorXd injections_of(const FeederModel& feeder, const Eigen::VectorXd& x) {
  const int n = feeder.size();
  Eigen::VectorXd s(x.size());
  for (Eigen::Index off = 0; off < x.size(); off += 2 * n) {
    s.segment(off, 2 * n) = injections(feeder, BusState::from_stacked(x.segment(off, 2 * n))).stacked();
  }
  return s;
}

// Levenberg-Marquardt with IRLS weights over the per-slot bus injections;
// states follow from power flows. In these coordinates the injection,
// coupling and load-box rows are linear and only the voltage rows bend,
// which removes the curved valley the tightly weighted injection rows
// carve into state space. Only objective-decreasing steps are accepted.
// Steps come from a QR factorization of the column-scaled weighted
// Jacobian, which keeps them accurate when channel weights span many
// orders of magnitude.
DescentOutcome levenberg_marquardt(const FeederModel& feeder, const P2LObjective& objective,
                                   const Eigen::VectorXd& x0, const NoisyOptions& options) {
  DescentOutcome out;
  const int n = feeder.size();
  const Eigen::Index dim = x0.size();
  Eigen::VectorXd x = x0;
  Eigen::VectorXd s = injections_of(feeder, x);
  Eigen::VectorXd r = objective.residuals(x);
  double value = objective.value_from_residuals(r);
  double lambda = 0.0;
  int iter = 0;
  int steps = 0;
  double gnorm = std::numeric_limits<double>::infinity();
  for (; iter < options.max_iterations; ++iter) {
    const Eigen::VectorXd sw = objective.irls_weights(r).cwiseSqrt();
    const Eigen::MatrixXd jx = objective.jacobian(x);
    Eigen::MatrixXd a(jx.rows(), dim);
    for (Eigen::Index off = 0; off < dim; off += 2 * n) {
      // d r / d s = (d r / d x)(d s / d x)^-1, slot by slot.
      const Eigen::MatrixXd g = injection_jacobian(feeder, BusState::from_stacked(x.segment(off, 2 * n)));
      a.middleCols(off, 2 * n) =
          g.transpose().partialPivLu().solve(jx.middleCols(off, 2 * n).transpose()).transpose();
    }
    a = sw.asDiagonal() * a;
    const Eigen::VectorXd b = sw.cwiseProduct(r);
    Eigen::VectorXd scale = a.colwise().norm().transpose();
    for (Eigen::Index j = 0; j < dim; ++j) {
      if (!(scale(j) > 0.0)) scale(j) = 1.0;
    }
    a = a * scale.cwiseInverse().asDiagonal();
    const Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
    const Eigen::MatrixXd rmat = qr.matrixQR().topRows(dim).triangularView<Eigen::Upper>();
    const Eigen::VectorXd qtb = (qr.householderQ().transpose() * b).head(dim);
    gnorm = range_fraction(qtb, b);
    if (gnorm <= options.gradient_tolerance) {
      out.converged = true;
      break;
    }

    bool accepted = false;
    while (lambda < 1e10) {
      Eigen::VectorXd z;
      if (lambda == 0.0) {
        // Undamped Gauss-Newton step straight from the triangular factor.
        z = rmat.triangularView<Eigen::Upper>().solve(-qtb);
      } else {
        Eigen::MatrixXd stacked(2 * dim, dim);
        stacked << rmat, std::sqrt(lambda) * Eigen::MatrixXd::Identity(dim, dim);
        Eigen::VectorXd rhs = Eigen::VectorXd::Zero(2 * dim);
        rhs.head(dim) = -qtb;
        z = stacked.householderQr().solve(rhs);
      }
      const Eigen::VectorXd s_try = s + z.cwiseQuotient(scale);
      const auto x_try = s_try.allFinite() ? states_from_injections(feeder, s_try, x) : std::nullopt;
      if (x_try) {
        const Eigen::VectorXd r_try = objective.residuals(*x_try);
        const double v_try = objective.value_from_residuals(r_try);
        if (v_try < value) {
          const double decrease = value - v_try;
          x = *x_try;
          s = s_try;
          r = r_try;
          value = v_try;
          lambda = lambda < 1e-9 ? 0.0 : lambda / 5.0;
          accepted = true;
          ++steps;
          if (decrease <= options.objective_tolerance * (1.0 + value)) iter = options.max_iterations + 1;
          break;
        }
      }
      lambda = lambda == 0.0 ? 1e-8 : 4.0 * lambda;
    }
    if (!accepted || iter >= options.max_iterations) {
      // No damping yields a decrease, or the decrease is negligible against
      // the noise scale: stationary for estimation purposes.
      out.converged = !accepted || iter > options.max_iterations;
      break;
    }
  }
  out.x = std::move(x);
  out.value = value;
  out.gradient_norm = gnorm;
  out.iterations = steps;
  return out;
}

// One damped Gauss-Newton step on the metering rows only; slots decouple.
Eigen::VectorXd metering_pass(const P2LObjective& objective, const Eigen::VectorXd& x0, int buses) {
  const Eigen::VectorXd r = objective.residuals(x0);
  Eigen::MatrixXd jac = objective.jacobian(x0);
  Eigen::VectorXd rr = r;
  for (Eigen::Index k = 0; k < r.size(); ++k) {
    if (!objective.is_metering_row(static_cast<int>(k))) {
      jac.row(k).setZero();
      rr(k) = 0.0;
    }
  }
  const Eigen::VectorXd step = jac.colPivHouseholderQr().solve(-rr);
  Eigen::VectorXd x = x0 + step;
  if (!step.allFinite() || !states_positive(x, buses)) return x0;
  return x;
}

}  // namespace

EstimationResult estimate_noisy(const FeederModel& feeder, const ProbingSetup& setup,
                                const MeasurementSet& data, const PenaltyConfig& config,
                                const StateSequence* init, const NoisyOptions& options) {
  const P2LObjective objective(feeder, setup, data, config);
  const int n = feeder.size();
  const int t_count = setup.horizon;

  std::vector<std::pair<std::string, Eigen::VectorXd>> starts;
  if (init) {
    if (static_cast<int>(init->size()) != t_count) throw std::invalid_argument("initial state has wrong length");
    starts.emplace_back("given", P2LObjective::stack(*init));
  } else {
    const Eigen::VectorXd flat = P2LObjective::stack(flat_sequence(feeder, t_count));
    starts.emplace_back("flat", metering_pass(objective, flat, n));
    if (options.multi_start) {
      // LDF prediction from the measured probing injections and the
      // anticipated non-metered loads.
      const LdfModel ldf = build_ldf(feeder, setup);
      const int m = setup.probing_count();
      const int o = setup.non_metered_count();
      const Eigen::VectorXd s_o = config.load_box ? config.load_box->center() : Eigen::VectorXd::Zero(2 * o);
      StateSequence warm;
      for (int t = 0; t < t_count; ++t) {
        Eigen::VectorXd s_m(2 * m);
        s_m << data.values[t].p, data.values[t].q;
        const Eigen::VectorXd y = ldf.approx_state(s_m, s_o);
        BusState s{(y.head(n).array() + feeder.base_voltage()).matrix(), y.tail(n)};
        if ((s.u.array() <= 0.0).any()) s = BusState::flat(feeder);
        warm.push_back(std::move(s));
      }
      starts.emplace_back("ldf", P2LObjective::stack(warm));

      // AC power flow with the same injections, linearization-free.
      starts.emplace_back("power_flow", P2LObjective::stack(measured_injection_start(feeder, setup, data, s_o)));
    }
  }

  DescentOutcome best;
  std::string best_start;
  bool have = false;
  // Most informed start first; stop once the objective is as small as the
  // noise model predicts (about one unit per residual row).
  for (auto it = starts.rbegin(); it != starts.rend(); ++it) {
    DescentOutcome run = levenberg_marquardt(feeder, objective, it->second, options);
    if (!have || run.value < best.value) {
      best = std::move(run);
      best_start = it->first;
      have = true;
    }
    if (best.value <= objective.residual_count()) break;
  }

  EstimationResult out;
  out.states = objective.unstack(best.x);
  out.loads = recover_loads(feeder, setup, out.states);
  if (config.load_box && out.loads.average.size() > 0) {
    out.loads.average = out.loads.average.cwiseMax(config.load_box->lower).cwiseMin(config.load_box->upper);
  }

  const Eigen::VectorXd r = objective.residuals(best.x);
  double metering_sq = 0.0;
  double coupling_sq = 0.0;
  int metering_rows = 0;
  int coupling_rows = 0;
  for (Eigen::Index k = 0; k < r.size(); ++k) {
    if (objective.is_metering_row(static_cast<int>(k))) {
      metering_sq += r(k) * r(k);
      ++metering_rows;
    } else if (objective.is_coupling_row(static_cast<int>(k))) {
      coupling_sq += r(k) * r(k);
      ++coupling_rows;
    }
  }
  auto& diag = out.diagnostics;
  diag.objective = best.value;
  diag.gradient_norm = best.gradient_norm;
  diag.iterations = best.iterations;
  diag.converged = best.converged;
  diag.start = best_start;
  diag.metering_rms = metering_rows ? std::sqrt(metering_sq / metering_rows) : 0.0;
  diag.coupling_rms = coupling_rows ? std::sqrt(coupling_sq / coupling_rows) : 0.0;
  diag.residual_norm =
      (p2l_equations(feeder, setup, out.states) - stacked_measurements(setup, data)).lpNorm<Eigen::Infinity>();
  diag.condition = condition_number(assemble_p2l_jacobian(feeder, setup, out.states).matrix);
  return out;
}

ErrorMetrics error_metrics(const StateSequence& true_states,
                           const std::vector<Eigen::VectorXd>& true_loads,
                           const EstimationResult& estimate) {
  if (true_states.size() != estimate.states.size() || true_states.empty()) {
    throw std::invalid_argument("state sequences differ in length");
  }
  ErrorMetrics out;
  const Eigen::Index n = true_states.front().u.size();
  double sq = 0.0;
  for (std::size_t t = 0; t < true_states.size(); ++t) {
    sq += (true_states[t].phasors() - estimate.states[t].phasors()).squaredNorm();
  }
  out.state_rmse = std::sqrt(sq / (static_cast<double>(n) * static_cast<double>(true_states.size())));

  const Eigen::Index o2 = estimate.loads.average.size();
  const Eigen::Index o = o2 / 2;
  Eigen::VectorXd truth = Eigen::VectorXd::Zero(o2);
  for (const auto& s : true_loads) truth += s;
  if (!true_loads.empty()) truth /= static_cast<double>(true_loads.size());
  if (truth.size() != o2) throw std::invalid_argument("true loads have wrong dimension");

  const Eigen::VectorXd abs_err = estimate.loads.average - truth;
  auto percent = [&](Eigen::Index k) {
    return std::abs(truth(k)) < kPercentGuard ? std::numeric_limits<double>::quiet_NaN()
                                              : 100.0 * abs_err(k) / truth(k);
  };
  out.active_percent.resize(o);
  out.reactive_percent.resize(o);
  for (Eigen::Index i = 0; i < o; ++i) {
    out.active_percent(i) = percent(i);
    out.reactive_percent(i) = percent(o + i);
  }
  out.active_absolute = abs_err.head(o);
  out.reactive_absolute = abs_err.tail(o);
  return out;
}

}  // namespace gridprobe
