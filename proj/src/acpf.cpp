#include "gridprobe/acpf.hpp"

#include <cmath>

namespace gridprobe {

namespace {

// Full-length magnitude/angle vectors with the substation prepended.
struct PolarFull {
  Eigen::VectorXd u;
  Eigen::VectorXd theta;
};

PolarFull with_substation(const FeederModel& feeder, const BusState& state) {
  const int n = feeder.size();
  PolarFull full{Eigen::VectorXd(n + 1), Eigen::VectorXd(n + 1)};
  full.u(0) = feeder.base_voltage();
  full.theta(0) = 0.0;
  full.u.tail(n) = state.u;
  full.theta.tail(n) = state.theta;
  return full;
}

// p_i and q_i at full index i via the polar power-flow equations.
void polar_injection(const Eigen::MatrixXcd& y, const PolarFull& v, int i, double& p,
                     double& q) {
  p = 0.0;
  q = 0.0;
  for (int k = 0; k < y.cols(); ++k) {
    const double g = y(i, k).real();
    const double b = y(i, k).imag();
    if (g == 0.0 && b == 0.0) continue;
    const double d = v.theta(i) - v.theta(k);
    const double c = std::cos(d);
    const double s = std::sin(d);
    p += v.u(k) * (g * c + b * s);
    q += v.u(k) * (g * s - b * c);
  }
  p *= v.u(i);
  q *= v.u(i);
}

}  // namespace

BusState BusState::flat(const FeederModel& feeder) {
  return {Eigen::VectorXd::Constant(feeder.size(), feeder.base_voltage()),
          Eigen::VectorXd::Zero(feeder.size())};
}

Eigen::VectorXd BusState::stacked() const {
  Eigen::VectorXd x(u.size() + theta.size());
  x << u, theta;
  return x;
}

BusState BusState::from_stacked(const Eigen::VectorXd& x) {
  const Eigen::Index n = x.size() / 2;
  return {x.head(n), x.tail(n)};
}

Eigen::VectorXcd BusState::phasors() const {
  Eigen::VectorXcd v(u.size());
  for (Eigen::Index i = 0; i < u.size(); ++i) v(i) = std::polar(u(i), theta(i));
  return v;
}

Injections Injections::zero(int n) {
  return {Eigen::VectorXd::Zero(n), Eigen::VectorXd::Zero(n)};
}

Eigen::VectorXd Injections::stacked() const {
  Eigen::VectorXd s(p.size() + q.size());
  s << p, q;
  return s;
}

Injections injections(const FeederModel& feeder, const BusState& state) {
  const int n = feeder.size();
  const PolarFull v = with_substation(feeder, state);
  Injections out = Injections::zero(n);
  for (int m = 0; m < n; ++m) polar_injection(feeder.admittance(), v, m + 1, out.p(m), out.q(m));
  return out;
}

std::complex<double> substation_injection(const FeederModel& feeder, const BusState& state) {
  double p = 0.0;
  double q = 0.0;
  polar_injection(feeder.admittance(), with_substation(feeder, state), 0, p, q);
  return {p, q};
}

Eigen::MatrixXd injection_jacobian(const FeederModel& feeder, const BusState& state) {
  const int n = feeder.size();
  const Eigen::MatrixXcd& y = feeder.admittance();
  const PolarFull v = with_substation(feeder, state);
  const Injections s = injections(feeder, state);

  // Rows [p; q], columns [u; theta].
  Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(2 * n, 2 * n);
  for (int m = 0; m < n; ++m) {
    const int i = m + 1;
    for (int l = 0; l < n; ++l) {
      const int k = l + 1;
      if (k == i) continue;
      const double g = y(i, k).real();
      const double b = y(i, k).imag();
      if (g == 0.0 && b == 0.0) continue;
      const double d = v.theta(i) - v.theta(k);
      const double c = std::cos(d);
      const double sn = std::sin(d);
      const double gc_bs = g * c + b * sn;
      const double gs_bc = g * sn - b * c;
      jac(m, l) = v.u(i) * gc_bs;
      jac(m, n + l) = v.u(i) * v.u(k) * gs_bc;
      jac(n + m, l) = v.u(i) * gs_bc;
      jac(n + m, n + l) = -v.u(i) * v.u(k) * gc_bs;
    }
    const double gii = y(i, i).real();
    const double bii = y(i, i).imag();
    const double ui = v.u(i);
    jac(m, m) = s.p(m) / ui + gii * ui;
    jac(m, n + m) = -s.q(m) - bii * ui * ui;
    jac(n + m, m) = s.q(m) / ui - bii * ui;
    jac(n + m, n + m) = s.p(m) - gii * ui * ui;
  }
  return jac;
}

PowerFlowResult solve_pf(const FeederModel& feeder, const Injections& target,
                         const PowerFlowOptions& options, const BusState* init) {
  const int n = feeder.size();
  if (target.p.size() != n || target.q.size() != n) {
    throw std::invalid_argument("power flow target has wrong dimension");
  }
  const Eigen::VectorXd goal = target.stacked();
  BusState state = init ? *init : BusState::flat(feeder);

  auto mismatch = [&](const BusState& s) { return Eigen::VectorXd(injections(feeder, s).stacked() - goal); };

  Eigen::VectorXd f = mismatch(state);
  double norm = f.lpNorm<Eigen::Infinity>();
  int iter = 0;
  while (norm > options.tolerance) {
    if (iter >= options.max_iterations) {
      throw PowerFlowError("power flow did not converge after " +
                           std::to_string(options.max_iterations) +
                           " iterations (residual " + std::to_string(norm) + ")");
    }
    ++iter;
    const Eigen::MatrixXd jac = injection_jacobian(feeder, state);
    const Eigen::VectorXd step = jac.partialPivLu().solve(-f);
    if (!step.allFinite()) throw PowerFlowError("power flow Jacobian is singular");

    double scale = 1.0;
    BusState trial;
    Eigen::VectorXd f_trial;
    double trial_norm = 0.0;
    for (int h = 0; h <= options.max_halvings; ++h) {
      trial = BusState::from_stacked(state.stacked() + scale * step);
      if ((trial.u.array() > 0.0).all()) {
        f_trial = mismatch(trial);
        trial_norm = f_trial.lpNorm<Eigen::Infinity>();
        if (trial_norm < norm) break;
      }
      scale *= 0.5;
    }
    if (!(trial_norm < norm) || !(trial.u.array() > 0.0).all()) {
      throw PowerFlowError("power flow stalled: damped Newton step failed to reduce the mismatch");
    }
    state = std::move(trial);
    f = std::move(f_trial);
    norm = trial_norm;
  }
  return {std::move(state), iter, norm};
}

int metering_rows_per_slot(const ProbingSetup& setup) {
  const int m = setup.probing_count();
  return (setup.mode == DataMode::phasor ? 4 : 3) * m;
}

Eigen::VectorXd p2l_equations(const FeederModel& feeder, const ProbingSetup& setup,
                              const StateSequence& states) {
  const int t_count = static_cast<int>(states.size());
  const int o = setup.non_metered_count();
  const int per_slot = metering_rows_per_slot(setup);
  Eigen::VectorXd h(per_slot * t_count + 2 * o * std::max(t_count - 1, 0));

  std::vector<Injections> slot_injections;
  slot_injections.reserve(states.size());
  int row = 0;
  for (const auto& state : states) {
    slot_injections.push_back(injections(feeder, state));
    const Injections& s = slot_injections.back();
    for (int b : setup.probing) h(row++) = state.u(b);
    if (setup.mode == DataMode::phasor) {
      for (int b : setup.probing) h(row++) = state.theta(b);
    }
    for (int b : setup.probing) h(row++) = s.p(b);
    for (int b : setup.probing) h(row++) = s.q(b);
  }
  for (int t = 0; t + 1 < t_count; ++t) {
    for (int b : setup.non_metered) h(row++) = slot_injections[t].p(b) - slot_injections[t + 1].p(b);
    for (int b : setup.non_metered) h(row++) = slot_injections[t].q(b) - slot_injections[t + 1].q(b);
  }
  return h;
}

P2LJacobian assemble_p2l_jacobian(const FeederModel& feeder, const ProbingSetup& setup,
                                  const StateSequence& states) {
  const int n = feeder.size();
  const int t_count = static_cast<int>(states.size());
  const int o = setup.non_metered_count();
  const bool phasor = setup.mode == DataMode::phasor;

  P2LJacobian out;
  out.rows_per_slot = metering_rows_per_slot(setup);
  out.slots = t_count;
  out.buses = n;
  const int rows = out.rows_per_slot * t_count + 2 * o * std::max(t_count - 1, 0);
  out.matrix = Eigen::MatrixXd::Zero(rows, 2 * n * t_count);
  out.rows.reserve(rows);

  std::vector<Eigen::MatrixXd> slot_jacobians;
  slot_jacobians.reserve(states.size());
  int row = 0;
  for (int t = 0; t < t_count; ++t) {
    slot_jacobians.push_back(injection_jacobian(feeder, states[t]));
    const Eigen::MatrixXd& jac = slot_jacobians.back();
    const int col0 = 2 * n * t;
    for (int b : setup.probing) {
      out.matrix(row, col0 + b) = 1.0;
      out.rows.push_back({RowKind::magnitude, b, t});
      ++row;
    }
    if (phasor) {
      for (int b : setup.probing) {
        out.matrix(row, col0 + n + b) = 1.0;
        out.rows.push_back({RowKind::angle, b, t});
        ++row;
      }
    }
    for (int b : setup.probing) {
      out.matrix.block(row, col0, 1, 2 * n) = jac.row(b);
      out.rows.push_back({RowKind::active, b, t});
      ++row;
    }
    for (int b : setup.probing) {
      out.matrix.block(row, col0, 1, 2 * n) = jac.row(n + b);
      out.rows.push_back({RowKind::reactive, b, t});
      ++row;
    }
  }
  for (int t = 0; t + 1 < t_count; ++t) {
    const int col0 = 2 * n * t;
    const int col1 = 2 * n * (t + 1);
    for (int pass = 0; pass < 2; ++pass) {
      for (int b : setup.non_metered) {
        const int r = pass * n + b;
        out.matrix.block(row, col0, 1, 2 * n) = slot_jacobians[t].row(r);
        out.matrix.block(row, col1, 1, 2 * n) = -slot_jacobians[t + 1].row(r);
        out.rows.push_back({pass == 0 ? RowKind::coupling_active : RowKind::coupling_reactive, b, t});
        ++row;
      }
    }
  }
  return out;
}

double condition_number(const Eigen::MatrixXd& matrix) {
  if (matrix.rows() == 0 || matrix.cols() == 0) return kInfiniteCondition;
  if (matrix.rows() < matrix.cols()) return kInfiniteCondition;
  Eigen::BDCSVD<Eigen::MatrixXd> svd(matrix);
  const Eigen::VectorXd& sv = svd.singularValues();
  const double smax = sv(0);
  const double smin = sv(sv.size() - 1);
  if (!(smax > 0.0) || smin < 1e-14 * smax) return kInfiniteCondition;
  return smax / smin;
}

}  // namespace gridprobe
