#include "gridprobe/ldf.hpp"

namespace gridprobe {

Eigen::VectorXd LdfModel::approx_state(const Eigen::VectorXd& s_m,
                                       const Eigen::VectorXd& s_o) const {
  if (s_m.size() != k.cols() || s_o.size() != l.cols()) {
    throw std::invalid_argument("LDF injection vector has wrong dimension");
  }
  const int n = buses();
  Eigen::VectorXd y = offset;
  y.head(n) += k * s_m;
  y.tail(n) += m_theta * s_m;
  if (s_o.size() > 0) {
    y.head(n) += l * s_o;
    y.tail(n) += n_theta * s_o;
  }
  return y;
}

Eigen::MatrixXd LdfModel::probing_response() const {
  Eigen::MatrixXd r(2 * buses(), k.cols());
  r << k, m_theta;
  return r;
}

Eigen::VectorXd stack_injections(const Injections& s, const std::vector<int>& buses) {
  const auto count = static_cast<Eigen::Index>(buses.size());
  Eigen::VectorXd out(2 * count);
  for (Eigen::Index i = 0; i < count; ++i) {
    out(i) = s.p(buses[i]);
    out(count + i) = s.q(buses[i]);
  }
  return out;
}

Injections scatter_injections(int n, const ProbingSetup& setup, const Eigen::VectorXd& s_m,
                              const Eigen::VectorXd& s_o) {
  Injections s = Injections::zero(n);
  const int m = setup.probing_count();
  const int o = setup.non_metered_count();
  for (int i = 0; i < m; ++i) {
    s.p(setup.probing[i]) = s_m(i);
    s.q(setup.probing[i]) = s_m(m + i);
  }
  for (int i = 0; i < o; ++i) {
    s.p(setup.non_metered[i]) = s_o(i);
    s.q(setup.non_metered[i]) = s_o(o + i);
  }
  return s;
}

LdfModel build_ldf(const FeederModel& feeder, const ProbingSetup& setup,
                   const BusState* reference) {
  setup.validate(feeder);
  const int n = feeder.size();
  const BusState ref = reference ? *reference : BusState::flat(feeder);

  const Eigen::MatrixXd jac = injection_jacobian(feeder, ref);
  Eigen::FullPivLU<Eigen::MatrixXd> lu(jac);
  if (!lu.isInvertible()) throw LdfError("power-flow Jacobian is singular at the linearization point");
  // Sensitivity d[u; theta]/d[p; q].
  const Eigen::MatrixXd sens = lu.inverse();

  const int m = setup.probing_count();
  const int o = setup.non_metered_count();
  LdfModel model;
  model.probing = setup.probing;
  model.non_metered = setup.non_metered;
  model.base_voltage = feeder.base_voltage();
  model.k.resize(n, 2 * m);
  model.m_theta.resize(n, 2 * m);
  model.l.resize(n, 2 * o);
  model.n_theta.resize(n, 2 * o);
  for (int i = 0; i < m; ++i) {
    const int b = setup.probing[i];
    model.k.col(i) = sens.block(0, b, n, 1);
    model.k.col(m + i) = sens.block(0, n + b, n, 1);
    model.m_theta.col(i) = sens.block(n, b, n, 1);
    model.m_theta.col(m + i) = sens.block(n, n + b, n, 1);
  }
  for (int i = 0; i < o; ++i) {
    const int b = setup.non_metered[i];
    model.l.col(i) = sens.block(0, b, n, 1);
    model.l.col(o + i) = sens.block(0, n + b, n, 1);
    model.n_theta.col(i) = sens.block(n, b, n, 1);
    model.n_theta.col(o + i) = sens.block(n, n + b, n, 1);
  }

  // y(s) = y_ref + S (s - s_ref); fold the constant part into the offset.
  Eigen::VectorXd y_ref(2 * n);
  y_ref << (ref.u.array() - feeder.base_voltage()).matrix(), ref.theta;
  model.offset = y_ref - sens * injections(feeder, ref).stacked();
  return model;
}

}  // namespace gridprobe
