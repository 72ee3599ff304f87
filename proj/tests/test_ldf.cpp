#include <doctest.h>

#include <cmath>
#include <random>

#include "gridprobe/acpf.hpp"
#include "gridprobe/ldf.hpp"
#include "support.hpp"

using namespace gridprobe;
using testing::random_tree;

namespace {

Eigen::VectorXd random_vector(Eigen::Index n, std::mt19937_64& rng, double scale = 1.0) {
  std::uniform_real_distribution<double> d(-scale, scale);
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = d(rng);
  return v;
}

Eigen::VectorXd pf_deviation(const FeederModel& f, const Injections& s) {
  const BusState state = solve_pf(f, s).state;
  Eigen::VectorXd y(2 * f.size());
  y << state.u.array() - f.base_voltage(), state.theta;
  return y;
}

}  // namespace

TEST_CASE("zero injections predict the flat profile") {
  const FeederModel f = testing::bundled_feeder();
  const ProbingSetup setup = testing::alternating_setup(f, 2, DataMode::phasor);
  const LdfModel ldf = build_ldf(f, setup);
  CHECK(ldf.k.rows() == f.size());
  CHECK(ldf.k.cols() == 2 * setup.probing_count());
  CHECK(ldf.l.cols() == 2 * setup.non_metered_count());
  const Eigen::VectorXd y = ldf.approx_state(Eigen::VectorXd::Zero(ldf.k.cols()),
                                             Eigen::VectorXd::Zero(ldf.l.cols()));
  CHECK(y.cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("linearization error shrinks quadratically") {
  const FeederModel f = testing::bundled_feeder();
  const ProbingSetup setup = testing::alternating_setup(f, 2, DataMode::phasor);
  const LdfModel ldf = build_ldf(f, setup);
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 5; ++trial) {
    const Eigen::VectorXd dir_m = random_vector(ldf.k.cols(), rng);
    const Eigen::VectorXd dir_o = random_vector(ldf.l.cols(), rng);
    const auto error = [&](double eps) {
      const Injections s = scatter_injections(f.size(), setup, eps * dir_m, eps * dir_o);
      return (ldf.approx_state(eps * dir_m, eps * dir_o) - pf_deviation(f, s)).norm();
    };
    const double eps = 1e-3;
    const double ratio = error(eps) / error(eps / 2);
    CHECK(ratio == doctest::Approx(4.0).epsilon(0.2));
  }
}

TEST_CASE("reactive injection on a reactance-only line raises the magnitude by x q") {
  const double x = 0.05, q = 1e-3;
  const FeederModel f = testing::two_bus(0.0, x);
  const ProbingSetup setup{{0}, {}, 1, DataMode::phasor};
  const LdfModel ldf = build_ldf(f, setup);
  Eigen::VectorXd s_m(2);
  s_m << 0.0, q;
  const Eigen::VectorXd y = ldf.approx_state(s_m, Eigen::VectorXd());
  CHECK(y(0) == doctest::Approx(x * q).epsilon(1e-9));
  CHECK(std::abs(y(1)) < 1e-15);
}

TEST_CASE("approx_state is linear and matches the inverse Jacobian") {
  const FeederModel f = random_tree(12, 6, 0.01);
  const ProbingSetup setup = testing::alternating_setup(f, 2, DataMode::nonphasor);
  const LdfModel ldf = build_ldf(f, setup);
  const Eigen::MatrixXd inverse = injection_jacobian(f, BusState::flat(f)).inverse();
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::VectorXd a = random_vector(ldf.k.cols(), rng, 0.1);
    const Eigen::VectorXd b = random_vector(ldf.k.cols(), rng, 0.1);
    const Eigen::VectorXd o = random_vector(ldf.l.cols(), rng, 0.1);
    const Eigen::VectorXd zero_o = Eigen::VectorXd::Zero(ldf.l.cols());

    // The shunts make the map affine; the part beyond the offset is linear.
    const auto lin = [&](const Eigen::VectorXd& s) -> Eigen::VectorXd { return ldf.approx_state(s, zero_o) - ldf.offset; };
    const Eigen::VectorXd sum = lin(a + b);
    CHECK((sum - lin(a) - lin(b)).cwiseAbs().maxCoeff() <= 1e-15 * (1.0 + sum.cwiseAbs().maxCoeff()) * 10);
    CHECK((lin(3.0 * a) - 3.0 * lin(a)).norm() <= 1e-14 * (1.0 + sum.norm()));

    // Whole-matrix route: offset + J^-1 applied to the full injection vector.
    const Eigen::VectorXd whole =
        ldf.offset + inverse * scatter_injections(f.size(), setup, a, o).stacked();
    const Eigen::VectorXd block = ldf.approx_state(a, o);
    CHECK((whole - block).cwiseAbs().maxCoeff() <= 1e-12 * (1.0 + whole.cwiseAbs().maxCoeff()));
  }
}

TEST_CASE("predicted state differences do not depend on the non-metered loads") {
  const FeederModel f = testing::bundled_feeder();
  const ProbingSetup setup = testing::alternating_setup(f, 2, DataMode::phasor, 8);
  const LdfModel ldf = build_ldf(f, setup);
  std::mt19937_64 rng(12);
  const Eigen::VectorXd s = random_vector(ldf.k.cols(), rng, 0.2);
  const Eigen::VectorXd s2 = random_vector(ldf.k.cols(), rng, 0.2);
  const Eigen::VectorXd base =
      ldf.approx_state(s, Eigen::VectorXd::Zero(ldf.l.cols())) -
      ldf.approx_state(s2, Eigen::VectorXd::Zero(ldf.l.cols()));
  for (int trial = 0; trial < 10; ++trial) {
    const Eigen::VectorXd o = random_vector(ldf.l.cols(), rng, 0.5);
    const Eigen::VectorXd diff = ldf.approx_state(s, o) - ldf.approx_state(s2, o);
    CHECK((diff - base).cwiseAbs().maxCoeff() <= 1e-14);
  }
}

TEST_CASE("LDF stays close to the AC power flow at light loading") {
  // 0.05 pu of total load spread over the buses; the recorded worst
  // relative error on the bundled feeder is about 0.05%.
  const FeederModel f = testing::bundled_feeder();
  const ProbingSetup setup = testing::alternating_setup(f, 2, DataMode::phasor);
  const LdfModel ldf = build_ldf(f, setup);
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> share(0.0, 1.0);
  for (int trial = 0; trial < 10; ++trial) {
    Injections s = Injections::zero(f.size());
    for (int n = 0; n < f.size(); ++n) s.p(n) = -share(rng);
    s.p *= 0.05 / -s.p.sum();
    s.q = 0.5 * s.p;
    const Eigen::VectorXd y_pf = pf_deviation(f, s);
    const Eigen::VectorXd y_ldf =
        ldf.approx_state(stack_injections(s, setup.probing), stack_injections(s, setup.non_metered));
    CHECK((y_ldf - y_pf).norm() / y_pf.norm() <= 0.05);
  }
}

TEST_CASE("stack and scatter are inverse") {
  const FeederModel f = random_tree(7, 1);
  const ProbingSetup setup = testing::alternating_setup(f, 2, DataMode::phasor);
  std::mt19937_64 rng(3);
  Injections s{random_vector(7, rng), random_vector(7, rng)};
  const Injections back = scatter_injections(7, setup, stack_injections(s, setup.probing),
                                             stack_injections(s, setup.non_metered));
  CHECK(back.p == s.p);
  CHECK(back.q == s.q);
}

TEST_CASE("linearizing about a loaded state reproduces that state at zero perturbation") {
  const FeederModel f = random_tree(9, 14);
  const ProbingSetup setup = testing::alternating_setup(f, 2, DataMode::phasor);
  Injections s = Injections::zero(f.size());
  s.p.setConstant(-0.05);
  s.q.setConstant(-0.02);
  const BusState ref = solve_pf(f, s).state;
  const LdfModel ldf = build_ldf(f, setup, &ref);
  const Eigen::VectorXd y =
      ldf.approx_state(stack_injections(s, setup.probing), stack_injections(s, setup.non_metered));
  Eigen::VectorXd expected(2 * f.size());
  expected << ref.u.array() - 1.0, ref.theta;
  CHECK((y - expected).cwiseAbs().maxCoeff() <= 1e-10);
}
