#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "gradflow/ode.hpp"
#include "test_util.hpp"

namespace gradflow {
namespace {

Vector ones(int n) { return Vector::LinSpaced(n, 1.0, 2.0); }

IntegratorConfig config(IntegratorMethod m, double t_end, double tol = 1e-6) {
  IntegratorConfig cfg;
  cfg.method = m;
  cfg.t_end = t_end;
  cfg.abstol = tol;
  cfg.reltol = tol;
  cfg.grid_points = 50;
  return cfg;
}

struct TeacherStudent {
  Net net{2, {{4, ActivationKind::tanh, true}, {1, ActivationKind::identity, true}}};
  Dataset data;
  ParamVector theta0;

  explicit TeacherStudent(std::uint64_t seed) {
    data = testing::random_dataset(net, 200, seed);
    data.targets = forward_batch(net, init_params(net, seed + 1), data);
    theta0 = init_params(net, seed + 2, 0.5);
  }
};

TEST(FlowRhs, ZeroAtCriticalPoint) {
  const QuadraticObjective q(testing::random_spd(3, 1, 10, 1));
  const TeacherStudent ts(3);
  // The teacher itself is a global minimum.
  Dataset data = ts.data;
  const ParamVector teacher = init_params(ts.net, 4);
  data.targets = forward_batch(ts.net, teacher, data);
  EXPECT_LE(flow_rhs(ts.net, teacher, data, {}).lpNorm<Eigen::Infinity>(), 1e-15);
}

TEST(FlowRhs, LinearInEta) {
  const TeacherStudent ts(5);
  LossConfig one, two;
  two.eta = 2.0;
  const Vector a = flow_rhs(ts.net, ts.theta0, ts.data, one);
  const Vector b = flow_rhs(ts.net, ts.theta0, ts.data, two);
  EXPECT_TRUE((b.array() == 2.0 * a.array()).all());
}

TEST(FlowRhs, MatchesFiniteDifferences) {
  const TeacherStudent ts(6);
  LossConfig cfg;
  cfg.eta = 0.7;
  const Vector rhs = flow_rhs(ts.net, ts.theta0, ts.data, cfg);
  const Vector fd = -cfg.eta * fd_gradient(ts.net, ts.theta0, ts.data, cfg);
  EXPECT_LE(relative_linf_error(rhs, fd), 1e-6);
}

TEST(FlowJacobian, ConstantForLinearRegression) {
  const Net net(3, {{1, ActivationKind::identity, false}});
  const Dataset data = testing::random_dataset(net, 40, 7);
  LossConfig cfg;
  cfg.eta = 1.5;
  const Matrix x = data.inputs;
  const Matrix want = -cfg.eta * 2.0 * x.transpose() * x / 40.0;
  for (std::uint64_t seed : {1, 2, 3}) {
    const Matrix j = flow_jacobian(net, init_params(net, seed), data, cfg);
    EXPECT_LE(relative_linf_error(j, want), 1e-13);
  }
}

TEST(FlowJacobian, SymmetricAndMatchesRhsDifferences) {
  const TeacherStudent ts(8);
  LossConfig cfg;
  cfg.eta = 0.3;
  const Matrix j = flow_jacobian(ts.net, ts.theta0, ts.data, cfg);
  EXPECT_LE((j - j.transpose()).lpNorm<Eigen::Infinity>(), 1e-12);
  const Eigen::Index p = j.rows();
  Matrix fd(p, p);
  const double h = 1e-5;
  for (Eigen::Index k = 0; k < p; ++k) {
    ParamVector plus = ts.theta0, minus = ts.theta0;
    plus(k) += h;
    minus(k) -= h;
    fd.col(k) = (flow_rhs(ts.net, plus, ts.data, cfg) - flow_rhs(ts.net, minus, ts.data, cfg)) /
                (2.0 * h);
  }
  EXPECT_LE(relative_linf_error(j, fd), 1e-5);
}

TEST(LogGrid, Endpoints) {
  const auto g = log_grid(1.0, 2);
  ASSERT_EQ(g.size(), 2u);
  EXPECT_EQ(g[0], 0.0);
  EXPECT_EQ(g[1], 1.0);
}

TEST(LogGrid, ConstantRatios) {
  const auto g = log_grid(50.0, 200);
  ASSERT_EQ(g.size(), 200u);
  EXPECT_DOUBLE_EQ(g[1], 50.0 * 1e-8);
  const double r = g[2] / g[1];
  for (std::size_t i = 2; i < g.size(); ++i) EXPECT_NEAR(g[i] / g[i - 1], r, 1e-12 * r);
}

TEST(LogGrid, LastPointExact) {
  const auto g = log_grid(1e3, 10000);
  EXPECT_EQ(g.back(), 1e3);
  for (std::size_t i = 1; i < g.size(); ++i) EXPECT_LT(g[i - 1], g[i]);
}

TEST(LogGrid, RejectsBadArguments) {
  EXPECT_THROW(log_grid(0.0, 5), std::invalid_argument);
  EXPECT_THROW(log_grid(1.0, 1), std::invalid_argument);
}

TEST(Integrate, ConstantAtEquilibrium) {
  const QuadraticObjective q(testing::random_spd(4, 1, 10, 2), ones(4));
  for (auto m : {IntegratorMethod::euler(0.01), IntegratorMethod::rk4(0.05),
                 IntegratorMethod::adaptive_rk45(), IntegratorMethod::rosenbrock()}) {
    const Trajectory tr = integrate(q, ones(4), 1.0, config(m, 10.0));
    EXPECT_EQ(tr.terminated_by, Termination::reached_T);
    ASSERT_EQ(tr.size(), 50u);
    for (const auto& s : tr.states) EXPECT_TRUE((s.array() == ones(4).array()).all());
  }
}

TEST(Integrate, TrajectoryShape) {
  const QuadraticObjective q(testing::random_spd(3, 1, 5, 3));
  const Vector theta0 = ones(3);
  const Trajectory tr = integrate(q, theta0, 1.0, config(IntegratorMethod::adaptive_rk45(), 2.0));
  EXPECT_EQ(tr.times.front(), 0.0);
  EXPECT_TRUE((tr.states.front().array() == theta0.array()).all());
  EXPECT_EQ(tr.times.back(), 2.0);
  EXPECT_EQ(tr.states.size(), tr.times.size());
  EXPECT_EQ(tr.losses.size(), tr.times.size());
  EXPECT_EQ(tr.grad_norms.size(), tr.times.size());
  for (std::size_t i = 1; i < tr.size(); ++i) EXPECT_LT(tr.times[i - 1], tr.times[i]);
  EXPECT_EQ(tr.method, "adaptive_rk45");
  EXPECT_GT(tr.work.n_grad, 0u);
  EXPECT_EQ(tr.work.n_hess, 0u);
}

TEST(Integrate, MatchesMatrixExponential) {
  const Matrix a = testing::random_spd(5, 0.2, 4.0, 11);
  const QuadraticObjective q(a);
  const Vector theta0 = ones(5);
  const double eta = 0.8;
  const Vector want = testing::exact_flow(a, theta0, eta, 5.0);
  for (auto m : {IntegratorMethod::adaptive_rk45(), IntegratorMethod::rosenbrock()}) {
    const Trajectory tr = integrate(q, theta0, eta, config(m, 5.0, 1e-8));
    EXPECT_LE((tr.final_state() - want).norm(), 1e-6) << tr.method;
    // Interior snapshots come from the Hermite interpolant.
    for (std::size_t i = 0; i < tr.size(); i += 7) {
      EXPECT_LE((tr.states[i] - testing::exact_flow(a, theta0, eta, tr.times[i])).norm(), 1e-5);
    }
  }
}

double final_error(const QuadraticObjective& q, const Vector& theta0, IntegratorMethod m,
                   double t_end, double tol = 1e-6) {
  const Trajectory tr = integrate(q, theta0, 1.0, config(m, t_end, tol));
  return (tr.final_state() - testing::exact_flow(q.matrix(), theta0, 1.0, t_end)).norm();
}

TEST(Integrate, Rk4IsFourthOrder) {
  const QuadraticObjective q(testing::random_spd(5, 0.5, 3.0, 12));
  const Vector theta0 = ones(5);
  double prev = final_error(q, theta0, IntegratorMethod::rk4(0.2), 5.0);
  for (double dt : {0.1, 0.05, 0.025}) {
    const double err = final_error(q, theta0, IntegratorMethod::rk4(dt), 5.0);
    EXPECT_NEAR(prev / err, 16.0, 0.2 * 16.0) << dt;
    prev = err;
  }
}

TEST(Integrate, EulerIsFirstOrder) {
  const QuadraticObjective q(testing::random_spd(5, 0.5, 3.0, 13));
  const Vector theta0 = ones(5);
  double prev = final_error(q, theta0, IntegratorMethod::euler(0.01), 5.0);
  for (double dt : {0.005, 0.0025, 0.00125}) {
    const double err = final_error(q, theta0, IntegratorMethod::euler(dt), 5.0);
    EXPECT_NEAR(prev / err, 2.0, 0.2 * 2.0) << dt;
    prev = err;
  }
}

TEST(Integrate, HalvingTolNeverIncreasesError) {
  const QuadraticObjective q(testing::random_spd(5, 0.2, 4.0, 14));
  const Vector theta0 = ones(5);
  for (auto m : {IntegratorMethod::adaptive_rk45(), IntegratorMethod::rosenbrock()}) {
    double prev = std::numeric_limits<double>::infinity();
    for (double tol = 1e-4; tol >= 1e-9; tol /= 2.0) {
      IntegratorConfig cfg = config(m, 5.0);
      cfg.reltol = tol;
      cfg.abstol = 1e-12;
      const Trajectory tr = integrate(q, theta0, 1.0, cfg);
      const double err = (tr.final_state() - testing::exact_flow(q.matrix(), theta0, 1.0, 5.0)).norm();
      EXPECT_LE(err, prev) << tr.method << " reltol " << tol;
      prev = err;
    }
  }
}

TEST(Integrate, RosenbrockHandlesStiffSystem) {
  const int n = 5;
  Vector lam(n);
  for (int i = 0; i < n; ++i) lam(i) = std::pow(10.0, 6.0 * i / (n - 1));
  const QuadraticObjective q(Matrix(lam.asDiagonal()));
  const Vector theta0 = ones(n);
  const double t_end = 5.0;
  const Trajectory tr =
      integrate(q, theta0, 1.0, config(IntegratorMethod::rosenbrock(), t_end, 1e-8));
  EXPECT_EQ(tr.terminated_by, Termination::reached_T);
  EXPECT_LE((tr.final_state() - testing::exact_flow(q.matrix(), theta0, 1.0, t_end)).norm(), 1e-6);
  // Explicit Euler is stable only for dt < 2 / lambda_max.
  const double euler_steps = t_end * lam.maxCoeff() / 2.0;
  EXPECT_LE(static_cast<double>(tr.accepted_steps + tr.rejected_steps), euler_steps / 100.0);
}

TEST(Integrate, LossDecreasesAlongSnapshots) {
  for (std::uint64_t seed : {21, 22, 23}) {
    const TeacherStudent ts(seed);
    for (auto m : {IntegratorMethod::euler(0.05), IntegratorMethod::rk4(0.1),
                   IntegratorMethod::adaptive_rk45(), IntegratorMethod::rosenbrock()}) {
      IntegratorConfig cfg = config(m, 20.0);
      cfg.grid_points = 200;
      const Trajectory tr = integrate(ts.net, ts.theta0, ts.data, {}, cfg);
      for (std::size_t k = 0; k + 1 < tr.size(); ++k) {
        const double slack = 10.0 * (cfg.abstol + cfg.reltol * tr.losses[k]);
        EXPECT_LE(tr.losses[k + 1], tr.losses[k] + slack) << tr.method << " k=" << k;
      }
      EXPECT_LT(tr.losses.back(), tr.losses.front());
    }
  }
}

TEST(Integrate, EulerIteratesAreGradientSteps) {
  const TeacherStudent ts(31);
  const MlpObjective obj(ts.net, ts.data, {});
  IntegratorConfig cfg = config(IntegratorMethod::euler(0.125), 1e6);
  cfg.max_steps = 40;
  const double eta = 0.5;
  std::vector<Vector> seen;
  integrate(obj, ts.theta0, eta, cfg, [&](double, const Vector& y) { seen.push_back(y); });
  ASSERT_EQ(seen.size(), 40u);
  Vector theta = ts.theta0;
  for (const auto& y : seen) {
    theta = gradient_descent_step(theta, obj.gradient(theta), eta * 0.125);
    EXPECT_TRUE((theta.array() == y.array()).all());
  }
}

TEST(Integrate, MaxStepsStopsAndAppendsState) {
  const TeacherStudent ts(32);
  IntegratorConfig cfg = config(IntegratorMethod::adaptive_rk45(), 1e4);
  cfg.max_steps = 15;
  const Trajectory tr = integrate(ts.net, ts.theta0, ts.data, {}, cfg);
  EXPECT_EQ(tr.terminated_by, Termination::max_steps);
  EXPECT_EQ(tr.accepted_steps, 15u);
  EXPECT_LT(tr.times.back(), 1e4);
  EXPECT_EQ(tr.times.size(), tr.states.size());
}

TEST(Integrate, BudgetRunReplaysFromStepCount) {
  const TeacherStudent ts(33);
  IntegratorConfig cfg = config(IntegratorMethod::rosenbrock(), 1e5);
  cfg.wall_budget_seconds = 0.05;
  const Trajectory timed = integrate(ts.net, ts.theta0, ts.data, {}, cfg);
  ASSERT_EQ(timed.terminated_by, Termination::budget);
  cfg.wall_budget_seconds.reset();
  cfg.max_steps = timed.accepted_steps;
  const Trajectory replay = integrate(ts.net, ts.theta0, ts.data, {}, cfg);
  ASSERT_EQ(replay.size(), timed.size());
  for (std::size_t i = 0; i < replay.size(); ++i) {
    EXPECT_EQ(replay.times[i], timed.times[i]);
    EXPECT_TRUE((replay.states[i].array() == timed.states[i].array()).all());
  }
  EXPECT_EQ(replay.work.n_hess, timed.work.n_hess);
}

// Gradient is NaN outside the unit ball, so every step from the boundary fails.
class Cliff final : public Objective {
 public:
  std::size_t dim() const override { return 2; }
  double loss(const Vector& x) const override {
    Vector g;
    return loss_gradient(x, g);
  }
  double loss_gradient(const Vector& x, Vector& g) const override {
    g = -Vector::Ones(2);
    if (x.norm() > 1.0) g.setConstant(std::numeric_limits<double>::quiet_NaN());
    return -x.sum();
  }
  Matrix hessian(const Vector&) const override { return Matrix::Zero(2, 2); }
};

TEST(Integrate, ReportsStepFailure) {
  const Cliff cliff;
  const Trajectory tr =
      integrate(cliff, Vector::Zero(2), 1.0, config(IntegratorMethod::adaptive_rk45(), 10.0));
  EXPECT_EQ(tr.terminated_by, Termination::step_failure);
  EXPECT_LT(tr.times.back(), 1.0);
  EXPECT_LE(tr.final_state().norm(), 1.0);
}

TEST(Integrate, ObserverSeesEveryAcceptedStep) {
  const QuadraticObjective q(testing::random_spd(3, 1, 5, 4));
  std::uint64_t calls = 0;
  double last_t = 0.0;
  const Trajectory tr =
      integrate(q, ones(3), 1.0, config(IntegratorMethod::adaptive_rk45(), 3.0),
                [&](double t, const Vector&) {
                  EXPECT_GT(t, last_t);
                  last_t = t;
                  ++calls;
                });
  EXPECT_EQ(calls, tr.accepted_steps);
  EXPECT_EQ(last_t, 3.0);
}

TEST(Integrate, JacobianLagReducesHessianCount) {
  const TeacherStudent ts(34);
  IntegratorConfig cfg = config(IntegratorMethod::rosenbrock(), 10.0);
  const Trajectory fresh = integrate(ts.net, ts.theta0, ts.data, {}, cfg);
  EXPECT_EQ(fresh.work.n_hess, fresh.accepted_steps);
  cfg.jacobian_lag = 4;
  const Trajectory lagged = integrate(ts.net, ts.theta0, ts.data, {}, cfg);
  EXPECT_LT(lagged.work.n_hess, lagged.accepted_steps);
}

TEST(Integrate, ExplicitSaveTimes) {
  const Matrix a = testing::random_spd(3, 1, 2, 5);
  const QuadraticObjective q(a);
  IntegratorConfig cfg = config(IntegratorMethod::adaptive_rk45(), 4.0, 1e-9);
  cfg.save_times = {0.0, 0.5, 1.0, 4.0};
  const Trajectory tr = integrate(q, ones(3), 1.0, cfg);
  ASSERT_EQ(tr.times, cfg.save_times);
  for (std::size_t i = 0; i < tr.size(); ++i) {
    EXPECT_LE((tr.states[i] - testing::exact_flow(a, ones(3), 1.0, tr.times[i])).norm(), 1e-7);
  }
}

TEST(IntegratorConfig, Validation) {
  IntegratorConfig cfg;
  cfg.method = IntegratorMethod::euler(0.0);
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg.method = IntegratorMethod::adaptive_rk45();
  cfg.abstol = 0.0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg.abstol = 1e-6;
  cfg.t_end = -1.0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg.t_end = 1.0;
  cfg.grid_points = 1;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg.grid_points = 2;
  cfg.save_times = {0.0, 0.5, 0.5};
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg.save_times = {0.0, 0.5, 1.0};
  EXPECT_NO_THROW(cfg.validate());
}

TEST(IntegratorKind, StringRoundTrip) {
  for (auto k : {IntegratorKind::euler, IntegratorKind::rk4, IntegratorKind::adaptive_rk45,
                 IntegratorKind::rosenbrock}) {
    EXPECT_EQ(integrator_from_string(to_string(k)), k);
  }
  EXPECT_THROW(integrator_from_string("bdf"), std::invalid_argument);
}

}  // namespace
}  // namespace gradflow
