#include "gradflow/ode.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace gradflow {

namespace {

constexpr double kSafety = 0.9;
constexpr double kMinFactor = 0.2;
constexpr double kMaxFactor = 5.0;

// Dormand-Prince 5(4).
constexpr double a21 = 1.0 / 5.0;
constexpr double a31 = 3.0 / 40.0, a32 = 9.0 / 40.0;
constexpr double a41 = 44.0 / 45.0, a42 = -56.0 / 15.0, a43 = 32.0 / 9.0;
constexpr double a51 = 19372.0 / 6561.0, a52 = -25360.0 / 2187.0, a53 = 64448.0 / 6561.0,
                 a54 = -212.0 / 729.0;
constexpr double a61 = 9017.0 / 3168.0, a62 = -355.0 / 33.0, a63 = 46732.0 / 5247.0,
                 a64 = 49.0 / 176.0, a65 = -5103.0 / 18656.0;
constexpr double b1 = 35.0 / 384.0, b3 = 500.0 / 1113.0, b4 = 125.0 / 192.0,
                 b5 = -2187.0 / 6784.0, b6 = 11.0 / 84.0;
constexpr double e1 = 71.0 / 57600.0, e3 = -71.0 / 16695.0, e4 = 71.0 / 1920.0,
                 e5 = -17253.0 / 339200.0, e6 = 22.0 / 525.0, e7 = -1.0 / 40.0;

using Clock = std::chrono::steady_clock;

double rms(const Vector& v) {
  if (v.size() == 0) return 0.0;
  return std::sqrt(v.squaredNorm() / static_cast<double>(v.size()));
}

class FlowRun {
 public:
  FlowRun(const Objective& objective, double eta, const IntegratorConfig& cfg,
          const StepObserver& observer)
      : f_(objective), eta_(eta), cfg_(cfg), observer_(observer),
        grid_(cfg.resolved_save_times()) {}

  Trajectory run(const Vector& theta0);

 private:
  Vector rhs(const Vector& y) const {
    Vector g;
    f_.loss_gradient(y, g);
    return -eta_ * g;
  }

  double error_norm(const Vector& err, const Vector& y0, const Vector& y1) const {
    const Vector scale =
        (cfg_.abstol + cfg_.reltol * y0.cwiseAbs().cwiseMax(y1.cwiseAbs()).array()).matrix();
    return rms(err.cwiseQuotient(scale));
  }

  double initial_step(const Vector& y0, const Vector& f0, int order) const;

  // Records every grid time in (t0, t1] from the Hermite cubic of the step.
  void record(Trajectory& out, double t0, const Vector& y0, const Vector& f0, double t1,
              const Vector& y1, const Vector& f1);

  void fixed_step_loop(Trajectory& out, Vector y, Vector g);
  void adaptive_loop(Trajectory& out, Vector y, Vector fy);

  bool over_budget() const {
    if (!cfg_.wall_budget_seconds) return false;
    const std::chrono::duration<double> elapsed = Clock::now() - start_;
    return elapsed.count() >= *cfg_.wall_budget_seconds;
  }
  bool step_cap_reached(const Trajectory& out) const {
    return cfg_.max_steps != 0 && out.accepted_steps >= cfg_.max_steps;
  }
  void accepted(Trajectory& out, double t, const Vector& y) {
    ++out.accepted_steps;
    if (observer_) observer_(t, y);
  }

  const Objective& f_;
  double eta_;
  const IntegratorConfig& cfg_;
  const StepObserver& observer_;
  std::vector<double> grid_;
  std::size_t next_ = 0;  // next grid index to record
  Clock::time_point start_;
};

double FlowRun::initial_step(const Vector& y0, const Vector& f0, int order) const {
  if (cfg_.initial_dt > 0.0) return std::min(cfg_.initial_dt, cfg_.t_end);
  const Vector sc = (cfg_.abstol + cfg_.reltol * y0.cwiseAbs().array()).matrix();
  const double d0 = rms(y0.cwiseQuotient(sc));
  const double d1 = rms(f0.cwiseQuotient(sc));
  const double h0 = (d0 < 1e-5 || d1 < 1e-5) ? 1e-6 : 0.01 * d0 / d1;
  const Vector y1 = y0 + h0 * f0;
  const Vector f1 = rhs(y1);
  const double d2 = rms((f1 - f0).cwiseQuotient(sc)) / h0;
  const double dmax = std::max(d1, d2);
  const double h1 = dmax <= 1e-15 ? std::max(1e-6, h0 * 1e-3)
                                  : std::pow(0.01 / dmax, 1.0 / static_cast<double>(order));
  return std::min({100.0 * h0, h1, cfg_.t_end});
}

void FlowRun::record(Trajectory& out, double t0, const Vector& y0, const Vector& f0, double t1,
                     const Vector& y1, const Vector& f1) {
  const double h = t1 - t0;
  while (next_ < grid_.size() && grid_[next_] <= t1) {
    const double tg = grid_[next_];
    if (tg == t1) {
      out.states.push_back(y1);
    } else {
      const double s = (tg - t0) / h;
      const double h10 = s * (1.0 - s) * (1.0 - s);
      const double h01 = s * s * (3.0 - 2.0 * s);
      const double h11 = s * s * (s - 1.0);
      out.states.push_back(y0 + h01 * (y1 - y0) + (h10 * h) * f0 + (h11 * h) * f1);
    }
    out.times.push_back(tg);
    ++next_;
  }
}

void FlowRun::fixed_step_loop(Trajectory& out, Vector y, Vector g) {
  const double dt = cfg_.method.dt;
  const double t_end = cfg_.t_end;
  double t = 0.0;
  std::uint64_t k = 0;
  Vector fy = -eta_ * g;
  while (t < t_end) {
    if (step_cap_reached(out)) {
      out.terminated_by = Termination::max_steps;
      break;
    }
    if (over_budget()) {
      out.terminated_by = Termination::budget;
      break;
    }
    // Times are k * dt rather than a running sum so that long runs do not drift.
    double t_next = static_cast<double>(k + 1) * dt;
    double h = dt;
    if (t_next >= t_end) {
      t_next = t_end;
      h = t_end - t;
    }
    Vector y_new;
    Vector g_new;
    if (cfg_.method.kind == IntegratorKind::euler) {
      y_new = gradient_descent_step(y, g, eta_ * h);
    } else {
      const Vector& k1 = fy;
      const Vector k2 = rhs(y + (0.5 * h) * k1);
      const Vector k3 = rhs(y + (0.5 * h) * k2);
      const Vector k4 = rhs(y + h * k3);
      y_new = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    f_.loss_gradient(y_new, g_new);
    const Vector f_new = -eta_ * g_new;
    record(out, t, y, fy, t_next, y_new, f_new);
    t = t_next;
    ++k;
    y = std::move(y_new);
    g = std::move(g_new);
    fy = f_new;
    accepted(out, t, y);
  }
  if (t < t_end && out.times.back() < t) {
    out.times.push_back(t);
    out.states.push_back(y);
  }
}

void FlowRun::adaptive_loop(Trajectory& out, Vector y, Vector fy) {
  const bool ros = cfg_.method.kind == IntegratorKind::rosenbrock;
  // Exponent of the controller: one plus the order of the embedded estimate.
  const int k_err = ros ? 3 : 5;
  const double alpha = 0.7 / k_err;
  const double beta = 0.4 / k_err;
  const double t_end = cfg_.t_end;

  double t = 0.0;
  double h = initial_step(y, fy, k_err);
  double err_prev = 1e-4;
  bool last_rejected = false;

  // Rosenbrock state: Hessian at the current y (J = -eta H).
  const double d = 1.0 / (2.0 + std::sqrt(2.0));
  const double e32 = 6.0 + std::sqrt(2.0);
  Matrix hess;
  std::uint64_t hess_age = cfg_.jacobian_lag;  // forces a refresh on the first step

  while (t < t_end) {
    if (step_cap_reached(out)) {
      out.terminated_by = Termination::max_steps;
      break;
    }
    if (over_budget()) {
      out.terminated_by = Termination::budget;
      break;
    }
    const double h_min = 16.0 * std::numeric_limits<double>::epsilon() * std::max(t, 1e-300);
    bool last = false;
    if (t + 1.01 * h >= t_end) {
      h = t_end - t;
      last = true;
    }
    if (!(h > h_min)) {
      out.terminated_by = Termination::step_failure;
      break;
    }

    Vector y_new;
    Vector f_new;
    Vector err;
    if (!ros) {
      const Vector& k1 = fy;
      const Vector k2 = rhs(y + h * (a21 * k1));
      const Vector k3 = rhs(y + h * (a31 * k1 + a32 * k2));
      const Vector k4 = rhs(y + h * (a41 * k1 + a42 * k2 + a43 * k3));
      const Vector k5 = rhs(y + h * (a51 * k1 + a52 * k2 + a53 * k3 + a54 * k4));
      const Vector k6 = rhs(y + h * (a61 * k1 + a62 * k2 + a63 * k3 + a64 * k4 + a65 * k5));
      y_new = y + h * (b1 * k1 + b3 * k3 + b4 * k4 + b5 * k5 + b6 * k6);
      f_new = rhs(y_new);
      err = h * (e1 * k1 + e3 * k3 + e4 * k4 + e5 * k5 + e6 * k6 + e7 * f_new);
    } else {
      if (hess_age >= cfg_.jacobian_lag) {
        hess = f_.hessian(y);
        hess_age = 0;
      }
      Matrix w = (h * d * eta_) * hess;
      w.diagonal().array() += 1.0;
      const Eigen::PartialPivLU<Matrix> lu(w);
      const Vector k1 = lu.solve(fy);
      const Vector f1 = rhs(y + (0.5 * h) * k1);
      const Vector k2 = lu.solve(f1 - k1) + k1;
      y_new = y + h * k2;
      f_new = rhs(y_new);
      const Vector k3 = lu.solve(f_new - e32 * (k2 - f1) - 2.0 * (k1 - fy));
      err = (h / 6.0) * (k1 - 2.0 * k2 + k3);
    }

    double en = error_norm(err, y, y_new);
    if (!std::isfinite(en) || !y_new.allFinite()) en = std::numeric_limits<double>::infinity();

    if (en <= 1.0) {
      const double t_new = last ? t_end : t + h;
      record(out, t, y, fy, t_new, y_new, f_new);
      t = t_new;
      y = std::move(y_new);
      fy = std::move(f_new);
      ++hess_age;
      accepted(out, t, y);

      const double en_safe = std::max(en, 1e-10);
      double fac = kSafety * std::pow(en_safe, -alpha) * std::pow(err_prev, beta);
      fac = std::clamp(fac, kMinFactor, kMaxFactor);
      if (last_rejected) fac = std::min(fac, 1.0);
      err_prev = en_safe;
      last_rejected = false;
      h *= fac;
    } else {
      ++out.rejected_steps;
      const double fac = std::isfinite(en)
                             ? std::max(kMinFactor, kSafety * std::pow(en, -1.0 / k_err))
                             : kMinFactor;
      last_rejected = true;
      h *= fac;
    }
  }
  if (t < t_end && out.times.back() < t) {
    out.times.push_back(t);
    out.states.push_back(y);
  }
}

Trajectory FlowRun::run(const Vector& theta0) {
  start_ = Clock::now();
  Trajectory out;
  out.method = std::string(to_string(cfg_.method.kind));
  out.times.push_back(0.0);
  out.states.push_back(theta0);
  next_ = (!grid_.empty() && grid_.front() == 0.0) ? 1 : 0;
  Vector g0;
  f_.loss_gradient(theta0, g0);
  if (cfg_.method.is_adaptive()) {
    adaptive_loop(out, theta0, -eta_ * g0);
  } else {
    fixed_step_loop(out, theta0, std::move(g0));
  }
  return out;
}

}  // namespace

std::string_view to_string(IntegratorKind kind) {
  switch (kind) {
    case IntegratorKind::euler: return "euler";
    case IntegratorKind::rk4: return "rk4";
    case IntegratorKind::adaptive_rk45: return "adaptive_rk45";
    case IntegratorKind::rosenbrock: return "rosenbrock";
  }
  return "unknown";
}

IntegratorKind integrator_from_string(std::string_view name) {
  for (auto k : {IntegratorKind::euler, IntegratorKind::rk4, IntegratorKind::adaptive_rk45,
                 IntegratorKind::rosenbrock}) {
    if (to_string(k) == name) return k;
  }
  throw std::invalid_argument("unknown integrator: " + std::string(name));
}

std::string_view to_string(Termination t) {
  switch (t) {
    case Termination::reached_T: return "reached_T";
    case Termination::budget: return "budget";
    case Termination::max_steps: return "max_steps";
    case Termination::step_failure: return "step_failure";
  }
  return "unknown";
}

Termination termination_from_string(std::string_view name) {
  for (auto t : {Termination::reached_T, Termination::budget, Termination::max_steps,
                 Termination::step_failure}) {
    if (to_string(t) == name) return t;
  }
  throw std::invalid_argument("unknown termination: " + std::string(name));
}

void IntegratorConfig::validate() const {
  if (!method.is_adaptive() && !(method.dt > 0.0)) {
    throw std::invalid_argument("fixed-step integrators need dt > 0");
  }
  if (!(abstol > 0.0) || !(reltol > 0.0)) {
    throw std::invalid_argument("abstol and reltol must be positive");
  }
  if (!(t_end > 0.0) || !std::isfinite(t_end)) throw std::invalid_argument("t_end must be > 0");
  if (wall_budget_seconds && !(*wall_budget_seconds > 0.0)) {
    throw std::invalid_argument("wall_budget_seconds must be positive");
  }
  if (jacobian_lag == 0) throw std::invalid_argument("jacobian_lag must be >= 1");
  if (save_times.empty()) {
    if (grid_points < 2) throw std::invalid_argument("grid_points must be >= 2");
  } else {
    if (save_times.front() != 0.0) throw std::invalid_argument("save_times must start at 0");
    for (std::size_t i = 1; i < save_times.size(); ++i) {
      if (!(save_times[i] > save_times[i - 1])) {
        throw std::invalid_argument("save_times must be strictly increasing");
      }
    }
    if (save_times.back() > t_end) throw std::invalid_argument("save_times beyond t_end");
  }
}

std::vector<double> IntegratorConfig::resolved_save_times() const {
  return save_times.empty() ? log_grid(t_end, grid_points) : save_times;
}

std::vector<double> log_grid(double t_end, std::size_t n, double t_min) {
  if (!(t_end > 0.0)) throw std::invalid_argument("log_grid: T must be > 0");
  if (n < 2) throw std::invalid_argument("log_grid: n must be >= 2");
  if (t_min <= 0.0) t_min = t_end * 1e-8;
  if (t_min >= t_end) throw std::invalid_argument("log_grid: t_min must be < T");
  std::vector<double> out(n);
  out[0] = 0.0;
  const std::size_t m = n - 1;
  if (m == 1) {
    out[1] = t_end;
    return out;
  }
  const double lo = std::log(t_min);
  const double step = (std::log(t_end) - lo) / static_cast<double>(m - 1);
  for (std::size_t i = 0; i < m; ++i) out[i + 1] = std::exp(lo + step * static_cast<double>(i));
  out[1] = t_min;
  out[n - 1] = t_end;
  return out;
}

Vector gradient_descent_step(const Vector& theta, const Vector& grad, double lr) {
  return theta - lr * grad;
}

Trajectory integrate(const Objective& objective, const Vector& theta0, double eta,
                     const IntegratorConfig& cfg, const StepObserver& observer) {
  cfg.validate();
  if (static_cast<std::size_t>(theta0.size()) != objective.dim()) {
    throw DimensionError("integrate: theta0 has wrong length");
  }
  if (!(eta > 0.0)) throw std::invalid_argument("integrate: eta must be > 0");
  MeteredObjective metered(objective);
  FlowRun run(metered, eta, cfg, observer);
  Trajectory out = run.run(theta0);
  out.work = metered.work();
  out.losses.reserve(out.size());
  out.grad_norms.reserve(out.size());
  for (const auto& s : out.states) {
    Vector g;
    out.losses.push_back(objective.loss_gradient(s, g));
    out.grad_norms.push_back(g.norm());
  }
  return out;
}

Trajectory integrate(const Net& net, const ParamVector& theta0, const Dataset& data,
                     const LossConfig& loss_cfg, const IntegratorConfig& cfg) {
  check_compatible(net, theta0, data);
  loss_cfg.validate();
  const MlpObjective obj(net, data, loss_cfg);
  return integrate(obj, theta0, loss_cfg.eta, cfg);
}

Vector flow_rhs(const Net& net, const ParamVector& theta, const Dataset& data,
                const LossConfig& cfg) {
  return -cfg.eta * gradient(net, theta, data, cfg);
}

Matrix flow_jacobian(const Net& net, const ParamVector& theta, const Dataset& data,
                     const LossConfig& cfg) {
  return -cfg.eta * hessian(net, theta, data, cfg);
}

}  // namespace gradflow
