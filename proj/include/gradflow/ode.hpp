// Integration of the gradient flow  d theta / dt = -eta grad L(theta).

#ifndef GRADFLOW_ODE_HPP_
#define GRADFLOW_ODE_HPP_

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "gradflow/derivatives.hpp"
#include "gradflow/objective.hpp"

namespace gradflow {

enum class IntegratorKind { euler, rk4, adaptive_rk45, rosenbrock };

std::string_view to_string(IntegratorKind kind);
IntegratorKind integrator_from_string(std::string_view name);

struct IntegratorMethod {
  IntegratorKind kind = IntegratorKind::adaptive_rk45;
  double dt = 0.0;  // fixed-step methods only

  static IntegratorMethod euler(double dt) { return {IntegratorKind::euler, dt}; }
  static IntegratorMethod rk4(double dt) { return {IntegratorKind::rk4, dt}; }
  static IntegratorMethod adaptive_rk45() { return {IntegratorKind::adaptive_rk45, 0.0}; }
  static IntegratorMethod rosenbrock() { return {IntegratorKind::rosenbrock, 0.0}; }

  bool is_adaptive() const {
    return kind == IntegratorKind::adaptive_rk45 || kind == IntegratorKind::rosenbrock;
  }
};

struct IntegratorConfig {
  IntegratorMethod method;
  double abstol = 1e-6;
  double reltol = 1e-6;
  double t_end = 1.0;
  std::uint64_t max_steps = 0;  // accepted steps; 0 means unlimited
  std::optional<double> wall_budget_seconds;
  /// Snapshot times. Empty means log_grid(t_end, grid_points).
  std::vector<double> save_times;
  std::size_t grid_points = 1000;
  double initial_dt = 0.0;  // 0 selects the step automatically
  /// Rosenbrock: refresh the Hessian every `jacobian_lag` accepted steps.
  std::uint64_t jacobian_lag = 1;

  void validate() const;
  std::vector<double> resolved_save_times() const;
};

enum class Termination { reached_T, budget, max_steps, step_failure };

std::string_view to_string(Termination t);
Termination termination_from_string(std::string_view name);

struct Trajectory {
  std::vector<double> times;
  std::vector<ParamVector> states;
  std::vector<double> losses;
  std::vector<double> grad_norms;
  EvalWork work;
  Termination terminated_by = Termination::reached_T;
  std::uint64_t accepted_steps = 0;
  std::uint64_t rejected_steps = 0;
  std::string method;

  std::size_t size() const { return times.size(); }
  const ParamVector& final_state() const { return states.back(); }
};

/// Called after every accepted step with the new time and state.
using StepObserver = std::function<void(double t, const Vector& state)>;

/// Snapshot times: 0, then n - 1 log-spaced points from t_min to t_end.
/// t_min <= 0 selects t_end * 1e-8.
std::vector<double> log_grid(double t_end, std::size_t n, double t_min = 0.0);

/// theta - lr * g. Shared by explicit Euler and gradient descent so that
/// the two produce identical iterates.
Vector gradient_descent_step(const Vector& theta, const Vector& grad, double lr);

/// Integrates the flow of `objective` scaled by eta. Snapshot losses and
/// gradient norms are filled in after the run and are not counted in `work`.
Trajectory integrate(const Objective& objective, const Vector& theta0, double eta,
                     const IntegratorConfig& cfg, const StepObserver& observer = {});

Trajectory integrate(const Net& net, const ParamVector& theta0, const Dataset& data,
                     const LossConfig& loss_cfg, const IntegratorConfig& cfg);

/// -eta * gradient
Vector flow_rhs(const Net& net, const ParamVector& theta, const Dataset& data,
                const LossConfig& cfg);
/// -eta * hessian
Matrix flow_jacobian(const Net& net, const ParamVector& theta, const Dataset& data,
                     const LossConfig& cfg);

}  // namespace gradflow

#endif  // GRADFLOW_ODE_HPP_
