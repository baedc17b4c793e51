// Fixed-point search: first-order, quasi-Newton and trust-region Newton
// minimizers, and the epoch-based convergence protocol.

#ifndef GRADFLOW_OPTIMIZE_HPP_
#define GRADFLOW_OPTIMIZE_HPP_

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "gradflow/derivatives.hpp"
#include "gradflow/objective.hpp"

namespace gradflow {

enum class OptimizerKind { gd, adam, bfgs, lbfgs, newton_tr };

std::string_view to_string(OptimizerKind kind);
OptimizerKind optimizer_from_string(std::string_view name);

struct OptimizerMethod {
  OptimizerKind kind = OptimizerKind::newton_tr;
  double lr = 1e-3;  // gd, adam
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t memory = 10;  // lbfgs
  /// lbfgs: keep the initial scaling from the first curvature pair instead
  /// of refreshing it every iteration.
  bool fixed_initial_scaling = false;
  /// bfgs, lbfgs: the solver sees scale * loss. Large values keep curvature
  /// pairs above round-off near tiny losses.
  double gradient_scale = 1.0;
  double delta0 = 1.0;  // newton_tr
  double delta_max = 1e3;

  static OptimizerMethod gd(double lr);
  static OptimizerMethod adam(double lr, double beta1 = 0.9, double beta2 = 0.999,
                              double eps = 1e-8);
  static OptimizerMethod bfgs();
  static OptimizerMethod lbfgs(std::size_t memory);
  static OptimizerMethod newton_tr(double delta0 = 1.0, double delta_max = 1e3);

  void validate() const;
};

struct OptimizerBudget {
  std::uint64_t max_iters = 1000;
  double grad_tol = 1e-8;
  std::optional<double> wall_seconds;

  void validate() const;
};

enum class ConvergenceStatus { probably_converged, not_converged, budget_exhausted };

std::string_view to_string(ConvergenceStatus s);
ConvergenceStatus convergence_from_string(std::string_view name);

struct ConvergenceReport {
  double final_loss = 0.0;
  double grad_norm = 0.0;
  std::optional<double> min_eigenvalue;
  std::uint64_t iterations = 0;
  ConvergenceStatus status = ConvergenceStatus::not_converged;

  std::uint64_t line_search_failures = 0;
  std::uint64_t skipped_updates = 0;  // bfgs pairs with s'y <= 0
  std::uint64_t rejected_steps = 0;   // trust-region steps with rho too small
  double final_trust_radius = 0.0;    // newton_tr
  EvalWork work;
};

struct MinimizeResult {
  ParamVector theta;  // best seen by loss
  ConvergenceReport report;
};

/// State handed to an IterationObserver after each iteration.
struct IterationInfo {
  std::uint64_t iteration = 0;
  const Vector& theta;  // current iterate, not necessarily the best
  double loss = 0.0;
  const Vector& gradient;
  /// bfgs only: inverse Hessian approximation after this iteration's update.
  const Matrix* inverse_hessian = nullptr;
  /// bfgs, lbfgs: search direction used in this iteration.
  const Vector* direction = nullptr;
};

using IterationObserver = std::function<void(const IterationInfo&)>;

MinimizeResult minimize(const Objective& objective, const Vector& theta0,
                        const OptimizerMethod& method, const OptimizerBudget& budget,
                        const IterationObserver& observer = {});

MinimizeResult minimize(const Net& net, const ParamVector& theta0, const Dataset& data,
                        const LossConfig& loss_cfg, const OptimizerMethod& method,
                        const OptimizerBudget& budget);

/// Approximate minimizer of g'd + d'Hd/2 subject to |d| <= delta. Dogleg for
/// positive definite H, otherwise (H + lambda I) d = -g on the boundary with
/// the hard case handled, falling back to the Cauchy point if that is better.
Vector newton_tr_step(const Matrix& h, const Vector& g, double delta);

/// g'd + d'Hd/2
double model_value(const Matrix& h, const Vector& g, const Vector& d);

/// Smallest eigenvalue of the symmetric matrix h.
double min_eigenvalue(const Matrix& h);

struct EpochVerdict {
  ConvergenceStatus status = ConvergenceStatus::not_converged;
  std::size_t epoch = 0;  // 1-based epoch of the verdict; 0 when not converged
};

/// probably_converged at the first epoch whose loss is >= the previous one.
EpochVerdict classify_epochs(std::span<const double> epoch_losses);

struct ProtocolConfig {
  std::size_t epochs = 30;
  std::uint64_t steps_per_epoch = 10000;
  double delta0 = 1.0;
  double delta_max = 1e3;
  std::optional<double> wall_seconds;  // whole protocol

  void validate() const;
};

struct ProtocolResult {
  ParamVector theta;
  ConvergenceReport report;  // min_eigenvalue always set
  std::vector<double> epoch_losses;
};

/// Runs Newton trust-region in epochs until classify_epochs reports
/// convergence or the epochs run out.
ProtocolResult probably_converged_protocol(const Objective& objective, const Vector& theta0,
                                           const ProtocolConfig& cfg);

ProtocolResult probably_converged_protocol(const Net& net, const ParamVector& theta0,
                                           const Dataset& data, const LossConfig& loss_cfg,
                                           const ProtocolConfig& cfg);

}  // namespace gradflow

#endif  // GRADFLOW_OPTIMIZE_HPP_
