// Population loss of bias-free two-layer teacher-student networks under
// standard Gaussian input, its derivatives, a Monte-Carlo oracle and the
// finite-versus-infinite data experiment.

#ifndef GRADFLOW_NETI_HPP_
#define GRADFLOW_NETI_HPP_

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

#include "gradflow/network.hpp"
#include "gradflow/objective.hpp"
#include "gradflow/ode.hpp"
#include "gradflow/optimize.hpp"

namespace gradflow {

/// Thrown for activations without a closed-form Gaussian kernel.
class UnsupportedActivationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct NetISpec {
  std::size_t input_dim = 1;
  Matrix student_w;  // K x D
  Vector student_a;  // K
  bool trainable_output = true;
  Matrix teacher_w;  // M x D
  Vector teacher_a;  // M
  ActivationKind activation = ActivationKind::erf_scaled;

  void validate() const;

  std::size_t student_width() const { return static_cast<std::size_t>(student_w.rows()); }
  std::size_t teacher_width() const { return static_cast<std::size_t>(teacher_w.rows()); }
  /// K * D, plus K when the output weights are trainable.
  std::size_t param_count() const;
  /// W row-major, then a when trainable.
  Vector params() const;
  NetISpec with_params(const Vector& theta) const;
};

/// Random spec with N(0, 1/D) first-layer rows and N(0, 1) output weights.
NetISpec random_neti_spec(std::size_t input_dim, std::size_t student_width,
                          std::size_t teacher_width, ActivationKind activation,
                          std::uint64_t seed, bool trainable_output = true);

bool has_analytic_kernel(ActivationKind kind);

/// J(u, v) = E[sigma(u.x) sigma(v.x)], x ~ N(0, I).
double neti_kernel(ActivationKind kind, const Vector& u, const Vector& v);
/// Gradient of J(u, v) with respect to u.
Vector neti_kernel_gradient(ActivationKind kind, const Vector& u, const Vector& v);

/// 0.5 E[(f_student(x) - f_teacher(x))^2]. Summed in a canonical order, so
/// permuting hidden units does not change the result.
double neti_loss(const NetISpec& spec);
Vector neti_gradient(const NetISpec& spec);
/// Central differences of neti_gradient, symmetrized.
Matrix neti_hessian(const NetISpec& spec, double step = 1e-5);
/// Rounding error bound for neti_loss; the kernel sum cancels near a minimum.
double neti_loss_roundoff(const NetISpec& spec);

struct McEstimate {
  double mean = 0.0;
  double standard_error = 0.0;
  std::size_t samples = 0;
};

/// Sample mean of 0.5 (f_student - f_teacher)^2 over seeded Gaussian inputs.
McEstimate mc_oracle(const NetISpec& spec, std::size_t n_samples, std::uint64_t seed);

/// The population loss as an Objective over NetISpec::params().
class NetIObjective final : public Objective {
 public:
  explicit NetIObjective(NetISpec spec);

  std::size_t dim() const override { return spec_.param_count(); }
  double loss(const Vector& theta) const override;
  double loss_gradient(const Vector& theta, Vector& grad) const override;
  Matrix hessian(const Vector& theta) const override;
  double loss_roundoff(const Vector& theta, double loss) const override;

  const NetISpec& spec() const { return spec_; }

 private:
  NetISpec spec_;
};

struct NetITrainConfig {
  std::optional<IntegratorConfig> warm_start;  // flow run before the optimizer
  OptimizerMethod method = OptimizerMethod::newton_tr();
  OptimizerBudget budget;
};

struct NetITrainResult {
  NetISpec spec;
  ConvergenceReport report;
};

NetITrainResult neti_train(const NetISpec& spec, const NetITrainConfig& cfg);

/// Squared l2 distance between two first-layer weight sets (and output
/// weights when `with_output`), after greedy matching of rows. For odd
/// activations a row may also be matched up to sign (flipping its output
/// weight along with it).
double aligned_sq_distance(const Matrix& w_a, const Vector& a_a, const Matrix& w_b,
                           const Vector& a_b, bool with_output, bool sign_symmetric);

/// Finite-data minima versus the infinite-data minimum.
struct RateExperimentConfig {
  std::size_t input_dim = 4;
  std::size_t student_width = 2;
  std::size_t teacher_width = 2;
  ActivationKind activation = ActivationKind::erf_scaled;
  /// Fixed unit output weights for the student, so a teacher with other
  /// output weights cannot be matched exactly.
  bool trainable_output = false;
  std::vector<double> teacher_output = {1.0, 0.5};
  std::vector<std::size_t> sample_sizes = {1000, 10000, 100000};
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  std::uint64_t max_iters = 200;
  double grad_tol = 1e-13;

  void validate() const;
};

struct RateSeedResult {
  std::uint64_t seed = 0;
  std::vector<double> distances;  // one per sample size
  double slope = 0.0;             // least squares in log-log
  double infinite_loss = 0.0;
  bool converged = true;
};

struct RateExperimentResult {
  std::vector<RateSeedResult> seeds;
  double median_slope = 0.0;
};

RateExperimentResult run_rate_experiment(const RateExperimentConfig& cfg);

/// Least-squares slope of log(y) against log(x).
double loglog_slope(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace gradflow

#endif  // GRADFLOW_NETI_HPP_
