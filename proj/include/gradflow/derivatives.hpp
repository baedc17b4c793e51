// Exact loss, gradient and Hessian of the squared-error loss of an MLP,
// computed by first- and second-order backpropagation.

#ifndef GRADFLOW_DERIVATIVES_HPP_
#define GRADFLOW_DERIVATIVES_HPP_

#include <stdexcept>
#include <string>

#include "gradflow/network.hpp"
#include "gradflow/objective.hpp"

namespace gradflow {

/// Loss = sum_i |f(x_i) - y_i|^2 (divided by N for mean reduction) + R(theta).
double loss(const Net& net, const ParamVector& theta, const Dataset& data, const LossConfig& cfg);
Vector gradient(const Net& net, const ParamVector& theta, const Dataset& data,
                const LossConfig& cfg);
double loss_and_gradient(const Net& net, const ParamVector& theta, const Dataset& data,
                         const LossConfig& cfg, Vector& grad);
/// Exact Hessian including the barrier. Exactly symmetric.
Matrix hessian(const Net& net, const ParamVector& theta, const Dataset& data,
               const LossConfig& cfg);
/// Eigenvalues of the Hessian, ascending.
Vector hessian_spectrum(const Net& net, const ParamVector& theta, const Dataset& data,
                        const LossConfig& cfg);

Vector fd_gradient(const Net& net, const ParamVector& theta, const Dataset& data,
                   const LossConfig& cfg, double step = 1e-6);

class EigenSolverError : public std::runtime_error {
 public:
  EigenSolverError(const std::string& what, double condition)
      : std::runtime_error(what), condition_(condition) {}
  /// 1-norm condition estimate of the offending matrix.
  double condition_estimate() const { return condition_; }

 private:
  double condition_;
};

/// Eigenvalues of 0.5 (H + H^T), ascending. Throws EigenSolverError.
Vector symmetric_eigenvalues(const Matrix& h);

/// The MLP loss as an Objective. Holds references: net and data must outlive it.
class MlpObjective final : public Objective {
 public:
  MlpObjective(const Net& net, const Dataset& data, LossConfig cfg);

  std::size_t dim() const override { return net_.param_count(); }
  double loss(const Vector& theta) const override;
  double loss_gradient(const Vector& theta, Vector& grad) const override;
  Matrix hessian(const Vector& theta) const override;
  /// Summation error of the data term: about 2 sqrt(N) ulps of the loss.
  double loss_roundoff(const Vector& theta, double loss) const override;

  const Net& net() const { return net_; }
  const Dataset& data() const { return data_; }
  const LossConfig& config() const { return cfg_; }

 private:
  const Net& net_;
  const Dataset& data_;
  LossConfig cfg_;
};

}  // namespace gradflow

#endif  // GRADFLOW_DERIVATIVES_HPP_
