// Abstract smooth objective consumed by the flow integrators and the
// fixed-point solvers, plus a few generic adapters.

#ifndef GRADFLOW_OBJECTIVE_HPP_
#define GRADFLOW_OBJECTIVE_HPP_

#include <cstdint>
#include <vector>

#include "gradflow/network.hpp"

namespace gradflow {

/// Evaluation counters. Counters never decrease within one run.
struct EvalWork {
  std::uint64_t n_loss = 0;
  std::uint64_t n_grad = 0;
  std::uint64_t n_hess = 0;
  double cpu_seconds = 0.0;

  EvalWork& operator+=(const EvalWork& o) {
    n_loss += o.n_loss;
    n_grad += o.n_grad;
    n_hess += o.n_hess;
    cpu_seconds += o.cpu_seconds;
    return *this;
  }
};

class Objective {
 public:
  virtual ~Objective() = default;

  virtual std::size_t dim() const = 0;
  virtual double loss(const Vector& x) const = 0;
  /// Returns the loss and writes the gradient into `grad`.
  virtual double loss_gradient(const Vector& x, Vector& grad) const = 0;
  virtual Matrix hessian(const Vector& x) const = 0;

  /// Absolute size of the rounding error in loss(x), given its computed
  /// value. Solvers use it to tell real decrease from noise. Zero means
  /// "a few ulps of the value".
  virtual double loss_roundoff(const Vector&, double /*loss*/) const { return 0.0; }

  Vector gradient(const Vector& x) const {
    Vector g;
    loss_gradient(x, g);
    return g;
  }
};

/// Counts and times every call forwarded to the wrapped objective. Each
/// public call increments exactly one counter by one.
class MeteredObjective final : public Objective {
 public:
  explicit MeteredObjective(const Objective& base) : base_(base) {}

  std::size_t dim() const override { return base_.dim(); }
  double loss(const Vector& x) const override;
  double loss_gradient(const Vector& x, Vector& grad) const override;
  Matrix hessian(const Vector& x) const override;
  double loss_roundoff(const Vector& x, double loss) const override {
    return base_.loss_roundoff(x, loss);
  }

  const EvalWork& work() const { return work_; }

 private:
  const Objective& base_;
  mutable EvalWork work_;
};

/// 0.5 (x - center)^T A (x - center); A must be symmetric.
class QuadraticObjective final : public Objective {
 public:
  explicit QuadraticObjective(Matrix a, Vector center = Vector());

  std::size_t dim() const override { return static_cast<std::size_t>(a_.rows()); }
  double loss(const Vector& x) const override;
  double loss_gradient(const Vector& x, Vector& grad) const override;
  Matrix hessian(const Vector&) const override { return a_; }

  const Matrix& matrix() const { return a_; }
  const Vector& center() const { return center_; }

 private:
  Matrix a_;
  Vector center_;
};

/// Restricts an objective to a subset of its coordinates; the others stay
/// at the values of `full_point`.
class SubspaceObjective final : public Objective {
 public:
  SubspaceObjective(const Objective& base, Vector full_point, std::vector<std::size_t> free);

  std::size_t dim() const override { return free_.size(); }
  double loss(const Vector& x) const override;
  double loss_gradient(const Vector& x, Vector& grad) const override;
  Matrix hessian(const Vector& x) const override;
  double loss_roundoff(const Vector& x, double loss) const override;

  Vector embed(const Vector& x) const;
  Vector restrict(const Vector& full) const;

 private:
  const Objective& base_;
  Vector full_;
  std::vector<std::size_t> free_;
};

/// Central differences of the loss.
Vector fd_gradient(const Objective& f, const Vector& x, double step);
/// Central differences of the gradient, symmetrized.
Matrix fd_hessian(const Objective& f, const Vector& x, double step);

/// max |a - b| / max(max |a|, max |b|, floor)
double relative_linf_error(const Vector& a, const Vector& b, double floor = 1e-300);
double relative_linf_error(const Matrix& a, const Matrix& b, double floor = 1e-300);

}  // namespace gradflow

#endif  // GRADFLOW_OBJECTIVE_HPP_
