#include "gradflow/objective.hpp"

#include <algorithm>
#include <chrono>
#include <stdexcept>

namespace gradflow {

namespace {

class ScopedTimer {
 public:
  explicit ScopedTimer(double& sink) : sink_(sink), start_(std::chrono::steady_clock::now()) {}
  ~ScopedTimer() {
    sink_ += std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  double& sink_;
  std::chrono::steady_clock::time_point start_;
};

}  // namespace

double MeteredObjective::loss(const Vector& x) const {
  ScopedTimer t(work_.cpu_seconds);
  ++work_.n_loss;
  return base_.loss(x);
}

double MeteredObjective::loss_gradient(const Vector& x, Vector& grad) const {
  ScopedTimer t(work_.cpu_seconds);
  ++work_.n_grad;
  return base_.loss_gradient(x, grad);
}

Matrix MeteredObjective::hessian(const Vector& x) const {
  ScopedTimer t(work_.cpu_seconds);
  ++work_.n_hess;
  return base_.hessian(x);
}

QuadraticObjective::QuadraticObjective(Matrix a, Vector center)
    : a_(std::move(a)), center_(std::move(center)) {
  if (a_.rows() != a_.cols()) throw DimensionError("QuadraticObjective: matrix must be square");
  if (center_.size() == 0) center_ = Vector::Zero(a_.rows());
  if (center_.size() != a_.rows()) throw DimensionError("QuadraticObjective: center length");
}

double QuadraticObjective::loss(const Vector& x) const {
  const Vector d = x - center_;
  return 0.5 * d.dot(a_ * d);
}

double QuadraticObjective::loss_gradient(const Vector& x, Vector& grad) const {
  const Vector d = x - center_;
  grad = a_ * d;
  return 0.5 * d.dot(grad);
}

SubspaceObjective::SubspaceObjective(const Objective& base, Vector full_point,
                                     std::vector<std::size_t> free)
    : base_(base), full_(std::move(full_point)), free_(std::move(free)) {
  if (static_cast<std::size_t>(full_.size()) != base_.dim()) {
    throw DimensionError("SubspaceObjective: full point has wrong length");
  }
  for (auto i : free_) {
    if (i >= base_.dim()) throw DimensionError("SubspaceObjective: free index out of range");
  }
}

Vector SubspaceObjective::embed(const Vector& x) const {
  if (static_cast<std::size_t>(x.size()) != free_.size()) {
    throw DimensionError("SubspaceObjective: point has wrong length");
  }
  Vector full = full_;
  for (std::size_t k = 0; k < free_.size(); ++k) full[free_[k]] = x[k];
  return full;
}

Vector SubspaceObjective::restrict(const Vector& full) const {
  Vector x(free_.size());
  for (std::size_t k = 0; k < free_.size(); ++k) x[k] = full[free_[k]];
  return x;
}

double SubspaceObjective::loss(const Vector& x) const { return base_.loss(embed(x)); }

double SubspaceObjective::loss_gradient(const Vector& x, Vector& grad) const {
  Vector full_grad;
  const double f = base_.loss_gradient(embed(x), full_grad);
  grad = restrict(full_grad);
  return f;
}

Matrix SubspaceObjective::hessian(const Vector& x) const {
  const Matrix h = base_.hessian(embed(x));
  const auto n = static_cast<Eigen::Index>(free_.size());
  Matrix out(n, n);
  for (Eigen::Index a = 0; a < n; ++a)
    for (Eigen::Index b = 0; b < n; ++b) out(a, b) = h(free_[a], free_[b]);
  return out;
}

double SubspaceObjective::loss_roundoff(const Vector& x, double loss) const {
  return base_.loss_roundoff(embed(x), loss);
}

Vector fd_gradient(const Objective& f, const Vector& x, double step) {
  if (!(step > 0.0)) throw std::invalid_argument("fd_gradient: step must be positive");
  Vector g(x.size());
  Vector probe = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + step;
    const double up = f.loss(probe);
    probe[i] = x[i] - step;
    const double down = f.loss(probe);
    probe[i] = x[i];
    g[i] = (up - down) / (2.0 * step);
  }
  return g;
}

Matrix fd_hessian(const Objective& f, const Vector& x, double step) {
  if (!(step > 0.0)) throw std::invalid_argument("fd_hessian: step must be positive");
  const auto n = x.size();
  Matrix h(n, n);
  Vector probe = x;
  Vector up, down;
  for (Eigen::Index i = 0; i < n; ++i) {
    probe[i] = x[i] + step;
    f.loss_gradient(probe, up);
    probe[i] = x[i] - step;
    f.loss_gradient(probe, down);
    probe[i] = x[i];
    h.col(i) = (up - down) / (2.0 * step);
  }
  return 0.5 * (h + h.transpose());
}

double relative_linf_error(const Vector& a, const Vector& b, double floor) {
  if (a.size() != b.size()) throw DimensionError("relative_linf_error: length mismatch");
  if (a.size() == 0) return 0.0;
  const double scale =
      std::max({a.cwiseAbs().maxCoeff(), b.cwiseAbs().maxCoeff(), floor});
  return (a - b).cwiseAbs().maxCoeff() / scale;
}

double relative_linf_error(const Matrix& a, const Matrix& b, double floor) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError("relative_linf_error: shape mismatch");
  }
  if (a.size() == 0) return 0.0;
  const double scale =
      std::max({a.cwiseAbs().maxCoeff(), b.cwiseAbs().maxCoeff(), floor});
  return (a - b).cwiseAbs().maxCoeff() / scale;
}

}  // namespace gradflow
