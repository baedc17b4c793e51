#include "gradflow/optimize.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <deque>
#include <limits>
#include <stdexcept>
#include <string>

#include "gradflow/ode.hpp"

namespace gradflow {

namespace {

using Clock = std::chrono::steady_clock;
constexpr double kEps = std::numeric_limits<double>::epsilon();

constexpr double kWolfeC1 = 1e-4;
constexpr double kWolfeC2 = 0.9;
constexpr int kMaxLineSearchTrials = 25;

class ScaledObjective final : public Objective {
 public:
  ScaledObjective(const Objective& base, double scale) : base_(base), scale_(scale) {}

  std::size_t dim() const override { return base_.dim(); }
  double loss(const Vector& x) const override { return scale_ * base_.loss(x); }
  double loss_gradient(const Vector& x, Vector& grad) const override {
    const double f = base_.loss_gradient(x, grad);
    grad *= scale_;
    return scale_ * f;
  }
  Matrix hessian(const Vector& x) const override { return scale_ * base_.hessian(x); }
  double loss_roundoff(const Vector& x, double loss) const override {
    return scale_ * base_.loss_roundoff(x, loss / scale_);
  }

 private:
  const Objective& base_;
  double scale_;
};

class Deadline {
 public:
  explicit Deadline(std::optional<double> seconds) : seconds_(seconds), start_(Clock::now()) {}
  bool passed() const {
    if (!seconds_) return false;
    const std::chrono::duration<double> elapsed = Clock::now() - start_;
    return elapsed.count() >= *seconds_;
  }
  std::optional<double> remaining() const {
    if (!seconds_) return std::nullopt;
    const std::chrono::duration<double> elapsed = Clock::now() - start_;
    return std::max(*seconds_ - elapsed.count(), 0.0);
  }

 private:
  std::optional<double> seconds_;
  Clock::time_point start_;
};

// Lowest loss seen. Losses that differ by less than their rounding error
// count as ties, which go to the smaller gradient.
struct Best {
  Vector theta;
  double loss = std::numeric_limits<double>::infinity();
  double grad_norm = std::numeric_limits<double>::infinity();

  void offer(const Vector& x, double f, double gnorm, double noise) {
    const bool tie = std::abs(f - loss) <= noise;
    if (theta.size() == 0 || (!tie && f < loss) || (tie && gnorm < grad_norm)) {
      theta = x;
      loss = f;
      grad_norm = gnorm;
    }
  }
};

struct Point {
  double alpha = 0.0;
  double phi = 0.0;
  double dphi = 0.0;
};

struct LineSearchResult {
  bool ok = false;
  double alpha = 0.0;
  Vector x;
  double f = 0.0;
  Vector g;
};

double cubic_minimizer(const Point& a, const Point& b) {
  const double d1 = a.dphi + b.dphi - 3.0 * (a.phi - b.phi) / (a.alpha - b.alpha);
  const double disc = d1 * d1 - a.dphi * b.dphi;
  if (!(disc >= 0.0)) return std::numeric_limits<double>::quiet_NaN();
  const double d2 = std::copysign(std::sqrt(disc), b.alpha - a.alpha);
  return b.alpha -
         (b.alpha - a.alpha) * (b.dphi + d2 - d1) / (b.dphi - a.dphi + 2.0 * d2);
}

// Strong Wolfe line search with cubic interpolation in the zoom phase.
LineSearchResult strong_wolfe(const Objective& f, const Vector& x, double f0, const Vector& g0,
                              const Vector& p, double alpha_init) {
  LineSearchResult res;
  const double dphi0 = g0.dot(p);
  int trials = 0;
  auto eval = [&](double alpha) {
    res.x = x + alpha * p;
    res.f = f.loss_gradient(res.x, res.g);
    res.alpha = alpha;
    ++trials;
    return Point{alpha, res.f, res.g.dot(p)};
  };
  auto armijo_fails = [&](const Point& pt) { return pt.phi > f0 + kWolfeC1 * pt.alpha * dphi0; };
  auto curvature_ok = [&](const Point& pt) { return std::abs(pt.dphi) <= -kWolfeC2 * dphi0; };

  auto zoom = [&](Point lo, Point hi) {
    while (trials < kMaxLineSearchTrials) {
      const double width = hi.alpha - lo.alpha;
      double a = cubic_minimizer(lo, hi);
      const double inner_lo = lo.alpha + 0.1 * width;
      const double inner_hi = hi.alpha - 0.1 * width;
      if (!std::isfinite(a)) a = lo.alpha + 0.5 * width;
      a = std::clamp(a, std::min(inner_lo, inner_hi), std::max(inner_lo, inner_hi));
      const Point pt = eval(a);
      if (!std::isfinite(pt.phi)) {
        hi = pt;
        continue;
      }
      if (armijo_fails(pt) || pt.phi >= lo.phi) {
        hi = pt;
      } else {
        if (curvature_ok(pt)) return true;
        if (pt.dphi * (hi.alpha - lo.alpha) >= 0.0) hi = lo;
        lo = pt;
      }
      if (std::abs(hi.alpha - lo.alpha) <= kEps * std::max(lo.alpha, 1.0)) return false;
    }
    return false;
  };

  if (!(dphi0 < 0.0)) return res;
  Point prev{0.0, f0, dphi0};
  double alpha = alpha_init;
  while (trials < kMaxLineSearchTrials) {
    const Point pt = eval(alpha);
    if (!std::isfinite(pt.phi) || !std::isfinite(pt.dphi)) {
      // Step left the region where the objective is defined: back off.
      alpha = prev.alpha + 0.5 * (alpha - prev.alpha);
      continue;
    }
    if (armijo_fails(pt) || (trials > 1 && pt.phi >= prev.phi)) {
      res.ok = zoom(prev, pt);
      return res;
    }
    if (curvature_ok(pt)) {
      res.ok = true;
      return res;
    }
    if (pt.dphi >= 0.0) {
      res.ok = zoom(pt, prev);
      return res;
    }
    prev = pt;
    alpha *= 2.0;
  }
  return res;
}

void bfgs_update(Matrix& hinv, const Vector& s, const Vector& y) {
  const double rho = 1.0 / s.dot(y);
  const Vector hy = hinv * y;
  const double yhy = y.dot(hy);
  hinv -= rho * (s * hy.transpose() + hy * s.transpose());
  hinv += (rho * rho * yhy + rho) * (s * s.transpose());
}

bool curvature_pair_ok(const Vector& s, const Vector& y) {
  return s.dot(y) > kEps * s.norm() * y.norm();
}

class Solver {
 public:
  Solver(const Objective& f, const OptimizerMethod& m, const OptimizerBudget& b,
         const IterationObserver& obs)
      : f_(f), method_(m), budget_(b), observer_(obs), deadline_(b.wall_seconds) {}

  void run(const Vector& theta0);

  Best best;
  ConvergenceReport report;

 private:
  // Returns false when the loop should stop; sets report.status.
  bool keep_going(const Vector& g) {
    if (g.norm() <= budget_.grad_tol * grad_scale_) {
      report.status = ConvergenceStatus::probably_converged;
      return false;
    }
    if (report.iterations >= budget_.max_iters) {
      report.status = ConvergenceStatus::not_converged;
      return false;
    }
    if (deadline_.passed()) {
      report.status = ConvergenceStatus::budget_exhausted;
      return false;
    }
    return true;
  }

  void offer(const Vector& x, double fx, const Vector& g) {
    if (!std::isfinite(fx)) return;
    const double noise = 4.0 * kEps * std::abs(fx) + grad_scale_ * f_.loss_roundoff(x, fx / grad_scale_);
    best.offer(x, fx, g.norm(), noise);
  }

  void notify(const Vector& x, double fx, const Vector& g, const Matrix* hinv = nullptr,
              const Vector* dir = nullptr) {
    if (observer_) observer_(IterationInfo{report.iterations, x, fx, g, hinv, dir});
  }

  void run_gd(Vector x);
  void run_adam(Vector x);
  void run_quasi_newton(const Objective& f, Vector x);
  void run_newton_tr(Vector x);

  const Objective& f_;
  const OptimizerMethod& method_;
  const OptimizerBudget& budget_;
  const IterationObserver& observer_;
  Deadline deadline_;
  double grad_scale_ = 1.0;
};

void Solver::run(const Vector& theta0) {
  switch (method_.kind) {
    case OptimizerKind::gd: run_gd(theta0); break;
    case OptimizerKind::adam: run_adam(theta0); break;
    case OptimizerKind::bfgs:
    case OptimizerKind::lbfgs:
      if (method_.gradient_scale == 1.0) {
        run_quasi_newton(f_, theta0);
      } else {
        const ScaledObjective scaled(f_, method_.gradient_scale);
        grad_scale_ = method_.gradient_scale;
        run_quasi_newton(scaled, theta0);
      }
      break;
    case OptimizerKind::newton_tr: run_newton_tr(theta0); break;
  }
}

void Solver::run_gd(Vector x) {
  Vector g;
  double fx = f_.loss_gradient(x, g);
  offer(x, fx, g);
  while (keep_going(g)) {
    x = gradient_descent_step(x, g, method_.lr);
    fx = f_.loss_gradient(x, g);
    offer(x, fx, g);
    ++report.iterations;
    notify(x, fx, g);
  }
}

void Solver::run_adam(Vector x) {
  Vector g;
  double fx = f_.loss_gradient(x, g);
  offer(x, fx, g);
  Vector m = Vector::Zero(x.size());
  Vector v = Vector::Zero(x.size());
  double b1t = 1.0;
  double b2t = 1.0;
  while (keep_going(g)) {
    b1t *= method_.beta1;
    b2t *= method_.beta2;
    m = method_.beta1 * m + (1.0 - method_.beta1) * g;
    v = method_.beta2 * v + (1.0 - method_.beta2) * g.cwiseProduct(g);
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      const double mhat = m(i) / (1.0 - b1t);
      const double vhat = v(i) / (1.0 - b2t);
      x(i) -= method_.lr * mhat / (std::sqrt(vhat) + method_.eps);
    }
    fx = f_.loss_gradient(x, g);
    offer(x, fx, g);
    ++report.iterations;
    notify(x, fx, g);
  }
}

void Solver::run_quasi_newton(const Objective& f, Vector x) {
  const bool dense = method_.kind == OptimizerKind::bfgs;
  const Eigen::Index n = x.size();
  Vector g;
  double fx = f.loss_gradient(x, g);
  offer(x, fx, g);

  Matrix hinv;
  if (dense) hinv = Matrix::Identity(n, n);
  struct Pair {
    Vector s, y;
    double rho;
  };
  std::deque<Pair> pairs;
  double gamma_fixed = 0.0;
  bool fresh = true;  // no curvature information yet
  double last_step = 0.0;

  auto reset = [&] {
    if (dense) hinv.setIdentity();
    pairs.clear();
    fresh = true;
  };

  while (keep_going(g)) {
    Vector p;
    if (dense) {
      p = -(hinv * g);
    } else {
      Vector q = g;
      std::vector<double> a(pairs.size());
      for (std::size_t i = pairs.size(); i-- > 0;) {
        a[i] = pairs[i].rho * pairs[i].s.dot(q);
        q -= a[i] * pairs[i].y;
      }
      double gamma = 1.0;
      if (!pairs.empty()) {
        gamma = method_.fixed_initial_scaling
                    ? gamma_fixed
                    : pairs.back().s.dot(pairs.back().y) / pairs.back().y.squaredNorm();
      }
      Vector r = gamma * q;
      for (std::size_t i = 0; i < pairs.size(); ++i) {
        const double b = pairs[i].rho * pairs[i].y.dot(r);
        r += (a[i] - b) * pairs[i].s;
      }
      p = -r;
    }
    if (!(g.dot(p) < 0.0) || !p.allFinite()) {
      reset();
      p = -g;
    }
    const double alpha0 = fresh ? std::min(1.0, 1.0 / g.norm()) : 1.0;
    LineSearchResult ls = strong_wolfe(f, x, fx, g, p, alpha0);
    ++report.iterations;
    if (!ls.ok) {
      ++report.line_search_failures;
      const double len = last_step > 0.0 ? last_step : std::min(1.0, g.norm());
      Vector xn = x - (len / g.norm()) * g;
      Vector gn;
      const double fn = f.loss_gradient(xn, gn);
      if (std::isfinite(fn) && gn.allFinite()) {
        x = std::move(xn);
        g = std::move(gn);
        fx = fn;
        offer(x, fx, g);
      }
      reset();
      notify(x, fx, g, dense ? &hinv : nullptr, &p);
      continue;
    }
    const Vector s = ls.x - x;
    const Vector y = ls.g - g;
    x = std::move(ls.x);
    g = std::move(ls.g);
    fx = ls.f;
    offer(x, fx, g);
    last_step = s.norm();
    if (curvature_pair_ok(s, y)) {
      const double sy = s.dot(y);
      if (fresh) {
        gamma_fixed = sy / y.squaredNorm();
        if (dense) hinv *= gamma_fixed;
        fresh = false;
      }
      if (dense) {
        bfgs_update(hinv, s, y);
      } else {
        pairs.push_back({s, y, 1.0 / sy});
        if (pairs.size() > method_.memory) pairs.pop_front();
      }
    } else {
      ++report.skipped_updates;
    }
    notify(x, fx, g, dense ? &hinv : nullptr, &p);
  }
}

void Solver::run_newton_tr(Vector x) {
  Vector g;
  double fx = f_.loss_gradient(x, g);
  offer(x, fx, g);
  double delta = method_.delta0;
  Matrix h;
  bool h_current = false;
  while (keep_going(g)) {
    if (!h_current) {
      h = f_.hessian(x);
      h_current = true;
    }
    const Vector d = newton_tr_step(h, g, delta);
    ++report.iterations;
    const double dnorm = d.norm();
    if (!(dnorm > 0.0)) {
      report.status = ConvergenceStatus::not_converged;
      break;
    }
    const double pred = -model_value(h, g, d);
    Vector xn = x + d;
    Vector gn;
    const double fn = f_.loss_gradient(xn, gn);
    const double ared = fx - fn;

    const double noise = f_.loss_roundoff(x, fx) + f_.loss_roundoff(xn, fn) +
                         4.0 * kEps * std::max(std::abs(fx), std::abs(fn));
    double rho;
    if (!std::isfinite(fn) || !gn.allFinite()) {
      rho = -1.0;
    } else if (std::abs(ared) <= noise && std::abs(pred) <= noise) {
      // Both reductions are below the rounding error of the loss itself;
      // decide by whether the step shrinks the gradient.
      rho = gn.norm() < g.norm() ? 1.0 : -1.0;
    } else {
      rho = pred > 0.0 ? ared / pred : -1.0;
    }

    if (rho < 0.25) {
      delta = 0.25 * dnorm;
    } else if (rho > 0.75 && dnorm >= 0.99 * delta) {
      delta = std::min(2.0 * delta, method_.delta_max);
    }
    if (rho > 1e-4) {
      x = std::move(xn);
      g = std::move(gn);
      fx = fn;
      h_current = false;
      offer(x, fx, g);
    } else {
      ++report.rejected_steps;
    }
    notify(x, fx, g);
    // A radius below the resolution of x cannot move it any more.
    if (delta < 1e-3 * kEps * std::max(1.0, x.norm())) {
      report.status = ConvergenceStatus::not_converged;
      break;
    }
  }
  report.final_trust_radius = delta;
}

}  // namespace

std::string_view to_string(OptimizerKind kind) {
  switch (kind) {
    case OptimizerKind::gd: return "gd";
    case OptimizerKind::adam: return "adam";
    case OptimizerKind::bfgs: return "bfgs";
    case OptimizerKind::lbfgs: return "lbfgs";
    case OptimizerKind::newton_tr: return "newton_tr";
  }
  return "unknown";
}

OptimizerKind optimizer_from_string(std::string_view name) {
  for (auto k : {OptimizerKind::gd, OptimizerKind::adam, OptimizerKind::bfgs,
                 OptimizerKind::lbfgs, OptimizerKind::newton_tr}) {
    if (to_string(k) == name) return k;
  }
  throw std::invalid_argument("unknown optimizer: " + std::string(name));
}

std::string_view to_string(ConvergenceStatus s) {
  switch (s) {
    case ConvergenceStatus::probably_converged: return "probably_converged";
    case ConvergenceStatus::not_converged: return "not_converged";
    case ConvergenceStatus::budget_exhausted: return "budget_exhausted";
  }
  return "unknown";
}

ConvergenceStatus convergence_from_string(std::string_view name) {
  for (auto s : {ConvergenceStatus::probably_converged, ConvergenceStatus::not_converged,
                 ConvergenceStatus::budget_exhausted}) {
    if (to_string(s) == name) return s;
  }
  throw std::invalid_argument("unknown status: " + std::string(name));
}

OptimizerMethod OptimizerMethod::gd(double lr) {
  OptimizerMethod m;
  m.kind = OptimizerKind::gd;
  m.lr = lr;
  return m;
}

OptimizerMethod OptimizerMethod::adam(double lr, double beta1, double beta2, double eps) {
  OptimizerMethod m;
  m.kind = OptimizerKind::adam;
  m.lr = lr;
  m.beta1 = beta1;
  m.beta2 = beta2;
  m.eps = eps;
  return m;
}

OptimizerMethod OptimizerMethod::bfgs() {
  OptimizerMethod m;
  m.kind = OptimizerKind::bfgs;
  return m;
}

OptimizerMethod OptimizerMethod::lbfgs(std::size_t memory) {
  OptimizerMethod m;
  m.kind = OptimizerKind::lbfgs;
  m.memory = memory;
  return m;
}

OptimizerMethod OptimizerMethod::newton_tr(double delta0, double delta_max) {
  OptimizerMethod m;
  m.kind = OptimizerKind::newton_tr;
  m.delta0 = delta0;
  m.delta_max = delta_max;
  return m;
}

void OptimizerMethod::validate() const {
  switch (kind) {
    case OptimizerKind::gd:
      if (!(lr > 0.0)) throw std::invalid_argument("gd: lr must be > 0");
      break;
    case OptimizerKind::adam:
      if (!(lr > 0.0)) throw std::invalid_argument("adam: lr must be > 0");
      if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
        throw std::invalid_argument("adam: betas must lie in [0, 1)");
      }
      if (!(eps >= 0.0)) throw std::invalid_argument("adam: eps must be >= 0");
      break;
    case OptimizerKind::lbfgs:
      if (memory < 1) throw std::invalid_argument("lbfgs: memory must be >= 1");
      [[fallthrough]];
    case OptimizerKind::bfgs:
      if (!(gradient_scale > 0.0) || !std::isfinite(gradient_scale)) {
        throw std::invalid_argument("gradient_scale must be positive");
      }
      break;
    case OptimizerKind::newton_tr:
      if (!(delta0 > 0.0) || !(delta_max > 0.0)) {
        throw std::invalid_argument("newton_tr: delta0 and delta_max must be > 0");
      }
      break;
  }
}

void OptimizerBudget::validate() const {
  if (!(grad_tol >= 0.0)) throw std::invalid_argument("grad_tol must be >= 0");
  if (wall_seconds && !(*wall_seconds >= 0.0)) {
    throw std::invalid_argument("wall_seconds must be >= 0");
  }
}

MinimizeResult minimize(const Objective& objective, const Vector& theta0,
                        const OptimizerMethod& method, const OptimizerBudget& budget,
                        const IterationObserver& observer) {
  method.validate();
  budget.validate();
  if (static_cast<std::size_t>(theta0.size()) != objective.dim()) {
    throw DimensionError("minimize: theta0 has wrong length");
  }
  MeteredObjective metered(objective);
  Solver solver(metered, method, budget, observer);
  solver.run(theta0);

  MinimizeResult out;
  out.theta = std::move(solver.best.theta);
  out.report = solver.report;
  Vector g;
  out.report.final_loss = metered.loss_gradient(out.theta, g);
  out.report.grad_norm = g.norm();
  out.report.work = metered.work();
  return out;
}

MinimizeResult minimize(const Net& net, const ParamVector& theta0, const Dataset& data,
                        const LossConfig& loss_cfg, const OptimizerMethod& method,
                        const OptimizerBudget& budget) {
  check_compatible(net, theta0, data);
  loss_cfg.validate();
  const MlpObjective obj(net, data, loss_cfg);
  return minimize(obj, theta0, method, budget);
}

double model_value(const Matrix& h, const Vector& g, const Vector& d) {
  return g.dot(d) + 0.5 * d.dot(h * d);
}

namespace {

Vector cauchy_point(const Matrix& h, const Vector& g, double delta) {
  const double gnorm = g.norm();
  if (gnorm == 0.0) return Vector::Zero(g.size());
  const double ghg = g.dot(h * g);
  double tau = 1.0;
  if (ghg > 0.0) tau = std::min(gnorm * gnorm * gnorm / (delta * ghg), 1.0);
  return (-tau * delta / gnorm) * g;
}

Vector dogleg(const Eigen::LLT<Matrix>& llt, const Matrix& h, const Vector& g, double delta) {
  const Vector pn = llt.solve(-g);
  if (pn.norm() <= delta) return pn;
  const double gnorm = g.norm();
  const double ghg = g.dot(h * g);
  const Vector pu = (-(gnorm * gnorm) / ghg) * g;
  const double pu_norm = pu.norm();
  if (pu_norm >= delta) return (-delta / gnorm) * g;
  const Vector diff = pn - pu;
  const double a = diff.squaredNorm();
  const double b = 2.0 * pu.dot(diff);
  const double c = pu_norm * pu_norm - delta * delta;
  const double tau = (-b + std::sqrt(b * b - 4.0 * a * c)) / (2.0 * a);
  return pu + std::clamp(tau, 0.0, 1.0) * diff;
}

// Boundary solution of (H + lambda I) d = -g through the eigendecomposition.
Vector regularized_step(const Matrix& h, const Vector& g, double delta) {
  const Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (h + h.transpose()));
  if (es.info() != Eigen::Success) return cauchy_point(h, g, delta);
  const Vector& lam = es.eigenvalues();
  const Matrix& q = es.eigenvectors();
  const Vector gh = q.transpose() * g;
  const Eigen::Index n = lam.size();
  const double l1 = lam(0);
  const double lam_scale = std::max(1.0, lam.cwiseAbs().maxCoeff());
  const double gnorm = g.norm();

  auto step_for = [&](double lambda, bool skip_bottom) {
    Vector c = Vector::Zero(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double denom = lam(i) + lambda;
      if (skip_bottom && lam(i) - l1 <= 1e-12 * lam_scale) continue;
      c(i) = -gh(i) / denom;
    }
    return c;
  };

  const double lo_lambda = std::max(0.0, -l1);
  double bottom_weight = 0.0;
  for (Eigen::Index i = 0; i < n && lam(i) - l1 <= 1e-12 * lam_scale; ++i) {
    bottom_weight += gh(i) * gh(i);
  }
  const bool bottom_orthogonal = std::sqrt(bottom_weight) <= 1e-12 * std::max(gnorm, 1e-300);

  if (bottom_orthogonal) {
    // Possible hard case: the secular equation may have no root above -l1.
    Vector c = step_for(lo_lambda, true);
    const double cn = c.norm();
    if (cn <= delta) {
      if (l1 < 0.0) {
        const double tau = std::sqrt(delta * delta - cn * cn);
        const double sign = gh(0) > 0.0 ? -1.0 : 1.0;
        c(0) += sign * tau;
      }
      return q * c;
    }
  } else if (l1 > 0.0) {
    const Vector c = step_for(0.0, false);
    if (c.norm() <= delta) return q * c;
  }

  // Safeguarded Newton on 1/delta - 1/|d(lambda)|, which is close to linear.
  auto norms = [&](double lambda, double& norm, double& dnorm3) {
    double s2 = 0.0;
    double s3 = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double denom = lam(i) + lambda;
      const double w = gh(i) * gh(i);
      s2 += w / (denom * denom);
      s3 += w / (denom * denom * denom);
    }
    norm = std::sqrt(s2);
    dnorm3 = s3;
  };
  double lo = lo_lambda;
  double hi = lo_lambda + gnorm / delta + std::abs(l1) + 1e-300;
  double lambda = std::min(hi, lo + std::max(1e-12 * lam_scale, 0.5 * (hi - lo) * 1e-3));
  for (int it = 0; it < 200; ++it) {
    double norm, s3;
    norms(lambda, norm, s3);
    if (!std::isfinite(norm) || norm > delta) {
      lo = lambda;
    } else {
      hi = lambda;
    }
    if (std::isfinite(norm) && std::abs(norm - delta) <= 1e-12 * delta) break;
    double next = std::numeric_limits<double>::quiet_NaN();
    if (std::isfinite(norm) && norm > 0.0 && s3 > 0.0) {
      const double phi = 1.0 / delta - 1.0 / norm;
      const double dphi = -s3 / (norm * norm * norm);
      next = lambda - phi / dphi;
    }
    if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
    if (next == lambda || hi - lo <= 4.0 * kEps * hi) break;
    lambda = next;
  }
  Vector d = q * step_for(lambda, false);
  const double dn = d.norm();
  if (dn > delta) d *= delta / dn;
  return d;
}

}  // namespace

Vector newton_tr_step(const Matrix& h, const Vector& g, double delta) {
  if (h.rows() != h.cols() || h.rows() != g.size()) {
    throw DimensionError("newton_tr_step: H and g do not match");
  }
  if (!(delta > 0.0)) throw std::invalid_argument("newton_tr_step: delta must be > 0");
  if (g.size() == 0) return Vector();
  const Eigen::LLT<Matrix> llt(h);
  bool pd = llt.info() == Eigen::Success;
  if (pd) {
    const auto diag = llt.matrixLLT().diagonal();
    pd = diag.allFinite() && (diag.array() > 0.0).all();
  }
  Vector d = pd ? dogleg(llt, h, g, delta) : regularized_step(h, g, delta);
  if (!d.allFinite()) d = cauchy_point(h, g, delta);
  const Vector c = cauchy_point(h, g, delta);
  if (model_value(h, g, c) < model_value(h, g, d)) return c;
  return d;
}

double min_eigenvalue(const Matrix& h) { return symmetric_eigenvalues(h)(0); }

EpochVerdict classify_epochs(std::span<const double> epoch_losses) {
  for (std::size_t i = 1; i < epoch_losses.size(); ++i) {
    if (epoch_losses[i] >= epoch_losses[i - 1]) {
      return {ConvergenceStatus::probably_converged, i + 1};
    }
  }
  return {};
}

void ProtocolConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("protocol: epochs must be >= 1");
  if (steps_per_epoch < 1) throw std::invalid_argument("protocol: steps_per_epoch must be >= 1");
  if (!(delta0 > 0.0) || !(delta_max > 0.0)) {
    throw std::invalid_argument("protocol: trust radii must be > 0");
  }
}

ProtocolResult probably_converged_protocol(const Objective& objective, const Vector& theta0,
                                           const ProtocolConfig& cfg) {
  cfg.validate();
  const Deadline deadline(cfg.wall_seconds);
  ProtocolResult out;
  out.theta = theta0;
  OptimizerMethod method = OptimizerMethod::newton_tr(cfg.delta0, cfg.delta_max);
  ConvergenceReport& rep = out.report;
  bool out_of_time = false;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    OptimizerBudget budget;
    budget.max_iters = cfg.steps_per_epoch;
    budget.grad_tol = 0.0;
    budget.wall_seconds = deadline.remaining();
    const MinimizeResult r = minimize(objective, out.theta, method, budget);
    out.theta = r.theta;
    out.epoch_losses.push_back(r.report.final_loss);
    rep.iterations += r.report.iterations;
    rep.line_search_failures += r.report.line_search_failures;
    rep.rejected_steps += r.report.rejected_steps;
    rep.work += r.report.work;
    rep.final_loss = r.report.final_loss;
    rep.grad_norm = r.report.grad_norm;
    rep.final_trust_radius = r.report.final_trust_radius;
    method.delta0 = std::clamp(r.report.final_trust_radius, 1e-300, cfg.delta_max);
    if (classify_epochs(out.epoch_losses).status == ConvergenceStatus::probably_converged) break;
    if (r.report.status == ConvergenceStatus::budget_exhausted || deadline.passed()) {
      out_of_time = true;
      break;
    }
  }
  rep.status = classify_epochs(out.epoch_losses).status;
  if (rep.status != ConvergenceStatus::probably_converged && out_of_time) {
    rep.status = ConvergenceStatus::budget_exhausted;
  }
  rep.min_eigenvalue = min_eigenvalue(objective.hessian(out.theta));
  ++rep.work.n_hess;
  return out;
}

ProtocolResult probably_converged_protocol(const Net& net, const ParamVector& theta0,
                                           const Dataset& data, const LossConfig& loss_cfg,
                                           const ProtocolConfig& cfg) {
  check_compatible(net, theta0, data);
  loss_cfg.validate();
  const MlpObjective obj(net, data, loss_cfg);
  return probably_converged_protocol(obj, theta0, cfg);
}

}  // namespace gradflow
