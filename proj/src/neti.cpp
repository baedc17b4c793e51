#include "gradflow/neti.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <string>

#include "gradflow/derivatives.hpp"

namespace gradflow {

namespace {

constexpr double kEps = std::numeric_limits<double>::epsilon();
constexpr double kInvPi = std::numbers::inv_pi;

void require_analytic(ActivationKind kind) {
  if (!has_analytic_kernel(kind)) {
    throw UnsupportedActivationError("no closed-form Gaussian kernel for activation '" +
                                     std::string(to_string(kind)) +
                                     "'; estimate the loss with mc_oracle instead");
  }
}

// Angle between u and v from the half-angle form, accurate near 0 and pi.
double angle(const Vector& u, double nu, const Vector& v, double nv) {
  const Vector uh = u / nu;
  const Vector vh = v / nv;
  return 2.0 * std::atan2((uh - vh).norm(), (uh + vh).norm());
}

struct Unit {
  Vector w;
  double c;
};

std::vector<Unit> units(const NetISpec& spec) {
  std::vector<Unit> out;
  for (Eigen::Index k = 0; k < spec.student_w.rows(); ++k) {
    out.push_back({spec.student_w.row(k).transpose(), spec.student_a(k)});
  }
  for (Eigen::Index m = 0; m < spec.teacher_w.rows(); ++m) {
    out.push_back({spec.teacher_w.row(m).transpose(), -spec.teacher_a(m)});
  }
  return out;
}

// Terms c_p c_q J(u_p, u_q) with the symmetric pairs folded together.
std::vector<double> loss_terms(const NetISpec& spec) {
  const auto us = units(spec);
  std::vector<double> terms;
  terms.reserve(us.size() * (us.size() + 1) / 2);
  for (std::size_t p = 0; p < us.size(); ++p) {
    terms.push_back(0.5 * us[p].c * us[p].c * neti_kernel(spec.activation, us[p].w, us[p].w));
    for (std::size_t q = p + 1; q < us.size(); ++q) {
      terms.push_back(us[p].c * us[q].c * neti_kernel(spec.activation, us[p].w, us[q].w));
    }
  }
  return terms;
}

double activation_value(ActivationKind kind, double x) { return activation_eval(kind, x).value; }

}  // namespace

void NetISpec::validate() const {
  const auto d = static_cast<Eigen::Index>(input_dim);
  if (input_dim == 0) throw DimensionError("NetISpec: input_dim must be >= 1");
  if (student_w.rows() == 0 || student_w.cols() != d) {
    throw DimensionError("NetISpec: student weights must be K x D with K >= 1");
  }
  if (student_a.size() != student_w.rows()) {
    throw DimensionError("NetISpec: student output weights must have K entries");
  }
  if (teacher_w.rows() == 0 || teacher_w.cols() != d) {
    throw DimensionError("NetISpec: teacher weights must be M x D with M >= 1");
  }
  if (teacher_a.size() != teacher_w.rows()) {
    throw DimensionError("NetISpec: teacher output weights must have M entries");
  }
}

std::size_t NetISpec::param_count() const {
  const std::size_t k = student_width();
  return k * input_dim + (trainable_output ? k : 0);
}

Vector NetISpec::params() const {
  Vector out(static_cast<Eigen::Index>(param_count()));
  Eigen::Index i = 0;
  for (Eigen::Index k = 0; k < student_w.rows(); ++k) {
    for (Eigen::Index j = 0; j < student_w.cols(); ++j) out(i++) = student_w(k, j);
  }
  if (trainable_output) {
    for (Eigen::Index k = 0; k < student_a.size(); ++k) out(i++) = student_a(k);
  }
  return out;
}

NetISpec NetISpec::with_params(const Vector& theta) const {
  if (static_cast<std::size_t>(theta.size()) != param_count()) {
    throw DimensionError("NetISpec: parameter vector has wrong length");
  }
  NetISpec out = *this;
  Eigen::Index i = 0;
  for (Eigen::Index k = 0; k < out.student_w.rows(); ++k) {
    for (Eigen::Index j = 0; j < out.student_w.cols(); ++j) out.student_w(k, j) = theta(i++);
  }
  if (trainable_output) {
    for (Eigen::Index k = 0; k < out.student_a.size(); ++k) out.student_a(k) = theta(i++);
  }
  return out;
}

NetISpec random_neti_spec(std::size_t input_dim, std::size_t student_width,
                          std::size_t teacher_width, ActivationKind activation,
                          std::uint64_t seed, bool trainable_output) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  const double row_scale = 1.0 / std::sqrt(static_cast<double>(input_dim));
  const auto d = static_cast<Eigen::Index>(input_dim);
  NetISpec spec;
  spec.input_dim = input_dim;
  spec.activation = activation;
  spec.trainable_output = trainable_output;
  spec.student_w.resize(static_cast<Eigen::Index>(student_width), d);
  spec.teacher_w.resize(static_cast<Eigen::Index>(teacher_width), d);
  for (auto& x : spec.student_w.reshaped<Eigen::RowMajor>()) x = row_scale * normal(rng);
  for (auto& x : spec.teacher_w.reshaped<Eigen::RowMajor>()) x = row_scale * normal(rng);
  spec.student_a.resize(static_cast<Eigen::Index>(student_width));
  spec.teacher_a.resize(static_cast<Eigen::Index>(teacher_width));
  for (auto& x : spec.student_a) x = trainable_output ? normal(rng) : 1.0;
  for (auto& x : spec.teacher_a) x = normal(rng);
  return spec;
}

bool has_analytic_kernel(ActivationKind kind) {
  return kind == ActivationKind::identity || kind == ActivationKind::erf_scaled ||
         kind == ActivationKind::relu;
}

double neti_kernel(ActivationKind kind, const Vector& u, const Vector& v) {
  require_analytic(kind);
  const double uv = u.dot(v);
  switch (kind) {
    case ActivationKind::identity: return uv;
    case ActivationKind::erf_scaled: {
      const double s = uv / std::sqrt((1.0 + u.squaredNorm()) * (1.0 + v.squaredNorm()));
      return 2.0 * kInvPi * std::asin(s);
    }
    case ActivationKind::relu: {
      const double nu = u.norm();
      const double nv = v.norm();
      if (nu == 0.0 || nv == 0.0) return 0.0;
      const double theta = angle(u, nu, v, nv);
      return 0.5 * kInvPi * (nu * nv * std::sin(theta) + (std::numbers::pi - theta) * uv);
    }
    default: break;
  }
  return 0.0;
}

Vector neti_kernel_gradient(ActivationKind kind, const Vector& u, const Vector& v) {
  require_analytic(kind);
  switch (kind) {
    case ActivationKind::identity: return v;
    case ActivationKind::erf_scaled: {
      const double pu = 1.0 + u.squaredNorm();
      const double root = std::sqrt(pu * (1.0 + v.squaredNorm()));
      const double s = u.dot(v) / root;
      const Vector ds = v / root - (s / pu) * u;
      return (2.0 * kInvPi / std::sqrt((1.0 - s) * (1.0 + s))) * ds;
    }
    case ActivationKind::relu: {
      const double nu = u.norm();
      const double nv = v.norm();
      if (nv == 0.0) return Vector::Zero(u.size());
      // J is not differentiable at u = 0; use the average over directions.
      if (nu == 0.0) return 0.25 * v;
      const double theta = angle(u, nu, v, nv);
      return 0.5 * kInvPi * ((std::numbers::pi - theta) * v + (nv * std::sin(theta) / nu) * u);
    }
    default: break;
  }
  return Vector::Zero(u.size());
}

double neti_loss(const NetISpec& spec) {
  spec.validate();
  require_analytic(spec.activation);
  std::vector<double> terms = loss_terms(spec);
  // Canonical order: the multiset of terms does not depend on unit order.
  std::sort(terms.begin(), terms.end());
  double sum = 0.0;
  double comp = 0.0;
  for (double t : terms) {
    const double s = sum + t;
    comp += std::abs(sum) >= std::abs(t) ? (sum - s) + t : (t - s) + sum;
    sum = s;
  }
  return sum + comp;
}

double neti_loss_roundoff(const NetISpec& spec) {
  spec.validate();
  require_analytic(spec.activation);
  double mag = 0.0;
  for (double t : loss_terms(spec)) mag += std::abs(t);
  return 8.0 * kEps * mag;
}

Vector neti_gradient(const NetISpec& spec) {
  spec.validate();
  require_analytic(spec.activation);
  const auto us = units(spec);
  const Eigen::Index k_count = spec.student_w.rows();
  const auto d = static_cast<Eigen::Index>(spec.input_dim);
  Vector grad(static_cast<Eigen::Index>(spec.param_count()));
  for (Eigen::Index k = 0; k < k_count; ++k) {
    Vector gw = Vector::Zero(d);
    double ga = 0.0;
    for (const Unit& q : us) {
      gw += q.c * neti_kernel_gradient(spec.activation, us[k].w, q.w);
      if (spec.trainable_output) ga += q.c * neti_kernel(spec.activation, us[k].w, q.w);
    }
    grad.segment(k * d, d) = us[k].c * gw;
    if (spec.trainable_output) grad(k_count * d + k) = ga;
  }
  return grad;
}

Matrix neti_hessian(const NetISpec& spec, double step) {
  const NetIObjective obj(spec);
  return fd_hessian(obj, spec.params(), step);
}

McEstimate mc_oracle(const NetISpec& spec, std::size_t n_samples, std::uint64_t seed) {
  spec.validate();
  if (n_samples == 0) throw std::invalid_argument("mc_oracle: n_samples must be >= 1");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  const auto d = static_cast<Eigen::Index>(spec.input_dim);
  Vector x(d);
  // Welford's running mean and sum of squared deviations.
  double mean = 0.0;
  double m2 = 0.0;
  for (std::size_t i = 0; i < n_samples; ++i) {
    for (auto& xi : x) xi = normal(rng);
    double fs = 0.0;
    for (Eigen::Index k = 0; k < spec.student_w.rows(); ++k) {
      fs += spec.student_a(k) * activation_value(spec.activation, spec.student_w.row(k).dot(x));
    }
    double ft = 0.0;
    for (Eigen::Index m = 0; m < spec.teacher_w.rows(); ++m) {
      ft += spec.teacher_a(m) * activation_value(spec.activation, spec.teacher_w.row(m).dot(x));
    }
    const double r = fs - ft;
    const double val = 0.5 * r * r;
    const double delta = val - mean;
    mean += delta / static_cast<double>(i + 1);
    m2 += delta * (val - mean);
  }
  McEstimate out;
  out.mean = mean;
  out.samples = n_samples;
  out.standard_error =
      n_samples > 1 ? std::sqrt(m2 / static_cast<double>(n_samples - 1) /
                                static_cast<double>(n_samples))
                    : 0.0;
  return out;
}

NetIObjective::NetIObjective(NetISpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  require_analytic(spec_.activation);
}

double NetIObjective::loss(const Vector& theta) const { return neti_loss(spec_.with_params(theta)); }

double NetIObjective::loss_gradient(const Vector& theta, Vector& grad) const {
  const NetISpec s = spec_.with_params(theta);
  grad = neti_gradient(s);
  return neti_loss(s);
}

Matrix NetIObjective::hessian(const Vector& theta) const {
  return fd_hessian(*this, theta, 1e-5);
}

double NetIObjective::loss_roundoff(const Vector& theta, double) const {
  return neti_loss_roundoff(spec_.with_params(theta));
}

NetITrainResult neti_train(const NetISpec& spec, const NetITrainConfig& cfg) {
  const NetIObjective obj(spec);
  Vector theta = spec.params();
  EvalWork warm;
  if (cfg.warm_start) {
    const Trajectory tr = integrate(obj, theta, 1.0, *cfg.warm_start);
    theta = tr.final_state();
    warm = tr.work;
  }
  MinimizeResult r = minimize(obj, theta, cfg.method, cfg.budget);
  r.report.work += warm;
  return {spec.with_params(r.theta), r.report};
}

double aligned_sq_distance(const Matrix& w_a, const Vector& a_a, const Matrix& w_b,
                           const Vector& a_b, bool with_output, bool sign_symmetric) {
  if (w_a.rows() != w_b.rows() || w_a.cols() != w_b.cols()) {
    throw DimensionError("aligned_sq_distance: weight shapes differ");
  }
  if (with_output && (a_a.size() != w_a.rows() || a_b.size() != w_b.rows())) {
    throw DimensionError("aligned_sq_distance: output weights do not match rows");
  }
  const Eigen::Index k = w_a.rows();
  auto pair_cost = [&](Eigen::Index i, Eigen::Index j, double sign) {
    double c = (w_a.row(i) - sign * w_b.row(j)).squaredNorm();
    if (with_output) c += (a_a(i) - sign * a_b(j)) * (a_a(i) - sign * a_b(j));
    return c;
  };
  std::vector<bool> used_a(static_cast<std::size_t>(k), false);
  std::vector<bool> used_b(static_cast<std::size_t>(k), false);
  double total = 0.0;
  for (Eigen::Index round = 0; round < k; ++round) {
    double best = std::numeric_limits<double>::infinity();
    Eigen::Index bi = -1, bj = -1;
    for (Eigen::Index i = 0; i < k; ++i) {
      if (used_a[static_cast<std::size_t>(i)]) continue;
      for (Eigen::Index j = 0; j < k; ++j) {
        if (used_b[static_cast<std::size_t>(j)]) continue;
        // Matching is decided on first-layer rows only.
        double row = (w_a.row(i) - w_b.row(j)).squaredNorm();
        if (sign_symmetric) row = std::min(row, (w_a.row(i) + w_b.row(j)).squaredNorm());
        if (row < best) {
          best = row;
          bi = i;
          bj = j;
        }
      }
    }
    used_a[static_cast<std::size_t>(bi)] = true;
    used_b[static_cast<std::size_t>(bj)] = true;
    double sign = 1.0;
    if (sign_symmetric &&
        (w_a.row(bi) + w_b.row(bj)).squaredNorm() < (w_a.row(bi) - w_b.row(bj)).squaredNorm()) {
      sign = -1.0;
    }
    total += pair_cost(bi, bj, sign);
  }
  return total;
}

double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) {
    throw std::invalid_argument("loglog_slope: need two or more matching points");
  }
  const auto n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

void RateExperimentConfig::validate() const {
  if (input_dim == 0 || student_width == 0 || teacher_width == 0) {
    throw std::invalid_argument("rate experiment: dimensions must be >= 1");
  }
  if (teacher_output.size() != teacher_width) {
    throw std::invalid_argument("rate experiment: teacher_output needs teacher_width entries");
  }
  if (sample_sizes.size() < 2) throw std::invalid_argument("rate experiment: need two sizes");
  if (seeds.empty()) throw std::invalid_argument("rate experiment: need at least one seed");
  require_analytic(activation);
}

RateExperimentResult run_rate_experiment(const RateExperimentConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.input_dim;
  const std::size_t k = cfg.student_width;
  const bool odd = cfg.activation != ActivationKind::relu;

  RateExperimentResult out;
  for (std::uint64_t seed : cfg.seeds) {
    NetISpec spec = random_neti_spec(d, k, cfg.teacher_width, cfg.activation, seed,
                                     cfg.trainable_output);
    for (std::size_t m = 0; m < cfg.teacher_width; ++m) {
      spec.teacher_a(static_cast<Eigen::Index>(m)) = cfg.teacher_output[m];
    }

    NetITrainConfig tcfg;
    IntegratorConfig warm;
    warm.method = IntegratorMethod::rosenbrock();
    warm.t_end = 1e3;
    warm.max_steps = 1000;
    warm.grid_points = 2;
    tcfg.warm_start = warm;
    tcfg.budget.max_iters = cfg.max_iters;
    tcfg.budget.grad_tol = cfg.grad_tol;
    const NetITrainResult inf = neti_train(spec, tcfg);

    RateSeedResult res;
    res.seed = seed;
    res.infinite_loss = inf.report.final_loss;
    res.converged = inf.report.status == ConvergenceStatus::probably_converged;

    // Finite data: the same architecture as an MLP (first layer, then a).
    const Net student(d, {{k, cfg.activation, false}, {1, ActivationKind::identity, false}});
    const Net teacher(d, {{cfg.teacher_width, cfg.activation, false},
                          {1, ActivationKind::identity, false}});
    ParamVector teacher_theta(static_cast<Eigen::Index>(teacher.param_count()));
    {
      const Eigen::Index nv = static_cast<Eigen::Index>(cfg.teacher_width * d);
      teacher_theta.head(nv) = spec.teacher_w.reshaped<Eigen::RowMajor>();
      teacher_theta.tail(static_cast<Eigen::Index>(cfg.teacher_width)) = spec.teacher_a;
    }
    ParamVector start(static_cast<Eigen::Index>(student.param_count()));
    const Eigen::Index nw = static_cast<Eigen::Index>(k * d);
    start.head(nw) = inf.spec.student_w.reshaped<Eigen::RowMajor>();
    start.tail(static_cast<Eigen::Index>(k)) = inf.spec.student_a;

    std::vector<double> sizes;
    for (std::size_t n : cfg.sample_sizes) {
      std::mt19937_64 rng(seed * 1000003u + n);
      std::normal_distribution<double> normal;
      RowMatrix x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
      for (auto& v : x.reshaped()) v = normal(rng);
      Dataset data(x, RowMatrix::Zero(static_cast<Eigen::Index>(n), 1));
      data.targets = forward_batch(teacher, teacher_theta, data);

      const MlpObjective full(student, data, {});
      std::vector<std::size_t> free(static_cast<std::size_t>(cfg.trainable_output ? nw + k : nw));
      for (std::size_t i = 0; i < free.size(); ++i) free[i] = i;
      const SubspaceObjective sub(full, start, free);
      OptimizerBudget budget;
      budget.max_iters = cfg.max_iters;
      budget.grad_tol = cfg.grad_tol;
      const MinimizeResult r =
          minimize(sub, sub.restrict(start), OptimizerMethod::newton_tr(), budget);
      if (r.report.status != ConvergenceStatus::probably_converged) res.converged = false;
      const Vector found = sub.embed(r.theta);
      const Matrix w_n = found.head(nw).reshaped<Eigen::RowMajor>(
          static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(d));
      const Vector a_n = found.tail(static_cast<Eigen::Index>(k));
      const bool sign_sym = odd && cfg.trainable_output;
      res.distances.push_back(aligned_sq_distance(w_n, a_n, inf.spec.student_w, inf.spec.student_a,
                                                  cfg.trainable_output, sign_sym));
      sizes.push_back(static_cast<double>(n));
    }
    res.slope = loglog_slope(sizes, res.distances);
    out.seeds.push_back(std::move(res));
  }
  std::vector<double> slopes;
  for (const auto& s : out.seeds) slopes.push_back(s.slope);
  std::sort(slopes.begin(), slopes.end());
  const std::size_t n = slopes.size();
  out.median_slope = n % 2 ? slopes[n / 2] : 0.5 * (slopes[n / 2 - 1] + slopes[n / 2]);
  return out;
}

}  // namespace gradflow
