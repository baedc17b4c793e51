#include "gradflow/trajectory.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "gradflow/derivatives.hpp"

namespace gradflow {

namespace {

constexpr const char* kCsvHeader =
    "method,seed,budget_s,d_m,t_m,final_loss,final_time,cutoff_steps,terminated_by,"
    "grid_points,reference_grid_points,error";

void check_same_dim(const Trajectory& ref, const Vector& x, const char* who) {
  if (ref.states.empty()) throw std::invalid_argument(std::string(who) + ": empty reference");
  if (ref.states.front().size() != x.size()) {
    throw DimensionError(std::string(who) + ": parameter dimension mismatch");
  }
}

double nearest_sq(const Trajectory& ref, const Vector& x) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& s : ref.states) best = std::min(best, (s - x).squaredNorm());
  return best;
}

std::string fmt(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::string csv_safe(std::string s) {
  std::replace_if(s.begin(), s.end(), [](char c) { return c == ',' || c == '\n' || c == '\r'; },
                  ';');
  return s;
}

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_double(const std::string& s) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || *end != '\0') throw std::invalid_argument("csv: bad number '" + s + "'");
  return v;
}

std::uint64_t parse_u64(const std::string& s) {
  std::size_t pos = 0;
  const auto v = std::stoull(s, &pos);
  if (pos != s.size()) throw std::invalid_argument("csv: bad integer '" + s + "'");
  return v;
}

}  // namespace

Trajectory reference_trajectory(const Objective& objective, const Vector& theta0, double eta,
                                double t_end, double tol, std::size_t grid_points) {
  if (!(tol > 0.0)) throw std::invalid_argument("reference_trajectory: tol must be > 0");
  IntegratorConfig cfg;
  cfg.method = IntegratorMethod::rosenbrock();
  cfg.abstol = tol;
  cfg.reltol = tol;
  cfg.t_end = t_end;
  cfg.grid_points = grid_points;
  Trajectory ref = integrate(objective, theta0, eta, cfg);
  char tag[48];
  std::snprintf(tag, sizeof tag, "rosenbrock tol=%g", tol);
  ref.method = tag;
  return ref;
}

Trajectory reference_trajectory(const Net& net, const ParamVector& theta0, const Dataset& data,
                                const LossConfig& loss_cfg, double t_end, double tol,
                                std::size_t grid_points) {
  check_compatible(net, theta0, data);
  loss_cfg.validate();
  const MlpObjective obj(net, data, loss_cfg);
  return reference_trajectory(obj, theta0, loss_cfg.eta, t_end, tol, grid_points);
}

double traj_distance(const Trajectory& ref, const Trajectory& m) {
  if (m.states.empty()) throw std::invalid_argument("traj_distance: empty trajectory");
  check_same_dim(ref, m.states.front(), "traj_distance");
  double sum = 0.0;
  for (const auto& x : m.states) {
    if (x.size() != ref.states.front().size()) {
      throw DimensionError("traj_distance: parameter dimension mismatch");
    }
    sum += nearest_sq(ref, x);
  }
  return sum / static_cast<double>(m.states.size());
}

double traj_progress(const Trajectory& ref, const Vector& theta_final) {
  check_same_dim(ref, theta_final, "traj_progress");
  double best = std::numeric_limits<double>::infinity();
  double t_best = ref.times.front();
  for (std::size_t j = 0; j < ref.states.size(); ++j) {
    const double d = (ref.states[j] - theta_final).squaredNorm();
    if (d <= best) {
      best = d;
      t_best = ref.times[j];
    }
  }
  return t_best;
}

void BenchmarkConfig::validate() const {
  if (methods.empty()) throw std::invalid_argument("benchmark: no methods");
  if (budgets.empty()) throw std::invalid_argument("benchmark: no budgets");
  for (double b : budgets) {
    if (!(b > 0.0)) throw std::invalid_argument("benchmark: budgets must be > 0");
  }
  if (grid_points < 2) throw std::invalid_argument("benchmark: grid_points must be >= 2");
}

ComparisonRecord compare_run(const Objective& objective, const Vector& theta0, double eta,
                             const BenchMethod& method, double budget_seconds,
                             const Trajectory& ref, std::uint64_t seed, std::size_t grid_points,
                             std::optional<std::uint64_t> replay_steps) {
  ComparisonRecord rec;
  rec.method = method.name;
  rec.seed = seed;
  rec.cpu_budget_seconds = budget_seconds;
  rec.reference_grid_points = ref.size();
  const double nan = std::numeric_limits<double>::quiet_NaN();

  const auto start = std::chrono::steady_clock::now();
  try {
    IntegratorConfig cfg = method.config;
    cfg.t_end = ref.times.back();
    cfg.save_times = {0.0};
    double t_last = 0.0;
    const StepObserver last_time = [&t_last](double t, const Vector&) { t_last = t; };
    if (replay_steps) {
      rec.cutoff_steps = *replay_steps;
      cfg.max_steps = rec.cutoff_steps;
      rec.terminated_by = Termination::budget;
      if (rec.cutoff_steps > 0) {
        rec.terminated_by = integrate(objective, theta0, eta, cfg, last_time).terminated_by;
      }
    } else {
      cfg.wall_budget_seconds = budget_seconds;
      const Trajectory timed = integrate(objective, theta0, eta, cfg, last_time);
      rec.cutoff_steps = timed.accepted_steps;
      rec.terminated_by = timed.terminated_by;
    }
    rec.elapsed_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    rec.final_time = t_last;

    // Replay the same steps on a grid over [0, T^m]; the grid does not
    // influence step selection.
    cfg.wall_budget_seconds.reset();
    cfg.max_steps = rec.cutoff_steps;
    Trajectory m;
    if (rec.cutoff_steps > 0) {
      if (t_last > 0.0) cfg.save_times = log_grid(t_last, grid_points);
      m = integrate(objective, theta0, eta, cfg);
    } else {
      // max_steps = 0 would mean unlimited; the run never left theta0.
      m.times = {0.0};
      m.states = {theta0};
      m.losses = {objective.loss(theta0)};
    }
    rec.grid_points = m.size();
    rec.d_m = traj_distance(ref, m);
    rec.t_m = traj_progress(ref, m.final_state());
    rec.final_loss = m.losses.back();
  } catch (const std::exception& e) {
    rec.error = e.what();
    rec.d_m = rec.t_m = rec.final_loss = nan;
  }
  return rec;
}

std::vector<ComparisonRecord> benchmark(const Objective& objective, const Vector& theta0,
                                        double eta, const BenchmarkConfig& cfg,
                                        const Trajectory& ref) {
  cfg.validate();
  check_same_dim(ref, theta0, "benchmark");
  std::vector<ComparisonRecord> out;
  for (const auto& method : cfg.methods) {
    for (double budget : cfg.budgets) {
      out.push_back(compare_run(objective, theta0, eta, method, budget, ref, cfg.seed,
                                cfg.grid_points));
    }
  }
  return out;
}

std::vector<ComparisonRecord> benchmark(const Net& net, const ParamVector& theta0,
                                        const Dataset& data, const LossConfig& loss_cfg,
                                        const BenchmarkConfig& cfg, const Trajectory& ref) {
  check_compatible(net, theta0, data);
  loss_cfg.validate();
  const MlpObjective obj(net, data, loss_cfg);
  return benchmark(obj, theta0, loss_cfg.eta, cfg, ref);
}

std::vector<ComparisonRecord> benchmark_replay(const Objective& objective, const Vector& theta0,
                                               double eta, const BenchmarkConfig& cfg,
                                               const Trajectory& ref,
                                               const std::vector<ComparisonRecord>& records) {
  check_same_dim(ref, theta0, "benchmark_replay");
  std::vector<ComparisonRecord> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    const auto it = std::find_if(cfg.methods.begin(), cfg.methods.end(),
                                 [&](const BenchMethod& m) { return m.name == r.method; });
    if (it == cfg.methods.end()) {
      throw std::invalid_argument("benchmark_replay: unknown method '" + r.method + "'");
    }
    if (!r.error.empty()) {
      out.push_back(r);
      out.back().elapsed_seconds = 0.0;
      continue;
    }
    ComparisonRecord rec = compare_run(objective, theta0, eta, *it, r.cpu_budget_seconds, ref,
                                       r.seed, cfg.grid_points, r.cutoff_steps);
    rec.terminated_by = r.terminated_by;
    out.push_back(std::move(rec));
  }
  return out;
}

void write_comparison_csv(std::ostream& os, const std::vector<ComparisonRecord>& records) {
  os << kCsvHeader << '\n';
  for (const auto& r : records) {
    os << csv_safe(r.method) << ',' << r.seed << ',' << fmt(r.cpu_budget_seconds) << ','
       << fmt(r.d_m) << ',' << fmt(r.t_m) << ',' << fmt(r.final_loss) << ','
       << fmt(r.final_time) << ',' << r.cutoff_steps << ',' << to_string(r.terminated_by) << ','
       << r.grid_points << ',' << r.reference_grid_points << ',' << csv_safe(r.error) << '\n';
  }
}

std::vector<ComparisonRecord> read_comparison_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != kCsvHeader) {
    throw std::invalid_argument("csv: unexpected header");
  }
  std::vector<ComparisonRecord> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto f = split(line);
    if (f.size() != 12) throw std::invalid_argument("csv: expected 12 fields: " + line);
    ComparisonRecord r;
    r.method = f[0];
    r.seed = parse_u64(f[1]);
    r.cpu_budget_seconds = parse_double(f[2]);
    r.d_m = parse_double(f[3]);
    r.t_m = parse_double(f[4]);
    r.final_loss = parse_double(f[5]);
    r.final_time = parse_double(f[6]);
    r.cutoff_steps = parse_u64(f[7]);
    r.terminated_by = termination_from_string(f[8]);
    r.grid_points = parse_u64(f[9]);
    r.reference_grid_points = parse_u64(f[10]);
    r.error = f[11];
    out.push_back(std::move(r));
  }
  return out;
}

double median(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("median: empty sample");
  std::sort(values.begin(), values.end(), [](double a, double b) {
    if (std::isnan(a)) return false;
    if (std::isnan(b)) return true;
    return a < b;
  });
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

}  // namespace gradflow
