// Reference trajectories and the comparison metrics used to rank flow
// integrators at a fixed wall-clock budget.

#ifndef GRADFLOW_TRAJECTORY_HPP_
#define GRADFLOW_TRAJECTORY_HPP_

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "gradflow/network.hpp"
#include "gradflow/objective.hpp"
#include "gradflow/ode.hpp"

namespace gradflow {

/// Rosenbrock run at abstol = reltol = tol, recorded on log_grid(t_end, grid_points).
/// The method string reads "rosenbrock tol=<tol>".
Trajectory reference_trajectory(const Objective& objective, const Vector& theta0, double eta,
                                double t_end, double tol, std::size_t grid_points = 1000);
Trajectory reference_trajectory(const Net& net, const ParamVector& theta0, const Dataset& data,
                                const LossConfig& loss_cfg, double t_end, double tol,
                                std::size_t grid_points = 1000);

/// d_m: mean over the snapshots of m of the squared distance to the nearest
/// reference snapshot.
double traj_distance(const Trajectory& ref, const Trajectory& m);

/// t_m: time of the reference snapshot nearest to theta_final. Ties go to the
/// later time.
double traj_progress(const Trajectory& ref, const Vector& theta_final);

struct BenchMethod {
  std::string name;
  /// t_end, save_times and wall_budget_seconds are overwritten per run.
  IntegratorConfig config;
};

struct ComparisonRecord {
  std::string method;
  std::uint64_t seed = 0;
  double cpu_budget_seconds = 0.0;
  double d_m = 0.0;
  double t_m = 0.0;
  double final_loss = 0.0;
  double final_time = 0.0;          // T^m
  std::uint64_t cutoff_steps = 0;   // accepted steps when the run stopped
  Termination terminated_by = Termination::reached_T;
  std::size_t grid_points = 0;            // snapshots of the compared run
  std::size_t reference_grid_points = 0;  // snapshots of the reference
  double elapsed_seconds = 0.0;           // timing only
  std::string error;                      // set when the run threw
};

struct BenchmarkConfig {
  std::vector<BenchMethod> methods;
  std::vector<double> budgets;  // seconds
  std::uint64_t seed = 0;
  std::size_t grid_points = 1000;

  void validate() const;
};

/// One run of `method` under a wall-clock budget. The run is then replayed
/// for exactly the accepted steps it managed, with snapshots on
/// log_grid(T^m, grid_points). With `replay_steps` the budgeted run is
/// skipped, which makes the record independent of machine speed.
ComparisonRecord compare_run(const Objective& objective, const Vector& theta0, double eta,
                             const BenchMethod& method, double budget_seconds,
                             const Trajectory& ref, std::uint64_t seed,
                             std::size_t grid_points = 1000,
                             std::optional<std::uint64_t> replay_steps = std::nullopt);

/// One record per (method, budget), methods outermost.
std::vector<ComparisonRecord> benchmark(const Objective& objective, const Vector& theta0,
                                        double eta, const BenchmarkConfig& cfg,
                                        const Trajectory& ref);
std::vector<ComparisonRecord> benchmark(const Net& net, const ParamVector& theta0,
                                        const Dataset& data, const LossConfig& loss_cfg,
                                        const BenchmarkConfig& cfg, const Trajectory& ref);

/// Reruns each record from its cutoff_steps. Non-timing fields match the
/// input bit for bit.
std::vector<ComparisonRecord> benchmark_replay(const Objective& objective, const Vector& theta0,
                                               double eta, const BenchmarkConfig& cfg,
                                               const Trajectory& ref,
                                               const std::vector<ComparisonRecord>& records);

/// Header: method,seed,budget_s,d_m,t_m,final_loss, then final_time,
/// cutoff_steps, terminated_by, grid_points, reference_grid_points, error.
/// Floats use %.17g. elapsed_seconds is not written.
void write_comparison_csv(std::ostream& os, const std::vector<ComparisonRecord>& records);
std::vector<ComparisonRecord> read_comparison_csv(std::istream& is);

/// Median of a non-empty sample; NaN entries are ordered last.
double median(std::vector<double> values);

}  // namespace gradflow

#endif  // GRADFLOW_TRAJECTORY_HPP_
