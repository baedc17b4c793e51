// Acceptance suite. Prints one PASS/FAIL line per criterion and exits
// non-zero if any criterion fails. Optional arguments select criteria by
// number, e.g. `acceptance 3 9`.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "cli.hpp"
#include "gradflow/derivatives.hpp"
#include "gradflow/io.hpp"
#include "gradflow/neti.hpp"
#include "gradflow/ode.hpp"
#include "gradflow/optimize.hpp"
#include "gradflow/trajectory.hpp"
#include "test_util.hpp"

namespace gradflow {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

const Net kStudent33{2, {{8, ActivationKind::erf_scaled, true}, {1, ActivationKind::identity, true}}};
const Net kTeacher4{2, {{4, ActivationKind::erf_scaled, true}, {1, ActivationKind::identity, true}}};

// Same seed derivation as the command-line tool.
Dataset teacher_data(const Net& teacher, std::uint64_t seed, std::size_t n) {
  return teacher_student_dataset(teacher, init_params(teacher, seed + 2000), n, seed + 1000);
}

// ---------------------------------------------------------------------------

Outcome derivative_exactness() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(606);
  double worst_g = 0.0, worst_h = 0.0;
  std::set<ActivationKind> seen;
  for (int trial = 0; trial < 50; ++trial) {
    const Net net = testing::random_net(rng, 50, testing::all_activations());
    for (std::size_t l = 0; l < net.num_layers(); ++l) seen.insert(net.layer(l).activation);
    const ParamVector theta = init_params(net, 700 + trial, 0.8);
    const Dataset data = testing::random_dataset(net, 20, 800 + trial);
    const MlpObjective obj(net, data, {});
    worst_g = std::max(worst_g, relative_linf_error(obj.gradient(theta), fd_gradient(obj, theta, 1e-6)));
    worst_h = std::max(worst_h, relative_linf_error(obj.hessian(theta), fd_hessian(obj, theta, 1e-5)));
  }
  const double secs = seconds_since(t0);
  const bool all_kinds = seen.size() == testing::all_activations().size();
  return {worst_g <= 1e-6 && worst_h <= 1e-5 && secs < 60.0 && all_kinds,
          fmt("grad err %.2e (<=1e-6), hess err %.2e (<=1e-5), %zu/6 activations, %.1fs (<60s)",
              worst_g, worst_h, seen.size(), secs)};
}

Outcome roundoff_floor() {
  const auto t0 = Clock::now();
  const Net net{2, {{2, ActivationKind::erf_scaled, true}, {1, ActivationKind::identity, true}}};
  int hits = 0;
  double best = INFINITY;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const Dataset data = teacher_data(net, seed, 1000);
    const MlpObjective obj(net, data, {});
    IntegratorConfig ic;
    ic.method = IntegratorMethod::rosenbrock();
    ic.t_end = 1e6;
    ic.max_steps = 1000;
    ic.save_times = {0.0};
    const Trajectory flow = integrate(obj, init_params(net, seed), 1.0, ic);
    OptimizerBudget budget;
    budget.max_iters = 500;
    budget.grad_tol = 0.0;
    const MinimizeResult r = minimize(obj, flow.final_state(), OptimizerMethod::newton_tr(), budget);
    best = std::min(best, r.report.final_loss);
    if (r.report.final_loss <= 1e-28) ++hits;
  }
  const double secs = seconds_since(t0);
  return {hits >= 1 && secs < 600.0,
          fmt("%d/10 seeds with MSE <= 1e-28 (need >=1), best %.2e, %.1fs (<600s)", hits, best, secs)};
}

Outcome ode_correctness() {
  const auto t0 = Clock::now();
  const Matrix a = testing::random_spd(5, 0.1, 2.0, 31);
  const QuadraticObjective q(a);
  Vector theta0(5);
  theta0 << 1.0, -0.5, 0.25, 2.0, -1.5;
  const double t_end = 5.0;
  const Vector exact = testing::exact_flow(a, theta0, 1.0, t_end);

  auto final_error = [&](IntegratorMethod m) {
    IntegratorConfig ic;
    ic.method = m;
    ic.abstol = ic.reltol = 1e-8;
    ic.t_end = t_end;
    ic.save_times = {0.0, t_end};
    return (integrate(q, theta0, 1.0, ic).final_state() - exact).norm();
  };
  const double e45 = final_error(IntegratorMethod::adaptive_rk45());
  const double eros = final_error(IntegratorMethod::rosenbrock());
  const double coarse = final_error(IntegratorMethod::rk4(0.1));
  const double fine = final_error(IntegratorMethod::rk4(0.05));
  const double ratio = coarse / fine;
  const double secs = seconds_since(t0);
  return {e45 <= 1e-6 && eros <= 1e-6 && std::abs(ratio - 16.0) <= 0.2 * 16.0,
          fmt("rk45 %.2e, rosenbrock %.2e (<=1e-6), rk4 halving ratio %.2f (16 +-20%%), %.2fs", e45,
              eros, ratio, secs)};
}

Outcome integrator_ordering() {
  const auto t0 = Clock::now();
  constexpr double kT = 1e4;
  constexpr double kBudget = 2.0;
  std::vector<BenchMethod> methods(3);
  methods[0].name = "euler";
  methods[0].config.method = IntegratorMethod::euler(0.01);
  methods[1].name = "adaptive_rk45";
  methods[1].config.method = IntegratorMethod::adaptive_rk45();
  methods[2].name = "rosenbrock";
  methods[2].config.method = IntegratorMethod::rosenbrock();
  for (auto& m : methods) m.config.abstol = m.config.reltol = 1e-6;

  std::vector<std::vector<double>> d(3), t(3);
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const Dataset data = teacher_data(kTeacher4, seed, 1000);
    const MlpObjective obj(kStudent33, data, {});
    const ParamVector theta0 = init_params(kStudent33, seed);
    const Trajectory ref = reference_trajectory(obj, theta0, 1.0, kT, 1e-8, 1000);
    for (std::size_t i = 0; i < methods.size(); ++i) {
      const ComparisonRecord r = compare_run(obj, theta0, 1.0, methods[i], kBudget, ref, seed, 1000);
      d[i].push_back(r.d_m);
      t[i].push_back(r.t_m);
    }
  }
  const double de = median(d[0]), dr = median(d[1]), dro = median(d[2]);
  const double te = median(t[0]), tr = median(t[1]), tro = median(t[2]);
  const double secs = seconds_since(t0);
  return {dro <= dr && dr <= de && te <= tr && tr <= tro && secs < 1800.0,
          fmt("median d_m ros %.2e <= rk45 %.2e <= euler %.2e; median t_m euler %.4g <= rk45 %.4g "
              "<= ros %.4g; %.0fs (<1800s)",
              dro, dr, de, te, tr, tro, secs)};
}

Outcome optimizer_ordering() {
  const auto t0 = Clock::now();
  std::vector<double> newton, bfgs, adam;
  OptimizerBudget budget;
  budget.max_iters = 200;
  budget.grad_tol = 0.0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const Dataset data = teacher_data(kTeacher4, seed, 1000);
    const MlpObjective obj(kStudent33, data, {});
    const ParamVector theta0 = init_params(kStudent33, seed);
    newton.push_back(minimize(obj, theta0, OptimizerMethod::newton_tr(), budget).report.final_loss);
    bfgs.push_back(minimize(obj, theta0, OptimizerMethod::bfgs(), budget).report.final_loss);
    adam.push_back(minimize(obj, theta0, OptimizerMethod::adam(1e-2), budget).report.final_loss);
  }
  const double mn = median(newton), mb = median(bfgs), ma = median(adam);
  const double secs = seconds_since(t0);
  return {mn <= mb && mb <= ma && secs < 900.0,
          fmt("median MSE after 200 iterations newton_tr %.2e <= bfgs %.2e <= adam %.2e; %.1fs (<900s)",
              mn, mb, ma, secs)};
}

Outcome protocol_branches() {
  std::mt19937_64 rng(41);
  std::normal_distribution<double> normal;
  Vector center(6);
  for (auto& v : center) v = normal(rng);

  const QuadraticObjective convex(testing::random_spd(6, 1.0, 100.0, 42), center);
  ProtocolConfig quick;
  quick.epochs = 30;
  quick.steps_per_epoch = 50;
  const ProtocolResult a = probably_converged_protocol(convex, Vector::Zero(6), quick);
  const bool a_ok = a.report.status == ConvergenceStatus::probably_converged &&
                    a.epoch_losses.size() <= 2 && a.report.min_eigenvalue.value_or(-1.0) > 0.0;

  const QuadraticObjective valley(testing::random_spd(6, 1.0, 1e10, 43), 1e3 * center);
  ProtocolConfig tiny;
  tiny.epochs = 5;
  tiny.steps_per_epoch = 2;
  tiny.delta0 = 1e-3;
  tiny.delta_max = 1e-2;
  const ProtocolResult b = probably_converged_protocol(valley, Vector::Zero(6), tiny);
  const bool b_ok = b.report.status == ConvergenceStatus::not_converged;

  return {a_ok && b_ok,
          fmt("convex: %s after %zu epochs, min eig %.3g; valley (cond 1e10): %s after %zu epochs",
              std::string(to_string(a.report.status)).c_str(), a.epoch_losses.size(),
              a.report.min_eigenvalue.value_or(NAN), std::string(to_string(b.report.status)).c_str(),
              b.epoch_losses.size())};
}

Outcome neti_kernels() {
  const auto t0 = Clock::now();
  double worst_z = 0.0, worst_g = 0.0;
  for (ActivationKind kind :
       {ActivationKind::identity, ActivationKind::erf_scaled, ActivationKind::relu}) {
    for (std::uint64_t i = 0; i < 20; ++i) {
      const NetISpec s = random_neti_spec(3, 2, 2, kind, 900 + i, i % 2 == 0);
      const McEstimate mc = mc_oracle(s, 1'000'000, 950 + i);
      worst_z = std::max(worst_z, std::abs(neti_loss(s) - mc.mean) / mc.standard_error);
      const NetIObjective obj(s);
      worst_g = std::max(worst_g,
                         relative_linf_error(neti_gradient(s), fd_gradient(obj, s.params(), 1e-6)));
    }
  }
  const double secs = seconds_since(t0);
  return {worst_z <= 4.0 && worst_g <= 1e-6 && secs < 300.0,
          fmt("max |analytic - MC| %.2f SE (<=4), grad err %.2e (<=1e-6), %.1fs (<300s)", worst_z,
              worst_g, secs)};
}

Outcome inverse_n_rate() {
  const auto t0 = Clock::now();
  const RateExperimentResult r = run_rate_experiment(RateExperimentConfig{});
  const double secs = seconds_since(t0);
  return {r.median_slope >= -1.3 && r.median_slope <= -0.7 && secs < 3600.0,
          fmt("median slope %.3f (in [-1.3, -0.7]) over %zu seeds, %.0fs (<3600s)", r.median_slope,
              r.seeds.size(), secs)};
}

Outcome hessian_cost() {
  const std::vector<std::size_t> widths = {10, 50, 100};
  std::vector<double> params, times;
  for (std::size_t w : widths) {
    const Net net{2, {{w, ActivationKind::erf_scaled, true}, {1, ActivationKind::identity, true}}};
    const ParamVector theta = init_params(net, 5);
    const Dataset data = teacher_data(kTeacher4, 5, 10000);
    double best = INFINITY;
    for (int rep = 0; rep < 3; ++rep) {
      const auto t0 = Clock::now();
      const Matrix h = hessian(net, theta, data, {});
      best = std::min(best, seconds_since(t0));
      if (!h.allFinite()) best = INFINITY;
    }
    params.push_back(static_cast<double>(net.param_count()));
    times.push_back(best);
  }
  const double slope = loglog_slope(params, times);
  return {params[0] == 41 && times[0] < 5.0 && slope <= 2.3,
          fmt("P=41: %.3fs (<5s); P=201: %.3fs; P=401: %.3fs; slope %.2f (<=2.3)", times[0],
              times[1], times[2], slope)};
}

// ---------------------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

int run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "gradflow");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return cli::cli_run(static_cast<int>(argv.size()), argv.data());
}

// Every file except timing.json must match; run.json is compared without "out".
std::string compare_dirs(const fs::path& a, const fs::path& b) {
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(a)) names.push_back(e.path().filename().string());
  std::size_t count_b = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(b)) ++count_b;
  if (count_b != names.size()) return "file sets differ";
  for (const auto& n : names) {
    if (n == "timing.json") continue;
    if (!fs::exists(b / n)) return n + " missing";
    if (n == "run.json") {
      json ja = json::parse(slurp(a / n)), jb = json::parse(slurp(b / n));
      ja["config"].erase("out");
      jb["config"].erase("out");
      if (ja != jb) return n + " differs";
    } else if (slurp(a / n) != slurp(b / n)) {
      return n + " differs";
    }
  }
  return {};
}

Outcome reproducibility() {
  const fs::path root = fs::temp_directory_path() / "gradflow_acceptance_repro";
  fs::remove_all(root);
  fs::create_directories(root);
  const std::vector<std::string> small = {"--set", "data.n=200", "--set",
                                          "net.layers=4:erf_scaled:bias,1:identity:bias"};
  struct Experiment {
    std::string name;
    std::vector<std::string> args;
  };
  const std::string min_params = (root / "minimize" / "final.bin").string();
  const std::vector<Experiment> experiments = {
      {"integrate", {"--set", "integrator.method=adaptive_rk45", "--set", "integrator.t_end=1e5",
                     "--set", "integrator.wall_seconds=0.2"}},
      {"minimize", {"--set", "optimizer.method=bfgs", "--set", "optimizer.max_iters=100000",
                    "--set", "optimizer.grad_tol=0", "--set", "optimizer.wall_seconds=0.2"}},
      {"protocol", {"--set", "protocol.epochs=5", "--set", "protocol.steps_per_epoch=20"}},
      {"bench", {"--set", "integrator.t_end=100", "--set", "bench.budgets=[0.05,0.1]", "--set",
                 "bench.methods=euler:0.01,adaptive_rk45,rosenbrock"}},
      {"spectrum", {"--set", "init.params=" + min_params}},
      {"gradcheck", {}},
      {"neti", {"--set", "neti.mc_samples=20000"}},
  };

  std::string failures;
  std::size_t compared = 0;
  std::FILE* saved = stdout;
  for (const auto& e : experiments) {
    std::vector<std::string> first = {e.name, "--out", (root / e.name).string()};
    first.insert(first.end(), small.begin(), small.end());
    first.insert(first.end(), e.args.begin(), e.args.end());
    const int c1 = run_cli(first);
    const int c2 = run_cli({e.name, "--config", (root / e.name / "run.json").string(), "--out",
                            (root / (e.name + "_rerun")).string()});
    std::fflush(saved);
    if (c1 != cli::kExitOk || c2 != cli::kExitOk) {
      failures += fmt(" %s: exit %d/%d;", e.name.c_str(), c1, c2);
      continue;
    }
    const std::string diff = compare_dirs(root / e.name, root / (e.name + "_rerun"));
    if (!diff.empty()) failures += " " + e.name + ": " + diff + ";";
    ++compared;
  }
  fs::remove_all(root);
  return {failures.empty(),
          failures.empty() ? fmt("%zu experiments rerun from run.json, outputs identical", compared)
                           : "mismatch:" + failures};
}

}  // namespace
}  // namespace gradflow

int main(int argc, char** argv) {
  using namespace gradflow;
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"derivative exactness", derivative_exactness},
      {"round-off floor", roundoff_floor},
      {"ODE correctness", ode_correctness},
      {"integrator ordering at equal budget", integrator_ordering},
      {"optimizer ordering at equal iterations", optimizer_ordering},
      {"probably-converged protocol", protocol_branches},
      {"infinite-data kernels", neti_kernels},
      {"1/N rate", inverse_n_rate},
      {"Hessian cost", hessian_cost},
      {"reproducibility", reproducibility},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int number = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(number)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failed;
    std::printf("%s %2d %s: %s\n", o.pass ? "PASS" : "FAIL", number, criteria[i].first,
                o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
