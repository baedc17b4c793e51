#include "cli.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "gradflow/derivatives.hpp"
#include "gradflow/io.hpp"
#include "gradflow/neti.hpp"
#include "gradflow/ode.hpp"
#include "gradflow/optimize.hpp"
#include "gradflow/trajectory.hpp"

namespace gradflow::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::vector<std::string> kModes = {"integrate", "minimize", "protocol", "bench",
                                         "neti",      "spectrum", "gradcheck"};

// Every accepted key with its default. null means "unset" (derived or absent).
const json& defaults() {
  static const json d = {
      {"mode", nullptr},
      {"seed", 1},
      {"out", ""},

      {"net.input_dim", 2},
      {"net.layers", "8:erf_scaled:bias,1:identity:bias"},
      {"init.seed", nullptr},
      {"init.scale", 1.0},
      {"init.params", ""},

      {"data.source", "teacher"},
      {"data.path", ""},
      {"data.n", 1000},
      {"data.seed", nullptr},
      {"teacher.layers", "4:erf_scaled:bias,1:identity:bias"},
      {"teacher.seed", nullptr},
      {"teacher.scale", 1.0},

      {"loss.eta", 1.0},
      {"loss.barrier_c", nullptr},
      {"loss.reduction", "mean"},

      {"integrator.method", "rosenbrock"},
      {"integrator.dt", 0.01},
      {"integrator.abstol", 1e-6},
      {"integrator.reltol", 1e-6},
      {"integrator.t_end", 1000.0},
      {"integrator.max_steps", 0},
      {"integrator.wall_seconds", nullptr},
      {"integrator.grid_points", 1000},
      {"integrator.jacobian_lag", 1},
      {"integrator.replay_steps", nullptr},

      {"optimizer.method", "newton_tr"},
      {"optimizer.lr", 1e-3},
      {"optimizer.memory", 10},
      {"optimizer.delta0", 1.0},
      {"optimizer.delta_max", 1e3},
      {"optimizer.max_iters", 1000},
      {"optimizer.grad_tol", 1e-8},
      {"optimizer.wall_seconds", nullptr},
      {"optimizer.replay_iters", nullptr},

      {"protocol.epochs", 30},
      {"protocol.steps_per_epoch", 10000},

      {"bench.methods", "euler:0.01,adaptive_rk45,rosenbrock"},
      {"bench.budgets", json::array({1.0})},
      {"bench.reference_tol", 1e-8},
      {"bench.replay", nullptr},

      {"neti.input_dim", 4},
      {"neti.student_width", 2},
      {"neti.teacher_width", 2},
      {"neti.activation", "erf_scaled"},
      {"neti.trainable_output", true},
      {"neti.warm_t_end", 1e3},
      {"neti.warm_steps", 1000},
      {"neti.mc_samples", 100000},
      {"neti.rate", false},
      {"neti.sizes", json::array({1000, 10000, 100000})},
      {"neti.seeds", json::array({1, 2, 3, 4, 5, 6, 7, 8, 9, 10})},

      {"gradcheck.tol", 1e-6},
      {"gradcheck.step", 1e-6},
  };
  return d;
}

class Config {
 public:
  json values = defaults();

  void merge(const json& j, const std::string& origin) {
    if (!j.is_object()) throw ConfigError(origin + ": expected a JSON object");
    for (const auto& [k, v] : j.items()) set(k, v, origin);
  }

  void set(const std::string& key, const json& v, const std::string& origin) {
    if (!defaults().contains(key)) throw ConfigError(origin + ": unknown key '" + key + "'");
    values[key] = v;
  }

  const json& raw(const std::string& key) const { return values.at(key); }
  bool is_null(const std::string& key) const { return raw(key).is_null(); }

  double num(const std::string& key) const {
    const json& v = raw(key);
    if (!v.is_number()) throw ConfigError("key '" + key + "': expected a number");
    return v.get<double>();
  }
  std::optional<double> opt_num(const std::string& key) const {
    if (is_null(key)) return std::nullopt;
    return num(key);
  }
  std::uint64_t uint(const std::string& key) const {
    const json& v = raw(key);
    if (!v.is_number_integer() || v.get<std::int64_t>() < 0) {
      throw ConfigError("key '" + key + "': expected a non-negative integer");
    }
    return v.get<std::uint64_t>();
  }
  std::optional<std::uint64_t> opt_uint(const std::string& key) const {
    if (is_null(key)) return std::nullopt;
    return uint(key);
  }
  std::string str(const std::string& key) const {
    const json& v = raw(key);
    if (!v.is_string()) throw ConfigError("key '" + key + "': expected a string");
    return v.get<std::string>();
  }
  bool flag(const std::string& key) const {
    const json& v = raw(key);
    if (!v.is_boolean()) throw ConfigError("key '" + key + "': expected true or false");
    return v.get<bool>();
  }
  std::vector<double> nums(const std::string& key) const {
    const json& v = raw(key);
    if (!v.is_array()) throw ConfigError("key '" + key + "': expected an array of numbers");
    std::vector<double> out;
    for (const auto& x : v) {
      if (!x.is_number()) throw ConfigError("key '" + key + "': expected an array of numbers");
      out.push_back(x.get<double>());
    }
    return out;
  }
  std::vector<std::uint64_t> uints(const std::string& key) const {
    const json& v = raw(key);
    std::vector<std::uint64_t> out;
    if (!v.is_array()) throw ConfigError("key '" + key + "': expected an array of integers");
    for (const auto& x : v) {
      if (!x.is_number_integer() || x.get<std::int64_t>() < 0) {
        throw ConfigError("key '" + key + "': expected an array of non-negative integers");
      }
      out.push_back(x.get<std::uint64_t>());
    }
    return out;
  }
};

// Wraps library argument errors so the message names the key.
template <class F>
auto keyed(const std::string& key, F&& f) {
  try {
    return f();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("key '" + key + "': " + e.what());
  }
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw PersistenceError("cannot write " + path.string());
  out << text;
}

void write_json(const fs::path& path, const json& j) { write_file(path, j.dump(2) + "\n"); }

json to_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

json to_json(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) rows.push_back(to_json(Vector(m.row(i))));
  return rows;
}

json report_json(const ConvergenceReport& r) {
  json j = {{"final_loss", r.final_loss},
            {"grad_norm", r.grad_norm},
            {"iterations", r.iterations},
            {"status", std::string(to_string(r.status))},
            {"line_search_failures", r.line_search_failures},
            {"skipped_updates", r.skipped_updates},
            {"rejected_steps", r.rejected_steps},
            {"final_trust_radius", r.final_trust_radius},
            {"work", {{"n_loss", r.work.n_loss}, {"n_grad", r.work.n_grad},
                      {"n_hess", r.work.n_hess}}}};
  j["min_eigenvalue"] = r.min_eigenvalue ? json(*r.min_eigenvalue) : json(nullptr);
  return j;
}

struct Problem {
  Net net;
  Dataset data;
  ParamVector theta0;
  LossConfig loss;
};

struct Run {
  Config cfg;
  fs::path out;
  std::vector<fs::path> inputs;
  json timing = json::object();
  json grid_points = json::object();
};

void resolve(Run& run) {
  Config& c = run.cfg;
  const std::uint64_t seed = c.uint("seed");
  if (c.is_null("init.seed")) c.values["init.seed"] = seed;
  if (c.is_null("data.seed")) c.values["data.seed"] = seed + 1000;
  if (c.is_null("teacher.seed")) c.values["teacher.seed"] = seed + 2000;

  std::string out = c.str("out");
  if (out.empty()) {
    const char* root = std::getenv("GRADFLOW_OUT");
    out = (fs::path(root && *root ? root : "runs") /
           (c.str("mode") + "-" + std::to_string(seed)))
              .string();
    c.values["out"] = out;
  }
  run.out = out;

  const std::string source = c.str("data.source");
  if (source != "teacher" && source != "file") {
    throw ConfigError("key 'data.source': expected 'teacher' or 'file'");
  }
  if (source == "teacher" && !c.str("data.path").empty()) {
    throw ConfigError("key 'data.path': set while data.source is 'teacher'");
  }
  if (source == "file" && c.str("data.path").empty()) {
    throw ConfigError("key 'data.path': required when data.source is 'file'");
  }
  for (const char* key : {"data.path", "init.params"}) {
    const std::string p = c.str(key);
    if (p.empty()) continue;
    if (!fs::exists(p)) throw ConfigError(std::string("key '") + key + "': no such file " + p);
    run.inputs.emplace_back(p);
  }
}

// Refuses output directories that already hold one of the inputs.
void check_inputs_untouched(const Run& run) {
  if (!fs::exists(run.out)) return;
  for (const auto& in : run.inputs) {
    const fs::path dir = fs::absolute(in).parent_path();
    if (fs::exists(dir) && fs::equivalent(dir, run.out)) {
      throw ConfigError("output directory " + run.out.string() + " contains input " +
                        in.string() + "; choose another 'out'");
    }
  }
}

Net build_net(const Config& c, const std::string& layers_key) {
  const auto layers = keyed(layers_key, [&] { return parse_layers(c.str(layers_key)); });
  return keyed(layers_key, [&] {
    return Net(static_cast<std::size_t>(c.uint("net.input_dim")), layers);
  });
}

LossConfig build_loss(const Config& c) {
  LossConfig l;
  l.eta = c.num("loss.eta");
  if (auto b = c.opt_num("loss.barrier_c")) l.barrier_c = *b;
  const std::string red = c.str("loss.reduction");
  if (red == "mean") {
    l.reduction = Reduction::mean;
  } else if (red == "sum") {
    l.reduction = Reduction::sum;
  } else {
    throw ConfigError("key 'loss.reduction': expected 'mean' or 'sum'");
  }
  keyed("loss", [&] {
    l.validate();
    return 0;
  });
  return l;
}

Problem build_problem(const Run& run) {
  const Config& c = run.cfg;
  Net net = build_net(c, "net.layers");
  Dataset data;
  if (c.str("data.source") == "teacher") {
    const Net teacher = build_net(c, "teacher.layers");
    if (teacher.output_dim() != net.output_dim()) {
      throw ConfigError("key 'teacher.layers': output width differs from net.layers");
    }
    const ParamVector t = init_params(teacher, c.uint("teacher.seed"), c.num("teacher.scale"));
    data = keyed("data.n", [&] {
      return teacher_student_dataset(teacher, t, c.uint("data.n"), c.uint("data.seed"));
    });
  } else {
    data = load_dataset_csv(c.str("data.path"), net.input_dim());
    if (static_cast<std::size_t>(data.targets.cols()) != net.output_dim()) {
      throw ConfigError("key 'data.path': target columns do not match the net output width");
    }
  }
  ParamVector theta0;
  if (!c.str("init.params").empty()) {
    theta0 = load_params(c.str("init.params"), &net);
  } else {
    theta0 = init_params(net, c.uint("init.seed"), c.num("init.scale"));
  }
  return {std::move(net), std::move(data), std::move(theta0), build_loss(c)};
}

IntegratorMethod parse_integrator(const std::string& text, double default_dt,
                                  const std::string& key) {
  return keyed(key, [&] {
    const auto colon = text.find(':');
    const IntegratorKind kind = integrator_from_string(text.substr(0, colon));
    double dt = default_dt;
    if (colon != std::string::npos) {
      std::size_t pos = 0;
      dt = std::stod(text.substr(colon + 1), &pos);
      if (pos != text.size() - colon - 1) throw std::invalid_argument("bad step in '" + text + "'");
    }
    IntegratorMethod m{kind, 0.0};
    if (!m.is_adaptive()) m.dt = dt;
    return m;
  });
}

IntegratorConfig integrator_config(const Config& c) {
  IntegratorConfig ic;
  ic.method = parse_integrator(c.str("integrator.method"), c.num("integrator.dt"),
                               "integrator.method");
  ic.abstol = c.num("integrator.abstol");
  ic.reltol = c.num("integrator.reltol");
  ic.t_end = c.num("integrator.t_end");
  ic.max_steps = c.uint("integrator.max_steps");
  ic.wall_budget_seconds = c.opt_num("integrator.wall_seconds");
  ic.grid_points = c.uint("integrator.grid_points");
  ic.jacobian_lag = c.uint("integrator.jacobian_lag");
  keyed("integrator", [&] {
    ic.validate();
    return 0;
  });
  return ic;
}

OptimizerMethod optimizer_method(const Config& c) {
  OptimizerMethod m;
  m.kind = keyed("optimizer.method", [&] { return optimizer_from_string(c.str("optimizer.method")); });
  m.lr = c.num("optimizer.lr");
  m.memory = c.uint("optimizer.memory");
  m.delta0 = c.num("optimizer.delta0");
  m.delta_max = c.num("optimizer.delta_max");
  keyed("optimizer", [&] {
    m.validate();
    return 0;
  });
  return m;
}

OptimizerBudget optimizer_budget(const Config& c) {
  OptimizerBudget b;
  b.max_iters = c.uint("optimizer.max_iters");
  b.grad_tol = c.num("optimizer.grad_tol");
  b.wall_seconds = c.opt_num("optimizer.wall_seconds");
  keyed("optimizer", [&] {
    b.validate();
    return 0;
  });
  return b;
}

int run_integrate(Run& run) {
  const Problem p = build_problem(run);
  IntegratorConfig ic = integrator_config(run.cfg);
  const auto replay = run.cfg.opt_uint("integrator.replay_steps");
  if (replay) {
    ic.max_steps = *replay;
    ic.wall_budget_seconds.reset();
  }
  run.grid_points["trajectory"] = ic.resolved_save_times().size();
  Trajectory tr = integrate(p.net, p.theta0, p.data, p.loss, ic);
  if (replay && tr.terminated_by == Termination::max_steps) tr.terminated_by = Termination::budget;
  if (tr.terminated_by == Termination::budget && !replay) {
    run.cfg.values["integrator.replay_steps"] = tr.accepted_steps;
  }
  run.timing["work_cpu_seconds"] = tr.work.cpu_seconds;

  save_trajectory(tr, run.out / "trajectory");
  save_params(tr.final_state(), run.out / "final.bin", p.net, run.cfg.uint("init.seed"));
  write_json(run.out / "summary.json",
             {{"terminated_by", std::string(to_string(tr.terminated_by))},
              {"accepted_steps", tr.accepted_steps},
              {"rejected_steps", tr.rejected_steps},
              {"final_time", tr.times.back()},
              {"final_loss", tr.losses.back()},
              {"snapshots", tr.size()},
              {"param_count", p.net.param_count()}});
  std::printf("integrate: %s after %llu steps, t=%.6g, loss=%.6g\n",
              std::string(to_string(tr.terminated_by)).c_str(),
              static_cast<unsigned long long>(tr.accepted_steps), tr.times.back(),
              tr.losses.back());
  return tr.terminated_by == Termination::step_failure ? kExitNumerical : kExitOk;
}

int run_minimize(Run& run) {
  const Problem p = build_problem(run);
  const OptimizerMethod m = optimizer_method(run.cfg);
  OptimizerBudget b = optimizer_budget(run.cfg);
  const auto replay = run.cfg.opt_uint("optimizer.replay_iters");
  if (replay) {
    b.max_iters = *replay;
    b.wall_seconds.reset();
  }
  MinimizeResult r = minimize(p.net, p.theta0, p.data, p.loss, m, b);
  if (replay && r.report.status == ConvergenceStatus::not_converged &&
      r.report.iterations == *replay) {
    r.report.status = ConvergenceStatus::budget_exhausted;
  }
  if (r.report.status == ConvergenceStatus::budget_exhausted && !replay) {
    run.cfg.values["optimizer.replay_iters"] = r.report.iterations;
  }
  run.timing["work_cpu_seconds"] = r.report.work.cpu_seconds;
  save_params(r.theta, run.out / "final.bin", p.net, run.cfg.uint("init.seed"));
  write_json(run.out / "report.json", report_json(r.report));
  std::printf("minimize: %s after %llu iterations, loss=%.6g, |g|=%.3g\n",
              std::string(to_string(r.report.status)).c_str(),
              static_cast<unsigned long long>(r.report.iterations), r.report.final_loss,
              r.report.grad_norm);
  return std::isfinite(r.report.final_loss) ? kExitOk : kExitNumerical;
}

int run_protocol(Run& run) {
  const Problem p = build_problem(run);
  ProtocolConfig pc;
  pc.epochs = run.cfg.uint("protocol.epochs");
  pc.steps_per_epoch = run.cfg.uint("protocol.steps_per_epoch");
  pc.delta0 = run.cfg.num("optimizer.delta0");
  pc.delta_max = run.cfg.num("optimizer.delta_max");
  keyed("protocol", [&] {
    pc.validate();
    return 0;
  });
  const ProtocolResult r = probably_converged_protocol(p.net, p.theta0, p.data, p.loss, pc);
  run.timing["work_cpu_seconds"] = r.report.work.cpu_seconds;
  save_params(r.theta, run.out / "final.bin", p.net, run.cfg.uint("init.seed"));
  json j = report_json(r.report);
  j["epoch_losses"] = r.epoch_losses;
  write_json(run.out / "report.json", j);
  std::printf("protocol: %s after %zu epochs, loss=%.6g, min eigenvalue=%.3g\n",
              std::string(to_string(r.report.status)).c_str(), r.epoch_losses.size(),
              r.report.final_loss, r.report.min_eigenvalue.value_or(0.0));
  return kExitOk;
}

int run_bench(Run& run) {
  const Config& c = run.cfg;
  const Problem p = build_problem(run);
  const double t_end = c.num("integrator.t_end");
  const std::size_t grid = c.uint("integrator.grid_points");

  std::vector<BenchMethod> methods;
  std::istringstream list(c.str("bench.methods"));
  std::string item;
  while (std::getline(list, item, ',')) {
    BenchMethod bm;
    bm.name = item;
    bm.config.method = parse_integrator(item, c.num("integrator.dt"), "bench.methods");
    bm.config.abstol = c.num("integrator.abstol");
    bm.config.reltol = c.num("integrator.reltol");
    bm.config.jacobian_lag = c.uint("integrator.jacobian_lag");
    methods.push_back(bm);
  }
  BenchmarkConfig bc;
  bc.methods = methods;
  bc.budgets = c.nums("bench.budgets");
  bc.seed = c.uint("seed");
  bc.grid_points = grid;
  keyed("bench", [&] {
    bc.validate();
    return 0;
  });

  const std::size_t n_runs = bc.methods.size() * bc.budgets.size();
  const json& replay = c.raw("bench.replay");
  if (!replay.is_null() && (!replay.is_array() || replay.size() != n_runs)) {
    throw ConfigError("key 'bench.replay': expected " + std::to_string(n_runs) + " entries");
  }

  const Trajectory ref = reference_trajectory(p.net, p.theta0, p.data, p.loss, t_end,
                                              c.num("bench.reference_tol"), grid);
  save_trajectory(ref, run.out / "reference");
  run.grid_points["reference"] = ref.size();
  run.grid_points["method"] = grid;

  const MlpObjective obj(p.net, p.data, p.loss);
  std::vector<ComparisonRecord> records;
  json replay_out = json::array();
  json elapsed = json::array();
  for (const auto& m : bc.methods) {
    for (double budget : bc.budgets) {
      const std::size_t i = records.size();
      std::optional<std::uint64_t> steps;
      if (!replay.is_null()) {
        try {
          steps = replay[i].at("steps").get<std::uint64_t>();
        } catch (const json::exception&) {
          throw ConfigError("key 'bench.replay': entry " + std::to_string(i) + " has no steps");
        }
      }
      ComparisonRecord r =
          compare_run(obj, p.theta0, p.loss.eta, m, budget, ref, bc.seed, grid, steps);
      if (steps) {
        r.terminated_by = keyed("bench.replay", [&] {
          return termination_from_string(replay[i].value("terminated_by", "budget"));
        });
        if (replay[i].contains("error")) r.error = replay[i]["error"].get<std::string>();
      }
      replay_out.push_back({{"method", r.method},
                            {"budget_s", r.cpu_budget_seconds},
                            {"steps", r.cutoff_steps},
                            {"terminated_by", std::string(to_string(r.terminated_by))}});
      if (!r.error.empty()) replay_out.back()["error"] = r.error;
      elapsed.push_back({{"method", r.method}, {"budget_s", budget},
                         {"elapsed_s", r.elapsed_seconds}});
      std::printf("bench: %-24s budget %.3gs  d_m=%.3e  t_m=%.4g  loss=%.4e%s\n",
                  r.method.c_str(), budget, r.d_m, r.t_m, r.final_loss,
                  r.error.empty() ? "" : "  (failed)");
      records.push_back(std::move(r));
    }
  }
  run.cfg.values["bench.replay"] = replay_out;
  run.timing["runs"] = elapsed;

  std::ofstream csv(run.out / "comparison.csv");
  write_comparison_csv(csv, records);
  return kExitOk;
}

int run_neti(Run& run) {
  const Config& c = run.cfg;
  if (c.flag("neti.rate")) {
    RateExperimentConfig rc;
    rc.input_dim = c.uint("neti.input_dim");
    rc.student_width = c.uint("neti.student_width");
    rc.teacher_width = c.uint("neti.teacher_width");
    rc.activation = keyed("neti.activation",
                          [&] { return activation_from_string(c.str("neti.activation")); });
    rc.sample_sizes.clear();
    for (auto n : c.uints("neti.sizes")) rc.sample_sizes.push_back(n);
    rc.seeds = c.uints("neti.seeds");
    keyed("neti", [&] {
      rc.validate();
      return 0;
    });
    const RateExperimentResult r = run_rate_experiment(rc);
    json seeds = json::array();
    for (const auto& s : r.seeds) {
      seeds.push_back({{"seed", s.seed},
                       {"distances", s.distances},
                       {"slope", s.slope},
                       {"infinite_loss", s.infinite_loss},
                       {"converged", s.converged}});
    }
    write_json(run.out / "rate.json",
               {{"sample_sizes", rc.sample_sizes}, {"seeds", seeds},
                {"median_slope", r.median_slope}});
    std::printf("neti rate: median slope %.4f over %zu seeds\n", r.median_slope,
                r.seeds.size());
    return kExitOk;
  }

  const NetISpec spec = keyed("neti", [&] {
    return random_neti_spec(c.uint("neti.input_dim"), c.uint("neti.student_width"),
                            c.uint("neti.teacher_width"),
                            activation_from_string(c.str("neti.activation")),
                            c.uint("init.seed"), c.flag("neti.trainable_output"));
  });
  if (!has_analytic_kernel(spec.activation)) {
    throw ConfigError("key 'neti.activation': no closed-form kernel for '" +
                      c.str("neti.activation") + "'; only the Monte-Carlo oracle applies");
  }
  NetITrainConfig tc;
  IntegratorConfig warm;
  warm.method = IntegratorMethod::rosenbrock();
  warm.t_end = c.num("neti.warm_t_end");
  warm.max_steps = c.uint("neti.warm_steps");
  warm.grid_points = 2;
  if (warm.max_steps > 0) tc.warm_start = warm;
  tc.method = optimizer_method(c);
  tc.budget = optimizer_budget(c);
  tc.budget.wall_seconds.reset();
  const NetITrainResult r = neti_train(spec, tc);
  const McEstimate mc = mc_oracle(r.spec, c.uint("neti.mc_samples"), c.uint("data.seed"));
  run.timing["work_cpu_seconds"] = r.report.work.cpu_seconds;
  save_params(r.spec.params(), run.out / "final.bin", std::nullopt, c.uint("init.seed"));
  json j = report_json(r.report);
  j["student_w"] = to_json(r.spec.student_w);
  j["student_a"] = to_json(r.spec.student_a);
  j["teacher_w"] = to_json(r.spec.teacher_w);
  j["teacher_a"] = to_json(r.spec.teacher_a);
  j["population_loss"] = neti_loss(r.spec);
  j["mc_loss"] = {{"mean", mc.mean}, {"standard_error", mc.standard_error},
                  {"samples", mc.samples}};
  write_json(run.out / "neti.json", j);
  std::printf("neti: %s, population loss %.3e, Monte-Carlo %.3e +- %.1e\n",
              std::string(to_string(r.report.status)).c_str(), neti_loss(r.spec), mc.mean,
              mc.standard_error);
  return kExitOk;
}

int run_spectrum(Run& run) {
  const Problem p = build_problem(run);
  const Vector eig = hessian_spectrum(p.net, p.theta0, p.data, p.loss);
  write_json(run.out / "spectrum.json",
             {{"eigenvalues", to_json(eig)},
              {"loss", loss(p.net, p.theta0, p.data, p.loss)},
              {"param_count", p.net.param_count()}});
  std::printf("spectrum: %lld eigenvalues, min %.6g, max %.6g\n",
              static_cast<long long>(eig.size()), eig(0), eig(eig.size() - 1));
  return kExitOk;
}

int run_gradcheck(Run& run) {
  const Problem p = build_problem(run);
  const Vector g = gradient(p.net, p.theta0, p.data, p.loss);
  const Vector fd = fd_gradient(p.net, p.theta0, p.data, p.loss, run.cfg.num("gradcheck.step"));
  const double err = relative_linf_error(g, fd);
  const double tol = run.cfg.num("gradcheck.tol");
  write_json(run.out / "gradcheck.json",
             {{"max_relative_error", err}, {"tol", tol}, {"param_count", p.net.param_count()},
              {"passed", err < tol}});
  std::printf("max relative FD error: %.3e (%s)\n", err, err < tol ? "ok" : "too large");
  return err < tol ? kExitOk : kExitNumerical;
}

json parse_value(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::exception&) {
    return text;
  }
}

void write_run_json(const Run& run) {
  write_json(run.out / "run.json",
             {{"config", run.cfg.values},
              {"library_version", GRADFLOW_VERSION},
              {"layout_version", kLayoutVersion},
              {"seeds", {{"seed", run.cfg.raw("seed")},
                         {"init", run.cfg.raw("init.seed")},
                         {"data", run.cfg.raw("data.seed")},
                         {"teacher", run.cfg.raw("teacher.seed")}}},
              {"grid_points", run.grid_points}});
}

int execute(const std::string& mode, const std::string& config_file,
            const std::vector<std::string>& sets, const std::string& out) {
  Run run;
  if (!config_file.empty()) {
    json j = read_json_file(config_file);
    // A previous run.json carries its configuration under "config".
    if (j.is_object() && j.contains("config") && j["config"].is_object()) j = j["config"];
    run.cfg.merge(j, config_file);
    run.inputs.emplace_back(config_file);
  }
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw ConfigError("--set expects key=value, got '" + s + "'");
    }
    run.cfg.set(s.substr(0, eq), parse_value(s.substr(eq + 1)), "--set");
  }
  if (!out.empty()) run.cfg.values["out"] = out;
  const json& m = run.cfg.raw("mode");
  if (!m.is_null() && m != mode) {
    throw ConfigError("key 'mode': config is for '" + m.get<std::string>() + "', not '" + mode +
                      "'");
  }
  run.cfg.values["mode"] = mode;
  resolve(run);
  check_inputs_untouched(run);
  fs::create_directories(run.out);
  write_run_json(run);

  const auto start = std::chrono::steady_clock::now();
  int code = kExitOk;
  auto finish = [&] {
    run.timing["wall_seconds"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    write_run_json(run);
    write_json(run.out / "timing.json", run.timing);
  };
  try {
    if (mode == "integrate") code = run_integrate(run);
    else if (mode == "minimize") code = run_minimize(run);
    else if (mode == "protocol") code = run_protocol(run);
    else if (mode == "bench") code = run_bench(run);
    else if (mode == "neti") code = run_neti(run);
    else if (mode == "spectrum") code = run_spectrum(run);
    else if (mode == "gradcheck") code = run_gradcheck(run);
  } catch (...) {
    finish();
    throw;
  }
  finish();
  return code;
}

}  // namespace

int cli_run(int argc, const char* const* argv) {
  CLI::App app{"Gradient flow and fixed points of small neural networks"};
  app.require_subcommand(1);
  std::string config_file;
  std::vector<std::string> sets;
  std::string out;
  for (const auto& mode : kModes) {
    auto* sub = app.add_subcommand(mode, "run the " + mode + " experiment");
    sub->add_option("--config", config_file, "JSON config or a previous run.json");
    sub->add_option("--set", sets, "override one key: key=value (value parsed as JSON)");
    sub->add_option("--out", out, "output directory (default $GRADFLOW_OUT/<mode>-<seed>)");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }
  const std::string mode = app.get_subcommands().front()->get_name();

  try {
    return execute(mode, config_file, sets, out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const PersistenceError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  }
}

}  // namespace gradflow::cli
