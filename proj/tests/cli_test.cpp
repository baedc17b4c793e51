#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "cli.hpp"
#include "gradflow/derivatives.hpp"
#include "gradflow/io.hpp"

namespace gradflow {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           (std::string("gradflow_cli_") +
            ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  int run(std::vector<std::string> args) {
    args.insert(args.begin(), "gradflow");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    return cli::cli_run(static_cast<int>(argv.size()), argv.data());
  }

  fs::path path(const std::string& name) const { return dir_ / name; }

  static std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  }
  static json read_json(const fs::path& p) { return json::parse(slurp(p)); }

  fs::path dir_;
};

const std::vector<std::string> kSmall = {"--set", "data.n=100", "--set",
                                         "net.layers=3:tanh:bias,1:identity:bias"};

std::vector<std::string> with(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

TEST_F(CliTest, GradcheckOnSmallNet) {
  ::testing::internal::CaptureStdout();
  const int code = run(with({"gradcheck", "--out", path("gc").string()}, kSmall));
  const std::string out = ::testing::internal::GetCapturedStdout();
  EXPECT_EQ(code, cli::kExitOk);
  EXPECT_NE(out.find("max relative FD error"), std::string::npos) << out;
  const json j = read_json(path("gc") / "gradcheck.json");
  EXPECT_LT(j["max_relative_error"].get<double>(), 1e-6);
  EXPECT_EQ(j["param_count"].get<int>(), 13);
}

TEST_F(CliTest, GradcheckFailureExitsNumerical) {
  ::testing::internal::CaptureStdout();
  const int code = run(with({"gradcheck", "--out", path("gc").string(), "--set",
                             "gradcheck.tol=1e-300"},
                            kSmall));
  ::testing::internal::GetCapturedStdout();
  EXPECT_EQ(code, cli::kExitNumerical);
  EXPECT_TRUE(fs::exists(path("gc") / "gradcheck.json"));
  EXPECT_TRUE(fs::exists(path("gc") / "run.json"));
}

TEST_F(CliTest, SpectrumOfSavedParams) {
  ::testing::internal::CaptureStdout();
  ASSERT_EQ(run(with({"minimize", "--out", path("min").string(), "--set",
                      "optimizer.max_iters=20"},
                     kSmall)),
            cli::kExitOk);
  const std::string params = (path("min") / "final.bin").string();
  const std::string before = slurp(params);
  ASSERT_EQ(run(with({"spectrum", "--out", path("spec").string(), "--set", "init.params=" + params},
                     kSmall)),
            cli::kExitOk);
  ::testing::internal::GetCapturedStdout();
  EXPECT_EQ(slurp(params), before);

  const auto eig = read_json(path("spec") / "spectrum.json")["eigenvalues"].get<std::vector<double>>();
  ASSERT_EQ(eig.size(), 13u);
  for (std::size_t i = 1; i < eig.size(); ++i) EXPECT_LE(eig[i - 1], eig[i]);

  // Same numbers as the library on the same inputs.
  const json cfg = read_json(path("spec") / "run.json")["config"];
  const Net net(2, parse_layers(cfg["net.layers"].get<std::string>()));
  const Net teacher(2, parse_layers(cfg["teacher.layers"].get<std::string>()));
  const Dataset data = teacher_student_dataset(
      teacher, init_params(teacher, cfg["teacher.seed"].get<std::uint64_t>(), 1.0), 100,
      cfg["data.seed"].get<std::uint64_t>());
  const Vector lib = hessian_spectrum(net, load_params(params, &net), data, LossConfig{});
  for (std::size_t i = 0; i < eig.size(); ++i) EXPECT_EQ(eig[i], lib(static_cast<Eigen::Index>(i)));
}

TEST_F(CliTest, BenchReplayReproducesCsv) {
  ::testing::internal::CaptureStdout();
  const auto args = with({"--set", "integrator.t_end=50", "--set", "bench.budgets=[0.01,0.02]",
                          "--set", "bench.methods=euler:0.05,adaptive_rk45,rosenbrock"},
                         kSmall);
  ASSERT_EQ(run(with({"bench", "--out", path("b1").string()}, args)), cli::kExitOk);
  ASSERT_EQ(run({"bench", "--config", (path("b1") / "run.json").string(), "--out",
                 path("b2").string()}),
            cli::kExitOk);
  ::testing::internal::GetCapturedStdout();
  const std::string csv = slurp(path("b1") / "comparison.csv");
  EXPECT_EQ(csv, slurp(path("b2") / "comparison.csv"));
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 7);
  const json replay = read_json(path("b1") / "run.json")["config"]["bench.replay"];
  EXPECT_EQ(replay.size(), 6u);
  EXPECT_EQ(read_json(path("b1") / "run.json")["grid_points"]["reference"].get<int>(), 1000);
  EXPECT_TRUE(read_json(path("b1") / "timing.json").contains("runs"));
}

TEST_F(CliTest, BudgetedRunsReplayExactly) {
  ::testing::internal::CaptureStdout();
  const auto args = with({"--set", "integrator.method=euler", "--set", "integrator.t_end=1e6",
                          "--set", "integrator.wall_seconds=0.02"},
                         kSmall);
  ASSERT_EQ(run(with({"integrate", "--out", path("i1").string()}, args)), cli::kExitOk);
  ASSERT_EQ(run({"integrate", "--config", (path("i1") / "run.json").string(), "--out",
                 path("i2").string()}),
            cli::kExitOk);
  ::testing::internal::GetCapturedStdout();
  for (const char* f : {"trajectory.csv", "trajectory.states.bin", "trajectory.manifest.json",
                        "final.bin", "final.bin.json", "summary.json"}) {
    EXPECT_EQ(slurp(path("i1") / f), slurp(path("i2") / f)) << f;
  }
  EXPECT_EQ(read_json(path("i2") / "summary.json")["terminated_by"], "budget");
  json c1 = read_json(path("i1") / "run.json")["config"];
  json c2 = read_json(path("i2") / "run.json")["config"];
  c1.erase("out");
  c2.erase("out");
  EXPECT_EQ(c1, c2);
}

TEST_F(CliTest, ConfigFileWithOverrides) {
  std::ofstream(path("cfg.json")) << R"({"data.n": 80, "optimizer.max_iters": 3,
      "net.layers": "2:tanh,1"})";
  ::testing::internal::CaptureStdout();
  ASSERT_EQ(run({"minimize", "--config", path("cfg.json").string(), "--set",
                 "optimizer.method=bfgs", "--out", path("m").string()}),
            cli::kExitOk);
  ::testing::internal::GetCapturedStdout();
  const json cfg = read_json(path("m") / "run.json")["config"];
  EXPECT_EQ(cfg["data.n"], 80);
  EXPECT_EQ(cfg["optimizer.method"], "bfgs");
  EXPECT_EQ(cfg["mode"], "minimize");
  EXPECT_EQ(read_json(path("m") / "report.json")["iterations"], 3);
  EXPECT_TRUE(read_json(path("m") / "run.json").contains("library_version"));
}

TEST_F(CliTest, ConfigErrorsNameTheKey) {
  ::testing::internal::CaptureStderr();
  EXPECT_EQ(run({"integrate", "--out", path("x").string(), "--set", "integrator.abstol=oops"}),
            cli::kExitConfig);
  EXPECT_EQ(run({"integrate", "--out", path("x").string(), "--set", "not.a.key=1"}),
            cli::kExitConfig);
  EXPECT_EQ(run({"integrate", "--out", path("x").string(), "--set", "data.path=/nonexistent.csv",
                 "--set", "data.source=file"}),
            cli::kExitConfig);
  EXPECT_EQ(run({"neti", "--out", path("x").string(), "--set", "neti.activation=tanh"}),
            cli::kExitConfig);
  const std::string err = ::testing::internal::GetCapturedStderr();
  EXPECT_NE(err.find("integrator.abstol"), std::string::npos) << err;
  EXPECT_NE(err.find("not.a.key"), std::string::npos) << err;
  EXPECT_NE(err.find("/nonexistent.csv"), std::string::npos) << err;
  EXPECT_NE(err.find("neti.activation"), std::string::npos) << err;
}

TEST_F(CliTest, ExactlyOneDataSource) {
  std::ofstream(path("d.csv")) << "x0,x1,y\n0.1,0.2,0.3\n0.4,0.5,0.6\n";
  ::testing::internal::CaptureStderr();
  EXPECT_EQ(run({"gradcheck", "--out", path("x").string(), "--set",
                 "data.path=" + path("d.csv").string()}),
            cli::kExitConfig);
  ::testing::internal::GetCapturedStderr();
  ::testing::internal::CaptureStdout();
  EXPECT_EQ(run({"gradcheck", "--out", path("y").string(), "--set", "data.source=file", "--set",
                 "data.path=" + path("d.csv").string()}),
            cli::kExitOk);
  ::testing::internal::GetCapturedStdout();
}

TEST_F(CliTest, ModeMismatchAndBadArguments) {
  ::testing::internal::CaptureStderr();
  ::testing::internal::CaptureStdout();
  ASSERT_EQ(run(with({"gradcheck", "--out", path("g").string()}, kSmall)), cli::kExitOk);
  EXPECT_EQ(run({"integrate", "--config", (path("g") / "run.json").string(), "--out",
                 path("h").string()}),
            cli::kExitConfig);
  EXPECT_EQ(run({"nosuchmode"}), cli::kExitConfig);
  EXPECT_EQ(run({"integrate", "--set", "novalue"}), cli::kExitConfig);
  // Writing over the directory that holds the config would mutate an input.
  EXPECT_EQ(run({"gradcheck", "--config", (path("g") / "run.json").string(), "--out",
                 path("g").string()}),
            cli::kExitConfig);
  ::testing::internal::GetCapturedStdout();
  ::testing::internal::GetCapturedStderr();
}

TEST_F(CliTest, DefaultOutputRootFromEnvironment) {
  ::setenv("GRADFLOW_OUT", path("root").string().c_str(), 1);
  ::testing::internal::CaptureStdout();
  const int code = run(with({"gradcheck", "--set", "seed=5"}, kSmall));
  ::testing::internal::GetCapturedStdout();
  ::unsetenv("GRADFLOW_OUT");
  EXPECT_EQ(code, cli::kExitOk);
  EXPECT_TRUE(fs::exists(path("root") / "gradcheck-5" / "gradcheck.json"));
}

TEST_F(CliTest, NetiTrainsAndReports) {
  ::testing::internal::CaptureStdout();
  ASSERT_EQ(run({"neti", "--out", path("n").string(), "--set", "neti.mc_samples=1000"}),
            cli::kExitOk);
  ::testing::internal::GetCapturedStdout();
  const json j = read_json(path("n") / "neti.json");
  EXPECT_EQ(j["student_w"].size(), 2u);
  EXPECT_LT(j["mc_loss"]["mean"].get<double>(), 1e-10);
}

TEST_F(CliTest, ProtocolWritesEpochLosses) {
  ::testing::internal::CaptureStdout();
  ASSERT_EQ(run(with({"protocol", "--out", path("p").string(), "--set", "protocol.epochs=3",
                      "--set", "protocol.steps_per_epoch=5"},
                     kSmall)),
            cli::kExitOk);
  ::testing::internal::GetCapturedStdout();
  const json j = read_json(path("p") / "report.json");
  EXPECT_GE(j["epoch_losses"].size(), 2u);
  EXPECT_TRUE(j["min_eigenvalue"].is_number());
}

}  // namespace
}  // namespace gradflow
