// On-disk formats for parameters and trajectories, and synthetic
// teacher-student data.
//
// Parameters: little-endian float64 blob plus a "<path>.json" sidecar.
// Trajectories: "<base>.csv" (t, loss, grad_norm), "<base>.states.bin"
// (row-major snapshots x P) and "<base>.manifest.json" with SHA-256 of both.

#ifndef GRADFLOW_IO_HPP_
#define GRADFLOW_IO_HPP_

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "gradflow/network.hpp"
#include "gradflow/ode.hpp"

namespace gradflow {

/// Malformed, truncated, mismatched or missing files.
class PersistenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kLayoutVersion = 1;

/// "8:tanh:bias,1:identity" style layer list.
std::vector<LayerSpec> parse_layers(const std::string& text);
std::string format_layers(const std::vector<LayerSpec>& layers);

struct ParamsSidecar {
  int layout_version = kLayoutVersion;
  std::size_t count = 0;
  std::optional<Net> net;  // absent for parameters without an MLP shape
  std::uint64_t seed = 0;
};

void save_params(const Vector& theta, const std::filesystem::path& path,
                 const std::optional<Net>& net = std::nullopt, std::uint64_t seed = 0);
/// Validates the blob length against the sidecar and, when given, the
/// sidecar's net against `expected`.
Vector load_params(const std::filesystem::path& path, const Net* expected = nullptr);
ParamsSidecar read_params_sidecar(const std::filesystem::path& path);

/// Writes the three trajectory files; returns the manifest path.
/// work.cpu_seconds is not stored.
std::filesystem::path save_trajectory(const Trajectory& traj, const std::filesystem::path& base);
/// `manifest` is the .manifest.json path. Checks both hashes and, when
/// given, the parameter count.
Trajectory load_trajectory(const std::filesystem::path& manifest,
                           std::optional<std::size_t> expected_params = std::nullopt);

std::string sha256_hex(const std::filesystem::path& file);

void write_f64_le(const std::filesystem::path& path, const double* data, std::size_t n);
std::vector<double> read_f64_le(const std::filesystem::path& path);

/// N standard normal inputs and the teacher's outputs on them.
Dataset teacher_student_dataset(const Net& teacher, const ParamVector& teacher_theta,
                                std::size_t n, std::uint64_t seed);

/// CSV with a header row; the first input_dim columns are inputs, the rest targets.
Dataset load_dataset_csv(const std::filesystem::path& path, std::size_t input_dim);

}  // namespace gradflow

#endif  // GRADFLOW_IO_HPP_
