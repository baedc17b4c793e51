// Multi-layer perceptron definitions: architecture, parameter layout,
// activations and the loss barrier.

#ifndef GRADFLOW_NETWORK_HPP_
#define GRADFLOW_NETWORK_HPP_

#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace gradflow {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
/// Row-major matrix used for datasets (one sample per row).
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Flat parameter vector. Layout per layer: W (row-major) then b (if present).
using ParamVector = Vector;

/// Thrown when array shapes do not fit together.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class ActivationKind { identity, tanh, sigmoid, softplus, relu, erf_scaled };

std::string_view to_string(ActivationKind kind);
/// Throws std::invalid_argument for unknown names.
ActivationKind activation_from_string(std::string_view name);

struct ActivationValue {
  double value;
  double first;
  double second;
};

/// sigma(x), sigma'(x), sigma''(x). relu uses 0 for both derivatives at the kink.
ActivationValue activation_eval(ActivationKind kind, double x);

struct LayerSpec {
  std::size_t width = 1;
  ActivationKind activation = ActivationKind::identity;
  bool has_bias = false;

  bool operator==(const LayerSpec&) const = default;
};

/// Architecture of a fully connected network. Immutable once built.
class Net {
 public:
  Net(std::size_t input_dim, std::vector<LayerSpec> layers);

  std::size_t input_dim() const { return input_dim_; }
  std::size_t output_dim() const { return layers_.back().width; }
  std::size_t num_layers() const { return layers_.size(); }
  const std::vector<LayerSpec>& layers() const { return layers_; }
  const LayerSpec& layer(std::size_t i) const { return layers_[i]; }

  /// Width of the input to layer i (D_{i-1}).
  std::size_t fan_in(std::size_t i) const { return i == 0 ? input_dim_ : layers_[i - 1].width; }
  /// Offset of W^i in the flat parameter vector.
  std::size_t weight_offset(std::size_t i) const { return offsets_[i]; }
  /// Offset of b^i; only meaningful when layer(i).has_bias.
  std::size_t bias_offset(std::size_t i) const {
    return offsets_[i] + layers_[i].width * fan_in(i);
  }
  std::size_t param_count() const { return offsets_.back(); }
  std::size_t max_width() const;

  bool operator==(const Net& other) const {
    return input_dim_ == other.input_dim_ && layers_ == other.layers_;
  }

 private:
  std::size_t input_dim_;
  std::vector<LayerSpec> layers_;
  std::vector<std::size_t> offsets_;  // size L + 1
};

/// Weights and bias of one layer, split out of a flat parameter vector.
struct LayerParams {
  Matrix weight;
  Vector bias;  // empty when the layer has no bias
};

std::vector<LayerParams> unpack(const Net& net, const ParamVector& theta);
ParamVector pack(const Net& net, std::span<const LayerParams> layers);

struct Dataset {
  RowMatrix inputs;   // N x D_in
  RowMatrix targets;  // N x D_out

  Dataset() = default;
  Dataset(RowMatrix x, RowMatrix y);

  std::size_t size() const { return static_cast<std::size_t>(inputs.rows()); }
};

enum class Reduction { sum, mean };

struct LossConfig {
  double barrier_c = std::numeric_limits<double>::infinity();
  double eta = 1.0;
  Reduction reduction = Reduction::mean;

  void validate() const;
};

void check_compatible(const Net& net, const ParamVector& theta);
void check_compatible(const Net& net, const ParamVector& theta, const Dataset& data);

/// f_theta(x) for one input.
Vector forward(const Net& net, const ParamVector& theta, std::span<const double> x);
inline Vector forward(const Net& net, const ParamVector& theta, const Vector& x) {
  return forward(net, theta, std::span<const double>(x.data(), static_cast<std::size_t>(x.size())));
}
/// Row i equals forward(net, theta, x_i), bit for bit.
RowMatrix forward_batch(const Net& net, const ParamVector& theta, const Dataset& data);

struct BarrierTerm {
  double value = 0.0;
  Vector gradient;
  Matrix hessian;
};

/// R(theta) = (|theta|^2/2 - c)^2 beyond the radius, 0 inside.
BarrierTerm barrier(const ParamVector& theta, double c);
/// Value and gradient only; skips the P x P Hessian.
double barrier_value(const ParamVector& theta, double c, Vector* gradient = nullptr);

/// I.i.d. Normal(0, scale^2) entries from a seeded mt19937_64.
ParamVector init_params(const Net& net, std::uint64_t seed, double scale = 1.0);

}  // namespace gradflow

#endif  // GRADFLOW_NETWORK_HPP_
