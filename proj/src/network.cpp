#include "gradflow/network.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "detail/forward_kernel.hpp"

namespace gradflow {

std::string_view to_string(ActivationKind kind) {
  switch (kind) {
    case ActivationKind::identity: return "identity";
    case ActivationKind::tanh: return "tanh";
    case ActivationKind::sigmoid: return "sigmoid";
    case ActivationKind::softplus: return "softplus";
    case ActivationKind::relu: return "relu";
    case ActivationKind::erf_scaled: return "erf_scaled";
  }
  return "unknown";
}

ActivationKind activation_from_string(std::string_view name) {
  for (auto kind : {ActivationKind::identity, ActivationKind::tanh, ActivationKind::sigmoid,
                    ActivationKind::softplus, ActivationKind::relu, ActivationKind::erf_scaled}) {
    if (to_string(kind) == name) return kind;
  }
  throw std::invalid_argument("unknown activation '" + std::string(name) + "'");
}

namespace {

double logistic(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

ActivationValue activation_eval(ActivationKind kind, double x) {
  switch (kind) {
    case ActivationKind::identity:
      return {x, 1.0, 0.0};
    case ActivationKind::tanh: {
      const double t = std::tanh(x);
      const double d = 1.0 - t * t;
      return {t, d, -2.0 * t * d};
    }
    case ActivationKind::sigmoid: {
      const double s = logistic(x);
      const double d = s * (1.0 - s);
      return {s, d, d * (1.0 - 2.0 * s)};
    }
    case ActivationKind::softplus: {
      const double s = logistic(x);
      const double v = std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
      return {v, s, s * (1.0 - s)};
    }
    case ActivationKind::relu:
      if (x > 0.0) return {x, 1.0, 0.0};
      return {0.0, 0.0, 0.0};
    case ActivationKind::erf_scaled: {
      // erf(x / sqrt 2): derivative sqrt(2/pi) exp(-x^2/2)
      constexpr double kScale = std::numbers::sqrt2 * std::numbers::inv_sqrtpi;
      const double d = kScale * std::exp(-0.5 * x * x);
      return {std::erf(x / std::numbers::sqrt2), d, -x * d};
    }
  }
  return {0.0, 0.0, 0.0};
}

Net::Net(std::size_t input_dim, std::vector<LayerSpec> layers)
    : input_dim_(input_dim), layers_(std::move(layers)) {
  if (input_dim_ == 0) throw std::invalid_argument("Net: input dimension must be positive");
  if (layers_.empty()) throw std::invalid_argument("Net: at least one layer is required");
  offsets_.reserve(layers_.size() + 1);
  offsets_.push_back(0);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (layers_[i].width == 0) {
      throw std::invalid_argument("Net: layer " + std::to_string(i + 1) + " has zero width");
    }
    const std::size_t n = layers_[i].width * (fan_in(i) + (layers_[i].has_bias ? 1 : 0));
    offsets_.push_back(offsets_.back() + n);
  }
}

std::size_t Net::max_width() const {
  std::size_t w = input_dim_;
  for (const auto& l : layers_) w = std::max(w, l.width);
  return w;
}

std::vector<LayerParams> unpack(const Net& net, const ParamVector& theta) {
  check_compatible(net, theta);
  std::vector<LayerParams> out(net.num_layers());
  for (std::size_t i = 0; i < net.num_layers(); ++i) {
    const auto rows = static_cast<Eigen::Index>(net.layer(i).width);
    const auto cols = static_cast<Eigen::Index>(net.fan_in(i));
    out[i].weight = Eigen::Map<const RowMatrix>(theta.data() + net.weight_offset(i), rows, cols);
    if (net.layer(i).has_bias) out[i].bias = theta.segment(net.bias_offset(i), rows);
  }
  return out;
}

ParamVector pack(const Net& net, std::span<const LayerParams> layers) {
  if (layers.size() != net.num_layers()) throw DimensionError("pack: layer count mismatch");
  ParamVector theta(net.param_count());
  for (std::size_t i = 0; i < net.num_layers(); ++i) {
    const auto rows = static_cast<Eigen::Index>(net.layer(i).width);
    const auto cols = static_cast<Eigen::Index>(net.fan_in(i));
    if (layers[i].weight.rows() != rows || layers[i].weight.cols() != cols) {
      throw DimensionError("pack: weight shape mismatch in layer " + std::to_string(i + 1));
    }
    Eigen::Map<RowMatrix>(theta.data() + net.weight_offset(i), rows, cols) = layers[i].weight;
    if (net.layer(i).has_bias) {
      if (layers[i].bias.size() != rows) {
        throw DimensionError("pack: bias length mismatch in layer " + std::to_string(i + 1));
      }
      theta.segment(net.bias_offset(i), rows) = layers[i].bias;
    } else if (layers[i].bias.size() != 0) {
      throw DimensionError("pack: bias given for bias-free layer " + std::to_string(i + 1));
    }
  }
  return theta;
}

Dataset::Dataset(RowMatrix x, RowMatrix y) : inputs(std::move(x)), targets(std::move(y)) {
  if (inputs.rows() < 1) throw DimensionError("Dataset: at least one sample is required");
  if (inputs.rows() != targets.rows()) {
    throw DimensionError("Dataset: inputs have " + std::to_string(inputs.rows()) +
                         " rows but targets have " + std::to_string(targets.rows()));
  }
}

void LossConfig::validate() const {
  if (!(barrier_c > 0.0)) throw std::invalid_argument("barrier_c must be positive or infinite");
  if (!(eta > 0.0) || !std::isfinite(eta)) throw std::invalid_argument("eta must be positive");
}

void check_compatible(const Net& net, const ParamVector& theta) {
  if (static_cast<std::size_t>(theta.size()) != net.param_count()) {
    throw DimensionError("parameter vector has length " + std::to_string(theta.size()) +
                         ", net expects " + std::to_string(net.param_count()));
  }
}

void check_compatible(const Net& net, const ParamVector& theta, const Dataset& data) {
  check_compatible(net, theta);
  if (static_cast<std::size_t>(data.inputs.cols()) != net.input_dim()) {
    throw DimensionError("dataset input dimension " + std::to_string(data.inputs.cols()) +
                         " does not match net input dimension " + std::to_string(net.input_dim()));
  }
  if (static_cast<std::size_t>(data.targets.cols()) != net.output_dim()) {
    throw DimensionError("dataset target dimension " + std::to_string(data.targets.cols()) +
                         " does not match net output dimension " +
                         std::to_string(net.output_dim()));
  }
  if (data.inputs.rows() != data.targets.rows() || data.inputs.rows() < 1) {
    throw DimensionError("dataset inputs and targets disagree on sample count");
  }
}

Vector forward(const Net& net, const ParamVector& theta, std::span<const double> x) {
  check_compatible(net, theta);
  if (x.size() != net.input_dim()) {
    throw DimensionError("input has length " + std::to_string(x.size()) + ", net expects " +
                         std::to_string(net.input_dim()));
  }
  detail::ForwardWorkspace ws(net);
  detail::forward_sample(net, theta.data(), x.data(), ws);
  return Eigen::Map<const Vector>(ws.activation(net.num_layers()),
                                  static_cast<Eigen::Index>(net.output_dim()));
}

RowMatrix forward_batch(const Net& net, const ParamVector& theta, const Dataset& data) {
  check_compatible(net, theta);
  if (static_cast<std::size_t>(data.inputs.cols()) != net.input_dim()) {
    throw DimensionError("dataset input dimension does not match net");
  }
  RowMatrix out(data.inputs.rows(), static_cast<Eigen::Index>(net.output_dim()));
  detail::ForwardWorkspace ws(net);
  for (Eigen::Index n = 0; n < data.inputs.rows(); ++n) {
    detail::forward_sample(net, theta.data(), data.inputs.row(n).data(), ws);
    std::copy_n(ws.activation(net.num_layers()), net.output_dim(), out.row(n).data());
  }
  return out;
}

double barrier_value(const ParamVector& theta, double c, Vector* gradient) {
  const double half_sq = 0.5 * theta.squaredNorm();
  if (!std::isfinite(c) || half_sq <= c) {
    if (gradient) gradient->setZero(theta.size());
    return 0.0;
  }
  const double excess = half_sq - c;
  if (gradient) *gradient = (2.0 * excess) * theta;
  return excess * excess;
}

BarrierTerm barrier(const ParamVector& theta, double c) {
  BarrierTerm out;
  out.value = barrier_value(theta, c, &out.gradient);
  const auto p = theta.size();
  out.hessian.setZero(p, p);
  const double half_sq = 0.5 * theta.squaredNorm();
  if (std::isfinite(c) && half_sq > c) {
    out.hessian.noalias() = 2.0 * theta * theta.transpose();
    out.hessian.diagonal().array() += 2.0 * (half_sq - c);
  }
  return out;
}

ParamVector init_params(const Net& net, std::uint64_t seed, double scale) {
  if (!(scale > 0.0)) throw std::invalid_argument("init_params: scale must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  ParamVector theta(net.param_count());
  for (auto& v : theta) v = scale * normal(rng);
  return theta;
}

}  // namespace gradflow
