// Per-sample forward pass shared by forward(), the loss and its derivatives.
// Every code path that needs f_theta(x) goes through forward_sample so that
// batched and single-sample results agree bit for bit.

#ifndef GRADFLOW_DETAIL_FORWARD_KERNEL_HPP_
#define GRADFLOW_DETAIL_FORWARD_KERNEL_HPP_

#include <algorithm>
#include <cstddef>
#include <vector>

#include "gradflow/network.hpp"

namespace gradflow::detail {

class ForwardWorkspace {
 public:
  explicit ForwardWorkspace(const Net& net) {
    // unit storage: layer 0 holds the input, layer i the outputs of layer i
    unit_offset_.push_back(0);
    unit_offset_.push_back(net.input_dim());
    for (const auto& l : net.layers()) unit_offset_.push_back(unit_offset_.back() + l.width);
    const std::size_t total = unit_offset_.back();
    act_.assign(total, 0.0);
    d1_.assign(total, 0.0);
    d2_.assign(total, 0.0);
  }

  double* activation(std::size_t layer) { return act_.data() + unit_offset_[layer]; }
  const double* activation(std::size_t layer) const { return act_.data() + unit_offset_[layer]; }
  /// sigma' and sigma'' at the pre-activations of layer i (1-based like activation()).
  const double* first(std::size_t layer) const { return d1_.data() + unit_offset_[layer]; }
  const double* second(std::size_t layer) const { return d2_.data() + unit_offset_[layer]; }
  double* first(std::size_t layer) { return d1_.data() + unit_offset_[layer]; }
  double* second(std::size_t layer) { return d2_.data() + unit_offset_[layer]; }

 private:
  std::vector<std::size_t> unit_offset_;
  std::vector<double> act_, d1_, d2_;
};

/// z = W a + b with sums taken left to right, then a' = sigma(z).
inline void forward_sample(const Net& net, const double* theta, const double* x,
                           ForwardWorkspace& ws) {
  std::copy_n(x, net.input_dim(), ws.activation(0));
  for (std::size_t i = 0; i < net.num_layers(); ++i) {
    const LayerSpec& spec = net.layer(i);
    const std::size_t fan_in = net.fan_in(i);
    const double* w = theta + net.weight_offset(i);
    const double* b = spec.has_bias ? theta + net.bias_offset(i) : nullptr;
    const double* in = ws.activation(i);
    double* out = ws.activation(i + 1);
    double* d1 = ws.first(i + 1);
    double* d2 = ws.second(i + 1);
    for (std::size_t r = 0; r < spec.width; ++r) {
      const double* row = w + r * fan_in;
      double z = 0.0;
      for (std::size_t c = 0; c < fan_in; ++c) z += row[c] * in[c];
      if (b) z += b[r];
      const ActivationValue v = activation_eval(spec.activation, z);
      out[r] = v.value;
      d1[r] = v.first;
      d2[r] = v.second;
    }
  }
}

}  // namespace gradflow::detail

#endif  // GRADFLOW_DETAIL_FORWARD_KERNEL_HPP_
