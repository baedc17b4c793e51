#include "gradflow/derivatives.hpp"

#include <cmath>
#include <limits>

#include "detail/forward_kernel.hpp"

namespace gradflow {

namespace {

using detail::ForwardWorkspace;

// Per-sample first- and second-order backpropagation.
//
// With z_i the pre-activations of layer i, u_i its input (u_0 = x) and
// delta_i = dl/dz_i, the Hessian of the sample loss l = |f(x) - y|^2 is
//
//   d2l / dW_i[r,c] dW_i[s,d] = u_i[c] Hz_i[r,s] u_i[d]
//   d2l / dW_i[r,c] dW_j[s,d] = u_i[c] (B_ji[d,r] delta_j[s] + (G_ji^T Hz_j)[r,s] u_j[d]),  j > i
//
// where Hz_i = d2l/dz_i^2, B_ji = du_j/dz_i and G_ji = dz_j/dz_i = W_j B_ji.
// Biases behave like weights on a constant input 1 (and have B = 0).
class Backprop {
 public:
  Backprop(const Net& net, bool second_order) : net_(net), fw_(net) {
    const std::size_t n = net.num_layers();
    delta_.resize(n);
    dl_dout_.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      delta_[i].resize(static_cast<Eigen::Index>(net.layer(i).width));
      dl_dout_[i].resize(static_cast<Eigen::Index>(net.layer(i).width));
    }
    if (!second_order) return;
    hz_.resize(n);
    b_.resize(n);
    g_.resize(n);
    k_.resize(n);
    bt_.resize(n);
    for (std::size_t j = 0; j < n; ++j) {
      const auto dj = static_cast<Eigen::Index>(net.layer(j).width);
      hz_[j].resize(dj, dj);
      b_[j].resize(j);
      g_[j].resize(j);
      k_[j].resize(j);
      bt_[j].resize(j);
      for (std::size_t i = 0; i < j; ++i) {
        const auto di = static_cast<Eigen::Index>(net.layer(i).width);
        const auto fj = static_cast<Eigen::Index>(net.fan_in(j));
        b_[j][i].resize(fj, di);
        g_[j][i].resize(dj, di);
        k_[j][i].resize(di, dj);
        bt_[j][i].resize(di, fj);
      }
    }
  }

  /// Adds the sample gradient to `grad` and the sample Hessian (upper blocks,
  /// row-major with stride P) to `hess` when non-null. Returns |f(x) - y|^2.
  double accumulate(const double* theta, const double* x, const double* y, double* grad,
                    double* hess) {
    const std::size_t n_layers = net_.num_layers();
    theta_ = theta;
    detail::forward_sample(net_, theta, x, fw_);

    const std::size_t last = n_layers - 1;
    const double* out = fw_.activation(n_layers);
    double sample_loss = 0.0;
    for (std::size_t k = 0; k < net_.output_dim(); ++k) {
      const double r = out[k] - y[k];
      sample_loss += r * r;
      dl_dout_[last][static_cast<Eigen::Index>(k)] = 2.0 * r;
    }
    if (!grad && !hess) return sample_loss;

    for (std::size_t i = n_layers; i-- > 0;) {
      if (i != last) {
        dl_dout_[i].noalias() = weight(i + 1).transpose() * delta_[i + 1];
      }
      const double* d1 = fw_.first(i + 1);
      for (Eigen::Index r = 0; r < delta_[i].size(); ++r) delta_[i][r] = d1[r] * dl_dout_[i][r];
    }

    if (grad) {
      for (std::size_t i = 0; i < n_layers; ++i) {
        const std::size_t fan = net_.fan_in(i);
        const double* in = fw_.activation(i);
        double* gw = grad + net_.weight_offset(i);
        for (std::size_t r = 0; r < net_.layer(i).width; ++r) {
          const double dr = delta_[i][static_cast<Eigen::Index>(r)];
          double* row = gw + r * fan;
          for (std::size_t c = 0; c < fan; ++c) row[c] += dr * in[c];
        }
        if (net_.layer(i).has_bias) {
          double* gb = grad + net_.bias_offset(i);
          for (std::size_t r = 0; r < net_.layer(i).width; ++r) {
            gb[r] += delta_[i][static_cast<Eigen::Index>(r)];
          }
        }
      }
    }

    if (hess) {
      second_order_terms();
      assemble(hess);
    }
    return sample_loss;
  }

 private:
  Eigen::Map<const RowMatrix> weight(std::size_t i) const {
    return {theta_ + net_.weight_offset(i), static_cast<Eigen::Index>(net_.layer(i).width),
            static_cast<Eigen::Index>(net_.fan_in(i))};
  }

  void second_order_terms() {
    const std::size_t n_layers = net_.num_layers();
    const std::size_t last = n_layers - 1;
    for (std::size_t i = n_layers; i-- > 0;) {
      const auto d1 = Eigen::Map<const Vector>(fw_.first(i + 1), delta_[i].size());
      const auto d2 = Eigen::Map<const Vector>(fw_.second(i + 1), delta_[i].size());
      if (i == last) {
        hz_[i].setZero();
        hz_[i].diagonal() = 2.0 * d1.array().square();
      } else {
        const auto w = weight(i + 1);
        hz_[i].noalias() = w.transpose() * hz_[i + 1] * w;
        hz_[i] = d1.asDiagonal() * hz_[i] * d1.asDiagonal();
      }
      hz_[i].diagonal().array() += d2.array() * dl_dout_[i].array();
    }
    for (std::size_t j = 1; j < n_layers; ++j) {
      const auto w = weight(j);
      for (std::size_t i = 0; i < j; ++i) {
        if (j == i + 1) {
          const auto d1 = Eigen::Map<const Vector>(fw_.first(i + 1), delta_[i].size());
          b_[j][i].setZero();
          b_[j][i].diagonal() = d1;
        } else {
          const auto d1 = Eigen::Map<const Vector>(fw_.first(j), b_[j][i].rows());
          b_[j][i].noalias() = d1.asDiagonal() * g_[j - 1][i];
        }
        g_[j][i].noalias() = w * b_[j][i];
        k_[j][i].noalias() = g_[j][i].transpose() * hz_[j];
        bt_[j][i] = b_[j][i].transpose();
      }
    }
  }

  void assemble(double* hess) const {
    const std::size_t p_total = net_.param_count();
    const std::size_t n_layers = net_.num_layers();
    for (std::size_t i = 0; i < n_layers; ++i) {
      const LayerSpec& li = net_.layer(i);
      const std::size_t fan_i = net_.fan_in(i);
      const double* in_i = fw_.activation(i);
      const std::size_t cols_i = fan_i + (li.has_bias ? 1 : 0);
      for (std::size_t r = 0; r < li.width; ++r) {
        for (std::size_t c = 0; c < cols_i; ++c) {
          const bool is_bias = c == fan_i;
          const double a_c = is_bias ? 1.0 : in_i[c];
          const std::size_t p =
              is_bias ? net_.bias_offset(i) + r : net_.weight_offset(i) + r * fan_i + c;
          double* hrow = hess + p * p_total;

          // diagonal block
          for (std::size_t s = 0; s < li.width; ++s) {
            const double coef = a_c * hz_[i](static_cast<Eigen::Index>(r),
                                             static_cast<Eigen::Index>(s));
            double* dst = hrow + net_.weight_offset(i) + s * fan_i;
            for (std::size_t d = 0; d < fan_i; ++d) dst[d] += coef * in_i[d];
            if (li.has_bias) hrow[net_.bias_offset(i) + s] += coef;
          }

          // blocks with later layers
          for (std::size_t j = i + 1; j < n_layers; ++j) {
            const LayerSpec& lj = net_.layer(j);
            const std::size_t fan_j = net_.fan_in(j);
            const double* in_j = fw_.activation(j);
            const double* bt_row = bt_[j][i].data() + r * fan_j;
            for (std::size_t s = 0; s < lj.width; ++s) {
              const double alpha = a_c * delta_[j][static_cast<Eigen::Index>(s)];
              const double beta =
                  a_c * k_[j][i](static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(s));
              double* dst = hrow + net_.weight_offset(j) + s * fan_j;
              for (std::size_t d = 0; d < fan_j; ++d) dst[d] += alpha * bt_row[d] + beta * in_j[d];
              if (lj.has_bias) hrow[net_.bias_offset(j) + s] += beta;
            }
          }
        }
      }
    }
  }

  const Net& net_;
  const double* theta_ = nullptr;
  ForwardWorkspace fw_;
  std::vector<Vector> delta_;
  std::vector<Vector> dl_dout_;
  std::vector<Matrix> hz_;
  std::vector<std::vector<Matrix>> b_, g_, k_;
  std::vector<std::vector<RowMatrix>> bt_;
};

double data_scale(const Dataset& data, const LossConfig& cfg) {
  return cfg.reduction == Reduction::mean ? 1.0 / static_cast<double>(data.size()) : 1.0;
}

}  // namespace

double loss(const Net& net, const ParamVector& theta, const Dataset& data, const LossConfig& cfg) {
  check_compatible(net, theta, data);
  ForwardWorkspace ws(net);
  const std::size_t out_dim = net.output_dim();
  double total = 0.0;
  for (Eigen::Index n = 0; n < data.inputs.rows(); ++n) {
    detail::forward_sample(net, theta.data(), data.inputs.row(n).data(), ws);
    const double* out = ws.activation(net.num_layers());
    const double* y = data.targets.row(n).data();
    double sample = 0.0;
    for (std::size_t k = 0; k < out_dim; ++k) {
      const double r = out[k] - y[k];
      sample += r * r;
    }
    total += sample;
  }
  return total * data_scale(data, cfg) + barrier_value(theta, cfg.barrier_c);
}

double loss_and_gradient(const Net& net, const ParamVector& theta, const Dataset& data,
                         const LossConfig& cfg, Vector& grad) {
  check_compatible(net, theta, data);
  Backprop bp(net, false);
  grad.setZero(theta.size());
  double total = 0.0;
  for (Eigen::Index n = 0; n < data.inputs.rows(); ++n) {
    total += bp.accumulate(theta.data(), data.inputs.row(n).data(), data.targets.row(n).data(),
                           grad.data(), nullptr);
  }
  const double scale = data_scale(data, cfg);
  if (scale != 1.0) grad *= scale;
  Vector barrier_grad;
  const double r = barrier_value(theta, cfg.barrier_c, &barrier_grad);
  if (std::isfinite(cfg.barrier_c)) grad += barrier_grad;
  return total * scale + r;
}

Vector gradient(const Net& net, const ParamVector& theta, const Dataset& data,
                const LossConfig& cfg) {
  Vector g;
  loss_and_gradient(net, theta, data, cfg, g);
  return g;
}

Matrix hessian(const Net& net, const ParamVector& theta, const Dataset& data,
               const LossConfig& cfg) {
  check_compatible(net, theta, data);
  const auto p = static_cast<Eigen::Index>(net.param_count());
  RowMatrix acc = RowMatrix::Zero(p, p);
  Backprop bp(net, true);
  for (Eigen::Index n = 0; n < data.inputs.rows(); ++n) {
    bp.accumulate(theta.data(), data.inputs.row(n).data(), data.targets.row(n).data(), nullptr,
                  acc.data());
  }
  const double scale = data_scale(data, cfg);
  Matrix h(p, p);
  for (Eigen::Index a = 0; a < p; ++a) {
    h(a, a) = acc(a, a) * scale;
    for (Eigen::Index b = a + 1; b < p; ++b) {
      h(a, b) = acc(a, b) * scale;
      h(b, a) = h(a, b);
    }
  }
  if (std::isfinite(cfg.barrier_c) && 0.5 * theta.squaredNorm() > cfg.barrier_c) {
    h += barrier(theta, cfg.barrier_c).hessian;
  }
  return h;
}

Vector symmetric_eigenvalues(const Matrix& h) {
  if (h.rows() != h.cols()) throw DimensionError("symmetric_eigenvalues: matrix must be square");
  if (h.size() == 0) return Vector();
  const Matrix sym = 0.5 * (h + h.transpose());
  const auto condition = [&] {
    if (!sym.allFinite()) return std::numeric_limits<double>::infinity();
    const double rcond = Eigen::PartialPivLU<Matrix>(sym).rcond();
    return rcond > 0.0 ? 1.0 / rcond : std::numeric_limits<double>::infinity();
  };
  if (!sym.allFinite()) {
    throw EigenSolverError("symmetric_eigenvalues: matrix has non-finite entries", condition());
  }
  Eigen::SelfAdjointEigenSolver<Matrix> solver(sym, Eigen::EigenvaluesOnly);
  if (solver.info() != Eigen::Success) {
    const double cond = condition();
    throw EigenSolverError(
        "symmetric_eigenvalues: QL iteration did not converge (condition estimate " +
            std::to_string(cond) + ")",
        cond);
  }
  return solver.eigenvalues();
}

Vector hessian_spectrum(const Net& net, const ParamVector& theta, const Dataset& data,
                        const LossConfig& cfg) {
  return symmetric_eigenvalues(hessian(net, theta, data, cfg));
}

Vector fd_gradient(const Net& net, const ParamVector& theta, const Dataset& data,
                   const LossConfig& cfg, double step) {
  return fd_gradient(MlpObjective(net, data, cfg), theta, step);
}

MlpObjective::MlpObjective(const Net& net, const Dataset& data, LossConfig cfg)
    : net_(net), data_(data), cfg_(cfg) {
  cfg_.validate();
  if (static_cast<std::size_t>(data_.inputs.cols()) != net_.input_dim() ||
      static_cast<std::size_t>(data_.targets.cols()) != net_.output_dim()) {
    throw DimensionError("MlpObjective: dataset shape does not match the net");
  }
}

double MlpObjective::loss(const Vector& theta) const {
  return gradflow::loss(net_, theta, data_, cfg_);
}

double MlpObjective::loss_gradient(const Vector& theta, Vector& grad) const {
  return loss_and_gradient(net_, theta, data_, cfg_, grad);
}

Matrix MlpObjective::hessian(const Vector& theta) const {
  return gradflow::hessian(net_, theta, data_, cfg_);
}

double MlpObjective::loss_roundoff(const Vector&, double loss) const {
  const double n = static_cast<double>(data_.size());
  return (2.0 * std::sqrt(n) + 4.0) * std::numeric_limits<double>::epsilon() * std::abs(loss);
}

}  // namespace gradflow
