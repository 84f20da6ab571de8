#pragma once

// Feature encoder: a small tanh MLP with an input normalizer, exact
// reverse-mode parameter gradients and input Jacobians.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

namespace protompc {

struct EncoderConfig {
  int input_dim{17};
  std::vector<int> hidden_dims{64, 64};
  int feature_dim{16};

  int num_layers() const { return static_cast<int>(hidden_dims.size()) + 1; }
  int layer_in(int l) const { return l == 0 ? input_dim : hidden_dims[static_cast<std::size_t>(l - 1)]; }
  int layer_out(int l) const {
    return l == num_layers() - 1 ? feature_dim : hidden_dims[static_cast<std::size_t>(l)];
  }

  void validate() const {
    if (input_dim < 1 || feature_dim < 1) throw std::invalid_argument("EncoderConfig: dims must be >= 1");
    for (int h : hidden_dims) {
      if (h < 1) throw std::invalid_argument("EncoderConfig: hidden width must be >= 1");
    }
  }
};

/// Channelwise affine input normalization, x_n = (x - mean) / std.
struct Normalizer {
  Eigen::VectorXd mean;
  Eigen::VectorXd std;

  static Normalizer identity(int dim) {
    return {Eigen::VectorXd::Zero(dim), Eigen::VectorXd::Ones(dim)};
  }

  /// Statistics over the columns of `samples`; std is floored at `min_std`.
  static Normalizer fit(const Eigen::MatrixXd& samples, double min_std = 1e-3) {
    Normalizer n;
    const double count = static_cast<double>(samples.cols());
    n.mean = samples.rowwise().sum() / count;
    n.std = ((samples.colwise() - n.mean).array().square().rowwise().sum() / count).sqrt().matrix();
    n.std = n.std.cwiseMax(min_std);
    return n;
  }
};

struct EncoderParams {
  EncoderConfig config;
  std::vector<Eigen::MatrixXd> weights;  // weights[l] is out x in
  std::vector<Eigen::VectorXd> biases;
  Normalizer normalizer;

  std::size_t num_params() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < weights.size(); ++l) n += weights[l].size() + biases[l].size();
    return n;
  }

  /// Flat parameter access in layer order, weights (column-major) then bias.
  double& param(std::size_t idx) {
    for (std::size_t l = 0; l < weights.size(); ++l) {
      const auto nw = static_cast<std::size_t>(weights[l].size());
      if (idx < nw) return weights[l].data()[idx];
      idx -= nw;
      const auto nb = static_cast<std::size_t>(biases[l].size());
      if (idx < nb) return biases[l].data()[idx];
      idx -= nb;
    }
    throw std::out_of_range("EncoderParams::param");
  }
};

/// Same shapes as EncoderParams, holding dL/dtheta.
struct GradBuffer {
  std::vector<Eigen::MatrixXd> d_weights;
  std::vector<Eigen::VectorXd> d_biases;

  static GradBuffer zeros_like(const EncoderParams& p) {
    GradBuffer g;
    for (std::size_t l = 0; l < p.weights.size(); ++l) {
      g.d_weights.push_back(Eigen::MatrixXd::Zero(p.weights[l].rows(), p.weights[l].cols()));
      g.d_biases.push_back(Eigen::VectorXd::Zero(p.biases[l].size()));
    }
    return g;
  }

  GradBuffer& operator+=(const GradBuffer& o) {
    for (std::size_t l = 0; l < d_weights.size(); ++l) {
      d_weights[l] += o.d_weights[l];
      d_biases[l] += o.d_biases[l];
    }
    return *this;
  }

  GradBuffer& operator-=(const GradBuffer& o) {
    for (std::size_t l = 0; l < d_weights.size(); ++l) {
      d_weights[l] -= o.d_weights[l];
      d_biases[l] -= o.d_biases[l];
    }
    return *this;
  }

  GradBuffer& operator*=(double s) {
    for (std::size_t l = 0; l < d_weights.size(); ++l) {
      d_weights[l] *= s;
      d_biases[l] *= s;
    }
    return *this;
  }

  double flat(std::size_t idx) const {
    for (std::size_t l = 0; l < d_weights.size(); ++l) {
      const auto nw = static_cast<std::size_t>(d_weights[l].size());
      if (idx < nw) return d_weights[l].data()[idx];
      idx -= nw;
      const auto nb = static_cast<std::size_t>(d_biases[l].size());
      if (idx < nb) return d_biases[l].data()[idx];
      idx -= nb;
    }
    throw std::out_of_range("GradBuffer::flat");
  }

  bool same_shape(const EncoderParams& p) const {
    if (d_weights.size() != p.weights.size()) return false;
    for (std::size_t l = 0; l < d_weights.size(); ++l) {
      if (d_weights[l].rows() != p.weights[l].rows() || d_weights[l].cols() != p.weights[l].cols() ||
          d_biases[l].size() != p.biases[l].size()) {
        return false;
      }
    }
    return true;
  }
};

/// theta <- theta + scale * g
inline void apply_update(EncoderParams& params, const GradBuffer& g, double scale) {
  if (!g.same_shape(params)) throw std::invalid_argument("apply_update: shape mismatch");
  for (std::size_t l = 0; l < params.weights.size(); ++l) {
    params.weights[l] += scale * g.d_weights[l];
    params.biases[l] += scale * g.d_biases[l];
  }
}

/// Seeded initialization: N(0, 1/fan_in) weights, zero biases, identity
/// normalizer.
inline EncoderParams init_params(std::uint64_t seed, const EncoderConfig& config) {
  config.validate();
  std::mt19937_64 rng(seed);
  EncoderParams p;
  p.config = config;
  for (int l = 0; l < config.num_layers(); ++l) {
    const int in = config.layer_in(l);
    const int out = config.layer_out(l);
    std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(in)));
    Eigen::MatrixXd w(out, in);
    for (int c = 0; c < in; ++c) {
      for (int r = 0; r < out; ++r) w(r, c) = dist(rng);
    }
    p.weights.push_back(std::move(w));
    p.biases.push_back(Eigen::VectorXd::Zero(out));
  }
  p.normalizer = Normalizer::identity(config.input_dim);
  return p;
}

/// Layer activations for a batch (columns are samples). activations[0] is
/// the normalized input, activations[l+1] the output of layer l.
struct ForwardCache {
  std::vector<Eigen::MatrixXd> activations;

  const Eigen::MatrixXd& output() const { return activations.back(); }
};

inline ForwardCache encoder_forward_batch(const EncoderParams& params, const Eigen::MatrixXd& inputs) {
  if (inputs.rows() != params.config.input_dim) {
    throw std::invalid_argument("encoder_forward: input dimension mismatch");
  }
  ForwardCache cache;
  cache.activations.reserve(params.weights.size() + 1);
  cache.activations.push_back(
      ((inputs.colwise() - params.normalizer.mean).array().colwise() / params.normalizer.std.array()).matrix());
  const std::size_t last = params.weights.size() - 1;
  for (std::size_t l = 0; l < params.weights.size(); ++l) {
    Eigen::MatrixXd z = params.weights[l] * cache.activations.back();
    z.colwise() += params.biases[l];
    if (l != last) z = z.array().tanh().matrix();
    cache.activations.push_back(std::move(z));
  }
  if (!cache.output().allFinite()) throw std::runtime_error("encoder_forward: non-finite features");
  return cache;
}

inline Eigen::VectorXd encoder_forward(const EncoderParams& params, const Eigen::Ref<const Eigen::VectorXd>& x) {
  if (x.size() != params.config.input_dim) {
    throw std::invalid_argument("encoder_forward: input dimension mismatch");
  }
  Eigen::VectorXd h = (x - params.normalizer.mean).cwiseQuotient(params.normalizer.std);
  const std::size_t last = params.weights.size() - 1;
  for (std::size_t l = 0; l < params.weights.size(); ++l) {
    Eigen::VectorXd z = params.biases[l];
    z.noalias() += params.weights[l] * h;
    if (l != last) z = z.array().tanh().matrix();
    h = std::move(z);
  }
  if (!h.allFinite()) throw std::runtime_error("encoder_forward: non-finite features");
  return h;
}

/// Gradient of sum_i <cotangents_i, phi(inputs_i)> with respect to theta.
/// Any averaging belongs in the cotangents.
inline GradBuffer encoder_backward(const EncoderParams& params, const Eigen::MatrixXd& inputs,
                                   const Eigen::MatrixXd& cotangents) {
  if (cotangents.rows() != params.config.feature_dim || cotangents.cols() != inputs.cols()) {
    throw std::invalid_argument("encoder_backward: cotangent shape mismatch");
  }
  const ForwardCache cache = encoder_forward_batch(params, inputs);
  GradBuffer g = GradBuffer::zeros_like(params);
  Eigen::MatrixXd delta = cotangents;  // dL/dz for the current layer
  for (std::size_t l = params.weights.size(); l-- > 0;) {
    const Eigen::MatrixXd& a_in = cache.activations[l];
    g.d_weights[l].noalias() = delta * a_in.transpose();
    g.d_biases[l] = delta.rowwise().sum();
    if (l > 0) {
      Eigen::MatrixXd back = params.weights[l].transpose() * delta;
      delta = (back.array() * (1.0 - a_in.array().square())).matrix();
    }
  }
  return g;
}

/// Reverse-mode input Jacobian product at a single input: returns the m x
/// input_dim matrix whose row j is c_j^T dphi/dx for column c_j of
/// `cotangents` (p x m). Optionally also returns phi(x).
inline Eigen::MatrixXd encoder_input_vjp(const EncoderParams& params, const Eigen::Ref<const Eigen::VectorXd>& x,
                                         const Eigen::MatrixXd& cotangents, Eigen::VectorXd* features = nullptr) {
  if (x.size() != params.config.input_dim || cotangents.rows() != params.config.feature_dim) {
    throw std::invalid_argument("encoder_input_vjp: dimension mismatch");
  }
  const std::size_t n_layers = params.weights.size();
  std::vector<Eigen::VectorXd> acts;
  acts.reserve(n_layers + 1);
  acts.push_back((x - params.normalizer.mean).cwiseQuotient(params.normalizer.std));
  for (std::size_t l = 0; l < n_layers; ++l) {
    Eigen::VectorXd z = params.biases[l];
    z.noalias() += params.weights[l] * acts.back();
    if (l + 1 != n_layers) z = z.array().tanh().matrix();
    acts.push_back(std::move(z));
  }
  if (!acts.back().allFinite()) throw std::runtime_error("encoder_forward: non-finite features");
  if (features) *features = acts.back();

  Eigen::MatrixXd delta = cotangents;
  for (std::size_t l = n_layers; l-- > 0;) {
    Eigen::MatrixXd back = params.weights[l].transpose() * delta;
    if (l > 0) back.array().colwise() *= (1.0 - acts[l].array().square());
    delta = std::move(back);
  }
  delta.array().colwise() /= params.normalizer.std.array();
  return delta.transpose();
}

/// d phi / d x at a single input, including the normalizer scaling.
inline Eigen::MatrixXd encoder_input_jacobian(const EncoderParams& params, const Eigen::Ref<const Eigen::VectorXd>& x) {
  Eigen::VectorXd h = (x - params.normalizer.mean).cwiseQuotient(params.normalizer.std);
  Eigen::MatrixXd jac = params.normalizer.std.cwiseInverse().asDiagonal();
  const std::size_t last = params.weights.size() - 1;
  for (std::size_t l = 0; l < params.weights.size(); ++l) {
    Eigen::VectorXd z = params.weights[l] * h + params.biases[l];
    jac = params.weights[l] * jac;
    if (l != last) {
      z = z.array().tanh().matrix();
      jac = (1.0 - z.array().square()).matrix().asDiagonal() * jac;
    }
    h = std::move(z);
  }
  return jac;
}

}  // namespace protompc
