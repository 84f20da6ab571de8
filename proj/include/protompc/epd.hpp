#pragma once

// Encoder-prototype-decoder residual model: empirical risk, ridge prototype
// fitting with a spectral-norm bound, achievability pretraining and the
// prototype-weighted encoder meta-update.

#include "protompc/mlp.hpp"
#include "protompc/quad_dynamics.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace protompc {

inline constexpr int kInputDim = kStateDim + kControlDim;
using InputVec = Eigen::Matrix<double, kInputDim, 1>;

struct TaskSample {
  InputVec x{InputVec::Zero()};
  Vec3 y{Vec3::Zero()};
};

struct TaskDataset {
  std::string task_id;
  double wind_speed{0.0};
  std::string wind;
  std::vector<TaskSample> samples;
};

class NonAchievableError : public std::runtime_error {
 public:
  NonAchievableError(std::string task, double risk, double r0)
      : std::runtime_error("task '" + task + "' not achievable: risk " + std::to_string(risk) +
                           " > R0 " + std::to_string(r0)),
        task_id(std::move(task)) {}
  std::string task_id;
};

/// Encoder input, concatenated in the order p, v, q, omega, f, M.
inline InputVec make_input(const StateVec& x, const ControlVec& u) {
  InputVec in;
  in << x, u;
  return in;
}

/// Residual force label from a logged transition: the part of the measured
/// acceleration not explained by thrust and gravity at the start state.
inline TaskSample make_sample(const StateVec& x_k, const ControlVec& u_k, const StateVec& x_next, double dt,
                              const QuadParams& params) {
  const Quaternion q = Quaternion::from_coeffs(x_k.segment<4>(kQuatIdx));
  const Vec3 dv = x_next.segment<3>(kVelIdx) - x_k.segment<3>(kVelIdx);
  TaskSample s;
  s.x = make_input(x_k, u_k);
  s.y = params.mass * dv / dt - u_k(0) * body_z(q) - params.mass * params.gravity_vector();
  return s;
}

struct DecoderMatrix {
  Eigen::Matrix<double, 3, Eigen::Dynamic> w;

  static DecoderMatrix zero(int p) { return {Eigen::Matrix<double, 3, Eigen::Dynamic>::Zero(3, p)}; }
  int feature_dim() const { return static_cast<int>(w.cols()); }
  double spectral_norm() const {
    if (w.size() == 0) return 0.0;
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(w);
    return svd.singularValues()(0);
  }
  bool is_zero() const { return (w.array() == 0.0).all(); }
};

struct PrototypeSet {
  std::vector<DecoderMatrix> decoders;
  std::vector<std::string> task_ids;
  std::vector<double> wind_speeds;

  std::size_t size() const { return decoders.size(); }

  int index_of(const std::string& task_id) const {
    for (std::size_t i = 0; i < task_ids.size(); ++i) {
      if (task_ids[i] == task_id) return static_cast<int>(i);
    }
    return -1;
  }

  /// Prototype whose training wind speed is closest to `speed`.
  int nearest_speed(double speed) const {
    int best = -1;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < wind_speeds.size(); ++i) {
      const double d = std::abs(wind_speeds[i] - speed);
      if (d < best_d) {
        best_d = d;
        best = static_cast<int>(i);
      }
    }
    return best;
  }
};

struct TrainConfig {
  double beta{0.4};
  double learning_rate{1e-3};
  double r0{0.05};
  double w0{10.0};
  int batch_size{256};
  double ridge{1e-6};
  int pretrain_max_iters{2000};   // per task and sweep
  int pretrain_max_sweeps{5};
  int meta_iterations{300};
  int smoothing_window{50};
  double input_std_floor{0.05};  // keeps near-constant input channels from dominating the features
  std::uint64_t seed{7};

  void validate() const {
    if (!(beta >= 0.0 && beta < 1.0)) throw std::invalid_argument("TrainConfig: beta must lie in [0,1)");
    if (!(learning_rate > 0.0) || !(r0 > 0.0) || !(w0 > 0.0) || !(ridge > 0.0) || !(input_std_floor > 0.0)) {
      throw std::invalid_argument("TrainConfig: learning_rate, r0, w0, ridge and input_std_floor must be positive");
    }
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
  }
};

/// Column-stacked samples: inputs is 17 x n, targets 3 x n.
struct Batch {
  Eigen::MatrixXd inputs;
  Eigen::Matrix<double, 3, Eigen::Dynamic> targets;

  Eigen::Index size() const { return inputs.cols(); }

  static Batch from(const std::vector<TaskSample>& samples) {
    Batch b;
    b.inputs.resize(kInputDim, static_cast<Eigen::Index>(samples.size()));
    b.targets.resize(3, static_cast<Eigen::Index>(samples.size()));
    for (std::size_t i = 0; i < samples.size(); ++i) {
      b.inputs.col(static_cast<Eigen::Index>(i)) = samples[i].x;
      b.targets.col(static_cast<Eigen::Index>(i)) = samples[i].y;
    }
    return b;
  }

  template <class Rng>
  static Batch sample(const std::vector<TaskSample>& samples, int n, Rng& rng) {
    if (samples.empty()) throw std::invalid_argument("Batch::sample: empty dataset");
    std::uniform_int_distribution<std::size_t> pick(0, samples.size() - 1);
    Batch b;
    b.inputs.resize(kInputDim, n);
    b.targets.resize(3, n);
    for (int i = 0; i < n; ++i) {
      const auto& s = samples[pick(rng)];
      b.inputs.col(i) = s.x;
      b.targets.col(i) = s.y;
    }
    return b;
  }
};

inline double risk_from_features(const DecoderMatrix& w, const Eigen::MatrixXd& features,
                                 const Eigen::Matrix<double, 3, Eigen::Dynamic>& targets) {
  if (targets.cols() == 0) throw std::invalid_argument("empirical_risk: empty batch");
  return (targets - w.w * features).colwise().squaredNorm().sum() / static_cast<double>(targets.cols());
}

/// (1/n) sum ||y_i - w phi(x_i)||^2
inline double empirical_risk(const DecoderMatrix& w, const EncoderParams& enc, const Batch& batch) {
  if (batch.size() == 0) throw std::invalid_argument("empirical_risk: empty batch");
  return risk_from_features(w, encoder_forward_batch(enc, batch.inputs).output(), batch.targets);
}

inline double empirical_risk(const DecoderMatrix& w, const EncoderParams& enc,
                             const std::vector<TaskSample>& samples) {
  if (samples.empty()) throw std::invalid_argument("empirical_risk: empty batch");
  return empirical_risk(w, enc, Batch::from(samples));
}

/// Scales singular values down to w0 (1 - 1e-3) when sigma_max >= w0.
inline DecoderMatrix clip_spectral_norm(const DecoderMatrix& d, double w0) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(d.w, Eigen::ComputeThinU | Eigen::ComputeThinV);
  if (svd.singularValues().size() == 0 || svd.singularValues()(0) < w0) return d;
  const double cap = w0 * (1.0 - 1e-3);
  const Eigen::VectorXd s = svd.singularValues().cwiseMin(cap);
  return {svd.matrixU() * s.asDiagonal() * svd.matrixV().transpose()};
}

/// Ridge least squares min_w sum ||y - w phi||^2 + lambda ||w||_F^2 on
/// precomputed features, followed by spectral clipping.
inline DecoderMatrix fit_decoder_features(const Eigen::MatrixXd& features,
                                          const Eigen::Matrix<double, 3, Eigen::Dynamic>& targets, double lambda,
                                          double w0) {
  const Eigen::Index p = features.rows();
  Eigen::MatrixXd gram = features * features.transpose();
  gram.diagonal().array() += lambda;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(gram);
  if (ldlt.info() != Eigen::Success || !(ldlt.vectorD().array() > 0.0).all()) {
    throw std::runtime_error("fit_decoder: singular Gram matrix");
  }
  const Eigen::MatrixXd rhs = features * targets.transpose();  // p x 3
  DecoderMatrix d{ldlt.solve(rhs).transpose()};
  if (!d.w.allFinite()) throw std::runtime_error("fit_decoder: non-finite solution");
  (void)p;
  return clip_spectral_norm(d, w0);
}

inline DecoderMatrix fit_decoder(const EncoderParams& enc, const Batch& batch, double lambda, double w0) {
  return fit_decoder_features(encoder_forward_batch(enc, batch.inputs).output(), batch.targets, lambda, w0);
}

/// Gradient of the empirical risk of decoder `w` with respect to theta.
inline GradBuffer risk_gradient(const DecoderMatrix& w, const EncoderParams& enc, const Batch& batch) {
  const Eigen::MatrixXd features = encoder_forward_batch(enc, batch.inputs).output();
  const Eigen::MatrixXd resid = batch.targets - w.w * features;
  const Eigen::MatrixXd cot = (-2.0 / static_cast<double>(batch.size())) * (w.w.transpose() * resid);
  return encoder_backward(enc, batch.inputs, cot);
}

/// (1 - beta) grad R_k(w_k) - beta * sum_{j != k} grad R_k(w_j), all risks on
/// the same task-k batch.
inline GradBuffer meta_direction(const EncoderParams& enc, const PrototypeSet& prototypes, std::size_t k,
                                 const Batch& batch, double beta) {
  if (!(beta >= 0.0 && beta < 1.0)) throw std::invalid_argument("meta_update_step: beta must lie in [0,1)");
  if (k >= prototypes.size()) throw std::out_of_range("meta_update_step: task index");
  GradBuffer dir = risk_gradient(prototypes.decoders[k], enc, batch);
  dir *= (1.0 - beta);
  GradBuffer others = GradBuffer::zeros_like(enc);
  for (std::size_t j = 0; j < prototypes.size(); ++j) {
    if (j == k) continue;
    others += risk_gradient(prototypes.decoders[j], enc, batch);
  }
  others *= beta;
  dir -= others;
  return dir;
}

inline void meta_update_step(EncoderParams& enc, const PrototypeSet& prototypes, std::size_t k, const Batch& batch,
                             double beta, double learning_rate) {
  apply_update(enc, meta_direction(enc, prototypes, k, batch, beta), -learning_rate);
}

inline constexpr int kPretrainCheckEvery = 10;

struct PretrainReport {
  std::vector<double> task_risks;
  std::vector<DecoderMatrix> decoders;
  int sweeps{0};
  int total_iterations{0};
};

/// Alternates closed-form decoder fits with encoder gradient steps, task by
/// task, until every task's full-data risk is at most r0 (checked every
/// kPretrainCheckEvery steps). Sweeps repeat while any task
/// fails the full-data check; exhausting the sweep budget throws
/// NonAchievableError naming the first failing task.
template <class Rng>
PretrainReport pretrain_achievable(EncoderParams& enc, const std::vector<TaskDataset>& datasets,
                                   const TrainConfig& cfg, Rng& rng) {
  if (datasets.empty()) throw std::invalid_argument("pretrain_achievable: no datasets");
  PretrainReport report;
  std::vector<Batch> full;
  for (const auto& d : datasets) full.push_back(Batch::from(d.samples));

  for (int sweep = 0; sweep < std::max(cfg.pretrain_max_sweeps, 1); ++sweep) {
    report.sweeps = sweep + 1;
    for (std::size_t k = 0; k < datasets.size(); ++k) {
      for (int it = 0; it < cfg.pretrain_max_iters; ++it) {
        if (it % kPretrainCheckEvery == 0) {
          const auto features = encoder_forward_batch(enc, full[k].inputs).output();
          const DecoderMatrix w = fit_decoder_features(features, full[k].targets, cfg.ridge, cfg.w0);
          if (risk_from_features(w, features, full[k].targets) <= cfg.r0) break;
        }
        const Batch batch = Batch::sample(datasets[k].samples, cfg.batch_size, rng);
        const auto features = encoder_forward_batch(enc, batch.inputs).output();
        const DecoderMatrix w = fit_decoder_features(features, batch.targets, cfg.ridge, cfg.w0);
        apply_update(enc, risk_gradient(w, enc, batch), -cfg.learning_rate);
        ++report.total_iterations;
      }
    }
    report.task_risks.clear();
    report.decoders.clear();
    bool all_ok = true;
    for (const auto& b : full) {
      const auto features = encoder_forward_batch(enc, b.inputs).output();
      report.decoders.push_back(fit_decoder_features(features, b.targets, cfg.ridge, cfg.w0));
      report.task_risks.push_back(risk_from_features(report.decoders.back(), features, b.targets));
      all_ok = all_ok && report.task_risks.back() <= cfg.r0;
    }
    if (all_ok) return report;
  }
  for (std::size_t k = 0; k < datasets.size(); ++k) {
    if (!(report.task_risks[k] <= cfg.r0)) {
      throw NonAchievableError(datasets[k].task_id, report.task_risks[k], cfg.r0);
    }
  }
  return report;
}

/// Trained residual model. Targets are divided per axis by `target_scale`
/// during training; predictions are scaled back.
struct EpdModel {
  EncoderParams encoder;
  PrototypeSet prototypes;
  Vec3 target_scale{Vec3::Ones()};
  TrainConfig train_config;
};

/// Per-axis standard deviation of the pooled targets.
inline Vec3 pooled_target_scale(const std::vector<TaskDataset>& datasets) {
  Vec3 sum = Vec3::Zero();
  Vec3 sq = Vec3::Zero();
  double n = 0.0;
  for (const auto& d : datasets) {
    for (const auto& s : d.samples) {
      sum += s.y;
      sq += s.y.cwiseProduct(s.y);
      n += 1.0;
    }
  }
  if (n == 0.0) return Vec3::Ones();
  const Vec3 mean = sum / n;
  Vec3 var = sq / n - mean.cwiseProduct(mean);
  return var.cwiseMax(0.0).cwiseSqrt().cwiseMax(1e-6);
}

inline std::vector<TaskDataset> whiten(const std::vector<TaskDataset>& datasets, const Vec3& scale) {
  std::vector<TaskDataset> out = datasets;
  for (auto& d : out) {
    for (auto& s : d.samples) s.y = s.y.cwiseQuotient(scale);
  }
  return out;
}

inline TaskSample whiten(TaskSample s, const Vec3& scale) {
  s.y = s.y.cwiseQuotient(scale);
  return s;
}

struct LossRecord {
  int iteration{0};
  std::size_t sampled_task{0};
  std::vector<double> task_risks;
  std::vector<double> smoothed;
};

struct TrainResult {
  EpdModel model;
  PretrainReport pretrain;
  std::vector<LossRecord> history;
  std::vector<double> final_risks;  // full-data risk of each prototype, whitened units
};

/// Pretraining followed by alternating prototype refits and meta-updates on
/// a uniformly sampled task. Final prototypes are refit on the full task
/// datasets.
inline TrainResult train(const std::vector<TaskDataset>& raw, const TrainConfig& cfg,
                         const EncoderConfig& enc_cfg = {}) {
  cfg.validate();
  if (raw.empty()) throw std::invalid_argument("train: need at least one dataset");
  for (const auto& d : raw) {
    if (d.samples.empty()) throw std::invalid_argument("train: dataset '" + d.task_id + "' is empty");
  }
  std::mt19937_64 rng(cfg.seed);
  TrainResult result;
  EpdModel& model = result.model;
  model.train_config = cfg;
  model.target_scale = pooled_target_scale(raw);
  const std::vector<TaskDataset> data = whiten(raw, model.target_scale);

  model.encoder = init_params(cfg.seed, enc_cfg);
  std::vector<TaskSample> pooled;
  for (const auto& d : data) pooled.insert(pooled.end(), d.samples.begin(), d.samples.end());
  model.encoder.normalizer = Normalizer::fit(Batch::from(pooled).inputs, cfg.input_std_floor);

  result.pretrain = pretrain_achievable(model.encoder, data, cfg, rng);

  auto& protos = model.prototypes;
  for (const auto& d : data) {
    protos.task_ids.push_back(d.task_id);
    protos.wind_speeds.push_back(d.wind_speed);
  }
  protos.decoders = result.pretrain.decoders;

  std::uniform_int_distribution<std::size_t> pick_task(0, data.size() - 1);
  std::vector<double> ema(data.size(), std::numeric_limits<double>::quiet_NaN());
  const double alpha = 2.0 / (std::max(cfg.smoothing_window, 1) + 1.0);
  for (int it = 0; it < cfg.meta_iterations; ++it) {
    std::vector<Batch> batches;
    LossRecord rec;
    rec.iteration = it;
    for (std::size_t j = 0; j < data.size(); ++j) {
      batches.push_back(Batch::sample(data[j].samples, cfg.batch_size, rng));
      const auto features = encoder_forward_batch(model.encoder, batches[j].inputs).output();
      protos.decoders[j] = fit_decoder_features(features, batches[j].targets, cfg.ridge, cfg.w0);
      rec.task_risks.push_back(risk_from_features(protos.decoders[j], features, batches[j].targets));
      ema[j] = std::isnan(ema[j]) ? rec.task_risks[j] : (1 - alpha) * ema[j] + alpha * rec.task_risks[j];
    }
    rec.smoothed = ema;
    rec.sampled_task = pick_task(rng);
    meta_update_step(model.encoder, protos, rec.sampled_task, batches[rec.sampled_task], cfg.beta,
                     cfg.learning_rate);
    result.history.push_back(std::move(rec));
  }

  for (std::size_t j = 0; j < data.size(); ++j) {
    const Batch b = Batch::from(data[j].samples);
    const auto features = encoder_forward_batch(model.encoder, b.inputs).output();
    protos.decoders[j] = fit_decoder_features(features, b.targets, cfg.ridge, cfg.w0);
    result.final_risks.push_back(risk_from_features(protos.decoders[j], features, b.targets));
  }
  return result;
}

/// Residual force (N, inertial) predicted by decoder `w` for the given state
/// and control.
inline Vec3 residual_predict(const EncoderParams& enc, const DecoderMatrix& w, const StateVec& x,
                             const ControlVec& u, const Vec3& target_scale = Vec3::Ones()) {
  return (w.w * encoder_forward(enc, make_input(x, u))).cwiseProduct(target_scale);
}

struct ErrorRow {
  std::string task_id;
  std::size_t index{0};
  Vec3 error{Vec3::Zero()};
};

/// Per-sample residual error under each task's own prototype, in whitened
/// units.
inline std::vector<ErrorRow> per_task_risk_dump(const EpdModel& model, const std::vector<TaskDataset>& datasets) {
  std::vector<ErrorRow> rows;
  for (const auto& d : datasets) {
    const int k = model.prototypes.index_of(d.task_id);
    if (k < 0) throw std::invalid_argument("per_task_risk_dump: no prototype for task '" + d.task_id + "'");
    if (d.samples.empty()) continue;
    const Batch b = Batch::from(d.samples);
    const auto features = encoder_forward_batch(model.encoder, b.inputs).output();
    const Eigen::MatrixXd pred = model.prototypes.decoders[static_cast<std::size_t>(k)].w * features;
    for (Eigen::Index i = 0; i < b.size(); ++i) {
      const Vec3 err = b.targets.col(i) - pred.col(i).cwiseProduct(model.target_scale);
      rows.push_back({d.task_id, static_cast<std::size_t>(i), err.cwiseQuotient(model.target_scale)});
    }
  }
  return rows;
}

}  // namespace protompc
