#pragma once

// Online decoder inference over the prototype simplex.

#include "protompc/epd.hpp"

#include <cmath>
#include <deque>
#include <optional>
#include <stdexcept>
#include <vector>

namespace protompc {

/// Fixed-capacity FIFO of the most recent transitions.
class DataBuffer {
 public:
  explicit DataBuffer(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw std::invalid_argument("DataBuffer: capacity must be positive");
  }

  void push(const TaskSample& s, double timestamp) {
    if (!times_.empty() && timestamp < times_.back()) {
      throw std::invalid_argument("DataBuffer: timestamps must be monotonic");
    }
    if (samples_.size() == capacity_) {
      samples_.pop_front();
      times_.pop_front();
    }
    samples_.push_back(s);
    times_.push_back(timestamp);
  }

  std::size_t size() const { return samples_.size(); }
  std::size_t capacity() const { return capacity_; }
  bool empty() const { return samples_.empty(); }
  const std::deque<TaskSample>& samples() const { return samples_; }
  const std::deque<double>& timestamps() const { return times_; }

  Batch to_batch(const Vec3& target_scale = Vec3::Ones()) const {
    Batch b;
    b.inputs.resize(kInputDim, static_cast<Eigen::Index>(samples_.size()));
    b.targets.resize(3, static_cast<Eigen::Index>(samples_.size()));
    Eigen::Index i = 0;
    for (const auto& s : samples_) {
      b.inputs.col(i) = s.x;
      b.targets.col(i) = s.y.cwiseQuotient(target_scale);
      ++i;
    }
    return b;
  }

 private:
  std::size_t capacity_;
  std::deque<TaskSample> samples_;
  std::deque<double> times_;
};

/// Convex coordinates over the prototype basis.
struct SimplexCoord {
  Eigen::VectorXd a;

  static SimplexCoord uniform(std::size_t n) {
    return {Eigen::VectorXd::Constant(static_cast<Eigen::Index>(n), 1.0 / static_cast<double>(n))};
  }
  static SimplexCoord one_hot(std::size_t n, std::size_t k) {
    SimplexCoord c{Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n))};
    c.a(static_cast<Eigen::Index>(k)) = 1.0;
    return c;
  }
  std::size_t size() const { return static_cast<std::size_t>(a.size()); }
  bool valid(double tol = 1e-12) const {
    return a.size() > 0 && (a.array() >= 0.0).all() && std::abs(a.sum() - 1.0) <= tol;
  }
  Eigen::Index argmax() const {
    Eigen::Index k = 0;
    a.maxCoeff(&k);
    return k;
  }
};

struct AdaptConfig {
  double gamma{5.0};
  double d0{0.1};
  std::size_t buffer_size{50};
  bool privileged{false};

  void validate(std::size_t n_prototypes) const {
    if (!(gamma > 0.0)) throw std::invalid_argument("AdaptConfig: gamma must be positive");
    if (!(d0 >= 0.0) || (n_prototypes > 1 && !(d0 < std::log(static_cast<double>(n_prototypes))))) {
      throw std::invalid_argument("AdaptConfig: D0 must lie in [0, log N)");
    }
    if (buffer_size == 0) throw std::invalid_argument("AdaptConfig: buffer size must be positive");
  }
};

/// a_k proportional to exp(-gamma r_k), evaluated with a max shift.
inline SimplexCoord boltzmann_from_risks(const Eigen::VectorXd& risks, double gamma) {
  const Eigen::VectorXd logits = -gamma * risks;
  const double shift = logits.maxCoeff();
  // scalar exp: Eigen's packet exp clamps deep underflow to a tiny nonzero
  // value, which breaks monotonicity between underflowing entries
  Eigen::VectorXd e = (logits.array() - shift).unaryExpr([](double v) { return std::exp(v); }).matrix();
  return {e / e.sum()};
}

inline Eigen::VectorXd prototype_risks(const Batch& batch, const EncoderParams& enc, const PrototypeSet& prototypes) {
  if (batch.size() == 0) throw std::invalid_argument("boltzmann_coords: empty buffer");
  const Eigen::MatrixXd features = encoder_forward_batch(enc, batch.inputs).output();
  Eigen::VectorXd r(static_cast<Eigen::Index>(prototypes.size()));
  for (std::size_t k = 0; k < prototypes.size(); ++k) {
    r(static_cast<Eigen::Index>(k)) = risk_from_features(prototypes.decoders[k], features, batch.targets);
  }
  return r;
}

inline SimplexCoord boltzmann_coords(const DataBuffer& buffer, const EncoderParams& enc,
                                     const PrototypeSet& prototypes, double gamma,
                                     const Vec3& target_scale = Vec3::Ones()) {
  if (buffer.empty()) throw std::invalid_argument("boltzmann_coords: empty buffer");
  return boltzmann_from_risks(prototype_risks(buffer.to_batch(target_scale), enc, prototypes), gamma);
}

/// KL(a || uniform) = log N + sum a_i log a_i, with 0 log 0 = 0.
inline double kl_to_uniform(const SimplexCoord& c) {
  double neg_entropy = 0.0;
  for (Eigen::Index i = 0; i < c.a.size(); ++i) {
    if (c.a(i) > 0.0) neg_entropy += c.a(i) * std::log(c.a(i));
  }
  return std::log(static_cast<double>(c.a.size())) + neg_entropy;
}

inline bool accept(const SimplexCoord& c, double d0) { return kl_to_uniform(c) > d0; }

inline DecoderMatrix interpolate_decoder(const PrototypeSet& prototypes, const SimplexCoord& c) {
  if (c.size() != prototypes.size() || prototypes.size() == 0) {
    throw std::invalid_argument("interpolate_decoder: coordinate/prototype count mismatch");
  }
  DecoderMatrix out = DecoderMatrix::zero(prototypes.decoders.front().feature_dim());
  for (std::size_t k = 0; k < prototypes.size(); ++k) out.w += c.a(static_cast<Eigen::Index>(k)) * prototypes.decoders[k].w;
  return out;
}

struct AdaptResult {
  SimplexCoord coord;
  DecoderMatrix decoder;
  Eigen::VectorXd risks;  // empty when not evaluated
  SimplexCoord empirical;
  double kl{0.0};
  bool evaluated{false};
  bool accepted{false};
};

/// One adaptation step. With a privileged task label the matching prototype
/// is used directly; otherwise Boltzmann coordinates from the buffer replace
/// the previous ones only if they are far enough from uniform.
inline AdaptResult adapt_step(const DataBuffer& buffer, const EncoderParams& enc, const PrototypeSet& prototypes,
                              const AdaptConfig& cfg, const SimplexCoord& previous,
                              std::optional<std::string> pi_label = std::nullopt,
                              const Vec3& target_scale = Vec3::Ones()) {
  if (prototypes.size() == 0) throw std::invalid_argument("adapt_step: no prototypes");
  if (previous.size() != prototypes.size()) throw std::invalid_argument("adapt_step: previous coordinate size");
  AdaptResult r;
  if (cfg.privileged) {
    if (!pi_label) throw std::invalid_argument("adapt_step: privileged mode requires a task label");
    const int k = prototypes.index_of(*pi_label);
    if (k < 0) throw std::invalid_argument("adapt_step: unknown task label '" + *pi_label + "'");
    r.coord = SimplexCoord::one_hot(prototypes.size(), static_cast<std::size_t>(k));
    r.decoder = prototypes.decoders[static_cast<std::size_t>(k)];
    r.empirical = r.coord;
    r.kl = kl_to_uniform(r.coord);
    r.accepted = true;
    return r;
  }
  r.coord = previous;
  r.empirical = previous;
  if (2 * buffer.size() >= cfg.buffer_size && !buffer.empty()) {
    r.risks = prototype_risks(buffer.to_batch(target_scale), enc, prototypes);
    r.empirical = boltzmann_from_risks(r.risks, cfg.gamma);
    r.kl = kl_to_uniform(r.empirical);
    r.evaluated = true;
    r.accepted = r.kl > cfg.d0;
    if (r.accepted) r.coord = r.empirical;
  }
  r.decoder = interpolate_decoder(prototypes, r.coord);
  return r;
}

}  // namespace protompc
