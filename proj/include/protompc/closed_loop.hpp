#pragma once

// Closed-loop simulation: truth plant at a fine step, MPC at the control
// rate, optional online prototype adaptation.

#include "protompc/adaptation.hpp"
#include "protompc/nmpc.hpp"
#include "protompc/traj.hpp"
#include "protompc/wind.hpp"

#include <cmath>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace protompc {

enum class ControllerMode { kNominal, kProtoPI, kProtoNoPI, kFixedDecoder };

inline std::string to_string(ControllerMode m) {
  switch (m) {
    case ControllerMode::kNominal: return "nominal";
    case ControllerMode::kProtoPI: return "proto-pi";
    case ControllerMode::kProtoNoPI: return "proto-nopi";
    case ControllerMode::kFixedDecoder: return "fixed-decoder";
  }
  return "unknown";
}

inline ControllerMode parse_mode(const std::string& s) {
  if (s == "nominal") return ControllerMode::kNominal;
  if (s == "proto-pi") return ControllerMode::kProtoPI;
  if (s == "proto-nopi") return ControllerMode::kProtoNoPI;
  if (s == "fixed-decoder") return ControllerMode::kFixedDecoder;
  throw std::invalid_argument("unknown controller mode '" + s + "'");
}

struct LoopConfig {
  QuadParams quad;
  DragParams drag;
  WindField wind{ConstantWind{}};
  double sim_dt{0.002};
  double duration{0.0};  // <= 0 means the trajectory's final time
  MpcConfig mpc;
  AdaptConfig adapt;
  ControllerMode mode{ControllerMode::kNominal};
  DecoderMatrix fixed_decoder;
  // Zero-mean Gaussian dither added to the applied control (then clamped to
  // the actuator box). Used during data collection for input excitation.
  ControlVec excitation_std{ControlVec::Zero()};
  std::uint64_t excitation_seed{0};
};

struct RunLogRow {
  double t{0.0};
  StateVec x{StateVec::Zero()};
  ControlVec u{ControlVec::Zero()};
  StateVec ref{StateVec::Zero()};
  double cost{0.0};
  int iterations{0};
  double kkt{0.0};
  bool degraded{false};
};

struct AdaptLogRow {
  double t{0.0};
  Eigen::VectorXd risks;
  Eigen::VectorXd coords;
  bool evaluated{false};
  bool accepted{false};
  double kl{0.0};
};

struct RunLog {
  std::string mode;
  std::string wind;
  std::vector<RunLogRow> rows;
  std::vector<AdaptLogRow> adaptation;
  std::vector<TaskSample> transitions;

  double degraded_fraction() const {
    if (rows.empty()) return 0.0;
    std::size_t n = 0;
    for (const auto& r : rows) n += r.degraded ? 1 : 0;
    return static_cast<double>(n) / static_cast<double>(rows.size());
  }
};

/// Ground-truth task label: the prototype trained at the wind speed closest
/// to the local wind magnitude.
inline std::string privileged_label(const PrototypeSet& prototypes, const WindField& wind, const Vec3& p) {
  const int k = prototypes.nearest_speed(wind_at(wind, p).norm());
  if (k < 0) throw std::invalid_argument("privileged_label: no prototypes");
  return prototypes.task_ids[static_cast<std::size_t>(k)];
}

inline std::vector<RefSample> reference_window(const PiecewisePoly& traj, double t0, int horizon, double dt,
                                               const QuadParams& params) {
  std::vector<RefSample> refs;
  refs.reserve(static_cast<std::size_t>(horizon + 1));
  for (int k = 0; k <= horizon; ++k) refs.push_back(sample_ref(traj, t0 + k * dt, params));
  return refs;
}

/// Runs one closed-loop episode. `model` is required for every mode except
/// nominal.
inline RunLog control_loop(const PiecewisePoly& traj, const EpdModel* model, const LoopConfig& cfg) {
  cfg.quad.validate();
  cfg.mpc.validate();
  const bool proto = cfg.mode == ControllerMode::kProtoPI || cfg.mode == ControllerMode::kProtoNoPI;
  if (cfg.mode != ControllerMode::kNominal && model == nullptr) {
    throw std::invalid_argument("control_loop: mode '" + to_string(cfg.mode) + "' needs a trained model");
  }
  AdaptConfig adapt_cfg = cfg.adapt;
  adapt_cfg.privileged = cfg.mode == ControllerMode::kProtoPI;
  if (proto) adapt_cfg.validate(model->prototypes.size());

  const double ctrl_dt = cfg.mpc.dt;
  const int substeps = static_cast<int>(std::lround(ctrl_dt / cfg.sim_dt));
  if (substeps < 1 || std::abs(substeps * cfg.sim_dt - ctrl_dt) > 1e-12) {
    throw std::invalid_argument("control_loop: control period must be a multiple of the simulation step");
  }
  const double duration = cfg.duration > 0.0 ? cfg.duration : traj.final_time() - traj.start_time();
  const int steps = static_cast<int>(std::lround(duration / ctrl_dt));

  RunLog log;
  log.mode = to_string(cfg.mode);
  log.wind = describe(cfg.wind);
  log.rows.reserve(static_cast<std::size_t>(steps));

  AugmentedModel aug;
  aug.params = cfg.quad;
  if (model) {
    aug.encoder = &model->encoder;
    aug.target_scale = model->target_scale;
  }
  aug.decoder = model ? DecoderMatrix::zero(model->encoder.config.feature_dim) : DecoderMatrix{};
  if (cfg.mode == ControllerMode::kFixedDecoder) aug.decoder = cfg.fixed_decoder;

  DataBuffer buffer(adapt_cfg.buffer_size);
  SimplexCoord coord = proto ? SimplexCoord::uniform(model->prototypes.size()) : SimplexCoord{};
  if (proto) aug.decoder = interpolate_decoder(model->prototypes, coord);

  const TruthDisturbance disturbance{&cfg.wind, &cfg.drag};
  StateVec x = sample_ref(traj, traj.start_time(), cfg.quad).ref_state.to_vector();
  StateVec x_prev = x;
  ControlVec u_prev = hover_control(cfg.quad);
  std::optional<MpcSolution> prev_solution;
  const bool excite = (cfg.excitation_std.array() > 0.0).any();
  std::mt19937_64 rng(cfg.excitation_seed);
  std::normal_distribution<double> gauss(0.0, 1.0);

  for (int step = 0; step < steps; ++step) {
    const double t = step * ctrl_dt;
    if (step > 0) {
      const TaskSample s = make_sample(x_prev, u_prev, x, ctrl_dt, cfg.quad);
      log.transitions.push_back(s);
      buffer.push(s, t);
    }

    if (proto) {
      std::optional<std::string> label;
      if (adapt_cfg.privileged) label = privileged_label(model->prototypes, cfg.wind, x.segment<3>(kPosIdx));
      const AdaptResult ar =
          adapt_step(buffer, model->encoder, model->prototypes, adapt_cfg, coord, label, model->target_scale);
      coord = ar.coord;
      aug.decoder = ar.decoder;
      log.adaptation.push_back({t, ar.risks, ar.coord.a, ar.evaluated, ar.accepted, ar.kl});
    }

    const auto refs = reference_window(traj, traj.start_time() + t, cfg.mpc.horizon, ctrl_dt, cfg.quad);
    MpcSolution warm;
    if (prev_solution) warm.u_seq = shifted_controls(*prev_solution);
    const MpcSolution sol = mpc_solve(aug, x, refs, cfg.mpc, prev_solution ? &warm : nullptr);
    ControlVec u = sol.u_seq.front();
    if (excite) {
      for (int i = 0; i < kControlDim; ++i) u(i) += cfg.excitation_std(i) * gauss(rng);
      u = u.cwiseMax(cfg.mpc.u_min).cwiseMin(cfg.mpc.u_max);
    }

    RunLogRow row;
    row.t = t;
    row.x = x;
    row.u = u;
    row.ref = refs.front().ref_state.to_vector();
    row.cost = sol.cost;
    row.iterations = sol.iterations;
    row.kkt = sol.kkt_residual;
    row.degraded = sol.degraded;
    log.rows.push_back(row);

    x_prev = x;
    u_prev = u;
    for (int s = 0; s < substeps; ++s) x = rk4_step(x, u, cfg.sim_dt, cfg.quad, disturbance);
    prev_solution = sol;
  }
  // closing transition so that every applied control yields one sample
  log.transitions.push_back(make_sample(x_prev, u_prev, x, ctrl_dt, cfg.quad));
  return log;
}

struct AxisRmse {
  Vec3 rmse{Vec3::Zero()};
  std::size_t samples{0};
};

/// Per-axis position RMSE over rows with t >= start_window.
inline AxisRmse position_rmse(const std::vector<RunLogRow>& rows, double start_window = 0.5) {
  AxisRmse out;
  Vec3 acc = Vec3::Zero();
  for (const auto& r : rows) {
    if (r.t < start_window - 1e-12) continue;
    const Vec3 e = r.x.segment<3>(kPosIdx) - r.ref.segment<3>(kPosIdx);
    acc += e.cwiseProduct(e);
    ++out.samples;
  }
  if (out.samples > 0) out.rmse = (acc / static_cast<double>(out.samples)).cwiseSqrt();
  return out;
}

}  // namespace protompc
