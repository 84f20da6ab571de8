#pragma once

// Experiment orchestration behind the command-line tool: data collection,
// training, constant- and spatial-wind evaluation, the beta sweep and the
// report writers. Every report is regenerated from persisted run logs.

#include "protompc/io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace protompc {

namespace fs = std::filesystem;

struct ExperimentConfig {
  std::uint64_t seed{7};
  QuadParams quad;
  DragParams drag{0.03, Vec3(0.05, 0.05, 0.025)};
  std::string trajectory{"training"};
  std::vector<double> training_speeds{2.0, 4.0, 6.0};
  std::vector<double> eval_speeds{0.0, 2.0, 4.0, 6.0, 8.0, 10.0};
  std::vector<std::string> test_trajectories{"figure-eight", "helix", "slalom"};
  AnalyticRampWind spatial_wind{0, 0.0, 10.0, 8.0, 0.0};
  double sim_dt{0.002};
  // Control dither (f, Mx, My, Mz) applied only while collecting data.
  ControlVec collect_excitation_std{1.0, 0.05, 0.05, 0.05};
  double rmse_start_window{0.5};
  double max_degraded_fraction{0.2};
  double concentration_after{2.0};
  std::vector<double> beta_sweep{0.0, 0.2, 0.4, 0.6};
  TrainConfig train;
  EncoderConfig encoder;
  AdaptConfig adapt;
  MpcConfig mpc{default_mpc_config(QuadParams{})};

  void validate() const {
    quad.validate();
    train.validate();
    encoder.validate();
    mpc.validate();
    adapt.validate(training_speeds.size());
    if (training_speeds.empty()) throw std::invalid_argument("config: training_speeds must not be empty");
    for (double s : training_speeds) {
      if (!(s >= 0.0) || !std::isfinite(s)) throw std::invalid_argument("config: training speeds must be finite and >= 0");
    }
    if (!(sim_dt > 0.0)) throw std::invalid_argument("config: sim_dt must be positive");
    if ((collect_excitation_std.array() < 0.0).any()) {
      throw std::invalid_argument("config: collect_excitation_std must be nonnegative");
    }
  }
};

inline std::string speed_tag(double s) {
  std::ostringstream os;
  os << s;
  std::string t = os.str();
  std::replace(t.begin(), t.end(), '.', 'p');
  return t;
}

inline std::string task_id_for_speed(double s) { return "wind_" + speed_tag(s); }

// --- config JSON ---------------------------------------------------------------

namespace detail {

template <int N>
nlohmann::json vec_json(const Eigen::Matrix<double, N, 1>& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

template <int N>
void read_vec(const nlohmann::json& j, const char* key, Eigen::Matrix<double, N, 1>& v) {
  if (!j.contains(key)) return;
  const auto x = j.at(key).get<std::vector<double>>();
  if (static_cast<int>(x.size()) != N) throw FormatError(std::string("config: '") + key + "' has wrong length");
  for (int i = 0; i < N; ++i) v(i) = x[static_cast<std::size_t>(i)];
}

template <class T>
void read(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  using detail::vec_json;
  return {
      {"seed", c.seed},
      {"quad", {{"mass", c.quad.mass}, {"inertia", vec_json(c.quad.inertia_diag)}, {"gravity", c.quad.gravity}}},
      {"drag", {{"c_quad", c.drag.c_quad}, {"c_lin", vec_json(c.drag.c_lin)}}},
      {"trajectory", c.trajectory},
      {"training_speeds", c.training_speeds},
      {"eval_speeds", c.eval_speeds},
      {"test_trajectories", c.test_trajectories},
      {"spatial_wind",
       {{"axis", c.spatial_wind.axis},
        {"v_min", c.spatial_wind.v_min},
        {"v_max", c.spatial_wind.v_max},
        {"period", c.spatial_wind.period},
        {"phase", c.spatial_wind.phase}}},
      {"sim_dt", c.sim_dt},
      {"collect_excitation_std", vec_json(c.collect_excitation_std)},
      {"rmse_start_window", c.rmse_start_window},
      {"max_degraded_fraction", c.max_degraded_fraction},
      {"concentration_after", c.concentration_after},
      {"beta_sweep", c.beta_sweep},
      {"train",
       {{"beta", c.train.beta},
        {"learning_rate", c.train.learning_rate},
        {"r0", c.train.r0},
        {"w0", c.train.w0},
        {"batch_size", c.train.batch_size},
        {"ridge", c.train.ridge},
        {"pretrain_max_iters", c.train.pretrain_max_iters},
        {"pretrain_max_sweeps", c.train.pretrain_max_sweeps},
        {"meta_iterations", c.train.meta_iterations},
        {"smoothing_window", c.train.smoothing_window},
        {"input_std_floor", c.train.input_std_floor}}},
      {"encoder", {{"hidden_dims", c.encoder.hidden_dims}, {"feature_dim", c.encoder.feature_dim}}},
      {"adapt", {{"gamma", c.adapt.gamma}, {"d0", c.adapt.d0}, {"buffer_size", c.adapt.buffer_size}}},
      {"mpc",
       {{"horizon", c.mpc.horizon},
        {"dt", c.mpc.dt},
        {"q", vec_json(c.mpc.q)},
        {"r", vec_json(c.mpc.r)},
        {"q_terminal", vec_json(c.mpc.q_terminal)},
        {"u_min", vec_json(c.mpc.u_min)},
        {"u_max", vec_json(c.mpc.u_max)},
        {"max_iterations", c.mpc.max_iterations},
        {"kkt_tolerance", c.mpc.kkt_tolerance},
        {"max_line_search", c.mpc.max_line_search}}},
  };
}

/// Missing keys keep their defaults; present keys must have the right type.
inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  using detail::read;
  using detail::read_vec;
  ExperimentConfig c;
  try {
    read(j, "seed", c.seed);
    if (j.contains("quad")) {
      const auto& q = j.at("quad");
      read(q, "mass", c.quad.mass);
      read_vec(q, "inertia", c.quad.inertia_diag);
      read(q, "gravity", c.quad.gravity);
    }
    c.mpc = default_mpc_config(c.quad);
    if (j.contains("drag")) {
      read(j.at("drag"), "c_quad", c.drag.c_quad);
      read_vec(j.at("drag"), "c_lin", c.drag.c_lin);
    }
    read(j, "trajectory", c.trajectory);
    read(j, "training_speeds", c.training_speeds);
    read(j, "eval_speeds", c.eval_speeds);
    read(j, "test_trajectories", c.test_trajectories);
    if (j.contains("spatial_wind")) {
      const auto& w = j.at("spatial_wind");
      read(w, "axis", c.spatial_wind.axis);
      read(w, "v_min", c.spatial_wind.v_min);
      read(w, "v_max", c.spatial_wind.v_max);
      read(w, "period", c.spatial_wind.period);
      read(w, "phase", c.spatial_wind.phase);
      if (c.spatial_wind.axis < 0 || c.spatial_wind.axis > 2 || !(c.spatial_wind.period > 0.0)) {
        throw FormatError("config: spatial_wind needs axis in 0..2 and a positive period");
      }
    }
    read(j, "sim_dt", c.sim_dt);
    read_vec(j, "collect_excitation_std", c.collect_excitation_std);
    read(j, "rmse_start_window", c.rmse_start_window);
    read(j, "max_degraded_fraction", c.max_degraded_fraction);
    read(j, "concentration_after", c.concentration_after);
    read(j, "beta_sweep", c.beta_sweep);
    if (j.contains("train")) {
      const auto& t = j.at("train");
      read(t, "beta", c.train.beta);
      read(t, "learning_rate", c.train.learning_rate);
      read(t, "r0", c.train.r0);
      read(t, "w0", c.train.w0);
      read(t, "batch_size", c.train.batch_size);
      read(t, "ridge", c.train.ridge);
      read(t, "pretrain_max_iters", c.train.pretrain_max_iters);
      read(t, "pretrain_max_sweeps", c.train.pretrain_max_sweeps);
      read(t, "meta_iterations", c.train.meta_iterations);
      read(t, "smoothing_window", c.train.smoothing_window);
      read(t, "input_std_floor", c.train.input_std_floor);
    }
    if (j.contains("encoder")) {
      read(j.at("encoder"), "hidden_dims", c.encoder.hidden_dims);
      read(j.at("encoder"), "feature_dim", c.encoder.feature_dim);
    }
    if (j.contains("adapt")) {
      read(j.at("adapt"), "gamma", c.adapt.gamma);
      read(j.at("adapt"), "d0", c.adapt.d0);
      read(j.at("adapt"), "buffer_size", c.adapt.buffer_size);
    }
    if (j.contains("mpc")) {
      const auto& m = j.at("mpc");
      read(m, "horizon", c.mpc.horizon);
      read(m, "dt", c.mpc.dt);
      read_vec(m, "q", c.mpc.q);
      read_vec(m, "r", c.mpc.r);
      read_vec(m, "q_terminal", c.mpc.q_terminal);
      read_vec(m, "u_min", c.mpc.u_min);
      read_vec(m, "u_max", c.mpc.u_max);
      read(m, "max_iterations", c.mpc.max_iterations);
      read(m, "kkt_tolerance", c.mpc.kkt_tolerance);
      read(m, "max_line_search", c.mpc.max_line_search);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("config: ") + e.what());
  }
  c.train.seed = c.seed;
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config '" + path.string() + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

inline void set_seed(ExperimentConfig& c, std::uint64_t seed) {
  c.seed = seed;
  c.train.seed = seed;
}

// --- shared helpers ------------------------------------------------------------

inline LoopConfig loop_config(const ExperimentConfig& c, const WindField& wind, ControllerMode mode) {
  LoopConfig lc;
  lc.quad = c.quad;
  lc.drag = c.drag;
  lc.wind = wind;
  lc.sim_dt = c.sim_dt;
  lc.mpc = c.mpc;
  lc.adapt = c.adapt;
  lc.mode = mode;
  return lc;
}

inline ConstantWind side_wind(double speed) { return ConstantWind{Vec3(speed, 0.0, 0.0)}; }

inline PiecewisePoly build_trajectory(const std::string& name) { return min_snap_solve(trajectories::by_name(name)); }

/// Signed per-axis position error for every logged step at or after `start`.
inline std::vector<Vec3> position_errors(const std::vector<RunLogRow>& rows, double start) {
  std::vector<Vec3> out;
  for (const auto& r : rows) {
    if (r.t < start - 1e-12) continue;
    out.push_back(r.x.segment<3>(kPosIdx) - r.ref.segment<3>(kPosIdx));
  }
  return out;
}

/// Quantile with linear interpolation between order statistics.
inline double quantile(std::vector<double> v, double q) {
  if (v.empty()) throw std::invalid_argument("quantile: empty sample");
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

inline double interquartile_range(const std::vector<double>& v) { return quantile(v, 0.75) - quantile(v, 0.25); }

/// Fraction of accepted adaptation steps at or after `after` whose argmax
/// coordinate is prototype `k`. Returns {fraction, accepted steps}.
inline std::pair<double, std::size_t> concentration(const RunLog& log, Eigen::Index k, double after) {
  std::size_t accepted = 0, hits = 0;
  for (const auto& a : log.adaptation) {
    if (!a.accepted || a.t < after - 1e-12) continue;
    ++accepted;
    Eigen::Index arg = 0;
    a.coords.maxCoeff(&arg);
    hits += arg == k ? 1 : 0;
  }
  return {accepted ? static_cast<double>(hits) / static_cast<double>(accepted) : 0.0, accepted};
}

// --- RMSE between a log and an external reference -------------------------------

struct ReferenceSample {
  double t{0.0};
  Vec3 p{Vec3::Zero()};
};

/// Reads `t,px,py,pz,...` (extra columns ignored), e.g. a trajectory export.
inline std::vector<ReferenceSample> read_reference_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open reference '" + path.string() + "'");
  std::string line;
  std::getline(in, line);
  std::vector<ReferenceSample> out;
  std::size_t n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    const auto c = split_csv_line(line);
    const std::string where = path.string() + ":" + std::to_string(n);
    if (c.size() < 4) throw FormatError(where + ": need t,px,py,pz");
    out.push_back({parse_double(c[0], where),
                   Vec3(parse_double(c[1], where), parse_double(c[2], where), parse_double(c[3], where))});
  }
  return out;
}

/// Per-axis RMSE of logged positions against reference samples with the
/// same timestamps, excluding t < start.
inline AxisRmse rmse_against(const std::vector<RunLogRow>& rows, const std::vector<ReferenceSample>& ref, double start) {
  if (rows.size() != ref.size()) throw std::invalid_argument("rmse: log and reference have different lengths");
  std::vector<RunLogRow> aligned = rows;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (std::abs(rows[i].t - ref[i].t) > 1e-9) {
      throw std::invalid_argument("rmse: misaligned timestamps at row " + std::to_string(i));
    }
    aligned[i].ref.segment<3>(kPosIdx) = ref[i].p;
  }
  return position_rmse(aligned, start);
}

// --- collect -------------------------------------------------------------------

struct CollectSummary {
  std::vector<fs::path> files;
  std::vector<double> degraded;
};

/// Nominal-MPC flights on the training trajectory, one dataset per training
/// wind speed. The applied controls carry a small seeded dither so that the
/// data excites the control channels.
inline CollectSummary cmd_collect(const ExperimentConfig& c, const fs::path& out) {
  c.validate();
  const PiecewisePoly traj = build_trajectory(c.trajectory);
  CollectSummary summary;
  for (std::size_t k = 0; k < c.training_speeds.size(); ++k) {
    const double s = c.training_speeds[k];
    LoopConfig lc = loop_config(c, side_wind(s), ControllerMode::kNominal);
    lc.excitation_std = c.collect_excitation_std;
    lc.excitation_seed = c.seed * 1000003ULL + k;
    const RunLog log = control_loop(traj, nullptr, lc);
    if (log.degraded_fraction() > c.max_degraded_fraction) {
      throw std::runtime_error("collect: " + std::to_string(100.0 * log.degraded_fraction()) +
                               "% of solves degraded at wind " + speed_tag(s) + " m/s (limit " +
                               std::to_string(100.0 * c.max_degraded_fraction) + "%)");
    }
    TaskDataset d;
    d.task_id = task_id_for_speed(s);
    d.wind_speed = s;
    d.samples = log.transitions;
    const fs::path file = out / "data" / (d.task_id + ".csv");
    write_dataset_csv(file, d);
    write_runlog_csv(out / "data" / ("flight_" + d.task_id + ".csv"), log);
    summary.files.push_back(file);
    summary.degraded.push_back(log.degraded_fraction());
  }
  return summary;
}

inline std::vector<TaskDataset> load_datasets(const ExperimentConfig& c, const fs::path& out) {
  std::vector<TaskDataset> data;
  for (double s : c.training_speeds) {
    const fs::path file = out / "data" / (task_id_for_speed(s) + ".csv");
    if (!fs::exists(file)) throw std::runtime_error("missing dataset '" + file.string() + "'; run collect first");
    TaskDataset d = read_dataset_csv(file);
    if (d.task_id != task_id_for_speed(s)) throw FormatError(file.string() + ": unexpected task id " + d.task_id);
    d.wind_speed = s;
    data.push_back(std::move(d));
  }
  return data;
}

// --- train ---------------------------------------------------------------------

inline void write_loss_history(const fs::path& path, const TrainResult& tr) {
  auto out = open_for_write(path);
  out << "iteration,sampled_task";
  for (const auto& id : tr.model.prototypes.task_ids) out << ",risk_" << id;
  for (const auto& id : tr.model.prototypes.task_ids) out << ",smoothed_" << id;
  out << '\n';
  for (const auto& r : tr.history) {
    out << r.iteration << ',' << tr.model.prototypes.task_ids[r.sampled_task];
    for (double v : r.task_risks) out << ',' << fmt_double(v);
    for (double v : r.smoothed) out << ',' << fmt_double(v);
    out << '\n';
  }
}

/// Measured vs predicted residual force (N) for every sample under its own
/// task's prototype.
inline void write_validation(const fs::path& path, const EpdModel& m, const std::vector<TaskDataset>& data) {
  auto out = open_for_write(path);
  out << "task_id,index,yx,yy,yz,pred_x,pred_y,pred_z\n";
  for (const auto& d : data) {
    const int k = m.prototypes.index_of(d.task_id);
    const Batch b = Batch::from(d.samples);
    const Eigen::MatrixXd pred =
        m.target_scale.asDiagonal() * (m.prototypes.decoders[static_cast<std::size_t>(k)].w *
                                       encoder_forward_batch(m.encoder, b.inputs).output());
    for (Eigen::Index i = 0; i < b.size(); ++i) {
      out << d.task_id << ',' << i;
      for (int a = 0; a < 3; ++a) out << ',' << fmt_double(b.targets(a, i));
      for (int a = 0; a < 3; ++a) out << ',' << fmt_double(pred(a, i));
      out << '\n';
    }
  }
}

inline void write_risk_dump(const fs::path& path, const std::vector<ErrorRow>& rows) {
  auto out = open_for_write(path);
  out << "task_id,index,ex,ey,ez\n";
  for (const auto& r : rows) {
    out << r.task_id << ',' << r.index << ',' << fmt_double(r.error.x()) << ',' << fmt_double(r.error.y()) << ','
        << fmt_double(r.error.z()) << '\n';
  }
}

inline nlohmann::json train_report_json(const TrainResult& tr) {
  nlohmann::json tasks = nlohmann::json::array();
  for (std::size_t k = 0; k < tr.model.prototypes.size(); ++k) {
    tasks.push_back({{"task_id", tr.model.prototypes.task_ids[k]},
                     {"pretrain_risk", tr.pretrain.task_risks[k]},
                     {"final_risk", tr.final_risks[k]},
                     {"decoder_spectral_norm", tr.model.prototypes.decoders[k].spectral_norm()}});
  }
  return {{"r0", tr.model.train_config.r0},
          {"beta", tr.model.train_config.beta},
          {"pretrain_sweeps", tr.pretrain.sweeps},
          {"pretrain_iterations", tr.pretrain.total_iterations},
          {"meta_iterations", tr.model.train_config.meta_iterations},
          {"tasks", tasks}};
}

inline TrainResult cmd_train(const ExperimentConfig& c, const fs::path& out, const fs::path& model_path) {
  c.validate();
  const auto data = load_datasets(c, out);
  TrainResult tr = train(data, c.train, c.encoder);
  save_model(model_path, tr.model);
  const fs::path dir = out / "train";
  write_loss_history(dir / "loss_history.csv", tr);
  write_validation(dir / "validation.csv", tr.model, data);
  write_risk_dump(dir / "risk_dump.csv", per_task_risk_dump(tr.model, data));
  open_for_write(dir / "train_report.json") << train_report_json(tr).dump(1) << '\n';
  return tr;
}

// --- constant-wind evaluation --------------------------------------------------

inline const std::vector<ControllerMode>& eval_modes() {
  static const std::vector<ControllerMode> modes = {ControllerMode::kNominal, ControllerMode::kProtoPI,
                                                    ControllerMode::kProtoNoPI};
  return modes;
}

inline std::string static_run_name(ControllerMode m, double speed) {
  return to_string(m) + "_wind_" + speed_tag(speed);
}

struct RmseEntry {
  std::string mode;
  std::string condition;  // wind speed tag or trajectory name
  AxisRmse rmse;
  double degraded{0.0};
};

inline std::string rmse_table_csv(const std::vector<RmseEntry>& entries) {
  std::ostringstream os;
  os << "condition,mode,rmse_x,rmse_y,rmse_z,samples,degraded_fraction\n";
  for (const auto& e : entries) {
    os << e.condition << ',' << e.mode << ',' << fmt_double(e.rmse.rmse.x()) << ',' << fmt_double(e.rmse.rmse.y())
       << ',' << fmt_double(e.rmse.rmse.z()) << ',' << e.rmse.samples << ',' << fmt_double(e.degraded) << '\n';
  }
  return os.str();
}

/// Rows are controller modes, columns conditions; each cell is x/y/z RMSE.
inline std::string rmse_table_text(const std::vector<RmseEntry>& entries, const std::string& title) {
  std::vector<std::string> conds, modes;
  for (const auto& e : entries) {
    if (std::find(conds.begin(), conds.end(), e.condition) == conds.end()) conds.push_back(e.condition);
    if (std::find(modes.begin(), modes.end(), e.mode) == modes.end()) modes.push_back(e.mode);
  }
  std::ostringstream os;
  os << title << '\n';
  os << std::left << std::setw(14) << "mode" << std::setw(6) << "axis";
  for (const auto& c : conds) os << std::right << std::setw(10) << c;
  os << '\n';
  for (const auto& m : modes) {
    for (int a = 0; a < 3; ++a) {
      os << std::left << std::setw(14) << (a == 0 ? m : "") << std::setw(6) << std::string(1, "xyz"[a]);
      for (const auto& c : conds) {
        auto it = std::find_if(entries.begin(), entries.end(),
                               [&](const RmseEntry& e) { return e.mode == m && e.condition == c; });
        std::ostringstream cell;
        if (it != entries.end()) cell << std::fixed << std::setprecision(3) << it->rmse.rmse(a);
        os << std::right << std::setw(10) << cell.str();
      }
      os << '\n';
    }
  }
  return os.str();
}

inline double degraded_fraction(const std::vector<RunLogRow>& rows) {
  if (rows.empty()) return 0.0;
  std::size_t n = 0;
  for (const auto& r : rows) n += r.degraded ? 1 : 0;
  return static_cast<double>(n) / static_cast<double>(rows.size());
}

/// Rebuilds the constant-wind table purely from the persisted run logs.
inline std::vector<RmseEntry> static_report_from_logs(const ExperimentConfig& c, const fs::path& dir) {
  std::vector<RmseEntry> entries;
  for (double s : c.eval_speeds) {
    for (ControllerMode m : eval_modes()) {
      const auto rows = read_runlog_csv(dir / "runs" / (static_run_name(m, s) + ".csv"));
      entries.push_back({to_string(m), speed_tag(s), position_rmse(rows, c.rmse_start_window), degraded_fraction(rows)});
    }
  }
  return entries;
}

inline void write_static_report(const ExperimentConfig& c, const fs::path& dir) {
  const auto entries = static_report_from_logs(c, dir);
  open_for_write(dir / "rmse.csv") << rmse_table_csv(entries);
  open_for_write(dir / "rmse_table.txt")
      << rmse_table_text(entries, "Tracking RMSE [m] on the training trajectory under constant side wind [m/s]");
}

inline std::vector<RmseEntry> cmd_eval_static(const ExperimentConfig& c, const EpdModel& model, const fs::path& out) {
  c.validate();
  const PiecewisePoly traj = build_trajectory(c.trajectory);
  const fs::path dir = out / "static";
  for (double s : c.eval_speeds) {
    for (ControllerMode m : eval_modes()) {
      const RunLog log = control_loop(traj, &model, loop_config(c, side_wind(s), m));
      write_runlog_csv(dir / "runs" / (static_run_name(m, s) + ".csv"), log);
      if (m != ControllerMode::kNominal) {
        write_adaptation_csv(dir / "runs" / (static_run_name(m, s) + "_adapt.csv"), log, model.prototypes.task_ids);
      }
    }
  }
  write_static_report(c, dir);
  return static_report_from_logs(c, dir);
}

// --- spatial-wind evaluation ---------------------------------------------------

inline const std::vector<ControllerMode>& spatial_modes() {
  static const std::vector<ControllerMode> modes = {ControllerMode::kNominal, ControllerMode::kProtoNoPI};
  return modes;
}

inline std::string spatial_run_name(ControllerMode m, const std::string& traj) { return to_string(m) + "_" + traj; }

struct SpatialSummary {
  std::vector<RmseEntry> entries;
  std::map<std::string, double> iqr_x;  // key: "<mode>_<trajectory>", IQR of |x error|
};

inline SpatialSummary spatial_report_from_logs(const ExperimentConfig& c, const fs::path& dir) {
  SpatialSummary s;
  std::ostringstream dev;
  dev << "trajectory,mode,t,ex,ey,ez\n";
  for (const auto& name : c.test_trajectories) {
    for (ControllerMode m : spatial_modes()) {
      const auto rows = read_runlog_csv(dir / "runs" / (spatial_run_name(m, name) + ".csv"));
      s.entries.push_back({to_string(m), name, position_rmse(rows, c.rmse_start_window), degraded_fraction(rows)});
      std::vector<double> abs_x;
      for (const auto& r : rows) {
        if (r.t < c.rmse_start_window - 1e-12) continue;
        const Vec3 e = r.x.segment<3>(kPosIdx) - r.ref.segment<3>(kPosIdx);
        abs_x.push_back(std::abs(e.x()));
        dev << name << ',' << to_string(m) << ',' << fmt_double(r.t) << ',' << fmt_double(e.x()) << ','
            << fmt_double(e.y()) << ',' << fmt_double(e.z()) << '\n';
      }
      s.iqr_x[spatial_run_name(m, name)] = interquartile_range(abs_x);
    }
  }
  open_for_write(dir / "deviations.csv") << dev.str();
  return s;
}

inline void write_spatial_report(const ExperimentConfig& c, const fs::path& dir) {
  const auto s = spatial_report_from_logs(c, dir);
  open_for_write(dir / "rmse.csv") << rmse_table_csv(s.entries);
  std::ostringstream os;
  os << rmse_table_text(s.entries, "Tracking RMSE [m] on the test trajectories under spatially varying wind") << '\n'
     << "IQR of |x error| [m]\n";
  for (const auto& [k, v] : s.iqr_x) os << std::left << std::setw(28) << k << std::fixed << std::setprecision(4) << v << '\n';
  open_for_write(dir / "rmse_table.txt") << os.str();
}

inline SpatialSummary cmd_eval_spatial(const ExperimentConfig& c, const EpdModel& model, const fs::path& out) {
  c.validate();
  const fs::path dir = out / "spatial";
  for (const auto& name : c.test_trajectories) {
    const PiecewisePoly traj = build_trajectory(name);
    for (ControllerMode m : spatial_modes()) {
      const RunLog log = control_loop(traj, &model, loop_config(c, c.spatial_wind, m));
      write_runlog_csv(dir / "runs" / (spatial_run_name(m, name) + ".csv"), log);
      if (m != ControllerMode::kNominal) {
        write_adaptation_csv(dir / "runs" / (spatial_run_name(m, name) + "_adapt.csv"), log, model.prototypes.task_ids);
      }
    }
  }
  write_spatial_report(c, dir);
  return spatial_report_from_logs(c, dir);
}

// --- beta sweep ----------------------------------------------------------------

/// Mean pairwise distance between per-task centroids of the (x, y) errors.
inline double cluster_separation(const std::vector<ErrorRow>& rows) {
  std::vector<std::string> ids;
  std::vector<Eigen::Vector2d> sums;
  std::vector<std::size_t> counts;
  for (const auto& r : rows) {
    auto it = std::find(ids.begin(), ids.end(), r.task_id);
    std::size_t k = static_cast<std::size_t>(it - ids.begin());
    if (it == ids.end()) {
      ids.push_back(r.task_id);
      sums.push_back(Eigen::Vector2d::Zero());
      counts.push_back(0);
    }
    sums[k] += r.error.head<2>();
    ++counts[k];
  }
  if (ids.size() < 2) throw std::invalid_argument("cluster_separation: need at least two tasks");
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    for (std::size_t j = i + 1; j < ids.size(); ++j) {
      total += (sums[i] / double(counts[i]) - sums[j] / double(counts[j])).norm();
      ++pairs;
    }
  }
  return total / static_cast<double>(pairs);
}

struct SweepPoint {
  double beta{0.0};
  double separation{0.0};
  std::vector<double> final_risks;
};

inline std::vector<SweepPoint> cmd_beta_sweep(const ExperimentConfig& c, const fs::path& out) {
  c.validate();
  const auto data = load_datasets(c, out);
  std::vector<SweepPoint> points;
  const fs::path dir = out / "beta_sweep";
  for (double beta : c.beta_sweep) {
    TrainConfig tc = c.train;
    tc.beta = beta;
    const TrainResult tr = train(data, tc, c.encoder);
    const auto rows = per_task_risk_dump(tr.model, data);
    write_risk_dump(dir / ("risk_dump_beta_" + speed_tag(beta) + ".csv"), rows);
    points.push_back({beta, cluster_separation(rows), tr.final_risks});
  }
  auto csv = open_for_write(dir / "separation.csv");
  csv << "beta,separation";
  for (const auto& id : data) csv << ",final_risk_" << id.task_id;
  csv << '\n';
  for (const auto& p : points) {
    csv << fmt_double(p.beta) << ',' << fmt_double(p.separation);
    for (double r : p.final_risks) csv << ',' << fmt_double(r);
    csv << '\n';
  }
  return points;
}

// --- adaptation trace ----------------------------------------------------------

inline RunLog cmd_adapt_trace(const ExperimentConfig& c, const EpdModel& model, const fs::path& out, double speed,
                              ControllerMode mode) {
  c.validate();
  if (mode == ControllerMode::kNominal) throw std::invalid_argument("adapt-trace needs a proto mode");
  const RunLog log = control_loop(build_trajectory(c.trajectory), &model, loop_config(c, side_wind(speed), mode));
  const fs::path dir = out / "adapt_trace";
  write_runlog_csv(dir / (static_run_name(mode, speed) + ".csv"), log);
  write_adaptation_csv(dir / (static_run_name(mode, speed) + "_adapt.csv"), log, model.prototypes.task_ids);
  return log;
}

}  // namespace protompc
