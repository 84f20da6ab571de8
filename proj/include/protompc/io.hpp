#pragma once

// File formats: task datasets and run logs as CSV, trained models as JSON.
// Doubles are written with 17 significant digits so that files round-trip
// exactly and reruns are byte-identical.

#include "protompc/closed_loop.hpp"

#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace protompc {

inline constexpr int kModelFormatVersion = 1;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::ofstream open_for_write(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  return out;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

inline double parse_double(const std::string& s, const std::string& where) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw FormatError(where + ": cannot parse number '" + s + "'");
  }
}

// --- task datasets -----------------------------------------------------------

inline const std::vector<std::string>& input_column_names() {
  static const std::vector<std::string> names = {"px", "py", "pz", "vx", "vy", "vz", "qw", "qx", "qy",
                                                 "qz", "wx", "wy", "wz", "f",  "mx", "my", "mz"};
  return names;
}

inline void write_dataset_csv(const std::filesystem::path& path, const TaskDataset& d) {
  auto out = open_for_write(path);
  for (const auto& n : input_column_names()) out << n << ',';
  out << "yx,yy,yz,task_id\n";
  for (const auto& s : d.samples) {
    for (int i = 0; i < kInputDim; ++i) out << fmt_double(s.x(i)) << ',';
    for (int i = 0; i < 3; ++i) out << fmt_double(s.y(i)) << ',';
    out << d.task_id << '\n';
  }
}

/// Reads a dataset file. Every row must carry the same task id.
inline TaskDataset read_dataset_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path.string() + ": empty file");
  if (split_csv_line(line).size() != kInputDim + 4) throw FormatError(path.string() + ": unexpected header");
  TaskDataset d;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    const std::string where = path.string() + ":" + std::to_string(row);
    if (cells.size() != kInputDim + 4) throw FormatError(where + ": expected 21 columns");
    TaskSample s;
    for (int i = 0; i < kInputDim; ++i) s.x(i) = parse_double(cells[static_cast<std::size_t>(i)], where);
    for (int i = 0; i < 3; ++i) s.y(i) = parse_double(cells[static_cast<std::size_t>(kInputDim + i)], where);
    if (d.samples.empty()) {
      d.task_id = cells.back();
    } else if (cells.back() != d.task_id) {
      throw FormatError(where + ": mixed task ids in one dataset file");
    }
    d.samples.push_back(s);
  }
  if (d.samples.empty()) throw FormatError(path.string() + ": no samples");
  return d;
}

// --- model file --------------------------------------------------------------

namespace detail {

inline nlohmann::json to_json_vec(const Eigen::VectorXd& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

/// Row-major nested arrays.
inline nlohmann::json to_json_mat(const Eigen::MatrixXd& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    std::vector<double> row(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index c = 0; c < m.cols(); ++c) row[static_cast<std::size_t>(c)] = m(r, c);
    rows.push_back(row);
  }
  return rows;
}

inline Eigen::VectorXd vec_from_json(const nlohmann::json& j, Eigen::Index expected, const char* what) {
  const auto v = j.get<std::vector<double>>();
  if (expected >= 0 && static_cast<Eigen::Index>(v.size()) != expected) {
    throw FormatError(std::string("model file: '") + what + "' has wrong length");
  }
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

inline Eigen::MatrixXd mat_from_json(const nlohmann::json& j, Eigen::Index rows, Eigen::Index cols, const char* what) {
  if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != rows) {
    throw FormatError(std::string("model file: '") + what + "' has wrong row count");
  }
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto row = j[static_cast<std::size_t>(r)].get<std::vector<double>>();
    if (static_cast<Eigen::Index>(row.size()) != cols) {
      throw FormatError(std::string("model file: '") + what + "' has wrong column count");
    }
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = row[static_cast<std::size_t>(c)];
  }
  return m;
}

}  // namespace detail

inline nlohmann::json model_to_json(const EpdModel& m) {
  using nlohmann::json;
  const auto& enc = m.encoder;
  json layers = json::array();
  for (std::size_t l = 0; l < enc.weights.size(); ++l) {
    layers.push_back({{"weight", detail::to_json_mat(enc.weights[l])}, {"bias", detail::to_json_vec(enc.biases[l])}});
  }
  json protos = json::array();
  for (std::size_t k = 0; k < m.prototypes.size(); ++k) {
    protos.push_back({{"task_id", m.prototypes.task_ids[k]},
                      {"wind_speed", m.prototypes.wind_speeds[k]},
                      {"decoder", detail::to_json_mat(m.prototypes.decoders[k].w)}});
  }
  const auto& tc = m.train_config;
  return {
      {"format", "protompc-model"},
      {"version", kModelFormatVersion},
      {"encoder",
       {{"input_dim", enc.config.input_dim},
        {"hidden_dims", enc.config.hidden_dims},
        {"feature_dim", enc.config.feature_dim},
        {"activation", "tanh"},
        {"normalizer", {{"mean", detail::to_json_vec(enc.normalizer.mean)}, {"std", detail::to_json_vec(enc.normalizer.std)}}},
        {"layers", layers}}},
      {"prototypes", protos},
      {"target_scale", {m.target_scale.x(), m.target_scale.y(), m.target_scale.z()}},
      {"training",
       {{"beta", tc.beta},
        {"learning_rate", tc.learning_rate},
        {"r0", tc.r0},
        {"w0", tc.w0},
        {"batch_size", tc.batch_size},
        {"ridge", tc.ridge},
        {"meta_iterations", tc.meta_iterations},
        {"input_std_floor", tc.input_std_floor},
        {"seed", tc.seed}}},
  };
}

inline EpdModel model_from_json(const nlohmann::json& j) {
  try {
    if (j.value("format", "") != "protompc-model") throw FormatError("model file: not a protompc model");
    if (!j.contains("version")) throw FormatError("model file: missing version");
    if (j.at("version").get<int>() != kModelFormatVersion) {
      throw FormatError("model file: unsupported version " + j.at("version").dump());
    }
    EpdModel m;
    const auto& je = j.at("encoder");
    auto& enc = m.encoder;
    enc.config.input_dim = je.at("input_dim").get<int>();
    enc.config.hidden_dims = je.at("hidden_dims").get<std::vector<int>>();
    enc.config.feature_dim = je.at("feature_dim").get<int>();
    enc.config.validate();
    if (enc.config.input_dim != kInputDim) throw FormatError("model file: encoder input_dim must be 17");
    enc.normalizer.mean = detail::vec_from_json(je.at("normalizer").at("mean"), enc.config.input_dim, "normalizer.mean");
    enc.normalizer.std = detail::vec_from_json(je.at("normalizer").at("std"), enc.config.input_dim, "normalizer.std");
    if (!(enc.normalizer.std.array() > 0.0).all()) throw FormatError("model file: normalizer std must be positive");
    const auto& layers = je.at("layers");
    if (static_cast<int>(layers.size()) != enc.config.num_layers()) throw FormatError("model file: layer count");
    for (int l = 0; l < enc.config.num_layers(); ++l) {
      const auto& jl = layers[static_cast<std::size_t>(l)];
      enc.weights.push_back(
          detail::mat_from_json(jl.at("weight"), enc.config.layer_out(l), enc.config.layer_in(l), "weight"));
      enc.biases.push_back(detail::vec_from_json(jl.at("bias"), enc.config.layer_out(l), "bias"));
    }
    for (const auto& jp : j.at("prototypes")) {
      m.prototypes.task_ids.push_back(jp.at("task_id").get<std::string>());
      m.prototypes.wind_speeds.push_back(jp.at("wind_speed").get<double>());
      m.prototypes.decoders.push_back({detail::mat_from_json(jp.at("decoder"), 3, enc.config.feature_dim, "decoder")});
    }
    if (m.prototypes.size() == 0) throw FormatError("model file: no prototypes");
    m.target_scale = detail::vec_from_json(j.at("target_scale"), 3, "target_scale");
    const auto& jt = j.at("training");
    auto& tc = m.train_config;
    tc.beta = jt.at("beta").get<double>();
    tc.learning_rate = jt.at("learning_rate").get<double>();
    tc.r0 = jt.at("r0").get<double>();
    tc.w0 = jt.at("w0").get<double>();
    tc.batch_size = jt.at("batch_size").get<int>();
    tc.ridge = jt.at("ridge").get<double>();
    tc.meta_iterations = jt.at("meta_iterations").get<int>();
    tc.input_std_floor = jt.at("input_std_floor").get<double>();
    tc.seed = jt.at("seed").get<std::uint64_t>();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model file: ") + e.what());
  }
}

inline void save_model(const std::filesystem::path& path, const EpdModel& m) {
  auto out = open_for_write(path);
  out << model_to_json(m).dump(1) << '\n';
}

inline EpdModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open model '" + path.string() + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return model_from_json(j);
}

// --- run logs ----------------------------------------------------------------

inline void write_runlog_csv(const std::filesystem::path& path, const RunLog& log) {
  static const char* state_names[] = {"px", "py", "pz", "vx", "vy", "vz", "qw",
                                      "qx", "qy", "qz", "wx", "wy", "wz"};
  auto out = open_for_write(path);
  out << 't';
  for (const char* n : state_names) out << ',' << n;
  out << ",f,mx,my,mz";
  for (const char* n : state_names) out << ",ref_" << n;
  out << ",cost,iters,kkt,degraded\n";
  for (const auto& r : log.rows) {
    out << fmt_double(r.t);
    for (int i = 0; i < kStateDim; ++i) out << ',' << fmt_double(r.x(i));
    for (int i = 0; i < kControlDim; ++i) out << ',' << fmt_double(r.u(i));
    for (int i = 0; i < kStateDim; ++i) out << ',' << fmt_double(r.ref(i));
    out << ',' << fmt_double(r.cost) << ',' << r.iterations << ',' << fmt_double(r.kkt) << ',' << (r.degraded ? 1 : 0)
        << '\n';
  }
}

/// Reads back the rows of a run log written by write_runlog_csv.
inline std::vector<RunLogRow> read_runlog_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open run log '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path.string() + ": empty file");
  constexpr std::size_t kCols = 1 + kStateDim + kControlDim + kStateDim + 4;
  if (split_csv_line(line).size() != kCols) throw FormatError(path.string() + ": unexpected header");
  std::vector<RunLogRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto c = split_csv_line(line);
    const std::string where = path.string() + ":" + std::to_string(lineno);
    if (c.size() != kCols) throw FormatError(where + ": wrong column count");
    RunLogRow r;
    std::size_t i = 0;
    r.t = parse_double(c[i++], where);
    for (int k = 0; k < kStateDim; ++k) r.x(k) = parse_double(c[i++], where);
    for (int k = 0; k < kControlDim; ++k) r.u(k) = parse_double(c[i++], where);
    for (int k = 0; k < kStateDim; ++k) r.ref(k) = parse_double(c[i++], where);
    r.cost = parse_double(c[i++], where);
    r.iterations = static_cast<int>(parse_double(c[i++], where));
    r.kkt = parse_double(c[i++], where);
    r.degraded = parse_double(c[i++], where) != 0.0;
    rows.push_back(r);
  }
  return rows;
}

inline void write_adaptation_csv(const std::filesystem::path& path, const RunLog& log,
                                 const std::vector<std::string>& task_ids) {
  auto out = open_for_write(path);
  out << 't';
  for (const auto& id : task_ids) out << ",r_" << id;
  for (const auto& id : task_ids) out << ",a_" << id;
  out << ",evaluated,accepted,kl\n";
  const auto n = static_cast<Eigen::Index>(task_ids.size());
  for (const auto& a : log.adaptation) {
    out << fmt_double(a.t);
    for (Eigen::Index k = 0; k < n; ++k) out << ',' << (a.risks.size() == n ? fmt_double(a.risks(k)) : "nan");
    for (Eigen::Index k = 0; k < n; ++k) out << ',' << fmt_double(a.coords(k));
    out << ',' << (a.evaluated ? 1 : 0) << ',' << (a.accepted ? 1 : 0) << ',' << fmt_double(a.kl) << '\n';
  }
}

}  // namespace protompc
