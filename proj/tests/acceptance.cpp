// Acceptance run: executes the full pipeline twice with the same seed and
// checks the twelve project-level criteria. Prints one PASS/FAIL line per
// criterion in order. Exit status is nonzero if any criterion fails, except
// those named with --expect-fail (still printed as FAIL and counted).

#include "protompc/bench.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>

using namespace protompc;

namespace {

struct Verdict {
  int id;
  std::string name;
  bool pass;
  std::string detail;
};

std::vector<Verdict> verdicts;

void report(int id, const std::string& name, bool pass, const std::string& detail) {
  verdicts.push_back({id, name, pass, detail});
  std::fprintf(stderr, "  criterion %d checked: %s\n", id, pass ? "pass" : "fail");
}

std::string num(double v, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
  return buf;
}

Eigen::MatrixXd randn(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  return Eigen::MatrixXd::NullaryExpr(r, c, [&] { return n(rng); });
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

double find_rmse_x(const std::vector<RmseEntry>& entries, ControllerMode m, const std::string& cond) {
  for (const auto& e : entries) {
    if (e.mode == to_string(m) && e.condition == cond) return e.rmse.rmse.x();
  }
  throw std::runtime_error("no RMSE entry for " + to_string(m) + " / " + cond);
}

// --- oracle suites (fast, no pipeline needed) ----------------------------------

void check_decoder_fit() {
  std::mt19937_64 rng(101);
  double planted = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::MatrixXd phi = randn(6, 200, rng);
    const DecoderMatrix gen{randn(3, 6, rng)};
    planted = std::max(planted, (fit_decoder_features(phi, gen.w * phi, 1e-8, 10.0).w - gen.w).norm());
  }
  std::uniform_int_distribution<int> dim(1, 12);
  double oracle_err = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const int p = dim(rng);
    const int n = p + dim(rng) * 5;
    const double lambda = std::pow(10.0, -static_cast<double>(trial % 7));
    const Eigen::MatrixXd phi = randn(p, n, rng);
    const Eigen::MatrixXd y = randn(3, n, rng, 0.5);
    // normal equations (phi phi^T + lambda I) w^T = phi y^T, solved by full-pivot LU
    const Eigen::MatrixXd gram = phi * phi.transpose() + lambda * Eigen::MatrixXd::Identity(p, p);
    const Eigen::MatrixXd oracle = gram.fullPivLu().solve(phi * y.transpose()).transpose();
    oracle_err = std::max(oracle_err, (fit_decoder_features(phi, y, lambda, 1e6).w - oracle).norm());
  }
  report(5, "prototype fitting oracle", planted < 1e-6 && oracle_err < 1e-8,
         "planted err " + num(planted) + " (< 1e-6), normal-equations err " + num(oracle_err) +
             " over 100 cases (< 1e-8)");
}

void check_gradients() {
  std::mt19937_64 rng(202);
  EncoderConfig cfg;
  cfg.input_dim = 6;
  cfg.hidden_dims = {9, 7};
  cfg.feature_dim = 5;
  auto rel = [](double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6}); };
  int probes = 0;
  double worst_param = 0.0, worst_input = 0.0;
  for (std::uint64_t net = 0; net < 4; ++net) {
    EncoderParams p = init_params(300 + net, cfg);
    for (auto& b : p.biases) b = randn(b.size(), 1, rng, 0.3);
    p.normalizer.mean = randn(6, 1, rng);
    p.normalizer.std = randn(6, 1, rng).cwiseAbs().array() + 0.5;
    const Eigen::MatrixXd x = randn(6, 8, rng);
    const Eigen::MatrixXd cot = randn(5, 8, rng);
    auto loss = [&](const EncoderParams& q) { return (cot.array() * encoder_forward_batch(q, x).output().array()).sum(); };
    const GradBuffer g = encoder_backward(p, x, cot);
    std::uniform_int_distribution<std::size_t> pick(0, p.num_params() - 1);
    for (int k = 0; k < 30; ++k) {
      const std::size_t idx = pick(rng);
      const double h = 1e-5, saved = p.param(idx);
      p.param(idx) = saved + h;
      const double fp = loss(p);
      p.param(idx) = saved - h;
      const double fm = loss(p);
      p.param(idx) = saved;
      worst_param = std::max(worst_param, rel(g.flat(idx), (fp - fm) / (2 * h)));
      ++probes;
    }
    const Eigen::VectorXd x0 = randn(6, 1, rng);
    const Eigen::MatrixXd jac = encoder_input_jacobian(p, x0);
    for (int i = 0; i < 6; ++i) {
      Eigen::VectorXd xp = x0, xm = x0;
      xp(i) += 1e-5;
      xm(i) -= 1e-5;
      const Eigen::VectorXd fd = (encoder_forward(p, xp) - encoder_forward(p, xm)) / 2e-5;
      for (int r = 0; r < 5; ++r) {
        worst_input = std::max(worst_input, rel(jac(r, i), fd(r)));
        ++probes;
      }
    }
  }
  report(6, "gradient suite", probes >= 100 && worst_param < 1e-4 && worst_input < 1e-4,
         std::to_string(probes) + " probes, worst rel err params " + num(worst_param) + ", inputs " +
             num(worst_input) + " (< 1e-4)");
}

void check_adaptation() {
  std::mt19937_64 rng(303);
  bool monotone = true, kl_range = true;
  double worst_sum = 0.0;
  std::uniform_real_distribution<double> risk(0.0, 50.0), lg(-3.0, 3.0);
  for (int trial = 0; trial < 1000; ++trial) {
    const Eigen::Vector3d r(risk(rng), risk(rng), risk(rng));
    const SimplexCoord a = boltzmann_from_risks(r, std::pow(10.0, lg(rng)));
    worst_sum = std::max(worst_sum, std::abs(a.a.sum() - 1.0));
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) monotone &= !(r(i) < r(j)) || a.a(i) >= a.a(j);
    }
  }
  const double kl_one_hot = kl_to_uniform(SimplexCoord::one_hot(3, 1));
  kl_range &= std::abs(kl_to_uniform(SimplexCoord::uniform(3))) <= 1e-15;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 1000; ++i) {
    Eigen::Vector3d a(u(rng), u(rng), u(rng));
    const double kl = kl_to_uniform({a / a.sum()});
    kl_range &= kl >= -1e-15 && kl <= std::log(3.0) + 1e-12;
  }
  const SimplexCoord c{Eigen::Vector3d(0.6, 0.3, 0.1)};
  const bool strict = !accept(c, kl_to_uniform(c)) && accept(c, std::nextafter(kl_to_uniform(c), 0.0));
  const double w0 = 1.5;
  std::exponential_distribution<double> e(1.0);
  double worst_sigma = 0.0;
  for (int draw = 0; draw < 1000; ++draw) {
    PrototypeSet protos;
    for (int k = 0; k < 3; ++k) protos.decoders.push_back(clip_spectral_norm({randn(3, 5, rng, 2.0)}, w0));
    const Eigen::Vector3d a(e(rng), e(rng), e(rng));
    worst_sigma = std::max(worst_sigma, interpolate_decoder(protos, {a / a.sum()}).spectral_norm());
  }
  const bool ok = worst_sum <= 1e-12 && monotone && kl_range && std::abs(kl_one_hot - std::log(3.0)) <= 1e-12 &&
                  strict && worst_sigma < w0;
  report(7, "adaptation suite", ok,
         "sum err " + num(worst_sum) + ", risk-monotone " + (monotone ? "yes" : "no") + ", KL in [0, log 3] " +
             (kl_range ? "yes" : "no") + ", one-hot KL - log3 = " + num(kl_one_hot - std::log(3.0)) +
             ", strict boundary " + (strict ? "yes" : "no") + ", max sigma " + num(worst_sigma) + " < w0 " + num(w0));
}

void check_meta_update() {
  std::mt19937_64 rng(404);
  EncoderConfig cfg;
  cfg.hidden_dims = {24};
  cfg.feature_dim = 8;
  const EncoderParams enc0 = init_params(405, cfg);
  PrototypeSet protos;
  for (int k = 0; k < 3; ++k) protos.decoders.push_back({randn(3, 8, rng, 0.3)});
  Batch b;
  b.inputs = randn(kInputDim, 32, rng);
  b.targets = randn(3, 32, rng);
  EncoderParams meta = enc0, plain = enc0;
  meta_update_step(meta, protos, 1, b, 0.0, 1e-2);
  apply_update(plain, risk_gradient(protos.decoders[1], enc0, b), -1e-2);
  bool bitwise = true;
  for (std::size_t l = 0; l < meta.weights.size(); ++l) {
    bitwise &= meta.weights[l] == plain.weights[l] && meta.biases[l] == plain.biases[l];
  }
  PrototypeSet single;
  single.decoders.push_back(protos.decoders[0]);
  const double beta = 0.3;
  const GradBuffer dir = meta_direction(enc0, single, 0, b, beta);
  const GradBuffer g = risk_gradient(single.decoders[0], enc0, b);
  double worst = 0.0;
  for (std::size_t i = 0; i < enc0.num_params(); ++i) worst = std::max(worst, std::abs(dir.flat(i) - (1 - beta) * g.flat(i)));
  report(8, "meta-update degenerate cases", bitwise && worst <= 1e-15,
         std::string("beta=0 bitwise plain step: ") + (bitwise ? "yes" : "no") + ", N=1 max dev from (1-beta) step " +
             num(worst));
}

struct LinearModel {
  static constexpr int nx = 6;
  static constexpr int nu = 3;
  using State = Eigen::Matrix<double, 6, 1>;
  using Control = Eigen::Matrix<double, 3, 1>;
  Eigen::Matrix<double, 6, 6> a;
  Eigen::Matrix<double, 6, 3> b;
  State step(const State& x, const Control& u) const { return a * x + b * u; }
  State error(const State& x, const State& ref) const { return x - ref; }
};

void check_mpc() {
  // LQR oracle on a double integrator
  const double dt = 0.05;
  LinearModel m;
  m.a.setIdentity();
  m.a.topRightCorner<3, 3>() = dt * Eigen::Matrix3d::Identity();
  m.b.topRows<3>() = 0.5 * dt * dt * Eigen::Matrix3d::Identity();
  m.b.bottomRows<3>() = dt * Eigen::Matrix3d::Identity();
  MpcConfigT<6, 3> lc;
  lc.horizon = 25;
  lc.dt = dt;
  lc.q << 4, 3, 2, 0.5, 0.4, 0.3;
  lc.r << 0.2, 0.3, 0.1;
  lc.q_terminal = 10.0 * lc.q;
  lc.kkt_tolerance = 1e-12;
  lc.max_iterations = 5;
  LinearModel::State x0;
  x0 << 1.0, -0.5, 0.3, 0.2, 0.0, -0.4;
  const auto sol = GaussNewtonSqp<LinearModel>(m, lc).solve(x0, std::vector<LinearModel::State>(26, LinearModel::State::Zero()),
                                                            std::vector<LinearModel::Control>(25, LinearModel::Control::Zero()));
  Eigen::Matrix<double, 6, 6> p = lc.q_terminal.asDiagonal();
  const Eigen::Matrix<double, 6, 6> q = lc.q.asDiagonal();
  const Eigen::Matrix3d r = lc.r.asDiagonal();
  std::vector<Eigen::Matrix<double, 3, 6>> gains(25);
  for (int k = 24; k >= 0; --k) {
    gains[k] = (r + m.b.transpose() * p * m.b).ldlt().solve(m.b.transpose() * p * m.a);
    p = q + m.a.transpose() * p * (m.a - m.b * gains[k]);
    p = 0.5 * (p + p.transpose()).eval();
  }
  double lqr_err = 0.0;
  LinearModel::State x = x0;
  for (int k = 0; k < 25; ++k) {
    const LinearModel::Control u = -gains[k] * x;
    lqr_err = std::max(lqr_err, (u - sol.u_seq[k]).cwiseAbs().maxCoeff());
    x = m.step(x, u);
  }

  // full solver with a random residual model: cost never increases
  std::mt19937_64 rng(505);
  const QuadParams params;
  EncoderParams enc = init_params(506, EncoderConfig{});
  enc.normalizer.mean = Eigen::VectorXd::Zero(kInputDim);
  enc.normalizer.mean(kQuatIdx) = 1.0;
  enc.normalizer.mean(kStateDim) = 9.81;
  enc.normalizer.std = Eigen::VectorXd::Ones(kInputDim);
  AugmentedModel learned;
  learned.encoder = &enc;
  learned.decoder = clip_spectral_norm({randn(3, 16, rng, 0.2)}, 10.0);
  learned.target_scale = Vec3(0.5, 0.2, 0.3);
  MpcConfig cfg = default_mpc_config(params);
  cfg.kkt_tolerance = 1e-8;
  cfg.max_iterations = 15;
  const PiecewisePoly hover = min_snap_solve(trajectories::make({{0.0, 0, 0, 1}, {5.0, 0, 0, 1}}));
  std::vector<RefSample> refs;
  for (int k = 0; k <= cfg.horizon; ++k) refs.push_back(sample_ref(hover, cfg.dt * k, params));
  bool monotone = true;
  for (int trial = 0; trial < 5; ++trial) {
    StateVec xs = refs.front().ref_state.to_vector();
    xs.head<6>() += randn(6, 1, rng, 0.3);
    const MpcSolution s = mpc_solve(learned, xs, refs, cfg);
    for (std::size_t i = 1; i < s.cost_history.size(); ++i) monotone &= s.cost_history[i] <= s.cost_history[i - 1];
  }

  // zero decoder through the full closed loop equals the nominal path bitwise
  ExperimentConfig ec;
  const PiecewisePoly traj = build_trajectory(ec.trajectory);
  LoopConfig nominal = loop_config(ec, side_wind(4.0), ControllerMode::kNominal);
  nominal.duration = 2.0;
  LoopConfig fixed = nominal;
  fixed.mode = ControllerMode::kFixedDecoder;
  fixed.fixed_decoder = DecoderMatrix::zero(ec.encoder.feature_dim);
  EpdModel zero_model;
  zero_model.encoder = init_params(507, ec.encoder);
  zero_model.prototypes.decoders.push_back(DecoderMatrix::zero(ec.encoder.feature_dim));
  zero_model.prototypes.task_ids.push_back("wind_4");
  zero_model.prototypes.wind_speeds.push_back(4.0);
  const RunLog a = control_loop(traj, nullptr, nominal);
  const RunLog b = control_loop(traj, &zero_model, fixed);
  bool bitwise = a.rows.size() == b.rows.size();
  for (std::size_t i = 0; bitwise && i < a.rows.size(); ++i) bitwise = a.rows[i].x == b.rows[i].x && a.rows[i].u == b.rows[i].u;

  report(9, "MPC oracle", lqr_err < 1e-6 && monotone && bitwise,
         "LQR max control err " + num(lqr_err) + " (< 1e-6), cost nonincreasing: " + (monotone ? "yes" : "no") +
             ", zero decoder bitwise nominal: " + (bitwise ? "yes" : "no"));
}

// --- pipeline ----------------------------------------------------------------------

struct PipelineResult {
  std::vector<RmseEntry> static_entries;
  SpatialSummary spatial;
  std::vector<SweepPoint> sweep;
  RunLog trace;
  EpdModel model;
};

PipelineResult run_pipeline(const ExperimentConfig& c, const fs::path& out, bool with_trace) {
  PipelineResult r;
  const auto t0 = std::chrono::steady_clock::now();
  auto stamp = [&](const char* what) {
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::fprintf(stderr, "  [%s] %s done at %.0f s\n", out.filename().c_str(), what, s);
  };
  cmd_collect(c, out);
  stamp("collect");
  r.model = cmd_train(c, out, out / "model.json").model;
  stamp("train");
  r.static_entries = cmd_eval_static(c, r.model, out);
  stamp("eval-static");
  r.spatial = cmd_eval_spatial(c, r.model, out);
  stamp("eval-spatial");
  r.sweep = cmd_beta_sweep(c, out);
  stamp("beta-sweep");
  if (with_trace) {
    r.trace = cmd_adapt_trace(c, r.model, out, 4.0, ControllerMode::kProtoNoPI);
    stamp("adapt-trace");
  }
  return r;
}

void check_tracking(const ExperimentConfig& c, const PipelineResult& r) {
  // 1: nominal degradation
  std::string detail = "nominal x-RMSE";
  bool mono = true;
  double prev = -1.0;
  for (double s : c.eval_speeds) {
    const double v = find_rmse_x(r.static_entries, ControllerMode::kNominal, speed_tag(s));
    detail += " " + speed_tag(s) + ":" + num(v, 3);
    mono &= v > prev;
    prev = v;
  }
  report(1, "monotonic nominal degradation", mono, detail);

  auto trained = [&](double s) {
    return std::any_of(c.training_speeds.begin(), c.training_speeds.end(), [&](double t) { return std::abs(t - s) < 1e-9; });
  };
  // 2: with privileged information
  bool ok2 = true;
  detail = "PI/nominal";
  for (double s : c.eval_speeds) {
    if (s == 0.0) continue;
    const double ratio = find_rmse_x(r.static_entries, ControllerMode::kProtoPI, speed_tag(s)) /
                         find_rmse_x(r.static_entries, ControllerMode::kNominal, speed_tag(s));
    const double limit = trained(s) ? 0.6 : 0.8;
    ok2 &= ratio <= limit;
    detail += " " + speed_tag(s) + ":" + num(ratio, 3) + "(<=" + num(limit, 2) + ")";
  }
  report(2, "proto-MPC with PI vs nominal", ok2, detail);

  // 3: without privileged information, trained speeds
  bool ok3 = true;
  detail = "noPI/nominal";
  for (double s : c.training_speeds) {
    const double ratio = find_rmse_x(r.static_entries, ControllerMode::kProtoNoPI, speed_tag(s)) /
                         find_rmse_x(r.static_entries, ControllerMode::kNominal, speed_tag(s));
    ok3 &= ratio <= 0.75;
    detail += " " + speed_tag(s) + ":" + num(ratio, 3);
  }
  report(3, "proto-MPC without PI vs nominal", ok3, detail + " (<= 0.75)");

  // 4: spatially varying wind
  bool ok4 = true;
  detail = "noPI/nominal";
  for (const auto& name : c.test_trajectories) {
    const double ratio = find_rmse_x(r.spatial.entries, ControllerMode::kProtoNoPI, name) /
                         find_rmse_x(r.spatial.entries, ControllerMode::kNominal, name);
    const double iqr_p = r.spatial.iqr_x.at(spatial_run_name(ControllerMode::kProtoNoPI, name));
    const double iqr_n = r.spatial.iqr_x.at(spatial_run_name(ControllerMode::kNominal, name));
    ok4 &= ratio <= 0.7 && iqr_p < iqr_n;
    detail += " " + name + ":" + num(ratio, 3) + " iqr " + num(iqr_p, 3) + "/" + num(iqr_n, 3);
  }
  report(4, "spatially varying wind", ok4, detail + " (ratio <= 0.7, IQR smaller)");

  // 10: beta sweep
  bool ok10 = r.sweep.size() >= 2;
  detail = "separation";
  for (std::size_t i = 0; i < r.sweep.size(); ++i) {
    detail += " b" + num(r.sweep[i].beta, 2) + ":" + num(r.sweep[i].separation, 4);
    if (i > 0) ok10 &= r.sweep[i].separation < r.sweep[i - 1].separation;
  }
  report(10, "beta-sweep separation decreases", ok10, detail);

  // 11: online concentration
  const int k4 = r.model.prototypes.index_of(task_id_for_speed(4.0));
  const auto [frac, accepted] = concentration(r.trace, k4, c.concentration_after);
  report(11, "online concentration at 4 m/s", k4 >= 0 && accepted > 0 && frac >= 0.8,
         "argmax = wind_4 on " + num(100.0 * frac, 4) + "% of " + std::to_string(accepted) +
             " accepted steps after " + num(c.concentration_after, 3) + " s (>= 80%)");
}

std::vector<fs::path> files_under(const fs::path& root) {
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out.push_back(fs::relative(e.path(), root));
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks for the protompc pipeline"};
  std::string out = "acceptance_out";
  std::string config;
  app.add_option("--out", out, "Scratch directory for both pipeline runs");
  app.add_option("--config", config, "Experiment config (defaults if omitted)")->check(CLI::ExistingFile);
  std::vector<int> expected_failures;
  app.add_option("--expect-fail", expected_failures,
                 "Criteria known to fail; reported as FAIL but not reflected in the exit status");
  CLI11_PARSE(app, argc, argv);

  const auto start = std::chrono::steady_clock::now();
  check_decoder_fit();
  check_gradients();
  check_adaptation();
  check_meta_update();
  check_mpc();

  try {
    const ExperimentConfig c = config.empty() ? ExperimentConfig{} : load_config(config);
    const fs::path root(out);
    fs::remove_all(root);
    const PipelineResult a = run_pipeline(c, root / "run_a", true);
    check_tracking(c, a);

    run_pipeline(c, root / "run_b", false);
    const double minutes = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() / 60.0;
    auto files_a = files_under(root / "run_a");
    files_a.erase(std::remove_if(files_a.begin(), files_a.end(),
                                 [](const fs::path& p) { return *p.begin() == "adapt_trace"; }),
                  files_a.end());
    const auto files_b = files_under(root / "run_b");
    std::size_t differing = 0;
    std::string first_diff;
    for (const auto& f : files_b) {
      if (slurp(root / "run_a" / f) != slurp(root / "run_b" / f)) {
        if (differing++ == 0) first_diff = f.string();
      }
    }
    const bool same_set = files_a == files_b;
    report(12, "determinism", same_set && differing == 0 && minutes < 30.0,
           std::to_string(files_b.size()) + " files compared, " + std::to_string(differing) + " differ" +
               (first_diff.empty() ? "" : " (first: " + first_diff + ")") + (same_set ? "" : ", file sets differ") +
               ", both runs plus oracles took " + num(minutes, 3) + " min (< 30)");
  } catch (const std::exception& e) {
    for (int id : {1, 2, 3, 4, 10, 11, 12}) {
      if (std::none_of(verdicts.begin(), verdicts.end(), [&](const Verdict& v) { return v.id == id; })) {
        report(id, "pipeline", false, std::string("pipeline error: ") + e.what());
      }
    }
  }

  std::sort(verdicts.begin(), verdicts.end(), [](const Verdict& x, const Verdict& y) { return x.id < y.id; });
  std::size_t failed = 0, unexpected = 0;
  std::ostringstream summary;
  for (const auto& v : verdicts) {
    const bool known = std::find(expected_failures.begin(), expected_failures.end(), v.id) != expected_failures.end();
    char head[32];
    std::snprintf(head, sizeof(head), "[%s] %2d ", v.pass ? "PASS" : "FAIL", v.id);
    summary << head << v.name << ": " << v.detail << (!v.pass && known ? " [expected failure]" : "") << '\n';
    failed += v.pass ? 0 : 1;
    unexpected += !v.pass && !known ? 1 : 0;
  }
  summary << verdicts.size() - failed << '/' << verdicts.size() << " criteria passed";
  if (failed > unexpected) summary << " (" << failed - unexpected << " expected failure" << (failed - unexpected == 1 ? "" : "s") << ')';
  summary << '\n';
  std::cout << summary.str();
  fs::create_directories(out);
  std::ofstream(fs::path(out) / "acceptance_report.txt") << summary.str();
  return unexpected == 0 ? 0 : 1;
}
