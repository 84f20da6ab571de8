// protompc: data collection, training and evaluation front end.

#include "protompc/bench.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <iostream>
#include <optional>

using namespace protompc;
using nlohmann::json;

namespace {

struct CommonOpts {
  std::string config;
  std::string out{"out"};
  std::string model;
  std::optional<std::uint64_t> seed;
};

ExperimentConfig resolve_config(const CommonOpts& o) {
  ExperimentConfig c = o.config.empty() ? ExperimentConfig{} : load_config(o.config);
  if (o.seed) set_seed(c, *o.seed);
  c.validate();
  return c;
}

fs::path model_path(const CommonOpts& o) { return o.model.empty() ? fs::path(o.out) / "model.json" : fs::path(o.model); }

json rmse_json(const std::vector<RmseEntry>& entries) {
  json a = json::array();
  for (const auto& e : entries) {
    a.push_back({{"condition", e.condition},
                 {"mode", e.mode},
                 {"rmse", {e.rmse.rmse.x(), e.rmse.rmse.y(), e.rmse.rmse.z()}},
                 {"degraded_fraction", e.degraded}});
  }
  return a;
}

void add_common(CLI::App* sub, CommonOpts& o, bool with_model) {
  sub->add_option("--config", o.config, "experiment config (JSON); defaults are used when omitted")->check(CLI::ExistingFile);
  sub->add_option("--out", o.out, "output directory")->capture_default_str();
  sub->add_option("--seed", o.seed, "override the config seed");
  if (with_model) sub->add_option("--model", o.model, "model file (default <out>/model.json)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prototype-decoder MPC experiments"};
  app.require_subcommand(0, 1);
  bool print_default = false;
  app.add_flag("--print-default-config", print_default, "print the built-in default config and exit");

  CommonOpts o;
  std::string mode_str = "proto-nopi";
  double wind = 4.0;
  std::string log_path, ref_path;
  double start = 0.5;

  auto* collect = app.add_subcommand("collect", "fly nominal MPC under each training wind and write task datasets");
  add_common(collect, o, false);
  auto* train_cmd = app.add_subcommand("train", "train the encoder and prototype decoders");
  add_common(train_cmd, o, true);
  auto* eval_static = app.add_subcommand("eval-static", "constant side-wind comparison on the training trajectory");
  add_common(eval_static, o, true);
  auto* eval_spatial = app.add_subcommand("eval-spatial", "spatially varying wind on the test trajectories");
  add_common(eval_spatial, o, true);
  auto* sweep = app.add_subcommand("beta-sweep", "retrain across the beta sweep and dump normalized errors");
  add_common(sweep, o, false);
  auto* rmse = app.add_subcommand("rmse", "per-axis position RMSE of a run log");
  rmse->add_option("--log", log_path, "run log CSV")->required()->check(CLI::ExistingFile);
  rmse->add_option("--reference", ref_path, "reference CSV (t,px,py,pz,...); default: the log's own reference")
      ->check(CLI::ExistingFile);
  rmse->add_option("--start", start, "startup window excluded from the metric [s]")->capture_default_str();
  auto* trace = app.add_subcommand("adapt-trace", "one adaptive flight with the adaptation trace");
  add_common(trace, o, true);
  trace->add_option("--mode", mode_str, "proto-pi or proto-nopi")->capture_default_str();
  trace->add_option("--wind", wind, "constant side-wind speed [m/s]")->capture_default_str();
  for (auto* sub : {eval_static, eval_spatial}) {
    sub->add_option("--mode", mode_str, "accepted for symmetry; evaluations always run every controller mode");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::cerr << json{{"error", e.what()}}.dump() << '\n';
    return e.get_exit_code();
  }

  try {
    if (print_default) {
      std::cout << config_to_json(ExperimentConfig{}).dump(2) << '\n';
      return 0;
    }
    json result;
    if (*collect) {
      const auto c = resolve_config(o);
      const auto s = cmd_collect(c, o.out);
      json files = json::array();
      for (const auto& f : s.files) files.push_back(f.string());
      result = {{"command", "collect"}, {"datasets", files}, {"degraded_fraction", s.degraded}};
    } else if (*train_cmd) {
      const auto c = resolve_config(o);
      const auto tr = cmd_train(c, o.out, model_path(o));
      result = {{"command", "train"}, {"model", model_path(o).string()}, {"report", train_report_json(tr)}};
    } else if (*eval_static) {
      const auto c = resolve_config(o);
      const auto entries = cmd_eval_static(c, load_model(model_path(o)), o.out);
      std::cerr << rmse_table_text(entries, "Tracking RMSE [m], constant side wind");
      result = {{"command", "eval-static"}, {"entries", rmse_json(entries)}};
    } else if (*eval_spatial) {
      const auto c = resolve_config(o);
      const auto s = cmd_eval_spatial(c, load_model(model_path(o)), o.out);
      std::cerr << rmse_table_text(s.entries, "Tracking RMSE [m], spatially varying wind");
      result = {{"command", "eval-spatial"}, {"entries", rmse_json(s.entries)}, {"iqr_abs_x", s.iqr_x}};
    } else if (*sweep) {
      const auto c = resolve_config(o);
      json pts = json::array();
      for (const auto& p : cmd_beta_sweep(c, o.out)) {
        pts.push_back({{"beta", p.beta}, {"separation", p.separation}, {"final_risks", p.final_risks}});
      }
      result = {{"command", "beta-sweep"}, {"points", pts}};
    } else if (*rmse) {
      const auto rows = read_runlog_csv(log_path);
      const AxisRmse r = ref_path.empty() ? position_rmse(rows, start) : rmse_against(rows, read_reference_csv(ref_path), start);
      result = {{"command", "rmse"}, {"rmse", {r.rmse.x(), r.rmse.y(), r.rmse.z()}}, {"samples", r.samples}};
    } else if (*trace) {
      const auto c = resolve_config(o);
      const auto model = load_model(model_path(o));
      const ControllerMode mode = parse_mode(mode_str);
      const RunLog log = cmd_adapt_trace(c, model, o.out, wind, mode);
      const int k = model.prototypes.nearest_speed(wind);
      const auto [frac, accepted] = concentration(log, k, c.concentration_after);
      result = {{"command", "adapt-trace"},
                {"mode", to_string(mode)},
                {"wind", wind},
                {"nearest_prototype", model.prototypes.task_ids[static_cast<std::size_t>(k)]},
                {"accepted_steps", accepted},
                {"concentration", frac}};
    } else {
      std::cout << app.help() << '\n';
      return 0;
    }
    std::cout << result.dump() << '\n';
    return 0;
  } catch (const std::exception& e) {
    std::cerr << json{{"error", e.what()}}.dump() << '\n';
    return 1;
  }
}
