// distillscope command-line interface.
//
//   distillscope train-source --config run.json
//   distillscope distill      --config run.json [--resume]
//   distillscope score        --config run.json
//   distillscope eval         scores.csv
//   distillscope localize     --config run.json [--method smoothgrad]
//   distillscope ablate       --config run.json --study layers
//
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "distillscope/csv.hpp"
#include "distillscope/errors.hpp"
#include "distillscope/pipeline.hpp"

namespace ds = distillscope;
using nlohmann::json;

namespace {

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> method;
  std::optional<double> sigma;
  bool no_filter = false;
  std::optional<double> noise;
  std::optional<double> width_ratio;
  std::optional<std::string> cps;
  std::optional<std::string> loss;
  std::optional<std::string> study;
};

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "JSON run configuration")->check(CLI::ExistingFile);
  cmd->add_option("--seed", o.seed, "Run seed");
  cmd->add_option("--out", o.out, "Output directory");
  cmd->add_option("--width-ratio", o.width_ratio, "Cloner width ratio in (0, 1]");
  cmd->add_option("--cps", o.cps, "Critical points")->check(CLI::IsMember({"last", "last2", "last4", "all"}));
  cmd->add_option("--loss", o.loss, "Distillation loss")->check(CLI::IsMember({"val", "dir", "total"}));
}

void add_localize(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--method", o.method, "Attribution method")
      ->check(CLI::IsMember({"gradients", "smoothgrad", "gbp"}));
  cmd->add_option("--sigma", o.sigma, "Gaussian filter sigma");
  cmd->add_flag("--no-filter", o.no_filter, "Skip Gaussian filtering and opening");
  cmd->add_option("--noise", o.noise, "SmoothGrad noise as a fraction of the input range");
}

ds::RunConfig resolve(const Overrides& o) {
  json doc = json::object();
  if (!o.config.empty()) {
    std::ifstream f(o.config);
    try {
      doc = json::parse(f);
    } catch (const json::parse_error& e) {
      throw ds::ConfigError("config " + o.config + " is not valid JSON: " + e.what());
    }
    if (!doc.is_object()) throw ds::ConfigError("config " + o.config + " must hold a JSON object");
  }
  auto section = [&](const char* key) -> json& {
    if (!doc.contains(key)) doc[key] = json::object();
    return doc[key];
  };
  if (o.seed) doc["seed"] = *o.seed;
  if (o.out) doc["out"] = *o.out;
  if (o.method) section("localize")["method"] = *o.method;
  if (o.sigma) section("localize")["sigma"] = *o.sigma;
  if (o.no_filter) section("localize")["filter"] = false;
  if (o.noise) section("localize")["smoothgrad_noise"] = *o.noise;
  if (o.width_ratio) section("cloner")["width_ratio"] = *o.width_ratio;
  if (o.cps) section("cloner")["critical_points"] = *o.cps;
  if (o.loss) section("distill")["loss"] = *o.loss;
  if (o.study) section("ablation")["study"] = *o.study;
  return ds::parse_config(doc);
}

void log_line(const std::string& msg) { std::cerr << msg << std::endl; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Anomaly detection and localization by activation distillation"};
  app.require_subcommand(1);
  Overrides o;

  auto* train = app.add_subcommand("train-source", "Train the source classifier");
  add_common(train, o);

  bool resume = false;
  auto* distill = app.add_subcommand("distill", "Distil a cloner on normal training data");
  add_common(distill, o);
  distill->add_flag("--resume", resume, "Continue from the checkpoint in <out>/distill");

  auto* score = app.add_subcommand("score", "Score the test split and write scores.csv");
  add_common(score, o);

  std::string score_file;
  std::optional<std::string> report;
  auto* eval = app.add_subcommand("eval", "AUROC of a score file");
  eval->add_option("scores", score_file, "Score CSV")->required()->check(CLI::ExistingFile);
  eval->add_option("--report", report, "Where to write the metrics CSV");

  auto* localize = app.add_subcommand("localize", "Write localization heatmaps");
  add_common(localize, o);
  add_localize(localize, o);

  auto* ablate = app.add_subcommand("ablate", "Run an ablation study");
  add_common(ablate, o);
  add_localize(ablate, o);
  ablate->add_option("--study", o.study, "Study to run")
      ->check(CLI::IsMember({"layers", "width", "loss", "interpretability"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (eval->parsed()) {
      const ds::EvalResult r = ds::cmd_eval(score_file, report ? std::optional<std::filesystem::path>(*report)
                                                               : std::nullopt);
      std::cout << "auroc," << ds::format_double(r.auroc) << "\nn_normal," << r.n_normal << "\nn_anomalous,"
                << r.n_anomalous << '\n';
      return 0;
    }
    const ds::RunConfig config = resolve(o);
    if (train->parsed()) {
      const auto r = ds::cmd_train_source(config, log_line);
      std::cout << "train_accuracy," << ds::format_double(r.result.train_accuracy) << "\ntest_accuracy,"
                << ds::format_double(r.result.test_accuracy) << "\nweights," << r.weights.string() << '\n';
    } else if (distill->parsed()) {
      const auto r = ds::cmd_distill(config, resume, log_line);
      std::cout << "lambda," << ds::format_double(r.state.lambda) << "\nepochs," << r.state.epoch << "\nconverged,"
                << (r.state.converged ? "true" : "false") << "\ncheckpoint," << r.checkpoint.string() << '\n';
    } else if (score->parsed()) {
      const auto r = ds::cmd_score(config, log_line);
      std::cout << "scores," << r.score_file.string() << '\n';
      if (r.eval) std::cout << "auroc," << ds::format_double(r.eval->auroc) << '\n';
    } else if (localize->parsed()) {
      const auto r = ds::cmd_localize(config, log_line);
      std::cout << "heatmaps," << (r.directory / "heatmaps").string() << '\n';
      if (r.pixel_auroc) std::cout << "pixel_auroc," << ds::format_double(*r.pixel_auroc) << '\n';
    } else if (ablate->parsed()) {
      const auto r = ds::cmd_ablate(config, log_line);
      for (const auto& row : r.rows) std::cout << row.variant << ',' << row.metric << ',' << ds::format_double(row.mean) << '\n';
      std::cout << "table," << r.table.string() << '\n';
    }
  } catch (const ds::ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
