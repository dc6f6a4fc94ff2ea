// phg2st: synthetic data generation, training, evaluation and
// cross-validation for prompt-guided hypergraph expression prediction.

#include <cstdlib>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "phg2st/cli.hpp"

namespace {

using nlohmann::json;
namespace cli = phg2st::cli;

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream ss(text);
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

// Config file, then PHG2ST_SEED, then --set overrides.
phg2st::RunConfig resolve(const std::string& config_file, const std::vector<std::string>& overrides) {
  json j = json::object();
  if (!config_file.empty()) {
    std::ifstream in(config_file);
    if (!in) throw phg2st::ConfigError("cannot open config " + config_file);
    try {
      j = json::parse(in);
    } catch (const json::parse_error& e) {
      throw phg2st::ConfigError("config " + config_file + ": " + e.what());
    }
  }
  if (const char* env = std::getenv("PHG2ST_SEED")) {
    try {
      j["seed"] = std::stoull(env);
    } catch (const std::exception&) {
      throw phg2st::ConfigError(std::string("PHG2ST_SEED is not an unsigned integer: ") + env);
    }
  }
  for (const auto& o : overrides) phg2st::apply_override(j, o);
  return phg2st::parse_run_config(j);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prompt-guided histological hypergraph learning for spatial expression prediction"};
  app.require_subcommand(1);

  std::string config_file;
  std::vector<std::string> overrides;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_file, "JSON run configuration");
    sub->add_option("--set", overrides, "Override a config key, e.g. train.max_epochs=5");
  };

  auto* synth = app.add_subcommand("synth", "Generate synthetic slide bundles");
  std::string out_dir;
  add_common(synth);
  synth->add_option("--out", out_dir, "Output directory for the bundles")->required();

  auto* train = app.add_subcommand("train", "Train a model");
  add_common(train);

  std::string checkpoint, ratios_text, heatmaps_text;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  add_common(eval);
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  eval->add_option("--ratios", ratios_text, "Comma-separated prompt ratios for a sweep");
  eval->add_option("--heatmaps", heatmaps_text, "Comma-separated gene names to render");

  auto* sweep = app.add_subcommand("sweep", "Prompt-ratio sweep of a checkpoint");
  add_common(sweep);
  sweep->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  sweep->add_option("--ratios", ratios_text, "Comma-separated prompt ratios")->required();

  int jobs = 1;
  auto* cv = app.add_subcommand("cv", "Leave-one-patient-out cross-validation");
  add_common(cv);
  cv->add_option("--jobs", jobs, "Folds trained in parallel")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : cli::kInputError;
  }

  return cli::guarded(
      [&]() -> int {
        const auto cfg = resolve(config_file, overrides);
        std::vector<double> ratios;
        for (const auto& r : split_list(ratios_text)) {
          try {
            ratios.push_back(std::stod(r));
          } catch (const std::exception&) {
            throw phg2st::ConfigError("bad ratio '" + r + "'");
          }
        }
        if (*synth) return cli::run_synth(cfg, out_dir, std::cout);
        if (*train) return cli::run_train(cfg, std::cout);
        if (*eval || *sweep) return cli::run_eval(cfg, checkpoint, ratios, split_list(heatmaps_text), std::cout);
        return cli::run_cv(cfg, jobs, std::cout);
      },
      std::cerr);
}
