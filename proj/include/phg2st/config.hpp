#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "phg2st/data.hpp"
#include "phg2st/evaluation.hpp"
#include "phg2st/hypergraph.hpp"
#include "phg2st/model.hpp"
#include "phg2st/training.hpp"

namespace phg2st {

struct SynthDatasetConfig {
  SynthConfig slide;
  Index patients = 4;
  Index slides_per_patient = 1;
};

/// Fully resolved run configuration. Every field has a default; JSON input
/// only overrides, and unknown keys are rejected.
struct RunConfig {
  std::uint64_t seed = 0;
  std::filesystem::path data_dir = "data";
  std::filesystem::path output_dir = "runs";
  /// Patients held out for validation by `train` (default: last patient in
  /// sorted order when there are at least two).
  std::vector<std::string> val_patients;
  /// Patients scored by `eval` (default: all).
  std::vector<std::string> eval_patients;
  std::optional<std::filesystem::path> resume_from;

  SynthDatasetConfig synth;
  ModelConfig model;
  TrainConfig train;
  HypergraphOptions graph;  // graph.k mirrors train.k_hyper
  Index hvg_genes = 1000;
  HvgCriterion hvg_criterion = HvgCriterion::kLogNormalizedVariance;
  bool std_over_slides = false;

  nlohmann::ordered_json to_json() const;
};

/// Applies `j` on top of defaults. ConfigError on unknown keys or bad values.
RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& file);

/// Applies a dotted override such as "train.max_epochs=5"; the value is read
/// as JSON, falling back to a plain string.
void apply_override(nlohmann::json& j, const std::string& assignment);

}  // namespace phg2st
