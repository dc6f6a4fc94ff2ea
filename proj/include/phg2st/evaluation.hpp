#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "phg2st/data.hpp"
#include "phg2st/metrics.hpp"
#include "phg2st/training.hpp"

namespace phg2st {

/// Everything a cross-validation run needs besides the data.
struct ExperimentConfig {
  ModelConfig model;
  TrainConfig train;
  HypergraphOptions graph;
  Index hvg_genes = 1000;
  HvgCriterion hvg_criterion = HvgCriterion::kLogNormalizedVariance;
  /// Report mean/std over test slides instead of over folds.
  bool std_over_slides = false;
  int jobs = 1;
};

struct FoldSplit {
  std::string test_patient;
  std::string val_patient;
  std::vector<std::string> train_patients;
};

/// One fold per patient. The validation patient rotates through the
/// remaining ones; with only two patients the single remaining patient is
/// used for both training and validation.
std::vector<FoldSplit> leave_one_patient_out(std::span<const std::string> patient_ids);

/// Normalizes each bundle onto the `genes` panel and builds its hypergraphs.
std::vector<PreparedSlide> prepare_slides(std::span<const SlideBundle> slides, std::span<const Index> genes,
                                          const HypergraphOptions& graph);

struct MetricSummary {
  double mean = 0;
  double std = 0;  // population standard deviation
};

MetricSummary summarize(std::span<const double> values);

struct FoldReport {
  FoldSplit split;
  std::vector<SlideEvaluation> slides;
  std::vector<std::string> gene_names;
  Scores aggregate;            // mean over test slides, unprompted spots
  Scores aggregate_all_spots;  // mean over test slides, every spot
  Index best_epoch = -1;
  Index epochs_run = 0;
};

struct EvalReport {
  std::vector<std::string> gene_names;
  Matrix per_gene;  // genes x (mae, pcc, ccc), mean over folds containing the gene
  Scores aggregate;
  Scores aggregate_all_spots;
  std::vector<FoldReport> folds;
  MetricSummary mae, pcc, ccc;
  bool std_over_slides = false;
};

/// Leave-one-patient-out: HVG selection, training with early stopping on
/// the validation patient, and evaluation of the held-out patient per fold.
EvalReport cross_validate(std::span<const SlideBundle> bundles, const ExperimentConfig& cfg);

/// Single-model report over `slides` (one pseudo-fold).
EvalReport evaluate_report(const ModelParams& params, const ModelConfig& cfg, std::span<const PreparedSlide> slides,
                           std::span<const std::string> gene_names, double prompt_ratio, std::uint64_t seed);

std::string to_json(const EvalReport& report);

struct SweepRow {
  double ratio = 0;
  Scores unprompted;
  Scores all_spots;
};

/// Evaluates every ratio with the same seed; scores are means over slides.
std::vector<SweepRow> prompt_ratio_sweep(const ModelParams& params, const ModelConfig& cfg,
                                         std::span<const PreparedSlide> slides, std::span<const double> ratios,
                                         std::uint64_t seed);

void write_sweep_csv(std::span<const SweepRow> rows, const std::filesystem::path& file);

}  // namespace phg2st
