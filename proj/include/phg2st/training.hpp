#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "phg2st/metrics.hpp"
#include "phg2st/model.hpp"

namespace phg2st {

struct TrainConfig {
  double lr = 1e-4;
  Index step_size = 50;
  double decay = 0.9;
  Index max_epochs = 200;
  Index patience = 20;
  double lambda = 0.3;
  Index k_hyper = 4;
  double train_prompt_ratio = 0.3;
  double eval_prompt_ratio = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
};

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t step = 0;
  std::vector<Matrix> first;
  std::vector<Matrix> second;
};

/// One bias-corrected Adam update of every parameter, in place. A missing
/// gradient counts as zero. Throws NumericalError naming the first parameter
/// with a non-finite gradient before touching anything.
void adam_step(std::span<const std::pair<std::string, Tensor>> params, AdamState& state, double lr);

/// lr * decay^floor(epoch / step_size).
double lr_at(Index epoch, const TrainConfig& cfg);

struct EpochRecord {
  Index epoch = 0;
  double train_loss = 0;
  double lr = 0;
  Scores val;
};

struct ResumeState {
  ModelParams params;
  AdamState adam;
  Index next_epoch = 0;
};

struct FitResult {
  ModelParams best;        // parameters of the best-validation epoch
  ModelParams last;        // parameters after the final epoch
  AdamState adam;          // optimizer state after the final epoch
  std::vector<EpochRecord> history;
  Index best_epoch = -1;
  double best_val_pcc = -std::numeric_limits<double>::infinity();
  Index next_epoch = 0;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// One Adam step per training slide per epoch with a fresh prompt mask, then
/// mean unprompted PCC on the validation slides at eval_prompt_ratio. Stops at
/// max_epochs or after `patience` epochs without strict improvement (at
/// least one).
FitResult fit(std::span<const PreparedSlide> train, std::span<const PreparedSlide> val, const ModelConfig& model_cfg,
              const TrainConfig& cfg, std::optional<ResumeState> resume = std::nullopt,
              const EpochCallback& on_epoch = {});

/// Mean over slides of the unprompted-spot scores.
Scores evaluate_slides(const ModelParams& params, const ModelConfig& cfg, std::span<const PreparedSlide> slides,
                       double prompt_ratio, std::uint64_t seed);

void write_history_csv(std::span<const EpochRecord> history, const std::filesystem::path& file);

}  // namespace phg2st
