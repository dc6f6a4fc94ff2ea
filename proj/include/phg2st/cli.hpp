#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "phg2st/config.hpp"

namespace phg2st::cli {

enum ExitCode : int { kSuccess = 0, kNumericalFailure = 1, kInputError = 2, kCheckpointError = 3 };

/// Runs `body`, translating library exceptions into the exit-code contract
/// and printing the message to `err`.
int guarded(const std::function<int()>& body, std::ostream& err);

/// Every subdirectory of `dir` holding a meta.json, in name order.
std::vector<SlideBundle> load_bundles(const std::filesystem::path& dir);

int run_synth(const RunConfig& cfg, const std::filesystem::path& out_dir, std::ostream& log);
int run_train(const RunConfig& cfg, std::ostream& log);
int run_eval(const RunConfig& cfg, const std::filesystem::path& checkpoint, const std::vector<double>& ratios,
             const std::vector<std::string>& heatmap_genes, std::ostream& log);
int run_cv(const RunConfig& cfg, int jobs, std::ostream& log);

}  // namespace phg2st::cli
