#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "phg2st/error.hpp"
#include "phg2st/model.hpp"

namespace phg2st {

// Population moments throughout. Inputs are any Eigen vector expressions of
// matching length.

template <typename DX, typename DY>
typename DX::Scalar mae(const Eigen::DenseBase<DX>& pred, const Eigen::DenseBase<DY>& truth) {
  if (pred.size() != truth.size()) throw DimensionError("mae: length mismatch");
  if (pred.size() == 0) throw ParameterError("mae: empty input");
  return (pred.derived().array() - truth.derived().array()).abs().mean();
}

/// Pearson correlation; 0 when either side has zero variance.
template <typename DX, typename DY>
typename DX::Scalar pcc(const Eigen::DenseBase<DX>& x, const Eigen::DenseBase<DY>& y) {
  using S = typename DX::Scalar;
  if (x.size() != y.size()) throw DimensionError("pcc: length mismatch");
  if (x.size() < 2) throw ParameterError("pcc: need at least 2 samples");
  const auto dx = (x.derived().array() - x.derived().mean()).eval();
  const auto dy = (y.derived().array() - y.derived().mean()).eval();
  const S sxx = dx.square().sum(), syy = dy.square().sum();
  if (sxx <= S(0) || syy <= S(0)) return S(0);
  return (dx * dy).sum() / std::sqrt(sxx * syy);
}

/// Lin's concordance correlation 2 cov / (var_x + var_y + (mu_x - mu_y)^2).
/// Two equal constants give 1; any other zero denominator gives 0.
template <typename DX, typename DY>
typename DX::Scalar ccc(const Eigen::DenseBase<DX>& x, const Eigen::DenseBase<DY>& y) {
  using S = typename DX::Scalar;
  if (x.size() != y.size()) throw DimensionError("ccc: length mismatch");
  if (x.size() < 2) throw ParameterError("ccc: need at least 2 samples");
  const S n = static_cast<S>(x.size());
  const S mx = x.derived().mean(), my = y.derived().mean();
  const auto dx = (x.derived().array() - mx).eval();
  const auto dy = (y.derived().array() - my).eval();
  const S vx = dx.square().sum() / n, vy = dy.square().sum() / n, cov = (dx * dy).sum() / n;
  const S denom = vx + vy + (mx - my) * (mx - my);
  if (denom <= S(0)) return vx == S(0) && vy == S(0) && mx == my ? S(1) : S(0);
  return S(2) * cov / denom;
}

struct Scores {
  double mae = 0;
  double pcc = 0;
  double ccc = 0;
};

/// Per-gene metrics over the selected rows (all rows when `rows` is empty),
/// one row per gene with columns (mae, pcc, ccc).
Matrix per_gene_metrics(const Eigen::Ref<const Matrix>& pred, const Eigen::Ref<const Matrix>& truth,
                        const std::vector<bool>& rows = {});
Scores mean_over_genes(const Eigen::Ref<const Matrix>& per_gene);

struct SlideEvaluation {
  std::string slide_id;
  std::string patient_id;
  Matrix per_gene;        // m x 3, unprompted spots only
  Scores unprompted;      // primary score
  Scores all_spots;
  Index prompted_spots = 0;
};

/// Fixed seeded prompt mask at `prompt_ratio`, inference-mode forward, metrics
/// on p_fused. The primary score excludes prompted spots; with fewer than two
/// unprompted spots it falls back to all spots.
SlideEvaluation evaluate_slide(const ModelParams& params, const ModelConfig& cfg, const PreparedSlide& slide,
                               double prompt_ratio, std::uint64_t seed);

}  // namespace phg2st
