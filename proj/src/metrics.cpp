#include "phg2st/metrics.hpp"

namespace phg2st {

Matrix per_gene_metrics(const Eigen::Ref<const Matrix>& pred, const Eigen::Ref<const Matrix>& truth,
                        const std::vector<bool>& rows) {
  if (pred.rows() != truth.rows() || pred.cols() != truth.cols())
    throw DimensionError("per_gene_metrics: prediction and truth shapes differ");
  std::vector<Index> keep;
  for (Index i = 0; i < pred.rows(); ++i)
    if (rows.empty() || rows[static_cast<std::size_t>(i)]) keep.push_back(i);
  Matrix out(pred.cols(), 3);
  for (Index g = 0; g < pred.cols(); ++g) {
    const Vector p = pred.col(g)(keep);
    const Vector t = truth.col(g)(keep);
    out(g, 0) = mae(p, t);
    out(g, 1) = pcc(p, t);
    out(g, 2) = ccc(p, t);
  }
  return out;
}

Scores mean_over_genes(const Eigen::Ref<const Matrix>& per_gene) {
  const Eigen::RowVectorXd m = per_gene.colwise().mean();
  return {m[0], m[1], m[2]};
}

SlideEvaluation evaluate_slide(const ModelParams& params, const ModelConfig& cfg, const PreparedSlide& slide,
                               double prompt_ratio, std::uint64_t seed) {
  Rng mask_rng(seed);
  const MaskedExpression masked = mask_expression(slide.expression, prompt_ratio, mask_rng);
  Rng rng(seed ^ 0x5eedULL);
  const ForwardOutputs out = forward(slide, masked.values, params, cfg, /*training=*/false, rng);
  const Matrix pred = out.p_fused.value();

  SlideEvaluation ev;
  ev.slide_id = slide.slide_id;
  ev.patient_id = slide.patient_id;
  ev.prompted_spots = masked.kept_count();
  const Matrix all = per_gene_metrics(pred, slide.expression);
  ev.all_spots = mean_over_genes(all);
  if (slide.n - ev.prompted_spots >= 2) {
    std::vector<bool> unprompted(masked.kept.size());
    for (std::size_t i = 0; i < unprompted.size(); ++i) unprompted[i] = !masked.kept[i];
    ev.per_gene = per_gene_metrics(pred, slide.expression, unprompted);
  } else {
    ev.per_gene = all;
  }
  ev.unprompted = mean_over_genes(ev.per_gene);
  return ev;
}

}  // namespace phg2st
