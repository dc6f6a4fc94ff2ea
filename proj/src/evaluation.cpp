#include "phg2st/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <future>
#include <map>
#include <numeric>
#include <set>

#include <json.hpp>

namespace phg2st {

std::vector<FoldSplit> leave_one_patient_out(std::span<const std::string> patient_ids) {
  const std::set<std::string> unique(patient_ids.begin(), patient_ids.end());
  const std::vector<std::string> patients(unique.begin(), unique.end());
  if (patients.size() < 2) throw ConfigError("cross-validation needs at least 2 patients, found " + std::to_string(patients.size()));

  std::vector<FoldSplit> folds;
  for (std::size_t f = 0; f < patients.size(); ++f) {
    std::vector<std::string> rest;
    for (std::size_t p = 0; p < patients.size(); ++p)
      if (p != f) rest.push_back(patients[p]);
    FoldSplit split;
    split.test_patient = patients[f];
    split.val_patient = rest[f % rest.size()];
    for (const auto& p : rest)
      if (p != split.val_patient) split.train_patients.push_back(p);
    if (split.train_patients.empty()) split.train_patients.push_back(split.val_patient);
    folds.push_back(std::move(split));
  }
  return folds;
}

std::vector<PreparedSlide> prepare_slides(std::span<const SlideBundle> slides, std::span<const Index> genes,
                                          const HypergraphOptions& graph) {
  std::vector<PreparedSlide> out;
  out.reserve(slides.size());
  for (const auto& b : slides) out.push_back(prepare_slide(b, normalize_counts(b.counts, genes, b.gene_names), graph));
  return out;
}

MetricSummary summarize(std::span<const double> values) {
  MetricSummary s;
  if (values.empty()) return s;
  const auto n = static_cast<double>(values.size());
  // Shift by the first value so identical inputs give an exact zero spread.
  const double ref = values.front();
  double shift = 0;
  for (double v : values) shift += v - ref;
  shift /= n;
  s.mean = ref + shift;
  double var = 0;
  for (double v : values) var += (v - ref - shift) * (v - ref - shift);
  s.std = std::sqrt(var / n);
  return s;
}

namespace {

Scores mean_scores(std::span<const SlideEvaluation> slides, bool unprompted) {
  Scores m;
  for (const auto& s : slides) {
    const Scores& sc = unprompted ? s.unprompted : s.all_spots;
    m.mae += sc.mae;
    m.pcc += sc.pcc;
    m.ccc += sc.ccc;
  }
  const auto k = static_cast<double>(std::max<std::size_t>(slides.size(), 1));
  return {m.mae / k, m.pcc / k, m.ccc / k};
}

// Builds the cross-fold summary from finished folds.
EvalReport assemble(std::vector<FoldReport> folds, bool std_over_slides) {
  EvalReport r;
  r.folds = std::move(folds);
  r.std_over_slides = std_over_slides;

  std::map<std::string, std::pair<Eigen::RowVector3d, int>> by_gene;
  std::vector<std::string> order;
  std::vector<double> mae_v, pcc_v, ccc_v;
  Scores all;
  for (const auto& f : r.folds) {
    for (const auto& s : f.slides) {
      for (std::size_t g = 0; g < f.gene_names.size(); ++g) {
        auto [it, fresh] = by_gene.try_emplace(f.gene_names[g], Eigen::RowVector3d::Zero(), 0);
        if (fresh) order.push_back(f.gene_names[g]);
        it->second.first += s.per_gene.row(static_cast<Index>(g));
        ++it->second.second;
      }
      if (std_over_slides) {
        mae_v.push_back(s.unprompted.mae);
        pcc_v.push_back(s.unprompted.pcc);
        ccc_v.push_back(s.unprompted.ccc);
      }
    }
    if (!std_over_slides) {
      mae_v.push_back(f.aggregate.mae);
      pcc_v.push_back(f.aggregate.pcc);
      ccc_v.push_back(f.aggregate.ccc);
    }
    all.mae += f.aggregate_all_spots.mae;
    all.pcc += f.aggregate_all_spots.pcc;
    all.ccc += f.aggregate_all_spots.ccc;
  }
  r.gene_names = order;
  r.per_gene.resize(static_cast<Index>(order.size()), 3);
  for (std::size_t g = 0; g < order.size(); ++g) {
    const auto& [sum, count] = by_gene.at(order[g]);
    r.per_gene.row(static_cast<Index>(g)) = sum / count;
  }
  r.mae = summarize(mae_v);
  r.pcc = summarize(pcc_v);
  r.ccc = summarize(ccc_v);
  r.aggregate = {r.mae.mean, r.pcc.mean, r.ccc.mean};
  const auto k = static_cast<double>(std::max<std::size_t>(r.folds.size(), 1));
  r.aggregate_all_spots = {all.mae / k, all.pcc / k, all.ccc / k};
  return r;
}

}  // namespace

EvalReport cross_validate(std::span<const SlideBundle> bundles, const ExperimentConfig& cfg) {
  std::vector<std::string> patients;
  for (const auto& b : bundles) patients.push_back(b.patient_id);
  const auto splits = leave_one_patient_out(patients);
  cfg.train.validate();

  // Hypergraphs depend only on features and coordinates, so build them once.
  std::vector<Index> all_genes(static_cast<std::size_t>(bundles.front().raw_gene_count()));
  std::iota(all_genes.begin(), all_genes.end(), Index{0});
  const std::vector<PreparedSlide> base = prepare_slides(bundles, all_genes, cfg.graph);

  const Rng root(cfg.train.seed);
  auto run_fold = [&](std::size_t f) {
    const FoldSplit& split = splits[f];
    auto pick = [&](auto&& pred) {
      std::vector<std::size_t> idx;
      for (std::size_t i = 0; i < bundles.size(); ++i)
        if (pred(bundles[i].patient_id)) idx.push_back(i);
      return idx;
    };
    const auto train_idx = pick([&](const std::string& p) {
      return std::find(split.train_patients.begin(), split.train_patients.end(), p) != split.train_patients.end();
    });
    const auto val_idx = pick([&](const std::string& p) { return p == split.val_patient; });
    const auto test_idx = pick([&](const std::string& p) { return p == split.test_patient; });

    std::vector<SlideBundle> train_bundles;
    for (auto i : train_idx) train_bundles.push_back(bundles[i]);
    const Index k = std::min(cfg.hvg_genes, bundles.front().raw_gene_count());
    const auto genes = select_hvg(train_bundles, k, cfg.hvg_criterion);

    auto with_panel = [&](const std::vector<std::size_t>& idx) {
      std::vector<PreparedSlide> out;
      for (auto i : idx) {
        PreparedSlide s = base[i];
        s.expression = normalize_counts(bundles[i].counts, genes).values;
        out.push_back(std::move(s));
      }
      return out;
    };
    const auto train = with_panel(train_idx);
    const auto val = with_panel(val_idx);
    const auto test = with_panel(test_idx);

    ModelConfig model = cfg.model;
    model.genes = static_cast<Index>(genes.size());
    model.input_dim = bundles.front().feature_dim();
    TrainConfig tc = cfg.train;
    tc.seed = root.split(f).next_u64();
    const FitResult fitted = fit(train, val, model, tc);

    FoldReport report;
    report.split = split;
    for (Index g : genes) report.gene_names.push_back(bundles.front().gene_names[static_cast<std::size_t>(g)]);
    for (const auto& s : test)
      report.slides.push_back(evaluate_slide(fitted.best, model, s, cfg.train.eval_prompt_ratio, cfg.train.seed));
    report.aggregate = mean_scores(report.slides, true);
    report.aggregate_all_spots = mean_scores(report.slides, false);
    report.best_epoch = fitted.best_epoch;
    report.epochs_run = static_cast<Index>(fitted.history.size());
    return report;
  };

  std::vector<FoldReport> folds(splits.size());
  const auto jobs = static_cast<std::size_t>(std::max(cfg.jobs, 1));
  for (std::size_t start = 0; start < splits.size(); start += jobs) {
    std::vector<std::future<FoldReport>> running;
    for (std::size_t f = start; f < std::min(start + jobs, splits.size()); ++f)
      running.push_back(std::async(jobs == 1 ? std::launch::deferred : std::launch::async, run_fold, f));
    for (std::size_t j = 0; j < running.size(); ++j) folds[start + j] = running[j].get();
  }
  return assemble(std::move(folds), cfg.std_over_slides);
}

EvalReport evaluate_report(const ModelParams& params, const ModelConfig& cfg, std::span<const PreparedSlide> slides,
                           std::span<const std::string> gene_names, double prompt_ratio, std::uint64_t seed) {
  FoldReport f;
  f.split.test_patient = "all";
  f.gene_names.assign(gene_names.begin(), gene_names.end());
  for (const auto& s : slides) f.slides.push_back(evaluate_slide(params, cfg, s, prompt_ratio, seed));
  f.aggregate = mean_scores(f.slides, true);
  f.aggregate_all_spots = mean_scores(f.slides, false);
  std::vector<FoldReport> folds;
  folds.push_back(std::move(f));
  return assemble(std::move(folds), true);
}

namespace {

nlohmann::json scores_json(const Scores& s) { return {{"mae", s.mae}, {"pcc", s.pcc}, {"ccc", s.ccc}}; }
nlohmann::json summary_json(const MetricSummary& s) { return {{"mean", s.mean}, {"std", s.std}}; }

}  // namespace

std::string to_json(const EvalReport& report) {
  nlohmann::ordered_json j;
  nlohmann::json genes = nlohmann::json::array();
  for (std::size_t g = 0; g < report.gene_names.size(); ++g) {
    const auto row = report.per_gene.row(static_cast<Index>(g));
    genes.push_back({{"gene", report.gene_names[g]}, {"mae", row[0]}, {"pcc", row[1]}, {"ccc", row[2]}});
  }
  j["per_gene"] = genes;
  j["aggregate"] = scores_json(report.aggregate);
  j["aggregate_all_spots"] = scores_json(report.aggregate_all_spots);
  nlohmann::json folds = nlohmann::json::array();
  for (const auto& f : report.folds) {
    nlohmann::json slides = nlohmann::json::array();
    for (const auto& s : f.slides)
      slides.push_back({{"slide_id", s.slide_id},
                        {"prompted_spots", s.prompted_spots},
                        {"unprompted", scores_json(s.unprompted)},
                        {"all_spots", scores_json(s.all_spots)}});
    folds.push_back({{"test_patient", f.split.test_patient},
                     {"val_patient", f.split.val_patient},
                     {"train_patients", f.split.train_patients},
                     {"best_epoch", f.best_epoch},
                     {"epochs_run", f.epochs_run},
                     {"aggregate", scores_json(f.aggregate)},
                     {"aggregate_all_spots", scores_json(f.aggregate_all_spots)},
                     {"slides", slides}});
  }
  j["per_fold"] = folds;
  j["summary"] = {{"over", report.std_over_slides ? "slides" : "folds"},
                  {"mae", summary_json(report.mae)},
                  {"pcc", summary_json(report.pcc)},
                  {"ccc", summary_json(report.ccc)}};
  return j.dump(2);
}

std::vector<SweepRow> prompt_ratio_sweep(const ModelParams& params, const ModelConfig& cfg,
                                         std::span<const PreparedSlide> slides, std::span<const double> ratios,
                                         std::uint64_t seed) {
  std::vector<SweepRow> rows;
  for (double r : ratios) {
    SweepRow row;
    row.ratio = r;
    std::vector<SlideEvaluation> evs;
    for (const auto& s : slides) evs.push_back(evaluate_slide(params, cfg, s, r, seed));
    row.unprompted = mean_scores(evs, true);
    row.all_spots = mean_scores(evs, false);
    rows.push_back(row);
  }
  return rows;
}

void write_sweep_csv(std::span<const SweepRow> rows, const std::filesystem::path& file) {
  std::ofstream out(file);
  if (!out) throw IoError("cannot write " + file.string());
  out << "ratio,mae,pcc,ccc,mae_all_spots,pcc_all_spots,ccc_all_spots\n";
  out.precision(10);
  for (const auto& r : rows)
    out << r.ratio << ',' << r.unprompted.mae << ',' << r.unprompted.pcc << ',' << r.unprompted.ccc << ','
        << r.all_spots.mae << ',' << r.all_spots.pcc << ',' << r.all_spots.ccc << '\n';
}

}  // namespace phg2st
