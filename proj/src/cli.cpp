#include "phg2st/cli.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>

namespace phg2st::cli {

namespace fs = std::filesystem;
using nlohmann::json;

int guarded(const std::function<int()>& body, std::ostream& err) {
  try {
    return body();
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return kNumericalFailure;
  } catch (const CheckpointError& e) {
    err << "checkpoint error: " << e.what() << '\n';
    return kCheckpointError;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kInputError;
  } catch (const json::exception& e) {
    err << "error: " << e.what() << '\n';
    return kInputError;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kInputError;
  }
}

std::vector<SlideBundle> load_bundles(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("data directory not found: " + dir.string());
  std::vector<fs::path> dirs;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_directory() && fs::exists(entry.path() / "meta.json")) dirs.push_back(entry.path());
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty()) throw IoError("no slide bundles under " + dir.string());
  std::vector<SlideBundle> out;
  for (const auto& d : dirs) out.push_back(load_slide_bundle(d));
  return out;
}

namespace {

void echo_config(const RunConfig& cfg, std::ostream& log) { log << "resolved config:\n" << cfg.to_json().dump(2) << '\n'; }

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory " + dir.string());
  const fs::path probe = dir / ".write_probe";
  std::ofstream test(probe);
  if (!test) throw IoError("output directory not writable: " + dir.string());
  test.close();
  fs::remove(probe, ec);
}

std::vector<std::string> sorted_patients(const std::vector<SlideBundle>& bundles) {
  std::set<std::string> s;
  for (const auto& b : bundles) s.insert(b.patient_id);
  return {s.begin(), s.end()};
}

std::vector<SlideBundle> filter(const std::vector<SlideBundle>& bundles, const std::vector<std::string>& patients,
                                bool keep_listed) {
  std::vector<SlideBundle> out;
  for (const auto& b : bundles) {
    const bool listed = std::find(patients.begin(), patients.end(), b.patient_id) != patients.end();
    if (listed == keep_listed) out.push_back(b);
  }
  return out;
}

ModelConfig model_for(const RunConfig& cfg, Index input_dim, Index genes) {
  ModelConfig m = cfg.model;
  m.input_dim = input_dim;
  m.genes = genes;
  m.validate();
  return m;
}

void print_scores(std::ostream& log, const std::string& label, const Scores& s) {
  log << std::left << std::setw(22) << label << std::right << std::fixed << std::setprecision(4) << std::setw(10)
      << s.mae << std::setw(10) << s.ccc << std::setw(10) << s.pcc << '\n';
  log.unsetf(std::ios::floatfield);
}

void print_header(std::ostream& log) {
  log << std::left << std::setw(22) << "" << std::right << std::setw(10) << "MAE(v)" << std::setw(10) << "CCC(^)"
      << std::setw(10) << "PCC(^)" << '\n';
}

constexpr const char* kFirstPrefix = "adam.first.";
constexpr const char* kSecondPrefix = "adam.second.";

}  // namespace

int run_synth(const RunConfig& cfg, const fs::path& out_dir, std::ostream& log) {
  echo_config(cfg, log);
  ensure_dir(out_dir);
  const auto slides =
      generate_synthetic_dataset(cfg.synth.slide, cfg.synth.patients, cfg.synth.slides_per_patient, cfg.seed);
  for (const auto& s : slides) {
    save_slide_bundle(s.bundle, out_dir / s.bundle.slide_id);
    log << s.bundle.slide_id << " patient=" << s.bundle.patient_id << " n=" << s.bundle.n()
        << " d=" << s.bundle.feature_dim() << " m=" << s.bundle.raw_gene_count() << '\n';
  }
  return kSuccess;
}

int run_train(const RunConfig& cfg, std::ostream& log) {
  echo_config(cfg, log);
  const auto bundles = load_bundles(cfg.data_dir);
  const auto patients = sorted_patients(bundles);
  std::vector<std::string> val_patients = cfg.val_patients;
  if (val_patients.empty()) val_patients = {patients.back()};
  auto train_bundles = filter(bundles, val_patients, false);
  const auto val_bundles = filter(bundles, val_patients, true);
  if (val_bundles.empty()) throw ConfigError("no slides belong to the validation patients");
  if (train_bundles.empty()) train_bundles = val_bundles;

  const Index k = std::min(cfg.hvg_genes, bundles.front().raw_gene_count());
  const auto genes = select_hvg(train_bundles, k, cfg.hvg_criterion);
  const auto train = prepare_slides(train_bundles, genes, cfg.graph);
  const auto val = prepare_slides(val_bundles, genes, cfg.graph);
  const ModelConfig model = model_for(cfg, bundles.front().feature_dim(), static_cast<Index>(genes.size()));

  std::optional<ResumeState> resume;
  if (cfg.resume_from) {
    const Checkpoint ck = load_checkpoint(*cfg.resume_from);
    ResumeState rs{init_params(model, cfg.seed), {}, 0};
    restore(rs.params, ck.tensors);
    const json header = json::parse(ck.header_json);
    rs.next_epoch = header.value("next_epoch", Index{0});
    const auto named = rs.params.named_parameters();
    std::map<std::string, const Matrix*> by_name;
    for (const auto& [name, m] : ck.tensors) by_name[name] = &m;
    if (by_name.contains(kFirstPrefix + named.front().first)) {
      for (const auto& [name, t] : named) {
        const auto a = by_name.find(kFirstPrefix + name);
        const auto b = by_name.find(kSecondPrefix + name);
        if (a == by_name.end() || b == by_name.end()) throw CheckpointError("optimizer state lacks " + name);
        rs.adam.first.push_back(*a->second);
        rs.adam.second.push_back(*b->second);
      }
      rs.adam.step = header.value("adam_step", std::int64_t{0});
    }
    log << "resuming from " << cfg.resume_from->string() << " at epoch " << rs.next_epoch << '\n';
    resume = std::move(rs);
  }
  const bool resuming = resume.has_value();

  ensure_dir(cfg.output_dir);
  const FitResult result = fit(train, val, model, cfg.train, std::move(resume), [&](const EpochRecord& r) {
    log << "epoch " << r.epoch << " loss=" << r.train_loss << " lr=" << r.lr << " val_pcc=" << r.val.pcc
        << " val_ccc=" << r.val.ccc << " val_mae=" << r.val.mae << '\n';
  });

  json header;
  header["config"] = json::parse(cfg.to_json().dump());
  header["gene_index"] = genes;
  std::vector<std::string> names;
  for (Index g : genes) names.push_back(bundles.front().gene_names[static_cast<std::size_t>(g)]);
  header["gene_names"] = names;
  header["input_dim"] = model.input_dim;
  header["best_epoch"] = result.best_epoch;
  header["best_val_pcc"] = result.best_val_pcc;
  header["next_epoch"] = result.next_epoch;
  save_checkpoint(cfg.output_dir / "checkpoint.phgc", snapshot(result.best), header.dump());

  auto last = snapshot(result.last);
  const auto named = result.last.named_parameters();
  for (std::size_t i = 0; i < result.adam.first.size(); ++i) {
    last.emplace_back(kFirstPrefix + named[i].first, result.adam.first[i]);
    last.emplace_back(kSecondPrefix + named[i].first, result.adam.second[i]);
  }
  header["adam_step"] = result.adam.step;
  save_checkpoint(cfg.output_dir / "last.phgc", last, header.dump());

  const fs::path history = cfg.output_dir / "history.csv";
  if (resuming && fs::exists(history)) {
    const fs::path extra = cfg.output_dir / "history.resume.csv";
    write_history_csv(result.history, extra);
    std::ifstream in(extra);
    std::ofstream out(history, std::ios::app);
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) out << line << '\n';
    in.close();
    fs::remove(extra);
  } else {
    write_history_csv(result.history, history);
  }
  log << "best epoch " << result.best_epoch << " val_pcc=" << result.best_val_pcc << "; wrote "
      << (cfg.output_dir / "checkpoint.phgc").string() << '\n';
  return kSuccess;
}

int run_eval(const RunConfig& cfg, const fs::path& checkpoint, const std::vector<double>& ratios,
             const std::vector<std::string>& heatmap_genes, std::ostream& log) {
  echo_config(cfg, log);
  const Checkpoint ck = load_checkpoint(checkpoint);
  json header;
  std::vector<Index> genes;
  try {
    header = json::parse(ck.header_json);
    genes = header.at("gene_index").get<std::vector<Index>>();
  } catch (const json::exception& e) {
    throw CheckpointError(checkpoint.string() + ": header lacks gene panel: " + e.what());
  }
  auto bundles = load_bundles(cfg.data_dir);
  if (!cfg.eval_patients.empty()) bundles = filter(bundles, cfg.eval_patients, true);
  if (bundles.empty()) throw ConfigError("no slides to evaluate");
  for (Index g : genes)
    if (g < 0 || g >= bundles.front().raw_gene_count())
      throw CheckpointError("checkpoint gene index " + std::to_string(g) + " outside the data's gene panel");

  const ModelConfig model = model_for(cfg, bundles.front().feature_dim(), static_cast<Index>(genes.size()));
  ModelParams params = init_params(model, cfg.seed);
  restore(params, ck.tensors);

  const auto slides = prepare_slides(bundles, genes, cfg.graph);
  std::vector<std::string> names;
  for (Index g : genes) names.push_back(bundles.front().gene_names[static_cast<std::size_t>(g)]);

  ensure_dir(cfg.output_dir);
  const EvalReport report = evaluate_report(params, model, slides, names, cfg.train.eval_prompt_ratio, cfg.seed);
  {
    std::ofstream out(cfg.output_dir / "eval_report.json");
    if (!out) throw IoError("cannot write eval report");
    out << to_json(report) << '\n';
  }
  print_header(log);
  for (const auto& s : report.folds.front().slides) print_scores(log, s.slide_id, s.unprompted);
  print_scores(log, "mean (unprompted)", report.aggregate);
  print_scores(log, "mean (all spots)", report.aggregate_all_spots);

  if (!ratios.empty()) {
    const auto rows = prompt_ratio_sweep(params, model, slides, ratios, cfg.seed);
    write_sweep_csv(rows, cfg.output_dir / "sweep.csv");
    for (const auto& r : rows) print_scores(log, "ratio " + std::to_string(r.ratio), r.unprompted);
  }

  if (!heatmap_genes.empty()) {
    const fs::path dir = cfg.output_dir / "heatmaps";
    ensure_dir(dir);
    for (const auto& gene : heatmap_genes) {
      const auto it = std::find(names.begin(), names.end(), gene);
      if (it == names.end()) throw ConfigError("heatmap gene '" + gene + "' is not in the model's gene panel");
      const auto col = static_cast<Index>(it - names.begin());
      for (const auto& s : slides) {
        Rng mask_rng(cfg.seed);
        const auto masked = mask_expression(s.expression, cfg.train.eval_prompt_ratio, mask_rng);
        Rng rng(cfg.seed);
        const Matrix pred = forward(s, masked.values, params, model, false, rng).p_fused.value();
        const Vector p = pred.col(col), t = s.expression.col(col);
        write_heatmap(std::span<const double>(p.data(), static_cast<std::size_t>(p.size())), s.grid,
                      dir / (s.slide_id + "_" + gene + "_pred.pgm"));
        write_heatmap(std::span<const double>(t.data(), static_cast<std::size_t>(t.size())), s.grid,
                      dir / (s.slide_id + "_" + gene + "_truth.pgm"));
      }
    }
  }
  return kSuccess;
}

int run_cv(const RunConfig& cfg, int jobs, std::ostream& log) {
  echo_config(cfg, log);
  const auto bundles = load_bundles(cfg.data_dir);
  ExperimentConfig ex;
  ex.model = cfg.model;
  ex.train = cfg.train;
  ex.graph = cfg.graph;
  ex.hvg_genes = cfg.hvg_genes;
  ex.hvg_criterion = cfg.hvg_criterion;
  ex.std_over_slides = cfg.std_over_slides;
  ex.jobs = jobs;
  ensure_dir(cfg.output_dir);
  const EvalReport report = cross_validate(bundles, ex);
  {
    std::ofstream out(cfg.output_dir / "cv_summary.json");
    if (!out) throw IoError("cannot write cv summary");
    out << to_json(report) << '\n';
  }
  print_header(log);
  for (const auto& f : report.folds) print_scores(log, "fold " + f.split.test_patient, f.aggregate);
  log << std::fixed << std::setprecision(3) << "summary (over " << (report.std_over_slides ? "slides" : "folds")
      << "): MAE " << report.mae.mean << "+-" << report.mae.std << "  CCC " << report.ccc.mean << "+-"
      << report.ccc.std << "  PCC " << report.pcc.mean << "+-" << report.pcc.std << '\n';
  log.unsetf(std::ios::floatfield);
  return kSuccess;
}

}  // namespace phg2st::cli
