#include "phg2st/config.hpp"

#include <fstream>
#include <set>

namespace phg2st {

namespace {

using nlohmann::json;

void reject_unknown(const json& obj, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw ConfigError(where + " must be an object");
  const std::set<std::string> keys(allowed.begin(), allowed.end());
  for (const auto& [key, _] : obj.items())
    if (!keys.contains(key)) throw ConfigError("unknown config key '" + (where.empty() ? key : where + "." + key) + "'");
}

template <typename T>
void read(const json& obj, const char* key, T& out, const std::string& where) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("config key '" + where + "." + key + "': " + e.what());
  }
}

template <typename E>
void read_enum(const json& obj, const char* key, E& out, const std::string& where,
               std::initializer_list<std::pair<const char*, E>> names) {
  if (!obj.contains(key)) return;
  const auto value = obj.at(key).is_string() ? obj.at(key).get<std::string>() : std::string("<non-string>");
  for (const auto& [name, e] : names)
    if (value == name) {
      out = e;
      return;
    }
  throw ConfigError("config key '" + where + "." + key + "' has unsupported value '" + value + "'");
}

const char* name_of(AttentionScope s) { return s == AttentionScope::kGlobal ? "global" : "local"; }
const char* name_of(DistanceNorm n) { return n == DistanceNorm::kMinMax ? "minmax" : "zscore"; }
const char* name_of(EdgeWeightMode m) { return m == EdgeWeightMode::kAffinity ? "affinity" : "distance"; }
const char* name_of(HvgCriterion c) { return c == HvgCriterion::kLogNormalizedVariance ? "log_normalized" : "raw"; }

}  // namespace

RunConfig parse_run_config(const json& j) {
  RunConfig c;
  reject_unknown(j, "", {"seed", "data_dir", "output_dir", "val_patients", "eval_patients", "resume_from", "synth",
                         "model", "train", "graph", "genes", "eval"});
  read(j, "seed", c.seed, "");
  if (j.contains("data_dir")) c.data_dir = j.at("data_dir").get<std::string>();
  if (j.contains("output_dir")) c.output_dir = j.at("output_dir").get<std::string>();
  read(j, "val_patients", c.val_patients, "");
  read(j, "eval_patients", c.eval_patients, "");
  if (j.contains("resume_from") && !j.at("resume_from").is_null())
    c.resume_from = j.at("resume_from").get<std::string>();

  if (j.contains("synth")) {
    const auto& s = j.at("synth");
    reject_unknown(s, "synth", {"n_rows", "n_cols", "d", "m", "latent_dim", "noise_sigma", "map_seed", "library_size",
                                "expression_scale", "patient_shift", "patients", "slides_per_patient"});
    auto& sc = c.synth.slide;
    read(s, "n_rows", sc.n_rows, "synth");
    read(s, "n_cols", sc.n_cols, "synth");
    read(s, "d", sc.d, "synth");
    read(s, "m", sc.m, "synth");
    read(s, "latent_dim", sc.latent_dim, "synth");
    read(s, "noise_sigma", sc.noise_sigma, "synth");
    read(s, "map_seed", sc.map_seed, "synth");
    read(s, "library_size", sc.library_size, "synth");
    read(s, "expression_scale", sc.expression_scale, "synth");
    read(s, "patient_shift", sc.patient_shift, "synth");
    read(s, "patients", c.synth.patients, "synth");
    read(s, "slides_per_patient", c.synth.slides_per_patient, "synth");
  }
  if (j.contains("model")) {
    const auto& m = j.at("model");
    reject_unknown(m, "model", {"width", "prompt_width", "attn_width", "heads", "cross_heads", "blocks", "mlp_ratio",
                                "dropout", "use_spot_branch", "use_neighbor_branch", "attention_scope",
                                "guidance_residual"});
    auto& mc = c.model;
    read(m, "width", mc.width, "model");
    read(m, "prompt_width", mc.prompt_width, "model");
    read(m, "attn_width", mc.attn_width, "model");
    read(m, "heads", mc.heads, "model");
    read(m, "cross_heads", mc.cross_heads, "model");
    read(m, "blocks", mc.blocks, "model");
    read(m, "mlp_ratio", mc.mlp_ratio, "model");
    read(m, "dropout", mc.dropout, "model");
    read(m, "use_spot_branch", mc.use_spot_branch, "model");
    read(m, "use_neighbor_branch", mc.use_neighbor_branch, "model");
    read_enum(m, "attention_scope", mc.attention_scope, "model",
              {{"global", AttentionScope::kGlobal}, {"local", AttentionScope::kLocal}});
    read(m, "guidance_residual", mc.guidance_residual, "model");
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    reject_unknown(t, "train", {"lr", "step_size", "decay", "max_epochs", "patience", "lambda", "k_hyper",
                                "train_prompt_ratio", "eval_prompt_ratio"});
    auto& tc = c.train;
    read(t, "lr", tc.lr, "train");
    read(t, "step_size", tc.step_size, "train");
    read(t, "decay", tc.decay, "train");
    read(t, "max_epochs", tc.max_epochs, "train");
    read(t, "patience", tc.patience, "train");
    read(t, "lambda", tc.lambda, "train");
    read(t, "k_hyper", tc.k_hyper, "train");
    read(t, "train_prompt_ratio", tc.train_prompt_ratio, "train");
    read(t, "eval_prompt_ratio", tc.eval_prompt_ratio, "train");
  }
  if (j.contains("graph")) {
    const auto& g = j.at("graph");
    reject_unknown(g, "graph", {"norm", "edge_weight"});
    read_enum(g, "norm", c.graph.norm, "graph", {{"minmax", DistanceNorm::kMinMax}, {"zscore", DistanceNorm::kZScore}});
    read_enum(g, "edge_weight", c.graph.weight_mode, "graph",
              {{"affinity", EdgeWeightMode::kAffinity}, {"distance", EdgeWeightMode::kDistance}});
  }
  if (j.contains("genes")) {
    const auto& g = j.at("genes");
    reject_unknown(g, "genes", {"hvg", "criterion"});
    read(g, "hvg", c.hvg_genes, "genes");
    read_enum(g, "criterion", c.hvg_criterion, "genes",
              {{"log_normalized", HvgCriterion::kLogNormalizedVariance}, {"raw", HvgCriterion::kRawVariance}});
  }
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    reject_unknown(e, "eval", {"std_over"});
    std::string over = "folds";
    read(e, "std_over", over, "eval");
    if (over != "folds" && over != "slides") throw ConfigError("eval.std_over must be 'folds' or 'slides'");
    c.std_over_slides = over == "slides";
  }
  c.graph.k = c.train.k_hyper;
  c.train.seed = c.seed;
  c.train.validate();
  if (c.hvg_genes < 1) throw ConfigError("genes.hvg must be >= 1");
  return c;
}

RunConfig load_run_config(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw ConfigError("cannot open config " + file.string());
  try {
    return parse_run_config(json::parse(in));
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + file.string() + ": " + e.what());
  }
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key.path=value: " + assignment);
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot - start);
    if (!node->is_object()) *node = json::object();
    if (dot == std::string::npos) {
      (*node)[key] = value;
      break;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

nlohmann::ordered_json RunConfig::to_json() const {
  nlohmann::ordered_json j;
  j["seed"] = seed;
  j["data_dir"] = data_dir.string();
  j["output_dir"] = output_dir.string();
  j["val_patients"] = val_patients;
  j["eval_patients"] = eval_patients;
  j["resume_from"] = resume_from ? nlohmann::ordered_json(resume_from->string()) : nlohmann::ordered_json(nullptr);
  const auto& s = synth.slide;
  j["synth"] = {{"n_rows", s.n_rows},         {"n_cols", s.n_cols},
                {"d", s.d},                   {"m", s.m},
                {"latent_dim", s.latent_dim}, {"noise_sigma", s.noise_sigma},
                {"map_seed", s.map_seed},     {"library_size", s.library_size},
                {"expression_scale", s.expression_scale},
                {"patient_shift", s.patient_shift}, {"patients", synth.patients},
                {"slides_per_patient", synth.slides_per_patient}};
  j["model"] = {{"width", model.width},
                {"prompt_width", model.prompt_width},
                {"attn_width", model.attn_width},
                {"heads", model.heads},
                {"cross_heads", model.cross_heads},
                {"blocks", model.blocks},
                {"mlp_ratio", model.mlp_ratio},
                {"dropout", model.dropout},
                {"use_spot_branch", model.use_spot_branch},
                {"use_neighbor_branch", model.use_neighbor_branch},
                {"attention_scope", name_of(model.attention_scope)},
                {"guidance_residual", model.guidance_residual}};
  j["train"] = {{"lr", train.lr},
                {"step_size", train.step_size},
                {"decay", train.decay},
                {"max_epochs", train.max_epochs},
                {"patience", train.patience},
                {"lambda", train.lambda},
                {"k_hyper", train.k_hyper},
                {"train_prompt_ratio", train.train_prompt_ratio},
                {"eval_prompt_ratio", train.eval_prompt_ratio}};
  j["graph"] = {{"norm", name_of(graph.norm)}, {"edge_weight", name_of(graph.weight_mode)}};
  j["genes"] = {{"hvg", hvg_genes}, {"criterion", name_of(hvg_criterion)}};
  j["eval"] = {{"std_over", std_over_slides ? "slides" : "folds"}};
  return j;
}

}  // namespace phg2st
