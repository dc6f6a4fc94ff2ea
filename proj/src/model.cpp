#include "phg2st/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>

#include <json.hpp>

namespace phg2st {

void ModelConfig::validate() const {
  if (input_dim < 1 || genes < 1 || width < 1 || prompt_width < 1 || attn_width < 1 || blocks < 0 || mlp_ratio < 1)
    throw ConfigError("model widths must be positive");
  if (heads < 1 || width % heads != 0)
    throw ConfigError("width " + std::to_string(width) + " is not divisible by heads " + std::to_string(heads));
  if (cross_heads < 1 || attn_width % cross_heads != 0 || width % cross_heads != 0)
    throw ConfigError("cross_heads " + std::to_string(cross_heads) + " must divide attn_width and width");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
  if (!use_spot_branch && !use_neighbor_branch) throw ConfigError("at least one branch must be enabled");
}

// ---- parameters ----------------------------------------------------------

namespace {

Tensor xavier(Index in, Index out, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(in + out));
  Matrix w(in, out);
  for (Index i = 0; i < w.size(); ++i) w.data()[i] = a * (2.0 * rng.uniform() - 1.0);
  return Tensor::from_matrix(w, true);
}

Linear make_linear(Index in, Index out, Rng& rng, bool with_bias = true) {
  Linear l{xavier(in, out, rng), {}};
  if (with_bias) l.bias = Tensor::zeros({1, out}, true);
  return l;
}

LayerNormParams make_norm(Index width) {
  return {Tensor::full({1, width}, 1.0, true), Tensor::zeros({1, width}, true)};
}

TransformerBlockParams make_block(const ModelConfig& cfg, Rng& rng) {
  const Index d = cfg.width;
  return {make_norm(d),
          make_linear(d, d, rng),
          make_linear(d, d, rng),
          make_linear(d, d, rng),
          make_linear(d, d, rng),
          make_norm(d),
          make_linear(d, d * cfg.mlp_ratio, rng),
          make_linear(d * cfg.mlp_ratio, d, rng)};
}

template <typename Fn>
void visit(const ModelParams& p, Fn&& fn) {
  auto lin = [&](const std::string& name, const Linear& l) {
    fn(name + ".weight", l.weight);
    if (l.bias.defined()) fn(name + ".bias", l.bias);
  };
  auto norm = [&](const std::string& name, const LayerNormParams& n) {
    fn(name + ".gain", n.gain);
    fn(name + ".bias", n.bias);
  };
  auto blocks = [&](const std::string& prefix, const std::vector<TransformerBlockParams>& bs) {
    for (std::size_t i = 0; i < bs.size(); ++i) {
      const std::string name = prefix + "." + std::to_string(i);
      norm(name + ".ln1", bs[i].ln1);
      lin(name + ".query", bs[i].query);
      lin(name + ".key", bs[i].key);
      lin(name + ".value", bs[i].value);
      lin(name + ".out", bs[i].out);
      norm(name + ".ln2", bs[i].ln2);
      lin(name + ".mlp_in", bs[i].mlp_in);
      lin(name + ".mlp_out", bs[i].mlp_out);
    }
  };
  lin("prompt.project", p.prompt.project);
  lin("prompt.fc", p.prompt.fc);
  norm("prompt.norm", p.prompt.norm);
  fn("spot_conv.theta", p.spot_conv.theta);
  norm("spot_conv.norm", p.spot_conv.norm);
  fn("neighbor_conv.theta", p.neighbor_conv.theta);
  norm("neighbor_conv.norm", p.neighbor_conv.norm);
  blocks("spot_blocks", p.spot_blocks);
  blocks("neighbor_blocks", p.neighbor_blocks);
  lin("cross.query", p.cross.query);
  lin("cross.key", p.cross.key);
  lin("cross.value", p.cross.value);
  lin("cross.out", p.cross.out);
  lin("spot_head", p.spot_head);
  lin("neighbor_head", p.neighbor_head);
  lin("fused_head", p.fused_head);
}

Tensor copy_leaf(const Tensor& t) {
  return t.defined() ? Tensor::from_data(t.shape(), t.data(), t.requires_grad()) : Tensor{};
}

Linear copy(const Linear& l) { return {copy_leaf(l.weight), copy_leaf(l.bias)}; }
LayerNormParams copy(const LayerNormParams& n) { return {copy_leaf(n.gain), copy_leaf(n.bias)}; }
TransformerBlockParams copy(const TransformerBlockParams& b) {
  return {copy(b.ln1), copy(b.query), copy(b.key), copy(b.value), copy(b.out), copy(b.ln2), copy(b.mlp_in), copy(b.mlp_out)};
}

}  // namespace

std::vector<std::pair<std::string, Tensor>> ModelParams::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  visit(*this, [&](const std::string& name, const Tensor& t) { out.emplace_back(name, t); });
  return out;
}

ModelParams ModelParams::clone() const {
  ModelParams c;
  c.prompt = {copy(prompt.project), copy(prompt.fc), copy(prompt.norm)};
  c.spot_conv = {copy_leaf(spot_conv.theta), copy(spot_conv.norm)};
  c.neighbor_conv = {copy_leaf(neighbor_conv.theta), copy(neighbor_conv.norm)};
  for (const auto& b : spot_blocks) c.spot_blocks.push_back(copy(b));
  for (const auto& b : neighbor_blocks) c.neighbor_blocks.push_back(copy(b));
  c.cross = {copy(cross.query), copy(cross.key), copy(cross.value), copy(cross.out)};
  c.spot_head = copy(spot_head);
  c.neighbor_head = copy(neighbor_head);
  c.fused_head = copy(fused_head);
  return c;
}

bool ModelParams::all_finite() const {
  bool ok = true;
  visit(*this, [&](const std::string&, const Tensor& t) { ok = ok && t.value().allFinite(); });
  return ok;
}

ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  ModelParams p;
  p.prompt = {make_linear(cfg.genes, cfg.prompt_width, rng), make_linear(cfg.prompt_width, cfg.prompt_width, rng),
              make_norm(cfg.prompt_width)};
  p.spot_conv = {xavier(cfg.input_dim, cfg.width, rng), make_norm(cfg.width)};
  p.neighbor_conv = {xavier(cfg.input_dim, cfg.width, rng), make_norm(cfg.width)};
  for (Index i = 0; i < cfg.blocks; ++i) p.spot_blocks.push_back(make_block(cfg, rng));
  for (Index i = 0; i < cfg.blocks; ++i) p.neighbor_blocks.push_back(make_block(cfg, rng));
  p.cross = {make_linear(cfg.prompt_width, cfg.attn_width, rng), make_linear(cfg.width, cfg.attn_width, rng),
             make_linear(cfg.width, cfg.width, rng), make_linear(cfg.width, cfg.width, rng)};
  p.spot_head = make_linear(cfg.width, cfg.genes, rng);
  p.neighbor_head = make_linear(cfg.width, cfg.genes, rng);
  p.fused_head = make_linear(cfg.width, cfg.genes, rng);
  return p;
}

// ---- slide preparation ---------------------------------------------------

std::shared_ptr<const SparseMatrix> neighbor_pool_operator(const NeighborTensor& neighbors) {
  const Index n = neighbors.spots();
  std::vector<Eigen::Triplet<double>> trip;
  for (Index s = 0; s < n; ++s) {
    Index valid = 0;
    for (Index t = 0; t < kNeighborTokens; ++t) valid += neighbors.is_valid(s, t) ? 1 : 0;
    if (valid == 0) throw ValidationError("neighbor_pool: spot " + std::to_string(s) + " has no valid token");
    for (Index t = 0; t < kNeighborTokens; ++t)
      if (neighbors.is_valid(s, t)) trip.emplace_back(s, s * kNeighborTokens + t, 1.0 / static_cast<double>(valid));
  }
  auto op = std::make_shared<SparseMatrix>(n, n * kNeighborTokens);
  op->setFromTriplets(trip.begin(), trip.end());
  op->makeCompressed();
  return op;
}

Tensor neighbor_pool(const Tensor& tokens, const SparseMatrix& pool) {
  return spmm(std::make_shared<const SparseMatrix>(pool), tokens);
}

PreparedSlide prepare_slide(const SlideBundle& bundle, const ExpressionMatrix& expr, const HypergraphOptions& opts) {
  if (expr.values.rows() != bundle.n())
    throw DimensionError("prepare_slide: expression has " + std::to_string(expr.values.rows()) + " rows for " +
                         std::to_string(bundle.n()) + " spots");
  PreparedSlide s;
  s.slide_id = bundle.slide_id;
  s.patient_id = bundle.patient_id;
  s.n = bundle.n();
  s.grid = bundle.grid;
  s.expression = expr.values;
  s.spot_features = Tensor::from_matrix(bundle.spot_features);

  const auto sim = pairwise_feature_distance(bundle.spot_features);
  const auto pos = pairwise_position_distance(bundle.coords);
  s.spot_propagation = propagation_operator(build_incidence(sim, pos, opts));

  const NeighborTensor neighbors = assemble_neighbor_features(bundle);
  s.neighbor_features = Tensor::from_matrix(neighbors.values);
  const auto subgraphs = build_neighbor_subhypergraphs(neighbors, opts);
  s.neighbor_propagation = propagation_operator(disjoint_union(subgraphs));
  s.neighbor_pool = neighbor_pool_operator(neighbors);
  return s;
}

// ---- components ----------------------------------------------------------

Index MaskedExpression::kept_count() const { return static_cast<Index>(std::count(kept.begin(), kept.end(), true)); }

MaskedExpression mask_expression(const Eigen::Ref<const Matrix>& y, double ratio, Rng& rng) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw ParameterError("mask_expression: ratio must lie in [0, 1]");
  const Index n = y.rows();
  // Tolerance keeps products like 0.29 * 100 from flooring to 28.
  const auto keep = std::min(n, static_cast<Index>(std::floor(ratio * static_cast<double>(n) + 1e-9)));
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  for (Index i = 0; i < keep; ++i) {
    const auto j = i + static_cast<Index>(rng.below(static_cast<std::uint64_t>(n - i)));
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
  }
  MaskedExpression out{Matrix::Zero(n, y.cols()), std::vector<bool>(static_cast<std::size_t>(n), false)};
  for (Index i = 0; i < keep; ++i) {
    const Index row = order[static_cast<std::size_t>(i)];
    out.values.row(row) = y.row(row);
    out.kept[static_cast<std::size_t>(row)] = true;
  }
  return out;
}

Tensor encode_prompt(const Tensor& y_masked, const PromptEncoderParams& p, double p_drop, bool training, Rng& rng) {
  return p.norm(dropout(p.fc(gelu(p.project(y_masked))), p_drop, training, rng));
}

Tensor multi_head_attention(const Tensor& queries, const Tensor& keys, const Tensor& values, Index heads) {
  if (queries.cols() != keys.cols() || keys.rows() != values.rows())
    throw DimensionError("attention: queries " + to_string(queries.shape()) + ", keys " + to_string(keys.shape()) +
                         ", values " + to_string(values.shape()));
  if (heads < 1 || queries.cols() % heads != 0 || values.cols() % heads != 0)
    throw ConfigError("attention: head count " + std::to_string(heads) + " does not divide widths");
  const Index qk = queries.cols() / heads;
  const Index vw = values.cols() / heads;
  const double scale_factor = 1.0 / std::sqrt(static_cast<double>(qk));
  std::vector<Tensor> outs;
  for (Index h = 0; h < heads; ++h) {
    const Tensor q = heads == 1 ? queries : slice_cols(queries, h * qk, qk);
    const Tensor k = heads == 1 ? keys : slice_cols(keys, h * qk, qk);
    const Tensor v = heads == 1 ? values : slice_cols(values, h * vw, vw);
    const Tensor weights = softmax(scale(matmul(q, transpose(k)), scale_factor), 1);
    outs.push_back(matmul(weights, v));
  }
  return heads == 1 ? outs.front() : concat_cols(outs);
}

Tensor transformer_block(const Tensor& tokens, const TransformerBlockParams& p, Index heads, double p_drop,
                         bool training, Rng& rng) {
  if (heads < 1 || tokens.cols() % heads != 0)
    throw ConfigError("transformer_block: width " + std::to_string(tokens.cols()) + " not divisible by " +
                      std::to_string(heads) + " heads");
  const Tensor normed = p.ln1(tokens);
  const Tensor attended = p.out(multi_head_attention(p.query(normed), p.key(normed), p.value(normed), heads));
  const Tensor h = tokens + dropout(attended, p_drop, training, rng);
  const Tensor mlp = p.mlp_out(gelu(p.mlp_in(p.ln2(h))));
  return h + dropout(mlp, p_drop, training, rng);
}

Tensor cross_attention(const Tensor& prompt, const Tensor& neighbor_tokens, const CrossAttentionParams& p, Index heads,
                       AttentionScope scope) {
  if (prompt.rows() != neighbor_tokens.rows())
    throw DimensionError("cross_attention: prompt " + to_string(prompt.shape()) + " vs tokens " +
                         to_string(neighbor_tokens.shape()));
  if (scope == AttentionScope::kLocal) {
    // A single admissible key gets softmax weight 1.
    return p.out(p.value(neighbor_tokens));
  }
  return p.out(multi_head_attention(p.query(prompt), p.key(neighbor_tokens), p.value(neighbor_tokens), heads));
}

Tensor fuse(const Tensor& guided_neighbor, const Tensor& spot) { return add(guided_neighbor, spot); }

// ---- network -------------------------------------------------------------

namespace {

enum Stream : std::uint64_t { kMaskStream = 1, kPromptStream, kSpotStream, kNeighborStream };

Tensor run_blocks(Tensor x, const std::vector<TransformerBlockParams>& blocks, const ModelConfig& cfg, bool training,
                  Rng& rng) {
  for (const auto& b : blocks) x = transformer_block(x, b, cfg.heads, cfg.dropout, training, rng);
  return x;
}

}  // namespace

ForwardOutputs forward(const PreparedSlide& slide, const Eigen::Ref<const Matrix>& prompt_matrix,
                       const ModelParams& params, const ModelConfig& cfg, bool training, Rng& rng) {
  if (prompt_matrix.rows() != slide.n || prompt_matrix.cols() != cfg.genes)
    throw DimensionError("forward: prompt matrix is " + std::to_string(prompt_matrix.rows()) + "x" +
                         std::to_string(prompt_matrix.cols()) + ", expected " + std::to_string(slide.n) + "x" +
                         std::to_string(cfg.genes));
  // Each branch draws from its own stream so toggling one path never shifts
  // the randomness seen by another.
  Rng prompt_rng = rng.split(kPromptStream);
  Rng spot_rng = rng.split(kSpotStream);
  Rng neighbor_rng = rng.split(kNeighborStream);
  rng.next_u64();

  ForwardOutputs out;
  if (cfg.use_spot_branch) {
    const Tensor h_s = wrap_conv_block(slide.spot_features, slide.spot_propagation, params.spot_conv.theta,
                                       params.spot_conv.norm.gain, params.spot_conv.norm.bias, cfg.dropout, training,
                                       spot_rng);
    out.spot_tokens = run_blocks(h_s, params.spot_blocks, cfg, training, spot_rng);
    out.p_spot = params.spot_head(out.spot_tokens);
  }
  if (cfg.use_neighbor_branch) {
    const Tensor h_n = wrap_conv_block(slide.neighbor_features, slide.neighbor_propagation,
                                       params.neighbor_conv.theta, params.neighbor_conv.norm.gain,
                                       params.neighbor_conv.norm.bias, cfg.dropout, training, neighbor_rng);
    out.neighbor_tokens = run_blocks(spmm(slide.neighbor_pool, h_n), params.neighbor_blocks, cfg, training, neighbor_rng);
    out.prompt = encode_prompt(Tensor::from_matrix(prompt_matrix), params.prompt, cfg.dropout, training, prompt_rng);
    Tensor guided = cross_attention(out.prompt, out.neighbor_tokens, params.cross, cfg.cross_heads, cfg.attention_scope);
    if (cfg.guidance_residual) guided = out.neighbor_tokens + guided;
    out.guided_neighbor_tokens = guided;
    out.p_neighbor = params.neighbor_head(guided);
  }
  if (cfg.use_spot_branch && cfg.use_neighbor_branch)
    out.fused_tokens = fuse(out.guided_neighbor_tokens, out.spot_tokens);
  else
    out.fused_tokens = cfg.use_spot_branch ? out.spot_tokens : out.guided_neighbor_tokens;
  out.p_fused = params.fused_head(out.fused_tokens);
  return out;
}

ForwardOutputs forward(const PreparedSlide& slide, double prompt_ratio, const ModelParams& params,
                       const ModelConfig& cfg, bool training, Rng& rng) {
  Rng mask_rng = rng.split(kMaskStream);
  const MaskedExpression masked = mask_expression(slide.expression, prompt_ratio, mask_rng);
  return forward(slide, masked.values, params, cfg, training, rng);
}

LossTerms compute_loss(const ForwardOutputs& out, const Tensor& target, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ParameterError("compute_loss: lambda must lie in [0, 1]");
  LossTerms terms;
  const Tensor fused = mse(out.p_fused, target);
  terms.fused = fused.item();
  Tensor total = fused;
  // Both weighted terms pair the same head with the same target, so
  // (1 - lambda) * MSE + lambda * MSE folds into a single coefficient. Folding
  // keeps the branch loss exactly independent of lambda.
  const double coefficient = (1.0 - lambda) + lambda;
  if (out.p_spot.defined()) {
    const Tensor spot = scale(mse(out.p_spot, target), coefficient);
    terms.spot = spot.item();
    total = total + spot;
  }
  if (out.p_neighbor.defined()) {
    const Tensor neighbor = scale(mse(out.p_neighbor, target), coefficient);
    terms.neighbor = neighbor.item();
    total = total + neighbor;
  }
  terms.total = total;
  return terms;
}

// ---- checkpoints ---------------------------------------------------------

namespace {
constexpr char kCheckpointMagic[4] = {'P', 'H', 'G', 'C'};
constexpr std::uint32_t kCheckpointVersion = 1;
}  // namespace

void save_checkpoint(const std::filesystem::path& file, const std::vector<std::pair<std::string, Matrix>>& tensors,
                     const std::string& extra_json) {
  nlohmann::json header = extra_json.empty() ? nlohmann::json::object() : nlohmann::json::parse(extra_json);
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& [name, m] : tensors) entries.push_back({{"name", name}, {"shape", {m.rows(), m.cols()}}});
  header["tensors"] = entries;
  const std::string text = header.dump();

  std::ofstream out(file, std::ios::binary);
  if (!out) throw IoError("cannot write " + file.string());
  out.write(kCheckpointMagic, 4);
  const std::uint32_t version = kCheckpointVersion;
  const auto length = static_cast<std::uint64_t>(text.size());
  out.write(reinterpret_cast<const char*>(&version), sizeof version);
  out.write(reinterpret_cast<const char*>(&length), sizeof length);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, m] : tensors)
    out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
  if (!out) throw IoError("failed writing " + file.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + file.string());
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw CheckpointError(file.string() + ": bad magic, expected PHGC");
  std::uint32_t version = 0;
  std::uint64_t length = 0;
  if (!in.read(reinterpret_cast<char*>(&version), sizeof version) || version != kCheckpointVersion)
    throw CheckpointError(file.string() + ": unsupported checkpoint version");
  if (!in.read(reinterpret_cast<char*>(&length), sizeof length) || length > (1u << 30))
    throw CheckpointError(file.string() + ": bad header length");
  Checkpoint ck;
  ck.header_json.resize(length);
  if (!in.read(ck.header_json.data(), static_cast<std::streamsize>(length)))
    throw CheckpointError(file.string() + ": truncated header");
  try {
    const auto header = nlohmann::json::parse(ck.header_json);
    for (const auto& e : header.at("tensors")) {
      const auto rows = e.at("shape").at(0).get<Index>();
      const auto cols = e.at("shape").at(1).get<Index>();
      Matrix m(rows, cols);
      if (!in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double))))
        throw CheckpointError(file.string() + ": truncated payload for " + e.at("name").get<std::string>());
      ck.tensors.emplace_back(e.at("name").get<std::string>(), std::move(m));
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(file.string() + ": malformed header: " + e.what());
  }
  return ck;
}

std::vector<std::pair<std::string, Matrix>> snapshot(const ModelParams& params) {
  std::vector<std::pair<std::string, Matrix>> out;
  for (const auto& [name, t] : params.named_parameters()) out.emplace_back(name, Matrix(t.value()));
  return out;
}

void restore(ModelParams& params, const std::vector<std::pair<std::string, Matrix>>& tensors) {
  std::map<std::string, const Matrix*> by_name;
  for (const auto& [name, m] : tensors) by_name[name] = &m;
  for (auto& [name, t] : params.named_parameters()) {
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw CheckpointError("checkpoint lacks parameter " + name);
    if (it->second->rows() != t.rows() || it->second->cols() != t.cols())
      throw CheckpointError("checkpoint parameter " + name + " has shape " + std::to_string(it->second->rows()) + "x" +
                            std::to_string(it->second->cols()) + ", model expects " + to_string(t.shape()));
    Tensor handle = t;
    handle.mutable_value() = *it->second;
  }
}

}  // namespace phg2st
