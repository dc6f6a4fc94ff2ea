#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "phg2st/data.hpp"
#include "phg2st/hypergraph.hpp"
#include "phg2st/ops.hpp"
#include "phg2st/rng.hpp"

namespace phg2st {

/// Which keys a prompt query may attend to.
enum class AttentionScope { kGlobal, kLocal };

struct ModelConfig {
  Index input_dim = 16;     // feature width of the ingested spot features
  Index genes = 20;         // active gene panel size
  Index width = 256;        // token width of both branches
  Index prompt_width = 256;
  Index attn_width = 256;   // query/key width inside cross-attention
  Index heads = 8;
  Index cross_heads = 8;
  Index blocks = 2;
  Index mlp_ratio = 4;
  double dropout = 0.1;
  bool use_spot_branch = true;
  bool use_neighbor_branch = true;
  AttentionScope attention_scope = AttentionScope::kGlobal;
  /// Add the unguided neighbour tokens back onto the cross-attention output.
  /// Off by default: the guided tokens are the attention output alone.
  bool guidance_residual = false;

  void validate() const;
};

struct Linear {
  Tensor weight;  // in x out
  Tensor bias;    // 1 x out, undefined for bias-free maps

  Tensor operator()(const Tensor& x) const { return bias.defined() ? add_bias(matmul(x, weight), bias) : matmul(x, weight); }
};

struct LayerNormParams {
  Tensor gain;
  Tensor bias;

  Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias); }
};

struct TransformerBlockParams {
  LayerNormParams ln1;
  Linear query, key, value, out;
  LayerNormParams ln2;
  Linear mlp_in, mlp_out;
};

struct PromptEncoderParams {
  Linear project;  // m -> d_p
  Linear fc;       // d_p -> d_p
  LayerNormParams norm;
};

struct ConvBlockParams {
  Tensor theta;  // d_in x d
  LayerNormParams norm;
};

struct CrossAttentionParams {
  Linear query;  // d_p -> d_a
  Linear key;    // d -> d_a
  Linear value;  // d -> d
  Linear out;    // d -> d
};

/// Every learnable tensor of the network.
struct ModelParams {
  PromptEncoderParams prompt;
  ConvBlockParams spot_conv;
  ConvBlockParams neighbor_conv;
  std::vector<TransformerBlockParams> spot_blocks;
  std::vector<TransformerBlockParams> neighbor_blocks;
  CrossAttentionParams cross;
  Linear spot_head;
  Linear neighbor_head;
  Linear fused_head;

  /// Stable order used by the optimizer and checkpoints.
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  /// Deep copy with fresh leaves.
  ModelParams clone() const;
  bool all_finite() const;
};

ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed);

/// A slide with everything the forward pass needs precomputed: constant
/// feature tensors, both propagation operators and the token pooling map.
struct PreparedSlide {
  std::string slide_id;
  std::string patient_id;
  Index n = 0;
  GridMatrix grid;
  Tensor spot_features;      // n x d_in
  Tensor neighbor_features;  // (n*25) x d_in
  std::shared_ptr<const SparseMatrix> spot_propagation;
  std::shared_ptr<const SparseMatrix> neighbor_propagation;
  std::shared_ptr<const SparseMatrix> neighbor_pool;  // n x (n*25)
  Matrix expression;                                  // n x m
};

PreparedSlide prepare_slide(const SlideBundle& bundle, const ExpressionMatrix& expr, const HypergraphOptions& opts);

struct MaskedExpression {
  Matrix values;
  std::vector<bool> kept;

  Index kept_count() const;
};

/// Keep floor(ratio * n) spot rows chosen uniformly without replacement and
/// zero the rest.
MaskedExpression mask_expression(const Eigen::Ref<const Matrix>& y, double ratio, Rng& rng);

/// LN(Dropout(FC(GELU(y * W)))).
Tensor encode_prompt(const Tensor& y_masked, const PromptEncoderParams& p, double p_drop, bool training, Rng& rng);

/// Scaled dot-product attention over all key rows, split into `heads`.
Tensor multi_head_attention(const Tensor& queries, const Tensor& keys, const Tensor& values, Index heads);

/// Pre-LN encoder block: x + MHSA(LN(x)), then + MLP(LN(.)).
Tensor transformer_block(const Tensor& tokens, const TransformerBlockParams& p, Index heads, double p_drop,
                         bool training, Rng& rng);

/// Mean of the valid lattice tokens of each spot.
std::shared_ptr<const SparseMatrix> neighbor_pool_operator(const NeighborTensor& neighbors);
Tensor neighbor_pool(const Tensor& tokens, const SparseMatrix& pool);

/// Prompt rows query the neighbour tokens of every spot (kGlobal) or only of
/// their own spot (kLocal).
Tensor cross_attention(const Tensor& prompt, const Tensor& neighbor_tokens, const CrossAttentionParams& p, Index heads,
                       AttentionScope scope = AttentionScope::kGlobal);

Tensor fuse(const Tensor& guided_neighbor, const Tensor& spot);

struct ForwardOutputs {
  Tensor p_fused;
  Tensor p_spot;      // undefined when the spot branch is disabled
  Tensor p_neighbor;  // undefined when the neighbour branch is disabled
  Tensor spot_tokens;             // T_s
  Tensor neighbor_tokens;         // T_n
  Tensor guided_neighbor_tokens;  // T_n^G
  Tensor fused_tokens;            // Z^G
  Tensor prompt;                  // Phi_p
};

/// Full network on a prepared slide with an already-masked prompt matrix.
ForwardOutputs forward(const PreparedSlide& slide, const Eigen::Ref<const Matrix>& prompt_matrix,
                       const ModelParams& params, const ModelConfig& cfg, bool training, Rng& rng);

/// Masks the slide expression at `prompt_ratio` (stream split from rng) and
/// runs forward.
ForwardOutputs forward(const PreparedSlide& slide, double prompt_ratio, const ModelParams& params,
                       const ModelConfig& cfg, bool training, Rng& rng);

struct LossTerms {
  Tensor total;
  double fused = 0;
  double spot = 0;
  double neighbor = 0;
};

/// L_spot + L_neighbor + L_Z. The branch terms are (1 - lambda) * MSE +
/// lambda * MSE of the same head against the same target.
LossTerms compute_loss(const ForwardOutputs& out, const Tensor& target, double lambda);

// ---- checkpoints ---------------------------------------------------------

struct Checkpoint {
  std::string header_json;  // full JSON header as stored
  std::vector<std::pair<std::string, Matrix>> tensors;
};

/// "PHGC", u32 version, u64 header length, JSON header, then each tensor's
/// float64 payload in header order. `extra` is merged into the header.
void save_checkpoint(const std::filesystem::path& file, const std::vector<std::pair<std::string, Matrix>>& tensors,
                     const std::string& extra_json);
Checkpoint load_checkpoint(const std::filesystem::path& file);

std::vector<std::pair<std::string, Matrix>> snapshot(const ModelParams& params);
/// Copies named tensors into params; CheckpointError on missing names or shape mismatch.
void restore(ModelParams& params, const std::vector<std::pair<std::string, Matrix>>& tensors);

}  // namespace phg2st
