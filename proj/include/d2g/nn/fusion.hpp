#pragma once

#include <optional>
#include <vector>

#include "d2g/model_config.hpp"
#include "d2g/nn/layers.hpp"

D2G_NN_BEGIN
namespace nn {

// Normalized displacements (p_i - p_j) / max(h, w) for all token pairs of an
// h x w grid in row-major order, as [N, N, 2] (row, column). With `periodic`
// each component is wrapped to the minimum image in [-extent/2, extent/2).
std::vector<double> displacements(int h, int w, bool periodic);

// [B, C, h, w] <-> [B, h*w, C].
Tensor to_tokens(const Tensor& x);
Tensor from_tokens(const Tensor& t, std::int64_t h, std::int64_t w);

// Multi-head attention from query tokens onto key/value tokens of the same
// grid. TranslationEquivariant: logits come from a pairwise MLP over
// [displacement, per-head q.k / sqrt(d)]. Standard: q.k / sqrt(d) with learned
// absolute position embeddings added to the query and key inputs.
struct Attention {
  AttentionKind kind = AttentionKind::TranslationEquivariant;
  int heads = 0;
  int head_dim = 0;
  bool periodic = false;
  Linear wq, wk, wv, wo;
  TokenMlp pair;     // TE: (2 + heads) -> hidden -> hidden -> heads
  Tensor position;  // Standard: [N, C]

  Attention() = default;
  Attention(const ModelConfig& c, Rng& rng);

  // Softmax weights [B, heads, N, N].
  Tensor weights(const Tensor& xq, const Tensor& xkv, int h, int w) const;
  Tensor operator()(const Tensor& xq, const Tensor& xkv, int h, int w) const;
  void collect(const std::string& prefix, ParameterList& out) const;

 private:
  Tensor project(const Linear& l, const Tensor& x) const;  // -> [B*heads, N, d]
  Tensor logits(const Tensor& xq, const Tensor& xkv, int h, int w) const;
};

// Learned single query per head attending over time at every pixel.
struct TemporalSummary {
  int heads = 0;
  int head_dim = 0;
  Tensor position;  // [T, C]
  LayerNorm norm;
  Linear wk, wv, wo;
  Tensor query;  // [heads, d]
  LayerNorm ff_norm;
  TokenMlp ff;

  TemporalSummary() = default;
  TemporalSummary(const ModelConfig& c, Rng& rng);

  // S: [B, T, C, h, w] -> [B, C, h, w]. `weights` receives [B*h*w, heads, T].
  Tensor operator()(const Tensor& s, Tensor* weights = nullptr) const;
  // Feed-forward block applied after the attention projection.
  Tensor feed_forward(const Tensor& tokens) const;
  void collect(const std::string& prefix, ParameterList& out) const;
};

struct CrossAttentionOutput {
  Tensor r_hat;        // [B, N, C]
  Tensor gate;         // [B, N, 1]
  Tensor r_corrected;  // [B, N, C]
};

// Station summary queries radar; a pointwise gate on (S_summary, R_hat)
// scales the result.
struct GatedCrossAttention {
  LayerNorm q_norm, kv_norm;
  Attention attention;
  TokenMlp gate;  // 2C -> hidden -> 1

  GatedCrossAttention() = default;
  GatedCrossAttention(const ModelConfig& c, Rng& rng);

  CrossAttentionOutput operator()(const Tensor& s_summary, const Tensor& r, int h, int w,
                                  std::optional<double> forced_gate = std::nullopt) const;
  void collect(const std::string& prefix, ParameterList& out) const;
};

struct FusionBlock {
  LayerNorm norm1, norm2;
  Attention attention;
  TokenMlp ff;

  FusionBlock() = default;
  FusionBlock(const ModelConfig& c, Rng& rng);
  void collect(const std::string& prefix, ParameterList& out) const;
};

// concat(S_summary, R_corrected, S_T) -> C, then self-attention blocks.
struct Fusion {
  Linear project;
  std::vector<FusionBlock> blocks;
  double dropout = 0.0;

  Fusion() = default;
  Fusion(const ModelConfig& c, Rng& rng);

  // Token inputs [B, N, C]; dropout on attention outputs when `rng` is set.
  Tensor operator()(const Tensor& s_summary, const Tensor& r_corrected, const Tensor& s_last, int h, int w,
                    Rng* rng = nullptr) const;
  void collect(const std::string& prefix, ParameterList& out) const;
};

}  // namespace nn
D2G_NN_END
