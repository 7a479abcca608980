#include "d2g/nn/fusion.hpp"

#include <algorithm>
#include <cmath>

D2G_NN_BEGIN
namespace nn {

std::vector<double> displacements(int h, int w, bool periodic) {
  const std::int64_t n = static_cast<std::int64_t>(h) * w;
  const double scale = static_cast<double>(std::max(h, w));
  const auto wrap = [periodic](int d, int extent) {
    if (!periodic) return d;
    const int m = ((d + extent / 2) % extent + extent) % extent;
    return m - extent / 2;
  };
  std::vector<double> out(static_cast<std::size_t>(n * n * 2));
  for (std::int64_t a = 0; a < n; ++a)
    for (std::int64_t b = 0; b < n; ++b) {
      const int di = static_cast<int>(a / w - b / w), dj = static_cast<int>(a % w - b % w);
      const std::size_t k = static_cast<std::size_t>((a * n + b) * 2);
      out[k] = wrap(di, h) / scale;
      out[k + 1] = wrap(dj, w) / scale;
    }
  return out;
}

Tensor to_tokens(const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("to_tokens expects [B, C, h, w]");
  return reshape(permute(x, {0, 2, 3, 1}), {x.dim(0), x.dim(2) * x.dim(3), x.dim(1)});
}

Tensor from_tokens(const Tensor& t, std::int64_t h, std::int64_t w) {
  if (t.rank() != 3 || t.dim(1) != h * w) throw ShapeError("from_tokens: token count does not match grid");
  return permute(reshape(t, {t.dim(0), h, w, t.dim(2)}), {0, 3, 1, 2});
}

namespace {

Tensor add_bias_row(const Tensor& x, const Tensor& row) {
  // x [B, N, C] + row [N, C]
  return add(x, reshape(row, {1, row.dim(0), row.dim(1)}));
}

Tensor dropout_if(const Tensor& x, double p, Rng* rng) {
  if (rng == nullptr || p <= 0.0) return x;
  return dropout(x, static_cast<Scalar>(p), *rng);
}

}  // namespace

Attention::Attention(const ModelConfig& c, Rng& rng)
    : kind(c.attention), heads(c.heads), head_dim(c.head_dim), periodic(c.periodic) {
  const std::int64_t p = c.projection_width();
  wq = Linear(c.channels, p, rng);
  wk = Linear(c.channels, p, rng);
  wv = Linear(c.channels, p, rng);
  wo = Linear(p, c.channels, rng);
  if (kind == AttentionKind::TranslationEquivariant) {
    pair = TokenMlp({2 + c.heads, c.pair_hidden, c.pair_hidden, c.heads}, rng);
  } else {
    const std::int64_t n = static_cast<std::int64_t>(c.bottleneck_height()) * c.bottleneck_width();
    position = uniform_parameter({n, c.channels}, 0.02 * std::sqrt(3.0), rng);
  }
}

Tensor Attention::project(const Linear& l, const Tensor& x) const {
  const std::int64_t b = x.dim(0), n = x.dim(1);
  return reshape(permute(reshape(l(x), {b, n, heads, head_dim}), {0, 2, 1, 3}), {b * heads, n, head_dim});
}

Tensor Attention::logits(const Tensor& xq_in, const Tensor& xkv_in, int h, int w) const {
  if (xq_in.rank() != 3 || !(xq_in.shape() == xkv_in.shape()) || xq_in.dim(1) != static_cast<std::int64_t>(h) * w)
    throw ShapeError("attention: queries and keys must be [B, h*w, C] on the same grid");
  const std::int64_t b = xq_in.dim(0), n = xq_in.dim(1);
  Tensor xq = xq_in, xkv = xkv_in;
  if (kind == AttentionKind::Standard) {
    if (position.dim(0) != n) throw ShapeError("attention: position embeddings built for a different grid");
    xq = add_bias_row(xq, position);
    xkv = add_bias_row(xkv, position);
  }
  const Scalar inv = Scalar(1) / static_cast<Scalar>(std::sqrt(static_cast<double>(head_dim)));
  Tensor sim = mul_scalar(bmm(project(wq, xq), project(wk, xkv), true), inv);  // [B*H, N, N]
  if (kind == AttentionKind::Standard) return sim;

  Tensor sim_pairs = permute(reshape(sim, {b, heads, n, n}), {0, 2, 3, 1});  // [B, N, N, H]
  const std::vector<double> d = displacements(h, w, periodic);
  Tensor delta = Tensor::from({1, n, n, 2}, Buffer(d.begin(), d.end()));
  Tensor feat = concat({expand(delta, {b, n, n, 2}), sim_pairs}, 3);
  Tensor l = pair(feat);  // [B, N, N, H]
  return reshape(permute(l, {0, 3, 1, 2}), {b * heads, n, n});
}

Tensor Attention::weights(const Tensor& xq, const Tensor& xkv, int h, int w) const {
  const std::int64_t b = xq.dim(0), n = xq.dim(1);
  return reshape(softmax_last(logits(xq, xkv, h, w)), {b, heads, n, n});
}

Tensor Attention::operator()(const Tensor& xq, const Tensor& xkv, int h, int w) const {
  const std::int64_t b = xq.dim(0), n = xq.dim(1);
  Tensor a = softmax_last(logits(xq, xkv, h, w));
  Tensor o = bmm(a, project(wv, xkv));  // [B*H, N, d]
  o = reshape(permute(reshape(o, {b, heads, n, head_dim}), {0, 2, 1, 3}), {b, n, heads * head_dim});
  return wo(o);
}

void Attention::collect(const std::string& prefix, ParameterList& out) const {
  wq.collect(prefix + ".wq", out);
  wk.collect(prefix + ".wk", out);
  wv.collect(prefix + ".wv", out);
  wo.collect(prefix + ".wo", out);
  if (kind == AttentionKind::TranslationEquivariant) pair.collect(prefix + ".pair", out);
  else out.push_back({prefix + ".position", position});
}

TemporalSummary::TemporalSummary(const ModelConfig& c, Rng& rng)
    : heads(c.heads), head_dim(c.head_dim), norm(c.channels), ff_norm(c.channels) {
  const std::int64_t p = c.projection_width();
  position = uniform_parameter({c.timesteps, c.channels}, 0.02 * std::sqrt(3.0), rng);
  wk = Linear(c.channels, p, rng);
  wv = Linear(c.channels, p, rng);
  wo = Linear(p, c.channels, rng);
  query = uniform_parameter({c.heads, c.head_dim}, 1.0 / std::sqrt(static_cast<double>(c.head_dim)), rng);
  ff = TokenMlp({c.channels, c.ff_multiplier * c.channels, c.channels}, rng);
}

Tensor TemporalSummary::feed_forward(const Tensor& tokens) const { return add(tokens, ff(ff_norm(tokens))); }

Tensor TemporalSummary::operator()(const Tensor& s, Tensor* weights) const {
  if (s.rank() != 5) throw ShapeError("temporal summary expects [B, T, C, h, w]");
  const std::int64_t b = s.dim(0), t = s.dim(1), c = s.dim(2), h = s.dim(3), w = s.dim(4);
  if (position.dim(0) != t) throw ShapeError("temporal summary: built for " + std::to_string(position.dim(0)) + " steps");
  const std::int64_t p = b * h * w;
  Tensor x = reshape(permute(s, {0, 3, 4, 1, 2}), {p, t, c});
  x = norm(add(x, reshape(position, {1, t, c})));
  Tensor k = permute(reshape(wk(x), {p, t, heads, head_dim}), {0, 2, 1, 3});  // [P, H, T, d]
  Tensor v = permute(reshape(wv(x), {p, t, heads, head_dim}), {0, 2, 1, 3});
  const Scalar inv = Scalar(1) / static_cast<Scalar>(std::sqrt(static_cast<double>(head_dim)));
  Tensor logits = mul_scalar(sum_last(mul(k, reshape(query, {1, heads, 1, head_dim}))), inv);  // [P, H, T]
  Tensor a = softmax_last(logits);
  if (weights) *weights = a;
  Tensor o = bmm(reshape(a, {p * heads, 1, t}), reshape(v, {p * heads, t, head_dim}));
  o = wo(reshape(o, {p, heads * head_dim}));
  o = feed_forward(o);
  return permute(reshape(o, {b, h, w, c}), {0, 3, 1, 2});
}

void TemporalSummary::collect(const std::string& prefix, ParameterList& out) const {
  out.push_back({prefix + ".position", position});
  norm.collect(prefix + ".norm", out);
  wk.collect(prefix + ".wk", out);
  wv.collect(prefix + ".wv", out);
  out.push_back({prefix + ".query", query});
  wo.collect(prefix + ".wo", out);
  ff_norm.collect(prefix + ".ff_norm", out);
  ff.collect(prefix + ".ff", out);
}

GatedCrossAttention::GatedCrossAttention(const ModelConfig& c, Rng& rng)
    : q_norm(c.channels), kv_norm(c.channels), attention(c, rng),
      gate({2 * c.channels, c.gate_hidden, 1}, rng) {}

CrossAttentionOutput GatedCrossAttention::operator()(const Tensor& s_summary, const Tensor& r, int h, int w,
                                                     std::optional<double> forced_gate) const {
  CrossAttentionOutput out;
  out.r_hat = attention(q_norm(s_summary), kv_norm(r), h, w);
  if (forced_gate) {
    out.gate = Tensor::full({s_summary.dim(0), s_summary.dim(1), 1}, static_cast<Scalar>(*forced_gate));
  } else {
    out.gate = sigmoid(gate(concat({s_summary, out.r_hat}, 2)));
  }
  out.r_corrected = mul(out.r_hat, out.gate);
  return out;
}

void GatedCrossAttention::collect(const std::string& prefix, ParameterList& out) const {
  q_norm.collect(prefix + ".q_norm", out);
  kv_norm.collect(prefix + ".kv_norm", out);
  attention.collect(prefix + ".attention", out);
  gate.collect(prefix + ".gate", out);
}

FusionBlock::FusionBlock(const ModelConfig& c, Rng& rng)
    : norm1(c.channels), norm2(c.channels), attention(c, rng),
      ff({c.channels, c.ff_multiplier * c.channels, c.channels}, rng) {}

void FusionBlock::collect(const std::string& prefix, ParameterList& out) const {
  norm1.collect(prefix + ".norm1", out);
  attention.collect(prefix + ".attention", out);
  norm2.collect(prefix + ".norm2", out);
  ff.collect(prefix + ".ff", out);
}

Fusion::Fusion(const ModelConfig& c, Rng& rng) : project(3 * c.channels, c.channels, rng), dropout(c.attention_dropout) {
  for (int k = 0; k < c.fusion_depth; ++k) blocks.emplace_back(c, rng);
}

Tensor Fusion::operator()(const Tensor& s_summary, const Tensor& r_corrected, const Tensor& s_last, int h, int w,
                          Rng* rng) const {
  Tensor z = project(concat({s_summary, r_corrected, s_last}, 2));
  for (const FusionBlock& blk : blocks) {
    Tensor n1 = blk.norm1(z);
    z = add(z, dropout_if(blk.attention(n1, n1, h, w), dropout, rng));
    z = add(z, blk.ff(blk.norm2(z)));
  }
  return z;
}

void Fusion::collect(const std::string& prefix, ParameterList& out) const {
  project.collect(prefix + ".project", out);
  for (std::size_t k = 0; k < blocks.size(); ++k) blocks[k].collect(prefix + ".block" + std::to_string(k), out);
}

}  // namespace nn
D2G_NN_END
