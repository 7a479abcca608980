#include "d2g/nn/model.hpp"

#include <cmath>

D2G_NN_BEGIN
namespace nn {

namespace {

Tensor channel_norm(const Tensor& x, const LayerNorm& ln) { return permute(ln(permute(x, {0, 2, 3, 1})), {0, 3, 1, 2}); }

Tensor dropout_if(const Tensor& x, double p, const ForwardOptions& o) {
  if (!o.train || p <= 0.0) return x;
  if (o.rng == nullptr) throw Error("training forward pass needs a dropout generator");
  return dropout(x, static_cast<Scalar>(p), *o.rng);
}

// [B*T, ...] -> slice t of every episode as [B, ...].
Tensor last_of_each(const Tensor& x, std::int64_t b, std::int64_t t) {
  Shape s = x.shape();
  Shape split{b, t};
  split.insert(split.end(), s.begin() + 1, s.end());
  Shape out = s;
  out[0] = b;
  return reshape(slice(reshape(x, split), 1, t - 1, 1), out);
}

void check_batch(const Batch& batch, const ModelConfig& c) {
  if (batch.timesteps != c.timesteps)
    throw ShapeError("batch has " + std::to_string(batch.timesteps) + " station hours, model expects " +
                     std::to_string(c.timesteps));
  const std::int64_t f = std::int64_t{1} << c.depth;
  if (batch.height % f != 0 || batch.width % f != 0)
    throw ShapeError("grid " + std::to_string(batch.height) + "x" + std::to_string(batch.width) +
                     " is not divisible by 2^depth");
}

}  // namespace

SetConv::SetConv(int kernel, double lengthscale, double eps) : epsilon(eps) {
  Buffer v(static_cast<std::size_t>(kernel * kernel));
  const int r = kernel / 2;
  for (int i = 0; i < kernel; ++i)
    for (int j = 0; j < kernel; ++j) {
      const double d2 = double((i - r) * (i - r) + (j - r) * (j - r));
      // Squared at use, so the effective kernel is exp(-d^2 / (2 l^2)).
      v[static_cast<std::size_t>(i * kernel + j)] = static_cast<Scalar>(std::exp(-d2 / (4.0 * lengthscale * lengthscale)));
    }
  raw = Tensor::from({1, 1, kernel, kernel}, std::move(v), true);
}

Tensor SetConv::operator()(const Tensor& values, const Tensor& mask, Padding mode) const {
  if (values.rank() != 4 || values.dim(1) != 1 || !(values.shape() == mask.shape()))
    throw ShapeError("setconv expects matching [N, 1, H, W] values and mask");
  const Tensor w = weights();
  const int pad = static_cast<int>(raw.dim(2) / 2);
  Tensor signal = conv2d(mul(values, mask), w, Tensor(), 1, pad, mode);
  Tensor density = conv2d(mask, w, Tensor(), 1, pad, mode);
  return concat({div(signal, add_scalar(density, static_cast<Scalar>(epsilon))), density}, 1);
}

void SetConv::collect(const std::string& prefix, ParameterList& out) const { out.push_back({prefix + ".raw", raw}); }

ResBlock::ResBlock(const ModelConfig& c, Rng& rng)
    : conv1(c.channels, c.channels, c.kernel_size, 1, c.kernel_size / 2, rng),
      conv2(c.channels, c.channels, c.kernel_size, 1, c.kernel_size / 2, rng),
      channel_norm(c.channel_norm) {
  if (channel_norm) {
    norm1 = LayerNorm(c.channels);
    norm2 = LayerNorm(c.channels);
  }
}

Tensor ResBlock::operator()(const Tensor& x, Padding mode) const {
  Tensor h = channel_norm ? nn::channel_norm(x, norm1) : x;
  h = conv1(gelu(h), mode);
  if (channel_norm) h = nn::channel_norm(h, norm2);
  h = conv2(gelu(h), mode);
  return add(x, h);
}

void ResBlock::collect(const std::string& prefix, ParameterList& out) const {
  if (channel_norm) norm1.collect(prefix + ".norm1", out);
  conv1.collect(prefix + ".conv1", out);
  if (channel_norm) norm2.collect(prefix + ".norm2", out);
  conv2.collect(prefix + ".conv2", out);
}

UNetEncoder::UNetEncoder(const ModelConfig& c, Rng& rng) {
  for (int l = 0; l < c.depth; ++l) {
    blocks.emplace_back(c, rng);
    down.emplace_back(c.channels, c.channels, 2, 2, 0, rng);
  }
}

EncoderOutput UNetEncoder::operator()(const Tensor& x, Padding mode) const {
  EncoderOutput out;
  Tensor h = x;
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    h = blocks[l](h, mode);
    out.skips.push_back(h);
    h = down[l](h, mode);
  }
  out.bottleneck = h;
  return out;
}

void UNetEncoder::collect(const std::string& prefix, ParameterList& out) const {
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    blocks[l].collect(prefix + ".level" + std::to_string(l) + ".block", out);
    down[l].collect(prefix + ".level" + std::to_string(l) + ".down", out);
  }
}

UNetDecoder::UNetDecoder(const ModelConfig& c, Rng& rng) {
  for (int l = 0; l < c.depth; ++l) {
    merge.emplace_back(2 * c.channels, c.channels, c.kernel_size, 1, c.kernel_size / 2, rng);
    refine.emplace_back(c.channels, c.channels, c.kernel_size, 1, c.kernel_size / 2, rng);
  }
}

Tensor UNetDecoder::operator()(const Tensor& z, const std::vector<Tensor>& skips, Padding mode) const {
  if (skips.size() != merge.size()) throw ShapeError("decoder: skip pyramid depth mismatch");
  Tensor h = z;
  for (std::size_t k = merge.size(); k-- > 0;) {
    Tensor up = upsample_nearest2(h);
    if (!(up.shape() == skips[k].shape())) throw ShapeError("decoder: skip shape mismatch at level " + std::to_string(k));
    Tensor m = merge[k](gelu(concat({up, skips[k]}, 1)), mode);
    m = refine[k](gelu(m), mode);
    h = add(up, m);
  }
  return h;
}

void UNetDecoder::collect(const std::string& prefix, ParameterList& out) const {
  for (std::size_t l = 0; l < merge.size(); ++l) {
    merge[l].collect(prefix + ".level" + std::to_string(l) + ".merge", out);
    refine[l].collect(prefix + ".level" + std::to_string(l) + ".refine", out);
  }
}

DropsToGrid::DropsToGrid(const ModelConfig& c, std::uint64_t seed) : Model(c) {
  config_.validate();
  if (c.architecture != Architecture::Fusion) throw Error("DropsToGrid requires the fusion architecture");
  Rng rng(seed);
  station_setconv = SetConv(c.setconv_kernel, c.setconv_lengthscale_cells, c.setconv_epsilon);
  radar_setconv = SetConv(c.setconv_kernel, c.setconv_lengthscale_cells, c.setconv_epsilon);
  station_embed = PointwiseMlp({2, c.channels, c.channels}, rng);
  radar_embed = PointwiseMlp({2, c.channels, c.channels}, rng);
  encoder = UNetEncoder(c, rng);
  temporal = TemporalSummary(c, rng);
  cross = GatedCrossAttention(c, rng);
  fusion = Fusion(c, rng);
  decoder = UNetDecoder(c, rng);
  head = PointwiseMlp({c.channels, c.channels, raw_channels(c.output)}, rng);
}

Tensor DropsToGrid::forward(const Batch& batch, const ForwardOptions& o) const {
  const ModelConfig& c = config_;
  check_batch(batch, c);
  const Padding mode = padding();
  const std::int64_t b = batch.size, t = batch.timesteps;
  const std::int64_t ch = c.channels;

  Tensor xs = station_setconv(batch.station_values, batch.station_mask, mode);
  Tensor zs = station_embed(xs);
  Tensor xr, zr;
  if (c.use_radar) {
    xr = radar_setconv(batch.radar_values, batch.radar_mask, mode);
    zr = radar_embed(xr);
  }
  // One U-Net pass over every (episode, hour) slice and the radar slices.
  const EncoderOutput enc = encoder(c.use_radar ? concat({zs, zr}, 0) : zs, mode);
  const std::int64_t h = enc.bottleneck.dim(2), w = enc.bottleneck.dim(3);
  Tensor s = reshape(slice(enc.bottleneck, 0, 0, b * t), {b, t, ch, h, w});
  Tensor r = c.use_radar ? slice(enc.bottleneck, 0, b * t, b) : Tensor::zeros({b, ch, h, w});
  std::vector<Tensor> skips;
  for (const Tensor& sk : enc.skips) skips.push_back(last_of_each(slice(sk, 0, 0, b * t), b, t));

  Tensor s_summary = temporal(s);
  Tensor s_tok = to_tokens(s_summary);
  const int hi = static_cast<int>(h), wi = static_cast<int>(w);
  const CrossAttentionOutput ca = cross(s_tok, to_tokens(r), hi, wi, o.forced_gate);
  Tensor s_last = to_tokens(reshape(slice(s, 1, t - 1, 1), {b, ch, h, w}));
  Tensor z = fusion(s_tok, ca.r_corrected, s_last, hi, wi, o.train ? o.rng : nullptr);
  Tensor zg = dropout_if(from_tokens(z, h, w), c.bottleneck_dropout, o);
  Tensor features = decoder(zg, skips, mode);
  Tensor raw = head(gelu(features));

  if (o.trace) {
    o.trace->station_latent = xs;
    o.trace->radar_latent = xr;
    o.trace->s = s;
    o.trace->r = r;
    o.trace->s_summary = s_summary;
    o.trace->gate = ca.gate;
    o.trace->z = from_tokens(z, h, w);
    o.trace->features = features;
  }
  return raw;
}

ParameterList DropsToGrid::parameters() const {
  ParameterList p;
  station_setconv.collect("station_setconv", p);
  radar_setconv.collect("radar_setconv", p);
  station_embed.collect("station_embed", p);
  radar_embed.collect("radar_embed", p);
  encoder.collect("encoder", p);
  temporal.collect("temporal", p);
  cross.collect("cross", p);
  fusion.collect("fusion", p);
  decoder.collect("decoder", p);
  head.collect("head", p);
  return p;
}

PixelMergeCnp::PixelMergeCnp(const ModelConfig& c, std::uint64_t seed) : Model(c) {
  config_.validate();
  Rng rng(seed);
  station_setconv = SetConv(c.setconv_kernel, c.setconv_lengthscale_cells, c.setconv_epsilon);
  radar_setconv = SetConv(c.setconv_kernel, c.setconv_lengthscale_cells, c.setconv_epsilon);
  embed = PointwiseMlp({2 * c.timesteps + 2, c.channels, c.channels}, rng);
  encoder = UNetEncoder(c, rng);
  bottleneck = ResBlock(c, rng);
  decoder = UNetDecoder(c, rng);
  head = PointwiseMlp({c.channels, c.channels, raw_channels(c.output)}, rng);
}

Tensor PixelMergeCnp::forward(const Batch& batch, const ForwardOptions& o) const {
  const ModelConfig& c = config_;
  check_batch(batch, c);
  const Padding mode = padding();
  const std::int64_t b = batch.size, t = batch.timesteps, hh = batch.height, ww = batch.width;
  Tensor xs = station_setconv(batch.station_values, batch.station_mask, mode);  // [B*T, 2, H, W]
  xs = reshape(xs, {b, 2 * t, hh, ww});
  Tensor xr = radar_setconv(batch.radar_values, batch.radar_mask, mode);
  if (!c.use_radar) xr = Tensor::zeros(xr.shape());
  Tensor x = embed(concat({xs, xr}, 1));
  const EncoderOutput enc = encoder(x, mode);
  Tensor z = dropout_if(bottleneck(enc.bottleneck, mode), c.bottleneck_dropout, o);
  Tensor features = decoder(z, enc.skips, mode);
  Tensor raw = head(gelu(features));
  if (o.trace) {
    o.trace->station_latent = xs;
    o.trace->radar_latent = xr;
    o.trace->z = z;
    o.trace->features = features;
  }
  return raw;
}

ParameterList PixelMergeCnp::parameters() const {
  ParameterList p;
  station_setconv.collect("station_setconv", p);
  radar_setconv.collect("radar_setconv", p);
  embed.collect("embed", p);
  encoder.collect("encoder", p);
  bottleneck.collect("bottleneck", p);
  decoder.collect("decoder", p);
  head.collect("head", p);
  return p;
}

std::unique_ptr<Model> make_model(const ModelConfig& c, std::uint64_t seed) {
  if (c.architecture == Architecture::PixelMerge) return std::make_unique<PixelMergeCnp>(c, seed);
  return std::make_unique<DropsToGrid>(c, seed);
}

std::vector<Buffer> snapshot(const ParameterList& params) {
  std::vector<Buffer> out;
  out.reserve(params.size());
  for (const auto& p : params) out.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

void restore(const ParameterList& params, const std::vector<Buffer>& values) {
  if (values.size() != params.size()) throw ShapeError("restore: parameter count mismatch");
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor t = params[k].tensor;
    if (values[k].size() != static_cast<std::size_t>(t.numel()))
      throw ShapeError("restore: size mismatch for " + params[k].name);
    std::copy(values[k].begin(), values[k].end(), t.data().begin());
  }
}

}  // namespace nn
D2G_NN_END
