#pragma once

#include <memory>
#include <optional>
#include <vector>

#include "d2g/model_config.hpp"
#include "d2g/nn/batch.hpp"
#include "d2g/nn/fusion.hpp"
#include "d2g/nn/layers.hpp"

D2G_NN_BEGIN
namespace nn {

// Density-normalized depthwise convolution with non-negative (squared)
// weights: [signal / (density + eps), density].
struct SetConv {
  Tensor raw;  // [1, 1, k, k]
  double epsilon = 1e-8;

  SetConv() = default;
  SetConv(int kernel, double lengthscale_cells, double epsilon);

  Tensor weights() const { return square(raw); }
  // values, mask: [N, 1, H, W] -> [N, 2, H, W]
  Tensor operator()(const Tensor& values, const Tensor& mask, Padding mode) const;
  void collect(const std::string& prefix, ParameterList& out) const;
};

// Pre-activation residual block: x + conv(gelu(conv(gelu(x)))).
struct ResBlock {
  Conv2d conv1, conv2;
  LayerNorm norm1, norm2;
  bool channel_norm = false;

  ResBlock() = default;
  ResBlock(const ModelConfig& c, Rng& rng);
  Tensor operator()(const Tensor& x, Padding mode) const;
  void collect(const std::string& prefix, ParameterList& out) const;
};

struct EncoderOutput {
  Tensor bottleneck;          // [N, C, H/2^d, W/2^d]
  std::vector<Tensor> skips;  // per level, finest first
};

struct UNetEncoder {
  std::vector<ResBlock> blocks;
  std::vector<Conv2d> down;  // 2x2 stride 2

  UNetEncoder() = default;
  UNetEncoder(const ModelConfig& c, Rng& rng);
  EncoderOutput operator()(const Tensor& x, Padding mode) const;
  void collect(const std::string& prefix, ParameterList& out) const;
};

// Nearest x2 upsampling, skip concatenation, two convolutions and a residual.
struct UNetDecoder {
  std::vector<Conv2d> merge;   // 2C -> C
  std::vector<Conv2d> refine;  // C -> C

  UNetDecoder() = default;
  UNetDecoder(const ModelConfig& c, Rng& rng);
  Tensor operator()(const Tensor& z, const std::vector<Tensor>& skips, Padding mode) const;
  void collect(const std::string& prefix, ParameterList& out) const;
};

// Intermediate fields of one forward pass.
struct Trace {
  Tensor station_latent;  // [B*T, 2, H, W]
  Tensor radar_latent;    // [B, 2, H, W]
  Tensor s;               // [B, T, C, h, w]
  Tensor r;               // [B, C, h, w]
  Tensor s_summary;       // [B, C, h, w]
  Tensor gate;            // [B, N, 1]
  Tensor z;               // [B, C, h, w]
  Tensor features;        // [B, C, H, W]
};

struct ForwardOptions {
  bool train = false;
  Rng* rng = nullptr;  // dropout source; required when train
  Trace* trace = nullptr;
  std::optional<double> forced_gate;
};

class Model {
 public:
  explicit Model(ModelConfig c) : config_(std::move(c)) {}
  virtual ~Model() = default;

  // Raw head output [B, k, H, W].
  virtual Tensor forward(const Batch& batch, const ForwardOptions& opts = {}) const = 0;
  virtual ParameterList parameters() const = 0;
  const ModelConfig& config() const { return config_; }
  Padding padding() const { return config_.periodic ? Padding::Circular : Padding::Zero; }

 protected:
  ModelConfig config_;
};

class DropsToGrid final : public Model {
 public:
  DropsToGrid(const ModelConfig& c, std::uint64_t seed);

  Tensor forward(const Batch& batch, const ForwardOptions& opts = {}) const override;
  ParameterList parameters() const override;

  SetConv station_setconv, radar_setconv;
  PointwiseMlp station_embed, radar_embed;
  UNetEncoder encoder;
  TemporalSummary temporal;
  GatedCrossAttention cross;
  Fusion fusion;
  UNetDecoder decoder;
  PointwiseMlp head;
};

// Stations (every hour) and radar merged channel-wise at full resolution and
// processed by a single U-Net with a convolutional bottleneck.
class PixelMergeCnp final : public Model {
 public:
  PixelMergeCnp(const ModelConfig& c, std::uint64_t seed);

  Tensor forward(const Batch& batch, const ForwardOptions& opts = {}) const override;
  ParameterList parameters() const override;

  SetConv station_setconv, radar_setconv;
  PointwiseMlp embed;
  UNetEncoder encoder;
  ResBlock bottleneck;
  UNetDecoder decoder;
  PointwiseMlp head;
};

std::unique_ptr<Model> make_model(const ModelConfig& c, std::uint64_t seed);

// Flat copies of parameter values in manifest order.
std::vector<Buffer> snapshot(const ParameterList& params);
void restore(const ParameterList& params, const std::vector<Buffer>& values);

}  // namespace nn
D2G_NN_END
