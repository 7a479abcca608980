#pragma once

#include <span>
#include <vector>

#include "d2g/distributions.hpp"
#include "d2g/model_config.hpp"
#include "d2g/nn/likelihood.hpp"
#include "d2g/nn/tensor.hpp"

D2G_NN_BEGIN
namespace nn {

// Rain amounts enter the network as log1p(mm).
double input_transform(double mm);

// Stacked model inputs for B episodes using the last T station hours.
struct Batch {
  std::int64_t size = 0;
  std::int64_t timesteps = 0;
  std::int64_t height = 0;
  std::int64_t width = 0;
  Tensor station_values;  // [B*T, 1, H, W], b-major
  Tensor station_mask;    // [B*T, 1, H, W]
  Tensor radar_values;    // [B, 1, H, W]
  Tensor radar_mask;      // [B, 1, H, W]
  std::vector<TargetIndex> targets;
  std::vector<double> y;
};

// Targets follow select_targets(ep, config.target_inputs).
Batch make_batch(std::span<const Episode* const> episodes, const ModelConfig& config);
Batch make_batch(const Episode& episode, const ModelConfig& config);

}  // namespace nn
D2G_NN_END
