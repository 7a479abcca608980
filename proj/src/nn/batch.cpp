#include "d2g/nn/batch.hpp"

#include <cmath>

D2G_NN_BEGIN
namespace nn {

double input_transform(double mm) { return std::log1p(std::max(0.0, mm)); }

Batch make_batch(std::span<const Episode* const> episodes, const ModelConfig& config) {
  if (episodes.empty()) throw Error("make_batch: no episodes");
  const GridSpec& spec = episodes.front()->spec;
  Batch b;
  b.size = static_cast<std::int64_t>(episodes.size());
  b.timesteps = config.timesteps;
  b.height = spec.height;
  b.width = spec.width;
  const std::int64_t hw = b.height * b.width;
  Buffer sv(static_cast<std::size_t>(b.size * b.timesteps * hw));
  Buffer sm(sv.size());
  Buffer rv(static_cast<std::size_t>(b.size * hw));
  Buffer rm(rv.size());
  for (std::int64_t e = 0; e < b.size; ++e) {
    const Episode& ep = *episodes[static_cast<std::size_t>(e)];
    if (!(ep.spec == spec)) throw ShapeError("make_batch: episodes on different grids");
    if (ep.timesteps < config.timesteps)
      throw ShapeError("make_batch: episode has " + std::to_string(ep.timesteps) + " hours, model needs " +
                       std::to_string(config.timesteps));
    const int t0 = ep.timesteps - config.timesteps;
    for (int t = 0; t < config.timesteps; ++t) {
      const StationSlice& sl = ep.stations[static_cast<std::size_t>(t0 + t)];
      const Mask& ctx = ep.context[static_cast<std::size_t>(t0 + t)];
      const std::size_t off = static_cast<std::size_t>((e * b.timesteps + t) * hw);
      for (std::size_t q = 0; q < static_cast<std::size_t>(hw); ++q) {
        const bool on = ctx.data()[q] != 0;
        sm[off + q] = on ? Scalar(1) : Scalar(0);
        sv[off + q] = on ? static_cast<Scalar>(input_transform(sl.values.data()[q])) : Scalar(0);
      }
    }
    const std::size_t off = static_cast<std::size_t>(e * hw);
    for (std::size_t q = 0; q < static_cast<std::size_t>(hw); ++q) {
      const bool on = ep.radar.valid.data()[q] != 0;
      rm[off + q] = on ? Scalar(1) : Scalar(0);
      rv[off + q] = on ? static_cast<Scalar>(input_transform(ep.radar.values.data()[q])) : Scalar(0);
    }
    const TargetSelection sel = select_targets(ep, config.target_inputs);
    if (!config.target_inputs || ep.split == Split::Test) assert_disjoint_from_inputs(sel, ep);
    for (std::size_t k = 0; k < sel.size(); ++k) {
      b.targets.push_back({e, static_cast<std::int64_t>(sel.cells[k].i) * b.width + sel.cells[k].j});
      b.y.push_back(sel.y_true[k]);
    }
  }
  b.station_values = Tensor::from({b.size * b.timesteps, 1, b.height, b.width}, std::move(sv));
  b.station_mask = Tensor::from({b.size * b.timesteps, 1, b.height, b.width}, std::move(sm));
  b.radar_values = Tensor::from({b.size, 1, b.height, b.width}, std::move(rv));
  b.radar_mask = Tensor::from({b.size, 1, b.height, b.width}, std::move(rm));
  return b;
}

Batch make_batch(const Episode& episode, const ModelConfig& config) {
  const Episode* p = &episode;
  return make_batch(std::span<const Episode* const>(&p, 1), config);
}

}  // namespace nn
D2G_NN_END
