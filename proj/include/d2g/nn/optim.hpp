#pragma once

#include <cstdint>
#include <vector>

#include "d2g/nn/layers.hpp"

D2G_NN_BEGIN
namespace nn {

// lr(s) = lr0 * (1 + cos(pi * s / total)) / 2; lr(0) = lr0, lr(total) = 0.
double cosine_lr(double lr0, std::int64_t step, std::int64_t total);

// Scales every gradient so the global L2 norm is at most `max_norm`.
// Returns the norm before clipping.
double clip_grad_norm(const ParameterList& params, double max_norm);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

// Adam with decoupled weight decay:
//   p <- p - lr * wd * p,  p <- p - lr * m_hat / (sqrt(v_hat) + eps).
class AdamW {
 public:
  AdamW(const ParameterList& params, AdamWConfig config);

  // Applies one update from the current gradients; parameters without a
  // gradient only decay.
  void step(const ParameterList& params, double lr);

  std::int64_t steps() const { return steps_; }
  const std::vector<Buffer>& first_moment() const { return m_; }
  const std::vector<Buffer>& second_moment() const { return v_; }
  void load_state(std::int64_t steps, std::vector<Buffer> m, std::vector<Buffer> v);

 private:
  AdamWConfig config_;
  std::int64_t steps_ = 0;
  std::vector<Buffer> m_, v_;
};

// Shadow parameters s <- d s + (1 - d) p with d = min(decay, (1 + k) / (10 + k))
// at update k. Starts from a copy of the parameters.
class Ema {
 public:
  Ema(const ParameterList& params, double decay);

  void update(const ParameterList& params);
  double current_decay() const;

  std::int64_t updates() const { return updates_; }
  const std::vector<Buffer>& shadow() const { return shadow_; }
  void load_state(std::int64_t updates, std::vector<Buffer> shadow);

 private:
  double decay_;
  std::int64_t updates_ = 0;
  std::vector<Buffer> shadow_;
};

}  // namespace nn
D2G_NN_END
