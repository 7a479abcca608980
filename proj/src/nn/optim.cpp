#include "d2g/nn/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "d2g/nn/model.hpp"

D2G_NN_BEGIN
namespace nn {

double cosine_lr(double lr0, std::int64_t step, std::int64_t total) {
  if (total <= 0) throw Error("cosine_lr: total steps must be positive");
  const double s = std::clamp(static_cast<double>(step) / static_cast<double>(total), 0.0, 1.0);
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * s));
}

double clip_grad_norm(const ParameterList& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    if (p.tensor.has_grad())
      for (const Scalar g : p.tensor.grad()) sq += double(g) * double(g);
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double scale = max_norm / (norm + 1e-6);
    for (const auto& p : params) {
      Tensor t = p.tensor;
      if (!t.has_grad()) continue;
      for (Scalar& g : t.grad()) g = static_cast<Scalar>(g * scale);
    }
  }
  return norm;
}

namespace {

std::vector<Buffer> zeros_like(const ParameterList& params) {
  std::vector<Buffer> out;
  for (const auto& p : params) out.emplace_back(static_cast<std::size_t>(p.tensor.numel()), Scalar(0));
  return out;
}

void check_layout(const ParameterList& params, const std::vector<Buffer>& state, const char* what) {
  if (state.size() != params.size()) throw ShapeError(std::string(what) + ": parameter count mismatch");
  for (std::size_t k = 0; k < params.size(); ++k)
    if (state[k].size() != static_cast<std::size_t>(params[k].tensor.numel()))
      throw ShapeError(std::string(what) + ": size mismatch for " + params[k].name);
}

}  // namespace

AdamW::AdamW(const ParameterList& params, AdamWConfig config)
    : config_(config), m_(zeros_like(params)), v_(zeros_like(params)) {}

void AdamW::step(const ParameterList& params, double lr) {
  check_layout(params, m_, "AdamW");
  ++steps_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
  const double decay = 1.0 - lr * config_.weight_decay;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor t = params[k].tensor;
    auto w = t.data();
    if (!t.has_grad()) {
      for (Scalar& x : w) x = static_cast<Scalar>(x * decay);
      continue;
    }
    auto g = t.grad();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i];
      const double mi = config_.beta1 * m[i] + (1.0 - config_.beta1) * gi;
      const double vi = config_.beta2 * v[i] + (1.0 - config_.beta2) * gi * gi;
      m[i] = static_cast<Scalar>(mi);
      v[i] = static_cast<Scalar>(vi);
      const double update = (mi / c1) / (std::sqrt(vi / c2) + config_.eps);
      w[i] = static_cast<Scalar>(w[i] * decay - lr * update);
    }
  }
}

void AdamW::load_state(std::int64_t steps, std::vector<Buffer> m, std::vector<Buffer> v) {
  if (m.size() != v.size() || m.size() != m_.size()) throw ShapeError("AdamW: state layout mismatch");
  for (std::size_t k = 0; k < m.size(); ++k)
    if (m[k].size() != m_[k].size() || v[k].size() != m_[k].size()) throw ShapeError("AdamW: state layout mismatch");
  steps_ = steps;
  m_ = std::move(m);
  v_ = std::move(v);
}

Ema::Ema(const ParameterList& params, double decay) : decay_(decay), shadow_(snapshot(params)) {
  if (!(decay > 0.0 && decay < 1.0)) throw Error("EMA decay must lie in (0, 1)");
}

double Ema::current_decay() const {
  const double k = static_cast<double>(updates_);
  return std::min(decay_, (1.0 + k) / (10.0 + k));
}

void Ema::update(const ParameterList& params) {
  check_layout(params, shadow_, "EMA");
  const double d = current_decay();
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto w = params[k].tensor.data();
    auto& s = shadow_[k];
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = static_cast<Scalar>(d * s[i] + (1.0 - d) * w[i]);
  }
  ++updates_;
}

void Ema::load_state(std::int64_t updates, std::vector<Buffer> shadow) {
  if (shadow.size() != shadow_.size()) throw ShapeError("EMA: state layout mismatch");
  for (std::size_t k = 0; k < shadow.size(); ++k)
    if (shadow[k].size() != shadow_[k].size()) throw ShapeError("EMA: state layout mismatch");
  updates_ = updates;
  shadow_ = std::move(shadow);
}

}  // namespace nn
D2G_NN_END
