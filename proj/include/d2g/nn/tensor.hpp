#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "d2g/field.hpp"
#include "d2g/nn/scalar.hpp"

D2G_NN_BEGIN
namespace nn {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {

struct Node {
  Shape shape;
  Buffer value;
  Buffer grad;  // empty until something flows into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void()> backward;

  Buffer& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), Scalar(0));
    return grad;
  }
};

}  // namespace detail

// Reverse-mode autodiff handle. Copies share the underlying node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Scalar value, bool requires_grad = false);
  static Tensor from(Shape shape, Buffer values, bool requires_grad = false);
  static Tensor scalar(Scalar v) { return from({}, {v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::int64_t dim(int axis) const;
  std::int64_t numel() const { return static_cast<std::int64_t>(node_->value.size()); }

  std::span<const Scalar> data() const { return node_->value; }
  std::span<Scalar> data() { return node_->value; }
  std::span<const Scalar> grad() const { return node_->grad; }
  std::span<Scalar> grad() { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  bool requires_grad() const { return node_->requires_grad; }
  Scalar item() const;

  void zero_grad();
  // Accumulates d(this)/d(leaf) into every reachable leaf; `this` must hold a
  // single element. The graph is released afterwards.
  void backward() const;
  Tensor detach() const;

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// Graph recording switch; thread-local.
bool grad_enabled();
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

// Creates an op result. `parents` are recorded only if grad mode is on and at
// least one parent requires grad; `make_backward` is then invoked with the new
// node and must return its backward closure.
Tensor make_result(Shape shape, Buffer value, std::vector<Tensor> parents,
                   const std::function<std::function<void()>(Node*)>& make_backward);

}  // namespace detail

}  // namespace nn
D2G_NN_END
