#include "d2g/nn/tensor.hpp"

#include <unordered_set>

D2G_NN_BEGIN
namespace nn {

std::int64_t numel(const Shape& s) {
  std::int64_t n = 1;
  for (std::int64_t d : s) {
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(s));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t k = 0; k < s.size(); ++k) {
    if (k) out += ", ";
    out += std::to_string(s[k]);
  }
  return out + "]";
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), Scalar(0), requires_grad); }

Tensor Tensor::full(Shape shape, Scalar value, bool requires_grad) {
  auto n = std::make_shared<detail::Node>();
  n->value.assign(static_cast<std::size_t>(nn::numel(shape)), value);
  n->shape = std::move(shape);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::from(Shape shape, Buffer values, bool requires_grad) {
  if (static_cast<std::int64_t>(values.size()) != nn::numel(shape))
    throw ShapeError("Tensor::from: " + std::to_string(values.size()) + " values for shape " + shape_str(shape));
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

std::int64_t Tensor::dim(int axis) const {
  const int r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("axis out of range for shape " + shape_str(shape()));
  return node_->shape[static_cast<std::size_t>(axis)];
}

Scalar Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::detach() const { return from(shape(), node_->value, false); }

void Tensor::backward() const {
  if (numel() != 1) throw ShapeError("backward() needs a scalar, got " + shape_str(shape()));
  if (!node_->requires_grad) throw Error("backward() on a tensor that does not require grad");

  // Iterative post-order DFS -> topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      detail::Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  node_->ensure_grad()[0] += Scalar(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward();
  }
  for (detail::Node* n : order) {
    if (!n->backward) continue;  // leaf
    n->backward = nullptr;
    n->parents.clear();
    n->grad.clear();
    n->grad.shrink_to_fit();
  }
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

namespace detail {

Tensor make_result(Shape shape, Buffer value, std::vector<Tensor> parents,
                   const std::function<std::function<void()>(Node*)>& make_backward) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool needs = false;
  if (g_grad_enabled)
    for (const Tensor& p : parents) needs = needs || (p.defined() && p.requires_grad());
  if (needs) {
    n->requires_grad = true;
    for (Tensor& p : parents)
      if (p.defined()) n->parents.push_back(p.node_ptr());
    n->backward = make_backward(n.get());
  }
  return Tensor(std::move(n));
}

}  // namespace detail

}  // namespace nn
D2G_NN_END
