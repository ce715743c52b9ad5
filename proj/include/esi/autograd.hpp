#pragma once

// Minimal tape-free reverse-mode autodiff over dense tensors.
//
// A Var is a shared handle to a Node; each op result keeps its inputs alive
// through `parents` and stores a closure that pushes its gradient into them.
// backward() runs those closures in reverse topological order. Parameters are
// leaf Vars with requires_grad set; their gradients accumulate until cleared.

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "esi/tensor.hpp"

namespace esi {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void()> backward_fn;

  Tensor<T>& ensure_grad() {
    if (grad.numel() != value.numel()) grad = Tensor<T>(value.shape);
    return grad;
  }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Tensor<T>& grad() const { return node_->grad; }
  Tensor<T>& mutable_grad() { return node_->ensure_grad(); }
  bool has_grad() const { return node_->grad.numel() == node_->value.numel(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  void zero_grad() { node_->grad = Tensor<T>(); }
  const Shape& shape() const { return node_->value.shape; }
  int64_t dim(int i) const { return node_->value.dim(i); }
  T item() const { return node_->value.data.at(0); }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Thread-local switch: when disabled, ops record no parents or closures.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool flag);
};

class NoGradGuard {
 public:
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Seeds d(root)/d(root) = 1 (root must be a scalar) and propagates.
template <typename T>
void backward(const Var<T>& root);

// True when grad mode is on and any input requires grad.
template <typename T>
bool needs_grad(std::initializer_list<const Var<T>*> inputs) {
  if (!GradMode::enabled()) return false;
  for (const Var<T>* v : inputs) {
    if (v && v->defined() && v->requires_grad()) return true;
  }
  return false;
}

// Wires `out` to its inputs and installs the backward closure.
template <typename T>
void attach(Var<T>& out, std::initializer_list<const Var<T>*> inputs, std::function<void()> fn) {
  Node<T>* n = out.node();
  n->requires_grad = true;
  for (const Var<T>* v : inputs) {
    if (v && v->defined()) n->parents.push_back(v->node_ptr());
  }
  n->backward_fn = std::move(fn);
}

namespace ops {

// x [..., K] * w [K, N] (+ bias [N]) -> [..., N]
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& bias = {});

// x [..., K] * w[N, K]^T -> [..., N]
template <typename T>
Var<T> matmul_nt(const Var<T>& x, const Var<T>& w);

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> scale(const Var<T>& a, T factor);

// sum_i factor_i * v_i over scalars or equally-shaped tensors
template <typename T>
Var<T> weighted_sum(const std::vector<Var<T>>& terms, const std::vector<T>& factors);

// Exact (erf) GELU.
template <typename T>
Var<T> gelu(const Var<T>& x);

// Normalizes over the last dimension.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps);

// Global response normalization over the length axis of x [B, L, C]:
// y = gamma * (x * N(x)) + beta + x, N = ||x||_L / (mean_C ||x||_L + eps)
template <typename T>
Var<T> grn(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps);

// Channels-last depthwise conv with same padding: x [B,L,C], w [K,C], bias [C].
template <typename T>
Var<T> depthwise_conv1d(const Var<T>& x, const Var<T>& w, const Var<T>& bias);

// Sliding windows over the length axis: [B, L, C] -> [B, P, kernel*C] with
// P = floor((L - kernel) / stride) + 1. Followed by a linear layer this is a
// strided 1D convolution without padding.
template <typename T>
Var<T> unfold(const Var<T>& x, int64_t kernel, int64_t stride);

// ids [B*L] with shape [B, L] gathered from table [V, C].
template <typename T>
Var<T> embedding(const std::vector<int32_t>& ids, const Shape& ids_shape, const Var<T>& table);

// x [B, L, C] + pos[:L] with pos [Lmax, C]
template <typename T>
Var<T> add_positional(const Var<T>& x, const Var<T>& pos);

// Multi-head scaled dot-product attention on already projected inputs.
// q [B, Lq, W], k/v [B, Lk, W]. key_valid (optional) [B*Lk], nonzero = attendable.
// Rows with no attendable key produce zeros.
template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads,
                 const std::vector<uint8_t>* key_valid, bool causal);

// x [B, L, C] -> [B, C] at position pos.
template <typename T>
Var<T> select_position(const Var<T>& x, int64_t pos);

// v [C] -> [B, 1, C]
template <typename T>
Var<T> broadcast_batch(const Var<T>& v, int64_t batch);

// Row-wise x / max(|x|, eps) of x viewed as [rows, C].
template <typename T>
Var<T> l2_normalize(const Var<T>& x, T eps);

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape);

}  // namespace ops

}  // namespace esi
