#pragma once

// Reverse-mode differentiable tensor operations. Each op records a backward
// closure on its output node; `backward(loss)` replays them in reverse
// topological order. Instantiated for float (training) and double
// (gradient checks).

#include <functional>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <vector>

#include "radicalign/common.hpp"

namespace radicalign::tensor {

using Shape = std::vector<int>;

// Every buffer starts on a 64-byte boundary. Vectorised reductions peel
// scalars up to the first aligned element, so without this the summation
// order (and the last bits of every result) would follow the heap layout.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() noexcept = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

std::size_t numel(const Shape& s);
std::string shape_str(const Shape& s);

template <typename T>
struct Node {
  Shape shape;
  Buffer<T> value;
  Buffer<T> grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void()> backward_fn;

  std::size_t size() const noexcept { return value.size(); }
  Buffer<T>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

  static Var constant(Shape shape, std::vector<T> values);
  static Var parameter(Shape shape, std::vector<T> values);
  static Var zeros(Shape shape, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape.at(static_cast<std::size_t>(i < 0 ? static_cast<int>(node_->shape.size()) + i : i)); }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::size_t numel() const { return node_->value.size(); }
  std::span<const T> values() const { return node_->value; }
  std::span<T> mutable_values() { return node_->value; }
  std::span<const T> grad() const { return node_->grad; }
  Buffer<T>& grad_storage() { return node_->grad; }
  T item() const;
  bool requires_grad() const noexcept { return node_->requires_grad; }
  void zero_grad() { node_->grad.clear(); }
  /// Cuts the graph: same values, no parents, no grad tracking.
  Var detach() const;

  Node<T>* node() const noexcept { return node_.get(); }
  const std::shared_ptr<Node<T>>& ptr() const noexcept { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// While alive on a thread, ops on that thread record no graph (inference).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
  static bool active() noexcept;

 private:
  bool previous_;
};

/// Seeds d(loss)=1 and runs every recorded backward closure.
template <typename T>
void backward(const Var<T>& loss);

// --- element-wise and shape ---------------------------------------------------
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T s);
template <typename T> Var<T> relu(const Var<T>& a);
template <typename T> Var<T> reshape(const Var<T>& a, Shape shape);
/// x[B, L, D] + table[Lmax, D] (first L rows), learned positions.
template <typename T> Var<T> add_positional(const Var<T>& x, const Var<T>& table);
/// Rows of x viewed as [rows, d]; output [idx.size(), d].
template <typename T> Var<T> gather_rows(const Var<T>& x, std::span<const int> rows);
/// [n1, d] ++ [n2, d] -> [n1 + n2, d]
template <typename T> Var<T> concat_rows(const Var<T>& a, const Var<T>& b);
/// [N, C, H, W] -> [N, H*W, C]
template <typename T> Var<T> to_sequence(const Var<T>& x);

// --- linear algebra -----------------------------------------------------------
/// x[..., in] * W[in, out] (+ b[out]); pass an undefined Var for no bias.
template <typename T> Var<T> dense(const Var<T>& x, const Var<T>& w, const Var<T>& b);
/// a[n, d] * b[m, d]^T -> [n, m]
template <typename T> Var<T> matmul_nt(const Var<T>& a, const Var<T>& b);
/// Row-wise x / ||x||_2 over the last dim.
template <typename T> Var<T> l2_normalize(const Var<T>& x);

// --- convolutional ------------------------------------------------------------
/// 3x3 convolution, padding 1, stride 1 or 2. x[N,C,H,W], w[Co, C*9], b[Co].
template <typename T> Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride);
/// 2x2 window, stride 2.
template <typename T> Var<T> max_pool2d(const Var<T>& x);
/// [N, C, H, W] -> [N, C]
template <typename T> Var<T> global_avg_pool(const Var<T>& x);

// --- normalisation --------------------------------------------------------------
/// Normalises the last dim; gamma/beta have that size.
template <typename T> Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta);
/// Layer norm over (C, H, W) of each sample with per-channel affine.
template <typename T> Var<T> layer_norm2d(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta);

// --- sequence -------------------------------------------------------------------
/// table[V, D] rows for `ids`; output shape `out_prefix` + [D].
template <typename T> Var<T> embedding(const Var<T>& table, std::span<const int> ids, Shape out_prefix);
/// Softmax over the last dim.
template <typename T> Var<T> softmax(const Var<T>& x);

struct AttentionMask {
  bool causal = false;
  /// Per batch item, keys at index >= length are masked. Empty: no masking.
  std::vector<int> key_lengths;
};

/// Scaled dot-product attention split into `heads`. q[B,Lq,D], k/v[B,Lk,D].
template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads, const AttentionMask& mask);

// --- losses shared by both stages ------------------------------------------------
/// Mean softmax cross-entropy of logits[S, K]; targets < 0 are ignored.
template <typename T> Var<T> cross_entropy(const Var<T>& logits, std::span<const int> targets);

/// Scalar node with precomputed d(value)/d(input_i); backward scales each
/// by the upstream gradient. Used by the fused contrastive and CTR losses.
template <typename T>
Var<T> fused_scalar(T value, std::vector<Var<T>> inputs, std::vector<std::vector<T>> local_grads, const char* op);

void check_finite(std::span<const float> v, const char* op);
void check_finite(std::span<const double> v, const char* op);

}  // namespace radicalign::tensor
