#pragma once

// Reverse-mode automatic differentiation over real-valued tensors.
//
// A Tape records every operation as a node holding its forward value and a
// backward rule. Nodes are appended in evaluation order, so reverse creation
// order is a valid reverse topological order and backward() visits each node
// once. Complex quantities never appear on the tape: they are carried as
// (re, im) pairs of real tensors, see complex.hpp.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace bfsep::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tape;

// Lightweight handle to a tape node. Copying a Tensor copies the handle.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Tape* tape, std::uint32_t id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const { return *tape_; }
  std::uint32_t id() const { return id_; }

  const Shape& shape() const;
  std::size_t numel() const;
  std::size_t dim(std::size_t axis) const { return shape().at(axis); }
  std::size_t rank() const { return shape().size(); }
  std::span<const double> values() const;
  double item() const;  // value of a single-element tensor
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

using BackwardFn = std::function<void(Tape& tape, std::uint32_t self)>;

class GradientMap {
 public:
  // Gradient for a trainable leaf; zeros if the leaf was not reached.
  const std::vector<double>& at(const Tensor& leaf) const;
  bool contains(const Tensor& leaf) const { return grads_.count(leaf.id()) != 0; }
  std::size_t size() const { return grads_.size(); }
  bool empty() const { return grads_.empty(); }

 private:
  friend class Tape;
  std::unordered_map<std::uint32_t, std::vector<double>> grads_;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor constant(Shape shape, std::vector<double> values);
  Tensor constant(Shape shape, double fill);
  Tensor scalar(double v) { return constant({}, v); }
  // Leaf node; trainable leaves receive gradients in backward().
  Tensor leaf(Shape shape, std::vector<double> values, bool trainable = true);

  // Appends an operation node. The backward rule is kept only if some parent
  // requires a gradient and recording is enabled.
  Tensor record(const char* op, Shape shape, std::vector<double> values,
                std::span<const Tensor> parents, BackwardFn backward);
  Tensor record(const char* op, Shape shape, std::vector<double> values,
                std::initializer_list<Tensor> parents, BackwardFn backward) {
    return record(op, std::move(shape), std::move(values),
                  std::span<const Tensor>(parents.begin(), parents.size()), std::move(backward));
  }

  const Shape& shape(std::uint32_t id) const { return nodes_[id].shape; }
  std::span<const double> value(std::uint32_t id) const { return nodes_[id].value; }
  bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }
  const char* op_name(std::uint32_t id) const { return nodes_[id].op; }
  std::size_t size() const { return nodes_.size(); }

  // Gradient accumulator of a node, zero-initialised on first access.
  std::span<double> grad_buffer(std::uint32_t id);
  // Accumulated gradient, empty span if nothing has flowed into the node.
  std::span<const double> grad(std::uint32_t id) const { return nodes_[id].grad; }

  // Reverse sweep from a single-element loss. Throws ValidationError for a
  // non-scalar loss and NumericalError naming the first node holding a
  // non-finite value or gradient.
  GradientMap backward(const Tensor& loss);
  // Vector-Jacobian product: sweep seeded with d(out) = seed.
  GradientMap backward_from(const Tensor& out, std::span<const double> seed);

  // First node (in evaluation order) whose value contains NaN/Inf.
  std::optional<std::uint32_t> first_nonfinite() const;
  std::string describe(std::uint32_t id) const;
  void check_finite() const;

  void set_grad_enabled(bool enabled) { grad_enabled_ = enabled; }
  bool grad_enabled() const { return grad_enabled_; }

 private:
  struct Node {
    const char* op;
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    BackwardFn backward;
    bool requires_grad = false;
    bool trainable = false;
  };

  GradientMap sweep(const Tensor& out, std::span<const double> seed);

  std::vector<Node> nodes_;
  bool grad_enabled_ = true;
};

// Disables backward recording for the lifetime of the guard.
class NoGradGuard {
 public:
  explicit NoGradGuard(Tape& tape) : tape_(tape), prev_(tape.grad_enabled()) {
    tape_.set_grad_enabled(false);
  }
  ~NoGradGuard() { tape_.set_grad_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape& tape_;
  bool prev_;
};

// ---- elementwise, numpy-style broadcasting over trailing dimensions ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor square(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor log10(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
// max(a, floor); the gradient is zero where the floor is active.
Tensor clamp_min(const Tensor& a, double floor);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// ---- reductions ----
Tensor sum(const Tensor& a);  // -> shape {}
Tensor mean(const Tensor& a);
Tensor sum_axis(const Tensor& a, std::size_t axis, bool keepdim = false);

// ---- structure ----
Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& perm);
Tensor transpose(const Tensor& a);  // swaps the last two axes
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
inline Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis) {
  return concat(std::span<const Tensor>(parts.begin(), parts.size()), axis);
}
Tensor pad(const Tensor& a, std::size_t axis, std::size_t before, std::size_t after);

// ---- linear algebra ----
// (..., n, k) x (..., k, m). Batch dimensions must match, or one operand is
// rank 2 and is shared across the batch.
Tensor matmul(const Tensor& a, const Tensor& b);
// Batched solve A X = B with partial-pivoting LU. A (..., n, n), B (..., n, k).
Tensor solve(const Tensor& a, const Tensor& b);

// ---- signals (rank-1 tensors) ----
// out[k] = sum_n a[n] * b[n + k], k in [0, lags).
Tensor xcorr(const Tensor& a, const Tensor& b, std::size_t lags);
// Full linear convolution, length x + h - 1.
Tensor conv_full(const Tensor& x, const Tensor& h);

}  // namespace bfsep::ad
