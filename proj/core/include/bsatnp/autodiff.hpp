#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "bsatnp/param_store.hpp"
#include "bsatnp/tensor.hpp"

namespace bsatnp {

template <typename T>
class Tape;

// Handle to a value recorded on a Tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return tape->value(*this).shape(); }
};

enum class GradMode { enabled, disabled };

// Reverse-mode gradient tape. Ops append nodes in execution order; backward()
// walks them in reverse. With GradMode::disabled the tape only carries values
// and never keeps backward closures, which is what inference uses.
//
// Single writer: a tape must not be shared between threads.
template <typename T>
class Tape {
 public:
  // Propagates the gradient held by node `self` into its inputs.
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;
  using SegmentFn = std::function<Var<T>(Tape&, std::span<const Var<T>>)>;

  explicit Tape(GradMode mode = GradMode::enabled) : mode_(mode) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const noexcept { return mode_ == GradMode::enabled; }

  Var<T> constant(Tensor<T> value);
  Var<T> leaf(Tensor<T> value, bool requires_grad = true);
  // Binds a ParamStore entry; backward() adds its gradient into store.grad().
  Var<T> param(ParamStore<T>& store, std::string_view name);

  // Appends an op node. `op` must outlive the tape (string literal).
  Var<T> record(const char* op, Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn backward);
  Var<T> record(const char* op, Tensor<T> value, std::span<const Var<T>> inputs, BackwardFn backward);

  // Gradient checkpoint: runs `fn` without keeping its intermediates and
  // re-runs it during backward to recover them.
  Var<T> checkpoint(std::span<const Var<T>> inputs, SegmentFn fn);

  const Tensor<T>& value(Var<T> v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var<T> v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }
  std::size_t checkpoint_count() const noexcept { return checkpoints_; }
  const char* op_name(Var<T> v) const { return nodes_.at(v.id).op; }

  std::size_t input(std::size_t node, std::size_t k) const { return nodes_[node].inputs[k]; }
  const Tensor<T>& value_of(std::size_t node) const { return nodes_[node].value; }
  bool needs_grad(std::size_t node) const { return nodes_[node].requires_grad; }
  // Gradient accumulator of a node, allocated as zeros on first use.
  Tensor<T>& grad_buffer(std::size_t node);

  // Gradient of a node after backward(). Throws ContractError for nodes that
  // do not require gradients.
  const Tensor<T>& grad(Var<T> v) const;

  // Seeds d(loss)/d(loss) = 1 and propagates. `loss` must hold one value.
  void backward(Var<T> loss);
  // Seeds arbitrary output gradients.
  void backward(std::span<const Var<T>> outputs, std::span<const Tensor<T>> seeds);

 private:
  struct Node {
    const char* op = "";
    Tensor<T> value;
    Tensor<T> grad;
    bool has_grad = false;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    ParamStore<T>* store = nullptr;
    std::size_t param_index = 0;
  };

  Var<T> push(Node node);

  GradMode mode_;
  std::deque<Node> nodes_;
  std::size_t checkpoints_ = 0;
};

// ---- op set -------------------------------------------------------------
// All ops validate shapes (DimensionError) and reject non-finite outputs
// (NumericError naming the op). No implicit broadcasting.

template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
// a * b^T
template <typename T> Var<T> matmul_nt(Var<T> a, Var<T> b);
template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
// x[r, :] + bias for every row r; bias has shape [n] or [1, n].
template <typename T> Var<T> add_row(Var<T> x, Var<T> bias);
template <typename T> Var<T> scale(Var<T> x, T factor);
template <typename T> Var<T> add_scalar(Var<T> x, T offset);
template <typename T> Var<T> gelu(Var<T> x);
template <typename T> Var<T> softplus(Var<T> x);
template <typename T> Var<T> exp(Var<T> x);
template <typename T> Var<T> log(Var<T> x);
template <typename T> Var<T> square(Var<T> x);
template <typename T> Var<T> sum(Var<T> x);
template <typename T> Var<T> mean(Var<T> x);
// Row-wise normalization over the last axis, eps inside the square root.
template <typename T> Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> shift, T eps = T(1e-5));
template <typename T> Var<T> concat_cols(std::span<const Var<T>> parts);
template <typename T> Var<T> concat_rows(std::span<const Var<T>> parts);
template <typename T> Var<T> slice_rows(Var<T> x, std::size_t begin, std::size_t count);
template <typename T> Var<T> slice_cols(Var<T> x, std::size_t begin, std::size_t count);
template <typename T> Var<T> softmax_rows(Var<T> x);
// Row lookup table[indices[i], :].
template <typename T> Var<T> embedding(Var<T> table, std::span<const std::size_t> indices);
// Mean over all elements of 0.5 ln(2 pi sigma^2) + (f - mu)^2 / (2 sigma^2).
// Throws ContractError if any sigma is below `sigma_floor`.
template <typename T> Var<T> gaussian_nll(Var<T> mu, Var<T> sigma, const Tensor<T>& target, T sigma_floor);

// Convenience used by the model: x * w + b.
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  return add_row(matmul(x, w), b);
}

// Raises NumericError if `t` holds a NaN or Inf.
template <typename T>
void check_finite(const Tensor<T>& t, const char* op, const char* what = "value");

}  // namespace bsatnp
