#pragma once

// Reverse-mode differentiation over 2-D tensors.
//
// A Tape records every operation of one forward pass in topological order.
// Ops are free functions taking and returning Var handles; Tape::backward
// walks the nodes in reverse once and accumulates gradients additively at
// fan-out. Parameter leaves reference the owning Parameter's storage and
// receive their gradient into Parameter::grad.

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "figrot/tensor.hpp"

namespace figrot::ad {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v)
      : name(std::move(n)), value(std::move(v)), grad(value.rows(), value.cols()) {}

  void zero_grad() { grad = Tensor<T>(value.rows(), value.cols()); }
};

template <typename T>
class Tape;

template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(id); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

template <typename T>
class Tape {
 public:
  // Propagates the node's gradient into its inputs.
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value);
  // Leaf that borrows `value`; it must outlive the tape.
  Var<T> constant_ref(const Tensor<T>& value);
  // Trainable leaf; gradient is accumulated into `p.grad` by backward().
  Var<T> parameter(Parameter<T>& p);

  Var<T> record(const char* op, Tensor<T> value, std::vector<std::size_t> inputs,
                BackwardFn backward);

  const Tensor<T>& value(std::size_t id) const { return *nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t input(std::size_t id, std::size_t k) const { return nodes_[id].inputs[k]; }
  const Tensor<T>& grad(std::size_t id) const { return nodes_[id].grad; }
  // Gradient buffer of a node, allocated on first use. Only meaningful for
  // nodes that require grad.
  Tensor<T>& grad_buffer(std::size_t id);

  std::size_t size() const noexcept { return nodes_.size(); }

  // Seeds d(loss)/d(loss) = 1 and runs the reverse sweep. Fails on a
  // non-scalar loss or a loss that does not depend on any parameter.
  void backward(Var<T> loss);

 private:
  struct Node {
    const char* op = "";
    Tensor<T> owned;
    const Tensor<T>* value = nullptr;
    Tensor<T> grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;
  };

  // deque: push_back keeps references to existing nodes valid.
  std::deque<Node> nodes_;
};

// ---- ops ---------------------------------------------------------------

template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
// a * b^T
template <typename T> Var<T> matmul_nt(Var<T> a, Var<T> b);
template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
// a (R x C) plus a 1 x C row broadcast over rows.
template <typename T> Var<T> add_row(Var<T> a, Var<T> row);
// a (R x C) times an R x 1 column broadcast over columns.
template <typename T> Var<T> mul_col(Var<T> a, Var<T> col);
template <typename T> Var<T> scale(Var<T> a, T factor);
template <typename T> Var<T> add_scalar(Var<T> a, T offset);
template <typename T> Var<T> concat_cols(std::span<const Var<T>> parts);
template <typename T> Var<T> concat_rows(std::span<const Var<T>> parts);
template <typename T> Var<T> slice_cols(Var<T> a, std::size_t begin, std::size_t end);
template <typename T> Var<T> slice_rows(Var<T> a, std::size_t begin, std::size_t end);
template <typename T> Var<T> logistic(Var<T> a);
// Exact Gaussian-CDF GELU.
template <typename T> Var<T> gelu(Var<T> a);
template <typename T> Var<T> hinge(Var<T> a);
template <typename T> Var<T> softmax(Var<T> a);
template <typename T> Var<T> log_softmax(Var<T> a);
template <typename T> Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5));
template <typename T> Var<T> column_mean(Var<T> a);
// Population variance (divide by rows) of every column.
template <typename T> Var<T> column_variance(Var<T> a);
// x / max(||x||_2, eps) per row.
template <typename T> Var<T> l2_normalize_rows(Var<T> a, T eps = T(1e-12));
template <typename T> Var<T> row_sum(Var<T> a);
template <typename T> Var<T> sum(Var<T> a);
template <typename T> Var<T> mean(Var<T> a);

// ---- gradient checking ---------------------------------------------------

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  std::size_t coordinates = 0;
};

using Objective = std::function<Var<double>(Tape<double>&)>;

// Compares backward() against central differences for every coordinate of
// every parameter. `objective` must register the parameters on the tape it
// is handed and return a scalar.
GradCheckResult finite_diff_check(const Objective& objective,
                                  std::span<Parameter<double>* const> params, double step);

}  // namespace figrot::ad
