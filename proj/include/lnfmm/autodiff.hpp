#pragma once
// Reverse-mode automatic differentiation over 2-D tensors.
//
// Values are computed eagerly while the graph is built; backward() then walks
// the recorded parents in reverse topological order. Graphs are rebuilt for
// every evaluation, nothing is cached between steps.
//
// Binary elementwise ops broadcast an operand whose row count (or column
// count) is 1 against the other operand.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "lnfmm/tensor.hpp"

namespace lnfmm::ad {

class Node {
 public:
  Matrix value;
  bool requires_grad = false;
  bool is_parameter = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::vector<bool> parent_needs_grad;
  std::function<void(Node&)> backward_fn;

  // Gradient accumulator, materialized on first access with the shape of
  // `value`.
  Matrix& grad();
  bool has_grad() const { return !grad_.empty() || value.empty(); }
  void zero_grad();

  bool needs(std::size_t parent) const { return parent_needs_grad[parent]; }
  Matrix& parent_grad(std::size_t parent) { return parents[parent]->grad(); }

 private:
  Matrix grad_;
};

using NodePtr = std::shared_ptr<Node>;

class Var {
 public:
  Var() = default;
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  static Var constant(Matrix value);
  static Var parameter(Matrix value);
  static Var scalar(double value) { return constant(Matrix(1, 1, value)); }

  bool defined() const { return node_ != nullptr; }
  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() const { return node_->value; }
  Matrix& grad() const { return node_->grad(); }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t rows() const { return shape().rows; }
  std::size_t cols() const { return shape().cols; }
  double item() const;
  bool requires_grad() const { return node_->requires_grad; }
  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Parameters are treated as constants on this thread for the guard's
// lifetime; non-parameter leaves that require grad still receive gradients.
class FreezeParametersGuard {
 public:
  FreezeParametersGuard();
  ~FreezeParametersGuard();
  FreezeParametersGuard(const FreezeParametersGuard&) = delete;
  FreezeParametersGuard& operator=(const FreezeParametersGuard&) = delete;
};

bool grad_enabled();

// Forward values of the graph rooted at `root`. Values are computed while the
// graph is built, so this returns them directly.
const Matrix& eval_graph(const Var& root);

// Accumulates ∂loss/∂leaf into every leaf reachable from `loss`. Intermediate
// gradients are reset first, so two calls double every leaf gradient.
void backward(const Var& loss);

// A leaf that requires grad but is not a parameter (e.g. an optimized latent).
Var variable(Matrix value);

Var operator+(const Var& a, const Var& b);
Var operator-(const Var& a, const Var& b);
Var operator*(const Var& a, const Var& b);
Var operator/(const Var& a, const Var& b);
Var operator-(const Var& a);
Var operator*(const Var& a, double s);
Var operator*(double s, const Var& a);
Var operator+(const Var& a, double s);
Var operator-(const Var& a, double s);

Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var inverse(const Var& a);

Var tanh(const Var& a);
Var sigmoid(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var square(const Var& a);
Var abs(const Var& a);
Var clamp(const Var& a, double lo, double hi);

Var sum(const Var& a);
Var mean(const Var& a);
Var sum_cols(const Var& a);  // (r×c) -> (r×1)
Var sum_rows(const Var& a);  // (r×c) -> (1×c)
Var mean_cols(const Var& a);
Var row_l2_norm(const Var& a);  // Euclidean norm of each row, (r×1)

Var concat_cols(std::span<const Var> parts);
Var concat_cols(const Var& a, const Var& b);
Var slice_cols(const Var& a, std::size_t begin, std::size_t count);
Var permute_cols(const Var& a, std::span<const std::size_t> perm);
Var gather_rows(const Var& a, std::span<const std::size_t> rows);
Var repeat_rows(const Var& a, std::size_t times);

Var log_softmax(const Var& a);  // row-wise
// out(i) = a(i, index[i]), shape (r×1)
Var pick(const Var& a, std::span<const std::size_t> index);

}  // namespace lnfmm::ad
