#include "lnfmm/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>
#include <utility>

#include "lnfmm/errors.hpp"
#include "lnfmm/kernels.hpp"

namespace lnfmm::ad {
namespace {

thread_local int g_no_grad_depth = 0;
thread_local int g_freeze_depth = 0;

bool parent_wants_grad(const NodePtr& p) {
  if (!p->requires_grad) return false;
  if (p->is_parameter && g_freeze_depth > 0) return false;
  return true;
}

Var make_op(Matrix value, std::vector<NodePtr> inputs, std::function<void(Node&)> fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_no_grad_depth > 0) return Var(node);
  std::vector<bool> needs(inputs.size());
  bool any = false;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    needs[i] = parent_wants_grad(inputs[i]);
    any = any || needs[i];
  }
  if (!any) return Var(node);
  node->requires_grad = true;
  node->parents = std::move(inputs);
  node->parent_needs_grad = std::move(needs);
  node->backward_fn = std::move(fn);
  return Var(node);
}

// Broadcast-aware index helpers. An operand dimension either matches the
// output or is 1.
std::size_t broadcast_dim(const char* op, std::size_t a, std::size_t b, const Shape& sa,
                          const Shape& sb) {
  if (a == b) return a;
  if (a == 1) return b;
  if (b == 1) return a;
  throw DimensionError(op, sa.str(), sb.str());
}

Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  return {broadcast_dim(op, a.rows, b.rows, a, b), broadcast_dim(op, a.cols, b.cols, a, b)};
}

inline double at_broadcast(const Matrix& m, std::size_t r, std::size_t c) {
  return m(m.rows() == 1 ? 0 : r, m.cols() == 1 ? 0 : c);
}

// Adds `g` (output-shaped) into `target` (operand-shaped), summing over
// broadcast dimensions. `scale(r, c)` multiplies each element.
template <typename F>
void reduce_into(Matrix& target, const Matrix& g, F&& scale) {
  const bool row_b = target.rows() == 1 && g.rows() != 1;
  const bool col_b = target.cols() == 1 && g.cols() != 1;
  for (std::size_t r = 0; r < g.rows(); ++r) {
    for (std::size_t c = 0; c < g.cols(); ++c) {
      target(row_b ? 0 : r, col_b ? 0 : c) += g(r, c) * scale(r, c);
    }
  }
}

template <typename F>
Matrix binary_values(const char* op, const Matrix& a, const Matrix& b, F&& f) {
  const Shape out = broadcast_shape(op, a.shape(), b.shape());
  Matrix v(out.rows, out.cols);
  if (a.shape() == out && b.shape() == out) {
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = f(a[i], b[i]);
    return v;
  }
  for (std::size_t r = 0; r < out.rows; ++r)
    for (std::size_t c = 0; c < out.cols; ++c) v(r, c) = f(at_broadcast(a, r, c), at_broadcast(b, r, c));
  return v;
}

template <typename F, typename D>
Var unary(const Var& a, F&& f, D&& dfdx) {
  const Matrix& x = a.value();
  Matrix v(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) v[i] = f(x[i]);
  return make_op(std::move(v), {a.node()}, [dfdx](Node& n) {
    const Matrix& x = n.parents[0]->value;
    Matrix& g = n.parent_grad(0);
    const Matrix& go = n.grad();
    for (std::size_t i = 0; i < x.size(); ++i) g[i] += go[i] * dfdx(x[i], n.value[i]);
  });
}

}  // namespace

Matrix& Node::grad() {
  if (grad_.shape() != value.shape()) grad_ = Matrix(value.rows(), value.cols());
  return grad_;
}

void Node::zero_grad() {
  if (grad_.shape() == value.shape()) grad_.fill(0.0);
  else grad_ = Matrix(value.rows(), value.cols());
}

Var Var::constant(Matrix value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(node);
}

Var Var::parameter(Matrix value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  node->is_parameter = true;
  return Var(node);
}

Var variable(Matrix value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Var(node);
}

double Var::item() const {
  if (shape() != Shape{1, 1}) throw ContractError("item() on non-scalar " + shape().str());
  return value()[0];
}

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }
FreezeParametersGuard::FreezeParametersGuard() { ++g_freeze_depth; }
FreezeParametersGuard::~FreezeParametersGuard() { --g_freeze_depth; }
bool grad_enabled() { return g_no_grad_depth == 0; }

const Matrix& eval_graph(const Var& root) { return root.value(); }

void backward(const Var& loss) {
  if (!loss.defined()) throw ContractError("backward: undefined loss");
  if (loss.shape() != Shape{1, 1}) {
    throw ContractError("backward: loss must be scalar, got " + loss.shape().str());
  }
  // Iterative post-order DFS; each node is emitted once.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  Node* root = loss.node().get();
  if (!root->requires_grad) return;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      const std::size_t i = next++;
      Node* p = node->parents[i].get();
      if (node->parent_needs_grad[i] && visited.insert(p).second) stack.emplace_back(p, 0);
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }
  for (Node* n : order)
    if (n->backward_fn) n->zero_grad();
  root->grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
}

Var operator+(const Var& a, const Var& b) {
  Matrix v = binary_values("add", a.value(), b.value(), [](double x, double y) { return x + y; });
  return make_op(std::move(v), {a.node(), b.node()}, [](Node& n) {
    const Matrix& g = n.grad();
    for (std::size_t k = 0; k < 2; ++k)
      if (n.needs(k)) reduce_into(n.parent_grad(k), g, [](std::size_t, std::size_t) { return 1.0; });
  });
}

Var operator-(const Var& a, const Var& b) {
  Matrix v = binary_values("sub", a.value(), b.value(), [](double x, double y) { return x - y; });
  return make_op(std::move(v), {a.node(), b.node()}, [](Node& n) {
    const Matrix& g = n.grad();
    if (n.needs(0)) reduce_into(n.parent_grad(0), g, [](std::size_t, std::size_t) { return 1.0; });
    if (n.needs(1)) reduce_into(n.parent_grad(1), g, [](std::size_t, std::size_t) { return -1.0; });
  });
}

Var operator*(const Var& a, const Var& b) {
  Matrix v = binary_values("mul", a.value(), b.value(), [](double x, double y) { return x * y; });
  return make_op(std::move(v), {a.node(), b.node()}, [](Node& n) {
    const Matrix& g = n.grad();
    const Matrix& av = n.parents[0]->value;
    const Matrix& bv = n.parents[1]->value;
    if (n.needs(0))
      reduce_into(n.parent_grad(0), g, [&](std::size_t r, std::size_t c) { return at_broadcast(bv, r, c); });
    if (n.needs(1))
      reduce_into(n.parent_grad(1), g, [&](std::size_t r, std::size_t c) { return at_broadcast(av, r, c); });
  });
}

Var operator/(const Var& a, const Var& b) {
  Matrix v = binary_values("div", a.value(), b.value(), [](double x, double y) { return x / y; });
  return make_op(std::move(v), {a.node(), b.node()}, [](Node& n) {
    const Matrix& g = n.grad();
    const Matrix& av = n.parents[0]->value;
    const Matrix& bv = n.parents[1]->value;
    if (n.needs(0))
      reduce_into(n.parent_grad(0), g,
                  [&](std::size_t r, std::size_t c) { return 1.0 / at_broadcast(bv, r, c); });
    if (n.needs(1))
      reduce_into(n.parent_grad(1), g, [&](std::size_t r, std::size_t c) {
        const double y = at_broadcast(bv, r, c);
        return -at_broadcast(av, r, c) / (y * y);
      });
  });
}

Var operator-(const Var& a) { return a * -1.0; }

Var operator*(const Var& a, double s) {
  Matrix v = a.value();
  for (double& x : v.data()) x *= s;
  return make_op(std::move(v), {a.node()}, [s](Node& n) {
    kernels::active().axpy(s, n.grad().data().data(), n.parent_grad(0).data().data(), n.value.size());
  });
}

Var operator*(double s, const Var& a) { return a * s; }

Var operator+(const Var& a, double s) {
  Matrix v = a.value();
  for (double& x : v.data()) x += s;
  return make_op(std::move(v), {a.node()}, [](Node& n) {
    kernels::active().axpy(1.0, n.grad().data().data(), n.parent_grad(0).data().data(), n.value.size());
  });
}

Var operator-(const Var& a, double s) { return a + (-s); }

Var matmul(const Var& a, const Var& b) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.rows()) throw DimensionError("matmul", av.shape().str(), bv.shape().str());
  Matrix v(av.rows(), bv.cols());
  const auto& k = kernels::active();
  k.gemm_nn(av.data().data(), bv.data().data(), v.data().data(), av.rows(), av.cols(), bv.cols());
  return make_op(std::move(v), {a.node(), b.node()}, [](Node& n) {
    const auto& k = kernels::active();
    const Matrix& g = n.grad();
    const Matrix& av = n.parents[0]->value;
    const Matrix& bv = n.parents[1]->value;
    // dA = G Bᵀ, dB = Aᵀ G
    if (n.needs(0))
      k.gemm_nt(g.data().data(), bv.data().data(), n.parent_grad(0).data().data(), g.rows(), g.cols(),
                bv.rows());
    if (n.needs(1))
      k.gemm_tn(av.data().data(), g.data().data(), n.parent_grad(1).data().data(), av.cols(), av.rows(),
                g.cols());
  });
}

Var transpose(const Var& a) {
  return make_op(lnfmm::transpose(a.value()), {a.node()}, [](Node& n) {
    Matrix& pg = n.parent_grad(0);
    const Matrix& g = n.grad();
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) pg(j, i) += g(i, j);
  });
}

Var inverse(const Var& a) {
  Matrix inv = lnfmm::inverse(a.value());
  return make_op(std::move(inv), {a.node()}, [](Node& n) {
    // d(A⁻¹) = -A⁻¹ dA A⁻¹  =>  dL/dA = -A⁻ᵀ G A⁻ᵀ
    const Matrix& inv = n.value;
    const Matrix invt = lnfmm::transpose(inv);
    const Matrix tmp = lnfmm::matmul(invt, n.grad());
    const Matrix da = lnfmm::matmul(tmp, invt);
    Matrix& pg = n.parent_grad(0);
    for (std::size_t i = 0; i < pg.size(); ++i) pg[i] -= da[i];
  });
}

Var tanh(const Var& a) {
  return unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(const Var& a) {
  return unary(
      a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double, double y) { return y * (1.0 - y); });
}

Var exp(const Var& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(const Var& a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var square(const Var& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var abs(const Var& a) {
  return unary(
      a, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Var clamp(const Var& a, double lo, double hi) {
  return unary(
      a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Var sum(const Var& a) {
  double acc = 0.0;
  for (double x : a.value().data()) acc += x;
  return make_op(Matrix(1, 1, acc), {a.node()}, [](Node& n) {
    const double g = n.grad()[0];
    for (double& x : n.parent_grad(0).data()) x += g;
  });
}

Var mean(const Var& a) { return sum(a) * (1.0 / static_cast<double>(a.value().size())); }

Var sum_cols(const Var& a) {
  const Matrix& x = a.value();
  Matrix v(x.rows(), 1);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double acc = 0.0;
    for (double e : x.row(r)) acc += e;
    v(r, 0) = acc;
  }
  return make_op(std::move(v), {a.node()}, [](Node& n) {
    Matrix& pg = n.parent_grad(0);
    for (std::size_t r = 0; r < pg.rows(); ++r)
      for (double& e : pg.row(r)) e += n.grad()(r, 0);
  });
}

Var sum_rows(const Var& a) {
  const Matrix& x = a.value();
  Matrix v(1, x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) kernels::active().axpy(1.0, x.row(r).data(), v.data().data(), x.cols());
  return make_op(std::move(v), {a.node()}, [](Node& n) {
    Matrix& pg = n.parent_grad(0);
    for (std::size_t r = 0; r < pg.rows(); ++r)
      kernels::active().axpy(1.0, n.grad().data().data(), pg.row(r).data(), pg.cols());
  });
}

Var mean_cols(const Var& a) { return sum_cols(a) * (1.0 / static_cast<double>(a.cols())); }

Var row_l2_norm(const Var& a) {
  const Matrix& x = a.value();
  Matrix v(x.rows(), 1);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double acc = 0.0;
    for (double e : x.row(r)) acc += e * e;
    v(r, 0) = std::sqrt(acc);
  }
  return make_op(std::move(v), {a.node()}, [](Node& n) {
    // Subgradient 0 at the origin.
    const Matrix& x = n.parents[0]->value;
    Matrix& pg = n.parent_grad(0);
    for (std::size_t r = 0; r < x.rows(); ++r) {
      const double norm = n.value(r, 0);
      if (norm == 0.0) continue;
      const double s = n.grad()(r, 0) / norm;
      for (std::size_t c = 0; c < x.cols(); ++c) pg(r, c) += s * x(r, c);
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const std::size_t rows = parts.front().rows();
  std::size_t cols = 0;
  std::vector<NodePtr> inputs;
  for (const Var& p : parts) {
    if (p.rows() != rows) throw DimensionError("concat_cols", parts.front().shape().str(), p.shape().str());
    cols += p.cols();
    inputs.push_back(p.node());
  }
  Matrix v(rows, cols);
  std::size_t offset = 0;
  for (const Var& p : parts) {
    for (std::size_t r = 0; r < rows; ++r)
      std::copy(p.value().row(r).begin(), p.value().row(r).end(),
                v.row(r).begin() + static_cast<std::ptrdiff_t>(offset));
    offset += p.cols();
  }
  return make_op(std::move(v), std::move(inputs), [](Node& n) {
    std::size_t offset = 0;
    const Matrix& g = n.grad();
    for (std::size_t k = 0; k < n.parents.size(); ++k) {
      const std::size_t w = n.parents[k]->value.cols();
      if (n.needs(k)) {
        Matrix& pg = n.parent_grad(k);
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t c = 0; c < w; ++c) pg(r, c) += g(r, offset + c);
      }
      offset += w;
    }
  });
}

Var concat_cols(const Var& a, const Var& b) {
  const Var parts[] = {a, b};
  return concat_cols(parts);
}

Var slice_cols(const Var& a, std::size_t begin, std::size_t count) {
  return make_op(lnfmm::slice_cols(a.value(), begin, count), {a.node()}, [begin, count](Node& n) {
    Matrix& pg = n.parent_grad(0);
    const Matrix& g = n.grad();
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < count; ++c) pg(r, begin + c) += g(r, c);
  });
}

Var permute_cols(const Var& a, std::span<const std::size_t> perm) {
  const Matrix& x = a.value();
  if (perm.size() != x.cols()) {
    throw DimensionError("permute_cols", x.shape().str(), "perm of " + std::to_string(perm.size()));
  }
  Matrix v(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) v(r, c) = x(r, perm[c]);
  std::vector<std::size_t> p(perm.begin(), perm.end());
  return make_op(std::move(v), {a.node()}, [p = std::move(p)](Node& n) {
    Matrix& pg = n.parent_grad(0);
    const Matrix& g = n.grad();
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < g.cols(); ++c) pg(r, p[c]) += g(r, c);
  });
}

Var gather_rows(const Var& a, std::span<const std::size_t> rows) {
  const Matrix& x = a.value();
  Matrix v(rows.size(), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= x.rows()) {
      throw DimensionError("gather_rows", x.shape().str(), "row " + std::to_string(rows[i]));
    }
    std::copy(x.row(rows[i]).begin(), x.row(rows[i]).end(), v.row(i).begin());
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return make_op(std::move(v), {a.node()}, [idx = std::move(idx)](Node& n) {
    Matrix& pg = n.parent_grad(0);
    const Matrix& g = n.grad();
    for (std::size_t i = 0; i < idx.size(); ++i)
      kernels::active().axpy(1.0, g.row(i).data(), pg.row(idx[i]).data(), g.cols());
  });
}

Var repeat_rows(const Var& a, std::size_t times) {
  if (a.rows() != 1) throw DimensionError("repeat_rows", a.shape().str(), "(1xN)");
  return make_op(repeat_row(a.value().row(0), times), {a.node()}, [](Node& n) {
    Matrix& pg = n.parent_grad(0);
    const Matrix& g = n.grad();
    for (std::size_t r = 0; r < g.rows(); ++r) kernels::active().axpy(1.0, g.row(r).data(), pg.data().data(), g.cols());
  });
}

Var log_softmax(const Var& a) {
  const Matrix& x = a.value();
  Matrix v(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto row = x.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double acc = 0.0;
    for (double e : row) acc += std::exp(e - mx);
    const double lse = mx + std::log(acc);
    for (std::size_t c = 0; c < x.cols(); ++c) v(r, c) = x(r, c) - lse;
  }
  return make_op(std::move(v), {a.node()}, [](Node& n) {
    Matrix& pg = n.parent_grad(0);
    const Matrix& g = n.grad();
    for (std::size_t r = 0; r < g.rows(); ++r) {
      double gs = 0.0;
      for (double e : g.row(r)) gs += e;
      for (std::size_t c = 0; c < g.cols(); ++c) pg(r, c) += g(r, c) - std::exp(n.value(r, c)) * gs;
    }
  });
}

Var pick(const Var& a, std::span<const std::size_t> index) {
  const Matrix& x = a.value();
  if (index.size() != x.rows()) {
    throw DimensionError("pick", x.shape().str(), "index of " + std::to_string(index.size()));
  }
  Matrix v(x.rows(), 1);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    if (index[r] >= x.cols()) throw DimensionError("pick", x.shape().str(), "col " + std::to_string(index[r]));
    v(r, 0) = x(r, index[r]);
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return make_op(std::move(v), {a.node()}, [idx = std::move(idx)](Node& n) {
    Matrix& pg = n.parent_grad(0);
    for (std::size_t r = 0; r < idx.size(); ++r) pg(r, idx[r]) += n.grad()(r, 0);
  });
}

}  // namespace lnfmm::ad
