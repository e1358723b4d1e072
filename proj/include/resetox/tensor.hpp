#pragma once

// Dense row-major tensors of doubles with tape-based reverse-mode
// differentiation. A Tensor is a handle: copies alias the same storage, use
// clone() for an independent value. Operations on tensors that do not require
// gradients record nothing, so inference pays no tape cost.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "resetox/errors.hpp"

namespace resetox {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until something accumulates into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;  // pushes this->grad into inputs

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
  }
};

inline std::size_t shape_product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    if (shape.empty()) throw DimensionError("tensor shape must have rank >= 1");
    for (auto extent : shape) {
      if (extent == 0)
        throw DimensionError("tensor extents must be positive, got " +
                             shape_string(shape));
    }
    if (detail::shape_product(shape) != values.size())
      throw DimensionError("tensor shape " + shape_string(shape) + " needs " +
                           std::to_string(detail::shape_product(shape)) +
                           " values, got " + std::to_string(values.size()));
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = detail::shape_product(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }
  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor({1}, {v}, requires_grad);
  }
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> values, bool requires_grad = false) {
    return Tensor({rows, cols}, std::move(values), requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  std::size_t rows() const { return node_->shape.size() == 2 ? node_->shape[0] : 1; }
  std::size_t cols() const { return node_->shape.back(); }

  std::span<const double> data() const { return node_->value; }
  // Writes bypass the tape; only meaningful on leaves.
  std::span<double> mutable_data() { return node_->value; }
  double item() const {
    if (size() != 1)
      throw ContractError("item() on non-scalar tensor " + shape_string(shape()));
    return node_->value[0];
  }
  double at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  bool is_leaf() const { return !node_->backward; }

  bool has_grad() const { return !node_->grad.empty(); }
  // Empty span when nothing has accumulated yet.
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  // Independent leaf with the same values and flag; the tape is not copied.
  Tensor clone() const { return Tensor(shape(), node_->value, requires_grad()); }
  Tensor detach() const { return Tensor(shape(), node_->value, false); }

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

// Ordered record of the operations reachable from a loss; inputs precede uses.
class ComputationTape {
 public:
  explicit ComputationTape(const Tensor& root) {
    if (!root.defined()) return;
    std::unordered_set<const detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(root.node(), 0);
    seen.insert(root.node());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        detail::Node* child = node->inputs[next++].get();
        if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      } else {
        order_.push_back(node);
        stack.pop_back();
      }
    }
  }

  std::size_t size() const { return order_.size(); }
  std::span<detail::Node* const> nodes() const { return order_; }

  bool is_topological() const {
    std::unordered_set<const detail::Node*> done;
    for (const auto* node : order_) {
      for (const auto& in : node->inputs) {
        if (in->requires_grad && !done.count(in.get())) return false;
      }
      done.insert(node);
    }
    return true;
  }

 private:
  std::vector<detail::Node*> order_;
};

// Accumulates d(loss)/d(leaf) into every reachable leaf that requires a
// gradient. Leaf accumulators are never cleared here; intermediate ones are.
inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1)
    throw ContractError("backward() needs a scalar loss, got " +
                        (loss.defined() ? shape_string(loss.shape()) : std::string("undefined")));
  if (!loss.requires_grad()) return;
  ComputationTape tape(loss);
  for (auto* node : tape.nodes()) {
    if (node->backward) node->grad.assign(node->value.size(), 0.0);
  }
  loss.node()->ensure_grad();
  loss.node()->grad[0] += 1.0;
  auto nodes = tape.nodes();
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

namespace detail {

inline Tensor make_result(Shape shape, std::vector<double> values,
                          std::initializer_list<Tensor> inputs,
                          std::function<void(Node&)> backward_fn) {
  Tensor out(std::move(shape), std::move(values));
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (any) {
    auto* node = out.node();
    node->requires_grad = true;
    for (const auto& in : inputs) node->inputs.push_back(in.node_ptr());
    node->backward = std::move(backward_fn);
  }
  return out;
}

inline Tensor make_result(Shape shape, std::vector<double> values,
                          const std::vector<Tensor>& inputs,
                          std::function<void(Node&)> backward_fn) {
  Tensor out(std::move(shape), std::move(values));
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (any) {
    auto* node = out.node();
    node->requires_grad = true;
    for (const auto& in : inputs) node->inputs.push_back(in.node_ptr());
    node->backward = std::move(backward_fn);
  }
  return out;
}

// Gradient sink for input `i` of `out`, or nullptr when it needs none.
inline double* grad_of(Node& out, std::size_t i) {
  Node* in = out.inputs[i].get();
  if (!in->requires_grad) return nullptr;
  in->ensure_grad();
  return in->grad.data();
}

inline void require_matrix(const Tensor& t, const char* op) {
  if (!t.defined() || t.rank() != 2)
    throw DimensionError(std::string(op) + ": expected a matrix, got " +
                         (t.defined() ? shape_string(t.shape()) : std::string("undefined")));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
}

// C[m x n] += A[m x k] * B[k x n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m,
                    std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x n] += A[m x k] * B[n x k]^T
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m,
                    std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] += acc;
    }
  }
}

// C[k x n] += A[m x k]^T * B[m x n]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m,
                    std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k)
    throw DimensionError("matmul: inner extents disagree, " + shape_string(a.shape()) +
                         " * " + shape_string(b.shape()));
  std::vector<double> out(m * n, 0.0);
  detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return detail::make_result({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& o) {
    const auto& av = o.inputs[0]->value;
    const auto& bv = o.inputs[1]->value;
    if (double* ga = detail::grad_of(o, 0)) detail::gemm_nt(o.grad.data(), bv.data(), ga, m, n, k);
    if (double* gb = detail::grad_of(o, 1)) detail::gemm_tn(av.data(), o.grad.data(), gb, m, k, n);
  });
}

// a * b^T without materializing the transpose.
inline Tensor matmul_transposed(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul_transposed");
  detail::require_matrix(b, "matmul_transposed");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k)
    throw DimensionError("matmul_transposed: inner extents disagree, " +
                         shape_string(a.shape()) + " * " + shape_string(b.shape()) + "^T");
  std::vector<double> out(m * n, 0.0);
  detail::gemm_nt(a.data().data(), b.data().data(), out.data(), m, k, n);
  return detail::make_result({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& o) {
    const auto& av = o.inputs[0]->value;
    const auto& bv = o.inputs[1]->value;
    if (double* ga = detail::grad_of(o, 0)) detail::gemm_nn(o.grad.data(), bv.data(), ga, m, n, k);
    if (double* gb = detail::grad_of(o, 1)) detail::gemm_tn(o.grad.data(), av.data(), gb, m, n, k);
  });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_matrix(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  auto av = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  return detail::make_result({n, m}, std::move(out), {a}, [m, n](detail::Node& o) {
    if (double* g = detail::grad_of(o, 0))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += o.grad[j * m + i];
  });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& o) {
    for (std::size_t s = 0; s < 2; ++s)
      if (double* g = detail::grad_of(o, s))
        for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& o) {
    if (double* g = detail::grad_of(o, 0))
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
    if (double* g = detail::grad_of(o, 1))
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] -= o.grad[i];
  });
}

// Elementwise product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& o) {
    const auto& av = o.inputs[0]->value;
    const auto& bv = o.inputs[1]->value;
    if (double* g = detail::grad_of(o, 0))
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * bv[i];
    if (double* g = detail::grad_of(o, 1))
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * av[i];
  });
}

inline Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  return detail::make_result(a.shape(), std::move(out), {a}, [factor](detail::Node& o) {
    if (double* g = detail::grad_of(o, 0))
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += factor * o.grad[i];
  });
}

// x[m x n] + row[1 x n] broadcast over rows.
inline Tensor add_row(const Tensor& x, const Tensor& row) {
  detail::require_matrix(x, "add_row");
  detail::require_matrix(row, "add_row");
  const std::size_t m = x.rows(), n = x.cols();
  if (row.rows() != 1 || row.cols() != n)
    throw DimensionError("add_row: bias " + shape_string(row.shape()) + " does not fit " +
                         shape_string(x.shape()));
  std::vector<double> out(x.data().begin(), x.data().end());
  auto rv = row.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += rv[j];
  return detail::make_result(x.shape(), std::move(out), {x, row}, [m, n](detail::Node& o) {
    if (double* g = detail::grad_of(o, 0))
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
    if (double* g = detail::grad_of(o, 1))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[j] += o.grad[i * n + j];
  });
}

inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v = v > 0.0 ? v : 0.0;
  return detail::make_result(a.shape(), std::move(out), {a}, [](detail::Node& o) {
    const auto& in = o.inputs[0]->value;
    if (double* g = detail::grad_of(o, 0))
      for (std::size_t i = 0; i < o.grad.size(); ++i)
        if (in[i] > 0.0) g[i] += o.grad[i];
  });
}

// Elementwise natural log with the argument floored at `floor`.
inline Tensor log(const Tensor& a, double floor = 0.0) {
  std::vector<double> out(a.size());
  auto av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(std::max(av[i], floor));
  return detail::make_result(a.shape(), std::move(out), {a}, [floor](detail::Node& o) {
    const auto& in = o.inputs[0]->value;
    if (double* g = detail::grad_of(o, 0))
      for (std::size_t i = 0; i < o.grad.size(); ++i)
        if (in[i] > floor) g[i] += o.grad[i] / in[i];
  });
}

namespace detail {

// Softmax over `count` elements spaced `stride` apart; entries at positions
// >= `limit` are masked to probability zero.
inline void softmax_strided(const double* x, double* y, std::size_t count,
                            std::size_t stride, std::size_t limit) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < limit; ++i) mx = std::max(mx, x[i * stride]);
  double total = 0.0;
  for (std::size_t i = 0; i < limit; ++i) {
    y[i * stride] = std::exp(x[i * stride] - mx);
    total += y[i * stride];
  }
  for (std::size_t i = 0; i < limit; ++i) y[i * stride] /= total;
  for (std::size_t i = limit; i < count; ++i) y[i * stride] = 0.0;
}

inline void softmax_strided_backward(const double* y, const double* gy, double* gx,
                                     std::size_t count, std::size_t stride) {
  double dot = 0.0;
  for (std::size_t i = 0; i < count; ++i) dot += y[i * stride] * gy[i * stride];
  for (std::size_t i = 0; i < count; ++i)
    gx[i * stride] += y[i * stride] * (gy[i * stride] - dot);
}

}  // namespace detail

// Row-wise softmax. With `causal_offset`, row r only sees columns
// c <= r + *causal_offset; the rest get probability zero.
inline Tensor softmax_rows(const Tensor& x, std::optional<std::size_t> causal_offset = {}) {
  detail::require_matrix(x, "softmax_rows");
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(m * n);
  auto xv = x.data();
  for (std::size_t i = 0; i < m; ++i) {
    std::size_t limit = causal_offset ? std::min(n, i + *causal_offset + 1) : n;
    detail::softmax_strided(xv.data() + i * n, out.data() + i * n, n, 1, limit);
  }
  auto result = detail::make_result({m, n}, std::move(out), {x}, {});
  if (result.requires_grad()) {
    auto* self = result.node();
    self->backward = [m, n](detail::Node& o) {
      if (double* g = detail::grad_of(o, 0))
        for (std::size_t i = 0; i < m; ++i)
          detail::softmax_strided_backward(o.value.data() + i * n, o.grad.data() + i * n,
                                           g + i * n, n, 1);
    };
  }
  return result;
}

// Softmax applied independently to each column.
inline Tensor softmax_columns(const Tensor& x) {
  detail::require_matrix(x, "softmax_columns");
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(m * n);
  auto xv = x.data();
  for (std::size_t j = 0; j < n; ++j) detail::softmax_strided(xv.data() + j, out.data() + j, m, n, m);
  auto result = detail::make_result({m, n}, std::move(out), {x}, {});
  if (result.requires_grad()) {
    result.node()->backward = [m, n](detail::Node& o) {
      if (double* g = detail::grad_of(o, 0))
        for (std::size_t j = 0; j < n; ++j)
          detail::softmax_strided_backward(o.value.data() + j, o.grad.data() + j, g + j, m, n);
    };
  }
  return result;
}

inline Tensor log_softmax_rows(const Tensor& x) {
  detail::require_matrix(x, "log_softmax_rows");
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(m * n);
  auto xv = x.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = xv.data() + i * n;
    double mx = *std::max_element(row, row + n);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) total += std::exp(row[j] - mx);
    const double lse = mx + std::log(total);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = row[j] - lse;
  }
  auto result = detail::make_result({m, n}, std::move(out), {x}, {});
  if (result.requires_grad()) {
    result.node()->backward = [m, n](detail::Node& o) {
      if (double* g = detail::grad_of(o, 0))
        for (std::size_t i = 0; i < m; ++i) {
          double total = 0.0;
          for (std::size_t j = 0; j < n; ++j) total += o.grad[i * n + j];
          for (std::size_t j = 0; j < n; ++j)
            g[i * n + j] += o.grad[i * n + j] - std::exp(o.value[i * n + j]) * total;
        }
    };
  }
  return result;
}

// Per-row normalization followed by the affine map gain * x_hat + bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
  detail::require_matrix(x, "layer_norm");
  const std::size_t m = x.rows(), n = x.cols();
  if (gain.size() != n || bias.size() != n)
    throw DimensionError("layer_norm: gain/bias " + shape_string(gain.shape()) + "/" +
                         shape_string(bias.shape()) + " do not fit " + shape_string(x.shape()));
  std::vector<double> out(m * n), xhat(m * n), inv_std(m);
  auto xv = x.data(), gv = gain.data(), bv = bias.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = xv.data() + i * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += row[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (row[j] - mean) * inv_std[i];
      out[i * n + j] = gv[j] * xhat[i * n + j] + bv[j];
    }
  }
  return detail::make_result(
      {m, n}, std::move(out), {x, gain, bias},
      [m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& o) {
        const auto& gv = o.inputs[1]->value;
        if (double* gx = detail::grad_of(o, 0)) {
          for (std::size_t i = 0; i < m; ++i) {
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double d = o.grad[i * n + j] * gv[j];
              mean_d += d;
              mean_dx += d * xhat[i * n + j];
            }
            mean_d /= static_cast<double>(n);
            mean_dx /= static_cast<double>(n);
            for (std::size_t j = 0; j < n; ++j) {
              const double d = o.grad[i * n + j] * gv[j];
              gx[i * n + j] += inv_std[i] * (d - mean_d - xhat[i * n + j] * mean_dx);
            }
          }
        }
        if (double* gg = detail::grad_of(o, 1))
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gg[j] += o.grad[i * n + j] * xhat[i * n + j];
        if (double* gb = detail::grad_of(o, 2))
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gb[j] += o.grad[i * n + j];
      });
}

// Gathers rows of `table` (one per id) into a [ids x cols] matrix.
inline Tensor embedding(const Tensor& table, std::span<const std::size_t> ids) {
  detail::require_matrix(table, "embedding");
  const std::size_t n = table.cols(), vocab = table.rows();
  if (ids.empty()) throw ContractError("embedding: no ids");
  std::vector<double> out(ids.size() * n);
  auto tv = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= vocab)
      throw DimensionError("embedding: id " + std::to_string(ids[i]) + " outside table of " +
                           std::to_string(vocab) + " rows");
    std::copy_n(tv.data() + ids[i] * n, n, out.data() + i * n);
  }
  std::vector<std::size_t> rows(ids.begin(), ids.end());
  return detail::make_result({ids.size(), n}, std::move(out), {table},
                             [n, rows = std::move(rows)](detail::Node& o) {
                               if (double* g = detail::grad_of(o, 0))
                                 for (std::size_t i = 0; i < rows.size(); ++i)
                                   for (std::size_t j = 0; j < n; ++j)
                                     g[rows[i] * n + j] += o.grad[i * n + j];
                             });
}

// Stacks `b` under `a`; an undefined `a` yields `b` itself.
inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
  if (!a.defined()) return b;
  detail::require_matrix(a, "concat_rows");
  detail::require_matrix(b, "concat_rows");
  if (a.cols() != b.cols())
    throw DimensionError("concat_rows: " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
  const std::size_t na = a.size();
  std::vector<double> out;
  out.reserve(na + b.size());
  out.insert(out.end(), a.data().begin(), a.data().end());
  out.insert(out.end(), b.data().begin(), b.data().end());
  return detail::make_result({a.rows() + b.rows(), a.cols()}, std::move(out), {a, b},
                             [na](detail::Node& o) {
                               if (double* g = detail::grad_of(o, 0))
                                 for (std::size_t i = 0; i < na; ++i) g[i] += o.grad[i];
                               if (double* g = detail::grad_of(o, 1))
                                 for (std::size_t i = na; i < o.grad.size(); ++i)
                                   g[i - na] += o.grad[i];
                             });
}

// Columns [begin, end) of a matrix.
inline Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  detail::require_matrix(a, "slice_cols");
  const std::size_t m = a.rows(), n = a.cols();
  if (begin >= end || end > n)
    throw DimensionError("slice_cols: range [" + std::to_string(begin) + "," +
                         std::to_string(end) + ") outside " + shape_string(a.shape()));
  const std::size_t w = end - begin;
  std::vector<double> out(m * w);
  auto av = a.data();
  for (std::size_t i = 0; i < m; ++i) std::copy_n(av.data() + i * n + begin, w, out.data() + i * w);
  return detail::make_result({m, w}, std::move(out), {a}, [m, n, w, begin](detail::Node& o) {
    if (double* g = detail::grad_of(o, 0))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) g[i * n + begin + j] += o.grad[i * w + j];
  });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: nothing to concatenate");
  const std::size_t m = parts.front().rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::require_matrix(p, "concat_cols");
    if (p.rows() != m)
      throw DimensionError("concat_cols: row mismatch " + shape_string(parts.front().shape()) +
                           " vs " + shape_string(p.shape()));
    widths.push_back(p.cols());
    total += p.cols();
  }
  std::vector<double> out(m * total);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    auto pv = p.data();
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(pv.data() + i * p.cols(), p.cols(), out.data() + i * total + offset);
    offset += p.cols();
  }
  return detail::make_result({m, total}, std::move(out), parts,
                             [m, total, widths = std::move(widths)](detail::Node& o) {
                               std::size_t off = 0;
                               for (std::size_t s = 0; s < widths.size(); ++s) {
                                 if (double* g = detail::grad_of(o, s))
                                   for (std::size_t i = 0; i < m; ++i)
                                     for (std::size_t j = 0; j < widths[s]; ++j)
                                       g[i * widths[s] + j] += o.grad[i * total + off + j];
                                 off += widths[s];
                               }
                             });
}

// Picks entries of a single-row matrix by column index.
inline Tensor gather_cols(const Tensor& row, std::span<const std::size_t> cols) {
  detail::require_matrix(row, "gather_cols");
  if (row.rows() != 1) throw DimensionError("gather_cols: expected one row, got " + shape_string(row.shape()));
  if (cols.empty()) throw ContractError("gather_cols: no indices");
  std::vector<double> out(cols.size());
  for (std::size_t i = 0; i < cols.size(); ++i) {
    if (cols[i] >= row.cols())
      throw DimensionError("gather_cols: index " + std::to_string(cols[i]) + " outside " +
                           shape_string(row.shape()));
    out[i] = row.data()[cols[i]];
  }
  std::vector<std::size_t> idx(cols.begin(), cols.end());
  return detail::make_result({1, idx.size()}, std::move(out), {row}, [idx](detail::Node& o) {
    if (double* g = detail::grad_of(o, 0))
      for (std::size_t i = 0; i < idx.size(); ++i) g[idx[i]] += o.grad[i];
  });
}

inline Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  return detail::make_result({1}, {total}, {a}, [](detail::Node& o) {
    if (double* g = detail::grad_of(o, 0))
      for (std::size_t i = 0; i < o.inputs[0]->value.size(); ++i) g[i] += o.grad[0];
  });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

// sum_i a_i * weights_i with constant weights.
inline Tensor weighted_sum(const Tensor& a, std::span<const double> weights) {
  if (weights.size() != a.size())
    throw DimensionError("weighted_sum: " + std::to_string(weights.size()) +
                         " weights for tensor " + shape_string(a.shape()));
  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) total += a.data()[i] * weights[i];
  std::vector<double> w(weights.begin(), weights.end());
  return detail::make_result({1}, {total}, {a}, [w = std::move(w)](detail::Node& o) {
    if (double* g = detail::grad_of(o, 0))
      for (std::size_t i = 0; i < w.size(); ++i) g[i] += o.grad[0] * w[i];
  });
}

// Mean of -log_probs[r, targets[r]] over rows.
inline Tensor nll_mean(const Tensor& log_probs, std::span<const std::size_t> targets) {
  detail::require_matrix(log_probs, "nll_mean");
  const std::size_t m = log_probs.rows(), n = log_probs.cols();
  if (targets.size() != m)
    throw DimensionError("nll_mean: " + std::to_string(targets.size()) + " targets for " +
                         shape_string(log_probs.shape()));
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    if (targets[i] >= n) throw DimensionError("nll_mean: target id outside vocabulary");
    total -= log_probs.data()[i * n + targets[i]];
  }
  std::vector<std::size_t> t(targets.begin(), targets.end());
  return detail::make_result({1}, {total / static_cast<double>(m)}, {log_probs},
                             [m, n, t = std::move(t)](detail::Node& o) {
                               if (double* g = detail::grad_of(o, 0))
                                 for (std::size_t i = 0; i < m; ++i)
                                   g[i * n + t[i]] -= o.grad[0] / static_cast<double>(m);
                             });
}

// Maximum over coordinates of |analytic - central difference| /
// (|central difference| + 1e-12) for a scalar function of one tensor.
// `coordinates` restricts the check; empty means all of them.
// Error per coordinate is |a - n| / (|n| + floor). A floor well above
// 1e-12 keeps coordinates whose true gradient sits at the round-off level
// of the difference quotient from reporting arbitrary ratios.
inline double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                                double eps, std::span<const std::size_t> coordinates = {},
                                double floor = 1e-12) {
  Tensor probe = x.detach();
  probe.set_requires_grad(true);
  Tensor y = f(probe);
  if (!y.defined() || y.size() != 1) throw ContractError("finite_diff_check: f must return a scalar");
  if (!std::isfinite(y.item())) throw EvaluationError("finite_diff_check: f(x) is not finite");
  backward(y);
  std::vector<double> analytic(x.size(), 0.0);
  if (probe.has_grad()) std::copy(probe.grad().begin(), probe.grad().end(), analytic.begin());

  std::vector<std::size_t> all;
  if (coordinates.empty()) {
    all.resize(x.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    coordinates = all;
  }
  double worst = 0.0;
  Tensor shifted = x.detach();
  for (std::size_t c : coordinates) {
    if (c >= x.size()) throw ContractError("finite_diff_check: coordinate out of range");
    const double saved = shifted.data()[c];
    shifted.mutable_data()[c] = saved + eps;
    const double up = f(shifted).item();
    shifted.mutable_data()[c] = saved - eps;
    const double down = f(shifted).item();
    shifted.mutable_data()[c] = saved;
    if (!std::isfinite(up) || !std::isfinite(down))
      throw EvaluationError("finite_diff_check: f is not finite near coordinate " +
                            std::to_string(c));
    const double numeric = (up - down) / (2.0 * eps);
    worst = std::max(worst, std::abs(analytic[c] - numeric) / (std::abs(numeric) + floor));
  }
  return worst;
}

}  // namespace resetox
