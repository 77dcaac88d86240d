// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "fftmoe/error.hpp"

namespace fftmoe {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

namespace detail {

struct Node;
using BackwardFn = std::function<void(Node&)>;

// One recorded value. Leaves have no backward_fn; parameters are leaves with
// requires_grad set.
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward_fn;

  bool is_leaf() const { return !backward_fn; }
  // Gradient buffer of parent i, or nullptr when that parent is not differentiable.
  double* parent_grad(std::size_t i) {
    Node& p = *parents[i];
    return p.requires_grad ? p.grad.data() : nullptr;
  }
};

inline thread_local int no_grad_depth = 0;

}  // namespace detail

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

/// Dense row-major array of doubles with an optional gradient slot.
///
/// Tensor is a handle: copies share storage, as with parameters that the
/// optimizer updates in place. Use clone() for an independent copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    for (std::size_t d : shape) {
      if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
    }
    if (values.size() != shape_numel(shape)) {
      throw DimensionError("value count " + std::to_string(values.size()) + " does not match shape " +
                           shape_str(shape));
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    if (requires_grad) node->grad.assign(node->value.size(), 0.0);
    return Tensor(std::move(node));
  }

  static Tensor scalar(double v, bool requires_grad = false) { return from({}, {v}, requires_grad); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim() const { return node_->shape.size(); }
  std::size_t size(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const double> values() const { return node_->value; }
  std::span<double> values() { return node_->value; }
  double item() const {
    if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }
  double at(std::size_t i) const { return node_->value.at(i); }
  double at(std::size_t r, std::size_t c) const { return node_->value.at(r * node_->shape.at(1) + c); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) {
    node_->requires_grad = on;
    if (on && node_->grad.size() != node_->value.size()) node_->grad.assign(node_->value.size(), 0.0);
    if (!on) node_->grad.clear();
  }
  bool has_grad() const { return node_->requires_grad && node_->grad.size() == node_->value.size(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> grad() { return node_->grad; }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

  bool all_finite() const {
    auto finite = [](double v) { return std::isfinite(v); };
    return std::all_of(node_->value.begin(), node_->value.end(), finite) &&
           std::all_of(node_->grad.begin(), node_->grad.end(), finite);
  }

  // Independent leaf with the same values and requires_grad flag.
  Tensor clone() const { return from(shape(), node_->value, node_->requires_grad); }
  // Same values, cut from the graph, never differentiable.
  Tensor detach() const { return from(shape(), node_->value, false); }

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

  detail::Node& node() const { return *node_; }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  friend Tensor make_op(Shape, std::vector<double>, std::initializer_list<Tensor>, detail::BackwardFn);
  friend Tensor make_op(Shape, std::vector<double>, const std::vector<Tensor>&, detail::BackwardFn);

  std::shared_ptr<detail::Node> node_;
};

// Builds an op result; records the backward rule only when some input needs it.
inline Tensor make_op(Shape shape, std::vector<double> values, const std::vector<Tensor>& inputs,
                      detail::BackwardFn fn) {
  Tensor out = Tensor::from(std::move(shape), std::move(values), false);
  if (!grad_enabled()) return out;
  const bool needs = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (!needs) return out;
  detail::Node& n = out.node();
  n.requires_grad = true;
  for (const Tensor& t : inputs) n.parents.push_back(t.node_ptr());
  n.backward_fn = std::move(fn);
  return out;
}

inline Tensor make_op(Shape shape, std::vector<double> values, std::initializer_list<Tensor> inputs,
                      detail::BackwardFn fn) {
  return make_op(std::move(shape), std::move(values), std::vector<Tensor>(inputs), std::move(fn));
}

/// Reverse-mode replay over one recorded graph.
///
/// Construction walks the graph from the root and fixes a topological order;
/// backward() visits it in reverse so every backward rule fires exactly once.
/// Intermediate gradients are cleared on each replay; leaf gradients accumulate.
class Tape {
 public:
  explicit Tape(const Tensor& root) : root_(root.node_ptr()) {
    std::unordered_set<const detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(root_.get(), 0);
    seen.insert(root_.get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        detail::Node* p = node->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order_.push_back(node);
        stack.pop_back();
      }
    }
  }

  std::size_t size() const { return order_.size(); }

  void backward() {
    for (detail::Node* n : order_) {
      if (!n->is_leaf()) n->grad.assign(n->value.size(), 0.0);
      else if (n->grad.size() != n->value.size()) n->grad.assign(n->value.size(), 0.0);
    }
    root_->grad[0] += 1.0;
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      if (!(*it)->is_leaf()) (*it)->backward_fn(**it);
    }
  }

 private:
  std::shared_ptr<detail::Node> root_;
  std::vector<detail::Node*> order_;
};

inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw UsageError("backward expects a scalar loss, got shape " + (loss.defined() ? shape_str(loss.shape()) : "<undefined>"));
  }
  if (!loss.requires_grad()) throw UsageError("backward on a loss that does not depend on any parameter");
  Tape(loss).backward();
}

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

inline void require_2d(const Tensor& t, const char* op) {
  if (t.dim() != 2) throw DimensionError(std::string(op) + " expects a 2-D tensor, got " + shape_str(t.shape()));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

inline CMapMat cmap(const std::vector<double>& v, std::size_t r, std::size_t c) {
  return CMapMat(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
inline MapMat map(double* p, std::size_t r, std::size_t c) {
  return MapMat(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_2d(a, "matmul");
  detail::require_2d(b, "matmul");
  const std::size_t m = a.size(0), k = a.size(1), n = b.size(1);
  if (b.size(0) != k) {
    throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<double> out(m * n);
  detail::map(out.data(), m, n).noalias() = detail::cmap(a.node().value, m, k) * detail::cmap(b.node().value, k, n);
  return make_op({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
    auto dc = detail::cmap(self.grad, m, n);
    if (double* ga = self.parent_grad(0)) {
      detail::map(ga, m, k).noalias() += dc * detail::cmap(self.parents[1]->value, k, n).transpose();
    }
    if (double* gb = self.parent_grad(1)) {
      detail::map(gb, k, n).noalias() += detail::cmap(self.parents[0]->value, m, k).transpose() * dc;
    }
  });
}

// x [n x in] times weight [out x in] transposed: the row-batched form of W x.
inline Tensor linear(const Tensor& x, const Tensor& weight) {
  detail::require_2d(x, "linear");
  detail::require_2d(weight, "linear");
  const std::size_t n = x.size(0), in = x.size(1), out_dim = weight.size(0);
  if (weight.size(1) != in) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(weight.shape()));
  }
  std::vector<double> out(n * out_dim);
  detail::map(out.data(), n, out_dim).noalias() =
      detail::cmap(x.node().value, n, in) * detail::cmap(weight.node().value, out_dim, in).transpose();
  return make_op({n, out_dim}, std::move(out), {x, weight}, [n, in, out_dim](detail::Node& self) {
    auto dy = detail::cmap(self.grad, n, out_dim);
    if (double* gx = self.parent_grad(0)) {
      detail::map(gx, n, in).noalias() += dy * detail::cmap(self.parents[1]->value, out_dim, in);
    }
    if (double* gw = self.parent_grad(1)) {
      detail::map(gw, out_dim, in).noalias() += dy.transpose() * detail::cmap(self.parents[0]->value, n, in);
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.node().value[i] + b.node().value[i];
  return make_op(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (double* g = self.parent_grad(p)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.node().value[i] - b.node().value[i];
  return make_op(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    if (double* g = self.parent_grad(0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (double* g = self.parent_grad(1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.node().value[i] * b.node().value[i];
  return make_op(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (double* g = self.parent_grad(0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (double* g = self.parent_grad(1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.node().value[i] * factor;
  return make_op(a.shape(), std::move(out), {a}, [factor](detail::Node& self) {
    if (double* g = self.parent_grad(0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * factor;
    }
  });
}

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return make_op({}, {s}, {a}, [](detail::Node& self) {
    if (double* g = self.parent_grad(0)) {
      const std::size_t n = self.parents[0]->value.size();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
    }
  });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  return make_op(std::move(shape), a.node().value, {a}, [](detail::Node& self) {
    if (double* g = self.parent_grad(0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

// Exact GELU, x * Phi(x).
inline Tensor gelu(const Tensor& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = a.node().value[i];
    out[i] = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
  }
  return make_op(a.shape(), std::move(out), {a}, [](detail::Node& self) {
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    if (double* g = self.parent_grad(0)) {
      const auto& xv = self.parents[0]->value;
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const double x = xv[i];
        const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
        g[i] += self.grad[i] * (cdf + x * pdf);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Row-wise reductions and normalizations (last axis of a 2-D tensor; 1-D
// tensors are treated as a single row)
// ---------------------------------------------------------------------------

namespace detail {

inline std::pair<std::size_t, std::size_t> rows_cols(const Tensor& t, const char* op) {
  if (t.dim() == 1) return {1, t.size(0)};
  if (t.dim() == 2) return {t.size(0), t.size(1)};
  throw DimensionError(std::string(op) + " expects a 1-D or 2-D tensor, got " + shape_str(t.shape()));
}

inline void softmax_row(const double* in, double* out, std::size_t n) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, in[j]);
  double z = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    out[j] = std::exp(in[j] - mx);
    z += out[j];
  }
  for (std::size_t j = 0; j < n; ++j) out[j] /= z;
}

}  // namespace detail

// Max-shifted softmax over the last axis.
inline Tensor softmax(const Tensor& x) {
  auto [rows, cols] = detail::rows_cols(x, "softmax");
  if (!x.all_finite()) throw InputError("softmax: non-finite input");
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) detail::softmax_row(&x.node().value[r * cols], &out[r * cols], cols);
  return make_op(x.shape(), std::move(out), {x}, [rows, cols](detail::Node& self) {
    double* g = self.parent_grad(0);
    if (!g) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* p = &self.value[r * cols];
      const double* dy = &self.grad[r * cols];
      double dot = 0.0;
      for (std::size_t j = 0; j < cols; ++j) dot += p[j] * dy[j];
      for (std::size_t j = 0; j < cols; ++j) g[r * cols + j] += p[j] * (dy[j] - dot);
    }
  });
}

// Softmax restricted to entries with mask != 0; masked entries are exactly 0
// in the output and receive no gradient.
inline Tensor masked_softmax(const Tensor& x, std::vector<std::uint8_t> mask) {
  auto [rows, cols] = detail::rows_cols(x, "masked_softmax");
  if (mask.size() != x.numel()) throw DimensionError("masked_softmax: mask size does not match " + shape_str(x.shape()));
  std::vector<double> out(x.numel(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = &x.node().value[r * cols];
    const std::uint8_t* mk = &mask[r * cols];
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < cols; ++j) {
      if (mk[j]) mx = std::max(mx, in[j]);
    }
    if (!std::isfinite(mx)) throw InputError("masked_softmax: row " + std::to_string(r) + " has no selected entry");
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      if (mk[j]) {
        out[r * cols + j] = std::exp(in[j] - mx);
        z += out[r * cols + j];
      }
    }
    for (std::size_t j = 0; j < cols; ++j) out[r * cols + j] /= z;
  }
  return make_op(x.shape(), std::move(out), {x}, [rows, cols, mask = std::move(mask)](detail::Node& self) {
    double* g = self.parent_grad(0);
    if (!g) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* p = &self.value[r * cols];
      const double* dy = &self.grad[r * cols];
      double dot = 0.0;
      for (std::size_t j = 0; j < cols; ++j) dot += p[j] * dy[j];
      for (std::size_t j = 0; j < cols; ++j) {
        if (mask[r * cols + j]) g[r * cols + j] += p[j] * (dy[j] - dot);
      }
    }
  });
}

// Mean negative log-likelihood of the true class.
inline Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  detail::require_2d(logits, "cross_entropy");
  const std::size_t b = logits.size(0), c = logits.size(1);
  if (labels.size() != b) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(b) + " rows");
  }
  std::vector<double> probs(b * c);
  double loss = 0.0;
  for (std::size_t r = 0; r < b; ++r) {
    if (labels[r] >= c) {
      throw InputError("cross_entropy: label " + std::to_string(labels[r]) + " outside [0, " + std::to_string(c) + ")");
    }
    const double* row = &logits.node().value[r * c];
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const double log_z = mx + std::log(z);
    loss -= row[labels[r]] - log_z;
    for (std::size_t j = 0; j < c; ++j) probs[r * c + j] = std::exp(row[j] - log_z);
  }
  loss /= static_cast<double>(b);
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  return make_op({}, {loss}, {logits},
                 [b, c, probs = std::move(probs), lab = std::move(lab)](detail::Node& self) {
                   double* g = self.parent_grad(0);
                   if (!g) return;
                   const double s = self.grad[0] / static_cast<double>(b);
                   for (std::size_t r = 0; r < b; ++r) {
                     for (std::size_t j = 0; j < c; ++j) {
                       g[r * c + j] += s * (probs[r * c + j] - (j == lab[r] ? 1.0 : 0.0));
                     }
                   }
                 });
}

// Affine-free layer normalization of each row.
inline Tensor layer_norm(const Tensor& x, double eps = 1e-5) {
  detail::require_2d(x, "layer_norm");
  const std::size_t n = x.size(0), d = x.size(1);
  std::vector<double> out(x.numel());
  std::vector<double> inv_std(n);
  for (std::size_t r = 0; r < n; ++r) {
    const double* in = &x.node().value[r * d];
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += in[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = (in[j] - mu) * inv_std[r];
  }
  return make_op(x.shape(), std::move(out), {x}, [n, d, inv_std = std::move(inv_std)](detail::Node& self) {
    double* g = self.parent_grad(0);
    if (!g) return;
    for (std::size_t r = 0; r < n; ++r) {
      const double* y = &self.value[r * d];
      const double* dy = &self.grad[r * d];
      double mean_dy = 0.0, mean_dy_y = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        mean_dy += dy[j];
        mean_dy_y += dy[j] * y[j];
      }
      mean_dy /= static_cast<double>(d);
      mean_dy_y /= static_cast<double>(d);
      for (std::size_t j = 0; j < d; ++j) g[r * d + j] += inv_std[r] * (dy[j] - mean_dy - y[j] * mean_dy_y);
    }
  });
}

// Column means of an [n x m] tensor, giving a length-m vector.
inline Tensor mean_rows(const Tensor& x) {
  detail::require_2d(x, "mean_rows");
  const std::size_t n = x.size(0), m = x.size(1);
  std::vector<double> out(m, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < m; ++j) out[j] += x.node().value[r * m + j];
  }
  for (double& v : out) v /= static_cast<double>(n);
  return make_op({m}, std::move(out), {x}, [n, m](detail::Node& self) {
    double* g = self.parent_grad(0);
    if (!g) return;
    const double inv = 1.0 / static_cast<double>(n);
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t j = 0; j < m; ++j) g[r * m + j] += self.grad[j] * inv;
    }
  });
}

// Averages consecutive groups of `group` rows: [g*group x d] -> [g x d].
inline Tensor mean_pool(const Tensor& x, std::size_t group) {
  detail::require_2d(x, "mean_pool");
  const std::size_t n = x.size(0), d = x.size(1);
  if (group == 0 || n % group != 0) {
    throw DimensionError("mean_pool: " + std::to_string(n) + " rows not divisible into groups of " + std::to_string(group));
  }
  const std::size_t groups = n / group;
  std::vector<double> out(groups * d, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < d; ++j) out[(r / group) * d + j] += x.node().value[r * d + j];
  }
  for (double& v : out) v /= static_cast<double>(group);
  return make_op({groups, d}, std::move(out), {x}, [n, d, group](detail::Node& self) {
    double* g = self.parent_grad(0);
    if (!g) return;
    const double inv = 1.0 / static_cast<double>(group);
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t j = 0; j < d; ++j) g[r * d + j] += self.grad[(r / group) * d + j] * inv;
    }
  });
}

// ---------------------------------------------------------------------------
// Sparse dispatch helpers used by expert routing
// ---------------------------------------------------------------------------

inline Tensor gather_rows(const Tensor& x, std::vector<std::size_t> rows) {
  detail::require_2d(x, "gather_rows");
  const std::size_t d = x.size(1);
  if (rows.empty()) throw DimensionError("gather_rows: empty row set");
  std::vector<double> out(rows.size() * d);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= x.size(0)) throw DimensionError("gather_rows: row index out of range");
    std::copy_n(&x.node().value[rows[i] * d], d, &out[i * d]);
  }
  const std::size_t k = rows.size();
  return make_op({k, d}, std::move(out), {x}, [d, rows = std::move(rows)](detail::Node& self) {
    double* g = self.parent_grad(0);
    if (!g) return;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      for (std::size_t j = 0; j < d; ++j) g[rows[i] * d + j] += self.grad[i * d + j];
    }
  });
}

// base + src scattered into the listed rows.
inline Tensor index_add_rows(const Tensor& base, const Tensor& src, std::vector<std::size_t> rows) {
  detail::require_2d(base, "index_add_rows");
  detail::require_2d(src, "index_add_rows");
  const std::size_t d = base.size(1);
  if (src.size(1) != d || src.size(0) != rows.size()) {
    throw DimensionError("index_add_rows: source " + shape_str(src.shape()) + " does not fit " +
                         std::to_string(rows.size()) + " rows of " + shape_str(base.shape()));
  }
  std::vector<double> out = base.node().value;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < d; ++j) out[rows[i] * d + j] += src.node().value[i * d + j];
  }
  return make_op(base.shape(), std::move(out), {base, src}, [d, rows = std::move(rows)](detail::Node& self) {
    if (double* g = self.parent_grad(0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (double* g = self.parent_grad(1)) {
      for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t j = 0; j < d; ++j) g[i * d + j] += self.grad[rows[i] * d + j];
      }
    }
  });
}

// Entries x[rows[i], col] as a vector.
inline Tensor take_column(const Tensor& x, std::vector<std::size_t> rows, std::size_t col) {
  detail::require_2d(x, "take_column");
  const std::size_t m = x.size(1);
  if (col >= m) throw DimensionError("take_column: column out of range");
  std::vector<double> out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) out[i] = x.node().value[rows[i] * m + col];
  const std::size_t k = rows.size();
  return make_op({k}, std::move(out), {x}, [m, col, rows = std::move(rows)](detail::Node& self) {
    double* g = self.parent_grad(0);
    if (!g) return;
    for (std::size_t i = 0; i < rows.size(); ++i) g[rows[i] * m + col] += self.grad[i];
  });
}

// Row i of x multiplied by s[i].
inline Tensor scale_rows(const Tensor& x, const Tensor& s) {
  detail::require_2d(x, "scale_rows");
  const std::size_t n = x.size(0), d = x.size(1);
  if (s.numel() != n) throw DimensionError("scale_rows: " + std::to_string(s.numel()) + " scales for " + std::to_string(n) + " rows");
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = x.node().value[r * d + j] * s.node().value[r];
  }
  return make_op(x.shape(), std::move(out), {x, s}, [n, d](detail::Node& self) {
    const auto& xv = self.parents[0]->value;
    const auto& sv = self.parents[1]->value;
    double* gx = self.parent_grad(0);
    double* gs = self.parent_grad(1);
    for (std::size_t r = 0; r < n; ++r) {
      double acc = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        if (gx) gx[r * d + j] += self.grad[r * d + j] * sv[r];
        acc += self.grad[r * d + j] * xv[r * d + j];
      }
      if (gs) gs[r] += acc;
    }
  });
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

/// Scaled dot-product self-attention over `heads` heads for a batch of
/// sequences laid out as [batch*seq x d] rows. No masking.
inline Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t seq,
                                   std::size_t heads) {
  detail::require_2d(q, "multi_head_attention");
  detail::require_same_shape(q, k, "multi_head_attention");
  detail::require_same_shape(q, v, "multi_head_attention");
  const std::size_t rows = q.size(0), d = q.size(1);
  if (heads == 0 || d % heads != 0) throw DimensionError("multi_head_attention: width not divisible by heads");
  if (seq == 0 || rows % seq != 0) throw DimensionError("multi_head_attention: rows not divisible by seq");
  const std::size_t batch = rows / seq, dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  // probs[(b*heads + h)*seq*seq + i*seq + j]
  std::vector<double> probs(batch * heads * seq * seq);
  std::vector<double> out(rows * d, 0.0);
  const auto& qv = q.node().value;
  const auto& kv = k.node().value;
  const auto& vv = v.node().value;
  std::vector<double> scores(seq);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      double* p = &probs[(b * heads + h) * seq * seq];
      for (std::size_t i = 0; i < seq; ++i) {
        const double* qi = &qv[(b * seq + i) * d + h * dh];
        for (std::size_t j = 0; j < seq; ++j) {
          const double* kj = &kv[(b * seq + j) * d + h * dh];
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          scores[j] = s * inv_sqrt;
        }
        detail::softmax_row(scores.data(), &p[i * seq], seq);
        double* oi = &out[(b * seq + i) * d + h * dh];
        for (std::size_t j = 0; j < seq; ++j) {
          const double* vj = &vv[(b * seq + j) * d + h * dh];
          const double w = p[i * seq + j];
          for (std::size_t c = 0; c < dh; ++c) oi[c] += w * vj[c];
        }
      }
    }
  }
  return make_op(q.shape(), std::move(out), {q, k, v},
                 [batch, seq, heads, d, dh, inv_sqrt, probs = std::move(probs)](detail::Node& self) {
                   const auto& qv = self.parents[0]->value;
                   const auto& kv = self.parents[1]->value;
                   const auto& vv = self.parents[2]->value;
                   double* gq = self.parent_grad(0);
                   double* gk = self.parent_grad(1);
                   double* gv = self.parent_grad(2);
                   std::vector<double> dp(seq), ds(seq);
                   for (std::size_t b = 0; b < batch; ++b) {
                     for (std::size_t h = 0; h < heads; ++h) {
                       const double* p = &probs[(b * heads + h) * seq * seq];
                       for (std::size_t i = 0; i < seq; ++i) {
                         const double* doi = &self.grad[(b * seq + i) * d + h * dh];
                         double dot = 0.0;
                         for (std::size_t j = 0; j < seq; ++j) {
                           const double* vj = &vv[(b * seq + j) * d + h * dh];
                           double s = 0.0;
                           for (std::size_t c = 0; c < dh; ++c) s += doi[c] * vj[c];
                           dp[j] = s;
                           dot += s * p[i * seq + j];
                           if (gv) {
                             double* gvj = &gv[(b * seq + j) * d + h * dh];
                             for (std::size_t c = 0; c < dh; ++c) gvj[c] += p[i * seq + j] * doi[c];
                           }
                         }
                         for (std::size_t j = 0; j < seq; ++j) ds[j] = p[i * seq + j] * (dp[j] - dot) * inv_sqrt;
                         const double* qi = &qv[(b * seq + i) * d + h * dh];
                         for (std::size_t j = 0; j < seq; ++j) {
                           const double* kj = &kv[(b * seq + j) * d + h * dh];
                           if (gq) {
                             double* gqi = &gq[(b * seq + i) * d + h * dh];
                             for (std::size_t c = 0; c < dh; ++c) gqi[c] += ds[j] * kj[c];
                           }
                           if (gk) {
                             double* gkj = &gk[(b * seq + j) * d + h * dh];
                             for (std::size_t c = 0; c < dh; ++c) gkj[c] += ds[j] * qi[c];
                           }
                         }
                       }
                     }
                   }
                 });
}

}  // namespace fftmoe
