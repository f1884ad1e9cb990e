#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "sipnet/tensor.hpp"

namespace sipnet {

namespace detail {

// One record of the computation graph: a value, its gradient (allocated on
// demand during the backward pass), and provenance (op tag + input records).
// Inputs are only recorded when the result requires a gradient, so constant
// subgraphs cost nothing beyond the forward value.
template <typename S>
struct AdNode {
  Tensor<S> value;
  Tensor<S> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<AdNode>> inputs;
  std::function<void(AdNode&)> backprop;

  S* grad_data() {
    if (grad.size() == 0) grad = Tensor<S>::zeros(value.shape());
    return grad.mutable_data();
  }
};

// C[m x n] += A[m x k] * B[k x n]
template <typename S>
void mm_nn_acc(S* c, const S* a, const S* b, std::int64_t m, std::int64_t k, std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    S* crow = c + i * n;
    const S* arow = a + i * k;
    for (std::int64_t p = 0; p < k; ++p) {
      const S av = arow[p];
      const S* brow = b + p * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x k] += A[m x n] * B^T, with B stored [k x n]
template <typename S>
void mm_nt_acc(S* c, const S* a, const S* b, std::int64_t m, std::int64_t n, std::int64_t k) {
  for (std::int64_t i = 0; i < m; ++i) {
    const S* arow = a + i * n;
    S* crow = c + i * k;
    for (std::int64_t p = 0; p < k; ++p) {
      const S* brow = b + p * n;
      S acc = S(0);
      for (std::int64_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
      crow[p] += acc;
    }
  }
}

// C[k x n] += A^T * B, with A stored [m x k], B stored [m x n]
template <typename S>
void mm_tn_acc(S* c, const S* a, const S* b, std::int64_t m, std::int64_t k, std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    const S* arow = a + i * k;
    const S* brow = b + i * n;
    for (std::int64_t p = 0; p < k; ++p) {
      const S av = arow[p];
      S* crow = c + p * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

struct AxisSplit {
  std::int64_t outer = 1, axis = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& shape, int axis) {
  if (axis < 0 || axis >= static_cast<int>(shape.size())) {
    throw ShapeError("axis " + std::to_string(axis) + " invalid for shape " + shape_str(shape));
  }
  AxisSplit s;
  for (int i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
  s.axis = shape[static_cast<std::size_t>(axis)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace detail

// Handle to a node of the reverse-mode autodiff graph.
template <typename S>
class Value {
 public:
  using Node = detail::AdNode<S>;

  Value() = default;

  static Value constant(Tensor<S> t) {
    Value v;
    v.node_ = std::make_shared<Node>();
    v.node_->value = std::move(t);
    v.node_->requires_grad = false;
    return v;
  }

  static Value param(Tensor<S> t) {
    Value v;
    v.node_ = std::make_shared<Node>();
    v.node_->value = std::move(t);
    v.node_->requires_grad = true;
    return v;
  }

  bool defined() const { return node_ != nullptr; }
  const Tensor<S>& val() const { return node_->value; }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  // Gradient accumulated by the last backward() pass that reached this node.
  // Zero tensor if the node was never reached.
  Tensor<S> grad() const {
    if (node_->grad.size() == 0) return Tensor<S>::zeros(node_->value.shape());
    return node_->grad;
  }

  const std::shared_ptr<Node>& node() const { return node_; }

  static Value from_node(std::shared_ptr<Node> n) {
    Value v;
    v.node_ = std::move(n);
    return v;
  }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

template <typename S, typename... Ins>
std::shared_ptr<AdNode<S>> make_node(const char* op, Tensor<S> value, const Ins&... ins) {
  auto n = std::make_shared<AdNode<S>>();
  n->value = std::move(value);
  n->op = op;
  const bool needs = (ins.requires_grad() || ...);
  if (needs) {
    n->requires_grad = true;
    (n->inputs.push_back(ins.node()), ...);
  }
  return n;
}

template <typename S>
void axpy(S* dst, const S* src, std::int64_t n, S a = S(1)) {
  for (std::int64_t i = 0; i < n; ++i) dst[i] += a * src[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and linear-algebra ops
// ---------------------------------------------------------------------------

template <typename S>
Value<S> add(const Value<S>& a, const Value<S>& b) {
  if (!a.val().same_shape(b.val())) {
    throw ShapeError("add: shape mismatch " + shape_str(a.val().shape()) + " vs " +
                     shape_str(b.val().shape()));
  }
  const std::int64_t n = a.val().size();
  Tensor<S> out(a.val().shape());
  S* o = out.mutable_data();
  const S* pa = a.val().data();
  const S* pb = b.val().data();
  for (std::int64_t i = 0; i < n; ++i) o[i] = pa[i] + pb[i];
  auto node = detail::make_node("add", std::move(out), a, b);
  if (node->requires_grad) {
    node->backprop = [n](detail::AdNode<S>& self) {
      const S* g = self.grad.data();
      for (auto& in : self.inputs) {
        if (in->requires_grad) detail::axpy(in->grad_data(), g, n);
      }
    };
  }
  return Value<S>::from_node(node);
}

template <typename S>
Value<S> multiply(const Value<S>& a, const Value<S>& b) {
  if (!a.val().same_shape(b.val())) {
    throw ShapeError("multiply: shape mismatch " + shape_str(a.val().shape()) + " vs " +
                     shape_str(b.val().shape()));
  }
  const std::int64_t n = a.val().size();
  Tensor<S> out(a.val().shape());
  S* o = out.mutable_data();
  const S* pa = a.val().data();
  const S* pb = b.val().data();
  for (std::int64_t i = 0; i < n; ++i) o[i] = pa[i] * pb[i];
  auto node = detail::make_node("multiply", std::move(out), a, b);
  if (node->requires_grad) {
    node->backprop = [n](detail::AdNode<S>& self) {
      const S* g = self.grad.data();
      auto& ia = *self.inputs[0];
      auto& ib = *self.inputs[1];
      if (ia.requires_grad) {
        S* ga = ia.grad_data();
        const S* vb = ib.value.data();
        for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i] * vb[i];
      }
      if (ib.requires_grad) {
        S* gb = ib.grad_data();
        const S* va = ia.value.data();
        for (std::int64_t i = 0; i < n; ++i) gb[i] += g[i] * va[i];
      }
    };
  }
  return Value<S>::from_node(node);
}

template <typename S>
Value<S> scale(const Value<S>& x, double c) {
  const std::int64_t n = x.val().size();
  Tensor<S> out(x.val().shape());
  S* o = out.mutable_data();
  const S* p = x.val().data();
  const S sc = static_cast<S>(c);
  for (std::int64_t i = 0; i < n; ++i) o[i] = p[i] * sc;
  auto node = detail::make_node("scale", std::move(out), x);
  if (node->requires_grad) {
    node->backprop = [n, sc](detail::AdNode<S>& self) {
      detail::axpy(self.inputs[0]->grad_data(), self.grad.data(), n, sc);
    };
  }
  return Value<S>::from_node(node);
}

// x [r x c] plus a length-c row vector broadcast over rows.
template <typename S>
Value<S> add_rows(const Value<S>& x, const Value<S>& b) {
  if (x.val().rank() != 2 || b.val().rank() != 1 || x.val().dim(1) != b.val().dim(0)) {
    throw ShapeError("add_rows: incompatible shapes " + shape_str(x.val().shape()) + " and " +
                     shape_str(b.val().shape()));
  }
  const std::int64_t r = x.val().dim(0), c = x.val().dim(1);
  Tensor<S> out(x.val().shape());
  S* o = out.mutable_data();
  const S* px = x.val().data();
  const S* pb = b.val().data();
  for (std::int64_t i = 0; i < r; ++i) {
    for (std::int64_t j = 0; j < c; ++j) o[i * c + j] = px[i * c + j] + pb[j];
  }
  auto node = detail::make_node("add_rows", std::move(out), x, b);
  if (node->requires_grad) {
    node->backprop = [r, c](detail::AdNode<S>& self) {
      const S* g = self.grad.data();
      auto& ix = *self.inputs[0];
      auto& ib = *self.inputs[1];
      if (ix.requires_grad) detail::axpy(ix.grad_data(), g, r * c);
      if (ib.requires_grad) {
        S* gb = ib.grad_data();
        for (std::int64_t i = 0; i < r; ++i) {
          for (std::int64_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
        }
      }
    };
  }
  return Value<S>::from_node(node);
}

template <typename S>
Value<S> matmul(const Value<S>& a, const Value<S>& b) {
  if (a.val().rank() != 2 || b.val().rank() != 2 || a.val().dim(1) != b.val().dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.val().shape()) + " and " +
                     shape_str(b.val().shape()));
  }
  const std::int64_t m = a.val().dim(0), k = a.val().dim(1), n = b.val().dim(1);
  Tensor<S> out({m, n});
  detail::mm_nn_acc(out.mutable_data(), a.val().data(), b.val().data(), m, k, n);
  auto node = detail::make_node("matmul", std::move(out), a, b);
  if (node->requires_grad) {
    node->backprop = [m, k, n](detail::AdNode<S>& self) {
      const S* g = self.grad.data();
      auto& ia = *self.inputs[0];
      auto& ib = *self.inputs[1];
      if (ia.requires_grad) detail::mm_nt_acc(ia.grad_data(), g, ib.value.data(), m, n, k);
      if (ib.requires_grad) detail::mm_tn_acc(ib.grad_data(), ia.value.data(), g, m, k, n);
    };
  }
  return Value<S>::from_node(node);
}

// a [m x n] * b^T with b stored [k x n]; result [m x k].
template <typename S>
Value<S> matmul_nt(const Value<S>& a, const Value<S>& b) {
  if (a.val().rank() != 2 || b.val().rank() != 2 || a.val().dim(1) != b.val().dim(1)) {
    throw ShapeError("matmul_nt: incompatible shapes " + shape_str(a.val().shape()) + " and " +
                     shape_str(b.val().shape()));
  }
  const std::int64_t m = a.val().dim(0), n = a.val().dim(1), k = b.val().dim(0);
  Tensor<S> out({m, k});
  detail::mm_nt_acc(out.mutable_data(), a.val().data(), b.val().data(), m, n, k);
  auto node = detail::make_node("matmul_nt", std::move(out), a, b);
  if (node->requires_grad) {
    node->backprop = [m, n, k](detail::AdNode<S>& self) {
      const S* g = self.grad.data();  // [m x k]
      auto& ia = *self.inputs[0];
      auto& ib = *self.inputs[1];
      if (ia.requires_grad) detail::mm_nn_acc(ia.grad_data(), g, ib.value.data(), m, k, n);
      if (ib.requires_grad) detail::mm_tn_acc(ib.grad_data(), g, ia.value.data(), m, k, n);
    };
  }
  return Value<S>::from_node(node);
}

template <typename S>
Value<S> transpose2d(const Value<S>& x) {
  if (x.val().rank() != 2) throw ShapeError("transpose2d expects rank-2 input");
  const std::int64_t r = x.val().dim(0), c = x.val().dim(1);
  Tensor<S> out({c, r});
  S* o = out.mutable_data();
  const S* p = x.val().data();
  for (std::int64_t i = 0; i < r; ++i) {
    for (std::int64_t j = 0; j < c; ++j) o[j * r + i] = p[i * c + j];
  }
  auto node = detail::make_node("transpose2d", std::move(out), x);
  if (node->requires_grad) {
    node->backprop = [r, c](detail::AdNode<S>& self) {
      const S* g = self.grad.data();  // [c x r]
      S* gx = self.inputs[0]->grad_data();
      for (std::int64_t i = 0; i < r; ++i) {
        for (std::int64_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
      }
    };
  }
  return Value<S>::from_node(node);
}

template <typename S>
Value<S> reshape(const Value<S>& x, Shape shape) {
  Tensor<S> out = x.val().reshaped(std::move(shape));
  auto node = detail::make_node("reshape", std::move(out), x);
  if (node->requires_grad) {
    node->backprop = [](detail::AdNode<S>& self) {
      detail::axpy(self.inputs[0]->grad_data(), self.grad.data(), self.value.size());
    };
  }
  return Value<S>::from_node(node);
}

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

template <typename S>
Value<S> softmax(const Value<S>& x, int axis) {
  const auto sp = detail::split_axis(x.val().shape(), axis);
  Tensor<S> out(x.val().shape());
  S* o = out.mutable_data();
  const S* p = x.val().data();
  for (std::int64_t a = 0; a < sp.outer; ++a) {
    for (std::int64_t i = 0; i < sp.inner; ++i) {
      const auto at = [&](std::int64_t j) { return (a * sp.axis + j) * sp.inner + i; };
      S mx = p[at(0)];
      for (std::int64_t j = 1; j < sp.axis; ++j) mx = std::max(mx, p[at(j)]);
      double denom = 0.0;
      for (std::int64_t j = 0; j < sp.axis; ++j) {
        const double e = std::exp(static_cast<double>(p[at(j)] - mx));
        o[at(j)] = static_cast<S>(e);
        denom += e;
      }
      const double inv = 1.0 / denom;
      for (std::int64_t j = 0; j < sp.axis; ++j) o[at(j)] = static_cast<S>(o[at(j)] * inv);
    }
  }
  auto node = detail::make_node("softmax", std::move(out), x);
  if (node->requires_grad) {
    node->backprop = [sp](detail::AdNode<S>& self) {
      const S* g = self.grad.data();
      const S* y = self.value.data();
      S* gx = self.inputs[0]->grad_data();
      for (std::int64_t a = 0; a < sp.outer; ++a) {
        for (std::int64_t i = 0; i < sp.inner; ++i) {
          const auto at = [&](std::int64_t j) { return (a * sp.axis + j) * sp.inner + i; };
          S dot = S(0);
          for (std::int64_t j = 0; j < sp.axis; ++j) dot += g[at(j)] * y[at(j)];
          for (std::int64_t j = 0; j < sp.axis; ++j) {
            gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
          }
        }
      }
    };
  }
  return Value<S>::from_node(node);
}

// Normalization over the last axis: zero mean, unit variance, then affine.
template <typename S>
Value<S> layer_norm(const Value<S>& x, const Value<S>& gain, const Value<S>& bias, double eps) {
  const int last = x.val().rank() - 1;
  if (last < 0) throw ShapeError("layer_norm expects rank >= 1");
  const std::int64_t c = x.val().dim(last);
  if (gain.val().rank() != 1 || gain.val().dim(0) != c || bias.val().rank() != 1 ||
      bias.val().dim(0) != c) {
    throw ShapeError("layer_norm: gain/bias must be rank-1 of size " + std::to_string(c));
  }
  const std::int64_t rows = x.val().size() / c;
  Tensor<S> out(x.val().shape());
  Tensor<S> xhat(x.val().shape());
  Tensor<S> inv_std({rows});
  S* o = out.mutable_data();
  S* xh = xhat.mutable_data();
  S* is = inv_std.mutable_data();
  const S* p = x.val().data();
  const S* pg = gain.val().data();
  const S* pb = bias.val().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const S* row = p + r * c;
    double mu = 0.0;
    for (std::int64_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::int64_t j = 0; j < c; ++j) {
      const double d = row[j] - mu;
      var += d * d;
    }
    var /= static_cast<double>(c);
    const double inv = 1.0 / std::sqrt(var + eps);
    is[r] = static_cast<S>(inv);
    for (std::int64_t j = 0; j < c; ++j) {
      const S h = static_cast<S>((row[j] - mu) * inv);
      xh[r * c + j] = h;
      o[r * c + j] = pg[j] * h + pb[j];
    }
  }
  auto node = detail::make_node("layer_norm", std::move(out), x, gain, bias);
  if (node->requires_grad) {
    node->backprop = [rows, c, xhat, inv_std](detail::AdNode<S>& self) {
      const S* g = self.grad.data();
      const S* xh = xhat.data();
      const S* is = inv_std.data();
      auto& ix = *self.inputs[0];
      auto& igain = *self.inputs[1];
      auto& ibias = *self.inputs[2];
      const S* pg = igain.value.data();
      if (ix.requires_grad) {
        S* gx = ix.grad_data();
        for (std::int64_t r = 0; r < rows; ++r) {
          double mg = 0.0, mgx = 0.0;
          for (std::int64_t j = 0; j < c; ++j) {
            const double gh = static_cast<double>(g[r * c + j]) * pg[j];
            mg += gh;
            mgx += gh * xh[r * c + j];
          }
          mg /= static_cast<double>(c);
          mgx /= static_cast<double>(c);
          for (std::int64_t j = 0; j < c; ++j) {
            const double gh = static_cast<double>(g[r * c + j]) * pg[j];
            gx[r * c + j] += static_cast<S>(is[r] * (gh - mg - xh[r * c + j] * mgx));
          }
        }
      }
      if (igain.requires_grad) {
        S* gg = igain.grad_data();
        for (std::int64_t r = 0; r < rows; ++r) {
          for (std::int64_t j = 0; j < c; ++j) gg[j] += g[r * c + j] * xh[r * c + j];
        }
      }
      if (ibias.requires_grad) {
        S* gb = ibias.grad_data();
        for (std::int64_t r = 0; r < rows; ++r) {
          for (std::int64_t j = 0; j < c; ++j) gb[j] += g[r * c + j];
        }
      }
    };
  }
  return Value<S>::from_node(node);
}

// Exact GELU: x * Phi(x) with the Gaussian CDF.
template <typename S>
Value<S> gelu(const Value<S>& x) {
  const std::int64_t n = x.val().size();
  Tensor<S> out(x.val().shape());
  S* o = out.mutable_data();
  const S* p = x.val().data();
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  for (std::int64_t i = 0; i < n; ++i) {
    const double v = p[i];
    o[i] = static_cast<S>(0.5 * v * (1.0 + std::erf(v * kInvSqrt2)));
  }
  auto node = detail::make_node("gelu", std::move(out), x);
  if (node->requires_grad) {
    node->backprop = [n](detail::AdNode<S>& self) {
      const S* g = self.grad.data();
      const S* p = self.inputs[0]->value.data();
      S* gx = self.inputs[0]->grad_data();
      constexpr double kInvSqrt2 = 0.70710678118654752440;
      constexpr double kInvSqrt2Pi = 0.39894228040143267794;
      for (std::int64_t i = 0; i < n; ++i) {
        const double v = p[i];
        const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        gx[i] += static_cast<S>(g[i] * (cdf + v * pdf));
      }
    };
  }
  return Value<S>::from_node(node);
}

template <typename S>
Value<S> sigmoid(const Value<S>& x) {
  const std::int64_t n = x.val().size();
  Tensor<S> out(x.val().shape());
  S* o = out.mutable_data();
  const S* p = x.val().data();
  for (std::int64_t i = 0; i < n; ++i) {
    const double v = p[i];
    if (v >= 0.0) {
      o[i] = static_cast<S>(1.0 / (1.0 + std::exp(-v)));
    } else {
      const double e = std::exp(v);
      o[i] = static_cast<S>(e / (1.0 + e));
    }
  }
  auto node = detail::make_node("sigmoid", std::move(out), x);
  if (node->requires_grad) {
    node->backprop = [n](detail::AdNode<S>& self) {
      const S* g = self.grad.data();
      const S* y = self.value.data();
      S* gx = self.inputs[0]->grad_data();
      for (std::int64_t i = 0; i < n; ++i) gx[i] += g[i] * y[i] * (S(1) - y[i]);
    };
  }
  return Value<S>::from_node(node);
}

// ---------------------------------------------------------------------------
// Reductions, slicing, concatenation
// ---------------------------------------------------------------------------

// Mean over one axis; the axis is removed from the shape (a rank-1 input
// reduces to a scalar of shape [1]).
template <typename S>
Value<S> mean(const Value<S>& x, int axis) {
  const auto sp = detail::split_axis(x.val().shape(), axis);
  Shape out_shape;
  for (int i = 0; i < x.val().rank(); ++i) {
    if (i != axis) out_shape.push_back(x.val().dim(i));
  }
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor<S> out(out_shape);
  S* o = out.mutable_data();
  const S* p = x.val().data();
  const double inv = 1.0 / static_cast<double>(sp.axis);
  for (std::int64_t a = 0; a < sp.outer; ++a) {
    for (std::int64_t i = 0; i < sp.inner; ++i) {
      double acc = 0.0;
      for (std::int64_t j = 0; j < sp.axis; ++j) acc += p[(a * sp.axis + j) * sp.inner + i];
      o[a * sp.inner + i] = static_cast<S>(acc * inv);
    }
  }
  auto node = detail::make_node("mean", std::move(out), x);
  if (node->requires_grad) {
    node->backprop = [sp](detail::AdNode<S>& self) {
      const S* g = self.grad.data();
      S* gx = self.inputs[0]->grad_data();
      const S inv = static_cast<S>(1.0 / static_cast<double>(sp.axis));
      for (std::int64_t a = 0; a < sp.outer; ++a) {
        for (std::int64_t i = 0; i < sp.inner; ++i) {
          const S gv = g[a * sp.inner + i] * inv;
          for (std::int64_t j = 0; j < sp.axis; ++j) gx[(a * sp.axis + j) * sp.inner + i] += gv;
        }
      }
    };
  }
  return Value<S>::from_node(node);
}

template <typename S>
Value<S> sum_all(const Value<S>& x) {
  const std::int64_t n = x.val().size();
  const S* p = x.val().data();
  double acc = 0.0;
  for (std::int64_t i = 0; i < n; ++i) acc += p[i];
  auto node = detail::make_node("sum_all", Tensor<S>::scalar(static_cast<S>(acc)), x);
  if (node->requires_grad) {
    node->backprop = [n](detail::AdNode<S>& self) {
      const S g = self.grad.data()[0];
      S* gx = self.inputs[0]->grad_data();
      for (std::int64_t i = 0; i < n; ++i) gx[i] += g;
    };
  }
  return Value<S>::from_node(node);
}

template <typename S>
Value<S> slice(const Value<S>& x, int axis, std::int64_t start, std::int64_t len) {
  const auto sp = detail::split_axis(x.val().shape(), axis);
  if (start < 0 || len < 1 || start + len > sp.axis) {
    throw ShapeError("slice [" + std::to_string(start) + ", " + std::to_string(start + len) +
                     ") out of range for axis of size " + std::to_string(sp.axis));
  }
  Shape out_shape = x.val().shape();
  out_shape[static_cast<std::size_t>(axis)] = len;
  Tensor<S> out(out_shape);
  S* o = out.mutable_data();
  const S* p = x.val().data();
  for (std::int64_t a = 0; a < sp.outer; ++a) {
    const S* src = p + (a * sp.axis + start) * sp.inner;
    std::copy(src, src + len * sp.inner, o + a * len * sp.inner);
  }
  auto node = detail::make_node("slice", std::move(out), x);
  if (node->requires_grad) {
    node->backprop = [sp, start, len](detail::AdNode<S>& self) {
      const S* g = self.grad.data();
      S* gx = self.inputs[0]->grad_data();
      for (std::int64_t a = 0; a < sp.outer; ++a) {
        detail::axpy(gx + (a * sp.axis + start) * sp.inner, g + a * len * sp.inner,
                     len * sp.inner);
      }
    };
  }
  return Value<S>::from_node(node);
}

template <typename S>
Value<S> concat(const std::vector<Value<S>>& xs, int axis) {
  if (xs.empty()) throw ShapeError("concat of zero tensors");
  const int rank = xs[0].val().rank();
  if (axis < 0 || axis >= rank) throw ShapeError("concat axis out of range");
  Shape out_shape = xs[0].val().shape();
  std::int64_t total = 0;
  for (const auto& x : xs) {
    if (x.val().rank() != rank) throw ShapeError("concat rank mismatch");
    for (int i = 0; i < rank; ++i) {
      if (i != axis && x.val().dim(i) != out_shape[static_cast<std::size_t>(i)]) {
        throw ShapeError("concat: shape mismatch " + shape_str(x.val().shape()) + " vs " +
                         shape_str(out_shape));
      }
    }
    total += x.val().dim(axis);
  }
  out_shape[static_cast<std::size_t>(axis)] = total;
  const auto sp = detail::split_axis(out_shape, axis);
  Tensor<S> out(out_shape);
  S* o = out.mutable_data();
  std::vector<std::int64_t> lens;
  lens.reserve(xs.size());
  for (const auto& x : xs) lens.push_back(x.val().dim(axis));
  for (std::int64_t a = 0; a < sp.outer; ++a) {
    std::int64_t pos = 0;
    for (std::size_t t = 0; t < xs.size(); ++t) {
      const S* src = xs[t].val().data() + a * lens[t] * sp.inner;
      std::copy(src, src + lens[t] * sp.inner, o + (a * sp.axis + pos) * sp.inner);
      pos += lens[t];
    }
  }
  auto node = std::make_shared<detail::AdNode<S>>();
  node->value = std::move(out);
  node->op = "concat";
  bool needs = false;
  for (const auto& x : xs) needs = needs || x.requires_grad();
  if (needs) {
    node->requires_grad = true;
    for (const auto& x : xs) node->inputs.push_back(x.node());
    node->backprop = [sp, lens](detail::AdNode<S>& self) {
      const S* g = self.grad.data();
      for (std::int64_t a = 0; a < sp.outer; ++a) {
        std::int64_t pos = 0;
        for (std::size_t t = 0; t < self.inputs.size(); ++t) {
          auto& in = *self.inputs[t];
          if (in.requires_grad) {
            detail::axpy(in.grad_data() + a * lens[t] * sp.inner,
                         g + (a * sp.axis + pos) * sp.inner, lens[t] * sp.inner);
          }
          pos += lens[t];
        }
      }
    };
  }
  return Value<S>::from_node(node);
}

// ---------------------------------------------------------------------------
// Dropout and losses
// ---------------------------------------------------------------------------

// Training mode zeroes each element with probability p and scales survivors
// by 1/(1-p). Inference mode returns the input value unchanged (bit-exact).
template <typename S>
Value<S> dropout(const Value<S>& x, double p, bool training, RngStream& rng) {
  if (p < 0.0 || p >= 1.0) throw ConfigError("dropout probability must be in [0, 1)");
  if (!training || p == 0.0) return x;
  const std::int64_t n = x.val().size();
  Tensor<S> mask(x.val().shape());
  S* mk = mask.mutable_data();
  const S keep_scale = static_cast<S>(1.0 / (1.0 - p));
  for (std::int64_t i = 0; i < n; ++i) mk[i] = rng.uniform() < p ? S(0) : keep_scale;
  Tensor<S> out(x.val().shape());
  S* o = out.mutable_data();
  const S* px = x.val().data();
  for (std::int64_t i = 0; i < n; ++i) o[i] = px[i] * mk[i];
  auto node = detail::make_node("dropout", std::move(out), x);
  if (node->requires_grad) {
    node->backprop = [n, mask](detail::AdNode<S>& self) {
      const S* g = self.grad.data();
      const S* mk = mask.data();
      S* gx = self.inputs[0]->grad_data();
      for (std::int64_t i = 0; i < n; ++i) gx[i] += g[i] * mk[i];
    };
  }
  return Value<S>::from_node(node);
}

// Huber loss between two scalars: quadratic within delta, linear outside.
template <typename S>
Value<S> huber_loss(const Value<S>& pred, const Value<S>& target, double delta) {
  if (delta <= 0.0) throw ConfigError("huber delta must be positive");
  if (!pred.val().is_scalar() || !target.val().is_scalar()) {
    throw ShapeError("huber_loss expects scalar inputs");
  }
  const double e = static_cast<double>(pred.val().item()) - static_cast<double>(target.val().item());
  const double ae = std::abs(e);
  const double loss = ae <= delta ? 0.5 * e * e : delta * (ae - 0.5 * delta);
  auto node = detail::make_node("huber_loss", Tensor<S>::scalar(static_cast<S>(loss)), pred, target);
  if (node->requires_grad) {
    const S dpred = static_cast<S>(ae <= delta ? e : (e > 0 ? delta : -delta));
    node->backprop = [dpred](detail::AdNode<S>& self) {
      const S g = self.grad.data()[0];
      if (self.inputs[0]->requires_grad) self.inputs[0]->grad_data()[0] += g * dpred;
      if (self.inputs[1]->requires_grad) self.inputs[1]->grad_data()[0] -= g * dpred;
    };
  }
  return Value<S>::from_node(node);
}

template <typename S>
Value<S> huber_loss(const Value<S>& pred, double target, double delta) {
  return huber_loss(pred, Value<S>::constant(Tensor<S>::scalar(static_cast<S>(target))), delta);
}

// x [r x c] * w [c x o] + b [o]
template <typename S>
Value<S> linear(const Value<S>& x, const Value<S>& w, const Value<S>& b) {
  return add_rows(matmul(x, w), b);
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

// Reverse-topological gradient accumulation from a scalar loss. The traversal
// order is a pure function of graph construction order, so gradient
// accumulation is deterministic.
template <typename S>
void backward(const Value<S>& loss) {
  if (!loss.defined() || !loss.val().is_scalar()) {
    throw ShapeError("backward requires a scalar loss record");
  }
  if (!loss.requires_grad()) return;

  using Node = detail::AdNode<S>;
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  // Iterative post-order DFS over requires_grad nodes.
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->inputs.size()) {
      Node* next = node->inputs[idx].get();
      ++idx;
      if (next->requires_grad && !visited.count(next)) {
        visited.insert(next);
        stack.emplace_back(next, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->grad = Tensor<S>::full({1}, S(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backprop && node->grad.size() != 0) node->backprop(*node);
  }
}

}  // namespace sipnet
