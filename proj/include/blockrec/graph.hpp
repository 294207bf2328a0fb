#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <map>
#include <memory>
#include <utility>
#include <vector>

#include "blockrec/tensor.hpp"

namespace blockrec {

// A value in the differentiable computation graph. Nodes are created by the
// op functions below; each op records its parents and an adjoint closure.
// Gradients accumulate by sum over all paths, in a fixed (creation-id) order,
// so repeated backward passes over the same graph are bit-identical.
template <typename Real>
struct Node {
  Tensor<Real> value;
  Tensor<Real> grad;  // allocated lazily, same shape as value
  bool requires_grad = false;
  bool needs_grad = false;  // true if any leaf below requires a gradient
  std::uint64_t id = 0;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return parents.empty(); }

  void ensure_grad() {
    if (grad.data.empty()) grad = Tensor<Real>(value.shape);
  }
  void accumulate(const Tensor<Real>& g) {
    ensure_grad();
    for (size_t i = 0; i < grad.data.size(); ++i) grad.data[i] += g.data[i];
  }
};

template <typename Real>
using NodeRef = std::shared_ptr<Node<Real>>;

namespace detail {
inline std::atomic<std::uint64_t>& node_counter() {
  static std::atomic<std::uint64_t> c{0};
  return c;
}
}  // namespace detail

template <typename Real>
NodeRef<Real> make_node(Tensor<Real> value, const char* op, std::vector<NodeRef<Real>> parents) {
  auto n = std::make_shared<Node<Real>>();
  n->value = std::move(value);
  n->op = op;
  n->id = detail::node_counter().fetch_add(1, std::memory_order_relaxed);
  n->parents = std::move(parents);
  for (const auto& p : n->parents) n->needs_grad = n->needs_grad || p->needs_grad;
  return n;
}

template <typename Real>
NodeRef<Real> constant(Tensor<Real> value) {
  return make_node(std::move(value), "const", {});
}

template <typename Real>
NodeRef<Real> param(Tensor<Real> value) {
  auto n = make_node(std::move(value), "param", {});
  n->requires_grad = true;
  n->needs_grad = true;
  return n;
}

// Reachable set from root, sorted by descending creation id. Since parents
// are always created before children, this is a valid reverse topological
// order for the backward sweep.
template <typename Real>
std::vector<Node<Real>*> collect_graph(const NodeRef<Real>& root) {
  std::vector<Node<Real>*> out;
  std::vector<Node<Real>*> stack{root.get()};
  std::map<Node<Real>*, bool> seen;
  while (!stack.empty()) {
    Node<Real>* n = stack.back();
    stack.pop_back();
    if (seen[n]) continue;
    seen[n] = true;
    out.push_back(n);
    for (const auto& p : n->parents) stack.push_back(p.get());
  }
  std::sort(out.begin(), out.end(),
            [](const Node<Real>* a, const Node<Real>* b) { return a->id > b->id; });
  return out;
}

template <typename Real>
void backward(const NodeRef<Real>& root) {
  contract(root->value.numel() == 1, "backward requires a scalar root, got shape " +
                                         shape_str(root->value.shape));
  auto nodes = collect_graph(root);
  root->ensure_grad();
  root->grad.data[0] += Real(1);
  for (Node<Real>* n : nodes) {
    if (!n->needs_grad || !n->backward_fn) continue;
    if (n->grad.data.empty()) continue;  // no contribution reached this node
    n->backward_fn(*n);
  }
}

// Runs the backward pass and returns the gradients of all reachable leaves
// that require one.
template <typename Real>
std::map<const Node<Real>*, Tensor<Real>> forward_backward(const NodeRef<Real>& root) {
  backward(root);
  std::map<const Node<Real>*, Tensor<Real>> grads;
  for (Node<Real>* n : collect_graph(root)) {
    if (n->is_leaf() && n->requires_grad) {
      n->ensure_grad();
      grads[n] = n->grad;
    }
  }
  return grads;
}

template <typename Real>
void zero_grad(const std::vector<NodeRef<Real>>& params) {
  for (const auto& p : params)
    if (!p->grad.data.empty()) p->grad.fill(Real(0));
}

// ---- shape helpers ---------------------------------------------------------

namespace detail {

inline bool is_suffix(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return false;
  return std::equal(b.rbegin(), b.rend(), a.rbegin());
}

inline int norm_axis(int axis, int rank) {
  int a = axis < 0 ? axis + rank : axis;
  contract(a >= 0 && a < rank, "axis out of range");
  return a;
}

// With row-major layout a suffix-broadcast operand repeats contiguously, so
// its flat index is simply i % numel.
template <typename Real, typename F>
Tensor<Real> binary_map(const Tensor<Real>& a, const Tensor<Real>& b, F f, const char* what) {
  contract(is_suffix(a.shape, b.shape),
           std::string(what) + ": shape " + shape_str(b.shape) + " is not a suffix of " +
               shape_str(a.shape));
  Tensor<Real> out(a.shape);
  const size_t nb = b.data.size();
  for (size_t i = 0; i < a.data.size(); ++i) out.data[i] = f(a.data[i], b.data[i % nb]);
  return out;
}

}  // namespace detail

// ---- elementwise ops -------------------------------------------------------

template <typename Real>
NodeRef<Real> add(const NodeRef<Real>& a, const NodeRef<Real>& b) {
  auto out = make_node(
      detail::binary_map(a->value, b->value, [](Real x, Real y) { return x + y; }, "add"), "add",
      {a, b});
  out->backward_fn = [a, b](Node<Real>& self) {
    if (a->needs_grad) a->accumulate(self.grad);
    if (b->needs_grad) {
      b->ensure_grad();
      const size_t nb = b->grad.data.size();
      for (size_t i = 0; i < self.grad.data.size(); ++i) b->grad.data[i % nb] += self.grad.data[i];
    }
  };
  return out;
}

template <typename Real>
NodeRef<Real> sub(const NodeRef<Real>& a, const NodeRef<Real>& b) {
  auto out = make_node(
      detail::binary_map(a->value, b->value, [](Real x, Real y) { return x - y; }, "sub"), "sub",
      {a, b});
  out->backward_fn = [a, b](Node<Real>& self) {
    if (a->needs_grad) a->accumulate(self.grad);
    if (b->needs_grad) {
      b->ensure_grad();
      const size_t nb = b->grad.data.size();
      for (size_t i = 0; i < self.grad.data.size(); ++i) b->grad.data[i % nb] -= self.grad.data[i];
    }
  };
  return out;
}

template <typename Real>
NodeRef<Real> mul(const NodeRef<Real>& a, const NodeRef<Real>& b) {
  auto out = make_node(
      detail::binary_map(a->value, b->value, [](Real x, Real y) { return x * y; }, "mul"), "mul",
      {a, b});
  out->backward_fn = [a, b](Node<Real>& self) {
    const size_t nb = b->value.data.size();
    if (a->needs_grad) {
      a->ensure_grad();
      for (size_t i = 0; i < self.grad.data.size(); ++i)
        a->grad.data[i] += self.grad.data[i] * b->value.data[i % nb];
    }
    if (b->needs_grad) {
      b->ensure_grad();
      for (size_t i = 0; i < self.grad.data.size(); ++i)
        b->grad.data[i % nb] += self.grad.data[i] * a->value.data[i];
    }
  };
  return out;
}

template <typename Real>
NodeRef<Real> scale(const NodeRef<Real>& a, Real c) {
  Tensor<Real> v = a->value;
  for (Real& x : v.data) x *= c;
  auto out = make_node(std::move(v), "scale", {a});
  out->backward_fn = [a, c](Node<Real>& self) {
    if (!a->needs_grad) return;
    a->ensure_grad();
    for (size_t i = 0; i < self.grad.data.size(); ++i) a->grad.data[i] += c * self.grad.data[i];
  };
  return out;
}

template <typename Real>
NodeRef<Real> add_scalar(const NodeRef<Real>& a, Real c) {
  Tensor<Real> v = a->value;
  for (Real& x : v.data) x += c;
  auto out = make_node(std::move(v), "add_scalar", {a});
  out->backward_fn = [a](Node<Real>& self) {
    if (a->needs_grad) a->accumulate(self.grad);
  };
  return out;
}

namespace detail {

template <typename Real, typename FwdF, typename BwdF>
NodeRef<Real> unary_op(const NodeRef<Real>& a, const char* name, FwdF f, BwdF dfdx_from_xy) {
  Tensor<Real> v(a->value.shape);
  for (size_t i = 0; i < v.data.size(); ++i) v.data[i] = f(a->value.data[i]);
  auto out = make_node(std::move(v), name, {a});
  out->backward_fn = [a, dfdx_from_xy](Node<Real>& self) {
    if (!a->needs_grad) return;
    a->ensure_grad();
    for (size_t i = 0; i < self.grad.data.size(); ++i)
      a->grad.data[i] += self.grad.data[i] * dfdx_from_xy(a->value.data[i], self.value.data[i]);
  };
  return out;
}

}  // namespace detail

template <typename Real>
NodeRef<Real> sigmoid(const NodeRef<Real>& a) {
  return detail::unary_op(
      a, "sigmoid", [](Real x) { return Real(1) / (Real(1) + std::exp(-x)); },
      [](Real, Real y) { return y * (Real(1) - y); });
}

template <typename Real>
NodeRef<Real> tanh(const NodeRef<Real>& a) {
  return detail::unary_op(
      a, "tanh", [](Real x) { return std::tanh(x); }, [](Real, Real y) { return Real(1) - y * y; });
}

template <typename Real>
NodeRef<Real> relu(const NodeRef<Real>& a) {
  return detail::unary_op(
      a, "relu", [](Real x) { return x > Real(0) ? x : Real(0); },
      [](Real x, Real) { return x > Real(0) ? Real(1) : Real(0); });
}

template <typename Real>
NodeRef<Real> exp(const NodeRef<Real>& a) {
  return detail::unary_op(
      a, "exp", [](Real x) { return std::exp(x); }, [](Real, Real y) { return y; });
}

template <typename Real>
NodeRef<Real> log(const NodeRef<Real>& a) {
  return detail::unary_op(
      a, "log", [](Real x) { return std::log(x); }, [](Real x, Real) { return Real(1) / x; });
}

// ---- matmul ----------------------------------------------------------------

namespace detail {

struct MatDims {
  i64 slabs;  // number of [m,k] slabs in a
  i64 m, k;
};

template <typename Real>
MatDims mat_dims(const Tensor<Real>& a, const char* what) {
  contract(a.rank() >= 2, std::string(what) + ": operand must have rank >= 2");
  MatDims d;
  d.m = a.shape[a.shape.size() - 2];
  d.k = a.shape.back();
  d.slabs = a.numel() / (d.m * d.k);
  return d;
}

inline Shape matmul_out_shape(const Shape& a, i64 n) {
  Shape out(a.begin(), a.end() - 1);
  out.push_back(n);
  return out;
}

}  // namespace detail

// a:[...,m,k] x b:[k,n]  or  a:[...,m,k] x b:[...,k,n] with equal leading dims.
template <typename Real>
NodeRef<Real> matmul(const NodeRef<Real>& a, const NodeRef<Real>& b) {
  const auto da = detail::mat_dims(a->value, "matmul");
  const auto db = detail::mat_dims(b->value, "matmul");
  contract(da.k == db.m, "matmul: inner extents differ, " + shape_str(a->value.shape) + " x " +
                             shape_str(b->value.shape));
  const bool shared_b = b->value.rank() == 2;
  if (!shared_b)
    contract(Shape(a->value.shape.begin(), a->value.shape.end() - 2) ==
                 Shape(b->value.shape.begin(), b->value.shape.end() - 2),
             "matmul: leading extents differ, " + shape_str(a->value.shape) + " x " +
                 shape_str(b->value.shape));
  const i64 n = db.k;
  Tensor<Real> v(detail::matmul_out_shape(a->value.shape, n));
  if (shared_b) {
    gemm(a->value.data.data(), b->value.data.data(), v.data.data(), da.slabs * da.m, da.k, n,
         false);
  } else {
    for (i64 s = 0; s < da.slabs; ++s)
      gemm(a->value.data.data() + s * da.m * da.k, b->value.data.data() + s * da.k * n,
           v.data.data() + s * da.m * n, da.m, da.k, n, false);
  }
  auto out = make_node(std::move(v), "matmul", {a, b});
  out->backward_fn = [a, b, da, n, shared_b](Node<Real>& self) {
    const Real* g = self.grad.data.data();
    if (a->needs_grad) {
      a->ensure_grad();
      if (shared_b) {
        gemm_nt(g, b->value.data.data(), a->grad.data.data(), da.slabs * da.m, n, da.k, true);
      } else {
        for (i64 s = 0; s < da.slabs; ++s)
          gemm_nt(g + s * da.m * n, b->value.data.data() + s * da.k * n,
                  a->grad.data.data() + s * da.m * da.k, da.m, n, da.k, true);
      }
    }
    if (b->needs_grad) {
      b->ensure_grad();
      if (shared_b) {
        gemm_tn(a->value.data.data(), g, b->grad.data.data(), da.k, da.slabs * da.m, n, true);
      } else {
        for (i64 s = 0; s < da.slabs; ++s)
          gemm_tn(a->value.data.data() + s * da.m * da.k, g + s * da.m * n,
                  b->grad.data.data() + s * da.k * n, da.k, da.m, n, true);
      }
    }
  };
  return out;
}

// a:[...,m,k] x b:[...,n,k]^T (b may be rank 2 and shared across slabs).
template <typename Real>
NodeRef<Real> matmul_nt(const NodeRef<Real>& a, const NodeRef<Real>& b) {
  const auto da = detail::mat_dims(a->value, "matmul_nt");
  const auto db = detail::mat_dims(b->value, "matmul_nt");
  contract(da.k == db.k, "matmul_nt: inner extents differ, " + shape_str(a->value.shape) + " x " +
                             shape_str(b->value.shape));
  const bool shared_b = b->value.rank() == 2;
  if (!shared_b)
    contract(Shape(a->value.shape.begin(), a->value.shape.end() - 2) ==
                 Shape(b->value.shape.begin(), b->value.shape.end() - 2),
             "matmul_nt: leading extents differ");
  const i64 n = db.m;
  Tensor<Real> v(detail::matmul_out_shape(a->value.shape, n));
  if (shared_b) {
    gemm_nt(a->value.data.data(), b->value.data.data(), v.data.data(), da.slabs * da.m, da.k, n,
            false);
  } else {
    for (i64 s = 0; s < da.slabs; ++s)
      gemm_nt(a->value.data.data() + s * da.m * da.k, b->value.data.data() + s * n * da.k,
              v.data.data() + s * da.m * n, da.m, da.k, n, false);
  }
  auto out = make_node(std::move(v), "matmul_nt", {a, b});
  out->backward_fn = [a, b, da, n, shared_b](Node<Real>& self) {
    const Real* g = self.grad.data.data();
    if (a->needs_grad) {
      a->ensure_grad();
      if (shared_b) {
        gemm(g, b->value.data.data(), a->grad.data.data(), da.slabs * da.m, n, da.k, true);
      } else {
        for (i64 s = 0; s < da.slabs; ++s)
          gemm(g + s * da.m * n, b->value.data.data() + s * n * da.k,
               a->grad.data.data() + s * da.m * da.k, da.m, n, da.k, true);
      }
    }
    if (b->needs_grad) {
      b->ensure_grad();
      if (shared_b) {
        gemm_tn(g, a->value.data.data(), b->grad.data.data(), n, da.slabs * da.m, da.k, true);
      } else {
        for (i64 s = 0; s < da.slabs; ++s)
          gemm_tn(g + s * da.m * n, a->value.data.data() + s * da.m * da.k,
                  b->grad.data.data() + s * n * da.k, n, da.m, da.k, true);
      }
    }
  };
  return out;
}

// ---- layout ops ------------------------------------------------------------

namespace detail {

template <typename Real>
Tensor<Real> swap_axes_copy(const Tensor<Real>& t, int ax1, int ax2) {
  const int r = t.rank();
  Shape out_shape = t.shape;
  std::swap(out_shape[ax1], out_shape[ax2]);
  Tensor<Real> out(out_shape);
  // Views the tensor as [outer, A, mid, B, inner] and exchanges A and B.
  i64 outer = 1, mid = 1, inner = 1;
  for (int i = 0; i < ax1; ++i) outer *= t.shape[i];
  for (int i = ax1 + 1; i < ax2; ++i) mid *= t.shape[i];
  for (int i = ax2 + 1; i < r; ++i) inner *= t.shape[i];
  const i64 A = t.shape[ax1], B = t.shape[ax2];
  const Real* src = t.data.data();
  Real* dst = out.data.data();
  for (i64 o = 0; o < outer; ++o)
    for (i64 bi = 0; bi < B; ++bi)
      for (i64 m = 0; m < mid; ++m)
        for (i64 ai = 0; ai < A; ++ai) {
          const Real* s = src + (((o * A + ai) * mid + m) * B + bi) * inner;
          Real* d = dst + (((o * B + bi) * mid + m) * A + ai) * inner;
          std::memcpy(d, s, sizeof(Real) * static_cast<size_t>(inner));
        }
  return out;
}

}  // namespace detail

template <typename Real>
NodeRef<Real> transpose(const NodeRef<Real>& a, int axis1, int axis2) {
  int r = a->value.rank();
  int x = detail::norm_axis(axis1, r), y = detail::norm_axis(axis2, r);
  if (x > y) std::swap(x, y);
  contract(x != y, "transpose: axes must differ");
  auto out = make_node(detail::swap_axes_copy(a->value, x, y), "transpose", {a});
  out->backward_fn = [a, x, y](Node<Real>& self) {
    if (!a->needs_grad) return;
    a->accumulate(detail::swap_axes_copy(self.grad, x, y));
  };
  return out;
}

template <typename Real>
NodeRef<Real> reshape(const NodeRef<Real>& a, Shape new_shape) {
  contract(shape_numel(new_shape) == a->value.numel(),
           "reshape: element count mismatch " + shape_str(a->value.shape) + " -> " +
               shape_str(new_shape));
  Tensor<Real> v(new_shape, a->value.data);
  auto out = make_node(std::move(v), "reshape", {a});
  out->backward_fn = [a](Node<Real>& self) {
    if (!a->needs_grad) return;
    a->ensure_grad();
    for (size_t i = 0; i < self.grad.data.size(); ++i) a->grad.data[i] += self.grad.data[i];
  };
  return out;
}

template <typename Real>
NodeRef<Real> concat(const std::vector<NodeRef<Real>>& parts, int axis) {
  contract(!parts.empty(), "concat: no operands");
  const int r = parts[0]->value.rank();
  const int ax = detail::norm_axis(axis, r);
  Shape out_shape = parts[0]->value.shape;
  i64 total = 0;
  for (const auto& p : parts) {
    contract(p->value.rank() == r, "concat: rank mismatch");
    for (int i = 0; i < r; ++i)
      contract(i == ax || p->value.shape[i] == out_shape[i], "concat: extent mismatch off-axis");
    total += p->value.shape[ax];
  }
  out_shape[ax] = total;
  i64 outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= out_shape[i];
  for (int i = ax + 1; i < r; ++i) inner *= out_shape[i];

  Tensor<Real> v(out_shape);
  {
    i64 off = 0;
    for (const auto& p : parts) {
      const i64 rows = p->value.shape[ax] * inner;
      for (i64 o = 0; o < outer; ++o)
        std::memcpy(v.data.data() + (o * total * inner) + off, p->value.data.data() + o * rows,
                    sizeof(Real) * static_cast<size_t>(rows));
      off += rows;
    }
  }
  auto out = make_node(std::move(v), "concat", parts);
  out->backward_fn = [parts, outer, inner, total](Node<Real>& self) {
    i64 off = 0;
    for (const auto& p : parts) {
      const i64 seg = p->value.numel() / outer;
      if (p->needs_grad) {
        p->ensure_grad();
        for (i64 o = 0; o < outer; ++o) {
          const Real* g = self.grad.data.data() + o * total * inner + off;
          Real* dst = p->grad.data.data() + o * seg;
          for (i64 i = 0; i < seg; ++i) dst[i] += g[i];
        }
      }
      off += seg;
    }
  };
  return out;
}

template <typename Real>
std::vector<NodeRef<Real>> split(const NodeRef<Real>& a, int axis, const std::vector<i64>& sizes) {
  const int r = a->value.rank();
  const int ax = detail::norm_axis(axis, r);
  i64 total = 0;
  for (i64 s : sizes) total += s;
  contract(total == a->value.shape[ax], "split: sizes do not sum to axis extent");
  i64 outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= a->value.shape[i];
  for (int i = ax + 1; i < r; ++i) inner *= a->value.shape[i];

  std::vector<NodeRef<Real>> outs;
  i64 off = 0;
  for (i64 s : sizes) {
    Shape piece_shape = a->value.shape;
    piece_shape[ax] = s;
    Tensor<Real> v(piece_shape);
    const i64 seg = s * inner;
    for (i64 o = 0; o < outer; ++o)
      std::memcpy(v.data.data() + o * seg, a->value.data.data() + o * total * inner + off,
                  sizeof(Real) * static_cast<size_t>(seg));
    auto out = make_node(std::move(v), "split", {a});
    const i64 this_off = off;
    out->backward_fn = [a, outer, inner, total, seg, this_off](Node<Real>& self) {
      if (!a->needs_grad) return;
      a->ensure_grad();
      for (i64 o = 0; o < outer; ++o) {
        const Real* g = self.grad.data.data() + o * seg;
        Real* dst = a->grad.data.data() + o * total * inner + this_off;
        for (i64 i = 0; i < seg; ++i) dst[i] += g[i];
      }
    };
    outs.push_back(std::move(out));
    off += seg;
  }
  return outs;
}

// Repeats a leading copy of `a` n times: [n, ...a.shape].
template <typename Real>
NodeRef<Real> expand_leading(const NodeRef<Real>& a, i64 n) {
  Shape out_shape;
  out_shape.push_back(n);
  for (i64 d : a->value.shape) out_shape.push_back(d);
  Tensor<Real> v(out_shape);
  const i64 block = a->value.numel();
  for (i64 i = 0; i < n; ++i)
    std::memcpy(v.data.data() + i * block, a->value.data.data(),
                sizeof(Real) * static_cast<size_t>(block));
  auto out = make_node(std::move(v), "expand_leading", {a});
  out->backward_fn = [a, n, block](Node<Real>& self) {
    if (!a->needs_grad) return;
    a->ensure_grad();
    for (i64 i = 0; i < n; ++i) {
      const Real* g = self.grad.data.data() + i * block;
      for (i64 j = 0; j < block; ++j) a->grad.data[j] += g[j];
    }
  };
  return out;
}

// ---- normalization and softmax ---------------------------------------------

template <typename Real>
NodeRef<Real> softmax_last(const NodeRef<Real>& a) {
  const i64 n = a->value.shape.back();
  const i64 rows = a->value.numel() / n;
  Tensor<Real> v(a->value.shape);
  for (i64 rix = 0; rix < rows; ++rix) {
    const Real* x = a->value.data.data() + rix * n;
    Real* y = v.data.data() + rix * n;
    Real mx = x[0];
    for (i64 i = 1; i < n; ++i) mx = std::max(mx, x[i]);
    Real sum = Real(0);
    for (i64 i = 0; i < n; ++i) {
      y[i] = std::exp(x[i] - mx);
      sum += y[i];
    }
    const Real inv = Real(1) / sum;
    for (i64 i = 0; i < n; ++i) y[i] *= inv;
  }
  auto out = make_node(std::move(v), "softmax", {a});
  out->backward_fn = [a, n, rows](Node<Real>& self) {
    if (!a->needs_grad) return;
    a->ensure_grad();
    for (i64 rix = 0; rix < rows; ++rix) {
      const Real* y = self.value.data.data() + rix * n;
      const Real* g = self.grad.data.data() + rix * n;
      Real* dx = a->grad.data.data() + rix * n;
      Real dot = Real(0);
      for (i64 i = 0; i < n; ++i) dot += g[i] * y[i];
      for (i64 i = 0; i < n; ++i) dx[i] += y[i] * (g[i] - dot);
    }
  };
  return out;
}

// y = gain * (x - mean) / sqrt(var + eps), statistics over the last axis.
template <typename Real>
NodeRef<Real> layer_norm(const NodeRef<Real>& a, const NodeRef<Real>& gain, Real eps = Real(1e-6)) {
  const i64 n = a->value.shape.back();
  contract(gain->value.rank() == 1 && gain->value.shape[0] == n, "layer_norm: gain must be [d]");
  const i64 rows = a->value.numel() / n;
  Tensor<Real> v(a->value.shape);
  Tensor<Real> xhat(a->value.shape);
  std::vector<Real> inv_std(static_cast<size_t>(rows));
  for (i64 rix = 0; rix < rows; ++rix) {
    const Real* x = a->value.data.data() + rix * n;
    Real mean = Real(0);
    for (i64 i = 0; i < n; ++i) mean += x[i];
    mean /= Real(n);
    Real var = Real(0);
    for (i64 i = 0; i < n; ++i) var += (x[i] - mean) * (x[i] - mean);
    var /= Real(n);
    const Real is = Real(1) / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(rix)] = is;
    Real* xh = xhat.data.data() + rix * n;
    Real* y = v.data.data() + rix * n;
    for (i64 i = 0; i < n; ++i) {
      xh[i] = (x[i] - mean) * is;
      y[i] = gain->value.data[static_cast<size_t>(i)] * xh[i];
    }
  }
  auto out = make_node(std::move(v), "layer_norm", {a, gain});
  auto xhat_p = std::make_shared<Tensor<Real>>(std::move(xhat));
  auto inv_p = std::make_shared<std::vector<Real>>(std::move(inv_std));
  out->backward_fn = [a, gain, n, rows, xhat_p, inv_p](Node<Real>& self) {
    if (gain->needs_grad) {
      gain->ensure_grad();
      for (i64 rix = 0; rix < rows; ++rix) {
        const Real* g = self.grad.data.data() + rix * n;
        const Real* xh = xhat_p->data.data() + rix * n;
        for (i64 i = 0; i < n; ++i) gain->grad.data[static_cast<size_t>(i)] += g[i] * xh[i];
      }
    }
    if (a->needs_grad) {
      a->ensure_grad();
      for (i64 rix = 0; rix < rows; ++rix) {
        const Real* g = self.grad.data.data() + rix * n;
        const Real* xh = xhat_p->data.data() + rix * n;
        Real* dx = a->grad.data.data() + rix * n;
        const Real is = (*inv_p)[static_cast<size_t>(rix)];
        Real mean_gy = Real(0), mean_gyxh = Real(0);
        for (i64 i = 0; i < n; ++i) {
          const Real gy = g[i] * gain->value.data[static_cast<size_t>(i)];
          mean_gy += gy;
          mean_gyxh += gy * xh[i];
        }
        mean_gy /= Real(n);
        mean_gyxh /= Real(n);
        for (i64 i = 0; i < n; ++i) {
          const Real gy = g[i] * gain->value.data[static_cast<size_t>(i)];
          dx[i] += is * (gy - mean_gy - xh[i] * mean_gyxh);
        }
      }
    }
  };
  return out;
}

// y = x / sqrt(sum(x^2) + eps) along the last axis.
template <typename Real>
NodeRef<Real> l2_normalize_last(const NodeRef<Real>& a, Real eps = Real(1e-6)) {
  const i64 n = a->value.shape.back();
  const i64 rows = a->value.numel() / n;
  Tensor<Real> v(a->value.shape);
  std::vector<Real> inv_norm(static_cast<size_t>(rows));
  for (i64 rix = 0; rix < rows; ++rix) {
    const Real* x = a->value.data.data() + rix * n;
    Real ss = Real(0);
    for (i64 i = 0; i < n; ++i) ss += x[i] * x[i];
    const Real ir = Real(1) / std::sqrt(ss + eps);
    inv_norm[static_cast<size_t>(rix)] = ir;
    Real* y = v.data.data() + rix * n;
    for (i64 i = 0; i < n; ++i) y[i] = x[i] * ir;
  }
  auto out = make_node(std::move(v), "l2_normalize", {a});
  auto inv_p = std::make_shared<std::vector<Real>>(std::move(inv_norm));
  out->backward_fn = [a, n, rows, inv_p](Node<Real>& self) {
    if (!a->needs_grad) return;
    a->ensure_grad();
    for (i64 rix = 0; rix < rows; ++rix) {
      const Real* x = a->value.data.data() + rix * n;
      const Real* g = self.grad.data.data() + rix * n;
      Real* dx = a->grad.data.data() + rix * n;
      const Real ir = (*inv_p)[static_cast<size_t>(rix)];
      Real dot = Real(0);
      for (i64 i = 0; i < n; ++i) dot += g[i] * x[i];
      const Real ir3 = ir * ir * ir;
      for (i64 i = 0; i < n; ++i) dx[i] += g[i] * ir - x[i] * dot * ir3;
    }
  };
  return out;
}

// Multiplies along `axis` by a learnable vector s of length shape[axis].
template <typename Real>
NodeRef<Real> scale_axis(const NodeRef<Real>& a, const NodeRef<Real>& s, int axis) {
  const int r = a->value.rank();
  const int ax = detail::norm_axis(axis, r);
  const i64 len = a->value.shape[ax];
  contract(s->value.rank() == 1 && s->value.shape[0] == len,
           "scale_axis: scale must be a vector matching the axis extent");
  i64 inner = 1;
  for (int i = ax + 1; i < r; ++i) inner *= a->value.shape[i];
  const i64 outer = a->value.numel() / (len * inner);
  Tensor<Real> v(a->value.shape);
  for (i64 o = 0; o < outer; ++o)
    for (i64 j = 0; j < len; ++j) {
      const Real sv = s->value.data[static_cast<size_t>(j)];
      const Real* x = a->value.data.data() + (o * len + j) * inner;
      Real* y = v.data.data() + (o * len + j) * inner;
      for (i64 i = 0; i < inner; ++i) y[i] = x[i] * sv;
    }
  auto out = make_node(std::move(v), "scale_axis", {a, s});
  out->backward_fn = [a, s, outer, len, inner](Node<Real>& self) {
    if (a->needs_grad) {
      a->ensure_grad();
      for (i64 o = 0; o < outer; ++o)
        for (i64 j = 0; j < len; ++j) {
          const Real sv = s->value.data[static_cast<size_t>(j)];
          const Real* g = self.grad.data.data() + (o * len + j) * inner;
          Real* dx = a->grad.data.data() + (o * len + j) * inner;
          for (i64 i = 0; i < inner; ++i) dx[i] += g[i] * sv;
        }
    }
    if (s->needs_grad) {
      s->ensure_grad();
      for (i64 o = 0; o < outer; ++o)
        for (i64 j = 0; j < len; ++j) {
          const Real* g = self.grad.data.data() + (o * len + j) * inner;
          const Real* x = a->value.data.data() + (o * len + j) * inner;
          Real acc = Real(0);
          for (i64 i = 0; i < inner; ++i) acc += g[i] * x[i];
          s->grad.data[static_cast<size_t>(j)] += acc;
        }
    }
  };
  return out;
}

// ---- lookup and loss -------------------------------------------------------

// Gathers rows of table: output shape = ids_shape + [d].
template <typename Real>
NodeRef<Real> embedding(const NodeRef<Real>& table, const std::vector<i64>& ids, Shape ids_shape) {
  contract(table->value.rank() == 2, "embedding: table must be [vocab, d]");
  contract(shape_numel(ids_shape) == static_cast<i64>(ids.size()),
           "embedding: ids shape mismatch");
  const i64 vocab = table->value.shape[0], d = table->value.shape[1];
  Shape out_shape = ids_shape;
  out_shape.push_back(d);
  Tensor<Real> v(out_shape);
  for (size_t i = 0; i < ids.size(); ++i) {
    contract(ids[i] >= 0 && ids[i] < vocab, "embedding: id out of range");
    std::memcpy(v.data.data() + static_cast<i64>(i) * d, table->value.data.data() + ids[i] * d,
                sizeof(Real) * static_cast<size_t>(d));
  }
  auto out = make_node(std::move(v), "embedding", {table});
  auto ids_p = std::make_shared<std::vector<i64>>(ids);
  out->backward_fn = [table, ids_p, d](Node<Real>& self) {
    if (!table->needs_grad) return;
    table->ensure_grad();
    for (size_t i = 0; i < ids_p->size(); ++i) {
      const Real* g = self.grad.data.data() + static_cast<i64>(i) * d;
      Real* dst = table->grad.data.data() + (*ids_p)[i] * d;
      for (i64 j = 0; j < d; ++j) dst[j] += g[j];
    }
  };
  return out;
}

// Per-position negative log likelihood (natural log) of the target class.
// logits: [..., vocab]; targets: flattened indices of the leading positions.
template <typename Real>
NodeRef<Real> cross_entropy_logits(const NodeRef<Real>& logits, const std::vector<i64>& targets) {
  const i64 vocab = logits->value.shape.back();
  const i64 rows = logits->value.numel() / vocab;
  contract(rows == static_cast<i64>(targets.size()), "cross_entropy: target count mismatch");
  Shape out_shape(logits->value.shape.begin(), logits->value.shape.end() - 1);
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor<Real> v(out_shape);
  Tensor<Real> probs(logits->value.shape);
  for (i64 rix = 0; rix < rows; ++rix) {
    const i64 t = targets[static_cast<size_t>(rix)];
    contract(t >= 0 && t < vocab, "cross_entropy: target out of range");
    const Real* x = logits->value.data.data() + rix * vocab;
    Real* p = probs.data.data() + rix * vocab;
    Real mx = x[0];
    for (i64 i = 1; i < vocab; ++i) mx = std::max(mx, x[i]);
    Real sum = Real(0);
    for (i64 i = 0; i < vocab; ++i) {
      p[i] = std::exp(x[i] - mx);
      sum += p[i];
    }
    const Real inv = Real(1) / sum;
    for (i64 i = 0; i < vocab; ++i) p[i] *= inv;
    v.data[static_cast<size_t>(rix)] = std::log(sum) + mx - x[t];
  }
  auto out = make_node(std::move(v), "cross_entropy", {logits});
  auto probs_p = std::make_shared<Tensor<Real>>(std::move(probs));
  auto targets_p = std::make_shared<std::vector<i64>>(targets);
  out->backward_fn = [logits, probs_p, targets_p, vocab, rows](Node<Real>& self) {
    if (!logits->needs_grad) return;
    logits->ensure_grad();
    for (i64 rix = 0; rix < rows; ++rix) {
      const Real g = self.grad.data[static_cast<size_t>(rix)];
      const Real* p = probs_p->data.data() + rix * vocab;
      Real* dx = logits->grad.data.data() + rix * vocab;
      for (i64 i = 0; i < vocab; ++i) dx[i] += g * p[i];
      dx[(*targets_p)[static_cast<size_t>(rix)]] -= g;
    }
  };
  return out;
}

// ---- reductions, masking, misc ----------------------------------------------

template <typename Real>
NodeRef<Real> sum_all(const NodeRef<Real>& a) {
  Real s = Real(0);
  for (Real v : a->value.data) s += v;
  auto out = make_node(Tensor<Real>::scalar(s), "sum", {a});
  out->backward_fn = [a](Node<Real>& self) {
    if (!a->needs_grad) return;
    a->ensure_grad();
    const Real g = self.grad.data[0];
    for (Real& v : a->grad.data) v += g;
  };
  return out;
}

template <typename Real>
NodeRef<Real> mean_all(const NodeRef<Real>& a) {
  return scale(sum_all(a), Real(1) / static_cast<Real>(a->value.numel()));
}

// Identity on values; the adjoint is zero (the result is a fresh leaf).
template <typename Real>
NodeRef<Real> stop_gradient(const NodeRef<Real>& a) {
  return make_node(Tensor<Real>(a->value), "stop_gradient", {});
}

// Where mask != 0 the output is `fill`; gradients pass only through unmasked
// positions. The mask must match the input shape exactly or be a suffix.
template <typename Real>
NodeRef<Real> masked_fill(const NodeRef<Real>& a, const Tensor<std::uint8_t>& mask, Real fill) {
  contract(detail::is_suffix(a->value.shape, mask.shape),
           "masked_fill: mask shape " + shape_str(mask.shape) + " incompatible with " +
               shape_str(a->value.shape));
  const size_t nm = mask.data.size();
  Tensor<Real> v = a->value;
  for (size_t i = 0; i < v.data.size(); ++i)
    if (mask.data[i % nm]) v.data[i] = fill;
  auto out = make_node(std::move(v), "masked_fill", {a});
  auto mask_p = std::make_shared<Tensor<std::uint8_t>>(mask);
  out->backward_fn = [a, mask_p, nm](Node<Real>& self) {
    if (!a->needs_grad) return;
    a->ensure_grad();
    for (size_t i = 0; i < self.grad.data.size(); ++i)
      if (!mask_p->data[i % nm]) a->grad.data[i] += self.grad.data[i];
  };
  return out;
}

// Inverted dropout; identity when rate <= 0.
template <typename Real>
NodeRef<Real> dropout(const NodeRef<Real>& a, double rate, Rng& rng) {
  if (rate <= 0.0) return a;
  contract(rate < 1.0, "dropout: rate must be < 1");
  const Real keep_inv = static_cast<Real>(1.0 / (1.0 - rate));
  auto mask = std::make_shared<std::vector<Real>>(a->value.data.size());
  Tensor<Real> v(a->value.shape);
  for (size_t i = 0; i < v.data.size(); ++i) {
    const Real m = rng.uniform() < rate ? Real(0) : keep_inv;
    (*mask)[i] = m;
    v.data[i] = a->value.data[i] * m;
  }
  auto out = make_node(std::move(v), "dropout", {a});
  out->backward_fn = [a, mask](Node<Real>& self) {
    if (!a->needs_grad) return;
    a->ensure_grad();
    for (size_t i = 0; i < self.grad.data.size(); ++i)
      a->grad.data[i] += self.grad.data[i] * (*mask)[i];
  };
  return out;
}

}  // namespace blockrec
