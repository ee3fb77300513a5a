#include "voxmae/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_set>

#include "voxmae/error.hpp"

namespace voxmae::ad {

namespace ker = voxmae::kernels;

namespace {

Var make_node(Tensor val, std::vector<Var> parents, std::function<void(Node&)> backfn,
              const char* op) {
  auto n = std::make_shared<Node>();
  n->val = std::move(val);
  n->op = op;
  bool rg = false;
  for (const auto& p : parents) rg = rg || p->requires_grad;
  n->requires_grad = rg;
  if (rg) {
    n->parents = std::move(parents);
    n->backfn = std::move(backfn);
  }
  return n;
}

// accumulate a full-shape gradient contribution into a (possibly broadcast)
// parent
void accum_bcast(Node& parent, const Tensor& contrib) {
  Tensor& g = ensure_grad(parent);
  ker::reduce_to_shape(contrib.data(), contrib.shape(), g.data(), g.shape(), true);
}

std::vector<i64> broadcast_shape(const std::vector<i64>& a, const std::vector<i64>& b) {
  std::size_t n = std::max(a.size(), b.size());
  std::vector<i64> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    i64 da = i < n - a.size() ? 1 : a[i - (n - a.size())];
    i64 db = i < n - b.size() ? 1 : b[i - (n - b.size())];
    require(da == db || da == 1 || db == 1, ErrorCategory::internal,
            "shapes not broadcastable: " + shape_str(a) + " vs " + shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

Var binop(ker::BinOp op, const Var& a, const Var& b, const char* name) {
  std::vector<i64> oshape = broadcast_shape(a->shape(), b->shape());
  Tensor out(oshape);
  ker::broadcast_binary(op, a->val.data(), a->shape(), b->val.data(), b->shape(), out.data(),
                        oshape);
  Var av = a, bv = b;
  std::function<void(Node&)> back;
  switch (op) {
    case ker::BinOp::add:
      back = [av, bv](Node& o) {
        if (av->requires_grad) accum_bcast(*av, o.grad);
        if (bv->requires_grad) accum_bcast(*bv, o.grad);
      };
      break;
    case ker::BinOp::sub:
      back = [av, bv](Node& o) {
        if (av->requires_grad) accum_bcast(*av, o.grad);
        if (bv->requires_grad) {
          Tensor t(o.grad.shape());
          ker::scale(o.grad.data(), -1.0, t.data(), t.numel());
          accum_bcast(*bv, t);
        }
      };
      break;
    case ker::BinOp::mul:
      back = [av, bv](Node& o) {
        if (av->requires_grad) {
          Tensor t(o.grad.shape());
          ker::broadcast_binary(ker::BinOp::mul, o.grad.data(), o.grad.shape(), bv->val.data(),
                                bv->shape(), t.data(), o.grad.shape());
          accum_bcast(*av, t);
        }
        if (bv->requires_grad) {
          Tensor t(o.grad.shape());
          ker::broadcast_binary(ker::BinOp::mul, o.grad.data(), o.grad.shape(), av->val.data(),
                                av->shape(), t.data(), o.grad.shape());
          accum_bcast(*bv, t);
        }
      };
      break;
    case ker::BinOp::div:
      back = [av, bv](Node& o) {
        if (av->requires_grad) {
          Tensor t(o.grad.shape());
          ker::broadcast_binary(ker::BinOp::div, o.grad.data(), o.grad.shape(), bv->val.data(),
                                bv->shape(), t.data(), o.grad.shape());
          accum_bcast(*av, t);
        }
        if (bv->requires_grad) {
          // d/db (a/b) = -a/b^2 = -(a/b)/b
          Tensor t(o.grad.shape());
          ker::broadcast_binary(ker::BinOp::mul, o.grad.data(), o.grad.shape(), o.val.data(),
                                o.val.shape(), t.data(), o.grad.shape());
          Tensor t2(o.grad.shape());
          ker::broadcast_binary(ker::BinOp::div, t.data(), t.shape(), bv->val.data(), bv->shape(),
                                t2.data(), t2.shape());
          ker::scale(t2.data(), -1.0, t2.data(), t2.numel());
          accum_bcast(*bv, t2);
        }
      };
      break;
  }
  return make_node(std::move(out), {a, b}, std::move(back), name);
}

}  // namespace

Var constant(Tensor t, const char* name) {
  auto n = std::make_shared<Node>();
  n->val = std::move(t);
  n->op = name;
  n->requires_grad = false;
  return n;
}

Var leaf(Tensor t, const char* name) {
  auto n = std::make_shared<Node>();
  n->val = std::move(t);
  n->op = name;
  n->requires_grad = true;
  return n;
}

Tensor& ensure_grad(Node& n) {
  if (!n.grad_ready) {
    n.grad = Tensor(n.val.shape());
    n.grad_ready = true;
  }
  return n.grad;
}

void zero_grad(const Var& v) {
  v->grad = Tensor();
  v->grad_ready = false;
}

void backward(const Var& root) {
  require(root->numel() == 1, ErrorCategory::internal, "backward() root must be scalar");
  // iterative topological order
  std::vector<Node*> order;
  std::vector<std::pair<Node*, std::size_t>> stack;
  std::unordered_set<Node*> visited;
  if (!root->requires_grad) return;
  stack.push_back({root.get(), 0});
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    bool descended = false;
    while (i < n->parents.size()) {
      Node* p = n->parents[i].get();
      ++i;
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
        descended = true;
        break;
      }
    }
    if (!descended && (stack.back().second >= stack.back().first->parents.size())) {
      order.push_back(stack.back().first);
      stack.pop_back();
    }
  }
  ensure_grad(*root).data()[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backfn && n->grad_ready) n->backfn(*n);
  }
}

bool all_finite(const Tensor& t) {
  const double* p = t.data();
  for (i64 i = 0; i < t.numel(); ++i)
    if (!std::isfinite(p[i])) return false;
  return true;
}

// ---- elementwise ----

Var add(const Var& a, const Var& b) { return binop(ker::BinOp::add, a, b, "add"); }
Var sub(const Var& a, const Var& b) { return binop(ker::BinOp::sub, a, b, "sub"); }
Var mul(const Var& a, const Var& b) { return binop(ker::BinOp::mul, a, b, "mul"); }
Var div(const Var& a, const Var& b) { return binop(ker::BinOp::div, a, b, "div"); }

Var scale(const Var& a, double c) {
  Tensor out(a->shape());
  ker::scale(a->val.data(), c, out.data(), out.numel());
  Var av = a;
  return make_node(std::move(out), {a},
                   [av, c](Node& o) {
                     if (!av->requires_grad) return;
                     Tensor& g = ensure_grad(*av);
                     ker::axpy(c, o.grad.data(), g.data(), g.numel());
                   },
                   "scale");
}

Var add_scalar(const Var& a, double c) {
  Tensor out = a->val.clone();
  double* p = out.data();
  for (i64 i = 0; i < out.numel(); ++i) p[i] += c;
  Var av = a;
  return make_node(std::move(out), {a},
                   [av](Node& o) {
                     if (!av->requires_grad) return;
                     Tensor& g = ensure_grad(*av);
                     ker::axpy(1.0, o.grad.data(), g.data(), g.numel());
                   },
                   "add_scalar");
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var sqrt(const Var& a) {
  Tensor out(a->shape());
  ker::vsqrt(a->val.data(), out.data(), out.numel());
  Var av = a;
  return make_node(std::move(out), {a},
                   [av](Node& o) {
                     if (!av->requires_grad) return;
                     // d sqrt(x) = 0.5 / sqrt(x)
                     Tensor& g = ensure_grad(*av);
                     const double* dy = o.grad.data();
                     const double* y = o.val.data();
                     double* dx = g.data();
                     for (i64 i = 0; i < g.numel(); ++i) dx[i] += 0.5 * dy[i] / y[i];
                   },
                   "sqrt");
}

Var square(const Var& a) {
  Tensor out(a->shape());
  ker::vsquare(a->val.data(), out.data(), out.numel());
  Var av = a;
  return make_node(std::move(out), {a},
                   [av](Node& o) {
                     if (!av->requires_grad) return;
                     Tensor& g = ensure_grad(*av);
                     const double* dy = o.grad.data();
                     const double* x = av->val.data();
                     double* dx = g.data();
                     for (i64 i = 0; i < g.numel(); ++i) dx[i] += 2.0 * x[i] * dy[i];
                   },
                   "square");
}

Var relu(const Var& a) {
  Tensor out(a->shape());
  ker::relu(a->val.data(), out.data(), out.numel());
  Var av = a;
  return make_node(std::move(out), {a},
                   [av](Node& o) {
                     if (!av->requires_grad) return;
                     Tensor& g = ensure_grad(*av);
                     ker::relu_bwd(av->val.data(), o.grad.data(), g.data(), g.numel());
                   },
                   "relu");
}

Var gelu(const Var& a) {
  Tensor out(a->shape());
  ker::gelu(a->val.data(), out.data(), out.numel());
  Var av = a;
  return make_node(std::move(out), {a},
                   [av](Node& o) {
                     if (!av->requires_grad) return;
                     Tensor& g = ensure_grad(*av);
                     ker::gelu_bwd(av->val.data(), o.grad.data(), g.data(), g.numel());
                   },
                   "gelu");
}

// ---- shape ----

Var reshape(const Var& a, std::vector<i64> shape) {
  // normalize a single -1
  i64 known = 1;
  int neg = -1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      neg = static_cast<int>(i);
    } else {
      known *= shape[i];
    }
  }
  if (neg >= 0) shape[static_cast<std::size_t>(neg)] = a->numel() / known;
  Tensor out = a->val.reshaped(shape);
  Var av = a;
  return make_node(std::move(out), {a},
                   [av](Node& o) {
                     if (!av->requires_grad) return;
                     Tensor& g = ensure_grad(*av);
                     ker::axpy(1.0, o.grad.data(), g.data(), g.numel());
                   },
                   "reshape");
}

namespace {

void permute_copy(const Tensor& in, Tensor& out, const std::vector<int>& perm) {
  const auto& ishape = in.shape();
  auto istr = strides_of(ishape);
  auto oshape = out.shape();
  auto ostr = strides_of(oshape);
  int nd = static_cast<int>(ishape.size());
  const double* src = in.data();
  double* dst = out.data();
  i64 total = in.numel();
  for (i64 o = 0; o < total; ++o) {
    i64 rem = o, isrc = 0;
    for (int d = 0; d < nd; ++d) {
      i64 cd = rem / ostr[d];
      rem -= cd * ostr[d];
      isrc += cd * istr[perm[static_cast<std::size_t>(d)]];
    }
    dst[o] = src[isrc];
  }
}

}  // namespace

Var permute(const Var& a, const std::vector<int>& perm) {
  int nd = a->val.ndim();
  require(static_cast<int>(perm.size()) == nd, ErrorCategory::internal, "permute rank mismatch");
  std::vector<i64> oshape(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) oshape[i] = a->shape()[perm[i]];
  Tensor out(oshape);
  permute_copy(a->val, out, perm);
  std::vector<int> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = static_cast<int>(i);
  Var av = a;
  return make_node(std::move(out), {a},
                   [av, inv](Node& o) {
                     if (!av->requires_grad) return;
                     Tensor t(av->shape());
                     permute_copy(o.grad, t, inv);
                     Tensor& g = ensure_grad(*av);
                     ker::axpy(1.0, t.data(), g.data(), g.numel());
                   },
                   "permute");
}

namespace {

struct AxisView {
  i64 outer, len, inner;
};

AxisView axis_view(const std::vector<i64>& shape, int axis) {
  AxisView v{1, shape[axis], 1};
  for (int i = 0; i < axis; ++i) v.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

}  // namespace

Var slice(const Var& a, int axis, i64 start, i64 len) {
  if (axis < 0) axis += a->val.ndim();
  AxisView v = axis_view(a->shape(), axis);
  require(start >= 0 && start + len <= v.len, ErrorCategory::internal, "slice out of range");
  std::vector<i64> oshape = a->shape();
  oshape[axis] = len;
  Tensor out(oshape);
  const double* src = a->val.data();
  double* dst = out.data();
  for (i64 o = 0; o < v.outer; ++o)
    std::memcpy(dst + o * len * v.inner, src + (o * v.len + start) * v.inner,
                sizeof(double) * static_cast<std::size_t>(len * v.inner));
  Var av = a;
  return make_node(std::move(out), {a},
                   [av, v, start, len](Node& o) {
                     if (!av->requires_grad) return;
                     Tensor& g = ensure_grad(*av);
                     const double* dy = o.grad.data();
                     double* dx = g.data();
                     for (i64 q = 0; q < v.outer; ++q) {
                       double* row = dx + (q * v.len + start) * v.inner;
                       const double* srcrow = dy + q * len * v.inner;
                       for (i64 j = 0; j < len * v.inner; ++j) row[j] += srcrow[j];
                     }
                   },
                   "slice");
}

Var concat(const std::vector<Var>& parts, int axis) {
  require(!parts.empty(), ErrorCategory::internal, "concat of nothing");
  if (axis < 0) axis += parts[0]->val.ndim();
  std::vector<i64> oshape = parts[0]->shape();
  i64 total_axis = 0;
  for (const auto& p : parts) total_axis += p->shape()[axis];
  oshape[axis] = total_axis;
  Tensor out(oshape);
  AxisView ov = axis_view(oshape, axis);
  double* dst = out.data();
  i64 off = 0;
  for (const auto& p : parts) {
    AxisView pv = axis_view(p->shape(), axis);
    const double* src = p->val.data();
    for (i64 q = 0; q < ov.outer; ++q)
      std::memcpy(dst + (q * ov.len + off) * ov.inner, src + q * pv.len * pv.inner,
                  sizeof(double) * static_cast<std::size_t>(pv.len * pv.inner));
    off += pv.len;
  }
  std::vector<Var> ps = parts;
  return make_node(std::move(out), parts,
                   [ps, ov](Node& o) {
                     const double* dy = o.grad.data();
                     i64 off2 = 0;
                     for (const auto& p : ps) {
                       AxisView pv{ov.outer, p->numel() / (ov.outer * ov.inner), ov.inner};
                       if (p->requires_grad) {
                         Tensor& g = ensure_grad(*p);
                         double* dx = g.data();
                         for (i64 q = 0; q < ov.outer; ++q) {
                           const double* srcrow = dy + (q * ov.len + off2) * ov.inner;
                           double* dstrow = dx + q * pv.len * pv.inner;
                           for (i64 j = 0; j < pv.len * pv.inner; ++j) dstrow[j] += srcrow[j];
                         }
                       }
                       off2 += pv.len;
                     }
                   },
                   "concat");
}

Var tile_rows(const Var& row, i64 n) {
  i64 d = row->numel();
  Tensor out({n, d});
  double* dst = out.data();
  const double* src = row->val.data();
  for (i64 i = 0; i < n; ++i)
    std::memcpy(dst + i * d, src, sizeof(double) * static_cast<std::size_t>(d));
  Var rv = row;
  return make_node(std::move(out), {row},
                   [rv, n, d](Node& o) {
                     if (!rv->requires_grad) return;
                     Tensor& g = ensure_grad(*rv);
                     ker::col_sum(o.grad.data(), g.data(), n, d, true);
                   },
                   "tile_rows");
}

// ---- reductions ----

Var sum(const Var& a, const std::vector<int>& axes, bool keepdims) {
  int nd = a->val.ndim();
  std::vector<bool> red(nd, false);
  for (int ax : axes) {
    if (ax < 0) ax += nd;
    red[ax] = true;
  }
  std::vector<i64> kshape = a->shape();
  for (int i = 0; i < nd; ++i)
    if (red[i]) kshape[i] = 1;
  Tensor out(kshape);
  ker::reduce_to_shape(a->val.data(), a->shape(), out.data(), kshape, false);
  Var av = a;
  std::vector<i64> kshape_copy = kshape;
  Var node = make_node(std::move(out), {a},
                       [av, kshape_copy](Node& o) {
                         if (!av->requires_grad) return;
                         Tensor& g = ensure_grad(*av);
                         // g += broadcast(o.grad)
                         ker::broadcast_binary(ker::BinOp::add, g.data(), g.shape(), o.grad.data(),
                                               kshape_copy, g.data(), g.shape());
                       },
                       "sum");
  if (!keepdims) {
    std::vector<i64> sq;
    for (int i = 0; i < nd; ++i)
      if (!red[i]) sq.push_back(a->shape()[i]);
    node = reshape(node, sq);
  }
  return node;
}

Var mean(const Var& a, const std::vector<int>& axes, bool keepdims) {
  int nd = a->val.ndim();
  i64 count = 1;
  for (int ax : axes) {
    int x = ax < 0 ? ax + nd : ax;
    count *= a->shape()[x];
  }
  return scale(sum(a, axes, keepdims), 1.0 / static_cast<double>(count));
}

Var sum_all(const Var& a) {
  std::vector<int> axes(a->val.ndim());
  for (int i = 0; i < a->val.ndim(); ++i) axes[i] = i;
  return reshape(sum(a, axes, true), std::vector<i64>{});
}

Var mean_all(const Var& a) { return scale(sum_all(a), 1.0 / static_cast<double>(a->numel())); }

// ---- linear algebra ----

Var matmul(const Var& a, const Var& b) {
  i64 m = a->shape()[0], k = a->shape()[1], n = b->shape()[1];
  require(b->shape()[0] == k, ErrorCategory::internal, "matmul shape mismatch");
  Tensor out({m, n});
  ker::gemm_nn(a->val.data(), b->val.data(), out.data(), m, k, n, false);
  Var av = a, bv = b;
  return make_node(std::move(out), {a, b},
                   [av, bv, m, k, n](Node& o) {
                     if (av->requires_grad) {
                       Tensor& g = ensure_grad(*av);
                       ker::gemm_nt(o.grad.data(), bv->val.data(), g.data(), m, n, k, true);
                     }
                     if (bv->requires_grad) {
                       Tensor& g = ensure_grad(*bv);
                       ker::gemm_tn(av->val.data(), o.grad.data(), g.data(), k, m, n, true);
                     }
                   },
                   "matmul");
}

Var linear(const Var& x, const Var& w, const Var& b) {
  i64 kk = w->shape()[0], n = w->shape()[1];
  require(x->shape().back() == kk, ErrorCategory::internal,
          "linear: input dim " + std::to_string(x->shape().back()) + " != weight in-dim " +
              std::to_string(kk));
  i64 rows = x->numel() / kk;
  std::vector<i64> oshape = x->shape();
  oshape.back() = n;
  Tensor out(oshape);
  ker::gemm_nn(x->val.data(), w->val.data(), out.data(), rows, kk, n, false);
  if (b) ker::add_bias_rows(out.data(), b->val.data(), rows, n);
  std::vector<Var> parents = {x, w};
  if (b) parents.push_back(b);
  Var xv = x, wv = w, bvv = b;
  return make_node(std::move(out), parents,
                   [xv, wv, bvv, rows, kk, n](Node& o) {
                     if (xv->requires_grad) {
                       Tensor& g = ensure_grad(*xv);
                       ker::gemm_nt(o.grad.data(), wv->val.data(), g.data(), rows, n, kk, true);
                     }
                     if (wv->requires_grad) {
                       Tensor& g = ensure_grad(*wv);
                       ker::gemm_tn(xv->val.data(), o.grad.data(), g.data(), kk, rows, n, true);
                     }
                     if (bvv && bvv->requires_grad) {
                       Tensor& g = ensure_grad(*bvv);
                       ker::col_sum(o.grad.data(), g.data(), rows, n, true);
                     }
                   },
                   "linear");
}

Var bmm(const Var& a, const Var& b) {
  i64 g = a->shape()[0], m = a->shape()[1], k = a->shape()[2], n = b->shape()[2];
  require(b->shape()[0] == g && b->shape()[1] == k, ErrorCategory::internal, "bmm shape mismatch");
  Tensor out({g, m, n});
  ker::bmm_nn(a->val.data(), b->val.data(), out.data(), g, m, k, n, false);
  Var av = a, bv = b;
  return make_node(std::move(out), {a, b},
                   [av, bv, g, m, k, n](Node& o) {
                     if (av->requires_grad) {
                       Tensor& gr = ensure_grad(*av);
                       ker::bmm_nt(o.grad.data(), bv->val.data(), gr.data(), g, m, n, k, true);
                     }
                     if (bv->requires_grad) {
                       Tensor& gr = ensure_grad(*bv);
                       ker::bmm_tn(av->val.data(), o.grad.data(), gr.data(), g, m, k, n, true);
                     }
                   },
                   "bmm");
}

Var bmm_nt(const Var& a, const Var& b) {
  i64 g = a->shape()[0], m = a->shape()[1], k = a->shape()[2], n = b->shape()[1];
  require(b->shape()[0] == g && b->shape()[2] == k, ErrorCategory::internal,
          "bmm_nt shape mismatch");
  Tensor out({g, m, n});
  ker::bmm_nt(a->val.data(), b->val.data(), out.data(), g, m, k, n, false);
  Var av = a, bv = b;
  return make_node(std::move(out), {a, b},
                   [av, bv, g, m, k, n](Node& o) {
                     if (av->requires_grad) {
                       // dA[g,m,k] = sum_n dS[g,m,n] * B[g,n,k]
                       Tensor& gr = ensure_grad(*av);
                       ker::bmm_nn(o.grad.data(), bv->val.data(), gr.data(), g, m, n, k, true);
                     }
                     if (bv->requires_grad) {
                       // dB[g,n,k] = sum_m dS[g,m,n] * A[g,m,k]
                       Tensor& gr = ensure_grad(*bv);
                       ker::bmm_tn(o.grad.data(), av->val.data(), gr.data(), g, n, m, k, true);
                     }
                   },
                   "bmm_nt");
}

// ---- nn ----

Var softmax(const Var& a) {
  i64 c = a->shape().back();
  i64 rows = a->numel() / c;
  Tensor out(a->shape());
  ker::softmax_rows(a->val.data(), out.data(), rows, c);
  Var av = a;
  return make_node(std::move(out), {a},
                   [av, rows, c](Node& o) {
                     if (!av->requires_grad) return;
                     Tensor& g = ensure_grad(*av);
                     ker::softmax_rows_bwd(o.val.data(), o.grad.data(), g.data(), rows, c);
                   },
                   "softmax");
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  i64 c = x->shape().back();
  i64 rows = x->numel() / c;
  Tensor out(x->shape());
  auto mean_t = std::make_shared<Tensor>(std::vector<i64>{rows});
  auto rstd_t = std::make_shared<Tensor>(std::vector<i64>{rows});
  ker::layernorm_rows(x->val.data(), gamma->val.data(), beta->val.data(), eps, out.data(),
                      mean_t->data(), rstd_t->data(), rows, c);
  Var xv = x, gv = gamma, bv = beta;
  return make_node(std::move(out), {x, gamma, beta},
                   [xv, gv, bv, mean_t, rstd_t, rows, c](Node& o) {
                     // fused backward computes all three grads; unneeded ones
                     // go to scratch
                     Tensor dg({c}), db({c});
                     Tensor scratch;
                     double* dxptr;
                     if (xv->requires_grad) {
                       dxptr = ensure_grad(*xv).data();
                     } else {
                       scratch = Tensor(xv->shape());
                       dxptr = scratch.data();
                     }
                     ker::layernorm_rows_bwd(xv->val.data(), gv->val.data(), mean_t->data(),
                                             rstd_t->data(), o.grad.data(), dxptr, dg.data(),
                                             db.data(), rows, c);
                     if (gv->requires_grad) ker::axpy(1.0, dg.data(), ensure_grad(*gv).data(), c);
                     if (bv->requires_grad) ker::axpy(1.0, db.data(), ensure_grad(*bv).data(), c);
                   },
                   "layer_norm");
}

Var batchnorm_rows(const Var& x, const Var& gamma, const Var& beta, Tensor& run_mean,
                   Tensor& run_var, bool training, double momentum, double eps) {
  i64 bsz = x->shape()[0], f = x->shape()[1];
  Tensor out({bsz, f});
  auto mu = std::make_shared<Tensor>(std::vector<i64>{f});
  auto rstd = std::make_shared<Tensor>(std::vector<i64>{f});
  const double* xp = x->val.data();
  double* op = out.data();
  if (training) {
    for (i64 j = 0; j < f; ++j) {
      double m = 0.0;
      for (i64 r = 0; r < bsz; ++r) m += xp[r * f + j];
      m /= static_cast<double>(bsz);
      double v = 0.0;
      for (i64 r = 0; r < bsz; ++r) {
        double d = xp[r * f + j] - m;
        v += d * d;
      }
      v /= static_cast<double>(bsz);
      mu->data()[j] = m;
      rstd->data()[j] = 1.0 / std::sqrt(v + eps);
      double unbiased = bsz > 1 ? v * static_cast<double>(bsz) / static_cast<double>(bsz - 1) : v;
      run_mean.data()[j] = (1.0 - momentum) * run_mean.data()[j] + momentum * m;
      run_var.data()[j] = (1.0 - momentum) * run_var.data()[j] + momentum * unbiased;
    }
  } else {
    for (i64 j = 0; j < f; ++j) {
      mu->data()[j] = run_mean.data()[j];
      rstd->data()[j] = 1.0 / std::sqrt(run_var.data()[j] + eps);
    }
  }
  const double* gp = gamma->val.data();
  const double* bp = beta->val.data();
  for (i64 r = 0; r < bsz; ++r)
    for (i64 j = 0; j < f; ++j)
      op[r * f + j] = (xp[r * f + j] - mu->data()[j]) * rstd->data()[j] * gp[j] + bp[j];
  Var xv = x, gv = gamma, bv = beta;
  return make_node(
      std::move(out), {x, gamma, beta},
      [xv, gv, bv, mu, rstd, bsz, f, training](Node& o) {
        const double* dy = o.grad.data();
        const double* xp2 = xv->val.data();
        const double* gp2 = gv->val.data();
        for (i64 j = 0; j < f; ++j) {
          double m = mu->data()[j], rs = rstd->data()[j];
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (i64 r = 0; r < bsz; ++r) {
            double xhat = (xp2[r * f + j] - m) * rs;
            sum_dy += dy[r * f + j];
            sum_dy_xhat += dy[r * f + j] * xhat;
          }
          if (gv->requires_grad) ensure_grad(*gv).data()[j] += sum_dy_xhat;
          if (bv->requires_grad) ensure_grad(*bv).data()[j] += sum_dy;
          if (xv->requires_grad) {
            Tensor& gx = ensure_grad(*xv);
            for (i64 r = 0; r < bsz; ++r) {
              double xhat = (xp2[r * f + j] - m) * rs;
              double g;
              if (training) {
                g = gp2[j] * rs *
                    (dy[r * f + j] - sum_dy / static_cast<double>(bsz) -
                     xhat * sum_dy_xhat / static_cast<double>(bsz));
              } else {
                g = gp2[j] * rs * dy[r * f + j];
              }
              gx.data()[r * f + j] += g;
            }
          }
        }
      },
      "batchnorm");
}

Var cross_entropy_logits(const Var& logits, const std::vector<i64>& labels) {
  i64 c = logits->shape().back();
  i64 rows = logits->numel() / c;
  require(static_cast<i64>(labels.size()) == rows, ErrorCategory::invalid_input,
          "cross-entropy: label count does not match logit rows");
  for (i64 r = 0; r < rows; ++r)
    require(labels[r] >= 0 && labels[r] < c, ErrorCategory::invalid_input,
            "cross-entropy: label out of range");
  auto probs = std::make_shared<Tensor>(logits->shape());
  ker::softmax_rows(logits->val.data(), probs->data(), rows, c);
  const double* lp = logits->val.data();
  double loss = 0.0;
  for (i64 r = 0; r < rows; ++r) {
    const double* row = lp + r * c;
    double mx = row[0];
    for (i64 j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double lse = 0.0;
    for (i64 j = 0; j < c; ++j) lse += std::exp(row[j] - mx);
    loss += std::log(lse) + mx - row[labels[r]];
  }
  loss /= static_cast<double>(rows);
  Var lv = logits;
  return make_node(Tensor::scalar(loss), {logits},
                   [lv, probs, labels, rows, c](Node& o) {
                     if (!lv->requires_grad) return;
                     double s = o.grad.data()[0] / static_cast<double>(rows);
                     Tensor& g = ensure_grad(*lv);
                     double* gp = g.data();
                     const double* pp = probs->data();
                     for (i64 r = 0; r < rows; ++r) {
                       for (i64 j = 0; j < c; ++j) gp[r * c + j] += s * pp[r * c + j];
                       gp[r * c + labels[r]] -= s;
                     }
                   },
                   "cross_entropy");
}

// ---- spatial ----

namespace {

kernels::Conv3dDims conv_dims(const std::vector<i64>& xs, const std::vector<i64>& ws, i64 stride,
                              i64 pad, bool depthwise) {
  kernels::Conv3dDims d;
  d.b = xs[0];
  d.iz = xs[1];
  d.iy = xs[2];
  d.ix = xs[3];
  d.ci = xs[4];
  d.kz = ws[0];
  d.ky = ws[1];
  d.kx = ws[2];
  d.stride = stride;
  d.pad = pad;
  d.co = depthwise ? d.ci : ws[4];
  d.oz = (d.iz + 2 * pad - d.kz) / stride + 1;
  d.oy = (d.iy + 2 * pad - d.ky) / stride + 1;
  d.ox = (d.ix + 2 * pad - d.kx) / stride + 1;
  return d;
}

}  // namespace

Var conv3d(const Var& x, const Var& w, const Var& b, i64 stride, i64 pad) {
  auto d = conv_dims(x->shape(), w->shape(), stride, pad, false);
  require(w->shape()[3] == d.ci, ErrorCategory::internal, "conv3d channel mismatch");
  Tensor out({d.b, d.oz, d.oy, d.ox, d.co});
  ker::conv3d_fwd(x->val.data(), w->val.data(), b ? b->val.data() : nullptr, out.data(), d);
  std::vector<Var> parents = {x, w};
  if (b) parents.push_back(b);
  Var xv = x, wv = w, bv = b;
  return make_node(std::move(out), parents,
                   [xv, wv, bv, d](Node& o) {
                     if (xv->requires_grad) {
                       Tensor& g = ensure_grad(*xv);
                       ker::conv3d_bwd_input(o.grad.data(), wv->val.data(), g.data(), d);
                     }
                     if (wv->requires_grad) {
                       Tensor& g = ensure_grad(*wv);
                       ker::conv3d_bwd_weight(xv->val.data(), o.grad.data(), g.data(), d);
                     }
                     if (bv && bv->requires_grad) {
                       Tensor& g = ensure_grad(*bv);
                       ker::conv3d_bwd_bias(o.grad.data(), g.data(), d.b * d.oz * d.oy * d.ox, d.co);
                     }
                   },
                   "conv3d");
}

Var dwconv3d(const Var& x, const Var& w, const Var& b, i64 pad) {
  auto d = conv_dims(x->shape(), w->shape(), 1, pad, true);
  require(w->shape()[3] == d.ci, ErrorCategory::internal, "dwconv3d channel mismatch");
  Tensor out({d.b, d.oz, d.oy, d.ox, d.co});
  ker::dwconv3d_fwd(x->val.data(), w->val.data(), b ? b->val.data() : nullptr, out.data(), d);
  std::vector<Var> parents = {x, w};
  if (b) parents.push_back(b);
  Var xv = x, wv = w, bv = b;
  return make_node(std::move(out), parents,
                   [xv, wv, bv, d](Node& o) {
                     if (xv->requires_grad) {
                       Tensor& g = ensure_grad(*xv);
                       ker::dwconv3d_bwd_input(o.grad.data(), wv->val.data(), g.data(), d);
                     }
                     if (wv->requires_grad) {
                       Tensor& g = ensure_grad(*wv);
                       ker::dwconv3d_bwd_weight(xv->val.data(), o.grad.data(), g.data(), d);
                     }
                     if (bv && bv->requires_grad) {
                       Tensor& g = ensure_grad(*bv);
                       ker::conv3d_bwd_bias(o.grad.data(), g.data(), d.b * d.oz * d.oy * d.ox, d.co);
                     }
                   },
                   "dwconv3d");
}

Var deconv3d(const Var& x, const Var& w, const Var& b, i64 stride) {
  kernels::Conv3dDims d;
  const auto& xs = x->shape();
  const auto& ws = w->shape();
  d.b = xs[0];
  d.iz = xs[1];
  d.iy = xs[2];
  d.ix = xs[3];
  d.ci = xs[4];
  d.kz = ws[0];
  d.ky = ws[1];
  d.kx = ws[2];
  d.co = ws[4];
  d.stride = stride;
  d.pad = 0;
  d.oz = (d.iz - 1) * stride + d.kz;
  d.oy = (d.iy - 1) * stride + d.ky;
  d.ox = (d.ix - 1) * stride + d.kx;
  require(ws[3] == d.ci, ErrorCategory::internal, "deconv3d channel mismatch");
  Tensor out({d.b, d.oz, d.oy, d.ox, d.co});
  ker::deconv3d_fwd(x->val.data(), w->val.data(), b ? b->val.data() : nullptr, out.data(), d);
  std::vector<Var> parents = {x, w};
  if (b) parents.push_back(b);
  Var xv = x, wv = w, bv = b;
  return make_node(std::move(out), parents,
                   [xv, wv, bv, d](Node& o) {
                     if (xv->requires_grad) {
                       Tensor& g = ensure_grad(*xv);
                       ker::deconv3d_bwd_input(o.grad.data(), wv->val.data(), g.data(), d);
                     }
                     if (wv->requires_grad) {
                       Tensor& g = ensure_grad(*wv);
                       ker::deconv3d_bwd_weight(xv->val.data(), o.grad.data(), g.data(), d);
                     }
                     if (bv && bv->requires_grad) {
                       Tensor& g = ensure_grad(*bv);
                       ker::conv3d_bwd_bias(o.grad.data(), g.data(), d.b * d.oz * d.oy * d.ox, d.co);
                     }
                   },
                   "deconv3d");
}

Var upsample_nearest(const Var& x, i64 factor) {
  const auto& s = x->shape();
  i64 b = s[0], iz = s[1], iy = s[2], ix = s[3], c = s[4];
  Tensor out({b, iz * factor, iy * factor, ix * factor, c});
  ker::upsample_nearest3d_fwd(x->val.data(), out.data(), b, iz, iy, ix, c, factor);
  Var xv = x;
  return make_node(std::move(out), {x},
                   [xv, b, iz, iy, ix, c, factor](Node& o) {
                     if (!xv->requires_grad) return;
                     Tensor& g = ensure_grad(*xv);
                     ker::upsample_nearest3d_bwd(o.grad.data(), g.data(), b, iz, iy, ix, c, factor);
                   },
                   "upsample_nearest");
}

Var upsample_trilinear(const Var& x, i64 oz, i64 oy, i64 ox) {
  const auto& s = x->shape();
  i64 b = s[0], iz = s[1], iy = s[2], ix = s[3], c = s[4];
  Tensor out({b, oz, oy, ox, c});
  ker::upsample_trilinear3d_fwd(x->val.data(), out.data(), b, iz, iy, ix, c, oz, oy, ox);
  Var xv = x;
  return make_node(std::move(out), {x},
                   [xv, b, iz, iy, ix, c, oz, oy, ox](Node& o) {
                     if (!xv->requires_grad) return;
                     Tensor& g = ensure_grad(*xv);
                     ker::upsample_trilinear3d_bwd(o.grad.data(), g.data(), b, iz, iy, ix, c, oz, oy,
                                                   ox);
                   },
                   "upsample_trilinear");
}

Var avgpool_to(const Var& x, i64 oz, i64 oy, i64 ox) {
  const auto& s = x->shape();
  i64 b = s[0], iz = s[1], iy = s[2], ix = s[3], c = s[4];
  Tensor out({b, oz, oy, ox, c});
  ker::avgpool3d_to_fwd(x->val.data(), out.data(), b, iz, iy, ix, c, oz, oy, ox);
  Var xv = x;
  return make_node(std::move(out), {x},
                   [xv, b, iz, iy, ix, c, oz, oy, ox](Node& o) {
                     if (!xv->requires_grad) return;
                     Tensor& g = ensure_grad(*xv);
                     ker::avgpool3d_to_bwd(o.grad.data(), g.data(), b, iz, iy, ix, c, oz, oy, ox);
                   },
                   "avgpool_to");
}

// ---- indexing ----

Var gather_rows(const Var& x, const std::vector<i64>& idx, i64 b, i64 m) {
  const auto& s = x->shape();
  require(s.size() == 3, ErrorCategory::internal, "gather_rows expects [B,N,D]");
  i64 n = s[1], d = s[2];
  require(static_cast<i64>(idx.size()) == b * m, ErrorCategory::internal,
          "gather_rows index count mismatch");
  Tensor out({b, m, d});
  auto idx_copy = std::make_shared<std::vector<i64>>(idx);
  ker::gather_rows_fwd(x->val.data(), idx_copy->data(), out.data(), b, n, m, d);
  Var xv = x;
  return make_node(std::move(out), {x},
                   [xv, idx_copy, b, n, m, d](Node& o) {
                     if (!xv->requires_grad) return;
                     Tensor& g = ensure_grad(*xv);
                     ker::gather_rows_bwd(o.grad.data(), idx_copy->data(), g.data(), b, n, m, d);
                   },
                   "gather_rows");
}

Var zone_mean(const Var& x, const std::vector<std::int32_t>& zones, const std::vector<i64>& counts) {
  const auto& s = x->shape();
  require(s.size() == 2, ErrorCategory::internal, "zone_mean expects [V,F]");
  i64 v = s[0], f = s[1];
  require(static_cast<i64>(zones.size()) == v, ErrorCategory::internal,
          "zone_mean zone map size mismatch");
  i64 nz = static_cast<i64>(counts.size());
  Tensor out({nz, f});
  auto zcopy = std::make_shared<std::vector<std::int32_t>>(zones);
  auto ccopy = std::make_shared<std::vector<i64>>(counts);
  ker::zone_mean_fwd(x->val.data(), zcopy->data(), ccopy->data(), out.data(), v, f, nz);
  Var xv = x;
  return make_node(std::move(out), {x},
                   [xv, zcopy, ccopy, v, f, nz](Node& o) {
                     if (!xv->requires_grad) return;
                     Tensor& g = ensure_grad(*xv);
                     ker::zone_mean_bwd(o.grad.data(), zcopy->data(), ccopy->data(), g.data(), v, f,
                                        nz);
                   },
                   "zone_mean");
}

}  // namespace voxmae::ad
