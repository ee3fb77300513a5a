#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "voxmae/kernels.hpp"
#include "voxmae/tensor.hpp"

// Define-by-run reverse-mode autodiff over Tensor. Graphs are rebuilt every
// step; parameters are long-lived leaf nodes. All heavy math goes through the
// kernels layer, so gradients inherit its determinism guarantees.

namespace voxmae::ad {

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor val;
  Tensor grad;
  bool requires_grad = false;
  bool grad_ready = false;
  std::vector<Var> parents;
  std::function<void(Node&)> backfn;
  const char* op = "";

  const std::vector<i64>& shape() const { return val.shape(); }
  i64 numel() const { return val.numel(); }
};

Var constant(Tensor t, const char* name = "const");
Var leaf(Tensor t, const char* name = "leaf");  // differentiable (parameter/input under test)

Tensor& ensure_grad(Node& n);
void zero_grad(const Var& v);
void backward(const Var& root);

bool all_finite(const Tensor& t);

// ---- elementwise / broadcast ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
Var neg(const Var& a);
Var sqrt(const Var& a);
Var square(const Var& a);
Var relu(const Var& a);
Var gelu(const Var& a);

// ---- shape ----
Var reshape(const Var& a, std::vector<i64> shape);
Var permute(const Var& a, const std::vector<int>& perm);
Var slice(const Var& a, int axis, i64 start, i64 len);
Var concat(const std::vector<Var>& parts, int axis);
Var tile_rows(const Var& row, i64 n);  // [D] -> [n, D]

// ---- reductions ----
Var sum(const Var& a, const std::vector<int>& axes, bool keepdims);
Var mean(const Var& a, const std::vector<int>& axes, bool keepdims);
Var sum_all(const Var& a);
Var mean_all(const Var& a);

// ---- linear algebra ----
Var matmul(const Var& a, const Var& b);                 // [M,K]x[K,N]
Var linear(const Var& x, const Var& w, const Var& b);   // x[...,K] * w[K,N] + b[N]
Var bmm(const Var& a, const Var& b);                    // [G,M,K]x[G,K,N]
Var bmm_nt(const Var& a, const Var& b);                 // [G,M,K]x[G,N,K]^T

// ---- nn ----
Var softmax(const Var& a);  // last dim
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-6);
Var batchnorm_rows(const Var& x, const Var& gamma, const Var& beta, Tensor& run_mean,
                   Tensor& run_var, bool training, double momentum = 0.1, double eps = 1e-5);
Var cross_entropy_logits(const Var& logits, const std::vector<i64>& labels);  // mean over rows

// ---- spatial (channels-last: [B, Z, Y, X, C]) ----
Var conv3d(const Var& x, const Var& w, const Var& b, i64 stride, i64 pad);
Var dwconv3d(const Var& x, const Var& w, const Var& b, i64 pad);
Var deconv3d(const Var& x, const Var& w, const Var& b, i64 stride);
Var upsample_nearest(const Var& x, i64 factor);
Var upsample_trilinear(const Var& x, i64 oz, i64 oy, i64 ox);
Var avgpool_to(const Var& x, i64 oz, i64 oy, i64 ox);

// ---- indexing ----
Var gather_rows(const Var& x, const std::vector<i64>& idx, i64 b, i64 m);  // x[B,N,D] -> [B,M,D]
Var zone_mean(const Var& x, const std::vector<std::int32_t>& zones,
              const std::vector<i64>& counts);  // x[V,F] -> [NZ,F]

}  // namespace voxmae::ad
