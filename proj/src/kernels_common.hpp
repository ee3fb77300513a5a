#pragma once

#include <cmath>
#include <cstring>
#include <vector>

#include "voxmae/kernels.hpp"

// Index helpers shared by both kernel backends.

namespace voxmae::kernels::detail {

// Right-aligned broadcast strides: stride 0 where `shape` is 1 or absent.
inline std::vector<i64> bcast_strides(const std::vector<i64>& shape, const std::vector<i64>& oshape) {
  int no = static_cast<int>(oshape.size());
  int ns = static_cast<int>(shape.size());
  std::vector<i64> st(no, 0);
  std::vector<i64> own = strides_of(shape);
  for (int i = 0; i < ns; ++i) {
    int oi = no - ns + i;
    st[oi] = (shape[i] == 1) ? 0 : own[i];
  }
  return st;
}

inline double apply_binop(BinOp op, double a, double b) {
  switch (op) {
    case BinOp::add: return a + b;
    case BinOp::sub: return a - b;
    case BinOp::mul: return a * b;
    case BinOp::div: return a / b;
  }
  return 0.0;
}

inline double gelu_val(double x) { return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475244)); }

inline double gelu_grad(double x) {
  // d/dx [x * Phi(x)] = Phi(x) + x * phi(x)
  double phi = 0.3989422804014326779 * std::exp(-0.5 * x * x);
  double Phi = 0.5 * (1.0 + std::erf(x * 0.7071067811865475244));
  return Phi + x * phi;
}

// Adaptive pooling bin boundaries (floor/ceil rule).
inline i64 bin_start(i64 o, i64 in, i64 out) { return (o * in) / out; }
inline i64 bin_end(i64 o, i64 in, i64 out) { return ((o + 1) * in + out - 1) / out; }

// Source coordinate for center-aligned trilinear resize.
inline double resize_src(i64 o, i64 in, i64 out) {
  if (in == out) return static_cast<double>(o);
  return (static_cast<double>(o) + 0.5) * (static_cast<double>(in) / static_cast<double>(out)) - 0.5;
}

}  // namespace voxmae::kernels::detail
