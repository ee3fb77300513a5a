#pragma once

#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "voxmae/autodiff.hpp"
#include "voxmae/rng.hpp"
#include "voxmae/tensor.hpp"

namespace testutil {

using voxmae::i64;
using voxmae::Rng;
using voxmae::Tensor;

inline Tensor random_tensor(std::vector<i64> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  double* p = t.data();
  for (i64 i = 0; i < t.numel(); ++i) p[i] = rng.uniform(lo, hi);
  return t;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.numel() == b.numel());
  double m = 0.0;
  for (i64 i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) return false;
  for (i64 i = 0; i < a.numel(); ++i)
    if (a.data()[i] != b.data()[i]) return false;
  return true;
}

// Central finite-difference check of d(loss)/d(leaf) for sampled coordinates.
// build() must rebuild the whole graph from the leaves' current values and
// return a scalar loss.
inline void gradcheck(const std::function<voxmae::ad::Var()>& build,
                      std::vector<voxmae::ad::Var> leaves, Rng& rng, double tol = 2e-6,
                      int samples_per_leaf = 4, double h = 1e-5) {
  for (auto& l : leaves) voxmae::ad::zero_grad(l);
  voxmae::ad::Var loss = build();
  voxmae::ad::backward(loss);
  for (auto& l : leaves) {
    REQUIRE(l->grad_ready);
    for (int s = 0; s < samples_per_leaf; ++s) {
      i64 i = static_cast<i64>(rng.uniform_below(static_cast<std::uint64_t>(l->numel())));
      double orig = l->val.data()[i];
      double step = h * std::max(1.0, std::abs(orig));
      l->val.data()[i] = orig + step;
      double lp = build()->val.item();
      l->val.data()[i] = orig - step;
      double lm = build()->val.item();
      l->val.data()[i] = orig;
      double fd = (lp - lm) / (2.0 * step);
      double an = l->grad.data()[i];
      // the floor keeps FD roundoff noise on near-zero coordinates from
      // dominating the relative error
      double denom = std::max({1e-3, std::abs(fd), std::abs(an)});
      INFO("leaf=", std::string(l->op), " coord=", i, " fd=", fd, " analytic=", an);
      CHECK(std::abs(fd - an) / denom < tol);
    }
  }
}

}  // namespace testutil
