#include <doctest.h>

#include <cstring>
#include <vector>

#include "test_helpers.hpp"
#include "voxmae/kernels.hpp"

using namespace voxmae;
using testutil::bitwise_equal;
using testutil::random_tensor;

namespace {

// Runs fn once under each backend and requires bit-identical outputs.
template <typename Fn>
void check_backends(Fn&& fn) {
  if (!kernels::parallel_available()) return;
  kernels::Backend saved = kernels::backend();
  kernels::set_backend(kernels::Backend::serial);
  Tensor a = fn();
  kernels::set_backend(kernels::Backend::parallel);
  Tensor b = fn();
  kernels::set_backend(saved);
  CHECK(bitwise_equal(a, b));
}

}  // namespace

TEST_SUITE("kernels") {
  TEST_CASE("gemm variants match between backends") {
    Rng rng(7);
    for (int rep = 0; rep < 5; ++rep) {
      i64 m = rng.uniform_int(1, 17), k = rng.uniform_int(1, 23), n = rng.uniform_int(1, 19);
      Tensor A = random_tensor({m, k}, rng);
      Tensor B = random_tensor({k, n}, rng);
      Tensor Bt = random_tensor({n, k}, rng);
      Tensor At = random_tensor({k, m}, rng);
      check_backends([&] {
        Tensor C({m, n});
        kernels::gemm_nn(A.data(), B.data(), C.data(), m, k, n, false);
        return C;
      });
      check_backends([&] {
        Tensor C({m, n});
        kernels::gemm_nt(A.data(), Bt.data(), C.data(), m, k, n, false);
        return C;
      });
      check_backends([&] {
        Tensor C({m, n});
        kernels::gemm_tn(At.data(), B.data(), C.data(), m, k, n, false);
        return C;
      });
    }
  }

  TEST_CASE("gemm_nn agrees with naive triple loop") {
    Rng rng(11);
    i64 m = 5, k = 7, n = 4;
    Tensor A = random_tensor({m, k}, rng), B = random_tensor({k, n}, rng);
    Tensor C({m, n});
    kernels::gemm_nn(A.data(), B.data(), C.data(), m, k, n, false);
    for (i64 i = 0; i < m; ++i)
      for (i64 j = 0; j < n; ++j) {
        double s = 0.0;
        for (i64 p = 0; p < k; ++p) s += A.data()[i * k + p] * B.data()[p * n + j];
        CHECK(C.data()[i * n + j] == doctest::Approx(s).epsilon(1e-12));
      }
  }

  TEST_CASE("bmm variants match between backends") {
    Rng rng(13);
    i64 g = 3, m = 6, k = 5, n = 4;
    Tensor A = random_tensor({g, m, k}, rng);
    Tensor B = random_tensor({g, k, n}, rng);
    Tensor Bt = random_tensor({g, n, k}, rng);
    Tensor At = random_tensor({g, k, m}, rng);
    check_backends([&] {
      Tensor C({g, m, n});
      kernels::bmm_nn(A.data(), B.data(), C.data(), g, m, k, n, false);
      return C;
    });
    check_backends([&] {
      Tensor C({g, m, n});
      kernels::bmm_nt(A.data(), Bt.data(), C.data(), g, m, k, n, false);
      return C;
    });
    check_backends([&] {
      Tensor C({g, m, n});
      kernels::bmm_tn(At.data(), B.data(), C.data(), g, m, k, n, false);
      return C;
    });
  }

  TEST_CASE("conv3d forward and backwards match between backends") {
    Rng rng(17);
    kernels::Conv3dDims d;
    d.b = 2;
    d.iz = d.iy = d.ix = 7;
    d.ci = 3;
    d.co = 4;
    d.kz = d.ky = d.kx = 3;
    d.stride = 2;
    d.pad = 1;
    d.oz = (d.iz + 2 * d.pad - d.kz) / d.stride + 1;
    d.oy = d.oz;
    d.ox = d.oz;
    Tensor x = random_tensor({d.b, d.iz, d.iy, d.ix, d.ci}, rng);
    Tensor w = random_tensor({d.kz, d.ky, d.kx, d.ci, d.co}, rng);
    Tensor bias = random_tensor({d.co}, rng);
    Tensor dy = random_tensor({d.b, d.oz, d.oy, d.ox, d.co}, rng);
    check_backends([&] {
      Tensor y({d.b, d.oz, d.oy, d.ox, d.co});
      kernels::conv3d_fwd(x.data(), w.data(), bias.data(), y.data(), d);
      return y;
    });
    check_backends([&] {
      Tensor dx({d.b, d.iz, d.iy, d.ix, d.ci});
      kernels::conv3d_bwd_input(dy.data(), w.data(), dx.data(), d);
      return dx;
    });
    check_backends([&] {
      Tensor dw({d.kz, d.ky, d.kx, d.ci, d.co});
      kernels::conv3d_bwd_weight(x.data(), dy.data(), dw.data(), d);
      return dw;
    });
  }

  TEST_CASE("depthwise and transpose conv match between backends") {
    Rng rng(19);
    kernels::Conv3dDims d;
    d.b = 2;
    d.iz = d.iy = d.ix = 6;
    d.ci = d.co = 5;
    d.kz = d.ky = d.kx = 3;
    d.stride = 1;
    d.pad = 1;
    d.oz = d.oy = d.ox = 6;
    Tensor x = random_tensor({d.b, d.iz, d.iy, d.ix, d.ci}, rng);
    Tensor w = random_tensor({d.kz, d.ky, d.kx, d.ci}, rng);
    Tensor bias = random_tensor({d.ci}, rng);
    Tensor dy = random_tensor({d.b, d.oz, d.oy, d.ox, d.ci}, rng);
    check_backends([&] {
      Tensor y({d.b, d.oz, d.oy, d.ox, d.ci});
      kernels::dwconv3d_fwd(x.data(), w.data(), bias.data(), y.data(), d);
      return y;
    });
    check_backends([&] {
      Tensor dx({d.b, d.iz, d.iy, d.ix, d.ci});
      kernels::dwconv3d_bwd_input(dy.data(), w.data(), dx.data(), d);
      return dx;
    });
    check_backends([&] {
      Tensor dw({d.kz, d.ky, d.kx, d.ci});
      kernels::dwconv3d_bwd_weight(x.data(), dy.data(), dw.data(), d);
      return dw;
    });

    kernels::Conv3dDims t;
    t.b = 2;
    t.iz = t.iy = t.ix = 3;
    t.ci = 4;
    t.co = 3;
    t.kz = t.ky = t.kx = 2;
    t.stride = 2;
    t.oz = t.oy = t.ox = (t.iz - 1) * t.stride + t.kz;
    Tensor xt = random_tensor({t.b, t.iz, t.iy, t.ix, t.ci}, rng);
    Tensor wt = random_tensor({t.kz, t.ky, t.kx, t.ci, t.co}, rng);
    Tensor biast = random_tensor({t.co}, rng);
    Tensor dyt = random_tensor({t.b, t.oz, t.oy, t.ox, t.co}, rng);
    check_backends([&] {
      Tensor y({t.b, t.oz, t.oy, t.ox, t.co});
      kernels::deconv3d_fwd(xt.data(), wt.data(), biast.data(), y.data(), t);
      return y;
    });
    check_backends([&] {
      Tensor dx({t.b, t.iz, t.iy, t.ix, t.ci});
      kernels::deconv3d_bwd_input(dyt.data(), wt.data(), dx.data(), t);
      return dx;
    });
    check_backends([&] {
      Tensor dw({t.kz, t.ky, t.kx, t.ci, t.co});
      kernels::deconv3d_bwd_weight(xt.data(), dyt.data(), dw.data(), t);
      return dw;
    });
  }

  TEST_CASE("row ops and resampling match between backends") {
    Rng rng(23);
    i64 rows = 9, c = 13;
    Tensor x = random_tensor({rows, c}, rng);
    Tensor g = random_tensor({c}, rng, 0.5, 1.5);
    Tensor be = random_tensor({c}, rng);
    Tensor dy = random_tensor({rows, c}, rng);
    check_backends([&] {
      Tensor y({rows, c});
      kernels::softmax_rows(x.data(), y.data(), rows, c);
      return y;
    });
    check_backends([&] {
      Tensor y({rows, c}), mean({rows}), rstd({rows});
      kernels::layernorm_rows(x.data(), g.data(), be.data(), 1e-6, y.data(), mean.data(),
                              rstd.data(), rows, c);
      return y;
    });
    check_backends([&] {
      Tensor y({rows, c}), mean({rows}), rstd({rows});
      kernels::layernorm_rows(x.data(), g.data(), be.data(), 1e-6, y.data(), mean.data(),
                              rstd.data(), rows, c);
      Tensor dx({rows, c}), dg({c}), db({c});
      kernels::layernorm_rows_bwd(x.data(), g.data(), mean.data(), rstd.data(), dy.data(),
                                  dx.data(), dg.data(), db.data(), rows, c);
      Tensor all({rows * c + 2 * c});
      std::memcpy(all.data(), dx.data(), sizeof(double) * rows * c);
      std::memcpy(all.data() + rows * c, dg.data(), sizeof(double) * c);
      std::memcpy(all.data() + rows * c + c, db.data(), sizeof(double) * c);
      return all;
    });

    Tensor vol = random_tensor({2, 4, 5, 6, 3}, rng);
    check_backends([&] {
      Tensor y({2, 8, 10, 12, 3});
      kernels::upsample_nearest3d_fwd(vol.data(), y.data(), 2, 4, 5, 6, 3, 2);
      return y;
    });
    check_backends([&] {
      Tensor y({2, 9, 7, 11, 3});
      kernels::upsample_trilinear3d_fwd(vol.data(), y.data(), 2, 4, 5, 6, 3, 9, 7, 11);
      return y;
    });
    Tensor dyt = random_tensor({2, 9, 7, 11, 3}, rng);
    check_backends([&] {
      Tensor dx({2, 4, 5, 6, 3});
      kernels::upsample_trilinear3d_bwd(dyt.data(), dx.data(), 2, 4, 5, 6, 3, 9, 7, 11);
      return dx;
    });
    check_backends([&] {
      Tensor y({2, 2, 2, 2, 3});
      kernels::avgpool3d_to_fwd(vol.data(), y.data(), 2, 4, 5, 6, 3, 2, 2, 2);
      return y;
    });
  }

  TEST_CASE("broadcast and reduce match between backends") {
    Rng rng(29);
    Tensor a = random_tensor({3, 4, 5}, rng);
    Tensor b = random_tensor({4, 1}, rng);
    check_backends([&] {
      Tensor out({3, 4, 5});
      kernels::broadcast_binary(kernels::BinOp::mul, a.data(), a.shape(), b.data(), b.shape(),
                                out.data(), out.shape());
      return out;
    });
    check_backends([&] {
      Tensor out({3, 1, 1});
      kernels::reduce_to_shape(a.data(), a.shape(), out.data(), out.shape(), false);
      return out;
    });
    check_backends([&] {
      Tensor out({1, 4, 1});
      kernels::reduce_to_shape(a.data(), a.shape(), out.data(), out.shape(), false);
      return out;
    });
  }

  TEST_CASE("reduce_to_shape sums the right slices") {
    Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor out({1, 3});
    kernels::reduce_to_shape(a.data(), a.shape(), out.data(), out.shape(), false);
    CHECK(out.data()[0] == 5.0);
    CHECK(out.data()[1] == 7.0);
    CHECK(out.data()[2] == 9.0);
    Tensor out2({2, 1});
    kernels::reduce_to_shape(a.data(), a.shape(), out2.data(), out2.shape(), false);
    CHECK(out2.data()[0] == 6.0);
    CHECK(out2.data()[1] == 15.0);
  }

  TEST_CASE("trilinear resize is identity at equal sizes") {
    Rng rng(31);
    Tensor vol = random_tensor({1, 4, 4, 4, 2}, rng);
    Tensor y({1, 4, 4, 4, 2});
    kernels::upsample_trilinear3d_fwd(vol.data(), y.data(), 1, 4, 4, 4, 2, 4, 4, 4);
    CHECK(bitwise_equal(vol, y));
  }

  TEST_CASE("gather/zone ops match between backends") {
    Rng rng(37);
    i64 b = 2, n = 10, m = 6, dd = 4;
    Tensor x = random_tensor({b, n, dd}, rng);
    std::vector<i64> idx;
    for (i64 q = 0; q < b; ++q) {
      auto perm = rng.permutation(n);
      for (i64 i = 0; i < m; ++i) idx.push_back(perm[i]);
    }
    Tensor dy = random_tensor({b, m, dd}, rng);
    check_backends([&] {
      Tensor y({b, m, dd});
      kernels::gather_rows_fwd(x.data(), idx.data(), y.data(), b, n, m, dd);
      return y;
    });
    check_backends([&] {
      Tensor dx({b, n, dd});
      kernels::gather_rows_bwd(dy.data(), idx.data(), dx.data(), b, n, m, dd);
      return dx;
    });

    i64 voxels = 50, f = 3, nz = 4;
    Tensor feat = random_tensor({voxels, f}, rng);
    std::vector<std::int32_t> zones(voxels);
    std::vector<i64> counts(nz, 0);
    for (i64 v = 0; v < voxels; ++v) {
      zones[v] = static_cast<std::int32_t>(rng.uniform_below(nz + 1));  // 0 = background
      if (zones[v] > 0) counts[zones[v] - 1]++;
    }
    Tensor dyz = random_tensor({nz, f}, rng);
    check_backends([&] {
      Tensor y({nz, f});
      kernels::zone_mean_fwd(feat.data(), zones.data(), counts.data(), y.data(), voxels, f, nz);
      return y;
    });
    check_backends([&] {
      Tensor dx({voxels, f});
      kernels::zone_mean_bwd(dyz.data(), zones.data(), counts.data(), dx.data(), voxels, f, nz);
      return dx;
    });
  }
}
