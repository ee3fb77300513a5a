#pragma once

#include <cstdint>
#include <vector>

#include "voxmae/tensor.hpp"

// Numeric kernels behind the autodiff layer. Every kernel exists twice: a
// serial reference implementation and an OpenMP version. The parallel
// versions only ever split work across independent output elements; each
// element's reduction runs in the same fixed order as the reference, so the
// two backends produce bit-identical results (asserted in tests) and results
// do not depend on thread count.

namespace voxmae::kernels {

enum class Backend { serial, parallel };

Backend backend();
void set_backend(Backend b);
bool parallel_available();
int thread_count();

enum class BinOp { add, sub, mul, div };

struct Conv3dDims {
  i64 b = 1;
  i64 iz = 0, iy = 0, ix = 0;  // input spatial
  i64 ci = 0;
  i64 oz = 0, oy = 0, ox = 0;  // output spatial
  i64 co = 0;
  i64 kz = 1, ky = 1, kx = 1;
  i64 stride = 1;
  i64 pad = 0;
};

#define VOXMAE_KERNELS_API                                                                           \
  /* GEMM family, row-major. nn: C=A*B; nt: C=A*B^T (B given [N,K]); tn: C=A^T*B (A given [K,M]) */ \
  void gemm_nn(const double* a, const double* b, double* c, i64 m, i64 k, i64 n, bool acc);          \
  void gemm_nt(const double* a, const double* b, double* c, i64 m, i64 k, i64 n, bool acc);          \
  void gemm_tn(const double* a, const double* b, double* c, i64 m, i64 k, i64 n, bool acc);          \
  void bmm_nn(const double* a, const double* b, double* c, i64 g, i64 m, i64 k, i64 n, bool acc);    \
  void bmm_nt(const double* a, const double* b, double* c, i64 g, i64 m, i64 k, i64 n, bool acc);    \
  void bmm_tn(const double* a, const double* b, double* c, i64 g, i64 m, i64 k, i64 n, bool acc);    \
  void add_bias_rows(double* y, const double* bias, i64 rows, i64 n);                                \
  void col_sum(const double* x, double* out, i64 rows, i64 n, bool acc);                             \
  void broadcast_binary(BinOp op, const double* a, const std::vector<i64>& ashape, const double* b,  \
                        const std::vector<i64>& bshape, double* out, const std::vector<i64>& oshape);\
  void reduce_to_shape(const double* src, const std::vector<i64>& sshape, double* dst,               \
                       const std::vector<i64>& dshape, bool acc);                                    \
  void scale(const double* x, double c, double* y, i64 n);                                           \
  void axpy(double a, const double* x, double* y, i64 n);                                            \
  void vmul_acc(const double* a, const double* b, double* y, i64 n);                                 \
  void vsqrt(const double* x, double* y, i64 n);                                                     \
  void vsquare(const double* x, double* y, i64 n);                                                   \
  void relu(const double* x, double* y, i64 n);                                                      \
  void relu_bwd(const double* x, const double* dy, double* dx, i64 n);                               \
  void gelu(const double* x, double* y, i64 n);                                                      \
  void gelu_bwd(const double* x, const double* dy, double* dx, i64 n);                               \
  void softmax_rows(const double* x, double* y, i64 rows, i64 c);                                    \
  void softmax_rows_bwd(const double* y, const double* dy, double* dx, i64 rows, i64 c);             \
  void layernorm_rows(const double* x, const double* gamma, const double* beta, double eps,          \
                      double* y, double* mean, double* rstd, i64 rows, i64 c);                       \
  void layernorm_rows_bwd(const double* x, const double* gamma, const double* mean,                  \
                          const double* rstd, const double* dy, double* dx, double* dgamma,          \
                          double* dbeta, i64 rows, i64 c);                                           \
  void conv3d_fwd(const double* x, const double* w, const double* bias, double* y,                   \
                  const Conv3dDims& d);                                                              \
  void conv3d_bwd_input(const double* dy, const double* w, double* dx, const Conv3dDims& d);         \
  void conv3d_bwd_weight(const double* x, const double* dy, double* dw, const Conv3dDims& d);        \
  void conv3d_bwd_bias(const double* dy, double* db, i64 voxels, i64 co);                            \
  void dwconv3d_fwd(const double* x, const double* w, const double* bias, double* y,                 \
                    const Conv3dDims& d);                                                            \
  void dwconv3d_bwd_input(const double* dy, const double* w, double* dx, const Conv3dDims& d);       \
  void dwconv3d_bwd_weight(const double* x, const double* dy, double* dw, const Conv3dDims& d);      \
  void deconv3d_fwd(const double* x, const double* w, const double* bias, double* y,                 \
                    const Conv3dDims& d);                                                            \
  void deconv3d_bwd_input(const double* dy, const double* w, double* dx, const Conv3dDims& d);       \
  void deconv3d_bwd_weight(const double* x, const double* dy, double* dw, const Conv3dDims& d);      \
  void upsample_nearest3d_fwd(const double* x, double* y, i64 b, i64 iz, i64 iy, i64 ix, i64 c,      \
                              i64 f);                                                                \
  void upsample_nearest3d_bwd(const double* dy, double* dx, i64 b, i64 iz, i64 iy, i64 ix, i64 c,    \
                              i64 f);                                                                \
  void upsample_trilinear3d_fwd(const double* x, double* y, i64 b, i64 iz, i64 iy, i64 ix, i64 c,    \
                                i64 oz, i64 oy, i64 ox);                                             \
  void upsample_trilinear3d_bwd(const double* dy, double* dx, i64 b, i64 iz, i64 iy, i64 ix, i64 c,  \
                                i64 oz, i64 oy, i64 ox);                                             \
  void avgpool3d_to_fwd(const double* x, double* y, i64 b, i64 iz, i64 iy, i64 ix, i64 c, i64 oz,    \
                        i64 oy, i64 ox);                                                             \
  void avgpool3d_to_bwd(const double* dy, double* dx, i64 b, i64 iz, i64 iy, i64 ix, i64 c, i64 oz,  \
                        i64 oy, i64 ox);                                                             \
  void gather_rows_fwd(const double* x, const i64* idx, double* y, i64 b, i64 n, i64 m, i64 d);      \
  void gather_rows_bwd(const double* dy, const i64* idx, double* dx, i64 b, i64 n, i64 m, i64 d);    \
  void zone_mean_fwd(const double* x, const std::int32_t* zones, const i64* counts, double* y,       \
                     i64 voxels, i64 f, i64 nz);                                                     \
  void zone_mean_bwd(const double* dy, const std::int32_t* zones, const i64* counts, double* dx,     \
                     i64 voxels, i64 f, i64 nz);

namespace serial {
VOXMAE_KERNELS_API
}
namespace par {
VOXMAE_KERNELS_API
}

// Dispatching entry points (select backend() at call time).
VOXMAE_KERNELS_API

#undef VOXMAE_KERNELS_API

}  // namespace voxmae::kernels
