#include "voxmae/kernels.hpp"

#include <atomic>
#include <cstdlib>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace voxmae::kernels {

namespace {

Backend initial_backend() {
  if (const char* env = std::getenv("VOXMAE_BACKEND")) {
    std::string v(env);
    if (v == "serial") return Backend::serial;
    if (v == "parallel") return Backend::parallel;
  }
#ifdef _OPENMP
  return Backend::parallel;
#else
  return Backend::serial;
#endif
}

std::atomic<Backend> g_backend{initial_backend()};

}  // namespace

Backend backend() { return g_backend.load(std::memory_order_relaxed); }
void set_backend(Backend b) { g_backend.store(b, std::memory_order_relaxed); }

bool parallel_available() {
#ifdef _OPENMP
  return true;
#else
  return false;
#endif
}

int thread_count() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

#define VOXMAE_DISPATCH(fn, ...)                  \
  if (backend() == Backend::parallel) {           \
    par::fn(__VA_ARGS__);                         \
  } else {                                        \
    serial::fn(__VA_ARGS__);                      \
  }

void gemm_nn(const double* a, const double* b, double* c, i64 m, i64 k, i64 n, bool acc) {
  VOXMAE_DISPATCH(gemm_nn, a, b, c, m, k, n, acc)
}
void gemm_nt(const double* a, const double* b, double* c, i64 m, i64 k, i64 n, bool acc) {
  VOXMAE_DISPATCH(gemm_nt, a, b, c, m, k, n, acc)
}
void gemm_tn(const double* a, const double* b, double* c, i64 m, i64 k, i64 n, bool acc) {
  VOXMAE_DISPATCH(gemm_tn, a, b, c, m, k, n, acc)
}
void bmm_nn(const double* a, const double* b, double* c, i64 g, i64 m, i64 k, i64 n, bool acc) {
  VOXMAE_DISPATCH(bmm_nn, a, b, c, g, m, k, n, acc)
}
void bmm_nt(const double* a, const double* b, double* c, i64 g, i64 m, i64 k, i64 n, bool acc) {
  VOXMAE_DISPATCH(bmm_nt, a, b, c, g, m, k, n, acc)
}
void bmm_tn(const double* a, const double* b, double* c, i64 g, i64 m, i64 k, i64 n, bool acc) {
  VOXMAE_DISPATCH(bmm_tn, a, b, c, g, m, k, n, acc)
}
void add_bias_rows(double* y, const double* bias, i64 rows, i64 n) {
  VOXMAE_DISPATCH(add_bias_rows, y, bias, rows, n)
}
void col_sum(const double* x, double* out, i64 rows, i64 n, bool acc) {
  VOXMAE_DISPATCH(col_sum, x, out, rows, n, acc)
}
void broadcast_binary(BinOp op, const double* a, const std::vector<i64>& ashape, const double* b,
                      const std::vector<i64>& bshape, double* out, const std::vector<i64>& oshape) {
  VOXMAE_DISPATCH(broadcast_binary, op, a, ashape, b, bshape, out, oshape)
}
void reduce_to_shape(const double* src, const std::vector<i64>& sshape, double* dst,
                     const std::vector<i64>& dshape, bool acc) {
  VOXMAE_DISPATCH(reduce_to_shape, src, sshape, dst, dshape, acc)
}
void scale(const double* x, double c, double* y, i64 n) { VOXMAE_DISPATCH(scale, x, c, y, n) }
void axpy(double a, const double* x, double* y, i64 n) { VOXMAE_DISPATCH(axpy, a, x, y, n) }
void vmul_acc(const double* a, const double* b, double* y, i64 n) {
  VOXMAE_DISPATCH(vmul_acc, a, b, y, n)
}
void vsqrt(const double* x, double* y, i64 n) { VOXMAE_DISPATCH(vsqrt, x, y, n) }
void vsquare(const double* x, double* y, i64 n) { VOXMAE_DISPATCH(vsquare, x, y, n) }
void relu(const double* x, double* y, i64 n) { VOXMAE_DISPATCH(relu, x, y, n) }
void relu_bwd(const double* x, const double* dy, double* dx, i64 n) {
  VOXMAE_DISPATCH(relu_bwd, x, dy, dx, n)
}
void gelu(const double* x, double* y, i64 n) { VOXMAE_DISPATCH(gelu, x, y, n) }
void gelu_bwd(const double* x, const double* dy, double* dx, i64 n) {
  VOXMAE_DISPATCH(gelu_bwd, x, dy, dx, n)
}
void softmax_rows(const double* x, double* y, i64 rows, i64 c) {
  VOXMAE_DISPATCH(softmax_rows, x, y, rows, c)
}
void softmax_rows_bwd(const double* y, const double* dy, double* dx, i64 rows, i64 c) {
  VOXMAE_DISPATCH(softmax_rows_bwd, y, dy, dx, rows, c)
}
void layernorm_rows(const double* x, const double* gamma, const double* beta, double eps, double* y,
                    double* mean, double* rstd, i64 rows, i64 c) {
  VOXMAE_DISPATCH(layernorm_rows, x, gamma, beta, eps, y, mean, rstd, rows, c)
}
void layernorm_rows_bwd(const double* x, const double* gamma, const double* mean, const double* rstd,
                        const double* dy, double* dx, double* dgamma, double* dbeta, i64 rows,
                        i64 c) {
  VOXMAE_DISPATCH(layernorm_rows_bwd, x, gamma, mean, rstd, dy, dx, dgamma, dbeta, rows, c)
}
void conv3d_fwd(const double* x, const double* w, const double* bias, double* y,
                const Conv3dDims& d) {
  VOXMAE_DISPATCH(conv3d_fwd, x, w, bias, y, d)
}
void conv3d_bwd_input(const double* dy, const double* w, double* dx, const Conv3dDims& d) {
  VOXMAE_DISPATCH(conv3d_bwd_input, dy, w, dx, d)
}
void conv3d_bwd_weight(const double* x, const double* dy, double* dw, const Conv3dDims& d) {
  VOXMAE_DISPATCH(conv3d_bwd_weight, x, dy, dw, d)
}
void conv3d_bwd_bias(const double* dy, double* db, i64 voxels, i64 co) {
  VOXMAE_DISPATCH(conv3d_bwd_bias, dy, db, voxels, co)
}
void dwconv3d_fwd(const double* x, const double* w, const double* bias, double* y,
                  const Conv3dDims& d) {
  VOXMAE_DISPATCH(dwconv3d_fwd, x, w, bias, y, d)
}
void dwconv3d_bwd_input(const double* dy, const double* w, double* dx, const Conv3dDims& d) {
  VOXMAE_DISPATCH(dwconv3d_bwd_input, dy, w, dx, d)
}
void dwconv3d_bwd_weight(const double* x, const double* dy, double* dw, const Conv3dDims& d) {
  VOXMAE_DISPATCH(dwconv3d_bwd_weight, x, dy, dw, d)
}
void deconv3d_fwd(const double* x, const double* w, const double* bias, double* y,
                  const Conv3dDims& d) {
  VOXMAE_DISPATCH(deconv3d_fwd, x, w, bias, y, d)
}
void deconv3d_bwd_input(const double* dy, const double* w, double* dx, const Conv3dDims& d) {
  VOXMAE_DISPATCH(deconv3d_bwd_input, dy, w, dx, d)
}
void deconv3d_bwd_weight(const double* x, const double* dy, double* dw, const Conv3dDims& d) {
  VOXMAE_DISPATCH(deconv3d_bwd_weight, x, dy, dw, d)
}
void upsample_nearest3d_fwd(const double* x, double* y, i64 b, i64 iz, i64 iy, i64 ix, i64 c,
                            i64 f) {
  VOXMAE_DISPATCH(upsample_nearest3d_fwd, x, y, b, iz, iy, ix, c, f)
}
void upsample_nearest3d_bwd(const double* dy, double* dx, i64 b, i64 iz, i64 iy, i64 ix, i64 c,
                            i64 f) {
  VOXMAE_DISPATCH(upsample_nearest3d_bwd, dy, dx, b, iz, iy, ix, c, f)
}
void upsample_trilinear3d_fwd(const double* x, double* y, i64 b, i64 iz, i64 iy, i64 ix, i64 c,
                              i64 oz, i64 oy, i64 ox) {
  VOXMAE_DISPATCH(upsample_trilinear3d_fwd, x, y, b, iz, iy, ix, c, oz, oy, ox)
}
void upsample_trilinear3d_bwd(const double* dy, double* dx, i64 b, i64 iz, i64 iy, i64 ix, i64 c,
                              i64 oz, i64 oy, i64 ox) {
  VOXMAE_DISPATCH(upsample_trilinear3d_bwd, dy, dx, b, iz, iy, ix, c, oz, oy, ox)
}
void avgpool3d_to_fwd(const double* x, double* y, i64 b, i64 iz, i64 iy, i64 ix, i64 c, i64 oz,
                      i64 oy, i64 ox) {
  VOXMAE_DISPATCH(avgpool3d_to_fwd, x, y, b, iz, iy, ix, c, oz, oy, ox)
}
void avgpool3d_to_bwd(const double* dy, double* dx, i64 b, i64 iz, i64 iy, i64 ix, i64 c, i64 oz,
                      i64 oy, i64 ox) {
  VOXMAE_DISPATCH(avgpool3d_to_bwd, dy, dx, b, iz, iy, ix, c, oz, oy, ox)
}
void gather_rows_fwd(const double* x, const i64* idx, double* y, i64 b, i64 n, i64 m, i64 d) {
  VOXMAE_DISPATCH(gather_rows_fwd, x, idx, y, b, n, m, d)
}
void gather_rows_bwd(const double* dy, const i64* idx, double* dx, i64 b, i64 n, i64 m, i64 d) {
  VOXMAE_DISPATCH(gather_rows_bwd, dy, idx, dx, b, n, m, d)
}
void zone_mean_fwd(const double* x, const std::int32_t* zones, const i64* counts, double* y,
                   i64 voxels, i64 f, i64 nz) {
  VOXMAE_DISPATCH(zone_mean_fwd, x, zones, counts, y, voxels, f, nz)
}
void zone_mean_bwd(const double* dy, const std::int32_t* zones, const i64* counts, double* dx,
                   i64 voxels, i64 f, i64 nz) {
  VOXMAE_DISPATCH(zone_mean_bwd, dy, zones, counts, dx, voxels, f, nz)
}

#undef VOXMAE_DISPATCH

}  // namespace voxmae::kernels
