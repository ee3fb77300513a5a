#include <algorithm>
#include <cmath>
#include <cstring>

#include "kernels_common.hpp"
#include "voxmae/kernels.hpp"

// Serial reference kernels. Plain loops, no tricks; the parallel backend must
// reproduce these bit-for-bit.

namespace voxmae::kernels::serial {

using detail::apply_binop;
using detail::bcast_strides;

void gemm_nn(const double* a, const double* b, double* c, i64 m, i64 k, i64 n, bool acc) {
  for (i64 i = 0; i < m; ++i) {
    double* crow = c + i * n;
    if (!acc) std::memset(crow, 0, sizeof(double) * static_cast<std::size_t>(n));
    const double* arow = a + i * k;
    for (i64 p = 0; p < k; ++p) {
      double av = arow[p];
      const double* brow = b + p * n;
      for (i64 j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void gemm_nt(const double* a, const double* b, double* c, i64 m, i64 k, i64 n, bool acc) {
  for (i64 i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (i64 j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double s = acc ? crow[j] : 0.0;
      for (i64 p = 0; p < k; ++p) s += arow[p] * brow[p];
      crow[j] = s;
    }
  }
}

void gemm_tn(const double* a, const double* b, double* c, i64 m, i64 k, i64 n, bool acc) {
  // a is [k, m]; c[i, j] = sum_p a[p, i] * b[p, j]
  for (i64 i = 0; i < m; ++i) {
    double* crow = c + i * n;
    if (!acc) std::memset(crow, 0, sizeof(double) * static_cast<std::size_t>(n));
    for (i64 p = 0; p < k; ++p) {
      double av = a[p * m + i];
      const double* brow = b + p * n;
      for (i64 j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void bmm_nn(const double* a, const double* b, double* c, i64 g, i64 m, i64 k, i64 n, bool acc) {
  for (i64 q = 0; q < g; ++q) gemm_nn(a + q * m * k, b + q * k * n, c + q * m * n, m, k, n, acc);
}

void bmm_nt(const double* a, const double* b, double* c, i64 g, i64 m, i64 k, i64 n, bool acc) {
  for (i64 q = 0; q < g; ++q) gemm_nt(a + q * m * k, b + q * n * k, c + q * m * n, m, k, n, acc);
}

void bmm_tn(const double* a, const double* b, double* c, i64 g, i64 m, i64 k, i64 n, bool acc) {
  for (i64 q = 0; q < g; ++q) gemm_tn(a + q * k * m, b + q * k * n, c + q * m * n, m, k, n, acc);
}

void add_bias_rows(double* y, const double* bias, i64 rows, i64 n) {
  for (i64 r = 0; r < rows; ++r) {
    double* yr = y + r * n;
    for (i64 j = 0; j < n; ++j) yr[j] += bias[j];
  }
}

void col_sum(const double* x, double* out, i64 rows, i64 n, bool acc) {
  for (i64 j = 0; j < n; ++j) {
    double s = acc ? out[j] : 0.0;
    for (i64 r = 0; r < rows; ++r) s += x[r * n + j];
    out[j] = s;
  }
}

void broadcast_binary(BinOp op, const double* a, const std::vector<i64>& ashape, const double* b,
                      const std::vector<i64>& bshape, double* out, const std::vector<i64>& oshape) {
  i64 total = numel_of(oshape);
  if (ashape == oshape && bshape == oshape) {
    for (i64 i = 0; i < total; ++i) out[i] = apply_binop(op, a[i], b[i]);
    return;
  }
  std::vector<i64> sa = bcast_strides(ashape, oshape);
  std::vector<i64> sb = bcast_strides(bshape, oshape);
  std::vector<i64> so = strides_of(oshape);
  int nd = static_cast<int>(oshape.size());
  for (i64 i = 0; i < total; ++i) {
    i64 rem = i, ia = 0, ib = 0;
    for (int d = 0; d < nd; ++d) {
      i64 cd = rem / so[d];
      rem -= cd * so[d];
      ia += cd * sa[d];
      ib += cd * sb[d];
    }
    out[i] = apply_binop(op, a[ia], b[ib]);
  }
}

void reduce_to_shape(const double* src, const std::vector<i64>& sshape, double* dst,
                     const std::vector<i64>& dshape, bool acc) {
  i64 dtotal = numel_of(dshape);
  if (sshape == dshape) {
    if (acc) {
      for (i64 i = 0; i < dtotal; ++i) dst[i] += src[i];
    } else {
      std::memcpy(dst, src, sizeof(double) * static_cast<std::size_t>(dtotal));
    }
    return;
  }
  int nd = static_cast<int>(sshape.size());
  std::vector<i64> sd = bcast_strides(dshape, sshape);  // dst strides mapped onto src space
  std::vector<i64> ss = strides_of(sshape);
  // reduced dims: where dst stride is 0
  std::vector<i64> red_dims, red_sizes;
  for (int d = 0; d < nd; ++d)
    if (sd[d] == 0 && sshape[d] > 1) {
      red_dims.push_back(d);
      red_sizes.push_back(sshape[d]);
    }
  i64 red_total = 1;
  for (i64 s : red_sizes) red_total *= s;
  // kept dims enumerate dst elements
  for (i64 j = 0; j < dtotal; ++j) {
    // find base src index for dst element j: invert via dshape coords
    std::vector<i64> dstr = strides_of(dshape);
    i64 rem = j, base = 0;
    int dnd = static_cast<int>(dshape.size());
    for (int d = 0; d < dnd; ++d) {
      i64 cd = rem / dstr[d];
      rem -= cd * dstr[d];
      // dim d of dst corresponds to src dim d + (nd - dnd)
      base += cd * ss[d + (nd - dnd)];
    }
    double s = acc ? dst[j] : 0.0;
    for (i64 r = 0; r < red_total; ++r) {
      i64 rrem = r, off = 0;
      for (std::size_t q = 0; q < red_dims.size(); ++q) {
        i64 blk = 1;
        for (std::size_t q2 = q + 1; q2 < red_dims.size(); ++q2) blk *= red_sizes[q2];
        i64 cd = rrem / blk;
        rrem -= cd * blk;
        off += cd * ss[red_dims[q]];
      }
      s += src[base + off];
    }
    dst[j] = s;
  }
}

void scale(const double* x, double c, double* y, i64 n) {
  for (i64 i = 0; i < n; ++i) y[i] = c * x[i];
}

void axpy(double a, const double* x, double* y, i64 n) {
  for (i64 i = 0; i < n; ++i) y[i] += a * x[i];
}

void vmul_acc(const double* a, const double* b, double* y, i64 n) {
  for (i64 i = 0; i < n; ++i) y[i] += a[i] * b[i];
}

void vsqrt(const double* x, double* y, i64 n) {
  for (i64 i = 0; i < n; ++i) y[i] = std::sqrt(x[i]);
}

void vsquare(const double* x, double* y, i64 n) {
  for (i64 i = 0; i < n; ++i) y[i] = x[i] * x[i];
}

void relu(const double* x, double* y, i64 n) {
  for (i64 i = 0; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void relu_bwd(const double* x, const double* dy, double* dx, i64 n) {
  for (i64 i = 0; i < n; ++i) dx[i] += x[i] > 0.0 ? dy[i] : 0.0;
}

void gelu(const double* x, double* y, i64 n) {
  for (i64 i = 0; i < n; ++i) y[i] = detail::gelu_val(x[i]);
}

void gelu_bwd(const double* x, const double* dy, double* dx, i64 n) {
  for (i64 i = 0; i < n; ++i) dx[i] += dy[i] * detail::gelu_grad(x[i]);
}

void softmax_rows(const double* x, double* y, i64 rows, i64 c) {
  for (i64 r = 0; r < rows; ++r) {
    const double* xr = x + r * c;
    double* yr = y + r * c;
    double mx = xr[0];
    for (i64 j = 1; j < c; ++j) mx = std::max(mx, xr[j]);
    double s = 0.0;
    for (i64 j = 0; j < c; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      s += yr[j];
    }
    double inv = 1.0 / s;
    for (i64 j = 0; j < c; ++j) yr[j] *= inv;
  }
}

void softmax_rows_bwd(const double* y, const double* dy, double* dx, i64 rows, i64 c) {
  for (i64 r = 0; r < rows; ++r) {
    const double* yr = y + r * c;
    const double* dyr = dy + r * c;
    double* dxr = dx + r * c;
    double dot = 0.0;
    for (i64 j = 0; j < c; ++j) dot += yr[j] * dyr[j];
    for (i64 j = 0; j < c; ++j) dxr[j] += yr[j] * (dyr[j] - dot);
  }
}

void layernorm_rows(const double* x, const double* gamma, const double* beta, double eps, double* y,
                    double* mean, double* rstd, i64 rows, i64 c) {
  for (i64 r = 0; r < rows; ++r) {
    const double* xr = x + r * c;
    double* yr = y + r * c;
    double mu = 0.0;
    for (i64 j = 0; j < c; ++j) mu += xr[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (i64 j = 0; j < c; ++j) {
      double d = xr[j] - mu;
      var += d * d;
    }
    var /= static_cast<double>(c);
    double rs = 1.0 / std::sqrt(var + eps);
    mean[r] = mu;
    rstd[r] = rs;
    for (i64 j = 0; j < c; ++j) yr[j] = (xr[j] - mu) * rs * gamma[j] + beta[j];
  }
}

void layernorm_rows_bwd(const double* x, const double* gamma, const double* mean, const double* rstd,
                        const double* dy, double* dx, double* dgamma, double* dbeta, i64 rows,
                        i64 c) {
  for (i64 r = 0; r < rows; ++r) {
    const double* xr = x + r * c;
    const double* dyr = dy + r * c;
    double* dxr = dx + r * c;
    double mu = mean[r], rs = rstd[r];
    double s1 = 0.0, s2 = 0.0;
    for (i64 j = 0; j < c; ++j) {
      double xhat = (xr[j] - mu) * rs;
      double g = dyr[j] * gamma[j];
      s1 += g;
      s2 += g * xhat;
    }
    s1 /= static_cast<double>(c);
    s2 /= static_cast<double>(c);
    for (i64 j = 0; j < c; ++j) {
      double xhat = (xr[j] - mu) * rs;
      double g = dyr[j] * gamma[j];
      dxr[j] += rs * (g - s1 - xhat * s2);
    }
  }
  for (i64 j = 0; j < c; ++j) {
    double dg = 0.0, db = 0.0;
    for (i64 r = 0; r < rows; ++r) {
      double xhat = (x[r * c + j] - mean[r]) * rstd[r];
      dg += dy[r * c + j] * xhat;
      db += dy[r * c + j];
    }
    dgamma[j] += dg;
    dbeta[j] += db;
  }
}

void conv3d_fwd(const double* x, const double* w, const double* bias, double* y,
                const Conv3dDims& d) {
  i64 outvox = d.b * d.oz * d.oy * d.ox;
  for (i64 v = 0; v < outvox; ++v) {
    i64 rem = v;
    i64 b = rem / (d.oz * d.oy * d.ox);
    rem -= b * d.oz * d.oy * d.ox;
    i64 oz = rem / (d.oy * d.ox);
    rem -= oz * d.oy * d.ox;
    i64 oy = rem / d.ox;
    i64 ox = rem - oy * d.ox;
    double* yr = y + v * d.co;
    if (bias) {
      std::memcpy(yr, bias, sizeof(double) * static_cast<std::size_t>(d.co));
    } else {
      std::memset(yr, 0, sizeof(double) * static_cast<std::size_t>(d.co));
    }
    for (i64 kz = 0; kz < d.kz; ++kz) {
      i64 iz = oz * d.stride + kz - d.pad;
      if (iz < 0 || iz >= d.iz) continue;
      for (i64 ky = 0; ky < d.ky; ++ky) {
        i64 iy = oy * d.stride + ky - d.pad;
        if (iy < 0 || iy >= d.iy) continue;
        for (i64 kx = 0; kx < d.kx; ++kx) {
          i64 ix = ox * d.stride + kx - d.pad;
          if (ix < 0 || ix >= d.ix) continue;
          const double* xr = x + (((b * d.iz + iz) * d.iy + iy) * d.ix + ix) * d.ci;
          const double* wk = w + ((kz * d.ky + ky) * d.kx + kx) * d.ci * d.co;
          for (i64 ci = 0; ci < d.ci; ++ci) {
            double xv = xr[ci];
            const double* wr = wk + ci * d.co;
            for (i64 co = 0; co < d.co; ++co) yr[co] += xv * wr[co];
          }
        }
      }
    }
  }
}

void conv3d_bwd_input(const double* dy, const double* w, double* dx, const Conv3dDims& d) {
  i64 invox = d.b * d.iz * d.iy * d.ix;
  for (i64 v = 0; v < invox; ++v) {
    i64 rem = v;
    i64 b = rem / (d.iz * d.iy * d.ix);
    rem -= b * d.iz * d.iy * d.ix;
    i64 iz = rem / (d.iy * d.ix);
    rem -= iz * d.iy * d.ix;
    i64 iy = rem / d.ix;
    i64 ix = rem - iy * d.ix;
    double* dxr = dx + v * d.ci;
    for (i64 kz = 0; kz < d.kz; ++kz) {
      i64 t = iz + d.pad - kz;
      if (t < 0 || t % d.stride) continue;
      i64 oz = t / d.stride;
      if (oz >= d.oz) continue;
      for (i64 ky = 0; ky < d.ky; ++ky) {
        i64 u = iy + d.pad - ky;
        if (u < 0 || u % d.stride) continue;
        i64 oy = u / d.stride;
        if (oy >= d.oy) continue;
        for (i64 kx = 0; kx < d.kx; ++kx) {
          i64 s = ix + d.pad - kx;
          if (s < 0 || s % d.stride) continue;
          i64 ox = s / d.stride;
          if (ox >= d.ox) continue;
          const double* dyr = dy + (((b * d.oz + oz) * d.oy + oy) * d.ox + ox) * d.co;
          const double* wk = w + ((kz * d.ky + ky) * d.kx + kx) * d.ci * d.co;
          for (i64 ci = 0; ci < d.ci; ++ci) {
            const double* wr = wk + ci * d.co;
            double s2 = 0.0;
            for (i64 co = 0; co < d.co; ++co) s2 += dyr[co] * wr[co];
            dxr[ci] += s2;
          }
        }
      }
    }
  }
}

void conv3d_bwd_weight(const double* x, const double* dy, double* dw, const Conv3dDims& d) {
  i64 kcells = d.kz * d.ky * d.kx * d.ci;
  for (i64 kc = 0; kc < kcells; ++kc) {
    i64 rem = kc;
    i64 kz = rem / (d.ky * d.kx * d.ci);
    rem -= kz * d.ky * d.kx * d.ci;
    i64 ky = rem / (d.kx * d.ci);
    rem -= ky * d.kx * d.ci;
    i64 kx = rem / d.ci;
    i64 ci = rem - kx * d.ci;
    double* dwr = dw + kc * d.co;
    for (i64 b = 0; b < d.b; ++b) {
      for (i64 oz = 0; oz < d.oz; ++oz) {
        i64 iz = oz * d.stride + kz - d.pad;
        if (iz < 0 || iz >= d.iz) continue;
        for (i64 oy = 0; oy < d.oy; ++oy) {
          i64 iy = oy * d.stride + ky - d.pad;
          if (iy < 0 || iy >= d.iy) continue;
          for (i64 ox = 0; ox < d.ox; ++ox) {
            i64 ix = ox * d.stride + kx - d.pad;
            if (ix < 0 || ix >= d.ix) continue;
            double xv = x[(((b * d.iz + iz) * d.iy + iy) * d.ix + ix) * d.ci + ci];
            if (xv == 0.0) continue;
            const double* dyr = dy + (((b * d.oz + oz) * d.oy + oy) * d.ox + ox) * d.co;
            for (i64 co = 0; co < d.co; ++co) dwr[co] += xv * dyr[co];
          }
        }
      }
    }
  }
}

void conv3d_bwd_bias(const double* dy, double* db, i64 voxels, i64 co) {
  for (i64 j = 0; j < co; ++j) {
    double s = 0.0;
    for (i64 v = 0; v < voxels; ++v) s += dy[v * co + j];
    db[j] += s;
  }
}

void dwconv3d_fwd(const double* x, const double* w, const double* bias, double* y,
                  const Conv3dDims& d) {
  i64 c = d.ci;
  i64 outvox = d.b * d.oz * d.oy * d.ox;
  for (i64 v = 0; v < outvox; ++v) {
    i64 rem = v;
    i64 b = rem / (d.oz * d.oy * d.ox);
    rem -= b * d.oz * d.oy * d.ox;
    i64 oz = rem / (d.oy * d.ox);
    rem -= oz * d.oy * d.ox;
    i64 oy = rem / d.ox;
    i64 ox = rem - oy * d.ox;
    double* yr = y + v * c;
    if (bias) {
      std::memcpy(yr, bias, sizeof(double) * static_cast<std::size_t>(c));
    } else {
      std::memset(yr, 0, sizeof(double) * static_cast<std::size_t>(c));
    }
    for (i64 kz = 0; kz < d.kz; ++kz) {
      i64 iz = oz * d.stride + kz - d.pad;
      if (iz < 0 || iz >= d.iz) continue;
      for (i64 ky = 0; ky < d.ky; ++ky) {
        i64 iy = oy * d.stride + ky - d.pad;
        if (iy < 0 || iy >= d.iy) continue;
        for (i64 kx = 0; kx < d.kx; ++kx) {
          i64 ix = ox * d.stride + kx - d.pad;
          if (ix < 0 || ix >= d.ix) continue;
          const double* xr = x + (((b * d.iz + iz) * d.iy + iy) * d.ix + ix) * c;
          const double* wr = w + ((kz * d.ky + ky) * d.kx + kx) * c;
          for (i64 j = 0; j < c; ++j) yr[j] += xr[j] * wr[j];
        }
      }
    }
  }
}

void dwconv3d_bwd_input(const double* dy, const double* w, double* dx, const Conv3dDims& d) {
  i64 c = d.ci;
  i64 invox = d.b * d.iz * d.iy * d.ix;
  for (i64 v = 0; v < invox; ++v) {
    i64 rem = v;
    i64 b = rem / (d.iz * d.iy * d.ix);
    rem -= b * d.iz * d.iy * d.ix;
    i64 iz = rem / (d.iy * d.ix);
    rem -= iz * d.iy * d.ix;
    i64 iy = rem / d.ix;
    i64 ix = rem - iy * d.ix;
    double* dxr = dx + v * c;
    for (i64 kz = 0; kz < d.kz; ++kz) {
      i64 t = iz + d.pad - kz;
      if (t < 0 || t % d.stride) continue;
      i64 oz = t / d.stride;
      if (oz >= d.oz) continue;
      for (i64 ky = 0; ky < d.ky; ++ky) {
        i64 u = iy + d.pad - ky;
        if (u < 0 || u % d.stride) continue;
        i64 oy = u / d.stride;
        if (oy >= d.oy) continue;
        for (i64 kx = 0; kx < d.kx; ++kx) {
          i64 s = ix + d.pad - kx;
          if (s < 0 || s % d.stride) continue;
          i64 ox = s / d.stride;
          if (ox >= d.ox) continue;
          const double* dyr = dy + (((b * d.oz + oz) * d.oy + oy) * d.ox + ox) * c;
          const double* wr = w + ((kz * d.ky + ky) * d.kx + kx) * c;
          for (i64 j = 0; j < c; ++j) dxr[j] += dyr[j] * wr[j];
        }
      }
    }
  }
}

void dwconv3d_bwd_weight(const double* x, const double* dy, double* dw, const Conv3dDims& d) {
  i64 c = d.ci;
  i64 kcells = d.kz * d.ky * d.kx;
  for (i64 kc = 0; kc < kcells; ++kc) {
    i64 rem = kc;
    i64 kz = rem / (d.ky * d.kx);
    rem -= kz * d.ky * d.kx;
    i64 ky = rem / d.kx;
    i64 kx = rem - ky * d.kx;
    double* dwr = dw + kc * c;
    for (i64 b = 0; b < d.b; ++b) {
      for (i64 oz = 0; oz < d.oz; ++oz) {
        i64 iz = oz * d.stride + kz - d.pad;
        if (iz < 0 || iz >= d.iz) continue;
        for (i64 oy = 0; oy < d.oy; ++oy) {
          i64 iy = oy * d.stride + ky - d.pad;
          if (iy < 0 || iy >= d.iy) continue;
          for (i64 ox = 0; ox < d.ox; ++ox) {
            i64 ix = ox * d.stride + kx - d.pad;
            if (ix < 0 || ix >= d.ix) continue;
            const double* xr = x + (((b * d.iz + iz) * d.iy + iy) * d.ix + ix) * c;
            const double* dyr = dy + (((b * d.oz + oz) * d.oy + oy) * d.ox + ox) * c;
            for (i64 j = 0; j < c; ++j) dwr[j] += xr[j] * dyr[j];
          }
        }
      }
    }
  }
}

void deconv3d_fwd(const double* x, const double* w, const double* bias, double* y,
                  const Conv3dDims& d) {
  i64 outvox = d.b * d.oz * d.oy * d.ox;
  for (i64 v = 0; v < outvox; ++v) {
    i64 rem = v;
    i64 b = rem / (d.oz * d.oy * d.ox);
    rem -= b * d.oz * d.oy * d.ox;
    i64 oz = rem / (d.oy * d.ox);
    rem -= oz * d.oy * d.ox;
    i64 oy = rem / d.ox;
    i64 ox = rem - oy * d.ox;
    double* yr = y + v * d.co;
    if (bias) {
      std::memcpy(yr, bias, sizeof(double) * static_cast<std::size_t>(d.co));
    } else {
      std::memset(yr, 0, sizeof(double) * static_cast<std::size_t>(d.co));
    }
    for (i64 kz = 0; kz < d.kz; ++kz) {
      i64 t = oz - kz;
      if (t < 0 || t % d.stride) continue;
      i64 iz = t / d.stride;
      if (iz >= d.iz) continue;
      for (i64 ky = 0; ky < d.ky; ++ky) {
        i64 u = oy - ky;
        if (u < 0 || u % d.stride) continue;
        i64 iy = u / d.stride;
        if (iy >= d.iy) continue;
        for (i64 kx = 0; kx < d.kx; ++kx) {
          i64 s = ox - kx;
          if (s < 0 || s % d.stride) continue;
          i64 ix = s / d.stride;
          if (ix >= d.ix) continue;
          const double* xr = x + (((b * d.iz + iz) * d.iy + iy) * d.ix + ix) * d.ci;
          const double* wk = w + ((kz * d.ky + ky) * d.kx + kx) * d.ci * d.co;
          for (i64 ci = 0; ci < d.ci; ++ci) {
            double xv = xr[ci];
            const double* wr = wk + ci * d.co;
            for (i64 co = 0; co < d.co; ++co) yr[co] += xv * wr[co];
          }
        }
      }
    }
  }
}

void deconv3d_bwd_input(const double* dy, const double* w, double* dx, const Conv3dDims& d) {
  i64 invox = d.b * d.iz * d.iy * d.ix;
  for (i64 v = 0; v < invox; ++v) {
    i64 rem = v;
    i64 b = rem / (d.iz * d.iy * d.ix);
    rem -= b * d.iz * d.iy * d.ix;
    i64 iz = rem / (d.iy * d.ix);
    rem -= iz * d.iy * d.ix;
    i64 iy = rem / d.ix;
    i64 ix = rem - iy * d.ix;
    double* dxr = dx + v * d.ci;
    for (i64 kz = 0; kz < d.kz; ++kz) {
      i64 oz = iz * d.stride + kz;
      if (oz >= d.oz) continue;
      for (i64 ky = 0; ky < d.ky; ++ky) {
        i64 oy = iy * d.stride + ky;
        if (oy >= d.oy) continue;
        for (i64 kx = 0; kx < d.kx; ++kx) {
          i64 ox = ix * d.stride + kx;
          if (ox >= d.ox) continue;
          const double* dyr = dy + (((b * d.oz + oz) * d.oy + oy) * d.ox + ox) * d.co;
          const double* wk = w + ((kz * d.ky + ky) * d.kx + kx) * d.ci * d.co;
          for (i64 ci = 0; ci < d.ci; ++ci) {
            const double* wr = wk + ci * d.co;
            double s = 0.0;
            for (i64 co = 0; co < d.co; ++co) s += dyr[co] * wr[co];
            dxr[ci] += s;
          }
        }
      }
    }
  }
}

void deconv3d_bwd_weight(const double* x, const double* dy, double* dw, const Conv3dDims& d) {
  i64 kcells = d.kz * d.ky * d.kx * d.ci;
  for (i64 kc = 0; kc < kcells; ++kc) {
    i64 rem = kc;
    i64 kz = rem / (d.ky * d.kx * d.ci);
    rem -= kz * d.ky * d.kx * d.ci;
    i64 ky = rem / (d.kx * d.ci);
    rem -= ky * d.kx * d.ci;
    i64 kx = rem / d.ci;
    i64 ci = rem - kx * d.ci;
    double* dwr = dw + kc * d.co;
    for (i64 b = 0; b < d.b; ++b) {
      for (i64 iz = 0; iz < d.iz; ++iz) {
        i64 oz = iz * d.stride + kz;
        if (oz >= d.oz) continue;
        for (i64 iy = 0; iy < d.iy; ++iy) {
          i64 oy = iy * d.stride + ky;
          if (oy >= d.oy) continue;
          for (i64 ix = 0; ix < d.ix; ++ix) {
            i64 ox = ix * d.stride + kx;
            if (ox >= d.ox) continue;
            double xv = x[(((b * d.iz + iz) * d.iy + iy) * d.ix + ix) * d.ci + ci];
            if (xv == 0.0) continue;
            const double* dyr = dy + (((b * d.oz + oz) * d.oy + oy) * d.ox + ox) * d.co;
            for (i64 co = 0; co < d.co; ++co) dwr[co] += xv * dyr[co];
          }
        }
      }
    }
  }
}

void upsample_nearest3d_fwd(const double* x, double* y, i64 b, i64 iz, i64 iy, i64 ix, i64 c,
                            i64 f) {
  i64 oz = iz * f, oy = iy * f, ox = ix * f;
  i64 outvox = b * oz * oy * ox;
  for (i64 v = 0; v < outvox; ++v) {
    i64 rem = v;
    i64 bb = rem / (oz * oy * ox);
    rem -= bb * oz * oy * ox;
    i64 z = rem / (oy * ox);
    rem -= z * oy * ox;
    i64 yy = rem / ox;
    i64 xx = rem - yy * ox;
    const double* xr = x + (((bb * iz + z / f) * iy + yy / f) * ix + xx / f) * c;
    double* yr = y + v * c;
    std::memcpy(yr, xr, sizeof(double) * static_cast<std::size_t>(c));
  }
}

void upsample_nearest3d_bwd(const double* dy, double* dx, i64 b, i64 iz, i64 iy, i64 ix, i64 c,
                            i64 f) {
  i64 oz = iz * f, oy = iy * f, ox = ix * f;
  i64 invox = b * iz * iy * ix;
  for (i64 v = 0; v < invox; ++v) {
    i64 rem = v;
    i64 bb = rem / (iz * iy * ix);
    rem -= bb * iz * iy * ix;
    i64 z = rem / (iy * ix);
    rem -= z * iy * ix;
    i64 yy = rem / ix;
    i64 xx = rem - yy * ix;
    double* dxr = dx + v * c;
    for (i64 dz = 0; dz < f; ++dz)
      for (i64 dyy = 0; dyy < f; ++dyy)
        for (i64 dxx = 0; dxx < f; ++dxx) {
          const double* dyr =
              dy + (((bb * oz + z * f + dz) * oy + yy * f + dyy) * ox + xx * f + dxx) * c;
          for (i64 j = 0; j < c; ++j) dxr[j] += dyr[j];
        }
  }
}

namespace {

struct Lin {
  i64 lo, hi;
  double w1;  // weight of hi corner; lo gets 1-w1
};

inline Lin lin_coeff(i64 o, i64 in, i64 out) {
  double s = detail::resize_src(o, in, out);
  double fl = std::floor(s);
  i64 lo = static_cast<i64>(fl);
  double t = s - fl;
  i64 hi = lo + 1;
  if (lo < 0) {
    lo = 0;
    hi = 0;
    t = 0.0;
  } else if (hi > in - 1) {
    hi = in - 1;
    lo = in - 1;
    t = 0.0;
  }
  return {lo, hi, t};
}

}  // namespace

void upsample_trilinear3d_fwd(const double* x, double* y, i64 b, i64 iz, i64 iy, i64 ix, i64 c,
                              i64 oz, i64 oy, i64 ox) {
  for (i64 bb = 0; bb < b; ++bb) {
    for (i64 z = 0; z < oz; ++z) {
      Lin lz = lin_coeff(z, iz, oz);
      for (i64 yy = 0; yy < oy; ++yy) {
        Lin ly = lin_coeff(yy, iy, oy);
        for (i64 xx = 0; xx < ox; ++xx) {
          Lin lx = lin_coeff(xx, ix, ox);
          double* yr = y + (((bb * oz + z) * oy + yy) * ox + xx) * c;
          std::memset(yr, 0, sizeof(double) * static_cast<std::size_t>(c));
          for (int cz = 0; cz < 2; ++cz) {
            i64 sz = cz ? lz.hi : lz.lo;
            double wz = cz ? lz.w1 : 1.0 - lz.w1;
            if (wz == 0.0) continue;
            for (int cy = 0; cy < 2; ++cy) {
              i64 sy = cy ? ly.hi : ly.lo;
              double wy = cy ? ly.w1 : 1.0 - ly.w1;
              if (wy == 0.0) continue;
              for (int cx = 0; cx < 2; ++cx) {
                i64 sx = cx ? lx.hi : lx.lo;
                double wx = cx ? lx.w1 : 1.0 - lx.w1;
                if (wx == 0.0) continue;
                double wgt = wz * wy * wx;
                const double* xr = x + (((bb * iz + sz) * iy + sy) * ix + sx) * c;
                for (i64 j = 0; j < c; ++j) yr[j] += wgt * xr[j];
              }
            }
          }
        }
      }
    }
  }
}

void upsample_trilinear3d_bwd(const double* dy, double* dx, i64 b, i64 iz, i64 iy, i64 ix, i64 c,
                              i64 oz, i64 oy, i64 ox) {
  // scatter over outputs, one channel at a time (kept identical in the
  // parallel backend, which splits across channels)
  for (i64 j = 0; j < c; ++j) {
    for (i64 bb = 0; bb < b; ++bb) {
      for (i64 z = 0; z < oz; ++z) {
        Lin lz = lin_coeff(z, iz, oz);
        for (i64 yy = 0; yy < oy; ++yy) {
          Lin ly = lin_coeff(yy, iy, oy);
          for (i64 xx = 0; xx < ox; ++xx) {
            Lin lx = lin_coeff(xx, ix, ox);
            double g = dy[(((bb * oz + z) * oy + yy) * ox + xx) * c + j];
            if (g == 0.0) continue;
            for (int cz = 0; cz < 2; ++cz) {
              i64 sz = cz ? lz.hi : lz.lo;
              double wz = cz ? lz.w1 : 1.0 - lz.w1;
              if (wz == 0.0) continue;
              for (int cy = 0; cy < 2; ++cy) {
                i64 sy = cy ? ly.hi : ly.lo;
                double wy = cy ? ly.w1 : 1.0 - ly.w1;
                if (wy == 0.0) continue;
                for (int cx = 0; cx < 2; ++cx) {
                  i64 sx = cx ? lx.hi : lx.lo;
                  double wx = cx ? lx.w1 : 1.0 - lx.w1;
                  if (wx == 0.0) continue;
                  dx[(((bb * iz + sz) * iy + sy) * ix + sx) * c + j] += g * wz * wy * wx;
                }
              }
            }
          }
        }
      }
    }
  }
}

void avgpool3d_to_fwd(const double* x, double* y, i64 b, i64 iz, i64 iy, i64 ix, i64 c, i64 oz,
                      i64 oy, i64 ox) {
  for (i64 bb = 0; bb < b; ++bb) {
    for (i64 z = 0; z < oz; ++z) {
      i64 z0 = detail::bin_start(z, iz, oz), z1 = detail::bin_end(z, iz, oz);
      for (i64 yy = 0; yy < oy; ++yy) {
        i64 y0 = detail::bin_start(yy, iy, oy), y1 = detail::bin_end(yy, iy, oy);
        for (i64 xx = 0; xx < ox; ++xx) {
          i64 x0 = detail::bin_start(xx, ix, ox), x1 = detail::bin_end(xx, ix, ox);
          double* yr = y + (((bb * oz + z) * oy + yy) * ox + xx) * c;
          std::memset(yr, 0, sizeof(double) * static_cast<std::size_t>(c));
          double inv = 1.0 / static_cast<double>((z1 - z0) * (y1 - y0) * (x1 - x0));
          for (i64 sz = z0; sz < z1; ++sz)
            for (i64 sy = y0; sy < y1; ++sy)
              for (i64 sx = x0; sx < x1; ++sx) {
                const double* xr = x + (((bb * iz + sz) * iy + sy) * ix + sx) * c;
                for (i64 j = 0; j < c; ++j) yr[j] += xr[j];
              }
          for (i64 j = 0; j < c; ++j) yr[j] *= inv;
        }
      }
    }
  }
}

void avgpool3d_to_bwd(const double* dy, double* dx, i64 b, i64 iz, i64 iy, i64 ix, i64 c, i64 oz,
                      i64 oy, i64 ox) {
  i64 invox = b * iz * iy * ix;
  for (i64 v = 0; v < invox; ++v) {
    i64 rem = v;
    i64 bb = rem / (iz * iy * ix);
    rem -= bb * iz * iy * ix;
    i64 z = rem / (iy * ix);
    rem -= z * iy * ix;
    i64 yy = rem / ix;
    i64 xx = rem - yy * ix;
    double* dxr = dx + v * c;
    for (i64 o = 0; o < oz; ++o) {
      if (z < detail::bin_start(o, iz, oz) || z >= detail::bin_end(o, iz, oz)) continue;
      i64 nz = detail::bin_end(o, iz, oz) - detail::bin_start(o, iz, oz);
      for (i64 p = 0; p < oy; ++p) {
        if (yy < detail::bin_start(p, iy, oy) || yy >= detail::bin_end(p, iy, oy)) continue;
        i64 ny = detail::bin_end(p, iy, oy) - detail::bin_start(p, iy, oy);
        for (i64 q = 0; q < ox; ++q) {
          if (xx < detail::bin_start(q, ix, ox) || xx >= detail::bin_end(q, ix, ox)) continue;
          i64 nx = detail::bin_end(q, ix, ox) - detail::bin_start(q, ix, ox);
          double inv = 1.0 / static_cast<double>(nz * ny * nx);
          const double* dyr = dy + (((bb * oz + o) * oy + p) * ox + q) * c;
          for (i64 j = 0; j < c; ++j) dxr[j] += dyr[j] * inv;
        }
      }
    }
  }
}

void gather_rows_fwd(const double* x, const i64* idx, double* y, i64 b, i64 n, i64 m, i64 dd) {
  for (i64 bb = 0; bb < b; ++bb) {
    for (i64 i = 0; i < m; ++i) {
      const double* xr = x + (bb * n + idx[bb * m + i]) * dd;
      double* yr = y + (bb * m + i) * dd;
      std::memcpy(yr, xr, sizeof(double) * static_cast<std::size_t>(dd));
    }
  }
}

void gather_rows_bwd(const double* dy, const i64* idx, double* dx, i64 b, i64 n, i64 m, i64 dd) {
  // indices must be unique within each batch row
  for (i64 bb = 0; bb < b; ++bb) {
    for (i64 i = 0; i < m; ++i) {
      const double* dyr = dy + (bb * m + i) * dd;
      double* dxr = dx + (bb * n + idx[bb * m + i]) * dd;
      for (i64 j = 0; j < dd; ++j) dxr[j] += dyr[j];
    }
  }
}

void zone_mean_fwd(const double* x, const std::int32_t* zones, const i64* counts, double* y,
                   i64 voxels, i64 f, i64 nz) {
  for (i64 j = 0; j < f; ++j) {
    for (i64 z = 0; z < nz; ++z) y[z * f + j] = 0.0;
    for (i64 v = 0; v < voxels; ++v) {
      std::int32_t z = zones[v];
      if (z > 0) y[(z - 1) * f + j] += x[v * f + j];
    }
    for (i64 z = 0; z < nz; ++z)
      if (counts[z] > 0) y[z * f + j] /= static_cast<double>(counts[z]);
  }
}

void zone_mean_bwd(const double* dy, const std::int32_t* zones, const i64* counts, double* dx,
                   i64 voxels, i64 f, i64 nz) {
  (void)nz;
  for (i64 v = 0; v < voxels; ++v) {
    std::int32_t z = zones[v];
    if (z <= 0) continue;
    double inv = 1.0 / static_cast<double>(counts[z - 1]);
    const double* dyr = dy + (z - 1) * f;
    double* dxr = dx + v * f;
    for (i64 j = 0; j < f; ++j) dxr[j] += dyr[j] * inv;
  }
}

}  // namespace voxmae::kernels::serial
