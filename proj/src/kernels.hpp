#pragma once

// Internal numeric kernels shared by the differentiable ops.

#include <cmath>
#include <cstdint>
#include <vector>

namespace fdtr::kernels {

/// C[m,n] += A[m,k] * B[k,n]. Each output accumulates over k in order, so
/// results match a plain triple loop bit for bit. Four rows share each B row.
inline void gemm_nn(const double* __restrict A, const double* __restrict B, double* __restrict C,
                    std::int64_t m, std::int64_t k, std::int64_t n) {
  std::int64_t i = 0;
  for (; i + 4 <= m; i += 4) {
    double* __restrict c0 = C + i * n;
    double* __restrict c1 = c0 + n;
    double* __restrict c2 = c1 + n;
    double* __restrict c3 = c2 + n;
    const double* a = A + i * k;
    for (std::int64_t p = 0; p < k; ++p) {
      const double a0 = a[p], a1 = a[k + p], a2 = a[2 * k + p], a3 = a[3 * k + p];
      const double* __restrict b = B + p * n;
      for (std::int64_t j = 0; j < n; ++j) {
        const double bv = b[j];
        c0[j] += a0 * bv;
        c1[j] += a1 * bv;
        c2[j] += a2 * bv;
        c3[j] += a3 * bv;
      }
    }
  }
  for (; i < m; ++i) {
    double* __restrict c = C + i * n;
    const double* a = A + i * k;
    for (std::int64_t p = 0; p < k; ++p) {
      const double av = a[p];
      const double* __restrict b = B + p * n;
      for (std::int64_t j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

/// C[m,n] += A[m,k] * B[n,k]^T.
inline void gemm_nt(const double* A, const double* B, double* C, std::int64_t m, std::int64_t k,
                    std::int64_t n) {
  std::vector<double> bt(static_cast<std::size_t>(k * n));
  for (std::int64_t j = 0; j < n; ++j)
    for (std::int64_t p = 0; p < k; ++p) bt[p * n + j] = B[j * k + p];
  gemm_nn(A, bt.data(), C, m, k, n);
}

/// C[k,n] += A[m,k]^T * B[m,n]. Accumulates over m in order.
inline void gemm_tn(const double* __restrict A, const double* __restrict B, double* __restrict C,
                    std::int64_t m, std::int64_t k, std::int64_t n) {
  std::int64_t i = 0;
  for (; i + 2 <= m; i += 2) {
    const double* a0 = A + i * k;
    const double* a1 = a0 + k;
    const double* __restrict b0 = B + i * n;
    const double* __restrict b1 = b0 + n;
    for (std::int64_t p = 0; p < k; ++p) {
      const double x0 = a0[p], x1 = a1[p];
      double* __restrict c = C + p * n;
      for (std::int64_t j = 0; j < n; ++j) c[j] = (c[j] + x0 * b0[j]) + x1 * b1[j];
    }
  }
  for (; i < m; ++i) {
    const double* a = A + i * k;
    const double* __restrict b = B + i * n;
    for (std::int64_t p = 0; p < k; ++p) {
      const double av = a[p];
      double* __restrict c = C + p * n;
      for (std::int64_t j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// alpha_t * (1 - p_t)^gamma * BCE(x, t), with BCE evaluated stably.
inline double focal_term(double x, double t, double alpha, double gamma) {
  const double p = sigmoid(x);
  const double ce = std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::fabs(x)));
  const double pt = p * t + (1.0 - p) * (1.0 - t);
  const double at = alpha * t + (1.0 - alpha) * (1.0 - t);
  return at * ce * std::pow(1.0 - pt, gamma);
}

inline double focal_term_grad(double x, double t, double alpha, double gamma) {
  const double p = sigmoid(x);
  const double ce = std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::fabs(x)));
  const double pt = p * t + (1.0 - p) * (1.0 - t);
  const double at = alpha * t + (1.0 - alpha) * (1.0 - t);
  const double q = 1.0 - pt;
  const double mod = std::pow(q, gamma);
  const double dmod = q > 0.0 ? -gamma * std::pow(q, gamma - 1.0) * p * (1.0 - p) * (2.0 * t - 1.0) : 0.0;
  return at * ((p - t) * mod + ce * dmod);
}

/// Corner offsets and weights for a half-pixel-centered bilinear read of a
/// w x h grid at normalized (x, y). Out-of-range corners get valid=false.
struct BilinearTap {
  std::int64_t x0, y0;
  double fx, fy;
  bool valid[4];        // (x0,y0) (x0+1,y0) (x0,y0+1) (x0+1,y0+1)
  std::int64_t idx[4];  // y * w + x for valid corners
  double wt[4];
};

inline BilinearTap bilinear_tap(double nx, double ny, std::int64_t w, std::int64_t h) {
  BilinearTap t{};
  const double x = nx * static_cast<double>(w) - 0.5;
  const double y = ny * static_cast<double>(h) - 0.5;
  const double fx0 = std::floor(x);
  const double fy0 = std::floor(y);
  t.x0 = static_cast<std::int64_t>(fx0);
  t.y0 = static_cast<std::int64_t>(fy0);
  t.fx = x - fx0;
  t.fy = y - fy0;
  const std::int64_t xs[4] = {t.x0, t.x0 + 1, t.x0, t.x0 + 1};
  const std::int64_t ys[4] = {t.y0, t.y0, t.y0 + 1, t.y0 + 1};
  t.wt[0] = (1.0 - t.fx) * (1.0 - t.fy);
  t.wt[1] = t.fx * (1.0 - t.fy);
  t.wt[2] = (1.0 - t.fx) * t.fy;
  t.wt[3] = t.fx * t.fy;
  for (int c = 0; c < 4; ++c) {
    t.valid[c] = xs[c] >= 0 && xs[c] < w && ys[c] >= 0 && ys[c] < h;
    t.idx[c] = t.valid[c] ? ys[c] * w + xs[c] : 0;
  }
  return t;
}

}  // namespace fdtr::kernels
