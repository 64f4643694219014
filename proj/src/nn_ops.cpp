// Convolution, attention and sampling ops with hand-written backward rules.

#include <algorithm>
#include <cmath>
#include <limits>

#include "fdtr/ops.hpp"
#include "kernels.hpp"

namespace fdtr {

using detail::grad_of;
using detail::record;

Tensor bilinear_sample(const Tensor& map, const Tensor& points) {
  if (map.rank() != 3) throw DimensionError("bilinear_sample: map must be [c,h,w], got " + shape_str(map.shape()));
  if (points.rank() != 2 || points.dim(1) != 2)
    throw DimensionError("bilinear_sample: points must be [p,2], got " + shape_str(points.shape()));
  const auto c = map.dim(0), h = map.dim(1), w = map.dim(2);
  const auto np = points.dim(0);
  const auto hw = h * w;
  Tensor out = Tensor::zeros({np, c});
  const auto M = map.data();
  const auto P = points.data();
  auto Y = out.data();
  for (std::int64_t p = 0; p < np; ++p) {
    const auto tap = kernels::bilinear_tap(P[p * 2], P[p * 2 + 1], w, h);
    for (int k = 0; k < 4; ++k) {
      if (!tap.valid[k]) continue;
      for (std::int64_t ch = 0; ch < c; ++ch) Y[p * c + ch] += tap.wt[k] * M[ch * hw + tap.idx[k]];
    }
  }
  TensorImpl* mi = map.impl();
  TensorImpl* pi = points.impl();
  TensorImpl* oi = out.impl();
  record("bilinear_sample", {&map, &points}, out, [mi, pi, oi, c, h, w, np, hw] {
    const auto& G = oi->grad;
    const auto& P = pi->data;
    const auto& M = mi->data;
    std::span<double> gm, gp;
    if (mi->requires_grad) gm = grad_of(*mi);
    if (pi->requires_grad) gp = grad_of(*pi);
    for (std::int64_t p = 0; p < np; ++p) {
      const auto tap = kernels::bilinear_tap(P[p * 2], P[p * 2 + 1], w, h);
      if (!gm.empty()) {
        for (int k = 0; k < 4; ++k) {
          if (!tap.valid[k]) continue;
          for (std::int64_t ch = 0; ch < c; ++ch) gm[ch * hw + tap.idx[k]] += tap.wt[k] * G[p * c + ch];
        }
      }
      if (!gp.empty()) {
        double dx = 0.0, dy = 0.0;
        for (std::int64_t ch = 0; ch < c; ++ch) {
          double v[4];
          for (int k = 0; k < 4; ++k) v[k] = tap.valid[k] ? M[ch * hw + tap.idx[k]] : 0.0;
          const double dfx = (1.0 - tap.fy) * (v[1] - v[0]) + tap.fy * (v[3] - v[2]);
          const double dfy = (1.0 - tap.fx) * (v[2] - v[0]) + tap.fx * (v[3] - v[1]);
          dx += G[p * c + ch] * dfx;
          dy += G[p * c + ch] * dfy;
        }
        gp[p * 2] += dx * static_cast<double>(w);
        gp[p * 2 + 1] += dy * static_cast<double>(h);
      }
    }
  });
  return out;
}

namespace {

// cols[(c*k + ky)*k + kx, oy*wo + ox] = x[c, oy*s - pad + ky, ox*s - pad + kx]
void im2col(const double* x, std::int64_t C, std::int64_t H, std::int64_t W, int k, int s, int pad,
            std::int64_t ho, std::int64_t wo, double* cols) {
  for (std::int64_t c = 0; c < C; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        double* row = cols + ((c * k + ky) * k + kx) * ho * wo;
        for (std::int64_t oy = 0; oy < ho; ++oy) {
          const std::int64_t iy = oy * s - pad + ky;
          for (std::int64_t ox = 0; ox < wo; ++ox) {
            const std::int64_t ix = ox * s - pad + kx;
            row[oy * wo + ox] = (iy >= 0 && iy < H && ix >= 0 && ix < W) ? x[(c * H + iy) * W + ix] : 0.0;
          }
        }
      }
}

void col2im(const double* cols, std::int64_t C, std::int64_t H, std::int64_t W, int k, int s, int pad,
            std::int64_t ho, std::int64_t wo, double* gx) {
  for (std::int64_t c = 0; c < C; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const double* row = cols + ((c * k + ky) * k + kx) * ho * wo;
        for (std::int64_t oy = 0; oy < ho; ++oy) {
          const std::int64_t iy = oy * s - pad + ky;
          if (iy < 0 || iy >= H) continue;
          for (std::int64_t ox = 0; ox < wo; ++ox) {
            const std::int64_t ix = ox * s - pad + kx;
            if (ix >= 0 && ix < W) gx[(c * H + iy) * W + ix] += row[oy * wo + ox];
          }
        }
      }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad) {
  if (x.rank() != 3 || w.rank() != 4 || w.dim(1) != x.dim(0) || w.dim(2) != w.dim(3))
    throw DimensionError("conv2d: input " + shape_str(x.shape()) + " with weight " + shape_str(w.shape()));
  if (stride < 1 || pad < 0) throw ContractError("conv2d: invalid stride/padding");
  const auto C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const auto O = w.dim(0);
  const int k = static_cast<int>(w.dim(2));
  const auto ho = (H + 2 * pad - k) / stride + 1;
  const auto wo = (W + 2 * pad - k) / stride + 1;
  if (ho <= 0 || wo <= 0) throw DimensionError("conv2d: kernel larger than padded input " + shape_str(x.shape()));
  const auto ckk = C * k * k;
  const auto hw = ho * wo;
  std::vector<double> cols(static_cast<std::size_t>(ckk * hw));
  im2col(x.data().data(), C, H, W, k, stride, pad, ho, wo, cols.data());
  Tensor out = Tensor::zeros({O, ho, wo});
  double* Y = out.data().data();
  kernels::gemm_nn(w.data().data(), cols.data(), Y, O, ckk, hw);
  const bool has_bias = bias.defined();
  if (has_bias) {
    if (bias.numel() != O) throw DimensionError("conv2d: bias " + shape_str(bias.shape()));
    for (std::int64_t o = 0; o < O; ++o)
      for (std::int64_t i = 0; i < hw; ++i) Y[o * hw + i] += bias[o];
  }
  TensorImpl* xi = x.impl();
  TensorImpl* wi = w.impl();
  TensorImpl* bi = has_bias ? bias.impl() : nullptr;
  TensorImpl* oi = out.impl();
  record("conv2d", {&x, &w, has_bias ? &bias : nullptr}, out,
         [xi, wi, bi, oi, cols = std::move(cols), C, H, W, O, k, stride, pad, ho, wo, ckk, hw] {
           const double* G = oi->grad.data();
           if (wi->requires_grad) kernels::gemm_nt(G, cols.data(), grad_of(*wi).data(), O, hw, ckk);
           if (bi != nullptr && bi->requires_grad) {
             auto gb = grad_of(*bi);
             for (std::int64_t o = 0; o < O; ++o)
               for (std::int64_t i = 0; i < hw; ++i) gb[o] += G[o * hw + i];
           }
           if (xi->requires_grad) {
             std::vector<double> gcols(static_cast<std::size_t>(ckk * hw), 0.0);
             kernels::gemm_tn(wi->data.data(), G, gcols.data(), O, ckk, hw);
             col2im(gcols.data(), C, H, W, k, stride, pad, ho, wo, grad_of(*xi).data());
           }
         });
  return out;
}

Tensor multihead_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads, const BoolMask* mask,
                           std::vector<double>* probs) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.dim(1) != k.dim(1) || k.shape() != v.shape())
    throw DimensionError("multihead_attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) +
                         ", v " + shape_str(v.shape()));
  const auto n = q.dim(0), m = k.dim(0), d = q.dim(1);
  if (heads < 1 || d % heads != 0) throw ContractError("multihead_attention: heads must divide the width");
  if (mask && mask->shape != Shape{n, m})
    throw DimensionError("multihead_attention: mask " + shape_str(mask->shape) + " for scores [" +
                         std::to_string(n) + "," + std::to_string(m) + "]");
  const auto dh = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> P(static_cast<std::size_t>(heads * n * m), 0.0);
  Tensor out = Tensor::zeros({n, d});
  const auto Q = q.data();
  const auto K = k.data();
  const auto V = v.data();
  auto O = out.data();
  std::vector<double> row(static_cast<std::size_t>(m));
  for (int h = 0; h < heads; ++h) {
    const auto off = h * dh;
    for (std::int64_t i = 0; i < n; ++i) {
      const std::uint8_t* allow = mask ? mask->allow.data() + i * m : nullptr;
      double mx = -std::numeric_limits<double>::infinity();
      bool any = false;
      for (std::int64_t j = 0; j < m; ++j) {
        if (allow && !allow[j]) continue;
        double s = 0.0;
        for (std::int64_t c = 0; c < dh; ++c) s += Q[i * d + off + c] * K[j * d + off + c];
        row[j] = s * sc;
        mx = std::max(mx, row[j]);
        any = true;
      }
      if (!any) throw ContractError("multihead_attention: query row " + std::to_string(i) + " is fully masked");
      double z = 0.0;
      double* p = P.data() + (h * n + i) * m;
      for (std::int64_t j = 0; j < m; ++j) {
        if (allow && !allow[j]) continue;
        p[j] = std::exp(row[j] - mx);
        z += p[j];
      }
      for (std::int64_t j = 0; j < m; ++j)
        if (!allow || allow[j]) p[j] /= z;
      for (std::int64_t j = 0; j < m; ++j) {
        if (allow && !allow[j]) continue;
        const double pj = p[j];
        for (std::int64_t c = 0; c < dh; ++c) O[i * d + off + c] += pj * V[j * d + off + c];
      }
    }
  }
  if (probs) *probs = P;
  std::vector<std::uint8_t> allow_copy;
  if (mask) allow_copy = mask->allow;
  TensorImpl* qi = q.impl();
  TensorImpl* ki = k.impl();
  TensorImpl* vi = v.impl();
  TensorImpl* oi = out.impl();
  record("multihead_attention", {&q, &k, &v}, out,
         [qi, ki, vi, oi, P = std::move(P), allow_copy = std::move(allow_copy), n, m, d, dh, heads, sc] {
           const auto& G = oi->grad;
           const auto& Q = qi->data;
           const auto& K = ki->data;
           const auto& V = vi->data;
           std::span<double> gq, gk, gv;
           if (qi->requires_grad) gq = grad_of(*qi);
           if (ki->requires_grad) gk = grad_of(*ki);
           if (vi->requires_grad) gv = grad_of(*vi);
           const bool masked = !allow_copy.empty();
           std::vector<double> dp(static_cast<std::size_t>(m));
           for (int h = 0; h < heads; ++h) {
             const auto off = h * dh;
             for (std::int64_t i = 0; i < n; ++i) {
               const double* p = P.data() + (h * n + i) * m;
               const std::uint8_t* allow = masked ? allow_copy.data() + i * m : nullptr;
               double dot = 0.0;
               for (std::int64_t j = 0; j < m; ++j) {
                 if (allow && !allow[j]) {
                   dp[j] = 0.0;
                   continue;
                 }
                 double s = 0.0;
                 for (std::int64_t c = 0; c < dh; ++c) s += G[i * d + off + c] * V[j * d + off + c];
                 dp[j] = s;
                 dot += s * p[j];
                 if (!gv.empty())
                   for (std::int64_t c = 0; c < dh; ++c) gv[j * d + off + c] += p[j] * G[i * d + off + c];
               }
               for (std::int64_t j = 0; j < m; ++j) {
                 if (allow && !allow[j]) continue;
                 const double ds = p[j] * (dp[j] - dot) * sc;
                 if (ds == 0.0) continue;
                 if (!gq.empty())
                   for (std::int64_t c = 0; c < dh; ++c) gq[i * d + off + c] += ds * K[j * d + off + c];
                 if (!gk.empty())
                   for (std::int64_t c = 0; c < dh; ++c) gk[j * d + off + c] += ds * Q[i * d + off + c];
               }
             }
           }
         });
  return out;
}

Tensor deformable_attention(const Tensor& value, std::span<const LevelShape> levels, const Tensor& loc,
                            const Tensor& weights) {
  if (value.rank() != 2 || loc.rank() != 5 || weights.rank() != 4)
    throw DimensionError("deformable_attention: value " + shape_str(value.shape()) + ", loc " +
                         shape_str(loc.shape()) + ", weights " + shape_str(weights.shape()));
  const auto nq = loc.dim(0), H = loc.dim(1), L = loc.dim(2), P = loc.dim(3);
  if (loc.dim(4) != 2 || weights.shape() != Shape{nq, H, L, P} ||
      static_cast<std::int64_t>(levels.size()) != L)
    throw DimensionError("deformable_attention: inconsistent loc " + shape_str(loc.shape()) + " / weights " +
                         shape_str(weights.shape()) + " / " + std::to_string(levels.size()) + " levels");
  const auto T = value.dim(0), d = value.dim(1);
  if (d % H != 0) throw ContractError("deformable_attention: heads must divide the width");
  for (const auto& lv : levels)
    if (lv.start < 0 || lv.start + lv.h * lv.w > T)
      throw DimensionError("deformable_attention: level extends past value rows");
  const auto dh = d / H;
  std::vector<LevelShape> lvls(levels.begin(), levels.end());
  Tensor out = Tensor::zeros({nq, d});
  const auto Vd = value.data();
  const auto Ld = loc.data();
  const auto Wd = weights.data();
  auto O = out.data();
  for (std::int64_t q = 0; q < nq; ++q)
    for (std::int64_t h = 0; h < H; ++h) {
      double* o = O.data() + q * d + h * dh;
      for (std::int64_t l = 0; l < L; ++l) {
        const auto& lv = lvls[static_cast<std::size_t>(l)];
        for (std::int64_t p = 0; p < P; ++p) {
          const auto s = ((q * H + h) * L + l) * P + p;
          const double aw = Wd[s];
          const auto tap = kernels::bilinear_tap(Ld[s * 2], Ld[s * 2 + 1], lv.w, lv.h);
          for (int c4 = 0; c4 < 4; ++c4) {
            if (!tap.valid[c4]) continue;
            const double f = aw * tap.wt[c4];
            const double* v = Vd.data() + (lv.start + tap.idx[c4]) * d + h * dh;
            for (std::int64_t c = 0; c < dh; ++c) o[c] += f * v[c];
          }
        }
      }
    }
  TensorImpl* vi = value.impl();
  TensorImpl* li = loc.impl();
  TensorImpl* wi = weights.impl();
  TensorImpl* oi = out.impl();
  record("deformable_attention", {&value, &loc, &weights}, out,
         [vi, li, wi, oi, lvls = std::move(lvls), nq, H, L, P, d, dh] {
           const auto& G = oi->grad;
           const auto& Vd = vi->data;
           const auto& Ld = li->data;
           const auto& Wd = wi->data;
           std::span<double> gv, gl, gw;
           if (vi->requires_grad) gv = grad_of(*vi);
           if (li->requires_grad) gl = grad_of(*li);
           if (wi->requires_grad) gw = grad_of(*wi);
           for (std::int64_t q = 0; q < nq; ++q)
             for (std::int64_t h = 0; h < H; ++h) {
               const double* g = G.data() + q * d + h * dh;
               for (std::int64_t l = 0; l < L; ++l) {
                 const auto& lv = lvls[static_cast<std::size_t>(l)];
                 for (std::int64_t p = 0; p < P; ++p) {
                   const auto s = ((q * H + h) * L + l) * P + p;
                   const double aw = Wd[s];
                   const auto tap = kernels::bilinear_tap(Ld[s * 2], Ld[s * 2 + 1], lv.w, lv.h);
                   // gdot[k] = <g, v_corner_k>
                   double gdot[4] = {0, 0, 0, 0};
                   for (int c4 = 0; c4 < 4; ++c4) {
                     if (!tap.valid[c4]) continue;
                     const auto row = (lv.start + tap.idx[c4]) * d + h * dh;
                     double acc = 0.0;
                     for (std::int64_t c = 0; c < dh; ++c) acc += g[c] * Vd[row + c];
                     gdot[c4] = acc;
                     if (!gv.empty()) {
                       const double f = aw * tap.wt[c4];
                       for (std::int64_t c = 0; c < dh; ++c) gv[row + c] += f * g[c];
                     }
                   }
                   if (!gw.empty())
                     gw[s] += tap.wt[0] * gdot[0] + tap.wt[1] * gdot[1] + tap.wt[2] * gdot[2] + tap.wt[3] * gdot[3];
                   if (!gl.empty()) {
                     const double dfx = (1.0 - tap.fy) * (gdot[1] - gdot[0]) + tap.fy * (gdot[3] - gdot[2]);
                     const double dfy = (1.0 - tap.fx) * (gdot[2] - gdot[0]) + tap.fx * (gdot[3] - gdot[1]);
                     gl[s * 2] += aw * dfx * static_cast<double>(lv.w);
                     gl[s * 2 + 1] += aw * dfy * static_cast<double>(lv.h);
                   }
                 }
               }
             }
         });
  return out;
}

}  // namespace fdtr
