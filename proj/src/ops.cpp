#include "fdtr/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "kernels.hpp"

namespace fdtr {

using detail::grad_of;
using detail::record;

BoolMask BoolMask::all(Shape shape) {
  BoolMask m;
  m.allow.assign(static_cast<std::size_t>(shape_numel(shape)), 1);
  m.shape = std::move(shape);
  return m;
}

namespace {

bool is_suffix(const Shape& whole, const Shape& tail) {
  if (tail.size() > whole.size()) return false;
  return std::equal(tail.begin(), tail.end(), whole.end() - static_cast<std::ptrdiff_t>(tail.size()));
}

template <class F, class D>
Tensor unary(std::string_view name, const Tensor& a, F f, D dfdx) {
  Tensor out = Tensor::zeros(a.shape());
  auto x = a.data();
  auto y = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  TensorImpl* ai = a.impl();
  TensorImpl* oi = out.impl();
  record(name, {&a}, out, [ai, oi, dfdx] {
    if (!ai->requires_grad) return;
    auto ga = grad_of(*ai);
    const auto& go = oi->grad;
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i] * dfdx(ai->data[i], oi->data[i]);
  });
  return out;
}

// da(x, y, z) and db(x, y, z) are partials of z = f(x, y).
template <class F, class DA, class DB>
Tensor binary(std::string_view name, const Tensor& a, const Tensor& b, F f, DA da, DB db) {
  if (!is_suffix(a.shape(), b.shape()))
    throw DimensionError(std::string(name) + ": cannot broadcast " + shape_str(b.shape()) +
                         " onto " + shape_str(a.shape()));
  Tensor out = Tensor::zeros(a.shape());
  const auto x = a.data();
  const auto y = b.data();
  auto z = out.data();
  const std::size_t nb = y.size();
  for (std::size_t i = 0; i < x.size(); ++i) z[i] = f(x[i], y[i % nb]);
  TensorImpl* ai = a.impl();
  TensorImpl* bi = b.impl();
  TensorImpl* oi = out.impl();
  record(name, {&a, &b}, out, [ai, bi, oi, da, db] {
    const auto& go = oi->grad;
    const std::size_t nb = bi->data.size();
    if (ai->requires_grad) {
      auto ga = grad_of(*ai);
      for (std::size_t i = 0; i < ga.size(); ++i)
        ga[i] += go[i] * da(ai->data[i], bi->data[i % nb], oi->data[i]);
    }
    if (bi->requires_grad) {
      auto gb = grad_of(*bi);
      for (std::size_t i = 0; i < go.size(); ++i)
        gb[i % nb] += go[i] * db(ai->data[i], bi->data[i % nb], oi->data[i]);
    }
  });
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double z) { return -z / y; });
}

// Ties route the gradient to `a`.
Tensor maximum(const Tensor& a, const Tensor& b) {
  return binary(
      "maximum", a, b, [](double x, double y) { return x >= y ? x : y; },
      [](double x, double y, double) { return x >= y ? 1.0 : 0.0; },
      [](double x, double y, double) { return x >= y ? 0.0 : 1.0; });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  return binary(
      "minimum", a, b, [](double x, double y) { return x <= y ? x : y; },
      [](double x, double y, double) { return x <= y ? 1.0 : 0.0; },
      [](double x, double y, double) { return x <= y ? 0.0 : 1.0; });
}

Tensor scale(const Tensor& a, double s) {
  return unary("scale", a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary("add_scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor clamp_min(const Tensor& a, double lo) {
  return unary(
      "clamp_min", a, [lo](double x) { return x < lo ? lo : x; },
      [lo](double x, double) { return x < lo ? 0.0 : 1.0; });
}

Tensor relu(const Tensor& a) {
  return unary(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& a) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return unary(
      "gelu", a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
      [](double x, double) {
        return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
      });
}

static double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Tensor sigmoid(const Tensor& a) {
  return unary("sigmoid", a, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Tensor inverse_sigmoid(const Tensor& a, double eps) {
  return unary(
      "inverse_sigmoid", a,
      [eps](double x) {
        const double c = std::clamp(x, eps, 1.0 - eps);
        return std::log(c / (1.0 - c));
      },
      [eps](double x, double) {
        if (x < eps || x > 1.0 - eps) return 0.0;
        return 1.0 / (x * (1.0 - x));
      });
}

Tensor exp(const Tensor& a) {
  return unary("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary("log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor abs(const Tensor& a) {
  return unary(
      "abs", a, [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  Tensor out = Tensor::scalar(s);
  TensorImpl* ai = a.impl();
  TensorImpl* oi = out.impl();
  record("sum", {&a}, out, [ai, oi] {
    if (!ai->requires_grad) return;
    auto ga = grad_of(*ai);
    const double g = oi->grad[0];
    for (auto& v : ga) v += g;
  });
  return out;
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor mean_rows(const Tensor& a) {
  if (a.rank() != 2) throw DimensionError("mean_rows expects [n, d], got " + shape_str(a.shape()));
  const auto n = a.dim(0), d = a.dim(1);
  Tensor out = Tensor::zeros({d});
  auto y = out.data();
  const auto x = a.data();
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < d; ++j) y[j] += x[i * d + j];
  for (auto& v : y) v /= static_cast<double>(n);
  TensorImpl* ai = a.impl();
  TensorImpl* oi = out.impl();
  record("mean_rows", {&a}, out, [ai, oi, n, d] {
    if (!ai->requires_grad) return;
    auto ga = grad_of(*ai);
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = 0; j < d; ++j) ga[i * d + j] += oi->grad[j] / static_cast<double>(n);
  });
  return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw DimensionError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  Tensor out = Tensor::from(std::move(shape), std::vector<double>(a.data().begin(), a.data().end()));
  TensorImpl* ai = a.impl();
  TensorImpl* oi = out.impl();
  record("reshape", {&a}, out, [ai, oi] {
    if (!ai->requires_grad) return;
    auto ga = grad_of(*ai);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += oi->grad[i];
  });
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.rank() < 2) throw DimensionError("transpose needs rank >= 2, got " + shape_str(a.shape()));
  const auto r = a.dim(-2), c = a.dim(-1);
  const auto batch = a.numel() / (r * c);
  Shape s = a.shape();
  std::swap(s[s.size() - 1], s[s.size() - 2]);
  Tensor out = Tensor::zeros(s);
  const auto x = a.data();
  auto y = out.data();
  for (std::int64_t b = 0; b < batch; ++b)
    for (std::int64_t i = 0; i < r; ++i)
      for (std::int64_t j = 0; j < c; ++j) y[b * r * c + j * r + i] = x[b * r * c + i * c + j];
  TensorImpl* ai = a.impl();
  TensorImpl* oi = out.impl();
  record("transpose", {&a}, out, [ai, oi, r, c, batch] {
    if (!ai->requires_grad) return;
    auto ga = grad_of(*ai);
    for (std::int64_t b = 0; b < batch; ++b)
      for (std::int64_t i = 0; i < r; ++i)
        for (std::int64_t j = 0; j < c; ++j) ga[b * r * c + i * c + j] += oi->grad[b * r * c + j * r + i];
  });
  return out;
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_rows of zero tensors");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::int64_t rows = 0;
  for (const auto& p : parts) {
    Shape t(p.shape().begin() + 1, p.shape().end());
    if (t != tail)
      throw DimensionError("concat_rows: " + shape_str(p.shape()) + " vs " + shape_str(parts[0].shape()));
    rows += p.dim(0);
  }
  Shape s = parts[0].shape();
  s[0] = rows;
  Tensor out = Tensor::zeros(s);
  auto y = out.data();
  std::size_t off = 0;
  std::vector<TensorImpl*> ins;
  bool any = false;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), y.begin() + static_cast<std::ptrdiff_t>(off));
    off += p.data().size();
    ins.push_back(p.impl());
    any = any || p.requires_grad();
  }
  if (any && active_tape() != nullptr) {
    Tape::Entry e;
    e.name = "concat_rows";
    for (const auto& p : parts) e.inputs.push_back(p.impl_ptr());
    out.impl()->requires_grad = true;
    e.output = out.impl_ptr();
    TensorImpl* oi = out.impl();
    e.backward = [ins, oi] {
      std::size_t off = 0;
      for (TensorImpl* p : ins) {
        if (p->requires_grad) {
          auto g = grad_of(*p);
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[off + i];
        }
        off += p->data.size();
      }
    };
    active_tape()->record(std::move(e));
  }
  return out;
}

Tensor slice_rows(const Tensor& a, std::int64_t begin, std::int64_t end) {
  if (begin < 0 || end > a.dim(0) || begin >= end)
    throw DimensionError("slice_rows [" + std::to_string(begin) + "," + std::to_string(end) + ") of " +
                         shape_str(a.shape()));
  const auto row = a.numel() / a.dim(0);
  Shape s = a.shape();
  s[0] = end - begin;
  std::vector<double> v(a.data().begin() + begin * row, a.data().begin() + end * row);
  Tensor out = Tensor::from(s, std::move(v));
  TensorImpl* ai = a.impl();
  TensorImpl* oi = out.impl();
  record("slice_rows", {&a}, out, [ai, oi, begin, row] {
    if (!ai->requires_grad) return;
    auto ga = grad_of(*ai);
    for (std::size_t i = 0; i < oi->grad.size(); ++i) ga[static_cast<std::size_t>(begin * row) + i] += oi->grad[i];
  });
  return out;
}

Tensor slice_last(const Tensor& a, std::int64_t begin, std::int64_t end) {
  const auto c = a.dim(-1);
  if (begin < 0 || end > c || begin >= end)
    throw DimensionError("slice_last [" + std::to_string(begin) + "," + std::to_string(end) + ") of " +
                         shape_str(a.shape()));
  const auto rows = a.numel() / c;
  const auto w = end - begin;
  Shape s = a.shape();
  s.back() = w;
  Tensor out = Tensor::zeros(s);
  auto y = out.data();
  const auto x = a.data();
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t j = 0; j < w; ++j) y[r * w + j] = x[r * c + begin + j];
  TensorImpl* ai = a.impl();
  TensorImpl* oi = out.impl();
  record("slice_last", {&a}, out, [ai, oi, rows, c, w, begin] {
    if (!ai->requires_grad) return;
    auto ga = grad_of(*ai);
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t j = 0; j < w; ++j) ga[r * c + begin + j] += oi->grad[r * w + j];
  });
  return out;
}

Tensor concat_last(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_last of zero tensors");
  const auto rows = parts[0].numel() / parts[0].dim(-1);
  Shape lead(parts[0].shape().begin(), parts[0].shape().end() - 1);
  std::int64_t total = 0;
  std::vector<std::int64_t> widths;
  for (const auto& p : parts) {
    if (Shape(p.shape().begin(), p.shape().end() - 1) != lead)
      throw DimensionError("concat_last: " + shape_str(p.shape()) + " vs " + shape_str(parts[0].shape()));
    widths.push_back(p.dim(-1));
    total += p.dim(-1);
  }
  Shape s = lead;
  s.push_back(total);
  Tensor out = Tensor::zeros(s);
  auto y = out.data();
  std::int64_t col = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto x = parts[k].data();
    const auto w = widths[k];
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t j = 0; j < w; ++j) y[r * total + col + j] = x[r * w + j];
    col += w;
  }
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (any && active_tape() != nullptr) {
    Tape::Entry e;
    e.name = "concat_last";
    std::vector<TensorImpl*> ins;
    for (const auto& p : parts) {
      e.inputs.push_back(p.impl_ptr());
      ins.push_back(p.impl());
    }
    out.impl()->requires_grad = true;
    e.output = out.impl_ptr();
    TensorImpl* oi = out.impl();
    e.backward = [ins, widths, oi, rows, total] {
      std::int64_t col = 0;
      for (std::size_t k = 0; k < ins.size(); ++k) {
        const auto w = widths[k];
        if (ins[k]->requires_grad) {
          auto g = grad_of(*ins[k]);
          for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t j = 0; j < w; ++j) g[r * w + j] += oi->grad[r * total + col + j];
        }
        col += w;
      }
    };
    active_tape()->record(std::move(e));
  }
  return out;
}

Tensor gather_rows(const Tensor& a, std::span<const std::int64_t> rows) {
  if (rows.empty()) throw DimensionError("gather_rows with no indices");
  const auto n = a.dim(0);
  const auto row = a.numel() / n;
  Shape s = a.shape();
  s[0] = static_cast<std::int64_t>(rows.size());
  Tensor out = Tensor::zeros(s);
  auto y = out.data();
  const auto x = a.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= n) throw DimensionError("gather_rows index out of range");
    std::copy_n(x.begin() + rows[i] * row, row, y.begin() + static_cast<std::ptrdiff_t>(i) * row);
  }
  std::vector<std::int64_t> idx(rows.begin(), rows.end());
  TensorImpl* ai = a.impl();
  TensorImpl* oi = out.impl();
  record("gather_rows", {&a}, out, [ai, oi, idx, row] {
    if (!ai->requires_grad) return;
    auto ga = grad_of(*ai);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::int64_t j = 0; j < row; ++j) ga[idx[i] * row + j] += oi->grad[static_cast<std::int64_t>(i) * row + j];
  });
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2)
    throw DimensionError("matmul needs rank >= 2 operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  const auto m = a.dim(-2), k = a.dim(-1), n = b.dim(-1);
  if (b.dim(-2) != k)
    throw DimensionError("matmul inner dimensions disagree: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  const auto batch = a.numel() / (m * k);
  const auto bbatch = b.numel() / (k * n);
  if (bbatch != 1 && !(bbatch == batch && Shape(a.shape().begin(), a.shape().end() - 2) ==
                                              Shape(b.shape().begin(), b.shape().end() - 2)))
    throw DimensionError("matmul batch dimensions not broadcastable: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  Shape s = a.shape();
  s.back() = n;
  Tensor out = Tensor::zeros(s);
  const double* A = a.data().data();
  const double* B = b.data().data();
  double* C = out.data().data();
  const bool shared_b = bbatch == 1;
  if (shared_b) {
    kernels::gemm_nn(A, B, C, batch * m, k, n);
  } else {
    for (std::int64_t t = 0; t < batch; ++t) kernels::gemm_nn(A + t * m * k, B + t * k * n, C + t * m * n, m, k, n);
  }
  TensorImpl* ai = a.impl();
  TensorImpl* bi = b.impl();
  TensorImpl* oi = out.impl();
  record("matmul", {&a, &b}, out, [ai, bi, oi, m, k, n, batch, shared_b] {
    const double* G = oi->grad.data();
    if (ai->requires_grad) {
      double* GA = grad_of(*ai).data();
      if (shared_b) {
        kernels::gemm_nt(G, bi->data.data(), GA, batch * m, n, k);
      } else {
        for (std::int64_t t = 0; t < batch; ++t)
          kernels::gemm_nt(G + t * m * n, bi->data.data() + t * k * n, GA + t * m * k, m, n, k);
      }
    }
    if (bi->requires_grad) {
      double* GB = grad_of(*bi).data();
      if (shared_b) {
        kernels::gemm_tn(ai->data.data(), G, GB, batch * m, k, n);
      } else {
        for (std::int64_t t = 0; t < batch; ++t)
          kernels::gemm_tn(ai->data.data() + t * m * k, G + t * m * n, GB + t * k * n, m, k, n);
      }
    }
  });
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (w.rank() != 2 || x.dim(-1) != w.dim(0))
    throw DimensionError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  const auto in = w.dim(0), outd = w.dim(1);
  const auto rows = x.numel() / in;
  Shape s = x.shape();
  s.back() = outd;
  Tensor out = Tensor::zeros(s);
  double* Y = out.data().data();
  const bool has_bias = bias.defined();
  if (has_bias && bias.numel() != outd) throw DimensionError("linear: bias " + shape_str(bias.shape()));
  kernels::gemm_nn(x.data().data(), w.data().data(), Y, rows, in, outd);
  if (has_bias) {
    const double* bb = bias.data().data();
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t j = 0; j < outd; ++j) Y[r * outd + j] += bb[j];
  }
  TensorImpl* xi = x.impl();
  TensorImpl* wi = w.impl();
  TensorImpl* bi = has_bias ? bias.impl() : nullptr;
  TensorImpl* oi = out.impl();
  record("linear", {&x, &w, has_bias ? &bias : nullptr}, out, [xi, wi, bi, oi, rows, in, outd] {
    const double* G = oi->grad.data();
    if (xi->requires_grad) kernels::gemm_nt(G, wi->data.data(), grad_of(*xi).data(), rows, outd, in);
    if (wi->requires_grad) kernels::gemm_tn(xi->data.data(), G, grad_of(*wi).data(), rows, in, outd);
    if (bi != nullptr && bi->requires_grad) {
      auto gb = grad_of(*bi);
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < outd; ++j) gb[j] += G[r * outd + j];
    }
  });
  return out;
}

namespace {

// Row-wise softmax restricted to allowed entries. `allow` may be null.
void softmax_rows(const double* x, double* y, std::int64_t rows, std::int64_t n, const BoolMask* mask) {
  const std::int64_t mrows = mask ? static_cast<std::int64_t>(mask->allow.size()) / n : 1;
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xr = x + r * n;
    double* yr = y + r * n;
    const std::uint8_t* ar = mask ? mask->allow.data() + (r % mrows) * n : nullptr;
    double mx = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::int64_t j = 0; j < n; ++j)
      if (!ar || ar[j]) {
        mx = std::max(mx, xr[j]);
        any = true;
      }
    if (!any) throw ContractError("masked_softmax: row " + std::to_string(r) + " has no allowed position");
    double s = 0.0;
    for (std::int64_t j = 0; j < n; ++j) {
      if (ar && !ar[j]) {
        yr[j] = 0.0;
        continue;
      }
      yr[j] = std::exp(xr[j] - mx);
      s += yr[j];
    }
    for (std::int64_t j = 0; j < n; ++j)
      if (!ar || ar[j]) yr[j] /= s;
  }
}

Tensor softmax_impl(const Tensor& logits, const BoolMask* mask) {
  const auto n = logits.dim(-1);
  const auto rows = logits.numel() / n;
  if (mask) {
    if (!is_suffix(logits.shape(), mask->shape) || mask->shape.empty() || mask->shape.back() != n)
      throw DimensionError("masked_softmax: mask " + shape_str(mask->shape) + " vs logits " +
                           shape_str(logits.shape()));
  }
  Tensor out = Tensor::zeros(logits.shape());
  softmax_rows(logits.data().data(), out.data().data(), rows, n, mask);
  TensorImpl* ai = logits.impl();
  TensorImpl* oi = out.impl();
  record(mask ? "masked_softmax" : "softmax", {&logits}, out, [ai, oi, rows, n] {
    if (!ai->requires_grad) return;
    auto ga = grad_of(*ai);
    const auto& y = oi->data;
    const auto& g = oi->grad;
    for (std::int64_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::int64_t j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
      for (std::int64_t j = 0; j < n; ++j) ga[r * n + j] += y[r * n + j] * (g[r * n + j] - dot);
    }
  });
  return out;
}

}  // namespace

Tensor softmax(const Tensor& logits) { return softmax_impl(logits, nullptr); }

Tensor masked_softmax(const Tensor& logits, const BoolMask& mask) { return softmax_impl(logits, &mask); }

Tensor log_softmax(const Tensor& logits) {
  const auto n = logits.dim(-1);
  const auto rows = logits.numel() / n;
  Tensor out = Tensor::zeros(logits.shape());
  const auto x = logits.data();
  auto y = out.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::int64_t j = 0; j < n; ++j) mx = std::max(mx, x[r * n + j]);
    double s = 0.0;
    for (std::int64_t j = 0; j < n; ++j) s += std::exp(x[r * n + j] - mx);
    const double lse = mx + std::log(s);
    for (std::int64_t j = 0; j < n; ++j) y[r * n + j] = x[r * n + j] - lse;
  }
  TensorImpl* ai = logits.impl();
  TensorImpl* oi = out.impl();
  record("log_softmax", {&logits}, out, [ai, oi, rows, n] {
    if (!ai->requires_grad) return;
    auto ga = grad_of(*ai);
    for (std::int64_t r = 0; r < rows; ++r) {
      double gs = 0.0;
      for (std::int64_t j = 0; j < n; ++j) gs += oi->grad[r * n + j];
      for (std::int64_t j = 0; j < n; ++j)
        ga[r * n + j] += oi->grad[r * n + j] - std::exp(oi->data[r * n + j]) * gs;
    }
  });
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const auto d = x.dim(-1);
  if (gamma.numel() != d || beta.numel() != d)
    throw DimensionError("layer_norm: input " + shape_str(x.shape()) + " with gamma " +
                         shape_str(gamma.shape()) + " and beta " + shape_str(beta.shape()));
  if (!(eps > 0.0)) throw ContractError("layer_norm: eps must be positive");
  const auto rows = x.numel() / d;
  Tensor out = Tensor::zeros(x.shape());
  std::vector<double> xhat(static_cast<std::size_t>(x.numel()));
  std::vector<double> rstd(static_cast<std::size_t>(rows));
  const auto X = x.data();
  const auto gm = gamma.data();
  const auto bt = beta.data();
  auto Y = out.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    double mu = 0.0;
    for (std::int64_t j = 0; j < d; ++j) mu += X[r * d + j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      const double c = X[r * d + j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::int64_t j = 0; j < d; ++j) {
      const double h = (X[r * d + j] - mu) * rs;
      xhat[r * d + j] = h;
      Y[r * d + j] = h * gm[j] + bt[j];
    }
  }
  TensorImpl* xi = x.impl();
  TensorImpl* gi = gamma.impl();
  TensorImpl* bi = beta.impl();
  TensorImpl* oi = out.impl();
  record("layer_norm", {&x, &gamma, &beta}, out,
         [xi, gi, bi, oi, xhat = std::move(xhat), rstd = std::move(rstd), rows, d] {
           const auto& G = oi->grad;
           if (gi->requires_grad) {
             auto gg = grad_of(*gi);
             for (std::int64_t r = 0; r < rows; ++r)
               for (std::int64_t j = 0; j < d; ++j) gg[j] += G[r * d + j] * xhat[r * d + j];
           }
           if (bi->requires_grad) {
             auto gb = grad_of(*bi);
             for (std::int64_t r = 0; r < rows; ++r)
               for (std::int64_t j = 0; j < d; ++j) gb[j] += G[r * d + j];
           }
           if (xi->requires_grad) {
             auto gx = grad_of(*xi);
             const auto& gm = gi->data;
             for (std::int64_t r = 0; r < rows; ++r) {
               double m1 = 0.0, m2 = 0.0;
               for (std::int64_t j = 0; j < d; ++j) {
                 const double dh = G[r * d + j] * gm[j];
                 m1 += dh;
                 m2 += dh * xhat[r * d + j];
               }
               m1 /= static_cast<double>(d);
               m2 /= static_cast<double>(d);
               for (std::int64_t j = 0; j < d; ++j) {
                 const double dh = G[r * d + j] * gm[j];
                 gx[r * d + j] += rstd[r] * (dh - m1 - xhat[r * d + j] * m2);
               }
             }
           }
         });
  return out;
}

Tensor sigmoid_focal_loss(const Tensor& logits, const Tensor& targets, double alpha, double gamma) {
  if (logits.shape() != targets.shape())
    throw DimensionError("sigmoid_focal_loss: logits " + shape_str(logits.shape()) + " vs targets " +
                         shape_str(targets.shape()));
  const auto X = logits.data();
  const auto T = targets.data();
  double total = 0.0;
  for (std::size_t i = 0; i < X.size(); ++i) total += kernels::focal_term(X[i], T[i], alpha, gamma);
  Tensor out = Tensor::scalar(total);
  TensorImpl* xi = logits.impl();
  TensorImpl* ti = targets.impl();
  TensorImpl* oi = out.impl();
  // Targets are listed so the tape keeps them alive for the backward pass.
  record("sigmoid_focal_loss", {&logits, &targets}, out, [xi, ti, oi, alpha, gamma] {
    if (!xi->requires_grad) return;
    auto gx = grad_of(*xi);
    const double g = oi->grad[0];
    for (std::size_t i = 0; i < gx.size(); ++i)
      gx[i] += g * kernels::focal_term_grad(xi->data[i], ti->data[i], alpha, gamma);
  });
  return out;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != static_cast<std::int64_t>(labels.size()))
    throw DimensionError("cross_entropy: logits " + shape_str(logits.shape()) + " with " +
                         std::to_string(labels.size()) + " labels");
  const auto k = logits.dim(1);
  std::vector<double> onehot(static_cast<std::size_t>(logits.numel()), 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= k) throw ContractError("cross_entropy: label out of range");
    onehot[i * static_cast<std::size_t>(k) + static_cast<std::size_t>(labels[i])] =
        -1.0 / static_cast<double>(labels.size());
  }
  Tensor w = Tensor::from(logits.shape(), std::move(onehot));
  return sum(mul(log_softmax(logits), w));
}

}  // namespace fdtr
