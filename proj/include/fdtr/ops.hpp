#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "fdtr/tensor.hpp"

namespace fdtr {

/// Boolean mask with the same layout rules as a Tensor; nonzero = allowed.
struct BoolMask {
  Shape shape;
  std::vector<std::uint8_t> allow;

  static BoolMask all(Shape shape);
  bool at(std::int64_t flat) const { return allow[static_cast<std::size_t>(flat)] != 0; }
};

// Elementwise. For binary ops `b` may be broadcast when its shape is a
// suffix of `a`'s shape (bias and positional-term adds).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor clamp_min(const Tensor& a, double lo);
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
/// log(x / (1 - x)) with x clamped to [eps, 1 - eps].
Tensor inverse_sigmoid(const Tensor& a, double eps = 1e-5);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor abs(const Tensor& a);

// Reductions.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// [n, d] -> [d], the mean over rows.
Tensor mean_rows(const Tensor& a);

// Shape manipulation. Every result owns its storage.
Tensor reshape(const Tensor& a, Shape shape);
/// Swaps the last two dimensions.
Tensor transpose(const Tensor& a);
/// Concatenates along the first dimension; trailing dims must agree.
Tensor concat_rows(std::span<const Tensor> parts);
Tensor slice_rows(const Tensor& a, std::int64_t begin, std::int64_t end);
/// Slice of the last dimension, [begin, end).
Tensor slice_last(const Tensor& a, std::int64_t begin, std::int64_t end);
/// Concatenates along the last dimension; leading dims must agree.
Tensor concat_last(std::span<const Tensor> parts);
Tensor gather_rows(const Tensor& a, std::span<const std::int64_t> rows);

/// a[.., m, k] x b[.., k, n]. `b` may be 2-D and shared across a's batch.
Tensor matmul(const Tensor& a, const Tensor& b);
/// x[.., in] * w[in, out] + bias[out]; bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

Tensor softmax(const Tensor& logits);
/// Softmax over the last dim restricted to allowed positions; masked
/// outputs are exactly 0. The mask shape must equal the logits shape or be
/// a suffix of it. A row with no allowed position is a ContractError.
Tensor masked_softmax(const Tensor& logits, const BoolMask& mask);
Tensor log_softmax(const Tensor& logits);

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);

/// Samples map[c, h, w] at normalized points[p, 2] given as (x, y) in
/// [0,1]^2 with half-pixel centers. Reads outside the map are zero.
Tensor bilinear_sample(const Tensor& map, const Tensor& points);

/// x[C, H, W] convolved with w[O, C, k, k] plus bias[O].
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad);

/// Scaled dot-product attention split into `heads` over the channel dim.
/// q[n, d], k[m, d], v[m, d] -> [n, d]. When `probs` is non-null it
/// receives the attention weights laid out as [heads, n, m].
Tensor multihead_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                           const BoolMask* mask = nullptr, std::vector<double>* probs = nullptr);

struct LevelShape {
  std::int64_t h = 0;
  std::int64_t w = 0;
  std::int64_t start = 0;  // first row of this level inside the flattened value tensor
};

/// Multi-scale deformable attention core.
///   value   [T, d]            rows of all levels, level l at levels[l].start
///   loc     [Q, H, L, P, 2]   normalized (x, y) sampling locations
///   weights [Q, H, L, P]      attention weights (already normalized)
/// Returns [Q, d]; head h reads channels [h*d/H, (h+1)*d/H).
Tensor deformable_attention(const Tensor& value, std::span<const LevelShape> levels,
                            const Tensor& loc, const Tensor& weights);

/// Sum over all elements of the sigmoid focal loss; targets are constants.
Tensor sigmoid_focal_loss(const Tensor& logits, const Tensor& targets, double alpha,
                          double gamma);

/// Mean softmax cross-entropy of logits[n, K] against integer labels.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

}  // namespace fdtr
