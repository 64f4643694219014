#include "fdtr/matching.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace fdtr {

namespace {
constexpr double kMinArea = 1e-9;
}

double giou(const Box& a, const Box& b) {
  const double area_a = std::max(a.area(), kMinArea), area_b = std::max(b.area(), kMinArea);
  const double iw = std::max(0.0, std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0()));
  const double ih = std::max(0.0, std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0()));
  const double inter = iw * ih;
  const double uni = area_a + area_b - inter;
  const double ew = std::max(a.x1(), b.x1()) - std::min(a.x0(), b.x0());
  const double eh = std::max(a.y1(), b.y1()) - std::min(a.y0(), b.y0());
  const double encl = std::max(ew * eh, kMinArea);
  return inter / uni - (encl - uni) / encl;
}

CostMatrix pairwise_cost(const LayerOutput& pred, const GroundTruth& gt, const LossWeights& w) {
  CostMatrix c;
  c.rows = static_cast<int>(pred.logits.dim(0));
  c.cols = static_cast<int>(gt.size());
  c.data.assign(static_cast<std::size_t>(c.rows) * c.cols, 0.0);
  const auto K = pred.logits.dim(1);
  const auto Lg = pred.logits.data();
  const auto Bx = pred.boxes.data();
  for (int i = 0; i < c.rows; ++i) {
    const Box pb{Bx[i * 4], Bx[i * 4 + 1], Bx[i * 4 + 2], Bx[i * 4 + 3]};
    for (int j = 0; j < c.cols; ++j) {
      const int label = gt.labels[static_cast<std::size_t>(j)];
      if (label < 0 || label >= K) throw ContractError("pairwise_cost: label " + std::to_string(label) + " out of range");
      const double p = 1.0 / (1.0 + std::exp(-Lg[i * K + label]));
      const double pos = kFocalAlpha * std::pow(1.0 - p, kFocalGamma) * -std::log(p + 1e-8);
      const double neg = (1.0 - kFocalAlpha) * std::pow(p, kFocalGamma) * -std::log(1.0 - p + 1e-8);
      const Box& gb = gt.boxes[static_cast<std::size_t>(j)];
      const double l1 = std::fabs(pb.cx - gb.cx) + std::fabs(pb.cy - gb.cy) + std::fabs(pb.w - gb.w) +
                        std::fabs(pb.h - gb.h);
      c.data[static_cast<std::size_t>(i) * c.cols + j] = w.cls * (pos - neg) + w.l1 * l1 + w.giou * (1.0 - giou(pb, gb));
    }
  }
  return c;
}

MatchResult hungarian_match(const CostMatrix& cost) {
  for (double v : cost.data)
    if (std::isnan(v)) throw ContractError("hungarian_match: NaN in cost matrix");
    else if (!std::isfinite(v)) throw ContractError("hungarian_match: infinite cost");
  MatchResult res;
  if (cost.rows == 0 || cost.cols == 0) return res;

  // Potentials-based Kuhn-Munkres on n <= m; the taller side is transposed.
  const bool flip = cost.rows > cost.cols;
  const int n = flip ? cost.cols : cost.rows;
  const int m = flip ? cost.rows : cost.cols;
  auto a = [&](int i, int j) { return flip ? cost.at(j - 1, i - 1) : cost.at(i - 1, j - 1); };
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0), minv(m + 1);
  std::vector<int> p(m + 1, 0), way(m + 1, 0);
  std::vector<char> used(m + 1);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = a(i0, j) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  for (int j = 1; j <= m; ++j) {
    if (p[j] == 0) continue;
    const int r = flip ? j - 1 : p[j] - 1;
    const int c = flip ? p[j] - 1 : j - 1;
    res.pairs.emplace_back(r, c);
  }
  std::sort(res.pairs.begin(), res.pairs.end());
  for (auto [r, c] : res.pairs) res.total += cost.at(r, c);
  return res;
}

Tensor giou_rows(const Tensor& a, const Tensor& b) {
  auto col = [](const Tensor& t, int i) { return slice_last(t, i, i + 1); };
  auto corners = [&](const Tensor& t, Tensor& x0, Tensor& y0, Tensor& x1, Tensor& y1, Tensor& area) {
    const Tensor cx = col(t, 0), cy = col(t, 1), w = col(t, 2), h = col(t, 3);
    const Tensor hw = scale(w, 0.5), hh = scale(h, 0.5);
    x0 = sub(cx, hw);
    x1 = add(cx, hw);
    y0 = sub(cy, hh);
    y1 = add(cy, hh);
    area = clamp_min(mul(w, h), kMinArea);
  };
  Tensor ax0, ay0, ax1, ay1, aa, bx0, by0, bx1, by1, ba;
  corners(a, ax0, ay0, ax1, ay1, aa);
  corners(b, bx0, by0, bx1, by1, ba);
  const Tensor iw = clamp_min(sub(minimum(ax1, bx1), maximum(ax0, bx0)), 0.0);
  const Tensor ih = clamp_min(sub(minimum(ay1, by1), maximum(ay0, by0)), 0.0);
  const Tensor inter = mul(iw, ih);
  const Tensor uni = sub(add(aa, ba), inter);
  const Tensor encl = clamp_min(mul(sub(maximum(ax1, bx1), minimum(ax0, bx0)), sub(maximum(ay1, by1), minimum(ay0, by0))),
                                kMinArea);
  const Tensor g = sub(div(inter, uni), div(sub(encl, uni), encl));
  return reshape(g, {g.dim(0)});
}

LossTerms set_loss(const LayerOutput& pred, const GroundTruth& gt, const MatchResult& match, const LossWeights& w) {
  const auto N = pred.logits.dim(0), K = pred.logits.dim(1);
  const double nb = std::max<double>(1.0, static_cast<double>(gt.size()));
  Tensor targets = Tensor::zeros({N, K});
  for (auto [p, g] : match.pairs) targets.data()[p * K + gt.labels[static_cast<std::size_t>(g)]] = 1.0;
  LossTerms out;
  Tensor cls = scale(sigmoid_focal_loss(pred.logits, targets, kFocalAlpha, kFocalGamma), 1.0 / nb);
  out.cls = cls.item();
  out.total = scale(cls, w.cls);
  if (match.pairs.empty()) return out;

  std::vector<std::int64_t> rows;
  std::vector<double> tb;
  for (auto [p, g] : match.pairs) {
    rows.push_back(p);
    const Box& b = gt.boxes[static_cast<std::size_t>(g)];
    tb.insert(tb.end(), {b.cx, b.cy, b.w, b.h});
  }
  const auto n = static_cast<std::int64_t>(rows.size());
  const Tensor pb = gather_rows(pred.boxes, rows);
  const Tensor target = Tensor::from({n, 4}, std::move(tb));
  Tensor l1 = scale(sum(abs(sub(pb, target))), 1.0 / nb);
  Tensor gl = scale(add_scalar(scale(sum(giou_rows(pb, target)), -1.0), static_cast<double>(n)), 1.0 / nb);
  out.l1 = l1.item();
  out.giou = gl.item();
  out.total = add(add(out.total, scale(l1, w.l1)), scale(gl, w.giou));
  return out;
}

LossTerms detection_loss(const DetectionOutput& out, const GroundTruth& gt, const LossWeights& w) {
  LossTerms total;
  for (const auto& layer : out.layers) {
    const MatchResult m = hungarian_match(pairwise_cost(layer, gt, w));
    LossTerms t = set_loss(layer, gt, m, w);
    total.total = total.total.defined() ? add(total.total, t.total) : t.total;
    // Logged terms describe the final layer.
    total.cls = t.cls;
    total.l1 = t.l1;
    total.giou = t.giou;
  }
  return total;
}

}  // namespace fdtr
