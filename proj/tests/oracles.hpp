#pragma once

// Independent reference implementations the optimized code is compared with.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "fdtr/eval.hpp"
#include "fdtr/matching.hpp"
#include "fdtr/ops.hpp"

namespace fdtr::testing {

// Exhaustive minimum over injective maps from the smaller side.
inline double brute_force_min(const CostMatrix& c) {
  const bool flip = c.rows > c.cols;
  const int n = flip ? c.cols : c.rows, m = flip ? c.rows : c.cols;
  std::vector<int> perm(static_cast<std::size_t>(m));
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double s = 0;
    for (int i = 0; i < n; ++i) s += flip ? c.at(perm[i], i) : c.at(i, perm[i]);
    best = std::min(best, s);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

inline CostMatrix random_cost(Rng& rng, int r, int c, bool integer) {
  CostMatrix m{r, c, {}};
  for (int i = 0; i < r * c; ++i) m.data.push_back(integer ? static_cast<double>(rng.randint(0, 4)) : rng.uniform(-3, 5));
  return m;
}

// Independent evaluator: per (class, image) greedy matching that tries
// regular targets before ignored ones, then precision taken as the maximum
// over all ranks at or beyond each recall threshold.
inline double oracle_class_ap(const std::vector<std::vector<Detection>>& dets, const std::vector<GroundTruth>& gts, int k,
                       double thr, double lo, double hi, double px, bool& valid) {
  struct Row {
    double score;
    bool tp;
  };
  std::vector<Row> rows;
  int npos = 0;
  for (std::size_t im = 0; im < gts.size(); ++im) {
    std::vector<Box> gb;
    std::vector<bool> ign;
    for (std::size_t j = 0; j < gts[im].size(); ++j)
      if (gts[im].labels[j] == k) {
        gb.push_back(gts[im].boxes[j]);
        const double a = gts[im].boxes[j].area() * px;
        ign.push_back(a < lo || a > hi);
        npos += !ign.back();
      }
    std::vector<Detection> d;
    for (const auto& x : dets[im])
      if (x.label == k) d.push_back(x);
    std::sort(d.begin(), d.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
    std::vector<bool> used(gb.size(), false);
    for (const auto& x : d) {
      int m = -1;
      for (int pass = 0; pass < 2 && m < 0; ++pass) {
        double best = -1;
        for (std::size_t j = 0; j < gb.size(); ++j) {
          if (used[j] || ign[j] != (pass == 1)) continue;
          const double iou = box_iou(x.box, gb[j]);
          if (iou >= thr && iou > best) {
            best = iou;
            m = static_cast<int>(j);
          }
        }
      }
      if (m >= 0) {
        used[static_cast<std::size_t>(m)] = true;
        if (!ign[static_cast<std::size_t>(m)]) rows.push_back({x.score, true});
      } else {
        const double a = x.box.area() * px;
        if (a >= lo && a <= hi) rows.push_back({x.score, false});
      }
    }
  }
  valid = npos > 0;
  if (!valid) return 0;
  std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) { return a.score > b.score; });
  std::vector<double> prec, rec;
  int tp = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    tp += rows[i].tp;
    prec.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
    rec.push_back(static_cast<double>(tp) / npos);
  }
  double total = 0;
  for (int r = 0; r <= 100; ++r) {
    double best = 0;
    for (std::size_t i = 0; i < rows.size(); ++i)
      if (rec[i] >= r / 100.0) best = std::max(best, prec[i]);
    total += best;
  }
  return total / 101;
}

inline double oracle_ap(const std::vector<std::vector<Detection>>& dets, const std::vector<GroundTruth>& gts, int K,
                 const std::vector<double>& thresholds, double lo, double hi, int canvas) {
  double sum = 0;
  int n = 0;
  for (double t : thresholds)
    for (int k = 0; k < K; ++k) {
      bool valid = false;
      const double ap = oracle_class_ap(dets, gts, k, t, lo, hi, double(canvas) * canvas, valid);
      if (valid) {
        sum += ap;
        ++n;
      }
    }
  return n ? sum / n : 0.0;
}

// Weighted sum of per-point bilinear reads, computed one head at a time
// through the independent single-map sampler.
inline Tensor deformable_oracle(const Tensor& value, int h, int w, const Tensor& loc, const Tensor& weights, int heads,
                         int points) {
  const auto Q = loc.dim(0), d = value.dim(1), dh = d / heads;
  Tensor out = Tensor::zeros({Q, d});
  for (int hd = 0; hd < heads; ++hd) {
    Tensor map = Tensor::zeros({dh, h, w});
    for (std::int64_t c = 0; c < dh; ++c)
      for (std::int64_t i = 0; i < h * w; ++i) map.data()[c * h * w + i] = value[i * d + hd * dh + c];
    for (std::int64_t q = 0; q < Q; ++q)
      for (int p = 0; p < points; ++p) {
        const auto li = ((q * heads + hd) * points + p) * 2;
        const Tensor pt = Tensor::from({1, 2}, {loc[li], loc[li + 1]});
        const Tensor s = bilinear_sample(map, pt);  // [1, dh]
        const double wt = weights[(q * heads + hd) * points + p];
        for (std::int64_t c = 0; c < dh; ++c) out.data()[q * d + hd * dh + c] += wt * s[c];
      }
  }
  return out;
}
inline Box jittered(Rng& rng, const Box& b, double amount) {
  return Box{b.cx + rng.uniform(-amount, amount) * b.w, b.cy + rng.uniform(-amount, amount) * b.h,
             b.w * (1 + rng.uniform(-amount, amount)), b.h * (1 + rng.uniform(-amount, amount))};
}

struct ApScene {
  std::vector<GroundTruth> gts;
  std::vector<std::vector<Detection>> dets;
};

/// A few images with near-miss copies of the targets, label noise and
/// unrelated false positives.
inline ApScene random_ap_scene(Rng& rng, int K) {
  ApScene sc;
  const int n_images = static_cast<int>(rng.randint(1, 3));
  sc.gts.resize(static_cast<std::size_t>(n_images));
  sc.dets.resize(static_cast<std::size_t>(n_images));
  for (int im = 0; im < n_images; ++im) {
    auto& g = sc.gts[static_cast<std::size_t>(im)];
    auto& d = sc.dets[static_cast<std::size_t>(im)];
    const int n = static_cast<int>(rng.randint(0, 4));
    for (int j = 0; j < n; ++j) {
      const double w = rng.uniform(0.02, 0.5), h = rng.uniform(0.02, 0.5);
      const Box b{rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2), w, h};
      g.boxes.push_back(b);
      g.labels.push_back(static_cast<int>(rng.randint(0, K - 1)));
      const int copies = static_cast<int>(rng.randint(0, 2));
      for (int c = 0; c < copies; ++c) {
        const int label = rng.bernoulli(0.8) ? g.labels.back() : static_cast<int>(rng.randint(0, K - 1));
        d.push_back(Detection{jittered(rng, b, 0.25), label, rng.uniform(0, 1)});
      }
    }
    const int fps = static_cast<int>(rng.randint(0, 3));
    for (int j = 0; j < fps; ++j) {
      const double w = rng.uniform(0.02, 0.4), h = rng.uniform(0.02, 0.4);
      d.push_back(Detection{Box{rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), w, h},
                            static_cast<int>(rng.randint(0, K - 1)), rng.uniform(0, 1)});
    }
  }
  return sc;
}

/// Largest deviation of the evaluator's six AP fields from the oracle.
inline double ap_oracle_gap(const ApScene& sc, int K, int canvas) {
  EvalReport r;
  ApOptions o;
  o.canvas = canvas;
  o.num_classes = K;
  compute_ap(sc.dets, sc.gts, o, r);
  const double s = (canvas / 640.0) * (canvas / 640.0), sm = 1024 * s, md = 9216 * s, big = 1e10;
  std::vector<double> all;
  for (int i = 0; i < 10; ++i) all.push_back(0.5 + 0.05 * i);
  const double gaps[] = {
      std::abs(r.ap - oracle_ap(sc.dets, sc.gts, K, all, 0, big, canvas)),
      std::abs(r.ap50 - oracle_ap(sc.dets, sc.gts, K, {0.5}, 0, big, canvas)),
      std::abs(r.ap75 - oracle_ap(sc.dets, sc.gts, K, {0.75}, 0, big, canvas)),
      std::abs(r.aps - oracle_ap(sc.dets, sc.gts, K, all, 0, sm, canvas)),
      std::abs(r.apm - oracle_ap(sc.dets, sc.gts, K, all, sm, md, canvas)),
      std::abs(r.apl - oracle_ap(sc.dets, sc.gts, K, all, md, big, canvas)),
  };
  return *std::max_element(std::begin(gaps), std::end(gaps));
}

}  // namespace fdtr::testing
