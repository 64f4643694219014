#include "fdtr/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "fdtr/dataset.hpp"

namespace fdtr {

std::vector<Detection> decode_detections(const LayerOutput& out, int top_k) {
  const auto N = out.logits.dim(0), K = out.logits.dim(1);
  const auto L = out.logits.data();
  const auto B = out.boxes.data();
  std::vector<std::int64_t> idx(static_cast<std::size_t>(N * K));
  std::iota(idx.begin(), idx.end(), 0);
  std::vector<double> score(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) score[i] = 1.0 / (1.0 + std::exp(-L[i]));
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return score[a] > score[b]; });
  if (static_cast<int>(idx.size()) > top_k) idx.resize(static_cast<std::size_t>(top_k));
  std::vector<Detection> dets;
  for (auto i : idx) {
    const auto q = i / K;
    dets.push_back(Detection{Box{B[q * 4], B[q * 4 + 1], B[q * 4 + 2], B[q * 4 + 3]}, static_cast<int>(i % K),
                             score[static_cast<std::size_t>(i)]});
  }
  return dets;
}

std::string EvalReport::csv_row() const {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f", ap, ap50, ap75, aps, apm, apl,
                loc, cls, bg, fn);
  return buf;
}

std::string EvalReport::table() const {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "AP     %7.4f\nAP50   %7.4f\nAP75   %7.4f\nAPs    %7.4f\nAPm    %7.4f\nAPl    %7.4f\n"
                "Loc    %7.4f\nCls    %7.4f\nBG     %7.4f\nFN     %7.4f\n",
                ap, ap50, ap75, aps, apm, apl, loc, cls, bg, fn);
  return buf;
}

namespace {

int infer_classes(const std::vector<std::vector<Detection>>& dets, const std::vector<GroundTruth>& gts) {
  int k = 0;
  for (const auto& g : gts)
    for (int l : g.labels) k = std::max(k, l + 1);
  for (const auto& d : dets)
    for (const auto& x : d) k = std::max(k, x.label + 1);
  return k;
}

struct Scored {
  double score;
  bool tp;
};

// AP of one class from score-sorted match flags and the positive count.
double interpolated_ap(std::vector<Scored>& s, int npos) {
  std::stable_sort(s.begin(), s.end(), [](const Scored& a, const Scored& b) { return a.score > b.score; });
  const std::size_t n = s.size();
  std::vector<double> prec(n), rec(n);
  double tp = 0, fp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    (s[i].tp ? tp : fp) += 1.0;
    rec[i] = tp / npos;
    prec[i] = tp / (tp + fp);
  }
  for (std::size_t i = n; i-- > 1;) prec[i - 1] = std::max(prec[i - 1], prec[i]);
  double total = 0.0;
  for (int r = 0; r <= 100; ++r) {
    const double thr = r / 100.0;
    const auto it = std::lower_bound(rec.begin(), rec.end(), thr);
    if (it != rec.end()) total += prec[static_cast<std::size_t>(it - rec.begin())];
  }
  return total / 101.0;
}

}  // namespace

std::vector<double> per_class_ap(const std::vector<std::vector<Detection>>& dets,
                                 const std::vector<GroundTruth>& gts, double iou_threshold, double area_lo,
                                 double area_hi, const ApOptions& opt) {
  if (dets.size() != gts.size()) throw ContractError("per_class_ap: detections and ground truth differ in length");
  const int K = opt.num_classes > 0 ? opt.num_classes : infer_classes(dets, gts);
  const double px = static_cast<double>(opt.canvas) * opt.canvas;
  std::vector<double> out(static_cast<std::size_t>(K), -1.0);
  for (int k = 0; k < K; ++k) {
    std::vector<Scored> scored;
    int npos = 0;
    for (std::size_t im = 0; im < gts.size(); ++im) {
      // Ground truth of this class; out-of-range ones are "ignore" targets.
      std::vector<std::size_t> g;
      std::vector<char> ignore;
      for (std::size_t j = 0; j < gts[im].size(); ++j)
        if (gts[im].labels[j] == k) {
          const double a = gts[im].boxes[j].area() * px;
          g.push_back(j);
          ignore.push_back(a < area_lo || a > area_hi);
        }
      // Non-ignored first, as the greedy matcher prefers them.
      std::vector<std::size_t> order(g.size());
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return ignore[a] < ignore[b]; });
      for (char ig : ignore) npos += ig ? 0 : 1;

      std::vector<const Detection*> d;
      for (const auto& x : dets[im])
        if (x.label == k) d.push_back(&x);
      std::stable_sort(d.begin(), d.end(), [](auto a, auto b) { return a->score > b->score; });
      if (static_cast<int>(d.size()) > opt.max_dets) d.resize(static_cast<std::size_t>(opt.max_dets));

      std::vector<char> taken(g.size(), 0);
      for (const Detection* det : d) {
        double best = std::min(iou_threshold, 1.0 - 1e-10);
        int m = -1;
        for (auto oi : order) {
          if (taken[oi]) continue;
          // Once matched to a regular target, never fall back to an ignored one.
          if (m >= 0 && !ignore[static_cast<std::size_t>(m)] && ignore[oi]) break;
          const double iou = box_iou(det->box, gts[im].boxes[g[oi]]);
          if (iou < best) continue;
          best = iou;
          m = static_cast<int>(oi);
        }
        if (m >= 0) {
          taken[static_cast<std::size_t>(m)] = 1;
          if (!ignore[static_cast<std::size_t>(m)]) scored.push_back({det->score, true});
          continue;
        }
        const double a = det->box.area() * px;
        if (a < area_lo || a > area_hi) continue;  // unmatched and out of range: ignored
        scored.push_back({det->score, false});
      }
    }
    if (npos == 0) continue;
    out[static_cast<std::size_t>(k)] = scored.empty() ? 0.0 : interpolated_ap(scored, npos);
  }
  return out;
}

void compute_ap(const std::vector<std::vector<Detection>>& dets, const std::vector<GroundTruth>& gts,
                const ApOptions& opt, EvalReport& report) {
  const double s = std::pow(opt.canvas / 640.0, 2.0);
  const double small = 32.0 * 32.0 * s, medium = 96.0 * 96.0 * s, big = 1e10;
  auto mean_valid = [](const std::vector<double>& v, double& sum, int& n) {
    for (double x : v)
      if (x >= 0) {
        sum += x;
        ++n;
      }
  };
  auto averaged = [&](double lo, double hi, const std::vector<double>& thresholds) {
    double sum = 0;
    int n = 0;
    for (double t : thresholds) mean_valid(per_class_ap(dets, gts, t, lo, hi, opt), sum, n);
    return n > 0 ? sum / n : 0.0;
  };
  std::vector<double> all;
  for (int i = 0; i < 10; ++i) all.push_back(0.5 + 0.05 * i);
  report.ap = averaged(0.0, big, all);
  report.ap50 = averaged(0.0, big, {0.5});
  report.ap75 = averaged(0.0, big, {0.75});
  report.aps = averaged(0.0, small, all);
  report.apm = averaged(small, medium, all);
  report.apl = averaged(medium, big, all);
}

std::vector<ErrorKind> classify_errors(const std::vector<Detection>& dets, const GroundTruth& gt,
                                       const ErrorOptions& opt) {
  std::vector<const Detection*> d;
  for (const auto& x : dets)
    if (x.score >= opt.score_threshold) d.push_back(&x);
  std::stable_sort(d.begin(), d.end(), [](auto a, auto b) { return a->score > b->score; });
  std::vector<char> matched(gt.size(), 0);
  std::vector<ErrorKind> out;
  for (const Detection* p : d) {
    double same = 0.0, other = 0.0, free_same = 0.0;
    int free_idx = -1;
    for (std::size_t j = 0; j < gt.size(); ++j) {
      const double iou = box_iou(p->box, gt.boxes[j]);
      if (gt.labels[j] == p->label) {
        same = std::max(same, iou);
        if (!matched[j] && iou >= 0.5 && iou > free_same) {
          free_same = iou;
          free_idx = static_cast<int>(j);
        }
      } else {
        other = std::max(other, iou);
      }
    }
    if (free_idx >= 0) {
      matched[static_cast<std::size_t>(free_idx)] = 1;
      out.push_back(ErrorKind::correct);
    } else if (same < 0.5 && other >= 0.5) {
      out.push_back(ErrorKind::cls);
    } else if (same >= 0.1 && same < 0.5) {
      out.push_back(ErrorKind::loc);
    } else if (std::max(same, other) < 0.1) {
      out.push_back(ErrorKind::bg);
    } else {
      out.push_back(ErrorKind::other);  // duplicates and mixed cases
    }
  }
  return out;
}

void error_analysis(const std::vector<std::vector<Detection>>& dets, const std::vector<GroundTruth>& gts,
                    const ErrorOptions& opt, EvalReport& report) {
  if (dets.size() != gts.size()) throw ContractError("error_analysis: detections and ground truth differ in length");
  double nloc = 0, ncls = 0, nbg = 0, npred = 0, nfn = 0, ngt = 0;
  for (std::size_t im = 0; im < gts.size(); ++im) {
    for (ErrorKind k : classify_errors(dets[im], gts[im], opt)) {
      npred += 1;
      nloc += k == ErrorKind::loc;
      ncls += k == ErrorKind::cls;
      nbg += k == ErrorKind::bg;
    }
    for (const auto& g : gts[im].boxes) {
      ngt += 1;
      bool hit = false;
      for (const auto& x : dets[im])
        if (x.score >= opt.score_threshold && box_iou(x.box, g) >= 0.5) hit = true;
      nfn += hit ? 0 : 1;
    }
  }
  report.loc = npred > 0 ? nloc / npred : 0.0;
  report.cls = npred > 0 ? ncls / npred : 0.0;
  report.bg = npred > 0 ? nbg / npred : 0.0;
  report.fn = ngt > 0 ? nfn / ngt : 0.0;
}

std::vector<std::uint8_t> feature_norm_bytes(const PyramidLevel& level) {
  const auto n = level.tokens.dim(0), c = level.tokens.dim(1);
  if (n != level.size()) throw DimensionError("feature_norm: token count does not match the level grid");
  const auto D = level.tokens.data();
  std::vector<double> norm(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::int64_t j = 0; j < c; ++j) s += D[i * c + j] * D[i * c + j];
    norm[static_cast<std::size_t>(i)] = std::sqrt(s);
  }
  const auto [lo, hi] = std::minmax_element(norm.begin(), norm.end());
  const double range = *hi - *lo;
  std::vector<std::uint8_t> out(norm.size(), 0);
  if (range > 0)
    for (std::size_t i = 0; i < norm.size(); ++i)
      out[i] = static_cast<std::uint8_t>(std::lround((norm[i] - *lo) / range * 255.0));
  return out;
}

void feature_norm_image(const FeaturePyramid& snapshot, int level, const std::filesystem::path& path) {
  if (level < 0 || level >= static_cast<int>(snapshot.levels.size()))
    throw ContractError("feature_norm_image: level " + std::to_string(level) + " out of range (have " +
                        std::to_string(snapshot.levels.size()) + ")");
  const auto& lv = snapshot.levels[static_cast<std::size_t>(level)];
  write_pgm(path, feature_norm_bytes(lv), lv.w, lv.h);
}

Tensor overlay_detections(const Tensor& image, const std::vector<Detection>& dets, double threshold) {
  static const double palette[][3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {1, 1, 0}, {1, 0, 1}, {0, 1, 1}, {1, 1, 1}};
  Tensor out = image.clone();
  const auto h = image.dim(1), w = image.dim(2);
  auto D = out.data();
  auto put = [&](std::int64_t x, std::int64_t y, const double* c) {
    if (x < 0 || y < 0 || x >= w || y >= h) return;
    for (int ch = 0; ch < 3; ++ch) D[(ch * h + y) * w + x] = c[ch];
  };
  for (const auto& d : dets) {
    if (d.score < threshold) continue;
    const double* c = palette[d.label % 7];
    const auto x0 = static_cast<std::int64_t>(std::floor(d.box.x0() * w));
    const auto x1 = static_cast<std::int64_t>(std::ceil(d.box.x1() * w)) - 1;
    const auto y0 = static_cast<std::int64_t>(std::floor(d.box.y0() * h));
    const auto y1 = static_cast<std::int64_t>(std::ceil(d.box.y1() * h)) - 1;
    for (auto x = x0; x <= x1; ++x) {
      put(x, y0, c);
      put(x, y1, c);
    }
    for (auto y = y0; y <= y1; ++y) {
      put(x0, y, c);
      put(x1, y, c);
    }
  }
  return out;
}

}  // namespace fdtr
