#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "fdtr/matching.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

using namespace fdtr;
using namespace fdtr::testing;

namespace {

double focal_term(double logit, bool positive) {
  const double p = 1.0 / (1.0 + std::exp(-logit));
  if (positive) return 0.25 * (1 - p) * (1 - p) * -std::log(p);
  return 0.75 * p * p * -std::log(1 - p);
}

Box box_of(const Tensor& b, int i) { return Box{b[i * 4], b[i * 4 + 1], b[i * 4 + 2], b[i * 4 + 3]}; }

}  // namespace

TEST_CASE("hungarian: matches brute force on 1000 random instances") {
  Rng rng(2024);
  int ties = 0;
  for (int t = 0; t < 1000; ++t) {
    const int r = static_cast<int>(rng.randint(1, 7)), c = static_cast<int>(rng.randint(1, 7));
    const bool integer = t % 3 == 0;  // many ties
    const CostMatrix m = random_cost(rng, r, c, integer);
    const MatchResult res = hungarian_match(m);
    REQUIRE(res.pairs.size() == static_cast<std::size_t>(std::min(r, c)));
    std::vector<int> seen_r, seen_c;
    double s = 0;
    for (auto [i, j] : res.pairs) {
      seen_r.push_back(i);
      seen_c.push_back(j);
      s += m.at(i, j);
    }
    CHECK(std::is_sorted(seen_r.begin(), seen_r.end()));
    CHECK(std::adjacent_find(seen_r.begin(), seen_r.end()) == seen_r.end());
    std::sort(seen_c.begin(), seen_c.end());
    CHECK(std::adjacent_find(seen_c.begin(), seen_c.end()) == seen_c.end());
    const double best = brute_force_min(m);
    if (integer) {
      CHECK(s == best);
      ++ties;
    } else {
      CHECK(std::abs(s - best) <= 1e-12 * (1 + std::abs(best)));
    }
    CHECK(res.total == doctest::Approx(s).epsilon(1e-15));
  }
  CHECK(ties > 0);
}

TEST_CASE("hungarian: fixtures and degenerate shapes") {
  const CostMatrix m{3, 3, {4, 1, 3, 2, 0, 5, 3, 2, 2}};
  const auto r = hungarian_match(m);
  CHECK(r.total == 5.0);
  CHECK(r.pairs == std::vector<std::pair<int, int>>{{0, 1}, {1, 0}, {2, 2}});
  CHECK(hungarian_match(CostMatrix{0, 3, {}}).pairs.empty());
  CHECK(hungarian_match(CostMatrix{4, 0, {}}).pairs.empty());
  const CostMatrix tall{3, 1, {5, -1, 2}};
  CHECK(hungarian_match(tall).pairs == std::vector<std::pair<int, int>>{{1, 0}});
}

TEST_CASE("hungarian: non-finite costs are contract errors") {
  CHECK_THROWS_AS(hungarian_match(CostMatrix{1, 2, {0.0, std::nan("")}}), ContractError);
  CHECK_THROWS_AS(hungarian_match(CostMatrix{1, 2, {0.0, std::numeric_limits<double>::infinity()}}), ContractError);
}

TEST_CASE("hungarian: cost is invariant to row and column permutations") {
  Rng rng(7);
  for (int t = 0; t < 50; ++t) {
    const int r = 5, c = 4;
    const CostMatrix m = random_cost(rng, r, c, false);
    std::vector<int> pr(r), pc(c);
    std::iota(pr.begin(), pr.end(), 0);
    std::iota(pc.begin(), pc.end(), 0);
    std::shuffle(pr.begin(), pr.end(), rng.engine());
    std::shuffle(pc.begin(), pc.end(), rng.engine());
    CostMatrix p{r, c, std::vector<double>(m.data.size())};
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) p.data[i * c + j] = m.at(pr[i], pc[j]);
    CHECK(hungarian_match(p).total == doctest::Approx(hungarian_match(m).total).epsilon(1e-12));
  }
}

TEST_CASE("giou: fixtures, bounds and symmetry") {
  const Box a = Box::from_corners(0, 0, 2, 2), b = Box::from_corners(1, 1, 3, 3);
  // inter 1, union 7, enclosure 9
  CHECK(giou(a, b) == doctest::Approx(1.0 / 7.0 - 2.0 / 9.0));
  CHECK(giou(a, a) == doctest::Approx(1.0));
  const Box far = Box::from_corners(10, 10, 11, 11);
  CHECK(giou(Box::from_corners(0, 0, 1, 1), far) == doctest::Approx(2.0 / 121.0 - 1.0));
  Rng rng(3);
  for (int t = 0; t < 500; ++t) {
    const Box p{rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0, 0.5), rng.uniform(0, 0.5)};
    const Box q{rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0, 0.5), rng.uniform(0, 0.5)};
    const double g = giou(p, q);
    CHECK(g >= -1.0);
    CHECK(g <= 1.0);
    CHECK(g == doctest::Approx(giou(q, p)).epsilon(1e-14));
    CHECK(g <= box_iou(p, q) + 1e-15);
  }
  // Zero-area boxes do not divide by zero.
  CHECK(std::isfinite(giou(Box{0.5, 0.5, 0, 0}, Box{0.5, 0.5, 0, 0})));
}

TEST_CASE("giou_rows agrees with the scalar form and has correct gradients") {
  Rng rng(5);
  Tensor a = Tensor::from({3, 4}, {0.3, 0.3, 0.2, 0.25, 0.5, 0.5, 0.4, 0.3, 0.2, 0.7, 0.1, 0.2});
  Tensor b = Tensor::from({3, 4}, {0.35, 0.32, 0.22, 0.2, 0.1, 0.9, 0.1, 0.1, 0.25, 0.68, 0.12, 0.25});
  const Tensor g = giou_rows(a, b);
  for (int i = 0; i < 3; ++i) CHECK(g[i] == doctest::Approx(giou(box_of(a, i), box_of(b, i))).epsilon(1e-14));
  const auto res = testing::gradcheck([&] { return sum(giou_rows(a, b)); }, {a, b});
  CHECK(res.worst_rel_err < 1e-6);
}

TEST_CASE("pairwise_cost follows the focal, L1 and GIoU formula") {
  Rng rng(9);
  LayerOutput pred;
  pred.logits = rng.uniform_tensor({4, 3}, -3, 3);
  pred.boxes = rng.uniform_tensor({4, 4}, 0.1, 0.6);
  GroundTruth gt;
  gt.boxes = {Box{0.3, 0.4, 0.2, 0.2}, Box{0.6, 0.5, 0.3, 0.1}};
  gt.labels = {2, 0};
  const LossWeights w;
  const CostMatrix c = pairwise_cost(pred, gt, w);
  REQUIRE(c.rows == 4);
  REQUIRE(c.cols == 2);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 2; ++j) {
      const double lg = pred.logits[i * 3 + gt.labels[j]];
      const Box pb = box_of(pred.boxes, i), gb = gt.boxes[j];
      const double l1 = std::abs(pb.cx - gb.cx) + std::abs(pb.cy - gb.cy) + std::abs(pb.w - gb.w) + std::abs(pb.h - gb.h);
      const double want = 2 * (focal_term(lg, true) - focal_term(lg, false)) + 5 * l1 + 2 * (1 - giou(pb, gb));
      CHECK(c.at(i, j) == doctest::Approx(want).epsilon(1e-7));
    }
  gt.labels[0] = 3;
  CHECK_THROWS_AS(pairwise_cost(pred, gt, w), ContractError);
}

TEST_CASE("set_loss: terms match a direct computation") {
  Rng rng(10);
  LayerOutput pred;
  pred.logits = rng.uniform_tensor({3, 2}, -2, 2);
  pred.boxes = rng.uniform_tensor({3, 4}, 0.1, 0.5);
  GroundTruth gt;
  gt.boxes = {Box{0.3, 0.3, 0.2, 0.2}, Box{0.6, 0.6, 0.1, 0.3}};
  gt.labels = {1, 0};
  MatchResult m;
  m.pairs = {{0, 1}, {2, 0}};
  const LossTerms t = set_loss(pred, gt, m, LossWeights{});
  double cls = 0;
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 2; ++k) {
      const bool pos = (i == 0 && k == 0) || (i == 2 && k == 1);
      cls += focal_term(pred.logits[i * 2 + k], pos);
    }
  cls /= 2;
  double l1 = 0, gl = 0;
  for (auto [p, g] : m.pairs) {
    const Box pb = box_of(pred.boxes, p), gb = gt.boxes[g];
    l1 += std::abs(pb.cx - gb.cx) + std::abs(pb.cy - gb.cy) + std::abs(pb.w - gb.w) + std::abs(pb.h - gb.h);
    gl += 1 - giou(pb, gb);
  }
  l1 /= 2;
  gl /= 2;
  CHECK(t.cls == doctest::Approx(cls).epsilon(1e-12));
  CHECK(t.l1 == doctest::Approx(l1).epsilon(1e-12));
  CHECK(t.giou == doctest::Approx(gl).epsilon(1e-12));
  CHECK(t.total.item() == doctest::Approx(2 * cls + 5 * l1 + 2 * gl).epsilon(1e-12));
}

TEST_CASE("set_loss: empty ground truth leaves only the background focal term") {
  Rng rng(4);
  LayerOutput pred{rng.uniform_tensor({2, 2}, -1, 1), rng.uniform_tensor({2, 4}, 0.2, 0.4)};
  const LossTerms t = set_loss(pred, GroundTruth{}, MatchResult{}, LossWeights{});
  double cls = 0;
  for (double v : pred.logits.data()) cls += focal_term(v, false);
  CHECK(t.cls == doctest::Approx(cls).epsilon(1e-12));
  CHECK(t.l1 == 0.0);
  CHECK(t.total.item() == doctest::Approx(2 * cls).epsilon(1e-12));
}

TEST_CASE("matching is equivariant to prediction order") {
  Rng rng(6);
  LayerOutput pred{rng.uniform_tensor({5, 3}, -2, 2), rng.uniform_tensor({5, 4}, 0.1, 0.6)};
  GroundTruth gt;
  gt.boxes = {Box{0.3, 0.3, 0.2, 0.2}, Box{0.7, 0.6, 0.2, 0.3}, Box{0.5, 0.5, 0.4, 0.4}};
  gt.labels = {0, 1, 2};
  const std::vector<std::int64_t> perm = {3, 0, 4, 1, 2};
  LayerOutput shuffled{gather_rows(pred.logits, perm), gather_rows(pred.boxes, perm)};
  const auto a = hungarian_match(pairwise_cost(pred, gt, {}));
  const auto b = hungarian_match(pairwise_cost(shuffled, gt, {}));
  CHECK(a.total == doctest::Approx(b.total).epsilon(1e-14));
  for (auto [p, g] : b.pairs) {
    const std::pair<int, int> orig{static_cast<int>(perm[p]), g};
    CHECK(std::find(a.pairs.begin(), a.pairs.end(), orig) != a.pairs.end());
  }
  CHECK(set_loss(pred, gt, a, {}).total.item() == doctest::Approx(set_loss(shuffled, gt, b, {}).total.item()).epsilon(1e-13));
}
