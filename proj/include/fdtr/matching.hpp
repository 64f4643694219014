#pragma once

#include <utility>
#include <vector>

#include "fdtr/box.hpp"
#include "fdtr/detector.hpp"

namespace fdtr {

struct LossWeights {
  double cls = 2.0;
  double l1 = 5.0;
  double giou = 2.0;
};

inline constexpr double kFocalAlpha = 0.25;
inline constexpr double kFocalGamma = 2.0;

/// Generalized IoU in [-1, 1]; zero-area boxes count as area 1e-9.
double giou(const Box& a, const Box& b);

/// Row-major cost matrix; rows are predictions, columns ground truth.
struct CostMatrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;
  double at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
};

CostMatrix pairwise_cost(const LayerOutput& pred, const GroundTruth& gt, const LossWeights& w);

struct MatchResult {
  std::vector<std::pair<int, int>> pairs;  // (prediction, ground truth), sorted by prediction
  double total = 0.0;
};

/// Minimum-cost injective assignment of min(rows, cols) pairs.
/// Throws ContractError on NaN.
MatchResult hungarian_match(const CostMatrix& cost);

struct LossTerms {
  Tensor total;  // differentiable scalar
  double cls = 0.0;
  double l1 = 0.0;
  double giou = 0.0;
};

/// Set loss for one layer's predictions given a fixed matching.
LossTerms set_loss(const LayerOutput& pred, const GroundTruth& gt, const MatchResult& match, const LossWeights& w);

/// Matches and sums the set loss over every decoder layer (deep supervision).
LossTerms detection_loss(const DetectionOutput& out, const GroundTruth& gt, const LossWeights& w);

/// Differentiable GIoU of matched box rows a[n,4] vs b[n,4], returns [n].
Tensor giou_rows(const Tensor& a, const Tensor& b);

}  // namespace fdtr
