#pragma once

#include <algorithm>
#include <vector>

namespace fdtr {

/// Axis-aligned box, center format, normalized to the image.
struct Box {
  double cx = 0.5;
  double cy = 0.5;
  double w = 1.0;
  double h = 1.0;

  double x0() const { return cx - 0.5 * w; }
  double y0() const { return cy - 0.5 * h; }
  double x1() const { return cx + 0.5 * w; }
  double y1() const { return cy + 0.5 * h; }
  double area() const { return w * h; }

  static Box from_corners(double x0, double y0, double x1, double y1) {
    return Box{0.5 * (x0 + x1), 0.5 * (y0 + y1), x1 - x0, y1 - y0};
  }
  static Box full() { return Box{0.5, 0.5, 1.0, 1.0}; }

  friend bool operator==(const Box&, const Box&) = default;
};

/// Plain IoU of two boxes; 0 when either is empty.
inline double box_iou(const Box& a, const Box& b) {
  const double iw = std::max(0.0, std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0()));
  const double ih = std::max(0.0, std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0()));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

struct GroundTruth {
  std::vector<Box> boxes;
  std::vector<int> labels;
  std::size_t size() const { return boxes.size(); }
};

}  // namespace fdtr
