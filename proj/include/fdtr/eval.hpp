#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "fdtr/box.hpp"
#include "fdtr/detector.hpp"

namespace fdtr {

struct Detection {
  Box box;
  int label = 0;
  double score = 0.0;
};

/// Top-k (label, query) pairs by sigmoid score from one layer's output.
std::vector<Detection> decode_detections(const LayerOutput& out, int top_k = 100);

struct EvalReport {
  double ap = 0, ap50 = 0, ap75 = 0, aps = 0, apm = 0, apl = 0;
  double loc = 0, cls = 0, bg = 0, fn = 0;

  static const char* csv_header() { return "ap,ap50,ap75,aps,apm,apl,loc,cls,bg,fn"; }
  std::string csv_row() const;
  std::string table() const;
};

struct ApOptions {
  int canvas = 128;      // pixels; scales the COCO area ranges by (canvas/640)^2
  int max_dets = 100;    // per image
  int num_classes = 0;   // 0: infer from the data
};

/// Per-class AP at one IoU threshold and area range. Entries are -1 for
/// classes without ground truth in range.
std::vector<double> per_class_ap(const std::vector<std::vector<Detection>>& dets,
                                 const std::vector<GroundTruth>& gts, double iou_threshold, double area_lo,
                                 double area_hi, const ApOptions& opt);

/// Fills the AP fields (COCO-style 101-point interpolation, IoU .50:.05:.95).
void compute_ap(const std::vector<std::vector<Detection>>& dets, const std::vector<GroundTruth>& gts,
                const ApOptions& opt, EvalReport& report);

enum class ErrorKind { correct, loc, cls, bg, other };

struct ErrorOptions {
  double score_threshold = 0.3;  // predictions at or above count as "top-scoring"
};

/// Per-prediction classification for one image, in descending score order of
/// the considered predictions (those meeting the threshold).
std::vector<ErrorKind> classify_errors(const std::vector<Detection>& dets, const GroundTruth& gt,
                                       const ErrorOptions& opt);

/// Fills loc/cls/bg as shares of considered predictions and fn as the share
/// of ground truth with no considered prediction at IoU >= 0.5.
void error_analysis(const std::vector<std::vector<Detection>>& dets, const std::vector<GroundTruth>& gts,
                    const ErrorOptions& opt, EvalReport& report);

/// Per-location L2 norm over channels, min-max scaled to 0..255 (a flat map
/// becomes all zeros). Returns row-major bytes of one pyramid level.
std::vector<std::uint8_t> feature_norm_bytes(const PyramidLevel& level);
void feature_norm_image(const FeaturePyramid& snapshot, int level, const std::filesystem::path& path);

/// Copy of the image with 1-pixel outlines of detections at or above the
/// threshold, colored per class.
Tensor overlay_detections(const Tensor& image, const std::vector<Detection>& dets, double threshold);

}  // namespace fdtr
