#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fdtr/box.hpp"
#include "fdtr/ops.hpp"
#include "fdtr/param.hpp"
#include "fdtr/vit.hpp"

namespace fdtr {

enum class LevelSource { backbone, foundation };

/// One pyramid level stored as row-major tokens [h*w, c].
struct PyramidLevel {
  Tensor tokens;
  int h = 0;
  int w = 0;
  int stride = 0;  // in backbone-input pixels; 0 for foundation levels
  LevelSource source = LevelSource::backbone;
  int enhancer = -1;

  std::int64_t size() const { return static_cast<std::int64_t>(h) * w; }
  std::int64_t channels() const { return tokens.dim(1); }
};

struct FeaturePyramid {
  std::vector<PyramidLevel> levels;

  std::int64_t total_tokens() const;
  int count(LevelSource s) const;
  /// All levels stacked in order, [sum h*w, c]. Channels must agree.
  Tensor flat() const;
  std::vector<LevelShape> shapes() const;
};

struct DetectorConfig {
  int input_size = 128;
  int num_classes = 6;
  int hidden = 64;
  int queries = 30;
  int enc_layers = 3;
  int dec_layers = 3;
  int heads = 4;
  int points = 4;
  int ffn = 128;
  std::vector<int> backbone_channels{8, 16, 32, 64, 64};
  /// Frozen feature enhancers; each runs on its own resized copy of the image.
  std::vector<ViTConfig> enhancers;
  /// Image queries per enhancer: 0 (off), 1 (global) or 1 + g^2 (with locals).
  int image_queries = 0;
  bool fuse_patches = false;
  /// Extra image query from the mean of the finest projected backbone level.
  bool self_query = false;
  /// Upper bound on object + image queries entering self-attention.
  int max_decoder_tokens = 128;

  bool uses_enhancers() const { return !enhancers.empty() && (image_queries > 0 || fuse_patches); }
  /// Local grid implied by image_queries (1 -> global only, 1+g^2 -> g).
  int local_grid() const;
  void validate() const;
};

/// Per-layer predictions. Boxes are (cx, cy, w, h) in [0, 1].
struct LayerOutput {
  Tensor logits;  // [N, K]
  Tensor boxes;   // [N, 4]
};

/// Structural facts recorded during a forward, used by contract checks.
struct ForwardTrace {
  int backbone_levels = 0;
  int encoder_levels = 0;
  std::int64_t encoder_tokens = 0;
  std::vector<int> image_queries_per_layer;
  std::vector<int> outputs_per_layer;
  /// Sources of every level read by decoder cross-attention, in order.
  std::vector<LevelSource> decoder_reads;
};

struct DetectionOutput {
  std::vector<LayerOutput> layers;  // one per decoder layer; back() is final
  const LayerOutput& final() const { return layers.back(); }
  /// Encoder output pyramid (all levels) when a snapshot was requested.
  FeaturePyramid encoder_snapshot;
};

/// Foundation results for one image, one entry per enhancer.
using EnhancerOutputs = std::vector<FoundationOutput>;

/// Sinusoidal embedding of normalized boxes, [n, dim]; dim divisible by 8.
Tensor box_sine_embedding(std::span<const Box> boxes, int dim);
/// 2-D sinusoidal positions of an h x w grid's cell centers, [h*w, dim].
Tensor grid_sine_embedding(int h, int w, int dim);

class Detector {
 public:
  Detector(DetectorConfig cfg, std::uint64_t seed);

  const DetectorConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  /// Enhancers must be attached (in config order) before forward when the
  /// config uses them.
  void attach_enhancer(std::shared_ptr<const FoundationEncoder> enc);
  const std::vector<std::shared_ptr<const FoundationEncoder>>& enhancers() const { return enhancers_; }

  /// Runs every attached enhancer on its resized copy of the image.
  EnhancerOutputs run_enhancers(const Tensor& image) const;

  FeaturePyramid backbone_forward(const Tensor& image) const;
  /// Input projection of raw backbone levels to the hidden width.
  FeaturePyramid project_backbone(const FeaturePyramid& raw) const;
  FeaturePyramid append_foundation_levels(const FeaturePyramid& pyr, const EnhancerOutputs& enh) const;
  FeaturePyramid encoder_forward(const FeaturePyramid& pyr) const;
  std::vector<ImageQuery> image_queries(const EnhancerOutputs& enh, const FeaturePyramid& projected) const;

  /// Decoder stack over an encoded memory. Every memory level must be a
  /// backbone level; foundation levels are a ContractError.
  DetectionOutput decode(const FeaturePyramid& memory, std::span<const ImageQuery> iqs,
                         ForwardTrace* trace = nullptr) const;

  /// Full forward. When `enh` is null the enhancers are run on the fly.
  DetectionOutput forward(const Tensor& image, const EnhancerOutputs* enh = nullptr, ForwardTrace* trace = nullptr,
                          bool snapshot = false) const;

 private:
  struct DecoderState {
    Tensor content;            // [N, d]
    Tensor box_logits;         // [N, 4], pre-sigmoid
    std::vector<Box> ref;      // detached boxes feeding positions and sampling
  };

  Tensor query_pos(std::span<const Box> boxes) const;
  Tensor encoder_layer(const Tensor& src, const Tensor& pos, const std::vector<LevelShape>& shapes,
                       const Tensor& ref_points, int layer) const;
  LayerOutput decoder_layer(DecoderState& st, std::span<const ImageQuery> iqs, const FeaturePyramid& memory,
                            int layer, ForwardTrace* trace) const;
  Tensor deform_sample(const std::string& prefix, const Tensor& query, const Tensor& value,
                       const std::vector<LevelShape>& shapes, const std::vector<double>& ref, bool ref_is_box) const;
  const Tensor& W(const std::string& name) const { return params_.get(name).tensor; }

  DetectorConfig cfg_;
  ParamStore params_;
  std::vector<std::shared_ptr<const FoundationEncoder>> enhancers_;
};

/// Drops every foundation-tagged level (the post-fusion discard).
FeaturePyramid drop_foundation_levels(const FeaturePyramid& pyr);

}  // namespace fdtr
