#pragma once

#include <atomic>
#include <cstdint>
#include <string>
#include <vector>

#include "fdtr/box.hpp"
#include "fdtr/ops.hpp"
#include "fdtr/param.hpp"

namespace fdtr {

/// How local (sub-image) image queries are obtained.
enum class QueryStrategy {
  crop,                 // one extra forward per sub-image crop
  mean_patch,           // mean of each region's patch tokens
  masked_class_tokens,  // replicated class tokens restricted by an attention mask
};

std::string to_string(QueryStrategy s);
QueryStrategy parse_strategy(const std::string& s);

/// Run-time configuration of the foundation encoder.
struct ViTConfig {
  int image_size = 112;
  int patch_size = 8;
  int depth = 4;
  int dim = 128;
  int heads = 4;
  double mlp_ratio = 2.0;
  int local_grid = 2;  // g: g x g sub-images; 0 or 1 means global only
  QueryStrategy strategy = QueryStrategy::masked_class_tokens;
  int max_queries = 17;
  /// Resample the stored positional grid when image_size / patch_size
  /// differs from it. When false such a mismatch is an error.
  bool interpolate_pos = true;
  /// Opt-in for running with trainable (unfrozen) weights.
  bool allow_trainable = false;

  int grid() const { return image_size / patch_size; }
  int num_image_queries() const { return 1 + (local_grid >= 2 ? local_grid * local_grid : 0); }
};

/// Partition of an hp x wp patch grid into g x g row-major regions. Rows and
/// columns split as evenly as possible; earlier regions take the extra one.
class RegionGrid {
 public:
  RegionGrid(int g, int hp, int wp);

  int order() const { return g_; }
  int num_regions() const { return g_ * g_; }
  int region_of(std::int64_t patch_index) const { return region_of_[static_cast<std::size_t>(patch_index)]; }
  const std::vector<std::int64_t>& members(int region) const { return members_[static_cast<std::size_t>(region)]; }
  /// Normalized box covered by a region.
  Box box(int region) const;

 private:
  int g_, hp_, wp_;
  std::vector<int> row_start_, col_start_;  // g + 1 boundaries each
  std::vector<int> region_of_;
  std::vector<std::vector<std::int64_t>> members_;
};

/// Foundation encoder state: [global class | local class x g^2 | patches].
struct TokenSequence {
  Tensor global_class;  // [dim]
  Tensor local_class;   // [g^2, dim], undefined when absent
  Tensor patches;       // [hp * wp, dim], row-major
  int hp = 0;
  int wp = 0;

  bool has_local() const { return local_class.defined(); }
};

struct ImageQuery {
  Tensor feature;  // [dim_foundation]
  Box box;
  int source = 0;  // enhancer index
};

/// Boolean attention mask over [global | locals | patches].
BoolMask build_attention_mask(const RegionGrid& grid, int num_patches);

/// Per-layer attention weights captured during a forward, [heads, n, n].
struct AttentionTrace {
  std::vector<std::vector<double>> layers;
  std::int64_t tokens = 0;
  int heads = 0;
};

struct FoundationOutput {
  TokenSequence tokens;
  std::vector<ImageQuery> queries;
};

/// Mini vision transformer used as a frozen feature enhancer.
class FoundationEncoder {
 public:
  /// Random init. `grid` is the stored positional grid side length.
  FoundationEncoder(const ViTConfig& arch, std::uint64_t seed);
  /// Builds the architecture for `arch` and loads weights from a checkpoint.
  static FoundationEncoder from_checkpoint(const ViTConfig& arch, const std::string& path);

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  void freeze() { params_.set_frozen(true); }
  bool frozen() const;
  int dim() const { return dim_; }
  int stored_grid() const { return grid_; }

  /// Projects non-overlapping patches, adds positional terms and prepends
  /// the class token(s). Local class tokens are copies of the global one
  /// with the class positional entry; they exist only when `with_local`.
  TokenSequence patch_embed(const Tensor& image, const ViTConfig& cfg, bool with_local = false) const;

  /// Full forward through the block stack. Local class tokens are added
  /// (and masked per build_attention_mask) when the strategy asks for them.
  /// Throws ContractError if weights are trainable and cfg does not allow it.
  TokenSequence forward(const Tensor& image, const ViTConfig& cfg, AttentionTrace* trace = nullptr) const;

  /// Image queries plus the tokens of the full-image pass.
  FoundationOutput encode(const Tensor& image, const ViTConfig& cfg) const;
  std::vector<ImageQuery> extract_image_queries(const Tensor& image, const ViTConfig& cfg) const;

  /// 4-way rotation logits for the pretraining proxy task, [1, 4].
  Tensor rotation_logits(const TokenSequence& tokens) const;

  /// Number of full block-stack passes since construction / reset.
  std::int64_t block_passes() const { return passes_.load(); }
  void reset_block_passes() { passes_ = 0; }

 private:
  TokenSequence run_blocks(const Tensor& image, const ViTConfig& cfg, bool with_local,
                           AttentionTrace* trace) const;
  Tensor block(const Tensor& x, int layer, const BoolMask* mask, std::vector<double>* probs, int heads) const;
  Tensor pos_for(const ViTConfig& cfg) const;

  ParamStore params_;
  int patch_ = 0, dim_ = 0, depth_ = 0, grid_ = 0, hidden_ = 0;
  mutable std::atomic<std::int64_t> passes_{0};

 public:
  FoundationEncoder(FoundationEncoder&& o) noexcept;
};

/// Bilinearly resamples a [hp*wp, dim] positional grid to h2 x w2.
/// Sample points are clamped to the outer cell centers (no zero padding).
Tensor interpolate_pos_embed(const Tensor& pos, int hp, int wp, int h2, int w2);

/// [hp*wp, dim] patch tokens -> [dim, hp, wp] feature map.
Tensor patch_tokens_to_feature_map(const TokenSequence& tokens);
/// Inverse of patch_tokens_to_feature_map: [dim, h, w] -> [h*w, dim].
Tensor flatten_feature_map(const Tensor& map);

/// Bilinear resample of the normalized region [x0,x1] x [y0,y1] of an image
/// [c, h, w] to [c, h2, w2], clamping reads to the outer pixel centers.
Tensor resample_region(const Tensor& image, double x0, double y0, double x1, double y1, int h2, int w2);
inline Tensor resize_image(const Tensor& image, int h2, int w2) {
  return resample_region(image, 0.0, 0.0, 1.0, 1.0, h2, w2);
}

/// Rotates a [c, h, w] square image by k * 90 degrees counter-clockwise.
Tensor rotate90(const Tensor& image, int k);

}  // namespace fdtr
