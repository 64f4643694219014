#pragma once

#include <filesystem>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"

#include "fdtr/config.hpp"
#include "fdtr/training.hpp"

namespace fdtr {

/// Loads a foundation checkpoint, inferring the stored positional grid so
/// that `arch` may request a different input size.
std::shared_ptr<FoundationEncoder> load_foundation(const std::string& path, const ViTConfig& arch);

/// Detector for `cfg` with its enhancers attached from cfg.foundations.
/// Refuses unfrozen foundations unless the config allows trainable ones.
Detector build_detector(const RunConfig& cfg);

/// Loads detector weights, checking the class count first.
void load_detector(Detector& det, const std::filesystem::path& checkpoint);

/// Class count recorded in a dataset manifest, else inferred from labels.
int dataset_classes(const std::filesystem::path& dir, const std::vector<AnnotatedImage>& images);

/// JSON manifest embedding the resolved config (as INI text) and seed.
void write_manifest(const std::filesystem::path& path, const RunConfig& cfg, const std::string& command,
                    const nlohmann::json& extra = nlohmann::json::object());

struct GenOptions {
  std::string out;
  int split = 0;  // 0 train, 1 val
  bool force = false;
};
void cmd_gen(const RunConfig& cfg, const GenOptions& opt, std::ostream& log);

struct PretrainCmdOptions {
  std::string out;  // checkpoint path
};
PretrainResult cmd_pretrain(const RunConfig& cfg, const PretrainCmdOptions& opt, std::ostream& log);

struct TrainResult {
  TrainLog log;
  EvalReport final_report;
  bool evaluated = false;
  std::vector<std::string> foundation_hash_before, foundation_hash_after;
  int image_queries_per_layer = 0;
  std::int64_t block_passes_per_image = 0;
};
/// Trains into cfg.out_dir: detector.ckpt, metrics.csv, config.ini,
/// manifest.json.
TrainResult cmd_train(const RunConfig& cfg, std::ostream& log);

/// Evaluates the checkpoint on cfg.data_dir; writes eval.csv and eval.txt to
/// cfg.out_dir.
EvalReport cmd_eval(const RunConfig& cfg, std::ostream& log);

struct AblationGrid {
  std::vector<int> image_queries;
  std::vector<bool> fuse_patches;
  std::vector<QueryStrategy> strategies;
  std::vector<int> enhancers;
  std::vector<int> foundation_sizes;
  std::vector<bool> trainable;
  std::size_t cardinality() const;
};
struct AblationRow {
  int image_queries = 0;
  bool fuse_patches = false;
  QueryStrategy strategy = QueryStrategy::masked_class_tokens;
  int enhancers = 0;
  int foundation_size = 0;
  bool trainable = false;
  std::int64_t block_passes_per_image = 0;
  EvalReport report;
};
/// Empty axes take the value from cfg. Writes ablate.csv and per-cell
/// subdirectories under cfg.out_dir.
std::vector<AblationRow> cmd_ablate(const RunConfig& cfg, const AblationGrid& grid, std::ostream& log);

/// Writes norm_XXXXX.pgm and overlay_XXXXX.ppm for the first images.
void cmd_visualize(const RunConfig& cfg, std::ostream& log);

}  // namespace fdtr
