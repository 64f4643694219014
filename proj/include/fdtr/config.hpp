#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "fdtr/dataset.hpp"
#include "fdtr/detector.hpp"
#include "fdtr/vit.hpp"

namespace fdtr {

struct TrainOptions {
  int epochs = 20;
  int batch = 4;
  double lr = 1e-4;
  /// Epoch after which the learning rate is divided by 10 (0: constant).
  int lr_drop = 0;
  double backbone_lr_mult = 0.1;
  double weight_decay = 1e-4;
  double clip = 0.1;
  int eval_every = 1;
  /// Cache frozen foundation outputs per image (they never change).
  bool cache_foundation = true;
  /// Stop after this many optimizer steps (0: run all epochs).
  int max_steps = 0;
};

struct PretrainOptions {
  int epochs = 3;
  int batch = 8;
  double lr = 1e-3;
  bool random_frozen = false;
  /// Fraction of images held out to measure rotation accuracy.
  double holdout = 0.2;
};

/// Every command-independent setting, resolved from defaults, an INI file
/// ([section] key=value) and command-line overrides, in that order.
struct RunConfig {
  std::optional<std::uint64_t> seed;
  std::string data_dir = "data/train";
  std::string val_dir = "data/val";
  std::string out_dir = "runs/default";
  std::string checkpoint;                // detector checkpoint (eval, visualize)
  std::vector<std::string> foundations;  // frozen encoder checkpoints, one per enhancer
  int workers = 1;

  SceneSpec scene;
  int n_images = 200;

  DetectorConfig detector;
  ViTConfig vit;                      // shared enhancer architecture
  std::vector<ViTConfig> vit_overrides;  // per-enhancer, filled from [enhancer.K]
  int enhancers = 0;
  bool allow_trainable_foundation = false;

  TrainOptions train;
  PretrainOptions pretrain;

  double score_threshold = 0.5;  // overlays
  double error_threshold = 0.3;  // error analysis
  int vis_level = 0;
  int vis_images = 4;

  std::uint64_t resolved_seed() const;
  /// Applies one `section.key = value` setting; unknown keys are errors.
  void set(const std::string& section, const std::string& key, const std::string& value);
  /// "section.key=value" form used by --set.
  void set(const std::string& assignment);
  /// Finalizes derived fields (enhancer list, class count) and validates.
  void resolve();
  std::string to_ini() const;
};

RunConfig load_config(const std::filesystem::path& path);
void merge_config_file(RunConfig& cfg, const std::filesystem::path& path);

/// Applies the FDTR_SEED environment override when present.
void apply_env_overrides(RunConfig& cfg);

}  // namespace fdtr
