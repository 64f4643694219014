#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "fdtr/config.hpp"
#include "fdtr/dataset.hpp"
#include "fdtr/detector.hpp"
#include "fdtr/eval.hpp"
#include "fdtr/matching.hpp"

namespace fdtr {

using ProgressFn = std::function<void(const std::string&)>;

/// Runs fn(i) for i in [0, n) on up to `workers` threads.
void parallel_for(int n, int workers, const std::function<void(int)>& fn);

/// Image resized to the detector's input size when the canvas differs.
Tensor detector_input(const Detector& det, const Tensor& image);

/// Frozen foundation outputs for every image, computed once.
std::vector<EnhancerOutputs> precompute_enhancers(const Detector& det, const std::vector<AnnotatedImage>& images,
                                                  int workers = 1);

struct EvalOptions {
  int canvas = 128;
  double error_threshold = 0.3;
  int workers = 1;
};

/// Final-layer detections for every image.
std::vector<std::vector<Detection>> predict(const Detector& det, const std::vector<AnnotatedImage>& images,
                                            const std::vector<EnhancerOutputs>* cache, int workers = 1);
EvalReport evaluate(const Detector& det, const std::vector<AnnotatedImage>& images,
                    const std::vector<EnhancerOutputs>* cache, const EvalOptions& opt);

struct EpochMetrics {
  int epoch = 0;
  std::int64_t steps = 0;
  double loss = 0, loss_cls = 0, loss_l1 = 0, loss_giou = 0;
  bool evaluated = false;
  EvalReport report;
};

struct TrainLog {
  std::vector<double> step_losses;
  std::vector<EpochMetrics> epochs;
};

inline constexpr const char* kMetricsHeader =
    "epoch,steps,loss,loss_cls,loss_l1,loss_giou,ap,ap50,ap75,aps,apm,apl,loc,cls,bg,fn";

struct TrainInputs {
  const std::vector<AnnotatedImage>* train = nullptr;
  const std::vector<AnnotatedImage>* val = nullptr;
  const std::vector<EnhancerOutputs>* train_cache = nullptr;
  const std::vector<EnhancerOutputs>* val_cache = nullptr;
};

/// AdamW with gradient clipping; one tape per batch, mean loss over the
/// batch. Deterministic for a fixed seed on one thread. Metrics rows are
/// appended to `csv` (header written first) when it is non-null.
TrainLog train_detector(Detector& det, const TrainInputs& data, const TrainOptions& opt, std::uint64_t seed,
                        const EvalOptions& eval_opt, std::ostream* csv = nullptr, const ProgressFn& progress = {});

struct PretrainResult {
  std::int64_t steps = 0;
  double heldout_accuracy = 0.0;
};

/// Self-supervised 4-way rotation prediction on resized dataset images; the
/// encoder is frozen afterwards.
PretrainResult pretrain_rotation(FoundationEncoder& enc, const ViTConfig& arch,
                                 const std::vector<AnnotatedImage>& images, const PretrainOptions& opt,
                                 std::uint64_t seed, const ProgressFn& progress = {});
double rotation_accuracy(const FoundationEncoder& enc, const ViTConfig& arch, const std::vector<Tensor>& images);

}  // namespace fdtr
