#include "fdtr/training.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <thread>

namespace fdtr {

void parallel_for(int n, int workers, const std::function<void(int)>& fn) {
  workers = std::clamp(workers, 1, std::max(n, 1));
  if (workers == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (int i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[static_cast<std::size_t>(w)] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

Tensor detector_input(const Detector& det, const Tensor& image) {
  const int s = det.config().input_size;
  if (image.dim(1) == s && image.dim(2) == s) return image;
  return resize_image(image, s, s);
}

std::vector<EnhancerOutputs> precompute_enhancers(const Detector& det, const std::vector<AnnotatedImage>& images,
                                                  int workers) {
  std::vector<EnhancerOutputs> out(images.size());
  if (!det.config().uses_enhancers()) return out;
  NoGradScope nograd;
  parallel_for(static_cast<int>(images.size()), workers, [&](int i) {
    NoGradScope inner;  // thread-local
    out[static_cast<std::size_t>(i)] = det.run_enhancers(images[static_cast<std::size_t>(i)].image);
  });
  return out;
}

std::vector<std::vector<Detection>> predict(const Detector& det, const std::vector<AnnotatedImage>& images,
                                            const std::vector<EnhancerOutputs>* cache, int workers) {
  std::vector<std::vector<Detection>> dets(images.size());
  parallel_for(static_cast<int>(images.size()), workers, [&](int i) {
    NoGradScope nograd;
    const auto& im = images[static_cast<std::size_t>(i)];
    const EnhancerOutputs* e = cache && !cache->empty() ? &(*cache)[static_cast<std::size_t>(i)] : nullptr;
    const DetectionOutput out = det.forward(detector_input(det, im.image), e);
    dets[static_cast<std::size_t>(i)] = decode_detections(out.final());
  });
  return dets;
}

EvalReport evaluate(const Detector& det, const std::vector<AnnotatedImage>& images,
                    const std::vector<EnhancerOutputs>* cache, const EvalOptions& opt) {
  const auto dets = predict(det, images, cache, opt.workers);
  std::vector<GroundTruth> gts;
  for (const auto& im : images) gts.push_back(im.gt);
  EvalReport r;
  ApOptions ap;
  ap.canvas = opt.canvas;
  ap.num_classes = det.config().num_classes;
  compute_ap(dets, gts, ap, r);
  error_analysis(dets, gts, ErrorOptions{opt.error_threshold}, r);
  return r;
}

namespace {

// Optimizer view over the detector plus any trainable enhancers. Parameter
// tensors are shared handles, so updates land in the models themselves.
ParamStore optimizer_store(Detector& det) {
  ParamStore s;
  for (const auto& p : det.params().all()) s.add(p.name, p.tensor, p.frozen, p.lr_scale);
  for (std::size_t k = 0; k < det.enhancers().size(); ++k)
    for (const auto& p : det.enhancers()[k]->params().all())
      if (!p.frozen) s.add("enhancer." + std::to_string(k) + "." + p.name, p.tensor, false, 0.1);
  return s;
}

void write_row(std::ostream& os, const EpochMetrics& m) {
  char buf[512];
  const auto& r = m.report;
  std::snprintf(buf, sizeof buf, "%d,%lld,%.6f,%.6f,%.6f,%.6f,%s\n", m.epoch, static_cast<long long>(m.steps), m.loss,
                m.loss_cls, m.loss_l1, m.loss_giou,
                m.evaluated ? r.csv_row().c_str() : ",,,,,,,,,");
  os << buf;
  os.flush();
}

}  // namespace

TrainLog train_detector(Detector& det, const TrainInputs& data, const TrainOptions& opt, std::uint64_t seed,
                        const EvalOptions& eval_opt, std::ostream* csv, const ProgressFn& progress) {
  if (data.train == nullptr || data.train->empty()) throw ContractError("train: empty training set");
  const auto& train = *data.train;
  for (const auto& im : train)
    for (int l : im.gt.labels)
      if (l < 0 || l >= det.config().num_classes)
        throw ContractError("train: label " + std::to_string(l) + " outside the detector's " +
                            std::to_string(det.config().num_classes) + " classes");
  const bool enh = det.config().uses_enhancers();
  const bool trainable_enh = enh && std::any_of(det.enhancers().begin(), det.enhancers().end(),
                                                [](const auto& e) { return !e->frozen(); });
  if (enh && data.train_cache && trainable_enh) throw ContractError("train: cannot cache trainable enhancer outputs");

  for (auto& p : det.params().all())
    if (p.name.rfind("backbone.", 0) == 0) p.lr_scale = opt.backbone_lr_mult;
  ParamStore store = optimizer_store(det);
  AdamW adam(store, AdamWOptions{opt.lr, 0.9, 0.999, opt.weight_decay, 1e-8});
  Rng shuffle(derive_seed(seed, 0x7A11));
  const LossWeights weights;
  if (csv) *csv << kMetricsHeader << '\n';

  TrainLog log;
  std::vector<int> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::int64_t step = 0;
  bool stop = false;
  for (int epoch = 1; epoch <= opt.epochs && !stop; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle.engine());
    if (opt.lr_drop > 0 && epoch == opt.lr_drop + 1) adam.options().lr = 0.1 * opt.lr;
    EpochMetrics m;
    m.epoch = epoch;
    int batches = 0;
    for (std::size_t b0 = 0; b0 < order.size() && !stop; b0 += static_cast<std::size_t>(opt.batch)) {
      const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(opt.batch));
      Tape tape;
      double cls = 0, l1 = 0, gi = 0;
      Tensor loss;
      {
        TapeScope scope(&tape);
        for (std::size_t bi = b0; bi < b1; ++bi) {
          const auto& im = train[static_cast<std::size_t>(order[bi])];
          const EnhancerOutputs* e =
              data.train_cache && !data.train_cache->empty() ? &(*data.train_cache)[static_cast<std::size_t>(order[bi])]
                                                             : nullptr;
          const DetectionOutput out = det.forward(detector_input(det, im.image), e);
          const LossTerms t = detection_loss(out, im.gt, weights);
          loss = loss.defined() ? add(loss, t.total) : t.total;
          cls += t.cls;
          l1 += t.l1;
          gi += t.giou;
        }
        const double inv = 1.0 / static_cast<double>(b1 - b0);
        loss = scale(loss, inv);
        cls *= inv;
        l1 *= inv;
        gi *= inv;
      }
      tape.backward(loss);
      if (opt.clip > 0) clip_grad_norm(store, opt.clip);
      adam.step();
      store.zero_grad();
      ++step;
      log.step_losses.push_back(loss.item());
      m.loss += loss.item();
      m.loss_cls += cls;
      m.loss_l1 += l1;
      m.loss_giou += gi;
      ++batches;
      if (opt.max_steps > 0 && step >= opt.max_steps) stop = true;
    }
    if (batches > 0) {
      m.loss /= batches;
      m.loss_cls /= batches;
      m.loss_l1 /= batches;
      m.loss_giou /= batches;
    }
    m.steps = step;
    const bool last = epoch == opt.epochs || stop;
    if (data.val && !data.val->empty() && opt.eval_every > 0 && (epoch % opt.eval_every == 0 || last)) {
      m.report = evaluate(det, *data.val, data.val_cache, eval_opt);
      m.evaluated = true;
    }
    if (csv) write_row(*csv, m);
    if (progress) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "epoch %d  loss %.4f  val AP %.4f  AP50 %.4f", epoch, m.loss, m.report.ap,
                    m.report.ap50);
      progress(buf);
    }
    log.epochs.push_back(m);
  }
  return log;
}

double rotation_accuracy(const FoundationEncoder& enc, const ViTConfig& arch, const std::vector<Tensor>& images) {
  if (images.empty()) return 0.0;
  NoGradScope nograd;
  ViTConfig cfg = arch;
  cfg.local_grid = 1;
  cfg.allow_trainable = true;
  int correct = 0, total = 0;
  for (const auto& img : images)
    for (int k = 0; k < 4; ++k) {
      const Tensor logits = enc.rotation_logits(enc.forward(rotate90(img, k), cfg));
      const auto L = logits.data();
      const int pred = static_cast<int>(std::max_element(L.begin(), L.end()) - L.begin());
      correct += pred == k;
      ++total;
    }
  return static_cast<double>(correct) / total;
}

PretrainResult pretrain_rotation(FoundationEncoder& enc, const ViTConfig& arch,
                                 const std::vector<AnnotatedImage>& images, const PretrainOptions& opt,
                                 std::uint64_t seed, const ProgressFn& progress) {
  PretrainResult res;
  std::vector<Tensor> resized;
  for (const auto& im : images) resized.push_back(resize_image(im.image, arch.image_size, arch.image_size));
  const auto n = static_cast<int>(resized.size());
  const int held = std::clamp(static_cast<int>(n * opt.holdout), n > 1 ? 1 : 0, std::max(0, n - 1));
  const std::vector<Tensor> train(resized.begin(), resized.end() - held);
  const std::vector<Tensor> test(resized.end() - held, resized.end());

  if (!opt.random_frozen && opt.epochs > 0 && !train.empty()) {
    enc.params().set_frozen(false);
    ViTConfig cfg = arch;
    cfg.local_grid = 1;
    cfg.allow_trainable = true;
    AdamW adam(enc.params(), AdamWOptions{opt.lr, 0.9, 0.999, 1e-4, 1e-8});
    Rng rng(derive_seed(seed, 0x907));
    std::vector<int> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 1; epoch <= opt.epochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), rng.engine());
      double total = 0;
      int batches = 0;
      for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(opt.batch)) {
        const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(opt.batch));
        Tape tape;
        Tensor loss;
        {
          TapeScope scope(&tape);
          std::vector<Tensor> rows;
          std::vector<int> labels;
          for (std::size_t i = b0; i < b1; ++i) {
            const int k = static_cast<int>(rng.randint(0, 3));
            rows.push_back(enc.rotation_logits(enc.forward(rotate90(train[static_cast<std::size_t>(order[i])], k), cfg)));
            labels.push_back(k);
          }
          loss = cross_entropy(concat_rows(rows), labels);
        }
        tape.backward(loss);
        clip_grad_norm(enc.params(), 1.0);
        adam.step();
        enc.params().zero_grad();
        total += loss.item();
        ++batches;
        ++res.steps;
      }
      if (progress) {
        char buf[96];
        std::snprintf(buf, sizeof buf, "pretrain epoch %d  loss %.4f", epoch, batches ? total / batches : 0.0);
        progress(buf);
      }
    }
  }
  enc.freeze();
  res.heldout_accuracy = rotation_accuracy(enc, arch, test);
  return res;
}

}  // namespace fdtr
