#include "fdtr/commands.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <regex>
#include <sstream>

namespace fdtr {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kDetectorStream = 0xDE7;
constexpr std::uint64_t kFoundationStream = 0xF0;

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f << text;
  if (!f) throw IoError("write failed: " + path.string());
}

std::vector<AnnotatedImage> require_dataset(const std::string& dir, const char* what) {
  if (dir.empty() || !fs::is_directory(dir)) throw IoError(std::string(what) + " directory not found: " + dir);
  return load_dataset(dir);
}

fs::path checkpoint_path(const RunConfig& cfg) {
  return cfg.checkpoint.empty() ? fs::path(cfg.out_dir) / "detector.ckpt" : fs::path(cfg.checkpoint);
}

int checkpoint_classes(const fs::path& path) {
  const ParamStore s = read_checkpoint(path);
  if (!s.contains("cls.b")) throw ContractError(path.string() + " is not a detector checkpoint");
  return static_cast<int>(s.get("cls.b").tensor.numel());
}

std::int64_t passes_per_image(const Detector& det, const Tensor& image) {
  if (!det.config().uses_enhancers()) return 0;
  std::int64_t before = 0, after = 0;
  for (const auto& e : det.enhancers()) before += e->block_passes();
  {
    NoGradScope nograd;
    (void)det.run_enhancers(image);
  }
  for (const auto& e : det.enhancers()) after += e->block_passes();
  return after - before;
}

std::string on_off(bool b) { return b ? "on" : "off"; }

}  // namespace

std::shared_ptr<FoundationEncoder> load_foundation(const std::string& path, const ViTConfig& arch) {
  const ParamStore s = read_checkpoint(path);
  if (!s.contains("pos")) throw ContractError(path + " is not a foundation checkpoint");
  const auto rows = s.get("pos").tensor.dim(0) - 1;
  const auto g = static_cast<int>(std::lround(std::sqrt(static_cast<double>(rows))));
  if (g < 1 || static_cast<std::int64_t>(g) * g != rows)
    throw ContractError(path + ": positional table is not a square grid");
  ViTConfig stored = arch;
  stored.image_size = g * arch.patch_size;
  return std::make_shared<FoundationEncoder>(FoundationEncoder::from_checkpoint(stored, path));
}

Detector build_detector(const RunConfig& cfg) {
  Detector det(cfg.detector, derive_seed(cfg.resolved_seed(), kDetectorStream));
  const auto& vits = cfg.detector.enhancers;
  if (!cfg.detector.uses_enhancers()) return det;
  if (cfg.foundations.size() < vits.size())
    throw ContractError("enhancers need " + std::to_string(vits.size()) + " foundation checkpoint(s), " +
                        std::to_string(cfg.foundations.size()) + " given (foundation.checkpoints)");
  for (std::size_t k = 0; k < vits.size(); ++k) {
    auto enc = load_foundation(cfg.foundations[k], vits[k]);
    if (!enc->frozen() && !cfg.allow_trainable_foundation)
      throw ContractError("foundation checkpoint " + cfg.foundations[k] +
                          " is not frozen; pass --allow-trainable-foundation to train through it");
    // Trainable mode fine-tunes the foundation along with the detector.
    if (cfg.allow_trainable_foundation) enc->params().set_frozen(false);
    det.attach_enhancer(enc);
  }
  return det;
}

void load_detector(Detector& det, const fs::path& checkpoint) {
  const int k = checkpoint_classes(checkpoint);
  if (k != det.config().num_classes)
    throw ContractError("checkpoint " + checkpoint.string() + " predicts " + std::to_string(k) +
                        " classes but the detector is configured for " + std::to_string(det.config().num_classes));
  load_checkpoint(det.params(), checkpoint);
}

int dataset_classes(const fs::path& dir, const std::vector<AnnotatedImage>& images) {
  const fs::path manifest = dir / "manifest.json";
  if (fs::exists(manifest)) {
    std::ifstream f(manifest);
    try {
      const auto j = nlohmann::json::parse(f);
      if (j.contains("num_classes")) return j.at("num_classes").get<int>();
    } catch (const nlohmann::json::exception& e) {
      throw IoError(manifest.string() + ": " + e.what());
    }
  }
  int k = 0;
  for (const auto& im : images)
    for (int l : im.gt.labels) k = std::max(k, l + 1);
  return k;
}

void write_manifest(const fs::path& path, const RunConfig& cfg, const std::string& command,
                    const nlohmann::json& extra) {
  nlohmann::json j = nlohmann::json::object();
  j["command"] = command;
  j["seed"] = cfg.resolved_seed();
  j["config"] = cfg.to_ini();
  for (const auto& [key, value] : extra.items()) j[key] = value;
  write_text(path, j.dump(2) + "\n");
}

void cmd_gen(const RunConfig& cfg, const GenOptions& opt, std::ostream& log) {
  const fs::path out = opt.out.empty() ? fs::path(cfg.data_dir) : fs::path(opt.out);
  const std::uint64_t seed = cfg.resolved_seed();
  if (fs::exists(out) && !fs::is_directory(out)) throw IoError(out.string() + " exists and is not a directory");
  if (fs::is_directory(out) && !fs::is_empty(out)) {
    if (!opt.force) throw ContractError("output directory " + out.string() + " is not empty (use --force)");
    // Only files this command writes are replaced.
    static const std::regex ours(R"(img_\d{5}\.ppm|annotations\.jsonl|manifest\.json)");
    for (const auto& e : fs::directory_iterator(out))
      if (e.is_regular_file() && std::regex_match(e.path().filename().string(), ours)) fs::remove(e.path());
  }
  SceneSpec spec = cfg.scene;
  spec.seed = seed;
  GenerationStats stats;
  auto images = generate_dataset(spec, cfg.n_images, opt.split == 0 ? Split::train : Split::val, &stats, cfg.workers);
  save_dataset(out, images);
  std::int64_t boxes = 0;
  for (const auto& im : images) boxes += static_cast<std::int64_t>(im.gt.labels.size());
  write_manifest(out / "manifest.json", cfg, "gen",
                 {{"split", opt.split == 0 ? "train" : "val"},
                  {"n", cfg.n_images},
                  {"num_classes", static_cast<int>(class_names().size())},
                  {"classes", class_names()},
                  {"boxes", boxes},
                  {"skipped_objects", stats.skipped_objects}});
  log << "wrote " << images.size() << " images (" << boxes << " boxes, " << stats.skipped_objects
      << " placements skipped) to " << out.string() << ", seed " << seed << "\n";
}

PretrainResult cmd_pretrain(const RunConfig& cfg, const PretrainCmdOptions& opt, std::ostream& log) {
  const std::uint64_t seed = cfg.resolved_seed();
  const fs::path out = opt.out.empty() ? fs::path(cfg.out_dir) / "foundation.ckpt" : fs::path(opt.out);
  const auto images = require_dataset(cfg.data_dir, "dataset");
  FoundationEncoder enc(cfg.vit, derive_seed(seed, kFoundationStream));
  const auto res = pretrain_rotation(enc, cfg.vit, images, cfg.pretrain, seed,
                                     [&](const std::string& line) { log << line << "\n"; });
  if (out.has_parent_path()) ensure_dir(out.parent_path());
  save_checkpoint(enc.params(), out);
  write_manifest(fs::path(out.string() + ".json"), cfg, "pretrain",
                 {{"steps", res.steps},
                  {"heldout_rotation_accuracy", res.heldout_accuracy},
                  {"parameters", enc.params().numel()},
                  {"digest", parameter_digest(enc.params())}});
  log << "foundation checkpoint " << out.string() << ": " << res.steps << " steps, held-out rotation accuracy "
      << std::fixed << std::setprecision(4) << res.heldout_accuracy << "\n";
  log.unsetf(std::ios::floatfield);
  return res;
}

TrainResult cmd_train(const RunConfig& cfg, std::ostream& log) {
  const std::uint64_t seed = cfg.resolved_seed();
  const auto train = require_dataset(cfg.data_dir, "training data");
  std::vector<AnnotatedImage> val;
  if (!cfg.val_dir.empty()) val = require_dataset(cfg.val_dir, "validation data");

  Detector det = build_detector(cfg);
  TrainResult res;
  for (const auto& e : det.enhancers()) res.foundation_hash_before.push_back(parameter_digest(e->params()));
  const bool frozen = std::all_of(det.enhancers().begin(), det.enhancers().end(),
                                  [](const auto& e) { return e->frozen(); });

  {
    ForwardTrace trace;
    NoGradScope nograd;
    (void)det.forward(detector_input(det, train.front().image), nullptr, &trace);
    res.image_queries_per_layer = trace.image_queries_per_layer.empty() ? 0 : trace.image_queries_per_layer.front();
    log << "decoder image queries per layer:";
    for (int m : trace.image_queries_per_layer) log << " M=" << m;
    log << "\n";
  }
  res.block_passes_per_image = passes_per_image(det, train.front().image);

  std::vector<EnhancerOutputs> train_cache, val_cache;
  TrainInputs inputs{&train, val.empty() ? nullptr : &val, nullptr, nullptr};
  if (det.config().uses_enhancers() && frozen && cfg.train.cache_foundation) {
    train_cache = precompute_enhancers(det, train, cfg.workers);
    val_cache = precompute_enhancers(det, val, cfg.workers);
    inputs.train_cache = &train_cache;
    inputs.val_cache = &val_cache;
  }

  const fs::path out(cfg.out_dir);
  ensure_dir(out);
  std::ofstream csv(out / "metrics.csv", std::ios::binary);
  if (!csv) throw IoError("cannot open " + (out / "metrics.csv").string());
  const EvalOptions eopt{cfg.scene.canvas, cfg.error_threshold, cfg.workers};
  res.log = train_detector(det, inputs, cfg.train, seed, eopt, &csv,
                           [&](const std::string& line) { log << line << "\n"; });
  if (!csv) throw IoError("write failed: " + (out / "metrics.csv").string());
  if (!res.log.epochs.empty() && res.log.epochs.back().evaluated) {
    res.final_report = res.log.epochs.back().report;
    res.evaluated = true;
  }

  for (const auto& e : det.enhancers()) res.foundation_hash_after.push_back(parameter_digest(e->params()));
  if (frozen && res.foundation_hash_after != res.foundation_hash_before)
    throw ContractError("frozen foundation weights changed during training");

  RunConfig echo = cfg;
  echo.checkpoint = (out / "detector.ckpt").string();
  if (!frozen) {
    // Fine-tuned foundations are saved next to the detector.
    for (std::size_t k = 0; k < det.enhancers().size(); ++k) {
      const fs::path p = out / ("foundation_" + std::to_string(k) + ".ckpt");
      save_checkpoint(det.enhancers()[k]->params(), p);
      echo.foundations[k] = p.string();
    }
  }
  save_checkpoint(det.params(), out / "detector.ckpt");
  write_text(out / "config.ini", echo.to_ini());
  nlohmann::json extra = {{"steps", res.log.step_losses.size()},
                          {"detector_digest", parameter_digest(det.params())},
                          {"foundation_digest_before", res.foundation_hash_before},
                          {"foundation_digest_after", res.foundation_hash_after},
                          {"image_queries_per_layer", res.image_queries_per_layer},
                          {"foundation_passes_per_image", res.block_passes_per_image}};
  std::vector<std::string> files;
  for (std::size_t k = 0; k < det.enhancers().size(); ++k)
    if (frozen) files.push_back(file_sha256(cfg.foundations[k]));
  extra["foundation_file_sha256"] = files;
  if (res.evaluated) extra["final_ap"] = res.final_report.ap;
  write_manifest(out / "manifest.json", echo, "train", extra);
  log << "checkpoint " << (out / "detector.ckpt").string() << "\n";
  return res;
}

EvalReport cmd_eval(const RunConfig& cfg, std::ostream& log) {
  const fs::path ckpt = checkpoint_path(cfg);
  const auto images = require_dataset(cfg.data_dir, "evaluation data");
  const int data_k = dataset_classes(cfg.data_dir, images);
  const int ckpt_k = checkpoint_classes(ckpt);
  if (data_k != ckpt_k)
    throw ContractError("class-count mismatch: checkpoint has " + std::to_string(ckpt_k) + ", dataset has " +
                        std::to_string(data_k));
  Detector det = build_detector(cfg);
  load_detector(det, ckpt);
  const EvalOptions eopt{cfg.scene.canvas, cfg.error_threshold, cfg.workers};
  const std::vector<EnhancerOutputs> cache = precompute_enhancers(det, images, cfg.workers);
  const EvalReport r = evaluate(det, images, &cache, eopt);

  const fs::path out(cfg.out_dir);
  ensure_dir(out);
  write_text(out / "eval.csv", std::string(EvalReport::csv_header()) + "\n" + r.csv_row() + "\n");
  write_text(out / "eval.txt", r.table());
  write_manifest(out / "eval_manifest.json", cfg, "eval",
                 {{"checkpoint", ckpt.string()}, {"images", images.size()}, {"ap", r.ap}});
  log << r.table();
  return r;
}

std::size_t AblationGrid::cardinality() const {
  auto n = [](std::size_t s) { return std::max<std::size_t>(s, 1); };
  return n(image_queries.size()) * n(fuse_patches.size()) * n(strategies.size()) * n(enhancers.size()) *
         n(foundation_sizes.size()) * n(trainable.size());
}

std::vector<AblationRow> cmd_ablate(const RunConfig& cfg, const AblationGrid& grid, std::ostream& log) {
  auto or_default = [](auto v, auto d) {
    if (v.empty()) v.push_back(d);
    return v;
  };
  const auto iqs = or_default(grid.image_queries, cfg.detector.image_queries);
  const auto fuses = or_default(grid.fuse_patches, cfg.detector.fuse_patches);
  const auto strats = or_default(grid.strategies, cfg.vit.strategy);
  const auto enhs = or_default(grid.enhancers, std::max(1, cfg.enhancers));
  const auto sizes = or_default(grid.foundation_sizes, cfg.vit.image_size);
  const auto trains = or_default(grid.trainable, cfg.allow_trainable_foundation);

  const fs::path out(cfg.out_dir);
  ensure_dir(out);
  std::vector<AblationRow> rows;
  int cell = 0;
  for (int iq : iqs)
    for (bool fuse : fuses)
      for (QueryStrategy st : strats)
        for (int ne : enhs)
          for (int size : sizes)
            for (bool tr : trains) {
              RunConfig c = cfg;
              c.detector.image_queries = iq;
              c.detector.fuse_patches = fuse;
              c.enhancers = ne;
              c.allow_trainable_foundation = tr;
              c.vit.strategy = st;
              c.vit.image_size = size;
              for (auto& v : c.vit_overrides) {
                v.strategy = st;
                v.image_size = size;
              }
              char name[32];
              std::snprintf(name, sizeof name, "cell_%03d", cell++);
              c.out_dir = (out / name).string();
              c.checkpoint.clear();
              c.resolve();
              log << "[" << name << "] image_queries=" << iq << " fuse_patches=" << on_off(fuse)
                  << " strategy=" << to_string(st) << " enhancers=" << ne << " foundation_size=" << size
                  << " trainable=" << on_off(tr) << "\n";
              const TrainResult tr_res = cmd_train(c, log);
              AblationRow row;
              row.image_queries = iq;
              row.fuse_patches = fuse;
              row.strategy = st;
              row.enhancers = ne;
              row.foundation_size = size;
              row.trainable = tr;
              row.block_passes_per_image = tr_res.block_passes_per_image;
              row.report = tr_res.final_report;
              rows.push_back(row);
            }

  std::ostringstream csv, table;
  csv << "image_queries,fuse_patches,strategy,enhancers,foundation_size,trainable,passes_per_image,"
      << EvalReport::csv_header() << "\n";
  table << std::left << std::setw(4) << "M" << std::setw(6) << "fuse" << std::setw(21) << "strategy" << std::setw(5)
        << "enh" << std::setw(6) << "size" << std::setw(7) << "train" << std::setw(8) << "passes" << std::right
        << std::setw(8) << "AP" << std::setw(8) << "AP50" << std::setw(8) << "AP75" << "\n";
  for (const auto& r : rows) {
    csv << r.image_queries << "," << on_off(r.fuse_patches) << "," << to_string(r.strategy) << "," << r.enhancers
        << "," << r.foundation_size << "," << on_off(r.trainable) << "," << r.block_passes_per_image << ","
        << r.report.csv_row() << "\n";
    char nums[64];
    std::snprintf(nums, sizeof nums, "%8.4f%8.4f%8.4f", r.report.ap, r.report.ap50, r.report.ap75);
    table << std::left << std::setw(4) << r.image_queries << std::setw(6) << on_off(r.fuse_patches) << std::setw(21)
          << to_string(r.strategy) << std::setw(5) << r.enhancers << std::setw(6) << r.foundation_size
          << std::setw(7) << on_off(r.trainable) << std::setw(8) << r.block_passes_per_image << nums << "\n";
  }
  write_text(out / "ablate.csv", csv.str());
  write_text(out / "ablate.txt", table.str());
  write_manifest(out / "ablate_manifest.json", cfg, "ablate", {{"cells", rows.size()}});
  log << table.str();
  return rows;
}

void cmd_visualize(const RunConfig& cfg, std::ostream& log) {
  const fs::path ckpt = checkpoint_path(cfg);
  const auto images = require_dataset(cfg.data_dir, "image");
  Detector det = build_detector(cfg);
  load_detector(det, ckpt);
  const fs::path out(cfg.out_dir);
  ensure_dir(out);
  const int n = std::min(static_cast<int>(images.size()), cfg.vis_images);
  for (int i = 0; i < n; ++i) {
    const auto& im = images[static_cast<std::size_t>(i)];
    NoGradScope nograd;
    const DetectionOutput o = det.forward(detector_input(det, im.image), nullptr, nullptr, true);
    char norm[40], overlay[40];
    std::snprintf(norm, sizeof norm, "norm_%05d.pgm", im.id);
    std::snprintf(overlay, sizeof overlay, "overlay_%05d.ppm", im.id);
    feature_norm_image(o.encoder_snapshot, cfg.vis_level, out / norm);
    const auto dets = decode_detections(o.final());
    write_ppm(out / overlay, overlay_detections(im.image, dets, cfg.score_threshold));
    int shown = 0;
    for (const auto& d : dets) shown += d.score >= cfg.score_threshold;
    log << norm << "  " << overlay << "  (" << shown << " boxes)\n";
  }
  write_manifest(out / "visualize_manifest.json", cfg, "visualize",
                 {{"checkpoint", ckpt.string()}, {"level", cfg.vis_level}, {"images", n}});
}

}  // namespace fdtr
