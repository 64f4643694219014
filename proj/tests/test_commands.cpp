#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "fdtr/commands.hpp"

using namespace fdtr;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("fdtr_cmd_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

RunConfig tiny_run(const fs::path& root) {
  RunConfig c;
  c.seed = 11;
  c.data_dir = (root / "train").string();
  c.val_dir = (root / "val").string();
  c.out_dir = (root / "run").string();
  c.n_images = 6;
  for (const char* s : {"scene.canvas=64", "detector.input_size=64", "detector.hidden=16", "detector.queries=6",
                        "detector.enc_layers=1", "detector.dec_layers=1", "detector.heads=2", "detector.points=2",
                        "detector.ffn=32", "foundation.image_size=32", "foundation.dim=16", "foundation.depth=1",
                        "foundation.heads=2", "train.epochs=1", "train.batch=2", "pretrain.epochs=1",
                        "pretrain.batch=4"})
    c.set(s);
  c.resolve();
  return c;
}

void gen_both(const RunConfig& c) {
  std::ostringstream log;
  cmd_gen(c, GenOptions{c.data_dir, 0, false}, log);
  cmd_gen(c, GenOptions{c.val_dir, 1, false}, log);
}

}  // namespace

TEST_CASE("gen refuses non-empty directories and is reproducible under --force") {
  const fs::path root = scratch("gen");
  const RunConfig c = tiny_run(root);
  std::ostringstream log;
  cmd_gen(c, GenOptions{c.data_dir, 0, false}, log);
  const std::string first = slurp(fs::path(c.data_dir) / "annotations.jsonl");
  const std::string img = slurp(fs::path(c.data_dir) / "img_00000.ppm");
  CHECK_THROWS_AS(cmd_gen(c, GenOptions{c.data_dir, 0, false}, log), ContractError);
  std::ofstream(fs::path(c.data_dir) / "notes.txt") << "keep";
  cmd_gen(c, GenOptions{c.data_dir, 0, true}, log);
  CHECK(slurp(fs::path(c.data_dir) / "annotations.jsonl") == first);
  CHECK(slurp(fs::path(c.data_dir) / "img_00000.ppm") == img);
  CHECK(fs::exists(fs::path(c.data_dir) / "notes.txt"));
  const auto manifest = nlohmann::json::parse(slurp(fs::path(c.data_dir) / "manifest.json"));
  CHECK(manifest.at("seed") == 11);
  CHECK(manifest.at("num_classes") == 6);
  CHECK(manifest.at("split") == "train");
  fs::remove_all(root);
}

TEST_CASE("pretrain with random-frozen weights skips training and freezes") {
  const fs::path root = scratch("pretrain");
  RunConfig c = tiny_run(root);
  c.pretrain.random_frozen = true;
  gen_both(c);
  std::ostringstream log;
  const fs::path ckpt = root / "f.ckpt";
  const auto res = cmd_pretrain(c, PretrainCmdOptions{ckpt.string()}, log);
  CHECK(res.steps == 0);
  const auto enc = load_foundation(ckpt.string(), c.vit);
  CHECK(enc->frozen());
  CHECK(fs::exists(ckpt.string() + ".json"));
  fs::remove_all(root);
}

TEST_CASE("train, eval and the class-count check") {
  const fs::path root = scratch("train");
  RunConfig c = tiny_run(root);
  gen_both(c);
  std::ostringstream log;
  const fs::path fckpt = root / "f.ckpt";
  cmd_pretrain(c, PretrainCmdOptions{fckpt.string()}, log);

  c.foundations = {fckpt.string()};
  c.detector.image_queries = 5;
  c.resolve();
  const TrainResult tr = cmd_train(c, log);
  CHECK(tr.evaluated);
  CHECK(tr.image_queries_per_layer == 5);
  CHECK(tr.foundation_hash_before == tr.foundation_hash_after);
  const std::string metrics = slurp(fs::path(c.out_dir) / "metrics.csv");
  CHECK(metrics.rfind(std::string(kMetricsHeader) + "\n", 0) == 0);
  CHECK(fs::exists(fs::path(c.out_dir) / "detector.ckpt"));
  CHECK(fs::exists(fs::path(c.out_dir) / "manifest.json"));
  CHECK(load_config(fs::path(c.out_dir) / "config.ini").to_ini() == [&] {
    RunConfig e = c;
    e.checkpoint = (fs::path(c.out_dir) / "detector.ckpt").string();
    return e.to_ini();
  }());

  RunConfig ev = c;
  ev.data_dir = c.val_dir;
  ev.out_dir = (root / "eval").string();
  ev.checkpoint = (fs::path(c.out_dir) / "detector.ckpt").string();
  const EvalReport a = cmd_eval(ev, log);
  const std::string csv1 = slurp(fs::path(ev.out_dir) / "eval.csv");
  const EvalReport b = cmd_eval(ev, log);
  CHECK(slurp(fs::path(ev.out_dir) / "eval.csv") == csv1);
  CHECK(a.csv_row() == b.csv_row());
  CHECK(csv1.rfind("ap,ap50,ap75,aps,apm,apl,loc,cls,bg,fn\n", 0) == 0);

  // A dataset claiming a different class count is refused.
  {
    auto m = nlohmann::json::parse(slurp(fs::path(ev.data_dir) / "manifest.json"));
    m["num_classes"] = 4;
    std::ofstream(fs::path(ev.data_dir) / "manifest.json") << m.dump();
  }
  CHECK_THROWS_AS(cmd_eval(ev, log), ContractError);

  RunConfig vis = c;
  vis.out_dir = (root / "vis").string();
  vis.vis_images = 2;
  vis.score_threshold = 1.01;
  vis.checkpoint = (fs::path(c.out_dir) / "detector.ckpt").string();
  cmd_visualize(vis, log);
  CHECK(fs::exists(fs::path(vis.out_dir) / "norm_00000.pgm"));
  const auto train = load_dataset(c.data_dir);
  const Tensor overlay = read_ppm(fs::path(vis.out_dir) / "overlay_00000.ppm");
  CHECK(overlay.shape() == train[0].image.shape());
  for (std::int64_t k = 0; k < overlay.numel(); ++k) REQUIRE(overlay[k] == train[0].image[k]);

  // Missing foundation checkpoints and unfrozen foundations are contract errors.
  RunConfig missing = c;
  missing.foundations.clear();
  CHECK_THROWS_AS(build_detector(missing), ContractError);
  fs::remove_all(root);
}

TEST_CASE("unfrozen foundations need explicit permission") {
  const fs::path root = scratch("unfrozen");
  RunConfig c = tiny_run(root);
  FoundationEncoder enc(c.vit, 4);
  const fs::path ckpt = root / "live.ckpt";
  fs::create_directories(root);
  save_checkpoint(enc.params(), ckpt);
  c.foundations = {ckpt.string()};
  c.detector.image_queries = 1;
  c.resolve();
  CHECK_THROWS_AS(build_detector(c), ContractError);
  c.allow_trainable_foundation = true;
  c.resolve();
  const Detector det = build_detector(c);
  CHECK_FALSE(det.enhancers().front()->frozen());
  fs::remove_all(root);
}

TEST_CASE("ablate writes one row per grid cell") {
  const fs::path root = scratch("ablate");
  RunConfig c = tiny_run(root);
  c.n_images = 4;
  gen_both(c);
  std::ostringstream log;
  const fs::path fckpt = root / "f.ckpt";
  RunConfig p = c;
  p.pretrain.random_frozen = true;
  cmd_pretrain(p, PretrainCmdOptions{fckpt.string()}, log);
  c.foundations = {fckpt.string()};
  c.train.max_steps = 1;
  AblationGrid grid;
  grid.image_queries = {5};
  grid.strategies = {QueryStrategy::crop, QueryStrategy::masked_class_tokens};
  grid.fuse_patches = {false, true};
  const auto rows = cmd_ablate(c, grid, log);
  REQUIRE(rows.size() == grid.cardinality());
  CHECK(rows.size() == 4);
  for (const auto& r : rows) CHECK(r.block_passes_per_image == (r.strategy == QueryStrategy::crop ? 5 : 1));
  const std::string csv = slurp(fs::path(c.out_dir) / "ablate.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
  CHECK(csv.rfind("image_queries,fuse_patches,strategy,enhancers,foundation_size,trainable,passes_per_image,ap,", 0) ==
        0);
  fs::remove_all(root);
}

TEST_CASE("lr_drop leaves the trajectory unchanged until the drop epoch") {
  SceneSpec spec;
  spec.canvas = 64;
  const auto images = generate_dataset(spec, 4);
  DetectorConfig dc;
  dc.input_size = 64;
  dc.hidden = 16;
  dc.queries = 4;
  dc.enc_layers = 1;
  dc.dec_layers = 1;
  dc.heads = 2;
  dc.ffn = 32;
  dc.num_classes = 6;
  TrainInputs in;
  in.train = &images;
  auto run = [&](int drop) {
    Detector det(dc, 3);
    TrainOptions opt;
    opt.epochs = 2;
    opt.batch = 2;
    opt.lr = 1e-3;
    opt.lr_drop = drop;
    return train_detector(det, in, opt, 3, EvalOptions{64, 0.3, 1}).step_losses;
  };
  const auto flat = run(0), dropped = run(1);
  REQUIRE(flat.size() == 4);
  // Epoch 1 is identical; the second step of epoch 2 sees the smaller rate.
  CHECK(flat[0] == dropped[0]);
  CHECK(flat[1] == dropped[1]);
  CHECK(flat[2] == dropped[2]);
  CHECK(flat[3] != dropped[3]);
}
