#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "fdtr/config.hpp"

using namespace fdtr;
namespace fs = std::filesystem;

namespace {

fs::path write_ini(const std::string& name, const std::string& text) {
  const fs::path p = fs::temp_directory_path() / ("fdtr_test_" + name + ".ini");
  std::ofstream(p) << text;
  return p;
}

struct EnvGuard {
  explicit EnvGuard(const char* value) {
    if (value) setenv("FDTR_SEED", value, 1);
    else unsetenv("FDTR_SEED");
  }
  ~EnvGuard() { unsetenv("FDTR_SEED"); }
};

}  // namespace

TEST_CASE("INI files set typed values by section") {
  const auto p = write_ini("basic",
                           "[run]\nseed = 42\nworkers = 3\n\n[scene]\ncanvas = 96\ncooccurrence = 0.5\n"
                           "[detector]\nimage_queries = 5\nfuse_patches = on\n"
                           "[foundation]\ncheckpoints = a.ckpt,b.ckpt\nstrategy = crop\ndim = 32\n"
                           "[train]\nlr = 2.5e-4\n");
  const RunConfig c = load_config(p);
  CHECK(c.resolved_seed() == 42);
  CHECK(c.workers == 3);
  CHECK(c.scene.canvas == 96);
  CHECK(c.scene.cooccurrence.at(0).probability == 0.5);
  CHECK(c.detector.image_queries == 5);
  CHECK(c.detector.fuse_patches);
  CHECK(c.foundations == std::vector<std::string>{"a.ckpt", "b.ckpt"});
  CHECK(c.vit.strategy == QueryStrategy::crop);
  CHECK(c.vit.dim == 32);
  CHECK(c.train.lr == 2.5e-4);
  fs::remove(p);
}

TEST_CASE("unknown keys, sections and bad values are contract errors") {
  RunConfig c;
  CHECK_THROWS_AS(c.set("train", "learning_rate", "1"), ContractError);
  CHECK_THROWS_AS(c.set("nope", "x", "1"), ContractError);
  CHECK_THROWS_AS(c.set("train", "epochs", "ten"), ContractError);
  CHECK_THROWS_AS(c.set("train", "epochs", "3x"), ContractError);
  CHECK_THROWS_AS(c.set("detector", "fuse_patches", "maybe"), ContractError);
  CHECK_THROWS_AS(c.set("foundation", "strategy", "everything"), ContractError);
  CHECK_THROWS_AS(c.set("no_equals_sign"), ContractError);
  CHECK_THROWS_AS(c.set("nodot=1"), ContractError);
  const auto p = write_ini("unknown", "[train]\nbogus = 1\n");
  CHECK_THROWS_AS(load_config(p), ContractError);
  const auto q = write_ini("orphan", "seed = 1\n");
  CHECK_THROWS_AS(load_config(q), ContractError);
  CHECK_THROWS_AS(load_config(fs::temp_directory_path() / "fdtr_missing.ini"), IoError);
  fs::remove(p);
  fs::remove(q);
}

TEST_CASE("section.key=value overrides, including numbered enhancer sections") {
  RunConfig c;
  c.set("train.epochs = 7");
  c.set("enhancer.1.image_size=64");
  CHECK(c.train.epochs == 7);
  REQUIRE(c.vit_overrides.size() == 2);
  CHECK(c.vit_overrides[1].image_size == 64);
  CHECK(c.vit_overrides[0].image_size == c.vit.image_size);
  CHECK_THROWS_AS(c.set("enhancer.9.dim=4"), ContractError);
}

TEST_CASE("a seed is mandatory and FDTR_SEED overrides the file") {
  RunConfig c;
  CHECK_THROWS_AS(c.resolved_seed(), ContractError);
  {
    EnvGuard env("123");
    apply_env_overrides(c);
    CHECK(c.resolved_seed() == 123);
    c.set("run", "seed", "5");
    apply_env_overrides(c);
    CHECK(c.resolved_seed() == 123);
  }
  {
    EnvGuard env(nullptr);
    RunConfig d;
    apply_env_overrides(d);
    CHECK_FALSE(d.seed.has_value());
  }
  {
    EnvGuard env("abc");
    RunConfig d;
    CHECK_THROWS_AS(apply_env_overrides(d), ContractError);
  }
}

TEST_CASE("resolve builds the enhancer list only when a path uses it") {
  RunConfig c;
  c.seed = 1;
  c.enhancers = 2;
  c.resolve();
  CHECK(c.detector.enhancers.empty());
  c.detector.image_queries = 1;
  c.set("enhancer.1.image_size=64");
  c.allow_trainable_foundation = true;
  c.resolve();
  REQUIRE(c.detector.enhancers.size() == 2);
  CHECK(c.detector.enhancers[0].image_size == c.vit.image_size);
  CHECK(c.detector.enhancers[1].image_size == 64);
  CHECK(c.detector.enhancers[1].allow_trainable);
  CHECK(c.scene.seed == 1);
  c.workers = 0;
  CHECK_THROWS_AS(c.resolve(), ContractError);
}

TEST_CASE("to_ini round-trips through the parser") {
  RunConfig c;
  c.seed = 77;
  c.set("train.lr=0.00012345678901234567");
  c.set("detector.image_queries=5");
  c.set("foundation.checkpoints=x.ckpt");
  c.set("enhancer.0.depth=2");
  c.set("scene.occlusion_rate=0.125");
  c.set("train.lr_drop=15");
  const auto p = write_ini("roundtrip", c.to_ini());
  const RunConfig back = load_config(p);
  CHECK(back.to_ini() == c.to_ini());
  CHECK(back.train.lr == c.train.lr);
  CHECK(back.train.lr_drop == 15);
  CHECK(back.vit_overrides.at(0).depth == 2);
  fs::remove(p);
}
