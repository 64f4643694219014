#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>

#include "fdtr/dataset.hpp"
#include "fixtures.hpp"

using namespace fdtr;
using fdtr::testing::bit_equal;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("fdtr_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

bool on_pixel_grid(double v, int n) { return std::abs(v * n - std::round(v * n)) < 1e-9; }

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

SceneSpec clean_scene(std::uint64_t seed) {
  SceneSpec s;
  s.seed = seed;
  s.canvas = 64;
  s.occlusion_rate = 0.0;
  s.distractors = 0;
  s.background_noise = 0.0;
  return s;
}

}  // namespace

TEST_CASE("generation is deterministic and per-image independent") {
  SceneSpec s;
  s.canvas = 64;
  s.seed = 99;
  const auto a = generate_dataset(s, 6);
  const auto b = generate_dataset(s, 6, Split::train, nullptr, 3);
  for (int i = 0; i < 6; ++i) {
    CHECK(bit_equal(a[i].image, b[i].image));
    CHECK(a[i].gt.labels == b[i].gt.labels);
    CHECK(a[i].gt.boxes == b[i].gt.boxes);
    const auto single = generate_image(s, Split::train, i);
    CHECK(bit_equal(single.image, a[i].image));
  }
  CHECK_FALSE(bit_equal(generate_image(s, Split::val, 0).image, a[0].image));
  s.seed = 100;
  CHECK_FALSE(bit_equal(generate_image(s, Split::train, 0).image, a[0].image));
}

TEST_CASE("boxes are tight, on the pixel grid and cover every painted pixel") {
  for (std::uint64_t seed = 1; seed <= 40; ++seed) {
    const SceneSpec s = clean_scene(seed);
    const auto im = generate_image(s, Split::train, 0);
    const int n = s.canvas;
    const auto D = im.image.data();
    // Flat background: anything differing from the corner is object paint.
    int x0 = n, y0 = n, x1 = 0, y1 = 0;
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        bool diff = false;
        for (int c = 0; c < 3; ++c) diff |= D[(c * n + y) * n + x] != D[c * n * n];
        if (diff) {
          x0 = std::min(x0, x);
          y0 = std::min(y0, y);
          x1 = std::max(x1, x + 1);
          y1 = std::max(y1, y + 1);
        }
      }
    double bx0 = 1, by0 = 1, bx1 = 0, by1 = 0;
    for (const auto& b : im.gt.boxes) {
      CHECK(on_pixel_grid(b.x0(), n));
      CHECK(on_pixel_grid(b.x1(), n));
      CHECK(on_pixel_grid(b.y0(), n));
      CHECK(on_pixel_grid(b.y1(), n));
      CHECK(b.w > 0);
      CHECK(b.h > 0);
      bx0 = std::min(bx0, b.x0());
      by0 = std::min(by0, b.y0());
      bx1 = std::max(bx1, b.x1());
      by1 = std::max(by1, b.y1());
    }
    if (im.gt.size() == 0) continue;
    CHECK(std::lround(bx0 * n) == x0);
    CHECK(std::lround(by0 * n) == y0);
    CHECK(std::lround(bx1 * n) == x1);
    CHECK(std::lround(by1 * n) == y1);
  }
}

TEST_CASE("robot boxes are the union of their parts") {
  int robots = 0;
  for (std::uint64_t seed = 1; seed <= 60; ++seed) {
    const auto im = generate_image(clean_scene(seed), Split::train, 0);
    const auto& L = im.gt.labels;
    for (std::size_t i = 0; i < L.size(); ++i) {
      if (L[i] != kRobot) continue;
      ++robots;
      REQUIRE(i + 3 < L.size());
      CHECK(L[i + 1] == kHead);
      CHECK(L[i + 2] == kWheel);
      CHECK(L[i + 3] == kWheel);
      const Box& r = im.gt.boxes[i];
      for (int k = 1; k <= 3; ++k) {
        const Box& p = im.gt.boxes[i + k];
        CHECK(p.x0() >= r.x0() - 1e-12);
        CHECK(p.x1() <= r.x1() + 1e-12);
        CHECK(p.y0() >= r.y0() - 1e-12);
        CHECK(p.y1() <= r.y1() + 1e-12);
      }
      CHECK(r.y0() == doctest::Approx(im.gt.boxes[i + 1].y0()));
      CHECK(r.y1() == doctest::Approx(std::max(im.gt.boxes[i + 2].y1(), im.gt.boxes[i + 3].y1())));
    }
  }
  CHECK(robots > 5);
}

TEST_CASE("flags co-occur with crates at the configured rate") {
  SceneSpec s;
  s.canvas = 64;
  s.seed = 5;
  GenerationStats stats;
  const auto images = generate_dataset(s, 500, Split::train, &stats);
  int crates = 0, flags = 0;
  for (const auto& im : images) {
    const auto& L = im.gt.labels;
    for (std::size_t i = 0; i < L.size(); ++i) {
      crates += L[i] == kCrate;
      if (L[i] == kFlag) {
        ++flags;
        // A flag always directly follows its crate and stands on its top edge.
        REQUIRE(i > 0);
        CHECK(L[i - 1] == kCrate);
        CHECK(im.gt.boxes[i].y1() == doctest::Approx(im.gt.boxes[i - 1].y0()));
      }
    }
  }
  REQUIRE(crates > 150);
  const double rate = static_cast<double>(flags) / crates;
  CHECK(rate > 0.7);
  CHECK(rate < 0.9);

  for (double p : {0.0, 1.0}) {
    s.cooccurrence[0].probability = p;
    int c = 0, f = 0;
    for (const auto& im : generate_dataset(s, 100))
      for (int l : im.gt.labels) {
        c += l == kCrate;
        f += l == kFlag;
      }
    CHECK(f == (p == 0.0 ? 0 : c));
  }
}

TEST_CASE("scene spec validation") {
  SceneSpec s;
  s.occlusion_rate = 1.5;
  CHECK_THROWS_AS(s.validate(), ContractError);
  s = SceneSpec{};
  s.min_objects = 4;
  s.max_objects = 2;
  CHECK_THROWS_AS(s.validate(), ContractError);
  s = SceneSpec{};
  s.cooccurrence[0].partner = kBall;
  CHECK_THROWS_AS(s.validate(), ContractError);
  CHECK_THROWS_AS(generate_dataset(SceneSpec{}, 0), ContractError);
}

TEST_CASE("crowded scenes count skipped placements") {
  SceneSpec s;
  s.canvas = 32;
  s.min_objects = s.max_objects = 8;
  s.seed = 3;
  GenerationStats stats;
  const auto images = generate_dataset(s, 5, Split::train, &stats);
  CHECK(stats.skipped_objects > 0);
}

TEST_CASE("JSONL annotations round-trip and report malformed lines") {
  const fs::path dir = scratch("jsonl");
  SceneSpec s;
  s.canvas = 64;
  auto images = generate_dataset(s, 4);
  save_dataset(dir, images);
  const auto back = load_dataset(dir);
  REQUIRE(back.size() == 4);
  for (int i = 0; i < 4; ++i) {
    CHECK(back[i].id == i);
    CHECK(back[i].file == images[i].file);
    CHECK(back[i].gt.labels == images[i].gt.labels);
    CHECK(back[i].gt.boxes == images[i].gt.boxes);  // exact doubles survive JSON
    // Pixels survive up to 8-bit quantization.
    for (std::int64_t k = 0; k < back[i].image.numel(); ++k)
      CHECK(std::abs(back[i].image[k] - images[i].image[k]) <= 0.5 / 255 + 1e-12);
  }

  const auto first = slurp(dir / "annotations.jsonl");
  CHECK(first.rfind("{\"boxes\":[", 0) == 0);
  CHECK(first.find("\"image_id\":0") != std::string::npos);

  {
    std::ofstream f(dir / "bad.jsonl");
    f << "{\"image_id\":0,\"file\":\"a.ppm\",\"width\":8,\"height\":8,\"boxes\":[],\"labels\":[]}\n"
      << "{\"image_id\":1,\"file\":\"b.ppm\",\"width\":8,\"height\":8,\"boxes\":[[0.5,0.5,0.1]],\"labels\":[1]}\n";
  }
  try {
    read_annotations(dir / "bad.jsonl");
    FAIL("expected IoError");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("bad.jsonl:2: malformed annotation") != std::string::npos);
  }
  {
    std::ofstream f(dir / "bad2.jsonl");
    f << "{\"image_id\":0,\"file\":\"a.ppm\"}\n";
  }
  CHECK_THROWS_AS(read_annotations(dir / "bad2.jsonl"), IoError);
  {
    std::ofstream f(dir / "bad3.jsonl");
    f << "not json\n";
  }
  CHECK_THROWS_AS(read_annotations(dir / "bad3.jsonl"), IoError);
  CHECK_THROWS_AS(read_annotations(dir / "missing.jsonl"), IoError);
  fs::remove_all(dir);
}

TEST_CASE("netpbm: golden headers and byte layout") {
  const auto pgm = encode_pgm({0, 7, 255, 128, 1, 2}, 3, 2);
  const std::string head(pgm.begin(), pgm.begin() + 11);
  CHECK(head == "P5\n3 2\n255\n");
  CHECK(pgm.size() == 11 + 6);
  CHECK(pgm[11] == 0);
  CHECK(pgm[13] == 255);
  CHECK_THROWS_AS(encode_pgm({1, 2, 3}, 2, 2), DimensionError);

  // Planar [3, 1, 2] -> interleaved RGB.
  const Tensor img = Tensor::from({3, 1, 2}, {0.0, 1.0, 0.5, 0.2, 1.0, 0.0});
  const auto ppm = encode_ppm(img);
  const std::string phead(ppm.begin(), ppm.begin() + 11);
  CHECK(phead == "P6\n2 1\n255\n");
  const std::vector<std::uint8_t> px(ppm.begin() + 11, ppm.end());
  CHECK(px == std::vector<std::uint8_t>{0, 128, 255, 255, 51, 0});

  const fs::path dir = scratch("pnm");
  write_ppm(dir / "x.ppm", img);
  const Tensor back = read_ppm(dir / "x.ppm");
  CHECK(back.shape() == Shape{3, 1, 2});
  CHECK(back[2] == 128.0 / 255.0);
  {
    std::ofstream f(dir / "c.ppm", std::ios::binary);
    f << "P6\n# made by hand\n1 1\n255\n" << '\xff' << '\x00' << '\x7f';
  }
  const Tensor c = read_ppm(dir / "c.ppm");
  CHECK(c[0] == 1.0);
  CHECK(c[2] == 127.0 / 255.0);
  {
    std::ofstream f(dir / "t.ppm", std::ios::binary);
    f << "P6\n2 2\n255\n" << "abc";
  }
  CHECK_THROWS_AS(read_ppm(dir / "t.ppm"), IoError);
  {
    std::ofstream f(dir / "p3.ppm", std::ios::binary);
    f << "P3\n1 1\n255\n0 0 0\n";
  }
  CHECK_THROWS_AS(read_ppm(dir / "p3.ppm"), IoError);
  fs::remove_all(dir);
}
