#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "fdtr/dataset.hpp"
#include "fdtr/eval.hpp"
#include "oracles.hpp"

using namespace fdtr;
using namespace fdtr::testing;

namespace {

EvalReport report_for(const std::vector<std::vector<Detection>>& dets, const std::vector<GroundTruth>& gts,
                      int canvas = 128) {
  EvalReport r;
  ApOptions o;
  o.canvas = canvas;
  compute_ap(dets, gts, o, r);
  return r;
}

}  // namespace

TEST_CASE("AP fixture: a single perfect detection") {
  GroundTruth g;
  g.boxes = {Box::from_corners(0.1, 0.1, 0.5, 0.5)};
  g.labels = {0};
  const auto r = report_for({{Detection{g.boxes[0], 0, 0.9}}}, {g});
  CHECK(r.ap == 1.0);
  CHECK(r.ap50 == 1.0);
  CHECK(r.ap75 == 1.0);
  CHECK(r.apl == 1.0);  // 0.16 * 128^2 px is large at this canvas
  CHECK(r.aps == 0.0);
  CHECK(r.apm == 0.0);
}

TEST_CASE("AP fixture: false positive ranked first, one target missed") {
  GroundTruth g;
  g.boxes = {Box::from_corners(0.1, 0.1, 0.3, 0.3), Box::from_corners(0.6, 0.6, 0.9, 0.9)};
  g.labels = {0, 0};
  std::vector<Detection> d = {{Box::from_corners(0.35, 0.0, 0.45, 0.1), 0, 0.9}, {g.boxes[0], 0, 0.8}};
  // Ranks: (P 0, R 0), (P .5, R .5). Interpolated precision is .5 on the 51
  // recall points 0..0.50 and 0 after.
  const auto r = report_for({d}, {g});
  CHECK(r.ap50 == doctest::Approx(25.5 / 101).epsilon(1e-15));
  CHECK(r.ap == doctest::Approx(25.5 / 101).epsilon(1e-15));
}

TEST_CASE("AP fixture: IoU 0.72 passes five of ten thresholds") {
  GroundTruth g;
  g.boxes = {Box::from_corners(0.1, 0.1, 0.6, 0.6)};
  g.labels = {1};
  const Box p = Box::from_corners(0.1, 0.1, 0.6, 0.46);
  REQUIRE(box_iou(p, g.boxes[0]) == doctest::Approx(0.72));
  const auto r = report_for({{Detection{p, 1, 0.7}}}, {g});
  CHECK(r.ap50 == 1.0);
  CHECK(r.ap75 == 0.0);
  CHECK(r.ap == doctest::Approx(0.5));
}

TEST_CASE("AP fixture: wrong label, duplicates and empty inputs") {
  GroundTruth g;
  g.boxes = {Box::from_corners(0.1, 0.1, 0.5, 0.5)};
  g.labels = {0};
  // The label-1 detection has no class-1 target, so it is ignored by class 0
  // and class 1 has no positives (excluded from the mean).
  CHECK(report_for({{Detection{g.boxes[0], 1, 0.9}}}, {g}).ap == 0.0);
  // Duplicate after the true positive only lowers precision past full recall.
  const auto dup = report_for({{Detection{g.boxes[0], 0, 0.9}, Detection{g.boxes[0], 0, 0.8}}}, {g});
  CHECK(dup.ap == 1.0);
  CHECK(report_for({{}}, {g}).ap == 0.0);
  CHECK(report_for({{}}, {GroundTruth{}}).ap == 0.0);
  CHECK_THROWS_AS(report_for({{}, {}}, {g}), ContractError);
}

TEST_CASE("AP fixture: area ranges scale with the canvas") {
  // 10x10 px at a 128 canvas: 100 px^2 is medium (40.96 .. 368.64 after scaling).
  GroundTruth g;
  g.boxes = {Box::from_corners(0.0, 0.0, 10.0 / 128, 10.0 / 128)};
  g.labels = {0};
  const auto r = report_for({{Detection{g.boxes[0], 0, 0.5}}}, {g});
  CHECK(r.apm == 1.0);
  CHECK(r.aps == 0.0);
  CHECK(r.apl == 0.0);
  // At a 640 canvas the same box covers 6400 px^2, still medium (1024 .. 9216).
  const auto r640 = report_for({{Detection{g.boxes[0], 0, 0.5}}}, {g}, 640);
  CHECK(r640.apm == 1.0);
  GroundTruth tiny;
  tiny.boxes = {Box::from_corners(0.0, 0.0, 4.0 / 128, 4.0 / 128)};
  tiny.labels = {0};
  CHECK(report_for({{Detection{tiny.boxes[0], 0, 0.5}}}, {tiny}).aps == 1.0);
}

TEST_CASE("AP evaluator matches an independent brute-force evaluator on 50 scenes") {
  Rng rng(77);
  for (int scene = 0; scene < 50; ++scene) {
    const ApScene sc = random_ap_scene(rng, 3);
    CAPTURE(scene);
    CHECK(ap_oracle_gap(sc, 3, 128) < 1e-9);
  }
}

TEST_CASE("AP is invariant to the order of detections within an image") {
  Rng rng(8);
  GroundTruth g;
  std::vector<Detection> d;
  for (int j = 0; j < 4; ++j) {
    const Box b{rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.1, 0.3), rng.uniform(0.1, 0.3)};
    g.boxes.push_back(b);
    g.labels.push_back(j % 2);
    d.push_back(Detection{jittered(rng, b, 0.2), j % 2, rng.uniform(0, 1)});
    d.push_back(Detection{jittered(rng, b, 0.4), j % 2, rng.uniform(0, 1)});
  }
  const double base = report_for({d}, {g}).ap;
  for (int t = 0; t < 10; ++t) {
    std::shuffle(d.begin(), d.end(), rng.engine());
    CHECK(report_for({d}, {g}).ap == base);
  }
}

TEST_CASE("decode_detections ranks every (query, class) score") {
  LayerOutput out;
  out.logits = Tensor::from({2, 3}, {0.0, 2.0, -1.0, 3.0, 0.0, 1.0});
  out.boxes = Tensor::from({2, 4}, {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8});
  const auto d = decode_detections(out, 4);
  REQUIRE(d.size() == 4);
  CHECK(d[0].label == 0);
  CHECK(d[0].box.cx == 0.5);
  CHECK(d[0].score == doctest::Approx(1 / (1 + std::exp(-3.0))));
  CHECK(d[1].label == 1);
  CHECK(d[1].box.cx == 0.1);
  CHECK(d[2].label == 2);  // logit 1.0 of query 1
  // Ties keep row-major order: query 0 class 0, then query 1 class 1.
  CHECK(d[3].label == 0);
  CHECK(d[3].box.cx == 0.1);
  CHECK(decode_detections(out).size() == 6);
}

TEST_CASE("error analysis fixture classifies every kind exactly") {
  GroundTruth g;
  const Box a = Box::from_corners(0.1, 0.1, 0.3, 0.3);
  const Box b = Box::from_corners(0.6, 0.1, 0.8, 0.3);
  const Box c = Box::from_corners(0.1, 0.6, 0.3, 0.8);
  g.boxes = {a, b, c};
  g.labels = {0, 1, 3};
  const Box b_shift = Box::from_corners(0.6 + 0.2 * 0.5385, 0.1, 0.8 + 0.2 * 0.5385, 0.3);  // IoU ~0.3 with b
  REQUIRE(box_iou(b_shift, b) > 0.1);
  REQUIRE(box_iou(b_shift, b) < 0.5);
  std::vector<Detection> d = {
      {a, 0, 0.95},                                         // correct
      {a, 0, 0.90},                                         // duplicate -> other
      {b, 2, 0.85},                                         // no class-2 target, overlaps b -> cls
      {b_shift, 1, 0.80},                                   // poorly localized -> loc
      {Box::from_corners(0.45, 0.45, 0.55, 0.55), 4, 0.7},  // nothing near -> bg
      {c, 3, 0.10},                                         // below the threshold
  };
  const auto kinds = classify_errors(d, g, ErrorOptions{0.3});
  CHECK(kinds == std::vector<ErrorKind>{ErrorKind::correct, ErrorKind::other, ErrorKind::cls, ErrorKind::loc,
                                        ErrorKind::bg});
  EvalReport r;
  error_analysis({d}, {g}, ErrorOptions{0.3}, r);
  CHECK(r.loc == doctest::Approx(0.2));
  CHECK(r.cls == doctest::Approx(0.2));
  CHECK(r.bg == doctest::Approx(0.2));
  CHECK(r.fn == doctest::Approx(1.0 / 3));  // c only has a low-scoring prediction
  EvalReport low;
  error_analysis({d}, {g}, ErrorOptions{0.05}, low);
  CHECK(low.fn == 0.0);
}

TEST_CASE("error analysis: a correct match consumes its target") {
  GroundTruth g;
  g.boxes = {Box::from_corners(0.1, 0.1, 0.3, 0.3), Box::from_corners(0.12, 0.1, 0.32, 0.3)};
  g.labels = {0, 0};
  std::vector<Detection> d = {{g.boxes[0], 0, 0.9}, {g.boxes[0], 0, 0.8}};
  // The second prediction still has a free same-class target at IoU >= .5.
  CHECK(classify_errors(d, g, {}) == std::vector<ErrorKind>{ErrorKind::correct, ErrorKind::correct});
}

TEST_CASE("report formats") {
  EvalReport r;
  r.ap = 0.5;
  r.fn = 0.125;
  CHECK(std::string(EvalReport::csv_header()) == "ap,ap50,ap75,aps,apm,apl,loc,cls,bg,fn");
  CHECK(r.csv_row() == "0.500000,0.000000,0.000000,0.000000,0.000000,0.000000,0.000000,0.000000,0.000000,0.125000");
  CHECK(r.table().rfind("AP      0.5000\n", 0) == 0);
}

TEST_CASE("feature norm maps") {
  PyramidLevel lv;
  lv.h = 2;
  lv.w = 3;
  // Norms 0, 1, 2, 3, 4, 5 -> 0 .. 255 linearly.
  lv.tokens = Tensor::from({6, 2}, {0, 0, 1, 0, 0, 2, 3, 0, 0, 4, 3, 4});
  const auto bytes = feature_norm_bytes(lv);
  CHECK(bytes == std::vector<std::uint8_t>{0, 51, 102, 153, 204, 255});
  lv.tokens = Tensor::full({6, 2}, 0.7);
  CHECK(feature_norm_bytes(lv) == std::vector<std::uint8_t>(6, 0));

  FeaturePyramid snap;
  snap.levels.push_back(lv);
  const auto path = std::filesystem::temp_directory_path() / "fdtr_test_norm.pgm";
  feature_norm_image(snap, 0, path);
  std::ifstream f(path, std::ios::binary);
  const std::string s{std::istreambuf_iterator<char>(f), {}};
  CHECK(s.substr(0, 11) == "P5\n3 2\n255\n");
  CHECK(s.size() == 17);
  CHECK_THROWS_AS(feature_norm_image(snap, 1, path), ContractError);
  std::filesystem::remove(path);
}

TEST_CASE("overlays draw only detections at or above the threshold") {
  const Tensor img = Tensor::full({3, 16, 16}, 0.5);
  std::vector<Detection> d = {{Box::from_corners(0.25, 0.25, 0.75, 0.75), 0, 0.6}};
  CHECK(overlay_detections(img, d, 1.01).data()[0] == 0.5);
  const Tensor none = overlay_detections(img, d, 1.01);
  CHECK(std::equal(none.data().begin(), none.data().end(), img.data().begin()));
  const Tensor one = overlay_detections(img, d, 0.5);
  // Red outline: top-left corner pixel (4, 4) and an interior pixel untouched.
  CHECK(one.data()[4 * 16 + 4] == 1.0);
  CHECK(one.data()[256 + 4 * 16 + 4] == 0.0);
  CHECK(one.data()[8 * 16 + 8] == 0.5);
}
