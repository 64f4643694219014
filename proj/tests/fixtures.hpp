#pragma once

// Small models and inputs shared by the unit and acceptance tests.

#include <algorithm>
#include <cstring>
#include <memory>

#include "fdtr/detector.hpp"
#include "fdtr/vit.hpp"

namespace fdtr::testing {

inline ViTConfig tiny_vit(int image = 32, int g = 2, QueryStrategy s = QueryStrategy::masked_class_tokens,
                          int depth = 1) {
  ViTConfig c;
  c.image_size = image;
  c.patch_size = 8;
  c.depth = depth;
  c.dim = 16;
  c.heads = 2;
  c.mlp_ratio = 2.0;
  c.local_grid = g;
  c.strategy = s;
  return c;
}

inline DetectorConfig tiny_detector(int image_queries = 0, bool fuse = false, int enhancers = 0, int input = 64) {
  DetectorConfig c;
  c.input_size = input;
  c.num_classes = 6;
  c.hidden = 16;
  c.queries = 7;
  c.enc_layers = 1;
  c.dec_layers = 2;
  c.heads = 2;
  c.points = 2;
  c.ffn = 32;
  for (int k = 0; k < enhancers; ++k) c.enhancers.push_back(tiny_vit(32 + 8 * k));
  c.image_queries = image_queries;
  c.fuse_patches = fuse;
  return c;
}

/// Detector with randomly initialized, frozen enhancers attached.
inline Detector tiny_model(const DetectorConfig& cfg, std::uint64_t seed = 3) {
  Detector det(cfg, seed);
  for (std::size_t k = 0; k < det.config().enhancers.size(); ++k) {
    auto enc = std::make_shared<FoundationEncoder>(det.config().enhancers[k], seed + 100 + k);
    enc->freeze();
    det.attach_enhancer(enc);
  }
  return det;
}

inline Tensor random_image(std::uint64_t seed, int size) {
  Rng rng(seed);
  return rng.uniform_tensor({3, size, size}, 0.0, 1.0);
}

inline bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::equal(a.data().begin(), a.data().end(), b.data().begin(),
                    [](double x, double y) { return std::memcmp(&x, &y, sizeof(double)) == 0; });
}

}  // namespace fdtr::testing
