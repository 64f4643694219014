#include "fdtr/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace fdtr {

std::int64_t FeaturePyramid::total_tokens() const {
  std::int64_t n = 0;
  for (const auto& l : levels) n += l.size();
  return n;
}

int FeaturePyramid::count(LevelSource s) const {
  return static_cast<int>(std::count_if(levels.begin(), levels.end(), [s](const PyramidLevel& l) { return l.source == s; }));
}

Tensor FeaturePyramid::flat() const {
  if (levels.empty()) throw ContractError("empty feature pyramid");
  if (levels.size() == 1) return levels[0].tokens;
  std::vector<Tensor> parts;
  parts.reserve(levels.size());
  for (const auto& l : levels) parts.push_back(l.tokens);
  return concat_rows(parts);
}

std::vector<LevelShape> FeaturePyramid::shapes() const {
  std::vector<LevelShape> out;
  std::int64_t start = 0;
  for (const auto& l : levels) {
    out.push_back(LevelShape{l.h, l.w, start});
    start += l.size();
  }
  return out;
}

FeaturePyramid drop_foundation_levels(const FeaturePyramid& pyr) {
  FeaturePyramid out;
  for (const auto& l : pyr.levels)
    if (l.source == LevelSource::backbone) out.levels.push_back(l);
  return out;
}

int DetectorConfig::local_grid() const {
  if (image_queries <= 1) return 1;
  const int g = static_cast<int>(std::lround(std::sqrt(image_queries - 1.0)));
  return g;
}

void DetectorConfig::validate() const {
  if (queries < 1) throw ContractError("detector: need at least one object query");
  if (dec_layers < 1) throw ContractError("detector: need at least one decoder layer");
  if (num_classes < 1) throw ContractError("detector: need at least one class");
  if (heads < 1 || hidden % heads != 0) throw ContractError("detector: heads must divide the hidden width");
  if (hidden % 8 != 0) throw ContractError("detector: hidden width must be a multiple of 8");
  if (backbone_channels.size() != 5) throw ContractError("detector: backbone needs five stages");
  if (image_queries < 0) throw ContractError("detector: negative image-query count");
  if (image_queries > 1) {
    const int g = local_grid();
    if (g < 2 || 1 + g * g != image_queries)
      throw ContractError("detector: image_queries must be 0, 1 or 1+g^2, got " + std::to_string(image_queries));
  }
  if ((image_queries > 0 || fuse_patches) && enhancers.empty())
    throw ContractError("detector: image queries or patch fusion requested without an enhancer");
  if (input_size < 32 || input_size % 32 != 0)
    throw ContractError("detector: input size must be a positive multiple of 32, got " + std::to_string(input_size));
}

namespace {

constexpr double kTemperature = 10000.0;
constexpr int kBackboneLevels = 3;

void sine_features(double v, int n, double* out) {
  // n features for one coordinate: sin/cos pairs at geometric frequencies.
  for (int i = 0; i < n / 2; ++i) {
    const double f = v * 2.0 * std::numbers::pi / std::pow(kTemperature, 2.0 * i / n);
    out[2 * i] = std::sin(f);
    out[2 * i + 1] = std::cos(f);
  }
}

Tensor logit_of(double p) { return Tensor::scalar(std::log(p / (1.0 - p))); }

double inv_sigmoid(double x) {
  x = std::clamp(x, 1e-5, 1.0 - 1e-5);
  return std::log(x / (1.0 - x));
}

// Deformable-DETR style offset bias: head h points along angle 2*pi*h/H,
// point p at distance p+1.
Tensor offset_bias(int H, int L, int P) {
  Tensor b = Tensor::zeros({static_cast<std::int64_t>(H) * L * P * 2});
  auto B = b.data();
  for (int h = 0; h < H; ++h) {
    const double a = 2.0 * std::numbers::pi * h / H;
    double cx = std::cos(a), cy = std::sin(a);
    const double m = std::max(std::fabs(cx), std::fabs(cy));
    cx /= m;
    cy /= m;
    for (int l = 0; l < L; ++l)
      for (int p = 0; p < P; ++p) {
        const auto i = (((static_cast<std::int64_t>(h) * L + l) * P + p) * 2);
        B[i] = cx * (p + 1);
        B[i + 1] = cy * (p + 1);
      }
  }
  return b;
}

}  // namespace

Tensor box_sine_embedding(std::span<const Box> boxes, int dim) {
  if (dim % 8 != 0) throw ContractError("box_sine_embedding: dim must be a multiple of 8");
  const int per = dim / 4;
  Tensor out = Tensor::zeros({static_cast<std::int64_t>(std::max<std::size_t>(boxes.size(), 1)), dim});
  auto O = out.data();
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    double* row = O.data() + i * dim;
    sine_features(boxes[i].cx, per, row);
    sine_features(boxes[i].cy, per, row + per);
    sine_features(boxes[i].w, per, row + 2 * per);
    sine_features(boxes[i].h, per, row + 3 * per);
  }
  return out;
}

Tensor grid_sine_embedding(int h, int w, int dim) {
  if (dim % 4 != 0) throw ContractError("grid_sine_embedding: dim must be a multiple of 4");
  const int per = dim / 2;
  Tensor out = Tensor::zeros({static_cast<std::int64_t>(h) * w, dim});
  auto O = out.data();
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double* row = O.data() + (static_cast<std::int64_t>(y) * w + x) * dim;
      sine_features((y + 0.5) / h, per, row);
      sine_features((x + 0.5) / w, per, row + per);
    }
  return out;
}

Detector::Detector(DetectorConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
#ifdef FDTR_NO_ENHANCERS
  if (cfg_.uses_enhancers() || cfg_.self_query)
    throw ContractError("detector: this build has no enhancer support");
#endif
  for (auto& e : cfg_.enhancers) e.local_grid = cfg_.image_queries > 0 ? cfg_.local_grid() : 1;

  const int d = cfg_.hidden, H = cfg_.heads, P = cfg_.points;
  const int enc_levels = kBackboneLevels + (cfg_.fuse_patches ? static_cast<int>(cfg_.enhancers.size()) : 0);
  Rng rng(seed);
  auto dense = [&](const std::string& name, std::int64_t in, std::int64_t out, double lr = 1.0) {
    params_.add(name + ".w", rng.xavier(in, out), false, lr);
    params_.add(name + ".b", Tensor::zeros({out}), false, lr);
  };
  auto norm = [&](const std::string& name) {
    params_.add(name + ".g", Tensor::full({d}, 1.0));
    params_.add(name + ".b", Tensor::zeros({d}));
  };

  int cin = 3;
  for (std::size_t i = 0; i < cfg_.backbone_channels.size(); ++i) {
    const int co = cfg_.backbone_channels[i];
    const std::string p = "backbone." + std::to_string(i);
    params_.add(p + ".w", rng.normal_tensor({co, cin, 3, 3}, std::sqrt(2.0 / (cin * 9))), false, 0.1);
    params_.add(p + ".b", Tensor::zeros({co}), false, 0.1);
    cin = co;
  }
  for (int l = 0; l < kBackboneLevels; ++l) {
    const std::string p = "input_proj." + std::to_string(l);
    dense(p, cfg_.backbone_channels[2 + l], d);
    norm(p + ".ln");
  }
  params_.add("level_embed", rng.normal_tensor({kBackboneLevels, d}, 1.0));

  for (int l = 0; l < cfg_.enc_layers; ++l) {
    const std::string p = "enc." + std::to_string(l);
    params_.add(p + ".off.w", Tensor::zeros({d, static_cast<std::int64_t>(H) * enc_levels * P * 2}));
    params_.add(p + ".off.b", offset_bias(H, enc_levels, P));
    params_.add(p + ".attn.w", Tensor::zeros({d, static_cast<std::int64_t>(H) * enc_levels * P}));
    params_.add(p + ".attn.b", Tensor::zeros({static_cast<std::int64_t>(H) * enc_levels * P}));
    dense(p + ".value", d, d);
    dense(p + ".out", d, d);
    norm(p + ".ln1");
    dense(p + ".ffn1", d, cfg_.ffn);
    dense(p + ".ffn2", cfg_.ffn, d);
    norm(p + ".ln2");
  }

  params_.add("query.content", rng.normal_tensor({cfg_.queries, d}, 1.0));
  {
    Tensor anchors = Tensor::zeros({cfg_.queries, 4});
    auto A = anchors.data();
    for (int i = 0; i < cfg_.queries; ++i) {
      A[i * 4 + 0] = inv_sigmoid(rng.uniform(0.05, 0.95));
      A[i * 4 + 1] = inv_sigmoid(rng.uniform(0.05, 0.95));
      A[i * 4 + 2] = inv_sigmoid(0.2);
      A[i * 4 + 3] = inv_sigmoid(0.2);
    }
    params_.add("query.box", anchors);
  }
  dense("qpos.0", d, d);
  dense("qpos.1", d, d);

  for (int l = 0; l < cfg_.dec_layers; ++l) {
    const std::string p = "dec." + std::to_string(l);
    for (const char* n : {".sa.q", ".sa.k", ".sa.v", ".sa.o"}) dense(p + n, d, d);
    norm(p + ".ln1");
    params_.add(p + ".ca.off.w", Tensor::zeros({d, static_cast<std::int64_t>(H) * kBackboneLevels * P * 2}));
    params_.add(p + ".ca.off.b", offset_bias(H, kBackboneLevels, P));
    params_.add(p + ".ca.attn.w", Tensor::zeros({d, static_cast<std::int64_t>(H) * kBackboneLevels * P}));
    params_.add(p + ".ca.attn.b", Tensor::zeros({static_cast<std::int64_t>(H) * kBackboneLevels * P}));
    dense(p + ".ca.value", d, d);
    dense(p + ".ca.out", d, d);
    norm(p + ".ln2");
    dense(p + ".ffn1", d, cfg_.ffn);
    dense(p + ".ffn2", cfg_.ffn, d);
    norm(p + ".ln3");
    dense(p + ".box.0", d, d);
    dense(p + ".box.1", d, d);
    params_.add(p + ".box.2.w", Tensor::zeros({d, 4}));
    params_.add(p + ".box.2.b", Tensor::zeros({4}));
  }
  params_.add("cls.w", rng.xavier(d, cfg_.num_classes));
  params_.add("cls.b", Tensor::full({cfg_.num_classes}, logit_of(0.01).item()));

#ifndef FDTR_NO_ENHANCERS
  // Adapter weights come from their own stream so the detector trunk is
  // initialized identically with or without enhancers.
  Rng erng(derive_seed(seed, 0xE4));
  auto edense = [&](const std::string& name, std::int64_t in, std::int64_t out) {
    params_.add(name + ".w", erng.xavier(in, out));
    params_.add(name + ".b", Tensor::zeros({out}));
    params_.add(name + ".ln.g", Tensor::full({d}, 1.0));
    params_.add(name + ".ln.b", Tensor::zeros({d}));
  };
  if (cfg_.fuse_patches)
    for (std::size_t k = 0; k < cfg_.enhancers.size(); ++k) {
      const std::string p = "fuse." + std::to_string(k);
      edense(p, cfg_.enhancers[k].dim, d);
      params_.add(p + ".level", erng.normal_tensor({d}, 1.0));
    }
  for (int l = 0; l < cfg_.dec_layers; ++l) {
    const std::string p = "dec." + std::to_string(l) + ".iq.";
    if (cfg_.image_queries > 0)
      for (std::size_t k = 0; k < cfg_.enhancers.size(); ++k) edense(p + std::to_string(k), cfg_.enhancers[k].dim, d);
    if (cfg_.self_query) edense(p + "self", d, d);
  }
#endif
}

void Detector::attach_enhancer(std::shared_ptr<const FoundationEncoder> enc) {
  if (enhancers_.size() >= cfg_.enhancers.size())
    throw ContractError("detector: more enhancers attached than configured");
  const auto& vc = cfg_.enhancers[enhancers_.size()];
  if (enc->dim() != vc.dim) throw ContractError("detector: enhancer width does not match its configuration");
  if (!enc->frozen() && !vc.allow_trainable)
    throw ContractError("detector: enhancer checkpoint is not frozen and trainable foundations were not allowed");
  enhancers_.push_back(std::move(enc));
}

EnhancerOutputs Detector::run_enhancers(const Tensor& image) const {
  EnhancerOutputs out;
#ifndef FDTR_NO_ENHANCERS
  if (!cfg_.uses_enhancers()) return out;
  if (enhancers_.size() != cfg_.enhancers.size())
    throw ContractError("detector: " + std::to_string(cfg_.enhancers.size()) + " enhancers configured, " +
                        std::to_string(enhancers_.size()) + " attached");
  for (std::size_t k = 0; k < enhancers_.size(); ++k) {
    const auto& vc = cfg_.enhancers[k];
    // Asymmetric input: each enhancer sees its own pre-training size.
    const Tensor img = image.dim(1) == vc.image_size && image.dim(2) == vc.image_size
                           ? image
                           : resize_image(image, vc.image_size, vc.image_size);
    FoundationOutput fo = enhancers_[k]->encode(img, vc);
    for (auto& q : fo.queries) q.source = static_cast<int>(k);
    out.push_back(std::move(fo));
  }
#else
  (void)image;
#endif
  return out;
}

FeaturePyramid Detector::backbone_forward(const Tensor& image) const {
  if (image.rank() != 3 || image.dim(0) != 3)
    throw DimensionError("backbone: expected image [3,H,W], got " + shape_str(image.shape()));
  if (image.dim(1) % 32 != 0 || image.dim(2) % 32 != 0)
    throw DimensionError("backbone: image sides must be multiples of 32, got " + shape_str(image.shape()));
  FeaturePyramid pyr;
  Tensor x = image;
  for (std::size_t i = 0; i < cfg_.backbone_channels.size(); ++i) {
    const std::string p = "backbone." + std::to_string(i);
    x = relu(conv2d(x, W(p + ".w"), W(p + ".b"), 2, 1));
    if (i >= 2) {
      PyramidLevel lv;
      lv.h = static_cast<int>(x.dim(1));
      lv.w = static_cast<int>(x.dim(2));
      lv.stride = 1 << (i + 1);
      lv.tokens = flatten_feature_map(x);
      pyr.levels.push_back(std::move(lv));
    }
  }
  return pyr;
}

FeaturePyramid Detector::project_backbone(const FeaturePyramid& raw) const {
  FeaturePyramid out = raw;
  for (std::size_t l = 0; l < out.levels.size(); ++l) {
    const std::string p = "input_proj." + std::to_string(l);
    out.levels[l].tokens =
        layer_norm(linear(raw.levels[l].tokens, W(p + ".w"), W(p + ".b")), W(p + ".ln.g"), W(p + ".ln.b"), 1e-5);
  }
  return out;
}

FeaturePyramid Detector::append_foundation_levels(const FeaturePyramid& pyr, const EnhancerOutputs& enh) const {
  FeaturePyramid out = pyr;
#ifndef FDTR_NO_ENHANCERS
  if (!cfg_.fuse_patches) return out;
  if (enh.size() != cfg_.enhancers.size())
    throw ContractError("detector: expected outputs from " + std::to_string(cfg_.enhancers.size()) + " enhancers");
  for (std::size_t k = 0; k < enh.size(); ++k) {
    const std::string p = "fuse." + std::to_string(k);
    PyramidLevel lv;
    lv.h = enh[k].tokens.hp;
    lv.w = enh[k].tokens.wp;
    lv.source = LevelSource::foundation;
    lv.enhancer = static_cast<int>(k);
    lv.tokens =
        layer_norm(linear(enh[k].tokens.patches, W(p + ".w"), W(p + ".b")), W(p + ".ln.g"), W(p + ".ln.b"), 1e-5);
    out.levels.push_back(std::move(lv));
  }
#else
  (void)enh;
#endif
  return out;
}

Tensor Detector::deform_sample(const std::string& prefix, const Tensor& query, const Tensor& value,
                               const std::vector<LevelShape>& shapes, const std::vector<double>& ref,
                               bool ref_is_box) const {
  const auto Q = query.dim(0);
  const auto H = cfg_.heads, P = cfg_.points;
  const auto L = static_cast<std::int64_t>(shapes.size());
  Tensor off = reshape(linear(query, W(prefix + ".off.w"), W(prefix + ".off.b")), {Q, H, L, P, 2});
  Tensor aw = reshape(softmax(reshape(linear(query, W(prefix + ".attn.w"), W(prefix + ".attn.b")), {Q, H, L * P})),
                      {Q, H, L, P});
  // loc = ref_center + off * scale, scale and center constant per query.
  Tensor scale_t = Tensor::zeros({Q, H, L, P, 2});
  Tensor center = Tensor::zeros({Q, H, L, P, 2});
  auto S = scale_t.data();
  auto C = center.data();
  const int stride = ref_is_box ? 4 : 2;
  for (std::int64_t q = 0; q < Q; ++q) {
    const double cx = ref[q * stride], cy = ref[q * stride + 1];
    for (std::int64_t h = 0; h < H; ++h)
      for (std::int64_t l = 0; l < L; ++l) {
        const auto& lv = shapes[static_cast<std::size_t>(l)];
        double sx, sy;
        if (ref_is_box) {
          sx = ref[q * 4 + 2] * 0.5 / P;
          sy = ref[q * 4 + 3] * 0.5 / P;
        } else {
          sx = 1.0 / static_cast<double>(lv.w);
          sy = 1.0 / static_cast<double>(lv.h);
        }
        for (std::int64_t p = 0; p < P; ++p) {
          const auto i = (((q * H + h) * L + l) * P + p) * 2;
          S[i] = sx;
          S[i + 1] = sy;
          C[i] = cx;
          C[i + 1] = cy;
        }
      }
  }
  Tensor loc = add(mul(off, scale_t), center);
  return linear(deformable_attention(value, shapes, loc, aw), W(prefix + ".out.w"), W(prefix + ".out.b"));
}

Tensor Detector::encoder_layer(const Tensor& src, const Tensor& pos, const std::vector<LevelShape>& shapes,
                               const Tensor& ref_points, int layer) const {
  const std::string p = "enc." + std::to_string(layer);
  Tensor q = add(src, pos);
  Tensor value = linear(src, W(p + ".value.w"), W(p + ".value.b"));
  std::vector<double> ref(ref_points.data().begin(), ref_points.data().end());
  Tensor x = layer_norm(add(src, deform_sample(p, q, value, shapes, ref, false)), W(p + ".ln1.g"), W(p + ".ln1.b"),
                        1e-5);
  Tensor f = linear(relu(linear(x, W(p + ".ffn1.w"), W(p + ".ffn1.b"))), W(p + ".ffn2.w"), W(p + ".ffn2.b"));
  return layer_norm(add(x, f), W(p + ".ln2.g"), W(p + ".ln2.b"), 1e-5);
}

FeaturePyramid Detector::encoder_forward(const FeaturePyramid& pyr) const {
  if (pyr.levels.empty()) throw ContractError("encoder: empty pyramid");
  const int d = cfg_.hidden;
  const auto shapes = pyr.shapes();
  const int L = static_cast<int>(pyr.levels.size());
  const int expected = kBackboneLevels + (cfg_.fuse_patches ? static_cast<int>(cfg_.enhancers.size()) : 0);
  if (cfg_.enc_layers > 0 && L != expected)
    throw ContractError("encoder: built for " + std::to_string(expected) + " levels, got " + std::to_string(L));
  if (cfg_.enc_layers == 0) return pyr;

  std::vector<Tensor> pos_parts;
  Tensor refs = Tensor::zeros({pyr.total_tokens(), 2});
  auto R = refs.data();
  std::int64_t row = 0;
  for (int l = 0; l < L; ++l) {
    const auto& lv = pyr.levels[static_cast<std::size_t>(l)];
    Tensor emb = lv.source == LevelSource::backbone
                     ? reshape(slice_rows(W("level_embed"), l, l + 1), {d})
                     : W("fuse." + std::to_string(lv.enhancer) + ".level");
    pos_parts.push_back(add(grid_sine_embedding(lv.h, lv.w, d), emb));
    for (int y = 0; y < lv.h; ++y)
      for (int x = 0; x < lv.w; ++x, ++row) {
        R[row * 2] = (x + 0.5) / lv.w;
        R[row * 2 + 1] = (y + 0.5) / lv.h;
      }
  }
  Tensor pos = pos_parts.size() == 1 ? pos_parts[0] : concat_rows(pos_parts);
  Tensor x = pyr.flat();
  for (int layer = 0; layer < cfg_.enc_layers; ++layer) x = encoder_layer(x, pos, shapes, refs, layer);

  FeaturePyramid out = pyr;
  for (int l = 0; l < L; ++l) {
    const auto& s = shapes[static_cast<std::size_t>(l)];
    out.levels[static_cast<std::size_t>(l)].tokens = slice_rows(x, s.start, s.start + s.h * s.w);
  }
  return out;
}

std::vector<ImageQuery> Detector::image_queries(const EnhancerOutputs& enh, const FeaturePyramid& projected) const {
  std::vector<ImageQuery> out;
#ifndef FDTR_NO_ENHANCERS
  if (cfg_.image_queries > 0) {
    if (enh.size() != cfg_.enhancers.size())
      throw ContractError("detector: expected outputs from " + std::to_string(cfg_.enhancers.size()) + " enhancers");
    for (std::size_t k = 0; k < enh.size(); ++k) {
      if (static_cast<int>(enh[k].queries.size()) < cfg_.image_queries)
        throw ContractError("detector: enhancer " + std::to_string(k) + " produced " +
                            std::to_string(enh[k].queries.size()) + " image queries, need " +
                            std::to_string(cfg_.image_queries));
      for (int i = 0; i < cfg_.image_queries; ++i) {
        ImageQuery q = enh[k].queries[static_cast<std::size_t>(i)];
        q.source = static_cast<int>(k);
        out.push_back(std::move(q));
      }
    }
  }
  if (cfg_.self_query && !projected.levels.empty())
    out.push_back(ImageQuery{mean_rows(projected.levels[0].tokens), Box::full(), -1});
#else
  (void)enh;
  (void)projected;
#endif
  return out;
}

Tensor Detector::query_pos(std::span<const Box> boxes) const {
  const Tensor s = box_sine_embedding(boxes, cfg_.hidden);
  return linear(relu(linear(s, W("qpos.0.w"), W("qpos.0.b"))), W("qpos.1.w"), W("qpos.1.b"));
}

LayerOutput Detector::decoder_layer(DecoderState& st, std::span<const ImageQuery> iqs, const FeaturePyramid& memory,
                                    int layer, ForwardTrace* trace) const {
  const std::string p = "dec." + std::to_string(layer);
  const auto N = st.content.dim(0);
  const auto M = static_cast<std::int64_t>(iqs.size());
  if (N + M > cfg_.max_decoder_tokens)
    throw ContractError("decoder: " + std::to_string(N) + " object + " + std::to_string(M) +
                        " image queries exceed the limit of " + std::to_string(cfg_.max_decoder_tokens));

  Tensor tgt = st.content;
  Tensor pos = query_pos(st.ref);
  Tensor x = tgt, xp = pos;
#ifndef FDTR_NO_ENHANCERS
  if (M > 0) {
    // Project each image query with this layer's adapter for its source,
    // then ride along in self-attention only.
    std::vector<Tensor> feats;
    std::vector<Box> boxes;
    for (const auto& q : iqs) {
      const std::string a = p + ".iq." + (q.source < 0 ? std::string("self") : std::to_string(q.source));
      Tensor f = reshape(q.feature, {1, q.feature.numel()});
      feats.push_back(
          layer_norm(linear(f, W(a + ".w"), W(a + ".b")), W(a + ".ln.g"), W(a + ".ln.b"), 1e-5));
      boxes.push_back(q.box);
    }
    feats.insert(feats.begin(), tgt);
    x = concat_rows(feats);
    const Tensor ipos = query_pos(boxes);
    const Tensor parts[] = {pos, ipos};
    xp = concat_rows(parts);
  }
#endif
  if (trace) trace->image_queries_per_layer.push_back(static_cast<int>(M));

  Tensor qk = add(x, xp);
  Tensor a = multihead_attention(linear(qk, W(p + ".sa.q.w"), W(p + ".sa.q.b")),
                                 linear(qk, W(p + ".sa.k.w"), W(p + ".sa.k.b")),
                                 linear(x, W(p + ".sa.v.w"), W(p + ".sa.v.b")), cfg_.heads);
  if (M > 0) a = slice_rows(a, 0, N);  // image queries are discarded here
  tgt = layer_norm(add(tgt, linear(a, W(p + ".sa.o.w"), W(p + ".sa.o.b"))), W(p + ".ln1.g"), W(p + ".ln1.b"), 1e-5);

  for (const auto& lv : memory.levels) {
    if (lv.source != LevelSource::backbone)
      throw ContractError("decoder: cross-attention reached a foundation level");
    if (trace) trace->decoder_reads.push_back(lv.source);
  }
  Tensor value = linear(memory.flat(), W(p + ".ca.value.w"), W(p + ".ca.value.b"));
  std::vector<double> ref;
  ref.reserve(st.ref.size() * 4);
  for (const auto& b : st.ref) ref.insert(ref.end(), {b.cx, b.cy, b.w, b.h});
  Tensor ca = deform_sample(p + ".ca", add(tgt, pos), value, memory.shapes(), ref, true);
  tgt = layer_norm(add(tgt, ca), W(p + ".ln2.g"), W(p + ".ln2.b"), 1e-5);
  Tensor f = linear(relu(linear(tgt, W(p + ".ffn1.w"), W(p + ".ffn1.b"))), W(p + ".ffn2.w"), W(p + ".ffn2.b"));
  tgt = layer_norm(add(tgt, f), W(p + ".ln3.g"), W(p + ".ln3.b"), 1e-5);

  LayerOutput out;
  out.logits = linear(tgt, W("cls.w"), W("cls.b"));
  Tensor delta = linear(relu(linear(relu(linear(tgt, W(p + ".box.0.w"), W(p + ".box.0.b"))), W(p + ".box.1.w"),
                                    W(p + ".box.1.b"))),
                        W(p + ".box.2.w"), W(p + ".box.2.b"));
  Tensor logit;
  if (layer == 0) {
    logit = add(st.box_logits, delta);
  } else {
    // Refine from the previous layer's detached boxes.
    Tensor prev = Tensor::zeros({N, 4});
    auto Pd = prev.data();
    for (std::int64_t i = 0; i < N; ++i) {
      const auto& b = st.ref[static_cast<std::size_t>(i)];
      Pd[i * 4] = inv_sigmoid(b.cx);
      Pd[i * 4 + 1] = inv_sigmoid(b.cy);
      Pd[i * 4 + 2] = inv_sigmoid(b.w);
      Pd[i * 4 + 3] = inv_sigmoid(b.h);
    }
    logit = add(prev, delta);
  }
  out.boxes = sigmoid(logit);
  const auto B = out.boxes.data();
  for (std::int64_t i = 0; i < N; ++i) st.ref[static_cast<std::size_t>(i)] = Box{B[i * 4], B[i * 4 + 1], B[i * 4 + 2], B[i * 4 + 3]};
  st.content = tgt;
  if (trace) trace->outputs_per_layer.push_back(static_cast<int>(N));
  return out;
}

DetectionOutput Detector::forward(const Tensor& image, const EnhancerOutputs* enh, ForwardTrace* trace,
                                  bool snapshot) const {
  if (image.dim(1) != cfg_.input_size || image.dim(2) != cfg_.input_size)
    throw DimensionError("detector: expected input " + std::to_string(cfg_.input_size) + "x" +
                         std::to_string(cfg_.input_size) + ", got " + shape_str(image.shape()));
  const FeaturePyramid raw = backbone_forward(image);
  const FeaturePyramid proj = project_backbone(raw);

  EnhancerOutputs local;
  if (cfg_.uses_enhancers() && enh == nullptr) {
    local = run_enhancers(image);
    enh = &local;
  }
  static const EnhancerOutputs kNone;
  const EnhancerOutputs& E = enh ? *enh : kNone;

  const FeaturePyramid fused = cfg_.fuse_patches ? append_foundation_levels(proj, E) : proj;
  const FeaturePyramid encoded = encoder_forward(fused);
  const FeaturePyramid memory = cfg_.fuse_patches ? drop_foundation_levels(encoded) : encoded;
  const std::vector<ImageQuery> iqs = image_queries(E, proj);
  if (trace) {
    trace->backbone_levels = fused.count(LevelSource::backbone);
    trace->encoder_levels = static_cast<int>(fused.levels.size());
    trace->encoder_tokens = fused.total_tokens();
  }

  DetectionOutput out = decode(memory, iqs, trace);
  if (snapshot) out.encoder_snapshot = encoded;
  return out;
}

DetectionOutput Detector::decode(const FeaturePyramid& memory, std::span<const ImageQuery> iqs,
                                 ForwardTrace* trace) const {
  DecoderState st;
  st.content = W("query.content");
  st.box_logits = W("query.box");
  const auto A = st.box_logits.data();
  for (int i = 0; i < cfg_.queries; ++i) {
    auto sg = [&](int j) { return 1.0 / (1.0 + std::exp(-A[i * 4 + j])); };
    st.ref.push_back(Box{sg(0), sg(1), sg(2), sg(3)});
  }
  DetectionOutput out;
  for (int l = 0; l < cfg_.dec_layers; ++l) out.layers.push_back(decoder_layer(st, iqs, memory, l, trace));
  return out;
}

}  // namespace fdtr
