#include "fdtr/vit.hpp"

#include <algorithm>
#include <cmath>
#include <optional>

#include "kernels.hpp"

namespace fdtr {

std::string to_string(QueryStrategy s) {
  switch (s) {
    case QueryStrategy::crop: return "crop";
    case QueryStrategy::mean_patch: return "mean_patch";
    case QueryStrategy::masked_class_tokens: return "masked_class_tokens";
  }
  return "?";
}

QueryStrategy parse_strategy(const std::string& s) {
  if (s == "crop") return QueryStrategy::crop;
  if (s == "mean_patch") return QueryStrategy::mean_patch;
  if (s == "masked_class_tokens") return QueryStrategy::masked_class_tokens;
  throw ContractError("unknown image-query strategy '" + s + "' (crop|mean_patch|masked_class_tokens)");
}

static std::vector<int> split_even(int n, int g) {
  std::vector<int> starts(static_cast<std::size_t>(g) + 1, 0);
  const int base = n / g, rem = n % g;
  for (int i = 0; i < g; ++i) starts[i + 1] = starts[i] + base + (i < rem ? 1 : 0);
  return starts;
}

RegionGrid::RegionGrid(int g, int hp, int wp) : g_(std::max(g, 1)), hp_(hp), wp_(wp) {
  if (hp < g_ || wp < g_)
    throw ContractError("RegionGrid: a " + std::to_string(hp) + "x" + std::to_string(wp) +
                        " patch grid cannot be split into " + std::to_string(g_) + "x" + std::to_string(g_) +
                        " regions");
  row_start_ = split_even(hp, g_);
  col_start_ = split_even(wp, g_);
  region_of_.assign(static_cast<std::size_t>(hp) * wp, 0);
  members_.assign(static_cast<std::size_t>(g_) * g_, {});
  for (int r = 0; r < g_; ++r)
    for (int c = 0; c < g_; ++c)
      for (int y = row_start_[r]; y < row_start_[r + 1]; ++y)
        for (int x = col_start_[c]; x < col_start_[c + 1]; ++x) {
          const auto idx = static_cast<std::int64_t>(y) * wp + x;
          region_of_[static_cast<std::size_t>(idx)] = r * g_ + c;
        }
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(region_of_.size()); ++i)
    members_[static_cast<std::size_t>(region_of_[static_cast<std::size_t>(i)])].push_back(i);
}

Box RegionGrid::box(int region) const {
  const int r = region / g_, c = region % g_;
  return Box::from_corners(static_cast<double>(col_start_[c]) / wp_, static_cast<double>(row_start_[r]) / hp_,
                           static_cast<double>(col_start_[c + 1]) / wp_,
                           static_cast<double>(row_start_[r + 1]) / hp_);
}

BoolMask build_attention_mask(const RegionGrid& grid, int num_patches) {
  const int nl = grid.num_regions();
  const std::int64_t n = 1 + nl + num_patches;
  BoolMask m{{n, n}, std::vector<std::uint8_t>(static_cast<std::size_t>(n * n), 0)};
  auto allow = [&](std::int64_t i, std::int64_t j) { m.allow[static_cast<std::size_t>(i * n + j)] = 1; };
  const std::int64_t p0 = 1 + nl;
  // Global and patch rows: the pretrained path, blind to local tokens.
  for (std::int64_t i = 0; i < n; ++i) {
    if (i >= 1 && i < p0) continue;
    allow(i, 0);
    for (std::int64_t j = p0; j < n; ++j) allow(i, j);
  }
  for (int r = 0; r < nl; ++r) {
    allow(1 + r, 1 + r);
    for (auto p : grid.members(r)) allow(1 + r, p0 + p);
  }
  return m;
}

FoundationEncoder::FoundationEncoder(FoundationEncoder&& o) noexcept
    : params_(std::move(o.params_)),
      patch_(o.patch_),
      dim_(o.dim_),
      depth_(o.depth_),
      grid_(o.grid_),
      hidden_(o.hidden_),
      passes_(o.passes_.load()) {}

FoundationEncoder::FoundationEncoder(const ViTConfig& arch, std::uint64_t seed)
    : patch_(arch.patch_size), dim_(arch.dim), depth_(arch.depth), grid_(arch.grid()) {
  if (arch.patch_size < 1 || arch.image_size % arch.patch_size != 0)
    throw ContractError("ViT: image_size " + std::to_string(arch.image_size) + " is not divisible by patch_size " +
                        std::to_string(arch.patch_size));
  if (arch.heads < 1 || arch.dim % arch.heads != 0) throw ContractError("ViT: heads must divide dim");
  hidden_ = std::max(1, static_cast<int>(std::lround(arch.dim * arch.mlp_ratio)));
  Rng rng(seed);
  const std::int64_t pd = 3LL * patch_ * patch_;
  params_.add("patch.w", rng.xavier(pd, dim_));
  params_.add("patch.b", Tensor::zeros({dim_}));
  params_.add("cls", rng.normal_tensor({dim_}, 0.02));
  params_.add("pos", rng.normal_tensor({1LL + grid_ * grid_, dim_}, 0.02));
  for (int l = 0; l < depth_; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    params_.add(p + "ln1.g", Tensor::full({dim_}, 1.0));
    params_.add(p + "ln1.b", Tensor::zeros({dim_}));
    for (const char* n : {"q", "k", "v", "o"}) {
      params_.add(p + n + ".w", rng.xavier(dim_, dim_));
      params_.add(p + n + ".b", Tensor::zeros({dim_}));
    }
    params_.add(p + "ln2.g", Tensor::full({dim_}, 1.0));
    params_.add(p + "ln2.b", Tensor::zeros({dim_}));
    params_.add(p + "fc1.w", rng.xavier(dim_, hidden_));
    params_.add(p + "fc1.b", Tensor::zeros({hidden_}));
    params_.add(p + "fc2.w", rng.xavier(hidden_, dim_));
    params_.add(p + "fc2.b", Tensor::zeros({dim_}));
  }
  params_.add("head.ln.g", Tensor::full({dim_}, 1.0));
  params_.add("head.ln.b", Tensor::zeros({dim_}));
  params_.add("head.w", rng.xavier(dim_, 4));
  params_.add("head.b", Tensor::zeros({4}));
}

FoundationEncoder FoundationEncoder::from_checkpoint(const ViTConfig& arch, const std::string& path) {
  FoundationEncoder enc(arch, 0);
  load_checkpoint(enc.params_, path);
  return enc;
}

bool FoundationEncoder::frozen() const {
  return std::all_of(params_.all().begin(), params_.all().end(), [](const Parameter& p) { return p.frozen; });
}

Tensor FoundationEncoder::pos_for(const ViTConfig& cfg) const {
  const Tensor& pos = params_.get("pos").tensor;
  const Tensor grid_part = slice_rows(pos, 1, pos.dim(0));
  if (cfg.grid() == grid_) return grid_part;
  if (!cfg.interpolate_pos)
    throw DimensionError("ViT: input grid " + std::to_string(cfg.grid()) + "x" + std::to_string(cfg.grid()) +
                         " differs from the stored positional grid " + std::to_string(grid_) + "x" +
                         std::to_string(grid_) + " and interpolation is disabled");
  return interpolate_pos_embed(grid_part, grid_, grid_, cfg.grid(), cfg.grid());
}

TokenSequence FoundationEncoder::patch_embed(const Tensor& image, const ViTConfig& cfg, bool with_local) const {
  if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) != cfg.image_size || image.dim(2) != cfg.image_size)
    throw DimensionError("ViT: expected image [3," + std::to_string(cfg.image_size) + "," +
                         std::to_string(cfg.image_size) + "], got " + shape_str(image.shape()));
  if (cfg.patch_size != patch_ || cfg.image_size % patch_ != 0)
    throw DimensionError("ViT: image_size " + std::to_string(cfg.image_size) + " not divisible by patch size " +
                         std::to_string(patch_));
  const int gp = cfg.grid();
  const std::int64_t pd = 3LL * patch_ * patch_;
  const std::int64_t S = cfg.image_size;
  Tensor patches = Tensor::zeros({static_cast<std::int64_t>(gp) * gp, pd});
  auto P = patches.data();
  const auto I = image.data();
  for (int py = 0; py < gp; ++py)
    for (int px = 0; px < gp; ++px) {
      double* row = P.data() + (static_cast<std::int64_t>(py) * gp + px) * pd;
      for (int c = 0; c < 3; ++c)
        for (int dy = 0; dy < patch_; ++dy)
          for (int dx = 0; dx < patch_; ++dx)
            *row++ = I[(c * S + py * patch_ + dy) * S + px * patch_ + dx];
    }
  TokenSequence ts;
  ts.hp = ts.wp = gp;
  ts.patches = add(linear(patches, params_.get("patch.w").tensor, params_.get("patch.b").tensor), pos_for(cfg));
  const Tensor& pos = params_.get("pos").tensor;
  ts.global_class = add(params_.get("cls").tensor, reshape(slice_rows(pos, 0, 1), {dim_}));
  if (with_local && cfg.local_grid >= 2) {
    const int nl = cfg.local_grid * cfg.local_grid;
    std::vector<Tensor> copies(static_cast<std::size_t>(nl), reshape(ts.global_class, {1, dim_}));
    ts.local_class = concat_rows(copies);
  }
  return ts;
}

Tensor FoundationEncoder::block(const Tensor& x, int layer, const BoolMask* mask, std::vector<double>* probs,
                                int heads) const {
  const std::string p = "blocks." + std::to_string(layer) + ".";
  auto W = [&](const std::string& n) -> const Tensor& { return params_.get(p + n).tensor; };
  Tensor h = layer_norm(x, W("ln1.g"), W("ln1.b"), 1e-6);
  Tensor q = linear(h, W("q.w"), W("q.b"));
  Tensor k = linear(h, W("k.w"), W("k.b"));
  Tensor v = linear(h, W("v.w"), W("v.b"));
  Tensor a = multihead_attention(q, k, v, heads, mask, probs);
  Tensor y = add(x, linear(a, W("o.w"), W("o.b")));
  Tensor h2 = layer_norm(y, W("ln2.g"), W("ln2.b"), 1e-6);
  return add(y, linear(gelu(linear(h2, W("fc1.w"), W("fc1.b"))), W("fc2.w"), W("fc2.b")));
}

TokenSequence FoundationEncoder::run_blocks(const Tensor& image, const ViTConfig& cfg, bool with_local,
                                            AttentionTrace* trace) const {
  if (cfg.dim != dim_ || cfg.depth != depth_)
    throw ContractError("ViT: config dim/depth do not match the loaded weights");
  const bool is_frozen = frozen();
  if (!is_frozen && !cfg.allow_trainable)
    throw ContractError("ViT: foundation weights are trainable but the configuration requires them frozen");
  std::optional<NoGradScope> nograd;
  if (is_frozen) nograd.emplace();

  TokenSequence in = patch_embed(image, cfg, with_local);
  const int np = in.hp * in.wp;
  const int nl = in.has_local() ? static_cast<int>(in.local_class.dim(0)) : 0;
  std::vector<Tensor> parts{reshape(in.global_class, {1, dim_})};
  if (nl > 0) parts.push_back(in.local_class);
  parts.push_back(in.patches);
  Tensor x = concat_rows(parts);

  std::optional<BoolMask> mask;
  if (nl > 0) mask = build_attention_mask(RegionGrid(cfg.local_grid, in.hp, in.wp), np);
  if (trace) {
    trace->layers.clear();
    trace->tokens = x.dim(0);
    trace->heads = cfg.heads;
  }
  ++passes_;
  for (int l = 0; l < depth_; ++l) {
    std::vector<double>* probs = nullptr;
    if (trace) probs = &trace->layers.emplace_back();
    x = block(x, l, mask ? &*mask : nullptr, probs, cfg.heads);
  }
  TokenSequence out;
  out.hp = in.hp;
  out.wp = in.wp;
  out.global_class = reshape(slice_rows(x, 0, 1), {dim_});
  if (nl > 0) out.local_class = slice_rows(x, 1, 1 + nl);
  out.patches = slice_rows(x, 1 + nl, 1 + nl + np);
  return out;
}

TokenSequence FoundationEncoder::forward(const Tensor& image, const ViTConfig& cfg, AttentionTrace* trace) const {
  const bool local = cfg.strategy == QueryStrategy::masked_class_tokens && cfg.local_grid >= 2;
  return run_blocks(image, cfg, local, trace);
}

FoundationOutput FoundationEncoder::encode(const Tensor& image, const ViTConfig& cfg) const {
  const int nq = cfg.num_image_queries();
  if (nq > cfg.max_queries)
    throw ContractError("ViT: " + std::to_string(nq) + " image queries exceed the budget of " +
                        std::to_string(cfg.max_queries));
  FoundationOutput out;
  out.tokens = forward(image, cfg);
  out.queries.push_back(ImageQuery{out.tokens.global_class, Box::full(), 0});
  if (cfg.local_grid < 2) return out;
  const RegionGrid grid(cfg.local_grid, out.tokens.hp, out.tokens.wp);
  std::optional<NoGradScope> nograd;
  if (frozen()) nograd.emplace();
  for (int r = 0; r < grid.num_regions(); ++r) {
    const Box b = grid.box(r);
    Tensor feat;
    switch (cfg.strategy) {
      case QueryStrategy::masked_class_tokens:
        feat = reshape(slice_rows(out.tokens.local_class, r, r + 1), {dim_});
        break;
      case QueryStrategy::mean_patch:
        feat = mean_rows(gather_rows(out.tokens.patches, grid.members(r)));
        break;
      case QueryStrategy::crop: {
        const Tensor crop = resample_region(image, b.x0(), b.y0(), b.x1(), b.y1(), cfg.image_size, cfg.image_size);
        feat = run_blocks(crop, cfg, false, nullptr).global_class;
        break;
      }
    }
    out.queries.push_back(ImageQuery{feat, b, 0});
  }
  return out;
}

std::vector<ImageQuery> FoundationEncoder::extract_image_queries(const Tensor& image, const ViTConfig& cfg) const {
  return encode(image, cfg).queries;
}

Tensor FoundationEncoder::rotation_logits(const TokenSequence& tokens) const {
  Tensor h = layer_norm(reshape(tokens.global_class, {1, dim_}), params_.get("head.ln.g").tensor,
                        params_.get("head.ln.b").tensor, 1e-6);
  return linear(h, params_.get("head.w").tensor, params_.get("head.b").tensor);
}

Tensor interpolate_pos_embed(const Tensor& pos, int hp, int wp, int h2, int w2) {
  if (pos.rank() != 2 || pos.dim(0) != static_cast<std::int64_t>(hp) * wp)
    throw DimensionError("interpolate_pos_embed: " + shape_str(pos.shape()) + " is not a " + std::to_string(hp) +
                         "x" + std::to_string(wp) + " grid");
  if (h2 == hp && w2 == wp) return pos.clone();
  const auto d = pos.dim(1);
  // [hp*wp, d] -> [d, hp, wp] so each channel is a plane for bilinear_sample.
  Tensor planes = reshape(transpose(pos), {d, hp, wp});
  std::vector<double> pts;
  pts.reserve(static_cast<std::size_t>(h2) * w2 * 2);
  for (int i = 0; i < h2; ++i)
    for (int j = 0; j < w2; ++j) {
      pts.push_back(std::clamp((j + 0.5) / w2, 0.5 / wp, 1.0 - 0.5 / wp));
      pts.push_back(std::clamp((i + 0.5) / h2, 0.5 / hp, 1.0 - 0.5 / hp));
    }
  return bilinear_sample(planes, Tensor::from({static_cast<std::int64_t>(h2) * w2, 2}, std::move(pts)));
}

Tensor patch_tokens_to_feature_map(const TokenSequence& tokens) {
  const auto n = tokens.patches.dim(0);
  if (n != static_cast<std::int64_t>(tokens.hp) * tokens.wp)
    throw DimensionError("patch token count " + std::to_string(n) + " does not match grid " +
                         std::to_string(tokens.hp) + "x" + std::to_string(tokens.wp));
  return reshape(transpose(tokens.patches), {tokens.patches.dim(1), tokens.hp, tokens.wp});
}

Tensor flatten_feature_map(const Tensor& map) {
  if (map.rank() != 3) throw DimensionError("flatten_feature_map expects [c,h,w], got " + shape_str(map.shape()));
  return transpose(reshape(map, {map.dim(0), map.dim(1) * map.dim(2)}));
}

Tensor resample_region(const Tensor& image, double x0, double y0, double x1, double y1, int h2, int w2) {
  if (image.rank() != 3) throw DimensionError("resample_region expects [c,h,w], got " + shape_str(image.shape()));
  const auto c = image.dim(0), h = image.dim(1), w = image.dim(2);
  Tensor out = Tensor::zeros({c, h2, w2});
  auto O = out.data();
  const auto I = image.data();
  const double lox = 0.5 / static_cast<double>(w), hix = 1.0 - lox;
  const double loy = 0.5 / static_cast<double>(h), hiy = 1.0 - loy;
  for (int i = 0; i < h2; ++i)
    for (int j = 0; j < w2; ++j) {
      const double nx = std::clamp(x0 + (j + 0.5) / w2 * (x1 - x0), lox, hix);
      const double ny = std::clamp(y0 + (i + 0.5) / h2 * (y1 - y0), loy, hiy);
      const auto tap = kernels::bilinear_tap(nx, ny, w, h);
      for (std::int64_t ch = 0; ch < c; ++ch) {
        double s = 0.0;
        for (int k = 0; k < 4; ++k)
          if (tap.valid[k]) s += tap.wt[k] * I[ch * h * w + tap.idx[k]];
        O[(ch * h2 + i) * w2 + j] = s;
      }
    }
  return out;
}

Tensor rotate90(const Tensor& image, int k) {
  const auto c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (h != w) throw DimensionError("rotate90 expects a square image");
  k = ((k % 4) + 4) % 4;
  Tensor out = image.clone();
  const auto I = image.data();
  auto O = out.data();
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        std::int64_t sy = y, sx = x;
        // Counter-clockwise: out(y, x) = in(x, w-1-y) for one quarter turn.
        for (int t = 0; t < k; ++t) {
          const auto ny = sx, nx = w - 1 - sy;
          sy = ny;
          sx = nx;
        }
        O[(ch * h + y) * w + x] = I[(ch * h + sy) * w + sx];
      }
  return out;
}

}  // namespace fdtr
