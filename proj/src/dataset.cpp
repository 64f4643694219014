#include "fdtr/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <thread>

#include "json.hpp"

#include "fdtr/param.hpp"

namespace fdtr {

const std::vector<std::string>& class_names() {
  static const std::vector<std::string> names{"robot", "head", "wheel", "ball", "crate", "flag"};
  return names;
}

void SceneSpec::validate() const {
  if (canvas < 16) throw ContractError("scene: canvas must be at least 16 pixels");
  if (min_objects < 0 || max_objects < min_objects) throw ContractError("scene: bad object count range");
  auto prob = [](double p, const char* what) {
    if (!(p >= 0.0 && p <= 1.0)) throw ContractError(std::string("scene: ") + what + " must lie in [0,1]");
  };
  prob(occlusion_rate, "occlusion rate");
  for (const auto& r : cooccurrence) {
    prob(r.probability, "co-occurrence probability");
    if (r.anchor != kCrate || r.partner != kFlag)
      throw ContractError("scene: only the crate -> flag co-occurrence is drawable");
  }
  if (background_noise < 0.0) throw ContractError("scene: negative background noise");
  if (distractors < 0) throw ContractError("scene: negative distractor count");
}

namespace {

struct Color {
  double r, g, b;
};

// Pixel-space bounds of everything painted for one annotation.
struct Extent {
  int x0 = 1 << 30, y0 = 1 << 30, x1 = -1, y1 = -1;  // x1/y1 exclusive
  bool empty() const { return x1 < 0; }
  void take(int x, int y) {
    x0 = std::min(x0, x);
    y0 = std::min(y0, y);
    x1 = std::max(x1, x + 1);
    y1 = std::max(y1, y + 1);
  }
  void merge(const Extent& o) {
    if (o.empty()) return;
    x0 = std::min(x0, o.x0);
    y0 = std::min(y0, o.y0);
    x1 = std::max(x1, o.x1);
    y1 = std::max(y1, o.y1);
  }
};

class Canvas {
 public:
  explicit Canvas(int size) : n_(size), img_(Tensor::zeros({3, size, size})) {}

  void set(int x, int y, Color c, Extent* e) {
    if (x < 0 || y < 0 || x >= n_ || y >= n_) return;
    auto D = img_.data();
    const std::size_t plane = static_cast<std::size_t>(n_) * n_;
    const std::size_t i = static_cast<std::size_t>(y) * n_ + x;
    D[i] = c.r;
    D[plane + i] = c.g;
    D[2 * plane + i] = c.b;
    if (e) e->take(x, y);
  }
  void rect(double x0, double y0, double x1, double y1, Color c, Extent* e) {
    for (int y = static_cast<int>(std::floor(y0)); y < static_cast<int>(std::ceil(y1)); ++y)
      for (int x = static_cast<int>(std::floor(x0)); x < static_cast<int>(std::ceil(x1)); ++x)
        if (x + 0.5 >= x0 && x + 0.5 < x1 && y + 0.5 >= y0 && y + 0.5 < y1) set(x, y, c, e);
  }
  void disc(double cx, double cy, double r, Color c, Extent* e) {
    for (int y = static_cast<int>(std::floor(cy - r)); y <= static_cast<int>(std::ceil(cy + r)); ++y)
      for (int x = static_cast<int>(std::floor(cx - r)); x <= static_cast<int>(std::ceil(cx + r)); ++x) {
        const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
        if (dx * dx + dy * dy <= r * r) set(x, y, c, e);
      }
  }
  int size() const { return n_; }
  Tensor& image() { return img_; }

 private:
  int n_;
  Tensor img_;
};

Color jitter(Rng& rng, Color c, double amount) {
  auto j = [&](double v) { return std::clamp(v + rng.uniform(-amount, amount), 0.0, 1.0); };
  return Color{j(c.r), j(c.g), j(c.b)};
}

struct Placed {
  double x0, y0, x1, y1;  // reserved footprint in pixels
};

bool overlaps(const Placed& a, const std::vector<Placed>& all) {
  for (const auto& b : all)
    if (a.x0 < b.x1 + 1 && b.x0 < a.x1 + 1 && a.y0 < b.y1 + 1 && b.y0 < a.y1 + 1) return true;
  return false;
}

Box to_box(const Extent& e, int n) {
  const double s = 1.0 / n;
  return Box::from_corners(e.x0 * s, e.y0 * s, e.x1 * s, e.y1 * s);
}

struct Annotation {
  Extent extent;
  int label;
};

// Geometry of one composite object, sampled before drawing so placement can
// test the full footprint.
struct RobotShape {
  double bw, bh, hw, hh, hoff, wr;
  double width() const { return bw; }
  double height() const { return hh + bh + wr; }
};

}  // namespace

AnnotatedImage generate_image(const SceneSpec& spec, Split split, int index, GenerationStats* stats) {
  spec.validate();
  Rng rng(derive_seed(derive_seed(spec.seed, static_cast<std::uint64_t>(split) + 1), static_cast<std::uint64_t>(index)));
  const int n = spec.canvas;
  const double C = n;
  Canvas cv(n);

  // Background: base color, gentle gradient and per-pixel noise.
  const Color base{rng.uniform(0.55, 0.85), rng.uniform(0.55, 0.85), rng.uniform(0.55, 0.85)};
  const double grad = 2.0 * spec.background_noise;
  const double gx = rng.uniform(-grad, grad), gy = rng.uniform(-grad, grad);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      const double t = gx * (x / C - 0.5) + gy * (y / C - 0.5);
      const double e = spec.background_noise > 0 ? rng.uniform(-spec.background_noise, spec.background_noise) : 0.0;
      cv.set(x, y, Color{std::clamp(base.r + t + e, 0.0, 1.0), std::clamp(base.g + t + e, 0.0, 1.0),
                         std::clamp(base.b + t + e, 0.0, 1.0)},
             nullptr);
    }
  // Unannotated clutter: thin strokes and speckle patches.
  for (int i = 0; i < spec.distractors; ++i) {
    const Color c = jitter(rng, base, 0.25);
    if (rng.bernoulli(0.5)) {
      const double x = rng.uniform(0, C), y = rng.uniform(0, C), len = rng.uniform(0.2, 0.6) * C;
      if (rng.bernoulli(0.5))
        cv.rect(x, y, std::min(C, x + len), y + 1, c, nullptr);
      else
        cv.rect(x, y, x + 1, std::min(C, y + len), c, nullptr);
    } else {
      const double x = rng.uniform(0, C * 0.85), y = rng.uniform(0, C * 0.85), s = rng.uniform(0.06, 0.15) * C;
      for (int k = 0; k < 10; ++k) {
        const double px = std::floor(x + rng.uniform(0, s)), py = std::floor(y + rng.uniform(0, s));
        cv.rect(px, py, px + 1, py + 1, c, nullptr);
      }
    }
  }

  std::vector<Placed> placed;
  std::vector<Annotation> anns;
  std::vector<Extent> occludable;
  const int count = static_cast<int>(rng.randint(spec.min_objects, spec.max_objects));
  int skipped = 0;
  for (int o = 0; o < count; ++o) {
    const double kind_u = rng.uniform();
    const int kind = kind_u < 0.4 ? kRobot : (kind_u < 0.7 ? kBall : kCrate);
    bool with_partner = false;
    if (kind == kCrate)
      for (const auto& r : spec.cooccurrence)
        if (r.anchor == kCrate && rng.bernoulli(r.probability)) with_partner = true;

    // Sample shape parameters once, then search for a free spot.
    RobotShape rs{};
    double radius = 0, side = 0, pole = 0, cloth = 0;
    double fw = 0, fh = 0;
    if (kind == kRobot) {
      rs.bw = rng.uniform(0.22, 0.34) * C;
      rs.bh = rng.uniform(0.16, 0.24) * C;
      rs.hw = rng.uniform(0.4, 0.55) * rs.bw;
      rs.hh = rng.uniform(0.3, 0.45) * rs.bh + 1.0;
      rs.hoff = rng.uniform(-0.15, 0.15) * rs.bw;
      rs.wr = rng.uniform(0.13, 0.18) * rs.bw + 0.75;
      fw = rs.width();
      fh = rs.height();
    } else if (kind == kBall) {
      radius = rng.uniform(0.045, 0.09) * C;
      fw = fh = 2 * radius;
    } else {
      side = rng.uniform(0.15, 0.24) * C;
      pole = with_partner ? rng.uniform(0.14, 0.2) * C : 0.0;
      cloth = with_partner ? rng.uniform(0.35, 0.5) * pole : 0.0;
      fw = with_partner ? std::max(side, 0.8 * side + 1.0 + cloth) : side;
      fh = side + pole;
    }
    bool ok = false;
    Placed at{};
    for (int attempt = 0; attempt < 50 && !ok && fw + 2 < C && fh + 2 < C; ++attempt) {
      const double x0 = rng.uniform(1.0, C - fw - 1.0), y0 = rng.uniform(1.0, C - fh - 1.0);
      at = Placed{x0, y0, x0 + fw, y0 + fh};
      ok = !overlaps(at, placed);
    }
    if (!ok) {
      ++skipped;
      continue;
    }
    placed.push_back(at);

    if (kind == kRobot) {
      const Color body = jitter(rng, Color{0.35, 0.45, 0.65}, 0.08);
      const Color headc = jitter(rng, Color{0.45, 0.55, 0.75}, 0.08);
      const Color tyre = jitter(rng, Color{0.12, 0.12, 0.14}, 0.05);
      const double by0 = at.y0 + rs.hh, by1 = by0 + rs.bh;
      const double hx0 = at.x0 + 0.5 * (rs.bw - rs.hw) + rs.hoff;
      Annotation whole{{}, kRobot}, head{{}, kHead}, w1{{}, kWheel}, w2{{}, kWheel};
      cv.rect(at.x0, by0, at.x1, by1, body, &whole.extent);
      cv.rect(hx0, at.y0, hx0 + rs.hw, by0, headc, &head.extent);
      // Eye slit keeps the head distinct from a plain box.
      cv.rect(hx0 + 0.25 * rs.hw, at.y0 + 0.35 * rs.hh, hx0 + 0.75 * rs.hw, at.y0 + 0.35 * rs.hh + 1,
              Color{0.95, 0.9, 0.3}, &head.extent);
      cv.disc(at.x0 + rs.wr, by1, rs.wr, tyre, &w1.extent);
      cv.disc(at.x1 - rs.wr, by1, rs.wr, tyre, &w2.extent);
      whole.extent.merge(head.extent);
      whole.extent.merge(w1.extent);
      whole.extent.merge(w2.extent);
      occludable.push_back(whole.extent);
      anns.push_back(whole);
      anns.push_back(head);
      anns.push_back(w1);
      anns.push_back(w2);
    } else if (kind == kBall) {
      static const Color palette[] = {{0.12, 0.12, 0.14}, {0.8, 0.2, 0.2}, {0.2, 0.65, 0.3}, {0.2, 0.2, 0.25}};
      const Color c = jitter(rng, palette[rng.randint(0, 3)], 0.05);
      Annotation a{{}, kBall};
      cv.disc(at.x0 + radius, at.y0 + radius, radius, c, &a.extent);
      occludable.push_back(a.extent);
      anns.push_back(a);
    } else {
      const Color wood = jitter(rng, Color{0.55, 0.38, 0.2}, 0.06);
      const Color dark{wood.r * 0.6, wood.g * 0.6, wood.b * 0.6};
      Annotation crate{{}, kCrate};
      const double cy0 = at.y0 + pole;
      cv.rect(at.x0, cy0, at.x1, at.y1, wood, &crate.extent);
      cv.rect(at.x0, cy0 + 0.5 * side - 0.5, at.x1, cy0 + 0.5 * side + 0.5, dark, &crate.extent);
      cv.rect(at.x0 + 0.5 * side - 0.5, cy0, at.x0 + 0.5 * side + 0.5, at.y1, dark, &crate.extent);
      occludable.push_back(crate.extent);
      anns.push_back(crate);
      if (with_partner) {
        Annotation flag{{}, kFlag};
        const double px = at.x0 + rng.uniform(0.2, 0.8) * side;
        cv.rect(px, at.y0, px + 1, cy0, Color{0.2, 0.2, 0.2}, &flag.extent);
        const Color cl = jitter(rng, rng.bernoulli(0.5) ? Color{0.85, 0.15, 0.15} : Color{0.9, 0.8, 0.1}, 0.05);
        cv.rect(px + 1, at.y0, std::min(C, px + 1 + cloth), at.y0 + 0.45 * pole, cl, &flag.extent);
        anns.push_back(flag);
      }
    }
  }

  // Occluders: flat gray panels covering one side of an object.
  for (const auto& e : occludable) {
    if (!rng.bernoulli(spec.occlusion_rate)) continue;
    const Color g = jitter(rng, Color{0.5, 0.5, 0.5}, 0.1);
    const double w = e.x1 - e.x0, h = e.y1 - e.y0;
    const double f = rng.uniform(0.25, 0.45);
    switch (rng.randint(0, 3)) {
      case 0: cv.rect(e.x0 - 1, e.y0 - 1, e.x0 + f * w, e.y1 + 1, g, nullptr); break;
      case 1: cv.rect(e.x1 - f * w, e.y0 - 1, e.x1 + 1, e.y1 + 1, g, nullptr); break;
      case 2: cv.rect(e.x0 - 1, e.y0 - 1, e.x1 + 1, e.y0 + f * h, g, nullptr); break;
      default: cv.rect(e.x0 - 1, e.y1 - f * h, e.x1 + 1, e.y1 + 1, g, nullptr); break;
    }
  }

  AnnotatedImage out;
  out.image = cv.image();
  out.id = index;
  out.width = out.height = n;
  for (const auto& a : anns) {
    if (a.extent.empty()) continue;
    out.gt.boxes.push_back(to_box(a.extent, n));
    out.gt.labels.push_back(a.label);
  }
  if (stats) stats->skipped_objects += skipped;
  return out;
}

std::vector<AnnotatedImage> generate_dataset(const SceneSpec& spec, int n_images, Split split, GenerationStats* stats,
                                             int workers) {
  if (n_images < 1) throw ContractError("generate_dataset: need at least one image");
  spec.validate();
  std::vector<AnnotatedImage> out(static_cast<std::size_t>(n_images));
  std::vector<GenerationStats> per(static_cast<std::size_t>(n_images));
  workers = std::clamp(workers, 1, n_images);
  auto job = [&](int w) {
    for (int i = w; i < n_images; i += workers)
      out[static_cast<std::size_t>(i)] = generate_image(spec, split, i, &per[static_cast<std::size_t>(i)]);
  };
  if (workers == 1) {
    job(0);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(job, w);
    for (auto& t : pool) t.join();
  }
  if (stats)
    for (const auto& s : per) stats->skipped_objects += s.skipped_objects;
  return out;
}

void write_annotations(const std::filesystem::path& path, const std::vector<AnnotatedImage>& images) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  for (const auto& im : images) {
    nlohmann::json j;
    j["image_id"] = im.id;
    j["file"] = im.file;
    j["width"] = im.width;
    j["height"] = im.height;
    auto boxes = nlohmann::json::array();
    for (const auto& b : im.gt.boxes) boxes.push_back({b.cx, b.cy, b.w, b.h});
    j["boxes"] = boxes;
    j["labels"] = im.gt.labels;
    f << j.dump() << '\n';
  }
  if (!f) throw IoError("failed writing " + path.string());
}

std::vector<AnnotatedImage> read_annotations(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path.string());
  std::vector<AnnotatedImage> out;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    try {
      const auto j = nlohmann::json::parse(line);
      AnnotatedImage im;
      im.id = j.at("image_id").get<int>();
      im.file = j.at("file").get<std::string>();
      im.width = j.at("width").get<int>();
      im.height = j.at("height").get<int>();
      const auto& boxes = j.at("boxes");
      const auto& labels = j.at("labels");
      if (!boxes.is_array() || !labels.is_array() || boxes.size() != labels.size())
        throw std::runtime_error("boxes and labels must be arrays of equal length");
      for (const auto& b : boxes) {
        if (!b.is_array() || b.size() != 4) throw std::runtime_error("each box needs four numbers");
        im.gt.boxes.push_back(Box{b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()});
      }
      for (const auto& l : labels) im.gt.labels.push_back(l.get<int>());
      out.push_back(std::move(im));
    } catch (const std::exception& e) {
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": malformed annotation: " + e.what());
    }
  }
  return out;
}

static std::uint8_t quantize(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

std::vector<std::uint8_t> encode_ppm(const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw DimensionError("encode_ppm: expected [3,H,W]");
  const auto h = image.dim(1), w = image.dim(2);
  const std::string header = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  const auto D = image.data();
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      for (std::int64_t c = 0; c < 3; ++c) out.push_back(quantize(D[(c * h + y) * w + x]));
  return out;
}

std::vector<std::uint8_t> encode_pgm(const std::vector<std::uint8_t>& gray, int width, int height) {
  if (static_cast<std::int64_t>(gray.size()) != static_cast<std::int64_t>(width) * height)
    throw DimensionError("encode_pgm: pixel count does not match " + std::to_string(width) + "x" +
                         std::to_string(height));
  const std::string header = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), gray.begin(), gray.end());
  return out;
}

void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("failed writing " + path.string());
}

void write_ppm(const std::filesystem::path& path, const Tensor& image) { write_bytes(path, encode_ppm(image)); }

void write_pgm(const std::filesystem::path& path, const std::vector<std::uint8_t>& gray, int width, int height) {
  write_bytes(path, encode_pgm(gray, width, height));
}

Tensor read_ppm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path.string());
  std::string magic;
  int w = 0, h = 0, maxv = 0;
  f >> magic;
  auto skip_comments = [&] {
    f >> std::ws;
    while (f.peek() == '#') {
      std::string c;
      std::getline(f, c);
      f >> std::ws;
    }
  };
  skip_comments();
  f >> w;
  skip_comments();
  f >> h;
  skip_comments();
  f >> maxv;
  if (!f || magic != "P6" || w <= 0 || h <= 0 || maxv != 255) throw IoError(path.string() + ": not an 8-bit P6 image");
  f.get();
  std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h * 3);
  f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (f.gcount() != static_cast<std::streamsize>(buf.size())) throw IoError(path.string() + ": truncated pixel data");
  Tensor img = Tensor::zeros({3, h, w});
  auto D = img.data();
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        D[(static_cast<std::size_t>(c) * h + y) * w + x] = buf[(static_cast<std::size_t>(y) * w + x) * 3 + c] / 255.0;
  return img;
}

void save_dataset(const std::filesystem::path& dir, std::vector<AnnotatedImage>& images,
                  const std::string& annotations) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  for (auto& im : images) {
    char name[32];
    std::snprintf(name, sizeof name, "img_%05d.ppm", im.id);
    im.file = name;
    write_ppm(dir / name, im.image);
  }
  write_annotations(dir / annotations, images);
}

std::vector<AnnotatedImage> load_dataset(const std::filesystem::path& dir, const std::string& annotations) {
  auto images = read_annotations(dir / annotations);
  for (auto& im : images) {
    im.image = read_ppm(dir / im.file);
    if (im.image.dim(1) != im.height || im.image.dim(2) != im.width)
      throw IoError(im.file + ": size disagrees with its annotation");
  }
  return images;
}

}  // namespace fdtr
