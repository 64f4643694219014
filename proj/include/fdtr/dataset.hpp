#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fdtr/box.hpp"
#include "fdtr/tensor.hpp"

namespace fdtr {

/// Class vocabulary of the synthetic benchmark. Heads and wheels are parts
/// of robots and are annotated alongside them; balls look like loose
/// wheels; flags co-occur with crates.
enum SyntheticClass : int { kRobot = 0, kHead = 1, kWheel = 2, kBall = 3, kCrate = 4, kFlag = 5 };
inline constexpr int kNumSyntheticClasses = 6;
const std::vector<std::string>& class_names();

struct CooccurrenceRule {
  int anchor = kCrate;
  int partner = kFlag;
  double probability = 0.8;
};

struct SceneSpec {
  int canvas = 128;
  int min_objects = 1;
  int max_objects = 3;
  double occlusion_rate = 0.2;
  std::vector<CooccurrenceRule> cooccurrence{CooccurrenceRule{}};
  int distractors = 3;
  double background_noise = 0.04;
  std::uint64_t seed = 1;

  void validate() const;
};

struct AnnotatedImage {
  Tensor image;  // [3, canvas, canvas] in [0, 1]
  GroundTruth gt;
  int id = 0;
  std::string file;
  int width = 0;
  int height = 0;
};

struct GenerationStats {
  int skipped_objects = 0;  // placements abandoned after bounded retries
};

enum class Split : std::uint64_t { train = 0, val = 1 };

/// Deterministic: image i of a split depends only on (spec.seed, split, i).
std::vector<AnnotatedImage> generate_dataset(const SceneSpec& spec, int n_images, Split split = Split::train,
                                             GenerationStats* stats = nullptr, int workers = 1);
AnnotatedImage generate_image(const SceneSpec& spec, Split split, int index, GenerationStats* stats = nullptr);

/// JSON-lines annotations: one record per image.
void write_annotations(const std::filesystem::path& path, const std::vector<AnnotatedImage>& images);
/// Metadata only (image tensors are left empty). Malformed lines raise
/// IoError naming the line number.
std::vector<AnnotatedImage> read_annotations(const std::filesystem::path& path);

// Netpbm I/O. Pixel values are quantized as round(255 * clamp(v, 0, 1)).
std::vector<std::uint8_t> encode_ppm(const Tensor& image);
std::vector<std::uint8_t> encode_pgm(const std::vector<std::uint8_t>& gray, int width, int height);
void write_ppm(const std::filesystem::path& path, const Tensor& image);
void write_pgm(const std::filesystem::path& path, const std::vector<std::uint8_t>& gray, int width, int height);
Tensor read_ppm(const std::filesystem::path& path);

void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

/// Writes images as P6 plus annotations.jsonl into dir.
void save_dataset(const std::filesystem::path& dir, std::vector<AnnotatedImage>& images,
                  const std::string& annotations = "annotations.jsonl");
/// Reads annotations.jsonl and every referenced image.
std::vector<AnnotatedImage> load_dataset(const std::filesystem::path& dir,
                                         const std::string& annotations = "annotations.jsonl");

}  // namespace fdtr
