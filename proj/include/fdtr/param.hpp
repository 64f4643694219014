#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "fdtr/tensor.hpp"

namespace fdtr {

/// A named model weight. A frozen parameter never requires grad, never
/// gets gradient storage, and is skipped by every optimizer.
struct Parameter {
  std::string name;
  Tensor tensor;
  bool frozen = false;
  double lr_scale = 1.0;
};

/// Ordered, name-addressable collection of parameters. Insertion order is
/// the serialization order.
class ParamStore {
 public:
  Tensor& add(std::string name, Tensor t, bool frozen = false, double lr_scale = 1.0);
  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;
  bool contains(const std::string& name) const;

  std::vector<Parameter>& all() { return params_; }
  const std::vector<Parameter>& all() const { return params_; }
  std::size_t size() const { return params_.size(); }

  void set_frozen(bool frozen);
  void set_frozen(const std::string& name, bool frozen);
  void zero_grad();
  std::int64_t numel() const;

 private:
  std::vector<Parameter> params_;
};

/// Thin wrapper over a 64-bit Mersenne twister with the init schemes the
/// models use.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}
  double uniform(double lo = 0.0, double hi = 1.0);
  double normal(double mean = 0.0, double stddev = 1.0);
  std::int64_t randint(std::int64_t lo, std::int64_t hi);  // inclusive bounds
  bool bernoulli(double p);
  std::mt19937_64& engine() { return gen_; }

  Tensor uniform_tensor(Shape shape, double lo, double hi);
  Tensor normal_tensor(Shape shape, double stddev);
  /// Glorot-uniform for a [fan_in, fan_out] matrix.
  Tensor xavier(std::int64_t fan_in, std::int64_t fan_out);

 private:
  std::mt19937_64 gen_;
};

/// Deterministic 64-bit seed derivation (splitmix64 of seed ^ stream).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

struct AdamWOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 1e-4;
  double eps = 1e-8;
};

/// Decoupled-weight-decay Adam. Moment state is keyed by parameter index in
/// the store, so the store must not be reordered between steps.
class AdamW {
 public:
  AdamW(ParamStore& store, AdamWOptions opts);
  /// Applies one update to every non-frozen parameter that holds a
  /// gradient. Throws ContractError if no trainable parameter has one.
  void step();
  std::int64_t steps() const { return t_; }
  AdamWOptions& options() { return opts_; }

 private:
  ParamStore& store_;
  AdamWOptions opts_;
  std::vector<std::vector<double>> m_, v_;
  std::int64_t t_ = 0;
};

/// Rescales all trainable gradients so their joint L2 norm is at most
/// max_norm. Returns the norm before clipping.
double clip_grad_norm(ParamStore& store, double max_norm);

// Checkpoint container: "FDTR", u32 version, then records until end of
// file: u32 name length, UTF-8 name, u8 frozen, u64 rank, rank x u64 dims,
// numel x f64. All integers and floats little-endian.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const ParamStore& store, const std::filesystem::path& path);
/// Reads every record into a fresh store (names, frozen flags, data).
ParamStore read_checkpoint(const std::filesystem::path& path);
/// Copies data and frozen flags from a checkpoint into an existing store;
/// every store parameter must be present with a matching shape.
void load_checkpoint(ParamStore& store, const std::filesystem::path& path);

std::vector<std::uint8_t> serialize_checkpoint(const ParamStore& store);
ParamStore deserialize_checkpoint(std::span<const std::uint8_t> bytes);

/// Lower-case hex SHA-256 of the raw data bytes of every parameter in order.
std::string parameter_digest(const ParamStore& store);
std::string file_sha256(const std::filesystem::path& path);

}  // namespace fdtr
