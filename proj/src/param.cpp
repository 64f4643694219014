#include "fdtr/param.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace fdtr {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

Tensor& ParamStore::add(std::string name, Tensor t, bool frozen, double lr_scale) {
  if (contains(name)) throw ContractError("duplicate parameter name: " + name);
  t.set_requires_grad(!frozen);
  params_.push_back(Parameter{std::move(name), std::move(t), frozen, lr_scale});
  return params_.back().tensor;
}

Parameter& ParamStore::get(const std::string& name) {
  for (auto& p : params_)
    if (p.name == name) return p;
  throw ContractError("unknown parameter: " + name);
}

const Parameter& ParamStore::get(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return p;
  throw ContractError("unknown parameter: " + name);
}

bool ParamStore::contains(const std::string& name) const {
  return std::any_of(params_.begin(), params_.end(), [&](const Parameter& p) { return p.name == name; });
}

void ParamStore::set_frozen(bool frozen) {
  for (auto& p : params_) {
    p.frozen = frozen;
    p.tensor.set_requires_grad(!frozen);
  }
}

void ParamStore::set_frozen(const std::string& name, bool frozen) {
  auto& p = get(name);
  p.frozen = frozen;
  p.tensor.set_requires_grad(!frozen);
}

void ParamStore::zero_grad() {
  for (auto& p : params_)
    if (p.tensor.has_grad()) std::fill(p.tensor.mutable_grad().begin(), p.tensor.mutable_grad().end(), 0.0);
}

std::int64_t ParamStore::numel() const {
  std::int64_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

double Rng::uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(gen_); }

double Rng::normal(double mean, double stddev) { return std::normal_distribution<double>(mean, stddev)(gen_); }

std::int64_t Rng::randint(std::int64_t lo, std::int64_t hi) {
  return std::uniform_int_distribution<std::int64_t>(lo, hi)(gen_);
}

bool Rng::bernoulli(double p) { return uniform() < p; }

Tensor Rng::uniform_tensor(Shape shape, double lo, double hi) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.data()) v = uniform(lo, hi);
  return t;
}

Tensor Rng::normal_tensor(Shape shape, double stddev) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.data()) v = normal(0.0, stddev);
  return t;
}

Tensor Rng::xavier(std::int64_t fan_in, std::int64_t fan_out) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  return uniform_tensor({fan_in, fan_out}, -a, a);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed ^ (stream * 0x9E3779B97F4A7C15ULL + 0x632BE59BD9B4E019ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

AdamW::AdamW(ParamStore& store, AdamWOptions opts) : store_(store), opts_(opts) {
  m_.resize(store.size());
  v_.resize(store.size());
}

void AdamW::step() {
  auto& ps = store_.all();
  if (ps.size() != m_.size()) throw ContractError("AdamW: parameter store changed size after construction");
  bool any = false;
  for (const auto& p : ps)
    if (!p.frozen && p.tensor.has_grad()) any = true;
  if (!any) throw ContractError("AdamW::step() called before backward(): no trainable parameter has a gradient");
  ++t_;
  const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < ps.size(); ++i) {
    auto& p = ps[i];
    if (p.frozen || !p.tensor.has_grad()) continue;
    auto x = p.tensor.data();
    const auto g = p.tensor.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    if (m.empty()) {
      m.assign(x.size(), 0.0);
      v.assign(x.size(), 0.0);
    }
    const double lr = opts_.lr * p.lr_scale;
    for (std::size_t j = 0; j < x.size(); ++j) {
      m[j] = opts_.beta1 * m[j] + (1.0 - opts_.beta1) * g[j];
      v[j] = opts_.beta2 * v[j] + (1.0 - opts_.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      x[j] -= lr * opts_.weight_decay * x[j];
      x[j] -= lr * mhat / (std::sqrt(vhat) + opts_.eps);
    }
  }
}

double clip_grad_norm(ParamStore& store, double max_norm) {
  double sq = 0.0;
  for (const auto& p : store.all()) {
    if (p.frozen || !p.tensor.has_grad()) continue;
    for (double g : p.tensor.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / (norm + 1e-6);
    for (auto& p : store.all()) {
      if (p.frozen || !p.tensor.has_grad()) continue;
      for (double& g : p.tensor.mutable_grad()) g *= s;
    }
  }
  return norm;
}

namespace {

template <class T>
void put(std::vector<std::uint8_t>& out, T v) {
  const auto* b = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), b, b + sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}
  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, b_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > b_.size()) throw IoError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const ParamStore& store) {
  std::vector<std::uint8_t> out = {'F', 'D', 'T', 'R'};
  put<std::uint32_t>(out, kCheckpointVersion);
  for (const auto& p : store.all()) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
    out.insert(out.end(), p.name.begin(), p.name.end());
    put<std::uint8_t>(out, p.frozen ? 1 : 0);
    put<std::uint64_t>(out, static_cast<std::uint64_t>(p.tensor.rank()));
    for (auto d : p.tensor.shape()) put<std::uint64_t>(out, static_cast<std::uint64_t>(d));
    for (double v : p.tensor.data()) put<double>(out, v);
  }
  return out;
}

ParamStore deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  if (r.str(4) != "FDTR") throw IoError("not a checkpoint: bad magic");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  ParamStore store;
  while (!r.done()) {
    const auto nlen = r.get<std::uint32_t>();
    std::string name = r.str(nlen);
    const bool frozen = r.get<std::uint8_t>() != 0;
    const auto rank = r.get<std::uint64_t>();
    if (rank > 16) throw IoError("implausible rank in checkpoint record " + name);
    Shape shape;
    for (std::uint64_t i = 0; i < rank; ++i) shape.push_back(static_cast<std::int64_t>(r.get<std::uint64_t>()));
    const auto n = shape_numel(shape);
    std::vector<double> data(static_cast<std::size_t>(n));
    for (auto& v : data) v = r.get<double>();
    store.add(std::move(name), Tensor::from(std::move(shape), std::move(data)), frozen);
  }
  return store;
}

void save_checkpoint(const ParamStore& store, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(store);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed: " + path.string());
}

static std::vector<std::uint8_t> slurp(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(f), {});
}

ParamStore read_checkpoint(const std::filesystem::path& path) {
  const auto bytes = slurp(path);
  return deserialize_checkpoint(bytes);
}

void load_checkpoint(ParamStore& store, const std::filesystem::path& path) {
  ParamStore src = read_checkpoint(path);
  for (auto& p : store.all()) {
    if (!src.contains(p.name)) throw IoError("checkpoint " + path.string() + " lacks parameter " + p.name);
    const auto& s = src.get(p.name);
    if (s.tensor.shape() != p.tensor.shape())
      throw DimensionError("checkpoint parameter " + p.name + " has shape " + shape_str(s.tensor.shape()) +
                           ", expected " + shape_str(p.tensor.shape()));
    std::copy(s.tensor.data().begin(), s.tensor.data().end(), p.tensor.data().begin());
    p.frozen = s.frozen;
    p.tensor.set_requires_grad(!s.frozen);
  }
}

static std::string hex(const unsigned char* d, unsigned n) {
  std::ostringstream os;
  for (unsigned i = 0; i < n; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(d[i]);
  return os.str();
}

namespace {
struct Sha256 {
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  Sha256() { EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr); }
  ~Sha256() { EVP_MD_CTX_free(ctx); }
  void update(const void* p, std::size_t n) { EVP_DigestUpdate(ctx, p, n); }
  std::string hexdigest() {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned n = 0;
    EVP_DigestFinal_ex(ctx, md, &n);
    return hex(md, n);
  }
};
}  // namespace

std::string parameter_digest(const ParamStore& store) {
  Sha256 h;
  for (const auto& p : store.all()) h.update(p.tensor.data().data(), p.tensor.data().size() * sizeof(double));
  return h.hexdigest();
}

std::string file_sha256(const std::filesystem::path& path) {
  const auto bytes = slurp(path);
  Sha256 h;
  h.update(bytes.data(), bytes.size());
  return h.hexdigest();
}

}  // namespace fdtr
