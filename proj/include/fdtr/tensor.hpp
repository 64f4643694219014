#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace fdtr {

using Shape = std::vector<std::int64_t>;

/// Shape or rank disagreement between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A documented precondition was violated by the caller.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Filesystem or serialization failure.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string shape_str(const Shape& s);
std::int64_t shape_numel(const Shape& s);

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient is written
  bool requires_grad = false;
};

/// Dense row-major float64 array with shared ownership. Copies of a Tensor
/// alias the same storage; use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor from(Shape shape, std::vector<double> data);
  static Tensor scalar(double v);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::int64_t rank() const { return static_cast<std::int64_t>(impl_->shape.size()); }
  /// Size of dimension i; negative i counts from the back.
  std::int64_t dim(std::int64_t i) const;
  std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

  std::span<double> data() { return impl_->data; }
  std::span<const double> data() const { return impl_->data; }
  double item() const;
  double operator[](std::int64_t i) const { return impl_->data[static_cast<std::size_t>(i)]; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on);
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  std::span<double> mutable_grad() { return impl_->grad; }
  void clear_grad();

  /// Deep copy without gradient state.
  Tensor clone() const;
  /// Shares nothing with the graph: a fresh leaf holding a copy of the data.
  Tensor detach() const { return clone(); }

  TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& impl_ptr() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Ordered record of differentiable operations for one forward pass.
/// Entries are appended in execution order, so inputs always precede the
/// ops that consume them; backward() walks the list once in reverse.
class Tape {
 public:
  struct Entry {
    std::string_view name;
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::shared_ptr<TensorImpl> output;
    std::function<void()> backward;
  };

  void record(Entry e) { entries_.push_back(std::move(e)); }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::vector<Entry>& entries() const { return entries_; }
  void clear() { entries_.clear(); }

  /// Seeds d(loss)=1 and propagates to every leaf that requires grad.
  /// Leaf gradients accumulate; the tape is cleared afterwards.
  void backward(const Tensor& loss);

 private:
  std::vector<Entry> entries_;
};

/// Tape that newly created ops record onto, or nullptr (no recording).
Tape* active_tape();

/// Installs a tape for the current thread for the lifetime of the scope.
class TapeScope {
 public:
  explicit TapeScope(Tape* tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

/// Disables recording for the current thread.
class NoGradScope : public TapeScope {
 public:
  NoGradScope() : TapeScope(nullptr) {}
};

/// Runs backward on the currently active tape.
void backward(const Tensor& loss);

namespace detail {

/// True when an op over these inputs should be recorded.
bool should_record(std::initializer_list<const Tensor*> inputs);

/// Gradient buffer of t, allocated (zero-filled) on first use.
std::span<double> grad_of(TensorImpl& t);

/// Records out = op(inputs) with the given backward rule. No-op when
/// should_record() is false.
void record(std::string_view name, std::initializer_list<const Tensor*> inputs, Tensor& out,
            std::function<void()> backward);

/// Debug-mode finite check; no-op in release builds unless enabled at runtime.
void check_finite(const Tensor& t, std::string_view op);
void set_finite_checks(bool on);

}  // namespace detail
}  // namespace fdtr
