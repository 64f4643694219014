#include "fdtr/tensor.hpp"

#include <cmath>
#include <sstream>

namespace fdtr {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

static void check_shape(const Shape& shape) {
  for (auto d : shape)
    if (d <= 0) throw DimensionError("non-positive dimension in shape " + shape_str(shape));
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  check_shape(shape);
  auto impl = std::make_shared<TensorImpl>();
  impl->data.assign(static_cast<std::size_t>(shape_numel(shape)), value);
  impl->shape = std::move(shape);
  return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<double> data) {
  check_shape(shape);
  if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
    throw DimensionError("shape " + shape_str(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double v) { return from({1}, {v}); }

std::int64_t Tensor::dim(std::int64_t i) const {
  const auto r = rank();
  if (i < 0) i += r;
  if (i < 0 || i >= r)
    throw DimensionError("dim index out of range for shape " + shape_str(shape()));
  return impl_->shape[static_cast<std::size_t>(i)];
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

void Tensor::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  if (!on) impl_->grad.clear();
}

void Tensor::clear_grad() {
  impl_->grad.clear();
  impl_->grad.shrink_to_fit();
}

Tensor Tensor::clone() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

namespace {
thread_local Tape* g_tape = nullptr;
thread_local bool g_finite_checks =
#ifdef NDEBUG
    false;
#else
    true;
#endif
}  // namespace

Tape* active_tape() { return g_tape; }

TapeScope::TapeScope(Tape* tape) : prev_(g_tape) { g_tape = tape; }
TapeScope::~TapeScope() { g_tape = prev_; }

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw ContractError("backward() requires a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  if (entries_.empty()) throw ContractError("backward() on an empty tape");
  if (!loss.requires_grad()) throw ContractError("backward(): loss does not depend on any trainable tensor");
  auto g = detail::grad_of(*loss.impl());
  g[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->output->grad.empty()) continue;
    it->backward();
  }
  // Intermediate gradients are dropped with the tape; leaf gradients stay.
  for (auto& e : entries_) {
    e.output->grad.clear();
    e.output->grad.shrink_to_fit();
  }
  entries_.clear();
}

void backward(const Tensor& loss) {
  Tape* t = active_tape();
  if (t == nullptr) throw ContractError("backward() with no active tape");
  t->backward(loss);
}

namespace detail {

bool should_record(std::initializer_list<const Tensor*> inputs) {
  if (g_tape == nullptr) return false;
  for (const Tensor* t : inputs)
    if (t != nullptr && t->defined() && t->requires_grad()) return true;
  return false;
}

std::span<double> grad_of(TensorImpl& t) {
  if (t.grad.empty()) t.grad.assign(t.data.size(), 0.0);
  return t.grad;
}

void record(std::string_view name, std::initializer_list<const Tensor*> inputs, Tensor& out,
            std::function<void()> backward) {
  if (g_finite_checks) check_finite(out, name);
  if (!should_record(inputs)) return;
  Tape::Entry e;
  e.name = name;
  for (const Tensor* t : inputs)
    if (t != nullptr && t->defined()) e.inputs.push_back(t->impl_ptr());
  out.impl()->requires_grad = true;
  e.output = out.impl_ptr();
  e.backward = std::move(backward);
  g_tape->record(std::move(e));
}

void check_finite(const Tensor& t, std::string_view op) {
  if (!g_finite_checks) return;
  for (double v : t.data())
    if (!std::isfinite(v)) throw ContractError("non-finite value produced by " + std::string(op));
}

void set_finite_checks(bool on) { g_finite_checks = on; }

}  // namespace detail
}  // namespace fdtr
