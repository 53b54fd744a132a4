#include "viscop/tensor.hpp"

#include <algorithm>
#include <sstream>

#include "viscop/errors.hpp"

namespace viscop {

namespace {
thread_local GradTape* g_active_tape = nullptr;
}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape.empty()) throw DimensionError("tensor shape must have at least one extent");
  for (auto e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
  }
  impl_ = std::make_shared<Impl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> data) {
  return Tensor({rows, cols}, std::move(data));
}

const Shape& Tensor::shape() const {
  if (!impl_) throw ContractError("use of undefined tensor");
  return impl_->shape;
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::size_t Tensor::rows() const {
  const auto& s = shape();
  if (s.size() == 1) return 1;
  std::size_t r = 1;
  for (std::size_t i = 0; i + 1 < s.size(); ++i) r *= s[i];
  return r;
}

std::size_t Tensor::cols() const { return shape().back(); }

std::span<const double> Tensor::data() const {
  if (!impl_) throw ContractError("use of undefined tensor");
  return impl_->data;
}

std::span<double> Tensor::mutable_data() {
  if (!impl_) throw ContractError("use of undefined tensor");
  if (impl_->recorded) throw ContractError("cannot mutate the output of a recorded op");
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

double Tensor::at(std::size_t r, std::size_t c) const { return data()[r * cols() + c]; }

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  if (!impl_) throw ContractError("use of undefined tensor");
  if (impl_->recorded) throw ContractError("requires_grad can only be set on leaf tensors");
  impl_->requires_grad = flag;
  if (!flag) impl_->grad.reset();
}

bool Tensor::has_grad() const { return impl_ && impl_->grad.has_value(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw ContractError("tensor has no gradient");
  return *impl_->grad;
}

void Tensor::clear_grad() {
  if (impl_) impl_->grad.reset();
}

Tensor Tensor::clone() const { return Tensor(shape(), impl_->data, impl_->requires_grad); }

Tensor Tensor::detach() const { return Tensor(shape(), impl_->data, false); }

void Tensor::accumulate_grad(std::span<const double> g) const {
  if (!impl_ || !impl_->requires_grad) return;
  auto& buf = impl_->grad;
  if (!buf) {
    buf.emplace(g.begin(), g.end());
    return;
  }
  for (std::size_t i = 0; i < g.size(); ++i) (*buf)[i] += g[i];
}

void GradTape::record(const Tensor& output, BackwardFn fn) {
  output.impl()->recorded = true;
  nodes_.push_back(Node{output, std::move(fn)});
}

void GradTape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() requires a scalar loss, got " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  if (!loss.requires_grad() || !loss.impl()->recorded) {
    throw ContractError("backward(): loss was not produced on the live tape");
  }
  loss.impl()->grad = std::vector<double>{1.0};
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    auto* impl = it->output.impl();
    if (!impl->grad) continue;
    it->fn(*impl->grad);
    // Intermediate buffers are dead once propagated.
    impl->grad.reset();
  }
  clear();
}

void GradTape::clear() { nodes_.clear(); }

GradTape* GradTape::active() noexcept { return g_active_tape; }

TapeScope::TapeScope(GradTape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }

TapeScope::~TapeScope() { g_active_tape = previous_; }

void backward(const Tensor& loss) {
  auto* tape = GradTape::active();
  if (!tape) throw ContractError("backward(): no active tape");
  tape->backward(loss);
}

}  // namespace viscop
