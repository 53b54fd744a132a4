#pragma once

// Dense row-major float64 tensors with reverse-mode differentiation.
//
// A Tensor is a cheap handle onto shared storage. Leaves (parameters, inputs)
// are created directly; every op in ops.hpp returns a fresh result and, when a
// GradTape is active and an input requires grad, records a backward closure on
// that tape. Without an active tape ops produce plain values and nothing is
// retained, so evaluation on a snapshot allocates no graph.

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace viscop {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  [[nodiscard]] bool defined() const noexcept { return impl_ != nullptr; }
  [[nodiscard]] const Shape& shape() const;
  [[nodiscard]] std::size_t rank() const { return shape().size(); }
  [[nodiscard]] std::size_t numel() const;
  /// Leading extent for rank-2 tensors; 1 for rank-1.
  [[nodiscard]] std::size_t rows() const;
  /// Trailing extent.
  [[nodiscard]] std::size_t cols() const;

  [[nodiscard]] std::span<const double> data() const;
  /// Writable view. Only legal on tensors that are not the output of a recorded op.
  [[nodiscard]] std::span<double> mutable_data();
  [[nodiscard]] double item() const;
  [[nodiscard]] double at(std::size_t r, std::size_t c) const;
  [[nodiscard]] double operator[](std::size_t i) const { return data()[i]; }

  [[nodiscard]] bool requires_grad() const;
  void set_requires_grad(bool flag);

  [[nodiscard]] bool has_grad() const;
  [[nodiscard]] std::span<const double> grad() const;
  void clear_grad();

  /// Same values, fresh storage, no graph history, same requires_grad flag.
  [[nodiscard]] Tensor clone() const;
  /// Same values, fresh storage, requires_grad=false.
  [[nodiscard]] Tensor detach() const;

  [[nodiscard]] bool same_storage(const Tensor& other) const noexcept { return impl_ == other.impl_; }

  // Internal: used by ops and the tape.
  struct Impl;
  [[nodiscard]] Impl* impl() const noexcept { return impl_.get(); }
  void accumulate_grad(std::span<const double> g) const;

 private:
  std::shared_ptr<Impl> impl_;
};

struct Tensor::Impl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  bool recorded = false;  // output of a taped op
  std::optional<std::vector<double>> grad;
};

/// Ordered record of differentiable ops. backward() replays it in reverse and clears it.
class GradTape {
 public:
  using BackwardFn = std::function<void(std::span<const double> out_grad)>;

  GradTape() = default;
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  void record(const Tensor& output, BackwardFn fn);
  /// Seeds d(loss)=1 and propagates. Leaves the tape empty.
  void backward(const Tensor& loss);
  void clear();
  [[nodiscard]] std::size_t size() const noexcept { return nodes_.size(); }

  /// Tape that ops currently record onto, or nullptr.
  static GradTape* active() noexcept;

 private:
  friend class TapeScope;
  struct Node {
    Tensor output;
    BackwardFn fn;
  };
  std::vector<Node> nodes_;
};

/// Makes a tape active for the current thread for the lifetime of the scope.
class TapeScope {
 public:
  explicit TapeScope(GradTape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  GradTape* previous_;
};

/// backward() on the active tape.
void backward(const Tensor& loss);

}  // namespace viscop
