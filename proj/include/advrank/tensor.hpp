#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace advrank {

using Shape = std::vector<std::size_t>;

std::string to_string(const Shape& shape);
std::size_t numel(const Shape& shape);

/// Raised when operand shapes do not conform; the message names both shapes.
class ShapeError : public std::invalid_argument {
 public:
  ShapeError(const std::string& op, const Shape& a, const Shape& b);
  explicit ShapeError(const std::string& what) : std::invalid_argument(what) {}
};

/// Raised for misuse of the gradient tape (non-scalar loss, expired tape).
class AutogradError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

namespace detail {
struct TensorImpl;
struct TapeState;
}  // namespace detail

/// Dense float32 tensor. Copies are shallow handles (like a shared buffer);
/// use clone() for an independent copy.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<float> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);

  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t size(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const float> data() const;
  /// Writable view of the underlying buffer. Writes are visible through every
  /// handle and view sharing the buffer; never write to a buffer that sits on a
  /// live tape.
  std::span<float> mutable_data();
  float item() const;
  float at(std::size_t flat) const { return data()[flat]; }

  bool requires_grad() const;
  bool has_grad() const;
  std::span<const float> grad() const;
  void zero_grad();

  /// Same buffer, no gradient tracking.
  Tensor detach() const;
  /// Same buffer, fresh leaf that requires grad (its own grad slot).
  Tensor grad_view() const;
  /// Independent deep copy, no gradient tracking.
  Tensor clone() const;

  bool defined() const { return impl_ != nullptr; }
  bool on_tape() const;

  // internal
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Records differentiable operations issued on the current thread while alive.
/// Tapes nest; the innermost live tape receives new nodes. A tape and the
/// tensors recorded on it belong to one thread.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Reverse sweep from a scalar loss recorded on this tape. Leaves that
  /// require grad accumulate d(loss)/d(leaf) into their grad slot.
  void backward(const Tensor& loss);
  std::size_t size() const;

  static bool active();

 private:
  std::shared_ptr<detail::TapeState> state_;
};

/// Backward through whichever tape recorded `loss`.
void backward(const Tensor& loss);

// Elementwise with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, float s);
Tensor add_scalar(const Tensor& a, float s);
Tensor neg(const Tensor& a);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor relu(const Tensor& a);
/// Derivative is 1 on the closed interval [lo, hi], 0 outside.
Tensor clamp(const Tensor& a, float lo, float hi);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Sum over the last axis.
Tensor sum_last(const Tensor& a);

/// Euclidean norm of each row of an (m, n) tensor -> (m). At an all-zero row
/// the subgradient used is the uniform unit vector.
Tensor l2_norm_rows(const Tensor& a);
/// Row-wise inner products of two (m, n) tensors -> (m).
Tensor dot_rows(const Tensor& a, const Tensor& b);

Tensor broadcast_to(const Tensor& a, const Shape& shape);
Tensor reshape(const Tensor& a, const Shape& shape);

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_rows(std::initializer_list<Tensor> parts);

Shape broadcast_shapes(const Shape& a, const Shape& b, const char* op);

}  // namespace advrank
