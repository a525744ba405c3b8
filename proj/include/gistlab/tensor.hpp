#pragma once

// Dense tensors and a define-by-run autodiff tape.
//
// A Tensor is a shared handle to a row-major buffer. Operations in ops.hpp
// record a node on the Tape passed to them whenever at least one input
// requires a gradient; Tape::backward walks those nodes in reverse order of
// construction. Tensors that do not require a gradient never get a gradient
// buffer.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace gistlab {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class ParameterError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

class TapeError : public Error {
 public:
  using Error::Error;
};

class LayoutError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed binary file. offset() is the byte position where parsing failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

template <typename T>
class Tape;

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const noexcept { return impl_ != nullptr; }
  explicit operator bool() const noexcept { return defined(); }

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t size() const { return impl_->data.size(); }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }
  T item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  /// Turning requires_grad off releases any gradient buffer.
  void set_requires_grad(bool on);

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  std::span<T> grad() { return impl_->grad; }
  void zero_grad();
  void release_grad();

  /// Gradient buffer for accumulation, allocated on first use. Throws when the
  /// tensor does not require a gradient. Tensors are shared handles, so this
  /// is available through const handles too.
  std::span<T> grad_accumulator() const;

  std::optional<std::size_t> tape_id() const { return impl_->node; }
  const void* tape_owner() const { return impl_->tape; }

  bool same(const Tensor& other) const noexcept { return impl_ == other.impl_; }
  /// Deep copy of the values; the copy is a detached leaf.
  Tensor clone() const;

 private:
  struct Impl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
    std::optional<std::size_t> node;
    const void* tape = nullptr;
  };

  std::shared_ptr<Impl> impl_;

  friend class Tape<T>;
};

template <typename T>
class Tape {
 public:
  enum class Mode { Record, Inference };

  struct Node {
    std::string_view op;
    std::vector<Tensor<T>> inputs;
    Tensor<T> output;
    std::function<void()> backward;
  };

  explicit Tape(Mode mode = Mode::Record) : mode_(mode) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return mode_ == Mode::Record; }

  /// Attaches `output` to the tape as the result of `op`. When no input
  /// requires a gradient (or the tape is in inference mode) nothing is
  /// recorded and the output stays a constant.
  Tensor<T> record(std::string_view op, Tensor<T> output, std::vector<Tensor<T>> inputs,
                   std::function<void()> backward);

  /// Seeds d(loss)/d(loss) = 1 and propagates in strict reverse construction
  /// order. Intermediate gradients are reset first so that repeated calls
  /// accumulate into leaves only.
  void backward(const Tensor<T>& loss);

  std::size_t size() const noexcept { return nodes_.size(); }
  const std::vector<Node>& nodes() const noexcept { return nodes_; }

 private:
  Mode mode_;
  std::vector<Node> nodes_;
};

template <typename T>
void backward(Tape<T>& tape, const Tensor<T>& loss) {
  tape.backward(loss);
}

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace gistlab
