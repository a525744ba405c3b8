#include "gistlab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace gistlab {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t extent : shape) n *= extent;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  Tensor t;
  t.impl_ = std::make_shared<Impl>();
  t.impl_->data.assign(numel(shape), value);
  t.impl_->shape = std::move(shape);
  t.impl_->requires_grad = requires_grad;
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
  if (numel(shape) != values.size()) {
    throw DimensionError("tensor of shape " + shape_string(shape) + " cannot hold " +
                         std::to_string(values.size()) + " values");
  }
  Tensor t;
  t.impl_ = std::make_shared<Impl>();
  t.impl_->shape = std::move(shape);
  t.impl_->data = std::move(values);
  t.impl_->requires_grad = requires_grad;
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from({}, {value}, requires_grad);
}

template <typename T>
T Tensor<T>::item() const {
  if (impl_->data.size() != 1) {
    throw DimensionError("item() on tensor of shape " + shape_string(impl_->shape));
  }
  return impl_->data[0];
}

template <typename T>
void Tensor<T>::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  if (!on) release_grad();
}

template <typename T>
void Tensor<T>::zero_grad() {
  std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
}

template <typename T>
void Tensor<T>::release_grad() {
  impl_->grad.clear();
  impl_->grad.shrink_to_fit();
}

template <typename T>
std::span<T> Tensor<T>::grad_accumulator() const {
  if (!impl_->requires_grad) {
    throw TapeError("gradient requested for a tensor that does not require one");
  }
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T(0));
  return impl_->grad;
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  return from(impl_->shape, impl_->data, false);
}

template <typename T>
Tensor<T> Tape<T>::record(std::string_view op, Tensor<T> output, std::vector<Tensor<T>> inputs,
                          std::function<void()> backward) {
  // An inference tape only computes values, so it may read tensors that
  // belong to another tape.
  if (mode_ == Mode::Inference) {
    output.impl_->requires_grad = false;
    return output;
  }
  bool any = false;
  for (const auto& in : inputs) {
    if (!in.defined()) continue;
    if (in.impl_->node) {
      if (in.impl_->tape != this || *in.impl_->node >= nodes_.size()) {
        throw TapeError(std::string("input of '") + std::string(op) +
                        "' was produced on a different tape");
      }
    }
    any = any || in.requires_grad();
  }
  if (!any) {
    output.impl_->requires_grad = false;
    return output;
  }
  output.impl_->requires_grad = true;
  output.impl_->node = nodes_.size();
  output.impl_->tape = this;
  nodes_.push_back(Node{op, std::move(inputs), output, std::move(backward)});
  return output;
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.size() != 1 || !loss.shape().empty()) {
    throw DimensionError("backward() needs a scalar loss, got shape " +
                         (loss.defined() ? shape_string(loss.shape()) : std::string("<null>")));
  }
  if (!loss.impl_->node || loss.impl_->tape != this) {
    throw TapeError("backward() on a loss that is not attached to this tape");
  }
  const std::size_t last = *loss.impl_->node;
  for (std::size_t i = 0; i <= last; ++i) nodes_[i].output.release_grad();

  Tensor<T> seed = loss;
  seed.grad_accumulator()[0] = T(1);
  for (std::size_t i = last + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.output.has_grad()) continue;  // not reachable from the loss
    node.backward();
  }
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace gistlab
