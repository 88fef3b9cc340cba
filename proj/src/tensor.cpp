#include "distillscope/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace distillscope {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)) {
  for (auto e : shape_)
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_string(shape_));
  data_.assign(shape_numel(shape_), fill);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto e : shape_)
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_string(shape_));
  if (shape_numel(shape_) != data_.size())
    throw DimensionError("shape " + shape_string(shape_) + " does not match " +
                         std::to_string(data_.size()) + " values");
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  if (axis >= shape_.size())
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_string(shape_));
  return shape_[axis];
}

template <typename T>
std::size_t Tensor<T>::offset(std::initializer_list<std::size_t> index) const {
  if (index.size() != shape_.size())
    throw DimensionError("index rank " + std::to_string(index.size()) + " != tensor rank " +
                         std::to_string(shape_.size()));
  std::size_t off = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= shape_[axis])
      throw DimensionError("index " + std::to_string(i) + " out of range on axis " + std::to_string(axis));
    off = off * shape_[axis] + i;
    ++axis;
  }
  return off;
}

template <typename T>
T& Tensor<T>::at(std::initializer_list<std::size_t> index) {
  return data_[offset(index)];
}

template <typename T>
const T& Tensor<T>::at(std::initializer_list<std::size_t> index) const {
  return data_[offset(index)];
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size())
    throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  return Tensor(std::move(shape), data_);
}

template <typename T>
Tensor<T> Tensor<T>::slice_batch(std::size_t n) const {
  const std::size_t batch = dim(0);
  if (n >= batch) throw DimensionError("batch index out of range");
  const std::size_t per = data_.size() / batch;
  Shape s = shape_;
  s[0] = 1;
  return Tensor(std::move(s), std::vector<T>(data_.begin() + n * per, data_.begin() + (n + 1) * per));
}

template <typename T>
bool Tensor<T>::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
void Tensor<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

template <typename T>
Tensor<T> stack_batch(std::span<const Tensor<T>* const> items) {
  if (items.empty()) throw DimensionError("cannot stack an empty batch");
  Shape item_shape = items.front()->shape();
  for (auto* t : items)
    if (t->shape() != item_shape)
      throw DimensionError("stack_batch: shape " + shape_string(t->shape()) + " differs from " +
                           shape_string(item_shape));
  Shape out_shape{items.size()};
  out_shape.insert(out_shape.end(), item_shape.begin(), item_shape.end());
  std::vector<T> data;
  data.reserve(items.size() * items.front()->numel());
  for (auto* t : items) data.insert(data.end(), t->data().begin(), t->data().end());
  return Tensor<T>(std::move(out_shape), std::move(data));
}

template class Tensor<float>;
template class Tensor<double>;
template Tensor<float> stack_batch(std::span<const Tensor<float>* const>);
template Tensor<double> stack_batch(std::span<const Tensor<double>* const>);

}  // namespace distillscope
