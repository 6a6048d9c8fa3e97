#include "evspike/tensor.hpp"

#include <algorithm>

#include "evspike/error.hpp"

namespace evspike {

std::string to_string(const Shape& s) {
  return "(" + std::to_string(s.channels) + ", " + std::to_string(s.height) + ", " +
         std::to_string(s.width) + ")";
}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(shape), values_(std::move(values)) {
  if (values_.size() != shape_.size()) {
    throw ValidationError("tensor value count " + std::to_string(values_.size()) +
                          " does not match shape " + to_string(shape_));
  }
}

std::size_t Tensor::count_nonzero() const noexcept {
  return static_cast<std::size_t>(
      std::count_if(values_.begin(), values_.end(), [](double v) { return v != 0.0; }));
}

void Tensor::fill(double v) { std::fill(values_.begin(), values_.end(), v); }

Tensor Tensor::reshaped(Shape s) const {
  if (s.size() != shape_.size()) {
    throw ValidationError("cannot reshape " + to_string(shape_) + " to " + to_string(s));
  }
  return Tensor(s, values_);
}

}  // namespace evspike
