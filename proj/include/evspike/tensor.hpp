#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace evspike {

/// Channel-major (C, H, W) shape. Vectors are represented as (N, 1, 1).
struct Shape {
  int channels = 0;
  int height = 0;
  int width = 0;

  constexpr std::size_t size() const noexcept {
    return static_cast<std::size_t>(channels) * static_cast<std::size_t>(height) *
           static_cast<std::size_t>(width);
  }
  constexpr std::size_t plane() const noexcept {
    return static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
  }
  friend constexpr bool operator==(const Shape&, const Shape&) = default;
};

std::string to_string(const Shape& s);

/// Dense activation tensor. Sensor frames, pre-activations and layer outputs
/// all use this layout; sparsity is exploited by the kernels, not the storage.
class Tensor {
public:
  Tensor() = default;
  explicit Tensor(Shape shape) : shape_(shape), values_(shape.size(), 0.0) {}
  Tensor(Shape shape, std::vector<double> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return values_.size(); }
  std::size_t bytes() const noexcept { return values_.size() * sizeof(double); }

  double& at(int c, int y, int x) {
    return values_[(static_cast<std::size_t>(c) * shape_.height + y) * shape_.width + x];
  }
  double at(int c, int y, int x) const {
    return values_[(static_cast<std::size_t>(c) * shape_.height + y) * shape_.width + x];
  }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }

  std::size_t count_nonzero() const noexcept;
  void fill(double v);

  /// Same values, new shape of equal size.
  Tensor reshaped(Shape s) const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

private:
  Shape shape_{};
  std::vector<double> values_;
};

}  // namespace evspike
