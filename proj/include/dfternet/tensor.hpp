#pragma once

#include <cstdint>
#include <initializer_list>
#include <vector>

#include "dfternet/errors.hpp"

namespace dfternet {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);

// Row-major N-d array of 32-bit floats. The full-precision substrate for
// weights, activations and gradients.
struct DenseTensor {
  Shape shape;
  std::vector<float> data;

  DenseTensor() = default;
  explicit DenseTensor(Shape s) : shape(std::move(s)), data(shape_numel(shape), 0.0f) {}
  DenseTensor(Shape s, std::vector<float> d);

  static DenseTensor zeros(Shape s) { return DenseTensor(std::move(s)); }
  static DenseTensor from(Shape s, std::initializer_list<float> vals);

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }

  bool same_shape(const DenseTensor& other) const { return shape == other.shape; }

  float* raw() { return data.data(); }
  const float* raw() const { return data.data(); }

  bool all_finite() const;
};

void require_same_shape(const DenseTensor& a, const DenseTensor& b, const char* where);

}  // namespace dfternet
