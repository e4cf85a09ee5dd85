#include "dfternet/tensor.hpp"

#include <cmath>
#include <string>

namespace dfternet {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) {
    if (d < 0) throw DimensionError("negative dimension in shape");
    n *= d;
  }
  return n;
}

DenseTensor::DenseTensor(Shape s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
  if (shape_numel(shape) != static_cast<int64_t>(data.size()))
    throw DimensionError("tensor data length does not match shape");
}

DenseTensor DenseTensor::from(Shape s, std::initializer_list<float> vals) {
  return DenseTensor(std::move(s), std::vector<float>(vals));
}

bool DenseTensor::all_finite() const {
  for (float v : data)
    if (!std::isfinite(v)) return false;
  return true;
}

void require_same_shape(const DenseTensor& a, const DenseTensor& b, const char* where) {
  if (!a.same_shape(b))
    throw DimensionError(std::string(where) + ": shape mismatch");
}

}  // namespace dfternet
