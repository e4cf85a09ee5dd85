#pragma once

#include "dfternet/bitpack.hpp"
#include "dfternet/tensor.hpp"

// Serial reference kernels. Loop structure and accumulation order match the
// OpenMP versions exactly, so outputs must be bit-identical at any thread
// count; tests assert that, and the bench target times both.
namespace dfternet::ref {

DenseTensor conv1d_forward(const DenseTensor& input, const DenseTensor& kernel, int stride);

DenseTensor dense_forward(const DenseTensor& input, const DenseTensor& weights,
                          const std::vector<float>* bias);

double dot_packed(const TernaryTensor& a, const TernaryTensor& b);

DenseTensor conv1d_packed(const TernaryTensor& input, const TernaryTensor& kernel, int stride);

DenseTensor dense_packed(const TernaryTensor& input, const TernaryTensor& weights);

}  // namespace dfternet::ref
