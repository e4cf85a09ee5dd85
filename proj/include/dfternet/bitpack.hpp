#pragma once

#include <cstdint>
#include <vector>

#include "dfternet/tensor.hpp"

namespace dfternet {

// Ternary tensor stored as two bit planes: sign (1 = positive) and value
// (1 = nonzero). Zero elements always carry sign bit 0, so equal ternary
// contents pack to byte-identical planes.
struct TernaryTensor {
  Shape shape;
  std::vector<uint64_t> sign_plane;
  std::vector<uint64_t> value_plane;
  double alpha = 1.0;
  int k = 2;

  int64_t numel() const { return shape_numel(shape); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }

  // -1, 0 or +1 for element i.
  int element_sign(int64_t i) const;
  int64_t count_nonzero() const;
};

// Values must already be exactly on the {-0.5, 0, 0.5} grid; anything else is
// rejected rather than silently re-quantized.
TernaryTensor pack_ternary(const DenseTensor& values, double alpha);

// Grid values without the alpha scaling applied.
DenseTensor unpack_ternary(const TernaryTensor& packed);

// Inner product via two popcounts: (matches - mismatches) * phi(k)^2 * alphas.
double dot_packed(const TernaryTensor& a, const TernaryTensor& b);

// Valid 1-D convolution on packed operands; numerically identical to
// conv1d_forward on the unpacked grids scaled by both alphas.
// input [N, C, T], kernel [C_out, C, KH] -> dense [N, C_out, T_out].
DenseTensor conv1d_packed(const TernaryTensor& input, const TernaryTensor& kernel, int stride);

// input [B, N_in] x weights [N_in, N_out] -> dense [B, N_out] (no bias).
DenseTensor dense_packed(const TernaryTensor& input, const TernaryTensor& weights);

// Same, with an optional per-output bias folded into the one double-precision
// expression so the result matches the dense-arithmetic route bit for bit.
DenseTensor dense_packed(const TernaryTensor& input, const TernaryTensor& weights,
                         const std::vector<double>* bias);

// Per-channel comparison thresholds implementing the 2-bit quantized batch
// norm: quantize_linear(BN(x), eps, 2) collapses to two compares.
struct QuantBNThresholds {
  std::vector<double> upper;
  std::vector<double> lower;
  std::vector<int8_t> gamma_sign;

  int channels() const { return static_cast<int>(upper.size()); }

  // Thresholds in normalized (x-hat) space.
  static QuantBNThresholds from_bn(const std::vector<float>& gamma,
                                   const std::vector<float>& beta, double eps_quant);

  // Thresholds in raw pre-normalization space: mean/std are folded in, so the
  // whole BN + quantize step is two compares against constants.
  static QuantBNThresholds from_bn_folded(const std::vector<float>& gamma,
                                          const std::vector<float>& beta,
                                          const std::vector<float>& mu,
                                          const std::vector<float>& sigma, double eps_quant);
};

// Applies the threshold comparisons along channel dim 1 (rank 2 or 3 input).
DenseTensor quantize_bn_apply(const DenseTensor& x, const QuantBNThresholds& thresholds);

double quantize_bn_scalar(double x, const QuantBNThresholds& thresholds, int channel);

// Bytes used by the packed representation (planes + alpha + shape header).
int64_t packed_storage_bytes(const TernaryTensor& t);

}  // namespace dfternet
