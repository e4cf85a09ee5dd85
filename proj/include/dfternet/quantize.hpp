#pragma once

#include <cstdint>
#include <vector>

#include "dfternet/tensor.hpp"

namespace dfternet {

// Uniform grid distance 2^(1-k); 0.5 for the 2-bit case.
double quant_grid_step(int k);

// The one tie-break rule used by every quantizing site (weights, activations,
// BN thresholds).
enum class Rounding { half_away_from_zero };

struct QuantConfig {
  int k_w = 2;
  int k_a = 2;
  double xi = 2.8;          // shift threshold controlling the weight zero band
  double epsilon_a = 1.0;   // current activation scale, in (0, 1]
  Rounding rounding = Rounding::half_away_from_zero;
};

// Elastic-scale linear quantizer: clip(phi(k) * round(x*eps/phi(k)),
// -1+phi(k), 1-phi(k)). Rounding is half away from zero everywhere.
double quantize_scalar(double x, double eps, int k);
DenseTensor quantize_linear(const DenseTensor& x, double eps, int k);

// eps_w = n / (xi * sum|W|). The implied zero threshold is xi*mean|W|/4.
double weight_scale(const DenseTensor& weights, double xi);

struct QuantResult {
  DenseTensor ternary;
  double alpha = 0.0;
  double epsilon_w = 0.0;
  std::vector<int64_t> support;      // indices of nonzero quantized entries
  double reconstruction_error = 0.0; // ||W - alpha*T||
};

// Ternarize weights with the xi-calibrated scale and fit the least-squares
// alpha. If the quantized tensor is all-zero (pathological xi), alpha falls
// back to 0 and the support stays empty; callers may warn.
QuantResult quantize_weights(const DenseTensor& weights, const QuantConfig& cfg);

// Least-squares scaling <W,T>/<T,T> for a fixed ternary basis T.
double solve_alpha(const DenseTensor& weights, const DenseTensor& ternary);

// tau = mean|w| / max|w| over one layer's full-precision weights.
double activation_tau(const DenseTensor& weights);

// eps_a = min(1, 2^-round(tau)).
double activation_scale_from_tau(double tau);
double activation_scale(const DenseTensor& weights);

DenseTensor quantize_activations(const DenseTensor& activations, const QuantConfig& cfg);

// Straight-through weight gradient: grad_W = alpha * grad_T.
DenseTensor ste_weight_grad(const DenseTensor& grad_ternary, double alpha);

// Straight-through activation gradient: pass where |A| <= 0.5, zero elsewhere.
DenseTensor ste_activation_grad(const DenseTensor& grad_quantized, const DenseTensor& activations);

struct BoundCheck {
  double lhs = 0.0;  // ||W_support - alpha*T||^2
  double rhs = 0.0;  // ||W_support||^2 * (1 - 1/|support|)
  bool holds = false;
};

// Single-term reconstruction error bound, restricted to the support set.
BoundCheck reconstruction_bound_check(const DenseTensor& weights, const QuantResult& result);

}  // namespace dfternet
