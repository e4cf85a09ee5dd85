#include "dfternet/quantize.hpp"

#include <algorithm>
#include <cmath>

namespace dfternet {

double quant_grid_step(int k) {
  if (k < 2) throw ParameterError("quant_grid_step: bit-width must be >= 2");
  return std::ldexp(1.0, 1 - k);
}

double quantize_scalar(double x, double eps, int k) {
  const double phi = quant_grid_step(k);
  const double bound = 1.0 - phi;
  // std::round is half away from zero, the tie rule used throughout.
  const double q = phi * std::round(x * eps / phi);
  return std::clamp(q, -bound, bound);
}

DenseTensor quantize_linear(const DenseTensor& x, double eps, int k) {
  if (k < 2) throw ParameterError("quantize_linear: bit-width must be >= 2");
  if (!(eps > 0.0)) throw ParameterError("quantize_linear: epsilon must be positive");
  DenseTensor out(x.shape);
  const float* in = x.raw();
  float* o = out.raw();
  const int64_t n = x.numel();
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) {
    o[i] = static_cast<float>(quantize_scalar(in[i], eps, k));
  }
  return out;
}

double weight_scale(const DenseTensor& weights, double xi) {
  if (!(xi > 0.0)) throw ParameterError("weight_scale: xi must be positive");
  if (weights.numel() == 0) throw DegenerateInputError("weight_scale: empty tensor");
  double sum_abs = 0.0;
  for (float v : weights.data) sum_abs += std::fabs(static_cast<double>(v));
  if (sum_abs == 0.0) throw DegenerateInputError("weight_scale: all-zero weights");
  return static_cast<double>(weights.numel()) / (xi * sum_abs);
}

double solve_alpha(const DenseTensor& weights, const DenseTensor& ternary) {
  require_same_shape(weights, ternary, "solve_alpha");
  double wt = 0.0, tt = 0.0;
  const float* w = weights.raw();
  const float* t = ternary.raw();
  const int64_t n = weights.numel();
  for (int64_t i = 0; i < n; ++i) {
    wt += static_cast<double>(w[i]) * t[i];
    tt += static_cast<double>(t[i]) * t[i];
  }
  if (tt == 0.0) throw DegenerateInputError("solve_alpha: ternary basis is all-zero");
  return wt / tt;
}

QuantResult quantize_weights(const DenseTensor& weights, const QuantConfig& cfg) {
  QuantResult res;
  res.epsilon_w = weight_scale(weights, cfg.xi);
  res.ternary = quantize_linear(weights, res.epsilon_w, cfg.k_w);
  const int64_t n = weights.numel();
  for (int64_t i = 0; i < n; ++i) {
    if (res.ternary.data[static_cast<size_t>(i)] != 0.0f) res.support.push_back(i);
  }
  if (res.support.empty()) {
    res.alpha = 0.0;  // caller decides whether to warn
  } else {
    res.alpha = solve_alpha(weights, res.ternary);
  }
  double err = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const double d =
        static_cast<double>(weights.data[static_cast<size_t>(i)]) -
        res.alpha * res.ternary.data[static_cast<size_t>(i)];
    err += d * d;
  }
  res.reconstruction_error = std::sqrt(err);
  return res;
}

double activation_tau(const DenseTensor& weights) {
  if (weights.numel() == 0) throw DegenerateInputError("activation_tau: empty tensor");
  double sum_abs = 0.0, max_abs = 0.0;
  for (float v : weights.data) {
    const double a = std::fabs(static_cast<double>(v));
    sum_abs += a;
    max_abs = std::max(max_abs, a);
  }
  if (max_abs == 0.0) throw DegenerateInputError("activation_tau: all-zero weights");
  return sum_abs / static_cast<double>(weights.numel()) / max_abs;
}

double activation_scale_from_tau(double tau) {
  const double r = std::round(tau);
  return std::min(1.0, std::ldexp(1.0, -static_cast<int>(r)));
}

double activation_scale(const DenseTensor& weights) {
  return activation_scale_from_tau(activation_tau(weights));
}

DenseTensor quantize_activations(const DenseTensor& activations, const QuantConfig& cfg) {
  if (!(cfg.epsilon_a > 0.0 && cfg.epsilon_a <= 1.0))
    throw ParameterError("quantize_activations: epsilon_a must be in (0, 1]");
  return quantize_linear(activations, cfg.epsilon_a, cfg.k_a);
}

DenseTensor ste_weight_grad(const DenseTensor& grad_ternary, double alpha) {
  DenseTensor out(grad_ternary.shape);
  const int64_t n = grad_ternary.numel();
  const float a = static_cast<float>(alpha);
  for (int64_t i = 0; i < n; ++i)
    out.data[static_cast<size_t>(i)] = a * grad_ternary.data[static_cast<size_t>(i)];
  return out;
}

DenseTensor ste_activation_grad(const DenseTensor& grad_quantized,
                                const DenseTensor& activations) {
  require_same_shape(grad_quantized, activations, "ste_activation_grad");
  DenseTensor out(grad_quantized.shape);
  const int64_t n = grad_quantized.numel();
  const float* g = grad_quantized.raw();
  const float* a = activations.raw();
  float* o = out.raw();
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) {
    o[i] = (std::fabs(a[i]) <= 0.5f) ? g[i] : 0.0f;
  }
  return out;
}

BoundCheck reconstruction_bound_check(const DenseTensor& weights, const QuantResult& result) {
  if (result.support.empty())
    throw DegenerateInputError("reconstruction_bound_check: empty support set");
  BoundCheck chk;
  double norm_sq = 0.0, err_sq = 0.0;
  for (int64_t idx : result.support) {
    const double w = weights.data[static_cast<size_t>(idx)];
    const double t = result.ternary.data[static_cast<size_t>(idx)];
    norm_sq += w * w;
    const double d = w - result.alpha * t;
    err_sq += d * d;
  }
  chk.lhs = err_sq;
  chk.rhs = norm_sq * (1.0 - 1.0 / static_cast<double>(result.support.size()));
  chk.holds = chk.lhs <= chk.rhs + 1e-9;
  return chk;
}

}  // namespace dfternet
