#pragma once

#include <cmath>
#include <functional>

#include "dfternet/rng.hpp"
#include "dfternet/tensor.hpp"

namespace dfternet::testutil {

inline DenseTensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  DenseTensor t(std::move(shape));
  for (float& v : t.data) v = static_cast<float>(scale * rng.normal());
  return t;
}

inline DenseTensor random_ternary(Shape shape, Rng& rng, double zero_frac = 0.3) {
  DenseTensor t(std::move(shape));
  for (float& v : t.data) {
    const double u = rng.uniform01();
    v = u < zero_frac ? 0.0f : (rng.bernoulli(0.5) ? 0.5f : -0.5f);
  }
  return t;
}

// Central finite differences of a scalar function w.r.t. every element of x;
// the oracle the analytic backward passes are checked against.
inline DenseTensor finite_difference(const std::function<double(const DenseTensor&)>& f,
                                     const DenseTensor& x, double h = 1e-3) {
  DenseTensor grad(x.shape);
  for (int64_t i = 0; i < x.numel(); ++i) {
    DenseTensor xp = x, xm = x;
    xp.data[static_cast<size_t>(i)] += static_cast<float>(h);
    xm.data[static_cast<size_t>(i)] -= static_cast<float>(h);
    grad.data[static_cast<size_t>(i)] = static_cast<float>((f(xp) - f(xm)) / (2.0 * h));
  }
  return grad;
}

// Worst element difference relative to the gradient scale (float32 forward
// noise makes per-element ratios meaningless near zero).
inline double max_rel_error(const DenseTensor& a, const DenseTensor& b, double floor = 1e-4) {
  double worst = 0.0, scale = floor;
  for (int64_t i = 0; i < a.numel(); ++i) {
    const double x = a.data[static_cast<size_t>(i)];
    const double y = b.data[static_cast<size_t>(i)];
    worst = std::max(worst, std::fabs(x - y));
    scale = std::max({scale, std::fabs(x), std::fabs(y)});
  }
  return worst / scale;
}

}  // namespace dfternet::testutil
