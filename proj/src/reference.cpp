#include "dfternet/reference.hpp"

#include <algorithm>

#include "dfternet/bitops.hpp"

namespace dfternet::ref {

DenseTensor conv1d_forward(const DenseTensor& input, const DenseTensor& kernel, int stride) {
  const int n = input.dim(0), cin = input.dim(1), t_in = input.dim(2);
  const int cout = kernel.dim(0), kh = kernel.dim(2);
  if (kernel.dim(1) != cin) throw DimensionError("ref::conv1d_forward: channel mismatch");
  const int t_out = (t_in - kh) / stride + 1;

  DenseTensor out({n, cout, t_out});
  const float* x = input.raw();
  const float* w = kernel.raw();
  float* y = out.raw();
  for (int b = 0; b < n; ++b) {
    for (int co = 0; co < cout; ++co) {
      float* row = y + (static_cast<int64_t>(b) * cout + co) * t_out;
      for (int ci = 0; ci < cin; ++ci) {
        const float* xrow = x + (static_cast<int64_t>(b) * cin + ci) * t_in;
        const float* wrow = w + (static_cast<int64_t>(co) * cin + ci) * kh;
        for (int k = 0; k < kh; ++k) {
          const float wk = wrow[k];
          for (int t = 0; t < t_out; ++t) row[t] += wk * xrow[t * stride + k];
        }
      }
    }
  }
  return out;
}

DenseTensor dense_forward(const DenseTensor& input, const DenseTensor& weights,
                          const std::vector<float>* bias) {
  const int b = input.dim(0), n_in = input.dim(1), n_out = weights.dim(1);
  if (weights.dim(0) != n_in) throw DimensionError("ref::dense_forward: dimension mismatch");
  DenseTensor out({b, n_out});
  const float* x = input.raw();
  const float* w = weights.raw();
  float* y = out.raw();
  for (int row = 0; row < b; ++row) {
    float* yrow = y + static_cast<int64_t>(row) * n_out;
    if (bias)
      for (int j = 0; j < n_out; ++j) yrow[j] = (*bias)[j];
    const float* xrow = x + static_cast<int64_t>(row) * n_in;
    for (int i = 0; i < n_in; ++i) {
      const float xi = xrow[i];
      if (xi == 0.0f) continue;
      const float* wrow = w + static_cast<int64_t>(i) * n_out;
      for (int j = 0; j < n_out; ++j) yrow[j] += xi * wrow[j];
    }
  }
  return out;
}

double dot_packed(const TernaryTensor& a, const TernaryTensor& b) {
  if (a.numel() != b.numel()) throw DimensionError("ref::dot_packed: length mismatch");
  int64_t balance = 0;
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) balance += a.element_sign(i) * b.element_sign(i);
  return static_cast<double>(balance) * 0.25 * a.alpha * b.alpha;
}

DenseTensor conv1d_packed(const TernaryTensor& input, const TernaryTensor& kernel, int stride) {
  const int n = input.dim(0), c = input.dim(1), t_in = input.dim(2);
  const int cout = kernel.dim(0), kh = kernel.dim(2);
  if (kernel.dim(1) != c) throw DimensionError("ref::conv1d_packed: channel mismatch");
  const int t_out = (t_in - kh) / stride + 1;
  const double scale = 0.25 * input.alpha * kernel.alpha;

  DenseTensor out({n, cout, t_out});
  float* y = out.raw();
  for (int b = 0; b < n; ++b) {
    for (int co = 0; co < cout; ++co) {
      for (int t = 0; t < t_out; ++t) {
        int64_t balance = 0;
        for (int ci = 0; ci < c; ++ci) {
          for (int k = 0; k < kh; ++k) {
            const int64_t xi = (static_cast<int64_t>(b) * c + ci) * t_in + t * stride + k;
            const int64_t wi = (static_cast<int64_t>(co) * c + ci) * kh + k;
            balance += input.element_sign(xi) * kernel.element_sign(wi);
          }
        }
        y[(static_cast<int64_t>(b) * cout + co) * t_out + t] =
            static_cast<float>(static_cast<double>(balance) * scale);
      }
    }
  }
  return out;
}

DenseTensor dense_packed(const TernaryTensor& input, const TernaryTensor& weights) {
  const int b = input.dim(0), n_in = input.dim(1), n_out = weights.dim(1);
  if (weights.dim(0) != n_in) throw DimensionError("ref::dense_packed: dimension mismatch");
  const double scale = 0.25 * input.alpha * weights.alpha;
  DenseTensor out({b, n_out});
  float* y = out.raw();
  for (int r = 0; r < b; ++r) {
    for (int j = 0; j < n_out; ++j) {
      int64_t balance = 0;
      for (int i = 0; i < n_in; ++i) {
        balance += input.element_sign(static_cast<int64_t>(r) * n_in + i) *
                   weights.element_sign(static_cast<int64_t>(i) * n_out + j);
      }
      y[static_cast<int64_t>(r) * n_out + j] =
          static_cast<float>(static_cast<double>(balance) * scale);
    }
  }
  return out;
}

}  // namespace dfternet::ref
