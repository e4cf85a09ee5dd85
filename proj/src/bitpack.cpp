#include "dfternet/bitpack.hpp"

#include <cmath>

#include "dfternet/bitops.hpp"

namespace dfternet {

int TernaryTensor::element_sign(int64_t i) const {
  if (!get_bit(value_plane, i)) return 0;
  return get_bit(sign_plane, i) ? 1 : -1;
}

int64_t TernaryTensor::count_nonzero() const {
  int64_t n = 0;
  for (uint64_t w : value_plane) n += std::popcount(w);
  return n;
}

TernaryTensor pack_ternary(const DenseTensor& values, double alpha) {
  TernaryTensor t;
  t.shape = values.shape;
  t.alpha = alpha;
  t.k = 2;
  const int64_t n = values.numel();
  const int64_t words = words_for_bits(n);
  t.sign_plane.assign(static_cast<size_t>(words), 0);
  t.value_plane.assign(static_cast<size_t>(words), 0);
  for (int64_t i = 0; i < n; ++i) {
    const float v = values.data[static_cast<size_t>(i)];
    if (v == 0.5f) {
      set_bit(t.sign_plane, i);
      set_bit(t.value_plane, i);
    } else if (v == -0.5f) {
      set_bit(t.value_plane, i);
    } else if (v != 0.0f) {
      throw PrecisionError("pack_ternary: value off the {-0.5, 0, 0.5} grid");
    }
  }
  return t;
}

DenseTensor unpack_ternary(const TernaryTensor& packed) {
  DenseTensor out(packed.shape);
  const int64_t n = packed.numel();
  for (int64_t i = 0; i < n; ++i) {
    out.data[static_cast<size_t>(i)] = 0.5f * static_cast<float>(packed.element_sign(i));
  }
  return out;
}

double dot_packed(const TernaryTensor& a, const TernaryTensor& b) {
  if (a.numel() != b.numel()) throw DimensionError("dot_packed: length mismatch");
  if (a.k != 2 || b.k != 2) throw ParameterError("dot_packed: only 2-bit planes supported");
  const int64_t words = words_for_bits(a.numel());
  const int64_t balance = popcount_balance(a.sign_plane.data(), a.value_plane.data(),
                                           b.sign_plane.data(), b.value_plane.data(), words);
  return static_cast<double>(balance) * 0.25 * a.alpha * b.alpha;
}

namespace {

// Row-aligned repack: each row starts on a word boundary so the popcount loop
// never straddles rows.
struct PackedRows {
  int64_t rows = 0;
  int64_t bits_per_row = 0;
  int64_t words_per_row = 0;
  std::vector<uint64_t> sign;
  std::vector<uint64_t> value;

  void init(int64_t r, int64_t bits) {
    rows = r;
    bits_per_row = bits;
    words_per_row = words_for_bits(bits);
    sign.assign(static_cast<size_t>(r * words_per_row), 0);
    value.assign(static_cast<size_t>(r * words_per_row), 0);
  }
};

// Kernel rows are contiguous slices of the canonical plane.
PackedRows pack_contiguous_rows(const TernaryTensor& t, int64_t rows, int64_t bits_per_row) {
  PackedRows p;
  p.init(rows, bits_per_row);
  for (int64_t r = 0; r < rows; ++r) {
    copy_bits(t.sign_plane.data(), r * bits_per_row, p.sign.data(), r * p.words_per_row * 64,
              bits_per_row);
    copy_bits(t.value_plane.data(), r * bits_per_row, p.value.data(), r * p.words_per_row * 64,
              bits_per_row);
  }
  return p;
}

}  // namespace

DenseTensor conv1d_packed(const TernaryTensor& input, const TernaryTensor& kernel, int stride) {
  if (input.shape.size() != 3 || kernel.shape.size() != 3)
    throw DimensionError("conv1d_packed: expected rank-3 tensors");
  if (stride < 1) throw ParameterError("conv1d_packed: stride must be >= 1");
  const int n = input.dim(0), c = input.dim(1), t_in = input.dim(2);
  const int cout = kernel.dim(0), kc = kernel.dim(1), kh = kernel.dim(2);
  if (c != kc) throw DimensionError("conv1d_packed: channel mismatch");
  if (t_in < kh) throw DimensionError("conv1d_packed: time axis shorter than kernel");
  const int t_out = (t_in - kh) / stride + 1;
  const int64_t window_bits = static_cast<int64_t>(c) * kh;

  const PackedRows krows = pack_contiguous_rows(kernel, cout, window_bits);
  const int64_t wpr = krows.words_per_row;
  const double scale = 0.25 * input.alpha * kernel.alpha;

  DenseTensor out({n, cout, t_out});
  float* y = out.raw();

#pragma omp parallel
  {
    std::vector<uint64_t> wsign(static_cast<size_t>(wpr), 0);
    std::vector<uint64_t> wvalue(static_cast<size_t>(wpr), 0);
#pragma omp for collapse(2) schedule(static)
    for (int b = 0; b < n; ++b) {
      for (int t = 0; t < t_out; ++t) {
        // Gather the window: KH bits from every input channel row.
        std::fill(wsign.begin(), wsign.end(), 0);
        std::fill(wvalue.begin(), wvalue.end(), 0);
        for (int ci = 0; ci < c; ++ci) {
          const int64_t src = (static_cast<int64_t>(b) * c + ci) * t_in +
                              static_cast<int64_t>(t) * stride;
          copy_bits(input.sign_plane.data(), src, wsign.data(), static_cast<int64_t>(ci) * kh, kh);
          copy_bits(input.value_plane.data(), src, wvalue.data(), static_cast<int64_t>(ci) * kh,
                    kh);
        }
        for (int co = 0; co < cout; ++co) {
          const int64_t balance =
              popcount_balance(wsign.data(), wvalue.data(), krows.sign.data() + co * wpr,
                               krows.value.data() + co * wpr, wpr);
          y[(static_cast<int64_t>(b) * cout + co) * t_out + t] =
              static_cast<float>(static_cast<double>(balance) * scale);
        }
      }
    }
  }
  return out;
}

DenseTensor dense_packed(const TernaryTensor& input, const TernaryTensor& weights) {
  return dense_packed(input, weights, nullptr);
}

DenseTensor dense_packed(const TernaryTensor& input, const TernaryTensor& weights,
                         const std::vector<double>* bias) {
  if (input.shape.size() != 2 || weights.shape.size() != 2)
    throw DimensionError("dense_packed: expected rank-2 tensors");
  const int b = input.dim(0), n_in = input.dim(1);
  const int w_in = weights.dim(0), n_out = weights.dim(1);
  if (n_in != w_in) throw DimensionError("dense_packed: dimension mismatch");
  if (bias && static_cast<int>(bias->size()) != n_out)
    throw DimensionError("dense_packed: bias length mismatch");

  // Transpose the weight planes so each output neuron's column is one row.
  PackedRows wrows;
  wrows.init(n_out, n_in);
  for (int i = 0; i < w_in; ++i) {
    for (int j = 0; j < n_out; ++j) {
      const int64_t src = static_cast<int64_t>(i) * n_out + j;
      if (get_bit(weights.value_plane, src)) {
        const int64_t dst = static_cast<int64_t>(j) * wrows.words_per_row * 64 + i;
        set_bit(wrows.value, dst);
        if (get_bit(weights.sign_plane, src)) set_bit(wrows.sign, dst);
      }
    }
  }

  PackedRows irows;
  irows.init(b, n_in);
  for (int r = 0; r < b; ++r) {
    copy_bits(input.sign_plane.data(), static_cast<int64_t>(r) * n_in, irows.sign.data(),
              static_cast<int64_t>(r) * irows.words_per_row * 64, n_in);
    copy_bits(input.value_plane.data(), static_cast<int64_t>(r) * n_in, irows.value.data(),
              static_cast<int64_t>(r) * irows.words_per_row * 64, n_in);
  }

  const int64_t wpr = wrows.words_per_row;
  const double scale = 0.25 * input.alpha * weights.alpha;
  DenseTensor out({b, n_out});
  float* y = out.raw();

#pragma omp parallel for schedule(static)
  for (int r = 0; r < b; ++r) {
    const uint64_t* is = irows.sign.data() + static_cast<int64_t>(r) * wpr;
    const uint64_t* iv = irows.value.data() + static_cast<int64_t>(r) * wpr;
    for (int j = 0; j < n_out; ++j) {
      const int64_t balance = popcount_balance(is, iv, wrows.sign.data() + static_cast<int64_t>(j) * wpr,
                                               wrows.value.data() + static_cast<int64_t>(j) * wpr, wpr);
      double v = static_cast<double>(balance) * scale;
      if (bias) v += (*bias)[static_cast<size_t>(j)];
      y[static_cast<int64_t>(r) * n_out + j] = static_cast<float>(v);
    }
  }
  return out;
}

QuantBNThresholds QuantBNThresholds::from_bn(const std::vector<float>& gamma,
                                             const std::vector<float>& beta, double eps_quant) {
  if (gamma.size() != beta.size())
    throw DimensionError("QuantBNThresholds: gamma/beta length mismatch");
  if (!(eps_quant > 0.0)) throw ParameterError("QuantBNThresholds: eps must be positive");
  QuantBNThresholds t;
  const size_t c = gamma.size();
  t.upper.resize(c);
  t.lower.resize(c);
  t.gamma_sign.resize(c);
  const double q = 0.25 / eps_quant;
  for (size_t i = 0; i < c; ++i) {
    const double g = gamma[i];
    if (g == 0.0) throw DegenerateInputError("QuantBNThresholds: gamma is zero");
    t.upper[i] = (q - beta[i]) / g;
    t.lower[i] = -(q + beta[i]) / g;
    t.gamma_sign[i] = g > 0.0 ? 1 : -1;
  }
  return t;
}

QuantBNThresholds QuantBNThresholds::from_bn_folded(const std::vector<float>& gamma,
                                                    const std::vector<float>& beta,
                                                    const std::vector<float>& mu,
                                                    const std::vector<float>& sigma,
                                                    double eps_quant) {
  QuantBNThresholds t = from_bn(gamma, beta, eps_quant);
  if (mu.size() != gamma.size() || sigma.size() != gamma.size())
    throw DimensionError("QuantBNThresholds: running stats length mismatch");
  for (size_t i = 0; i < gamma.size(); ++i) {
    if (!(sigma[i] > 0.0f))
      throw DegenerateInputError("QuantBNThresholds: non-positive running sigma");
    t.upper[i] = static_cast<double>(mu[i]) + static_cast<double>(sigma[i]) * t.upper[i];
    t.lower[i] = static_cast<double>(mu[i]) + static_cast<double>(sigma[i]) * t.lower[i];
  }
  return t;
}

double quantize_bn_scalar(double x, const QuantBNThresholds& thr, int channel) {
  const size_t c = static_cast<size_t>(channel);
  // Boundary hits quantize away from zero, matching the round rule.
  if (thr.gamma_sign[c] > 0) {
    if (x >= thr.upper[c]) return 0.5;
    if (x <= thr.lower[c]) return -0.5;
    return 0.0;
  }
  if (x <= thr.upper[c]) return 0.5;
  if (x >= thr.lower[c]) return -0.5;
  return 0.0;
}

DenseTensor quantize_bn_apply(const DenseTensor& x, const QuantBNThresholds& thresholds) {
  if (x.rank() != 2 && x.rank() != 3)
    throw DimensionError("quantize_bn_apply: expected rank-2 or rank-3 input");
  const int c = x.dim(1);
  if (c != thresholds.channels()) throw DimensionError("quantize_bn_apply: channel mismatch");
  const int n = x.dim(0);
  const int64_t inner = x.rank() == 3 ? x.dim(2) : 1;

  DenseTensor out(x.shape);
  const float* in = x.raw();
  float* y = out.raw();
#pragma omp parallel for collapse(2) schedule(static)
  for (int b = 0; b < n; ++b) {
    for (int ch = 0; ch < c; ++ch) {
      const int64_t base = (static_cast<int64_t>(b) * c + ch) * inner;
      for (int64_t i = 0; i < inner; ++i) {
        y[base + i] = static_cast<float>(quantize_bn_scalar(in[base + i], thresholds, ch));
      }
    }
  }
  return out;
}

int64_t packed_storage_bytes(const TernaryTensor& t) {
  const int64_t plane_bytes =
      static_cast<int64_t>(t.sign_plane.size() + t.value_plane.size()) * 8;
  const int64_t header = 8 /*alpha*/ + 4 * static_cast<int64_t>(t.shape.size()) + 3 /*kind,k,rank*/;
  return plane_bytes + header;
}

}  // namespace dfternet
