#include "dfternet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace dfternet {

namespace {

void require_rank3(const DenseTensor& t, const char* where) {
  if (t.rank() != 3) throw DimensionError(std::string(where) + ": expected rank-3 tensor");
}

}  // namespace

DenseTensor conv1d_forward(const DenseTensor& input, const DenseTensor& kernel, int stride) {
  require_rank3(input, "conv1d_forward input");
  require_rank3(kernel, "conv1d_forward kernel");
  if (stride < 1) throw ParameterError("conv1d_forward: stride must be >= 1");
  const int n = input.dim(0), cin = input.dim(1), t_in = input.dim(2);
  const int cout = kernel.dim(0), kcin = kernel.dim(1), kh = kernel.dim(2);
  if (cin != kcin) throw DimensionError("conv1d_forward: input/kernel channel mismatch");
  if (t_in < kh) throw DimensionError("conv1d_forward: time axis shorter than kernel");
  const int t_out = (t_in - kh) / stride + 1;

  DenseTensor out({n, cout, t_out});
  const float* x = input.raw();
  const float* w = kernel.raw();
  float* y = out.raw();

#pragma omp parallel for collapse(2) schedule(static)
  for (int b = 0; b < n; ++b) {
    for (int co = 0; co < cout; ++co) {
      float* row = y + (static_cast<int64_t>(b) * cout + co) * t_out;
      for (int t = 0; t < t_out; ++t) row[t] = 0.0f;
      for (int ci = 0; ci < cin; ++ci) {
        const float* xrow = x + (static_cast<int64_t>(b) * cin + ci) * t_in;
        const float* wrow = w + (static_cast<int64_t>(co) * cin + ci) * kh;
        for (int k = 0; k < kh; ++k) {
          const float wk = wrow[k];
          if (stride == 1) {
            const float* xs = xrow + k;
            for (int t = 0; t < t_out; ++t) row[t] += wk * xs[t];
          } else {
            for (int t = 0; t < t_out; ++t) row[t] += wk * xrow[t * stride + k];
          }
        }
      }
    }
  }
  return out;
}

void conv1d_backward(const DenseTensor& grad_out, const DenseTensor& input,
                     const DenseTensor& kernel, int stride,
                     DenseTensor* grad_input, DenseTensor* grad_kernel) {
  require_rank3(grad_out, "conv1d_backward grad_out");
  require_rank3(input, "conv1d_backward input");
  require_rank3(kernel, "conv1d_backward kernel");
  const int n = input.dim(0), cin = input.dim(1), t_in = input.dim(2);
  const int cout = kernel.dim(0), kh = kernel.dim(2);
  if (kernel.dim(1) != cin) throw DimensionError("conv1d_backward: channel mismatch");
  const int t_out = (t_in - kh) / stride + 1;
  if (grad_out.dim(0) != n || grad_out.dim(1) != cout || grad_out.dim(2) != t_out)
    throw DimensionError("conv1d_backward: grad_out shape inconsistent with forward");

  const float* g = grad_out.raw();
  const float* x = input.raw();
  const float* w = kernel.raw();

  if (grad_input) {
    *grad_input = DenseTensor(input.shape);
    float* gi = grad_input->raw();
    // Each (b, ci) row is owned by one thread; scatter within it is serial.
#pragma omp parallel for collapse(2) schedule(static)
    for (int b = 0; b < n; ++b) {
      for (int ci = 0; ci < cin; ++ci) {
        float* girow = gi + (static_cast<int64_t>(b) * cin + ci) * t_in;
        for (int co = 0; co < cout; ++co) {
          const float* grow = g + (static_cast<int64_t>(b) * cout + co) * t_out;
          const float* wrow = w + (static_cast<int64_t>(co) * cin + ci) * kh;
          for (int k = 0; k < kh; ++k) {
            const float wk = wrow[k];
            for (int t = 0; t < t_out; ++t) girow[t * stride + k] += wk * grow[t];
          }
        }
      }
    }
  }

  if (grad_kernel) {
    *grad_kernel = DenseTensor(kernel.shape);
    float* gw = grad_kernel->raw();
#pragma omp parallel for collapse(2) schedule(static)
    for (int co = 0; co < cout; ++co) {
      for (int ci = 0; ci < cin; ++ci) {
        float* gwrow = gw + (static_cast<int64_t>(co) * cin + ci) * kh;
        for (int k = 0; k < kh; ++k) {
          float acc = 0.0f;
          for (int b = 0; b < n; ++b) {
            const float* grow = g + (static_cast<int64_t>(b) * cout + co) * t_out;
            const float* xrow = x + (static_cast<int64_t>(b) * cin + ci) * t_in + k;
            if (stride == 1) {
              for (int t = 0; t < t_out; ++t) acc += grow[t] * xrow[t];
            } else {
              for (int t = 0; t < t_out; ++t) acc += grow[t] * xrow[t * stride];
            }
          }
          gwrow[k] = acc;
        }
      }
    }
  }
}

MaxPoolResult maxpool1d(const DenseTensor& input, int pool) {
  require_rank3(input, "maxpool1d input");
  if (pool < 1) throw ParameterError("maxpool1d: pool must be >= 1");
  const int n = input.dim(0), c = input.dim(1), t_in = input.dim(2);
  const int t_out = t_in / pool;

  MaxPoolResult res;
  res.output = DenseTensor({n, c, t_out});
  res.argmax.assign(static_cast<size_t>(n) * c * t_out, 0);
  const float* x = input.raw();
  float* y = res.output.raw();
  int32_t* amax = res.argmax.data();

#pragma omp parallel for collapse(2) schedule(static)
  for (int b = 0; b < n; ++b) {
    for (int ch = 0; ch < c; ++ch) {
      const float* xrow = x + (static_cast<int64_t>(b) * c + ch) * t_in;
      const int64_t obase = (static_cast<int64_t>(b) * c + ch) * t_out;
      for (int t = 0; t < t_out; ++t) {
        int best = t * pool;
        float bestv = xrow[best];
        for (int j = 1; j < pool; ++j) {
          const int idx = t * pool + j;
          if (xrow[idx] > bestv) {
            bestv = xrow[idx];
            best = idx;
          }
        }
        y[obase + t] = bestv;
        amax[obase + t] = best;
      }
    }
  }
  return res;
}

DenseTensor maxpool1d_backward(const DenseTensor& grad_out, const std::vector<int32_t>& argmax,
                               const Shape& input_shape, int pool) {
  if (pool < 1) throw ParameterError("maxpool1d_backward: pool must be >= 1");
  DenseTensor grad_in(input_shape);
  const int n = grad_out.dim(0), c = grad_out.dim(1), t_out = grad_out.dim(2);
  const int t_in = input_shape[2];
  if (argmax.size() != grad_out.data.size())
    throw DimensionError("maxpool1d_backward: argmax length mismatch");
  const float* g = grad_out.raw();
  float* gi = grad_in.raw();
#pragma omp parallel for collapse(2) schedule(static)
  for (int b = 0; b < n; ++b) {
    for (int ch = 0; ch < c; ++ch) {
      const int64_t obase = (static_cast<int64_t>(b) * c + ch) * t_out;
      float* girow = gi + (static_cast<int64_t>(b) * c + ch) * t_in;
      for (int t = 0; t < t_out; ++t) girow[argmax[obase + t]] += g[obase + t];
    }
  }
  return grad_in;
}

BatchNormState BatchNormState::init(int channels) {
  BatchNormState s;
  s.gamma.assign(channels, 1.0f);
  s.beta.assign(channels, 0.0f);
  s.running_mu.assign(channels, 0.0f);
  s.running_sigma.assign(channels, 1.0f);
  return s;
}

DenseTensor batchnorm_forward(const DenseTensor& input, BatchNormState& state, bool training,
                              BatchNormCache* cache) {
  require_rank3(input, "batchnorm_forward input");
  const int n = input.dim(0), c = input.dim(1), t = input.dim(2);
  if (c != state.channels()) throw DimensionError("batchnorm_forward: channel count mismatch");

  DenseTensor out(input.shape);
  const float* x = input.raw();
  float* y = out.raw();
  const int64_t inner = t;
  const int64_t per_channel = static_cast<int64_t>(n) * t;

  if (cache) {
    cache->xhat = DenseTensor(input.shape);
    cache->sigma_batch.assign(c, 0.0f);
  }

  if (training) {
#pragma omp parallel for schedule(static)
    for (int ch = 0; ch < c; ++ch) {
      double sum = 0.0, sumsq = 0.0;
      for (int b = 0; b < n; ++b) {
        const float* row = x + (static_cast<int64_t>(b) * c + ch) * inner;
        for (int i = 0; i < t; ++i) {
          sum += row[i];
          sumsq += static_cast<double>(row[i]) * row[i];
        }
      }
      const double mu = sum / static_cast<double>(per_channel);
      const double var = sumsq / static_cast<double>(per_channel) - mu * mu;
      const float sigma =
          static_cast<float>(std::sqrt(std::max(var, 0.0) + state.epsilon_stabilizer));
      const float muf = static_cast<float>(mu);
      const float g = state.gamma[ch], bshift = state.beta[ch];
      float* xh = cache ? cache->xhat.raw() : nullptr;
      for (int b = 0; b < n; ++b) {
        const int64_t base = (static_cast<int64_t>(b) * c + ch) * inner;
        for (int i = 0; i < t; ++i) {
          const float xhat = (x[base + i] - muf) / sigma;
          if (xh) xh[base + i] = xhat;
          y[base + i] = g * xhat + bshift;
        }
      }
      if (cache) cache->sigma_batch[ch] = sigma;
      const float m = state.momentum;
      state.running_mu[ch] = (1.0f - m) * state.running_mu[ch] + m * muf;
      state.running_sigma[ch] = (1.0f - m) * state.running_sigma[ch] + m * sigma;
    }
  } else {
#pragma omp parallel for schedule(static)
    for (int ch = 0; ch < c; ++ch) {
      const float mu = state.running_mu[ch];
      const float sigma = state.running_sigma[ch];
      const float g = state.gamma[ch], bshift = state.beta[ch];
      for (int b = 0; b < n; ++b) {
        const int64_t base = (static_cast<int64_t>(b) * c + ch) * inner;
        for (int i = 0; i < t; ++i) y[base + i] = g * ((x[base + i] - mu) / sigma) + bshift;
      }
    }
  }
  return out;
}

BatchNormGrads batchnorm_backward(const DenseTensor& grad_out, const BatchNormCache& cache,
                                  const BatchNormState& state) {
  const int n = grad_out.dim(0), c = grad_out.dim(1), t = grad_out.dim(2);
  require_same_shape(grad_out, cache.xhat, "batchnorm_backward");

  BatchNormGrads res;
  res.grad_input = DenseTensor(grad_out.shape);
  res.grad_gamma.assign(c, 0.0f);
  res.grad_beta.assign(c, 0.0f);

  const float* g = grad_out.raw();
  const float* xh = cache.xhat.raw();
  float* gi = res.grad_input.raw();
  const double count = static_cast<double>(n) * t;

#pragma omp parallel for schedule(static)
  for (int ch = 0; ch < c; ++ch) {
    double sum_g = 0.0, sum_gx = 0.0;
    for (int b = 0; b < n; ++b) {
      const int64_t base = (static_cast<int64_t>(b) * c + ch) * t;
      for (int i = 0; i < t; ++i) {
        sum_g += g[base + i];
        sum_gx += static_cast<double>(g[base + i]) * xh[base + i];
      }
    }
    res.grad_gamma[ch] = static_cast<float>(sum_gx);
    res.grad_beta[ch] = static_cast<float>(sum_g);
    const float gamma = state.gamma[ch];
    const float sigma = cache.sigma_batch[ch];
    const float mean_g = static_cast<float>(sum_g / count);
    const float mean_gx = static_cast<float>(sum_gx / count);
    for (int b = 0; b < n; ++b) {
      const int64_t base = (static_cast<int64_t>(b) * c + ch) * t;
      for (int i = 0; i < t; ++i) {
        gi[base + i] = gamma / sigma * (g[base + i] - mean_g - xh[base + i] * mean_gx);
      }
    }
  }
  return res;
}

DenseTensor dense_forward(const DenseTensor& input, const DenseTensor& weights,
                          const std::vector<float>* bias) {
  if (input.rank() != 2 || weights.rank() != 2)
    throw DimensionError("dense_forward: expected rank-2 tensors");
  const int b = input.dim(0), n_in = input.dim(1);
  const int w_in = weights.dim(0), n_out = weights.dim(1);
  if (n_in != w_in) throw DimensionError("dense_forward: input/weight dimension mismatch");
  if (bias && static_cast<int>(bias->size()) != n_out)
    throw DimensionError("dense_forward: bias length mismatch");

  DenseTensor out({b, n_out});
  const float* x = input.raw();
  const float* w = weights.raw();
  float* y = out.raw();

#pragma omp parallel for schedule(static)
  for (int row = 0; row < b; ++row) {
    float* yrow = y + static_cast<int64_t>(row) * n_out;
    if (bias) {
      for (int j = 0; j < n_out; ++j) yrow[j] = (*bias)[j];
    } else {
      for (int j = 0; j < n_out; ++j) yrow[j] = 0.0f;
    }
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

void dense_backward(const DenseTensor& grad_out, const DenseTensor& input,
                    const DenseTensor& weights, DenseTensor* grad_input,
                    DenseTensor* grad_weights, std::vector<float>* grad_bias) {
  const int b = input.dim(0), n_in = input.dim(1), n_out = weights.dim(1);
  if (grad_out.dim(0) != b || grad_out.dim(1) != n_out)
    throw DimensionError("dense_backward: grad_out shape mismatch");
  const float* g = grad_out.raw();
  const float* x = input.raw();
  const float* w = weights.raw();

  if (grad_input) {
    *grad_input = DenseTensor(input.shape);
    float* gi = grad_input->raw();
#pragma omp parallel for schedule(static)
    for (int row = 0; row < b; ++row) {
      const float* grow = g + static_cast<int64_t>(row) * n_out;
      float* girow = gi + static_cast<int64_t>(row) * n_in;
      for (int i = 0; i < n_in; ++i) {
        const float* wrow = w + static_cast<int64_t>(i) * n_out;
        float acc = 0.0f;
        for (int j = 0; j < n_out; ++j) acc += grow[j] * wrow[j];
        girow[i] = acc;
      }
    }
  }

  if (grad_weights) {
    *grad_weights = DenseTensor(weights.shape);
    float* gw = grad_weights->raw();
#pragma omp parallel for schedule(static)
    for (int i = 0; i < n_in; ++i) {
      float* gwrow = gw + static_cast<int64_t>(i) * n_out;
      for (int row = 0; row < b; ++row) {
        const float xi = x[static_cast<int64_t>(row) * n_in + i];
        if (xi == 0.0f) continue;
        const float* grow = g + static_cast<int64_t>(row) * n_out;
        for (int j = 0; j < n_out; ++j) gwrow[j] += xi * grow[j];
      }
    }
  }

  if (grad_bias) {
    grad_bias->assign(n_out, 0.0f);
    for (int row = 0; row < b; ++row) {
      const float* grow = g + static_cast<int64_t>(row) * n_out;
      for (int j = 0; j < n_out; ++j) (*grad_bias)[j] += grow[j];
    }
  }
}

SoftmaxXentResult softmax_cross_entropy(const DenseTensor& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2) throw DimensionError("softmax_cross_entropy: expected [batch, classes]");
  const int b = logits.dim(0), g = logits.dim(1);
  if (static_cast<int>(labels.size()) != b)
    throw DimensionError("softmax_cross_entropy: label count mismatch");

  SoftmaxXentResult res;
  res.grad_logits = DenseTensor(logits.shape);
  res.probs = DenseTensor(logits.shape);
  const float* o = logits.raw();
  float* gr = res.grad_logits.raw();
  float* pr = res.probs.raw();
  double loss = 0.0;

  for (int row = 0; row < b; ++row) {
    const int label = labels[static_cast<size_t>(row)];
    if (label < 0 || label >= g) throw ParameterError("softmax_cross_entropy: label out of range");
    const float* orow = o + static_cast<int64_t>(row) * g;
    double m = orow[0];
    for (int j = 1; j < g; ++j) m = std::max(m, static_cast<double>(orow[j]));
    double z = 0.0;
    for (int j = 0; j < g; ++j) z += std::exp(orow[j] - m);
    const double logz = std::log(z);
    loss += logz - (orow[label] - m);
    for (int j = 0; j < g; ++j) {
      const double p = std::exp(orow[j] - m) / z;
      pr[static_cast<int64_t>(row) * g + j] = static_cast<float>(p);
      const double grad = (p - (j == label ? 1.0 : 0.0)) / b;
      gr[static_cast<int64_t>(row) * g + j] = static_cast<float>(grad);
    }
  }
  res.loss = loss / b;
  return res;
}

}  // namespace dfternet
