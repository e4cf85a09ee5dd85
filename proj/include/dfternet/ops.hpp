#pragma once

#include <cstdint>
#include <vector>

#include "dfternet/tensor.hpp"

namespace dfternet {

// Valid (no padding) 1-D convolution over the trailing time axis.
// input [N, C_in, T], kernel [C_out, C_in, KH] -> [N, C_out, T_out],
// T_out = (T - KH) / stride + 1.
DenseTensor conv1d_forward(const DenseTensor& input, const DenseTensor& kernel, int stride);

// Gradients of conv1d_forward. Either output pointer may be null to skip it.
void conv1d_backward(const DenseTensor& grad_out, const DenseTensor& input,
                     const DenseTensor& kernel, int stride,
                     DenseTensor* grad_input, DenseTensor* grad_kernel);

struct MaxPoolResult {
  DenseTensor output;
  std::vector<int32_t> argmax;  // source index along T per output element
};

// Non-overlapping max pool along the trailing axis; trailing remainder is
// truncated. Ties resolve to the first (lowest-index) maximum. pool == 1 is
// the identity.
MaxPoolResult maxpool1d(const DenseTensor& input, int pool);

DenseTensor maxpool1d_backward(const DenseTensor& grad_out, const std::vector<int32_t>& argmax,
                               const Shape& input_shape, int pool);

struct BatchNormState {
  std::vector<float> gamma;
  std::vector<float> beta;
  std::vector<float> running_mu;
  std::vector<float> running_sigma;
  float momentum = 0.1f;
  float epsilon_stabilizer = 1e-5f;

  static BatchNormState init(int channels);
  int channels() const { return static_cast<int>(gamma.size()); }
};

struct BatchNormCache {
  DenseTensor xhat;
  std::vector<float> sigma_batch;  // stabilized per-channel batch std
};

// Channel axis is dim 1; statistics run over all other axes. Training mode
// normalizes with batch statistics and EMA-updates the running ones;
// inference mode uses the running statistics.
DenseTensor batchnorm_forward(const DenseTensor& input, BatchNormState& state, bool training,
                              BatchNormCache* cache);

struct BatchNormGrads {
  DenseTensor grad_input;
  std::vector<float> grad_gamma;
  std::vector<float> grad_beta;
};

BatchNormGrads batchnorm_backward(const DenseTensor& grad_out, const BatchNormCache& cache,
                                  const BatchNormState& state);

// input [B, N_in] x weights [N_in, N_out] + bias -> [B, N_out]. bias may be null.
DenseTensor dense_forward(const DenseTensor& input, const DenseTensor& weights,
                          const std::vector<float>* bias);

void dense_backward(const DenseTensor& grad_out, const DenseTensor& input,
                    const DenseTensor& weights, DenseTensor* grad_input,
                    DenseTensor* grad_weights, std::vector<float>* grad_bias);

struct SoftmaxXentResult {
  double loss = 0.0;
  DenseTensor grad_logits;
  DenseTensor probs;
};

// Mean cross-entropy over the batch with log-sum-exp stabilization.
// grad = (softmax - onehot) / batch.
SoftmaxXentResult softmax_cross_entropy(const DenseTensor& logits, const std::vector<int>& labels);

}  // namespace dfternet
