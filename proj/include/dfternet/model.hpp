#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dfternet/bitpack.hpp"
#include "dfternet/data.hpp"
#include "dfternet/fusion.hpp"
#include "dfternet/ops.hpp"
#include "dfternet/quantize.hpp"
#include "dfternet/rng.hpp"

namespace dfternet {

// Three temporal conv stages, shared filter shapes across branches, one
// hidden dense layer, one output layer. Each sensor channel runs through the
// conv stack independently (the kernels are 1 wide along the sensor axis), so
// channels fold into the conv batch dimension.
struct NetworkConfig {
  std::vector<int> conv_filters = {50, 40, 30};
  std::vector<int> conv_kernels = {11, 10, 6};
  std::vector<int> conv_strides = {1, 1, 1};
  std::vector<int> pools = {2, 3, 1};  // pool 1 is a pass-through
  int dense_units = 1000;
  int classes = 0;
  int window_t = 64;

  int stages() const { return static_cast<int>(conv_filters.size()); }
  // Time length entering stage i (0-based); stages() entries plus the final.
  std::vector<int> time_profile() const;
  int conv_out_time() const { return time_profile().back(); }
  int branch_feature_dim(int branch_channels) const;
  void validate() const;
};

struct OptimState {
  std::vector<float> eg2;   // EMA of squared gradients
  std::vector<float> edx2;  // EMA of squared updates
  void init(size_t n) {
    eg2.assign(n, 0.0f);
    edx2.assign(n, 0.0f);
  }
};

struct ConvLayerState {
  DenseTensor kernel;  // [C_out, C_in, KH]
  BatchNormState bn;
  OptimState opt_kernel, opt_gamma, opt_beta;
};

struct DenseLayerState {
  DenseTensor weights;  // [N_in, N_out]
  std::vector<float> bias;
  BatchNormState bn;  // unused on the output layer
  OptimState opt_w, opt_bias, opt_gamma, opt_beta;
};

struct TrainHyper {
  int epochs = 50;
  int batch = 1024;
  uint64_t seed = 1;
  uint64_t phi_seed = 1;
  double eta0 = 1.0;
  double lambda = 1.0;  // per-step learning-rate decay
  double rho = 0.95;
  double ada_eps = 1e-6;
  double target_f1 = -1.0;  // stop once validation F1 reaches this (off if < 0)
};

// Full-precision shadow weights plus everything the training loop mutates.
// Ternarization happens afresh every forward pass and never writes back.
struct TrainState {
  NetworkConfig net;
  FusionSpec fusion;
  QuantConfig qcfg;
  std::vector<std::vector<ConvLayerState>> branch_convs;  // [branch][stage]
  DenseLayerState fc1;
  DenseLayerState fcout;
  std::vector<std::vector<double>> eps_a_conv;  // [branch][stage]
  double eps_a_fc1 = 1.0;
  double eta = 1.0;
  int epoch = 0;
  TrainHyper hyper;
  bool alpha_warning = false;  // a layer quantized to all-zero at least once
};

TrainState init_train_state(const NetworkConfig& net, const FusionSpec& fusion,
                            const QuantConfig& qcfg, const TrainHyper& hyper);

struct LayerCache {
  DenseTensor ternary;
  double alpha = 0.0;
  Shape conv_out_shape;
  std::vector<int32_t> pool_argmax;
  BatchNormCache bn_cache;
  DenseTensor bn_out;  // pre-quantization activations, the STE mask input
  DenseTensor aq;
};

struct BranchCache {
  DenseTensor x0;
  std::vector<LayerCache> layers;
  DenseTensor features;
};

struct ForwardCache {
  int batch = 0;
  std::vector<BranchCache> branches;
  FusionWeights phi;
  DenseTensor fused;
  DenseTensor fc1_ternary;
  double fc1_alpha = 0.0;
  BatchNormCache fc1_bn_cache;
  DenseTensor fc1_bn_out;
  DenseTensor fc1_aq;
  DenseTensor fcout_ternary;
  double fcout_alpha = 0.0;
};

// One quantized forward pass in training mode. Returns logits.
DenseTensor forward_train(const std::vector<const DenseTensor*>& windows, TrainState& state,
                          Rng& phi_rng, ForwardCache& cache);

struct Gradients {
  struct ConvGrads {
    DenseTensor kernel;
    std::vector<float> gamma, beta;
  };
  std::vector<std::vector<ConvGrads>> branch;
  DenseTensor fc1_w;
  std::vector<float> fc1_bias, fc1_gamma, fc1_beta;
  DenseTensor fcout_w;
  std::vector<float> fcout_bias;
};

Gradients backward_train(const DenseTensor& grad_logits, const ForwardCache& cache,
                         const TrainState& state);

// AdaDelta over every trainable tensor, then eta <- lambda * eta.
void adadelta_step(TrainState& state, const Gradients& grads);

// Single-parameter-vector AdaDelta update (exposed for tests).
void adadelta_update(std::vector<float>& param, const std::vector<float>& grad, OptimState& opt,
                     double rho, double eps, double eta);

// Run-time model: packed ternary layers with folded BN thresholds.
struct PackedConvLayer {
  TernaryTensor kernel;
  QuantBNThresholds thresholds;  // raw-space, two reals per output channel
};

struct PackedDenseLayer {
  TernaryTensor weights;
  std::vector<double> bias;
  bool has_bn = false;
  QuantBNThresholds thresholds;
};

struct PackedModel {
  uint16_t version = 1;
  int window_t = 0;
  int channels = 0;
  int classes = 0;
  FusionSpec fusion;
  std::vector<int> pools;
  std::vector<int> strides;
  std::vector<std::vector<PackedConvLayer>> branch_convs;
  PackedDenseLayer fc1;
  PackedDenseLayer fcout;

  int64_t weight_count() const;
  int64_t packed_bytes() const;  // serialized size
};

// Quantize every layer once, fold BN into thresholds, pack the planes.
PackedModel export_packed(const TrainState& state);

struct InferResult {
  std::vector<int> predictions;
  DenseTensor probs;  // [N, classes]
};

// Popcount inference: dense real conv for the first stage, packed kernels
// afterwards, threshold-form BN, run-time dynamic fusion sampled once from
// phi_seed.
InferResult infer_packed(const PackedModel& model, const std::vector<const DenseTensor*>& windows,
                         uint64_t phi_seed);

// Train-time quantized forward in inference mode (dense arithmetic route);
// the independent oracle the packed path is checked against.
InferResult infer_eval_dense(const TrainState& state, const std::vector<const DenseTensor*>& windows,
                             uint64_t phi_seed);

struct EpochMetrics {
  int epoch = 0;
  double train_loss = 0.0;
  double val_f1 = 0.0;
  std::vector<double> eps_a;
};

struct TrainResult {
  TrainState state;
  std::vector<EpochMetrics> history;
  std::vector<std::string> eps_names;
  double final_val_f1 = 0.0;
};

// Stratified deterministic split: per class, the leading windows train and
// the trailing `val_fraction` validate.
void split_dataset(const WindowDataset& all, double val_fraction, WindowDataset* train,
                   WindowDataset* val);

TrainResult train(const WindowDataset& train_set, const WindowDataset& val_set,
                  const NetworkConfig& net, const FusionSpec& fusion, const QuantConfig& qcfg,
                  const TrainHyper& hyper);

std::string metrics_csv(const TrainResult& result);

}  // namespace dfternet
