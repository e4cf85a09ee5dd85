#include "dfternet/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <sstream>

namespace dfternet {

std::vector<int> NetworkConfig::time_profile() const {
  std::vector<int> t;
  t.push_back(window_t);
  int cur = window_t;
  for (int i = 0; i < stages(); ++i) {
    cur = (cur - conv_kernels[static_cast<size_t>(i)]) / conv_strides[static_cast<size_t>(i)] + 1;
    cur = cur / pools[static_cast<size_t>(i)];
    t.push_back(cur);
  }
  return t;
}

int NetworkConfig::branch_feature_dim(int branch_channels) const {
  return branch_channels * conv_filters.back() * conv_out_time();
}

void NetworkConfig::validate() const {
  if (classes < 2) throw ConfigError("network: need at least two classes");
  if (stages() < 1) throw ConfigError("network: need at least one conv stage");
  if (conv_kernels.size() != conv_filters.size() || conv_strides.size() != conv_filters.size() ||
      pools.size() != conv_filters.size())
    throw ConfigError("network: per-stage arrays have inconsistent lengths");
  const std::vector<int> t = time_profile();
  for (size_t i = 1; i < t.size(); ++i) {
    if (t[i] < 1)
      throw ConfigError("network: window length " + std::to_string(window_t) +
                        " collapses to zero by conv stage " + std::to_string(i));
  }
  if (dense_units < 1) throw ConfigError("network: dense layer needs at least one unit");
}

namespace {

DenseTensor reshaped(DenseTensor t, Shape s) {
  if (shape_numel(s) != t.numel()) throw DimensionError("reshape: element count mismatch");
  t.shape = std::move(s);
  return t;
}

// v <- float(alpha * v), evaluated in double; the expression every route
// (train, dense eval, packed) shares.
void scale_by_alpha(DenseTensor& t, double alpha) {
  float* p = t.raw();
  const int64_t n = t.numel();
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) p[i] = static_cast<float>(alpha * static_cast<double>(p[i]));
}

// v <- float(alpha * v + bias[col]) for rank-2 tensors.
void scale_alpha_bias(DenseTensor& t, double alpha, const std::vector<float>& bias) {
  const int rows = t.dim(0), cols = t.dim(1);
  float* p = t.raw();
#pragma omp parallel for schedule(static)
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      const int64_t i = static_cast<int64_t>(r) * cols + c;
      p[i] = static_cast<float>(alpha * static_cast<double>(p[i]) +
                                static_cast<double>(bias[static_cast<size_t>(c)]));
    }
  }
}

// Branch slice of a window batch, one conv row per sensor channel:
// [B windows of T x S] -> [B * S_p, 1, T].
DenseTensor build_branch_input(const std::vector<const DenseTensor*>& windows,
                               const BranchSpec& branch, int window_t, int total_channels) {
  const int b = static_cast<int>(windows.size());
  const int sp = branch.channels();
  DenseTensor out({b * sp, 1, window_t});
  float* y = out.raw();
  for (int w = 0; w < b; ++w) {
    const DenseTensor& win = *windows[static_cast<size_t>(w)];
    if (win.rank() != 2 || win.dim(0) != window_t || win.dim(1) != total_channels)
      throw DimensionError("window shape does not match the network configuration");
    const float* x = win.raw();
    for (int s = 0; s < sp; ++s) {
      float* row = y + (static_cast<int64_t>(w) * sp + s) * window_t;
      const int c = branch.chan_begin + s;
      for (int t = 0; t < window_t; ++t) row[t] = x[static_cast<int64_t>(t) * total_channels + c];
    }
  }
  return out;
}

// [B * S_p, C, T] activations -> [B, S_p * C * T] features, (s, c, t) order.
DenseTensor flatten_branch_features(const DenseTensor& aq, int batch, int sp) {
  const int c = aq.dim(1), t = aq.dim(2);
  const int64_t chunk = static_cast<int64_t>(c) * t;
  DenseTensor out({batch, static_cast<int>(sp * chunk)});
  for (int b = 0; b < batch; ++b) {
    std::memcpy(out.raw() + static_cast<int64_t>(b) * sp * chunk,
                aq.raw() + static_cast<int64_t>(b) * sp * chunk, sizeof(float) * sp * chunk);
  }
  return out;
}

DenseTensor unflatten_branch_features(const DenseTensor& grad_feat, int sp, int c, int t) {
  const int batch = grad_feat.dim(0);
  DenseTensor out({batch * sp, c, t});
  std::memcpy(out.raw(), grad_feat.raw(), sizeof(float) * grad_feat.numel());
  return out;
}

// Direct-arithmetic route of the quantized batch norm used at inference:
// normalize with running stats, affine, quantize, all in double.
DenseTensor bn_quantize_eval(const DenseTensor& x, const BatchNormState& bn, double eps_a) {
  const int c = x.dim(1);
  if (c != bn.channels()) throw DimensionError("bn_quantize_eval: channel mismatch");
  const int n = x.dim(0);
  const int64_t inner = x.rank() == 3 ? x.dim(2) : 1;
  DenseTensor out(x.shape);
  const float* in = x.raw();
  float* y = out.raw();
#pragma omp parallel for collapse(2) schedule(static)
  for (int b = 0; b < n; ++b) {
    for (int ch = 0; ch < c; ++ch) {
      const double mu = bn.running_mu[static_cast<size_t>(ch)];
      const double sigma = bn.running_sigma[static_cast<size_t>(ch)];
      const double g = bn.gamma[static_cast<size_t>(ch)];
      const double beta = bn.beta[static_cast<size_t>(ch)];
      const int64_t base = (static_cast<int64_t>(b) * c + ch) * inner;
      for (int64_t i = 0; i < inner; ++i) {
        const double z = g * ((static_cast<double>(in[base + i]) - mu) / sigma) + beta;
        y[base + i] = static_cast<float>(quantize_scalar(z, eps_a, 2));
      }
    }
  }
  return out;
}

DenseTensor softmax_rows(const DenseTensor& logits) {
  const int n = logits.dim(0), g = logits.dim(1);
  DenseTensor probs(logits.shape);
  const float* o = logits.raw();
  float* p = probs.raw();
  for (int r = 0; r < n; ++r) {
    const float* row = o + static_cast<int64_t>(r) * g;
    double m = row[0];
    for (int j = 1; j < g; ++j) m = std::max(m, static_cast<double>(row[j]));
    double z = 0.0;
    for (int j = 0; j < g; ++j) z += std::exp(row[j] - m);
    for (int j = 0; j < g; ++j)
      p[static_cast<int64_t>(r) * g + j] = static_cast<float>(std::exp(row[j] - m) / z);
  }
  return probs;
}

std::vector<int> argmax_rows(const DenseTensor& t) {
  const int n = t.dim(0), g = t.dim(1);
  std::vector<int> out(static_cast<size_t>(n));
  const float* p = t.raw();
  for (int r = 0; r < n; ++r) {
    const float* row = p + static_cast<int64_t>(r) * g;
    int best = 0;
    for (int j = 1; j < g; ++j)
      if (row[j] > row[best]) best = j;
    out[static_cast<size_t>(r)] = best;
  }
  return out;
}

void glorot_init(DenseTensor& t, int fan_in, int fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / (fan_in + fan_out));
  for (float& v : t.data) v = static_cast<float>(rng.uniform(-bound, bound));
}

std::vector<BranchSpec> effective_branches(const FusionSpec& fusion, int total_channels) {
  if (fusion.mode == FusionMode::early) {
    // One combined sub-network over the full channel span.
    return {BranchSpec{"all", 0, total_channels, false}};
  }
  return fusion.branches;
}

}  // namespace

TrainState init_train_state(const NetworkConfig& net, const FusionSpec& fusion,
                            const QuantConfig& qcfg, const TrainHyper& hyper) {
  net.validate();
  if (fusion.branches.empty()) throw ConfigError("fusion spec has no branches");
  const NetworkConfig& n = net;
  TrainState st;
  st.net = net;
  st.fusion = fusion;
  const int total_channels = fusion.branches.back().chan_end;
  st.fusion.branches = effective_branches(fusion, total_channels);
  st.fusion.validate(total_channels);
  st.qcfg = qcfg;
  st.hyper = hyper;
  st.eta = hyper.eta0;

  Rng rng(hyper.seed);
  const size_t nbranch = st.fusion.branches.size();
  st.branch_convs.resize(nbranch);
  st.eps_a_conv.assign(nbranch, std::vector<double>(static_cast<size_t>(n.stages()), 1.0));
  for (size_t p = 0; p < nbranch; ++p) {
    int cin = 1;
    for (int i = 0; i < n.stages(); ++i) {
      ConvLayerState layer;
      const int cout = n.conv_filters[static_cast<size_t>(i)];
      const int kh = n.conv_kernels[static_cast<size_t>(i)];
      layer.kernel = DenseTensor({cout, cin, kh});
      glorot_init(layer.kernel, cin * kh, cout * kh, rng);
      layer.bn = BatchNormState::init(cout);
      layer.opt_kernel.init(layer.kernel.data.size());
      layer.opt_gamma.init(static_cast<size_t>(cout));
      layer.opt_beta.init(static_cast<size_t>(cout));
      st.branch_convs[p].push_back(std::move(layer));
      cin = cout;
    }
  }

  int fused_dim = 0;
  for (const BranchSpec& b : st.fusion.branches) fused_dim += n.branch_feature_dim(b.channels());

  st.fc1.weights = DenseTensor({fused_dim, n.dense_units});
  glorot_init(st.fc1.weights, fused_dim, n.dense_units, rng);
  st.fc1.bias.assign(static_cast<size_t>(n.dense_units), 0.0f);
  st.fc1.bn = BatchNormState::init(n.dense_units);
  st.fc1.opt_w.init(st.fc1.weights.data.size());
  st.fc1.opt_bias.init(st.fc1.bias.size());
  st.fc1.opt_gamma.init(st.fc1.bn.gamma.size());
  st.fc1.opt_beta.init(st.fc1.bn.beta.size());

  st.fcout.weights = DenseTensor({n.dense_units, n.classes});
  glorot_init(st.fcout.weights, n.dense_units, n.classes, rng);
  st.fcout.bias.assign(static_cast<size_t>(n.classes), 0.0f);
  st.fcout.opt_w.init(st.fcout.weights.data.size());
  st.fcout.opt_bias.init(st.fcout.bias.size());
  return st;
}

DenseTensor forward_train(const std::vector<const DenseTensor*>& windows, TrainState& state,
                          Rng& phi_rng, ForwardCache& cache) {
  const NetworkConfig& net = state.net;
  const int batch = static_cast<int>(windows.size());
  if (batch == 0) throw ConfigError("forward_train: empty batch");
  const int total_channels = state.fusion.branches.back().chan_end;

  cache.batch = batch;
  cache.branches.assign(state.fusion.branches.size(), BranchCache{});

  std::vector<DenseTensor> features;
  std::vector<const DenseTensor*> conv3_ternary;
  std::vector<int> feature_dims;

  for (size_t p = 0; p < state.fusion.branches.size(); ++p) {
    const BranchSpec& br = state.fusion.branches[p];
    BranchCache& bc = cache.branches[p];
    bc.x0 = build_branch_input(windows, br, net.window_t, total_channels);
    const DenseTensor* cur = &bc.x0;
    for (int i = 0; i < net.stages(); ++i) {
      ConvLayerState& layer = state.branch_convs[p][static_cast<size_t>(i)];
      LayerCache lc;
      QuantResult q = quantize_weights(layer.kernel, state.qcfg);
      if (q.support.empty()) state.alpha_warning = true;
      DenseTensor s = conv1d_forward(*cur, q.ternary, net.conv_strides[static_cast<size_t>(i)]);
      scale_by_alpha(s, q.alpha);
      lc.conv_out_shape = s.shape;
      MaxPoolResult pool = maxpool1d(s, net.pools[static_cast<size_t>(i)]);
      lc.pool_argmax = std::move(pool.argmax);
      lc.bn_out = batchnorm_forward(pool.output, layer.bn, true, &lc.bn_cache);
      QuantConfig qa = state.qcfg;
      qa.epsilon_a = state.eps_a_conv[p][static_cast<size_t>(i)];
      lc.aq = quantize_activations(lc.bn_out, qa);
      lc.ternary = std::move(q.ternary);
      lc.alpha = q.alpha;
      bc.layers.push_back(std::move(lc));
      cur = &bc.layers.back().aq;
    }
    bc.features = flatten_branch_features(*cur, batch, br.channels());
    features.push_back(bc.features);
    conv3_ternary.push_back(&bc.layers.back().ternary);
    feature_dims.push_back(bc.features.dim(1));
  }

  cache.phi = sample_fusion_weights(state.fusion, conv3_ternary, feature_dims, state.qcfg,
                                    /*already_quantized=*/true, phi_rng);
  cache.fused = apply_fusion(features, cache.phi);

  QuantResult qfc = quantize_weights(state.fc1.weights, state.qcfg);
  if (qfc.support.empty()) state.alpha_warning = true;
  DenseTensor s4 = dense_forward(cache.fused, qfc.ternary, nullptr);
  scale_alpha_bias(s4, qfc.alpha, state.fc1.bias);
  cache.fc1_ternary = std::move(qfc.ternary);
  cache.fc1_alpha = qfc.alpha;
  DenseTensor s4_3d = reshaped(std::move(s4), {batch, net.dense_units, 1});
  DenseTensor a4 = batchnorm_forward(s4_3d, state.fc1.bn, true, &cache.fc1_bn_cache);
  cache.fc1_bn_out = reshaped(std::move(a4), {batch, net.dense_units});
  QuantConfig qa = state.qcfg;
  qa.epsilon_a = state.eps_a_fc1;
  cache.fc1_aq = quantize_activations(cache.fc1_bn_out, qa);

  QuantResult qout = quantize_weights(state.fcout.weights, state.qcfg);
  if (qout.support.empty()) state.alpha_warning = true;
  DenseTensor logits = dense_forward(cache.fc1_aq, qout.ternary, nullptr);
  scale_alpha_bias(logits, qout.alpha, state.fcout.bias);
  cache.fcout_ternary = std::move(qout.ternary);
  cache.fcout_alpha = qout.alpha;
  return logits;
}

Gradients backward_train(const DenseTensor& grad_logits, const ForwardCache& cache,
                         const TrainState& state) {
  const NetworkConfig& net = state.net;
  const int batch = cache.batch;
  Gradients g;
  g.branch.resize(cache.branches.size());

  // Output layer: gradients flow through the ternary basis; the alpha
  // pass-through lands them on the shadow weights.
  DenseTensor g_aq4, g_t_out;
  dense_backward(grad_logits, cache.fc1_aq, cache.fcout_ternary, &g_aq4, &g_t_out, &g.fcout_bias);
  g.fcout_w = ste_weight_grad(g_t_out, cache.fcout_alpha);

  DenseTensor g_a4 = ste_activation_grad(g_aq4, cache.fc1_bn_out);
  BatchNormGrads bn4 = batchnorm_backward(
      reshaped(std::move(g_a4), {batch, net.dense_units, 1}), cache.fc1_bn_cache, state.fc1.bn);
  g.fc1_gamma = std::move(bn4.grad_gamma);
  g.fc1_beta = std::move(bn4.grad_beta);
  DenseTensor g_s4 = reshaped(std::move(bn4.grad_input), {batch, net.dense_units});

  DenseTensor g_fused, g_t_fc1;
  dense_backward(g_s4, cache.fused, cache.fc1_ternary, &g_fused, &g_t_fc1, &g.fc1_bias);
  g.fc1_w = ste_weight_grad(g_t_fc1, cache.fc1_alpha);

  // Split the fused gradient back into masked per-branch feature gradients.
  int offset = 0;
  for (size_t p = 0; p < cache.branches.size(); ++p) {
    const BranchCache& bc = cache.branches[p];
    const BranchSpec& br = state.fusion.branches[p];
    const int d = bc.features.dim(1);
    DenseTensor g_feat({batch, d});
    const uint8_t* mask = cache.phi.phi[p].data();
    for (int b = 0; b < batch; ++b) {
      const float* src = g_fused.raw() + static_cast<int64_t>(b) * g_fused.dim(1) + offset;
      float* dst = g_feat.raw() + static_cast<int64_t>(b) * d;
      for (int i = 0; i < d; ++i) dst[i] = mask[i] ? src[i] : 0.0f;
    }
    offset += d;

    const int c3 = net.conv_filters.back();
    const int t3 = net.conv_out_time();
    DenseTensor g_aq = unflatten_branch_features(g_feat, br.channels(), c3, t3);

    g.branch[p].resize(static_cast<size_t>(net.stages()));
    for (int i = net.stages() - 1; i >= 0; --i) {
      const LayerCache& lc = bc.layers[static_cast<size_t>(i)];
      DenseTensor g_a = ste_activation_grad(g_aq, lc.bn_out);
      BatchNormGrads bng =
          batchnorm_backward(g_a, lc.bn_cache, state.branch_convs[p][static_cast<size_t>(i)].bn);
      g.branch[p][static_cast<size_t>(i)].gamma = std::move(bng.grad_gamma);
      g.branch[p][static_cast<size_t>(i)].beta = std::move(bng.grad_beta);
      DenseTensor g_conv = maxpool1d_backward(bng.grad_input, lc.pool_argmax, lc.conv_out_shape,
                                              net.pools[static_cast<size_t>(i)]);
      const DenseTensor& layer_input = i > 0 ? bc.layers[static_cast<size_t>(i - 1)].aq : bc.x0;
      DenseTensor g_t;
      DenseTensor g_prev;
      conv1d_backward(g_conv, layer_input, lc.ternary, net.conv_strides[static_cast<size_t>(i)],
                      i > 0 ? &g_prev : nullptr, &g_t);
      g.branch[p][static_cast<size_t>(i)].kernel = ste_weight_grad(g_t, lc.alpha);
      if (i > 0) g_aq = std::move(g_prev);
    }
  }
  return g;
}

void adadelta_update(std::vector<float>& param, const std::vector<float>& grad, OptimState& opt,
                     double rho, double eps, double eta) {
  if (param.size() != grad.size() || param.size() != opt.eg2.size())
    throw DimensionError("adadelta_update: size mismatch");
  for (size_t i = 0; i < param.size(); ++i) {
    const double gi = grad[i];
    const double eg2 = rho * opt.eg2[i] + (1.0 - rho) * gi * gi;
    const double dx = -std::sqrt(static_cast<double>(opt.edx2[i]) + eps) /
                      std::sqrt(eg2 + eps) * gi;
    opt.eg2[i] = static_cast<float>(eg2);
    opt.edx2[i] = static_cast<float>(rho * opt.edx2[i] + (1.0 - rho) * dx * dx);
    param[i] = static_cast<float>(param[i] + eta * dx);
  }
}

void adadelta_step(TrainState& state, const Gradients& grads) {
  const double rho = state.hyper.rho, eps = state.hyper.ada_eps, eta = state.eta;
  for (size_t p = 0; p < state.branch_convs.size(); ++p) {
    for (size_t i = 0; i < state.branch_convs[p].size(); ++i) {
      ConvLayerState& layer = state.branch_convs[p][i];
      const Gradients::ConvGrads& cg = grads.branch[p][i];
      adadelta_update(layer.kernel.data, cg.kernel.data, layer.opt_kernel, rho, eps, eta);
      adadelta_update(layer.bn.gamma, cg.gamma, layer.opt_gamma, rho, eps, eta);
      adadelta_update(layer.bn.beta, cg.beta, layer.opt_beta, rho, eps, eta);
    }
  }
  adadelta_update(state.fc1.weights.data, grads.fc1_w.data, state.fc1.opt_w, rho, eps, eta);
  adadelta_update(state.fc1.bias, grads.fc1_bias, state.fc1.opt_bias, rho, eps, eta);
  adadelta_update(state.fc1.bn.gamma, grads.fc1_gamma, state.fc1.opt_gamma, rho, eps, eta);
  adadelta_update(state.fc1.bn.beta, grads.fc1_beta, state.fc1.opt_beta, rho, eps, eta);
  adadelta_update(state.fcout.weights.data, grads.fcout_w.data, state.fcout.opt_w, rho, eps, eta);
  adadelta_update(state.fcout.bias, grads.fcout_bias, state.fcout.opt_bias, rho, eps, eta);
  state.eta *= state.hyper.lambda;
}

int64_t PackedModel::weight_count() const {
  int64_t n = 0;
  for (const auto& branch : branch_convs)
    for (const PackedConvLayer& l : branch) n += l.kernel.numel();
  n += fc1.weights.numel();
  n += fcout.weights.numel();
  return n;
}

PackedModel export_packed(const TrainState& state) {
  if (state.branch_convs.empty() || state.fc1.weights.numel() == 0)
    throw ConfigError("export_packed: model has no trained layers");
  PackedModel m;
  m.window_t = state.net.window_t;
  m.channels = state.fusion.branches.back().chan_end;
  m.classes = state.net.classes;
  m.fusion = state.fusion;
  m.pools = state.net.pools;
  m.strides = state.net.conv_strides;
  m.branch_convs.resize(state.branch_convs.size());
  for (size_t p = 0; p < state.branch_convs.size(); ++p) {
    for (size_t i = 0; i < state.branch_convs[p].size(); ++i) {
      const ConvLayerState& layer = state.branch_convs[p][i];
      PackedConvLayer pl;
      QuantResult q = quantize_weights(layer.kernel, state.qcfg);
      pl.kernel = pack_ternary(q.ternary, q.alpha);
      pl.thresholds =
          QuantBNThresholds::from_bn_folded(layer.bn.gamma, layer.bn.beta, layer.bn.running_mu,
                                            layer.bn.running_sigma, state.eps_a_conv[p][i]);
      m.branch_convs[p].push_back(std::move(pl));
    }
  }
  {
    QuantResult q = quantize_weights(state.fc1.weights, state.qcfg);
    m.fc1.weights = pack_ternary(q.ternary, q.alpha);
    m.fc1.bias.assign(state.fc1.bias.begin(), state.fc1.bias.end());
    m.fc1.has_bn = true;
    m.fc1.thresholds =
        QuantBNThresholds::from_bn_folded(state.fc1.bn.gamma, state.fc1.bn.beta,
                                          state.fc1.bn.running_mu, state.fc1.bn.running_sigma,
                                          state.eps_a_fc1);
  }
  {
    QuantResult q = quantize_weights(state.fcout.weights, state.qcfg);
    m.fcout.weights = pack_ternary(q.ternary, q.alpha);
    m.fcout.bias.assign(state.fcout.bias.begin(), state.fcout.bias.end());
    m.fcout.has_bn = false;
  }
  return m;
}

InferResult infer_packed(const PackedModel& model, const std::vector<const DenseTensor*>& windows,
                         uint64_t phi_seed) {
  const int batch = static_cast<int>(windows.size());
  if (batch == 0) throw ConfigError("infer_packed: no windows");

  std::vector<DenseTensor> features;
  std::vector<DenseTensor> conv3_dense;
  std::vector<const DenseTensor*> conv3_ptr;
  std::vector<int> feature_dims;

  for (size_t p = 0; p < model.fusion.branches.size(); ++p) {
    const BranchSpec& br = model.fusion.branches[p];
    DenseTensor x0 = build_branch_input(windows, br, model.window_t, model.channels);

    // First stage stays in the dense real domain: the raw sensor input is not
    // quantized.
    const PackedConvLayer& l0 = model.branch_convs[p][0];
    DenseTensor t0 = unpack_ternary(l0.kernel);
    DenseTensor s = conv1d_forward(x0, t0, model.strides[0]);
    scale_by_alpha(s, l0.kernel.alpha);
    MaxPoolResult pool = maxpool1d(s, model.pools[0]);
    DenseTensor aq = quantize_bn_apply(pool.output, l0.thresholds);

    for (size_t i = 1; i < model.branch_convs[p].size(); ++i) {
      const PackedConvLayer& li = model.branch_convs[p][i];
      TernaryTensor packed = pack_ternary(aq, 1.0);
      DenseTensor si = conv1d_packed(packed, li.kernel, model.strides[i]);
      MaxPoolResult pi = maxpool1d(si, model.pools[i]);
      aq = quantize_bn_apply(pi.output, li.thresholds);
    }

    features.push_back(flatten_branch_features(aq, batch, br.channels()));
    conv3_dense.push_back(unpack_ternary(model.branch_convs[p].back().kernel));
    feature_dims.push_back(features.back().dim(1));
  }
  for (const DenseTensor& t : conv3_dense) conv3_ptr.push_back(&t);

  Rng phi_rng(phi_seed);
  QuantConfig qcfg;  // only consulted when weights are not already ternary
  const FusionWeights phi = sample_fusion_weights(model.fusion, conv3_ptr, feature_dims, qcfg,
                                                  /*already_quantized=*/true, phi_rng);
  DenseTensor fused = apply_fusion(features, phi);

  TernaryTensor fused_packed = pack_ternary(fused, 1.0);
  DenseTensor s4 = dense_packed(fused_packed, model.fc1.weights, &model.fc1.bias);
  DenseTensor aq4 = quantize_bn_apply(s4, model.fc1.thresholds);

  TernaryTensor aq4_packed = pack_ternary(aq4, 1.0);
  DenseTensor logits = dense_packed(aq4_packed, model.fcout.weights, &model.fcout.bias);

  InferResult res;
  res.probs = softmax_rows(logits);
  res.predictions = argmax_rows(logits);
  return res;
}

InferResult infer_eval_dense(const TrainState& state,
                             const std::vector<const DenseTensor*>& windows, uint64_t phi_seed) {
  const NetworkConfig& net = state.net;
  const int batch = static_cast<int>(windows.size());
  if (batch == 0) throw ConfigError("infer_eval_dense: no windows");
  const int total_channels = state.fusion.branches.back().chan_end;

  std::vector<DenseTensor> features;
  std::vector<DenseTensor> conv3_ternary;
  std::vector<const DenseTensor*> conv3_ptr;
  std::vector<int> feature_dims;

  for (size_t p = 0; p < state.fusion.branches.size(); ++p) {
    const BranchSpec& br = state.fusion.branches[p];
    DenseTensor cur = build_branch_input(windows, br, net.window_t, total_channels);
    DenseTensor t3;
    for (int i = 0; i < net.stages(); ++i) {
      const ConvLayerState& layer = state.branch_convs[p][static_cast<size_t>(i)];
      QuantResult q = quantize_weights(layer.kernel, state.qcfg);
      DenseTensor s = conv1d_forward(cur, q.ternary, net.conv_strides[static_cast<size_t>(i)]);
      scale_by_alpha(s, q.alpha);
      MaxPoolResult pool = maxpool1d(s, net.pools[static_cast<size_t>(i)]);
      cur = bn_quantize_eval(pool.output, layer.bn, state.eps_a_conv[p][static_cast<size_t>(i)]);
      if (i == net.stages() - 1) t3 = std::move(q.ternary);
    }
    features.push_back(flatten_branch_features(cur, batch, br.channels()));
    conv3_ternary.push_back(std::move(t3));
    feature_dims.push_back(features.back().dim(1));
  }
  for (const DenseTensor& t : conv3_ternary) conv3_ptr.push_back(&t);

  Rng phi_rng(phi_seed);
  const FusionWeights phi = sample_fusion_weights(state.fusion, conv3_ptr, feature_dims,
                                                  state.qcfg, /*already_quantized=*/true, phi_rng);
  DenseTensor fused = apply_fusion(features, phi);

  QuantResult qfc = quantize_weights(state.fc1.weights, state.qcfg);
  DenseTensor s4 = dense_forward(fused, qfc.ternary, nullptr);
  scale_alpha_bias(s4, qfc.alpha, state.fc1.bias);
  DenseTensor aq4 = bn_quantize_eval(s4, state.fc1.bn, state.eps_a_fc1);

  QuantResult qout = quantize_weights(state.fcout.weights, state.qcfg);
  DenseTensor logits = dense_forward(aq4, qout.ternary, nullptr);
  scale_alpha_bias(logits, qout.alpha, state.fcout.bias);

  InferResult res;
  res.probs = softmax_rows(logits);
  res.predictions = argmax_rows(logits);
  return res;
}

void split_dataset(const WindowDataset& all, double val_fraction, WindowDataset* train,
                   WindowDataset* val) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0))
    throw ParameterError("split_dataset: val_fraction must be in (0, 1)");
  *train = WindowDataset{};
  *val = WindowDataset{};
  for (WindowDataset* d : {train, val}) {
    d->window_t = all.window_t;
    d->channels = all.channels;
    d->num_classes = all.num_classes;
    d->branches = all.branches;
    d->sample_rate = all.sample_rate;
  }
  std::vector<std::vector<size_t>> per_class(static_cast<size_t>(all.num_classes));
  for (size_t i = 0; i < all.labels.size(); ++i)
    per_class[static_cast<size_t>(all.labels[i])].push_back(i);
  for (const std::vector<size_t>& idx : per_class) {
    const size_t n_val = static_cast<size_t>(std::llround(static_cast<double>(idx.size()) * val_fraction));
    const size_t n_train = idx.size() - n_val;
    for (size_t j = 0; j < idx.size(); ++j) {
      WindowDataset* dst = j < n_train ? train : val;
      dst->windows.push_back(all.windows[idx[j]]);
      dst->labels.push_back(all.labels[idx[j]]);
    }
  }
  train->recompute_proportions();
  val->recompute_proportions();
}

namespace {

void update_activation_scales(TrainState& st) {
  for (size_t p = 0; p < st.branch_convs.size(); ++p)
    for (size_t i = 0; i < st.branch_convs[p].size(); ++i)
      st.eps_a_conv[p][i] = activation_scale(st.branch_convs[p][i].kernel);
  st.eps_a_fc1 = activation_scale(st.fc1.weights);
}

std::vector<double> collect_eps(const TrainState& st) {
  std::vector<double> eps;
  for (const auto& branch : st.eps_a_conv)
    for (double e : branch) eps.push_back(e);
  eps.push_back(st.eps_a_fc1);
  return eps;
}

double validate_packed(const TrainState& st, const WindowDataset& val) {
  const PackedModel m = export_packed(st);
  std::vector<const DenseTensor*> ptrs;
  for (const DenseTensor& w : val.windows) ptrs.push_back(&w);
  const InferResult r = infer_packed(m, ptrs, st.hyper.phi_seed);
  return weighted_f1(r.predictions, val.labels, val.num_classes);
}

}  // namespace

TrainResult train(const WindowDataset& train_set, const WindowDataset& val_set,
                  const NetworkConfig& net, const FusionSpec& fusion, const QuantConfig& qcfg,
                  const TrainHyper& hyper) {
  if (train_set.size() == 0) throw ConfigError("train: empty training set");
  if (val_set.size() == 0) throw ConfigError("train: empty validation set");
  if (hyper.batch < 1) throw ConfigError("train: batch size must be >= 1");

  TrainResult result;
  result.state = init_train_state(net, fusion, qcfg, hyper);
  TrainState& st = result.state;

  for (const BranchSpec& b : st.fusion.branches)
    for (int i = 0; i < net.stages(); ++i)
      result.eps_names.push_back("eps_a_" + b.name + "_conv" + std::to_string(i + 1));
  result.eps_names.push_back("eps_a_fc1");

  Rng shuffle_rng(hyper.seed ^ 0x9e3779b97f4a7c15ULL);
  Rng phi_rng(hyper.phi_seed);

  if (hyper.epochs == 0) {
    result.final_val_f1 = validate_packed(st, val_set);
    return result;
  }

  std::vector<size_t> order(static_cast<size_t>(train_set.size()));
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 1; epoch <= hyper.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    int64_t seen = 0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(hyper.batch)) {
      const size_t end = std::min(order.size(), start + static_cast<size_t>(hyper.batch));
      std::vector<const DenseTensor*> batch;
      std::vector<int> labels;
      for (size_t j = start; j < end; ++j) {
        batch.push_back(&train_set.windows[order[j]]);
        labels.push_back(train_set.labels[order[j]]);
      }
      ForwardCache cache;
      DenseTensor logits = forward_train(batch, st, phi_rng, cache);
      SoftmaxXentResult sx = softmax_cross_entropy(logits, labels);
      Gradients grads = backward_train(sx.grad_logits, cache, st);
      adadelta_step(st, grads);
      loss_sum += sx.loss * static_cast<double>(batch.size());
      seen += static_cast<int64_t>(batch.size());
    }
    st.epoch = epoch;
    update_activation_scales(st);

    EpochMetrics em;
    em.epoch = epoch;
    em.train_loss = loss_sum / static_cast<double>(seen);
    em.val_f1 = validate_packed(st, val_set);
    em.eps_a = collect_eps(st);
    result.history.push_back(em);
    result.final_val_f1 = em.val_f1;
    if (hyper.target_f1 > 0.0 && em.val_f1 >= hyper.target_f1) break;
  }
  return result;
}

std::string metrics_csv(const TrainResult& result) {
  std::ostringstream out;
  out << "epoch,train_loss,val_weighted_f1";
  for (const std::string& n : result.eps_names) out << ',' << n;
  out << '\n';
  char buf[64];
  for (const EpochMetrics& em : result.history) {
    out << em.epoch;
    std::snprintf(buf, sizeof(buf), ",%.9g", em.train_loss);
    out << buf;
    std::snprintf(buf, sizeof(buf), ",%.9g", em.val_f1);
    out << buf;
    for (double e : em.eps_a) {
      std::snprintf(buf, sizeof(buf), ",%.9g", e);
      out << buf;
    }
    out << '\n';
  }
  return out.str();
}

int64_t PackedModel::packed_bytes() const {
  int64_t total = 4 + 2 + 2;  // magic, version, layer count
  auto tensor_bytes = [](const TernaryTensor& t) {
    return 3 + 4 * static_cast<int64_t>(t.shape.size()) + 8 +
           static_cast<int64_t>(t.sign_plane.size() + t.value_plane.size()) * 8;
  };
  // meta block
  total += 2 + 2 + 2 + 1 + 1;
  for (const BranchSpec& b : fusion.branches)
    total += 1 + static_cast<int64_t>(b.name.size()) + 2 + 2 + 1;
  total += 1 + 2 * static_cast<int64_t>(pools.size());
  for (const auto& branch : branch_convs)
    for (const PackedConvLayer& l : branch)
      total += tensor_bytes(l.kernel) + 16 * l.thresholds.channels();
  total += tensor_bytes(fc1.weights) + 8 * static_cast<int64_t>(fc1.bias.size()) +
           16 * fc1.thresholds.channels();
  total += tensor_bytes(fcout.weights) + 8 * static_cast<int64_t>(fcout.bias.size());
  return total;
}

}  // namespace dfternet
