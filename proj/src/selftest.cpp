#include "dfternet/selftest.hpp"

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dfternet/bitpack.hpp"
#include "dfternet/fusion.hpp"
#include "dfternet/ops.hpp"
#include "dfternet/quantize.hpp"
#include "dfternet/reference.hpp"
#include "dfternet/rng.hpp"

namespace dfternet {

namespace {

DenseTensor random_ternary(int64_t n, Rng& rng, double zero_frac = 0.3) {
  DenseTensor t({static_cast<int>(n)});
  for (float& v : t.data) {
    const double u = rng.uniform01();
    v = u < zero_frac ? 0.0f : (rng.bernoulli(0.5) ? 0.5f : -0.5f);
  }
  return t;
}

bool check_quantizer_ground_truth() {
  const DenseTensor in = DenseTensor::from({3}, {-0.85f, 0.22f, 0.67f});
  const DenseTensor q = quantize_linear(in, 1.0, 2);
  if (!(q.data[0] == -0.5f && q.data[1] == 0.0f && q.data[2] == 0.5f)) return false;
  if (quantize_scalar(0.22, 3.0, 2) != 0.5) return false;
  if (quantize_scalar(0.22, 1.0, 2) != 0.0) return false;
  return true;
}

bool check_packed_exactness() {
  Rng rng(101);
  const double alphas[] = {0.25, 0.5, 1.0, 1.4, 2.0};
  for (int trial = 0; trial < 2000; ++trial) {
    const int64_t n = 1 + static_cast<int64_t>(rng.below(4096));
    DenseTensor a = random_ternary(n, rng);
    DenseTensor b = random_ternary(n, rng);
    const double aa = alphas[rng.below(5)], ab = alphas[rng.below(5)];
    const TernaryTensor pa = pack_ternary(a, aa), pb = pack_ternary(b, ab);
    double dense = 0.0;
    for (int64_t i = 0; i < n; ++i)
      dense += static_cast<double>(a.data[static_cast<size_t>(i)]) * b.data[static_cast<size_t>(i)];
    if (dot_packed(pa, pb) != dense * aa * ab) return false;
    if (dot_packed(pa, pb) != ref::dot_packed(pa, pb)) return false;
  }
  for (int trial = 0; trial < 30; ++trial) {
    const int c = 1 + static_cast<int>(rng.below(8));
    const int t = 8 + static_cast<int>(rng.below(48));
    const int kh = 1 + static_cast<int>(rng.below(std::min(t, 9)));
    const int co = 1 + static_cast<int>(rng.below(12));
    const int batch = 1 + static_cast<int>(rng.below(3));
    DenseTensor inp = random_ternary(static_cast<int64_t>(batch) * c * t, rng);
    inp.shape = {batch, c, t};
    DenseTensor ker = random_ternary(static_cast<int64_t>(co) * c * kh, rng);
    ker.shape = {co, c, kh};
    const double aw = alphas[rng.below(5)];
    const TernaryTensor pi = pack_ternary(inp, 1.0), pk = pack_ternary(ker, aw);
    DenseTensor viaconv = conv1d_forward(inp, ker, 1);
    DenseTensor packed = conv1d_packed(pi, pk, 1);
    DenseTensor serial = ref::conv1d_packed(pi, pk, 1);
    for (int64_t i = 0; i < packed.numel(); ++i) {
      const float want =
          static_cast<float>(aw * static_cast<double>(viaconv.data[static_cast<size_t>(i)]));
      if (packed.data[static_cast<size_t>(i)] != want) return false;
      if (packed.data[static_cast<size_t>(i)] != serial.data[static_cast<size_t>(i)]) return false;
    }
  }
  return true;
}

bool check_reconstruction_bound() {
  Rng rng(202);
  const int sizes[] = {16, 256, 4096};
  const double xis[] = {2.0, 2.8, 3.5};
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = sizes[trial % 3];
    QuantConfig cfg;
    cfg.xi = xis[(trial / 3) % 3];
    DenseTensor w({n});
    for (float& v : w.data) v = static_cast<float>(rng.normal());
    const QuantResult q = quantize_weights(w, cfg);
    if (q.support.empty()) continue;
    if (!reconstruction_bound_check(w, q).holds) return false;
  }
  return true;
}

bool check_alpha_consistency() {
  Rng rng(303);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 8 + static_cast<int>(rng.below(512));
    DenseTensor w({n});
    for (float& v : w.data) v = static_cast<float>(rng.normal());
    QuantConfig cfg;
    const QuantResult q = quantize_weights(w, cfg);
    if (q.support.empty()) continue;
    double sum_abs = 0.0;
    for (int64_t idx : q.support)
      sum_abs += std::fabs(static_cast<double>(w.data[static_cast<size_t>(idx)]));
    const double closed_form = 2.0 / static_cast<double>(q.support.size()) * sum_abs;
    if (std::fabs(q.alpha - closed_form) > 1e-12 * std::max(1.0, std::fabs(closed_form)))
      return false;
  }
  return true;
}

bool check_bn_threshold_equivalence() {
  Rng rng(404);
  for (int trial = 0; trial < 100000; ++trial) {
    float gamma = 0.0f;
    while (std::fabs(gamma) < 0.05f) gamma = static_cast<float>(rng.uniform(-3.0, 3.0));
    const float beta = static_cast<float>(rng.uniform(-2.0, 2.0));
    const double eps = rng.uniform(0.05, 1.0);
    const double xhat = rng.uniform(-4.0, 4.0);
    const QuantBNThresholds thr = QuantBNThresholds::from_bn({gamma}, {beta}, eps);
    const double via_thr = quantize_bn_scalar(xhat, thr, 0);
    const double direct =
        quantize_scalar(static_cast<double>(gamma) * xhat + static_cast<double>(beta), eps, 2);
    if (via_thr != direct) return false;
  }
  return true;
}

bool check_fusion_statistics() {
  const int d = 10000;
  const double probs[] = {0.0, 0.1, 0.25, 0.5};
  for (double p : probs) {
    // Ternary weights with an exact fraction 2p of nonzeros.
    const int m = 2000;
    const int nnz = static_cast<int>(2.0 * p * m + 0.5);
    DenseTensor wq({m});
    for (int i = 0; i < nnz; ++i) wq.data[static_cast<size_t>(i)] = (i % 2) ? 0.5f : -0.5f;
    const double got = keep_probability(wq);
    if (got != 0.5 * nnz / static_cast<double>(m)) return false;

    FusionSpec spec;
    spec.mode = FusionMode::dynamic;
    spec.branches = {{"a", 0, 4, true}, {"b", 4, 8, false}};
    Rng rng(505);
    std::vector<const DenseTensor*> weights = {&wq, &wq};
    const FusionWeights fw =
        sample_fusion_weights(spec, weights, {d, d}, QuantConfig{}, true, rng);
    double mean = 0.0;
    for (uint8_t bit : fw.phi[0]) mean += bit;
    mean /= d;
    const double band = 3.0 * std::sqrt(got * (1.0 - got) / d);
    if (std::fabs(mean - got) > band) return false;
    if (got == 0.0 && mean != 0.0) return false;
    for (uint8_t bit : fw.phi[1])
      if (bit != 1) return false;
  }
  return true;
}

bool check_ste_gradients() {
  // Saturation mask.
  const DenseTensor a = DenseTensor::from({4}, {0.3f, 0.5f, 0.7f, -1.2f});
  const DenseTensor g = DenseTensor::from({4}, {1.0f, 1.0f, 1.0f, 1.0f});
  const DenseTensor masked = ste_activation_grad(g, a);
  if (!(masked.data[0] == 1.0f && masked.data[1] == 1.0f && masked.data[2] == 0.0f &&
        masked.data[3] == 0.0f))
    return false;

  // One-layer surrogate: W already ternary so alpha == 1 and the quantized
  // forward coincides with the surrogate loss(conv(W, x)).
  Rng rng(606);
  DenseTensor w = random_ternary(2 * 3, rng, 0.34);
  w.shape = {2, 1, 3};
  bool has_nonzero = false;
  for (float v : w.data) has_nonzero = has_nonzero || v != 0.0f;
  if (!has_nonzero) w.data[0] = 0.5f;
  DenseTensor x({1, 1, 8});
  for (float& v : x.data) v = static_cast<float>(rng.normal());
  const std::vector<int> label = {1};

  QuantConfig cfg;
  const QuantResult q = quantize_weights(w, cfg);
  DenseTensor s = conv1d_forward(x, q.ternary, 1);
  // logits = row-sum per filter of the conv output
  auto loss_of = [&](const DenseTensor& kernel) {
    DenseTensor conv = conv1d_forward(x, kernel, 1);
    DenseTensor logits({1, 2});
    for (int co = 0; co < 2; ++co) {
      double acc = 0.0;
      for (int t = 0; t < conv.dim(2); ++t)
        acc += conv.data[static_cast<size_t>(co * conv.dim(2) + t)];
      logits.data[static_cast<size_t>(co)] = static_cast<float>(acc);
    }
    return softmax_cross_entropy(logits, label);
  };

  SoftmaxXentResult base = loss_of(q.ternary);
  // Analytic gradient via the implementation path.
  DenseTensor g_conv({1, 2, s.dim(2)});
  for (int co = 0; co < 2; ++co)
    for (int t = 0; t < s.dim(2); ++t)
      g_conv.data[static_cast<size_t>(co * s.dim(2) + t)] =
          base.grad_logits.data[static_cast<size_t>(co)];
  DenseTensor g_t;
  conv1d_backward(g_conv, x, q.ternary, 1, nullptr, &g_t);
  const DenseTensor g_w = ste_weight_grad(g_t, q.alpha);

  const double h = 1e-3;
  for (int64_t i = 0; i < w.numel(); ++i) {
    DenseTensor wp = w, wm = w;
    wp.data[static_cast<size_t>(i)] += static_cast<float>(h);
    wm.data[static_cast<size_t>(i)] -= static_cast<float>(h);
    const double fd = (loss_of(wp).loss - loss_of(wm).loss) / (2.0 * h);
    const double an = g_w.data[static_cast<size_t>(i)];
    const double denom = std::max({std::fabs(fd), std::fabs(an), 1e-4});
    if (std::fabs(fd - an) / denom > 1e-3) return false;
  }
  return true;
}

}  // namespace

int run_selftest(std::ostream& out) {
  struct Suite {
    const char* name;
    std::function<bool()> fn;
  };
  const Suite suites[] = {
      {"quantizer-ground-truth", check_quantizer_ground_truth},
      {"packed-kernel-exactness", check_packed_exactness},
      {"reconstruction-bound", check_reconstruction_bound},
      {"alpha-consistency", check_alpha_consistency},
      {"bn-threshold-equivalence", check_bn_threshold_equivalence},
      {"fusion-statistics", check_fusion_statistics},
      {"ste-gradients", check_ste_gradients},
  };
  int failures = 0;
  for (const Suite& s : suites) {
    bool ok = false;
    try {
      ok = s.fn();
    } catch (const std::exception& e) {
      out << "[FAIL] " << s.name << " (exception: " << e.what() << ")\n";
      ++failures;
      continue;
    }
    out << (ok ? "[ OK ] " : "[FAIL] ") << s.name << "\n";
    if (!ok) ++failures;
  }
  return failures;
}

}  // namespace dfternet
