// Acceptance suite: every release gate in one binary, one verdict line per
// criterion. Pass the CLI binary path as argv[1] to include the CLI-level
// checks (bench report, xi sweep).

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "dfternet/bitpack.hpp"
#include "dfternet/data.hpp"
#include "dfternet/fusion.hpp"
#include "dfternet/model.hpp"
#include "dfternet/ops.hpp"
#include "dfternet/quantize.hpp"
#include "dfternet/rng.hpp"
#include "dfternet/serialize.hpp"

using namespace dfternet;
using Clock = std::chrono::steady_clock;

namespace {

std::string g_cli_path;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

DenseTensor random_ternary(Shape shape, Rng& rng, double zero_frac = 0.3) {
  DenseTensor t(std::move(shape));
  for (float& v : t.data) {
    const double u = rng.uniform01();
    v = u < zero_frac ? 0.0f : (rng.bernoulli(0.5) ? 0.5f : -0.5f);
  }
  return t;
}

DenseTensor random_tensor(Shape shape, Rng& rng) {
  DenseTensor t(std::move(shape));
  for (float& v : t.data) v = static_cast<float>(rng.normal());
  return t;
}

// ---- criterion 1: quantizer ground truth ----------------------------------
bool quantizer_ground_truth(std::string& detail) {
  const auto t0 = Clock::now();
  const DenseTensor q = quantize_linear(DenseTensor::from({3}, {-0.85f, 0.22f, 0.67f}), 1.0, 2);
  const bool values_ok = q.data == std::vector<float>{-0.5f, 0.0f, 0.5f} &&
                         quantize_scalar(0.22, 3.0, 2) == 0.5;
  const double elapsed = seconds_since(t0);
  detail = "elapsed " + std::to_string(elapsed * 1e3) + " ms";
  return values_ok && elapsed < 1e-3;
}

// ---- criterion 2: packed-kernel exactness ----------------------------------
bool packed_exactness(std::string& detail) {
  const auto t0 = Clock::now();
  Rng rng(1001);
  const double alphas[] = {0.25, 0.5, 1.0, 1.4, 2.0};
  int64_t pair_count = 0;
  for (int trial = 0; trial < 100000; ++trial) {
    const int n = 1 + static_cast<int>(rng.below(4096));
    DenseTensor a({n}), b({n});
    for (float& v : a.data) {
      const double u = rng.uniform01();
      v = u < 0.3 ? 0.0f : (u < 0.65 ? 0.5f : -0.5f);
    }
    for (float& v : b.data) {
      const double u = rng.uniform01();
      v = u < 0.3 ? 0.0f : (u < 0.65 ? 0.5f : -0.5f);
    }
    const double aa = alphas[rng.below(5)], ab = alphas[rng.below(5)];
    double dense = 0.0;
    for (int i = 0; i < n; ++i)
      dense += static_cast<double>(a.data[static_cast<size_t>(i)]) * b.data[static_cast<size_t>(i)];
    if (dot_packed(pack_ternary(a, aa), pack_ternary(b, ab)) != dense * aa * ab) {
      detail = "dot mismatch at trial " + std::to_string(trial);
      return false;
    }
    ++pair_count;
  }
  int layer_cases = 0;
  for (int trial = 0; trial < 120; ++trial) {
    const bool conv_case = trial % 2 == 0;
    const double ain = alphas[rng.below(5)], aw = alphas[rng.below(5)];
    if (conv_case) {
      const int c = 1 + static_cast<int>(rng.below(16));
      const int t = 6 + static_cast<int>(rng.below(58));
      const int kh = 1 + static_cast<int>(rng.below(static_cast<uint64_t>(std::min(t, 11))));
      const int co = 1 + static_cast<int>(rng.below(24));
      const int stride = 1 + static_cast<int>(rng.below(2));
      const DenseTensor in = random_ternary({2, c, t}, rng);
      const DenseTensor ker = random_ternary({co, c, kh}, rng);
      const DenseTensor dense = conv1d_forward(in, ker, stride);
      const DenseTensor packed =
          conv1d_packed(pack_ternary(in, ain), pack_ternary(ker, aw), stride);
      for (int64_t i = 0; i < packed.numel(); ++i) {
        const double balance = static_cast<double>(dense.data[static_cast<size_t>(i)]) / 0.25;
        if (packed.data[static_cast<size_t>(i)] !=
            static_cast<float>(balance * (0.25 * ain * aw))) {
          detail = "conv mismatch at trial " + std::to_string(trial);
          return false;
        }
      }
    } else {
      const int b = 1 + static_cast<int>(rng.below(5));
      const int ni = 1 + static_cast<int>(rng.below(512));
      const int no = 1 + static_cast<int>(rng.below(64));
      const DenseTensor in = random_ternary({b, ni}, rng);
      const DenseTensor w = random_ternary({ni, no}, rng);
      const DenseTensor dense = dense_forward(in, w, nullptr);
      const DenseTensor packed = dense_packed(pack_ternary(in, ain), pack_ternary(w, aw));
      for (int64_t i = 0; i < packed.numel(); ++i) {
        const double balance = static_cast<double>(dense.data[static_cast<size_t>(i)]) / 0.25;
        if (packed.data[static_cast<size_t>(i)] !=
            static_cast<float>(balance * (0.25 * ain * aw))) {
          detail = "dense mismatch at trial " + std::to_string(trial);
          return false;
        }
      }
    }
    ++layer_cases;
  }
  const double elapsed = seconds_since(t0);
  {
    std::ostringstream os;
    os << pair_count << " pairs + " << layer_cases << " layer cases, " << elapsed << " s";
    detail = os.str();
  }
  return elapsed < 30.0;
}

// ---- criterion 3: restricted reconstruction-error bound --------------------
bool reconstruction_bound(std::string& detail) {
  Rng rng(1002);
  const int sizes[] = {16, 256, 4096};
  const double xis[] = {2.0, 2.8, 3.5};
  int violations = 0, checked = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    QuantConfig cfg;
    cfg.xi = xis[trial % 3];
    const DenseTensor w = random_tensor({sizes[(trial / 3) % 3]}, rng);
    const QuantResult q = quantize_weights(w, cfg);
    if (q.support.empty()) continue;
    if (!reconstruction_bound_check(w, q).holds) ++violations;
    ++checked;
  }
  detail = std::to_string(checked) + " tensors, " + std::to_string(violations) + " violations";
  return violations == 0 && checked >= 990;
}

// ---- criterion 4: alpha closed-form consistency ----------------------------
bool alpha_consistency(std::string& detail) {
  Rng rng(1003);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 8 + static_cast<int>(rng.below(2048));
    const DenseTensor w = random_tensor({n}, rng);
    QuantConfig cfg;
    const QuantResult q = quantize_weights(w, cfg);
    if (q.support.empty()) continue;
    double sum_abs = 0.0;
    for (int64_t i : q.support)
      sum_abs += std::fabs(static_cast<double>(w.data[static_cast<size_t>(i)]));
    const double closed = 2.0 / static_cast<double>(q.support.size()) * sum_abs;
    worst = std::max(worst, std::fabs(q.alpha - closed) / std::max(1.0, std::fabs(closed)));
  }
  std::ostringstream os;
  os << "worst deviation " << worst;
  detail = os.str();
  return worst <= 1e-12;
}

// ---- criterion 5: quantized-BN threshold equivalence -----------------------
bool bn_threshold_equivalence(std::string& detail) {
  Rng rng(1004);
  for (int trial = 0; trial < 100000; ++trial) {
    float gamma = 0.0f;
    while (std::fabs(gamma) < 0.05f) gamma = static_cast<float>(rng.uniform(-3.0, 3.0));
    const float beta = static_cast<float>(rng.uniform(-2.0, 2.0));
    const double eps = rng.uniform(0.05, 1.0);
    const double xhat = rng.uniform(-4.0, 4.0);
    const QuantBNThresholds thr = QuantBNThresholds::from_bn({gamma}, {beta}, eps);
    const double direct = quantize_scalar(static_cast<double>(gamma) * xhat + beta, eps, 2);
    if (quantize_bn_scalar(xhat, thr, 0) != direct) {
      detail = "mismatch at trial " + std::to_string(trial);
      return false;
    }
  }
  detail = "100000 tuples exact";
  return true;
}

// ---- criterion 6: Bernoulli fusion statistics ------------------------------
bool fusion_statistics(std::string& detail) {
  const int d = 10000;
  FusionSpec spec;
  spec.mode = FusionMode::dynamic;
  spec.branches = {{"a", 0, 4, true}, {"b", 4, 8, false}};
  for (double p : {0.0, 0.1, 0.25, 0.5}) {
    const int m = 4000;
    const int nnz = static_cast<int>(2.0 * p * m + 0.5);
    DenseTensor wq({m});
    for (int i = 0; i < nnz; ++i) wq.data[static_cast<size_t>(i)] = (i % 2) ? 0.5f : -0.5f;
    const double hand_count = 0.5 * nnz / static_cast<double>(m);
    if (keep_probability(wq) != hand_count) {
      detail = "keep probability disagrees with the hand count";
      return false;
    }
    Rng rng(1005);
    const FusionWeights fw =
        sample_fusion_weights(spec, {&wq, &wq}, {d, d}, QuantConfig{}, true, rng);
    double mean = 0.0;
    for (uint8_t bit : fw.phi[0]) mean += bit;
    mean /= d;
    if (p == 0.0 && mean != 0.0) {
      detail = "all-zero weights failed to mute the branch";
      return false;
    }
    if (std::fabs(mean - p) > 3.0 * std::sqrt(p * (1.0 - p) / d)) {
      std::ostringstream os;
      os << "keep rate " << mean << " outside the 3-sigma band around " << p;
      detail = os.str();
      return false;
    }
  }
  detail = "p in {0, 0.1, 0.25, 0.5} within 3 sigma; zero weights mute";
  return true;
}

// ---- criterion 7: STE gradient sanity ---------------------------------------
bool ste_sanity(std::string& detail) {
  // Saturation blocks exactly.
  const DenseTensor a = DenseTensor::from({4}, {0.51f, -0.7f, 2.0f, -100.0f});
  const DenseTensor g({4}, {1, 1, 1, 1});
  for (float v : ste_activation_grad(g, a).data) {
    if (v != 0.0f) {
      detail = "saturated activation leaked gradient";
      return false;
    }
  }

  // One-layer surrogate vs central finite differences. The weights are chosen
  // already ternary so alpha is exactly 1 and the quantized forward coincides
  // with the surrogate.
  Rng rng(1006);
  DenseTensor w = random_ternary({3, 2, 3}, rng, 0.34);
  bool any = false;
  for (float v : w.data) any = any || v != 0.0f;
  if (!any) w.data[0] = 0.5f;
  const DenseTensor x = random_tensor({1, 2, 10}, rng);
  const std::vector<int> label = {2};

  auto loss_of = [&](const DenseTensor& kernel) {
    const DenseTensor conv = conv1d_forward(x, kernel, 1);
    DenseTensor logits({1, 3});
    for (int co = 0; co < 3; ++co) {
      double acc = 0.0;
      for (int t = 0; t < conv.dim(2); ++t)
        acc += conv.data[static_cast<size_t>(co * conv.dim(2) + t)];
      logits.data[static_cast<size_t>(co)] = static_cast<float>(acc);
    }
    return softmax_cross_entropy(logits, label);
  };

  QuantConfig cfg;
  const QuantResult q = quantize_weights(w, cfg);
  if (q.alpha != 1.0) {
    detail = "test setup failed to produce alpha == 1";
    return false;
  }
  const SoftmaxXentResult base = loss_of(q.ternary);
  const DenseTensor conv = conv1d_forward(x, q.ternary, 1);
  DenseTensor g_conv(conv.shape);
  for (int co = 0; co < 3; ++co)
    for (int t = 0; t < conv.dim(2); ++t)
      g_conv.data[static_cast<size_t>(co * conv.dim(2) + t)] =
          base.grad_logits.data[static_cast<size_t>(co)];
  DenseTensor g_t;
  conv1d_backward(g_conv, x, q.ternary, 1, nullptr, &g_t);
  const DenseTensor g_w = ste_weight_grad(g_t, q.alpha);

  const double h = 1e-3;
  double worst = 0.0;
  for (int64_t i = 0; i < w.numel(); ++i) {
    DenseTensor wp = q.ternary, wm = q.ternary;
    wp.data[static_cast<size_t>(i)] += static_cast<float>(h);
    wm.data[static_cast<size_t>(i)] -= static_cast<float>(h);
    const double fd = (loss_of(wp).loss - loss_of(wm).loss) / (2.0 * h);
    const double an = g_w.data[static_cast<size_t>(i)];
    worst = std::max(worst, std::fabs(fd - an) / std::max({std::fabs(fd), std::fabs(an), 1e-4}));
  }
  std::ostringstream os;
  os << "worst FD relative error " << worst;
  detail = os.str();
  return worst < 1e-3;
}

// ---- criterion 8: end-to-end synthetic training -----------------------------
struct TrainedRun {
  TrainResult result;
  std::string metrics;
  std::vector<uint8_t> model_bytes;
  double seconds = 0.0;
};

TrainedRun run_synthetic(FusionMode mode, bool reduce_back, int epochs) {
  SynthSpec sp;
  sp.classes = 4;
  sp.branches = branch_preset("synth3");
  sp.uninformative = {"back"};
  sp.windows_per_class = 60;
  sp.window_t = 64;
  sp.noise = 0.3;
  sp.seed = 2024;
  const WindowDataset all = synth_dataset(sp);
  WindowDataset train_set, val_set;
  split_dataset(all, 0.25, &train_set, &val_set);

  NetworkConfig net;
  net.classes = 4;
  net.window_t = 64;
  FusionSpec fusion;
  fusion.mode = mode;
  fusion.branches = branch_preset("synth3");
  if (mode == FusionMode::dynamic && reduce_back)
    for (BranchSpec& b : fusion.branches) b.reduced = b.name == "back";

  TrainHyper hyper;
  hyper.epochs = epochs;
  hyper.batch = 16;
  hyper.seed = 7;
  hyper.phi_seed = 3;

  TrainedRun run;
  const auto t0 = Clock::now();
  run.result = train(train_set, val_set, net, fusion, QuantConfig{}, hyper);
  run.seconds = seconds_since(t0);
  run.metrics = metrics_csv(run.result);
  run.model_bytes = serialize_packed(export_packed(run.result.state));
  return run;
}

TrainedRun g_dynamic_run;  // reused by criterion 10

bool end_to_end_training(std::string& detail) {
  const int epochs = 8;
  g_dynamic_run = run_synthetic(FusionMode::dynamic, true, epochs);
  double best = 0.0;
  for (const EpochMetrics& em : g_dynamic_run.result.history) best = std::max(best, em.val_f1);

  const TrainedRun repeat = run_synthetic(FusionMode::dynamic, true, epochs);
  const bool reproducible = repeat.metrics == g_dynamic_run.metrics &&
                            repeat.model_bytes == g_dynamic_run.model_bytes;

  const TrainedRun late = run_synthetic(FusionMode::late, false, epochs);

  std::ostringstream os;
  os << "best val F1 " << best << " in " << g_dynamic_run.result.history.size() << " epochs ("
     << g_dynamic_run.seconds << " s), late " << late.result.final_val_f1 << ", reproducible "
     << (reproducible ? "yes" : "NO");
  detail = os.str();
  return best >= 0.95 && g_dynamic_run.result.history.size() <= 30 &&
         g_dynamic_run.seconds < 120.0 && reproducible &&
         g_dynamic_run.result.final_val_f1 >= late.result.final_val_f1 - 0.02;
}

// ---- criterion 9: compression -----------------------------------------------
bool compression(std::string& detail) {
  NetworkConfig net;
  net.classes = 17;
  net.window_t = 64;
  FusionSpec fusion;
  fusion.mode = FusionMode::late;
  fusion.branches = branch_preset("opportunity");
  const TrainState st = init_train_state(net, fusion, QuantConfig{}, TrainHyper{});

  const int64_t conv1 = st.branch_convs[0][0].kernel.numel();
  const int64_t conv2 = st.branch_convs[0][1].kernel.numel();
  const int64_t conv3 = st.branch_convs[0][2].kernel.numel();
  const int64_t fc = st.fc1.weights.numel();
  const bool counts_ok = conv1 == 550 && conv2 == 20000 && conv3 == 7200 && fc == 1890000;

  const PackedModel m = export_packed(st);
  const std::vector<uint8_t> bytes = serialize_packed(m);
  const int64_t dense_bytes = m.weight_count() * 4;
  std::ostringstream os;
  os << "packed " << bytes.size() << " B vs dense " << dense_bytes << " B ("
     << static_cast<double>(dense_bytes) / static_cast<double>(bytes.size())
     << "x); conv1/conv2/conv3/fc = " << conv1 << "/" << conv2 << "/" << conv3 << "/" << fc;
  detail = os.str();
  return counts_ok && static_cast<int64_t>(bytes.size()) * 10 <= dense_bytes;
}

// ---- criterion 10: export round trip ----------------------------------------
bool export_round_trip(std::string& detail) {
  if (g_dynamic_run.model_bytes.empty()) {
    detail = "depends on criterion 8 having run";
    return false;
  }
  const PackedModel in_memory = export_packed(g_dynamic_run.result.state);
  const PackedModel loaded = deserialize_packed(g_dynamic_run.model_bytes);
  if (serialize_packed(loaded) != g_dynamic_run.model_bytes) {
    detail = "serialize(deserialize(bytes)) changed the bytes";
    return false;
  }
  Rng rng(1007);
  std::vector<DenseTensor> windows;
  for (int i = 0; i < 100; ++i) windows.push_back(random_tensor({64, 12}, rng));
  std::vector<const DenseTensor*> ptrs;
  for (const DenseTensor& w : windows) ptrs.push_back(&w);
  const InferResult a = infer_packed(in_memory, ptrs, 41);
  const InferResult b = infer_packed(loaded, ptrs, 41);
  const bool same = a.predictions == b.predictions && a.probs.data == b.probs.data;
  detail = same ? "100 windows bit-identical" : "outputs diverged";
  return same;
}

// ---- criterion 11: bench report (informational timing, asserted exactness) --
bool bench_report(std::string& detail) {
  if (g_cli_path.empty()) {
    detail = "no CLI path given";
    return false;
  }
  const std::string cmd = g_cli_path + " bench --sizes 512,2048 --windows 8";
  std::cout << "    --- bench output (timing informational) ---\n" << std::flush;
  const int rc = std::system(cmd.c_str());
  detail = "bench exit " + std::to_string(rc) + " (exactness asserted inside bench)";
  return rc == 0;
}

// ---- criterion 12: xi sweep harness ------------------------------------------
bool xi_sweep(std::string& detail) {
  if (g_cli_path.empty()) {
    detail = "no CLI path given";
    return false;
  }
  const std::string out = "/tmp/dfternet_acceptance_sweep.csv";
  std::remove(out.c_str());
  const std::string cmd =
      g_cli_path +
      " train --synth --classes 4 --windows-per-class 18 --uninformative back"
      " --window-t 64 --epochs 2 --batch 16 --seed 7 --phi-seed 3"
      " --xi-sweep 2.6,2.7,2.8,2.9,3.0 --sweep-out " + out + " > /dev/null";
  const int rc = std::system(cmd.c_str());
  if (rc != 0) {
    detail = "sweep exit " + std::to_string(rc);
    return false;
  }
  std::ifstream f(out);
  if (!f) {
    detail = "sweep CSV missing";
    return false;
  }
  std::string header, row1, row2;
  std::getline(f, header);
  std::getline(f, row1);
  std::getline(f, row2);
  const bool shape_ok = header == "preset,xi_2.6,xi_2.7,xi_2.8,xi_2.9,xi_3.0" &&
                        row1.rfind("dynamic_gp,", 0) == 0 && row2.rfind("dynamic_gs,", 0) == 0;
  detail = shape_ok ? "CSV " + out + " has the comparison shape" : "unexpected CSV shape";
  return shape_ok;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc > 1) g_cli_path = argv[1];

  struct Criterion {
    const char* name;
    std::function<bool(std::string&)> fn;
  };
  const std::vector<Criterion> criteria = {
      {"1 quantizer ground truth", quantizer_ground_truth},
      {"2 packed-kernel exactness", packed_exactness},
      {"3 restricted reconstruction bound", reconstruction_bound},
      {"4 alpha closed-form consistency", alpha_consistency},
      {"5 quantized-BN threshold equivalence", bn_threshold_equivalence},
      {"6 Bernoulli fusion statistics", fusion_statistics},
      {"7 STE gradient sanity", ste_sanity},
      {"8 end-to-end synthetic training", end_to_end_training},
      {"9 compression", compression},
      {"10 export round trip", export_round_trip},
      {"11 dense-vs-packed bench", bench_report},
      {"12 xi sweep harness", xi_sweep},
  };

  int failures = 0;
  for (const Criterion& c : criteria) {
    std::string detail;
    bool ok = false;
    try {
      ok = c.fn(detail);
    } catch (const std::exception& e) {
      detail = std::string("exception: ") + e.what();
    }
    std::cout << (ok ? "[PASS] " : "[FAIL] ") << "criterion " << c.name;
    if (!detail.empty()) std::cout << " -- " << detail;
    std::cout << "\n" << std::flush;
    if (!ok) ++failures;
  }
  if (failures > 0) std::cout << failures << " criteria failed\n";
  return failures == 0 ? 0 : 1;
}
