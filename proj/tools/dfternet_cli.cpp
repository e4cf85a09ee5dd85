#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dfternet/data.hpp"
#include "dfternet/model.hpp"
#include "dfternet/reference.hpp"
#include "dfternet/selftest.hpp"
#include "dfternet/serialize.hpp"

namespace dft = dfternet;

namespace {

struct DataArgs {
  bool synth = false;
  int classes = 4;
  int windows_per_class = 100;
  double noise = 0.3;
  std::string branch_preset = "synth3";
  std::vector<std::string> uninformative;
  uint64_t data_seed = 1;
  std::string csv_path;
  std::string schema_path;
  int window_t = 64;
  int stride = 3;
  int downsample = 0;  // 0 = take the schema's value
  double val_fraction = 0.25;
};

void add_data_flags(CLI::App* cmd, DataArgs& d) {
  cmd->add_flag("--synth", d.synth, "use the built-in synthetic dataset");
  cmd->add_option("--classes", d.classes, "synthetic class count");
  cmd->add_option("--windows-per-class", d.windows_per_class, "synthetic windows per class");
  cmd->add_option("--noise", d.noise, "synthetic noise amplitude");
  cmd->add_option("--branches", d.branch_preset,
                  "branch preset (synth3|opportunity|pamap2|unimib)");
  cmd->add_option("--uninformative", d.uninformative,
                  "synthetic branches carrying no class signal")
      ->delimiter(',');
  cmd->add_option("--data-seed", d.data_seed, "synthetic data seed");
  cmd->add_option("--csv", d.csv_path, "CSV sensor stream (one row per timestamp)");
  cmd->add_option("--schema", d.schema_path, "schema file for --csv");
  cmd->add_option("--downsample", d.downsample, "keep every n-th sample (0 = schema value)");
  cmd->add_option("--window-t", d.window_t, "sliding window length T");
  cmd->add_option("--stride", d.stride, "sliding window stride");
  cmd->add_option("--val-fraction", d.val_fraction, "validation fraction of the windows");
}

int count_classes(const std::vector<int>& labels) {
  int g = 0;
  for (int l : labels) g = std::max(g, l + 1);
  return g;
}

dft::WindowDataset build_dataset(const DataArgs& d) {
  if (d.synth) {
    dft::SynthSpec spec;
    spec.classes = d.classes;
    spec.branches = dft::branch_preset(d.branch_preset);
    spec.uninformative = d.uninformative;
    spec.windows_per_class = d.windows_per_class;
    spec.window_t = d.window_t;
    spec.noise = d.noise;
    spec.seed = d.data_seed;
    return dft::synth_dataset(spec);
  }
  if (d.csv_path.empty())
    throw dft::ConfigError("no dataset: pass --synth or --csv with --schema");
  if (d.schema_path.empty()) throw dft::ConfigError("--csv requires --schema");
  const dft::DatasetSchema schema = dft::load_schema(d.schema_path);
  dft::Stream stream = dft::load_csv(d.csv_path, schema.csv);
  const int factor = d.downsample > 0 ? d.downsample : schema.downsample;
  if (factor > 1) stream = dft::downsample(stream, factor);
  if (stream.length < d.window_t) {
    std::cerr << "warning: stream shorter than one window; dataset is empty\n";
  }
  // Standardize with statistics from the leading training share of the rows.
  const int64_t train_rows =
      std::max<int64_t>(1, static_cast<int64_t>(static_cast<double>(stream.length) *
                                                (1.0 - d.val_fraction)));
  const dft::ChannelStats stats = dft::compute_channel_stats(stream, 0, train_rows);
  dft::standardize(stream, stats);
  dft::WindowDataset ds =
      dft::segment_windows(stream, d.window_t, d.stride, count_classes(stream.labels));
  ds.branches = schema.branches;
  return ds;
}

dft::FusionSpec make_fusion(const dft::WindowDataset& ds, const std::string& mode,
                            const std::vector<std::string>& reduced) {
  dft::FusionSpec f;
  f.mode = dft::fusion_mode_from_string(mode);
  f.branches = ds.branches;
  for (dft::BranchSpec& b : f.branches) b.reduced = false;
  for (const std::string& r : reduced) {
    bool found = false;
    for (dft::BranchSpec& b : f.branches) {
      if (b.name == r) {
        b.reduced = true;
        found = true;
      }
    }
    if (!found) throw dft::ConfigError("--reduced names unknown branch '" + r + "'");
  }
  if (f.mode != dft::FusionMode::dynamic && !reduced.empty())
    throw dft::ConfigError("--reduced requires --fusion dynamic");
  return f;
}

std::vector<const dft::DenseTensor*> window_ptrs(const dft::WindowDataset& ds) {
  std::vector<const dft::DenseTensor*> p;
  p.reserve(ds.windows.size());
  for (const dft::DenseTensor& w : ds.windows) p.push_back(&w);
  return p;
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream f(path);
  if (!f) throw dft::FormatError("cannot open " + path + " for writing");
  f << content;
  if (!f) throw dft::FormatError("write failed: " + path);
}

void print_eval_report(std::ostream& out, const dft::InferResult& r,
                       const std::vector<int>& labels, int classes) {
  const dft::ConfusionMatrix cm = dft::confusion_matrix(r.predictions, labels, classes);
  char buf[128];
  out << "weighted_f1 " << dft::weighted_f1(r.predictions, labels, classes) << "\n";
  out << "class precision recall\n";
  for (int g = 0; g < classes; ++g) {
    std::snprintf(buf, sizeof(buf), "%d %.6f %.6f\n", g, cm.precision(g), cm.recall(g));
    out << buf;
  }
  out << "confusion (rows actual, cols predicted)\n";
  for (int a = 0; a < classes; ++a) {
    for (int p = 0; p < classes; ++p) out << cm.at(a, p) << (p + 1 == classes ? '\n' : ' ');
  }
}

std::string metrics_csv_of_eval(const dft::InferResult& r, const std::vector<int>& labels,
                                int classes) {
  const dft::ConfusionMatrix cm = dft::confusion_matrix(r.predictions, labels, classes);
  std::ostringstream out;
  out << "metric,class,value\n";
  char buf[96];
  std::snprintf(buf, sizeof(buf), "weighted_f1,,%.9g\n",
                dft::weighted_f1(r.predictions, labels, classes));
  out << buf;
  for (int g = 0; g < classes; ++g) {
    std::snprintf(buf, sizeof(buf), "precision,%d,%.9g\n", g, cm.precision(g));
    out << buf;
    std::snprintf(buf, sizeof(buf), "recall,%d,%.9g\n", g, cm.recall(g));
    out << buf;
  }
  return out.str();
}

double time_ms(const std::function<void()>& fn, int reps) {
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < reps; ++i) fn();
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

dft::DenseTensor random_ternary_tensor(dft::Shape shape, dft::Rng& rng) {
  dft::DenseTensor t(std::move(shape));
  for (float& v : t.data) {
    const double u = rng.uniform01();
    v = u < 0.3 ? 0.0f : (u < 0.65 ? 0.5f : -0.5f);
  }
  return t;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ternary quantization-aware training and popcount inference for sensor windows"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();
  app.set_config("--config", "", "read options from a config file (flags override)");

  // ---- train ----
  CLI::App* train_cmd = app.add_subcommand("train", "train a model and export the packed form");
  train_cmd->configurable(true);
  DataArgs tdata;
  add_data_flags(train_cmd, tdata);
  double xi = 2.8;
  int kw = 2, ka = 2;
  std::string fusion_mode = "dynamic";
  std::vector<std::string> reduced;
  int epochs = 50, batch = 1024;
  uint64_t seed = 1, phi_seed = 1;
  double lambda = 1.0, target_f1 = -1.0;
  std::string out_path = "model.dftn", metrics_path, checkpoint_path, snapshot_path;
  std::string sweep_list, sweep_out;
  train_cmd->add_option("--xi", xi, "weight shift threshold");
  train_cmd->add_option("--kw", kw, "weight bit-width");
  train_cmd->add_option("--ka", ka, "activation bit-width");
  train_cmd->add_option("--fusion", fusion_mode, "early|late|dynamic");
  train_cmd->add_option("--reduced", reduced, "branches with sampled fusion weights")
      ->delimiter(',');
  train_cmd->add_option("--epochs", epochs, "training epochs");
  train_cmd->add_option("--batch", batch, "mini-batch size");
  train_cmd->add_option("--seed", seed, "training seed");
  train_cmd->add_option("--phi-seed", phi_seed, "fusion-weight sampling seed");
  train_cmd->add_option("--lambda", lambda, "per-step learning-rate decay");
  train_cmd->add_option("--target-f1", target_f1, "stop once validation F1 reaches this");
  train_cmd->add_option("--out", out_path, "packed model output path");
  train_cmd->add_option("--metrics", metrics_path, "metrics CSV path (default <out>.metrics.csv)");
  train_cmd->add_option("--checkpoint", checkpoint_path, "also write a full-precision checkpoint");
  train_cmd->add_option("--snapshot", snapshot_path,
                        "resolved-config snapshot path (default <out>.config)");
  train_cmd->add_option("--xi-sweep", sweep_list, "comma-separated xi values to sweep");
  train_cmd->add_option("--sweep-out", sweep_out, "sweep comparison CSV path");

  // ---- eval ----
  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a packed model");
  eval_cmd->configurable(true);
  DataArgs edata;
  add_data_flags(eval_cmd, edata);
  std::string eval_model, eval_split = "val", eval_emit;
  uint64_t eval_phi_seed = 1;
  eval_cmd->add_option("--model", eval_model, "packed model path")->required();
  eval_cmd->add_option("--phi-seed", eval_phi_seed, "fusion-weight sampling seed");
  eval_cmd->add_option("--split", eval_split, "train|val|all");
  eval_cmd->add_option("--emit", eval_emit, "write metrics CSV here");

  // ---- infer ----
  CLI::App* infer_cmd = app.add_subcommand("infer", "predict classes for windows");
  infer_cmd->configurable(true);
  DataArgs idata;
  add_data_flags(infer_cmd, idata);
  std::string infer_model, infer_split = "all", infer_emit;
  uint64_t infer_phi_seed = 1;
  infer_cmd->add_option("--model", infer_model, "packed model path")->required();
  infer_cmd->add_option("--phi-seed", infer_phi_seed, "fusion-weight sampling seed");
  infer_cmd->add_option("--split", infer_split, "train|val|all");
  infer_cmd->add_option("--emit", infer_emit, "write predictions CSV here");

  // ---- export ----
  CLI::App* export_cmd = app.add_subcommand("export", "pack a full-precision checkpoint");
  std::string export_ckpt, export_out = "model.dftn";
  export_cmd->add_option("--checkpoint", export_ckpt, "DFCK checkpoint path")->required();
  export_cmd->add_option("--out", export_out, "packed model output path");

  // ---- bench ----
  CLI::App* bench_cmd = app.add_subcommand("bench", "dense vs packed kernel comparison");
  std::vector<int> bench_sizes = {256, 1024, 4096};
  int bench_windows = 32;
  bench_cmd->add_option("--sizes", bench_sizes, "dot-product lengths")->delimiter(',');
  bench_cmd->add_option("--windows", bench_windows, "batch rows for the conv cases");

  // ---- selftest ----
  app.add_subcommand("selftest", "run the property suites");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (app.got_subcommand("selftest")) {
      return dft::run_selftest(std::cout) == 0 ? 0 : 1;
    }

    if (app.got_subcommand(train_cmd)) {
      dft::QuantConfig qcfg;
      qcfg.xi = xi;
      qcfg.k_w = kw;
      qcfg.k_a = ka;
      dft::TrainHyper hyper;
      hyper.epochs = epochs;
      hyper.batch = batch;
      hyper.seed = seed;
      hyper.phi_seed = phi_seed;
      hyper.lambda = lambda;
      hyper.target_f1 = target_f1;

      const dft::WindowDataset all = build_dataset(tdata);
      if (all.size() == 0) throw dft::ConfigError("dataset is empty");
      dft::WindowDataset train_set, val_set;
      dft::split_dataset(all, tdata.val_fraction, &train_set, &val_set);

      dft::NetworkConfig net;
      net.classes = all.num_classes;
      net.window_t = all.window_t;

      if (!sweep_list.empty()) {
        if (sweep_out.empty()) throw dft::ConfigError("--xi-sweep requires --sweep-out");
        std::vector<double> xis;
        std::vector<std::string> xi_names;
        std::stringstream ss(sweep_list);
        std::string tok;
        while (std::getline(ss, tok, ',')) {
          xis.push_back(std::stod(tok));
          xi_names.push_back(tok);
        }
        if (xis.empty()) throw dft::ConfigError("--xi-sweep: no values");
        const std::vector<std::pair<std::string, std::vector<std::string>>> presets = {
            {"dynamic_gp", {"back"}},            // periodic: reduce the back branch
            {"dynamic_gs", {"back", "ankle"}},   // sporadic: reduce back and ankle
        };
        std::ostringstream csv;
        char buf[64];
        csv << "preset";
        for (const std::string& name : xi_names) csv << ",xi_" << name;
        csv << '\n';
        for (const auto& [pname, preduced] : presets) {
          csv << pname;
          for (double x : xis) {
            dft::QuantConfig qc = qcfg;
            qc.xi = x;
            const dft::FusionSpec fs = make_fusion(all, "dynamic", preduced);
            const dft::TrainResult r = dft::train(train_set, val_set, net, fs, qc, hyper);
            std::snprintf(buf, sizeof(buf), ",%.9g", r.final_val_f1);
            csv << buf;
            std::cout << pname << " xi=" << x << " val_f1=" << r.final_val_f1 << "\n";
          }
          csv << '\n';
        }
        write_text_file(sweep_out, csv.str());
        std::cout << "sweep written to " << sweep_out << "\n";
        return 0;
      }

      const dft::FusionSpec fusion = make_fusion(all, fusion_mode, reduced);
      const dft::TrainResult result = dft::train(train_set, val_set, net, fusion, qcfg, hyper);
      if (result.state.alpha_warning)
        std::cerr << "warning: a layer quantized to all-zero at least once (alpha fell back to 0)\n";

      dft::save_packed(dft::export_packed(result.state), out_path);
      const std::string mpath = metrics_path.empty() ? out_path + ".metrics.csv" : metrics_path;
      write_text_file(mpath, dft::metrics_csv(result));
      if (!checkpoint_path.empty()) dft::save_checkpoint(result.state, checkpoint_path);
      const std::string spath = snapshot_path.empty() ? out_path + ".config" : snapshot_path;
      write_text_file(spath, app.config_to_str(true, true));

      std::cout << "trained " << result.history.size() << " epochs, final val F1 "
                << result.final_val_f1 << "\n";
      std::cout << "model " << out_path << ", metrics " << mpath << ", config " << spath << "\n";
      return 0;
    }

    if (app.got_subcommand(eval_cmd) || app.got_subcommand(infer_cmd)) {
      const bool is_eval = app.got_subcommand(eval_cmd);
      const DataArgs& d = is_eval ? edata : idata;
      const std::string& model_path = is_eval ? eval_model : infer_model;
      const std::string& split = is_eval ? eval_split : infer_split;
      const std::string& emit = is_eval ? eval_emit : infer_emit;
      const uint64_t pseed = is_eval ? eval_phi_seed : infer_phi_seed;

      const dft::PackedModel model = dft::load_packed(model_path);
      const dft::WindowDataset all = build_dataset(d);
      if (all.size() == 0) throw dft::ConfigError("dataset is empty");
      if (all.channels != model.channels || all.window_t != model.window_t)
        throw dft::DimensionError("dataset window shape does not match the model");
      if (all.num_classes > model.classes)
        throw dft::DimensionError("dataset has more classes than the model");

      dft::WindowDataset train_set, val_set;
      const dft::WindowDataset* use = &all;
      if (split != "all") {
        dft::split_dataset(all, d.val_fraction, &train_set, &val_set);
        use = split == "train" ? &train_set : &val_set;
      }

      const dft::InferResult r = dft::infer_packed(model, window_ptrs(*use), pseed);
      if (is_eval) {
        print_eval_report(std::cout, r, use->labels, model.classes);
        if (!emit.empty()) write_text_file(emit, metrics_csv_of_eval(r, use->labels, model.classes));
      } else {
        std::ostringstream csv;
        csv << "window,prediction";
        for (int g = 0; g < model.classes; ++g) csv << ",p" << g;
        csv << '\n';
        char buf[48];
        for (size_t i = 0; i < r.predictions.size(); ++i) {
          csv << i << ',' << r.predictions[i];
          for (int g = 0; g < model.classes; ++g) {
            std::snprintf(buf, sizeof(buf), ",%.6g",
                          r.probs.data[i * static_cast<size_t>(model.classes) +
                                       static_cast<size_t>(g)]);
            csv << buf;
          }
          csv << '\n';
        }
        std::cout << csv.str();
        if (!emit.empty()) write_text_file(emit, csv.str());
      }
      return 0;
    }

    if (app.got_subcommand(export_cmd)) {
      const dft::TrainState st = dft::load_checkpoint(export_ckpt);
      dft::save_packed(dft::export_packed(st), export_out);
      std::cout << "packed model written to " << export_out << "\n";
      return 0;
    }

    if (app.got_subcommand(bench_cmd)) {
      for (int s : bench_sizes)
        if (s < 1) throw dft::ParameterError("bench: sizes must be positive");
      if (bench_windows < 1) throw dft::ParameterError("bench: --windows must be positive");
      dft::Rng rng(7);
      std::printf("%-28s %10s %10s %8s %8s  %s\n", "case", "dense_ms", "packed_ms", "speedup",
                  "serial_x", "exact");
      bool all_exact = true;

      for (int n : bench_sizes) {
        dft::DenseTensor a = random_ternary_tensor({1, 1, n}, rng);
        dft::DenseTensor b = random_ternary_tensor({1, 1, n}, rng);
        const dft::TernaryTensor pa = dft::pack_ternary(a, 1.0);
        const dft::TernaryTensor pb = dft::pack_ternary(b, 1.4);
        double dense_val = 0.0;
        const int reps = std::max(1, 1 << 22 >> std::max(1, n / 64));
        const double dense_ms = time_ms(
            [&] {
              double acc = 0.0;
              for (int i = 0; i < n; ++i)
                acc += static_cast<double>(a.data[static_cast<size_t>(i)]) *
                       b.data[static_cast<size_t>(i)];
              dense_val = acc * pa.alpha * pb.alpha;
            },
            reps);
        double packed_val = 0.0;
        const double packed_ms = time_ms([&] { packed_val = dft::dot_packed(pa, pb); }, reps);
        double serial_val = 0.0;
        const double serial_ms = time_ms([&] { serial_val = dft::ref::dot_packed(pa, pb); }, reps);
        const bool exact = packed_val == dense_val && serial_val == dense_val;
        all_exact = all_exact && exact;
        char name[64];
        std::snprintf(name, sizeof(name), "dot n=%d", n);
        std::printf("%-28s %10.5f %10.5f %8.2f %8.2f  %s\n", name, dense_ms, packed_ms,
                    dense_ms / packed_ms, serial_ms / packed_ms, exact ? "yes" : "NO");
      }

      // Conv stages shaped like the reference network on a 63-channel input.
      struct ConvCase {
        const char* name;
        int cin, t, cout, kh;
      };
      const ConvCase cases[] = {
          {"conv2 50x27 -> 40x18", 50, 27, 40, 10},
          {"conv3 40x6 -> 30x1", 40, 6, 30, 6},
      };
      for (const ConvCase& c : cases) {
        dft::DenseTensor in = random_ternary_tensor({bench_windows, c.cin, c.t}, rng);
        dft::DenseTensor ker = random_ternary_tensor({c.cout, c.cin, c.kh}, rng);
        const dft::TernaryTensor pin = dft::pack_ternary(in, 1.0);
        const dft::TernaryTensor pker = dft::pack_ternary(ker, 0.5);
        dft::DenseTensor dense_out, packed_out, serial_out;
        const double dense_ms = time_ms([&] { dense_out = dft::conv1d_forward(in, ker, 1); }, 5);
        const double packed_ms = time_ms([&] { packed_out = dft::conv1d_packed(pin, pker, 1); }, 5);
        const double serial_ms =
            time_ms([&] { serial_out = dft::ref::conv1d_packed(pin, pker, 1); }, 5);
        bool exact = true;
        for (int64_t i = 0; i < packed_out.numel(); ++i) {
          const float want = static_cast<float>(
              pker.alpha * static_cast<double>(dense_out.data[static_cast<size_t>(i)]));
          exact = exact && packed_out.data[static_cast<size_t>(i)] == want &&
                  serial_out.data[static_cast<size_t>(i)] == want;
        }
        all_exact = all_exact && exact;
        std::printf("%-28s %10.5f %10.5f %8.2f %8.2f  %s\n", c.name, dense_ms, packed_ms,
                    dense_ms / packed_ms, serial_ms / packed_ms, exact ? "yes" : "NO");
      }

      // Memory accounting for the reference layer shapes.
      std::printf("\n%-28s %12s %12s %8s\n", "layer", "dense_bytes", "packed_bytes", "ratio");
      const std::vector<std::pair<std::string, dft::Shape>> layers = {
          {"conv1 [50,1,11]", {50, 1, 11}},
          {"conv2 [40,50,10]", {40, 50, 10}},
          {"conv3 [30,40,6]", {30, 40, 6}},
          {"fc [1890,1000]", {1890, 1000}},
      };
      for (const auto& [name, shape] : layers) {
        dft::DenseTensor t = random_ternary_tensor(shape, rng);
        const dft::TernaryTensor p = dft::pack_ternary(t, 1.0);
        const int64_t dense_bytes = t.numel() * 4;
        const int64_t packed_bytes = dft::packed_storage_bytes(p);
        std::printf("%-28s %12lld %12lld %8.2f\n", name.c_str(),
                    static_cast<long long>(dense_bytes), static_cast<long long>(packed_bytes),
                    static_cast<double>(dense_bytes) / static_cast<double>(packed_bytes));
      }
      std::printf("\nexactness: %s\n", all_exact ? "all cases exact" : "MISMATCH DETECTED");
      return all_exact ? 0 : 1;
    }
  } catch (const dft::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const dft::ParameterError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
