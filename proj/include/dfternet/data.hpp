#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dfternet/fusion.hpp"
#include "dfternet/tensor.hpp"

namespace dfternet {

// Multichannel time series with one integer label per timestamp.
struct Stream {
  int channels = 0;
  int64_t length = 0;
  std::vector<float> values;  // row-major [t][c]
  std::vector<int> labels;
  double sample_rate = 0.0;

  float at(int64_t t, int c) const { return values[static_cast<size_t>(t) * channels + c]; }
};

struct CsvSchema {
  int channels = 0;       // label column follows the channel columns
  char delimiter = ',';
  double sample_rate = 0.0;
};

// Schema file: plain key-value text. Keys: channels, delimiter, sample_rate,
// downsample, window_t, stride, and one `branch.<name> = first-last`
// (inclusive columns) per sensor branch.
struct DatasetSchema {
  CsvSchema csv;
  std::vector<BranchSpec> branches;
  int downsample = 1;
  int window_t = 0;  // 0 = unspecified
  int stride = 0;    // 0 = unspecified
};

DatasetSchema load_schema(const std::string& path);

// Segmented sensor windows. Each window is a [T, S] matrix with a majority
// label; branch ranges name the channel spans feeding each sub-network.
struct WindowDataset {
  int window_t = 0;
  int channels = 0;
  int num_classes = 0;
  std::vector<DenseTensor> windows;  // each [T, S]
  std::vector<int> labels;
  std::vector<BranchSpec> branches;
  std::vector<double> class_proportions;
  double sample_rate = 0.0;

  int64_t size() const { return static_cast<int64_t>(windows.size()); }
  void recompute_proportions();
};

// Sliding windows starting at 0, stride, 2*stride, ...; majority timestamp
// label per window, ties to the smallest class index. A stream shorter than
// T yields an empty dataset.
WindowDataset segment_windows(const Stream& stream, int window_t, int stride, int num_classes);

// One row per timestamp: channel columns then an integer label column. "NaN"
// marks gaps, which are linearly interpolated per channel (leading/trailing
// gaps zero-filled).
Stream load_csv(const std::string& path, const CsvSchema& schema);

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> stddev;
};

// Per-channel statistics over stream rows [row_begin, row_end).
ChannelStats compute_channel_stats(const Stream& stream, int64_t row_begin, int64_t row_end);

void standardize(Stream& stream, const ChannelStats& stats);

// Keep every `factor`-th sample (labels included).
Stream downsample(const Stream& stream, int factor);

struct SynthSpec {
  int classes = 4;
  std::vector<BranchSpec> branches;    // channel layout; `reduced` flags ignored here
  std::vector<std::string> uninformative;  // branch names carrying no class signal
  int windows_per_class = 100;
  int window_t = 64;
  double noise = 0.3;
  uint64_t seed = 1;
};

// Per-class mixtures of per-branch sinusoids plus Gaussian noise.
// Uninformative branches emit the same signal family for every class.
WindowDataset synth_dataset(const SynthSpec& spec);

// Class-proportion-weighted F1: 2 * sum_g w_g * p_g*r_g/(p_g+r_g) with
// w_g = N_g / N_total taken from the labels.
double weighted_f1(const std::vector<int>& predictions, const std::vector<int>& labels, int num_classes);

struct ConfusionMatrix {
  int num_classes = 0;
  std::vector<int64_t> counts;  // [actual][predicted]

  int64_t at(int actual, int predicted) const {
    return counts[static_cast<size_t>(actual) * num_classes + predicted];
  }
  double precision(int g) const;
  double recall(int g) const;
};

ConfusionMatrix confusion_matrix(const std::vector<int>& predictions,
                                 const std::vector<int>& labels, int num_classes);

// Named channel-range presets matching the supported sensor layouts.
std::vector<BranchSpec> branch_preset(const std::string& name);

}  // namespace dfternet
