#include "dfternet/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "dfternet/rng.hpp"

namespace dfternet {

void WindowDataset::recompute_proportions() {
  class_proportions.assign(static_cast<size_t>(num_classes), 0.0);
  if (labels.empty()) return;
  for (int l : labels) class_proportions[static_cast<size_t>(l)] += 1.0;
  for (double& p : class_proportions) p /= static_cast<double>(labels.size());
}

WindowDataset segment_windows(const Stream& stream, int window_t, int stride, int num_classes) {
  if (window_t < 1 || stride < 1)
    throw ParameterError("segment_windows: window length and stride must be >= 1");
  WindowDataset ds;
  ds.window_t = window_t;
  ds.channels = stream.channels;
  ds.num_classes = num_classes;
  ds.sample_rate = stream.sample_rate;
  if (stream.length < window_t) {
    ds.recompute_proportions();
    return ds;  // empty; caller may warn
  }

  std::vector<int> counter(static_cast<size_t>(num_classes), 0);
  for (int64_t start = 0; start + window_t <= stream.length; start += stride) {
    DenseTensor w({window_t, stream.channels});
    std::copy(stream.values.begin() + static_cast<size_t>(start) * stream.channels,
              stream.values.begin() + static_cast<size_t>(start + window_t) * stream.channels,
              w.data.begin());
    std::fill(counter.begin(), counter.end(), 0);
    for (int64_t t = start; t < start + window_t; ++t) {
      const int l = stream.labels[static_cast<size_t>(t)];
      if (l < 0 || l >= num_classes) throw ParameterError("segment_windows: label out of range");
      counter[static_cast<size_t>(l)]++;
    }
    int best = 0;
    for (int g = 1; g < num_classes; ++g) {
      if (counter[static_cast<size_t>(g)] > counter[static_cast<size_t>(best)]) best = g;
    }
    ds.windows.push_back(std::move(w));
    ds.labels.push_back(best);
  }
  ds.recompute_proportions();
  return ds;
}

DatasetSchema load_schema(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open schema file " + path);
  DatasetSchema s;
  std::string line;
  int line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    std::istringstream ls(line);
    std::string key;
    if (!(ls >> key)) continue;
    std::string eq, value;
    ls >> eq;
    std::getline(ls, value);
    value.erase(0, value.find_first_not_of(" \t"));
    if (eq != "=")
      throw ParseError("schema: expected 'key = value' at line " + std::to_string(line_no));
    try {
      if (key == "channels") {
        s.csv.channels = std::stoi(value);
      } else if (key == "delimiter") {
        s.csv.delimiter = value.empty() ? ',' : value[0];
      } else if (key == "sample_rate") {
        s.csv.sample_rate = std::stod(value);
      } else if (key == "downsample") {
        s.downsample = std::stoi(value);
      } else if (key.rfind("branch.", 0) == 0) {
        const size_t dash = value.find('-');
        if (dash == std::string::npos)
          throw ParseError("schema: branch span must be 'first-last' at line " +
                           std::to_string(line_no));
        BranchSpec b;
        b.name = key.substr(7);
        b.chan_begin = std::stoi(value.substr(0, dash));
        b.chan_end = std::stoi(value.substr(dash + 1)) + 1;  // inclusive span
        s.branches.push_back(b);
      } else {
        throw ParseError("schema: unknown key '" + key + "' at line " + std::to_string(line_no));
      }
    } catch (const ParseError&) {
      throw;
    } catch (const std::exception&) {
      throw ParseError("schema: bad value for '" + key + "' at line " + std::to_string(line_no));
    }
  }
  if (s.csv.channels == 0) throw ConfigError("schema: missing 'channels'");
  if (s.branches.empty()) throw ConfigError("schema: no branch spans");
  if (s.downsample < 1) throw ConfigError("schema: downsample must be >= 1");
  return s;
}

Stream load_csv(const std::string& path, const CsvSchema& schema) {
  if (schema.channels < 1) throw ParameterError("load_csv: schema needs at least one channel");
  std::ifstream f(path);
  if (!f) throw ParseError("load_csv: cannot open " + path);

  Stream s;
  s.channels = schema.channels;
  s.sample_rate = schema.sample_rate;
  std::vector<uint8_t> missing;  // per value, row-major

  std::string line;
  int64_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::stringstream row(line);
    std::string cell;
    int col = 0;
    std::vector<float> vals(static_cast<size_t>(schema.channels), 0.0f);
    std::vector<uint8_t> miss(static_cast<size_t>(schema.channels), 0);
    int label = -1;
    while (std::getline(row, cell, schema.delimiter)) {
      if (col < schema.channels) {
        if (cell == "NaN" || cell == "nan" || cell.empty()) {
          miss[static_cast<size_t>(col)] = 1;
        } else {
          try {
            size_t used = 0;
            vals[static_cast<size_t>(col)] = std::stof(cell, &used);
            if (used != cell.size()) throw std::invalid_argument(cell);
          } catch (const std::exception&) {
            throw ParseError("load_csv: non-numeric channel value at line " +
                             std::to_string(line_no));
          }
        }
      } else if (col == schema.channels) {
        try {
          label = std::stoi(cell);
        } catch (const std::exception&) {
          throw ParseError("load_csv: bad label at line " + std::to_string(line_no));
        }
      }
      ++col;
    }
    if (col != schema.channels + 1)
      throw ParseError("load_csv: expected " + std::to_string(schema.channels + 1) +
                       " columns, got " + std::to_string(col) + " at line " +
                       std::to_string(line_no));
    s.values.insert(s.values.end(), vals.begin(), vals.end());
    missing.insert(missing.end(), miss.begin(), miss.end());
    s.labels.push_back(label);
    ++s.length;
  }

  // Linear interpolation of interior gaps; leading/trailing gaps become zero.
  for (int c = 0; c < s.channels; ++c) {
    int64_t t = 0;
    while (t < s.length) {
      if (!missing[static_cast<size_t>(t) * s.channels + c]) {
        ++t;
        continue;
      }
      int64_t gap_end = t;
      while (gap_end < s.length && missing[static_cast<size_t>(gap_end) * s.channels + c])
        ++gap_end;
      const bool has_prev = t > 0;
      const bool has_next = gap_end < s.length;
      const float prev = has_prev ? s.at(t - 1, c) : 0.0f;
      const float next = has_next ? s.at(gap_end, c) : 0.0f;
      for (int64_t i = t; i < gap_end; ++i) {
        float v = 0.0f;
        if (has_prev && has_next) {
          const double f = static_cast<double>(i - (t - 1)) / static_cast<double>(gap_end - (t - 1));
          v = static_cast<float>(prev + (next - prev) * f);
        } else if (has_prev) {
          v = 0.0f;  // trailing gap
        } else if (has_next) {
          v = 0.0f;  // leading gap
        }
        s.values[static_cast<size_t>(i) * s.channels + c] = v;
      }
      t = gap_end;
    }
  }
  return s;
}

ChannelStats compute_channel_stats(const Stream& stream, int64_t row_begin, int64_t row_end) {
  if (row_begin < 0 || row_end > stream.length || row_begin >= row_end)
    throw ParameterError("compute_channel_stats: bad row range");
  ChannelStats st;
  st.mean.assign(static_cast<size_t>(stream.channels), 0.0);
  st.stddev.assign(static_cast<size_t>(stream.channels), 0.0);
  const double n = static_cast<double>(row_end - row_begin);
  for (int c = 0; c < stream.channels; ++c) {
    double sum = 0.0, sumsq = 0.0;
    for (int64_t t = row_begin; t < row_end; ++t) {
      const double v = stream.at(t, c);
      sum += v;
      sumsq += v * v;
    }
    const double mu = sum / n;
    const double var = std::max(sumsq / n - mu * mu, 0.0);
    st.mean[static_cast<size_t>(c)] = mu;
    st.stddev[static_cast<size_t>(c)] = std::sqrt(var);
  }
  return st;
}

void standardize(Stream& stream, const ChannelStats& stats) {
  if (static_cast<int>(stats.mean.size()) != stream.channels)
    throw DimensionError("standardize: stats channel count mismatch");
  for (int64_t t = 0; t < stream.length; ++t) {
    for (int c = 0; c < stream.channels; ++c) {
      const double sd = stats.stddev[static_cast<size_t>(c)];
      const double denom = sd > 0.0 ? sd : 1.0;
      float& v = stream.values[static_cast<size_t>(t) * stream.channels + c];
      v = static_cast<float>((v - stats.mean[static_cast<size_t>(c)]) / denom);
    }
  }
}

Stream downsample(const Stream& stream, int factor) {
  if (factor < 1) throw ParameterError("downsample: factor must be >= 1");
  Stream out;
  out.channels = stream.channels;
  out.sample_rate = stream.sample_rate / factor;
  for (int64_t t = 0; t < stream.length; t += factor) {
    out.values.insert(out.values.end(),
                      stream.values.begin() + static_cast<size_t>(t) * stream.channels,
                      stream.values.begin() + static_cast<size_t>(t + 1) * stream.channels);
    out.labels.push_back(stream.labels[static_cast<size_t>(t)]);
    ++out.length;
  }
  return out;
}

WindowDataset synth_dataset(const SynthSpec& spec) {
  if (spec.classes < 2) throw ParameterError("synth_dataset: need at least two classes");
  if (spec.branches.empty()) throw ParameterError("synth_dataset: need at least one branch");

  WindowDataset ds;
  ds.window_t = spec.window_t;
  ds.num_classes = spec.classes;
  ds.branches = spec.branches;
  ds.channels = spec.branches.back().chan_end;
  ds.sample_rate = 0.0;

  std::vector<bool> info(spec.branches.size(), true);
  for (size_t p = 0; p < spec.branches.size(); ++p) {
    for (const std::string& name : spec.uninformative) {
      if (spec.branches[p].name == name) info[p] = false;
    }
  }

  Rng rng(spec.seed);
  const double two_pi = 2.0 * 3.14159265358979323846;

  for (int g = 0; g < spec.classes; ++g) {
    for (int wdx = 0; wdx < spec.windows_per_class; ++wdx) {
      DenseTensor w({spec.window_t, ds.channels});
      for (size_t p = 0; p < spec.branches.size(); ++p) {
        const BranchSpec& br = spec.branches[p];
        // Class signature: two harmonics whose frequency depends on the class
        // (and branch) for informative branches, fixed otherwise.
        const double f1 = info[p] ? 1.5 + 1.0 * g + 0.25 * static_cast<double>(p) : 2.0;
        const double f2 = info[p] ? 3.0 + 1.5 * g + 0.5 * static_cast<double>(p) : 5.0;
        const double phase1 = rng.uniform(0.0, two_pi);
        const double phase2 = rng.uniform(0.0, two_pi);
        for (int c = br.chan_begin; c < br.chan_end; ++c) {
          const double chan_phase = 0.7 * static_cast<double>(c - br.chan_begin);
          for (int t = 0; t < spec.window_t; ++t) {
            const double x = static_cast<double>(t) / spec.window_t;
            double v = std::sin(two_pi * f1 * x + phase1 + chan_phase) +
                       0.6 * std::sin(two_pi * f2 * x + phase2 - chan_phase);
            v += spec.noise * rng.normal();
            w.data[static_cast<size_t>(t) * ds.channels + c] = static_cast<float>(v);
          }
        }
      }
      ds.windows.push_back(std::move(w));
      ds.labels.push_back(g);
    }
  }
  ds.recompute_proportions();
  return ds;
}

ConfusionMatrix confusion_matrix(const std::vector<int>& predictions,
                                 const std::vector<int>& labels, int num_classes) {
  if (predictions.size() != labels.size())
    throw DimensionError("confusion_matrix: length mismatch");
  ConfusionMatrix cm;
  cm.num_classes = num_classes;
  cm.counts.assign(static_cast<size_t>(num_classes) * num_classes, 0);
  for (size_t i = 0; i < labels.size(); ++i) {
    const int a = labels[i], p = predictions[i];
    if (a < 0 || a >= num_classes || p < 0 || p >= num_classes)
      throw ParameterError("confusion_matrix: class index out of range");
    cm.counts[static_cast<size_t>(a) * num_classes + p]++;
  }
  return cm;
}

double ConfusionMatrix::precision(int g) const {
  int64_t tp = at(g, g), predicted = 0;
  for (int a = 0; a < num_classes; ++a) predicted += at(a, g);
  return predicted > 0 ? static_cast<double>(tp) / static_cast<double>(predicted) : 0.0;
}

double ConfusionMatrix::recall(int g) const {
  int64_t tp = at(g, g), actual = 0;
  for (int p = 0; p < num_classes; ++p) actual += at(g, p);
  return actual > 0 ? static_cast<double>(tp) / static_cast<double>(actual) : 0.0;
}

double weighted_f1(const std::vector<int>& predictions, const std::vector<int>& labels,
                   int num_classes) {
  if (labels.empty()) throw DegenerateInputError("weighted_f1: empty input");
  const ConfusionMatrix cm = confusion_matrix(predictions, labels, num_classes);
  const double total = static_cast<double>(labels.size());
  double f = 0.0;
  for (int g = 0; g < num_classes; ++g) {
    int64_t ng = 0;
    for (int p = 0; p < num_classes; ++p) ng += cm.at(g, p);
    if (ng == 0) continue;
    const double w = static_cast<double>(ng) / total;
    const double prec = cm.precision(g), rec = cm.recall(g);
    if (prec + rec > 0.0) f += w * (prec * rec) / (prec + rec);
  }
  return 2.0 * f;
}

std::vector<BranchSpec> branch_preset(const std::string& name) {
  if (name == "opportunity") {
    return {{"hand", 0, 36, false}, {"back", 36, 45, false}, {"ankle", 45, 63, false}};
  }
  if (name == "pamap2") {
    return {{"hand", 0, 12, false}, {"back", 12, 24, false}, {"ankle", 24, 36, false}};
  }
  if (name == "unimib") {
    return {{"acc", 0, 3, false}};
  }
  if (name == "synth3") {
    return {{"hand", 0, 4, false}, {"back", 4, 8, false}, {"ankle", 8, 12, false}};
  }
  throw ParameterError("unknown branch preset: " + name);
}

}  // namespace dfternet
