#include "dfternet/fusion.hpp"

#include <algorithm>
#include <cmath>

namespace dfternet {

FusionMode fusion_mode_from_string(const std::string& s) {
  if (s == "early") return FusionMode::early;
  if (s == "late") return FusionMode::late;
  if (s == "dynamic") return FusionMode::dynamic;
  throw ParameterError("unknown fusion mode: " + s);
}

const char* fusion_mode_name(FusionMode m) {
  switch (m) {
    case FusionMode::early: return "early";
    case FusionMode::late: return "late";
    case FusionMode::dynamic: return "dynamic";
  }
  return "?";
}

void FusionSpec::validate(int total_channels) const {
  if (branches.empty()) throw ConfigError("fusion spec has no branches");
  int covered = 0;
  for (size_t i = 0; i < branches.size(); ++i) {
    const BranchSpec& b = branches[i];
    if (b.chan_begin != covered)
      throw ConfigError("branch '" + b.name + "' leaves a channel gap or overlap");
    if (b.channels() <= 0) throw ConfigError("branch '" + b.name + "' has no channels");
    covered = b.chan_end;
    if (mode != FusionMode::dynamic && b.reduced)
      throw ConfigError("reduced branches are only valid in dynamic fusion");
  }
  if (covered != total_channels)
    throw ConfigError("branch ranges do not partition the input channels");
  if (mode == FusionMode::dynamic) {
    bool any_full = false;
    for (const BranchSpec& b : branches) any_full = any_full || !b.reduced;
    if (!any_full) throw ConfigError("dynamic fusion requires at least one non-reduced branch");
  }
}

bool FusionSpec::any_reduced() const {
  for (const BranchSpec& b : branches)
    if (b.reduced) return true;
  return false;
}

double keep_probability(const DenseTensor& quantized_weights) {
  const int64_t m = quantized_weights.numel();
  if (m == 0) throw DegenerateInputError("keep_probability: empty tensor");
  double s = 0.0;
  for (float v : quantized_weights.data) s += std::fabs(static_cast<double>(v));
  return s / static_cast<double>(m);
}

FusionWeights sample_fusion_weights(const FusionSpec& spec,
                                    const std::vector<const DenseTensor*>& conv3_weights,
                                    const std::vector<int>& feature_dims, const QuantConfig& cfg,
                                    bool already_quantized, Rng& rng) {
  if (conv3_weights.size() != spec.branches.size() || feature_dims.size() != spec.branches.size())
    throw DimensionError("sample_fusion_weights: per-branch argument count mismatch");

  FusionWeights out;
  out.phi.resize(spec.branches.size());
  out.keep_prob.resize(spec.branches.size(), 1.0);

  for (size_t p = 0; p < spec.branches.size(); ++p) {
    const int d = feature_dims[p];
    if (!spec.branches[p].reduced) {
      out.phi[p].assign(static_cast<size_t>(d), 1);
      continue;
    }
    double prob;
    if (already_quantized) {
      prob = keep_probability(*conv3_weights[p]);
    } else {
      prob = keep_probability(quantize_weights(*conv3_weights[p], cfg).ternary);
    }
    out.keep_prob[p] = prob;
    out.phi[p].resize(static_cast<size_t>(d));
    for (int i = 0; i < d; ++i) out.phi[p][static_cast<size_t>(i)] = rng.bernoulli(prob) ? 1 : 0;
  }
  return out;
}

DenseTensor apply_fusion(const std::vector<DenseTensor>& feature_maps,
                         const FusionWeights& weights) {
  if (feature_maps.empty()) throw DimensionError("apply_fusion: no feature maps");
  if (feature_maps.size() != weights.phi.size())
    throw DimensionError("apply_fusion: branch count mismatch");
  const int batch = feature_maps[0].dim(0);
  int total = 0;
  for (size_t p = 0; p < feature_maps.size(); ++p) {
    if (feature_maps[p].rank() != 2 || feature_maps[p].dim(0) != batch)
      throw DimensionError("apply_fusion: feature maps must be [batch, D] with equal batch");
    if (static_cast<size_t>(feature_maps[p].dim(1)) != weights.phi[p].size())
      throw DimensionError("apply_fusion: fusion weight length mismatch");
    total += feature_maps[p].dim(1);
  }

  DenseTensor out({batch, total});
  float* y = out.raw();
  for (int b = 0; b < batch; ++b) {
    int64_t off = static_cast<int64_t>(b) * total;
    for (size_t p = 0; p < feature_maps.size(); ++p) {
      const int d = feature_maps[p].dim(1);
      const float* row = feature_maps[p].raw() + static_cast<int64_t>(b) * d;
      const uint8_t* mask = weights.phi[p].data();
      for (int i = 0; i < d; ++i) y[off + i] = mask[i] ? row[i] : 0.0f;
      off += d;
    }
  }
  return out;
}

}  // namespace dfternet
