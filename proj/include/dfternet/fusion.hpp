#pragma once

#include <string>
#include <vector>

#include "dfternet/quantize.hpp"
#include "dfternet/rng.hpp"
#include "dfternet/tensor.hpp"

namespace dfternet {

enum class FusionMode { early, late, dynamic };

FusionMode fusion_mode_from_string(const std::string& s);
const char* fusion_mode_name(FusionMode m);

struct BranchSpec {
  std::string name;
  int chan_begin = 0;
  int chan_end = 0;  // exclusive
  bool reduced = false;

  int channels() const { return chan_end - chan_begin; }
};

// Which sensor branches exist, how the input channels split across them, and
// which branches get Bernoulli-sampled fusion weights.
struct FusionSpec {
  FusionMode mode = FusionMode::late;
  std::vector<BranchSpec> branches;

  void validate(int total_channels) const;
  bool any_reduced() const;
};

struct FusionWeights {
  // One 0/1 mask per branch, each of that branch's flattened feature length.
  std::vector<std::vector<uint8_t>> phi;
  std::vector<double> keep_prob;
};

// P(phi_d = 1) = sum|Wq_i| / m over a ternary-quantized weight tensor.
double keep_probability(const DenseTensor& quantized_weights);

// Samples per-branch fusion weights. Non-reduced branches get all-ones.
// Reduced branches draw i.i.d. Bernoulli(keep_probability) bits per feature
// dimension. `conv3_weights` holds one tensor per branch; if
// `already_quantized` is false they are full-precision and are ternarized
// here with the branch's own xi-calibrated scale.
FusionWeights sample_fusion_weights(const FusionSpec& spec,
                                    const std::vector<const DenseTensor*>& conv3_weights,
                                    const std::vector<int>& feature_dims, const QuantConfig& cfg,
                                    bool already_quantized, Rng& rng);

// Hadamard-mask each branch's features, then concatenate in branch order.
// feature_maps[p] is [B, D_p]; result is [B, sum D_p].
DenseTensor apply_fusion(const std::vector<DenseTensor>& feature_maps,
                         const FusionWeights& weights);

}  // namespace dfternet
