#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dfternet/model.hpp"

namespace dfternet {

// Packed run-time model ("DFTN"), little-endian throughout. Serialization is
// bit-exact: deserialize(serialize(m)) reproduces the same bytes.
std::vector<uint8_t> serialize_packed(const PackedModel& model);
PackedModel deserialize_packed(const std::vector<uint8_t>& bytes);

void save_packed(const PackedModel& model, const std::string& path);
PackedModel load_packed(const std::string& path);

// Full-precision training snapshot ("DFCK"): shadow weights, batch-norm
// states and activation scales. Enough to export or evaluate; optimizer
// accumulators are not carried.
std::vector<uint8_t> serialize_checkpoint(const TrainState& state);
TrainState deserialize_checkpoint(const std::vector<uint8_t>& bytes);

void save_checkpoint(const TrainState& state, const std::string& path);
TrainState load_checkpoint(const std::string& path);

}  // namespace dfternet
