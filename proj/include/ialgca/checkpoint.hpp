#pragma once

#include <string>
#include <vector>

#include "ialgca/param.hpp"

namespace ialgca {

// Checkpoint layout: magic "IALGCA01", u32le parameter count, then per
// parameter: u32le name length, name bytes (UTF-8), u32le rank, u32le dims,
// raw float32le values.

struct CheckpointEntry {
  std::string name;
  std::vector<int> shape;
  std::vector<float> values;
};

void save_checkpoint(const std::string& path, const ParamSet<float>& params);
std::vector<CheckpointEntry> read_checkpoint(const std::string& path);

// Strict restore: every stored name must exist with identical dims, and every
// registered parameter must be present in the file.
void load_checkpoint_into(const std::string& path, ParamSet<float>& params);

}  // namespace ialgca
