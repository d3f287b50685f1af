#pragma once

#include <cstdint>
#include <string>

#include "fsfnet/model.hpp"

namespace fsfnet {

struct CheckpointMeta {
  ModelConfig config;
  std::uint64_t seed = 0;
  std::int64_t step = 0;
};

/// Single-file archive of every parameter and batch-norm buffer as
/// little-endian 32-bit floats under their canonical dotted paths, plus a
/// JSON manifest carrying the model config, construction seed, and training
/// step. Layout documented in docs/checkpoint-format.md.
void save_checkpoint(const std::string& path, const FsfNet<float>& model,
                     std::int64_t step);

CheckpointMeta read_checkpoint_meta(const std::string& path);

/// Restores tensors into an existing model; the stored config must match
/// the model's exactly. Returns the stored step.
std::int64_t load_checkpoint_into(const std::string& path,
                                  FsfNet<float>& model);

/// Reconstructs the model the checkpoint describes and restores it.
FsfNet<float> load_checkpoint(const std::string& path);

}  // namespace fsfnet
