#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tmlab/model.hpp"
#include "tmlab/optim.hpp"

namespace tmlab::model {

inline constexpr const char* kCheckpointFormat = "tmlab-ckpt";
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  ModelParams<float> params;
  std::optional<OptimizerState<float>> optimizer;
  // Class list of the training data before rare classes were folded into
  // "unknown". Empty when identical to params.class_names.
  std::vector<std::string> dataset_classes;
};

// Header JSON line, then one binary record per tensor:
//   u32 name length | name | "f32" | u32 rank | u64 dims[rank] | f32 LE payload
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);

// Throws ParseError on truncation or malformed records and DimensionError when
// a tensor disagrees with the header dimensions. Never returns a partial model.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace tmlab::model
