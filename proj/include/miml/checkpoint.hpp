#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "miml/model.hpp"

namespace miml {

struct CheckpointMeta {
  ModelKind kind = ModelKind::att;
  std::size_t num_labels = 0;
  std::size_t num_instances = 0;
  std::size_t feature_dim = 0;
  std::vector<std::string> label_names;
  nlohmann::json hyperparameters = nlohmann::json::object();
  std::uint64_t seed = 0;
  std::size_t epoch = 0;
  double validation_loss = 0.0;
  std::size_t parameter_census = 0;
};

struct Checkpoint {
  CheckpointMeta meta;
  ModelParams params;
};

/// Directory layout: manifest.json plus one little-endian <f4 NPY file per
/// learnable tensor and batch-norm buffer, named "<tensor name>.npy".
/// Saving a loaded checkpoint reproduces the original bytes.
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& dir);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

/// Rounds every tensor to float precision, matching what a save/load cycle yields.
void round_to_f32(ModelParams& params);

}  // namespace miml
