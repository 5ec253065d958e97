#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "miml/adam.hpp"
#include "miml/checkpoint.hpp"
#include "miml/dataset.hpp"
#include "miml/loss.hpp"
#include "miml/model.hpp"

namespace miml {

/// Training hyperparameters. JSON config files use flat keys named after the
/// fields below; the loss weights are spelled loss_alpha / loss_beta /
/// loss_gamma.
struct TrainConfig {
  std::size_t batch_size = 128;
  double lr = 5e-4;
  std::size_t epochs = 250;
  std::uint64_t seed = 0;
  std::string checkpoint_dir;  // empty: keep the best checkpoint in memory only
  LossConfig loss;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  double dropout_rate = kDefaultDropout;
  double val_fraction = 0.15;  // used only when the dataset has no val split
  std::vector<std::size_t> fc_hidden{512, 512};
};

void validate(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});
nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig load_train_config(const std::filesystem::path& path);
// Human-readable key list for --help.
std::string train_config_schema();

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
};

struct TrainResult {
  Checkpoint checkpoint;  // best-validation parameters, rounded to f32
  std::vector<EpochRecord> history;
};

std::string history_csv(const std::vector<EpochRecord>& history);

/// Mean partial BCE of `params` over the given bags in eval mode.
double evaluation_loss(const ModelParams& params, const Dataset& dataset, std::span<const std::size_t> indices,
                       const LossConfig& loss);

/// Trains one model. If the dataset has no validation bags, cfg.val_fraction
/// of the train bags is moved to validation first (seeded by cfg.seed).
/// The checkpoint is replaced whenever validation loss strictly improves.
/// Bit-deterministic for a given (kind, dataset, cfg).
TrainResult train(ModelKind kind, const Dataset& dataset, const TrainConfig& cfg);

/// Independent train() per seed, results ordered by ascending seed. Runs use
/// up to `max_parallel` worker threads (0 = hardware concurrency); the
/// results do not depend on the thread count. With cfg.checkpoint_dir set,
/// seed s writes to <checkpoint_dir>/seed_<s>.
std::vector<TrainResult> run_seeds(ModelKind kind, const Dataset& dataset, const TrainConfig& cfg,
                                   std::vector<std::uint64_t> seeds, std::size_t max_parallel = 0);

}  // namespace miml
