#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "miml/rng.hpp"
#include "miml/tensor.hpp"

namespace miml {

enum class Split { train, val, test };

std::string_view split_name(Split split);
Split parse_split(std::string_view name);

/// One weakly labeled example: R instances of D features, plus per-label
/// presence (`labels`) that is meaningful only where `observed` is set.
struct Bag {
  std::string sample_key;
  std::size_t num_instances = 0;
  std::size_t feature_dim = 0;
  std::vector<float> features;           // row-major R × D, values in [0, 1]
  std::vector<std::uint8_t> labels;      // length L, 0 or 1
  std::vector<std::uint8_t> observed;    // length L, 1 = annotated
  Split split = Split::train;

  std::size_t observed_count() const;
};

struct Dataset {
  std::vector<std::string> label_names;
  std::vector<Bag> bags;
  std::string provenance;

  std::size_t num_labels() const { return label_names.size(); }
  // Shape of the first bag; validate() ensures every bag agrees.
  std::size_t num_instances() const { return bags.empty() ? 0 : bags.front().num_instances; }
  std::size_t feature_dim() const { return bags.empty() ? 0 : bags.front().feature_dim; }

  std::vector<std::size_t> indices(Split split) const;
  std::size_t count(Split split) const;
};

/// Checks the structural invariants (unique keys, consistent R/D/L, label
/// vectors sized L, features in [0, 1]). Throws DataError on violation.
void validate(const Dataset& dataset);

/// Stacks the selected bags into a [B × R × D] tensor.
Tensor gather_features(const Dataset& dataset, std::span<const std::size_t> indices);
/// Stacks labels and observation masks into two [B × L] tensors of 0/1.
std::pair<Tensor, Tensor> gather_labels(const Dataset& dataset, std::span<const std::size_t> indices);

/// Moves floor(fraction · |train|) uniformly sampled train bags to val.
Dataset split_validation(const Dataset& dataset, double fraction, RngStream& rng);

// --- Interchange directory format -----------------------------------------
//   manifest.json  counts, L, R, D, label_names, provenance
//   features.npy   N × R × D, <f4
//   labels.csv     sample_key,label_name,value   (observed labels only)
//   splits.csv     sample_key,split              (bag order)
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

// --- OpenMIC import -------------------------------------------------------
struct OpenMicPaths {
  std::filesystem::path npz;
  std::filesystem::path train_split;
  std::filesystem::path test_split;
  std::optional<std::filesystem::path> class_map;
};

/// Y_true > 0.5 where Y_mask is set becomes an observed positive. Without a
/// class map, labels are named label_00 .. label_{L-1}.
Dataset import_openmic(const OpenMicPaths& paths);

// Reads one sample key per line; a first line equal to "sample_key" is
// treated as a header and skipped.
std::vector<std::string> read_key_list(const std::filesystem::path& path);

// --- Synthetic MIML data with planted instance-level truth ---------------
struct SynthSpec {
  std::size_t n_bags = 2000;
  std::size_t n_labels = 5;
  std::size_t bag_size = 10;
  std::size_t feature_dim = 16;
  double label_rate = 0.3;            // P(label positive in a bag)
  std::size_t min_positives = 1;      // planted instances per positive label
  std::size_t max_positives = 2;
  double observe_rate = 0.7;
  double noise_scale = 0.1;
  double test_fraction = 0.2;
  std::uint64_t seed = 0;
};

void validate(const SynthSpec& spec);
// Flat JSON object keyed by the field names above; every key optional,
// unknown keys rejected.
SynthSpec synth_spec_from_json(const nlohmann::json& j, SynthSpec base = {});
nlohmann::json to_json(const SynthSpec& spec);
std::string synth_spec_schema();

/// truth[bag][instance * L + label] = 1 iff that instance was planted for that label.
struct SyntheticData {
  Dataset dataset;
  std::vector<std::vector<std::uint8_t>> instance_truth;
};

SyntheticData generate_synthetic(const SynthSpec& spec);

}  // namespace miml
