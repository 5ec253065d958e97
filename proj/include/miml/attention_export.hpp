#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "miml/checkpoint.hpp"
#include "miml/dataset.hpp"

namespace miml {

struct LabelAttention {
  std::string label;
  double bag_score = 0.0;
  std::vector<double> instance_scores;
  std::vector<double> weights;
  bool observed = false;
  int value = 0;  // ground truth, meaningful only when observed
};

struct SampleAttention {
  std::string sample_key;
  std::vector<LabelAttention> labels;
};

/// Eval-mode instance scores, attention weights and bag scores for each
/// requested sample. FC_T checkpoints report their uniform weights; the FC
/// baseline has no instances and is rejected.
std::vector<SampleAttention> export_attention(const Checkpoint& checkpoint, const Dataset& dataset,
                                              const std::vector<std::string>& sample_keys);

nlohmann::json attention_json(const std::vector<SampleAttention>& samples);

/// SVG 1.1 drawing: one horizontal strip per label, one cell per instance,
/// cell opacity = weight / max weight of that strip.
std::string attention_svg(const SampleAttention& sample);

}  // namespace miml
