#pragma once

#include <vector>

#include "miml/tensor.hpp"

namespace miml {

/// Weight g(p) = alpha * p^gamma + beta applied to a bag's summed log-loss,
/// where p is the fraction of its labels that are observed.
struct LossConfig {
  double alpha = 1.0;
  double beta = 0.0;
  double gamma = -1.0;

  double normalization(double observed_fraction) const;
};

inline constexpr double kProbabilityClamp = 1e-7;

struct LossResult {
  double loss = 0.0;              // mean over bags with at least one observed label
  Tensor grad;                    // d loss / d scores, [B × L]
  std::vector<double> per_bag;    // 0 for bags without observed labels
  std::size_t contributing_bags = 0;
};

/// Partial binary cross-entropy over observed labels only:
///   loss_i = -g(p_i) / L * Σ_{l observed} [y log q + (1 - y) log(1 - q)]
/// Scores are clamped to [1e-7, 1 - 1e-7] before the logs. With the default
/// config this is the mean BCE over each bag's observed labels.
/// Throws DataError if no label in the batch is observed.
LossResult partial_bce(const Tensor& scores, const Tensor& labels, const Tensor& mask, const LossConfig& cfg = {});

}  // namespace miml
