#pragma once

#include <cstdint>
#include <vector>

#include "miml/model.hpp"
#include "miml/tensor.hpp"

namespace miml {

struct AdamConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
  std::uint64_t step = 0;
};

AdamState make_adam(const std::vector<const Tensor*>& params, const AdamConfig& config);
AdamState make_adam(const ModelParams& params, const AdamConfig& config);

/// One bias-corrected Adam update:
///   m = b1 m + (1 - b1) g;  v = b2 v + (1 - b2) g²
///   θ -= lr · (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
/// Throws NumericalError, leaving everything untouched, if any gradient is
/// not finite.
void adam_step(AdamState& state, const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads);
void adam_step(AdamState& state, ModelParams& params, const ModelParams& grads);

}  // namespace miml
