#include "miml/loss.hpp"

#include <algorithm>
#include <cmath>

#include "miml/errors.hpp"

namespace miml {

double LossConfig::normalization(double p) const { return alpha * std::pow(p, gamma) + beta; }

LossResult partial_bce(const Tensor& scores, const Tensor& labels, const Tensor& mask, const LossConfig& cfg) {
  if (scores.rank() != 2 || labels.shape() != scores.shape() || mask.shape() != scores.shape()) {
    throw ContractError("partial_bce: scores, labels and mask must share a [B x L] shape");
  }
  const std::size_t b = scores.dim(0), l = scores.dim(1);
  LossResult out{.loss = 0.0, .grad = Tensor(scores.shape()), .per_bag = std::vector<double>(b, 0.0)};

  std::vector<double> weight(b, 0.0);
  for (std::size_t i = 0; i < b; ++i) {
    std::size_t n_obs = 0;
    for (std::size_t j = 0; j < l; ++j) n_obs += mask.at(i, j) != 0.0;
    if (n_obs == 0) continue;
    ++out.contributing_bags;
    const double p = static_cast<double>(n_obs) / static_cast<double>(l);
    weight[i] = cfg.normalization(p) / static_cast<double>(l);
    double ll = 0.0;
    for (std::size_t j = 0; j < l; ++j) {
      if (mask.at(i, j) == 0.0) continue;
      const double q = std::clamp(scores.at(i, j), kProbabilityClamp, 1.0 - kProbabilityClamp);
      const double y = labels.at(i, j);
      ll += y * std::log(q) + (1.0 - y) * std::log(1.0 - q);
    }
    out.per_bag[i] = -weight[i] * ll;
  }
  if (out.contributing_bags == 0) throw DataError("partial_bce: no observed labels in the batch");

  const double n = static_cast<double>(out.contributing_bags);
  for (std::size_t i = 0; i < b; ++i) out.loss += out.per_bag[i];
  out.loss /= n;

  for (std::size_t i = 0; i < b; ++i) {
    if (weight[i] == 0.0) continue;
    for (std::size_t j = 0; j < l; ++j) {
      if (mask.at(i, j) == 0.0) continue;
      const double raw = scores.at(i, j);
      // The clamp is flat outside its interval.
      if (raw < kProbabilityClamp || raw > 1.0 - kProbabilityClamp) continue;
      const double y = labels.at(i, j);
      out.grad.at(i, j) = -weight[i] / n * (y / raw - (1.0 - y) / (1.0 - raw));
    }
  }
  return out;
}

}  // namespace miml
