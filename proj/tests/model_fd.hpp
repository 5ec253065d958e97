#pragma once

// Finite-difference audit of the model backward pass, shared by the unit
// tests and the acceptance binary.

#include <algorithm>
#include <cstdint>
#include <vector>

#include "miml/model.hpp"
#include "oracles.hpp"

namespace fdcheck {

struct Report {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // coordinates whose perturbation crossed a ReLU kink
};

inline std::vector<miml::Tensor*> parameter_list(miml::ModelParams& p) {
  std::vector<miml::Tensor*> out;
  miml::for_each_parameter(p, [&](const std::string&, miml::Tensor& t) { out.push_back(&t); });
  return out;
}

// Sign pattern of every piecewise-linear activation input in a trace.
inline std::vector<bool> kink_pattern(const miml::ForwardTrace& trace) {
  std::vector<bool> bits;
  auto add = [&](const miml::Tensor& t) {
    for (double v : t.values()) bits.push_back(v > 0.0);
  };
  if (trace.kind == miml::ModelKind::fc) {
    for (const auto& t : trace.fc_preacts) add(t);
  } else {
    for (const auto& b : trace.embedding.blocks) add(b.normalized);
  }
  return bits;
}

struct Probe {
  double loss;
  std::vector<bool> kinks;
};

// loss = Σ G ⊙ S for a train-mode forward with a fixed dropout stream.
inline Probe probe(miml::ModelParams params, const miml::Tensor& x, const miml::Tensor& g, std::uint64_t dropout_seed) {
  miml::RngStream rng(dropout_seed);
  const auto r = miml::forward(params, x, miml::Mode::train, rng);
  double loss = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) loss += g[i] * r.bag_scores[i];
  return {loss, kink_pattern(r.trace)};
}

// Compares the analytic gradient against central differences on up to
// `per_tensor` coordinates of every learnable tensor (all of them when the
// tensor is smaller). Coordinates whose ±step forwards disagree on any ReLU
// sign are redrawn, since the loss is not differentiable there. The error
// denominator is floored at 1e-6: affine biases feeding a batch norm have an
// exactly zero gradient, and round-off in the difference quotient is ~1e-11.
inline Report check(const miml::ModelParams& params, const miml::Tensor& x, const miml::Tensor& g,
                    std::uint64_t dropout_seed, std::size_t per_tensor, miml::RngStream& pick, double step = 1e-5,
                    double floor = 1e-6) {
  miml::ModelParams base = params;
  miml::RngStream rng(dropout_seed);
  const auto fwd = miml::forward(base, x, miml::Mode::train, rng);
  auto grads = miml::backward(base, fwd.trace, g);
  const auto grad_list = parameter_list(grads);

  Report report;
  miml::ModelParams work = params;
  const auto work_list = parameter_list(work);
  for (std::size_t t = 0; t < work_list.size(); ++t) {
    const std::size_t n = work_list[t]->size();
    std::vector<std::size_t> coords;
    if (n <= per_tensor) {
      for (std::size_t i = 0; i < n; ++i) coords.push_back(i);
    } else {
      for (std::size_t i = 0; i < per_tensor; ++i) coords.push_back(static_cast<std::size_t>(pick.below(n)));
    }
    std::size_t attempts = 0;
    for (std::size_t c = 0; c < coords.size(); ++c) {
      const std::size_t i = coords[c];
      double& theta = (*work_list[t])[i];
      const double saved = theta;
      theta = saved + step;
      const auto up = probe(work, x, g, dropout_seed);
      theta = saved - step;
      const auto down = probe(work, x, g, dropout_seed);
      theta = saved;
      if (up.kinks != down.kinks) {
        ++report.skipped;
        if (n > per_tensor && ++attempts < 10 * per_tensor) coords.push_back(static_cast<std::size_t>(pick.below(n)));
        continue;
      }
      const double numeric = (up.loss - down.loss) / (2.0 * step);
      const double err = oracle::relative_error((*grad_list[t])[i], numeric, floor);
      report.max_relative_error = std::max(report.max_relative_error, err);
      ++report.checked;
    }
  }
  return report;
}

}  // namespace fdcheck
