#include "miml/adam.hpp"

#include <cmath>
#include <string>

#include "miml/errors.hpp"

namespace miml {

AdamState make_adam(const std::vector<const Tensor*>& params, const AdamConfig& config) {
  AdamState s{.config = config};
  for (const Tensor* p : params) {
    s.first_moment.emplace_back(p->shape());
    s.second_moment.emplace_back(p->shape());
  }
  return s;
}

AdamState make_adam(const ModelParams& params, const AdamConfig& config) {
  std::vector<const Tensor*> ptrs;
  for_each_parameter(params, [&](const std::string&, const Tensor& t) { ptrs.push_back(&t); });
  return make_adam(ptrs, config);
}

void adam_step(AdamState& s, const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads) {
  if (params.size() != grads.size() || params.size() != s.first_moment.size()) {
    throw ContractError("adam_step: parameter, gradient and moment counts differ");
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (grads[i]->shape() != params[i]->shape()) throw ContractError("adam_step: gradient shape mismatch");
    if (!all_finite(*grads[i])) {
      throw NumericalError("adam_step: non-finite gradient in tensor " + std::to_string(i) + " at step " +
                           std::to_string(s.step + 1));
    }
  }

  ++s.step;
  const auto& c = s.config;
  const double t = static_cast<double>(s.step);
  const double correction1 = 1.0 - std::pow(c.beta1, t);
  const double correction2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& m = s.first_moment[i];
    auto& v = s.second_moment[i];
    Tensor& p = *params[i];
    const Tensor& g = *grads[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
      v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
      const double m_hat = m[k] / correction1;
      const double v_hat = v[k] / correction2;
      p[k] -= c.lr * m_hat / (std::sqrt(v_hat) + c.epsilon);
    }
  }
}

void adam_step(AdamState& s, ModelParams& params, const ModelParams& grads) {
  if (params.index() != grads.index()) throw ContractError("adam_step: gradient architecture mismatch");
  std::vector<Tensor*> p;
  std::vector<const Tensor*> g;
  for_each_parameter(params, [&](const std::string&, Tensor& t) { p.push_back(&t); });
  for_each_parameter(grads, [&](const std::string&, const Tensor& t) { g.push_back(&t); });
  adam_step(s, p, g);
  std::visit([](auto& q) { ++q.revision; }, params);
}

}  // namespace miml
