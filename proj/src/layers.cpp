#include "miml/layers.hpp"

#include <cmath>
#include <string>

#include "miml/errors.hpp"

namespace miml {

double sigmoid(double x) {
  // Branch on sign so exp() never overflows.
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Tensor sigmoid(const Tensor& x) {
  Tensor y = x;
  for (auto& v : y.values()) v = sigmoid(v);
  return y;
}

Tensor relu(const Tensor& x) {
  Tensor y = x;
  for (auto& v : y.values()) v = v > 0.0 ? v : 0.0;
  return y;
}

Tensor leaky_relu(const Tensor& x, double slope) {
  if (slope < 0.0) throw ContractError("leaky_relu slope must be non-negative");
  Tensor y = x;
  for (auto& v : y.values()) v = v > 0.0 ? v : slope * v;
  return y;
}

Tensor relu_backward(const Tensor& grad_out, const Tensor& x) {
  Tensor g = grad_out;
  for (std::size_t i = 0; i < g.size(); ++i)
    if (!(x[i] > 0.0)) g[i] = 0.0;
  return g;
}

Tensor leaky_relu_backward(const Tensor& grad_out, const Tensor& x, double slope) {
  Tensor g = grad_out;
  for (std::size_t i = 0; i < g.size(); ++i)
    if (!(x[i] > 0.0)) g[i] *= slope;
  return g;
}

Tensor sigmoid_backward(const Tensor& grad_out, const Tensor& y) {
  Tensor g = grad_out;
  for (std::size_t i = 0; i < g.size(); ++i) g[i] *= y[i] * (1.0 - y[i]);
  return g;
}

Affine make_affine(std::size_t in, std::size_t out) { return Affine{Tensor({in, out}), Tensor({out})}; }

Affine init_affine(std::size_t in, std::size_t out, RngStream& rng) {
  Affine layer = make_affine(in, out);
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  for (auto& w : layer.weight.values()) w = rng.uniform(-limit, limit);
  return layer;
}

Tensor affine_forward(const Tensor& x, const Affine& layer) {
  return add_row(matmul(x, layer.weight), layer.bias);
}

AffineGrads affine_backward(const Tensor& grad_out, const Tensor& x, const Affine& layer) {
  return AffineGrads{
      .grad_x = matmul_nt(grad_out, layer.weight),
      .grad_weight = matmul_tn(x, grad_out),
      .grad_bias = column_sums(grad_out),
  };
}

BatchNormState make_batchnorm(std::size_t features) {
  return BatchNormState{
      .gamma = Tensor({features}, 1.0),
      .beta = Tensor({features}, 0.0),
      .running_mean = Tensor({features}, 0.0),
      .running_var = Tensor({features}, 1.0),
  };
}

BatchNormResult batchnorm_forward(const Tensor& x, BatchNormState& state, Mode mode) {
  if (x.rank() != 2) throw ContractError("batchnorm input must be [batch x features]");
  const std::size_t rows = x.dim(0), f = x.dim(1);
  if (f != state.features()) {
    throw ContractError("batchnorm expects " + std::to_string(state.features()) + " features, got " +
                        std::to_string(f));
  }
  if (mode == Mode::train && rows < 2) {
    throw ContractError("batchnorm in train mode needs at least 2 rows, got " + std::to_string(rows));
  }

  Tensor mean({f});
  Tensor var({f});
  if (mode == Mode::train) {
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < f; ++j) mean[j] += x[i * f + j];
    for (std::size_t j = 0; j < f; ++j) mean[j] /= static_cast<double>(rows);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < f; ++j) {
        const double d = x[i * f + j] - mean[j];
        var[j] += d * d;
      }
    for (std::size_t j = 0; j < f; ++j) var[j] /= static_cast<double>(rows);
  } else {
    mean = state.running_mean;
    var = state.running_var;
  }

  BatchNormCache cache{.mode = mode, .normalized = Tensor({rows, f}), .inv_std = Tensor({f}), .gamma = state.gamma};
  for (std::size_t j = 0; j < f; ++j) {
    const double guarded = var[j] + state.epsilon;
    if (!(guarded > 0.0)) throw NumericalError("batchnorm: non-positive variance after epsilon guard");
    cache.inv_std[j] = 1.0 / std::sqrt(guarded);
  }

  Tensor y({rows, f});
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < f; ++j) {
      const double xhat = (x[i * f + j] - mean[j]) * cache.inv_std[j];
      cache.normalized[i * f + j] = xhat;
      y[i * f + j] = state.gamma[j] * xhat + state.beta[j];
    }

  if (mode == Mode::train) {
    const double m = state.momentum;
    const double unbias = static_cast<double>(rows) / static_cast<double>(rows - 1);
    for (std::size_t j = 0; j < f; ++j) {
      state.running_mean[j] = (1.0 - m) * state.running_mean[j] + m * mean[j];
      state.running_var[j] = (1.0 - m) * state.running_var[j] + m * var[j] * unbias;
    }
  }
  return BatchNormResult{std::move(y), std::move(cache)};
}

BatchNormGrads batchnorm_backward(const Tensor& grad_out, const BatchNormCache& cache) {
  if (cache.mode != Mode::train) throw ContractError("batchnorm_backward needs a train-mode cache");
  const Tensor& xhat = cache.normalized;
  if (grad_out.shape() != xhat.shape()) throw ContractError("batchnorm_backward: gradient shape mismatch");
  const std::size_t rows = xhat.dim(0), f = xhat.dim(1);
  const double n = static_cast<double>(rows);

  BatchNormGrads g{.grad_x = Tensor({rows, f}), .grad_gamma = Tensor({f}), .grad_beta = Tensor({f})};
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < f; ++j) {
      g.grad_beta[j] += grad_out[i * f + j];
      g.grad_gamma[j] += grad_out[i * f + j] * xhat[i * f + j];
    }
  // dx = γ·inv_std/N · (N·dy − Σdy − x̂·Σ(dy·x̂))
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < f; ++j) {
      const double k = cache.gamma[j] * cache.inv_std[j] / n;
      g.grad_x[i * f + j] = k * (n * grad_out[i * f + j] - g.grad_beta[j] - xhat[i * f + j] * g.grad_gamma[j]);
    }
  return g;
}

DropoutResult dropout(const Tensor& x, double rate, RngStream& rng, Mode mode) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ContractError("dropout rate must lie in [0, 1)");
  DropoutResult r{.output = x, .mask = Tensor(x.shape(), 1.0), .scale = 1.0};
  if (mode == Mode::eval || rate == 0.0) return r;
  r.scale = 1.0 / (1.0 - rate);
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (rng.uniform() < rate) {
      r.mask[i] = 0.0;
      r.output[i] = 0.0;
    } else {
      r.output[i] = x[i] * r.scale;
    }
  }
  return r;
}

Tensor dropout_backward(const Tensor& grad_out, const Tensor& mask, double scale) {
  Tensor g = grad_out;
  for (std::size_t i = 0; i < g.size(); ++i) g[i] *= mask[i] * scale;
  return g;
}

}  // namespace miml
