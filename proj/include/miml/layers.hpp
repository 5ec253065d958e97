#pragma once

#include "miml/rng.hpp"
#include "miml/tensor.hpp"

namespace miml {

enum class Mode { train, eval };

// Hand-derived layer primitives. Every *_backward here is the exact
// derivative of the matching forward; tests check them against central
// finite differences.

Tensor sigmoid(const Tensor& x);
double sigmoid(double x);
Tensor relu(const Tensor& x);
Tensor leaky_relu(const Tensor& x, double slope);

// Backward helpers take the forward input (relu) or output (sigmoid).
Tensor relu_backward(const Tensor& grad_out, const Tensor& x);
Tensor leaky_relu_backward(const Tensor& grad_out, const Tensor& x, double slope);
Tensor sigmoid_backward(const Tensor& grad_out, const Tensor& y);

/// Fully connected layer: y = x · weight + bias, weight stored [in × out].
struct Affine {
  Tensor weight;
  Tensor bias;

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }
};

struct AffineGrads {
  Tensor grad_x;
  Tensor grad_weight;
  Tensor grad_bias;
};

Affine make_affine(std::size_t in, std::size_t out);
// Glorot-uniform weights in ±sqrt(6 / (in + out)); zero bias.
Affine init_affine(std::size_t in, std::size_t out, RngStream& rng);
Tensor affine_forward(const Tensor& x, const Affine& layer);
AffineGrads affine_backward(const Tensor& grad_out, const Tensor& x, const Affine& layer);

inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// Batch normalization over the rows of a [B × F] input.
///
/// running = (1 - momentum) * running + momentum * batch_stat. The running
/// variance uses the unbiased batch variance (B / (B - 1) correction); the
/// normalization itself uses the biased one.
struct BatchNormState {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  double momentum = kBatchNormMomentum;
  double epsilon = kBatchNormEpsilon;

  std::size_t features() const { return gamma.size(); }
};

BatchNormState make_batchnorm(std::size_t features);

struct BatchNormCache {
  Mode mode = Mode::eval;
  Tensor normalized;  // x̂
  Tensor inv_std;     // 1 / sqrt(var + eps), per feature
  Tensor gamma;
};

struct BatchNormResult {
  Tensor output;
  BatchNormCache cache;
};

struct BatchNormGrads {
  Tensor grad_x;
  Tensor grad_gamma;
  Tensor grad_beta;
};

BatchNormResult batchnorm_forward(const Tensor& x, BatchNormState& state, Mode mode);
BatchNormGrads batchnorm_backward(const Tensor& grad_out, const BatchNormCache& cache);

/// Inverted dropout: in train mode each element is zeroed with probability
/// `rate` and survivors are scaled by 1 / (1 - rate); eval mode is identity.
struct DropoutResult {
  Tensor output;
  Tensor mask;  // 1 kept, 0 dropped
  double scale = 1.0;
};

DropoutResult dropout(const Tensor& x, double rate, RngStream& rng, Mode mode);
Tensor dropout_backward(const Tensor& grad_out, const Tensor& mask, double scale);

}  // namespace miml
