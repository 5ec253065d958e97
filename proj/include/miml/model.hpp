#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <type_traits>
#include <variant>
#include <vector>

#include "miml/layers.hpp"
#include "miml/rng.hpp"
#include "miml/tensor.hpp"

namespace miml {

// ATT: attention-pooled instance scores. FC_T: same network, mean pooling.
// FC: flattened-bag MLP baseline.
enum class ModelKind { att, fc_t, fc };

std::string_view model_kind_name(ModelKind kind);
ModelKind parse_model_kind(std::string_view name);

inline constexpr double kDefaultDropout = 0.6;
inline constexpr double kFcLeakySlope = 0.01;

// affine -> batch norm -> ReLU -> dropout
struct EmbeddingBlock {
  Affine fc;
  BatchNormState bn;
};

/// Three embedding blocks whose width equals the instance feature dimension,
/// so the final embedding can add the raw instance back in (skip connection).
struct Embedding {
  std::array<EmbeddingBlock, 3> blocks;

  std::size_t width() const { return blocks[0].fc.in_features(); }
};

struct AttnModelParams {
  Embedding embedding;
  Affine score_head;  // h -> instance logits, one per label
  Affine attn_head;   // h -> attention logits vᵀh, one per label
  double dropout_rate = kDefaultDropout;
  std::uint64_t revision = 0;
};

struct FctParams {
  Embedding embedding;
  Affine score_head;
  double dropout_rate = kDefaultDropout;
  std::uint64_t revision = 0;
};

// flatten(R·D) -> [affine -> leaky ReLU -> dropout] x 2 -> affine -> sigmoid
struct FcParams {
  std::array<Affine, 3> layers;
  std::size_t bag_size = 0;
  double dropout_rate = kDefaultDropout;
  double leaky_slope = kFcLeakySlope;
  std::uint64_t revision = 0;
};

using ModelParams = std::variant<AttnModelParams, FctParams, FcParams>;

ModelKind kind_of(const ModelParams& params);
std::size_t num_labels(const ModelParams& params);
std::size_t feature_dim(const ModelParams& params);

struct ModelShape {
  std::size_t num_instances = 10;
  std::size_t feature_dim = 128;
  std::size_t num_labels = 20;
  double dropout_rate = kDefaultDropout;
  std::vector<std::size_t> fc_hidden{512, 512};
};

Embedding init_embedding(std::size_t width, RngStream& rng);
AttnModelParams init_attention_model(const ModelShape& shape, RngStream& rng);
FctParams init_fct_model(const ModelShape& shape, RngStream& rng);
FcParams init_fc_model(const ModelShape& shape, RngStream& rng);
ModelParams init_model(ModelKind kind, const ModelShape& shape, RngStream& rng);

// --- parameter traversal ----------------------------------------------------
// Visits every learnable tensor in a fixed order with a stable name. The same
// order is used by the optimizer, the checkpoint writer and the census.

namespace detail {
template <typename Emb, typename F>
void visit_embedding(Emb& emb, F& f) {
  for (std::size_t i = 0; i < emb.blocks.size(); ++i) {
    const std::string p = "embed." + std::to_string(i);
    f(p + ".fc.weight", emb.blocks[i].fc.weight);
    f(p + ".fc.bias", emb.blocks[i].fc.bias);
    f(p + ".bn.gamma", emb.blocks[i].bn.gamma);
    f(p + ".bn.beta", emb.blocks[i].bn.beta);
  }
}
template <typename Emb, typename F>
void visit_embedding_buffers(Emb& emb, F& f) {
  for (std::size_t i = 0; i < emb.blocks.size(); ++i) {
    const std::string p = "embed." + std::to_string(i);
    f(p + ".bn.running_mean", emb.blocks[i].bn.running_mean);
    f(p + ".bn.running_var", emb.blocks[i].bn.running_var);
  }
}
}  // namespace detail

template <typename Params, typename F>
void for_each_parameter(Params& p, F&& f) {
  using P = std::remove_const_t<Params>;
  if constexpr (std::is_same_v<P, ModelParams>) {
    std::visit([&](auto& q) { for_each_parameter(q, f); }, p);
  } else if constexpr (std::is_same_v<P, AttnModelParams>) {
    detail::visit_embedding(p.embedding, f);
    f(std::string("score.weight"), p.score_head.weight);
    f(std::string("score.bias"), p.score_head.bias);
    f(std::string("attn.weight"), p.attn_head.weight);
    f(std::string("attn.bias"), p.attn_head.bias);
  } else if constexpr (std::is_same_v<P, FctParams>) {
    detail::visit_embedding(p.embedding, f);
    f(std::string("score.weight"), p.score_head.weight);
    f(std::string("score.bias"), p.score_head.bias);
  } else {
    static_assert(std::is_same_v<P, FcParams>);
    for (std::size_t i = 0; i < p.layers.size(); ++i) {
      f("fc." + std::to_string(i) + ".weight", p.layers[i].weight);
      f("fc." + std::to_string(i) + ".bias", p.layers[i].bias);
    }
  }
}

// Non-learnable state (batch-norm running statistics).
template <typename Params, typename F>
void for_each_buffer(Params& p, F&& f) {
  using P = std::remove_const_t<Params>;
  if constexpr (std::is_same_v<P, ModelParams>) {
    std::visit([&](auto& q) { for_each_buffer(q, f); }, p);
  } else if constexpr (std::is_same_v<P, AttnModelParams> || std::is_same_v<P, FctParams>) {
    detail::visit_embedding_buffers(p.embedding, f);
  }
}

/// Number of learnable scalars (affine weights and biases, batch-norm gamma
/// and beta; running statistics excluded).
template <typename Params>
std::size_t parameter_census(const Params& params) {
  std::size_t n = 0;
  for_each_parameter(params, [&n](const std::string&, const Tensor& t) { n += t.size(); });
  return n;
}

/// Copy of `params` with every learnable tensor zeroed; used as a gradient container.
ModelParams zeros_like(const ModelParams& params);

// --- forward ------------------------------------------------------------------

struct BlockTrace {
  Tensor input;       // [N × width]
  Tensor normalized;  // batch-norm output, the ReLU input
  BatchNormCache bn;
  Tensor dropout_mask;
  double dropout_scale = 1.0;
};

struct EmbeddingTrace {
  std::array<BlockTrace, 3> blocks;
};

struct EmbedResult {
  Tensor h;  // [B × R × width]
  EmbeddingTrace trace;
};

/// Runs all instances of all bags through the embedding blocks. Batch norm
/// treats the B·R instances as its batch axis.
EmbedResult embed_instances(Embedding& embedding, const Tensor& x, double dropout_rate, Mode mode, RngStream& rng);

/// sigmoid(score_head(h)): per-instance label probabilities, [B × R × L].
Tensor instance_scores(const Affine& score_head, const Tensor& h);
/// sigmoid(attn_head(h)), the unnormalized attention activations, [B × R × L].
Tensor attention_activations(const Affine& attn_head, const Tensor& h);
/// Divides activations by their sum over the instance axis.
Tensor normalize_attention(const Tensor& activations);
Tensor attention_weights(const Affine& attn_head, const Tensor& h);
/// Uniform 1/R weights, the mean-pooling special case.
Tensor uniform_weights(std::size_t bags, std::size_t instances, std::size_t labels);

/// S[b,l] = Σ_r w[b,r,l] f[b,r,l]. Weights must sum to 1 per (bag, label).
Tensor bag_scores(const Tensor& f, const Tensor& w);

struct ForwardTrace {
  ModelKind kind = ModelKind::att;
  Mode mode = Mode::eval;
  std::uint64_t revision = 0;
  std::size_t bags = 0;
  std::size_t instances = 0;

  // att / fc_t
  EmbeddingTrace embedding;
  Tensor h;                    // [B·R × width]
  Tensor attn_activations;     // att only, [B × R × L]
  Tensor attn_denominators;    // att only, [B × L]

  // fc
  std::array<Tensor, 3> fc_inputs;     // inputs of the three affine layers
  std::array<Tensor, 2> fc_preacts;    // leaky-ReLU inputs
  std::array<Tensor, 2> fc_masks;
  std::array<double, 2> fc_scales{1.0, 1.0};
};

struct ForwardResult {
  Tensor bag_scores;       // [B × L]
  Tensor instance_scores;  // [B × R × L]; empty for fc
  Tensor attention;        // [B × R × L]; empty for fc
  ForwardTrace trace;
};

// Train mode consumes dropout draws from `rng` and updates batch-norm
// running statistics in `params`.
ForwardResult forward(AttnModelParams& params, const Tensor& x, Mode mode, RngStream& rng);
ForwardResult forward(FctParams& params, const Tensor& x, Mode mode, RngStream& rng);
ForwardResult forward(FcParams& params, const Tensor& x, Mode mode, RngStream& rng);
ForwardResult forward(ModelParams& params, const Tensor& x, Mode mode, RngStream& rng);

/// Eval-mode forward that leaves `params` untouched.
ForwardResult predict(const ModelParams& params, const Tensor& x);

/// Exact gradients of the bag scores' upstream loss with respect to every
/// learnable tensor, given dL/dS. Returned in a params-shaped container.
ModelParams backward(const ModelParams& params, const ForwardTrace& trace, const Tensor& grad_scores);

}  // namespace miml
