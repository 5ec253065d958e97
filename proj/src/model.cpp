#include "miml/model.hpp"

#include <cmath>

#include "miml/errors.hpp"

namespace miml {

std::string_view model_kind_name(ModelKind kind) {
  switch (kind) {
    case ModelKind::att: return "att";
    case ModelKind::fc_t: return "fc_t";
    case ModelKind::fc: return "fc";
  }
  return "?";
}

ModelKind parse_model_kind(std::string_view name) {
  if (name == "att") return ModelKind::att;
  if (name == "fc_t") return ModelKind::fc_t;
  if (name == "fc") return ModelKind::fc;
  throw ContractError("unknown model kind '" + std::string(name) + "' (expected att, fc_t or fc)");
}

ModelKind kind_of(const ModelParams& params) {
  switch (params.index()) {
    case 0: return ModelKind::att;
    case 1: return ModelKind::fc_t;
    default: return ModelKind::fc;
  }
}

std::size_t num_labels(const ModelParams& params) {
  return std::visit(
      [](const auto& p) -> std::size_t {
        if constexpr (std::is_same_v<std::decay_t<decltype(p)>, FcParams>) {
          return p.layers[2].out_features();
        } else {
          return p.score_head.out_features();
        }
      },
      params);
}

std::size_t feature_dim(const ModelParams& params) {
  return std::visit(
      [](const auto& p) -> std::size_t {
        if constexpr (std::is_same_v<std::decay_t<decltype(p)>, FcParams>) {
          return p.layers[0].in_features() / p.bag_size;
        } else {
          return p.embedding.width();
        }
      },
      params);
}

Embedding init_embedding(std::size_t width, RngStream& rng) {
  Embedding emb;
  for (auto& block : emb.blocks) {
    block.fc = init_affine(width, width, rng);
    block.bn = make_batchnorm(width);
  }
  return emb;
}

AttnModelParams init_attention_model(const ModelShape& shape, RngStream& rng) {
  AttnModelParams p;
  p.embedding = init_embedding(shape.feature_dim, rng);
  p.score_head = init_affine(shape.feature_dim, shape.num_labels, rng);
  p.attn_head = init_affine(shape.feature_dim, shape.num_labels, rng);
  p.dropout_rate = shape.dropout_rate;
  return p;
}

FctParams init_fct_model(const ModelShape& shape, RngStream& rng) {
  FctParams p;
  p.embedding = init_embedding(shape.feature_dim, rng);
  p.score_head = init_affine(shape.feature_dim, shape.num_labels, rng);
  p.dropout_rate = shape.dropout_rate;
  return p;
}

FcParams init_fc_model(const ModelShape& shape, RngStream& rng) {
  if (shape.fc_hidden.size() != 2) throw ContractError("fc baseline takes exactly two hidden sizes");
  FcParams p;
  p.bag_size = shape.num_instances;
  p.dropout_rate = shape.dropout_rate;
  const std::size_t in = shape.num_instances * shape.feature_dim;
  p.layers[0] = init_affine(in, shape.fc_hidden[0], rng);
  p.layers[1] = init_affine(shape.fc_hidden[0], shape.fc_hidden[1], rng);
  p.layers[2] = init_affine(shape.fc_hidden[1], shape.num_labels, rng);
  return p;
}

ModelParams init_model(ModelKind kind, const ModelShape& shape, RngStream& rng) {
  switch (kind) {
    case ModelKind::att: return init_attention_model(shape, rng);
    case ModelKind::fc_t: return init_fct_model(shape, rng);
    case ModelKind::fc: return init_fc_model(shape, rng);
  }
  throw ContractError("unknown model kind");
}

ModelParams zeros_like(const ModelParams& params) {
  ModelParams z = params;
  for_each_parameter(z, [](const std::string&, Tensor& t) { t.fill(0.0); });
  return z;
}

// --- forward ------------------------------------------------------------------

namespace {

void require_bags(const Tensor& x) {
  if (x.rank() != 3) throw ContractError("model input must be [bags x instances x features], got " + shape_str(x.shape()));
  if (x.dim(1) == 0) throw ContractError("bags must contain at least one instance");
}

// Reshapes a [N × L] matrix of per-instance values to [B × R × L].
Tensor to_bags(Tensor t, std::size_t bags, std::size_t instances) {
  const std::size_t l = t.dim(1);
  return std::move(t).reshaped({bags, instances, l});
}

}  // namespace

EmbedResult embed_instances(Embedding& emb, const Tensor& x, double dropout_rate, Mode mode, RngStream& rng) {
  require_bags(x);
  const std::size_t b = x.dim(0), r = x.dim(1), d = x.dim(2);
  if (d != emb.width()) {
    throw ContractError("instance dimension " + std::to_string(d) + " does not match embedding width " +
                        std::to_string(emb.width()) + " (the skip connection needs them equal)");
  }
  if (mode == Mode::train && b * r < 2) throw ContractError("training needs at least 2 instances per batch");

  const Tensor flat = x.reshaped({b * r, d});
  EmbedResult out;
  Tensor act = flat;
  for (std::size_t i = 0; i < emb.blocks.size(); ++i) {
    auto& block = emb.blocks[i];
    auto& trace = out.trace.blocks[i];
    trace.input = act;
    auto bn = batchnorm_forward(affine_forward(act, block.fc), block.bn, mode);
    trace.normalized = bn.output;
    trace.bn = std::move(bn.cache);
    auto dropped = dropout(relu(trace.normalized), dropout_rate, rng, mode);
    trace.dropout_mask = std::move(dropped.mask);
    trace.dropout_scale = dropped.scale;
    act = std::move(dropped.output);
  }
  out.h = add(act, flat).reshaped({b, r, d});
  return out;
}

Tensor instance_scores(const Affine& score_head, const Tensor& h) {
  require_bags(h);
  const std::size_t b = h.dim(0), r = h.dim(1);
  return to_bags(sigmoid(affine_forward(h.reshaped({b * r, h.dim(2)}), score_head)), b, r);
}

Tensor attention_activations(const Affine& attn_head, const Tensor& h) {
  return instance_scores(attn_head, h);
}

Tensor normalize_attention(const Tensor& act) {
  const std::size_t b = act.dim(0), r = act.dim(1), l = act.dim(2);
  Tensor w(act.shape());
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < l; ++j) {
      double denom = 0.0;
      for (std::size_t k = 0; k < r; ++k) denom += act.at(i, k, j);
      for (std::size_t k = 0; k < r; ++k) w.at(i, k, j) = act.at(i, k, j) / denom;
    }
  return w;
}

Tensor attention_weights(const Affine& attn_head, const Tensor& h) {
  return normalize_attention(attention_activations(attn_head, h));
}

Tensor uniform_weights(std::size_t bags, std::size_t instances, std::size_t labels) {
  return Tensor({bags, instances, labels}, 1.0 / static_cast<double>(instances));
}

Tensor bag_scores(const Tensor& f, const Tensor& w) {
  if (f.shape() != w.shape() || f.rank() != 3) {
    throw ContractError("bag_scores: score and weight shapes differ: " + shape_str(f.shape()) + " vs " +
                        shape_str(w.shape()));
  }
  const std::size_t b = f.dim(0), r = f.dim(1), l = f.dim(2);
  Tensor s({b, l});
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < l; ++j) {
      double acc = 0.0, wsum = 0.0;
      for (std::size_t k = 0; k < r; ++k) {
        acc += w.at(i, k, j) * f.at(i, k, j);
        wsum += w.at(i, k, j);
      }
      if (!(std::abs(wsum - 1.0) <= 1e-6)) {
        throw NumericalError("attention weights of bag " + std::to_string(i) + ", label " + std::to_string(j) +
                             " sum to " + std::to_string(wsum));
      }
      // Dividing by the computed sum maps a constant f to itself exactly.
      s.at(i, j) = acc / wsum;
    }
  return s;
}

namespace {

template <typename MilParams>
ForwardResult forward_mil(MilParams& params, const Tensor& x, Mode mode, RngStream& rng, bool attend) {
  auto emb = embed_instances(params.embedding, x, params.dropout_rate, mode, rng);
  const std::size_t b = x.dim(0), r = x.dim(1);
  ForwardResult out;
  out.trace.mode = mode;
  out.trace.revision = params.revision;
  out.trace.bags = b;
  out.trace.instances = r;
  out.instance_scores = instance_scores(params.score_head, emb.h);
  if constexpr (std::is_same_v<MilParams, AttnModelParams>) {
    if (attend) {
      out.trace.attn_activations = attention_activations(params.attn_head, emb.h);
      out.attention = normalize_attention(out.trace.attn_activations);
      const std::size_t l = out.attention.dim(2);
      out.trace.attn_denominators = Tensor({b, l});
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t k = 0; k < r; ++k)
          for (std::size_t j = 0; j < l; ++j) out.trace.attn_denominators.at(i, j) += out.trace.attn_activations.at(i, k, j);
    }
  }
  if (out.attention.empty()) out.attention = uniform_weights(b, r, out.instance_scores.dim(2));
  out.bag_scores = bag_scores(out.instance_scores, out.attention);
  out.trace.embedding = std::move(emb.trace);
  out.trace.h = std::move(emb.h).reshaped({b * r, x.dim(2)});
  return out;
}

}  // namespace

ForwardResult forward(AttnModelParams& params, const Tensor& x, Mode mode, RngStream& rng) {
  auto out = forward_mil(params, x, mode, rng, true);
  out.trace.kind = ModelKind::att;
  return out;
}

ForwardResult forward(FctParams& params, const Tensor& x, Mode mode, RngStream& rng) {
  auto out = forward_mil(params, x, mode, rng, false);
  out.trace.kind = ModelKind::fc_t;
  return out;
}

ForwardResult forward(FcParams& params, const Tensor& x, Mode mode, RngStream& rng) {
  require_bags(x);
  const std::size_t b = x.dim(0), r = x.dim(1), d = x.dim(2);
  if (r * d != params.layers[0].in_features()) {
    throw ContractError("fc baseline expects bags of " + std::to_string(params.bag_size) + " x " +
                        std::to_string(params.layers[0].in_features() / params.bag_size) + ", got " +
                        std::to_string(r) + " x " + std::to_string(d));
  }
  ForwardResult out;
  auto& t = out.trace;
  t.kind = ModelKind::fc;
  t.mode = mode;
  t.revision = params.revision;
  t.bags = b;
  t.instances = r;
  Tensor act = x.reshaped({b, r * d});
  for (std::size_t i = 0; i < 2; ++i) {
    t.fc_inputs[i] = act;
    t.fc_preacts[i] = affine_forward(act, params.layers[i]);
    auto dropped = dropout(leaky_relu(t.fc_preacts[i], params.leaky_slope), params.dropout_rate, rng, mode);
    t.fc_masks[i] = std::move(dropped.mask);
    t.fc_scales[i] = dropped.scale;
    act = std::move(dropped.output);
  }
  t.fc_inputs[2] = act;
  out.bag_scores = sigmoid(affine_forward(act, params.layers[2]));
  return out;
}

ForwardResult forward(ModelParams& params, const Tensor& x, Mode mode, RngStream& rng) {
  return std::visit([&](auto& p) { return forward(p, x, mode, rng); }, params);
}

ForwardResult predict(const ModelParams& params, const Tensor& x) {
  ModelParams copy = params;
  RngStream unused(0);
  return forward(copy, x, Mode::eval, unused);
}

// --- backward -----------------------------------------------------------------

namespace {

void check_trace(const ForwardTrace& trace, ModelKind kind, std::uint64_t revision) {
  if (trace.kind != kind) throw ContractError("backward: trace was produced by a different architecture");
  if (trace.mode != Mode::train) throw ContractError("backward needs a train-mode forward trace");
  if (trace.revision != revision) throw ContractError("backward: trace reused after a parameter update");
}

void backward_embedding(const Embedding& emb, const EmbeddingTrace& trace, Tensor grad, Embedding& grads) {
  for (std::size_t i = emb.blocks.size(); i-- > 0;) {
    const auto& bt = trace.blocks[i];
    grad = dropout_backward(grad, bt.dropout_mask, bt.dropout_scale);
    grad = relu_backward(grad, bt.normalized);
    auto bn = batchnorm_backward(grad, bt.bn);
    grads.blocks[i].bn.gamma = std::move(bn.grad_gamma);
    grads.blocks[i].bn.beta = std::move(bn.grad_beta);
    auto fc = affine_backward(bn.grad_x, bt.input, emb.blocks[i].fc);
    grads.blocks[i].fc.weight = std::move(fc.grad_weight);
    grads.blocks[i].fc.bias = std::move(fc.grad_bias);
    grad = std::move(fc.grad_x);
  }
}

// dS/df and dS/da for each instance, then through the two sigmoid heads.
template <typename MilParams>
void backward_mil(const MilParams& params, const ForwardTrace& trace, const Tensor& f, const Tensor& w,
                  const Tensor& s, const Tensor& grad_s, MilParams& grads) {
  const std::size_t b = trace.bags, r = trace.instances, l = grad_s.dim(1);
  Tensor grad_score_logits({b * r, l});
  Tensor grad_attn_logits({b * r, l});
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t k = 0; k < r; ++k)
      for (std::size_t j = 0; j < l; ++j) {
        const double g = grad_s.at(i, j);
        const double fv = f.at(i, k, j);
        grad_score_logits.at(i * r + k, j) = g * w.at(i, k, j) * fv * (1.0 - fv);
        if constexpr (std::is_same_v<MilParams, AttnModelParams>) {
          // w_k = a_k / Σa  ⇒  ∂S/∂a_k = (f_k − S) / Σa
          const double a = trace.attn_activations.at(i, k, j);
          const double grad_a = g * (fv - s.at(i, j)) / trace.attn_denominators.at(i, j);
          grad_attn_logits.at(i * r + k, j) = grad_a * a * (1.0 - a);
        }
      }

  auto score = affine_backward(grad_score_logits, trace.h, params.score_head);
  grads.score_head.weight = std::move(score.grad_weight);
  grads.score_head.bias = std::move(score.grad_bias);
  Tensor grad_h = std::move(score.grad_x);
  if constexpr (std::is_same_v<MilParams, AttnModelParams>) {
    auto attn = affine_backward(grad_attn_logits, trace.h, params.attn_head);
    grads.attn_head.weight = std::move(attn.grad_weight);
    grads.attn_head.bias = std::move(attn.grad_bias);
    grad_h = add(grad_h, attn.grad_x);
  }
  // h = block3 + x: the skip path carries no parameters.
  backward_embedding(params.embedding, trace.embedding, std::move(grad_h), grads.embedding);
}

}  // namespace

ModelParams backward(const ModelParams& params, const ForwardTrace& trace, const Tensor& grad_s) {
  ModelParams grads = zeros_like(params);
  const std::size_t l = num_labels(params);
  if (grad_s.shape() != Shape{trace.bags, l}) {
    throw ContractError("backward: gradient shape " + shape_str(grad_s.shape()) + " does not match bag scores");
  }

  if (const auto* p = std::get_if<FcParams>(&params)) {
    check_trace(trace, ModelKind::fc, p->revision);
    auto& g = std::get<FcParams>(grads);
    // Recompute S from the cached final input; cheaper than caching it.
    const Tensor s = sigmoid(affine_forward(trace.fc_inputs[2], p->layers[2]));
    Tensor grad = sigmoid_backward(grad_s, s);
    for (std::size_t i = 3; i-- > 0;) {
      auto fc = affine_backward(grad, trace.fc_inputs[i], p->layers[i]);
      g.layers[i].weight = std::move(fc.grad_weight);
      g.layers[i].bias = std::move(fc.grad_bias);
      if (i == 0) break;
      grad = dropout_backward(fc.grad_x, trace.fc_masks[i - 1], trace.fc_scales[i - 1]);
      grad = leaky_relu_backward(grad, trace.fc_preacts[i - 1], p->leaky_slope);
    }
    return grads;
  }

  // Instance scores, weights and bag scores are cheap to rebuild from h.
  const std::size_t b = trace.bags, r = trace.instances;
  const Tensor h = trace.h.reshaped({b, r, trace.h.dim(1)});
  if (const auto* p = std::get_if<AttnModelParams>(&params)) {
    check_trace(trace, ModelKind::att, p->revision);
    const Tensor f = instance_scores(p->score_head, h);
    const Tensor w = normalize_attention(trace.attn_activations);
    const Tensor s = bag_scores(f, w);
    backward_mil(*p, trace, f, w, s, grad_s, std::get<AttnModelParams>(grads));
  } else {
    const auto& q = std::get<FctParams>(params);
    check_trace(trace, ModelKind::fc_t, q.revision);
    const Tensor f = instance_scores(q.score_head, h);
    const Tensor w = uniform_weights(b, r, l);
    const Tensor s = bag_scores(f, w);
    backward_mil(q, trace, f, w, s, grad_s, std::get<FctParams>(grads));
  }
  return grads;
}

}  // namespace miml
