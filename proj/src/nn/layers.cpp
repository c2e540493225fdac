#include "patchrot/nn.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace patchrot::nn {

Tensor linear_forward(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (weight.ndim() != 2 || x.ndim() < 1 || x.shape().back() != weight.shape()[1]) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(weight.shape()));
  }
  if (bias.ndim() != 1 || bias.shape()[0] != weight.shape()[0]) {
    throw ShapeError("linear: bias " + shape_str(bias.shape()) + " does not match weight " + shape_str(weight.shape()));
  }
  return matmul(x, transpose(weight, 0, 1)) + bias;
}

Tensor layernorm_forward(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (!(eps > 0)) throw std::invalid_argument("layernorm: eps must be positive");
  const std::int64_t h = x.shape().back();
  if (h < 1 || gamma.numel() != h || beta.numel() != h) {
    throw ShapeError("layernorm: features " + std::to_string(h) + " vs gamma " + shape_str(gamma.shape()));
  }
  Tensor centered = x - mean(x, -1, true);
  Tensor var = mean(power(centered, 2.0), -1, true);
  return centered / sqrt(var + eps) * gamma + beta;
}

Tensor gelu(const Tensor& x) {
  const double c = std::sqrt(2.0 / std::numbers::pi);
  Tensor inner = (x + power(x, 3.0) * 0.044715) * c;
  return x * (tanh(inner) + 1.0) * 0.5;
}

Tensor dropout(const Tensor& x, double p, Mode mode, Rng* rng) {
  if (p < 0 || p >= 1) throw std::invalid_argument("dropout: p must be in [0, 1), got " + std::to_string(p));
  if (mode == Mode::eval || p == 0.0) return x;
  if (!rng) throw std::invalid_argument("dropout: training mode requires an rng");
  std::vector<double> mask(static_cast<std::size_t>(x.numel()));
  const double keep = 1.0 / (1.0 - p);
  for (auto& m : mask) m = rng->bernoulli(p) ? 0.0 : keep;
  return x * Tensor::from_list(x.shape(), mask, x.dtype());
}

Tensor softmax(const Tensor& x, int dim) {
  Tensor shifted = x - max(x.detach(), dim, true);
  Tensor e = exp(shifted);
  return e / sum(e, dim, true);
}

Tensor log_softmax(const Tensor& x, int dim) {
  Tensor shifted = x - max(x.detach(), dim, true);
  return shifted - log(sum(exp(shifted), dim, true));
}

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels, Reduction reduction) {
  if (logits.ndim() != 2) throw ShapeError("cross-entropy: logits must be [B, K], got " + shape_str(logits.shape()));
  const std::int64_t batch = logits.shape()[0];
  const std::int64_t classes = logits.shape()[1];
  if (static_cast<std::int64_t>(labels.size()) != batch) {
    throw ShapeError("cross-entropy: " + std::to_string(labels.size()) + " labels for batch of " + std::to_string(batch));
  }
  Index index{{batch, 1}, {}};
  index.values.reserve(labels.size());
  for (int label : labels) {
    if (label < 0 || label >= classes) {
      throw std::out_of_range("cross-entropy: label " + std::to_string(label) + " outside [0," + std::to_string(classes) + ")");
    }
    index.values.push_back(label);
  }
  Tensor picked = gather(log_softmax(logits, 1), 1, index);
  return reduction == Reduction::mean ? -mean(picked) : -sum(picked);
}

// ---- layers ----------------------------------------------------------------

Linear::Linear(int in, int out, Rng& rng, DType dtype, Init init) : in_features(in), out_features(out) {
  if (in < 1 || out < 1) throw std::invalid_argument("linear: feature counts must be positive");
  if (init == Init::fan_in) {
    weight = rng_draw(rng, Normal{0.0, 1.0 / std::sqrt(static_cast<double>(in))}, {out, in}, dtype);
  } else {
    weight = truncated_normal(rng, {out, in}, 0.02, dtype);
  }
  bias = Tensor::zeros({out}, dtype);
  weight.set_requires_grad(true);
  bias.set_requires_grad(true);
}

void Linear::visit(const std::string& prefix, const TensorVisitor& fn) {
  fn(prefix + ".weight", weight);
  fn(prefix + ".bias", bias);
}

LayerNorm::LayerNorm(int features, DType dtype, double eps_) : eps(eps_) {
  gamma = Tensor::ones({features}, dtype).set_requires_grad(true);
  beta = Tensor::zeros({features}, dtype).set_requires_grad(true);
}

void LayerNorm::visit(const std::string& prefix, const TensorVisitor& fn) {
  fn(prefix + ".gamma", gamma);
  fn(prefix + ".beta", beta);
}

MultiHeadSelfAttention::MultiHeadSelfAttention(int dim, int heads, double attn_dropout_, Rng& rng, DType dtype)
    : embed_dim(dim), n_heads(heads), attn_dropout(attn_dropout_) {
  if (heads < 1 || dim % heads != 0) {
    throw std::invalid_argument("attention: embed dim " + std::to_string(dim) + " not divisible by " +
                                std::to_string(heads) + " heads");
  }
  query = Linear(dim, dim, rng, dtype);
  key = Linear(dim, dim, rng, dtype);
  value = Linear(dim, dim, rng, dtype);
  proj = Linear(dim, dim, rng, dtype);
}

Tensor MultiHeadSelfAttention::forward(const Tensor& x, ForwardContext& ctx) const {
  if (x.ndim() != 3 || x.shape()[2] != embed_dim) {
    throw ShapeError("attention: expected [B, L, " + std::to_string(embed_dim) + "], got " + shape_str(x.shape()));
  }
  const std::int64_t batch = x.shape()[0];
  const std::int64_t len = x.shape()[1];
  const std::int64_t head_dim = embed_dim / n_heads;
  auto split = [&](const Tensor& t) { return transpose(reshape(t, {batch, len, n_heads, head_dim}), 1, 2); };

  Tensor q = split(query.forward(x));
  Tensor k = split(key.forward(x));
  Tensor v = split(value.forward(x));
  Tensor scores = matmul(q, transpose(k, -1, -2)) * (1.0 / std::sqrt(static_cast<double>(head_dim)));
  Tensor weights = softmax(scores, -1);
  if (ctx.trace_attention) ctx.attention.push_back(weights.detach());
  weights = dropout(weights, attn_dropout, ctx.mode, ctx.rng);
  Tensor mixed = reshape(transpose(matmul(weights, v), 1, 2), {batch, len, embed_dim});
  return proj.forward(mixed);
}

void MultiHeadSelfAttention::visit(const std::string& prefix, const TensorVisitor& fn) {
  query.visit(prefix + ".query", fn);
  key.visit(prefix + ".key", fn);
  value.visit(prefix + ".value", fn);
  proj.visit(prefix + ".proj", fn);
}

FeedForward::FeedForward(int dim, int hidden, double dropout, Rng& rng, DType dtype)
    : dropout_p(dropout), fc1(dim, hidden, rng, dtype), fc2(hidden, dim, rng, dtype) {}

Tensor FeedForward::forward(const Tensor& x, ForwardContext& ctx) const {
  Tensor h = dropout(gelu(fc1.forward(x)), dropout_p, ctx.mode, ctx.rng);
  return dropout(fc2.forward(h), dropout_p, ctx.mode, ctx.rng);
}

void FeedForward::visit(const std::string& prefix, const TensorVisitor& fn) {
  fc1.visit(prefix + ".fc1", fn);
  fc2.visit(prefix + ".fc2", fn);
}

EncoderBlock::EncoderBlock(int dim, int heads, int expansion, double dropout, Rng& rng, DType dtype)
    : norm1(dim, dtype),
      attention(dim, heads, dropout, rng, dtype),
      norm2(dim, dtype),
      feed_forward(dim, expansion, dropout, rng, dtype) {}

Tensor EncoderBlock::forward(const Tensor& x, ForwardContext& ctx) const {
  Tensor h = x + attention.forward(norm1.forward(x), ctx);
  return h + feed_forward.forward(norm2.forward(h), ctx);
}

void EncoderBlock::visit(const std::string& prefix, const TensorVisitor& fn) {
  norm1.visit(prefix + ".norm1", fn);
  attention.visit(prefix + ".attention", fn);
  norm2.visit(prefix + ".norm2", fn);
  feed_forward.visit(prefix + ".feed_forward", fn);
}

MlpHead::MlpHead(int dim, int n_classes, Rng& rng, DType dtype)
    : hidden(dim, dim, rng, dtype), output(dim, n_classes, rng, dtype, Init::small) {}

void MlpHead::visit(const std::string& prefix, const TensorVisitor& fn) {
  hidden.visit(prefix + ".hidden", fn);
  output.visit(prefix + ".output", fn);
}

}  // namespace patchrot::nn
