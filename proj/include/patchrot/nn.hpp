#pragma once

// Layers used by ViT-Lite. Every layer is a composition of tensor
// primitives, so its backward pass comes from the autodiff engine.

#include <functional>
#include <string>
#include <vector>

#include "patchrot/rng.hpp"
#include "patchrot/tensor.hpp"

namespace patchrot::nn {

// A named view of a model tensor. trainable mirrors tensor.requires_grad().
struct Parameter {
  std::string name;
  Tensor tensor;
  bool trainable() const { return tensor.requires_grad(); }
};

using ParameterList = std::vector<Parameter>;

// Visits every parameter tensor of a layer by reference with its full name.
using TensorVisitor = std::function<void(const std::string& name, Tensor& tensor)>;

enum class Mode { train, eval };

// Per-forward state threaded through the layers.
struct ForwardContext {
  Mode mode = Mode::eval;
  Rng* rng = nullptr;             // required when mode == train and dropout > 0
  bool trace_attention = false;
  std::vector<Tensor> attention;  // one [B, heads, L, L] tensor per block when tracing
};

Tensor linear_forward(const Tensor& x, const Tensor& weight, const Tensor& bias);
Tensor layernorm_forward(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
// tanh approximation
Tensor gelu(const Tensor& x);
Tensor dropout(const Tensor& x, double p, Mode mode, Rng* rng);
Tensor softmax(const Tensor& x, int dim);
Tensor log_softmax(const Tensor& x, int dim);

enum class Reduction { mean, sum };

// Cross-entropy of logits [B, K] against integer labels in [0, K).
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels, Reduction reduction = Reduction::mean);

enum class Init {
  fan_in,     // N(0, 1/fan_in)
  small,      // truncated N(0, 0.02^2)
};

class Linear {
 public:
  Linear() = default;
  Linear(int in_features, int out_features, Rng& rng, DType dtype, Init init = Init::fan_in);

  Tensor forward(const Tensor& x) const { return linear_forward(x, weight, bias); }
  void visit(const std::string& prefix, const TensorVisitor& fn);

  int in_features = 0;
  int out_features = 0;
  Tensor weight;  // [out, in]
  Tensor bias;    // [out]
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(int features, DType dtype, double eps = 1e-5);

  Tensor forward(const Tensor& x) const { return layernorm_forward(x, gamma, beta, eps); }
  void visit(const std::string& prefix, const TensorVisitor& fn);

  Tensor gamma;
  Tensor beta;
  double eps = 1e-5;
};

class MultiHeadSelfAttention {
 public:
  MultiHeadSelfAttention() = default;
  MultiHeadSelfAttention(int embed_dim, int n_heads, double attn_dropout, Rng& rng, DType dtype);

  // x: [B, L, h] -> [B, L, h]
  Tensor forward(const Tensor& x, ForwardContext& ctx) const;
  void visit(const std::string& prefix, const TensorVisitor& fn);

  int embed_dim = 0;
  int n_heads = 1;
  double attn_dropout = 0.0;
  Linear query;
  Linear key;
  Linear value;
  Linear proj;
};

class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(int embed_dim, int hidden, double dropout, Rng& rng, DType dtype);

  Tensor forward(const Tensor& x, ForwardContext& ctx) const;
  void visit(const std::string& prefix, const TensorVisitor& fn);

  double dropout_p = 0.0;
  Linear fc1;
  Linear fc2;
};

// Pre-norm transformer encoder block with residuals around attention and
// the feed-forward expansion.
class EncoderBlock {
 public:
  EncoderBlock() = default;
  EncoderBlock(int embed_dim, int n_heads, int expansion, double dropout, Rng& rng, DType dtype);

  Tensor forward(const Tensor& x, ForwardContext& ctx) const;
  void visit(const std::string& prefix, const TensorVisitor& fn);

  LayerNorm norm1;
  MultiHeadSelfAttention attention;
  LayerNorm norm2;
  FeedForward feed_forward;
};

// Two-layer MLP head: Linear(h, h) -> GELU -> Linear(h, classes).
class MlpHead {
 public:
  MlpHead() = default;
  MlpHead(int embed_dim, int n_classes, Rng& rng, DType dtype);

  Tensor forward(const Tensor& x) const { return output.forward(gelu(hidden.forward(x))); }
  void visit(const std::string& prefix, const TensorVisitor& fn);

  Linear hidden;
  Linear output;
};

}  // namespace patchrot::nn
