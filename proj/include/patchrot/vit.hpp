#pragma once

// ViT-Lite: patch embedding, class token, learnable positional embeddings,
// pre-norm encoder stack, classification head M0, and (during pretraining)
// per-position rotation heads M1..MN.

#include <optional>
#include <string>
#include <vector>

#include "patchrot/nn.hpp"

namespace patchrot::vit {

struct ViTConfig {
  int image_c = 3;
  int image_h = 32;
  int image_w = 32;
  int patch_size = 4;
  int embed_dim = 256;
  int n_blocks = 7;
  int n_heads = 4;
  int expansion = 512;
  double dropout = 0.1;
  int n_rotation_classes = 4;
  int n_downstream_classes = 10;
  bool share_patch_heads = false;
  bool reuse_m0_head = false;
  DType dtype = DType::f32;

  void validate() const;
};

struct TokenGrid {
  int rows = 0;
  int cols = 0;
  int count() const { return rows * cols; }
  bool operator==(const TokenGrid&) const = default;
};

// Grid of the full-size downstream input.
TokenGrid full_grid(const ViTConfig& cfg);

enum class ForwardMode { pretrain, downstream };

struct ForwardOutput {
  Tensor cls_logits;               // [B, K]
  Tensor patch_logits;             // [B, N, 4], pretrain only
  std::vector<Tensor> attention;   // per block [B, heads, N+1, N+1] when traced
};

// image [C, H, W] -> [N, C*P*P], patches in row-major order, each flattened
// channel-first.
Tensor tokenize(const Tensor& image, int patch_size);
// images [B, C, H, W] -> [B, N, C*P*P]
Tensor tokenize_batch(const Tensor& images, int patch_size);

// Per-channel bilinear (corner-aligned) resize of the positional grid. The
// first row belongs to the class token and is copied unchanged.
Tensor interpolate_pos_embed(const Tensor& pos_embed, TokenGrid old_grid, TokenGrid new_grid);

// N independent two-layer MLPs stored as stacked tensors.
class PatchHeads {
 public:
  PatchHeads() = default;
  PatchHeads(int n_positions, int embed_dim, int n_classes, Rng& rng, DType dtype);

  // encodings [B, N, h] -> logits [B, N, classes]
  Tensor forward(const Tensor& encodings) const;
  void visit(const std::string& prefix, const nn::TensorVisitor& fn);

  Tensor hidden_weight;  // [N, h, h]
  Tensor hidden_bias;    // [N, h]
  Tensor output_weight;  // [N, classes, h]
  Tensor output_bias;    // [N, classes]
};

enum class PatchHeadKind { none, per_position, shared, reuse_m0 };
std::string to_string(PatchHeadKind kind);
PatchHeadKind parse_patch_head_kind(const std::string& text);

class ViTModel {
 public:
  // Pretraining model on `grid` with a 4-way M0 and rotation heads.
  static ViTModel for_pretraining(const ViTConfig& cfg, TokenGrid grid, Rng& rng);
  // Downstream model on the full grid with an n_downstream_classes head.
  static ViTModel for_downstream(const ViTConfig& cfg, Rng& rng);
  // Any layout, e.g. one read back from a checkpoint manifest.
  static ViTModel with_layout(const ViTConfig& cfg, TokenGrid grid, int head_classes, PatchHeadKind kind, Rng& rng);

  // With patch_rows, the rotation heads only see those batch rows and
  // patch_logits is [|patch_rows|, N, 4] (undefined when empty).
  ForwardOutput forward(const Tensor& images, ForwardMode mode, nn::ForwardContext& ctx,
                        const std::vector<std::int64_t>* patch_rows = nullptr) const;
  // Final-norm encodings [B, N+1, h].
  Tensor encode(const Tensor& images, nn::ForwardContext& ctx) const;

  nn::ParameterList parameters() const;
  void visit_parameters(const nn::TensorVisitor& fn);
  // Deep copy; parameters no longer alias this model's storage.
  ViTModel clone() const;
  std::int64_t parameter_count() const;
  std::optional<Tensor> find_parameter(const std::string& name) const;

  const ViTConfig& config() const { return cfg_; }
  TokenGrid grid() const { return grid_; }
  int head_classes() const { return head.output.out_features; }
  PatchHeadKind patch_head_kind() const { return patch_kind_; }

  // Re-grids the positional embedding by interpolation.
  void set_grid(TokenGrid grid);
  // Re-initializes M0's final linear layer with n_classes outputs and
  // drops the patch heads.
  void replace_head(int n_classes, Rng& rng);
  void drop_patch_heads();

  // Components, exposed for freezing, checkpoint I/O and tests.
  nn::Linear patch_embed;
  Tensor cls_token;  // [1, 1, h]
  Tensor pos_embed;  // [N+1, h]
  std::vector<nn::EncoderBlock> blocks;
  nn::LayerNorm norm;
  nn::MlpHead head;

 private:
  ViTModel(const ViTConfig& cfg, TokenGrid grid, int head_classes, PatchHeadKind patch_kind, Rng& rng);

  ViTConfig cfg_;
  TokenGrid grid_;
  PatchHeadKind patch_kind_ = PatchHeadKind::none;
  PatchHeads patch_heads_;
  nn::MlpHead shared_patch_head_;
};

// Closed-form parameter count, used as an independent check on the model.
std::int64_t expected_parameter_count(const ViTConfig& cfg, TokenGrid grid, int head_classes, PatchHeadKind kind);

// Which part of the network fine-tuning starts from.
struct FreezeSpec {
  enum class Kind { NF, PE, EB, MLP };
  Kind kind = Kind::NF;
  int block = 0;  // 1-based, EB only

  static FreezeSpec parse(const std::string& text);
  std::string to_string() const;
  bool operator==(const FreezeSpec&) const = default;
};

// NF, PE, EB1..EBe, MLP
std::vector<FreezeSpec> all_freeze_specs(int n_blocks);

// Sets trainable flags: NF trains everything; PE freezes the patch-embedding
// block (with class token and positional embeddings); EB(k) additionally
// freezes blocks 1..k-1; MLP freezes everything but M0's final linear layer.
void apply_freeze(ViTModel& model, const FreezeSpec& spec);

}  // namespace patchrot::vit
