#include "patchrot/vit.hpp"

#include <cmath>
#include <stdexcept>

namespace patchrot::vit {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument("vit config: " + msg);
}

}  // namespace

void ViTConfig::validate() const {
  require(image_c > 0 && image_h > 0 && image_w > 0, "image dims must be positive");
  require(patch_size > 0, "patch_size must be positive");
  require(image_h % patch_size == 0 && image_w % patch_size == 0,
          "image " + std::to_string(image_h) + "x" + std::to_string(image_w) + " not divisible by patch size " +
              std::to_string(patch_size));
  require(embed_dim > 0 && n_heads > 0 && embed_dim % n_heads == 0,
          "embed_dim " + std::to_string(embed_dim) + " not divisible by n_heads " + std::to_string(n_heads));
  require(n_blocks >= 1, "n_blocks must be >= 1");
  require(expansion >= 1, "expansion must be >= 1");
  require(dropout >= 0.0 && dropout < 1.0, "dropout must be in [0, 1)");
  require(n_rotation_classes == 4, "n_rotation_classes must be 4");
  require(n_downstream_classes >= 1, "n_downstream_classes must be >= 1");
  require(!(share_patch_heads && reuse_m0_head), "share_patch_heads and reuse_m0_head are exclusive");
}

TokenGrid full_grid(const ViTConfig& cfg) { return {cfg.image_h / cfg.patch_size, cfg.image_w / cfg.patch_size}; }

Tensor tokenize_batch(const Tensor& images, int patch_size) {
  if (images.ndim() != 4) throw ShapeError("tokenize: expected [B, C, H, W], got " + shape_str(images.shape()));
  const std::int64_t b = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  const std::int64_t p = patch_size;
  if (p < 1 || h % p != 0 || w % p != 0) {
    throw ShapeError("tokenize: image " + std::to_string(h) + "x" + std::to_string(w) + " not divisible by patch size " +
                     std::to_string(p));
  }
  const std::int64_t gh = h / p, gw = w / p;
  // [B, C, gh, P, gw, P] -> [B, gh, gw, C, P, P]
  Tensor t = reshape(images, {b, c, gh, p, gw, p});
  t = transpose(t, 1, 2);  // B gh C P gw P
  t = transpose(t, 3, 4);  // B gh C gw P P
  t = transpose(t, 2, 3);  // B gh gw C P P
  return reshape(t, {b, gh * gw, c * p * p});
}

Tensor tokenize(const Tensor& image, int patch_size) {
  if (image.ndim() != 3) throw ShapeError("tokenize: expected [C, H, W], got " + shape_str(image.shape()));
  Tensor batch = reshape(image, {1, image.dim(0), image.dim(1), image.dim(2)});
  Tensor tokens = tokenize_batch(batch, patch_size);
  return reshape(tokens, {tokens.dim(1), tokens.dim(2)});
}

Tensor interpolate_pos_embed(const Tensor& pos_embed, TokenGrid old_grid, TokenGrid new_grid) {
  if (pos_embed.ndim() != 2 || pos_embed.dim(0) != old_grid.count() + 1) {
    throw ShapeError("interpolate_pos_embed: " + shape_str(pos_embed.shape()) + " does not match a " +
                     std::to_string(old_grid.rows) + "x" + std::to_string(old_grid.cols) + " grid plus class row");
  }
  if (old_grid.rows < 1 || old_grid.cols < 1 || new_grid.rows < 1 || new_grid.cols < 1) {
    throw ShapeError("interpolate_pos_embed: grids must be non-empty");
  }
  if (old_grid == new_grid) return pos_embed.clone();

  const std::int64_t h = pos_embed.dim(1);
  const auto src = pos_embed.to_vector();
  std::vector<double> out(static_cast<std::size_t>((new_grid.count() + 1) * h));
  std::copy(src.begin(), src.begin() + h, out.begin());

  // Corner-aligned source coordinate of output index i.
  auto coord = [](int i, int n_out, int n_in) {
    return n_out == 1 ? 0.0 : static_cast<double>(i) * (n_in - 1) / (n_out - 1);
  };
  auto at = [&](int r, int c, std::int64_t ch) { return src[(1 + r * old_grid.cols + c) * h + ch]; };
  for (int r = 0; r < new_grid.rows; ++r) {
    const double y = coord(r, new_grid.rows, old_grid.rows);
    const int y0 = static_cast<int>(std::floor(y));
    const int y1 = std::min(y0 + 1, old_grid.rows - 1);
    const double fy = y - y0;
    for (int c = 0; c < new_grid.cols; ++c) {
      const double x = coord(c, new_grid.cols, old_grid.cols);
      const int x0 = static_cast<int>(std::floor(x));
      const int x1 = std::min(x0 + 1, old_grid.cols - 1);
      const double fx = x - x0;
      double* dst = &out[(1 + r * new_grid.cols + c) * h];
      for (std::int64_t ch = 0; ch < h; ++ch) {
        const double top = at(y0, x0, ch) * (1 - fx) + at(y0, x1, ch) * fx;
        const double bottom = at(y1, x0, ch) * (1 - fx) + at(y1, x1, ch) * fx;
        dst[ch] = top * (1 - fy) + bottom * fy;
      }
    }
  }
  return Tensor::from_list({new_grid.count() + 1, h}, out, pos_embed.dtype());
}

// ---- patch heads -------------------------------------------------------------

PatchHeads::PatchHeads(int n, int h, int classes, Rng& rng, DType dtype) {
  hidden_weight = rng_draw(rng, Normal{0.0, 1.0 / std::sqrt(static_cast<double>(h))}, {n, h, h}, dtype);
  hidden_bias = Tensor::zeros({n, h}, dtype);
  output_weight = truncated_normal(rng, {n, classes, h}, 0.02, dtype);
  output_bias = Tensor::zeros({n, classes}, dtype);
  visit("", [](const std::string&, Tensor& t) { t.set_requires_grad(true); });
}

Tensor PatchHeads::forward(const Tensor& encodings) const {
  const std::int64_t n = hidden_weight.dim(0);
  const std::int64_t h = hidden_weight.dim(1);
  if (encodings.ndim() != 3 || encodings.dim(1) != n || encodings.dim(2) != h) {
    throw ShapeError("patch heads: expected [B, " + std::to_string(n) + ", " + std::to_string(h) + "], got " +
                     shape_str(encodings.shape()));
  }
  const std::int64_t classes = output_weight.dim(1);
  Tensor x = transpose(encodings, 0, 1);  // [N, B, h]
  Tensor hid = matmul(x, transpose(hidden_weight, 1, 2)) + reshape(hidden_bias, {n, 1, h});
  Tensor out = matmul(nn::gelu(hid), transpose(output_weight, 1, 2)) + reshape(output_bias, {n, 1, classes});
  return transpose(out, 0, 1);
}

void PatchHeads::visit(const std::string& prefix, const nn::TensorVisitor& fn) {
  fn(prefix + ".hidden.weight", hidden_weight);
  fn(prefix + ".hidden.bias", hidden_bias);
  fn(prefix + ".output.weight", output_weight);
  fn(prefix + ".output.bias", output_bias);
}

// ---- model -------------------------------------------------------------------

ViTModel::ViTModel(const ViTConfig& cfg, TokenGrid grid, int head_classes, PatchHeadKind patch_kind, Rng& rng)
    : cfg_(cfg), grid_(grid), patch_kind_(patch_kind) {
  cfg.validate();
  if (grid.rows < 1 || grid.cols < 1) throw std::invalid_argument("vit: empty token grid");
  const int h = cfg.embed_dim;
  const int patch_dim = cfg.image_c * cfg.patch_size * cfg.patch_size;
  Rng init = rng.fork("vit");
  patch_embed = nn::Linear(patch_dim, h, init, cfg.dtype);
  cls_token = truncated_normal(init, {1, 1, h}, 0.02, cfg.dtype).set_requires_grad(true);
  pos_embed = truncated_normal(init, {grid.count() + 1, h}, 0.02, cfg.dtype).set_requires_grad(true);
  for (int i = 0; i < cfg.n_blocks; ++i) {
    blocks.emplace_back(h, cfg.n_heads, cfg.expansion, cfg.dropout, init, cfg.dtype);
  }
  norm = nn::LayerNorm(h, cfg.dtype);
  head = nn::MlpHead(h, head_classes, init, cfg.dtype);
  switch (patch_kind) {
    case PatchHeadKind::per_position:
      patch_heads_ = PatchHeads(grid.count(), h, cfg.n_rotation_classes, init, cfg.dtype);
      break;
    case PatchHeadKind::shared:
      shared_patch_head_ = nn::MlpHead(h, cfg.n_rotation_classes, init, cfg.dtype);
      break;
    case PatchHeadKind::reuse_m0:
    case PatchHeadKind::none:
      break;
  }
}

ViTModel ViTModel::for_pretraining(const ViTConfig& cfg, TokenGrid grid, Rng& rng) {
  PatchHeadKind kind = PatchHeadKind::per_position;
  if (cfg.share_patch_heads) kind = PatchHeadKind::shared;
  if (cfg.reuse_m0_head) kind = PatchHeadKind::reuse_m0;
  return ViTModel(cfg, grid, cfg.n_rotation_classes, kind, rng);
}

ViTModel ViTModel::for_downstream(const ViTConfig& cfg, Rng& rng) {
  cfg.validate();
  return ViTModel(cfg, full_grid(cfg), cfg.n_downstream_classes, PatchHeadKind::none, rng);
}

ViTModel ViTModel::with_layout(const ViTConfig& cfg, TokenGrid grid, int head_classes, PatchHeadKind kind, Rng& rng) {
  if (head_classes < 1) throw std::invalid_argument("vit: head needs at least one class");
  return ViTModel(cfg, grid, head_classes, kind, rng);
}

std::string to_string(PatchHeadKind kind) {
  switch (kind) {
    case PatchHeadKind::none:
      return "none";
    case PatchHeadKind::per_position:
      return "per_position";
    case PatchHeadKind::shared:
      return "shared";
    case PatchHeadKind::reuse_m0:
      return "reuse_m0";
  }
  return "none";
}

PatchHeadKind parse_patch_head_kind(const std::string& text) {
  for (auto k : {PatchHeadKind::none, PatchHeadKind::per_position, PatchHeadKind::shared, PatchHeadKind::reuse_m0}) {
    if (to_string(k) == text) return k;
  }
  throw std::invalid_argument("unknown patch head kind '" + text + "'");
}

Tensor ViTModel::encode(const Tensor& input, nn::ForwardContext& ctx) const {
  if (input.ndim() != 4 || input.dim(1) != cfg_.image_c) {
    throw ShapeError("vit: expected [B, " + std::to_string(cfg_.image_c) + ", H, W], got " + shape_str(input.shape()));
  }
  const std::int64_t rows = input.dim(2) / cfg_.patch_size;
  const std::int64_t cols = input.dim(3) / cfg_.patch_size;
  if (input.dim(2) % cfg_.patch_size != 0 || input.dim(3) % cfg_.patch_size != 0 || rows != grid_.rows ||
      cols != grid_.cols) {
    throw ShapeError("vit: input " + shape_str(input.shape()) + " does not match the " + std::to_string(grid_.rows) +
                     "x" + std::to_string(grid_.cols) + " positional grid");
  }
  Tensor images = input.dtype() == cfg_.dtype ? input : input.to(cfg_.dtype);
  const std::int64_t batch = images.dim(0);
  const std::int64_t h = cfg_.embed_dim;
  Tensor tokens = patch_embed.forward(tokenize_batch(images, cfg_.patch_size));
  Tensor cls = broadcast_to(cls_token, {batch, 1, h});
  Tensor x = concat({cls, tokens}, 1) + pos_embed;
  for (const auto& block : blocks) x = block.forward(x, ctx);
  return norm.forward(x);
}

ForwardOutput ViTModel::forward(const Tensor& images, ForwardMode mode, nn::ForwardContext& ctx,
                                const std::vector<std::int64_t>* patch_rows) const {
  if (mode == ForwardMode::pretrain && patch_kind_ == PatchHeadKind::none) {
    throw std::logic_error("vit: pretrain forward requires patch heads");
  }
  const std::size_t traced_before = ctx.attention.size();
  Tensor enc = encode(images, ctx);
  const std::int64_t batch = enc.dim(0);
  const std::int64_t len = enc.dim(1);
  const std::int64_t h = enc.dim(2);

  ForwardOutput out;
  out.cls_logits = head.forward(reshape(slice(enc, 1, 0, 1), {batch, h}));
  if (mode == ForwardMode::pretrain && !(patch_rows && patch_rows->empty())) {
    Tensor patches = slice(enc, 1, 1, len);
    if (patch_rows) patches = select_rows(patches, *patch_rows);
    switch (patch_kind_) {
      case PatchHeadKind::per_position:
        out.patch_logits = patch_heads_.forward(patches);
        break;
      case PatchHeadKind::shared:
        out.patch_logits = shared_patch_head_.forward(patches);
        break;
      case PatchHeadKind::reuse_m0:
        out.patch_logits = head.forward(patches);
        break;
      case PatchHeadKind::none:
        break;
    }
  }
  if (ctx.trace_attention) {
    out.attention.assign(ctx.attention.begin() + static_cast<std::ptrdiff_t>(traced_before), ctx.attention.end());
  }
  return out;
}

void ViTModel::visit_parameters(const nn::TensorVisitor& fn) {
  patch_embed.visit("patch_embed", fn);
  fn("cls_token", cls_token);
  fn("pos_embed", pos_embed);
  for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].visit("blocks." + std::to_string(i), fn);
  norm.visit("norm", fn);
  head.visit("head", fn);
  if (patch_kind_ == PatchHeadKind::per_position) patch_heads_.visit("patch_heads", fn);
  if (patch_kind_ == PatchHeadKind::shared) shared_patch_head_.visit("shared_patch_head", fn);
}

nn::ParameterList ViTModel::parameters() const {
  nn::ParameterList out;
  // Visiting copies handles only; nothing is modified.
  const_cast<ViTModel*>(this)->visit_parameters(
      [&](const std::string& name, Tensor& t) { out.push_back({name, t}); });
  return out;
}

ViTModel ViTModel::clone() const {
  ViTModel copy = *this;
  copy.visit_parameters([](const std::string&, Tensor& t) {
    const bool trainable = t.requires_grad();
    t = t.clone();
    t.set_requires_grad(trainable);
  });
  return copy;
}

std::int64_t ViTModel::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

std::optional<Tensor> ViTModel::find_parameter(const std::string& name) const {
  for (const auto& p : parameters()) {
    if (p.name == name) return p.tensor;
  }
  return std::nullopt;
}

void ViTModel::set_grid(TokenGrid grid) {
  const bool trainable = pos_embed.requires_grad();
  pos_embed = interpolate_pos_embed(pos_embed, grid_, grid);
  pos_embed.set_requires_grad(trainable);
  if (patch_kind_ == PatchHeadKind::per_position && !(grid == grid_)) drop_patch_heads();
  grid_ = grid;
}

void ViTModel::replace_head(int n_classes, Rng& rng) {
  if (n_classes < 1) throw std::invalid_argument("replace_head: n_classes must be >= 1");
  Rng init = rng.fork("replace_head");
  head.output = nn::Linear(cfg_.embed_dim, n_classes, init, cfg_.dtype, nn::Init::small);
  drop_patch_heads();
}

void ViTModel::drop_patch_heads() {
  patch_kind_ = PatchHeadKind::none;
  patch_heads_ = PatchHeads();
  shared_patch_head_ = nn::MlpHead();
}

std::int64_t expected_parameter_count(const ViTConfig& cfg, TokenGrid grid, int head_classes, PatchHeadKind kind) {
  const std::int64_t h = cfg.embed_dim;
  const std::int64_t e = cfg.expansion;
  const std::int64_t n = grid.count();
  const std::int64_t patch_dim = static_cast<std::int64_t>(cfg.image_c) * cfg.patch_size * cfg.patch_size;
  const std::int64_t r = cfg.n_rotation_classes;

  const std::int64_t embedding = patch_dim * h + h + h + (n + 1) * h;
  const std::int64_t block = 2 * 2 * h + 4 * (h * h + h) + (h * e + e) + (e * h + h);
  const std::int64_t mlp_hidden = h * h + h;
  const std::int64_t m0 = mlp_hidden + h * head_classes + head_classes;
  const std::int64_t rotation_head = mlp_hidden + h * r + r;
  std::int64_t patch = 0;
  if (kind == PatchHeadKind::per_position) patch = n * rotation_head;
  if (kind == PatchHeadKind::shared) patch = rotation_head;
  return embedding + cfg.n_blocks * block + 2 * h + m0 + patch;
}

// ---- freezing ----------------------------------------------------------------

FreezeSpec FreezeSpec::parse(const std::string& text) {
  if (text == "NF") return {Kind::NF, 0};
  if (text == "PE") return {Kind::PE, 0};
  if (text == "MLP") return {Kind::MLP, 0};
  if (text.size() > 2 && text.rfind("EB", 0) == 0) {
    const std::string digits = text.substr(2);
    if (digits.find_first_not_of("0123456789") == std::string::npos && digits.size() <= 4) {
      const int k = std::stoi(digits);
      if (k >= 1) return {Kind::EB, k};
    }
  }
  throw std::invalid_argument("unknown freeze mode '" + text + "' (expected NF, PE, EB<k> or MLP)");
}

std::string FreezeSpec::to_string() const {
  switch (kind) {
    case Kind::NF: return "NF";
    case Kind::PE: return "PE";
    case Kind::EB: return "EB" + std::to_string(block);
    case Kind::MLP: return "MLP";
  }
  return "?";
}

std::vector<FreezeSpec> all_freeze_specs(int n_blocks) {
  std::vector<FreezeSpec> out{{FreezeSpec::Kind::NF, 0}, {FreezeSpec::Kind::PE, 0}};
  for (int k = 1; k <= n_blocks; ++k) out.push_back({FreezeSpec::Kind::EB, k});
  out.push_back({FreezeSpec::Kind::MLP, 0});
  return out;
}

void apply_freeze(ViTModel& model, const FreezeSpec& spec) {
  const int n_blocks = static_cast<int>(model.blocks.size());
  if (spec.kind == FreezeSpec::Kind::EB && (spec.block < 1 || spec.block > n_blocks)) {
    throw std::invalid_argument("freeze: EB" + std::to_string(spec.block) + " outside 1.." + std::to_string(n_blocks));
  }
  const bool freeze_everything = spec.kind == FreezeSpec::Kind::MLP;
  model.visit_parameters([&](const std::string&, Tensor& t) { t.set_requires_grad(!freeze_everything); });
  auto freeze = [](const std::string&, Tensor& t) { t.set_requires_grad(false); };
  switch (spec.kind) {
    case FreezeSpec::Kind::NF:
      break;
    case FreezeSpec::Kind::EB:
      for (int i = 0; i + 1 < spec.block; ++i) model.blocks[i].visit("", freeze);
      [[fallthrough]];
    case FreezeSpec::Kind::PE:
      model.patch_embed.visit("", freeze);
      model.cls_token.set_requires_grad(false);
      model.pos_embed.set_requires_grad(false);
      break;
    case FreezeSpec::Kind::MLP:
      model.head.output.weight.set_requires_grad(true);
      model.head.output.bias.set_requires_grad(true);
      break;
  }
}

}  // namespace patchrot::vit
