#include "doctest.h"
#include "helpers.hpp"
#include "patchrot/gradcheck.hpp"
#include "patchrot/vit.hpp"

#include <map>
#include <set>

using namespace patchrot;
using patchrot::testing::random_f64;
using vit::FreezeSpec;
using vit::TokenGrid;
using vit::ViTConfig;
using vit::ViTModel;

namespace {

ViTConfig tiny_config(DType dtype = DType::f64) {
  ViTConfig cfg;
  cfg.image_c = 3;
  cfg.image_h = 8;
  cfg.image_w = 8;
  cfg.patch_size = 2;
  cfg.embed_dim = 8;
  cfg.n_blocks = 3;
  cfg.n_heads = 2;
  cfg.expansion = 12;
  cfg.dropout = 0.0;
  cfg.n_downstream_classes = 5;
  cfg.dtype = dtype;
  return cfg;
}

std::map<std::string, bool> trainable_map(const ViTModel& model) {
  std::map<std::string, bool> out;
  for (const auto& p : model.parameters()) out[p.name] = p.trainable();
  return out;
}

}  // namespace

TEST_CASE("tokenize examples") {
  Tensor img = Tensor::zeros({3, 32, 32});
  Tensor t = vit::tokenize(img, 4);
  CHECK(t.shape() == Shape{64, 48});
  CHECK(vit::tokenize(Tensor::zeros({3, 24, 24}), 4).shape() == Shape{36, 48});
  CHECK_THROWS_AS(vit::tokenize(Tensor::zeros({3, 30, 32}), 4), ShapeError);
}

TEST_CASE("tokenize orders patches row-major and flattens channel-first") {
  const int c = 2, h = 4, w = 6, p = 2;
  std::vector<double> values(c * h * w);
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = static_cast<double>(i);
  Tensor img = Tensor::from_list({c, h, w}, values, DType::f64);
  Tensor t = vit::tokenize(img, p);
  REQUIRE(t.shape() == Shape{6, 8});
  for (int pr = 0; pr < h / p; ++pr) {
    for (int pc = 0; pc < w / p; ++pc) {
      const int token = pr * (w / p) + pc;
      int k = 0;
      for (int ch = 0; ch < c; ++ch) {
        for (int dy = 0; dy < p; ++dy) {
          for (int dx = 0; dx < p; ++dx, ++k) {
            const double expect = values[(ch * h + pr * p + dy) * w + pc * p + dx];
            CHECK(t.value(token * 8 + k) == expect);
          }
        }
      }
    }
  }
}

TEST_CASE("forward shapes") {
  ViTConfig cfg;
  cfg.embed_dim = 16;
  cfg.n_blocks = 2;
  cfg.expansion = 32;
  cfg.dropout = 0.0;
  Rng rng(1);
  ViTModel pre = ViTModel::for_pretraining(cfg, {6, 6}, rng);
  nn::ForwardContext ctx;
  auto out = pre.forward(Tensor::zeros({2, 3, 24, 24}), vit::ForwardMode::pretrain, ctx);
  CHECK(out.cls_logits.shape() == Shape{2, 4});
  CHECK(out.patch_logits.shape() == Shape{2, 36, 4});

  ViTModel down = ViTModel::for_downstream(cfg, rng);
  auto d = down.forward(Tensor::zeros({2, 3, 32, 32}), vit::ForwardMode::downstream, ctx);
  CHECK(d.cls_logits.shape() == Shape{2, 10});
  CHECK_FALSE(d.patch_logits.defined());

  CHECK_THROWS_AS(pre.forward(Tensor::zeros({2, 3, 32, 32}), vit::ForwardMode::pretrain, ctx), ShapeError);
  CHECK_THROWS_AS(down.forward(Tensor::zeros({2, 3, 32, 32}), vit::ForwardMode::pretrain, ctx), std::logic_error);

  SUBCASE("attention is traced per block") {
    nn::ForwardContext traced;
    traced.trace_attention = true;
    auto t = pre.forward(Tensor::zeros({1, 3, 24, 24}), vit::ForwardMode::pretrain, traced);
    REQUIRE(t.attention.size() == 2);
    CHECK(t.attention[0].shape() == Shape{1, 4, 37, 37});
  }
}

TEST_CASE("duplicate images give identical logit rows") {
  ViTConfig cfg = tiny_config(DType::f32);
  cfg.dropout = 0.1;
  Rng rng(2);
  ViTModel model = ViTModel::for_pretraining(cfg, vit::full_grid(cfg), rng);
  Tensor one = rng_draw(rng, UniformReal{0, 1}, {1, 3, 8, 8});
  Tensor batch = concat({one, one}, 0);
  nn::ForwardContext ctx;  // eval mode
  auto out = model.forward(batch, vit::ForwardMode::pretrain, ctx);
  CHECK(bit_equal(slice(out.cls_logits, 0, 0, 1), slice(out.cls_logits, 0, 1, 2)));
  CHECK(bit_equal(slice(out.patch_logits, 0, 0, 1), slice(out.patch_logits, 0, 1, 2)));
}

TEST_CASE("patch heads on a row subset match the full forward") {
  Rng rng(3);
  for (auto kind : {0, 1, 2}) {
    ViTConfig cfg = tiny_config(DType::f32);
    cfg.share_patch_heads = kind == 1;
    cfg.reuse_m0_head = kind == 2;
    ViTModel model = ViTModel::for_pretraining(cfg, vit::full_grid(cfg), rng);
    Tensor batch = rng_draw(rng, UniformReal{0, 1}, {5, 3, 8, 8});
    nn::ForwardContext ctx;
    auto full = model.forward(batch, vit::ForwardMode::pretrain, ctx);
    const std::vector<std::int64_t> rows{1, 3, 4};
    auto part = model.forward(batch, vit::ForwardMode::pretrain, ctx, &rows);
    CHECK(part.patch_logits.shape() == Shape{3, 16, 4});
    CHECK(bit_equal(part.patch_logits, select_rows(full.patch_logits, rows)));
    CHECK(bit_equal(part.cls_logits, full.cls_logits));
    const std::vector<std::int64_t> none;
    CHECK_FALSE(model.forward(batch, vit::ForwardMode::pretrain, ctx, &none).patch_logits.defined());
  }
}

TEST_CASE("interpolate_pos_embed examples") {
  Rng rng(3);
  Tensor pe = rng_draw(rng, Normal{0, 1}, {10, 5});
  CHECK(bit_equal(vit::interpolate_pos_embed(pe, {3, 3}, {3, 3}), pe));

  Tensor constant = Tensor::full({5, 3}, 0.25, DType::f64);
  Tensor grown = vit::interpolate_pos_embed(constant, {2, 2}, {5, 7});
  REQUIRE(grown.shape() == Shape{36, 3});
  for (double v : grown.to_vector()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));

  Tensor grid = Tensor::from_list({5, 1}, {9, 0, 1, 2, 3}, DType::f64);
  Tensor up = vit::interpolate_pos_embed(grid, {2, 2}, {3, 3});
  CHECK(up.value(0) == 9.0);                 // class row untouched
  CHECK(std::abs(up.value(1 + 4) - 1.5) < 1e-6);
  CHECK(up.value(1) == 0.0);                 // corners preserved
  CHECK(up.value(9) == 3.0);

  Tensor fine = vit::interpolate_pos_embed(rng_draw(rng, Normal{0, 1}, {37, 4}), {6, 6}, {8, 8});
  CHECK(fine.shape() == Shape{65, 4});

  CHECK_THROWS_AS(vit::interpolate_pos_embed(pe, {2, 2}, {3, 3}), ShapeError);
}

TEST_CASE("set_grid re-grids the positional embedding") {
  ViTConfig cfg;
  cfg.embed_dim = 8;
  cfg.n_blocks = 1;
  cfg.n_heads = 2;
  cfg.expansion = 8;
  Rng rng(4);
  ViTModel model = ViTModel::for_pretraining(cfg, {6, 6}, rng);
  const Tensor before = model.pos_embed.clone();
  model.replace_head(10, rng);
  model.set_grid(vit::full_grid(cfg));
  CHECK(model.pos_embed.shape() == Shape{65, 8});
  CHECK(model.pos_embed.requires_grad());
  CHECK(bit_equal(slice(model.pos_embed, 0, 0, 1), slice(before, 0, 0, 1)));
  nn::ForwardContext ctx;
  CHECK(model.forward(Tensor::zeros({1, 3, 32, 32}), vit::ForwardMode::downstream, ctx).cls_logits.shape() ==
        Shape{1, 10});
}

TEST_CASE("replace_head examples") {
  ViTConfig cfg = tiny_config();
  Rng rng(5);
  ViTModel model = ViTModel::for_pretraining(cfg, vit::full_grid(cfg), rng);
  REQUIRE(model.head_classes() == 4);
  const Tensor hidden = model.head.hidden.weight.clone();
  const Tensor old_out = model.head.output.weight.clone();
  const Tensor block = model.blocks[0].attention.query.weight.clone();

  model.replace_head(10, rng);
  CHECK(model.head_classes() == 10);
  CHECK(model.head.output.weight.shape() == Shape{10, 8});
  CHECK(bit_equal(model.head.hidden.weight, hidden));
  CHECK(model.patch_head_kind() == vit::PatchHeadKind::none);
  nn::ForwardContext ctx;
  CHECK_THROWS(model.forward(Tensor::zeros({1, 3, 8, 8}), vit::ForwardMode::pretrain, ctx));

  ViTModel same = ViTModel::for_pretraining(cfg, vit::full_grid(cfg), rng);
  const Tensor same_out = same.head.output.weight.clone();
  const Tensor same_block = same.blocks[0].attention.query.weight.clone();
  same.replace_head(4, rng);
  CHECK_FALSE(bit_equal(same.head.output.weight, same_out));
  CHECK(bit_equal(same.blocks[0].attention.query.weight, same_block));

  CHECK_THROWS_AS(model.replace_head(0, rng), std::invalid_argument);
}

TEST_CASE("parameter count matches the closed form") {
  Rng rng(6);
  ViTConfig cfg;
  cfg.n_blocks = 7;
  const TokenGrid pre_grid{6, 6};
  ViTModel pre = ViTModel::for_pretraining(cfg, pre_grid, rng);
  // Hand count for h=256, expansion=512, 4 heads, P=4, C=3, 6x6 grid:
  //   embedding 48*256+256 + 256 + 37*256            = 22272
  //   block     4*256 + 4*(65536+256) + 131584 + 131328 = 527104
  //   final norm 512, M0 65792 + 1028                = 67332
  //   patch heads 36 * (65792 + 1028)               = 2405520
  const std::int64_t hand = 22272 + 7 * 527104 + 67332 + 2405520;
  CHECK(pre.parameter_count() == hand);
  CHECK(vit::expected_parameter_count(cfg, pre_grid, 4, vit::PatchHeadKind::per_position) == hand);

  ViTModel down = ViTModel::for_downstream(cfg, rng);
  CHECK(down.parameter_count() == vit::expected_parameter_count(cfg, {8, 8}, 10, vit::PatchHeadKind::none));

  ViTConfig shared = tiny_config();
  shared.share_patch_heads = true;
  ViTModel s = ViTModel::for_pretraining(shared, {4, 4}, rng);
  CHECK(s.parameter_count() == vit::expected_parameter_count(shared, {4, 4}, 4, vit::PatchHeadKind::shared));
  ViTConfig reuse = tiny_config();
  reuse.reuse_m0_head = true;
  ViTModel r = ViTModel::for_pretraining(reuse, {4, 4}, rng);
  CHECK(r.parameter_count() == vit::expected_parameter_count(reuse, {4, 4}, 4, vit::PatchHeadKind::reuse_m0));
  nn::ForwardContext ctx;
  CHECK(r.forward(Tensor::zeros({2, 3, 8, 8}), vit::ForwardMode::pretrain, ctx).patch_logits.shape() == Shape{2, 16, 4});
}

TEST_CASE("parameter names are unique") {
  Rng rng(7);
  ViTModel model = ViTModel::for_pretraining(tiny_config(), {4, 4}, rng);
  std::set<std::string> names;
  for (const auto& p : model.parameters()) CHECK(names.insert(p.name).second);
  CHECK(model.find_parameter("blocks.1.attention.key.weight").has_value());
  CHECK_FALSE(model.find_parameter("nope").has_value());
}

TEST_CASE("clone does not alias parameters") {
  Rng rng(8);
  ViTModel model = ViTModel::for_pretraining(tiny_config(), {4, 4}, rng);
  ViTModel copy = model.clone();
  auto a = model.parameters();
  auto b = copy.parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(bit_equal(a[i].tensor, b[i].tensor));
    CHECK_FALSE(a[i].tensor.shares_storage(b[i].tensor));
    CHECK(a[i].trainable() == b[i].trainable());
  }
}

TEST_CASE("token permutation with zeroed positions") {
  ViTConfig cfg = tiny_config();
  cfg.share_patch_heads = true;
  Rng rng(9);
  ViTModel model = ViTModel::for_pretraining(cfg, {4, 4}, rng);
  model.pos_embed.assign(Tensor::zeros(model.pos_embed.shape(), DType::f64));
  Tensor img = rng_draw(rng, UniformReal{-1, 1}, {1, 3, 8, 8}, DType::f64);

  // Swap patch (0,0) with patch (2,3) directly in pixel space.
  auto pixels = img.to_vector();
  auto swapped = pixels;
  for (int c = 0; c < 3; ++c) {
    for (int dy = 0; dy < 2; ++dy) {
      for (int dx = 0; dx < 2; ++dx) {
        const int a = (c * 8 + dy) * 8 + dx;
        const int b = (c * 8 + 4 + dy) * 8 + 6 + dx;
        std::swap(swapped[a], swapped[b]);
      }
    }
  }
  Tensor img2 = Tensor::from_list(img.shape(), swapped, DType::f64);
  nn::ForwardContext ctx;
  auto o1 = model.forward(img, vit::ForwardMode::pretrain, ctx);
  auto o2 = model.forward(img2, vit::ForwardMode::pretrain, ctx);
  CHECK(max_abs_diff(o1.cls_logits, o2.cls_logits) < 1e-12);
  const int t0 = 0, t1 = 2 * 4 + 3;
  CHECK(max_abs_diff(slice(o1.patch_logits, 1, t0, t0 + 1), slice(o2.patch_logits, 1, t1, t1 + 1)) < 1e-12);
  CHECK(max_abs_diff(slice(o1.patch_logits, 1, t1, t1 + 1), slice(o2.patch_logits, 1, t0, t0 + 1)) < 1e-12);
  CHECK(max_abs_diff(slice(o1.patch_logits, 1, 5, 6), slice(o2.patch_logits, 1, 5, 6)) < 1e-12);
}

TEST_CASE("freeze specs") {
  CHECK(FreezeSpec::parse("EB3") == FreezeSpec{FreezeSpec::Kind::EB, 3});
  CHECK(FreezeSpec::parse("MLP").to_string() == "MLP");
  CHECK_THROWS_AS(FreezeSpec::parse("EB0"), std::invalid_argument);
  CHECK_THROWS_AS(FreezeSpec::parse("XX"), std::invalid_argument);
  CHECK(vit::all_freeze_specs(7).size() == 10);

  ViTConfig cfg = tiny_config();
  Rng rng(10);
  ViTModel model = ViTModel::for_downstream(cfg, rng);

  vit::apply_freeze(model, FreezeSpec::parse("NF"));
  for (const auto& [name, t] : trainable_map(model)) CHECK_MESSAGE(t, name);

  vit::apply_freeze(model, FreezeSpec::parse("MLP"));
  for (const auto& [name, t] : trainable_map(model)) {
    CHECK_MESSAGE(t == (name == "head.output.weight" || name == "head.output.bias"), name);
  }

  vit::apply_freeze(model, FreezeSpec::parse("EB2"));
  auto eb2 = trainable_map(model);
  CHECK_FALSE(eb2["pos_embed"]);
  CHECK_FALSE(eb2["cls_token"]);
  CHECK_FALSE(eb2["patch_embed.weight"]);
  CHECK_FALSE(eb2["blocks.0.norm1.gamma"]);
  CHECK(eb2["blocks.1.norm1.gamma"]);
  CHECK(eb2["head.hidden.weight"]);

  CHECK_THROWS_AS(vit::apply_freeze(model, FreezeSpec{FreezeSpec::Kind::EB, 4}), std::invalid_argument);
}

TEST_CASE("freeze partition is monotone") {
  Rng rng(11);
  ViTModel model = ViTModel::for_downstream(tiny_config(), rng);
  std::set<std::string> previous;
  for (const auto& spec : vit::all_freeze_specs(3)) {
    vit::apply_freeze(model, spec);
    std::set<std::string> frozen;
    for (const auto& [name, t] : trainable_map(model)) {
      if (!t) frozen.insert(name);
    }
    for (const auto& name : previous) CHECK_MESSAGE(frozen.count(name) == 1, (spec.to_string() + " unfroze " + name));
    previous = frozen;
  }
}

TEST_CASE("EB3 leaves EB1 untouched after a gradient step") {
  Rng rng(12);
  ViTConfig cfg = tiny_config();
  ViTModel model = ViTModel::for_downstream(cfg, rng);
  vit::apply_freeze(model, FreezeSpec::parse("EB3"));
  std::map<std::string, Tensor> before;
  for (const auto& p : model.parameters()) before[p.name] = p.tensor.clone();

  Tensor images = rng_draw(rng, UniformReal{0, 1}, {4, 3, 8, 8}, DType::f64);
  nn::ForwardContext ctx;
  Tensor loss = nn::softmax_cross_entropy(model.forward(images, vit::ForwardMode::downstream, ctx).cls_logits, {0, 1, 2, 3});
  loss.backward();
  NoGradGuard guard;
  for (auto& p : model.parameters()) {
    if (p.trainable()) p.tensor.assign(p.tensor - p.tensor.grad() * 0.1);
  }
  for (const auto& p : model.parameters()) {
    const bool in_eb1 = p.name.rfind("blocks.0.", 0) == 0;
    if (in_eb1 || p.name.rfind("blocks.1.", 0) == 0) CHECK_MESSAGE(bit_equal(p.tensor, before[p.name]), p.name);
    if (p.name == "blocks.2.feed_forward.fc1.weight") CHECK_FALSE(bit_equal(p.tensor, before[p.name]));
  }
}

TEST_CASE("full model backward matches finite differences") {
  ViTConfig cfg = tiny_config();
  cfg.image_h = 4;
  cfg.image_w = 4;
  cfg.n_blocks = 2;
  for (int trial = 0; trial < 5; ++trial) {
    CAPTURE(trial);
    Rng rng(100 + trial);
    ViTModel model = ViTModel::for_pretraining(cfg, vit::full_grid(cfg), rng);
    Tensor images = random_f64(rng, {2, 3, 4, 4}, -1, 1, false);
    nn::ForwardContext ctx;
    auto loss = [&] {
      auto out = model.forward(images, vit::ForwardMode::pretrain, ctx);
      Tensor patches = reshape(out.patch_logits, {8, 4});
      return nn::softmax_cross_entropy(out.cls_logits, {1, 3}) +
             nn::softmax_cross_entropy(patches, {0, 1, 2, 3, 3, 2, 1, 0});
    };
    // The key bias shifts every score in a softmax row equally, so its true
    // gradient is zero and a relative error is meaningless; check it absolutely.
    std::vector<Tensor> inputs;
    std::vector<Tensor> zero_grad;
    for (const auto& p : model.parameters()) {
      (p.name.ends_with("attention.key.bias") ? zero_grad : inputs).push_back(p.tensor);
    }
    auto r = check_gradients(loss, inputs);
    CHECK(r.max_relative_error < 1e-6);
    for (auto& t : zero_grad) {
      t.zero_grad();
      loss().backward();
      for (double g : t.grad().to_vector()) CHECK(std::abs(g) < 1e-12);
      for (double g : finite_diff_grad([&](const Tensor&) { return loss(); }, t).to_vector()) CHECK(std::abs(g) < 1e-8);
    }
  }
}
