#include "doctest.h"
#include "helpers.hpp"
#include "patchrot/optim.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iterator>

using namespace patchrot;
using namespace patchrot::optim;
using patchrot::testing::scratch_dir;
using vit::FreezeSpec;
using vit::ViTConfig;
using vit::ViTModel;

namespace {

ViTConfig tiny_config(DType dtype = DType::f32) {
  ViTConfig cfg;
  cfg.image_c = 3;
  cfg.image_h = 16;
  cfg.image_w = 16;
  cfg.patch_size = 4;
  cfg.embed_dim = 8;
  cfg.n_blocks = 2;
  cfg.n_heads = 2;
  cfg.expansion = 16;
  cfg.dropout = 0.0;
  cfg.dtype = dtype;
  return cfg;
}

Tensor scalar_param(double v) {
  Tensor t = Tensor::from_list({1}, {v}, DType::f64);
  t.set_requires_grad(true);
  return t;
}

void set_grad(Tensor& p, double g) {
  p.zero_grad();
  Tensor y = sum(p * Tensor::from_list({1}, {g}, DType::f64));
  p.zero_grad();
  y.backward();
}

std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

// Synthetic dataset split with train statistics applied to both parts.
std::pair<data::Dataset, data::Dataset> synthetic_split(std::int64_t n_train, std::int64_t n_test, int size,
                                                        std::uint64_t seed) {
  data::Dataset all = data::gen_synthetic_oriented(n_train + n_test, size, size, seed);
  std::vector<std::int64_t> a, b;
  for (std::int64_t i = 0; i < n_train + n_test; ++i) (i < n_train ? a : b).push_back(i);
  data::Dataset train = all.subset(a), test = all.subset(b);
  data::compute_channel_stats(train);
  test.meta.channel_mean = train.meta.channel_mean;
  test.meta.channel_std = train.meta.channel_std;
  return {train, test};
}

std::map<std::string, Tensor> snapshot(const ViTModel& m) {
  std::map<std::string, Tensor> out;
  for (const auto& p : m.parameters()) out[p.name] = p.tensor.clone();
  return out;
}

// Golden fixture: every parameter element k holds (k mod 17) / 8 - 1.
ViTModel golden_model() {
  ViTConfig cfg;
  cfg.image_c = 1;
  cfg.image_h = 4;
  cfg.image_w = 4;
  cfg.patch_size = 2;
  cfg.embed_dim = 4;
  cfg.n_blocks = 1;
  cfg.n_heads = 1;
  cfg.expansion = 4;
  cfg.n_downstream_classes = 3;
  Rng rng(0);
  ViTModel m = ViTModel::for_downstream(cfg, rng);
  std::int64_t k = 0;
  m.visit_parameters([&](const std::string&, Tensor& t) {
    std::vector<double> v(static_cast<std::size_t>(t.numel()));
    for (auto& x : v) x = static_cast<double>(k++ % 17) / 8.0 - 1.0;
    t.assign(Tensor::from_list(t.shape(), v, t.dtype()));
  });
  m.find_parameter("head.hidden.weight")->set_requires_grad(false);
  return m;
}

}  // namespace

TEST_CASE("adamw examples") {
  SUBCASE("zero gradient without decay leaves the parameter") {
    Tensor p = scalar_param(0.7);
    AdamW opt({{"p", p}}, {.lr = 0.1, .weight_decay = 0.0});
    set_grad(p, 0.0);
    opt.step();
    CHECK(p.item() == 0.7);
  }
  SUBCASE("first step moves by lr") {
    Tensor p = scalar_param(0.0);
    AdamW opt({{"p", p}}, {.lr = 0.1, .weight_decay = 0.0});
    set_grad(p, 1.0);
    opt.step();
    CHECK(std::abs(p.item() + 0.1) < 1e-6);
  }
  SUBCASE("pure decay") {
    Tensor p = scalar_param(2.0);
    AdamW opt({{"p", p}}, {.lr = 0.1, .weight_decay = 0.1});
    set_grad(p, 0.0);
    opt.step();
    CHECK(p.item() == doctest::Approx(2.0 * (1 - 0.01)).epsilon(1e-15));
  }
  SUBCASE("lr zero changes nothing") {
    Tensor p = scalar_param(-1.25);
    AdamW opt({{"p", p}}, {.lr = 0.0, .weight_decay = 0.5});
    for (int i = 0; i < 3; ++i) {
      set_grad(p, 3.0);
      opt.step();
    }
    CHECK(p.item() == -1.25);
    CHECK(opt.step_count() == 3);
  }
  SUBCASE("missing gradient is an error") {
    Tensor p = scalar_param(1.0);
    AdamW opt({{"weights", p}});
    CHECK_THROWS_WITH_AS(opt.step(), doctest::Contains("weights"), std::logic_error);
  }
}

TEST_CASE("adamw matches a scalar reference over many steps") {
  Rng rng(1);
  Tensor p = Tensor::from_list({3}, {0.5, -0.25, 2.0}, DType::f64);
  p.set_requires_grad(true);
  Tensor frozen = Tensor::from_list({2}, {1.0, 2.0}, DType::f64);
  const AdamWOptions o{.lr = 0.05, .weight_decay = 0.02, .beta1 = 0.8, .beta2 = 0.99, .eps = 1e-6};
  AdamW opt({{"p", p}, {"frozen", frozen}}, o);
  std::vector<double> ref{0.5, -0.25, 2.0}, m(3, 0), v(3, 0);
  for (int t = 1; t <= 20; ++t) {
    std::vector<double> g{rng.normal(), rng.normal(), rng.normal()};
    p.zero_grad();
    sum(p * Tensor::from_list({3}, g, DType::f64)).backward();
    opt.step();
    for (int i = 0; i < 3; ++i) {
      m[i] = o.beta1 * m[i] + (1 - o.beta1) * g[i];
      v[i] = o.beta2 * v[i] + (1 - o.beta2) * g[i] * g[i];
      const double mh = m[i] / (1 - std::pow(o.beta1, t));
      const double vh = v[i] / (1 - std::pow(o.beta2, t));
      ref[i] = ref[i] - o.lr * o.weight_decay * ref[i] - o.lr * mh / (std::sqrt(vh) + o.eps);
    }
    CHECK(opt.step_count() == t);
  }
  for (int i = 0; i < 3; ++i) CHECK(p.value(i) == doctest::Approx(ref[i]).epsilon(1e-12));
  for (const auto& s : opt.slots()) {
    for (double x : s.v) CHECK(x >= 0);
    if (s.param.name == "frozen") {
      CHECK(s.m == std::vector<double>(2, 0.0));
      CHECK(s.v == std::vector<double>(2, 0.0));
    }
  }
  CHECK(frozen.to_vector() == std::vector<double>{1.0, 2.0});
}

TEST_CASE("lr_at examples") {
  const LrSchedule s{.base_lr = 5e-4, .warmup_epochs = 10, .total_epochs = 30, .min_lr = 1e-5};
  const std::int64_t spe = 10;
  CHECK(lr_at(s, 0, spe) == doctest::Approx(5e-4 / 100));
  CHECK(lr_at(s, 10 * spe - 1, spe) == doctest::Approx(5e-4).epsilon(1e-15));
  CHECK(lr_at(s, 30 * spe - 1, spe) == doctest::Approx(1e-5).epsilon(1e-12));
  // decay runs from step 99 to step 299; its midpoint is step 199
  CHECK(std::abs(lr_at(s, 199, spe) - (5e-4 + 1e-5) / 2) < 1e-9);
  CHECK(lr_at(s, 10'000, spe) == 1e-5);
  double prev = 0;
  for (std::int64_t step = 0; step < 100; ++step) {
    const double lr = lr_at(s, step, spe);
    CHECK(lr > prev);
    prev = lr;
  }
  for (std::int64_t step = 100; step < 300; ++step) {
    const double lr = lr_at(s, step, spe);
    CHECK(lr <= prev);
    CHECK(prev - lr < 5e-4 * 0.01);  // no jump at the warmup boundary or later
    prev = lr;
  }
  // warmup longer than the run ends exactly at base_lr
  const LrSchedule short_run{.base_lr = 1.0, .warmup_epochs = 10, .total_epochs = 2};
  CHECK(lr_at(short_run, 5, 3) == 1.0);
  CHECK_THROWS_AS(lr_at(s, -1, spe), std::invalid_argument);
}

TEST_CASE("checkpoint round trip") {
  auto dir = scratch_dir("ckpt");
  Rng rng(2);
  ViTModel model = ViTModel::for_pretraining(tiny_config(), {3, 3}, rng);
  model.find_parameter("norm.gamma")->set_requires_grad(false);
  AdamW opt(model.parameters());
  opt.zero_grad();
  nn::ForwardContext ctx;
  auto out = model.forward(rng_draw(rng, UniformReal{0, 1}, {2, 3, 12, 12}), vit::ForwardMode::pretrain, ctx);
  (sum(out.cls_logits) + sum(out.patch_logits)).backward();
  opt.step();
  save_checkpoint(dir / "a.prckpt", model, 3, {{"seed", 9}}, &opt);

  Checkpoint ck = read_checkpoint(dir / "a.prckpt");
  CHECK(ck.epoch == 3);
  CHECK(ck.run_config.at("seed") == 9);
  CHECK(ck.grid == vit::TokenGrid{3, 3});
  CHECK(ck.patch_heads == vit::PatchHeadKind::per_position);
  CHECK(ck.optimizer_step == 1);
  ViTModel back = model_from_checkpoint(ck);
  for (const auto& p : model.parameters()) {
    auto q = back.find_parameter(p.name);
    REQUIRE(q.has_value());
    CHECK(bit_equal(p.tensor, *q));
    CHECK(p.trainable() == q->requires_grad());
  }
  AdamW restored(back.parameters());
  load_optimizer(restored, ck);
  CHECK(restored.step_count() == 1);
  for (std::size_t i = 0; i < opt.slots().size(); ++i) {
    CHECK(opt.slots()[i].m == restored.slots()[i].m);
    CHECK(opt.slots()[i].v == restored.slots()[i].v);
  }
  // Re-saving the loaded model reproduces the file.
  save_checkpoint(dir / "b.prckpt", back, 3, {{"seed", 9}}, &restored);
  CHECK(read_bytes(dir / "a.prckpt") == read_bytes(dir / "b.prckpt"));
}

TEST_CASE("checkpoint integrity errors") {
  auto dir = scratch_dir("ckpt_err");
  Rng rng(3);
  ViTModel model = ViTModel::for_downstream(tiny_config(), rng);
  save_checkpoint(dir / "ok.prckpt", model, 1);
  const std::string bytes = read_bytes(dir / "ok.prckpt");

  write_bytes(dir / "trunc.prckpt", bytes.substr(0, bytes.size() - 10));
  CHECK_THROWS_WITH_AS(read_checkpoint(dir / "trunc.prckpt"), doctest::Contains("truncated payload"), CheckpointError);

  write_bytes(dir / "tail.prckpt", bytes + "xx");
  CHECK_THROWS_WITH_AS(read_checkpoint(dir / "tail.prckpt"), doctest::Contains("trailing"), CheckpointError);

  std::string flipped = bytes;
  flipped[flipped.size() - 3] ^= 0x40;
  write_bytes(dir / "flip.prckpt", flipped);
  CHECK_THROWS_WITH_AS(read_checkpoint(dir / "flip.prckpt"), doctest::Contains("checksum"), CheckpointError);

  std::string magic = bytes;
  magic[0] = 'X';
  write_bytes(dir / "magic.prckpt", magic);
  CHECK_THROWS_WITH_AS(read_checkpoint(dir / "magic.prckpt"), doctest::Contains("magic"), CheckpointError);

  write_bytes(dir / "short.prckpt", bytes.substr(0, 40));
  CHECK_THROWS_AS(read_checkpoint(dir / "short.prckpt"), CheckpointError);

  CHECK_THROWS_AS(read_checkpoint(dir / "absent.prckpt"), CheckpointError);
}

TEST_CASE("loading into a mismatched model names the offending tensors") {
  auto dir = scratch_dir("ckpt_shape");
  Rng rng(4);
  ViTConfig cfg = tiny_config();
  ViTModel model = ViTModel::for_downstream(cfg, rng);
  save_checkpoint(dir / "m.prckpt", model, 0);
  Checkpoint ck = read_checkpoint(dir / "m.prckpt");

  ViTConfig wider = cfg;
  wider.expansion = 24;
  ViTModel other = ViTModel::for_downstream(wider, rng);
  CHECK_THROWS_WITH_AS(load_parameters(other, ck), doctest::Contains("blocks.0.feed_forward.fc1.weight: checkpoint [16x8] vs model [24x8]"), CheckpointError);

  ViTConfig deeper = cfg;
  deeper.n_blocks = 3;
  ViTModel deep = ViTModel::for_downstream(deeper, rng);
  CHECK_THROWS_WITH_AS(load_parameters(deep, ck), doctest::Contains("missing from checkpoint"), CheckpointError);
}

TEST_CASE("golden checkpoint fixture parses identically") {
  const std::filesystem::path fixture = std::filesystem::path(PATCHROT_FIXTURE_DIR) / "golden.prckpt";
  ViTModel expect = golden_model();
  if (std::getenv("PATCHROT_WRITE_GOLDEN")) save_checkpoint(fixture, expect, 7, {{"note", "golden"}});
  REQUIRE(std::filesystem::exists(fixture));
  Checkpoint ck = read_checkpoint(fixture);
  CHECK(ck.epoch == 7);
  CHECK(ck.run_config.at("note") == "golden");
  CHECK(ck.head_classes == 3);
  CHECK(ck.entries.front().name == "patch_embed.weight");
  CHECK(ck.entries.front().offset == 0);
  ViTModel got = model_from_checkpoint(ck);
  for (const auto& p : expect.parameters()) {
    CHECK(bit_equal(p.tensor, *got.find_parameter(p.name)));
    CHECK(p.trainable() == got.find_parameter(p.name)->requires_grad());
  }
  auto dir = scratch_dir("golden");
  save_checkpoint(dir / "again.prckpt", got, 7, {{"note", "golden"}});
  CHECK(read_bytes(dir / "again.prckpt") == read_bytes(fixture));
}

TEST_CASE("metrics csv") {
  MetricsLog log;
  log.add({1, "train", 1.5, 0.25, kNoValue, 1e-4});
  log.add({1, "test", kNoValue, 0.125, 0.5, kNoValue});
  CHECK(log.csv() == "epoch,phase,loss,top1,top5,lr\n1,train,1.5,0.25,,0.0001\n1,test,,0.125,0.5,\n");
  CHECK(log.last("test")->top5 == 0.5);
  CHECK(log.last("nope") == nullptr);
}

TEST_CASE("overfitting a four-sample pretext batch") {
  Rng rng(5);
  ViTModel model = ViTModel::for_pretraining(tiny_config(DType::f64), {3, 3}, rng);
  auto geom = pretext::compute_reduced_geometry(16, 16, 4, 1);
  std::vector<Tensor> base;
  for (int i = 0; i < 4; ++i) base.push_back(rng_draw(rng, UniformReal{0, 1}, {3, 16, 16}, DType::f64));
  pretext::PretextBatch batch = pretext::assemble_pretext_batch(base, geom, rng, {});
  AdamW opt(model.parameters(), {.lr = 1e-3, .weight_decay = 0.0});
  double prev = 1e300;
  int decreases = 0;
  for (int step = 0; step < 50; ++step) {
    nn::ForwardContext ctx;
    auto out = model.forward(batch.images, vit::ForwardMode::pretrain, ctx);
    Tensor loss = pretext::patchrot_loss(out.cls_logits, out.patch_logits, batch).total;
    decreases += loss.item() < prev;
    prev = loss.item();
    opt.zero_grad();
    loss.backward();
    opt.step();
  }
  CHECK(decreases == 50);
}

TEST_CASE("pretrain examples") {
  auto [train, test] = synthetic_split(256, 0, 16, 6);
  ViTConfig cfg = tiny_config();
  auto geom = pretext_geometry(cfg, 1, false);
  CHECK(geom.count() == 9);

  PretrainConfig pc;
  pc.epochs = 2;
  pc.batch_size = 32;
  pc.seed = 11;
  pc.warmup_epochs = 0;
  pc.adam.lr = 2e-3;

  auto run = [&](const PretrainConfig& c) {
    Rng rng(7);
    ViTModel model = ViTModel::for_pretraining(cfg, {geom.rows, geom.cols}, rng);
    return pretrain(model, train, c);
  };
  PretrainResult a = run(pc);
  REQUIRE(a.train_loss.size() == 2);
  CHECK(a.train_loss[1] < a.train_loss[0]);
  CHECK(a.holdout_size == 13);
  CHECK(run(pc).metrics.csv() == a.metrics.csv());

  SUBCASE("forced zero rotation is learned in one epoch") {
    PretrainConfig z = pc;
    z.epochs = 1;
    z.batch_size = 16;
    z.adam.lr = 5e-3;
    z.flags.force_zero_rotation = true;
    PretrainResult r = run(z);
    CHECK(r.heldout.image() == 1.0);
    CHECK(r.heldout.patch() == 1.0);
  }
  SUBCASE("geometry mismatch") {
    Rng rng(8);
    ViTModel wrong = ViTModel::for_pretraining(cfg, {4, 4}, rng);
    CHECK_THROWS_AS(pretrain(wrong, train, pc), ShapeError);
  }
  SUBCASE("no patch rotation drops the heads") {
    PretrainConfig np = pc;
    np.epochs = 1;
    np.flags.no_patch_rot = true;
    Rng rng(9);
    ViTModel model = ViTModel::for_pretraining(cfg, {geom.rows, geom.cols}, rng);
    PretrainResult r = pretrain(model, train, np);
    CHECK(model.patch_head_kind() == vit::PatchHeadKind::none);
    CHECK(r.heldout.patch_total == 0);
    CHECK(r.metrics.last("heldout_patch_rot") == nullptr);
  }
}

TEST_CASE("finetune freezing and probing") {
  auto [train, test] = synthetic_split(40, 20, 16, 10);
  ViTConfig cfg = tiny_config();
  cfg.n_downstream_classes = 10;
  cfg.dropout = 0.1;
  Rng rng(12);
  ViTModel pre = ViTModel::for_pretraining(cfg, {3, 3}, rng);

  ViTModel down = downstream_from_pretrained(pre, 10, 1);
  CHECK(down.pos_embed.dim(0) == 17);
  CHECK(down.patch_head_kind() == vit::PatchHeadKind::none);
  CHECK(down.head_classes() == 10);

  FinetuneConfig fc;
  fc.epochs = 1;
  fc.batch_size = 4;  // 10 optimizer steps
  fc.seed = 3;
  fc.adam.lr = 1e-2;
  fc.augment = {.pad = 2, .random_crop = true, .hflip = true};

  for (const FreezeSpec& spec : vit::all_freeze_specs(cfg.n_blocks)) {
    CAPTURE(spec.to_string());
    ViTModel m = down.clone();
    auto before = snapshot(m);
    FinetuneConfig c = fc;
    c.freeze = spec;
    finetune(m, train, test, c);
    int changed = 0;
    for (const auto& p : m.parameters()) {
      const bool same = bit_equal(p.tensor, before.at(p.name));
      if (!p.trainable()) CHECK(same);
      changed += !same;
    }
    CHECK(changed > 0);
    if (spec.kind == FreezeSpec::Kind::MLP) {
      CHECK(changed == 2);
      CHECK_FALSE(bit_equal(*m.find_parameter("head.output.weight"), before.at("head.output.weight")));
    }
  }
}

TEST_CASE("cached probe features match the full forward") {
  auto [train, test] = synthetic_split(24, 12, 16, 13);
  ViTConfig cfg = tiny_config();
  cfg.dropout = 0.2;
  Rng rng(14);
  ViTModel base = ViTModel::for_downstream(cfg, rng);
  FinetuneConfig fc;
  fc.epochs = 3;
  fc.batch_size = 8;
  fc.freeze = FreezeSpec::parse("MLP");
  fc.adam.lr = 1e-2;
  ViTModel a = base.clone();
  ViTModel b = base.clone();
  FinetuneResult ra = finetune(a, train, test, fc);
  fc.cache_frozen_features = false;
  FinetuneResult rb = finetune(b, train, test, fc);
  CHECK(bit_equal(a.head.output.weight, b.head.output.weight));
  CHECK(ra.metrics.csv() == rb.metrics.csv());
}

TEST_CASE("finetune from random init with zero epochs is near chance") {
  auto [train, test] = synthetic_split(20, 200, 16, 15);
  Rng rng(16);
  ViTModel m = ViTModel::for_downstream(tiny_config(), rng);
  FinetuneConfig fc;
  fc.epochs = 0;
  FinetuneResult r = finetune(m, train, test, fc);
  CHECK(r.top1 < 0.3);
  CHECK(r.top5 >= r.top1);
  REQUIRE(r.metrics.rows.size() == 1);
  CHECK(r.metrics.rows[0].phase == "test");
}
