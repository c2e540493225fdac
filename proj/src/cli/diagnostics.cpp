#include "patchrot/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>

#include "patchrot/gradcheck.hpp"
#include "patchrot/optim.hpp"

namespace patchrot::diagnostics {

namespace {

std::string num(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

Tensor rand64(Rng& rng, const Shape& shape, double lo = -1.0, double hi = 1.0, bool grad = true) {
  Tensor t = rng_draw(rng, UniformReal{lo, hi}, shape, DType::f64);
  t.set_requires_grad(grad);
  return t;
}

struct GradCase {
  std::string name;
  // Builds fresh inputs for one instance and returns (loss, inputs).
  std::function<std::pair<std::function<Tensor()>, std::vector<Tensor>>(Rng&)> make;
};

std::vector<GradCase> primitive_cases() {
  // Fixed weights keep reductions from collapsing to plain sums.
  auto weighted = [](const Tensor& t, const Tensor& w) { return sum(t * w); };
  std::vector<GradCase> cases;
  auto unary = [&](std::string name, std::function<Tensor(const Tensor&)> f, double lo, double hi) {
    cases.push_back({name, [=](Rng& rng) {
                       Tensor a = rand64(rng, {2, 3, 4}, lo, hi);
                       Tensor w = rand64(rng, {2, 3, 4}, -1, 1, false);
                       return std::pair{std::function<Tensor()>([=] { return weighted(f(a), w); }), std::vector<Tensor>{a}};
                     }});
  };
  auto binary = [&](std::string name, std::function<Tensor(const Tensor&, const Tensor&)> f, Shape sb, double lo) {
    cases.push_back({name, [=](Rng& rng) {
                       Tensor a = rand64(rng, {2, 3, 4});
                       Tensor b = rand64(rng, sb, lo, lo + 1.5);
                       Tensor w = rand64(rng, {2, 3, 4}, -1, 1, false);
                       return std::pair{std::function<Tensor()>([=] { return weighted(f(a, b), w); }), std::vector<Tensor>{a, b}};
                     }});
  };
  binary("add", [](const Tensor& a, const Tensor& b) { return a + b; }, {3, 4}, -1.0);
  binary("sub", [](const Tensor& a, const Tensor& b) { return a - b; }, {3, 4}, -1.0);
  binary("mul", [](const Tensor& a, const Tensor& b) { return a * b; }, {3, 4}, -1.0);
  binary("div", [](const Tensor& a, const Tensor& b) { return a / b; }, {2, 3, 1}, 0.5);
  unary("exp", [](const Tensor& a) { return exp(a); }, -1, 1);
  unary("log", [](const Tensor& a) { return log(a); }, 0.5, 2);
  unary("tanh", [](const Tensor& a) { return tanh(a * 2.0); }, -1, 1);
  unary("power", [](const Tensor& a) { return power(a, 1.7); }, 0.5, 2);
  unary("sqrt", [](const Tensor& a) { return sqrt(a); }, 0.5, 2);
  unary("reshape", [](const Tensor& a) { return reshape(reshape(a, {6, 4}) * 3.0, {2, 3, 4}); }, -1, 1);
  unary("broadcast", [](const Tensor& a) { return broadcast_to(slice(a, 1, 0, 1), {2, 3, 4}) * a; }, -1, 1);
  cases.push_back({"matmul", [=](Rng& rng) {
                     Tensor a = rand64(rng, {2, 3, 4});
                     Tensor m = rand64(rng, {4, 5});
                     Tensor w = rand64(rng, {2, 3, 5}, -1, 1, false);
                     return std::pair{std::function<Tensor()>([=] { return weighted(matmul(a, m), w); }), std::vector<Tensor>{a, m}};
                   }});
  auto reduction = [&](std::string name, std::function<Tensor(const Tensor&)> f) {
    cases.push_back({name, [=](Rng& rng) {
                       Tensor a = rand64(rng, {2, 3, 4});
                       return std::pair{std::function<Tensor()>([=] {
                                          Tensor r = f(a);
                                          return sum(r * r);
                                        }),
                                        std::vector<Tensor>{a}};
                     }});
  };
  reduction("sum", [](const Tensor& a) { return sum(a, 1); });
  reduction("mean", [](const Tensor& a) { return mean(a, -1, true); });
  reduction("max", [](const Tensor& a) { return max(a, 1); });
  reduction("transpose", [](const Tensor& a) { return transpose(a, 0, 2) * transpose(a * a, 0, 2); });
  reduction("slice", [](const Tensor& a) { return slice(a, 1, 1, 3) * slice(a, 1, 0, 2); });
  reduction("concat", [](const Tensor& a) { return concat({slice(a, 2, 0, 1), a * a, slice(a, 2, 1, 4)}, 2); });
  reduction("gather", [](const Tensor& a) {
    Index idx{{2, 3, 2}, {0, 3, 1, 1, 2, 0, 3, 3, 0, 1, 2, 2}};
    return gather(a, 2, idx);
  });
  reduction("select_rows", [](const Tensor& a) { return select_rows(a, {1, 0, 1}); });
  return cases;
}

std::vector<GradCase> layer_cases() {
  std::vector<GradCase> cases;
  auto probed = [&](std::string name, std::function<std::pair<std::function<Tensor(const Tensor&)>, std::vector<Tensor>>(Rng&, const Tensor&)> f) {
    cases.push_back({name, [=](Rng& rng) {
                       Tensor x = rand64(rng, {2, 3, 6});
                       Tensor probe = rand64(rng, {2, 3, 6}, -1, 1, false);
                       auto [fn, params] = f(rng, x);
                       params.insert(params.begin(), x);
                       return std::pair{std::function<Tensor()>([=] {
                                          Tensor y = fn(x);
                                          return sum(y * slice(probe, 2, 0, y.shape().back()));
                                        }),
                                        params};
                     }});
  };
  using Fn = std::function<Tensor(const Tensor&)>;
  probed("linear", [](Rng& rng, const Tensor&) {
    Tensor w = rand64(rng, {4, 6}), b = rand64(rng, {4});
    return std::pair{Fn([=](const Tensor& x) { return nn::linear_forward(x, w, b); }), std::vector<Tensor>{w, b}};
  });
  probed("layernorm", [](Rng& rng, const Tensor&) {
    Tensor g = rand64(rng, {6}, 0.5, 1.5), b = rand64(rng, {6});
    return std::pair{Fn([=](const Tensor& x) { return nn::layernorm_forward(x, g, b); }), std::vector<Tensor>{g, b}};
  });
  probed("gelu", [](Rng&, const Tensor&) { return std::pair{Fn([](const Tensor& x) { return nn::gelu(x * 2.0); }), std::vector<Tensor>{}}; });
  probed("dropout_off", [](Rng&, const Tensor&) {
    return std::pair{Fn([](const Tensor& x) { return nn::dropout(x, 0.0, nn::Mode::train, nullptr); }), std::vector<Tensor>{}};
  });
  probed("softmax", [](Rng&, const Tensor&) { return std::pair{Fn([](const Tensor& x) { return nn::softmax(x, -1); }), std::vector<Tensor>{}}; });
  probed("mhsa", [](Rng& rng, const Tensor&) {
    Rng init = rng.fork("mhsa");
    auto attn = std::make_shared<nn::MultiHeadSelfAttention>(6, 2, 0.0, init, DType::f64);
    std::vector<Tensor> params{attn->query.weight, attn->query.bias, attn->key.weight, attn->value.weight,
                               attn->value.bias, attn->proj.weight, attn->proj.bias};
    return std::pair{Fn([attn](const Tensor& x) {
                       nn::ForwardContext ctx;
                       return attn->forward(x, ctx);
                     }),
                     params};
  });
  probed("encoder_block", [](Rng& rng, const Tensor&) {
    Rng init = rng.fork("block");
    auto block = std::make_shared<nn::EncoderBlock>(6, 2, 12, 0.0, init, DType::f64);
    std::vector<Tensor> params{block->norm1.gamma, block->attention.value.weight, block->norm2.beta,
                               block->feed_forward.fc1.weight, block->feed_forward.fc2.bias};
    return std::pair{Fn([block](const Tensor& x) {
                       nn::ForwardContext ctx;
                       return block->forward(x, ctx);
                     }),
                     params};
  });
  cases.push_back({"cross_entropy", [](Rng& rng) {
                     Tensor logits = rand64(rng, {5, 4}, -2, 2);
                     std::vector<int> labels(5);
                     for (int& l : labels) l = static_cast<int>(rng.uniform_int(0, 3));
                     return std::pair{std::function<Tensor()>([=] { return nn::softmax_cross_entropy(logits, labels); }),
                                      std::vector<Tensor>{logits}};
                   }});
  return cases;
}

// Full pretraining model on a 12x12 input (P=4, B=1 -> 2x2 grid) through the
// pretext loss of an assembled batch.
GradCase vit_case() {
  return {"vit_patchrot_loss", [](Rng& rng) {
            vit::ViTConfig cfg;
            cfg.image_c = 2;
            cfg.image_h = 12;
            cfg.image_w = 12;
            cfg.patch_size = 4;
            cfg.embed_dim = 8;
            cfg.n_blocks = 2;
            cfg.n_heads = 2;
            cfg.expansion = 12;
            cfg.dropout = 0.0;
            cfg.dtype = DType::f64;
            const auto geom = optim::pretext_geometry(cfg, 1, false);
            Rng init = rng.fork("vit");
            auto model = std::make_shared<vit::ViTModel>(vit::ViTModel::for_pretraining(cfg, {geom.rows, geom.cols}, init));
            std::vector<Tensor> base{rng_draw(rng, UniformReal{0, 1}, {2, 12, 12})};
            auto batch = std::make_shared<pretext::PretextBatch>(
                pretext::assemble_pretext_batch(base, geom, rng.fork("batch"), {}));
            batch->images = batch->images.to(DType::f64);
            // The key bias shifts a whole softmax row, so its exact gradient is
            // zero; relative error is undefined there and it is left out.
            std::vector<Tensor> params;
            for (const auto& p : model->parameters()) {
              if (!p.name.ends_with("attention.key.bias")) params.push_back(p.tensor);
            }
            return std::pair{std::function<Tensor()>([model, batch] {
                               nn::ForwardContext ctx;
                               auto out = model->forward(batch->images, vit::ForwardMode::pretrain, ctx);
                               return pretext::patchrot_loss(out.cls_logits, out.patch_logits, *batch).total;
                             }),
                             params};
          }};
}

Check run_grad_case(const std::string& group, const GradCase& c, int instances, std::uint64_t seed, double tolerance) {
  Rng rng = Rng::derive(seed, "selftest/" + c.name);
  double worst = 0.0;
  bool ok = true;
  for (int i = 0; i < instances; ++i) {
    Rng r = rng.fork(static_cast<std::uint64_t>(i));
    auto [loss, inputs] = c.make(r);
    const auto res = check_gradients(loss, inputs, tolerance);
    worst = std::max(worst, res.max_relative_error);
    ok = ok && res.passed;
  }
  return {group, c.name, ok, "max rel err " + num("%.2e", worst) + " over " + std::to_string(instances)};
}

}  // namespace

std::vector<Check> gradient_checks(int instances, std::uint64_t seed, double tolerance) {
  std::vector<Check> out;
  for (const auto& c : primitive_cases()) out.push_back(run_grad_case("gradient", c, instances, seed, tolerance));
  for (const auto& c : layer_cases()) out.push_back(run_grad_case("gradient", c, instances, seed, tolerance));
  out.push_back(run_grad_case("gradient", vit_case(), instances, seed, tolerance));
  return out;
}

std::vector<Check> rotation_checks(int images, std::uint64_t seed) {
  // One counter-clockwise quarter turn by index: out[i][j] = in[j][n-1-i].
  auto turn = [](const std::vector<double>& in, int c, int n) {
    std::vector<double> out(in.size());
    for (int ch = 0; ch < c; ++ch) {
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) out[(ch * n + i) * n + j] = in[(ch * n + j) * n + (n - 1 - i)];
      }
    }
    return out;
  };
  Rng rng = Rng::derive(seed, "selftest/rotation");
  int action_fail = 0, oracle_fail = 0;
  for (int t = 0; t < images; ++t) {
    const int n = static_cast<int>(rng.uniform_int(1, 9));
    const int c = static_cast<int>(rng.uniform_int(1, 3));
    const Tensor img = rng_draw(rng, UniformReal{0, 1}, {c, n, n});
    const int a = static_cast<int>(rng.uniform_int(0, 3));
    const int b = static_cast<int>(rng.uniform_int(0, 3));
    if (!bit_equal(pretext::rotate_quarter(pretext::rotate_quarter(img, a), b), pretext::rotate_quarter(img, (a + b) % 4))) {
      ++action_fail;
    }
    std::vector<double> expect = img.to_vector();
    for (int k = 0; k < a; ++k) expect = turn(expect, c, n);
    if (pretext::rotate_quarter(img, a).to_vector() != expect) ++oracle_fail;
  }
  // [[1, 2], [3, 4]] turned counter-clockwise.
  const Tensor two = Tensor::from_list({1, 2, 2}, {1, 2, 3, 4});
  const std::vector<std::vector<double>> by_hand{{1, 2, 3, 4}, {2, 4, 1, 3}, {4, 3, 2, 1}, {3, 1, 4, 2}};
  int manual_fail = 0;
  for (int k = 0; k < 4; ++k) manual_fail += pretext::rotate_quarter(two, k).to_vector() != by_hand[k];
  const std::string of = " of " + std::to_string(images);
  return {{"rotation", "z4_action", action_fail == 0, std::to_string(action_fail) + " failures" + of},
          {"rotation", "index_oracle", oracle_fail == 0, std::to_string(oracle_fail) + " failures" + of},
          {"rotation", "manual_2x2", manual_fail == 0, std::to_string(manual_fail) + " failures of 4"}};
}

std::vector<Check> geometry_checks() {
  std::vector<Check> out;
  auto geo = [&](int h, int p, int b, int expect_side, int expect_n) {
    const auto g = pretext::compute_reduced_geometry(h, h, p, b);
    const bool ok = g.height() == expect_side && g.width() == expect_side && g.count() == expect_n;
    char name[64];
    std::snprintf(name, sizeof(name), "reduced_%dx%d_P%d_B%d", h, h, p, b);
    out.push_back({"geometry", name, ok,
                   std::to_string(g.height()) + "x" + std::to_string(g.width()) + ", " + std::to_string(g.count()) +
                       " patches"});
  };
  geo(32, 4, 1, 24, 36);
  geo(64, 8, 2, 48, 36);
  const Tensor tokens = vit::tokenize(Tensor::zeros({3, 32, 32}), 4);
  out.push_back({"geometry", "tokenize_32x32_P4", tokens.dim(0) == 64 && tokens.dim(1) == 48,
                 std::to_string(tokens.dim(0)) + " patches of " + std::to_string(tokens.dim(1))});
  return out;
}

std::vector<Check> batch_checks(std::uint64_t seed) {
  Rng rng = Rng::derive(seed, "selftest/batch");
  std::vector<Tensor> base;
  for (int i = 0; i < 128; ++i) base.push_back(rng_draw(rng, UniformReal{0, 1}, {3, 32, 32}));
  const auto geom = pretext::compute_reduced_geometry(32, 32, 4, 1);
  const auto batch = pretext::assemble_pretext_batch(base, geom, rng.fork("assemble"), {});
  std::vector<Check> out;
  out.push_back({"batch", "size_128x5", batch.size() == 640, std::to_string(batch.size()) + " samples"});

  bool balanced = batch.image_rows().size() == 512;
  for (std::size_t b = 0; balanced && b < 128; ++b) {
    int seen[4] = {0, 0, 0, 0};
    for (int k = 0; k < 4; ++k) {
      const int l = batch.image_labels[b * 4 + k];
      if (l < 0 || l > 3) balanced = false; else ++seen[l];
    }
    balanced = balanced && seen[0] == 1 && seen[1] == 1 && seen[2] == 1 && seen[3] == 1;
  }
  out.push_back({"batch", "image_labels_per_base", balanced, "labels 0..3 once per base image"});

  std::int64_t counts[4] = {0, 0, 0, 0}, total = 0;
  bool well_formed = batch.patch_rows().size() == 128;
  for (auto r : batch.patch_rows()) {
    for (int k = 0; k < geom.count(); ++k) {
      const int l = batch.patch_labels[static_cast<std::size_t>(r) * geom.count() + k];
      if (l < 0 || l > 3) well_formed = false; else ++counts[l];
      ++total;
    }
  }
  // Binomial(total, 1/4) per class; 4 sigma.
  const double mean_count = total / 4.0, sd = std::sqrt(total * 0.25 * 0.75);
  double worst = 0;
  for (auto c : counts) worst = std::max(worst, std::abs(c - mean_count) / sd);
  out.push_back({"batch", "patch_labels_uniform", well_formed && worst < 4.0,
                 std::to_string(total) + " labels, worst deviation " + num("%.2f", worst) + " sd"});
  return out;
}

std::vector<Check> init_loss_checks(std::uint64_t seed) {
  vit::ViTConfig cfg;  // ViT-Lite defaults, 32x32 RGB
  cfg.dropout = 0.0;
  cfg.n_blocks = 2;
  const auto geom = optim::pretext_geometry(cfg, 1, false);
  Rng rng = Rng::derive(seed, "selftest/init-loss");
  Rng init = rng.fork("model");
  const auto model = vit::ViTModel::for_pretraining(cfg, {geom.rows, geom.cols}, init);
  std::vector<Tensor> base;
  for (int i = 0; i < 16; ++i) base.push_back(rng_draw(rng, Normal{0, 1}, {3, 32, 32}));
  const auto batch = pretext::assemble_pretext_batch(base, geom, rng.fork("batch"), {});
  NoGradGuard guard;
  nn::ForwardContext ctx;
  const auto fwd = model.forward(batch.images, vit::ForwardMode::pretrain, ctx);
  const auto terms = pretext::patchrot_loss(fwd.cls_logits, fwd.patch_logits, batch);
  const double ln4 = std::log(4.0);
  const double total = terms.total.item(), image = terms.image_term.item(), patch = terms.patch_term.item();
  return {{"init_loss", "total", std::abs(total - 2 * ln4) <= 0.1, num("%.4f", total) + " vs 2 ln 4 = 2.7726"},
          {"init_loss", "image_term", std::abs(image - ln4) <= 0.05, num("%.4f", image) + " vs ln 4 = 1.3863"},
          {"init_loss", "patch_term", std::abs(patch - ln4) <= 0.05, num("%.4f", patch) + " vs ln 4 = 1.3863"}};
}

std::vector<Check> run_all(std::uint64_t seed) {
  std::vector<Check> all = gradient_checks(5, seed);
  for (auto part : {rotation_checks(1000, seed), geometry_checks(), batch_checks(seed), init_loss_checks(seed)}) {
    all.insert(all.end(), part.begin(), part.end());
  }
  return all;
}

std::string format_table(const std::vector<Check>& checks) {
  std::string out;
  int failed = 0;
  for (const auto& c : checks) {
    char line[256];
    std::snprintf(line, sizeof(line), "%-4s  %-10s %-24s %s\n", c.passed ? "ok" : "FAIL", c.group.c_str(), c.name.c_str(),
                  c.detail.c_str());
    out += line;
    failed += !c.passed;
  }
  out += std::to_string(checks.size() - failed) + "/" + std::to_string(checks.size()) + " checks passed\n";
  return out;
}

bool all_passed(const std::vector<Check>& checks) {
  return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.passed; });
}

}  // namespace patchrot::diagnostics
