#include "doctest.h"
#include "helpers.hpp"
#include "patchrot/gradcheck.hpp"
#include "patchrot/nn.hpp"

#include <cmath>

using namespace patchrot;
using patchrot::testing::random_f64;

TEST_CASE("linear_forward examples") {
  Tensor x = Tensor::from_list({1, 2}, {1, 1}, DType::f64);
  Tensor eye = Tensor::from_list({2, 2}, {1, 0, 0, 1}, DType::f64);
  Tensor zero = Tensor::zeros({2}, DType::f64);
  CHECK(bit_equal(nn::linear_forward(x, eye, zero), x));

  Tensor w = Tensor::from_list({2, 2}, {1, 2, 3, 4}, DType::f64);
  Tensor b = Tensor::from_list({2}, {1, 1}, DType::f64);
  CHECK(nn::linear_forward(x, w, b).to_vector() == std::vector<double>{4, 8});

  CHECK_THROWS_AS(nn::linear_forward(Tensor::zeros({1, 3}, DType::f64), w, b), ShapeError);
}

TEST_CASE("layernorm_forward examples") {
  Tensor g = Tensor::ones({4}, DType::f64);
  Tensor z = Tensor::zeros({4}, DType::f64);
  Tensor constant = Tensor::full({2, 4}, 3.5, DType::f64);
  for (double v : nn::layernorm_forward(constant, g, z).to_vector()) CHECK(std::abs(v) < 1e-12);

  Tensor x = Tensor::from_list({2}, {1, 3}, DType::f64);
  auto y = nn::layernorm_forward(x, Tensor::ones({2}, DType::f64), Tensor::zeros({2}, DType::f64), 1e-12).to_vector();
  CHECK(y[0] == doctest::Approx(-1.0).epsilon(1e-9));
  CHECK(y[1] == doctest::Approx(1.0).epsilon(1e-9));

  Tensor beta = Tensor::full({4}, 0.7, DType::f64);
  Rng rng(1);
  for (double v : nn::layernorm_forward(random_f64(rng, {3, 4}), Tensor::zeros({4}, DType::f64), beta).to_vector()) {
    CHECK(v == doctest::Approx(0.7));
  }
}

TEST_CASE("gelu examples") {
  Tensor x = Tensor::from_list({3}, {0, 10, -10}, DType::f64);
  auto y = nn::gelu(x).to_vector();
  CHECK(y[0] == 0.0);
  CHECK(std::abs(y[1] - 10.0) < 1e-4);
  CHECK(std::abs(y[2]) < 1e-4);
  // monotone on [-0.5, 10]
  std::vector<double> grid;
  for (int i = 0; i <= 105; ++i) grid.push_back(-0.5 + 0.1 * i);
  auto g = nn::gelu(Tensor::from_list({static_cast<std::int64_t>(grid.size())}, grid, DType::f64)).to_vector();
  for (std::size_t i = 1; i < g.size(); ++i) CHECK(g[i] > g[i - 1]);
}

TEST_CASE("dropout examples") {
  Rng rng(3);
  Tensor x = rng_draw(rng, UniformReal{0, 1}, {1000});
  CHECK(bit_equal(nn::dropout(x, 0.0, nn::Mode::train, &rng), x));
  CHECK(bit_equal(nn::dropout(x, 0.1, nn::Mode::eval, nullptr), x));

  Tensor ones = Tensor::ones({100000}, DType::f64);
  const double m = mean(nn::dropout(ones, 0.5, nn::Mode::train, &rng)).item();
  CHECK(std::abs(m - 1.0) < 0.02);

  CHECK_THROWS_AS(nn::dropout(x, 1.0, nn::Mode::train, &rng), std::invalid_argument);
}

TEST_CASE("softmax_cross_entropy examples") {
  Tensor uniform = Tensor::zeros({3, 4}, DType::f64);
  CHECK(nn::softmax_cross_entropy(uniform, {0, 1, 3}).item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));

  Tensor saturated = Tensor::from_list({1, 3}, {0, 30, 0}, DType::f64);
  CHECK(nn::softmax_cross_entropy(saturated, {1}).item() < 1e-9);

  // 64-bit logits against a long-double evaluation of -log softmax.
  Rng rng(17);
  Tensor logits = random_f64(rng, {3, 5}, -3, 3, false);
  const std::vector<int> labels{4, 0, 2};
  long double expect = 0;
  for (int r = 0; r < 3; ++r) {
    long double z = 0;
    for (int c = 0; c < 5; ++c) z += std::exp(static_cast<long double>(logits.value(r * 5 + c)));
    expect += std::log(z) - logits.value(r * 5 + labels[r]);
  }
  expect /= 3;
  CHECK(nn::softmax_cross_entropy(logits, labels).item() == doctest::Approx(static_cast<double>(expect)).epsilon(1e-13));

  CHECK_THROWS_AS(nn::softmax_cross_entropy(logits, {0, 5, 1}), std::out_of_range);
  CHECK_THROWS_AS(nn::softmax_cross_entropy(logits, {0, -1, 1}), std::out_of_range);
}

TEST_CASE("cross-entropy is non-negative and equals ln K only for constant rows") {
  Rng rng(23);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor logits = random_f64(rng, {4, 6}, -5, 5, false);
    const double ce = nn::softmax_cross_entropy(logits, {0, 1, 2, 5}).item();
    CHECK(ce >= 0.0);
    CHECK(std::abs(ce - std::log(6.0)) > 1e-9);
  }
  Tensor rows = Tensor::from_list({2, 3}, {2, 2, 2, -1, -1, -1}, DType::f64);
  CHECK(nn::softmax_cross_entropy(rows, {0, 2}).item() == doctest::Approx(std::log(3.0)).epsilon(1e-12));
}

namespace {

nn::MultiHeadSelfAttention make_attention(int dim, int heads, std::uint64_t seed) {
  Rng rng(seed);
  return nn::MultiHeadSelfAttention(dim, heads, 0.0, rng, DType::f64);
}

}  // namespace

TEST_CASE("mhsa_forward examples") {
  auto attn = make_attention(8, 2, 5);
  Rng rng(6);
  Tensor x = random_f64(rng, {2, 5, 8}, -1, 1, false);

  SUBCASE("zeroed Q and K give uniform attention") {
    attn.query.weight.assign(Tensor::zeros({8, 8}, DType::f64));
    attn.key.weight.assign(Tensor::zeros({8, 8}, DType::f64));
    nn::ForwardContext ctx;
    ctx.trace_attention = true;
    Tensor y = attn.forward(x, ctx);
    REQUIRE(ctx.attention.size() == 1);
    for (double w : ctx.attention[0].to_vector()) CHECK(w == doctest::Approx(0.2).epsilon(1e-12));
    // every token = projection of the mean value vector
    Tensor v = attn.value.forward(x);
    Tensor expect = attn.proj.forward(broadcast_to(mean(v, 1, true), v.shape()));
    CHECK(max_abs_diff(y, expect) < 1e-12);
  }

  SUBCASE("rows sum to one and lie in [0,1]") {
    nn::ForwardContext ctx;
    ctx.trace_attention = true;
    attn.forward(x, ctx);
    Tensor rows = sum(ctx.attention[0], -1);
    for (double s : rows.to_vector()) CHECK(std::abs(s - 1.0) < 1e-5);
    for (double w : ctx.attention[0].to_vector()) {
      CHECK(w >= 0.0);
      CHECK(w <= 1.0);
    }
  }

  SUBCASE("permutation equivariance") {
    const std::vector<std::int64_t> perm{3, 0, 4, 1, 2};
    auto permute = [&](const Tensor& t) {
      std::vector<Tensor> rows;
      for (auto p : perm) rows.push_back(slice(t, 1, p, p + 1));
      return concat(rows, 1);
    };
    nn::ForwardContext ctx;
    Tensor a = permute(attn.forward(x, ctx));
    Tensor b = attn.forward(permute(x), ctx);
    CHECK(max_abs_diff(a, b) < 1e-12);
  }

  SUBCASE("output shape equals input shape") {
    nn::ForwardContext ctx;
    for (std::int64_t len : {1, 3, 9}) {
      for (std::int64_t batch : {1, 4}) {
        Tensor in = random_f64(rng, {batch, len, 8}, -1, 1, false);
        CHECK(attn.forward(in, ctx).shape() == in.shape());
      }
    }
  }

  CHECK_THROWS_AS(make_attention(10, 4, 1), std::invalid_argument);
}

TEST_CASE("layer backward passes match finite differences") {
  Rng rng(99);
  for (int trial = 0; trial < 5; ++trial) {
    CAPTURE(trial);
    Tensor x = random_f64(rng, {2, 3, 6});
    Tensor w = random_f64(rng, {4, 6});
    Tensor b = random_f64(rng, {4});
    Tensor gamma = random_f64(rng, {6}, 0.5, 1.5);
    Tensor beta = random_f64(rng, {6});
    Tensor probe = random_f64(rng, {2, 3, 6}, -1, 1, false);
    Tensor logits = random_f64(rng, {5, 4}, -2, 2);

    CHECK(check_gradients([&] { return sum(nn::linear_forward(x, w, b) * slice(probe, 2, 0, 4)); }, {x, w, b}).passed);
    CHECK(check_gradients([&] { return sum(nn::layernorm_forward(x, gamma, beta) * probe); }, {x, gamma, beta}).passed);
    CHECK(check_gradients([&] { return sum(nn::gelu(x * 2.0) * probe); }, {x}).passed);
    CHECK(check_gradients([&] { return sum(nn::dropout(x, 0.0, nn::Mode::train, &rng) * probe); }, {x}).passed);
    CHECK(check_gradients([&] { return sum(nn::softmax(x, -1) * probe); }, {x}).passed);
    CHECK(check_gradients([&] { return nn::softmax_cross_entropy(logits, {0, 3, 2, 1, 1}); }, {logits}).passed);

    Rng init(static_cast<std::uint64_t>(trial));
    nn::MultiHeadSelfAttention attn(6, 2, 0.0, init, DType::f64);
    nn::ForwardContext ctx;
    auto r = check_gradients([&] { return sum(attn.forward(x, ctx) * probe); },
                             {x, attn.query.weight, attn.key.weight, attn.value.bias, attn.proj.weight});
    CHECK(r.max_relative_error < 1e-6);

    nn::EncoderBlock block(6, 2, 12, 0.0, init, DType::f64);
    auto rb = check_gradients([&] { return sum(block.forward(x, ctx) * probe); },
                              {x, block.norm1.gamma, block.feed_forward.fc1.weight, block.feed_forward.fc2.bias});
    CHECK(rb.max_relative_error < 1e-6);
  }
}
