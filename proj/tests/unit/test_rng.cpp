#include "doctest.h"
#include "patchrot/rng.hpp"

#include <array>
#include <cmath>

using namespace patchrot;

TEST_CASE("rng_draw examples") {
  Rng rng(1);
  Tensor z = rng_draw(rng, Normal{0.0, 0.0}, {5});
  for (double v : z.to_vector()) CHECK(v == 0.0);

  // Binomial bound: each class frequency within 3 sigma of 1/4.
  const int n = 100000;
  Tensor draws = rng_draw(rng, UniformInt{0, 3}, {n});
  std::array<int, 4> counts{};
  for (double v : draws.to_vector()) counts.at(static_cast<std::size_t>(v))++;
  const double sigma = std::sqrt(0.25 * 0.75 / n);
  for (int c : counts) CHECK(std::abs(c / double(n) - 0.25) < 3 * sigma);

  Rng a(42, 7);
  Rng b(42, 7);
  CHECK(bit_equal(rng_draw(a, Normal{0, 1}, {64}), rng_draw(b, Normal{0, 1}, {64})));

  CHECK_THROWS_AS(rng_draw(rng, UniformInt{3, 2}, {1}), std::invalid_argument);
  CHECK_THROWS_AS(rng_draw(rng, Normal{0, -1}, {1}), std::invalid_argument);
}

TEST_CASE("uniform_int is inclusive of both bounds") {
  Rng rng(8);
  bool lo = false;
  bool hi = false;
  for (int i = 0; i < 1000; ++i) {
    auto v = rng.uniform_int(-2, 2);
    CHECK(v >= -2);
    CHECK(v <= 2);
    lo |= v == -2;
    hi |= v == 2;
  }
  CHECK(lo);
  CHECK(hi);
}

TEST_CASE("derived streams depend only on their coordinates") {
  Rng first = Rng::derive(7, "pretext", 3, 12);
  Rng other = Rng::derive(7, "pretext", 3, 11);
  Rng again = Rng::derive(7, "pretext", 3, 12);
  const auto x = first.next_u64();
  CHECK(x == again.next_u64());
  CHECK(x != other.next_u64());
  CHECK(Rng::derive(7, "dropout", 3, 12).next_u64() != x);
}

TEST_CASE("truncated normal stays within two standard deviations") {
  Rng rng(4);
  Tensor t = truncated_normal(rng, {1000}, 0.02);
  for (double v : t.to_vector()) CHECK(std::abs(v) <= 0.04 + 1e-9);
}
