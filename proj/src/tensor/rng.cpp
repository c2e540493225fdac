#include "patchrot/rng.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace patchrot {

namespace {
constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ULL;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x ^= x >> 30;
  x *= 0xBF58476D1CE4E5B9ULL;
  x ^= x >> 27;
  x *= 0x94D049BB133111EBULL;
  x ^= x >> 31;
  return x;
}

std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) { return splitmix64(a * kGamma + splitmix64(b + kGamma)); }

std::uint64_t hash_string(std::string_view s) {
  // FNV-1a, then mixed.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return splitmix64(h);
}

Rng::Rng(std::uint64_t seed, std::uint64_t stream) : key_(hash_combine(seed, stream)) {}

Rng Rng::derive(std::uint64_t seed, std::string_view purpose, std::uint64_t epoch, std::uint64_t index) {
  return Rng(seed).fork(purpose).fork(epoch).fork(index);
}

Rng Rng::fork(std::uint64_t tag) const {
  Rng child;
  child.key_ = hash_combine(key_, tag);
  return child;
}

Rng Rng::fork(std::string_view tag) const { return fork(hash_string(tag)); }

std::uint64_t Rng::next_u64() {
  ++counter_;
  return splitmix64(key_ + counter_ * kGamma);
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

std::int64_t Rng::uniform_int(std::int64_t lo, std::int64_t hi) {
  if (lo > hi) {
    throw std::invalid_argument("uniform_int: lo " + std::to_string(lo) + " > hi " + std::to_string(hi));
  }
  const std::uint64_t range = static_cast<std::uint64_t>(hi) - static_cast<std::uint64_t>(lo) + 1;
  if (range == 0) return static_cast<std::int64_t>(next_u64());
  // Rejection sampling removes modulo bias.
  const std::uint64_t limit = (~std::uint64_t{0}) - (~std::uint64_t{0}) % range;
  std::uint64_t r;
  do {
    r = next_u64();
  } while (r >= limit);
  return lo + static_cast<std::int64_t>(r % range);
}

double Rng::normal(double mean, double stddev) {
  if (stddev < 0) throw std::invalid_argument("normal: negative stddev");
  // Box-Muller, one output per pair of uniforms.
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  return mean + stddev * z;
}

bool Rng::bernoulli(double p) { return uniform() < p; }

namespace {

template <class Draw>
Tensor fill(const Shape& shape, DType dtype, Draw&& draw) {
  const std::int64_t n = numel_of(shape);
  std::vector<double> values(static_cast<std::size_t>(n));
  for (auto& v : values) v = draw();
  return Tensor::from_list(shape, values, dtype);
}

}  // namespace

Tensor rng_draw(Rng& rng, const UniformInt& dist, const Shape& shape, DType dtype) {
  if (dist.lo > dist.hi) {
    throw std::invalid_argument("uniform_int: lo " + std::to_string(dist.lo) + " > hi " + std::to_string(dist.hi));
  }
  return fill(shape, dtype, [&] { return static_cast<double>(rng.uniform_int(dist.lo, dist.hi)); });
}

Tensor rng_draw(Rng& rng, const UniformReal& dist, const Shape& shape, DType dtype) {
  if (dist.lo > dist.hi) throw std::invalid_argument("uniform_real: lo > hi");
  return fill(shape, dtype, [&] { return dist.lo + (dist.hi - dist.lo) * rng.uniform(); });
}

Tensor rng_draw(Rng& rng, const Normal& dist, const Shape& shape, DType dtype) {
  if (dist.stddev < 0) throw std::invalid_argument("normal: negative stddev");
  if (dist.stddev == 0) return Tensor::full(shape, dist.mean, dtype);
  return fill(shape, dtype, [&] { return rng.normal(dist.mean, dist.stddev); });
}

Tensor truncated_normal(Rng& rng, const Shape& shape, double stddev, DType dtype) {
  return fill(shape, dtype, [&] {
    double z;
    do {
      z = rng.normal();
    } while (std::abs(z) > 2.0);
    return z * stddev;
  });
}

}  // namespace patchrot
