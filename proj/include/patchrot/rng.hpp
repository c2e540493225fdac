#pragma once

// Counter-based pseudo-random generator.
//
// Output i of a stream is splitmix64(key + i * golden_gamma), so a stream is
// fully described by its 64-bit key and a call counter. Child streams are
// derived by hashing (parent key, tag), which makes per-sample randomness
// independent of the order in which samples are visited.

#include <cstdint>
#include <string_view>

#include "patchrot/tensor.hpp"

namespace patchrot {

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b);
std::uint64_t hash_string(std::string_view s);

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0, std::uint64_t stream = 0);

  // Stream for (seed, purpose, epoch, index); the documented derivation used
  // by every consumer in the project.
  static Rng derive(std::uint64_t seed, std::string_view purpose, std::uint64_t epoch = 0, std::uint64_t index = 0);

  Rng fork(std::uint64_t tag) const;
  Rng fork(std::string_view tag) const;

  std::uint64_t next_u64();
  // Uniform on [0, 1) with 53 random bits.
  double uniform();
  // Uniform integer on [lo, hi], both inclusive. Throws if lo > hi.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
  double normal(double mean = 0.0, double stddev = 1.0);
  bool bernoulli(double p);

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

struct UniformInt {
  std::int64_t lo = 0;
  std::int64_t hi = 0;
};
struct UniformReal {
  double lo = 0.0;
  double hi = 1.0;
};
struct Normal {
  double mean = 0.0;
  double stddev = 1.0;
};

Tensor rng_draw(Rng& rng, const UniformInt& dist, const Shape& shape, DType dtype = DType::f32);
Tensor rng_draw(Rng& rng, const UniformReal& dist, const Shape& shape, DType dtype = DType::f32);
Tensor rng_draw(Rng& rng, const Normal& dist, const Shape& shape, DType dtype = DType::f32);

// Normal draws resampled until they fall within two standard deviations.
Tensor truncated_normal(Rng& rng, const Shape& shape, double stddev, DType dtype = DType::f32);

}  // namespace patchrot
