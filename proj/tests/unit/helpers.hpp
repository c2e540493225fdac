#pragma once

#include <filesystem>
#include <string>

#include "patchrot/rng.hpp"
#include "patchrot/tensor.hpp"

namespace patchrot::testing {

inline Tensor random_f64(Rng& rng, const Shape& shape, double lo = -1.0, double hi = 1.0, bool grad = true) {
  Tensor t = rng_draw(rng, UniformReal{lo, hi}, shape, DType::f64);
  t.set_requires_grad(grad);
  return t;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("patchrot_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace patchrot::testing
