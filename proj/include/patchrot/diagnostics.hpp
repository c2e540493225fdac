#pragma once

// Self-diagnostics shared by the `selftest` command and the acceptance
// suite: gradient oracles, rotation algebra, pretext geometry and the
// pretext loss of an untrained model.

#include <cstdint>
#include <string>
#include <vector>

namespace patchrot::diagnostics {

struct Check {
  std::string group;
  std::string name;
  bool passed = false;
  std::string detail;  // deterministic: no timings
};

// Every differentiable primitive, composite layer, and a full ViT forward
// through the pretext loss, in f64 against central differences, on
// `instances` random draws each. Each check reports its worst relative error.
std::vector<Check> gradient_checks(int instances = 5, std::uint64_t seed = 0, double tolerance = 1e-6);

// Z4 action and index oracle of rotate_quarter on `images` random images,
// plus the hand-written 2x2 quarter turns.
std::vector<Check> rotation_checks(int images = 1000, std::uint64_t seed = 0);

// Reduced geometry of (32, 32, 4, 1) and (64, 64, 8, 2), and tokenization of
// a 32x32 image into 64 patches.
std::vector<Check> geometry_checks();

// Pretext batch of 128 base images -> 640 samples with the expected label
// layout.
std::vector<Check> batch_checks(std::uint64_t seed = 0);

// An untrained model on random images: total within 0.1 of 2 ln 4 and each
// term within 0.05 of ln 4.
std::vector<Check> init_loss_checks(std::uint64_t seed = 0);

std::vector<Check> run_all(std::uint64_t seed = 0);

// Fixed-width table, one line per check, then a summary line.
std::string format_table(const std::vector<Check>& checks);
bool all_passed(const std::vector<Check>& checks);

}  // namespace patchrot::diagnostics
