#pragma once

#include <cstdint>
#include <vector>

#include "patchrot/tensor.hpp"

namespace patchrot::eval {

// Number of rows of logits [B, K] whose label ranks among the k largest.
// Equal logits rank the lower class index first, so the result does not
// depend on sort stability.
std::int64_t topk_correct(const Tensor& logits, const std::vector<int>& labels, int k);

// topk_correct / B; throws std::out_of_range unless 1 <= k <= K.
double topk_accuracy(const Tensor& logits, const std::vector<int>& labels, int k);

}  // namespace patchrot::eval
