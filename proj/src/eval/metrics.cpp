#include "patchrot/metrics.hpp"

#include <stdexcept>
#include <string>

namespace patchrot::eval {

std::int64_t topk_correct(const Tensor& logits, const std::vector<int>& labels, int k) {
  if (logits.ndim() != 2) throw ShapeError("topk: logits must be [B, K], got " + shape_str(logits.shape()));
  const std::int64_t rows = logits.dim(0);
  const std::int64_t classes = logits.dim(1);
  if (k < 1 || k > classes) {
    throw std::out_of_range("topk: k=" + std::to_string(k) + " outside [1, " + std::to_string(classes) + "]");
  }
  if (static_cast<std::int64_t>(labels.size()) != rows) {
    throw ShapeError("topk: " + std::to_string(labels.size()) + " labels for " + std::to_string(rows) + " rows");
  }
  const std::vector<double> v = logits.to_vector();
  std::int64_t correct = 0;
  for (std::int64_t r = 0; r < rows; ++r) {
    const int label = labels[r];
    if (label < 0 || label >= classes) throw std::out_of_range("topk: label " + std::to_string(label));
    const double* row = v.data() + r * classes;
    const double target = row[label];
    // rank = classes strictly ahead of the label under (value desc, index asc)
    std::int64_t rank = 0;
    for (std::int64_t c = 0; c < classes; ++c) rank += row[c] > target || (row[c] == target && c < label);
    correct += rank < k;
  }
  return correct;
}

double topk_accuracy(const Tensor& logits, const std::vector<int>& labels, int k) {
  const std::int64_t correct = topk_correct(logits, labels, k);
  return logits.dim(0) ? static_cast<double>(correct) / static_cast<double>(logits.dim(0)) : 0.0;
}

}  // namespace patchrot::eval
