#pragma once

// Rotation pretext task: quarter-turn rotations of whole images (predicted
// from the class token) and of individual buffered patches (predicted per
// token position).

#include <cstdint>
#include <string>
#include <vector>

#include "patchrot/data.hpp"
#include "patchrot/nn.hpp"
#include "patchrot/rng.hpp"
#include "patchrot/tensor.hpp"

namespace patchrot::pretext {

// Counter-clockwise rotation by 90 * iota degrees; one quarter-turn maps
// in[c][j][W-1-i] to out[c][i][j] and swaps H and W.
Tensor rotate_quarter(const Tensor& image, int iota);
// Same mapping on a raw C x H x W buffer; `out` receives C x H' x W'.
void rotate_quarter_raw(const float* in, int c, int h, int w, int iota, float* out);

// Layout of the patch-rotation canvas. Cells of `cell` pixels tile a
// centered region of the source; from each cell a `crop` sized window at
// offset [0, cell - crop]^2 is taken, resized to `patch` if needed, rotated,
// and placed at its grid position in a contiguous H_pr x W_pr image.
struct BufferedGrid {
  int patch = 0;   // P, side of each output patch
  int buffer = 0;  // B
  int cell = 0;    // source stride: P + B, or P in original-size mode
  int crop = 0;    // source window: P, or P - B in original-size mode
  int rows = 0;    // g_h
  int cols = 0;    // g_w
  int origin_y = 0;
  int origin_x = 0;

  int height() const { return patch * rows; }  // H_pr
  int width() const { return patch * cols; }   // W_pr
  int count() const { return rows * cols; }    // N_pr
  int max_offset() const { return cell - crop; }
};

// P' = P + B cells, g = floor(H / P'), H_pr = P g.
BufferedGrid compute_reduced_geometry(int h, int w, int patch, int buffer);
// Original-size ablation: P cells, (P - B) crops resized back to P, so
// H_pr = P floor(H / P).
BufferedGrid compute_original_size_geometry(int h, int w, int patch, int buffer);

struct ImageRotationSample {
  Tensor image;  // [C, H_pr, W_pr]
  int label = 0;
};

// One random H_pr x W_pr crop, then its four rotations with labels 0..3.
// The reduced canvas must be square.
std::vector<ImageRotationSample> make_image_rotation_samples(const Tensor& image, const BufferedGrid& grid, Rng& rng);

struct PatchRotationSample {
  Tensor image;                   // [C, H_pr, W_pr]
  std::vector<int> labels;        // N_pr rotation labels, row-major
  std::vector<int> offset_y;      // crop offset inside each cell
  std::vector<int> offset_x;
};

// Per cell: random crop, uniform rotation label (0 when force_zero), and
// reassembly in row-major order. The image itself is not rotated.
PatchRotationSample make_patch_rotation_sample(const Tensor& image, const BufferedGrid& grid, Rng& rng,
                                               bool force_zero = false);

struct PretextFlags {
  bool no_image_rot = false;
  bool no_patch_rot = false;
  // Patch-rotation samples are also rotated as a whole and carry an image
  // label for the class-token head.
  bool rotate_img_and_patch = false;
  bool original_size = false;
  // Debug: every rotation label is 0.
  bool force_zero_rotation = false;

  void validate() const;
};

enum class Task : std::uint8_t { image_rot, patch_rot, both };

// Samples are ordered: all image-rotation samples (four per base image, in
// base order), then all patch-rotation samples.
struct PretextBatch {
  Tensor images;                  // [M, C, H_pr, W_pr]
  std::vector<Task> task;         // M
  std::vector<int> image_labels;  // M, -1 when the sample has no image label
  std::vector<int> patch_labels;  // M * N_pr, -1 for samples without patch labels
  int n_positions = 0;

  std::int64_t size() const { return static_cast<std::int64_t>(task.size()); }
  std::vector<std::int64_t> image_rows() const;
  std::vector<std::int64_t> patch_rows() const;
};

// Base images are augmented (without zero padding) before cropping when
// `augment` is given. Each base image draws from its own stream
// rng.fork(index), so results do not depend on batch composition order.
PretextBatch assemble_pretext_batch(const std::vector<Tensor>& images, const BufferedGrid& grid, const Rng& rng,
                                    const PretextFlags& flags, const data::AugmentConfig* augment = nullptr);

struct LossTerms {
  Tensor total;       // scalar
  Tensor image_term;  // undefined when the batch has no image labels
  Tensor patch_term;  // undefined when the batch has no patch labels
};

// Cross-entropy of class-token logits over samples with an image label plus
// cross-entropy of patch logits over every (sample, position) with a patch
// label. With Reduction::mean each term is averaged over its instances
// before the two are added. patch_logits is [M, N, 4], or compact
// [|patch rows|, N, 4] holding only the patch rows in batch order.
LossTerms patchrot_loss(const Tensor& cls_logits, const Tensor& patch_logits, const PretextBatch& batch,
                        nn::Reduction reduction = nn::Reduction::mean);

struct PretextAccuracy {
  std::int64_t image_correct = 0;
  std::int64_t image_total = 0;
  std::int64_t patch_correct = 0;
  std::int64_t patch_total = 0;
  std::vector<std::int64_t> position_correct;  // per token position
  std::vector<std::int64_t> position_total;

  double image() const { return image_total ? static_cast<double>(image_correct) / image_total : 0.0; }
  double patch() const { return patch_total ? static_cast<double>(patch_correct) / patch_total : 0.0; }
  // Mean over positions of per-position accuracy.
  double mean_patch() const;
  void merge(const PretextAccuracy& other);
};

// Argmax accuracy; ties go to the lower class index. Accepts compact patch
// logits like patchrot_loss.
PretextAccuracy pretext_accuracy(const Tensor& cls_logits, const Tensor& patch_logits, const PretextBatch& batch);

namespace debug {
// Process-wide count of make_patch_rotation_sample calls.
std::int64_t patch_samples_built();
void reset_patch_sample_count();
}  // namespace debug

}  // namespace patchrot::pretext
