#pragma once

// Image datasets: loaders for CIFAR binary, IDX and PRIMG1 archives, a
// synthetic oriented-glyph generator, augmentation and normalization.
//
// Pixels are stored as float in [0, 1], one contiguous C*H*W block per
// image, channel-major.

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "patchrot/rng.hpp"
#include "patchrot/tensor.hpp"

namespace patchrot::data {

// Malformed or inconsistent input files.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DatasetMeta {
  std::string name;
  int c = 0;
  int h = 0;
  int w = 0;
  int n_classes = 0;
  std::vector<double> channel_mean;  // empty until computed
  std::vector<double> channel_std;
  std::string augment_policy = "none";
};

struct Dataset {
  DatasetMeta meta;
  std::vector<float> pixels;  // n * c * h * w
  std::vector<int> labels;

  std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
  std::int64_t image_numel() const { return static_cast<std::int64_t>(meta.c) * meta.h * meta.w; }
  std::span<const float> image_span(std::int64_t i) const;
  // [C, H, W] copy of image i.
  Tensor image(std::int64_t i) const;
  // [B, C, H, W] copy of the selected images.
  Tensor batch(std::span<const std::int64_t> indices) const;
  std::vector<int> batch_labels(std::span<const std::int64_t> indices) const;
  Dataset subset(std::span<const std::int64_t> indices) const;
  // Throws DataError on any broken invariant.
  void validate() const;
};

// Per-channel mean and population standard deviation over all pixels.
void compute_channel_stats(Dataset& ds);

// CIFAR-10 (n_classes 10: 1 label byte + 3072 pixels) or CIFAR-100
// (n_classes 100: coarse and fine label bytes, fine used) binary batches.
// Several files are concatenated in order.
Dataset load_cifar_binary(const std::vector<std::filesystem::path>& files, int n_classes);
Dataset load_cifar_binary(const std::filesystem::path& file, int n_classes);

// Big-endian IDX image (magic 0x803, n x rows x cols) and label (magic 0x801)
// files, e.g. MNIST and FashionMNIST.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels, int n_classes = 10);

// PRIMG1 archive: "PRIMG1\n", u32 LE header length, header text
// "n c h w n_classes\n", n u16 LE labels, n*c*h*w pixel bytes.
Dataset load_raw_archive(const std::filesystem::path& path);
// Pixels are quantized to round(255 x); datasets read from 8-bit sources
// round-trip bit-exactly.
void save_raw_archive(const Dataset& ds, const std::filesystem::path& path);

// Bilinear (corner-aligned) resize of every image.
Dataset resize_dataset(const Dataset& ds, int h, int w);

struct SyntheticOptions {
  double noise = 0.03;       // per-pixel Gaussian noise std
  double shading = 0.25;     // strength of the emboss lit from the glyph's top
  double texture = 0.2;      // amplitude of the background ramp, aligned with the glyph
  int texture_period = 5;    // pixels per ramp period
  double angle_jitter_deg = 3.0;  // below half the 8 degree tilt spacing
  double scale_jitter = 0.1;
  double shift_jitter = 2.5;  // pixels
};

// Ten classes of (glyph, tilt), every tilt distinct and 8 degrees apart:
// arrow at -36/-4/+28, L at -28/+12, T at -20/+20 and wedge at -12/+4/+36.
// Tilts stay inside (-45, 45) so no quarter-turn of one class reproduces
// another. Three channels; labels are
// balanced (i mod 10 before a seeded shuffle).
Dataset gen_synthetic_oriented(std::int64_t n, int h, int w, std::uint64_t seed,
                               const SyntheticOptions& options = {});

// Noise-free, jitter-free rendering of a class at the canonical pose.
Tensor synthetic_prototype(int label, int h, int w, const SyntheticOptions& options = {});

struct AugmentConfig {
  int pad = 0;
  bool random_crop = false;
  bool hflip = false;
  // When false, crop offsets never leave the original image, so no padding
  // pixel can appear in the output.
  bool allow_zero_padding = true;

  void validate() const;
};

// Zero-pad by cfg.pad, random crop back to H x W, then flip with p = 0.5.
Tensor augment(const Tensor& image, const AugmentConfig& cfg, Rng& rng);
Tensor hflip(const Tensor& image);

// Per-channel (x - mean) / std over [C, H, W] or [B, C, H, W].
Tensor normalize(const Tensor& images, const std::vector<double>& mean, const std::vector<double>& stddev);
Tensor denormalize(const Tensor& images, const std::vector<double>& mean, const std::vector<double>& stddev);

}  // namespace patchrot::data
