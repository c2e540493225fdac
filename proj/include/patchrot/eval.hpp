#pragma once

// Attention maps and the experiment harnesses: freeze sweeps, pretraining
// epoch sweeps, transfer, semi-supervised subsets and the ablation matrix.
// Every report carries the producing config hash and seed.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "patchrot/metrics.hpp"
#include "patchrot/optim.hpp"

namespace patchrot::eval {

// ---- attention maps -----------------------------------------------------------------

enum class AttentionMethod { last_block_cls, rollout };

AttentionMethod parse_attention_method(const std::string& text);  // "cls" or "rollout"

struct AttentionMap {
  int rows = 0;
  int cols = 0;
  std::vector<double> grid;  // rows * cols, sums to 1
  int height = 0;
  int width = 0;
  std::vector<double> image;  // height * width, rescaled to [0, 1]; all 0 for a flat map
};

// Class-token attention over patch tokens for each image of [B, C, H, W]
// (or one [C, H, W] image), in eval mode. last_block_cls averages the final
// block's heads; rollout multiplies head-averaged (A + I) / 2 across blocks.
// The grid is renormalized over patches, then bilinearly upsampled.
std::vector<AttentionMap> attention_maps(const vit::ViTModel& model, const Tensor& images,
                                         AttentionMethod method = AttentionMethod::last_block_cls);
AttentionMap attention_map(const vit::ViTModel& model, const Tensor& image,
                           AttentionMethod method = AttentionMethod::last_block_cls);

// Center-aligned bilinear resampling of a row-major grid, clamped at the
// edges; constant grids stay constant.
std::vector<double> upsample_bilinear(const std::vector<double>& grid, int rows, int cols, int height, int width);

// 8-bit binary PGM of the upsampled rendering.
void write_pgm(const std::filesystem::path& path, const AttentionMap& map);
// Grid values, one row per line.
void write_grid_csv(const std::filesystem::path& path, const AttentionMap& map);

// ---- reports --------------------------------------------------------------------------

struct Provenance {
  std::string config_hash;
  std::uint64_t seed = 0;
};

// One row per (init, freeze mode) with test accuracies after fine-tuning.
struct FreezeSweepReport {
  Provenance provenance;
  std::string init;
  std::vector<vit::FreezeSpec> modes;
  std::vector<double> top1;
  std::vector<double> top5;
  optim::MetricsLog metrics;  // per-mode training logs, phase "<mode>/<phase>"
};

// Wide layout: one line per (init, metric), one column per freeze mode,
// preceded by "# key: value" provenance lines.
std::string sweep_csv(const std::vector<FreezeSweepReport>& reports);

struct SweepConfig {
  optim::FinetuneConfig finetune;
  std::vector<vit::FreezeSpec> modes;  // empty: all modes of the model
  Provenance provenance;
};

// Fine-tunes a copy of `init` (already downstream-ready) under every mode.
FreezeSweepReport run_freeze_sweep(const vit::ViTModel& init, const std::string& init_name,
                                   const data::Dataset& train, const data::Dataset& test, const SweepConfig& cfg);

// Stratified, seeded subset: per-class counts differ by at most one.
// Throws std::invalid_argument when count < n_classes, count > n or a
// class runs out of samples.
std::vector<std::int64_t> stratified_subset(const data::Dataset& ds, std::int64_t count, std::uint64_t seed);

struct HarnessConfig {
  vit::ViTConfig model;
  optim::PretrainConfig pretrain;
  SweepConfig sweep;
  std::uint64_t seed = 0;
};

// Fresh pretraining model for `cfg`'s geometry and flags.
vit::ViTModel make_pretraining_model(const vit::ViTConfig& model, int buffer, const pretext::PretextFlags& flags,
                                     std::uint64_t seed);
// PatchRot pretraining followed by conversion to a downstream model.
vit::ViTModel pretrained_downstream(const data::Dataset& train, int n_classes, const HarnessConfig& cfg,
                                    optim::PretrainResult* result = nullptr);
// Freshly initialized downstream model for `n_classes`.
vit::ViTModel random_downstream(const vit::ViTConfig& model, int n_classes, std::uint64_t seed);
// Supervised training from scratch (NF) on `train`, returned with its head.
vit::ViTModel supervised_model(const data::Dataset& train, const data::Dataset& test, const HarnessConfig& cfg,
                               optim::FinetuneResult* result = nullptr);

struct SemiSupervisedRow {
  std::int64_t labels = 0;
  double supervised_top1 = 0.0;
  FreezeSweepReport sweep;
};

struct SemiSupervisedReport {
  Provenance provenance;
  std::vector<SemiSupervisedRow> rows;
  std::string csv() const;  // labels,Sup,<modes...>
};

// Pretrains once on all training images (labels unused), then per count
// fine-tunes every freeze mode on a stratified labelled subset, next to a
// supervised-only baseline trained on the same subset.
SemiSupervisedReport run_semisupervised(const data::Dataset& train, const data::Dataset& test,
                                        const std::vector<std::int64_t>& label_counts, const HarnessConfig& cfg);

enum class TransferInit { patchrot, supervised };
TransferInit parse_transfer_init(const std::string& text);
std::string to_string(TransferInit init);

struct TransferReport {
  Provenance provenance;
  std::string source;
  std::string target;
  std::vector<FreezeSweepReport> sweeps;  // one per init mode
  std::string csv() const;
};

// Trains on the source (PatchRot pretext or supervised labels), then runs a
// freeze sweep on the target. Sources of a different size are resized to
// the target; differing channel counts are an error.
TransferReport run_transfer(const data::Dataset& source, const data::Dataset& target_train,
                            const data::Dataset& target_test, const std::vector<TransferInit>& inits,
                            const HarnessConfig& cfg);

enum class Variant { patchrot, no_image_rot, no_patch_rot, original_size, rotate_img_and_patch, reuse_mlp_head };
std::vector<Variant> all_variants();
Variant parse_variant(const std::string& text);
std::string to_string(Variant v);
// Display label used in report rows.
std::string variant_label(Variant v);
// Pretext flags and model options of a variant on top of a base config.
void apply_variant(Variant v, pretext::PretextFlags& flags, vit::ViTConfig& model);

struct AblationRow {
  Variant variant = Variant::patchrot;
  std::int64_t patch_head_parameters = 0;  // M1..MN parameters of the pretraining model
  std::int64_t patch_samples = 0;          // patch-rotation samples built while pretraining
  pretext::PretextAccuracy heldout;
  FreezeSweepReport sweep;
};

struct AblationReport {
  Provenance provenance;
  std::vector<AblationRow> rows;
  std::string csv() const;  // variant,<modes...> top-1
};

AblationReport run_ablations(const data::Dataset& train, const data::Dataset& test, const std::vector<Variant>& variants,
                             const HarnessConfig& cfg);

struct EpochSweepRow {
  int epochs = 0;
  double heldout_image = 0.0;  // pretext accuracy on the held-out split
  double heldout_patch = 0.0;
  double test_image = 0.0;  // pretext accuracy on the test images
  double test_patch = 0.0;
  FreezeSweepReport sweep;
};

struct EpochSweepReport {
  Provenance provenance;
  std::vector<EpochSweepRow> rows;
  std::string csv() const;
};

// Independent pretraining runs of each length from the same initialization.
EpochSweepReport run_epoch_sweep(const data::Dataset& train, const data::Dataset& test, const std::vector<int>& epochs,
                                 const HarnessConfig& cfg);

// Eval-mode pretext accuracy of a pretraining model on any dataset.
pretext::PretextAccuracy pretext_accuracy_on(const vit::ViTModel& model, const data::Dataset& ds, int buffer,
                                             const pretext::PretextFlags& flags, std::uint64_t seed);

}  // namespace patchrot::eval
