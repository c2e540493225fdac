#pragma once

// Optimization: AdamW with decoupled decay, warmup + cosine learning rate,
// PRCKPT1 checkpoints and the pretraining / fine-tuning loops.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "patchrot/data.hpp"
#include "patchrot/pretext.hpp"
#include "patchrot/vit.hpp"

namespace patchrot::optim {

// ---- AdamW ---------------------------------------------------------------------

struct AdamWOptions {
  double lr = 5e-4;
  double weight_decay = 3e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Per step t: m <- b1 m + (1-b1) g, v <- b2 v + (1-b2) g^2,
// p <- p - lr wd p - lr m_hat / (sqrt(v_hat) + eps). Moments are kept in
// double. Parameters that are not trainable at step time are skipped and
// their moments stay as they were.
class AdamW {
 public:
  struct Slot {
    nn::Parameter param;
    std::vector<double> m;
    std::vector<double> v;
  };

  explicit AdamW(nn::ParameterList params, AdamWOptions options = {});

  // Throws std::logic_error naming the first trainable parameter that has
  // no gradient.
  void step();
  // Zeroes the gradient buffer of every trainable parameter.
  void zero_grad();

  void set_lr(double lr) { options_.lr = lr; }
  double lr() const { return options_.lr; }
  std::int64_t step_count() const { return t_; }
  const AdamWOptions& options() const { return options_; }
  const std::vector<Slot>& slots() const { return slots_; }

  // Restores moments and the step counter, e.g. from a checkpoint.
  void load_state(std::int64_t step, const std::map<std::string, std::pair<Tensor, Tensor>>& moments);

 private:
  AdamWOptions options_;
  std::vector<Slot> slots_;
  std::int64_t t_ = 0;
};

// ---- schedule --------------------------------------------------------------------

struct LrSchedule {
  double base_lr = 5e-4;
  int warmup_epochs = 10;
  int total_epochs = 300;
  double min_lr = 0.0;
};

// Per-step linear warmup from base/W to base over the first W steps, then a
// cosine from base (at step W-1) to min_lr (at the final step). Steps past
// the end stay at min_lr. Warmup longer than the run is cut to the run.
double lr_at(const LrSchedule& schedule, std::int64_t step, std::int64_t steps_per_epoch);

// ---- checkpoints -------------------------------------------------------------------

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

nlohmann::json to_json(const vit::ViTConfig& cfg);
// Unknown keys are rejected; missing keys keep their defaults.
vit::ViTConfig vit_config_from_json(const nlohmann::json& j);

struct CheckpointEntry {
  std::string name;
  Shape shape;
  DType dtype = DType::f32;
  std::uint64_t offset = 0;
  std::uint64_t length = 0;
  bool trainable = true;
};

struct Checkpoint {
  vit::ViTConfig config;
  vit::TokenGrid grid;
  int head_classes = 0;
  vit::PatchHeadKind patch_heads = vit::PatchHeadKind::none;
  int epoch = 0;
  nlohmann::json run_config;            // free-form echo of the producing run
  std::vector<CheckpointEntry> entries;  // manifest order = payload order
  std::map<std::string, Tensor> tensors;
  std::int64_t optimizer_step = -1;      // -1 when no optimizer state was saved
};

// "PRCKPT1\n", u64 LE manifest length, JSON manifest, payload of raw
// little-endian tensors. Optimizer moments, when given, are stored as
// "adamw.m/<name>" and "adamw.v/<name>" in f64.
void save_checkpoint(const std::filesystem::path& path, const vit::ViTModel& model, int epoch,
                     const nlohmann::json& run_config = nlohmann::json::object(), const AdamW* optimizer = nullptr);
// Verifies magic, manifest consistency, payload length and checksum.
Checkpoint read_checkpoint(const std::filesystem::path& path);
// Builds a model with the checkpoint's layout and loads its parameters.
vit::ViTModel model_from_checkpoint(const Checkpoint& ckpt);
// Copies every model parameter from the checkpoint, including trainable
// flags. Throws CheckpointError listing each missing or mis-shaped tensor.
void load_parameters(vit::ViTModel& model, const Checkpoint& ckpt);
void load_optimizer(AdamW& optimizer, const Checkpoint& ckpt);

// ---- metrics log ---------------------------------------------------------------------

constexpr double kNoValue = std::numeric_limits<double>::quiet_NaN();

struct MetricsRow {
  int epoch = 0;
  std::string phase;
  double loss = kNoValue;
  double top1 = kNoValue;
  double top5 = kNoValue;
  double lr = kNoValue;
};

// CSV with header epoch,phase,loss,top1,top5,lr; NaN cells are empty and
// numbers use a fixed %.8g format so equal runs give equal bytes.
struct MetricsLog {
  std::vector<MetricsRow> rows;

  void add(MetricsRow row) { rows.push_back(std::move(row)); }
  void append(const MetricsLog& other, const std::string& phase_prefix = "");
  std::string csv() const;
  void write(const std::filesystem::path& path) const;
  // Last row with this phase, or nullptr.
  const MetricsRow* last(const std::string& phase) const;
};

using LogSink = std::function<void(const std::string&)>;

// ---- pretraining -----------------------------------------------------------------------

struct PretrainConfig {
  int epochs = 300;
  int batch_size = 128;
  std::uint64_t seed = 0;
  AdamWOptions adam;
  int warmup_epochs = 10;
  double min_lr = 0.0;
  int buffer = 1;
  pretext::PretextFlags flags;
  nn::Reduction loss_reduction = nn::Reduction::mean;
  // Applied to base images before cropping; zero padding is not allowed.
  data::AugmentConfig augment;
  double holdout_fraction = 0.05;
  int eval_every = 1;
  int checkpoint_every = 0;  // 0: no periodic checkpoints
  std::filesystem::path checkpoint_dir;
  nlohmann::json run_config = nlohmann::json::object();
  LogSink log;
};

struct PretrainResult {
  MetricsLog metrics;
  std::vector<double> train_loss;  // per epoch
  pretext::PretextAccuracy heldout;  // last evaluation
  std::int64_t holdout_size = 0;
};

// The pretext geometry of the model grid and (P, B).
pretext::BufferedGrid pretext_geometry(const vit::ViTConfig& cfg, int buffer, bool original_size);

// Trains `model` (built with for_pretraining on pretext_geometry's grid) on
// the rotation pretext task. A seeded 5% split of `ds` is held out and only
// used for pretext accuracy. With no_patch_rot the patch heads are dropped.
PretrainResult pretrain(vit::ViTModel& model, const data::Dataset& ds, const PretrainConfig& cfg);

// ---- fine-tuning -------------------------------------------------------------------------

struct FinetuneConfig {
  int epochs = 200;
  int batch_size = 128;
  std::uint64_t seed = 0;
  AdamWOptions adam;
  int warmup_epochs = 10;
  double min_lr = 0.0;
  vit::FreezeSpec freeze;
  data::AugmentConfig augment;
  int eval_every = 1;
  // Under MLP freezing the backbone always runs in eval mode; with no
  // augmentation its features are then computed once and reused.
  bool cache_frozen_features = true;
  LogSink log;
};

struct FinetuneResult {
  MetricsLog metrics;
  double top1 = 0.0;  // on `test` after the final epoch
  double top5 = 0.0;
  double loss = 0.0;
};

// Downstream copy of a pretrained model: patch heads dropped, positional
// embeddings interpolated to the full grid, M0's final layer replaced with
// an n_classes layer.
vit::ViTModel downstream_from_pretrained(const vit::ViTModel& pretrained, int n_classes, std::uint64_t seed);

// Applies cfg.freeze and trains with cross-entropy; reports top-1 / top-5
// on `test` every eval_every epochs and after the last.
FinetuneResult finetune(vit::ViTModel& model, const data::Dataset& train, const data::Dataset& test,
                        const FinetuneConfig& cfg);

struct Evaluation {
  double loss = 0.0;
  double top1 = 0.0;
  double top5 = 0.0;
};

// Eval-mode classification metrics; top-5 becomes top-K when K < 5.
Evaluation evaluate(const vit::ViTModel& model, const data::Dataset& ds, int batch_size = 256);

// [B, C, H, W] images normalized with the dataset's channel statistics
// (unchanged when it has none), optionally augmented per image first.
Tensor prepare_images(const data::Dataset& ds, const std::vector<std::int64_t>& indices,
                      const data::AugmentConfig* augment = nullptr, const Rng* rng = nullptr);

}  // namespace patchrot::optim
