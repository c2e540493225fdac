#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "patchrot/metrics.hpp"
#include "patchrot/optim.hpp"

namespace patchrot::optim {

namespace {

std::string fmt(double v) {
  if (std::isnan(v)) return "";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.8g", v);
  return buf;
}

std::vector<std::int64_t> iota_indices(std::int64_t n) {
  std::vector<std::int64_t> v(static_cast<std::size_t>(n));
  std::iota(v.begin(), v.end(), 0);
  return v;
}

void shuffle(std::vector<std::int64_t>& v, Rng rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::swap(v[i - 1], v[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i - 1)))]);
  }
}

std::vector<std::int64_t> range_of(const std::vector<std::int64_t>& v, std::size_t begin, std::size_t end) {
  return {v.begin() + static_cast<std::ptrdiff_t>(begin), v.begin() + static_cast<std::ptrdiff_t>(std::min(end, v.size()))};
}

std::vector<Tensor> unstack(const Tensor& images) {
  std::vector<Tensor> out;
  const Shape one(images.shape().begin() + 1, images.shape().end());
  for (std::int64_t i = 0; i < images.dim(0); ++i) out.push_back(reshape(slice(images, 0, i, i + 1), one));
  return out;
}

std::int64_t steps_for(std::int64_t n, int batch_size) { return (n + batch_size - 1) / batch_size; }

void emit(const LogSink& log, const std::string& line) {
  if (log) log(line);
}

std::string format_line(const char* f, auto... args) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

struct PretextEval {
  pretext::PretextAccuracy acc;
  double image_loss = kNoValue;
  double patch_loss = kNoValue;
};

// Eval-mode pretext metrics over pre-built batches; losses are instance
// means, matching Reduction::mean.
PretextEval evaluate_pretext(const vit::ViTModel& model, const std::vector<pretext::PretextBatch>& batches, bool patch_heads) {
  NoGradGuard guard;
  PretextEval out;
  double image_sum = 0, patch_sum = 0;
  std::int64_t image_n = 0, patch_n = 0;
  for (const auto& batch : batches) {
    nn::ForwardContext ctx;
    const auto rows = batch.patch_rows();
    auto fwd = model.forward(batch.images, patch_heads ? vit::ForwardMode::pretrain : vit::ForwardMode::downstream, ctx,
                             &rows);
    auto terms = pretext::patchrot_loss(fwd.cls_logits, fwd.patch_logits, batch, nn::Reduction::sum);
    const auto acc = pretext::pretext_accuracy(fwd.cls_logits, fwd.patch_logits, batch);
    if (terms.image_term.defined()) image_sum += terms.image_term.item();
    if (terms.patch_term.defined()) patch_sum += terms.patch_term.item();
    image_n += acc.image_total;
    patch_n += acc.patch_total;
    out.acc.merge(acc);
  }
  if (image_n) out.image_loss = image_sum / static_cast<double>(image_n);
  if (patch_n) out.patch_loss = patch_sum / static_cast<double>(patch_n);
  return out;
}

// Cross-entropy plus top-1 / top-k counts of logits against labels.
struct Tally {
  double loss_sum = 0;
  std::int64_t top1 = 0;
  std::int64_t top5 = 0;
  std::int64_t n = 0;

  void add(const Tensor& logits, const std::vector<int>& labels, double mean_loss) {
    const int k5 = static_cast<int>(std::min<std::int64_t>(5, logits.dim(1)));
    loss_sum += mean_loss * static_cast<double>(labels.size());
    top1 += eval::topk_correct(logits, labels, 1);
    top5 += eval::topk_correct(logits, labels, k5);
    n += static_cast<std::int64_t>(labels.size());
  }
  Evaluation result() const {
    if (n == 0) return {};
    const double d = static_cast<double>(n);
    return {loss_sum / d, static_cast<double>(top1) / d, static_cast<double>(top5) / d};
  }
};

}  // namespace

// ---- metrics log -------------------------------------------------------------------

void MetricsLog::append(const MetricsLog& other, const std::string& phase_prefix) {
  for (auto row : other.rows) {
    row.phase = phase_prefix + row.phase;
    rows.push_back(std::move(row));
  }
}

std::string MetricsLog::csv() const {
  std::string out = "epoch,phase,loss,top1,top5,lr\n";
  for (const auto& r : rows) {
    out += std::to_string(r.epoch) + "," + r.phase + "," + fmt(r.loss) + "," + fmt(r.top1) + "," + fmt(r.top5) + "," +
           fmt(r.lr) + "\n";
  }
  return out;
}

void MetricsLog::write(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("metrics: cannot write " + path.string());
  out << csv();
}

const MetricsRow* MetricsLog::last(const std::string& phase) const {
  for (auto it = rows.rbegin(); it != rows.rend(); ++it) {
    if (it->phase == phase) return &*it;
  }
  return nullptr;
}

// ---- shared helpers ------------------------------------------------------------------

Tensor prepare_images(const data::Dataset& ds, const std::vector<std::int64_t>& indices,
                      const data::AugmentConfig* augment, const Rng* rng) {
  Tensor images = ds.batch(indices);
  if (augment) {
    if (!rng) throw std::invalid_argument("prepare_images: augmentation needs an rng");
    std::vector<Tensor> parts = unstack(images);
    for (std::size_t i = 0; i < parts.size(); ++i) {
      Rng r = rng->fork(static_cast<std::uint64_t>(indices[i]));
      parts[i] = reshape(data::augment(parts[i], *augment, r), Shape{1, ds.meta.c, ds.meta.h, ds.meta.w});
    }
    images = concat(parts, 0);
  }
  if (!ds.meta.channel_mean.empty()) images = data::normalize(images, ds.meta.channel_mean, ds.meta.channel_std);
  return images;
}

pretext::BufferedGrid pretext_geometry(const vit::ViTConfig& cfg, int buffer, bool original_size) {
  return original_size ? pretext::compute_original_size_geometry(cfg.image_h, cfg.image_w, cfg.patch_size, buffer)
                       : pretext::compute_reduced_geometry(cfg.image_h, cfg.image_w, cfg.patch_size, buffer);
}

// ---- pretraining -----------------------------------------------------------------------

PretrainResult pretrain(vit::ViTModel& model, const data::Dataset& ds, const PretrainConfig& cfg) {
  if (cfg.epochs < 1) throw std::invalid_argument("pretrain: epochs must be >= 1");
  if (cfg.batch_size < 1) throw std::invalid_argument("pretrain: batch_size must be >= 1");
  cfg.flags.validate();
  const auto& mc = model.config();
  if (ds.meta.c != mc.image_c || ds.meta.h != mc.image_h || ds.meta.w != mc.image_w) {
    throw ShapeError("pretrain: dataset images " + std::to_string(ds.meta.c) + "x" + std::to_string(ds.meta.h) + "x" +
                     std::to_string(ds.meta.w) + " do not match the model input");
  }
  const pretext::BufferedGrid geom = pretext_geometry(mc, cfg.buffer, cfg.flags.original_size);
  if (!(model.grid() == vit::TokenGrid{geom.rows, geom.cols})) {
    throw ShapeError("pretrain: model grid " + std::to_string(model.grid().rows) + "x" +
                     std::to_string(model.grid().cols) + " does not match pretext geometry " +
                     std::to_string(geom.rows) + "x" + std::to_string(geom.cols));
  }
  if (cfg.flags.no_patch_rot) {
    model.drop_patch_heads();
  } else if (model.patch_head_kind() == vit::PatchHeadKind::none) {
    throw std::logic_error("pretrain: model has no patch heads");
  }
  const bool patch_heads = !cfg.flags.no_patch_rot;

  data::AugmentConfig augment = cfg.augment;
  augment.allow_zero_padding = false;
  augment.validate();
  const bool augmenting = augment.random_crop || augment.hflip;

  // Held-out split.
  const std::int64_t n = ds.size();
  std::int64_t n_hold = 0;
  if (cfg.holdout_fraction > 0) {
    n_hold = std::max<std::int64_t>(1, std::llround(cfg.holdout_fraction * static_cast<double>(n)));
  }
  if (n - n_hold < 1) throw std::invalid_argument("pretrain: dataset too small for the held-out split");
  std::vector<std::int64_t> perm = iota_indices(n);
  shuffle(perm, Rng::derive(cfg.seed, "pretrain/holdout"));
  std::vector<std::int64_t> hold = range_of(perm, 0, static_cast<std::size_t>(n_hold));
  std::vector<std::int64_t> train = range_of(perm, static_cast<std::size_t>(n_hold), perm.size());
  std::sort(hold.begin(), hold.end());
  std::sort(train.begin(), train.end());

  std::vector<pretext::PretextBatch> heldout;
  {
    const Rng base = Rng::derive(cfg.seed, "pretrain/heldout");
    for (std::size_t at = 0, chunk = 0; at < hold.size(); at += cfg.batch_size, ++chunk) {
      auto idx = range_of(hold, at, at + cfg.batch_size);
      heldout.push_back(pretext::assemble_pretext_batch(unstack(prepare_images(ds, idx)), geom, base.fork(chunk), cfg.flags));
    }
  }

  AdamW opt(model.parameters(), cfg.adam);
  const LrSchedule sched{cfg.adam.lr, cfg.warmup_epochs, cfg.epochs, cfg.min_lr};
  const std::int64_t spe = steps_for(static_cast<std::int64_t>(train.size()), cfg.batch_size);

  emit(cfg.log, format_line("pretext geometry %dx%d, %d patches of %d px (buffer %d); %lld train / %lld held-out images",
                            geom.height(), geom.width(), geom.count(), geom.patch, geom.buffer,
                            static_cast<long long>(train.size()), static_cast<long long>(hold.size())));

  PretrainResult result;
  result.holdout_size = n_hold;
  std::int64_t global_step = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<std::int64_t> order = train;
    shuffle(order, Rng::derive(cfg.seed, "pretrain/shuffle", static_cast<std::uint64_t>(epoch)));
    double loss_sum = 0;
    std::int64_t loss_n = 0;
    pretext::PretextAccuracy train_acc;
    double lr = 0;
    for (std::int64_t step = 0; step < spe; ++step, ++global_step) {
      auto idx = range_of(order, static_cast<std::size_t>(step * cfg.batch_size),
                          static_cast<std::size_t>((step + 1) * cfg.batch_size));
      const auto tag = static_cast<std::uint64_t>(epoch);
      const auto at = static_cast<std::uint64_t>(step);
      pretext::PretextBatch batch =
          pretext::assemble_pretext_batch(unstack(prepare_images(ds, idx)), geom,
                                          Rng::derive(cfg.seed, "pretrain/pretext", tag, at), cfg.flags,
                                          augmenting ? &augment : nullptr);
      Rng dropout_rng = Rng::derive(cfg.seed, "pretrain/dropout", tag, at);
      nn::ForwardContext ctx;
      ctx.mode = nn::Mode::train;
      ctx.rng = &dropout_rng;
      const auto rows = batch.patch_rows();
      auto fwd = model.forward(batch.images, patch_heads ? vit::ForwardMode::pretrain : vit::ForwardMode::downstream, ctx,
                               &rows);
      auto terms = pretext::patchrot_loss(fwd.cls_logits, fwd.patch_logits, batch, cfg.loss_reduction);
      opt.zero_grad();
      terms.total.backward();
      lr = lr_at(sched, global_step, spe);
      opt.set_lr(lr);
      opt.step();
      loss_sum += terms.total.item() * static_cast<double>(idx.size());
      loss_n += static_cast<std::int64_t>(idx.size());
      train_acc.merge(pretext::pretext_accuracy(fwd.cls_logits.detach(),
                                                fwd.patch_logits.defined() ? fwd.patch_logits.detach() : Tensor(), batch));
    }
    const double mean_loss = loss_sum / static_cast<double>(loss_n);
    result.train_loss.push_back(mean_loss);
    result.metrics.add({epoch, "train", mean_loss, train_acc.image_total ? train_acc.image() : kNoValue, kNoValue, lr});

    const bool last = epoch == cfg.epochs;
    if (!heldout.empty() && ((cfg.eval_every > 0 && epoch % cfg.eval_every == 0) || last)) {
      const PretextEval ev = evaluate_pretext(model, heldout, patch_heads);
      result.heldout = ev.acc;
      if (ev.acc.image_total) result.metrics.add({epoch, "heldout_image_rot", ev.image_loss, ev.acc.image(), kNoValue, lr});
      if (ev.acc.patch_total) {
        result.metrics.add({epoch, "heldout_patch_rot", ev.patch_loss, ev.acc.mean_patch(), kNoValue, lr});
      }
      // Disabled pretext terms print as n/a rather than a misleading 0.
      const auto acc = [](std::int64_t total, double value) {
        return total ? format_line("%.3f", value) : std::string("n/a");
      };
      emit(cfg.log, format_line("epoch %d/%d loss %.4f held-out image-rot %s patch-rot %s lr %.3g", epoch, cfg.epochs,
                                mean_loss, acc(ev.acc.image_total, ev.acc.image()).c_str(),
                                acc(ev.acc.patch_total, ev.acc.mean_patch()).c_str(), lr));
    } else {
      emit(cfg.log, format_line("epoch %d/%d loss %.4f lr %.3g", epoch, cfg.epochs, mean_loss, lr));
    }
    if (cfg.checkpoint_every > 0 && (epoch % cfg.checkpoint_every == 0 || last)) {
      char name[32];
      std::snprintf(name, sizeof(name), "epoch_%04d.prckpt", epoch);
      save_checkpoint(cfg.checkpoint_dir / name, model, epoch, cfg.run_config, &opt);
    }
  }
  return result;
}

// ---- fine-tuning -------------------------------------------------------------------------

vit::ViTModel downstream_from_pretrained(const vit::ViTModel& pretrained, int n_classes, std::uint64_t seed) {
  vit::ViTModel model = pretrained.clone();
  model.drop_patch_heads();
  model.set_grid(vit::full_grid(model.config()));
  Rng rng = Rng::derive(seed, "downstream/head");
  model.replace_head(n_classes, rng);
  return model;
}

Evaluation evaluate(const vit::ViTModel& model, const data::Dataset& ds, int batch_size) {
  NoGradGuard guard;
  Tally tally;
  const auto all = iota_indices(ds.size());
  for (std::size_t at = 0; at < all.size(); at += batch_size) {
    auto idx = range_of(all, at, at + batch_size);
    nn::ForwardContext ctx;
    Tensor logits = model.forward(prepare_images(ds, idx), vit::ForwardMode::downstream, ctx).cls_logits;
    const auto labels = ds.batch_labels(idx);
    tally.add(logits, labels, nn::softmax_cross_entropy(logits, labels).item());
  }
  return tally.result();
}

namespace {

// Input of M0's final layer for every image, with the frozen backbone in
// eval mode.
Tensor probe_features(const vit::ViTModel& model, const data::Dataset& ds, int batch_size) {
  NoGradGuard guard;
  std::vector<Tensor> parts;
  const auto all = iota_indices(ds.size());
  for (std::size_t at = 0; at < all.size(); at += batch_size) {
    nn::ForwardContext ctx;
    Tensor enc = model.encode(prepare_images(ds, range_of(all, at, at + batch_size)), ctx);
    Tensor cls = reshape(slice(enc, 1, 0, 1), {enc.dim(0), enc.dim(2)});
    parts.push_back(nn::gelu(model.head.hidden.forward(cls)));
  }
  return concat(parts, 0);
}

Evaluation evaluate_features(const vit::ViTModel& model, const Tensor& features, const std::vector<int>& labels) {
  NoGradGuard guard;
  Tally tally;
  Tensor logits = model.head.output.forward(features);
  tally.add(logits, labels, nn::softmax_cross_entropy(logits, labels).item());
  return tally.result();
}

}  // namespace

FinetuneResult finetune(vit::ViTModel& model, const data::Dataset& train, const data::Dataset& test,
                        const FinetuneConfig& cfg) {
  if (cfg.epochs < 0) throw std::invalid_argument("finetune: epochs must be >= 0");
  if (cfg.batch_size < 1) throw std::invalid_argument("finetune: batch_size must be >= 1");
  if (model.patch_head_kind() != vit::PatchHeadKind::none) {
    throw std::logic_error("finetune: drop the patch heads first (downstream_from_pretrained)");
  }
  if (model.head_classes() < train.meta.n_classes) {
    throw ShapeError("finetune: head has " + std::to_string(model.head_classes()) + " classes, dataset " +
                     std::to_string(train.meta.n_classes));
  }
  cfg.augment.validate();
  vit::apply_freeze(model, cfg.freeze);
  const bool probe = cfg.freeze.kind == vit::FreezeSpec::Kind::MLP;
  const bool augmenting = cfg.augment.random_crop || cfg.augment.hflip;
  const bool cached = probe && cfg.cache_frozen_features && !augmenting;

  AdamW opt(model.parameters(), cfg.adam);
  const std::int64_t spe = steps_for(train.size(), cfg.batch_size);
  const LrSchedule sched{cfg.adam.lr, cfg.warmup_epochs, std::max(cfg.epochs, 1), cfg.min_lr};

  Tensor train_features, test_features;
  const std::vector<int> test_labels = test.labels;
  if (cached) {
    train_features = probe_features(model, train, 256);
    test_features = probe_features(model, test, 256);
  }
  auto run_eval = [&]() { return cached ? evaluate_features(model, test_features, test_labels) : evaluate(model, test); };

  FinetuneResult result;
  std::int64_t global_step = 0;
  Evaluation last_eval;
  bool evaluated = false;
  if (cfg.epochs == 0) {
    last_eval = run_eval();
    evaluated = true;
    result.metrics.add({0, "test", last_eval.loss, last_eval.top1, last_eval.top5, kNoValue});
  }
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<std::int64_t> order = iota_indices(train.size());
    shuffle(order, Rng::derive(cfg.seed, "finetune/shuffle", static_cast<std::uint64_t>(epoch)));
    const Rng augment_rng = Rng::derive(cfg.seed, "finetune/augment", static_cast<std::uint64_t>(epoch));
    Tally tally;
    double lr = 0;
    for (std::int64_t step = 0; step < spe; ++step, ++global_step) {
      auto idx = range_of(order, static_cast<std::size_t>(step * cfg.batch_size),
                          static_cast<std::size_t>((step + 1) * cfg.batch_size));
      const auto labels = train.batch_labels(idx);
      Tensor logits;
      if (cached) {
        logits = model.head.output.forward(select_rows(train_features, idx));
      } else {
        Rng dropout_rng =
            Rng::derive(cfg.seed, "finetune/dropout", static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(step));
        nn::ForwardContext ctx;
        ctx.mode = probe ? nn::Mode::eval : nn::Mode::train;
        ctx.rng = &dropout_rng;
        Tensor images = prepare_images(train, idx, augmenting ? &cfg.augment : nullptr, &augment_rng);
        logits = model.forward(images, vit::ForwardMode::downstream, ctx).cls_logits;
      }
      Tensor loss = nn::softmax_cross_entropy(logits, labels);
      opt.zero_grad();
      loss.backward();
      lr = lr_at(sched, global_step, spe);
      opt.set_lr(lr);
      opt.step();
      tally.add(logits.detach(), labels, loss.item());
    }
    const Evaluation tr = tally.result();
    result.metrics.add({epoch, "train", tr.loss, tr.top1, tr.top5, lr});
    const bool last = epoch == cfg.epochs;
    if ((cfg.eval_every > 0 && epoch % cfg.eval_every == 0) || last) {
      last_eval = run_eval();
      evaluated = true;
      result.metrics.add({epoch, "test", last_eval.loss, last_eval.top1, last_eval.top5, lr});
      emit(cfg.log, format_line("[%s] epoch %d/%d train loss %.4f top1 %.3f | test top1 %.3f top5 %.3f",
                                cfg.freeze.to_string().c_str(), epoch, cfg.epochs, tr.loss, tr.top1, last_eval.top1,
                                last_eval.top5));
    }
  }
  if (!evaluated) last_eval = run_eval();
  result.top1 = last_eval.top1;
  result.top5 = last_eval.top5;
  result.loss = last_eval.loss;
  return result;
}

}  // namespace patchrot::optim
