#include "patchrot/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <stdexcept>

namespace patchrot::eval {

namespace {

std::string fmt(double v) {
  if (std::isnan(v)) return "";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.8g", v);
  return buf;
}

std::string provenance_lines(const Provenance& p, const std::vector<std::pair<std::string, std::string>>& extra = {}) {
  std::string out = "# config_hash: " + p.config_hash + "\n# seed: " + std::to_string(p.seed) + "\n";
  for (const auto& [k, v] : extra) out += "# " + k + ": " + v + "\n";
  return out;
}

std::string mode_header(const std::vector<vit::FreezeSpec>& modes) {
  std::string out;
  for (const auto& m : modes) out += "," + m.to_string();
  return out;
}

std::string values(const std::vector<double>& v) {
  std::string out;
  for (double x : v) out += "," + fmt(x);
  return out;
}

void shuffle(std::vector<std::int64_t>& v, Rng rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::swap(v[i - 1], v[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i - 1)))]);
  }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

// Head-averaged attention of one image: [L, L] row-major.
std::vector<double> head_mean(const Tensor& att, std::int64_t b) {
  const std::int64_t heads = att.dim(1), len = att.dim(2);
  std::vector<double> out(static_cast<std::size_t>(len * len), 0.0);
  const std::int64_t base = b * heads * len * len;
  for (std::int64_t h = 0; h < heads; ++h) {
    for (std::int64_t i = 0; i < len * len; ++i) out[i] += att.value(base + h * len * len + i);
  }
  for (double& v : out) v /= static_cast<double>(heads);
  return out;
}

}  // namespace

// ---- attention maps -----------------------------------------------------------------

AttentionMethod parse_attention_method(const std::string& text) {
  if (text == "cls") return AttentionMethod::last_block_cls;
  if (text == "rollout") return AttentionMethod::rollout;
  throw std::invalid_argument("unknown attention method '" + text + "' (expected cls or rollout)");
}

std::vector<AttentionMap> attention_maps(const vit::ViTModel& model, const Tensor& images, AttentionMethod method) {
  const Tensor batch = images.ndim() == 3 ? reshape(images, {1, images.dim(0), images.dim(1), images.dim(2)}) : images;
  NoGradGuard guard;
  nn::ForwardContext ctx;
  ctx.trace_attention = true;
  const auto fwd = model.forward(batch, vit::ForwardMode::downstream, ctx);
  if (fwd.attention.empty()) throw std::logic_error("attention_map: the model produced no attention trace");

  const vit::TokenGrid grid = model.grid();
  const int n = grid.count();
  const std::int64_t len = n + 1;
  const int patch = model.config().patch_size;
  std::vector<AttentionMap> maps;
  for (std::int64_t b = 0; b < batch.dim(0); ++b) {
    std::vector<double> cls_row(static_cast<std::size_t>(len));
    if (method == AttentionMethod::last_block_cls) {
      const auto a = head_mean(fwd.attention.back(), b);
      std::copy(a.begin(), a.begin() + len, cls_row.begin());
    } else {
      // Only the class-token row of the product is needed: r <- r (A + I) / 2,
      // applied from the last block down to the first.
      std::vector<double> r(static_cast<std::size_t>(len), 0.0);
      r[0] = 1.0;
      for (auto it = fwd.attention.rbegin(); it != fwd.attention.rend(); ++it) {
        const auto a = head_mean(*it, b);
        std::vector<double> next(static_cast<std::size_t>(len), 0.0);
        for (std::int64_t i = 0; i < len; ++i) {
          if (r[i] == 0.0) continue;
          for (std::int64_t j = 0; j < len; ++j) next[j] += r[i] * 0.5 * (a[i * len + j] + (i == j ? 1.0 : 0.0));
        }
        r = std::move(next);
      }
      cls_row = r;
    }
    AttentionMap map;
    map.rows = grid.rows;
    map.cols = grid.cols;
    map.grid.assign(cls_row.begin() + 1, cls_row.end());
    const double total = std::accumulate(map.grid.begin(), map.grid.end(), 0.0);
    for (double& v : map.grid) v = total > 0 ? v / total : 1.0 / n;
    map.height = grid.rows * patch;
    map.width = grid.cols * patch;
    map.image = upsample_bilinear(map.grid, map.rows, map.cols, map.height, map.width);
    const auto [lo, hi] = std::minmax_element(map.image.begin(), map.image.end());
    const double lo_v = *lo, span = *hi - *lo;
    // Relative threshold: a flat grid upsamples to values equal up to rounding.
    for (double& v : map.image) v = span > 1e-12 * std::max(1.0, std::abs(*hi)) ? (v - lo_v) / span : 0.0;
    maps.push_back(std::move(map));
  }
  return maps;
}

AttentionMap attention_map(const vit::ViTModel& model, const Tensor& image, AttentionMethod method) {
  if (image.ndim() != 3) throw ShapeError("attention_map: expected [C, H, W], got " + shape_str(image.shape()));
  return attention_maps(model, image, method).front();
}

std::vector<double> upsample_bilinear(const std::vector<double>& grid, int rows, int cols, int height, int width) {
  if (rows < 1 || cols < 1 || height < 1 || width < 1 || grid.size() != static_cast<std::size_t>(rows) * cols) {
    throw std::invalid_argument("upsample_bilinear: bad grid or target size");
  }
  std::vector<double> out(static_cast<std::size_t>(height) * width);
  auto coord = [](int i, int src, int dst, int& lo, int& hi, double& t) {
    double x = (i + 0.5) * src / dst - 0.5;
    x = std::clamp(x, 0.0, static_cast<double>(src - 1));
    lo = static_cast<int>(std::floor(x));
    hi = std::min(lo + 1, src - 1);
    t = x - lo;
  };
  for (int y = 0; y < height; ++y) {
    int y0, y1;
    double ty;
    coord(y, rows, height, y0, y1, ty);
    for (int x = 0; x < width; ++x) {
      int x0, x1;
      double tx;
      coord(x, cols, width, x0, x1, tx);
      const double top = grid[y0 * cols + x0] * (1 - tx) + grid[y0 * cols + x1] * tx;
      const double bottom = grid[y1 * cols + x0] * (1 - tx) + grid[y1 * cols + x1] * tx;
      out[static_cast<std::size_t>(y) * width + x] = top * (1 - ty) + bottom * ty;
    }
  }
  return out;
}

void write_pgm(const std::filesystem::path& path, const AttentionMap& map) {
  std::string out = "P5\n" + std::to_string(map.width) + " " + std::to_string(map.height) + "\n255\n";
  for (double v : map.image) out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * std::clamp(v, 0.0, 1.0)))));
  write_text(path, out);
}

void write_grid_csv(const std::filesystem::path& path, const AttentionMap& map) {
  std::string out;
  for (int r = 0; r < map.rows; ++r) {
    for (int c = 0; c < map.cols; ++c) out += (c ? "," : "") + fmt(map.grid[static_cast<std::size_t>(r) * map.cols + c]);
    out += "\n";
  }
  write_text(path, out);
}

// ---- freeze sweep -------------------------------------------------------------------------

std::string sweep_csv(const std::vector<FreezeSweepReport>& reports) {
  if (reports.empty()) return "";
  const auto& modes = reports.front().modes;
  for (const auto& r : reports) {
    if (r.modes != modes) throw std::invalid_argument("sweep_csv: reports cover different freeze modes");
  }
  std::string out = provenance_lines(reports.front().provenance);
  out += "init,metric" + mode_header(modes) + "\n";
  for (const auto& r : reports) {
    out += r.init + ",top1" + values(r.top1) + "\n";
    out += r.init + ",top5" + values(r.top5) + "\n";
  }
  return out;
}

FreezeSweepReport run_freeze_sweep(const vit::ViTModel& init, const std::string& init_name,
                                   const data::Dataset& train, const data::Dataset& test, const SweepConfig& cfg) {
  FreezeSweepReport report;
  report.provenance = cfg.provenance;
  report.init = init_name;
  report.modes = cfg.modes.empty() ? vit::all_freeze_specs(init.config().n_blocks) : cfg.modes;
  for (const auto& mode : report.modes) {
    vit::ViTModel model = init.clone();
    optim::FinetuneConfig fc = cfg.finetune;
    fc.freeze = mode;
    const auto res = optim::finetune(model, train, test, fc);
    report.top1.push_back(res.top1);
    report.top5.push_back(res.top5);
    report.metrics.append(res.metrics, mode.to_string() + "/");
  }
  return report;
}

// ---- model construction ---------------------------------------------------------------------

std::vector<std::int64_t> stratified_subset(const data::Dataset& ds, std::int64_t count, std::uint64_t seed) {
  const int k = ds.meta.n_classes;
  if (k < 1) throw std::invalid_argument("stratified_subset: dataset has no classes");
  if (count < k) {
    throw std::invalid_argument("stratified_subset: " + std::to_string(count) + " labels cannot cover " +
                                std::to_string(k) + " classes");
  }
  if (count > ds.size()) {
    throw std::invalid_argument("stratified_subset: " + std::to_string(count) + " labels requested from " +
                                std::to_string(ds.size()) + " samples");
  }
  std::vector<std::vector<std::int64_t>> by_class(static_cast<std::size_t>(k));
  for (std::int64_t i = 0; i < ds.size(); ++i) by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);

  // The remainder goes to a seeded choice of classes.
  std::vector<std::int64_t> class_order(static_cast<std::size_t>(k));
  std::iota(class_order.begin(), class_order.end(), 0);
  shuffle(class_order, Rng::derive(seed, "subset/classes"));
  std::vector<std::int64_t> quota(static_cast<std::size_t>(k), count / k);
  for (std::int64_t i = 0; i < count % k; ++i) ++quota[static_cast<std::size_t>(class_order[i])];

  std::vector<std::int64_t> out;
  for (int c = 0; c < k; ++c) {
    auto& pool = by_class[c];
    if (static_cast<std::int64_t>(pool.size()) < quota[c]) {
      throw std::invalid_argument("stratified_subset: class " + std::to_string(c) + " has " +
                                  std::to_string(pool.size()) + " samples, needs " + std::to_string(quota[c]));
    }
    shuffle(pool, Rng::derive(seed, "subset/class", static_cast<std::uint64_t>(c)));
    out.insert(out.end(), pool.begin(), pool.begin() + quota[c]);
  }
  std::sort(out.begin(), out.end());
  return out;
}

vit::ViTModel make_pretraining_model(const vit::ViTConfig& model, int buffer, const pretext::PretextFlags& flags,
                                     std::uint64_t seed) {
  const auto geom = optim::pretext_geometry(model, buffer, flags.original_size);
  Rng rng = Rng::derive(seed, "init/pretrain");
  return vit::ViTModel::for_pretraining(model, {geom.rows, geom.cols}, rng);
}

vit::ViTModel pretrained_downstream(const data::Dataset& train, int n_classes, const HarnessConfig& cfg,
                                    optim::PretrainResult* result) {
  vit::ViTModel model = make_pretraining_model(cfg.model, cfg.pretrain.buffer, cfg.pretrain.flags, cfg.seed);
  optim::PretrainConfig pc = cfg.pretrain;
  pc.seed = cfg.seed;
  auto res = optim::pretrain(model, train, pc);
  if (result) *result = std::move(res);
  return optim::downstream_from_pretrained(model, n_classes, cfg.seed);
}

vit::ViTModel random_downstream(const vit::ViTConfig& model, int n_classes, std::uint64_t seed) {
  vit::ViTConfig c = model;
  c.n_downstream_classes = n_classes;
  Rng rng = Rng::derive(seed, "init/downstream");
  return vit::ViTModel::for_downstream(c, rng);
}

vit::ViTModel supervised_model(const data::Dataset& train, const data::Dataset& test, const HarnessConfig& cfg,
                               optim::FinetuneResult* result) {
  vit::ViTModel model = random_downstream(cfg.model, train.meta.n_classes, cfg.seed);
  optim::FinetuneConfig fc = cfg.sweep.finetune;
  fc.seed = cfg.seed;
  fc.freeze = vit::FreezeSpec{};
  auto res = optim::finetune(model, train, test, fc);
  if (result) *result = std::move(res);
  return model;
}

namespace {

SweepConfig seeded(const HarnessConfig& cfg) {
  SweepConfig s = cfg.sweep;
  s.finetune.seed = cfg.seed;
  s.provenance.seed = cfg.seed;
  return s;
}

}  // namespace

// ---- semi-supervised ---------------------------------------------------------------------------

SemiSupervisedReport run_semisupervised(const data::Dataset& train, const data::Dataset& test,
                                        const std::vector<std::int64_t>& label_counts, const HarnessConfig& cfg) {
  // Validate every draw before spending time on pretraining.
  std::vector<std::vector<std::int64_t>> subsets;
  for (std::int64_t count : label_counts) {
    subsets.push_back(stratified_subset(train, count, hash_combine(cfg.seed, static_cast<std::uint64_t>(count))));
  }
  const SweepConfig sweep = seeded(cfg);
  SemiSupervisedReport report;
  report.provenance = sweep.provenance;
  const vit::ViTModel init = pretrained_downstream(train, train.meta.n_classes, cfg);
  for (std::size_t i = 0; i < label_counts.size(); ++i) {
    const data::Dataset labelled = train.subset(subsets[i]);
    SemiSupervisedRow row;
    row.labels = label_counts[i];
    optim::FinetuneResult sup;
    supervised_model(labelled, test, cfg, &sup);
    row.supervised_top1 = sup.top1;
    row.sweep = run_freeze_sweep(init, "patchrot", labelled, test, sweep);
    report.rows.push_back(std::move(row));
  }
  return report;
}

std::string SemiSupervisedReport::csv() const {
  std::string out = provenance_lines(provenance);
  if (rows.empty()) return out;
  out += "labels,Sup" + mode_header(rows.front().sweep.modes) + "\n";
  for (const auto& r : rows) out += std::to_string(r.labels) + "," + fmt(r.supervised_top1) + values(r.sweep.top1) + "\n";
  return out;
}

// ---- transfer ------------------------------------------------------------------------------------

TransferInit parse_transfer_init(const std::string& text) {
  if (text == "patchrot") return TransferInit::patchrot;
  if (text == "supervised") return TransferInit::supervised;
  throw std::invalid_argument("unknown transfer init '" + text + "' (expected patchrot or supervised)");
}

std::string to_string(TransferInit init) { return init == TransferInit::patchrot ? "patchrot" : "supervised"; }

TransferReport run_transfer(const data::Dataset& source, const data::Dataset& target_train,
                            const data::Dataset& target_test, const std::vector<TransferInit>& inits,
                            const HarnessConfig& cfg) {
  if (source.meta.c != target_train.meta.c) {
    throw std::invalid_argument("transfer: source has " + std::to_string(source.meta.c) + " channels, target " +
                                std::to_string(target_train.meta.c));
  }
  data::Dataset src = source;
  if (src.meta.h != target_train.meta.h || src.meta.w != target_train.meta.w) {
    src = data::resize_dataset(source, target_train.meta.h, target_train.meta.w);
    if (!source.meta.channel_mean.empty()) data::compute_channel_stats(src);
  }
  HarnessConfig hc = cfg;
  hc.model.image_c = target_train.meta.c;
  hc.model.image_h = target_train.meta.h;
  hc.model.image_w = target_train.meta.w;
  const SweepConfig sweep = seeded(hc);
  const int n_classes = target_train.meta.n_classes;

  TransferReport report;
  report.provenance = sweep.provenance;
  report.source = source.meta.name;
  report.target = target_train.meta.name;
  for (TransferInit init : inits) {
    vit::ViTModel model = [&] {
      if (init == TransferInit::patchrot) return pretrained_downstream(src, n_classes, hc);
      // Source labels train the whole network; only the final layer is
      // replaced for the target.
      HarnessConfig sup = hc;
      sup.sweep.finetune.eval_every = 0;
      vit::ViTModel m = supervised_model(src, src, sup);
      Rng rng = Rng::derive(hc.seed, "transfer/head");
      m.replace_head(n_classes, rng);
      return m;
    }();
    report.sweeps.push_back(run_freeze_sweep(model, to_string(init), target_train, target_test, sweep));
  }
  return report;
}

std::string TransferReport::csv() const {
  std::string out = sweep_csv(sweeps);
  const std::string head = provenance_lines(provenance, {{"source", source}, {"target", target}});
  if (sweeps.empty()) return head;
  return head + out.substr(provenance_lines(provenance).size());
}

// ---- ablations -----------------------------------------------------------------------------------

std::vector<Variant> all_variants() {
  return {Variant::patchrot,      Variant::no_image_rot,         Variant::no_patch_rot,
          Variant::original_size, Variant::rotate_img_and_patch, Variant::reuse_mlp_head};
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::patchrot: return "patchrot";
    case Variant::no_image_rot: return "no_imagerot";
    case Variant::no_patch_rot: return "no_patchrot";
    case Variant::original_size: return "original_size";
    case Variant::rotate_img_and_patch: return "rotate_img_and_patch";
    case Variant::reuse_mlp_head: return "reuse_mlp_head";
  }
  return "?";
}

Variant parse_variant(const std::string& text) {
  for (Variant v : all_variants()) {
    if (to_string(v) == text) return v;
  }
  throw std::invalid_argument("unknown ablation variant '" + text + "'");
}

std::string variant_label(Variant v) {
  switch (v) {
    case Variant::patchrot: return "PatchRot";
    case Variant::no_image_rot: return "No ImageRot";
    case Variant::no_patch_rot: return "No PatchRot";
    case Variant::original_size: return "Original Size";
    case Variant::rotate_img_and_patch: return "Rotate Img & Patch";
    case Variant::reuse_mlp_head: return "Reuse MLP head";
  }
  return "?";
}

void apply_variant(Variant v, pretext::PretextFlags& flags, vit::ViTConfig& model) {
  switch (v) {
    case Variant::patchrot: break;
    case Variant::no_image_rot: flags.no_image_rot = true; break;
    case Variant::no_patch_rot: flags.no_patch_rot = true; break;
    case Variant::original_size: flags.original_size = true; break;
    case Variant::rotate_img_and_patch: flags.rotate_img_and_patch = true; break;
    case Variant::reuse_mlp_head: model.reuse_m0_head = true; break;
  }
}

namespace {

std::int64_t patch_head_parameters(vit::ViTModel& model) {
  std::int64_t n = 0;
  model.visit_parameters([&](const std::string& name, Tensor& t) {
    if (name.starts_with("patch_heads.") || name.starts_with("shared_patch_head.")) n += t.numel();
  });
  return n;
}

}  // namespace

AblationReport run_ablations(const data::Dataset& train, const data::Dataset& test, const std::vector<Variant>& variants,
                             const HarnessConfig& cfg) {
  const SweepConfig sweep = seeded(cfg);
  AblationReport report;
  report.provenance = sweep.provenance;
  for (Variant v : variants) {
    HarnessConfig hc = cfg;
    apply_variant(v, hc.pretrain.flags, hc.model);
    hc.pretrain.flags.validate();
    vit::ViTModel model = make_pretraining_model(hc.model, hc.pretrain.buffer, hc.pretrain.flags, hc.seed);
    AblationRow row;
    row.variant = v;
    row.patch_head_parameters = patch_head_parameters(model);
    optim::PretrainConfig pc = hc.pretrain;
    pc.seed = hc.seed;
    const std::int64_t built_before = pretext::debug::patch_samples_built();
    const auto res = optim::pretrain(model, train, pc);
    row.patch_samples = pretext::debug::patch_samples_built() - built_before;
    row.heldout = res.heldout;
    const vit::ViTModel init = optim::downstream_from_pretrained(model, train.meta.n_classes, hc.seed);
    row.sweep = run_freeze_sweep(init, to_string(v), train, test, sweep);
    report.rows.push_back(std::move(row));
  }
  return report;
}

std::string AblationReport::csv() const {
  std::string out = provenance_lines(provenance);
  if (rows.empty()) return out;
  out += "variant" + mode_header(rows.front().sweep.modes) + "\n";
  for (const auto& r : rows) out += variant_label(r.variant) + values(r.sweep.top1) + "\n";
  return out;
}

// ---- pretraining epochs ------------------------------------------------------------------------

pretext::PretextAccuracy pretext_accuracy_on(const vit::ViTModel& model, const data::Dataset& ds, int buffer,
                                             const pretext::PretextFlags& flags, std::uint64_t seed) {
  NoGradGuard guard;
  const auto geom = optim::pretext_geometry(model.config(), buffer, flags.original_size);
  const bool heads = !flags.no_patch_rot && model.patch_head_kind() != vit::PatchHeadKind::none;
  pretext::PretextFlags f = flags;
  f.no_patch_rot = !heads;
  const Rng base = Rng::derive(seed, "eval/pretext");
  pretext::PretextAccuracy acc;
  constexpr std::int64_t kBatch = 128;
  for (std::int64_t at = 0, chunk = 0; at < ds.size(); at += kBatch, ++chunk) {
    std::vector<std::int64_t> idx(static_cast<std::size_t>(std::min(kBatch, ds.size() - at)));
    std::iota(idx.begin(), idx.end(), at);
    const Tensor images = optim::prepare_images(ds, idx);
    std::vector<Tensor> parts;
    const Shape one(images.shape().begin() + 1, images.shape().end());
    for (std::int64_t i = 0; i < images.dim(0); ++i) parts.push_back(reshape(slice(images, 0, i, i + 1), one));
    const auto batch = pretext::assemble_pretext_batch(parts, geom, base.fork(static_cast<std::uint64_t>(chunk)), f);
    nn::ForwardContext ctx;
    const auto rows = batch.patch_rows();
    const auto fwd = model.forward(batch.images, heads ? vit::ForwardMode::pretrain : vit::ForwardMode::downstream, ctx,
                                   &rows);
    acc.merge(pretext::pretext_accuracy(fwd.cls_logits, fwd.patch_logits, batch));
  }
  return acc;
}

EpochSweepReport run_epoch_sweep(const data::Dataset& train, const data::Dataset& test, const std::vector<int>& epochs,
                                 const HarnessConfig& cfg) {
  const SweepConfig sweep = seeded(cfg);
  EpochSweepReport report;
  report.provenance = sweep.provenance;
  for (int e : epochs) {
    vit::ViTModel model = make_pretraining_model(cfg.model, cfg.pretrain.buffer, cfg.pretrain.flags, cfg.seed);
    optim::PretrainConfig pc = cfg.pretrain;
    pc.seed = cfg.seed;
    pc.epochs = e;
    const auto res = optim::pretrain(model, train, pc);
    EpochSweepRow row;
    row.epochs = e;
    row.heldout_image = res.heldout.image();
    row.heldout_patch = res.heldout.mean_patch();
    const auto on_test = pretext_accuracy_on(model, test, pc.buffer, pc.flags, cfg.seed);
    row.test_image = on_test.image();
    row.test_patch = on_test.mean_patch();
    const vit::ViTModel init = optim::downstream_from_pretrained(model, train.meta.n_classes, cfg.seed);
    row.sweep = run_freeze_sweep(init, "patchrot", train, test, sweep);
    report.rows.push_back(std::move(row));
  }
  return report;
}

std::string EpochSweepReport::csv() const {
  std::string out = provenance_lines(provenance);
  if (rows.empty()) return out;
  out += "epochs,heldout_image_rot,heldout_patch_rot,test_image_rot,test_patch_rot" + mode_header(rows.front().sweep.modes) +
         "\n";
  for (const auto& r : rows) {
    out += std::to_string(r.epochs) + "," + fmt(r.heldout_image) + "," + fmt(r.heldout_patch) + "," + fmt(r.test_image) +
           "," + fmt(r.test_patch) + values(r.sweep.top1) + "\n";
  }
  return out;
}

}  // namespace patchrot::eval
