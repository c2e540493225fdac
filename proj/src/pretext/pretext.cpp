#include "patchrot/pretext.hpp"

#include <algorithm>
#include <atomic>
#include <stdexcept>

namespace patchrot::pretext {

namespace {

std::atomic<std::int64_t> g_patch_samples{0};

void check_iota(int iota) {
  if (iota < 0 || iota > 3) throw std::invalid_argument("rotation label " + std::to_string(iota) + " outside {0,1,2,3}");
}

std::vector<float> as_floats(const Tensor& image) {
  if (image.ndim() != 3) throw ShapeError("expected [C, H, W], got " + shape_str(image.shape()));
  Tensor f = image.dtype() == DType::f32 ? image : image.to(DType::f32);
  auto span = f.data<float>();
  return {span.begin(), span.end()};
}

// Copies the window at (y, x) of size s x s from a C x H x W buffer.
void crop_window(const float* src, int c, int h, int w, int y, int x, int s, float* dst) {
  for (int ch = 0; ch < c; ++ch) {
    for (int r = 0; r < s; ++r) {
      const float* row = src + (static_cast<std::size_t>(ch) * h + y + r) * w + x;
      std::copy(row, row + s, dst + (static_cast<std::size_t>(ch) * s + r) * s);
    }
  }
}

// Corner-aligned bilinear resize of a C x s x s window to C x t x t.
void resize_square(const float* src, int c, int s, int t, float* dst) {
  auto coord = [&](int i) { return t == 1 ? 0.0 : static_cast<double>(i) * (s - 1) / (t - 1); };
  for (int ch = 0; ch < c; ++ch) {
    const float* plane = src + static_cast<std::size_t>(ch) * s * s;
    for (int r = 0; r < t; ++r) {
      const double y = coord(r);
      const int y0 = static_cast<int>(y), y1 = std::min(y0 + 1, s - 1);
      const double fy = y - y0;
      for (int col = 0; col < t; ++col) {
        const double x = coord(col);
        const int x0 = static_cast<int>(x), x1 = std::min(x0 + 1, s - 1);
        const double fx = x - x0;
        const double top = plane[y0 * s + x0] * (1 - fx) + plane[y0 * s + x1] * fx;
        const double bottom = plane[y1 * s + x0] * (1 - fx) + plane[y1 * s + x1] * fx;
        dst[(static_cast<std::size_t>(ch) * t + r) * t + col] = static_cast<float>(top * (1 - fy) + bottom * fy);
      }
    }
  }
}

template <class T>
void rotate_planes(const T* in, int c, int h, int w, int iota, T* out) {
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int ch = 0; ch < c; ++ch) {
    const T* src = in + ch * plane;
    T* dst = out + ch * plane;
    switch (iota) {
      case 0:
        std::copy(src, src + plane, dst);
        break;
      case 1:  // out is w x h: out[i][j] = in[j][w-1-i]
        for (int i = 0; i < w; ++i) {
          for (int j = 0; j < h; ++j) dst[i * h + j] = src[j * w + (w - 1 - i)];
        }
        break;
      case 2:  // out[i][j] = in[h-1-i][w-1-j]
        for (int i = 0; i < h; ++i) {
          for (int j = 0; j < w; ++j) dst[i * w + j] = src[(h - 1 - i) * w + (w - 1 - j)];
        }
        break;
      case 3:  // out is w x h: out[i][j] = in[h-1-j][i]
        for (int i = 0; i < w; ++i) {
          for (int j = 0; j < h; ++j) dst[i * h + j] = src[(h - 1 - j) * w + i];
        }
        break;
    }
  }
}

}  // namespace

void rotate_quarter_raw(const float* in, int c, int h, int w, int iota, float* out) {
  check_iota(iota);
  rotate_planes(in, c, h, w, iota, out);
}

Tensor rotate_quarter(const Tensor& image, int iota) {
  check_iota(iota);
  if (image.ndim() != 3) throw ShapeError("rotate_quarter: expected [C, H, W], got " + shape_str(image.shape()));
  const int c = static_cast<int>(image.dim(0)), h = static_cast<int>(image.dim(1)), w = static_cast<int>(image.dim(2));
  const Shape out_shape = iota % 2 == 0 ? Shape{c, h, w} : Shape{c, w, h};
  if (image.dtype() == DType::f64) {
    auto in = image.data<double>();
    std::vector<double> out(in.size());
    rotate_planes(in.data(), c, h, w, iota, out.data());
    return Tensor::from_vector(out_shape, std::move(out));
  }
  auto in = image.data<float>();
  std::vector<float> out(in.size());
  rotate_planes(in.data(), c, h, w, iota, out.data());
  return Tensor::from_vector(out_shape, std::move(out));
}

// ---- geometry ----------------------------------------------------------------------

BufferedGrid compute_reduced_geometry(int h, int w, int patch, int buffer) {
  if (patch < 1 || buffer < 0) throw std::invalid_argument("geometry: need P >= 1 and B >= 0");
  const int cell = patch + buffer;
  if (cell > std::min(h, w)) {
    throw std::invalid_argument("geometry: P + B = " + std::to_string(cell) + " exceeds image side " +
                                std::to_string(std::min(h, w)));
  }
  BufferedGrid g;
  g.patch = patch;
  g.buffer = buffer;
  g.cell = cell;
  g.crop = patch;
  g.rows = h / cell;
  g.cols = w / cell;
  g.origin_y = (h - g.rows * cell) / 2;
  g.origin_x = (w - g.cols * cell) / 2;
  return g;
}

BufferedGrid compute_original_size_geometry(int h, int w, int patch, int buffer) {
  if (patch < 1 || buffer < 0 || buffer >= patch) throw std::invalid_argument("geometry: need P >= 1 and 0 <= B < P");
  if (patch > std::min(h, w)) throw std::invalid_argument("geometry: P exceeds image side");
  BufferedGrid g;
  g.patch = patch;
  g.buffer = buffer;
  g.cell = patch;
  g.crop = patch - buffer;
  g.rows = h / patch;
  g.cols = w / patch;
  g.origin_y = (h - g.rows * patch) / 2;
  g.origin_x = (w - g.cols * patch) / 2;
  return g;
}

// ---- samples -----------------------------------------------------------------------

std::vector<ImageRotationSample> make_image_rotation_samples(const Tensor& image, const BufferedGrid& grid, Rng& rng) {
  const auto src = as_floats(image);
  const int c = static_cast<int>(image.dim(0)), h = static_cast<int>(image.dim(1)), w = static_cast<int>(image.dim(2));
  const int hp = grid.height(), wp = grid.width();
  if (hp != wp) throw std::invalid_argument("image rotation needs a square reduced canvas");
  if (h < hp || w < wp) {
    throw ShapeError("image " + std::to_string(h) + "x" + std::to_string(w) + " smaller than crop " +
                     std::to_string(hp) + "x" + std::to_string(wp));
  }
  const int y = static_cast<int>(rng.uniform_int(0, h - hp));
  const int x = static_cast<int>(rng.uniform_int(0, w - wp));
  std::vector<float> crop(static_cast<std::size_t>(c) * hp * wp);
  crop_window(src.data(), c, h, w, y, x, hp, crop.data());
  std::vector<ImageRotationSample> out;
  for (int iota = 0; iota < 4; ++iota) {
    std::vector<float> rotated(crop.size());
    rotate_quarter_raw(crop.data(), c, hp, wp, iota, rotated.data());
    out.push_back({Tensor::from_vector({c, hp, wp}, std::move(rotated)), iota});
  }
  return out;
}

PatchRotationSample make_patch_rotation_sample(const Tensor& image, const BufferedGrid& grid, Rng& rng,
                                               bool force_zero) {
  g_patch_samples.fetch_add(1, std::memory_order_relaxed);
  const auto src = as_floats(image);
  const int c = static_cast<int>(image.dim(0)), h = static_cast<int>(image.dim(1)), w = static_cast<int>(image.dim(2));
  if (grid.origin_y + grid.rows * grid.cell > h || grid.origin_x + grid.cols * grid.cell > w) {
    throw ShapeError("image " + std::to_string(h) + "x" + std::to_string(w) + " too small for a " +
                     std::to_string(grid.rows) + "x" + std::to_string(grid.cols) + " grid of " +
                     std::to_string(grid.cell) + "-pixel cells");
  }
  const int p = grid.patch, hp = grid.height(), wp = grid.width();
  PatchRotationSample sample;
  std::vector<float> canvas(static_cast<std::size_t>(c) * hp * wp);
  std::vector<float> window(static_cast<std::size_t>(c) * grid.crop * grid.crop);
  std::vector<float> piece(static_cast<std::size_t>(c) * p * p);
  std::vector<float> turned(piece.size());
  for (int r = 0; r < grid.rows; ++r) {
    for (int q = 0; q < grid.cols; ++q) {
      const int dy = static_cast<int>(rng.uniform_int(0, grid.max_offset()));
      const int dx = static_cast<int>(rng.uniform_int(0, grid.max_offset()));
      const int iota = force_zero ? 0 : static_cast<int>(rng.uniform_int(0, 3));
      const int sy = grid.origin_y + r * grid.cell + dy;
      const int sx = grid.origin_x + q * grid.cell + dx;
      if (grid.crop == p) {
        crop_window(src.data(), c, h, w, sy, sx, p, piece.data());
      } else {
        crop_window(src.data(), c, h, w, sy, sx, grid.crop, window.data());
        resize_square(window.data(), c, grid.crop, p, piece.data());
      }
      rotate_quarter_raw(piece.data(), c, p, p, iota, turned.data());
      for (int ch = 0; ch < c; ++ch) {
        for (int y = 0; y < p; ++y) {
          const float* from = turned.data() + (static_cast<std::size_t>(ch) * p + y) * p;
          std::copy(from, from + p, canvas.data() + (static_cast<std::size_t>(ch) * hp + r * p + y) * wp + q * p);
        }
      }
      sample.labels.push_back(iota);
      sample.offset_y.push_back(dy);
      sample.offset_x.push_back(dx);
    }
  }
  sample.image = Tensor::from_vector({c, hp, wp}, std::move(canvas));
  return sample;
}

// ---- batches -----------------------------------------------------------------------

void PretextFlags::validate() const {
  if (no_image_rot && no_patch_rot) throw std::invalid_argument("pretext flags: no_image_rot and no_patch_rot leave no task");
  if (rotate_img_and_patch && no_patch_rot) {
    throw std::invalid_argument("pretext flags: rotate_img_and_patch needs patch rotation samples");
  }
}

std::vector<std::int64_t> PretextBatch::image_rows() const {
  std::vector<std::int64_t> rows;
  for (std::int64_t i = 0; i < size(); ++i) {
    if (image_labels[i] >= 0) rows.push_back(i);
  }
  return rows;
}

std::vector<std::int64_t> PretextBatch::patch_rows() const {
  std::vector<std::int64_t> rows;
  for (std::int64_t i = 0; i < size(); ++i) {
    if (task[i] != Task::image_rot) rows.push_back(i);
  }
  return rows;
}

PretextBatch assemble_pretext_batch(const std::vector<Tensor>& images, const BufferedGrid& grid, const Rng& rng,
                                    const PretextFlags& flags, const data::AugmentConfig* augment) {
  flags.validate();
  if (images.empty()) throw std::invalid_argument("assemble_pretext_batch: empty base batch");
  const Shape base_shape = images.front().shape();
  for (const auto& img : images) {
    if (img.shape() != base_shape) throw ShapeError("assemble_pretext_batch: inconsistent image shapes");
  }
  if (flags.rotate_img_and_patch && grid.rows != grid.cols) {
    throw std::invalid_argument("rotate_img_and_patch needs a square token grid");
  }
  const int c = static_cast<int>(base_shape[0]);
  const int hp = grid.height(), wp = grid.width();
  const std::size_t sample_numel = static_cast<std::size_t>(c) * hp * wp;
  const int n = grid.count();

  std::vector<std::vector<float>> image_part, patch_part;
  PretextBatch batch;
  batch.n_positions = n;
  std::vector<int> image_labels_img, image_labels_patch;
  std::vector<int> patch_labels_patch;

  data::AugmentConfig no_pad;
  if (augment) {
    no_pad = *augment;
    no_pad.allow_zero_padding = false;
  }
  for (std::size_t b = 0; b < images.size(); ++b) {
    Rng local = rng.fork(static_cast<std::uint64_t>(b));
    Rng aug_rng = local.fork("augment");
    Rng img_rng = local.fork("image_rot");
    Rng patch_rng = local.fork("patch_rot");
    const Tensor base = augment ? data::augment(images[b], no_pad, aug_rng) : images[b];
    if (!flags.no_image_rot) {
      const std::size_t unrotated = image_part.size();
      for (auto& s : make_image_rotation_samples(base, grid, img_rng)) {
        auto span = s.image.data<float>();
        // With forced zero rotation all four samples are the unrotated crop.
        if (flags.force_zero_rotation && s.label > 0) {
          image_part.push_back(image_part[unrotated]);
        } else {
          image_part.emplace_back(span.begin(), span.end());
        }
        image_labels_img.push_back(flags.force_zero_rotation ? 0 : s.label);
      }
    }
    if (!flags.no_patch_rot) {
      PatchRotationSample s = make_patch_rotation_sample(base, grid, patch_rng, flags.force_zero_rotation);
      auto span = s.image.data<float>();
      std::vector<float> pixels(span.begin(), span.end());
      std::vector<int> labels = s.labels;
      int global = -1;
      if (flags.rotate_img_and_patch) {
        global = flags.force_zero_rotation ? 0 : static_cast<int>(patch_rng.uniform_int(0, 3));
        std::vector<float> turned(pixels.size());
        rotate_quarter_raw(pixels.data(), c, hp, wp, global, turned.data());
        pixels.swap(turned);
        // Move each label with its patch, then add the global turn.
        std::vector<float> grid_labels(labels.begin(), labels.end());
        std::vector<float> moved(grid_labels.size());
        rotate_quarter_raw(grid_labels.data(), 1, grid.rows, grid.cols, global, moved.data());
        for (int i = 0; i < n; ++i) labels[i] = (static_cast<int>(moved[i]) + global) % 4;
      }
      patch_part.push_back(std::move(pixels));
      image_labels_patch.push_back(global);
      patch_labels_patch.insert(patch_labels_patch.end(), labels.begin(), labels.end());
    }
  }

  const std::int64_t m = static_cast<std::int64_t>(image_part.size() + patch_part.size());
  std::vector<float> pixels;
  pixels.reserve(static_cast<std::size_t>(m) * sample_numel);
  for (const auto& s : image_part) pixels.insert(pixels.end(), s.begin(), s.end());
  for (const auto& s : patch_part) pixels.insert(pixels.end(), s.begin(), s.end());
  batch.images = Tensor::from_vector({m, c, hp, wp}, std::move(pixels));
  for (int label : image_labels_img) {
    batch.task.push_back(Task::image_rot);
    batch.image_labels.push_back(label);
    batch.patch_labels.insert(batch.patch_labels.end(), n, -1);
  }
  for (std::size_t i = 0; i < patch_part.size(); ++i) {
    batch.task.push_back(flags.rotate_img_and_patch ? Task::both : Task::patch_rot);
    batch.image_labels.push_back(image_labels_patch[i]);
  }
  batch.patch_labels.insert(batch.patch_labels.end(), patch_labels_patch.begin(), patch_labels_patch.end());
  return batch;
}

// ---- loss --------------------------------------------------------------------------

LossTerms patchrot_loss(const Tensor& cls_logits, const Tensor& patch_logits, const PretextBatch& batch,
                        nn::Reduction reduction) {
  const std::int64_t m = batch.size();
  const auto image_rows = batch.image_rows();
  const auto patch_rows = batch.patch_rows();
  if (!image_rows.empty() && (cls_logits.ndim() != 2 || cls_logits.dim(0) != m)) {
    throw ShapeError("patchrot_loss: cls logits " + shape_str(cls_logits.shape()) + " for batch of " +
                     std::to_string(m));
  }
  const bool compact = !patch_rows.empty() && patch_logits.defined() && patch_logits.ndim() == 3 &&
                       patch_logits.dim(0) == static_cast<std::int64_t>(patch_rows.size());
  if (!patch_rows.empty() && !compact &&
      (patch_logits.ndim() != 3 || patch_logits.dim(0) != m || patch_logits.dim(1) != batch.n_positions)) {
    throw ShapeError("patchrot_loss: patch logits " + shape_str(patch_logits.shape()) + " for batch of " +
                     std::to_string(m) + " x " + std::to_string(batch.n_positions));
  }
  if (compact && patch_logits.dim(1) != batch.n_positions) {
    throw ShapeError("patchrot_loss: patch logits " + shape_str(patch_logits.shape()) + " for " +
                     std::to_string(batch.n_positions) + " positions");
  }
  LossTerms terms;
  if (!image_rows.empty()) {
    std::vector<int> labels;
    for (auto r : image_rows) labels.push_back(batch.image_labels[r]);
    terms.image_term = nn::softmax_cross_entropy(select_rows(cls_logits, image_rows), labels, reduction);
  }
  if (!patch_rows.empty()) {
    const std::int64_t n = batch.n_positions;
    std::vector<int> labels;
    for (auto r : patch_rows) {
      labels.insert(labels.end(), batch.patch_labels.begin() + r * n, batch.patch_labels.begin() + (r + 1) * n);
    }
    Tensor rows = compact ? patch_logits : select_rows(patch_logits, patch_rows);
    terms.patch_term = nn::softmax_cross_entropy(reshape(rows, {rows.dim(0) * n, rows.dim(2)}), labels, reduction);
  }
  if (terms.image_term.defined() && terms.patch_term.defined()) {
    terms.total = terms.image_term + terms.patch_term;
  } else {
    terms.total = terms.image_term.defined() ? terms.image_term : terms.patch_term;
  }
  return terms;
}

// ---- accuracy ----------------------------------------------------------------------

double PretextAccuracy::mean_patch() const {
  double s = 0;
  int used = 0;
  for (std::size_t i = 0; i < position_total.size(); ++i) {
    if (position_total[i] == 0) continue;
    s += static_cast<double>(position_correct[i]) / position_total[i];
    ++used;
  }
  return used ? s / used : 0.0;
}

void PretextAccuracy::merge(const PretextAccuracy& o) {
  image_correct += o.image_correct;
  image_total += o.image_total;
  patch_correct += o.patch_correct;
  patch_total += o.patch_total;
  if (position_total.size() < o.position_total.size()) {
    position_total.resize(o.position_total.size(), 0);
    position_correct.resize(o.position_correct.size(), 0);
  }
  for (std::size_t i = 0; i < o.position_total.size(); ++i) {
    position_total[i] += o.position_total[i];
    position_correct[i] += o.position_correct[i];
  }
}

namespace {

int argmax_row(const std::vector<double>& v, std::size_t offset, std::int64_t k) {
  int best = 0;
  for (std::int64_t j = 1; j < k; ++j) {
    if (v[offset + j] > v[offset + best]) best = static_cast<int>(j);
  }
  return best;
}

}  // namespace

PretextAccuracy pretext_accuracy(const Tensor& cls_logits, const Tensor& patch_logits, const PretextBatch& batch) {
  PretextAccuracy acc;
  const std::int64_t n = batch.n_positions;
  acc.position_correct.assign(n, 0);
  acc.position_total.assign(n, 0);
  const auto image_rows = batch.image_rows();
  if (!image_rows.empty()) {
    const auto v = cls_logits.to_vector();
    const std::int64_t k = cls_logits.dim(1);
    for (auto r : image_rows) {
      acc.image_correct += argmax_row(v, r * k, k) == batch.image_labels[r];
      ++acc.image_total;
    }
  }
  const auto patch_rows = batch.patch_rows();
  if (!patch_rows.empty()) {
    const auto v = patch_logits.to_vector();
    const std::int64_t k = patch_logits.dim(2);
    const bool compact = patch_logits.dim(0) == static_cast<std::int64_t>(patch_rows.size());
    for (std::size_t j = 0; j < patch_rows.size(); ++j) {
      const std::int64_t r = patch_rows[j];
      const std::int64_t at = compact ? static_cast<std::int64_t>(j) : r;
      for (std::int64_t i = 0; i < n; ++i) {
        const bool ok = argmax_row(v, (at * n + i) * k, k) == batch.patch_labels[r * n + i];
        acc.patch_correct += ok;
        acc.position_correct[i] += ok;
        ++acc.position_total[i];
        ++acc.patch_total;
      }
    }
  }
  return acc;
}

namespace debug {
std::int64_t patch_samples_built() { return g_patch_samples.load(std::memory_order_relaxed); }
void reset_patch_sample_count() { g_patch_samples.store(0, std::memory_order_relaxed); }
}  // namespace debug

}  // namespace patchrot::pretext
