#include "patchrot/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numbers>
#include <sstream>

namespace patchrot::data {

namespace fs = std::filesystem;

namespace {

std::vector<unsigned char> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const unsigned char* p) {
  return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) | std::uint32_t{p[3]};
}

std::uint32_t read_le32(const unsigned char* p) {
  return std::uint32_t{p[0]} | (std::uint32_t{p[1]} << 8) | (std::uint32_t{p[2]} << 16) | (std::uint32_t{p[3]} << 24);
}

void write_le32(std::ostream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                         static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  out.write(bytes, 4);
}

void check_image_tensor(const Tensor& image, const char* who) {
  if (image.ndim() != 3) throw ShapeError(std::string(who) + ": expected [C, H, W], got " + shape_str(image.shape()));
}

}  // namespace

// ---- Dataset -------------------------------------------------------------------

std::span<const float> Dataset::image_span(std::int64_t i) const {
  if (i < 0 || i >= size()) throw std::out_of_range("dataset index " + std::to_string(i));
  const std::int64_t n = image_numel();
  return {pixels.data() + i * n, static_cast<std::size_t>(n)};
}

Tensor Dataset::image(std::int64_t i) const {
  auto span = image_span(i);
  return Tensor::from_vector({meta.c, meta.h, meta.w}, std::vector<float>(span.begin(), span.end()));
}

Tensor Dataset::batch(std::span<const std::int64_t> indices) const {
  const std::int64_t n = image_numel();
  std::vector<float> out;
  out.reserve(static_cast<std::size_t>(n) * indices.size());
  for (auto i : indices) {
    auto span = image_span(i);
    out.insert(out.end(), span.begin(), span.end());
  }
  return Tensor::from_vector({static_cast<std::int64_t>(indices.size()), meta.c, meta.h, meta.w}, std::move(out));
}

std::vector<int> Dataset::batch_labels(std::span<const std::int64_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(labels.at(static_cast<std::size_t>(i)));
  return out;
}

Dataset Dataset::subset(std::span<const std::int64_t> indices) const {
  Dataset out;
  out.meta = meta;
  out.pixels.reserve(static_cast<std::size_t>(image_numel()) * indices.size());
  for (auto i : indices) {
    auto span = image_span(i);
    out.pixels.insert(out.pixels.end(), span.begin(), span.end());
    out.labels.push_back(labels[static_cast<std::size_t>(i)]);
  }
  return out;
}

void Dataset::validate() const {
  if (meta.c < 1 || meta.h < 1 || meta.w < 1) throw DataError("dataset " + meta.name + ": non-positive image dims");
  if (meta.n_classes < 1) throw DataError("dataset " + meta.name + ": n_classes must be >= 1");
  if (static_cast<std::int64_t>(pixels.size()) != size() * image_numel()) {
    throw DataError("dataset " + meta.name + ": pixel count does not match " + std::to_string(size()) + " images");
  }
  for (int label : labels) {
    if (label < 0 || label >= meta.n_classes) {
      throw DataError("dataset " + meta.name + ": label " + std::to_string(label) + " outside [0," +
                      std::to_string(meta.n_classes) + ")");
    }
  }
  for (float v : pixels) {
    if (!(v >= 0.0f && v <= 1.0f)) throw DataError("dataset " + meta.name + ": pixel outside [0,1]");
  }
  for (double s : meta.channel_std) {
    if (!(s > 0)) throw DataError("dataset " + meta.name + ": channel std must be positive");
  }
}

void compute_channel_stats(Dataset& ds) {
  const std::int64_t plane = static_cast<std::int64_t>(ds.meta.h) * ds.meta.w;
  std::vector<double> sum(ds.meta.c, 0.0), sq(ds.meta.c, 0.0);
  for (std::int64_t i = 0; i < ds.size(); ++i) {
    auto img = ds.image_span(i);
    for (int c = 0; c < ds.meta.c; ++c) {
      for (std::int64_t p = 0; p < plane; ++p) {
        const double v = img[c * plane + p];
        sum[c] += v;
        sq[c] += v * v;
      }
    }
  }
  const double count = static_cast<double>(ds.size() * plane);
  ds.meta.channel_mean.assign(ds.meta.c, 0.0);
  ds.meta.channel_std.assign(ds.meta.c, 1.0);
  if (count == 0) return;
  for (int c = 0; c < ds.meta.c; ++c) {
    const double m = sum[c] / count;
    const double var = std::max(0.0, sq[c] / count - m * m);
    ds.meta.channel_mean[c] = m;
    // Constant channels would divide by zero; fall back to unit scale.
    ds.meta.channel_std[c] = var > 1e-12 ? std::sqrt(var) : 1.0;
  }
}

// ---- loaders -------------------------------------------------------------------

Dataset load_cifar_binary(const std::vector<fs::path>& files, int n_classes) {
  if (n_classes != 10 && n_classes != 100) throw DataError("cifar: n_classes must be 10 or 100");
  const std::size_t label_bytes = n_classes == 10 ? 1 : 2;
  const std::size_t record = label_bytes + 3072;
  Dataset ds;
  ds.meta = {n_classes == 10 ? "cifar10" : "cifar100", 3, 32, 32, n_classes, {}, {}, "crop_flip"};
  for (const auto& file : files) {
    const auto bytes = read_file(file);
    if (bytes.size() % record != 0) {
      throw DataError("cifar: " + file.string() + " is truncated (" + std::to_string(bytes.size()) +
                      " bytes is not a multiple of " + std::to_string(record) + ")");
    }
    for (std::size_t off = 0; off < bytes.size(); off += record) {
      const int label = bytes[off + label_bytes - 1];
      if (label >= n_classes) throw DataError("cifar: label " + std::to_string(label) + " out of range");
      ds.labels.push_back(label);
      for (std::size_t p = 0; p < 3072; ++p) ds.pixels.push_back(bytes[off + label_bytes + p] / 255.0f);
    }
  }
  return ds;
}

Dataset load_cifar_binary(const fs::path& file, int n_classes) {
  return load_cifar_binary(std::vector<fs::path>{file}, n_classes);
}

Dataset load_idx(const fs::path& images, const fs::path& labels, int n_classes) {
  const auto img = read_file(images);
  const auto lab = read_file(labels);
  if (img.size() < 16 || read_be32(img.data()) != 0x00000803) throw DataError("idx: bad image magic in " + images.string());
  if (lab.size() < 8 || read_be32(lab.data()) != 0x00000801) throw DataError("idx: bad label magic in " + labels.string());
  const std::uint32_t n = read_be32(img.data() + 4);
  const std::uint32_t rows = read_be32(img.data() + 8);
  const std::uint32_t cols = read_be32(img.data() + 12);
  const std::uint32_t n_labels = read_be32(lab.data() + 4);
  if (n != n_labels) {
    throw DataError("idx: " + std::to_string(n) + " images but " + std::to_string(n_labels) + " labels");
  }
  const std::uint64_t pixels = std::uint64_t{n} * rows * cols;
  if (img.size() != 16 + pixels) throw DataError("idx: image payload size mismatch in " + images.string());
  if (lab.size() != 8 + std::uint64_t{n}) throw DataError("idx: label payload size mismatch in " + labels.string());
  Dataset ds;
  ds.meta = {"idx", 1, static_cast<int>(rows), static_cast<int>(cols), n_classes, {}, {}, "none"};
  ds.pixels.resize(pixels);
  for (std::uint64_t i = 0; i < pixels; ++i) ds.pixels[i] = img[16 + i] / 255.0f;
  for (std::uint32_t i = 0; i < n; ++i) {
    const int label = lab[8 + i];
    if (label >= n_classes) throw DataError("idx: label " + std::to_string(label) + " out of range");
    ds.labels.push_back(label);
  }
  return ds;
}

Dataset load_raw_archive(const fs::path& path) {
  const auto bytes = read_file(path);
  static constexpr char magic[] = "PRIMG1\n";
  constexpr std::size_t magic_len = sizeof(magic) - 1;
  if (bytes.size() < magic_len + 4 || std::memcmp(bytes.data(), magic, magic_len) != 0) {
    throw DataError("archive: bad magic in " + path.string());
  }
  const std::uint32_t header_len = read_le32(bytes.data() + magic_len);
  const std::size_t header_off = magic_len + 4;
  if (bytes.size() < header_off + header_len) throw DataError("archive: truncated header");
  std::istringstream header(std::string(bytes.begin() + header_off, bytes.begin() + header_off + header_len));
  std::int64_t n = -1, c = 0, h = 0, w = 0, k = 0;
  header >> n >> c >> h >> w >> k;
  if (!header || n < 0 || c < 1 || h < 1 || w < 1 || k < 1) throw DataError("archive: malformed header");
  const std::size_t labels_off = header_off + header_len;
  const std::size_t pixels_off = labels_off + 2 * static_cast<std::size_t>(n);
  const std::size_t total = pixels_off + static_cast<std::size_t>(n * c * h * w);
  if (bytes.size() != total) {
    throw DataError("archive: header declares " + std::to_string(n) + " images (" + std::to_string(total) +
                    " bytes) but file has " + std::to_string(bytes.size()) + " bytes");
  }
  Dataset ds;
  ds.meta = {path.stem().string(), static_cast<int>(c), static_cast<int>(h), static_cast<int>(w), static_cast<int>(k),
             {}, {}, "crop_flip"};
  for (std::int64_t i = 0; i < n; ++i) {
    const int label = bytes[labels_off + 2 * i] | (bytes[labels_off + 2 * i + 1] << 8);
    if (label >= k) throw DataError("archive: label " + std::to_string(label) + " out of range");
    ds.labels.push_back(label);
  }
  ds.pixels.resize(total - pixels_off);
  for (std::size_t i = 0; i < ds.pixels.size(); ++i) ds.pixels[i] = bytes[pixels_off + i] / 255.0f;
  return ds;
}

void save_raw_archive(const Dataset& ds, const fs::path& path) {
  if (ds.meta.n_classes > 65536) throw DataError("archive: labels do not fit in u16");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  const std::string header = std::to_string(ds.size()) + " " + std::to_string(ds.meta.c) + " " +
                             std::to_string(ds.meta.h) + " " + std::to_string(ds.meta.w) + " " +
                             std::to_string(ds.meta.n_classes) + "\n";
  out.write("PRIMG1\n", 7);
  write_le32(out, static_cast<std::uint32_t>(header.size()));
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (int label : ds.labels) {
    const char b[2] = {static_cast<char>(label & 0xff), static_cast<char>((label >> 8) & 0xff)};
    out.write(b, 2);
  }
  std::vector<char> pix(ds.pixels.size());
  for (std::size_t i = 0; i < pix.size(); ++i) {
    const float v = std::clamp(ds.pixels[i], 0.0f, 1.0f);
    pix[i] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f)));
  }
  out.write(pix.data(), static_cast<std::streamsize>(pix.size()));
  if (!out) throw DataError("write failed for " + path.string());
}

Dataset resize_dataset(const Dataset& ds, int h, int w) {
  if (h < 1 || w < 1) throw std::invalid_argument("resize: target dims must be positive");
  if (h == ds.meta.h && w == ds.meta.w) return ds;
  Dataset out;
  out.meta = ds.meta;
  out.meta.h = h;
  out.meta.w = w;
  out.labels = ds.labels;
  out.pixels.resize(static_cast<std::size_t>(ds.size()) * ds.meta.c * h * w);
  auto coord = [](int i, int n_out, int n_in) {
    return n_out == 1 ? 0.0 : static_cast<double>(i) * (n_in - 1) / (n_out - 1);
  };
  const int sh = ds.meta.h, sw = ds.meta.w;
  float* dst = out.pixels.data();
  for (std::int64_t i = 0; i < ds.size(); ++i) {
    auto src = ds.image_span(i);
    for (int c = 0; c < ds.meta.c; ++c) {
      const float* plane = src.data() + static_cast<std::ptrdiff_t>(c) * sh * sw;
      for (int r = 0; r < h; ++r) {
        const double y = coord(r, h, sh);
        const int y0 = static_cast<int>(y), y1 = std::min(y0 + 1, sh - 1);
        const double fy = y - y0;
        for (int col = 0; col < w; ++col) {
          const double x = coord(col, w, sw);
          const int x0 = static_cast<int>(x), x1 = std::min(x0 + 1, sw - 1);
          const double fx = x - x0;
          const double top = plane[y0 * sw + x0] * (1 - fx) + plane[y0 * sw + x1] * fx;
          const double bottom = plane[y1 * sw + x0] * (1 - fx) + plane[y1 * sw + x1] * fx;
          *dst++ = static_cast<float>(top * (1 - fy) + bottom * fy);
        }
      }
    }
  }
  return out;
}

// ---- synthetic oriented glyphs ------------------------------------------------

namespace {

struct Segment {
  double u0, v0, u1, v1;
};

enum class Glyph { arrow, ell, tee, wedge };

struct ClassSpec {
  Glyph glyph;
  double tilt_deg;
};

constexpr std::array<ClassSpec, 10> kClasses = {{
    {Glyph::arrow, -36}, {Glyph::arrow, -4}, {Glyph::arrow, 28},
    {Glyph::ell, -28},   {Glyph::ell, 12},
    {Glyph::tee, -20},   {Glyph::tee, 20},
    {Glyph::wedge, -12}, {Glyph::wedge, 4},  {Glyph::wedge, 36},
}};

// Glyph strokes in unit coordinates, v pointing up.
std::vector<Segment> glyph_segments(Glyph g) {
  switch (g) {
    case Glyph::arrow:
      return {{0, -0.8, 0, 0.8}, {0, 0.8, -0.45, 0.35}, {0, 0.8, 0.45, 0.35}};
    case Glyph::ell:
      return {{-0.35, 0.8, -0.35, -0.8}, {-0.35, -0.8, 0.6, -0.8}};
    case Glyph::tee:
      return {{-0.7, 0.8, 0.7, 0.8}, {0, 0.8, 0, -0.8}};
    case Glyph::wedge:
      return {{-0.6, 0.75, 0, -0.75}, {0, -0.75, 0.6, 0.75}};
  }
  return {};
}

double segment_distance(double u, double v, const Segment& s) {
  const double du = s.u1 - s.u0, dv = s.v1 - s.v0;
  const double len2 = du * du + dv * dv;
  double t = len2 > 0 ? ((u - s.u0) * du + (v - s.v0) * dv) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double eu = u - (s.u0 + t * du), ev = v - (s.v0 + t * dv);
  return std::sqrt(eu * eu + ev * ev);
}

struct Pose {
  double angle_rad = 0;
  double scale = 1;
  double shift_x = 0;
  double shift_y = 0;
  std::array<double, 3> ink{0.9, 0.9, 0.9};
  std::array<double, 3> paper{0.3, 0.3, 0.3};
};

// Renders one image into `out` (C=3, channel-major). `rng` may be null for a
// noise-free prototype.
void render(int label, int h, int w, const Pose& pose, const SyntheticOptions& opt, Rng* rng, float* out) {
  const auto segments = glyph_segments(kClasses[label].glyph);
  const double unit = 0.36 * std::min(h, w) * pose.scale;  // pixels per glyph unit
  const double half_width = 1.25;                          // stroke half-width in pixels
  const double cx = w / 2.0 + pose.shift_x;
  const double cy = h / 2.0 + pose.shift_y;
  const double ca = std::cos(pose.angle_rad), sa = std::sin(pose.angle_rad);

  // Coverage of the glyph at canvas point (px, py), y pointing down.
  auto coverage = [&](double px, double py) {
    const double dx = px - cx;
    const double dy = cy - py;
    // inverse rotation into glyph coordinates
    const double u = (dx * ca + dy * sa) / unit;
    const double v = (-dx * sa + dy * ca) / unit;
    double d = 1e9;
    for (const auto& s : segments) d = std::min(d, segment_distance(u, v, s));
    return std::clamp(half_width + 0.5 - d * unit, 0.0, 1.0);
  };
  // Glyph "up" in canvas pixels. Texture and lighting follow the glyph, so
  // every orientation cue in the image carries its pose.
  const double up_x = -sa, up_y = -ca;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      const double cv = coverage(px, py);
      // Light from the glyph's top: upper stroke edges bright, lower dark.
      const double emboss = opt.shading * (coverage(px - up_x, py - up_y) - coverage(px + up_x, py + up_y));
      // Sawtooth rising towards the glyph's top, one period every texture_period px.
      const double height = (px - cx) * up_x + (py - cy) * up_y;
      const double period = std::max(opt.texture_period, 2);
      const double ramp = (height / period) - std::floor(height / period);
      for (int c = 0; c < 3; ++c) {
        const double background = pose.paper[c] + opt.texture * (ramp - 0.5);
        double value = background * (1 - cv) + pose.ink[c] * cv + emboss;
        if (rng && opt.noise > 0) value += rng->normal(0.0, opt.noise);
        out[c * plane + y * w + x] = static_cast<float>(std::clamp(value, 0.0, 1.0));
      }
    }
  }
}

}  // namespace

Dataset gen_synthetic_oriented(std::int64_t n, int h, int w, std::uint64_t seed, const SyntheticOptions& opt) {
  if (n < 10) throw std::invalid_argument("gen_synthetic_oriented: n must be >= 10");
  if (h < 8 || w < 8) throw std::invalid_argument("gen_synthetic_oriented: image must be at least 8x8");
  Dataset ds;
  ds.meta = {"synthetic_oriented", 3, h, w, 10, {}, {}, "crop_flip"};
  std::vector<int> labels(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % 10);
  Rng order = Rng::derive(seed, "synthetic/order");
  for (std::int64_t i = n - 1; i > 0; --i) std::swap(labels[i], labels[order.uniform_int(0, i)]);
  ds.labels = labels;
  ds.pixels.resize(static_cast<std::size_t>(n) * 3 * h * w);
  const double deg = std::numbers::pi / 180.0;
  for (std::int64_t i = 0; i < n; ++i) {
    Rng rng = Rng::derive(seed, "synthetic/image", 0, static_cast<std::uint64_t>(i));
    Pose pose;
    const int label = labels[i];
    pose.angle_rad = (kClasses[label].tilt_deg + rng.uniform() * 2 * opt.angle_jitter_deg - opt.angle_jitter_deg) * deg;
    pose.scale = 1.0 + (rng.uniform() * 2 - 1) * opt.scale_jitter;
    pose.shift_x = (rng.uniform() * 2 - 1) * opt.shift_jitter;
    pose.shift_y = (rng.uniform() * 2 - 1) * opt.shift_jitter;
    const double ink = 0.75 + 0.2 * rng.uniform();
    const double paper = 0.2 + 0.2 * rng.uniform();
    for (int c = 0; c < 3; ++c) {
      pose.ink[c] = std::clamp(ink + 0.1 * (rng.uniform() - 0.5), 0.0, 1.0);
      pose.paper[c] = std::clamp(paper + 0.1 * (rng.uniform() - 0.5), 0.0, 1.0);
    }
    render(label, h, w, pose, opt, &rng, ds.pixels.data() + static_cast<std::size_t>(i) * 3 * h * w);
  }
  return ds;
}

Tensor synthetic_prototype(int label, int h, int w, const SyntheticOptions& opt) {
  if (label < 0 || label >= 10) throw std::out_of_range("synthetic_prototype: label " + std::to_string(label));
  Pose pose;
  pose.angle_rad = kClasses[label].tilt_deg * std::numbers::pi / 180.0;
  pose.ink = {0.85, 0.85, 0.85};
  pose.paper = {0.3, 0.3, 0.3};
  std::vector<float> pixels(static_cast<std::size_t>(3) * h * w);
  render(label, h, w, pose, opt, nullptr, pixels.data());
  return Tensor::from_vector({3, h, w}, std::move(pixels));
}

// ---- augmentation --------------------------------------------------------------

void AugmentConfig::validate() const {
  if (pad < 0) throw std::invalid_argument("augment: pad must be >= 0");
  if (pad > 0 && !random_crop) throw std::invalid_argument("augment: pad > 0 requires random_crop");
}

Tensor hflip(const Tensor& image) {
  check_image_tensor(image, "hflip");
  const std::int64_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  Tensor in = image.dtype() == DType::f32 ? image : image.to(DType::f32);
  auto src = in.data<float>();
  std::vector<float> out(src.size());
  for (std::int64_t p = 0; p < c * h; ++p) {
    for (std::int64_t x = 0; x < w; ++x) out[p * w + x] = src[p * w + (w - 1 - x)];
  }
  return Tensor::from_vector(image.shape(), std::move(out)).to(image.dtype());
}

Tensor augment(const Tensor& image, const AugmentConfig& cfg, Rng& rng) {
  cfg.validate();
  check_image_tensor(image, "augment");
  Tensor out = image;
  if (cfg.random_crop) {
    const std::int64_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
    // Offsets into the zero-padded canvas; pad means "no shift".
    std::int64_t oy = cfg.pad, ox = cfg.pad;
    if (cfg.allow_zero_padding) {
      oy = rng.uniform_int(0, 2 * cfg.pad);
      ox = rng.uniform_int(0, 2 * cfg.pad);
    }
    if (oy != cfg.pad || ox != cfg.pad) {
      Tensor in = image.dtype() == DType::f32 ? image : image.to(DType::f32);
      auto src = in.data<float>();
      std::vector<float> dst(src.size(), 0.0f);
      for (std::int64_t ch = 0; ch < c; ++ch) {
        for (std::int64_t y = 0; y < h; ++y) {
          const std::int64_t sy = y + oy - cfg.pad;
          if (sy < 0 || sy >= h) continue;
          for (std::int64_t x = 0; x < w; ++x) {
            const std::int64_t sx = x + ox - cfg.pad;
            if (sx >= 0 && sx < w) dst[(ch * h + y) * w + x] = src[(ch * h + sy) * w + sx];
          }
        }
      }
      out = Tensor::from_vector(image.shape(), std::move(dst)).to(image.dtype());
    }
  }
  if (cfg.hflip && rng.bernoulli(0.5)) out = hflip(out);
  return out;
}

// ---- normalization -------------------------------------------------------------

namespace {

Tensor channel_affine(const Tensor& images, const std::vector<double>& mean, const std::vector<double>& stddev,
                      bool inverse) {
  if (images.ndim() != 3 && images.ndim() != 4) {
    throw ShapeError("normalize: expected [C, H, W] or [B, C, H, W], got " + shape_str(images.shape()));
  }
  const int axis = images.ndim() - 3;
  const std::int64_t c = images.dim(axis);
  if (static_cast<std::int64_t>(mean.size()) != c || static_cast<std::int64_t>(stddev.size()) != c) {
    throw ShapeError("normalize: " + std::to_string(c) + " channels but " + std::to_string(mean.size()) +
                     " statistics");
  }
  for (double s : stddev) {
    if (!(s > 0)) throw std::invalid_argument("normalize: std must be positive");
  }
  const std::int64_t plane = images.dim(axis + 1) * images.dim(axis + 2);
  std::vector<double> values = images.to_vector();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::size_t ch = (i / plane) % c;
    values[i] = inverse ? values[i] * stddev[ch] + mean[ch] : (values[i] - mean[ch]) / stddev[ch];
  }
  return Tensor::from_list(images.shape(), values, images.dtype());
}

}  // namespace

Tensor normalize(const Tensor& images, const std::vector<double>& mean, const std::vector<double>& stddev) {
  return channel_affine(images, mean, stddev, false);
}

Tensor denormalize(const Tensor& images, const std::vector<double>& mean, const std::vector<double>& stddev) {
  return channel_affine(images, mean, stddev, true);
}

}  // namespace patchrot::data
