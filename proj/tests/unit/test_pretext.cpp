#include "doctest.h"
#include "helpers.hpp"
#include "patchrot/gradcheck.hpp"
#include "patchrot/pretext.hpp"

#include <cmath>
#include <numeric>

using namespace patchrot;
using namespace patchrot::pretext;
using patchrot::testing::random_f64;

namespace {

// Independent oracle: one counter-clockwise quarter turn written from the
// index mapping out[c][i][j] = in[c][j][n-1-i] on a square image.
std::vector<float> oracle_turn(const std::vector<float>& in, int c, int n) {
  std::vector<float> out(in.size());
  for (int ch = 0; ch < c; ++ch) {
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) out[(ch * n + i) * n + j] = in[(ch * n + j) * n + (n - 1 - i)];
    }
  }
  return out;
}

std::vector<float> floats(const Tensor& t) {
  auto v = t.to_vector();
  return {v.begin(), v.end()};
}

// Image whose every pixel value is unique, so windows match at one place only.
Tensor unique_image(int c, int h, int w, std::uint64_t seed) {
  std::vector<double> v(static_cast<std::size_t>(c) * h * w);
  std::iota(v.begin(), v.end(), 1.0);
  Rng rng(seed);
  for (std::size_t i = v.size() - 1; i > 0; --i) std::swap(v[i], v[rng.uniform_int(0, static_cast<std::int64_t>(i))]);
  for (auto& x : v) x /= static_cast<double>(v.size() + 1);
  return Tensor::from_list({c, h, w}, v);
}

Tensor window(const Tensor& img, int y, int x, int s) {
  return slice(slice(img, 1, y, y + s), 2, x, x + s).clone();
}

Tensor patch_at(const Tensor& canvas, int r, int q, int p) { return window(canvas, r * p, q * p, p); }

}  // namespace

TEST_CASE("rotate_quarter examples") {
  Rng rng(1);
  Tensor img = rng_draw(rng, UniformReal{0, 1}, {3, 5, 5});
  CHECK(bit_equal(rotate_quarter(img, 0), img));

  Tensor small = Tensor::from_list({1, 2, 2}, {1, 2, 3, 4});
  CHECK(rotate_quarter(small, 1).to_vector() == std::vector<double>{2, 4, 1, 3});

  Tensor t = img;
  for (int k = 0; k < 4; ++k) t = rotate_quarter(t, 1);
  CHECK(bit_equal(t, img));

  Tensor wide = rng_draw(rng, UniformReal{0, 1}, {2, 3, 5});
  CHECK(rotate_quarter(wide, 1).shape() == Shape{2, 5, 3});
  CHECK(bit_equal(rotate_quarter(rotate_quarter(wide, 1), 3), wide));

  CHECK_THROWS_AS(rotate_quarter(img, 4), std::invalid_argument);
  CHECK_THROWS_AS(rotate_quarter(img, -1), std::invalid_argument);
}

TEST_CASE("rotate_quarter is a Z4 action and matches the index oracle") {
  Rng rng(2);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = static_cast<int>(rng.uniform_int(1, 9));
    Tensor img = rng_draw(rng, UniformReal{0, 1}, {2, n, n});
    const int a = static_cast<int>(rng.uniform_int(0, 3));
    const int b = static_cast<int>(rng.uniform_int(0, 3));
    CHECK(bit_equal(rotate_quarter(rotate_quarter(img, a), b), rotate_quarter(img, (a + b) % 4)));
    std::vector<float> expect = floats(img);
    for (int k = 0; k < a; ++k) expect = oracle_turn(expect, 2, n);
    CHECK(floats(rotate_quarter(img, a)) == expect);
  }
  Tensor d = random_f64(rng, {1, 4, 4}, -1, 1, false);
  CHECK(bit_equal(rotate_quarter(rotate_quarter(d, 3), 1), d));
}

TEST_CASE("compute_reduced_geometry examples") {
  BufferedGrid g = compute_reduced_geometry(32, 32, 4, 1);
  CHECK(g.height() == 24);
  CHECK(g.width() == 24);
  CHECK(g.count() == 36);
  BufferedGrid t = compute_reduced_geometry(64, 64, 8, 2);
  CHECK(t.height() == 48);
  CHECK(t.count() == 36);
  BufferedGrid z = compute_reduced_geometry(32, 32, 4, 0);
  CHECK(z.height() == 32);
  CHECK(z.count() == 64);
  CHECK_THROWS_AS(compute_reduced_geometry(8, 8, 6, 3), std::invalid_argument);

  BufferedGrid o = compute_original_size_geometry(32, 32, 4, 1);
  CHECK(o.height() == 32);
  CHECK(o.count() == 64);
  CHECK(o.crop == 3);
}

TEST_CASE("make_image_rotation_samples examples") {
  BufferedGrid g = compute_reduced_geometry(32, 32, 4, 1);
  Tensor img = unique_image(3, 32, 32, 3);
  Rng rng(4);
  auto samples = make_image_rotation_samples(img, g, rng);
  REQUIRE(samples.size() == 4);
  for (int i = 0; i < 4; ++i) {
    CHECK(samples[i].label == i);
    CHECK(samples[i].image.shape() == Shape{3, 24, 24});
  }
  // sample 0 is an unrotated window of the source
  const double first = samples[0].image.value(0);
  bool found = false;
  for (int y = 0; y <= 8 && !found; ++y) {
    for (int x = 0; x <= 8 && !found; ++x) {
      if (img.value(y * 32 + x) == first) found = bit_equal(window(img, y, x, 24), samples[0].image);
    }
  }
  CHECK(found);
  CHECK(bit_equal(samples[2].image, rotate_quarter(samples[0].image, 2)));
  CHECK(bit_equal(samples[1].image, rotate_quarter(samples[0].image, 1)));
  CHECK_THROWS_AS(make_image_rotation_samples(Tensor::zeros({3, 20, 20}), g, rng), ShapeError);
}

TEST_CASE("make_patch_rotation_sample with B=0 and zero labels tiles the center crop") {
  BufferedGrid g = compute_reduced_geometry(30, 30, 4, 0);
  REQUIRE(g.height() == 28);
  Tensor img = unique_image(3, 30, 30, 5);
  Rng rng(6);
  auto s = make_patch_rotation_sample(img, g, rng, true);
  CHECK(bit_equal(s.image, window(img, 1, 1, 28)));
  for (int l : s.labels) CHECK(l == 0);
}

TEST_CASE("patch rotation provenance and gaps") {
  const int p = 4, b = 1;
  BufferedGrid g = compute_reduced_geometry(32, 32, p, b);
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor img = unique_image(3, 32, 32, 100 + trial);
    auto s = make_patch_rotation_sample(img, g, rng);
    REQUIRE(s.labels.size() == 36);
    // Recover each cell's crop offset by scanning [0, B]^2 with the
    // un-rotated output patch; exactly one offset must match.
    std::vector<int> oy(36, -1), ox(36, -1);
    for (int r = 0; r < g.rows; ++r) {
      for (int q = 0; q < g.cols; ++q) {
        const int k = r * g.cols + q;
        Tensor back = rotate_quarter(patch_at(s.image, r, q, p), (4 - s.labels[k]) % 4);
        int matches = 0;
        for (int dy = 0; dy <= b; ++dy) {
          for (int dx = 0; dx <= b; ++dx) {
            const int y = g.origin_y + r * g.cell + dy, x = g.origin_x + q * g.cell + dx;
            if (bit_equal(back, window(img, y, x, p))) {
              ++matches;
              oy[k] = dy;
              ox[k] = dx;
            }
          }
        }
        CHECK(matches == 1);
      }
    }
    for (int r = 0; r < g.rows; ++r) {
      for (int q = 0; q < g.cols; ++q) {
        const int k = r * g.cols + q;
        if (q + 1 < g.cols) {
          const int gap = (g.cell + ox[k + 1]) - (ox[k] + p);
          CHECK(gap >= 0);
          CHECK(gap <= 2 * b);
        }
        if (r + 1 < g.rows) {
          const int gap = (g.cell + oy[k + g.cols]) - (oy[k] + p);
          CHECK(gap >= 0);
          CHECK(gap <= 2 * b);
        }
        CHECK(oy[k] == s.offset_y[k]);
        CHECK(ox[k] == s.offset_x[k]);
      }
    }
  }
}

TEST_CASE("patch rotation labels are uniform") {
  BufferedGrid g = compute_reduced_geometry(32, 32, 4, 1);
  Tensor img = Tensor::zeros({1, 32, 32});
  Rng rng(8);
  std::vector<int> counts(4, 0);
  int total = 0;
  while (total < 10000) {
    for (int l : make_patch_rotation_sample(img, g, rng).labels) {
      ++counts[l];
      ++total;
    }
  }
  const double sigma = std::sqrt(0.25 * 0.75 / total);
  for (int c : counts) CHECK(std::abs(static_cast<double>(c) / total - 0.25) < 3 * sigma);
}

TEST_CASE("assemble_pretext_batch examples") {
  BufferedGrid g = compute_reduced_geometry(32, 32, 4, 1);
  Rng rng(9);
  std::vector<Tensor> base;
  for (int i = 0; i < 128; ++i) base.push_back(rng_draw(rng, UniformReal{0, 1}, {3, 32, 32}));

  PretextBatch full = assemble_pretext_batch(base, g, rng, {});
  CHECK(full.size() == 640);
  CHECK(full.images.shape() == Shape{640, 3, 24, 24});
  CHECK(full.image_rows().size() == 512);
  CHECK(full.patch_rows().size() == 128);
  for (int i = 0; i < 128; ++i) {
    std::vector<int> labels(full.image_labels.begin() + 4 * i, full.image_labels.begin() + 4 * i + 4);
    std::sort(labels.begin(), labels.end());
    CHECK(labels == std::vector<int>{0, 1, 2, 3});
  }
  for (std::int64_t r = 512; r < 640; ++r) CHECK(full.image_labels[r] == -1);

  std::vector<Tensor> three(base.begin(), base.begin() + 3);
  PretextFlags no_patch;
  no_patch.no_patch_rot = true;
  PretextBatch ip = assemble_pretext_batch(three, g, rng, no_patch);
  CHECK(ip.size() == 12);
  CHECK(ip.patch_rows().empty());
  for (int l : ip.patch_labels) CHECK(l == -1);

  PretextFlags no_image;
  no_image.no_image_rot = true;
  PretextBatch pp = assemble_pretext_batch(three, g, rng, no_image);
  CHECK(pp.size() == 3);
  CHECK(pp.image_rows().empty());

  PretextFlags neither;
  neither.no_image_rot = true;
  neither.no_patch_rot = true;
  CHECK_THROWS_AS(assemble_pretext_batch(three, g, rng, neither), std::invalid_argument);

  // Per-image streams: a prefix of the base batch reproduces the same samples.
  PretextBatch a = assemble_pretext_batch(three, g, rng, {});
  PretextBatch b = assemble_pretext_batch(std::vector<Tensor>(base.begin(), base.begin() + 2), g, rng, {});
  CHECK(bit_equal(slice(a.images, 0, 0, 8), slice(b.images, 0, 0, 8)));
}

TEST_CASE("rotate image and patch labels follow each patch") {
  BufferedGrid g = compute_reduced_geometry(32, 32, 4, 1);
  Tensor img = unique_image(1, 32, 32, 10);
  PretextFlags flags;
  flags.rotate_img_and_patch = true;
  flags.no_image_rot = true;
  Rng rng(11);
  int seen_global = 0;
  for (int trial = 0; trial < 8; ++trial) {
    PretextBatch batch = assemble_pretext_batch({img}, g, rng.fork(static_cast<std::uint64_t>(trial)), flags);
    REQUIRE(batch.size() == 1);
    CHECK(batch.task[0] == Task::both);
    const int global = batch.image_labels[0];
    REQUIRE(global >= 0);
    seen_global |= 1 << global;
    Tensor canvas = reshape(batch.images, {1, 24, 24});
    for (int r = 0; r < 6; ++r) {
      for (int q = 0; q < 6; ++q) {
        const int label = batch.patch_labels[r * 6 + q];
        Tensor back = rotate_quarter(patch_at(canvas, r, q, 4), (4 - label) % 4);
        // The un-rotated patch must be an exact window of the source.
        bool found = false;
        for (int y = 0; y + 4 <= 32 && !found; ++y) {
          for (int x = 0; x + 4 <= 32 && !found; ++x) found = bit_equal(back, window(img, y, x, 4));
        }
        CHECK(found);
      }
    }
  }
  CHECK(seen_global > 1);
}

TEST_CASE("original-size ablation keeps the full canvas") {
  BufferedGrid g = compute_original_size_geometry(32, 32, 4, 1);
  Rng rng(12);
  std::vector<Tensor> base{rng_draw(rng, UniformReal{0, 1}, {3, 32, 32})};
  PretextBatch batch = assemble_pretext_batch(base, g, rng, {});
  CHECK(batch.images.shape() == Shape{5, 3, 32, 32});
  CHECK(batch.n_positions == 64);
  // image-rotation samples are whole-image rotations
  CHECK(bit_equal(reshape(slice(batch.images, 0, 0, 1), {3, 32, 32}), base[0]));
}

TEST_CASE("forced zero rotation") {
  BufferedGrid g = compute_reduced_geometry(32, 32, 4, 1);
  Rng rng(13);
  std::vector<Tensor> base{rng_draw(rng, UniformReal{0, 1}, {3, 32, 32})};
  PretextFlags flags;
  flags.force_zero_rotation = true;
  PretextBatch batch = assemble_pretext_batch(base, g, rng, flags);
  for (int l : batch.image_labels) CHECK(l <= 0);
  for (int l : batch.patch_labels) CHECK(l <= 0);
  CHECK(bit_equal(slice(batch.images, 0, 0, 1), slice(batch.images, 0, 3, 4)));
}

TEST_CASE("patchrot_loss examples") {
  BufferedGrid g = compute_reduced_geometry(16, 16, 4, 1);  // 3x3 grid
  Rng rng(14);
  std::vector<Tensor> base{rng_draw(rng, UniformReal{0, 1}, {3, 16, 16}), rng_draw(rng, UniformReal{0, 1}, {3, 16, 16})};
  PretextBatch batch = assemble_pretext_batch(base, g, rng, {});
  const std::int64_t m = batch.size();
  REQUIRE(m == 10);

  LossTerms uniform = patchrot_loss(Tensor::zeros({m, 4}, DType::f64), Tensor::zeros({m, 9, 4}, DType::f64), batch);
  CHECK(uniform.image_term.item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  CHECK(uniform.patch_term.item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  CHECK(uniform.total.item() == doctest::Approx(2 * std::log(4.0)).epsilon(1e-12));

  std::vector<double> cls(m * 4, 0.0), patch(m * 9 * 4, 0.0);
  for (std::int64_t r = 0; r < m; ++r) {
    if (batch.image_labels[r] >= 0) cls[r * 4 + batch.image_labels[r]] = 40;
    for (int k = 0; k < 9; ++k) {
      const int l = batch.patch_labels[r * 9 + k];
      if (l >= 0) patch[(r * 9 + k) * 4 + l] = 40;
    }
  }
  LossTerms perfect = patchrot_loss(Tensor::from_list({m, 4}, cls, DType::f64),
                                    Tensor::from_list({m, 9, 4}, patch, DType::f64), batch);
  CHECK(perfect.total.item() < 1e-9);

  PretextFlags image_only;
  image_only.no_patch_rot = true;
  PretextBatch ib = assemble_pretext_batch(base, g, rng, image_only);
  Tensor logits = random_f64(rng, {8, 4}, -2, 2, false);
  LossTerms only = patchrot_loss(logits, Tensor(), ib);
  CHECK(only.total.item() == nn::softmax_cross_entropy(logits, ib.image_labels).item());
  CHECK_FALSE(only.patch_term.defined());

  CHECK_THROWS_AS(patchrot_loss(Tensor::zeros({m + 1, 4}), Tensor::zeros({m, 9, 4}), batch), ShapeError);
}

TEST_CASE("patchrot_loss backward matches finite differences") {
  BufferedGrid g = compute_reduced_geometry(16, 16, 4, 1);
  Rng rng(15);
  std::vector<Tensor> base{rng_draw(rng, UniformReal{0, 1}, {1, 16, 16})};
  PretextFlags both;
  both.rotate_img_and_patch = true;
  for (const PretextFlags& flags : {PretextFlags{}, both}) {
    PretextBatch batch = assemble_pretext_batch(base, g, rng, flags);
    for (int trial = 0; trial < 5; ++trial) {
      Tensor cls = random_f64(rng, {batch.size(), 4}, -2, 2);
      Tensor patch = random_f64(rng, {batch.size(), 9, 4}, -2, 2);
      for (auto red : {nn::Reduction::mean, nn::Reduction::sum}) {
        auto r = check_gradients([&] { return patchrot_loss(cls, patch, batch, red).total; }, {cls, patch});
        CHECK(r.max_relative_error < 1e-6);
      }
    }
  }
}

TEST_CASE("pretext accuracy") {
  BufferedGrid g = compute_reduced_geometry(16, 16, 4, 1);
  Rng rng(16);
  std::vector<Tensor> base{rng_draw(rng, UniformReal{0, 1}, {1, 16, 16})};
  PretextBatch batch = assemble_pretext_batch(base, g, rng, {});
  std::vector<double> cls(5 * 4, 0.0), patch(5 * 9 * 4, 0.0);
  for (int r = 0; r < 5; ++r) {
    if (batch.image_labels[r] >= 0) cls[r * 4 + batch.image_labels[r]] = 1;
    for (int k = 0; k < 9; ++k) {
      const int l = batch.patch_labels[r * 9 + k];
      if (l >= 0 && k < 3) patch[(r * 9 + k) * 4 + l] = 1;
    }
  }
  auto acc = pretext_accuracy(Tensor::from_list({5, 4}, cls), Tensor::from_list({5, 9, 4}, patch), batch);
  CHECK(acc.image() == 1.0);
  CHECK(acc.image_total == 4);
  CHECK(acc.patch_total == 9);
  // Positions 3..8 have all-zero logits, so argmax is class 0.
  std::int64_t zero_labels = 0;
  for (int k = 3; k < 9; ++k) zero_labels += batch.patch_labels[4 * 9 + k] == 0;
  CHECK(acc.patch_correct == 3 + zero_labels);
}

TEST_CASE("compact patch logits give the same loss and accuracy") {
  BufferedGrid g = compute_reduced_geometry(16, 16, 4, 1);
  Rng rng(17);
  std::vector<Tensor> base{rng_draw(rng, UniformReal{0, 1}, {3, 16, 16}), rng_draw(rng, UniformReal{0, 1}, {3, 16, 16})};
  PretextBatch batch = assemble_pretext_batch(base, g, rng, {});
  Tensor cls = random_f64(rng, {batch.size(), 4}, -2, 2, false);
  Tensor patch = random_f64(rng, {batch.size(), 9, 4}, -2, 2, false);
  Tensor compact = select_rows(patch, batch.patch_rows());
  CHECK(compact.dim(0) == 2);
  CHECK(patchrot_loss(cls, compact, batch).total.item() == patchrot_loss(cls, patch, batch).total.item());
  auto a = pretext_accuracy(cls, compact, batch);
  auto b = pretext_accuracy(cls, patch, batch);
  CHECK(a.patch_correct == b.patch_correct);
  CHECK(a.position_correct == b.position_correct);
  CHECK_THROWS_AS(patchrot_loss(cls, Tensor::zeros({2, 8, 4}, DType::f64), batch), ShapeError);
}
