// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "contourgraph/fields.hpp"

using namespace cg;

namespace {

BinaryMask random_blob_mask(std::int64_t h, std::int64_t w, Rng& rng) {
  BinaryMask m = BinaryMask::zeros(h, w);
  const int disks = static_cast<int>(rng.uniform_int(2, 5));
  for (int d = 0; d < disks; ++d) {
    const double cy = rng.uniform(8.0, static_cast<double>(h) - 8.0);
    const double cx = rng.uniform(8.0, static_cast<double>(w) - 8.0);
    const double rad = rng.uniform(4.0, 14.0);
    for (std::int64_t r = 0; r < h; ++r)
      for (std::int64_t c = 0; c < w; ++c)
        if ((r - cy) * (r - cy) + (c - cx) * (c - cx) <= rad * rad) m.set(r, c, true);
  }
  if (m.empty()) m.set(h / 2, w / 2, true);
  return m;
}

// morphological gradient: mask AND NOT erode4(mask), border erodes
BinaryMask boundary_erosion_oracle(const BinaryMask& mask) {
  BinaryMask out = BinaryMask::zeros(mask.height, mask.width);
  for (std::int64_t r = 0; r < mask.height; ++r)
    for (std::int64_t c = 0; c < mask.width; ++c) {
      if (!mask.at(r, c)) continue;
      const bool survives_erosion = r > 0 && r < mask.height - 1 && c > 0 && c < mask.width - 1 &&
                                    mask.at(r - 1, c) && mask.at(r + 1, c) && mask.at(r, c - 1) &&
                                    mask.at(r, c + 1);
      out.set(r, c, !survives_erosion);
    }
  return out;
}

std::vector<std::pair<std::int64_t, std::int64_t>> mask_pixels(const BinaryMask& m) {
  std::vector<std::pair<std::int64_t, std::int64_t>> px;
  for (std::int64_t r = 0; r < m.height; ++r)
    for (std::int64_t c = 0; c < m.width; ++c)
      if (m.at(r, c)) px.emplace_back(r, c);
  return px;
}

}  // namespace

TEST_CASE("boundary of a single pixel is that pixel", "[fields]") {
  BinaryMask m = BinaryMask::zeros(5, 5);
  m.set(2, 3, true);
  BinaryMask b = boundary_extract(m);
  CHECK(b.count() == 1);
  CHECK(b.at(2, 3));
}

TEST_CASE("boundary of a full mask is the outer ring", "[fields]") {
  BinaryMask m = BinaryMask::zeros(10, 10);
  std::fill(m.bits.begin(), m.bits.end(), 1);
  BinaryMask b = boundary_extract(m);
  CHECK(b.count() == 36);  // 10*10 - 8*8
  for (std::int64_t r = 0; r < 10; ++r)
    for (std::int64_t c = 0; c < 10; ++c)
      CHECK(b.at(r, c) == (r == 0 || r == 9 || c == 0 || c == 9));
}

TEST_CASE("boundary equals the erosion oracle on random blobs", "[fields]") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng(seed);
    BinaryMask m = random_blob_mask(48, 40, rng);
    BinaryMask got = boundary_extract(m);
    BinaryMask want = boundary_erosion_oracle(m);
    CHECK(got.bits == want.bits);
  }
}

TEST_CASE("empty mask raises EmptyRegion", "[fields]") {
  BinaryMask m = BinaryMask::zeros(8, 8);
  CHECK_THROWS_AS(boundary_extract(m), EmptyRegionError);
  CHECK_THROWS_AS(unsigned_distance_field(m), EmptyRegionError);
}

TEST_CASE("distance to two seed pixels at row ends", "[fields]") {
  // distance transform on a 1x5 strip whose boundary set is the two end pixels
  std::vector<double> seed = {0.0, 1e12, 1e12, 1e12, 0.0};
  auto sq = cg::detail::squared_edt(seed, 1, 5);
  CHECK(std::sqrt(sq[2]) == 2.0);  // min(2, 2)
  CHECK(sq[0] == 0.0);
  CHECK(sq[4] == 0.0);
  CHECK(std::sqrt(sq[1]) == 1.0);
}

TEST_CASE("distance field is zero exactly on boundary pixels", "[fields]") {
  Rng rng(3);
  BinaryMask m = random_blob_mask(32, 32, rng);
  DistanceField f = unsigned_distance_field(m, FieldNormalization::none);
  BinaryMask b = boundary_extract(m);
  for (std::int64_t r = 0; r < 32; ++r)
    for (std::int64_t c = 0; c < 32; ++c) {
      if (b.at(r, c)) CHECK(f.at(r, c) == 0.0);
      else CHECK(f.at(r, c) > 0.0);
    }
}

TEST_CASE("distance transform equals brute force on 50 random masks", "[fields]") {
  for (std::uint64_t seed = 1; seed <= 50; ++seed) {
    Rng rng(seed * 31 + 7);
    BinaryMask m = random_blob_mask(64, 64, rng);
    DistanceField f = unsigned_distance_field(m, FieldNormalization::none);
    const auto boundary = mask_pixels(boundary_extract(m));
    double max_diff = 0.0;
    for (std::int64_t r = 0; r < 64; ++r)
      for (std::int64_t c = 0; c < 64; ++c) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& [br, bc] : boundary) {
          const double d2 = static_cast<double>((r - br) * (r - br) + (c - bc) * (c - bc));
          best = std::min(best, d2);
        }
        max_diff = std::max(max_diff, std::abs(f.at(r, c) - std::sqrt(best)));
      }
    INFO("seed " << seed);
    CHECK(max_diff < 1e-9);
  }
}

TEST_CASE("unnormalized field is 1-Lipschitz across adjacent pixels", "[fields]") {
  for (std::uint64_t seed : {2u, 9u, 21u}) {
    Rng rng(seed);
    BinaryMask m = random_blob_mask(40, 56, rng);
    DistanceField f = unsigned_distance_field(m, FieldNormalization::none);
    for (std::int64_t r = 0; r < m.height; ++r)
      for (std::int64_t c = 0; c < m.width; ++c) {
        if (c + 1 < m.width) CHECK(std::abs(f.at(r, c) - f.at(r, c + 1)) <= 1.0 + 1e-12);
        if (r + 1 < m.height) CHECK(std::abs(f.at(r, c) - f.at(r + 1, c)) <= 1.0 + 1e-12);
      }
  }
}

TEST_CASE("normalized field maxes out below the diagonal bound", "[fields]") {
  Rng rng(5);
  BinaryMask m = random_blob_mask(48, 64, rng);
  DistanceField f = unsigned_distance_field(m, FieldNormalization::image_width);
  const double bound = std::sqrt(1.0 + (48.0 / 64.0) * (48.0 / 64.0));
  for (double v : f.grid) {
    CHECK(v >= 0.0);
    CHECK(v <= bound);
  }
}

TEST_CASE("bilinear sample at a pixel centre returns that pixel", "[fields]") {
  Rng rng(8);
  Tensor grid = Tensor::zeros({6, 9});
  for (double& v : grid.data()) v = rng.uniform(-3.0, 3.0);
  for (auto [i, j] : {std::pair<int, int>{0, 0}, {2, 5}, {5, 8}}) {
    Tensor pts = Tensor::from_data({(j + 0.5) / 9.0, (i + 0.5) / 6.0}, {1, 2});
    Tensor out = bilinear_sample(grid, pts);
    CHECK(out.item() == Catch::Approx(grid.at({i, j})).margin(1e-14));
  }
}

TEST_CASE("constant grid samples constant with zero coordinate gradient", "[fields]") {
  Tensor grid = Tensor::full({5, 5}, 2.5);
  Tensor pts = Tensor::from_data({0.3, 0.7, 0.51, 0.13}, {2, 2}, true);
  Tape tape;
  TapeScope scope(tape);
  Tensor out = bilinear_sample(grid, pts);
  CHECK(out.at({0, 0}) == 2.5);
  CHECK(out.at({1, 0}) == 2.5);
  tape.backward(sum(out));
  for (int i = 0; i < 4; ++i) CHECK(pts.grad_at(i) == 0.0);
}

TEST_CASE("bilinear sample is exact for affine grids", "[fields]") {
  const std::int64_t h = 7, w = 11;
  const double a = 0.4, b = -0.3, c = 1.7;
  Tensor grid = Tensor::zeros({h, w});
  for (std::int64_t i = 0; i < h; ++i)
    for (std::int64_t j = 0; j < w; ++j) grid.at({i, j}) = a + b * static_cast<double>(j) + c * static_cast<double>(i);
  Rng rng(12);
  for (int t = 0; t < 20; ++t) {
    // keep the sample square strictly inside the grid
    const double u = rng.uniform(1.0 / w, 1.0 - 1.5 / w);
    const double v = rng.uniform(1.0 / h, 1.0 - 1.5 / h);
    Tensor pts = Tensor::from_data({u, v}, {1, 2});
    const double x = u * w - 0.5, y = v * h - 0.5;
    CHECK(bilinear_sample(grid, pts).item() == Catch::Approx(a + b * x + c * y).margin(1e-12));
  }
}

TEST_CASE("bilinear gradients match finite differences", "[fields]") {
  Rng rng(21);
  Tensor grid0 = Tensor::zeros({8, 8});
  for (double& v : grid0.data()) v = rng.uniform(-1.0, 1.0);
  Tensor weights = Tensor::zeros({20, 1});
  for (double& v : weights.data()) v = rng.uniform(0.5, 1.5);
  // interior points away from pixel-cell kinks
  std::vector<double> coords;
  for (int i = 0; i < 20; ++i) {
    const double fx = rng.uniform(0.2, 0.8), fy = rng.uniform(0.2, 0.8);
    const std::int64_t px = rng.uniform_int(1, 5), py = rng.uniform_int(1, 5);
    coords.push_back((static_cast<double>(px) + fx + 0.5) / 8.0);
    coords.push_back((static_cast<double>(py) + fy + 0.5) / 8.0);
  }
  Tensor pts0 = Tensor::from_data(coords, {20, 2});

  auto f_pts = [&](const Tensor& p) { return sum(mul(bilinear_sample(grid0, p), weights)); };
  auto rp = gradient_check(f_pts, pts0, 1e-5, 1e-5);
  CHECK(rp.pass);
  CHECK(rp.max_rel_err < 1e-5);

  auto f_grid = [&](const Tensor& g) { return sum(mul(bilinear_sample(g, pts0), weights)); };
  auto rg = gradient_check(f_grid, grid0, 1e-5, 1e-5);
  CHECK(rg.pass);
  CHECK(rg.max_rel_err < 1e-5);
}

TEST_CASE("out-of-range points clamp and receive zero coordinate gradient", "[fields]") {
  Rng rng(4);
  Tensor grid = Tensor::zeros({6, 6});
  for (double& v : grid.data()) v = rng.uniform(0.0, 1.0);
  Tensor pts = Tensor::from_data({-0.4, 0.5, 1.7, 0.5, 0.5, -2.0}, {3, 2}, true);
  Tape tape;
  TapeScope scope(tape);
  Tensor out = bilinear_sample(grid, pts);
  tape.backward(sum(out));
  CHECK(pts.grad_at(0) == 0.0);  // u clamped low
  CHECK(pts.grad_at(2) == 0.0);  // u clamped high
  CHECK(pts.grad_at(5) == 0.0);  // v clamped low
  // clamped sample equals the nearest valid sample
  Tensor edge = Tensor::from_data({0.5 / 6.0, 0.5}, {1, 2});
  CHECK(out.at({0, 0}) == Catch::Approx(bilinear_sample(grid, edge).item()).margin(1e-14));
}

TEST_CASE("CGF1 fields round-trip bit-exactly and reject corruption", "[fields]") {
  namespace fs = std::filesystem;
  Rng rng(30);
  BinaryMask m = random_blob_mask(24, 32, rng);
  DistanceField f = unsigned_distance_field(m);
  const fs::path path = fs::temp_directory_path() / "cg_test_field.cgf";
  save_field(path, f);
  DistanceField g = load_field(path);
  CHECK(g.height == f.height);
  CHECK(g.width == f.width);
  CHECK(g.grid == f.grid);
  CHECK(g.norm == static_cast<double>(f.width));

  // truncated payload
  {
    std::ifstream is(path, std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    std::ofstream os(path, std::ios::binary);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  }
  CHECK_THROWS_AS(load_field(path), IoError);
  fs::remove(path);
  CHECK_THROWS_AS(load_field(path), IoError);
}

TEST_CASE("canny edges land on a disk contour", "[fields]") {
  const std::int64_t h = 32, w = 32;
  std::vector<double> gray(static_cast<std::size_t>(h * w), 0.0);
  for (std::int64_t r = 0; r < h; ++r)
    for (std::int64_t c = 0; c < w; ++c)
      if ((r - 16.0) * (r - 16.0) + (c - 16.0) * (c - 16.0) <= 64.0)
        gray[static_cast<std::size_t>(r * w + c)] = 1.0;
  BinaryMask edges = canny_edges(gray, h, w, 1.0, 0.1, 0.2);
  CHECK(edges.count() > 10);
  for (std::int64_t r = 0; r < h; ++r)
    for (std::int64_t c = 0; c < w; ++c)
      if (edges.at(r, c)) {
        const double d = std::abs(std::hypot(r - 16.0, c - 16.0) - 8.0);
        CHECK(d < 3.0);
      }
}
