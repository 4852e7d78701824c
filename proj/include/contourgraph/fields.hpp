// SPDX-License-Identifier: Apache-2.0
//
// Contour boundary extraction, exact Euclidean distance transform, unsigned
// distance fields and differentiable bilinear sampling of dense grids at
// continuous, normalized point coordinates.
//
// Coordinate convention, used everywhere in this library: a normalized point
// (u, v) in [0,1]^2 maps to pixel-centre coordinates x = u*W - 0.5 (column)
// and y = v*H - 0.5 (row).

#pragma once

#include <cstdint>
#include <limits>
#include <vector>

#include "contourgraph/tensor.hpp"

namespace cg {

// ---------------------------------------------------------------------------
// BinaryMask
// ---------------------------------------------------------------------------

struct BinaryMask {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<std::uint8_t> bits;  // row-major, 0 background / 1 foreground

  static BinaryMask zeros(std::int64_t h, std::int64_t w) {
    return {h, w, std::vector<std::uint8_t>(static_cast<std::size_t>(h * w), 0)};
  }

  bool at(std::int64_t r, std::int64_t c) const { return bits[static_cast<std::size_t>(r * width + c)] != 0; }
  void set(std::int64_t r, std::int64_t c, bool v) { bits[static_cast<std::size_t>(r * width + c)] = v ? 1 : 0; }

  std::int64_t count() const {
    std::int64_t n = 0;
    for (std::uint8_t b : bits) n += b != 0;
    return n;
  }
  bool empty() const { return count() == 0; }
};

// ---------------------------------------------------------------------------
// Boundary extraction
// ---------------------------------------------------------------------------

// Foreground pixels with at least one 4-neighbour outside the foreground;
// the image border counts as outside.
inline BinaryMask boundary_extract(const BinaryMask& mask) {
  if (mask.empty()) throw EmptyRegionError("boundary_extract: mask has no foreground pixels");
  BinaryMask out = BinaryMask::zeros(mask.height, mask.width);
  for (std::int64_t r = 0; r < mask.height; ++r)
    for (std::int64_t c = 0; c < mask.width; ++c) {
      if (!mask.at(r, c)) continue;
      const bool interior = r > 0 && mask.at(r - 1, c) && r < mask.height - 1 && mask.at(r + 1, c) &&
                            c > 0 && mask.at(r, c - 1) && c < mask.width - 1 && mask.at(r, c + 1);
      if (!interior) out.set(r, c, true);
    }
  return out;
}

// Canny edge detector for grayscale inputs (Gaussian sigma, Sobel, non-max
// suppression, hysteresis with thresholds relative to the max magnitude).
// The binary 4-neighbour definition above is the default boundary extractor;
// this variant exists for non-binary images.
inline BinaryMask canny_edges(const std::vector<double>& gray, std::int64_t h, std::int64_t w,
                              double sigma = 1.0, double lo = 0.1, double hi = 0.2) {
  if (static_cast<std::int64_t>(gray.size()) != h * w)
    throw ShapeError("canny_edges: buffer does not match dimensions");
  // separable Gaussian blur
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double ksum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
    ksum += kernel[static_cast<std::size_t>(i + radius)];
  }
  for (double& v : kernel) v /= ksum;
  auto clampi = [](std::int64_t v, std::int64_t lo_, std::int64_t hi_) {
    return std::min(std::max(v, lo_), hi_);
  };
  std::vector<double> tmp(gray.size()), blur(gray.size());
  for (std::int64_t r = 0; r < h; ++r)
    for (std::int64_t c = 0; c < w; ++c) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i)
        acc += kernel[static_cast<std::size_t>(i + radius)] * gray[static_cast<std::size_t>(r * w + clampi(c + i, 0, w - 1))];
      tmp[static_cast<std::size_t>(r * w + c)] = acc;
    }
  for (std::int64_t r = 0; r < h; ++r)
    for (std::int64_t c = 0; c < w; ++c) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i)
        acc += kernel[static_cast<std::size_t>(i + radius)] * tmp[static_cast<std::size_t>(clampi(r + i, 0, h - 1) * w + c)];
      blur[static_cast<std::size_t>(r * w + c)] = acc;
    }
  // Sobel
  std::vector<double> mag(gray.size(), 0.0), dir(gray.size(), 0.0);
  double max_mag = 0.0;
  for (std::int64_t r = 1; r < h - 1; ++r)
    for (std::int64_t c = 1; c < w - 1; ++c) {
      auto p = [&](std::int64_t dr, std::int64_t dc) { return blur[static_cast<std::size_t>((r + dr) * w + c + dc)]; };
      const double gx = (p(-1, 1) + 2 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2 * p(0, -1) + p(1, -1));
      const double gy = (p(1, -1) + 2 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2 * p(-1, 0) + p(-1, 1));
      const double m = std::hypot(gx, gy);
      mag[static_cast<std::size_t>(r * w + c)] = m;
      dir[static_cast<std::size_t>(r * w + c)] = std::atan2(gy, gx);
      max_mag = std::max(max_mag, m);
    }
  if (max_mag == 0.0) return BinaryMask::zeros(h, w);
  // non-max suppression along the quantized gradient direction
  std::vector<std::uint8_t> state(gray.size(), 0);  // 0 none, 1 weak, 2 strong
  const double t_lo = lo * max_mag, t_hi = hi * max_mag;
  for (std::int64_t r = 1; r < h - 1; ++r)
    for (std::int64_t c = 1; c < w - 1; ++c) {
      const double m = mag[static_cast<std::size_t>(r * w + c)];
      if (m < t_lo) continue;
      double angle = dir[static_cast<std::size_t>(r * w + c)] * 180.0 / M_PI;
      if (angle < 0) angle += 180.0;
      std::int64_t dr = 0, dc = 1;
      if (angle >= 22.5 && angle < 67.5) { dr = 1; dc = 1; }
      else if (angle >= 67.5 && angle < 112.5) { dr = 1; dc = 0; }
      else if (angle >= 112.5 && angle < 157.5) { dr = 1; dc = -1; }
      if (m >= mag[static_cast<std::size_t>((r + dr) * w + c + dc)] &&
          m >= mag[static_cast<std::size_t>((r - dr) * w + c - dc)])
        state[static_cast<std::size_t>(r * w + c)] = m >= t_hi ? 2 : 1;
    }
  // hysteresis: keep weak edges connected (8-neighbourhood) to strong ones
  BinaryMask out = BinaryMask::zeros(h, w);
  std::vector<std::int64_t> stack;
  for (std::int64_t i = 0; i < h * w; ++i)
    if (state[static_cast<std::size_t>(i)] == 2) {
      stack.push_back(i);
      out.bits[static_cast<std::size_t>(i)] = 1;
    }
  while (!stack.empty()) {
    const std::int64_t i = stack.back();
    stack.pop_back();
    const std::int64_t r = i / w, c = i % w;
    for (std::int64_t dr = -1; dr <= 1; ++dr)
      for (std::int64_t dc = -1; dc <= 1; ++dc) {
        const std::int64_t rr = r + dr, cc = c + dc;
        if (rr < 0 || rr >= h || cc < 0 || cc >= w) continue;
        const std::int64_t j = rr * w + cc;
        if (state[static_cast<std::size_t>(j)] == 1 && !out.bits[static_cast<std::size_t>(j)]) {
          out.bits[static_cast<std::size_t>(j)] = 1;
          stack.push_back(j);
        }
      }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Exact Euclidean distance transform
// ---------------------------------------------------------------------------

namespace detail {

// 1D squared-distance transform by lower envelope of parabolas.
inline void dt1d(const double* f, std::int64_t n, double* d, std::int64_t* v, double* z) {
  std::int64_t k = 0;
  v[0] = 0;
  z[0] = -std::numeric_limits<double>::infinity();
  z[1] = std::numeric_limits<double>::infinity();
  for (std::int64_t q = 1; q < n; ++q) {
    double s;
    while (true) {
      s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k]);
      if (s > z[k]) break;
      --k;
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = std::numeric_limits<double>::infinity();
  }
  k = 0;
  for (std::int64_t q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    d[q] = (q - v[k]) * (q - v[k]) + f[v[k]];
  }
}

// Exact squared EDT of the zero set of `seed` (huge elsewhere).
inline std::vector<double> squared_edt(const std::vector<double>& seed, std::int64_t h, std::int64_t w) {
  std::vector<double> g(seed.size());
  const std::int64_t n = std::max(h, w);
  std::vector<double> f(static_cast<std::size_t>(n)), d(static_cast<std::size_t>(n)), z(static_cast<std::size_t>(n) + 1);
  std::vector<std::int64_t> v(static_cast<std::size_t>(n));
  // columns
  for (std::int64_t c = 0; c < w; ++c) {
    for (std::int64_t r = 0; r < h; ++r) f[static_cast<std::size_t>(r)] = seed[static_cast<std::size_t>(r * w + c)];
    dt1d(f.data(), h, d.data(), v.data(), z.data());
    for (std::int64_t r = 0; r < h; ++r) g[static_cast<std::size_t>(r * w + c)] = d[static_cast<std::size_t>(r)];
  }
  // rows
  std::vector<double> out(seed.size());
  for (std::int64_t r = 0; r < h; ++r) {
    for (std::int64_t c = 0; c < w; ++c) f[static_cast<std::size_t>(c)] = g[static_cast<std::size_t>(r * w + c)];
    dt1d(f.data(), w, d.data(), v.data(), z.data());
    for (std::int64_t c = 0; c < w; ++c) out[static_cast<std::size_t>(r * w + c)] = d[static_cast<std::size_t>(c)];
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Unsigned distance field
// ---------------------------------------------------------------------------

enum class FieldNormalization {
  none,         // pixel units
  image_width,  // divided by W, matching normalized point coordinates
};

struct DistanceField {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<double> grid;  // row-major S_c
  double norm = 1.0;         // pixels per grid unit (W when normalized)
  int class_id = -1;

  double at(std::int64_t r, std::int64_t c) const { return grid[static_cast<std::size_t>(r * width + c)]; }
  Tensor as_tensor() const { return Tensor::from_data(grid, {height, width}); }
};

// S_c(x) = min over boundary pixels p of |x - p|, exact Euclidean, zero on
// the boundary, positive inside and outside.
inline DistanceField unsigned_distance_field(const BinaryMask& mask,
                                             FieldNormalization norm = FieldNormalization::image_width,
                                             int class_id = -1) {
  const BinaryMask boundary = boundary_extract(mask);  // propagates EmptyRegionError
  constexpr double kFar = 1e12;
  std::vector<double> seed(boundary.bits.size(), kFar);
  for (std::size_t i = 0; i < boundary.bits.size(); ++i)
    if (boundary.bits[i]) seed[i] = 0.0;
  DistanceField field;
  field.height = mask.height;
  field.width = mask.width;
  field.class_id = class_id;
  field.norm = norm == FieldNormalization::image_width ? static_cast<double>(mask.width) : 1.0;
  field.grid = detail::squared_edt(seed, mask.height, mask.width);
  const double inv = 1.0 / field.norm;
  for (double& v : field.grid) v = std::sqrt(v) * inv;
  return field;
}

// ---------------------------------------------------------------------------
// CGF1 on-disk format: magic, u64 H, u64 W, row-major float64 payload
// ---------------------------------------------------------------------------

inline void save_field(const std::filesystem::path& path, const DistanceField& field) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open field file for writing: " + path.string());
  os.write("CGF1", 4);
  write_u64(os, static_cast<std::uint64_t>(field.height));
  write_u64(os, static_cast<std::uint64_t>(field.width));
  os.write(reinterpret_cast<const char*>(field.grid.data()),
           static_cast<std::streamsize>(field.grid.size() * sizeof(double)));
  if (!os) throw IoError("write failed: " + path.string());
}

inline DistanceField load_field(const std::filesystem::path& path, int class_id = -1) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("missing field file: " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "CGF1", 4) != 0)
    throw IoError("corrupt field file (bad magic): " + path.string());
  DistanceField field;
  field.height = static_cast<std::int64_t>(read_u64(is, "height of " + path.string()));
  field.width = static_cast<std::int64_t>(read_u64(is, "width of " + path.string()));
  if (field.height <= 0 || field.width <= 0 || field.height * field.width > (1ll << 32))
    throw IoError("corrupt field file (absurd dimensions): " + path.string());
  field.grid.resize(static_cast<std::size_t>(field.height * field.width));
  if (!is.read(reinterpret_cast<char*>(field.grid.data()),
               static_cast<std::streamsize>(field.grid.size() * sizeof(double))))
    throw IoError("corrupt field file (truncated payload): " + path.string());
  field.norm = static_cast<double>(field.width);  // dataset fields are width-normalized
  field.class_id = class_id;
  return field;
}

// ---------------------------------------------------------------------------
// Differentiable bilinear sampling
// ---------------------------------------------------------------------------

// grid: [H,W] or [C,H,W]; points: [N,2] normalized (u,v). Returns [N,C].
// Out-of-range points are clamped to the valid sampling rectangle; the
// coordinate gradient is the analytic bilinear derivative (zero where
// clamped).
inline Tensor bilinear_sample(const Tensor& grid, const Tensor& points) {
  if (grid.rank() != 2 && grid.rank() != 3)
    throw ShapeError("bilinear_sample: grid must be [H,W] or [C,H,W], got " + shape_str(grid.shape()));
  if (points.rank() != 2 || points.dim(1) != 2)
    throw ShapeError("bilinear_sample: points must be [N,2], got " + shape_str(points.shape()));
  const std::int64_t c = grid.rank() == 3 ? grid.dim(0) : 1;
  const std::int64_t h = grid.rank() == 3 ? grid.dim(1) : grid.dim(0);
  const std::int64_t w = grid.rank() == 3 ? grid.dim(2) : grid.dim(1);
  if (h < 2 || w < 2) throw ShapeError("bilinear_sample: grid must be at least 2x2");
  const std::int64_t n = points.dim(0);

  struct Corner {
    std::int64_t x0, y0;
    double wx, wy;      // fractional weights
    double dx_du, dy_dv;  // 0 when clamped, else W or H
  };
  auto corners = std::make_shared<std::vector<Corner>>(static_cast<std::size_t>(n));
  Tensor out = Tensor::zeros({n, c});

  for (std::int64_t i = 0; i < n; ++i) {
    const double u = points.at({i, 0}), v = points.at({i, 1});
    const double x_raw = u * static_cast<double>(w) - 0.5;
    const double y_raw = v * static_cast<double>(h) - 0.5;
    const double x = std::min(std::max(x_raw, 0.0), static_cast<double>(w - 1));
    const double y = std::min(std::max(y_raw, 0.0), static_cast<double>(h - 1));
    Corner cr;
    cr.x0 = std::min(static_cast<std::int64_t>(x), w - 2);
    cr.y0 = std::min(static_cast<std::int64_t>(y), h - 2);
    cr.wx = x - static_cast<double>(cr.x0);
    cr.wy = y - static_cast<double>(cr.y0);
    cr.dx_du = (x_raw == x) ? static_cast<double>(w) : 0.0;
    cr.dy_dv = (y_raw == y) ? static_cast<double>(h) : 0.0;
    (*corners)[static_cast<std::size_t>(i)] = cr;
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const double* g = grid.data().data() + ch * h * w;
      const double v00 = g[cr.y0 * w + cr.x0], v01 = g[cr.y0 * w + cr.x0 + 1];
      const double v10 = g[(cr.y0 + 1) * w + cr.x0], v11 = g[(cr.y0 + 1) * w + cr.x0 + 1];
      out.at({i, ch}) = (1.0 - cr.wy) * ((1.0 - cr.wx) * v00 + cr.wx * v01) +
                        cr.wy * ((1.0 - cr.wx) * v10 + cr.wx * v11);
    }
  }

  if (detail::should_record({&grid, &points})) {
    auto gn = grid.node(), pn = points.node(), on = out.node();
    detail::record_op(out, [gn, pn, on, corners, c, h, w, n] {
      if (on->grad.empty()) return;
      for (std::int64_t i = 0; i < n; ++i) {
        const Corner& cr = (*corners)[static_cast<std::size_t>(i)];
        for (std::int64_t ch = 0; ch < c; ++ch) {
          const double go = on->grad[static_cast<std::size_t>(i * c + ch)];
          if (go == 0.0) continue;
          const std::int64_t base = ch * h * w;
          const std::int64_t i00 = base + cr.y0 * w + cr.x0;
          if (gn->requires_grad) {
            auto& gg = gn->grad_buf();
            gg[i00] += go * (1.0 - cr.wy) * (1.0 - cr.wx);
            gg[i00 + 1] += go * (1.0 - cr.wy) * cr.wx;
            gg[i00 + w] += go * cr.wy * (1.0 - cr.wx);
            gg[i00 + w + 1] += go * cr.wy * cr.wx;
          }
          if (pn->requires_grad) {
            const double v00 = gn->data[i00], v01 = gn->data[i00 + 1];
            const double v10 = gn->data[i00 + w], v11 = gn->data[i00 + w + 1];
            const double dval_dx = (1.0 - cr.wy) * (v01 - v00) + cr.wy * (v11 - v10);
            const double dval_dy = (1.0 - cr.wx) * (v10 - v00) + cr.wx * (v11 - v01);
            auto& gp = pn->grad_buf();
            gp[static_cast<std::size_t>(i * 2)] += go * dval_dx * cr.dx_du;
            gp[static_cast<std::size_t>(i * 2 + 1)] += go * dval_dy * cr.dy_dv;
          }
        }
      }
    });
  }
  debug_check_finite(out, "bilinear_sample");
  return out;
}

}  // namespace cg
