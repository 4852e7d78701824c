// SPDX-License-Identifier: Apache-2.0
//
// Polygon rasterization (scanline, even-odd fill), segmentation metrics
// (Dice, Jaccard, Hausdorff) and topology diagnostics.

#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "contourgraph/fields.hpp"
#include "contourgraph/graph.hpp"

namespace cg {

using Point2 = std::array<double, 2>;  // (x, y) = (column, row)

// ---------------------------------------------------------------------------
// PointSet: normalized contour coordinates partitioned into class rings
// ---------------------------------------------------------------------------

struct PointSet {
  std::vector<Point2> pts;                        // normalized [0,1]^2
  std::vector<std::vector<std::int64_t>> cycles;  // per-class ring, polygon order
  std::vector<std::string> class_names;           // parallel to cycles

  static PointSet from_tensor(const Tensor& t, const ContourGraph& graph,
                              std::vector<std::string> names) {
    if (t.rank() != 2 || t.dim(1) != 2)
      throw ShapeError("PointSet: expected [N,2] coordinates, got " + shape_str(t.shape()));
    if (t.dim(0) != graph.num_nodes)
      throw ShapeError("PointSet: " + std::to_string(t.dim(0)) + " rows for " +
                       std::to_string(graph.num_nodes) + " graph nodes");
    PointSet ps;
    ps.pts.resize(static_cast<std::size_t>(t.dim(0)));
    for (std::int64_t i = 0; i < t.dim(0); ++i) ps.pts[static_cast<std::size_t>(i)] = {t.at({i, 0}), t.at({i, 1})};
    ps.cycles = graph.cycles;
    ps.class_names = std::move(names);
    return ps;
  }

  // Ring vertices of one class in polygon order.
  std::vector<Point2> ring(std::size_t class_idx) const {
    std::vector<Point2> out;
    out.reserve(cycles[class_idx].size());
    for (std::int64_t v : cycles[class_idx]) out.push_back(pts[static_cast<std::size_t>(v)]);
    return out;
  }
};

// ---------------------------------------------------------------------------
// Rasterization
// ---------------------------------------------------------------------------

// Scanline even-odd fill of a closed polygon given in normalized coordinates.
// A pixel is included iff its centre is inside under the even-odd rule; the
// result is well-defined for non-convex and self-intersecting inputs.
inline BinaryMask rasterize_polygon(const std::vector<Point2>& poly, std::int64_t h, std::int64_t w) {
  if (poly.size() < 3)
    throw DegeneratePolygonError("rasterize_polygon: need at least 3 vertices, got " +
                                 std::to_string(poly.size()));
  const std::size_t n = poly.size();
  std::vector<double> px(n), py(n);
  for (std::size_t i = 0; i < n; ++i) {
    px[i] = poly[i][0] * static_cast<double>(w) - 0.5;
    py[i] = poly[i][1] * static_cast<double>(h) - 0.5;
  }
  BinaryMask mask = BinaryMask::zeros(h, w);
  std::vector<double> xs;
  for (std::int64_t r = 0; r < h; ++r) {
    const double y = static_cast<double>(r);
    xs.clear();
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t j = (i + 1) % n;
      const double y0 = py[i], y1 = py[j];
      // half-open rule: count the lower endpoint, skip the upper
      if ((y0 <= y && y < y1) || (y1 <= y && y < y0))
        xs.push_back(px[i] + (y - y0) * (px[j] - px[i]) / (y1 - y0));
    }
    std::sort(xs.begin(), xs.end());
    for (std::size_t k = 0; k + 1 < xs.size(); k += 2) {
      const std::int64_t c0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::ceil(xs[k])));
      const std::int64_t c1 = std::min<std::int64_t>(w - 1, static_cast<std::int64_t>(std::ceil(xs[k + 1])) - 1);
      for (std::int64_t c = c0; c <= c1; ++c) mask.set(r, c, true);
    }
  }
  return mask;
}

// ---------------------------------------------------------------------------
// Overlap metrics
// ---------------------------------------------------------------------------

struct OverlapScores {
  double dice = 0.0;
  double jaccard = 0.0;
};

// DS = 2|A∩B| / (|A|+|B|), JC = |A∩B| / |A∪B|. Two empty masks compare as a
// perfect match.
inline OverlapScores dice_jaccard(const BinaryMask& pred, const BinaryMask& gt) {
  if (pred.height != gt.height || pred.width != gt.width)
    throw ShapeError("dice_jaccard: mask dimensions differ");
  std::int64_t inter = 0, a = 0, b = 0;
  for (std::size_t i = 0; i < pred.bits.size(); ++i) {
    const bool pa = pred.bits[i] != 0, pb = gt.bits[i] != 0;
    inter += pa && pb;
    a += pa;
    b += pb;
  }
  if (a + b == 0) return {1.0, 1.0};
  OverlapScores s;
  s.dice = 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
  const std::int64_t uni = a + b - inter;
  s.jaccard = static_cast<double>(inter) / static_cast<double>(uni);
  return s;
}

// ---------------------------------------------------------------------------
// Hausdorff distance
// ---------------------------------------------------------------------------

namespace detail {

// Exact nearest-neighbour queries through a balanced kd-tree; independent of
// the brute-force double loop used as its oracle.
class KdTree2 {
 public:
  explicit KdTree2(const std::vector<Point2>& pts) : pts_(pts), order_(pts.size()) {
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    build(0, static_cast<std::int64_t>(order_.size()), 0);
  }

  double min_squared_dist(const Point2& q) const {
    double best = std::numeric_limits<double>::infinity();
    query(0, static_cast<std::int64_t>(order_.size()), 0, q, best);
    return best;
  }

 private:
  void build(std::int64_t lo, std::int64_t hi, int axis) {
    if (hi - lo <= 1) return;
    const std::int64_t mid = (lo + hi) / 2;
    std::nth_element(order_.begin() + lo, order_.begin() + mid, order_.begin() + hi,
                     [this, axis](std::size_t a, std::size_t b) {
                       return pts_[a][static_cast<std::size_t>(axis)] < pts_[b][static_cast<std::size_t>(axis)];
                     });
    build(lo, mid, axis ^ 1);
    build(mid + 1, hi, axis ^ 1);
  }

  void query(std::int64_t lo, std::int64_t hi, int axis, const Point2& q, double& best) const {
    if (lo >= hi) return;
    const std::int64_t mid = (lo + hi) / 2;
    const Point2& p = pts_[order_[static_cast<std::size_t>(mid)]];
    const double dx = q[0] - p[0], dy = q[1] - p[1];
    best = std::min(best, dx * dx + dy * dy);
    const double diff = q[static_cast<std::size_t>(axis)] - p[static_cast<std::size_t>(axis)];
    if (diff < 0.0) {
      query(lo, mid, axis ^ 1, q, best);
      if (diff * diff < best) query(mid + 1, hi, axis ^ 1, q, best);
    } else {
      query(mid + 1, hi, axis ^ 1, q, best);
      if (diff * diff < best) query(lo, mid, axis ^ 1, q, best);
    }
  }

  const std::vector<Point2>& pts_;
  std::vector<std::size_t> order_;
};

inline double directed_hausdorff_sq(const std::vector<Point2>& from, const KdTree2& to) {
  double worst = 0.0;
  for (const Point2& p : from) worst = std::max(worst, to.min_squared_dist(p));
  return worst;
}

}  // namespace detail

// Symmetric Hausdorff distance max(sup_a inf_b, sup_b inf_a) in the units of
// the input coordinates (pixels, for mask boundaries).
inline double hausdorff(const std::vector<Point2>& a, const std::vector<Point2>& b) {
  if (a.empty() || b.empty()) throw EmptyRegionError("hausdorff: empty point set");
  detail::KdTree2 ta(a), tb(b);
  return std::sqrt(std::max(detail::directed_hausdorff_sq(a, tb), detail::directed_hausdorff_sq(b, ta)));
}

// Boundary pixel centres of a mask as (x, y) points in pixel units.
inline std::vector<Point2> boundary_points(const BinaryMask& mask) {
  const BinaryMask b = boundary_extract(mask);
  std::vector<Point2> pts;
  for (std::int64_t r = 0; r < b.height; ++r)
    for (std::int64_t c = 0; c < b.width; ++c)
      if (b.at(r, c)) pts.push_back({static_cast<double>(c), static_cast<double>(r)});
  return pts;
}

// ---------------------------------------------------------------------------
// Topology diagnostics
// ---------------------------------------------------------------------------

struct TopologyReport {
  std::int64_t components = 0;  // 4-connected foreground components
  std::int64_t holes = 0;       // 8-connected background regions not touching the border
};

inline TopologyReport topology_report(const BinaryMask& mask) {
  const std::int64_t h = mask.height, w = mask.width;
  std::vector<std::int8_t> visited(static_cast<std::size_t>(h * w), 0);
  std::vector<std::int64_t> stack;
  TopologyReport rep;

  auto flood = [&](std::int64_t start, bool fg, bool eight) {
    bool touches_border = false;
    stack.push_back(start);
    visited[static_cast<std::size_t>(start)] = 1;
    while (!stack.empty()) {
      const std::int64_t i = stack.back();
      stack.pop_back();
      const std::int64_t r = i / w, c = i % w;
      if (r == 0 || r == h - 1 || c == 0 || c == w - 1) touches_border = true;
      for (std::int64_t dr = -1; dr <= 1; ++dr)
        for (std::int64_t dc = -1; dc <= 1; ++dc) {
          if (dr == 0 && dc == 0) continue;
          if (!eight && dr != 0 && dc != 0) continue;
          const std::int64_t rr = r + dr, cc = c + dc;
          if (rr < 0 || rr >= h || cc < 0 || cc >= w) continue;
          const std::int64_t j = rr * w + cc;
          if (visited[static_cast<std::size_t>(j)]) continue;
          if ((mask.bits[static_cast<std::size_t>(j)] != 0) != fg) continue;
          visited[static_cast<std::size_t>(j)] = 1;
          stack.push_back(j);
        }
    }
    return touches_border;
  };

  for (std::int64_t i = 0; i < h * w; ++i)
    if (!visited[static_cast<std::size_t>(i)] && mask.bits[static_cast<std::size_t>(i)]) {
      flood(i, true, false);
      ++rep.components;
    }
  for (std::int64_t i = 0; i < h * w; ++i)
    if (!visited[static_cast<std::size_t>(i)] && !mask.bits[static_cast<std::size_t>(i)]) {
      if (!flood(i, false, true)) ++rep.holes;
    }
  return rep;
}

}  // namespace cg
