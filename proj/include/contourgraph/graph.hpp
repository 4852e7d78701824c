// SPDX-License-Identifier: Apache-2.0
//
// Contour graphs (per-class closed rings), the scaled normalized Laplacian,
// Chebyshev spectral graph convolution and midpoint unpooling.

#pragma once

#include <cstdint>
#include <tuple>
#include <utility>
#include <vector>

#include "contourgraph/tensor.hpp"

namespace cg {

// ---------------------------------------------------------------------------
// Sparse symmetric matrix (CSR)
// ---------------------------------------------------------------------------

class SparseMatrix {
 public:
  SparseMatrix() = default;

  static SparseMatrix from_triplets(std::int64_t n,
                                    std::vector<std::tuple<std::int64_t, std::int64_t, double>> trip) {
    SparseMatrix m;
    m.n_ = n;
    std::sort(trip.begin(), trip.end());
    m.row_ptr_.assign(static_cast<std::size_t>(n) + 1, 0);
    for (auto& [r, c, v] : trip) {
      if (r < 0 || r >= n || c < 0 || c >= n) throw ShapeError("sparse triplet out of range");
      (void)v;
      ++m.row_ptr_[static_cast<std::size_t>(r) + 1];
    }
    for (std::int64_t r = 0; r < n; ++r) m.row_ptr_[static_cast<std::size_t>(r) + 1] += m.row_ptr_[static_cast<std::size_t>(r)];
    m.col_.resize(trip.size());
    m.val_.resize(trip.size());
    std::size_t i = 0;
    for (auto& [r, c, v] : trip) {
      (void)r;
      m.col_[i] = c;
      m.val_[i] = v;
      ++i;
    }
    return m;
  }

  std::int64_t size() const { return n_; }
  std::int64_t nnz() const { return static_cast<std::int64_t>(val_.size()); }

  double at(std::int64_t r, std::int64_t c) const {
    for (std::size_t i = row_ptr_[static_cast<std::size_t>(r)]; i < row_ptr_[static_cast<std::size_t>(r) + 1]; ++i)
      if (col_[i] == c) return val_[i];
    return 0.0;
  }

  // y[n,f] = M * x[n,f], row-major dense operands.
  void matmul_dense(const double* x, std::int64_t f, double* y) const {
    std::fill_n(y, n_ * f, 0.0);
    for (std::int64_t r = 0; r < n_; ++r) {
      double* yr = y + r * f;
      for (std::size_t i = row_ptr_[static_cast<std::size_t>(r)]; i < row_ptr_[static_cast<std::size_t>(r) + 1]; ++i) {
        const double v = val_[i];
        const double* xr = x + col_[i] * f;
        for (std::int64_t j = 0; j < f; ++j) yr[j] += v * xr[j];
      }
    }
  }

  std::vector<double> row_sums() const {
    std::vector<double> d(static_cast<std::size_t>(n_), 0.0);
    for (std::int64_t r = 0; r < n_; ++r)
      for (std::size_t i = row_ptr_[static_cast<std::size_t>(r)]; i < row_ptr_[static_cast<std::size_t>(r) + 1]; ++i)
        d[static_cast<std::size_t>(r)] += val_[i];
    return d;
  }

  bool is_symmetric(double tol = 0.0) const {
    for (std::int64_t r = 0; r < n_; ++r)
      for (std::size_t i = row_ptr_[static_cast<std::size_t>(r)]; i < row_ptr_[static_cast<std::size_t>(r) + 1]; ++i)
        if (std::abs(at(col_[i], r) - val_[i]) > tol) return false;
    return true;
  }

 private:
  std::int64_t n_ = 0;
  std::vector<std::size_t> row_ptr_;
  std::vector<std::int64_t> col_;
  std::vector<double> val_;
};

// ---------------------------------------------------------------------------
// ContourGraph
// ---------------------------------------------------------------------------

// Disjoint closed rings, one per anatomical class. Node indices are global;
// cycles list them in polygon order.
struct ContourGraph {
  std::int64_t num_nodes = 0;
  std::vector<std::vector<std::int64_t>> cycles;
  std::vector<int> class_of_node;

  static ContourGraph from_cycles(std::vector<std::vector<std::int64_t>> cycles_in) {
    ContourGraph g;
    g.cycles = std::move(cycles_in);
    std::int64_t max_node = -1;
    for (const auto& ring : g.cycles)
      for (std::int64_t v : ring) max_node = std::max(max_node, v);
    g.num_nodes = max_node + 1;
    g.class_of_node.assign(static_cast<std::size_t>(g.num_nodes), -1);
    for (std::size_t c = 0; c < g.cycles.size(); ++c)
      for (std::int64_t v : g.cycles[c]) g.class_of_node[static_cast<std::size_t>(v)] = static_cast<int>(c);
    g.validate();
    return g;
  }

  // Ring edges as a symmetric binary adjacency with zero diagonal.
  SparseMatrix adjacency() const {
    std::vector<std::tuple<std::int64_t, std::int64_t, double>> trip;
    for (const auto& ring : cycles) {
      const std::size_t m = ring.size();
      for (std::size_t i = 0; i < m; ++i) {
        const std::int64_t a = ring[i], b = ring[(i + 1) % m];
        trip.emplace_back(a, b, 1.0);
        trip.emplace_back(b, a, 1.0);
      }
    }
    return SparseMatrix::from_triplets(num_nodes, std::move(trip));
  }

  void validate() const {
    std::vector<int> seen(static_cast<std::size_t>(num_nodes), 0);
    for (const auto& ring : cycles) {
      if (ring.size() < 3) throw ValueError("contour ring must have at least 3 nodes");
      for (std::int64_t v : ring) {
        if (v < 0 || v >= num_nodes) throw ValueError("ring node index out of range");
        if (seen[static_cast<std::size_t>(v)]++)
          throw ValueError("cycles must be disjoint; node " + std::to_string(v) + " repeated");
      }
    }
    for (std::int64_t v = 0; v < num_nodes; ++v)
      if (!seen[static_cast<std::size_t>(v)])
        throw ValueError("node " + std::to_string(v) + " belongs to no cycle");
  }
};

// ---------------------------------------------------------------------------
// Scaled normalized Laplacian
// ---------------------------------------------------------------------------

struct ScaledLaplacian {
  SparseMatrix mat;  // (2/lambda_max) * (I - D^{-1/2} A D^{-1/2}) - I
  double lambda_max = 2.0;
  std::int64_t size() const { return mat.size(); }
};

inline ScaledLaplacian scaled_laplacian(const SparseMatrix& adjacency, double lambda_max = 2.0) {
  const std::int64_t n = adjacency.size();
  const double scale = 2.0 / lambda_max;
  const std::vector<double> deg = adjacency.row_sums();
  std::vector<double> dinv_sqrt(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i)
    dinv_sqrt[static_cast<std::size_t>(i)] =
        deg[static_cast<std::size_t>(i)] > 0.0 ? 1.0 / std::sqrt(deg[static_cast<std::size_t>(i)]) : 0.0;

  std::vector<std::tuple<std::int64_t, std::int64_t, double>> trip;
  // diagonal: scale * 1 - 1 (L_ii = 1 for every node, isolated ones included)
  for (std::int64_t i = 0; i < n; ++i) {
    const double d = scale - 1.0;
    if (d != 0.0) trip.emplace_back(i, i, d);
  }
  for (std::int64_t r = 0; r < n; ++r)
    for (std::int64_t c = 0; c < n; ++c) {
      const double a = adjacency.at(r, c);
      if (a != 0.0 && r != c)
        trip.emplace_back(r, c, -scale * a * dinv_sqrt[static_cast<std::size_t>(r)] * dinv_sqrt[static_cast<std::size_t>(c)]);
    }
  ScaledLaplacian lap;
  lap.mat = SparseMatrix::from_triplets(n, std::move(trip));
  lap.lambda_max = lambda_max;
  return lap;
}

inline ScaledLaplacian scaled_laplacian(const ContourGraph& g, double lambda_max = 2.0) {
  return scaled_laplacian(g.adjacency(), lambda_max);
}

// ---------------------------------------------------------------------------
// Differentiable sparse-dense product: y = L̂ · X
// ---------------------------------------------------------------------------

inline Tensor graph_matmul(const ScaledLaplacian& lap, const Tensor& x) {
  if (x.rank() != 2 || x.dim(0) != lap.size())
    throw ShapeError("graph_matmul: node features " + shape_str(x.shape()) + " do not match " +
                     std::to_string(lap.size()) + " graph nodes");
  const std::int64_t f = x.dim(1);
  Tensor y = Tensor::zeros({lap.size(), f});
  lap.mat.matmul_dense(x.data().data(), f, y.data().data());
  if (detail::should_record({&x})) {
    auto xn = x.node(), yn = y.node();
    // symmetric operator: dX = L̂ · dY
    const SparseMatrix mat = lap.mat;
    detail::record_op(y, [xn, yn, mat, f] {
      if (yn->grad.empty() || !xn->requires_grad) return;
      std::vector<double> tmp(yn->grad.size());
      mat.matmul_dense(yn->grad.data(), f, tmp.data());
      auto& gx = xn->grad_buf();
      for (std::size_t i = 0; i < tmp.size(); ++i) gx[i] += tmp[i];
    });
  }
  debug_check_finite(y, "graph_matmul");
  return y;
}

// ---------------------------------------------------------------------------
// Chebyshev spectral convolution
// ---------------------------------------------------------------------------

inline constexpr int kMaxChebOrder = 16;

struct ChebLayer {
  int order = 1;              // K
  std::vector<Tensor> theta;  // K matrices, each [f_in, f_out]
  bool relu_activation = true;

  std::int64_t f_in() const { return theta.front().dim(0); }
  std::int64_t f_out() const { return theta.front().dim(1); }

  static ChebLayer glorot(int order, std::int64_t f_in, std::int64_t f_out, bool relu_activation,
                          Rng& rng) {
    if (order < 1 || order > kMaxChebOrder)
      throw ConfigError("Chebyshev order K=" + std::to_string(order) + " outside [1, " +
                        std::to_string(kMaxChebOrder) + "]");
    ChebLayer layer;
    layer.order = order;
    layer.relu_activation = relu_activation;
    const double limit = std::sqrt(6.0 / static_cast<double>(f_in + f_out));
    for (int k = 0; k < order; ++k) {
      Tensor t = Tensor::zeros({f_in, f_out}, true);
      for (double& v : t.data()) v = rng.uniform(-limit, limit);
      layer.theta.push_back(t);
    }
    return layer;
  }
};

// X' = sigma( sum_{k=1..K} Z^(k) Theta^(k) ) with
// Z^(1) = X, Z^(2) = L̂ X, Z^(k) = 2 L̂ Z^(k-1) - Z^(k-2).
inline Tensor chebconv(const Tensor& x, const ScaledLaplacian& lap, const ChebLayer& layer) {
  if (layer.order < 1 || layer.order > kMaxChebOrder)
    throw ConfigError("Chebyshev order K=" + std::to_string(layer.order) + " outside [1, " +
                      std::to_string(kMaxChebOrder) + "]");
  if (static_cast<int>(layer.theta.size()) != layer.order)
    throw ConfigError("ChebLayer has " + std::to_string(layer.theta.size()) + " weight matrices for K=" +
                      std::to_string(layer.order));
  if (x.rank() != 2 || x.dim(1) != layer.f_in())
    throw ShapeError("chebconv: features " + shape_str(x.shape()) + " do not match f_in=" +
                     std::to_string(layer.f_in()));

  Tensor acc = matmul(x, layer.theta[0]);
  Tensor z_prev2 = x;
  Tensor z_prev;
  if (layer.order >= 2) {
    z_prev = graph_matmul(lap, x);
    acc = add(acc, matmul(z_prev, layer.theta[1]));
  }
  for (int k = 3; k <= layer.order; ++k) {
    Tensor z = sub(mul(graph_matmul(lap, z_prev), 2.0), z_prev2);
    acc = add(acc, matmul(z, layer.theta[static_cast<std::size_t>(k - 1)]));
    z_prev2 = z_prev;
    z_prev = z;
  }
  return layer.relu_activation ? relu(acc) : acc;
}

// ---------------------------------------------------------------------------
// Midpoint unpooling
// ---------------------------------------------------------------------------

// Row plan for doubling a ring graph: original nodes keep their indices,
// midpoint node old_n + e is inserted on the e-th ring edge. Output cycles
// interleave originals and midpoints.
struct UnpoolPlan {
  std::int64_t old_nodes = 0;
  std::int64_t new_nodes = 0;
  std::vector<std::pair<std::int64_t, std::int64_t>> edge_endpoints;  // per midpoint node
  ContourGraph graph;  // the doubled graph
};

inline UnpoolPlan build_unpool_plan(const ContourGraph& g) {
  g.validate();
  UnpoolPlan plan;
  plan.old_nodes = g.num_nodes;
  std::vector<std::vector<std::int64_t>> new_cycles;
  std::int64_t next_id = g.num_nodes;
  for (const auto& ring : g.cycles) {
    std::vector<std::int64_t> out;
    out.reserve(ring.size() * 2);
    for (std::size_t i = 0; i < ring.size(); ++i) {
      const std::int64_t a = ring[i], b = ring[(i + 1) % ring.size()];
      out.push_back(a);
      out.push_back(next_id);
      plan.edge_endpoints.emplace_back(a, b);
      ++next_id;
    }
    new_cycles.push_back(std::move(out));
  }
  plan.new_nodes = next_id;
  plan.graph = ContourGraph::from_cycles(std::move(new_cycles));
  return plan;
}

// [N, f] -> [2N, f]: originals copied, midpoints take the mean of their two
// ring neighbours. Differentiable.
inline Tensor unpool_rows(const Tensor& x, const UnpoolPlan& plan) {
  if (x.rank() != 2 || x.dim(0) != plan.old_nodes)
    throw ShapeError("unpool_rows: expected " + std::to_string(plan.old_nodes) + " rows, got " +
                     shape_str(x.shape()));
  const std::int64_t f = x.dim(1);
  Tensor y = Tensor::zeros({plan.new_nodes, f});
  std::copy_n(x.data().begin(), plan.old_nodes * f, y.data().begin());
  for (std::size_t e = 0; e < plan.edge_endpoints.size(); ++e) {
    const auto [a, b] = plan.edge_endpoints[e];
    double* dst = y.data().data() + (plan.old_nodes + static_cast<std::int64_t>(e)) * f;
    const double* pa = x.data().data() + a * f;
    const double* pb = x.data().data() + b * f;
    for (std::int64_t j = 0; j < f; ++j) dst[j] = 0.5 * (pa[j] + pb[j]);
  }
  if (detail::should_record({&x})) {
    auto xn = x.node(), yn = y.node();
    const auto edges = plan.edge_endpoints;
    const std::int64_t old_n = plan.old_nodes;
    detail::record_op(y, [xn, yn, edges, old_n, f] {
      if (yn->grad.empty() || !xn->requires_grad) return;
      auto& gx = xn->grad_buf();
      for (std::int64_t i = 0; i < old_n * f; ++i) gx[i] += yn->grad[i];
      for (std::size_t e = 0; e < edges.size(); ++e) {
        const auto [a, b] = edges[e];
        const double* src = yn->grad.data() + (old_n + static_cast<std::int64_t>(e)) * f;
        for (std::int64_t j = 0; j < f; ++j) {
          gx[a * f + j] += 0.5 * src[j];
          gx[b * f + j] += 0.5 * src[j];
        }
      }
    });
  }
  return y;
}

struct UnpoolResult {
  Tensor points;    // [2N, 2]
  Tensor features;  // [2N, f]
  ContourGraph graph;
};

inline UnpoolResult unpool(const Tensor& points, const Tensor& features, const ContourGraph& g) {
  const UnpoolPlan plan = build_unpool_plan(g);
  UnpoolResult out;
  out.points = unpool_rows(points, plan);
  out.features = unpool_rows(features, plan);
  out.graph = plan.graph;
  return out;
}

}  // namespace cg
