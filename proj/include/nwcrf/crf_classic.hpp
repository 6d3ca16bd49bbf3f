#pragma once

#include <cmath>
#include <cstdint>

#include "nwcrf/tensor.hpp"
#include "nwcrf/window.hpp"

namespace nwcrf {

// Patch grid with one scalar value, one RGB color and one integer position
// per node. Serves the hand-crafted energies below, which act as oracles and
// teaching references rather than trainable layers.
struct GridGraph {
  int64_t rows = 0, cols = 0;
  Tensor values;  // [rows x cols]
  Tensor colors;  // [rows x cols x 3]

  int64_t node_count() const { return rows * cols; }

  void validate() const {
    if (values.extents() != Extents{rows, cols})
      throw ShapeError("GridGraph: values extents " + extents_str(values.extents()));
    if (colors.extents() != Extents{rows, cols, 3})
      throw ShapeError("GridGraph: colors extents " + extents_str(colors.extents()));
  }
};

struct ClassicCrfParams {
  double sigma = 1.0;
  // The printed formula divides the plain Euclidean norm by 2*sigma^2; the
  // conventional bilateral kernel squares it. Default follows the print.
  bool squared_norms = false;

  void validate() const {
    if (!(sigma > 0.0)) throw DomainError("ClassicCrfParams: sigma must be positive");
  }
};

// Elementwise -log(prob); prob must be positive.
inline Tensor unary_energy_classic(const Tensor& prob) {
  Tensor out(prob.extents());
  for (int64_t i = 0; i < prob.numel(); ++i) {
    if (prob[i] <= 0.0)
      throw DomainError("unary_energy_classic: nonpositive probability " + std::to_string(prob[i]));
    out[i] = -std::log(prob[i]);
  }
  return out;
}

// mu(x_i,x_j) * ||x_i-x_j|| * exp(-||I_i-I_j||/(2 sigma^2)) * exp(-||p_i-p_j||/(2 sigma^2)),
// mu = 0 iff i == j. Nodes are flat row-major indices.
inline double pairwise_energy_classic(const GridGraph& g, const ClassicCrfParams& params,
                                      int64_t i, int64_t j) {
  params.validate();
  if (i < 0 || i >= g.node_count() || j < 0 || j >= g.node_count())
    throw ContractError("pairwise_energy_classic: node index out of range");
  if (i == j) return 0.0;
  int64_t iy = i / g.cols, ix = i % g.cols;
  int64_t jy = j / g.cols, jx = j % g.cols;

  double value_diff = std::abs(g.values[i] - g.values[j]);

  double color_sq = 0.0;
  for (int64_t c = 0; c < 3; ++c) {
    double d = g.colors.at(iy, ix, c) - g.colors.at(jy, jx, c);
    color_sq += d * d;
  }
  double pos_sq = static_cast<double>((iy - jy) * (iy - jy) + (ix - jx) * (ix - jx));

  double color_arg = params.squared_norms ? color_sq : std::sqrt(color_sq);
  double pos_arg = params.squared_norms ? pos_sq : std::sqrt(pos_sq);
  double denom = 2.0 * params.sigma * params.sigma;
  return value_diff * std::exp(-color_arg / denom) * std::exp(-pos_arg / denom);
}

// Total energy: sum of the given unary map (zeros when omitted) plus the
// pairwise term over ordered pairs of distinct nodes -- all pairs when no
// partition is given, same-window pairs otherwise.
inline double total_energy(const GridGraph& g, const ClassicCrfParams& params,
                           const Tensor* unary = nullptr,
                           const WindowPartition* partition = nullptr) {
  g.validate();
  params.validate();
  double total = 0.0;
  if (unary) {
    if (unary->extents() != Extents{g.rows, g.cols})
      throw ShapeError("total_energy: unary extents " + extents_str(unary->extents()) +
                       " vs grid (" + std::to_string(g.rows) + "," + std::to_string(g.cols) + ")");
    for (int64_t i = 0; i < unary->numel(); ++i) total += (*unary)[i];
  }
  if (!partition) {
    int64_t n = g.node_count();
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < n; ++j)
        if (i != j) total += pairwise_energy_classic(g, params, i, j);
    return total;
  }
  if (partition->rows != g.rows || partition->cols != g.cols)
    throw ShapeError("total_energy: partition covers (" + std::to_string(partition->rows) + "," +
                     std::to_string(partition->cols) + "), grid is (" + std::to_string(g.rows) +
                     "," + std::to_string(g.cols) + ")");
  for (const auto& nodes : partition->window_nodes)
    for (int64_t a : nodes)
      for (int64_t b : nodes)
        if (a >= 0 && b >= 0 && a != b) total += pairwise_energy_classic(g, params, a, b);
  return total;
}

// Exact ordered-pair counts: hw(hw-1) fully connected, hw(N^2-1) windowed.
// Window accounting assumes an exact tiling.
inline int64_t count_pairwise_edges(int64_t rows, int64_t cols, int64_t n, bool fully_connected) {
  if (rows <= 0 || cols <= 0 || n <= 0)
    throw ContractError("count_pairwise_edges: nonpositive arguments");
  if (n > std::min(rows, cols))
    throw ContractError("count_pairwise_edges: window " + std::to_string(n) +
                        " exceeds grid (" + std::to_string(rows) + "," + std::to_string(cols) + ")");
  int64_t hw = rows * cols;
  if (fully_connected) return hw * (hw - 1);
  if (rows % n != 0 || cols % n != 0)
    throw ContractError("count_pairwise_edges: window " + std::to_string(n) +
                        " does not tile (" + std::to_string(rows) + "," + std::to_string(cols) +
                        ") exactly");
  return hw * (n * n - 1);
}

}  // namespace nwcrf
