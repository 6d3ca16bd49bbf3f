#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "gradcheck.hpp"
#include "nwcrf/crf_classic.hpp"
#include "nwcrf/window.hpp"

using namespace nwcrf;
using nwcrf::testing::random_tensor;

namespace {

GridGraph random_grid(int64_t rows, int64_t cols, uint64_t seed) {
  Rng rng(seed);
  GridGraph g;
  g.rows = rows;
  g.cols = cols;
  g.values = random_tensor({rows, cols}, rng, 0.0, 5.0);
  g.colors = random_tensor({rows, cols, 3}, rng, 0.0, 1.0);
  return g;
}

// Brute-force ordered same-window pair count over an actual partition.
int64_t enumerate_pairs(const WindowPartition& p) {
  int64_t count = 0;
  for (const auto& nodes : p.window_nodes)
    for (int64_t a : nodes)
      for (int64_t b : nodes)
        if (a >= 0 && b >= 0 && a != b) ++count;
  return count;
}

}  // namespace

TEST(UnaryClassic, LogCases) {
  Tensor prob({1, 3}, {1.0, std::exp(-1.0), 0.5});
  Tensor e = unary_energy_classic(prob);
  EXPECT_DOUBLE_EQ(e[0], 0.0);
  EXPECT_NEAR(e[1], 1.0, 1e-15);
  EXPECT_NEAR(e[2], 0.6931471805599453, 1e-15);
}

TEST(UnaryClassic, NonpositiveProbability) {
  EXPECT_THROW(unary_energy_classic(Tensor({1, 1}, {0.0})), DomainError);
  EXPECT_THROW(unary_energy_classic(Tensor({1, 1}, {-0.2})), DomainError);
}

TEST(PairwiseClassic, DiagonalAndAgreementVanish) {
  GridGraph g = random_grid(3, 3, 1);
  ClassicCrfParams params;
  EXPECT_DOUBLE_EQ(pairwise_energy_classic(g, params, 4, 4), 0.0);
  g.values[1] = g.values[2];
  EXPECT_DOUBLE_EQ(pairwise_energy_classic(g, params, 1, 2), 0.0);
}

TEST(PairwiseClassic, DirectEvaluation) {
  // |dx| = 1, ||dI|| = 2, ||dp|| = 2, sigma = 1  ->  e^-1 * e^-1
  GridGraph g;
  g.rows = 1;
  g.cols = 3;
  g.values = Tensor({1, 3}, {0.0, 0.0, 1.0});
  g.colors = Tensor({1, 3, 3});
  g.colors.at(0, 2, 0) = 2.0;  // color distance 2 between nodes 0 and 2
  ClassicCrfParams params{1.0};
  double e = pairwise_energy_classic(g, params, 0, 2);
  EXPECT_NEAR(e, std::exp(-2.0), 1e-15);
  EXPECT_NEAR(e, 0.1353352832366127, 1e-15);
}

TEST(PairwiseClassic, SymmetricZeroDiagonal) {
  GridGraph g = random_grid(4, 3, 2);
  ClassicCrfParams params{0.8};
  for (int64_t i = 0; i < g.node_count(); ++i) {
    EXPECT_DOUBLE_EQ(pairwise_energy_classic(g, params, i, i), 0.0);
    for (int64_t j = 0; j < g.node_count(); ++j)
      EXPECT_DOUBLE_EQ(pairwise_energy_classic(g, params, i, j),
                       pairwise_energy_classic(g, params, j, i));
  }
}

TEST(PairwiseClassic, SquaredNormSwitch) {
  GridGraph g = random_grid(2, 2, 3);
  ClassicCrfParams printed{1.3, false};
  ClassicCrfParams squared{1.3, true};
  // positions (0,0) and (1,1): distance sqrt(2), squared 2
  double d2 = 2.0;
  double ratio = pairwise_energy_classic(g, squared, 0, 3) /
                 pairwise_energy_classic(g, printed, 0, 3);
  double color_sq = 0.0;
  for (int64_t c = 0; c < 3; ++c) {
    double d = g.colors.at(0, 0, c) - g.colors.at(1, 1, c);
    color_sq += d * d;
  }
  double denom = 2.0 * 1.3 * 1.3;
  double expected =
      std::exp(-(color_sq + d2) / denom) / std::exp(-(std::sqrt(color_sq) + std::sqrt(d2)) / denom);
  EXPECT_NEAR(ratio, expected, 1e-12);
}

TEST(TotalEnergy, AgreementLeavesOnlyUnary) {
  GridGraph g = random_grid(3, 3, 4);
  g.values = Tensor::full({3, 3}, 2.5);
  Tensor unary = Tensor::full({3, 3}, 0.7);
  ClassicCrfParams params;
  EXPECT_NEAR(total_energy(g, params, &unary), 9 * 0.7, 1e-12);
}

TEST(TotalEnergy, WholeGraphWindowEqualsDense) {
  GridGraph g = random_grid(3, 3, 5);
  ClassicCrfParams params{0.9};
  WindowPartition whole = partition_windows(3, 3, 3, false);
  double dense = total_energy(g, params);
  double windowed = total_energy(g, params, nullptr, &whole);
  EXPECT_NEAR(windowed, dense, 1e-12 * std::abs(dense));
}

TEST(TotalEnergy, SingletonWindowsKillPairTerm) {
  GridGraph g = random_grid(3, 3, 6);
  ClassicCrfParams params;
  WindowPartition singles = partition_windows(3, 3, 1, false);
  EXPECT_DOUBLE_EQ(total_energy(g, params, nullptr, &singles), 0.0);
}

TEST(TotalEnergy, PartitionExtentMismatch) {
  GridGraph g = random_grid(3, 3, 7);
  ClassicCrfParams params;
  WindowPartition wrong = partition_windows(4, 4, 2, false);
  EXPECT_THROW(total_energy(g, params, nullptr, &wrong), ShapeError);
}

TEST(CountEdges, DirectEvaluations) {
  EXPECT_EQ(count_pairwise_edges(4, 4, 2, false), 48);
  EXPECT_EQ(count_pairwise_edges(4, 4, 4, true), 240);
  // N^2 == hw: equality of the two modes
  EXPECT_EQ(count_pairwise_edges(4, 4, 4, false), count_pairwise_edges(4, 4, 4, true));
}

TEST(CountEdges, NondividingWindowRejected) {
  EXPECT_THROW(count_pairwise_edges(4, 4, 3, false), ContractError);
  EXPECT_THROW(count_pairwise_edges(4, 4, 5, false), ContractError);
}

TEST(CountEdges, MatchesBruteForceEnumeration) {
  for (int64_t h = 2; h <= 8; ++h)
    for (int64_t w = 2; w <= 8; ++w)
      for (int64_t n = 1; n <= std::min(h, w); ++n) {
        if (h % n != 0 || w % n != 0) continue;
        WindowPartition p = partition_windows(h, w, n, false);
        EXPECT_EQ(count_pairwise_edges(h, w, n, false), enumerate_pairs(p))
            << "h=" << h << " w=" << w << " n=" << n;
        EXPECT_LE(count_pairwise_edges(h, w, n, false), count_pairwise_edges(h, w, n, true));
        if (n * n == h * w)
          EXPECT_EQ(count_pairwise_edges(h, w, n, false), count_pairwise_edges(h, w, n, true));
      }
}

TEST(Partition, ExactTilingNoPadding) {
  WindowPartition p = partition_windows(4, 4, 2, false);
  EXPECT_EQ(p.window_count, 4);
  EXPECT_EQ(p.invalid_slots(), 0);
  for (const auto& nodes : p.window_nodes)
    for (int64_t idx : nodes) EXPECT_GE(idx, 0);
}

TEST(Partition, PaddedGridEnumeration) {
  WindowPartition p = partition_windows(5, 5, 2, false);
  EXPECT_EQ(p.padded_rows, 6);
  EXPECT_EQ(p.padded_cols, 6);
  EXPECT_EQ(p.window_count, 9);
  EXPECT_EQ(p.invalid_slots(), 11);
}

TEST(Partition, EveryNodeExactlyOneWindow) {
  for (bool shift : {false, true})
    for (auto [h, w, n] : {std::tuple<int64_t, int64_t, int64_t>{4, 4, 2},
                           {5, 7, 3},
                           {14, 14, 7},
                           {1, 1, 7},
                           {9, 4, 4}}) {
      WindowPartition p = partition_windows(h, w, n, shift);
      std::vector<int> seen(static_cast<size_t>(h * w), 0);
      for (const auto& nodes : p.window_nodes)
        for (int64_t idx : nodes)
          if (idx >= 0) ++seen[static_cast<size_t>(idx)];
      for (int count : seen) EXPECT_EQ(count, 1);
      // scatter index agrees with window contents
      for (int64_t node = 0; node < h * w; ++node) {
        int64_t s = p.scatter_index[static_cast<size_t>(node)];
        ASSERT_GE(s, 0);
        EXPECT_EQ(p.window_nodes[static_cast<size_t>(s / (n * n))][static_cast<size_t>(s % (n * n))],
                  node);
      }
    }
}

TEST(Partition, ShiftJoinsBoundaryNeighbors) {
  // in the shifted 4x4 / N=2 tiling, nodes (0,1) and (0,2) share a window
  // although the unshifted tiling separates them
  WindowPartition unshifted = partition_windows(4, 4, 2, false);
  WindowPartition shifted = partition_windows(4, 4, 2, true);
  auto window_of = [](const WindowPartition& p, int64_t node) {
    return p.scatter_index[static_cast<size_t>(node)] / (p.window * p.window);
  };
  EXPECT_NE(window_of(unshifted, 1), window_of(unshifted, 2));
  EXPECT_EQ(window_of(shifted, 1), window_of(shifted, 2));
}

TEST(Partition, ShiftRepairsAllAdjacentPairs) {
  // every 4-adjacent pair shares a window in at least one of the two tilings
  for (auto [h, w, n] : {std::tuple<int64_t, int64_t, int64_t>{14, 14, 7}, {8, 8, 2}, {6, 9, 3}}) {
    WindowPartition reg = partition_windows(h, w, n, false);
    WindowPartition shf = partition_windows(h, w, n, true);
    auto same_window = [n](const WindowPartition& p, int64_t a, int64_t b) {
      return p.scatter_index[static_cast<size_t>(a)] / (n * n) ==
             p.scatter_index[static_cast<size_t>(b)] / (n * n);
    };
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        if (x + 1 < w) {
          int64_t a = y * w + x, b = y * w + x + 1;
          EXPECT_TRUE(same_window(reg, a, b) || same_window(shf, a, b))
              << "horizontal pair (" << y << "," << x << ")";
        }
        if (y + 1 < h) {
          int64_t a = y * w + x, b = (y + 1) * w + x;
          EXPECT_TRUE(same_window(reg, a, b) || same_window(shf, a, b))
              << "vertical pair (" << y << "," << x << ")";
        }
      }
  }
}

TEST(ShiftedMask, UnshiftedPartitionRejected) {
  WindowPartition p = partition_windows(4, 4, 2, false);
  EXPECT_THROW(shifted_mask(p), ContractError);
}

TEST(ShiftedMask, InteriorWindowsFullyValid) {
  WindowPartition p = partition_windows(14, 14, 7, true);
  const auto& segs = shifted_mask(p);
  // all nodes valid on an exact tiling
  for (const auto& ws : segs)
    for (int s : ws) EXPECT_GE(s, 0);
  // the window holding the grid center has one uniform segment
  int64_t center = p.scatter_index[static_cast<size_t>(5 * 14 + 5)] / 49;
  std::set<int> ids(segs[static_cast<size_t>(center)].begin(),
                    segs[static_cast<size_t>(center)].end());
  EXPECT_EQ(ids.size(), 1u);
}

TEST(ShiftedMask, CornerWindowSeparatesOppositeEdges) {
  // cyclically shifted 4x4 / N=2: some window mixes nodes from opposite
  // image edges; their segments must differ so cross-edge pairs are masked
  WindowPartition p = partition_windows(4, 4, 2, true);
  const auto& segs = shifted_mask(p);
  bool found_cross_edge = false;
  for (size_t w = 0; w < p.window_nodes.size(); ++w) {
    const auto& nodes = p.window_nodes[w];
    for (size_t a = 0; a < nodes.size(); ++a)
      for (size_t b = 0; b < nodes.size(); ++b) {
        if (nodes[a] < 0 || nodes[b] < 0) continue;
        int64_t ya = nodes[a] / 4, yb = nodes[b] / 4;
        int64_t xa = nodes[a] % 4, xb = nodes[b] % 4;
        if (std::abs(ya - yb) == 3 || std::abs(xa - xb) == 3) {
          found_cross_edge = true;
          EXPECT_NE(segs[w][a], segs[w][b])
              << "nodes " << nodes[a] << " and " << nodes[b] << " must not exchange weight";
        }
      }
  }
  EXPECT_TRUE(found_cross_edge);
}
