#pragma once

#include <cstdint>
#include <vector>

#include "nwcrf/errors.hpp"

namespace nwcrf {

// Assignment of a patch grid to non-overlapping N x N windows. The grid is
// padded up to multiples of N; shifted partitions move the window boundaries
// by (N/2, N/2) with cyclic wrapping, Swin style.
//
// Per window, slots are ordered row-major. Each slot carries the flat index
// of the real node it holds (-1 for padding) and a segment id: nodes may
// exchange attention weight only within equal segments, which keeps
// cyclically wrapped regions apart. Padding has segment -1.
struct WindowPartition {
  int64_t rows = 0, cols = 0;
  int64_t window = 0;
  int64_t shift_y = 0, shift_x = 0;
  int64_t padded_rows = 0, padded_cols = 0;
  int64_t window_count = 0;

  std::vector<std::vector<int64_t>> window_nodes;  // [k][N*N] flat node index or -1
  std::vector<std::vector<int>> window_segment;    // [k][N*N] segment id, -1 padding
  std::vector<int64_t> scatter_index;              // [rows*cols] -> w*N*N + slot

  bool shifted() const { return shift_y != 0 || shift_x != 0; }

  int64_t invalid_slots() const { return window_count * window * window - rows * cols; }
};

inline WindowPartition partition_windows(int64_t rows, int64_t cols, int64_t n, bool shift) {
  if (rows <= 0 || cols <= 0 || n <= 0)
    throw ContractError("partition_windows: nonpositive extents or window size");
  WindowPartition p;
  p.rows = rows;
  p.cols = cols;
  p.window = n;
  p.padded_rows = (rows + n - 1) / n * n;
  p.padded_cols = (cols + n - 1) / n * n;
  int64_t s = shift ? n / 2 : 0;
  p.shift_y = s;
  p.shift_x = s;
  int64_t wy = p.padded_rows / n, wx = p.padded_cols / n;
  p.window_count = wy * wx;
  p.window_nodes.assign(static_cast<size_t>(p.window_count),
                        std::vector<int64_t>(static_cast<size_t>(n * n), -1));
  p.window_segment.assign(static_cast<size_t>(p.window_count),
                          std::vector<int>(static_cast<size_t>(n * n), -1));
  p.scatter_index.assign(static_cast<size_t>(rows * cols), -1);

  for (int64_t y = 0; y < p.padded_rows; ++y) {
    for (int64_t x = 0; x < p.padded_cols; ++x) {
      int64_t ry = (y + s) % p.padded_rows;
      int64_t rx = (x + s) % p.padded_cols;
      int64_t w = (ry / n) * wx + rx / n;
      int64_t slot = (ry % n) * n + rx % n;
      bool valid = y < rows && x < cols;
      if (valid) {
        p.window_nodes[w][slot] = y * cols + x;
        // wrapped-row / wrapped-column bits form the segment id
        int seg = (y + s >= p.padded_rows ? 1 : 0) + (x + s >= p.padded_cols ? 2 : 0);
        p.window_segment[w][slot] = seg;
        p.scatter_index[y * cols + x] = w * n * n + slot;
      }
    }
  }
  return p;
}

// Segment ids of a shifted partition: wrapped and non-wrapped regions never
// share a segment, padding is -1. Meaningless for an unshifted partition.
inline const std::vector<std::vector<int>>& shifted_mask(const WindowPartition& p) {
  if (!p.shifted()) throw ContractError("shifted_mask: partition was built without shift");
  return p.window_segment;
}

}  // namespace nwcrf
