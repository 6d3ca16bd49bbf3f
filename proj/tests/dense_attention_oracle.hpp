#pragma once

// Independent all-pairs attention reference: plain loops over every node
// pair, no tape, no windowing machinery. Used to check the windowed stage on
// grids covered by a single window.

#include <cmath>
#include <vector>

#include "nwcrf/neural_crf.hpp"
#include "nwcrf/tensor.hpp"

namespace nwcrf::testing {

// features [n x C] (n = grid*grid), prediction [n x Cx], table [(2g-1)^2 x heads].
inline Tensor dense_attention_reference(const Tensor& features, const Tensor& prediction,
                                        const Tensor& query_weight, const Tensor& key_weight,
                                        const Tensor& table, int64_t grid,
                                        const CrfStageConfig& cfg) {
  int64_t n = grid * grid;
  int64_t c = features.extent(1);
  int64_t dh = cfg.head_dim;
  int64_t span = 2 * grid - 1;

  Tensor f = features;
  if (cfg.norm_features) {
    for (int64_t i = 0; i < n; ++i) {
      double mean = 0.0;
      for (int64_t j = 0; j < c; ++j) mean += f.at(i, j);
      mean /= static_cast<double>(c);
      double var = 0.0;
      for (int64_t j = 0; j < c; ++j) var += (f.at(i, j) - mean) * (f.at(i, j) - mean);
      var /= static_cast<double>(c);
      double inv = 1.0 / std::sqrt(var + 1e-5);
      for (int64_t j = 0; j < c; ++j) f.at(i, j) = (f.at(i, j) - mean) * inv;
    }
  }

  Tensor out({n, cfg.pred_channels()});
  for (int64_t h = 0; h < cfg.heads; ++h) {
    std::vector<double> q(static_cast<size_t>(n * dh)), k(static_cast<size_t>(n * dh));
    for (int64_t i = 0; i < n; ++i)
      for (int64_t d = 0; d < dh; ++d) {
        double qs = 0.0, ks = 0.0;
        for (int64_t j = 0; j < c; ++j) {
          qs += f.at(i, j) * query_weight.at(j, h * dh + d);
          ks += f.at(i, j) * key_weight.at(j, h * dh + d);
        }
        q[static_cast<size_t>(i * dh + d)] = qs;
        k[static_cast<size_t>(i * dh + d)] = ks;
      }
    double sc = cfg.scale_logits ? 1.0 / std::sqrt(static_cast<double>(dh)) : 1.0;
    for (int64_t a = 0; a < n; ++a) {
      std::vector<double> logit(static_cast<size_t>(n));
      double mx = -1e300;
      for (int64_t b = 0; b < n; ++b) {
        double dot = 0.0;
        for (int64_t d = 0; d < dh; ++d)
          dot += q[static_cast<size_t>(a * dh + d)] * k[static_cast<size_t>(b * dh + d)];
        int64_t dy = b / grid - a / grid + grid - 1;
        int64_t dx = b % grid - a % grid + grid - 1;
        logit[static_cast<size_t>(b)] = dot * sc + table.at(dy * span + dx, h);
        mx = std::max(mx, logit[static_cast<size_t>(b)]);
      }
      double sum = 0.0;
      for (int64_t b = 0; b < n; ++b) {
        logit[static_cast<size_t>(b)] = std::exp(logit[static_cast<size_t>(b)] - mx);
        sum += logit[static_cast<size_t>(b)];
      }
      for (int64_t d = 0; d < dh; ++d) {
        double acc = 0.0;
        for (int64_t b = 0; b < n; ++b)
          acc += logit[static_cast<size_t>(b)] / sum * prediction.at(b, h * dh + d);
        out.at(a, h * dh + d) = acc;
      }
    }
  }
  return out;
}

}  // namespace nwcrf::testing
