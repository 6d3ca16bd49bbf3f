#pragma once

#include <cmath>
#include <cstdio>
#include <span>
#include <string>
#include <vector>

#include "nwcrf/autodiff.hpp"

namespace nwcrf {

// One training/evaluation sample: RGB image in [0,1], metric depth, and a
// validity mask (1 = trustworthy depth).
struct DepthSample {
  Tensor image;  // [H x W x 3]
  Tensor depth;  // [H x W], meters, > 0 where valid
  Tensor valid;  // [H x W], 0/1
};

struct LossConfig {
  double lambda = 0.85;  // variance factor
  double alpha = 10.0;   // scale constant

  void validate() const {
    if (lambda < 0.0 || lambda > 1.0) throw DomainError("LossConfig: lambda outside [0,1]");
    if (alpha <= 0.0) throw DomainError("LossConfig: alpha must be positive");
  }
};

// Scale-invariant log loss over valid pixels:
//   delta_i = log(pred_i) - log(target_i)
//   loss = alpha * sqrt( mean(delta^2) - lambda * mean(delta)^2 )
// Gradient flows into pred only.
inline Var silog_loss(Var pred, const Tensor& target, const Tensor& valid,
                      const LossConfig& cfg = {}) {
  cfg.validate();
  Tape& t = *pred.tape;
  const Tensor& pv = t.value(pred);
  require_same_extents(pv, target, "silog_loss: pred vs target");
  require_same_extents(pv, valid, "silog_loss: pred vs valid mask");

  double k = 0.0;
  for (int64_t i = 0; i < valid.numel(); ++i) {
    if (valid[i] == 0.0) continue;
    k += 1.0;
    if (pv[i] <= 0.0)
      throw DomainError("silog_loss: nonpositive prediction " + std::to_string(pv[i]) +
                        " on a valid pixel");
    if (target[i] <= 0.0)
      throw DomainError("silog_loss: nonpositive target " + std::to_string(target[i]) +
                        " on a valid pixel");
  }
  if (k < 1.0) throw ContractError("silog_loss: no valid pixels");

  // substitute 1 on invalid pixels so both logs are exactly zero there
  Tensor safe_log_target(target.extents());
  Tensor invalid_one(target.extents());
  for (int64_t i = 0; i < target.numel(); ++i) {
    safe_log_target[i] = valid[i] != 0.0 ? std::log(target[i]) : 0.0;
    invalid_one[i] = valid[i] != 0.0 ? 0.0 : 1.0;
  }
  Var pred_safe = add(mul(pred, t.constant(valid)), t.constant(invalid_one));
  Var delta = sub(log_elem(pred_safe), t.constant(safe_log_target));
  Var s1 = sum(delta);
  Var s2 = sum(mul(delta, delta));
  Var arg = sub(scale(s2, 1.0 / k), scale(mul(s1, s1), cfg.lambda / (k * k)));
  return scale(sqrt_clamped(arg), cfg.alpha);
}

struct MetricsReport {
  double abs_rel = 0, sq_rel = 0, rmse = 0, rmse_log = 0, log10 = 0;
  double silog = 0, irmse = 0;
  double d1 = 0, d2 = 0, d3 = 0;
};

// Standard depth-benchmark metric set. Predictions and ground truth are
// clamped to [min_depth, cap] on valid pixels first; the delta accuracies use
// a strict < 1.25^k comparison.
inline MetricsReport evaluate(const Tensor& pred, const DepthSample& sample, double cap,
                              double min_depth = 1e-3) {
  require_same_extents(pred, sample.depth, "evaluate: pred vs ground truth");
  require_same_extents(pred, sample.valid, "evaluate: pred vs valid mask");
  double n = 0;
  double abs_rel = 0, sq_rel = 0, se = 0, se_log = 0, l10 = 0, si_sum = 0, si_sq = 0, inv_se = 0;
  double d1 = 0, d2 = 0, d3 = 0;
  for (int64_t i = 0; i < pred.numel(); ++i) {
    if (sample.valid[i] == 0.0) continue;
    double p = std::min(cap, std::max(min_depth, pred[i]));
    double g = std::min(cap, std::max(min_depth, sample.depth[i]));
    n += 1.0;
    double diff = p - g;
    abs_rel += std::abs(diff) / g;
    sq_rel += diff * diff / g;
    se += diff * diff;
    double dl = std::log(p) - std::log(g);
    se_log += dl * dl;
    si_sum += dl;
    si_sq += dl * dl;
    l10 += std::abs(std::log10(p) - std::log10(g));
    double inv_diff = 1000.0 / p - 1000.0 / g;  // 1/km
    inv_se += inv_diff * inv_diff;
    double ratio = std::max(p / g, g / p);
    if (ratio < 1.25) d1 += 1.0;
    if (ratio < 1.25 * 1.25) d2 += 1.0;
    if (ratio < 1.25 * 1.25 * 1.25) d3 += 1.0;
  }
  if (n < 1.0) throw ContractError("evaluate: no valid pixels");
  MetricsReport r;
  r.abs_rel = abs_rel / n;
  r.sq_rel = sq_rel / n;
  r.rmse = std::sqrt(se / n);
  r.rmse_log = std::sqrt(se_log / n);
  r.log10 = l10 / n;
  double var = si_sq / n - (si_sum / n) * (si_sum / n);
  r.silog = 100.0 * std::sqrt(std::max(0.0, var));
  r.irmse = std::sqrt(inv_se / n);
  r.d1 = d1 / n;
  r.d2 = d2 / n;
  r.d3 = d3 / n;
  return r;
}

inline MetricsReport average(std::span<const MetricsReport> reports) {
  if (reports.empty()) throw ContractError("average: no reports");
  MetricsReport r;
  for (const MetricsReport& m : reports) {
    r.abs_rel += m.abs_rel;
    r.sq_rel += m.sq_rel;
    r.rmse += m.rmse;
    r.rmse_log += m.rmse_log;
    r.log10 += m.log10;
    r.silog += m.silog;
    r.irmse += m.irmse;
    r.d1 += m.d1;
    r.d2 += m.d2;
    r.d3 += m.d3;
  }
  double n = static_cast<double>(reports.size());
  r.abs_rel /= n;
  r.sq_rel /= n;
  r.rmse /= n;
  r.rmse_log /= n;
  r.log10 /= n;
  r.silog /= n;
  r.irmse /= n;
  r.d1 /= n;
  r.d2 /= n;
  r.d3 /= n;
  return r;
}

inline std::string metrics_csv_header() {
  return "abs_rel,sq_rel,rmse,rmse_log,log10,silog,irmse,d1,d2,d3";
}

inline std::string metrics_csv_row(const MetricsReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f", r.abs_rel,
                r.sq_rel, r.rmse, r.rmse_log, r.log10, r.silog, r.irmse, r.d1, r.d2, r.d3);
  return buf;
}

// Valid-masked average pooling of ground truth onto the 1/4-resolution
// training grid; a target cell is valid only when every covered pixel is.
inline std::pair<Tensor, Tensor> downsample_target(const DepthSample& sample, int64_t factor) {
  int64_t h = sample.depth.extent(0), w = sample.depth.extent(1);
  if (h % factor != 0 || w % factor != 0)
    throw ShapeError("downsample_target: extents not divisible by factor");
  int64_t oh = h / factor, ow = w / factor;
  Tensor target({oh, ow});
  Tensor valid({oh, ow});
  for (int64_t y = 0; y < oh; ++y)
    for (int64_t x = 0; x < ow; ++x) {
      double sum = 0.0, count = 0.0;
      bool all = true;
      for (int64_t dy = 0; dy < factor; ++dy)
        for (int64_t dx = 0; dx < factor; ++dx) {
          bool v = sample.valid.at(y * factor + dy, x * factor + dx) != 0.0;
          all = all && v;
          if (v) {
            sum += sample.depth.at(y * factor + dy, x * factor + dx);
            count += 1.0;
          }
        }
      target.at(y, x) = count > 0.0 ? sum / count : 0.0;
      valid.at(y, x) = all ? 1.0 : 0.0;
    }
  return {std::move(target), std::move(valid)};
}

// Nearest-neighbor upsampling of a rank-2 map (the evaluation path back to
// full resolution).
inline Tensor upsample_nearest(const Tensor& input, int64_t oh, int64_t ow) {
  if (input.rank() != 2) throw ShapeError("upsample_nearest: rank-2 input required");
  int64_t h = input.extent(0), w = input.extent(1);
  Tensor out({oh, ow});
  for (int64_t y = 0; y < oh; ++y)
    for (int64_t x = 0; x < ow; ++x) out.at(y, x) = input.at(y * h / oh, x * w / ow);
  return out;
}

}  // namespace nwcrf
