#pragma once

#include <cmath>
#include <vector>

#include "nwcrf/tensor.hpp"

namespace nwcrf {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// First/second moment accumulators, parallel to a fixed parameter order.
struct AdamState {
  int64_t step = 0;
  std::vector<Tensor> m, v;
};

inline AdamState init_adam(const std::vector<Tensor*>& params) {
  AdamState s;
  s.m.reserve(params.size());
  s.v.reserve(params.size());
  for (const Tensor* p : params) {
    s.m.emplace_back(p->extents());
    s.v.emplace_back(p->extents());
  }
  return s;
}

// Standard bias-corrected update: p -= lr * m_hat / (sqrt(v_hat) + eps).
inline void adam_step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads,
                      AdamState& state, double lr, const AdamConfig& cfg = {}) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw ShapeError("adam_step: parameter/gradient/state counts differ");
  for (size_t i = 0; i < params.size(); ++i)
    if (!params[i]->same_extents(*grads[i]))
      throw ShapeError("adam_step: gradient extents " + extents_str(grads[i]->extents()) +
                       " vs parameter " + extents_str(params[i]->extents()));
  state.step += 1;
  double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = *grads[i];
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    for (int64_t j = 0; j < p.numel(); ++j) {
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
      double mhat = m[j] / bc1;
      double vhat = v[j] / bc2;
      p[j] -= lr * mhat / (std::sqrt(vhat) + cfg.epsilon);
    }
  }
}

// Linear decay between the schedule endpoints.
inline double lr_at(int64_t step, int64_t total_steps, double lr_start, double lr_end) {
  if (step < 0 || step > total_steps) throw ContractError("lr_at: step outside [0, total]");
  if (total_steps == 0) return lr_start;
  double f = static_cast<double>(step) / static_cast<double>(total_steps);
  return lr_start + (lr_end - lr_start) * f;
}

}  // namespace nwcrf
