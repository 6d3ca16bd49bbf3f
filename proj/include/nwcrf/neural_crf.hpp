#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "nwcrf/layers.hpp"
#include "nwcrf/window.hpp"

namespace nwcrf {

// One CRF optimization stage: neural unary potential, multi-head window
// attention pairwise potential with relative position bias, and a two-layer
// optimization network that maps the stacked energies to the next prediction.
struct CrfStageConfig {
  int64_t heads = 1;
  int64_t head_dim = 8;
  int64_t window = 7;
  int64_t feat_channels = 8;
  int64_t mlp_ratio = 4;
  bool scale_logits = true;   // 1/sqrt(head_dim) on the attention logits
  bool norm_features = true;  // layer-normalize features before Q/K

  int64_t pred_channels() const { return heads * head_dim; }
  int64_t bias_rows() const { return (2 * window - 1) * (2 * window - 1); }
};

template <class T>
struct CrfStageParamsT {
  T query_weight;  // [C x heads*head_dim], per-head column blocks
  T key_weight;    // [C x heads*head_dim]
  T bias_table;    // [(2N-1)^2 x heads]
  ConvParamsT<T> unary;  // 3x3, C + Cx -> Cx
  LinearParamsT<T> opt1, opt2;  // optimization network: 2Cx -> ratio*Cx -> Cx
};

// Two successive optimizations per block: regular windows, then shifted
// windows consuming the first stage's output, each with its own parameters.
template <class T>
struct CrfBlockParamsT {
  CrfStageParamsT<T> regular;
  CrfStageParamsT<T> shifted;
};

using CrfStageParams = CrfStageParamsT<Tensor>;
using CrfStageVars = CrfStageParamsT<Var>;
using CrfBlockParams = CrfBlockParamsT<Tensor>;
using CrfBlockVars = CrfBlockParamsT<Var>;

inline CrfStageVars lift(Tape& t, const CrfStageParams& p) {
  return CrfStageVars{t.leaf(p.query_weight), t.leaf(p.key_weight), t.leaf(p.bias_table),
                      lift(t, p.unary), lift(t, p.opt1), lift(t, p.opt2)};
}
inline CrfBlockVars lift(Tape& t, const CrfBlockParams& p) {
  return CrfBlockVars{lift(t, p.regular), lift(t, p.shifted)};
}

inline CrfStageParams init_crf_stage(const CrfStageConfig& cfg, uint64_t seed,
                                     const std::string& name) {
  int64_t c = cfg.feat_channels, cx = cfg.pred_channels();
  CrfStageParams p;
  p.query_weight = init_weight({c, cx}, c, seed, name + ".wq");
  p.key_weight = init_weight({c, cx}, c, seed, name + ".wk");
  p.bias_table = Tensor({cfg.bias_rows(), cfg.heads});  // no positional preference at start
  p.unary = init_conv(3, c + cx, cx, seed, name + ".unary");
  p.opt1 = init_linear(2 * cx, cfg.mlp_ratio * cx, seed, name + ".opt1");
  p.opt2 = init_linear(cfg.mlp_ratio * cx, cx, seed, name + ".opt2");
  return p;
}

inline CrfBlockParams init_crf_block(const CrfStageConfig& cfg, uint64_t seed,
                                     const std::string& name) {
  return CrfBlockParams{init_crf_stage(cfg, seed, name + ".reg"),
                        init_crf_stage(cfg, seed, name + ".shf")};
}

template <class F>
void visit_params(CrfStageParams& p, const std::string& prefix, F&& f) {
  f(prefix + ".wq", p.query_weight);
  f(prefix + ".wk", p.key_weight);
  f(prefix + ".bias_table", p.bias_table);
  visit_params(p.unary, prefix + ".unary", f);
  visit_params(p.opt1, prefix + ".opt1", f);
  visit_params(p.opt2, prefix + ".opt2", f);
}

template <class F>
void visit_params(CrfBlockParams& p, const std::string& prefix, F&& f) {
  visit_params(p.regular, prefix + ".reg", f);
  visit_params(p.shifted, prefix + ".shf", f);
}

template <class F>
void visit_vars(CrfStageVars& p, F&& f) {
  f(p.query_weight);
  f(p.key_weight);
  f(p.bias_table);
  visit_vars(p.unary, f);
  visit_vars(p.opt1, f);
  visit_vars(p.opt2, f);
}

template <class F>
void visit_vars(CrfBlockVars& p, F&& f) {
  visit_vars(p.regular, f);
  visit_vars(p.shifted, f);
}

// Accounting mirror of the pairwise-edge counts: one logit slot per ordered
// in-window node pair, shared across heads.
struct AttentionStats {
  int64_t logit_entries = 0;
  int64_t windows = 0;
};

// Expands the learnable table B [(2N-1)^2 x heads] into one [N^2 x N^2] bias
// matrix per head: P_h[a][b] = B[(dy+N-1)*(2N-1) + (dx+N-1)][h] for the
// in-window offset (dy, dx) of slot b from slot a.
inline std::vector<Var> relative_bias_lookup(Var table, int64_t n) {
  Tape& t = *table.tape;
  const Tensor& tv = t.value(table);
  int64_t span = 2 * n - 1;
  if (tv.rank() != 2 || tv.extent(0) != span * span)
    throw ShapeError("relative_bias_lookup: table extents " + extents_str(tv.extents()) +
                     " do not match window " + std::to_string(n));
  int64_t heads = tv.extent(1);
  std::vector<int64_t> idx(static_cast<size_t>(n * n * n * n));
  for (int64_t a = 0; a < n * n; ++a) {
    int64_t ay = a / n, ax = a % n;
    for (int64_t b = 0; b < n * n; ++b) {
      int64_t dy = b / n - ay + n - 1;
      int64_t dx = b % n - ax + n - 1;
      idx[static_cast<size_t>(a * n * n + b)] = dy * span + dx;
    }
  }
  Var flat = gather_rows(table, idx);  // [N^4 x heads]
  std::vector<Var> per_head;
  per_head.reserve(static_cast<size_t>(heads));
  for (int64_t h = 0; h < heads; ++h)
    per_head.push_back(reshape(slice_channels(flat, h, 1), {n * n, n * n}));
  return per_head;
}

namespace detail {

// Pairwise compatibility from per-slot segment ids: weight may flow from b to
// a iff both are valid and share a segment. Invalid slots keep a self loop so
// no softmax row degenerates; their outputs are dropped on scatter-back.
inline Tensor attention_mask(const std::vector<int>& segment) {
  int64_t m = static_cast<int64_t>(segment.size());
  bool any_valid = false;
  for (int s : segment) any_valid = any_valid || s >= 0;
  if (!any_valid) throw DegenerateError("attention: fully masked window");
  Tensor mask({m, m});
  for (int64_t a = 0; a < m; ++a) {
    if (segment[static_cast<size_t>(a)] < 0) {
      mask.at(a, a) = 1.0;
      continue;
    }
    for (int64_t b = 0; b < m; ++b)
      if (segment[static_cast<size_t>(b)] == segment[static_cast<size_t>(a)]) mask.at(a, b) = 1.0;
  }
  return mask;
}

}  // namespace detail

// Multi-head message passing over one window: per head h,
//   A_h = softmax_rows(Q_h K_h^T / sqrt(d_h) + P_h),  out_h = A_h X_h,
// where Q/K come from the window features and X_h is the head's channel
// slice of the prediction. Head outputs are concatenated.
inline Var attention_pairwise(Var f_win, Var x_win, std::span<const Var> bias,
                              const std::vector<int>& segment, Var query_weight, Var key_weight,
                              const CrfStageConfig& cfg, AttentionStats* stats = nullptr) {
  Tape& t = *f_win.tape;
  int64_t m = cfg.window * cfg.window;
  int64_t dh = cfg.head_dim;
  const Tensor& fv = t.value(f_win);
  const Tensor& xv = t.value(x_win);
  if (fv.rank() != 2 || fv.extent(0) != m || fv.extent(1) != cfg.feat_channels)
    throw ShapeError("attention_pairwise: feature window " + extents_str(fv.extents()));
  if (xv.rank() != 2 || xv.extent(0) != m || xv.extent(1) != cfg.pred_channels())
    throw ShapeError("attention_pairwise: prediction window " + extents_str(xv.extents()));
  if (static_cast<int64_t>(bias.size()) != cfg.heads)
    throw ShapeError("attention_pairwise: " + std::to_string(bias.size()) + " bias heads, expected " +
                     std::to_string(cfg.heads));
  if (static_cast<int64_t>(segment.size()) != m)
    throw ShapeError("attention_pairwise: segment size " + std::to_string(segment.size()));

  Tensor mask = detail::attention_mask(segment);
  if (stats) {
    stats->logit_entries += m * m;
    stats->windows += 1;
  }
  std::vector<Var> head_out;
  head_out.reserve(static_cast<size_t>(cfg.heads));
  for (int64_t h = 0; h < cfg.heads; ++h) {
    Var q = matmul(f_win, slice_channels(query_weight, h * dh, dh));
    Var k = matmul(f_win, slice_channels(key_weight, h * dh, dh));
    Var logits = matmul(q, transpose(k));
    if (cfg.scale_logits) logits = scale(logits, 1.0 / std::sqrt(static_cast<double>(dh)));
    logits = add(logits, bias[static_cast<size_t>(h)]);
    Var weights = softmax_rows(logits, &mask);
    head_out.push_back(matmul(weights, slice_channels(x_win, h * dh, dh)));
  }
  return concat_channels(std::span<const Var>(head_out));
}

// Window attention over the whole grid: layer-norm features, gather each
// window, run attention_pairwise, scatter results back to grid order.
inline Var attention_stage(Var features, Var prediction, const WindowPartition& part,
                           const CrfStageVars& params, const CrfStageConfig& cfg,
                           AttentionStats* stats = nullptr) {
  Tape& t = *features.tape;
  const Tensor& fv = t.value(features);
  const Tensor& xv = t.value(prediction);
  if (fv.rank() != 3 || xv.rank() != 3 || fv.extent(0) != xv.extent(0) ||
      fv.extent(1) != xv.extent(1))
    throw ShapeError("attention_stage: features " + extents_str(fv.extents()) + " vs prediction " +
                     extents_str(xv.extents()));
  if (part.rows != fv.extent(0) || part.cols != fv.extent(1))
    throw ShapeError("attention_stage: partition does not cover the grid");
  int64_t rows = fv.extent(0), cols = fv.extent(1);
  int64_t nodes = rows * cols;

  Var f_flat = reshape(features, {nodes, cfg.feat_channels});
  if (cfg.norm_features) f_flat = layer_norm_rows(f_flat);
  Var x_flat = reshape(prediction, {nodes, cfg.pred_channels()});
  std::vector<Var> bias = relative_bias_lookup(params.bias_table, cfg.window);

  std::vector<Var> window_out;
  window_out.reserve(static_cast<size_t>(part.window_count));
  for (int64_t w = 0; w < part.window_count; ++w) {
    Var fw = gather_rows(f_flat, part.window_nodes[static_cast<size_t>(w)]);
    Var xw = gather_rows(x_flat, part.window_nodes[static_cast<size_t>(w)]);
    window_out.push_back(attention_pairwise(fw, xw, bias,
                                            part.window_segment[static_cast<size_t>(w)],
                                            params.query_weight, params.key_weight, cfg, stats));
  }
  Var stacked = window_out.size() == 1 ? window_out[0]
                                       : concat_rows(std::span<const Var>(window_out));
  Var gathered = gather_rows(stacked, part.scatter_index);
  return reshape(gathered, {rows, cols, cfg.pred_channels()});
}

// Unary potential: 3x3 convolution over the channel concatenation of the
// feature map and the current prediction.
inline Var neural_unary(Var features, Var prediction, const ConvVars& unary) {
  Tape& t = *features.tape;
  const Tensor& fv = t.value(features);
  const Tensor& xv = t.value(prediction);
  if (fv.rank() != 3 || xv.rank() != 3 || fv.extent(0) != xv.extent(0) ||
      fv.extent(1) != xv.extent(1))
    throw ShapeError("neural_unary: features " + extents_str(fv.extents()) + " vs prediction " +
                     extents_str(xv.extents()));
  return conv2d(concat_channels({features, prediction}), unary);
}

// One CRF optimization: stack unary and pairwise energies channelwise and
// run the two-layer optimization network to produce the refined prediction.
inline Var crf_stage_forward(Var features, Var prediction, const WindowPartition& part,
                             const CrfStageVars& params, const CrfStageConfig& cfg,
                             AttentionStats* stats = nullptr) {
  Var unary = neural_unary(features, prediction, params.unary);
  Var pairwise = attention_stage(features, prediction, part, params, cfg, stats);
  int64_t rows = features.tape->value(features).extent(0);
  int64_t cols = features.tape->value(features).extent(1);
  Var energy = reshape(concat_channels({unary, pairwise}), {rows * cols, 2 * cfg.pred_channels()});
  Var hidden = gelu(linear(energy, params.opt1));
  Var refined = linear(hidden, params.opt2);
  return reshape(refined, {rows, cols, cfg.pred_channels()});
}

// Full block: regular-window optimization followed by a shifted-window
// optimization on its output.
inline Var crf_block_forward(Var features, Var prediction, const CrfBlockVars& params,
                             const CrfStageConfig& cfg, AttentionStats* stats = nullptr) {
  const Tensor& fv = features.tape->value(features);
  WindowPartition regular = partition_windows(fv.extent(0), fv.extent(1), cfg.window, false);
  WindowPartition shifted = partition_windows(fv.extent(0), fv.extent(1), cfg.window, true);
  Var mid = crf_stage_forward(features, prediction, regular, params.regular, cfg, stats);
  return crf_stage_forward(features, mid, shifted, params.shifted, cfg, stats);
}

}  // namespace nwcrf
