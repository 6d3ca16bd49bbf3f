#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "nwcrf/neural_crf.hpp"

namespace nwcrf {

// Four-level depth predictor: convolutional patch-merging encoder, pyramid
// pooling head for the initial prediction, one window CRF block per level
// with rearrange upscaling between levels, and a sigmoid depth head.
struct ModelConfig {
  enum class Decoder { NeuralCrf, ConvBaseline };

  int64_t levels = 4;
  int64_t window = 7;
  std::array<int64_t, 4> heads{32, 16, 8, 4};  // top level first
  int64_t head_dim = 32;
  std::array<int64_t, 4> encoder_widths{64, 128, 256, 512};  // 1/4 .. 1/32
  std::vector<int64_t> ppm_scales{1, 2, 3, 6};
  double max_depth = 10.0;
  uint64_t seed = 0;
  bool scale_logits = true;
  bool norm_features = true;
  // Oversized pooling scales clamp to the available extent instead of
  // erroring; lets the default scale list run on sub-192px inputs.
  bool ppm_clamp = true;
  Decoder decoder = Decoder::NeuralCrf;

  int64_t pred_channels(int64_t level) const {
    return heads[static_cast<size_t>(level)] * head_dim;
  }
  // encoder feature width consumed by decoder level (0 = top = 1/32)
  int64_t feat_channels(int64_t level) const {
    return encoder_widths[static_cast<size_t>(3 - level)];
  }

  CrfStageConfig stage_config(int64_t level) const {
    CrfStageConfig c;
    c.heads = heads[static_cast<size_t>(level)];
    c.head_dim = head_dim;
    c.window = window;
    c.feat_channels = feat_channels(level);
    c.scale_logits = scale_logits;
    c.norm_features = norm_features;
    return c;
  }

  void validate() const {
    if (levels != 4) throw ConfigError("model.levels must be 4");
    if (window < 1) throw ConfigError("model.window_size must be >= 1");
    if (head_dim < 1) throw ConfigError("model.head_dim must be >= 1");
    if (max_depth <= 0.0) throw ConfigError("model.max_depth must be positive");
    for (int64_t h : heads)
      if (h < 1) throw ConfigError("model.heads entries must be >= 1");
    for (int64_t w : encoder_widths)
      if (w < 1) throw ConfigError("model.encoder_widths entries must be >= 1");
    if (ppm_scales.empty()) throw ConfigError("model.ppm_scales must not be empty");
    for (int64_t s : ppm_scales)
      if (s < 1) throw ConfigError("model.ppm_scales entries must be >= 1");
    for (int64_t level = 0; level < 3; ++level)
      if (pred_channels(level) % 4 != 0)
        throw ConfigError("prediction width at level " + std::to_string(level) +
                          " must be divisible by 4 for the rearrange upscale");
  }
};

template <class T>
struct EncoderStageT {
  ConvParamsT<T> down;  // stride-2 3x3
  ConvParamsT<T> res1, res2;
};

template <class T>
struct ModelParamsT {
  ConvParamsT<T> stem;  // 3 -> w0, stride 2
  std::array<EncoderStageT<T>, 4> enc;
  ConvParamsT<T> ppm_proj;
  std::vector<CrfBlockParamsT<T>> blocks;           // neural CRF decoder (4 levels)
  std::vector<ConvParamsT<T>> conv_dec;             // baseline decoder (2 convs x 4 levels)
  std::array<ConvParamsT<T>, 3> upscale_proj;       // 1x1 after rearrange
  ConvParamsT<T> depth_head;                        // 1x1 -> 1 channel
};

using ModelParams = ModelParamsT<Tensor>;
using ModelVars = ModelParamsT<Var>;

inline ModelVars lift(Tape& t, const ModelParams& p) {
  ModelVars v;
  v.stem = lift(t, p.stem);
  for (size_t i = 0; i < 4; ++i)
    v.enc[i] = EncoderStageT<Var>{lift(t, p.enc[i].down), lift(t, p.enc[i].res1),
                                  lift(t, p.enc[i].res2)};
  v.ppm_proj = lift(t, p.ppm_proj);
  for (const auto& b : p.blocks) v.blocks.push_back(lift(t, b));
  for (const auto& c : p.conv_dec) v.conv_dec.push_back(lift(t, c));
  for (size_t i = 0; i < 3; ++i) v.upscale_proj[i] = lift(t, p.upscale_proj[i]);
  v.depth_head = lift(t, p.depth_head);
  return v;
}

inline ModelParams init_model(const ModelConfig& cfg) {
  cfg.validate();
  ModelParams p;
  uint64_t s = cfg.seed;
  const auto& w = cfg.encoder_widths;
  p.stem = init_conv(3, 3, w[0], s, "enc.stem");
  for (int64_t i = 0; i < 4; ++i) {
    int64_t cin = i == 0 ? w[0] : w[static_cast<size_t>(i - 1)];
    int64_t cout = w[static_cast<size_t>(i)];
    std::string prefix = "enc.s" + std::to_string(i);
    p.enc[static_cast<size_t>(i)] =
        EncoderStageT<Tensor>{init_conv(3, cin, cout, s, prefix + ".down"),
                              init_conv(3, cout, cout, s, prefix + ".res1"),
                              init_conv(3, cout, cout, s, prefix + ".res2")};
  }
  int64_t branches = 1 + static_cast<int64_t>(cfg.ppm_scales.size());
  p.ppm_proj = init_conv(3, w[3] * branches, cfg.pred_channels(0), s, "ppm.proj");
  for (int64_t level = 0; level < 4; ++level) {
    std::string prefix = "dec" + std::to_string(level);
    if (cfg.decoder == ModelConfig::Decoder::NeuralCrf) {
      p.blocks.push_back(init_crf_block(cfg.stage_config(level), s, prefix));
    } else {
      int64_t c = cfg.feat_channels(level), cx = cfg.pred_channels(level);
      p.conv_dec.push_back(init_conv(3, c + cx, cx, s, prefix + ".a"));
      p.conv_dec.push_back(init_conv(3, cx, cx, s, prefix + ".b"));
    }
  }
  for (int64_t level = 0; level < 3; ++level)
    p.upscale_proj[static_cast<size_t>(level)] =
        init_conv(1, cfg.pred_channels(level) / 4, cfg.pred_channels(level + 1), s,
                  "up" + std::to_string(level));
  p.depth_head = init_conv(1, cfg.pred_channels(3), 1, s, "depth_head");
  return p;
}

template <class F>
void visit_params(ModelParams& p, F&& f) {
  visit_params(p.stem, "enc.stem", f);
  for (size_t i = 0; i < 4; ++i) {
    std::string prefix = "enc.s" + std::to_string(i);
    visit_params(p.enc[i].down, prefix + ".down", f);
    visit_params(p.enc[i].res1, prefix + ".res1", f);
    visit_params(p.enc[i].res2, prefix + ".res2", f);
  }
  visit_params(p.ppm_proj, "ppm.proj", f);
  for (size_t level = 0; level < p.blocks.size(); ++level)
    visit_params(p.blocks[level], "dec" + std::to_string(level), f);
  for (size_t i = 0; i < p.conv_dec.size(); ++i)
    visit_params(p.conv_dec[i],
                 "dec" + std::to_string(i / 2) + (i % 2 == 0 ? ".a" : ".b"), f);
  for (size_t i = 0; i < 3; ++i) visit_params(p.upscale_proj[i], "up" + std::to_string(i), f);
  visit_params(p.depth_head, "depth_head", f);
}

template <class F>
void visit_vars(ModelVars& v, F&& f) {
  visit_vars(v.stem, f);
  for (size_t i = 0; i < 4; ++i) {
    visit_vars(v.enc[i].down, f);
    visit_vars(v.enc[i].res1, f);
    visit_vars(v.enc[i].res2, f);
  }
  visit_vars(v.ppm_proj, f);
  for (auto& b : v.blocks) visit_vars(b, f);
  for (auto& c : v.conv_dec) visit_vars(c, f);
  for (size_t i = 0; i < 3; ++i) visit_vars(v.upscale_proj[i], f);
  visit_vars(v.depth_head, f);
}

// Per-stage record of the forward pass, for shape assertions and error
// reporting.
struct ForwardTrace {
  std::vector<std::pair<std::string, Extents>> stages;
};

namespace detail {

inline void check_stage(Tape& t, Var v, const char* stage, ForwardTrace* trace) {
  const Tensor& val = t.value(v);
  if (trace) trace->stages.emplace_back(stage, val.extents());
  if (!val.all_finite())
    throw NumericError(std::string("non-finite values produced at stage ") + stage);
}

}  // namespace detail

// Feature pyramid at 1/4, 1/8, 1/16, 1/32 of the input resolution.
inline std::array<Var, 4> encode(Var image, const ModelVars& params, const ModelConfig& cfg,
                                 ForwardTrace* trace = nullptr) {
  Tape& t = *image.tape;
  const Tensor& iv = t.value(image);
  if (iv.rank() != 3 || iv.extent(2) != 3)
    throw ShapeError("encode: image extents " + extents_str(iv.extents()) + ", want [H x W x 3]");
  if (iv.extent(0) % 32 != 0 || iv.extent(1) % 32 != 0)
    throw ShapeError("encode: extents " + extents_str(iv.extents()) +
                     " not divisible by 32; pad the input first");
  Var f = conv2d(image, params.stem, 2);
  detail::check_stage(t, f, "encoder.stem", trace);
  std::array<Var, 4> features;
  for (int64_t i = 0; i < 4; ++i) {
    const auto& st = params.enc[static_cast<size_t>(i)];
    f = conv2d(gelu(f), st.down, 2);
    f = add(f, conv2d(gelu(f), st.res1));
    f = add(f, conv2d(gelu(f), st.res2));
    features[static_cast<size_t>(i)] = f;
    detail::check_stage(t, f, ("encoder.stage" + std::to_string(i)).c_str(), trace);
  }
  return features;
}

// Pyramid pooling head: multi-scale global average pooling, nearest resize
// back, channel concat with the input feature, one 3x3 conv to the top-level
// prediction width.
inline Var ppm_head(Var top_feature, const ModelVars& params, const ModelConfig& cfg,
                    ForwardTrace* trace = nullptr) {
  Tape& t = *top_feature.tape;
  const Tensor& fv = t.value(top_feature);
  int64_t h = fv.extent(0), w = fv.extent(1);
  std::vector<Var> branches{top_feature};
  for (int64_t s : cfg.ppm_scales) {
    int64_t eff = s;
    if (s > std::min(h, w)) {
      if (!cfg.ppm_clamp)
        throw ShapeError("ppm_head: pooling scale " + std::to_string(s) + " exceeds extents (" +
                         std::to_string(h) + "," + std::to_string(w) +
                         "); reduce model.ppm_scales");
      eff = std::min(h, w);
    }
    branches.push_back(resize_nearest(avg_pool_to(top_feature, eff), h, w));
  }
  Var out = conv2d(concat_channels(std::span<const Var>(branches)), params.ppm_proj);
  detail::check_stage(t, out, "ppm", trace);
  return out;
}

// Full forward pass to a 1/4-resolution depth map with values strictly
// inside (0, max_depth).
inline Var forward(Var image, const ModelVars& params, const ModelConfig& cfg,
                   ForwardTrace* trace = nullptr, AttentionStats* stats = nullptr) {
  Tape& t = *image.tape;
  std::array<Var, 4> features = encode(image, params, cfg, trace);
  Var x = ppm_head(features[3], params, cfg, trace);
  for (int64_t level = 0; level < 4; ++level) {
    Var f = features[static_cast<size_t>(3 - level)];
    if (cfg.decoder == ModelConfig::Decoder::NeuralCrf) {
      x = crf_block_forward(f, x, params.blocks[static_cast<size_t>(level)],
                            cfg.stage_config(level), stats);
    } else {
      Var a = conv2d(concat_channels({f, x}), params.conv_dec[static_cast<size_t>(2 * level)]);
      x = conv2d(gelu(a), params.conv_dec[static_cast<size_t>(2 * level + 1)]);
    }
    if (level < 3)
      x = conv2d(pixel_rearrange(x), params.upscale_proj[static_cast<size_t>(level)]);
    detail::check_stage(t, x, ("level" + std::to_string(level)).c_str(), trace);
  }
  Var logits = conv2d(x, params.depth_head);
  // clamp keeps the output strictly inside (0, max_depth) even where the
  // sigmoid saturates to exactly 0 or 1 in double precision
  Var depth = scale(clamp(sigmoid(logits), 1e-12, 1.0 - 1e-12), cfg.max_depth);
  detail::check_stage(t, depth, "depth_head", trace);
  const Tensor& dv = t.value(depth);
  return reshape(depth, {dv.extent(0), dv.extent(1)});
}

}  // namespace nwcrf
