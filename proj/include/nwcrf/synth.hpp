#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "nwcrf/loss_metrics.hpp"

namespace nwcrf {

// Procedural scene generator: a tilted ground plane with 3-6 spheres and
// fronto-tilted rectangles floating in front of it, depth in [0.5, 10] m.
// Shading is Lambertian-style, proportional to inverse depth, modulated by a
// per-object albedo on the red/blue channels plus mild multiplicative
// texture; the green channel carries clean shading so depth stays inferable
// from a single image. 5% of pixels are marked invalid to exercise masking.
inline DepthSample synth_scene(uint64_t seed, int64_t h, int64_t w) {
  if (h % 32 != 0 || w % 32 != 0)
    throw ContractError("synth_scene: extents must be divisible by 32");
  Rng rng(mix_seed(seed, "synth_scene"));

  double ground_near = rng.uniform(1.5, 3.0);
  double ground_far = rng.uniform(6.5, 9.5);
  double ground_tilt = rng.uniform(-0.8, 0.8);

  auto ground_depth = [&](double fy, double fx) {
    return ground_far + (ground_near - ground_far) * fy + ground_tilt * (fx - 0.5);
  };

  struct Object {
    bool sphere;
    double cy, cx, ry, rx, base, bump, slope_y, slope_x;
    double albedo_r, albedo_b;
  };
  int64_t count = rng.uniform_int(3, 6);
  std::vector<Object> objects;
  for (int64_t i = 0; i < count; ++i) {
    Object o;
    o.sphere = rng.uniform() < 0.5;
    o.cy = rng.uniform(0.15, 0.85);
    o.cx = rng.uniform(0.15, 0.85);
    o.ry = rng.uniform(0.08, 0.2);
    o.rx = o.sphere ? o.ry : rng.uniform(0.08, 0.2);
    o.base = ground_depth(o.cy, o.cx) * rng.uniform(0.55, 0.85);
    o.bump = rng.uniform(0.1, 0.5);
    o.slope_y = rng.uniform(-0.6, 0.6);
    o.slope_x = rng.uniform(-0.6, 0.6);
    o.albedo_r = rng.uniform(0.75, 1.0);
    o.albedo_b = rng.uniform(0.75, 1.0);
    objects.push_back(o);
  }
  double ground_albedo_r = rng.uniform(0.75, 1.0);
  double ground_albedo_b = rng.uniform(0.75, 1.0);

  DepthSample sample;
  sample.depth = Tensor({h, w});
  sample.image = Tensor({h, w, 3});
  sample.valid = Tensor({h, w});

  for (int64_t y = 0; y < h; ++y) {
    double fy = static_cast<double>(y) / static_cast<double>(h - 1);
    for (int64_t x = 0; x < w; ++x) {
      double fx = static_cast<double>(x) / static_cast<double>(w - 1);
      double depth = ground_depth(fy, fx);
      double ar = ground_albedo_r, ab = ground_albedo_b;
      for (const Object& o : objects) {
        double uy = (fy - o.cy) / o.ry, ux = (fx - o.cx) / o.rx;
        double d;
        if (o.sphere) {
          double rho2 = uy * uy + ux * ux;
          if (rho2 > 1.0) continue;
          d = o.base - o.bump * std::sqrt(1.0 - rho2);
        } else {
          if (std::abs(uy) > 1.0 || std::abs(ux) > 1.0) continue;
          d = o.base + o.slope_y * uy + o.slope_x * ux;
        }
        if (d < depth) {  // nearest surface wins
          depth = d;
          ar = o.albedo_r;
          ab = o.albedo_b;
        }
      }
      depth = std::clamp(depth, 0.5, 10.0);
      sample.depth.at(y, x) = depth;
      double shade = 0.1 + 0.45 / depth;
      sample.image.at(y, x, 0) = std::clamp(shade * ar, 0.0, 1.0);
      sample.image.at(y, x, 1) = std::clamp(shade, 0.0, 1.0);
      sample.image.at(y, x, 2) = std::clamp(shade * ab, 0.0, 1.0);
    }
  }

  // mild multiplicative texture, drawn in a fixed pixel order
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      double noise = 1.0 + 0.02 * rng.uniform(-1.0, 1.0);
      for (int64_t c = 0; c < 3; ++c)
        sample.image.at(y, x, c) = std::clamp(sample.image.at(y, x, c) * noise, 0.0, 1.0);
    }

  for (int64_t i = 0; i < h * w; ++i) sample.valid[i] = rng.uniform() < 0.05 ? 0.0 : 1.0;
  // the mask must keep at least one pixel
  sample.valid[0] = 1.0;
  return sample;
}

}  // namespace nwcrf
