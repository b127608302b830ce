#pragma once

// Synthetic scenes with piecewise-constant motion: a textured background and
// textured rectangles/ellipses, each with its own translation. Object edges in
// the image coincide exactly with motion boundaries in the flow.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

#include "flowup/ops.hpp"

namespace flowup {

struct SyntheticSample {
  Tensor<float> image;  // (3, H, W), values in [0, 1]
  Tensor<float> flow;   // (2, H, W), pixels per frame
  int shapes = 0;
  std::uint64_t seed = 0;
};

inline constexpr double kMaxMotion = 8.0;

namespace detail {

struct Texture {
  std::array<double, 3> base{};
  struct Wave {
    double kx, ky, phase;
    std::array<double, 3> amp;
  };
  std::vector<Wave> waves;

  double value(int c, double y, double x) const {
    double v = base[static_cast<std::size_t>(c)];
    for (const auto& w : waves) v += w.amp[static_cast<std::size_t>(c)] * std::sin(w.kx * x + w.ky * y + w.phase);
    return std::clamp(v, 0.0, 1.0);
  }
};

inline Texture random_texture(Rng& rng) {
  std::uniform_real_distribution<double> base(0.15, 0.85);
  std::uniform_real_distribution<double> freq(0.08, 0.6);
  std::uniform_real_distribution<double> angle(0.0, 2 * std::numbers::pi);
  std::uniform_real_distribution<double> amp(0.02, 0.1);
  Texture t;
  for (auto& b : t.base) b = base(rng);
  for (int k = 0; k < 3; ++k) {
    const double f = freq(rng), a = angle(rng);
    t.waves.push_back({f * std::cos(a), f * std::sin(a), angle(rng), {amp(rng), amp(rng), amp(rng)}});
  }
  return t;
}

struct ShapeSpec {
  bool ellipse;
  double cy, cx, ry, rx;
  double u, v;
  Texture texture;

  bool contains(double y, double x) const {
    const double dy = (y - cy) / ry, dx = (x - cx) / rx;
    if (ellipse) return dy * dy + dx * dx <= 1.0;
    return std::abs(dy) <= 1.0 && std::abs(dx) <= 1.0;
  }
};

}  // namespace detail

/// Deterministic in (seed, height, width, n_shapes).
inline SyntheticSample gen_sample(std::uint64_t seed, std::int64_t height, std::int64_t width,
                                  int n_shapes) {
  if (height % 8 != 0 || width % 8 != 0 || height <= 0 || width <= 0) {
    throw ConfigError("gen_sample: extents must be positive multiples of 8");
  }
  if (n_shapes < 0) throw ConfigError("gen_sample: negative shape count");
  Rng rng(seed);
  std::uniform_real_distribution<double> motion(-kMaxMotion, kMaxMotion);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double extent = static_cast<double>(std::min(height, width));

  const auto bg_texture = detail::random_texture(rng);
  const double bg_u = motion(rng), bg_v = motion(rng);
  std::vector<detail::ShapeSpec> shapes;
  for (int s = 0; s < n_shapes; ++s) {
    detail::ShapeSpec sh;
    sh.ellipse = unit(rng) < 0.5;
    sh.cy = unit(rng) * static_cast<double>(height);
    sh.cx = unit(rng) * static_cast<double>(width);
    sh.ry = (0.06 + 0.2 * unit(rng)) * extent;
    sh.rx = (0.06 + 0.2 * unit(rng)) * extent;
    sh.u = motion(rng);
    sh.v = motion(rng);
    sh.texture = detail::random_texture(rng);
    shapes.push_back(std::move(sh));
  }

  SyntheticSample out{Tensor<float>({3, height, width}), Tensor<float>({2, height, width}),
                      n_shapes, seed};
  const auto P = height * width;
  for (std::int64_t y = 0; y < height; ++y) {
    for (std::int64_t x = 0; x < width; ++x) {
      const double py = static_cast<double>(y) + 0.5, px = static_cast<double>(x) + 0.5;
      const detail::Texture* tex = &bg_texture;
      double u = bg_u, v = bg_v;
      // Later shapes are nearer the camera.
      for (const auto& sh : shapes) {
        if (sh.contains(py, px)) {
          tex = &sh.texture;
          u = sh.u;
          v = sh.v;
        }
      }
      const auto i = y * width + x;
      for (int c = 0; c < 3; ++c) out.image[c * P + i] = static_cast<float>(tex->value(c, py, px));
      out.flow[i] = static_cast<float>(u);
      out.flow[P + i] = static_cast<float>(v);
    }
  }
  return out;
}

struct AugmentConfig {
  double min_scale = 0.8;
  double max_scale = 1.5;
  std::int64_t crop_height = 96;
  std::int64_t crop_width = 96;
  double hflip_prob = 0.5;
  double vflip_prob = 0.1;
  bool interpolation_enabled = true;
};

/// Counts resampling operations so callers can assert crop/flip-only runs.
struct AugmentStats {
  std::int64_t resize_calls = 0;
  std::int64_t samples = 0;
};

/// Optional bilinear rescale (flow values scaled by the resize ratio), then a
/// random crop and flips; flipping negates the mirrored flow component.
inline SyntheticSample augment(const SyntheticSample& sample, const AugmentConfig& cfg,
                               std::uint64_t seed, AugmentStats* stats = nullptr) {
  NoGradGuard no_grad;
  Rng rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto image = sample.image;
  auto flow = sample.flow;
  const auto H = image.dim(1), W = image.dim(2);
  if (cfg.interpolation_enabled) {
    double s = cfg.min_scale + (cfg.max_scale - cfg.min_scale) * unit(rng);
    // Never shrink below what the crop needs.
    s = std::max({s, static_cast<double>(cfg.crop_height) / static_cast<double>(H),
                  static_cast<double>(cfg.crop_width) / static_cast<double>(W)});
    const auto h2 = std::max<std::int64_t>(cfg.crop_height, std::llround(static_cast<double>(H) * s));
    const auto w2 = std::max<std::int64_t>(cfg.crop_width, std::llround(static_cast<double>(W) * s));
    if (h2 != H || w2 != W) {
      image = bilinear_resize(image, h2, w2);
      flow = bilinear_resize(flow, h2, w2, /*scale_flow=*/true);
      if (stats) stats->resize_calls += 2;
    }
  }
  const auto h = image.dim(1), w = image.dim(2);
  if (cfg.crop_height > h || cfg.crop_width > w || cfg.crop_height < 1 || cfg.crop_width < 1) {
    throw ConfigError("augment: crop " + std::to_string(cfg.crop_height) + "x" +
                      std::to_string(cfg.crop_width) + " does not fit " + std::to_string(h) + "x" +
                      std::to_string(w));
  }
  const auto y0 = static_cast<std::int64_t>(unit(rng) * static_cast<double>(h - cfg.crop_height + 1));
  const auto x0 = static_cast<std::int64_t>(unit(rng) * static_cast<double>(w - cfg.crop_width + 1));
  const bool hflip = unit(rng) < cfg.hflip_prob;
  const bool vflip = unit(rng) < cfg.vflip_prob;

  const auto ch = cfg.crop_height, cw = cfg.crop_width;
  SyntheticSample out{Tensor<float>({3, ch, cw}), Tensor<float>({2, ch, cw}), sample.shapes,
                      sample.seed};
  for (std::int64_t y = 0; y < ch; ++y) {
    const auto sy = y0 + (vflip ? ch - 1 - y : y);
    for (std::int64_t x = 0; x < cw; ++x) {
      const auto sx = x0 + (hflip ? cw - 1 - x : x);
      for (int c = 0; c < 3; ++c) out.image.at(c, y, x) = image.at(c, sy, sx);
      out.flow.at(0, y, x) = hflip ? -flow.at(0, sy, sx) : flow.at(0, sy, sx);
      out.flow.at(1, y, x) = vflip ? -flow.at(1, sy, sx) : flow.at(1, sy, sx);
    }
  }
  if (stats) ++stats->samples;
  return out;
}

}  // namespace flowup
