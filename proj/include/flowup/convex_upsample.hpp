#pragma once

// Baseline convex upsampling: a small conv head predicts f^2 * m^2 logits per
// low-resolution pixel, softmax turns each m x m slice into a convex mask, and
// every sub-pixel is the mask-weighted sum of its parent's m x m neighborhood.

#include <cmath>
#include <string>

#include "flowup/nn.hpp"

namespace flowup {

enum class Padding {
  zero,   // window centred on the pixel, taps outside the image read 0
  clamp,  // window shifted inward so that every tap is a real pixel
};

inline const char* padding_name(Padding p) { return p == Padding::zero ? "zero" : "clamp"; }

inline Padding parse_padding(const std::string& s) {
  if (s == "zero") return Padding::zero;
  if (s == "clamp") return Padding::clamp;
  throw ConfigError("unknown padding policy '" + s + "'");
}

/// First row/column covered by a window of `window` taps around `pos`.
inline std::int64_t window_start(std::int64_t pos, std::int64_t window, std::int64_t extent,
                                 Padding padding) {
  const auto r = window / 2;
  if (padding == Padding::zero) return pos - r;
  return std::clamp<std::int64_t>(pos - r, 0, extent - window);
}

/// Softmax-normalised m x m masks, one per head (or sub-pixel) and low-res
/// position. weights has shape (heads, m, m, h, w); tap (dy, dx) refers to
/// window_start(y) + dy, window_start(x) + dx.
template <typename T>
struct LocalAttentionMaps {
  Tensor<T> weights;
  int window = 3;
  Padding padding = Padding::clamp;

  std::int64_t heads() const { return weights.dim(0); }
  std::int64_t height() const { return weights.dim(3); }
  std::int64_t width() const { return weights.dim(4); }

  /// Upsampling factor implied by the head count (heads == factor^2).
  int factor() const {
    const auto f = static_cast<int>(std::lround(std::sqrt(static_cast<double>(heads()))));
    if (static_cast<std::int64_t>(f) * f != heads()) {
      throw ConfigError(std::to_string(heads()) + " heads do not form a square sub-pixel grid");
    }
    return f;
  }

  /// Largest |sum - 1| over all masks; negative entries count as infinite.
  double max_sum_deviation() const {
    const auto H = heads(), m2 = static_cast<std::int64_t>(window) * window;
    const auto P = height() * width();
    auto w = weights.data();
    double worst = 0.0;
    for (std::int64_t i = 0; i < H; ++i) {
      for (std::int64_t p = 0; p < P; ++p) {
        double acc = 0.0;
        for (std::int64_t t = 0; t < m2; ++t) {
          const double v = w[(i * m2 + t) * P + p];
          if (!(v >= 0.0)) return std::numeric_limits<double>::infinity();
          acc += v;
        }
        worst = std::max(worst, std::abs(acc - 1.0));
      }
    }
    return worst;
  }

  bool is_convex(double tol = 1e-6) const { return max_sum_deviation() <= tol; }
};

namespace detail {

template <typename T>
void check_maps_shape(const LocalAttentionMaps<T>& maps, const char* op) {
  const auto& w = maps.weights;
  if (w.ndim() != 5 || w.dim(1) != maps.window || w.dim(2) != maps.window) {
    throw DimensionError(std::string(op) + ": maps must be (heads, m, m, h, w) with m = " +
                         std::to_string(maps.window) + ", got " + shape_str(w.shape()));
  }
  if (maps.window < 1 || maps.window % 2 == 0) {
    throw ConfigError(std::string(op) + ": window size must be odd");
  }
  if (maps.padding == Padding::clamp &&
      (maps.window > w.dim(3) || maps.window > w.dim(4))) {
    throw ConfigError(std::string(op) + ": clamped window " + std::to_string(maps.window) +
                      " exceeds spatial extent " + shape_str(w.shape()));
  }
}

}  // namespace detail

/// Convex upsampling of a (C, h, w) field by factor f using f^2-head maps.
/// Output pixel (f*y + i/f, f*x + i%f) is the dot product of mask i at (y, x)
/// with the field's window around (y, x).
template <typename T>
Tensor<T> convex_aggregate(const LocalAttentionMaps<T>& maps, const Tensor<T>& field) {
  detail::check_maps_shape(maps, "convex_aggregate");
  detail::require_rank(field, 3, "convex_aggregate", "field");
  const auto h = maps.height(), w = maps.width();
  if (field.dim(1) != h || field.dim(2) != w) {
    throw DimensionError("convex_aggregate: field " + shape_str(field.shape()) +
                         " misaligned with maps " + shape_str(maps.weights.shape()));
  }
  const std::int64_t f = maps.factor();
  const std::int64_t m = maps.window;
  const auto C = field.dim(0);
  const auto P = h * w;
  const auto Wo = f * w;
  const Padding padding = maps.padding;

  Tensor<T> out({C, f * h, f * w});
  auto o = out.data();
  auto wt = maps.weights.data();
  auto fd = field.data();
  for (std::int64_t i = 0; i < f * f; ++i) {
    const auto oy = i / f, ox = i % f;
    for (std::int64_t y = 0; y < h; ++y) {
      const auto sy = window_start(y, m, h, padding);
      for (std::int64_t x = 0; x < w; ++x) {
        const auto sx = window_start(x, m, w, padding);
        for (std::int64_t c = 0; c < C; ++c) {
          T acc = T(0);
          for (std::int64_t dy = 0; dy < m; ++dy) {
            const auto ky = sy + dy;
            if (ky < 0 || ky >= h) continue;
            for (std::int64_t dx = 0; dx < m; ++dx) {
              const auto kx = sx + dx;
              if (kx < 0 || kx >= w) continue;
              acc += wt[((i * m + dy) * m + dx) * P + y * w + x] * fd[(c * h + ky) * w + kx];
            }
          }
          o[(c * f * h + f * y + oy) * Wo + f * x + ox] = acc;
        }
      }
    }
  }
  const auto& weights = maps.weights;
  detail::record(out, "convex_aggregate", {&weights, &field},
                 [weights, field, f, m, C, h, w, P, Wo, padding](std::span<const T> g) {
                   auto gw = detail::grad_sink(weights);
                   auto gf = detail::grad_sink(field);
                   auto wt = weights.data();
                   auto fd = field.data();
                   for (std::int64_t i = 0; i < f * f; ++i) {
                     const auto oy = i / f, ox = i % f;
                     for (std::int64_t y = 0; y < h; ++y) {
                       const auto sy = window_start(y, m, h, padding);
                       for (std::int64_t x = 0; x < w; ++x) {
                         const auto sx = window_start(x, m, w, padding);
                         for (std::int64_t c = 0; c < C; ++c) {
                           const T go = g[(c * f * h + f * y + oy) * Wo + f * x + ox];
                           for (std::int64_t dy = 0; dy < m; ++dy) {
                             const auto ky = sy + dy;
                             if (ky < 0 || ky >= h) continue;
                             for (std::int64_t dx = 0; dx < m; ++dx) {
                               const auto kx = sx + dx;
                               if (kx < 0 || kx >= w) continue;
                               const auto wi = ((i * m + dy) * m + dx) * P + y * w + x;
                               const auto fi = (c * h + ky) * w + kx;
                               if (!gw.empty()) gw[wi] += go * fd[fi];
                               if (!gf.empty()) gf[fi] += go * wt[wi];
                             }
                           }
                         }
                       }
                     }
                   }
                 });
  return out;
}

/// Softmax over the m*m taps of (heads*m*m, h, w) logits, reshaped to maps.
template <typename T>
LocalAttentionMaps<T> maps_from_logits(const Tensor<T>& logits, std::int64_t heads, int window,
                                       Padding padding) {
  const std::int64_t m2 = static_cast<std::int64_t>(window) * window;
  if (logits.ndim() != 3 || logits.dim(0) != heads * m2) {
    throw DimensionError("mask logits must be (" + std::to_string(heads * m2) +
                         ", h, w), got " + shape_str(logits.shape()));
  }
  const auto h = logits.dim(1), w = logits.dim(2);
  auto probs = softmax(reshape(logits, {heads, m2, h, w}), 1);
  return {reshape(probs, {heads, window, window, h, w}), window, padding};
}

/// conv3x3 -> ReLU -> conv1x1 head producing f^2 * m^2 mask logits.
template <typename T>
struct MaskPredictor {
  static constexpr std::int64_t kHidden = 256;

  Conv2d<T> conv3x3;
  Linear1x1<T> conv1x1;
  int factor = 8;
  int window = 3;

  MaskPredictor() = default;
  MaskPredictor(std::int64_t in_channels, int factor_, int window_, Rng& rng,
                std::int64_t hidden = kHidden)
      : factor(factor_), window(window_) {
    if (window < 1 || window % 2 == 0) {
      throw ConfigError("mask size must be odd, got " + std::to_string(window));
    }
    if (factor < 1) throw ConfigError("upsampling factor must be positive");
    conv3x3 = Conv2d<T>(in_channels, hidden, 3, 1, rng);
    conv1x1 = Linear1x1<T>(hidden, out_channels(), rng);
  }

  std::int64_t out_channels() const {
    return static_cast<std::int64_t>(factor) * factor * window * window;
  }

  Tensor<T> logits(const Tensor<T>& h) const { return conv1x1(relu(conv3x3(h))); }

  LocalAttentionMaps<T> predict(const Tensor<T>& h, Padding padding) const {
    return maps_from_logits(logits(h), static_cast<std::int64_t>(factor) * factor, window,
                            padding);
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    conv3x3.collect(out, join_name(prefix, "conv3x3"));
    conv1x1.collect(out, join_name(prefix, "conv1x1"));
  }
};

/// The baseline upsampler: masks from features, then convex aggregation.
template <typename T>
struct ConvexUpsampler {
  MaskPredictor<T> predictor;
  Padding padding = Padding::zero;

  ConvexUpsampler() = default;
  ConvexUpsampler(std::int64_t in_channels, int factor, int window, Padding padding_, Rng& rng)
      : predictor(in_channels, factor, window, rng), padding(padding_) {}

  Tensor<T> upsample(const Tensor<T>& h, const Tensor<T>& flow) const {
    return convex_aggregate(predictor.predict(h, padding), flow);
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    predictor.collect(out, join_name(prefix, "mask"));
  }
};

}  // namespace flowup
