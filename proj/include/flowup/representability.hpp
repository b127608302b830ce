#pragma once

// Whether a convex upsampler can reproduce a high-resolution flow vector at
// all: the vector has to lie in the 2-D convex hull of the low-resolution
// flow vectors its mask can see.

#include <algorithm>
#include <array>
#include <cmath>
#include <set>
#include <utility>
#include <vector>

#include "flowup/convex_upsample.hpp"

namespace flowup {

using Vec2 = std::array<double, 2>;

namespace detail {

inline double cross(const Vec2& o, const Vec2& a, const Vec2& b) {
  return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
}

inline double norm(const Vec2& a, const Vec2& b) {
  return std::hypot(b[0] - a[0], b[1] - a[1]);
}

}  // namespace detail

/// Counter-clockwise hull by monotone chain, collinear points dropped.
/// Degenerate inputs give one vertex (all points equal) or two (collinear).
inline std::vector<Vec2> convex_hull(std::vector<Vec2> pts) {
  std::sort(pts.begin(), pts.end());
  pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
  if (pts.size() < 3) return pts;
  std::vector<Vec2> hull(2 * pts.size());
  std::size_t k = 0;
  for (const auto& p : pts) {
    while (k >= 2 && detail::cross(hull[k - 2], hull[k - 1], p) <= 0) --k;
    hull[k++] = p;
  }
  for (std::size_t i = pts.size() - 1, lower = k + 1; i-- > 0;) {
    while (k >= lower && detail::cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
    hull[k++] = pts[i];
  }
  hull.resize(k - 1);
  return hull;
}

/// Point-in-hull test on a hull produced by convex_hull(); `tol` is a
/// distance, so boundary points count as inside.
inline bool hull_contains(const std::vector<Vec2>& hull, const Vec2& t, double tol = 1e-9) {
  if (hull.empty()) return false;
  if (hull.size() == 1) return detail::norm(hull[0], t) <= tol;
  if (hull.size() == 2) {
    const auto& a = hull[0];
    const auto& b = hull[1];
    const double len = detail::norm(a, b);
    if (std::abs(detail::cross(a, b, t)) > tol * len) return false;
    const double along = ((t[0] - a[0]) * (b[0] - a[0]) + (t[1] - a[1]) * (b[1] - a[1])) / len;
    return along >= -tol && along <= len + tol;
  }
  for (std::size_t i = 0; i < hull.size(); ++i) {
    const auto& a = hull[i];
    const auto& b = hull[(i + 1) % hull.size()];
    if (detail::cross(a, b, t) < -tol * detail::norm(a, b)) return false;
  }
  return true;
}

/// True iff `target` is a convex combination of `neighbors`.
inline bool hull_representable(const Vec2& target, const std::vector<Vec2>& neighbors,
                               double tol = 1e-9) {
  if (neighbors.empty()) return false;
  return hull_contains(convex_hull(neighbors), target, tol);
}

struct RepresentabilityResult {
  std::vector<int> mask_sizes;
  std::vector<std::int64_t> representable;  // per mask size
  std::int64_t pixels = 0;

  double fraction(std::size_t i) const {
    return pixels == 0 ? 1.0 : static_cast<double>(representable[i]) / static_cast<double>(pixels);
  }
};

/// For each full-resolution pixel, tests its flow against the m x m window
/// (clamped at the borders) of the box-downsampled flow around its parent
/// low-resolution pixel.
template <typename T>
RepresentabilityResult representability_study(const Tensor<T>& flow_hr, int factor,
                                              const std::vector<int>& mask_sizes) {
  detail::require_rank(flow_hr, 3, "representability_study", "flow");
  if (flow_hr.dim(0) != 2) throw DimensionError("representability_study: flow needs 2 channels");
  for (int m : mask_sizes) {
    if (m < 1 || m % 2 == 0) throw ConfigError("mask sizes must be odd");
  }
  Tensor<T> low;
  {
    NoGradGuard guard;
    low = avg_downsample(flow_hr.detach(), factor);
  }
  const auto H = flow_hr.dim(1), W = flow_hr.dim(2);
  const auto h = low.dim(1), w = low.dim(2);
  RepresentabilityResult result{mask_sizes, std::vector<std::int64_t>(mask_sizes.size(), 0), H * W};

  auto lowv = [&](std::int64_t y, std::int64_t x) -> Vec2 {
    return {static_cast<double>(low.at(0, y, x)), static_cast<double>(low.at(1, y, x))};
  };
  auto span_of = [](std::int64_t p, std::int64_t m, std::int64_t L) {
    const auto mm = std::min(m, L);
    const auto start = window_start(p, mm, L, Padding::clamp);
    return std::pair{start, start + mm};
  };

  for (std::size_t mi = 0; mi < mask_sizes.size(); ++mi) {
    const std::int64_t m = mask_sizes[mi];
    for (std::int64_t py = 0; py < h; ++py) {
      for (std::int64_t px = 0; px < w; ++px) {
        const auto [y0, y1] = span_of(py, m, h);
        const auto [x0, x1] = span_of(px, m, w);
        std::vector<Vec2> pts;
        for (auto y = y0; y < y1; ++y) {
          for (auto x = x0; x < x1; ++x) pts.push_back(lowv(y, x));
        }
        const auto hull = convex_hull(std::move(pts));
        for (std::int64_t dy = 0; dy < factor; ++dy) {
          for (std::int64_t dx = 0; dx < factor; ++dx) {
            const auto Y = py * factor + dy, X = px * factor + dx;
            const Vec2 t{static_cast<double>(flow_hr.at(0, Y, X)),
                         static_cast<double>(flow_hr.at(1, Y, X))};
            if (hull_contains(hull, t)) ++result.representable[mi];
          }
        }
      }
    }
  }
  return result;
}

/// Number of distinct flow vectors in a field.
template <typename T>
std::int64_t count_motions(const Tensor<T>& flow) {
  detail::require_rank(flow, 3, "count_motions", "flow");
  const auto P = flow.dim(1) * flow.dim(2);
  std::set<std::pair<T, T>> seen;
  for (std::int64_t i = 0; i < P; ++i) seen.emplace(flow[i], flow[P + i]);
  return static_cast<std::int64_t>(seen.size());
}

}  // namespace flowup
