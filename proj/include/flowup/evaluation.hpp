#pragma once

// End-point error and the detail-stratified analysis: a binary edge map from
// ground-truth flow gradients, per-patch detail density, fixed-width detail
// buckets, and per-bucket error statistics.

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "flowup/tensor.hpp"

namespace flowup {

template <typename T>
struct EpeResult {
  double mean = 0.0;
  Tensor<T> map;  // (H, W)
};

template <typename T>
EpeResult<T> epe(const Tensor<T>& pred, const Tensor<T>& gt) {
  if (pred.shape() != gt.shape() || pred.ndim() != 3 || pred.dim(0) != 2) {
    throw DimensionError("epe: expected matching (2, H, W) fields, got " +
                         shape_str(pred.shape()) + " and " + shape_str(gt.shape()));
  }
  const auto H = pred.dim(1), W = pred.dim(2), P = H * W;
  EpeResult<T> r{0.0, Tensor<T>({H, W})};
  auto p = pred.data();
  auto g = gt.data();
  auto m = r.map.data();
  double acc = 0.0;
  for (std::int64_t i = 0; i < P; ++i) {
    const double du = static_cast<double>(p[i]) - g[i];
    const double dv = static_cast<double>(p[P + i]) - g[P + i];
    const double e = std::sqrt(du * du + dv * dv);
    m[i] = static_cast<T>(e);
    acc += e;
  }
  r.mean = P ? acc / static_cast<double>(P) : 0.0;
  return r;
}

struct BinaryMap {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<std::uint8_t> values;

  std::uint8_t at(std::int64_t y, std::int64_t x) const {
    return values[static_cast<std::size_t>(y * width + x)];
  }
  std::int64_t count() const {
    std::int64_t n = 0;
    for (auto v : values) n += v;
    return n;
  }
};

inline constexpr double kDetailThreshold = 8.0;

/// 1 where the L2 norm of the four Sobel responses (d/dx, d/dy of u and v)
/// reaches `threshold`. Unnormalised 3x3 Sobel, replicate border.
template <typename T>
BinaryMap detail_map(const Tensor<T>& flow, double threshold = kDetailThreshold) {
  if (flow.ndim() != 3 || flow.dim(0) != 2) {
    throw DimensionError("detail_map: expected (2, H, W) flow, got " + shape_str(flow.shape()));
  }
  const auto H = flow.dim(1), W = flow.dim(2);
  if (H < 3 || W < 3) throw DimensionError("detail_map: flow must be at least 3x3");
  BinaryMap out{H, W, std::vector<std::uint8_t>(static_cast<std::size_t>(H * W), 0)};
  auto f = flow.data();
  auto px = [&](std::int64_t c, std::int64_t y, std::int64_t x) -> double {
    y = std::clamp<std::int64_t>(y, 0, H - 1);
    x = std::clamp<std::int64_t>(x, 0, W - 1);
    return f[(c * H + y) * W + x];
  };
  for (std::int64_t y = 0; y < H; ++y) {
    for (std::int64_t x = 0; x < W; ++x) {
      double sq = 0.0;
      for (std::int64_t c = 0; c < 2; ++c) {
        const double gx = (px(c, y - 1, x + 1) + 2 * px(c, y, x + 1) + px(c, y + 1, x + 1)) -
                          (px(c, y - 1, x - 1) + 2 * px(c, y, x - 1) + px(c, y + 1, x - 1));
        const double gy = (px(c, y + 1, x - 1) + 2 * px(c, y + 1, x) + px(c, y + 1, x + 1)) -
                          (px(c, y - 1, x - 1) + 2 * px(c, y - 1, x) + px(c, y - 1, x + 1));
        sq += gx * gx + gy * gy;
      }
      out.values[static_cast<std::size_t>(y * W + x)] = std::sqrt(sq) >= threshold ? 1 : 0;
    }
  }
  return out;
}

/// Mean EPE over pixels flagged in the ground truth's detail map; NaN if
/// there are none.
template <typename T>
double edge_epe(const Tensor<T>& pred, const Tensor<T>& gt, double threshold = kDetailThreshold) {
  const auto e = epe(pred, gt);
  const auto edges = detail_map(gt, threshold);
  double acc = 0.0;
  std::int64_t n = 0;
  for (std::size_t i = 0; i < edges.values.size(); ++i) {
    if (edges.values[i]) {
      acc += e.map[static_cast<std::int64_t>(i)];
      ++n;
    }
  }
  return n ? acc / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

struct DetailBucket {
  std::int64_t count = 0;
  double percentage = 0.0;
  double reverse_cumulative_percentage = 0.0;
  double mean_epe = 0.0;
  double contribution = 0.0;  // percent of the summed patch error
  double reverse_cumulative_contribution = 0.0;
};

struct DetailBucketReport {
  static constexpr int kBuckets = 19;
  static constexpr double kBucketWidth = 0.02;
  static constexpr std::int64_t kPatch = 32;

  std::vector<DetailBucket> buckets = std::vector<DetailBucket>(kBuckets);
  std::int64_t total_patches = 0;
  double total_error = 0.0;         // sum of patch-mean EPEs
  double global_patch_mean_epe = 0.0;

  /// Patch-weighted mean EPE over buckets >= `first`; NaN if they are empty.
  double mean_epe_from(int first) const {
    double acc = 0.0;
    std::int64_t n = 0;
    for (int b = first; b < kBuckets; ++b) {
      acc += static_cast<double>(buckets[static_cast<std::size_t>(b)].count) *
             buckets[static_cast<std::size_t>(b)].mean_epe;
      n += buckets[static_cast<std::size_t>(b)].count;
    }
    return n ? acc / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
  }

  std::string to_csv() const {
    std::ostringstream os;
    os << "bucket,detail_lo,detail_hi,count,percentage,reverse_cumulative_percentage,mean_epe,"
          "contribution_percentage,reverse_cumulative_contribution_percentage\n";
    os << std::setprecision(10);
    for (int b = 0; b < kBuckets; ++b) {
      const auto& k = buckets[static_cast<std::size_t>(b)];
      os << b << ',' << b * kBucketWidth << ',';
      if (b == kBuckets - 1) {
        os << "inf";
      } else {
        os << (b + 1) * kBucketWidth;
      }
      os << ',' << k.count << ',' << k.percentage << ',' << k.reverse_cumulative_percentage << ','
         << k.mean_epe << ',' << k.contribution << ',' << k.reverse_cumulative_contribution
         << '\n';
    }
    return os.str();
  }

  /// Statistics as rows, buckets as columns.
  std::string to_text() const {
    constexpr int kLabelWidth = 56;
    std::ostringstream os;
    auto row = [&](const std::string& label, auto getter, bool pct) {
      os << std::left << std::setw(kLabelWidth) << label << std::right;
      for (int b = 0; b < kBuckets; ++b) {
        std::ostringstream cell;
        cell << std::fixed << std::setprecision(pct ? 1 : 3)
             << getter(buckets[static_cast<std::size_t>(b)]);
        if (pct) cell << '%';
        os << std::setw(9) << cell.str();
      }
      os << '\n';
    };
    os << std::left << std::setw(kLabelWidth) << "statistic / bucket" << std::right;
    for (int b = 0; b < kBuckets; ++b) os << std::setw(9) << b;
    os << '\n';
    os << std::left << std::setw(kLabelWidth) << "number of samples" << std::right;
    for (const auto& k : buckets) os << std::setw(9) << k.count;
    os << '\n';
    row("samples (percentage)", [](const DetailBucket& k) { return k.percentage; }, true);
    row("samples (reverse cumulative percentage)",
        [](const DetailBucket& k) { return k.reverse_cumulative_percentage; }, true);
    row("mean end-point error", [](const DetailBucket& k) { return k.mean_epe; }, false);
    row("contribution to error (percentage)",
        [](const DetailBucket& k) { return k.contribution; }, true);
    row("contribution to error (reverse cumulative percentage)",
        [](const DetailBucket& k) { return k.reverse_cumulative_contribution; }, true);
    os << "patches: " << total_patches << ", patch-mean EPE: " << global_patch_mean_epe << '\n';
    return os.str();
  }
};

/// Bucket index of a patch detail density; a small epsilon keeps exact
/// multiples of the width in the upper bucket despite rounding.
inline int detail_bucket(double detail) {
  const auto b = static_cast<int>(std::floor(detail / DetailBucketReport::kBucketWidth + 1e-9));
  return std::clamp(b, 0, DetailBucketReport::kBuckets - 1);
}

/// Accumulates 32 x 32 patches from any number of (pred, gt) pairs.
class BucketAccumulator {
 public:
  template <typename T>
  void add(const Tensor<T>& pred, const Tensor<T>& gt, double threshold = kDetailThreshold) {
    const auto e = epe(pred, gt);
    const auto edges = detail_map(gt, threshold);
    const auto H = gt.dim(1), W = gt.dim(2);
    constexpr auto S = DetailBucketReport::kPatch;
    if (H < S || W < S) throw DimensionError("bucket_report: flow smaller than one 32x32 patch");
    for (std::int64_t py = 0; py + S <= H; py += S) {
      for (std::int64_t px = 0; px + S <= W; px += S) {
        std::int64_t edge = 0;
        double err = 0.0;
        for (std::int64_t y = py; y < py + S; ++y) {
          for (std::int64_t x = px; x < px + S; ++x) {
            edge += edges.at(y, x);
            err += static_cast<double>(e.map.at(y, x));
          }
        }
        const double detail = static_cast<double>(edge) / static_cast<double>(S * S);
        const auto b = static_cast<std::size_t>(detail_bucket(detail));
        counts_[b] += 1;
        errors_[b] += err / static_cast<double>(S * S);
      }
    }
  }

  DetailBucketReport report() const {
    DetailBucketReport r;
    for (int b = 0; b < DetailBucketReport::kBuckets; ++b) {
      r.total_patches += counts_[static_cast<std::size_t>(b)];
      r.total_error += errors_[static_cast<std::size_t>(b)];
    }
    if (r.total_patches == 0) return r;
    r.global_patch_mean_epe = r.total_error / static_cast<double>(r.total_patches);
    std::int64_t tail_count = 0;
    double tail_error = 0.0;
    for (int b = DetailBucketReport::kBuckets - 1; b >= 0; --b) {
      const auto ub = static_cast<std::size_t>(b);
      auto& k = r.buckets[ub];
      k.count = counts_[ub];
      tail_count += k.count;
      tail_error += errors_[ub];
      k.percentage = 100.0 * static_cast<double>(k.count) / static_cast<double>(r.total_patches);
      k.reverse_cumulative_percentage =
          100.0 * static_cast<double>(tail_count) / static_cast<double>(r.total_patches);
      k.mean_epe = k.count ? errors_[ub] / static_cast<double>(k.count) : 0.0;
      // With zero total error every contribution is reported as 0.
      k.contribution = r.total_error > 0 ? 100.0 * errors_[ub] / r.total_error : 0.0;
      k.reverse_cumulative_contribution = r.total_error > 0 ? 100.0 * tail_error / r.total_error : 0.0;
    }
    return r;
  }

 private:
  std::vector<std::int64_t> counts_ = std::vector<std::int64_t>(DetailBucketReport::kBuckets, 0);
  std::vector<double> errors_ = std::vector<double>(DetailBucketReport::kBuckets, 0.0);
};

template <typename T>
DetailBucketReport bucket_report(const Tensor<T>& pred, const Tensor<T>& gt) {
  BucketAccumulator acc;
  acc.add(pred, gt);
  return acc.report();
}

}  // namespace flowup
