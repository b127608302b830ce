#pragma once

// Neighborhood attention: each query attends to the m x m keys of a window
// that is centred on it, shifted inward near the borders so it never leaves
// the image.

#include <algorithm>
#include <cmath>
#include <optional>
#include <memory>
#include <tuple>
#include <vector>

#include "flowup/convex_upsample.hpp"

namespace flowup {

namespace detail {

// Clamped window start for every column.
inline std::vector<std::int64_t> window_starts(std::int64_t m, std::int64_t w) {
  std::vector<std::int64_t> sx(static_cast<std::size_t>(w));
  for (std::int64_t x = 0; x < w; ++x) sx[static_cast<std::size_t>(x)] = window_start(x, m, w, Padding::clamp);
  return sx;
}

// (heads, d, P) <-> (heads, P, d) copies, so a window row of keys or values
// is one contiguous m x d block.
template <typename T>
Buffer<T> to_position_major(std::span<const T> src, std::int64_t heads, std::int64_t d,
                                 std::int64_t P) {
  Buffer<T> dst(src.size());
  for (std::int64_t i = 0; i < heads; ++i) {
    MapR<T>(dst.data() + i * P * d, P, d) = CMapR<T>(src.data() + i * d * P, d, P).transpose();
  }
  return dst;
}

template <typename T>
void add_channel_major(std::span<T> dst, const Buffer<T>& src, std::int64_t heads,
                       std::int64_t d, std::int64_t P) {
  for (std::int64_t i = 0; i < heads; ++i) {
    MapR<T>(dst.data() + i * d * P, d, P) += CMapR<T>(src.data() + i * P * d, P, d).transpose();
  }
}

template <typename T>
using VecMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>;
template <typename T>
using CVecMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;
template <typename T>
using StridedVec = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>, 0, Eigen::InnerStride<>>;
template <typename T>
using CStridedVec = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>, 0, Eigen::InnerStride<>>;

}  // namespace detail

/// Largest odd window no bigger than `window` that fits an h x w grid.
inline int fitted_window(int window, std::int64_t h, std::int64_t w) {
  auto m = std::min<std::int64_t>(window, std::min(h, w));
  if (m % 2 == 0) --m;
  return static_cast<int>(std::max<std::int64_t>(m, 1));
}

/// Attention logits (heads, m*m, h, w) for Q, K of shape (heads, d, h, w).
/// Tap t = dy*m + dx addresses key (sy + dy, sx + dx) with clamped window
/// starts. `relbias`, when defined, is (heads, n, n) with odd n >= 2m-1,
/// indexed by the key-minus-query offset from its centre.
template <typename T>
Tensor<T> na_logits(int window, const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& relbias,
                    T scale) {
  detail::require_rank(q, 4, "na_maps", "Q");
  detail::require_same_shape(q, k, "na_maps");
  if (window < 1 || window % 2 == 0) throw ConfigError("na_maps: window size must be odd");
  const auto H = q.dim(0), d = q.dim(1), h = q.dim(2), w = q.dim(3);
  const std::int64_t m = window;
  if (m > h || m > w) {
    throw ConfigError("na_maps: window " + std::to_string(m) + " exceeds spatial extent " +
                      std::to_string(h) + "x" + std::to_string(w));
  }
  // The bias table may belong to a larger window; offsets index it from its
  // centre.
  const std::int64_t nb = relbias.defined() ? relbias.dim(relbias.ndim() - 1) : 2 * m - 1;
  const std::int64_t c = (nb - 1) / 2;
  if (relbias.defined() &&
      (relbias.shape() != Shape{H, nb, nb} || nb % 2 == 0 || nb < 2 * m - 1)) {
    throw DimensionError("na_maps: relative bias must be (" + std::to_string(H) +
                         ", n, n) with odd n >= " + std::to_string(2 * m - 1) + ", got " +
                         shape_str(relbias.shape()));
  }
  const auto P = h * w;
  const auto m2 = m * m;
  const auto sx = detail::window_starts(m, w);
  auto qt = std::make_shared<Buffer<T>>(detail::to_position_major(q.data(), H, d, P));
  auto kt = std::make_shared<Buffer<T>>(detail::to_position_major(k.data(), H, d, P));
  Tensor<T> out({H, m2, h, w});
  auto o = out.data();
  Eigen::Matrix<T, Eigen::Dynamic, 1> row(m);
  for (std::int64_t i = 0; i < H; ++i) {
    const T* bh = relbias.defined() ? relbias.data().data() + i * nb * nb : nullptr;
    for (std::int64_t y = 0; y < h; ++y) {
      const auto sy = window_start(y, m, h, Padding::clamp);
      for (std::int64_t x = 0; x < w; ++x) {
        const auto p = y * w + x;
        const auto x0 = sx[static_cast<std::size_t>(x)];
        detail::CVecMap<T> qv(qt->data() + (i * P + p) * d, d);
        for (std::int64_t dy = 0; dy < m; ++dy) {
          const auto ky = sy + dy;
          row.noalias() = detail::CMapR<T>(kt->data() + (i * P + ky * w + x0) * d, m, d) * qv;
          for (std::int64_t dx = 0; dx < m; ++dx) {
            T v = row[dx] * scale;
            if (bh) v += bh[(ky - y + c) * nb + (x0 + dx - x + c)];
            o[(i * m2 + dy * m + dx) * P + p] = v;
          }
        }
      }
    }
  }
  detail::record(out, "na_logits", {&q, &k, &relbias},
                 [q, k, relbias, qt, kt, H, d, h, w, m, nb, c, P, m2, scale,
                  sx](std::span<const T> g) {
                   auto gq = detail::grad_sink(q);
                   auto gk = detail::grad_sink(k);
                   auto gb = detail::grad_sink(relbias);
                   Buffer<T> gqt(gq.empty() ? 0 : gq.size(), T(0));
                   Buffer<T> gkt(gk.empty() ? 0 : gk.size(), T(0));
                   Eigen::Matrix<T, Eigen::Dynamic, 1> grow(m);
                   for (std::int64_t i = 0; i < H; ++i) {
                     for (std::int64_t y = 0; y < h; ++y) {
                       const auto sy = window_start(y, m, h, Padding::clamp);
                       for (std::int64_t x = 0; x < w; ++x) {
                         const auto p = y * w + x;
                         const auto x0 = sx[static_cast<std::size_t>(x)];
                         for (std::int64_t dy = 0; dy < m; ++dy) {
                           const auto ky = sy + dy;
                           const T* gp = g.data() + (i * m2 + dy * m) * P + p;
                           if (!gb.empty()) {
                             T* gbrow = gb.data() + (i * nb + ky - y + c) * nb + x0 - x + c;
                             for (std::int64_t dx = 0; dx < m; ++dx) gbrow[dx] += gp[dx * P];
                           }
                           grow = detail::CStridedVec<T>(gp, m, Eigen::InnerStride<>(P)) * scale;
                           const auto kofs = (i * P + ky * w + x0) * d;
                           const auto qofs = (i * P + p) * d;
                           if (!gqt.empty()) {
                             detail::VecMap<T>(gqt.data() + qofs, d).noalias() +=
                                 detail::CMapR<T>(kt->data() + kofs, m, d).transpose() * grow;
                           }
                           if (!gkt.empty()) {
                             detail::MapR<T>(gkt.data() + kofs, m, d).noalias() +=
                                 grow * detail::CVecMap<T>(qt->data() + qofs, d).transpose();
                           }
                         }
                       }
                     }
                   }
                   if (!gq.empty()) detail::add_channel_major(gq, gqt, H, d, P);
                   if (!gk.empty()) detail::add_channel_major(gk, gkt, H, d, P);
                 });
  return out;
}

/// Local attention maps: softmax over each query's clamped m x m window of
/// scaled Q.K logits plus optional relative position bias.
template <typename T>
LocalAttentionMaps<T> na_maps(int window, const Tensor<T>& q, const Tensor<T>& k,
                              const Tensor<T>& relbias = {}, std::optional<T> scale = {}) {
  detail::require_rank(q, 4, "na_maps", "Q");
  const T s = scale.value_or(T(1) / std::sqrt(static_cast<T>(q.dim(1))));
  return maps_from_logits(reshape(na_logits(window, q, k, relbias, s),
                                  {q.dim(0) * window * window, q.dim(2), q.dim(3)}),
                          q.dim(0), window, Padding::clamp);
}

/// Per head and position, the attention-weighted sum of V over the window.
template <typename T>
Tensor<T> na_aggregate(const LocalAttentionMaps<T>& maps, const Tensor<T>& v) {
  detail::check_maps_shape(maps, "na_aggregate");
  if (maps.padding != Padding::clamp) {
    throw ConfigError("na_aggregate: neighborhood attention requires clamped windows");
  }
  detail::require_rank(v, 4, "na_aggregate", "V");
  const auto H = maps.heads(), h = maps.height(), w = maps.width();
  if (v.dim(0) != H || v.dim(2) != h || v.dim(3) != w) {
    throw DimensionError("na_aggregate: V " + shape_str(v.shape()) + " misaligned with maps " +
                         shape_str(maps.weights.shape()));
  }
  const auto d = v.dim(1);
  const std::int64_t m = maps.window;
  const auto P = h * w;
  const auto sx = detail::window_starts(m, w);
  auto vt = std::make_shared<Buffer<T>>(detail::to_position_major(v.data(), H, d, P));
  Buffer<T> ot(static_cast<std::size_t>(H * P * d), T(0));
  auto wt = maps.weights.data();
  for (std::int64_t i = 0; i < H; ++i) {
    for (std::int64_t y = 0; y < h; ++y) {
      const auto sy = window_start(y, m, h, Padding::clamp);
      for (std::int64_t x = 0; x < w; ++x) {
        const auto p = y * w + x;
        const auto x0 = sx[static_cast<std::size_t>(x)];
        detail::VecMap<T> ov(ot.data() + (i * P + p) * d, d);
        for (std::int64_t dy = 0; dy < m; ++dy) {
          detail::CStridedVec<T> a(wt.data() + ((i * m + dy) * m) * P + p, m,
                                   Eigen::InnerStride<>(P));
          ov.noalias() +=
              detail::CMapR<T>(vt->data() + (i * P + (sy + dy) * w + x0) * d, m, d).transpose() * a;
        }
      }
    }
  }
  Tensor<T> out(v.shape());
  detail::add_channel_major(out.data(), ot, H, d, P);
  const auto& weights = maps.weights;
  detail::record(out, "na_aggregate", {&weights, &v},
                 [weights, v, vt, H, d, h, w, m, P, sx](std::span<const T> g) {
                   auto gw = detail::grad_sink(weights);
                   auto gv = detail::grad_sink(v);
                   const auto gt = detail::to_position_major(g, H, d, P);
                   Buffer<T> gvt(gv.empty() ? 0 : gv.size(), T(0));
                   auto wt = weights.data();
                   for (std::int64_t i = 0; i < H; ++i) {
                     for (std::int64_t y = 0; y < h; ++y) {
                       const auto sy = window_start(y, m, h, Padding::clamp);
                       for (std::int64_t x = 0; x < w; ++x) {
                         const auto p = y * w + x;
                         const auto x0 = sx[static_cast<std::size_t>(x)];
                         detail::CVecMap<T> go(gt.data() + (i * P + p) * d, d);
                         for (std::int64_t dy = 0; dy < m; ++dy) {
                           const auto vofs = (i * P + (sy + dy) * w + x0) * d;
                           const auto wofs = ((i * m + dy) * m) * P + p;
                           if (!gw.empty()) {
                             detail::StridedVec<T>(gw.data() + wofs, m, Eigen::InnerStride<>(P)) +=
                                 detail::CMapR<T>(vt->data() + vofs, m, d) * go;
                           }
                           if (!gvt.empty()) {
                             detail::MapR<T>(gvt.data() + vofs, m, d).noalias() +=
                                 detail::CStridedVec<T>(wt.data() + wofs, m, Eigen::InnerStride<>(P)) *
                                 go.transpose();
                           }
                         }
                       }
                     }
                   }
                   if (!gv.empty()) detail::add_channel_major(gv, gvt, H, d, P);
                 });
  return out;
}

/// Pre-norm transformer block with neighborhood self-attention and a 4x MLP.
template <typename T>
struct NATBlock {
  std::int64_t dim = 0;
  std::int64_t heads = 1;
  int window = 3;
  bool use_relbias = true;
  LayerNorm<T> norm1;
  Linear1x1<T> q, k, v, proj;
  Tensor<T> relbias;
  LayerNorm<T> norm2;
  Linear1x1<T> fc1, fc2;

  NATBlock() = default;
  NATBlock(std::int64_t dim_, std::int64_t head_dim, int window_, bool use_relbias_, Rng& rng)
      : dim(dim_), window(window_), use_relbias(use_relbias_) {
    if (head_dim < 1 || dim % head_dim != 0) {
      throw ConfigError("NAT block: dim " + std::to_string(dim) +
                        " is not divisible by head dim " + std::to_string(head_dim));
    }
    if (window < 1 || window % 2 == 0) throw ConfigError("NAT block: window must be odd");
    heads = dim / head_dim;
    norm1 = LayerNorm<T>(dim);
    q = Linear1x1<T>(dim, dim, rng);
    k = Linear1x1<T>(dim, dim, rng);
    v = Linear1x1<T>(dim, dim, rng);
    proj = Linear1x1<T>(dim, dim, rng);
    relbias = const_param<T>({heads, 2 * window - 1, 2 * window - 1}, T(0));
    norm2 = LayerNorm<T>(dim);
    fc1 = Linear1x1<T>(dim, 4 * dim, rng);
    fc2 = Linear1x1<T>(4 * dim, dim, rng);
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    detail::require_rank(x, 3, "nat_block_forward", "input");
    if (x.dim(0) != dim) {
      throw DimensionError("nat_block_forward: expected " + std::to_string(dim) +
                           " channels, got " + shape_str(x.shape()));
    }
    const auto h = x.dim(1), w = x.dim(2);
    const Shape split{heads, dim / heads, h, w};
    const auto y = norm1(x);
    const auto maps = na_maps(fitted_window(window, h, w), reshape(q(y), split),
                              reshape(k(y), split),
                              use_relbias ? relbias : Tensor<T>{});
    const auto attn = reshape(na_aggregate(maps, reshape(v(y), split)), {dim, h, w});
    const auto x1 = add(x, proj(attn));
    return add(x1, fc2(gelu(fc1(norm2(x1)))));
  }

  /// Zeroes both residual branch outputs, making the block an identity.
  void zero_residual_branches() {
    proj.zero();
    fc2.zero();
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    norm1.collect(out, join_name(prefix, "norm1"));
    q.collect(out, join_name(prefix, "q"));
    k.collect(out, join_name(prefix, "k"));
    v.collect(out, join_name(prefix, "v"));
    proj.collect(out, join_name(prefix, "proj"));
    if (use_relbias) out.push_back({join_name(prefix, "relbias"), relbias});
    norm2.collect(out, join_name(prefix, "norm2"));
    fc1.collect(out, join_name(prefix, "fc1"));
    fc2.collect(out, join_name(prefix, "fc2"));
  }
};

/// Three pointwise projections to f^2 * D/2 channels, each viewed as f^2 heads
/// of dimension D/2.
template <typename T>
struct QKVProjection {
  std::int64_t dim = 0;
  int factor = 2;
  Linear1x1<T> q, k, v;

  QKVProjection() = default;
  QKVProjection(std::int64_t dim_, int factor_, Rng& rng) : dim(dim_), factor(factor_) {
    if (dim % 2 != 0) throw ConfigError("QKV projection: embedding dim must be even");
    q = Linear1x1<T>(dim, out_channels(), rng);
    k = Linear1x1<T>(dim, out_channels(), rng);
    v = Linear1x1<T>(dim, out_channels(), rng);
  }

  std::int64_t heads() const { return static_cast<std::int64_t>(factor) * factor; }
  std::int64_t head_dim() const { return dim / 2; }
  std::int64_t out_channels() const { return heads() * head_dim(); }

  std::tuple<Tensor<T>, Tensor<T>, Tensor<T>> operator()(const Tensor<T>& e) const {
    const Shape split{heads(), head_dim(), e.dim(1), e.dim(2)};
    return {reshape(q(e), split), reshape(k(e), split), reshape(v(e), split)};
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    q.collect(out, join_name(prefix, "q"));
    k.collect(out, join_name(prefix, "k"));
    v.collect(out, join_name(prefix, "v"));
  }
};

}  // namespace flowup
