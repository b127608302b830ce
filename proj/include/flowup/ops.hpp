#pragma once

// Differentiable tensor operations. Spatial ops use unbatched (C, H, W) layout.

#include <Eigen/Core>
#include <unsupported/Eigen/SpecialFunctions>

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <vector>

#include "flowup/tensor.hpp"

namespace flowup {

namespace detail {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw DimensionError(msg);
}

template <typename T>
void require_rank(const Tensor<T>& t, int rank, const char* op, const char* name) {
  if (t.ndim() != rank) {
    throw DimensionError(std::string(op) + ": " + name + " must have rank " +
                         std::to_string(rank) + ", got shape " + shape_str(t.shape()));
  }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

template <typename T>
using ArrMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using CArrMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

template <typename T>
CArrMap<T> arr(std::span<const T> s) {
  return CArrMap<T>(s.data(), static_cast<Eigen::Index>(s.size()));
}
template <typename T>
ArrMap<T> arr(std::span<T> s) {
  return ArrMap<T>(s.data(), static_cast<Eigen::Index>(s.size()));
}

// Records the sign pattern seen by non-smooth ops while active, so a
// finite-difference probe can tell when its stencil straddles a kink.
struct KinkProbe {
  std::uint64_t signature = 0xcbf29ce484222325ULL;
};
inline thread_local KinkProbe* kink_probe = nullptr;

template <typename T>
void note_signs(std::span<const T> x) {
  if (!kink_probe) return;
  auto h = kink_probe->signature;
  for (auto v : x) h = (h ^ static_cast<std::uint64_t>(v > T(0) ? 1 : (v < T(0) ? 2 : 3))) * 0x100000001b3ULL;
  kink_probe->signature = h;
}

template <typename T>
void accumulate(std::span<T> dst, std::span<const T> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
  detail::record(out, "add", {&a, &b}, [a, b](std::span<const T> g) {
    if (auto ga = detail::grad_sink(a); !ga.empty()) detail::accumulate(ga, g);
    if (auto gb = detail::grad_sink(b); !gb.empty()) detail::accumulate(gb, g);
  });
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor<T> out(a.shape());
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] - y[i];
  detail::record(out, "sub", {&a, &b}, [a, b](std::span<const T> g) {
    if (auto ga = detail::grad_sink(a); !ga.empty()) detail::accumulate(ga, g);
    if (auto gb = detail::grad_sink(b); !gb.empty()) {
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
  detail::record(out, "mul", {&a, &b}, [a, b](std::span<const T> g) {
    auto x = a.data();
    auto y = b.data();
    if (auto ga = detail::grad_sink(a); !ga.empty()) {
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * y[i];
    }
    if (auto gb = detail::grad_sink(b); !gb.empty()) {
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * x[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  Tensor<T> out(a.shape());
  auto o = out.data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * factor;
  detail::record(out, "scale", {&a}, [a, factor](std::span<const T> g) {
    auto ga = detail::grad_sink(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * factor;
  });
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  Tensor<T> out(a.shape());
  auto o = out.data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] > T(0) ? x[i] : T(0);
  detail::note_signs(x);
  detail::record(out, "relu", {&a}, [a](std::span<const T> g) {
    auto ga = detail::grad_sink(a);
    auto x = a.data();
    for (std::size_t i = 0; i < ga.size(); ++i) {
      if (x[i] > T(0)) ga[i] += g[i];
    }
  });
  return out;
}

/// Exact (erf) GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr T kInvSqrt2 = T(0.70710678118654752440);
  Tensor<T> out(a.shape());
  const auto x = detail::arr(a.data());
  detail::arr(out.data()) = T(0.5) * x * (T(1) + (x * kInvSqrt2).erf());
  detail::record(out, "gelu", {&a}, [a](std::span<const T> g) {
    constexpr T kInvSqrt2Pi = T(0.39894228040143267794), kHalfSqrt = T(0.70710678118654752440);
    auto ga = detail::grad_sink(a);
    const auto x = detail::arr(a.data());
    detail::arr(ga) += detail::arr(g) * (T(0.5) * (T(1) + (x * kHalfSqrt).erf()) +
                                         x * kInvSqrt2Pi * (T(-0.5) * x.square()).exp());
  });
  return out;
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& a) {
  Tensor<T> out(a.shape());
  auto o = out.data();
  auto x = a.data();
  detail::arr(o) = detail::arr(x).tanh();
  detail::record(out, "tanh", {&a}, [a, y = out.values()](std::span<const T> g) {
    auto ga = detail::grad_sink(a);
    const auto yv = detail::arr(std::span<const T>(y));
    detail::arr(ga) += detail::arr(g) * (T(1) - yv.square());
  });
  return out;
}

template <typename T>
Tensor<T> abs(const Tensor<T>& a) {
  Tensor<T> out(a.shape());
  auto o = out.data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::abs(x[i]);
  detail::note_signs(x);
  detail::record(out, "abs", {&a}, [a](std::span<const T> g) {
    auto ga = detail::grad_sink(a);
    auto x = a.data();
    for (std::size_t i = 0; i < ga.size(); ++i) {
      ga[i] += x[i] > T(0) ? g[i] : (x[i] < T(0) ? -g[i] : T(0));
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = T(0);
  for (auto v : a.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  detail::record(out, "sum", {&a}, [a](std::span<const T> g) {
    auto ga = detail::grad_sink(a);
    for (auto& v : ga) v += g[0];
  });
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.numel() == 0) throw DimensionError("mean of empty tensor");
  T acc = T(0);
  for (auto v : a.data()) acc += v;
  const T inv = T(1) / static_cast<T>(a.numel());
  Tensor<T> out = Tensor<T>::scalar(acc * inv);
  detail::record(out, "mean", {&a}, [a, inv](std::span<const T> g) {
    auto ga = detail::grad_sink(a);
    for (auto& v : ga) v += g[0] * inv;
  });
  return out;
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(shape));
  }
  Tensor<T> out(std::move(shape), a.values());
  detail::record(out, "reshape", {&a}, [a](std::span<const T> g) {
    detail::accumulate(detail::grad_sink(a), g);
  });
  return out;
}

/// Concatenates along `axis`; all other extents must agree.
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const int rank = parts.front().ndim();
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw DimensionError("concat: axis out of range");
  Shape shape = parts.front().shape();
  std::int64_t total = 0;
  for (const auto& p : parts) {
    if (p.ndim() != rank) throw DimensionError("concat: rank mismatch");
    for (int d = 0; d < rank; ++d) {
      if (d != axis && p.dim(d) != shape[static_cast<std::size_t>(d)]) {
        throw DimensionError("concat: extent mismatch on axis " + std::to_string(d) + ": " +
                             shape_str(p.shape()) + " vs " + shape_str(shape));
      }
    }
    total += p.dim(axis);
  }
  shape[static_cast<std::size_t>(axis)] = total;
  std::int64_t outer = 1;
  std::int64_t inner = 1;
  for (int d = 0; d < axis; ++d) outer *= shape[static_cast<std::size_t>(d)];
  for (int d = axis + 1; d < rank; ++d) inner *= shape[static_cast<std::size_t>(d)];

  Tensor<T> out(shape);
  auto o = out.data();
  std::vector<std::int64_t> offsets;
  std::int64_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::int64_t len = p.dim(axis) * inner;
    auto src = p.data();
    for (std::int64_t r = 0; r < outer; ++r) {
      std::copy_n(src.begin() + r * len, len, o.begin() + r * total * inner + off * inner);
    }
    off += p.dim(axis);
  }
  detail::record_many<T>(out, "concat", parts,
                         [parts, offsets, outer, inner, total, axis](std::span<const T> g) {
                           for (std::size_t k = 0; k < parts.size(); ++k) {
                             auto gp = detail::grad_sink(parts[k]);
                             if (gp.empty()) continue;
                             const std::int64_t len = parts[k].dim(axis) * inner;
                             for (std::int64_t r = 0; r < outer; ++r) {
                               const auto* src = g.data() + r * total * inner + offsets[k] * inner;
                               for (std::int64_t i = 0; i < len; ++i) gp[r * len + i] += src[i];
                             }
                           }
                         });
  return out;
}

/// Stacks `count` copies of `a` along a new leading axis.
template <typename T>
Tensor<T> repeat(const Tensor<T>& a, std::int64_t count) {
  Shape shape = a.shape();
  shape.insert(shape.begin(), count);
  Tensor<T> out(shape);
  auto o = out.data();
  const auto n = a.numel();
  for (std::int64_t k = 0; k < count; ++k) std::copy_n(a.data().begin(), n, o.begin() + k * n);
  detail::record(out, "repeat", {&a}, [a, count, n](std::span<const T> g) {
    auto ga = detail::grad_sink(a);
    for (std::int64_t k = 0; k < count; ++k) {
      for (std::int64_t i = 0; i < n; ++i) ga[i] += g[k * n + i];
    }
  });
  return out;
}

/// (f*f, C, h, w) -> (C, f*h, f*w); slice i lands at row offset i / f and
/// column offset i % f inside each f x f block.
template <typename T>
Tensor<T> pixel_shuffle(const Tensor<T>& a, int factor) {
  detail::require_rank(a, 4, "pixel_shuffle", "input");
  const std::int64_t f = factor;
  if (a.dim(0) != f * f) {
    throw DimensionError("pixel_shuffle: leading extent " + std::to_string(a.dim(0)) +
                         " != factor^2 = " + std::to_string(f * f));
  }
  const auto C = a.dim(1), h = a.dim(2), w = a.dim(3);
  Tensor<T> out({C, f * h, f * w});
  auto o = out.data();
  auto x = a.data();
  const auto W = f * w;
  for (std::int64_t i = 0; i < f * f; ++i) {
    const auto oy = i / f, ox = i % f;
    for (std::int64_t c = 0; c < C; ++c) {
      for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t xx = 0; xx < w; ++xx) {
          o[(c * f * h + f * y + oy) * W + f * xx + ox] = x[((i * C + c) * h + y) * w + xx];
        }
      }
    }
  }
  detail::record(out, "pixel_shuffle", {&a}, [a, f, C, h, w](std::span<const T> g) {
    auto ga = detail::grad_sink(a);
    const auto W = f * w;
    for (std::int64_t i = 0; i < f * f; ++i) {
      const auto oy = i / f, ox = i % f;
      for (std::int64_t c = 0; c < C; ++c) {
        for (std::int64_t y = 0; y < h; ++y) {
          for (std::int64_t xx = 0; xx < w; ++xx) {
            ga[((i * C + c) * h + y) * w + xx] += g[(c * f * h + f * y + oy) * W + f * xx + ox];
          }
        }
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Softmax and normalization

/// Softmax along `axis` with max subtraction. NaN inputs propagate.
template <typename T>
Tensor<T> softmax(const Tensor<T>& a, int axis) {
  const int rank = a.ndim();
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    throw DimensionError("softmax: axis out of range for shape " + shape_str(a.shape()));
  }
  std::int64_t outer = 1, inner = 1;
  const std::int64_t n = a.dim(axis);
  for (int d = 0; d < axis; ++d) outer *= a.dim(d);
  for (int d = axis + 1; d < rank; ++d) inner *= a.dim(d);

  Tensor<T> out(a.shape());
  auto o = out.data();
  auto x = a.data();
  for (std::int64_t r = 0; r < outer; ++r) {
    for (std::int64_t c = 0; c < inner; ++c) {
      const std::int64_t base = r * n * inner + c;
      T mx = -std::numeric_limits<T>::infinity();
      bool nan = false;
      for (std::int64_t k = 0; k < n; ++k) {
        const T v = x[base + k * inner];
        if (std::isnan(v)) nan = true;
        mx = std::max(mx, v);
      }
      if (nan) {
        for (std::int64_t k = 0; k < n; ++k) o[base + k * inner] = std::numeric_limits<T>::quiet_NaN();
        continue;
      }
      T total = T(0);
      for (std::int64_t k = 0; k < n; ++k) {
        const T e = std::exp(x[base + k * inner] - mx);
        o[base + k * inner] = e;
        total += e;
      }
      const T inv = T(1) / total;
      for (std::int64_t k = 0; k < n; ++k) o[base + k * inner] *= inv;
    }
  }
  detail::record(out, "softmax", {&a},
                 [a, y = out.values(), outer, inner, n](std::span<const T> g) {
                   auto ga = detail::grad_sink(a);
                   for (std::int64_t r = 0; r < outer; ++r) {
                     for (std::int64_t c = 0; c < inner; ++c) {
                       const std::int64_t base = r * n * inner + c;
                       T dot = T(0);
                       for (std::int64_t k = 0; k < n; ++k) {
                         dot += g[base + k * inner] * y[base + k * inner];
                       }
                       for (std::int64_t k = 0; k < n; ++k) {
                         const auto idx = base + k * inner;
                         ga[idx] += y[idx] * (g[idx] - dot);
                       }
                     }
                   }
                 });
  return out;
}

namespace detail {

// Normalizes `groups` independent sets of `count` values; element k of group
// j lives at j * group_stride + k * elem_stride. Optional affine is indexed by
// the affine index function.
template <typename T>
struct NormLayout {
  std::int64_t groups, count, group_stride, elem_stride;
  std::int64_t index(std::int64_t j, std::int64_t k) const {
    return j * group_stride + k * elem_stride;
  }
};

template <typename T>
void norm_forward(const NormLayout<T>& L, std::span<const T> x, std::span<T> xhat,
                  Buffer<T>& inv_std, T eps) {
  inv_std.resize(static_cast<std::size_t>(L.groups));
  for (std::int64_t j = 0; j < L.groups; ++j) {
    T mu = T(0);
    for (std::int64_t k = 0; k < L.count; ++k) mu += x[L.index(j, k)];
    mu /= static_cast<T>(L.count);
    T var = T(0);
    for (std::int64_t k = 0; k < L.count; ++k) {
      const T d = x[L.index(j, k)] - mu;
      var += d * d;
    }
    var /= static_cast<T>(L.count);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(j)] = is;
    for (std::int64_t k = 0; k < L.count; ++k) {
      xhat[L.index(j, k)] = (x[L.index(j, k)] - mu) * is;
    }
  }
}

// dx for normalized output given d(xhat).
template <typename T>
void norm_backward(const NormLayout<T>& L, std::span<const T> xhat, std::span<const T> dxhat,
                   const Buffer<T>& inv_std, std::span<T> dx) {
  for (std::int64_t j = 0; j < L.groups; ++j) {
    T m1 = T(0), m2 = T(0);
    for (std::int64_t k = 0; k < L.count; ++k) {
      const auto idx = L.index(j, k);
      m1 += dxhat[idx];
      m2 += dxhat[idx] * xhat[idx];
    }
    m1 /= static_cast<T>(L.count);
    m2 /= static_cast<T>(L.count);
    const T is = inv_std[static_cast<std::size_t>(j)];
    for (std::int64_t k = 0; k < L.count; ++k) {
      const auto idx = L.index(j, k);
      dx[idx] += is * (dxhat[idx] - m1 - xhat[idx] * m2);
    }
  }
}

}  // namespace detail

/// Per-pixel normalization across the channel axis of a (D, H, W) tensor,
/// followed by a per-channel affine.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
  detail::require_rank(x, 3, "layer_norm", "input");
  const auto D = x.dim(0), P = x.dim(1) * x.dim(2);
  detail::require(gamma.numel() == D && beta.numel() == D,
                  "layer_norm: affine parameters must have " + std::to_string(D) + " entries");
  detail::NormLayout<T> L{P, D, 1, P};
  Buffer<T> xhat(static_cast<std::size_t>(x.numel()));
  Buffer<T> inv_std;
  detail::norm_forward<T>(L, x.data(), xhat, inv_std, eps);
  Tensor<T> out(x.shape());
  auto o = out.data();
  auto gm = gamma.data();
  auto bt = beta.data();
  for (std::int64_t c = 0; c < D; ++c) {
    for (std::int64_t p = 0; p < P; ++p) o[c * P + p] = xhat[c * P + p] * gm[c] + bt[c];
  }
  detail::record(out, "layer_norm", {&x, &gamma, &beta},
                 [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), L, D,
                  P](std::span<const T> g) {
                   auto gm = gamma.data();
                   if (auto gg = detail::grad_sink(gamma); !gg.empty()) {
                     for (std::int64_t c = 0; c < D; ++c) {
                       T acc = T(0);
                       for (std::int64_t p = 0; p < P; ++p) acc += g[c * P + p] * xhat[c * P + p];
                       gg[c] += acc;
                     }
                   }
                   if (auto gb = detail::grad_sink(beta); !gb.empty()) {
                     for (std::int64_t c = 0; c < D; ++c) {
                       T acc = T(0);
                       for (std::int64_t p = 0; p < P; ++p) acc += g[c * P + p];
                       gb[c] += acc;
                     }
                   }
                   if (auto gx = detail::grad_sink(x); !gx.empty()) {
                     Buffer<T> dxhat(g.size());
                     for (std::int64_t c = 0; c < D; ++c) {
                       for (std::int64_t p = 0; p < P; ++p) dxhat[c * P + p] = g[c * P + p] * gm[c];
                     }
                     detail::norm_backward<T>(L, xhat, dxhat, inv_std, gx);
                   }
                 });
  return out;
}

/// Per-channel normalization over the spatial extent of a (C, H, W) tensor
/// (no affine).
template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x, T eps = T(1e-5)) {
  detail::require_rank(x, 3, "instance_norm", "input");
  const auto C = x.dim(0), P = x.dim(1) * x.dim(2);
  detail::NormLayout<T> L{C, P, P, 1};
  Tensor<T> out(x.shape());
  Buffer<T> inv_std;
  detail::norm_forward<T>(L, x.data(), out.data(), inv_std, eps);
  detail::record(out, "instance_norm", {&x},
                 [x, xhat = out.values(), inv_std = std::move(inv_std), L](std::span<const T> g) {
                   detail::norm_backward<T>(L, xhat, g, inv_std, detail::grad_sink(x));
                 });
  return out;
}

// ---------------------------------------------------------------------------
// Convolution

/// Cross-correlation with zero padding: input (C, H, W), weight (O, C, k, k),
/// optional bias (O). Output extent (H + 2 pad - k) / stride + 1.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 int stride = 1, int pad = 0) {
  detail::require_rank(input, 3, "conv2d", "input");
  detail::require_rank(weight, 4, "conv2d", "weight");
  const auto C = input.dim(0), H = input.dim(1), W = input.dim(2);
  const auto O = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != C) {
    throw DimensionError("conv2d: weight axis 1 (" + std::to_string(weight.dim(1)) +
                         ") != input axis 0 (" + std::to_string(C) + ")");
  }
  if (weight.dim(3) != k) throw DimensionError("conv2d: weight axes 2 and 3 must match");
  if (k % 2 == 0) throw DimensionError("conv2d: kernel extent must be odd");
  if (stride < 1 || pad < 0) throw DimensionError("conv2d: stride >= 1 and pad >= 0 required");
  if (bias.defined() && bias.numel() != O) {
    throw DimensionError("conv2d: bias has " + std::to_string(bias.numel()) +
                         " entries, expected " + std::to_string(O));
  }
  if (H + 2 * pad < k || W + 2 * pad < k) {
    throw DimensionError("conv2d: kernel larger than padded input on axes 1/2");
  }
  const auto Ho = (H + 2 * pad - k) / stride + 1;
  const auto Wo = (W + 2 * pad - k) / stride + 1;
  const auto P = Ho * Wo;
  const auto K = C * k * k;

  auto col = std::make_shared<Buffer<T>>();
  const bool direct = (k == 1 && stride == 1 && pad == 0);
  if (!direct) {
    col->assign(static_cast<std::size_t>(K * P), T(0));
    auto x = input.data();
    for (std::int64_t c = 0; c < C; ++c) {
      for (std::int64_t ky = 0; ky < k; ++ky) {
        for (std::int64_t kx = 0; kx < k; ++kx) {
          T* row = col->data() + ((c * k + ky) * k + kx) * P;
          for (std::int64_t oy = 0; oy < Ho; ++oy) {
            const auto iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= H) continue;
            const T* src = x.data() + (c * H + iy) * W;
            for (std::int64_t ox = 0; ox < Wo; ++ox) {
              const auto ix = ox * stride - pad + kx;
              if (ix >= 0 && ix < W) row[oy * Wo + ox] = src[ix];
            }
          }
        }
      }
    }
  }
  const T* col_ptr = direct ? input.data().data() : col->data();

  Tensor<T> out({O, Ho, Wo});
  {
    detail::CMapR<T> wm(weight.data().data(), O, K);
    detail::CMapR<T> cm(col_ptr, K, P);
    detail::MapR<T> om(out.data().data(), O, P);
    om.noalias() = wm * cm;
    if (bias.defined()) {
      auto b = bias.data();
      for (std::int64_t o = 0; o < O; ++o) om.row(o).array() += b[o];
    }
  }
  detail::record(out, "conv2d", {&input, &weight, &bias},
                 [input, weight, bias, col, direct, C, H, W, O, k, stride, pad, Ho, Wo, P,
                  K](std::span<const T> g) {
                   detail::CMapR<T> gm(g.data(), O, P);
                   const T* col_ptr = direct ? input.data().data() : col->data();
                   if (auto gw = detail::grad_sink(weight); !gw.empty()) {
                     detail::MapR<T> gwm(gw.data(), O, K);
                     gwm.noalias() += gm * detail::CMapR<T>(col_ptr, K, P).transpose();
                   }
                   if (auto gb = detail::grad_sink(bias); !gb.empty()) {
                     for (std::int64_t o = 0; o < O; ++o) gb[o] += gm.row(o).sum();
                   }
                   auto gx = detail::grad_sink(input);
                   if (gx.empty()) return;
                   detail::CMapR<T> wm(weight.data().data(), O, K);
                   if (direct) {
                     detail::MapR<T> gxm(gx.data(), K, P);
                     gxm.noalias() += wm.transpose() * gm;
                     return;
                   }
                   detail::MatR<T> dcol = wm.transpose() * gm;
                   for (std::int64_t c = 0; c < C; ++c) {
                     for (std::int64_t ky = 0; ky < k; ++ky) {
                       for (std::int64_t kx = 0; kx < k; ++kx) {
                         const T* row = dcol.data() + ((c * k + ky) * k + kx) * P;
                         for (std::int64_t oy = 0; oy < Ho; ++oy) {
                           const auto iy = oy * stride - pad + ky;
                           if (iy < 0 || iy >= H) continue;
                           T* dst = gx.data() + (c * H + iy) * W;
                           for (std::int64_t ox = 0; ox < Wo; ++ox) {
                             const auto ix = ox * stride - pad + kx;
                             if (ix >= 0 && ix < W) dst[ix] += row[oy * Wo + ox];
                           }
                         }
                       }
                     }
                   }
                 });
  return out;
}

/// Pointwise projection: input (C, H, W), weight (O, C), optional bias (O).
template <typename T>
Tensor<T> linear_1x1(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  detail::require_rank(input, 3, "linear_1x1", "input");
  detail::require_rank(weight, 2, "linear_1x1", "weight");
  const auto C = input.dim(0), O = weight.dim(0);
  if (weight.dim(1) != C) {
    throw DimensionError("linear_1x1: weight axis 1 (" + std::to_string(weight.dim(1)) +
                         ") != input axis 0 (" + std::to_string(C) + ")");
  }
  if (bias.defined() && bias.numel() != O) {
    throw DimensionError("linear_1x1: bias has " + std::to_string(bias.numel()) +
                         " entries, expected " + std::to_string(O));
  }
  const auto P = input.dim(1) * input.dim(2);
  Tensor<T> out({O, input.dim(1), input.dim(2)});
  detail::MapR<T> om(out.data().data(), O, P);
  om.noalias() = detail::CMapR<T>(weight.data().data(), O, C) *
                 detail::CMapR<T>(input.data().data(), C, P);
  if (bias.defined()) {
    auto b = bias.data();
    for (std::int64_t o = 0; o < O; ++o) om.row(o).array() += b[o];
  }
  detail::record(out, "linear_1x1", {&input, &weight, &bias},
                 [input, weight, bias, C, O, P](std::span<const T> g) {
                   detail::CMapR<T> gm(g.data(), O, P);
                   if (auto gw = detail::grad_sink(weight); !gw.empty()) {
                     detail::MapR<T>(gw.data(), O, C).noalias() +=
                         gm * detail::CMapR<T>(input.data().data(), C, P).transpose();
                   }
                   if (auto gb = detail::grad_sink(bias); !gb.empty()) {
                     for (std::int64_t o = 0; o < O; ++o) gb[o] += gm.row(o).sum();
                   }
                   if (auto gx = detail::grad_sink(input); !gx.empty()) {
                     detail::MapR<T>(gx.data(), C, P).noalias() +=
                         detail::CMapR<T>(weight.data().data(), O, C).transpose() * gm;
                   }
                 });
  return out;
}

// ---------------------------------------------------------------------------
// Resampling

namespace detail {

struct LinearTap {
  std::int64_t i0, i1;
  double w1;
};

// Half-pixel-centre source coordinates (align_corners = false), clamped.
inline std::vector<LinearTap> linear_taps(std::int64_t in, std::int64_t out) {
  std::vector<LinearTap> taps(static_cast<std::size_t>(out));
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::int64_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto i0 = static_cast<std::int64_t>(std::floor(src));
    const auto i1 = std::min(i0 + 1, in - 1);
    taps[static_cast<std::size_t>(o)] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace detail

/// Bilinear resize of a (C, H, W) tensor to (C, out_h, out_w). When
/// `scale_flow` is set the input must be a 2-channel flow field and the
/// u / v channels are multiplied by the horizontal / vertical resize ratio.
template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, std::int64_t out_h, std::int64_t out_w,
                          bool scale_flow = false) {
  detail::require_rank(x, 3, "bilinear_resize", "input");
  if (out_h < 1 || out_w < 1) throw DimensionError("bilinear_resize: empty output extent");
  const auto C = x.dim(0), H = x.dim(1), W = x.dim(2);
  if (scale_flow && C != 2) throw DimensionError("bilinear_resize: flow scaling needs 2 channels");
  const auto ty = detail::linear_taps(H, out_h);
  const auto tx = detail::linear_taps(W, out_w);
  Buffer<T> channel_scale(static_cast<std::size_t>(C), T(1));
  if (scale_flow) {
    channel_scale[0] = static_cast<T>(static_cast<double>(out_w) / static_cast<double>(W));
    channel_scale[1] = static_cast<T>(static_cast<double>(out_h) / static_cast<double>(H));
  }
  Tensor<T> out({C, out_h, out_w});
  auto o = out.data();
  auto in = x.data();
  for (std::int64_t c = 0; c < C; ++c) {
    const T* src = in.data() + c * H * W;
    for (std::int64_t y = 0; y < out_h; ++y) {
      const auto& a = ty[static_cast<std::size_t>(y)];
      for (std::int64_t xx = 0; xx < out_w; ++xx) {
        const auto& b = tx[static_cast<std::size_t>(xx)];
        const double top = (1 - b.w1) * src[a.i0 * W + b.i0] + b.w1 * src[a.i0 * W + b.i1];
        const double bot = (1 - b.w1) * src[a.i1 * W + b.i0] + b.w1 * src[a.i1 * W + b.i1];
        o[(c * out_h + y) * out_w + xx] =
            static_cast<T>(((1 - a.w1) * top + a.w1 * bot)) * channel_scale[static_cast<std::size_t>(c)];
      }
    }
  }
  detail::record(out, "bilinear_resize", {&x},
                 [x, ty, tx, channel_scale, C, H, W, out_h, out_w](std::span<const T> g) {
                   auto gx = detail::grad_sink(x);
                   for (std::int64_t c = 0; c < C; ++c) {
                     T* dst = gx.data() + c * H * W;
                     const T s = channel_scale[static_cast<std::size_t>(c)];
                     for (std::int64_t y = 0; y < out_h; ++y) {
                       const auto& a = ty[static_cast<std::size_t>(y)];
                       for (std::int64_t xx = 0; xx < out_w; ++xx) {
                         const auto& b = tx[static_cast<std::size_t>(xx)];
                         const T v = g[(c * out_h + y) * out_w + xx] * s;
                         dst[a.i0 * W + b.i0] += static_cast<T>((1 - a.w1) * (1 - b.w1)) * v;
                         dst[a.i0 * W + b.i1] += static_cast<T>((1 - a.w1) * b.w1) * v;
                         dst[a.i1 * W + b.i0] += static_cast<T>(a.w1 * (1 - b.w1)) * v;
                         dst[a.i1 * W + b.i1] += static_cast<T>(a.w1 * b.w1) * v;
                       }
                     }
                   }
                 });
  return out;
}

/// Box-filter downsampling of a (C, H, W) tensor by an integer factor.
/// Accumulates in double so that a block of identical values reproduces the
/// value exactly.
template <typename T>
Tensor<T> avg_downsample(const Tensor<T>& x, int factor) {
  detail::require_rank(x, 3, "avg_downsample", "input");
  const auto C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const std::int64_t f = factor;
  if (f < 1 || H % f != 0 || W % f != 0) {
    throw DimensionError("avg_downsample: extents " + shape_str(x.shape()) +
                         " not divisible by factor " + std::to_string(f));
  }
  const auto h = H / f, w = W / f;
  Tensor<T> out({C, h, w});
  auto o = out.data();
  auto in = x.data();
  const double inv = 1.0 / static_cast<double>(f * f);
  for (std::int64_t c = 0; c < C; ++c) {
    for (std::int64_t y = 0; y < h; ++y) {
      for (std::int64_t xx = 0; xx < w; ++xx) {
        double acc = 0.0;
        for (std::int64_t dy = 0; dy < f; ++dy) {
          for (std::int64_t dx = 0; dx < f; ++dx) acc += in[(c * H + y * f + dy) * W + xx * f + dx];
        }
        o[(c * h + y) * w + xx] = static_cast<T>(acc * inv);
      }
    }
  }
  detail::record(out, "avg_downsample", {&x}, [x, C, H, W, h, w, f, inv](std::span<const T> g) {
    auto gx = detail::grad_sink(x);
    for (std::int64_t c = 0; c < C; ++c) {
      for (std::int64_t y = 0; y < H; ++y) {
        for (std::int64_t xx = 0; xx < W; ++xx) {
          gx[(c * H + y) * W + xx] += g[(c * h + y / f) * w + xx / f] * static_cast<T>(inv);
        }
      }
    }
  });
  return out;
}

}  // namespace flowup
