#pragma once

// Transformer convex upsampler: a chain of factor-2 steps, each embedding
// (features, image features, flow), refining the embedding with NAT blocks
// and using 4-head local attention maps both to upsample the flow and to
// produce half-width features for the next step.

#include <array>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "flowup/neighborhood_attention.hpp"

namespace flowup {

// ---------------------------------------------------------------------------
// Context encoder

template <typename T>
struct ResidualBlock {
  Conv2d<T> conv1, conv2;
  std::optional<Conv2d<T>> shortcut;

  ResidualBlock() = default;
  ResidualBlock(std::int64_t in, std::int64_t out, int stride, Rng& rng)
      : conv1(in, out, 3, stride, rng, false), conv2(out, out, 3, 1, rng, false) {
    if (stride != 1 || in != out) shortcut.emplace(in, out, 1, stride, rng, false);
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    auto y = gelu(instance_norm(conv1(x)));
    y = instance_norm(conv2(y));
    const auto skip = shortcut ? instance_norm((*shortcut)(x)) : x;
    return gelu(add(skip, y));
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    conv1.collect(out, join_name(prefix, "conv1"));
    conv2.collect(out, join_name(prefix, "conv2"));
    if (shortcut) shortcut->collect(out, join_name(prefix, "shortcut"));
  }
};

template <typename T>
struct ContextFeatures {
  Tensor<T> half;     // (c0, H/2, W/2)
  Tensor<T> quarter;  // (c1, H/4, W/4)
  Tensor<T> eighth;   // (c2, H/8, W/8)
};

/// Three stages, each halving resolution: a strided residual block followed
/// by a plain one.
template <typename T>
struct ContextEncoder {
  std::array<std::int64_t, 3> channels{64, 96, 128};
  std::array<std::array<ResidualBlock<T>, 2>, 3> stages;

  ContextEncoder() = default;
  ContextEncoder(std::array<std::int64_t, 3> channels_, Rng& rng) : channels(channels_) {
    std::int64_t in = 3;
    for (std::size_t s = 0; s < 3; ++s) {
      stages[s][0] = ResidualBlock<T>(in, channels[s], 2, rng);
      stages[s][1] = ResidualBlock<T>(channels[s], channels[s], 1, rng);
      in = channels[s];
    }
  }

  /// `image` is (3, H, W) in [0, 1] with H, W divisible by 8.
  ContextFeatures<T> encode(const Tensor<T>& image) const {
    detail::require_rank(image, 3, "context_encode", "image");
    if (image.dim(0) != 3) throw DimensionError("context_encode: image must have 3 channels");
    if (image.dim(1) % 8 != 0 || image.dim(2) % 8 != 0) {
      throw ConfigError("context_encode: image extent " + shape_str(image.shape()) +
                        " is not divisible by 8");
    }
    // [0, 1] -> [-1, 1]
    auto x = sub(scale(image, T(2)), Tensor<T>::full(image.shape(), T(1)));
    std::array<Tensor<T>, 3> outs;
    for (std::size_t s = 0; s < 3; ++s) {
      x = stages[s][1].forward(stages[s][0].forward(x));
      outs[s] = x;
    }
    return {outs[0], outs[1], outs[2]};
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    for (std::size_t s = 0; s < 3; ++s) {
      for (std::size_t b = 0; b < 2; ++b) {
        stages[s][b].collect(out, join_name(prefix, "r" + std::to_string(s) + "." +
                                                        std::to_string(b)));
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Upsampler configuration

struct UpsamplerConfig {
  int steps = 3;
  std::vector<int> mask_sizes{9, 7, 5};      // low -> high resolution
  std::vector<std::int64_t> dims{128, 64, 32};
  std::int64_t head_dim = 32;
  bool inject_features = true;
  bool use_relbias = true;
  int nat_blocks = 2;
  // Channels of the recurrent features and of the encoder at 1/2, 1/4, 1/8.
  std::int64_t hidden_channels = 128;
  std::array<std::int64_t, 3> context_channels{64, 96, 128};

  void validate() const {
    if (steps < 1) throw ConfigError("upsampler needs at least one step");
    if (static_cast<int>(mask_sizes.size()) != steps || static_cast<int>(dims.size()) != steps) {
      throw ConfigError("mask_sizes and dims must have one entry per step");
    }
    for (int m : mask_sizes) {
      if (m < 1 || m % 2 == 0) throw ConfigError("mask sizes must be odd, got " + std::to_string(m));
    }
    for (int s = 1; s < steps; ++s) {
      if (dims[static_cast<std::size_t>(s)] * 2 != dims[static_cast<std::size_t>(s - 1)]) {
        throw ConfigError("embedding dims must halve at every step");
      }
    }
    for (auto d : dims) {
      if (d % 2 != 0) throw ConfigError("embedding dims must be even");
      if (d % head_dim != 0 && head_dim % d != 0) {
        throw ConfigError("embedding dim " + std::to_string(d) + " incompatible with head dim " +
                          std::to_string(head_dim));
      }
    }
  }

  /// Encoder channels injected at step `s` (0 = coarsest), or 0 if none.
  std::int64_t image_channels(int s) const {
    // Step s runs at scale 1/2^(steps - s); the coarsest step always sees the
    // 1/8 features, finer ones only with feature injection.
    const int scale_index = 2 - s;  // 2 -> 1/8, 1 -> 1/4, 0 -> 1/2
    if (scale_index < 0) return 0;
    if (s > 0 && !inject_features) return 0;
    return context_channels[static_cast<std::size_t>(scale_index)];
  }

  std::int64_t step_in_channels(int s) const {
    const std::int64_t feat = s == 0 ? hidden_channels : dims[static_cast<std::size_t>(s - 1)] / 2;
    return feat + image_channels(s) + 2;
  }
};

// ---------------------------------------------------------------------------
// One factor-2 step

template <typename T>
struct TCUStepOutput {
  Tensor<T> flow;      // (2, 2h, 2w)
  Tensor<T> features;  // (D/2, 2h, 2w)
  LocalAttentionMaps<T> maps;
};

template <typename T>
struct TCUStep {
  static constexpr int kFactor = 2;

  std::int64_t in_channels = 0;
  std::int64_t dim = 0;
  int window = 3;
  bool use_relbias = true;
  Linear1x1<T> embed;
  std::vector<NATBlock<T>> blocks;
  QKVProjection<T> qkv;
  Tensor<T> lam_bias;

  TCUStep() = default;
  TCUStep(std::int64_t in_channels_, std::int64_t dim_, int window_, std::int64_t head_dim,
          int nat_blocks, bool use_relbias_, Rng& rng)
      : in_channels(in_channels_), dim(dim_), window(window_), use_relbias(use_relbias_) {
    embed = Linear1x1<T>(in_channels, dim, rng);
    const auto hd = std::min(head_dim, dim);
    for (int b = 0; b < nat_blocks; ++b) blocks.emplace_back(dim, hd, window, use_relbias, rng);
    qkv = QKVProjection<T>(dim, kFactor, rng);
    lam_bias = const_param<T>({qkv.heads(), 2 * window - 1, 2 * window - 1}, T(0));
  }

  /// `image_feat` may be undefined when nothing is injected at this scale.
  TCUStepOutput<T> forward(const Tensor<T>& flow_in, const Tensor<T>& feat_in,
                           const Tensor<T>& image_feat) const {
    detail::require_rank(flow_in, 3, "tcu_step", "flow");
    detail::require_rank(feat_in, 3, "tcu_step", "features");
    if (flow_in.dim(0) != 2) throw DimensionError("tcu_step: flow must have 2 channels");
    std::vector<Tensor<T>> parts{feat_in};
    if (image_feat.defined()) parts.push_back(image_feat);
    parts.push_back(flow_in);
    const auto cat = concat(parts, 0);
    if (cat.dim(0) != in_channels) {
      throw DimensionError("tcu_step: embedding input has " + std::to_string(cat.dim(0)) +
                           " channels, expected " + std::to_string(in_channels));
    }
    auto e = embed(cat);
    for (const auto& block : blocks) e = block.forward(e);
    auto [q, k, v] = qkv(e);
    // Grids smaller than the mask use the largest window that fits.
    auto maps = na_maps(fitted_window(window, flow_in.dim(1), flow_in.dim(2)), q, k,
                        use_relbias ? lam_bias : Tensor<T>{});
    auto flow_up = pixel_shuffle(na_aggregate(maps, repeat(flow_in, qkv.heads())), kFactor);
    auto h_up = pixel_shuffle(na_aggregate(maps, v), kFactor);
    return {flow_up, h_up, maps};
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    embed.collect(out, join_name(prefix, "embed"));
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      blocks[b].collect(out, join_name(prefix, "nat" + std::to_string(b)));
    }
    qkv.collect(out, join_name(prefix, "qkv"));
    if (use_relbias) out.push_back({join_name(prefix, "lam_bias"), lam_bias});
  }
};

// ---------------------------------------------------------------------------
// Full hierarchy

template <typename T>
struct TCU {
  UpsamplerConfig config;
  std::vector<TCUStep<T>> steps;

  TCU() = default;
  TCU(UpsamplerConfig cfg, Rng& rng) : config(std::move(cfg)) {
    config.validate();
    for (int s = 0; s < config.steps; ++s) {
      const auto us = static_cast<std::size_t>(s);
      steps.emplace_back(config.step_in_channels(s), config.dims[us], config.mask_sizes[us],
                         config.head_dim, config.nat_blocks, config.use_relbias, rng);
    }
  }

  /// Image features injected at step `s`, or an undefined tensor.
  Tensor<T> injected(const ContextFeatures<T>& feats, int s) const {
    if (config.image_channels(s) == 0) return {};
    switch (2 - s) {
      case 2: return feats.eighth;
      case 1: return feats.quarter;
      default: return feats.half;
    }
  }

  /// flow_lr (2, h, w) and h_final (hidden, h, w) at 1/2^steps resolution ->
  /// flow at full resolution.
  Tensor<T> upsample(const Tensor<T>& flow_lr, const Tensor<T>& h_final,
                     const ContextFeatures<T>& feats) const {
    auto flow = flow_lr;
    auto feat = h_final;
    for (int s = 0; s < config.steps; ++s) {
      auto out = steps[static_cast<std::size_t>(s)].forward(flow, feat, injected(feats, s));
      flow = std::move(out.flow);
      feat = std::move(out.features);
    }
    return flow;
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    for (std::size_t s = 0; s < steps.size(); ++s) {
      steps[s].collect(out, join_name(prefix, "step" + std::to_string(s)));
    }
  }

  /// Parameters of the relative-bias tables, the only ones whose size depends
  /// on the mask sizes.
  std::int64_t relbias_param_count() const {
    ParamList<T> params;
    collect(params, "");
    std::int64_t n = 0;
    for (const auto& p : params) {
      if (p.name.ends_with("relbias") || p.name.ends_with("lam_bias")) n += p.tensor.numel();
    }
    return n;
  }
};

}  // namespace flowup
