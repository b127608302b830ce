#pragma once

// Stand-in for the recurrent flow predictor. The emulator produces I noisy
// copies of the box-downsampled ground truth; a small conv net turns context
// features plus each flow into the per-iteration features an upsampler
// expects. The model wires a shared baseline upsampler for the early
// iterations and, when decoupled, a separately parameterised last upsampler.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "flowup/tcu.hpp"

namespace flowup {

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  // splitmix64 finaliser over a combined key
  std::uint64_t z = a * 0x9E3779B97F4A7C15ULL + b + 0x632BE59BD9B4E019ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

struct EmulatorConfig {
  int iterations = 4;
  std::vector<double> sigmas{2.0, 1.0, 0.5, 0.0};
  int factor = 8;

  void validate() const {
    if (iterations < 1) throw ConfigError("emulator needs at least one iteration");
    if (static_cast<int>(sigmas.size()) != iterations) {
      throw ConfigError("emulator needs one noise level per iteration");
    }
    for (std::size_t i = 0; i < sigmas.size(); ++i) {
      if (sigmas[i] < 0) throw ConfigError("noise levels must be non-negative");
      if (i && sigmas[i] > sigmas[i - 1]) throw ConfigError("noise levels must not increase");
    }
  }
};

/// Emits `iterations` low-resolution flows: the box-downsampled ground truth
/// plus Gaussian noise of the scheduled standard deviation.
struct RefinementEmulator {
  EmulatorConfig config;

  template <typename T>
  std::vector<Tensor<T>> emulate(const Tensor<T>& flow_gt_hr, std::uint64_t seed) const {
    config.validate();
    NoGradGuard no_grad;
    const auto base = avg_downsample(flow_gt_hr.detach(), config.factor);
    std::vector<Tensor<T>> flows;
    for (int i = 0; i < config.iterations; ++i) {
      auto f = base.detach();
      const double sigma = config.sigmas[static_cast<std::size_t>(i)];
      if (sigma > 0) {
        Rng rng(mix_seed(seed, static_cast<std::uint64_t>(i)));
        std::normal_distribution<double> noise(0.0, sigma);
        for (auto& v : f.data()) v += static_cast<T>(noise(rng));
      }
      flows.push_back(std::move(f));
    }
    return flows;
  }
};

/// conv3x3 -> GELU -> conv3x3 -> tanh over (1/8 context, flow).
template <typename T>
struct HiddenNet {
  Conv2d<T> conv1, conv2;

  HiddenNet() = default;
  HiddenNet(std::int64_t context_channels, std::int64_t hidden, Rng& rng)
      : conv1(context_channels + 2, hidden, 3, 1, rng), conv2(hidden, hidden, 3, 1, rng) {}

  Tensor<T> forward(const Tensor<T>& context, const Tensor<T>& flow) const {
    return tanh(conv2(gelu(conv1(concat<T>({context, flow}, 0)))));
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    conv1.collect(out, join_name(prefix, "conv1"));
    conv2.collect(out, join_name(prefix, "conv2"));
  }
};

enum class WiringMode { shared, decoupled_baseline, decoupled_tcu };

inline const char* mode_name(WiringMode m) {
  switch (m) {
    case WiringMode::shared: return "shared";
    case WiringMode::decoupled_baseline: return "dc";
    default: return "dc-tcu";
  }
}

inline WiringMode parse_mode(const std::string& s) {
  if (s == "shared") return WiringMode::shared;
  if (s == "dc") return WiringMode::decoupled_baseline;
  if (s == "dc-tcu") return WiringMode::decoupled_tcu;
  throw ConfigError("unknown wiring mode '" + s + "' (expected shared, dc or dc-tcu)");
}

struct ModelConfig {
  WiringMode mode = WiringMode::shared;
  int baseline_mask = 3;
  int factor = 8;
  Padding baseline_padding = Padding::zero;
  std::int64_t hidden_channels = 128;
  std::array<std::int64_t, 3> context_channels{64, 96, 128};
  UpsamplerConfig tcu;
  std::uint64_t seed = 0;

  UpsamplerConfig resolved_tcu() const {
    auto cfg = tcu;
    cfg.hidden_channels = hidden_channels;
    cfg.context_channels = context_channels;
    return cfg;
  }
};

template <typename T>
class FlowModel {
 public:
  FlowModel() = default;

  explicit FlowModel(ModelConfig cfg) : config_(std::move(cfg)) {
    Rng rng(config_.seed);
    encoder_ = ContextEncoder<T>(config_.context_channels, rng);
    hidden_ = HiddenNet<T>(config_.context_channels[2], config_.hidden_channels, rng);
    shared_ = ConvexUpsampler<T>(config_.hidden_channels, config_.factor, config_.baseline_mask,
                                 config_.baseline_padding, rng);
    // The last upsampler draws from its own stream so the shared parts are
    // initialised identically across wiring modes.
    Rng last_rng(mix_seed(config_.seed, 0x1a57));
    if (config_.mode == WiringMode::decoupled_baseline) {
      last_baseline_.emplace(config_.hidden_channels, config_.factor, config_.baseline_mask,
                             config_.baseline_padding, last_rng);
    } else if (config_.mode == WiringMode::decoupled_tcu) {
      last_tcu_.emplace(config_.resolved_tcu(), last_rng);
    }
  }

  const ModelConfig& config() const { return config_; }
  const ContextEncoder<T>& encoder() const { return encoder_; }
  const HiddenNet<T>& hidden() const { return hidden_; }
  const ConvexUpsampler<T>& shared_upsampler() const { return shared_; }
  const std::optional<TCU<T>>& tcu() const { return last_tcu_; }

  /// Upsampled flow for every iteration (training) or only the last one
  /// (`all_iterations == false`, the test-time path).
  std::vector<Tensor<T>> forward_all_iterations(const Tensor<T>& image,
                                                const std::vector<Tensor<T>>& flows,
                                                bool all_iterations = true) const {
    if (flows.empty()) throw ConfigError("forward: no iterations");
    const auto feats = encoder_.encode(image);
    const auto last = flows.size() - 1;
    std::vector<Tensor<T>> out;
    for (std::size_t i = all_iterations ? 0 : last; i <= last; ++i) {
      const auto h = hidden_.forward(feats.eighth, flows[i]);
      out.push_back(i < last ? shared_.upsample(h, flows[i]) : upsample_last(h, flows[i], feats));
    }
    return out;
  }

  Tensor<T> predict(const Tensor<T>& image, const Tensor<T>& flow_lr) const {
    return forward_all_iterations(image, {flow_lr}, false).back();
  }

  Tensor<T> upsample_last(const Tensor<T>& h, const Tensor<T>& flow,
                          const ContextFeatures<T>& feats) const {
    if (last_tcu_) return last_tcu_->upsample(flow, h, feats);
    if (last_baseline_) return last_baseline_->upsample(h, flow);
    return shared_.upsample(h, flow);
  }

  /// Pre-trained group: encoder, hidden net, shared upsampler.
  ParamList<T> base_params() const {
    ParamList<T> p;
    encoder_.collect(p, "encoder");
    hidden_.collect(p, "hidden");
    shared_.collect(p, "shared");
    return p;
  }

  /// Fresh group: parameters exclusive to the last iteration's upsampler.
  ParamList<T> fresh_params() const {
    ParamList<T> p;
    if (last_baseline_) last_baseline_->collect(p, "last");
    if (last_tcu_) last_tcu_->collect(p, "last_tcu");
    return p;
  }

  /// Parameters the last iteration's upsampler reads.
  ParamList<T> last_upsampler_params() const {
    if (config_.mode == WiringMode::shared) {
      ParamList<T> p;
      shared_.collect(p, "shared");
      return p;
    }
    return fresh_params();
  }

  ParamList<T> parameters() const {
    auto p = base_params();
    for (auto& q : fresh_params()) p.push_back(q);
    return p;
  }

 private:
  ModelConfig config_;
  ContextEncoder<T> encoder_;
  HiddenNet<T> hidden_;
  ConvexUpsampler<T> shared_;
  std::optional<ConvexUpsampler<T>> last_baseline_;
  std::optional<TCU<T>> last_tcu_;
};

}  // namespace flowup
