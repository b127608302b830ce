#pragma once

// Toy-scale trainer: decayed multi-iteration L1 loss, AdamW with separate
// learning rates for pre-trained and fresh upsampler parameters, periodic
// validation, and the continuation run without interpolating augmentation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <mutex>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "flowup/evaluation.hpp"
#include "flowup/pipeline.hpp"
#include "flowup/runtime.hpp"
#include "flowup/synthesis.hpp"

namespace flowup {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// sum_i gamma^(I-1-i) * mean |preds_i - gt|
template <typename T>
Tensor<T> sequence_loss(const std::vector<Tensor<T>>& preds, const Tensor<T>& gt, double gamma) {
  if (preds.empty()) throw ConfigError("sequence_loss: no predictions");
  const auto I = static_cast<int>(preds.size());
  Tensor<T> total;
  for (int i = 0; i < I; ++i) {
    detail::require_same_shape(preds[static_cast<std::size_t>(i)], gt, "sequence_loss");
    auto term = mean(abs(sub(preds[static_cast<std::size_t>(i)], gt)));
    const double w = std::pow(gamma, I - 1 - i);
    if (w != 1.0) term = scale(term, static_cast<T>(w));
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

struct TrainConfig {
  // Reference run: 100K iterations at batch 3. Desk runs override both.
  static constexpr int kReferenceSteps = 100000;
  static constexpr int kReferenceBatch = 3;

  int steps = 2000;
  int batch = 4;
  double base_lr = 1e-4;
  double fresh_lr = 2e-4;
  double gamma = 0.8;
  double weight_decay = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double warmup_fraction = 0.05;
  std::uint64_t seed = 0;
  int val_every = 100;
  AugmentConfig aug;
  ModelConfig model;
  EmulatorConfig emulator;

  void validate() const {
    if (steps < 1) throw ConfigError("train: steps must be positive");
    if (batch < 1) throw ConfigError("train: batch must be positive");
    if (base_lr < 0 || fresh_lr < 0) throw ConfigError("train: learning rates must be >= 0");
    if (gamma <= 0) throw ConfigError("train: gamma must be positive");
    if (warmup_fraction < 0 || warmup_fraction >= 1) {
      throw ConfigError("train: warmup fraction must be in [0, 1)");
    }
    if (val_every < 1) throw ConfigError("train: val_every must be positive");
    emulator.validate();
  }
};

/// Linear warm-up over the first `warmup_fraction` of steps, then linear
/// decay towards zero.
inline double lr_factor(int step, int total, double warmup_fraction) {
  const int warm = static_cast<int>(std::floor(warmup_fraction * total));
  if (step < warm) return static_cast<double>(step + 1) / warm;
  return static_cast<double>(total - step) / static_cast<double>(total - warm);
}

template <typename T>
class AdamW {
 public:
  struct Group {
    std::string name;
    ParamList<T> params;
    double lr = 0.0;
  };

  AdamW(std::vector<Group> groups, double beta1, double beta2, double eps, double weight_decay)
      : groups_(std::move(groups)), beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {
    for (const auto& g : groups_) {
      std::vector<std::vector<double>> m, v;
      for (const auto& p : g.params) {
        m.emplace_back(static_cast<std::size_t>(p.tensor.numel()), 0.0);
        v.emplace_back(static_cast<std::size_t>(p.tensor.numel()), 0.0);
      }
      m_.push_back(std::move(m));
      v_.push_back(std::move(v));
    }
  }

  const std::vector<Group>& groups() const { return groups_; }

  /// One update with the given per-group learning rates.
  void step(const std::vector<double>& lrs) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, t_);
    const double c2 = 1.0 - std::pow(beta2_, t_);
    for (std::size_t gi = 0; gi < groups_.size(); ++gi) {
      const double lr = lrs[gi];
      for (std::size_t pi = 0; pi < groups_[gi].params.size(); ++pi) {
        auto p = groups_[gi].params[pi].tensor;
        if (!p.has_grad()) continue;
        auto data = p.data();
        auto grad = p.grad();
        auto& m = m_[gi][pi];
        auto& v = v_[gi][pi];
        for (std::size_t i = 0; i < data.size(); ++i) {
          const double g = grad[i];
          m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
          v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
          const double update = (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_) + wd_ * data[i];
          data[i] = static_cast<T>(data[i] - lr * update);
        }
      }
    }
  }

  void zero_grad() {
    for (auto& g : groups_) zero_grads(g.params);
  }

  /// L2 norm of the accumulated gradient of one group.
  double grad_norm(std::size_t group) const {
    double acc = 0.0;
    for (const auto& p : groups_[group].params) {
      if (!p.tensor.has_grad()) continue;
      for (auto g : p.tensor.grad()) acc += static_cast<double>(g) * g;
    }
    return std::sqrt(acc);
  }

 private:
  std::vector<Group> groups_;
  std::vector<std::vector<std::vector<double>>> m_, v_;
  double beta1_, beta2_, eps_, wd_;
  std::int64_t t_ = 0;
};

struct MetricsRow {
  int step = 0;
  double loss = 0.0;
  double epe_val = std::numeric_limits<double>::quiet_NaN();
  double lr_group0 = 0.0;
  double lr_group1 = 0.0;
};

inline std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::ostringstream os;
  os << "step,loss,epe_val,lr_group0,lr_group1\n" << std::setprecision(9);
  for (const auto& r : rows) {
    os << r.step << ',' << r.loss << ',';
    if (!std::isnan(r.epe_val)) os << r.epe_val;
    os << ',' << r.lr_group0 << ',' << r.lr_group1 << '\n';
  }
  return os.str();
}

struct EvalResult {
  double epe = 0.0;            // pixel mean over all samples
  double edge_epe = 0.0;       // over pixels flagged by detail_map
  std::int64_t edge_pixels = 0;
  double high_detail_epe = 0.0;  // patches in buckets >= 4
  DetailBucketReport report;
};

inline constexpr int kHighDetailBucket = 4;

/// Test-time evaluation: only the last iteration's upsampler runs, fed with
/// the emulator's final flow.
inline EvalResult evaluate(const FlowModel<float>& model, const std::vector<SyntheticSample>& samples,
                           const EmulatorConfig& emulator, std::uint64_t seed = 0) {
  if (samples.empty()) throw ConfigError("evaluate: no samples");
  NoGradGuard no_grad;
  RefinementEmulator em{emulator};
  BucketAccumulator buckets;
  double epe_sum = 0.0, edge_sum = 0.0;
  std::int64_t pixels = 0, edge_pixels = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    const auto flows = em.emulate(s.flow, mix_seed(seed, i));
    const auto pred = model.predict(s.image, flows.back());
    const auto e = epe(pred, s.flow);
    const auto edges = detail_map(s.flow);
    for (std::int64_t p = 0; p < e.map.numel(); ++p) {
      epe_sum += e.map[p];
      if (edges.values[static_cast<std::size_t>(p)]) {
        edge_sum += e.map[p];
        ++edge_pixels;
      }
    }
    pixels += e.map.numel();
    if (s.flow.dim(1) >= DetailBucketReport::kPatch && s.flow.dim(2) >= DetailBucketReport::kPatch) {
      buckets.add(pred, s.flow);
    }
  }
  EvalResult r;
  r.epe = epe_sum / static_cast<double>(pixels);
  r.edge_pixels = edge_pixels;
  r.edge_epe = edge_pixels ? edge_sum / static_cast<double>(edge_pixels)
                           : std::numeric_limits<double>::quiet_NaN();
  r.report = buckets.report();
  r.high_detail_epe = r.report.mean_epe_from(kHighDetailBucket);
  return r;
}

struct TrainResult {
  std::vector<MetricsRow> metrics;
  AugmentStats aug_stats;
  int steps = 0;
};

namespace detail {

inline std::vector<AdamW<float>::Group> make_groups(const FlowModel<float>& model,
                                                    const TrainConfig& cfg) {
  std::vector<AdamW<float>::Group> groups{{"base", model.base_params(), cfg.base_lr},
                                          {"fresh", model.fresh_params(), cfg.fresh_lr}};
  std::unordered_set<const void*> seen;
  for (const auto& g : groups) {
    for (const auto& p : g.params) {
      if (!seen.insert(p.tensor.impl().get()).second) {
        throw std::logic_error("parameter '" + p.name + "' belongs to more than one group");
      }
    }
  }
  const auto all = model.parameters();
  if (seen.size() != all.size()) throw std::logic_error("parameter groups do not cover the model");
  if (model.config().mode != WiringMode::shared) {
    std::unordered_set<const void*> fresh, last;
    for (const auto& p : groups[1].params) fresh.insert(p.tensor.impl().get());
    for (const auto& p : model.last_upsampler_params()) last.insert(p.tensor.impl().get());
    if (fresh != last) {
      throw std::logic_error("fresh group differs from the last upsampler's parameters");
    }
  }
  return groups;
}

}  // namespace detail

/// Trains `model` in place on `data` (augmented per step), validating on
/// `val` every cfg.val_every steps and after the last step.
inline TrainResult fit(FlowModel<float>& model, const TrainConfig& cfg,
                       const std::vector<SyntheticSample>& data,
                       const std::vector<SyntheticSample>& val, std::ostream* log = nullptr) {
  cfg.validate();
  if (data.empty()) throw ConfigError("train: empty dataset");
  retain_freed_memory();
  AdamW<float> opt(detail::make_groups(model, cfg), cfg.beta1, cfg.beta2, cfg.adam_eps,
                   cfg.weight_decay);
  if (log) {
    for (const auto& g : opt.groups()) {
      *log << "group " << g.name << ": " << g.params.size() << " tensors, "
           << count_params(g.params) << " parameters, lr " << g.lr << '\n';
    }
  }
  RefinementEmulator emulator{cfg.emulator};
  TrainResult result;
  std::mutex stats_mutex;
  for (int step = 0; step < cfg.steps; ++step) {
    Rng pick(mix_seed(cfg.seed, 0x5eed0000ULL + static_cast<std::uint64_t>(step)));
    std::uniform_int_distribution<std::size_t> index(0, data.size() - 1);
    std::vector<std::size_t> ids(static_cast<std::size_t>(cfg.batch));
    for (auto& id : ids) id = index(pick);
    std::vector<SyntheticSample> batch(ids.size());
    parallel_for(static_cast<std::int64_t>(ids.size()), [&](std::int64_t b) {
      AugmentStats local;
      const auto key = static_cast<std::uint64_t>(step) * 1024 + static_cast<std::uint64_t>(b);
      batch[static_cast<std::size_t>(b)] =
          augment(data[ids[static_cast<std::size_t>(b)]], cfg.aug, mix_seed(cfg.seed, key), &local);
      std::lock_guard lock(stats_mutex);
      result.aug_stats.resize_calls += local.resize_calls;
      result.aug_stats.samples += local.samples;
    });

    double loss_sum = 0.0;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const auto key = static_cast<std::uint64_t>(step) * 1024 + b;
      const auto flows = emulator.emulate(batch[b].flow, mix_seed(cfg.seed ^ 0xe1u, key));
      const auto preds = model.forward_all_iterations(batch[b].image, flows);
      auto loss = scale(sequence_loss(preds, batch[b].flow, cfg.gamma), 1.0f / cfg.batch);
      loss_sum += loss.item();
      backward(loss);
    }
    const double factor = lr_factor(step, cfg.steps, cfg.warmup_fraction);
    const std::vector<double> lrs{cfg.base_lr * factor, cfg.fresh_lr * factor};
    const double g0 = opt.grad_norm(0), g1 = opt.grad_norm(1);
    if (!std::isfinite(loss_sum) || !std::isfinite(g0) || !std::isfinite(g1)) {
      std::ostringstream msg;
      msg << "non-finite loss at step " << step << ": loss " << loss_sum << ", lr " << lrs[0]
          << "/" << lrs[1] << ", grad norm base " << g0 << ", fresh " << g1;
      throw TrainingError(msg.str());
    }
    opt.step(lrs);
    opt.zero_grad();

    MetricsRow row{step + 1, loss_sum, std::numeric_limits<double>::quiet_NaN(), lrs[0], lrs[1]};
    if (!val.empty() && ((step + 1) % cfg.val_every == 0 || step + 1 == cfg.steps)) {
      row.epe_val = evaluate(model, val, cfg.emulator, cfg.seed).epe;
      if (log) {
        *log << "step " << row.step << " loss " << row.loss << " epe_val " << row.epe_val
             << std::endl;
      }
    }
    result.metrics.push_back(row);
  }
  result.steps = cfg.steps;
  return result;
}

/// Fresh model from cfg.model, then fit().
inline std::pair<FlowModel<float>, TrainResult> train(const TrainConfig& cfg,
                                                      const std::vector<SyntheticSample>& data,
                                                      const std::vector<SyntheticSample>& val,
                                                      std::ostream* log = nullptr) {
  FlowModel<float> model(cfg.model);
  auto result = fit(model, cfg, data, val, log);
  return {std::move(model), std::move(result)};
}

inline constexpr double kNoInterpolationFraction = 0.4;

/// The continuation run: same model, interpolating augmentation off, for
/// `steps` steps (default 40% of the original run). The optimizer restarts.
inline TrainResult continue_without_interpolation(FlowModel<float>& model, TrainConfig cfg,
                                                  const std::vector<SyntheticSample>& data,
                                                  const std::vector<SyntheticSample>& val,
                                                  int steps = -1, std::ostream* log = nullptr) {
  cfg.steps = steps > 0 ? steps
                        : std::max(1, static_cast<int>(std::lround(kNoInterpolationFraction * cfg.steps)));
  cfg.aug.interpolation_enabled = false;
  cfg.seed = mix_seed(cfg.seed, 0xa06);
  return fit(model, cfg, data, val, log);
}

}  // namespace flowup
