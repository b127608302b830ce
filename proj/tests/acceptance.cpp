// Acceptance run: one PASS/FAIL line per criterion. Arguments select a subset
// by name; with none, every criterion runs.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <functional>
#include <iomanip>
#include <iostream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "flowup/flowup.hpp"

using namespace flowup;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(4) << v;
  return os.str();
}

// Per-channel min/max of the m x m window feeding low-res position (y, x).
// Under zero padding, out-of-range taps contribute the value 0.
template <typename T>
std::pair<double, double> window_bounds(const Tensor<T>& field, int c, std::int64_t y,
                                        std::int64_t x, int m, Padding padding) {
  const auto h = field.dim(1), w = field.dim(2);
  const auto y0 = window_start(y, m, h, padding), x0 = window_start(x, m, w, padding);
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (std::int64_t yy = y0; yy < y0 + m; ++yy) {
    for (std::int64_t xx = x0; xx < x0 + m; ++xx) {
      const bool inside = yy >= 0 && yy < h && xx >= 0 && xx < w;
      const double v = inside ? static_cast<double>(field.at(c, yy, xx)) : 0.0;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  return {lo, hi};
}

// Largest violation of the convexity bound of `up` (f times larger) against
// its low-resolution source `field`.
template <typename T>
double convexity_violation(const Tensor<T>& up, const Tensor<T>& field, int f, int m,
                           Padding padding) {
  double worst = 0.0;
  for (int c = 0; c < field.dim(0); ++c) {
    for (std::int64_t y = 0; y < field.dim(1); ++y) {
      for (std::int64_t x = 0; x < field.dim(2); ++x) {
        const auto [lo, hi] = window_bounds(field, c, y, x, m, padding);
        for (int i = 0; i < f * f; ++i) {
          const double v = up.at(c, f * y + i / f, f * x + i % f);
          worst = std::max({worst, lo - v, v - hi});
        }
      }
    }
  }
  return worst;
}

template <typename T>
double max_abs_deviation(const Tensor<T>& t, int c, double value) {
  double worst = 0.0;
  const auto P = t.dim(1) * t.dim(2);
  for (std::int64_t i = 0; i < P; ++i) worst = std::max(worst, std::abs(t[c * P + i] - value));
  return worst;
}

Outcome convexity() {
  const auto t0 = Clock::now();
  constexpr double kTol = 1e-5;
  Rng rng(11);
  std::uniform_real_distribution<double> motion(-8.0, 8.0);
  double worst = 0.0, worst_const = 0.0;
  int cases = 0;

  // Baseline: random mask logits, f = 8, m = 3, both padding policies.
  for (int n = 0; n < 100; ++n) {
    const Padding padding = n % 2 ? Padding::clamp : Padding::zero;
    const auto logits = Tensor<float>::randn({64 * 9, 6, 7}, rng, 3.0);
    const auto maps = maps_from_logits(logits, 64, 3, padding);
    const auto flow = Tensor<float>::randn({2, 6, 7}, rng, 4.0);
    worst = std::max(worst, convexity_violation(convex_aggregate(maps, flow), flow, 8, 3, padding));
    if (padding == Padding::clamp) {
      const double u = motion(rng), v = motion(rng);
      Tensor<float> constant({2, 6, 7});
      for (std::int64_t i = 0; i < 42; ++i) {
        constant[i] = static_cast<float>(u);
        constant[42 + i] = static_cast<float>(v);
      }
      const auto out = convex_aggregate(maps, constant);
      worst_const = std::max({worst_const, max_abs_deviation(out, 0, static_cast<float>(u)),
                              max_abs_deviation(out, 1, static_cast<float>(v))});
    }
    ++cases;
  }

  // Full-width TCU steps with random weights and inputs.
  UpsamplerConfig cfg;
  TCU<float> tcu(cfg, rng);
  for (int s = 0; s < cfg.steps; ++s) {
    const auto& step = tcu.steps[static_cast<std::size_t>(s)];
    const int m = cfg.mask_sizes[static_cast<std::size_t>(s)];
    const std::int64_t h = m + 2, w = m + 3;
    const std::int64_t feat = cfg.step_in_channels(s) - cfg.image_channels(s) - 2;
    for (int n = 0; n < 100; ++n) {
      const auto flow = Tensor<float>::randn({2, h, w}, rng, 4.0);
      const auto features = Tensor<float>::randn({feat, h, w}, rng);
      const auto image = cfg.image_channels(s)
                             ? Tensor<float>::randn({cfg.image_channels(s), h, w}, rng)
                             : Tensor<float>{};
      NoGradGuard no_grad;
      const auto out = step.forward(flow, features, image);
      worst = std::max(worst, convexity_violation(out.flow, flow, 2, m, Padding::clamp));
      const double u = motion(rng), v = motion(rng);
      Tensor<float> constant({2, h, w});
      for (std::int64_t i = 0; i < h * w; ++i) {
        constant[i] = static_cast<float>(u);
        constant[h * w + i] = static_cast<float>(v);
      }
      const auto c_out = step.forward(constant, features, image);
      worst_const = std::max({worst_const, max_abs_deviation(c_out.flow, 0, static_cast<float>(u)),
                              max_abs_deviation(c_out.flow, 1, static_cast<float>(v))});
      ++cases;
    }
  }
  const double secs = seconds_since(t0);
  return {worst <= kTol && worst_const <= kTol && secs < 30.0,
          std::to_string(cases) + " cases, max bound violation " + fmt(worst) +
              ", max constant deviation " + fmt(worst_const) + ", " + fmt(secs) + " s"};
}

Outcome equivalence() {
  const auto t0 = Clock::now();
  Rng rng(12);
  double worst = 0.0;
  const int windows[] = {3, 5, 7, 9};
  const int factors[] = {2, 8};
  for (int n = 0; n < 50; ++n) {
    const int m = windows[n % 4];
    const int f = factors[(n / 4) % 2];
    const std::int64_t heads = static_cast<std::int64_t>(f) * f;
    const auto logits = Tensor<double>::randn({heads * m * m, 16, 16}, rng, 2.0);
    const auto maps = maps_from_logits(logits, heads, m, Padding::clamp);
    const auto flow = Tensor<double>::randn({2, 16, 16}, rng, 4.0);
    const auto convex = convex_aggregate(maps, flow);
    // Attention view: every head aggregates the same field, then head i
    // fills sub-pixel i.
    const auto na = na_aggregate(maps, reshape(repeat(flow, heads), {heads, 2, 16, 16}));
    const auto r = m / 2;
    for (std::int64_t i = 0; i < heads; ++i) {
      for (int c = 0; c < 2; ++c) {
        for (std::int64_t y = r; y < 16 - r; ++y) {
          for (std::int64_t x = r; x < 16 - r; ++x) {
            const double a = na.at(i, c, y, x);
            const double b = convex.at(c, f * y + i / f, f * x + i % f);
            worst = std::max(worst, std::abs(a - b));
          }
        }
      }
    }
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-6 && secs < 10.0,
          "50 cases, max interior difference " + fmt(worst) + ", " + fmt(secs) + " s"};
}

Outcome gradients() {
  const auto t0 = Clock::now();
  const auto results = run_gradchecks();
  double worst = 0.0;
  std::string worst_name, failed;
  for (const auto& r : results) {
    if (r.max_rel_error >= worst) {
      worst = r.max_rel_error;
      worst_name = r.name;
    }
    if (!r.passed(kGradTolerance)) failed += " " + r.name;
  }
  const double secs = seconds_since(t0);
  return {failed.empty() && secs < 300.0,
          std::to_string(results.size()) + " ops, max relative error " + fmt(worst) + " (" +
              worst_name + ")" + (failed.empty() ? "" : ", failing:" + failed) + ", " +
              fmt(secs) + " s"};
}

Outcome hull_monotonicity() {
  const auto t0 = Clock::now();
  const std::vector<int> masks{3, 5, 7, 9};
  std::vector<RepresentabilityResult> scenes(200);
  std::vector<std::int64_t> motions(200);
  parallel_for(200, [&](std::int64_t i) {
    const auto s = gen_sample(mix_seed(4000, static_cast<std::uint64_t>(i)), 96, 96,
                              static_cast<int>(i % 7));
    scenes[static_cast<std::size_t>(i)] = representability_study(s.flow, 8, masks);
    motions[static_cast<std::size_t>(i)] = count_motions(s.flow);
  });
  int violations = 0, multi = 0, multi_strict = 0, saturated = 0;
  double f3 = 0.0, f9 = 0.0;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const auto& r = scenes[i];
    for (std::size_t k = 1; k < masks.size(); ++k) {
      if (r.fraction(k) < r.fraction(k - 1)) ++violations;
    }
    if (motions[i] >= 2) {
      ++multi;
      if (r.fraction(3) > r.fraction(0)) ++multi_strict;
      if (r.fraction(0) == 1.0) ++saturated;
      f3 += static_cast<double>(r.representable[0]);
      f9 += static_cast<double>(r.representable[3]);
    }
  }
  const double secs = seconds_since(t0);
  return {violations == 0 && multi > 0 && f9 > f3 && secs < 120.0,
          std::to_string(violations) + " violations; scenes with >= 2 motions: " +
              std::to_string(multi) + ", pooled f(9) " + fmt(f9 / (multi * 96.0 * 96.0)) +
              " vs f(3) " + fmt(f3 / (multi * 96.0 * 96.0)) + ", strict per scene in " +
              std::to_string(multi_strict) + " (" + std::to_string(saturated) +
              " have f(3) = 1); " + fmt(secs) + " s"};
}

// Shared by the two training criteria.
struct TrainingRun {
  bool done = false;
  std::vector<SyntheticSample> train, val, test;
  TrainConfig shared_cfg, tcu_cfg;
  std::optional<FlowModel<float>> shared, tcu;
  EvalResult shared_val, tcu_val;
  double train_seconds = 0.0;
};

std::vector<SyntheticSample> scenes(std::uint64_t seed, int count, int min_shapes, int spread) {
  std::vector<SyntheticSample> out(static_cast<std::size_t>(count));
  parallel_for(count, [&](std::int64_t i) {
    out[static_cast<std::size_t>(i)] = gen_sample(mix_seed(seed, static_cast<std::uint64_t>(i)),
                                                  96, 96, min_shapes + static_cast<int>(i % spread));
  });
  return out;
}

TrainingRun& training_run() {
  static TrainingRun run;
  if (run.done) return run;
  run.train = scenes(1000, 160, 2, 7);
  run.val = scenes(2000, 32, 3, 6);
  run.test = scenes(3000, 32, 4, 5);

  TrainConfig base;
  base.seed = 1;
  base.model.seed = 1;
  run.shared_cfg = base;
  run.shared_cfg.model.mode = WiringMode::shared;
  run.tcu_cfg = base;
  run.tcu_cfg.model.mode = WiringMode::decoupled_tcu;
  run.tcu_cfg.model.tcu.mask_sizes = {9, 7, 5};
  run.tcu_cfg.model.tcu.inject_features = true;

  const auto t0 = Clock::now();
  auto [shared, r0] = train(run.shared_cfg, run.train, run.val, &std::cerr);
  auto [tcu, r1] = train(run.tcu_cfg, run.train, run.val, &std::cerr);
  run.train_seconds = seconds_since(t0);
  run.shared_val = evaluate(shared, run.val, base.emulator, base.seed);
  run.tcu_val = evaluate(tcu, run.val, base.emulator, base.seed);
  run.shared.emplace(std::move(shared));
  run.tcu.emplace(std::move(tcu));
  run.done = true;
  return run;
}

Outcome training_direction() {
  auto& run = training_run();
  const auto& s = run.shared_val;
  const auto& t = run.tcu_val;
  const bool detail_ok = t.high_detail_epe < s.high_detail_epe;
  const bool overall_ok = t.epe <= 1.02 * s.epe;
  return {detail_ok && overall_ok && run.train_seconds < 45 * 60.0,
          "high-detail EPE dc-tcu " + fmt(t.high_detail_epe) + " vs shared " +
              fmt(s.high_detail_epe) + "; overall " + fmt(t.epe) + " vs " + fmt(s.epe) + " (" +
              fmt(100.0 * (t.epe / s.epe - 1.0)) + "%); " + fmt(run.train_seconds) + " s"};
}

Outcome no_aug_direction() {
  auto& run = training_run();
  const auto t0 = Clock::now();
  auto& model = *run.tcu;
  const auto& emu = run.tcu_cfg.emulator;
  const auto before = evaluate(model, run.test, emu, 77);
  const auto result =
      continue_without_interpolation(model, run.tcu_cfg, run.train, run.val, -1, &std::cerr);
  const auto after = evaluate(model, run.test, emu, 77);
  const double secs = seconds_since(t0);
  return {after.edge_epe < before.edge_epe && result.aug_stats.resize_calls == 0 && secs < 20 * 60.0,
          std::to_string(result.steps) + " steps, edge EPE " + fmt(before.edge_epe) + " -> " +
              fmt(after.edge_epe) + " over " + std::to_string(after.edge_pixels) +
              " edge pixels, resize calls " + std::to_string(result.aug_stats.resize_calls) + "; " +
              fmt(secs) + " s"};
}

Outcome report_consistency() {
  Rng rng(13);
  double pct_err = 0.0, decomp_err = 0.0;
  bool monotone = true, starts = true, counts = true;
  for (int n = 0; n < 20; ++n) {
    const auto s = gen_sample(mix_seed(5000, static_cast<std::uint64_t>(n)), 128, 160, n % 9);
    auto pred = Tensor<float>::randn(s.flow.shape(), rng, 0.5 + n % 4);
    for (std::int64_t i = 0; i < pred.numel(); ++i) pred[i] += s.flow[i];
    const auto r = bucket_report(pred, s.flow);
    double pct = 0.0, weighted = 0.0;
    std::int64_t total = 0;
    for (std::size_t b = 0; b < r.buckets.size(); ++b) {
      const auto& k = r.buckets[b];
      pct += k.percentage;
      weighted += static_cast<double>(k.count) * k.mean_epe;
      total += k.count;
      if (b > 0) {
        const auto& p = r.buckets[b - 1];
        monotone = monotone &&
                   k.reverse_cumulative_percentage <= p.reverse_cumulative_percentage + 1e-12 &&
                   k.reverse_cumulative_contribution <= p.reverse_cumulative_contribution + 1e-12;
      }
    }
    starts = starts && std::abs(r.buckets[0].reverse_cumulative_percentage - 100.0) < 1e-9 &&
             std::abs(r.buckets[0].reverse_cumulative_contribution - 100.0) < 1e-9;
    counts = counts && total == r.total_patches && total == (128 / 32) * (160 / 32);
    pct_err = std::max(pct_err, std::abs(pct - 100.0));
    decomp_err = std::max(decomp_err, std::abs(weighted / static_cast<double>(total) -
                                               r.global_patch_mean_epe));
  }
  return {pct_err <= 0.1 && monotone && starts && counts && decomp_err <= 1e-6,
          "20 reports, percentage sum error " + fmt(pct_err) + ", EPE decomposition error " +
              fmt(decomp_err) + (monotone ? ", monotone" : ", NOT monotone") +
              (starts ? "" : ", bad start") + (counts ? "" : ", count mismatch")};
}

Outcome flo_roundtrip() {
  Rng rng(14);
  std::uniform_int_distribution<std::int64_t> extent(1, 40);
  std::uniform_int_distribution<std::uint32_t> bits;
  int exact = 0;
  for (int n = 0; n < 100; ++n) {
    Tensor<float> flow({2, extent(rng), extent(rng)});
    // Arbitrary bit patterns, NaN payloads and infinities included.
    for (auto& v : flow.data()) v = std::bit_cast<float>(bits(rng));
    const auto back = decode_flo(encode_flo(flow));
    if (back.shape() == flow.shape() &&
        std::memcmp(back.data().data(), flow.data().data(), flow.data().size_bytes()) == 0) {
      ++exact;
    }
  }
  // Hand-assembled 1x1 field (0.5, -0.25).
  const unsigned char hand[20] = {0x50, 0x49, 0x45, 0x48, 1, 0, 0, 0, 1, 0,
                                  0,    0,    0,    0,    0, 0x3f, 0, 0, 0x80, 0xbe};
  Tensor<float> one({2, 1, 1});
  one[0] = 0.5f;
  one[1] = -0.25f;
  const auto encoded = encode_flo(one);
  const bool hand_ok = encoded == std::string(reinterpret_cast<const char*>(hand), 20);
  const auto decoded = decode_flo(std::string(reinterpret_cast<const char*>(hand), 20));
  const bool hand_read = decoded.shape() == Shape{2, 1, 1} && decoded[0] == 0.5f &&
                         decoded[1] == -0.25f;
  return {exact == 100 && hand_ok && hand_read,
          std::to_string(exact) + "/100 bit-exact, 20-byte case " +
              (hand_ok && hand_read ? "matches" : "MISMATCH")};
}

Outcome shape_and_decoupling() {
  Rng rng(15);
  int shapes_ok = 0, shapes_total = 0;
  ModelConfig cfg;
  cfg.mode = WiringMode::decoupled_tcu;
  cfg.seed = 3;
  FlowModel<float> tcu_model(cfg);
  for (std::int64_t H : {64, 96, 128}) {
    for (std::int64_t W : {64, 96, 128}) {
      const auto image = Tensor<float>::uniform({3, H, W}, rng, 0.0, 1.0);
      const auto flow = Tensor<float>::randn({2, H / 8, W / 8}, rng, 3.0);
      NoGradGuard no_grad;
      ++shapes_total;
      if (tcu_model.predict(image, flow).shape() == Shape{2, H, W}) ++shapes_ok;
    }
  }
  // Loss on the early iterations only must leave the last upsampler's
  // gradients exactly zero.
  bool isolated = true;
  std::int64_t checked = 0;
  for (auto mode : {WiringMode::decoupled_baseline, WiringMode::decoupled_tcu}) {
    cfg.mode = mode;
    FlowModel<float> model(cfg);
    const auto sample = gen_sample(99, 64, 64, 3);
    const auto flows = RefinementEmulator{EmulatorConfig{}}.emulate(sample.flow, 5);
    auto preds = model.forward_all_iterations(sample.image, flows);
    preds.pop_back();
    backward(sequence_loss(preds, sample.flow, 0.8));
    for (const auto& p : model.last_upsampler_params()) {
      for (auto g : p.tensor.grad()) isolated = isolated && g == 0.0f;
      checked += p.tensor.numel();
    }
    std::int64_t base_nonzero = 0;
    for (const auto& p : model.base_params()) {
      for (auto g : p.tensor.grad()) base_nonzero += g != 0.0f;
    }
    isolated = isolated && base_nonzero > 0;
  }
  return {shapes_ok == shapes_total && isolated,
          std::to_string(shapes_ok) + "/" + std::to_string(shapes_total) +
              " shapes correct; early-iteration gradients on " + std::to_string(checked) +
              " last-upsampler parameters " + (isolated ? "all zero" : "NOT zero")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"convexity", convexity},
      {"equivalence", equivalence},
      {"gradcheck", gradients},
      {"hull-monotonicity", hull_monotonicity},
      {"training-direction", training_direction},
      {"noaug-direction", no_aug_direction},
      {"report-consistency", report_consistency},
      {"flo-roundtrip", flo_roundtrip},
      {"shape-decoupling", shape_and_decoupling},
  };
  std::vector<std::string> only(argv + 1, argv + argc);
  int failures = 0;
  for (const auto& [name, run] : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), name) == only.end()) continue;
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
