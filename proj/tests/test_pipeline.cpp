#include <gtest/gtest.h>

#include <cmath>

#include "flowup/flowup.hpp"

using namespace flowup;

namespace {

ModelConfig small_model(WiringMode mode) {
  ModelConfig cfg;
  cfg.mode = mode;
  cfg.hidden_channels = 16;
  cfg.context_channels = {8, 12, 16};
  cfg.tcu.dims = {32, 16, 8};
  cfg.tcu.head_dim = 8;
  cfg.tcu.nat_blocks = 1;
  cfg.seed = 5;
  return cfg;
}

}  // namespace

TEST(Emulator, ZeroNoiseEqualsBoxDownsample) {
  const auto s = gen_sample(1, 64, 48, 3);
  EmulatorConfig cfg;
  cfg.iterations = 2;
  cfg.sigmas = {0.0, 0.0};
  const auto flows = RefinementEmulator{cfg}.emulate(s.flow, 9);
  ASSERT_EQ(flows.size(), 2u);
  // Block means computed directly.
  for (const auto& f : flows) {
    ASSERT_EQ(f.shape(), (Shape{2, 8, 6}));
    for (int c = 0; c < 2; ++c) {
      for (std::int64_t y = 0; y < 8; ++y) {
        for (std::int64_t x = 0; x < 6; ++x) {
          double acc = 0.0;
          for (int dy = 0; dy < 8; ++dy) {
            for (int dx = 0; dx < 8; ++dx) acc += s.flow.at(c, 8 * y + dy, 8 * x + dx);
          }
          EXPECT_NEAR(f.at(c, y, x), acc / 64.0, 1e-5);
        }
      }
    }
  }
}

TEST(Emulator, SameSeedSameFlows) {
  const auto s = gen_sample(2, 32, 32, 2);
  const RefinementEmulator emu{EmulatorConfig{}};
  const auto a = emu.emulate(s.flow, 3), b = emu.emulate(s.flow, 3), c = emu.emulate(s.flow, 4);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].data()[0], b[i].data()[0]);
  EXPECT_NE(a[0].data()[0], c[0].data()[0]);
  EXPECT_EQ(a.back().data()[0], c.back().data()[0]);  // the last level is noise-free
}

TEST(Emulator, NoiseFollowsTheSchedule) {
  const RefinementEmulator emu{EmulatorConfig{}};
  std::vector<double> sq(4, 0.0);
  std::int64_t n = 0;
  for (int k = 0; k < 100; ++k) {
    const auto s = gen_sample(mix_seed(10, static_cast<std::uint64_t>(k)), 32, 32, 2);
    const auto flows = emu.emulate(s.flow, static_cast<std::uint64_t>(k));
    const auto base = avg_downsample(s.flow, 8);
    for (std::size_t i = 0; i < 4; ++i) {
      for (std::int64_t j = 0; j < base.numel(); ++j) {
        const double d = flows[i][j] - base[j];
        sq[i] += d * d;
      }
    }
    n += base.numel();
  }
  const double expected[] = {2.0, 1.0, 0.5, 0.0};
  for (std::size_t i = 0; i < 4; ++i) {
    const double sd = std::sqrt(sq[i] / static_cast<double>(n));
    EXPECT_NEAR(sd, expected[i], 0.05 * expected[i] + 1e-6);
    if (i) {
      EXPECT_LT(sd, std::sqrt(sq[i - 1] / static_cast<double>(n)));
    }
  }
}

TEST(Emulator, BadSchedulesAreRejected) {
  EmulatorConfig cfg;
  cfg.sigmas = {1.0, 2.0, 0.5, 0.0};
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.sigmas = {1.0};
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(FlowModel, SharedModeReusesTheSharedUpsampler) {
  FlowModel<float> model(small_model(WiringMode::shared));
  EXPECT_TRUE(model.fresh_params().empty());
  ParamList<float> shared;
  model.shared_upsampler().collect(shared, "shared");
  const auto last = model.last_upsampler_params();
  ASSERT_EQ(last.size(), shared.size());
  for (std::size_t i = 0; i < last.size(); ++i) {
    EXPECT_EQ(last[i].tensor.data().data(), shared[i].tensor.data().data()) << last[i].name;
  }
}

TEST(FlowModel, DecoupledModesOwnTheLastUpsampler) {
  for (auto mode : {WiringMode::decoupled_baseline, WiringMode::decoupled_tcu}) {
    FlowModel<float> model(small_model(mode));
    const auto fresh = model.fresh_params();
    ASSERT_FALSE(fresh.empty());
    for (const auto& f : fresh) {
      for (const auto& b : model.base_params()) EXPECT_NE(f.tensor.data().data(), b.tensor.data().data());
    }
  }
}

TEST(FlowModel, BaseInitialisationIsIndependentOfMode) {
  FlowModel<float> a(small_model(WiringMode::shared)), b(small_model(WiringMode::decoupled_tcu));
  const auto pa = a.base_params(), pb = b.base_params();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    ASSERT_EQ(pa[i].tensor.numel(), pb[i].tensor.numel());
    for (std::int64_t j = 0; j < pa[i].tensor.numel(); ++j) ASSERT_EQ(pa[i].tensor[j], pb[i].tensor[j]);
  }
}

TEST(FlowModel, OutputShapesPerMode) {
  Rng rng(6);
  for (auto mode : {WiringMode::shared, WiringMode::decoupled_baseline, WiringMode::decoupled_tcu}) {
    FlowModel<float> model(small_model(mode));
    NoGradGuard no_grad;
    const auto image = Tensor<float>::uniform({3, 48, 64}, rng, 0.0, 1.0);
    const auto flows = RefinementEmulator{EmulatorConfig{}}.emulate(gen_sample(7, 48, 64, 2).flow, 1);
    const auto all = model.forward_all_iterations(image, flows);
    ASSERT_EQ(all.size(), 4u);
    for (const auto& p : all) EXPECT_EQ(p.shape(), (Shape{2, 48, 64})) << mode_name(mode);
    EXPECT_EQ(model.predict(image, flows.back()).shape(), (Shape{2, 48, 64}));
  }
}

TEST(FlowModel, EarlyIterationLossLeavesTheFreshUpsamplerUntouched) {
  for (auto mode : {WiringMode::decoupled_baseline, WiringMode::decoupled_tcu}) {
    FlowModel<float> model(small_model(mode));
    const auto s = gen_sample(8, 32, 32, 3);
    auto preds = model.forward_all_iterations(s.image, RefinementEmulator{EmulatorConfig{}}.emulate(s.flow, 2));
    preds.pop_back();
    backward(sequence_loss(preds, s.flow, 0.8));
    for (const auto& p : model.fresh_params()) {
      for (auto g : p.tensor.grad()) ASSERT_EQ(g, 0.0f) << p.name;
    }
    double base = 0.0;
    for (const auto& p : model.base_params()) {
      for (auto g : p.tensor.grad()) base += std::abs(g);
    }
    EXPECT_GT(base, 0.0);
  }
}

TEST(FlowModel, SharedModeCouplesAllIterations) {
  // In shared mode the early iterations do train the last upsampler.
  FlowModel<float> model(small_model(WiringMode::shared));
  const auto s = gen_sample(9, 32, 32, 3);
  auto preds = model.forward_all_iterations(s.image, RefinementEmulator{EmulatorConfig{}}.emulate(s.flow, 2));
  preds.pop_back();
  backward(sequence_loss(preds, s.flow, 0.8));
  double g = 0.0;
  for (const auto& p : model.last_upsampler_params()) {
    for (auto v : p.tensor.grad()) g += std::abs(v);
  }
  EXPECT_GT(g, 0.0);
}

TEST(FlowModel, ParseModeNames) {
  EXPECT_EQ(parse_mode("shared"), WiringMode::shared);
  EXPECT_EQ(parse_mode(mode_name(WiringMode::decoupled_tcu)), WiringMode::decoupled_tcu);
  EXPECT_THROW(parse_mode("bogus"), ConfigError);
}
