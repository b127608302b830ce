#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <limits>

#include "flowup/flowup.hpp"

using namespace flowup;

namespace {

TrainConfig small_run(WiringMode mode, int steps) {
  TrainConfig cfg;
  cfg.steps = steps;
  cfg.batch = 2;
  cfg.seed = 3;
  cfg.val_every = 1000;
  cfg.aug.crop_height = 32;
  cfg.aug.crop_width = 32;
  cfg.aug.min_scale = 1.0;
  cfg.aug.max_scale = 1.2;
  cfg.model.mode = mode;
  cfg.model.seed = 4;
  cfg.model.hidden_channels = 16;
  cfg.model.context_channels = {8, 12, 16};
  cfg.model.tcu.dims = {32, 16, 8};
  cfg.model.tcu.head_dim = 8;
  cfg.model.tcu.nat_blocks = 1;
  return cfg;
}

std::vector<SyntheticSample> dataset(std::uint64_t seed, int n) {
  std::vector<SyntheticSample> out;
  for (int i = 0; i < n; ++i) out.push_back(gen_sample(mix_seed(seed, i), 32, 32, 1 + i % 3));
  return out;
}

bool same_params(const FlowModel<float>& a, const FlowModel<float>& b) {
  const auto pa = a.parameters(), pb = b.parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (pa[i].name != pb[i].name || pa[i].tensor.shape() != pb[i].tensor.shape()) return false;
    if (std::memcmp(pa[i].tensor.data().data(), pb[i].tensor.data().data(),
                    pa[i].tensor.data().size_bytes()) != 0) {
      return false;
    }
  }
  return true;
}

Tensor<float> offset(const Tensor<float>& t, float d) {
  Tensor<float> out(t.shape());
  for (std::int64_t i = 0; i < t.numel(); ++i) out[i] = t[i] + d;
  return out;
}

}  // namespace

TEST(SequenceLoss, WeightsLaterIterationsMore) {
  const auto gt = gen_sample(1, 16, 16, 2).flow;
  // L1 offsets of 1 and 2 in every component: 0.8 * 1 + 1 * 2.
  EXPECT_NEAR(sequence_loss<float>({offset(gt, 1.0f), offset(gt, -2.0f)}, gt, 0.8).item(), 2.8, 1e-6);
  EXPECT_NEAR(sequence_loss<float>({offset(gt, 0.5f)}, gt, 0.8).item(), 0.5, 1e-6);
  EXPECT_NEAR(sequence_loss<float>({gt, gt, gt}, gt, 0.8).item(), 0.0, 1e-12);
  // Three iterations: 0.64 * 3 + 0.8 * 0 + 1 * 1.
  EXPECT_NEAR(sequence_loss<float>({offset(gt, 3.0f), gt, offset(gt, 1.0f)}, gt, 0.8).item(), 2.92, 1e-5);
}

TEST(SequenceLoss, RejectsEmptyAndMismatched) {
  const auto gt = Tensor<float>::zeros({2, 8, 8});
  EXPECT_THROW(sequence_loss<float>({}, gt, 0.8), ConfigError);
  EXPECT_THROW(sequence_loss<float>({Tensor<float>::zeros({2, 8, 9})}, gt, 0.8), DimensionError);
}

TEST(Schedule, WarmupThenLinearDecay) {
  EXPECT_DOUBLE_EQ(lr_factor(0, 100, 0.1), 0.1);
  EXPECT_DOUBLE_EQ(lr_factor(9, 100, 0.1), 1.0);
  EXPECT_DOUBLE_EQ(lr_factor(10, 100, 0.1), 1.0);
  EXPECT_DOUBLE_EQ(lr_factor(55, 100, 0.1), 0.5);
  EXPECT_DOUBLE_EQ(lr_factor(99, 100, 0.1), 1.0 / 90.0);
  EXPECT_DOUBLE_EQ(lr_factor(0, 10, 0.0), 1.0);
}

TEST(Training, ZeroLearningRateLeavesParametersBitIdentical) {
  auto cfg = small_run(WiringMode::decoupled_tcu, 3);
  cfg.base_lr = cfg.fresh_lr = 0.0;
  FlowModel<float> model(cfg.model), reference(cfg.model);
  fit(model, cfg, dataset(2, 4), {});
  EXPECT_TRUE(same_params(model, reference));
}

TEST(Training, LossFallsOnASmallSet) {
  auto cfg = small_run(WiringMode::decoupled_tcu, 200);
  cfg.base_lr = 1e-3;
  cfg.fresh_lr = 2e-3;
  const auto result = train(cfg, dataset(3, 8), {}).second;
  ASSERT_EQ(result.metrics.size(), 200u);
  double first = 0.0, last = 0.0;
  for (int i = 0; i < 20; ++i) {
    first += result.metrics[static_cast<std::size_t>(i)].loss;
    last += result.metrics[static_cast<std::size_t>(180 + i)].loss;
  }
  EXPECT_LT(last, first);
}

TEST(Training, GroupsPartitionTheModel) {
  for (auto mode : {WiringMode::shared, WiringMode::decoupled_baseline, WiringMode::decoupled_tcu}) {
    const auto cfg = small_run(mode, 1);
    FlowModel<float> model(cfg.model);
    const auto groups = detail::make_groups(model, cfg);
    ASSERT_EQ(groups.size(), 2u);
    EXPECT_EQ(groups[0].params.size() + groups[1].params.size(), model.parameters().size());
    EXPECT_EQ(groups[1].params.empty(), mode == WiringMode::shared);
    EXPECT_EQ(groups[0].lr, cfg.base_lr);
    EXPECT_EQ(groups[1].lr, cfg.fresh_lr);
  }
}

TEST(Training, SameSeedSameModel) {
  const auto cfg = small_run(WiringMode::decoupled_baseline, 4);
  const auto data = dataset(4, 4);
  const auto a = train(cfg, data, {}).first;
  const auto b = train(cfg, data, {}).first;
  EXPECT_TRUE(same_params(a, b));
  auto other = cfg;
  other.seed = 99;
  EXPECT_FALSE(same_params(a, train(other, data, {}).first));
}

TEST(Training, ContinuationNeverResizes) {
  auto cfg = small_run(WiringMode::decoupled_tcu, 10);
  FlowModel<float> model(cfg.model);
  const auto result = continue_without_interpolation(model, cfg, dataset(5, 4), {});
  EXPECT_EQ(result.steps, 4);  // 40% of 10
  EXPECT_EQ(result.aug_stats.resize_calls, 0);
  EXPECT_EQ(result.aug_stats.samples, 4 * cfg.batch);
  // The first run with interpolation on does resize.
  auto fresh = small_run(WiringMode::decoupled_tcu, 2);
  fresh.aug.min_scale = 1.3;
  fresh.aug.max_scale = 1.5;
  EXPECT_GT(train(fresh, dataset(5, 4), {}).second.aug_stats.resize_calls, 0);
}

TEST(Training, NonFiniteLossAborts) {
  auto cfg = small_run(WiringMode::shared, 2);
  auto data = dataset(6, 2);
  for (auto& s : data) s.flow[5] = std::numeric_limits<float>::quiet_NaN();
  cfg.aug.interpolation_enabled = false;
  FlowModel<float> model(cfg.model);
  try {
    fit(model, cfg, data, {});
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos) << e.what();
  }
}

TEST(Training, ValidationRowsAreSparse) {
  auto cfg = small_run(WiringMode::shared, 5);
  cfg.val_every = 2;
  const auto result = train(cfg, dataset(7, 3), dataset(8, 2)).second;
  ASSERT_EQ(result.metrics.size(), 5u);
  EXPECT_TRUE(std::isnan(result.metrics[0].epe_val));
  EXPECT_FALSE(std::isnan(result.metrics[1].epe_val));
  EXPECT_TRUE(std::isnan(result.metrics[2].epe_val));
  EXPECT_FALSE(std::isnan(result.metrics[4].epe_val));  // after the last step
  const auto csv = metrics_csv(result.metrics);
  EXPECT_EQ(csv.rfind("step,loss,epe_val,lr_group0,lr_group1\n", 0), 0u);
  EXPECT_NE(csv.find("\n1,"), std::string::npos);
  EXPECT_NE(csv.find(",,"), std::string::npos);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  auto cfg = small_run(WiringMode::decoupled_tcu, 2);
  const auto model = train(cfg, dataset(9, 2), {}).first;
  nlohmann::json meta;
  meta["note"] = "unit";
  const auto bytes = encode_checkpoint(model, meta);
  EXPECT_EQ(bytes.substr(0, 8), "FLOWUPCK");
  const auto ck = decode_checkpoint(bytes);
  EXPECT_TRUE(same_params(model, ck.model));
  EXPECT_EQ(ck.meta.at("note"), "unit");
  EXPECT_EQ(ck.model.config().mode, WiringMode::decoupled_tcu);
  EXPECT_EQ(encode_checkpoint(ck.model, meta), bytes);
  const auto s = gen_sample(10, 32, 32, 2);
  const auto low = avg_downsample(s.flow, 8);
  NoGradGuard no_grad;
  const auto a = model.predict(s.image, low), b = ck.model.predict(s.image, low);
  EXPECT_EQ(std::memcmp(a.data().data(), b.data().data(), a.data().size_bytes()), 0);
}

TEST(Checkpoint, CorruptInputsAreFormatErrors) {
  const auto cfg = small_run(WiringMode::shared, 1);
  const auto bytes = encode_checkpoint(FlowModel<float>(cfg.model), nlohmann::json::object());
  auto kind_of = [](const std::string& b) {
    try {
      decode_checkpoint(b);
    } catch (const FormatError& e) {
      return e.kind();
    }
    ADD_FAILURE() << "no FormatError";
    return FormatError::Kind::malformed;
  };
  EXPECT_EQ(kind_of("NOTACKPT" + bytes.substr(8)), FormatError::Kind::bad_magic);
  EXPECT_EQ(kind_of(bytes.substr(0, bytes.size() - 3)), FormatError::Kind::truncated);
  auto bad_version = bytes;
  bad_version[8] = 7;
  EXPECT_EQ(kind_of(bad_version), FormatError::Kind::malformed);
}
