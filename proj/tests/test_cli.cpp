#include <gtest/gtest.h>
#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "flowup/flowup.hpp"

using namespace flowup;
namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "flowup_cli_test";

struct Run {
  int code = -1;
  std::string out;
};

// Runs the CLI with `args`, capturing stdout and stderr.
Run cli(const std::string& args) {
  fs::create_directories(kRoot);
  const auto log = kRoot / "last.log";
  const std::string cmd = std::string("\"") + FLOWUP_CLI + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  r.out = ss.str();
  return r;
}

std::string slurp(const fs::path& p) { return detail::read_file(p); }

fs::path fresh(const std::string& name) {
  const auto p = kRoot / name;
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST(Cli, GenDataIsDeterministic) {
  const auto a = fresh("gen_a"), b = fresh("gen_b");
  ASSERT_EQ(cli("gen-data --out " + a.string() + " --count 3 --size 32x48 --seed 7").code, 0);
  ASSERT_EQ(cli("gen-data --out " + b.string() + " --count 3 --size 32x48 --seed 7").code, 0);
  for (const char* f : {"index.txt", "00000.flo", "00002.flo", "00001.img.ppm"}) {
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  }
  EXPECT_EQ(flo_read(a / "00000.flo").shape(), (Shape{2, 32, 48}));
}

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(cli("gen-data --bogus 1").code, 2);
  EXPECT_EQ(cli("").code, 2);
  EXPECT_EQ(cli("no-such-command").code, 2);
}

TEST(Cli, RuntimeErrorsExitOne) {
  const auto r = cli("gen-data --out " + fresh("bad").string() + " --size 30x32");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("error:"), std::string::npos);
}

TEST(Cli, EvalDetailOnIdenticalFieldsIsZero) {
  const auto data = fresh("eval_data");
  ASSERT_EQ(cli("gen-data --out " + data.string() + " --count 2 --size 64x64 --seed 3").code, 0);
  const auto csv = kRoot / "eval.csv";
  const auto r = cli("eval-detail --pred " + data.string() + " --gt " + data.string() + " --out " + csv.string());
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("pixel epe 0,"), std::string::npos) << r.out;
  const auto text = slurp(csv);
  EXPECT_EQ(text.rfind("bucket,detail_lo", 0), 0u);
}

TEST(Cli, GradcheckSingleOp) {
  const auto r = cli("gradcheck --op add");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("add"), std::string::npos);
  EXPECT_NE(r.out.find("ok"), std::string::npos);
  EXPECT_EQ(cli("gradcheck --op nonexistent").code, 1);
}

TEST(Cli, HullStudyWritesOneRowPerScene) {
  const auto data = fresh("hull_data");
  ASSERT_EQ(cli("gen-data --out " + data.string() + " --count 3 --size 64x64 --shapes 5").code, 0);
  const auto csv = kRoot / "hull.csv";
  const auto r = cli("hull-study --data " + data.string() + " --masks 1,3,5 --out " + csv.string());
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("monotonicity violations: 0"), std::string::npos) << r.out;
  const auto text = slurp(csv);
  EXPECT_EQ(text.rfind("scene,motions,pixels,fraction_m1,fraction_m3,fraction_m5\n", 0), 0u);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 4);
}

TEST(Cli, TrainContinueAndUpsample) {
  const auto data = fresh("train_data");
  ASSERT_EQ(cli("gen-data --out " + data.string() + " --count 4 --size 32x32 --seed 5").code, 0);
  const auto ckpt = kRoot / "model.ckpt";
  auto r = cli("train --data " + data.string() + " --mode dc-tcu --mask-sizes 5,3,3 --steps 2 --batch 1 --out " +
               ckpt.string());
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_TRUE(fs::exists(kRoot / "model.ckpt.metrics.csv"));
  const auto ck = load_checkpoint(ckpt);
  EXPECT_EQ(ck.model.config().mode, WiringMode::decoupled_tcu);
  EXPECT_EQ(ck.model.config().tcu.mask_sizes, (std::vector<int>{5, 3, 3}));

  r = cli("continue-noaug --ckpt " + ckpt.string() + " --steps 1");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("resize operations during continuation: 0"), std::string::npos) << r.out;
  EXPECT_TRUE(fs::exists(kRoot / "model-noaug.ckpt"));

  const auto s = gen_sample(11, 32, 32, 2);
  flo_write(kRoot / "low.flo", avg_downsample(s.flow, 8));
  ppm_write(kRoot / "img.ppm", s.image);
  const auto out = kRoot / "up.flo";
  r = cli("upsample --ckpt " + ckpt.string() + " --flow-lr " + (kRoot / "low.flo").string() + " --image " +
          (kRoot / "img.ppm").string() + " --out " + out.string());
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(flo_read(out).shape(), (Shape{2, 32, 32}));

  // A flow that is not 1/8 of the image is rejected.
  flo_write(kRoot / "low_bad.flo", Tensor<float>::zeros({2, 3, 4}));
  r = cli("upsample --ckpt " + ckpt.string() + " --flow-lr " + (kRoot / "low_bad.flo").string() + " --image " +
          (kRoot / "img.ppm").string() + " --out " + out.string());
  EXPECT_EQ(r.code, 1);
}
