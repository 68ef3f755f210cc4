#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <fstream>
#include <sys/wait.h>

#include "helpers.hpp"

using m2i2::testing::TempDir;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string output;
};

Result run(const std::string& args) {
  const std::string cmd = std::string(M2I2_CLI_PATH) + " " + args + " 2>&1";
  Result r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 512> buf{};
  while (fgets(buf.data(), buf.size(), pipe)) r.output += buf.data();
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::size_t line_count(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  std::string line;
  while (std::getline(in, line)) ++n;
  return n;
}

class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("cli");
    const auto d = dir_->path().string();
    ASSERT_EQ(run("synth --kind captions --n 8 --seed 1 --image-size 32 --out " + d + "/caps").code, 0);
    ASSERT_EQ(run("synth --kind vqa --n 4 --seed 2 --image-size 32 --out " + d + "/vqa").code, 0);
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }
  static std::string d() { return dir_->path().string(); }
  static TempDir* dir_;
};

TempDir* CliTest::dir_ = nullptr;

}  // namespace

TEST_F(CliTest, AllObjectivesDisabledIsRejected) {
  const auto r = run("pretrain --preset test --data " + d() + "/caps --out " + d() +
                     "/none --no-mim --no-mlm --no-itm --no-itc");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("error:"), std::string::npos);
}

TEST_F(CliTest, UnknownConfigKeyIsRejected) {
  const auto r = run("pretrain --preset test --data " + d() + "/caps --out " + d() +
                     "/bad --warp_speed=9");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("warp_speed"), std::string::npos);
}

TEST_F(CliTest, MissingDataIsAnError) {
  const auto r = run("pretrain --preset test --data " + d() + "/nowhere --out " + d() + "/x");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("error:"), std::string::npos);
}

TEST_F(CliTest, PretrainFinetuneEvalAttn) {
  const auto pre = run("pretrain --preset test --data " + d() + "/caps --out " + d() +
                       "/pre --epochs=2 --batch_size=4 --queue_capacity=8");
  ASSERT_EQ(pre.code, 0) << pre.output;
  EXPECT_TRUE(fs::exists(d() + "/pre/checkpoint.bin"));
  EXPECT_TRUE(fs::exists(d() + "/pre/config.json"));
  EXPECT_TRUE(fs::exists(d() + "/pre/timing.jsonl"));
  EXPECT_EQ(line_count(d() + "/pre/metrics.jsonl"), 4u);

  const auto neither = run("finetune --preset test --data " + d() + "/vqa --out " + d() + "/ft");
  EXPECT_NE(neither.code, 0);
  const auto both = run("finetune --preset test --data " + d() + "/vqa --out " + d() +
                        "/ft --from-scratch --init " + d() + "/pre/checkpoint.bin");
  EXPECT_NE(both.code, 0);

  const auto ft = run("finetune --preset test --data " + d() + "/vqa --out " + d() +
                      "/ft --init " + d() + "/pre/checkpoint.bin --epochs=2");
  ASSERT_EQ(ft.code, 0) << ft.output;

  const auto ev = run("eval --data " + d() + "/vqa --checkpoint " + d() +
                      "/ft/checkpoint.bin --out " + d() + "/ev --forms all");
  ASSERT_EQ(ev.code, 0) << ev.output;
  EXPECT_NE(ev.output.find("Overall"), std::string::npos);
  EXPECT_EQ(line_count(d() + "/ev/predictions.jsonl"), 4u);

  const auto at = run("attn --data " + d() + "/vqa --checkpoint " + d() +
                      "/ft/checkpoint.bin --out " + d() + "/attn --limit 2");
  ASSERT_EQ(at.code, 0) << at.output;
  std::size_t maps = 0;
  for (const auto& e : fs::directory_iterator(d() + "/attn"))
    maps += e.path().extension() == ".pgm";
  EXPECT_EQ(maps, 2u);
}

TEST_F(CliTest, ResumeFromCheckpointContinuesLog) {
  const auto base = "pretrain --preset test --data " + d() + "/caps --batch_size=4 --queue_capacity=8 --epochs=2";
  ASSERT_EQ(run(std::string(base) + " --out " + d() + "/full").code, 0);
  ASSERT_EQ(run(std::string(base) + " --out " + d() + "/part --stop_at_step=1").code, 0);
  const auto r = run(std::string(base) + " --out " + d() + "/part --resume " + d() + "/part/checkpoint.bin");
  ASSERT_EQ(r.code, 0) << r.output;
  std::ifstream a(d() + "/full/metrics.jsonl"), b(d() + "/part/metrics.jsonl");
  std::string sa((std::istreambuf_iterator<char>(a)), {}), sb((std::istreambuf_iterator<char>(b)), {});
  EXPECT_EQ(sa, sb);
}
