#include "support.hpp"

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <iterator>
#include <sstream>

namespace fs = std::filesystem;
using testing_support::TempDir;

namespace {

const char* tiny_config_text =
    "image_height = 8\nimage_width = 16\nconv_channels = 4,8\nd_model = 8\nheads = 2\nd_ffn = 12\n"
    "backbone_units = 1\nmax_length = 6\nglyph_scale = 1\nlabel_max_length = 5\nbatch_size = 2\nepochs = 1\n"
    "eval_every = 2\nval_samples = 4\nlr = 1e-3\n";

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    std::ofstream(dir_.path() / "tiny.cfg") << tiny_config_text;
    ASSERT_EQ(run("gen-data --config tiny.cfg --train 8 --val 4 --test 6 --out data"), 0);
  }

  /// Runs the CLI inside the temp directory and returns its exit code.
  int run(const std::string& args) const {
    const auto cmd = "cd '" + dir_.path().string() + "' && '" + EASYFIRST_CLI + "' " + args + " > out.log 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  int train(const std::string& extra = "") const {
    return run("train --config tiny.cfg --dataset data --checkpoint m.ckpt --max-steps 2 " + extra);
  }

  fs::path path(const std::string& name) const { return dir_.path() / name; }

  TempDir dir_;
};

}  // namespace

TEST_F(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(run(""), 1);
  EXPECT_EQ(run("frobnicate"), 1);
  EXPECT_EQ(run("eval --no-such-flag"), 1);
  EXPECT_EQ(run("eval --dataset data"), 1);  // missing --checkpoint
  EXPECT_EQ(run("gen-data --config missing.cfg --out x"), 1);
  EXPECT_EQ(run("--help"), 0);
}

TEST_F(Cli, GenDataWritesSplits) {
  for (const auto* split : {"train", "val", "test"}) EXPECT_TRUE(fs::exists(path("data") / split / "index.tsv"));
  std::istringstream index(slurp(path("data/test/index.tsv")));
  std::string line;
  std::size_t rows = 0;
  while (std::getline(index, line)) ++rows;
  EXPECT_EQ(rows, 6u);
}

TEST_F(Cli, TrainEvaluateSweepBenchTrace) {
  ASSERT_EQ(train(), 0);
  ASSERT_TRUE(fs::exists(path("m.ckpt")));
  EXPECT_TRUE(fs::exists(path("m.ckpt.metrics.tsv")));

  ASSERT_EQ(run("eval --checkpoint m.ckpt --dataset data -K 2 --out eval1.txt"), 0);
  ASSERT_EQ(run("eval --checkpoint m.ckpt --dataset data -K 2 --out eval2.txt"), 0);
  EXPECT_EQ(slurp(path("eval1.txt")), slurp(path("eval2.txt")));
  EXPECT_EQ(slurp(path("eval1.txt")).rfind("samples\t6\n", 0), 0u);
  EXPECT_EQ(run("eval --checkpoint m.ckpt --dataset data --teacher --out teacher.txt"), 0);
  EXPECT_EQ(run("eval --checkpoint m.ckpt --dataset data --no-eos-postprocess --out raw.txt"), 0);

  ASSERT_EQ(run("sweep --checkpoint m.ckpt --dataset data --ks 1,2,6 --out sweep.tsv"), 0);
  const auto sweep = slurp(path("sweep.tsv"));
  EXPECT_EQ(std::count(sweep.begin(), sweep.end(), '\n'), 4);

  ASSERT_EQ(run("bench --checkpoint m.ckpt --dataset data --out bench.txt"), 0);
  EXPECT_NE(slurp(path("bench.txt")).find("greedy\t200\t"), std::string::npos);
  EXPECT_EQ(run("bench --checkpoint m.ckpt --dataset data --decodes 10"), 1);

  ASSERT_EQ(run("trace --checkpoint m.ckpt --dataset data -K 3 --index 1 --out trace.jsonl"), 0);
  const auto trace = slurp(path("trace.jsonl"));
  EXPECT_EQ(std::count(trace.begin(), trace.end(), '\n'), 3);
  EXPECT_EQ(run("trace --checkpoint m.ckpt --image data/test/test_000002.pgm --greedy --out greedy.jsonl"), 0);

  const int ffn = run("ffn-sim --checkpoint m.ckpt --dataset data --index 0 --out ffn");
  EXPECT_TRUE(ffn == 0 || ffn == 2);
  if (ffn == 0) EXPECT_TRUE(fs::exists(path("ffn.parallel.tsv")));
}

TEST_F(Cli, BadIterationCountsAreUsageErrors) {
  ASSERT_EQ(train(), 0);
  EXPECT_EQ(run("eval --checkpoint m.ckpt --dataset data -K 0"), 1);
  EXPECT_EQ(run("eval --checkpoint m.ckpt --dataset data -K 7"), 1);
  EXPECT_EQ(run("sweep --checkpoint m.ckpt --dataset data --ks 1,9"), 1);
  EXPECT_EQ(run("trace --checkpoint m.ckpt --dataset data --index 99"), 1);
}

TEST_F(Cli, DataAndCheckpointErrorsExitTwo) {
  EXPECT_EQ(run("eval --checkpoint missing.ckpt --dataset data"), 2);
  std::ofstream(path("junk.ckpt")) << "not a checkpoint";
  EXPECT_EQ(run("eval --checkpoint junk.ckpt --dataset data"), 2);
  ASSERT_EQ(train(), 0);
  EXPECT_EQ(run("eval --checkpoint m.ckpt --dataset nowhere"), 2);
  fs::create_directories(path("bad/test"));
  std::ofstream(path("bad/test/index.tsv")) << "x.pgm\tABC\n";
  EXPECT_EQ(run("eval --checkpoint m.ckpt --dataset bad"), 2);
}

TEST_F(Cli, DivergentTrainingExitsThree) {
  std::ofstream(path("tiny.cfg"), std::ios::app) << "lr = 1e30\n";
  EXPECT_EQ(run("train --config tiny.cfg --dataset data --checkpoint boom.ckpt"), 3);
  EXPECT_TRUE(fs::exists(path("boom.ckpt.diagnostic.txt")));
}

TEST_F(Cli, IdenticalFlagsGiveIdenticalFiles) {
  ASSERT_EQ(run("gen-data --config tiny.cfg --train 3 --val 1 --test 2 --out again"), 0);
  for (const auto& e : fs::directory_iterator(path("again/test")))
    if (e.path().extension() == ".pgm") EXPECT_EQ(slurp(e.path()), slurp(path("data/test") / e.path().filename())) << e.path().filename();
  ASSERT_EQ(train(), 0);
  const auto first = slurp(path("m.ckpt"));
  ASSERT_EQ(run("train --config tiny.cfg --dataset data --checkpoint m2.ckpt --max-steps 2"), 0);
  EXPECT_EQ(slurp(path("m2.ckpt")), first);
}
