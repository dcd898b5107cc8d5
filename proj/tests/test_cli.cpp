#include "fixtures.hpp"

#include "opnet/metrics.hpp"

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

using namespace opnet;
using namespace opnet::testing;
namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("cli");
    const auto r = run("simulate --n 12 --seed 7 --preset desk --out " + data().string());
    ASSERT_EQ(r.code, 0) << r.err;
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }

  static fs::path data() { return dir_->path() / "d"; }
  static fs::path tmp(const std::string& name) { return dir_->path() / name; }

  static CliRun run(const std::string& args) {
    const auto out = dir_->path() / "stdout.txt", err = dir_->path() / "stderr.txt";
    const std::string cmd = std::string("OPNET_LOG=quiet ") + OPNET_CLI_PATH + " " + args + " >" + out.string() +
                            " 2>" + err.string();
    const int status = std::system(cmd.c_str());
    CliRun r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
  }

  static std::map<std::string, std::string> tree(const fs::path& root) {
    std::map<std::string, std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
      if (e.is_regular_file()) files[fs::relative(e.path(), root).string()] = slurp(e.path());
    }
    return files;
  }

  static std::size_t count(const std::string& text, const std::string& needle) {
    std::size_t n = 0;
    for (auto pos = text.find(needle); pos != std::string::npos; pos = text.find(needle, pos + 1)) ++n;
    return n;
  }

  static TempDir* dir_;
};

TempDir* Cli::dir_ = nullptr;

}  // namespace

TEST_F(Cli, SimulateWritesTheDataset) {
  Index dirs = 0;
  for (const auto& e : fs::directory_iterator(data() / "trials")) dirs += e.is_directory() ? 1 : 0;
  EXPECT_EQ(dirs, 12);
  const auto r = run("stats --data " + data().string());
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("12"), std::string::npos);
}

TEST_F(Cli, SimulateIsDeterministic) {
  const auto again = tmp("d_again");
  ASSERT_EQ(run("simulate --n 12 --seed 7 --preset desk --out " + again.string()).code, 0);
  EXPECT_TRUE(tree(data()) == tree(again));
  const auto other = tmp("d_other");
  ASSERT_EQ(run("simulate --n 12 --seed 8 --preset desk --out " + other.string()).code, 0);
  EXPECT_FALSE(tree(data()) == tree(other));
}

TEST_F(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run("simulate --n 0 --out " + tmp("zero").string()).code, 2);
  EXPECT_FALSE(fs::exists(tmp("zero") / "manifest.json"));
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("simulate --n 5").code, 2);
  EXPECT_EQ(run("simulate --n 5 --preset lab --out " + tmp("lab").string()).code, 2);
  EXPECT_EQ(run("train --model b7 --data " + data().string() + " --out x.ckpt").code, 2);
  EXPECT_EQ(run("frobnicate").code, 2);
  // refuses to write into a populated directory
  EXPECT_EQ(run("simulate --n 3 --out " + data().string()).code, 2);
}

TEST_F(Cli, TrainingB1IsAnError) {
  const auto r = run("train --model b1 --data " + data().string() + " --out " + tmp("b1.ckpt").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("model has no trainable parameters"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(tmp("b1.ckpt")));
}

TEST_F(Cli, RuntimeErrorsExitOne) {
  EXPECT_EQ(run("eval --model b3 --data " + data().string() + " --ckpt " + tmp("absent.ckpt").string()).code, 1);
  EXPECT_EQ(run("stats --data " + tmp("nowhere").string()).code, 1);
}

TEST_F(Cli, TrainEvalPredictPlot) {
  const auto before = tree(data());
  const auto ckpt = tmp("b3.ckpt");
  auto r = run("train --model b3 --epochs 2 --data " + data().string() + " --out " + ckpt.string());
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(ckpt));
  const auto curve = slurp(tmp("b3.ckpt.curve.csv"));
  EXPECT_EQ(count(curve, "\n"), 4u) << curve;  // header plus epochs 0..2

  const auto report = tmp("b3_report.txt");
  r = run("eval --model b3 --data " + data().string() + " --ckpt " + ckpt.string() + " --out " + report.string());
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rep = read_report(report);
  EXPECT_GE(rep.success_rate, 0.0);
  EXPECT_LE(rep.success_rate, 1.0);
  EXPECT_EQ(rep.trials, 2);  // the test split of 12 trials

  // a checkpoint for one model cannot be evaluated as another
  EXPECT_NE(run("eval --model b5 --data " + data().string() + " --ckpt " + ckpt.string()).code, 0);

  r = run("eval --model b1 --data " + data().string() + " --split all --out " + tmp("b1_report.txt").string());
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(read_report(tmp("b1_report.txt")).trials, 12);

  const auto svg = tmp("pred.svg");
  r = run("predict --model b3 --data " + data().string() + " --ckpt " + ckpt.string() + " --trial 3 --svg " +
          svg.string() + " --csv " + tmp("pred.csv").string());
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(count(slurp(svg), "<polyline"), 2u);
  EXPECT_EQ(count(slurp(tmp("pred.csv")), "\n"), 136u);

  r = run("plot --kind traj --trial trial_00002 --b1 --data " + data().string() + " --ckpt " + ckpt.string() +
          " --out " + tmp("traj.svg").string());
  ASSERT_EQ(r.code, 0) << r.err;
  const auto traj = slurp(tmp("traj.svg"));
  EXPECT_GE(count(traj, "<polyline"), 2u);
  EXPECT_NE(traj.find("legend"), std::string::npos);

  for (const char* kind : {"hexbin", "hist-duration", "hist-distance"}) {
    r = run(std::string("plot --kind ") + kind + " --data " + data().string() + " --out " + tmp(std::string(kind) + ".svg").string());
    EXPECT_EQ(r.code, 0) << kind << r.err;
    EXPECT_EQ(slurp(tmp(std::string(kind) + ".svg")).rfind("<svg", 0), 0u) << kind;
  }

  // no command mutates its input dataset
  EXPECT_TRUE(tree(data()) == before);
}

TEST_F(Cli, FinetuneReportsZeroShotAndFinetuned) {
  const auto ckpt = tmp("ft_b3.ckpt");
  ASSERT_EQ(run("train --model b3 --epochs 1 --data " + data().string() + " --out " + ckpt.string()).code, 0);
  const auto r = run("finetune --folds 3 --epochs 1 --ckpt " + ckpt.string() + " --data " + data().string() + " --out " +
                     tmp("ft.txt").string());
  ASSERT_EQ(r.code, 0) << r.err;
  const auto text = slurp(tmp("ft.txt"));
  EXPECT_NE(text.find("zero_shot"), std::string::npos) << text;
  EXPECT_NE(text.find("finetuned"), std::string::npos) << text;
  EXPECT_EQ(run("finetune --folds 13 --ckpt " + ckpt.string() + " --data " + data().string()).code, 1);
}

TEST_F(Cli, PlotsOfAnEmptyDatasetFail) {
  const auto empty = tmp("empty");
  auto m = read_manifest(data());
  m.trial_count = 0;
  m.trial_ids.clear();
  write_dataset({}, m, empty);
  for (const char* kind : {"hist-duration", "hist-distance", "hexbin"}) {
    const auto r = run(std::string("plot --kind ") + kind + " --data " + empty.string() + " --out " + tmp("e.svg").string());
    EXPECT_NE(r.code, 0) << kind;
    EXPECT_FALSE(r.err.empty());
  }
}
