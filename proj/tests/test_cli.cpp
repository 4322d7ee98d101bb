// Drives the pamm-cli binary end to end on a tiny dataset.

#include "pamm/experiments.hpp"

#include <gtest/gtest.h>

#include <cstdlib>

using namespace pamm;

namespace {

const std::filesystem::path kRoot = std::filesystem::temp_directory_path() / "pamm-cli-test";

int run(const std::string& args) {
  const std::string cmd = std::string(PAMM_CLI) + " " + args + " >" + (kRoot / "stdout.txt").string() + " 2>" +
                          (kRoot / "stderr.txt").string();
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string p(const std::string& leaf) { return (kRoot / leaf).string(); }

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    std::filesystem::remove_all(kRoot);
    std::filesystem::create_directories(kRoot);
    std::string spec;
    for (const auto* f : {"rattled-small", "rattled-large", "strained", "mdlike"}) {
      spec += "family." + std::string(f) + ".count=6\n";
    }
    write_file_atomic(kRoot / "spec.txt", spec);
    write_file_atomic(kRoot / "run.txt", "train.eval_interval=2\ntrain.batch_size=3\n");
    ASSERT_EQ(run("gen --config " + p("spec.txt") + " --out " + p("data")), 0);
  }
};

}  // namespace

TEST_F(Cli, GenIsDeterministic) {
  for (const auto* f : {"rattled-small", "rattled-large", "strained", "mdlike"}) {
    EXPECT_TRUE(std::filesystem::exists(kRoot / "data" / (std::string(f) + ".jsonl")));
  }
  ASSERT_EQ(run("gen --config " + p("spec.txt") + " --out " + p("data2")), 0);
  for (const auto& entry : std::filesystem::directory_iterator(kRoot / "data")) {
    EXPECT_EQ(read_file(entry.path()), read_file(kRoot / "data2" / entry.path().filename()));
  }
  write_file_atomic(kRoot / "bad.txt", "family.strained.amplitude=1.5\n");
  EXPECT_EQ(run("gen --config " + p("bad.txt") + " --out " + p("bad")), 2);
  EXPECT_NE(read_file(kRoot / "stderr.txt").find("strained"), std::string::npos);
}

TEST_F(Cli, UsageErrors) {
  EXPECT_EQ(run(""), 2);
  EXPECT_EQ(run("frobnicate"), 2);
  EXPECT_EQ(run("train --dataset " + p("data") + " --variant nonsense --out " + p("x")), 2);
  EXPECT_EQ(run("sweep-buckets --dataset " + p("data") + " --buckets 64,96 --out " + p("x")), 2);
  EXPECT_EQ(run("train --dataset " + p("missing") + " --out " + p("x")), 3);
  EXPECT_EQ(run("analyze --checkpoint " + p("none.ckpt") + " --dataset " + p("data") + " --mode bogus"), 3);
}

TEST_F(Cli, TrainVariantsShareEvalSteps) {
  const auto common = " --dataset " + p("data") + " --config " + p("run.txt") + " --steps 3 --seed 4 --out ";
  for (const auto* v : {"baseline", "pamm-gate", "pamm-affine"}) {
    ASSERT_EQ(run(std::string("train --variant ") + v + common + p("train")), 0) << v;
  }
  auto steps_of = [&](const std::string& v) {
    std::vector<std::string> out;
    const auto lines = split(read_file(kRoot / "train" / (v + "-s4") / "metrics.csv"), '\n');
    for (std::size_t k = 2; k < lines.size(); ++k) {
      if (!lines[k].empty()) out.push_back(split(lines[k], ',')[0] + split(lines[k], ',')[1] + split(lines[k], ',')[2]);
    }
    return out;
  };
  EXPECT_EQ(steps_of("baseline"), steps_of("pamm-gate"));
  EXPECT_EQ(steps_of("baseline"), steps_of("pamm-affine"));
  const auto rec = ExperimentRecord::parse(read_file(kRoot / "train" / "pamm-gate-s4" / "record.txt"));
  EXPECT_EQ(rec.status, RunStatus::Done);

  const auto before = read_file(kRoot / "train" / "pamm-gate-s4" / "metrics.csv");
  ASSERT_EQ(run(std::string("train --variant pamm-gate") + common + p("train-again")), 0);
  EXPECT_EQ(read_file(kRoot / "train-again" / "pamm-gate-s4" / "metrics.csv"), before);
  EXPECT_EQ(read_file(kRoot / "train-again" / "summary-pamm-gate.csv"), read_file(kRoot / "train" / "summary-pamm-gate.csv"));
}

TEST_F(Cli, SeedListReportsMeanAndStd) {
  ASSERT_EQ(run("train --variant pair-only --dataset " + p("data") + " --config " + p("run.txt") +
                " --steps 2 --seed 1,2,3 --out " + p("seeds")),
            0);
  const auto lines = split(read_file(kRoot / "seeds" / "summary-pair-only.csv"), '\n');
  ASSERT_GE(lines.size(), 3u);
  EXPECT_TRUE(lines[0].starts_with("# config_hash="));
  const auto cells = split(lines[2], ',');
  EXPECT_EQ(cells[1], "3");
  std::vector<double> v;
  for (int s = 1; s <= 3; ++s) {
    const auto st = load_checkpoint(kRoot / "seeds" / ("pair-only-s" + std::to_string(s)) / "final.ckpt");
    v.push_back(final_metrics(st, "val").energy_mae);
  }
  const auto stats = seed_stats(v);
  EXPECT_EQ(parse_real(cells[4]), stats.mean);
  EXPECT_EQ(parse_real(cells[5]), stats.std);
}

TEST_F(Cli, EvalFamiliesAndAnalyses) {
  const auto common = " --dataset " + p("data") + " --config " + p("run.txt") + " --steps 2 --seed 1 --out ";
  ASSERT_EQ(run("train --variant pamm-affine" + common + p("ev")), 0);
  ASSERT_EQ(run("train --variant baseline" + common + p("ev")), 0);
  const auto model = p("ev/pamm-affine-s1/final.ckpt");
  const auto base = p("ev/baseline-s1/final.ckpt");

  ASSERT_EQ(run("eval-families --checkpoint " + model + " --dataset " + p("data") + " --out " + p("fam.csv")), 0);
  auto lines = split(read_file(kRoot / "fam.csv"), '\n');
  EXPECT_EQ(lines.size(), 2 + 5 + 1u);
  ASSERT_EQ(run("eval-families --checkpoint " + model + " --baseline-checkpoint " + base + " --dataset " + p("data") +
                " --out " + p("paired.csv")),
            0);
  lines = split(read_file(kRoot / "paired.csv"), '\n');
  EXPECT_EQ(split(lines[1], ',').size(), 5u);

  ASSERT_EQ(run("analyze --mode motif-freq --checkpoint " + model + " --dataset " + p("data") + " --out " +
                p("freq.csv")),
            0);
  lines = split(read_file(kRoot / "freq.csv"), '\n');
  EXPECT_EQ(split(lines[lines.size() - 2], ',').back(), "1");
  ASSERT_EQ(run("analyze --mode gate-usage --checkpoint " + model + " --dataset " + p("data") + " --out " +
                p("gate.csv")),
            0);
  EXPECT_NE(read_file(kRoot / "gate.csv").find("layer1_mean_abs_affine_scale"), std::string::npos);
  EXPECT_EQ(run("analyze --mode gate-usage --checkpoint " + base + " --dataset " + p("data")), 2);
  ASSERT_EQ(run("analyze --mode motif-delta --checkpoint " + model + " --baseline-checkpoint " + model +
                " --dataset " + p("data") + " --out " + p("self.csv")),
            0);
  lines = split(read_file(kRoot / "self.csv"), '\n');
  for (std::size_t k = 2; k + 1 < lines.size(); ++k) EXPECT_EQ(split(lines[k], ',').back(), "0") << lines[k];
}
