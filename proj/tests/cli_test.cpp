#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "fixtures.hpp"
#include "p3t/trainer.hpp"

namespace fs = std::filesystem;
using namespace p3t;

namespace {

const fs::path kWork = fs::temp_directory_path() / "p3t_cli_test";

int run(const std::string& args) {
  const std::string cmd = std::string("\"") + P3T_CLI + "\" " + args + " > \"" + (kWork / "last.log").string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string log_text() {
  std::ifstream in(kWork / "last.log");
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write(const fs::path& p, const std::string& text) {
  std::ofstream(p) << text;
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    fs::remove_all(kWork);
    fs::create_directories(kWork);
    ASSERT_EQ(run("gen-data --name desk8 --seed 7 --out \"" + (kWork / "data").string() + "\""), 0) << log_text();
    fixture::micro_model(16, 8, 7).save(kWork / "micro.p3tw");
    write(kWork / "cfg.txt", "# tiny run\nepochs = 1\npatches = 8\npatch_points = 8\ngraph_k = 3\nrefine_m = 3\n"
                             "offset_dim = 16\nmodel = " + (kWork / "micro.p3tw").string() + "\n");
  }

  static std::string data() { return "\"" + (kWork / "data" / "desk8").string() + "\""; }
  static std::string cfg() { return "\"" + (kWork / "cfg.txt").string() + "\""; }
};

TEST_F(Cli, GenDataWritesManifestsAndClouds) {
  const auto m = data::read_manifest(kWork / "data" / "desk8" / "train.csv");
  EXPECT_EQ(m.entries.size(), 800u);
  EXPECT_EQ(data::read_point_cloud(m.resolve(m.entries.front())).points.size(), 256u);
  EXPECT_TRUE(fs::exists(kWork / "data" / "desk8" / "test.csv"));
}

TEST_F(Cli, TrainWritesCheckpointMetricsAndResolvedConfig) {
  const auto out = kWork / "runs" / "a";
  ASSERT_EQ(run("train --config " + cfg() + " --data " + data() + " --out \"" + out.string() + "\" --alpha 0.3"), 0)
      << log_text();
  EXPECT_TRUE(fs::exists(out / "checkpoint.p3tc"));
  std::ifstream metrics(out / "metrics.jsonl");
  std::string line;
  std::size_t records = 0;
  for (; std::getline(metrics, line); ++records) EXPECT_EQ(line.find("{\"epoch\":" + std::to_string(records)), 0u);
  EXPECT_EQ(records, 2u);
  const auto echoed = train::load_config(out / "config.txt");
  EXPECT_EQ(echoed.alpha, 0.3);
  EXPECT_EQ(echoed.epochs, 1u);
  EXPECT_EQ(echoed.train_data, (kWork / "data" / "desk8" / "train.csv").string());

  ASSERT_EQ(run("eval --checkpoint \"" + (out / "checkpoint.p3tc").string() + "\""), 0) << log_text();
  EXPECT_NE(log_text().find("accuracy "), std::string::npos);
  EXPECT_NE(log_text().find("alpha = 0.3"), std::string::npos);
}

TEST_F(Cli, GradCheckPasses) {
  EXPECT_EQ(run("grad-check"), 0) << log_text();
  EXPECT_NE(log_text().find("PASS max_rel_error"), std::string::npos);
}

TEST_F(Cli, ExitCodes) {
  EXPECT_EQ(run("--help"), 0);
  EXPECT_EQ(run("train --help"), 0);
  EXPECT_NE(log_text().find("pretrain_epochs"), std::string::npos);
  EXPECT_EQ(run("train --out x --no-such-flag"), 1);
  EXPECT_EQ(run("frobnicate"), 1);
  EXPECT_EQ(run("train --out x --strategy weakest"), 1);
  write(kWork / "bad.txt", "alpha = 1.5\n");
  EXPECT_EQ(run("train --config \"" + (kWork / "bad.txt").string() + "\" --data " + data() + " --out x"), 1);
  EXPECT_NE(log_text().find("bad.txt:1:"), std::string::npos) << log_text();
  EXPECT_EQ(run("train --config " + cfg() + " --data \"" + (kWork / "missing").string() + "\" --out x"), 2);
  EXPECT_EQ(run("eval --checkpoint \"" + (kWork / "missing.p3tc").string() + "\""), 2);
}

}  // namespace
