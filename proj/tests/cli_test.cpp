#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
  int code = -1;
  std::string output;
};

Result run(const std::string& args) {
  const std::string cmd = std::string(ASAC_CLI_PATH) + " " + args + " 2>&1";
  Result r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  char buf[512];
  while (std::fgets(buf, sizeof buf, pipe)) r.output += buf;
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Column `col` of the first data row whose split is `split`.
std::string csv_cell(const std::string& csv, const std::string& split, std::size_t col) {
  std::istringstream lines(csv);
  std::string line;
  std::getline(lines, line);
  while (std::getline(lines, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
    if (cells.size() > col && cells[2] == split) return cells[col];
  }
  return "";
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("asac_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    const json cfg = {
        {"model",
         {{"patch_size", 8},
          {"num_layers", 1},
          {"num_heads", 2},
          {"model_dim", 8},
          {"ffn_dim", 16},
          {"controller", {{"latent_dim", 8}, {"codebook_dim", 4}, {"codebook_size", 8}}}}},
        {"dataset", {{"kind", "triangles"}, {"n_train", 24}, {"n_test", 12}, {"image_size", 24}}},
        {"target", {{"kind", "triangles"}, {"n_train", 24}, {"n_test", 12}, {"image_size", 24}, {"seed", 5}}},
        {"epochs", 2},
        {"batch_size", 8},
        {"learning_rate", 0.001}};
    std::ofstream(dir_ / "cfg.json") << cfg.dump(2);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string base(const std::string& out) const {
    return "--config " + (dir_ / "cfg.json").string() + " --out " + (dir_ / out).string();
  }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, TrainTwiceIsByteIdentical) {
  ASSERT_EQ(run("train " + base("a")).code, 0);
  ASSERT_EQ(run("train " + base("b")).code, 0);
  const auto a = slurp(dir_ / "a" / "metrics.csv");
  EXPECT_FALSE(a.empty());
  EXPECT_EQ(a, slurp(dir_ / "b" / "metrics.csv"));
  EXPECT_EQ(slurp(dir_ / "a" / "checkpoint.asac"), slurp(dir_ / "b" / "checkpoint.asac"));
  EXPECT_TRUE(fs::exists(dir_ / "a" / "config.resolved.json"));
  EXPECT_TRUE(fs::exists(dir_ / "a" / "analysis" / "codebook_usage.json"));
}

TEST_F(Cli, SetOverridesExactlyOneField) {
  ASSERT_EQ(run("gen-data " + base("plain")).code, 0);
  ASSERT_EQ(run("gen-data " + base("set") + " --set model.controller.commitment_cost=0.5").code, 0);
  const auto a = json::parse(slurp(dir_ / "plain" / "config.resolved.json"));
  const auto b = json::parse(slurp(dir_ / "set" / "config.resolved.json"));
  const auto diff = json::diff(a, b);
  ASSERT_EQ(diff.size(), 1u);
  EXPECT_EQ(diff[0]["path"], "/model/controller/commitment_cost");
  EXPECT_EQ(b["model"]["controller"]["commitment_cost"], 0.5);
  EXPECT_TRUE(fs::exists(dir_ / "plain" / "train.asds"));
}

TEST_F(Cli, ConfigErrorExitsWithKeyPath) {
  auto r = run("train " + base("bad") + " --set model.controller.codebook_sise=4");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("model.controller.codebook_sise"), std::string::npos) << r.output;
  auto t = run("train " + base("bad") + " --set epochs=-1");
  EXPECT_EQ(t.code, 2);
  EXPECT_NE(t.output.find("epochs"), std::string::npos);
}

TEST_F(Cli, ZeroEpsilonAttackMatchesEval) {
  ASSERT_EQ(run("train " + base("m")).code, 0);
  ASSERT_EQ(run("eval " + base("m")).code, 0);
  const auto clean = csv_cell(slurp(dir_ / "m" / "metrics.csv"), "test", 8);
  ASSERT_EQ(run("attack " + base("m") + " --kind both --eps 0").code, 0);
  const auto csv = slurp(dir_ / "m" / "metrics.csv");
  EXPECT_EQ(csv_cell(csv, "fgsm", 8), clean);
  EXPECT_EQ(csv_cell(csv, "pgd", 8), clean);
}

TEST_F(Cli, AnalyzeAndExport) {
  ASSERT_EQ(run("train " + base("m")).code, 0);
  ASSERT_EQ(run("analyze-codebook " + base("m") + " --samples codes").code, 0);
  const auto ks = json::parse(slurp(dir_ / "m" / "analysis" / "ks_layer0.json"));
  ASSERT_EQ(ks["matrix"].size(), 2u);
  EXPECT_EQ(ks["matrix"][0][0], 1.0);
  EXPECT_EQ(ks["matrix"][0][1], ks["matrix"][1][0]);

  ASSERT_EQ(run("export --runs " + (dir_ / "m").string() + " " + (dir_ / "m").string() + " --out " +
                (dir_ / "x").string())
                .code,
            0);
  const auto summary = json::parse(slurp(dir_ / "x" / "summary.json"));
  EXPECT_EQ(summary.size(), 2u);
}

TEST_F(Cli, MissingCheckpointFails) {
  auto r = run("eval " + base("empty"));
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.code, 2);
}
