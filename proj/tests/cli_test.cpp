// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "uniwrv/errors.hpp"

namespace cli = uniwrv::cli;
namespace md = uniwrv::model;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

class CliFixture : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("uniwrv_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    write_config(json{{"data", {{"conditions", {1, 2}}, {"clips_per_condition", 2}, {"frames", 4}, {"height", 16}, {"width", 16}}},
                      {"model", {{"crop", 16}}},
                      {"train", {{"iterations", 2}, {"checkpoint_interval", 0}}}});
  }
  void TearDown() override { fs::remove_all(dir_); }

  void write_config(const json& j) { std::ofstream(dir_ / "run.json") << j.dump(); }
  std::string cfg() const { return (dir_ / "run.json").string(); }
  std::string path(const char* name) const { return (dir_ / name).string(); }

  fs::path dir_;
};

}  // namespace

TEST(RunConfig, EmptyObjectIsAllDefaults) {
  const auto c = cli::RunConfig::from_json(json::object());
  EXPECT_EQ(c.model.to_json(), md::ModelConfig{}.to_json());
  EXPECT_EQ(c.train.to_json(), md::TrainConfig{}.to_json());
  EXPECT_FALSE(c.data_dir);
}

TEST(RunConfig, RoundTrip) {
  auto c = cli::RunConfig::from_json(json{{"flags", {{"hard_routing", true}, {"grad_mode_64bit", true}}},
                                          {"data", {{"dir", "somewhere"}, {"seed", 9}}}});
  EXPECT_TRUE(c.model.hard_routing);
  EXPECT_TRUE(c.train.grad_mode_64bit);
  const auto again = cli::RunConfig::from_json(c.to_json());
  EXPECT_EQ(again.to_json(), c.to_json());
  EXPECT_EQ(again.data_dir->string(), "somewhere");
  EXPECT_EQ(again.data.seed, 9u);
}

TEST(RunConfig, RejectsUnknownKeysEverywhere) {
  for (const json& j : {json{{"extra", 1}}, json{{"model", {{"chanels", 8}}}}, json{{"data", {{"size", 8}}}},
                        json{{"train", {{"lr_max", 1}}}}, json{{"flags", {{"fast", true}}}}}) {
    EXPECT_THROW(cli::RunConfig::from_json(j), uniwrv::ConfigError) << j.dump();
  }
}

TEST(RunConfig, FlagsMayNotContradictSections) {
  EXPECT_THROW(cli::RunConfig::from_json(json{{"model", {{"hard_routing", false}}}, {"flags", {{"hard_routing", true}}}}),
               uniwrv::ConfigError);
  EXPECT_NO_THROW(cli::RunConfig::from_json(json{{"model", {{"hard_routing", true}}}, {"flags", {{"hard_routing", true}}}}));
}

TEST_F(CliFixture, GenerateTwiceIsByteIdentical) {
  ASSERT_EQ(run({"generate", "--config", cfg(), "--out", path("a"), "--seed", "7"}).code, 0);
  ASSERT_EQ(run({"generate", "--config", cfg(), "--out", path("b"), "--seed", "7"}).code, 0);
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir_ / "a")) {
    const fs::path rel = fs::relative(e.path(), dir_ / "a");
    ASSERT_TRUE(fs::exists(dir_ / "b" / rel)) << rel;
    if (e.is_regular_file()) {
      ++files;
      EXPECT_EQ(slurp(e.path()), slurp(dir_ / "b" / rel)) << rel;
    }
  }
  EXPECT_GT(files, 30u);
  EXPECT_TRUE(fs::exists(dir_ / "a" / "resolved_config.json"));
}

TEST_F(CliFixture, GenerateRefusesNonEmptyUnlessForced) {
  ASSERT_EQ(run({"generate", "--config", cfg(), "--out", path("a")}).code, 0);
  EXPECT_EQ(run({"generate", "--config", cfg(), "--out", path("a")}).code, cli::kIoError);
  EXPECT_EQ(run({"generate", "--config", cfg(), "--out", path("a"), "--force"}).code, 0);
}

TEST_F(CliFixture, EvalOfIdentityModelReportsDegradedPsnr) {
  ASSERT_EQ(run({"generate", "--config", cfg(), "--out", path("data")}).code, 0);
  md::ModelConfig mc;
  mc.crop = 16;
  md::save_checkpoint(md::Model(mc), 0, dir_ / "id.uwrv");
  const auto r = run({"eval", "--ckpt", path("id.uwrv"), "--data", path("data"), "--report", path("rep")});
  ASSERT_EQ(r.code, 0) << r.err;
  std::ifstream csv(dir_ / "rep" / "metrics.csv");
  std::string line;
  std::getline(csv, line);
  std::size_t rows = 0;
  while (std::getline(csv, line)) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string s; std::getline(ss, s, ',');) f.push_back(s);
    ASSERT_EQ(f.size(), 7u);
    EXPECT_NEAR(std::stod(f[3]), std::stod(f[5]), 1e-6) << line;
    ++rows;
  }
  EXPECT_GT(rows, 0u);
  EXPECT_TRUE(fs::exists(dir_ / "rep" / "restored"));
  EXPECT_TRUE(fs::exists(dir_ / "rep" / "resolved_config.json"));
}

TEST_F(CliFixture, TrainThenInspect) {
  ASSERT_EQ(run({"generate", "--config", cfg(), "--out", path("data")}).code, 0);
  auto r = run({"train", "--config", cfg(), "--data", path("data"), "--out", path("run")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("resolved config:"), std::string::npos);
  for (const char* f : {"final.uwrv", "metrics.csv", "config.json", "resolved_config.json"})
    EXPECT_TRUE(fs::exists(dir_ / "run" / f)) << f;
  r = run({"inspect", "--ckpt", path("run/final.uwrv"), "--data", path("data"), "--out", path("ins"), "--samples", "2"});
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"routing.csv", "priors.csv", "purity.csv", "resolved_config.json"})
    EXPECT_TRUE(fs::exists(dir_ / "ins" / f)) << f;
}

TEST_F(CliFixture, BenchRoutingWritesFourSchemes) {
  ASSERT_EQ(run({"bench-routing", "--config", cfg(), "--out", path("cx.csv")}).code, 0);
  std::ifstream f(dir_ / "cx.csv");
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(f, line)) lines.push_back(line);
  ASSERT_EQ(lines.size(), 5u);
  EXPECT_EQ(lines[0], "scheme,params,macs");
  EXPECT_TRUE(fs::exists(dir_ / "cx.config.json"));
}

TEST_F(CliFixture, GradcheckSingleOp) {
  const auto r = run({"gradcheck", "--op", "mul", "--trials", "2"});
  EXPECT_EQ(r.code, 0) << r.out << r.err;
  EXPECT_NE(r.out.find("PASS"), std::string::npos);
}

TEST_F(CliFixture, GradcheckFailureExitsOne) {
  // A step this large cannot meet a 1e-12 tolerance on a nonlinear op.
  const auto r = run({"gradcheck", "--op", "softmax", "--eps", "0.5", "--tol", "1e-12", "--trials", "1"});
  EXPECT_EQ(r.code, cli::kVerificationFailed) << r.out;
  EXPECT_NE(r.out.find("FAIL"), std::string::npos);
}

TEST_F(CliFixture, ExitCodes) {
  EXPECT_EQ(run({}).code, cli::kUsageError);
  EXPECT_EQ(run({"frobnicate"}).code, cli::kUsageError);
  EXPECT_EQ(run({"gradcheck", "--op", "no_such_op"}).code, cli::kUsageError);
  EXPECT_EQ(run({"gradcheck", "--all", "--op", "mul"}).code, cli::kUsageError);
  EXPECT_EQ(run({"train", "--config", cfg(), "--out", path("run")}).code, cli::kUsageError);
  std::ofstream(dir_ / "bad.json") << "{\"model\": {\"channels\": 8,}}";
  EXPECT_EQ(run({"bench-routing", "--config", path("bad.json"), "--out", path("x.csv")}).code, cli::kUsageError);
  EXPECT_EQ(run({"bench-routing", "--config", path("missing.json"), "--out", path("x.csv")}).code, cli::kIoError);
  EXPECT_EQ(run({"eval", "--ckpt", path("missing.uwrv"), "--data", path("d"), "--report", path("r")}).code,
            cli::kIoError);
  EXPECT_EQ(run({"--help"}).code, 0);
}
