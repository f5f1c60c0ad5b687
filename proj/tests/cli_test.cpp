// Copyright 2026 The pipeplan Authors
// SPDX-License-Identifier: Apache-2.0

#include "pipeplan/cli.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "pipeplan/experiments.hpp"

namespace pipeplan {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

const fs::path kConfigs = fs::path(PIPEPLAN_SOURCE_DIR) / "configs";

struct Result {
  int code;
  std::string out, err;
};

Result cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string config(const std::string& name) { return (kConfigs / name).string(); }

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           (std::string("pipeplan_cli_") + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string tmp(const std::string& name) const { return (dir_ / name).string(); }
  fs::path dir_;
};

TEST_F(Cli, Version) {
  const auto r = cli({"--version"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find(version()), std::string::npos);
}

TEST_F(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(cli({"simulate", "--config", config("small.json"), "--frobnicate"}).code, 2);
  EXPECT_EQ(cli({"bogus"}).code, 2);
  EXPECT_EQ(cli({"simulate"}).code, 2);
  const auto r = cli({"simulate", "--config", tmp("absent.json")});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("absent.json"), std::string::npos);
}

TEST_F(Cli, SimulateIsByteIdenticalAcrossRuns) {
  const auto a = cli({"simulate", "--config", config("small.json"), "--seed", "11"});
  const auto b = cli({"simulate", "--config", config("small.json"), "--seed", "11"});
  ASSERT_EQ(a.code, 0) << a.err;
  EXPECT_EQ(a.out, b.out);
  const auto j = cli({"simulate", "--config", config("small.json"), "--json"});
  ASSERT_EQ(j.code, 0) << j.err;
  const auto doc = json::parse(j.out);
  EXPECT_EQ(doc["config"]["stages"], 4);
  EXPECT_GT(doc["examples_per_second"].get<double>(), 0);
}

TEST_F(Cli, SimulateWritesGanttAndEventLog) {
  const auto r = cli({"simulate", "--config", config("small.json"), "--gantt", tmp("g.csv"), "--event-log",
                      tmp("events.csv")});
  ASSERT_EQ(r.code, 0) << r.err;
  std::ifstream g(tmp("g.csv"));
  std::string header;
  std::getline(g, header);
  EXPECT_EQ(header, "stage,kind,microbatch,start_us,end_us");
  EXPECT_GT(fs::file_size(tmp("events.csv")), 0u);
  ASSERT_EQ(cli({"gantt", "--config", config("small.json"), "--out", tmp("g.svg")}).code, 0);
  std::ifstream svg(tmp("g.svg"));
  std::string first;
  std::getline(svg, first);
  EXPECT_NE(first.find("<svg"), std::string::npos);
}

TEST_F(Cli, PlanWithNoGpusIsInfeasible) {
  const auto r = cli({"plan", "--spec", config("small.json"), "--gpus", "0", "--out", tmp("c.json")});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("no feasible configuration"), std::string::npos);
  EXPECT_FALSE(fs::exists(tmp("c.json")));
}

TEST_F(Cli, PlanOutputFeedsSimulate) {
  const auto r = cli({"plan", "--spec", config("small.json"), "-G", "12", "--out", tmp("c.json"), "--json",
                      "--threads", "1"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto doc = json::parse(r.out);
  EXPECT_EQ(doc["gpus"], 12);
  const auto& chosen = doc["candidates"][doc["chosen"].get<size_t>()]["config"];
  EXPECT_LE(chosen["stages"].get<int>() * chosen["replicas"].get<int>(), 12);
  const auto sim = cli({"simulate", "--config", tmp("c.json"), "--json"});
  ASSERT_EQ(sim.code, 0) << sim.err;
  EXPECT_EQ(json::parse(sim.out)["config"], chosen);
}

TEST_F(Cli, CompareMatchesLibrary) {
  const auto r = cli({"compare", "--bandwidth-scale", "0.5,0.67,1.0", "--json"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto doc = json::parse(r.out);
  ASSERT_EQ(doc["rows"].size(), 3u);

  const auto preset = preset_gpt2_8p3b();
  const auto rows =
      compare_schedules(*preset.config, preset.model, preset.job, preset.profile, preset.hw, {}, {0.5, 0.67, 1.0});
  for (size_t i = 0; i < rows.size(); ++i) {
    const auto& row = doc["rows"][i];
    EXPECT_DOUBLE_EQ(row["bandwidth_scale"].get<double>(), rows[i].bandwidth_scale);
    EXPECT_DOUBLE_EQ(row["varuna_examples_per_second_per_gpu"].get<double>(), rows[i].varuna_per_gpu);
    EXPECT_DOUBLE_EQ(row["gpipe_examples_per_second_per_gpu"].get<double>(), rows[i].gpipe_per_gpu);
    EXPECT_DOUBLE_EQ(row["gap"].get<double>(), rows[i].gap());
  }
  EXPECT_EQ(cli({"compare", "--bandwidth-scale", "0,1"}).code, 2);
}

TEST_F(Cli, ReplayWritesTimeline) {
  const auto r = cli({"replay", "--config", config("small.json"), "--trace", config("small.trace"), "--csv",
                      tmp("t.csv"), "--svg", tmp("t.svg"), "--json", "--threads", "1"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto doc = json::parse(r.out);
  EXPECT_FALSE(doc["segments"].empty());
  std::ifstream csv(tmp("t.csv"));
  std::string header;
  std::getline(csv, header);
  EXPECT_EQ(header, "start,end,P,D,ex_per_s,ex_per_s_per_gpu,event");
  EXPECT_GT(fs::file_size(tmp("t.svg")), 0u);
}

TEST_F(Cli, PartitionAndCalibrate) {
  const auto p = cli({"partition", "--ops", config("ops.json"), "-K", "4", "-P", "2", "--json"});
  ASSERT_EQ(p.code, 0) << p.err;
  EXPECT_NO_THROW(json::parse(p.out));
  EXPECT_EQ(cli({"partition", "--ops", config("ops.json"), "-K", "40", "-P", "2"}).code, 2);

  const auto c = cli({"calibrate-synth", "--config", config("small.json"), "--out", tmp("p.json"), "--m-grid",
                      "1,2", "--d-max", "8"});
  ASSERT_EQ(c.code, 0) << c.err;
  const auto prof = json::parse(std::ifstream(tmp("p.json")));
  EXPECT_EQ(prof["m_grid"], json({1, 2}));
  EXPECT_EQ(prof["d_grid"].size(), 8u);
}

TEST_F(Cli, LargerSampleSimulates) {
  const auto r = cli({"plan", "--spec", config("gpt2-2.5b.json"), "-G", "36", "--out", tmp("c.json")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("6x6"), std::string::npos);
}

}  // namespace
}  // namespace pipeplan
