// Copyright 2026 The pipeplan Authors
// SPDX-License-Identifier: Apache-2.0

#include "pipeplan/io.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <functional>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "test_support.hpp"

namespace pipeplan {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string error_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const InputError& e) {
    return e.what();
  }
  return "";
}

CalibrationProfile sample_profile() {
  const auto model = testing::uniform_model(3, 10'000'000, 1 << 20);
  auto hw = testing::test_hardware();
  hw.inter_node_jitter = Duration{20};
  return synthesize_profile(model, hw, {1, 2, 4}, {1, 2, 8});
}

TEST(ProfileFormat, RoundTripIsExact) {
  const auto p = sample_profile();
  std::ostringstream out;
  write_profile(p, out);
  const auto back = parse_profile(out.str());
  EXPECT_EQ(back.m_grid(), p.m_grid());
  EXPECT_EQ(back.d_grid(), p.d_grid());
  EXPECT_EQ(back.bytes_per_param_state(), p.bytes_per_param_state());
  ASSERT_EQ(back.num_cutpoints(), p.num_cutpoints());
  for (int i = 0; i < p.num_cutpoints(); ++i) {
    for (int m : p.m_grid()) {
      EXPECT_EQ(back.forward(i, m), p.forward(i, m));
      EXPECT_EQ(back.backward(i, m), p.backward(i, m));
      for (bool inter : {false, true}) {
        EXPECT_EQ(back.activation_transfer(i, m, inter).mean, p.activation_transfer(i, m, inter).mean);
        EXPECT_EQ(back.activation_transfer(i, m, inter).stddev, p.activation_transfer(i, m, inter).stddev);
        EXPECT_EQ(back.gradient_transfer(i, m, inter).wire, p.gradient_transfer(i, m, inter).wire);
      }
    }
    for (int d : p.d_grid()) EXPECT_EQ(back.allreduce(i, d), p.allreduce(i, d));
  }
  std::ostringstream again;
  write_profile(back, again);
  EXPECT_EQ(again.str(), out.str());
}

json minimal_profile() {
  return json::parse(R"({
    "format_version": 1, "m_grid": [1], "d_grid": [1, 2],
    "cutpoints": [{"forward_us": [10], "backward_us": [20], "allreduce_us": [0, 5]}]
  })");
}

TEST(ProfileFormat, MinimalDocumentDefaultsTransfers) {
  const auto p = parse_profile(minimal_profile().dump());
  EXPECT_EQ(p.activation_transfer(0, 1, true).mean, Duration{0});
  EXPECT_EQ(p.bytes_per_param_state(), 16);
}

TEST(ProfileFormat, NonzeroSingleReplicaAllreduceRejected) {
  auto doc = minimal_profile();
  doc["cutpoints"][0]["allreduce_us"] = {500000, 5};
  EXPECT_NE(error_of([&] { parse_profile(doc.dump(), "p.json"); }).find("cutpoints[0].allreduce_us[0]"),
            std::string::npos);
}

TEST(ProfileFormat, MissingFieldNamesItsPath) {
  auto doc = minimal_profile();
  doc["cutpoints"][0].erase("backward_us");
  const auto e = error_of([&] { parse_profile(doc.dump(), "p.json"); });
  EXPECT_NE(e.find("p.json"), std::string::npos) << e;
  EXPECT_NE(e.find("$.cutpoints[0].backward_us"), std::string::npos) << e;
}

TEST(ProfileFormat, UnknownKeyAndBadVersion) {
  auto doc = minimal_profile();
  doc["cutpoints"][0]["forwrd_us"] = {1};
  EXPECT_NE(error_of([&] { parse_profile(doc.dump()); }).find("$.cutpoints[0].forwrd_us"), std::string::npos);
  doc = minimal_profile();
  doc["format_version"] = 7;
  EXPECT_NE(error_of([&] { parse_profile(doc.dump()); }).find("unsupported version 7"), std::string::npos);
  EXPECT_NE(error_of([&] { parse_profile("{not json"); }).find("not valid JSON"), std::string::npos);
}

TEST(ProfileFormat, WrongTypeAndLength) {
  auto doc = minimal_profile();
  doc["m_grid"] = {1.5};
  EXPECT_NE(error_of([&] { parse_profile(doc.dump()); }).find("expected an integer"), std::string::npos);
  doc = minimal_profile();
  doc["cutpoints"][0]["forward_us"] = {10, 20};
  EXPECT_NE(error_of([&] { parse_profile(doc.dump()); }).find("forward_us"), std::string::npos);
}

TEST(OpProfileFormat, ParsesSharedGroups) {
  const auto p = parse_op_profile(R"({
    "format_version": 1,
    "ops": [
      {"name": "emb", "compute_us": 5, "output_activation_bytes": 64, "params": 100, "param_groups": ["wte"]},
      {"name": "head", "compute_us": 5, "output_activation_bytes": 64, "params": 10, "param_groups": ["wte"]}
    ],
    "shared_groups": ["wte"]
  })");
  ASSERT_EQ(p.ops.size(), 2u);
  EXPECT_EQ(p.ops[0].param_groups, std::vector<std::string>{"wte"});
  EXPECT_TRUE(p.shared_groups.count("wte"));
  EXPECT_NE(error_of([] { parse_op_profile(R"({"format_version": 1, "ops": [{"compute_us": 1}]})"); })
                .find("$.ops[0].output_activation_bytes"),
            std::string::npos);
}

json small_job() {
  return json::parse(R"({
    "model": {"name": "t", "block": {"params": 10000000, "activation_bytes": 1048576, "repeat": 6}},
    "hardware": {"gpu_memory_bytes": 17179869184, "gpus_per_node": 2, "intra_node_bandwidth": 1e10,
                 "inter_node_bandwidth": 1e9, "intra_node_latency_us": 5, "inter_node_latency_us": 50},
    "job": {"minibatch_size": 64, "target_iterations": 10, "checkpoint_interval": 2},
    "cluster": {"vms": [{"id": "a", "gpus": 2, "node": "n0"}, {"id": "b", "gpus": 2, "node": "n1"}]},
    "synthesis": {"m_grid": [1, 2], "d_max": 4},
    "config": {"stages": 2, "replicas": 2, "micro_batch_size": 2},
    "morphing": {"horizon_s": 60, "heartbeat_period_s": 2}
  })");
}

TEST(JobFormat, ParsesAndCompletesConfig) {
  const auto j = parse_job(small_job().dump(), "job.json");
  EXPECT_EQ(j.model.num_cutpoints(), 6);
  EXPECT_EQ(j.hw.gpus_per_node, 2);
  EXPECT_EQ(j.cluster.total_gpus(), 4);
  EXPECT_EQ(j.job.checkpoint_interval, 2);
  ASSERT_TRUE(j.synthesis);
  EXPECT_EQ(j.synthesis->d_grid, (std::vector<int>{1, 2, 3, 4}));
  ASSERT_TRUE(j.config);
  EXPECT_EQ(j.config->micro_batches, 16);  // ceil(64 / (2 * 2))
  EXPECT_EQ(j.config->stage_map, (std::vector<int>{0, 0, 0, 1, 1, 1}));
  EXPECT_EQ(j.morphing.horizon, from_seconds(60));
  EXPECT_EQ(j.morphing.heartbeat_period, from_seconds(2));
}

TEST(JobFormat, ErrorsCarrySourceAndPath) {
  auto doc = small_job();
  doc["job"]["minibatch_sise"] = 3;
  EXPECT_NE(error_of([&] { parse_job(doc.dump(), "job.json"); }).find("job.json: $.job.minibatch_sise"),
            std::string::npos);
  doc = small_job();
  doc["cluster"]["gpus"] = 4;
  EXPECT_NE(error_of([&] { parse_job(doc.dump()); }).find("exactly one of"), std::string::npos);
  doc = small_job();
  doc["config"]["stages"] = 9;
  EXPECT_NE(error_of([&] { parse_job(doc.dump()); }).find("exceeds"), std::string::npos);
  doc = small_job();
  doc["profile"] = "p.json";
  EXPECT_NE(error_of([&] { parse_job(doc.dump()); }).find("not both"), std::string::npos);
}

class TempDir : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           (std::string("pipeplan_io_") + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_ / "profiles");
    fs::create_directories(dir_ / "out" / "deep");
  }
  void TearDown() override { fs::remove_all(dir_); }
  fs::path dir_;
};

TEST_F(TempDir, JobWithConfigKeepsProfileReachable) {
  const auto model = ModelSpec::repeated("t", RepeatedBlock{10'000'000, 1 << 20, 6});
  write_profile(synthesize_profile(model, testing::test_hardware(), {1, 2}, {1, 2}), dir_ / "profiles" / "p.json");
  auto doc = small_job();
  doc.erase("synthesis");
  doc.erase("config");
  doc["profile"] = "profiles/p.json";
  std::ofstream(dir_ / "job.json") << doc.dump();
  const auto job = load_job(dir_ / "job.json");

  ParallelConfig c;
  c.stages = 3;
  c.replicas = 1;
  c.micro_batch_size = 1;
  c.micro_batches = 64;
  c.stage_map = {0, 0, 1, 1, 2, 2};
  const auto text = job_with_config(job, c, dir_ / "out" / "deep");
  EXPECT_EQ(json::parse(text)["profile"], "../../profiles/p.json");
  std::ofstream(dir_ / "out" / "deep" / "chosen.json") << text;
  const auto again = load_job(dir_ / "out" / "deep" / "chosen.json");
  ASSERT_TRUE(again.config);
  EXPECT_EQ(*again.config, c);
  EXPECT_EQ(again.profile.forward(5, 2), job.profile.forward(5, 2));
}

TEST_F(TempDir, MissingFilesAreInputErrors) {
  EXPECT_NE(error_of([&] { load_job(dir_ / "nope.json"); }).find("cannot open"), std::string::npos);
  auto doc = small_job();
  doc.erase("synthesis");
  doc["profile"] = "missing.json";
  std::ofstream(dir_ / "job.json") << doc.dump();
  EXPECT_NE(error_of([&] { load_job(dir_ / "job.json"); }).find("missing.json"), std::string::npos);
}

}  // namespace
}  // namespace pipeplan
