// Copyright 2026 The pipeplan Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace pipeplan {

/// All simulated time is integral microseconds so that results are exact and
/// identical across platforms.
using Duration = std::chrono::microseconds;
using Bytes = std::int64_t;

inline double to_seconds(Duration d) { return std::chrono::duration<double>(d).count(); }
inline Duration from_seconds(double s) { return Duration{std::llround(s * 1e6)}; }

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent input: parse failures, schema violations,
/// profile invariant violations. Maps to CLI exit code 2.
class InputError : public Error {
 public:
  using Error::Error;
};

/// The request is well-formed but has no solution (for example no pipeline
/// depth fits in memory). Maps to CLI exit code 1.
class InfeasibleError : public Error {
 public:
  using Error::Error;
};

struct Cutpoint {
  std::int64_t params = 0;
  /// Output activation at this cut-point, bytes per input example.
  Bytes activation_bytes = 0;
};

struct RepeatedBlock {
  std::int64_t params = 0;
  Bytes activation_bytes = 0;
  int repeat = 0;
};

/// A model described at cut-point granularity.
class ModelSpec {
 public:
  ModelSpec(std::string name, std::vector<Cutpoint> cutpoints,
            std::optional<Bytes> input_activation_bytes = std::nullopt);

  /// Homogeneous model made of `block.repeat` identical blocks, one cut-point
  /// per block.
  static ModelSpec repeated(std::string name, const RepeatedBlock& block,
                            std::optional<Bytes> input_activation_bytes = std::nullopt);

  const std::string& name() const { return name_; }
  int num_cutpoints() const { return static_cast<int>(cutpoints_.size()); }
  const Cutpoint& cutpoint(int i) const { return cutpoints_.at(static_cast<size_t>(i)); }
  const std::vector<Cutpoint>& cutpoints() const { return cutpoints_; }
  std::int64_t total_params() const { return total_params_; }
  /// Bytes per example of the model input stashed by the first stage.
  Bytes input_activation_bytes() const { return input_activation_bytes_; }
  const std::optional<RepeatedBlock>& repeated_block() const { return block_; }

 private:
  std::string name_;
  std::vector<Cutpoint> cutpoints_;
  std::int64_t total_params_ = 0;
  Bytes input_activation_bytes_ = 0;
  std::optional<RepeatedBlock> block_;
};

struct HardwareSpec {
  Bytes gpu_memory = 0;
  int gpus_per_node = 1;
  double intra_node_bandwidth = 0;  // bytes/second
  double inter_node_bandwidth = 0;  // bytes/second
  Duration inter_node_latency{0};
  Duration inter_node_jitter{0};  // standard deviation
  Duration intra_node_latency{0};

  /// Throws InputError naming the first violated field.
  void validate() const;
};

struct JobSpec {
  std::int64_t minibatch_size = 1;  // M_Total, fixed across reconfigurations
  std::int64_t target_iterations = 1;
  int checkpoint_interval = 1;  // mini-batches between checkpoints

  void validate() const;
};

struct VmInfo {
  std::string id;
  int gpus = 1;
  std::string node;
};

class ClusterState {
 public:
  ClusterState() = default;
  explicit ClusterState(std::vector<VmInfo> vms);

  /// G = sum of GPUs over available VMs.
  int total_gpus() const { return total_gpus_; }
  const std::vector<VmInfo>& vms() const { return vms_; }
  bool contains(const std::string& vm_id) const;

  /// Synthetic cluster of `gpus` GPUs packed `gpus_per_node` to a VM.
  static ClusterState packed(int gpus, int gpus_per_node);

 private:
  std::vector<VmInfo> vms_;
  int total_gpus_ = 0;
};

/// One job configuration. Stages and micro-batches are counted from 1 in the
/// public vocabulary; `stage_map[i]` is the 0-based stage of cut-point i.
struct ParallelConfig {
  int stages = 1;          // P
  int replicas = 1;        // D
  int micro_batch_size = 1;  // m
  int micro_batches = 1;   // N_m per replica per mini-batch
  std::vector<int> stage_map;

  /// Cut-points split into `stages` contiguous groups, sizes as equal as
  /// possible with the larger groups first.
  static std::vector<int> even_stage_map(int num_cutpoints, int stages);

  /// [first, last] cut-point range of each stage; empty when the map is not
  /// contiguous.
  std::vector<std::pair<int, int>> stage_ranges() const;

  int gpus_used() const { return stages * replicas; }

  friend bool operator==(const ParallelConfig&, const ParallelConfig&) = default;
};

enum class Constraint {
  NonPositive,
  GpuBudget,         // P * D <= G
  DepthExceedsCutpoints,  // P <= K
  MinibatchMismatch,  // m * N_m * D covers M_Total exactly (last micro-batch may be partial)
  StageMapInvalid,
};

struct Violation {
  Constraint constraint;
  std::string message;
};

const char* to_string(Constraint c);

/// Checks every structural constraint on a configuration. Never throws; an
/// empty result means the configuration is valid.
std::vector<Violation> validate_config(const ParallelConfig& config, const ModelSpec& model,
                                       const JobSpec& job, const ClusterState& cluster);

/// N_m = ceil(M_Total / (m * D)).
int micro_batches_for(std::int64_t minibatch_size, int micro_batch_size, int replicas);

}  // namespace pipeplan
