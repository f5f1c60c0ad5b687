// Copyright 2026 The pipeplan Authors
// SPDX-License-Identifier: Apache-2.0

#include "pipeplan/core.hpp"

#include <algorithm>
#include <numeric>
#include <set>

#include <fmt/core.h>

namespace pipeplan {

ModelSpec::ModelSpec(std::string name, std::vector<Cutpoint> cutpoints,
                     std::optional<Bytes> input_activation_bytes)
    : name_(std::move(name)), cutpoints_(std::move(cutpoints)) {
  if (cutpoints_.empty()) throw InputError("model: at least one cut-point is required");
  for (size_t i = 0; i < cutpoints_.size(); ++i) {
    if (cutpoints_[i].params <= 0)
      throw InputError(fmt::format("model.cutpoints[{}].params: must be positive", i));
    if (cutpoints_[i].activation_bytes <= 0)
      throw InputError(fmt::format("model.cutpoints[{}].activation_bytes: must be positive", i));
    total_params_ += cutpoints_[i].params;
  }
  input_activation_bytes_ = input_activation_bytes.value_or(cutpoints_.front().activation_bytes);
  if (input_activation_bytes_ < 0)
    throw InputError("model.input_activation_bytes: must be non-negative");
}

ModelSpec ModelSpec::repeated(std::string name, const RepeatedBlock& block,
                              std::optional<Bytes> input_activation_bytes) {
  if (block.repeat < 1) throw InputError("model.repeated_block.repeat: must be >= 1");
  ModelSpec spec(std::move(name),
                 std::vector<Cutpoint>(static_cast<size_t>(block.repeat),
                                       Cutpoint{block.params, block.activation_bytes}),
                 input_activation_bytes);
  spec.block_ = block;
  return spec;
}

void HardwareSpec::validate() const {
  if (gpu_memory <= 0) throw InputError("hardware.gpu_memory_bytes: must be positive");
  if (gpus_per_node < 1) throw InputError("hardware.gpus_per_node: must be >= 1");
  if (!(intra_node_bandwidth > 0))
    throw InputError("hardware.intra_node_bandwidth: must be positive");
  if (!(inter_node_bandwidth > 0))
    throw InputError("hardware.inter_node_bandwidth: must be positive");
  if (intra_node_bandwidth < inter_node_bandwidth)
    throw InputError("hardware.intra_node_bandwidth: must be >= inter_node_bandwidth");
  if (inter_node_latency.count() <= 0)
    throw InputError("hardware.inter_node_latency_us: must be positive");
  if (intra_node_latency.count() <= 0)
    throw InputError("hardware.intra_node_latency_us: must be positive");
  if (inter_node_jitter.count() < 0)
    throw InputError("hardware.inter_node_jitter_us: must be non-negative");
}

void JobSpec::validate() const {
  if (minibatch_size < 1) throw InputError("job.minibatch_size: must be >= 1");
  if (target_iterations < 1) throw InputError("job.target_iterations: must be >= 1");
  if (checkpoint_interval < 1) throw InputError("job.checkpoint_interval: must be >= 1");
}

ClusterState::ClusterState(std::vector<VmInfo> vms) : vms_(std::move(vms)) {
  std::set<std::string> seen;
  for (const auto& vm : vms_) {
    if (!seen.insert(vm.id).second) throw InputError(fmt::format("cluster: duplicate vm id '{}'", vm.id));
    if (vm.gpus < 1) throw InputError(fmt::format("cluster: vm '{}' must have >= 1 GPU", vm.id));
    total_gpus_ += vm.gpus;
  }
}

bool ClusterState::contains(const std::string& vm_id) const {
  return std::any_of(vms_.begin(), vms_.end(), [&](const VmInfo& v) { return v.id == vm_id; });
}

ClusterState ClusterState::packed(int gpus, int gpus_per_node) {
  std::vector<VmInfo> vms;
  const int per = std::max(1, gpus_per_node);
  for (int g = 0, n = 0; g < gpus; g += per, ++n) {
    vms.push_back(VmInfo{fmt::format("vm{}", n), std::min(per, gpus - g), fmt::format("node{}", n)});
  }
  return ClusterState(std::move(vms));
}

std::vector<int> ParallelConfig::even_stage_map(int num_cutpoints, int stages) {
  std::vector<int> map;
  if (stages < 1 || num_cutpoints < stages) return map;
  map.reserve(static_cast<size_t>(num_cutpoints));
  const int base = num_cutpoints / stages;
  const int extra = num_cutpoints % stages;
  for (int s = 0; s < stages; ++s) {
    const int count = base + (s < extra ? 1 : 0);
    map.insert(map.end(), static_cast<size_t>(count), s);
  }
  return map;
}

std::vector<std::pair<int, int>> ParallelConfig::stage_ranges() const {
  std::vector<std::pair<int, int>> ranges;
  if (stage_map.empty() || stages < 1 || stage_map.front() != 0) return {};
  int current = 0;
  int first = 0;
  for (int i = 1; i < static_cast<int>(stage_map.size()); ++i) {
    const int s = stage_map[static_cast<size_t>(i)];
    if (s == current) continue;
    if (s != current + 1) return {};
    ranges.emplace_back(first, i - 1);
    current = s;
    first = i;
  }
  ranges.emplace_back(first, static_cast<int>(stage_map.size()) - 1);
  if (static_cast<int>(ranges.size()) != stages) return {};
  return ranges;
}

const char* to_string(Constraint c) {
  switch (c) {
    case Constraint::NonPositive: return "non_positive";
    case Constraint::GpuBudget: return "gpu_budget";
    case Constraint::DepthExceedsCutpoints: return "depth_exceeds_cutpoints";
    case Constraint::MinibatchMismatch: return "minibatch_mismatch";
    case Constraint::StageMapInvalid: return "stage_map_invalid";
  }
  return "unknown";
}

int micro_batches_for(std::int64_t minibatch_size, int micro_batch_size, int replicas) {
  const std::int64_t per_step = static_cast<std::int64_t>(micro_batch_size) * replicas;
  if (per_step <= 0) return 0;
  return static_cast<int>((minibatch_size + per_step - 1) / per_step);
}

std::vector<Violation> validate_config(const ParallelConfig& config, const ModelSpec& model,
                                       const JobSpec& job, const ClusterState& cluster) {
  std::vector<Violation> out;
  const auto& c = config;
  if (c.stages < 1 || c.replicas < 1 || c.micro_batch_size < 1 || c.micro_batches < 1) {
    out.push_back({Constraint::NonPositive,
                   fmt::format("P={}, D={}, m={}, N_m={} must all be >= 1", c.stages, c.replicas,
                               c.micro_batch_size, c.micro_batches)});
  }
  const std::int64_t used = static_cast<std::int64_t>(c.stages) * c.replicas;
  if (used > cluster.total_gpus()) {
    out.push_back({Constraint::GpuBudget,
                   fmt::format("P*D = {} exceeds the {} available GPUs", used, cluster.total_gpus())});
  }
  const int k = model.num_cutpoints();
  if (c.stages > k) {
    out.push_back({Constraint::DepthExceedsCutpoints,
                   fmt::format("P = {} exceeds the {} cut-points", c.stages, k)});
  }
  if (c.micro_batch_size >= 1 && c.replicas >= 1 && c.micro_batches >= 1) {
    // Exact cover when divisible; otherwise only the final micro-batch may be
    // partially filled.
    const std::int64_t step = static_cast<std::int64_t>(c.micro_batch_size) * c.replicas;
    const std::int64_t cover = step * c.micro_batches;
    if (!(cover >= job.minibatch_size && cover - step < job.minibatch_size)) {
      out.push_back({Constraint::MinibatchMismatch,
                     fmt::format("m*N_m*D = {} does not cover M_Total = {} with at most one partial "
                                 "micro-batch",
                                 cover, job.minibatch_size)});
    }
  }
  if (static_cast<int>(c.stage_map.size()) != k) {
    out.push_back({Constraint::StageMapInvalid,
                   fmt::format("stage_map has {} entries for {} cut-points", c.stage_map.size(), k)});
  } else if (c.stages >= 1 && c.stage_ranges().empty()) {
    out.push_back({Constraint::StageMapInvalid,
                   "stage_map must assign cut-points to stages 0..P-1 contiguously and in order"});
  }
  return out;
}

}  // namespace pipeplan
