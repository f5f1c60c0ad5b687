// Copyright 2026 The pipeplan Authors
// SPDX-License-Identifier: Apache-2.0

#include "pipeplan/experiments.hpp"

#include <fmt/core.h>

#include "pipeplan/partitioner.hpp"
#include "pipeplan/scheduler.hpp"

namespace pipeplan {

ModelSpec transformer_model(const std::string& name, std::int64_t hidden, int layers) {
  const RepeatedBlock block{12 * hidden * hidden + 13 * hidden, 1024 * hidden * 2, layers};
  return ModelSpec::repeated(name, block);
}

HardwareSpec commodity_vm_hardware() {
  HardwareSpec hw;
  hw.gpu_memory = Bytes{16} << 30;
  hw.gpus_per_node = 1;
  hw.intra_node_bandwidth = 10e9;
  hw.inter_node_bandwidth = 1.25e9;
  hw.intra_node_latency = Duration{10};
  hw.inter_node_latency = Duration{100};
  return hw;
}

Preset preset_gpt2_8p3b() {
  constexpr int kStages = 19, kReplicas = 3, kM = 1;
  ModelSpec model = transformer_model("gpt2-8.3b", 3072, 72);
  const HardwareSpec hw = commodity_vm_hardware();
  JobSpec job;
  job.minibatch_size = 8192;
  CalibrationProfile profile = synthesize_profile(model, hw, {kM}, {1, kReplicas});
  ParallelConfig c;
  c.stages = kStages;
  c.replicas = kReplicas;
  c.micro_batch_size = kM;
  c.micro_batches = micro_batches_for(job.minibatch_size, kM, kReplicas);
  c.stage_map = assign_stages(model, kStages, kM, profile).stage_map();
  return Preset{std::move(model), hw, job, std::move(profile), std::move(c)};
}

Preset preset_gpt2_2p5b(const std::vector<int>& m_grid, int d_max) {
  ModelSpec model = transformer_model("gpt2-2.5b", 1920, 54);
  const HardwareSpec hw = commodity_vm_hardware();
  JobSpec job;
  job.minibatch_size = 8192;
  std::vector<int> d_grid;
  for (int d = 1; d <= d_max; ++d) d_grid.push_back(d);
  CalibrationProfile profile = synthesize_profile(model, hw, m_grid, d_grid);
  return Preset{std::move(model), hw, job, std::move(profile), std::nullopt};
}

std::vector<ScheduleComparison> compare_schedules(const ParallelConfig& config, const ModelSpec& model,
                                                  const JobSpec& job, const CalibrationProfile& profile,
                                                  const HardwareSpec& hw, const ClusterState& cluster,
                                                  const std::vector<double>& bandwidth_scales,
                                                  const SimOptions& options) {
  const ClusterState where =
      cluster.vms().empty() ? ClusterState::packed(config.gpus_used(), hw.gpus_per_node) : cluster;
  const Placement placement = Placement::packed(where, config.stages, config.replicas);
  const Schedule varuna = generate_varuna_schedule(config.stages, config.micro_batches);
  const Schedule gpipe = generate_gpipe_schedule(config.stages, config.micro_batches);
  const auto per_gpu = [&](Duration t) {
    return static_cast<double>(job.minibatch_size) / to_seconds(t) / config.gpus_used();
  };

  std::vector<ScheduleComparison> rows;
  for (double scale : bandwidth_scales) {
    if (!(scale > 0)) throw InputError(fmt::format("bandwidth scale must be > 0, got {}", scale));
    const CalibrationProfile p = profile.with_inter_node_scale(1.0 / scale);
    ScheduleComparison row;
    row.bandwidth_scale = scale;
    row.varuna_time = simulate_minibatch(varuna, config, model, p, placement, options).minibatch_time;
    row.gpipe_time = simulate_minibatch(gpipe, config, model, p, placement, options).minibatch_time;
    row.varuna_per_gpu = per_gpu(row.varuna_time);
    row.gpipe_per_gpu = per_gpu(row.gpipe_time);
    rows.push_back(row);
  }
  return rows;
}

}  // namespace pipeplan
