// Copyright 2026 The pipeplan Authors
// SPDX-License-Identifier: Apache-2.0

// Ready-made model/hardware setups and the schedule comparison used by the
// `compare` command and the acceptance checks.

#pragma once

#include <optional>
#include <vector>

#include "pipeplan/calibration.hpp"
#include "pipeplan/core.hpp"
#include "pipeplan/simulator.hpp"

namespace pipeplan {

struct Preset {
  ModelSpec model;
  HardwareSpec hw;
  JobSpec job;
  CalibrationProfile profile;
  std::optional<ParallelConfig> config;
};

/// Transformer stack of `layers` blocks of hidden size `hidden`, one
/// cut-point per block, sequence 1024 in fp16.
ModelSpec transformer_model(const std::string& name, std::int64_t hidden, int layers);

/// V100-class 16 GB GPUs, one per VM, 10 Gbps between VMs.
HardwareSpec commodity_vm_hardware();

/// 8.3B-parameter GPT-2 (72 blocks, hidden 3072) at 19x3, m = 1, mini-batch
/// 8192.
Preset preset_gpt2_8p3b();

/// 2.5B-parameter GPT-2 (54 blocks, hidden 1920), mini-batch 8192, profiled
/// at the given micro-batch sizes for rings up to `d_max`.
Preset preset_gpt2_2p5b(const std::vector<int>& m_grid = {4}, int d_max = 100);

struct ScheduleComparison {
  /// Inter-node bandwidth multiplier; transfer times scale by 1 / scale.
  double bandwidth_scale = 1;
  double varuna_per_gpu = 0;  // examples/s/GPU over P * D
  double gpipe_per_gpu = 0;
  Duration varuna_time{0};
  Duration gpipe_time{0};
  /// varuna_per_gpu / gpipe_per_gpu - 1.
  double gap() const { return gpipe_per_gpu > 0 ? varuna_per_gpu / gpipe_per_gpu - 1 : 0; }
};

/// Simulates `config` under both schedules at every bandwidth scale. An
/// empty cluster means P * D GPUs packed `hw.gpus_per_node` to a VM.
std::vector<ScheduleComparison> compare_schedules(const ParallelConfig& config, const ModelSpec& model,
                                                  const JobSpec& job, const CalibrationProfile& profile,
                                                  const HardwareSpec& hw, const ClusterState& cluster,
                                                  const std::vector<double>& bandwidth_scales,
                                                  const SimOptions& options = {});

}  // namespace pipeplan
