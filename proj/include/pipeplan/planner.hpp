// Copyright 2026 The pipeplan Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "pipeplan/calibration.hpp"
#include "pipeplan/core.hpp"
#include "pipeplan/partitioner.hpp"
#include "pipeplan/scheduler.hpp"
#include "pipeplan/simulator.hpp"

namespace pipeplan {

/// Smallest grid m after which the mean per-example forward time
/// (mean over cut-points of F_i(m) / m) stops improving by more than
/// `improvement_threshold`. When the grid runs out while still improving,
/// the largest m accepted by `fits` (all of them when `fits` is empty).
/// Throws InputError on an empty grid and InfeasibleError when `fits`
/// rejects every m.
int select_microbatch(const CalibrationProfile& profile, double improvement_threshold = 0.02,
                      const std::function<bool(int)>& fits = {});

struct PlannerOptions {
  /// Skip select_microbatch and use this m.
  std::optional<int> micro_batch_size;
  double improvement_threshold = 0.02;
  SchedulePolicy policy = SchedulePolicy::Varuna;
  SimOptions simulation;
  BalanceOptions balance;
  /// VMs never used for placement (fail-stutter exclusions).
  std::set<std::string> excluded_vms;
  /// Compute slowdown of individual VMs, applied to the placement.
  std::map<std::string, double> compute_scale;
  /// Worker threads for candidate simulations; 0 picks the hardware count.
  int threads = 0;
};

struct PlanCandidate {
  ParallelConfig config;
  StageAssignment assignment;
  Duration minibatch_time{0};
  double examples_per_second = 0;
  /// Throughput over the G available GPUs (unused GPUs count against it).
  double examples_per_second_per_gpu = 0;
  /// Throughput over the P * D GPUs actually used.
  double examples_per_second_per_used_gpu = 0;
};

struct PlanResult {
  int gpus = 0;  // G
  int micro_batch_size = 0;
  int min_stages = 0;  // P_min
  /// One entry per simulated P, ascending.
  std::vector<PlanCandidate> candidates;
  size_t chosen = 0;

  const PlanCandidate& best() const { return candidates.at(chosen); }
  const ParallelConfig& config() const { return best().config; }
  int unused_gpus() const { return gpus - best().config.gpus_used(); }
};

/// Everything needed to simulate one configuration; inputs are shared
/// read-only between planner threads.
struct PlanContext {
  const ModelSpec& model;
  const JobSpec& job;
  const CalibrationProfile& profile;
  const HardwareSpec& hw;
  const ClusterState& cluster;
};

/// Simulates `config` with the given stage assignment and fills in the
/// throughput figures for G = `gpus`.
PlanCandidate evaluate_config(const PlanContext& ctx, int gpus, const ParallelConfig& config,
                              const StageAssignment& assignment, const PlannerOptions& options = {});

/// Memory check of a configuration under the schedule it would run.
MemoryReport config_memory(const PlanContext& ctx, const ParallelConfig& config,
                           const StageAssignment& assignment, SchedulePolicy policy);

/// Sweeps P from the smallest memory-feasible depth up to min(K, G) with
/// D = floor(G / P), one balanced assignment and one simulation per P, and
/// returns the fastest. Ties go to the smaller P. The cluster supplies
/// placement; an empty cluster is replaced by G GPUs packed
/// `hw.gpus_per_node` to a VM. Throws InfeasibleError("no feasible
/// configuration ...") when nothing fits.
PlanResult plan(int gpus, const ModelSpec& model, const JobSpec& job, const CalibrationProfile& profile,
                const HardwareSpec& hw, const ClusterState& cluster, const PlannerOptions& options = {});

}  // namespace pipeplan
