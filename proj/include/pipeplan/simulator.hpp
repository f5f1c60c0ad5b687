// Copyright 2026 The pipeplan Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <iosfwd>
#include <set>
#include <string>
#include <vector>

#include "pipeplan/calibration.hpp"
#include "pipeplan/core.hpp"
#include "pipeplan/scheduler.hpp"

namespace pipeplan {

struct GpuSlot {
  std::string vm_id;
  int gpu_index = 0;
  std::string node_id;
  /// Multiplier on every compute time of the task run here (1.0 = nominal;
  /// above 1 models a straggling GPU).
  double compute_scale = 1.0;
};

/// Where each (stage, replica) worker runs.
class Placement {
 public:
  Placement(int stages, int replicas, std::vector<GpuSlot> slots);

  /// Fills GPUs VM by VM, replica-major: replica r, stage s takes the
  /// (r * P + s)-th GPU, so consecutive stages share a node when possible.
  /// VMs in `excluded` are skipped. Throws InfeasibleError when the cluster
  /// has fewer than P * D usable GPUs.
  static Placement packed(const ClusterState& cluster, int stages, int replicas,
                          const std::set<std::string>& excluded = {});

  int stages() const { return stages_; }
  int replicas() const { return replicas_; }
  /// `stage` is 0-based here.
  const GpuSlot& slot(int stage, int replica) const;
  GpuSlot& slot(int stage, int replica);
  bool inter_node(int stage_a, int replica_a, int stage_b, int replica_b) const;
  const std::vector<GpuSlot>& slots() const { return slots_; }

 private:
  int stages_;
  int replicas_;
  std::vector<GpuSlot> slots_;
};

enum class GanttKind : std::uint8_t { Forward, Backward, Recompute, AllReduce };
char to_char(GanttKind kind);

struct GanttEntry {
  GanttKind kind = GanttKind::Forward;
  int micro_batch = 0;  // 0 for allreduce
  Duration start{0};
  Duration end{0};
};

/// One activation (forward) or gradient (backward) message between
/// neighbouring stages of one replica.
struct Message {
  bool gradient = false;
  int micro_batch = 1;
  int from_stage = 1;  // 1-based
  int to_stage = 1;
  int replica = 0;
  Duration sent{0};        // producer task finished
  Duration wire_start{0};  // link acquired
  Duration arrived{0};     // consumer may use it
};

struct SimOptions {
  std::uint64_t seed = 0;
  /// Run another ready task when the next scheduled one is still waiting.
  bool opportunistic = true;
  /// Serialize transfers on each directed link; false gives infinite
  /// capacity links.
  bool link_serialization = true;
  /// Start every stage's allreduce only when all stages finished backward.
  bool allreduce_barrier = false;
  /// Constant cost added to each mini-batch (e.g. optimizer step on CPU).
  Duration fixed_overhead{0};
  /// Optional `time_us,stage,replica,event,detail` debug log.
  std::ostream* event_log = nullptr;
};

struct SimulationResult {
  int stages = 0;
  int replicas = 0;
  int micro_batches = 0;
  std::uint64_t seed = 0;
  Duration minibatch_time{0};
  /// Time the last backward finished anywhere.
  Duration pipeline_time{0};
  /// Indexed [stage][replica], stage 0-based.
  std::vector<std::vector<std::vector<GanttEntry>>> gantt;
  std::vector<Message> messages;
  /// Allreduce duration of each stage.
  std::vector<Duration> allreduce;
  /// Idle time of each stage inside [0, pipeline_time], averaged over replicas.
  std::vector<Duration> stage_idle;
  /// Idle share of all workers' time inside [0, pipeline_time].
  double bubble_fraction = 0;
  /// Largest number of micro-batches with a stashed input, per stage.
  std::vector<int> peak_in_flight;
  /// Largest number of simultaneously live full activation sets, per stage.
  std::vector<int> peak_working_sets;
  /// Peak activation bytes per stage from the two counts above.
  std::vector<Bytes> peak_activation_bytes;

  /// Total Gantt entries over every stage and replica.
  size_t entry_count() const;
};

/// Runs one mini-batch: N_m micro-batches through every replica's pipeline,
/// then the per-stage gradient allreduce.
///
/// `config.stage_map` decides which cut-points form each stage; the
/// schedule's P and N_m must match the config. Throws InputError on any
/// mismatch or when the profile lacks a needed grid point.
SimulationResult simulate_minibatch(const Schedule& schedule, const ParallelConfig& config,
                                    const ModelSpec& model, const CalibrationProfile& profile,
                                    const Placement& placement, const SimOptions& options = {});

/// Busy-time lower bound max over stages of N_m * (F + B) + recompute, and
/// the fill/drain bound sum over stages of (F + B) plus one allreduce.
Duration makespan_lower_bound(const Schedule& schedule, const ParallelConfig& config, const ModelSpec& model,
                              const CalibrationProfile& profile, const Placement& placement);

/// Gantt chart of one replica: one row per stage, forward red, backward
/// green, recompute orange, allreduce purple.
void write_gantt_svg(const SimulationResult& result, std::ostream& out, int replica = 0);
/// `stage,kind,microbatch,start_us,end_us` rows for one replica.
void write_gantt_csv(const SimulationResult& result, std::ostream& out, int replica = 0);

}  // namespace pipeplan
