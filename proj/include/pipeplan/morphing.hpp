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
#include "pipeplan/planner.hpp"

namespace pipeplan {

enum class TraceKind {
  Add,
  Remove,
  /// The VM keeps running but its GPUs slow down by `slowdown`.
  Slow,
  /// Clears a slowdown and any fail-stutter flag of the VM.
  Recover,
};

const char* to_string(TraceKind kind);

struct TraceEvent {
  Duration time{0};
  TraceKind kind = TraceKind::Add;
  std::string vm_id;
  int gpus = 1;          // add only
  std::string node_id;   // add only
  double slowdown = 1;   // slow only
};

/// VM availability over time. Events at equal times apply in file order.
struct PreemptionTrace {
  std::vector<TraceEvent> events;

  /// Checks ordering and presence rules against `initial`; throws
  /// InputError naming the first bad event.
  void validate(const ClusterState& initial) const;
};

/// Line format `time_s kind vm_id gpus node_id`; `#` starts a comment. For
/// `slow` the fourth column is the slowdown factor and the node may be
/// omitted, `remove` and `recover` need only the VM.
PreemptionTrace parse_trace(std::istream& in, const std::string& source = "trace");
PreemptionTrace load_trace(const std::filesystem::path& path);
void write_trace(const PreemptionTrace& trace, std::ostream& out);

struct Heartbeat {
  std::string vm_id;
  int stage = 1;
  Duration forward{0};
  Duration backward{0};
};

/// VMs whose forward + backward time exceeds `outlier_factor` times the
/// median of their stage's replicas. Stages with fewer than three
/// heartbeats have no meaningful median and are skipped.
std::set<std::string> detect_fail_stutter(const std::vector<Heartbeat>& heartbeats, double outlier_factor = 1.25);

struct StorageSpec {
  double write_bandwidth = 1e9;  // local SSD, bytes/s
  double read_bandwidth = 1e9;   // restore path, bytes/s
};

struct CheckpointCost {
  /// Foreground time of one checkpoint: every replica writes 1/D of its
  /// stage state, all stages in parallel.
  Duration per_checkpoint{0};
  Bytes bytes_per_replica = 0;  // largest stage shard
  /// Share of wall time spent checkpointing at the given interval.
  double overhead_fraction = 0;
};

CheckpointCost checkpoint_cost(const ParallelConfig& config, const ModelSpec& model, int interval,
                               const StorageSpec& storage, Duration minibatch_time,
                               int bytes_per_param_state = 16);

/// Time to load every stage's full state after a restart.
Duration restore_cost(const ParallelConfig& config, const ModelSpec& model, const StorageSpec& storage,
                      int bytes_per_param_state = 16);

struct MorphingOptions {
  Duration heartbeat_period = from_seconds(10);
  /// A VM is declared lost after this many silent heartbeat periods.
  double heartbeat_timeout_factor = 3.0;
  double outlier_factor = 1.25;
  /// Unvalidated defaults: process restart and per-simulation planner cost.
  Duration restart_overhead = from_seconds(60);
  Duration planner_seconds_per_simulation = from_seconds(0.5);
  StorageSpec storage;
  /// Stop the replay here even if the job has not finished; zero means run
  /// until target_iterations mini-batches are committed.
  Duration horizon{0};

  Duration heartbeat_timeout() const;
};

struct Segment {
  Duration start{0};
  Duration end{0};
  ParallelConfig config;
  int gpus = 0;  // G available while the segment ran
  Duration minibatch_time{0};
  Duration checkpoint_time{0};
  double examples_per_second = 0;
  double examples_per_second_per_gpu = 0;
  /// Mini-batches completed and covered by a checkpoint.
  std::int64_t iterations = 0;
  std::int64_t checkpoints = 0;
  /// VMs hosting a task during the segment.
  std::set<std::string> placed_vms;
};

enum class DowntimeKind {
  Reconfigure,  // new configuration
  PassThrough,  // restart with an unchanged configuration
  Paused,       // no feasible configuration
};

const char* to_string(DowntimeKind kind);

struct Downtime {
  DowntimeKind kind = DowntimeKind::Reconfigure;
  Duration start{0};
  Duration end{0};
  std::string cause;  // triggering event, e.g. "remove vm7"
  /// Breakdown; the terms sum to end - start except for Paused.
  Duration lost_work{0};
  Duration detection{0};
  Duration restart{0};
  Duration planning{0};
  Duration restore{0};
  double lost_minibatches = 0;
  int stages = 0;  // configuration resumed with, 0 while paused
  int replicas = 0;
};

struct FlagChange {
  Duration time{0};
  std::string vm_id;
  bool flagged = true;  // false: recovered or removed
};

struct MorphTimeline {
  std::int64_t minibatch_size = 0;
  std::vector<Segment> segments;
  std::vector<Downtime> downtimes;
  /// Lost mini-batches of every preemption of a placed VM.
  std::vector<double> lost_work;
  /// Planner decisions that kept the running configuration without a
  /// restart.
  std::vector<Duration> pass_through_events;
  std::set<std::string> ever_flagged;
  std::vector<FlagChange> flag_changes;
  int micro_batch_size = 0;
  bool completed = false;
  Duration end{0};

  std::int64_t iterations() const;
  std::int64_t examples() const { return iterations() * minibatch_size; }
};

/// Replays `trace` against the job starting on `initial`: plans for every
/// change of the usable GPU count, models detection, checkpoint, lost work
/// and restart costs, and excludes fail-stutter VMs. Deterministic for a
/// given `planner.simulation.seed`.
MorphTimeline replay(const PreemptionTrace& trace, const ClusterState& initial, const ModelSpec& model,
                     const JobSpec& job, const CalibrationProfile& profile, const HardwareSpec& hw,
                     const PlannerOptions& planner = {}, const MorphingOptions& options = {});

/// `start,end,P,D,ex_per_s,ex_per_s_per_gpu,event` rows in time order,
/// times in seconds.
void write_timeline_csv(const MorphTimeline& timeline, std::ostream& out);
/// Throughput (examples/s) and per-GPU throughput over time, each morphing
/// event labelled with its configuration, or `p` for pass-through.
void write_timeline_svg(const MorphTimeline& timeline, std::ostream& out);

}  // namespace pipeplan
