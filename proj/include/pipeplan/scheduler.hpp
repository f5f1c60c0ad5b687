// Copyright 2026 The pipeplan Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "pipeplan/core.hpp"

namespace pipeplan {

/// Declaration order is the simulator's tie-break order.
enum class TaskKind : std::uint8_t { Backward, Recompute, Forward };

char to_char(TaskKind kind);

struct Task {
  TaskKind kind = TaskKind::Forward;
  int micro_batch = 1;  // 1..N_m
  int stage = 1;        // 1..P

  friend bool operator==(const Task&, const Task&) = default;
};

enum class SchedulePolicy { Varuna, GPipe };

const char* to_string(SchedulePolicy p);
SchedulePolicy parse_policy(const std::string& name);

/// Per-task durations when all stages are identical.
struct UniformTimes {
  Duration forward{1};
  Duration backward{2};
  Duration recompute{1};
};

/// Per-stage ordered task lists. Schedules carry no timestamps: the same
/// order is replayed by the simulator under any network conditions.
struct Schedule {
  SchedulePolicy policy = SchedulePolicy::Varuna;
  int stages = 1;
  int micro_batches = 1;
  UniformTimes times;
  std::vector<std::vector<Task>> per_stage;

  const std::vector<Task>& stage_tasks(int stage) const {
    return per_stage.at(static_cast<size_t>(stage - 1));
  }
  /// True when stage `stage` recomputes micro-batch `mb` before its backward.
  bool has_recompute(int stage, int mb) const;
};

/// The rule-based static schedule: backward preferred over forward; the
/// recompute for micro-batch j at stage k is placed so that it completes
/// no later than the gradient from stage k+1 arrives, and forwards fill the
/// slack before that deadline; a completed recompute is followed directly by
/// its backward; the last stage never recomputes. Among several ready
/// forwards the lowest micro-batch runs first.
Schedule generate_varuna_schedule(int stages, int micro_batches, const UniformTimes& times = {});

/// All forwards first, then recompute + backward in reverse micro-batch
/// order. The last stage skips the recompute of the final micro-batch only.
Schedule generate_gpipe_schedule(int stages, int micro_batches, const UniformTimes& times = {});

struct TimedTask {
  Task task;
  Duration start{0};
  Duration end{0};
};

/// Execution of a schedule under the uniform time model with zero network
/// delay: every task starts as soon as its stage is free and its inputs
/// exist, in list order.
struct ZeroDelayTimeline {
  std::vector<std::vector<TimedTask>> per_stage;
  Duration makespan{0};

  const TimedTask& find(const Task& t) const;
};

/// Throws InputError when the schedule is structurally broken (missing
/// tasks, or an order that deadlocks).
ZeroDelayTimeline replay_zero_delay(const Schedule& schedule);

/// Checks per-stage task counts and that every dependency can be met.
void check_structure(const Schedule& schedule);

struct RuleViolation {
  int stage = 0;
  int micro_batch = 0;
  int rule = 0;  // 1, 2 or 3
  std::string detail;
};

/// Reports every instance of a violated scheduling rule, judged on the
/// zero-delay replay of the schedule.
std::vector<RuleViolation> validate_schedule(const Schedule& schedule);

/// Largest number of micro-batches whose forward has run but whose backward
/// has not, per stage, in list order.
std::vector<int> max_in_flight(const Schedule& schedule);

/// `stage,seq,kind,microbatch` lines, one per task, preceded by a header.
void write_schedule_csv(const Schedule& schedule, std::ostream& out);
/// Inverse of write_schedule_csv. Policy and times are not part of the CSV
/// and are taken from the arguments.
Schedule read_schedule_csv(std::istream& in, SchedulePolicy policy, const UniformTimes& times = {});

}  // namespace pipeplan
