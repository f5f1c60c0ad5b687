// Copyright 2026 The pipeplan Authors
// SPDX-License-Identifier: Apache-2.0

#include "pipeplan/scheduler.hpp"

#include <algorithm>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

#include <fmt/core.h>

namespace pipeplan {
namespace {

constexpr Duration kUnknown{std::numeric_limits<Duration::rep>::max()};

Duration duration_of(const UniformTimes& t, TaskKind kind) {
  switch (kind) {
    case TaskKind::Forward: return t.forward;
    case TaskKind::Backward: return t.backward;
    case TaskKind::Recompute: return t.recompute;
  }
  return Duration{0};
}

void check_times(int stages, int micro_batches, const UniformTimes& times) {
  if (stages < 1) throw InputError("schedule: P must be >= 1");
  if (micro_batches < 1) throw InputError("schedule: N_m must be >= 1");
  if (times.forward.count() <= 0 || times.backward.count() <= 0 || times.recompute.count() <= 0)
    throw InputError("schedule: task times must be positive");
}

// Per-(stage, micro-batch) table of times, 0-based in both dimensions.
class Table {
 public:
  Table(int stages, int micro_batches)
      : n_(static_cast<size_t>(micro_batches)),
        data_(static_cast<size_t>(stages) * n_, kUnknown) {}
  Duration& at(int stage, int mb) { return data_[static_cast<size_t>(stage) * n_ + static_cast<size_t>(mb)]; }
  Duration at(int stage, int mb) const {
    return data_[static_cast<size_t>(stage) * n_ + static_cast<size_t>(mb)];
  }

 private:
  size_t n_;
  std::vector<Duration> data_;
};

}  // namespace

char to_char(TaskKind kind) {
  switch (kind) {
    case TaskKind::Forward: return 'F';
    case TaskKind::Backward: return 'B';
    case TaskKind::Recompute: return 'R';
  }
  return '?';
}

const char* to_string(SchedulePolicy p) { return p == SchedulePolicy::Varuna ? "varuna" : "gpipe"; }

SchedulePolicy parse_policy(const std::string& name) {
  if (name == "varuna") return SchedulePolicy::Varuna;
  if (name == "gpipe") return SchedulePolicy::GPipe;
  throw InputError(fmt::format("unknown schedule policy '{}' (expected varuna or gpipe)", name));
}

bool Schedule::has_recompute(int stage, int mb) const {
  const auto& tasks = stage_tasks(stage);
  return std::any_of(tasks.begin(), tasks.end(), [&](const Task& t) {
    return t.kind == TaskKind::Recompute && t.micro_batch == mb;
  });
}

Schedule generate_varuna_schedule(int stages, int micro_batches, const UniformTimes& times) {
  check_times(stages, micro_batches, times);
  const int P = stages;
  const int N = micro_batches;
  Schedule s{SchedulePolicy::Varuna, P, N, times, std::vector<std::vector<Task>>(static_cast<size_t>(P))};

  Table fwd_done(P, N);
  Table bwd_start(P, N);
  Table bwd_done(P, N);
  std::vector<Duration> busy_until(static_cast<size_t>(P), Duration{0});
  std::vector<int> next_fwd(static_cast<size_t>(P), 0);
  std::vector<int> next_bwd(static_cast<size_t>(P), 0);
  std::vector<bool> recomputed(static_cast<size_t>(P), false);

  auto start = [&](int k, TaskKind kind, int mb, Duration now) {
    const auto ks = static_cast<size_t>(k);
    s.per_stage[ks].push_back(Task{kind, mb + 1, k + 1});
    const Duration end = now + duration_of(times, kind);
    busy_until[ks] = end;
    switch (kind) {
      case TaskKind::Forward:
        fwd_done.at(k, mb) = end;
        ++next_fwd[ks];
        break;
      case TaskKind::Recompute:
        recomputed[ks] = true;
        break;
      case TaskKind::Backward:
        bwd_start.at(k, mb) = now;
        bwd_done.at(k, mb) = end;
        ++next_bwd[ks];
        recomputed[ks] = false;
        break;
    }
  };

  Duration now{0};
  while (true) {
    bool progressed = true;
    while (progressed) {
      progressed = false;
      for (int k = 0; k < P; ++k) {
        const auto ks = static_cast<size_t>(k);
        if (busy_until[ks] > now) continue;
        const int j = next_bwd[ks];
        if (j >= N) continue;
        const bool last = (k == P - 1);
        const int fj = next_fwd[ks];
        const bool fwd_ready = fj < N && (k == 0 || fwd_done.at(k - 1, fj) <= now);

        if (last) {
          if (fwd_done.at(k, j) <= now) {
            start(k, TaskKind::Backward, j, now);
          } else if (fwd_ready) {
            start(k, TaskKind::Forward, fj, now);
          } else {
            continue;
          }
          progressed = true;
          continue;
        }

        if (recomputed[ks]) {
          // A recompute is followed by its backward and nothing else.
          if (bwd_done.at(k + 1, j) <= now) {
            start(k, TaskKind::Backward, j, now);
            progressed = true;
          }
          continue;
        }
        const bool arrival_known = bwd_start.at(k + 1, j) != kUnknown;
        if (arrival_known && fwd_done.at(k, j) <= now) {
          const Duration deadline = bwd_done.at(k + 1, j) - times.recompute;
          if (fwd_ready && now + times.forward <= deadline) {
            start(k, TaskKind::Forward, fj, now);
          } else {
            start(k, TaskKind::Recompute, j, now);
          }
          progressed = true;
        } else if (fwd_ready) {
          start(k, TaskKind::Forward, fj, now);
          progressed = true;
        }
      }
    }
    bool finished = true;
    Duration next = kUnknown;
    for (int k = 0; k < P; ++k) {
      const auto ks = static_cast<size_t>(k);
      if (next_bwd[ks] < N) finished = false;
      if (busy_until[ks] > now) next = std::min(next, busy_until[ks]);
    }
    if (finished) break;
    if (next == kUnknown) throw std::logic_error("varuna schedule generation stalled");
    now = next;
  }
  return s;
}

Schedule generate_gpipe_schedule(int stages, int micro_batches, const UniformTimes& times) {
  check_times(stages, micro_batches, times);
  Schedule s{SchedulePolicy::GPipe, stages, micro_batches, times, {}};
  for (int k = 1; k <= stages; ++k) {
    std::vector<Task> tasks;
    for (int j = 1; j <= micro_batches; ++j) tasks.push_back({TaskKind::Forward, j, k});
    for (int j = micro_batches; j >= 1; --j) {
      if (!(k == stages && j == micro_batches)) tasks.push_back({TaskKind::Recompute, j, k});
      tasks.push_back({TaskKind::Backward, j, k});
    }
    s.per_stage.push_back(std::move(tasks));
  }
  return s;
}

const TimedTask& ZeroDelayTimeline::find(const Task& t) const {
  for (const auto& tt : per_stage.at(static_cast<size_t>(t.stage - 1)))
    if (tt.task == t) return tt;
  throw std::out_of_range("task not in timeline");
}

void check_structure(const Schedule& s) {
  if (s.stages < 1 || s.micro_batches < 1) throw InputError("schedule: P and N_m must be >= 1");
  if (static_cast<int>(s.per_stage.size()) != s.stages)
    throw InputError(fmt::format("schedule: {} stage lists for P = {}", s.per_stage.size(), s.stages));
  const auto n = static_cast<size_t>(s.micro_batches);
  for (int k = 1; k <= s.stages; ++k) {
    std::vector<int> f(n, 0), b(n, 0), r(n, 0);
    for (const auto& t : s.stage_tasks(k)) {
      if (t.stage != k)
        throw InputError(fmt::format("schedule: task in stage {} list claims stage {}", k, t.stage));
      if (t.micro_batch < 1 || t.micro_batch > s.micro_batches)
        throw InputError(fmt::format("schedule: stage {} has micro-batch {} outside 1..{}", k,
                                     t.micro_batch, s.micro_batches));
      const auto j = static_cast<size_t>(t.micro_batch - 1);
      (t.kind == TaskKind::Forward ? f : t.kind == TaskKind::Backward ? b : r)[j]++;
    }
    for (size_t j = 0; j < n; ++j) {
      if (f[j] != 1 || b[j] != 1 || r[j] > 1)
        throw InputError(fmt::format("schedule: stage {} micro-batch {} needs exactly one forward and "
                                     "one backward and at most one recompute",
                                     k, j + 1));
      if (s.policy == SchedulePolicy::Varuna && k == s.stages && r[j] != 0)
        throw InputError(fmt::format("schedule: last stage recomputes micro-batch {}", j + 1));
    }
  }
  (void)replay_zero_delay(s);
}

ZeroDelayTimeline replay_zero_delay(const Schedule& s) {
  const int P = s.stages;
  const int N = s.micro_batches;
  Table fwd_end(P, N), rec_end(P, N), bwd_end(P, N);
  std::vector<std::vector<bool>> has_r(static_cast<size_t>(P), std::vector<bool>(static_cast<size_t>(N), false));
  for (int k = 0; k < P; ++k)
    for (const auto& t : s.per_stage.at(static_cast<size_t>(k)))
      if (t.kind == TaskKind::Recompute) has_r[static_cast<size_t>(k)][static_cast<size_t>(t.micro_batch - 1)] = true;

  ZeroDelayTimeline tl;
  tl.per_stage.resize(static_cast<size_t>(P));
  std::vector<size_t> pos(static_cast<size_t>(P), 0);
  std::vector<Duration> free_at(static_cast<size_t>(P), Duration{0});

  auto ready_time = [&](int k, const Task& t) -> Duration {
    const int j = t.micro_batch - 1;
    switch (t.kind) {
      case TaskKind::Forward:
        return k == 0 ? Duration{0} : fwd_end.at(k - 1, j);
      case TaskKind::Recompute:
        return fwd_end.at(k, j);
      case TaskKind::Backward: {
        const Duration local = has_r[static_cast<size_t>(k)][static_cast<size_t>(j)] ? rec_end.at(k, j)
                                                                                     : fwd_end.at(k, j);
        if (k == P - 1) return local;
        const Duration grad = bwd_end.at(k + 1, j);
        return (local == kUnknown || grad == kUnknown) ? kUnknown : std::max(local, grad);
      }
    }
    return kUnknown;
  };

  bool progressed = true;
  while (progressed) {
    progressed = false;
    for (int k = 0; k < P; ++k) {
      const auto ks = static_cast<size_t>(k);
      const auto& tasks = s.per_stage[ks];
      while (pos[ks] < tasks.size()) {
        const Task& t = tasks[pos[ks]];
        const Duration ready = ready_time(k, t);
        if (ready == kUnknown) break;
        const Duration begin = std::max(ready, free_at[ks]);
        const Duration end = begin + duration_of(s.times, t.kind);
        const int j = t.micro_batch - 1;
        (t.kind == TaskKind::Forward ? fwd_end : t.kind == TaskKind::Recompute ? rec_end : bwd_end).at(k, j) = end;
        free_at[ks] = end;
        tl.per_stage[ks].push_back(TimedTask{t, begin, end});
        tl.makespan = std::max(tl.makespan, end);
        ++pos[ks];
        progressed = true;
      }
    }
  }
  for (int k = 0; k < P; ++k) {
    if (pos[static_cast<size_t>(k)] != s.per_stage[static_cast<size_t>(k)].size())
      throw InputError(fmt::format("schedule: stage {} deadlocks at position {}", k + 1,
                                   pos[static_cast<size_t>(k)] + 1));
  }
  return tl;
}

std::vector<RuleViolation> validate_schedule(const Schedule& s) {
  check_structure(s);
  const ZeroDelayTimeline tl = replay_zero_delay(s);
  const int P = s.stages;
  std::vector<RuleViolation> out;

  for (int k = 1; k <= P; ++k) {
    const auto& timed = tl.per_stage[static_cast<size_t>(k - 1)];
    for (size_t i = 0; i < timed.size(); ++i) {
      const Task& t = timed[i].task;
      if (t.kind == TaskKind::Recompute) {
        if (i + 1 >= timed.size() || !(timed[i + 1].task == Task{TaskKind::Backward, t.micro_batch, k})) {
          out.push_back({k, t.micro_batch, 2, "recompute is not immediately followed by its backward"});
        }
        if (k < P) {
          const Duration arrival = tl.find({TaskKind::Backward, t.micro_batch, k + 1}).end;
          if (timed[i].end > arrival) {
            out.push_back({k, t.micro_batch, 1,
                           fmt::format("recompute ends at {} after the gradient arrives at {}",
                                       timed[i].end.count(), arrival.count())});
          }
        }
      }
      if (t.kind == TaskKind::Forward) {
        const Duration begin = timed[i].start;
        for (size_t later = i + 1; later < timed.size(); ++later) {
          const Task& b = timed[later].task;
          if (b.kind != TaskKind::Backward) continue;
          const Duration fwd = tl.find({TaskKind::Forward, b.micro_batch, k}).end;
          const Duration grad = k < P ? tl.find({TaskKind::Backward, b.micro_batch, k + 1}).end : fwd;
          if (fwd <= begin && grad <= begin) {
            out.push_back({k, b.micro_batch, 3,
                           fmt::format("forward {} chosen at {} while backward {} was ready", t.micro_batch,
                                       begin.count(), b.micro_batch)});
            break;
          }
        }
      }
    }
  }
  return out;
}

std::vector<int> max_in_flight(const Schedule& s) {
  std::vector<int> out;
  for (const auto& tasks : s.per_stage) {
    int live = 0;
    int peak = 0;
    for (const auto& t : tasks) {
      if (t.kind == TaskKind::Forward) peak = std::max(peak, ++live);
      if (t.kind == TaskKind::Backward) --live;
    }
    out.push_back(peak);
  }
  return out;
}

void write_schedule_csv(const Schedule& s, std::ostream& out) {
  out << "stage,seq,kind,microbatch\n";
  for (int k = 1; k <= s.stages; ++k) {
    int seq = 1;
    for (const auto& t : s.stage_tasks(k)) out << k << ',' << seq++ << ',' << to_char(t.kind) << ',' << t.micro_batch << '\n';
  }
}

Schedule read_schedule_csv(std::istream& in, SchedulePolicy policy, const UniformTimes& times) {
  struct Row {
    int stage, seq;
    Task task;
  };
  std::vector<Row> rows;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "stage,seq,kind,microbatch") continue;
    std::istringstream ls(line);
    std::string f[4];
    for (auto& field : f) {
      if (!std::getline(ls, field, ','))
        throw InputError(fmt::format("schedule csv line {}: expected 4 fields", line_no));
    }
    Row r{};
    try {
      r.stage = std::stoi(f[0]);
      r.seq = std::stoi(f[1]);
      r.task.micro_batch = std::stoi(f[3]);
    } catch (const std::exception&) {
      throw InputError(fmt::format("schedule csv line {}: malformed number", line_no));
    }
    if (f[2] == "F") r.task.kind = TaskKind::Forward;
    else if (f[2] == "B") r.task.kind = TaskKind::Backward;
    else if (f[2] == "R") r.task.kind = TaskKind::Recompute;
    else throw InputError(fmt::format("schedule csv line {}: unknown kind '{}'", line_no, f[2]));
    r.task.stage = r.stage;
    rows.push_back(r);
  }
  int stages = 0;
  int micro_batches = 0;
  for (const auto& r : rows) {
    stages = std::max(stages, r.stage);
    micro_batches = std::max(micro_batches, r.task.micro_batch);
  }
  if (stages < 1) throw InputError("schedule csv: no tasks");
  Schedule s{policy, stages, micro_batches, times, std::vector<std::vector<Task>>(static_cast<size_t>(stages))};
  std::stable_sort(rows.begin(), rows.end(),
                   [](const Row& a, const Row& b) { return std::tie(a.stage, a.seq) < std::tie(b.stage, b.seq); });
  for (const auto& r : rows) {
    if (r.stage < 1) throw InputError("schedule csv: stage must be >= 1");
    s.per_stage[static_cast<size_t>(r.stage - 1)].push_back(r.task);
  }
  check_structure(s);
  return s;
}

}  // namespace pipeplan
