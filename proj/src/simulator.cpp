// Copyright 2026 The pipeplan Authors
// SPDX-License-Identifier: Apache-2.0

#include "pipeplan/simulator.hpp"

#include <algorithm>
#include <limits>
#include <map>
#include <ostream>
#include <optional>
#include <queue>
#include <set>

#include <fmt/core.h>
#include <fmt/ostream.h>

#include "pipeplan/partitioner.hpp"
#include "pipeplan/rng.hpp"

namespace pipeplan {

Placement::Placement(int stages, int replicas, std::vector<GpuSlot> slots)
    : stages_(stages), replicas_(replicas), slots_(std::move(slots)) {
  if (stages < 1 || replicas < 1) throw InputError("placement: P and D must be >= 1");
  if (static_cast<int>(slots_.size()) != stages * replicas)
    throw InputError(fmt::format("placement: {} slots for P*D = {}", slots_.size(), stages * replicas));
  for (const auto& s : slots_) {
    if (!(s.compute_scale > 0)) throw InputError("placement: compute_scale must be positive");
  }
  for (size_t i = 0; i < slots_.size(); ++i) {
    for (size_t j = i + 1; j < slots_.size(); ++j) {
      if (slots_[i].vm_id == slots_[j].vm_id && slots_[i].gpu_index == slots_[j].gpu_index)
        throw InputError(fmt::format("placement: GPU {}:{} assigned twice", slots_[i].vm_id, slots_[i].gpu_index));
    }
  }
}

Placement Placement::packed(const ClusterState& cluster, int stages, int replicas,
                            const std::set<std::string>& excluded) {
  std::vector<GpuSlot> gpus;
  for (const auto& vm : cluster.vms()) {
    if (excluded.count(vm.id)) continue;
    for (int g = 0; g < vm.gpus; ++g) gpus.push_back(GpuSlot{vm.id, g, vm.node, 1.0});
  }
  const auto needed = static_cast<size_t>(stages) * static_cast<size_t>(replicas);
  if (gpus.size() < needed) {
    throw InfeasibleError(
        fmt::format("placement needs {} GPUs but only {} usable GPUs are available", needed, gpus.size()));
  }
  gpus.resize(needed);
  return Placement(stages, replicas, std::move(gpus));
}

const GpuSlot& Placement::slot(int stage, int replica) const {
  return slots_.at(static_cast<size_t>(replica * stages_ + stage));
}

GpuSlot& Placement::slot(int stage, int replica) {
  return slots_.at(static_cast<size_t>(replica * stages_ + stage));
}

bool Placement::inter_node(int sa, int ra, int sb, int rb) const {
  return slot(sa, ra).node_id != slot(sb, rb).node_id;
}

char to_char(GanttKind kind) {
  switch (kind) {
    case GanttKind::Forward: return 'F';
    case GanttKind::Backward: return 'B';
    case GanttKind::Recompute: return 'R';
    case GanttKind::AllReduce: return 'A';
  }
  return '?';
}

size_t SimulationResult::entry_count() const {
  size_t n = 0;
  for (const auto& stage : gantt)
    for (const auto& rows : stage) n += rows.size();
  return n;
}

namespace {

constexpr Duration kNever{std::numeric_limits<Duration::rep>::max()};

Duration scaled(Duration d, double factor) {
  if (factor == 1.0) return d;
  return Duration{std::llround(static_cast<double>(d.count()) * factor)};
}

GanttKind gantt_kind(TaskKind k) {
  switch (k) {
    case TaskKind::Forward: return GanttKind::Forward;
    case TaskKind::Backward: return GanttKind::Backward;
    case TaskKind::Recompute: return GanttKind::Recompute;
  }
  return GanttKind::Forward;
}

const char* task_name(TaskKind k) {
  switch (k) {
    case TaskKind::Forward: return "forward";
    case TaskKind::Backward: return "backward";
    case TaskKind::Recompute: return "recompute";
  }
  return "?";
}

struct StageCosts {
  Duration forward{0};
  Duration backward{0};
  Duration allreduce{0};
  int last_cutpoint = 0;
};

std::vector<StageCosts> stage_costs(const Schedule& schedule, const ParallelConfig& config,
                                    const ModelSpec& model, const CalibrationProfile& profile) {
  if (schedule.stages != config.stages || schedule.micro_batches != config.micro_batches) {
    throw InputError(fmt::format("schedule is {}x{} (P x N_m) but the config is {}x{}", schedule.stages,
                                 schedule.micro_batches, config.stages, config.micro_batches));
  }
  if (config.replicas < 1) throw InputError("config: D must be >= 1");
  check_structure(schedule);
  const auto a = assignment_from_map(model, config.stage_map, config.micro_batch_size, profile);
  if (a.stages() != config.stages)
    throw InputError(fmt::format("stage_map defines {} stages but P = {}", a.stages(), config.stages));
  std::vector<StageCosts> out;
  for (int s = 0; s < a.stages(); ++s) {
    StageCosts c;
    c.forward = a.stage_forward[static_cast<size_t>(s)];
    c.backward = a.stage_backward[static_cast<size_t>(s)];
    c.last_cutpoint = a.ranges[static_cast<size_t>(s)].second;
    for (int i = a.ranges[static_cast<size_t>(s)].first; i <= c.last_cutpoint; ++i)
      c.allreduce += profile.allreduce(i, config.replicas);
    out.push_back(c);
  }
  return out;
}

class Engine {
 public:
  Engine(const Schedule& schedule, const ParallelConfig& config, const ModelSpec& model,
         const CalibrationProfile& profile, const Placement& placement, const SimOptions& options)
      : schedule_(schedule),
        config_(config),
        profile_(profile),
        placement_(placement),
        options_(options),
        P_(config.stages),
        D_(config.replicas),
        N_(config.micro_batches),
        costs_(stage_costs(schedule, config, model, profile)) {
    if (placement.stages() != P_ || placement.replicas() != D_) {
      throw InputError(fmt::format("placement is {}x{} but the config is {}x{}", placement.stages(),
                                   placement.replicas(), P_, D_));
    }
    const auto a = assignment_from_map(model, config.stage_map, config.micro_batch_size, profile);
    input_activation_ = a.input_activation;
    working_activation_ = a.working_activation;

    for (int s = 0; s < P_; ++s) {
      for (int r = 0; r < D_; ++r) workers_.push_back(make_worker(s, r));
    }
    for (size_t i = 0; i < workers_.size(); ++i) dirty_.push_back(i);
    result_.stages = P_;
    result_.replicas = D_;
    result_.micro_batches = N_;
    result_.seed = options.seed;
    result_.gantt.assign(static_cast<size_t>(P_), std::vector<std::vector<GanttEntry>>(static_cast<size_t>(D_)));
    stage_done_.assign(static_cast<size_t>(P_), 0);
    stage_last_backward_.assign(static_cast<size_t>(P_), Duration{0});
  }

  SimulationResult run() {
    Duration now{0};
    dispatch_all(now);
    while (!queue_.empty()) {
      now = queue_.top().time;
      while (!queue_.empty() && queue_.top().time == now) {
        const Event e = queue_.top();
        queue_.pop();
        handle(e);
      }
      dispatch_all(now);
    }
    for (const auto& w : workers_) {
      if (w.backwards_done != N_) {
        throw InputError(fmt::format("schedule deadlocks in simulation at stage {} replica {}", w.stage + 1,
                                     w.replica));
      }
    }
    finish();
    return std::move(result_);
  }

 private:
  enum class EventType { TaskEnd, Arrive, AllReduceEnd };

  struct Event {
    Duration time;
    int stage;
    int order;  // Backward < Recompute < Forward; arrivals sort with their consumer task
    int micro_batch;
    int replica;
    std::uint64_t seq;
    EventType type;
    TaskKind kind;
    bool gradient;

    bool operator>(const Event& o) const {
      return std::tie(time, stage, order, micro_batch, replica, seq) >
             std::tie(o.time, o.stage, o.order, o.micro_batch, o.replica, o.seq);
    }
  };

  struct Worker {
    int stage = 0;
    int replica = 0;
    const std::vector<Task>* list = nullptr;
    std::vector<bool> done;  // by list position
    size_t head = 0;         // first position not yet started
    std::vector<int> fpos, bpos, rpos;  // list position by micro-batch; rpos -1 when absent
    std::set<int> arrived;     // forward positions whose input is here
    std::set<int> grad_ready;  // backward positions whose gradient is here
    std::vector<Duration> act_eta, grad_eta;  // arrival time once a message is sent
    std::vector<Duration> fwd_end, rec_end;
    std::vector<bool> holds_working_set;
    bool busy = false;
    bool dirty = true;
    int pinned = -1;  // micro-batch whose backward must run next (after its recompute)
    int backwards_done = 0;
    Duration busy_time{0};
    int in_flight = 0, peak_in_flight = 0;
    int working_sets = 0, peak_working_sets = 0;
  };

  Worker make_worker(int s, int r) const {
    Worker w;
    w.stage = s;
    w.replica = r;
    w.list = &schedule_.per_stage[static_cast<size_t>(s)];
    const auto n = static_cast<size_t>(N_);
    w.done.assign(w.list->size(), false);
    w.fpos.assign(n, -1);
    w.bpos.assign(n, -1);
    w.rpos.assign(n, -1);
    for (int i = 0; i < static_cast<int>(w.list->size()); ++i) {
      const Task& t = (*w.list)[static_cast<size_t>(i)];
      const auto j = static_cast<size_t>(t.micro_batch - 1);
      (t.kind == TaskKind::Forward ? w.fpos : t.kind == TaskKind::Backward ? w.bpos : w.rpos)[j] = i;
    }
    if (s == 0) w.arrived.insert(w.fpos.begin(), w.fpos.end());
    w.act_eta.assign(n, kNever);
    w.grad_eta.assign(n, kNever);
    w.fwd_end.assign(n, kNever);
    w.rec_end.assign(n, kNever);
    w.holds_working_set.assign(n, false);
    return w;
  }

  Worker& worker(int s, int r) { return workers_[static_cast<size_t>(s * D_ + r)]; }

  void mark_dirty(Worker& w) {
    if (w.dirty) return;
    w.dirty = true;
    dirty_.push_back(static_cast<size_t>(w.stage * D_ + w.replica));
  }

  void log(Duration t, int s, int r, const char* event, const std::string& detail) {
    if (options_.event_log == nullptr) return;
    fmt::print(*options_.event_log, "{},{},{},{},{}\n", t.count(), s + 1, r, event, detail);
  }

  void push(Event e) {
    e.seq = seq_++;
    queue_.push(e);
  }

  Duration duration(const Worker& w, TaskKind k) const {
    const auto& c = costs_[static_cast<size_t>(w.stage)];
    const Duration base = k == TaskKind::Backward ? c.backward : c.forward;
    return scaled(base, placement_.slot(w.stage, w.replica).compute_scale);
  }

  struct Choice {
    TaskKind kind;
    int mb;  // 0-based
  };

  Choice at(const Worker& w, int pos) const {
    const Task& t = (*w.list)[static_cast<size_t>(pos)];
    return Choice{t.kind, t.micro_batch - 1};
  }

  bool ready(const Worker& w, const Choice& c, Duration t) const {
    const auto j = static_cast<size_t>(c.mb);
    switch (c.kind) {
      case TaskKind::Forward:
        return w.arrived.count(w.fpos[j]) > 0;
      case TaskKind::Recompute:
        return w.fwd_end[j] <= t;
      case TaskKind::Backward: {
        const Duration local = w.rpos[j] >= 0 ? w.rec_end[j] : w.fwd_end[j];
        return local <= t && w.grad_ready.count(w.bpos[j]) > 0;
      }
    }
    return false;
  }

  std::optional<Choice> choose(const Worker& w, Duration t) const {
    if (w.head >= w.list->size()) return std::nullopt;
    if (w.pinned >= 0) {
      const Choice b{TaskKind::Backward, w.pinned};
      if (ready(w, b, t)) return b;
      return std::nullopt;
    }
    const Choice head = at(w, static_cast<int>(w.head));
    if (!options_.opportunistic) {
      if (ready(w, head, t)) return head;
      return std::nullopt;
    }
    if (ready(w, head, t)) return head;
    // The scheduled task is still waiting for a message. Other ready work
    // (backward first, with its recompute when pending) may run if it is
    // done before that message is due; with no message on its way yet the
    // stage keeps to the static order.
    const auto hj = static_cast<size_t>(head.mb);
    const Duration due = head.kind == TaskKind::Forward ? w.act_eta[hj] : w.grad_eta[hj];
    if (due == kNever) return std::nullopt;
    const auto fits = [&](Duration d) { return t + d <= due; };
    for (int pos : w.grad_ready) {
      const Choice b = at(w, pos);
      const auto j = static_cast<size_t>(b.mb);
      if (w.rpos[j] >= 0 && w.rec_end[j] == kNever) {
        if (fits(duration(w, TaskKind::Recompute) + duration(w, TaskKind::Backward)))
          return Choice{TaskKind::Recompute, b.mb};
      } else if (ready(w, b, t) && fits(duration(w, TaskKind::Backward))) {
        return b;
      }
    }
    // A forward that keeps its activations (no recompute later) must leave
    // room for the head's own set: two live sets at most.
    if (!w.arrived.empty() && fits(duration(w, TaskKind::Forward))) {
      const Choice f = at(w, *w.arrived.begin());
      if (w.rpos[static_cast<size_t>(f.mb)] >= 0 || w.working_sets == 0) return f;
    }
    return std::nullopt;
  }

  // Visits dirty workers in index order; busy ones stay dirty for later.
  void dispatch_all(Duration t) {
    std::sort(dirty_.begin(), dirty_.end());
    size_t kept = 0;
    for (size_t i : dirty_) {
      Worker& w = workers_[i];
      if (w.busy) {
        dirty_[kept++] = i;
        continue;
      }
      w.dirty = false;
      const auto c = choose(w, t);
      if (c) start(w, *c, t);
    }
    dirty_.resize(kept);
  }

  void start(Worker& w, const Choice& c, Duration t) {
    const auto j = static_cast<size_t>(c.mb);
    const Duration d = duration(w, c.kind);
    w.busy = true;
    w.busy_time += d;
    int pos = 0;
    switch (c.kind) {
      case TaskKind::Forward:
        pos = w.fpos[j];
        w.arrived.erase(pos);
        w.peak_in_flight = std::max(w.peak_in_flight, ++w.in_flight);
        ++w.working_sets;
        w.holds_working_set[j] = true;
        break;
      case TaskKind::Recompute:
        pos = w.rpos[j];
        ++w.working_sets;
        w.holds_working_set[j] = true;
        break;
      case TaskKind::Backward:
        pos = w.bpos[j];
        w.grad_ready.erase(pos);
        break;
    }
    w.done[static_cast<size_t>(pos)] = true;
    while (w.head < w.done.size() && w.done[w.head]) ++w.head;
    w.peak_working_sets = std::max(w.peak_working_sets, w.working_sets);
    result_.gantt[static_cast<size_t>(w.stage)][static_cast<size_t>(w.replica)].push_back(
        GanttEntry{gantt_kind(c.kind), c.mb + 1, t, t + d});
    log(t, w.stage, w.replica, "start", fmt::format("{} {}", task_name(c.kind), c.mb + 1));
    push(Event{t + d, w.stage, static_cast<int>(c.kind), c.mb, w.replica, 0, EventType::TaskEnd, c.kind, false});
  }

  void send(const Worker& from, int j, bool gradient, Duration t) {
    const int to = gradient ? from.stage - 1 : from.stage + 1;
    const int boundary = costs_[static_cast<size_t>(std::min(from.stage, to))].last_cutpoint;
    const bool inter = placement_.inter_node(from.stage, from.replica, to, from.replica);
    const TransferTime& tt = gradient ? profile_.gradient_transfer(boundary, config_.micro_batch_size, inter)
                                      : profile_.activation_transfer(boundary, config_.micro_batch_size, inter);
    Duration latency = tt.mean - tt.wire;
    if (tt.stddev.count() > 0) {
      const double z = standard_normal(options_.seed, {static_cast<std::uint64_t>(from.stage),
                                                       static_cast<std::uint64_t>(from.replica),
                                                       static_cast<std::uint64_t>(j), gradient ? 1ULL : 0ULL});
      const double sample = static_cast<double>(latency.count()) + z * static_cast<double>(tt.stddev.count());
      latency = Duration{std::max<std::int64_t>(0, std::llround(sample))};
    }
    Duration wire_start = t;
    if (options_.link_serialization) {
      Duration& free_at = link_free_[{from.stage, from.replica, gradient}];
      wire_start = std::max(t, free_at);
      free_at = wire_start + tt.wire;
    }
    const Duration arrive = wire_start + tt.wire + latency;
    Worker& dst = worker(to, from.replica);
    (gradient ? dst.grad_eta : dst.act_eta)[static_cast<size_t>(j)] = arrive;
    mark_dirty(dst);
    result_.messages.push_back(Message{gradient, j + 1, from.stage + 1, to + 1, from.replica, t, wire_start, arrive});
    log(t, from.stage, from.replica, "send",
        fmt::format("{} {} to stage {} arrives {}", gradient ? "gradient" : "activation", j + 1, to + 1,
                    arrive.count()));
    push(Event{arrive, to, gradient ? static_cast<int>(TaskKind::Backward) : static_cast<int>(TaskKind::Forward), j,
               from.replica, 0, EventType::Arrive, TaskKind::Forward, gradient});
  }

  void handle(const Event& e) {
    if (e.type == EventType::AllReduceEnd) {
      log(e.time, e.stage, e.replica, "allreduce_end", "");
      return;
    }
    Worker& w = worker(e.stage, e.replica);
    mark_dirty(w);
    const auto j = static_cast<size_t>(e.micro_batch);
    if (e.type == EventType::Arrive) {
      if (e.gradient) w.grad_ready.insert(w.bpos[j]);
      else w.arrived.insert(w.fpos[j]);
      log(e.time, w.stage, w.replica, "arrive", fmt::format("{} {}", e.gradient ? "gradient" : "activation", j + 1));
      return;
    }
    w.busy = false;
    log(e.time, w.stage, w.replica, "end", fmt::format("{} {}", task_name(e.kind), j + 1));
    switch (e.kind) {
      case TaskKind::Forward:
        w.fwd_end[j] = e.time;
        if (w.rpos[j] >= 0) {
          --w.working_sets;
          w.holds_working_set[j] = false;
        }
        if (w.stage + 1 < P_) send(w, e.micro_batch, false, e.time);
        else {
          w.grad_ready.insert(w.bpos[j]);
          w.grad_eta[j] = e.time;
        }
        break;
      case TaskKind::Recompute:
        w.rec_end[j] = e.time;
        w.pinned = e.micro_batch;
        break;
      case TaskKind::Backward:
        w.pinned = -1;
        --w.in_flight;
        if (w.holds_working_set[j]) {
          --w.working_sets;
          w.holds_working_set[j] = false;
        }
        if (w.stage > 0) send(w, e.micro_batch, true, e.time);
        if (++w.backwards_done == N_) stage_finished(w.stage, e.time);
        break;
    }
  }

  void stage_finished(int s, Duration t) {
    auto& last = stage_last_backward_[static_cast<size_t>(s)];
    last = std::max(last, t);
    if (++stage_done_[static_cast<size_t>(s)] < D_) return;
    if (options_.allreduce_barrier) {
      if (++stages_complete_ < P_) return;
      for (int k = 0; k < P_; ++k) start_allreduce(k, t);
    } else {
      start_allreduce(s, t);
    }
  }

  void start_allreduce(int s, Duration t) {
    const Duration d = costs_[static_cast<size_t>(s)].allreduce;
    for (int r = 0; r < D_; ++r) {
      result_.gantt[static_cast<size_t>(s)][static_cast<size_t>(r)].push_back(
          GanttEntry{GanttKind::AllReduce, 0, t, t + d});
      log(t, s, r, "allreduce_start", fmt::format("{}", d.count()));
    }
    allreduce_end_ = std::max(allreduce_end_, t + d);
    push(Event{t + d, s, 0, 0, 0, 0, EventType::AllReduceEnd, TaskKind::Backward, false});
  }

  void finish() {
    Duration pipeline{0};
    for (auto t : stage_last_backward_) pipeline = std::max(pipeline, t);
    result_.pipeline_time = pipeline;
    result_.minibatch_time = std::max(pipeline, allreduce_end_) + options_.fixed_overhead;
    for (const auto& c : costs_) result_.allreduce.push_back(c.allreduce);

    double idle_total = 0;
    result_.stage_idle.assign(static_cast<size_t>(P_), Duration{0});
    result_.peak_in_flight.assign(static_cast<size_t>(P_), 0);
    result_.peak_working_sets.assign(static_cast<size_t>(P_), 0);
    for (int s = 0; s < P_; ++s) {
      const auto ss = static_cast<size_t>(s);
      std::int64_t idle = 0;
      for (int r = 0; r < D_; ++r) {
        const Worker& w = worker(s, r);
        idle += (pipeline - w.busy_time).count();
        result_.peak_in_flight[ss] = std::max(result_.peak_in_flight[ss], w.peak_in_flight);
        result_.peak_working_sets[ss] = std::max(result_.peak_working_sets[ss], w.peak_working_sets);
      }
      idle_total += static_cast<double>(idle);
      result_.stage_idle[ss] = Duration{idle / D_};
      const Bytes m = config_.micro_batch_size;
      result_.peak_activation_bytes.push_back(result_.peak_in_flight[ss] * m * input_activation_[ss] +
                                              result_.peak_working_sets[ss] * m * working_activation_[ss]);
    }
    const double capacity = static_cast<double>(pipeline.count()) * P_ * D_;
    result_.bubble_fraction = capacity > 0 ? idle_total / capacity : 0.0;
  }

  const Schedule& schedule_;
  const ParallelConfig& config_;
  const CalibrationProfile& profile_;
  const Placement& placement_;
  const SimOptions& options_;
  int P_, D_, N_;
  std::vector<StageCosts> costs_;
  std::vector<Bytes> input_activation_, working_activation_;
  std::vector<Worker> workers_;
  std::vector<size_t> dirty_;
  std::priority_queue<Event, std::vector<Event>, std::greater<>> queue_;
  std::uint64_t seq_ = 0;
  std::map<std::tuple<int, int, bool>, Duration> link_free_;
  std::vector<int> stage_done_;
  std::vector<Duration> stage_last_backward_;
  int stages_complete_ = 0;
  Duration allreduce_end_{0};
  SimulationResult result_;
};

}  // namespace

SimulationResult simulate_minibatch(const Schedule& schedule, const ParallelConfig& config, const ModelSpec& model,
                                    const CalibrationProfile& profile, const Placement& placement,
                                    const SimOptions& options) {
  return Engine(schedule, config, model, profile, placement, options).run();
}

Duration makespan_lower_bound(const Schedule& schedule, const ParallelConfig& config, const ModelSpec& model,
                              const CalibrationProfile& profile, const Placement& placement) {
  const auto costs = stage_costs(schedule, config, model, profile);
  Duration bound{0};
  for (int r = 0; r < config.replicas; ++r) {
    Duration chain{0};
    for (int s = 0; s < config.stages; ++s) {
      const auto& c = costs[static_cast<size_t>(s)];
      const double scale = placement.slot(s, r).compute_scale;
      Duration busy{0};
      for (const auto& t : schedule.stage_tasks(s + 1))
        busy += scaled(t.kind == TaskKind::Backward ? c.backward : c.forward, scale);
      bound = std::max(bound, busy + c.allreduce);
      chain += scaled(c.forward, scale) + scaled(c.backward, scale);
    }
    bound = std::max(bound, chain + costs.front().allreduce);
  }
  return bound;
}

}  // namespace pipeplan
