// Copyright 2026 The pipeplan Authors
// SPDX-License-Identifier: Apache-2.0

#include "pipeplan/morphing.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <queue>
#include <sstream>

#include <fmt/format.h>
#include <fmt/ostream.h>

namespace pipeplan {

const char* to_string(TraceKind kind) {
  switch (kind) {
    case TraceKind::Add: return "add";
    case TraceKind::Remove: return "remove";
    case TraceKind::Slow: return "slow";
    case TraceKind::Recover: return "recover";
  }
  return "?";
}

const char* to_string(DowntimeKind kind) {
  switch (kind) {
    case DowntimeKind::Reconfigure: return "reconfigure";
    case DowntimeKind::PassThrough: return "pass-through";
    case DowntimeKind::Paused: return "paused";
  }
  return "?";
}

Duration MorphingOptions::heartbeat_timeout() const {
  return Duration{std::llround(static_cast<double>(heartbeat_period.count()) * heartbeat_timeout_factor)};
}

std::int64_t MorphTimeline::iterations() const {
  std::int64_t n = 0;
  for (const auto& s : segments) n += s.iterations;
  return n;
}

// ---------------------------------------------------------------------------
// Trace files

PreemptionTrace parse_trace(std::istream& in, const std::string& source) {
  PreemptionTrace trace;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream fields(line);
    std::vector<std::string> f;
    for (std::string w; fields >> w;) f.push_back(w);
    if (f.empty()) continue;
    const auto where = [&] { return fmt::format("{}:{}", source, line_no); };
    if (f.size() < 3) throw InputError(fmt::format("{}: expected `time_s kind vm_id [gpus node_id]`", where()));

    TraceEvent e;
    try {
      size_t used = 0;
      const double t = std::stod(f[0], &used);
      if (used != f[0].size() || !(t >= 0) || !std::isfinite(t)) throw std::invalid_argument("time");
      e.time = from_seconds(t);
    } catch (const std::exception&) {
      throw InputError(fmt::format("{}: time '{}' is not a non-negative number of seconds", where(), f[0]));
    }
    const std::string& kind = f[1];
    e.vm_id = f[2];
    const auto number = [&](const std::string& text, const char* what) {
      try {
        size_t used = 0;
        const double v = std::stod(text, &used);
        if (used == text.size() && std::isfinite(v)) return v;
      } catch (const std::exception&) {
      }
      throw InputError(fmt::format("{}: {} '{}' is not a number", where(), what, text));
    };
    if (kind == "add") {
      e.kind = TraceKind::Add;
      if (f.size() != 5) throw InputError(fmt::format("{}: add needs `time_s add vm_id gpus node_id`", where()));
      const double g = number(f[3], "gpus");
      if (g < 1 || g != std::floor(g)) throw InputError(fmt::format("{}: gpus must be a positive integer", where()));
      e.gpus = static_cast<int>(g);
      e.node_id = f[4];
    } else if (kind == "remove" || kind == "recover") {
      e.kind = kind == "remove" ? TraceKind::Remove : TraceKind::Recover;
      if (f.size() > 5) throw InputError(fmt::format("{}: too many fields", where()));
    } else if (kind == "slow") {
      e.kind = TraceKind::Slow;
      if (f.size() < 4 || f.size() > 5) throw InputError(fmt::format("{}: slow needs `time_s slow vm_id factor`", where()));
      e.slowdown = number(f[3], "slowdown");
      if (!(e.slowdown > 0)) throw InputError(fmt::format("{}: slowdown must be > 0", where()));
    } else {
      throw InputError(fmt::format("{}: unknown event kind '{}' (add, remove, slow, recover)", where(), kind));
    }
    trace.events.push_back(std::move(e));
  }
  return trace;
}

PreemptionTrace load_trace(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError(fmt::format("{}: cannot open trace file", path.string()));
  return parse_trace(in, path.string());
}

void write_trace(const PreemptionTrace& trace, std::ostream& out) {
  out << "# time_s kind vm_id gpus node_id\n";
  for (const auto& e : trace.events) {
    switch (e.kind) {
      case TraceKind::Add:
        fmt::print(out, "{} add {} {} {}\n", to_seconds(e.time), e.vm_id, e.gpus, e.node_id);
        break;
      case TraceKind::Slow:
        fmt::print(out, "{} slow {} {}\n", to_seconds(e.time), e.vm_id, e.slowdown);
        break;
      default:
        fmt::print(out, "{} {} {}\n", to_seconds(e.time), to_string(e.kind), e.vm_id);
    }
  }
}

void PreemptionTrace::validate(const ClusterState& initial) const {
  std::set<std::string> present;
  for (const auto& vm : initial.vms()) present.insert(vm.id);
  Duration last{0};
  for (size_t i = 0; i < events.size(); ++i) {
    const auto& e = events[i];
    const auto where = [&] { return fmt::format("trace event {} ({} {} at {} s)", i + 1, to_string(e.kind), e.vm_id, to_seconds(e.time)); };
    if (e.time < last) throw InputError(fmt::format("{}: times must be non-decreasing", where()));
    last = e.time;
    const bool here = present.count(e.vm_id) > 0;
    if (e.kind == TraceKind::Add) {
      if (here) throw InputError(fmt::format("{}: VM is already present", where()));
      present.insert(e.vm_id);
    } else {
      if (!here) throw InputError(fmt::format("{}: VM is not present", where()));
      if (e.kind == TraceKind::Remove) present.erase(e.vm_id);
    }
  }
}

// ---------------------------------------------------------------------------
// Manager primitives

std::set<std::string> detect_fail_stutter(const std::vector<Heartbeat>& heartbeats, double outlier_factor) {
  std::map<int, std::vector<const Heartbeat*>> by_stage;
  for (const auto& h : heartbeats) by_stage[h.stage].push_back(&h);
  std::set<std::string> flagged;
  for (const auto& [stage, group] : by_stage) {
    if (group.size() < 3) continue;
    std::vector<double> t;
    for (const auto* h : group) t.push_back(static_cast<double>((h->forward + h->backward).count()));
    std::vector<double> sorted = t;
    std::sort(sorted.begin(), sorted.end());
    const size_t n = sorted.size();
    const double median = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
    for (size_t i = 0; i < group.size(); ++i)
      if (t[i] > outlier_factor * median) flagged.insert(group[i]->vm_id);
  }
  return flagged;
}

namespace {

std::vector<std::int64_t> stage_params(const ParallelConfig& config, const ModelSpec& model) {
  std::vector<std::int64_t> params(static_cast<size_t>(config.stages), 0);
  for (int i = 0; i < model.num_cutpoints(); ++i)
    params.at(static_cast<size_t>(config.stage_map.at(static_cast<size_t>(i)))) += model.cutpoint(i).params;
  return params;
}

}  // namespace

CheckpointCost checkpoint_cost(const ParallelConfig& config, const ModelSpec& model, int interval,
                               const StorageSpec& storage, Duration minibatch_time, int bytes_per_param_state) {
  if (interval < 1) throw InputError("checkpoint interval must be >= 1");
  if (!(storage.write_bandwidth > 0)) throw InputError("storage write bandwidth must be > 0");
  CheckpointCost c;
  for (auto p : stage_params(config, model)) {
    const Bytes shard = (static_cast<Bytes>(bytes_per_param_state) * p + config.replicas - 1) / config.replicas;
    c.bytes_per_replica = std::max(c.bytes_per_replica, shard);
  }
  c.per_checkpoint = from_seconds(static_cast<double>(c.bytes_per_replica) / storage.write_bandwidth);
  const double cycle = static_cast<double>(interval) * to_seconds(minibatch_time) + to_seconds(c.per_checkpoint);
  c.overhead_fraction = cycle > 0 ? to_seconds(c.per_checkpoint) / cycle : 0;
  return c;
}

Duration restore_cost(const ParallelConfig& config, const ModelSpec& model, const StorageSpec& storage,
                      int bytes_per_param_state) {
  if (!(storage.read_bandwidth > 0)) throw InputError("storage read bandwidth must be > 0");
  std::int64_t largest = 0;
  for (auto p : stage_params(config, model)) largest = std::max(largest, p);
  return from_seconds(static_cast<double>(bytes_per_param_state) * static_cast<double>(largest) /
                      storage.read_bandwidth);
}

// ---------------------------------------------------------------------------
// Replay

namespace {

struct Vm {
  VmInfo info;
  double slowdown = 1.0;
};

// One process lifetime of the job under a fixed configuration and
// placement. Progress is tracked as completed-but-unsaved mini-batches plus
// the elapsed part of the current mini-batch or checkpoint.
struct Run {
  PlanCandidate plan;
  Placement placement{1, 1, {GpuSlot{}}};
  Duration minibatch{0};
  Duration checkpoint{0};
  Duration started{0};
  int since_checkpoint = 0;
  Duration into{0};  // elapsed in the current mini-batch or checkpoint
  bool checkpointing = false;
};

struct QueuedEvent {
  Duration time{0};
  std::uint64_t seq = 0;
  bool detect = false;  // heartbeat-based fail-stutter check
  TraceEvent event;

  bool operator>(const QueuedEvent& o) const { return std::tie(time, seq) > std::tie(o.time, o.seq); }
};

class Replayer {
 public:
  Replayer(const ModelSpec& model, const JobSpec& job, const CalibrationProfile& profile, const HardwareSpec& hw,
           const PlannerOptions& planner, const MorphingOptions& options)
      : model_(model), job_(job), profile_(profile), hw_(hw), planner_(planner), options_(options) {
    out_.minibatch_size = job.minibatch_size;
  }

  MorphTimeline run(const PreemptionTrace& trace, const ClusterState& initial) {
    for (const auto& vm : initial.vms()) add_vm(vm);
    std::uint64_t seq = 0;
    for (const auto& e : trace.events) {
      if (e.time == Duration{0}) {
        apply(e);
      } else {
        queue_.push(QueuedEvent{e.time, seq++, false, e});
      }
    }
    seq_ = seq;
    if (total_gpus() == 0) throw InputError("replay: the initial cluster has no GPUs");
    select_m();

    now_ = Duration{0};
    if (auto p = plan_now()) {
      start_run(std::move(*p), now_, "start");
    } else {
      open_pause(now_, "start");
    }

    while (!done_) {
      const std::optional<Duration> next =
          queue_.empty() ? std::nullopt : std::optional<Duration>(queue_.top().time);
      if (run_) {
        const Duration limit = stop_limit(next);
        if (advance(limit)) break;  // job finished
        if (options_.horizon.count() > 0 && now_ >= options_.horizon) {
          close_segment(now_);
          break;
        }
      } else if (!next || (options_.horizon.count() > 0 && *next >= options_.horizon)) {
        // Paused with nothing left that could restore capacity.
        const Duration end = options_.horizon.count() > 0 ? std::max(now_, options_.horizon) : now_;
        if (!out_.downtimes.empty() && out_.downtimes.back().kind == DowntimeKind::Paused)
          out_.downtimes.back().end = end;
        now_ = end;
        break;
      }
      if (queue_.empty()) continue;
      QueuedEvent q = queue_.top();
      queue_.pop();
      if (run_ && now_ < q.time) advance(q.time);
      if (done_) break;
      now_ = std::max(now_, q.time);
      handle(q);
    }
    out_.end = now_;
    return std::move(out_);
  }

 private:
  // -- cluster bookkeeping ----------------------------------------------------

  void add_vm(const VmInfo& vm) {
    order_.push_back(vm.id);
    vms_[vm.id] = Vm{vm, 1.0};
  }

  void apply(const TraceEvent& e) {
    switch (e.kind) {
      case TraceKind::Add:
        add_vm(VmInfo{e.vm_id, e.gpus, e.node_id});
        break;
      case TraceKind::Remove:
        vms_.erase(e.vm_id);
        order_.erase(std::remove(order_.begin(), order_.end(), e.vm_id), order_.end());
        unflag(e.vm_id);
        break;
      case TraceKind::Slow:
        vms_.at(e.vm_id).slowdown = e.slowdown;
        break;
      case TraceKind::Recover:
        vms_.at(e.vm_id).slowdown = 1.0;
        unflag(e.vm_id);
        break;
    }
  }

  void unflag(const std::string& vm) {
    if (flagged_.erase(vm)) out_.flag_changes.push_back(FlagChange{now_, vm, false});
  }

  int total_gpus() const {
    int n = 0;
    for (const auto& [id, vm] : vms_)
      if (!flagged_.count(id)) n += vm.info.gpus;
    return n;
  }

  ClusterState usable_cluster() const {
    std::vector<VmInfo> v;
    for (const auto& id : order_)
      if (!flagged_.count(id)) v.push_back(vms_.at(id).info);
    return ClusterState(std::move(v));
  }

  std::map<std::string, double> slowdowns() const {
    std::map<std::string, double> s;
    for (const auto& [id, vm] : vms_)
      if (vm.slowdown != 1.0) s[id] = vm.slowdown;
    return s;
  }

  // Identical usable clusters up to VM names give identical plans.
  std::string signature() const {
    std::map<std::string, int> node_index;
    std::string sig;
    for (const auto& id : order_) {
      if (flagged_.count(id)) continue;
      const auto& vm = vms_.at(id);
      const int node = node_index.emplace(vm.info.node, static_cast<int>(node_index.size())).first->second;
      sig += fmt::format("{}:{}:{};", vm.info.gpus, node, vm.slowdown);
    }
    return sig;
  }

  // -- planning ---------------------------------------------------------------

  void select_m() {
    if (planner_.micro_batch_size) {
      m_ = *planner_.micro_batch_size;
    } else {
      // Chosen once per job from the starting cluster; later re-plans
      // reuse it.
      try {
        PlannerOptions opt = planner_;
        opt.compute_scale = slowdowns();
        m_ = plan(total_gpus(), model_, job_, profile_, hw_, usable_cluster(), opt).micro_batch_size;
      } catch (const InfeasibleError&) {
        m_ = select_microbatch(profile_, planner_.improvement_threshold);
      }
    }
    out_.micro_batch_size = m_;
  }

  struct Planned {
    PlanCandidate candidate;
    Placement placement;
    size_t simulations = 0;
  };

  std::optional<Planned> plan_now() {
    const int g = total_gpus();
    const std::string key = signature();
    auto it = cache_.find(key);
    if (it == cache_.end()) {
      std::optional<PlanResult> result;
      if (g > 0) {
        PlannerOptions opt = planner_;
        opt.micro_batch_size = m_;
        opt.compute_scale = slowdowns();
        try {
          result = plan(g, model_, job_, profile_, hw_, usable_cluster(), opt);
        } catch (const InfeasibleError&) {
        }
      }
      it = cache_.emplace(key, std::move(result)).first;
    }
    if (!it->second) return std::nullopt;
    const PlanResult& r = *it->second;
    Planned p{r.best(), placement_for(r.best().config), r.candidates.size()};
    return p;
  }

  Placement placement_for(const ParallelConfig& c) const {
    Placement p = Placement::packed(usable_cluster(), c.stages, c.replicas);
    for (int r = 0; r < c.replicas; ++r)
      for (int s = 0; s < c.stages; ++s) p.slot(s, r).compute_scale = vms_.at(p.slot(s, r).vm_id).slowdown;
    return p;
  }

  Duration planning_cost(size_t simulations) const {
    return options_.planner_seconds_per_simulation * static_cast<std::int64_t>(simulations);
  }

  // -- running ----------------------------------------------------------------

  void start_run(Planned p, Duration at, const std::string& /*why*/) {
    run_.emplace();
    run_->plan = std::move(p.candidate);
    run_->placement = std::move(p.placement);
    run_->since_checkpoint = carried_;
    run_->started = at;
    carried_ = 0;
    retime_run();
    open_segment(at);
    now_ = at;
    // Heartbeats from the new processes reveal VMs that were already slow.
    for (const auto& slot : run_->placement.slots()) {
      if (slot.compute_scale != 1.0) {
        queue_.push(QueuedEvent{at + options_.heartbeat_period, seq_++, true, {}});
        break;
      }
    }
  }

  void retime_run() {
    const auto& c = run_->plan.config;
    Schedule s = planner_.policy == SchedulePolicy::Varuna ? generate_varuna_schedule(c.stages, c.micro_batches)
                                                           : generate_gpipe_schedule(c.stages, c.micro_batches);
    run_->minibatch = simulate_minibatch(s, c, model_, profile_, run_->placement, planner_.simulation).minibatch_time;
    run_->checkpoint = checkpoint_cost(c, model_, job_.checkpoint_interval, options_.storage, run_->minibatch,
                                       profile_.bytes_per_param_state())
                           .per_checkpoint;
  }

  void open_segment(Duration at) {
    Segment s;
    s.start = at;
    s.end = at;
    s.config = run_->plan.config;
    s.gpus = total_gpus();
    s.minibatch_time = run_->minibatch;
    s.checkpoint_time = run_->checkpoint;
    const double cycle = static_cast<double>(job_.checkpoint_interval) * to_seconds(run_->minibatch) +
                         to_seconds(run_->checkpoint);
    s.examples_per_second =
        cycle > 0 ? static_cast<double>(job_.checkpoint_interval * job_.minibatch_size) / cycle : 0;
    s.examples_per_second_per_gpu = s.gpus > 0 ? s.examples_per_second / s.gpus : 0;
    for (const auto& slot : run_->placement.slots()) s.placed_vms.insert(slot.vm_id);
    out_.segments.push_back(std::move(s));
  }

  void close_segment(Duration at) {
    out_.segments.back().end = at;
  }

  Duration stop_limit(std::optional<Duration> next) const {
    Duration limit = next ? *next : Duration::max();
    if (options_.horizon.count() > 0) limit = std::min(limit, options_.horizon);
    return limit;
  }

  void commit() {
    auto& seg = out_.segments.back();
    seg.iterations += run_->since_checkpoint;
    ++seg.checkpoints;
    committed_ += run_->since_checkpoint;
    run_->since_checkpoint = 0;
  }

  // Runs the job forward to `limit` (or to completion). Returns true when
  // the job finished.
  bool advance(Duration limit) {
    auto& r = *run_;
    const int interval = job_.checkpoint_interval;
    while (now_ < limit) {
      if (r.checkpointing) {
        const Duration need = r.checkpoint - r.into;
        if (limit != Duration::max() && now_ + need > limit) {
          r.into += limit - now_;
          now_ = limit;
          break;
        }
        now_ += need;
        r.into = Duration{0};
        r.checkpointing = false;
        commit();
        if (committed_ >= job_.target_iterations) {
          close_segment(now_);
          out_.completed = true;
          done_ = true;
          return true;
        }
        continue;
      }
      const Duration need = r.minibatch - r.into;
      if (limit != Duration::max() && now_ + need > limit) {
        r.into += limit - now_;
        now_ = limit;
        break;
      }
      now_ += need;
      r.into = Duration{0};
      ++r.since_checkpoint;
      if (r.since_checkpoint >= interval || committed_ + r.since_checkpoint >= job_.target_iterations)
        r.checkpointing = true;
    }
    close_segment(now_);
    return false;
  }

  // Finish the current mini-batch and save it, as before a planned restart.
  void graceful_stop() {
    auto& r = *run_;
    if (!r.checkpointing) {
      if (r.into.count() > 0) {
        now_ += r.minibatch - r.into;
        ++r.since_checkpoint;
      }
      if (r.since_checkpoint == 0) {
        close_segment(now_);
        return;
      }
      r.into = Duration{0};
      r.checkpointing = true;
    }
    now_ += r.checkpoint - r.into;
    r.into = Duration{0};
    r.checkpointing = false;
    commit();
    close_segment(now_);
    if (committed_ >= job_.target_iterations) {
      out_.completed = true;
      done_ = true;
    }
  }

  // -- events -----------------------------------------------------------------

  // Trace events are handled in batches: everything due by the time the
  // manager looks (simultaneous events, or events deferred by a restart)
  // leads to a single decision.
  void handle(const QueuedEvent& first) {
    if (first.detect) {
      // A check that came due while the job was down has no heartbeats to
      // look at; the run that is up now schedules its own.
      if (run_ && first.time > run_->started) detect();
      return;
    }
    std::vector<TraceEvent> batch{first.event};
    while (!queue_.empty() && !queue_.top().detect && queue_.top().time <= now_) {
      batch.push_back(queue_.top().event);
      queue_.pop();
    }

    std::vector<std::string> causes;
    bool lost_placed = false, rescaled = false, only_slow = true;
    for (const auto& e : batch) {
      const bool was_placed = run_ && placed(e.vm_id);
      causes.push_back(fmt::format("{} {}", to_string(e.kind), e.vm_id));
      apply(e);
      only_slow &= e.kind == TraceKind::Slow;
      if (!was_placed) continue;
      if (e.kind == TraceKind::Remove) lost_placed = true;
      if (e.kind == TraceKind::Slow) {
        // Heartbeats carry the new compute times from the next period on.
        queue_.push(QueuedEvent{now_ + options_.heartbeat_period, seq_++, true, e});
        set_scale(e.vm_id, e.slowdown);
        rescaled = true;
      }
      if (e.kind == TraceKind::Recover) {
        set_scale(e.vm_id, 1.0);
        rescaled = true;
      }
    }
    const std::string cause = fmt::format("{}", fmt::join(causes, "; "));

    if (!run_) {
      try_resume(cause);
    } else if (lost_placed) {
      preempted(cause);
    } else {
      if (rescaled) resegment();
      if (!only_slow) replan_running(cause, false);
    }
  }

  void set_scale(const std::string& vm, double scale) {
    auto& p = run_->placement;
    for (int r = 0; r < p.replicas(); ++r)
      for (int s = 0; s < p.stages(); ++s)
        if (p.slot(s, r).vm_id == vm) p.slot(s, r).compute_scale = scale;
  }

  bool placed(const std::string& vm) const {
    for (const auto& slot : run_->placement.slots())
      if (slot.vm_id == vm) return true;
    return false;
  }

  // Same configuration, new throughput or G: start a new segment record.
  void resegment() {
    close_segment(now_);
    retime_run();
    const auto& last = out_.segments.back();
    if (last.start == last.end && last.iterations == 0 && last.checkpoints == 0) out_.segments.pop_back();
    open_segment(now_);
  }

  void detect() {
    if (!run_) return;
    const auto& a = run_->plan.assignment;
    std::vector<Heartbeat> beats;
    const auto& c = run_->plan.config;
    for (int r = 0; r < c.replicas; ++r) {
      for (int s = 0; s < c.stages; ++s) {
        const auto& slot = run_->placement.slot(s, r);
        const auto scale = [&](Duration d) {
          return Duration{std::llround(static_cast<double>(d.count()) * slot.compute_scale)};
        };
        beats.push_back(Heartbeat{slot.vm_id, s + 1, scale(a.stage_forward.at(static_cast<size_t>(s))),
                                  scale(a.stage_backward.at(static_cast<size_t>(s)))});
      }
    }
    const auto outliers = detect_fail_stutter(beats, options_.outlier_factor);
    bool fresh = false;
    for (const auto& vm : outliers) {
      if (!flagged_.insert(vm).second) continue;
      out_.flag_changes.push_back(FlagChange{now_, vm, true});
      fresh = true;
    }
    if (!fresh) return;
    out_.ever_flagged.insert(outliers.begin(), outliers.end());
    replan_running(fmt::format("fail-stutter {}", fmt::join(outliers, ",")), true);
  }

  // Re-plan while the job is healthy. `must_move` forces a restart because
  // a placed VM is now excluded.
  void replan_running(const std::string& cause, bool must_move) {
    auto p = plan_now();
    if (!p) {
      if (must_move) {
        // Nothing fits without the flagged VMs; they stay excluded, so the
        // job saves its state and waits for capacity.
        graceful_stop();
        if (done_) return;
        carried_ = 0;
        run_.reset();
        open_pause(now_, cause);
        return;
      }
      resegment_if_g_changed();
      return;
    }
    const bool same = p->candidate.config == run_->plan.config;
    if (same && !must_move) {
      out_.pass_through_events.push_back(now_);
      resegment_if_g_changed();
      return;
    }
    graceful_stop();
    if (done_) return;
    restart(std::move(*p), same ? DowntimeKind::PassThrough : DowntimeKind::Reconfigure, cause, Duration{0}, 0.0);
  }

  void resegment_if_g_changed() {
    if (out_.segments.back().gpus != total_gpus()) resegment();
  }

  void preempted(const std::string& cause) {
    auto& r = *run_;
    const double lost = r.checkpointing ? r.since_checkpoint
                                        : r.since_checkpoint + static_cast<double>(r.into.count()) /
                                                                   static_cast<double>(r.minibatch.count());
    out_.lost_work.push_back(lost);
    close_segment(now_);
    // Whole lost mini-batches are redone after the restart; the partial one
    // is simply gone.
    carried_ = r.since_checkpoint;
    run_.reset();
    const Duration detection = options_.heartbeat_timeout();
    auto p = plan_now();
    if (!p) {
      open_pause(now_, cause);
      auto& d = out_.downtimes.back();
      d.detection = detection;
      d.lost_minibatches = lost;
      return;
    }
    const bool same = p->candidate.config == out_.segments.back().config;
    restart(std::move(*p), same ? DowntimeKind::PassThrough : DowntimeKind::Reconfigure, cause, detection, lost);
  }

  // A run stopped the moment it started leaves nothing worth recording.
  void drop_empty_segment() {
    if (out_.segments.empty()) return;
    const auto& last = out_.segments.back();
    if (last.start == last.end && last.iterations == 0 && last.checkpoints == 0) out_.segments.pop_back();
  }

  void restart(Planned p, DowntimeKind kind, const std::string& cause, Duration detection, double lost) {
    drop_empty_segment();
    Downtime d;
    d.kind = kind;
    d.start = now_;
    d.cause = cause;
    d.detection = detection;
    d.lost_minibatches = lost;
    d.planning = planning_cost(p.simulations);
    d.restart = options_.restart_overhead;
    d.restore = restore_cost(p.candidate.config, model_, options_.storage, profile_.bytes_per_param_state());
    d.stages = p.candidate.config.stages;
    d.replicas = p.candidate.config.replicas;
    d.end = d.start + d.detection + d.restart + d.planning + d.restore;
    const Duration resume = d.end;
    out_.downtimes.push_back(std::move(d));
    start_run(std::move(p), resume, cause);
    // Unsaved mini-batches are recomputed under the new configuration
    // before the job makes fresh progress.
    const Duration replay = run_->minibatch * run_->since_checkpoint;
    if (replay.count() > 0) {
      auto& down = out_.downtimes.back();
      down.lost_work += replay;
      down.end += replay;
      out_.segments.back().start = out_.segments.back().end = down.end;
      now_ = down.end;
    }
  }

  void open_pause(Duration at, const std::string& cause) {
    drop_empty_segment();
    Downtime d;
    d.kind = DowntimeKind::Paused;
    d.start = at;
    d.end = at;
    d.cause = cause;
    out_.downtimes.push_back(std::move(d));
  }

  void try_resume(const std::string& cause) {
    auto p = plan_now();
    auto& pause = out_.downtimes.back();
    pause.end = now_;
    if (!p) return;
    restart(std::move(*p), DowntimeKind::Reconfigure, cause, Duration{0}, 0.0);
  }

  const ModelSpec& model_;
  const JobSpec& job_;
  const CalibrationProfile& profile_;
  const HardwareSpec& hw_;
  const PlannerOptions& planner_;
  const MorphingOptions& options_;

  std::map<std::string, Vm> vms_;
  std::vector<std::string> order_;
  std::set<std::string> flagged_;
  std::map<std::string, std::optional<PlanResult>> cache_;
  std::priority_queue<QueuedEvent, std::vector<QueuedEvent>, std::greater<>> queue_;
  std::uint64_t seq_ = 0;

  int m_ = 1;
  Duration now_{0};
  std::optional<Run> run_;
  std::int64_t committed_ = 0;
  int carried_ = 0;
  bool done_ = false;
  MorphTimeline out_;
};

}  // namespace

MorphTimeline replay(const PreemptionTrace& trace, const ClusterState& initial, const ModelSpec& model,
                     const JobSpec& job, const CalibrationProfile& profile, const HardwareSpec& hw,
                     const PlannerOptions& planner, const MorphingOptions& options) {
  job.validate();
  trace.validate(initial);
  if (options.heartbeat_period.count() <= 0) throw InputError("morphing.heartbeat_period_s must be > 0");
  if (options.heartbeat_timeout_factor < 1) throw InputError("morphing.heartbeat_timeout_factor must be >= 1");
  return Replayer(model, job, profile, hw, planner, options).run(trace, initial);
}

// ---------------------------------------------------------------------------
// Output

namespace {

struct Row {
  Duration start, end;
  int p, d;
  double ex, ex_gpu;
  std::string event;
};

std::vector<Row> rows(const MorphTimeline& t) {
  std::vector<Row> out;
  for (const auto& s : t.segments)
    out.push_back(Row{s.start, s.end, s.config.stages, s.config.replicas, s.examples_per_second,
                      s.examples_per_second_per_gpu, "run"});
  for (const auto& d : t.downtimes) out.push_back(Row{d.start, d.end, d.stages, d.replicas, 0, 0, to_string(d.kind)});
  for (auto at : t.pass_through_events) out.push_back(Row{at, at, 0, 0, 0, 0, "pass"});
  std::stable_sort(out.begin(), out.end(), [](const Row& a, const Row& b) {
    return std::tie(a.start, a.end) < std::tie(b.start, b.end);
  });
  return out;
}

}  // namespace

void write_timeline_csv(const MorphTimeline& t, std::ostream& out) {
  out << "start,end,P,D,ex_per_s,ex_per_s_per_gpu,event\n";
  for (const auto& r : rows(t)) {
    fmt::print(out, "{:.6f},{:.6f},{},{},{:.6f},{:.6f},{}\n", to_seconds(r.start), to_seconds(r.end), r.p, r.d, r.ex,
               r.ex_gpu, r.event);
  }
}

void write_timeline_svg(const MorphTimeline& t, std::ostream& out) {
  constexpr double kLeft = 70, kTop = 30, kWidth = 900, kHeight = 300;
  const double span = std::max(1.0, to_seconds(t.end));
  double max_ex = 1, max_gpu = 1e-9;
  for (const auto& s : t.segments) {
    max_ex = std::max(max_ex, s.examples_per_second);
    max_gpu = std::max(max_gpu, s.examples_per_second_per_gpu);
  }
  const auto x = [&](Duration d) { return kLeft + kWidth * to_seconds(d) / span; };
  const auto y_ex = [&](double v) { return kTop + kHeight * (1 - v / (max_ex * 1.1)); };
  const auto y_gpu = [&](double v) { return kTop + kHeight * (1 - v / (max_gpu * 1.1)); };

  fmt::print(out,
             "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{:.0f}\" height=\"{:.0f}\" "
             "font-family=\"sans-serif\" font-size=\"11\">\n",
             kLeft * 2 + kWidth, kTop + kHeight + 50);
  const double base = kTop + kHeight;
  fmt::print(out, "<line class=\"axis\" x1=\"{0}\" y1=\"{1}\" x2=\"{2}\" y2=\"{1}\" stroke=\"black\"/>\n", kLeft, base,
             kLeft + kWidth);
  fmt::print(out, "<line class=\"axis\" x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"black\"/>\n", kLeft, kTop,
             base);
  fmt::print(out, "<line class=\"axis\" x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"black\"/>\n",
             kLeft + kWidth, kTop, base);
  fmt::print(out, "<text x=\"4\" y=\"{}\" fill=\"#1f77b4\">{:.1f} ex/s</text>\n", kTop + 4, max_ex * 1.1);
  fmt::print(out, "<text x=\"{}\" y=\"{}\" fill=\"#d62728\">{:.3f} ex/s/GPU</text>\n", kLeft + kWidth + 4, kTop + 4,
             max_gpu * 1.1);
  fmt::print(out, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{:.2f} h</text>\n", kLeft + kWidth, base + 16,
             span / 3600.0);

  std::string ex_path, gpu_path;
  const auto step = [&](std::string& path, double x0, double x1, double y) {
    path += fmt::format("{}{:.2f},{:.2f} L{:.2f},{:.2f} ", path.empty() ? "M" : "L", x0, y, x1, y);
  };
  for (const auto& r : rows(t)) {
    if (r.event == "pass") continue;
    step(ex_path, x(r.start), x(r.end), y_ex(r.ex));
    step(gpu_path, x(r.start), x(r.end), y_gpu(r.ex_gpu));
  }
  fmt::print(out, "<path class=\"throughput\" d=\"{}\" fill=\"none\" stroke=\"#1f77b4\"/>\n", ex_path);
  fmt::print(out, "<path class=\"per-gpu\" d=\"{}\" fill=\"none\" stroke=\"#d62728\"/>\n", gpu_path);
  for (auto at : t.pass_through_events)
    fmt::print(out, "<text class=\"event\" x=\"{:.2f}\" y=\"{}\" font-size=\"9\">p</text>\n", x(at), kTop - 6);
  for (const auto& d : t.downtimes) {
    const std::string label = d.kind == DowntimeKind::PassThrough ? "p"
                              : d.kind == DowntimeKind::Paused    ? "paused"
                                                                  : fmt::format("{}x{}", d.stages, d.replicas);
    fmt::print(out, "<text class=\"event\" x=\"{:.2f}\" y=\"{}\" font-size=\"9\">{}</text>\n", x(d.start),
               kTop - 6, label);
  }
  out << "</svg>\n";
}

}  // namespace pipeplan
