// Copyright 2026 The pipeplan Authors
// SPDX-License-Identifier: Apache-2.0

#include "pipeplan/cli.hpp"

#include <algorithm>
#include <fstream>
#include <ostream>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <fmt/ostream.h>
#include <json.hpp>

#include "pipeplan/experiments.hpp"
#include "pipeplan/io.hpp"
#include "pipeplan/morphing.hpp"
#include "pipeplan/partitioner.hpp"
#include "pipeplan/planner.hpp"
#include "pipeplan/scheduler.hpp"
#include "pipeplan/simulator.hpp"

#ifndef PIPEPLAN_VERSION
#define PIPEPLAN_VERSION "0.0.0"
#endif

namespace pipeplan {

const char* version() { return PIPEPLAN_VERSION; }

namespace {

using nlohmann::json;

struct Ctx {
  std::ostream& out;
  const CliEnvironment& env;

  void header(const std::string& line) const {
    if (env.color) {
      fmt::print(out, "\x1b[1m{}\x1b[0m\n", line);
    } else {
      fmt::print(out, "{}\n", line);
    }
  }
  void emit(const json& j) const { out << j.dump(2) << '\n'; }
};

std::string shape(const ParallelConfig& c) { return fmt::format("{}x{}", c.stages, c.replicas); }

json config_json(const ParallelConfig& c) {
  return {{"stages", c.stages},
          {"replicas", c.replicas},
          {"micro_batch_size", c.micro_batch_size},
          {"micro_batches", c.micro_batches},
          {"stage_map", c.stage_map}};
}

std::ofstream open_out(const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw InputError(fmt::format("{}: cannot open for writing", path));
  return f;
}

std::vector<double> parse_scales(const std::string& text) {
  std::vector<double> out;
  std::string item;
  std::istringstream in(text);
  while (std::getline(in, item, ',')) {
    try {
      size_t used = 0;
      const double v = std::stod(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      out.push_back(v);
    } catch (const std::exception&) {
      throw InputError(fmt::format("--bandwidth-scale: '{}' is not a number", item));
    }
  }
  if (out.empty()) throw InputError("--bandwidth-scale: expected a comma-separated list of numbers");
  return out;
}

// The job's configuration, checked against the model, job and cluster.
ParallelConfig checked_config(const JobConfig& job) {
  if (!job.config) {
    throw InputError(fmt::format("{}: $.config: missing required field (run `pipeplan plan` to produce one)",
                                 job.source.string()));
  }
  const ParallelConfig& c = *job.config;
  const ClusterState cluster =
      job.cluster.vms().empty() ? ClusterState::packed(c.gpus_used(), job.hw.gpus_per_node) : job.cluster;
  const auto violations = validate_config(c, job.model, job.job, cluster);
  if (!violations.empty()) {
    std::string msg = fmt::format("{}: $.config: invalid configuration", job.source.string());
    for (const auto& v : violations) msg += fmt::format("; {}: {}", to_string(v.constraint), v.message);
    throw InputError(msg);
  }
  return c;
}

ClusterState cluster_for(const JobConfig& job, const ParallelConfig& c) {
  return job.cluster.vms().empty() ? ClusterState::packed(c.gpus_used(), job.hw.gpus_per_node) : job.cluster;
}

// -- plan -----------------------------------------------------------------------

struct PlanArgs {
  std::string spec, out_file, schedule;
  int gpus = -1;
  int threads = 0;
  std::uint64_t seed = 0;
  bool json = false;
};

int cmd_plan(const PlanArgs& a, const Ctx& ctx) {
  const JobConfig job = load_job(a.spec);
  PlannerOptions opt = job.planner;
  opt.simulation.seed = a.seed;
  if (a.threads > 0) opt.threads = a.threads;
  if (!a.schedule.empty()) opt.policy = parse_policy(a.schedule);
  int gpus = a.gpus;
  if (gpus < 0) {
    if (job.cluster.vms().empty()) throw InputError("--gpus is required when the job file has no cluster");
    gpus = job.cluster.total_gpus();
  }
  const PlanResult r = plan(gpus, job.model, job.job, job.profile, job.hw, job.cluster, opt);

  std::filesystem::path out_path = a.out_file;
  if (out_path.empty()) {
    out_path = std::filesystem::path(a.spec);
    out_path.replace_extension(".chosen.json");
  }
  {
    auto f = open_out(out_path.string());
    f << job_with_config(job, r.config(), out_path.parent_path());
  }

  if (a.json) {
    json cands = json::array();
    for (const auto& c : r.candidates) {
      cands.push_back({{"config", config_json(c.config)},
                       {"minibatch_time_s", to_seconds(c.minibatch_time)},
                       {"examples_per_second", c.examples_per_second},
                       {"examples_per_second_per_gpu", c.examples_per_second_per_gpu},
                       {"examples_per_second_per_used_gpu", c.examples_per_second_per_used_gpu},
                       {"unused_gpus", gpus - c.config.gpus_used()}});
    }
    ctx.emit({{"gpus", r.gpus},
              {"micro_batch_size", r.micro_batch_size},
              {"min_stages", r.min_stages},
              {"schedule", to_string(opt.policy)},
              {"seed", a.seed},
              {"chosen", r.chosen},
              {"candidates", std::move(cands)},
              {"config_file", out_path.generic_string()}});
    return 0;
  }
  fmt::print(ctx.out, "G = {}, m = {}, P_min = {}, {} candidates\n", r.gpus, r.micro_batch_size, r.min_stages,
             r.candidates.size());
  ctx.header(fmt::format("  {:>7} {:>6} {:>13} {:>11} {:>9} {:>7}", "config", "N_m", "minibatch_s", "ex/s",
                         "ex/s/GPU", "unused"));
  for (size_t i = 0; i < r.candidates.size(); ++i) {
    const auto& c = r.candidates[i];
    fmt::print(ctx.out, "{} {:>7} {:>6} {:>13.3f} {:>11.2f} {:>9.4f} {:>7}\n", i == r.chosen ? '*' : ' ',
               shape(c.config), c.config.micro_batches, to_seconds(c.minibatch_time), c.examples_per_second,
               c.examples_per_second_per_gpu, gpus - c.config.gpus_used());
  }
  fmt::print(ctx.out, "chosen {} (m = {}), written to {}\n", shape(r.config()), r.micro_batch_size,
             out_path.generic_string());
  return 0;
}

// -- simulate / gantt ---------------------------------------------------------------

struct SimArgs {
  std::string config, schedule, gantt, format, event_log;
  std::uint64_t seed = 0;
  int replica = 0;
  bool no_opportunistic = false;
  bool json = false;
};

struct SimRun {
  JobConfig job;
  ParallelConfig config;
  SchedulePolicy policy;
  SimOptions options;
  SimulationResult result;
  MemoryReport memory;
};

SimRun run_simulation(const SimArgs& a) {
  JobConfig job = load_job(a.config);
  const ParallelConfig c = checked_config(job);
  SchedulePolicy policy = a.schedule.empty() ? job.planner.policy : parse_policy(a.schedule);
  SimOptions opt = job.planner.simulation;
  opt.seed = a.seed;
  if (a.no_opportunistic) opt.opportunistic = false;
  std::ofstream log;
  if (!a.event_log.empty()) {
    log = open_out(a.event_log);
    opt.event_log = &log;
  }
  const Schedule s = policy == SchedulePolicy::Varuna ? generate_varuna_schedule(c.stages, c.micro_batches)
                                                       : generate_gpipe_schedule(c.stages, c.micro_batches);
  const Placement placement = Placement::packed(cluster_for(job, c), c.stages, c.replicas);
  SimulationResult result = simulate_minibatch(s, c, job.model, job.profile, placement, opt);
  opt.event_log = nullptr;
  const PlanContext pc{job.model, job.job, job.profile, job.hw, job.cluster};
  const StageAssignment assignment = assignment_from_map(job.model, c.stage_map, c.micro_batch_size, job.profile);
  MemoryReport memory = config_memory(pc, c, assignment, policy);
  return SimRun{std::move(job), c, policy, opt, std::move(result), std::move(memory)};
}

void write_gantt(const SimulationResult& r, const std::string& path, std::string format, int replica) {
  if (format.empty()) {
    const auto ext = std::filesystem::path(path).extension().string();
    format = ext == ".csv" ? "csv" : ext == ".svg" ? "svg" : "";
  }
  if (format != "svg" && format != "csv")
    throw InputError(fmt::format("{}: cannot tell the Gantt format; use a .svg or .csv name or --format", path));
  if (replica < 0 || replica >= r.replicas)
    throw InputError(fmt::format("--replica {} is out of range [0, {})", replica, r.replicas));
  auto f = open_out(path);
  if (format == "svg") {
    write_gantt_svg(r, f, replica);
  } else {
    write_gantt_csv(r, f, replica);
  }
}

int cmd_simulate(const SimArgs& a, const Ctx& ctx) {
  const SimRun s = run_simulation(a);
  if (!a.gantt.empty()) write_gantt(s.result, a.gantt, a.format, a.replica);
  const auto& r = s.result;
  const auto& c = s.config;
  const double ex = static_cast<double>(s.job.job.minibatch_size) / to_seconds(r.minibatch_time);

  if (a.json) {
    json stages = json::array();
    for (int i = 0; i < c.stages; ++i) {
      const auto u = static_cast<size_t>(i);
      stages.push_back({{"stage", i + 1},
                        {"allreduce_s", to_seconds(r.allreduce[u])},
                        {"idle_s", to_seconds(r.stage_idle[u])},
                        {"peak_in_flight", r.peak_in_flight[u]},
                        {"peak_working_sets", r.peak_working_sets[u]},
                        {"memory_bytes", s.memory.stages[u].total},
                        {"memory_feasible", s.memory.stages[u].feasible}});
    }
    json j = {{"config", config_json(c)},
              {"schedule", to_string(s.policy)},
              {"opportunistic", s.options.opportunistic},
              {"seed", r.seed},
              {"minibatch_time_s", to_seconds(r.minibatch_time)},
              {"pipeline_time_s", to_seconds(r.pipeline_time)},
              {"examples_per_second", ex},
              {"examples_per_second_per_gpu", ex / c.gpus_used()},
              {"bubble_fraction", r.bubble_fraction},
              {"memory_feasible", s.memory.feasible()},
              {"stages", std::move(stages)}};
    if (!a.gantt.empty()) j["gantt_file"] = a.gantt;
    ctx.emit(j);
    return 0;
  }
  fmt::print(ctx.out, "config {} m={} N_m={} schedule {}{} seed {}\n", shape(c), c.micro_batch_size,
             c.micro_batches, to_string(s.policy), s.options.opportunistic ? " (opportunistic)" : "", r.seed);
  fmt::print(ctx.out, "minibatch time   {:.6f} s\n", to_seconds(r.minibatch_time));
  fmt::print(ctx.out, "pipeline time    {:.6f} s\n", to_seconds(r.pipeline_time));
  fmt::print(ctx.out, "examples/s       {:.4f}\n", ex);
  fmt::print(ctx.out, "examples/s/GPU   {:.4f}\n", ex / c.gpus_used());
  fmt::print(ctx.out, "bubble fraction  {:.4f}\n", r.bubble_fraction);
  fmt::print(ctx.out, "memory           {}\n", s.memory.feasible() ? "fits" : "DOES NOT FIT");
  ctx.header(fmt::format("{:>5} {:>12} {:>10} {:>9} {:>8} {:>10}", "stage", "allreduce_s", "idle_s", "in_flight",
                         "working", "memory_GB"));
  for (int i = 0; i < c.stages; ++i) {
    const auto u = static_cast<size_t>(i);
    fmt::print(ctx.out, "{:>5} {:>12.6f} {:>10.6f} {:>9} {:>8} {:>10.2f}\n", i + 1, to_seconds(r.allreduce[u]),
               to_seconds(r.stage_idle[u]), r.peak_in_flight[u], r.peak_working_sets[u],
               static_cast<double>(s.memory.stages[u].total) / 1e9);
  }
  if (!a.gantt.empty()) fmt::print(ctx.out, "gantt written to {}\n", a.gantt);
  return 0;
}

int cmd_gantt(const SimArgs& a, const Ctx& ctx) {
  const SimRun s = run_simulation(a);
  write_gantt(s.result, a.gantt, a.format, a.replica);
  if (a.json) {
    ctx.emit({{"gantt_file", a.gantt},
              {"replica", a.replica},
              {"entries", s.result.entry_count()},
              {"minibatch_time_s", to_seconds(s.result.minibatch_time)}});
  } else {
    fmt::print(ctx.out, "gantt of replica {} written to {} (minibatch time {:.6f} s)\n", a.replica, a.gantt,
               to_seconds(s.result.minibatch_time));
  }
  return 0;
}

// -- compare ------------------------------------------------------------------------

struct CompareArgs {
  std::string config, scales = "1.0";
  std::uint64_t seed = 0;
  bool json = false;
};

int cmd_compare(const CompareArgs& a, const Ctx& ctx) {
  const auto scales = parse_scales(a.scales);
  std::vector<ScheduleComparison> rows;
  ParallelConfig c;
  std::string model_name;
  SimOptions opt;
  opt.seed = a.seed;
  if (a.config.empty()) {
    const Preset p = preset_gpt2_8p3b();
    c = *p.config;
    model_name = p.model.name();
    rows = compare_schedules(c, p.model, p.job, p.profile, p.hw, ClusterState{}, scales, opt);
  } else {
    const JobConfig job = load_job(a.config);
    c = checked_config(job);
    model_name = job.model.name();
    SimOptions o = job.planner.simulation;
    o.seed = a.seed;
    rows = compare_schedules(c, job.model, job.job, job.profile, job.hw, job.cluster, scales, o);
  }

  if (a.json) {
    json out = json::array();
    for (const auto& r : rows) {
      out.push_back({{"bandwidth_scale", r.bandwidth_scale},
                     {"varuna_examples_per_second_per_gpu", r.varuna_per_gpu},
                     {"gpipe_examples_per_second_per_gpu", r.gpipe_per_gpu},
                     {"varuna_minibatch_time_s", to_seconds(r.varuna_time)},
                     {"gpipe_minibatch_time_s", to_seconds(r.gpipe_time)},
                     {"gap", r.gap()}});
    }
    ctx.emit({{"model", model_name}, {"config", config_json(c)}, {"seed", a.seed}, {"rows", std::move(out)}});
    return 0;
  }
  fmt::print(ctx.out, "{} at {}, m={}, N_m={}, seed {}\n", model_name, shape(c), c.micro_batch_size,
             c.micro_batches, a.seed);
  ctx.header(fmt::format("{:>9} {:>14} {:>14} {:>8}", "bw_scale", "varuna_ex/s/GPU", "gpipe_ex/s/GPU", "gap"));
  for (const auto& r : rows) {
    fmt::print(ctx.out, "{:>9.3f} {:>15.4f} {:>14.4f} {:>7.1f}%\n", r.bandwidth_scale, r.varuna_per_gpu,
               r.gpipe_per_gpu, 100 * r.gap());
  }
  return 0;
}

// -- replay ---------------------------------------------------------------------------

struct ReplayArgs {
  std::string config, trace, csv, svg;
  std::uint64_t seed = 0;
  int threads = 0;
  bool json = false;
};

int cmd_replay(const ReplayArgs& a, const Ctx& ctx) {
  const JobConfig job = load_job(a.config);
  if (job.cluster.vms().empty())
    throw InputError(fmt::format("{}: $.cluster: missing required field (replay needs a starting cluster)",
                                 job.source.string()));
  const PreemptionTrace trace = load_trace(a.trace);
  PlannerOptions opt = job.planner;
  opt.simulation.seed = a.seed;
  if (a.threads > 0) opt.threads = a.threads;
  const MorphTimeline t = replay(trace, job.cluster, job.model, job.job, job.profile, job.hw, opt, job.morphing);
  if (!a.csv.empty()) {
    auto f = open_out(a.csv);
    write_timeline_csv(t, f);
  }
  if (!a.svg.empty()) {
    auto f = open_out(a.svg);
    write_timeline_svg(t, f);
  }

  double lo = 0, hi = 0;
  bool any = false;
  for (const auto& s : t.segments) {
    if (s.end <= s.start) continue;
    lo = any ? std::min(lo, s.examples_per_second_per_gpu) : s.examples_per_second_per_gpu;
    hi = any ? std::max(hi, s.examples_per_second_per_gpu) : s.examples_per_second_per_gpu;
    any = true;
  }
  const auto count = [&](DowntimeKind k) {
    return std::count_if(t.downtimes.begin(), t.downtimes.end(), [&](const Downtime& d) { return d.kind == k; });
  };

  if (a.json) {
    json segs = json::array();
    for (const auto& s : t.segments) {
      segs.push_back({{"start_s", to_seconds(s.start)},
                      {"end_s", to_seconds(s.end)},
                      {"config", config_json(s.config)},
                      {"gpus", s.gpus},
                      {"examples_per_second", s.examples_per_second},
                      {"examples_per_second_per_gpu", s.examples_per_second_per_gpu},
                      {"iterations", s.iterations},
                      {"checkpoints", s.checkpoints}});
    }
    json downs = json::array();
    for (const auto& d : t.downtimes) {
      downs.push_back({{"kind", to_string(d.kind)},
                       {"start_s", to_seconds(d.start)},
                       {"end_s", to_seconds(d.end)},
                       {"cause", d.cause},
                       {"lost_work_s", to_seconds(d.lost_work)},
                       {"detection_s", to_seconds(d.detection)},
                       {"restart_s", to_seconds(d.restart)},
                       {"planning_s", to_seconds(d.planning)},
                       {"restore_s", to_seconds(d.restore)},
                       {"lost_minibatches", d.lost_minibatches},
                       {"stages", d.stages},
                       {"replicas", d.replicas}});
    }
    json pass = json::array();
    for (auto p : t.pass_through_events) pass.push_back(to_seconds(p));
    ctx.emit({{"seed", a.seed},
              {"micro_batch_size", t.micro_batch_size},
              {"minibatch_size", t.minibatch_size},
              {"completed", t.completed},
              {"end_s", to_seconds(t.end)},
              {"iterations", t.iterations()},
              {"examples", t.examples()},
              {"lost_work_minibatches", t.lost_work},
              {"flagged_vms", t.ever_flagged},
              {"pass_through_events_s", std::move(pass)},
              {"segments", std::move(segs)},
              {"downtimes", std::move(downs)}});
    return 0;
  }
  fmt::print(ctx.out, "{} segments, {} reconfigurations, {} pass-through restarts, {} pass-through events, {} pauses\n",
             t.segments.size(), count(DowntimeKind::Reconfigure), count(DowntimeKind::PassThrough),
             t.pass_through_events.size(), count(DowntimeKind::Paused));
  fmt::print(ctx.out, "{} mini-batches committed ({} examples), {} after {:.2f} h\n", t.iterations(), t.examples(),
             t.completed ? "finished" : "not finished", to_seconds(t.end) / 3600);
  if (any) fmt::print(ctx.out, "ex/s/GPU band {:.4f} .. {:.4f} ({:.1f}% spread)\n", lo, hi, 100 * (hi / lo - 1));
  ctx.header(fmt::format("{:>9} {:>9} {:>7} {:>10} {:>9}  {}", "start_h", "end_h", "config", "ex/s", "ex/s/GPU",
                         "event"));
  std::vector<std::pair<Duration, std::string>> lines;
  for (const auto& s : t.segments) {
    lines.emplace_back(s.start, fmt::format("{:>9.3f} {:>9.3f} {:>7} {:>10.2f} {:>9.4f}  run", to_seconds(s.start) / 3600,
                                            to_seconds(s.end) / 3600, shape(s.config), s.examples_per_second,
                                            s.examples_per_second_per_gpu));
  }
  for (const auto& d : t.downtimes) {
    lines.emplace_back(d.start, fmt::format("{:>9.3f} {:>9.3f} {:>7} {:>10} {:>9}  {} ({})", to_seconds(d.start) / 3600,
                                            to_seconds(d.end) / 3600, d.stages ? fmt::format("{}x{}", d.stages, d.replicas) : "-",
                                            "-", "-", to_string(d.kind), d.cause));
  }
  std::stable_sort(lines.begin(), lines.end(), [](const auto& x, const auto& y) { return x.first < y.first; });
  for (const auto& [at, line] : lines) fmt::print(ctx.out, "{}\n", line);
  return 0;
}

// -- partition ------------------------------------------------------------------------

struct PartitionArgs {
  std::string ops;
  int k = 0, p = 0, m = 1;
  double tolerance = 0.2;
  bool json = false;
};

int cmd_partition(const PartitionArgs& a, const Ctx& ctx) {
  const OpProfile ops = load_op_profile(a.ops);
  const CutpointSelection sel = identify_cutpoints(ops, a.k, a.tolerance, std::filesystem::path(a.ops).stem().string());
  if (a.p < 1 || a.p > a.k) throw InputError(fmt::format("-P must be in [1, K = {}], got {}", a.k, a.p));
  if (a.m < 1) throw InputError("--m must be >= 1");

  // Section compute times stand in for a calibration at the requested m;
  // backward is taken as twice forward.
  std::vector<CutpointTimes> cps;
  for (auto t : sel.section_compute) {
    CutpointTimes c;
    c.forward = {t * a.m};
    c.backward = {t * a.m * 2};
    c.act_intra = c.grad_intra = c.act_inter = c.grad_inter = {TransferTime{}};
    c.allreduce = {Duration{0}};
    cps.push_back(std::move(c));
  }
  const CalibrationProfile profile({a.m}, {1}, std::move(cps));
  const StageAssignment s = assign_stages(sel.model, a.p, a.m, profile);

  const auto op_name = [&](int i) {
    const auto& n = ops.ops.at(static_cast<size_t>(i)).name;
    return n.empty() ? fmt::format("op{}", i) : n;
  };
  if (a.json) {
    json bounds = json::array(), secs = json::array(), shared = json::array(), stages = json::array();
    for (int b : sel.boundaries) bounds.push_back({{"after_op", b}, {"name", op_name(b)}});
    for (auto t : sel.section_compute) secs.push_back(t.count());
    for (const auto& x : sel.shared_crossings) shared.push_back({{"group", x.group}, {"after_op", x.boundary}});
    for (int i = 0; i < s.stages(); ++i) {
      const auto u = static_cast<size_t>(i);
      stages.push_back({{"stage", i + 1},
                        {"first_cutpoint", s.ranges[u].first},
                        {"last_cutpoint", s.ranges[u].second},
                        {"params", s.stage_params[u]},
                        {"forward_us", s.stage_forward[u].count()},
                        {"output_activation_bytes", s.output_activation[u]}});
    }
    ctx.emit({{"cutpoints", a.k},
              {"stages", a.p},
              {"micro_batch_size", a.m},
              {"boundaries", std::move(bounds)},
              {"section_compute_us", std::move(secs)},
              {"shared_crossings", std::move(shared)},
              {"stage_map", s.stage_map()},
              {"assignment", std::move(stages)}});
    return 0;
  }
  fmt::print(ctx.out, "{} operations -> {} cut-points -> {} stages (m = {})\n", ops.ops.size(), a.k, a.p, a.m);
  ctx.header(fmt::format("{:>7} {:>8} {:>12} {:>14}  {}", "section", "last_op", "compute_ms", "act_bytes/ex", "name"));
  for (int i = 0; i < a.k; ++i) {
    const auto u = static_cast<size_t>(i);
    const int last = i + 1 < a.k ? sel.boundaries[u] : static_cast<int>(ops.ops.size()) - 1;
    fmt::print(ctx.out, "{:>7} {:>8} {:>12.3f} {:>14}  {}\n", i, last, to_seconds(sel.section_compute[u]) * 1e3,
               sel.model.cutpoint(i).activation_bytes, op_name(last));
  }
  for (const auto& x : sel.shared_crossings)
    fmt::print(ctx.out, "shared group '{}' crosses the cut after op {}\n", x.group, x.boundary);
  ctx.header(fmt::format("{:>5} {:>11} {:>12} {:>12}", "stage", "cut-points", "params", "forward_ms"));
  for (int i = 0; i < s.stages(); ++i) {
    const auto u = static_cast<size_t>(i);
    fmt::print(ctx.out, "{:>5} {:>11} {:>12} {:>12.3f}\n", i + 1,
               fmt::format("{}-{}", s.ranges[u].first, s.ranges[u].second), s.stage_params[u],
               to_seconds(s.stage_forward[u]) * 1e3);
  }
  return 0;
}

// -- calibrate-synth ----------------------------------------------------------------

struct SynthArgs {
  std::string config, out_file, m_grid;
  int d_max = 0;
  bool json = false;
};

int cmd_synth(const SynthArgs& a, const Ctx& ctx) {
  const JobConfig job = load_job(a.config);
  SynthesisSettings s = job.synthesis.value_or(SynthesisSettings{{1, 2, 4, 8, 16}, {}, {}});
  if (!a.m_grid.empty()) {
    s.m_grid.clear();
    for (double v : parse_scales(a.m_grid)) {
      if (v < 1 || v != static_cast<int>(v)) throw InputError(fmt::format("--m-grid: '{}' is not a positive integer", v));
      s.m_grid.push_back(static_cast<int>(v));
    }
  }
  if (a.d_max > 0 || s.d_grid.empty()) {
    const int d_max = a.d_max > 0 ? a.d_max : std::max(64, job.cluster.total_gpus());
    s.d_grid.clear();
    for (int d = 1; d <= d_max; ++d) s.d_grid.push_back(d);
  }
  const CalibrationProfile p = synthesize_profile(job.model, job.hw, s.m_grid, s.d_grid, s.options);
  write_profile(p, std::filesystem::path(a.out_file));
  if (a.json) {
    ctx.emit({{"profile_file", a.out_file},
              {"cutpoints", p.num_cutpoints()},
              {"m_grid", p.m_grid()},
              {"d_grid_size", p.d_grid().size()},
              {"format_version", kFormatVersion}});
  } else {
    fmt::print(ctx.out, "wrote {}: {} cut-points, m grid [{}], ring sizes 1..{}\n", a.out_file, p.num_cutpoints(),
               fmt::join(p.m_grid(), ", "), p.d_grid().back());
  }
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err, const CliEnvironment& env) {
  CLI::App app{"Pipeline-parallel training planner and simulator", "pipeplan"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string("pipeplan ") + version());

  PlanArgs plan_a;
  auto* plan_cmd = app.add_subcommand("plan", "Choose P x D for G GPUs and write the chosen config file");
  plan_cmd->add_option("--spec", plan_a.spec, "Job file")->required();
  plan_cmd->add_option("--gpus,-G", plan_a.gpus, "GPUs available (default: the job's cluster)");
  plan_cmd->add_option("--out,-o", plan_a.out_file, "Chosen config file (default: <spec>.chosen.json)");
  plan_cmd->add_option("--schedule", plan_a.schedule, "varuna or gpipe")->check(CLI::IsMember({"varuna", "gpipe"}));
  plan_cmd->add_option("--seed", plan_a.seed, "Network jitter seed");
  plan_cmd->add_option("--threads", plan_a.threads, "Simulation threads (default: all cores)");
  plan_cmd->add_flag("--json", plan_a.json, "Machine-readable output");

  SimArgs sim_a;
  auto* sim_cmd = app.add_subcommand("simulate", "Simulate one mini-batch of the configured job");
  sim_cmd->add_option("--config", sim_a.config, "Job file with a config section")->required();
  sim_cmd->add_option("--schedule", sim_a.schedule, "varuna or gpipe")->check(CLI::IsMember({"varuna", "gpipe"}));
  sim_cmd->add_option("--seed", sim_a.seed, "Network jitter seed");
  sim_cmd->add_option("--gantt", sim_a.gantt, "Also write a Gantt chart (.svg or .csv)");
  sim_cmd->add_option("--format", sim_a.format, "Gantt format")->check(CLI::IsMember({"svg", "csv"}));
  sim_cmd->add_option("--replica", sim_a.replica, "Replica drawn in the Gantt chart");
  sim_cmd->add_option("--event-log", sim_a.event_log, "Write the event log here");
  sim_cmd->add_flag("--no-opportunistic", sim_a.no_opportunistic, "Follow the static schedule strictly");
  sim_cmd->add_flag("--json", sim_a.json, "Machine-readable output");

  SimArgs gantt_a;
  auto* gantt_cmd = app.add_subcommand("gantt", "Render the Gantt chart of one simulated mini-batch");
  gantt_cmd->add_option("--config", gantt_a.config, "Job file with a config section")->required();
  gantt_cmd->add_option("--out,-o", gantt_a.gantt, "Output file (.svg or .csv)")->required();
  gantt_cmd->add_option("--format", gantt_a.format, "svg or csv")->check(CLI::IsMember({"svg", "csv"}));
  gantt_cmd->add_option("--schedule", gantt_a.schedule, "varuna or gpipe")->check(CLI::IsMember({"varuna", "gpipe"}));
  gantt_cmd->add_option("--seed", gantt_a.seed, "Network jitter seed");
  gantt_cmd->add_option("--replica", gantt_a.replica, "Replica to draw");
  gantt_cmd->add_flag("--no-opportunistic", gantt_a.no_opportunistic, "Follow the static schedule strictly");
  gantt_cmd->add_flag("--json", gantt_a.json, "Machine-readable output");

  CompareArgs cmp_a;
  auto* cmp_cmd = app.add_subcommand("compare", "Varuna vs GPipe throughput across inter-node bandwidths");
  cmp_cmd->add_option("--config", cmp_a.config, "Job file with a config section (default: 8.3B model at 19x3)");
  cmp_cmd->add_option("--bandwidth-scale", cmp_a.scales, "Comma-separated inter-node bandwidth multipliers");
  cmp_cmd->add_option("--seed", cmp_a.seed, "Network jitter seed");
  cmp_cmd->add_flag("--json", cmp_a.json, "Machine-readable output");

  ReplayArgs rep_a;
  auto* rep_cmd = app.add_subcommand("replay", "Replay a preemption trace against the job");
  rep_cmd->add_option("--config", rep_a.config, "Job file with a cluster section")->required();
  rep_cmd->add_option("--trace", rep_a.trace, "Trace file")->required();
  rep_cmd->add_option("--csv", rep_a.csv, "Write the timeline CSV here");
  rep_cmd->add_option("--svg", rep_a.svg, "Write the throughput plot here");
  rep_cmd->add_option("--seed", rep_a.seed, "Network jitter seed");
  rep_cmd->add_option("--threads", rep_a.threads, "Planner threads (default: all cores)");
  rep_cmd->add_flag("--json", rep_a.json, "Machine-readable output");

  PartitionArgs part_a;
  auto* part_cmd = app.add_subcommand("partition", "Pick K cut-points from an op profile and group them into P stages");
  part_cmd->add_option("--ops", part_a.ops, "Op profile file")->required();
  part_cmd->add_option("-K", part_a.k, "Number of cut-points")->required();
  part_cmd->add_option("-P", part_a.p, "Number of stages")->required();
  part_cmd->add_option("--m", part_a.m, "Micro-batch size used for balancing");
  part_cmd->add_option("--tolerance", part_a.tolerance, "Allowed slack over the best max-section time");
  part_cmd->add_flag("--json", part_a.json, "Machine-readable output");

  SynthArgs syn_a;
  auto* syn_cmd = app.add_subcommand("calibrate-synth", "Write an analytic calibration profile for the job's model");
  syn_cmd->add_option("--config", syn_a.config, "Job file (model, hardware, optional synthesis)")->required();
  syn_cmd->add_option("--out,-o", syn_a.out_file, "Profile file to write")->required();
  syn_cmd->add_option("--m-grid", syn_a.m_grid, "Comma-separated micro-batch sizes");
  syn_cmd->add_option("--d-max", syn_a.d_max, "Largest ring size profiled");
  syn_cmd->add_flag("--json", syn_a.json, "Machine-readable output");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  const Ctx ctx{out, env};
  try {
    if (plan_cmd->parsed()) return cmd_plan(plan_a, ctx);
    if (sim_cmd->parsed()) return cmd_simulate(sim_a, ctx);
    if (gantt_cmd->parsed()) return cmd_gantt(gantt_a, ctx);
    if (cmp_cmd->parsed()) return cmd_compare(cmp_a, ctx);
    if (rep_cmd->parsed()) return cmd_replay(rep_a, ctx);
    if (part_cmd->parsed()) return cmd_partition(part_a, ctx);
    if (syn_cmd->parsed()) return cmd_synth(syn_a, ctx);
  } catch (const InfeasibleError& e) {
    fmt::print(err, "error: {}\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    fmt::print(err, "error: {}\n", e.what());
    return 2;
  }
  return 2;
}

}  // namespace pipeplan
