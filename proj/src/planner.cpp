// Copyright 2026 The pipeplan Authors
// SPDX-License-Identifier: Apache-2.0

#include "pipeplan/planner.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <thread>

#include <fmt/core.h>

namespace pipeplan {
namespace {

double mean_forward_per_example(const CalibrationProfile& profile, int m) {
  double sum = 0;
  for (int i = 0; i < profile.num_cutpoints(); ++i) sum += static_cast<double>(profile.forward(i, m).count());
  return sum / profile.num_cutpoints() / m;
}

Schedule make_schedule(SchedulePolicy policy, int stages, int micro_batches) {
  return policy == SchedulePolicy::Varuna ? generate_varuna_schedule(stages, micro_batches)
                                          : generate_gpipe_schedule(stages, micro_batches);
}

ParallelConfig make_config(int stages, int replicas, int m, const JobSpec& job, const StageAssignment& a) {
  ParallelConfig c;
  c.stages = stages;
  c.replicas = replicas;
  c.micro_batch_size = m;
  c.micro_batches = micro_batches_for(job.minibatch_size, m, replicas);
  c.stage_map = a.stage_map();
  return c;
}

int usable_gpus(const ClusterState& cluster, const std::set<std::string>& excluded) {
  int n = 0;
  for (const auto& vm : cluster.vms())
    if (!excluded.count(vm.id)) n += vm.gpus;
  return n;
}

// Runs fn(i) for i in [0, n) on up to `threads` workers; the first
// exception is rethrown after all workers stop.
template <class Fn>
void parallel_for(size_t n, int threads, Fn fn) {
  size_t workers = threads > 0 ? static_cast<size_t>(threads) : std::max(1u, std::thread::hardware_concurrency());
  workers = std::min(workers, n);
  if (workers <= 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (size_t i = next++; i < n && !failed; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
          failed = true;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace

int select_microbatch(const CalibrationProfile& profile, double improvement_threshold,
                      const std::function<bool(int)>& fits) {
  const auto& grid = profile.m_grid();
  if (grid.empty()) throw InputError("select_microbatch: profile m grid is empty");
  if (improvement_threshold < 0) throw InputError("select_microbatch: improvement threshold must be >= 0");
  for (size_t k = 0; k + 1 < grid.size(); ++k) {
    const double now = mean_forward_per_example(profile, grid[k]);
    const double next = mean_forward_per_example(profile, grid[k + 1]);
    if (next >= now * (1.0 - improvement_threshold)) {
      if (!fits || fits(grid[k])) return grid[k];
      break;
    }
  }
  for (auto it = grid.rbegin(); it != grid.rend(); ++it)
    if (!fits || fits(*it)) return *it;
  throw InfeasibleError("no feasible configuration: no profiled micro-batch size fits in GPU memory");
}

MemoryReport config_memory(const PlanContext& ctx, const ParallelConfig& config, const StageAssignment& a,
                           SchedulePolicy policy) {
  MemoryOptions mem;
  mem.bytes_per_param_state = ctx.profile.bytes_per_param_state();
  mem.in_flight = max_in_flight(make_schedule(policy, config.stages, config.micro_batches));
  return memory_check(a, config.micro_batch_size, config.micro_batches, ctx.hw, mem);
}

PlanCandidate evaluate_config(const PlanContext& ctx, int gpus, const ParallelConfig& config,
                              const StageAssignment& assignment, const PlannerOptions& options) {
  const Schedule schedule = make_schedule(options.policy, config.stages, config.micro_batches);
  Placement placement = Placement::packed(ctx.cluster, config.stages, config.replicas, options.excluded_vms);
  if (!options.compute_scale.empty()) {
    for (int r = 0; r < config.replicas; ++r) {
      for (int s = 0; s < config.stages; ++s) {
        auto& slot = placement.slot(s, r);
        if (auto it = options.compute_scale.find(slot.vm_id); it != options.compute_scale.end())
          slot.compute_scale = it->second;
      }
    }
  }
  const auto sim = simulate_minibatch(schedule, config, ctx.model, ctx.profile, placement, options.simulation);
  PlanCandidate c;
  c.config = config;
  c.assignment = assignment;
  c.minibatch_time = sim.minibatch_time;
  const double seconds = to_seconds(sim.minibatch_time);
  c.examples_per_second = seconds > 0 ? static_cast<double>(ctx.job.minibatch_size) / seconds : 0;
  c.examples_per_second_per_gpu = gpus > 0 ? c.examples_per_second / gpus : 0;
  c.examples_per_second_per_used_gpu = c.examples_per_second / config.gpus_used();
  return c;
}

PlanResult plan(int gpus, const ModelSpec& model, const JobSpec& job, const CalibrationProfile& profile,
                const HardwareSpec& hw, const ClusterState& cluster, const PlannerOptions& options) {
  if (gpus < 1) throw InfeasibleError(fmt::format("no feasible configuration: {} GPUs available", gpus));
  job.validate();
  hw.validate();
  if (profile.num_cutpoints() != model.num_cutpoints()) {
    throw InputError(fmt::format("profile has {} cut-points but model '{}' has {}", profile.num_cutpoints(),
                                 model.name(), model.num_cutpoints()));
  }

  const ClusterState synthetic = cluster.vms().empty() ? ClusterState::packed(gpus, hw.gpus_per_node) : ClusterState{};
  const ClusterState& where = cluster.vms().empty() ? synthetic : cluster;
  if (usable_gpus(where, options.excluded_vms) < gpus) {
    throw InputError(fmt::format("cluster has {} usable GPUs, fewer than the requested G = {}",
                                 usable_gpus(where, options.excluded_vms), gpus));
  }
  const PlanContext ctx{model, job, profile, hw, where};
  const int max_p = std::min(model.num_cutpoints(), gpus);

  struct Shape {
    ParallelConfig config;
    StageAssignment assignment;
  };
  const auto shape = [&](int p, int m) {
    const int d = gpus / p;
    StageAssignment a = assign_stages(model, p, m, profile, options.balance);
    ParallelConfig c = make_config(p, d, m, job, a);
    return Shape{std::move(c), std::move(a)};
  };
  const auto fits = [&](int p, int m) {
    const Shape s = shape(p, m);
    return config_memory(ctx, s.config, s.assignment, options.policy).feasible();
  };

  PlanResult result;
  result.gpus = gpus;
  result.micro_batch_size =
      options.micro_batch_size
          ? *options.micro_batch_size
          : select_microbatch(profile, options.improvement_threshold, [&](int m) {
              for (int p = 1; p <= max_p; ++p)
                if (fits(p, m)) return true;
              return false;
            });
  const int m = result.micro_batch_size;

  std::vector<Shape> shapes;
  for (int p = 1; p <= max_p; ++p) {
    Shape s = shape(p, m);
    if (!config_memory(ctx, s.config, s.assignment, options.policy).feasible()) continue;
    if (shapes.empty()) result.min_stages = p;
    shapes.push_back(std::move(s));
  }
  if (shapes.empty()) {
    throw InfeasibleError(fmt::format(
        "no feasible configuration: model '{}' does not fit in {} bytes of GPU memory at any P <= {} (m = {})",
        model.name(), hw.gpu_memory, max_p, m));
  }

  result.candidates.resize(shapes.size());
  parallel_for(shapes.size(), options.threads, [&](size_t i) {
    result.candidates[i] = evaluate_config(ctx, gpus, shapes[i].config, shapes[i].assignment, options);
  });

  // Candidates are in ascending P with D = floor(G / P), so the first
  // minimum is also the smaller-P, larger-D tie winner.
  for (size_t i = 1; i < result.candidates.size(); ++i)
    if (result.candidates[i].minibatch_time < result.candidates[result.chosen].minibatch_time) result.chosen = i;
  return result;
}

}  // namespace pipeplan
