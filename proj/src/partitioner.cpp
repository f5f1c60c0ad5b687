// Copyright 2026 The pipeplan Authors
// SPDX-License-Identifier: Apache-2.0

#include "pipeplan/partitioner.hpp"

#include <algorithm>
#include <limits>
#include <map>
#include <numeric>

#include <fmt/core.h>

namespace pipeplan {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Contiguous partitioning of a weighted sequence. A section [i, e] ends at
// item e; cutting after item e is only possible where allowed[e] is true.
class LinearPartition {
 public:
  LinearPartition(std::vector<std::int64_t> times, std::vector<Bytes> activation,
                  std::vector<bool> allowed, double last_weight)
      : n_(static_cast<int>(times.size())),
        prefix_(times.size() + 1, 0),
        activation_(std::move(activation)),
        allowed_(std::move(allowed)),
        last_weight_(last_weight) {
    std::partial_sum(times.begin(), times.end(), prefix_.begin() + 1);
  }

  double load(int first, int last, bool final_section) const {
    const auto sum = static_cast<double>(prefix_[static_cast<size_t>(last + 1)] -
                                         prefix_[static_cast<size_t>(first)]);
    return final_section ? sum * last_weight_ : sum;
  }

  // Smallest achievable largest section load, or +inf.
  double min_max(int sections) const {
    std::vector<double> prev(static_cast<size_t>(n_ + 1), kInf), cur(prev.size(), kInf);
    prev[static_cast<size_t>(n_)] = 0;
    for (int c = 1; c <= sections; ++c) {
      std::fill(cur.begin(), cur.end(), kInf);
      for (int i = n_ - c; i >= 0; --i) {
        double best = kInf;
        for_each_end(i, c, [&](int e) {
          const double rest = prev[static_cast<size_t>(e + 1)];
          if (rest < kInf) best = std::min(best, std::max(load(i, e, c == 1), rest));
        });
        cur[static_cast<size_t>(i)] = best;
      }
      std::swap(prev, cur);
    }
    return prev[0];
  }

  // Boundaries minimizing (total boundary activation, largest load) with
  // every section load <= limit; earliest boundaries on ties. Empty optional
  // when no partition meets the limit.
  std::optional<std::vector<int>> min_activation(int sections, double limit) const {
    const auto best = solve(sections, limit, false);
    if (!best) return std::nullopt;
    // Every partition with the optimal activation and loads within the
    // optimal max load ties; the activation-only pass finds the earliest.
    return solve(sections, best->second, true)->first;
  }

 private:
  // Returns the boundaries and the max load of the optimum.
  std::optional<std::pair<std::vector<int>, double>> solve(int sections, double limit, bool activation_only) const {
    struct Value {
      std::int64_t activation = std::numeric_limits<std::int64_t>::max();
      double max_load = kInf;
      bool valid() const { return max_load < kInf; }
    };
    auto less = [&](const Value& a, const Value& b) {
      if (activation_only) return a.activation < b.activation;
      return std::tie(a.activation, a.max_load) < std::tie(b.activation, b.max_load);
    };
    auto same = [&](const Value& a, const Value& b) { return !less(a, b) && !less(b, a); };
    const auto width = static_cast<size_t>(n_ + 1);
    std::vector<std::vector<Value>> table(static_cast<size_t>(sections + 1), std::vector<Value>(width));
    table[0][static_cast<size_t>(n_)] = Value{0, 0};

    auto combine = [&](int i, int e, int c) {
      Value out;
      const Value& rest = table[static_cast<size_t>(c - 1)][static_cast<size_t>(e + 1)];
      const double l = load(i, e, c == 1);
      if (!rest.valid() || l > limit) return out;
      out.activation = rest.activation + (c == 1 ? 0 : activation_[static_cast<size_t>(e)]);
      out.max_load = std::max(l, rest.max_load);
      return out;
    };

    for (int c = 1; c <= sections; ++c) {
      for (int i = n_ - c; i >= 0; --i) {
        Value best;
        for_each_end(i, c, [&](int e) {
          const Value v = combine(i, e, c);
          if (v.valid() && (!best.valid() || less(v, best))) best = v;
        });
        table[static_cast<size_t>(c)][static_cast<size_t>(i)] = best;
      }
    }
    if (!table[static_cast<size_t>(sections)][0].valid()) return std::nullopt;

    std::vector<int> boundaries;
    int i = 0;
    for (int c = sections; c > 1; --c) {
      const Value target = table[static_cast<size_t>(c)][static_cast<size_t>(i)];
      int chosen = -1;
      for_each_end(i, c, [&](int e) {
        if (chosen >= 0) return;
        const Value v = combine(i, e, c);
        if (v.valid() && same(v, target)) chosen = e;
      });
      boundaries.push_back(chosen);
      i = chosen + 1;
    }
    return std::make_pair(boundaries, table[static_cast<size_t>(sections)][0].max_load);
  }

  template <typename Fn>
  void for_each_end(int i, int c, Fn&& fn) const {
    if (c == 1) {
      fn(n_ - 1);
      return;
    }
    for (int e = i; e <= n_ - c; ++e)
      if (allowed_[static_cast<size_t>(e)]) fn(e);
  }

  int n_;
  std::vector<std::int64_t> prefix_;
  std::vector<Bytes> activation_;
  std::vector<bool> allowed_;
  double last_weight_;
};

}  // namespace

void OpProfile::validate() const {
  if (ops.empty()) throw InputError("ops: at least one operation is required");
  for (size_t i = 0; i < ops.size(); ++i) {
    const auto& op = ops[i];
    if (op.compute.count() < 0) throw InputError(fmt::format("ops[{}].compute_us: must be >= 0", i));
    if (op.output_activation_bytes < 0)
      throw InputError(fmt::format("ops[{}].output_activation_bytes: must be >= 0", i));
    if (op.params < 0) throw InputError(fmt::format("ops[{}].params: must be >= 0", i));
  }
}

CutpointSelection identify_cutpoints(const OpProfile& profile, int k, double tolerance,
                                     const std::string& model_name) {
  profile.validate();
  const int n = static_cast<int>(profile.ops.size());
  if (k < 1) throw InputError("K must be >= 1");
  if (k > n) throw InputError(fmt::format("K = {} exceeds the {} profiled operations", k, n));
  if (!(tolerance >= 0)) throw InputError("cut-point tolerance must be >= 0");

  std::map<std::string, std::pair<int, int>> span;
  for (int i = 0; i < n; ++i) {
    for (const auto& g : profile.ops[static_cast<size_t>(i)].param_groups) {
      auto [it, fresh] = span.try_emplace(g, i, i);
      if (!fresh) it->second.second = i;
    }
  }
  std::vector<bool> allowed(static_cast<size_t>(n), true);
  for (const auto& [group, range] : span) {
    if (profile.shared_groups.count(group)) continue;
    for (int b = range.first; b < range.second; ++b) allowed[static_cast<size_t>(b)] = false;
  }

  std::vector<std::int64_t> times;
  std::vector<Bytes> act;
  for (const auto& op : profile.ops) {
    times.push_back(op.compute.count());
    act.push_back(op.output_activation_bytes);
  }
  const LinearPartition lp(times, act, allowed, 1.0);
  const double best = lp.min_max(k);
  if (best == kInf) {
    throw InfeasibleError(fmt::format(
        "no way to cut {} operations into {} sections without splitting an unshared parameter group", n, k));
  }
  const auto boundaries = lp.min_activation(k, best * (1.0 + tolerance));

  CutpointSelection out{ModelSpec(model_name, {Cutpoint{1, 1}}), *boundaries, {}, {}};
  std::vector<Cutpoint> cuts;
  int first = 0;
  for (int s = 0; s < k; ++s) {
    const int last = s + 1 < k ? (*boundaries)[static_cast<size_t>(s)] : n - 1;
    Cutpoint c{0, profile.ops[static_cast<size_t>(last)].output_activation_bytes};
    Duration compute{0};
    for (int i = first; i <= last; ++i) {
      c.params += profile.ops[static_cast<size_t>(i)].params;
      compute += profile.ops[static_cast<size_t>(i)].compute;
    }
    if (c.params == 0)
      throw InputError(fmt::format("section {} (ops {}..{}) owns no parameters", s, first, last));
    if (c.activation_bytes == 0)
      throw InputError(fmt::format("section {} ends at op {} with a zero-size output", s, last));
    cuts.push_back(c);
    out.section_compute.push_back(compute);
    first = last + 1;
  }
  out.model = ModelSpec(model_name, std::move(cuts));
  for (int b : out.boundaries) {
    for (const auto& [group, range] : span) {
      if (profile.shared_groups.count(group) && range.first <= b && b < range.second)
        out.shared_crossings.push_back({group, b});
    }
  }
  return out;
}

std::vector<int> StageAssignment::stage_map() const {
  std::vector<int> map;
  for (size_t s = 0; s < ranges.size(); ++s)
    map.insert(map.end(), static_cast<size_t>(ranges[s].second - ranges[s].first + 1), static_cast<int>(s));
  return map;
}

namespace {

StageAssignment build_assignment(const ModelSpec& model, std::vector<std::pair<int, int>> ranges, int m,
                                 const CalibrationProfile& profile) {
  if (profile.num_cutpoints() != model.num_cutpoints()) {
    throw InputError(fmt::format("profile has {} cut-points but the model has {}", profile.num_cutpoints(),
                                 model.num_cutpoints()));
  }
  StageAssignment a;
  a.ranges = std::move(ranges);
  for (size_t s = 0; s < a.ranges.size(); ++s) {
    const auto [first, last] = a.ranges[s];
    std::int64_t params = 0;
    Duration fwd{0}, bwd{0};
    Bytes working = 0;
    for (int i = first; i <= last; ++i) {
      params += model.cutpoint(i).params;
      fwd += profile.forward(i, m);
      bwd += profile.backward(i, m);
      working += model.cutpoint(i).activation_bytes;
    }
    a.stage_params.push_back(params);
    a.stage_forward.push_back(fwd);
    a.stage_backward.push_back(bwd);
    a.working_activation.push_back(working);
    a.input_activation.push_back(first == 0 ? model.input_activation_bytes()
                                            : model.cutpoint(first - 1).activation_bytes);
    a.output_activation.push_back(s + 1 == a.ranges.size() ? 0 : model.cutpoint(last).activation_bytes);
  }
  return a;
}

}  // namespace

StageAssignment assign_stages(const ModelSpec& model, int stages, int m, const CalibrationProfile& profile,
                              const BalanceOptions& options) {
  const int k = model.num_cutpoints();
  if (stages < 1) throw InputError("P must be >= 1");
  if (stages > k) throw InputError(fmt::format("P = {} exceeds the {} cut-points", stages, k));
  if (!(options.last_stage_weight > 0)) throw InputError("last stage weight must be positive");

  std::vector<std::int64_t> times;
  std::vector<Bytes> act;
  for (int i = 0; i < k; ++i) {
    times.push_back(profile.forward(i, m).count());
    act.push_back(model.cutpoint(i).activation_bytes);
  }
  const LinearPartition lp(times, act, std::vector<bool>(static_cast<size_t>(k), true),
                           options.last_stage_weight);
  const auto boundaries = lp.min_activation(stages, lp.min_max(stages));

  std::vector<std::pair<int, int>> ranges;
  int first = 0;
  for (int b : *boundaries) {
    ranges.emplace_back(first, b);
    first = b + 1;
  }
  ranges.emplace_back(first, k - 1);
  return build_assignment(model, std::move(ranges), m, profile);
}

StageAssignment assignment_from_map(const ModelSpec& model, const std::vector<int>& stage_map, int m,
                                    const CalibrationProfile& profile) {
  ParallelConfig c;
  c.stage_map = stage_map;
  c.stages = stage_map.empty() ? 0 : stage_map.back() + 1;
  auto ranges = c.stage_ranges();
  if (static_cast<int>(stage_map.size()) != model.num_cutpoints() || ranges.empty())
    throw InputError("stage_map must assign every cut-point to stages 0..P-1 contiguously and in order");
  return build_assignment(model, std::move(ranges), m, profile);
}

bool MemoryReport::feasible() const {
  return std::all_of(stages.begin(), stages.end(), [](const StageMemory& s) { return s.feasible; });
}

MemoryReport memory_check(const StageAssignment& a, int m, int micro_batches, const HardwareSpec& hw,
                          const MemoryOptions& options) {
  MemoryReport r;
  for (int s = 0; s < a.stages(); ++s) {
    const auto ss = static_cast<size_t>(s);
    const int in_flight = options.in_flight.empty() ? micro_batches : options.in_flight.at(ss);
    StageMemory mem;
    mem.param_state = static_cast<Bytes>(options.bytes_per_param_state) * a.stage_params[ss];
    mem.stashed_activations = static_cast<Bytes>(in_flight) * m * a.input_activation[ss];
    mem.working_set = static_cast<Bytes>(m) * a.working_activation[ss];
    mem.total = mem.param_state + mem.stashed_activations + mem.working_set;
    mem.headroom = hw.gpu_memory - mem.total;
    mem.feasible = mem.total <= hw.gpu_memory;
    r.stages.push_back(mem);
  }
  return r;
}

}  // namespace pipeplan
