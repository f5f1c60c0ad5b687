// Copyright 2026 The pipeplan Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <numeric>
#include <sstream>

#include <gtest/gtest.h>

#include "pipeplan/scheduler.hpp"

namespace pipeplan {
namespace {

Task F(int j, int k) { return {TaskKind::Forward, j, k}; }
Task B(int j, int k) { return {TaskKind::Backward, j, k}; }
Task R(int j, int k) { return {TaskKind::Recompute, j, k}; }

std::string render(const std::vector<Task>& tasks) {
  std::string out;
  for (const auto& t : tasks) {
    if (!out.empty()) out += ' ';
    out += to_char(t.kind) + std::to_string(t.micro_batch);
  }
  return out;
}

// Lengths of idle gaps strictly between a stage's first task start and last
// task end.
std::vector<long> internal_gaps(const std::vector<TimedTask>& timed) {
  std::vector<std::pair<long, long>> iv;
  for (const auto& t : timed) iv.emplace_back(t.start.count(), t.end.count());
  std::sort(iv.begin(), iv.end());
  std::vector<long> gaps;
  for (size_t i = 1; i < iv.size(); ++i)
    if (iv[i].first > iv[i - 1].second) gaps.push_back(iv[i].first - iv[i - 1].second);
  return gaps;
}

TEST(Varuna, SingleStageSingleMicroBatch) {
  const auto s = generate_varuna_schedule(1, 1);
  EXPECT_EQ(render(s.stage_tasks(1)), "F1 B1");
  EXPECT_EQ(replay_zero_delay(s).makespan.count(), 3);
}

TEST(Varuna, FourStagesFiveMicroBatchesOneUnitFaster) {
  const auto v = generate_varuna_schedule(4, 5);
  const auto g = generate_gpipe_schedule(4, 5);
  const auto vm = replay_zero_delay(v).makespan.count();
  const auto gm = replay_zero_delay(g).makespan.count();
  EXPECT_EQ(vm, gm - 1);
  EXPECT_EQ(render(v.stage_tasks(4)), "F1 B1 F2 B2 F3 B3 F4 B4 F5 B5");
  EXPECT_EQ(render(v.stage_tasks(3)), "F1 F2 F3 R1 B1 R2 B2 R3 B3 F4 F5 R4 B4 R5 B5");
}

TEST(Varuna, TwoByTwoIsOptimalAmongRuleAbidingOrders) {
  const auto s = generate_varuna_schedule(2, 2);
  EXPECT_EQ(render(s.stage_tasks(2)), "F1 B1 F2 B2");
  ASSERT_TRUE(validate_schedule(s).empty());
  const auto generated = replay_zero_delay(s).makespan;

  // Every permutation of stage 1's six tasks, stage 2 fixed.
  std::vector<Task> tasks = {F(1, 1), F(2, 1), R(1, 1), R(2, 1), B(1, 1), B(2, 1)};
  std::sort(tasks.begin(), tasks.end(), [](const Task& a, const Task& b) {
    return std::tie(a.kind, a.micro_batch) < std::tie(b.kind, b.micro_batch);
  });
  Duration best = Duration::max();
  bool generated_found = false;
  do {
    Schedule c = s;
    c.per_stage[0] = tasks;
    try {
      if (!validate_schedule(c).empty()) continue;
    } catch (const InputError&) {
      continue;  // deadlocks
    }
    best = std::min(best, replay_zero_delay(c).makespan);
    if (c.per_stage[0] == s.per_stage[0]) generated_found = true;
  } while (std::next_permutation(tasks.begin(), tasks.end(), [](const Task& a, const Task& b) {
    return std::tie(a.kind, a.micro_batch) < std::tie(b.kind, b.micro_batch);
  }));
  EXPECT_TRUE(generated_found);
  EXPECT_EQ(generated, best);
}

TEST(GPipe, SingleStage) {
  EXPECT_EQ(render(generate_gpipe_schedule(1, 1).stage_tasks(1)), "F1 B1");
}

TEST(GPipe, ForwardsBunchedAtStart) {
  const auto g = generate_gpipe_schedule(4, 5);
  for (int k = 1; k <= 4; ++k) {
    const auto& t = g.stage_tasks(k);
    for (int i = 0; i < 5; ++i) EXPECT_EQ(t[static_cast<size_t>(i)].kind, TaskKind::Forward);
  }
  EXPECT_FALSE(g.has_recompute(4, 5));
  EXPECT_TRUE(g.has_recompute(4, 4));
}

TEST(Sweep, VarunaNeverSlowerAndAlwaysValid) {
  for (int p = 1; p <= 8; ++p) {
    for (int n = 1; n <= 16; ++n) {
      const auto v = generate_varuna_schedule(p, n);
      const auto g = generate_gpipe_schedule(p, n);
      EXPECT_LE(replay_zero_delay(v).makespan, replay_zero_delay(g).makespan) << p << "x" << n;
      EXPECT_TRUE(validate_schedule(v).empty()) << p << "x" << n;
    }
  }
}

TEST(Sweep, StructureOfVarunaSchedules) {
  for (int p = 1; p <= 6; ++p) {
    for (int n = 1; n <= 10; ++n) {
      const auto v = generate_varuna_schedule(p, n);
      for (int k = 1; k <= p; ++k) {
        const auto& t = v.stage_tasks(k);
        const auto count = [&](TaskKind kind) {
          return std::count_if(t.begin(), t.end(), [&](const Task& x) { return x.kind == kind; });
        };
        EXPECT_EQ(count(TaskKind::Forward), n);
        EXPECT_EQ(count(TaskKind::Backward), n);
        EXPECT_EQ(count(TaskKind::Recompute), k == p ? 0 : n);
      }
    }
  }
}

TEST(Sweep, DependenciesRespectedInReplay) {
  for (int p = 1; p <= 6; ++p) {
    for (int n = 1; n <= 10; ++n) {
      const auto v = generate_varuna_schedule(p, n);
      const auto tl = replay_zero_delay(v);
      for (int k = 1; k <= p; ++k) {
        for (int j = 1; j <= n; ++j) {
          if (k > 1) EXPECT_GE(tl.find(F(j, k)).start, tl.find(F(j, k - 1)).end);
          if (k < p) {
            EXPECT_GE(tl.find(B(j, k)).start, tl.find(B(j, k + 1)).end);
            EXPECT_GE(tl.find(B(j, k)).start, tl.find(R(j, k)).end);
          }
        }
      }
    }
  }
}

// A working set exists while a forward runs, or from the start of a
// recompute until its backward ends (from forward start at the last stage).
TEST(Sweep, AtMostTwoWorkingSetsPerStage) {
  for (int p = 1; p <= 8; ++p) {
    for (int n = 1; n <= 16; ++n) {
      const auto v = generate_varuna_schedule(p, n);
      const auto tl = replay_zero_delay(v);
      for (int k = 1; k <= p; ++k) {
        std::vector<std::pair<long, int>> edges;
        for (int j = 1; j <= n; ++j) {
          const auto& f = tl.find(F(j, k));
          const auto& b = tl.find(B(j, k));
          if (k == p) {
            edges.emplace_back(f.start.count(), +1);
            edges.emplace_back(b.end.count(), -1);
          } else {
            edges.emplace_back(f.start.count(), +1);
            edges.emplace_back(f.end.count(), -1);
            edges.emplace_back(tl.find(R(j, k)).start.count(), +1);
            edges.emplace_back(b.end.count(), -1);
          }
        }
        std::sort(edges.begin(), edges.end());  // ends before starts at equal times
        int live = 0, peak = 0;
        for (const auto& e : edges) peak = std::max(peak, live += e.second);
        EXPECT_LE(peak, 2) << p << "x" << n << " stage " << k;
      }
    }
  }
}

// Idle time inside Varuna's interior stages is never more concentrated than
// GPipe's, and when it is split over three or more gaps no single gap holds
// more than half of it.
TEST(Sweep, IdleTimeIsDistributed) {
  for (int p = 3; p <= 8; ++p) {
    for (int n = 2 * p; n <= 16; ++n) {
      const auto vt = replay_zero_delay(generate_varuna_schedule(p, n));
      const auto gt = replay_zero_delay(generate_gpipe_schedule(p, n));
      for (int k = 2; k < p; ++k) {
        const auto vg = internal_gaps(vt.per_stage[static_cast<size_t>(k - 1)]);
        const auto gg = internal_gaps(gt.per_stage[static_cast<size_t>(k - 1)]);
        const long vmax = vg.empty() ? 0 : *std::max_element(vg.begin(), vg.end());
        const long gmax = gg.empty() ? 0 : *std::max_element(gg.begin(), gg.end());
        EXPECT_LE(vmax, gmax) << p << "x" << n << " stage " << k;
        if (vg.size() >= 3) {
          const long total = std::accumulate(vg.begin(), vg.end(), 0L);
          EXPECT_LE(2 * vmax, total) << p << "x" << n << " stage " << k;
        }
      }
    }
  }
}

TEST(Validate, ForwardBetweenRecomputeAndBackwardIsRuleTwo) {
  auto s = generate_varuna_schedule(2, 2);
  s.per_stage[0] = {F(1, 1), R(1, 1), F(2, 1), B(1, 1), R(2, 1), B(2, 1)};
  const auto v = validate_schedule(s);
  ASSERT_FALSE(v.empty());
  EXPECT_TRUE(std::any_of(v.begin(), v.end(), [](const RuleViolation& x) {
    return x.rule == 2 && x.stage == 1 && x.micro_batch == 1;
  }));
}

TEST(Validate, ForwardWhileBackwardReadyIsRuleThree) {
  auto s = generate_varuna_schedule(1, 2);
  s.per_stage[0] = {F(1, 1), F(2, 1), B(1, 1), B(2, 1)};
  const auto v = validate_schedule(s);
  ASSERT_EQ(v.size(), 1u);
  EXPECT_EQ(v[0].rule, 3);
  EXPECT_EQ(v[0].micro_batch, 1);
}

TEST(Validate, LateRecomputeIsRuleOne) {
  // Stage 1 recomputes micro-batch 1 only after stage 2 already sent its
  // gradient.
  auto s = generate_varuna_schedule(2, 1);
  ASSERT_EQ(render(s.stage_tasks(1)), "F1 R1 B1");
  s.times.recompute = Duration{10};
  const auto v = validate_schedule(s);
  ASSERT_FALSE(v.empty());
  EXPECT_EQ(v[0].rule, 1);
}

TEST(Validate, GPipeLastStageViolatesPreferBackward) {
  const auto v = validate_schedule(generate_gpipe_schedule(2, 3));
  EXPECT_TRUE(std::any_of(v.begin(), v.end(), [](const RuleViolation& x) { return x.rule == 3; }));
}

TEST(Structure, MissingTaskRejected) {
  auto s = generate_varuna_schedule(2, 2);
  s.per_stage[1].pop_back();
  EXPECT_THROW(check_structure(s), InputError);
}

TEST(Structure, DeadlockRejected) {
  auto s = generate_varuna_schedule(2, 1);
  s.per_stage[1] = {B(1, 2), F(1, 2)};
  EXPECT_THROW(replay_zero_delay(s), InputError);
}

TEST(Structure, RecomputeAtLastStageRejectedForVaruna) {
  auto s = generate_varuna_schedule(1, 1);
  s.per_stage[0] = {F(1, 1), R(1, 1), B(1, 1)};
  EXPECT_THROW(check_structure(s), InputError);
}

TEST(InFlight, GPipeHoldsAllMicroBatches) {
  EXPECT_EQ(max_in_flight(generate_gpipe_schedule(4, 5)), (std::vector<int>{5, 5, 5, 5}));
  EXPECT_EQ(max_in_flight(generate_varuna_schedule(4, 5)), (std::vector<int>{5, 5, 3, 1}));
}

TEST(Csv, RoundTrip) {
  const auto s = generate_varuna_schedule(3, 4);
  std::stringstream ss;
  write_schedule_csv(s, ss);
  const auto back = read_schedule_csv(ss, SchedulePolicy::Varuna);
  EXPECT_EQ(back.per_stage, s.per_stage);
  std::stringstream again;
  write_schedule_csv(back, again);
  std::stringstream first;
  write_schedule_csv(s, first);
  EXPECT_EQ(again.str(), first.str());
}

TEST(Csv, BadKindRejected) {
  std::stringstream ss("stage,seq,kind,microbatch\n1,1,X,1\n");
  EXPECT_THROW(read_schedule_csv(ss, SchedulePolicy::Varuna), InputError);
}

TEST(Policy, Parse) {
  EXPECT_EQ(parse_policy("gpipe"), SchedulePolicy::GPipe);
  EXPECT_THROW(parse_policy("1f1b"), InputError);
}

}  // namespace
}  // namespace pipeplan
