// Copyright 2026 The pipeplan Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "pipeplan/calibration.hpp"
#include "pipeplan/core.hpp"

namespace pipeplan {

struct Operation {
  std::string name;
  Duration compute{0};
  Bytes output_activation_bytes = 0;  // per example
  std::int64_t params = 0;            // parameters owned by this op
  /// Parameter groups this op reads. A group used by several ops may only be
  /// split across sections if it is listed in OpProfile::shared_groups.
  std::vector<std::string> param_groups;
};

struct OpProfile {
  std::vector<Operation> ops;
  std::set<std::string> shared_groups;

  void validate() const;
};

struct SharedCrossing {
  std::string group;
  int boundary = 0;  // cut after op `boundary`
};

struct CutpointSelection {
  ModelSpec model;
  /// Index of the last op of every section except the final one.
  std::vector<int> boundaries;
  std::vector<Duration> section_compute;
  std::vector<SharedCrossing> shared_crossings;
};

/// Splits the op list into `k` contiguous sections.
///
/// The optimal min-max section time T* is computed first; every boundary set
/// whose largest section is within (1 + tolerance) * T* is a candidate, and
/// the candidate with the smallest total boundary activation wins (then the
/// smaller max section, then the earliest boundaries). Boundaries inside an
/// unshared parameter group are never used.
CutpointSelection identify_cutpoints(const OpProfile& profile, int k, double tolerance = 0.2,
                                     const std::string& model_name = "model");

struct StageAssignment {
  /// [first, last] cut-point of each stage.
  std::vector<std::pair<int, int>> ranges;
  std::vector<std::int64_t> stage_params;
  std::vector<Duration> stage_forward;   // sum of F_i(m)
  std::vector<Duration> stage_backward;  // sum of B_i(m)
  /// Activation bytes per example entering each stage (model input for the
  /// first stage).
  std::vector<Bytes> input_activation;
  /// Activation bytes per example leaving each stage (0 for the last stage).
  std::vector<Bytes> output_activation;
  /// Sum of cut-point activations inside each stage, bytes per example.
  std::vector<Bytes> working_activation;

  int stages() const { return static_cast<int>(ranges.size()); }
  /// 0-based stage index of every cut-point.
  std::vector<int> stage_map() const;
};

struct BalanceOptions {
  /// Multiplier applied to the last stage's load while balancing. Values
  /// above 1 leave room for layers that the last stage never recomputes.
  double last_stage_weight = 1.0;
};

/// Contiguous grouping of the model's cut-points into `stages` stages that
/// minimizes the largest stage forward time; ties go to the smaller total
/// boundary activation, then to earlier boundaries.
StageAssignment assign_stages(const ModelSpec& model, int stages, int m,
                              const CalibrationProfile& profile, const BalanceOptions& options = {});

/// Builds the assignment described by an explicit stage map.
StageAssignment assignment_from_map(const ModelSpec& model, const std::vector<int>& stage_map, int m,
                                    const CalibrationProfile& profile);

struct StageMemory {
  Bytes param_state = 0;
  Bytes stashed_activations = 0;
  Bytes working_set = 0;
  Bytes total = 0;
  bool feasible = false;
  Bytes headroom = 0;  // gpu_memory - total, negative when infeasible
};

struct MemoryReport {
  std::vector<StageMemory> stages;
  bool feasible() const;
};

struct MemoryOptions {
  int bytes_per_param_state = 16;
  /// Micro-batches whose input activations a stage keeps at once. Either one
  /// value per stage (from the scheduler) or empty for the worst case N_m.
  std::vector<int> in_flight;
};

/// Per-stage memory: parameter and optimizer state, stashed stage inputs for
/// every in-flight micro-batch, and one working activation set.
MemoryReport memory_check(const StageAssignment& assignment, int m, int micro_batches,
                          const HardwareSpec& hw, const MemoryOptions& options = {});

OpProfile load_op_profile(const std::filesystem::path& path);

}  // namespace pipeplan
