// Copyright 2026 The pipeplan Authors
// SPDX-License-Identifier: Apache-2.0

// File formats. Every document is JSON; unknown keys are rejected and every
// error names the offending `$.path`. Times are integer microseconds unless
// the key says otherwise (`_s` suffix). README.md documents every format.

#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>

#include "pipeplan/calibration.hpp"
#include "pipeplan/core.hpp"
#include "pipeplan/morphing.hpp"
#include "pipeplan/partitioner.hpp"
#include "pipeplan/planner.hpp"

namespace pipeplan {

inline constexpr int kFormatVersion = 1;

CalibrationProfile parse_profile(std::string_view text, const std::string& source = "profile");
void write_profile(const CalibrationProfile& profile, std::ostream& out);

OpProfile parse_op_profile(std::string_view text, const std::string& source = "ops");

/// Inputs of an analytic profile.
struct SynthesisSettings {
  std::vector<int> m_grid;
  std::vector<int> d_grid;
  SynthesisOptions options;
};

/// A job file: model, hardware, job, cluster, profile source and the
/// optional sections used by individual commands.
struct JobConfig {
  std::filesystem::path source;
  ModelSpec model;
  HardwareSpec hw;
  JobSpec job;
  /// Empty when the file names no cluster.
  ClusterState cluster;
  CalibrationProfile profile;
  /// Set when the profile was synthesized rather than loaded.
  std::optional<SynthesisSettings> synthesis;
  /// The `config` section, completed with a balanced stage map and N_m when
  /// those were omitted.
  std::optional<ParallelConfig> config;
  PlannerOptions planner;
  MorphingOptions morphing;
  /// The document as read, kept so that `plan` can write it back with a
  /// `config` section.
  std::string document;
};

/// `base_dir` resolves a relative `profile` path.
JobConfig parse_job(std::string_view text, const std::string& source = "job",
                    const std::filesystem::path& base_dir = ".");
JobConfig load_job(const std::filesystem::path& path);

/// The job document with its `config` section replaced by `config`. A
/// relative profile path is rewritten to stay valid from `target_dir`.
std::string job_with_config(const JobConfig& job, const ParallelConfig& config,
                            const std::filesystem::path& target_dir);

}  // namespace pipeplan
