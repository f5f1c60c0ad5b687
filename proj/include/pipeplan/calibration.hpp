// Copyright 2026 The pipeplan Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "pipeplan/core.hpp"

namespace pipeplan {

/// Time to move one activation or gradient tensor across a link.
///
/// `mean` is the expected end-to-end time and `stddev` its jitter. `wire` is
/// the share of `mean` during which the link is occupied by serialization;
/// the remainder is propagation/software latency that does not block the
/// link. `wire <= mean` always.
struct TransferTime {
  Duration mean{0};
  Duration stddev{0};
  Duration wire{0};

  friend bool operator==(const TransferTime&, const TransferTime&) = default;
};

/// Per-cut-point primitive measurements. Vectors over micro-batch size are
/// indexed like the profile's m grid; `allreduce` is indexed like the D grid.
struct CutpointTimes {
  std::vector<Duration> forward;
  std::vector<Duration> backward;
  std::vector<TransferTime> act_intra;
  std::vector<TransferTime> grad_intra;
  std::vector<TransferTime> act_inter;
  std::vector<TransferTime> grad_inter;
  std::vector<Duration> allreduce;

  friend bool operator==(const CutpointTimes&, const CutpointTimes&) = default;
};

/// Scale-invariant calibration of one model on one hardware type.
///
/// Lookups only succeed on grid points; there is no interpolation, so a
/// planner that needs an unprofiled micro-batch size or ring size fails
/// loudly with the missing point named.
class CalibrationProfile {
 public:
  /// Validates every invariant and throws InputError with a field path on
  /// the first violation.
  CalibrationProfile(std::vector<int> m_grid, std::vector<int> d_grid,
                     std::vector<CutpointTimes> cutpoints, int bytes_per_param_state = 16);

  int num_cutpoints() const { return static_cast<int>(cutpoints_.size()); }
  const std::vector<int>& m_grid() const { return m_grid_; }
  const std::vector<int>& d_grid() const { return d_grid_; }
  const std::vector<CutpointTimes>& cutpoints() const { return cutpoints_; }
  /// Bytes of parameter + optimizer state per parameter (16 for mixed
  /// precision Adam).
  int bytes_per_param_state() const { return bytes_per_param_state_; }

  bool has_m(int m) const;
  bool has_d(int d) const;

  Duration forward(int cutpoint, int m) const;
  Duration backward(int cutpoint, int m) const;
  const TransferTime& activation_transfer(int cutpoint, int m, bool inter_node) const;
  const TransferTime& gradient_transfer(int cutpoint, int m, bool inter_node) const;
  /// AR_i(D). Ring size 1 is always zero, profiled or not.
  Duration allreduce(int cutpoint, int d) const;

  /// Every time multiplied by `factor` (rounded to the microsecond).
  CalibrationProfile scaled(double factor) const;
  /// Cross-node activation and gradient transfers multiplied by `factor`,
  /// modelling a slower (factor > 1) or faster inter-node network.
  CalibrationProfile with_inter_node_scale(double factor) const;

  friend bool operator==(const CalibrationProfile&, const CalibrationProfile&) = default;

 private:
  size_t m_index(int m) const;
  size_t d_index(int d) const;

  std::vector<int> m_grid_;
  std::vector<int> d_grid_;
  std::vector<CutpointTimes> cutpoints_;
  int bytes_per_param_state_ = 16;
};

/// Parameters of the analytic profile generator.
struct SynthesisOptions {
  /// Seconds of forward compute per (parameter x example). The default makes
  /// one GPT-2 2.5B transformer block take 10 ms forward at m = 4.
  double seconds_per_param_example = default_seconds_per_param_example();
  /// Backward time as a multiple of forward time.
  double backward_ratio = 2.0;
  /// Fixed per-micro-batch GPU under-utilisation, expressed in examples:
  /// F(m) = c * params * (m + overhead). Zero gives a purely linear model.
  double small_batch_overhead = 0.0;
  /// Bytes per gradient element exchanged by the allreduce.
  int gradient_bytes_per_param = 2;
  /// Slow-down of one ring allreduce when every GPU of a node runs one at
  /// the same time. 1.0 means no contention.
  double allreduce_contention = 1.0;
  int bytes_per_param_state = 16;

  static double default_seconds_per_param_example();
};

/// Parameters of one transformer block of a GPT-2 2.5B model (hidden 1920).
inline constexpr std::int64_t kGpt2_2p5bBlockParams = 12LL * 1920 * 1920 + 13LL * 1920;

CalibrationProfile synthesize_profile(const ModelSpec& model, const HardwareSpec& hw,
                                      const std::vector<int>& m_grid,
                                      const std::vector<int>& d_grid,
                                      const SynthesisOptions& options = {});

/// Ring allreduce of `bytes` over `ring_size` participants.
double ring_allreduce_seconds(double bytes, int ring_size, double bandwidth, double latency_s);

struct BlockShape {
  std::int64_t hidden = 0;
  std::int64_t sequence = 0;
  std::int64_t layers = 0;
  std::int64_t bytes_per_element = 2;
};

struct CommVolumeReport {
  /// Activation forward plus gradient backward across one stage boundary.
  double pipeline_bytes_per_example = 0;
  /// Intra-layer (tensor) parallelism traffic for the whole model.
  double intralayer_bytes_per_example_per_gpu = 0;
  double ratio = 0;
};

/// Bytes per example moved by pipeline parallelism versus intra-layer
/// partitioning of the same block stack. Intra-layer partitioning needs two
/// allreduces in each of forward, backward and recompute for every layer, and
/// each one moves 2 * hidden * sequence elements per GPU.
CommVolumeReport comm_volume(const BlockShape& shape);

CalibrationProfile load_profile(const std::filesystem::path& path);
void write_profile(const CalibrationProfile& profile, const std::filesystem::path& path);

}  // namespace pipeplan
