// Copyright 2026 The pipeplan Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "pipeplan/calibration.hpp"
#include "pipeplan/core.hpp"

namespace pipeplan::testing {

/// Profile with a single m grid point (m = 1) and D grid {1}, forward times
/// as given, backward = 2x forward, free transfers.
inline CalibrationProfile profile_from_forward(const std::vector<long>& forward_us, int m = 1) {
  std::vector<CutpointTimes> cuts;
  for (long f : forward_us) {
    CutpointTimes c;
    c.forward = {Duration{f}};
    c.backward = {Duration{2 * f}};
    c.act_intra = c.grad_intra = c.act_inter = c.grad_inter = {TransferTime{}};
    c.allreduce = {Duration{0}};
    cuts.push_back(c);
  }
  return CalibrationProfile({m}, {1}, std::move(cuts));
}

inline ModelSpec uniform_model(int k, std::int64_t params = 1000, Bytes activation = 100) {
  return ModelSpec::repeated("uniform", RepeatedBlock{params, activation, k});
}

inline HardwareSpec test_hardware() {
  HardwareSpec hw;
  hw.gpu_memory = 16LL << 30;
  hw.gpus_per_node = 4;
  hw.intra_node_bandwidth = 100e9;
  hw.inter_node_bandwidth = 1.25e9;
  hw.inter_node_latency = Duration{50};
  hw.inter_node_jitter = Duration{0};
  hw.intra_node_latency = Duration{5};
  return hw;
}

}  // namespace pipeplan::testing
