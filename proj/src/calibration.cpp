// Copyright 2026 The pipeplan Authors
// SPDX-License-Identifier: Apache-2.0

#include "pipeplan/calibration.hpp"

#include <algorithm>

#include <fmt/core.h>

namespace pipeplan {
namespace {

void check_grid(const std::vector<int>& grid, const char* name) {
  if (grid.empty()) throw InputError(fmt::format("{}: grid must not be empty", name));
  for (size_t i = 0; i < grid.size(); ++i) {
    if (grid[i] < 1) throw InputError(fmt::format("{}[{}]: must be >= 1", name, i));
    if (i > 0 && grid[i] <= grid[i - 1])
      throw InputError(fmt::format("{}[{}]: grid must be strictly increasing", name, i));
  }
}

template <typename T>
void check_size(const std::vector<T>& v, size_t expected, size_t cut, const char* field) {
  if (v.size() != expected) {
    throw InputError(fmt::format("cutpoints[{}].{}: has {} entries, grid needs {}", cut, field,
                                 v.size(), expected));
  }
}

void check_transfers(const std::vector<TransferTime>& v, size_t cut, const char* field) {
  for (size_t j = 0; j < v.size(); ++j) {
    const auto& t = v[j];
    if (t.mean.count() < 0 || t.stddev.count() < 0 || t.wire.count() < 0)
      throw InputError(fmt::format("cutpoints[{}].{}[{}]: times must be >= 0", cut, field, j));
    if (t.wire > t.mean)
      throw InputError(fmt::format("cutpoints[{}].{}[{}]: wire_us exceeds mean_us", cut, field, j));
  }
}

Duration scale(Duration d, double f) { return Duration{std::llround(static_cast<double>(d.count()) * f)}; }

TransferTime scale(const TransferTime& t, double f) {
  TransferTime out{scale(t.mean, f), scale(t.stddev, f), scale(t.wire, f)};
  out.wire = std::min(out.wire, out.mean);
  return out;
}

}  // namespace

CalibrationProfile::CalibrationProfile(std::vector<int> m_grid, std::vector<int> d_grid,
                                       std::vector<CutpointTimes> cutpoints,
                                       int bytes_per_param_state)
    : m_grid_(std::move(m_grid)),
      d_grid_(std::move(d_grid)),
      cutpoints_(std::move(cutpoints)),
      bytes_per_param_state_(bytes_per_param_state) {
  check_grid(m_grid_, "m_grid");
  check_grid(d_grid_, "d_grid");
  if (cutpoints_.empty()) throw InputError("cutpoints: at least one cut-point is required");
  if (bytes_per_param_state_ < 1) throw InputError("bytes_per_param_state: must be >= 1");
  const size_t nm = m_grid_.size();
  const size_t nd = d_grid_.size();
  for (size_t i = 0; i < cutpoints_.size(); ++i) {
    const auto& c = cutpoints_[i];
    check_size(c.forward, nm, i, "forward_us");
    check_size(c.backward, nm, i, "backward_us");
    check_size(c.act_intra, nm, i, "act_intra");
    check_size(c.grad_intra, nm, i, "grad_intra");
    check_size(c.act_inter, nm, i, "act_inter");
    check_size(c.grad_inter, nm, i, "grad_inter");
    check_size(c.allreduce, nd, i, "allreduce_us");
    for (size_t j = 0; j < nm; ++j) {
      if (c.forward[j].count() < 0 || c.backward[j].count() < 0)
        throw InputError(fmt::format("cutpoints[{}]: compute times must be >= 0 (m={})", i, m_grid_[j]));
      if (j > 0 && c.forward[j] < c.forward[j - 1])
        throw InputError(fmt::format("cutpoints[{}].forward_us[{}]: must be non-decreasing in m", i, j));
      if (j > 0 && c.backward[j] < c.backward[j - 1])
        throw InputError(fmt::format("cutpoints[{}].backward_us[{}]: must be non-decreasing in m", i, j));
    }
    check_transfers(c.act_intra, i, "act_intra");
    check_transfers(c.grad_intra, i, "grad_intra");
    check_transfers(c.act_inter, i, "act_inter");
    check_transfers(c.grad_inter, i, "grad_inter");
    for (size_t j = 0; j < nd; ++j) {
      if (c.allreduce[j].count() < 0)
        throw InputError(fmt::format("cutpoints[{}].allreduce_us[{}]: must be >= 0", i, j));
      if (d_grid_[j] == 1 && c.allreduce[j].count() != 0)
        throw InputError(fmt::format("cutpoints[{}].allreduce_us[{}]: allreduce over a ring of one must be 0",
                                     i, j));
    }
  }
}

bool CalibrationProfile::has_m(int m) const {
  return std::binary_search(m_grid_.begin(), m_grid_.end(), m);
}

bool CalibrationProfile::has_d(int d) const {
  return std::binary_search(d_grid_.begin(), d_grid_.end(), d);
}

size_t CalibrationProfile::m_index(int m) const {
  auto it = std::lower_bound(m_grid_.begin(), m_grid_.end(), m);
  if (it == m_grid_.end() || *it != m)
    throw InputError(fmt::format("calibration: micro-batch size m={} is not a profiled grid point", m));
  return static_cast<size_t>(it - m_grid_.begin());
}

size_t CalibrationProfile::d_index(int d) const {
  auto it = std::lower_bound(d_grid_.begin(), d_grid_.end(), d);
  if (it == d_grid_.end() || *it != d)
    throw InputError(fmt::format("calibration: ring size D={} is not a profiled grid point", d));
  return static_cast<size_t>(it - d_grid_.begin());
}

Duration CalibrationProfile::forward(int cutpoint, int m) const {
  return cutpoints_.at(static_cast<size_t>(cutpoint)).forward[m_index(m)];
}

Duration CalibrationProfile::backward(int cutpoint, int m) const {
  return cutpoints_.at(static_cast<size_t>(cutpoint)).backward[m_index(m)];
}

const TransferTime& CalibrationProfile::activation_transfer(int cutpoint, int m, bool inter_node) const {
  const auto& c = cutpoints_.at(static_cast<size_t>(cutpoint));
  return inter_node ? c.act_inter[m_index(m)] : c.act_intra[m_index(m)];
}

const TransferTime& CalibrationProfile::gradient_transfer(int cutpoint, int m, bool inter_node) const {
  const auto& c = cutpoints_.at(static_cast<size_t>(cutpoint));
  return inter_node ? c.grad_inter[m_index(m)] : c.grad_intra[m_index(m)];
}

Duration CalibrationProfile::allreduce(int cutpoint, int d) const {
  if (d == 1) return Duration{0};
  return cutpoints_.at(static_cast<size_t>(cutpoint)).allreduce[d_index(d)];
}

CalibrationProfile CalibrationProfile::scaled(double factor) const {
  auto cuts = cutpoints_;
  for (auto& c : cuts) {
    for (auto& d : c.forward) d = scale(d, factor);
    for (auto& d : c.backward) d = scale(d, factor);
    for (auto* v : {&c.act_intra, &c.grad_intra, &c.act_inter, &c.grad_inter})
      for (auto& t : *v) t = scale(t, factor);
    for (auto& d : c.allreduce) d = scale(d, factor);
  }
  return CalibrationProfile(m_grid_, d_grid_, std::move(cuts), bytes_per_param_state_);
}

CalibrationProfile CalibrationProfile::with_inter_node_scale(double factor) const {
  auto cuts = cutpoints_;
  for (auto& c : cuts) {
    for (auto* v : {&c.act_inter, &c.grad_inter})
      for (auto& t : *v) t = scale(t, factor);
  }
  return CalibrationProfile(m_grid_, d_grid_, std::move(cuts), bytes_per_param_state_);
}

double SynthesisOptions::default_seconds_per_param_example() {
  return 0.010 / (static_cast<double>(kGpt2_2p5bBlockParams) * 4.0);
}

double ring_allreduce_seconds(double bytes, int ring_size, double bandwidth, double latency_s) {
  if (ring_size <= 1) return 0.0;
  const double d = ring_size;
  return 2.0 * (d - 1.0) / d * bytes / bandwidth + 2.0 * (d - 1.0) * latency_s;
}

CalibrationProfile synthesize_profile(const ModelSpec& model, const HardwareSpec& hw,
                                      const std::vector<int>& m_grid,
                                      const std::vector<int>& d_grid,
                                      const SynthesisOptions& options) {
  hw.validate();
  std::vector<CutpointTimes> cuts;
  cuts.reserve(static_cast<size_t>(model.num_cutpoints()));
  const double intra_lat = to_seconds(hw.intra_node_latency);
  const double inter_lat = to_seconds(hw.inter_node_latency);

  for (const auto& cp : model.cutpoints()) {
    CutpointTimes c;
    for (int m : m_grid) {
      const double fwd = options.seconds_per_param_example * static_cast<double>(cp.params) *
                         (static_cast<double>(m) + options.small_batch_overhead);
      c.forward.push_back(from_seconds(fwd));
      c.backward.push_back(from_seconds(fwd * options.backward_ratio));

      const double bytes = static_cast<double>(cp.activation_bytes) * m;
      const Duration intra_wire = from_seconds(bytes / hw.intra_node_bandwidth);
      const Duration inter_wire = from_seconds(bytes / hw.inter_node_bandwidth);
      const TransferTime intra{intra_wire + from_seconds(intra_lat), Duration{0}, intra_wire};
      const TransferTime inter{inter_wire + from_seconds(inter_lat), hw.inter_node_jitter, inter_wire};
      c.act_intra.push_back(intra);
      c.grad_intra.push_back(intra);
      c.act_inter.push_back(inter);
      c.grad_inter.push_back(inter);
    }
    const double grad_bytes = static_cast<double>(cp.params) * options.gradient_bytes_per_param;
    for (int d : d_grid) {
      const double t = ring_allreduce_seconds(grad_bytes, d, hw.inter_node_bandwidth, inter_lat);
      c.allreduce.push_back(from_seconds(t * options.allreduce_contention));
    }
    cuts.push_back(std::move(c));
  }
  return CalibrationProfile(m_grid, d_grid, std::move(cuts), options.bytes_per_param_state);
}

CommVolumeReport comm_volume(const BlockShape& s) {
  if (s.hidden <= 0 || s.sequence <= 0 || s.layers <= 0 || s.bytes_per_element <= 0)
    throw InputError("comm_volume: all block dimensions must be positive");
  const double tensor = static_cast<double>(s.hidden) * static_cast<double>(s.sequence) *
                        static_cast<double>(s.bytes_per_element);
  CommVolumeReport r;
  r.pipeline_bytes_per_example = 2.0 * tensor;
  constexpr double kAllreducesPerLayer = 6.0;  // 2 each in forward, backward, recompute
  r.intralayer_bytes_per_example_per_gpu =
      kAllreducesPerLayer * static_cast<double>(s.layers) * 2.0 * tensor;
  r.ratio = r.intralayer_bytes_per_example_per_gpu / r.pipeline_bytes_per_example;
  return r;
}

}  // namespace pipeplan
