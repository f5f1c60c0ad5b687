// Copyright 2026 The pipeplan Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <ostream>

#include <fmt/core.h>
#include <fmt/ostream.h>

#include "pipeplan/simulator.hpp"

namespace pipeplan {
namespace {

const char* color(GanttKind k) {
  switch (k) {
    case GanttKind::Forward: return "#d62728";
    case GanttKind::Backward: return "#2ca02c";
    case GanttKind::Recompute: return "#ff7f0e";
    case GanttKind::AllReduce: return "#9467bd";
  }
  return "#000000";
}

const char* kind_name(GanttKind k) {
  switch (k) {
    case GanttKind::Forward: return "forward";
    case GanttKind::Backward: return "backward";
    case GanttKind::Recompute: return "recompute";
    case GanttKind::AllReduce: return "allreduce";
  }
  return "?";
}

std::vector<GanttEntry> sorted_rows(const SimulationResult& r, size_t stage, int replica) {
  if (stage >= r.gantt.size()) return {};
  const auto& per_replica = r.gantt[stage];
  if (replica < 0 || static_cast<size_t>(replica) >= per_replica.size()) return {};
  auto rows = per_replica[static_cast<size_t>(replica)];
  std::stable_sort(rows.begin(), rows.end(),
                   [](const GanttEntry& a, const GanttEntry& b) { return a.start < b.start; });
  return rows;
}

}  // namespace

void write_gantt_csv(const SimulationResult& result, std::ostream& out, int replica) {
  out << "stage,kind,microbatch,start_us,end_us\n";
  for (size_t s = 0; s < result.gantt.size(); ++s) {
    for (const auto& e : sorted_rows(result, s, replica))
      fmt::print(out, "{},{},{},{},{}\n", s + 1, to_char(e.kind), e.micro_batch, e.start.count(), e.end.count());
  }
}

void write_gantt_svg(const SimulationResult& result, std::ostream& out, int replica) {
  constexpr double kLeft = 70, kTop = 30, kRow = 28, kBar = 20, kWidth = 1000;
  const size_t rows = result.gantt.size();
  const double span = std::max<double>(1.0, static_cast<double>(result.minibatch_time.count()));
  const double height = kTop + kRow * static_cast<double>(rows) + 40;
  const auto x = [&](Duration t) { return kLeft + kWidth * static_cast<double>(t.count()) / span; };

  fmt::print(out,
             "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{:.0f}\" height=\"{:.0f}\" "
             "font-family=\"sans-serif\" font-size=\"11\">\n",
             kLeft + kWidth + 20, height);
  fmt::print(out, "<title>replica {} of {}</title>\n", replica, result.replicas);
  const double axis_y = kTop + kRow * static_cast<double>(rows);
  fmt::print(out, "<line class=\"axis\" x1=\"{0:.1f}\" y1=\"{1:.1f}\" x2=\"{2:.1f}\" y2=\"{1:.1f}\" stroke=\"black\"/>\n",
             kLeft, axis_y, kLeft + kWidth);
  fmt::print(out, "<line class=\"axis\" x1=\"{0:.1f}\" y1=\"{1:.1f}\" x2=\"{0:.1f}\" y2=\"{2:.1f}\" stroke=\"black\"/>\n",
             kLeft, kTop - 4, axis_y);
  fmt::print(out, "<text x=\"{:.1f}\" y=\"{:.1f}\">0</text>\n", kLeft, axis_y + 14);
  fmt::print(out, "<text x=\"{:.1f}\" y=\"{:.1f}\" text-anchor=\"end\">{:.6f} s</text>\n", kLeft + kWidth,
             axis_y + 14, to_seconds(result.minibatch_time));

  for (size_t s = 0; s < rows; ++s) {
    const double y = kTop + kRow * static_cast<double>(s);
    fmt::print(out, "<text x=\"4\" y=\"{:.1f}\">stage {}</text>\n", y + kBar * 0.75, s + 1);
    for (const auto& e : sorted_rows(result, s, replica)) {
      const double w = std::max(0.5, x(e.end) - x(e.start));
      fmt::print(out,
                 "<rect class=\"task\" x=\"{:.2f}\" y=\"{:.1f}\" width=\"{:.2f}\" height=\"{:.0f}\" fill=\"{}\">"
                 "<title>{} {} [{}, {}] us</title></rect>\n",
                 x(e.start), y, w, kBar, color(e.kind), kind_name(e.kind), e.micro_batch, e.start.count(),
                 e.end.count());
    }
  }
  out << "</svg>\n";
}

}  // namespace pipeplan
