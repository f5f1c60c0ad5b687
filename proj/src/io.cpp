// Copyright 2026 The pipeplan Authors
// SPDX-License-Identifier: Apache-2.0

#include "pipeplan/io.hpp"

#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include <fmt/core.h>
#include <json.hpp>

namespace pipeplan {
namespace {

using nlohmann::json;

std::string read_file(const std::filesystem::path& path, const char* what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError(fmt::format("{}: cannot open {}", path.string(), what));
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

json parse_json(std::string_view text, const std::string& source) {
  try {
    return json::parse(text.begin(), text.end());
  } catch (const json::parse_error& e) {
    throw InputError(fmt::format("{}: not valid JSON ({})", source, e.what()));
  }
}

// Typed, path-aware view of one JSON object. Keys that are never read are
// reported by done().
class Node {
 public:
  Node(const json& j, std::string path, const std::string& source) : j_(j), path_(std::move(path)), source_(source) {
    if (!j_.is_object()) fail("expected an object");
  }

  [[noreturn]] void fail(const std::string& what) const { fail_at(path_, what); }
  [[noreturn]] void fail_at(const std::string& path, const std::string& what) const {
    throw InputError(fmt::format("{}: {}: {}", source_, path, what));
  }
  std::string at_path(const std::string& key) const { return path_ + "." + key; }
  const std::string& path() const { return path_; }
  /// "source: $.path: " for errors raised by library validation.
  std::string prefix() const { return fmt::format("{}: {}: ", source_, path_); }

  bool has(const std::string& key) const { return j_.contains(key); }

  const json& raw(const std::string& key) {
    if (!j_.contains(key)) fail_at(at_path(key), "missing required field");
    used_.insert(key);
    return j_.at(key);
  }

  Node object(const std::string& key) { return Node(raw(key), at_path(key), source_); }
  std::optional<Node> maybe_object(const std::string& key) {
    if (!has(key)) return std::nullopt;
    return object(key);
  }

  template <class T>
  T get(const std::string& key) {
    return convert<T>(raw(key), at_path(key));
  }
  template <class T>
  T get(const std::string& key, T fallback) {
    return has(key) ? get<T>(key) : fallback;
  }

  template <class T>
  std::vector<T> list(const std::string& key) {
    const json& a = raw(key);
    if (!a.is_array()) fail_at(at_path(key), "expected an array");
    std::vector<T> out;
    for (size_t i = 0; i < a.size(); ++i) out.push_back(convert<T>(a[i], fmt::format("{}[{}]", at_path(key), i)));
    return out;
  }

  // Objects of an array, each checked with its own path.
  std::vector<Node> objects(const std::string& key) {
    const json& a = raw(key);
    if (!a.is_array()) fail_at(at_path(key), "expected an array");
    std::vector<Node> out;
    for (size_t i = 0; i < a.size(); ++i) out.emplace_back(a[i], fmt::format("{}[{}]", at_path(key), i), source_);
    return out;
  }

  void done() const {
    for (const auto& [key, value] : j_.items())
      if (!used_.count(key)) fail_at(at_path(key), "unknown key");
  }

  template <class T>
  T convert(const json& v, const std::string& path) const {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) fail_at(path, "expected true or false");
      return v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) fail_at(path, "expected a string");
      return v.get<std::string>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) fail_at(path, "expected an integer");
      if (v.is_number_unsigned()) {
        const auto u = v.get<std::uint64_t>();
        if (u > static_cast<std::uint64_t>(std::numeric_limits<T>::max())) fail_at(path, "integer out of range");
        return static_cast<T>(u);
      }
      const auto s = v.get<std::int64_t>();
      if (s < std::numeric_limits<T>::min() || s > std::numeric_limits<T>::max())
        fail_at(path, "integer out of range");
      return static_cast<T>(s);
    } else {
      if (!v.is_number()) fail_at(path, "expected a number");
      return v.get<T>();
    }
  }

 private:
  const json& j_;
  std::string path_;
  const std::string& source_;
  std::set<std::string> used_;
};

// Re-raises a constructor or validate() error under `prefix`.
template <class Fn>
auto with_prefix(const std::string& prefix, Fn fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const InputError& e) {
    throw InputError(fmt::format("{}{}", prefix, e.what()));
  }
}

void check_version(Node& root) {
  const int v = root.get<int>("format_version");
  if (v != kFormatVersion)
    root.fail_at("$.format_version", fmt::format("unsupported version {} (expected {})", v, kFormatVersion));
}

// -- profiles -----------------------------------------------------------------

TransferTime read_transfer(Node n) {
  TransferTime t;
  t.mean = Duration{n.get<std::int64_t>("mean_us")};
  t.stddev = Duration{n.get<std::int64_t>("stddev_us", 0)};
  t.wire = Duration{n.get<std::int64_t>("wire_us", t.mean.count())};
  n.done();
  return t;
}

std::vector<Duration> read_times(Node& n, const std::string& key) {
  std::vector<Duration> out;
  for (auto us : n.list<std::int64_t>(key)) out.push_back(Duration{us});
  return out;
}

std::vector<TransferTime> read_transfers(Node& n, const std::string& key, size_t expected) {
  std::vector<TransferTime> out;
  if (!n.has(key)) {
    out.resize(expected);
    return out;
  }
  for (auto& t : n.objects(key)) out.push_back(read_transfer(t));
  return out;
}

json transfer_json(const std::vector<TransferTime>& v) {
  json a = json::array();
  for (const auto& t : v) a.push_back({{"mean_us", t.mean.count()}, {"stddev_us", t.stddev.count()}, {"wire_us", t.wire.count()}});
  return a;
}

json times_json(const std::vector<Duration>& v) {
  json a = json::array();
  for (auto d : v) a.push_back(d.count());
  return a;
}

// -- job ----------------------------------------------------------------------

ModelSpec read_model(Node n) {
  const std::string name = n.get<std::string>("name", "model");
  std::optional<Bytes> input;
  if (n.has("input_activation_bytes")) input = n.get<Bytes>("input_activation_bytes");
  const bool block = n.has("block"), list = n.has("cutpoints");
  if (block == list) n.fail("exactly one of `block` or `cutpoints` is required");
  if (block) {
    Node b = n.object("block");
    RepeatedBlock rb{b.get<std::int64_t>("params"), b.get<Bytes>("activation_bytes"), b.get<int>("repeat")};
    b.done();
    n.done();
    return with_prefix(n.prefix(), [&] { return ModelSpec::repeated(name, rb, input); });
  }
  std::vector<Cutpoint> cps;
  for (auto& c : n.objects("cutpoints")) {
    cps.push_back(Cutpoint{c.get<std::int64_t>("params"), c.get<Bytes>("activation_bytes")});
    c.done();
  }
  n.done();
  return with_prefix(n.prefix(), [&] { return ModelSpec(name, std::move(cps), input); });
}

HardwareSpec read_hardware(Node n) {
  HardwareSpec hw;
  hw.gpu_memory = n.get<Bytes>("gpu_memory_bytes");
  hw.gpus_per_node = n.get<int>("gpus_per_node", 1);
  hw.inter_node_bandwidth = n.get<double>("inter_node_bandwidth");
  hw.intra_node_bandwidth = n.get<double>("intra_node_bandwidth", hw.inter_node_bandwidth);
  hw.inter_node_latency = Duration{n.get<std::int64_t>("inter_node_latency_us", 0)};
  hw.intra_node_latency = Duration{n.get<std::int64_t>("intra_node_latency_us", 0)};
  hw.inter_node_jitter = Duration{n.get<std::int64_t>("inter_node_jitter_us", 0)};
  n.done();
  with_prefix(n.prefix(), [&] { hw.validate(); });
  return hw;
}

JobSpec read_job_section(Node n) {
  JobSpec job;
  job.minibatch_size = n.get<std::int64_t>("minibatch_size");
  job.target_iterations = n.get<std::int64_t>("target_iterations", 1);
  job.checkpoint_interval = n.get<int>("checkpoint_interval", 1);
  n.done();
  with_prefix(n.prefix(), [&] { job.validate(); });
  return job;
}

ClusterState read_cluster(Node n, const HardwareSpec& hw) {
  const bool vms = n.has("vms"), gpus = n.has("gpus");
  if (vms == gpus) n.fail("exactly one of `vms` or `gpus` is required");
  if (gpus) {
    const int g = n.get<int>("gpus");
    if (g < 0) n.fail_at(n.at_path("gpus"), "must be >= 0");
    n.done();
    return ClusterState::packed(g, hw.gpus_per_node);
  }
  std::vector<VmInfo> out;
  std::set<std::string> seen;
  for (auto& v : n.objects("vms")) {
    VmInfo vm{v.get<std::string>("id"), v.get<int>("gpus", 1), v.get<std::string>("node", "")};
    if (vm.node.empty()) vm.node = vm.id;
    if (vm.gpus < 1) v.fail_at(v.at_path("gpus"), "must be >= 1");
    if (!seen.insert(vm.id).second) v.fail_at(v.at_path("id"), fmt::format("duplicate VM id '{}'", vm.id));
    v.done();
    out.push_back(std::move(vm));
  }
  n.done();
  return ClusterState(std::move(out));
}

SynthesisSettings read_synthesis(std::optional<Node> n, const ClusterState& cluster, const std::string& source) {
  SynthesisSettings out;
  out.m_grid = {1, 2, 4, 8, 16};
  int d_max = std::max(64, cluster.total_gpus());
  auto& opt = out.options;
  if (n) {
    if (n->has("m_grid")) out.m_grid = n->list<int>("m_grid");
    if (n->has("d_grid") && n->has("d_max")) n->fail("give `d_grid` or `d_max`, not both");
    if (n->has("d_grid")) out.d_grid = n->list<int>("d_grid");
    d_max = n->get<int>("d_max", d_max);
    opt.seconds_per_param_example = n->get<double>("seconds_per_param_example", opt.seconds_per_param_example);
    opt.backward_ratio = n->get<double>("backward_ratio", opt.backward_ratio);
    opt.small_batch_overhead = n->get<double>("small_batch_overhead", opt.small_batch_overhead);
    opt.gradient_bytes_per_param = n->get<int>("gradient_bytes_per_param", opt.gradient_bytes_per_param);
    opt.allreduce_contention = n->get<double>("allreduce_contention", opt.allreduce_contention);
    opt.bytes_per_param_state = n->get<int>("bytes_per_param_state", opt.bytes_per_param_state);
    n->done();
  }
  if (out.d_grid.empty()) {
    if (d_max < 1) throw InputError(fmt::format("{}: $.synthesis.d_max: must be >= 1", source));
    for (int d = 1; d <= d_max; ++d) out.d_grid.push_back(d);
  }
  return out;
}

ParallelConfig read_config(Node n, const ModelSpec& model, const JobSpec& job, const CalibrationProfile& profile) {
  ParallelConfig c;
  c.stages = n.get<int>("stages");
  c.replicas = n.get<int>("replicas");
  c.micro_batch_size = n.get<int>("micro_batch_size");
  if (c.stages < 1 || c.replicas < 1 || c.micro_batch_size < 1) n.fail("stages, replicas and micro_batch_size must be >= 1");
  c.micro_batches = n.has("micro_batches") ? n.get<int>("micro_batches")
                                           : micro_batches_for(job.minibatch_size, c.micro_batch_size, c.replicas);
  if (n.has("stage_map")) {
    c.stage_map = n.list<int>("stage_map");
  } else {
    if (c.stages > model.num_cutpoints())
      n.fail(fmt::format("stages = {} exceeds the model's {} cut-points", c.stages, model.num_cutpoints()));
    c.stage_map = with_prefix(n.prefix(), [&] {
      return assign_stages(model, c.stages, c.micro_batch_size, profile).stage_map();
    });
  }
  n.done();
  return c;
}

void read_simulation(Node n, PlannerOptions& p) {
  if (n.has("schedule")) {
    const auto name = n.get<std::string>("schedule");
    p.policy = with_prefix(n.prefix(), [&] { return parse_policy(name); });
  }
  auto& s = p.simulation;
  s.opportunistic = n.get<bool>("opportunistic", s.opportunistic);
  s.link_serialization = n.get<bool>("link_serialization", s.link_serialization);
  s.allreduce_barrier = n.get<bool>("allreduce_barrier", s.allreduce_barrier);
  s.fixed_overhead = Duration{n.get<std::int64_t>("fixed_overhead_us", s.fixed_overhead.count())};
  n.done();
}

void read_planner(Node n, PlannerOptions& p) {
  if (n.has("micro_batch_size")) p.micro_batch_size = n.get<int>("micro_batch_size");
  p.improvement_threshold = n.get<double>("improvement_threshold", p.improvement_threshold);
  p.balance.last_stage_weight = n.get<double>("last_stage_weight", p.balance.last_stage_weight);
  p.threads = n.get<int>("threads", p.threads);
  n.done();
}

MorphingOptions read_morphing(Node n) {
  MorphingOptions m;
  const auto secs = [&](const char* key, Duration fallback) {
    return n.has(key) ? from_seconds(n.get<double>(key)) : fallback;
  };
  m.heartbeat_period = secs("heartbeat_period_s", m.heartbeat_period);
  m.heartbeat_timeout_factor = n.get<double>("heartbeat_timeout_factor", m.heartbeat_timeout_factor);
  m.outlier_factor = n.get<double>("outlier_factor", m.outlier_factor);
  m.restart_overhead = secs("restart_overhead_s", m.restart_overhead);
  m.planner_seconds_per_simulation = secs("planner_seconds_per_simulation", m.planner_seconds_per_simulation);
  m.storage.write_bandwidth = n.get<double>("storage_write_bandwidth", m.storage.write_bandwidth);
  m.storage.read_bandwidth = n.get<double>("storage_read_bandwidth", m.storage.read_bandwidth);
  m.horizon = secs("horizon_s", m.horizon);
  n.done();
  return m;
}

}  // namespace

// -----------------------------------------------------------------------------

CalibrationProfile parse_profile(std::string_view text, const std::string& source) {
  const json doc = parse_json(text, source);
  Node root(doc, "$", source);
  check_version(root);
  const int bpps = root.get<int>("bytes_per_param_state", 16);
  const auto m_grid = root.list<int>("m_grid");
  const auto d_grid = root.list<int>("d_grid");
  std::vector<CutpointTimes> cps;
  for (auto& c : root.objects("cutpoints")) {
    CutpointTimes t;
    t.forward = read_times(c, "forward_us");
    t.backward = read_times(c, "backward_us");
    t.act_intra = read_transfers(c, "act_intra", m_grid.size());
    t.grad_intra = read_transfers(c, "grad_intra", m_grid.size());
    t.act_inter = read_transfers(c, "act_inter", m_grid.size());
    t.grad_inter = read_transfers(c, "grad_inter", m_grid.size());
    t.allreduce = read_times(c, "allreduce_us");
    c.done();
    cps.push_back(std::move(t));
  }
  root.done();
  return with_prefix(source + ": $.", [&] { return CalibrationProfile(m_grid, d_grid, std::move(cps), bpps); });
}

CalibrationProfile load_profile(const std::filesystem::path& path) {
  return parse_profile(read_file(path, "profile"), path.string());
}

void write_profile(const CalibrationProfile& profile, std::ostream& out) {
  json doc;
  doc["format_version"] = kFormatVersion;
  doc["bytes_per_param_state"] = profile.bytes_per_param_state();
  doc["m_grid"] = profile.m_grid();
  doc["d_grid"] = profile.d_grid();
  json cps = json::array();
  for (const auto& c : profile.cutpoints()) {
    cps.push_back({{"forward_us", times_json(c.forward)},
                   {"backward_us", times_json(c.backward)},
                   {"act_intra", transfer_json(c.act_intra)},
                   {"grad_intra", transfer_json(c.grad_intra)},
                   {"act_inter", transfer_json(c.act_inter)},
                   {"grad_inter", transfer_json(c.grad_inter)},
                   {"allreduce_us", times_json(c.allreduce)}});
  }
  doc["cutpoints"] = std::move(cps);
  out << doc.dump(1) << '\n';
}

void write_profile(const CalibrationProfile& profile, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError(fmt::format("{}: cannot write profile", path.string()));
  write_profile(profile, out);
}

OpProfile parse_op_profile(std::string_view text, const std::string& source) {
  const json doc = parse_json(text, source);
  Node root(doc, "$", source);
  check_version(root);
  OpProfile p;
  for (auto& o : root.objects("ops")) {
    Operation op;
    op.name = o.get<std::string>("name", "");
    op.compute = Duration{o.get<std::int64_t>("compute_us")};
    op.output_activation_bytes = o.get<Bytes>("output_activation_bytes");
    op.params = o.get<std::int64_t>("params", 0);
    if (o.has("param_groups")) op.param_groups = o.list<std::string>("param_groups");
    o.done();
    p.ops.push_back(std::move(op));
  }
  if (root.has("shared_groups")) {
    for (auto& g : root.list<std::string>("shared_groups")) p.shared_groups.insert(g);
  }
  root.done();
  with_prefix(source + ": $.", [&] { p.validate(); });
  return p;
}

OpProfile load_op_profile(const std::filesystem::path& path) {
  return parse_op_profile(read_file(path, "op profile"), path.string());
}

JobConfig parse_job(std::string_view text, const std::string& source, const std::filesystem::path& base_dir) {
  const json doc = parse_json(text, source);
  Node root(doc, "$", source);
  if (root.has("format_version")) check_version(root);

  ModelSpec model = read_model(root.object("model"));
  const HardwareSpec hw = read_hardware(root.object("hardware"));
  const JobSpec job = read_job_section(root.object("job"));
  ClusterState cluster;
  if (auto c = root.maybe_object("cluster")) cluster = read_cluster(*c, hw);

  if (root.has("profile") && root.has("synthesis")) root.fail("give `profile` or `synthesis`, not both");
  std::optional<CalibrationProfile> profile;
  std::optional<SynthesisSettings> synthesis;
  if (root.has("profile")) {
    const std::filesystem::path p = root.get<std::string>("profile");
    profile = load_profile(p.is_absolute() ? p : base_dir / p);
  } else {
    synthesis = read_synthesis(root.maybe_object("synthesis"), cluster, source);
    profile = with_prefix(fmt::format("{}: $.synthesis: ", source), [&] {
      return synthesize_profile(model, hw, synthesis->m_grid, synthesis->d_grid, synthesis->options);
    });
  }
  if (profile->num_cutpoints() != model.num_cutpoints()) {
    root.fail_at("$.profile", fmt::format("profile has {} cut-points but the model has {}", profile->num_cutpoints(),
                                          model.num_cutpoints()));
  }

  PlannerOptions planner;
  if (auto s = root.maybe_object("simulation")) read_simulation(*s, planner);
  if (auto p = root.maybe_object("planner")) read_planner(*p, planner);
  MorphingOptions morphing;
  if (auto m = root.maybe_object("morphing")) morphing = read_morphing(*m);
  std::optional<ParallelConfig> config;
  if (auto c = root.maybe_object("config")) config = read_config(*c, model, job, *profile);
  root.done();

  return JobConfig{std::filesystem::path(source), std::move(model), hw, job, std::move(cluster),
                   std::move(*profile), std::move(synthesis), std::move(config), std::move(planner), morphing, std::string(text)};
}

JobConfig load_job(const std::filesystem::path& path) {
  return parse_job(read_file(path, "job file"), path.string(), path.parent_path().empty() ? "." : path.parent_path());
}

std::string job_with_config(const JobConfig& job, const ParallelConfig& config, const std::filesystem::path& target_dir) {
  json doc = parse_json(job.document, job.source.string());
  doc["config"] = {{"stages", config.stages},
                   {"replicas", config.replicas},
                   {"micro_batch_size", config.micro_batch_size},
                   {"micro_batches", config.micro_batches},
                   {"stage_map", config.stage_map}};
  if (doc.contains("profile") && doc["profile"].is_string()) {
    const std::filesystem::path p = doc["profile"].get<std::string>();
    if (p.is_relative()) {
      const auto base = job.source.parent_path().empty() ? std::filesystem::path(".") : job.source.parent_path();
      const auto abs = std::filesystem::absolute(base / p).lexically_normal();
      const auto dir = std::filesystem::absolute(target_dir.empty() ? "." : target_dir).lexically_normal();
      doc["profile"] = abs.lexically_relative(dir).generic_string();
    }
  }
  return doc.dump(2) + "\n";
}

}  // namespace pipeplan
