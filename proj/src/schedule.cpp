#include "evspike/schedule.hpp"

#include <set>

#include "evspike/error.hpp"

namespace evspike {

const char* to_string(Scheme s) noexcept { return s == Scheme::pipelined ? "pipelined" : "fall_through"; }

Scheme parse_scheme(const std::string& s) {
  if (s == "pipelined") return Scheme::pipelined;
  if (s == "fall_through" || s == "fall-through") return Scheme::fall_through;
  throw ConfigError("unknown scheme '" + s + "' (pipelined, fall_through)");
}

void PowerModel::validate() const {
  if (!(static_mw_per_core > 0.0) || !(dynamic_pw_per_synop > 0.0)) {
    throw ConfigError("power coefficients must be > 0");
  }
}

std::uint64_t pipeline_stages(const ModelGraph& g, bool backbone_only) {
  const std::size_t end = backbone_only ? g.backbone_layers : g.layers.size();
  std::set<int> blocks;
  std::uint64_t loose = 0;
  for (std::size_t i = 0; i < end; ++i) {
    const auto& l = g.layers[i];
    if (l.block >= 0) {
      blocks.insert(l.block);
    } else if (has_synapses(l.kind)) {
      ++loose;
    }
  }
  return blocks.size() + loose;
}

std::uint64_t hardware_steps(const ModelGraph& g, const ScheduleConfig& cfg) {
  if (cfg.patches < 1) throw ConfigError("patches must be >= 1");
  if (cfg.patches > 1) {
    if (cfg.scheme != Scheme::pipelined) {
      throw ConfigError("patched execution needs the pipelined scheme");
    }
    if (g.backbone_layers == 0 || !g.backbone_stateless()) {
      throw ConfigError("model '" + g.name + "' has no stateless backbone to patch");
    }
    return pipeline_stages(g, true) + static_cast<std::uint64_t>(cfg.patches);
  }
  if (cfg.scheme == Scheme::pipelined) return pipeline_stages(g, false);
  return g.synapse_layer_count();
}

TimingReport timing(std::uint64_t steps, double step_time_us) {
  if (steps < 1) throw ConfigError("hardware steps must be >= 1");
  if (!(step_time_us > 0.0)) throw ConfigError("step time must be > 0");
  TimingReport r;
  r.hardware_steps = steps;
  r.latency_us = static_cast<double>(steps) * step_time_us;
  r.max_throughput_hz = 1e6 / r.latency_us;
  return r;
}

PowerEstimate estimate_power(int cores, double synops_per_s, const PowerModel& pm) {
  if (cores < 1) throw ConfigError("cores must be >= 1");
  if (!(synops_per_s >= 0.0)) throw ConfigError("SynOps/s must be >= 0");
  pm.validate();
  PowerEstimate e;
  e.static_mw = cores * pm.static_mw_per_core;
  e.dynamic_mw = synops_per_s * pm.dynamic_pw_per_synop * 1e-9;
  e.total_mw = e.static_mw + e.dynamic_mw;
  return e;
}

PowerModel derive_power_model(int cores, double synops_per_s, double static_mw, double dynamic_mw) {
  if (cores < 1 || !(synops_per_s > 0.0)) throw ConfigError("need cores >= 1 and SynOps/s > 0");
  return {static_mw / cores, dynamic_mw / (synops_per_s * 1e-9)};
}

}  // namespace evspike
