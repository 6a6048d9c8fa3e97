#pragma once

#include <cstdint>

#include "evspike/models.hpp"

namespace evspike {

enum class Scheme : std::uint8_t { pipelined = 0, fall_through = 1 };

const char* to_string(Scheme s) noexcept;
Scheme parse_scheme(const std::string& s);

struct ScheduleConfig {
  Scheme scheme = Scheme::fall_through;
  double step_time_us = 1000.0;
  int patches = 1;
};

/// Affine power model: static mW per core plus dynamic pW per SynOp/s.
struct PowerModel {
  double static_mw_per_core = 0.85;
  double dynamic_pw_per_synop = 10.0;

  void validate() const;
};

struct TimingReport {
  std::uint64_t hardware_steps = 0;
  double latency_us = 0.0;
  double max_throughput_hz = 0.0;
};

struct PowerEstimate {
  double static_mw = 0.0;
  double dynamic_mw = 0.0;
  double total_mw = 0.0;
};

/// Pipeline stages of a model: one per inverted-residual block plus one per
/// synapse layer outside the blocks.
std::uint64_t pipeline_stages(const ModelGraph& g, bool backbone_only);

/// Pipelined: stages, or backbone stages + patches when the input is patched
/// (patch passes are serialized through the backbone pipeline and the head
/// completes in the last patch step). Fall-through: synapse-bearing layers.
std::uint64_t hardware_steps(const ModelGraph& g, const ScheduleConfig& cfg);

TimingReport timing(std::uint64_t steps, double step_time_us);

PowerEstimate estimate_power(int cores, double synops_per_s, const PowerModel& pm);

/// Coefficients that reproduce a measured (static, dynamic) split.
PowerModel derive_power_model(int cores, double synops_per_s, double static_mw, double dynamic_mw);

}  // namespace evspike
