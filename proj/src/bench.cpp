#include "evspike/bench.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

#include "json.hpp"

#include "evspike/error.hpp"

namespace evspike {

double spike_probability(double fall_sum, double nofall_sum) noexcept {
  fall_sum = std::max(fall_sum, 0.0);
  nofall_sum = std::max(nofall_sum, 0.0);
  const double s = fall_sum + nofall_sum;
  return s > 0.0 ? fall_sum / s : 0.5;
}

double logistic(double x) noexcept {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Decision decide(std::span<const Logits> outputs, DecisionMode mode, double threshold) {
  if (outputs.empty()) throw ValidationError("cannot decide on a sample with no timesteps");
  Decision d;
  if (mode == DecisionMode::spike_count) {
    double sf = 0.0;
    double sn = 0.0;
    for (const auto& o : outputs) {
      sf += o[kFallUnit];
      sn += o[kNoFallUnit];
    }
    d.p = spike_probability(sf, sn);
  } else {
    double best = -std::numeric_limits<double>::infinity();
    for (const auto& o : outputs) best = std::max(best, o[kFallUnit] - o[kNoFallUnit]);
    d.p = logistic(best);
  }
  d.cls = d.p > threshold ? FallClass::fall : FallClass::no_fall;
  return d;
}

void FocalLossParams::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("focal alpha must lie in [0, 1]");
  if (!(gamma >= 0.0)) throw ConfigError("focal gamma must be >= 0");
}

double focal_loss(const LabeledPrediction& pred, const FocalLossParams& params) {
  const double p = std::clamp(pred.p, kFocalEps, 1.0 - kFocalEps);
  if (pred.y_hat == 1) return -params.alpha * std::pow(1.0 - p, params.gamma) * std::log(p);
  return -(1.0 - params.alpha) * std::pow(p, params.gamma) * std::log(1.0 - p);
}

double focal_loss_grad(const LabeledPrediction& pred, const FocalLossParams& params) {
  if (pred.p < kFocalEps || pred.p > 1.0 - kFocalEps) return 0.0;
  const double p = pred.p;
  const double g = params.gamma;
  if (pred.y_hat == 1) {
    // d/dp [-α (1-p)^γ ln p]
    const double q = 1.0 - p;
    const double dq = g > 0.0 ? g * std::pow(q, g - 1.0) * std::log(p) : 0.0;
    return params.alpha * (dq - std::pow(q, g) / p);
  }
  const double q = 1.0 - p;
  const double dp = g > 0.0 ? g * std::pow(p, g - 1.0) * std::log(q) : 0.0;
  return (1.0 - params.alpha) * (std::pow(p, g) / q - dp);
}

void ConfusionCounts::add(bool predicted_fall, bool actual_fall) noexcept {
  if (predicted_fall) {
    (actual_fall ? tp : fp) += 1;
  } else {
    (actual_fall ? fn : tn) += 1;
  }
}

double f1_score(double precision, double recall) noexcept {
  const double s = precision + recall;
  return s > 0.0 ? 2.0 * precision * recall / s : 0.0;
}

Metrics metrics(const ConfusionCounts& c) {
  if (c.total() == 0) throw ValidationError("no evaluated samples");
  Metrics m;
  const auto d = [](std::uint64_t a, std::uint64_t b) {
    return b == 0 ? 0.0 : static_cast<double>(a) / static_cast<double>(b);
  };
  m.accuracy = d(c.tp + c.tn, c.total());
  m.precision = d(c.tp, c.tp + c.fp);
  m.recall = d(c.tp, c.tp + c.fn);
  m.f1 = f1_score(m.precision, m.recall);
  return m;
}

SparsityReport sparsity(const SynOpsLedger& ledger, const ModelGraph& model, std::uint64_t timesteps) {
  return sparsity(ledger, model, timesteps, model.patch);
}

SparsityReport sparsity(const SynOpsLedger& ledger, const ModelGraph& model, std::uint64_t timesteps,
                        const std::optional<PatchConfig>& patching) {
  if (timesteps == 0) throw ValidationError("sparsity needs at least one timestep");
  if (model.timestep_us == 0) throw ValidationError("model has no timestep duration");
  SparsityReport r;
  r.elapsed_s = static_cast<double>(timesteps) * static_cast<double>(model.timestep_us) * 1e-6;
  r.cost_synops_per_s = static_cast<double>(ledger.total_synops()) / r.elapsed_s;
  r.dense_synops_per_s =
      static_cast<double>(model.dense_synops_per_step(patching)) * 1e6 / static_cast<double>(model.timestep_us);
  if (ledger.total_synops() == 0) {
    r.infinite = true;
    r.sparsity = std::numeric_limits<double>::infinity();
  } else {
    r.sparsity = r.dense_synops_per_s / r.cost_synops_per_s;
  }
  return r;
}

// --- benchmark --------------------------------------------------------------------------

FrameSequence prepare_frames(const EventStream& s, const ModelGraph& model, const BenchConfig& cfg) {
  EventStream cur = cfg.crop ? crop_roi(s, *cfg.crop) : s;
  if (cfg.downsample != 1) cur = downsample(cur, cfg.downsample);
  if (cur.width != model.input_shape.width || cur.height != model.input_shape.height) {
    throw ValidationError("sample geometry " + std::to_string(cur.width) + "x" + std::to_string(cur.height) +
                          " does not match model input " + to_string(model.input_shape));
  }
  AccumulationConfig ac;
  ac.window_us = cfg.window_us ? cfg.window_us : model.timestep_us;
  ac.mode = cfg.mode.value_or(model.input_mode);
  ac.width = cur.width;
  ac.height = cur.height;
  return accumulate(cur, ac);
}

BenchReport run_benchmark(const ModelGraph& model, const std::vector<Sample>& dataset, const BenchConfig& cfg) {
  if (dataset.empty()) throw ValidationError("benchmark dataset is empty");
  model.validate();
  auto compiled = std::make_shared<const CompiledModel>(model);
  const auto n = static_cast<long>(dataset.size());
  std::vector<SampleResult> results(dataset.size());
  std::vector<SynOpsLedger> ledgers(dataset.size());

#pragma omp parallel for schedule(dynamic, 1)
  for (long i = 0; i < n; ++i) {
    const Sample& s = dataset[static_cast<std::size_t>(i)];
    SampleResult& r = results[static_cast<std::size_t>(i)];
    r.id = s.id;
    r.label = s.fall;
    try {
      const FrameSequence seq = prepare_frames(s.stream, model, cfg);
      if (seq.frames.empty()) throw ValidationError("sample has no events");
      InferenceSession session(compiled, cfg.numeric);
      std::vector<Logits> outs;
      outs.reserve(seq.frames.size());
      for (const auto& f : seq.frames) outs.push_back(session.step(f));
      r.decision = decide(outs, model.decision, cfg.threshold);
      r.timesteps = seq.frames.size();
      r.synops = session.ledger().total_synops();
      ledgers[static_cast<std::size_t>(i)] = session.ledger();
    } catch (const std::exception& e) {
      r.failed = true;
      r.error = e.what();
    }
  }

  BenchReport rep;
  rep.model = model.name;
  rep.threshold = cfg.threshold;
  rep.ledger.resize(model.layers.size());
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& r = results[i];
    if (r.failed) {
      ++rep.failed;
      continue;
    }
    rep.counts.add(r.decision.cls == FallClass::fall, r.label);
    rep.timesteps += r.timesteps;
    rep.ledger.merge(ledgers[i]);
  }
  rep.samples = std::move(results);
  if (rep.counts.total() == 0) throw ValidationError("every benchmark sample failed");
  rep.metrics = metrics(rep.counts);
  rep.sparsity = sparsity(rep.ledger, model, rep.timesteps);

  const auto dense = model.dense_synops_per_layer(model.patch);
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    if (!has_synapses(model.layers[i].kind)) continue;
    LayerCost lc;
    lc.name = model.layers[i].name;
    lc.synops = rep.ledger[i].synops;
    lc.synops_per_s = static_cast<double>(lc.synops) / rep.sparsity.elapsed_s;
    lc.dense_per_step = dense[i];
    rep.layers.push_back(std::move(lc));
  }
  if (cfg.schedule) rep.timing = timing(hardware_steps(model, *cfg.schedule), cfg.schedule->step_time_us);
  if (cfg.power) rep.power = estimate_power(cfg.power->cores, rep.sparsity.cost_synops_per_s, cfg.power->model);
  return rep;
}

std::string BenchReport::to_json() const {
  using nlohmann::ordered_json;
  ordered_json j;
  j["schema"] = kBenchSchema;
  j["model"] = model;
  j["samples"] = samples.size();
  j["failed"] = failed;
  j["threshold"] = threshold;
  j["confusion"] = {{"tp", counts.tp}, {"fp", counts.fp}, {"tn", counts.tn}, {"fn", counts.fn}};
  j["metrics"] = {{"accuracy", metrics.accuracy},
                  {"precision", metrics.precision},
                  {"recall", metrics.recall},
                  {"f1", metrics.f1}};
  ordered_json syn;
  syn["total"] = ledger.total_synops();
  syn["neuron_updates"] = ledger.total_neuron_updates();
  syn["timesteps"] = timesteps;
  syn["elapsed_s"] = sparsity.elapsed_s;
  syn["cost_per_s"] = sparsity.cost_synops_per_s;
  syn["dense_per_s"] = sparsity.dense_synops_per_s;
  if (sparsity.infinite) {
    syn["sparsity"] = "inf";
  } else {
    syn["sparsity"] = sparsity.sparsity;
  }
  ordered_json per = ordered_json::array();
  for (const auto& l : layers) {
    per.push_back({{"name", l.name},
                   {"synops", l.synops},
                   {"synops_per_s", l.synops_per_s},
                   {"dense_per_step", l.dense_per_step}});
  }
  syn["per_layer"] = per;
  j["synops"] = syn;
  if (timing) {
    j["timing"] = {{"hardware_steps", timing->hardware_steps},
                   {"latency_us", timing->latency_us},
                   {"max_throughput_hz", timing->max_throughput_hz}};
  }
  if (power) {
    j["power"] = {{"static_mw", power->static_mw}, {"dynamic_mw", power->dynamic_mw}, {"total_mw", power->total_mw}};
  }
  ordered_json ss = ordered_json::array();
  for (const auto& s : samples) {
    ordered_json e = {{"id", s.id}, {"label", s.label ? "fall" : "nofall"}};
    if (s.failed) {
      e["error"] = s.error;
    } else {
      e["p"] = s.decision.p;
      e["predicted"] = s.decision.cls == FallClass::fall ? "fall" : "nofall";
      e["synops"] = s.synops;
      e["timesteps"] = s.timesteps;
    }
    ss.push_back(std::move(e));
  }
  j["per_sample"] = ss;
  return j.dump(2) + "\n";
}

std::string BenchReport::to_text() const {
  std::ostringstream os;
  os << std::fixed;
  os << "model " << model << ": " << (samples.size() - failed) << " samples evaluated, " << failed << " failed\n";
  os << std::setprecision(4);
  os << "  accuracy  " << metrics.accuracy << "\n"
     << "  precision " << metrics.precision << "\n"
     << "  recall    " << metrics.recall << "\n"
     << "  f1        " << metrics.f1 << "\n";
  os << "  confusion tp=" << counts.tp << " fp=" << counts.fp << " tn=" << counts.tn << " fn=" << counts.fn << "\n";
  os << std::setprecision(3);
  os << "  cost      " << sparsity.cost_synops_per_s / 1e6 << " M SynOps/s\n";
  os << "  dense     " << sparsity.dense_synops_per_s / 1e6 << " M SynOps/s\n";
  os << "  sparsity  ";
  if (sparsity.infinite) {
    os << "inf";
  } else {
    os << sparsity.sparsity << "x";
  }
  os << "\n\n";
  os << std::left << std::setw(16) << "layer" << std::right << std::setw(16) << "synops" << std::setw(16)
     << "M synops/s" << std::setw(16) << "dense/step" << "\n";
  for (const auto& l : layers) {
    os << std::left << std::setw(16) << l.name << std::right << std::setw(16) << l.synops << std::setw(16)
       << l.synops_per_s / 1e6 << std::setw(16) << l.dense_per_step << "\n";
  }
  if (timing) {
    os << "\ntiming: " << timing->hardware_steps << " hardware steps, latency " << timing->latency_us / 1e3
       << " ms, max throughput " << timing->max_throughput_hz << " Hz\n";
  }
  if (power) {
    os << "power: static " << power->static_mw << " mW, dynamic " << power->dynamic_mw << " mW, total "
       << power->total_mw << " mW\n";
  }
  return os.str();
}

}  // namespace evspike
