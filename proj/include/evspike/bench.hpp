#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "evspike/events.hpp"
#include "evspike/models.hpp"
#include "evspike/schedule.hpp"

namespace evspike {

// --- decisions and metrics ----------------------------------------------------------

enum class FallClass : std::uint8_t { no_fall = 0, fall = 1 };

struct Decision {
  FallClass cls = FallClass::no_fall;
  double p = 0.5;  ///< estimated fall probability
};

/// Fall share of the summed output spikes; 0/0 gives 0.5.
double spike_probability(double fall_sum, double nofall_sum) noexcept;
double logistic(double x) noexcept;

/// Aggregates one sample's per-step outputs. Fall iff p > threshold, so an
/// exact tie (p = threshold) resolves to NoFall. Throws ValidationError on an
/// empty sample.
Decision decide(std::span<const Logits> outputs, DecisionMode mode, double threshold = 0.5);

struct FocalLossParams {
  double alpha = 0.9;
  double gamma = 2.0;

  void validate() const;
};

struct LabeledPrediction {
  double p = 0.5;
  int y_hat = 0;
};

inline constexpr double kFocalEps = 1e-7;

/// y=1: -α(1-p)^γ ln p; y=0: -(1-α) p^γ ln(1-p); p clamped to [ε, 1-ε].
double focal_loss(const LabeledPrediction& pred, const FocalLossParams& params);
/// d loss / d p (zero where the clamp is active).
double focal_loss_grad(const LabeledPrediction& pred, const FocalLossParams& params);

struct ConfusionCounts {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t tn = 0;
  std::uint64_t fn = 0;

  void add(bool predicted_fall, bool actual_fall) noexcept;
  std::uint64_t total() const noexcept { return tp + fp + tn + fn; }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

struct Metrics {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// F1 = 2PR/(P+R), 0 when P+R = 0.
double f1_score(double precision, double recall) noexcept;
/// Throws ValidationError when there are no samples.
Metrics metrics(const ConfusionCounts& c);

struct SparsityReport {
  double elapsed_s = 0.0;
  double cost_synops_per_s = 0.0;
  double dense_synops_per_s = 0.0;
  double sparsity = 0.0;
  bool infinite = false;  ///< no SynOps executed at all
};

/// cost = executed SynOps / simulated seconds; sparsity = dense rate / cost.
/// The dense rate counts the same patching the ledger was produced with.
SparsityReport sparsity(const SynOpsLedger& ledger, const ModelGraph& model, std::uint64_t timesteps);
SparsityReport sparsity(const SynOpsLedger& ledger, const ModelGraph& model, std::uint64_t timesteps,
                        const std::optional<PatchConfig>& patching);

// --- synthetic data -------------------------------------------------------------------

enum class MotionKind : std::uint8_t { fall = 0, walk = 1, sit = 2, idle = 3 };
const char* to_string(MotionKind k) noexcept;

/// Blob center passes linearly through the keyframes; events are emitted
/// every tick_us inside the disk of `radius` around the current center.
struct MotionScript {
  MotionKind kind = MotionKind::idle;
  double radius = 3.0;
  std::uint64_t tick_us = 1000;
  struct Key {
    std::uint64_t t_us;
    double x;
    double y;
  };
  std::vector<Key> keys;

  /// Interpolated center at time t (clamped to the first/last key).
  std::pair<double, double> center(std::uint64_t t_us) const;
};

struct SyntheticParams {
  int width = 32;
  int height = 32;
  int n_samples = 100;
  double fall_fraction = 0.07;
  double noise_rate = 0.2;      ///< background events per pixel per second
  std::uint64_t duration_us = 1'500'000;
  double events_per_px = 2.0;   ///< motion events per pixel of blob travel per pixel of diameter

  void validate() const;
};

struct Sample {
  std::string id;
  bool fall = false;
  EventStream stream;
  MotionScript script;
};

/// Deterministic per seed. Exactly round(n·fall_fraction) fall samples, at
/// seeded positions in the list.
std::vector<Sample> gen_synthetic(std::uint64_t seed, const SyntheticParams& params);

/// Directory layout: labels.csv (id,label,kind) plus <id>.evs per sample.
void save_dataset(const std::string& dir, const std::vector<Sample>& samples);
std::vector<Sample> load_dataset(const std::string& dir);

// --- benchmark --------------------------------------------------------------------------

struct PowerSpec {
  int cores = 1;
  PowerModel model;
};

struct BenchConfig {
  std::uint64_t window_us = 0;                 ///< 0: the model's timestep
  std::optional<AccumulationMode> mode;        ///< default: the model's input mode
  std::optional<RoiConfig> crop;
  int downsample = 1;
  double threshold = 0.5;
  NumericMode numeric = NumericMode::reference;
  std::optional<ScheduleConfig> schedule;
  std::optional<PowerSpec> power;
};

struct SampleResult {
  std::string id;
  bool label = false;
  bool failed = false;
  std::string error;
  Decision decision;
  std::uint64_t synops = 0;
  std::uint64_t timesteps = 0;
};

struct LayerCost {
  std::string name;
  std::uint64_t synops = 0;
  double synops_per_s = 0.0;
  std::uint64_t dense_per_step = 0;
};

struct BenchReport {
  std::string model;
  double threshold = 0.5;
  ConfusionCounts counts;
  Metrics metrics;
  std::uint64_t timesteps = 0;
  SynOpsLedger ledger;
  SparsityReport sparsity;
  std::vector<LayerCost> layers;
  std::optional<TimingReport> timing;
  std::optional<PowerEstimate> power;
  std::vector<SampleResult> samples;
  std::uint64_t failed = 0;

  std::string to_json() const;
  std::string to_text() const;
};

inline constexpr const char* kBenchSchema = "evspike.bench/1";

/// Streams every sample through crop/downsample/accumulate, a fresh session,
/// and decide(). Samples run in parallel; the report is reduced in dataset
/// order. Failing samples are recorded and excluded from the metrics.
BenchReport run_benchmark(const ModelGraph& model, const std::vector<Sample>& dataset, const BenchConfig& cfg);

/// Frames for one sample under the benchmark preprocessing.
FrameSequence prepare_frames(const EventStream& s, const ModelGraph& model, const BenchConfig& cfg);

}  // namespace evspike
