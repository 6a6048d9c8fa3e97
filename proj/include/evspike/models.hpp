#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "evspike/events.hpp"
#include "evspike/layers.hpp"

namespace evspike {

enum class Architecture : std::uint8_t { cnn_mlp = 0, cnn_s4d = 1, mcu_s4d = 2, mcu = 3 };
enum class NeuronMode : std::uint8_t { relu = 0, sigma_delta = 1, lif_binary = 2, lif_graded = 3 };
enum class DecisionMode : std::uint8_t { spike_count = 0, max_logit_diff = 1 };

const char* to_string(Architecture a) noexcept;
const char* to_string(NeuronMode m) noexcept;
const char* to_string(DecisionMode m) noexcept;
Architecture parse_architecture(const std::string& s);
NeuronMode parse_neuron_mode(const std::string& s);

/// Output unit order of every classifier head.
inline constexpr std::size_t kFallUnit = 0;
inline constexpr std::size_t kNoFallUnit = 1;

struct PatchConfig {
  int patch = 40;
  int stride = 30;

  friend bool operator==(const PatchConfig&, const PatchConfig&) = default;
};

/// Top-left patch offsets along one axis. Throws ConfigError unless
/// stride <= patch <= side and (side - patch) is a multiple of stride.
std::vector<int> patch_offsets(int side, const PatchConfig& cfg);

/// Immutable network topology with quantized weights. Layers [0,
/// backbone_layers) form the spatial feature extractor that patched inference
/// replays per patch; the remaining layers form the head.
struct ModelGraph {
  std::string name;
  Architecture architecture = Architecture::cnn_mlp;
  Shape input_shape{2, 160, 160};
  std::uint64_t timestep_us = 20'000;
  int group = 1;  ///< timesteps merged into one prediction
  AccumulationMode input_mode = AccumulationMode::graded;
  DecisionMode decision = DecisionMode::max_logit_diff;
  std::vector<LayerSpec> layers;
  std::size_t backbone_layers = 0;
  int blocks = 0;
  std::optional<PatchConfig> patch;

  /// Checks shape chaining, weight/bias/neuron parameter sizes and, for a
  /// complete model, the two-unit classifier output.
  void validate(bool require_classifier = true) const;
  std::size_t parameter_count() const;
  std::size_t synapse_layer_count() const;
  bool backbone_stateless() const;
  Shape output_shape() const;
  /// Dense SynOps of one timestep; patched models count every patch pass.
  std::uint64_t dense_synops_per_step() const;
  std::uint64_t dense_synops_per_step(const std::optional<PatchConfig>& patching) const;
  std::vector<std::uint64_t> dense_synops_per_layer(const std::optional<PatchConfig>& patching) const;

  friend bool operator==(const ModelGraph&, const ModelGraph&) = default;
};

/// Inverted-residual block row: expand 1x1 (ReLU) -> depthwise 3x3 (ReLU,
/// carries the stride) -> project 1x1 (linear) [+ skip when stride 1 and
/// channels match].
struct McuBlockConfig {
  int out_channels;
  int stride;
  int expansion;
};

/// Fixed 18-row block schedule; the first `blocks` rows are used.
std::span<const McuBlockConfig> mcu_schedule();

struct BuildOptions {
  int input_side = 160;
  std::vector<int> conv_channels{16, 32, 64, 128, 256};
  std::vector<int> mlp_hidden{128, 64};
  int kernel = 3;
  int stride = 2;
  double sigma_delta_theta = 0.05;
  double lif_alpha = 0.5;
  double lif_beta = 0.5;
  double lif_theta = 1.0;
  int model_dim = 128;
  int d_state = 4;
  std::uint64_t timestep_us = 0;  ///< 0 picks the architecture default (20 ms / 60 ms)
  int group = 0;                  ///< 0 picks the default (3 for spiking, 1 for S4D)
  double init_gain = 1.0;
  std::uint64_t seed = 1;
  std::optional<PatchConfig> patch;
};

ModelGraph build_cnn_mlp(NeuronMode mode, const BuildOptions& opt = {});
ModelGraph build_cnn_s4d(const BuildOptions& opt = {});
/// Backbone only: blocks + global average pool + flatten.
ModelGraph build_mcu(int blocks, const BuildOptions& opt = {});
ModelGraph build_mcu_s4d(int blocks, const BuildOptions& opt = {});
/// fc(feature_dim -> model_dim) with per-channel S4D neurons, then
/// fc(model_dim -> 2) linear readout.
std::vector<LayerSpec> build_s4d_head(int feature_dim, int model_dim, int d_state, std::uint64_t seed);

// --- execution ------------------------------------------------------------------

/// Per-layer dataflow facts derived once from the graph.
struct LayerPlan {
  bool delta_input = false;
  bool binary_input = false;
  int input_frac_bits = 8;
  int last_use = -1;  ///< index of the last layer reading this layer's output
};

/// Graph plus dequantized parameters, shareable between sessions.
class CompiledModel {
public:
  explicit CompiledModel(ModelGraph graph);
  CompiledModel(ModelGraph graph, std::vector<LayerParams> params);

  const ModelGraph& graph() const noexcept { return graph_; }
  const LayerParams& params(std::size_t i) const { return params_.at(i); }
  const LayerPlan& plan(std::size_t i) const { return plan_.at(i); }
  /// Liveness of the graph input (last layer reading it).
  int input_last_use() const noexcept { return input_last_use_; }

private:
  void build_plan();

  ModelGraph graph_;
  std::vector<LayerParams> params_;
  std::vector<LayerPlan> plan_;
  int input_last_use_ = 0;
};

/// Counts live bytes of intermediate activations and records the peak.
class ActivationTracker {
public:
  void acquire(std::size_t bytes) noexcept;
  void release(std::size_t bytes) noexcept;
  void reset() noexcept { live_ = peak_ = 0; }
  std::size_t live() const noexcept { return live_; }
  std::size_t peak() const noexcept { return peak_; }

private:
  std::size_t live_ = 0;
  std::size_t peak_ = 0;
};

enum class NumericMode : std::uint8_t { reference = 0, fixed_point = 1 };

using Logits = std::array<double, 2>;

/// Exclusive per-stream execution context: neuron states plus SynOps ledger.
class InferenceSession {
public:
  explicit InferenceSession(std::shared_ptr<const CompiledModel> model,
                            NumericMode mode = NumericMode::reference);
  explicit InferenceSession(const ModelGraph& graph, NumericMode mode = NumericMode::reference);

  /// Zeroes every neuron state (the ledger is kept).
  void reset();

  /// One full-frame timestep through every layer.
  Logits infer_step(const Tensor& frame);
  /// Backbone run per patch (row-major), assembled into the full-input
  /// feature-map geometry by nearest-patch ownership.
  Tensor patched_features(const Tensor& frame, const PatchConfig& cfg);
  /// Patched backbone followed by one head evaluation.
  Logits patched_step(const Tensor& frame, const PatchConfig& cfg);
  /// Uses the model's deployment patching when it has one.
  Logits step(const Tensor& frame);

  const SynOpsLedger& ledger() const noexcept { return ledger_; }
  void clear_ledger() { ledger_.clear(); }
  void set_tracker(ActivationTracker* t) noexcept { tracker_ = t; }
  const CompiledModel& model() const noexcept { return *model_; }
  const LayerState& state(std::size_t layer) const { return states_.at(layer); }

private:
  Tensor run_layers(std::size_t begin, std::size_t end, const Tensor& input, bool use_state);
  Logits to_logits(const Tensor& out) const;

  std::shared_ptr<const CompiledModel> model_;
  NumericMode mode_;
  std::vector<LayerState> states_;
  std::vector<LayerState> scratch_states_;
  SynOpsLedger ledger_;
  ActivationTracker* tracker_ = nullptr;
};

// --- model container ----------------------------------------------------------------

/// EVSM v1: header, layer specs, little-endian int8 weight blobs with float32
/// scales, neuron parameters, CRC-32 trailer.
std::vector<std::uint8_t> save_model(const ModelGraph& g);
ModelGraph load_model(std::span<const std::uint8_t> bytes);
void save_model_file(const ModelGraph& g, const std::string& path);
ModelGraph load_model_file(const std::string& path);

/// Model-config JSON: {"architecture", "neuron", "input_side", "conv_channels",
/// "mlp_hidden", "blocks", "model_dim", "d_state", "theta", "alpha", "beta",
/// "timestep_us", "group", "seed", "patch": {"size", "stride"}}.
struct ModelConfig {
  Architecture architecture = Architecture::cnn_mlp;
  NeuronMode neuron = NeuronMode::relu;
  int blocks = 13;
  BuildOptions options;
};

ModelConfig parse_model_config(const std::string& json_text);
ModelGraph build_model(const ModelConfig& cfg);

/// Aligned text table: one row per layer with shapes, parameters and dense
/// SynOps per step, plus totals.
std::string describe_model(const ModelGraph& g);

}  // namespace evspike
