#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "evspike/bench.hpp"
#include "evspike/models.hpp"

namespace evspike {

/// Fast-sigmoid-derivative surrogate g(u) = 1 / (1 + s|u - theta|)^2.
struct SurrogateSpec {
  double slope = 1.0;
};

/// Binary spikes: g(u). Graded spikes (y = u·H(u - theta)): H(u - theta) + u·g(u).
double surrogate_grad(double u, double theta, SpikeMode mode, const SurrogateSpec& spec = {});

enum class LossKind : std::uint8_t {
  focal = 0,       ///< focal loss on the decision probability
  mse = 1,         ///< 0.5 Σ_t Σ_k (y_k - onehot_k)^2
  output_sum = 2,  ///< Σ_t Σ_k y_k
};

struct TrainConfig {
  int epochs = 100;
  int batch_size = 16;
  double lr_backbone = 1e-5;
  double lr_head = 1e-5;
  SurrogateSpec surrogate;
  bool qat = true;
  bool learn_thresholds = true;
  std::uint64_t seed = 1;
  FocalLossParams focal;
  LossKind loss = LossKind::focal;
  double clip_norm = 1.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;
};

/// Learning rates used for the paper's runs of each architecture.
TrainConfig default_train_config(Architecture a);

/// Reads {"epochs", "batch_size", "lr_backbone", "lr_head", "slope", "qat",
/// "learn_thresholds", "seed", "focal_alpha", "focal_gamma", "clip_norm"}.
TrainConfig parse_train_config(const std::string& json_text, TrainConfig base = {});

struct TrainExample {
  std::vector<Tensor> frames;
  bool fall = false;
};

std::vector<TrainExample> make_examples(const std::vector<Sample>& samples, const ModelGraph& model,
                                        const BenchConfig& prep = {});

/// Trainable copies of one layer's parameters. Slots: weights, bias,
/// threshold (1 value, LIF only), S4D a, b, c.
inline constexpr std::size_t kParamSlots = 6;
enum ParamSlot : std::size_t { slot_weights = 0, slot_bias, slot_theta, slot_s4d_a, slot_s4d_b, slot_s4d_c };
using LayerTensors = std::array<std::vector<double>, kParamSlots>;
using Gradients = std::vector<LayerTensors>;

struct StepResult {
  double loss = 0.0;
  double grad_norm = 0.0;  ///< before clipping
  bool clipped = false;
};

struct EpochResult {
  int epoch = 0;
  double mean_loss = 0.0;
  std::uint64_t steps = 0;
};

/// Sequential BPTT with surrogate gradients. The forward pass runs the
/// inference kernels time-step by time-step on the (QAT-quantized) weights;
/// the backward pass sweeps layers in reverse and time in reverse within
/// each layer. S4D layers are differentiated through their convolution
/// kernel.
class Trainer {
public:
  Trainer(ModelGraph model, TrainConfig cfg);
  /// Starts from explicit real-valued parameters instead of the graph's
  /// dequantized weights.
  Trainer(ModelGraph model, std::vector<LayerParams> master, TrainConfig cfg);

  /// Loss and gradients of one example at the current parameters.
  double loss_and_gradients(const TrainExample& ex, Gradients& grads) const;
  double loss(const TrainExample& ex) const;

  /// One optimizer update on the batch mean gradient.
  StepResult train_step(std::span<const TrainExample> batch);
  /// Seeded shuffle, then batches of batch_size.
  EpochResult train_epoch(const std::vector<TrainExample>& data);
  std::vector<EpochResult> fit(const std::vector<TrainExample>& data,
                               const std::function<void(const EpochResult&)>& on_epoch = {});

  /// Graph with 8-bit quantized weights and the learned neuron parameters.
  ModelGraph export_model() const;
  /// Per-step outputs of the training forward pass.
  std::vector<Logits> forward_outputs(const TrainExample& ex) const;

  const TrainConfig& config() const noexcept { return cfg_; }
  const ModelGraph& graph() const noexcept { return graph_; }
  std::vector<LayerTensors>& params() noexcept { return values_; }
  const std::vector<LayerTensors>& params() const noexcept { return values_; }
  /// Pushes edited parameter values back into the neuron specs.
  void sync_params();
  std::uint64_t step_count() const noexcept { return step_; }

  /// EVSM at `path` plus optimizer state (master weights, Adam moments) at
  /// `path + ".opt"`.
  void save_checkpoint(const std::string& path) const;
  static Trainer load_checkpoint(const std::string& path, TrainConfig cfg);

private:
  void init_slots();
  std::vector<LayerParams> forward_params() const;
  double run(const TrainExample& ex, Gradients* grads, std::vector<Logits>* outputs) const;

  ModelGraph graph_;
  TrainConfig cfg_;
  std::vector<LayerPlan> plan_;
  std::vector<LayerTensors> values_;
  std::vector<LayerTensors> m_;
  std::vector<LayerTensors> v_;
  std::uint64_t step_ = 0;
  std::uint64_t epoch_ = 0;
};

struct FiniteDiffEntry {
  std::size_t layer = 0;
  std::size_t slot = 0;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct FiniteDiffReport {
  double max_rel_error = 0.0;
  std::vector<FiniteDiffEntry> entries;
};

/// Central differences on up to `max_params` randomly chosen parameters.
/// Relative error is |a - n| / max(|a|, |n|, 1e-8).
FiniteDiffReport finite_diff_check(const Trainer& trainer, const TrainExample& ex, double epsilon = 1e-5,
                                   std::size_t max_params = 64, std::uint64_t seed = 1);

}  // namespace evspike
