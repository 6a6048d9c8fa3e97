#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "evspike/neurons.hpp"
#include "evspike/tensor.hpp"

namespace evspike {

enum class LayerKind : std::uint8_t {
  conv2d = 0,
  dwconv2d = 1,
  pwconv2d = 2,
  fc = 3,
  avgpool = 4,
  flatten = 5,
  residual_add = 6,
};

enum class Padding : std::uint8_t { valid = 0, same = 1 };

enum class NeuronKind : std::uint8_t { identity = 0, relu = 1, sigma_delta = 2, lif = 3, s4d = 4 };

const char* to_string(LayerKind k) noexcept;
const char* to_string(NeuronKind k) noexcept;

/// Neuron model attached to a layer's outputs. Thresholds and decays are
/// per-layer scalars; S4D parameters are per output neuron (n_out × d_state,
/// row-major).
struct NeuronSpec {
  NeuronKind kind = NeuronKind::identity;
  double theta = 0.0;
  double alpha = 0.0;
  double beta = 0.0;
  SpikeMode spike_mode = SpikeMode::graded;
  int d_state = 0;
  std::vector<double> s4d_a;
  std::vector<double> s4d_b;
  std::vector<double> s4d_c;

  bool stateful() const noexcept {
    return kind == NeuronKind::sigma_delta || kind == NeuronKind::lif || kind == NeuronKind::s4d;
  }
  LifParams lif() const noexcept { return {alpha, beta, theta, spike_mode}; }
  S4dParams s4d(std::size_t neuron) const;

  friend bool operator==(const NeuronSpec&, const NeuronSpec&) = default;
};

/// Bias entries are stored in units of scale / 2^kBiasFracBits.
inline constexpr int kBiasFracBits = 8;

/// Symmetric per-tensor int8 weights.
struct QuantizedWeights {
  std::vector<std::int8_t> values;
  float scale = 1.0f;
  std::vector<std::int32_t> bias;  ///< per output channel; empty means no bias

  std::vector<double> dequantized() const;
  /// Per-output bias in activation units; zeros when there is no bias.
  std::vector<double> dequantized_bias(std::size_t n_out) const;

  friend bool operator==(const QuantizedWeights&, const QuantizedWeights&) = default;
};

/// scale = max|w| / 127, values = round(w / scale). Bias (optional) is
/// quantized on the same scale with kBiasFracBits extra fraction bits.
QuantizedWeights quantize_weights(std::span<const double> w, std::span<const double> bias = {},
                                  int bits = 8);

struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::fc;
  Shape in_shape{};   ///< nominal shapes at the model's input geometry
  Shape out_shape{};
  int out_channels = 0;  ///< conv/pwconv: kernels; fc: output units
  int kernel = 1;
  int stride = 1;
  Padding padding = Padding::valid;
  int skip_from = -1;  ///< residual_add: layer whose output is added (-1 = graph input)
  int block = -1;      ///< inverted-residual block index, -1 outside blocks
  int act_frac_bits = 8;  ///< fixed-point grid of this layer's output activations
  QuantizedWeights weights;
  NeuronSpec neuron;

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

constexpr bool has_synapses(LayerKind k) noexcept {
  return k == LayerKind::conv2d || k == LayerKind::dwconv2d || k == LayerKind::pwconv2d ||
         k == LayerKind::fc;
}

/// Output shape for an arbitrary input shape (convolutions are spatially
/// polymorphic, which patched inference relies on). Throws ValidationError
/// on channel/size mismatch or an empty output.
Shape output_shape(const LayerSpec& spec, const Shape& in);

struct ConvGeometry {
  int out_h = 0;
  int out_w = 0;
  int pad_top = 0;
  int pad_left = 0;
};

/// Output extent and leading padding along one axis.
int conv_extent(int in, int k, int s, Padding pad, int& pad_before);
ConvGeometry conv_geometry(const LayerSpec& spec, const Shape& in);

/// Expected weight count (0 for synapse-free layers).
std::size_t weight_count(const LayerSpec& spec);
/// Number of bias entries a layer may carry.
std::size_t bias_count(const LayerSpec& spec);

/// Synapses actually present for an input of the given shape, i.e. the
/// SynOps of one dense timestep. For valid padding this is
/// H_out·W_out·C_out·k·k·C_in (conv), H_out·W_out·C·k·k (dwconv),
/// N_in·N_out (fc); padded taps are not synapses.
std::uint64_t dense_synops(const LayerSpec& spec, const Shape& in);
inline std::uint64_t dense_synops(const LayerSpec& spec) { return dense_synops(spec, spec.in_shape); }

/// Per-layer counters. synops counts (nonzero input, destination synapse)
/// pairs; bias additions and neuron state updates go to neuron_updates.
struct LayerCounters {
  std::uint64_t synops = 0;
  std::uint64_t neuron_updates = 0;
  std::uint64_t timesteps = 0;

  friend bool operator==(const LayerCounters&, const LayerCounters&) = default;
};

class SynOpsLedger {
public:
  SynOpsLedger() = default;
  explicit SynOpsLedger(std::size_t layers) : layers_(layers) {}

  void resize(std::size_t layers) { layers_.resize(layers); }
  void add(std::size_t layer, std::uint64_t synops, std::uint64_t neuron_updates);
  void tick(std::size_t layer) { layers_.at(layer).timesteps += 1; }
  void merge(const SynOpsLedger& other);
  void clear();

  std::size_t layers() const noexcept { return layers_.size(); }
  const LayerCounters& operator[](std::size_t i) const { return layers_.at(i); }
  LayerCounters& at(std::size_t i) { return layers_.at(i); }
  std::uint64_t total_synops() const noexcept;
  std::uint64_t total_neuron_updates() const noexcept;

  friend bool operator==(const SynOpsLedger&, const SynOpsLedger&) = default;

private:
  std::vector<LayerCounters> layers_;
};

// --- kernels ------------------------------------------------------------------

/// Event-driven accumulation: visits only nonzero inputs and adds w·x into
/// every destination they feed. `acc` must already have the output shape; its
/// contents are accumulated into (zero it for a stateless layer, keep it for a
/// sigma-decoding receiver). Parallel over output channels with OpenMP; every
/// output sums its contributions in input raster order, so results are
/// bit-identical for any thread count. When `binary_input` is set the inputs
/// are known to be 0/1 and the weight is added without a multiply.
/// Returns the SynOps performed.
std::uint64_t accumulate_sparse(const LayerSpec& spec, std::span<const double> weights,
                                const Tensor& input, Tensor& acc, bool binary_input = false);

/// Fixed-point variant: int8 weights, activations already scaled to integer
/// grid units, accumulated into `acc` (sized to the output). Sums in 64 bits
/// and throws OverflowError (naming the layer) when a result leaves the
/// 32-bit accumulator range.
std::uint64_t accumulate_sparse_fixed(const LayerSpec& spec, std::span<const std::int64_t> input,
                                      const Shape& in_shape, std::vector<std::int64_t>& acc);

namespace reference {

/// Dense gather over every synapse, serial. Kept as the oracle for the
/// OpenMP kernels; adds into `acc` in the same per-output order.
void accumulate_dense(const LayerSpec& spec, std::span<const double> weights, const Tensor& input,
                      Tensor& acc);

}  // namespace reference

// --- layer evaluation -----------------------------------------------------------

/// Real-valued weights and per-output bias used by the double-precision path
/// (dequantized int8 for inference, master weights while training).
struct LayerParams {
  std::vector<double> weights;
  std::vector<double> bias;

  static LayerParams dequantize(const LayerSpec& spec);
};

/// Per-layer dynamic state. Only the members the attached neuron needs are
/// populated; `input_sigma` is the receiver-side sigma accumulator used when
/// the layer consumes delta-coded (SigmaDelta) input.
struct LayerState {
  std::vector<SigmaDeltaState> sigma_delta;
  std::vector<LifState> lif;
  std::vector<double> s4d;
  Tensor input_sigma;
  std::vector<std::int64_t> input_sigma_fixed;

  void reset();
};

LayerState make_state(const LayerSpec& spec, const Shape& out, bool delta_input);

struct ForwardOptions {
  bool delta_input = false;   ///< input is a SigmaDelta spike train: accumulate it
  bool binary_input = false;  ///< input values are 0/1: accumulate-only
  bool fixed_point = false;
  int input_frac_bits = 8;    ///< fixed-point grid of the incoming activations
};

/// One timestep of a synapse-bearing layer: z = Σ w·x + b over nonzero x,
/// then the attached neuron. Counts SynOps and neuron updates into
/// `counters`. If `preact` is given it receives z.
Tensor forward_layer(const LayerSpec& spec, const LayerParams& params, const Tensor& input,
                     LayerState& state, LayerCounters& counters, const ForwardOptions& opt = {},
                     Tensor* preact = nullptr);

/// Applies the neuron model in place over a pre-activation tensor.
void apply_neurons(const NeuronSpec& neuron, Tensor& z_to_y, LayerState& state,
                   const FixedPointFormat* fixed = nullptr);

/// Global average pool (C, H, W) -> (C, 1, 1).
Tensor global_avgpool(const Tensor& in);
Tensor flatten(const Tensor& in);
/// Element-wise sum of identical shapes.
Tensor residual_add(const Tensor& a, const Tensor& b);

}  // namespace evspike
