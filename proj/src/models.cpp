#include "evspike/models.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <random>
#include <sstream>

#include "evspike/error.hpp"

namespace evspike {

const char* to_string(Architecture a) noexcept {
  switch (a) {
    case Architecture::cnn_mlp: return "cnn_mlp";
    case Architecture::cnn_s4d: return "cnn_s4d";
    case Architecture::mcu_s4d: return "mcu_s4d";
    case Architecture::mcu: return "mcu";
  }
  return "?";
}

const char* to_string(NeuronMode m) noexcept {
  switch (m) {
    case NeuronMode::relu: return "relu";
    case NeuronMode::sigma_delta: return "sigma_delta";
    case NeuronMode::lif_binary: return "lif_binary";
    case NeuronMode::lif_graded: return "lif_graded";
  }
  return "?";
}

const char* to_string(DecisionMode m) noexcept {
  return m == DecisionMode::spike_count ? "spike_count" : "max_logit_diff";
}

Architecture parse_architecture(const std::string& s) {
  for (auto a : {Architecture::cnn_mlp, Architecture::cnn_s4d, Architecture::mcu_s4d, Architecture::mcu}) {
    if (s == to_string(a)) return a;
  }
  throw ConfigError("unknown architecture '" + s + "' (cnn_mlp, cnn_s4d, mcu_s4d, mcu)");
}

NeuronMode parse_neuron_mode(const std::string& s) {
  for (auto m : {NeuronMode::relu, NeuronMode::sigma_delta, NeuronMode::lif_binary, NeuronMode::lif_graded}) {
    if (s == to_string(m)) return m;
  }
  throw ConfigError("unknown neuron mode '" + s + "' (relu, sigma_delta, lif_binary, lif_graded)");
}

std::vector<int> patch_offsets(int side, const PatchConfig& cfg) {
  if (cfg.patch <= 0 || cfg.stride <= 0 || cfg.stride > cfg.patch || cfg.patch > side) {
    throw ConfigError("patch " + std::to_string(cfg.patch) + " / stride " + std::to_string(cfg.stride) +
                      " invalid for input side " + std::to_string(side));
  }
  if ((side - cfg.patch) % cfg.stride != 0) {
    throw ConfigError("(side - patch) = " + std::to_string(side - cfg.patch) +
                      " is not a multiple of stride " + std::to_string(cfg.stride));
  }
  std::vector<int> out;
  for (int o = 0; o + cfg.patch <= side; o += cfg.stride) out.push_back(o);
  return out;
}

// --- graph properties ---------------------------------------------------------------

namespace {

Shape layer_output(const LayerSpec& spec, const Shape& in, const std::vector<Shape>& outs,
                   const Shape& graph_in, std::size_t index) {
  if (spec.kind == LayerKind::residual_add) {
    if (spec.skip_from < -1 || spec.skip_from >= static_cast<int>(index)) {
      throw ValidationError("layer '" + spec.name + "' skips from invalid layer " +
                            std::to_string(spec.skip_from));
    }
    const Shape skip = spec.skip_from < 0 ? graph_in : outs[static_cast<std::size_t>(spec.skip_from)];
    if (!(skip == in)) {
      throw ValidationError("layer '" + spec.name + "' adds " + to_string(skip) + " to " + to_string(in));
    }
    return in;
  }
  return output_shape(spec, in);
}

std::vector<Shape> chain_shapes(const std::vector<LayerSpec>& layers, std::size_t begin,
                                std::size_t end, const Shape& in) {
  std::vector<Shape> outs(layers.size());
  Shape cur = in;
  for (std::size_t i = begin; i < end; ++i) {
    // ranges never reference layers before `begin` except through their input
    if (layers[i].kind == LayerKind::residual_add && layers[i].skip_from < static_cast<int>(begin) &&
        layers[i].skip_from != static_cast<int>(begin) - 1) {
      throw ValidationError("residual in layer range reaches outside the range");
    }
    std::vector<Shape> view = outs;
    if (begin > 0 && layers[i].kind == LayerKind::residual_add &&
        layers[i].skip_from == static_cast<int>(begin) - 1) {
      view[begin - 1] = in;
    }
    cur = layer_output(layers[i], cur, view, in, i);
    outs[i] = cur;
  }
  return outs;
}

}  // namespace

void ModelGraph::validate(bool require_classifier) const {
  if (layers.empty()) throw ValidationError("model '" + name + "' has no layers");
  if (backbone_layers > layers.size()) throw ValidationError("backbone extends past the layer list");
  if (group < 1) throw ValidationError("group must be >= 1");
  if (timestep_us == 0) throw ValidationError("timestep must be > 0");
  std::vector<Shape> outs(layers.size());
  Shape cur = input_shape;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    if (has_synapses(l.kind) && !(l.in_shape == cur)) {
      throw ValidationError("layer '" + l.name + "' declares input " + to_string(l.in_shape) +
                            " but receives " + to_string(cur));
    }
    cur = layer_output(l, cur, outs, input_shape, i);
    if (!(l.out_shape == cur)) {
      throw ValidationError("layer '" + l.name + "' declares output " + to_string(l.out_shape) +
                            " but produces " + to_string(cur));
    }
    outs[i] = cur;
    if (l.weights.values.size() != weight_count(l)) {
      throw ValidationError("layer '" + l.name + "' has " + std::to_string(l.weights.values.size()) +
                            " weights, expected " + std::to_string(weight_count(l)));
    }
    if (!l.weights.bias.empty() && l.weights.bias.size() != bias_count(l)) {
      throw ValidationError("layer '" + l.name + "' bias size mismatch");
    }
    if (!(l.weights.scale > 0.0f)) throw ValidationError("layer '" + l.name + "' has non-positive scale");
    const NeuronSpec& n = l.neuron;
    if (n.kind != NeuronKind::identity && !has_synapses(l.kind)) {
      throw ValidationError("layer '" + l.name + "' attaches a neuron to a synapse-free layer");
    }
    if (n.kind == NeuronKind::lif) evspike::validate(n.lif());
    if (n.kind == NeuronKind::sigma_delta && !(n.theta >= 0.0)) {
      throw ValidationError("layer '" + l.name + "' SigmaDelta threshold must be >= 0");
    }
    if (n.kind == NeuronKind::s4d) {
      const std::size_t want = cur.size() * static_cast<std::size_t>(n.d_state);
      if (n.d_state < 1 || n.s4d_a.size() != want || n.s4d_b.size() != want || n.s4d_c.size() != want) {
        throw ValidationError("layer '" + l.name + "' S4D parameters must be n_out x d_state");
      }
    }
  }
  if (require_classifier && cur.size() != 2) {
    throw ValidationError("model '" + name + "' must end in 2 output units (Fall, NoFall), has " +
                          std::to_string(cur.size()));
  }
  if (patch) {
    patch_offsets(input_shape.height, *patch);
    patch_offsets(input_shape.width, *patch);
  }
}

std::size_t ModelGraph::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) {
    n += l.weights.values.size() + l.weights.bias.size();
    n += l.neuron.s4d_a.size() + l.neuron.s4d_b.size() + l.neuron.s4d_c.size();
  }
  return n;
}

std::size_t ModelGraph::synapse_layer_count() const {
  return static_cast<std::size_t>(
      std::count_if(layers.begin(), layers.end(), [](const LayerSpec& l) { return has_synapses(l.kind); }));
}

bool ModelGraph::backbone_stateless() const {
  for (std::size_t i = 0; i < backbone_layers; ++i) {
    if (layers[i].neuron.stateful()) return false;
  }
  return true;
}

Shape ModelGraph::output_shape() const { return layers.empty() ? input_shape : layers.back().out_shape; }

std::uint64_t ModelGraph::dense_synops_per_step() const { return dense_synops_per_step(patch); }

std::uint64_t ModelGraph::dense_synops_per_step(const std::optional<PatchConfig>& patching) const {
  std::uint64_t total = 0;
  for (auto v : dense_synops_per_layer(patching)) total += v;
  return total;
}

std::vector<std::uint64_t> ModelGraph::dense_synops_per_layer(const std::optional<PatchConfig>& patching) const {
  std::vector<std::uint64_t> out(layers.size(), 0);
  std::size_t head_begin = 0;
  if (patching) {
    const auto ny = patch_offsets(input_shape.height, *patching).size();
    const auto nx = patch_offsets(input_shape.width, *patching).size();
    if (ny * nx > 1) {
      const Shape patch_in{input_shape.channels, patching->patch, patching->patch};
      const auto outs = chain_shapes(layers, 0, backbone_layers, patch_in);
      Shape cur = patch_in;
      for (std::size_t i = 0; i < backbone_layers; ++i) {
        out[i] = dense_synops(layers[i], cur) * ny * nx;
        cur = outs[i];
      }
      head_begin = backbone_layers;
    }
  }
  for (std::size_t i = head_begin; i < layers.size(); ++i) out[i] = dense_synops(layers[i]);
  return out;
}

// --- builders -------------------------------------------------------------------------

namespace {

NeuronSpec neuron_for(NeuronMode mode, const BuildOptions& opt) {
  NeuronSpec n;
  switch (mode) {
    case NeuronMode::relu: n.kind = NeuronKind::relu; break;
    case NeuronMode::sigma_delta:
      n.kind = NeuronKind::sigma_delta;
      n.theta = opt.sigma_delta_theta;
      break;
    case NeuronMode::lif_binary:
    case NeuronMode::lif_graded:
      n.kind = NeuronKind::lif;
      n.alpha = opt.lif_alpha;
      n.beta = opt.lif_beta;
      n.theta = opt.lif_theta;
      n.spike_mode = mode == NeuronMode::lif_binary ? SpikeMode::binary : SpikeMode::graded;
      break;
  }
  return n;
}

std::size_t fan_in(const LayerSpec& l) {
  switch (l.kind) {
    case LayerKind::conv2d:
      return static_cast<std::size_t>(l.kernel * l.kernel) * static_cast<std::size_t>(l.in_shape.channels);
    case LayerKind::dwconv2d: return static_cast<std::size_t>(l.kernel * l.kernel);
    case LayerKind::pwconv2d: return static_cast<std::size_t>(l.in_shape.channels);
    case LayerKind::fc: return l.in_shape.size();
    default: return 1;
  }
}

// uniform fan-in scaled init, quantized to int8 with zero bias
void init_weights(LayerSpec& l, std::mt19937_64& rng, double gain) {
  const double lim = gain * std::sqrt(3.0 / static_cast<double>(fan_in(l)));
  std::uniform_real_distribution<double> u(-lim, lim);
  std::vector<double> w(weight_count(l));
  for (auto& v : w) v = u(rng);
  const std::vector<double> b(bias_count(l), 0.0);
  l.weights = quantize_weights(w, b);
}

LayerSpec make_layer(std::string name, LayerKind kind, const Shape& in, int out_channels, int kernel,
                     int stride, Padding pad) {
  LayerSpec l;
  l.name = std::move(name);
  l.kind = kind;
  l.in_shape = in;
  l.out_channels = out_channels;
  l.kernel = kernel;
  l.stride = stride;
  l.padding = pad;
  l.out_shape = output_shape(l, in);
  return l;
}

void append_cnn(ModelGraph& g, const BuildOptions& opt, const NeuronSpec& neuron, std::mt19937_64& rng) {
  Shape cur = g.input_shape;
  int idx = 1;
  for (int ch : opt.conv_channels) {
    auto l = make_layer("conv" + std::to_string(idx++), LayerKind::conv2d, cur, ch, opt.kernel,
                        opt.stride, Padding::valid);
    l.neuron = neuron;
    init_weights(l, rng, opt.init_gain);
    cur = l.out_shape;
    g.layers.push_back(std::move(l));
  }
  g.backbone_layers = g.layers.size();
}

void check_options(const BuildOptions& opt) {
  if (opt.input_side < 1) throw ConfigError("input_side must be >= 1");
  if (opt.model_dim < 1 || opt.d_state < 1) throw ConfigError("S4D dims must be >= 1");
}

}  // namespace

ModelGraph build_cnn_mlp(NeuronMode mode, const BuildOptions& opt) {
  check_options(opt);
  std::mt19937_64 rng(opt.seed);
  ModelGraph g;
  g.name = std::string("cnn_mlp_") + to_string(mode);
  g.architecture = Architecture::cnn_mlp;
  g.input_shape = {2, opt.input_side, opt.input_side};
  g.timestep_us = opt.timestep_us ? opt.timestep_us : 20'000;
  g.group = opt.group ? opt.group : 3;
  g.input_mode = mode == NeuronMode::lif_binary ? AccumulationMode::binary : AccumulationMode::graded;
  g.decision = mode == NeuronMode::relu ? DecisionMode::max_logit_diff : DecisionMode::spike_count;
  const NeuronSpec neuron = neuron_for(mode, opt);
  append_cnn(g, opt, neuron, rng);

  Shape cur = g.layers.back().out_shape;
  auto flat = make_layer("flatten", LayerKind::flatten, cur, 0, 1, 1, Padding::valid);
  cur = flat.out_shape;
  g.layers.push_back(std::move(flat));
  std::vector<int> widths = opt.mlp_hidden;
  widths.push_back(2);
  int idx = 1;
  for (int w : widths) {
    auto l = make_layer("fc" + std::to_string(idx++), LayerKind::fc, cur, w, 1, 1, Padding::valid);
    l.neuron = neuron;
    init_weights(l, rng, opt.init_gain);
    cur = l.out_shape;
    g.layers.push_back(std::move(l));
  }
  g.validate();
  return g;
}

std::vector<LayerSpec> build_s4d_head(int feature_dim, int model_dim, int d_state, std::uint64_t seed) {
  if (feature_dim < 1 || model_dim < 1 || d_state < 1) throw ConfigError("S4D head dims must be >= 1");
  std::mt19937_64 rng(seed);
  std::vector<LayerSpec> head;
  auto enc = make_layer("s4d_encode", LayerKind::fc, Shape{feature_dim, 1, 1}, model_dim, 1, 1, Padding::valid);
  init_weights(enc, rng, 1.0);
  NeuronSpec n;
  n.kind = NeuronKind::s4d;
  n.d_state = d_state;
  const auto total = static_cast<std::size_t>(model_dim) * static_cast<std::size_t>(d_state);
  n.s4d_a.resize(total);
  n.s4d_b.resize(total);
  n.s4d_c.resize(total);
  std::uniform_real_distribution<double> jitter(-0.02, 0.02);
  std::uniform_real_distribution<double> cdist(-1.0, 1.0);
  const double cnorm = 1.0 / std::sqrt(static_cast<double>(d_state));
  for (std::size_t i = 0; i < total; ++i) {
    const auto d = static_cast<int>(i % static_cast<std::size_t>(d_state));
    // decays spread over time scales 1/(1-a) of 2, 4, 8, ... steps
    const double a = std::clamp(1.0 - std::ldexp(0.5, -d) + jitter(rng), 0.0, 0.995);
    n.s4d_a[i] = a;
    n.s4d_b[i] = 1.0 - a;
    n.s4d_c[i] = cdist(rng) * cnorm;
  }
  enc.neuron = std::move(n);
  head.push_back(std::move(enc));
  auto dec = make_layer("s4d_decode", LayerKind::fc, Shape{model_dim, 1, 1}, 2, 1, 1, Padding::valid);
  init_weights(dec, rng, 1.0);
  head.push_back(std::move(dec));
  return head;
}

namespace {

void append_s4d_head(ModelGraph& g, const BuildOptions& opt) {
  Shape cur = g.layers.back().out_shape;
  if (cur.height * cur.width != 1) {
    auto pool = make_layer("avgpool", LayerKind::avgpool, cur, 0, 1, 1, Padding::valid);
    cur = pool.out_shape;
    g.layers.push_back(std::move(pool));
  }
  if (g.layers.back().kind != LayerKind::flatten) {
    auto flat = make_layer("flatten", LayerKind::flatten, cur, 0, 1, 1, Padding::valid);
    cur = flat.out_shape;
    g.layers.push_back(std::move(flat));
  }
  for (auto& l : build_s4d_head(static_cast<int>(cur.size()), opt.model_dim, opt.d_state, opt.seed + 7919)) {
    g.layers.push_back(std::move(l));
  }
}

}  // namespace

ModelGraph build_cnn_s4d(const BuildOptions& opt) {
  check_options(opt);
  std::mt19937_64 rng(opt.seed);
  ModelGraph g;
  g.name = "cnn_s4d";
  g.architecture = Architecture::cnn_s4d;
  g.input_shape = {2, opt.input_side, opt.input_side};
  g.timestep_us = opt.timestep_us ? opt.timestep_us : 60'000;
  g.group = opt.group ? opt.group : 1;
  g.decision = DecisionMode::max_logit_diff;
  append_cnn(g, opt, neuron_for(NeuronMode::relu, opt), rng);
  append_s4d_head(g, opt);
  g.validate();
  return g;
}

std::span<const McuBlockConfig> mcu_schedule() {
  // channels grow at the stride-2 stages; with 40x40 patches the map is 2x2
  // after block 13, below the 3x3 depthwise kernel for any further stride-2 row
  static constexpr McuBlockConfig kSchedule[18] = {
      {16, 2, 6},  {24, 2, 6},  {24, 1, 6},  {32, 2, 6},  {32, 1, 6},  {32, 1, 6},
      {64, 2, 6},  {64, 1, 6},  {64, 1, 6},  {96, 1, 6},  {96, 1, 6},  {96, 1, 6},
      {160, 2, 6}, {160, 1, 6}, {160, 1, 6}, {320, 2, 6}, {320, 1, 6}, {320, 1, 6},
  };
  return kSchedule;
}

ModelGraph build_mcu(int blocks, const BuildOptions& opt) {
  if (blocks < 1 || blocks > 18) throw ConfigError("MCU blocks must lie in [1, 18], got " + std::to_string(blocks));
  check_options(opt);
  std::mt19937_64 rng(opt.seed);
  ModelGraph g;
  g.name = "mcu" + std::to_string(blocks) + "b";
  g.architecture = Architecture::mcu;
  g.input_shape = {2, opt.input_side, opt.input_side};
  g.timestep_us = opt.timestep_us ? opt.timestep_us : 60'000;
  g.group = opt.group ? opt.group : 1;
  g.blocks = blocks;
  g.patch = opt.patch;

  NeuronSpec relu;
  relu.kind = NeuronKind::relu;
  Shape cur = g.input_shape;
  const auto sched = mcu_schedule();
  for (int b = 0; b < blocks; ++b) {
    const auto& row = sched[static_cast<std::size_t>(b)];
    const int block_input = static_cast<int>(g.layers.size()) - 1;
    const Shape in = cur;
    const int hidden = in.channels * row.expansion;
    const std::string tag = "b" + std::to_string(b + 1);

    auto expand = make_layer(tag + "_expand", LayerKind::pwconv2d, cur, hidden, 1, 1, Padding::valid);
    expand.neuron = relu;
    expand.block = b;
    init_weights(expand, rng, opt.init_gain);
    cur = expand.out_shape;
    g.layers.push_back(std::move(expand));

    auto dw = make_layer(tag + "_dw", LayerKind::dwconv2d, cur, hidden, 3, row.stride, Padding::same);
    dw.neuron = relu;
    dw.block = b;
    init_weights(dw, rng, opt.init_gain);
    cur = dw.out_shape;
    g.layers.push_back(std::move(dw));

    auto project = make_layer(tag + "_project", LayerKind::pwconv2d, cur, row.out_channels, 1, 1, Padding::valid);
    project.block = b;
    init_weights(project, rng, opt.init_gain);
    cur = project.out_shape;
    g.layers.push_back(std::move(project));

    if (row.stride == 1 && row.out_channels == in.channels) {
      auto add = make_layer(tag + "_add", LayerKind::residual_add, cur, 0, 1, 1, Padding::valid);
      add.skip_from = block_input;
      add.block = b;
      g.layers.push_back(std::move(add));
    }
  }
  g.backbone_layers = g.layers.size();
  auto pool = make_layer("avgpool", LayerKind::avgpool, cur, 0, 1, 1, Padding::valid);
  cur = pool.out_shape;
  g.layers.push_back(std::move(pool));
  g.layers.push_back(make_layer("flatten", LayerKind::flatten, cur, 0, 1, 1, Padding::valid));
  g.validate(false);
  return g;
}

ModelGraph build_mcu_s4d(int blocks, const BuildOptions& opt) {
  BuildOptions o = opt;
  if (!o.patch) o.patch = PatchConfig{40, 30};
  ModelGraph g = build_mcu(blocks, o);
  g.name = "mcu" + std::to_string(blocks) + "b_s4d";
  g.architecture = Architecture::mcu_s4d;
  g.decision = DecisionMode::max_logit_diff;
  append_s4d_head(g, o);
  g.validate();
  return g;
}

// --- compiled plan ------------------------------------------------------------------

CompiledModel::CompiledModel(ModelGraph graph) : graph_(std::move(graph)) {
  graph_.validate(false);
  params_.reserve(graph_.layers.size());
  for (const auto& l : graph_.layers) params_.push_back(LayerParams::dequantize(l));
  build_plan();
}

CompiledModel::CompiledModel(ModelGraph graph, std::vector<LayerParams> params)
    : graph_(std::move(graph)), params_(std::move(params)) {
  graph_.validate(false);
  if (params_.size() != graph_.layers.size()) throw ValidationError("parameter list size mismatch");
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& l = graph_.layers[i];
    if (params_[i].weights.size() != weight_count(l) || params_[i].bias.size() != bias_count(l)) {
      throw ValidationError("parameters of layer '" + l.name + "' have the wrong size");
    }
  }
  build_plan();
}

void CompiledModel::build_plan() {
  constexpr int kInputFracBits = 8;
  struct Flow {
    bool delta;
    bool binary;
    int frac;
  };
  const auto n = graph_.layers.size();
  plan_.assign(n, {});
  std::vector<Flow> out(n);
  const Flow input{false, graph_.input_mode == AccumulationMode::binary, kInputFracBits};
  input_last_use_ = n > 0 ? 0 : -1;

  for (std::size_t i = 0; i < n; ++i) {
    const auto& l = graph_.layers[i];
    const Flow in = i == 0 ? input : out[i - 1];
    plan_[i].delta_input = in.delta;
    plan_[i].binary_input = in.binary;
    plan_[i].input_frac_bits = in.frac;
    if (i > 0) plan_[i - 1].last_use = static_cast<int>(i);

    switch (l.kind) {
      case LayerKind::flatten: out[i] = in; break;
      case LayerKind::avgpool: out[i] = {in.delta, false, in.frac}; break;
      case LayerKind::residual_add: {
        const Flow skip = l.skip_from < 0 ? input : out[static_cast<std::size_t>(l.skip_from)];
        if (in.delta || skip.delta) {
          throw ConfigError("layer '" + l.name + "': residual add of delta-coded activations is unsupported");
        }
        out[i] = {false, false, std::max(in.frac, skip.frac)};
        if (l.skip_from < 0) {
          input_last_use_ = static_cast<int>(i);
        } else {
          auto& lu = plan_[static_cast<std::size_t>(l.skip_from)].last_use;
          lu = std::max(lu, static_cast<int>(i));
        }
        break;
      }
      default:
        out[i] = {l.neuron.kind == NeuronKind::sigma_delta,
                  l.neuron.kind == NeuronKind::lif && l.neuron.spike_mode == SpikeMode::binary,
                  l.act_frac_bits};
        break;
    }
  }
}

// --- session --------------------------------------------------------------------------

void ActivationTracker::acquire(std::size_t bytes) noexcept {
  live_ += bytes;
  peak_ = std::max(peak_, live_);
}

void ActivationTracker::release(std::size_t bytes) noexcept { live_ -= std::min(live_, bytes); }

InferenceSession::InferenceSession(std::shared_ptr<const CompiledModel> model, NumericMode mode)
    : model_(std::move(model)), mode_(mode) {
  const auto& g = model_->graph();
  states_.reserve(g.layers.size());
  scratch_states_.reserve(g.layers.size());
  for (std::size_t i = 0; i < g.layers.size(); ++i) {
    states_.push_back(make_state(g.layers[i], g.layers[i].out_shape, model_->plan(i).delta_input));
    scratch_states_.emplace_back();
  }
  ledger_.resize(g.layers.size());
}

InferenceSession::InferenceSession(const ModelGraph& graph, NumericMode mode)
    : InferenceSession(std::make_shared<const CompiledModel>(graph), mode) {}

void InferenceSession::reset() {
  for (auto& s : states_) s.reset();
}

Tensor InferenceSession::run_layers(std::size_t begin, std::size_t end, const Tensor& input,
                                    bool use_state) {
  const auto& g = model_->graph();
  std::vector<std::optional<Tensor>> outs(end);
  auto get = [&](int idx) -> const Tensor& {
    if (idx == static_cast<int>(begin) - 1) return input;
    return *outs.at(static_cast<std::size_t>(idx));
  };

  for (std::size_t i = begin; i < end; ++i) {
    const auto& spec = g.layers[i];
    const auto& plan = model_->plan(i);
    const Tensor& in = get(static_cast<int>(i) - 1);
    Tensor out;
    if (spec.kind == LayerKind::residual_add) {
      out = residual_add(in, get(spec.skip_from));
      ledger_.at(i).timesteps += 1;
    } else {
      ForwardOptions opt;
      opt.delta_input = plan.delta_input;
      opt.binary_input = plan.binary_input;
      opt.fixed_point = mode_ == NumericMode::fixed_point;
      opt.input_frac_bits = plan.input_frac_bits;
      LayerState& st = use_state ? states_[i] : scratch_states_[i];
      out = forward_layer(spec, model_->params(i), in, st, ledger_.at(i), opt);
    }
    if (mode_ == NumericMode::fixed_point && spec.kind == LayerKind::avgpool) {
      const FixedPointFormat fmt{plan.input_frac_bits, 24};
      for (auto& v : out.values()) v = fmt.quantize(v);
    }
    if (tracker_) tracker_->acquire(out.bytes());
    outs[i] = std::move(out);

    for (std::size_t j = begin; j <= i; ++j) {
      if (j + 1 == end || !outs[j] || model_->plan(j).last_use > static_cast<int>(i)) continue;
      if (tracker_) tracker_->release(outs[j]->bytes());
      outs[j].reset();
    }
  }
  return std::move(*outs[end - 1]);
}

Logits InferenceSession::to_logits(const Tensor& out) const {
  if (out.size() != 2) {
    throw ValidationError("model output has " + std::to_string(out.size()) + " units, expected 2");
  }
  return {out[kFallUnit], out[kNoFallUnit]};
}

Logits InferenceSession::infer_step(const Tensor& frame) {
  const auto& g = model_->graph();
  if (!(frame.shape() == g.input_shape)) {
    throw ValidationError("frame shape " + to_string(frame.shape()) + " does not match model input " +
                          to_string(g.input_shape));
  }
  Tensor out = run_layers(0, g.layers.size(), frame, true);
  if (tracker_) tracker_->release(out.bytes());
  return to_logits(out);
}

namespace {

struct AxisGeometry {
  long long stride = 1;  // total input pixels per output cell
  double offset = 0.0;   // input coordinate of output cell 0's receptive-field center
  int extent = 0;
};

// Composes conv strides/paddings of a layer range along one axis.
AxisGeometry axis_geometry(const std::vector<LayerSpec>& layers, std::size_t end, int side) {
  AxisGeometry g;
  g.extent = side;
  for (std::size_t i = 0; i < end; ++i) {
    const auto& l = layers[i];
    switch (l.kind) {
      case LayerKind::conv2d:
      case LayerKind::dwconv2d:
      case LayerKind::pwconv2d: {
        int pad = 0;
        int out = 0;
        if (l.padding == Padding::valid) {
          out = g.extent >= l.kernel ? (g.extent - l.kernel) / l.stride + 1 : 0;
        } else {
          out = (g.extent + l.stride - 1) / l.stride;
          pad = std::max((out - 1) * l.stride + l.kernel - g.extent, 0) / 2;
        }
        g.offset += static_cast<double>(g.stride) * ((l.kernel - 1) / 2.0 - pad);
        g.stride *= l.stride;
        g.extent = out;
        break;
      }
      case LayerKind::residual_add: break;
      default:
        throw ConfigError("layer '" + l.name + "' (" + to_string(l.kind) +
                          ") cannot be part of a patched backbone");
    }
  }
  return g;
}

struct Ownership {
  std::size_t patch;  // index into the offset list
  int local;          // cell inside that patch's output
};

// For every full-geometry output cell: the patch whose center is nearest to
// the cell's receptive-field center (ties to the lower patch) and the cell
// of that patch's output closest to the same input position.
std::vector<Ownership> own_cells(const AxisGeometry& full, const AxisGeometry& part,
                                 const std::vector<int>& offsets, int patch) {
  std::vector<Ownership> out(static_cast<std::size_t>(full.extent));
  for (int j = 0; j < full.extent; ++j) {
    const double center = static_cast<double>(j) * static_cast<double>(full.stride) + full.offset;
    std::size_t best = 0;
    double best_d = 1e300;
    for (std::size_t p = 0; p < offsets.size(); ++p) {
      const double d = std::abs(center - (offsets[p] + (patch - 1) / 2.0));
      if (d < best_d) {
        best_d = d;
        best = p;
      }
    }
    const double local = (center - offsets[best] - part.offset) / static_cast<double>(part.stride);
    const auto idx = static_cast<int>(std::clamp<long>(std::lround(local), 0, part.extent - 1));
    out[static_cast<std::size_t>(j)] = {best, idx};
  }
  return out;
}

}  // namespace

Tensor InferenceSession::patched_features(const Tensor& frame, const PatchConfig& cfg) {
  const auto& g = model_->graph();
  if (!(frame.shape() == g.input_shape)) {
    throw ValidationError("frame shape " + to_string(frame.shape()) + " does not match model input " +
                          to_string(g.input_shape));
  }
  if (g.backbone_layers == 0) throw ConfigError("model '" + g.name + "' has no backbone to patch");
  const Shape in = frame.shape();
  const auto off_y = patch_offsets(in.height, cfg);
  const auto off_x = patch_offsets(in.width, cfg);

  if (off_y.size() == 1 && off_x.size() == 1 && cfg.patch == in.height && cfg.patch == in.width) {
    return run_layers(0, g.backbone_layers, frame, true);
  }
  if (!g.backbone_stateless()) {
    throw ConfigError("model '" + g.name +
                      "' has a stateful backbone; patches reuse activation memory and cannot keep state");
  }

  const AxisGeometry full_y = axis_geometry(g.layers, g.backbone_layers, in.height);
  const AxisGeometry full_x = axis_geometry(g.layers, g.backbone_layers, in.width);
  const AxisGeometry part_y = axis_geometry(g.layers, g.backbone_layers, cfg.patch);
  const AxisGeometry part_x = axis_geometry(g.layers, g.backbone_layers, cfg.patch);
  const auto own_y = own_cells(full_y, part_y, off_y, cfg.patch);
  const auto own_x = own_cells(full_x, part_x, off_x, cfg.patch);

  const Shape out_shape = g.layers[g.backbone_layers - 1].out_shape;
  Tensor assembled(out_shape);
  if (tracker_) tracker_->acquire(assembled.bytes());

  const Shape patch_shape{in.channels, cfg.patch, cfg.patch};
  for (std::size_t py = 0; py < off_y.size(); ++py) {
    for (std::size_t px = 0; px < off_x.size(); ++px) {
      Tensor patch(patch_shape);
      if (tracker_) tracker_->acquire(patch.bytes());
      for (int c = 0; c < in.channels; ++c) {
        for (int y = 0; y < cfg.patch; ++y) {
          for (int x = 0; x < cfg.patch; ++x) patch.at(c, y, x) = frame.at(c, off_y[py] + y, off_x[px] + x);
        }
      }
      Tensor feat = run_layers(0, g.backbone_layers, patch, false);
      if (tracker_) tracker_->release(patch.bytes());
      if (feat.shape().channels != out_shape.channels) {
        throw ValidationError("patched backbone produced " + to_string(feat.shape()));
      }
      for (int jy = 0; jy < out_shape.height; ++jy) {
        const auto& oy = own_y[static_cast<std::size_t>(jy)];
        if (oy.patch != py) continue;
        for (int jx = 0; jx < out_shape.width; ++jx) {
          const auto& ox = own_x[static_cast<std::size_t>(jx)];
          if (ox.patch != px) continue;
          for (int c = 0; c < out_shape.channels; ++c) assembled.at(c, jy, jx) = feat.at(c, oy.local, ox.local);
        }
      }
      if (tracker_) tracker_->release(feat.bytes());
    }
  }
  return assembled;
}

Logits InferenceSession::patched_step(const Tensor& frame, const PatchConfig& cfg) {
  const auto& g = model_->graph();
  Tensor features = patched_features(frame, cfg);
  Tensor out = run_layers(g.backbone_layers, g.layers.size(), features, true);
  if (tracker_) {
    tracker_->release(features.bytes());
    tracker_->release(out.bytes());
  }
  return to_logits(out);
}

Logits InferenceSession::step(const Tensor& frame) {
  const auto& g = model_->graph();
  return g.patch ? patched_step(frame, *g.patch) : infer_step(frame);
}

// --- description ------------------------------------------------------------------------

std::string describe_model(const ModelGraph& g) {
  std::ostringstream os;
  os << "model " << g.name << " (" << to_string(g.architecture) << "), input " << to_string(g.input_shape)
     << ", timestep " << g.timestep_us << " us, group " << g.group << ", decision " << to_string(g.decision);
  if (g.patch) os << ", patches " << g.patch->patch << "/" << g.patch->stride;
  os << "\n";
  os << std::left << std::setw(4) << "#" << std::setw(16) << "layer" << std::setw(14) << "kind"
     << std::setw(16) << "in" << std::setw(16) << "out" << std::setw(13) << "neuron" << std::right
     << std::setw(10) << "params" << std::setw(14) << "dense_synops" << "\n";
  std::uint64_t total_dense = 0;
  for (std::size_t i = 0; i < g.layers.size(); ++i) {
    const auto& l = g.layers[i];
    const auto params = l.weights.values.size() + l.weights.bias.size() + l.neuron.s4d_a.size() * 3;
    const auto dense = dense_synops(l);
    total_dense += dense;
    os << std::left << std::setw(4) << i << std::setw(16) << l.name << std::setw(14) << to_string(l.kind)
       << std::setw(16) << to_string(l.in_shape) << std::setw(16) << to_string(l.out_shape) << std::setw(13)
       << to_string(l.neuron.kind) << std::right << std::setw(10) << params << std::setw(14) << dense << "\n";
  }
  os << "parameters: " << g.parameter_count() << "\n";
  os << "dense synops per step (unpatched): " << total_dense << "\n";
  if (g.patch) os << "dense synops per step (patched): " << g.dense_synops_per_step() << "\n";
  return os.str();
}

}  // namespace evspike
