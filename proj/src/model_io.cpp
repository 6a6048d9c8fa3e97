#include <zlib.h>

#include <algorithm>

#include "json.hpp"

#include "evspike/bytes.hpp"
#include "evspike/error.hpp"
#include "evspike/models.hpp"

namespace evspike {

namespace {

constexpr char kMagic[4] = {'E', 'V', 'S', 'M'};
constexpr std::uint16_t kVersion = 1;

std::uint32_t crc_of(std::span<const std::uint8_t> bytes) {
  return static_cast<std::uint32_t>(
      crc32(crc32(0L, Z_NULL, 0), bytes.data(), static_cast<uInt>(bytes.size())));
}

void put_shape(ByteWriter& w, const Shape& s) {
  w.put_u32(static_cast<std::uint32_t>(s.channels));
  w.put_u32(static_cast<std::uint32_t>(s.height));
  w.put_u32(static_cast<std::uint32_t>(s.width));
}

Shape get_shape(ByteReader& r) {
  Shape s;
  s.channels = static_cast<int>(r.get_u32("shape"));
  s.height = static_cast<int>(r.get_u32("shape"));
  s.width = static_cast<int>(r.get_u32("shape"));
  return s;
}

template <class E>
E get_enum(ByteReader& r, std::uint8_t max, const char* what) {
  const auto at = r.offset();
  const auto v = r.get_u8(what);
  if (v > max) {
    throw FormatError(std::string("invalid ") + what + " " + std::to_string(v) + " at byte " + std::to_string(at));
  }
  return static_cast<E>(v);
}

std::vector<double> get_f64s(ByteReader& r, std::size_t n, const char* what) {
  r.require(n * 8, what);
  std::vector<double> v(n);
  for (auto& x : v) x = r.get_f64(what);
  return v;
}

}  // namespace

std::vector<std::uint8_t> save_model(const ModelGraph& g) {
  g.validate(false);
  ByteWriter w;
  w.put_bytes(std::string_view(kMagic, 4));
  w.put_u16(kVersion);
  w.put_u16(0);
  w.put_string(g.name);
  w.put_u8(static_cast<std::uint8_t>(g.architecture));
  put_shape(w, g.input_shape);
  w.put_u64(g.timestep_us);
  w.put_u32(static_cast<std::uint32_t>(g.group));
  w.put_u8(static_cast<std::uint8_t>(g.input_mode));
  w.put_u8(static_cast<std::uint8_t>(g.decision));
  w.put_u32(static_cast<std::uint32_t>(g.blocks));
  w.put_u8(g.patch ? 1 : 0);
  w.put_i32(g.patch ? g.patch->patch : 0);
  w.put_i32(g.patch ? g.patch->stride : 0);
  w.put_u32(static_cast<std::uint32_t>(g.backbone_layers));
  w.put_u32(static_cast<std::uint32_t>(g.layers.size()));
  for (const auto& l : g.layers) {
    w.put_string(l.name);
    w.put_u8(static_cast<std::uint8_t>(l.kind));
    put_shape(w, l.in_shape);
    put_shape(w, l.out_shape);
    w.put_i32(l.out_channels);
    w.put_i32(l.kernel);
    w.put_i32(l.stride);
    w.put_u8(static_cast<std::uint8_t>(l.padding));
    w.put_i32(l.skip_from);
    w.put_i32(l.block);
    w.put_i32(l.act_frac_bits);

    const auto& n = l.neuron;
    w.put_u8(static_cast<std::uint8_t>(n.kind));
    w.put_f64(n.theta);
    w.put_f64(n.alpha);
    w.put_f64(n.beta);
    w.put_u8(static_cast<std::uint8_t>(n.spike_mode));
    w.put_i32(n.d_state);
    w.put_u32(static_cast<std::uint32_t>(n.s4d_a.size()));
    for (const auto* v : {&n.s4d_a, &n.s4d_b, &n.s4d_c}) {
      for (double x : *v) w.put_f64(x);
    }

    w.put_f32(l.weights.scale);
    w.put_u32(static_cast<std::uint32_t>(l.weights.values.size()));
    for (auto v : l.weights.values) w.put_i8(v);
    w.put_u32(static_cast<std::uint32_t>(l.weights.bias.size()));
    for (auto v : l.weights.bias) w.put_i32(v);
  }
  w.put_u32(crc_of(w.buffer()));
  return w.take();
}

ModelGraph load_model(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  const std::string magic = r.get_bytes(4, "magic");
  if (magic != std::string_view(kMagic, 4)) throw FormatError("not an EVSM model (bad magic)");
  const auto version = r.get_u16("version");
  if (version != kVersion) throw FormatError("unsupported EVSM version " + std::to_string(version));
  r.get_u16("flags");

  ModelGraph g;
  g.name = r.get_string("model name");
  g.architecture = get_enum<Architecture>(r, 3, "architecture");
  g.input_shape = get_shape(r);
  g.timestep_us = r.get_u64("timestep");
  g.group = static_cast<int>(r.get_u32("group"));
  g.input_mode = get_enum<AccumulationMode>(r, 1, "input mode");
  g.decision = get_enum<DecisionMode>(r, 1, "decision mode");
  g.blocks = static_cast<int>(r.get_u32("blocks"));
  const bool has_patch = r.get_u8("patch flag") != 0;
  const int patch = r.get_i32("patch");
  const int stride = r.get_i32("patch stride");
  if (has_patch) g.patch = PatchConfig{patch, stride};
  g.backbone_layers = r.get_u32("backbone");
  const auto n_layers = r.get_u32("layer count");
  for (std::uint32_t i = 0; i < n_layers; ++i) {
    LayerSpec l;
    l.name = r.get_string("layer name");
    l.kind = get_enum<LayerKind>(r, 6, "layer kind");
    l.in_shape = get_shape(r);
    l.out_shape = get_shape(r);
    l.out_channels = r.get_i32("out channels");
    l.kernel = r.get_i32("kernel");
    l.stride = r.get_i32("stride");
    l.padding = get_enum<Padding>(r, 1, "padding");
    l.skip_from = r.get_i32("skip");
    l.block = r.get_i32("block");
    l.act_frac_bits = r.get_i32("activation bits");

    auto& n = l.neuron;
    n.kind = get_enum<NeuronKind>(r, 4, "neuron kind");
    n.theta = r.get_f64("theta");
    n.alpha = r.get_f64("alpha");
    n.beta = r.get_f64("beta");
    n.spike_mode = get_enum<SpikeMode>(r, 1, "spike mode");
    n.d_state = r.get_i32("d_state");
    const auto ns = r.get_u32("s4d size");
    n.s4d_a = get_f64s(r, ns, "s4d a");
    n.s4d_b = get_f64s(r, ns, "s4d b");
    n.s4d_c = get_f64s(r, ns, "s4d c");

    l.weights.scale = r.get_f32("scale");
    const auto nw = r.get_u32("weight count");
    r.require(nw, "weights");
    l.weights.values.resize(nw);
    for (auto& v : l.weights.values) v = r.get_i8("weights");
    const auto nb = r.get_u32("bias count");
    r.require(static_cast<std::size_t>(nb) * 4, "bias");
    l.weights.bias.resize(nb);
    for (auto& v : l.weights.bias) v = r.get_i32("bias");
    g.layers.push_back(std::move(l));
  }
  const auto body_end = r.offset();
  const auto stored = r.get_u32("checksum");
  if (r.remaining() != 0) {
    throw FormatError(std::to_string(r.remaining()) + " trailing bytes after checksum");
  }
  if (stored != crc_of(bytes.first(body_end))) throw FormatError("EVSM checksum mismatch");
  g.validate(false);
  return g;
}

void save_model_file(const ModelGraph& g, const std::string& path) {
  write_file_atomic(path, save_model(g));
}

ModelGraph load_model_file(const std::string& path) { return load_model(read_file(path)); }

// --- JSON config ----------------------------------------------------------------------

ModelConfig parse_model_config(const std::string& json_text) {
  using nlohmann::json;
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  static const char* const known[] = {"architecture", "neuron",      "input_side", "conv_channels",
                                      "mlp_hidden",   "blocks",      "model_dim",  "d_state",
                                      "theta",        "alpha",       "beta",       "timestep_us",
                                      "group",        "seed",        "patch",      "init_gain"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(std::begin(known), std::end(known), key) == std::end(known)) {
      throw ConfigError("unknown model config key '" + key + "'");
    }
  }
  ModelConfig cfg;
  auto& o = cfg.options;
  try {
    cfg.architecture = parse_architecture(j.value("architecture", std::string("cnn_mlp")));
    cfg.neuron = parse_neuron_mode(j.value("neuron", std::string("relu")));
    cfg.blocks = j.value("blocks", cfg.blocks);
    o.input_side = j.value("input_side", o.input_side);
    if (j.contains("conv_channels")) o.conv_channels = j.at("conv_channels").get<std::vector<int>>();
    if (j.contains("mlp_hidden")) o.mlp_hidden = j.at("mlp_hidden").get<std::vector<int>>();
    o.model_dim = j.value("model_dim", o.model_dim);
    o.d_state = j.value("d_state", o.d_state);
    if (j.contains("theta")) {
      const double t = j.at("theta").get<double>();
      o.sigma_delta_theta = t;
      o.lif_theta = t;
    }
    o.lif_alpha = j.value("alpha", o.lif_alpha);
    o.lif_beta = j.value("beta", o.lif_beta);
    o.timestep_us = j.value("timestep_us", o.timestep_us);
    o.group = j.value("group", o.group);
    o.seed = j.value("seed", o.seed);
    o.init_gain = j.value("init_gain", o.init_gain);
    if (j.contains("patch")) {
      const auto& p = j.at("patch");
      o.patch = PatchConfig{p.value("size", 40), p.value("stride", 30)};
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  return cfg;
}

ModelGraph build_model(const ModelConfig& cfg) {
  switch (cfg.architecture) {
    case Architecture::cnn_mlp: return build_cnn_mlp(cfg.neuron, cfg.options);
    case Architecture::cnn_s4d: return build_cnn_s4d(cfg.options);
    case Architecture::mcu_s4d: return build_mcu_s4d(cfg.blocks, cfg.options);
    case Architecture::mcu: return build_mcu(cfg.blocks, cfg.options);
  }
  throw ConfigError("unknown architecture");
}

}  // namespace evspike
