#include "evspike/layers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "evspike/error.hpp"

namespace evspike {

const char* to_string(LayerKind k) noexcept {
  switch (k) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::dwconv2d: return "dwconv2d";
    case LayerKind::pwconv2d: return "pwconv2d";
    case LayerKind::fc: return "fc";
    case LayerKind::avgpool: return "avgpool";
    case LayerKind::flatten: return "flatten";
    case LayerKind::residual_add: return "residual_add";
  }
  return "?";
}

const char* to_string(NeuronKind k) noexcept {
  switch (k) {
    case NeuronKind::identity: return "identity";
    case NeuronKind::relu: return "relu";
    case NeuronKind::sigma_delta: return "sigma_delta";
    case NeuronKind::lif: return "lif";
    case NeuronKind::s4d: return "s4d";
  }
  return "?";
}

S4dParams NeuronSpec::s4d(std::size_t neuron) const {
  const auto d = static_cast<std::size_t>(d_state);
  const auto off = static_cast<std::ptrdiff_t>(neuron * d);
  return {{s4d_a.begin() + off, s4d_a.begin() + off + static_cast<std::ptrdiff_t>(d)},
          {s4d_b.begin() + off, s4d_b.begin() + off + static_cast<std::ptrdiff_t>(d)},
          {s4d_c.begin() + off, s4d_c.begin() + off + static_cast<std::ptrdiff_t>(d)}};
}

std::vector<double> QuantizedWeights::dequantized() const {
  std::vector<double> out(values.size());
  const double s = scale;
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = static_cast<double>(values[i]) * s;
  return out;
}

std::vector<double> QuantizedWeights::dequantized_bias(std::size_t n_out) const {
  std::vector<double> out(n_out, 0.0);
  const double unit = static_cast<double>(scale) / static_cast<double>(1 << kBiasFracBits);
  for (std::size_t i = 0; i < bias.size() && i < n_out; ++i) {
    out[i] = static_cast<double>(bias[i]) * unit;
  }
  return out;
}

QuantizedWeights quantize_weights(std::span<const double> w, std::span<const double> bias, int bits) {
  if (bits < 2 || bits > 8) throw ConfigError("weight bits must lie in [2, 8]");
  const double qmax = static_cast<double>((1 << (bits - 1)) - 1);
  double max_abs = 0.0;
  for (double v : w) max_abs = std::max(max_abs, std::abs(v));

  QuantizedWeights q;
  q.values.resize(w.size(), 0);
  q.scale = max_abs > 0.0 ? static_cast<float>(max_abs / qmax) : 1.0f;
  const double s = q.scale;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double r = std::clamp(std::round(w[i] / s), -qmax, qmax);
    q.values[i] = static_cast<std::int8_t>(r);
  }
  if (!bias.empty()) {
    const double unit = s / static_cast<double>(1 << kBiasFracBits);
    constexpr double lim = static_cast<double>(std::numeric_limits<std::int32_t>::max());
    q.bias.resize(bias.size());
    for (std::size_t i = 0; i < bias.size(); ++i) {
      q.bias[i] = static_cast<std::int32_t>(std::clamp(std::round(bias[i] / unit), -lim, lim));
    }
  }
  return q;
}

int conv_extent(int in, int k, int s, Padding pad, int& pad_before) {
  if (pad == Padding::valid) {
    pad_before = 0;
    return in >= k ? (in - k) / s + 1 : 0;
  }
  const int out = (in + s - 1) / s;
  const int total = std::max((out - 1) * s + k - in, 0);
  pad_before = total / 2;
  return out;
}

ConvGeometry conv_geometry(const LayerSpec& spec, const Shape& in) {
  ConvGeometry g;
  g.out_h = conv_extent(in.height, spec.kernel, spec.stride, spec.padding, g.pad_top);
  g.out_w = conv_extent(in.width, spec.kernel, spec.stride, spec.padding, g.pad_left);
  return g;
}

namespace {

[[noreturn]] void shape_error(const LayerSpec& spec, const Shape& in, const std::string& why) {
  throw ValidationError("layer '" + spec.name + "' (" + to_string(spec.kind) + ") cannot take input " +
                        to_string(in) + ": " + why);
}

}  // namespace

Shape output_shape(const LayerSpec& spec, const Shape& in) {
  switch (spec.kind) {
    case LayerKind::conv2d:
    case LayerKind::pwconv2d:
    case LayerKind::dwconv2d: {
      if (spec.kind != LayerKind::dwconv2d && in.channels != spec.in_shape.channels) {
        shape_error(spec, in, "expected " + std::to_string(spec.in_shape.channels) + " channels");
      }
      if (spec.kind == LayerKind::dwconv2d && in.channels != spec.in_shape.channels) {
        shape_error(spec, in, "depthwise channel count mismatch");
      }
      const auto g = conv_geometry(spec, in);
      if (g.out_h <= 0 || g.out_w <= 0) shape_error(spec, in, "feature map smaller than kernel");
      const int co = spec.kind == LayerKind::dwconv2d ? in.channels : spec.out_channels;
      return {co, g.out_h, g.out_w};
    }
    case LayerKind::fc:
      if (in.size() != spec.in_shape.size()) {
        shape_error(spec, in, "expected " + std::to_string(spec.in_shape.size()) + " inputs");
      }
      return {spec.out_channels, 1, 1};
    case LayerKind::avgpool:
      return {in.channels, 1, 1};
    case LayerKind::flatten:
      return {static_cast<int>(in.size()), 1, 1};
    case LayerKind::residual_add:
      return in;
  }
  shape_error(spec, in, "unknown layer kind");
}

std::size_t weight_count(const LayerSpec& spec) {
  const auto k2 = static_cast<std::size_t>(spec.kernel) * static_cast<std::size_t>(spec.kernel);
  const auto ci = static_cast<std::size_t>(spec.in_shape.channels);
  const auto co = static_cast<std::size_t>(spec.out_channels);
  switch (spec.kind) {
    case LayerKind::conv2d: return co * ci * k2;
    case LayerKind::dwconv2d: return ci * k2;
    case LayerKind::pwconv2d: return co * ci;
    case LayerKind::fc: return co * spec.in_shape.size();
    default: return 0;
  }
}

std::size_t bias_count(const LayerSpec& spec) {
  switch (spec.kind) {
    case LayerKind::conv2d:
    case LayerKind::pwconv2d:
    case LayerKind::fc: return static_cast<std::size_t>(spec.out_channels);
    case LayerKind::dwconv2d: return static_cast<std::size_t>(spec.in_shape.channels);
    default: return 0;
  }
}

namespace {

// Number of valid kernel taps along one axis summed over all output positions.
std::uint64_t axis_taps(int in, int out, int k, int s, int pad) {
  std::uint64_t n = 0;
  for (int o = 0; o < out; ++o) {
    for (int t = 0; t < k; ++t) {
      const int i = o * s + t - pad;
      if (i >= 0 && i < in) ++n;
    }
  }
  return n;
}

}  // namespace

std::uint64_t dense_synops(const LayerSpec& spec, const Shape& in) {
  switch (spec.kind) {
    case LayerKind::conv2d:
    case LayerKind::dwconv2d:
    case LayerKind::pwconv2d: {
      const auto g = conv_geometry(spec, in);
      const std::uint64_t taps = axis_taps(in.height, g.out_h, spec.kernel, spec.stride, g.pad_top) *
                                 axis_taps(in.width, g.out_w, spec.kernel, spec.stride, g.pad_left);
      if (spec.kind == LayerKind::dwconv2d) return taps * static_cast<std::uint64_t>(in.channels);
      return taps * static_cast<std::uint64_t>(in.channels) *
             static_cast<std::uint64_t>(spec.out_channels);
    }
    case LayerKind::fc:
      return static_cast<std::uint64_t>(in.size()) * static_cast<std::uint64_t>(spec.out_channels);
    default:
      return 0;
  }
}

void SynOpsLedger::add(std::size_t layer, std::uint64_t synops, std::uint64_t neuron_updates) {
  auto& c = layers_.at(layer);
  c.synops += synops;
  c.neuron_updates += neuron_updates;
}

void SynOpsLedger::merge(const SynOpsLedger& other) {
  if (layers_.size() < other.layers_.size()) layers_.resize(other.layers_.size());
  for (std::size_t i = 0; i < other.layers_.size(); ++i) {
    layers_[i].synops += other.layers_[i].synops;
    layers_[i].neuron_updates += other.layers_[i].neuron_updates;
    layers_[i].timesteps += other.layers_[i].timesteps;
  }
}

void SynOpsLedger::clear() {
  for (auto& c : layers_) c = {};
}

std::uint64_t SynOpsLedger::total_synops() const noexcept {
  std::uint64_t n = 0;
  for (const auto& c : layers_) n += c.synops;
  return n;
}

std::uint64_t SynOpsLedger::total_neuron_updates() const noexcept {
  std::uint64_t n = 0;
  for (const auto& c : layers_) n += c.neuron_updates;
  return n;
}

// --- scatter kernels ----------------------------------------------------------

namespace {

template <class V>
struct Nonzero {
  int c;
  int y;
  int x;
  V v;
};

template <class V>
std::vector<Nonzero<V>> collect_nonzero(std::span<const V> x, const Shape& s) {
  std::vector<Nonzero<V>> nz;
  std::size_t idx = 0;
  for (int c = 0; c < s.channels; ++c) {
    for (int y = 0; y < s.height; ++y) {
      for (int xx = 0; xx < s.width; ++xx, ++idx) {
        if (x[idx] != V{}) nz.push_back({c, y, xx, x[idx]});
      }
    }
  }
  return nz;
}

template <class V, class W, class A, bool Binary>
inline void mac(A& acc, W w, V v) {
  if constexpr (Binary) {
    acc += static_cast<A>(w);
  } else {
    acc += static_cast<A>(w) * static_cast<A>(v);
  }
}

// Shared scatter loop. V: input activation type, W: weight type, A: accumulator.
template <class V, class W, class A, bool Binary>
std::uint64_t scatter(const LayerSpec& spec, const W* w, std::span<const V> x, const Shape& in,
                      A* acc, const Shape& out) {
  const auto nz = collect_nonzero<V>(x, in);
  std::uint64_t synops = 0;
  const int co_count = out.channels;
  const auto out_plane = out.plane();

  switch (spec.kind) {
    case LayerKind::fc: {
      const auto n_in = static_cast<std::size_t>(in.size());
      const auto plane = in.plane();
      const auto width = static_cast<std::size_t>(in.width);
#pragma omp parallel for schedule(static)
      for (int o = 0; o < co_count; ++o) {
        const W* wo = w + static_cast<std::size_t>(o) * n_in;
        A a = acc[o];
        for (const auto& e : nz) {
          const std::size_t i = static_cast<std::size_t>(e.c) * plane + e.y * width + e.x;
          mac<V, W, A, Binary>(a, wo[i], e.v);
        }
        acc[o] = a;
      }
      synops = static_cast<std::uint64_t>(nz.size()) * static_cast<std::uint64_t>(co_count);
      break;
    }
    case LayerKind::pwconv2d: {
      const auto ci_count = static_cast<std::size_t>(in.channels);
      const auto width = static_cast<std::size_t>(out.width);
#pragma omp parallel for schedule(static)
      for (int co = 0; co < co_count; ++co) {
        A* z = acc + static_cast<std::size_t>(co) * out_plane;
        const W* wc = w + static_cast<std::size_t>(co) * ci_count;
        for (const auto& e : nz) mac<V, W, A, Binary>(z[e.y * width + e.x], wc[e.c], e.v);
      }
      synops = static_cast<std::uint64_t>(nz.size()) * static_cast<std::uint64_t>(co_count);
      break;
    }
    case LayerKind::conv2d:
    case LayerKind::dwconv2d: {
      const bool depthwise = spec.kind == LayerKind::dwconv2d;
      const auto g = conv_geometry(spec, in);
      const int k = spec.kernel;
      const int s = spec.stride;
      const auto kk = static_cast<std::size_t>(k) * static_cast<std::size_t>(k);
      const auto ci_count = static_cast<std::size_t>(in.channels);

      // per-input output footprint; identical for every output channel
      std::uint64_t taps_total = 0;
      for (const auto& e : nz) {
        int ny = 0, nx = 0;
        for (int t = 0; t < k; ++t) {
          const int py = e.y + g.pad_top - t;
          if (py >= 0 && py % s == 0 && py / s < g.out_h) ++ny;
          const int px = e.x + g.pad_left - t;
          if (px >= 0 && px % s == 0 && px / s < g.out_w) ++nx;
        }
        taps_total += static_cast<std::uint64_t>(ny) * static_cast<std::uint64_t>(nx);
      }

      // channel ranges of the raster-ordered nonzero list (depthwise only)
      std::vector<std::size_t> first(static_cast<std::size_t>(in.channels) + 1, nz.size());
      if (depthwise) {
        for (std::size_t i = nz.size(); i-- > 0;) first[static_cast<std::size_t>(nz[i].c)] = i;
        for (int c = in.channels - 1; c >= 0; --c) {
          first[static_cast<std::size_t>(c)] =
              std::min(first[static_cast<std::size_t>(c)], first[static_cast<std::size_t>(c) + 1]);
        }
      }

#pragma omp parallel for schedule(static)
      for (int co = 0; co < co_count; ++co) {
        A* z = acc + static_cast<std::size_t>(co) * out_plane;
        const std::size_t lo = depthwise ? first[static_cast<std::size_t>(co)] : 0;
        const std::size_t hi = depthwise ? first[static_cast<std::size_t>(co) + 1] : nz.size();
        for (std::size_t n = lo; n < hi; ++n) {
          const auto& e = nz[n];
          const W* wk = depthwise ? w + static_cast<std::size_t>(co) * kk
                                  : w + (static_cast<std::size_t>(co) * ci_count +
                                         static_cast<std::size_t>(e.c)) * kk;
          for (int ky = 0; ky < k; ++ky) {
            const int py = e.y + g.pad_top - ky;
            if (py < 0 || py % s != 0) continue;
            const int oy = py / s;
            if (oy >= g.out_h) continue;
            for (int kx = 0; kx < k; ++kx) {
              const int px = e.x + g.pad_left - kx;
              if (px < 0 || px % s != 0) continue;
              const int ox = px / s;
              if (ox >= g.out_w) continue;
              mac<V, W, A, Binary>(z[static_cast<std::size_t>(oy) * g.out_w + ox], wk[ky * k + kx], e.v);
            }
          }
        }
      }
      synops = depthwise ? taps_total : taps_total * static_cast<std::uint64_t>(co_count);
      break;
    }
    default:
      break;
  }
  return synops;
}

void check_weights(const LayerSpec& spec, std::size_t have) {
  if (have != weight_count(spec)) {
    throw ValidationError("layer '" + spec.name + "' has " + std::to_string(have) +
                          " weights, expected " + std::to_string(weight_count(spec)));
  }
}

}  // namespace

std::uint64_t accumulate_sparse(const LayerSpec& spec, std::span<const double> weights,
                                const Tensor& input, Tensor& acc, bool binary_input) {
  if (!has_synapses(spec.kind)) return 0;
  check_weights(spec, weights.size());
  const Shape out = output_shape(spec, input.shape());
  if (!(acc.shape() == out)) {
    throw ValidationError("layer '" + spec.name + "' accumulator shape " + to_string(acc.shape()) +
                          " != " + to_string(out));
  }
  if (binary_input) {
    return scatter<double, double, double, true>(spec, weights.data(), input.values(),
                                                 input.shape(), acc.values().data(), out);
  }
  return scatter<double, double, double, false>(spec, weights.data(), input.values(), input.shape(),
                                                acc.values().data(), out);
}

std::uint64_t accumulate_sparse_fixed(const LayerSpec& spec, std::span<const std::int64_t> input,
                                      const Shape& in_shape, std::vector<std::int64_t>& acc) {
  if (!has_synapses(spec.kind)) return 0;
  check_weights(spec, spec.weights.values.size());
  const Shape out = output_shape(spec, in_shape);
  if (acc.size() != out.size()) {
    throw ValidationError("layer '" + spec.name + "' fixed accumulator size mismatch");
  }
  const auto synops = scatter<std::int64_t, std::int8_t, std::int64_t, false>(
      spec, spec.weights.values.data(), input, in_shape, acc.data(), out);
  constexpr auto lo = static_cast<std::int64_t>(std::numeric_limits<std::int32_t>::min());
  constexpr auto hi = static_cast<std::int64_t>(std::numeric_limits<std::int32_t>::max());
  for (std::size_t i = 0; i < acc.size(); ++i) {
    if (acc[i] < lo || acc[i] > hi) {
      throw OverflowError("layer '" + spec.name + "': 32-bit accumulator overflow at output " +
                          std::to_string(i) + " (value " + std::to_string(acc[i]) + ")");
    }
  }
  return synops;
}

namespace reference {

void accumulate_dense(const LayerSpec& spec, std::span<const double> weights, const Tensor& input,
                      Tensor& acc) {
  if (!has_synapses(spec.kind)) return;
  check_weights(spec, weights.size());
  const Shape in = input.shape();
  const Shape out = output_shape(spec, in);
  if (!(acc.shape() == out)) throw ValidationError("reference accumulator shape mismatch");

  switch (spec.kind) {
    case LayerKind::fc:
      for (int o = 0; o < out.channels; ++o) {
        double a = acc[static_cast<std::size_t>(o)];
        for (std::size_t i = 0; i < in.size(); ++i) {
          a += weights[static_cast<std::size_t>(o) * in.size() + i] * input[i];
        }
        acc[static_cast<std::size_t>(o)] = a;
      }
      break;
    case LayerKind::pwconv2d:
      for (int co = 0; co < out.channels; ++co) {
        for (int y = 0; y < out.height; ++y) {
          for (int x = 0; x < out.width; ++x) {
            double a = acc.at(co, y, x);
            for (int ci = 0; ci < in.channels; ++ci) {
              a += weights[static_cast<std::size_t>(co) * in.channels + ci] * input.at(ci, y, x);
            }
            acc.at(co, y, x) = a;
          }
        }
      }
      break;
    case LayerKind::conv2d:
    case LayerKind::dwconv2d: {
      const bool depthwise = spec.kind == LayerKind::dwconv2d;
      const auto g = conv_geometry(spec, in);
      const int k = spec.kernel;
      for (int co = 0; co < out.channels; ++co) {
        for (int oy = 0; oy < out.height; ++oy) {
          for (int ox = 0; ox < out.width; ++ox) {
            double a = acc.at(co, oy, ox);
            const int c_lo = depthwise ? co : 0;
            const int c_hi = depthwise ? co + 1 : in.channels;
            for (int ci = c_lo; ci < c_hi; ++ci) {
              for (int ky = 0; ky < k; ++ky) {
                const int iy = oy * spec.stride + ky - g.pad_top;
                if (iy < 0 || iy >= in.height) continue;
                for (int kx = 0; kx < k; ++kx) {
                  const int ix = ox * spec.stride + kx - g.pad_left;
                  if (ix < 0 || ix >= in.width) continue;
                  const std::size_t wi =
                      depthwise ? (static_cast<std::size_t>(co) * k + ky) * k + kx
                                : ((static_cast<std::size_t>(co) * in.channels + ci) * k + ky) * k + kx;
                  a += weights[wi] * input.at(ci, iy, ix);
                }
              }
            }
            acc.at(co, oy, ox) = a;
          }
        }
      }
      break;
    }
    default:
      break;
  }
}

}  // namespace reference

LayerParams LayerParams::dequantize(const LayerSpec& spec) {
  LayerParams p;
  p.weights = spec.weights.dequantized();
  p.bias = spec.weights.dequantized_bias(bias_count(spec));
  return p;
}

void LayerState::reset() {
  for (auto& s : sigma_delta) s = {};
  for (auto& s : lif) s = {};
  std::fill(s4d.begin(), s4d.end(), 0.0);
  input_sigma.fill(0.0);
  std::fill(input_sigma_fixed.begin(), input_sigma_fixed.end(), 0);
}

LayerState make_state(const LayerSpec& spec, const Shape& out, bool delta_input) {
  LayerState st;
  const std::size_t n = out.size();
  switch (spec.neuron.kind) {
    case NeuronKind::sigma_delta: st.sigma_delta.resize(n); break;
    case NeuronKind::lif: st.lif.resize(n); break;
    case NeuronKind::s4d: st.s4d.assign(n * static_cast<std::size_t>(spec.neuron.d_state), 0.0); break;
    default: break;
  }
  if (delta_input && has_synapses(spec.kind)) {
    st.input_sigma = Tensor(out);
    st.input_sigma_fixed.assign(n, 0);
  }
  return st;
}

void apply_neurons(const NeuronSpec& neuron, Tensor& z, LayerState& state,
                   const FixedPointFormat* fixed) {
  auto v = z.values();
  const auto n = static_cast<std::ptrdiff_t>(v.size());
  auto q = [fixed](double x) { return fixed ? fixed->quantize(x) : x; };

  switch (neuron.kind) {
    case NeuronKind::identity:
      if (fixed) {
        for (auto& x : v) x = q(x);
      }
      break;
    case NeuronKind::relu:
      for (auto& x : v) x = q(relu_step(x));
      break;
    case NeuronKind::sigma_delta: {
      if (state.sigma_delta.size() != v.size()) throw ValidationError("SigmaDelta state size mismatch");
      const SigmaDeltaParams p{neuron.theta};
#pragma omp parallel for schedule(static)
      for (std::ptrdiff_t i = 0; i < n; ++i) {
        auto out = sigma_delta_step(state.sigma_delta[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(i)], p);
        if (fixed) {
          out.y = q(out.y);
          out.next.r = q(out.next.r);
          out.next.a_prev = q(out.next.a_prev);
        }
        state.sigma_delta[static_cast<std::size_t>(i)] = out.next;
        v[static_cast<std::size_t>(i)] = out.y;
      }
      break;
    }
    case NeuronKind::lif: {
      if (state.lif.size() != v.size()) throw ValidationError("LIF state size mismatch");
      const LifParams p = neuron.lif();
#pragma omp parallel for schedule(static)
      for (std::ptrdiff_t i = 0; i < n; ++i) {
        auto out = lif_step(state.lif[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(i)], p);
        if (fixed) {
          out.next.i = q(out.next.i);
          out.next.u = q(out.next.u);
          out.y = q(out.y);
          out.next.y_prev = out.y;
        }
        state.lif[static_cast<std::size_t>(i)] = out.next;
        v[static_cast<std::size_t>(i)] = out.y;
      }
      break;
    }
    case NeuronKind::s4d: {
      const auto d = static_cast<std::size_t>(neuron.d_state);
      if (state.s4d.size() != v.size() * d || neuron.s4d_a.size() != v.size() * d) {
        throw ValidationError("S4D parameter/state size mismatch");
      }
#pragma omp parallel for schedule(static)
      for (std::ptrdiff_t i = 0; i < n; ++i) {
        const std::size_t off = static_cast<std::size_t>(i) * d;
        std::span<double> s(state.s4d.data() + off, d);
        double y = s4d_step(s, v[static_cast<std::size_t>(i)],
                            std::span<const double>(neuron.s4d_a.data() + off, d),
                            std::span<const double>(neuron.s4d_b.data() + off, d),
                            std::span<const double>(neuron.s4d_c.data() + off, d));
        if (fixed) {
          for (auto& e : s) e = q(e);
          y = q(y);
        }
        v[static_cast<std::size_t>(i)] = y;
      }
      break;
    }
  }
}

Tensor forward_layer(const LayerSpec& spec, const LayerParams& params, const Tensor& input,
                     LayerState& state, LayerCounters& counters, const ForwardOptions& opt,
                     Tensor* preact) {
  switch (spec.kind) {
    case LayerKind::avgpool: counters.timesteps += 1; return global_avgpool(input);
    case LayerKind::flatten: counters.timesteps += 1; return flatten(input);
    case LayerKind::residual_add:
      throw ValidationError("layer '" + spec.name + "': residual_add needs two inputs");
    default: break;
  }
  const Shape out = output_shape(spec, input.shape());
  const std::size_t plane = out.plane();
  Tensor z(out);
  std::uint64_t synops = 0;

  if (!opt.fixed_point) {
    if (params.bias.size() != bias_count(spec)) {
      throw ValidationError("layer '" + spec.name + "' bias size mismatch");
    }
    if (opt.delta_input) {
      if (!(state.input_sigma.shape() == out)) state.input_sigma = Tensor(out);
      synops = accumulate_sparse(spec, params.weights, input, state.input_sigma, opt.binary_input);
      for (std::size_t i = 0; i < z.size(); ++i) z[i] = state.input_sigma[i] + params.bias[i / plane];
    } else {
      synops = accumulate_sparse(spec, params.weights, input, z, opt.binary_input);
      for (std::size_t i = 0; i < z.size(); ++i) z[i] += params.bias[i / plane];
    }
  } else {
    std::vector<std::int64_t> q_in(input.size());
    for (std::size_t i = 0; i < input.size(); ++i) {
      q_in[i] = std::llround(std::ldexp(input[i], opt.input_frac_bits));
    }
    std::vector<std::int64_t> local;
    std::vector<std::int64_t>* acc = &local;
    if (opt.delta_input) {
      if (state.input_sigma_fixed.size() != out.size()) state.input_sigma_fixed.assign(out.size(), 0);
      acc = &state.input_sigma_fixed;
    } else {
      local.assign(out.size(), 0);
    }
    synops = accumulate_sparse_fixed(spec, q_in, input.shape(), *acc);
    const double unit = std::ldexp(static_cast<double>(spec.weights.scale), -opt.input_frac_bits);
    const auto bias = spec.weights.dequantized_bias(bias_count(spec));
    for (std::size_t i = 0; i < z.size(); ++i) {
      z[i] = static_cast<double>((*acc)[i]) * unit + bias[i / plane];
    }
  }
  if (preact) *preact = z;

  const FixedPointFormat fmt{spec.act_frac_bits, 24};
  apply_neurons(spec.neuron, z, state, opt.fixed_point ? &fmt : nullptr);
  counters.synops += synops;
  counters.neuron_updates += out.size();
  counters.timesteps += 1;
  return z;
}

Tensor global_avgpool(const Tensor& in) {
  const Shape s = in.shape();
  Tensor out(Shape{s.channels, 1, 1});
  const auto plane = s.plane();
  for (int c = 0; c < s.channels; ++c) {
    double sum = 0.0;
    for (std::size_t i = 0; i < plane; ++i) sum += in[static_cast<std::size_t>(c) * plane + i];
    out[static_cast<std::size_t>(c)] = sum / static_cast<double>(plane);
  }
  return out;
}

Tensor flatten(const Tensor& in) {
  return in.reshaped(Shape{static_cast<int>(in.size()), 1, 1});
}

Tensor residual_add(const Tensor& a, const Tensor& b) {
  if (!(a.shape() == b.shape())) {
    throw ValidationError("residual add of " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

}  // namespace evspike
