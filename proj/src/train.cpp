#include "evspike/train.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <exception>
#include <numeric>
#include <random>
#include <sstream>

#include "json.hpp"

#include "evspike/bytes.hpp"
#include "evspike/error.hpp"

namespace evspike {

double surrogate_grad(double u, double theta, SpikeMode mode, const SurrogateSpec& spec) {
  const double d = 1.0 + spec.slope * std::abs(u - theta);
  const double g = 1.0 / (d * d);
  if (mode == SpikeMode::binary) return g;
  return heaviside(u - theta) + std::max(u, 0.0) * g;
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(lr_backbone >= 0.0) || !(lr_head >= 0.0)) throw ConfigError("learning rates must be >= 0");
  if (!(surrogate.slope > 0.0)) throw ConfigError("surrogate slope must be > 0");
  if (!(clip_norm > 0.0)) throw ConfigError("clip_norm must be > 0");
  focal.validate();
}

TrainConfig default_train_config(Architecture a) {
  TrainConfig c;
  if (a != Architecture::cnn_mlp) {
    c.lr_backbone = 5e-5;
    c.lr_head = 5e-6;
  }
  return c;
}

TrainConfig parse_train_config(const std::string& json_text, TrainConfig c) {
  using nlohmann::json;
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  static const char* const known[] = {"epochs", "batch_size", "lr_backbone", "lr_head", "slope", "qat",
                                      "learn_thresholds", "seed", "focal_alpha", "focal_gamma", "clip_norm"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(std::begin(known), std::end(known), it.key()) == std::end(known)) {
      throw ConfigError("unknown train config key '" + it.key() + "'");
    }
  }
  try {
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr_backbone = j.value("lr_backbone", c.lr_backbone);
    c.lr_head = j.value("lr_head", c.lr_head);
    c.surrogate.slope = j.value("slope", c.surrogate.slope);
    c.qat = j.value("qat", c.qat);
    c.learn_thresholds = j.value("learn_thresholds", c.learn_thresholds);
    c.seed = j.value("seed", c.seed);
    c.focal.alpha = j.value("focal_alpha", c.focal.alpha);
    c.focal.gamma = j.value("focal_gamma", c.focal.gamma);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

std::vector<TrainExample> make_examples(const std::vector<Sample>& samples, const ModelGraph& model,
                                        const BenchConfig& prep) {
  std::vector<TrainExample> out(samples.size());
  const auto n = static_cast<long>(samples.size());
  std::exception_ptr err;
#pragma omp parallel for schedule(dynamic, 4)
  for (long i = 0; i < n; ++i) {
    try {
      auto seq = prepare_frames(samples[static_cast<std::size_t>(i)].stream, model, prep);
      out[static_cast<std::size_t>(i)].frames = std::move(seq.frames);
      out[static_cast<std::size_t>(i)].fall = samples[static_cast<std::size_t>(i)].fall;
    } catch (...) {
#pragma omp critical
      if (!err) err = std::current_exception();
    }
  }
  if (err) std::rethrow_exception(err);
  return out;
}

// --- trainer ------------------------------------------------------------------------------

Trainer::Trainer(ModelGraph model, TrainConfig cfg) : graph_(std::move(model)), cfg_(cfg) {
  cfg_.validate();
  const CompiledModel compiled(graph_);
  for (std::size_t i = 0; i < graph_.layers.size(); ++i) plan_.push_back(compiled.plan(i));
  values_.resize(graph_.layers.size());
  for (std::size_t i = 0; i < graph_.layers.size(); ++i) {
    const auto p = compiled.params(i);
    values_[i][slot_weights] = p.weights;
    values_[i][slot_bias] = p.bias;
  }
  init_slots();
}

Trainer::Trainer(ModelGraph model, std::vector<LayerParams> master, TrainConfig cfg)
    : graph_(std::move(model)), cfg_(cfg) {
  cfg_.validate();
  const CompiledModel compiled(graph_, master);
  for (std::size_t i = 0; i < graph_.layers.size(); ++i) plan_.push_back(compiled.plan(i));
  values_.resize(graph_.layers.size());
  for (std::size_t i = 0; i < graph_.layers.size(); ++i) {
    values_[i][slot_weights] = std::move(master[i].weights);
    values_[i][slot_bias] = std::move(master[i].bias);
  }
  init_slots();
}

void Trainer::init_slots() {
  for (std::size_t i = 0; i < graph_.layers.size(); ++i) {
    const auto& n = graph_.layers[i].neuron;
    auto& v = values_[i];
    v[slot_theta] = n.kind == NeuronKind::lif ? std::vector<double>{n.theta} : std::vector<double>{};
    v[slot_s4d_a] = n.s4d_a;
    v[slot_s4d_b] = n.s4d_b;
    v[slot_s4d_c] = n.s4d_c;
  }
  m_ = values_;
  v_ = values_;
  for (auto* set : {&m_, &v_}) {
    for (auto& layer : *set) {
      for (auto& slot : layer) std::fill(slot.begin(), slot.end(), 0.0);
    }
  }
}

void Trainer::sync_params() {
  for (std::size_t i = 0; i < graph_.layers.size(); ++i) {
    auto& n = graph_.layers[i].neuron;
    const auto& v = values_[i];
    if (!v[slot_theta].empty()) n.theta = v[slot_theta][0];
    n.s4d_a = v[slot_s4d_a];
    n.s4d_b = v[slot_s4d_b];
    n.s4d_c = v[slot_s4d_c];
  }
}

std::vector<LayerParams> Trainer::forward_params() const {
  std::vector<LayerParams> out(graph_.layers.size());
  for (std::size_t i = 0; i < graph_.layers.size(); ++i) {
    const auto& l = graph_.layers[i];
    if (!has_synapses(l.kind)) continue;
    const auto& w = values_[i][slot_weights];
    const auto& b = values_[i][slot_bias];
    if (cfg_.qat) {
      const auto q = quantize_weights(w, b);
      out[i].weights = q.dequantized();
      out[i].bias = q.dequantized_bias(bias_count(l));
    } else {
      out[i].weights = w;
      out[i].bias = b;
    }
  }
  return out;
}

ModelGraph Trainer::export_model() const {
  ModelGraph g = graph_;
  for (std::size_t i = 0; i < g.layers.size(); ++i) {
    auto& l = g.layers[i];
    if (!has_synapses(l.kind)) continue;
    l.weights = quantize_weights(values_[i][slot_weights], values_[i][slot_bias]);
  }
  g.validate(false);
  return g;
}

namespace {

// Gradient of one synapse layer: accumulates dL/dW, dL/db and (optionally)
// dL/dx for a single timestep.
void synapse_backward(const LayerSpec& l, std::span<const double> w, const Tensor& x, const Tensor& gz,
                      std::span<double> gw, std::span<double> gb, Tensor* gx) {
  const Shape in = x.shape();
  const Shape out = gz.shape();
  switch (l.kind) {
    case LayerKind::fc: {
      const std::size_t n = in.size();
      for (int o = 0; o < out.channels; ++o) {
        const double g = gz[static_cast<std::size_t>(o)];
        if (g == 0.0) continue;
        gb[static_cast<std::size_t>(o)] += g;
        const double* wr = w.data() + static_cast<std::size_t>(o) * n;
        double* gwr = gw.data() + static_cast<std::size_t>(o) * n;
        for (std::size_t i = 0; i < n; ++i) {
          gwr[i] += g * x[i];
          if (gx) (*gx)[i] += wr[i] * g;
        }
      }
      break;
    }
    case LayerKind::pwconv2d:
      for (int co = 0; co < out.channels; ++co) {
        for (int y = 0; y < out.height; ++y) {
          for (int xx = 0; xx < out.width; ++xx) {
            const double g = gz.at(co, y, xx);
            if (g == 0.0) continue;
            gb[static_cast<std::size_t>(co)] += g;
            for (int ci = 0; ci < in.channels; ++ci) {
              const std::size_t wi = static_cast<std::size_t>(co) * in.channels + ci;
              gw[wi] += g * x.at(ci, y, xx);
              if (gx) gx->at(ci, y, xx) += w[wi] * g;
            }
          }
        }
      }
      break;
    case LayerKind::conv2d:
    case LayerKind::dwconv2d: {
      const bool depthwise = l.kind == LayerKind::dwconv2d;
      const auto geo = conv_geometry(l, in);
      const int k = l.kernel;
      for (int co = 0; co < out.channels; ++co) {
        const int c_lo = depthwise ? co : 0;
        const int c_hi = depthwise ? co + 1 : in.channels;
        for (int oy = 0; oy < out.height; ++oy) {
          for (int ox = 0; ox < out.width; ++ox) {
            const double g = gz.at(co, oy, ox);
            if (g == 0.0) continue;
            gb[static_cast<std::size_t>(co)] += g;
            for (int ci = c_lo; ci < c_hi; ++ci) {
              for (int ky = 0; ky < k; ++ky) {
                const int iy = oy * l.stride + ky - geo.pad_top;
                if (iy < 0 || iy >= in.height) continue;
                for (int kx = 0; kx < k; ++kx) {
                  const int ix = ox * l.stride + kx - geo.pad_left;
                  if (ix < 0 || ix >= in.width) continue;
                  const std::size_t wi =
                      depthwise ? (static_cast<std::size_t>(co) * k + ky) * k + kx
                                : ((static_cast<std::size_t>(co) * in.channels + ci) * k + ky) * k + kx;
                  gw[wi] += g * x.at(ci, iy, ix);
                  if (gx) gx->at(ci, iy, ix) += w[wi] * g;
                }
              }
            }
          }
        }
      }
      break;
    }
    default: break;
  }
}

void add_into(Tensor& dst, const Tensor& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

Gradients zeros_like(const std::vector<LayerTensors>& v) {
  Gradients g(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    for (std::size_t s = 0; s < kParamSlots; ++s) g[i][s].assign(v[i][s].size(), 0.0);
  }
  return g;
}

}  // namespace

double Trainer::run(const TrainExample& ex, Gradients* grads, std::vector<Logits>* outputs) const {
  const auto& L = graph_.layers;
  const std::size_t n = L.size();
  const std::size_t T = ex.frames.size();
  if (T == 0) throw ValidationError("training example has no frames");
  const auto fwd = forward_params();
  const bool record = grads != nullptr;

  std::vector<LayerState> st(n);
  for (std::size_t i = 0; i < n; ++i) st[i] = make_state(L[i], L[i].out_shape, plan_[i].delta_input);

  // tapes, indexed [layer][t]
  std::vector<std::vector<Tensor>> xs(n);
  std::vector<std::vector<Tensor>> zs(n);
  std::vector<std::vector<Tensor>> ys(n);
  std::vector<std::vector<std::vector<double>>> us(n);
  std::vector<Tensor> xsum(n);
  std::vector<std::vector<double>> out_seq(T);

  std::vector<Tensor> outs(n);
  for (std::size_t t = 0; t < T; ++t) {
    const Tensor& frame = ex.frames[t];
    if (!(frame.shape() == graph_.input_shape)) {
      throw ValidationError("frame shape " + to_string(frame.shape()) + " does not match model input " +
                            to_string(graph_.input_shape));
    }
    for (std::size_t i = 0; i < n; ++i) {
      const auto& l = L[i];
      const Tensor& in = i == 0 ? frame : outs[i - 1];
      if (l.kind == LayerKind::residual_add) {
        outs[i] = residual_add(in, l.skip_from < 0 ? frame : outs[static_cast<std::size_t>(l.skip_from)]);
        continue;
      }
      LayerCounters counters;
      ForwardOptions opt;
      opt.delta_input = plan_[i].delta_input;
      opt.binary_input = plan_[i].binary_input;
      Tensor z;
      outs[i] = forward_layer(l, fwd[i], in, st[i], counters, opt, &z);
      if (!record || !has_synapses(l.kind)) continue;
      if (plan_[i].delta_input) {
        if (t == 0) xsum[i] = Tensor(in.shape());
        add_into(xsum[i], in);
        xs[i].push_back(xsum[i]);
      } else {
        xs[i].push_back(in);
      }
      zs[i].push_back(std::move(z));
      if (l.neuron.kind == NeuronKind::lif) {
        ys[i].push_back(outs[i]);
        std::vector<double> u(st[i].lif.size());
        for (std::size_t k = 0; k < u.size(); ++k) u[k] = st[i].lif[k].u;
        us[i].push_back(std::move(u));
      }
    }
    const auto v = outs[n - 1].values();
    out_seq[t].assign(v.begin(), v.end());
  }

  if (outputs) {
    outputs->clear();
    for (const auto& o : out_seq) {
      if (o.size() != 2) throw ValidationError("model output is not a 2-unit classifier");
      outputs->push_back({o[kFallUnit], o[kNoFallUnit]});
    }
  }

  // loss and its gradient w.r.t. the output sequence
  const std::size_t n_out = out_seq[0].size();
  std::vector<std::vector<double>> gout(T, std::vector<double>(n_out, 0.0));
  double loss = 0.0;
  switch (cfg_.loss) {
    case LossKind::focal: {
      if (n_out != 2) throw ValidationError("focal loss needs a 2-unit classifier");
      const int y = ex.fall ? 1 : 0;
      if (graph_.decision == DecisionMode::spike_count) {
        double sf = 0.0;
        double sn = 0.0;
        for (const auto& o : out_seq) {
          sf += o[kFallUnit];
          sn += o[kNoFallUnit];
        }
        // Laplace-smoothed share keeps a gradient when no output spikes
        const double s2 = sf + sn + 2.0;
        const double p = (sf + 1.0) / s2;
        loss = focal_loss({p, y}, cfg_.focal);
        const double dp = focal_loss_grad({p, y}, cfg_.focal);
        for (auto& g : gout) {
          g[kFallUnit] = dp * (sn + 1.0) / (s2 * s2);
          g[kNoFallUnit] = -dp * (sf + 1.0) / (s2 * s2);
        }
      } else {
        std::size_t best = 0;
        for (std::size_t t = 1; t < T; ++t) {
          if (out_seq[t][kFallUnit] - out_seq[t][kNoFallUnit] >
              out_seq[best][kFallUnit] - out_seq[best][kNoFallUnit]) {
            best = t;
          }
        }
        const double p = logistic(out_seq[best][kFallUnit] - out_seq[best][kNoFallUnit]);
        loss = focal_loss({p, y}, cfg_.focal);
        const double gd = focal_loss_grad({p, y}, cfg_.focal) * p * (1.0 - p);
        gout[best][kFallUnit] = gd;
        gout[best][kNoFallUnit] = -gd;
      }
      break;
    }
    case LossKind::mse:
      for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t k = 0; k < n_out; ++k) {
          const double target = (k == (ex.fall ? kFallUnit : kNoFallUnit)) ? 1.0 : 0.0;
          const double d = out_seq[t][k] - target;
          loss += 0.5 * d * d;
          gout[t][k] = d;
        }
      }
      break;
    case LossKind::output_sum:
      for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t k = 0; k < n_out; ++k) {
          loss += out_seq[t][k];
          gout[t][k] = 1.0;
        }
      }
      break;
  }
  if (!std::isfinite(loss)) {
    throw NumericError("non-finite training loss (" + std::to_string(loss) + ") on a " +
                       std::to_string(T) + "-step example");
  }
  if (!grads) return loss;

  *grads = zeros_like(values_);
  std::vector<std::vector<Tensor>> gy(n);
  auto grad_of = [&](std::size_t layer, std::size_t t) -> Tensor& {
    auto& v = gy[layer];
    if (v.empty()) {
      v.reserve(T);
      for (std::size_t k = 0; k < T; ++k) v.emplace_back(L[layer].out_shape);
    }
    return v[t];
  };
  for (std::size_t t = 0; t < T; ++t) {
    Tensor& g = grad_of(n - 1, t);
    for (std::size_t k = 0; k < n_out; ++k) g[k] = gout[t][k];
  }

  for (std::size_t ii = n; ii-- > 0;) {
    const auto& l = L[ii];
    if (gy[ii].empty()) continue;
    auto& G = gy[ii];
    switch (l.kind) {
      case LayerKind::residual_add:
        for (std::size_t t = 0; t < T; ++t) {
          if (ii > 0) add_into(grad_of(ii - 1, t), G[t]);
          if (l.skip_from >= 0) add_into(grad_of(static_cast<std::size_t>(l.skip_from), t), G[t]);
        }
        continue;
      case LayerKind::flatten:
        if (ii > 0) {
          for (std::size_t t = 0; t < T; ++t) {
            Tensor& dst = grad_of(ii - 1, t);
            for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += G[t][k];
          }
        }
        continue;
      case LayerKind::avgpool:
        if (ii > 0) {
          for (std::size_t t = 0; t < T; ++t) {
            Tensor& dst = grad_of(ii - 1, t);
            const auto plane = dst.shape().plane();
            for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += G[t][k / plane] / static_cast<double>(plane);
          }
        }
        continue;
      default: break;
    }

    // neuron backward: G (dL/dy) -> gz (dL/dz)
    const auto& nspec = l.neuron;
    std::vector<Tensor> gz(T, Tensor(l.out_shape));
    const std::size_t N = l.out_shape.size();
    auto& lg = (*grads)[ii];
    switch (nspec.kind) {
      case NeuronKind::identity: gz = G; break;
      case NeuronKind::relu:
      case NeuronKind::sigma_delta:
        // SigmaDelta: the receiver reconstructs relu(z) up to the residual,
        // which the backward pass ignores
        for (std::size_t t = 0; t < T; ++t) {
          for (std::size_t k = 0; k < N; ++k) gz[t][k] = zs[ii][t][k] > 0.0 ? G[t][k] : 0.0;
        }
        break;
      case NeuronKind::lif: {
        std::vector<double> gu_next(N, 0.0);
        std::vector<double> gi_next(N, 0.0);
        double gtheta = 0.0;
        const double theta = nspec.theta;
        for (std::size_t t = T; t-- > 0;) {
          for (std::size_t k = 0; k < N; ++k) {
            const double u = us[ii][t][k];
            const double y = ys[ii][t][k];
            const double dyu = surrogate_grad(u, theta, nspec.spike_mode, cfg_.surrogate);
            const double g = surrogate_grad(u, theta, SpikeMode::binary, cfg_.surrogate);
            const double gyk = G[t][k];
            // reset factor is treated as a constant
            const double gu = gyk * dyu + gu_next[k] * nspec.beta * (1.0 - heaviside(y - 1.0));
            const double gi = gu + gi_next[k] * nspec.alpha;
            gz[t][k] = gi;
            gtheta += gyk * (nspec.spike_mode == SpikeMode::binary ? -g : -std::max(u, 0.0) * g);
            gu_next[k] = gu;
            gi_next[k] = gi;
          }
        }
        if (!lg[slot_theta].empty()) lg[slot_theta][0] += gtheta;
        break;
      }
      case NeuronKind::s4d: {
        const auto d = static_cast<std::size_t>(nspec.d_state);
        for (std::size_t k = 0; k < N; ++k) {
          const auto p = nspec.s4d(k);
          const auto kern = s4d_kernel(p, T);
          std::vector<double> gk(T, 0.0);
          for (std::size_t t = 0; t < T; ++t) {
            double acc = 0.0;
            for (std::size_t t2 = t; t2 < T; ++t2) acc += kern[t2 - t] * G[t2][k];
            gz[t][k] = acc;
          }
          for (std::size_t m = 0; m < T; ++m) {
            double acc = 0.0;
            for (std::size_t t = m; t < T; ++t) acc += G[t][k] * zs[ii][t - m][k];
            gk[m] = acc;
          }
          for (std::size_t e = 0; e < d; ++e) {
            const double a = p.a[e];
            const double b = p.b[e];
            const double c = p.c[e];
            double ga = 0.0;
            double gb = 0.0;
            double gc = 0.0;
            double pow_m = 1.0;   // a^m
            double pow_m1 = 0.0;  // a^(m-1), 0 for m = 0
            for (std::size_t m = 0; m < T; ++m) {
              ga += gk[m] * c * b * static_cast<double>(m) * pow_m1;
              gb += gk[m] * c * pow_m;
              gc += gk[m] * pow_m * b;
              pow_m1 = pow_m;
              pow_m *= a;
            }
            lg[slot_s4d_a][k * d + e] += ga;
            lg[slot_s4d_b][k * d + e] += gb;
            lg[slot_s4d_c][k * d + e] += gc;
          }
        }
        break;
      }
    }

    const bool need_gx = ii > 0;
    for (std::size_t t = 0; t < T; ++t) {
      Tensor* gx = need_gx ? &grad_of(ii - 1, t) : nullptr;
      synapse_backward(l, fwd[ii].weights, xs[ii][t], gz[t], lg[slot_weights], lg[slot_bias], gx);
    }
    gy[ii].clear();
    gy[ii].shrink_to_fit();
  }
  return loss;
}

double Trainer::loss_and_gradients(const TrainExample& ex, Gradients& grads) const {
  return run(ex, &grads, nullptr);
}

double Trainer::loss(const TrainExample& ex) const { return run(ex, nullptr, nullptr); }

std::vector<Logits> Trainer::forward_outputs(const TrainExample& ex) const {
  std::vector<Logits> out;
  run(ex, nullptr, &out);
  return out;
}

StepResult Trainer::train_step(std::span<const TrainExample> batch) {
  if (batch.empty()) throw ValidationError("empty training batch");
  const auto B = static_cast<long>(batch.size());
  std::vector<Gradients> per(batch.size());
  std::vector<double> losses(batch.size(), 0.0);
  std::exception_ptr err;
#pragma omp parallel for schedule(dynamic, 1)
  for (long b = 0; b < B; ++b) {
    try {
      losses[static_cast<std::size_t>(b)] =
          run(batch[static_cast<std::size_t>(b)], &per[static_cast<std::size_t>(b)], nullptr);
    } catch (...) {
#pragma omp critical
      if (!err) err = std::current_exception();
    }
  }
  if (err) std::rethrow_exception(err);

  // ordered reduction
  Gradients g = zeros_like(values_);
  StepResult r;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    r.loss += losses[b];
    for (std::size_t i = 0; i < g.size(); ++i) {
      for (std::size_t s = 0; s < kParamSlots; ++s) {
        auto& dst = g[i][s];
        const auto& src = per[b][i][s];
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
      }
    }
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  r.loss *= inv;
  double sq = 0.0;
  for (auto& layer : g) {
    for (auto& slot : layer) {
      for (auto& x : slot) {
        x *= inv;
        sq += x * x;
      }
    }
  }
  r.grad_norm = std::sqrt(sq);
  if (!std::isfinite(r.grad_norm)) {
    throw NumericError("non-finite gradient norm at step " + std::to_string(step_ + 1) + " (batch loss " +
                       std::to_string(r.loss) + ")");
  }
  double scale = 1.0;
  if (r.grad_norm > cfg_.clip_norm) {
    scale = cfg_.clip_norm / r.grad_norm;
    r.clipped = true;
  }

  ++step_;
  const double b1 = cfg_.adam_beta1;
  const double b2 = cfg_.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  for (std::size_t i = 0; i < values_.size(); ++i) {
    const bool head = i >= graph_.backbone_layers || graph_.layers[i].neuron.kind == NeuronKind::s4d;
    const double lr = head ? cfg_.lr_head : cfg_.lr_backbone;
    for (std::size_t s = 0; s < kParamSlots; ++s) {
      if (s == slot_theta && !cfg_.learn_thresholds) continue;
      auto& w = values_[i][s];
      auto& m = m_[i][s];
      auto& v = v_[i][s];
      const auto& gs = g[i][s];
      for (std::size_t k = 0; k < w.size(); ++k) {
        const double gk = gs[k] * scale;
        m[k] = b1 * m[k] + (1.0 - b1) * gk;
        v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
        w[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg_.adam_eps);
      }
    }
    auto& th = values_[i][slot_theta];
    if (!th.empty()) th[0] = std::max(th[0], 1.0);
    for (auto& a : values_[i][slot_s4d_a]) a = std::clamp(a, -0.999, 0.999);
  }
  sync_params();
  return r;
}

EpochResult Trainer::train_epoch(const std::vector<TrainExample>& data) {
  if (data.empty()) throw ValidationError("empty training set");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(cfg_.seed * 0x9E3779B97F4A7C15ull + epoch_);
  std::shuffle(order.begin(), order.end(), rng);
  EpochResult r;
  r.epoch = static_cast<int>(++epoch_);
  const auto bs = static_cast<std::size_t>(cfg_.batch_size);
  double total = 0.0;
  for (std::size_t i = 0; i < order.size(); i += bs) {
    std::vector<TrainExample> batch;
    for (std::size_t k = i; k < std::min(order.size(), i + bs); ++k) batch.push_back(data[order[k]]);
    const auto s = train_step(batch);
    total += s.loss * static_cast<double>(batch.size());
    ++r.steps;
  }
  r.mean_loss = total / static_cast<double>(data.size());
  return r;
}

std::vector<EpochResult> Trainer::fit(const std::vector<TrainExample>& data,
                                      const std::function<void(const EpochResult&)>& on_epoch) {
  std::vector<EpochResult> out;
  for (int e = 0; e < cfg_.epochs; ++e) {
    out.push_back(train_epoch(data));
    if (on_epoch) on_epoch(out.back());
  }
  return out;
}

// --- checkpoints ----------------------------------------------------------------------------

namespace {

constexpr char kOptMagic[4] = {'E', 'V', 'S', 'O'};

std::uint32_t crc_of(std::span<const std::uint8_t> bytes) {
  return static_cast<std::uint32_t>(crc32(crc32(0L, Z_NULL, 0), bytes.data(), static_cast<uInt>(bytes.size())));
}

}  // namespace

void Trainer::save_checkpoint(const std::string& path) const {
  save_model_file(export_model(), path);
  ByteWriter w;
  w.put_bytes(std::string_view(kOptMagic, 4));
  w.put_u16(1);
  w.put_u64(step_);
  w.put_u64(epoch_);
  w.put_u32(static_cast<std::uint32_t>(values_.size()));
  for (std::size_t i = 0; i < values_.size(); ++i) {
    for (std::size_t s = 0; s < kParamSlots; ++s) {
      const auto& v = values_[i][s];
      w.put_u32(static_cast<std::uint32_t>(v.size()));
      for (std::size_t k = 0; k < v.size(); ++k) {
        w.put_f64(v[k]);
        w.put_f64(m_[i][s][k]);
        w.put_f64(v_[i][s][k]);
      }
    }
  }
  w.put_u32(crc_of(w.buffer()));
  write_file_atomic(path + ".opt", w.buffer());
}

Trainer Trainer::load_checkpoint(const std::string& path, TrainConfig cfg) {
  ModelGraph g = load_model_file(path);
  const auto bytes = read_file(path + ".opt");
  ByteReader r(bytes);
  if (r.get_bytes(4, "magic") != std::string_view(kOptMagic, 4)) {
    throw FormatError("'" + path + ".opt' is not an optimizer sidecar");
  }
  if (r.get_u16("version") != 1) throw FormatError("unsupported optimizer sidecar version");
  const auto step = r.get_u64("step");
  const auto epoch = r.get_u64("epoch");
  const auto layers = r.get_u32("layer count");
  if (layers != g.layers.size()) throw ValidationError("optimizer sidecar does not match the model");
  std::vector<LayerTensors> val(layers);
  std::vector<LayerTensors> m(layers);
  std::vector<LayerTensors> v(layers);
  for (std::size_t i = 0; i < layers; ++i) {
    for (std::size_t s = 0; s < kParamSlots; ++s) {
      const auto n = r.get_u32("slot size");
      r.require(static_cast<std::size_t>(n) * 24, "slot values");
      for (auto* dst : {&val[i][s], &m[i][s], &v[i][s]}) dst->resize(n);
      for (std::size_t k = 0; k < n; ++k) {
        val[i][s][k] = r.get_f64("value");
        m[i][s][k] = r.get_f64("moment");
        v[i][s][k] = r.get_f64("moment");
      }
    }
  }
  const auto body = r.offset();
  if (r.get_u32("checksum") != crc_of(std::span<const std::uint8_t>(bytes).first(body))) {
    throw FormatError("optimizer sidecar checksum mismatch");
  }
  std::vector<LayerParams> master(layers);
  for (std::size_t i = 0; i < layers; ++i) {
    master[i].weights = val[i][slot_weights];
    master[i].bias = val[i][slot_bias];
  }
  Trainer t(std::move(g), std::move(master), cfg);
  for (std::size_t i = 0; i < layers; ++i) {
    for (std::size_t s = 0; s < kParamSlots; ++s) {
      if (val[i][s].size() != t.values_[i][s].size()) throw ValidationError("optimizer sidecar slot size mismatch");
    }
  }
  t.values_ = std::move(val);
  t.m_ = std::move(m);
  t.v_ = std::move(v);
  t.step_ = step;
  t.epoch_ = epoch;
  t.sync_params();
  return t;
}

// --- finite differences ---------------------------------------------------------------------

FiniteDiffReport finite_diff_check(const Trainer& trainer, const TrainExample& ex, double epsilon,
                                   std::size_t max_params, std::uint64_t seed) {
  if (trainer.config().qat) throw ConfigError("finite differences need the unquantized forward (qat off)");
  Trainer t = trainer;
  Gradients grads;
  t.loss_and_gradients(ex, grads);

  struct Ref {
    std::size_t layer, slot, index;
  };
  std::vector<Ref> all;
  for (std::size_t i = 0; i < t.params().size(); ++i) {
    for (std::size_t s = 0; s < kParamSlots; ++s) {
      for (std::size_t k = 0; k < t.params()[i][s].size(); ++k) all.push_back({i, s, k});
    }
  }
  std::mt19937_64 rng(seed);
  std::shuffle(all.begin(), all.end(), rng);
  if (all.size() > max_params) all.resize(max_params);

  FiniteDiffReport rep;
  for (const auto& ref : all) {
    double& w = t.params()[ref.layer][ref.slot][ref.index];
    const double keep = w;
    w = keep + epsilon;
    t.sync_params();
    const double lp = t.loss(ex);
    w = keep - epsilon;
    t.sync_params();
    const double lm = t.loss(ex);
    w = keep;
    t.sync_params();
    FiniteDiffEntry e;
    e.layer = ref.layer;
    e.slot = ref.slot;
    e.index = ref.index;
    e.analytic = grads[ref.layer][ref.slot][ref.index];
    e.numeric = (lp - lm) / (2.0 * epsilon);
    e.rel_error = std::abs(e.analytic - e.numeric) / std::max({std::abs(e.analytic), std::abs(e.numeric), 1e-8});
    rep.max_rel_error = std::max(rep.max_rel_error, e.rel_error);
    rep.entries.push_back(e);
  }
  return rep;
}

}  // namespace evspike
