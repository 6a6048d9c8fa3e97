#include <cmath>
#include <filesystem>
#include <limits>

#include "doctest.h"
#include "evspike/error.hpp"
#include "evspike/parallel.hpp"
#include "evspike/train.hpp"
#include "support.hpp"

using namespace evspike;
using testing::Rng;

namespace {

LayerSpec fc(const std::string& name, int n_in, int n_out, NeuronKind k = NeuronKind::identity) {
  LayerSpec l;
  l.name = name;
  l.kind = LayerKind::fc;
  l.in_shape = {n_in, 1, 1};
  l.out_shape = {n_out, 1, 1};
  l.out_channels = n_out;
  l.neuron.kind = k;
  l.weights = quantize_weights(std::vector<double>(static_cast<std::size_t>(n_in * n_out), 0.1),
                               std::vector<double>(static_cast<std::size_t>(n_out), 0.0));
  return l;
}

ModelGraph chain(std::vector<LayerSpec> layers, std::size_t backbone = 0) {
  ModelGraph g;
  g.name = "toy";
  g.input_shape = layers.front().in_shape;
  g.timestep_us = 1000;
  g.group = 1;
  g.layers = std::move(layers);
  g.backbone_layers = backbone;
  g.validate();
  return g;
}

std::vector<LayerParams> random_master(const ModelGraph& g, Rng& rng, double w = 0.8) {
  std::vector<LayerParams> out;
  for (const auto& l : g.layers) {
    LayerParams p;
    p.weights = testing::random_vector(rng, weight_count(l), -w, w);
    p.bias = testing::random_vector(rng, bias_count(l), -0.5, 0.5);
    out.push_back(p);
  }
  return out;
}

TrainExample random_example(Rng& rng, const Shape& s, int steps, bool fall) {
  TrainExample ex;
  ex.fall = fall;
  for (int t = 0; t < steps; ++t) {
    Tensor f(s);
    for (auto& v : f.values()) v = testing::uniform(rng, -1.0, 1.0);
    ex.frames.push_back(f);
  }
  return ex;
}

TrainConfig exact_config(LossKind loss) {
  TrainConfig c;
  c.qat = false;
  c.loss = loss;
  c.learn_thresholds = false;
  return c;
}

BuildOptions tiny_cnn() {
  BuildOptions o;
  o.input_side = 16;
  o.conv_channels = {4, 8};
  o.mlp_hidden = {8};
  o.timestep_us = 100'000;
  o.group = 1;
  o.init_gain = 3.0;
  o.seed = 5;
  return o;
}

std::vector<TrainExample> tiny_data(const ModelGraph& g, int n) {
  SyntheticParams sp;
  sp.width = 16;
  sp.height = 16;
  sp.n_samples = n;
  sp.fall_fraction = 0.5;
  sp.duration_us = 400'000;
  return make_examples(gen_synthetic(17, sp), g);
}

bool same_params(const std::vector<LayerTensors>& a, const std::vector<LayerTensors>& b) {
  return a == b;
}

}  // namespace

TEST_CASE("surrogate values") {
  CHECK(surrogate_grad(1.0, 1.0, SpikeMode::binary) == 1.0);
  CHECK(surrogate_grad(1.2, 1.0, SpikeMode::binary) == doctest::Approx(1.0 / 1.44).epsilon(1e-14));
  CHECK(surrogate_grad(1.2, 1.0, SpikeMode::graded) == doctest::Approx(1.0 + 1.2 / 1.44).epsilon(1e-14));
  CHECK(surrogate_grad(1.2, 1.0, SpikeMode::graded) == doctest::Approx(1.8333).epsilon(1e-4));
  CHECK(surrogate_grad(0.0, 1.0, SpikeMode::graded) == 0.0);
  Rng rng(3);
  for (int k = 0; k < 1000; ++k) {
    const double u = testing::uniform(rng, -5.0, 5.0);
    const double s = testing::uniform(rng, 0.1, 5.0);
    const double g = surrogate_grad(u, 1.0, SpikeMode::binary, {s});
    REQUIRE(g > 0.0);
    REQUIRE(g <= 1.0);
    REQUIRE(g == doctest::Approx(1.0 / std::pow(1.0 + s * std::abs(u - 1.0), 2)).epsilon(1e-14));
  }
}

TEST_CASE("one-step lif gradient by hand") {
  auto l = fc("lif", 1, 2, NeuronKind::lif);
  l.neuron.alpha = 0.0;
  l.neuron.beta = 0.0;
  l.neuron.theta = 1.0;
  for (auto mode : {SpikeMode::graded, SpikeMode::binary}) {
    l.neuron.spike_mode = mode;
    const auto g = chain({l});
    auto cfg = exact_config(LossKind::output_sum);
    Trainer t(g, {LayerParams{{0.6, 0.0}, {0.0, 0.0}}}, cfg);
    TrainExample ex;
    ex.frames.push_back(Tensor({1, 1, 1}, {2.0}));
    Gradients grads;
    const double loss = t.loss_and_gradients(ex, grads);
    const double s = 1.0 / 1.44;
    if (mode == SpikeMode::graded) {
      CHECK(loss == doctest::Approx(1.2).epsilon(1e-15));
      CHECK(std::abs(grads[0][slot_weights][0] - 2.0 * (1.0 + 1.2 * s)) < 1e-12);
      CHECK(std::abs(grads[0][slot_weights][0] - 3.6667) < 1e-4);
    } else {
      CHECK(loss == 1.0);
      CHECK(std::abs(grads[0][slot_weights][0] - 2.0 * s) < 1e-12);
    }
    // u = 0 on the second unit
    CHECK(grads[0][slot_weights][1] == (mode == SpikeMode::graded ? 0.0 : 2.0 * 0.25));
  }
}

TEST_CASE("linear layer gradients are exact") {
  Rng rng(5);
  const auto g = chain({fc("lin", 5, 2)});
  Trainer t(g, random_master(g, rng), exact_config(LossKind::mse));
  const auto ex = random_example(rng, {5, 1, 1}, 3, true);
  const auto r = finite_diff_check(t, ex, 1e-5, 64, 1);
  CHECK(r.entries.size() == 12);
  CHECK(r.max_rel_error < 1e-8);
}

TEST_CASE("two-layer relu network matches finite differences") {
  Rng rng(7);
  const auto g = chain({fc("h", 6, 8, NeuronKind::relu), fc("o", 8, 2)}, 1);
  for (auto loss : {LossKind::mse, LossKind::focal}) {
    for (int trial = 0; trial < 5; ++trial) {
      Trainer t(g, random_master(g, rng), exact_config(loss));
      const auto ex = random_example(rng, {6, 1, 1}, 4, trial % 2 == 0);
      const auto r = finite_diff_check(t, ex, 1e-5, 64, static_cast<std::uint64_t>(trial));
      CHECK(r.max_rel_error < 1e-4);
    }
  }
}

TEST_CASE("relu plus s4d matches finite differences") {
  Rng rng(11);
  auto head = build_s4d_head(6, 5, 3, 2);
  auto g = chain({fc("h", 4, 6, NeuronKind::relu), head[0], head[1]}, 1);
  for (int trial = 0; trial < 4; ++trial) {
    Trainer t(g, random_master(g, rng), exact_config(LossKind::mse));
    const auto ex = random_example(rng, {4, 1, 1}, 12, true);
    const auto r = finite_diff_check(t, ex, 1e-5, 64, static_cast<std::uint64_t>(trial));
    CHECK(r.max_rel_error < 1e-4);
    bool s4d_checked = false;
    for (const auto& e : r.entries) s4d_checked |= e.slot >= slot_s4d_a;
    CHECK(s4d_checked);
  }
}

TEST_CASE("lif network finite differences are only reported") {
  Rng rng(13);
  auto g = build_cnn_mlp(NeuronMode::lif_graded, tiny_cnn());
  // positive output bias keeps the readout voltage above zero so gradient reaches every layer
  std::vector<LayerParams> master;
  for (const auto& l : g.layers) master.push_back(LayerParams::dequantize(l));
  for (auto& b : master.back().bias) b = 0.5;
  Trainer t(g, master, exact_config(LossKind::mse));
  const auto data = tiny_data(g, 2);
  const auto r = finite_diff_check(t, data[0], 1e-6, 64, 3);
  CHECK(r.entries.size() == 64);
  CHECK(std::isfinite(r.max_rel_error));
  double norm = 0.0;
  for (const auto& e : r.entries) norm += std::abs(e.analytic);
  CHECK(norm > 0.0);
  MESSAGE("LIF surrogate vs finite difference max relative error: " << r.max_rel_error);
  TrainConfig q;
  CHECK_THROWS_AS(finite_diff_check(Trainer(g, q), data[0]), ConfigError);
}

TEST_CASE("zero learning rate leaves weights unchanged") {
  auto g = build_cnn_mlp(NeuronMode::lif_graded, tiny_cnn());
  const auto data = tiny_data(g, 8);
  TrainConfig c;
  c.lr_backbone = 0.0;
  c.lr_head = 0.0;
  c.batch_size = 4;
  Trainer t(g, c);
  const auto before = t.params();
  t.train_epoch(data);
  CHECK(t.step_count() == 2);
  CHECK(same_params(t.params(), before));
  CHECK(t.export_model() == Trainer(g, c).export_model());
}

TEST_CASE("qat forward equals exported inference") {
  for (auto mode : {NeuronMode::lif_graded, NeuronMode::lif_binary, NeuronMode::relu, NeuronMode::sigma_delta}) {
    auto g = build_cnn_mlp(mode, tiny_cnn());
    const auto data = tiny_data(g, 8);
    TrainConfig c;
    c.lr_backbone = 1e-2;
    c.lr_head = 1e-2;
    c.batch_size = 4;
    Trainer t(g, c);
    t.train_epoch(data);
    const auto exported = t.export_model();
    for (const auto& ex : data) {
      InferenceSession s(exported);
      const auto train_out = t.forward_outputs(ex);
      REQUIRE(train_out.size() == ex.frames.size());
      for (std::size_t k = 0; k < ex.frames.size(); ++k) REQUIRE(s.step(ex.frames[k]) == train_out[k]);
    }
  }
}

TEST_CASE("training is reproducible") {
  auto g = build_cnn_mlp(NeuronMode::lif_graded, tiny_cnn());
  const auto data = tiny_data(g, 12);
  TrainConfig c;
  c.lr_backbone = 1e-2;
  c.lr_head = 1e-2;
  c.batch_size = 4;
  c.epochs = 3;
  std::vector<std::vector<EpochResult>> runs;
  std::vector<ModelGraph> models;
  for (int threads : {1, 3, 1}) {
    set_thread_count(threads);
    Trainer t(g, c);
    runs.push_back(t.fit(data));
    models.push_back(t.export_model());
  }
  set_thread_count(0);
  for (std::size_t k = 1; k < runs.size(); ++k) {
    REQUIRE(runs[k].size() == runs[0].size());
    for (std::size_t e = 0; e < runs[0].size(); ++e) CHECK(runs[k][e].mean_loss == runs[0][e].mean_loss);
    CHECK(models[k] == models[0]);
  }
}

TEST_CASE("training lowers the loss and keeps thresholds valid") {
  auto g = build_cnn_mlp(NeuronMode::lif_graded, tiny_cnn());
  const auto data = tiny_data(g, 16);
  TrainConfig c;
  c.lr_backbone = 5e-3;
  c.lr_head = 5e-3;
  c.batch_size = 4;
  c.epochs = 6;
  Trainer t(g, c);
  const auto hist = t.fit(data);
  CHECK(hist.back().mean_loss < hist.front().mean_loss);
  for (const auto& l : t.export_model().layers) {
    if (l.neuron.kind == NeuronKind::lif) CHECK(l.neuron.theta >= 1.0);
  }
}

TEST_CASE("gradient clipping") {
  Rng rng(19);
  const auto g = chain({fc("lin", 5, 2)});
  auto c = exact_config(LossKind::mse);
  c.clip_norm = 1e-3;
  Trainer t(g, random_master(g, rng, 3.0), c);
  const std::vector<TrainExample> batch{random_example(rng, {5, 1, 1}, 2, true)};
  const auto r = t.train_step(batch);
  CHECK(r.clipped);
  CHECK(r.grad_norm > 1e-3);
}

TEST_CASE("non-finite loss aborts") {
  const auto g = chain({fc("lin", 2, 2)});
  auto master = std::vector<LayerParams>{{{std::numeric_limits<double>::quiet_NaN(), 0, 0, 0}, {0, 0}}};
  Trainer t(g, master, exact_config(LossKind::mse));
  TrainExample ex;
  ex.frames.push_back(Tensor({2, 1, 1}, {1.0, 1.0}));
  const std::vector<TrainExample> batch{ex};
  CHECK_THROWS_AS(t.train_step(batch), NumericError);
}

TEST_CASE("checkpoint round trip resumes identically") {
  auto g = build_cnn_mlp(NeuronMode::lif_graded, tiny_cnn());
  const auto data = tiny_data(g, 8);
  TrainConfig c;
  c.lr_backbone = 1e-2;
  c.lr_head = 1e-2;
  c.batch_size = 4;
  Trainer a(g, c);
  a.train_epoch(data);
  const auto path = (std::filesystem::temp_directory_path() / "evspike_ckpt.evsm").string();
  a.save_checkpoint(path);
  Trainer b = Trainer::load_checkpoint(path, c);
  CHECK(b.step_count() == a.step_count());
  CHECK(same_params(b.params(), a.params()));
  CHECK(load_model_file(path) == a.export_model());
  const auto ea = a.train_epoch(data);
  const auto eb = b.train_epoch(data);
  CHECK(ea.mean_loss == eb.mean_loss);
  CHECK(same_params(b.params(), a.params()));
  std::filesystem::remove(path + ".opt");
  CHECK_THROWS(Trainer::load_checkpoint(path, c));
  std::filesystem::remove(path);
}

TEST_CASE("train config") {
  const auto c = parse_train_config(R"({"epochs": 3, "lr_backbone": 0.01, "qat": false, "focal_alpha": 0.8})");
  CHECK(c.epochs == 3);
  CHECK(c.lr_backbone == 0.01);
  CHECK_FALSE(c.qat);
  CHECK(c.focal.alpha == 0.8);
  CHECK(c.batch_size == 16);
  CHECK_THROWS_AS(parse_train_config(R"({"epoch": 3})"), ConfigError);
  CHECK_THROWS_AS(parse_train_config(R"({"epochs": 0})"), ConfigError);
  CHECK_THROWS_AS(parse_train_config("[1,2]"), ConfigError);
  const auto d = default_train_config(Architecture::cnn_mlp);
  CHECK(d.lr_backbone == 1e-5);
  CHECK(d.epochs == 100);
  CHECK(d.batch_size == 16);
  const auto s = default_train_config(Architecture::mcu_s4d);
  CHECK(s.lr_backbone == 5e-5);
  CHECK(s.lr_head == 5e-6);
}
