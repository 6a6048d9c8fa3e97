#include <algorithm>
#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "evspike/bench.hpp"
#include "evspike/error.hpp"
#include "support.hpp"

using namespace evspike;
using testing::Rng;

namespace {

// Zero weights and a positive NoFall bias: predicts NoFall for every input.
ModelGraph constant_nofall(int side) {
  BuildOptions o;
  o.input_side = side;
  o.conv_channels = {4};
  o.mlp_hidden = {4};
  auto g = build_cnn_mlp(NeuronMode::relu, o);
  for (auto& l : g.layers) {
    if (!has_synapses(l.kind)) continue;
    std::vector<double> b(bias_count(l), 0.0);
    if (&l == &g.layers.back()) b[kNoFallUnit] = 1.0;
    l.weights = quantize_weights(std::vector<double>(weight_count(l), 0.0), b);
  }
  return g;
}

ModelGraph fc_model(int n_in) {
  ModelGraph g;
  g.name = "fc";
  g.input_shape = {n_in, 1, 1};
  g.timestep_us = 1000;
  LayerSpec l;
  l.name = "fc";
  l.kind = LayerKind::fc;
  l.in_shape = g.input_shape;
  l.out_shape = {2, 1, 1};
  l.out_channels = 2;
  l.weights = quantize_weights(std::vector<double>(2 * static_cast<std::size_t>(n_in), 0.5));
  g.layers.push_back(l);
  return g;
}

}  // namespace

TEST_CASE("decide") {
  const std::vector<Logits> spikes{{4, 1}, {6, 1}};
  const auto d = decide(spikes, DecisionMode::spike_count);
  CHECK(d.cls == FallClass::fall);
  CHECK(d.p == doctest::Approx(10.0 / 12.0));

  const std::vector<Logits> flat{{0, 0}, {0, 0}};
  const auto t = decide(flat, DecisionMode::max_logit_diff);
  CHECK(t.p == 0.5);
  CHECK(t.cls == FallClass::no_fall);
  CHECK(decide(flat, DecisionMode::spike_count).p == 0.5);
  CHECK(decide(flat, DecisionMode::spike_count).cls == FallClass::no_fall);
  CHECK_THROWS_AS(decide(std::vector<Logits>{}, DecisionMode::spike_count), ValidationError);

  Rng rng(13);
  for (int k = 0; k < 2000; ++k) {
    std::vector<Logits> outs(static_cast<std::size_t>(testing::uniform_int(rng, 1, 6)));
    for (auto& o : outs) o = {testing::uniform(rng, 0.0, 3.0), testing::uniform(rng, 0.0, 3.0)};
    for (auto mode : {DecisionMode::spike_count, DecisionMode::max_logit_diff}) {
      const double before = decide(outs, mode).p;
      auto bumped = outs;
      bumped[static_cast<std::size_t>(testing::uniform_int(rng, 0, static_cast<int>(outs.size()) - 1))][kFallUnit] +=
          testing::uniform(rng, 0.0, 2.0);
      REQUIRE(decide(bumped, mode).p >= before);
    }
  }
}

TEST_CASE("focal loss") {
  const FocalLossParams fp{0.9, 2.0};
  CHECK(focal_loss({0.9, 1}, fp) == doctest::Approx(0.9 * 0.01 * -std::log(0.9)).epsilon(1e-12));
  CHECK(focal_loss({0.9, 1}, fp) == doctest::Approx(9.4824e-4).epsilon(1e-4));
  CHECK(focal_loss({0.9, 0}, fp) == doctest::Approx(0.186509).epsilon(1e-5));
  const FocalLossParams ce{0.5, 0.0};
  CHECK(focal_loss({0.3, 1}, ce) == doctest::Approx(-0.5 * std::log(0.3)));
  CHECK(focal_loss({0.3, 0}, ce) == doctest::Approx(-0.5 * std::log(0.7)));
  CHECK(std::isfinite(focal_loss({0.0, 1}, fp)));
  CHECK(std::isfinite(focal_loss({1.0, 0}, fp)));

  double prev1 = 1e300;
  double prev0 = -1.0;
  for (int k = 1; k < 1000; ++k) {
    const double p = k / 1000.0;
    const double l1 = focal_loss({p, 1}, fp);
    const double l0 = focal_loss({p, 0}, fp);
    REQUIRE(l1 >= 0.0);
    REQUIRE(l0 >= 0.0);
    REQUIRE(l1 <= prev1);
    REQUIRE(l0 >= prev0);
    prev1 = l1;
    prev0 = l0;
    // central difference oracle for the derivative
    const double h = 1e-6;
    for (int y : {0, 1}) {
      const double fd = (focal_loss({p + h, y}, fp) - focal_loss({p - h, y}, fp)) / (2 * h);
      REQUIRE(focal_loss_grad({p, y}, fp) == doctest::Approx(fd).epsilon(1e-5));
    }
  }
  CHECK(std::abs(focal_loss_grad({1.0 - 1e-6, 1}, fp)) < 1e-9);
  CHECK_THROWS_AS((FocalLossParams{1.5, 2.0}.validate()), ConfigError);
}

TEST_CASE("metrics") {
  CHECK(f1_score(0.871, 0.804) == doctest::Approx(0.836).epsilon(5e-4));
  ConfusionCounts all;
  all.tp = 7;
  all.tn = 93;
  const auto m = metrics(all);
  CHECK(m.accuracy == 1.0);
  CHECK(m.precision == 1.0);
  CHECK(m.recall == 1.0);
  CHECK(m.f1 == 1.0);
  ConfusionCounts miss;
  miss.fn = 3;
  miss.tn = 5;
  CHECK(metrics(miss).recall == 0.0);
  CHECK(metrics(miss).f1 == 0.0);
  CHECK_THROWS_AS(metrics(ConfusionCounts{}), ValidationError);
}

TEST_CASE("sparsity") {
  const auto g = fc_model(8);
  InferenceSession s(g);
  Tensor dense({8, 1, 1});
  dense.fill(1.0);
  s.infer_step(dense);
  s.infer_step(dense);
  CHECK(sparsity(s.ledger(), g, 2).sparsity == 1.0);

  s.clear_ledger();
  Tensor half({8, 1, 1}, {1, 0, 1, 0, 1, 0, 1, 0});
  s.infer_step(half);
  const auto r = sparsity(s.ledger(), g, 1);
  CHECK(r.sparsity == 2.0);
  CHECK(r.cost_synops_per_s == 8.0 * 1000.0);
  CHECK(r.dense_synops_per_s == 16.0 * 1000.0);

  s.clear_ledger();
  s.infer_step(Tensor({8, 1, 1}));
  CHECK(sparsity(s.ledger(), g, 1).infinite);
  CHECK_THROWS_AS(sparsity(s.ledger(), g, 0), ValidationError);
}

TEST_CASE("synthetic generator") {
  SyntheticParams p;
  p.n_samples = 1000;
  const auto a = gen_synthetic(4, p);
  CHECK(std::count_if(a.begin(), a.end(), [](const Sample& s) { return s.fall; }) == 70);

  SyntheticParams q;
  q.n_samples = 30;
  const auto x = gen_synthetic(9, q);
  const auto y = gen_synthetic(9, q);
  REQUIRE(x.size() == y.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    CHECK(x[i].id == y[i].id);
    CHECK(x[i].fall == y[i].fall);
    CHECK(encode_stream(x[i].stream) == encode_stream(y[i].stream));
  }
  const auto z = gen_synthetic(10, q);
  bool differs = false;
  for (std::size_t i = 0; i < x.size(); ++i) differs |= !(x[i].stream == z[i].stream);
  CHECK(differs);
  CHECK_THROWS_AS(gen_synthetic(1, SyntheticParams{4, 4}), ConfigError);
}

TEST_CASE("noise-free fall events stay on the scripted envelope") {
  SyntheticParams p;
  p.n_samples = 60;
  p.fall_fraction = 0.5;
  p.noise_rate = 0.0;
  int falls = 0;
  for (const auto& s : gen_synthetic(21, p)) {
    if (!s.fall) continue;
    ++falls;
    CHECK(s.script.kind == MotionKind::fall);
    CHECK(s.script.keys.back().y > s.script.keys.front().y);
    REQUIRE(!s.stream.events.empty());
    for (const auto& e : s.stream.events) {
      const auto [cx, cy] = s.script.center(e.t);
      // pixel cell [x, x+1) must touch the disk around the center
      const double dx = std::max({cx - (e.x + 1.0), 0.0, e.x - cx});
      const double dy = std::max({cy - (e.y + 1.0), 0.0, e.y - cy});
      REQUIRE(std::hypot(dx, dy) <= s.script.radius + 1e-9);
    }
  }
  CHECK(falls == 30);
}

TEST_CASE("dataset directory round trip") {
  SyntheticParams p;
  p.n_samples = 12;
  const auto data = gen_synthetic(2, p);
  const auto dir = std::filesystem::temp_directory_path() / "evspike_test_dataset";
  std::filesystem::remove_all(dir);
  save_dataset(dir.string(), data);
  const auto back = load_dataset(dir.string());
  REQUIRE(back.size() == data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    CHECK(back[i].id == data[i].id);
    CHECK(back[i].fall == data[i].fall);
    CHECK(back[i].stream == data[i].stream);
  }
  std::filesystem::remove_all(dir);
  CHECK_THROWS_AS(load_dataset(dir.string()), IoError);
}

TEST_CASE("constant nofall benchmark") {
  SyntheticParams p;
  p.n_samples = 100;
  const auto data = gen_synthetic(6, p);
  const auto g = constant_nofall(32);
  const auto rep = run_benchmark(g, data, {});
  CHECK(rep.counts.total() == 100);
  CHECK(rep.failed == 0);
  CHECK(rep.metrics.accuracy == doctest::Approx(0.93));
  CHECK(rep.metrics.recall == 0.0);
  CHECK(rep.metrics.f1 == 0.0);
}

TEST_CASE("benchmark totals are additive and order independent") {
  SyntheticParams p;
  p.n_samples = 24;
  auto data = gen_synthetic(8, p);
  BuildOptions o;
  o.input_side = 32;
  o.conv_channels = {4, 8};
  o.mlp_hidden = {8};
  o.init_gain = 3.0;
  const auto g = build_cnn_mlp(NeuronMode::lif_graded, o);
  BenchConfig cfg;
  cfg.schedule = ScheduleConfig{Scheme::fall_through, 250.0, 1};
  cfg.power = PowerSpec{2, {0.8, 10.0}};
  const auto rep = run_benchmark(g, data, cfg);

  std::uint64_t sum = 0;
  std::uint64_t steps = 0;
  for (const auto& s : rep.samples) {
    sum += s.synops;
    steps += s.timesteps;
  }
  CHECK(rep.ledger.total_synops() == sum);
  CHECK(rep.timesteps == steps);
  CHECK(rep.timing->hardware_steps == 4);
  CHECK(rep.power->static_mw == doctest::Approx(1.6));

  // independent per-sample replay
  Rng rng(1);
  const auto& probe = data[static_cast<std::size_t>(testing::uniform_int(rng, 0, 23))];
  const auto frames = prepare_frames(probe.stream, g, cfg);
  InferenceSession s(g);
  for (const auto& f : frames.frames) s.step(f);
  const auto it = std::find_if(rep.samples.begin(), rep.samples.end(), [&](const SampleResult& r) { return r.id == probe.id; });
  CHECK(it->synops == s.ledger().total_synops());

  std::reverse(data.begin(), data.end());
  const auto rev = run_benchmark(g, data, cfg);
  CHECK(rev.counts == rep.counts);
  CHECK(rev.ledger == rep.ledger);
  CHECK(rev.to_json().find(kBenchSchema) != std::string::npos);
  CHECK(rep.to_text().find("f1") != std::string::npos);
}

TEST_CASE("failing samples are recorded and skipped") {
  SyntheticParams p;
  p.n_samples = 5;
  auto data = gen_synthetic(3, p);
  data[2].stream.width = 64;
  data[2].stream.height = 64;
  const auto rep = run_benchmark(constant_nofall(32), data, {});
  CHECK(rep.failed == 1);
  CHECK(rep.counts.total() == 4);
  CHECK(rep.samples[2].failed);
  CHECK_FALSE(rep.samples[2].error.empty());
}
