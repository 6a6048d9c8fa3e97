#include <random>

#include <benchmark/benchmark.h>

#include "evspike/events.hpp"
#include "evspike/layers.hpp"

using namespace evspike;

namespace {

LayerSpec conv3x3(int cin, int cout, int side) {
  LayerSpec s;
  s.name = "conv";
  s.kind = LayerKind::conv2d;
  s.in_shape = {cin, side, side};
  s.out_channels = cout;
  s.kernel = 3;
  s.stride = 1;
  s.padding = Padding::same;
  s.out_shape = output_shape(s, s.in_shape);
  return s;
}

struct Fixture {
  LayerSpec spec;
  std::vector<double> w;
  Tensor x;
};

// density given in percent
Fixture make(int density_pct) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Fixture f{conv3x3(16, 32, 32), {}, {}};
  f.w.resize(weight_count(f.spec));
  for (auto& v : f.w) v = u(rng) - 0.5;
  f.x = Tensor(f.spec.in_shape);
  for (auto& v : f.x.values())
    if (u(rng) * 100.0 < density_pct) v = 1.0;
  return f;
}

void BM_dense(benchmark::State& st) {
  const auto f = make(static_cast<int>(st.range(0)));
  for (auto _ : st) {
    Tensor acc(f.spec.out_shape);
    reference::accumulate_dense(f.spec, f.w, f.x, acc);
    benchmark::DoNotOptimize(acc.values().data());
  }
}

void BM_sparse(benchmark::State& st) {
  const auto f = make(static_cast<int>(st.range(0)));
  std::uint64_t synops = 0;
  for (auto _ : st) {
    Tensor acc(f.spec.out_shape);
    synops = accumulate_sparse(f.spec, f.w, f.x, acc, true);
    benchmark::DoNotOptimize(acc.values().data());
  }
  st.counters["synops"] = static_cast<double>(synops);
}

void BM_events(benchmark::State& st) {
  std::mt19937_64 rng(3);
  EventStream s;
  s.width = 320;
  s.height = 240;
  const std::size_t n = 1'000'000;
  s.events.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    s.events[i] = {static_cast<std::uint16_t>(rng() % 320), static_cast<std::uint16_t>(rng() % 240), i,
                   (rng() & 1u) ? Polarity::pos : Polarity::neg};
  }
  const auto bytes = encode_stream(s);
  for (auto _ : st) {
    const auto d = downsample(crop_roi(decode_stream(bytes), center_crop(320, 240, 160)), 2);
    AccumulationConfig ac;
    ac.width = d.width;
    ac.height = d.height;
    benchmark::DoNotOptimize(accumulate(d, ac).frames.size());
  }
  st.SetItemsProcessed(static_cast<std::int64_t>(st.iterations() * n));
}

}  // namespace

BENCHMARK(BM_dense)->Arg(1)->Arg(10)->Arg(50)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_sparse)->Arg(1)->Arg(10)->Arg(50)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_events)->Unit(benchmark::kMillisecond);
BENCHMARK_MAIN();
