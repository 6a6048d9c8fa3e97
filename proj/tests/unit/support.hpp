#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "evspike/events.hpp"
#include "evspike/layers.hpp"

namespace testing {

using Rng = std::mt19937_64;

inline double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

inline evspike::EventStream random_stream(Rng& rng, int w, int h, int n, std::uint64_t max_dt = 500) {
  evspike::EventStream s;
  s.width = w;
  s.height = h;
  std::uint64_t t = 0;
  for (int i = 0; i < n; ++i) {
    t += std::uniform_int_distribution<std::uint64_t>(0, max_dt)(rng);
    evspike::Event e;
    e.x = static_cast<std::uint16_t>(uniform_int(rng, 0, w - 1));
    e.y = static_cast<std::uint16_t>(uniform_int(rng, 0, h - 1));
    e.t = t;
    e.p = (rng() & 1u) ? evspike::Polarity::pos : evspike::Polarity::neg;
    s.events.push_back(e);
  }
  return s;
}

// Sparse random tensor: each entry nonzero with probability `density`.
inline evspike::Tensor random_tensor(Rng& rng, evspike::Shape shape, double density, bool binary = false) {
  evspike::Tensor t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (uniform(rng, 0.0, 1.0) < density) t[i] = binary ? 1.0 : uniform(rng, -2.0, 2.0);
  }
  return t;
}

inline std::vector<double> random_vector(Rng& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = uniform(rng, lo, hi);
  return v;
}

}  // namespace testing
