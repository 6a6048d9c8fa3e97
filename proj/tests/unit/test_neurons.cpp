#include <cmath>

#include "doctest.h"
#include "evspike/error.hpp"
#include "evspike/neurons.hpp"
#include "support.hpp"

using namespace evspike;
using testing::Rng;

TEST_CASE("relu") {
  CHECK(relu_step(-3.0) == 0.0);
  CHECK(relu_step(0.0) == 0.0);
  CHECK(relu_step(2.5) == 2.5);
}

TEST_CASE("sigma delta worked sequence") {
  const SigmaDeltaParams p{1.0};
  const double z[] = {3, 3, 5, 4, -2};
  const double want_y[] = {3, 0, 2, 0, 0};
  const double want_r[] = {0, 0, 0, -1, -5};
  SigmaDeltaState s;
  double sum = 0.0;
  for (int t = 0; t < 5; ++t) {
    const auto o = sigma_delta_step(s, z[t], p);
    CHECK(o.y == want_y[t]);
    CHECK(o.next.r == want_r[t]);
    s = o.next;
    sum += o.y;
  }
  CHECK(sum == 5.0);
  CHECK(relu_step(-2.0) - sum == s.r);
}

TEST_CASE("sigma decode is a running sum") {
  const double y[] = {3, 0, 2, 0, 0};
  const double want[] = {3, 3, 5, 5, 5};
  SigmaDeltaState s;
  for (int t = 0; t < 5; ++t) {
    const auto o = sigma_decode_step(s, y[t]);
    CHECK(o.a_hat == want[t]);
    s = o.next;
  }
  SigmaDeltaState z;
  for (int t = 0; t < 5; ++t) {
    const auto o = sigma_decode_step(z, 0.0);
    CHECK(o.a_hat == 0.0);
    z = o.next;
  }
}

TEST_CASE("sigma delta residual identity") {
  // dyadic inputs keep every sum exact
  Rng rng(17);
  for (int k = 0; k < 2000; ++k) {
    const SigmaDeltaParams p{testing::uniform_int(rng, 1, 16) / 8.0};
    SigmaDeltaState enc;
    SigmaDeltaState dec;
    double sum = 0.0;
    for (int t = 0; t < 50; ++t) {
      const double z = testing::uniform_int(rng, -64, 64) / 8.0;
      const auto o = sigma_delta_step(enc, z, p);
      enc = o.next;
      sum += o.y;
      REQUIRE(relu_step(z) - sum == enc.r);
      REQUIRE(enc.r < p.theta);
      const auto d = sigma_decode_step(dec, o.y);
      dec = d.next;
      REQUIRE(relu_step(z) - d.a_hat == enc.r);
    }
  }
}

TEST_CASE("lif worked sequence") {
  const double z[] = {1.0, 0.0, 0.6};
  const double want_graded[] = {1.0, 0.0, 1.1};
  const double want_binary[] = {1.0, 0.0, 1.0};
  const double want_i[] = {1.0, 0.5, 0.85};
  const double want_u[] = {1.0, 0.5, 1.1};
  for (auto mode : {SpikeMode::graded, SpikeMode::binary}) {
    const LifParams p{0.5, 0.5, 1.0, mode};
    LifState s;
    for (int t = 0; t < 3; ++t) {
      const auto o = lif_step(s, z[t], p);
      CHECK(o.next.i == doctest::Approx(want_i[t]).epsilon(1e-15));
      CHECK(o.next.u == doctest::Approx(want_u[t]).epsilon(1e-15));
      CHECK(o.y == doctest::Approx(mode == SpikeMode::graded ? want_graded[t] : want_binary[t]).epsilon(1e-15));
      s = o.next;
    }
  }
}

TEST_CASE("lif properties") {
  Rng rng(23);
  for (int k = 0; k < 500; ++k) {
    const double alpha = testing::uniform(rng, 0.0, 1.0);
    const double beta = testing::uniform(rng, 0.0, 1.0);
    const double theta = testing::uniform(rng, 1.0, 3.0);
    const LifParams pg{alpha, beta, theta, SpikeMode::graded};
    const LifParams pb{alpha, beta, theta, SpikeMode::binary};
    LifState sg;
    LifState sb;
    for (int t = 0; t < 60; ++t) {
      const double z = testing::uniform(rng, -1.0, 2.5);
      const auto og = lif_step(sg, z, pg);
      const auto ob = lif_step(sb, z, pb);
      REQUIRE((ob.y == 0.0 || ob.y == 1.0));
      REQUIRE((og.y == 0.0 || og.y >= theta));
      // any theta >= 1 makes both modes reset on every spike
      REQUIRE((og.y != 0.0) == (ob.y != 0.0));
      sg = og.next;
      sb = ob.next;
    }
  }
}

TEST_CASE("memoryless graded lif with tiny threshold is relu") {
  Rng rng(29);
  const LifParams p{0.0, 0.0, 1e-12, SpikeMode::graded};
  LifState s;
  for (int t = 0; t < 1000; ++t) {
    double z = testing::uniform(rng, -3.0, 3.0);
    if (std::abs(z) < 1e-6) z = 0.5;
    const auto o = lif_step(s, z, p);
    REQUIRE(o.y == relu_step(z));
    s = o.next;
  }
}

TEST_CASE("lif validation") {
  CHECK_NOTHROW(validate(LifParams{0.5, 0.5, 1.0, SpikeMode::graded}));
  CHECK_THROWS_AS(validate(LifParams{0.5, 0.5, 0.5, SpikeMode::graded}), ConfigError);
  CHECK_THROWS_AS(validate(LifParams{1.5, 0.5, 1.0, SpikeMode::graded}), ConfigError);
  CHECK_THROWS_AS(validate(LifParams{0.5, -0.1, 1.0, SpikeMode::graded}), ConfigError);
}

TEST_CASE("step functions are state-pure") {
  const LifState s{0.3, 0.7, 1.0};
  const LifParams p{0.4, 0.9, 1.0, SpikeMode::graded};
  const auto a = lif_step(s, 0.8, p);
  const auto b = lif_step(s, 0.8, p);
  CHECK(a.y == b.y);
  CHECK(a.next == b.next);
  const SigmaDeltaState d{0.25, 1.5, 0.0};
  CHECK(sigma_delta_step(d, 2.0, {0.5}).next == sigma_delta_step(d, 2.0, {0.5}).next);
}

TEST_CASE("s4d worked sequence") {
  const S4dParams p{{0.5}, {1.0}, {2.0}};
  std::vector<double> s{0.0};
  const double z[] = {1, 0, 0};
  const double want_y[] = {2, 1, 0.5};
  const double want_s[] = {1, 0.5, 0.25};
  for (int t = 0; t < 3; ++t) {
    const auto o = s4d_step(s, z[t], p);
    CHECK(o.y == want_y[t]);
    CHECK(o.next[0] == want_s[t]);
    s = o.next;
  }
  std::vector<double> zs{0.0};
  for (int t = 0; t < 5; ++t) {
    const auto o = s4d_step(zs, 0.0, p);
    CHECK(o.y == 0.0);
    zs = o.next;
  }
}

TEST_CASE("s4d kernel") {
  CHECK(s4d_kernel(S4dParams{{0.5}, {1.0}, {2.0}}, 3) == std::vector<double>{2.0, 1.0, 0.5});
  CHECK(s4d_kernel(S4dParams{{0.0}, {3.0}, {2.0}}, 4) == std::vector<double>{6.0, 0.0, 0.0, 0.0});
}

TEST_CASE("s4d recurrent form equals convolution form") {
  Rng rng(31);
  for (int k = 0; k < 50; ++k) {
    const std::size_t d = static_cast<std::size_t>(testing::uniform_int(rng, 1, 8));
    S4dParams p{testing::random_vector(rng, d, -0.99, 0.99), testing::random_vector(rng, d),
                testing::random_vector(rng, d)};
    const std::size_t L = static_cast<std::size_t>(testing::uniform_int(rng, 1, 1024));
    const auto z = testing::random_vector(rng, L, -2.0, 2.0);
    const auto conv = causal_conv(z, s4d_kernel(p, L));
    std::vector<double> s(d, 0.0);
    double worst = 0.0;
    for (std::size_t t = 0; t < L; ++t) {
      const auto o = s4d_step(s, z[t], p);
      s = o.next;
      worst = std::max(worst, std::abs(o.y - conv[t]));
    }
    REQUIRE(worst < 1e-6);
  }
}

TEST_CASE("s4d stability warnings") {
  CHECK(s4d_stability_warnings(S4dParams{{0.5, -0.9}, {1, 1}, {1, 1}}).empty());
  CHECK(s4d_stability_warnings(S4dParams{{0.5, 1.0, -1.2}, {1, 1, 1}, {1, 1, 1}}).size() == 2);
}

TEST_CASE("fixed point grid") {
  const FixedPointFormat f{8, 24};
  CHECK(f.step() == 1.0 / 256.0);
  CHECK(f.quantize(0.5) == 0.5);
  CHECK(f.quantize(1.0 / 512.0 * 3.0) == 2.0 / 256.0);
  CHECK(f.quantize(1e9) == f.max_value());
  CHECK(f.quantize(-1e9) == -f.max_value());
  Rng rng(37);
  for (int k = 0; k < 10000; ++k) {
    const double v = testing::uniform(rng, -1000.0, 1000.0);
    REQUIRE(std::abs(f.quantize(v) - v) <= f.step() / 2);
  }
}
