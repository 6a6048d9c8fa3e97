#include "evspike/neurons.hpp"

#include <cmath>

#include "evspike/error.hpp"

namespace evspike {

void validate(const LifParams& p) {
  if (!(p.alpha >= 0.0 && p.alpha <= 1.0) || !(p.beta >= 0.0 && p.beta <= 1.0)) {
    throw ConfigError("LIF decays must lie in [0, 1]");
  }
  if (!(p.theta >= 1.0)) {
    throw ConfigError("LIF threshold must be >= 1 so that every spike resets the voltage");
  }
}

double s4d_step(std::span<double> state, double z, std::span<const double> a,
                std::span<const double> b, std::span<const double> c) noexcept {
  double y = 0.0;
  for (std::size_t k = 0; k < state.size(); ++k) {
    state[k] = a[k] * state[k] + b[k] * z;
    y += c[k] * state[k];
  }
  return y;
}

S4dOutput s4d_step(std::span<const double> state, double z, const S4dParams& p) {
  S4dOutput out{0.0, {state.begin(), state.end()}};
  out.y = s4d_step(out.next, z, p.a, p.b, p.c);
  return out;
}

std::vector<double> s4d_kernel(std::span<const double> a, std::span<const double> b,
                               std::span<const double> c, std::size_t length) {
  std::vector<double> k(length, 0.0);
  for (std::size_t d = 0; d < a.size(); ++d) {
    double pow_a = 1.0;
    const double cb = c[d] * b[d];
    for (std::size_t n = 0; n < length; ++n) {
      k[n] += cb * pow_a;
      pow_a *= a[d];
    }
  }
  return k;
}

std::vector<double> s4d_kernel(const S4dParams& p, std::size_t length) {
  return s4d_kernel(p.a, p.b, p.c, length);
}

std::vector<double> causal_conv(std::span<const double> z, std::span<const double> kernel) {
  std::vector<double> y(z.size(), 0.0);
  for (std::size_t t = 0; t < z.size(); ++t) {
    double acc = 0.0;
    for (std::size_t k = 0; k <= t && t - k < kernel.size(); ++k) acc += kernel[t - k] * z[k];
    y[t] = acc;
  }
  return y;
}

std::vector<std::string> s4d_stability_warnings(const S4dParams& p) {
  std::vector<std::string> out;
  for (std::size_t d = 0; d < p.a.size(); ++d) {
    if (!(std::abs(p.a[d]) < 1.0)) {
      out.push_back("S4D state " + std::to_string(d) + " has |a| = " +
                    std::to_string(std::abs(p.a[d])) + " >= 1; recurrence is unstable");
    }
  }
  return out;
}

double FixedPointFormat::step() const noexcept { return std::ldexp(1.0, -frac_bits); }

double FixedPointFormat::max_value() const noexcept {
  return (std::ldexp(1.0, total_bits - 1) - 1.0) * step();
}

double FixedPointFormat::quantize(double v) const noexcept {
  const double lim = std::ldexp(1.0, total_bits - 1) - 1.0;
  double q = std::nearbyint(std::ldexp(v, frac_bits));
  if (q > lim) q = lim;
  if (q < -lim) q = -lim;
  return std::ldexp(q, -frac_bits);
}

}  // namespace evspike
