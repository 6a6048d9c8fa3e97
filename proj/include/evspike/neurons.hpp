#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace evspike {

enum class SpikeMode : std::uint8_t { binary = 0, graded = 1 };

/// Heaviside step with H(0) = 1.
constexpr double heaviside(double x) noexcept { return x >= 0.0 ? 1.0 : 0.0; }

constexpr double relu_step(double z) noexcept { return z > 0.0 ? z : 0.0; }

// --- SigmaDelta -------------------------------------------------------------

struct SigmaDeltaParams {
  double theta = 0.0;
};

/// Encoder residual and last ReLU output, plus the receiver's accumulator.
struct SigmaDeltaState {
  double r = 0.0;
  double a_prev = 0.0;
  double sigma_acc = 0.0;

  friend bool operator==(const SigmaDeltaState&, const SigmaDeltaState&) = default;
};

struct SigmaDeltaOutput {
  double y;
  SigmaDeltaState next;
};

/// Delta encoder: sends Δa = a - a_prev + r as a graded spike once it reaches
/// theta, otherwise keeps it as residual. a - Σy == r after every step.
constexpr SigmaDeltaOutput sigma_delta_step(const SigmaDeltaState& s, double z,
                                            const SigmaDeltaParams& p) noexcept {
  const double a = relu_step(z);
  const double delta = a - s.a_prev + s.r;
  const double y = delta >= p.theta ? delta : 0.0;
  return {y, {delta - y, a, s.sigma_acc}};
}

struct SigmaDecodeOutput {
  double a_hat;
  SigmaDeltaState next;
};

constexpr SigmaDecodeOutput sigma_decode_step(const SigmaDeltaState& s, double y) noexcept {
  SigmaDeltaState n = s;
  n.sigma_acc += y;
  return {n.sigma_acc, n};
}

// --- LIF --------------------------------------------------------------------

struct LifParams {
  double alpha = 0.0;  ///< current decay
  double beta = 0.0;   ///< voltage decay
  double theta = 1.0;  ///< threshold, >= 1 so every spike triggers the hard reset
  SpikeMode mode = SpikeMode::graded;
};

struct LifState {
  double i = 0.0;
  double u = 0.0;
  double y_prev = 0.0;

  friend bool operator==(const LifState&, const LifState&) = default;
};

struct LifOutput {
  double y;
  LifState next;
};

/// Current-based LIF with hard reset: the decayed voltage is dropped whenever
/// the previous output was >= 1.
constexpr LifOutput lif_step(const LifState& s, double z, const LifParams& p) noexcept {
  const double i = p.alpha * s.i + z;
  const double u = p.beta * s.u * (1.0 - heaviside(s.y_prev - 1.0)) + i;
  double y = 0.0;
  if (u >= p.theta) y = p.mode == SpikeMode::graded ? u : 1.0;
  return {y, {i, u, y}};
}

/// Throws ConfigError when decays leave [0, 1] or theta < 1.
void validate(const LifParams& p);

// --- S4D --------------------------------------------------------------------

/// Diagonal state-space parameters of one neuron: d_state decays, input and
/// output projections.
struct S4dParams {
  std::vector<double> a;
  std::vector<double> b;
  std::vector<double> c;

  std::size_t d_state() const noexcept { return a.size(); }
};

/// Advances the state in place and returns the scalar readout Σ c·s'.
double s4d_step(std::span<double> state, double z, std::span<const double> a,
                std::span<const double> b, std::span<const double> c) noexcept;

struct S4dOutput {
  double y;
  std::vector<double> next;
};

S4dOutput s4d_step(std::span<const double> state, double z, const S4dParams& p);

/// Convolution kernel k[n] = Σ_d c_d·a_d^n·b_d for n in [0, length).
std::vector<double> s4d_kernel(std::span<const double> a, std::span<const double> b,
                               std::span<const double> c, std::size_t length);
std::vector<double> s4d_kernel(const S4dParams& p, std::size_t length);

/// Causal convolution y[t] = Σ_{k<=t} kernel[t-k]·z[k].
std::vector<double> causal_conv(std::span<const double> z, std::span<const double> kernel);

/// Human-readable warnings for |a| >= 1 (unstable recurrence); empty when stable.
std::vector<std::string> s4d_stability_warnings(const S4dParams& p);

// --- fixed point ------------------------------------------------------------

/// Signed fixed-point grid used by the quantized deployment path: values are
/// multiples of 2^-frac_bits, saturated to a `total_bits` two's complement range.
struct FixedPointFormat {
  int frac_bits = 8;
  int total_bits = 24;

  double step() const noexcept;
  double max_value() const noexcept;
  /// Round to nearest grid point, saturating.
  double quantize(double v) const noexcept;
};

}  // namespace evspike
