#pragma once
// Analytic time-resolved fluorescence LiDAR signal generator.
//
// The expected photon histogram is an exponentially modified Gaussian: a
// Gaussian arrival-time spread (instrument response plus depth-dependent
// scattering broadening) centred on the round-trip delay t0 = 2 d n / c,
// convolved with the fluorophore's exponential decay. Depth also attenuates
// the peak. Counts are Poisson draws around that curve.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "emoe/error.hpp"
#include "emoe/nn.hpp"

namespace emoe {

struct Range {
  double min = 0.0;
  double max = 1.0;
  double width() const { return max - min; }
  double mid() const { return 0.5 * (min + max); }
  bool contains(double v) const { return v >= min && v <= max; }
};

struct SimConfig {
  std::size_t n_bins = 256;
  double bin_width_ns = 0.05;
  Range depth_cm{0.5, 2.0};
  Range lifetime_ns{0.2, 1.5};
  double refractive_index = 1.4;
  double light_speed_cm_per_ns = 29.9792;
  double irf_fwhm_ns = 0.15;
  double scatter_base_ns = 0.05;
  double scatter_slope_ns_per_cm = 0.08;
  double attenuation_per_cm = 0.8;
  double peak_counts = 2000.0;
  double background = 2.0;
  bool poisson_noise = true;
  std::uint64_t seed = 42;

  /// Ranges may be degenerate (min == max) for sampling; the target codec
  /// additionally requires min < max.
  void validate() const {
    auto positive = [](double v, const char* what) {
      if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(std::string(what) + " must be positive");
    };
    auto nonneg = [](double v, const char* what) {
      if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError(std::string(what) + " must be non-negative");
    };
    if (n_bins < 8) throw ConfigError("n_bins must be at least 8");
    positive(bin_width_ns, "bin_width_ns");
    positive(refractive_index, "refractive_index");
    positive(light_speed_cm_per_ns, "light_speed_cm_per_ns");
    positive(irf_fwhm_ns, "irf_fwhm_ns");
    positive(scatter_base_ns, "scatter_base_ns");
    nonneg(scatter_slope_ns_per_cm, "scatter_slope_ns_per_cm");
    nonneg(attenuation_per_cm, "attenuation_per_cm");
    nonneg(peak_counts, "peak_counts");
    nonneg(background, "background");
    positive(depth_cm.min, "depth_range minimum");
    positive(lifetime_ns.min, "lifetime_range minimum");
    if (depth_cm.min > depth_cm.max) throw ConfigError("depth_range min exceeds max");
    if (lifetime_ns.min > lifetime_ns.max) throw ConfigError("lifetime_range min exceeds max");
  }

  double irf_sigma_ns() const { return irf_fwhm_ns / 2.3548; }
  double delay_ns(double depth) const { return 2.0 * depth * refractive_index / light_speed_cm_per_ns; }
  double sigma_ns(double depth) const {
    const double scatter = scatter_base_ns + scatter_slope_ns_per_cm * depth;
    return std::sqrt(irf_sigma_ns() * irf_sigma_ns() + scatter * scatter);
  }
  double bin_center_ns(std::size_t i) const { return (static_cast<double>(i) + 0.5) * bin_width_ns; }
};

struct Scene {
  double depth_cm = 1.0;
  double lifetime_ns = 1.0;
};

struct Signal {
  std::vector<double> counts;  // per-sample normalized to unit maximum
  Scene scene;
  double raw_peak = 0.0;  // maximum raw count before normalization
};

/// Depth and lifetime drawn independently and uniformly over their ranges.
inline Scene sample_scene(const SimConfig& cfg, Rng& rng) {
  Scene s;
  s.depth_cm = cfg.depth_cm.min + cfg.depth_cm.width() * uniform01(rng);
  s.lifetime_ns = cfg.lifetime_ns.min + cfg.lifetime_ns.width() * uniform01(rng);
  return s;
}

/// Unscaled exGaussian density shape at time t.
inline double exgaussian(double t, double t0, double sigma, double tau) {
  const double z = (t - t0) / sigma - sigma / tau;
  const double cdf = 0.5 * std::erfc(-z / std::numbers::sqrt2);
  if (cdf == 0.0) return 0.0;
  return std::exp(sigma * sigma / (2.0 * tau * tau) - (t - t0) / tau + std::log(cdf));
}

/// Expected counts per bin (noise free, background included).
inline std::vector<double> synthesize_clean(const Scene& scene, const SimConfig& cfg) {
  if (!(scene.lifetime_ns > 0.0)) throw DomainError("lifetime must be positive");
  const double sigma = cfg.sigma_ns(scene.depth_cm);
  if (!(sigma > 0.0)) throw DomainError("arrival-time spread must be positive");
  const double t0 = cfg.delay_ns(scene.depth_cm);
  std::vector<double> shape(cfg.n_bins);
  double peak = 0.0;
  for (std::size_t i = 0; i < cfg.n_bins; ++i) {
    shape[i] = exgaussian(cfg.bin_center_ns(i), t0, sigma, scene.lifetime_ns);
    peak = std::max(peak, shape[i]);
  }
  const double target_peak =
      cfg.peak_counts * std::exp(-cfg.attenuation_per_cm * 2.0 * (scene.depth_cm - cfg.depth_cm.min));
  const double amplitude = peak > 0.0 ? target_peak / peak : 0.0;
  for (auto& v : shape) v = amplitude * v + cfg.background;
  return shape;
}

/// One Poisson draw per bin around the expected counts.
inline std::vector<double> add_noise(const std::vector<double>& curve, Rng& rng) {
  std::vector<double> out(curve.size());
  for (std::size_t i = 0; i < curve.size(); ++i) {
    if (!(curve[i] >= 0.0)) throw DomainError("Poisson mean must be non-negative");
    if (curve[i] == 0.0) {
      out[i] = 0.0;
      continue;
    }
    std::poisson_distribution<long long> pois(curve[i]);
    out[i] = static_cast<double>(pois(rng));
  }
  return out;
}

/// Sample i uses its own stream seeded with seed + i, so any subset of the
/// dataset can be regenerated independently of order.
inline Signal generate_sample(const SimConfig& cfg, std::size_t index) {
  Rng rng(cfg.seed + index);
  Signal sig;
  sig.scene = sample_scene(cfg, rng);
  const auto clean = synthesize_clean(sig.scene, cfg);
  sig.counts = cfg.poisson_noise ? add_noise(clean, rng) : clean;
  sig.raw_peak = *std::max_element(sig.counts.begin(), sig.counts.end());
  if (sig.raw_peak > 0.0)
    for (auto& v : sig.counts) v /= sig.raw_peak;
  return sig;
}

inline std::vector<Signal> generate_dataset(const SimConfig& cfg, std::size_t n_samples) {
  cfg.validate();
  if (n_samples == 0) throw ConfigError("dataset needs at least one sample");
  std::vector<Signal> out;
  out.reserve(n_samples);
  for (std::size_t i = 0; i < n_samples; ++i) out.push_back(generate_sample(cfg, i));
  return out;
}

/// Affine map of each physical target range onto [-0.9, 0.9], inside the
/// open image of the tanh output.
struct TargetCodec {
  static constexpr double kLimit = 0.9;
  Range depth_cm{0.5, 2.0};
  Range lifetime_ns{0.2, 1.5};

  TargetCodec() = default;
  TargetCodec(Range depth, Range lifetime) : depth_cm(depth), lifetime_ns(lifetime) {
    if (!(depth_cm.width() > 0.0) || !(lifetime_ns.width() > 0.0)) {
      throw ConfigError("target ranges must have min < max");
    }
  }
  static TargetCodec from(const SimConfig& cfg) { return {cfg.depth_cm, cfg.lifetime_ns}; }

  const Range& range(std::size_t dim) const { return dim == 0 ? depth_cm : lifetime_ns; }

  /// dim 0 = depth, dim 1 = lifetime.
  double encode(double value, std::size_t dim) const {
    const Range& r = range(dim);
    const double slack = 1e-6 * r.width();
    if (!(value >= r.min - slack && value <= r.max + slack)) {
      throw DomainError("target " + std::to_string(value) + " outside [" + std::to_string(r.min) + ", " +
                        std::to_string(r.max) + "]");
    }
    const double v = std::clamp(value, r.min, r.max);
    return -kLimit + 2.0 * kLimit * (v - r.min) / r.width();
  }
  double decode(double code, std::size_t dim) const {
    const Range& r = range(dim);
    return r.min + (code + kLimit) * r.width() / (2.0 * kLimit);
  }
  std::array<double, 2> encode(const Scene& s) const { return {encode(s.depth_cm, 0), encode(s.lifetime_ns, 1)}; }
  Scene decode(const std::array<double, 2>& c) const { return {decode(c[0], 0), decode(c[1], 1)}; }
};

}  // namespace emoe
