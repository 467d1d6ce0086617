#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>

#include "emoe/dataset_io.hpp"
#include "emoe/sim.hpp"

using namespace emoe;
namespace fs = std::filesystem;

namespace {

SimConfig clean_config() {
  SimConfig c;
  c.poisson_noise = false;
  return c;
}

std::size_t argmax(const std::vector<double>& v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("emoe_test_sim_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST(SimConfig, Validation) {
  SimConfig c;
  EXPECT_NO_THROW(c.validate());
  c.n_bins = 7;
  EXPECT_THROW(c.validate(), ConfigError);
  c = SimConfig{};
  c.bin_width_ns = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = SimConfig{};
  c.depth_cm = {2.0, 1.0};
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(SampleScene, DegenerateRange) {
  SimConfig c;
  c.depth_cm = {1.0, 1.0};
  c.lifetime_ns = {1.0, 1.0};
  Rng rng(1);
  const Scene s = sample_scene(c, rng);
  EXPECT_EQ(s.depth_cm, 1.0);
  EXPECT_EQ(s.lifetime_ns, 1.0);
}

TEST(SampleScene, UniformMean) {
  SimConfig c;
  Rng rng(2);
  double sum_d = 0.0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const Scene s = sample_scene(c, rng);
    ASSERT_TRUE(c.depth_cm.contains(s.depth_cm));
    ASSERT_TRUE(c.lifetime_ns.contains(s.lifetime_ns));
    sum_d += s.depth_cm;
  }
  EXPECT_NEAR(sum_d / n, c.depth_cm.mid(), 3.0 * c.depth_cm.width() / std::sqrt(12.0 * n));
}

TEST(SampleScene, Deterministic) {
  SimConfig c;
  Rng a(3), b(3);
  for (int i = 0; i < 20; ++i) {
    const Scene x = sample_scene(c, a), y = sample_scene(c, b);
    EXPECT_EQ(x.depth_cm, y.depth_cm);
    EXPECT_EQ(x.lifetime_ns, y.lifetime_ns);
  }
}

TEST(Synthesize, RoundTripDelay) {
  SimConfig c;
  EXPECT_NEAR(c.delay_ns(1.0), 0.0934, 5e-5);
  EXPECT_NEAR(c.delay_ns(1.0), 2.0 * 1.4 / 29.9792, 1e-15);
}

TEST(Synthesize, TailLogSlope) {
  SimConfig c = clean_config();
  c.background = 0.0;
  const auto curve = synthesize_clean({1.0, 1.0}, c);
  // Least-squares line through log counts over the last 64 bins.
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const std::size_t first = c.n_bins - 64;
  for (std::size_t i = first; i < c.n_bins; ++i) {
    const double x = c.bin_center_ns(i), y = std::log(curve[i]);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double n = 64.0;
  const double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  EXPECT_NEAR(slope, -1.0, 0.01);
}

TEST(Synthesize, PeakMatchesAttenuatedTarget) {
  SimConfig c = clean_config();
  c.background = 0.0;
  const auto curve = synthesize_clean({1.5, 0.7}, c);
  EXPECT_NEAR(*std::max_element(curve.begin(), curve.end()), 2000.0 * std::exp(-0.8 * 2.0 * 1.0), 1e-9);
}

TEST(Synthesize, BackgroundOnly) {
  SimConfig c = clean_config();
  c.peak_counts = 0.0;
  for (double v : synthesize_clean({1.2, 0.5}, c)) EXPECT_EQ(v, c.background);
}

TEST(Synthesize, Errors) {
  SimConfig c = clean_config();
  EXPECT_THROW(synthesize_clean({1.0, 0.0}, c), DomainError);
  EXPECT_THROW(synthesize_clean({1.0, -1.0}, c), DomainError);
}

TEST(Synthesize, DepthMovesPeakLater) {
  SimConfig c = clean_config();
  std::size_t last = 0;
  double last_delay = -1.0;
  for (double d = 0.5; d <= 2.0 + 1e-12; d += 0.05) {
    const std::size_t peak = argmax(synthesize_clean({d, 0.8}, c));
    EXPECT_GE(peak, last) << "depth " << d;
    EXPECT_GT(c.delay_ns(d), last_delay);
    last = peak;
    last_delay = c.delay_ns(d);
  }
}

TEST(Synthesize, LifetimeGrowsLateFraction) {
  // A flat background would dominate the late window, so it is off here.
  SimConfig c = clean_config();
  c.background = 0.0;
  auto late_fraction = [&](double tau) {
    const auto v = synthesize_clean({1.0, tau}, c);
    const double total = std::accumulate(v.begin(), v.end(), 0.0);
    const double late = std::accumulate(v.begin() + static_cast<long>(c.n_bins / 2), v.end(), 0.0);
    return late / total;
  };
  double prev = 0.0;
  for (double tau = 0.2; tau <= 1.5 + 1e-12; tau += 0.1) {
    const double f = late_fraction(tau);
    EXPECT_GT(f, prev) << "tau " << tau;
    prev = f;
  }
}

TEST(Noise, ZeroMeanGivesZero) {
  Rng rng(4);
  const auto out = add_noise(std::vector<double>(100, 0.0), rng);
  for (double v : out) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(add_noise({1.0, -0.5}, rng), DomainError);
}

TEST(Noise, PoissonMeanAndDispersion) {
  Rng rng(5);
  const int n = 10000;
  const auto a = add_noise(std::vector<double>(n, 100.0), rng);
  const double mean_a = std::accumulate(a.begin(), a.end(), 0.0) / n;
  EXPECT_NEAR(mean_a, 100.0, 3.0 * std::sqrt(100.0 / n));

  const auto b = add_noise(std::vector<double>(n, 50.0), rng);
  const double mean_b = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double var = 0.0;
  for (double v : b) var += (v - mean_b) * (v - mean_b);
  var /= (n - 1);
  EXPECT_NEAR(var / mean_b, 1.0, 0.05);
}

TEST(Dataset, DeterministicAndNormalised) {
  SimConfig c;
  const auto a = generate_dataset(c, 16);
  const auto b = generate_dataset(c, 16);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].counts, b[i].counts);
    EXPECT_EQ(*std::max_element(a[i].counts.begin(), a[i].counts.end()), 1.0);
    for (double v : a[i].counts) EXPECT_GE(v, 0.0);
    EXPECT_GT(a[i].raw_peak, 0.0);
    EXPECT_EQ(a[i].counts.size(), c.n_bins);
  }
  EXPECT_THROW(generate_dataset(c, 0), ConfigError);
}

TEST(Dataset, PerSampleSeedingIsOrderFree) {
  SimConfig c;
  const auto all = generate_dataset(c, 10);
  const Signal s7 = generate_sample(c, 7);
  const Signal s2 = generate_sample(c, 2);
  EXPECT_EQ(s7.counts, all[7].counts);
  EXPECT_EQ(s2.counts, all[2].counts);
  EXPECT_EQ(s7.scene.depth_cm, all[7].scene.depth_cm);
}

TEST(Dataset, DeeperSceneSameStreamPeaksLater) {
  SimConfig c = clean_config();
  for (double tau : {0.3, 0.9, 1.4}) {
    for (double d = 0.5; d < 1.95; d += 0.25) {
      EXPECT_LE(argmax(synthesize_clean({d, tau}, c)), argmax(synthesize_clean({d + 0.05, tau}, c)));
    }
  }
}

TEST(Codec, Endpoints) {
  const TargetCodec codec;
  EXPECT_NEAR(codec.encode(1.25, 0), 0.0, 1e-15);
  EXPECT_NEAR(codec.encode(0.85, 1), 0.0, 1e-15);
  EXPECT_DOUBLE_EQ(codec.encode(0.5, 0), -0.9);
  EXPECT_DOUBLE_EQ(codec.encode(1.5, 1), 0.9);
  EXPECT_THROW(codec.encode(2.5, 0), DomainError);
  EXPECT_THROW(codec.encode(0.1, 1), DomainError);
  EXPECT_THROW(TargetCodec({1.0, 1.0}, {0.2, 1.5}), ConfigError);
}

TEST(Codec, RoundTrip) {
  const TargetCodec codec;
  Rng rng(6);
  for (int i = 0; i < 100; ++i) {
    const double code = -0.9 + 1.8 * uniform01(rng);
    for (std::size_t dim : {0u, 1u}) EXPECT_NEAR(codec.encode(codec.decode(code, dim), dim), code, 1e-12);
  }
}

TEST(DatasetIo, RoundTripAndByteIdentical) {
  ::setenv("SOURCE_DATE_EPOCH", "1700000000", 1);
  SimConfig c;
  c.n_bins = 32;
  const Dataset d = to_dataset(c, generate_dataset(c, 5));
  const fs::path a = scratch_dir("a"), b = scratch_dir("b");
  save_dataset(d, a);
  save_dataset(d, b);
  for (const char* f : {"manifest.json", "signals.f32", "targets.f32"}) EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  EXPECT_EQ(fs::file_size(a / "signals.f32"), 5u * 32u * 4u);
  EXPECT_EQ(fs::file_size(a / "targets.f32"), 5u * 2u * 4u);

  const Dataset r = load_dataset(a);
  EXPECT_EQ(r.n_samples, 5u);
  EXPECT_EQ(r.n_bins, 32u);
  EXPECT_EQ(r.created, "2023-11-14T22:13:20Z");
  for (std::size_t i = 0; i < d.signals.size(); ++i) EXPECT_EQ(r.signals[i], static_cast<float>(d.signals[i]));
  for (std::size_t i = 0; i < d.targets.size(); ++i) EXPECT_EQ(r.targets[i], static_cast<float>(d.targets[i]));

  const auto m = nlohmann::json::parse(slurp(a / "manifest.json"));
  EXPECT_EQ(m["version"], 1);
  EXPECT_EQ(m["depth_range_cm"][1], 2.0);
  EXPECT_EQ(m["sim"]["peak_counts"], 2000.0);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(DatasetIo, RejectsLengthMismatch) {
  SimConfig c;
  c.n_bins = 16;
  const fs::path dir = scratch_dir("short");
  save_dataset(to_dataset(c, generate_dataset(c, 3)), dir);
  fs::resize_file(dir / "signals.f32", 3 * 16 * 4 - 4);
  EXPECT_THROW(load_dataset(dir), IoError);
  save_dataset(to_dataset(c, generate_dataset(c, 3)), dir);
  fs::resize_file(dir / "targets.f32", 3 * 2 * 4 + 4);
  EXPECT_THROW(load_dataset(dir), IoError);
  fs::remove(dir / "manifest.json");
  EXPECT_THROW(load_dataset(dir), IoError);
  fs::remove_all(dir);
}

TEST(SimJson, StrictKeys) {
  EXPECT_THROW(sim_from_json(nlohmann::json{{"bogus", 1}}), ConfigError);
  EXPECT_THROW(sim_from_json(nlohmann::json{{"n_bins", -4}}), ConfigError);
  const SimConfig c = sim_from_json(nlohmann::json{{"n_bins", 64}, {"depth_range_cm", {1.0, 3.0}}});
  EXPECT_EQ(c.n_bins, 64u);
  EXPECT_EQ(c.depth_cm.max, 3.0);
  const SimConfig back = sim_from_json(sim_to_json(c));
  EXPECT_EQ(back.depth_cm.min, 1.0);
  EXPECT_EQ(back.seed, c.seed);
}
