#pragma once
// On-disk dataset container: manifest.json + signals.f32 + targets.f32.

#include <bit>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "emoe/error.hpp"
#include "emoe/sim.hpp"

namespace emoe {

namespace fs = std::filesystem;
using json = nlohmann::json;

/// Flat dataset in memory. Signals row-major [n, L], targets [n, 2] in
/// physical units (depth cm, lifetime ns).
struct Dataset {
  SimConfig sim;
  std::size_t n_samples = 0;
  std::size_t n_bins = 0;
  std::vector<double> signals;
  std::vector<double> targets;
  std::vector<double> raw_peaks;  // empty when loaded from disk
  std::string created;

  const double* signal(std::size_t i) const { return signals.data() + i * n_bins; }
  Scene scene(std::size_t i) const { return {targets[2 * i], targets[2 * i + 1]}; }
};

inline Dataset to_dataset(const SimConfig& cfg, const std::vector<Signal>& samples) {
  Dataset d;
  d.sim = cfg;
  d.n_samples = samples.size();
  d.n_bins = cfg.n_bins;
  d.signals.reserve(d.n_samples * d.n_bins);
  for (const auto& s : samples) {
    if (s.counts.size() != d.n_bins) throw ShapeError("signal length differs from n_bins");
    d.signals.insert(d.signals.end(), s.counts.begin(), s.counts.end());
    d.targets.push_back(s.scene.depth_cm);
    d.targets.push_back(s.scene.lifetime_ns);
    d.raw_peaks.push_back(s.raw_peak);
  }
  return d;
}

/// ISO-8601 UTC; SOURCE_DATE_EPOCH pins it for reproducible output.
inline std::string creation_timestamp() {
  std::time_t t = std::time(nullptr);
  if (const char* env = std::getenv("SOURCE_DATE_EPOCH"); env && *env) {
    t = static_cast<std::time_t>(std::strtoll(env, nullptr, 10));
  }
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline json sim_to_json(const SimConfig& c) {
  return json{{"n_bins", c.n_bins},
              {"bin_width_ns", c.bin_width_ns},
              {"depth_range_cm", {c.depth_cm.min, c.depth_cm.max}},
              {"lifetime_range_ns", {c.lifetime_ns.min, c.lifetime_ns.max}},
              {"refractive_index", c.refractive_index},
              {"light_speed_cm_per_ns", c.light_speed_cm_per_ns},
              {"irf_fwhm_ns", c.irf_fwhm_ns},
              {"scatter_base_ns", c.scatter_base_ns},
              {"scatter_slope_ns_per_cm", c.scatter_slope_ns_per_cm},
              {"attenuation_per_cm", c.attenuation_per_cm},
              {"peak_counts", c.peak_counts},
              {"background", c.background},
              {"poisson_noise", c.poisson_noise},
              {"seed", c.seed}};
}

/// Strict: unknown keys are rejected, missing keys keep defaults.
inline SimConfig sim_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("sim config must be a JSON object");
  SimConfig c;
  auto range = [](const json& v, const std::string& key) {
    if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number())
      throw ConfigError(key + " must be a [min, max] pair");
    return Range{v[0].get<double>(), v[1].get<double>()};
  };
  auto count = [](const json& v, const std::string& key) {
    if (!v.is_number_integer() || v.get<long long>() < 0) throw ConfigError(key + " must be a non-negative integer");
    return v.get<std::uint64_t>();
  };
  auto num = [](const json& v, const std::string& key) {
    if (!v.is_number()) throw ConfigError(key + " must be a number");
    return v.get<double>();
  };
  for (const auto& [key, v] : j.items()) {
    if (key == "n_bins") c.n_bins = count(v, key);
    else if (key == "bin_width_ns") c.bin_width_ns = num(v, key);
    else if (key == "depth_range_cm") c.depth_cm = range(v, key);
    else if (key == "lifetime_range_ns") c.lifetime_ns = range(v, key);
    else if (key == "refractive_index") c.refractive_index = num(v, key);
    else if (key == "light_speed_cm_per_ns") c.light_speed_cm_per_ns = num(v, key);
    else if (key == "irf_fwhm_ns") c.irf_fwhm_ns = num(v, key);
    else if (key == "scatter_base_ns") c.scatter_base_ns = num(v, key);
    else if (key == "scatter_slope_ns_per_cm") c.scatter_slope_ns_per_cm = num(v, key);
    else if (key == "attenuation_per_cm") c.attenuation_per_cm = num(v, key);
    else if (key == "peak_counts") c.peak_counts = num(v, key);
    else if (key == "background") c.background = num(v, key);
    else if (key == "poisson_noise") {
      if (!v.is_boolean()) throw ConfigError("poisson_noise must be a boolean");
      c.poisson_noise = v.get<bool>();
    } else if (key == "seed") c.seed = count(v, key);
    else throw ConfigError("unknown sim config key: " + key);
  }
  c.validate();
  return c;
}

namespace detail {

inline std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) return __builtin_bswap32(v);
  return v;
}

inline void write_f32(const fs::path& path, const std::vector<double>& values) {
  std::vector<std::uint32_t> words(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    words[i] = to_le(std::bit_cast<std::uint32_t>(static_cast<float>(values[i])));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(words.data()), static_cast<std::streamsize>(words.size() * 4));
  if (!out) throw IoError("write failed: " + path.string());
}

inline std::vector<double> read_f32(const fs::path& path, std::size_t expected) {
  std::error_code ec;
  const auto bytes = fs::file_size(path, ec);
  if (ec) throw IoError("cannot stat " + path.string());
  if (bytes != expected * 4) {
    throw IoError(path.filename().string() + " holds " + std::to_string(bytes) + " bytes, manifest implies " +
                  std::to_string(expected * 4));
  }
  std::vector<std::uint32_t> words(expected);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  in.read(reinterpret_cast<char*>(words.data()), static_cast<std::streamsize>(expected * 4));
  if (!in) throw IoError("read failed: " + path.string());
  std::vector<double> out(expected);
  for (std::size_t i = 0; i < expected; ++i) out[i] = std::bit_cast<float>(to_le(words[i]));
  return out;
}

}  // namespace detail

inline void save_dataset(const Dataset& d, const fs::path& dir) {
  if (d.signals.size() != d.n_samples * d.n_bins || d.targets.size() != d.n_samples * 2) {
    throw ShapeError("dataset buffers disagree with n_samples/n_bins");
  }
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  json m{{"version", 1},
         {"n_samples", d.n_samples},
         {"n_bins", d.n_bins},
         {"bin_width_ns", d.sim.bin_width_ns},
         {"depth_range_cm", {d.sim.depth_cm.min, d.sim.depth_cm.max}},
         {"lifetime_range_ns", {d.sim.lifetime_ns.min, d.sim.lifetime_ns.max}},
         {"seed", d.sim.seed},
         {"sim", sim_to_json(d.sim)},
         {"created", d.created.empty() ? creation_timestamp() : d.created}};
  {
    std::ofstream out(dir / "manifest.json", std::ios::trunc);
    if (!out) throw IoError("cannot write manifest in " + dir.string());
    out << m.dump(2) << "\n";
  }
  detail::write_f32(dir / "signals.f32", d.signals);
  detail::write_f32(dir / "targets.f32", d.targets);
}

inline Dataset load_dataset(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("missing manifest.json in " + dir.string());
  json m;
  try {
    m = json::parse(in);
  } catch (const json::exception& e) {
    throw IoError(std::string("malformed manifest.json: ") + e.what());
  }
  Dataset d;
  try {
    if (m.at("version").get<int>() != 1) throw IoError("unsupported dataset version");
    d.n_samples = m.at("n_samples").get<std::size_t>();
    d.n_bins = m.at("n_bins").get<std::size_t>();
    d.sim = m.contains("sim") ? sim_from_json(m.at("sim")) : SimConfig{};
    d.created = m.value("created", std::string{});
  } catch (const json::exception& e) {
    throw IoError(std::string("incomplete manifest.json: ") + e.what());
  } catch (const ConfigError& e) {
    throw IoError(std::string("invalid sim block in manifest.json: ") + e.what());
  }
  if (d.sim.n_bins != d.n_bins) throw IoError("manifest n_bins disagrees with sim block");
  if (d.n_samples == 0) throw IoError("dataset is empty");
  d.signals = detail::read_f32(dir / "signals.f32", d.n_samples * d.n_bins);
  d.targets = detail::read_f32(dir / "targets.f32", d.n_samples * 2);
  return d;
}

}  // namespace emoe
