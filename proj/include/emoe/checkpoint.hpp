#pragma once
// Binary checkpoint: magic, version, JSON header (config, hash, phase, epoch),
// then every parameter as name, group, shape and little-endian f64 values.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <iterator>
#include <string>
#include <vector>

#include "emoe/config.hpp"
#include "emoe/model.hpp"

namespace emoe {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'E', 'M', 'O', 'E', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  RunConfig config;
  Model model;
  int phase = 0;
  std::size_t epoch = 0;
  double val_loss = 0.0;
};

namespace detail {

class ByteWriter {
 public:
  template <class T>
  void put(const T& v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    bytes.insert(bytes.end(), p, p + sizeof(T));
  }
  void put_bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    bytes.insert(bytes.end(), c, c + n);
  }
  void put_string(const std::string& s) {
    put<std::uint64_t>(s.size());
    put_bytes(s.data(), s.size());
  }
  std::vector<char> bytes;
};

class ByteReader {
 public:
  ByteReader(const std::vector<char>& b, std::string what) : b_(b), what_(std::move(what)) {}
  template <class T>
  T get() {
    T v;
    std::memcpy(&v, take(sizeof(T)), sizeof(T));
    return v;
  }
  std::string get_string() {
    const auto n = get<std::uint64_t>();
    if (n > b_.size()) fail();
    const char* p = take(n);
    return {p, p + n};
  }
  const char* take(std::size_t n) {
    if (n > b_.size() - pos_) fail();
    const char* p = b_.data() + pos_;
    pos_ += n;
    return p;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  [[noreturn]] void fail() const { throw IoError(what_ + ": truncated checkpoint"); }
  const std::vector<char>& b_;
  std::string what_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<char> checkpoint_bytes(const RunConfig& cfg, const ParamStore& ps, int phase, std::size_t epoch,
                                          double val_loss) {
  detail::ByteWriter w;
  w.put_bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  w.put(kCheckpointVersion);
  const json header{{"config", to_json(cfg)},
                    {"config_hash", config_hash(cfg)},
                    {"phase", phase},
                    {"epoch", epoch},
                    {"val_loss", val_loss}};
  w.put_string(header.dump());
  w.put<std::uint64_t>(ps.size());
  for (const auto& p : ps.params()) {
    w.put_string(p.name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(p.group));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(p.value.rank()));
    for (std::size_t d = 0; d < p.value.rank(); ++d) w.put<std::uint64_t>(p.value.dim(d));
    w.put_bytes(p.value.data(), p.value.size() * sizeof(double));
  }
  return w.bytes;
}

inline void save_checkpoint(const fs::path& path, const RunConfig& cfg, const ParamStore& ps, int phase,
                            std::size_t epoch, double val_loss = 0.0) {
  const std::vector<char> bytes = checkpoint_bytes(cfg, ps, phase, epoch, val_loss);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

inline void save_checkpoint(const fs::path& path, const Checkpoint& c) {
  save_checkpoint(path, c.config, c.model.params(), c.phase, c.epoch, c.val_loss);
}

/// `warn` receives a message when the stored config hash does not match the
/// stored config; the parameters are still loaded.
inline Checkpoint parse_checkpoint(const std::vector<char>& bytes, const std::string& what,
                                   const std::function<void(const std::string&)>& warn = {}) {
  detail::ByteReader r(bytes, what);
  if (std::memcmp(r.take(sizeof kCheckpointMagic), kCheckpointMagic, sizeof kCheckpointMagic) != 0)
    throw IoError(what + ": not a checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw IoError(what + ": unsupported checkpoint version " + std::to_string(version));
  json header;
  try {
    header = json::parse(r.get_string());
  } catch (const json::exception& e) {
    throw IoError(what + ": corrupt header: " + e.what());
  }
  Checkpoint c;
  try {
    c.config = run_config_from_json(header.at("config"));
    c.phase = header.at("phase").get<int>();
    c.epoch = header.at("epoch").get<std::size_t>();
    c.val_loss = header.at("val_loss").get<double>();
    const std::string stored = header.at("config_hash").get<std::string>();
    if (stored != config_hash(c.config) && warn) warn(what + ": config hash mismatch (stored " + stored + ")");
  } catch (const json::exception& e) {
    throw IoError(what + ": corrupt header: " + e.what());
  }
  Model model = Model::create(c.config.model, c.config.train.seed);
  ParamStore& ps = model.params();
  const auto n = r.get<std::uint64_t>();
  if (n != ps.size())
    throw IoError(what + ": holds " + std::to_string(n) + " parameters, config builds " + std::to_string(ps.size()));
  for (std::size_t i = 0; i < n; ++i) {
    const std::string name = r.get_string();
    const auto group = r.get<std::uint32_t>();
    const auto rank = r.get<std::uint32_t>();
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(r.get<std::uint64_t>());
    Param& p = ps[i];
    if (name != p.name || group != static_cast<std::uint32_t>(p.group) || shape != p.value.shape())
      throw IoError(what + ": parameter " + std::to_string(i) + " (" + name + ") does not match the model layout");
    std::vector<double> v(p.value.size());
    std::memcpy(v.data(), r.take(v.size() * sizeof(double)), v.size() * sizeof(double));
    p.value = Tensor(shape, std::move(v));
  }
  if (!r.done()) throw IoError(what + ": trailing bytes after parameters");
  c.model = std::move(model);
  return c;
}

inline Checkpoint load_checkpoint(const fs::path& path, const std::function<void(const std::string&)>& warn = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes, path.string(), warn);
}

}  // namespace emoe
