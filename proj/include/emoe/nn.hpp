#pragma once
// Parameter storage and the reusable layers the expert, critic and decider
// networks are assembled from. Sequence activations are [B, L, H] (a bare
// [L, H] is accepted wherever the batch axis is optional).

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "emoe/ops.hpp"

namespace emoe {

using Rng = std::mt19937_64;

/// Uniform double in [0, 1) from the top 53 bits of one draw.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

/// Parameter groups trained by separate phases: experts (E), critics (C),
/// and the decider head (F).
enum class ParamGroup : std::uint8_t { expert = 0, critic = 1, decider = 2 };

inline const char* group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::expert: return "expert";
    case ParamGroup::critic: return "critic";
    case ParamGroup::decider: return "decider";
  }
  return "?";
}

struct GroupMask {
  bool expert = true, critic = true, decider = true;
  bool operator()(ParamGroup g) const {
    return g == ParamGroup::expert ? expert : g == ParamGroup::critic ? critic : decider;
  }
  static GroupMask all() { return {}; }
  static GroupMask none() { return {false, false, false}; }
  static GroupMask only(ParamGroup g) {
    GroupMask m = none();
    (g == ParamGroup::expert ? m.expert : g == ParamGroup::critic ? m.critic : m.decider) = true;
    return m;
  }
};

struct Param {
  std::string name;
  ParamGroup group;
  Tensor value;
};

/// Named model parameters. Names are unique and insertion order is stable,
/// which fixes the checkpoint layout.
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed = 0) : rng_(seed) {}

  std::size_t add(std::string name, ParamGroup group, Tensor init) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
    index_.emplace(name, params_.size());
    params_.push_back(Param{std::move(name), group, std::move(init)});
    return params_.size() - 1;
  }

  /// Glorot-uniform weights in +-sqrt(6 / (fan_in + fan_out)).
  std::size_t add_glorot(std::string name, ParamGroup group, Shape shape, std::size_t fan_in, std::size_t fan_out) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = (2.0 * uniform01(rng_) - 1.0) * limit;
    return add(std::move(name), group, Tensor(std::move(shape), std::move(v)));
  }

  std::size_t index(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw ConfigError("unknown parameter: " + std::string(name));
    return it->second;
  }
  bool contains(std::string_view name) const { return index_.count(std::string(name)) != 0; }

  std::size_t size() const noexcept { return params_.size(); }
  const Param& operator[](std::size_t i) const { return params_.at(i); }
  Param& operator[](std::size_t i) { return params_.at(i); }
  const std::vector<Param>& params() const noexcept { return params_; }

  std::size_t count(ParamGroup g) const {
    std::size_t n = 0;
    for (const auto& p : params_)
      if (p.group == g) n += p.value.size();
    return n;
  }

 private:
  std::vector<Param> params_;
  std::unordered_map<std::string, std::size_t> index_;
  Rng rng_;
};

/// Parameters placed on a tape for one forward pass. Groups outside
/// `trainable` become constants, so backward never reaches them.
class Bound {
 public:
  Bound(Tape& tape, const ParamStore& store, GroupMask trainable = GroupMask::all()) : tape_(&tape) {
    vars_.reserve(store.size());
    for (const auto& p : store.params()) {
      vars_.push_back(trainable(p.group) ? tape.leaf(p.value) : tape.constant(p.value));
    }
  }
  /// Wraps externally created handles, one per store parameter in order.
  Bound(Tape& tape, std::vector<Var> vars) : tape_(&tape), vars_(std::move(vars)) {}
  const Var& operator[](std::size_t i) const { return vars_.at(i); }
  const std::vector<Var>& vars() const noexcept { return vars_; }
  Tape& tape() const { return *tape_; }

 private:
  Tape* tape_;
  std::vector<Var> vars_;
};

// ---------------------------------------------------------------------------

struct Dense {
  std::size_t w = 0, b = 0, in = 0, out = 0;

  static Dense create(ParamStore& ps, const std::string& name, std::size_t in, std::size_t out, ParamGroup g,
                      bool zero_weights = false) {
    Dense d;
    d.in = in;
    d.out = out;
    d.w = zero_weights ? ps.add(name + ".weight", g, Tensor::zeros({in, out}))
                       : ps.add_glorot(name + ".weight", g, {in, out}, in, out);
    d.b = ps.add(name + ".bias", g, Tensor::zeros({out}));
    return d;
  }
  Var operator()(const Bound& p, const Var& x) const { return linear(x, p[w], p[b]); }
};

struct LayerNorm {
  std::size_t gain = 0, shift = 0;

  static LayerNorm create(ParamStore& ps, const std::string& name, std::size_t dim, ParamGroup g) {
    return {ps.add(name + ".gain", g, Tensor::filled({dim}, 1.0)), ps.add(name + ".shift", g, Tensor::zeros({dim}))};
  }
  Var operator()(const Bound& p, const Var& x) const { return layer_norm(x, p[gain], p[shift]); }
};

/// LayerNorm(GELU(conv1d(x)) + x) with a same-padded kernel.
struct ResidualConvBlock {
  std::size_t kernel = 0, bias = 0, channels = 0, width = 0;
  LayerNorm norm;
  bool exact_gelu = false;

  static ResidualConvBlock create(ParamStore& ps, const std::string& name, std::size_t channels, std::size_t width,
                                  ParamGroup g, bool exact_gelu = false) {
    if (width % 2 == 0) throw ConfigError("conv kernel width must be odd, got " + std::to_string(width));
    ResidualConvBlock blk;
    blk.channels = channels;
    blk.width = width;
    blk.exact_gelu = exact_gelu;
    blk.kernel = ps.add_glorot(name + ".kernel", g, {channels, channels, width}, channels * width, channels * width);
    blk.bias = ps.add(name + ".bias", g, Tensor::zeros({channels}));
    blk.norm = LayerNorm::create(ps, name + ".norm", channels, g);
    return blk;
  }

  Var operator()(const Bound& p, const Var& x) const {
    if (x.shape().empty() || x.shape().back() != channels) {
      throw ShapeError("residual conv block expects " + std::to_string(channels) + " channels, got " +
                       to_string(x.shape()));
    }
    return norm(p, gelu(conv1d(x, p[kernel], p[bias]), exact_gelu) + x);
  }
};

/// entry(t, 2i) = sin(t / 10000^(2i/H)), entry(t, 2i+1) = cos(same angle).
inline Tensor sinusoidal_positions(std::size_t length, std::size_t dim) {
  if (dim % 2 != 0) throw ShapeError("positional encoding needs an even dimension, got " + std::to_string(dim));
  std::vector<double> v(length * dim);
  for (std::size_t t = 0; t < length; ++t)
    for (std::size_t i = 0; i < dim / 2; ++i) {
      const double angle = static_cast<double>(t) / std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(dim));
      v[t * dim + 2 * i] = std::sin(angle);
      v[t * dim + 2 * i + 1] = std::cos(angle);
    }
  return Tensor({length, dim}, std::move(v));
}

/// Pre-norm encoder layer: h + MHA(LN(h)), then h + FFN(LN(h)).
struct EncoderLayer {
  LayerNorm ln_attn, ln_ff;
  Dense q, k, v, o, ff_in, ff_out;
  std::size_t heads = 1;
  bool exact_gelu = false;

  static EncoderLayer create(ParamStore& ps, const std::string& name, std::size_t dim, std::size_t heads,
                             std::size_t ff_dim, ParamGroup g, bool exact_gelu = false) {
    if (heads == 0 || dim % heads != 0) {
      throw ShapeError("hidden size " + std::to_string(dim) + " not divisible by " + std::to_string(heads) + " heads");
    }
    EncoderLayer l;
    l.heads = heads;
    l.exact_gelu = exact_gelu;
    l.ln_attn = LayerNorm::create(ps, name + ".ln_attn", dim, g);
    l.q = Dense::create(ps, name + ".q", dim, dim, g);
    l.k = Dense::create(ps, name + ".k", dim, dim, g);
    l.v = Dense::create(ps, name + ".v", dim, dim, g);
    l.o = Dense::create(ps, name + ".o", dim, dim, g);
    l.ln_ff = LayerNorm::create(ps, name + ".ln_ff", dim, g);
    l.ff_in = Dense::create(ps, name + ".ff_in", dim, ff_dim, g);
    l.ff_out = Dense::create(ps, name + ".ff_out", ff_dim, dim, g);
    return l;
  }

  Var operator()(const Bound& p, const Var& h, Tensor* attn = nullptr) const {
    const Var n1 = ln_attn(p, h);
    const Var a = attention(q(p, n1), k(p, n1), v(p, n1), heads, attn);
    const Var h1 = h + o(p, a);
    return h1 + ff_out(p, gelu(ff_in(p, ln_ff(p, h1)), exact_gelu));
  }
};

struct TransformerEncoder {
  std::vector<EncoderLayer> layers;
  LayerNorm final_norm;

  static TransformerEncoder create(ParamStore& ps, const std::string& name, std::size_t dim, std::size_t n_layers,
                                   std::size_t heads, std::size_t ff_dim, ParamGroup g, bool exact_gelu = false) {
    TransformerEncoder enc;
    for (std::size_t i = 0; i < n_layers; ++i) {
      enc.layers.push_back(
          EncoderLayer::create(ps, name + ".layer" + std::to_string(i), dim, heads, ff_dim, g, exact_gelu));
    }
    enc.final_norm = LayerNorm::create(ps, name + ".final_norm", dim, g);
    return enc;
  }

  /// `attn`, when given, collects one [B, heads, L, L] tensor per layer.
  Var operator()(const Bound& p, Var h, std::vector<Tensor>* attn = nullptr) const {
    for (const auto& layer : layers) {
      Tensor w;
      h = layer(p, h, attn ? &w : nullptr);
      if (attn) attn->push_back(std::move(w));
    }
    return final_norm(p, h);
  }
};

struct PoolResult {
  Var features;  // [B, H] (or [H])
  Var weights;   // [B, L] (or [L])
};

/// scores_t = v . tanh(W h_t + b); weights = softmax(scores); phi = sum_t w_t h_t.
struct AttentionPool {
  Dense proj;
  std::size_t score = 0;

  static AttentionPool create(ParamStore& ps, const std::string& name, std::size_t dim, ParamGroup g) {
    AttentionPool ap;
    ap.proj = Dense::create(ps, name + ".proj", dim, dim, g);
    ap.score = ps.add_glorot(name + ".score", g, {dim, 1}, dim, 1);
    return ap;
  }

  PoolResult operator()(const Bound& p, const Var& h) const {
    const Shape& s = h.shape();
    if (s.size() != 2 && s.size() != 3) throw ShapeError("attention pool expects [B, L, H] or [L, H]");
    const std::size_t len = s[s.size() - 2], dim = s.back();
    const std::size_t batch = s.size() == 3 ? s[0] : 1;
    const Var scores = matmul(tanh(proj(p, h)), p[score]);  // [..., L, 1]
    const Var w = softmax(reshape(scores, {batch, 1, len}), 2);
    Var phi = matmul(w, s.size() == 3 ? h : reshape(h, {1, len, dim}));  // [B, 1, H]
    if (s.size() == 3) return {reshape(phi, {batch, dim}), reshape(w, {batch, len})};
    return {reshape(phi, {dim}), reshape(w, {len})};
  }
};

/// Arithmetic mean over the time axis.
inline Var mean_pool(const Var& h) {
  const Shape& s = h.shape();
  if (s.size() < 2) throw ShapeError("mean pool expects [..., L, H], got " + to_string(s));
  if (s[s.size() - 2] == 0) throw ShapeError("mean pool over an empty sequence");
  return mean_axis(h, s.size() - 2);
}

enum class Activation { relu, gelu, tanh };

/// Affine -> activation chain; the last layer has no activation.
struct Mlp {
  std::vector<Dense> layers;
  Activation act = Activation::relu;

  static Mlp create(ParamStore& ps, const std::string& name, const std::vector<std::size_t>& sizes, ParamGroup g,
                    Activation act = Activation::relu) {
    if (sizes.size() < 2) throw ConfigError("mlp needs at least input and output sizes");
    Mlp m;
    m.act = act;
    for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
      m.layers.push_back(Dense::create(ps, name + ".fc" + std::to_string(i), sizes[i], sizes[i + 1], g));
    }
    return m;
  }

  Var operator()(const Bound& p, Var x) const {
    if (x.shape().empty() || x.shape().back() != layers.front().in) {
      throw ShapeError("mlp expects input width " + std::to_string(layers.front().in) + ", got " + to_string(x.shape()));
    }
    for (std::size_t i = 0; i < layers.size(); ++i) {
      x = layers[i](p, x);
      if (i + 1 == layers.size()) break;
      switch (act) {
        case Activation::relu: x = relu(x); break;
        case Activation::gelu: x = gelu(x); break;
        case Activation::tanh: x = tanh(x); break;
      }
    }
    return x;
  }
};

/// Inverted-dropout mask: 0 with probability `rate`, else 1/(1-rate).
inline Tensor dropout_mask(const Shape& shape, double rate, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
  std::vector<double> m(numel(shape));
  const double keep = 1.0 / (1.0 - rate);
  for (auto& x : m) x = uniform01(rng) < rate ? 0.0 : keep;
  return Tensor(shape, std::move(m));
}

/// Identity in evaluation mode or at rate 0.
inline Var dropout(const Var& x, double rate, bool training, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
  if (!training || rate == 0.0) return x;
  return x * x.tape()->constant(dropout_mask(x.shape(), rate, rng));
}

}  // namespace emoe
