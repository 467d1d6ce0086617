#pragma once
// Experts, critics and decider assembled into one differentiable model.

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "emoe/nn.hpp"
#include "emoe/ops.hpp"

namespace emoe {

enum class ExpertKind : std::uint8_t { early = 0, late = 1, global = 2 };
inline constexpr std::array<ExpertKind, 3> kExpertKinds{ExpertKind::early, ExpertKind::late, ExpertKind::global};

inline const char* expert_name(ExpertKind k) {
  switch (k) {
    case ExpertKind::early: return "early";
    case ExpertKind::late: return "late";
    case ExpertKind::global: return "global";
  }
  return "?";
}

/// Early predicts depth, late predicts lifetime, global predicts both.
inline std::size_t expert_out_dim(ExpertKind k) { return k == ExpertKind::global ? 2 : 1; }

struct Segment {
  std::size_t begin = 0, end = 0;
  std::size_t length() const { return end - begin; }
};

/// Switches that remove or replace one component each.
struct Ablations {
  bool no_correction = false;        // corrected prediction = y_aux
  bool no_quality_gating = false;    // q_full left out of the gate input
  bool no_decider_features = false;  // phi_g left out of gate and fusion inputs
  bool no_decider_fusion = false;    // fixed averaging instead of the fusion layer
  bool no_gating_dropout = false;
  bool uniform_gating = false;       // w = 0.5 for every expert
  bool mean_pooling = false;
  bool heteroscedastic = false;      // single global expert with a Gaussian NLL head
  bool no_critics = false;           // critics removed entirely

  bool uses_quality_in_gate() const { return !no_quality_gating && !no_critics; }
  bool uses_correction() const { return !no_correction && !no_critics; }
};

struct ModelConfig {
  std::size_t n_bins = 256;
  std::size_t split = 0;  // 0 means n_bins / 2
  std::size_t hidden = 64;
  std::size_t conv_blocks = 2;
  std::size_t kernel = 7;
  std::size_t patch = 1;  // bins averaged into one encoder position
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t ff_mult = 4;
  std::size_t head_hidden = 32;
  std::vector<std::size_t> critic_hidden{32, 16};
  std::size_t gate_hidden = 32;
  double gate_dropout = 0.1;
  bool reindex_positions = true;  // each segment's positions start at 0
  bool exact_gelu = false;  // tanh approximation by default
  Ablations ablations;

  std::size_t split_bin() const { return split == 0 ? n_bins / 2 : split; }

  Segment segment(ExpertKind k) const {
    switch (k) {
      case ExpertKind::early: return {0, split_bin()};
      case ExpertKind::late: return {split_bin(), n_bins};
      case ExpertKind::global: return {0, n_bins};
    }
    return {};
  }

  void validate() const {
    if (n_bins < 8) throw ConfigError("n_bins must be at least 8");
    if (split == 0 && n_bins % 2 != 0) throw ConfigError("n_bins must be even, got " + std::to_string(n_bins));
    if (split_bin() == 0 || split_bin() >= n_bins) throw ConfigError("split must fall inside the signal");
    if (hidden == 0 || hidden % 2 != 0) throw ConfigError("hidden size must be even and positive");
    if (heads == 0 || hidden % heads != 0) throw ConfigError("hidden size must be divisible by heads");
    if (kernel % 2 == 0) throw ConfigError("conv kernel width must be odd");
    if (patch == 0) throw ConfigError("patch must be positive");
    for (ExpertKind k : kExpertKinds) {
      if (segment(k).length() % patch != 0) throw ConfigError("segment lengths must be divisible by patch");
    }
    if (critic_hidden.empty()) throw ConfigError("critic needs at least one hidden layer");
    if (!(gate_dropout >= 0.0 && gate_dropout < 1.0)) throw ConfigError("gate dropout must lie in [0, 1)");
  }

  /// [y_e, y_l, y_g (2), phi_g (H), q_full (4)] minus ablated parts.
  std::size_t gate_input_length() const {
    std::size_t n = 4;
    if (!ablations.no_decider_features) n += hidden;
    if (ablations.uses_quality_in_gate()) n += 4;
    return n;
  }
};

/// Stop-gradient boundary that can record the values it cuts and replay
/// them later. Replaying keeps finite-difference probes of a loss that
/// contains stop-gradients consistent with the analytic gradient.
class StopGrad {
 public:
  enum class Mode { pass, record, replay };
  explicit StopGrad(Mode m = Mode::pass) : mode_(m) {}

  Var operator()(const Var& v) {
    switch (mode_) {
      case Mode::pass: return detach(v);
      case Mode::record: saved_.push_back(v.value()); return detach(v);
      case Mode::replay: return v.tape()->constant(next(v.shape()));
    }
    return detach(v);
  }
  Tensor operator()(const Tensor& t) {
    switch (mode_) {
      case Mode::pass: return t;
      case Mode::record: saved_.push_back(t); return t;
      case Mode::replay: return next(t.shape());
    }
    return t;
  }
  void replay() {
    mode_ = Mode::replay;
    cursor_ = 0;
  }

 private:
  Tensor next(const Shape& s) {
    if (cursor_ >= saved_.size()) throw Error("stop-gradient replay ran past the recording");
    const Tensor& t = saved_[cursor_++];
    if (t.shape() != s) throw ShapeError("stop-gradient replay shape mismatch");
    return t;
  }
  Mode mode_;
  std::vector<Tensor> saved_;
  std::size_t cursor_ = 0;
};

struct ExpertOutput {
  Var features;    // phi_k [B, H]
  Var prediction;  // y_aux,k [B, D_k]
  Tensor weights = Tensor::zeros({0});  // pooling weights [B, L_k]; empty under mean pooling
};

struct CriticOutput {
  Var alpha, beta;  // [B, D_k]
  Var delta;        // [B, D_k]
  Var quality() const { return alpha / (alpha + beta); }
  Var evidence() const { return alpha + beta; }
};

struct ForwardResult {
  std::array<ExpertOutput, 3> experts;
  std::array<std::optional<CriticOutput>, 3> critics;           // on z_k
  std::array<std::optional<CriticOutput>, 3> critics_detached;  // on stop-gradient z_k
  std::array<Var, 3> corrected;                                 // y_aux,k (+ damped correction)
  std::optional<Var> q_full;                                    // [B, 4]
  Var gate;                                                     // [B, 3]
  Var y_final;                                                  // [B, 2]
  std::optional<Var> log_variance;                              // heteroscedastic mode, [B, 2]
  std::size_t gate_input_length = 0;
};

struct ForwardOptions {
  bool training = false;
  Rng* rng = nullptr;          // gating dropout; required when training
  StopGrad* stop = nullptr;    // defaults to a plain detach
  double damping = 0.5;        // lambda_damp
};

struct Expert {
  ExpertKind kind = ExpertKind::early;
  Segment segment;
  Dense lift;  // pointwise 1 -> H channel lift
  std::vector<ResidualConvBlock> blocks;
  TransformerEncoder encoder;
  std::optional<AttentionPool> pool;
  Mlp head;
  Tensor positions;
  std::size_t patch = 1;

  static Expert create(ParamStore& ps, const ModelConfig& c, ExpertKind kind, const std::string& name,
                       std::size_t out_dim) {
    Expert e;
    e.kind = kind;
    e.segment = c.segment(kind);
    const auto g = ParamGroup::expert;
    e.lift = Dense::create(ps, name + ".lift", 1, c.hidden, g);
    for (std::size_t i = 0; i < c.conv_blocks; ++i) {
      e.blocks.push_back(
          ResidualConvBlock::create(ps, name + ".conv" + std::to_string(i), c.hidden, c.kernel, g, c.exact_gelu));
    }
    e.encoder = TransformerEncoder::create(ps, name + ".encoder", c.hidden, c.layers, c.heads, c.ff_mult * c.hidden, g,
                                           c.exact_gelu);
    if (!c.ablations.mean_pooling) e.pool = AttentionPool::create(ps, name + ".pool", c.hidden, g);
    e.head = Mlp::create(ps, name + ".head", {c.hidden, c.head_hidden, out_dim}, g);
    e.patch = c.patch;
    const std::size_t len = e.segment.length() / c.patch;
    if (c.reindex_positions) {
      e.positions = sinusoidal_positions(len, c.hidden);
    } else {
      const Tensor all = sinusoidal_positions(c.n_bins / c.patch, c.hidden);
      const std::size_t first = e.segment.begin / c.patch;
      e.positions = Tensor({len, c.hidden}, std::vector<double>(all.data() + first * c.hidden,
                                                                all.data() + (first + len) * c.hidden));
    }
    return e;
  }

  /// x: full signals [B, L]. Returns features, raw head output and weights.
  ExpertOutput operator()(const Bound& p, const Var& x) const {
    const std::size_t batch = x.shape()[0];
    const std::size_t len = segment.length();
    Var h = reshape(slice(x, 1, segment.begin, segment.end), {batch, len, 1});
    h = lift(p, h);
    for (const auto& blk : blocks) h = blk(p, h);
    if (patch > 1) h = mean_axis(reshape(h, {batch, len / patch, patch, h.shape()[2]}), 2);
    h = h + p.tape().constant(positions);
    h = encoder(p, h);
    ExpertOutput out;
    if (pool) {
      PoolResult r = (*pool)(p, h);
      out.features = r.features;
      out.weights = expand_weights(r.weights.value());
    } else {
      out.features = mean_pool(h);
    }
    out.prediction = head(p, out.features);
    return out;
  }

  /// Spreads per-patch pooling weights evenly over the bins of each patch.
  Tensor expand_weights(const Tensor& w) const {
    if (patch == 1) return w;
    const std::size_t batch = w.dim(0), n = w.dim(1);
    std::vector<double> v(batch * n * patch);
    for (std::size_t i = 0; i < batch * n; ++i)
      for (std::size_t j = 0; j < patch; ++j) v[i * patch + j] = w[i] / static_cast<double>(patch);
    return Tensor({batch, n * patch}, std::move(v));
  }
};

struct Critic {
  Mlp backbone;  // ReLU after every hidden layer, including the last
  Dense evidence;
  Dense correction;
  std::size_t out_dim = 1;

  static Critic create(ParamStore& ps, const ModelConfig& c, const std::string& name, std::size_t out_dim) {
    Critic k;
    k.out_dim = out_dim;
    std::vector<std::size_t> sizes{c.hidden + out_dim};
    sizes.insert(sizes.end(), c.critic_hidden.begin(), c.critic_hidden.end());
    const auto g = ParamGroup::critic;
    k.backbone = Mlp::create(ps, name + ".backbone", sizes, g);
    k.evidence = Dense::create(ps, name + ".evidence", sizes.back(), 2 * out_dim, g);
    k.correction = Dense::create(ps, name + ".correction", sizes.back(), out_dim, g, true);
    return k;
  }

  /// z: [B, H + D_k].
  CriticOutput operator()(const Bound& p, const Var& z) const {
    const Var h = relu(backbone(p, z));
    const Var e = evidence(p, h);
    CriticOutput o;
    o.alpha = softplus1(slice(e, 1, 0, out_dim));
    o.beta = softplus1(slice(e, 1, out_dim, 2 * out_dim));
    o.delta = correction(p, h);
    return o;
  }
};

/// y_aux + damping * delta when enabled, the prediction itself otherwise.
inline Var apply_correction(const Var& y, const Var& delta, double damping, bool enabled) {
  if (!enabled || damping == 0.0) return y;
  return y + damping * delta;
}

class Model {
 public:
  Model() = default;

  static Model create(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Model m;
    m.cfg_ = cfg;
    m.params_ = ParamStore(seed);
    auto& ps = m.params_;
    const Ablations& a = cfg.ablations;
    if (a.heteroscedastic) {
      m.experts_.push_back(Expert::create(ps, cfg, ExpertKind::global, "expert.hetero", 4));
      return m;
    }
    for (ExpertKind k : kExpertKinds) {
      m.experts_.push_back(
          Expert::create(ps, cfg, k, std::string("expert.") + expert_name(k), expert_out_dim(k)));
    }
    if (!a.no_critics) {
      for (ExpertKind k : kExpertKinds) {
        m.critics_.push_back(Critic::create(ps, cfg, std::string("critic.") + expert_name(k), expert_out_dim(k)));
      }
    }
    if (!a.uniform_gating) {
      m.gate_in_ = Dense::create(ps, "decider.gate.fc0", cfg.gate_input_length(), cfg.gate_hidden, ParamGroup::decider);
      m.gate_out_ = Dense::create(ps, "decider.gate.fc1", cfg.gate_hidden, 3, ParamGroup::decider);
    }
    if (!a.no_decider_fusion) {
      const std::size_t in = 4 + (a.no_decider_features ? 0 : cfg.hidden);
      m.fusion_ = Dense::create(ps, "decider.fusion", in, 2, ParamGroup::decider);
    }
    return m;
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  bool heteroscedastic() const { return cfg_.ablations.heteroscedastic; }
  bool has_critics() const { return !critics_.empty(); }

  /// x: [B, L] signals, already normalized.
  ForwardResult forward(const Bound& p, const Var& x, const ForwardOptions& opt = {}) const {
    if (x.shape().size() != 2 || x.shape()[1] != cfg_.n_bins) {
      throw ShapeError("model expects [B, " + std::to_string(cfg_.n_bins) + "] signals, got " + to_string(x.shape()));
    }
    if (opt.training && !opt.rng) throw Error("training forward needs an rng for dropout");
    ForwardResult r;
    r.gate_input_length = heteroscedastic() ? 0 : cfg_.gate_input_length();
    if (heteroscedastic()) {
      ExpertOutput e = experts_[0](p, x);
      r.y_final = tanh(slice(e.prediction, 1, 0, 2));
      r.log_variance = slice(e.prediction, 1, 2, 4);
      r.experts[2] = std::move(e);
      return r;
    }
    StopGrad pass_through;
    StopGrad& stop = opt.stop ? *opt.stop : pass_through;
    const Ablations& a = cfg_.ablations;

    for (std::size_t k = 0; k < 3; ++k) r.experts[k] = experts_[k](p, x);
    for (std::size_t k = 0; k < 3; ++k) {
      r.corrected[k] = r.experts[k].prediction;
      if (!has_critics()) continue;
      const Var z = concat({r.experts[k].features, r.experts[k].prediction}, 1);
      r.critics[k] = critics_[k](p, z);
      r.critics_detached[k] = critics_[k](p, stop(z));
      r.corrected[k] = apply_correction(r.experts[k].prediction, r.critics[k]->delta, opt.damping, a.uses_correction());
    }
    if (has_critics()) {
      r.q_full = concat({r.critics[0]->quality(), r.critics[1]->quality(), r.critics[2]->quality()}, 1);
    }

    const Var& ye = r.corrected[0];
    const Var& yl = r.corrected[1];
    const Var& yg = r.corrected[2];
    const Var& phi_g = r.experts[2].features;
    const std::size_t batch = x.shape()[0];
    Tape& tape = p.tape();

    if (a.uniform_gating) {
      r.gate = tape.constant(Tensor::filled({batch, 3}, 0.5));
    } else {
      std::vector<Var> parts{ye, yl, yg};
      if (!a.no_decider_features) parts.push_back(phi_g);
      if (a.uses_quality_in_gate()) parts.push_back(*r.q_full);
      const Var u = concat(parts, 1);
      r.gate = sigmoid(gate_out_(p, relu(gate_in_(p, u))));
    }
    Var we = slice(r.gate, 1, 0, 1), wl = slice(r.gate, 1, 1, 2), wg = slice(r.gate, 1, 2, 3);
    if (opt.training && !a.no_gating_dropout && cfg_.gate_dropout > 0.0) {
      wg = dropout(wg, cfg_.gate_dropout, true, *opt.rng);
    }
    const Var gated_e = ye * we, gated_l = yl * wl, gated_g = yg * wg;  // gated_g: [B, 2]
    if (a.no_decider_fusion) {
      const Var depth = slice(gated_g, 1, 0, 1) + gated_e;
      const Var life = slice(gated_g, 1, 1, 2) + gated_l;
      r.y_final = tanh(0.5 * concat({depth, life}, 1));
    } else {
      std::vector<Var> parts{gated_e, gated_l, gated_g};
      if (!a.no_decider_features) parts.push_back(phi_g);
      r.y_final = tanh(fusion_(p, concat(parts, 1)));
    }
    return r;
  }

 private:
  ModelConfig cfg_;
  ParamStore params_;
  std::vector<Expert> experts_;
  std::vector<Critic> critics_;
  Dense gate_in_, gate_out_, fusion_;
};

}  // namespace emoe
