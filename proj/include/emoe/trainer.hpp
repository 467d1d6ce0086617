#pragma once
// Phased training, AdamW, evaluation metrics and data splitting.

#include <algorithm>
#include <cstdio>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "emoe/config.hpp"
#include "emoe/dataset_io.hpp"
#include "emoe/hash.hpp"
#include "emoe/losses.hpp"
#include "emoe/model.hpp"

namespace emoe {

// ---------------------------------------------------------------------------
// Schedule

/// Phase 0 means joint training without phases.
struct PhaseSchedule {
  std::size_t n1 = 3, n2 = 8, n3 = 59;
  std::size_t ramp = 5;
  bool phased = true;

  std::size_t total() const { return n1 + n2 + n3; }

  int phase(std::size_t epoch) const {
    if (!phased) return 0;
    if (epoch < n1) return 1;
    if (epoch < n1 + n2) return 2;
    return 3;
  }
  GroupMask trainable(std::size_t epoch) const {
    switch (phase(epoch)) {
      case 1: return GroupMask::only(ParamGroup::expert);
      case 2: return {false, true, true};
      default: return GroupMask::all();
    }
  }
  Objective objective(std::size_t epoch) const { return phase(epoch) == 1 ? Objective::aux_only : Objective::full; }
  /// Linear ramp of the expert learning rate over the first `ramp` epochs of phase 3.
  double expert_lr_scale(std::size_t epoch) const {
    if (phase(epoch) != 3 || ramp == 0) return 1.0;
    const std::size_t j = epoch - n1 - n2;
    return std::min(1.0, static_cast<double>(j + 1) / static_cast<double>(ramp));
  }
};

inline std::size_t effective_epochs(const RunConfig& c) {
  if (!c.model.ablations.heteroscedastic) return c.train.epochs;
  return static_cast<std::size_t>(
      std::max(1.0, std::round(static_cast<double>(c.train.epochs) * c.train.hetero_epoch_ratio)));
}

/// Explicit phases must add up to the epoch count; otherwise the reference
/// split (N1, N2 at 70 epochs) is scaled to the configured length.
inline PhaseSchedule resolve_schedule(const RunConfig& c) {
  const TrainConfig& t = c.train;
  const std::size_t epochs = effective_epochs(c);
  PhaseSchedule s;
  s.ramp = t.unfreeze_ramp;
  if (!t.phased) {
    s.phased = false;
    s.n1 = s.n2 = 0;
    s.n3 = epochs;
    return s;
  }
  if (t.phases) {
    const auto& p = *t.phases;
    if (p[2] == 0) throw ConfigError("phase 3 needs at least one epoch");
    if (p[0] + p[1] + p[2] != epochs) {
      throw ConfigError("phase schedule " + std::to_string(p[0]) + "," + std::to_string(p[1]) + "," +
                        std::to_string(p[2]) + " does not match " + std::to_string(epochs) + " epochs");
    }
    s.n1 = p[0];
    s.n2 = p[1];
    s.n3 = p[2];
    return s;
  }
  const double f = static_cast<double>(epochs) / static_cast<double>(TrainConfig::kReferenceEpochs);
  s.n1 = static_cast<std::size_t>(std::round(static_cast<double>(t.phase_split[0]) * f));
  s.n2 = static_cast<std::size_t>(std::round(static_cast<double>(t.phase_split[1]) * f));
  if (s.n1 + s.n2 >= epochs) {
    throw ConfigError("phase split " + std::to_string(t.phase_split[0]) + "/" + std::to_string(t.phase_split[1]) +
                      " leaves no joint epochs out of " + std::to_string(epochs));
  }
  s.n3 = epochs - s.n1 - s.n2;
  return s;
}

// ---------------------------------------------------------------------------
// Optimizer

class AdamW {
 public:
  AdamW(const ParamStore& ps, double beta1, double beta2, double eps, double weight_decay)
      : beta1_(beta1), beta2_(beta2), eps_(eps), decay_(weight_decay) {
    for (const auto& p : ps.params()) {
      m_.emplace_back(p.value.size(), 0.0);
      v_.emplace_back(p.value.size(), 0.0);
    }
    steps_.assign(ps.size(), 0);
  }
  AdamW(const ParamStore& ps, const TrainConfig& t) : AdamW(ps, t.beta1, t.beta2, t.adam_eps, t.weight_decay) {}

  /// lr[g] is the step size of group g; 0 leaves the group untouched.
  void step(ParamStore& ps, const std::vector<Tensor>& grads, const std::array<double, 3>& lr) {
    if (grads.size() != ps.size()) throw ShapeError("optimizer: one gradient per parameter expected");
    auto rate = [&](const Param& p) { return lr[static_cast<std::size_t>(p.group)]; };
    for (std::size_t i = 0; i < ps.size(); ++i) {
      if (rate(ps[i]) == 0.0) continue;
      if (grads[i].size() != ps[i].value.size()) throw ShapeError("optimizer: gradient shape mismatch for " + ps[i].name);
      if (!grads[i].finite()) throw NumericError("non-finite gradient in parameter " + ps[i].name);
    }
    for (std::size_t i = 0; i < ps.size(); ++i) {
      const double a = rate(ps[i]);
      if (a == 0.0) continue;
      const std::size_t t = ++steps_[i];
      const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t));
      const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t));
      std::vector<double> w = ps[i].value.to_vector();
      const double* g = grads[i].data();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
        v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
        w[j] -= a * ((m[j] / c1) / (std::sqrt(v[j] / c2) + eps_) + decay_ * w[j]);
      }
      ps[i].value = Tensor(ps[i].value.shape(), std::move(w));
    }
  }

 private:
  double beta1_, beta2_, eps_, decay_;
  std::vector<std::vector<double>> m_, v_;
  std::vector<std::size_t> steps_;
};

// ---------------------------------------------------------------------------
// Metrics

struct Metrics {
  double d_nrmse = 0, d_absrel = 0, d_rmselog = 0, l_nrmse = 0;
  double q_depth = std::numeric_limits<double>::quiet_NaN();
  double q_life = std::numeric_limits<double>::quiet_NaN();
};

inline constexpr std::array<const char*, 6> kMetricNames{"D.NRMSE", "D.AbsRel", "D.RMSElog",
                                                         "L.NRMSE(f)", "Q.Depth", "Q.Life"};

inline std::array<double, 6> metric_values(const Metrics& m) {
  return {m.d_nrmse, m.d_absrel, m.d_rmselog, m.l_nrmse, m.q_depth, m.q_life};
}

/// pred, truth: [n, 2] physical units (depth cm, lifetime ns). quality:
/// [n, 4] q_full rows or empty.
inline Metrics evaluate_metrics(const std::vector<double>& pred, const std::vector<double>& truth,
                                const std::vector<double>& quality = {}) {
  if (pred.size() != truth.size() || pred.empty() || pred.size() % 2 != 0)
    throw ShapeError("metrics need matching non-empty [n, 2] predictions and truths");
  const std::size_t n = pred.size() / 2;
  auto nrmse = [&](std::size_t d) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo, se = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double t = truth[2 * i + d], e = pred[2 * i + d] - t;
      lo = std::min(lo, t);
      hi = std::max(hi, t);
      se += e * e;
    }
    if (!(hi > lo)) throw DomainError("NRMSE undefined: targets span a zero range");
    return std::sqrt(se / static_cast<double>(n)) / (hi - lo);
  };
  Metrics m;
  m.d_nrmse = nrmse(0);
  m.l_nrmse = nrmse(1);
  double rel = 0.0, lg = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double y = truth[2 * i], p = pred[2 * i];
    if (!(y > 0.0) || !(p > 0.0)) throw DomainError("depth metrics need positive predictions and targets");
    rel += std::abs(p - y) / y;
    const double d = std::log(p) - std::log(y);
    lg += d * d;
  }
  m.d_absrel = rel / static_cast<double>(n);
  m.d_rmselog = std::sqrt(lg / static_cast<double>(n));
  if (!quality.empty()) {
    if (quality.size() != 4 * n) throw ShapeError("quality rows must be [n, 4]");
    double qd = 0.0, ql = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      qd += quality[4 * i + 2];
      ql += quality[4 * i + 3];
    }
    m.q_depth = qd / static_cast<double>(n);
    m.q_life = ql / static_cast<double>(n);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Data

struct Split {
  std::vector<std::size_t> train, val, test;
};

/// The last min(n_test, n/5) samples are the test set; the rest is split
/// in order into train and validation by val_fraction.
inline Split split_dataset(std::size_t n, std::size_t n_test, double val_fraction) {
  if (n == 0) throw ConfigError("empty dataset");
  Split s;
  const std::size_t test = std::min(n_test, n / 5);
  const std::size_t rest = n - test;
  const std::size_t val = static_cast<std::size_t>(std::round(static_cast<double>(rest) * val_fraction));
  if (rest == 0 || val >= rest) throw ConfigError("dataset too small to split: " + std::to_string(n) + " samples");
  for (std::size_t i = 0; i < rest - val; ++i) s.train.push_back(i);
  for (std::size_t i = rest - val; i < rest; ++i) s.val.push_back(i);
  for (std::size_t i = rest; i < n; ++i) s.test.push_back(i);
  return s;
}

inline Split split_dataset(std::size_t n, const TrainConfig& t) { return split_dataset(n, t.n_test, t.val_fraction); }

struct Batch {
  Tensor x;  // [B, L]
  Tensor y;  // [B, 2] normalized
};

inline Batch make_batch(const Dataset& d, const TargetCodec& codec, const std::size_t* idx, std::size_t count) {
  std::vector<double> x(count * d.n_bins), y(count * 2);
  for (std::size_t i = 0; i < count; ++i) {
    std::copy_n(d.signal(idx[i]), d.n_bins, x.begin() + static_cast<std::ptrdiff_t>(i * d.n_bins));
    const auto t = codec.encode(d.scene(idx[i]));
    y[2 * i] = t[0];
    y[2 * i + 1] = t[1];
  }
  return {Tensor({count, d.n_bins}, std::move(x)), Tensor({count, 2}, std::move(y))};
}

// ---------------------------------------------------------------------------
// Prediction

struct Predictions {
  std::vector<std::size_t> index;
  std::vector<double> normalized;  // [n, 2]
  std::vector<double> physical;    // [n, 2]
  std::vector<double> truth;       // [n, 2] physical
  std::vector<double> quality;     // [n, 4] or empty
  std::array<std::vector<double>, 3> attention;  // mean pooling weights per expert, empty when absent
  double loss = 0.0;               // primary MAE, or Gaussian NLL for the heteroscedastic baseline
};

/// `codec` maps normalized outputs back to physical units; defaults to the
/// dataset's target ranges.
inline Predictions predict(const Model& model, const Dataset& d, const std::vector<std::size_t>& idx,
                           const LossConfig& loss, std::size_t chunk = 256, const TargetCodec* codec = nullptr) {
  if (d.n_bins != model.config().n_bins) {
    throw ConfigError("model expects " + std::to_string(model.config().n_bins) + " bins, dataset has " +
                      std::to_string(d.n_bins));
  }
  const TargetCodec own = TargetCodec::from(d.sim);
  const TargetCodec& cd = codec ? *codec : own;
  Predictions p;
  p.index = idx;
  double loss_sum = 0.0;
  for (std::size_t start = 0; start < idx.size(); start += chunk) {
    const std::size_t n = std::min(chunk, idx.size() - start);
    const Batch b = make_batch(d, cd, idx.data() + start, n);
    Tape tape;
    Bound bound(tape, model.params(), GroupMask::none());
    ForwardOptions fo;
    fo.damping = loss.damping;
    const ForwardResult r = model.forward(bound, tape.constant(b.x), fo);
    const Tensor y = r.y_final.value();
    if (r.log_variance) {
      loss_sum += heteroscedastic_nll(r.y_final, *r.log_variance, tape.constant(b.y)).value().item() * double(n);
    } else {
      loss_sum += primary_mae(r.y_final, tape.constant(b.y)).value().item() * double(n);
    }
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < 2; ++k) {
        p.normalized.push_back(y[2 * i + k]);
        p.physical.push_back(cd.decode(y[2 * i + k], k));
      }
      const Scene s = d.scene(idx[start + i]);
      p.truth.push_back(s.depth_cm);
      p.truth.push_back(s.lifetime_ns);
    }
    if (r.q_full) {
      const Tensor q = r.q_full->value();
      p.quality.insert(p.quality.end(), q.data(), q.data() + q.size());
    }
    for (std::size_t k = 0; k < 3; ++k) {
      const Tensor& w = r.experts[k].weights;
      if (w.size() == 0 || w.rank() != 2) continue;
      const std::size_t len = w.dim(1);
      auto& acc = p.attention[k];
      acc.resize(len, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < len; ++j) acc[j] += w[i * len + j];
    }
  }
  for (auto& a : p.attention)
    for (auto& v : a) v /= static_cast<double>(idx.size());
  p.loss = loss_sum / static_cast<double>(idx.size());
  return p;
}

inline Metrics evaluate(const Predictions& p) { return evaluate_metrics(p.physical, p.truth, p.quality); }

// ---------------------------------------------------------------------------
// Training

struct GroupHashes {
  std::string expert, critic, decider;
  static GroupHashes of(const ParamStore& ps) {
    return {group_hash(ps, ParamGroup::expert), group_hash(ps, ParamGroup::critic), group_hash(ps, ParamGroup::decider)};
  }
  bool operator==(const GroupHashes&) const = default;
};

struct EpochLog {
  std::size_t epoch = 0;
  int phase = 0;
  double expert_lr_scale = 1.0;
  LossBreakdown train;
  double val_loss = 0.0;
  Metrics val;
  GroupHashes hashes;  // after the epoch
  bool best = false;
};

inline json to_json(const EpochLog& e) {
  json val{{"loss", e.val_loss}};
  const auto mv = metric_values(e.val);
  for (std::size_t i = 0; i < mv.size(); ++i) val[kMetricNames[i]] = std::isfinite(mv[i]) ? json(mv[i]) : json(nullptr);
  return json{{"epoch", e.epoch},
              {"phase", e.phase},
              {"expert_lr_scale", e.expert_lr_scale},
              {"train",
               {{"primary", e.train.primary},
                {"aux", e.train.aux},
                {"quality", e.train.quality},
                {"correction", e.train.correction},
                {"penalty", e.train.penalty},
                {"total", e.train.total}}},
              {"val", val},
              {"hash", {{"expert", e.hashes.expert}, {"critic", e.hashes.critic}, {"decider", e.hashes.decider}}},
              {"best", e.best}};
}

struct TrainResult {
  Model model;  // parameters of the best validation epoch
  RunConfig config;
  PhaseSchedule schedule;
  std::size_t best_epoch = 0;
  int best_phase = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  GroupHashes initial_hashes;
  std::vector<EpochLog> history;
};

struct TrainHooks {
  std::function<void(const std::string&)> log;            // human-readable progress
  std::function<void(const EpochLog&, const Model&)> on_epoch;
};

namespace detail {

inline void accumulate(LossBreakdown& acc, const LossBreakdown& b, double w) {
  acc.primary += w * b.primary;
  acc.aux += w * b.aux;
  acc.quality += w * b.quality;
  acc.correction += w * b.correction;
  acc.penalty += w * b.penalty;
  acc.total += w * b.total;
}

}  // namespace detail

/// One optimizer step's gradients over a batch, optionally split into
/// micro-batches. Batch-level quality targets are computed up front so the
/// per-chunk losses add up to the full-batch loss.
inline std::vector<Tensor> batch_gradients(const Model& model, const Batch& b, const LossConfig& loss,
                                           GroupMask mask, Objective objective, std::size_t micro, Rng& dropout,
                                           LossBreakdown& breakdown) {
  const std::size_t n = b.x.dim(0), bins = b.x.dim(1);
  const std::size_t chunk = micro == 0 || micro >= n ? n : micro;
  std::optional<std::array<Tensor, 3>> q_gt;
  if (chunk < n && objective == Objective::full && model.has_critics()) {
    Tape tape;
    Bound bound(tape, model.params(), GroupMask::none());
    const ForwardResult full = model.forward(bound, tape.constant(b.x));
    q_gt = quality_targets(full, b.y, loss.kappa, loss.eps);
  }
  std::vector<Tensor> grads;
  breakdown = {};
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t m = std::min(chunk, n - start);
    const Tensor xs = chunk == n ? b.x : Tensor({m, bins}, std::vector<double>(b.x.data() + start * bins,
                                                                              b.x.data() + (start + m) * bins));
    const Tensor ys = chunk == n ? b.y : Tensor({m, 2}, std::vector<double>(b.y.data() + start * 2,
                                                                           b.y.data() + (start + m) * 2));
    Tape tape;
    Bound bound(tape, model.params(), mask);
    ForwardOptions fo;
    fo.training = true;
    fo.rng = &dropout;
    fo.damping = loss.damping;
    const ForwardResult r = model.forward(bound, tape.constant(xs), fo);
    LossOptions lo;
    lo.objective = objective;
    if (q_gt) lo.q_gt = &*q_gt;
    const LossTerms terms = compute_losses(r, ys, loss, lo);
    const double w = static_cast<double>(m) / static_cast<double>(n);
    detail::accumulate(breakdown, terms.values(), w);
    const Gradients g = tape.backward(w == 1.0 ? terms.total : w * terms.total);
    if (grads.empty()) {
      for (std::size_t i = 0; i < model.params().size(); ++i) {
        const Var& v = bound[i];
        grads.push_back(g.contains(v) ? g[v] : Tensor::zeros(model.params()[i].value.shape()));
      }
    } else {
      for (std::size_t i = 0; i < grads.size(); ++i) {
        const Var& v = bound[i];
        if (!g.contains(v)) continue;
        std::vector<double> acc = grads[i].to_vector();
        const Tensor& gi = g[v];
        for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += gi[j];
        grads[i] = Tensor(grads[i].shape(), std::move(acc));
      }
    }
  }
  return grads;
}

inline TrainResult train_model(const Dataset& data, RunConfig cfg, const Split& split, const TrainHooks& hooks = {}) {
  cfg.model.n_bins = data.n_bins;
  cfg.validate();
  if (split.train.empty() || split.val.empty()) throw ConfigError("training needs non-empty train and validation sets");
  const PhaseSchedule schedule = resolve_schedule(cfg);
  const TrainConfig& t = cfg.train;
  auto log = [&](const std::string& s) {
    if (hooks.log) hooks.log(s);
  };

  Model model = Model::create(cfg.model, t.seed);
  TrainResult result{model, cfg, schedule};
  result.initial_hashes = GroupHashes::of(model.params());
  if (!model.heteroscedastic()) log("gate input length " + std::to_string(model.config().gate_input_length()));
  log("schedule " + std::to_string(schedule.n1) + "," + std::to_string(schedule.n2) + "," +
      std::to_string(schedule.n3) + (schedule.phased ? "" : " (joint)"));

  AdamW opt(model.params(), t);
  Rng shuffle_rng(t.seed * 0x9E3779B97F4A7C15ULL + 1);
  Rng dropout_rng(t.seed * 0x9E3779B97F4A7C15ULL + 2);
  const TargetCodec codec = TargetCodec::from(data.sim);
  std::vector<std::size_t> order = split.train;

  for (std::size_t epoch = 0; epoch < schedule.total(); ++epoch) {
    const GroupMask mask = schedule.trainable(epoch);
    const Objective objective = schedule.objective(epoch);
    const double ramp = schedule.expert_lr_scale(epoch);
    const std::array<double, 3> lr{mask.expert ? t.lr * ramp : 0.0, mask.critic ? t.lr : 0.0,
                                   mask.decider ? t.lr : 0.0};
    const GroupHashes before = GroupHashes::of(model.params());

    std::shuffle(order.begin(), order.end(), shuffle_rng);
    LossBreakdown epoch_loss;
    for (std::size_t start = 0; start < order.size(); start += t.batch_size) {
      const std::size_t n = std::min(t.batch_size, order.size() - start);
      const Batch b = make_batch(data, codec, order.data() + start, n);
      LossBreakdown bd;
      const std::vector<Tensor> grads =
          batch_gradients(model, b, cfg.loss, mask, objective, t.micro_batch, dropout_rng, bd);
      detail::accumulate(epoch_loss, bd, static_cast<double>(n) / static_cast<double>(order.size()));
      opt.step(model.params(), grads, lr);
    }

    EpochLog e;
    e.epoch = epoch;
    e.phase = schedule.phase(epoch);
    e.expert_lr_scale = ramp;
    e.train = epoch_loss;
    e.hashes = GroupHashes::of(model.params());
    if ((!mask.expert && e.hashes.expert != before.expert) || (!mask.critic && e.hashes.critic != before.critic) ||
        (!mask.decider && e.hashes.decider != before.decider)) {
      throw Error("frozen parameter group changed during epoch " + std::to_string(epoch));
    }
    const Predictions vp = predict(model, data, split.val, cfg.loss, t.eval_batch);
    e.val_loss = vp.loss;
    e.val = evaluate(vp);
    if (e.val_loss < result.best_val_loss) {
      e.best = true;
      result.best_val_loss = e.val_loss;
      result.best_epoch = epoch;
      result.best_phase = e.phase;
      result.model.params() = model.params();
    }
    char line[256];
    std::snprintf(line, sizeof line, "epoch %zu phase %d loss %.5f val %.5f D.NRMSE %.4f L.NRMSE %.4f%s", epoch,
                  e.phase, e.train.total, e.val_loss, e.val.d_nrmse, e.val.l_nrmse, e.best ? " *" : "");
    log(line);
    if (hooks.on_epoch) hooks.on_epoch(e, model);
    result.history.push_back(std::move(e));
  }
  return result;
}

}  // namespace emoe
