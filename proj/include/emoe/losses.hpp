#pragma once
// Composite training objective and the heteroscedastic baseline loss.

#include <array>
#include <cmath>
#include <numbers>
#include <optional>
#include <string>

#include "emoe/model.hpp"
#include "emoe/ops.hpp"

namespace emoe {

struct LossConfig {
  double w_primary = 1.0;
  double w_aux = 1.0;
  double w_quality = 1.0;  // lambda_crit_q
  double w_correction = 1.0;
  double w_penalty = 1.0;
  double kl_weight = 0.01;
  double kappa = 2.0;
  double damping = 0.5;
  double gamma = 0.1;
  double eps = 1e-8;
  double huber_delta = 1.0;
  bool aux_enabled = true;

  void validate() const {
    for (double w : {w_primary, w_aux, w_quality, w_correction, w_penalty, kl_weight, gamma}) {
      if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("loss weights must be finite and non-negative");
    }
    if (!(kappa > 0.0)) throw ConfigError("kappa must be positive");
    if (!(damping >= 0.0 && damping <= 1.0)) throw ConfigError("damping must lie in [0, 1]");
    if (!(eps > 0.0)) throw ConfigError("eps must be positive");
    if (!(huber_delta > 0.0)) throw ConfigError("huber delta must be positive");
  }
};

struct LossBreakdown {
  double primary = 0, aux = 0, quality = 0, correction = 0, penalty = 0, total = 0;
};

struct LossTerms {
  Var primary, aux, quality, correction, penalty;  // unweighted; invalid when not computed
  Var total;
  LossBreakdown values() const {
    auto v = [](const Var& x) { return x.valid() ? x.value().item() : 0.0; };
    return {v(primary), v(aux), v(quality), v(correction), v(penalty), v(total)};
  }
};

/// Which target columns expert k is matched to.
inline Segment target_columns(ExpertKind k) {
  switch (k) {
    case ExpertKind::early: return {0, 1};
    case ExpertKind::late: return {1, 2};
    case ExpertKind::global: return {0, 2};
  }
  return {};
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (a != b) throw ShapeError(std::string(what) + ": " + to_string(a) + " vs " + to_string(b));
}

/// Mean over batch and both dimensions of |y - t|.
inline Var primary_mae(const Var& y, const Var& t) {
  require_same_shape(y.shape(), t.shape(), "primary loss");
  return mean(abs(y - t));
}

/// (1/3) sum_k mean |y_aux,k - matched targets|.
inline Var aux_l1(const std::array<Var, 3>& preds, const Var& t) {
  Var acc;
  for (std::size_t k = 0; k < 3; ++k) {
    const Segment cols = target_columns(kExpertKinds[k]);
    const Var term = mean(abs(preds[k] - slice(t, 1, cols.begin, cols.end)));
    acc = acc.valid() ? acc + term : term;
  }
  return (1.0 / 3.0) * acc;
}

/// q_gt_d = 1 / (1 + kappa * MAE_d + eps) with MAE_d the batch-mean error of
/// column d. pred and target are [B, D].
inline Tensor quality_target(const Tensor& pred, const Tensor& target, double kappa, double eps) {
  require_same_shape(pred.shape(), target.shape(), "quality target");
  if (pred.rank() != 2 || pred.dim(0) == 0) throw ShapeError("quality target expects a non-empty [B, D] batch");
  const std::size_t n = pred.dim(0), d = pred.dim(1);
  std::vector<double> q(d, 0.0);
  for (std::size_t j = 0; j < d; ++j) {
    double mae = 0.0;
    for (std::size_t i = 0; i < n; ++i) mae += std::abs(pred[i * d + j] - target[i * d + j]);
    mae /= static_cast<double>(n);
    q[j] = 1.0 / (1.0 + kappa * mae + eps);
  }
  return Tensor({d}, std::move(q));
}

/// (q - a/(a+b+eps))^2 + ab / ((a+b+eps)^2 (a+b+1+eps)), elementwise.
inline Var evidential_loss(const Var& alpha, const Var& beta, const Var& q, double eps) {
  const Var s = alpha + beta + eps;
  const Var mse = square(q - alpha / s);
  const Var var = alpha * beta / (square(s) * (s + 1.0));
  return mse + var;
}

/// KL(Beta(a, b) || Beta(1, 1)), elementwise.
inline Var beta_kl(const Var& alpha, const Var& beta) {
  const Var s = alpha + beta;
  const Var dg_s = digamma(s);
  return lgamma(s) - lgamma(alpha) - lgamma(beta) + (alpha + (-1.0)) * (digamma(alpha) - dg_s) +
         (beta + (-1.0)) * (digamma(beta) - dg_s);
}

inline double beta_kl(double alpha, double beta) {
  Tape t;
  return beta_kl(t.constant(Tensor::scalar(alpha)), t.constant(Tensor::scalar(beta))).value().item();
}

/// Batch mean of sum over (k, d) of evidential + kl_weight * max(0, KL).
/// q_gt[k] holds one target per output dimension of expert k.
inline Var quality_loss(const std::array<CriticOutput, 3>& critics, const std::array<Tensor, 3>& q_gt,
                        double kl_weight, double eps) {
  Var acc;
  std::size_t batch = 0;
  for (std::size_t k = 0; k < 3; ++k) {
    const CriticOutput& c = critics[k];
    Tape& tape = *c.alpha.tape();
    batch = c.alpha.shape()[0];
    Var term = evidential_loss(c.alpha, c.beta, tape.constant(q_gt[k]), eps);
    if (kl_weight != 0.0) term = term + kl_weight * relu(beta_kl(c.alpha, c.beta));
    acc = acc.valid() ? acc + sum(term) : sum(term);
  }
  return (1.0 / static_cast<double>(batch)) * acc;
}

/// (1/3) sum_k mean Huber_delta(y_aux,k + damping * delta_k - t_k).
inline Var correction_huber(const std::array<Var, 3>& preds, const std::array<Var, 3>& deltas, const Var& t,
                            double damping, double huber_delta) {
  Var acc;
  for (std::size_t k = 0; k < 3; ++k) {
    const Segment cols = target_columns(kExpertKinds[k]);
    const Var r = preds[k] + damping * deltas[k] - slice(t, 1, cols.begin, cols.end);
    const Var term = mean(huber(r, huber_delta));
    acc = acc.valid() ? acc + term : term;
  }
  return (1.0 / 3.0) * acc;
}

/// Batch mean of sum over (k, d) of gamma * delta^2 / (S + eps).
inline Var evidence_penalty(const std::array<CriticOutput, 3>& critics, double gamma, double eps) {
  Var acc;
  std::size_t batch = 0;
  for (const auto& c : critics) {
    batch = c.delta.shape()[0];
    const Var term = sum(square(c.delta) / (c.evidence() + eps));
    acc = acc.valid() ? acc + term : term;
  }
  return (gamma / static_cast<double>(batch)) * acc;
}

/// Batch mean of sum_d 0.5 (ln 2 pi + lv + (y - mu)^2 exp(-lv)).
inline Var heteroscedastic_nll(const Var& mu, const Var& log_var, const Var& t) {
  require_same_shape(mu.shape(), t.shape(), "heteroscedastic loss");
  require_same_shape(log_var.shape(), t.shape(), "heteroscedastic loss");
  const double ln2pi = std::log(2.0 * std::numbers::pi);
  const Var per = 0.5 * (log_var + ln2pi + square(t - mu) * exp(-1.0 * log_var));
  return (1.0 / static_cast<double>(t.shape()[0])) * sum(per);
}

enum class Objective { aux_only, full };

struct LossOptions {
  Objective objective = Objective::full;
  const std::array<Tensor, 3>* q_gt = nullptr;  // precomputed batch targets
  StopGrad* stop = nullptr;
};

/// Per-expert quality targets from the uncorrected predictions.
inline std::array<Tensor, 3> quality_targets(const ForwardResult& r, const Tensor& targets, double kappa, double eps) {
  std::array<Tensor, 3> q;
  for (std::size_t k = 0; k < 3; ++k) {
    const Segment cols = target_columns(kExpertKinds[k]);
    const std::size_t n = targets.dim(0), w = cols.length();
    std::vector<double> t(n * w);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < w; ++j) t[i * w + j] = targets[i * 2 + cols.begin + j];
    q[k] = quality_target(r.experts[k].prediction.value(), Tensor({n, w}, std::move(t)), kappa, eps);
  }
  return q;
}

/// targets: [B, 2] normalized. Terms with zero weight are evaluated for
/// logging but kept out of the total.
inline LossTerms compute_losses(const ForwardResult& r, const Tensor& targets, const LossConfig& cfg,
                                const LossOptions& opt = {}) {
  Tape& tape = *r.y_final.tape();
  const Var t = tape.constant(targets);
  LossTerms L;
  auto add = [&](double w, const Var& term) {
    if (w == 0.0) return;
    const Var weighted = w == 1.0 ? term : w * term;
    L.total = L.total.valid() ? L.total + weighted : weighted;
  };

  if (r.log_variance) {
    L.primary = heteroscedastic_nll(r.y_final, *r.log_variance, t);
    L.total = L.primary;
    return L;
  }

  L.aux = aux_l1({r.experts[0].prediction, r.experts[1].prediction, r.experts[2].prediction}, t);
  if (opt.objective == Objective::aux_only) {
    add(cfg.aux_enabled ? cfg.w_aux : 0.0, L.aux);
    if (!L.total.valid()) L.total = tape.constant(Tensor::scalar(0.0));
    return L;
  }

  L.primary = primary_mae(r.y_final, t);
  add(cfg.w_primary, L.primary);
  add(cfg.aux_enabled ? cfg.w_aux : 0.0, L.aux);

  if (r.critics[0]) {
    std::array<Tensor, 3> q = opt.q_gt ? *opt.q_gt : quality_targets(r, targets, cfg.kappa, cfg.eps);
    if (opt.stop && !opt.q_gt)
      for (auto& qk : q) qk = (*opt.stop)(qk);
    const std::array<CriticOutput, 3> det{*r.critics_detached[0], *r.critics_detached[1], *r.critics_detached[2]};
    L.quality = quality_loss(det, q, cfg.kl_weight, cfg.eps);
    L.correction = correction_huber({r.experts[0].prediction, r.experts[1].prediction, r.experts[2].prediction},
                                    {r.critics[0]->delta, r.critics[1]->delta, r.critics[2]->delta}, t, cfg.damping,
                                    cfg.huber_delta);
    L.penalty = evidence_penalty(det, cfg.gamma, cfg.eps);
    add(cfg.w_quality, L.quality);
    add(cfg.w_correction, L.correction);
    add(cfg.w_penalty, L.penalty);
  }
  if (!L.total.valid()) L.total = tape.constant(Tensor::scalar(0.0));
  return L;
}

}  // namespace emoe
