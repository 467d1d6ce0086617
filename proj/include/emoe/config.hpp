#pragma once
// Run configuration: sim + model + loss + train, parsed strictly from JSON,
// plus the named ablation registry.

#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "emoe/dataset_io.hpp"
#include "emoe/hash.hpp"
#include "emoe/losses.hpp"
#include "emoe/model.hpp"

namespace emoe {

struct TrainConfig {
  std::size_t batch_size = 512;
  std::size_t epochs = 70;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 1e-4;
  std::uint64_t seed = 1;
  bool phased = true;
  std::array<std::size_t, 2> phase_split{3, 8};  // N1, N2 at the 70-epoch reference
  std::optional<std::array<std::size_t, 3>> phases;  // explicit N1, N2, N3
  std::size_t unfreeze_ramp = 5;
  std::size_t micro_batch = 0;  // 0: whole batch in one pass
  std::size_t eval_batch = 256;
  std::size_t n_test = 100;
  double val_fraction = 0.2;
  double hetero_epoch_ratio = 500.0 / 70.0;
  std::string ablation = "full";

  static constexpr std::size_t kReferenceEpochs = 70;

  void validate() const {
    if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
    if (epochs == 0) throw ConfigError("epochs must be at least 1");
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be finite and non-negative");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("adam betas must lie in [0, 1)");
    if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
    if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must lie in (0, 1)");
    if (!(hetero_epoch_ratio > 0.0)) throw ConfigError("hetero_epoch_ratio must be positive");
    if (eval_batch == 0) throw ConfigError("eval_batch must be positive");
    if (phases && (*phases)[2] == 0) throw ConfigError("phase 3 needs at least one epoch");
  }
};

struct RunConfig {
  SimConfig sim;
  ModelConfig model;
  LossConfig loss;
  TrainConfig train;

  void validate() const {
    sim.validate();
    model.validate();
    loss.validate();
    train.validate();
  }
};

namespace detail {

inline std::uint64_t json_count(const json& v, const std::string& key) {
  if (!v.is_number_integer() || v.get<long long>() < 0) throw ConfigError(key + " must be a non-negative integer");
  return v.get<std::uint64_t>();
}
inline double json_num(const json& v, const std::string& key) {
  if (!v.is_number()) throw ConfigError(key + " must be a number");
  return v.get<double>();
}
inline bool json_bool(const json& v, const std::string& key) {
  if (!v.is_boolean()) throw ConfigError(key + " must be a boolean");
  return v.get<bool>();
}
inline std::string json_str(const json& v, const std::string& key) {
  if (!v.is_string()) throw ConfigError(key + " must be a string");
  return v.get<std::string>();
}
inline std::vector<std::size_t> json_counts(const json& v, const std::string& key) {
  if (!v.is_array()) throw ConfigError(key + " must be an array of integers");
  std::vector<std::size_t> out;
  for (const auto& e : v) out.push_back(json_count(e, key));
  return out;
}

using Handler = std::function<void(const json&, const std::string&)>;

inline void read_object(const json& j, const std::string& section, const std::map<std::string, Handler>& fields) {
  if (!j.is_object()) throw ConfigError(section + " must be a JSON object");
  for (const auto& [key, v] : j.items()) {
    auto it = fields.find(key);
    if (it == fields.end()) throw ConfigError("unknown " + section + " key: " + key);
    it->second(v, section + "." + key);
  }
}

}  // namespace detail

inline json ablations_to_json(const Ablations& a) {
  return json{{"no_correction", a.no_correction},
              {"no_quality_gating", a.no_quality_gating},
              {"no_decider_features", a.no_decider_features},
              {"no_decider_fusion", a.no_decider_fusion},
              {"no_gating_dropout", a.no_gating_dropout},
              {"uniform_gating", a.uniform_gating},
              {"mean_pooling", a.mean_pooling},
              {"heteroscedastic", a.heteroscedastic},
              {"no_critics", a.no_critics}};
}

inline json model_to_json(const ModelConfig& c) {
  return json{{"ablations", ablations_to_json(c.ablations)},
              {"n_bins", c.n_bins},
              {"split", c.split},
              {"hidden", c.hidden},
              {"conv_blocks", c.conv_blocks},
              {"kernel", c.kernel},
              {"patch", c.patch},
              {"layers", c.layers},
              {"heads", c.heads},
              {"ff_mult", c.ff_mult},
              {"head_hidden", c.head_hidden},
              {"critic_hidden", c.critic_hidden},
              {"gate_hidden", c.gate_hidden},
              {"gate_dropout", c.gate_dropout},
              {"reindex_positions", c.reindex_positions},
              {"exact_gelu", c.exact_gelu}};
}

inline json loss_to_json(const LossConfig& c) {
  return json{{"w_primary", c.w_primary}, {"w_aux", c.w_aux},         {"w_quality", c.w_quality},
              {"w_correction", c.w_correction}, {"w_penalty", c.w_penalty}, {"kl_weight", c.kl_weight},
              {"kappa", c.kappa},           {"damping", c.damping},     {"gamma", c.gamma},
              {"eps", c.eps},               {"huber_delta", c.huber_delta}, {"aux_enabled", c.aux_enabled}};
}

inline json train_to_json(const TrainConfig& c) {
  json j{{"batch_size", c.batch_size},
         {"epochs", c.epochs},
         {"lr", c.lr},
         {"beta1", c.beta1},
         {"beta2", c.beta2},
         {"adam_eps", c.adam_eps},
         {"weight_decay", c.weight_decay},
         {"seed", c.seed},
         {"phased", c.phased},
         {"phase_split", c.phase_split},
         {"unfreeze_ramp", c.unfreeze_ramp},
         {"micro_batch", c.micro_batch},
         {"eval_batch", c.eval_batch},
         {"n_test", c.n_test},
         {"val_fraction", c.val_fraction},
         {"hetero_epoch_ratio", c.hetero_epoch_ratio},
         {"ablation", c.ablation}};
  j["phases"] = c.phases ? json(*c.phases) : json(nullptr);
  return j;
}

/// train.ablation is a label; the resolved flags live under model.ablations.
inline json to_json(const RunConfig& c) {
  return json{{"sim", sim_to_json(c.sim)},
              {"model", model_to_json(c.model)},
              {"loss", loss_to_json(c.loss)},
              {"train", train_to_json(c.train)}};
}

/// Canonical text: object keys sorted, no whitespace.
inline std::string canonical(const RunConfig& c) { return to_json(c).dump(); }
inline std::string config_hash(const RunConfig& c) { return sha256_hex(canonical(c)); }

inline void apply_model_json(ModelConfig& c, const json& j) {
  using namespace detail;
  read_object(j, "model",
              {{"n_bins", [&](const json& v, const std::string& k) { c.n_bins = json_count(v, k); }},
               {"split", [&](const json& v, const std::string& k) { c.split = json_count(v, k); }},
               {"hidden", [&](const json& v, const std::string& k) { c.hidden = json_count(v, k); }},
               {"conv_blocks", [&](const json& v, const std::string& k) { c.conv_blocks = json_count(v, k); }},
               {"kernel", [&](const json& v, const std::string& k) { c.kernel = json_count(v, k); }},
               {"patch", [&](const json& v, const std::string& k) { c.patch = json_count(v, k); }},
               {"layers", [&](const json& v, const std::string& k) { c.layers = json_count(v, k); }},
               {"heads", [&](const json& v, const std::string& k) { c.heads = json_count(v, k); }},
               {"ff_mult", [&](const json& v, const std::string& k) { c.ff_mult = json_count(v, k); }},
               {"head_hidden", [&](const json& v, const std::string& k) { c.head_hidden = json_count(v, k); }},
               {"critic_hidden", [&](const json& v, const std::string& k) { c.critic_hidden = json_counts(v, k); }},
               {"gate_hidden", [&](const json& v, const std::string& k) { c.gate_hidden = json_count(v, k); }},
               {"gate_dropout", [&](const json& v, const std::string& k) { c.gate_dropout = json_num(v, k); }},
               {"reindex_positions",
                [&](const json& v, const std::string& k) { c.reindex_positions = json_bool(v, k); }},
               {"exact_gelu", [&](const json& v, const std::string& k) { c.exact_gelu = json_bool(v, k); }},
               {"ablations", [&](const json& v, const std::string& k) {
                  auto flag = [](bool& dst) { return [&dst](const json& x, const std::string& n) { dst = json_bool(x, n); }; };
                  Ablations& a = c.ablations;
                  read_object(v, k,
                              {{"no_correction", flag(a.no_correction)},
                               {"no_quality_gating", flag(a.no_quality_gating)},
                               {"no_decider_features", flag(a.no_decider_features)},
                               {"no_decider_fusion", flag(a.no_decider_fusion)},
                               {"no_gating_dropout", flag(a.no_gating_dropout)},
                               {"uniform_gating", flag(a.uniform_gating)},
                               {"mean_pooling", flag(a.mean_pooling)},
                               {"heteroscedastic", flag(a.heteroscedastic)},
                               {"no_critics", flag(a.no_critics)}});
                }}});
}

inline void apply_loss_json(LossConfig& c, const json& j) {
  using namespace detail;
  auto num = [](double& dst) { return [&dst](const json& v, const std::string& k) { dst = json_num(v, k); }; };
  read_object(j, "loss",
              {{"w_primary", num(c.w_primary)},
               {"w_aux", num(c.w_aux)},
               {"w_quality", num(c.w_quality)},
               {"w_correction", num(c.w_correction)},
               {"w_penalty", num(c.w_penalty)},
               {"kl_weight", num(c.kl_weight)},
               {"kappa", num(c.kappa)},
               {"damping", num(c.damping)},
               {"gamma", num(c.gamma)},
               {"eps", num(c.eps)},
               {"huber_delta", num(c.huber_delta)},
               {"aux_enabled", [&](const json& v, const std::string& k) { c.aux_enabled = json_bool(v, k); }}});
}

inline void apply_train_json(TrainConfig& c, const json& j) {
  using namespace detail;
  auto count = [](std::size_t& dst) { return [&dst](const json& v, const std::string& k) { dst = json_count(v, k); }; };
  auto num = [](double& dst) { return [&dst](const json& v, const std::string& k) { dst = json_num(v, k); }; };
  read_object(
      j, "train",
      {{"batch_size", count(c.batch_size)},
       {"epochs", count(c.epochs)},
       {"lr", num(c.lr)},
       {"beta1", num(c.beta1)},
       {"beta2", num(c.beta2)},
       {"adam_eps", num(c.adam_eps)},
       {"weight_decay", num(c.weight_decay)},
       {"seed", [&](const json& v, const std::string& k) { c.seed = json_count(v, k); }},
       {"phased", [&](const json& v, const std::string& k) { c.phased = json_bool(v, k); }},
       {"phase_split",
        [&](const json& v, const std::string& k) {
          const auto p = json_counts(v, k);
          if (p.size() != 2) throw ConfigError(k + " must be [N1, N2]");
          c.phase_split = {p[0], p[1]};
        }},
       {"phases",
        [&](const json& v, const std::string& k) {
          if (v.is_null()) {
            c.phases.reset();
            return;
          }
          const auto p = json_counts(v, k);
          if (p.size() != 3) throw ConfigError(k + " must be [N1, N2, N3]");
          c.phases = std::array<std::size_t, 3>{p[0], p[1], p[2]};
        }},
       {"unfreeze_ramp", count(c.unfreeze_ramp)},
       {"micro_batch", count(c.micro_batch)},
       {"eval_batch", count(c.eval_batch)},
       {"n_test", count(c.n_test)},
       {"val_fraction", num(c.val_fraction)},
       {"hetero_epoch_ratio", num(c.hetero_epoch_ratio)},
       {"ablation", [&](const json& v, const std::string& k) { c.ablation = json_str(v, k); }}});
}


/// Overlays `j` onto `base`. Sections and keys are optional; unknown ones
/// are rejected.
inline RunConfig run_config_from_json(const json& j, RunConfig base = {}) {
  using namespace detail;
  read_object(j, "config",
              {{"sim", [&](const json& v, const std::string&) { base.sim = sim_from_json(v); }},
               {"model", [&](const json& v, const std::string&) { apply_model_json(base.model, v); }},
               {"loss", [&](const json& v, const std::string&) { apply_loss_json(base.loss, v); }},
               {"train", [&](const json& v, const std::string&) { apply_train_json(base.train, v); }}});
  base.validate();
  return base;
}

inline RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("malformed config " + path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

// ---------------------------------------------------------------------------
// Ablations

struct AblationInfo {
  std::string name;
  std::string label;  // table row text
  std::function<void(RunConfig&)> apply;
};

inline const std::vector<AblationInfo>& ablation_registry() {
  static const std::vector<AblationInfo> reg = [] {
    auto flag = [](bool Ablations::*f) { return [f](RunConfig& c) { c.model.ablations.*f = true; }; };
    auto split = [](std::size_t n1, std::size_t n2) {
      return [n1, n2](RunConfig& c) {
        c.train.phased = true;
        c.train.phase_split = {n1, n2};
        c.train.phases.reset();
      };
    };
    return std::vector<AblationInfo>{
        {"full", "Full model (kappa=2)", [](RunConfig&) {}},
        {"damping_0.5", "Damping factor d=0.5", [](RunConfig& c) { c.loss.damping = 0.5; }},
        {"damping_1.0", "Damping factor d=1.0", [](RunConfig& c) { c.loss.damping = 1.0; }},
        {"critic_quality_4", "Critic quality-loss lambda_cq=4", [](RunConfig& c) { c.loss.w_quality = 4.0; }},
        {"phased_1_6", "Phased training (1 / 6)", split(1, 6)},
        {"phased_5_15", "Phased training (5 / 15)", split(5, 15)},
        {"phased_3_8", "Phased training (3 / 8)", split(3, 8)},
        {"phased_10_10", "Phased training (10 / 10)", split(10, 10)},
        {"no_correction", "No evidential correction", flag(&Ablations::no_correction)},
        {"no_quality_gating", "No quality gating", flag(&Ablations::no_quality_gating)},
        {"no_decider_features", "No decider features", flag(&Ablations::no_decider_features)},
        {"no_decider_fusion", "No decider fusion", flag(&Ablations::no_decider_fusion)},
        {"no_gating_dropout", "No gating dropout", flag(&Ablations::no_gating_dropout)},
        {"no_phased_training", "No phased training", [](RunConfig& c) { c.train.phased = false; }},
        {"mean_pooling", "Mean pooling", flag(&Ablations::mean_pooling)},
        {"heteroscedastic", "Heteroscedastic experts only",
         [](RunConfig& c) {
           c.model.ablations.heteroscedastic = true;
           c.train.phased = false;
         }},
        {"uniform_gating", "Uniform gating", flag(&Ablations::uniform_gating)},
        {"no_aux_mae", "No auxiliary MAE", [](RunConfig& c) { c.loss.aux_enabled = false; }},
        {"kappa_8", "Model trained with (kappa=8)", [](RunConfig& c) { c.loss.kappa = 8.0; }},
        {"no_critics", "No critics", flag(&Ablations::no_critics)},
    };
  }();
  return reg;
}

inline std::string ablation_names() {
  std::string s;
  for (const auto& a : ablation_registry()) s += (s.empty() ? "" : ", ") + a.name;
  return s;
}

inline const AblationInfo* find_ablation(const std::string& name) {
  for (const auto& a : ablation_registry())
    if (a.name == name) return &a;
  return nullptr;
}

/// Applies a '+'-joined list of registry names, e.g. "kappa_8+mean_pooling".
/// Every entry only sets values, so applying a name twice is harmless.
inline void apply_ablation(RunConfig& c, const std::string& name) {
  std::stringstream ss(name);
  std::string part;
  bool any = false;
  while (std::getline(ss, part, '+')) {
    const AblationInfo* a = find_ablation(part);
    if (!a) throw ConfigError("unknown ablation '" + part + "'; valid: " + ablation_names());
    a->apply(c);
    any = true;
  }
  if (!any) throw ConfigError("empty ablation name; valid: " + ablation_names());
  c.train.ablation = name;
}

struct SuiteRow {
  std::string label;
  std::string ablation;
};

/// Row order follows the published tables.
inline std::vector<SuiteRow> suite_rows(const std::string& suite) {
  auto label = [](const std::string& n) { return find_ablation(n)->label; };
  if (suite == "table1") {
    std::vector<SuiteRow> rows;
    for (const char* n : {"damping_0.5", "damping_1.0", "critic_quality_4", "phased_1_6", "phased_5_15", "phased_3_8",
                          "phased_10_10", "no_correction", "no_quality_gating", "no_decider_features",
                          "no_decider_fusion", "no_gating_dropout", "no_phased_training", "mean_pooling",
                          "heteroscedastic", "full"})
      rows.push_back({label(n), n});
    return rows;
  }
  if (suite == "appendixD") {
    std::vector<SuiteRow> rows;
    for (const char* n : {"critic_quality_4", "no_correction", "no_quality_gating", "no_decider_features",
                          "no_decider_fusion", "uniform_gating", "no_gating_dropout", "no_phased_training",
                          "mean_pooling", "no_aux_mae"})
      rows.push_back({label(n), std::string("kappa_8+") + n});
    rows.push_back({label("kappa_8"), "kappa_8"});
    rows.push_back({label("full"), "full"});
    return rows;
  }
  throw ConfigError("unknown suite '" + suite + "'; valid: table1, appendixD");
}

}  // namespace emoe
