#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "emoe/checkpoint.hpp"
#include "emoe/trainer.hpp"

using namespace emoe;

namespace {

RunConfig tiny_run(std::size_t n_bins = 32) {
  RunConfig c;
  c.sim.n_bins = n_bins;
  c.sim.bin_width_ns = 0.2;
  c.model.n_bins = n_bins;
  c.model.hidden = 8;
  c.model.conv_blocks = 1;
  c.model.layers = 1;
  c.model.heads = 2;
  c.model.ff_mult = 2;
  c.model.head_hidden = 4;
  c.model.critic_hidden = {6, 4};
  c.model.gate_hidden = 5;
  c.train.batch_size = 16;
  c.train.epochs = 3;
  c.train.phases = std::array<std::size_t, 3>{1, 1, 1};
  c.train.n_test = 10;
  return c;
}

Dataset tiny_data(const RunConfig& c, std::size_t n) { return to_dataset(c.sim, generate_dataset(c.sim, n)); }

}  // namespace

TEST(Schedule, ExplicitPhasesTransitions) {
  RunConfig c;
  c.train.phases = std::array<std::size_t, 3>{3, 8, 59};
  const PhaseSchedule s = resolve_schedule(c);
  EXPECT_EQ(s.total(), 70u);
  EXPECT_EQ(s.phase(2), 1);
  EXPECT_EQ(s.phase(3), 2);
  EXPECT_EQ(s.phase(10), 2);
  EXPECT_EQ(s.phase(11), 3);
  EXPECT_EQ(s.objective(0), Objective::aux_only);
  EXPECT_EQ(s.objective(3), Objective::full);
  EXPECT_TRUE(s.trainable(0).expert);
  EXPECT_FALSE(s.trainable(0).critic || s.trainable(0).decider);
  EXPECT_FALSE(s.trainable(3).expert);
  EXPECT_TRUE(s.trainable(3).critic && s.trainable(3).decider);
}

TEST(Schedule, ScaledSplitAndRamp) {
  RunConfig c;
  EXPECT_EQ(resolve_schedule(c).n1, 3u);
  EXPECT_EQ(resolve_schedule(c).n2, 8u);
  EXPECT_EQ(resolve_schedule(c).n3, 59u);
  c.train.epochs = 6;
  PhaseSchedule s = resolve_schedule(c);
  EXPECT_EQ(s.n1, 0u);
  EXPECT_EQ(s.n2, 1u);
  EXPECT_EQ(s.n3, 5u);
  c.train.epochs = 140;
  c.train.phase_split = {10, 10};
  s = resolve_schedule(c);
  EXPECT_EQ(s.n1, 20u);
  EXPECT_EQ(s.n2, 20u);
  EXPECT_DOUBLE_EQ(s.expert_lr_scale(39), 1.0);
  EXPECT_DOUBLE_EQ(s.expert_lr_scale(40), 0.2);
  EXPECT_DOUBLE_EQ(s.expert_lr_scale(43), 0.8);
  EXPECT_DOUBLE_EQ(s.expert_lr_scale(44), 1.0);
}

TEST(Schedule, Errors) {
  RunConfig c;
  c.train.phases = std::array<std::size_t, 3>{3, 8, 60};
  EXPECT_THROW(resolve_schedule(c), ConfigError);
  c.train.phases.reset();
  c.train.phase_split = {40, 30};
  EXPECT_THROW(resolve_schedule(c), ConfigError);
}

TEST(Schedule, JointAndHeteroscedastic) {
  RunConfig c;
  apply_ablation(c, "no_phased_training");
  PhaseSchedule s = resolve_schedule(c);
  EXPECT_EQ(s.phase(0), 0);
  EXPECT_TRUE(s.trainable(0).expert && s.trainable(0).critic);
  EXPECT_EQ(s.objective(0), Objective::full);
  RunConfig h;
  apply_ablation(h, "heteroscedastic");
  EXPECT_EQ(effective_epochs(h), 500u);
  EXPECT_EQ(resolve_schedule(h).total(), 500u);
  EXPECT_EQ(effective_epochs(RunConfig{}), 70u);
}

TEST(Optimizer, Examples) {
  ParamStore ps(1);
  ps.add("w", ParamGroup::expert, Tensor({2}, std::vector<double>{1.0, -2.0}));
  const std::vector<Tensor> zero{Tensor::zeros({2})};
  AdamW still(ps, 0.9, 0.999, 1e-8, 0.0);
  still.step(ps, zero, {1e-3, 1e-3, 1e-3});
  EXPECT_EQ(ps[0].value.to_vector(), (std::vector<double>{1.0, -2.0}));

  AdamW frozen(ps, 0.9, 0.999, 1e-8, 1e-4);
  frozen.step(ps, {Tensor({2}, std::vector<double>{5.0, 5.0})}, {0.0, 1.0, 1.0});
  EXPECT_EQ(ps[0].value.to_vector(), (std::vector<double>{1.0, -2.0}));

  ParamStore sq(1);
  sq.add("theta", ParamGroup::critic, Tensor({1}, std::vector<double>{1.0}));
  AdamW opt(sq, 0.9, 0.999, 1e-8, 1e-4);
  opt.step(sq, {Tensor({1}, std::vector<double>{2.0})}, {0, 1e-2, 0});
  const double th = sq[0].value[0];
  EXPECT_LT(th * th, 1.0);
  // first bias-corrected step is g/(|g|+eps) plus decay
  EXPECT_NEAR(th, 1.0 - 1e-2 * (2.0 / (2.0 + 1e-8) + 1e-4), 1e-15);
}

TEST(Optimizer, NonFiniteGradientNamesParameter) {
  ParamStore ps(1);
  ps.add("decider.gate.fc0.w", ParamGroup::decider, Tensor::zeros({3}));
  AdamW opt(ps, 0.9, 0.999, 1e-8, 0.0);
  try {
    opt.step(ps, {Tensor({3}, std::vector<double>{0.0, NAN, 0.0})}, {1, 1, 1});
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("decider.gate.fc0.w"), std::string::npos);
  }
}

TEST(Metrics, HandExamples) {
  const std::vector<double> truth{1, 10, 2, 20, 3, 30};
  Metrics m = evaluate_metrics(truth, truth);
  EXPECT_EQ(m.d_nrmse, 0.0);
  EXPECT_EQ(m.d_absrel, 0.0);
  EXPECT_EQ(m.d_rmselog, 0.0);
  EXPECT_EQ(m.l_nrmse, 0.0);
  EXPECT_TRUE(std::isnan(m.q_depth));

  std::vector<double> shifted = truth;
  for (std::size_t i = 0; i < 6; i += 2) shifted[i] += 0.1;
  EXPECT_NEAR(evaluate_metrics(shifted, truth).d_nrmse, 0.05, 1e-12);

  std::vector<double> scaled = truth;
  for (std::size_t i = 0; i < 6; i += 2) scaled[i] *= 1.1;
  EXPECT_NEAR(evaluate_metrics(scaled, truth).d_absrel, 0.1, 1e-15);

  const std::vector<double> q{0, 0, 0.5, 0.7, 0, 0, 0.7, 0.9, 0, 0, 0.9, 0.8};
  m = evaluate_metrics(truth, truth, q);
  EXPECT_NEAR(m.q_depth, 0.7, 1e-15);
  EXPECT_NEAR(m.q_life, 0.8, 1e-15);
}

TEST(Metrics, Errors) {
  const std::vector<double> flat{1, 10, 1, 20};
  EXPECT_THROW(evaluate_metrics(flat, flat), DomainError);
  const std::vector<double> truth{1, 10, 2, 20};
  const std::vector<double> neg{-1, 10, 2, 20};
  EXPECT_THROW(evaluate_metrics(neg, truth), DomainError);
  EXPECT_THROW(evaluate_metrics({1, 2}, truth), ShapeError);
}

TEST(Metrics, MatchesDirectReimplementation) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> depth(0.5, 2.0), life(0.2, 1.5), noise(0.9, 1.1);
  const std::size_t n = 100;
  std::vector<double> truth, pred;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = depth(rng), l = life(rng);
    truth.insert(truth.end(), {d, l});
    pred.insert(pred.end(), {d * noise(rng), l * noise(rng)});
  }
  const Metrics m = evaluate_metrics(pred, truth);
  // two-pass reference with long double accumulation
  auto column = [&](const std::vector<double>& v, std::size_t c) {
    std::vector<long double> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(v[2 * i + c]);
    return out;
  };
  for (std::size_t c = 0; c < 2; ++c) {
    const auto y = column(truth, c), p = column(pred, c);
    long double se = 0;
    for (std::size_t i = 0; i < n; ++i) se += (p[i] - y[i]) * (p[i] - y[i]);
    const long double range = *std::max_element(y.begin(), y.end()) - *std::min_element(y.begin(), y.end());
    const double ref = static_cast<double>(std::sqrt(se / n) / range);
    EXPECT_NEAR(c == 0 ? m.d_nrmse : m.l_nrmse, ref, 1e-12);
  }
  const auto y = column(truth, 0), p = column(pred, 0);
  long double rel = 0, lg = 0;
  for (std::size_t i = 0; i < n; ++i) {
    rel += std::fabs(p[i] - y[i]) / y[i];
    lg += std::pow(std::log(p[i] / y[i]), 2.0L);
  }
  EXPECT_NEAR(m.d_absrel, static_cast<double>(rel / n), 1e-12);
  EXPECT_NEAR(m.d_rmselog, static_cast<double>(std::sqrt(lg / n)), 1e-12);
}

TEST(Split, DefaultSizes) {
  const Split s = split_dataset(4100, TrainConfig{});
  EXPECT_EQ(s.train.size(), 3200u);
  EXPECT_EQ(s.val.size(), 800u);
  EXPECT_EQ(s.test.size(), 100u);
  EXPECT_EQ(s.test.front(), 4000u);
  const Split m = split_dataset(500, TrainConfig{});
  EXPECT_EQ(m.test.size(), 100u);
  EXPECT_EQ(m.train.size(), 320u);
  EXPECT_THROW(split_dataset(0, TrainConfig{}), ConfigError);
}

TEST(Training, MicroBatchesMatchFullBatch) {
  RunConfig c = tiny_run();
  c.model.ablations.no_gating_dropout = true;
  const Dataset d = tiny_data(c, 8);
  Model m = Model::create(c.model, 3);
  std::vector<std::size_t> idx{0, 1, 2, 3, 4, 5, 6, 7};
  const Batch b = make_batch(d, TargetCodec::from(c.sim), idx.data(), idx.size());
  Rng r1(1), r2(1);
  LossBreakdown full, chunked;
  const auto g1 = batch_gradients(m, b, c.loss, GroupMask::all(), Objective::full, 0, r1, full);
  const auto g2 = batch_gradients(m, b, c.loss, GroupMask::all(), Objective::full, 3, r2, chunked);
  EXPECT_NEAR(full.total, chunked.total, 1e-12);
  ASSERT_EQ(g1.size(), g2.size());
  for (std::size_t i = 0; i < g1.size(); ++i)
    for (std::size_t j = 0; j < g1[i].size(); ++j) EXPECT_NEAR(g1[i][j], g2[i][j], 1e-11) << m.params()[i].name;
}

TEST(Training, FreezingContracts) {
  const RunConfig c = tiny_run();
  const Dataset d = tiny_data(c, 60);
  const TrainResult r = train_model(d, c, split_dataset(d.n_samples, c.train));
  ASSERT_EQ(r.history.size(), 3u);
  EXPECT_EQ(r.history[0].phase, 1);
  EXPECT_EQ(r.history[1].phase, 2);
  EXPECT_EQ(r.history[2].phase, 3);
  EXPECT_EQ(r.history[0].hashes.critic, r.initial_hashes.critic);
  EXPECT_EQ(r.history[0].hashes.decider, r.initial_hashes.decider);
  EXPECT_NE(r.history[0].hashes.expert, r.initial_hashes.expert);
  EXPECT_EQ(r.history[1].hashes.expert, r.history[0].hashes.expert);
  EXPECT_NE(r.history[1].hashes.critic, r.history[0].hashes.critic);
  EXPECT_NE(r.history[2].hashes.expert, r.history[1].hashes.expert);
}

TEST(Training, Deterministic) {
  const RunConfig c = tiny_run();
  const Dataset d = tiny_data(c, 60);
  const Split s = split_dataset(d.n_samples, c.train);
  const TrainResult a = train_model(d, c, s), b = train_model(d, c, s);
  for (std::size_t e = 0; e < a.history.size(); ++e) {
    EXPECT_EQ(to_json(a.history[e]).dump(), to_json(b.history[e]).dump());
  }
}

TEST(Training, RejectsEmptySplits) {
  const RunConfig c = tiny_run();
  const Dataset d = tiny_data(c, 10);
  Split s = split_dataset(d.n_samples, c.train);
  s.val.clear();
  EXPECT_THROW(train_model(d, c, s), ConfigError);
}

TEST(Checkpoint, RoundTripIsByteIdentical) {
  const RunConfig c = tiny_run();
  const Model m = Model::create(c.model, 11);
  const fs::path dir = fs::temp_directory_path() / "emoe_ckpt_test";
  fs::create_directories(dir);
  save_checkpoint(dir / "a.ckpt", c, m.params(), 3, 17, 0.25);
  const Checkpoint loaded = load_checkpoint(dir / "a.ckpt");
  EXPECT_EQ(loaded.phase, 3);
  EXPECT_EQ(loaded.epoch, 17u);
  EXPECT_EQ(loaded.val_loss, 0.25);
  EXPECT_EQ(config_hash(loaded.config), config_hash(c));
  save_checkpoint(dir / "b.ckpt", loaded);
  EXPECT_EQ(checkpoint_bytes(c, m.params(), 3, 17, 0.25),
            checkpoint_bytes(loaded.config, loaded.model.params(), 3, 17, 0.25));
  std::ifstream a(dir / "a.ckpt", std::ios::binary), b(dir / "b.ckpt", std::ios::binary);
  EXPECT_EQ(std::string(std::istreambuf_iterator<char>(a), {}), std::string(std::istreambuf_iterator<char>(b), {}));
  fs::remove_all(dir);
}

TEST(Checkpoint, ReloadReproducesValidationMetrics) {
  const RunConfig c = tiny_run();
  const Dataset d = tiny_data(c, 60);
  const Split s = split_dataset(d.n_samples, c.train);
  const TrainResult r = train_model(d, c, s);
  const Predictions before = predict(r.model, d, s.val, c.loss);
  const auto bytes = checkpoint_bytes(r.config, r.model.params(), r.best_phase, r.best_epoch, r.best_val_loss);
  const Checkpoint back = parse_checkpoint(bytes, "memory");
  const Predictions after = predict(back.model, d, s.val, back.config.loss);
  EXPECT_EQ(before.loss, after.loss);
  EXPECT_EQ(before.physical, after.physical);
  EXPECT_EQ(before.loss, r.best_val_loss);
}

TEST(Checkpoint, CorruptFiles) {
  const RunConfig c = tiny_run();
  const Model m = Model::create(c.model, 11);
  const auto bytes = checkpoint_bytes(c, m.params(), 1, 0, 0.0);
  for (std::size_t cut : {std::size_t{0}, std::size_t{5}, std::size_t{20}, bytes.size() / 2, bytes.size() - 1}) {
    const std::vector<char> t(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
    EXPECT_THROW(parse_checkpoint(t, "cut"), IoError) << cut;
  }
  std::vector<char> bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(parse_checkpoint(bad, "magic"), IoError);
  bad = bytes;
  bad[8] = 9;
  EXPECT_THROW(parse_checkpoint(bad, "version"), IoError);
  EXPECT_THROW(load_checkpoint("/nonexistent/x.ckpt"), IoError);
}

TEST(Checkpoint, HashMismatchWarns) {
  const RunConfig c = tiny_run();
  const Model m = Model::create(c.model, 11);
  auto bytes = checkpoint_bytes(c, m.params(), 1, 0, 0.0);
  const std::string h = config_hash(c);
  auto it = std::search(bytes.begin(), bytes.end(), h.begin(), h.end());
  ASSERT_NE(it, bytes.end());
  *it = *it == '0' ? '1' : '0';
  std::string warning;
  const Checkpoint back = parse_checkpoint(bytes, "x", [&](const std::string& w) { warning = w; });
  EXPECT_NE(warning.find("hash mismatch"), std::string::npos);
  EXPECT_EQ(back.model.params()[0].value.to_vector(), m.params()[0].value.to_vector());
}

TEST(Config, HashStableUnderKeyReordering) {
  const json a = json::parse(R"({"train": {"lr": 0.002, "epochs": 5}, "loss": {"kappa": 8}})");
  const json b = json::parse(R"({"loss": {"kappa": 8}, "train": {"epochs": 5, "lr": 0.002}})");
  const RunConfig ca = run_config_from_json(a), cb = run_config_from_json(b);
  EXPECT_EQ(config_hash(ca), config_hash(cb));
  EXPECT_NE(config_hash(ca), config_hash(RunConfig{}));
  EXPECT_EQ(config_hash(run_config_from_json(to_json(ca))), config_hash(ca));
}

TEST(Config, UnknownKeysRejected) {
  EXPECT_THROW(run_config_from_json(json::parse(R"({"trian": {}})")), ConfigError);
  EXPECT_THROW(run_config_from_json(json::parse(R"({"train": {"learning_rate": 1}})")), ConfigError);
  EXPECT_THROW(run_config_from_json(json::parse(R"({"model": {"ablations": {"no_crtics": true}}})")), ConfigError);
  EXPECT_THROW(run_config_from_json(json::parse(R"({"train": {"epochs": 0}})")), ConfigError);
}

TEST(Ablations, RegistryAndSuites) {
  EXPECT_EQ(suite_rows("table1").size(), 16u);
  EXPECT_EQ(suite_rows("appendixD").size(), 12u);
  EXPECT_THROW(suite_rows("table2"), ConfigError);
  RunConfig c;
  try {
    apply_ablation(c, "no_quality_gate");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("no_quality_gating"), std::string::npos);
  }
  apply_ablation(c, "no_quality_gating");
  EXPECT_EQ(c.model.gate_input_length(), 68u);
  RunConfig twice;
  apply_ablation(twice, "kappa_8+heteroscedastic");
  const std::string once = config_hash(twice);
  apply_ablation(twice, "kappa_8+heteroscedastic");
  EXPECT_EQ(config_hash(twice), once);
  for (const auto& row : suite_rows("table1")) {
    RunConfig r;
    EXPECT_NO_THROW(apply_ablation(r, row.ablation)) << row.label;
    EXPECT_NO_THROW(r.validate()) << row.label;
  }
}
