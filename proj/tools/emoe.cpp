// emoe: simulate, train, eval, ablate.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "emoe/checkpoint.hpp"
#include "emoe/report.hpp"

using namespace emoe;

namespace {

enum Exit { kOk = 0, kFailure = 1, kUsage = 2, kIo = 3, kNumeric = 4 };

void log(const std::string& s) { std::cerr << s << '\n'; }

RunConfig base_config(const std::string& path) { return path.empty() ? RunConfig{} : load_run_config(path); }

/// EMOE_SEED replaces the seed from the config file; an explicit flag wins over both.
std::optional<std::uint64_t> env_seed() {
  const char* v = std::getenv("EMOE_SEED");
  if (!v || !*v) return std::nullopt;
  try {
    std::size_t used = 0;
    const unsigned long long s = std::stoull(v, &used);
    if (used != std::string(v).size()) throw std::invalid_argument(v);
    return s;
  } catch (const std::exception&) {
    throw ConfigError(std::string("EMOE_SEED is not an unsigned integer: ") + v);
  }
}

std::array<std::size_t, 3> parse_phases(const std::string& s) {
  std::array<std::size_t, 3> p{};
  std::stringstream ss(s);
  std::string part;
  std::size_t i = 0;
  while (std::getline(ss, part, ',')) {
    if (i == 3 || part.empty() || part.find_first_not_of("0123456789") != std::string::npos)
      throw ConfigError("--phases expects N1,N2,N3, got '" + s + "'");
    p[i++] = std::stoull(part);
  }
  if (i != 3) throw ConfigError("--phases expects N1,N2,N3, got '" + s + "'");
  return p;
}

struct SimulateArgs {
  std::string out, config;
  long long n = -1;
  std::optional<std::uint64_t> seed;
};

int cmd_simulate(const SimulateArgs& a) {
  if (a.n <= 0) throw ConfigError("--n must be a positive sample count");
  RunConfig c = base_config(a.config);
  if (auto s = env_seed()) c.sim.seed = *s;
  if (a.seed) c.sim.seed = *a.seed;
  c.sim.validate();
  const Dataset d = to_dataset(c.sim, generate_dataset(c.sim, static_cast<std::size_t>(a.n)));
  save_dataset(d, a.out);
  log("wrote " + std::to_string(d.n_samples) + " samples x " + std::to_string(d.n_bins) + " bins to " + a.out);
  return kOk;
}

struct TrainArgs {
  std::string data, config, out, phases, ablation;
};

int cmd_train(const TrainArgs& a) {
  RunConfig c = base_config(a.config);
  if (!a.ablation.empty()) apply_ablation(c, a.ablation);
  if (!a.phases.empty()) {
    c.train.phased = true;
    c.train.phases = parse_phases(a.phases);
  }
  if (auto s = env_seed()) c.train.seed = *s;
  const Dataset d = load_dataset(a.data);
  c.sim = d.sim;
  c.model.n_bins = d.n_bins;
  c.validate();
  resolve_schedule(c);
  log("config " + config_hash(c).substr(0, 16) + " ablation " + c.train.ablation);

  const fs::path history_path = a.out + ".history.jsonl";
  std::ofstream history(history_path, std::ios::trunc);
  if (!history) throw IoError("cannot open " + history_path.string() + " for writing");
  TrainHooks hooks;
  hooks.log = log;
  hooks.on_epoch = [&](const EpochLog& e, const Model&) {
    history << to_json(e).dump() << '\n';
    history.flush();
  };
  const Split split = split_dataset(d.n_samples, c.train);
  const TrainResult r = train_model(d, c, split, hooks);
  if (!history) throw IoError("write failed: " + history_path.string());
  save_checkpoint(a.out, r.config, r.model.params(), r.best_phase, r.best_epoch, r.best_val_loss);
  log("best epoch " + std::to_string(r.best_epoch) + " val loss " + fmt_num(r.best_val_loss) + "; wrote " + a.out);
  return kOk;
}

struct EvalArgs {
  std::string ckpt, data, report, plots;
};

int cmd_eval(const EvalArgs& a) {
  const Checkpoint ck = load_checkpoint(a.ckpt, log);
  const Dataset d = load_dataset(a.data);
  if (d.n_bins != ck.config.model.n_bins) {
    throw ConfigError("checkpoint expects " + std::to_string(ck.config.model.n_bins) + " bins, dataset " + a.data +
                      " has " + std::to_string(d.n_bins));
  }
  const Split split = split_dataset(d.n_samples, ck.config.train);
  const TargetCodec codec = TargetCodec::from(ck.config.sim);
  const Predictions p = predict(ck.model, d, split.test, ck.config.loss, ck.config.train.eval_batch, &codec);
  const Metrics m = evaluate(p);
  write_text(a.report, eval_csv(p, m));
  log("D.NRMSE " + fmt_num(m.d_nrmse) + " L.NRMSE " + fmt_num(m.l_nrmse) + " on " + std::to_string(p.index.size()) +
      " test samples");
  if (!a.plots.empty()) {
    const auto files = write_plots(a.plots, p, ck.config.model);
    log("wrote " + std::to_string(files.size()) + " plots to " + a.plots);
  }
  return kOk;
}

struct AblateArgs {
  std::string data, suite, out, config;
  std::size_t seeds = 3;
};

int cmd_ablate(const AblateArgs& a) {
  RunConfig c = base_config(a.config);
  if (auto s = env_seed()) c.train.seed = *s;
  suite_rows(a.suite);
  const Dataset d = load_dataset(a.data);
  c.sim = d.sim;
  c.model.n_bins = d.n_bins;
  c.validate();
  std::error_code ec;
  fs::create_directories(a.out, ec);
  if (ec) throw IoError("cannot create " + a.out + ": " + ec.message());
  SuiteHooks hooks;
  hooks.log = log;
  const auto rows = run_suite(d, c, a.suite, a.seeds, hooks);
  const fs::path path = fs::path(a.out) / (a.suite + ".csv");
  write_text(path, suite_csv(rows));
  log("wrote " + std::to_string(rows.size()) + " rows to " + path.string());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Evidence-guided mixture of experts for fluorescence LiDAR"};
  app.require_subcommand(1);

  SimulateArgs sa;
  auto* sim = app.add_subcommand("simulate", "Generate a synthetic dataset");
  sim->add_option("--out", sa.out, "Output directory")->required();
  sim->add_option("--n", sa.n, "Number of samples")->required();
  sim->add_option("--seed", sa.seed, "Simulator seed");
  sim->add_option("--config", sa.config, "Run config JSON (sim section)");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a model");
  train->add_option("--data", ta.data, "Dataset directory")->required();
  train->add_option("--config", ta.config, "Run config JSON");
  train->add_option("--out", ta.out, "Checkpoint path; history goes to <out>.history.jsonl")->required();
  train->add_option("--phases", ta.phases, "Explicit schedule N1,N2,N3");
  train->add_option("--ablation", ta.ablation, "Ablation name, '+'-joined for combinations");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
  eval->add_option("--ckpt", ea.ckpt, "Checkpoint file")->required();
  eval->add_option("--data", ea.data, "Dataset directory")->required();
  eval->add_option("--report", ea.report, "Metrics CSV")->required();
  eval->add_option("--plots", ea.plots, "Directory for SVG plots");

  AblateArgs aa;
  auto* ablate = app.add_subcommand("ablate", "Run an ablation suite");
  ablate->add_option("--data", aa.data, "Dataset directory")->required();
  ablate->add_option("--suite", aa.suite, "table1 or appendixD")->required();
  ablate->add_option("--seeds", aa.seeds, "Seeds per configuration")->check(CLI::PositiveNumber);
  ablate->add_option("--out", aa.out, "Output directory")->required();
  ablate->add_option("--config", aa.config, "Run config JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*sim) return cmd_simulate(sa);
    if (*train) return cmd_train(ta);
    if (*eval) return cmd_eval(ea);
    if (*ablate) return cmd_ablate(aa);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kIo;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kNumeric;
  } catch (const DomainError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kUsage;
}
