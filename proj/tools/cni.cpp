// Command-line front end: train/attack/transfer/blackbox/sweep/report.
#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <json.hpp>

#include "cni/attacks.hpp"
#include "cni/config.hpp"
#include "cni/dataset.hpp"
#include "cni/report.hpp"
#include "cni/sweep.hpp"
#include "cni/train.hpp"

namespace fs = std::filesystem;
using namespace cni;

namespace {

// Shared flag overrides; only values the user actually passed are applied.
struct Overrides {
  std::string config_path;
  std::uint64_t seed = 0;
  std::string defense;
  int rank = 0;
  double epsilon = 0.0;  // input units
  int k = 0;
  std::string out = "out";
  bool timing = false;

  CLI::Option* seed_opt = nullptr;
  CLI::Option* defense_opt = nullptr;
  CLI::Option* rank_opt = nullptr;
  CLI::Option* epsilon_opt = nullptr;
  CLI::Option* k_opt = nullptr;
};

void add_common_flags(CLI::App* cmd, Overrides& ov) {
  cmd->add_option("--config", ov.config_path, "JSON run configuration file");
  ov.seed_opt = cmd->add_option("--seed", ov.seed, "run seed");
  ov.defense_opt = cmd->add_option(
      "--defense", ov.defense, "defense variant: none|adv-train|pni-w|cni-w|cni-a|cni-w+a");
  ov.rank_opt = cmd->add_option("--rank", ov.rank, "noise covariance rank for cni defenses");
  ov.epsilon_opt = cmd->add_option("--epsilon", ov.epsilon, "attack radius in input units");
  ov.k_opt = cmd->add_option("--k", ov.k, "attack iterations");
  cmd->add_option("--out", ov.out, "output directory");
  cmd->add_flag("--timing", ov.timing,
                "embed measured wall time in the CSV (off keeps output byte-reproducible)");
}

void apply_overrides_to(RunConfig& cfg, const Overrides& ov) {
  if (ov.seed_opt && ov.seed_opt->count() > 0) cfg.train.seed = ov.seed;
  if (ov.defense_opt && ov.defense_opt->count() > 0) {
    cfg.model.defense = defense_from_string(ov.defense);
  }
  if (ov.rank_opt && ov.rank_opt->count() > 0) cfg.model.rank = ov.rank;
  if (ov.epsilon_opt && ov.epsilon_opt->count() > 0) cfg.train.attack.epsilon = ov.epsilon;
  if (ov.k_opt && ov.k_opt->count() > 0) cfg.train.attack.k = ov.k;
}

RunConfig effective_config(const Overrides& ov) {
  RunConfig cfg;
  if (!ov.config_path.empty()) cfg = load_config(ov.config_path);
  apply_overrides_to(cfg, ov);
  return cfg;
}

// Fold an optional config file's non-model sections over a checkpoint config.
RunConfig checkpoint_config(const Checkpoint& ck, const Overrides& ov) {
  RunConfig cfg = ck.config;
  if (!ov.config_path.empty()) {
    RunConfig file = load_config(ov.config_path);
    cfg.data = file.data;
    cfg.eval = file.eval;
    cfg.train.attack = file.train.attack;
  }
  apply_overrides_to(cfg, ov);
  cfg.train.attack.validate();
  return cfg;
}

void zero_wall(RunReport& report) {
  for (ReportRow& r : report.rows) r.wall_s = 0.0;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

ReportRow eval_row(const Model& model, const RunConfig& cfg, const Dataset& test,
                   const std::string& config_id, const std::string& variable, double value) {
  RngStream eval_rng = RngStream::from_seed(cfg.train.seed).child("test-eval");
  EvalResult clean =
      evaluate(model, test, std::nullopt, cfg.eval.noise_draws, eval_rng, cfg.eval.batch_size);
  EvalResult adv = evaluate(model, test, cfg.train.attack, cfg.eval.noise_draws, eval_rng,
                            cfg.eval.batch_size);
  ReportRow row;
  row.config_id = config_id;
  row.variable = variable;
  row.value = value;
  row.seed_count = 1;
  row.clean_mean = clean.mean_accuracy;
  row.clean_std = clean.std_accuracy;
  row.adv_mean = adv.mean_accuracy;
  row.adv_std = adv.std_accuracy;
  return row;
}

std::string model_id(const RunConfig& cfg) {
  std::string id = to_string(cfg.model.defense);
  bool low_rank = cfg.model.defense == Defense::CniW || cfg.model.defense == Defense::CniA ||
                  cfg.model.defense == Defense::CniWA;
  if (low_rank) id += "-m" + std::to_string(cfg.model.rank);
  return id;
}

int cmd_train(const Overrides& ov) {
  RunConfig cfg = effective_config(ov);
  cfg.train.validate();
  fs::create_directories(ov.out);
  save_config(cfg, fs::path(ov.out) / "config.json");

  SweepDatasets data = build_datasets(cfg.data, cfg.train.seed);
  std::cerr << "[train] " << model_id(cfg) << " seed=" << cfg.train.seed
            << " train=" << data.train.size() << " val=" << data.val.size()
            << " test=" << data.test.size() << "\n";
  auto t0 = std::chrono::steady_clock::now();
  TrainedRun run = train_run(cfg, data.train, data.val);
  save_checkpoint(run.best, fs::path(ov.out) / "model.ckpt");
  write_metrics_csv(run.fit.metrics, fs::path(ov.out) / "metrics.csv");

  RunReport report;
  report.rows.push_back(eval_row(run.model, cfg, data.test, model_id(cfg), "epsilon",
                                 cfg.train.attack.epsilon * 255.0));
  report.rows[0].wall_s = seconds_since(t0);
  if (!ov.timing) zero_wall(report);
  emit_report(report, fs::path(ov.out) / "report.csv");
  render_report(report, std::cout);
  std::cerr << "[train] best epoch " << run.best.epoch << " val acc " << run.best.val_accuracy
            << "; wrote " << ov.out << "/model.ckpt (" << seconds_since(t0) << " s)\n";
  return 0;
}

int cmd_attack(const Overrides& ov, const std::string& model_path) {
  Checkpoint ck = load_checkpoint(model_path);
  RunConfig cfg = checkpoint_config(ck, ov);
  Model model = model_from_checkpoint(ck);

  fs::create_directories(ov.out);
  save_config(cfg, fs::path(ov.out) / "config.json");
  SweepDatasets data = build_datasets(cfg.data, cfg.train.seed);

  auto t0 = std::chrono::steady_clock::now();
  RunReport report;
  report.rows.push_back(eval_row(model, cfg, data.test, model_id(cfg), "epsilon",
                                 cfg.train.attack.epsilon * 255.0));
  report.rows[0].wall_s = seconds_since(t0);
  if (!ov.timing) zero_wall(report);
  emit_report(report, fs::path(ov.out) / "report.csv");
  render_report(report, std::cout);
  return 0;
}

int cmd_transfer(const Overrides& ov, const std::string& model_path,
                 const std::string& source_path) {
  Checkpoint target_ck = load_checkpoint(model_path);
  Checkpoint source_ck = load_checkpoint(source_path);
  RunConfig cfg = checkpoint_config(target_ck, ov);

  Model target = model_from_checkpoint(target_ck);
  Model source = model_from_checkpoint(source_ck);
  fs::create_directories(ov.out);
  save_config(cfg, fs::path(ov.out) / "config.json");
  SweepDatasets data = build_datasets(cfg.data, cfg.train.seed);

  auto t0 = std::chrono::steady_clock::now();
  RngStream rng = RngStream::from_seed(cfg.train.seed).child("transfer");
  AdversarialSet set =
      transfer_attack(source, cfg.train.attack, data.test, rng, cfg.eval.batch_size);
  save_adversarial_set(set, ov.out);

  RngStream eval_rng = RngStream::from_seed(cfg.train.seed).child("test-eval");
  EvalResult clean =
      evaluate_on(target, data.test, cfg.eval.noise_draws, eval_rng, cfg.eval.batch_size);
  EvalResult adv =
      evaluate_on(target, set.data, cfg.eval.noise_draws, eval_rng, cfg.eval.batch_size);
  ReportRow row;
  row.config_id = "transfer-" + model_id(cfg);
  row.variable = "transfer";
  row.value = cfg.train.attack.epsilon * 255.0;
  row.seed_count = 1;
  row.clean_mean = clean.mean_accuracy;
  row.clean_std = clean.std_accuracy;
  row.adv_mean = adv.mean_accuracy;
  row.adv_std = adv.std_accuracy;
  row.wall_s = seconds_since(t0);
  RunReport report;
  report.rows.push_back(row);
  if (!ov.timing) zero_wall(report);
  emit_report(report, fs::path(ov.out) / "report.csv");
  render_report(report, std::cout);
  return 0;
}

int cmd_blackbox(const Overrides& ov, const std::string& model_path, double sigma, int queries) {
  Checkpoint ck = load_checkpoint(model_path);
  RunConfig cfg = checkpoint_config(ck, ov);
  Model model = model_from_checkpoint(ck);

  fs::create_directories(ov.out);
  save_config(cfg, fs::path(ov.out) / "config.json");
  SweepDatasets data = build_datasets(cfg.data, cfg.train.seed);

  auto t0 = std::chrono::steady_clock::now();
  RngStream root = RngStream::from_seed(cfg.train.seed);
  BlackBoxModel bb = BlackBoxModel::wrap_model(model, root.child("bb-noise"));
  RngStream attack_rng = root.child("bb-attack");
  const Dataset& test = data.test;
  std::vector<double> adv_inputs(test.inputs.size());
  const int d = test.inputs.shape()[1];
  for (int begin = 0; begin < test.size(); begin += cfg.eval.batch_size) {
    int end = std::min(begin + cfg.eval.batch_size, test.size());
    Tensor xb = test.batch_inputs(begin, end);
    Tensor adv = blackbox_attack(bb, xb, test.batch_labels(begin, end), cfg.train.attack, sigma,
                                 queries, attack_rng);
    std::copy(adv.values().begin(), adv.values().end(),
              adv_inputs.begin() + static_cast<std::size_t>(begin) * d);
  }
  Dataset adv_set = test;
  adv_set.inputs = Tensor(test.inputs.shape(), std::move(adv_inputs));
  adv_set.split = "adversarial";

  RngStream eval_rng = RngStream::from_seed(cfg.train.seed).child("test-eval");
  EvalResult clean =
      evaluate_on(model, test, cfg.eval.noise_draws, eval_rng, cfg.eval.batch_size);
  EvalResult adv =
      evaluate_on(model, adv_set, cfg.eval.noise_draws, eval_rng, cfg.eval.batch_size);
  ReportRow row;
  row.config_id = "blackbox-" + model_id(cfg);
  row.variable = "blackbox";
  row.value = cfg.train.attack.epsilon * 255.0;
  row.seed_count = 1;
  row.clean_mean = clean.mean_accuracy;
  row.clean_std = clean.std_accuracy;
  row.adv_mean = adv.mean_accuracy;
  row.adv_std = adv.std_accuracy;
  row.wall_s = seconds_since(t0);
  RunReport report;
  report.rows.push_back(row);
  if (!ov.timing) zero_wall(report);
  emit_report(report, fs::path(ov.out) / "report.csv");
  render_report(report, std::cout);
  std::cerr << "[blackbox] " << bb.query_count() << " query batches\n";
  return 0;
}

int cmd_sweep(const Overrides& ov, const std::string& variable,
              const std::vector<double>& values, int reps) {
  RunConfig cfg = effective_config(ov);
  if (!variable.empty()) cfg.sweep.variable = variable;
  if (!values.empty()) cfg.sweep.values = values;
  if (reps > 0) cfg.sweep.repetitions = reps;
  cfg.sweep.validate();
  cfg.train.validate();

  fs::create_directories(ov.out);
  save_config(cfg, fs::path(ov.out) / "config.json");
  SweepDatasets data = build_datasets(cfg.data, cfg.train.seed);
  SweepOutcome out = run_sweep(cfg, data, &std::cerr);
  if (!ov.timing) zero_wall(out.report);
  emit_report(out.report, fs::path(ov.out) / "report.csv");
  render_report(out.report, std::cout);
  for (const std::string& e : out.errors) std::cerr << "[sweep] failed run: " << e << "\n";
  std::cerr << "[sweep] " << out.train_runs << " trainings, " << out.train_steps
            << " optimizer steps; wrote " << ov.out << "/report.csv\n";
  return 0;
}

int cmd_report(const std::string& in_path) {
  RunReport report = parse_report(in_path);
  render_report(report, std::cout);
  return 0;
}

const char* error_kind(const std::exception& e) {
  if (dynamic_cast<const DimensionError*>(&e)) return "dimension";
  if (dynamic_cast<const IndexError*>(&e)) return "index";
  if (dynamic_cast<const ContractError*>(&e)) return "contract";
  if (dynamic_cast<const StateError*>(&e)) return "state";
  if (dynamic_cast<const SizeError*>(&e)) return "size";
  if (dynamic_cast<const FormatError*>(&e)) return "format";
  if (dynamic_cast<const IoError*>(&e)) return "io";
  if (dynamic_cast<const TrainingError*>(&e)) return "training";
  return "internal";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Colored noise injection laboratory: adversarially trained classifiers "
               "with learned low-rank weight/activation noise"};
  app.require_subcommand(1);

  Overrides train_ov, attack_ov, transfer_ov, blackbox_ov, sweep_ov;
  std::string attack_model, transfer_model, transfer_source, blackbox_model, report_in;
  double bb_sigma = 0.01;
  int bb_queries = 100;
  std::string sweep_variable;
  std::vector<double> sweep_values;
  int sweep_reps = 0;

  CLI::App* train = app.add_subcommand("train", "adversarially train a defended classifier");
  add_common_flags(train, train_ov);

  CLI::App* attack = app.add_subcommand("attack", "white-box PGD evaluation of a checkpoint");
  attack->add_option("--model", attack_model, "checkpoint to evaluate")->required();
  add_common_flags(attack, attack_ov);

  CLI::App* transfer =
      app.add_subcommand("transfer", "black-box transfer attack from a source checkpoint");
  transfer->add_option("--model", transfer_model, "target checkpoint")->required();
  transfer->add_option("--source", transfer_source, "source (surrogate) checkpoint")->required();
  add_common_flags(transfer, transfer_ov);

  CLI::App* blackbox =
      app.add_subcommand("blackbox", "query-only attack with NES gradient estimation");
  blackbox->add_option("--model", blackbox_model, "checkpoint to evaluate")->required();
  blackbox->add_option("--sigma", bb_sigma, "NES smoothing radius");
  blackbox->add_option("--queries", bb_queries, "query batches per gradient estimate (even)");
  add_common_flags(blackbox, blackbox_ov);

  CLI::App* sweep = app.add_subcommand("sweep", "rank/epsilon/k grid with seeded repetitions");
  sweep->add_option("--variable", sweep_variable, "rank|epsilon|k");
  sweep->add_option("--values", sweep_values, "swept values (epsilon on the /255 scale)");
  sweep->add_option("--reps", sweep_reps, "seeds per value");
  add_common_flags(sweep, sweep_ov);

  CLI::App* report = app.add_subcommand("report", "render a results CSV as a table");
  report->add_option("--in", report_in, "results CSV path")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) return cmd_train(train_ov);
    if (attack->parsed()) return cmd_attack(attack_ov, attack_model);
    if (transfer->parsed()) return cmd_transfer(transfer_ov, transfer_model, transfer_source);
    if (blackbox->parsed()) return cmd_blackbox(blackbox_ov, blackbox_model, bb_sigma, bb_queries);
    if (sweep->parsed()) return cmd_sweep(sweep_ov, sweep_variable, sweep_values, sweep_reps);
    if (report->parsed()) return cmd_report(report_in);
  } catch (const std::exception& e) {
    nlohmann::json err = {{"error", {{"type", error_kind(e)}, {"message", e.what()}}}};
    std::cerr << err.dump() << "\n";
    return 1;
  }
  return 0;
}
