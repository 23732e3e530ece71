#include "cni/sweep.hpp"

#include <chrono>
#include <cmath>
#include <numeric>
#include <ostream>
#include <sstream>

namespace cni {

namespace {

std::string trim_number(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

struct Stats {
  double mean = 0.0, std = 0.0;
};

Stats mean_std(const std::vector<double>& xs) {
  Stats st;
  if (xs.empty()) return st;
  st.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - st.mean) * (x - st.mean);
  st.std = std::sqrt(var / static_cast<double>(xs.size()));
  return st;
}

double now_seconds() {
  using clock = std::chrono::steady_clock;
  return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

}  // namespace

SweepDatasets build_datasets(const DataConfig& cfg, std::uint64_t seed) {
  SweepDatasets out;
  if (cfg.source == "synthetic") {
    out.train = gen_synthetic(cfg.classes, cfg.dim, cfg.per_class, cfg.separation, seed, "train");
    out.val =
        gen_synthetic(cfg.classes, cfg.dim, cfg.val_per_class, cfg.separation, seed, "val");
    out.test =
        gen_synthetic(cfg.classes, cfg.dim, cfg.test_per_class, cfg.separation, seed, "test");
    return out;
  }
  if (cfg.source == "idx") {
    Dataset full = load_idx(cfg.idx_images, cfg.idx_labels);
    int n = full.size();
    int n_val = std::max(1, static_cast<int>(n * cfg.val_fraction));
    std::vector<int> train_idx, val_idx;
    for (int i = 0; i < n - n_val; ++i) train_idx.push_back(i);
    for (int i = n - n_val; i < n; ++i) val_idx.push_back(i);
    out.train = full.subset(train_idx, "train");
    out.val = full.subset(val_idx, "val");
    out.test = load_idx(cfg.idx_test_images, cfg.idx_test_labels);
    out.test.split = "test";
    // Class count must cover every split.
    int classes = std::max(out.train.num_classes, std::max(out.val.num_classes,
                                                           out.test.num_classes));
    out.train.num_classes = out.val.num_classes = out.test.num_classes = classes;
    return out;
  }
  throw ContractError("data source '" + cfg.source + "' unknown (want synthetic|idx)");
}

TrainedRun train_run(const RunConfig& cfg, const Dataset& train, const Dataset& val) {
  RngStream root = RngStream::from_seed(cfg.train.seed);
  Model model = build_model(cfg.model, root);
  Trainer trainer(std::move(model), cfg);
  TrainedRun run;
  run.fit = trainer.fit(train, val);
  run.best = select_checkpoint(run.fit.history);
  run.model = model_from_checkpoint(run.best);
  run.steps = trainer.step_count();
  return run;
}

SweepOutcome run_sweep(const RunConfig& base, const SweepDatasets& data, std::ostream* log) {
  base.sweep.validate();
  base.train.validate();
  SweepOutcome out;
  const std::string& variable = base.sweep.variable;

  // Frozen models for attack-only sweeps, one per repetition seed.
  std::vector<Model> cached;
  std::vector<bool> cached_ok;
  bool attack_only = variable == "epsilon" || variable == "k";
  if (attack_only) {
    cached.resize(static_cast<std::size_t>(base.sweep.repetitions));
    cached_ok.assign(static_cast<std::size_t>(base.sweep.repetitions), false);
    for (int rep = 0; rep < base.sweep.repetitions; ++rep) {
      RunConfig cfg = base;
      cfg.train.seed = base.train.seed + static_cast<std::uint64_t>(rep);
      try {
        TrainedRun run = train_run(cfg, data.train, data.val);
        cached[static_cast<std::size_t>(rep)] = std::move(run.model);
        cached_ok[static_cast<std::size_t>(rep)] = true;
        ++out.train_runs;
        out.train_steps += run.steps;
      } catch (const std::exception& e) {
        std::ostringstream os;
        os << "train rep=" << rep << ": " << e.what();
        out.errors.push_back(os.str());
        if (log) *log << "[sweep] " << os.str() << "\n";
      }
    }
  }

  for (double value : base.sweep.values) {
    double t0 = now_seconds();
    std::vector<double> clean_accs, adv_accs;
    for (int rep = 0; rep < base.sweep.repetitions; ++rep) {
      std::uint64_t seed = base.train.seed + static_cast<std::uint64_t>(rep);
      try {
        RunConfig cfg = base;
        cfg.train.seed = seed;
        AttackConfig attack = cfg.train.attack;
        const Model* model = nullptr;
        TrainedRun run;
        if (variable == "rank") {
          cfg.model.rank = static_cast<int>(value);
          run = train_run(cfg, data.train, data.val);
          ++out.train_runs;
          out.train_steps += run.steps;
          model = &run.model;
        } else {
          if (!cached_ok[static_cast<std::size_t>(rep)]) continue;  // recorded above
          model = &cached[static_cast<std::size_t>(rep)];
          if (variable == "epsilon") {
            attack.epsilon = value / 255.0;
            attack.step = 0.0;  // re-derive from the new radius
          } else {
            attack.k = static_cast<int>(value);
            attack.step = 0.0;
          }
        }
        RngStream eval_rng = RngStream::from_seed(seed).child("test-eval");
        EvalResult clean = evaluate(*model, data.test, std::nullopt, base.eval.noise_draws,
                                    eval_rng, base.eval.batch_size);
        EvalResult adv = evaluate(*model, data.test, attack, base.eval.noise_draws, eval_rng,
                                  base.eval.batch_size);
        clean_accs.push_back(clean.mean_accuracy);
        adv_accs.push_back(adv.mean_accuracy);
      } catch (const std::exception& e) {
        std::ostringstream os;
        os << variable << "=" << trim_number(value) << " rep=" << rep << ": " << e.what();
        out.errors.push_back(os.str());
        if (log) *log << "[sweep] " << os.str() << "\n";
      }
    }

    ReportRow row;
    row.variable = variable;
    row.value = value;
    std::ostringstream id;
    id << to_string(base.model.defense);
    if (variable == "rank") {
      id << "-m" << trim_number(value);
    } else {
      id << "-m" << base.model.rank << "-" << (variable == "epsilon" ? "eps" : "k")
         << trim_number(value);
    }
    row.config_id = id.str();
    row.seed_count = static_cast<int>(clean_accs.size());
    Stats cs = mean_std(clean_accs), as = mean_std(adv_accs);
    row.clean_mean = cs.mean;
    row.clean_std = cs.std;
    row.adv_mean = as.mean;
    row.adv_std = as.std;
    row.wall_s = now_seconds() - t0;
    out.report.rows.push_back(std::move(row));
    if (log) {
      *log << "[sweep] " << variable << "=" << trim_number(value) << " clean=" << cs.mean
           << "+-" << cs.std << " adv=" << as.mean << "+-" << as.std << " seeds=" << row.seed_count
           << "\n";
    }
  }
  return out;
}

}  // namespace cni
