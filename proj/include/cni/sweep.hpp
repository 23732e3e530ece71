#pragma once

#include <iosfwd>

#include "cni/config.hpp"
#include "cni/dataset.hpp"
#include "cni/report.hpp"
#include "cni/train.hpp"

namespace cni {

struct SweepDatasets {
  Dataset train, val, test;
};

// Synthetic blobs per config, or IDX files with a validation slice carved off
// the train split.
SweepDatasets build_datasets(const DataConfig& cfg, std::uint64_t seed);

// Full training run: fit, pick the best clean-validation checkpoint, return
// the model rolled back to it.
struct TrainedRun {
  Model model;
  Checkpoint best;
  FitResult fit;
  std::uint64_t steps = 0;
};
TrainedRun train_run(const RunConfig& cfg, const Dataset& train, const Dataset& val);

struct SweepOutcome {
  RunReport report;
  int train_runs = 0;          // distinct trainings executed
  std::uint64_t train_steps = 0;
  std::vector<std::string> errors;  // per-run failures (sweep continues)
};

// Grid of sweep.variable × repetitions. Rank sweeps retrain per value;
// epsilon/k sweeps train once per seed and reuse the frozen model for every
// attack configuration. wall_s holds measured seconds per row.
SweepOutcome run_sweep(const RunConfig& base, const SweepDatasets& data,
                       std::ostream* log = nullptr);

}  // namespace cni
