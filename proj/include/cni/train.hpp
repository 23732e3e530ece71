#pragma once

#include <filesystem>
#include <optional>
#include <utility>
#include <vector>

#include "cni/attacks.hpp"
#include "cni/config.hpp"
#include "cni/dataset.hpp"
#include "cni/model.hpp"

namespace cni {

// Momentum buffers parallel to the registry, plus the decay coefficient each
// tensor actually received on the last step (bookkeeping assertion hook).
struct SgdState {
  std::vector<std::vector<double>> velocity;
  std::vector<double> applied_decay;
};

// Classical momentum update: v <- momentum*v + grad + decay*w; w <- w - lr*v.
// Decay is weight_decay for weights, weight_decay + v_weight_decay for noise
// V factors, zero for biases and noise s. freeze_noise skips s/V entirely.
void sgd_update(const std::vector<ParamRef>& registry,
                const std::vector<std::vector<double>>& grads, SgdState& state, double lr,
                double momentum, double weight_decay, double v_weight_decay,
                bool freeze_noise = false);

// Piecewise-constant schedule: base rate divided by the decay factor at each
// milestone already reached.
double lr_schedule(int epoch, const TrainConfig& cfg);

struct StepMetrics {
  double loss = 0.0;
  double clean_loss = 0.0;  // NaN when loss_mix = 1
  double adv_loss = 0.0;    // NaN when loss_mix = 0
  bool attack_ran = false;
};

// One optimizer step on L = (1-loss_mix)*L_clean + loss_mix*L_adv, with the
// adversarial batch generated by PGD against the live model. Fresh noise is
// drawn for every attack iteration and for each loss forward.
StepMetrics adversarial_train_step(Model& model, const Tensor& x, const std::vector<int>& y,
                                   const TrainConfig& cfg, double lr, SgdState& sgd,
                                   RngStream& rng, std::span<RngStream> site_streams);

struct Checkpoint {
  RunConfig config;
  int epoch = 0;
  double val_accuracy = 0.0;
  std::vector<std::pair<std::string, RngState>> rng;
  std::vector<std::pair<std::string, Tensor>> tensors;
};

using TrainHistory = std::vector<Checkpoint>;

// Highest clean validation accuracy; ties resolve to the earliest epoch.
const Checkpoint& select_checkpoint(const TrainHistory& history);

// Versioned little-endian container: magic, version, config digest, config
// JSON, epoch, validation accuracy, named rng states, named f64 tensors.
std::vector<unsigned char> serialize_checkpoint(const Checkpoint& ck);
Checkpoint deserialize_checkpoint(const std::vector<unsigned char>& bytes);
void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);
std::uint64_t checkpoint_digest(const Checkpoint& ck);

// Rebuild the architecture from the stored config and restore parameters.
Model model_from_checkpoint(const Checkpoint& ck);

struct EpochMetrics {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_accuracy = 0.0;
};

struct FitResult {
  TrainHistory history;           // one checkpoint per epoch
  std::vector<EpochMetrics> metrics;
};

struct EvalResult {
  double mean_accuracy = 0.0;
  double std_accuracy = 0.0;  // population std over draws
  std::vector<double> per_draw;
};

// n_draws independent noisy evaluations; when an attack config is given the
// adversarial examples are regenerated per draw against `model` itself.
EvalResult evaluate(const Model& model, const Dataset& ds,
                    const std::optional<AttackConfig>& attack, int n_draws, RngStream rng,
                    int batch_size = 256);

// Accuracy of `model` on a fixed dataset (no attack), n_draws noise draws.
EvalResult evaluate_on(const Model& model, const Dataset& ds, int n_draws, RngStream rng,
                       int batch_size = 256);

// Owns the model, optimizer state and the run's named noise streams.
class Trainer {
 public:
  Trainer(Model model, RunConfig cfg);

  StepMetrics step(const Tensor& x, const std::vector<int>& y, double lr);
  double run_epoch(const Dataset& train, int epoch);  // mean step loss
  FitResult fit(const Dataset& train, const Dataset& val);

  Checkpoint snapshot(int epoch, double val_accuracy) const;
  void restore(const Checkpoint& ck);

  Model& model() { return model_; }
  const RunConfig& config() const { return cfg_; }
  std::uint64_t step_count() const { return steps_; }

 private:
  Model model_;
  RunConfig cfg_;
  SgdState sgd_;
  RngStream loop_rng_;
  std::vector<RngStream> site_streams_;
  std::uint64_t steps_ = 0;
};

void write_metrics_csv(const std::vector<EpochMetrics>& metrics,
                       const std::filesystem::path& path);

}  // namespace cni
