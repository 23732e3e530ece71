#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cni/attack_config.hpp"

namespace cni {

enum class Defense { None, AdvTrain, PniW, CniW, CniA, CniWA };

Defense defense_from_string(const std::string& s);
std::string to_string(Defense d);

struct ModelConfig {
  std::string arch = "mlp";       // "mlp" | "cnn"
  std::vector<int> input_shape = {64};  // per-sample; cnn expects {C,H,W}
  std::vector<int> hidden = {64};       // mlp hidden widths
  int conv_channels = 8;                // cnn feature maps
  int classes = 10;
  Defense defense = Defense::None;
  int rank = 5;  // covariance rank for cni-* defenses

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct TrainConfig {
  int epochs = 50;
  int batch_size = 128;
  double lr = 0.1;
  double momentum = 0.9;
  std::vector<int> lr_milestones = {30, 40};
  double lr_decay_factor = 10.0;
  double weight_decay = 1e-4;
  double v_weight_decay = 1e-3;  // extra decay, V factors only
  AttackConfig attack;           // training-time PGD
  double loss_mix = 0.5;         // weight of the adversarial loss
  bool freeze_noise = false;     // exclude s/V from optimizer updates
  std::uint64_t seed = 1;

  void validate() const {
    if (loss_mix < 0.0 || loss_mix > 1.0) throw ContractError("train: loss_mix must be in [0,1]");
    if (lr < 0.0 || momentum < 0.0 || weight_decay < 0.0 || v_weight_decay < 0.0) {
      throw ContractError("train: rates must be >= 0");
    }
    if (epochs < 0 || batch_size < 1) throw ContractError("train: bad epochs/batch_size");
    attack.validate();
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct DataConfig {
  std::string source = "synthetic";  // "synthetic" | "idx"
  int classes = 10;
  int dim = 64;
  int per_class = 100;       // train split
  int val_per_class = 20;
  int test_per_class = 50;
  double separation = 0.5;   // distance between class means
  std::string idx_images, idx_labels;            // train files (idx source)
  std::string idx_test_images, idx_test_labels;  // test files (idx source)
  double val_fraction = 0.1;                     // carved off idx train split

  friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

struct EvalConfig {
  int noise_draws = 10;
  int batch_size = 256;

  friend bool operator==(const EvalConfig&, const EvalConfig&) = default;
};

struct SweepConfig {
  std::string variable = "rank";  // "rank" | "epsilon" | "k"
  std::vector<double> values = {0, 1, 2, 5, 10};  // epsilon values on the /255 scale
  int repetitions = 3;            // seeds per value

  void validate() const {
    if (variable != "rank" && variable != "epsilon" && variable != "k") {
      throw ContractError("sweep: unknown variable '" + variable + "'");
    }
    if (values.empty()) throw ContractError("sweep: empty value list");
    if (repetitions < 1) throw ContractError("sweep: repetitions must be >= 1");
  }

  friend bool operator==(const SweepConfig&, const SweepConfig&) = default;
};

struct RunConfig {
  TrainConfig train;
  ModelConfig model;
  DataConfig data;
  EvalConfig eval;
  SweepConfig sweep;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

// JSON round-trip. Field names mirror the struct members; unknown keys are an
// error so config typos fail loudly.
std::string to_json(const RunConfig& cfg);
RunConfig config_from_json(const std::string& json_text);
RunConfig load_config(const std::filesystem::path& path);
void save_config(const RunConfig& cfg, const std::filesystem::path& path);

// FNV-1a digest of the canonical JSON form; embedded in checkpoints.
std::uint64_t config_digest(const RunConfig& cfg);

}  // namespace cni
