#pragma once

#include "cni/errors.hpp"

namespace cni {

// L-infinity attack description. epsilon and step are in input units
// (pixel scale /255 conversions happen at the CLI/sweep layer).
struct AttackConfig {
  double epsilon = 8.0 / 255.0;
  int k = 7;               // iterations
  double step = 0.0;       // <= 0 selects the 2.5*epsilon/k default
  bool random_start = true;
  int eot_samples = 1;     // noise draws averaged per gradient evaluation
  double lo = 0.0;         // input domain bounds
  double hi = 1.0;

  double resolved_step() const {
    return step > 0.0 ? step : 2.5 * epsilon / static_cast<double>(k);
  }

  void validate() const {
    if (epsilon < 0.0) throw ContractError("attack: epsilon must be >= 0");
    if (k < 1) throw ContractError("attack: k must be >= 1");
    if (eot_samples < 1) throw ContractError("attack: eot_samples must be >= 1");
    if (!(lo <= hi)) throw ContractError("attack: invalid input bounds");
    if (epsilon > 0.0 && resolved_step() <= 0.0) throw ContractError("attack: step must be > 0");
  }

  friend bool operator==(const AttackConfig&, const AttackConfig&) = default;
};

}  // namespace cni
