#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>

#include "cni/attack_config.hpp"
#include "cni/dataset.hpp"
#include "cni/model.hpp"

namespace cni {

// Clamp x into the epsilon ball around x0, then into the input bounds.
// Idempotent and purely value-level.
Tensor project_linf(const Tensor& x, const Tensor& x0, double epsilon, double lo, double hi);

// d(mean cross-entropy)/dx averaged over `eot_samples` fresh noise draws.
// One forward+backward per draw; site streams advance once per draw.
Tensor attack_gradient(const Model& model, const Tensor& x, const std::vector<int>& y,
                       int eot_samples, std::span<RngStream> site_streams);

// Single step of epsilon times the gradient sign, clamped to bounds.
// epsilon = 0 returns the input untouched without consuming randomness.
Tensor fgsm(const Model& model, const Tensor& x, const std::vector<int>& y, double epsilon,
            double lo, double hi, int eot_samples, std::span<RngStream> site_streams);

// Iterated gradient-sign ascent with projection onto the epsilon ball.
// rng feeds the optional uniform random start only.
Tensor pgd(const Model& model, const Tensor& x, const std::vector<int>& y,
           const AttackConfig& cfg, RngStream& rng, std::span<RngStream> site_streams);

// Adversarial dataset crafted against a source model, for evaluation against
// arbitrary targets.
struct AdversarialSet {
  Dataset data;
  std::uint64_t source_digest = 0;
  AttackConfig config;
};

AdversarialSet transfer_attack(const Model& source, const AttackConfig& cfg, const Dataset& ds,
                               RngStream rng, int batch_size = 128);

// Writes <prefix>-images.idx (f64), <prefix>-labels.idx and <prefix>-meta.json.
void save_adversarial_set(const AdversarialSet& set, const std::filesystem::path& dir,
                          const std::string& prefix = "adv");
AdversarialSet load_adversarial_set(const std::filesystem::path& dir,
                                    const std::string& prefix = "adv");

// Query-only view of a classifier: batches in, class probabilities out.
// No gradients cross this boundary; the counter tracks spent query batches.
class BlackBoxModel {
 public:
  using QueryFn = std::function<Tensor(const Tensor&)>;
  explicit BlackBoxModel(QueryFn fn) : fn_(std::move(fn)) {}

  // Wrap a (possibly noise-injected) model; defender noise is resampled per
  // query from streams derived off `noise_parent`. The model must outlive
  // the wrapper.
  static BlackBoxModel wrap_model(const Model& model, RngStream noise_parent);

  Tensor query(const Tensor& batch);
  std::uint64_t query_count() const { return queries_; }

 private:
  QueryFn fn_;
  std::uint64_t queries_ = 0;
};

// Antithetic NES estimate of d(mean loss)/dx from n_samples query batches:
// ghat = 1/(sigma*n) * sum_pairs [L(x+sigma*u) - L(x-sigma*u)] * u.
Tensor nes_gradient_estimate(BlackBoxModel& bb, const Tensor& x, const std::vector<int>& y,
                             double sigma, int n_samples, RngStream& rng);

// PGD loop driven by the NES estimate; same projection contract as pgd().
Tensor blackbox_attack(BlackBoxModel& bb, const Tensor& x, const std::vector<int>& y,
                       const AttackConfig& cfg, double sigma, int n_samples, RngStream& rng);

}  // namespace cni
