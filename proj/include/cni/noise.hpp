#pragma once

#include "cni/rng.hpp"
#include "cni/tensor.hpp"

namespace cni {

enum class NoiseMode { Weight, Activation };

// LowRank builds the diagonal-plus-low-rank noise; Diagonal is the dedicated
// independent-noise path (no correlation factor at all). LowRank with m = 0
// must stay bit-identical to Diagonal under the same draw stream.
enum class NoiseKind { LowRank, Diagonal };

// Learnable covariance factors for one injection site. The covariance is
// Diag(s^2) + V V^T: lambda_i = s_i^2 is non-negative by construction and the
// correlated part has rank at most m.
struct ColoredNoiseParams {
  int n = 0;  // number of perturbed scalars
  int m = 0;  // rank of the correlated component (columns of v)
  Tensor s;   // [n]
  Tensor v;   // [n×m]
};

// One noise injector attached to a layer: perturbs the layer's weights or its
// output activations on every forward pass, training and inference alike.
struct InjectionSite {
  NoiseMode mode = NoiseMode::Weight;
  NoiseKind kind = NoiseKind::LowRank;
  ColoredNoiseParams params;
};

// s starts at a tenth of the layer weight scale (unit scale for activation
// sites) and v near zero, so training starts close to independent noise.
ColoredNoiseParams init_noise(int n, NoiseMode mode, int m, double weight_std, RngStream& rng);

// Materialize Diag(s^2) + V V^T. Inspection/testing aid; n is capped because
// the matrix is dense. Exactly symmetric.
Tensor covariance(const ColoredNoiseParams& p, int cap = 4096);

// One draw eps = |s| ∘ eps_D + V eps_C with eps_D ~ N(0, I_n), eps_C ~ N(0, I_m),
// consuming n then m normals. The result is differentiable w.r.t. s and v when
// they are tracked leaves (the draws enter as constants).
Tensor sample_vector(const Tensor& s, const Tensor& v, int m, RngStream& rng);

// Dedicated diagonal-only sampler: eps = |s| ∘ eps_D, consuming n normals.
Tensor sample_vector_diagonal(const Tensor& s, RngStream& rng);

// Batch of `batch` independent draws stacked as rows [batch×n]. Draw order:
// all of eps_D row-major, then all of eps_C row-major.
Tensor sample_batch(const Tensor& s, const Tensor& v, int m, int batch, RngStream& rng);
Tensor sample_batch_diagonal(const Tensor& s, int batch, RngStream& rng);

// Untracked convenience draw from stored parameters.
Tensor sample(const ColoredNoiseParams& p, RngStream& rng);

}  // namespace cni
