#include "cni/noise.hpp"

#include <cmath>
#include <string>

namespace cni {

namespace {

// |x| composed from the existing elementwise ops; backward is sign(x) with 0
// at the kink, matching the engine's sign convention.
Tensor abs_elem(const Tensor& x) { return add(relu(x), relu(scale(x, -1.0))); }

void check_factors(const Tensor& s, const Tensor& v, int m, const char* op) {
  if (s.shape().size() != 1) {
    throw DimensionError(std::string(op) + ": s must be 1-D, got " + shape_str(s.shape()));
  }
  int n = s.shape()[0];
  if (v.shape().size() != 2 || v.shape()[0] != n || v.shape()[1] != m) {
    throw DimensionError(std::string(op) + ": v must be [" + std::to_string(n) + "x" +
                         std::to_string(m) + "], got " + shape_str(v.shape()));
  }
}

}  // namespace

ColoredNoiseParams init_noise(int n, NoiseMode mode, int m, double weight_std, RngStream& rng) {
  if (m < 0) throw ContractError("init_noise: negative rank");
  double base = mode == NoiseMode::Weight ? weight_std : 1.0;
  ColoredNoiseParams p;
  p.n = n;
  p.m = m;
  p.s = Tensor::full({n}, 0.1 * base);
  double v_std = 0.01 * base / std::sqrt(static_cast<double>(std::max(m, 1)));
  std::vector<double> v(static_cast<std::size_t>(n) * m);
  for (double& x : v) x = v_std * rng.normal();
  p.v = Tensor({n, m}, std::move(v));
  return p;
}

Tensor covariance(const ColoredNoiseParams& p, int cap) {
  if (p.n > cap) {
    throw SizeError("covariance: n=" + std::to_string(p.n) + " exceeds cap " +
                    std::to_string(cap));
  }
  check_factors(p.s, p.v, p.m, "covariance");
  const int n = p.n, m = p.m;
  const auto& sv = p.s.values();
  const auto& vv = p.v.values();
  std::vector<double> c(static_cast<std::size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j <= i; ++j) {
      double acc = 0.0;
      for (int k = 0; k < m; ++k) acc += vv[i * m + k] * vv[j * m + k];
      c[static_cast<std::size_t>(i) * n + j] = acc;
      c[static_cast<std::size_t>(j) * n + i] = acc;
    }
    c[static_cast<std::size_t>(i) * n + i] += sv[i] * sv[i];
  }
  return Tensor({n, n}, std::move(c));
}

Tensor sample_vector(const Tensor& s, const Tensor& v, int m, RngStream& rng) {
  check_factors(s, v, m, "sample_vector");
  const int n = s.shape()[0];
  std::vector<double> eps_d(n);
  rng.fill_normal(eps_d);
  Tensor diag_part = mul(abs_elem(s), Tensor({n}, std::move(eps_d)));
  if (m == 0) return diag_part;
  std::vector<double> eps_c(m);
  rng.fill_normal(eps_c);
  Tensor corr = reshape(matmul(v, Tensor({m, 1}, std::move(eps_c))), {n});
  return add(diag_part, corr);
}

Tensor sample_vector_diagonal(const Tensor& s, RngStream& rng) {
  if (s.shape().size() != 1) {
    throw DimensionError("sample_vector_diagonal: s must be 1-D, got " + shape_str(s.shape()));
  }
  const int n = s.shape()[0];
  std::vector<double> eps_d(n);
  rng.fill_normal(eps_d);
  return mul(abs_elem(s), Tensor({n}, std::move(eps_d)));
}

Tensor sample_batch(const Tensor& s, const Tensor& v, int m, int batch, RngStream& rng) {
  check_factors(s, v, m, "sample_batch");
  const int n = s.shape()[0];
  std::vector<double> eps_d(static_cast<std::size_t>(batch) * n);
  rng.fill_normal(eps_d);
  Tensor diag_part = mul_rowvec(Tensor({batch, n}, std::move(eps_d)), abs_elem(s));
  if (m == 0) return diag_part;
  std::vector<double> eps_c(static_cast<std::size_t>(batch) * m);
  rng.fill_normal(eps_c);
  Tensor corr = matmul(Tensor({batch, m}, std::move(eps_c)), transpose(v));
  return add(diag_part, corr);
}

Tensor sample_batch_diagonal(const Tensor& s, int batch, RngStream& rng) {
  if (s.shape().size() != 1) {
    throw DimensionError("sample_batch_diagonal: s must be 1-D, got " + shape_str(s.shape()));
  }
  const int n = s.shape()[0];
  std::vector<double> eps_d(static_cast<std::size_t>(batch) * n);
  rng.fill_normal(eps_d);
  return mul_rowvec(Tensor({batch, n}, std::move(eps_d)), abs_elem(s));
}

Tensor sample(const ColoredNoiseParams& p, RngStream& rng) {
  return sample_vector(p.s, p.v, p.m, rng);
}

}  // namespace cni
