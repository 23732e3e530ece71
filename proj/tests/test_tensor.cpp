#include <doctest.h>

#include <cmath>

#include "cni/rng.hpp"
#include "cni/tensor.hpp"

using namespace cni;

namespace {

Tensor rand_tensor(const std::vector<int>& shape, RngStream& rng, double lo = -1.0,
                   double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor(shape, v);
}

// Random values kept away from the given kink points so central differences
// stay valid for piecewise ops.
Tensor rand_tensor_avoid(const std::vector<int>& shape, RngStream& rng,
                         const std::vector<double>& kinks, double margin = 1e-3) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) {
    for (;;) {
      x = rng.uniform(-1.0, 1.0);
      bool ok = true;
      for (double k : kinks) {
        if (std::abs(x - k) < margin) ok = false;
      }
      if (ok) break;
    }
  }
  return Tensor(shape, v);
}

double max_abs(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

double rel_err(const std::vector<double>& got, const std::vector<double>& want) {
  REQUIRE(got.size() == want.size());
  double diff = 0.0;
  for (std::size_t i = 0; i < got.size(); ++i) diff = std::max(diff, std::abs(got[i] - want[i]));
  return diff / std::max(max_abs(want), 1e-10);
}

// Analytic gradient of f(x) via the tape against central differences.
void check_grad(const std::function<Tensor(const Tensor&)>& op, const Tensor& x, double tol,
                double h = 1e-6) {
  RngStream crng = RngStream::from_seed(999);
  Tensor out_probe = op(x);
  Tensor c = rand_tensor(out_probe.shape(), crng);

  Graph g;
  Tensor leaf = g.leaf(x);
  Tensor loss = sum(mul(op(leaf), c));
  g.backward(loss);
  std::vector<double> analytic = leaf.grad();

  auto f = [&](const Tensor& probe) { return sum(mul(op(probe), c)).item(); };
  Tensor fd = finite_difference_grad(f, x, h);
  CHECK(rel_err(analytic, fd.values()) < tol);
}

}  // namespace

TEST_CASE("matmul forward examples") {
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor b({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(matmul(eye, b).values() == b.values());

  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor v({2, 1}, {5, 6});
  Tensor r = matmul(a, v);
  CHECK(r.shape() == std::vector<int>{2, 1});
  CHECK(r.values()[0] == doctest::Approx(17.0));
  CHECK(r.values()[1] == doctest::Approx(39.0));
}

TEST_CASE("matmul shape mismatch throws") {
  Tensor a({2, 3}, std::vector<double>(6, 1.0));
  Tensor b({2, 3}, std::vector<double>(6, 1.0));
  CHECK_THROWS_AS(matmul(a, b), DimensionError);
}

TEST_CASE("matmul gradient vs finite differences") {
  RngStream rng = RngStream::from_seed(11);
  for (int i = 0; i < 20; ++i) {
    Tensor a = rand_tensor({3, 4}, rng);
    Tensor b = rand_tensor({4, 2}, rng);
    check_grad([&](const Tensor& t) { return matmul(t, b); }, a, 1e-6);
    check_grad([&](const Tensor& t) { return matmul(a, t); }, b, 1e-6);
  }
}

TEST_CASE("matmul associativity within 1e-9") {
  RngStream rng = RngStream::from_seed(12);
  for (int i = 0; i < 20; ++i) {
    int m = 1 + static_cast<int>(rng.next_u64() % 8);
    int k = 1 + static_cast<int>(rng.next_u64() % 8);
    int p = 1 + static_cast<int>(rng.next_u64() % 8);
    int n = 1 + static_cast<int>(rng.next_u64() % 8);
    Tensor a = rand_tensor({m, k}, rng);
    Tensor b = rand_tensor({k, p}, rng);
    Tensor c = rand_tensor({p, n}, rng);
    Tensor lhs = matmul(matmul(a, b), c);
    Tensor rhs = matmul(a, matmul(b, c));
    double diff = 0.0;
    for (std::size_t j = 0; j < lhs.size(); ++j) {
      diff = std::max(diff, std::abs(lhs.values()[j] - rhs.values()[j]));
    }
    CHECK(diff < 1e-9);
  }
}

TEST_CASE("elementwise forward examples") {
  Tensor x({3}, {-1, 0, 2});
  CHECK(relu(x).values() == std::vector<double>{0, 0, 2});

  Tensor y({3}, {-0.3, 0, 7});
  CHECK(sign(y).values() == std::vector<double>{-1, 0, 1});

  Tensor z({4}, {-2, 0.5, 1.5, 3});
  CHECK(clamp(z, 0.0, 2.0).values() == std::vector<double>{0, 0.5, 1.5, 2});
}

TEST_CASE("elementwise shape mismatch throws") {
  Tensor a({3}, {1, 2, 3});
  Tensor b({2}, {1, 2});
  CHECK_THROWS_AS(add(a, b), DimensionError);
  CHECK_THROWS_AS(mul(a, b), DimensionError);
}

TEST_CASE("clamp backward is 1 strictly inside and 0 elsewhere") {
  Tensor x({5}, {-2.0, 0.0, 0.5, 2.0, 3.0});
  Graph g;
  Tensor leaf = g.leaf(x);
  g.backward(sum(clamp(leaf, 0.0, 2.0)));
  CHECK(leaf.grad() == std::vector<double>{0, 0, 1, 0, 0});
}

TEST_CASE("sign has zero gradient") {
  Graph g;
  Tensor leaf = g.leaf(Tensor({3}, {-0.5, 0.2, 4.0}));
  g.backward(sum(sign(leaf)));
  CHECK(leaf.grad() == std::vector<double>{0, 0, 0});
}

TEST_CASE("elementwise gradients vs finite differences") {
  RngStream rng = RngStream::from_seed(13);
  for (int i = 0; i < 20; ++i) {
    Tensor a = rand_tensor({4, 3}, rng);
    Tensor b = rand_tensor({4, 3}, rng);
    Tensor nz = rand_tensor_avoid({4, 3}, rng, {0.0});
    Tensor inside = rand_tensor_avoid({4, 3}, rng, {-0.5, 0.5});
    check_grad([&](const Tensor& t) { return add(t, b); }, a, 1e-6);
    check_grad([&](const Tensor& t) { return sub(t, b); }, a, 1e-6);
    check_grad([&](const Tensor& t) { return sub(b, t); }, a, 1e-6);
    check_grad([&](const Tensor& t) { return mul(t, b); }, a, 1e-6);
    check_grad([&](const Tensor& t) { return relu(t); }, nz, 1e-6);
    check_grad([&](const Tensor& t) { return scale(t, -1.7); }, a, 1e-6);
    check_grad([&](const Tensor& t) { return clamp(t, -0.5, 0.5); }, inside, 1e-6);
  }
}

TEST_CASE("scalar broadcast in binary ops") {
  Tensor a({3}, {1, 2, 3});
  Tensor s = Tensor::scalar(2.0);
  CHECK(add(a, s).values() == std::vector<double>{3, 4, 5});
  CHECK(mul(s, a).values() == std::vector<double>{2, 4, 6});
  CHECK(sub(a, s).values() == std::vector<double>{-1, 0, 1});

  // Backward accumulates over the broadcast side.
  Graph g;
  Tensor leaf = g.leaf(s);
  g.backward(sum(mul(a, leaf)));
  CHECK(leaf.grad() == std::vector<double>{6.0});
}

TEST_CASE("batch ops gradients vs finite differences") {
  RngStream rng = RngStream::from_seed(14);
  for (int i = 0; i < 20; ++i) {
    Tensor x = rand_tensor({5, 3}, rng);
    Tensor v = rand_tensor({3}, rng);
    check_grad([&](const Tensor& t) { return add_rowvec(t, v); }, x, 1e-6);
    check_grad([&](const Tensor& t) { return add_rowvec(x, t); }, v, 1e-6);
    check_grad([&](const Tensor& t) { return mul_rowvec(t, v); }, x, 1e-6);
    check_grad([&](const Tensor& t) { return mul_rowvec(x, t); }, v, 1e-6);
    check_grad([&](const Tensor& t) { return transpose(t); }, x, 1e-6);
    check_grad([&](const Tensor& t) { return reshape(t, {3, 5}); }, x, 1e-6);
  }
}

TEST_CASE("conv2d forward examples") {
  // 1x1 kernel of value 1 sums channels per position.
  Tensor x({1, 2, 2, 2}, {1, 2, 3, 4, 10, 20, 30, 40});
  Tensor w({1, 2, 1, 1}, {1, 1});
  Tensor y = conv2d(x, w, 1, 0);
  CHECK(y.shape() == std::vector<int>{1, 1, 2, 2});
  CHECK(y.values() == std::vector<double>{11, 22, 33, 44});

  // All-ones 3x3 kernel on constant input: 9c in the valid region.
  Tensor c = Tensor::full({1, 1, 5, 5}, 2.5);
  Tensor ones = Tensor::full({1, 1, 3, 3}, 1.0);
  Tensor z = conv2d(c, ones, 1, 0);
  CHECK(z.shape() == std::vector<int>{1, 1, 3, 3});
  for (double v : z.values()) CHECK(v == doctest::Approx(9 * 2.5));
}

TEST_CASE("conv2d geometry errors") {
  Tensor x = Tensor::full({1, 1, 2, 2}, 1.0);
  Tensor w = Tensor::full({1, 1, 3, 3}, 1.0);
  CHECK_THROWS_AS(conv2d(x, w, 1, 0), DimensionError);  // kernel larger than input
  Tensor w2 = Tensor::full({1, 2, 1, 1}, 1.0);
  CHECK_THROWS_AS(conv2d(x, w2, 1, 0), DimensionError);  // channel mismatch
}

TEST_CASE("conv2d gradient vs finite differences") {
  RngStream rng = RngStream::from_seed(15);
  for (int i = 0; i < 20; ++i) {
    Tensor x = rand_tensor({1, 1, 5, 5}, rng);
    Tensor w = rand_tensor({2, 1, 3, 3}, rng);
    check_grad([&](const Tensor& t) { return conv2d(t, w, 1, 1); }, x, 1e-6);
    check_grad([&](const Tensor& t) { return conv2d(x, t, 2, 1); }, w, 1e-6);
  }
}

TEST_CASE("softmax cross-entropy examples") {
  // Uniform logits, C = 10: loss is exactly ln 10.
  Tensor logits = Tensor::zeros({2, 10});
  Tensor loss = softmax_cross_entropy(logits, {3, 7});
  CHECK(loss.item() == doctest::Approx(std::log(10.0)).epsilon(1e-12));

  // Huge logit: stable, loss ~ 0 for the dominant class.
  Tensor big({1, 2}, {1e6, 0.0});
  CHECK(softmax_cross_entropy(big, {0}).item() == doctest::Approx(0.0));
  CHECK(std::isfinite(softmax_cross_entropy(big, {1}).item()));

  CHECK_THROWS_AS(softmax_cross_entropy(big, {2}), IndexError);
  CHECK_THROWS_AS(softmax_cross_entropy(big, {-1}), IndexError);
}

TEST_CASE("softmax cross-entropy is non-negative") {
  RngStream rng = RngStream::from_seed(16);
  for (int i = 0; i < 50; ++i) {
    Tensor logits = rand_tensor({3, 5}, rng, -5.0, 5.0);
    std::vector<int> labels = {static_cast<int>(rng.next_u64() % 5),
                               static_cast<int>(rng.next_u64() % 5),
                               static_cast<int>(rng.next_u64() % 5)};
    CHECK(softmax_cross_entropy(logits, labels).item() >= 0.0);
  }
}

TEST_CASE("softmax cross-entropy backward vs finite differences") {
  RngStream rng = RngStream::from_seed(17);
  for (int i = 0; i < 20; ++i) {
    Tensor logits = rand_tensor({4, 3}, rng);
    std::vector<int> labels;
    for (int b = 0; b < 4; ++b) labels.push_back(static_cast<int>(rng.next_u64() % 3));

    Graph g;
    Tensor leaf = g.leaf(logits);
    g.backward(softmax_cross_entropy(leaf, labels));
    auto f = [&](const Tensor& t) { return softmax_cross_entropy(t, labels).item(); };
    Tensor fd = finite_difference_grad(f, logits, 1e-6);
    CHECK(rel_err(leaf.grad(), fd.values()) < 1e-6);
  }
}

TEST_CASE("backward analytic example and state errors") {
  Graph g;
  Tensor x = g.leaf(Tensor({3}, {1, 2, 3}));
  Tensor loss = sum(mul(x, x));
  g.backward(loss);
  CHECK(x.grad() == std::vector<double>{2, 4, 6});
  CHECK_THROWS_AS(g.backward(loss), StateError);

  Graph g2;
  Tensor y = g2.leaf(Tensor({2}, {1, 2}));
  CHECK_THROWS_AS(g2.backward(mul(y, y)), ContractError);  // non-scalar loss
}

TEST_CASE("disconnected leaf keeps zero gradient") {
  Graph g;
  Tensor used = g.leaf(Tensor({2}, {1, 2}));
  Tensor unused = g.leaf(Tensor({2}, {5, 5}));
  g.backward(sum(mul(used, used)));
  CHECK(unused.grad() == std::vector<double>{0, 0});
}

TEST_CASE("mixing graphs throws") {
  Graph g1, g2;
  Tensor a = g1.leaf(Tensor({2}, {1, 2}));
  Tensor b = g2.leaf(Tensor({2}, {3, 4}));
  CHECK_THROWS_AS(add(a, b), StateError);
}

TEST_CASE("gradient of summed losses is the sum of gradients") {
  RngStream rng = RngStream::from_seed(18);
  Tensor x0 = rand_tensor({4}, rng);
  Tensor c1 = rand_tensor({4}, rng);
  Tensor c2 = rand_tensor({4}, rng);

  auto grad_of = [&](auto make_loss) {
    Graph g;
    Tensor x = g.leaf(x0);
    g.backward(make_loss(x));
    return x.grad();
  };
  auto g1 = grad_of([&](const Tensor& x) { return sum(mul(x, c1)); });
  auto g2 = grad_of([&](const Tensor& x) { return sum(mul(mul(x, x), c2)); });
  auto gsum = grad_of([&](const Tensor& x) {
    return add(sum(mul(x, c1)), sum(mul(mul(x, x), c2)));
  });
  for (std::size_t i = 0; i < gsum.size(); ++i) {
    CHECK(gsum[i] == doctest::Approx(g1[i] + g2[i]).epsilon(1e-12));
  }
}

TEST_CASE("finite difference oracle self-checks") {
  // f = x^2 at 3: derivative 6.
  auto square = [](const Tensor& t) { return t.values()[0] * t.values()[0]; };
  Tensor fd = finite_difference_grad(square, Tensor({1}, {3.0}), 1e-5);
  CHECK(std::abs(fd.values()[0] - 6.0) < 1e-8);

  // Linear functions are differentiated exactly for any h.
  auto linear = [](const Tensor& t) { return 2.0 * t.values()[0] - 7.0 * t.values()[1]; };
  for (double h : {1e-1, 1e-3, 1e-7}) {
    Tensor g = finite_difference_grad(linear, Tensor({2}, {0.3, -0.4}), h);
    CHECK(g.values()[0] == doctest::Approx(2.0).epsilon(1e-9));
    CHECK(g.values()[1] == doctest::Approx(-7.0).epsilon(1e-9));
  }
}

TEST_CASE("deep MLP gradients match finite differences both directions") {
  RngStream rng = RngStream::from_seed(19);
  const int layers = 10, width = 5, batch = 3;
  std::vector<Tensor> ws, bs;
  for (int l = 0; l < layers; ++l) {
    ws.push_back(rand_tensor({width, width}, rng, -0.6, 0.6));
    bs.push_back(rand_tensor({width}, rng, -0.1, 0.1));
  }
  Tensor x0 = rand_tensor({batch, width}, rng);
  std::vector<int> labels;
  for (int b = 0; b < batch; ++b) labels.push_back(static_cast<int>(rng.next_u64() % width));

  auto net_loss = [&](const Tensor& x, const std::vector<Tensor>& weights) {
    Tensor h = x;
    for (int l = 0; l < layers; ++l) {
      h = add_rowvec(matmul(h, weights[l]), bs[l]);
      if (l + 1 < layers) h = relu(h);
    }
    return softmax_cross_entropy(h, labels);
  };

  Graph g;
  Tensor xl = g.leaf(x0);
  std::vector<Tensor> wl;
  for (const Tensor& w : ws) wl.push_back(g.leaf(w));
  g.backward(net_loss(xl, wl));

  // d/dx: tape against the oracle.
  auto fx = [&](const Tensor& probe) { return net_loss(probe, ws).item(); };
  Tensor fdx = finite_difference_grad(fx, x0, 1e-6);
  CHECK(rel_err(xl.grad(), fdx.values()) < 1e-5);

  // d/dw of the first and last layers.
  for (int l : {0, layers - 1}) {
    auto fw = [&](const Tensor& probe) {
      std::vector<Tensor> mod = ws;
      mod[static_cast<std::size_t>(l)] = probe;
      return net_loss(x0, mod).item();
    };
    Tensor fdw = finite_difference_grad(fw, ws[static_cast<std::size_t>(l)], 1e-6);
    CHECK(rel_err(wl[static_cast<std::size_t>(l)].grad(), fdw.values()) < 1e-5);
  }
}

TEST_CASE("sum gradient vs finite differences") {
  RngStream rng = RngStream::from_seed(20);
  Tensor x = rand_tensor({6}, rng);
  Graph g;
  Tensor leaf = g.leaf(x);
  g.backward(sum(leaf));
  CHECK(leaf.grad() == std::vector<double>(6, 1.0));
}

TEST_CASE("reshape rejects wrong element count") {
  Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK_THROWS_AS(reshape(x, {4, 2}), DimensionError);
}

TEST_CASE("argmax and softmax_rows utilities") {
  Tensor logits({2, 3}, {0.0, 2.0, -1.0, 5.0, 5.0, 1.0});
  auto am = argmax_rows(logits);
  CHECK(am == std::vector<int>{1, 0});  // first index wins ties

  Tensor p = softmax_rows(logits);
  for (int b = 0; b < 2; ++b) {
    double s = 0.0;
    for (int j = 0; j < 3; ++j) s += p.values()[static_cast<std::size_t>(b) * 3 + j];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
}
