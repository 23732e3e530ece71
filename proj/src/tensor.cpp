#include "cni/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <sstream>
#include <utility>

namespace cni {

namespace {

// Graph shared by the tracked operands, nullptr if all are constants.
Graph* common_graph(std::initializer_list<const Tensor*> ts) {
  Graph* g = nullptr;
  for (const Tensor* t : ts) {
    if (!t->tracked()) continue;
    if (g != nullptr && g != t->graph()) {
      throw StateError("operands belong to different graphs");
    }
    g = t->graph();
  }
  return g;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

}  // namespace

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int e : shape) {
    // Zero extents are allowed for the rank-0 noise factor [n×0].
    if (e < 0) throw DimensionError("negative extent in shape " + shape_str(shape));
    n *= static_cast<std::size_t>(e);
  }
  return n;
}

Tensor::Tensor(std::vector<int> shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  if (shape_numel(shape_) != values_.size()) {
    throw DimensionError("value count " + std::to_string(values_.size()) +
                         " does not match shape " + shape_str(shape_));
  }
}

Tensor Tensor::zeros(std::vector<int> shape) {
  std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor Tensor::full(std::vector<int> shape, double value) {
  std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

double Tensor::item() const {
  if (values_.size() != 1) {
    throw ContractError("item() on non-scalar tensor of shape " + shape_str(shape_));
  }
  return values_[0];
}

const std::vector<double>& Tensor::grad() const {
  if (!tracked()) throw StateError("grad() on an untracked tensor");
  return graph_->grad(node_);
}

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_; }

Tensor Graph::leaf(std::vector<int> shape, std::vector<double> values) {
  Tensor t(std::move(shape), std::move(values));
  t.graph_ = this;
  t.node_ = static_cast<int>(grads_.size());
  grads_.emplace_back(t.values_.size(), 0.0);
  return t;
}

Tensor Graph::leaf(const Tensor& init) {
  return leaf(init.shape(), init.values());
}

Tensor Graph::adopt(std::vector<int> shape, std::vector<double> values,
                    std::function<void(Graph&)> backward_fn) {
  Tensor t = leaf(std::move(shape), std::move(values));
  tape_.push_back(Record{std::move(backward_fn)});
  return t;
}

void Graph::backward(const Tensor& loss) {
  if (backward_done_) throw StateError("backward called twice on the same graph");
  if (!loss.tracked() || loss.graph() != this) {
    throw ContractError("backward: loss is not recorded on this graph");
  }
  if (loss.size() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  grads_[static_cast<std::size_t>(loss.node())][0] = 1.0;
  for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) {
    it->fn(*this);
  }
  backward_done_ = true;
}

const std::vector<double>& Graph::grad(int node) const {
  return grads_.at(static_cast<std::size_t>(node));
}

std::vector<double>& Graph::grad_buf(int node) {
  return grads_.at(static_cast<std::size_t>(node));
}

// --- matmul ------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2) {
    throw DimensionError("matmul: operands must be 2-D, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const int m = a.shape()[0], k = a.shape()[1];
  const int k2 = b.shape()[0], n = b.shape()[1];
  if (k != k2) {
    throw DimensionError("matmul: inner dimensions disagree " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int kk = 0; kk < k; ++kk) acc += av[i * k + kk] * bv[kk * n + j];
      out[i * n + j] = acc;
    }
  }
  Graph* g = common_graph({&a, &b});
  if (g == nullptr) return Tensor({m, n}, std::move(out));
  // num_nodes() at capture time is the id adopt() will hand the result.
  int an = a.node(), bn = b.node();
  return g->adopt(
      {m, n}, std::move(out), [an, bn, m, n, k, av = a.values(), bv = b.values(), on = (int)g->num_nodes()](Graph& gr) {
        const auto& og = gr.grad(on);
        if (an >= 0) {
          auto& ga = gr.grad_buf(an);
          for (int i = 0; i < m; ++i)
            for (int kk = 0; kk < k; ++kk) {
              double acc = 0.0;
              for (int j = 0; j < n; ++j) acc += og[i * n + j] * bv[kk * n + j];
              ga[i * k + kk] += acc;
            }
        }
        if (bn >= 0) {
          auto& gb = gr.grad_buf(bn);
          for (int kk = 0; kk < k; ++kk)
            for (int j = 0; j < n; ++j) {
              double acc = 0.0;
              for (int i = 0; i < m; ++i) acc += av[i * k + kk] * og[i * n + j];
              gb[kk * n + j] += acc;
            }
        }
      });
}

// --- elementwise -------------------------------------------------------------

namespace {

// Shared skeleton for add/sub/mul with optional scalar operand.
enum class Bin { Add, Sub, Mul };

Tensor binary_op(Bin op, const Tensor& a, const Tensor& b, const char* name) {
  const bool a_scalar = a.size() == 1 && b.size() != 1;
  const bool b_scalar = b.size() == 1 && a.size() != 1;
  if (!a_scalar && !b_scalar) require_same_shape(a, b, name);

  const Tensor& big = a_scalar ? b : a;
  std::vector<double> out(big.size());
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    double x = a_scalar ? av[0] : av[i];
    double y = b_scalar ? bv[0] : bv[i];
    out[i] = op == Bin::Add ? x + y : op == Bin::Sub ? x - y : x * y;
  }
  Graph* g = common_graph({&a, &b});
  if (g == nullptr) return Tensor(big.shape(), std::move(out));
  int an = a.node(), bn = b.node();
  return g->adopt(big.shape(), std::move(out),
                  [op, an, bn, a_scalar, b_scalar, av = a.values(), bv = b.values(),
                   on = (int)g->num_nodes()](Graph& gr) {
                    const auto& og = gr.grad(on);
                    if (an >= 0) {
                      auto& ga = gr.grad_buf(an);
                      for (std::size_t i = 0; i < og.size(); ++i) {
                        double d = op == Bin::Mul ? og[i] * (b_scalar ? bv[0] : bv[i]) : og[i];
                        ga[a_scalar ? 0 : i] += d;
                      }
                    }
                    if (bn >= 0) {
                      auto& gb = gr.grad_buf(bn);
                      for (std::size_t i = 0; i < og.size(); ++i) {
                        double d = og[i];
                        if (op == Bin::Sub) d = -d;
                        if (op == Bin::Mul) d = og[i] * (a_scalar ? av[0] : av[i]);
                        gb[b_scalar ? 0 : i] += d;
                      }
                    }
                  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(Bin::Add, a, b, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(Bin::Sub, a, b, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(Bin::Mul, a, b, "mul"); }

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.size());
  const auto& xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  Graph* g = common_graph({&x});
  if (g == nullptr) return Tensor(x.shape(), std::move(out));
  int xn = x.node();
  return g->adopt(x.shape(), std::move(out),
                  [xn, xv = x.values(), on = (int)g->num_nodes()](Graph& gr) {
                    const auto& og = gr.grad(on);
                    auto& gx = gr.grad_buf(xn);
                    for (std::size_t i = 0; i < og.size(); ++i) {
                      if (xv[i] > 0.0) gx[i] += og[i];
                    }
                  });
}

Tensor scale(const Tensor& x, double c) {
  std::vector<double> out(x.size());
  const auto& xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * c;
  Graph* g = common_graph({&x});
  if (g == nullptr) return Tensor(x.shape(), std::move(out));
  int xn = x.node();
  return g->adopt(x.shape(), std::move(out), [xn, c, on = (int)g->num_nodes()](Graph& gr) {
    const auto& og = gr.grad(on);
    auto& gx = gr.grad_buf(xn);
    for (std::size_t i = 0; i < og.size(); ++i) gx[i] += og[i] * c;
  });
}

Tensor sign(const Tensor& x) {
  std::vector<double> out(x.size());
  const auto& xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = xv[i] > 0.0 ? 1.0 : xv[i] < 0.0 ? -1.0 : 0.0;
  }
  Graph* g = common_graph({&x});
  if (g == nullptr) return Tensor(x.shape(), std::move(out));
  // Zero gradient everywhere: nothing to propagate.
  return g->adopt(x.shape(), std::move(out), [](Graph&) {});
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  if (!(lo <= hi)) throw ContractError("clamp: lo > hi");
  std::vector<double> out(x.size());
  const auto& xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(std::max(xv[i], lo), hi);
  Graph* g = common_graph({&x});
  if (g == nullptr) return Tensor(x.shape(), std::move(out));
  int xn = x.node();
  return g->adopt(x.shape(), std::move(out),
                  [xn, lo, hi, xv = x.values(), on = (int)g->num_nodes()](Graph& gr) {
                    const auto& og = gr.grad(on);
                    auto& gx = gr.grad_buf(xn);
                    for (std::size_t i = 0; i < og.size(); ++i) {
                      if (xv[i] > lo && xv[i] < hi) gx[i] += og[i];
                    }
                  });
}

// --- batch ops ----------------------------------------------------------------

namespace {

void require_rowvec(const Tensor& x, const Tensor& v, const char* op) {
  if (x.shape().size() != 2 || v.shape().size() != 1 || v.shape()[0] != x.shape()[1]) {
    throw DimensionError(std::string(op) + ": want [BxN] and [N], got " + shape_str(x.shape()) +
                         " and " + shape_str(v.shape()));
  }
}

}  // namespace

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
  require_rowvec(x, v, "add_rowvec");
  const int b = x.shape()[0], n = x.shape()[1];
  std::vector<double> out(x.size());
  const auto& xv = x.values();
  const auto& vv = v.values();
  for (int i = 0; i < b; ++i)
    for (int j = 0; j < n; ++j) out[i * n + j] = xv[i * n + j] + vv[j];
  Graph* g = common_graph({&x, &v});
  if (g == nullptr) return Tensor(x.shape(), std::move(out));
  int xn = x.node(), vn = v.node();
  return g->adopt(x.shape(), std::move(out), [xn, vn, b, n, on = (int)g->num_nodes()](Graph& gr) {
    const auto& og = gr.grad(on);
    if (xn >= 0) {
      auto& gx = gr.grad_buf(xn);
      for (std::size_t i = 0; i < og.size(); ++i) gx[i] += og[i];
    }
    if (vn >= 0) {
      auto& gv = gr.grad_buf(vn);
      for (int i = 0; i < b; ++i)
        for (int j = 0; j < n; ++j) gv[j] += og[i * n + j];
    }
  });
}

Tensor mul_rowvec(const Tensor& x, const Tensor& v) {
  require_rowvec(x, v, "mul_rowvec");
  const int b = x.shape()[0], n = x.shape()[1];
  std::vector<double> out(x.size());
  const auto& xv = x.values();
  const auto& vv = v.values();
  for (int i = 0; i < b; ++i)
    for (int j = 0; j < n; ++j) out[i * n + j] = xv[i * n + j] * vv[j];
  Graph* g = common_graph({&x, &v});
  if (g == nullptr) return Tensor(x.shape(), std::move(out));
  int xn = x.node(), vn = v.node();
  return g->adopt(x.shape(), std::move(out),
                  [xn, vn, b, n, xv = x.values(), vv = v.values(), on = (int)g->num_nodes()](Graph& gr) {
                    const auto& og = gr.grad(on);
                    if (xn >= 0) {
                      auto& gx = gr.grad_buf(xn);
                      for (int i = 0; i < b; ++i)
                        for (int j = 0; j < n; ++j) gx[i * n + j] += og[i * n + j] * vv[j];
                    }
                    if (vn >= 0) {
                      auto& gv = gr.grad_buf(vn);
                      for (int i = 0; i < b; ++i)
                        for (int j = 0; j < n; ++j) gv[j] += og[i * n + j] * xv[i * n + j];
                    }
                  });
}

Tensor transpose(const Tensor& x) {
  if (x.shape().size() != 2) {
    throw DimensionError("transpose: want 2-D, got " + shape_str(x.shape()));
  }
  const int m = x.shape()[0], n = x.shape()[1];
  std::vector<double> out(x.size());
  const auto& xv = x.values();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[j * m + i] = xv[i * n + j];
  Graph* g = common_graph({&x});
  if (g == nullptr) return Tensor({n, m}, std::move(out));
  int xn = x.node();
  return g->adopt({n, m}, std::move(out), [xn, m, n, on = (int)g->num_nodes()](Graph& gr) {
    const auto& og = gr.grad(on);
    auto& gx = gr.grad_buf(xn);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) gx[i * n + j] += og[j * m + i];
  });
}

Tensor reshape(const Tensor& x, std::vector<int> shape) {
  if (shape_numel(shape) != x.size()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
  }
  Graph* g = common_graph({&x});
  if (g == nullptr) return Tensor(std::move(shape), x.values());
  int xn = x.node();
  return g->adopt(std::move(shape), x.values(), [xn, on = (int)g->num_nodes()](Graph& gr) {
    const auto& og = gr.grad(on);
    auto& gx = gr.grad_buf(xn);
    for (std::size_t i = 0; i < og.size(); ++i) gx[i] += og[i];
  });
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  Graph* g = common_graph({&x});
  if (g == nullptr) return Tensor::scalar(acc);
  int xn = x.node();
  std::size_t n = x.size();
  return g->adopt({}, {acc}, [xn, n, on = (int)g->num_nodes()](Graph& gr) {
    double og = gr.grad(on)[0];
    auto& gx = gr.grad_buf(xn);
    for (std::size_t i = 0; i < n; ++i) gx[i] += og;
  });
}

// --- conv2d --------------------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int padding) {
  if (x.shape().size() != 4 || w.shape().size() != 4) {
    throw DimensionError("conv2d: want x[BxCxHxW] and w[FxCxkhxkw], got " + shape_str(x.shape()) +
                         " and " + shape_str(w.shape()));
  }
  const int B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  const int F = w.shape()[0], Cw = w.shape()[1], kh = w.shape()[2], kw = w.shape()[3];
  if (C != Cw) {
    throw DimensionError("conv2d: channel mismatch " + shape_str(x.shape()) + " vs " +
                         shape_str(w.shape()));
  }
  if (stride < 1 || padding < 0) throw DimensionError("conv2d: invalid stride/padding");
  if (kh > H + 2 * padding || kw > W + 2 * padding) {
    throw DimensionError("conv2d: kernel larger than padded input");
  }
  const int OH = (H + 2 * padding - kh) / stride + 1;
  const int OW = (W + 2 * padding - kw) / stride + 1;

  std::vector<double> out(static_cast<std::size_t>(B) * F * OH * OW, 0.0);
  const auto& xv = x.values();
  const auto& wv = w.values();
  auto xi = [C, H, W](int b, int c, int i, int j) { return ((b * C + c) * H + i) * W + j; };
  auto wi = [C, kh, kw](int f, int c, int i, int j) { return ((f * C + c) * kh + i) * kw + j; };
  auto oi = [F, OH, OW](int b, int f, int i, int j) { return ((b * F + f) * OH + i) * OW + j; };

  for (int b = 0; b < B; ++b)
    for (int f = 0; f < F; ++f)
      for (int oh = 0; oh < OH; ++oh)
        for (int ow = 0; ow < OW; ++ow) {
          double acc = 0.0;
          for (int c = 0; c < C; ++c)
            for (int i = 0; i < kh; ++i)
              for (int j = 0; j < kw; ++j) {
                int ih = oh * stride + i - padding;
                int iw = ow * stride + j - padding;
                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                acc += xv[xi(b, c, ih, iw)] * wv[wi(f, c, i, j)];
              }
          out[oi(b, f, oh, ow)] = acc;
        }

  Graph* g = common_graph({&x, &w});
  if (g == nullptr) return Tensor({B, F, OH, OW}, std::move(out));
  int xn = x.node(), wn = w.node();
  return g->adopt({B, F, OH, OW}, std::move(out),
                  [=, xv = x.values(), wv = w.values(), on = (int)g->num_nodes()](Graph& gr) {
                    const auto& og = gr.grad(on);
                    auto* gx = xn >= 0 ? &gr.grad_buf(xn) : nullptr;
                    auto* gw = wn >= 0 ? &gr.grad_buf(wn) : nullptr;
                    for (int b = 0; b < B; ++b)
                      for (int f = 0; f < F; ++f)
                        for (int oh = 0; oh < OH; ++oh)
                          for (int ow = 0; ow < OW; ++ow) {
                            double go = og[oi(b, f, oh, ow)];
                            if (go == 0.0) continue;
                            for (int c = 0; c < C; ++c)
                              for (int i = 0; i < kh; ++i)
                                for (int j = 0; j < kw; ++j) {
                                  int ih = oh * stride + i - padding;
                                  int iw = ow * stride + j - padding;
                                  if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                                  if (gx) (*gx)[xi(b, c, ih, iw)] += go * wv[wi(f, c, i, j)];
                                  if (gw) (*gw)[wi(f, c, i, j)] += go * xv[xi(b, c, ih, iw)];
                                }
                          }
                  });
}

// --- softmax cross-entropy -------------------------------------------------------

namespace {

// Row-wise log-sum-exp; also writes per-row max if wanted by callers.
double row_lse(const double* row, int c) {
  double m = row[0];
  for (int j = 1; j < c; ++j) m = std::max(m, row[j]);
  double s = 0.0;
  for (int j = 0; j < c; ++j) s += std::exp(row[j] - m);
  return m + std::log(s);
}

}  // namespace

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.shape().size() != 2) {
    throw DimensionError("softmax_cross_entropy: want [BxC], got " + shape_str(logits.shape()));
  }
  const int B = logits.shape()[0], C = logits.shape()[1];
  if (static_cast<int>(labels.size()) != B) {
    throw DimensionError("softmax_cross_entropy: batch " + std::to_string(B) + " but " +
                         std::to_string(labels.size()) + " labels");
  }
  const auto& lv = logits.values();
  std::vector<double> lse(B);
  double loss = 0.0;
  for (int b = 0; b < B; ++b) {
    if (labels[b] < 0 || labels[b] >= C) {
      throw IndexError("softmax_cross_entropy: label " + std::to_string(labels[b]) +
                       " out of range [0," + std::to_string(C) + ")");
    }
    lse[b] = row_lse(&lv[static_cast<std::size_t>(b) * C], C);
    loss += lse[b] - lv[static_cast<std::size_t>(b) * C + labels[b]];
  }
  loss /= B;

  Graph* g = common_graph({&logits});
  if (g == nullptr) return Tensor::scalar(loss);
  int ln = logits.node();
  return g->adopt({}, {loss},
                  [ln, B, C, labels, lse, lv = logits.values(), on = (int)g->num_nodes()](Graph& gr) {
                    double og = gr.grad(on)[0];
                    auto& gl = gr.grad_buf(ln);
                    double sc = og / B;
                    for (int b = 0; b < B; ++b)
                      for (int j = 0; j < C; ++j) {
                        double p = std::exp(lv[static_cast<std::size_t>(b) * C + j] - lse[b]);
                        double oh = j == labels[b] ? 1.0 : 0.0;
                        gl[static_cast<std::size_t>(b) * C + j] += (p - oh) * sc;
                      }
                  });
}

Tensor softmax_rows(const Tensor& logits) {
  if (logits.shape().size() != 2) {
    throw DimensionError("softmax_rows: want [BxC], got " + shape_str(logits.shape()));
  }
  const int B = logits.shape()[0], C = logits.shape()[1];
  const auto& lv = logits.values();
  std::vector<double> out(logits.size());
  for (int b = 0; b < B; ++b) {
    double lse = row_lse(&lv[static_cast<std::size_t>(b) * C], C);
    for (int j = 0; j < C; ++j) {
      out[static_cast<std::size_t>(b) * C + j] =
          std::exp(lv[static_cast<std::size_t>(b) * C + j] - lse);
    }
  }
  return Tensor(logits.shape(), std::move(out));
}

std::vector<int> argmax_rows(const Tensor& logits) {
  if (logits.shape().size() != 2) {
    throw DimensionError("argmax_rows: want [BxC], got " + shape_str(logits.shape()));
  }
  const int B = logits.shape()[0], C = logits.shape()[1];
  const auto& lv = logits.values();
  std::vector<int> out(B);
  for (int b = 0; b < B; ++b) {
    int best = 0;
    for (int j = 1; j < C; ++j) {
      if (lv[static_cast<std::size_t>(b) * C + j] > lv[static_cast<std::size_t>(b) * C + best])
        best = j;
    }
    out[b] = best;
  }
  return out;
}

Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                              double h) {
  Tensor probe(x.shape(), x.values());
  std::vector<double> grad(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    double orig = probe.values()[i];
    probe.values()[i] = orig + h;
    double fp = f(probe);
    probe.values()[i] = orig - h;
    double fm = f(probe);
    probe.values()[i] = orig;
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return Tensor(x.shape(), std::move(grad));
}

}  // namespace cni
