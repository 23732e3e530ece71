#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cni/errors.hpp"

namespace cni {

class Graph;

// Dense row-major f64 tensor. A tensor is either a plain constant or, when
// produced by an op on a Graph, additionally carries a node handle used to
// look up its gradient after backward(). Rank-0 tensors (empty shape) hold a
// single scalar.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::vector<int> shape, std::vector<double> values);

  static Tensor zeros(std::vector<int> shape);
  static Tensor full(std::vector<int> shape, double value);
  static Tensor scalar(double value);

  const std::vector<int>& shape() const { return shape_; }
  std::vector<double>& values() { return values_; }
  const std::vector<double>& values() const { return values_; }
  std::size_t size() const { return values_.size(); }

  double item() const;  // scalar tensors only

  bool tracked() const { return graph_ != nullptr; }
  Graph* graph() const { return graph_; }
  int node() const { return node_; }
  // Gradient buffer populated by Graph::backward. Throws StateError when the
  // tensor is not tracked.
  const std::vector<double>& grad() const;

  friend bool same_shape(const Tensor& a, const Tensor& b);

 private:
  friend class Graph;
  std::vector<int> shape_;
  std::vector<double> values_;
  Graph* graph_ = nullptr;
  int node_ = -1;
};

std::string shape_str(const std::vector<int>& shape);
std::size_t shape_numel(const std::vector<int>& shape);

// Dynamic tape. Ops append one record per result node during the forward
// pass; backward() replays the records in reverse, which visits nodes in
// reverse topological order exactly once. A graph is single-use: after
// backward() it must be discarded and a fresh one recorded.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Register a leaf (parameter or input) on this graph.
  Tensor leaf(std::vector<int> shape, std::vector<double> values);
  Tensor leaf(const Tensor& init);

  // Seed grad 1 at `loss` and propagate. Loss must be a scalar recorded on
  // this graph; calling backward twice is a StateError.
  void backward(const Tensor& loss);

  const std::vector<double>& grad(int node) const;
  std::vector<double>& grad_buf(int node);
  std::size_t num_nodes() const { return grads_.size(); }
  bool backward_done() const { return backward_done_; }

  // Op plumbing: adopt a freshly computed value as a tracked node and attach
  // its backward rule. Not meant for use outside the op implementations.
  Tensor adopt(std::vector<int> shape, std::vector<double> values,
               std::function<void(Graph&)> backward_fn);

 private:
  struct Record {
    std::function<void(Graph&)> fn;
  };
  std::vector<std::vector<double>> grads_;
  std::vector<Record> tape_;
  bool backward_done_ = false;
};

// --- ops -------------------------------------------------------------------
// Each op computes eagerly; when an operand is tracked the result is tracked
// on the same graph with the matching backward rule. Mixing operands from
// two different graphs is a StateError.

Tensor matmul(const Tensor& a, const Tensor& b);  // [m×k]·[k×n]

// Elementwise; `add`/`sub`/`mul` accept equal shapes or one scalar operand
// (scalar-tensor is the only broadcast in the engine).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor relu(const Tensor& x);
Tensor scale(const Tensor& x, double c);
// sign(0) = 0; gradient is 0 everywhere.
Tensor sign(const Tensor& x);
// Gradient 1 strictly inside (lo, hi), 0 at and outside the bounds.
Tensor clamp(const Tensor& x, double lo, double hi);

// Batch ops with explicit shapes (no implicit broadcasting).
Tensor add_rowvec(const Tensor& x, const Tensor& v);  // [B×n] + [n] per row
Tensor mul_rowvec(const Tensor& x, const Tensor& v);  // [B×n] ∘ [n] per row
Tensor transpose(const Tensor& x);                    // 2-D
Tensor reshape(const Tensor& x, std::vector<int> shape);
Tensor sum(const Tensor& x);  // -> scalar

// Cross-correlation of x[B×C×H×W] with w[F×C×kh×kw].
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int padding);

// Mean over the batch of -log softmax(logits)[label], via log-sum-exp.
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels);

// Forward-only utilities (never recorded on a tape).
Tensor softmax_rows(const Tensor& logits);        // [B×C] -> row-wise softmax
std::vector<int> argmax_rows(const Tensor& logits);

// Central finite differences (f(x+h e_i) - f(x-h e_i)) / 2h per coordinate.
// Test oracle; evaluates f on untracked copies only.
Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                              double h);

}  // namespace cni
