// Reverse-mode automatic differentiation over dense matrices.
//
// A Tape owns a DAG of matrix-valued nodes.  Forward values are computed
// eagerly as ops are recorded; backward() walks the tape in reverse and
// accumulates gradients into every node reachable from a scalar root.
// Handles (Var) are cheap indices, valid only for the tape that made them.

#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace prtraj::ad {

using Mat = Eigen::MatrixXd;

class Tape;

struct Var {
  std::int32_t idx = -1;
  bool valid() const { return idx >= 0; }
};

class Tape {
 public:
  // Leaf with gradient tracking (parameters, inputs under test).
  Var leaf(const Mat& value);
  // Constant: never receives a gradient, prunes backward closures.
  Var constant(const Mat& value);
  Var scalar(double value);

  const Mat& value(Var v) const { return nodes_[v.idx].value; }
  // Zero matrix if backward() never reached the node.
  const Mat& grad(Var v) const;
  bool needs_grad(Var v) const { return nodes_[v.idx].needs_grad; }
  std::size_t size() const { return nodes_.size(); }

  // -- arithmetic ----------------------------------------------------------
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var cmul(Var a, Var b);  // elementwise product
  Var cdiv(Var a, Var b);  // elementwise quotient
  Var matmul(Var a, Var b);
  Var transpose(Var a);
  Var scale(Var a, double k);
  Var add_scalar(Var a, double k);
  Var neg(Var a) { return scale(a, -1.0); }
  // y = x * W^T + broadcast bias row (bias is 1 x n)
  Var affine(Var x, Var w, Var b);
  Var add_rowvec(Var a, Var row);
  Var add_n(const std::vector<Var>& xs);

  // -- shape ---------------------------------------------------------------
  Var concat_rows(const std::vector<Var>& xs);
  Var concat_cols(const std::vector<Var>& xs);
  Var slice_rows(Var a, Eigen::Index start, Eigen::Index count);
  Var slice_cols(Var a, Eigen::Index start, Eigen::Index count);
  // Gather rows by index; duplicate indices accumulate in backward.
  Var row_gather(Var a, const std::vector<Eigen::Index>& rows);
  // Scatter-add rows of a into an out_rows-tall zero matrix: out.row(rows[k]) += a.row(k).
  Var row_scatter(Var a, const std::vector<Eigen::Index>& rows, Eigen::Index out_rows);
  // Row-major reshape preserving element order.
  Var reshape(Var a, Eigen::Index rows, Eigen::Index cols);
  // y.row(i) = a.row(i) * s(i, 0); s is a column vector.
  Var colwise_scale(Var a, Var s);

  // -- reductions ----------------------------------------------------------
  Var sum_all(Var a);
  Var mean_all(Var a);
  Var sum_rows(Var a);   // column vector of row sums (m x 1)
  Var mean_rows(Var a);  // (m x 1)
  Var mean_over_rows(Var a);  // 1 x n column means

  // -- nonlinearities ------------------------------------------------------
  Var tanh_(Var a);
  Var relu(Var a);
  Var leaky_relu(Var a, double slope);
  Var gelu(Var a);  // exact erf form
  Var sigmoid(Var a);
  Var exp_(Var a);
  Var log_(Var a);
  Var sqrt_(Var a);
  Var softmax_rows(Var a);
  Var log_softmax_rows(Var a);
  // Per-row layer norm with broadcast gamma/beta (1 x n), eps inside sqrt.
  Var layer_norm_rows(Var a, Var gamma, Var beta, double eps = 1e-5);
  // Multiplies by a fixed 0/k mask (inverted dropout); mask is not a node.
  Var mask_mul(Var a, const Mat& mask);

  // Root must be 1x1.  Clears old grads, seeds d(root)=1, runs closures in
  // reverse recording order.
  void backward(Var root);

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool needs_grad = false;
    bool grad_alloc = false;
    std::function<void(Tape&)> back;
  };

  std::vector<Node> nodes_;

  Var push(Mat value, bool needs_grad, std::function<void(Tape&)> back);
  Mat& grad_ref(Var v);
  void accumulate(Var v, const Mat& g);
  friend struct GradAccess;
};

// Test/optimizer helper: mutable access to a node's gradient.
struct GradAccess {
  static Mat& grad(Tape& t, Var v) { return t.grad_ref(v); }
};

// Softmax over variable-size groups of rows of a column vector.  groups[g]
// lists the row indices belonging to group g; each row must appear in at
// most one group (rows in no group come back unspecified).  Runs as one
// padded dense softmax, so group sizes may differ freely.
Var grouped_softmax(Tape& t, Var scores,
                    const std::vector<std::vector<Eigen::Index>>& groups);

}  // namespace prtraj::ad
