#include "prtraj/ad.hpp"

#include "prtraj/util.hpp"

#include <cmath>

namespace prtraj::ad {

namespace {
using RowArr = Eigen::Array<double, 1, Eigen::Dynamic>;

void require(bool cond, const char* msg) {
  if (!cond) throw util::RuntimeError(std::string("autodiff: ") + msg);
}
constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;
}  // namespace

Var Tape::push(Mat value, bool needs_grad, std::function<void(Tape&)> back) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = needs_grad;
  n.back = needs_grad ? std::move(back) : nullptr;
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

Var Tape::leaf(const Mat& value) { return push(value, true, nullptr); }
Var Tape::constant(const Mat& value) { return push(value, false, nullptr); }
Var Tape::scalar(double value) { return constant(Mat::Constant(1, 1, value)); }

const Mat& Tape::grad(Var v) const {
  const Node& n = nodes_[v.idx];
  if (n.grad_alloc) return n.grad;
  thread_local Mat zero;
  zero = Mat::Zero(n.value.rows(), n.value.cols());
  return zero;
}

Mat& Tape::grad_ref(Var v) {
  Node& n = nodes_[v.idx];
  if (!n.grad_alloc) {
    n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    n.grad_alloc = true;
  }
  return n.grad;
}

void Tape::accumulate(Var v, const Mat& g) {
  Node& n = nodes_[v.idx];
  if (!n.needs_grad) return;
  if (!n.grad_alloc) {
    n.grad = g;
    n.grad_alloc = true;
  } else {
    n.grad += g;
  }
}

void Tape::backward(Var root) {
  Node& r = nodes_[root.idx];
  require(r.value.rows() == 1 && r.value.cols() == 1, "backward root must be 1x1");
  if (!r.needs_grad) return;
  for (Node& n : nodes_) n.grad_alloc = false;
  r.grad = Mat::Ones(1, 1);
  r.grad_alloc = true;
  for (std::int32_t i = root.idx; i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.grad_alloc && n.back) n.back(*this);
  }
}

// ---------------------------------------------------------------------------
// Arithmetic
// ---------------------------------------------------------------------------

Var Tape::add(Var a, Var b) {
  const Mat& av = value(a);
  const Mat& bv = value(b);
  require(av.rows() == bv.rows() && av.cols() == bv.cols(), "add: shape mismatch");
  bool ng = needs_grad(a) || needs_grad(b);
  Var out{static_cast<std::int32_t>(nodes_.size())};
  return push(av + bv, ng, [a, b, out](Tape& t) {
    const Mat& g = t.nodes_[out.idx].grad;
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var Tape::sub(Var a, Var b) {
  const Mat& av = value(a);
  const Mat& bv = value(b);
  require(av.rows() == bv.rows() && av.cols() == bv.cols(), "sub: shape mismatch");
  bool ng = needs_grad(a) || needs_grad(b);
  Var out{static_cast<std::int32_t>(nodes_.size())};
  return push(av - bv, ng, [a, b, out](Tape& t) {
    const Mat& g = t.nodes_[out.idx].grad;
    t.accumulate(a, g);
    t.accumulate(b, -g);
  });
}

Var Tape::cmul(Var a, Var b) {
  const Mat& av = value(a);
  const Mat& bv = value(b);
  require(av.rows() == bv.rows() && av.cols() == bv.cols(), "cmul: shape mismatch");
  bool ng = needs_grad(a) || needs_grad(b);
  Var out{static_cast<std::int32_t>(nodes_.size())};
  return push(av.cwiseProduct(bv), ng, [a, b, out](Tape& t) {
    const Mat& g = t.nodes_[out.idx].grad;
    t.accumulate(a, g.cwiseProduct(t.value(b)));
    t.accumulate(b, g.cwiseProduct(t.value(a)));
  });
}

Var Tape::cdiv(Var a, Var b) {
  const Mat& av = value(a);
  const Mat& bv = value(b);
  require(av.rows() == bv.rows() && av.cols() == bv.cols(), "cdiv: shape mismatch");
  bool ng = needs_grad(a) || needs_grad(b);
  Var out{static_cast<std::int32_t>(nodes_.size())};
  return push(av.cwiseQuotient(bv), ng, [a, b, out](Tape& t) {
    const Mat& g = t.nodes_[out.idx].grad;
    const Mat& den = t.value(b);
    t.accumulate(a, g.cwiseQuotient(den));
    t.accumulate(b, -g.cwiseProduct(t.value(out)).cwiseQuotient(den));
  });
}

Var Tape::matmul(Var a, Var b) {
  const Mat& av = value(a);
  const Mat& bv = value(b);
  require(av.cols() == bv.rows(), "matmul: inner dims differ");
  bool ng = needs_grad(a) || needs_grad(b);
  Var out{static_cast<std::int32_t>(nodes_.size())};
  return push(av * bv, ng, [a, b, out](Tape& t) {
    const Mat& g = t.nodes_[out.idx].grad;
    t.accumulate(a, g * t.value(b).transpose());
    t.accumulate(b, t.value(a).transpose() * g);
  });
}

Var Tape::transpose(Var a) {
  Var out{static_cast<std::int32_t>(nodes_.size())};
  return push(value(a).transpose(), needs_grad(a), [a, out](Tape& t) {
    t.accumulate(a, t.nodes_[out.idx].grad.transpose());
  });
}

Var Tape::scale(Var a, double k) {
  Var out{static_cast<std::int32_t>(nodes_.size())};
  return push(value(a) * k, needs_grad(a), [a, k, out](Tape& t) {
    t.accumulate(a, t.nodes_[out.idx].grad * k);
  });
}

Var Tape::add_scalar(Var a, double k) {
  Var out{static_cast<std::int32_t>(nodes_.size())};
  return push((value(a).array() + k).matrix(), needs_grad(a), [a, out](Tape& t) {
    t.accumulate(a, t.nodes_[out.idx].grad);
  });
}

Var Tape::affine(Var x, Var w, Var b) {
  const Mat& xv = value(x);
  const Mat& wv = value(w);
  const Mat& bv = value(b);
  require(xv.cols() == wv.cols(), "affine: x/W dims differ");
  require(bv.rows() == 1 && bv.cols() == wv.rows(), "affine: bias must be 1 x out");
  bool ng = needs_grad(x) || needs_grad(w) || needs_grad(b);
  Mat y = xv * wv.transpose();
  y.rowwise() += bv.row(0);
  Var out{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(y), ng, [x, w, b, out](Tape& t) {
    const Mat& g = t.nodes_[out.idx].grad;
    t.accumulate(x, g * t.value(w));
    t.accumulate(w, g.transpose() * t.value(x));
    t.accumulate(b, g.colwise().sum());
  });
}

Var Tape::add_rowvec(Var a, Var row) {
  const Mat& av = value(a);
  const Mat& rv = value(row);
  require(rv.rows() == 1 && rv.cols() == av.cols(), "add_rowvec: shape mismatch");
  bool ng = needs_grad(a) || needs_grad(row);
  Mat y = av;
  y.rowwise() += rv.row(0);
  Var out{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(y), ng, [a, row, out](Tape& t) {
    const Mat& g = t.nodes_[out.idx].grad;
    t.accumulate(a, g);
    t.accumulate(row, g.colwise().sum());
  });
}

Var Tape::add_n(const std::vector<Var>& xs) {
  require(!xs.empty(), "add_n: empty input");
  Mat y = value(xs[0]);
  bool ng = needs_grad(xs[0]);
  for (std::size_t i = 1; i < xs.size(); ++i) {
    const Mat& v = value(xs[i]);
    require(v.rows() == y.rows() && v.cols() == y.cols(), "add_n: shape mismatch");
    y += v;
    ng = ng || needs_grad(xs[i]);
  }
  Var out{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(y), ng, [xs, out](Tape& t) {
    const Mat& g = t.nodes_[out.idx].grad;
    for (Var x : xs) t.accumulate(x, g);
  });
}

// ---------------------------------------------------------------------------
// Shape
// ---------------------------------------------------------------------------

Var Tape::concat_rows(const std::vector<Var>& xs) {
  require(!xs.empty(), "concat_rows: empty input");
  Eigen::Index rows = 0;
  Eigen::Index cols = value(xs[0]).cols();
  bool ng = false;
  for (Var x : xs) {
    require(value(x).cols() == cols, "concat_rows: column mismatch");
    rows += value(x).rows();
    ng = ng || needs_grad(x);
  }
  Mat y(rows, cols);
  Eigen::Index at = 0;
  for (Var x : xs) {
    const Mat& v = value(x);
    y.middleRows(at, v.rows()) = v;
    at += v.rows();
  }
  Var out{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(y), ng, [xs, out](Tape& t) {
    const Mat& g = t.nodes_[out.idx].grad;
    Eigen::Index at2 = 0;
    for (Var x : xs) {
      Eigen::Index r = t.value(x).rows();
      t.accumulate(x, g.middleRows(at2, r));
      at2 += r;
    }
  });
}

Var Tape::concat_cols(const std::vector<Var>& xs) {
  require(!xs.empty(), "concat_cols: empty input");
  Eigen::Index rows = value(xs[0]).rows();
  Eigen::Index cols = 0;
  bool ng = false;
  for (Var x : xs) {
    require(value(x).rows() == rows, "concat_cols: row mismatch");
    cols += value(x).cols();
    ng = ng || needs_grad(x);
  }
  Mat y(rows, cols);
  Eigen::Index at = 0;
  for (Var x : xs) {
    const Mat& v = value(x);
    y.middleCols(at, v.cols()) = v;
    at += v.cols();
  }
  Var out{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(y), ng, [xs, out](Tape& t) {
    const Mat& g = t.nodes_[out.idx].grad;
    Eigen::Index at2 = 0;
    for (Var x : xs) {
      Eigen::Index c = t.value(x).cols();
      t.accumulate(x, g.middleCols(at2, c));
      at2 += c;
    }
  });
}

Var Tape::slice_rows(Var a, Eigen::Index start, Eigen::Index count) {
  const Mat& av = value(a);
  require(start >= 0 && count >= 0 && start + count <= av.rows(), "slice_rows: out of range");
  Var out{static_cast<std::int32_t>(nodes_.size())};
  return push(av.middleRows(start, count), needs_grad(a), [a, start, count, out](Tape& t) {
    const Mat& av2 = t.value(a);
    Mat g = Mat::Zero(av2.rows(), av2.cols());
    g.middleRows(start, count) = t.nodes_[out.idx].grad;
    t.accumulate(a, g);
  });
}

Var Tape::slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  const Mat& av = value(a);
  require(start >= 0 && count >= 0 && start + count <= av.cols(), "slice_cols: out of range");
  Var out{static_cast<std::int32_t>(nodes_.size())};
  return push(av.middleCols(start, count), needs_grad(a), [a, start, count, out](Tape& t) {
    const Mat& av2 = t.value(a);
    Mat g = Mat::Zero(av2.rows(), av2.cols());
    g.middleCols(start, count) = t.nodes_[out.idx].grad;
    t.accumulate(a, g);
  });
}

Var Tape::row_gather(Var a, const std::vector<Eigen::Index>& rows) {
  const Mat& av = value(a);
  Mat y(static_cast<Eigen::Index>(rows.size()), av.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] >= 0 && rows[i] < av.rows(), "row_gather: index out of range");
    y.row(static_cast<Eigen::Index>(i)) = av.row(rows[i]);
  }
  Var out{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(y), needs_grad(a), [a, rows, out](Tape& t) {
    const Mat& g = t.nodes_[out.idx].grad;
    const Mat& av2 = t.value(a);
    Mat da = Mat::Zero(av2.rows(), av2.cols());
    for (std::size_t i = 0; i < rows.size(); ++i)
      da.row(rows[i]) += g.row(static_cast<Eigen::Index>(i));
    t.accumulate(a, da);
  });
}

Var Tape::row_scatter(Var a, const std::vector<Eigen::Index>& rows, Eigen::Index out_rows) {
  const Mat& av = value(a);
  require(static_cast<Eigen::Index>(rows.size()) == av.rows(), "row_scatter: index count");
  Mat y = Mat::Zero(out_rows, av.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] >= 0 && rows[i] < out_rows, "row_scatter: index out of range");
    y.row(rows[i]) += av.row(static_cast<Eigen::Index>(i));
  }
  Var out{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(y), needs_grad(a), [a, rows, out](Tape& t) {
    const Mat& g = t.nodes_[out.idx].grad;
    const Mat& av2 = t.value(a);
    Mat da(av2.rows(), av2.cols());
    for (std::size_t i = 0; i < rows.size(); ++i)
      da.row(static_cast<Eigen::Index>(i)) = g.row(rows[i]);
    t.accumulate(a, da);
  });
}

Var Tape::reshape(Var a, Eigen::Index rows, Eigen::Index cols) {
  const Mat& av = value(a);
  require(rows * cols == av.size(), "reshape: element count mismatch");
  using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  RowMajor rm = av;
  Mat y = Eigen::Map<const RowMajor>(rm.data(), rows, cols);
  Var out{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(y), needs_grad(a), [a, out](Tape& t) {
    const Mat& av2 = t.value(a);
    RowMajor gm = t.nodes_[out.idx].grad;
    Mat da = Eigen::Map<const RowMajor>(gm.data(), av2.rows(), av2.cols());
    t.accumulate(a, da);
  });
}

Var Tape::colwise_scale(Var a, Var s) {
  const Mat& av = value(a);
  const Mat& sv = value(s);
  require(sv.cols() == 1 && sv.rows() == av.rows(), "colwise_scale: s must be m x 1");
  bool ng = needs_grad(a) || needs_grad(s);
  Var out{static_cast<std::int32_t>(nodes_.size())};
  return push((av.array().colwise() * sv.col(0).array()).matrix(), ng, [a, s, out](Tape& t) {
    const Mat& g = t.nodes_[out.idx].grad;
    const Mat& av2 = t.value(a);
    const Mat& sv2 = t.value(s);
    t.accumulate(a, (g.array().colwise() * sv2.col(0).array()).matrix());
    t.accumulate(s, g.cwiseProduct(av2).rowwise().sum());
  });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

Var Tape::sum_all(Var a) {
  Var out{static_cast<std::int32_t>(nodes_.size())};
  return push(Mat::Constant(1, 1, value(a).sum()), needs_grad(a), [a, out](Tape& t) {
    const Mat& av = t.value(a);
    t.accumulate(a, Mat::Constant(av.rows(), av.cols(), t.nodes_[out.idx].grad(0, 0)));
  });
}

Var Tape::mean_all(Var a) {
  double n = static_cast<double>(value(a).size());
  Var out{static_cast<std::int32_t>(nodes_.size())};
  return push(Mat::Constant(1, 1, value(a).mean()), needs_grad(a), [a, n, out](Tape& t) {
    const Mat& av = t.value(a);
    t.accumulate(a, Mat::Constant(av.rows(), av.cols(), t.nodes_[out.idx].grad(0, 0) / n));
  });
}

Var Tape::sum_rows(Var a) {
  Var out{static_cast<std::int32_t>(nodes_.size())};
  return push(value(a).rowwise().sum(), needs_grad(a), [a, out](Tape& t) {
    const Mat& g = t.nodes_[out.idx].grad;
    t.accumulate(a, g * Eigen::RowVectorXd::Ones(t.value(a).cols()));
  });
}

Var Tape::mean_rows(Var a) {
  double n = static_cast<double>(value(a).cols());
  Var out{static_cast<std::int32_t>(nodes_.size())};
  return push(value(a).rowwise().mean(), needs_grad(a), [a, n, out](Tape& t) {
    const Mat& g = t.nodes_[out.idx].grad;
    t.accumulate(a, (g / n) * Eigen::RowVectorXd::Ones(t.value(a).cols()));
  });
}

Var Tape::mean_over_rows(Var a) {
  double m = static_cast<double>(value(a).rows());
  Var out{static_cast<std::int32_t>(nodes_.size())};
  return push(value(a).colwise().mean(), needs_grad(a), [a, m, out](Tape& t) {
    const Mat& g = t.nodes_[out.idx].grad;
    t.accumulate(a, Eigen::VectorXd::Ones(t.value(a).rows()) * (g / m));
  });
}

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

Var Tape::tanh_(Var a) {
  Var out{static_cast<std::int32_t>(nodes_.size())};
  return push(value(a).array().tanh().matrix(), needs_grad(a), [a, out](Tape& t) {
    const Mat& y = t.value(out);
    const Mat& g = t.nodes_[out.idx].grad;
    t.accumulate(a, (g.array() * (1.0 - y.array().square())).matrix());
  });
}

Var Tape::relu(Var a) {
  Var out{static_cast<std::int32_t>(nodes_.size())};
  return push(value(a).cwiseMax(0.0), needs_grad(a), [a, out](Tape& t) {
    const Mat& x = t.value(a);
    const Mat& g = t.nodes_[out.idx].grad;
    t.accumulate(a, (g.array() * (x.array() > 0.0).cast<double>()).matrix());
  });
}

Var Tape::leaky_relu(Var a, double slope) {
  Mat y = value(a).unaryExpr([slope](double x) { return x > 0.0 ? x : slope * x; });
  Var out{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(y), needs_grad(a), [a, slope, out](Tape& t) {
    const Mat& x = t.value(a);
    const Mat& g = t.nodes_[out.idx].grad;
    Mat d = x.unaryExpr([slope](double v) { return v > 0.0 ? 1.0 : slope; });
    t.accumulate(a, g.cwiseProduct(d));
  });
}

Var Tape::gelu(Var a) {
  Mat y = value(a).unaryExpr([](double x) { return 0.5 * x * std::erfc(-x * kInvSqrt2); });
  Var out{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(y), needs_grad(a), [a, out](Tape& t) {
    const Mat& x = t.value(a);
    const Mat& g = t.nodes_[out.idx].grad;
    Mat d = x.unaryExpr([](double v) {
      double cdf = 0.5 * std::erfc(-v * kInvSqrt2);
      double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
      return cdf + v * pdf;
    });
    t.accumulate(a, g.cwiseProduct(d));
  });
}

Var Tape::sigmoid(Var a) {
  Mat y = value(a).unaryExpr([](double x) {
    return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  });
  Var out{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(y), needs_grad(a), [a, out](Tape& t) {
    const Mat& y2 = t.value(out);
    const Mat& g = t.nodes_[out.idx].grad;
    t.accumulate(a, (g.array() * y2.array() * (1.0 - y2.array())).matrix());
  });
}

Var Tape::exp_(Var a) {
  Var out{static_cast<std::int32_t>(nodes_.size())};
  return push(value(a).array().exp().matrix(), needs_grad(a), [a, out](Tape& t) {
    t.accumulate(a, t.nodes_[out.idx].grad.cwiseProduct(t.value(out)));
  });
}

Var Tape::log_(Var a) {
  Var out{static_cast<std::int32_t>(nodes_.size())};
  return push(value(a).array().log().matrix(), needs_grad(a), [a, out](Tape& t) {
    t.accumulate(a, t.nodes_[out.idx].grad.cwiseQuotient(t.value(a)));
  });
}

Var Tape::sqrt_(Var a) {
  Var out{static_cast<std::int32_t>(nodes_.size())};
  return push(value(a).array().sqrt().matrix(), needs_grad(a), [a, out](Tape& t) {
    t.accumulate(a, (t.nodes_[out.idx].grad.array() / (2.0 * t.value(out).array())).matrix());
  });
}

Var Tape::softmax_rows(Var a) {
  const Mat& av = value(a);
  Mat y(av.rows(), av.cols());
  for (Eigen::Index i = 0; i < av.rows(); ++i) {
    RowArr e = (av.row(i).array() - av.row(i).maxCoeff()).exp();
    y.row(i) = (e / e.sum()).matrix();
  }
  Var out{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(y), needs_grad(a), [a, out](Tape& t) {
    const Mat& y2 = t.value(out);
    const Mat& g = t.nodes_[out.idx].grad;
    Mat gy = g.cwiseProduct(y2);
    Eigen::VectorXd s = gy.rowwise().sum();
    t.accumulate(a, gy - y2.cwiseProduct(s * Eigen::RowVectorXd::Ones(y2.cols())));
  });
}

Var Tape::log_softmax_rows(Var a) {
  const Mat& av = value(a);
  Mat y(av.rows(), av.cols());
  for (Eigen::Index i = 0; i < av.rows(); ++i) {
    double mx = av.row(i).maxCoeff();
    double lse = mx + std::log((av.row(i).array() - mx).exp().sum());
    y.row(i) = (av.row(i).array() - lse).matrix();
  }
  Var out{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(y), needs_grad(a), [a, out](Tape& t) {
    const Mat& y2 = t.value(out);
    const Mat& g = t.nodes_[out.idx].grad;
    Mat sm = y2.array().exp().matrix();
    Eigen::VectorXd s = g.rowwise().sum();
    t.accumulate(a, g - sm.cwiseProduct(s * Eigen::RowVectorXd::Ones(y2.cols())));
  });
}

Var Tape::layer_norm_rows(Var a, Var gamma, Var beta, double eps) {
  const Mat& av = value(a);
  const Mat& gv = value(gamma);
  const Mat& bv = value(beta);
  require(gv.rows() == 1 && gv.cols() == av.cols(), "layer_norm: gamma must be 1 x n");
  require(bv.rows() == 1 && bv.cols() == av.cols(), "layer_norm: beta must be 1 x n");
  Mat y(av.rows(), av.cols());
  for (Eigen::Index i = 0; i < av.rows(); ++i) {
    double mu = av.row(i).mean();
    double var = (av.row(i).array() - mu).square().mean();
    RowArr xh = (av.row(i).array() - mu) / std::sqrt(var + eps);
    y.row(i) = (xh * gv.row(0).array() + bv.row(0).array()).matrix();
  }
  bool ng = needs_grad(a) || needs_grad(gamma) || needs_grad(beta);
  Var out{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(y), ng, [a, gamma, beta, eps, out](Tape& t) {
    const Mat& x = t.value(a);
    const Mat& gmv = t.value(gamma);
    const Mat& g = t.nodes_[out.idx].grad;
    Eigen::Index ncols = x.cols();
    Mat da(x.rows(), ncols);
    Eigen::RowVectorXd dgamma = Eigen::RowVectorXd::Zero(ncols);
    Eigen::RowVectorXd dbeta = Eigen::RowVectorXd::Zero(ncols);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      double mu = x.row(i).mean();
      double var = (x.row(i).array() - mu).square().mean();
      double inv = 1.0 / std::sqrt(var + eps);
      RowArr xh = (x.row(i).array() - mu) * inv;
      RowArr h = g.row(i).array() * gmv.row(0).array();
      double m1 = h.mean();
      double m2 = (h * xh).mean();
      da.row(i) = ((h - m1 - xh * m2) * inv).matrix();
      dgamma.array() += g.row(i).array() * xh;
      dbeta += g.row(i);
    }
    t.accumulate(a, da);
    t.accumulate(gamma, dgamma);
    t.accumulate(beta, dbeta);
  });
}

Var Tape::mask_mul(Var a, const Mat& mask) {
  const Mat& av = value(a);
  require(mask.rows() == av.rows() && mask.cols() == av.cols(), "mask_mul: shape mismatch");
  Var out{static_cast<std::int32_t>(nodes_.size())};
  return push(av.cwiseProduct(mask), needs_grad(a), [a, mask, out](Tape& t) {
    t.accumulate(a, t.nodes_[out.idx].grad.cwiseProduct(mask));
  });
}

Var grouped_softmax(Tape& t, Var scores,
                    const std::vector<std::vector<Eigen::Index>>& groups) {
  require(t.value(scores).cols() == 1, "grouped_softmax: scores must be a column");
  const Eigen::Index e = t.value(scores).rows();
  Eigen::Index width = 1;
  for (const auto& g : groups) width = std::max(width, static_cast<Eigen::Index>(g.size()));
  const Eigen::Index n = static_cast<Eigen::Index>(groups.size());

  // Pad to one dense (groups x width) softmax; slot `e` points at a -inf
  // sentinel whose weight underflows to exactly zero and is never read back.
  Var padded = t.concat_rows({scores, t.constant(Mat::Constant(1, 1, -1e30))});
  std::vector<Eigen::Index> slots(static_cast<std::size_t>(n * width), e);
  std::vector<Eigen::Index> pos(static_cast<std::size_t>(e), 0);
  for (Eigen::Index g = 0; g < n; ++g)
    for (std::size_t s = 0; s < groups[static_cast<std::size_t>(g)].size(); ++s) {
      Eigen::Index member = groups[static_cast<std::size_t>(g)][s];
      require(member >= 0 && member < e, "grouped_softmax: index out of range");
      slots[static_cast<std::size_t>(g * width) + s] = member;
      pos[static_cast<std::size_t>(member)] = g * width + static_cast<Eigen::Index>(s);
    }
  Var sm = t.softmax_rows(t.reshape(t.row_gather(padded, slots), n, width));
  return t.row_gather(t.reshape(sm, n * width, 1), pos);
}

}  // namespace prtraj::ad
