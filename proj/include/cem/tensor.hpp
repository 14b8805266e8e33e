#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. Parameters live in a ParamStore; a Tape records one forward
// pass and pushes parameter gradients into a Gradients buffer on backward.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <deque>
#include <vector>

#include "cem/errors.hpp"

namespace cem {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace ag {

class ParamStore {
 public:
  int add(std::string name, Mat init) {
    if (index_.count(name)) throw std::logic_error("duplicate parameter name: " + name);
    index_.emplace(name, static_cast<int>(values_.size()));
    names_.push_back(std::move(name));
    values_.push_back(std::move(init));
    return static_cast<int>(values_.size()) - 1;
  }

  int size() const { return static_cast<int>(values_.size()); }
  Mat& value(int id) { return values_.at(id); }
  const Mat& value(int id) const { return values_.at(id); }
  const std::string& name(int id) const { return names_.at(id); }

  std::optional<int> find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& v : values_) n += static_cast<std::size_t>(v.size());
    return n;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Mat> values_;
  std::unordered_map<std::string, int> index_;
};

// Dense per-parameter gradient buffers, allocated on first touch.
class Gradients {
 public:
  explicit Gradients(const ParamStore& store) : store_(&store), grads_(store.size()) {}

  Mat& at(int id) {
    Mat& g = grads_.at(id);
    if (g.size() == 0) {
      const Mat& v = store_->value(id);
      g = Mat::Zero(v.rows(), v.cols());
    }
    return g;
  }
  bool has(int id) const { return grads_.at(id).size() != 0; }
  const Mat* get(int id) const { return has(id) ? &grads_[id] : nullptr; }
  int size() const { return static_cast<int>(grads_.size()); }

  void clear() {
    for (auto& g : grads_) g.resize(0, 0);
  }

  double squared_norm() const {
    double s = 0.0;
    for (const auto& g : grads_)
      if (g.size()) s += g.squaredNorm();
    return s;
  }

  void scale(double f) {
    for (auto& g : grads_)
      if (g.size()) g *= f;
  }

 private:
  const ParamStore* store_;
  std::vector<Mat> grads_;
};

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, int)>;

  explicit Tape(const ParamStore& params, Gradients* sink = nullptr)
      : params_(&params), sink_(sink) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  const ParamStore& params() const { return *params_; }
  Gradients* sink() const { return sink_; }

  Var constant(Mat m) { return push(std::move(m), false, nullptr); }

  // Leaf bound to a stored parameter; its value is read in place.
  Var param(int pid) {
    auto it = param_nodes_.find(pid);
    if (it != param_nodes_.end()) return Var{it->second};
    Node n;
    n.external = &params_->value(pid);
    n.needs_grad = sink_ != nullptr;
    if (n.needs_grad) {
      n.backward = [pid](Tape& t, int self) { t.sink_->at(pid) += t.nodes_[self].grad; };
    }
    nodes_.push_back(std::move(n));
    int id = static_cast<int>(nodes_.size()) - 1;
    param_nodes_.emplace(pid, id);
    return Var{id};
  }

  Var push(Mat value, bool needs_grad, Backward fn) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    if (needs_grad) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  const Mat& value(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.external ? *n.external : n.value;
  }
  double scalar(Var v) const {
    const Mat& m = value(v);
    if (m.size() != 1) throw std::logic_error("scalar() on non-scalar node");
    return m(0, 0);
  }
  bool needs_grad(Var v) const { return nodes_.at(v.id).needs_grad; }

  void accumulate(Var v, const Mat& g) {
    Node& n = nodes_[v.id];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0)
      n.grad = g;
    else
      n.grad += g;
  }
  template <typename Expr>
  void accumulate_expr(Var v, const Expr& g) {
    Node& n = nodes_[v.id];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0)
      n.grad = g;
    else
      n.grad += g;
  }
  const Mat& grad(int id) const { return nodes_[id].grad; }

  // Seeds d(root)/d(root) = seed and propagates to every reachable node.
  void backward(Var root, double seed = 1.0) {
    if (!sink_) throw std::logic_error("backward() on a tape without gradient sink");
    const Mat& rv = value(root);
    if (rv.size() != 1) throw std::logic_error("backward() root must be a scalar");
    accumulate(root, Mat::Constant(1, 1, seed));
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.size() == 0 || !n.backward) continue;
      n.backward(*this, i);
    }
    for (auto& n : nodes_) n.grad.resize(0, 0);
  }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    const Mat* external = nullptr;
    Mat grad;
    bool needs_grad = false;
    Backward backward;
  };

  const ParamStore* params_;
  Gradients* sink_;
  std::deque<Node> nodes_;  // deque: value references survive growth
  std::unordered_map<int, int> param_nodes_;
};

// ---------------------------------------------------------------------------
// Operations

inline void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}

inline Var matmul(Tape& t, Var a, Var b) {
  const Mat& A = t.value(a);
  const Mat& B = t.value(b);
  require(A.cols() == B.rows(), "matmul: inner dimension mismatch");
  bool ng = t.needs_grad(a) || t.needs_grad(b);
  return t.push(A * B, ng, [a, b](Tape& tp, int self) {
    const Mat& g = tp.grad(self);
    if (tp.needs_grad(a)) tp.accumulate_expr(a, g * tp.value(b).transpose());
    if (tp.needs_grad(b)) tp.accumulate_expr(b, tp.value(a).transpose() * g);
  });
}

// a * b^T
inline Var matmul_nt(Tape& t, Var a, Var b) {
  const Mat& A = t.value(a);
  const Mat& B = t.value(b);
  require(A.cols() == B.cols(), "matmul_nt: inner dimension mismatch");
  bool ng = t.needs_grad(a) || t.needs_grad(b);
  return t.push(A * B.transpose(), ng, [a, b](Tape& tp, int self) {
    const Mat& g = tp.grad(self);
    if (tp.needs_grad(a)) tp.accumulate_expr(a, g * tp.value(b));
    if (tp.needs_grad(b)) tp.accumulate_expr(b, g.transpose() * tp.value(a));
  });
}

inline Var add(Tape& t, Var a, Var b) {
  const Mat& A = t.value(a);
  const Mat& B = t.value(b);
  require(A.rows() == B.rows() && A.cols() == B.cols(), "add: shape mismatch");
  bool ng = t.needs_grad(a) || t.needs_grad(b);
  return t.push(A + B, ng, [a, b](Tape& tp, int self) {
    const Mat& g = tp.grad(self);
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

// Adds a 1xn row to every row of a.
inline Var add_row(Tape& t, Var a, Var row) {
  const Mat& A = t.value(a);
  const Mat& R = t.value(row);
  require(R.rows() == 1 && R.cols() == A.cols(), "add_row: shape mismatch");
  Mat out = A;
  out.rowwise() += R.row(0);
  bool ng = t.needs_grad(a) || t.needs_grad(row);
  return t.push(std::move(out), ng, [a, row](Tape& tp, int self) {
    const Mat& g = tp.grad(self);
    tp.accumulate(a, g);
    if (tp.needs_grad(row)) tp.accumulate_expr(row, g.colwise().sum());
  });
}

inline Var scale(Tape& t, Var a, double s) {
  return t.push(t.value(a) * s, t.needs_grad(a),
                [a, s](Tape& tp, int self) { tp.accumulate_expr(a, tp.grad(self) * s); });
}

inline Var mul(Tape& t, Var a, Var b) {
  const Mat& A = t.value(a);
  const Mat& B = t.value(b);
  require(A.rows() == B.rows() && A.cols() == B.cols(), "mul: shape mismatch");
  bool ng = t.needs_grad(a) || t.needs_grad(b);
  return t.push(A.cwiseProduct(B), ng, [a, b](Tape& tp, int self) {
    const Mat& g = tp.grad(self);
    if (tp.needs_grad(a)) tp.accumulate_expr(a, g.cwiseProduct(tp.value(b)));
    if (tp.needs_grad(b)) tp.accumulate_expr(b, g.cwiseProduct(tp.value(a)));
  });
}

inline Var relu(Tape& t, Var a) {
  Mat out = t.value(a).cwiseMax(0.0);
  return t.push(std::move(out), t.needs_grad(a), [a](Tape& tp, int self) {
    const Mat& x = tp.value(a);
    Mat g = tp.grad(self);
    for (Eigen::Index i = 0; i < g.size(); ++i)
      if (x.data()[i] <= 0.0) g.data()[i] = 0.0;
    tp.accumulate(a, g);
  });
}

inline double logistic(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

inline Var sigmoid(Tape& t, Var a) {
  Mat out = t.value(a).unaryExpr([](double x) { return logistic(x); });
  return t.push(std::move(out), t.needs_grad(a), [a](Tape& tp, int self) {
    Mat s = tp.value(Var{self});
    Mat local = s.cwiseProduct((1.0 - s.array()).matrix());
    tp.accumulate_expr(a, tp.grad(self).cwiseProduct(local));
  });
}

// Row-wise softmax, max-shifted.
inline Mat softmax_rows_value(const Mat& x) {
  Mat out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    double mx = x.row(r).maxCoeff();
    double sum = 0.0;
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      double e = std::exp(x(r, c) - mx);
      out(r, c) = e;
      sum += e;
    }
    out.row(r) /= sum;
  }
  return out;
}

inline Var softmax_rows(Tape& t, Var a) {
  return t.push(softmax_rows_value(t.value(a)), t.needs_grad(a), [a](Tape& tp, int self) {
    const Mat& y = tp.value(Var{self});
    const Mat& g = tp.grad(self);
    Mat gx(y.rows(), y.cols());
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      double dot = g.row(r).dot(y.row(r));
      gx.row(r) = y.row(r).cwiseProduct((g.row(r).array() - dot).matrix());
    }
    tp.accumulate(a, gx);
  });
}

inline constexpr double kLayerNormEps = 1e-6;

inline Var layer_norm(Tape& t, Var x, Var gain, Var bias) {
  const Mat& X = t.value(x);
  const Mat& G = t.value(gain);
  const Mat& B = t.value(bias);
  require(G.rows() == 1 && G.cols() == X.cols() && B.cols() == X.cols(), "layer_norm: shape");
  const Eigen::Index n = X.cols();
  Mat xhat(X.rows(), n);
  std::vector<double> inv_std(static_cast<std::size_t>(X.rows()));
  for (Eigen::Index r = 0; r < X.rows(); ++r) {
    double mean = X.row(r).mean();
    double var = (X.row(r).array() - mean).square().mean();
    double is = 1.0 / std::sqrt(var + kLayerNormEps);
    inv_std[static_cast<std::size_t>(r)] = is;
    xhat.row(r) = (X.row(r).array() - mean) * is;
  }
  Mat out = xhat;
  for (Eigen::Index r = 0; r < out.rows(); ++r)
    out.row(r) = out.row(r).cwiseProduct(G.row(0)) + B.row(0);
  bool ng = t.needs_grad(x) || t.needs_grad(gain) || t.needs_grad(bias);
  return t.push(std::move(out), ng,
                [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std), n](
                    Tape& tp, int self) {
                  const Mat& g = tp.grad(self);
                  const Mat& Gv = tp.value(gain);
                  if (tp.needs_grad(gain)) tp.accumulate_expr(gain, g.cwiseProduct(xhat).colwise().sum());
                  if (tp.needs_grad(bias)) tp.accumulate_expr(bias, g.colwise().sum());
                  if (!tp.needs_grad(x)) return;
                  Mat gx(g.rows(), g.cols());
                  for (Eigen::Index r = 0; r < g.rows(); ++r) {
                    Eigen::RowVectorXd dxhat = g.row(r).cwiseProduct(Gv.row(0));
                    double m1 = dxhat.mean();
                    double m2 = dxhat.cwiseProduct(xhat.row(r)).mean();
                    gx.row(r) = (dxhat.array() - m1 - xhat.row(r).array() * m2) *
                                inv_std[static_cast<std::size_t>(r)];
                  }
                  (void)n;
                  tp.accumulate(x, gx);
                });
}

inline Var concat_cols(Tape& t, std::span<const Var> parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  Eigen::Index rows = t.value(parts[0]).rows();
  Eigen::Index cols = 0;
  bool ng = false;
  for (Var p : parts) {
    require(t.value(p).rows() == rows, "concat_cols: row mismatch");
    cols += t.value(p).cols();
    ng = ng || t.needs_grad(p);
  }
  Mat out(rows, cols);
  Eigen::Index c = 0;
  for (Var p : parts) {
    const Mat& v = t.value(p);
    out.middleCols(c, v.cols()) = v;
    c += v.cols();
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return t.push(std::move(out), ng, [ps](Tape& tp, int self) {
    const Mat& g = tp.grad(self);
    Eigen::Index off = 0;
    for (Var p : ps) {
      Eigen::Index w = tp.value(p).cols();
      if (tp.needs_grad(p)) tp.accumulate_expr(p, g.middleCols(off, w));
      off += w;
    }
  });
}

inline Var slice_cols(Tape& t, Var a, Eigen::Index start, Eigen::Index count) {
  const Mat& A = t.value(a);
  require(start >= 0 && start + count <= A.cols(), "slice_cols: out of range");
  Eigen::Index total = A.cols();
  return t.push(A.middleCols(start, count), t.needs_grad(a),
                [a, start, count, total](Tape& tp, int self) {
                  const Mat& g = tp.grad(self);
                  Mat full = Mat::Zero(g.rows(), total);
                  full.middleCols(start, count) = g;
                  tp.accumulate(a, full);
                });
}

inline Var slice_rows(Tape& t, Var a, Eigen::Index start, Eigen::Index count) {
  const Mat& A = t.value(a);
  require(start >= 0 && start + count <= A.rows(), "slice_rows: out of range");
  Eigen::Index total = A.rows();
  return t.push(A.middleRows(start, count), t.needs_grad(a),
                [a, start, count, total](Tape& tp, int self) {
                  const Mat& g = tp.grad(self);
                  Mat full = Mat::Zero(total, g.cols());
                  full.middleRows(start, count) = g;
                  tp.accumulate(a, full);
                });
}

// Broadcasts a 1xn row to `rows` rows.
inline Var repeat_row(Tape& t, Var row, Eigen::Index rows) {
  const Mat& R = t.value(row);
  require(R.rows() == 1, "repeat_row: input must be a single row");
  Mat out = R.replicate(rows, 1);
  return t.push(std::move(out), t.needs_grad(row), [row](Tape& tp, int self) {
    tp.accumulate_expr(row, tp.grad(self).colwise().sum());
  });
}

// Mean over rows whose weight is nonzero; weights are 0/1.
inline Var masked_mean_rows(Tape& t, Var a, std::span<const double> mask) {
  const Mat& A = t.value(a);
  require(static_cast<Eigen::Index>(mask.size()) == A.rows(), "masked_mean_rows: mask size");
  double count = 0.0;
  for (double m : mask) count += m;
  require(count > 0.0, "masked_mean_rows: empty mask");
  Mat out = Mat::Zero(1, A.cols());
  for (Eigen::Index r = 0; r < A.rows(); ++r)
    if (mask[static_cast<std::size_t>(r)] != 0.0) out.row(0) += A.row(r);
  out /= count;
  std::vector<double> m(mask.begin(), mask.end());
  return t.push(std::move(out), t.needs_grad(a), [a, m, count](Tape& tp, int self) {
    const Mat& g = tp.grad(self);
    Mat full(static_cast<Eigen::Index>(m.size()), g.cols());
    for (std::size_t r = 0; r < m.size(); ++r)
      full.row(static_cast<Eigen::Index>(r)) = g.row(0) * (m[r] / count);
    tp.accumulate(a, full);
  });
}

// Gathers rows of a stored parameter table; gradients scatter straight into
// the sink so large tables never materialize a dense per-pass gradient.
inline Var embed_rows(Tape& t, int pid, std::span<const int> ids) {
  const Mat& table = t.params().value(pid);
  Mat out(static_cast<Eigen::Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= table.rows())
      throw std::out_of_range("embedding id " + std::to_string(ids[i]) + " outside table of " +
                              std::to_string(table.rows()) + " rows");
    out.row(static_cast<Eigen::Index>(i)) = table.row(ids[i]);
  }
  std::vector<int> idv(ids.begin(), ids.end());
  bool ng = t.sink() != nullptr;
  return t.push(std::move(out), ng, [pid, idv](Tape& tp, int self) {
    const Mat& g = tp.grad(self);
    Mat& dst = tp.sink()->at(pid);
    for (std::size_t i = 0; i < idv.size(); ++i) dst.row(idv[i]) += g.row(static_cast<Eigen::Index>(i));
  });
}

// Sum over rows r of weight[r] * -log softmax(logits[r])[target[r]].
// Rows with zero weight contribute neither value nor gradient.
inline Var weighted_cross_entropy(Tape& t, Var logits, std::span<const int> targets,
                                  std::span<const double> weights) {
  const Mat& X = t.value(logits);
  require(static_cast<Eigen::Index>(targets.size()) == X.rows() && weights.size() == targets.size(),
          "weighted_cross_entropy: length mismatch");
  Mat probs(X.rows(), X.cols());
  double total = 0.0;
  for (Eigen::Index r = 0; r < X.rows(); ++r) {
    double w = weights[static_cast<std::size_t>(r)];
    if (w == 0.0) continue;
    int y = targets[static_cast<std::size_t>(r)];
    require(y >= 0 && y < X.cols(), "weighted_cross_entropy: target out of range");
    double mx = X.row(r).maxCoeff();
    double lse = std::log((X.row(r).array() - mx).exp().sum()) + mx;
    total += w * (lse - X(r, y));
    probs.row(r) = (X.row(r).array() - lse).exp();
  }
  std::vector<int> ys(targets.begin(), targets.end());
  std::vector<double> ws(weights.begin(), weights.end());
  return t.push(Mat::Constant(1, 1, total), t.needs_grad(logits),
                [logits, ys, ws, probs = std::move(probs)](Tape& tp, int self) {
                  double g = tp.grad(self)(0, 0);
                  Mat gx = Mat::Zero(probs.rows(), probs.cols());
                  for (Eigen::Index r = 0; r < probs.rows(); ++r) {
                    double w = ws[static_cast<std::size_t>(r)];
                    if (w == 0.0) continue;
                    gx.row(r) = probs.row(r) * (g * w);
                    gx(r, ys[static_cast<std::size_t>(r)]) -= g * w;
                  }
                  tp.accumulate(logits, gx);
                });
}

// Weighted sum of scalar nodes.
inline Var linear_combination(Tape& t, std::span<const Var> terms, std::span<const double> coefs) {
  require(terms.size() == coefs.size() && !terms.empty(), "linear_combination: size mismatch");
  double v = 0.0;
  bool ng = false;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    v += coefs[i] * t.scalar(terms[i]);
    ng = ng || t.needs_grad(terms[i]);
  }
  std::vector<Var> ts(terms.begin(), terms.end());
  std::vector<double> cs(coefs.begin(), coefs.end());
  return t.push(Mat::Constant(1, 1, v), ng, [ts, cs](Tape& tp, int self) {
    double g = tp.grad(self)(0, 0);
    for (std::size_t i = 0; i < ts.size(); ++i)
      tp.accumulate(ts[i], Mat::Constant(1, 1, g * cs[i]));
  });
}

}  // namespace ag
}  // namespace cem
