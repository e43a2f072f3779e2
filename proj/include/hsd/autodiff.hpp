#pragma once

// Minimal reverse-mode automatic differentiation over dense Eigen matrices.
// A Var is a shared handle to a graph node; operations on Vars record a
// backward closure only when some input requires a gradient, so pure
// inference builds no tape.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "hsd/error.hpp"

namespace hsd::ad {

using Matrix = Eigen::MatrixXd;
using RowVector = Eigen::RowVectorXd;

struct Node {
  Matrix value;
  Matrix grad;  // empty until something flows back
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void accumulate(const Matrix& g) {
    if (!requires_grad) return;
    if (grad.size() == 0)
      grad = g;
    else
      grad += g;
  }

  // Adds `g` into the block of grad starting at (row, col).
  void accumulate_block(Eigen::Index row, Eigen::Index col, const Matrix& g) {
    if (!requires_grad) return;
    if (grad.size() == 0) grad = Matrix::Zero(value.rows(), value.cols());
    grad.block(row, col, g.rows(), g.cols()) += g;
  }
};

class Var {
 public:
  Var() = default;
  explicit Var(Matrix value, bool requires_grad = false) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }
  const Matrix& grad() const { return node_->grad; }
  void zero_grad() { node_->grad.resize(0, 0); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  double scalar() const { return node_->value(0, 0); }
  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& shared() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node> node_;
};

inline Var constant(Matrix m) { return Var(std::move(m), false); }
inline Var parameter(Matrix m) { return Var(std::move(m), true); }

namespace detail {

// Builds a result node; the closure is kept only if some parent needs grads.
inline Var make(Matrix value, std::initializer_list<Var> parents,
                std::function<void(Node&)> backward) {
  Var out(std::move(value), false);
  bool needs = false;
  for (const auto& p : parents) needs = needs || p.requires_grad();
  if (needs) {
    Node* n = out.node();
    n->requires_grad = true;
    for (const auto& p : parents) n->parents.push_back(p.shared());
    n->backward = std::move(backward);
  }
  return out;
}

inline Var make(Matrix value, const std::vector<Var>& parents, std::function<void(Node&)> backward) {
  Var out(std::move(value), false);
  bool needs = false;
  for (const auto& p : parents) needs = needs || p.requires_grad();
  if (needs) {
    Node* n = out.node();
    n->requires_grad = true;
    for (const auto& p : parents) n->parents.push_back(p.shared());
    n->backward = std::move(backward);
  }
  return out;
}

inline void check_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw Error(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                std::to_string(b.cols()) + ")");
}

}  // namespace detail

// Runs backpropagation from a 1x1 loss.
inline void backward(const Var& loss) {
  if (!loss.requires_grad()) return;
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node(), 0}};
  visited.insert(loss.node());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  loss.node()->accumulate(Matrix::Ones(loss.rows(), loss.cols()));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->grad.size() != 0) n->backward(*n);
  }
  // intermediate grads are not needed after the pass
  for (Node* n : order)
    if (n->backward) n->grad.resize(0, 0);
}

inline Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows())
    throw Error("matmul: inner dimensions differ (" + std::to_string(a.cols()) + " vs " +
                std::to_string(b.rows()) + ")");
  Node* an = a.node();
  Node* bn = b.node();
  return detail::make(a.value() * b.value(), {a, b}, [an, bn](Node& self) {
    if (an->requires_grad) an->accumulate(self.grad * bn->value.transpose());
    if (bn->requires_grad) bn->accumulate(an->value.transpose() * self.grad);
  });
}

inline Var add(const Var& a, const Var& b) {
  detail::check_same_shape(a.value(), b.value(), "add");
  Node* an = a.node();
  Node* bn = b.node();
  return detail::make(a.value() + b.value(), {a, b}, [an, bn](Node& self) {
    an->accumulate(self.grad);
    bn->accumulate(self.grad);
  });
}

// Adds a 1xN row vector to every row.
inline Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw Error("add_row: bias shape mismatch");
  Node* an = a.node();
  Node* rn = row.node();
  Matrix v = a.value().rowwise() + row.value().row(0);
  return detail::make(std::move(v), {a, row}, [an, rn](Node& self) {
    an->accumulate(self.grad);
    rn->accumulate(self.grad.colwise().sum());
  });
}

inline Var hadamard(const Var& a, const Var& b) {
  detail::check_same_shape(a.value(), b.value(), "hadamard");
  Node* an = a.node();
  Node* bn = b.node();
  return detail::make(a.value().cwiseProduct(b.value()), {a, b}, [an, bn](Node& self) {
    if (an->requires_grad) an->accumulate(self.grad.cwiseProduct(bn->value));
    if (bn->requires_grad) bn->accumulate(self.grad.cwiseProduct(an->value));
  });
}

inline Var scale(const Var& a, double s) {
  Node* an = a.node();
  return detail::make(a.value() * s, {a}, [an, s](Node& self) { an->accumulate(self.grad * s); });
}

// Multiplies by a 1x1 Var.
inline Var scale_by(const Var& a, const Var& s) {
  if (s.rows() != 1 || s.cols() != 1) throw Error("scale_by: scalar expected");
  Node* an = a.node();
  Node* sn = s.node();
  return detail::make(a.value() * s.scalar(), {a, s}, [an, sn](Node& self) {
    if (an->requires_grad) an->accumulate(self.grad * sn->value(0, 0));
    if (sn->requires_grad) sn->accumulate(Matrix::Constant(1, 1, self.grad.cwiseProduct(an->value).sum()));
  });
}

// Multiplies row i by weights[i]; a zero weight yields exact zeros.
inline Var scale_rows(const Var& a, std::span<const double> weights) {
  if (static_cast<Eigen::Index>(weights.size()) != a.rows()) throw Error("scale_rows: size mismatch");
  Eigen::VectorXd w(a.rows());
  for (Eigen::Index i = 0; i < a.rows(); ++i) w(i) = weights[static_cast<std::size_t>(i)];
  Node* an = a.node();
  Matrix v = w.asDiagonal() * a.value();
  return detail::make(std::move(v), {a}, [an, w](Node& self) { an->accumulate(w.asDiagonal() * self.grad); });
}

inline Var add_constant(const Var& a, const Matrix& c) {
  detail::check_same_shape(a.value(), c, "add_constant");
  Node* an = a.node();
  return detail::make(a.value() + c, {a}, [an](Node& self) { an->accumulate(self.grad); });
}

inline Var transpose(const Var& a) {
  Node* an = a.node();
  return detail::make(a.value().transpose(), {a}, [an](Node& self) { an->accumulate(self.grad.transpose()); });
}

inline Var relu(const Var& a) {
  Node* an = a.node();
  return detail::make(a.value().cwiseMax(0.0), {a}, [an](Node& self) {
    an->accumulate(self.grad.cwiseProduct((an->value.array() > 0.0).cast<double>().matrix()));
  });
}

inline Var tanh(const Var& a) {
  Matrix v = a.value().array().tanh().matrix();
  Node* an = a.node();
  return detail::make(v, {a}, [an, v](Node& self) {
    an->accumulate(self.grad.cwiseProduct((1.0 - v.array().square()).matrix()));
  });
}

inline Var sigmoid(const Var& a) {
  Matrix v = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
  Node* an = a.node();
  return detail::make(v, {a}, [an, v](Node& self) {
    an->accumulate(self.grad.cwiseProduct((v.array() * (1.0 - v.array())).matrix()));
  });
}

// Exact (erf) GELU.
inline Var gelu(const Var& a) {
  const Matrix& x = a.value();
  Matrix v = x.unaryExpr([](double t) { return 0.5 * t * (1.0 + std::erf(t / std::sqrt(2.0))); });
  Node* an = a.node();
  return detail::make(std::move(v), {a}, [an](Node& self) {
    const Matrix d = an->value.unaryExpr([](double t) {
      const double cdf = 0.5 * (1.0 + std::erf(t / std::sqrt(2.0)));
      const double pdf = std::exp(-0.5 * t * t) / std::sqrt(2.0 * M_PI);
      return cdf + t * pdf;
    });
    an->accumulate(self.grad.cwiseProduct(d));
  });
}

inline Matrix softmax_rows_value(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    RowVector e = (x.row(r).array() - m).exp().matrix();
    out.row(r) = e / e.sum();
  }
  return out;
}

inline Var softmax_rows(const Var& a) {
  Matrix s = softmax_rows_value(a.value());
  Node* an = a.node();
  return detail::make(s, {a}, [an, s](Node& self) {
    Matrix g(s.rows(), s.cols());
    for (Eigen::Index r = 0; r < s.rows(); ++r) {
      const double dot = self.grad.row(r).dot(s.row(r));
      g.row(r) = s.row(r).cwiseProduct((self.grad.row(r).array() - dot).matrix());
    }
    an->accumulate(g);
  });
}

// Row-wise layer normalization with learned gain and bias (1xN each).
inline Var layer_norm(const Var& a, const Var& gain, const Var& bias, double eps = 1e-12) {
  const Matrix& x = a.value();
  const Eigen::Index n = x.cols();
  Matrix xhat(x.rows(), n);
  Eigen::VectorXd inv_std(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mean = x.row(r).mean();
    const double var = (x.row(r).array() - mean).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (x.row(r).array() - mean) * inv_std(r);
  }
  Matrix v = (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
  v.rowwise() += bias.value().row(0);
  Node* an = a.node();
  Node* gn = gain.node();
  Node* bn = bias.node();
  return detail::make(std::move(v), {a, gain, bias}, [an, gn, bn, xhat, inv_std, n](Node& self) {
    if (gn->requires_grad) gn->accumulate(self.grad.cwiseProduct(xhat).colwise().sum());
    if (bn->requires_grad) bn->accumulate(self.grad.colwise().sum());
    if (an->requires_grad) {
      Matrix dxhat = (self.grad.array().rowwise() * gn->value.row(0).array()).matrix();
      Matrix dx(dxhat.rows(), n);
      for (Eigen::Index r = 0; r < dxhat.rows(); ++r) {
        const double mean_d = dxhat.row(r).mean();
        const double mean_dx = dxhat.row(r).dot(xhat.row(r)) / static_cast<double>(n);
        dx.row(r) = ((dxhat.row(r).array() - mean_d - xhat.row(r).array() * mean_dx) * inv_std(r)).matrix();
      }
      an->accumulate(dx);
    }
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw Error("concat_cols: no inputs");
  const Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw Error("concat_cols: row counts differ");
    cols += p.cols();
  }
  Matrix v(rows, cols);
  std::vector<std::pair<Node*, Eigen::Index>> spans;
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    v.middleCols(off, p.cols()) = p.value();
    spans.emplace_back(p.node(), off);
    off += p.cols();
  }
  return detail::make(std::move(v), parts, [spans](Node& self) {
    for (auto [n, o] : spans)
      if (n->requires_grad) n->accumulate(Matrix(self.grad.middleCols(o, n->value.cols())));
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw Error("concat_rows: no inputs");
  const Eigen::Index cols = parts[0].cols();
  Eigen::Index rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw Error("concat_rows: column counts differ");
    rows += p.rows();
  }
  Matrix v(rows, cols);
  std::vector<std::pair<Node*, Eigen::Index>> spans;
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    v.middleRows(off, p.rows()) = p.value();
    spans.emplace_back(p.node(), off);
    off += p.rows();
  }
  return detail::make(std::move(v), parts, [spans](Node& self) {
    for (auto [n, o] : spans)
      if (n->requires_grad) n->accumulate(Matrix(self.grad.middleRows(o, n->value.rows())));
  });
}

inline Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
  Node* an = a.node();
  return detail::make(a.value().middleCols(start, count), {a}, [an, start](Node& self) {
    an->accumulate_block(0, start, self.grad);
  });
}

inline Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count) {
  Node* an = a.node();
  return detail::make(a.value().middleRows(start, count), {a}, [an, start](Node& self) {
    an->accumulate_block(start, 0, self.grad);
  });
}

// Embedding lookup: row k of the result is table.row(indices[k]).
inline Var gather_rows(const Var& table, std::span<const int> indices) {
  Matrix v(static_cast<Eigen::Index>(indices.size()), table.cols());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const int idx = indices[k];
    if (idx < 0 || idx >= table.rows()) throw Error("gather_rows: index out of range");
    v.row(static_cast<Eigen::Index>(k)) = table.value().row(idx);
  }
  Node* tn = table.node();
  std::vector<int> idx(indices.begin(), indices.end());
  return detail::make(std::move(v), {table}, [tn, idx](Node& self) {
    Matrix g = Matrix::Zero(tn->value.rows(), tn->value.cols());
    for (std::size_t k = 0; k < idx.size(); ++k) g.row(idx[k]) += self.grad.row(static_cast<Eigen::Index>(k));
    tn->accumulate(g);
  });
}

// Sliding windows over rows: result row i is rows i..i+width-1 laid side by
// side, giving (T - width + 1) x (width * D).
inline Var unfold_rows(const Var& a, Eigen::Index width) {
  const Eigen::Index t = a.rows(), d = a.cols();
  if (width < 1 || width > t) throw Error("unfold_rows: width exceeds sequence length");
  const Eigen::Index n = t - width + 1;
  Matrix v(n, width * d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index k = 0; k < width; ++k) v.block(i, k * d, 1, d) = a.value().row(i + k);
  Node* an = a.node();
  return detail::make(std::move(v), {a}, [an, width, n, d](Node& self) {
    Matrix g = Matrix::Zero(an->value.rows(), d);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index k = 0; k < width; ++k) g.row(i + k) += self.grad.block(i, k * d, 1, d);
    an->accumulate(g);
  });
}

// Column-wise max over the rows flagged in `valid`, giving 1xN.
inline Var max_rows(const Var& a, const std::vector<bool>& valid) {
  const Eigen::Index cols = a.cols();
  Matrix v(1, cols);
  std::vector<Eigen::Index> arg(static_cast<std::size_t>(cols), -1);
  for (Eigen::Index c = 0; c < cols; ++c) {
    double best = -std::numeric_limits<double>::infinity();
    for (Eigen::Index r = 0; r < a.rows(); ++r) {
      if (!valid[static_cast<std::size_t>(r)]) continue;
      if (a.value()(r, c) > best) {
        best = a.value()(r, c);
        arg[static_cast<std::size_t>(c)] = r;
      }
    }
    if (arg[static_cast<std::size_t>(c)] < 0) throw Error("max_rows: no valid rows");
    v(0, c) = best;
  }
  Node* an = a.node();
  return detail::make(std::move(v), {a}, [an, arg](Node& self) {
    Matrix g = Matrix::Zero(an->value.rows(), an->value.cols());
    for (std::size_t c = 0; c < arg.size(); ++c)
      g(arg[c], static_cast<Eigen::Index>(c)) += self.grad(0, static_cast<Eigen::Index>(c));
    an->accumulate(g);
  });
}

inline Var sum_all(const Var& a) {
  Node* an = a.node();
  return detail::make(Matrix::Constant(1, 1, a.value().sum()), {a}, [an](Node& self) {
    an->accumulate(Matrix::Constant(an->value.rows(), an->value.cols(), self.grad(0, 0)));
  });
}

// Mean cross-entropy of 1xK logits against a class index (log-softmax form).
inline Var cross_entropy(const Var& logits, int target) {
  if (logits.rows() != 1 || target < 0 || target >= logits.cols())
    throw Error("cross_entropy: bad logits shape or target");
  const Matrix p = softmax_rows_value(logits.value());
  const double m = logits.value().maxCoeff();
  const double lse = m + std::log((logits.value().array() - m).exp().sum());
  const double loss = lse - logits.value()(0, target);
  Node* ln = logits.node();
  return detail::make(Matrix::Constant(1, 1, loss), {logits}, [ln, p, target](Node& self) {
    Matrix g = p;
    g(0, target) -= 1.0;
    ln->accumulate(g * self.grad(0, 0));
  });
}

// ---------------------------------------------------------------------------
// Parameters and optimization

struct NamedParam {
  std::string name;
  Var var;
};
using Params = std::vector<NamedParam>;

inline bool all_finite(const Params& params) {
  for (const auto& p : params)
    if (!p.var.value().allFinite()) return false;
  return true;
}

inline void zero_grads(Params& params) {
  for (auto& p : params) p.var.zero_grad();
}

class Adam {
 public:
  explicit Adam(double learning_rate, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  // Applies one update from the accumulated gradients, scaled by `grad_scale`.
  void step(Params& params, double grad_scale = 1.0) {
    if (moments_.size() != params.size()) {
      moments_.clear();
      for (const auto& p : params)
        moments_.push_back({Matrix::Zero(p.var.rows(), p.var.cols()), Matrix::Zero(p.var.rows(), p.var.cols())});
    }
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& var = params[i].var;
      if (var.grad().size() == 0) continue;
      const Matrix g = var.grad() * grad_scale;
      auto& [m, v] = moments_[i];
      m = beta1_ * m + (1.0 - beta1_) * g;
      v = beta2_ * v + (1.0 - beta2_) * g.cwiseProduct(g);
      var.mutable_value().array() -= lr_ * (m.array() / c1) / ((v.array() / c2).sqrt() + eps_);
    }
  }

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<std::pair<Matrix, Matrix>> moments_;
};

}  // namespace hsd::ad
