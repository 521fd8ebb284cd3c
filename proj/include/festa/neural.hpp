#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <initializer_list>
#include <istream>
#include <map>
#include <memory>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "festa/errors.hpp"
#include "festa/random.hpp"

namespace festa::nn {

using Index = Eigen::Index;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

inline std::string shape_str(Index r, Index c) {
  return std::to_string(r) + "x" + std::to_string(c);
}

/// One dense layer: y = x * weight + bias, weight is (in x out).
struct Parameter {
  std::string name;
  Matrix weight;
  RowVector bias;
  Matrix weight_grad;
  RowVector bias_grad;
  Matrix weight_m, weight_v;
  RowVector bias_m, bias_v;
  std::int64_t step = 0;

  Index in() const noexcept { return weight.rows(); }
  Index out() const noexcept { return weight.cols(); }

  void reset_state() {
    weight_grad = Matrix::Zero(weight.rows(), weight.cols());
    bias_grad = RowVector::Zero(bias.size());
    weight_m = weight_grad;
    weight_v = weight_grad;
    bias_m = bias_grad;
    bias_v = bias_grad;
    step = 0;
  }
};

class ParameterStore {
 public:
  /// Glorot-uniform weights in +-sqrt(6 / (in + out)), zero bias.
  Parameter& add(const std::string& name, Index in, Index out, Rng& rng) {
    if (in <= 0 || out <= 0) throw ShapeError("parameter " + name + " needs positive dimensions");
    const double a = std::sqrt(6.0 / static_cast<double>(in + out));
    Matrix w(in, out);
    for (Index i = 0; i < in; ++i)
      for (Index j = 0; j < out; ++j) w(i, j) = uniform(rng, -a, a);
    return add(name, std::move(w), RowVector::Zero(out));
  }

  Parameter& add(const std::string& name, Matrix weight, RowVector bias) {
    if (index_.count(name) != 0) throw StateError("duplicate parameter " + name);
    if (bias.size() != weight.cols()) {
      throw ShapeError("parameter " + name + ": bias length " + std::to_string(bias.size()) +
                       " for weight " + shape_str(weight.rows(), weight.cols()));
    }
    Parameter p;
    p.name = name;
    p.weight = std::move(weight);
    p.bias = std::move(bias);
    p.reset_state();
    index_.emplace(name, entries_.size());
    entries_.push_back(std::move(p));
    return entries_.back();
  }

  bool contains(std::string_view name) const { return index_.find(name) != index_.end(); }

  std::size_t index_of(std::string_view name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw StateError("no parameter named " + std::string(name));
    return it->second;
  }

  Parameter& at(std::string_view name) { return entries_[index_of(name)]; }
  const Parameter& at(std::string_view name) const { return entries_[index_of(name)]; }
  Parameter& at(std::size_t i) { return entries_.at(i); }
  const Parameter& at(std::size_t i) const { return entries_.at(i); }

  std::size_t size() const noexcept { return entries_.size(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  void zero_grad() {
    for (auto& p : entries_) {
      p.weight_grad.setZero();
      p.bias_grad.setZero();
    }
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : entries_) n += static_cast<std::size_t>(p.weight.size() + p.bias.size());
    return n;
  }

  bool same_values(const ParameterStore& other) const {
    if (other.size() != size()) return false;
    for (std::size_t i = 0; i < size(); ++i) {
      const auto& a = entries_[i];
      const auto& b = other.entries_[i];
      if (a.name != b.name || a.weight.rows() != b.weight.rows() || a.weight.cols() != b.weight.cols() ||
          a.weight != b.weight || a.bias != b.bias) {
        return false;
      }
    }
    return true;
  }

 private:
  std::vector<Parameter> entries_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

class Tape;

/// Handle to a node on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const Matrix& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Activation tape: records every op of a forward pass so that backward() can
/// replay it in reverse. Nodes that do not depend on a parameter or on a
/// variable leaf carry no gradient and are skipped.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  explicit Tape(ParameterStore* params = nullptr) : params_(params) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  ParameterStore* params() const noexcept { return params_; }

  Var constant(Matrix value) { return push(std::move(value), false, nullptr); }
  Var variable(Matrix value) { return push(std::move(value), true, nullptr); }

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  const Matrix& value(Var v) const { return nodes_[v.id()].value; }
  bool requires_grad(Var v) const { return nodes_[v.id()].requires_grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  // Gradient of the last backward() root with respect to v (zeros if unreached).
  Matrix grad(Var v) const {
    const auto& n = nodes_[v.id()];
    if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  Matrix& grad_ref(std::size_t id) {
    auto& n = nodes_[id];
    if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  bool has_grad(std::size_t id) const { return nodes_[id].grad.size() != 0; }

  Var push(Matrix value, bool requires_grad, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), Matrix(), requires_grad, std::move(fn)});
    return Var(this, nodes_.size() - 1);
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  std::size_t backward_visits() const noexcept { return visits_; }

  void backward(Var root, const Matrix& upstream) {
    if (root.tape() != this) throw StateError("backward: variable belongs to another tape");
    const auto& rv = nodes_[root.id()].value;
    if (upstream.rows() != rv.rows() || upstream.cols() != rv.cols()) {
      throw ShapeError("backward: upstream gradient " + shape_str(upstream.rows(), upstream.cols()) +
                       " for node " + shape_str(rv.rows(), rv.cols()));
    }
    for (auto& n : nodes_) n.grad.resize(0, 0);
    visits_ = 0;
    grad_ref(root.id()) = upstream;
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.requires_grad || !n.backward || n.grad.size() == 0) continue;
      ++visits_;
      n.backward(*this, i);
    }
  }

  void backward(Var root) {
    if (root.rows() != 1 || root.cols() != 1) {
      throw ShapeError("backward: implicit seed needs a scalar root, got " +
                       shape_str(root.rows(), root.cols()));
    }
    backward(root, Matrix::Constant(1, 1, 1.0));
  }

  // Discrete choices (argmax rows, group memberships, ReLU patterns) are
  // folded into a hash so callers can tell when two passes took different
  // piecewise branches.
  void note_discrete(std::uint64_t v) noexcept { structure_ = mix_seed(structure_ ^ v); }
  std::uint64_t structure_hash() const noexcept { return structure_; }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  ParameterStore* params_ = nullptr;
  std::vector<Node> nodes_;
  std::size_t visits_ = 0;
  std::uint64_t structure_ = 0;
};

inline const Matrix& Var::value() const { return tape_->value(id_); }

namespace detail {

inline Tape& same_tape(Var a, Var b) {
  if (a.tape() != b.tape() || a.tape() == nullptr) throw StateError("variables live on different tapes");
  return *a.tape();
}

inline void require_same_shape(const char* op, Var a, Var b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": " + shape_str(a.rows(), a.cols()) + " vs " +
                     shape_str(b.rows(), b.cols()));
  }
}

inline void check_offsets(const char* op, Index rows, std::span<const std::size_t> offsets) {
  if (offsets.size() < 2 || offsets.front() != 0 || offsets.back() != static_cast<std::size_t>(rows)) {
    throw ShapeError(std::string(op) + ": segment offsets do not cover " + std::to_string(rows) + " rows");
  }
  for (std::size_t g = 0; g + 1 < offsets.size(); ++g) {
    if (offsets[g + 1] <= offsets[g]) throw InvalidArgument(std::string(op) + ": empty segment");
  }
}

}  // namespace detail

inline Var linear(Var x, std::size_t param_index) {
  Tape& t = *x.tape();
  if (t.params() == nullptr) throw StateError("linear: tape has no parameter store");
  const Parameter& p = t.params()->at(param_index);
  if (x.cols() != p.in()) {
    throw ShapeError("linear " + p.name + ": input width " + std::to_string(x.cols()) + ", expected " +
                     std::to_string(p.in()));
  }
  Matrix y = x.value() * p.weight;
  y.rowwise() += p.bias;
  const Index in = p.in(), out = p.out();
  return t.push(std::move(y), true, [xi = x.id(), param_index, in, out](Tape& tape, std::size_t self) {
    ParameterStore* store = tape.params();
    if (store == nullptr || param_index >= store->size()) throw StateError("backward: parameter store changed");
    Parameter& p = store->at(param_index);
    if (p.in() != in || p.out() != out) {
      throw StateError("backward: parameter " + p.name + " changed shape since the forward pass");
    }
    const Matrix& g = tape.grad_ref(self);
    const Matrix& xv = tape.value(xi);
    p.weight_grad.noalias() += xv.transpose() * g;
    p.bias_grad += g.colwise().sum();
    if (tape.requires_grad(xi)) tape.grad_ref(xi).noalias() += g * p.weight.transpose();
  });
}

inline Var linear(Var x, std::string_view name) {
  if (x.tape()->params() == nullptr) throw StateError("linear: tape has no parameter store");
  return linear(x, x.tape()->params()->index_of(name));
}

inline Var relu(Var x) {
  Tape& t = *x.tape();
  Matrix y = x.value().cwiseMax(0.0);
  std::uint64_t pattern = 0;
  const double* d = x.value().data();
  for (Index i = 0; i < x.value().size(); ++i) pattern = pattern * 31 + (d[i] > 0.0 ? 1 : 0);
  t.note_discrete(pattern);
  return t.push(std::move(y), t.requires_grad(x), [xi = x.id()](Tape& tape, std::size_t self) {
    if (!tape.requires_grad(xi)) return;
    const Matrix& g = tape.grad_ref(self);
    const Matrix& xv = tape.value(xi);
    tape.grad_ref(xi).array() += (xv.array() > 0.0).select(g.array(), 0.0);
  });
}

inline Var sigmoid(Var x) {
  Tape& t = *x.tape();
  Matrix y = x.value().unaryExpr([](double v) {
    return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  });
  return t.push(std::move(y), t.requires_grad(x), [xi = x.id()](Tape& tape, std::size_t self) {
    if (!tape.requires_grad(xi)) return;
    const Matrix& s = tape.value(self);
    tape.grad_ref(xi).array() += tape.grad_ref(self).array() * s.array() * (1.0 - s.array());
  });
}

inline Var add(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_same_shape("add", a, b);
  return t.push(a.value() + b.value(), t.requires_grad(a) || t.requires_grad(b),
                [ai = a.id(), bi = b.id()](Tape& tape, std::size_t self) {
                  const Matrix& g = tape.grad_ref(self);
                  if (tape.requires_grad(ai)) tape.grad_ref(ai) += g;
                  if (tape.requires_grad(bi)) tape.grad_ref(bi) += g;
                });
}

inline Var sub(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_same_shape("sub", a, b);
  return t.push(a.value() - b.value(), t.requires_grad(a) || t.requires_grad(b),
                [ai = a.id(), bi = b.id()](Tape& tape, std::size_t self) {
                  const Matrix& g = tape.grad_ref(self);
                  if (tape.requires_grad(ai)) tape.grad_ref(ai) += g;
                  if (tape.requires_grad(bi)) tape.grad_ref(bi) -= g;
                });
}

inline Var scale(Var x, double c) {
  Tape& t = *x.tape();
  return t.push(x.value() * c, t.requires_grad(x), [xi = x.id(), c](Tape& tape, std::size_t self) {
    if (tape.requires_grad(xi)) tape.grad_ref(xi) += c * tape.grad_ref(self);
  });
}

/// out[i] = x[index[i]]; backward scatters (adds) into x.
inline Var gather_rows(Var x, std::vector<std::size_t> index) {
  Tape& t = *x.tape();
  const Matrix& xv = x.value();
  Matrix y(static_cast<Index>(index.size()), xv.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= static_cast<std::size_t>(xv.rows())) {
      throw ShapeError("gather_rows: index " + std::to_string(index[i]) + " out of range for " +
                       std::to_string(xv.rows()) + " rows");
    }
    y.row(static_cast<Index>(i)) = xv.row(static_cast<Index>(index[i]));
  }
  return t.push(std::move(y), t.requires_grad(x),
                [xi = x.id(), idx = std::move(index)](Tape& tape, std::size_t self) {
                  if (!tape.requires_grad(xi)) return;
                  const Matrix& g = tape.grad_ref(self);
                  Matrix& gx = tape.grad_ref(xi);
                  for (std::size_t i = 0; i < idx.size(); ++i) {
                    gx.row(static_cast<Index>(idx[i])) += g.row(static_cast<Index>(i));
                  }
                });
}

inline Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw InvalidArgument("concat_cols: nothing to concatenate");
  Tape& t = *parts.front().tape();
  const Index rows = parts.front().rows();
  Index cols = 0;
  bool needs = false;
  for (const Var& p : parts) {
    if (p.tape() != &t) throw StateError("concat_cols: variables live on different tapes");
    if (p.rows() != rows) {
      throw ShapeError("concat_cols: row counts " + std::to_string(rows) + " and " + std::to_string(p.rows()));
    }
    cols += p.cols();
    needs = needs || t.requires_grad(p);
  }
  Matrix y(rows, cols);
  std::vector<std::pair<std::size_t, Index>> spans;  // (node, width)
  Index c = 0;
  for (const Var& p : parts) {
    y.middleCols(c, p.cols()) = p.value();
    c += p.cols();
    spans.emplace_back(p.id(), p.cols());
  }
  return t.push(std::move(y), needs, [spans = std::move(spans)](Tape& tape, std::size_t self) {
    const Matrix& g = tape.grad_ref(self);
    Index c = 0;
    for (const auto& [id, w] : spans) {
      if (tape.requires_grad(id)) tape.grad_ref(id) += g.middleCols(c, w);
      c += w;
    }
  });
}

inline Var concat_cols(std::initializer_list<Var> parts) {
  return concat_cols(std::span<const Var>(parts.begin(), parts.size()));
}

/// Column-wise maximum within each row segment. The argmax (lowest row on
/// ties) receives the whole gradient.
inline Var segment_max(Var x, std::vector<std::size_t> offsets) {
  Tape& t = *x.tape();
  const Matrix& xv = x.value();
  detail::check_offsets("segment_max", xv.rows(), offsets);
  const Index groups = static_cast<Index>(offsets.size() - 1);
  Matrix y(groups, xv.cols());
  std::vector<Index> arg(static_cast<std::size_t>(groups * xv.cols()));
  std::uint64_t h = 0;
  for (Index g = 0; g < groups; ++g) {
    const auto lo = static_cast<Index>(offsets[static_cast<std::size_t>(g)]);
    const auto hi = static_cast<Index>(offsets[static_cast<std::size_t>(g) + 1]);
    for (Index c = 0; c < xv.cols(); ++c) {
      Index best = lo;
      for (Index r = lo + 1; r < hi; ++r) {
        if (xv(r, c) > xv(best, c)) best = r;
      }
      y(g, c) = xv(best, c);
      arg[static_cast<std::size_t>(g * xv.cols() + c)] = best;
      h = h * 1099511628211ULL + static_cast<std::uint64_t>(best);
    }
  }
  t.note_discrete(h);
  return t.push(std::move(y), t.requires_grad(x),
                [xi = x.id(), arg = std::move(arg)](Tape& tape, std::size_t self) {
                  if (!tape.requires_grad(xi)) return;
                  const Matrix& g = tape.grad_ref(self);
                  Matrix& gx = tape.grad_ref(xi);
                  for (Index r = 0; r < g.rows(); ++r)
                    for (Index c = 0; c < g.cols(); ++c) {
                      gx(arg[static_cast<std::size_t>(r * g.cols() + c)], c) += g(r, c);
                    }
                });
}

inline Var segment_sum(Var x, std::vector<std::size_t> offsets) {
  Tape& t = *x.tape();
  const Matrix& xv = x.value();
  detail::check_offsets("segment_sum", xv.rows(), offsets);
  const Index groups = static_cast<Index>(offsets.size() - 1);
  Matrix y = Matrix::Zero(groups, xv.cols());
  for (Index g = 0; g < groups; ++g)
    for (auto r = offsets[static_cast<std::size_t>(g)]; r < offsets[static_cast<std::size_t>(g) + 1]; ++r) {
      y.row(g) += xv.row(static_cast<Index>(r));
    }
  return t.push(std::move(y), t.requires_grad(x),
                [xi = x.id(), off = std::move(offsets)](Tape& tape, std::size_t self) {
                  if (!tape.requires_grad(xi)) return;
                  const Matrix& g = tape.grad_ref(self);
                  Matrix& gx = tape.grad_ref(xi);
                  for (std::size_t s = 0; s + 1 < off.size(); ++s)
                    for (auto r = off[s]; r < off[s + 1]; ++r) gx.row(static_cast<Index>(r)) += g.row(static_cast<Index>(s));
                });
}

/// Softmax of a column vector within each segment (exact Jacobian backward).
inline Var segment_softmax(Var x, std::vector<std::size_t> offsets) {
  Tape& t = *x.tape();
  const Matrix& xv = x.value();
  if (xv.cols() != 1) throw ShapeError("segment_softmax: expects a column vector");
  detail::check_offsets("segment_softmax", xv.rows(), offsets);
  Matrix y(xv.rows(), 1);
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    const auto lo = static_cast<Index>(offsets[s]);
    const auto n = static_cast<Index>(offsets[s + 1] - offsets[s]);
    const double mx = xv.col(0).segment(lo, n).maxCoeff();
    double total = 0.0;
    for (Index r = lo; r < lo + n; ++r) {
      y(r, 0) = std::exp(xv(r, 0) - mx);
      total += y(r, 0);
    }
    for (Index r = lo; r < lo + n; ++r) y(r, 0) /= total;
  }
  return t.push(std::move(y), t.requires_grad(x),
                [xi = x.id(), off = std::move(offsets)](Tape& tape, std::size_t self) {
                  if (!tape.requires_grad(xi)) return;
                  const Matrix& w = tape.value(self);
                  const Matrix& g = tape.grad_ref(self);
                  Matrix& gx = tape.grad_ref(xi);
                  for (std::size_t s = 0; s + 1 < off.size(); ++s) {
                    double dot = 0.0;
                    for (auto r = off[s]; r < off[s + 1]; ++r) dot += w(static_cast<Index>(r), 0) * g(static_cast<Index>(r), 0);
                    for (auto r = off[s]; r < off[s + 1]; ++r) {
                      const auto i = static_cast<Index>(r);
                      gx(i, 0) += w(i, 0) * (g(i, 0) - dot);
                    }
                  }
                });
}

/// Per-row inner product of two equally shaped matrices, as a column.
inline Var row_dot(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_same_shape("row_dot", a, b);
  Matrix y = a.value().cwiseProduct(b.value()).rowwise().sum();
  return t.push(std::move(y), t.requires_grad(a) || t.requires_grad(b),
                [ai = a.id(), bi = b.id()](Tape& tape, std::size_t self) {
                  const Matrix& g = tape.grad_ref(self);
                  if (tape.requires_grad(ai)) {
                    tape.grad_ref(ai) += (tape.value(bi).array().colwise() * g.col(0).array()).matrix();
                  }
                  if (tape.requires_grad(bi)) {
                    tape.grad_ref(bi) += (tape.value(ai).array().colwise() * g.col(0).array()).matrix();
                  }
                });
}

/// Multiplies row i of x by w(i, 0).
inline Var scale_rows(Var x, Var w) {
  Tape& t = detail::same_tape(x, w);
  if (w.cols() != 1 || w.rows() != x.rows()) {
    throw ShapeError("scale_rows: weights " + shape_str(w.rows(), w.cols()) + " for " +
                     shape_str(x.rows(), x.cols()));
  }
  Matrix y = (x.value().array().colwise() * w.value().col(0).array()).matrix();
  return t.push(std::move(y), t.requires_grad(x) || t.requires_grad(w),
                [xi = x.id(), wi = w.id()](Tape& tape, std::size_t self) {
                  const Matrix& g = tape.grad_ref(self);
                  if (tape.requires_grad(xi)) {
                    tape.grad_ref(xi) += (g.array().colwise() * tape.value(wi).col(0).array()).matrix();
                  }
                  if (tape.requires_grad(wi)) {
                    tape.grad_ref(wi) += g.cwiseProduct(tape.value(xi)).rowwise().sum();
                  }
                });
}

/// sum(weights .* x) as a 1x1 node; used to reduce outputs to a scalar.
inline Var weighted_sum(Var x, Matrix weights) {
  Tape& t = *x.tape();
  if (weights.rows() != x.rows() || weights.cols() != x.cols()) {
    throw ShapeError("weighted_sum: weights " + shape_str(weights.rows(), weights.cols()) + " for " +
                     shape_str(x.rows(), x.cols()));
  }
  Matrix y = Matrix::Constant(1, 1, x.value().cwiseProduct(weights).sum());
  return t.push(std::move(y), t.requires_grad(x),
                [xi = x.id(), w = std::move(weights)](Tape& tape, std::size_t self) {
                  if (tape.requires_grad(xi)) tape.grad_ref(xi) += tape.grad_ref(self)(0, 0) * w;
                });
}

/// mean over rows of ||pred_i - target_i||^2.
inline Var mean_squared_error(Var pred, Matrix target) {
  Tape& t = *pred.tape();
  if (target.rows() != pred.rows() || target.cols() != pred.cols()) {
    throw ShapeError("mean_squared_error: target " + shape_str(target.rows(), target.cols()) + " for " +
                     shape_str(pred.rows(), pred.cols()));
  }
  const double n = static_cast<double>(std::max<Index>(pred.rows(), 1));
  Matrix diff = pred.value() - target;
  Matrix y = Matrix::Constant(1, 1, diff.squaredNorm() / n);
  return t.push(std::move(y), t.requires_grad(pred),
                [pi = pred.id(), diff = std::move(diff), n](Tape& tape, std::size_t self) {
                  if (tape.requires_grad(pi)) tape.grad_ref(pi) += (2.0 * tape.grad_ref(self)(0, 0) / n) * diff;
                });
}

/// Mean binary cross-entropy of sigmoid(logits) against targets in [0, 1].
inline Var bce_with_logits(Var logits, std::vector<double> targets) {
  Tape& t = *logits.tape();
  if (logits.cols() != 1 || static_cast<std::size_t>(logits.rows()) != targets.size()) {
    throw ShapeError("bce_with_logits: " + std::to_string(targets.size()) + " targets for " +
                     shape_str(logits.rows(), logits.cols()));
  }
  const Matrix& z = logits.value();
  double total = 0.0;
  for (Index i = 0; i < z.rows(); ++i) {
    const double v = z(i, 0);
    // log(1 + exp(v)) - y v, computed without overflow.
    total += std::max(v, 0.0) - v * targets[static_cast<std::size_t>(i)] + std::log1p(std::exp(-std::abs(v)));
  }
  const double n = static_cast<double>(std::max<Index>(z.rows(), 1));
  return t.push(Matrix::Constant(1, 1, total / n), t.requires_grad(logits),
                [li = logits.id(), y = std::move(targets), n](Tape& tape, std::size_t self) {
                  if (!tape.requires_grad(li)) return;
                  const double g = tape.grad_ref(self)(0, 0) / n;
                  const Matrix& z = tape.value(li);
                  Matrix& gz = tape.grad_ref(li);
                  for (Index i = 0; i < z.rows(); ++i) {
                    const double v = z(i, 0);
                    const double s = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
                    gz(i, 0) += g * (s - y[static_cast<std::size_t>(i)]);
                  }
                });
}

/// Mean softmax cross-entropy of class scores against integer labels.
inline Var softmax_cross_entropy(Var logits, std::vector<int> labels) {
  Tape& t = *logits.tape();
  const Matrix& z = logits.value();
  if (static_cast<std::size_t>(z.rows()) != labels.size()) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(z.rows()) + " rows");
  }
  Matrix prob(z.rows(), z.cols());
  double total = 0.0;
  for (Index i = 0; i < z.rows(); ++i) {
    const int label = labels[static_cast<std::size_t>(i)];
    if (label < 0 || label >= z.cols()) throw InvalidArgument("softmax_cross_entropy: label out of range");
    const double mx = z.row(i).maxCoeff();
    prob.row(i) = (z.row(i).array() - mx).exp().matrix();
    const double s = prob.row(i).sum();
    prob.row(i) /= s;
    total += -(z(i, label) - mx - std::log(s));
  }
  const double n = static_cast<double>(std::max<Index>(z.rows(), 1));
  return t.push(Matrix::Constant(1, 1, total / n), t.requires_grad(logits),
                [li = logits.id(), prob = std::move(prob), y = std::move(labels), n](Tape& tape, std::size_t self) {
                  if (!tape.requires_grad(li)) return;
                  const double g = tape.grad_ref(self)(0, 0) / n;
                  Matrix d = prob;
                  for (Index i = 0; i < d.rows(); ++i) d(i, y[static_cast<std::size_t>(i)]) -= 1.0;
                  tape.grad_ref(li) += g * d;
                });
}

// ---------------------------------------------------------------------------
// Shared MLPs

inline std::string layer_name(std::string_view prefix, std::size_t layer) {
  return std::string(prefix) + "." + std::to_string(layer);
}

/// Registers prefix.0 .. prefix.{n-1}, mapping width `in` through `widths`.
inline void init_mlp(ParameterStore& store, std::string_view prefix, Index in, std::span<const Index> widths,
                     Rng& rng) {
  Index w = in;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    store.add(layer_name(prefix, i), w, widths[i], rng);
    w = widths[i];
  }
}

inline void init_mlp(ParameterStore& store, std::string_view prefix, Index in, std::initializer_list<Index> widths,
                     Rng& rng) {
  init_mlp(store, prefix, in, std::span<const Index>(widths.begin(), widths.size()), rng);
}

inline std::size_t mlp_depth(const ParameterStore& store, std::string_view prefix) {
  std::size_t n = 0;
  while (store.contains(layer_name(prefix, n))) ++n;
  return n;
}

/// Point-wise shared MLP: ReLU between layers, linear output.
inline Var shared_mlp(Var x, std::string_view prefix) {
  ParameterStore* store = x.tape()->params();
  if (store == nullptr) throw StateError("shared_mlp: tape has no parameter store");
  const std::size_t depth = mlp_depth(*store, prefix);
  if (depth == 0) throw StateError("shared_mlp: no layers registered under " + std::string(prefix));
  Var h = x;
  for (std::size_t i = 0; i < depth; ++i) {
    h = linear(h, layer_name(prefix, i));
    if (i + 1 < depth) h = relu(h);
  }
  return h;
}

struct MlpForward {
  std::unique_ptr<Tape> tape;
  Var input;
  Var output;

  const Matrix& value() const { return output.value(); }
};

inline MlpForward shared_mlp_forward(ParameterStore& store, std::string_view prefix, const Matrix& inputs) {
  MlpForward f;
  f.tape = std::make_unique<Tape>(&store);
  f.input = f.tape->variable(inputs);
  f.output = shared_mlp(f.input, prefix);
  return f;
}

struct MaxPoolResult {
  RowVector pooled;
  std::vector<Index> argmax;
};

inline MaxPoolResult max_pool_rows(const Matrix& inputs) {
  if (inputs.rows() == 0) throw InvalidArgument("max_pool_rows: empty matrix");
  MaxPoolResult r;
  r.pooled.resize(inputs.cols());
  r.argmax.resize(static_cast<std::size_t>(inputs.cols()));
  for (Index c = 0; c < inputs.cols(); ++c) {
    Index best = 0;
    for (Index i = 1; i < inputs.rows(); ++i)
      if (inputs(i, c) > inputs(best, c)) best = i;
    r.pooled[c] = inputs(best, c);
    r.argmax[static_cast<std::size_t>(c)] = best;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Optimiser

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Bias-corrected Adam update of every entry, then clears the gradients.
/// Nothing is modified if any gradient is non-finite.
inline void adam_step(ParameterStore& store, const AdamOptions& opt = {}) {
  for (const auto& p : store) {
    if (!p.weight_grad.allFinite() || !p.bias_grad.allFinite()) {
      throw TrainingDivergence("non-finite gradient in " + p.name);
    }
  }
  for (auto& p : store) {
    ++p.step;
    const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(p.step));
    const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(p.step));
    auto update = [&](auto& value, auto& grad, auto& m, auto& v) {
      m = opt.beta1 * m + (1.0 - opt.beta1) * grad;
      v = opt.beta2 * v + (1.0 - opt.beta2) * grad.cwiseProduct(grad);
      value.array() -= opt.learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + opt.epsilon);
      grad.setZero();
    };
    update(p.weight, p.weight_grad, p.weight_m, p.weight_v);
    update(p.bias, p.bias_grad, p.bias_m, p.bias_v);
  }
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Binary, little-endian throughout:
//   "FESTACKP"            8-byte magic
//   u32 version           currently 1
//   u32 n_meta, then n_meta x (u32 len, key bytes, u32 len, value bytes)
//   u32 n_params, then per parameter:
//     u32 len, name bytes, u32 rows, u32 cols, rows*cols f64 (row-major),
//     u32 bias_len, bias_len f64

using Metadata = std::vector<std::pair<std::string, std::string>>;

inline constexpr char kCheckpointMagic[8] = {'F', 'E', 'S', 'T', 'A', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ParameterStore params;
  Metadata metadata;

  const std::string* find(std::string_view key) const {
    for (const auto& [k, v] : metadata)
      if (k == key) return &v;
    return nullptr;
  }
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_f64(std::ostream& os, double d) {
  std::uint64_t v;
  std::memcpy(&v, &d, sizeof v);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline void put_str(std::ostream& os, std::string_view s) {
  put_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

class ByteReader {
 public:
  explicit ByteReader(std::istream& is) : is_(is) {}

  void raw(char* dst, std::size_t n) {
    is_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n) {
      throw FormatError("checkpoint truncated at byte " + std::to_string(offset_ + static_cast<std::size_t>(is_.gcount())));
    }
    offset_ += n;
  }

  std::uint32_t u32() {
    unsigned char b[4];
    raw(reinterpret_cast<char*>(b), 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
  }

  double f64() {
    unsigned char b[8];
    raw(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    double d;
    std::memcpy(&d, &v, sizeof d);
    return d;
  }

  std::string str(std::uint32_t limit = 1u << 24) {
    const std::uint32_t n = u32();
    if (n > limit) throw FormatError("checkpoint string length " + std::to_string(n) + " is implausible");
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
  }

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::istream& is_;
  std::size_t offset_ = 0;
};

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const ParameterStore& store, const Metadata& metadata = {}) {
  os.write(kCheckpointMagic, 8);
  detail::put_u32(os, kCheckpointVersion);
  detail::put_u32(os, static_cast<std::uint32_t>(metadata.size()));
  for (const auto& [k, v] : metadata) {
    detail::put_str(os, k);
    detail::put_str(os, v);
  }
  detail::put_u32(os, static_cast<std::uint32_t>(store.size()));
  for (const auto& p : store) {
    detail::put_str(os, p.name);
    detail::put_u32(os, static_cast<std::uint32_t>(p.weight.rows()));
    detail::put_u32(os, static_cast<std::uint32_t>(p.weight.cols()));
    for (Index i = 0; i < p.weight.size(); ++i) detail::put_f64(os, p.weight.data()[i]);
    detail::put_u32(os, static_cast<std::uint32_t>(p.bias.size()));
    for (Index i = 0; i < p.bias.size(); ++i) detail::put_f64(os, p.bias[i]);
  }
  if (!os) throw Error("checkpoint write failed");
}

inline Checkpoint read_checkpoint(std::istream& is) {
  detail::ByteReader in(is);
  char magic[8];
  in.raw(magic, 8);
  if (std::memcmp(magic, kCheckpointMagic, 8) != 0) throw FormatError("not a checkpoint (bad magic)");
  const std::uint32_t version = in.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ck;
  const std::uint32_t n_meta = in.u32();
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string k = in.str();
    std::string v = in.str();
    ck.metadata.emplace_back(std::move(k), std::move(v));
  }
  const std::uint32_t n_params = in.u32();
  for (std::uint32_t i = 0; i < n_params; ++i) {
    std::string name = in.str(4096);
    const std::uint32_t rows = in.u32();
    const std::uint32_t cols = in.u32();
    if (static_cast<std::uint64_t>(rows) * cols > (1ull << 28)) {
      throw FormatError("checkpoint parameter " + name + " is implausibly large");
    }
    Matrix w(rows, cols);
    for (Index j = 0; j < w.size(); ++j) w.data()[j] = in.f64();
    const std::uint32_t blen = in.u32();
    if (blen != cols) throw FormatError("checkpoint parameter " + name + ": bias length mismatch");
    RowVector b(blen);
    for (Index j = 0; j < b.size(); ++j) b[j] = in.f64();
    ck.params.add(name, std::move(w), std::move(b));
  }
  return ck;
}

inline void save_checkpoint(const std::string& path, const ParameterStore& store, const Metadata& metadata = {}) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path + " for writing");
  write_checkpoint(os, store, metadata);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path);
  return read_checkpoint(is);
}

}  // namespace festa::nn
