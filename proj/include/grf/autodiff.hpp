#pragma once

// Reverse-mode differentiation over matrix-valued nodes. Enough operations to
// express the residual flows, their Jacobian-vector products and the series
// log-determinant, so parameter gradients include the dependence of J_R on
// both weights and inputs.

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "grf/error.hpp"
#include "grf/flow.hpp"
#include "grf/linalg.hpp"

namespace grf::ad {

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Matrix& value() const;
};

class Tape {
 public:
  Var leaf(Matrix value) { return push(std::move(value), {}); }

  const Matrix& value(Var v) const { return nodes_[v.id].value; }
  // Gradient of the last backward() root with respect to v (zeros if unreached).
  Matrix grad(Var v) const {
    const Node& n = nodes_[v.id];
    return n.grad.empty() ? Matrix(n.value.rows(), n.value.cols()) : n.grad;
  }

  void backward(Var root) {
    if (nodes_[root.id].value.size() != 1) throw ShapeError("backward: root must be a scalar");
    for (auto& n : nodes_) n.grad = Matrix();
    nodes_[root.id].grad = Matrix(1, 1, 1.0);
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.empty() || !n.backward) continue;
      n.backward(*this, n.grad);
    }
  }

  std::size_t size() const { return nodes_.size(); }

  // Internal helpers used by the operations below.
  Var push(Matrix value, std::function<void(Tape&, const Matrix&)> backward) {
    nodes_.push_back({std::move(value), Matrix(), std::move(backward)});
    return Var{this, nodes_.size() - 1};
  }
  void accumulate(std::size_t id, const Matrix& g) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = g; else n.grad += g;
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    std::function<void(Tape&, const Matrix&)> backward;
  };
  std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape->value(*this); }

inline Var matmul(Var a, Var b) {
  Tape& t = *a.tape;
  const std::size_t ia = a.id, ib = b.id;
  return t.push(grf::matmul(a.value(), b.value()), [ia, ib](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, grf::matmul_nt(g, tp.value(Var{&tp, ib})));
    tp.accumulate(ib, grf::matmul_tn(tp.value(Var{&tp, ia}), g));
  });
}

// a * b^T
inline Var matmul_nt(Var a, Var b) {
  Tape& t = *a.tape;
  const std::size_t ia = a.id, ib = b.id;
  return t.push(grf::matmul_nt(a.value(), b.value()), [ia, ib](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, grf::matmul(g, tp.value(Var{&tp, ib})));
    tp.accumulate(ib, grf::matmul_tn(g, tp.value(Var{&tp, ia})));
  });
}

// p * a with p held constant.
inline Var lmul_const(const Matrix& p, Var a) {
  Tape& t = *a.tape;
  const std::size_t ia = a.id;
  return t.push(grf::matmul(p, a.value()),
                [ia, p](Tape& tp, const Matrix& g) { tp.accumulate(ia, grf::matmul_tn(p, g)); });
}

inline Var add(Var a, Var b) {
  Tape& t = *a.tape;
  const std::size_t ia = a.id, ib = b.id;
  return t.push(a.value() + b.value(), [ia, ib](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, g);
    tp.accumulate(ib, g);
  });
}

// a + 1 * bias, bias is 1 x cols.
inline Var add_row(Var a, Var bias) {
  Tape& t = *a.tape;
  const std::size_t ia = a.id, ib = bias.id;
  Matrix out = a.value();
  const Matrix& b = bias.value();
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += b(0, c);
  return t.push(std::move(out), [ia, ib](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, g);
    Matrix gb(1, g.cols());
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < g.cols(); ++c) gb(0, c) += g(r, c);
    tp.accumulate(ib, gb);
  });
}

inline Var hadamard(Var a, Var b) {
  Tape& t = *a.tape;
  const std::size_t ia = a.id, ib = b.id;
  return t.push(grf::hadamard(a.value(), b.value()), [ia, ib](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, grf::hadamard(g, tp.value(Var{&tp, ib})));
    tp.accumulate(ib, grf::hadamard(g, tp.value(Var{&tp, ia})));
  });
}

inline Var elu(Var a) {
  Tape& t = *a.tape;
  const std::size_t ia = a.id;
  return t.push(grf::elu(a.value()), [ia](Tape& tp, const Matrix& g) {
    Matrix d = g;
    const Matrix& x = tp.value(Var{&tp, ia});
    for (std::size_t i = 0; i < d.size(); ++i) d[i] *= grf::elu_prime(x[i]);
    tp.accumulate(ia, d);
  });
}

inline Var elu_prime(Var a) {
  Tape& t = *a.tape;
  const std::size_t ia = a.id;
  return t.push(grf::elu_prime(a.value()), [ia](Tape& tp, const Matrix& g) {
    Matrix d = g;
    const Matrix& x = tp.value(Var{&tp, ia});
    for (std::size_t i = 0; i < d.size(); ++i) d[i] *= grf::elu_second(x[i]);
    tp.accumulate(ia, d);
  });
}

// Scalar (1 x 1) <a, b>_F.
inline Var dot(Var a, Var b) {
  Tape& t = *a.tape;
  const std::size_t ia = a.id, ib = b.id;
  return t.push(Matrix(1, 1, grf::frobenius_dot(a.value(), b.value())), [ia, ib](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, tp.value(Var{&tp, ib}) * g[0]);
    tp.accumulate(ib, tp.value(Var{&tp, ia}) * g[0]);
  });
}

inline Var sum_squares(Var a) {
  Tape& t = *a.tape;
  const std::size_t ia = a.id;
  return t.push(Matrix(1, 1, grf::frobenius_dot(a.value(), a.value())), [ia](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, tp.value(Var{&tp, ia}) * (2.0 * g[0]));
  });
}

// sum_i c_i s_i + offset over scalar nodes.
inline Var linear_combination(std::span<const std::pair<double, Var>> terms, double offset = 0.0) {
  if (terms.empty()) throw ShapeError("linear_combination: no terms");
  Tape& t = *terms.front().second.tape;
  double v = offset;
  std::vector<std::pair<double, std::size_t>> ids;
  for (auto [c, x] : terms) {
    v += c * x.value()[0];
    ids.push_back({c, x.id});
  }
  return t.push(Matrix(1, 1, v), [ids](Tape& tp, const Matrix& g) {
    for (auto [c, id] : ids) tp.accumulate(id, Matrix(1, 1, c * g[0]));
  });
}

}  // namespace grf::ad
