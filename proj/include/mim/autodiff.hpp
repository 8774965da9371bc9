#pragma once

#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mim/tensor.hpp"

namespace mim {

// Handle to a node on a Tape.
struct Var {
  int id = -1;
};

// Reverse-mode tape. Nodes are tensor-valued primitive applications,
// appended in topological order; backward walks them strictly in
// reverse, so gradients are deterministic across runs.
//
// A Tape is confined to the thread that built it.
class Tape {
  enum class Op {
    Leaf,
    Affine,
    Relu,
    Concat,
    OuterAug,
    Cosine,
    Softmax,
    LogSumExp,
    Add,
    Sub,
    MulElem,
    Scale,
    Dot,
    Mean,
    Sigmoid,
    Neg,
    Select,
    SMul,
    BceWithLogits,
  };

  struct Node {
    Op op;
    std::vector<int> inputs;
    Tensor value;
    double aux = 0.0;  // scale factor / select index / bce label
    bool requires_grad = false;
  };

 public:
  // Registers an input tensor. Nodes with requires_grad=false never
  // receive gradient (their slot stays exactly zero).
  Var input(Tensor t, bool requires_grad = true) {
    return push({Op::Leaf, {}, std::move(t), 0.0, requires_grad});
  }

  Var constant(Tensor t) { return input(std::move(t), false); }

  // y = W x + b, W:[m,n], x:[n], b:[m]
  Var affine(Var w, Var x, Var b) {
    const Tensor& W = val(w);
    const Tensor& X = val(x);
    const Tensor& B = val(b);
    if (W.rank() != 2 || X.rank() != 1 || B.rank() != 1 ||
        W.shape()[1] != X.shape()[0] || W.shape()[0] != B.shape()[0])
      shape_error("affine", {&W, &X, &B});
    std::size_t m = W.shape()[0], n = W.shape()[1];
    Tensor y = Tensor::zeros({m});
    for (std::size_t i = 0; i < m; ++i) {
      double s = B[i];
      for (std::size_t j = 0; j < n; ++j) s += W.at(i, j) * X[j];
      y[i] = s;
    }
    return push({Op::Affine, {w.id, x.id, b.id}, std::move(y), 0.0, grad_of({w, x, b})});
  }

  Var relu(Var x) {
    Tensor y = val(x);
    for (double& v : y.data())
      if (v < 0) v = 0;
    return push({Op::Relu, {x.id}, std::move(y), 0.0, grad_of({x})});
  }

  Var concat(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat: empty input list");
    std::vector<double> out;
    bool rg = false;
    std::vector<int> ids;
    for (Var p : parts) {
      const Tensor& t = val(p);
      out.insert(out.end(), t.data().begin(), t.data().end());
      rg = rg || node(p).requires_grad;
      ids.push_back(p.id);
    }
    return push({Op::Concat, std::move(ids), Tensor::vector(std::move(out)), 0.0, rg});
  }

  // Row-major flatten of [a;1] outer [b;1]; length (d1+1)(d2+1).
  // Rows 0..d1-1 at column d2 reproduce a; row d1, columns 0..d2-1
  // reproduce b; position (d1,d2) is 1.
  Var outer_aug(Var a, Var b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    if (A.rank() != 1 || B.rank() != 1) shape_error("outer_product_augmented", {&A, &B});
    std::size_t d1 = A.size(), d2 = B.size();
    Tensor y = Tensor::zeros({(d1 + 1) * (d2 + 1)});
    for (std::size_t i = 0; i <= d1; ++i) {
      double ai = i < d1 ? A[i] : 1.0;
      for (std::size_t j = 0; j <= d2; ++j) {
        double bj = j < d2 ? B[j] : 1.0;
        y[i * (d2 + 1) + j] = ai * bj;
      }
    }
    return push({Op::OuterAug, {a.id, b.id}, std::move(y), 0.0, grad_of({a, b})});
  }

  Var cosine(Var a, Var b, const char* who_a = "lhs", const char* who_b = "rhs") {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    if (!A.same_shape(B)) shape_error("cosine_similarity", {&A, &B});
    if (A.norm() == 0.0)
      throw std::invalid_argument(std::string("cosine: zero-norm vector (") + who_a + ")");
    if (B.norm() == 0.0)
      throw std::invalid_argument(std::string("cosine: zero-norm vector (") + who_b + ")");
    return push({Op::Cosine, {a.id, b.id}, Tensor::scalar(cosine_value(A, B)), 0.0,
                 grad_of({a, b})});
  }

  Var softmax(Var x) {
    const Tensor& X = val(x);
    Tensor y = softmax_value(X);
    return push({Op::Softmax, {x.id}, std::move(y), 0.0, grad_of({x})});
  }

  Var log_sum_exp(Var x) {
    const Tensor& X = val(x);
    double m = X[0];
    for (double v : X.data())
      if (v > m) m = v;
    double s = 0;
    for (double v : X.data()) s += std::exp(v - m);
    return push({Op::LogSumExp, {x.id}, Tensor::scalar(m + std::log(s)), 0.0, grad_of({x})});
  }

  Var add(Var a, Var b) { return binary(Op::Add, "add", a, b); }
  Var sub(Var a, Var b) { return binary(Op::Sub, "sub", a, b); }
  Var mul(Var a, Var b) { return binary(Op::MulElem, "mul", a, b); }

  Var scale(Var x, double c) {
    Tensor y = val(x);
    for (double& v : y.data()) v *= c;
    return push({Op::Scale, {x.id}, std::move(y), c, grad_of({x})});
  }

  Var dot_product(Var a, Var b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    if (!A.same_shape(B)) shape_error("dot", {&A, &B});
    return push({Op::Dot, {a.id, b.id}, Tensor::scalar(dot(A, B)), 0.0, grad_of({a, b})});
  }

  Var mean(Var x) {
    const Tensor& X = val(x);
    double s = 0;
    for (double v : X.data()) s += v;
    return push({Op::Mean, {x.id}, Tensor::scalar(s / double(X.size())), 0.0, grad_of({x})});
  }

  Var sigmoid(Var x) {
    Tensor y = val(x);
    for (double& v : y.data()) v = sigmoid_value(v);
    return push({Op::Sigmoid, {x.id}, std::move(y), 0.0, grad_of({x})});
  }

  Var neg(Var x) {
    Tensor y = val(x);
    for (double& v : y.data()) v = -v;
    return push({Op::Neg, {x.id}, std::move(y), 0.0, grad_of({x})});
  }

  // Scalar element extraction; backward scatters into position i.
  Var select(Var x, std::size_t i) {
    const Tensor& X = val(x);
    if (i >= X.size())
      throw std::invalid_argument("select: index " + std::to_string(i) +
                                  " out of range for " + Tensor::shape_str(X.shape()));
    return push({Op::Select, {x.id}, Tensor::scalar(X[i]), double(i), grad_of({x})});
  }

  // scalar * vector
  Var smul(Var s, Var v) {
    const Tensor& S = val(s);
    if (S.size() != 1) shape_error("smul", {&S, &val(v)});
    Tensor y = val(v);
    for (double& e : y.data()) e *= S[0];
    return push({Op::SMul, {s.id, v.id}, std::move(y), 0.0, grad_of({s, v})});
  }

  // Numerically stable binary cross entropy on a logit, label in {0,1}.
  Var bce_with_logits(Var z, double label) {
    const Tensor& Z = val(z);
    if (Z.size() != 1) shape_error("bce_with_logits", {&Z});
    double x = Z[0];
    double loss = std::max(x, 0.0) - x * label + std::log1p(std::exp(-std::abs(x)));
    return push({Op::BceWithLogits, {z.id}, Tensor::scalar(loss), label, grad_of({z})});
  }

  const Tensor& value(Var v) const { return val(v); }
  std::size_t node_count() const { return nodes_.size(); }

  // Accumulates gradients for all nodes reachable from `output`,
  // seeding with `seed`. Returns nothing; read per-node gradients
  // with gradient().
  void backward(Var output, const Tensor& seed) {
    const Tensor& out = val(output);
    if (!out.same_shape(seed))
      throw std::invalid_argument("backward: seed shape " +
                                  Tensor::shape_str(seed.shape()) +
                                  " does not match output shape " +
                                  Tensor::shape_str(out.shape()));
    grads_.assign(nodes_.size(), Tensor());
    accum(output.id, seed);
    for (int i = output.id; i >= 0; --i) {
      const Node& n = nodes_[std::size_t(i)];
      if (!n.requires_grad || grads_[std::size_t(i)].size() == 0) continue;
      const Tensor& g = grads_[std::size_t(i)];
      propagate(n, g);
    }
  }

  void backward_scalar(Var output) { backward(output, Tensor::scalar(1.0)); }

  // Zero tensor if the node never received gradient (e.g. detached).
  Tensor gradient(Var v) const {
    if (grads_.empty() || grads_[std::size_t(v.id)].size() == 0)
      return Tensor::zeros(val(v).shape());
    return grads_[std::size_t(v.id)];
  }

  static Tensor softmax_value(const Tensor& x) {
    double m = x[0];
    for (double v : x.data())
      if (v > m) m = v;
    Tensor y = x;
    double s = 0;
    for (double& v : y.data()) {
      v = std::exp(v - m);
      s += v;
    }
    for (double& v : y.data()) v /= s;
    return y;
  }

  static double sigmoid_value(double x) {
    return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }

 private:
  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{int(nodes_.size()) - 1};
  }

  const Node& node(Var v) const { return nodes_[std::size_t(v.id)]; }
  const Tensor& val(Var v) const { return nodes_[std::size_t(v.id)].value; }

  bool grad_of(std::initializer_list<Var> vs) const {
    for (Var v : vs)
      if (node(v).requires_grad) return true;
    return false;
  }

  Var binary(Op op, const char* name, Var a, Var b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    if (!A.same_shape(B)) shape_error(name, {&A, &B});
    Tensor y = A;
    for (std::size_t i = 0; i < y.size(); ++i) {
      switch (op) {
        case Op::Add: y[i] = A[i] + B[i]; break;
        case Op::Sub: y[i] = A[i] - B[i]; break;
        default: y[i] = A[i] * B[i]; break;
      }
    }
    return push({op, {a.id, b.id}, std::move(y), 0.0, grad_of({a, b})});
  }

  [[noreturn]] static void shape_error(const std::string& prim,
                                       std::initializer_list<const Tensor*> ts) {
    std::string msg = "shape mismatch in " + prim + ":";
    for (const Tensor* t : ts) msg += " " + Tensor::shape_str(t->shape());
    throw std::invalid_argument(msg);
  }

  void accum(int id, const Tensor& g) {
    if (!nodes_[std::size_t(id)].requires_grad) return;
    Tensor& slot = grads_[std::size_t(id)];
    if (slot.size() == 0) {
      slot = g;
    } else {
      for (std::size_t i = 0; i < slot.size(); ++i) slot[i] += g[i];
    }
  }

  void propagate(const Node& n, const Tensor& g) {
    switch (n.op) {
      case Op::Leaf:
        break;
      case Op::Affine: {
        const Tensor& W = nodes_[std::size_t(n.inputs[0])].value;
        const Tensor& X = nodes_[std::size_t(n.inputs[1])].value;
        std::size_t m = W.shape()[0], nn = W.shape()[1];
        Tensor gw = Tensor::zeros({m, nn});
        Tensor gx = Tensor::zeros({nn});
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < nn; ++j) {
            gw.at(i, j) = g[i] * X[j];
            gx[j] += W.at(i, j) * g[i];
          }
        accum(n.inputs[0], gw);
        accum(n.inputs[1], gx);
        accum(n.inputs[2], g);
        break;
      }
      case Op::Relu: {
        const Tensor& X = nodes_[std::size_t(n.inputs[0])].value;
        Tensor gx = g;
        for (std::size_t i = 0; i < gx.size(); ++i)
          if (X[i] <= 0) gx[i] = 0;  // subgradient 0 at exactly 0
        accum(n.inputs[0], gx);
        break;
      }
      case Op::Concat: {
        std::size_t off = 0;
        for (int in : n.inputs) {
          const Tensor& t = nodes_[std::size_t(in)].value;
          Tensor gi = Tensor::zeros(t.shape());
          for (std::size_t i = 0; i < t.size(); ++i) gi[i] = g[off + i];
          off += t.size();
          accum(in, gi);
        }
        break;
      }
      case Op::OuterAug: {
        const Tensor& A = nodes_[std::size_t(n.inputs[0])].value;
        const Tensor& B = nodes_[std::size_t(n.inputs[1])].value;
        std::size_t d1 = A.size(), d2 = B.size();
        Tensor ga = Tensor::zeros({d1});
        Tensor gb = Tensor::zeros({d2});
        for (std::size_t i = 0; i <= d1; ++i) {
          double ai = i < d1 ? A[i] : 1.0;
          for (std::size_t j = 0; j <= d2; ++j) {
            double bj = j < d2 ? B[j] : 1.0;
            double gij = g[i * (d2 + 1) + j];
            if (i < d1) ga[i] += gij * bj;
            if (j < d2) gb[j] += gij * ai;
          }
        }
        accum(n.inputs[0], ga);
        accum(n.inputs[1], gb);
        break;
      }
      case Op::Cosine: {
        const Tensor& A = nodes_[std::size_t(n.inputs[0])].value;
        const Tensor& B = nodes_[std::size_t(n.inputs[1])].value;
        double na = A.norm(), nb = B.norm();
        double c = n.value[0];
        double gs = g[0];
        Tensor ga = Tensor::zeros(A.shape());
        Tensor gb = Tensor::zeros(B.shape());
        for (std::size_t i = 0; i < A.size(); ++i) {
          ga[i] = gs * (B[i] / (na * nb) - c * A[i] / (na * na));
          gb[i] = gs * (A[i] / (na * nb) - c * B[i] / (nb * nb));
        }
        accum(n.inputs[0], ga);
        accum(n.inputs[1], gb);
        break;
      }
      case Op::Softmax: {
        const Tensor& S = n.value;
        double sg = 0;
        for (std::size_t i = 0; i < S.size(); ++i) sg += S[i] * g[i];
        Tensor gx = Tensor::zeros(S.shape());
        for (std::size_t i = 0; i < S.size(); ++i) gx[i] = S[i] * (g[i] - sg);
        accum(n.inputs[0], gx);
        break;
      }
      case Op::LogSumExp: {
        const Tensor& X = nodes_[std::size_t(n.inputs[0])].value;
        Tensor gx = softmax_value(X);
        for (double& v : gx.data()) v *= g[0];
        accum(n.inputs[0], gx);
        break;
      }
      case Op::Add:
        accum(n.inputs[0], g);
        accum(n.inputs[1], g);
        break;
      case Op::Sub: {
        accum(n.inputs[0], g);
        Tensor gb = g;
        for (double& v : gb.data()) v = -v;
        accum(n.inputs[1], gb);
        break;
      }
      case Op::MulElem: {
        const Tensor& A = nodes_[std::size_t(n.inputs[0])].value;
        const Tensor& B = nodes_[std::size_t(n.inputs[1])].value;
        Tensor ga = g, gb = g;
        for (std::size_t i = 0; i < g.size(); ++i) {
          ga[i] *= B[i];
          gb[i] *= A[i];
        }
        accum(n.inputs[0], ga);
        accum(n.inputs[1], gb);
        break;
      }
      case Op::Scale: {
        Tensor gx = g;
        for (double& v : gx.data()) v *= n.aux;
        accum(n.inputs[0], gx);
        break;
      }
      case Op::Dot: {
        const Tensor& A = nodes_[std::size_t(n.inputs[0])].value;
        const Tensor& B = nodes_[std::size_t(n.inputs[1])].value;
        Tensor ga = B, gb = A;
        for (double& v : ga.data()) v *= g[0];
        for (double& v : gb.data()) v *= g[0];
        accum(n.inputs[0], ga);
        accum(n.inputs[1], gb);
        break;
      }
      case Op::Mean: {
        const Tensor& X = nodes_[std::size_t(n.inputs[0])].value;
        Tensor gx = Tensor::zeros(X.shape());
        double gv = g[0] / double(X.size());
        for (double& v : gx.data()) v = gv;
        accum(n.inputs[0], gx);
        break;
      }
      case Op::Sigmoid: {
        Tensor gx = g;
        for (std::size_t i = 0; i < gx.size(); ++i)
          gx[i] *= n.value[i] * (1.0 - n.value[i]);
        accum(n.inputs[0], gx);
        break;
      }
      case Op::Neg: {
        Tensor gx = g;
        for (double& v : gx.data()) v = -v;
        accum(n.inputs[0], gx);
        break;
      }
      case Op::Select: {
        const Tensor& X = nodes_[std::size_t(n.inputs[0])].value;
        Tensor gx = Tensor::zeros(X.shape());
        gx[std::size_t(n.aux)] = g[0];
        accum(n.inputs[0], gx);
        break;
      }
      case Op::SMul: {
        const Tensor& S = nodes_[std::size_t(n.inputs[0])].value;
        const Tensor& V = nodes_[std::size_t(n.inputs[1])].value;
        double gs = 0;
        Tensor gv = g;
        for (std::size_t i = 0; i < g.size(); ++i) {
          gs += g[i] * V[i];
          gv[i] *= S[0];
        }
        accum(n.inputs[0], Tensor::scalar(gs));
        accum(n.inputs[1], gv);
        break;
      }
      case Op::BceWithLogits: {
        const Tensor& Z = nodes_[std::size_t(n.inputs[0])].value;
        double dz = sigmoid_value(Z[0]) - n.aux;
        accum(n.inputs[0], Tensor::scalar(g[0] * dz));
        break;
      }
    }
  }

  static double cosine_value(const Tensor& a, const Tensor& b) {
    return dot(a, b) / (a.norm() * b.norm());
  }

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
};

// Central-difference gradient oracle: (f(x+eps) - f(x-eps)) / 2eps per
// coordinate of every input. Uses only scalar evaluations of f, so it
// is independent of the tape's analytic rules.
inline std::vector<Tensor> finite_diff(
    const std::function<double(const std::vector<Tensor>&)>& f,
    std::vector<Tensor> inputs, double epsilon = 1e-6) {
  if (epsilon <= 0) throw std::invalid_argument("finite_diff: epsilon must be > 0");
  std::vector<Tensor> grads;
  grads.reserve(inputs.size());
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor g = Tensor::zeros(inputs[k].shape());
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      double orig = inputs[k][i];
      inputs[k][i] = orig + epsilon;
      double fp = f(inputs);
      inputs[k][i] = orig - epsilon;
      double fm = f(inputs);
      inputs[k][i] = orig;
      g[i] = (fp - fm) / (2.0 * epsilon);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

inline double max_rel_error(const Tensor& a, const Tensor& b) {
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double denom = std::max({std::abs(a[i]), std::abs(b[i]), 1e-8});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

}  // namespace mim
