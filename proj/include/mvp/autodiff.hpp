#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mvp/tensor.hpp"

namespace mvp {

class Tape;

// Handle to a node on a tape. Cheap to copy.
struct Var {
  Tape* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
};

// Frame validity mask: nonzero byte = real frame, zero = padding.
// An empty mask means "all frames valid".
using FrameMask = std::vector<uint8_t>;

inline int mask_valid_count(const FrameMask& mask, int rows) {
  if (mask.empty()) return rows;
  int n = 0;
  for (int i = 0; i < rows; i++) n += mask[static_cast<size_t>(i)] ? 1 : 0;
  return n;
}

// Dynamic tape for reverse-mode differentiation. Rebuilt per forward pass;
// node creation order is the topological order, so one reverse sweep
// populates every reachable gradient. Confined to a single thread.
class Tape {
 public:
  struct Node {
    Tensor value;
    Tensor grad;  // allocated lazily, only when a gradient reaches this node
    const char* kind = "";
    std::vector<int> inputs;
    bool requires_grad = false;
    Param* sink = nullptr;  // set for trainable leaves
    std::function<void(Tape&, int)> pull;
  };

  int size() const { return static_cast<int>(nodes_.size()); }
  const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }

  const Tensor& val(Var v) const { return nodes_[check(v)].value; }
  // Gradient of a node; zeros if no gradient reached it.
  Tensor grad_of(Var v) const {
    const Node& n = nodes_[check(v)];
    return n.grad.empty() ? Tensor::zeros(n.value.shape()) : n.grad;
  }

  Var input(Tensor t) {
    int id = push(std::move(t), "input", {}, false);
    return {this, id};
  }

  // Leaf bound to a parameter; backward accumulates into p.grad.
  Var param(Param& p, bool trainable = true) {
    auto& memo = trainable ? param_memo_ : frozen_memo_;
    auto it = memo.find(&p);
    if (it != memo.end()) return {this, it->second};
    int id = push(p.value, trainable ? "param" : "frozen_param", {}, trainable);
    if (trainable) {
      Node& n = nodes_[static_cast<size_t>(id)];
      n.sink = &p;
      n.pull = [](Tape& t, int self) {
        Node& s = t.nodes_[static_cast<size_t>(self)];
        s.sink->grad.v() += s.grad.v();
      };
    }
    memo.emplace(&p, id);
    return {this, id};
  }

  // Seeds d(loss)/d(loss) = seed and sweeps the tape in reverse. The loss
  // must be scalar. Repeated calls accumulate into parameter gradients.
  void backward(Var loss, double seed = 1.0) {
    int lid = check(loss);
    if (nodes_[static_cast<size_t>(lid)].value.size() != 1)
      throw std::invalid_argument("backward: loss must be scalar");
    if (!nodes_[static_cast<size_t>(lid)].requires_grad) return;
    grad_buf(lid)[0] += seed;
    for (int id = lid; id >= 0; --id) {
      Node& n = nodes_[static_cast<size_t>(id)];
      if (!n.requires_grad || n.grad.empty() || !n.pull) continue;
      n.pull(*this, id);
    }
  }

  // --- internal helpers used by the op constructors -------------------

  int push(Tensor value, const char* kind, std::vector<int> inputs, bool requires_grad) {
    Node n;
    n.value = std::move(value);
    n.kind = kind;
    n.inputs = std::move(inputs);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  Tensor& grad_buf(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.empty()) n.grad = Tensor::zeros(n.value.shape());
    return n.grad;
  }

  bool wants_grad(int id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }
  const Tensor& value_at(int id) const { return nodes_[static_cast<size_t>(id)].value; }
  Node& node_mut(int id) { return nodes_[static_cast<size_t>(id)]; }

  int check(Var v) const {
    if (v.tape != this || v.id < 0 || v.id >= size())
      throw std::invalid_argument("var does not belong to this tape");
    return v.id;
  }

 private:
  std::vector<Node> nodes_;
  std::unordered_map<const Param*, int> param_memo_;
  std::unordered_map<const Param*, int> frozen_memo_;
};

namespace detail {

inline Tape& same_tape(std::initializer_list<Var> vars) {
  Tape* t = nullptr;
  for (Var v : vars) {
    if (!v.valid()) throw std::invalid_argument("op on invalid var");
    if (t == nullptr) t = v.tape;
    if (v.tape != t) throw std::invalid_argument("op across different tapes");
  }
  return *t;
}

inline bool any_grad(Tape& t, std::initializer_list<int> ids) {
  for (int id : ids)
    if (t.wants_grad(id)) return true;
  return false;
}

}  // namespace detail

// y = x W^T (+ b). x is [in] or [T,in], W is [out,in], b is [out].
inline Var linear(Var x, Var W, Var b = {}) {
  Tape& t = b.valid() ? detail::same_tape({x, W, b}) : detail::same_tape({x, W});
  const Tensor& xv = t.val(x);
  const Tensor& wv = t.val(W);
  if (wv.rank() != 2) throw std::invalid_argument("linear: W must be rank 2");
  const int in = wv.dim(1), out = wv.dim(0);
  if (xv.cols() != in)
    throw std::invalid_argument("linear: inner dimension mismatch (x cols " +
                                std::to_string(xv.cols()) + " vs W cols " + std::to_string(in) + ")");
  const int rows = xv.rows();
  Tensor y = xv.rank() == 2 ? Tensor::zeros({rows, out}) : Tensor::zeros({out});
  y.m().noalias() = xv.m() * wv.m().transpose();
  if (b.valid()) {
    const Tensor& bv = t.val(b);
    if (bv.size() != static_cast<size_t>(out)) throw std::invalid_argument("linear: bias size mismatch");
    y.m().rowwise() += bv.m().row(0);
  }
  std::vector<int> in_ids = {x.id, W.id};
  if (b.valid()) in_ids.push_back(b.id);
  bool rg = b.valid() ? detail::any_grad(t, {x.id, W.id, b.id}) : detail::any_grad(t, {x.id, W.id});
  int id = t.push(std::move(y), "linear", std::move(in_ids), rg);
  if (rg) {
    t.node_mut(id).pull = [](Tape& tp, int self) {
      auto& n = tp.node_mut(self);
      const int xi = n.inputs[0], wi = n.inputs[1];
      const Tensor& dy = n.grad;
      const Tensor& xv2 = tp.value_at(xi);
      const Tensor& wv2 = tp.value_at(wi);
      if (tp.wants_grad(xi)) tp.grad_buf(xi).m().noalias() += dy.m() * wv2.m();
      if (tp.wants_grad(wi)) tp.grad_buf(wi).m().noalias() += dy.m().transpose() * xv2.m();
      if (n.inputs.size() > 2 && tp.wants_grad(n.inputs[2]))
        tp.grad_buf(n.inputs[2]).m().row(0) += dy.m().colwise().sum();
    };
  }
  return {&t, id};
}

// Plain matrix product [m,k] x [k,n].
inline Var matmul(Var a, Var b) {
  Tape& t = detail::same_tape({a, b});
  const Tensor& av = t.val(a);
  const Tensor& bv = t.val(b);
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0))
    throw std::invalid_argument("matmul: shape mismatch");
  Tensor y = Tensor::zeros({av.dim(0), bv.dim(1)});
  y.m().noalias() = av.m() * bv.m();
  bool rg = detail::any_grad(t, {a.id, b.id});
  int id = t.push(std::move(y), "matmul", {a.id, b.id}, rg);
  if (rg) {
    t.node_mut(id).pull = [](Tape& tp, int self) {
      auto& n = tp.node_mut(self);
      const Tensor& dy = n.grad;
      if (tp.wants_grad(n.inputs[0]))
        tp.grad_buf(n.inputs[0]).m().noalias() += dy.m() * tp.value_at(n.inputs[1]).m().transpose();
      if (tp.wants_grad(n.inputs[1]))
        tp.grad_buf(n.inputs[1]).m().noalias() += tp.value_at(n.inputs[0]).m().transpose() * dy.m();
    };
  }
  return {&t, id};
}

// M [T,d] times v [d] -> [T].
inline Var matvec(Var M, Var v) {
  Tape& t = detail::same_tape({M, v});
  const Tensor& mv = t.val(M);
  const Tensor& vv = t.val(v);
  if (mv.rank() != 2 || vv.rank() != 1 || mv.dim(1) != vv.dim(0))
    throw std::invalid_argument("matvec: shape mismatch");
  Tensor y = Tensor::zeros({mv.dim(0)});
  y.v().noalias() = mv.m() * vv.v();
  bool rg = detail::any_grad(t, {M.id, v.id});
  int id = t.push(std::move(y), "matvec", {M.id, v.id}, rg);
  if (rg) {
    t.node_mut(id).pull = [](Tape& tp, int self) {
      auto& n = tp.node_mut(self);
      const Tensor& dy = n.grad;
      if (tp.wants_grad(n.inputs[0]))
        tp.grad_buf(n.inputs[0]).m().noalias() += dy.v() * tp.value_at(n.inputs[1]).v().transpose();
      if (tp.wants_grad(n.inputs[1]))
        tp.grad_buf(n.inputs[1]).v().noalias() += tp.value_at(n.inputs[0]).m().transpose() * dy.v();
    };
  }
  return {&t, id};
}

// z = sum_t alpha_t H_t for alpha [T], H [T,d] -> [d].
inline Var weighted_rows(Var alpha, Var H) {
  Tape& t = detail::same_tape({alpha, H});
  const Tensor& av = t.val(alpha);
  const Tensor& hv = t.val(H);
  if (av.rank() != 1 || hv.rank() != 2 || av.dim(0) != hv.dim(0))
    throw std::invalid_argument("weighted_rows: shape mismatch");
  Tensor y = Tensor::zeros({hv.dim(1)});
  y.v().noalias() = hv.m().transpose() * av.v();
  bool rg = detail::any_grad(t, {alpha.id, H.id});
  int id = t.push(std::move(y), "weighted_rows", {alpha.id, H.id}, rg);
  if (rg) {
    t.node_mut(id).pull = [](Tape& tp, int self) {
      auto& n = tp.node_mut(self);
      const Tensor& dz = n.grad;
      if (tp.wants_grad(n.inputs[0]))
        tp.grad_buf(n.inputs[0]).v().noalias() += tp.value_at(n.inputs[1]).m() * dz.v();
      if (tp.wants_grad(n.inputs[1]))
        tp.grad_buf(n.inputs[1]).m().noalias() += tp.value_at(n.inputs[0]).v() * dz.v().transpose();
    };
  }
  return {&t, id};
}

namespace detail {

template <typename Fwd, typename Bwd>
Var elementwise(Var x, const char* kind, Fwd fwd, Bwd dfs) {
  Tape& t = same_tape({x});
  const Tensor& xv = t.val(x);
  Tensor y = Tensor::zeros(xv.shape());
  for (size_t i = 0; i < xv.size(); i++) y[i] = fwd(xv[i]);
  bool rg = t.wants_grad(x.id);
  int id = t.push(std::move(y), kind, {x.id}, rg);
  if (rg) {
    t.node_mut(id).pull = [dfs](Tape& tp, int self) {
      auto& n = tp.node_mut(self);
      const Tensor& xv2 = tp.value_at(n.inputs[0]);
      const Tensor& yv = n.value;
      Tensor& dx = tp.grad_buf(n.inputs[0]);
      for (size_t i = 0; i < xv2.size(); i++) dx[i] += n.grad[i] * dfs(xv2[i], yv[i]);
    };
  }
  return {&t, id};
}

template <typename Combine, typename PullA, typename PullB>
Var binary_same_shape(Var a, Var b, const char* kind, Combine fwd, PullA pa, PullB pb) {
  Tape& t = same_tape({a, b});
  const Tensor& av = t.val(a);
  const Tensor& bv = t.val(b);
  if (!av.same_shape(bv)) throw std::invalid_argument(std::string(kind) + ": shape mismatch");
  Tensor y = Tensor::zeros(av.shape());
  for (size_t i = 0; i < av.size(); i++) y[i] = fwd(av[i], bv[i]);
  bool rg = any_grad(t, {a.id, b.id});
  int id = t.push(std::move(y), kind, {a.id, b.id}, rg);
  if (rg) {
    t.node_mut(id).pull = [pa, pb](Tape& tp, int self) {
      auto& n = tp.node_mut(self);
      const Tensor& av2 = tp.value_at(n.inputs[0]);
      const Tensor& bv2 = tp.value_at(n.inputs[1]);
      if (tp.wants_grad(n.inputs[0])) {
        Tensor& da = tp.grad_buf(n.inputs[0]);
        for (size_t i = 0; i < av2.size(); i++) da[i] += pa(n.grad[i], av2[i], bv2[i]);
      }
      if (tp.wants_grad(n.inputs[1])) {
        Tensor& db = tp.grad_buf(n.inputs[1]);
        for (size_t i = 0; i < av2.size(); i++) db[i] += pb(n.grad[i], av2[i], bv2[i]);
      }
    };
  }
  return {&t, id};
}

}  // namespace detail

inline Var add(Var a, Var b) {
  return detail::binary_same_shape(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double g, double, double) { return g; }, [](double g, double, double) { return g; });
}

inline Var sub(Var a, Var b) {
  return detail::binary_same_shape(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double g, double, double) { return g; }, [](double g, double, double) { return -g; });
}

inline Var mul(Var a, Var b) {
  return detail::binary_same_shape(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double g, double, double y) { return g * y; },
      [](double g, double x, double) { return g * x; });
}

inline Var add_scalar(Var x, double c) {
  return detail::elementwise(
      x, "add_scalar", [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

inline Var mul_scalar(Var x, double c) {
  return detail::elementwise(
      x, "mul_scalar", [c](double v) { return v * c; }, [c](double, double) { return c; });
}

inline Var log_op(Var x) {
  return detail::elementwise(
      x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline double sigmoid_scalar(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Var sigmoid(Var x) {
  return detail::elementwise(
      x, "sigmoid", [](double v) { return sigmoid_scalar(v); },
      [](double, double y) { return y * (1.0 - y); });
}

inline Var gelu(Var x) {
  constexpr double kInvSqrt2 = 0.7071067811865475244;
  constexpr double kInvSqrt2Pi = 0.3989422804014326779;
  return detail::elementwise(
      x, "gelu", [=](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
      [=](double v, double) {
        return 0.5 * (1.0 + std::erf(v * kInvSqrt2)) + v * kInvSqrt2Pi * std::exp(-0.5 * v * v);
      });
}

// Row-wise layer normalization with affine gain/shift. Variance uses the
// population convention; eps sits inside the square root.
inline Var layer_norm(Var x, Var gain, Var shift, double eps = 1e-5) {
  Tape& t = detail::same_tape({x, gain, shift});
  const Tensor& xv = t.val(x);
  const Tensor& gv = t.val(gain);
  const Tensor& sv = t.val(shift);
  const int d = xv.cols(), rows = xv.rows();
  if (d < 1 || gv.size() != static_cast<size_t>(d) || sv.size() != static_cast<size_t>(d))
    throw std::invalid_argument("layer_norm: gain/shift must match feature width");
  Tensor y = Tensor::zeros(xv.shape());
  std::vector<double> invstd(static_cast<size_t>(rows));
  std::vector<double> means(static_cast<size_t>(rows));
  for (int r = 0; r < rows; r++) {
    const double* row = xv.data() + static_cast<size_t>(r) * d;
    double mean = 0.0;
    for (int j = 0; j < d; j++) mean += row[j];
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; j++) var += (row[j] - mean) * (row[j] - mean);
    var /= d;
    const double is = 1.0 / std::sqrt(var + eps);
    means[static_cast<size_t>(r)] = mean;
    invstd[static_cast<size_t>(r)] = is;
    double* out = y.data() + static_cast<size_t>(r) * d;
    for (int j = 0; j < d; j++) out[j] = (row[j] - mean) * is * gv[static_cast<size_t>(j)] + sv[static_cast<size_t>(j)];
  }
  bool rg = detail::any_grad(t, {x.id, gain.id, shift.id});
  int id = t.push(std::move(y), "layer_norm", {x.id, gain.id, shift.id}, rg);
  if (rg) {
    t.node_mut(id).pull = [means = std::move(means), invstd = std::move(invstd)](Tape& tp, int self) {
      auto& n = tp.node_mut(self);
      const Tensor& xv2 = tp.value_at(n.inputs[0]);
      const Tensor& gv2 = tp.value_at(n.inputs[1]);
      const int rows2 = xv2.rows(), d2 = xv2.cols();
      const bool wx = tp.wants_grad(n.inputs[0]);
      const bool wg = tp.wants_grad(n.inputs[1]);
      const bool ws = tp.wants_grad(n.inputs[2]);
      for (int r = 0; r < rows2; r++) {
        const double* row = xv2.data() + static_cast<size_t>(r) * d2;
        const double* dy = n.grad.data() + static_cast<size_t>(r) * d2;
        const double mean = means[static_cast<size_t>(r)];
        const double is = invstd[static_cast<size_t>(r)];
        double m1 = 0.0, m2 = 0.0;
        for (int j = 0; j < d2; j++) {
          const double xh = (row[j] - mean) * is;
          const double dg = dy[j] * gv2[static_cast<size_t>(j)];
          m1 += dg;
          m2 += dg * xh;
        }
        m1 /= d2;
        m2 /= d2;
        if (wx) {
          Tensor& dx = tp.grad_buf(n.inputs[0]);
          double* dxr = dx.data() + static_cast<size_t>(r) * d2;
          for (int j = 0; j < d2; j++) {
            const double xh = (row[j] - mean) * is;
            const double dg = dy[j] * gv2[static_cast<size_t>(j)];
            dxr[j] += is * (dg - m1 - xh * m2);
          }
        }
        if (wg) {
          Tensor& dgain = tp.grad_buf(n.inputs[1]);
          for (int j = 0; j < d2; j++) dgain[static_cast<size_t>(j)] += dy[j] * (row[j] - mean) * is;
        }
        if (ws) {
          Tensor& dshift = tp.grad_buf(n.inputs[2]);
          for (int j = 0; j < d2; j++) dshift[static_cast<size_t>(j)] += dy[j];
        }
      }
    };
  }
  return {&t, id};
}

// Numerically stable softmax over a vector; masked entries get weight 0.
inline Var softmax_vec(Var logits, const FrameMask& mask = {}) {
  Tape& t = detail::same_tape({logits});
  const Tensor& lv = t.val(logits);
  if (lv.rank() != 1 || lv.size() == 0) throw std::invalid_argument("softmax: input must be a nonempty vector");
  const int n = lv.dim(0);
  if (!mask.empty() && static_cast<int>(mask.size()) != n)
    throw std::invalid_argument("softmax: mask length mismatch");
  if (mask_valid_count(mask, n) == 0) throw std::invalid_argument("softmax: all entries masked");
  Tensor p = Tensor::zeros({n});
  double mx = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; i++)
    if (mask.empty() || mask[static_cast<size_t>(i)]) mx = std::max(mx, lv[static_cast<size_t>(i)]);
  double denom = 0.0;
  for (int i = 0; i < n; i++) {
    if (mask.empty() || mask[static_cast<size_t>(i)]) {
      p[static_cast<size_t>(i)] = std::exp(lv[static_cast<size_t>(i)] - mx);
      denom += p[static_cast<size_t>(i)];
    }
  }
  for (int i = 0; i < n; i++) p[static_cast<size_t>(i)] /= denom;
  bool rg = t.wants_grad(logits.id);
  int id = t.push(std::move(p), "softmax", {logits.id}, rg);
  if (rg) {
    t.node_mut(id).pull = [](Tape& tp, int self) {
      auto& n2 = tp.node_mut(self);
      const Tensor& y = n2.value;
      double dot = 0.0;
      for (size_t i = 0; i < y.size(); i++) dot += n2.grad[i] * y[i];
      Tensor& dx = tp.grad_buf(n2.inputs[0]);
      for (size_t i = 0; i < y.size(); i++) dx[i] += y[i] * (n2.grad[i] - dot);
    };
  }
  return {&t, id};
}

// A = softmax_rows(scale * Q K^T + key mask). Q is [T,dh], K is [S,dh].
// Masked key positions receive a -1e9 logit offset before the softmax.
inline Var attn_weights(Var q, Var k, double scale, const FrameMask& key_mask = {}) {
  Tape& t = detail::same_tape({q, k});
  const Tensor& qv = t.val(q);
  const Tensor& kv = t.val(k);
  if (qv.rank() != 2 || kv.rank() != 2 || qv.dim(1) != kv.dim(1))
    throw std::invalid_argument("attn_weights: shape mismatch");
  const int T = qv.dim(0), S = kv.dim(0);
  if (!key_mask.empty() && static_cast<int>(key_mask.size()) != S)
    throw std::invalid_argument("attn_weights: key mask length mismatch");
  if (mask_valid_count(key_mask, S) == 0) throw std::invalid_argument("attn_weights: all keys masked");
  Tensor a = Tensor::zeros({T, S});
  a.m().noalias() = qv.m() * kv.m().transpose() * scale;
  for (int r = 0; r < T; r++) {
    double* row = a.data() + static_cast<size_t>(r) * S;
    if (!key_mask.empty())
      for (int c = 0; c < S; c++)
        if (!key_mask[static_cast<size_t>(c)]) row[c] -= 1e9;
    double mx = row[0];
    for (int c = 1; c < S; c++) mx = std::max(mx, row[c]);
    double denom = 0.0;
    for (int c = 0; c < S; c++) {
      row[c] = std::exp(row[c] - mx);
      denom += row[c];
    }
    for (int c = 0; c < S; c++) row[c] /= denom;
  }
  bool rg = detail::any_grad(t, {q.id, k.id});
  int id = t.push(std::move(a), "attn_weights", {q.id, k.id}, rg);
  if (rg) {
    t.node_mut(id).pull = [scale](Tape& tp, int self) {
      auto& n = tp.node_mut(self);
      const Tensor& A = n.value;
      const Tensor& dA = n.grad;
      const int T2 = A.dim(0), S2 = A.dim(1);
      Tensor dS = Tensor::zeros({T2, S2});
      for (int r = 0; r < T2; r++) {
        const double* arow = A.data() + static_cast<size_t>(r) * S2;
        const double* grow = dA.data() + static_cast<size_t>(r) * S2;
        double dot = 0.0;
        for (int c = 0; c < S2; c++) dot += arow[c] * grow[c];
        double* srow = dS.data() + static_cast<size_t>(r) * S2;
        for (int c = 0; c < S2; c++) srow[c] = arow[c] * (grow[c] - dot);
      }
      if (tp.wants_grad(n.inputs[0]))
        tp.grad_buf(n.inputs[0]).m().noalias() += scale * (dS.m() * tp.value_at(n.inputs[1]).m());
      if (tp.wants_grad(n.inputs[1]))
        tp.grad_buf(n.inputs[1]).m().noalias() += scale * (dS.m().transpose() * tp.value_at(n.inputs[0]).m());
    };
  }
  return {&t, id};
}

inline Var slice_cols(Var x, int off, int width) {
  Tape& t = detail::same_tape({x});
  const Tensor& xv = t.val(x);
  if (xv.rank() != 2 || off < 0 || width <= 0 || off + width > xv.dim(1))
    throw std::invalid_argument("slice_cols: out of range");
  Tensor y = Tensor::zeros({xv.dim(0), width});
  y.m() = xv.m().middleCols(off, width);
  bool rg = t.wants_grad(x.id);
  int id = t.push(std::move(y), "slice_cols", {x.id}, rg);
  if (rg) {
    t.node_mut(id).pull = [off, width](Tape& tp, int self) {
      auto& n = tp.node_mut(self);
      tp.grad_buf(n.inputs[0]).m().middleCols(off, width) += n.grad.m();
    };
  }
  return {&t, id};
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
  Tape& t = *parts[0].tape;
  int rows = t.val(parts[0]).dim(0);
  int total = 0;
  std::vector<int> ids;
  bool rg = false;
  for (Var p : parts) {
    detail::same_tape({parts[0], p});
    const Tensor& pv = t.val(p);
    if (pv.rank() != 2 || pv.dim(0) != rows) throw std::invalid_argument("concat_cols: row mismatch");
    total += pv.dim(1);
    ids.push_back(p.id);
    rg = rg || t.wants_grad(p.id);
  }
  Tensor y = Tensor::zeros({rows, total});
  int off = 0;
  for (Var p : parts) {
    const Tensor& pv = t.val(p);
    y.m().middleCols(off, pv.dim(1)) = pv.m();
    off += pv.dim(1);
  }
  int id = t.push(std::move(y), "concat_cols", ids, rg);
  if (rg) {
    t.node_mut(id).pull = [](Tape& tp, int self) {
      auto& n = tp.node_mut(self);
      int o = 0;
      for (int in : n.inputs) {
        const int w = tp.value_at(in).dim(1);
        if (tp.wants_grad(in)) tp.grad_buf(in).m() += n.grad.m().middleCols(o, w);
        o += w;
      }
    };
  }
  return {&t, id};
}

inline Var concat_rows(Var a, Var b) {
  Tape& t = detail::same_tape({a, b});
  const Tensor& av = t.val(a);
  const Tensor& bv = t.val(b);
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(1))
    throw std::invalid_argument("concat_rows: width mismatch");
  Tensor y = Tensor::zeros({av.dim(0) + bv.dim(0), av.dim(1)});
  y.m().topRows(av.dim(0)) = av.m();
  y.m().bottomRows(bv.dim(0)) = bv.m();
  bool rg = detail::any_grad(t, {a.id, b.id});
  int id = t.push(std::move(y), "concat_rows", {a.id, b.id}, rg);
  if (rg) {
    t.node_mut(id).pull = [](Tape& tp, int self) {
      auto& n = tp.node_mut(self);
      const int ra = tp.value_at(n.inputs[0]).dim(0);
      const int rb = tp.value_at(n.inputs[1]).dim(0);
      if (tp.wants_grad(n.inputs[0])) tp.grad_buf(n.inputs[0]).m() += n.grad.m().topRows(ra);
      if (tp.wants_grad(n.inputs[1])) tp.grad_buf(n.inputs[1]).m() += n.grad.m().bottomRows(rb);
    };
  }
  return {&t, id};
}

inline Var concat_vec(Var a, Var b) {
  Tape& t = detail::same_tape({a, b});
  const Tensor& av = t.val(a);
  const Tensor& bv = t.val(b);
  if (av.rank() != 1 || bv.rank() != 1) throw std::invalid_argument("concat_vec: rank must be 1");
  Tensor y = Tensor::zeros({av.dim(0) + bv.dim(0)});
  std::copy(av.data(), av.data() + av.size(), y.data());
  std::copy(bv.data(), bv.data() + bv.size(), y.data() + av.size());
  bool rg = detail::any_grad(t, {a.id, b.id});
  int id = t.push(std::move(y), "concat_vec", {a.id, b.id}, rg);
  if (rg) {
    t.node_mut(id).pull = [](Tape& tp, int self) {
      auto& n = tp.node_mut(self);
      const size_t na = tp.value_at(n.inputs[0]).size();
      const size_t nb = tp.value_at(n.inputs[1]).size();
      if (tp.wants_grad(n.inputs[0])) {
        Tensor& da = tp.grad_buf(n.inputs[0]);
        for (size_t i = 0; i < na; i++) da[i] += n.grad[i];
      }
      if (tp.wants_grad(n.inputs[1])) {
        Tensor& db = tp.grad_buf(n.inputs[1]);
        for (size_t i = 0; i < nb; i++) db[i] += n.grad[na + i];
      }
    };
  }
  return {&t, id};
}

// Mean over valid rows -> [d]. Rejects an all-masked input.
inline Var mean_rows(Var H, const FrameMask& mask = {}) {
  Tape& t = detail::same_tape({H});
  const Tensor& hv = t.val(H);
  if (hv.rank() != 2) throw std::invalid_argument("mean_rows: input must be rank 2");
  const int T = hv.dim(0), d = hv.dim(1);
  if (!mask.empty() && static_cast<int>(mask.size()) != T)
    throw std::invalid_argument("mean_rows: mask length mismatch");
  const int nv = mask_valid_count(mask, T);
  if (nv == 0) throw std::invalid_argument("mean_rows: no valid frames");
  Tensor y = Tensor::zeros({d});
  for (int r = 0; r < T; r++) {
    if (!mask.empty() && !mask[static_cast<size_t>(r)]) continue;
    y.v() += hv.m().row(r).transpose();
  }
  y.v() /= nv;
  bool rg = t.wants_grad(H.id);
  int id = t.push(std::move(y), "mean_rows", {H.id}, rg);
  if (rg) {
    t.node_mut(id).pull = [mask, nv](Tape& tp, int self) {
      auto& n = tp.node_mut(self);
      Tensor& dH = tp.grad_buf(n.inputs[0]);
      const int T2 = dH.dim(0);
      for (int r = 0; r < T2; r++) {
        if (!mask.empty() && !mask[static_cast<size_t>(r)]) continue;
        dH.m().row(r) += n.grad.v().transpose() / nv;
      }
    };
  }
  return {&t, id};
}

inline Var sum_all(Var x) {
  Tape& t = detail::same_tape({x});
  const Tensor& xv = t.val(x);
  Tensor y = Tensor::scalar(xv.sum());
  bool rg = t.wants_grad(x.id);
  int id = t.push(std::move(y), "sum", {x.id}, rg);
  if (rg) {
    t.node_mut(id).pull = [](Tape& tp, int self) {
      auto& n = tp.node_mut(self);
      Tensor& dx = tp.grad_buf(n.inputs[0]);
      const double g = n.grad[0];
      for (size_t i = 0; i < dx.size(); i++) dx[i] += g;
    };
  }
  return {&t, id};
}

// y = sum_j w_j X_j for a weight vector over same-shape matrices.
inline Var convex_combine(const std::vector<Var>& mats, Var weights) {
  if (mats.empty()) throw std::invalid_argument("convex_combine: empty");
  Tape& t = detail::same_tape({mats[0], weights});
  const Tensor& wv = t.val(weights);
  if (wv.rank() != 1 || wv.dim(0) != static_cast<int>(mats.size()))
    throw std::invalid_argument("convex_combine: weight count mismatch");
  const Tensor& first = t.val(mats[0]);
  Tensor y = Tensor::zeros(first.shape());
  std::vector<int> ids{weights.id};
  bool rg = t.wants_grad(weights.id);
  for (size_t j = 0; j < mats.size(); j++) {
    detail::same_tape({mats[0], mats[j]});
    const Tensor& mj = t.val(mats[j]);
    if (!mj.same_shape(first)) throw std::invalid_argument("convex_combine: shape mismatch");
    y.v() += wv[j] * mj.v();
    ids.push_back(mats[j].id);
    rg = rg || t.wants_grad(mats[j].id);
  }
  int id = t.push(std::move(y), "convex_combine", std::move(ids), rg);
  if (rg) {
    t.node_mut(id).pull = [](Tape& tp, int self) {
      auto& n = tp.node_mut(self);
      const int wid = n.inputs[0];
      const Tensor& w = tp.value_at(wid);
      for (size_t j = 1; j < n.inputs.size(); j++) {
        const int mid = n.inputs[j];
        if (tp.wants_grad(wid))
          tp.grad_buf(wid)[j - 1] += n.grad.v().dot(tp.value_at(mid).v());
        if (tp.wants_grad(mid)) tp.grad_buf(mid).v() += w[j - 1] * n.grad.v();
      }
    };
  }
  return {&t, id};
}

// Binary cross-entropy on a logit, in the log-sum-exp form that stays
// finite for any input magnitude. y must be exactly 0 or 1.
inline Var bce_with_logits(Var logit, double y) {
  if (y != 0.0 && y != 1.0) throw std::invalid_argument("bce: label must be 0 or 1");
  Tape& t = detail::same_tape({logit});
  const Tensor& lv = t.val(logit);
  if (lv.size() != 1) throw std::invalid_argument("bce: logit must be scalar");
  const double l = lv[0];
  const double loss = std::max(l, 0.0) - l * y + std::log1p(std::exp(-std::abs(l)));
  bool rg = t.wants_grad(logit.id);
  int id = t.push(Tensor::scalar(loss), "bce_with_logits", {logit.id}, rg);
  if (rg) {
    t.node_mut(id).pull = [y](Tape& tp, int self) {
      auto& n = tp.node_mut(self);
      const double l2 = tp.value_at(n.inputs[0])[0];
      tp.grad_buf(n.inputs[0])[0] += n.grad[0] * (sigmoid_scalar(l2) - y);
    };
  }
  return {&t, id};
}

// Central finite-difference check of analytic gradients.
// loss_fn must run a full forward+backward pass, accumulating into the
// given parameters' grad buffers, and return the scalar loss.
inline double grad_check(const std::function<double()>& loss_fn, std::span<Param* const> params,
                         double step = 1e-5) {
  if (!(step >= 1e-7 && step <= 1e-3)) throw std::invalid_argument("grad_check: step out of [1e-7, 1e-3]");
  for (Param* p : params) p->zero_grad();
  const double base = loss_fn();
  if (!std::isfinite(base)) throw std::runtime_error("grad_check: non-finite loss");
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (Param* p : params) analytic.push_back(p->grad);
  double max_rel = 0.0;
  for (size_t pi = 0; pi < params.size(); pi++) {
    Param& p = *params[pi];
    for (size_t i = 0; i < p.value.size(); i++) {
      const double saved = p.value[i];
      p.value[i] = saved + step;
      for (Param* q : params) q->zero_grad();
      const double fp = loss_fn();
      p.value[i] = saved - step;
      for (Param* q : params) q->zero_grad();
      const double fm = loss_fn();
      p.value[i] = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw std::runtime_error("grad_check: non-finite loss at perturbed point");
      const double fd = (fp - fm) / (2.0 * step);
      const double rel = std::abs(analytic[pi][i] - fd) / std::max(1.0, std::abs(fd));
      max_rel = std::max(max_rel, rel);
    }
  }
  for (Param* p : params) p->zero_grad();
  return max_rel;
}

}  // namespace mvp
