#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "pcmamba/rng.hpp"

namespace pcm {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (const auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // populated by Tape::backward for nodes on the grad path
  bool requires_grad = false;
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : node(std::make_shared<TensorNode<T>>()) {}

  explicit Tensor(Shape shape, T fill = T(0)) : node(std::make_shared<TensorNode<T>>()) {
    node->shape = std::move(shape);
    node->value.assign(numel(node->shape), fill);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }
  static Tensor full(Shape shape, T v) { return Tensor(std::move(shape), v); }
  static Tensor scalar(T v) { return Tensor(Shape{1}, v); }

  static Tensor from(Shape shape, std::vector<T> values) {
    if (numel(shape) != values.size())
      throw std::invalid_argument("tensor: " + shape_str(shape) + " cannot hold " +
                                  std::to_string(values.size()) + " values");
    Tensor t;
    t.node->shape = std::move(shape);
    t.node->value = std::move(values);
    return t;
  }

  static Tensor randn(Shape shape, Rng& rng, T stddev = T(1)) {
    Tensor t(std::move(shape));
    for (auto& v : t.node->value) v = static_cast<T>(rng.normal()) * stddev;
    return t;
  }

  const Shape& shape() const { return node->shape; }
  std::size_t rank() const { return node->shape.size(); }
  std::size_t size() const { return node->value.size(); }

  T* data() { return node->value.data(); }
  const T* data() const { return node->value.data(); }
  std::vector<T>& values() { return node->value; }
  const std::vector<T>& values() const { return node->value; }

  T at(std::size_t flat) const { return node->value.at(flat); }

  T item() const {
    if (size() != 1)
      throw std::invalid_argument("item: tensor " + shape_str(shape()) + " is not scalar");
    return node->value[0];
  }

  bool requires_grad() const { return node->requires_grad; }
  Tensor& set_requires_grad(bool rg) {
    node->requires_grad = rg;
    return *this;
  }

  bool has_grad() const { return !node->grad.empty(); }
  const std::vector<T>& grad() const {
    if (node->grad.empty())
      throw std::runtime_error("grad: tensor has no gradient (run backward first)");
    return node->grad;
  }
  void zero_grad() { node->grad.clear(); }

  Tensor clone() const {
    Tensor t;
    t.node->shape = node->shape;
    t.node->value = node->value;
    t.node->requires_grad = node->requires_grad;
    return t;
  }

  bool all_finite() const {
    for (const auto v : node->value)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  std::shared_ptr<TensorNode<T>> node;
};

// ---------------------------------------------------------------------------
// Tape: records backward closures during forward evaluation. One tape owns one
// forward/backward pass; independent tapes may run on independent threads and
// their gradients are merged by the caller in a fixed order.

template <typename T>
class Tape;

template <typename T>
inline Tape<T>*& active_tape_slot() {
  thread_local Tape<T>* t = nullptr;
  return t;
}

template <typename T>
inline Tape<T>* active_tape() {
  return active_tape_slot<T>();
}

template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::function<void()> fn) { ops_.push_back(std::move(fn)); }

  std::vector<T>& grad_buffer(const std::shared_ptr<TensorNode<T>>& n) {
    auto& g = grads_[n.get()];
    if (g.empty()) g.assign(n->value.size(), T(0));
    return g;
  }

  const std::vector<T>* find_grad(const TensorNode<T>* n) const {
    const auto it = grads_.find(const_cast<TensorNode<T>*>(n));
    return it == grads_.end() ? nullptr : &it->second;
  }
  const std::vector<T>* find_grad(const Tensor<T>& t) const { return find_grad(t.node.get()); }

  // Replays the recorded closures in reverse. With sync_to_nodes, gradients of
  // every node on the grad path are accumulated into the node itself, so
  // repeated backward calls add up there.
  void backward(const Tensor<T>& loss, bool sync_to_nodes = true) {
    if (loss.size() != 1)
      throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss.shape()));
    for (auto& [n, g] : grads_) std::fill(g.begin(), g.end(), T(0));
    grad_buffer(loss.node)[0] = T(1);
    keep_.push_back(loss.node);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    if (sync_to_nodes) {
      for (auto& [n, g] : grads_) {
        if (!n->requires_grad) continue;
        if (n->grad.empty()) n->grad.assign(g.size(), T(0));
        for (std::size_t i = 0; i < g.size(); ++i) n->grad[i] += g[i];
      }
    }
  }

  void reset() {
    ops_.clear();
    grads_.clear();
    keep_.clear();
  }

  std::size_t num_ops() const { return ops_.size(); }

  // nodes referenced by grads_ must stay alive while the tape holds raw keys
  void retain(std::shared_ptr<TensorNode<T>> n) { keep_.push_back(std::move(n)); }

 private:
  std::vector<std::function<void()>> ops_;
  std::unordered_map<TensorNode<T>*, std::vector<T>> grads_;
  std::vector<std::shared_ptr<TensorNode<T>>> keep_;
};

// RAII scope that makes a tape the active one for the current thread.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& t) : prev_(active_tape_slot<T>()) { active_tape_slot<T>() = &t; }
  ~TapeScope() { active_tape_slot<T>() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* prev_;
};

// Convenience entry point matching the "loss produced under an active tape" use.
template <typename T>
inline void backward(const Tensor<T>& loss) {
  Tape<T>* tp = active_tape<T>();
  if (!tp) throw std::runtime_error("backward: no active tape on this thread");
  tp->backward(loss, true);
}

namespace detail {

template <typename T>
inline bool tape_wants(std::initializer_list<const Tensor<T>*> ins) {
  if (!active_tape<T>()) return false;
  for (const auto* p : ins)
    if (p->node->requires_grad) return true;
  return false;
}

template <typename T>
inline void mark_output(Tensor<T>& out) {
  out.node->requires_grad = true;
  active_tape<T>()->retain(out.node);
}

// Broadcast plan over trailing dimensions, NumPy style. Strides are in
// elements of the respective operand, zero where the operand broadcasts.
struct BcastPlan {
  Shape oshape;
  std::vector<std::size_t> astr, bstr;
  std::size_t onum = 0;
  bool same = false;
};

inline BcastPlan make_bcast_plan(const Shape& a, const Shape& b, const char* op) {
  BcastPlan p;
  if (a == b) {
    p.oshape = a;
    p.onum = numel(a);
    p.same = true;
    return p;
  }
  const std::size_t r = std::max(a.size(), b.size());
  p.oshape.resize(r);
  p.astr.assign(r, 0);
  p.bstr.assign(r, 0);
  std::vector<std::size_t> as(r, 1), bs(r, 1);
  std::copy(a.begin(), a.end(), as.begin() + (r - a.size()));
  std::copy(b.begin(), b.end(), bs.begin() + (r - b.size()));
  for (std::size_t d = 0; d < r; ++d) {
    if (as[d] != bs[d] && as[d] != 1 && bs[d] != 1)
      throw std::invalid_argument(std::string(op) + ": shapes " + shape_str(a) + " and " +
                                  shape_str(b) + " are not broadcast-compatible");
    p.oshape[d] = std::max(as[d], bs[d]);
  }
  std::size_t astride = 1, bstride = 1;
  for (std::size_t d = r; d-- > 0;) {
    p.astr[d] = (as[d] == 1 && p.oshape[d] != 1) ? 0 : astride;
    p.bstr[d] = (bs[d] == 1 && p.oshape[d] != 1) ? 0 : bstride;
    astride *= as[d];
    bstride *= bs[d];
  }
  p.onum = numel(p.oshape);
  return p;
}

// fn(out_index, a_index, b_index) over the full broadcast volume
template <typename Fn>
inline void bcast_iter(const BcastPlan& p, Fn&& fn) {
  const std::size_t r = p.oshape.size();
  std::vector<std::size_t> idx(r, 0);
  std::size_t ai = 0, bi = 0;
  for (std::size_t oi = 0; oi < p.onum; ++oi) {
    fn(oi, ai, bi);
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      ai += p.astr[d];
      bi += p.bstr[d];
      if (idx[d] < p.oshape[d]) break;
      ai -= p.astr[d] * p.oshape[d];
      bi -= p.bstr[d] * p.oshape[d];
      idx[d] = 0;
    }
  }
}

template <typename T, class F, class DFA, class DFB>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, const char* name, F f, DFA dfa,
                    DFB dfb) {
  const BcastPlan plan = make_bcast_plan(a.shape(), b.shape(), name);
  Tensor<T> out(plan.oshape);
  const T* av = a.data();
  const T* bv = b.data();
  T* ov = out.data();
  if (plan.same) {
    for (std::size_t i = 0; i < plan.onum; ++i) ov[i] = f(av[i], bv[i]);
  } else {
    bcast_iter(plan, [&](std::size_t oi, std::size_t ai, std::size_t bi) {
      ov[oi] = f(av[ai], bv[bi]);
    });
  }
  if (tape_wants<T>({&a, &b})) {
    mark_output(out);
    Tape<T>* tp = active_tape<T>();
    const bool wa = a.node->requires_grad, wb = b.node->requires_grad;
    tp->record([an = a.node, bn = b.node, on = out.node, tp, plan, dfa, dfb, wa, wb] {
      const std::vector<T>* go = tp->find_grad(on.get());
      if (!go) return;
      const T* avp = an->value.data();
      const T* bvp = bn->value.data();
      const T* ovp = on->value.data();
      std::vector<T>* ga = wa ? &tp->grad_buffer(an) : nullptr;
      std::vector<T>* gb = wb ? &tp->grad_buffer(bn) : nullptr;
      if (plan.same) {
        for (std::size_t i = 0; i < plan.onum; ++i) {
          const T g = (*go)[i];
          if (ga) (*ga)[i] += g * dfa(avp[i], bvp[i], ovp[i]);
          if (gb) (*gb)[i] += g * dfb(avp[i], bvp[i], ovp[i]);
        }
      } else {
        bcast_iter(plan, [&](std::size_t oi, std::size_t ai, std::size_t bi) {
          const T g = (*go)[oi];
          if (ga) (*ga)[ai] += g * dfa(avp[ai], bvp[bi], ovp[oi]);
          if (gb) (*gb)[bi] += g * dfb(avp[ai], bvp[bi], ovp[oi]);
        });
      }
    });
  }
  return out;
}

template <typename T, class F, class DF>
Tensor<T> unary_op(const Tensor<T>& a, F f, DF df) {
  Tensor<T> out(a.shape());
  const T* av = a.data();
  T* ov = out.data();
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) ov[i] = f(av[i]);
  if (tape_wants<T>({&a})) {
    mark_output(out);
    Tape<T>* tp = active_tape<T>();
    tp->record([an = a.node, on = out.node, tp, df] {
      const std::vector<T>* go = tp->find_grad(on.get());
      if (!go) return;
      auto& ga = tp->grad_buffer(an);
      const std::size_t m = an->value.size();
      for (std::size_t i = 0; i < m; ++i) ga[i] += (*go)[i] * df(an->value[i], on->value[i]);
    });
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise operations. Division follows IEEE semantics (x/0 gives inf/nan);
// callers that must not see non-finite values guard the denominator instead.

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T, T) { return T(1); },
      [](T, T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T, T) { return T(1); },
      [](T, T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y, T) { return y; },
      [](T x, T, T) { return x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, "div", [](T x, T y) { return x / y; }, [](T, T y, T) { return T(1) / y; },
      [](T, T y, T o) { return -o / y; });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return detail::unary_op(
      a, [](T x) { return -x; }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> vexp(const Tensor<T>& a) {
  return detail::unary_op(
      a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> vlog(const Tensor<T>& a) {
  return detail::unary_op(
      a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Tensor<T> vsqrt(const Tensor<T>& a) {
  return detail::unary_op(
      a, [](T x) { return std::sqrt(x); }, [](T, T y) { return T(1) / (T(2) * y); });
}

template <typename T>
inline T softplus_val(T x) {
  if (x > T(30)) return x;
  return std::log1p(std::exp(x));
}

template <typename T>
inline T sigmoid_val(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& a) {
  return detail::unary_op(
      a, [](T x) { return softplus_val(x); }, [](T x, T) { return sigmoid_val(x); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return detail::unary_op(
      a, [](T x) { return sigmoid_val(x); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
inline T gelu_val(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(0.70710678118654752440)));
}

template <typename T>
inline T gelu_deriv(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * T(0.70710678118654752440)));
  const T pdf = T(0.39894228040143267794) * std::exp(T(-0.5) * x * x);
  return cdf + x * pdf;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  return detail::unary_op(
      a, [](T x) { return gelu_val(x); }, [](T x, T) { return gelu_deriv(x); });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  return detail::unary_op(
      a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> shift(const Tensor<T>& a, T s) {
  return detail::unary_op(
      a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

enum class OpKind { Add, Sub, Mul, Div, Neg, Exp, Log, Sqrt, Softplus, Sigmoid, Gelu };

// Dispatcher form; unary kinds reject a second operand.
template <typename T>
Tensor<T> elementwise(OpKind kind, const Tensor<T>& a, const Tensor<T>* b = nullptr) {
  const bool is_binary =
      kind == OpKind::Add || kind == OpKind::Sub || kind == OpKind::Mul || kind == OpKind::Div;
  if (is_binary != (b != nullptr))
    throw std::invalid_argument("elementwise: operand count does not match op kind");
  switch (kind) {
    case OpKind::Add: return add(a, *b);
    case OpKind::Sub: return sub(a, *b);
    case OpKind::Mul: return mul(a, *b);
    case OpKind::Div: return div(a, *b);
    case OpKind::Neg: return neg(a);
    case OpKind::Exp: return vexp(a);
    case OpKind::Log: return vlog(a);
    case OpKind::Sqrt: return vsqrt(a);
    case OpKind::Softplus: return softplus(a);
    case OpKind::Sigmoid: return sigmoid(a);
    case OpKind::Gelu: return gelu(a);
  }
  throw std::invalid_argument("elementwise: unknown op kind");
}

// ---------------------------------------------------------------------------
// Dense kernels

namespace detail {

template <typename T>
void gemm_nn_acc(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = a[i * k + p];
      if (aip == T(0)) continue;
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

// c(m x n) += a(m x k) * b(n x k)^T
template <typename T>
void gemm_nt_acc(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T acc = T(0);
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] += acc;
    }
  }
}

// c(m x n) += a(k x m)^T * b(k x n)
template <typename T>
void gemm_tn_acc(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a + p * m;
    const T* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T api = arow[i];
      if (api == T(0)) continue;
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += api * brow[j];
    }
  }
}

}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw std::invalid_argument("matmul: expected rank-2 operands, got " + shape_str(a.shape()) +
                                " and " + shape_str(b.shape()));
  if (a.shape()[1] != b.shape()[0])
    throw std::invalid_argument("matmul: inner dimensions differ, " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  Tensor<T> out(Shape{m, n});
  detail::gemm_nn_acc(m, n, k, a.data(), b.data(), out.data());
  if (detail::tape_wants<T>({&a, &b})) {
    detail::mark_output(out);
    Tape<T>* tp = active_tape<T>();
    const bool wa = a.node->requires_grad, wb = b.node->requires_grad;
    tp->record([an = a.node, bn = b.node, on = out.node, tp, m, n, k, wa, wb] {
      const std::vector<T>* go = tp->find_grad(on.get());
      if (!go) return;
      if (wa) detail::gemm_nt_acc(m, k, n, go->data(), bn->value.data(), tp->grad_buffer(an).data());
      if (wb) detail::gemm_tn_acc(k, n, m, an->value.data(), go->data(), tp->grad_buffer(bn).data());
    });
  }
  return out;
}

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& a) {
  if (a.rank() != 2)
    throw std::invalid_argument("transpose2d: expected rank-2, got " + shape_str(a.shape()));
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  Tensor<T> out(Shape{n, m});
  const T* av = a.data();
  T* ov = out.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) ov[j * m + i] = av[i * n + j];
  if (detail::tape_wants<T>({&a})) {
    detail::mark_output(out);
    Tape<T>* tp = active_tape<T>();
    tp->record([an = a.node, on = out.node, tp, m, n] {
      const std::vector<T>* go = tp->find_grad(on.get());
      if (!go) return;
      auto& ga = tp->grad_buffer(an);
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t i = 0; i < m; ++i) ga[i * n + j] += (*go)[j * m + i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.size())
    throw std::invalid_argument("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape) +
                                " changes element count");
  Tensor<T> out;
  out.node->shape = std::move(shape);
  out.node->value = a.node->value;
  if (detail::tape_wants<T>({&a})) {
    detail::mark_output(out);
    Tape<T>* tp = active_tape<T>();
    tp->record([an = a.node, on = out.node, tp] {
      const std::vector<T>* go = tp->find_grad(on.get());
      if (!go) return;
      auto& ga = tp->grad_buffer(an);
      for (std::size_t i = 0; i < go->size(); ++i) ga[i] += (*go)[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[0] != b.shape()[0])
    throw std::invalid_argument("concat_cols: incompatible shapes " + shape_str(a.shape()) +
                                " and " + shape_str(b.shape()));
  const std::size_t m = a.shape()[0], ka = a.shape()[1], kb = b.shape()[1];
  Tensor<T> out(Shape{m, ka + kb});
  const T* av = a.data();
  const T* bv = b.data();
  T* ov = out.data();
  for (std::size_t i = 0; i < m; ++i) {
    std::copy(av + i * ka, av + (i + 1) * ka, ov + i * (ka + kb));
    std::copy(bv + i * kb, bv + (i + 1) * kb, ov + i * (ka + kb) + ka);
  }
  if (detail::tape_wants<T>({&a, &b})) {
    detail::mark_output(out);
    Tape<T>* tp = active_tape<T>();
    const bool wa = a.node->requires_grad, wb = b.node->requires_grad;
    tp->record([an = a.node, bn = b.node, on = out.node, tp, m, ka, kb, wa, wb] {
      const std::vector<T>* go = tp->find_grad(on.get());
      if (!go) return;
      if (wa) {
        auto& ga = tp->grad_buffer(an);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < ka; ++j) ga[i * ka + j] += (*go)[i * (ka + kb) + j];
      }
      if (wb) {
        auto& gb = tp->grad_buffer(bn);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < kb; ++j) gb[i * kb + j] += (*go)[i * (ka + kb) + ka + j];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> reverse_rows(const Tensor<T>& a) {
  if (a.rank() != 2)
    throw std::invalid_argument("reverse_rows: expected rank-2, got " + shape_str(a.shape()));
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  Tensor<T> out(a.shape());
  const T* av = a.data();
  T* ov = out.data();
  for (std::size_t i = 0; i < m; ++i)
    std::copy(av + i * n, av + (i + 1) * n, ov + (m - 1 - i) * n);
  if (detail::tape_wants<T>({&a})) {
    detail::mark_output(out);
    Tape<T>* tp = active_tape<T>();
    tp->record([an = a.node, on = out.node, tp, m, n] {
      const std::vector<T>* go = tp->find_grad(on.get());
      if (!go) return;
      auto& ga = tp->grad_buffer(an);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += (*go)[(m - 1 - i) * n + j];
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
  Tensor<T> out(Shape{1});
  T acc = T(0);
  for (const auto v : a.values()) acc += v;
  out.data()[0] = acc;
  if (detail::tape_wants<T>({&a})) {
    detail::mark_output(out);
    Tape<T>* tp = active_tape<T>();
    tp->record([an = a.node, on = out.node, tp] {
      const std::vector<T>* go = tp->find_grad(on.get());
      if (!go) return;
      auto& ga = tp->grad_buffer(an);
      for (auto& g : ga) g += (*go)[0];
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
  if (a.size() == 0) throw std::invalid_argument("mean_all: empty tensor");
  return scale(sum_all(a), T(1) / static_cast<T>(a.size()));
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& a, std::size_t axis) {
  if (axis >= a.rank())
    throw std::invalid_argument("softmax: axis " + std::to_string(axis) + " out of range for " +
                                shape_str(a.shape()));
  const Shape& s = a.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  const std::size_t len = s[axis];
  Tensor<T> out(s);
  const T* av = a.data();
  T* ov = out.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = av[base];
      for (std::size_t l = 1; l < len; ++l) mx = std::max(mx, av[base + l * inner]);
      T sum = T(0);
      for (std::size_t l = 0; l < len; ++l) {
        const T e = std::exp(av[base + l * inner] - mx);
        ov[base + l * inner] = e;
        sum += e;
      }
      const T inv = T(1) / sum;
      for (std::size_t l = 0; l < len; ++l) ov[base + l * inner] *= inv;
    }
  }
  if (detail::tape_wants<T>({&a})) {
    detail::mark_output(out);
    Tape<T>* tp = active_tape<T>();
    tp->record([an = a.node, on = out.node, tp, outer, inner, len] {
      const std::vector<T>* go = tp->find_grad(on.get());
      if (!go) return;
      auto& ga = tp->grad_buffer(an);
      const T* p = on->value.data();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * len * inner + in;
          T dot = T(0);
          for (std::size_t l = 0; l < len; ++l)
            dot += (*go)[base + l * inner] * p[base + l * inner];
          for (std::size_t l = 0; l < len; ++l) {
            const std::size_t i = base + l * inner;
            ga[i] += p[i] * ((*go)[i] - dot);
          }
        }
      }
    });
  }
  return out;
}

// Row-wise layer normalization over the last dimension of a 2-D tensor.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
  if (x.rank() != 2)
    throw std::invalid_argument("layer_norm: expected rank-2 input, got " + shape_str(x.shape()));
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  if (gamma.size() != cols || beta.size() != cols)
    throw std::invalid_argument("layer_norm: gain/bias size must match columns");
  Tensor<T> out(x.shape());
  auto mu = std::make_shared<std::vector<T>>(rows);
  auto rstd = std::make_shared<std::vector<T>>(rows);
  const T* xv = x.data();
  const T* gv = gamma.data();
  const T* bv = beta.data();
  T* ov = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv + r * cols;
    T m = T(0);
    for (std::size_t c = 0; c < cols; ++c) m += row[c];
    m /= static_cast<T>(cols);
    T var = T(0);
    for (std::size_t c = 0; c < cols; ++c) {
      const T d = row[c] - m;
      var += d * d;
    }
    var /= static_cast<T>(cols);
    const T rs = T(1) / std::sqrt(var + eps);
    (*mu)[r] = m;
    (*rstd)[r] = rs;
    for (std::size_t c = 0; c < cols; ++c) ov[r * cols + c] = gv[c] * (row[c] - m) * rs + bv[c];
  }
  if (detail::tape_wants<T>({&x, &gamma, &beta})) {
    detail::mark_output(out);
    Tape<T>* tp = active_tape<T>();
    const bool wx = x.node->requires_grad, wg = gamma.node->requires_grad,
               wb = beta.node->requires_grad;
    tp->record([xn = x.node, gn = gamma.node, bn = beta.node, on = out.node, tp, rows, cols, mu,
                rstd, wx, wg, wb] {
      const std::vector<T>* go = tp->find_grad(on.get());
      if (!go) return;
      std::vector<T>* gx = wx ? &tp->grad_buffer(xn) : nullptr;
      std::vector<T>* gg = wg ? &tp->grad_buffer(gn) : nullptr;
      std::vector<T>* gb = wb ? &tp->grad_buffer(bn) : nullptr;
      const T* xv = xn->value.data();
      const T* gv = gn->value.data();
      for (std::size_t r = 0; r < rows; ++r) {
        const T m = (*mu)[r], rs = (*rstd)[r];
        const T* row = xv + r * cols;
        const T* grow = go->data() + r * cols;
        T sum_dxhat = T(0), sum_dxhat_xhat = T(0);
        for (std::size_t c = 0; c < cols; ++c) {
          const T xhat = (row[c] - m) * rs;
          const T dxhat = grow[c] * gv[c];
          sum_dxhat += dxhat;
          sum_dxhat_xhat += dxhat * xhat;
          if (gg) (*gg)[c] += grow[c] * xhat;
          if (gb) (*gb)[c] += grow[c];
        }
        if (gx) {
          const T invn = T(1) / static_cast<T>(cols);
          for (std::size_t c = 0; c < cols; ++c) {
            const T xhat = (row[c] - m) * rs;
            const T dxhat = grow[c] * gv[c];
            (*gx)[r * cols + c] += rs * (dxhat - invn * sum_dxhat - invn * xhat * sum_dxhat_xhat);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// 2-D convolution, stride 1. Input [Cin x H x W], kernel [Cout x Cin x kh x kw].

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, std::size_t dilation,
                 std::size_t padding) {
  if (x.rank() != 3 || w.rank() != 4)
    throw std::invalid_argument("conv2d: expected input rank 3 and kernel rank 4, got " +
                                shape_str(x.shape()) + " and " + shape_str(w.shape()));
  if (x.shape()[0] != w.shape()[1])
    throw std::invalid_argument("conv2d: input channels " + std::to_string(x.shape()[0]) +
                                " do not match kernel " + std::to_string(w.shape()[1]));
  if (dilation == 0) throw std::invalid_argument("conv2d: dilation must be >= 1");
  const std::size_t cin = x.shape()[0], h = x.shape()[1], ww = x.shape()[2];
  const std::size_t cout = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
  const std::ptrdiff_t eh = static_cast<std::ptrdiff_t>(dilation * (kh - 1) + 1);
  const std::ptrdiff_t ew = static_cast<std::ptrdiff_t>(dilation * (kw - 1) + 1);
  const std::ptrdiff_t oh = static_cast<std::ptrdiff_t>(h + 2 * padding) - eh + 1;
  const std::ptrdiff_t ow = static_cast<std::ptrdiff_t>(ww + 2 * padding) - ew + 1;
  if (oh < 1 || ow < 1)
    throw std::invalid_argument("conv2d: kernel extent exceeds padded input");
  const std::size_t ho = static_cast<std::size_t>(oh), wo = static_cast<std::size_t>(ow);
  Tensor<T> out(Shape{cout, ho, wo});
  const T* xv = x.data();
  const T* wv = w.data();
  T* ov = out.data();
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(padding);
  const std::ptrdiff_t dil = static_cast<std::ptrdiff_t>(dilation);
  for (std::size_t co = 0; co < cout; ++co) {
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        T acc = T(0);
        for (std::size_t ci = 0; ci < cin; ++ci) {
          for (std::size_t ky = 0; ky < kh; ++ky) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy) - pad +
                                      static_cast<std::ptrdiff_t>(ky) * dil;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox) - pad +
                                        static_cast<std::ptrdiff_t>(kx) * dil;
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(ww)) continue;
              acc += xv[(ci * h + iy) * ww + ix] * wv[((co * cin + ci) * kh + ky) * kw + kx];
            }
          }
        }
        ov[(co * ho + oy) * wo + ox] = acc;
      }
    }
  }
  if (detail::tape_wants<T>({&x, &w})) {
    detail::mark_output(out);
    Tape<T>* tp = active_tape<T>();
    const bool wxg = x.node->requires_grad, wwg = w.node->requires_grad;
    tp->record([xn = x.node, wn = w.node, on = out.node, tp, cin, h, ww, cout, kh, kw, ho, wo, pad,
                dil, wxg, wwg] {
      const std::vector<T>* go = tp->find_grad(on.get());
      if (!go) return;
      std::vector<T>* gx = wxg ? &tp->grad_buffer(xn) : nullptr;
      std::vector<T>* gw = wwg ? &tp->grad_buffer(wn) : nullptr;
      const T* xv = xn->value.data();
      const T* wv = wn->value.data();
      for (std::size_t co = 0; co < cout; ++co) {
        for (std::size_t oy = 0; oy < ho; ++oy) {
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const T g = (*go)[(co * ho + oy) * wo + ox];
            if (g == T(0)) continue;
            for (std::size_t ci = 0; ci < cin; ++ci) {
              for (std::size_t ky = 0; ky < kh; ++ky) {
                const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy) - pad +
                                          static_cast<std::ptrdiff_t>(ky) * dil;
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                for (std::size_t kx = 0; kx < kw; ++kx) {
                  const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox) - pad +
                                            static_cast<std::ptrdiff_t>(kx) * dil;
                  if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(ww)) continue;
                  const std::size_t xi = (ci * h + iy) * ww + ix;
                  const std::size_t wi = ((co * cin + ci) * kh + ky) * kw + kx;
                  if (gx) (*gx)[xi] += g * wv[wi];
                  if (gw) (*gw)[wi] += g * xv[xi];
                }
              }
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Token-grid layout helpers. Feature grids are stored as [H*W x C] with rows in
// row-major (r, c) order.

namespace detail {

// permutation from output flat index to input flat index
template <typename T>
Tensor<T> permute_by_map(const Tensor<T>& a, Shape oshape,
                         std::shared_ptr<std::vector<std::size_t>> map, const char* name) {
  Tensor<T> out(std::move(oshape));
  if (out.size() != a.size())
    throw std::invalid_argument(std::string(name) + ": element count mismatch");
  const T* av = a.data();
  T* ov = out.data();
  for (std::size_t i = 0; i < out.size(); ++i) ov[i] = av[(*map)[i]];
  if (tape_wants<T>({&a})) {
    mark_output(out);
    Tape<T>* tp = active_tape<T>();
    tp->record([an = a.node, on = out.node, tp, map] {
      const std::vector<T>* go = tp->find_grad(on.get());
      if (!go) return;
      auto& ga = tp->grad_buffer(an);
      for (std::size_t i = 0; i < go->size(); ++i) ga[(*map)[i]] += (*go)[i];
    });
  }
  return out;
}

}  // namespace detail

// [H*W x C] -> [(H/p)*(W/p) x p*p*C]; block-local offsets become channels.
template <typename T>
Tensor<T> space_to_depth(const Tensor<T>& a, std::size_t h, std::size_t w, std::size_t p) {
  if (a.rank() != 2 || a.shape()[0] != h * w)
    throw std::invalid_argument("space_to_depth: grid shape mismatch, " + shape_str(a.shape()) +
                                " for " + std::to_string(h) + "x" + std::to_string(w));
  if (p == 0 || h % p != 0 || w % p != 0)
    throw std::invalid_argument("space_to_depth: grid not divisible by patch " + std::to_string(p));
  const std::size_t c = a.shape()[1];
  const std::size_t hb = h / p, wb = w / p;
  auto map = std::make_shared<std::vector<std::size_t>>(h * w * c);
  std::size_t oi = 0;
  for (std::size_t by = 0; by < hb; ++by)
    for (std::size_t bx = 0; bx < wb; ++bx)
      for (std::size_t py = 0; py < p; ++py)
        for (std::size_t px = 0; px < p; ++px)
          for (std::size_t ch = 0; ch < c; ++ch)
            (*map)[oi++] = ((by * p + py) * w + (bx * p + px)) * c + ch;
  return detail::permute_by_map(a, Shape{hb * wb, p * p * c}, std::move(map), "space_to_depth");
}

// exact inverse of space_to_depth: [hb*wb x p*p*C] -> [(hb*p)*(wb*p) x C]
template <typename T>
Tensor<T> depth_to_space(const Tensor<T>& a, std::size_t hb, std::size_t wb, std::size_t p) {
  if (a.rank() != 2 || a.shape()[0] != hb * wb)
    throw std::invalid_argument("depth_to_space: grid shape mismatch, " + shape_str(a.shape()) +
                                " for " + std::to_string(hb) + "x" + std::to_string(wb));
  if (p == 0 || a.shape()[1] % (p * p) != 0)
    throw std::invalid_argument("depth_to_space: channels not divisible by patch area");
  const std::size_t c = a.shape()[1] / (p * p);
  const std::size_t h = hb * p, w = wb * p;
  auto map = std::make_shared<std::vector<std::size_t>>(h * w * c);
  std::size_t oi = 0;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch)
        (*map)[oi++] = ((y / p) * wb + (x / p)) * (p * p * c) + ((y % p) * p + (x % p)) * c + ch;
  return detail::permute_by_map(a, Shape{h * w, c}, std::move(map), "depth_to_space");
}

// Dilated k x k patch extraction around every grid position, zero padded at the
// borders: [H*W x C] -> [H*W x k*k*C].
template <typename T>
Tensor<T> im2col_dilated(const Tensor<T>& a, std::size_t h, std::size_t w, std::size_t k,
                         std::size_t d) {
  if (a.rank() != 2 || a.shape()[0] != h * w)
    throw std::invalid_argument("im2col_dilated: grid shape mismatch, " + shape_str(a.shape()) +
                                " for " + std::to_string(h) + "x" + std::to_string(w));
  if (k % 2 == 0 || k == 0) throw std::invalid_argument("im2col_dilated: kernel must be odd");
  if (d == 0) throw std::invalid_argument("im2col_dilated: dilation must be >= 1");
  const std::size_t c = a.shape()[1];
  const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(k / 2);
  const std::ptrdiff_t dil = static_cast<std::ptrdiff_t>(d);
  Tensor<T> out(Shape{h * w, k * k * c});
  const T* av = a.data();
  T* ov = out.data();
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t cc = 0; cc < w; ++cc) {
      T* orow = ov + (r * w + cc) * (k * k * c);
      std::size_t j = 0;
      for (std::ptrdiff_t ky = -half; ky <= half; ++ky) {
        for (std::ptrdiff_t kx = -half; kx <= half; ++kx, ++j) {
          const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(r) + ky * dil;
          const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(cc) + kx * dil;
          T* dst = orow + j * c;
          if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h) || sx < 0 ||
              sx >= static_cast<std::ptrdiff_t>(w)) {
            std::fill(dst, dst + c, T(0));
          } else {
            const T* src = av + (static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)) * c;
            std::copy(src, src + c, dst);
          }
        }
      }
    }
  }
  if (detail::tape_wants<T>({&a})) {
    detail::mark_output(out);
    Tape<T>* tp = active_tape<T>();
    tp->record([an = a.node, on = out.node, tp, h, w, c, k, half, dil] {
      const std::vector<T>* go = tp->find_grad(on.get());
      if (!go) return;
      auto& ga = tp->grad_buffer(an);
      for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t cc = 0; cc < w; ++cc) {
          const T* grow = go->data() + (r * w + cc) * (k * k * c);
          std::size_t j = 0;
          for (std::ptrdiff_t ky = -half; ky <= half; ++ky) {
            for (std::ptrdiff_t kx = -half; kx <= half; ++kx, ++j) {
              const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(r) + ky * dil;
              const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(cc) + kx * dil;
              if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h) || sx < 0 ||
                  sx >= static_cast<std::ptrdiff_t>(w))
                continue;
              T* dst = ga.data() +
                       (static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)) * c;
              const T* src = grow + j * c;
              for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += src[ch];
            }
          }
        }
      }
    });
  }
  return out;
}

// Per-row weighted sum of patch entries: beta [R x J], patches [R x J*C] -> [R x C].
template <typename T>
Tensor<T> patch_weighted_sum(const Tensor<T>& beta, const Tensor<T>& patches) {
  if (beta.rank() != 2 || patches.rank() != 2 || beta.shape()[0] != patches.shape()[0])
    throw std::invalid_argument("patch_weighted_sum: row counts differ");
  const std::size_t rows = beta.shape()[0], j = beta.shape()[1];
  if (j == 0 || patches.shape()[1] % j != 0)
    throw std::invalid_argument("patch_weighted_sum: patch width not divisible by weight count");
  const std::size_t c = patches.shape()[1] / j;
  Tensor<T> out(Shape{rows, c});
  const T* bv = beta.data();
  const T* pv = patches.data();
  T* ov = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    T* orow = ov + r * c;
    const T* brow = bv + r * j;
    const T* prow = pv + r * j * c;
    for (std::size_t jj = 0; jj < j; ++jj) {
      const T bw = brow[jj];
      const T* src = prow + jj * c;
      for (std::size_t ch = 0; ch < c; ++ch) orow[ch] += bw * src[ch];
    }
  }
  if (detail::tape_wants<T>({&beta, &patches})) {
    detail::mark_output(out);
    Tape<T>* tp = active_tape<T>();
    const bool wb = beta.node->requires_grad, wp = patches.node->requires_grad;
    tp->record([bn = beta.node, pn = patches.node, on = out.node, tp, rows, j, c, wb, wp] {
      const std::vector<T>* go = tp->find_grad(on.get());
      if (!go) return;
      std::vector<T>* gb = wb ? &tp->grad_buffer(bn) : nullptr;
      std::vector<T>* gp = wp ? &tp->grad_buffer(pn) : nullptr;
      const T* bv = bn->value.data();
      const T* pv = pn->value.data();
      for (std::size_t r = 0; r < rows; ++r) {
        const T* grow = go->data() + r * c;
        for (std::size_t jj = 0; jj < j; ++jj) {
          const T* src = pv + (r * j + jj) * c;
          if (gb) {
            T acc = T(0);
            for (std::size_t ch = 0; ch < c; ++ch) acc += grow[ch] * src[ch];
            (*gb)[r * j + jj] += acc;
          }
          if (gp) {
            const T bw = bv[r * j + jj];
            T* dst = gp->data() + (r * j + jj) * c;
            for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += bw * grow[ch];
          }
        }
      }
    });
  }
  return out;
}

// Mean cross entropy over rows of [N x K] logits against integer labels.
template <typename T>
Tensor<T> cross_entropy_mean(const Tensor<T>& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2)
    throw std::invalid_argument("cross_entropy_mean: expected rank-2 logits, got " +
                                shape_str(logits.shape()));
  const std::size_t n = logits.shape()[0], k = logits.shape()[1];
  if (labels.size() != n)
    throw std::invalid_argument("cross_entropy_mean: " + std::to_string(labels.size()) +
                                " labels for " + std::to_string(n) + " rows");
  for (const int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= k)
      throw std::invalid_argument("cross_entropy_mean: label " + std::to_string(y) +
                                  " out of range [0," + std::to_string(k) + ")");
  auto lse = std::make_shared<std::vector<T>>(n);
  const T* lv = logits.data();
  T total = T(0);
  for (std::size_t r = 0; r < n; ++r) {
    const T* row = lv + r * k;
    T mx = row[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    T sum = T(0);
    for (std::size_t j = 0; j < k; ++j) sum += std::exp(row[j] - mx);
    const T l = mx + std::log(sum);
    (*lse)[r] = l;
    total += l - row[labels[r]];
  }
  Tensor<T> out = Tensor<T>::scalar(total / static_cast<T>(n));
  if (detail::tape_wants<T>({&logits})) {
    detail::mark_output(out);
    Tape<T>* tp = active_tape<T>();
    auto lab = std::make_shared<std::vector<int>>(labels);
    tp->record([ln = logits.node, on = out.node, tp, n, k, lse, lab] {
      const std::vector<T>* go = tp->find_grad(on.get());
      if (!go) return;
      auto& gl = tp->grad_buffer(ln);
      const T g = (*go)[0] / static_cast<T>(n);
      const T* lv = ln->value.data();
      for (std::size_t r = 0; r < n; ++r) {
        const T* row = lv + r * k;
        T* grow = gl.data() + r * k;
        for (std::size_t j = 0; j < k; ++j) {
          const T p = std::exp(row[j] - (*lse)[r]);
          grow[j] += g * (p - (static_cast<std::size_t>((*lab)[r]) == j ? T(1) : T(0)));
        }
      }
    });
  }
  return out;
}

}  // namespace pcm
