#include "seqimpute/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "seqimpute/kernels.hpp"

namespace seqimpute::ad {

namespace {

using kernels::Trans;

enum class Bcast { none, a_row, b_row };

Bcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
  if (a.same_shape(b)) return Bcast::none;
  if (b.rows() == 1 && b.cols() == a.cols()) return Bcast::b_row;
  if (a.rows() == 1 && a.cols() == b.cols()) return Bcast::a_row;
  throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

Tape* tape_of(Var a, Var b) {
  if (a.tape == nullptr || a.tape != b.tape) throw ContractError("vars belong to different tapes");
  return a.tape;
}

Node make_node(OpKind op, std::initializer_list<Var> parents, Tensor value) {
  Node n;
  n.op = op;
  n.value = std::move(value);
  for (Var p : parents) {
    n.parents.push_back(p.id);
    n.requires_grad = n.requires_grad || p.tape->node(p.id).requires_grad;
  }
  return n;
}

template <class F>
Node unary_node(Var x, OpKind op, F f) {
  const Tensor& xv = x.value();
  Tensor out(xv.rows(), xv.cols());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return make_node(op, {x}, std::move(out));
}

template <class F>
Var unary(Var x, OpKind op, F f) {
  return x.tape->push(unary_node(x, op, f));
}

template <class F>
Var binary(Var a, Var b, OpKind op, const char* name, F f) {
  Tape* t = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const Bcast bc = broadcast_kind(av, bv, name);
  const std::size_t rows = bc == Bcast::a_row ? bv.rows() : av.rows();
  const std::size_t cols = av.cols();
  Tensor out(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* ar = av.data() + (bc == Bcast::a_row ? 0 : r * cols);
    const double* br = bv.data() + (bc == Bcast::b_row ? 0 : r * cols);
    double* o = out.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) o[c] = f(ar[c], br[c]);
  }
  return t->push(make_node(op, {a, b}, std::move(out)));
}

// Adds g into dst, summing over rows when dst is a broadcast row.
void accumulate_broadcast(Tensor& dst, const Tensor& g) {
  if (dst.same_shape(g)) {
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    return;
  }
  for (std::size_t r = 0; r < g.rows(); ++r) {
    const double* gr = g.data() + r * g.cols();
    for (std::size_t c = 0; c < g.cols(); ++c) dst[c] += gr[c];
  }
}

}  // namespace

const Tensor& Var::value() const {
  if (tape == nullptr) throw ContractError("value() on unbound Var");
  return tape->value(*this);
}

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

Var Tape::constant(Tensor v) {
  Node n;
  n.value = std::move(v);
  return push(std::move(n));
}

Var Tape::variable(Tensor v) {
  Node n;
  n.value = std::move(v);
  n.requires_grad = true;
  return push(std::move(n));
}

Var Tape::param(const Parameter& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var{this, it->second};
  Node n;
  n.value = p.value;
  n.requires_grad = true;
  n.param = &p;
  Var v = push(std::move(n));
  param_nodes_.emplace(&p, v.id);
  return v;
}

Tensor& Tape::adjoint(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty() && !n.value.empty()) n.grad = Tensor(n.value.rows(), n.value.cols());
  return n.grad;
}

GradientMap Tape::backward(Var root) {
  if (root.tape != this) throw ContractError("backward: root belongs to another tape");
  const Node& r = nodes_.at(root.id);
  if (r.value.rows() != 1 || r.value.cols() != 1) {
    throw ContractError("backward: root must be scalar (1, 1), got " + r.value.shape_str());
  }
  for (auto& n : nodes_) n.grad = Tensor();
  adjoint(root.id)[0] = 1.0;
  for (std::size_t id = root.id + 1; id-- > 0;) {
    if (!nodes_[id].requires_grad || nodes_[id].grad.empty()) continue;
    backprop_node(id);
  }
  GradientMap out;
  for (const auto& [p, id] : param_nodes_) {
    if (id > root.id) continue;
    const Node& n = nodes_[id];
    out.emplace(p, n.grad.empty() ? Tensor(n.value.rows(), n.value.cols()) : n.grad);
  }
  return out;
}

void Tape::backprop_node(std::size_t id) {
  // Parents always precede children, so references into nodes_ stay valid
  // while we only touch adjoints of earlier nodes.
  const Node& n = nodes_[id];
  const Tensor& g = n.grad;
  auto needs = [&](std::size_t k) { return nodes_[n.parents[k]].requires_grad; };
  auto val = [&](std::size_t k) -> const Tensor& { return nodes_[n.parents[k]].value; };

  switch (n.op) {
    case OpKind::leaf:
      return;
    case OpKind::matmul:
    case OpKind::affine: {
      if (needs(0)) kernels::gemm(g, Trans::no, val(1), Trans::yes, adjoint(n.parents[0]), true);
      if (needs(1)) kernels::gemm(val(0), Trans::yes, g, Trans::no, adjoint(n.parents[1]), true);
      if (n.op == OpKind::affine && needs(2)) accumulate_broadcast(adjoint(n.parents[2]), g);
      return;
    }
    case OpKind::add:
    case OpKind::sub: {
      if (needs(0)) accumulate_broadcast(adjoint(n.parents[0]), g);
      if (needs(1)) {
        Tensor& db = adjoint(n.parents[1]);
        if (n.op == OpKind::add) {
          accumulate_broadcast(db, g);
        } else {
          Tensor neg = g;
          for (auto& v : neg.vec()) v = -v;
          accumulate_broadcast(db, neg);
        }
      }
      return;
    }
    case OpKind::mul: {
      const Tensor& av = val(0);
      const Tensor& bv = val(1);
      const std::size_t cols = g.cols();
      for (std::size_t side = 0; side < 2; ++side) {
        if (!needs(side)) continue;
        const Tensor& other = side == 0 ? bv : av;
        Tensor prod(g.rows(), cols);
        for (std::size_t r = 0; r < g.rows(); ++r) {
          const double* o = other.data() + (other.rows() == 1 ? 0 : r * cols);
          for (std::size_t c = 0; c < cols; ++c) prod(r, c) = g(r, c) * o[c];
        }
        accumulate_broadcast(adjoint(n.parents[side]), prod);
      }
      return;
    }
    case OpKind::concat_cols: {
      std::size_t offset = 0;
      for (std::size_t k = 0; k < n.parents.size(); ++k) {
        const Tensor& pv = val(k);
        if (needs(k)) {
          Tensor& dp = adjoint(n.parents[k]);
          for (std::size_t r = 0; r < pv.rows(); ++r)
            for (std::size_t c = 0; c < pv.cols(); ++c) dp(r, c) += g(r, offset + c);
        }
        offset += pv.cols();
      }
      return;
    }
    default:
      break;
  }

  if (!needs(0)) return;
  Tensor& dx = adjoint(n.parents[0]);
  const Tensor& x = val(0);
  const Tensor& y = n.value;
  switch (n.op) {
    case OpKind::scale:
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += n.s0 * g[i];
      break;
    case OpKind::shift:
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
      break;
    case OpKind::tanh:
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * (1.0 - y[i] * y[i]);
      break;
    case OpKind::sigmoid:
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * y[i] * (1.0 - y[i]);
      break;
    case OpKind::exp:
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * y[i];
      break;
    case OpKind::exp_excess:
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * std::expm1(x[i]);
      break;
    case OpKind::log:
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] / x[i];
      break;
    case OpKind::relu:
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += x[i] > 0.0 ? g[i] : 0.0;
      break;
    case OpKind::log_sigmoid:
      // d/dx log sigmoid(x) = sigmoid(-x)
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * kernels::sigmoid(-x[i]);
      break;
    case OpKind::square:
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += 2.0 * g[i] * x[i];
      break;
    case OpKind::clamp:
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += (x[i] >= n.s0 && x[i] <= n.s1) ? g[i] : 0.0;
      break;
    case OpKind::sum:
      for (auto& v : dx.vec()) v += g[0];
      break;
    case OpKind::mean: {
      const double s = g[0] / static_cast<double>(x.size());
      for (auto& v : dx.vec()) v += s;
      break;
    }
    case OpKind::sum_rows:
      for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t c = 0; c < x.cols(); ++c) dx(r, c) += g(r, 0);
      break;
    case OpKind::slice_cols:
      for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t c = n.i0; c < n.i1; ++c) dx(r, c) += g(r, c - n.i0);
      break;
    case OpKind::bernoulli_nll: {
      const Tensor& t = val(1);
      const Tensor* m = n.parents.size() > 2 ? &val(2) : nullptr;
      for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t c = 0; c < x.cols(); ++c) {
          if (m != nullptr && (*m)(r, c) == 0.0) continue;
          dx(r, c) += g(r, 0) * (kernels::sigmoid(x(r, c)) - t(r, c));
        }
      break;
    }
    default:
      break;
  }

}

Var matmul(Var a, Var b) {
  Tape* t = tape_of(a, b);
  Tensor out(a.rows(), b.cols());
  kernels::gemm(a.value(), Trans::no, b.value(), Trans::no, out);
  return t->push(make_node(OpKind::matmul, {a, b}, std::move(out)));
}

Var affine(Var x, Var w, Var b) {
  Tape* t = tape_of(x, w);
  tape_of(x, b);
  const Tensor& bv = b.value();
  if (bv.rows() != 1 || bv.cols() != w.cols()) {
    throw ShapeError("affine: bias " + bv.shape_str() + " does not match weight " + w.value().shape_str());
  }
  Tensor out(x.rows(), w.cols());
  for (std::size_t r = 0; r < out.rows(); ++r) std::copy(bv.data(), bv.data() + bv.cols(), out.row(r).data());
  kernels::gemm(x.value(), Trans::no, w.value(), Trans::no, out, true);
  return t->push(make_node(OpKind::affine, {x, w, b}, std::move(out)));
}

Var add(Var a, Var b) { return binary(a, b, OpKind::add, "add", [](double x, double y) { return x + y; }); }
Var sub(Var a, Var b) { return binary(a, b, OpKind::sub, "sub", [](double x, double y) { return x - y; }); }
Var mul(Var a, Var b) { return binary(a, b, OpKind::mul, "mul", [](double x, double y) { return x * y; }); }
Var operator+(Var a, Var b) { return add(a, b); }
Var operator-(Var a, Var b) { return sub(a, b); }
Var operator*(Var a, Var b) { return mul(a, b); }

Var scale(Var x, double s) {
  Node n = unary_node(x, OpKind::scale, [s](double a) { return s * a; });
  n.s0 = s;
  return x.tape->push(std::move(n));
}

Var shift(Var x, double s) { return unary(x, OpKind::shift, [s](double a) { return a + s; }); }
Var tanh(Var x) { return unary(x, OpKind::tanh, [](double a) { return std::tanh(a); }); }
Var sigmoid(Var x) { return unary(x, OpKind::sigmoid, [](double a) { return kernels::sigmoid(a); }); }
Var exp(Var x) { return unary(x, OpKind::exp, [](double a) { return std::exp(a); }); }
Var exp_excess(Var x) {
  return unary(x, OpKind::exp_excess, [](double a) { return std::max(0.0, std::expm1(a) - a); });
}
Var relu(Var x) { return unary(x, OpKind::relu, [](double a) { return a > 0.0 ? a : 0.0; }); }
Var log_sigmoid(Var x) { return unary(x, OpKind::log_sigmoid, [](double a) { return kernels::log_sigmoid(a); }); }
Var square(Var x) { return unary(x, OpKind::square, [](double a) { return a * a; }); }

Var log(Var x) {
  for (double v : x.value().vec()) {
    if (!(v > 0.0)) throw DomainError("log of non-positive value " + std::to_string(v));
  }
  return unary(x, OpKind::log, [](double a) { return std::log(a); });
}

Var clamp(Var x, double lo, double hi) {
  Node n = unary_node(x, OpKind::clamp, [lo, hi](double a) { return std::clamp(a, lo, hi); });
  n.s0 = lo;
  n.s1 = hi;
  return x.tape->push(std::move(n));
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().vec()) s += v;
  return x.tape->push(make_node(OpKind::sum, {x}, Tensor::scalar(s)));
}

Var mean(Var x) {
  const Tensor& xv = x.value();
  double s = 0.0;
  for (double v : xv.vec()) s += v;
  s = xv.size() ? s / static_cast<double>(xv.size()) : 0.0;
  return x.tape->push(make_node(OpKind::mean, {x}, Tensor::scalar(s)));
}

Var sum_rows(Var x) {
  const Tensor& xv = x.value();
  Tensor out(xv.rows(), 1);
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    double s = 0.0;
    for (double v : xv.row(r)) s += v;
    out(r, 0) = s;
  }
  return x.tape->push(make_node(OpKind::sum_rows, {x}, std::move(out)));
}

Var concat_cols(Var a, Var b) {
  const Var parts[] = {a, b};
  return concat_cols(parts);
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_cols of nothing");
  Tape* t = parts[0].tape;
  std::vector<Tensor> values;
  Node n;
  n.op = OpKind::concat_cols;
  for (Var p : parts) {
    tape_of(parts[0], p);
    values.push_back(p.value());
    n.parents.push_back(p.id);
    n.requires_grad = n.requires_grad || t->node(p.id).requires_grad;
  }
  n.value = hconcat(values);
  return t->push(std::move(n));
}

Var slice_cols(Var x, std::size_t lo, std::size_t hi) {
  const Tensor& xv = x.value();
  if (!(lo < hi && hi <= xv.cols())) {
    throw ShapeError("slice_cols bounds lo=" + std::to_string(lo) + " hi=" + std::to_string(hi) + " invalid for " +
                     xv.shape_str());
  }
  Tensor out(xv.rows(), hi - lo);
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    auto src = xv.row(r);
    std::copy(src.begin() + static_cast<std::ptrdiff_t>(lo), src.begin() + static_cast<std::ptrdiff_t>(hi),
              out.row(r).begin());
  }
  Node n = make_node(OpKind::slice_cols, {x}, std::move(out));
  n.i0 = lo;
  n.i1 = hi;
  return x.tape->push(std::move(n));
}

Var bernoulli_nll(Var logits, Var target, Var mask) {
  const Tensor& c = logits.value();
  const Tensor& t = target.value();
  tape_of(logits, target);
  if (!c.same_shape(t)) throw ShapeError("bernoulli_nll: logits " + c.shape_str() + " vs target " + t.shape_str());
  const Tensor* m = nullptr;
  if (mask.valid()) {
    tape_of(logits, mask);
    m = &mask.value();
    if (!c.same_shape(*m)) throw ShapeError("bernoulli_nll: mask " + m->shape_str() + " vs logits " + c.shape_str());
  }
  for (double v : t.vec()) {
    if (!(v >= 0.0 && v <= 1.0)) throw DomainError("bernoulli_nll: target " + std::to_string(v) + " outside [0, 1]");
  }
  Tensor out(c.rows(), 1);
  for (std::size_t r = 0; r < c.rows(); ++r) {
    double s = 0.0;
    for (std::size_t k = 0; k < c.cols(); ++k) {
      if (m != nullptr && (*m)(r, k) == 0.0) continue;
      const double x = t(r, k);
      const double l = c(r, k);
      // -[x log s(l) + (1 - x) log s(-l)] written without cancellation.
      double term = 0.0;
      if (x != 0.0) term -= x * kernels::log_sigmoid(l);
      if (x != 1.0) term -= (1.0 - x) * kernels::log_sigmoid(-l);
      s += term;
    }
    out(r, 0) = s;
  }
  Node n;
  n.op = OpKind::bernoulli_nll;
  n.value = std::move(out);
  n.parents = {logits.id, target.id};
  if (m != nullptr) n.parents.push_back(mask.id);
  n.requires_grad = logits.tape->node(logits.id).requires_grad;
  return logits.tape->push(std::move(n));
}

}  // namespace seqimpute::ad
