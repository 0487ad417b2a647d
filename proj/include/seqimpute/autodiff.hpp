#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "seqimpute/tensor.hpp"

// Define-by-run reverse-mode automatic differentiation over 2D tensors.
//
// A Tape records every operation applied to its Vars. Tapes are rebuilt per
// minibatch and are single-threaded; data-parallel callers use one tape per
// shard and sum the resulting GradientMaps in a fixed order.
namespace seqimpute::ad {

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Which policy a trainable tensor belongs to. Guide parameters are the only
// ones touched by guide fine-tuning; everything else is primary or shared.
enum class Role { primary, guide };

struct Parameter {
  std::string name;
  Tensor value;
  Role role = Role::primary;
};

using GradientMap = std::unordered_map<const Parameter*, Tensor>;

enum class OpKind {
  leaf,
  matmul,
  affine,
  add,
  sub,
  mul,
  scale,
  shift,
  tanh,
  sigmoid,
  exp,
  exp_excess,
  log,
  relu,
  log_sigmoid,
  square,
  clamp,
  sum,
  mean,
  sum_rows,
  concat_cols,
  slice_cols,
  bernoulli_nll,
};

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool valid() const { return tape != nullptr; }
};

struct Node {
  OpKind op = OpKind::leaf;
  std::vector<std::size_t> parents;
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  double s0 = 0.0, s1 = 0.0;
  std::size_t i0 = 0, i1 = 0;
  const Parameter* param = nullptr;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor v);
  // Differentiable leaf that is not a parameter (used by tests and oracles).
  Var variable(Tensor v);
  // Leaf bound to a parameter; repeated calls reuse the same node so shared
  // parameters accumulate their adjoints.
  Var param(const Parameter& p);

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  // Adjoint of a node after backward(); empty if the node needs no gradient.
  const Tensor& grad(Var v) const { return nodes_.at(v.id).grad; }

  // Zeroes all adjoints, seeds d(root)/d(root) = 1 and propagates. Returns
  // the gradient for every parameter reachable from root.
  GradientMap backward(Var root);

  std::size_t size() const { return nodes_.size(); }

  Var push(Node node);
  const Node& node(std::size_t id) const { return nodes_[id]; }

 private:
  void backprop_node(std::size_t id);
  Tensor& adjoint(std::size_t id);

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> param_nodes_;
};

// Linear algebra.
Var matmul(Var a, Var b);
// x * w + b with b of shape (1, out) broadcast over rows.
Var affine(Var x, Var w, Var b);

// Binary elementwise ops. Shapes must match, or one side may be a (1, cols)
// row that is broadcast over the other's rows.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator*(Var a, Var b);

Var scale(Var x, double s);
Var shift(Var x, double s);
Var tanh(Var x);
Var sigmoid(Var x);
Var exp(Var x);
// exp(x) - 1 - x through expm1; never negative, unlike the composed form.
Var exp_excess(Var x);
Var log(Var x);
Var relu(Var x);
Var log_sigmoid(Var x);
Var square(Var x);
// Clamps into [lo, hi]; the gradient is zero where the clamp is active.
Var clamp(Var x, double lo, double hi);

// Reductions: sum and mean give (1, 1); sum_rows gives (rows, 1).
Var sum(Var x);
Var mean(Var x);
Var sum_rows(Var x);

Var concat_cols(Var a, Var b);
Var concat_cols(std::span<const Var> parts);
// Columns [lo, hi).
Var slice_cols(Var x, std::size_t lo, std::size_t hi);

// Per-row Bernoulli negative log-likelihood of targets under sigmoid(logits),
// summed over columns where mask is 1. mask may be an invalid Var (all
// columns included). Targets and mask are treated as constants.
Var bernoulli_nll(Var logits, Var target, Var mask);

}  // namespace seqimpute::ad
