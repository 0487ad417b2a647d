#pragma once

#include "seqimpute/autodiff.hpp"
#include "seqimpute/rng.hpp"

namespace seqimpute::dist {

using ad::Tape;
using ad::Var;

inline constexpr double kLogvarMin = -8.0;
inline constexpr double kLogvarMax = 8.0;
// Probability clamp used when scoring explicit pixel probabilities.
inline constexpr double kProbFloor = 1e-7;

// Diagonal Gaussian over the columns of a (batch, d) tensor.
struct GaussianParams {
  Var mean;
  Var logvar;

  // Clamps logvar into [kLogvarMin, kLogvarMax].
  static GaussianParams make(Var mean, Var raw_logvar);
  // First half of the columns are means, second half raw log-variances.
  static GaussianParams split(Var packed);
  // N(0, I) with the given shape, as tape constants.
  static GaussianParams standard(Tape& tape, std::size_t batch, std::size_t dim);

  std::size_t dim() const { return mean.cols(); }
};

// One reparameterized draw; z = mean + exp(logvar / 2) * eps.
struct LatentStep {
  Var z;
  Tensor eps;
};

// Gradients flow to mean and logvar; eps is a constant.
LatentStep reparam_sample(Tape& tape, const GaussianParams& params, NoiseSource& noise);

// Per-row KL(q || p) summed over dims, (batch, 1).
Var gauss_kl(const GaussianParams& q, const GaussianParams& p);

// Per-row log N(x; mean, exp(logvar)) summed over dims, (batch, 1).
Var gauss_logpdf(const GaussianParams& params, Var x);

// Per-row Bernoulli NLL in nats over columns with mask == 1 (all columns if
// mask is unbound). Computed through a stable log-sigmoid.
Var bernoulli_nll(Var logits, Var target, Var mask = Var{});

// Tensor-level scoring of explicit probabilities: per-row
// -sum mask * [x log p + (1 - x) log(1 - p)] with p clamped to
// [kProbFloor, 1 - kProbFloor]. Returns (batch, 1).
Tensor bernoulli_nll_probs(const Tensor& probs, const Tensor& target, const Tensor& mask);

// Closed forms on plain numbers, used by oracles and reports.
double gauss_kl_scalar(double mean_q, double logvar_q, double mean_p, double logvar_p);
double gauss_logpdf_scalar(double x, double mean, double logvar);

}  // namespace seqimpute::dist
