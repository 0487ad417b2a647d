#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "seqimpute/autodiff.hpp"
#include "seqimpute/nn.hpp"
#include "seqimpute/rng.hpp"

namespace seqimpute::toy {

// Mixture of diagonal Gaussians with exact density.
struct ToyTarget {
  std::vector<double> weights;
  Tensor means;      // (K, dim)
  Tensor variances;  // (K, dim)

  std::size_t dim() const { return means.cols(); }
  void validate() const;
  Tensor sample(std::size_t n, Rng& rng) const;
  double log_density(std::span<const double> x) const;
  // Probability mass of [lo, hi) (1D only).
  double mass(double lo, double hi) const;

  // 0.5 N(-2, 0.25) + 0.5 N(2, 0.25).
  static ToyTarget bimodal();
  static ToyTarget standard_normal(std::size_t dim = 1);
};

// Fixed reverse kernel q_t(x_{t-1} | x_t) = N(alpha_t x_t, beta_t I) and a
// trainable forward model p_t(x_t | x_{t-1}) = N(x_{t-1} + mu, exp(logvar)),
// where [mu, logvar] = net([x_{t-1}, onehot(t)]). p_0 = N(0, I).
struct ChainSpec {
  std::size_t T = 20;
  std::size_t dim = 1;
  std::vector<double> alpha;  // alpha[t-1] for t = 1..T
  std::vector<double> beta;
  std::unique_ptr<nn::ParameterStore> store;
  nn::MLP net;

  // Constant alpha with beta = 1 - alpha^2; `layers` hidden layers of
  // `hidden` units (0 layers gives a single affine map).
  static ChainSpec ornstein_uhlenbeck(std::size_t T, std::size_t dim, double alpha, std::size_t hidden,
                                      std::size_t layers, nn::Activation act, std::uint64_t seed);
  void validate() const;
  // Forward-step Gaussian for rows of x_prev at step t, as tape vars.
  std::pair<ad::Var, ad::Var> step_params(ad::Tape& tape, ad::Var x_prev, std::size_t t) const;
  // Same, on plain tensors (chunked, no gradient).
  std::pair<Tensor, Tensor> step_params(const Tensor& x_prev, std::size_t t) const;
};

// x[t] holds (n, dim) samples of x_t for t = 0..T.
struct ChainSamples {
  std::vector<Tensor> x;
};

ChainSamples sample_reverse(const ChainSpec& spec, const ToyTarget& target, std::size_t n, Rng& rng);
// Reverse chain started from given x_T rows.
ChainSamples sample_reverse_from(const ChainSpec& spec, const Tensor& x_T, Rng& rng);
// Forward (generative) chain; returns x_T.
Tensor sample_forward(const ChainSpec& spec, std::size_t n, Rng& rng);

// Mean over trajectories of -log p_0(x_0) - sum_t log p_t(x_t | x_{t-1}).
// With include_q, adds sum_t log q_t(x_{t-1} | x_t) (the full KL-form
// objective with the reverse kernel held fixed).
ad::Var chain_objective(ad::Tape& tape, const ChainSpec& spec, const ChainSamples& s, bool include_q = false);

struct ToyTrainConfig {
  std::size_t updates = 3000;
  std::size_t batch = 128;  // trajectories per update
  double learning_rate = 1e-3;
  double clip_norm = 10.0;
  std::uint64_t seed = 1;
};

// Adam on the simplified objective. Throws std::runtime_error when the loss
// exceeds 1e6. Returns the per-update loss.
std::vector<double> train_forward(ChainSpec& spec, const ToyTarget& target, const ToyTrainConfig& cfg);

struct BoundPoint {
  double x = 0.0;
  double bound = 0.0;     // Monte-Carlo trajectory lower bound
  double bound_se = 0.0;
  double log_p = 0.0;     // quadrature log p(x_T)
};

// 1D only. Quadrature over `grid` points spanning [lo, hi].
std::vector<double> quadrature_log_p(const ChainSpec& spec, const std::vector<double>& points, std::size_t grid = 2048,
                                     double lo = -8.0, double hi = 8.0);

// Trajectory bound E_q[log p_0(x_0) + sum log p_t - sum log q_t] per point
// from `samples` reverse trajectories; log p(x_T) by quadrature (1D only).
std::vector<BoundPoint> verify_bound(const ChainSpec& spec, const std::vector<double>& points, std::size_t samples,
                                     Rng& rng, std::size_t grid = 2048);

// Total variation between a 1D sample histogram and the target, over `bins`
// equal bins on [lo, hi] plus the two tails.
double tv_distance(const Tensor& samples, const ToyTarget& target, std::size_t bins = 80, double lo = -5.0,
                   double hi = 5.0);

}  // namespace seqimpute::toy
