#include "seqimpute/toyprocess.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "seqimpute/distributions.hpp"
#include "seqimpute/training.hpp"

namespace seqimpute::toy {

using ad::Var;

namespace {

constexpr std::size_t kChunkRows = std::size_t{1} << 16;

double normal_cdf(double x, double mean, double var) {
  return 0.5 * std::erfc(-(x - mean) / std::sqrt(2.0 * var));
}

double log_normal(double x, double mean, double logvar) { return dist::gauss_logpdf_scalar(x, mean, logvar); }

// Rows of `x` followed by the one-hot encoding of t in T columns.
Tensor with_time(const Tensor& x, std::size_t t, std::size_t T) {
  Tensor out(x.rows(), x.cols() + T);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < x.cols(); ++c) out(r, c) = x(r, c);
    out(r, x.cols() + t - 1) = 1.0;
  }
  return out;
}

}  // namespace

void ToyTarget::validate() const {
  if (weights.empty() || weights.size() != means.rows() || !means.same_shape(variances)) {
    throw std::invalid_argument("toy target: weights, means and variances disagree in size");
  }
  double s = 0.0;
  for (double w : weights) {
    if (!(w > 0.0)) throw std::invalid_argument("toy target weights must be positive");
    s += w;
  }
  if (std::abs(s - 1.0) > 1e-9) throw std::invalid_argument("toy target weights must sum to 1");
  for (double v : variances.vec())
    if (!(v > 0.0)) throw std::invalid_argument("toy target variances must be positive");
}

Tensor ToyTarget::sample(std::size_t n, Rng& rng) const {
  Tensor out(n, dim());
  for (std::size_t r = 0; r < n; ++r) {
    double u = rng.uniform();
    std::size_t k = 0;
    while (k + 1 < weights.size() && u >= weights[k]) u -= weights[k++];
    for (std::size_t c = 0; c < dim(); ++c) out(r, c) = means(k, c) + std::sqrt(variances(k, c)) * rng.normal();
  }
  return out;
}

double ToyTarget::log_density(std::span<const double> x) const {
  std::vector<double> terms;
  for (std::size_t k = 0; k < weights.size(); ++k) {
    double l = std::log(weights[k]);
    for (std::size_t c = 0; c < dim(); ++c) l += log_normal(x[c], means(k, c), std::log(variances(k, c)));
    terms.push_back(l);
  }
  const double m = *std::max_element(terms.begin(), terms.end());
  double s = 0.0;
  for (double t : terms) s += std::exp(t - m);
  return m + std::log(s);
}

double ToyTarget::mass(double lo, double hi) const {
  if (dim() != 1) throw std::invalid_argument("mass() is 1D only");
  double m = 0.0;
  for (std::size_t k = 0; k < weights.size(); ++k) {
    m += weights[k] * (normal_cdf(hi, means(k, 0), variances(k, 0)) - normal_cdf(lo, means(k, 0), variances(k, 0)));
  }
  return m;
}

ToyTarget ToyTarget::bimodal() { return {{0.5, 0.5}, Tensor{{-2.0}, {2.0}}, Tensor{{0.25}, {0.25}}}; }

ToyTarget ToyTarget::standard_normal(std::size_t dim) { return {{1.0}, Tensor(1, dim, 0.0), Tensor(1, dim, 1.0)}; }

ChainSpec ChainSpec::ornstein_uhlenbeck(std::size_t T, std::size_t dim, double alpha, std::size_t hidden,
                                        std::size_t layers, nn::Activation act, std::uint64_t seed) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("alpha must lie in [0, 1]");
  ChainSpec s;
  s.T = T;
  s.dim = dim;
  s.alpha.assign(T, alpha);
  s.beta.assign(T, 1.0 - alpha * alpha);
  s.store = std::make_unique<nn::ParameterStore>(seed);
  std::vector<std::size_t> dims{dim + T};
  for (std::size_t i = 0; i < layers; ++i) dims.push_back(hidden);
  dims.push_back(2 * dim);
  s.net = nn::make_mlp(*s.store, "toy.net", dims, act, nn::Activation::identity, ad::Role::primary);
  s.validate();
  return s;
}

void ChainSpec::validate() const {
  if (T == 0 || dim == 0) throw std::invalid_argument("chain needs T >= 1 and dim >= 1");
  if (alpha.size() != T || beta.size() != T) throw std::invalid_argument("chain needs T alpha and beta values");
  for (std::size_t t = 0; t < T; ++t) {
    if (alpha[t] < 0.0 || beta[t] < 0.0) throw std::invalid_argument("alpha and beta must be non-negative");
  }
  if (!store || net.layers.empty() || net.in_dim() != dim + T || net.out_dim() != 2 * dim) {
    throw std::invalid_argument("chain forward network has the wrong shape");
  }
}

std::pair<ad::Var, ad::Var> ChainSpec::step_params(ad::Tape& tape, ad::Var x_prev, std::size_t t) const {
  Var onehot_in = tape.constant(with_time(x_prev.value(), t, T));
  Var out = net.apply(tape, onehot_in);
  Var mean = x_prev + ad::slice_cols(out, 0, dim);
  Var logvar = ad::clamp(ad::slice_cols(out, dim, 2 * dim), dist::kLogvarMin, dist::kLogvarMax);
  return {mean, logvar};
}

std::pair<Tensor, Tensor> ChainSpec::step_params(const Tensor& x_prev, std::size_t t) const {
  Tensor mean(x_prev.rows(), dim);
  Tensor logvar(x_prev.rows(), dim);
  for (std::size_t lo = 0; lo < x_prev.rows(); lo += kChunkRows) {
    const std::size_t hi = std::min(x_prev.rows(), lo + kChunkRows);
    ad::Tape tape;
    auto [m, lv] = step_params(tape, tape.constant(x_prev.rows_slice(lo, hi)), t);
    std::copy(m.value().vec().begin(), m.value().vec().end(), mean.vec().begin() + static_cast<std::ptrdiff_t>(lo * dim));
    std::copy(lv.value().vec().begin(), lv.value().vec().end(),
              logvar.vec().begin() + static_cast<std::ptrdiff_t>(lo * dim));
  }
  return {std::move(mean), std::move(logvar)};
}

ChainSamples sample_reverse_from(const ChainSpec& spec, const Tensor& x_T, Rng& rng) {
  if (x_T.cols() != spec.dim) throw ShapeError("x_T " + x_T.shape_str() + " does not match chain dim");
  ChainSamples s;
  s.x.assign(spec.T + 1, Tensor());
  s.x[spec.T] = x_T;
  for (std::size_t t = spec.T; t >= 1; --t) {
    const Tensor& cur = s.x[t];
    Tensor prev(cur.rows(), cur.cols());
    const double a = spec.alpha[t - 1];
    const double sd = std::sqrt(spec.beta[t - 1]);
    for (std::size_t i = 0; i < cur.size(); ++i) prev[i] = a * cur[i] + sd * rng.normal();
    s.x[t - 1] = std::move(prev);
  }
  return s;
}

ChainSamples sample_reverse(const ChainSpec& spec, const ToyTarget& target, std::size_t n, Rng& rng) {
  if (n == 0) throw std::invalid_argument("sample_reverse needs n >= 1");
  if (target.dim() != spec.dim) throw std::invalid_argument("target dim does not match chain dim");
  return sample_reverse_from(spec, target.sample(n, rng), rng);
}

Tensor sample_forward(const ChainSpec& spec, std::size_t n, Rng& rng) {
  Tensor x(n, spec.dim);
  for (auto& v : x.vec()) v = rng.normal();
  for (std::size_t t = 1; t <= spec.T; ++t) {
    auto [mean, logvar] = spec.step_params(x, t);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = mean[i] + std::exp(0.5 * logvar[i]) * rng.normal();
  }
  return x;
}

ad::Var chain_objective(ad::Tape& tape, const ChainSpec& spec, const ChainSamples& s, bool include_q) {
  const std::size_t n = s.x.front().rows();
  const std::size_t d = spec.dim;
  // All T transitions stacked into one batch.
  Tensor prev(n * spec.T, d);
  Tensor next(n * spec.T, d);
  Tensor prev_t(n * spec.T, d + spec.T);
  for (std::size_t t = 1; t <= spec.T; ++t) {
    for (std::size_t r = 0; r < n; ++r) {
      const std::size_t row = (t - 1) * n + r;
      for (std::size_t c = 0; c < d; ++c) {
        prev(row, c) = s.x[t - 1](r, c);
        next(row, c) = s.x[t](r, c);
        prev_t(row, c) = s.x[t - 1](r, c);
      }
      prev_t(row, d + t - 1) = 1.0;
    }
  }
  Var out = spec.net.apply(tape, tape.constant(prev_t));
  dist::GaussianParams p{tape.constant(prev) + ad::slice_cols(out, 0, d),
                         ad::clamp(ad::slice_cols(out, d, 2 * d), dist::kLogvarMin, dist::kLogvarMax)};
  Var log_pt = ad::sum(dist::gauss_logpdf(p, tape.constant(next)));
  Var log_p0 = ad::sum(dist::gauss_logpdf(dist::GaussianParams::standard(tape, n, d), tape.constant(s.x[0])));
  Var total = ad::scale(log_pt + log_p0, -1.0 / static_cast<double>(n));
  if (!include_q) return total;
  double log_q = 0.0;
  for (std::size_t t = 1; t <= spec.T; ++t) {
    const double lv = std::log(spec.beta[t - 1]);
    for (std::size_t i = 0; i < s.x[t].size(); ++i) {
      log_q += log_normal(s.x[t - 1][i], spec.alpha[t - 1] * s.x[t][i], lv);
    }
  }
  return ad::shift(total, log_q / static_cast<double>(n));
}

std::vector<double> train_forward(ChainSpec& spec, const ToyTarget& target, const ToyTrainConfig& cfg) {
  spec.validate();
  training::AdamState state;
  std::vector<double> losses;
  losses.reserve(cfg.updates);
  for (std::size_t u = 1; u <= cfg.updates; ++u) {
    Rng rng(stream_seed(cfg.seed, u));
    const ChainSamples s = sample_reverse(spec, target, cfg.batch, rng);
    ad::Tape tape;
    Var loss = chain_objective(tape, spec, s);
    const double l = loss.value().item();
    if (!(l <= 1e6)) {
      throw std::runtime_error("toy chain training diverged at update " + std::to_string(u) + ": loss " +
                               std::to_string(l));
    }
    auto grads = tape.backward(loss);
    training::clip_global_norm(*spec.store, grads, cfg.clip_norm);
    training::adam_step(*spec.store, grads, state, cfg.learning_rate);
    losses.push_back(l);
  }
  return losses;
}

std::vector<double> quadrature_log_p(const ChainSpec& spec, const std::vector<double>& points, std::size_t grid,
                                     double lo, double hi) {
  if (spec.dim != 1) throw std::invalid_argument("quadrature is 1D only");
  if (grid < 2) throw std::invalid_argument("quadrature grid needs at least 2 points");
  const double h = (hi - lo) / static_cast<double>(grid);
  Tensor g(grid, 1);
  for (std::size_t i = 0; i < grid; ++i) g[i] = lo + (static_cast<double>(i) + 0.5) * h;
  std::vector<double> dens(grid);
  for (std::size_t i = 0; i < grid; ++i) dens[i] = std::exp(log_normal(g[i], 0.0, 0.0));

  auto transition_to = [&](const Tensor& mean, const Tensor& logvar, double y) {
    double s = 0.0;
    for (std::size_t i = 0; i < grid; ++i) {
      if (dens[i] == 0.0) continue;
      s += dens[i] * std::exp(log_normal(y, mean[i], logvar[i]));
    }
    return s * h;
  };

  for (std::size_t t = 1; t < spec.T; ++t) {
    auto [mean, logvar] = spec.step_params(g, t);
    std::vector<double> next(grid);
    const auto G = static_cast<std::ptrdiff_t>(grid);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t j = 0; j < G; ++j) next[static_cast<std::size_t>(j)] = transition_to(mean, logvar, g[static_cast<std::size_t>(j)]);
    dens = std::move(next);
  }
  auto [mean, logvar] = spec.step_params(g, spec.T);
  std::vector<double> out;
  out.reserve(points.size());
  for (double y : points) out.push_back(std::log(transition_to(mean, logvar, y)));
  return out;
}

std::vector<BoundPoint> verify_bound(const ChainSpec& spec, const std::vector<double>& points, std::size_t samples,
                                     Rng& rng, std::size_t grid) {
  if (spec.dim != 1) throw std::invalid_argument("verify_bound grid mode needs dim = 1");
  if (samples < 2) throw std::invalid_argument("verify_bound needs at least 2 samples per point");
  const auto log_p = quadrature_log_p(spec, points, grid);
  std::vector<BoundPoint> out;
  const std::size_t chunk = std::max<std::size_t>(1, kChunkRows);
  for (std::size_t k = 0; k < points.size(); ++k) {
    double sum = 0.0;
    double sumsq = 0.0;
    double shift = 0.0;
    bool have_shift = false;
    for (std::size_t done = 0; done < samples; done += chunk) {
      const std::size_t n = std::min(chunk, samples - done);
      const ChainSamples s = sample_reverse_from(spec, Tensor(n, 1, points[k]), rng);
      std::vector<double> w(n);
      for (std::size_t r = 0; r < n; ++r) w[r] = log_normal(s.x[0][r], 0.0, 0.0);
      for (std::size_t t = 1; t <= spec.T; ++t) {
        auto [mean, logvar] = spec.step_params(s.x[t - 1], t);
        const double qlv = std::log(spec.beta[t - 1]);
        for (std::size_t r = 0; r < n; ++r) {
          w[r] += log_normal(s.x[t][r], mean[r], logvar[r]);
          w[r] -= log_normal(s.x[t - 1][r], spec.alpha[t - 1] * s.x[t][r], qlv);
        }
      }
      if (!have_shift) {
        shift = w[0];
        have_shift = true;
      }
      for (double v : w) {
        sum += v - shift;
        sumsq += (v - shift) * (v - shift);
      }
    }
    const double nn_ = static_cast<double>(samples);
    const double mean = sum / nn_;
    const double var = std::max(0.0, (sumsq - nn_ * mean * mean) / (nn_ - 1.0));
    out.push_back({points[k], shift + mean, std::sqrt(var / nn_), log_p[k]});
  }
  return out;
}

double tv_distance(const Tensor& samples, const ToyTarget& target, std::size_t bins, double lo, double hi) {
  if (samples.cols() != 1 || target.dim() != 1) throw std::invalid_argument("tv_distance is 1D only");
  if (samples.rows() == 0 || bins == 0 || !(hi > lo)) throw std::invalid_argument("tv_distance: bad arguments");
  const double w = (hi - lo) / static_cast<double>(bins);
  std::vector<double> counts(bins + 2, 0.0);
  for (double v : samples.vec()) {
    std::size_t b = 0;
    if (v < lo) {
      b = 0;
    } else if (v >= hi) {
      b = bins + 1;
    } else {
      b = 1 + std::min(bins - 1, static_cast<std::size_t>((v - lo) / w));
    }
    counts[b] += 1.0;
  }
  const double n = static_cast<double>(samples.rows());
  const double inf = std::numeric_limits<double>::infinity();
  double tv = 0.0;
  for (std::size_t b = 0; b < bins + 2; ++b) {
    double a = 0.0, c = 0.0;
    if (b == 0) {
      a = -inf;
      c = lo;
    } else if (b == bins + 1) {
      a = hi;
      c = inf;
    } else {
      a = lo + static_cast<double>(b - 1) * w;
      c = a + w;
    }
    tv += std::abs(counts[b] / n - target.mass(a, c));
  }
  return 0.5 * tv;
}

}  // namespace seqimpute::toy
