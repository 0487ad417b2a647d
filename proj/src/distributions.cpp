#include "seqimpute/distributions.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace seqimpute::dist {

namespace {
const double kLog2Pi = std::log(2.0 * std::numbers::pi);
}

GaussianParams GaussianParams::make(Var mean, Var raw_logvar) {
  if (!mean.value().same_shape(raw_logvar.value())) {
    throw ShapeError("gaussian mean " + mean.value().shape_str() + " vs logvar " + raw_logvar.value().shape_str());
  }
  return {mean, ad::clamp(raw_logvar, kLogvarMin, kLogvarMax)};
}

GaussianParams GaussianParams::split(Var packed) {
  const std::size_t cols = packed.cols();
  if (cols % 2 != 0 || cols == 0) throw ShapeError("gaussian head needs an even column count, got " + packed.value().shape_str());
  return make(ad::slice_cols(packed, 0, cols / 2), ad::slice_cols(packed, cols / 2, cols));
}

GaussianParams GaussianParams::standard(Tape& tape, std::size_t batch, std::size_t dim) {
  return {tape.constant(Tensor(batch, dim)), tape.constant(Tensor(batch, dim))};
}

LatentStep reparam_sample(Tape& tape, const GaussianParams& params, NoiseSource& noise) {
  if (noise.rows() != params.mean.rows()) {
    throw ShapeError("noise has " + std::to_string(noise.rows()) + " rows, params have " +
                     std::to_string(params.mean.rows()));
  }
  Tensor eps = noise.normal(params.dim());
  Var e = tape.constant(eps);
  Var z = params.mean + ad::exp(ad::scale(params.logvar, 0.5)) * e;
  return {z, std::move(eps)};
}

Var gauss_kl(const GaussianParams& q, const GaussianParams& p) {
  if (!q.mean.value().same_shape(p.mean.value())) {
    throw ShapeError("gauss_kl shape mismatch: " + q.mean.value().shape_str() + " vs " + p.mean.value().shape_str());
  }
  // 0.5 * [(exp(lq - lp) - 1 - (lq - lp)) + (mq - mp)^2 exp(-lp)], both parts >= 0.
  Var dm2 = ad::square(q.mean - p.mean);
  Var terms = ad::exp_excess(q.logvar - p.logvar) + dm2 * ad::exp(ad::scale(p.logvar, -1.0));
  return ad::scale(ad::sum_rows(terms), 0.5);
}

Var gauss_logpdf(const GaussianParams& params, Var x) {
  if (!x.value().same_shape(params.mean.value())) {
    throw ShapeError("gauss_logpdf shape mismatch: " + x.value().shape_str() + " vs " +
                     params.mean.value().shape_str());
  }
  Var quad = ad::square(x - params.mean) * ad::exp(ad::scale(params.logvar, -1.0));
  Var terms = ad::shift(params.logvar + quad, kLog2Pi);
  return ad::scale(ad::sum_rows(terms), -0.5);
}

Var bernoulli_nll(Var logits, Var target, Var mask) { return ad::bernoulli_nll(logits, target, mask); }

Tensor bernoulli_nll_probs(const Tensor& probs, const Tensor& target, const Tensor& mask) {
  if (!probs.same_shape(target) || !probs.same_shape(mask)) {
    throw ShapeError("bernoulli_nll_probs shapes " + probs.shape_str() + ", " + target.shape_str() + ", " +
                     mask.shape_str());
  }
  Tensor out(probs.rows(), 1);
  for (std::size_t r = 0; r < probs.rows(); ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < probs.cols(); ++c) {
      if (mask(r, c) == 0.0) continue;
      const double p = std::clamp(probs(r, c), kProbFloor, 1.0 - kProbFloor);
      const double x = target(r, c);
      s -= x * std::log(p) + (1.0 - x) * std::log1p(-p);
    }
    out(r, 0) = s;
  }
  return out;
}

double gauss_kl_scalar(double mean_q, double logvar_q, double mean_p, double logvar_p) {
  const double dm = mean_q - mean_p;
  const double dl = logvar_q - logvar_p;
  return 0.5 * (std::max(0.0, std::expm1(dl) - dl) + dm * dm * std::exp(-logvar_p));
}

double gauss_logpdf_scalar(double x, double mean, double logvar) {
  const double d = x - mean;
  return -0.5 * (kLog2Pi + logvar + d * d * std::exp(-logvar));
}

}  // namespace seqimpute::dist
