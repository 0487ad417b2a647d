#include <cmath>
#include <numbers>

#include "doctest.h"
#include "helpers.hpp"
#include "seqimpute/toyprocess.hpp"

using namespace seqimpute;

namespace {

toy::ChainSpec linear_chain(double alpha, std::uint64_t seed = 3) {
  return toy::ChainSpec::ornstein_uhlenbeck(1, 1, alpha, 0, 0, nn::Activation::tanh, seed);
}

// Single affine layer over [x, onehot(1)]: mu = a x + b, logvar = d.
void set_linear(toy::ChainSpec& s, double a, double b, double d) {
  auto& l = s.net.layers.at(0);
  l.weight->value = Tensor{{a, 0.0}, {b, d}};
  l.bias->value.fill(0.0);
}

double log_normal(double x, double mean, double var) {
  return -0.5 * (std::log(2.0 * std::numbers::pi * var) + (x - mean) * (x - mean) / var);
}

double sample_mean(const Tensor& t) {
  double s = 0;
  for (double v : t.vec()) s += v;
  return s / static_cast<double>(t.size());
}

double sample_var(const Tensor& t) {
  const double m = sample_mean(t);
  double s = 0;
  for (double v : t.vec()) s += (v - m) * (v - m);
  return s / static_cast<double>(t.size() - 1);
}

}  // namespace

TEST_SUITE("toy") {

TEST_CASE("alpha one and beta zero freezes the reverse trajectory") {
  auto spec = toy::ChainSpec::ornstein_uhlenbeck(7, 1, 1.0, 4, 1, nn::Activation::tanh, 1);
  Rng rng(2);
  auto s = toy::sample_reverse(spec, toy::ToyTarget::bimodal(), 50, rng);
  REQUIRE(s.x.size() == 8);
  for (std::size_t t = 0; t < 7; ++t) CHECK(s.x[t] == s.x[7]);
}

TEST_CASE("long reverse chain reaches the stationary law") {
  auto spec = toy::ChainSpec::ornstein_uhlenbeck(50, 1, 0.9, 4, 1, nn::Activation::tanh, 1);
  Rng rng(4);
  auto s = toy::sample_reverse(spec, toy::ToyTarget::bimodal(), 200000, rng);
  CHECK(std::abs(sample_mean(s.x[0])) < 0.05);
  CHECK(std::abs(sample_var(s.x[0]) - 1.0) < 0.05);
  // x_T keeps the bimodal variance 4.25.
  CHECK(std::abs(sample_var(s.x[50]) - 4.25) < 0.1);
}

TEST_CASE("reverse sampling is deterministic per seed") {
  auto spec = toy::ChainSpec::ornstein_uhlenbeck(5, 1, 0.8, 4, 1, nn::Activation::tanh, 1);
  Rng a(9), b(9), c(10);
  auto sa = toy::sample_reverse(spec, toy::ToyTarget::bimodal(), 10, a);
  auto sb = toy::sample_reverse(spec, toy::ToyTarget::bimodal(), 10, b);
  auto sc = toy::sample_reverse(spec, toy::ToyTarget::bimodal(), 10, c);
  CHECK(sa.x[0] == sb.x[0]);
  CHECK_FALSE(sa.x[0] == sc.x[0]);
}

TEST_CASE("quadrature density of a linear chain matches the closed form") {
  auto spec = linear_chain(0.6);
  set_linear(spec, -0.5, 0.3, std::log(0.5));
  const std::vector<double> pts{-2.0, -0.4, 0.0, 1.1, 3.0};
  auto lp = toy::quadrature_log_p(spec, pts);
  for (std::size_t i = 0; i < pts.size(); ++i) CHECK(std::abs(lp[i] - log_normal(pts[i], 0.3, 0.25 + 0.5)) < 1e-6);
}

TEST_CASE("quadrature density of a deep random chain integrates to one") {
  auto spec = toy::ChainSpec::ornstein_uhlenbeck(4, 1, 0.9, 8, 2, nn::Activation::tanh, 12);
  std::vector<double> pts;
  const double h = 0.02;
  for (double y = -20.0; y < 20.0; y += h) pts.push_back(y + 0.5 * h);
  auto lp = toy::quadrature_log_p(spec, pts, 4096, -20.0, 20.0);
  double mass = 0.0;
  for (double v : lp) mass += std::exp(v) * h;
  CHECK(std::abs(mass - 1.0) < 1e-3);
}

TEST_CASE("one-step linear gap equals the closed-form posterior KL") {
  const double alpha = 0.8, beta = 1.0 - alpha * alpha;
  const double a = -0.5, b = 0.3, d = std::log(0.5);
  auto spec = linear_chain(alpha);
  set_linear(spec, a, b, d);
  const double k = 1.0 + a, s2 = std::exp(d);
  const std::vector<double> pts{-1.5, 0.0, 0.7, 2.0};
  Rng rng(5);
  auto res = toy::verify_bound(spec, pts, 1000000, rng);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const double y = pts[i];
    const double v = 1.0 / (1.0 + k * k / s2);
    const double m = v * k * (y - b) / s2;
    const double kl = 0.5 * (std::log(v / beta) + (beta + (alpha * y - m) * (alpha * y - m)) / v - 1.0);
    CAPTURE(y);
    CAPTURE(res[i].bound_se);
    CHECK(std::abs(res[i].log_p - log_normal(y, b, k * k + s2)) < 1e-6);
    CHECK(std::abs((res[i].log_p - res[i].bound) - kl) < 1e-3);
  }
}

TEST_CASE("exactly matched forward model closes the gap") {
  const double alpha = 0.7;
  auto spec = linear_chain(alpha);
  set_linear(spec, alpha - 1.0, 0.0, std::log(1.0 - alpha * alpha));
  Rng rng(6);
  auto res = toy::verify_bound(spec, {-2.5, -0.3, 0.0, 1.9}, 1000, rng);
  for (const auto& r : res) {
    CHECK(r.bound_se < 1e-9);
    CHECK(std::abs(r.log_p - r.bound) < 1e-4);
  }
}

TEST_CASE("untrained random chain bound stays below log p") {
  auto spec = toy::ChainSpec::ornstein_uhlenbeck(5, 1, 0.9, 16, 1, nn::Activation::tanh, 21);
  Rng pick(7);
  std::vector<double> pts;
  for (int i = 0; i < 200; ++i) pts.push_back(-4.0 + 8.0 * pick.uniform());
  Rng rng(8);
  auto res = toy::verify_bound(spec, pts, 500, rng, 1024);
  std::size_t below = 0;
  for (const auto& r : res) below += r.bound < r.log_p ? 1 : 0;
  CHECK(static_cast<double>(below) >= 0.99 * static_cast<double>(pts.size()));
}

TEST_CASE("full objective with a fixed reverse kernel has the simplified gradient") {
  auto spec = toy::ChainSpec::ornstein_uhlenbeck(4, 1, 0.85, 6, 1, nn::Activation::tanh, 13);
  Rng rng(3);
  auto s = toy::sample_reverse(spec, toy::ToyTarget::bimodal(), 64, rng);
  ad::Tape t1, t2;
  ad::Var simple = toy::chain_objective(t1, spec, s, false);
  ad::Var full = toy::chain_objective(t2, spec, s, true);
  double log_q = 0.0;
  for (std::size_t t = 1; t <= 4; ++t)
    for (std::size_t r = 0; r < 64; ++r) log_q += log_normal(s.x[t - 1][r], 0.85 * s.x[t][r], 1.0 - 0.85 * 0.85);
  CHECK(full.value().item() - simple.value().item() == doctest::Approx(log_q / 64.0).epsilon(1e-12));
  auto g1 = t1.backward(simple);
  auto g2 = t2.backward(full);
  REQUIRE(g1.size() == g2.size());
  for (const auto& [p, g] : g1) {
    const Tensor& h = g2.at(p);
    for (std::size_t i = 0; i < g.size(); ++i) CHECK(std::abs(g[i] - h[i]) <= 1e-12);
  }
}

TEST_CASE("chain objective gradients match finite differences") {
  auto spec = toy::ChainSpec::ornstein_uhlenbeck(3, 1, 0.8, 5, 1, nn::Activation::tanh, 17);
  Rng rng(1);
  auto s = toy::sample_reverse(spec, toy::ToyTarget::bimodal(), 16, rng);
  auto res = testutil::fd_check_params(*spec.store, [&](ad::Tape& t) { return toy::chain_objective(t, spec, s); });
  CAPTURE(res.worst_name);
  CHECK(res.worst < 1e-5);
}

TEST_CASE("zero updates leave the chain unchanged") {
  auto spec = toy::ChainSpec::ornstein_uhlenbeck(3, 1, 0.8, 5, 1, nn::Activation::tanh, 17);
  const auto before = spec.store->hash();
  toy::ToyTrainConfig cfg;
  cfg.updates = 0;
  CHECK(toy::train_forward(spec, toy::ToyTarget::bimodal(), cfg).empty());
  CHECK(spec.store->hash() == before);
}

TEST_CASE("one-step chain learns a standard normal target") {
  const double alpha = 0.5;
  auto spec = linear_chain(alpha, 4);
  toy::ToyTrainConfig cfg;
  cfg.updates = 3000;
  cfg.batch = 256;
  cfg.learning_rate = 0.01;
  cfg.seed = 2;
  auto losses = toy::train_forward(spec, toy::ToyTarget::standard_normal(), cfg);
  // Best achievable simplified loss: H[N(0,1)] + H[N(alpha x, 1 - alpha^2)].
  const double h = 0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e);
  const double best = 2.0 * h + 0.5 * std::log(1.0 - alpha * alpha);
  double tail = 0.0;
  for (std::size_t i = losses.size() - 500; i < losses.size(); ++i) tail += losses[i];
  CHECK(std::abs(tail / 500.0 - best) < 0.05);

  Rng rng(11);
  Tensor x = toy::ToyTarget::standard_normal().sample(4000, rng);
  auto lp = toy::quadrature_log_p(spec, x.vec());
  double nll = 0.0;
  for (double v : lp) nll -= v;
  nll /= 4000.0;
  double ref = 0.0;
  for (double v : x.vec()) ref -= log_normal(v, 0.0, 1.0);
  ref /= 4000.0;
  CHECK(std::abs(nll - ref) < 0.05);
}

TEST_CASE("training lowers the loss on the bimodal target") {
  auto spec = toy::ChainSpec::ornstein_uhlenbeck(5, 1, 0.9, 16, 1, nn::Activation::tanh, 3);
  toy::ToyTrainConfig cfg;
  cfg.updates = 300;
  cfg.batch = 64;
  cfg.learning_rate = 5e-3;
  auto l = toy::train_forward(spec, toy::ToyTarget::bimodal(), cfg);
  double head = 0.0, tail = 0.0;
  for (std::size_t i = 0; i < 50; ++i) {
    head += l[i];
    tail += l[l.size() - 1 - i];
  }
  CHECK(tail < head);
}

TEST_CASE("total variation") {
  const auto target = toy::ToyTarget::bimodal();
  Rng rng(1);
  CHECK(toy::tv_distance(target.sample(200000, rng), target) < 0.02);
  CHECK(toy::tv_distance(Tensor(100, 1, 0.0), target) > 0.9);
  CHECK(toy::tv_distance(Tensor(10, 1, 99.0), target) == doctest::Approx(1.0));
  CHECK(target.mass(-INFINITY, INFINITY) == doctest::Approx(1.0));
  CHECK_THROWS(toy::tv_distance(Tensor(10, 2), target));
}

TEST_CASE("toy errors") {
  CHECK_THROWS(toy::ChainSpec::ornstein_uhlenbeck(3, 1, 1.5, 4, 1, nn::Activation::tanh, 1));
  CHECK_THROWS(toy::ChainSpec::ornstein_uhlenbeck(0, 1, 0.5, 4, 1, nn::Activation::tanh, 1));
  auto two = toy::ChainSpec::ornstein_uhlenbeck(2, 2, 0.5, 4, 1, nn::Activation::tanh, 1);
  CHECK_THROWS(toy::quadrature_log_p(two, {0.0}));
  Rng rng(1);
  CHECK_THROWS(toy::verify_bound(two, {0.0}, 10, rng));
  CHECK_THROWS(toy::sample_reverse(two, toy::ToyTarget::bimodal(), 4, rng));
  toy::ToyTarget bad{{0.3, 0.3}, Tensor{{0.0}, {1.0}}, Tensor{{1.0}, {1.0}}};
  CHECK_THROWS(bad.validate());
}

}  // TEST_SUITE
