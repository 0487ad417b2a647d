#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "seqimpute/autodiff.hpp"
#include "seqimpute/nn.hpp"
#include "seqimpute/tensor.hpp"

namespace testutil {

using seqimpute::Tensor;
namespace ad = seqimpute::ad;

inline Tensor random_tensor(std::size_t r, std::size_t c, std::uint64_t seed, double lo = -2.0, double hi = 2.0) {
  std::mt19937_64 eng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(r, c);
  for (auto& v : t.vec()) v = u(eng);
  return t;
}

// |a - b| / max(|a|, |b|, floor). The floor keeps near-zero entries, where
// both values are dominated by rounding, from producing huge ratios.
inline double rel_err(double a, double b, double floor = 1e-3) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// Largest relative error between reverse-mode gradients of `f` with respect
// to each input and central finite differences with step eps.
inline double fd_check_inputs(const std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>& f,
                              std::vector<Tensor> inputs, double eps = 1e-5, double floor = 1e-3) {
  std::vector<Tensor> analytic;
  {
    ad::Tape tape;
    std::vector<ad::Var> vars;
    for (const auto& t : inputs) vars.push_back(tape.variable(t));
    ad::Var root = f(tape, vars);
    tape.backward(root);
    for (const auto& v : vars) analytic.push_back(tape.grad(v));
  }
  auto eval = [&]() {
    ad::Tape tape;
    std::vector<ad::Var> vars;
    for (const auto& t : inputs) vars.push_back(tape.variable(t));
    return f(tape, vars).value().item();
  };
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double saved = inputs[k][i];
      inputs[k][i] = saved + eps;
      const double up = eval();
      inputs[k][i] = saved - eps;
      const double down = eval();
      inputs[k][i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[k].empty() ? 0.0 : analytic[k][i];
      worst = std::max(worst, rel_err(a, numeric, floor));
    }
  }
  return worst;
}

struct ParamFdResult {
  double worst = 0.0;
  std::string worst_name;
  std::size_t checked = 0;
};

// Same check over every scalar of every parameter in `store`. `loss` must be
// a deterministic function of the parameter values.
inline ParamFdResult fd_check_params(seqimpute::nn::ParameterStore& store,
                                     const std::function<ad::Var(ad::Tape&)>& loss, double eps = 1e-5,
                                     double floor = 1e-3) {
  ad::GradientMap grads;
  ad::Tape tape;
  {
    ad::Var root = loss(tape);
    grads = tape.backward(root);
  }
  auto eval = [&]() {
    ad::Tape t;
    return loss(t).value().item();
  };
  ParamFdResult res;
  for (auto& p : store) {
    auto it = grads.find(&p);
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double saved = p.value[i];
      p.value[i] = saved + eps;
      const double up = eval();
      p.value[i] = saved - eps;
      const double down = eval();
      p.value[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = it == grads.end() ? 0.0 : it->second[i];
      const double e = rel_err(a, numeric, floor);
      ++res.checked;
      if (e > res.worst) {
        res.worst = e;
        res.worst_name = p.name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return res;
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("seqimpute_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testutil
