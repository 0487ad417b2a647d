#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "seqimpute/autodiff.hpp"
#include "seqimpute/config.hpp"
#include "seqimpute/data.hpp"
#include "seqimpute/models.hpp"

namespace seqimpute::training {

using ad::GradientMap;
using ad::Role;

// Flat-key training configuration. Model keys are forwarded to ModelSpec.
struct TrainConfig {
  models::ModelSpec model;
  std::string dataset = "mnist5k";
  std::string mask = "mcar80";
  bool binarize = false;
  std::size_t batch_size = 250;
  double learning_rate = 0.0002;
  std::size_t updates = 1000;
  std::uint64_t seed = 1;
  double lambda = 1.0;
  double clip_norm = 10.0;
  // Rows per tape. Gradients of the shards are summed in shard order, so
  // results depend on shard_size but never on the worker count.
  std::size_t shard_size = 0;  // 0 = whole batch
  std::size_t valid_every = 500;
  std::size_t valid_size = 500;
  std::size_t log_every = 1;

  void validate() const;
  // Throws ConfigError on unknown keys or bad values.
  void set(const std::string& key, const std::string& value);
  config::KeyValues to_kv() const;
  static TrainConfig from_kv(const config::KeyValues& kv);

 private:
  bool steps_given_ = false;
};

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t t = 0;
  std::size_t skipped = 0;
  std::unordered_map<const ad::Parameter*, Tensor> m;
  std::unordered_map<const ad::Parameter*, Tensor> v;
};

// One bias-corrected Adam update of every parameter in `store` (restricted to
// `only` when given). Parameters without an entry in `grads` get a zero
// gradient. A non-finite gradient skips the whole update, bumps
// state.skipped and returns false.
bool adam_step(nn::ParameterStore& store, const GradientMap& grads, AdamState& state, double lr,
               std::optional<Role> only = std::nullopt);

// Global L2 norm over all gradients (restricted to `only`), in store order.
double global_norm(const nn::ParameterStore& store, const GradientMap& grads, std::optional<Role> only = std::nullopt);
// Rescales gradients so the global norm is at most max_norm. Returns the
// norm before clipping; non-finite norms leave gradients untouched.
double clip_global_norm(const nn::ParameterStore& store, GradientMap& grads, double max_norm,
                        std::optional<Role> only = std::nullopt);

// Per-row terminal_nll + lambda * sum(step_kls). Needs a guided trajectory.
ad::Var free_energy(const models::Trajectory& traj, double lambda);

struct BatchGradients {
  GradientMap grads;  // of the batch-mean free energy
  double fe = 0.0;    // batch means
  double kl = 0.0;
  double nll = 0.0;
};

// Guided roll-outs over a minibatch, split into shards of `shard_size` rows
// run on up to `workers` threads. Row r uses noise stream (seed, row_ids[r], salt).
BatchGradients batch_gradients(const models::Model& model, const Tensor& x, const Tensor& known, double lambda,
                               std::uint64_t seed, const std::vector<std::uint64_t>& row_ids, std::uint64_t salt,
                               std::size_t shard_size, std::size_t workers);

struct TrainOptions {
  std::filesystem::path out_dir;  // empty: no files written
  std::size_t workers = 1;
  std::optional<Role> only;       // restrict updates to one role (fine-tuning)
  bool verbose = false;
  // Called on the clipped gradients before each Adam step (fault injection).
  std::function<void(std::size_t update, GradientMap&)> grad_hook;
};

struct TrainResult {
  std::size_t updates = 0;
  std::size_t skipped = 0;
  std::vector<double> train_fe;  // batch-mean free energy per update
  std::vector<std::pair<std::size_t, double>> valid_fe;
  double best_valid = 0.0;
};

// Minibatch Adam on the mean guided free energy. Writes metrics.csv,
// final.sqim and best.sqim into out_dir when set. `valid` may be null.
TrainResult train(models::Model& model, const TrainConfig& cfg, const data::Dataset& train_set,
                  const data::Dataset* valid, const TrainOptions& opts = {});

// Same loop applied to guide parameters only; primary and shared parameters
// are left bitwise untouched.
TrainResult finetune_q(models::Model& model, const TrainConfig& cfg, const data::Dataset& set, std::size_t updates,
                       TrainOptions opts = {});

// Fixed validation protocol: the first `rows` examples of `set`, masks and
// noise drawn from streams derived from `seed`. Returns mean free energy.
double validation_fe(const models::Model& model, const data::Dataset& set, const data::MaskSpec& mask,
                     std::size_t rows, std::size_t batch, std::uint64_t seed);

inline constexpr const char* kMetricsHeader = "update,train_fe,valid_fe,kl_sum,nll,grad_norm,skipped";

}  // namespace seqimpute::training
