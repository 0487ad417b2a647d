#include "seqimpute/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <thread>

namespace seqimpute::training {

namespace {

// Stream tags keep minibatch order, masks and noise statistically independent.
constexpr std::uint64_t kOrderTag = 0x6f72646572ULL;
constexpr std::uint64_t kMaskTag = 0x6d61736bULL;
constexpr std::uint64_t kValidMaskTag = 0x766d61736bULL;
constexpr std::uint64_t kTrainSalt = 0x747261696eULL;
constexpr std::uint64_t kValidSalt = 0x76616c6964ULL;

bool selected(const ad::Parameter& p, std::optional<Role> only) { return !only || p.role == *only; }

void shuffle(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.index(i)]);
}

}  // namespace

void TrainConfig::validate() const {
  model.validate();
  const auto spec = data::MaskSpec::parse(mask);
  if (spec.kind == data::MaskSpec::Kind::mcar && spec.amount == 0) {
    throw config::ConfigError("mask mcar0 leaves nothing to impute");
  }
  if (spec.kind == data::MaskSpec::Kind::mar && spec.amount == 0) {
    throw config::ConfigError("mask mar0 leaves nothing to impute");
  }
  const auto fam = model.family();
  const bool full = spec.kind == data::MaskSpec::Kind::mcar && spec.amount == 100;
  if ((fam == models::Family::gen || fam == models::Family::vae) && !full) {
    throw config::ConfigError("model " + model.model + " is unconditional and trains with mask=mcar100");
  }
  if (batch_size == 0) throw config::ConfigError("batch_size must be positive");
  if (!(learning_rate > 0.0)) throw config::ConfigError("learning_rate must be positive");
  if (!(lambda >= 0.0)) throw config::ConfigError("lambda must be non-negative");
  if (!(clip_norm > 0.0)) throw config::ConfigError("clip_norm must be positive");
  if (valid_every == 0 || log_every == 0) throw config::ConfigError("valid_every and log_every must be positive");
}

void TrainConfig::set(const std::string& key, const std::string& value) {
  if (model.set(key, value)) {
    // LSTM imputers run 16 steps unless T was given explicitly.
    if (key == "T") {
      steps_given_ = true;
    } else if (key == "model" && !steps_given_) {
      model.T = model.family() == models::Family::lstm ? 16 : models::ModelSpec{}.T;
    }
    return;
  }
  if (key == "dataset") {
    dataset = value;
  } else if (key == "mask") {
    try {
      mask = data::MaskSpec::parse(value).to_string();
    } catch (const std::invalid_argument& e) {
      throw config::ConfigError(e.what());
    }
  } else if (key == "binarize") {
    binarize = config::to_bool(key, value);
  } else if (key == "batch_size") {
    batch_size = config::to_size(key, value);
  } else if (key == "learning_rate") {
    learning_rate = config::to_double(key, value);
  } else if (key == "updates") {
    updates = config::to_size(key, value);
  } else if (key == "seed") {
    seed = config::to_u64(key, value);
  } else if (key == "lambda") {
    lambda = config::to_double(key, value);
  } else if (key == "clip_norm") {
    clip_norm = config::to_double(key, value);
  } else if (key == "shard_size") {
    shard_size = config::to_size(key, value);
  } else if (key == "valid_every") {
    valid_every = config::to_size(key, value);
  } else if (key == "valid_size") {
    valid_size = config::to_size(key, value);
  } else if (key == "log_every") {
    log_every = config::to_size(key, value);
  } else {
    throw config::ConfigError("unknown config key '" + key + "'");
  }
}

config::KeyValues TrainConfig::to_kv() const {
  config::KeyValues kv = model.to_kv();
  const config::KeyValues rest = {{"dataset", dataset},
                                  {"mask", mask},
                                  {"binarize", binarize ? "true" : "false"},
                                  {"batch_size", std::to_string(batch_size)},
                                  {"learning_rate", config::format_double(learning_rate)},
                                  {"updates", std::to_string(updates)},
                                  {"seed", std::to_string(seed)},
                                  {"lambda", config::format_double(lambda)},
                                  {"clip_norm", config::format_double(clip_norm)},
                                  {"shard_size", std::to_string(shard_size)},
                                  {"valid_every", std::to_string(valid_every)},
                                  {"valid_size", std::to_string(valid_size)},
                                  {"log_every", std::to_string(log_every)}};
  kv.insert(kv.end(), rest.begin(), rest.end());
  return kv;
}

TrainConfig TrainConfig::from_kv(const config::KeyValues& kv) {
  TrainConfig c;
  for (const auto& [k, v] : kv) c.set(k, v);
  c.validate();
  return c;
}

double global_norm(const nn::ParameterStore& store, const GradientMap& grads, std::optional<Role> only) {
  double s = 0.0;
  for (const auto& p : store) {
    if (!selected(p, only)) continue;
    auto it = grads.find(&p);
    if (it == grads.end()) continue;
    for (double g : it->second.vec()) s += g * g;
  }
  return std::sqrt(s);
}

double clip_global_norm(const nn::ParameterStore& store, GradientMap& grads, double max_norm,
                        std::optional<Role> only) {
  const double norm = global_norm(store, grads, only);
  if (!std::isfinite(norm) || norm <= max_norm) return norm;
  const double f = max_norm / norm;
  for (const auto& p : store) {
    if (!selected(p, only)) continue;
    auto it = grads.find(&p);
    if (it == grads.end()) continue;
    for (double& g : it->second.vec()) g *= f;
  }
  return norm;
}

bool adam_step(nn::ParameterStore& store, const GradientMap& grads, AdamState& state, double lr,
               std::optional<Role> only) {
  for (const auto& p : store) {
    if (!selected(p, only)) continue;
    auto it = grads.find(&p);
    if (it == grads.end()) continue;
    if (!it->second.same_shape(p.value)) {
      throw ShapeError("gradient for " + p.name + " has shape " + it->second.shape_str() + ", parameter " +
                       p.value.shape_str());
    }
    if (!all_finite(it->second)) {
      ++state.skipped;
      return false;
    }
  }
  ++state.t;
  const double t = static_cast<double>(state.t);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (auto& p : store) {
    if (!selected(p, only)) continue;
    auto [mit, fresh] = state.m.try_emplace(&p, p.value.rows(), p.value.cols());
    auto& v = state.v.try_emplace(&p, p.value.rows(), p.value.cols()).first->second;
    auto& m = mit->second;
    auto git = grads.find(&p);
    const Tensor* g = git == grads.end() ? nullptr : &git->second;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double gi = g ? (*g)[i] : 0.0;
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      p.value[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
  return true;
}

ad::Var free_energy(const models::Trajectory& traj, double lambda) {
  if (!traj.guided || !traj.terminal_nll.valid()) {
    throw ad::ContractError("free_energy needs a guided trajectory with a terminal NLL");
  }
  if (lambda == 1.0) return traj.terminal_nll + traj.kl_sum();
  if (lambda == 0.0) return traj.terminal_nll;
  return traj.terminal_nll + ad::scale(traj.kl_sum(), lambda);
}

BatchGradients batch_gradients(const models::Model& model, const Tensor& x, const Tensor& known, double lambda,
                               std::uint64_t seed, const std::vector<std::uint64_t>& row_ids, std::uint64_t salt,
                               std::size_t shard_size, std::size_t workers) {
  const std::size_t b = x.rows();
  if (row_ids.size() != b) throw ShapeError("row_ids size does not match batch");
  const std::size_t ss = shard_size == 0 ? b : std::min(shard_size, b);
  const std::size_t shards = (b + ss - 1) / ss;

  struct ShardOut {
    GradientMap grads;
    double fe = 0.0, kl = 0.0, nll = 0.0;
  };
  std::vector<ShardOut> outs(shards);
  auto run = [&](std::size_t s) {
    const std::size_t lo = s * ss;
    const std::size_t hi = std::min(b, lo + ss);
    std::vector<std::uint64_t> ids(row_ids.begin() + static_cast<std::ptrdiff_t>(lo),
                                   row_ids.begin() + static_cast<std::ptrdiff_t>(hi));
    ad::Tape tape;
    NoiseSource noise(seed, ids, salt);
    models::Trajectory traj = model.rollout(tape, x.rows_slice(lo, hi), known.rows_slice(lo, hi),
                                            models::Policy::guide, noise);
    ad::Var fe = free_energy(traj, lambda);
    ad::Var loss = ad::scale(ad::sum(fe), 1.0 / static_cast<double>(b));
    auto& o = outs[s];
    o.grads = tape.backward(loss);
    const ad::Var kl = traj.kl_sum();
    for (std::size_t r = 0; r < hi - lo; ++r) {
      o.fe += fe.value()(r, 0);
      o.kl += kl.value()(r, 0);
      o.nll += traj.terminal_nll.value()(r, 0);
    }
  };
  const std::size_t nw = std::max<std::size_t>(1, std::min(workers, shards));
  if (nw == 1) {
    for (std::size_t s = 0; s < shards; ++s) run(s);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < nw; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t s = w; s < shards; s += nw) run(s);
      });
    }
    for (auto& t : pool) t.join();
  }

  BatchGradients out;
  for (std::size_t s = 0; s < shards; ++s) {
    for (auto& [p, g] : outs[s].grads) {
      auto [it, fresh] = out.grads.try_emplace(p, std::move(g));
      if (!fresh)
        for (std::size_t i = 0; i < g.size(); ++i) it->second[i] += g[i];
    }
    out.fe += outs[s].fe;
    out.kl += outs[s].kl;
    out.nll += outs[s].nll;
  }
  out.fe /= static_cast<double>(b);
  out.kl /= static_cast<double>(b);
  out.nll /= static_cast<double>(b);
  return out;
}

double validation_fe(const models::Model& model, const data::Dataset& set, const data::MaskSpec& mask,
                     std::size_t rows, std::size_t batch, std::uint64_t seed) {
  rows = std::min(rows, set.size());
  if (rows == 0) throw std::invalid_argument("validation set is empty");
  Rng mrng(stream_seed(seed, kValidMaskTag));
  const Tensor known = data::sample_mask(mask, rows, set.width, set.height, mrng).known;
  double total = 0.0;
  for (std::size_t lo = 0; lo < rows; lo += batch) {
    const std::size_t hi = std::min(rows, lo + batch);
    std::vector<std::uint64_t> ids(hi - lo);
    std::iota(ids.begin(), ids.end(), lo);
    const Tensor fe =
        models::variational_nll(model, set.images.rows_slice(lo, hi), known.rows_slice(lo, hi), 1, seed ^ kValidSalt, ids);
    for (double v : fe.vec()) total += v;
  }
  return total / static_cast<double>(rows);
}

TrainResult train(models::Model& model, const TrainConfig& cfg, const data::Dataset& train_set,
                  const data::Dataset* valid, const TrainOptions& opts) {
  cfg.validate();
  if (train_set.size() == 0) throw std::invalid_argument("training set is empty");
  if (train_set.dim() != model.spec().dim) {
    throw ShapeError("dataset dim " + std::to_string(train_set.dim()) + " != model dim " +
                     std::to_string(model.spec().dim));
  }
  const auto mask = data::MaskSpec::parse(cfg.mask);
  const std::size_t b = cfg.batch_size;
  const std::size_t n = train_set.size();

  std::ofstream metrics;
  if (!opts.out_dir.empty()) {
    std::filesystem::create_directories(opts.out_dir);
    metrics.open(opts.out_dir / "metrics.csv", std::ios::trunc);
    if (!metrics) throw std::runtime_error("cannot write " + (opts.out_dir / "metrics.csv").string());
    metrics << kMetricsHeader << "\n";
  }
  const config::KeyValues meta = cfg.to_kv();

  TrainResult res;
  AdamState state;
  Rng order(stream_seed(cfg.seed, kOrderTag));
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  shuffle(perm, order);
  std::size_t cursor = 0;
  bool have_best = false;

  std::vector<std::size_t> idx(b);
  std::vector<std::uint64_t> ids(b);
  for (std::size_t u = 1; u <= cfg.updates; ++u) {
    for (std::size_t i = 0; i < b; ++i) {
      if (cursor == n) {
        shuffle(perm, order);
        cursor = 0;
      }
      idx[i] = perm[cursor++];
      ids[i] = (u - 1) * b + i;
    }
    const Tensor xb = train_set.images.gather_rows(idx);
    Rng mrng(stream_seed(cfg.seed, kMaskTag, u));
    const Tensor known = data::sample_mask(mask, b, train_set.width, train_set.height, mrng).known;

    BatchGradients bg =
        batch_gradients(model, xb, known, cfg.lambda, cfg.seed, ids, kTrainSalt, cfg.shard_size, opts.workers);
    const double norm = clip_global_norm(model.store(), bg.grads, cfg.clip_norm, opts.only);
    if (opts.grad_hook) opts.grad_hook(u, bg.grads);
    if (!adam_step(model.store(), bg.grads, state, cfg.learning_rate, opts.only) && opts.verbose) {
      std::fprintf(stderr, "update %zu: non-finite gradient, skipped\n", u);
    }
    res.train_fe.push_back(bg.fe);

    std::string vcell;
    const bool validate_now = valid != nullptr && (u % cfg.valid_every == 0 || u == cfg.updates);
    if (validate_now) {
      const double vfe = validation_fe(model, *valid, mask, cfg.valid_size, b, cfg.seed);
      res.valid_fe.emplace_back(u, vfe);
      vcell = config::format_double(vfe);
      if (!have_best || vfe < res.best_valid) {
        have_best = true;
        res.best_valid = vfe;
        if (!opts.out_dir.empty()) models::save_checkpoint(opts.out_dir / "best.sqim", model, meta);
      }
    }
    if (metrics.is_open() && (u % cfg.log_every == 0 || validate_now)) {
      metrics << u << "," << config::format_double(bg.fe) << "," << vcell << "," << config::format_double(bg.kl)
              << "," << config::format_double(bg.nll) << "," << config::format_double(norm) << "," << state.skipped
              << "\n";
    }
    if (opts.verbose && (u % 100 == 0 || u == cfg.updates)) {
      std::fprintf(stderr, "update %zu/%zu train_fe %.3f kl %.3f nll %.3f%s%s\n", u, cfg.updates, bg.fe, bg.kl,
                   bg.nll, vcell.empty() ? "" : " valid_fe ", vcell.c_str());
    }
  }
  res.updates = cfg.updates;
  res.skipped = state.skipped;
  if (!opts.out_dir.empty()) models::save_checkpoint(opts.out_dir / "final.sqim", model, meta);
  return res;
}

TrainResult finetune_q(models::Model& model, const TrainConfig& cfg, const data::Dataset& set, std::size_t updates,
                       TrainOptions opts) {
  TrainConfig c = cfg;
  c.updates = updates;
  opts.only = Role::guide;
  return train(model, c, set, nullptr, opts);
}

}  // namespace seqimpute::training
