#include "seqimpute/models.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "seqimpute/kernels.hpp"

namespace seqimpute::models {

using dist::GaussianParams;
using nn::Activation;
using Role = ad::Role;

namespace {

struct FamilyInfo {
  const char* name;
  Family family;
  Constructor constructor;
};

constexpr FamilyInfo kModels[] = {
    {"gpsi_add", Family::gpsi, Constructor::add}, {"gpsi_jump", Family::gpsi, Constructor::jump},
    {"lstm_add", Family::lstm, Constructor::add}, {"lstm_jump", Family::lstm, Constructor::jump},
    {"gen_add", Family::gen, Constructor::add},   {"gen_jump", Family::gen, Constructor::jump},
    {"vae", Family::vae, Constructor::jump},
};

const FamilyInfo& lookup(const std::string& name) {
  for (const auto& m : kModels)
    if (name == m.name) return m;
  throw config::ConfigError("unknown model '" + name +
                            "' (expected gpsi_add, gpsi_jump, lstm_add, lstm_jump, gen_add, gen_jump or vae)");
}

Var broadcast_row(Tape& tape, const Parameter& row, std::size_t batch) {
  return ad::add(tape.constant(Tensor(batch, row.value.cols())), tape.param(row));
}

Var zeros_col(Tape& tape, std::size_t batch) { return tape.constant(Tensor(batch, 1)); }

Tensor masked(const Tensor& x, const Tensor& known) {
  Tensor out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = known[i] != 0.0 ? x[i] : 0.0;
  return out;
}

Tensor complement(const Tensor& known) {
  Tensor out(known.rows(), known.cols());
  for (std::size_t i = 0; i < known.size(); ++i) out[i] = 1.0 - known[i];
  return out;
}

// Samples z from q when guided (recording the KL and log-ratio terms), else from p.
Var take_step(Tape& tape, const GaussianParams& p, const GaussianParams* q, NoiseSource& noise, Trajectory& traj) {
  if (q == nullptr) return dist::reparam_sample(tape, p, noise).z;
  Var z = dist::reparam_sample(tape, *q, noise).z;
  traj.step_kls.push_back(dist::gauss_kl(*q, p));
  traj.log_ratio.push_back(dist::gauss_logpdf(p, z) - dist::gauss_logpdf(*q, z));
  return z;
}

void finish(Tape& tape, Trajectory& traj, const Tensor& x, const Tensor& known) {
  traj.scored = complement(known);
  if (traj.guided) {
    traj.terminal_nll = ad::bernoulli_nll(traj.canvases.back(), tape.constant(x), tape.constant(traj.scored));
  }
}

nn::LSTMState slice_state(Var e, std::size_t lo, std::size_t n) {
  return {ad::slice_cols(e, lo, lo + n), ad::slice_cols(e, lo + n, lo + 2 * n)};
}

Var apply_write(Tape& tape, const nn::Affine& affine, const nn::MLP& mlp, Var h) {
  return mlp.layers.empty() ? affine.apply(tape, h) : mlp.apply(tape, h);
}

// Policy inputs, with the mask channel appended when feed_mask is set.
Var policy_input(std::initializer_list<Var> parts, Var mask, bool feed_mask, std::initializer_list<Var> tail = {}) {
  std::vector<Var> v(parts);
  if (feed_mask) v.push_back(mask);
  v.insert(v.end(), tail);
  return ad::concat_cols(v);
}

Var read(Tape& tape, const nn::MLP& op, const nn::Affine& gate, Var in) {
  Var r = op.apply(tape, in);
  return gate.weight ? r * ad::sigmoid(gate.apply(tape, in)) : r;
}

std::vector<std::size_t> mlp_dims(std::size_t in, std::size_t hidden, std::size_t layers, std::size_t out) {
  std::vector<std::size_t> d{in};
  for (std::size_t i = 0; i < layers; ++i) d.push_back(hidden);
  d.push_back(out);
  return d;
}

}  // namespace

Family ModelSpec::family() const { return lookup(model).family; }
Constructor ModelSpec::constructor() const { return lookup(model).constructor; }

void ModelSpec::validate() const {
  lookup(model);
  if (dim == 0 || width == 0 || hidden == 0 || z_dim == 0 || z0_dim == 0) {
    throw config::ConfigError("model sizes must be positive");
  }
  if (T == 0 && family() != Family::vae) throw config::ConfigError("T must be at least 1");
  if ((family() == Family::gpsi || family() == Family::vae) && layers == 0) {
    throw config::ConfigError("layers must be at least 1");
  }
}

bool ModelSpec::set(const std::string& key, const std::string& value) {
  if (key == "model") {
    model = value;
  } else if (key == "dim") {
    dim = config::to_size(key, value);
  } else if (key == "T") {
    T = config::to_size(key, value);
  } else if (key == "width") {
    width = config::to_size(key, value);
  } else if (key == "hidden") {
    hidden = config::to_size(key, value);
  } else if (key == "layers") {
    layers = config::to_size(key, value);
  } else if (key == "activation") {
    try {
      activation = nn::parse_activation(value);
    } catch (const std::invalid_argument& e) {
      throw config::ConfigError(e.what());
    }
  } else if (key == "z_dim") {
    z_dim = config::to_size(key, value);
  } else if (key == "z0_dim") {
    z0_dim = config::to_size(key, value);
  } else if (key == "init_seed") {
    init_seed = config::to_u64(key, value);
  } else if (key == "feed_mask") {
    feed_mask = config::to_bool(key, value);
  } else if (key == "write_layers") {
    write_layers = config::to_size(key, value);
  } else if (key == "read_op") {
    if (value != "concat" && value != "gated") throw config::ConfigError("read_op must be concat or gated");
    read_op = value;
  } else {
    return false;
  }
  return true;
}

config::KeyValues ModelSpec::to_kv() const {
  return {{"model", model},
          {"dim", std::to_string(dim)},
          {"T", std::to_string(T)},
          {"width", std::to_string(width)},
          {"hidden", std::to_string(hidden)},
          {"layers", std::to_string(layers)},
          {"activation", nn::to_string(activation)},
          {"z_dim", std::to_string(z_dim)},
          {"z0_dim", std::to_string(z0_dim)},
          {"init_seed", std::to_string(init_seed)},
          {"feed_mask", feed_mask ? "true" : "false"},
          {"write_layers", std::to_string(write_layers)},
          {"read_op", read_op}};
}

ModelSpec ModelSpec::from_kv(const config::KeyValues& kv) {
  ModelSpec s;
  for (const auto& [k, v] : kv) s.set(k, v);
  s.validate();
  return s;
}

Var Trajectory::kl_sum() const {
  if (step_kls.empty()) throw ad::ContractError("kl_sum on a trajectory without step KLs");
  Var s = step_kls.front();
  for (std::size_t t = 1; t < step_kls.size(); ++t) s = s + step_kls[t];
  return s;
}

Tensor Trajectory::step_kl_table() const {
  if (step_kls.empty()) return {};
  const std::size_t b = step_kls.front().rows();
  Tensor out(b, step_kls.size());
  for (std::size_t t = 0; t < step_kls.size(); ++t)
    for (std::size_t r = 0; r < b; ++r) out(r, t) = step_kls[t].value()(r, 0);
  return out;
}

Tensor Trajectory::final_probs() const {
  Tensor p = canvases.back().value();
  for (auto& v : p.vec()) v = kernels::sigmoid(v);
  return p;
}

Model::Model(ModelSpec spec) : spec_(std::move(spec)), store_(spec_.init_seed) { spec_.validate(); }

void Model::check_inputs(const Tensor& x, const Tensor& known) const {
  if (x.cols() != spec_.dim || x.rows() == 0) {
    throw ShapeError("model expects (batch, " + std::to_string(spec_.dim) + ") inputs, got " + x.shape_str());
  }
  if (!known.same_shape(x)) throw ShapeError("mask " + known.shape_str() + " does not match x " + x.shape_str());
  for (double v : known.vec())
    if (v != 0.0 && v != 1.0) throw std::invalid_argument("mask entries must be 0 or 1");
}

GPSIModel::GPSIModel(ModelSpec spec) : Model(std::move(spec)) {
  const auto& s = spec_;
  const auto d = s.dim;
  const auto in = (s.feed_mask ? 3 : 2) * d;
  p_net = nn::make_mlp(store_, "gpsi.p", mlp_dims(in, s.hidden, s.layers, 2 * s.z_dim), s.activation,
                       Activation::identity, Role::primary);
  q_net = nn::make_mlp(store_, "gpsi.q", mlp_dims(in, s.hidden, s.layers, 2 * s.z_dim), s.activation,
                       Activation::identity, Role::guide);
  constructor_net = nn::make_mlp(store_, "gpsi.omega", mlp_dims(s.z_dim, s.hidden, s.layers, d), s.activation,
                                 Activation::identity, Role::primary);
  c0 = &store_.add_constant("gpsi.c0", 1, d, 0.0, Role::primary);
}

Trajectory GPSIModel::rollout(Tape& tape, const Tensor& x, const Tensor& known, Policy policy,
                              NoiseSource& noise) const {
  check_inputs(x, known);
  const std::size_t b = x.rows();
  const bool guided = policy == Policy::guide;
  Trajectory traj;
  traj.guided = guided;
  Var xk = tape.constant(masked(x, known));
  Var m = tape.constant(known);
  Var xfull = guided ? tape.constant(x) : Var{};

  Var c = broadcast_row(tape, *c0, b);
  traj.canvases.push_back(c);
  traj.latents.push_back(Var{});
  if (guided) {
    traj.step_kls.push_back(zeros_col(tape, b));
    traj.log_ratio.push_back(zeros_col(tape, b));
  }
  for (std::size_t t = 1; t <= spec_.T; ++t) {
    Var sc = ad::sigmoid(c);
    GaussianParams p = GaussianParams::split(p_net.apply(tape, policy_input({sc, xk}, m, spec_.feed_mask)));
    Var z;
    if (guided) {
      GaussianParams q = GaussianParams::split(q_net.apply(tape, policy_input({sc, xfull}, m, spec_.feed_mask)));
      z = take_step(tape, p, &q, noise, traj);
    } else {
      z = take_step(tape, p, nullptr, noise, traj);
    }
    traj.latents.push_back(z);
    Var out = constructor_net.apply(tape, z);
    if (spec_.constructor() == Constructor::add) {
      traj.deltas.push_back(out);
      c = c + out;
    } else {
      c = out;
    }
    traj.canvases.push_back(c);
  }
  finish(tape, traj, x, known);
  return traj;
}

LSTMImputer::LSTMImputer(ModelSpec spec) : Model(std::move(spec)) {
  const auto& s = spec_;
  const auto d = s.dim;
  const auto n = s.width;
  const auto in0 = (s.feed_mask ? 2 : 1) * d;
  const auto in_read = (s.feed_mask ? 3 : 2) * d + n;
  p0_net = nn::make_mlp(store_, "lstm.p0", {in0, s.hidden, 2 * s.z0_dim}, Activation::tanh, Activation::identity,
                        Role::primary);
  q0_net = nn::make_mlp(store_, "lstm.q0", {in0, s.hidden, 2 * s.z0_dim}, Activation::tanh, Activation::identity,
                        Role::guide);
  expander = nn::make_mlp(store_, "lstm.expand", {s.z0_dim, s.hidden, 6 * n + d}, Activation::tanh,
                          Activation::identity, Role::primary);
  read_p = nn::make_mlp(store_, "lstm.read_p", {in_read, n}, Activation::tanh, Activation::tanh, Role::primary);
  read_q = nn::make_mlp(store_, "lstm.read_q", {in_read, n}, Activation::tanh, Activation::tanh, Role::guide);
  if (s.read_op == "gated") {
    gate_p = nn::make_affine(store_, "lstm.gate_p", in_read, n, Role::primary);
    gate_q = nn::make_affine(store_, "lstm.gate_q", in_read, n, Role::guide);
  }
  reader = nn::make_lstm(store_, "lstm.reader", n, n, Role::primary);
  guide = nn::make_lstm(store_, "lstm.guide", n, n, Role::guide);
  writer = nn::make_lstm(store_, "lstm.writer", s.z_dim, n, Role::primary);
  p_head = nn::make_affine(store_, "lstm.p_head", n, 2 * s.z_dim, Role::primary);
  q_head = nn::make_affine(store_, "lstm.q_head", n, 2 * s.z_dim, Role::guide);
  if (s.write_layers == 0) {
    write_op = nn::make_affine(store_, "lstm.write", n, d, Role::primary);
  } else {
    write_mlp = nn::make_mlp(store_, "lstm.write", mlp_dims(n, s.hidden, s.write_layers, d), Activation::tanh,
                             Activation::identity, Role::primary);
  }
}

Trajectory LSTMImputer::rollout(Tape& tape, const Tensor& x, const Tensor& known, Policy policy,
                                NoiseSource& noise) const {
  check_inputs(x, known);
  const std::size_t n = spec_.width;
  const std::size_t d = spec_.dim;
  const bool guided = policy == Policy::guide;
  Trajectory traj;
  traj.guided = guided;
  Var xk = tape.constant(masked(x, known));
  Var m = tape.constant(known);
  Var xfull = guided ? tape.constant(x) : Var{};

  GaussianParams p0 = GaussianParams::split(p0_net.apply(tape, policy_input({xk}, m, spec_.feed_mask)));
  Var z0;
  if (guided) {
    GaussianParams q0 = GaussianParams::split(q0_net.apply(tape, policy_input({xfull}, m, spec_.feed_mask)));
    z0 = take_step(tape, p0, &q0, noise, traj);
  } else {
    z0 = take_step(tape, p0, nullptr, noise, traj);
  }
  traj.latents.push_back(z0);

  Var e = expander.apply(tape, z0);
  nn::LSTMState rs = slice_state(e, 0, n);
  nn::LSTMState ws = slice_state(e, 2 * n, n);
  nn::LSTMState gs = slice_state(e, 4 * n, n);
  Var c = ad::slice_cols(e, 6 * n, 6 * n + d);
  traj.canvases.push_back(c);
  traj.states.push_back(ws);

  for (std::size_t t = 1; t <= spec_.T; ++t) {
    Var sc = ad::sigmoid(c);
    rs = reader.step(tape, rs, read(tape, read_p, gate_p, policy_input({sc, xk}, m, spec_.feed_mask, {ws.v})));
    GaussianParams p = GaussianParams::split(p_head.apply(tape, rs.v));
    Var z;
    if (guided) {
      gs = guide.step(tape, gs, read(tape, read_q, gate_q, policy_input({sc, xfull}, m, spec_.feed_mask, {ws.v})));
      GaussianParams q = GaussianParams::split(q_head.apply(tape, gs.v));
      z = take_step(tape, p, &q, noise, traj);
    } else {
      z = take_step(tape, p, nullptr, noise, traj);
    }
    traj.latents.push_back(z);
    ws = writer.step(tape, ws, z);
    traj.states.push_back(ws);
    if (spec_.constructor() == Constructor::add) {
      Var delta = apply_write(tape, write_op, write_mlp, ws.v);
      traj.deltas.push_back(delta);
      c = c + delta;
    } else {
      c = apply_write(tape, write_op, write_mlp, ws.h);
    }
    traj.canvases.push_back(c);
  }
  finish(tape, traj, x, known);
  return traj;
}

ExtendedGenerator::ExtendedGenerator(ModelSpec spec) : Model(std::move(spec)) {
  const auto& s = spec_;
  const auto d = s.dim;
  const auto n = s.width;
  q0_net = nn::make_mlp(store_, "gen.q0", {d, s.hidden, 2 * s.z0_dim}, Activation::tanh, Activation::identity,
                        Role::guide);
  expander = nn::make_mlp(store_, "gen.expand", {s.z0_dim, s.hidden, 4 * n}, Activation::tanh, Activation::identity,
                          Role::primary);
  read_q = nn::make_mlp(store_, "gen.read_q", {2 * d + n, n}, Activation::tanh, Activation::tanh, Role::guide);
  decoder = nn::make_lstm(store_, "gen.decoder", s.z_dim, n, Role::primary);
  guide = nn::make_lstm(store_, "gen.guide", n, n, Role::guide);
  p_head = nn::make_affine(store_, "gen.p_head", n, 2 * s.z_dim, Role::primary);
  q_head = nn::make_affine(store_, "gen.q_head", n, 2 * s.z_dim, Role::guide);
  if (s.write_layers == 0) {
    out = nn::make_affine(store_, "gen.out", n, d, Role::primary);
  } else {
    out_mlp = nn::make_mlp(store_, "gen.out", mlp_dims(n, s.hidden, s.write_layers, d), Activation::tanh,
                           Activation::identity, Role::primary);
  }
  c0 = &store_.add_constant("gen.c0", 1, d, 0.0, Role::primary);
}

Trajectory ExtendedGenerator::rollout(Tape& tape, const Tensor& x, const Tensor& known, Policy policy,
                                      NoiseSource& noise) const {
  check_inputs(x, known);
  const std::size_t b = x.rows();
  const std::size_t n = spec_.width;
  const bool guided = policy == Policy::guide;
  Trajectory traj;
  traj.guided = guided;
  Var xfull = guided ? tape.constant(x) : Var{};

  GaussianParams p0 = GaussianParams::standard(tape, b, spec_.z0_dim);
  Var z0;
  if (guided) {
    GaussianParams q0 = GaussianParams::split(q0_net.apply(tape, xfull));
    z0 = take_step(tape, p0, &q0, noise, traj);
  } else {
    z0 = take_step(tape, p0, nullptr, noise, traj);
  }
  traj.latents.push_back(z0);

  Var e = expander.apply(tape, z0);
  nn::LSTMState ds = slice_state(e, 0, n);
  nn::LSTMState gs = slice_state(e, 2 * n, n);
  Var c = broadcast_row(tape, *c0, b);
  traj.canvases.push_back(c);
  traj.states.push_back(ds);

  for (std::size_t t = 1; t <= spec_.T; ++t) {
    GaussianParams p = GaussianParams::split(p_head.apply(tape, ds.v));
    Var z;
    if (guided) {
      const Var g_in[] = {xfull, xfull - ad::sigmoid(c), ds.v};
      gs = guide.step(tape, gs, read_q.apply(tape, ad::concat_cols(g_in)));
      GaussianParams q = GaussianParams::split(q_head.apply(tape, gs.v));
      z = take_step(tape, p, &q, noise, traj);
    } else {
      z = take_step(tape, p, nullptr, noise, traj);
    }
    traj.latents.push_back(z);
    ds = decoder.step(tape, ds, z);
    traj.states.push_back(ds);
    if (spec_.constructor() == Constructor::add) {
      Var delta = apply_write(tape, out, out_mlp, ds.v);
      traj.deltas.push_back(delta);
      c = c + delta;
    } else {
      c = apply_write(tape, out, out_mlp, ds.h);
    }
    traj.canvases.push_back(c);
  }
  finish(tape, traj, x, known);
  return traj;
}

VAEModel::VAEModel(ModelSpec spec) : Model(std::move(spec)) {
  const auto& s = spec_;
  encoder = nn::make_mlp(store_, "vae.enc", mlp_dims(s.dim, s.hidden, s.layers, 2 * s.z_dim), s.activation,
                         Activation::identity, Role::guide);
  decoder = nn::make_mlp(store_, "vae.dec", mlp_dims(s.z_dim, s.hidden, s.layers, s.dim), s.activation,
                         Activation::identity, Role::primary);
}

Trajectory VAEModel::rollout(Tape& tape, const Tensor& x, const Tensor& known, Policy policy,
                             NoiseSource& noise) const {
  check_inputs(x, known);
  const bool guided = policy == Policy::guide;
  Trajectory traj;
  traj.guided = guided;
  GaussianParams prior = GaussianParams::standard(tape, x.rows(), spec_.z_dim);
  Var z;
  if (guided) {
    GaussianParams q = GaussianParams::split(encoder.apply(tape, tape.constant(x)));
    z = take_step(tape, prior, &q, noise, traj);
  } else {
    z = take_step(tape, prior, nullptr, noise, traj);
  }
  traj.latents.push_back(z);
  traj.canvases.push_back(decoder.apply(tape, z));
  finish(tape, traj, x, known);
  return traj;
}

std::unique_ptr<Model> make_model(const ModelSpec& spec) {
  switch (spec.family()) {
    case Family::gpsi:
      return std::make_unique<GPSIModel>(spec);
    case Family::lstm:
      return std::make_unique<LSTMImputer>(spec);
    case Family::gen:
      return std::make_unique<ExtendedGenerator>(spec);
    case Family::vae:
      return std::make_unique<VAEModel>(spec);
  }
  throw config::ConfigError("unknown model family");
}

void save_checkpoint(const std::filesystem::path& path, const Model& model, const config::KeyValues& extra) {
  config::KeyValues meta = model.spec().to_kv();
  meta.insert(meta.end(), extra.begin(), extra.end());
  nn::save_parameters(path, model.store(), config::to_text(meta));
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  LoadedCheckpoint out;
  out.meta = config::parse(nn::read_metadata(path));
  config::KeyValues spec_kv;
  for (const auto& kv : out.meta) {
    ModelSpec probe;
    if (probe.set(kv.first, kv.second)) spec_kv.push_back(kv);
  }
  out.model = make_model(ModelSpec::from_kv(spec_kv));
  nn::load_parameters(path, out.model->store());
  return out;
}

namespace {
constexpr std::uint64_t kGuidedSalt = 0;
constexpr std::uint64_t kPrimarySalt = std::uint64_t{1} << 32;
}  // namespace

Tensor variational_nll(const Model& model, const Tensor& x, const Tensor& known, std::size_t samples,
                       std::uint64_t seed, const std::vector<std::uint64_t>& row_ids) {
  if (samples == 0) throw std::invalid_argument("samples must be at least 1");
  Tensor acc(x.rows(), 1);
  for (std::size_t s = 0; s < samples; ++s) {
    Tape tape;
    NoiseSource noise(seed, row_ids, kGuidedSalt + s);
    Trajectory traj = model.rollout(tape, x, known, Policy::guide, noise);
    Var fe = traj.terminal_nll + traj.kl_sum();
    for (std::size_t r = 0; r < x.rows(); ++r) acc(r, 0) += fe.value()(r, 0);
  }
  for (auto& v : acc.vec()) v /= static_cast<double>(samples);
  return acc;
}

ImputeResult impute(const Model& model, const Tensor& x, const Tensor& known, std::size_t samples,
                    std::uint64_t seed) {
  if (samples == 0) throw std::invalid_argument("samples must be at least 1");
  const std::size_t b = x.rows();
  std::vector<double> missing(b, 0.0);
  for (std::size_t r = 0; r < b; ++r) {
    for (double k : known.row(r)) missing[r] += k == 0.0 ? 1.0 : 0.0;
    if (missing[r] == 0.0) throw std::invalid_argument("nothing to impute: row " + std::to_string(r) + " has no missing pixels");
  }
  std::vector<std::uint64_t> ids(b);
  for (std::size_t r = 0; r < b; ++r) ids[r] = r;

  ImputeResult res;
  Tensor mean(b, x.cols());
  for (std::size_t s = 0; s < samples; ++s) {
    Tape tape;
    NoiseSource noise(seed, ids, kPrimarySalt + s);
    Trajectory traj = model.rollout(tape, x, known, Policy::primary, noise);
    const Tensor p = traj.final_probs();
    for (std::size_t i = 0; i < p.size(); ++i) mean[i] += p[i] / static_cast<double>(samples);
    if (s == 0)
      for (const auto& c : traj.canvases) res.canvases.push_back(c.value());
  }
  res.imputation = Tensor(b, x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) res.imputation[i] = known[i] != 0.0 ? x[i] : mean[i];
  res.nll_per_pixel = variational_nll(model, x, known, samples, seed, ids);
  for (std::size_t r = 0; r < b; ++r) res.nll_per_pixel(r, 0) /= missing[r];
  return res;
}

VAEImputation vae_impute(const VAEModel& vae, const Tensor& x, const Tensor& known, std::size_t steps,
                         NoiseSource& noise) {
  if (!x.same_shape(known)) throw ShapeError("vae_impute: x " + x.shape_str() + " vs mask " + known.shape_str());
  VAEImputation out;
  Tensor guess(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) guess[i] = known[i] != 0.0 ? x[i] : 0.5;
  out.canvases.push_back(guess);
  for (std::size_t s = 0; s < steps; ++s) {
    Tape tape;
    GaussianParams q = GaussianParams::split(vae.encoder.apply(tape, tape.constant(guess)));
    Var z = dist::reparam_sample(tape, q, noise).z;
    const Tensor& logits = vae.decoder.apply(tape, z).value();
    for (std::size_t i = 0; i < x.size(); ++i) guess[i] = known[i] != 0.0 ? x[i] : kernels::sigmoid(logits[i]);
    out.canvases.push_back(guess);
  }
  out.imputation = guess;
  return out;
}

Tensor template_match(const Tensor& train, const Tensor& x, const Tensor& known, TemplateMode mode) {
  if (train.rows() == 0) throw std::invalid_argument("template_match: empty training set");
  if (train.cols() != x.cols() || !x.same_shape(known)) {
    throw ShapeError("template_match: train " + train.shape_str() + ", x " + x.shape_str() + ", mask " +
                     known.shape_str());
  }
  const std::size_t d = x.cols();
  const double want = mode == TemplateMode::honest ? 1.0 : 0.0;
  Tensor out(x.rows(), d);
  const auto rows = static_cast<std::ptrdiff_t>(x.rows());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t rr = 0; rr < rows; ++rr) {
    const auto r = static_cast<std::size_t>(rr);
    std::vector<std::size_t> sites;
    for (std::size_t i = 0; i < d; ++i)
      if (known(r, i) == want) sites.push_back(i);
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < train.rows(); ++j) {
      double acc = 0.0;
      for (std::size_t i : sites) {
        const double diff = train(j, i) - x(r, i);
        acc += diff * diff;
        if (acc >= best_d) break;
      }
      if (acc < best_d) {
        best_d = acc;
        best = j;
      }
    }
    for (std::size_t i = 0; i < d; ++i) out(r, i) = known(r, i) != 0.0 ? x(r, i) : train(best, i);
  }
  return out;
}

}  // namespace seqimpute::models
