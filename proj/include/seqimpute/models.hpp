#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "seqimpute/autodiff.hpp"
#include "seqimpute/config.hpp"
#include "seqimpute/data.hpp"
#include "seqimpute/distributions.hpp"
#include "seqimpute/nn.hpp"
#include "seqimpute/rng.hpp"

namespace seqimpute::models {

using ad::Parameter;
using ad::Tape;
using ad::Var;

// -add accumulates canvas deltas, -jump replaces the canvas each step.
enum class Constructor { add, jump };
// guide: q drives the roll-out and p is scored along it; primary: p drives.
enum class Policy { primary, guide };

enum class Family { gpsi, lstm, gen, vae };

// Architecture and step count. Flat keys: model, dim, T, width, hidden,
// layers, activation, z_dim, z0_dim, init_seed, feed_mask, write_layers,
// read_op.
struct ModelSpec {
  std::string model = "gpsi_add";  // gpsi_add|gpsi_jump|lstm_add|lstm_jump|gen_add|gen_jump|vae
  std::size_t dim = 784;
  std::size_t T = 6;
  std::size_t width = 64;   // LSTM state size
  std::size_t hidden = 64;  // MLP hidden units
  std::size_t layers = 2;   // hidden layers in GPSI and VAE networks
  nn::Activation activation = nn::Activation::relu;
  std::size_t z_dim = 100;
  std::size_t z0_dim = 20;
  std::uint64_t init_seed = 1;
  bool feed_mask = true;         // imputers also read the mask channel m
  std::size_t write_layers = 0;  // LSTM write map: 0 = affine, else tanh MLP
  // LSTM imputer read op: "concat" feeds the concatenated inputs through one
  // tanh layer; "gated" multiplies that by a sigmoid gate over the same inputs.
  std::string read_op = "concat";

  Family family() const;
  Constructor constructor() const;
  // Throws ConfigError on unknown model names or zero sizes.
  void validate() const;
  // Returns false when `key` is not a ModelSpec key.
  bool set(const std::string& key, const std::string& value);
  config::KeyValues to_kv() const;
  static ModelSpec from_kv(const config::KeyValues& kv);
};

// Sampled roll-out. Step index 0 is the initialization step (z_0); GPSI has
// no z_0, so its entry 0 holds zeros.
struct Trajectory {
  bool guided = false;
  std::vector<Var> canvases;   // c_0..c_T, (batch, D) pre-sigmoid
  std::vector<Var> latents;    // z_0..z_T; z_0 unbound for GPSI
  std::vector<Var> deltas;     // -add only: delta_t for t = 1..T
  std::vector<nn::LSTMState> states;  // writer/decoder states s_0..s_T (LSTM families)
  std::vector<Var> step_kls;   // guided only: T+1 entries of (batch, 1)
  std::vector<Var> log_ratio;  // guided only: log p(z_t) - log q(z_t) at the sampled z_t
  Var terminal_nll;            // guided only: (batch, 1) over scored sites
  Tensor scored;               // (batch, D) 1 at sites entering the NLL

  std::size_t steps() const { return canvases.empty() ? 0 : canvases.size() - 1; }
  // (batch, 1) sum over step_kls.
  Var kl_sum() const;
  // (batch, T+1) plain copy of step_kls.
  Tensor step_kl_table() const;
  // sigmoid(c_T).
  Tensor final_probs() const;
};

class Model {
 public:
  explicit Model(ModelSpec spec);
  virtual ~Model() = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelSpec& spec() const { return spec_; }
  nn::ParameterStore& store() { return store_; }
  const nn::ParameterStore& store() const { return store_; }

  // x: (batch, D) in [0, 1]; known: (batch, D) in {0, 1}. A primary roll-out
  // reads x only through x * known.
  virtual Trajectory rollout(Tape& tape, const Tensor& x, const Tensor& known, Policy policy,
                             NoiseSource& noise) const = 0;
  // False for models that ignore the mask (generator, VAE).
  virtual bool conditional() const { return true; }

 protected:
  void check_inputs(const Tensor& x, const Tensor& known) const;

  ModelSpec spec_;
  nn::ParameterStore store_;
};

// Direct imputer: stationary MLP step selectors over [sigmoid(c), x or x^k, m].
class GPSIModel : public Model {
 public:
  explicit GPSIModel(ModelSpec spec);
  Trajectory rollout(Tape& tape, const Tensor& x, const Tensor& known, Policy policy,
                     NoiseSource& noise) const override;

  nn::MLP p_net, q_net, constructor_net;
  Parameter* c0 = nullptr;
};

// Reader/writer LSTM imputer with infinite-mixture initialization.
class LSTMImputer : public Model {
 public:
  explicit LSTMImputer(ModelSpec spec);
  Trajectory rollout(Tape& tape, const Tensor& x, const Tensor& known, Policy policy,
                     NoiseSource& noise) const override;

  nn::MLP p0_net, q0_net, expander;
  nn::LSTM reader, guide, writer;
  nn::MLP read_p, read_q;
  nn::Affine gate_p, gate_q;  // only with read_op=gated
  nn::Affine p_head, q_head, write_op;
  nn::MLP write_mlp;  // replaces write_op when write_layers > 0
};

// Unconditional LSTM generator with state-conditioned step priors and a
// learned distribution over the initial state.
class ExtendedGenerator : public Model {
 public:
  explicit ExtendedGenerator(ModelSpec spec);
  Trajectory rollout(Tape& tape, const Tensor& x, const Tensor& known, Policy policy,
                     NoiseSource& noise) const override;
  bool conditional() const override { return false; }

  nn::MLP q0_net, expander, read_q;
  nn::LSTM decoder, guide;
  nn::Affine p_head, q_head, out;
  nn::MLP out_mlp;  // replaces out when write_layers > 0
  Parameter* c0 = nullptr;
};

// Single-latent VAE; the guided roll-out is the usual one-step ELBO.
class VAEModel : public Model {
 public:
  explicit VAEModel(ModelSpec spec);
  Trajectory rollout(Tape& tape, const Tensor& x, const Tensor& known, Policy policy,
                     NoiseSource& noise) const override;
  bool conditional() const override { return false; }

  nn::MLP encoder, decoder;
};

std::unique_ptr<Model> make_model(const ModelSpec& spec);

// Checkpoint = parameter container whose metadata holds the model spec
// followed by `extra` (usually the training config).
void save_checkpoint(const std::filesystem::path& path, const Model& model, const config::KeyValues& extra = {});
struct LoadedCheckpoint {
  std::unique_ptr<Model> model;
  config::KeyValues meta;
};
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

// Per-row variational NLL bound averaged over `samples` guided roll-outs.
// Row r of sample s draws noise from stream (seed, row_ids[r], s).
Tensor variational_nll(const Model& model, const Tensor& x, const Tensor& known, std::size_t samples,
                       std::uint64_t seed, const std::vector<std::uint64_t>& row_ids);

struct ImputeResult {
  Tensor imputation;                // x at known sites, mean sigmoid(c_T) at missing sites
  Tensor nll_per_pixel;             // (batch, 1) bound / missing count
  std::vector<Tensor> canvases;     // c_0..c_T of the first primary roll-out
};

// `samples` primary roll-outs for the point imputation plus the guided bound.
ImputeResult impute(const Model& model, const Tensor& x, const Tensor& known, std::size_t samples,
                    std::uint64_t seed);

struct VAEImputation {
  Tensor imputation;             // pixel probabilities, known sites equal x
  std::vector<Tensor> canvases;  // guess after each iteration, starting with the initialization
};

// Iterative VAE reconstruction with known values held fixed. Missing sites
// start at 0.5.
VAEImputation vae_impute(const VAEModel& vae, const Tensor& x, const Tensor& known, std::size_t steps,
                         NoiseSource& noise);

enum class TemplateMode { honest, oracle };

// Nearest training row by squared distance over known (honest) or missing
// (oracle) sites; ties go to the lowest row index. Returns x at known sites
// and the matched row at missing sites.
Tensor template_match(const Tensor& train, const Tensor& x, const Tensor& known, TemplateMode mode);

}  // namespace seqimpute::models
