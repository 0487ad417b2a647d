#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "seqimpute/autodiff.hpp"

namespace seqimpute::nn {

using ad::Parameter;
using ad::Role;
using ad::Tape;
using ad::Var;

// 64-bit FNV-1a.
std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL);

// Owns every trainable tensor of a model. Addresses are stable for the
// lifetime of the store, so layers keep plain pointers into it.
class ParameterStore {
 public:
  explicit ParameterStore(std::uint64_t seed = 0) : seed_(seed) {}
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;

  // Weight of shape (in, out) ~ U(-a, a), a = sqrt(6 / (in + out)).
  Parameter& add_weight(const std::string& name, std::size_t in, std::size_t out, Role role);
  Parameter& add_constant(const std::string& name, std::size_t rows, std::size_t cols, double value, Role role);

  Parameter* find(const std::string& name);
  const Parameter* find(const std::string& name) const;
  Parameter& at(const std::string& name);

  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const;
  std::size_t scalar_count(Role role) const;
  std::uint64_t seed() const { return seed_; }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  // Hash of names and values of every parameter with the given role.
  std::uint64_t hash(std::optional<Role> role = std::nullopt) const;

  // Copies values from another store with the same names and shapes.
  void copy_values_from(const ParameterStore& other);

 private:
  Parameter& add(const std::string& name, Tensor value, Role role);

  std::uint64_t seed_;
  std::deque<Parameter> params_;
};

struct Affine {
  Parameter* weight = nullptr;
  Parameter* bias = nullptr;

  std::size_t in_dim() const { return weight->value.rows(); }
  std::size_t out_dim() const { return weight->value.cols(); }
  Var apply(Tape& tape, Var x) const;
};

Affine make_affine(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out, Role role);

enum class Activation { identity, tanh, relu };

Activation parse_activation(const std::string& s);
const char* to_string(Activation a);

struct MLP {
  std::vector<Affine> layers;
  std::vector<Activation> activations;

  std::size_t in_dim() const { return layers.front().in_dim(); }
  std::size_t out_dim() const { return layers.back().out_dim(); }
  Var apply(Tape& tape, Var x) const;
};

// dims = {in, hidden..., out}; hidden layers use `hidden`, the last uses `output`.
MLP make_mlp(ParameterStore& store, const std::string& name, const std::vector<std::size_t>& dims,
             Activation hidden, Activation output, Role role);

// Joint LSTM state s = [h; v]: h is the cell memory, v the gated output.
struct LSTMState {
  Var h;
  Var v;
};

// LSTM with input, forget and output gates plus peephole connections.
// Gate pre-activations are one fused affine map with column blocks [i f o g].
struct LSTM {
  Parameter* w = nullptr;     // (in, 4n)
  Parameter* u = nullptr;     // (n, 4n)
  Parameter* b = nullptr;     // (1, 4n)
  Parameter* peep = nullptr;  // (1, 3n): [p_i p_f p_o]

  std::size_t in_dim() const { return w->value.rows(); }
  std::size_t width() const { return u->value.rows(); }

  LSTMState zero_state(Tape& tape, std::size_t batch) const;
  LSTMState step(Tape& tape, const LSTMState& state, Var input) const;
};

// Forget-gate bias starts at 1, peepholes and other biases at 0.
LSTM make_lstm(ParameterStore& store, const std::string& name, std::size_t in, std::size_t width, Role role);

// Parameter container on disk:
//   "SQIM" | version u32 | count u32 | count x record
//   record: name_len u16 | name bytes | rows u32 | cols u32 | rows*cols f64
// All integers and reals little-endian.
inline constexpr std::uint32_t kContainerVersion = 1;
inline constexpr const char* kMetaTensorName = "__meta__";

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

void write_container(const std::filesystem::path& path, const NamedTensors& tensors);
NamedTensors read_container(const std::filesystem::path& path);

// Saves every parameter plus a text metadata record.
void save_parameters(const std::filesystem::path& path, const ParameterStore& store, const std::string& meta);
// Loads values into an already-built store (names and shapes must match).
// Returns the metadata text.
std::string load_parameters(const std::filesystem::path& path, ParameterStore& store);
// Reads just the metadata text.
std::string read_metadata(const std::filesystem::path& path);

Tensor text_to_tensor(const std::string& s);
std::string tensor_to_text(const Tensor& t);

}  // namespace seqimpute::nn
