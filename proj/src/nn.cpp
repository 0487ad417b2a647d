#include "seqimpute/nn.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "seqimpute/rng.hpp"

namespace seqimpute::nn {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

Parameter& ParameterStore::add(const std::string& name, Tensor value, Role role) {
  if (find(name) != nullptr) throw std::invalid_argument("duplicate parameter name: " + name);
  params_.push_back(Parameter{name, std::move(value), role});
  return params_.back();
}

Parameter& ParameterStore::add_weight(const std::string& name, std::size_t in, std::size_t out, Role role) {
  if (in == 0 || out == 0) throw std::invalid_argument("parameter " + name + " has a zero dimension");
  Rng rng(stream_seed(seed_, fnv1a(name.data(), name.size())));
  const double a = std::sqrt(6.0 / static_cast<double>(in + out));
  Tensor w(in, out);
  for (auto& v : w.vec()) v = (2.0 * rng.uniform() - 1.0) * a;
  return add(name, std::move(w), role);
}

Parameter& ParameterStore::add_constant(const std::string& name, std::size_t rows, std::size_t cols, double value,
                                        Role role) {
  if (rows == 0 || cols == 0) throw std::invalid_argument("parameter " + name + " has a zero dimension");
  return add(name, Tensor(rows, cols, value), role);
}

Parameter* ParameterStore::find(const std::string& name) {
  for (auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

const Parameter* ParameterStore::find(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

Parameter& ParameterStore::at(const std::string& name) {
  Parameter* p = find(name);
  if (p == nullptr) throw std::out_of_range("no parameter named " + name);
  return *p;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

std::size_t ParameterStore::scalar_count(Role role) const {
  std::size_t n = 0;
  for (const auto& p : params_)
    if (p.role == role) n += p.value.size();
  return n;
}

std::uint64_t ParameterStore::hash(std::optional<Role> role) const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : params_) {
    if (role && p.role != *role) continue;
    h = fnv1a(p.name.data(), p.name.size(), h);
    h = fnv1a(p.value.data(), p.value.size() * sizeof(double), h);
  }
  return h;
}

void ParameterStore::copy_values_from(const ParameterStore& other) {
  for (auto& p : params_) {
    const Parameter* q = other.find(p.name);
    if (q == nullptr || !q->value.same_shape(p.value)) {
      throw std::invalid_argument("copy_values_from: no matching parameter for " + p.name);
    }
    p.value = q->value;
  }
}

Var Affine::apply(Tape& tape, Var x) const {
  if (x.cols() != in_dim()) {
    throw ShapeError("affine input " + x.value().shape_str() + " does not match in-dim " + std::to_string(in_dim()));
  }
  return ad::affine(x, tape.param(*weight), tape.param(*bias));
}

Affine make_affine(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out, Role role) {
  Affine a;
  a.weight = &store.add_weight(name + ".w", in, out, role);
  a.bias = &store.add_constant(name + ".b", 1, out, 0.0, role);
  return a;
}

Activation parse_activation(const std::string& s) {
  if (s == "identity") return Activation::identity;
  if (s == "tanh") return Activation::tanh;
  if (s == "relu") return Activation::relu;
  throw std::invalid_argument("unknown activation: " + s);
}

const char* to_string(Activation a) {
  switch (a) {
    case Activation::identity:
      return "identity";
    case Activation::tanh:
      return "tanh";
    case Activation::relu:
      return "relu";
  }
  return "?";
}

Var MLP::apply(Tape& tape, Var x) const {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    x = layers[i].apply(tape, x);
    switch (activations[i]) {
      case Activation::identity:
        break;
      case Activation::tanh:
        x = ad::tanh(x);
        break;
      case Activation::relu:
        x = ad::relu(x);
        break;
    }
  }
  return x;
}

MLP make_mlp(ParameterStore& store, const std::string& name, const std::vector<std::size_t>& dims, Activation hidden,
             Activation output, Role role) {
  if (dims.size() < 2) throw std::invalid_argument("MLP " + name + " needs at least an input and an output dim");
  MLP m;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    m.layers.push_back(make_affine(store, name + ".l" + std::to_string(i), dims[i], dims[i + 1], role));
    m.activations.push_back(i + 2 == dims.size() ? output : hidden);
  }
  return m;
}

LSTMState LSTM::zero_state(Tape& tape, std::size_t batch) const {
  return {tape.constant(Tensor(batch, width())), tape.constant(Tensor(batch, width()))};
}

LSTMState LSTM::step(Tape& tape, const LSTMState& state, Var input) const {
  const std::size_t n = width();
  if (input.cols() != in_dim()) {
    throw ShapeError("lstm input " + input.value().shape_str() + " does not match in-dim " + std::to_string(in_dim()));
  }
  if (state.h.cols() != n || state.v.cols() != n || state.h.rows() != input.rows() ||
      state.v.rows() != input.rows()) {
    throw ShapeError("lstm state " + state.h.value().shape_str() + "/" + state.v.value().shape_str() +
                     " does not match width " + std::to_string(n) + " and batch " + std::to_string(input.rows()));
  }
  Var pre = ad::affine(input, tape.param(*w), tape.param(*b));
  pre = pre + ad::matmul(state.v, tape.param(*u));
  Var p = tape.param(*peep);
  Var p_i = ad::slice_cols(p, 0, n);
  Var p_f = ad::slice_cols(p, n, 2 * n);
  Var p_o = ad::slice_cols(p, 2 * n, 3 * n);

  Var i = ad::sigmoid(ad::slice_cols(pre, 0, n) + state.h * p_i);
  Var f = ad::sigmoid(ad::slice_cols(pre, n, 2 * n) + state.h * p_f);
  Var g = ad::tanh(ad::slice_cols(pre, 3 * n, 4 * n));
  Var h = f * state.h + i * g;
  Var o = ad::sigmoid(ad::slice_cols(pre, 2 * n, 3 * n) + h * p_o);
  Var v = o * ad::tanh(h);
  return {h, v};
}

LSTM make_lstm(ParameterStore& store, const std::string& name, std::size_t in, std::size_t width, Role role) {
  LSTM l;
  l.w = &store.add_weight(name + ".w", in, 4 * width, role);
  l.u = &store.add_weight(name + ".u", width, 4 * width, role);
  l.b = &store.add_constant(name + ".b", 1, 4 * width, 0.0, role);
  for (std::size_t c = width; c < 2 * width; ++c) l.b->value(0, c) = 1.0;
  l.peep = &store.add_constant(name + ".peep", 1, 3 * width, 0.0, role);
  return l;
}

namespace {

template <class T>
void put(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::ifstream& in, const std::filesystem::path& path) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw std::runtime_error("truncated parameter container: " + path.string());
  }
  return v;
}

}  // namespace

void write_container(const std::filesystem::path& path, const NamedTensors& tensors) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write("SQIM", 4);
  put<std::uint32_t>(out, kContainerVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (name.size() > 0xffff) throw std::invalid_argument("tensor name too long: " + name);
    put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rows()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.cols()));
    out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

NamedTensors read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "SQIM", 4) != 0) {
    throw std::runtime_error("bad container magic in " + path.string());
  }
  const auto version = get<std::uint32_t>(in, path);
  if (version != kContainerVersion) {
    throw std::runtime_error("unsupported container version " + std::to_string(version));
  }
  const auto count = get<std::uint32_t>(in, path);
  NamedTensors out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = get<std::uint16_t>(in, path);
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw std::runtime_error("truncated parameter container: " + path.string());
    const auto rows = get<std::uint32_t>(in, path);
    const auto cols = get<std::uint32_t>(in, path);
    Tensor t(rows, cols);
    if (!in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)))) {
      throw std::runtime_error("truncated parameter container: " + path.string());
    }
    out.emplace_back(std::move(name), std::move(t));
  }
  return out;
}

Tensor text_to_tensor(const std::string& s) {
  Tensor t(1, std::max<std::size_t>(s.size(), 1));
  for (std::size_t i = 0; i < s.size(); ++i) t[i] = static_cast<unsigned char>(s[i]);
  return t;
}

std::string tensor_to_text(const Tensor& t) {
  std::string s;
  for (double v : t.vec()) {
    if (v == 0.0) break;
    s.push_back(static_cast<char>(static_cast<unsigned char>(v)));
  }
  return s;
}

void save_parameters(const std::filesystem::path& path, const ParameterStore& store, const std::string& meta) {
  NamedTensors tensors;
  tensors.emplace_back(kMetaTensorName, text_to_tensor(meta));
  for (const auto& p : store) tensors.emplace_back(p.name, p.value);
  write_container(path, tensors);
}

std::string load_parameters(const std::filesystem::path& path, ParameterStore& store) {
  std::string meta;
  std::size_t loaded = 0;
  for (auto& [name, t] : read_container(path)) {
    if (name == kMetaTensorName) {
      meta = tensor_to_text(t);
      continue;
    }
    Parameter* p = store.find(name);
    if (p == nullptr) throw std::runtime_error("checkpoint tensor " + name + " has no matching parameter");
    if (!p->value.same_shape(t)) {
      throw std::runtime_error("checkpoint tensor " + name + " has shape " + t.shape_str() + ", model expects " +
                               p->value.shape_str());
    }
    p->value = std::move(t);
    ++loaded;
  }
  if (loaded != store.size()) {
    throw std::runtime_error("checkpoint " + path.string() + " holds " + std::to_string(loaded) + " of " +
                             std::to_string(store.size()) + " parameters");
  }
  return meta;
}

std::string read_metadata(const std::filesystem::path& path) {
  for (auto& [name, t] : read_container(path))
    if (name == kMetaTensorName) return tensor_to_text(t);
  return {};
}

}  // namespace seqimpute::nn
