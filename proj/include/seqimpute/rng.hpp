#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "seqimpute/tensor.hpp"

namespace seqimpute {

// splitmix64 finalizer; used to derive independent stream seeds.
std::uint64_t mix64(std::uint64_t x);

// Seed for the stream identified by (seed, a, b, c).
std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0);

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(mix64(seed)) {}

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }
  // Uniform integer in [0, n).
  std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_); }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

// Standard-normal noise for a batch, one independent stream per row, so that a
// row's draws do not depend on which other rows share its batch.
//
// Every draw is recorded; after rewind() the same sequence is replayed, which
// makes a roll-out a deterministic function of the parameters.
class NoiseSource {
 public:
  NoiseSource() = default;
  // Row r uses stream_seed(seed, row_ids[r], salt).
  NoiseSource(std::uint64_t seed, const std::vector<std::uint64_t>& row_ids, std::uint64_t salt = 0);
  // Rows 0..rows-1.
  NoiseSource(std::uint64_t seed, std::size_t rows, std::uint64_t salt = 0);

  Tensor normal(std::size_t cols);
  std::size_t rows() const { return streams_.size(); }

  void rewind() { cursor_ = 0; }
  std::size_t recorded() const { return record_.size(); }

 private:
  std::vector<Rng> streams_;
  std::vector<Tensor> record_;
  std::size_t cursor_ = 0;
};

}  // namespace seqimpute
