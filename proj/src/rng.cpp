#include "seqimpute/rng.hpp"

namespace seqimpute {

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  std::uint64_t h = mix64(seed);
  h = mix64(h ^ a);
  h = mix64(h ^ (b * 0x632be59bd9b4e019ULL));
  return mix64(h ^ (c * 0x85157af5ULL));
}

NoiseSource::NoiseSource(std::uint64_t seed, const std::vector<std::uint64_t>& row_ids, std::uint64_t salt) {
  streams_.reserve(row_ids.size());
  for (auto id : row_ids) streams_.emplace_back(stream_seed(seed, id, salt));
}

NoiseSource::NoiseSource(std::uint64_t seed, std::size_t rows, std::uint64_t salt) {
  streams_.reserve(rows);
  for (std::size_t r = 0; r < rows; ++r) streams_.emplace_back(stream_seed(seed, r, salt));
}

Tensor NoiseSource::normal(std::size_t cols) {
  if (cursor_ < record_.size()) {
    const Tensor& t = record_[cursor_++];
    if (t.cols() != cols) throw ShapeError("noise replay: recorded " + t.shape_str() + ", asked for " +
                                           std::to_string(cols) + " columns");
    return t;
  }
  Tensor t(streams_.size(), cols);
  for (std::size_t r = 0; r < streams_.size(); ++r)
    for (std::size_t c = 0; c < cols; ++c) t(r, c) = streams_[r].normal();
  record_.push_back(t);
  ++cursor_;
  return t;
}

}  // namespace seqimpute
