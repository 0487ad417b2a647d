#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "seqimpute/rng.hpp"
#include "seqimpute/tensor.hpp"

namespace seqimpute::data {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Split { train, valid, test };
enum class PixelDomain { binary, unit_interval };

const char* to_string(Split s);

// Images as rows of a (N, width * height) tensor with pixels in [0, 1].
struct Dataset {
  Tensor images;
  Split split = Split::train;
  PixelDomain domain = PixelDomain::unit_interval;
  std::size_t width = 28;
  std::size_t height = 28;
  std::vector<int> labels;  // empty when no label file was given

  std::size_t size() const { return images.rows(); }
  std::size_t dim() const { return images.cols(); }
};

// IDX images (magic 0x00000803, big-endian u32 dims, u8 pixels scaled by
// 1/255). Gzip-compressed files are read transparently.
Dataset load_idx(const std::filesystem::path& images, Split split = Split::train,
                 const std::optional<std::filesystem::path>& labels = std::nullopt);
// IDX labels (magic 0x00000801).
std::vector<int> load_idx_labels(const std::filesystem::path& path);

// Binarized-MNIST text format: one image per line, 784 tokens in {0, 1}.
Dataset load_amat(const std::filesystem::path& path, Split split = Split::train);

// Thresholds pixels at `threshold` (>= maps to 1).
Dataset binarize(const Dataset& ds, double threshold = 0.5);

// First `per_class` rows of each label, in original order. Needs labels.
Dataset stratified_subset(const Dataset& ds, std::size_t per_class);
// Rows [0, n).
Dataset head(const Dataset& ds, std::size_t n);

struct DatasetSplits {
  Dataset train;
  Dataset valid;
  Dataset test;
};

// Known dataset names:
//   mnist5k          mnist5k-{train,valid,test}-images-idx3-ubyte[.gz] (+ labels)
//   mnist            {train,t10k}-images-idx3-ubyte[.gz]; valid = last 10000 of train
//   binarized_mnist  binarized_mnist_{train,valid,test}.amat
DatasetSplits load_named(const std::string& name, const std::filesystem::path& dir);

// Explicit flag, else $SEQIMPUTE_DATA, else ./data.
std::filesystem::path resolve_data_dir(const std::string& flag);

// known(r, i) == 1 when pixel i of row r is observed, 0 when missing.
struct Mask {
  Tensor known;
  std::size_t width = 0;
  std::size_t height = 0;

  std::size_t rows() const { return known.rows(); }
  std::size_t missing_count(std::size_t row) const;
  // 1 - known.
  Tensor missing() const;
};

struct MaskSpec {
  enum class Kind { mcar, mar };
  Kind kind = Kind::mcar;
  int amount = 80;  // percent for MCAR, square side for MAR

  // Accepts "mcar80", "MCAR-80", "mar16", "MAR-16" (case-insensitive).
  static MaskSpec parse(const std::string& s);
  std::string to_string() const;
  // Missing pixels per row for a width x height image.
  std::size_t missing_count(std::size_t width, std::size_t height) const;
};

// Exactly round(D * drop_percent / 100) uniformly chosen pixels missing per row.
Mask sample_mcar(std::size_t batch, std::size_t dim, double drop_percent, Rng& rng, std::size_t width = 0,
                 std::size_t height = 0);
// One square x square block missing per row, top-left corner uniform over
// [0, width - square] x [0, height - square].
Mask sample_mar(std::size_t batch, std::size_t width, std::size_t height, std::size_t square, Rng& rng);
Mask sample_mask(const MaskSpec& spec, std::size_t batch, std::size_t width, std::size_t height, Rng& rng);

// (x * m, x * (1 - m)); the two parts sum back to x exactly.
std::pair<Tensor, Tensor> apply_mask(const Tensor& x, const Mask& m);

}  // namespace seqimpute::data
