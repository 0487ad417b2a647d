#include "seqimpute/data.hpp"

#include <zlib.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

namespace seqimpute::data {

namespace {

constexpr std::uint32_t kImageMagic = 0x00000803;
constexpr std::uint32_t kLabelMagic = 0x00000801;
constexpr std::uint64_t kMaxIdxElements = std::uint64_t{1} << 32;

// Reads a whole file through zlib; plain files pass through unchanged.
std::vector<unsigned char> read_maybe_gz(const std::filesystem::path& path) {
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (f == nullptr) throw std::runtime_error("cannot open " + path.string());
  std::vector<unsigned char> out;
  unsigned char buf[1 << 16];
  int n = 0;
  while ((n = gzread(f, buf, sizeof buf)) > 0) out.insert(out.end(), buf, buf + n);
  int err = 0;
  const char* msg = gzerror(f, &err);
  gzclose(f);
  if (n < 0 || (err != Z_OK && err != Z_STREAM_END)) {
    throw FormatError("read error in " + path.string() + ": " + (msg ? msg : "?"));
  }
  return out;
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off, const std::filesystem::path& path) {
  if (off + 4 > b.size()) throw FormatError("truncated IDX header in " + path.string());
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

std::string hex32(std::uint32_t v) {
  char s[16];
  std::snprintf(s, sizeof s, "0x%08x", v);
  return s;
}

std::filesystem::path first_existing(const std::filesystem::path& dir, const std::string& stem) {
  for (const char* ext : {"", ".gz"}) {
    auto p = dir / (stem + ext);
    if (std::filesystem::exists(p)) return p;
  }
  throw std::runtime_error("missing data file " + (dir / stem).string() + "[.gz]");
}

}  // namespace

const char* to_string(Split s) {
  switch (s) {
    case Split::train:
      return "train";
    case Split::valid:
      return "valid";
    case Split::test:
      return "test";
  }
  return "?";
}

std::vector<int> load_idx_labels(const std::filesystem::path& path) {
  const auto bytes = read_maybe_gz(path);
  const auto magic = be32(bytes, 0, path);
  if (magic != kLabelMagic) throw FormatError("bad IDX label magic " + hex32(magic) + " in " + path.string());
  const auto n = be32(bytes, 4, path);
  if (bytes.size() < 8 + std::size_t{n}) throw FormatError("truncated IDX label file " + path.string());
  return {bytes.begin() + 8, bytes.begin() + 8 + n};
}

Dataset load_idx(const std::filesystem::path& images, Split split, const std::optional<std::filesystem::path>& labels) {
  const auto bytes = read_maybe_gz(images);
  const auto magic = be32(bytes, 0, images);
  if (magic != kImageMagic) throw FormatError("bad IDX image magic " + hex32(magic) + " in " + images.string());
  const std::uint64_t n = be32(bytes, 4, images);
  const std::uint64_t rows = be32(bytes, 8, images);
  const std::uint64_t cols = be32(bytes, 12, images);
  const std::uint64_t pixels = rows * cols;
  if (rows == 0 || cols == 0 || pixels > kMaxIdxElements || n * pixels > kMaxIdxElements) {
    throw FormatError("IDX dimensions overflow: " + std::to_string(n) + " x " + std::to_string(rows) + " x " +
                      std::to_string(cols));
  }
  if (bytes.size() < 16 + n * pixels) {
    throw FormatError("truncated IDX image file " + images.string() + ": expected " + std::to_string(n * pixels) +
                      " pixel bytes, found " + std::to_string(bytes.size() - 16));
  }
  Dataset ds;
  ds.split = split;
  ds.height = rows;
  ds.width = cols;
  ds.images = Tensor(n, pixels);
  for (std::size_t i = 0; i < n * pixels; ++i) ds.images[i] = static_cast<double>(bytes[16 + i]) / 255.0;
  if (labels) {
    ds.labels = load_idx_labels(*labels);
    if (ds.labels.size() != n) {
      throw FormatError("label count " + std::to_string(ds.labels.size()) + " != image count " + std::to_string(n));
    }
  }
  return ds;
}

Dataset load_amat(const std::filesystem::path& path, Split split) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  constexpr std::size_t kDim = 784;
  std::vector<double> values;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ss(line);
    std::string tok;
    std::size_t count = 0;
    while (ss >> tok) {
      if (tok != "0" && tok != "1") {
        throw FormatError(path.string() + ":" + std::to_string(lineno) + ": non-binary token '" + tok + "'");
      }
      values.push_back(tok == "1" ? 1.0 : 0.0);
      ++count;
    }
    if (count == 0) continue;
    if (count != kDim) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected 784 values, found " +
                        std::to_string(count));
    }
  }
  Dataset ds;
  ds.split = split;
  ds.domain = PixelDomain::binary;
  const std::size_t n = values.size() / kDim;
  ds.images = Tensor(n, kDim, std::move(values));
  return ds;
}

Dataset binarize(const Dataset& ds, double threshold) {
  Dataset out = ds;
  for (auto& v : out.images.vec()) v = v >= threshold ? 1.0 : 0.0;
  out.domain = PixelDomain::binary;
  return out;
}

Dataset stratified_subset(const Dataset& ds, std::size_t per_class) {
  if (ds.labels.size() != ds.size()) throw std::invalid_argument("stratified_subset needs labels");
  std::vector<std::size_t> taken(10, 0);
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const int l = ds.labels[i];
    if (l < 0 || l > 9) continue;
    if (taken[static_cast<std::size_t>(l)]++ < per_class) keep.push_back(i);
  }
  Dataset out = ds;
  out.images = ds.images.gather_rows(keep);
  out.labels.clear();
  for (auto i : keep) out.labels.push_back(ds.labels[i]);
  return out;
}

Dataset head(const Dataset& ds, std::size_t n) {
  Dataset out = ds;
  n = std::min(n, ds.size());
  out.images = ds.images.rows_slice(0, n);
  if (!ds.labels.empty()) out.labels.assign(ds.labels.begin(), ds.labels.begin() + static_cast<std::ptrdiff_t>(n));
  return out;
}

DatasetSplits load_named(const std::string& name, const std::filesystem::path& dir) {
  DatasetSplits s;
  if (name == "mnist5k") {
    auto load = [&](const char* split, Split tag) {
      const std::string base = std::string("mnist5k-") + split;
      return load_idx(first_existing(dir, base + "-images-idx3-ubyte"), tag,
                      first_existing(dir, base + "-labels-idx1-ubyte"));
    };
    s.train = load("train", Split::train);
    s.valid = load("valid", Split::valid);
    s.test = load("test", Split::test);
  } else if (name == "mnist") {
    Dataset full = load_idx(first_existing(dir, "train-images-idx3-ubyte"), Split::train,
                            first_existing(dir, "train-labels-idx1-ubyte"));
    const std::size_t n_valid = std::min<std::size_t>(10000, full.size() / 6);
    const std::size_t n_train = full.size() - n_valid;
    s.train = full;
    s.train.images = full.images.rows_slice(0, n_train);
    s.train.labels.assign(full.labels.begin(), full.labels.begin() + static_cast<std::ptrdiff_t>(n_train));
    s.valid = full;
    s.valid.split = Split::valid;
    s.valid.images = full.images.rows_slice(n_train, full.size());
    s.valid.labels.assign(full.labels.begin() + static_cast<std::ptrdiff_t>(n_train), full.labels.end());
    s.test = load_idx(first_existing(dir, "t10k-images-idx3-ubyte"), Split::test,
                      first_existing(dir, "t10k-labels-idx1-ubyte"));
  } else if (name == "binarized_mnist") {
    s.train = load_amat(dir / "binarized_mnist_train.amat", Split::train);
    s.valid = load_amat(dir / "binarized_mnist_valid.amat", Split::valid);
    s.test = load_amat(dir / "binarized_mnist_test.amat", Split::test);
  } else {
    throw std::invalid_argument("unknown dataset '" + name + "' (expected mnist5k, mnist or binarized_mnist)");
  }
  return s;
}

std::filesystem::path resolve_data_dir(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("SEQIMPUTE_DATA"); env != nullptr && *env != '\0') return env;
  return "data";
}

std::size_t Mask::missing_count(std::size_t row) const {
  std::size_t n = 0;
  for (double v : known.row(row)) n += v == 0.0 ? 1 : 0;
  return n;
}

Tensor Mask::missing() const {
  Tensor out(known.rows(), known.cols());
  for (std::size_t i = 0; i < known.size(); ++i) out[i] = 1.0 - known[i];
  return out;
}

MaskSpec MaskSpec::parse(const std::string& s) {
  std::string t;
  for (char c : s)
    if (c != '-' && c != '_') t.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  MaskSpec spec;
  std::string digits;
  if (t.rfind("mcar", 0) == 0) {
    spec.kind = Kind::mcar;
    digits = t.substr(4);
  } else if (t.rfind("mar", 0) == 0) {
    spec.kind = Kind::mar;
    digits = t.substr(3);
  } else {
    throw std::invalid_argument("bad mask spec '" + s + "' (expected e.g. mcar80 or mar16)");
  }
  if (digits.empty() || !std::all_of(digits.begin(), digits.end(), ::isdigit)) {
    throw std::invalid_argument("bad mask spec '" + s + "' (expected e.g. mcar80 or mar16)");
  }
  spec.amount = std::stoi(digits);
  if (spec.kind == Kind::mcar && spec.amount > 100) throw std::invalid_argument("MCAR percent above 100: " + s);
  return spec;
}

std::string MaskSpec::to_string() const { return (kind == Kind::mcar ? "mcar" : "mar") + std::to_string(amount); }

std::size_t MaskSpec::missing_count(std::size_t width, std::size_t height) const {
  if (kind == Kind::mcar) {
    return static_cast<std::size_t>(std::llround(static_cast<double>(width * height) * amount / 100.0));
  }
  return static_cast<std::size_t>(amount) * static_cast<std::size_t>(amount);
}

Mask sample_mcar(std::size_t batch, std::size_t dim, double drop_percent, Rng& rng, std::size_t width,
                 std::size_t height) {
  if (!(drop_percent >= 0.0 && drop_percent <= 100.0)) {
    throw std::invalid_argument("MCAR drop percent must be in [0, 100], got " + std::to_string(drop_percent));
  }
  const auto k = static_cast<std::size_t>(std::llround(static_cast<double>(dim) * drop_percent / 100.0));
  Mask m;
  m.known = Tensor(batch, dim, 1.0);
  m.width = width;
  m.height = height;
  std::vector<std::size_t> idx(dim);
  for (std::size_t r = 0; r < batch; ++r) {
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    // Partial Fisher-Yates: the first k entries are a uniform k-subset.
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t j = i + rng.index(dim - i);
      std::swap(idx[i], idx[j]);
      m.known(r, idx[i]) = 0.0;
    }
  }
  return m;
}

Mask sample_mar(std::size_t batch, std::size_t width, std::size_t height, std::size_t square, Rng& rng) {
  if (square > std::min(width, height)) {
    throw std::invalid_argument("MAR square " + std::to_string(square) + " does not fit a " + std::to_string(width) +
                                "x" + std::to_string(height) + " image");
  }
  Mask m;
  m.known = Tensor(batch, width * height, 1.0);
  m.width = width;
  m.height = height;
  for (std::size_t r = 0; r < batch; ++r) {
    const std::size_t x0 = rng.index(width - square + 1);
    const std::size_t y0 = rng.index(height - square + 1);
    for (std::size_t y = y0; y < y0 + square; ++y)
      for (std::size_t x = x0; x < x0 + square; ++x) m.known(r, y * width + x) = 0.0;
  }
  return m;
}

Mask sample_mask(const MaskSpec& spec, std::size_t batch, std::size_t width, std::size_t height, Rng& rng) {
  if (spec.kind == MaskSpec::Kind::mcar) return sample_mcar(batch, width * height, spec.amount, rng, width, height);
  return sample_mar(batch, width, height, static_cast<std::size_t>(spec.amount), rng);
}

std::pair<Tensor, Tensor> apply_mask(const Tensor& x, const Mask& m) {
  if (!x.same_shape(m.known)) throw ShapeError("apply_mask: x " + x.shape_str() + " vs mask " + m.known.shape_str());
  Tensor known(x.rows(), x.cols());
  Tensor missing(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (m.known[i] != 0.0) {
      known[i] = x[i];
    } else {
      missing[i] = x[i];
    }
  }
  return {std::move(known), std::move(missing)};
}

}  // namespace seqimpute::data
