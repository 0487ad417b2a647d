#include <zlib.h>

#include <cstdlib>
#include <fstream>
#include <map>
#include <set>

#include "doctest.h"
#include "helpers.hpp"
#include "seqimpute/config.hpp"
#include "seqimpute/data.hpp"

using namespace seqimpute;
using data::Mask;
using data::MaskSpec;

namespace {

void put_be32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<unsigned char>(v >> s));
}

std::vector<unsigned char> idx_images(std::uint32_t magic, std::uint32_t n, std::uint32_t rows, std::uint32_t cols,
                                      std::size_t payload) {
  std::vector<unsigned char> b;
  put_be32(b, magic);
  put_be32(b, n);
  put_be32(b, rows);
  put_be32(b, cols);
  for (std::size_t i = 0; i < payload; ++i) b.push_back(static_cast<unsigned char>((i * 7) % 256));
  return b;
}

void write_bytes(const std::filesystem::path& p, const std::vector<unsigned char>& b) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

void write_gz(const std::filesystem::path& p, const std::vector<unsigned char>& b) {
  gzFile f = gzopen(p.string().c_str(), "wb");
  REQUIRE(f != nullptr);
  gzwrite(f, b.data(), static_cast<unsigned>(b.size()));
  gzclose(f);
}

std::string amat_line(int value, std::size_t count) {
  std::string s;
  for (std::size_t i = 0; i < count; ++i) s += (i ? " " : "") + std::to_string(value);
  return s + "\n";
}

}  // namespace

TEST_SUITE("data") {

TEST_CASE("idx fixture loads with exact scaling") {
  auto dir = testutil::temp_dir("idx");
  auto bytes = idx_images(0x803, 4, 28, 28, 4 * 784);
  bytes[16] = 255;
  bytes[17] = 0;
  write_bytes(dir / "img", bytes);
  std::vector<unsigned char> lab;
  put_be32(lab, 0x801);
  put_be32(lab, 4);
  for (unsigned char c : {3, 1, 4, 1}) lab.push_back(c);
  write_bytes(dir / "lab", lab);

  auto ds = data::load_idx(dir / "img", data::Split::test, dir / "lab");
  CHECK(ds.images.rows() == 4);
  CHECK(ds.images.cols() == 784);
  CHECK(ds.images[0] == 1.0);
  CHECK(ds.images[1] == 0.0);
  CHECK(ds.images[2] == bytes[18] / 255.0);
  CHECK(ds.split == data::Split::test);
  CHECK(ds.labels == std::vector<int>{3, 1, 4, 1});

  write_gz(dir / "img.gz", bytes);
  CHECK(data::load_idx(dir / "img.gz").images == ds.images);
}

TEST_CASE("idx error paths") {
  auto dir = testutil::temp_dir("idx_err");
  write_bytes(dir / "magic", idx_images(0x804, 1, 28, 28, 784));
  CHECK_THROWS_WITH_AS(data::load_idx(dir / "magic"), doctest::Contains("0x00000804"), data::FormatError);
  write_bytes(dir / "trunc", idx_images(0x803, 2, 28, 28, 784 + 10));
  CHECK_THROWS_WITH_AS(data::load_idx(dir / "trunc"), doctest::Contains("truncated"), data::FormatError);
  write_bytes(dir / "header", {0, 0, 8});
  CHECK_THROWS_AS(data::load_idx(dir / "header"), data::FormatError);
  write_bytes(dir / "huge", idx_images(0x803, 0xffffffffu, 0xffffu, 0xffffu, 0));
  CHECK_THROWS_WITH_AS(data::load_idx(dir / "huge"), doctest::Contains("overflow"), data::FormatError);
  CHECK_THROWS(data::load_idx(dir / "absent"));
  std::vector<unsigned char> lab;
  put_be32(lab, 0x803);
  put_be32(lab, 1);
  lab.push_back(0);
  write_bytes(dir / "lab", lab);
  CHECK_THROWS_AS(data::load_idx_labels(dir / "lab"), data::FormatError);
}

TEST_CASE("amat fixture and errors") {
  auto dir = testutil::temp_dir("amat");
  {
    std::ofstream out(dir / "ok.amat");
    out << amat_line(0, 784) << amat_line(1, 784);
  }
  auto ds = data::load_amat(dir / "ok.amat");
  REQUIRE(ds.images.rows() == 2);
  double s0 = 0, s1 = 0;
  for (std::size_t c = 0; c < 784; ++c) {
    s0 += ds.images(0, c);
    s1 += ds.images(1, c);
  }
  CHECK(s0 == 0);
  CHECK(s1 == 784);
  CHECK(ds.domain == data::PixelDomain::binary);
  {
    std::ofstream out(dir / "short.amat");
    out << amat_line(0, 784) << amat_line(1, 783);
  }
  CHECK_THROWS_WITH_AS(data::load_amat(dir / "short.amat"), doctest::Contains("short.amat:2"), data::FormatError);
  {
    std::ofstream out(dir / "half.amat");
    out << "0.5 " << amat_line(0, 783);
  }
  CHECK_THROWS_WITH_AS(data::load_amat(dir / "half.amat"), doctest::Contains("0.5"), data::FormatError);
}

TEST_CASE("bundled mnist5k splits") {
  auto s = data::load_named("mnist5k", SEQIMPUTE_DATA_DIR);
  CHECK(s.train.size() == 4000);
  CHECK(s.valid.size() == 500);
  CHECK(s.test.size() == 500);
  CHECK(s.train.dim() == 784);
  CHECK(s.test.labels.size() == 500);
  for (double v : s.valid.images.vec()) REQUIRE((v >= 0.0 && v <= 1.0));
  auto b = data::binarize(s.valid);
  CHECK(b.domain == data::PixelDomain::binary);
  for (double v : b.images.vec()) REQUIRE((v == 0.0 || v == 1.0));
  auto sub = data::stratified_subset(s.test, 5);
  CHECK(sub.size() == 50);
  std::map<int, int> counts;
  for (int l : sub.labels) ++counts[l];
  for (auto& [l, c] : counts) CHECK(c == 5);
  CHECK(data::head(s.test, 3).images == s.test.images.rows_slice(0, 3));
  CHECK_THROWS(data::load_named("svhn", SEQIMPUTE_DATA_DIR));
}

TEST_CASE("data dir resolution") {
  CHECK(data::resolve_data_dir("/x") == "/x");
  ::setenv("SEQIMPUTE_DATA", "/from/env", 1);
  CHECK(data::resolve_data_dir("") == "/from/env");
  ::unsetenv("SEQIMPUTE_DATA");
  CHECK(data::resolve_data_dir("") == "data");
}

TEST_CASE("mask spec parsing") {
  CHECK(MaskSpec::parse("mcar80").amount == 80);
  CHECK(MaskSpec::parse("MCAR-80").kind == MaskSpec::Kind::mcar);
  CHECK(MaskSpec::parse("MAR_16").kind == MaskSpec::Kind::mar);
  CHECK(MaskSpec::parse("mar16").to_string() == "mar16");
  CHECK(MaskSpec::parse("mar14").missing_count(28, 28) == 196);
  CHECK(MaskSpec::parse("mcar80").missing_count(28, 28) == 627);
  CHECK_THROWS(MaskSpec::parse("mcar101"));
  CHECK_THROWS(MaskSpec::parse("foo"));
  CHECK_THROWS(MaskSpec::parse("mar"));
}

TEST_CASE("mcar examples") {
  Rng rng(1);
  CHECK(data::sample_mcar(3, 784, 100, rng).known == Tensor(3, 784, 0.0));
  CHECK(data::sample_mcar(3, 784, 0, rng).known == Tensor(3, 784, 1.0));
  auto m = data::sample_mcar(50, 784, 80, rng);
  for (std::size_t r = 0; r < 50; ++r) REQUIRE(m.missing_count(r) == 627);
  for (double v : m.known.vec()) REQUIRE((v == 0.0 || v == 1.0));
  CHECK_THROWS(data::sample_mcar(1, 10, 120, rng));
}

TEST_CASE("mcar positions are uniform") {
  Rng rng(2);
  auto m = data::sample_mcar(20000, 10, 30, rng);
  for (std::size_t c = 0; c < 10; ++c) {
    double miss = 0;
    for (std::size_t r = 0; r < m.rows(); ++r) miss += 1.0 - m.known(r, c);
    CHECK(std::abs(miss / 20000.0 - 0.3) < 0.015);
  }
}

TEST_CASE("mar examples") {
  Rng rng(3);
  CHECK(data::sample_mar(2, 28, 28, 28, rng).known == Tensor(2, 784, 0.0));
  auto m = data::sample_mar(200, 28, 28, 16, rng);
  std::set<std::size_t> corners;
  for (std::size_t r = 0; r < 200; ++r) {
    REQUIRE(m.missing_count(r) == 256);
    // Missing pixels form one contiguous square.
    std::size_t top = 28, left = 28;
    for (std::size_t i = 0; i < 784; ++i) {
      if (m.known(r, i) == 0.0) {
        top = std::min(top, i / 28);
        left = std::min(left, i % 28);
      }
    }
    REQUIRE(top + 16 <= 28);
    REQUIRE(left + 16 <= 28);
    for (std::size_t y = top; y < top + 16; ++y)
      for (std::size_t x = left; x < left + 16; ++x) REQUIRE(m.known(r, y * 28 + x) == 0.0);
    corners.insert(top * 28 + left);
  }
  CHECK(corners.size() > 50);
  CHECK_THROWS(data::sample_mar(1, 28, 28, 29, rng));
}

TEST_CASE("same seed gives identical masks") {
  Rng a(9), b(9), c(10);
  auto spec = MaskSpec::parse("mcar50");
  auto ma = data::sample_mask(spec, 4, 28, 28, a);
  CHECK(ma.known == data::sample_mask(spec, 4, 28, 28, b).known);
  CHECK_FALSE(ma.known == data::sample_mask(spec, 4, 28, 28, c).known);
  CHECK(ma.width == 28);
}

TEST_CASE("apply_mask partitions x") {
  Tensor x = testutil::random_tensor(4, 9, 1, 0, 1);
  Mask ones{Tensor(4, 9, 1.0), 3, 3};
  auto [k1, u1] = data::apply_mask(x, ones);
  CHECK(k1 == x);
  CHECK(u1 == Tensor(4, 9));
  Mask zeros{Tensor(4, 9, 0.0), 3, 3};
  auto [k0, u0] = data::apply_mask(x, zeros);
  CHECK(k0 == Tensor(4, 9));
  CHECK(u0 == x);
  Rng rng(4);
  auto m = data::sample_mcar(4, 9, 40, rng, 3, 3);
  auto [k, u] = data::apply_mask(x, m);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(k[i] + u[i] == x[i]);
  CHECK(m.missing() == [&] {
    Tensor t(4, 9);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = 1.0 - m.known[i];
    return t;
  }());
  CHECK_THROWS_AS(data::apply_mask(Tensor(4, 8), m), ShapeError);
}

TEST_CASE("config text parsing") {
  auto kv = config::parse("# comment\n a = 1 \n\nb=x=y\n");
  REQUIRE(kv.size() == 2);
  CHECK(kv[0] == std::pair<std::string, std::string>{"a", "1"});
  CHECK(kv[1].second == "x=y");
  CHECK_THROWS_AS(config::parse("novalue\n"), config::ConfigError);
  CHECK_THROWS_AS(config::parse_override("=3"), config::ConfigError);
  CHECK(config::to_size("k", "12") == 12);
  CHECK_THROWS_AS(config::to_size("k", "-1"), config::ConfigError);
  CHECK_THROWS_AS(config::to_size("k", "12x"), config::ConfigError);
  CHECK_THROWS_AS(config::to_double("k", "abc"), config::ConfigError);
  CHECK(config::to_bool("k", "true"));
  CHECK_FALSE(config::to_bool("k", "0"));
  CHECK(config::to_bool("k", "on"));
  CHECK_FALSE(config::to_bool("k", "off"));
  CHECK_THROWS_AS(config::to_bool("k", "yes"), config::ConfigError);
  for (double v : {0.1, 1.0 / 3.0, 2e-4, -1e300, 5e-324}) CHECK(config::to_double("k", config::format_double(v)) == v);
  auto text = config::to_text(kv);
  CHECK(config::parse(text) == kv);
}

}  // TEST_SUITE
