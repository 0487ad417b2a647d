#include "seqimpute/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "seqimpute/distributions.hpp"
#include "seqimpute/kernels.hpp"

namespace seqimpute::eval {

namespace {

constexpr std::uint64_t kTrialRowTag = 0x726f7773ULL;
constexpr std::uint64_t kTrialMaskTag = 0x6d61736b73ULL;
constexpr std::uint64_t kVaeTag = 0x766165ULL;

std::vector<std::uint64_t> iota_ids(std::size_t lo, std::size_t hi) {
  std::vector<std::uint64_t> ids(hi - lo);
  std::iota(ids.begin(), ids.end(), lo);
  return ids;
}

unsigned char quantize(double v) {
  const double q = std::floor(v * 255.0 + 0.5);
  return static_cast<unsigned char>(std::clamp(q, 0.0, 255.0));
}

}  // namespace

MeanSE mean_se(const std::vector<double>& v) {
  MeanSE out;
  if (v.empty()) return out;
  const double n = static_cast<double>(v.size());
  out.mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
  if (v.size() < 2) return out;
  double ss = 0.0;
  for (double x : v) ss += (x - out.mean) * (x - out.mean);
  out.se = std::sqrt(ss / (n - 1.0) / n);
  return out;
}

Trials make_trials(const data::Dataset& test, const data::MaskSpec& mask, std::size_t trials, std::uint64_t seed) {
  if (trials == 0) throw std::invalid_argument("trials must be at least 1");
  if (test.size() == 0) throw std::invalid_argument("test split is empty");
  if (mask.missing_count(test.width, test.height) == 0) {
    throw std::invalid_argument("mask " + mask.to_string() + " never hides a pixel");
  }
  Trials t;
  Rng rows(stream_seed(seed, kTrialRowTag));
  std::vector<std::size_t> perm(test.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::size_t cursor = perm.size();
  for (std::size_t i = 0; i < trials; ++i) {
    if (cursor == perm.size()) {
      for (std::size_t k = perm.size(); k > 1; --k) std::swap(perm[k - 1], perm[rows.index(k)]);
      cursor = 0;
    }
    t.rows.push_back(perm[cursor++]);
  }
  t.x = test.images.gather_rows(t.rows);
  t.known = Tensor(trials, test.dim());
  Rng mrng(stream_seed(seed, kTrialMaskTag));
  for (std::size_t i = 0; i < trials; ++i) {
    for (;;) {
      const auto m = data::sample_mask(mask, 1, test.width, test.height, mrng);
      const std::size_t miss = m.missing_count(0);
      if (miss == 0) continue;
      std::copy(m.known.vec().begin(), m.known.vec().end(), t.known.row(i).begin());
      t.missing.push_back(static_cast<double>(miss));
      break;
    }
  }
  return t;
}

std::string EvalReport::csv_row() const {
  std::ostringstream s;
  s << model << "," << mask << "," << T << "," << samples << "," << trials << ","
    << config::format_double(mean_score) << "," << config::format_double(stderr_score);
  return s.str();
}

EvalReport make_report(std::string model, std::string mask, std::size_t T, std::size_t samples, const Trials& trials,
                       std::vector<double> bounds) {
  EvalReport r;
  r.model = std::move(model);
  r.mask = std::move(mask);
  r.T = T;
  r.samples = samples;
  r.trials = bounds.size();
  r.bounds = std::move(bounds);
  for (std::size_t i = 0; i < r.bounds.size(); ++i) r.scores.push_back(r.bounds[i] / trials.missing.at(i));
  const auto ms = mean_se(r.scores);
  r.mean_score = ms.mean;
  r.stderr_score = ms.se;
  return r;
}

EvalReport score_imputer(const models::Model& model, const Trials& trials, const std::string& mask_name,
                         std::size_t samples, std::uint64_t seed, std::size_t batch) {
  if (samples == 0) throw std::invalid_argument("samples must be at least 1");
  const std::size_t n = trials.x.rows();
  std::vector<double> bounds;
  bounds.reserve(n);
  for (std::size_t lo = 0; lo < n; lo += batch) {
    const std::size_t hi = std::min(n, lo + batch);
    const Tensor fe = models::variational_nll(model, trials.x.rows_slice(lo, hi), trials.known.rows_slice(lo, hi),
                                              samples, seed, iota_ids(lo, hi));
    bounds.insert(bounds.end(), fe.vec().begin(), fe.vec().end());
  }
  return make_report(model.spec().model, mask_name, model.spec().T, samples, trials, std::move(bounds));
}

EvalReport score_vae(const models::VAEModel& vae, const Trials& trials, const std::string& mask_name,
                     std::size_t steps, std::size_t runs, std::uint64_t seed, std::size_t batch) {
  if (runs == 0) throw std::invalid_argument("runs must be at least 1");
  const std::size_t n = trials.x.rows();
  std::vector<double> bounds(n, 0.0);
  for (std::size_t lo = 0; lo < n; lo += batch) {
    const std::size_t hi = std::min(n, lo + batch);
    const Tensor x = trials.x.rows_slice(lo, hi);
    const Tensor known = trials.known.rows_slice(lo, hi);
    Tensor missing(known.rows(), known.cols());
    for (std::size_t i = 0; i < known.size(); ++i) missing[i] = 1.0 - known[i];
    for (std::size_t k = 0; k < runs; ++k) {
      NoiseSource noise(seed, iota_ids(lo, hi), kVaeTag + k);
      const auto imp = models::vae_impute(vae, x, known, steps, noise);
      const Tensor nll = dist::bernoulli_nll_probs(imp.imputation, x, missing);
      for (std::size_t r = 0; r < nll.rows(); ++r) bounds[lo + r] += nll(r, 0) / static_cast<double>(runs);
    }
  }
  return make_report("vae_imp", mask_name, steps, runs, trials, std::move(bounds));
}

EvalReport score_template(const Tensor& train, const Trials& trials, const std::string& mask_name,
                          models::TemplateMode mode) {
  const Tensor imp = models::template_match(train, trials.x, trials.known, mode);
  Tensor missing(trials.known.rows(), trials.known.cols());
  for (std::size_t i = 0; i < missing.size(); ++i) missing[i] = 1.0 - trials.known[i];
  const Tensor nll = dist::bernoulli_nll_probs(imp, trials.x, missing);
  return make_report(mode == models::TemplateMode::honest ? "template_honest" : "template_oracle", mask_name, 0, 1,
                     trials, nll.vec());
}

double log_sum_exp(const std::vector<double>& v) {
  if (v.empty()) return -std::numeric_limits<double>::infinity();
  const double m = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

Tensor iwae_bound(const models::Model& model, const Tensor& x, const Tensor& known, std::size_t K,
                  std::uint64_t seed, const std::vector<std::uint64_t>& row_ids) {
  if (K == 0) throw std::invalid_argument("K must be at least 1");
  const std::size_t b = x.rows();
  std::vector<std::vector<double>> logw(b, std::vector<double>(K));
  for (std::size_t k = 0; k < K; ++k) {
    ad::Tape tape;
    NoiseSource noise(seed, row_ids, k);
    const auto traj = model.rollout(tape, x, known, models::Policy::guide, noise);
    for (std::size_t r = 0; r < b; ++r) {
      double lw = -traj.terminal_nll.value()(r, 0);
      for (const auto& lr : traj.log_ratio) lw += lr.value()(r, 0);
      logw[r][k] = lw;
    }
  }
  Tensor out(b, 1);
  const double log_k = std::log(static_cast<double>(K));
  for (std::size_t r = 0; r < b; ++r) out(r, 0) = -(log_sum_exp(logw[r]) - log_k);
  return out;
}

std::string step_sweep(const std::vector<SweepEntry>& entries, const Trials& trials, const std::string& mask_name,
                       std::size_t samples, std::uint64_t seed) {
  if (entries.empty()) throw std::invalid_argument("step sweep needs at least one (model, T) entry");
  std::string out = std::string(kReportHeader) + "\n";
  for (const auto& e : entries) {
    if (e.instance == nullptr) {
      throw std::invalid_argument("missing model for sweep cell " + e.model + " T=" + std::to_string(e.T));
    }
    auto rep = score_imputer(*e.instance, trials, mask_name, samples, seed);
    rep.model = e.model;
    rep.T = e.T;
    out += rep.csv_row() + "\n";
  }
  return out;
}

void dump_grid(const Tensor& tiles, const GridLayout& layout, PixelScale scale, const std::filesystem::path& path) {
  const std::size_t th = layout.tile_height;
  const std::size_t tw = layout.tile_width;
  if (tiles.cols() != th * tw) {
    throw ShapeError("tiles have " + std::to_string(tiles.cols()) + " pixels, layout expects " +
                     std::to_string(th) + "x" + std::to_string(tw));
  }
  if (tiles.rows() > layout.rows * layout.cols) {
    throw std::invalid_argument(std::to_string(tiles.rows()) + " tiles do not fit a " + std::to_string(layout.rows) +
                                "x" + std::to_string(layout.cols) + " grid");
  }
  const std::size_t H = (th + 1) * layout.rows + 1;
  const std::size_t W = (tw + 1) * layout.cols + 1;
  std::vector<unsigned char> img(H * W, 128);
  for (std::size_t k = 0; k < tiles.rows(); ++k) {
    const std::size_t oy = (k / layout.cols) * (th + 1) + 1;
    const std::size_t ox = (k % layout.cols) * (tw + 1) + 1;
    for (std::size_t y = 0; y < th; ++y) {
      for (std::size_t x = 0; x < tw; ++x) {
        double v = tiles(k, y * tw + x);
        if (scale == PixelScale::pre_sigmoid) v = kernels::sigmoid(v);
        img[(oy + y) * W + ox + x] = quantize(v);
      }
    }
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "P5\n" << W << " " << H << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.data()), static_cast<std::streamsize>(img.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

Pgm read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string magic;
  int maxval = 0;
  Pgm p;
  in >> magic >> p.width >> p.height >> maxval;
  if (magic != "P5" || maxval != 255 || !in) throw std::runtime_error("not an 8-bit P5 PGM: " + path.string());
  in.get();
  p.pixels.resize(p.width * p.height);
  if (!in.read(reinterpret_cast<char*>(p.pixels.data()), static_cast<std::streamsize>(p.pixels.size()))) {
    throw std::runtime_error("truncated PGM: " + path.string());
  }
  return p;
}

}  // namespace seqimpute::eval
