#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "seqimpute/data.hpp"
#include "seqimpute/models.hpp"

namespace seqimpute::eval {

struct MeanSE {
  double mean = 0.0;
  double se = 0.0;
};
// Sample mean and standard error (n - 1 denominator; se = 0 for n < 2).
MeanSE mean_se(const std::vector<double>& v);

// Test trials shared by every scorer so that methods see identical (x, m).
struct Trials {
  std::vector<std::size_t> rows;  // test-set row per trial
  Tensor x;                       // (trials, D)
  Tensor known;                   // (trials, D); every row has a missing pixel
  std::vector<double> missing;    // missing-pixel count per trial
};

// Rows cycle through fresh permutations of the test split; masks whose
// missing set is empty are redrawn.
Trials make_trials(const data::Dataset& test, const data::MaskSpec& mask, std::size_t trials, std::uint64_t seed);

struct EvalReport {
  std::string model;
  std::string mask;
  std::size_t T = 0;
  std::size_t samples = 0;
  std::size_t trials = 0;
  std::vector<double> bounds;  // nats per trial
  std::vector<double> scores;  // bounds / missing count
  double mean_score = 0.0;
  double stderr_score = 0.0;

  std::string csv_row() const;
};

inline constexpr const char* kReportHeader = "model,mask,T,samples,trials,mean_score,stderr";

EvalReport make_report(std::string model, std::string mask, std::size_t T, std::size_t samples,
                       const Trials& trials, std::vector<double> bounds);

// Variational bound averaged over `samples` guided roll-outs per trial,
// normalized per imputed pixel. Trial i uses noise stream (seed, i, sample).
EvalReport score_imputer(const models::Model& model, const Trials& trials, const std::string& mask_name,
                         std::size_t samples, std::uint64_t seed, std::size_t batch = 100);

// Expected NLL of VAE imputations over `runs` independent runs.
EvalReport score_vae(const models::VAEModel& vae, const Trials& trials, const std::string& mask_name,
                     std::size_t steps, std::size_t runs, std::uint64_t seed, std::size_t batch = 100);

// NLL of template-matching imputations (clamped probabilities).
EvalReport score_template(const Tensor& train, const Trials& trials, const std::string& mask_name,
                          models::TemplateMode mode);

// Importance-weighted bound with q as proposal:
// -log (1/K) sum_k exp(-nll_k + sum_t [log p(z_t) - log q(z_t)]), per row.
// Sample k of row r draws noise from stream (seed, row_ids[r], k).
Tensor iwae_bound(const models::Model& model, const Tensor& x, const Tensor& known, std::size_t K,
                  std::uint64_t seed, const std::vector<std::uint64_t>& row_ids);

// log(sum exp(v)) with the max factored out.
double log_sum_exp(const std::vector<double>& v);

struct SweepEntry {
  std::string model;
  std::size_t T = 0;
  const models::Model* instance = nullptr;
};

// One report row per entry, as CSV text with header.
std::string step_sweep(const std::vector<SweepEntry>& entries, const Trials& trials, const std::string& mask_name,
                       std::size_t samples, std::uint64_t seed);

struct GridLayout {
  std::size_t rows = 1;
  std::size_t cols = 1;
  std::size_t tile_height = 28;
  std::size_t tile_width = 28;
};

enum class PixelScale { pre_sigmoid, unit };

// 8-bit P5 PGM of tiles (one per row of `tiles`) laid out row-major with
// 1-pixel separators of value 128. Values are squashed with a sigmoid when
// pre_sigmoid, then mapped to floor(255 v + 0.5) clamped to [0, 255].
void dump_grid(const Tensor& tiles, const GridLayout& layout, PixelScale scale, const std::filesystem::path& path);

struct Pgm {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<unsigned char> pixels;
};
Pgm read_pgm(const std::filesystem::path& path);

}  // namespace seqimpute::eval
