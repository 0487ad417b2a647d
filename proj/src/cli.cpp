#include "seqimpute/cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "seqimpute/config.hpp"
#include "seqimpute/data.hpp"
#include "seqimpute/eval.hpp"
#include "seqimpute/models.hpp"
#include "seqimpute/toyprocess.hpp"
#include "seqimpute/training.hpp"

namespace seqimpute::cli {

namespace fs = std::filesystem;
using config::ConfigError;
using config::KeyValues;

namespace {

// Flags shared by every verb.
struct Common {
  std::string config_path;
  std::string out = "out";
  std::optional<std::uint64_t> seed;
  std::size_t workers = 1;
  std::string data_dir;
  std::string checkpoint;
  std::string dataset;
  std::string mask;
  std::vector<std::string> overrides;
};

// Verb settings with fixed keys and defaults; unknown keys are rejected.
class Settings {
 public:
  explicit Settings(KeyValues defaults) : kv_(std::move(defaults)) {}

  bool has(const std::string& key) const {
    for (const auto& [k, v] : kv_)
      if (k == key) return true;
    return false;
  }
  void set(const std::string& key, const std::string& value) {
    for (auto& [k, v] : kv_) {
      if (k == key) {
        v = value;
        return;
      }
    }
    throw ConfigError("unknown config key '" + key + "'");
  }
  const std::string& str(const std::string& key) const {
    for (const auto& [k, v] : kv_)
      if (k == key) return v;
    throw ConfigError("missing config key '" + key + "'");
  }
  std::size_t size(const std::string& key) const { return config::to_size(key, str(key)); }
  std::uint64_t u64(const std::string& key) const { return config::to_u64(key, str(key)); }
  double dbl(const std::string& key) const { return config::to_double(key, str(key)); }
  const KeyValues& kv() const { return kv_; }

 private:
  KeyValues kv_;
};

// Config file entries followed by command-line overrides.
KeyValues gather(const Common& c) {
  KeyValues kv;
  if (!c.config_path.empty()) kv = config::read_file(c.config_path);
  for (const auto& o : c.overrides) kv.push_back(config::parse_override(o));
  return kv;
}

void write_run_txt(const fs::path& out, const std::string& verb, const KeyValues& kv) {
  fs::create_directories(out);
  std::ofstream f(out / "run.txt", std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + (out / "run.txt").string());
  f << "# seqimpute " << verb << "\n" << config::to_text(kv);
}

data::DatasetSplits load_data(const std::string& name, const Common& c, bool binarize) {
  auto s = data::load_named(name, data::resolve_data_dir(c.data_dir));
  if (binarize) {
    s.train = data::binarize(s.train);
    s.valid = data::binarize(s.valid);
    s.test = data::binarize(s.test);
  }
  return s;
}

const data::Dataset& pick_split(const data::DatasetSplits& s, const std::string& split) {
  if (split == "train") return s.train;
  if (split == "valid") return s.valid;
  if (split == "test") return s.test;
  throw ConfigError("split must be train, valid or test, got '" + split + "'");
}

data::MaskSpec parse_mask(const std::string& s) {
  try {
    return data::MaskSpec::parse(s);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

// Settings from the checkpoint's training metadata, when present.
std::string meta_value(const KeyValues& meta, const std::string& key, const std::string& fallback) {
  std::string v = fallback;
  for (const auto& [k, val] : meta)
    if (k == key) v = val;
  return v;
}

int cmd_train(const Common& c) {
  training::TrainConfig cfg;
  for (const auto& [k, v] : gather(c)) cfg.set(k, v);
  if (c.seed) cfg.seed = *c.seed;
  if (!c.dataset.empty()) cfg.dataset = c.dataset;
  if (!c.mask.empty()) cfg.set("mask", c.mask);
  cfg.validate();
  auto data = load_data(cfg.dataset, c, cfg.binarize);
  cfg.model.dim = data.train.dim();
  cfg.validate();
  write_run_txt(c.out, "train", cfg.to_kv());
  auto model = models::make_model(cfg.model);
  training::TrainOptions opts;
  opts.out_dir = c.out;
  opts.workers = c.workers;
  opts.verbose = true;
  const auto res = training::train(*model, cfg, data.train, &data.valid, opts);
  std::printf("trained %s for %zu updates (%zu skipped); best valid free energy %.4f\n", cfg.model.model.c_str(),
              res.updates, res.skipped, res.best_valid);
  return kExitOk;
}

int cmd_finetune(const Common& c) {
  KeyValues kv = gather(c);
  std::string checkpoint = c.checkpoint;
  std::string split = "valid";
  KeyValues rest;
  for (const auto& [k, v] : kv) {
    if (k == "checkpoint") {
      checkpoint = v;
    } else if (k == "split") {
      split = v;
    } else {
      rest.emplace_back(k, v);
    }
  }
  if (!c.checkpoint.empty()) checkpoint = c.checkpoint;
  if (checkpoint.empty()) throw ConfigError("finetune needs --checkpoint");
  auto ck = models::load_checkpoint(checkpoint);
  training::TrainConfig cfg;
  for (const auto& [k, v] : ck.meta) cfg.set(k, v);
  cfg.updates = 1000;
  for (const auto& [k, v] : rest) cfg.set(k, v);
  if (c.seed) cfg.seed = *c.seed;
  cfg.validate();
  KeyValues echo{{"checkpoint", checkpoint}, {"split", split}};
  for (const auto& e : cfg.to_kv()) echo.push_back(e);
  write_run_txt(c.out, "finetune", echo);

  auto data = load_data(cfg.dataset, c, cfg.binarize);
  const auto& set = pick_split(data, split);
  const auto mask = parse_mask(cfg.mask);
  const double before = training::validation_fe(*ck.model, set, mask, set.size(), cfg.batch_size, cfg.seed);
  training::TrainOptions opts;
  opts.out_dir = c.out;
  opts.workers = c.workers;
  opts.verbose = true;
  training::finetune_q(*ck.model, cfg, set, cfg.updates, opts);
  const double after = training::validation_fe(*ck.model, set, mask, set.size(), cfg.batch_size, cfg.seed);
  std::ofstream f(fs::path(c.out) / "finetune.csv", std::ios::trunc);
  f << "stage,split,mean_fe\nraw," << split << "," << config::format_double(before) << "\nfinetuned," << split << ","
    << config::format_double(after) << "\n";
  std::printf("%s bound: raw %.4f -> fine-tuned %.4f\n", split.c_str(), before, after);
  return kExitOk;
}

int cmd_eval(const Common& c) {
  Settings s({{"checkpoint", c.checkpoint},
              {"dataset", ""},
              {"split", "test"},
              {"mask", ""},
              {"trials", "2000"},
              {"samples", "1"},
              {"seed", "1"}});
  for (const auto& [k, v] : gather(c)) s.set(k, v);
  if (!c.checkpoint.empty()) s.set("checkpoint", c.checkpoint);
  if (!c.dataset.empty()) s.set("dataset", c.dataset);
  if (!c.mask.empty()) s.set("mask", c.mask);
  if (c.seed) s.set("seed", std::to_string(*c.seed));
  if (s.str("checkpoint").empty()) throw ConfigError("eval needs --checkpoint");
  auto ck = models::load_checkpoint(s.str("checkpoint"));
  if (s.str("dataset").empty()) s.set("dataset", meta_value(ck.meta, "dataset", "mnist5k"));
  if (s.str("mask").empty()) s.set("mask", meta_value(ck.meta, "mask", "mcar80"));
  const auto mask = parse_mask(s.str("mask"));
  write_run_txt(c.out, "eval", s.kv());

  auto data = load_data(s.str("dataset"), c, meta_value(ck.meta, "binarize", "false") == "true");
  const auto trials = eval::make_trials(pick_split(data, s.str("split")), mask, s.size("trials"), s.u64("seed"));
  const auto rep = eval::score_imputer(*ck.model, trials, mask.to_string(), s.size("samples"), s.u64("seed"));
  std::ofstream f(fs::path(c.out) / "report.csv", std::ios::trunc);
  f << eval::kReportHeader << "\n" << rep.csv_row() << "\n";
  std::printf("%s\n%s\n", eval::kReportHeader, rep.csv_row().c_str());
  return kExitOk;
}

int cmd_impute(const Common& c) {
  Settings s({{"checkpoint", c.checkpoint}, {"mask", ""}, {"count", "8"}, {"samples", "4"}, {"seed", "1"}});
  for (const auto& [k, v] : gather(c)) s.set(k, v);
  if (!c.checkpoint.empty()) s.set("checkpoint", c.checkpoint);
  if (!c.mask.empty()) s.set("mask", c.mask);
  if (c.seed) s.set("seed", std::to_string(*c.seed));
  if (s.str("checkpoint").empty()) throw ConfigError("impute needs --checkpoint");
  auto ck = models::load_checkpoint(s.str("checkpoint"));
  if (s.str("mask").empty()) s.set("mask", meta_value(ck.meta, "mask", "mcar80"));
  const auto mask = parse_mask(s.str("mask"));
  write_run_txt(c.out, "impute", s.kv());

  auto data = load_data(meta_value(ck.meta, "dataset", "mnist5k"), c,
                        meta_value(ck.meta, "binarize", "false") == "true");
  const auto trials = eval::make_trials(data.test, mask, s.size("count"), s.u64("seed"));
  const auto res = models::impute(*ck.model, trials.x, trials.known, s.size("samples"), s.u64("seed"));
  const std::size_t n = trials.x.rows();
  const std::size_t d = trials.x.cols();

  // Rows: original, observed (missing shown mid-grey), imputation.
  Tensor grid(3 * n, d);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t i = 0; i < d; ++i) {
      grid(r, i) = trials.x(r, i);
      grid(n + r, i) = trials.known(r, i) != 0.0 ? trials.x(r, i) : 0.5;
      grid(2 * n + r, i) = res.imputation(r, i);
    }
  }
  const fs::path out(c.out);
  eval::dump_grid(grid, {3, n, data.test.height, data.test.width}, eval::PixelScale::unit, out / "imputation.pgm");
  Tensor steps(res.canvases.size(), d);
  for (std::size_t t = 0; t < res.canvases.size(); ++t)
    for (std::size_t i = 0; i < d; ++i) steps(t, i) = res.canvases[t](0, i);
  eval::dump_grid(steps, {1, res.canvases.size(), data.test.height, data.test.width}, eval::PixelScale::pre_sigmoid,
                  out / "canvases.pgm");
  std::ofstream f(out / "impute.csv", std::ios::trunc);
  f << "trial,test_row,missing,nll_per_pixel\n";
  for (std::size_t r = 0; r < n; ++r) {
    f << r << "," << trials.rows[r] << "," << trials.missing[r] << ","
      << config::format_double(res.nll_per_pixel(r, 0)) << "\n";
  }
  std::printf("wrote %s\n", (out / "imputation.pgm").string().c_str());
  return kExitOk;
}

int cmd_sample(const Common& c) {
  Settings s({{"checkpoint", c.checkpoint}, {"count", "16"}, {"columns", "8"}, {"seed", "1"}});
  for (const auto& [k, v] : gather(c)) s.set(k, v);
  if (!c.checkpoint.empty()) s.set("checkpoint", c.checkpoint);
  if (c.seed) s.set("seed", std::to_string(*c.seed));
  if (s.str("checkpoint").empty()) throw ConfigError("sample needs --checkpoint");
  auto ck = models::load_checkpoint(s.str("checkpoint"));
  if (ck.model->conditional()) throw ConfigError("sample needs an unconditional model (gen_add, gen_jump or vae)");
  write_run_txt(c.out, "sample", s.kv());
  const std::size_t n = s.size("count");
  const std::size_t d = ck.model->spec().dim;
  const Tensor blank(n, d);
  ad::Tape tape;
  NoiseSource noise(s.u64("seed"), n);
  const auto traj = ck.model->rollout(tape, blank, blank, models::Policy::primary, noise);
  const std::size_t cols = std::max<std::size_t>(1, s.size("columns"));
  const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(d))));
  if (side * side != d) throw ConfigError("sample grids need square images");
  eval::dump_grid(traj.final_probs(), {(n + cols - 1) / cols, cols, side, side}, eval::PixelScale::unit,
                  fs::path(c.out) / "samples.pgm");
  std::printf("wrote %s\n", (fs::path(c.out) / "samples.pgm").string().c_str());
  return kExitOk;
}

int cmd_sweep(const Common& c) {
  Settings s({{"checkpoints", c.checkpoint}, {"dataset", ""}, {"mask", ""}, {"trials", "2000"}, {"samples", "1"},
              {"seed", "1"}});
  for (const auto& [k, v] : gather(c)) s.set(k, v);
  if (!c.checkpoint.empty()) s.set("checkpoints", c.checkpoint);
  if (!c.mask.empty()) s.set("mask", c.mask);
  if (!c.dataset.empty()) s.set("dataset", c.dataset);
  if (c.seed) s.set("seed", std::to_string(*c.seed));
  std::vector<std::string> paths;
  std::stringstream ss(s.str("checkpoints"));
  for (std::string p; std::getline(ss, p, ',');)
    if (!p.empty()) paths.push_back(p);
  if (paths.empty()) throw ConfigError("sweep needs checkpoints=a.sqim,b.sqim,...");
  std::vector<models::LoadedCheckpoint> loaded;
  for (const auto& p : paths) {
    if (!fs::exists(p)) throw std::runtime_error("missing checkpoint for sweep cell: " + p);
    loaded.push_back(models::load_checkpoint(p));
  }
  if (s.str("dataset").empty()) s.set("dataset", meta_value(loaded.front().meta, "dataset", "mnist5k"));
  if (s.str("mask").empty()) s.set("mask", meta_value(loaded.front().meta, "mask", "mcar80"));
  write_run_txt(c.out, "sweep", s.kv());
  const auto mask = parse_mask(s.str("mask"));
  auto data = load_data(s.str("dataset"), c, false);
  const auto trials = eval::make_trials(data.test, mask, s.size("trials"), s.u64("seed"));
  std::vector<eval::SweepEntry> entries;
  for (const auto& l : loaded) entries.push_back({l.model->spec().model, l.model->spec().T, l.model.get()});
  const std::string csv = eval::step_sweep(entries, trials, mask.to_string(), s.size("samples"), s.u64("seed"));
  std::ofstream(fs::path(c.out) / "sweep.csv", std::ios::trunc) << csv;
  std::printf("%s", csv.c_str());
  return kExitOk;
}

int cmd_toy(const Common& c) {
  Settings s({{"T", "20"},
              {"alpha", "0.85"},
              {"hidden", "64"},
              {"layers", "2"},
              {"updates", "3000"},
              {"batch", "128"},
              {"learning_rate", "0.001"},
              {"seed", "1"},
              {"points", "200"},
              {"bound_samples", "64"},
              {"gen_samples", "20000"}});
  for (const auto& [k, v] : gather(c)) s.set(k, v);
  if (c.seed) s.set("seed", std::to_string(*c.seed));
  write_run_txt(c.out, "toy", s.kv());
  const fs::path out(c.out);
  const auto target = toy::ToyTarget::bimodal();
  auto spec = toy::ChainSpec::ornstein_uhlenbeck(s.size("T"), 1, s.dbl("alpha"), s.size("hidden"), s.size("layers"),
                                                 nn::Activation::tanh, s.u64("seed"));
  Rng pre(stream_seed(s.u64("seed"), 1));
  const double tv_before = toy::tv_distance(toy::sample_forward(spec, s.size("gen_samples"), pre), target);
  toy::ToyTrainConfig tc;
  tc.updates = s.size("updates");
  tc.batch = s.size("batch");
  tc.learning_rate = s.dbl("learning_rate");
  tc.seed = s.u64("seed");
  const auto losses = toy::train_forward(spec, target, tc);
  {
    std::ofstream f(out / "loss.csv", std::ios::trunc);
    f << "update,loss\n";
    for (std::size_t i = 0; i < losses.size(); ++i) f << i + 1 << "," << config::format_double(losses[i]) << "\n";
  }
  Rng post(stream_seed(s.u64("seed"), 2));
  const Tensor gen = toy::sample_forward(spec, s.size("gen_samples"), post);
  const double tv_after = toy::tv_distance(gen, target);
  Rng pts(stream_seed(s.u64("seed"), 3));
  const Tensor xs = target.sample(s.size("points"), pts);
  const auto report = toy::verify_bound(spec, xs.vec(), s.size("bound_samples"), pts);
  std::size_t valid = 0;
  {
    std::ofstream f(out / "bound.csv", std::ios::trunc);
    f << "x,bound,bound_se,log_p\n";
    for (const auto& b : report) {
      valid += b.bound - 3.0 * b.bound_se <= b.log_p ? 1 : 0;
      f << config::format_double(b.x) << "," << config::format_double(b.bound) << ","
        << config::format_double(b.bound_se) << "," << config::format_double(b.log_p) << "\n";
    }
  }
  std::printf("tv before %.4f after %.4f; bound within 3 SE of log p at %zu/%zu points\n", tv_before, tv_after, valid,
              report.size());
  return kExitOk;
}

int cmd_baselines(const Common& c) {
  Settings s({{"dataset", "mnist5k"},
              {"mask", "mar16"},
              {"trials", "2000"},
              {"seed", "1"},
              {"vae_checkpoint", ""},
              {"vae_updates", "2000"},
              {"vae_steps", "16"},
              {"vae_runs", "4"},
              {"hidden", "64"},
              {"layers", "2"},
              {"z_dim", "32"},
              {"batch_size", "64"},
              {"learning_rate", "0.001"}});
  for (const auto& [k, v] : gather(c)) s.set(k, v);
  if (!c.dataset.empty()) s.set("dataset", c.dataset);
  if (!c.mask.empty()) s.set("mask", parse_mask(c.mask).to_string());
  if (c.seed) s.set("seed", std::to_string(*c.seed));
  const auto mask = parse_mask(s.str("mask"));
  write_run_txt(c.out, "baselines", s.kv());
  auto data = load_data(s.str("dataset"), c, false);

  std::unique_ptr<models::Model> vae;
  if (!s.str("vae_checkpoint").empty()) {
    vae = models::load_checkpoint(s.str("vae_checkpoint")).model;
  } else {
    training::TrainConfig cfg;
    cfg.set("model", "vae");
    cfg.set("mask", "mcar100");
    cfg.model.dim = data.train.dim();
    for (const char* k : {"hidden", "layers", "z_dim", "batch_size", "learning_rate", "seed"}) cfg.set(k, s.str(k));
    cfg.set("updates", s.str("vae_updates"));
    vae = models::make_model(cfg.model);
    training::TrainOptions opts;
    opts.out_dir = fs::path(c.out) / "vae";
    opts.workers = c.workers;
    opts.verbose = true;
    training::train(*vae, cfg, data.train, &data.valid, opts);
  }
  const auto* v = dynamic_cast<const models::VAEModel*>(vae.get());
  if (v == nullptr) throw ConfigError("vae_checkpoint does not hold a vae model");

  const auto trials = eval::make_trials(data.test, mask, s.size("trials"), s.u64("seed"));
  std::string csv = std::string(eval::kReportHeader) + "\n";
  csv += eval::score_vae(*v, trials, mask.to_string(), s.size("vae_steps"), s.size("vae_runs"), s.u64("seed"))
             .csv_row() +
         "\n";
  csv += eval::score_template(data.train.images, trials, mask.to_string(), models::TemplateMode::honest).csv_row() +
         "\n";
  csv += eval::score_template(data.train.images, trials, mask.to_string(), models::TemplateMode::oracle).csv_row() +
         "\n";
  std::ofstream(fs::path(c.out) / "baselines.csv", std::ios::trunc) << csv;
  std::printf("%s", csv.c_str());
  return kExitOk;
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"seqimpute: sequential imputation with guided policy search"};
  app.require_subcommand(1);
  Common common;
  std::string seed_text;

  struct Verb {
    const char* name;
    const char* help;
    int (*fn)(const Common&);
  };
  const Verb verbs[] = {
      {"train", "train a model", cmd_train},
      {"finetune", "fine-tune the guide policy of a checkpoint", cmd_finetune},
      {"eval", "score a checkpoint on masked test trials", cmd_eval},
      {"impute", "impute masked test images and dump grids", cmd_impute},
      {"sample", "draw samples from an unconditional model", cmd_sample},
      {"sweep", "score checkpoints trained with different step counts", cmd_sweep},
      {"toy", "train and verify the 1D toy diffusion chain", cmd_toy},
      {"baselines", "VAE imputation and template matching scores", cmd_baselines},
  };
  std::vector<std::pair<CLI::App*, int (*)(const Common&)>> subs;
  for (const auto& v : verbs) {
    auto* sub = app.add_subcommand(v.name, v.help);
    sub->add_option("--config", common.config_path, "flat key=value config file");
    sub->add_option("--out", common.out, "output directory");
    sub->add_option("--seed", seed_text, "random seed (overrides config)");
    sub->add_option("--workers", common.workers, "worker threads for minibatch shards")->check(CLI::PositiveNumber);
    sub->add_option("--data-dir", common.data_dir, "dataset directory (default $SEQIMPUTE_DATA, then ./data)");
    sub->add_option("--checkpoint", common.checkpoint, "model checkpoint (comma list for sweep)");
    sub->add_option("--dataset", common.dataset, "mnist5k, mnist or binarized_mnist");
    sub->add_option("--mask", common.mask, "mask spec such as mcar80 or mar16");
    sub->add_option("overrides", common.overrides, "key=value config overrides");
    subs.emplace_back(sub, v.fn);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return kExitConfig;
  }

  try {
    if (!seed_text.empty()) common.seed = config::to_u64("seed", seed_text);
    for (const auto& [sub, fn] : subs)
      if (sub->parsed()) return fn(common);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitConfig;
}

int run(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  argv.push_back("seqimpute");
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data());
}

}  // namespace seqimpute::cli
