#include <cmath>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "helpers.hpp"
#include "seqimpute/training.hpp"

using namespace seqimpute;
using ad::Tape;
using training::TrainConfig;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Eight binary 3x3 patterns.
data::Dataset toy_set() {
  data::Dataset ds;
  ds.width = ds.height = 3;
  ds.domain = data::PixelDomain::binary;
  ds.images = Tensor(8, 9);
  const int rows[8][9] = {{1, 1, 1, 0, 0, 0, 0, 0, 0}, {0, 0, 0, 1, 1, 1, 0, 0, 0}, {0, 0, 0, 0, 0, 0, 1, 1, 1},
                          {1, 0, 0, 1, 0, 0, 1, 0, 0}, {0, 1, 0, 0, 1, 0, 0, 1, 0}, {0, 0, 1, 0, 0, 1, 0, 0, 1},
                          {1, 0, 0, 0, 1, 0, 0, 0, 1}, {0, 0, 1, 0, 1, 0, 1, 0, 0}};
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t c = 0; c < 9; ++c) ds.images(r, c) = rows[r][c];
  return ds;
}

TrainConfig toy_config(const std::string& model = "gpsi_add") {
  TrainConfig cfg;
  cfg.model.model = model;
  cfg.model.dim = 9;
  cfg.model.T = 2;
  cfg.model.width = 6;
  cfg.model.hidden = 16;
  cfg.model.layers = 1;
  cfg.model.z_dim = 4;
  cfg.model.z0_dim = 3;
  cfg.mask = "mcar45";
  cfg.batch_size = 6;  // not a divisor of 8: exercises wrap-around reshuffling
  cfg.learning_rate = 0.01;
  cfg.updates = 50;
  cfg.valid_every = 20;
  cfg.valid_size = 8;
  return cfg;
}

}  // namespace

TEST_SUITE("training") {

TEST_CASE("config keys and validation") {
  TrainConfig cfg;
  cfg.set("T", "3");
  cfg.set("learning_rate", "0.001");
  cfg.set("mask", "MAR-14");
  CHECK(cfg.model.T == 3);
  CHECK(cfg.learning_rate == 0.001);
  CHECK_THROWS_AS(cfg.set("nope", "1"), config::ConfigError);
  CHECK_THROWS_AS(cfg.set("mask", "bogus"), config::ConfigError);
  CHECK(TrainConfig::from_kv(cfg.to_kv()).to_kv() == cfg.to_kv());
  CHECK_NOTHROW(cfg.validate());
  cfg.mask = "mcar0";
  CHECK_THROWS_AS(cfg.validate(), config::ConfigError);
  cfg.mask = "mcar80";
  cfg.model.model = "gen_add";
  CHECK_THROWS_AS(cfg.validate(), config::ConfigError);
  cfg.mask = "MCAR-100";
  CHECK_NOTHROW(cfg.validate());
  cfg.lambda = -1;
  CHECK_THROWS_AS(cfg.validate(), config::ConfigError);
}

TEST_CASE("lstm imputers default to 16 steps unless T is given") {
  TrainConfig a;
  a.set("model", "lstm_add");
  CHECK(a.model.T == 16);
  a.set("model", "gpsi_jump");
  CHECK(a.model.T == 6);
  CHECK(TrainConfig::from_kv(TrainConfig{}.to_kv()).model.T == 6);
  TrainConfig b;
  b.set("T", "3");
  b.set("model", "lstm_jump");
  CHECK(b.model.T == 3);
  TrainConfig c;
  c.set("model", "lstm_add");
  c.set("T", "4");
  CHECK(c.model.T == 4);
  CHECK(TrainConfig::from_kv(c.to_kv()).model.T == 4);
}

TEST_CASE("free energy assembly") {
  models::ModelSpec s = toy_config().model;
  for (const char* name : {"gpsi_add", "lstm_jump", "gen_add", "vae"}) {
    CAPTURE(name);
    s.model = name;
    auto m = models::make_model(s);
    Tensor x = testutil::random_tensor(3, 9, 1, 0, 1);
    Rng rng(2);
    Tensor known = m->conditional() ? data::sample_mcar(3, 9, 45, rng).known : Tensor(3, 9);
    Tape tape;
    NoiseSource noise(1, 3);
    auto t = m->rollout(tape, x, known, models::Policy::guide, noise);
    Tensor fe = training::free_energy(t, 1.0).value();
    Tensor kl = t.step_kl_table();
    for (std::size_t r = 0; r < 3; ++r) {
      double parts = t.terminal_nll.value()(r, 0);
      for (std::size_t k = 0; k < kl.cols(); ++k) parts += kl(r, k);
      CHECK(std::abs(fe(r, 0) - parts) < 1e-10);
    }
    CHECK(training::free_energy(t, 0.0).value() == t.terminal_nll.value());
    Tensor half = training::free_energy(t, 0.5).value();
    for (std::size_t r = 0; r < 3; ++r)
      CHECK(half(r, 0) == doctest::Approx(t.terminal_nll.value()(r, 0) + 0.5 * t.kl_sum().value()(r, 0)));

    Tape pt;
    NoiseSource pn(1, 3);
    auto prior = m->rollout(pt, x, known, models::Policy::primary, pn);
    CHECK_THROWS_AS(training::free_energy(prior, 1.0), ad::ContractError);
  }
}

TEST_CASE("free energy with all-zero KLs is the terminal NLL") {
  auto m = models::make_model(toy_config().model);
  for (auto& p : m->store())
    if (p.name.rfind("gpsi.p.", 0) == 0) m->store().at("gpsi.q." + p.name.substr(7)).value = p.value;
  Tensor x(2, 9, 1.0);
  Tensor known(2, 9, 1.0);
  known[0] = known[10] = 0.0;
  x[0] = x[10] = 0.0;
  Tape tape;
  NoiseSource noise(1, 2);
  auto t = m->rollout(tape, x, known, models::Policy::guide, noise);
  CHECK(training::free_energy(t, 1.0).value() == t.terminal_nll.value());
}

TEST_CASE("adam examples") {
  nn::ParameterStore store(1);
  auto& p = store.add_constant("w", 1, 1, 0.5, ad::Role::primary);
  training::AdamState st;
  ad::GradientMap zero{{&p, Tensor{{0.0}}}};
  training::adam_step(store, zero, st, 0.1);
  CHECK(p.value.item() == 0.5);

  training::AdamState fresh;
  ad::GradientMap one{{&p, Tensor{{1.0}}}};
  training::adam_step(store, one, fresh, 0.1);
  CHECK(p.value.item() == doctest::Approx(0.5 - 0.1).epsilon(1e-7));
  CHECK(std::abs(p.value.item() - (0.5 - 0.1 / (1.0 + 1e-8))) < 1e-15);
}

TEST_CASE("adam matches an independent 100-step trace") {
  nn::ParameterStore store(1);
  auto& p = store.add_constant("w", 1, 3, 0.0, ad::Role::primary);
  p.value = Tensor{{1.0, -2.0, 0.5}};
  training::AdamState st;
  double theta[3] = {1.0, -2.0, 0.5}, m[3] = {}, v[3] = {};
  for (int t = 1; t <= 100; ++t) {
    ad::GradientMap g;
    Tensor gt(1, 3);
    for (int i = 0; i < 3; ++i) gt[i] = 2.0 * theta[i] * (1.0 + 0.3 * std::sin(t + i)) + 0.01 * (t % 7);
    g[&p] = gt;
    REQUIRE(training::adam_step(store, g, st, 0.05));
    for (int i = 0; i < 3; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * gt[i];
      v[i] = 0.999 * v[i] + 0.001 * gt[i] * gt[i];
      const double mh = m[i] / (1.0 - std::pow(0.9, t));
      const double vh = v[i] / (1.0 - std::pow(0.999, t));
      theta[i] -= 0.05 * mh / (std::sqrt(vh) + 1e-8);
    }
  }
  for (int i = 0; i < 3; ++i) CHECK(std::abs(p.value[i] - theta[i]) < 1e-12);
  CHECK(st.t == 100);
}

TEST_CASE("adam skips non-finite gradients and honours role filters") {
  nn::ParameterStore store(1);
  auto& a = store.add_constant("a", 1, 1, 1.0, ad::Role::primary);
  auto& b = store.add_constant("b", 1, 1, 1.0, ad::Role::guide);
  training::AdamState st;
  ad::GradientMap bad{{&a, Tensor{{std::nan("")}}}, {&b, Tensor{{1.0}}}};
  CHECK_FALSE(training::adam_step(store, bad, st, 0.1));
  CHECK(st.skipped == 1);
  CHECK(st.t == 0);
  CHECK(a.value.item() == 1.0);
  CHECK(b.value.item() == 1.0);
  ad::GradientMap good{{&a, Tensor{{1.0}}}, {&b, Tensor{{1.0}}}};
  CHECK(training::adam_step(store, good, st, 0.1, ad::Role::guide));
  CHECK(a.value.item() == 1.0);
  CHECK(b.value.item() < 1.0);
}

TEST_CASE("global norm clipping") {
  nn::ParameterStore store(1);
  auto& a = store.add_constant("a", 1, 2, 0.0, ad::Role::primary);
  auto& b = store.add_constant("b", 1, 1, 0.0, ad::Role::guide);
  ad::GradientMap g{{&a, Tensor{{3.0, 0.0}}}, {&b, Tensor{{4.0}}}};
  CHECK(training::global_norm(store, g) == 5.0);
  CHECK(training::global_norm(store, g, ad::Role::guide) == 4.0);
  CHECK(training::clip_global_norm(store, g, 10.0) == 5.0);
  CHECK(g.at(&a)[0] == 3.0);
  CHECK(training::clip_global_norm(store, g, 1.0) == 5.0);
  CHECK(g.at(&a)[0] == doctest::Approx(0.6));
  CHECK(g.at(&b)[0] == doctest::Approx(0.8));
}

TEST_CASE("smoke run lowers the smoothed free energy") {
  auto cfg = toy_config();
  auto ds = toy_set();
  auto m = models::make_model(cfg.model);
  auto res = training::train(*m, cfg, ds, &ds);
  REQUIRE(res.train_fe.size() == 50);
  double initial = 0.0;
  for (std::size_t i = 0; i < 5; ++i) initial += res.train_fe[i] / 5.0;
  double ema = initial;
  for (std::size_t i = 5; i < res.train_fe.size(); ++i) ema = 0.9 * ema + 0.1 * res.train_fe[i];
  CHECK(ema < initial);
  CHECK(res.valid_fe.size() == 3);
  CHECK(res.valid_fe.back().first == 50);
}

TEST_CASE("nan gradient injection skips one update and the run continues") {
  auto cfg = toy_config();
  cfg.updates = 10;
  auto ds = toy_set();
  auto m = models::make_model(cfg.model);
  training::TrainOptions opts;
  std::uint64_t before = 0, after = 0;
  opts.grad_hook = [&](std::size_t u, ad::GradientMap& g) {
    if (u == 4) {
      g.begin()->second[0] = std::nan("");
      before = m->store().hash();
    }
    if (u == 5) after = m->store().hash();
  };
  auto res = training::train(*m, cfg, ds, nullptr, opts);
  CHECK(res.skipped == 1);
  CHECK(res.updates == 10);
  CHECK(before == after);
  for (const auto& p : m->store()) CHECK(all_finite(p.value));
}

TEST_CASE("metrics are reproducible and independent of the worker count") {
  auto cfg = toy_config("lstm_add");
  cfg.updates = 12;
  cfg.valid_every = 5;
  cfg.shard_size = 2;
  auto ds = toy_set();
  auto dir = testutil::temp_dir("repro");
  std::string runs[3];
  std::uint64_t hashes[3];
  const std::size_t workers[3] = {1, 1, 3};
  for (int i = 0; i < 3; ++i) {
    auto m = models::make_model(cfg.model);
    training::TrainOptions opts;
    opts.out_dir = dir / std::to_string(i);
    opts.workers = workers[i];
    training::train(*m, cfg, ds, &ds, opts);
    runs[i] = slurp(opts.out_dir / "metrics.csv");
    hashes[i] = m->store().hash();
    CHECK(std::filesystem::exists(opts.out_dir / "best.sqim"));
    CHECK(std::filesystem::exists(opts.out_dir / "final.sqim"));
  }
  CHECK(runs[0] == runs[1]);
  CHECK(runs[0] == runs[2]);
  CHECK(hashes[0] == hashes[2]);
  CHECK(runs[0].rfind(std::string(training::kMetricsHeader) + "\n", 0) == 0);
  // 12 data rows; validation rows carry a value, the others an empty cell.
  std::istringstream lines(runs[0]);
  std::string line;
  std::getline(lines, line);
  int rows = 0, with_valid = 0;
  while (std::getline(lines, line)) {
    ++rows;
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (line.back() == ',') cells.push_back("");
    REQUIRE(cells.size() == 7);
    if (!cells[2].empty()) ++with_valid;
  }
  CHECK(rows == 12);
  CHECK(with_valid == 3);
}

TEST_CASE("sharded gradients equal the whole-batch gradients up to summation order") {
  auto cfg = toy_config("gpsi_jump");
  auto m = models::make_model(cfg.model);
  auto ds = toy_set();
  Rng rng(3);
  Tensor known = data::sample_mcar(8, 9, 45, rng).known;
  std::vector<std::uint64_t> ids{0, 1, 2, 3, 4, 5, 6, 7};
  auto whole = training::batch_gradients(*m, ds.images, known, 1.0, 9, ids, 0, 0, 1);
  auto parts = training::batch_gradients(*m, ds.images, known, 1.0, 9, ids, 0, 3, 2);
  CHECK(whole.fe == doctest::Approx(parts.fe).epsilon(1e-12));
  for (const auto& p : m->store()) {
    const Tensor& a = whole.grads.at(&p);
    const Tensor& b = parts.grads.at(&p);
    for (std::size_t i = 0; i < a.size(); ++i) REQUIRE(std::abs(a[i] - b[i]) < 1e-12);
  }
}

TEST_CASE("guide fine-tuning leaves primary parameters bitwise unchanged") {
  auto cfg = toy_config("lstm_add");
  auto ds = toy_set();
  auto m = models::make_model(cfg.model);
  training::train(*m, cfg, ds, nullptr);
  const auto primary = m->store().hash(ad::Role::primary);
  const auto guide = m->store().hash(ad::Role::guide);
  const auto all = m->store().hash();

  training::finetune_q(*m, cfg, ds, 0);
  CHECK(m->store().hash() == all);

  training::finetune_q(*m, cfg, ds, 20);
  CHECK(m->store().hash(ad::Role::primary) == primary);
  CHECK(m->store().hash(ad::Role::guide) != guide);
}

TEST_CASE("validation free energy is deterministic") {
  auto cfg = toy_config();
  auto ds = toy_set();
  auto m = models::make_model(cfg.model);
  auto mask = data::MaskSpec::parse("mcar45");
  const double a = training::validation_fe(*m, ds, mask, 8, 3, 4);
  CHECK(a == training::validation_fe(*m, ds, mask, 8, 5, 4));
  CHECK(a != training::validation_fe(*m, ds, mask, 8, 3, 5));
}

TEST_CASE("training rejects mismatched data") {
  auto cfg = toy_config();
  auto m = models::make_model(cfg.model);
  data::Dataset empty;
  CHECK_THROWS(training::train(*m, cfg, empty, nullptr));
  data::Dataset wide;
  wide.images = Tensor(4, 16);
  wide.width = wide.height = 4;
  CHECK_THROWS_AS(training::train(*m, cfg, wide, nullptr), ShapeError);
}

}  // TEST_SUITE
