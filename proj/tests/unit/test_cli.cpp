#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "helpers.hpp"
#include "seqimpute/cli.hpp"
#include "seqimpute/eval.hpp"

using namespace seqimpute;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const std::vector<std::string> kSmallModel{"model=gpsi_add", "T=2",          "width=8",        "hidden=16",
                                           "layers=1",       "z_dim=4",      "z0_dim=3",       "batch_size=16",
                                           "updates=6",      "valid_every=3", "valid_size=20", "learning_rate=0.001"};

std::vector<std::string> with(std::vector<std::string> head, const std::vector<std::string>& tail) {
  head.insert(head.end(), tail.begin(), tail.end());
  return head;
}

// Trains the small model once per process and returns its output directory.
const fs::path& trained() {
  static const fs::path dir = [] {
    auto d = testutil::temp_dir("cli_train") / "nested" / "run";
    const int rc = cli::run(with({"train", "--out", d.string(), "--data-dir", SEQIMPUTE_DATA_DIR}, kSmallModel));
    REQUIRE(rc == cli::kExitOk);
    return d;
  }();
  return dir;
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("argument and config errors exit with code 1") {
  CHECK(cli::run(std::vector<std::string>{}) == cli::kExitConfig);
  CHECK(cli::run({"frobnicate"}) == cli::kExitConfig);
  CHECK(cli::run({"train", "--no-such-flag"}) == cli::kExitConfig);
  auto dir = testutil::temp_dir("cli_err");
  CHECK(cli::run({"train", "--out", dir.string(), "no_such_key=1"}) == cli::kExitConfig);
  CHECK(cli::run({"train", "--out", dir.string(), "updates=many"}) == cli::kExitConfig);
  CHECK(cli::run({"train", "--out", dir.string(), "--mask", "mcar150"}) == cli::kExitConfig);
  CHECK(cli::run({"eval", "--out", dir.string()}) == cli::kExitConfig);
  CHECK(cli::run({"toy", "--out", dir.string(), "gamma=2"}) == cli::kExitConfig);
  CHECK(cli::run({"train", "--config", (dir / "absent.txt").string()}) != cli::kExitOk);
}

TEST_CASE("runtime failures exit with code 2") {
  auto dir = testutil::temp_dir("cli_rt");
  CHECK(cli::run({"eval", "--out", dir.string(), "--checkpoint", (dir / "missing.sqim").string()}) ==
        cli::kExitRuntime);
  CHECK(cli::run({"sweep", "--out", dir.string(), "--checkpoint", (dir / "missing.sqim").string()}) ==
        cli::kExitRuntime);
  CHECK(cli::run({"train", "--out", dir.string(), "--data-dir", (dir / "nodata").string()}) == cli::kExitRuntime);
}

TEST_CASE("train creates the output directory and its artifacts") {
  const auto& d = trained();
  for (const char* f : {"run.txt", "metrics.csv", "final.sqim", "best.sqim"}) {
    CAPTURE(f);
    CHECK(fs::exists(d / f));
  }
  const std::string run = slurp(d / "run.txt");
  CHECK(run.rfind("# seqimpute train\n", 0) == 0);
  CHECK(run.find("width=8\n") != std::string::npos);
}

TEST_CASE("rerunning from run.txt reproduces the metrics bit for bit") {
  const auto& d = trained();
  auto again = testutil::temp_dir("cli_rerun");
  REQUIRE(cli::run({"train", "--config", (d / "run.txt").string(), "--out", again.string(), "--workers", "3",
                    "--data-dir", SEQIMPUTE_DATA_DIR}) == cli::kExitOk);
  CHECK(slurp(again / "metrics.csv") == slurp(d / "metrics.csv"));
  CHECK(slurp(again / "final.sqim") == slurp(d / "final.sqim"));
}

TEST_CASE("eval, impute and finetune run on a trained checkpoint") {
  const auto& d = trained();
  const std::string ck = (d / "final.sqim").string();
  auto out = testutil::temp_dir("cli_use");

  REQUIRE(cli::run({"eval", "--checkpoint", ck, "--out", (out / "eval").string(), "--data-dir", SEQIMPUTE_DATA_DIR,
                    "trials=12", "samples=2"}) == cli::kExitOk);
  const std::string report = slurp(out / "eval" / "report.csv");
  CHECK(report.rfind(std::string(eval::kReportHeader) + "\ngpsi_add,mcar80,2,2,12,", 0) == 0);

  REQUIRE(cli::run({"impute", "--checkpoint", ck, "--out", (out / "imp").string(), "--data-dir", SEQIMPUTE_DATA_DIR,
                    "count=3", "--mask", "mar10"}) == cli::kExitOk);
  auto pgm = eval::read_pgm(out / "imp" / "imputation.pgm");
  CHECK(pgm.width == 3 * 29 + 1);
  CHECK(pgm.height == 3 * 29 + 1);
  auto canv = eval::read_pgm(out / "imp" / "canvases.pgm");
  CHECK(canv.width == 3 * 29 + 1);  // T + 1 canvases

  REQUIRE(cli::run({"finetune", "--checkpoint", ck, "--out", (out / "ft").string(), "--data-dir", SEQIMPUTE_DATA_DIR,
                    "updates=2"}) == cli::kExitOk);
  const std::string ft = slurp(out / "ft" / "finetune.csv");
  CHECK(ft.rfind("stage,split,mean_fe\nraw,valid,", 0) == 0);

  CHECK(cli::run({"sample", "--checkpoint", ck, "--out", (out / "s").string()}) == cli::kExitConfig);
}

TEST_CASE("toy verb writes its reports") {
  auto out = testutil::temp_dir("cli_toy");
  REQUIRE(cli::run({"toy", "--out", out.string(), "T=3", "hidden=8", "layers=1", "updates=5", "batch=16",
                    "points=4", "bound_samples=8", "gen_samples=200"}) == cli::kExitOk);
  const std::string loss = slurp(out / "loss.csv");
  CHECK(std::count(loss.begin(), loss.end(), '\n') == 6);
  const std::string bound = slurp(out / "bound.csv");
  CHECK(std::count(bound.begin(), bound.end(), '\n') == 5);
}

TEST_CASE("built binary reports help and errors through its exit status") {
  const std::string bin = SEQIMPUTE_BINARY;
  CHECK(std::system((bin + " --help > /dev/null").c_str()) == 0);
  const int rc = std::system((bin + " bogus > /dev/null 2>&1").c_str());
  REQUIRE(WIFEXITED(rc));
  CHECK(WEXITSTATUS(rc) == cli::kExitConfig);
}

}  // TEST_SUITE
