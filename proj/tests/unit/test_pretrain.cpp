#include <doctest.h>

#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "attmask/checkpoint.hpp"
#include "attmask/error.hpp"
#include "attmask/pretrain.hpp"
#include "support.hpp"

namespace fs = std::filesystem;

namespace {

attmask::RunConfig tiny_run(const fs::path& out, const std::string& extra = "") {
  auto c = attmask::parse_config(R"({
    "seed": 5, "epochs": 2, "batch_size": 4,
    "dataset": {"classes": 2, "per_class": 5, "side": 16},
    "encoder": {"image_side": 16, "patch_size": 4, "embed_dim": 8, "heads": 2, "depth": 2,
                "mlp_ratio": 2, "out_dim": 8, "head_hidden": 16, "head_bottleneck": 4},
    "aug": {"global_side": 16, "local_side": 8},
    "mask": {"probability": 1.0},
    "optim": {"warmup_epochs": 1})" + extra + "}");
  c.output_dir = out.string();
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

std::vector<std::string> fields(const std::string& row) {
  std::vector<std::string> out;
  std::istringstream in(row);
  for (std::string f; std::getline(in, f, ',');) out.push_back(f);
  return out;
}

}  // namespace

TEST_SUITE("pretrain") {

TEST_CASE("steps per epoch and batches") {
  CHECK(attmask::steps_per_epoch(0, 4) == 0);
  CHECK(attmask::steps_per_epoch(3, 4) == 1);
  CHECK(attmask::steps_per_epoch(9, 4) == 2);
  const auto c = tiny_run("unused");
  // One epoch visits distinct images.
  auto a = attmask::batch_indices(c, 8, 0);
  const auto b = attmask::batch_indices(c, 8, 1);
  a.insert(a.end(), b.begin(), b.end());
  std::sort(a.begin(), a.end());
  CHECK(std::adjacent_find(a.begin(), a.end()) == a.end());
  CHECK(attmask::batch_indices(c, 8, 2) != attmask::batch_indices(c, 8, 0));
  CHECK(attmask::batch_indices(c, 8, 3) == attmask::batch_indices(tiny_run("other"), 8, 3));
}

TEST_CASE("zero epochs writes the header and an initial checkpoint") {
  const auto dir = testing::temp_dir("zero");
  const auto c = tiny_run(dir, R"(, "epochs": 0)");
  const auto r = attmask::run_pretraining<float>(c);
  CHECK(r.state.step == 0);
  CHECK(slurp(dir / attmask::kMetricsFile) == std::string(attmask::kMetricsHeader) + "\n");
  CHECK(attmask::latest_checkpoint(dir) == attmask::checkpoint_dir(dir, 0));
  CHECK(fs::exists(attmask::checkpoint_dir(dir, 0) / attmask::kParamsFile));
  CHECK(fs::exists(dir / "config.json"));
}

TEST_CASE("checkpoint round-trip is byte exact") {
  const auto dir = testing::temp_dir("roundtrip");
  const auto c = tiny_run(dir / "run", R"(, "precision": "float64")");
  const auto r = attmask::run_pretraining<double>(c);
  const auto ck = attmask::latest_checkpoint(dir / "run");
  const auto info = attmask::read_checkpoint_info(ck);
  CHECK(info.step == r.state.step);
  CHECK(info.precision == attmask::Precision::Float64);
  CHECK(info.config_hash == attmask::config_hash(c));
  const auto state = attmask::load_checkpoint<double>(ck, c);
  attmask::save_checkpoint(dir / "again", state, c, info.epoch);
  CHECK(slurp(dir / "again" / attmask::kParamsFile) == slurp(ck / attmask::kParamsFile));
  CHECK(slurp(dir / "again" / attmask::kManifestFile) == slurp(ck / attmask::kManifestFile));

  auto changed = c;
  changed.optim.lr *= 2;
  CHECK_THROWS_AS(attmask::load_checkpoint<double>(ck, changed), attmask::StateError);
  CHECK_THROWS_AS(attmask::load_checkpoint<float>(ck, c), attmask::StateError);
  // Output location is not part of the identity of a run.
  auto moved = c;
  moved.output_dir = "somewhere/else";
  CHECK_NOTHROW((void)attmask::load_checkpoint<double>(ck, moved));

  // Truncated and padded blobs are rejected.
  const auto blob = slurp(ck / attmask::kParamsFile);
  fs::copy(ck, dir / "bad", fs::copy_options::recursive);
  std::ofstream(dir / "bad" / attmask::kParamsFile, std::ios::binary | std::ios::trunc)
      << blob.substr(0, blob.size() - 1);
  CHECK_THROWS_AS(attmask::load_checkpoint<double>(dir / "bad", c), attmask::FormatError);
  std::ofstream(dir / "bad" / attmask::kParamsFile, std::ios::binary | std::ios::trunc) << blob << 'x';
  CHECK_THROWS_AS(attmask::load_checkpoint<double>(dir / "bad", c), attmask::FormatError);
}

TEST_CASE("repeated runs are bit identical") {
  const auto dir = testing::temp_dir("repeat");
  (void)attmask::run_pretraining<float>(tiny_run(dir / "a"));
  (void)attmask::run_pretraining<float>(tiny_run(dir / "b"));
  const auto a = slurp(dir / "a" / attmask::kMetricsFile);
  CHECK(lines(a).size() == 5);
  CHECK(a == slurp(dir / "b" / attmask::kMetricsFile));
  CHECK(slurp(attmask::latest_checkpoint(dir / "a") / attmask::kParamsFile) ==
        slurp(attmask::latest_checkpoint(dir / "b") / attmask::kParamsFile));
}

TEST_CASE("resume continues bit identically") {
  const auto dir = testing::temp_dir("resume");
  (void)attmask::run_pretraining<float>(tiny_run(dir / "full", R"(, "epochs": 3)"));
  // Interrupted run: stop after 2 steps, then resume to the end.
  auto part = tiny_run(dir / "part", R"(, "epochs": 3)");
  part.max_steps = 2;
  (void)attmask::run_pretraining<float>(part);
  part.max_steps = 0;
  attmask::PretrainOptions opts;
  opts.resume = attmask::latest_checkpoint(dir / "part");
  CHECK(*opts.resume == attmask::checkpoint_dir(dir / "part", 2));
  const auto r = attmask::run_pretraining<float>(part, opts);
  CHECK(r.state.step == 6);
  CHECK(slurp(dir / "part" / attmask::kMetricsFile) == slurp(dir / "full" / attmask::kMetricsFile));
  CHECK(slurp(attmask::checkpoint_dir(dir / "part", 6) / attmask::kParamsFile) ==
        slurp(attmask::checkpoint_dir(dir / "full", 6) / attmask::kParamsFile));
}

TEST_CASE("strategy flag changes only mask-dependent columns at step 1") {
  const auto dir = testing::temp_dir("strategy");
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> init_blobs;
  for (const char* s : {"random", "blockwise", "attmask-high", "attmask-low", "attmask-hint"}) {
    auto c = tiny_run(dir / s, std::string(R"(, "mask": {"probability": 1.0, "strategy": ")") + s + "\"}");
    c.max_steps = 1;
    (void)attmask::run_pretraining<float>(c);
    const auto m = lines(slurp(dir / s / attmask::kMetricsFile));
    REQUIRE(m.size() == 2);
    rows.push_back(fields(m[1]));
    init_blobs.push_back(slurp(attmask::checkpoint_dir(dir / s, 0) / attmask::kParamsFile));
  }
  // Column indices: 0 step, 1 epoch, 2-5 losses, 6 lr, 7 wd, 8 temp, 9 masked fraction, 10 ema, 11 wallclock.
  for (std::size_t i = 1; i < rows.size(); ++i) {
    CHECK(init_blobs[i] == init_blobs[0]);
    for (const std::size_t col : {0, 1, 5, 6, 7, 8, 9, 10, 11}) CHECK(rows[i][col] == rows[0][col]);
  }
  CHECK(rows[2][3] != rows[3][3]);
}

TEST_CASE("metrics row formatting") {
  attmask::StepMetrics m;
  m.step = 0;
  m.loss_total = 1.5;
  m.lr = 1e-4;
  CHECK(attmask::format_metrics_row(m, 0, 0) == "1,0,1.5,0,0,0,0.0001,0,0,0,0,0");
}

}
