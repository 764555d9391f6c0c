#include <doctest.h>

#include <string>

#include "attmask/config.hpp"
#include "attmask/error.hpp"
#include "attmask/optim.hpp"

using attmask::ConfigError;
using attmask::parse_config;

namespace {

std::string error_of(const std::string& text) {
  try {
    (void)parse_config(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_SUITE("config") {

TEST_CASE("empty document gives the defaults") {
  const auto c = parse_config("{}");
  CHECK(c.epochs == 30);
  CHECK(c.batch_size == 64);
  CHECK(c.precision == attmask::Precision::Float32);
  CHECK(c.mask.strategy == attmask::MaskStrategy::AttMaskHigh);
  CHECK(c.mask.probability == 0.5);
  CHECK(c.aug.scale_split == 0.25);
  CHECK(c.loss.mim_weight == 1.0);
  CHECK(c.dataset.path.empty());
  CHECK(c.dataset.classes == 4);
  CHECK(c.dataset.per_class == 500);
}

TEST_CASE("dump then parse is the identity") {
  auto c = parse_config(R"({"seed": 3, "mask": {"strategy": "blockwise", "ratio_max": 0.4},
                            "precision": "float64", "eval": {"source": "gap"}})");
  const auto text = attmask::dump_config(c);
  CHECK(attmask::dump_config(parse_config(text)) == text);
  CHECK(parse_config(text).mask.strategy == attmask::MaskStrategy::Blockwise);
  CHECK(parse_config(text).eval.source == attmask::FeatureSource::Gap);
}

TEST_CASE("errors name the field") {
  CHECK(error_of(R"({"encoder": {"depht": 2}})").find("encoder.depht") != std::string::npos);
  CHECK(error_of(R"({"bogus": 1})").find("bogus") != std::string::npos);
  CHECK(error_of(R"({"epochs": "ten"})").find("epochs") != std::string::npos);
  CHECK(error_of(R"({"mask": {"ratio_min": 0.6, "ratio_max": 0.5}})").find("mask") != std::string::npos);
  CHECK(error_of(R"({"mask": {"strategy": "sideways"}})").find("mask.strategy") != std::string::npos);
  CHECK(error_of(R"({"encoder": {"embed_dim": 30, "heads": 4}})").find("encoder") != std::string::npos);
  CHECK(error_of(R"({"dataset": {"side": 16}})").find("dataset.side") != std::string::npos);
  CHECK(error_of(R"({"mask": {"layer": 9}})").find("mask.layer") != std::string::npos);
  CHECK(error_of("{not json").find("JSON") != std::string::npos);
  CHECK(error_of(R"({"epochs": -1})").find("epochs") != std::string::npos);
}

TEST_CASE("hash covers training fields only") {
  const auto base = parse_config("{}");
  const auto h = attmask::config_hash(base);
  CHECK(attmask::config_hash(parse_config("{}")) == h);
  CHECK(attmask::config_hash(parse_config(R"({"output_dir": "elsewhere", "max_steps": 3,
      "checkpoint_every": 5, "log_wallclock": true, "eval": {"k": 5}})")) == h);
  CHECK(attmask::config_hash(parse_config(R"({"seed": 1})")) != h);
  CHECK(attmask::config_hash(parse_config(R"({"mask": {"strategy": "random"}})")) != h);
  CHECK(attmask::config_hash(parse_config(R"({"optim": {"lr": 0.001}})")) != h);
}

TEST_CASE("schedules") {
  auto c = parse_config(R"({"epochs": 10, "batch_size": 128, "optim": {"lr": 0.001, "warmup_epochs": 2},
                            "teacher": {"temperature_warmup_fraction": 0.5}})");
  const auto s = attmask::build_schedules(c, 4);
  CHECK(s.lr.total_steps == 40);
  CHECK(s.lr.warmup_steps == 8);
  CHECK(attmask::eval_schedule(s.lr, 0) == 0.0);
  CHECK(attmask::eval_schedule(s.lr, 8) == doctest::Approx(0.001 * 128 / 256));
  CHECK(attmask::eval_schedule(s.lr, 40) == doctest::Approx(c.optim.min_lr));
  CHECK(attmask::eval_schedule(s.weight_decay, 0) == doctest::Approx(0.04));
  CHECK(attmask::eval_schedule(s.weight_decay, 40) == doctest::Approx(0.4));
  CHECK(attmask::eval_schedule(s.teacher_temperature, 0) == doctest::Approx(0.04));
  CHECK(attmask::eval_schedule(s.teacher_temperature, 10) == doctest::Approx(0.055));
  CHECK(attmask::eval_schedule(s.teacher_temperature, 20) == doctest::Approx(0.07));
  CHECK(attmask::eval_schedule(s.teacher_temperature, 39) == doctest::Approx(0.07));
  CHECK(attmask::eval_schedule(s.ema_momentum, 17) == 0.99);
  // No lr scaling when disabled.
  c.optim.scale_lr = false;
  CHECK(attmask::eval_schedule(attmask::build_schedules(c, 4).lr, 8) == doctest::Approx(0.001));
  // A warmup longer than the run is clamped one step short of the end.
  c.epochs = 1;
  CHECK(attmask::build_schedules(c, 4).lr.warmup_steps == 3);
  // Zero warmup fraction holds the start temperature.
  c.teacher.temperature_warmup_fraction = 0.0;
  CHECK(attmask::eval_schedule(attmask::build_schedules(c, 4).teacher_temperature, 3) == 0.04);
}

TEST_CASE("synthetic split") {
  auto c = parse_config(R"({"dataset": {"classes": 2, "per_class": 10, "side": 32}})");
  const auto split = attmask::load_split(c);
  CHECK(split.train.count == 16);
  CHECK(split.holdout.count == 4);
  CHECK(split.holdout.labels[0] == 0);
  CHECK(split.holdout.labels[1] == 1);
}

}
