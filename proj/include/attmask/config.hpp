#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "attmask/data.hpp"
#include "attmask/distill.hpp"
#include "attmask/evaluation.hpp"
#include "attmask/masking.hpp"
#include "attmask/vit.hpp"

namespace attmask {

enum class Precision { Float32, Float64 };

std::string_view precision_name(Precision p);

/// Where images come from. An empty path means "generate the synthetic
/// benchmark in memory" with the synthetic_* knobs. The last
/// holdout_fraction of the images is held out for evaluation; since the
/// synthetic generator interleaves labels, that split stays class-balanced.
struct DatasetConfig {
  std::string path;
  int classes = 4;
  int per_class = 500;
  int side = 32;
  int channels = 3;
  std::uint64_t seed = 7;
  double holdout_fraction = 0.2;
};

struct OptimConfig {
  double lr = 5e-4;  // per 256 images when scale_lr is set
  bool scale_lr = true;
  double min_lr = 1e-6;
  int warmup_epochs = 3;
  double weight_decay = 0.04;
  double weight_decay_end = 0.4;
};

struct EvalConfig {
  int k = 20;
  FeatureSource source = FeatureSource::Cls;
  int batch_size = 64;
};

struct RunConfig {
  std::uint64_t seed = 0;
  Precision precision = Precision::Float32;
  std::string output_dir = "runs/default";
  int epochs = 30;
  int batch_size = 64;
  std::int64_t max_steps = 0;         // stop early after this many steps; 0 = run all epochs
  std::int64_t checkpoint_every = 0;  // steps; 0 = only at the end
  bool log_wallclock = false;         // false writes 0 so metrics.csv is reproducible

  DatasetConfig dataset;
  EncoderConfig encoder;
  MaskPolicy mask;
  LossWeights loss;
  AugConfig aug;
  OptimConfig optim;
  TeacherConfig teacher;
  EvalConfig eval;

  /// Throws ConfigError naming the offending field path.
  void validate() const;
};

/// Parses a JSON document. Missing keys keep their defaults; unknown keys
/// and wrong types raise ConfigError with the field path.
RunConfig parse_config(const std::string& json_text);
RunConfig load_config(const std::filesystem::path& path);

/// Canonical JSON with every field present and keys sorted.
std::string dump_config(const RunConfig& config);

/// Hash of the fields that influence training arithmetic. Output location,
/// checkpoint cadence, max_steps, wallclock logging and the eval section are
/// excluded so that a resumed run or a later evaluation may change them.
std::uint64_t config_hash(const RunConfig& config);

/// Learning rate, weight decay, teacher temperature and EMA schedules for a
/// run of `steps_per_epoch * epochs` steps.
StepSchedules build_schedules(const RunConfig& config, std::int64_t steps_per_epoch);

TrainSetup make_train_setup(const RunConfig& config, std::int64_t steps_per_epoch);

/// Training and held-out splits of the configured dataset.
struct DataSplit {
  ImageDataset train;
  ImageDataset holdout;
};

DataSplit load_split(const RunConfig& config);

}  // namespace attmask
