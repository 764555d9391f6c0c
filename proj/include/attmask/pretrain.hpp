#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "attmask/checkpoint.hpp"
#include "attmask/config.hpp"
#include "attmask/distill.hpp"

namespace attmask {

inline constexpr const char* kMetricsFile = "metrics.csv";
inline constexpr const char* kMetricsHeader =
    "step,epoch,loss_total,loss_mim,loss_g,loss_lc,lr,weight_decay,teacher_temp,"
    "masked_fraction,ema_alpha,wallclock_ms";

/// Full batches per epoch (the ragged tail is dropped); a dataset smaller
/// than one batch trains on a single batch of all its images.
std::int64_t steps_per_epoch(std::size_t train_count, int batch_size);

std::filesystem::path checkpoint_dir(const std::filesystem::path& output_dir, std::int64_t step);
/// Most recent checkpoint written by run_pretraining, from the LATEST file.
std::filesystem::path latest_checkpoint(const std::filesystem::path& output_dir);

/// Root of every random stream of a run. Streams: "init" for parameters,
/// ("data", epoch) for the visiting order, ("aug", step, i) for image i's
/// views, ("mask", step) for the step's masks.
Rng run_rng(const RunConfig& config);

/// Image indices (into the training split) used by one step.
std::vector<std::size_t> batch_indices(const RunConfig& config, std::size_t train_count,
                                       std::int64_t step);

template <typename T>
ViewBatch<T> build_view_batch(const RunConfig& config, const ImageDataset& train,
                              std::int64_t step);

std::string format_metrics_row(const StepMetrics& m, std::int64_t epoch, std::int64_t wallclock_ms);

struct PretrainOptions {
  std::optional<std::filesystem::path> resume;  // checkpoint directory
  std::function<void(const StepMetrics&)> on_step;
};

template <typename T>
struct PretrainResult {
  TrainState<T> state;
  std::int64_t steps_per_epoch = 0;
  std::filesystem::path last_checkpoint;
};

/// Runs (or resumes) pretraining into config.output_dir: config.json,
/// metrics.csv (one row per step), checkpoints/step_<N>/ at the configured
/// cadence and at the end. On a non-finite loss the last good state is
/// checkpointed before the NumericError propagates.
template <typename T>
PretrainResult<T> run_pretraining(const RunConfig& config, const PretrainOptions& options = {});

/// k-NN accuracy of `params` with the training split as bank and the
/// held-out split as queries.
template <typename T>
double holdout_knn_accuracy(const ParamSet<T>& params, const RunConfig& config,
                            const DataSplit& split);

}  // namespace attmask
