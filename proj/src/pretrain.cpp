#include "attmask/pretrain.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "attmask/error.hpp"

namespace attmask {

std::int64_t steps_per_epoch(std::size_t train_count, int batch_size) {
  if (train_count == 0) {
    return 0;
  }
  return std::max<std::int64_t>(1, static_cast<std::int64_t>(train_count) / batch_size);
}

std::filesystem::path checkpoint_dir(const std::filesystem::path& output_dir, std::int64_t step) {
  char name[32];
  std::snprintf(name, sizeof(name), "step_%08lld", static_cast<long long>(step));
  return output_dir / "checkpoints" / name;
}

std::filesystem::path latest_checkpoint(const std::filesystem::path& output_dir) {
  const auto marker = output_dir / "checkpoints" / "LATEST";
  std::ifstream in(marker);
  std::string name;
  if (!(in >> name)) {
    throw IoError("no checkpoint recorded in " + marker.string());
  }
  return output_dir / "checkpoints" / name;
}

Rng run_rng(const RunConfig& config) { return Rng(config.seed); }

std::vector<std::size_t> batch_indices(const RunConfig& config, std::size_t train_count,
                                       std::int64_t step) {
  const auto spe = steps_per_epoch(train_count, config.batch_size);
  if (spe == 0) {
    return {};
  }
  const auto epoch = step / spe;
  const auto slot = static_cast<std::size_t>(step % spe);
  std::vector<std::size_t> order(train_count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = run_rng(config).path(std::string_view("data"), static_cast<std::uint64_t>(epoch));
  rng.shuffle(std::span<std::size_t>(order));
  const auto b = std::min<std::size_t>(static_cast<std::size_t>(config.batch_size), train_count);
  return std::vector<std::size_t>(order.begin() + static_cast<std::ptrdiff_t>(slot * b),
                                  order.begin() + static_cast<std::ptrdiff_t>((slot + 1) * b));
}

template <typename T>
ViewBatch<T> build_view_batch(const RunConfig& config, const ImageDataset& train,
                              std::int64_t step) {
  const auto indices = batch_indices(config, train.count, step);
  std::vector<ViewSet<T>> views;
  views.reserve(indices.size());
  const Rng aug_root = run_rng(config).path(std::string_view("aug"), static_cast<std::uint64_t>(step));
  for (std::size_t i = 0; i < indices.size(); ++i) {
    Rng rng = aug_root.split(static_cast<std::uint64_t>(i));
    views.push_back(make_views<T>(train.image(indices[i]), train.height, train.width,
                                  train.channels, config.aug, rng));
  }
  return pack_views(views, config.aug, train.channels);
}

std::string format_metrics_row(const StepMetrics& m, std::int64_t epoch, std::int64_t wallclock_ms) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), "%lld,%lld,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%lld",
                static_cast<long long>(m.step + 1), static_cast<long long>(epoch), m.loss_total,
                m.loss_mim, m.loss_g, m.loss_lc, m.lr, m.weight_decay, m.teacher_temp,
                m.masked_fraction, m.ema_alpha, static_cast<long long>(wallclock_ms));
  return buf;
}

namespace {

// Keeps the header and every row whose step is at most `step`.
void truncate_metrics(const std::filesystem::path& path, std::int64_t step) {
  std::vector<std::string> keep{kMetricsHeader};
  std::ifstream in(path);
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (first) {
      first = false;
      continue;
    }
    if (!line.empty() && std::stoll(line.substr(0, line.find(','))) <= step) {
      keep.push_back(line);
    }
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  for (const auto& row : keep) {
    out << row << '\n';
  }
}

template <typename T>
void write_checkpoint(const RunConfig& config, const TrainState<T>& state, std::int64_t spe,
                      std::filesystem::path& last) {
  const std::filesystem::path out_dir(config.output_dir);
  last = checkpoint_dir(out_dir, state.step);
  save_checkpoint(last, state, config, spe > 0 ? state.step / spe : 0);
  std::ofstream marker(out_dir / "checkpoints" / "LATEST", std::ios::trunc);
  marker << last.filename().string() << '\n';
}

}  // namespace

template <typename T>
PretrainResult<T> run_pretraining(const RunConfig& config, const PretrainOptions& options) {
  config.validate();
  const DataSplit split = load_split(config);
  const std::filesystem::path out_dir(config.output_dir);
  std::filesystem::create_directories(out_dir);
  {
    std::ofstream cfg(out_dir / "config.json", std::ios::trunc);
    cfg << dump_config(config) << '\n';
  }

  PretrainResult<T> result;
  result.steps_per_epoch = steps_per_epoch(split.train.count, config.batch_size);
  const std::int64_t spe = result.steps_per_epoch;
  const TrainSetup setup = make_train_setup(config, spe);
  const std::int64_t total = spe * config.epochs;
  const std::int64_t stop =
      config.max_steps > 0 ? std::min<std::int64_t>(total, config.max_steps) : total;

  const auto metrics_path = out_dir / kMetricsFile;
  if (options.resume) {
    result.state = load_checkpoint<T>(*options.resume, config);
    truncate_metrics(metrics_path, result.state.step);
  } else {
    result.state = TrainState<T>::initialize(config.encoder,
                                             run_rng(config).split(std::string_view("init")));
    std::ofstream header(metrics_path, std::ios::trunc);
    header << kMetricsHeader << '\n';
  }
  std::ofstream metrics(metrics_path, std::ios::app);
  if (!metrics) {
    throw IoError("cannot open " + metrics_path.string() + " for writing");
  }

  auto& state = result.state;
  if (!options.resume && state.step == 0) {
    write_checkpoint(config, state, spe, result.last_checkpoint);
  }
  const auto start = std::chrono::steady_clock::now();
  while (state.step < stop) {
    const std::int64_t step = state.step;
    const auto batch = build_view_batch<T>(config, split.train, step);
    StepMetrics m;
    try {
      m = train_step(batch, state, setup,
                     run_rng(config).path(std::string_view("mask"), static_cast<std::uint64_t>(step)));
    } catch (const NumericError&) {
      metrics.flush();
      write_checkpoint(config, state, spe, result.last_checkpoint);
      throw;
    }
    const auto wall = config.log_wallclock
                          ? std::chrono::duration_cast<std::chrono::milliseconds>(
                                std::chrono::steady_clock::now() - start)
                                .count()
                          : 0;
    metrics << format_metrics_row(m, step / spe, wall) << '\n';
    metrics.flush();
    if (options.on_step) {
      options.on_step(m);
    }
    if (config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0 && state.step < stop) {
      write_checkpoint(config, state, spe, result.last_checkpoint);
    }
  }
  if (state.step > 0 || options.resume) {
    write_checkpoint(config, state, spe, result.last_checkpoint);
  }
  return result;
}

template <typename T>
double holdout_knn_accuracy(const ParamSet<T>& params, const RunConfig& config,
                            const DataSplit& split) {
  const auto batch = static_cast<std::size_t>(config.eval.batch_size);
  const auto bank = extract_features(params, config.encoder, split.train, config.eval.source, batch);
  const auto queries =
      extract_features(params, config.encoder, split.holdout, config.eval.source, batch);
  const auto k = std::min<std::size_t>(static_cast<std::size_t>(config.eval.k), bank.count);
  return knn_classify(bank, queries, k).accuracy;
}

#define ATTMASK_INSTANTIATE(T)                                                                  \
  template ViewBatch<T> build_view_batch<T>(const RunConfig&, const ImageDataset&,              \
                                            std::int64_t);                                      \
  template PretrainResult<T> run_pretraining<T>(const RunConfig&, const PretrainOptions&);      \
  template double holdout_knn_accuracy<T>(const ParamSet<T>&, const RunConfig&, const DataSplit&);

ATTMASK_INSTANTIATE(float)
ATTMASK_INSTANTIATE(double)
#undef ATTMASK_INSTANTIATE

}  // namespace attmask
