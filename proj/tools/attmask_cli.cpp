// attmask: pretraining, evaluation, attention export and synthetic data.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "attmask/checkpoint.hpp"
#include "attmask/config.hpp"
#include "attmask/error.hpp"
#include "attmask/evaluation.hpp"
#include "attmask/pretrain.hpp"

namespace {

using namespace attmask;
using nlohmann::json;

constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> strategy;
  std::optional<int> epochs;
  std::optional<std::int64_t> max_steps;
  std::optional<std::string> output_dir;
};

RunConfig read_config(const std::string& path, const Overrides& o = {}) {
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("cannot read config " + path);
  }
  std::stringstream text;
  text << in.rdbuf();
  json doc;
  try {
    doc = json::parse(text.str());
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  if (o.seed) doc["seed"] = *o.seed;
  if (o.strategy) doc["mask"]["strategy"] = *o.strategy;
  if (o.epochs) doc["epochs"] = *o.epochs;
  if (o.max_steps) doc["max_steps"] = *o.max_steps;
  if (o.output_dir) doc["output_dir"] = *o.output_dir;
  if (const char* env = std::getenv("ATTMASK_OUTPUT_DIR"); env && *env) {
    doc["output_dir"] = env;
  }
  return parse_config(doc.dump());
}

void emit_report(const json& report, const std::filesystem::path& path) {
  std::cout << report.dump(2) << std::endl;
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  std::ofstream out(path, std::ios::trunc);
  out << report.dump(2) << '\n';
  if (!out) {
    throw IoError("cannot write report " + path.string());
  }
}

template <typename T>
int pretrain(const RunConfig& config, const std::string& resume) {
  PretrainOptions options;
  if (!resume.empty()) {
    options.resume = resume;
  }
  options.on_step = [](const StepMetrics& m) {
    if ((m.step + 1) % 10 == 0) {
      std::cerr << m.describe() << '\n';
    }
  };
  const auto result = run_pretraining<T>(config, options);
  std::cout << "finished at step " << result.state.step << "; checkpoint "
            << result.last_checkpoint.string() << std::endl;
  return 0;
}

struct EvalArgs {
  std::string protocol = "knn";
  std::string checkpoint;
  std::string model = "teacher";
  std::optional<int> k;
  std::optional<std::string> source;
  std::vector<int> shots{1, 5, 10, 20};
  std::vector<double> ratios{0.0, 0.1, 0.3, 0.5};
  std::string mode = "attention";
  std::string report;
};

template <typename T>
int evaluate(RunConfig config, const EvalArgs& args) {
  if (args.k) config.eval.k = *args.k;
  if (args.source) config.eval.source = parse_feature_source(*args.source);
  if (args.model != "teacher" && args.model != "student") {
    throw ConfigError("--model must be teacher or student");
  }
  const auto split = load_split(config);
  const auto state = load_checkpoint<T>(args.checkpoint, config);
  const auto& params = args.model == "teacher" ? state.pair.teacher : state.pair.student;
  const auto batch = static_cast<std::size_t>(config.eval.batch_size);
  const auto bank = extract_features(params, config.encoder, split.train, config.eval.source, batch);
  const auto k = std::min<std::size_t>(static_cast<std::size_t>(config.eval.k), bank.count);

  json report{{"protocol", args.protocol},
              {"parameters",
               {{"checkpoint", args.checkpoint},
                {"step", state.step},
                {"model", args.model},
                {"k", k},
                {"source", feature_source_name(config.eval.source)},
                {"bank_size", bank.count},
                {"query_size", split.holdout.count}}}};
  if (args.protocol == "knn") {
    const auto queries =
        extract_features(params, config.encoder, split.holdout, config.eval.source, batch);
    report["accuracy"] = json::array({{{"setting", "full"}, {"accuracy", knn_classify(bank, queries, k).accuracy}}});
  } else if (args.protocol == "few-shot") {
    const auto queries =
        extract_features(params, config.encoder, split.holdout, config.eval.source, batch);
    json entries = json::array();
    for (const int nu : args.shots) {
      if (nu < 1) throw ConfigError("--shots values must be >= 1");
      Rng rng = run_rng(config).path(std::string_view("few-shot"), static_cast<std::uint64_t>(nu));
      const auto r = few_example_knn(bank, queries, k, static_cast<std::size_t>(nu), rng);
      entries.push_back({{"shots", nu}, {"accuracy", r.accuracy}});
    }
    report["parameters"]["shots"] = args.shots;
    report["accuracy"] = entries;
  } else if (args.protocol == "masked-inference") {
    const auto mode = parse_masking_mode(args.mode);
    const auto results = masked_inference_eval(params, state.pair.teacher, config.encoder, bank,
                                               split.holdout, args.ratios, mode, k,
                                               run_rng(config).split(std::string_view("masked-inference")));
    json entries = json::array();
    for (const auto& r : results) {
      entries.push_back({{"ratio", r.ratio}, {"accuracy", r.accuracy}});
    }
    report["parameters"]["mode"] = masking_mode_name(mode);
    report["parameters"]["ratios"] = args.ratios;
    report["accuracy"] = entries;
  } else {
    throw ConfigError("--protocol must be knn, few-shot or masked-inference");
  }
  const std::filesystem::path path =
      args.report.empty() ? std::filesystem::path(config.output_dir) / ("eval_" + args.protocol + ".json")
                          : std::filesystem::path(args.report);
  emit_report(report, path);
  return 0;
}

struct ExportArgs {
  std::string checkpoint;
  std::string image_file;
  std::size_t index = 0;
  int layer = 0;
  double ratio = 0.5;
  std::string out_dir;
};

template <typename T>
int export_attention(const RunConfig& config, const ExportArgs& args) {
  const int depth = config.encoder.depth;
  if (args.layer < 0 || args.layer > depth || depth == 0) {
    throw ConfigError("--layer " + std::to_string(args.layer) + " outside valid range 1.." +
                      std::to_string(depth) + " (0 = last)");
  }
  if (!(args.ratio >= 0.0 && args.ratio <= 1.0)) {
    throw ConfigError("--ratio must lie in [0, 1]");
  }
  const int layer = args.layer == 0 ? depth : args.layer;
  ImageDataset source;
  if (args.image_file.empty()) {
    const auto split = load_split(config);
    source = split.holdout.count ? split.holdout : split.train;
  } else {
    source = load_dataset(args.image_file);
  }
  if (args.index >= source.count) {
    throw RangeError("image index " + std::to_string(args.index) + " not present (dataset holds " +
                     std::to_string(source.count) + " images)");
  }
  const auto state = load_checkpoint<T>(args.checkpoint, config);
  const std::size_t one[] = {args.index};
  const auto image_set = source.subset(one);

  NoGradGuard no_grad;
  const auto& teacher = state.pair.teacher;
  const auto seq = add_position_embeddings(
      tokenize(to_image_batch<T>(image_set, std::vector<std::size_t>{0}), teacher, config.encoder),
      teacher, config.encoder);
  const auto enc = encoder_forward(seq, teacher, config.encoder, layer);
  const std::filesystem::path out(args.out_dir);
  auto files = export_attention_map(enc.attention, layer, 0, out);

  const auto attention = cls_attention(enc.attention, layer, 0).values;
  const auto n = attention.size();
  for (std::size_t s = 0; s < std::size(kAllStrategies); ++s) {
    const auto strategy = kAllStrategies[s];
    Rng rng = run_rng(config).path(std::string_view("export"), static_cast<std::uint64_t>(s));
    const auto mask = make_mask<T>(strategy, n, args.ratio, config.mask.show_ratio, attention, rng);
    const auto path = out / ("overlay_" + std::string(strategy_name(strategy)) + ".ppm");
    export_mask_overlay(image_set.image(0), image_set.height, image_set.channels,
                        config.encoder.patch_size, mask, path);
    files.push_back(path);
  }
  for (const auto& f : files) {
    std::cout << f.string() << '\n';
  }
  return 0;
}

template <typename F>
int dispatch(Precision p, F&& f) {
  return p == Precision::Float64 ? f(double{}) : f(float{});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"attmask: attention-guided masked image modeling at desk scale"};
  app.require_subcommand(1);

  std::string config_path;
  Overrides overrides;

  auto* pre = app.add_subcommand("pretrain", "Run or resume pretraining");
  std::string resume;
  pre->add_option("-c,--config", config_path, "Run config (JSON)")->required()->check(CLI::ExistingFile);
  pre->add_option("--resume", resume, "Checkpoint directory to resume from");
  pre->add_option("--seed", overrides.seed, "Override the run seed");
  pre->add_option("--strategy", overrides.strategy,
                  "Override the masking strategy (random, block-wise, attmask-high, attmask-low, attmask-hint)");
  pre->add_option("--epochs", overrides.epochs, "Override the epoch count");
  pre->add_option("--max-steps", overrides.max_steps, "Stop after this many steps");
  pre->add_option("--output-dir", overrides.output_dir, "Override the output directory");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint with frozen features");
  EvalArgs eval_args;
  ev->add_option("-c,--config", config_path, "Run config (JSON)")->required()->check(CLI::ExistingFile);
  ev->add_option("--checkpoint", eval_args.checkpoint, "Checkpoint directory")->required();
  ev->add_option("--protocol", eval_args.protocol, "knn, few-shot or masked-inference")
      ->check(CLI::IsMember({"knn", "few-shot", "masked-inference"}));
  ev->add_option("--model", eval_args.model, "teacher or student")->check(CLI::IsMember({"teacher", "student"}));
  ev->add_option("-k", eval_args.k, "Neighbours");
  ev->add_option("--source", eval_args.source, "Feature source: cls or gap");
  ev->add_option("--shots", eval_args.shots, "Examples per class for few-shot")->delimiter(',');
  ev->add_option("--ratios", eval_args.ratios, "Mask ratios for masked-inference")->delimiter(',');
  ev->add_option("--mode", eval_args.mode, "Masked-inference mode: attention or random");
  ev->add_option("--report", eval_args.report, "Report path (default <output_dir>/eval_<protocol>.json)");
  ev->add_option("--output-dir", overrides.output_dir, "Override the output directory");

  auto* ex = app.add_subcommand("export-attn", "Export attention maps and mask overlays");
  ExportArgs export_args;
  ex->add_option("-c,--config", config_path, "Run config (JSON)")->required()->check(CLI::ExistingFile);
  ex->add_option("--checkpoint", export_args.checkpoint, "Checkpoint directory")->required();
  ex->add_option("--index", export_args.index, "Image index (held-out split unless --image-file)");
  ex->add_option("--image-file", export_args.image_file, "AMIM file to take the image from");
  ex->add_option("--layer", export_args.layer, "Attention layer, 1-based; 0 = last");
  ex->add_option("--ratio", export_args.ratio, "Mask ratio for the overlays");
  ex->add_option("-o,--out", export_args.out_dir, "Output directory")->required();

  auto* ms = app.add_subcommand("make-synth", "Write a synthetic shape dataset (AMIM)");
  int classes = 4, per_class = 500, side = 32, channels = 3;
  std::uint64_t seed = 7;
  std::string out_path;
  ms->add_option("--classes", classes, "Number of classes (2..8)");
  ms->add_option("--per-class", per_class, "Images per class");
  ms->add_option("--side", side, "Image side in pixels");
  ms->add_option("--channels", channels, "1 or 3");
  ms->add_option("--seed", seed, "Generator seed");
  ms->add_option("-o,--out", out_path, "Output file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*pre) {
      const auto config = read_config(config_path, overrides);
      return dispatch(config.precision, [&](auto t) { return pretrain<decltype(t)>(config, resume); });
    }
    if (*ev) {
      const auto config = read_config(config_path, overrides);
      return dispatch(config.precision, [&](auto t) { return evaluate<decltype(t)>(config, eval_args); });
    }
    if (*ex) {
      const auto config = read_config(config_path);
      return dispatch(config.precision,
                      [&](auto t) { return export_attention<decltype(t)>(config, export_args); });
    }
    if (*ms) {
      const auto dataset = make_synthetic(classes, per_class, side, channels, Rng(seed));
      write_amim(out_path, dataset);
      std::cout << out_path << ": " << dataset.count << " images, "
                << encode_amim(dataset).size() << " bytes" << std::endl;
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << std::endl;
    return kExitUsage;
  } catch (const ParameterError& e) {
    std::cerr << "invalid argument: " << e.what() << std::endl;
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kExitRuntime;
  }
  return kExitUsage;
}
