#include "attmask/config.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "attmask/error.hpp"

namespace attmask {

using nlohmann::json;

std::string_view precision_name(Precision p) {
  return p == Precision::Float32 ? "float32" : "float64";
}

namespace {

std::string join(const std::string& prefix, const std::string& key) {
  return prefix.empty() ? key : prefix + "." + key;
}

// Reads the keys of one JSON object, remembering which were consumed so that
// leftovers can be reported as unknown.
class Section {
 public:
  Section(const json& node, std::string path) : node_(node), path_(std::move(path)) {
    if (!node_.is_object()) {
      throw ConfigError("field '" + (path_.empty() ? std::string("<root>") : path_) +
                        "': expected an object");
    }
  }

  template <typename V>
  void read(const char* key, V& out) {
    seen_.insert(key);
    const auto it = node_.find(key);
    if (it == node_.end()) {
      return;
    }
    const auto field = join(path_, key);
    if constexpr (std::is_same_v<V, bool>) {
      if (!it->is_boolean()) fail(field, "expected true or false");
      out = it->template get<bool>();
    } else if constexpr (std::is_integral_v<V>) {
      if (it->is_number_float()) {
        const double v = it->template get<double>();
        if (v != std::floor(v)) fail(field, "expected an integer");
        out = static_cast<V>(v);
      } else if (it->is_number_integer()) {
        if constexpr (std::is_unsigned_v<V>) {
          if (it->is_number_unsigned() || it->template get<std::int64_t>() >= 0) {
            out = it->template get<V>();
          } else {
            fail(field, "expected a non-negative integer");
          }
        } else {
          out = it->template get<V>();
        }
      } else {
        fail(field, "expected an integer");
      }
    } else if constexpr (std::is_floating_point_v<V>) {
      if (!it->is_number()) fail(field, "expected a number");
      out = it->template get<V>();
    } else {
      if (!it->is_string()) fail(field, "expected a string");
      out = it->template get<std::string>();
    }
  }

  template <typename Parse, typename V>
  void read_enum(const char* key, V& out, Parse parse) {
    std::string text;
    bool present = node_.contains(key);
    read(key, text);
    if (!present) {
      return;
    }
    try {
      out = parse(text);
    } catch (const Error& e) {
      fail(join(path_, key), e.what());
    }
  }

  Section child(const char* key) {
    seen_.insert(key);
    static const json empty = json::object();
    const auto it = node_.find(key);
    return Section(it == node_.end() ? empty : *it, join(path_, key));
  }

  void finish() const {
    for (const auto& item : node_.items()) {
      if (!seen_.count(item.key())) {
        throw ConfigError("field '" + join(path_, item.key()) + "': unknown key");
      }
    }
  }

  [[noreturn]] static void fail(const std::string& field, const std::string& what) {
    throw ConfigError("field '" + field + "': " + what);
  }

 private:
  const json& node_;
  std::string path_;
  std::set<std::string> seen_;
};

Precision parse_precision(std::string_view text) {
  if (text == "float32") return Precision::Float32;
  if (text == "float64") return Precision::Float64;
  throw ConfigError("expected float32 or float64");
}

ObjectiveMode parse_mode(std::string_view text) {
  if (text == "ibot") return ObjectiveMode::Ibot;
  if (text == "dino") return ObjectiveMode::Dino;
  throw ConfigError("expected ibot or dino");
}

std::string_view mode_name(ObjectiveMode m) { return m == ObjectiveMode::Ibot ? "ibot" : "dino"; }

// Runs a nested validate() and prefixes its message with the section name.
template <typename F>
void check_section(const std::string& section, F&& f) {
  try {
    f();
  } catch (const Error& e) {
    throw ConfigError("field '" + section + "': " + e.what());
  }
}

json to_json(const RunConfig& c) {
  const auto& d = c.dataset;
  const auto& e = c.encoder;
  const auto& m = c.mask;
  const auto& a = c.aug;
  const auto& o = c.optim;
  const auto& t = c.teacher;
  return json{
      {"seed", c.seed},
      {"precision", precision_name(c.precision)},
      {"output_dir", c.output_dir},
      {"epochs", c.epochs},
      {"batch_size", c.batch_size},
      {"max_steps", c.max_steps},
      {"checkpoint_every", c.checkpoint_every},
      {"log_wallclock", c.log_wallclock},
      {"dataset",
       {{"path", d.path},
        {"classes", d.classes},
        {"per_class", d.per_class},
        {"side", d.side},
        {"channels", d.channels},
        {"seed", d.seed},
        {"holdout_fraction", d.holdout_fraction}}},
      {"encoder",
       {{"image_side", e.image_side},
        {"channels", e.channels},
        {"patch_size", e.patch_size},
        {"embed_dim", e.embed_dim},
        {"heads", e.heads},
        {"depth", e.depth},
        {"mlp_ratio", e.mlp_ratio},
        {"out_dim", e.out_dim},
        {"head_hidden", e.head_hidden},
        {"head_bottleneck", e.head_bottleneck},
        {"student_temperature", e.student_temperature}}},
      {"mask",
       {{"strategy", strategy_name(m.strategy)},
        {"probability", m.probability},
        {"ratio_min", m.ratio_min},
        {"ratio_max", m.ratio_max},
        {"show_ratio", m.show_ratio},
        {"layer", m.layer}}},
      {"loss", {{"mim_weight", c.loss.mim_weight}, {"mode", mode_name(c.loss.mode)}}},
      {"aug",
       {{"global_side", a.global_side},
        {"local_side", a.local_side},
        {"scale_split", a.scale_split},
        {"global_scale_max", a.global_scale_max},
        {"local_scale_min", a.local_scale_min},
        {"local_crop_count", a.local_crop_count},
        {"flip_probability", a.flip_probability}}},
      {"optim",
       {{"lr", o.lr},
        {"scale_lr", o.scale_lr},
        {"min_lr", o.min_lr},
        {"warmup_epochs", o.warmup_epochs},
        {"weight_decay", o.weight_decay},
        {"weight_decay_end", o.weight_decay_end}}},
      {"teacher",
       {{"momentum", t.momentum},
        {"temperature_start", t.temperature_start},
        {"temperature_end", t.temperature_end},
        {"temperature_warmup_fraction", t.temperature_warmup_fraction},
        {"center_momentum", t.center_momentum}}},
      {"eval",
       {{"k", c.eval.k},
        {"source", feature_source_name(c.eval.source)},
        {"batch_size", c.eval.batch_size}}},
  };
}

}  // namespace

void RunConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& what) {
    throw ConfigError("field '" + field + "': " + what);
  };
  if (epochs < 0) fail("epochs", "must be >= 0");
  if (batch_size < 1) fail("batch_size", "must be >= 1");
  if (max_steps < 0) fail("max_steps", "must be >= 0");
  if (checkpoint_every < 0) fail("checkpoint_every", "must be >= 0");
  if (dataset.path.empty()) {
    if (dataset.classes < 2 || dataset.classes > kShapeVocabulary) {
      fail("dataset.classes", "must lie in [2, " + std::to_string(kShapeVocabulary) + "]");
    }
    if (dataset.per_class < 1) fail("dataset.per_class", "must be >= 1");
    if (dataset.side != encoder.image_side) {
      fail("dataset.side", "must equal encoder.image_side (" + std::to_string(encoder.image_side) + ")");
    }
    if (dataset.channels != encoder.channels) {
      fail("dataset.channels", "must equal encoder.channels (" + std::to_string(encoder.channels) + ")");
    }
  }
  if (!(dataset.holdout_fraction >= 0.0 && dataset.holdout_fraction < 1.0)) {
    fail("dataset.holdout_fraction", "must lie in [0, 1)");
  }
  check_section("encoder", [&] { encoder.validate(); });
  check_section("mask", [&] { mask.validate(); });
  if (mask.layer > encoder.depth) {
    fail("mask.layer", "must lie in 0.." + std::to_string(encoder.depth));
  }
  if (encoder.depth == 0 && strategy_uses_attention(mask.strategy)) {
    fail("mask.strategy", std::string(strategy_name(mask.strategy)) + " needs encoder.depth >= 1");
  }
  check_section("loss", [&] { loss.validate(); });
  check_section("aug", [&] { aug.validate(encoder.patch_size); });
  if (aug.global_side != encoder.image_side) {
    fail("aug.global_side", "must equal encoder.image_side (" + std::to_string(encoder.image_side) + ")");
  }
  if (!(optim.lr > 0.0)) fail("optim.lr", "must be > 0");
  if (optim.min_lr < 0.0) fail("optim.min_lr", "must be >= 0");
  if (optim.warmup_epochs < 0) fail("optim.warmup_epochs", "must be >= 0");
  if (optim.weight_decay < 0.0 || optim.weight_decay_end < 0.0) {
    fail("optim.weight_decay", "must be >= 0");
  }
  if (!(teacher.momentum >= 0.0 && teacher.momentum <= 1.0)) fail("teacher.momentum", "must lie in [0, 1]");
  if (!(teacher.center_momentum >= 0.0 && teacher.center_momentum <= 1.0)) {
    fail("teacher.center_momentum", "must lie in [0, 1]");
  }
  if (!(teacher.temperature_start > 0.0 && teacher.temperature_end > 0.0)) {
    fail("teacher.temperature_start", "temperatures must be > 0");
  }
  if (!(teacher.temperature_warmup_fraction >= 0.0 && teacher.temperature_warmup_fraction <= 1.0)) {
    fail("teacher.temperature_warmup_fraction", "must lie in [0, 1]");
  }
  if (eval.k < 1) fail("eval.k", "must be >= 1");
  if (eval.batch_size < 1) fail("eval.batch_size", "must be >= 1");
}

RunConfig parse_config(const std::string& json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig c;
  Section root(doc, "");
  root.read("seed", c.seed);
  root.read_enum("precision", c.precision, parse_precision);
  root.read("output_dir", c.output_dir);
  root.read("epochs", c.epochs);
  root.read("batch_size", c.batch_size);
  root.read("max_steps", c.max_steps);
  root.read("checkpoint_every", c.checkpoint_every);
  root.read("log_wallclock", c.log_wallclock);
  {
    auto s = root.child("dataset");
    auto& d = c.dataset;
    s.read("path", d.path);
    s.read("classes", d.classes);
    s.read("per_class", d.per_class);
    s.read("side", d.side);
    s.read("channels", d.channels);
    s.read("seed", d.seed);
    s.read("holdout_fraction", d.holdout_fraction);
    s.finish();
  }
  {
    auto s = root.child("encoder");
    auto& e = c.encoder;
    s.read("image_side", e.image_side);
    s.read("channels", e.channels);
    s.read("patch_size", e.patch_size);
    s.read("embed_dim", e.embed_dim);
    s.read("heads", e.heads);
    s.read("depth", e.depth);
    s.read("mlp_ratio", e.mlp_ratio);
    s.read("out_dim", e.out_dim);
    s.read("head_hidden", e.head_hidden);
    s.read("head_bottleneck", e.head_bottleneck);
    s.read("student_temperature", e.student_temperature);
    s.finish();
  }
  {
    auto s = root.child("mask");
    auto& m = c.mask;
    s.read_enum("strategy", m.strategy, parse_strategy);
    s.read("probability", m.probability);
    s.read("ratio_min", m.ratio_min);
    s.read("ratio_max", m.ratio_max);
    s.read("show_ratio", m.show_ratio);
    s.read("layer", m.layer);
    s.finish();
  }
  {
    auto s = root.child("loss");
    s.read("mim_weight", c.loss.mim_weight);
    s.read_enum("mode", c.loss.mode, parse_mode);
    s.finish();
  }
  {
    auto s = root.child("aug");
    auto& a = c.aug;
    s.read("global_side", a.global_side);
    s.read("local_side", a.local_side);
    s.read("scale_split", a.scale_split);
    s.read("global_scale_max", a.global_scale_max);
    s.read("local_scale_min", a.local_scale_min);
    s.read("local_crop_count", a.local_crop_count);
    s.read("flip_probability", a.flip_probability);
    s.finish();
  }
  {
    auto s = root.child("optim");
    auto& o = c.optim;
    s.read("lr", o.lr);
    s.read("scale_lr", o.scale_lr);
    s.read("min_lr", o.min_lr);
    s.read("warmup_epochs", o.warmup_epochs);
    s.read("weight_decay", o.weight_decay);
    s.read("weight_decay_end", o.weight_decay_end);
    s.finish();
  }
  {
    auto s = root.child("teacher");
    auto& t = c.teacher;
    s.read("momentum", t.momentum);
    s.read("temperature_start", t.temperature_start);
    s.read("temperature_end", t.temperature_end);
    s.read("temperature_warmup_fraction", t.temperature_warmup_fraction);
    s.read("center_momentum", t.center_momentum);
    s.finish();
  }
  {
    auto s = root.child("eval");
    s.read("k", c.eval.k);
    s.read_enum("source", c.eval.source, parse_feature_source);
    s.read("batch_size", c.eval.batch_size);
    s.finish();
  }
  root.finish();
  c.validate();
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("cannot read config " + path.string());
  }
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_config(buffer.str());
}

std::string dump_config(const RunConfig& config) { return to_json(config).dump(2); }

std::uint64_t config_hash(const RunConfig& config) {
  auto doc = to_json(config);
  for (const char* key : {"output_dir", "checkpoint_every", "max_steps", "log_wallclock", "eval"}) {
    doc.erase(key);
  }
  return fnv1a64(doc.dump());
}

StepSchedules build_schedules(const RunConfig& config, std::int64_t steps_per_epoch) {
  const std::int64_t total = steps_per_epoch * config.epochs;
  // A warmup that would swallow the whole run is cut one step short so the
  // cosine phase exists.
  const std::int64_t warmup =
      std::min<std::int64_t>(steps_per_epoch * config.optim.warmup_epochs, std::max<std::int64_t>(total - 1, 0));
  const double peak =
      config.optim.scale_lr ? config.optim.lr * config.batch_size / 256.0 : config.optim.lr;
  StepSchedules s;
  s.lr = {ScheduleKind::WarmupCosine, 0.0, peak, config.optim.min_lr, warmup, total};
  s.weight_decay = {ScheduleKind::Cosine, config.optim.weight_decay, 0.0,
                    config.optim.weight_decay_end, 0, total};
  const auto temp_warmup = static_cast<std::int64_t>(
      std::floor(config.teacher.temperature_warmup_fraction * static_cast<double>(total)));
  s.teacher_temperature = {ScheduleKind::Linear, config.teacher.temperature_start, 0.0,
                           temp_warmup > 0 ? config.teacher.temperature_end
                                           : config.teacher.temperature_start,
                           temp_warmup, total};
  if (temp_warmup == 0) {
    // No warmup: hold the starting temperature for the whole run.
    s.teacher_temperature.final_value = config.teacher.temperature_start;
  }
  s.ema_momentum = {ScheduleKind::Linear, config.teacher.momentum, 0.0, config.teacher.momentum, 0,
                    total};
  return s;
}

TrainSetup make_train_setup(const RunConfig& config, std::int64_t steps_per_epoch) {
  TrainSetup setup;
  setup.encoder = config.encoder;
  setup.policy = config.mask;
  setup.weights = config.loss;
  setup.teacher = config.teacher;
  setup.schedules = build_schedules(config, steps_per_epoch);
  return setup;
}

DataSplit load_split(const RunConfig& config) {
  ImageDataset all;
  if (config.dataset.path.empty()) {
    all = make_synthetic(config.dataset.classes, config.dataset.per_class, config.dataset.side,
                         config.dataset.channels, Rng(config.dataset.seed));
  } else {
    all = load_dataset(config.dataset.path);
  }
  if (all.height != config.encoder.image_side || all.width != config.encoder.image_side ||
      all.channels != config.encoder.channels) {
    throw ConfigError("field 'dataset.path': images are " + std::to_string(all.height) + "x" +
                      std::to_string(all.width) + "x" + std::to_string(all.channels) +
                      ", encoder expects " + std::to_string(config.encoder.image_side) + "x" +
                      std::to_string(config.encoder.image_side) + "x" +
                      std::to_string(config.encoder.channels));
  }
  const auto held = static_cast<std::size_t>(
      std::floor(config.dataset.holdout_fraction * static_cast<double>(all.count)));
  std::vector<std::size_t> train_idx(all.count - held);
  std::vector<std::size_t> hold_idx(held);
  std::iota(train_idx.begin(), train_idx.end(), std::size_t{0});
  std::iota(hold_idx.begin(), hold_idx.end(), all.count - held);
  DataSplit split{all.subset(train_idx), all.subset(hold_idx)};
  if (split.train.count == 0) {
    throw ConfigError("field 'dataset': no training images after the holdout split");
  }
  return split;
}

}  // namespace attmask
