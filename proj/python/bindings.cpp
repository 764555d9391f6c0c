#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cmath>
#include <cstring>
#include <optional>
#include <string>

#include "attmask/checkpoint.hpp"
#include "attmask/config.hpp"
#include "attmask/data.hpp"
#include "attmask/error.hpp"
#include "attmask/evaluation.hpp"
#include "attmask/masking.hpp"
#include "attmask/pretrain.hpp"

namespace py = pybind11;
using namespace attmask;

namespace {

using Bytes = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;
using Doubles = py::array_t<double, py::array::c_style | py::array::forcecast>;

// A config argument is either JSON text or a path to a JSON file.
RunConfig config_arg(const std::string& config) {
  const auto first = config.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && config[first] == '{') {
    return parse_config(config);
  }
  return load_config(config);
}

py::array_t<std::uint8_t> mask_array(const MaskVector& m) {
  py::array_t<std::uint8_t> out(static_cast<py::ssize_t>(m.size()));
  auto view = out.mutable_unchecked<1>();
  for (std::size_t i = 0; i < m.size(); ++i) view(static_cast<py::ssize_t>(i)) = m.bits[i];
  return out;
}

std::vector<double> to_vector(const Doubles& a) {
  if (a.ndim() != 1) throw DimensionError("expected a 1-D attention vector");
  return std::vector<double>(a.data(), a.data() + a.size());
}

py::dict dataset_dict(const ImageDataset& ds) {
  py::array_t<std::uint8_t> images({static_cast<py::ssize_t>(ds.count), static_cast<py::ssize_t>(ds.height),
                                    static_cast<py::ssize_t>(ds.width), static_cast<py::ssize_t>(ds.channels)});
  std::memcpy(images.mutable_data(), ds.pixels.data(), ds.pixels.size());
  py::array_t<std::uint16_t> labels(static_cast<py::ssize_t>(ds.count));
  std::memcpy(labels.mutable_data(), ds.labels.data(), ds.labels.size() * sizeof(std::uint16_t));
  py::dict d;
  d["images"] = images;
  d["labels"] = labels;
  d["classes"] = ds.classes;
  return d;
}

ImageDataset dataset_from(const Bytes& images, std::optional<py::array_t<std::uint16_t>> labels, int classes) {
  if (images.ndim() != 4) throw DimensionError("images must have shape [N, h, w, c]");
  ImageDataset ds;
  ds.count = static_cast<std::size_t>(images.shape(0));
  ds.height = static_cast<int>(images.shape(1));
  ds.width = static_cast<int>(images.shape(2));
  ds.channels = static_cast<int>(images.shape(3));
  ds.classes = classes;
  ds.pixels.assign(images.data(), images.data() + images.size());
  if (labels) {
    const auto l = labels->cast<py::array_t<std::uint16_t, py::array::c_style | py::array::forcecast>>();
    if (static_cast<std::size_t>(l.size()) != ds.count) throw DimensionError("one label per image required");
    ds.labels.assign(l.data(), l.data() + l.size());
  } else {
    ds.labels.assign(ds.count, 0);
  }
  ds.validate();
  return ds;
}

template <typename T>
const ParamSet<T>& pick_model(const TrainState<T>& state, const std::string& model) {
  if (model == "teacher") return state.pair.teacher;
  if (model == "student") return state.pair.student;
  throw ConfigError("model must be 'teacher' or 'student', got '" + model + "'");
}

template <typename T>
py::array_t<double> features_impl(const RunConfig& config, const std::string& checkpoint,
                                  const ImageDataset& ds, const std::string& model,
                                  FeatureSource source) {
  const auto state = load_checkpoint<T>(checkpoint, config);
  const auto bank = extract_features(pick_model(state, model), config.encoder, ds, source,
                                     static_cast<std::size_t>(config.eval.batch_size));
  py::array_t<double> out({static_cast<py::ssize_t>(bank.count), static_cast<py::ssize_t>(bank.dim)});
  std::memcpy(out.mutable_data(), bank.features.data(), bank.features.size() * sizeof(double));
  return out;
}

template <typename T>
py::array_t<double> attention_impl(const RunConfig& config, const std::string& checkpoint,
                                   const ImageDataset& ds, const std::string& model, int layer) {
  const auto state = load_checkpoint<T>(checkpoint, config);
  const auto att = dataset_cls_attention(pick_model(state, model), config.encoder, ds, layer,
                                         static_cast<std::size_t>(config.eval.batch_size));
  const auto n = static_cast<py::ssize_t>(config.encoder.num_patches());
  py::array_t<double> out({static_cast<py::ssize_t>(att.size()), n});
  auto* dst = out.mutable_data();
  for (const auto& row : att) {
    for (const auto v : row) *dst++ = static_cast<double>(v);
  }
  return out;
}

FeatureBank bank_from(const Doubles& rows, const py::array_t<int>& labels) {
  if (rows.ndim() != 2) throw DimensionError("features must be 2-D");
  FeatureBank b;
  b.count = static_cast<std::size_t>(rows.shape(0));
  b.dim = static_cast<std::size_t>(rows.shape(1));
  b.features.assign(rows.data(), rows.data() + rows.size());
  for (std::size_t i = 0; i < b.count; ++i) {
    double norm = 0;
    for (std::size_t j = 0; j < b.dim; ++j) norm += b.features[i * b.dim + j] * b.features[i * b.dim + j];
    norm = std::max(std::sqrt(norm), 1e-12);
    for (std::size_t j = 0; j < b.dim; ++j) b.features[i * b.dim + j] /= norm;
  }
  const auto l = labels.cast<py::array_t<int, py::array::c_style | py::array::forcecast>>();
  if (static_cast<std::size_t>(l.size()) != b.count) throw DimensionError("one label per feature row required");
  b.labels.assign(l.data(), l.data() + l.size());
  return b;
}

}  // namespace

PYBIND11_MODULE(_attmask, m) {
  m.doc() = "Attention-guided token masking, pretraining and frozen-feature evaluation.";

  // Translators run most-recent first, so the base class goes in first.
  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<StateError>(m, "StateError", PyExc_RuntimeError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);
  py::register_exception<ParameterError>(m, "ParameterError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);

  m.def("strategies", [] {
    std::vector<std::string> out;
    for (const auto s : {MaskStrategy::Random, MaskStrategy::Blockwise, MaskStrategy::AttMaskHigh,
                         MaskStrategy::AttMaskLow, MaskStrategy::AttMaskHint}) {
      out.emplace_back(strategy_name(s));
    }
    return out;
  });
  m.def("masked_count", &masked_count, py::arg("n"), py::arg("ratio"));
  m.def("random_mask", [](std::size_t n, double ratio, std::uint64_t seed) {
    Rng rng(seed);
    return mask_array(random_mask(n, ratio, rng));
  }, py::arg("n"), py::arg("ratio"), py::arg("seed") = 0);
  m.def("blockwise_mask", [](std::size_t n, double ratio, std::uint64_t seed) {
    Rng rng(seed);
    return mask_array(blockwise_mask(n, ratio, rng));
  }, py::arg("n"), py::arg("ratio"), py::arg("seed") = 0);
  m.def("attmask_high", [](const Doubles& att, double ratio) {
    const auto v = to_vector(att);
    return mask_array(attmask_high<double>(v, ratio));
  }, py::arg("attention"), py::arg("ratio"));
  m.def("attmask_low", [](const Doubles& att, double ratio) {
    const auto v = to_vector(att);
    return mask_array(attmask_low<double>(v, ratio));
  }, py::arg("attention"), py::arg("ratio"));
  m.def("attmask_hint", [](const Doubles& att, double ratio, double show_ratio, std::uint64_t seed) {
    const auto v = to_vector(att);
    Rng rng(seed);
    return mask_array(attmask_hint<double>(v, ratio, show_ratio, rng));
  }, py::arg("attention"), py::arg("ratio"), py::arg("show_ratio") = 0.1, py::arg("seed") = 0);
  m.def("make_mask", [](const std::string& strategy, std::size_t n, double ratio, std::optional<Doubles> att,
                        double show_ratio, std::uint64_t seed) {
    const auto v = att ? to_vector(*att) : std::vector<double>{};
    Rng rng(seed);
    return mask_array(make_mask<double>(parse_strategy(strategy), n, ratio, show_ratio, v, rng));
  }, py::arg("strategy"), py::arg("n"), py::arg("ratio"), py::arg("attention") = py::none(),
     py::arg("show_ratio") = 0.1, py::arg("seed") = 0);

  py::class_<MaskVector>(m, "MaskVector")
      .def(py::init([](const Bytes& bits) {
        MaskVector mv(static_cast<std::size_t>(bits.size()));
        for (std::size_t i = 0; i < mv.size(); ++i) mv.bits[i] = bits.data()[i] ? 1 : 0;
        return mv;
      }))
      .def_static("from_text", &MaskVector::from_text)
      .def("to_text", &MaskVector::to_text)
      .def("count", &MaskVector::count)
      .def("indices", &MaskVector::indices)
      .def_property_readonly("bits", [](const MaskVector& mv) { return mask_array(mv); })
      .def("__len__", &MaskVector::size)
      .def("__eq__", [](const MaskVector& a, const MaskVector& b) { return a == b; });

  m.def("make_synthetic", [](int classes, int per_class, int side, int channels, std::uint64_t seed) {
    return dataset_dict(make_synthetic(classes, per_class, side, channels, Rng(seed)));
  }, py::arg("classes") = 4, py::arg("per_class") = 500, py::arg("side") = 32, py::arg("channels") = 3,
     py::arg("seed") = 7);
  m.def("write_amim", [](const std::string& path, const Bytes& images, py::array_t<std::uint16_t> labels,
                         int classes) { write_amim(path, dataset_from(images, labels, classes)); },
        py::arg("path"), py::arg("images"), py::arg("labels"), py::arg("classes"));
  m.def("load_amim", [](const std::string& path) { return dataset_dict(load_dataset(path)); }, py::arg("path"));

  m.def("dump_config", [](const std::string& config) { return dump_config(config_arg(config)); },
        py::arg("config"), "Canonical JSON of a config (JSON text or path), defaults filled in.");
  m.def("config_hash", [](const std::string& config) { return config_hash(config_arg(config)); },
        py::arg("config"));

  m.def("pretrain", [](const std::string& config_text, std::optional<std::string> output_dir,
                       std::optional<std::string> resume, std::int64_t max_steps) {
    auto config = config_arg(config_text);
    if (output_dir) config.output_dir = *output_dir;
    if (max_steps > 0) config.max_steps = max_steps;
    PretrainOptions opts;
    if (resume) opts.resume = *resume;
    std::int64_t step = 0;
    std::string last;
    {
      py::gil_scoped_release release;
      if (config.precision == Precision::Float64) {
        auto r = run_pretraining<double>(config, opts);
        step = r.state.step;
        last = r.last_checkpoint.string();
      } else {
        auto r = run_pretraining<float>(config, opts);
        step = r.state.step;
        last = r.last_checkpoint.string();
      }
    }
    py::dict d;
    d["output_dir"] = config.output_dir;
    d["step"] = step;
    d["checkpoint"] = last;
    return d;
  }, py::arg("config"), py::arg("output_dir") = py::none(), py::arg("resume") = py::none(),
     py::arg("max_steps") = 0);

  m.def("extract_features", [](const std::string& config_text, const std::string& checkpoint, const Bytes& images,
                               const std::string& model, const std::string& source) {
    const auto config = config_arg(config_text);
    const auto ds = dataset_from(images, std::nullopt, 1);
    const auto src = parse_feature_source(source);
    return config.precision == Precision::Float64 ? features_impl<double>(config, checkpoint, ds, model, src)
                                                  : features_impl<float>(config, checkpoint, ds, model, src);
  }, py::arg("config"), py::arg("checkpoint"), py::arg("images"), py::arg("model") = "teacher",
     py::arg("source") = "cls");

  m.def("cls_attention", [](const std::string& config_text, const std::string& checkpoint, const Bytes& images,
                            const std::string& model, int layer) {
    const auto config = config_arg(config_text);
    const auto ds = dataset_from(images, std::nullopt, 1);
    return config.precision == Precision::Float64 ? attention_impl<double>(config, checkpoint, ds, model, layer)
                                                  : attention_impl<float>(config, checkpoint, ds, model, layer);
  }, py::arg("config"), py::arg("checkpoint"), py::arg("images"), py::arg("model") = "teacher",
     py::arg("layer") = 0);

  m.def("knn_classify", [](const Doubles& bank, const py::array_t<int>& bank_labels, const Doubles& queries,
                           const py::array_t<int>& query_labels, std::size_t k, double temperature) {
    const auto r = knn_classify(bank_from(bank, bank_labels), bank_from(queries, query_labels), k, temperature);
    return py::make_tuple(py::array_t<int>(static_cast<py::ssize_t>(r.predictions.size()), r.predictions.data()),
                          r.accuracy);
  }, py::arg("bank"), py::arg("bank_labels"), py::arg("queries"), py::arg("query_labels"), py::arg("k") = 20,
     py::arg("temperature") = kKnnTemperature,
     "Cosine k-NN; rows are L2-normalized first. Returns (predictions, accuracy).");
}
