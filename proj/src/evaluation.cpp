#include "attmask/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "attmask/error.hpp"
#include "attmask/ops.hpp"

namespace attmask {

std::string_view feature_source_name(FeatureSource s) {
  return s == FeatureSource::Cls ? "cls" : "gap";
}

FeatureSource parse_feature_source(std::string_view name) {
  if (name == "cls") return FeatureSource::Cls;
  if (name == "gap") return FeatureSource::Gap;
  throw ConfigError("unknown feature source '" + std::string(name) + "' (expected cls or gap)");
}

std::string_view masking_mode_name(MaskingMode m) {
  return m == MaskingMode::Attention ? "attention" : "random";
}

MaskingMode parse_masking_mode(std::string_view name) {
  if (name == "attention") return MaskingMode::Attention;
  if (name == "random") return MaskingMode::Random;
  throw ConfigError("unknown masking mode '" + std::string(name) + "' (expected attention or random)");
}

FeatureBank FeatureBank::subset(std::span<const std::size_t> rows) const {
  FeatureBank out;
  out.dim = dim;
  out.source = source;
  out.count = rows.size();
  for (const auto r : rows) {
    const auto src = row(r);
    out.features.insert(out.features.end(), src.begin(), src.end());
    out.labels.push_back(labels[r]);
  }
  return out;
}

namespace {

void check_resolution(const EncoderConfig& config, const ImageDataset& dataset) {
  if (dataset.height != config.image_side || dataset.width != config.image_side ||
      dataset.channels != config.channels) {
    throw ConfigError("dataset images are " + std::to_string(dataset.height) + "x" +
                      std::to_string(dataset.width) + "x" + std::to_string(dataset.channels) +
                      " but the model expects " + std::to_string(config.image_side) + "x" +
                      std::to_string(config.image_side) + "x" + std::to_string(config.channels));
  }
}

}  // namespace

template <typename T>
FeatureBank extract_features(const ParamSet<T>& params, const EncoderConfig& config,
                             const ImageDataset& dataset, FeatureSource source,
                             std::size_t batch_size) {
  check_resolution(config, dataset);
  NoGradGuard no_grad;
  FeatureBank bank;
  bank.source = source;
  bank.count = dataset.count;
  bank.dim = static_cast<std::size_t>(config.embed_dim);
  bank.features.reserve(bank.count * bank.dim);
  batch_size = std::max<std::size_t>(1, batch_size);
  for (std::size_t begin = 0; begin < dataset.count; begin += batch_size) {
    const std::size_t end = std::min(dataset.count, begin + batch_size);
    std::vector<std::size_t> idx(end - begin);
    std::iota(idx.begin(), idx.end(), begin);
    const auto images = to_image_batch<T>(dataset, idx);
    const auto seq = add_position_embeddings(tokenize(images, params, config), params, config);
    const auto out = encoder_forward(seq, params, config, -1).sequence;
    const auto feats = source == FeatureSource::Cls ? cls_features(out) : gap_features(out);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      double norm = 0.0;
      for (std::size_t j = 0; j < bank.dim; ++j) {
        const double v = feats[r * bank.dim + j];
        norm += v * v;
      }
      norm = std::max(std::sqrt(norm), 1e-12);
      for (std::size_t j = 0; j < bank.dim; ++j) {
        bank.features.push_back(static_cast<double>(feats[r * bank.dim + j]) / norm);
      }
    }
  }
  bank.labels.assign(dataset.labels.begin(), dataset.labels.end());
  return bank;
}

KnnResult knn_classify(const FeatureBank& bank, const FeatureBank& queries, std::size_t k,
                       double temperature) {
  if (bank.count == 0) {
    throw ContractError("knn_classify: empty feature bank");
  }
  if (k == 0 || k > bank.count) {
    throw ContractError("knn_classify: k = " + std::to_string(k) + " must lie in [1, " +
                        std::to_string(bank.count) + "]");
  }
  if (queries.dim != bank.dim) {
    throw DimensionError("knn_classify: query dim " + std::to_string(queries.dim) +
                         " vs bank dim " + std::to_string(bank.dim));
  }
  const int classes = std::max(*std::max_element(bank.labels.begin(), bank.labels.end()),
                               queries.count ? *std::max_element(queries.labels.begin(),
                                                                 queries.labels.end())
                                             : 0) + 1;
  KnnResult result;
  result.predictions.resize(queries.count);
  std::vector<double> sims(bank.count);
  std::vector<std::size_t> order(bank.count);
  std::vector<double> votes(static_cast<std::size_t>(classes));
  std::size_t correct = 0;
  for (std::size_t q = 0; q < queries.count; ++q) {
    const auto query = queries.row(q);
    for (std::size_t i = 0; i < bank.count; ++i) {
      const auto row = bank.row(i);
      sims[i] = std::inner_product(query.begin(), query.end(), row.begin(), 0.0);
    }
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::size_t a, std::size_t b) {
                        return sims[a] > sims[b] || (sims[a] == sims[b] && a < b);
                      });
    std::fill(votes.begin(), votes.end(), 0.0);
    for (std::size_t i = 0; i < k; ++i) {
      votes[static_cast<std::size_t>(bank.labels[order[i]])] += std::exp(sims[order[i]] / temperature);
    }
    const auto best = std::max_element(votes.begin(), votes.end()) - votes.begin();
    result.predictions[q] = static_cast<int>(best);
    correct += result.predictions[q] == queries.labels[q] ? 1 : 0;
  }
  result.accuracy = queries.count ? static_cast<double>(correct) / static_cast<double>(queries.count) : 0.0;
  return result;
}

KnnResult few_example_knn(const FeatureBank& bank, const FeatureBank& queries, std::size_t k,
                          std::size_t per_class, Rng& rng, double temperature) {
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < bank.count; ++i) {
    by_class[bank.labels[i]].push_back(i);
  }
  std::vector<std::size_t> keep;
  for (auto& [label, rows] : by_class) {
    if (rows.size() < per_class) {
      throw ContractError("few_example_knn: class " + std::to_string(label) + " has " +
                          std::to_string(rows.size()) + " examples, need " +
                          std::to_string(per_class));
    }
    for (std::size_t i = 0; i < per_class; ++i) {
      const auto j = i + static_cast<std::size_t>(rng.below(rows.size() - i));
      std::swap(rows[i], rows[j]);
    }
    keep.insert(keep.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(per_class));
  }
  std::sort(keep.begin(), keep.end());
  const auto reduced = bank.subset(keep);
  return knn_classify(reduced, queries, std::min(k, per_class * by_class.size()), temperature);
}

std::vector<std::uint8_t> zero_masked_patches(std::span<const std::uint8_t> image, int side,
                                              int channels, int patch_size, const MaskVector& mask) {
  const int grid = side / patch_size;
  if (static_cast<std::size_t>(grid * grid) != mask.size()) {
    throw DimensionError("mask of length " + std::to_string(mask.size()) + " for a " +
                         std::to_string(grid) + "x" + std::to_string(grid) + " token grid");
  }
  std::vector<std::uint8_t> out(image.begin(), image.end());
  const auto c = static_cast<std::size_t>(channels);
  for (std::size_t t = 0; t < mask.size(); ++t) {
    if (!mask.bits[t]) {
      continue;
    }
    const std::size_t gy = t / static_cast<std::size_t>(grid), gx = t % static_cast<std::size_t>(grid);
    for (std::size_t y = 0; y < static_cast<std::size_t>(patch_size); ++y) {
      const std::size_t row = gy * static_cast<std::size_t>(patch_size) + y;
      const std::size_t col = gx * static_cast<std::size_t>(patch_size);
      std::fill_n(out.begin() + static_cast<std::ptrdiff_t>((row * static_cast<std::size_t>(side) + col) * c),
                  static_cast<std::size_t>(patch_size) * c, std::uint8_t{0});
    }
  }
  return out;
}

template <typename T>
std::vector<std::vector<T>> dataset_cls_attention(const ParamSet<T>& params,
                                                  const EncoderConfig& config,
                                                  const ImageDataset& dataset, int layer,
                                                  std::size_t batch_size) {
  check_resolution(config, dataset);
  const int l = layer == 0 ? config.depth : layer;
  if (l < 1 || l > config.depth) {
    throw RangeError("attention layer " + std::to_string(l) + " outside valid range 1.." +
                     std::to_string(config.depth));
  }
  NoGradGuard no_grad;
  std::vector<std::vector<T>> out;
  out.reserve(dataset.count);
  batch_size = std::max<std::size_t>(1, batch_size);
  for (std::size_t begin = 0; begin < dataset.count; begin += batch_size) {
    const std::size_t end = std::min(dataset.count, begin + batch_size);
    std::vector<std::size_t> idx(end - begin);
    std::iota(idx.begin(), idx.end(), begin);
    const auto seq =
        add_position_embeddings(tokenize(to_image_batch<T>(dataset, idx), params, config), params, config);
    const auto enc = encoder_forward(seq, params, config, l);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      out.push_back(cls_attention(enc.attention, l, b).values);
    }
  }
  return out;
}

template <typename T>
std::vector<RatioAccuracy> masked_inference_eval(const ParamSet<T>& model,
                                                 const ParamSet<T>& reference,
                                                 const EncoderConfig& config,
                                                 const FeatureBank& bank,
                                                 const ImageDataset& queries,
                                                 std::span<const double> ratios, MaskingMode mode,
                                                 std::size_t k, const Rng& rng) {
  const auto n = static_cast<std::size_t>(config.num_patches());
  std::vector<std::vector<T>> attention;
  if (mode == MaskingMode::Attention) {
    attention = dataset_cls_attention(reference, config, queries);
  }
  std::vector<RatioAccuracy> results;
  for (std::size_t ri = 0; ri < ratios.size(); ++ri) {
    const double r = ratios[ri];
    if (!(r >= 0.0 && r <= 1.0)) {
      throw ParameterError("masked_inference_eval: ratio " + std::to_string(r) + " outside [0, 1]");
    }
    ImageDataset perturbed = queries;
    for (std::size_t i = 0; i < queries.count; ++i) {
      MaskVector mask;
      if (mode == MaskingMode::Attention) {
        mask = attmask_high<T>(attention[i], r);
      } else {
        Rng stream = rng.path(ri, i);
        mask = random_mask(n, r, stream);
      }
      const auto masked = zero_masked_patches(queries.image(i), queries.height, queries.channels,
                                              config.patch_size, mask);
      std::copy(masked.begin(), masked.end(),
                perturbed.pixels.begin() + static_cast<std::ptrdiff_t>(i * queries.image_bytes()));
    }
    const auto feats = extract_features(model, config, perturbed, bank.source);
    results.push_back({r, knn_classify(bank, feats, k).accuracy});
  }
  return results;
}

namespace {

std::ofstream open_for_write(const std::filesystem::path& path, bool binary) {
  std::ofstream out(path, binary ? std::ios::binary | std::ios::trunc : std::ios::trunc);
  if (!out) {
    throw IoError("cannot open " + path.string() + " for writing");
  }
  return out;
}

void finish(std::ofstream& out, const std::filesystem::path& path) {
  out.flush();
  if (!out) {
    throw IoError("write failed for " + path.string());
  }
}

}  // namespace

void write_pgm(const std::filesystem::path& path, std::span<const double> values, int width,
               int height) {
  if (values.size() != static_cast<std::size_t>(width) * static_cast<std::size_t>(height)) {
    throw DimensionError("write_pgm: value count does not match " + std::to_string(width) + "x" +
                         std::to_string(height));
  }
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double range = values.empty() ? 0.0 : *hi - *lo;
  std::vector<std::uint8_t> pixels(values.size(), 0);
  if (range > 0.0) {
    for (std::size_t i = 0; i < values.size(); ++i) {
      pixels[i] = static_cast<std::uint8_t>(std::lround(255.0 * (values[i] - *lo) / range));
    }
  }
  auto out = open_for_write(path, true);
  out << "P5\n" << width << ' ' << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  finish(out, path);
}

void write_csv_grid(const std::filesystem::path& path, std::span<const double> values, int width,
                    int height) {
  if (values.size() != static_cast<std::size_t>(width) * static_cast<std::size_t>(height)) {
    throw DimensionError("write_csv_grid: value count does not match grid");
  }
  auto out = open_for_write(path, false);
  out.precision(17);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      out << (x ? "," : "") << values[static_cast<std::size_t>(y * width + x)];
    }
    out << '\n';
  }
  finish(out, path);
}

std::vector<double> read_csv_grid(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw IoError("cannot open " + path.string());
  }
  std::vector<double> values;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream row(line);
    std::string cell;
    while (std::getline(row, cell, ',')) {
      values.push_back(std::stod(cell));
    }
  }
  return values;
}

template <typename T>
std::vector<std::filesystem::path> export_attention_map(const AttentionRecord<T>& record, int layer,
                                                        std::size_t image,
                                                        const std::filesystem::path& out_dir) {
  const std::size_t n = record.seq() - 1;
  const auto g = static_cast<int>(std::lround(std::sqrt(static_cast<double>(n))));
  if (static_cast<std::size_t>(g * g) != n) {
    throw ParameterError("export_attention_map: " + std::to_string(n) +
                         " tokens do not form a square grid");
  }
  std::filesystem::create_directories(out_dir);
  std::vector<std::filesystem::path> written;
  auto emit = [&](const std::string& stem, std::vector<double> values) {
    const auto csv = out_dir / (stem + ".csv");
    const auto pgm = out_dir / (stem + ".pgm");
    write_csv_grid(csv, values, g, g);
    write_pgm(pgm, values, g, g);
    written.push_back(csv);
    written.push_back(pgm);
  };
  for (std::size_t h = 0; h < record.heads(); ++h) {
    const auto a = record.head_matrix(layer, image, h);
    emit("head_" + std::to_string(h), std::vector<double>(a.begin() + 1, a.begin() + static_cast<std::ptrdiff_t>(n + 1)));
  }
  const auto mean = cls_attention(record, layer, image).values;
  emit("mean", std::vector<double>(mean.begin(), mean.end()));
  return written;
}

void export_mask_overlay(std::span<const std::uint8_t> image, int side, int channels,
                         int patch_size, const MaskVector& mask, const std::filesystem::path& path) {
  const auto s = static_cast<std::size_t>(side);
  const auto c = static_cast<std::size_t>(channels);
  if (image.size() != s * s * c || (channels != 1 && channels != 3)) {
    throw DimensionError("export_mask_overlay: expected a " + std::to_string(side) + "x" +
                         std::to_string(side) + " image with 1 or 3 channels");
  }
  const int grid = side / patch_size;
  if (static_cast<std::size_t>(grid * grid) != mask.size()) {
    throw DimensionError("export_mask_overlay: mask length " + std::to_string(mask.size()) +
                         " does not match the token grid");
  }
  std::vector<std::uint8_t> rgb(s * s * 3);
  for (std::size_t y = 0; y < s; ++y) {
    for (std::size_t x = 0; x < s; ++x) {
      const std::size_t token = (y / static_cast<std::size_t>(patch_size)) * static_cast<std::size_t>(grid) +
                                x / static_cast<std::size_t>(patch_size);
      for (std::size_t ch = 0; ch < 3; ++ch) {
        rgb[(y * s + x) * 3 + ch] = mask.bits[token] ? kOverlayColor[ch]
                                                     : image[(y * s + x) * c + (c == 1 ? 0 : ch)];
      }
    }
  }
  auto out = open_for_write(path, true);
  out << "P6\n" << side << ' ' << side << "\n255\n";
  out.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
  finish(out, path);
}

#define ATTMASK_INSTANTIATE(T)                                                                    \
  template FeatureBank extract_features<T>(const ParamSet<T>&, const EncoderConfig&,              \
                                           const ImageDataset&, FeatureSource, std::size_t);      \
  template std::vector<std::vector<T>> dataset_cls_attention<T>(                                  \
      const ParamSet<T>&, const EncoderConfig&, const ImageDataset&, int, std::size_t);           \
  template std::vector<RatioAccuracy> masked_inference_eval<T>(                                   \
      const ParamSet<T>&, const ParamSet<T>&, const EncoderConfig&, const FeatureBank&,           \
      const ImageDataset&, std::span<const double>, MaskingMode, std::size_t, const Rng&);        \
  template std::vector<std::filesystem::path> export_attention_map<T>(                            \
      const AttentionRecord<T>&, int, std::size_t, const std::filesystem::path&);

ATTMASK_INSTANTIATE(float)
ATTMASK_INSTANTIATE(double)
#undef ATTMASK_INSTANTIATE

}  // namespace attmask
