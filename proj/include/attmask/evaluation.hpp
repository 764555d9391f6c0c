#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "attmask/data.hpp"
#include "attmask/masking.hpp"
#include "attmask/rng.hpp"
#include "attmask/vit.hpp"

namespace attmask {

enum class FeatureSource { Cls, Gap };

std::string_view feature_source_name(FeatureSource s);
FeatureSource parse_feature_source(std::string_view name);

/// L2-normalized feature rows with labels. Features are kept in double so
/// that banks from float and double models compare on equal terms.
struct FeatureBank {
  std::size_t count = 0;
  std::size_t dim = 0;
  std::vector<double> features;  // [count x dim]
  std::vector<int> labels;
  FeatureSource source = FeatureSource::Cls;

  [[nodiscard]] std::span<const double> row(std::size_t i) const {
    return std::span<const double>(features).subspan(i * dim, dim);
  }
  /// Keeps the listed rows, in order.
  [[nodiscard]] FeatureBank subset(std::span<const std::size_t> rows) const;
};

/// Frozen forward pass (no masking, no augmentation) over every image.
template <typename T>
FeatureBank extract_features(const ParamSet<T>& params, const EncoderConfig& config,
                             const ImageDataset& dataset, FeatureSource source,
                             std::size_t batch_size = 64);

struct KnnResult {
  std::vector<int> predictions;
  double accuracy = 0.0;
};

inline constexpr double kKnnTemperature = 0.07;

/// Cosine-similarity k-NN: top-k bank rows (ties by lower index), each
/// voting exp(sim / temperature) for its label; ties between classes go to
/// the lower label.
KnnResult knn_classify(const FeatureBank& bank, const FeatureBank& queries, std::size_t k,
                       double temperature = kKnnTemperature);

/// k-NN against a bank reduced to `per_class` random examples of each class.
KnnResult few_example_knn(const FeatureBank& bank, const FeatureBank& queries, std::size_t k,
                          std::size_t per_class, Rng& rng, double temperature = kKnnTemperature);

enum class MaskingMode { Attention, Random };

std::string_view masking_mode_name(MaskingMode m);
MaskingMode parse_masking_mode(std::string_view name);

/// Copy of `image` with the pixels of every masked patch set to zero
/// (raw bytes, before standardization).
std::vector<std::uint8_t> zero_masked_patches(std::span<const std::uint8_t> image, int side,
                                              int channels, int patch_size, const MaskVector& mask);

struct RatioAccuracy {
  double ratio = 0.0;
  double accuracy = 0.0;
};

/// For each ratio r: zero the pixels of the top floor(r n) patches by the
/// reference model's last-layer [CLS] attention (attention mode) or of
/// floor(r n) random patches (random mode), then classify the perturbed
/// queries with k-NN against the unperturbed bank.
template <typename T>
std::vector<RatioAccuracy> masked_inference_eval(const ParamSet<T>& model,
                                                 const ParamSet<T>& reference,
                                                 const EncoderConfig& config,
                                                 const FeatureBank& bank,
                                                 const ImageDataset& queries,
                                                 std::span<const double> ratios, MaskingMode mode,
                                                 std::size_t k, const Rng& rng);

/// Last-layer (or given layer) [CLS] attention for every image of a dataset.
template <typename T>
std::vector<std::vector<T>> dataset_cls_attention(const ParamSet<T>& params,
                                                  const EncoderConfig& config,
                                                  const ImageDataset& dataset, int layer = 0,
                                                  std::size_t batch_size = 64);

/// Binary greyscale PGM (P5), min-max scaled to 0..255; constant maps are all 0.
void write_pgm(const std::filesystem::path& path, std::span<const double> values, int width,
               int height);
/// Row-major CSV with round-trip precision.
void write_csv_grid(const std::filesystem::path& path, std::span<const double> values, int width,
                    int height);
std::vector<double> read_csv_grid(const std::filesystem::path& path);

/// Writes head_<h>.csv/.pgm for every head and mean.csv/.pgm for the
/// head-averaged [CLS] attention of one image, each reshaped to the token
/// grid. Returns the written paths.
template <typename T>
std::vector<std::filesystem::path> export_attention_map(const AttentionRecord<T>& record, int layer,
                                                        std::size_t image,
                                                        const std::filesystem::path& out_dir);

inline constexpr std::uint8_t kOverlayColor[3] = {255, 0, 255};

/// Binary PPM (P6) of the image with masked patches painted kOverlayColor.
/// Single-channel images are expanded to grey RGB.
void export_mask_overlay(std::span<const std::uint8_t> image, int side, int channels,
                         int patch_size, const MaskVector& mask, const std::filesystem::path& path);

}  // namespace attmask
