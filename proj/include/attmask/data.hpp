#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "attmask/rng.hpp"
#include "attmask/vit.hpp"

namespace attmask {

/// Byte images with integer labels. Pixels are [count][height][width][channels].
struct ImageDataset {
  std::size_t count = 0;
  int height = 0;
  int width = 0;
  int channels = 0;
  int classes = 0;
  std::vector<std::uint8_t> pixels;
  std::vector<std::uint16_t> labels;

  [[nodiscard]] std::size_t image_bytes() const {
    return static_cast<std::size_t>(height) * static_cast<std::size_t>(width) *
           static_cast<std::size_t>(channels);
  }
  [[nodiscard]] std::span<const std::uint8_t> image(std::size_t i) const {
    return std::span<const std::uint8_t>(pixels).subspan(i * image_bytes(), image_bytes());
  }
  /// Throws FormatError when sizes or labels are inconsistent.
  void validate() const;
  /// New dataset holding the given images, in the given order.
  [[nodiscard]] ImageDataset subset(std::span<const std::size_t> indices) const;
};

/// AMIM packed format, little-endian: "AMIM", u16 version (1), u32 count,
/// u16 height, u16 width, u8 channels, u16 classes, count*h*w*c pixel bytes,
/// count u16 labels.
inline constexpr std::size_t kAmimHeaderBytes = 17;

std::vector<std::uint8_t> encode_amim(const ImageDataset& dataset);
/// Throws FormatError with the byte offset where decoding failed.
ImageDataset decode_amim(std::span<const std::uint8_t> bytes);
void write_amim(const std::filesystem::path& path, const ImageDataset& dataset);
ImageDataset load_dataset(const std::filesystem::path& path);

/// Number of distinct foreground shapes make_synthetic can draw.
inline constexpr int kShapeVocabulary = 8;

/// Each class is one shape (square, disc, triangle, cross, ring, diamond,
/// bar, x) drawn at a random position and scale in a random saturated colour
/// over a low-contrast noisy background. Images are emitted class-interleaved
/// (label i % classes).
ImageDataset make_synthetic(int classes, int per_class, int side, int channels, const Rng& rng);

// Per-channel standardization applied after scaling bytes to [0, 1]:
// x = (v / 255 - kPixelMean) / kPixelStd.
inline constexpr double kPixelMean = 0.5;
inline constexpr double kPixelStd = 0.5;

template <typename T>
T normalize_pixel(double unit_value) {
  return static_cast<T>((unit_value - kPixelMean) / kPixelStd);
}
inline double denormalize_pixel(double model_value) { return model_value * kPixelStd + kPixelMean; }

/// Standardized model inputs for a set of dataset images (no augmentation).
template <typename T>
ImageBatch<T> to_image_batch(const ImageDataset& dataset, std::span<const std::size_t> indices);

struct AugConfig {
  int global_side = 32;
  int local_side = 16;
  double scale_split = 0.25;      // global scales (s, 1], local (local_scale_min, s]
  double global_scale_max = 1.0;
  double local_scale_min = 0.05;
  int local_crop_count = 2;
  double flip_probability = 0.5;

  /// Throws ConfigError; patch_size is checked against both sides.
  void validate(int patch_size) const;
};

struct CropBox {
  int top = 0;
  int left = 0;
  int height = 0;
  int width = 0;
};

/// Random-resized-crop box: area fraction ~ U(scale_lo, scale_hi), log-uniform
/// aspect in [3/4, 4/3], ten attempts then the whole image.
CropBox sample_crop_box(int height, int width, double scale_lo, double scale_hi, Rng& rng);

/// Bilinear (half-pixel centers, clamped to the box) resample of a crop to
/// out_side x out_side, values in [0, 1], optionally mirrored horizontally.
std::vector<double> resized_crop(std::span<const std::uint8_t> image, int height, int width,
                                 int channels, const CropBox& box, int out_side, bool flip);

/// Two global views then the local crops of one image, standardized.
template <typename T>
struct ViewSet {
  std::vector<std::vector<T>> globals;
  std::vector<std::vector<T>> locals;
};

template <typename T>
ViewSet<T> make_views(std::span<const std::uint8_t> image, int height, int width, int channels,
                      const AugConfig& aug, Rng& rng);

/// Views of several images packed for batched forwards: global rows are
/// ordered view-major (view * B + image), local rows crop-major.
template <typename T>
struct ViewBatch {
  std::size_t images = 0;
  int local_crop_count = 0;
  ImageBatch<T> globals;
  ImageBatch<T> locals;
};

template <typename T>
ViewBatch<T> pack_views(const std::vector<ViewSet<T>>& views, const AugConfig& aug, int channels);

}  // namespace attmask
