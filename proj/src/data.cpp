#include "attmask/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <string>

#include "attmask/error.hpp"

namespace attmask {

void ImageDataset::validate() const {
  if (height <= 0 || width <= 0 || channels <= 0) {
    if (count != 0) {
      throw FormatError("dataset: non-positive image dimensions");
    }
  }
  if (pixels.size() != count * image_bytes()) {
    throw FormatError("dataset: pixel buffer holds " + std::to_string(pixels.size()) +
                      " bytes, expected " + std::to_string(count * image_bytes()));
  }
  if (labels.size() != count) {
    throw FormatError("dataset: " + std::to_string(labels.size()) + " labels for " +
                      std::to_string(count) + " images");
  }
  for (std::size_t i = 0; i < count; ++i) {
    if (labels[i] >= classes) {
      throw FormatError("dataset: label " + std::to_string(labels[i]) + " of image " +
                        std::to_string(i) + " outside [0, " + std::to_string(classes) + ")");
    }
  }
}

ImageDataset ImageDataset::subset(std::span<const std::size_t> indices) const {
  ImageDataset out;
  out.height = height;
  out.width = width;
  out.channels = channels;
  out.classes = classes;
  out.count = indices.size();
  out.pixels.reserve(indices.size() * image_bytes());
  for (const auto i : indices) {
    const auto img = image(i);
    out.pixels.insert(out.pixels.end(), img.begin(), img.end());
    out.labels.push_back(labels[i]);
  }
  return out;
}

namespace {

void put_u8(std::vector<std::uint8_t>& out, std::uint8_t v) { out.push_back(v); }
void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}
void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) {
    out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - offset_ < n) {
      throw FormatError("AMIM: truncated " + std::string(what) + " at byte offset " +
                        std::to_string(offset_) + " (need " + std::to_string(n) + " bytes, have " +
                        std::to_string(bytes_.size() - offset_) + ")");
    }
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return bytes_[offset_++];
  }
  std::uint16_t u16(const char* what) {
    need(2, what);
    const auto v = static_cast<std::uint16_t>(bytes_[offset_] | (bytes_[offset_ + 1] << 8));
    offset_ += 2;
    return v;
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(bytes_[offset_ + static_cast<std::size_t>(i)]) << (8 * i);
    }
    offset_ += 4;
    return v;
  }
  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.subspan(offset_, n);
    offset_ += n;
    return s;
  }
  [[nodiscard]] std::size_t offset() const { return offset_; }
  [[nodiscard]] std::size_t remaining() const { return bytes_.size() - offset_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t offset_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_amim(const ImageDataset& dataset) {
  dataset.validate();
  std::vector<std::uint8_t> out;
  out.reserve(kAmimHeaderBytes + dataset.pixels.size() + 2 * dataset.count);
  for (const char c : {'A', 'M', 'I', 'M'}) {
    out.push_back(static_cast<std::uint8_t>(c));
  }
  put_u16(out, 1);
  put_u32(out, static_cast<std::uint32_t>(dataset.count));
  put_u16(out, static_cast<std::uint16_t>(dataset.height));
  put_u16(out, static_cast<std::uint16_t>(dataset.width));
  put_u8(out, static_cast<std::uint8_t>(dataset.channels));
  put_u16(out, static_cast<std::uint16_t>(dataset.classes));
  out.insert(out.end(), dataset.pixels.begin(), dataset.pixels.end());
  for (const auto label : dataset.labels) {
    put_u16(out, label);
  }
  return out;
}

ImageDataset decode_amim(std::span<const std::uint8_t> bytes) {
  Reader in(bytes);
  const auto magic = in.take(4, "magic");
  if (!std::equal(magic.begin(), magic.end(), "AMIM")) {
    throw FormatError("AMIM: bad magic at byte offset 0");
  }
  const auto version = in.u16("version");
  if (version != 1) {
    throw FormatError("AMIM: unsupported version " + std::to_string(version) +
                      " at byte offset 4");
  }
  ImageDataset ds;
  ds.count = in.u32("count");
  ds.height = in.u16("height");
  ds.width = in.u16("width");
  ds.channels = in.u8("channels");
  ds.classes = in.u16("classes");
  const std::size_t pixel_bytes = ds.count * ds.image_bytes();
  const auto pixels = in.take(pixel_bytes, "pixel payload");
  ds.pixels.assign(pixels.begin(), pixels.end());
  in.need(2 * ds.count, "label block");
  ds.labels.resize(ds.count);
  for (auto& label : ds.labels) {
    label = in.u16("label");
  }
  if (in.remaining() != 0) {
    throw FormatError("AMIM: " + std::to_string(in.remaining()) +
                      " trailing bytes at byte offset " + std::to_string(in.offset()));
  }
  for (std::size_t i = 0; i < ds.count; ++i) {
    if (ds.labels[i] >= ds.classes) {
      throw FormatError("AMIM: label out of range at byte offset " +
                        std::to_string(kAmimHeaderBytes + pixel_bytes + 2 * i));
    }
  }
  return ds;
}

void write_amim(const std::filesystem::path& path, const ImageDataset& dataset) {
  const auto bytes = encode_amim(dataset);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw IoError("cannot open " + path.string() + " for writing");
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) {
    throw IoError("write failed for " + path.string());
  }
}

ImageDataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw IoError("cannot open dataset " + path.string());
  }
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                        std::istreambuf_iterator<char>());
  return decode_amim(bytes);
}

namespace {

// Shape membership in coordinates normalized by the shape radius.
bool inside_shape(int shape, double u, double v) {
  const double au = std::abs(u), av = std::abs(v);
  switch (shape) {
    case 0:  // square
      return std::max(au, av) <= 0.8;
    case 1:  // disc
      return u * u + v * v <= 1.0;
    case 2:  // triangle, apex up
      return v <= 0.7 && v >= -1.0 && au <= 0.9 * (v + 1.0) / 1.7;
    case 3:  // plus
      return (au <= 0.3 && av <= 1.0) || (av <= 0.3 && au <= 1.0);
    case 4: {  // ring
      const double r2 = u * u + v * v;
      return r2 <= 1.0 && r2 >= 0.55 * 0.55;
    }
    case 5:  // diamond
      return au + av <= 1.0;
    case 6:  // horizontal bar
      return au <= 1.0 && av <= 0.35;
    case 7:  // x
      return std::max(au, av) <= 0.9 && (std::abs(u - v) <= 0.35 || std::abs(u + v) <= 0.35);
    default:
      return false;
  }
}

}  // namespace

ImageDataset make_synthetic(int classes, int per_class, int side, int channels, const Rng& rng) {
  if (classes < 2 || classes > kShapeVocabulary) {
    throw ParameterError("make_synthetic: classes must lie in [2, " +
                         std::to_string(kShapeVocabulary) + "], got " + std::to_string(classes));
  }
  if (per_class < 0 || side < 8 || channels < 1) {
    throw ParameterError("make_synthetic: per_class >= 0, side >= 8, channels >= 1 required");
  }
  ImageDataset ds;
  ds.count = static_cast<std::size_t>(classes) * static_cast<std::size_t>(per_class);
  ds.height = side;
  ds.width = side;
  ds.channels = channels;
  ds.classes = classes;
  ds.pixels.resize(ds.count * ds.image_bytes());
  ds.labels.resize(ds.count);
  const auto s = static_cast<std::size_t>(side);
  const auto c = static_cast<std::size_t>(channels);
  for (std::size_t i = 0; i < ds.count; ++i) {
    Rng r = rng.split(i);
    const int label = static_cast<int>(i % static_cast<std::size_t>(classes));
    ds.labels[i] = static_cast<std::uint16_t>(label);
    // Fixed intensities: only the shape, its placement and the noise differ
    // between images, so brightness never identifies an image or a class.
    constexpr double background = 0.45;
    constexpr double foreground = 0.9;
    const double radius = r.uniform(0.22, 0.34) * side;
    const double margin = radius;
    const double cy = r.uniform(margin, side - margin);
    const double cx = r.uniform(margin, side - margin);
    std::uint8_t* img = ds.pixels.data() + i * ds.image_bytes();
    for (std::size_t y = 0; y < s; ++y) {
      for (std::size_t x = 0; x < s; ++x) {
        const double u = (static_cast<double>(x) + 0.5 - cx) / radius;
        const double v = (static_cast<double>(y) + 0.5 - cy) / radius;
        const bool fg = inside_shape(label, u, v);
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double noise = r.uniform(-0.06, 0.06);
          const double value = std::clamp((fg ? foreground : background) + noise, 0.0, 1.0);
          img[(y * s + x) * c + ch] = static_cast<std::uint8_t>(std::lround(value * 255.0));
        }
      }
    }
  }
  return ds;
}

template <typename T>
ImageBatch<T> to_image_batch(const ImageDataset& dataset, std::span<const std::size_t> indices) {
  if (dataset.height != dataset.width) {
    throw ConfigError("image batch: only square images are supported");
  }
  ImageBatch<T> batch;
  batch.count = indices.size();
  batch.side = dataset.height;
  batch.channels = dataset.channels;
  batch.pixels.reserve(indices.size() * dataset.image_bytes());
  for (const auto i : indices) {
    for (const auto v : dataset.image(i)) {
      batch.pixels.push_back(normalize_pixel<T>(v / 255.0));
    }
  }
  return batch;
}

void AugConfig::validate(int patch_size) const {
  auto fail = [](const std::string& what) { throw ConfigError("aug: " + what); };
  if (!(scale_split > local_scale_min && scale_split < global_scale_max && local_scale_min > 0.0 &&
        global_scale_max <= 1.0)) {
    fail("scales must satisfy 0 < local_scale_min < scale_split < global_scale_max <= 1");
  }
  if (local_side >= global_side) {
    fail("local_side must be smaller than global_side");
  }
  if (patch_size <= 0 || global_side % patch_size != 0 || local_side % patch_size != 0 ||
      local_side <= 0) {
    fail("global_side and local_side must be positive multiples of the patch size");
  }
  if (local_crop_count < 0) {
    fail("local_crop_count must be >= 0");
  }
  if (flip_probability < 0.0 || flip_probability > 1.0) {
    fail("flip_probability must lie in [0, 1]");
  }
}

CropBox sample_crop_box(int height, int width, double scale_lo, double scale_hi, Rng& rng) {
  const double area = static_cast<double>(height) * static_cast<double>(width);
  const double log_lo = std::log(3.0 / 4.0), log_hi = std::log(4.0 / 3.0);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * rng.uniform(scale_lo, scale_hi);
    const double aspect = std::exp(rng.uniform(log_lo, log_hi));
    const int w = static_cast<int>(std::lround(std::sqrt(target * aspect)));
    const int h = static_cast<int>(std::lround(std::sqrt(target / aspect)));
    if (w > 0 && h > 0 && w <= width && h <= height) {
      const int top = static_cast<int>(rng.below(static_cast<std::uint64_t>(height - h + 1)));
      const int left = static_cast<int>(rng.below(static_cast<std::uint64_t>(width - w + 1)));
      return {top, left, h, w};
    }
  }
  return {0, 0, height, width};
}

std::vector<double> resized_crop(std::span<const std::uint8_t> image, int height, int width,
                                 int channels, const CropBox& box, int out_side, bool flip) {
  if (box.height <= 0 || box.width <= 0 || box.top < 0 || box.left < 0 ||
      box.top + box.height > height || box.left + box.width > width) {
    throw ParameterError("resized_crop: crop box outside the image");
  }
  const auto c = static_cast<std::size_t>(channels);
  const auto os = static_cast<std::size_t>(out_side);
  std::vector<double> out(os * os * c);
  const double sy = static_cast<double>(box.height) / out_side;
  const double sx = static_cast<double>(box.width) / out_side;
  auto coord = [](double pos, int begin, int extent, double step, std::size_t& lo,
                  std::size_t& hi, double& frac) {
    double p = begin + (pos + 0.5) * step - 0.5;
    p = std::clamp(p, static_cast<double>(begin), static_cast<double>(begin + extent - 1));
    const double f = std::floor(p);
    lo = static_cast<std::size_t>(f);
    hi = std::min(lo + 1, static_cast<std::size_t>(begin + extent - 1));
    frac = p - f;
  };
  for (std::size_t oy = 0; oy < os; ++oy) {
    std::size_t y0, y1;
    double fy;
    coord(static_cast<double>(oy), box.top, box.height, sy, y0, y1, fy);
    for (std::size_t ox = 0; ox < os; ++ox) {
      const std::size_t src_x = flip ? os - 1 - ox : ox;
      std::size_t x0, x1;
      double fx;
      coord(static_cast<double>(src_x), box.left, box.width, sx, x0, x1, fx);
      for (std::size_t ch = 0; ch < c; ++ch) {
        auto px = [&](std::size_t y, std::size_t x) {
          return image[(y * static_cast<std::size_t>(width) + x) * c + ch] / 255.0;
        };
        const double top = px(y0, x0) * (1 - fx) + px(y0, x1) * fx;
        const double bottom = px(y1, x0) * (1 - fx) + px(y1, x1) * fx;
        out[(oy * os + ox) * c + ch] = top * (1 - fy) + bottom * fy;
      }
    }
  }
  return out;
}

template <typename T>
ViewSet<T> make_views(std::span<const std::uint8_t> image, int height, int width, int channels,
                      const AugConfig& aug, Rng& rng) {
  auto view = [&](double lo, double hi, int side) {
    const CropBox box = sample_crop_box(height, width, lo, hi, rng);
    const bool flip = rng.bernoulli(aug.flip_probability);
    const auto unit = resized_crop(image, height, width, channels, box, side, flip);
    std::vector<T> v(unit.size());
    std::transform(unit.begin(), unit.end(), v.begin(),
                   [](double u) { return normalize_pixel<T>(u); });
    return v;
  };
  ViewSet<T> set;
  for (int i = 0; i < 2; ++i) {
    set.globals.push_back(view(aug.scale_split, aug.global_scale_max, aug.global_side));
  }
  for (int j = 0; j < aug.local_crop_count; ++j) {
    set.locals.push_back(view(aug.local_scale_min, aug.scale_split, aug.local_side));
  }
  return set;
}

template <typename T>
ViewBatch<T> pack_views(const std::vector<ViewSet<T>>& views, const AugConfig& aug, int channels) {
  ViewBatch<T> batch;
  batch.images = views.size();
  batch.local_crop_count = aug.local_crop_count;
  batch.globals.count = 2 * views.size();
  batch.globals.side = aug.global_side;
  batch.globals.channels = channels;
  batch.locals.count = static_cast<std::size_t>(aug.local_crop_count) * views.size();
  batch.locals.side = aug.local_side;
  batch.locals.channels = channels;
  for (std::size_t v = 0; v < 2; ++v) {
    for (const auto& set : views) {
      batch.globals.pixels.insert(batch.globals.pixels.end(), set.globals[v].begin(),
                                  set.globals[v].end());
    }
  }
  for (std::size_t j = 0; j < static_cast<std::size_t>(aug.local_crop_count); ++j) {
    for (const auto& set : views) {
      batch.locals.pixels.insert(batch.locals.pixels.end(), set.locals[j].begin(),
                                 set.locals[j].end());
    }
  }
  return batch;
}

#define ATTMASK_INSTANTIATE(T)                                                                  \
  template ImageBatch<T> to_image_batch<T>(const ImageDataset&, std::span<const std::size_t>);  \
  template ViewSet<T> make_views<T>(std::span<const std::uint8_t>, int, int, int,               \
                                    const AugConfig&, Rng&);                                    \
  template ViewBatch<T> pack_views<T>(const std::vector<ViewSet<T>>&, const AugConfig&, int);

ATTMASK_INSTANTIATE(float)
ATTMASK_INSTANTIATE(double)
#undef ATTMASK_INSTANTIATE

}  // namespace attmask
