#include "attmask/masking.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "attmask/error.hpp"
#include "attmask/ops.hpp"

namespace attmask {

std::string_view strategy_name(MaskStrategy s) {
  switch (s) {
    case MaskStrategy::Random:
      return "random";
    case MaskStrategy::Blockwise:
      return "block-wise";
    case MaskStrategy::AttMaskHigh:
      return "attmask-high";
    case MaskStrategy::AttMaskLow:
      return "attmask-low";
    case MaskStrategy::AttMaskHint:
      return "attmask-hint";
  }
  return "unknown";
}

MaskStrategy parse_strategy(std::string_view name) {
  if (name == "random") return MaskStrategy::Random;
  if (name == "block-wise" || name == "blockwise") return MaskStrategy::Blockwise;
  if (name == "attmask-high") return MaskStrategy::AttMaskHigh;
  if (name == "attmask-low") return MaskStrategy::AttMaskLow;
  if (name == "attmask-hint") return MaskStrategy::AttMaskHint;
  throw ConfigError("unknown mask strategy '" + std::string(name) +
                    "' (expected random, block-wise, attmask-high, attmask-low, attmask-hint)");
}

bool strategy_uses_attention(MaskStrategy s) {
  return s == MaskStrategy::AttMaskHigh || s == MaskStrategy::AttMaskLow ||
         s == MaskStrategy::AttMaskHint;
}

std::size_t MaskVector::count() const {
  return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

std::vector<std::size_t> MaskVector::indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < bits.size(); ++i) {
    if (bits[i]) {
      out.push_back(i);
    }
  }
  return out;
}

std::string MaskVector::to_text() const {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string hex((bits.size() + 3) / 4, '0');
  for (std::size_t i = 0; i < bits.size(); ++i) {
    if (bits[i]) {
      auto& digit = hex[i / 4];
      const int value = (digit >= 'a' ? digit - 'a' + 10 : digit - '0') | (8 >> (i % 4));
      digit = kHex[value];
    }
  }
  return std::to_string(bits.size()) + " " + hex;
}

MaskVector MaskVector::from_text(std::string_view text) {
  const auto space = text.find(' ');
  if (space == std::string_view::npos) {
    throw FormatError("mask text: expected '<n> <hex>'");
  }
  std::size_t n = 0;
  for (const char ch : text.substr(0, space)) {
    if (ch < '0' || ch > '9') {
      throw FormatError("mask text: bad length field");
    }
    n = n * 10 + static_cast<std::size_t>(ch - '0');
  }
  const auto hex = text.substr(space + 1);
  if (hex.size() != (n + 3) / 4) {
    throw FormatError("mask text: expected " + std::to_string((n + 3) / 4) + " hex digits");
  }
  MaskVector m(n);
  for (std::size_t i = 0; i < hex.size(); ++i) {
    const char ch = hex[i];
    int v;
    if (ch >= '0' && ch <= '9') {
      v = ch - '0';
    } else if (ch >= 'a' && ch <= 'f') {
      v = ch - 'a' + 10;
    } else {
      throw FormatError("mask text: bad hex digit");
    }
    for (std::size_t b = 0; b < 4; ++b) {
      const std::size_t idx = i * 4 + b;
      const bool set = (v & (8 >> b)) != 0;
      if (idx < n) {
        m.bits[idx] = set ? 1 : 0;
      } else if (set) {
        throw FormatError("mask text: padding bits must be zero");
      }
    }
  }
  return m;
}

void MaskPolicy::validate() const {
  auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!in_unit(probability)) {
    throw ConfigError("mask.probability must lie in [0, 1]");
  }
  if (!in_unit(ratio_min) || !in_unit(ratio_max) || ratio_min > ratio_max) {
    throw ConfigError("mask ratio bounds must satisfy 0 <= ratio_min <= ratio_max <= 1");
  }
  if (!in_unit(show_ratio)) {
    throw ConfigError("mask.show_ratio must lie in [0, 1]");
  }
  if (layer < 0) {
    throw ConfigError("mask.layer must be >= 0 (0 = last layer)");
  }
}

std::size_t masked_count(std::size_t n, double ratio) {
  const double k = std::floor(ratio * static_cast<double>(n) + 1e-9);
  return std::min(n, static_cast<std::size_t>(std::max(0.0, k)));
}

RatioDraw sample_ratio(const MaskPolicy& policy, Rng& rng) {
  const double coin = rng.uniform();
  const double u = rng.uniform();
  RatioDraw draw;
  draw.apply = coin < policy.probability;
  draw.ratio = policy.ratio_min < policy.ratio_max
                   ? policy.ratio_min + (policy.ratio_max - policy.ratio_min) * u
                   : policy.ratio_min;
  return draw;
}

MaskVector random_mask(std::size_t n, double ratio, Rng& rng) {
  const std::size_t k = masked_count(n, ratio);
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  // Partial Fisher-Yates: the first k slots are a uniform k-subset.
  for (std::size_t i = 0; i < k; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(n - i));
    std::swap(idx[i], idx[j]);
  }
  MaskVector m(n);
  for (std::size_t i = 0; i < k; ++i) {
    m.bits[idx[i]] = 1;
  }
  return m;
}

namespace {

struct Rect {
  std::size_t top, left, height, width;
};

constexpr double kMinAspect = 0.3;
constexpr std::size_t kMinBlockArea = 16;

bool rect_valid(std::size_t h, std::size_t w, std::size_t g, std::size_t min_area) {
  if (h == 0 || w == 0 || h > g || w > g || h * w < min_area) {
    return false;
  }
  const double aspect = static_cast<double>(h) / static_cast<double>(w);
  return aspect >= kMinAspect - 1e-12 && aspect <= 1.0 / kMinAspect + 1e-12;
}

std::size_t fresh_cells(const MaskVector& m, const Rect& r, std::size_t g) {
  std::size_t fresh = 0;
  for (std::size_t y = r.top; y < r.top + r.height; ++y) {
    for (std::size_t x = r.left; x < r.left + r.width; ++x) {
      fresh += m.bits[y * g + x] ? 0 : 1;
    }
  }
  return fresh;
}

Rect sample_rect(const MaskVector& m, std::size_t g, std::size_t need, Rng& rng) {
  const std::size_t min_area = std::min(kMinBlockArea, need);
  const double max_area = static_cast<double>(std::max(min_area, need));
  const double log_lo = std::log(kMinAspect), log_hi = -std::log(kMinAspect);
  for (int attempt = 0; attempt < 1000; ++attempt) {
    const double area = rng.uniform(static_cast<double>(min_area), max_area);
    const double aspect = std::exp(rng.uniform(log_lo, log_hi));
    const auto h = static_cast<std::size_t>(std::lround(std::sqrt(area * aspect)));
    const auto w = static_cast<std::size_t>(std::lround(std::sqrt(area / aspect)));
    if (!rect_valid(h, w, g, min_area)) {
      continue;
    }
    const Rect r{static_cast<std::size_t>(rng.below(g - h + 1)),
                 static_cast<std::size_t>(rng.below(g - w + 1)), h, w};
    if (fresh_cells(m, r, g) > 0) {
      return r;
    }
  }
  // Sampling kept landing on covered cells: choose uniformly among every
  // valid placement that still adds coverage.
  std::vector<Rect> options;
  for (std::size_t h = 1; h <= g; ++h) {
    for (std::size_t w = 1; w <= g; ++w) {
      if (!rect_valid(h, w, g, min_area)) {
        continue;
      }
      for (std::size_t top = 0; top + h <= g; ++top) {
        for (std::size_t left = 0; left + w <= g; ++left) {
          const Rect r{top, left, h, w};
          if (fresh_cells(m, r, g) > 0) {
            options.push_back(r);
          }
        }
      }
    }
  }
  if (options.empty()) {
    throw ContractError("blockwise_mask: no admissible rectangle");
  }
  return options[static_cast<std::size_t>(rng.below(options.size()))];
}

}  // namespace

MaskVector blockwise_mask(std::size_t n, double ratio, Rng& rng) {
  const auto g = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
  if (g * g != n) {
    throw ParameterError("blockwise_mask: " + std::to_string(n) +
                         " tokens do not form a square grid");
  }
  const std::size_t k = masked_count(n, ratio);
  MaskVector m(n);
  std::size_t covered = 0;
  while (covered < k) {
    const Rect r = sample_rect(m, g, k - covered, rng);
    std::vector<std::size_t> added;
    for (std::size_t y = r.top; y < r.top + r.height; ++y) {
      for (std::size_t x = r.left; x < r.left + r.width; ++x) {
        if (!m.bits[y * g + x]) {
          m.bits[y * g + x] = 1;
          added.push_back(y * g + x);
        }
      }
    }
    covered += added.size();
    if (covered > k) {
      // Peel the overshoot off the rectangle's boundary: cells farthest from
      // its center go first (Chebyshev distance, scan order on ties).
      const double cy = static_cast<double>(r.top) + (static_cast<double>(r.height) - 1) / 2;
      const double cx = static_cast<double>(r.left) + (static_cast<double>(r.width) - 1) / 2;
      auto dist = [&](std::size_t idx) {
        return std::max(std::abs(static_cast<double>(idx / g) - cy) / static_cast<double>(r.height),
                        std::abs(static_cast<double>(idx % g) - cx) / static_cast<double>(r.width));
      };
      std::stable_sort(added.begin(), added.end(),
                       [&](std::size_t a, std::size_t b) { return dist(a) > dist(b); });
      for (std::size_t i = 0; covered > k; ++i) {
        m.bits[added[i]] = 0;
        --covered;
      }
    }
  }
  return m;
}

template <typename T>
std::vector<std::size_t> descending_order(std::span<const T> values) {
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] > values[b]; });
  return idx;
}

template <typename T>
std::vector<std::size_t> ascending_order(std::span<const T> values) {
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  return idx;
}

namespace {

MaskVector first_k(const std::vector<std::size_t>& order, std::size_t k) {
  MaskVector m(order.size());
  for (std::size_t i = 0; i < k; ++i) {
    m.bits[order[i]] = 1;
  }
  return m;
}

}  // namespace

template <typename T>
MaskVector attmask_high(std::span<const T> attention, double ratio) {
  return first_k(descending_order(attention), masked_count(attention.size(), ratio));
}

template <typename T>
MaskVector attmask_low(std::span<const T> attention, double ratio) {
  return first_k(ascending_order(attention), masked_count(attention.size(), ratio));
}

template <typename T>
MaskVector attmask_hint(std::span<const T> attention, double ratio, double show_ratio, Rng& rng) {
  const std::size_t n = attention.size();
  const auto order = descending_order(attention);
  const std::size_t k = masked_count(n, ratio);
  MaskVector m = first_k(order, k);
  const std::size_t reveal = masked_count(k, show_ratio);
  const std::size_t pool = masked_count(n, show_ratio);
  std::vector<std::size_t> candidates(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(pool));
  for (std::size_t i = 0; i < reveal && i < pool; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(pool - i));
    std::swap(candidates[i], candidates[j]);
    m.bits[candidates[i]] = 0;
  }
  return m;
}

template <typename T>
MaskVector make_mask(MaskStrategy strategy, std::size_t n, double ratio, double show_ratio,
                     std::span<const T> attention, Rng& rng) {
  if (strategy_uses_attention(strategy) && attention.size() != n) {
    throw DimensionError("make_mask: attention length " + std::to_string(attention.size()) +
                         " for " + std::to_string(n) + " tokens");
  }
  switch (strategy) {
    case MaskStrategy::Random:
      return random_mask(n, ratio, rng);
    case MaskStrategy::Blockwise:
      return blockwise_mask(n, ratio, rng);
    case MaskStrategy::AttMaskHigh:
      return attmask_high(attention, ratio);
    case MaskStrategy::AttMaskLow:
      return attmask_low(attention, ratio);
    case MaskStrategy::AttMaskHint:
      return attmask_hint(attention, ratio, show_ratio, rng);
  }
  return MaskVector(n);
}

template <typename T>
TokenSequence<T> apply_mask(const TokenSequence<T>& seq, std::span<const MaskVector> masks,
                            const Tensor<T>& mask_embedding) {
  if (masks.size() != seq.batch) {
    throw DimensionError("apply_mask: " + std::to_string(masks.size()) + " masks for batch of " +
                         std::to_string(seq.batch));
  }
  const std::size_t len = seq.seq_len();
  std::vector<std::uint8_t> replace(seq.batch * len, 0);
  for (std::size_t b = 0; b < seq.batch; ++b) {
    if (masks[b].size() != seq.num_patches) {
      throw DimensionError("apply_mask: mask length " + std::to_string(masks[b].size()) +
                           " for " + std::to_string(seq.num_patches) + " tokens");
    }
    std::copy(masks[b].bits.begin(), masks[b].bits.end(),
              replace.begin() + static_cast<std::ptrdiff_t>(b * len + 1));
  }
  TokenSequence<T> out = seq;
  out.tokens = ops::substitute_rows<T>(seq.tokens, replace, mask_embedding);
  return out;
}

#define ATTMASK_INSTANTIATE(T)                                                                    \
  template std::vector<std::size_t> descending_order<T>(std::span<const T>);                      \
  template std::vector<std::size_t> ascending_order<T>(std::span<const T>);                       \
  template MaskVector attmask_high<T>(std::span<const T>, double);                                \
  template MaskVector attmask_low<T>(std::span<const T>, double);                                 \
  template MaskVector attmask_hint<T>(std::span<const T>, double, double, Rng&);                   \
  template MaskVector make_mask<T>(MaskStrategy, std::size_t, double, double, std::span<const T>, \
                                   Rng&);                                                         \
  template TokenSequence<T> apply_mask<T>(const TokenSequence<T>&, std::span<const MaskVector>,   \
                                          const Tensor<T>&);

ATTMASK_INSTANTIATE(float)
ATTMASK_INSTANTIATE(double)
#undef ATTMASK_INSTANTIATE

}  // namespace attmask
