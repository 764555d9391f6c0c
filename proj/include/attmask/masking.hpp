#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "attmask/rng.hpp"
#include "attmask/vit.hpp"

namespace attmask {

enum class MaskStrategy { Random, Blockwise, AttMaskHigh, AttMaskLow, AttMaskHint };

inline constexpr MaskStrategy kAllStrategies[] = {MaskStrategy::Random, MaskStrategy::Blockwise,
                                                  MaskStrategy::AttMaskHigh, MaskStrategy::AttMaskLow,
                                                  MaskStrategy::AttMaskHint};

std::string_view strategy_name(MaskStrategy s);
/// Accepts "random", "block-wise" (or "blockwise"), "attmask-high",
/// "attmask-low", "attmask-hint".
MaskStrategy parse_strategy(std::string_view name);
/// True for strategies that read the teacher's [CLS] attention.
bool strategy_uses_attention(MaskStrategy s);

/// Binary token mask over the n patch tokens of one view.
struct MaskVector {
  std::vector<std::uint8_t> bits;

  MaskVector() = default;
  explicit MaskVector(std::size_t n) : bits(n, 0) {}

  [[nodiscard]] std::size_t size() const { return bits.size(); }
  [[nodiscard]] std::size_t count() const;
  [[nodiscard]] std::vector<std::size_t> indices() const;
  /// "<n> <hex>": hex digits pack bits most-significant first, 4 per digit,
  /// zero-padded at the tail.
  [[nodiscard]] std::string to_text() const;
  static MaskVector from_text(std::string_view text);

  friend bool operator==(const MaskVector&, const MaskVector&) = default;
};

struct MaskPolicy {
  MaskStrategy strategy = MaskStrategy::AttMaskHigh;
  double probability = 0.5;  // p
  double ratio_min = 0.1;    // a
  double ratio_max = 0.5;    // b
  double show_ratio = 0.1;   // s (AttMask-Hint)
  int layer = 0;             // attention source layer, 1-based; 0 = last

  /// Throws ConfigError.
  void validate() const;
};

struct RatioDraw {
  bool apply = false;
  double ratio = 0.0;
};

/// floor(r * n), with 1e-9 slack so decimal ratios such as 0.29 * 100 land on
/// the intended integer.
std::size_t masked_count(std::size_t n, double ratio);

/// Coin with probability p, then r ~ U(a, b) (r = a when a == b). Both draws
/// are always consumed so the stream position does not depend on the coin.
RatioDraw sample_ratio(const MaskPolicy& policy, Rng& rng);

/// Exactly floor(r n) distinct positions, uniformly.
MaskVector random_mask(std::size_t n, double ratio, Rng& rng);

/// Block-wise masking on a g x g grid (n = g^2): rectangles of area >=
/// min(16, remaining) and aspect ratio within [0.3, 1/0.3] are added until
/// floor(r n) tokens are covered; any overshoot is trimmed from the last
/// rectangle, outermost cells first.
MaskVector blockwise_mask(std::size_t n, double ratio, Rng& rng);

/// Indices ordered by descending value, ties by lower index first.
template <typename T>
std::vector<std::size_t> descending_order(std::span<const T> values);
template <typename T>
std::vector<std::size_t> ascending_order(std::span<const T> values);

/// The floor(r n) most attended tokens.
template <typename T>
MaskVector attmask_high(std::span<const T> attention, double ratio);
/// The floor(r n) least attended tokens.
template <typename T>
MaskVector attmask_low(std::span<const T> attention, double ratio);
/// AttMask-High minus floor(s k) tokens drawn without replacement from the
/// floor(s n) most attended ones.
template <typename T>
MaskVector attmask_hint(std::span<const T> attention, double ratio, double show_ratio, Rng& rng);

/// Builds one mask with the policy's strategy. `attention` may be empty for
/// strategies that do not use it.
template <typename T>
MaskVector make_mask(MaskStrategy strategy, std::size_t n, double ratio, double show_ratio,
                     std::span<const T> attention, Rng& rng);

/// Replaces masked patch tokens by the [MASK] embedding (one mask per image
/// in the batch); [CLS] rows are never touched.
template <typename T>
TokenSequence<T> apply_mask(const TokenSequence<T>& seq, std::span<const MaskVector> masks,
                            const Tensor<T>& mask_embedding);

}  // namespace attmask
