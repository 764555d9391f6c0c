#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "attmask/rng.hpp"
#include "attmask/tensor.hpp"

namespace attmask {

struct EncoderConfig {
  int image_side = 32;  // h = w
  int channels = 3;
  int patch_size = 4;
  int embed_dim = 64;
  int heads = 4;
  int depth = 6;
  int mlp_ratio = 4;
  int out_dim = 512;         // K, head output dimensionality
  int head_hidden = 2048;
  int head_bottleneck = 256;
  double student_temperature = 0.1;

  /// Throws ConfigError naming the violated constraint.
  void validate() const;
  [[nodiscard]] int grid_side() const { return image_side / patch_size; }
  [[nodiscard]] int num_patches() const { return grid_side() * grid_side(); }
  [[nodiscard]] int head_dim() const { return embed_dim / heads; }
  [[nodiscard]] int patch_features() const { return patch_size * patch_size * channels; }
};

/// Named parameter tensors. std::map keeps names in lexicographic order,
/// which is the canonical order for optimizers and checkpoints.
template <typename T>
class ParamSet {
 public:
  void add(const std::string& name, Tensor<T> tensor);
  [[nodiscard]] const Tensor<T>& at(const std::string& name) const;
  [[nodiscard]] Tensor<T>& at(const std::string& name);
  [[nodiscard]] bool contains(const std::string& name) const;
  [[nodiscard]] std::vector<std::string> names() const;
  /// Handles (shared storage) in name order.
  [[nodiscard]] std::vector<Tensor<T>> tensors() const;
  [[nodiscard]] std::size_t size() const { return items_.size(); }
  [[nodiscard]] std::size_t numel() const;
  [[nodiscard]] ParamSet clone(bool requires_grad) const;
  void zero_grad();

 private:
  std::map<std::string, Tensor<T>> items_;
};

/// Builds student parameters: truncated normal (sigma 0.02) for weight
/// matrices and the [CLS]/[MASK]/position tables, zero biases, unit
/// LayerNorm gains. Every tensor draws from its own named substream.
template <typename T>
ParamSet<T> init_vit_params(const EncoderConfig& config, const Rng& rng);

/// A batch of images, already scaled/standardized to model input values,
/// laid out [count][side][side][channels].
template <typename T>
struct ImageBatch {
  std::size_t count = 0;
  int side = 0;
  int channels = 0;
  std::vector<T> pixels;
};

/// [CLS] + patch tokens for a batch: rows b*(n+1) .. b*(n+1)+n hold image b,
/// row b*(n+1) is its [CLS] token.
template <typename T>
struct TokenSequence {
  Tensor<T> tokens;
  std::size_t batch = 0;
  std::size_t num_patches = 0;  // n
  int grid_side = 0;

  [[nodiscard]] std::size_t seq_len() const { return num_patches + 1; }
};

/// Post-softmax attention per layer (1-based), laid out [B][H][S][S].
template <typename T>
class AttentionRecord {
 public:
  AttentionRecord() = default;
  AttentionRecord(int depth, std::size_t batch, std::size_t heads, std::size_t seq);

  [[nodiscard]] bool captured(int layer) const;
  [[nodiscard]] std::span<const T> head_matrix(int layer, std::size_t image, std::size_t head) const;
  /// Head-averaged attention matrix of one image (S x S).
  [[nodiscard]] std::vector<T> mean_matrix(int layer, std::size_t image) const;
  void store(int layer, std::vector<T> probs);

  [[nodiscard]] int depth() const { return static_cast<int>(layers_.size()); }
  [[nodiscard]] std::size_t batch() const { return batch_; }
  [[nodiscard]] std::size_t heads() const { return heads_; }
  [[nodiscard]] std::size_t seq() const { return seq_; }

 private:
  const std::vector<T>& layer_data(int layer) const;

  std::vector<std::optional<std::vector<T>>> layers_;
  std::size_t batch_ = 0, heads_ = 0, seq_ = 0;
};

/// The [CLS] row of the head-averaged attention without its self entry.
template <typename T>
struct ClsAttentionVector {
  std::vector<T> values;  // length n
  int layer = 0;
};

template <typename T>
struct EncoderOutput {
  TokenSequence<T> sequence;
  AttentionRecord<T> attention;
};

template <typename T>
struct HeadOutput {
  Tensor<T> cls_probs;    // [B x K]
  Tensor<T> patch_probs;  // [B*n x K]
};

/// Patchifies and embeds; no position embeddings. Image side must match the
/// parameters' patch size (any multiple of it is accepted so local crops
/// tokenize through the same projection).
template <typename T>
TokenSequence<T> tokenize(const ImageBatch<T>& images, const ParamSet<T>& params,
                          const EncoderConfig& config);

/// Bilinear (half-pixel centers) resize of a g0 x g0 table of d-dim rows to
/// g x g. Returned as the (g^2 x g0^2) interpolation matrix.
std::vector<double> bilinear_resize_matrix(int from_side, int to_side);

template <typename T>
TokenSequence<T> add_position_embeddings(const TokenSequence<T>& seq, const ParamSet<T>& params,
                                         const EncoderConfig& config);

/// Pre-norm transformer layers with residuals and a final LayerNorm.
/// capture_layer: 0 captures every layer, a 1-based number captures only that
/// layer, and -1 captures nothing.
template <typename T>
EncoderOutput<T> encoder_forward(const TokenSequence<T>& seq, const ParamSet<T>& params,
                                 const EncoderConfig& config, int capture_layer = -1);

template <typename T>
ClsAttentionVector<T> cls_attention(const AttentionRecord<T>& record, int layer,
                                    std::size_t image);

/// Projection head logits for the given token rows: three-layer GELU MLP to
/// the bottleneck, L2 normalization, then cosine similarity against the
/// L2-normalized prototype rows of head.last.weight [K x bottleneck], scaled
/// per output by head.last.gain [K] (trainable, starts at 1).
template <typename T>
Tensor<T> head_logits(const Tensor<T>& tokens, const ParamSet<T>& params,
                      const EncoderConfig& config);

/// softmax((logits - center) / temperature) row-wise; center may be empty.
template <typename T>
Tensor<T> scaled_softmax(const Tensor<T>& logits, double temperature, std::span<const T> center);

template <typename T>
HeadOutput<T> head_forward(const TokenSequence<T>& out, const ParamSet<T>& params,
                           const EncoderConfig& config, double temperature,
                           std::span<const T> center = {});

/// Row indices of every [CLS] token in a packed sequence.
std::vector<std::size_t> cls_rows(std::size_t batch, std::size_t seq_len);
/// Row indices of every patch token in a packed sequence.
std::vector<std::size_t> patch_rows(std::size_t batch, std::size_t seq_len);

/// Mean over patch tokens (excluding [CLS]) per image: [B x d].
template <typename T>
Tensor<T> gap_features(const TokenSequence<T>& out);
/// [CLS] output embedding per image: [B x d].
template <typename T>
Tensor<T> cls_features(const TokenSequence<T>& out);

}  // namespace attmask
