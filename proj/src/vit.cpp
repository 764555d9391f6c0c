#include "attmask/vit.hpp"

#include <algorithm>
#include <cmath>

#include "attmask/error.hpp"
#include "attmask/ops.hpp"

namespace attmask {

void EncoderConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("encoder: " + what); };
  if (image_side <= 0 || channels <= 0 || patch_size <= 0) {
    fail("image_side, channels and patch_size must be positive");
  }
  if (image_side % patch_size != 0) {
    fail("patch_size " + std::to_string(patch_size) + " must divide image_side " +
         std::to_string(image_side));
  }
  if (embed_dim <= 0 || heads <= 0 || embed_dim % heads != 0) {
    fail("heads " + std::to_string(heads) + " must divide embed_dim " + std::to_string(embed_dim));
  }
  if (depth < 0) {
    fail("depth must be >= 0");
  }
  if (mlp_ratio <= 0 || head_hidden <= 0 || head_bottleneck <= 0) {
    fail("mlp_ratio, head_hidden and head_bottleneck must be positive");
  }
  if (out_dim < 2) {
    fail("out_dim must be >= 2");
  }
  if (!(student_temperature > 0.0)) {
    fail("student_temperature must be > 0");
  }
}

template <typename T>
void ParamSet<T>::add(const std::string& name, Tensor<T> tensor) {
  if (!items_.emplace(name, std::move(tensor)).second) {
    throw ContractError("duplicate parameter " + name);
  }
}

template <typename T>
const Tensor<T>& ParamSet<T>::at(const std::string& name) const {
  const auto it = items_.find(name);
  if (it == items_.end()) {
    throw ContractError("unknown parameter " + name);
  }
  return it->second;
}

template <typename T>
Tensor<T>& ParamSet<T>::at(const std::string& name) {
  const auto it = items_.find(name);
  if (it == items_.end()) {
    throw ContractError("unknown parameter " + name);
  }
  return it->second;
}

template <typename T>
bool ParamSet<T>::contains(const std::string& name) const {
  return items_.count(name) != 0;
}

template <typename T>
std::vector<std::string> ParamSet<T>::names() const {
  std::vector<std::string> out;
  for (const auto& [name, _] : items_) {
    out.push_back(name);
  }
  return out;
}

template <typename T>
std::vector<Tensor<T>> ParamSet<T>::tensors() const {
  std::vector<Tensor<T>> out;
  for (const auto& [_, t] : items_) {
    out.push_back(t);
  }
  return out;
}

template <typename T>
std::size_t ParamSet<T>::numel() const {
  std::size_t n = 0;
  for (const auto& [_, t] : items_) {
    n += t.numel();
  }
  return n;
}

template <typename T>
ParamSet<T> ParamSet<T>::clone(bool requires_grad) const {
  ParamSet out;
  for (const auto& [name, t] : items_) {
    out.add(name, Tensor<T>::from(t.shape(), std::vector<T>(t.data().begin(), t.data().end()),
                                  requires_grad));
  }
  return out;
}

template <typename T>
void ParamSet<T>::zero_grad() {
  for (auto& [_, t] : items_) {
    t.zero_grad();
  }
}

template <typename T>
ParamSet<T> init_vit_params(const EncoderConfig& config, const Rng& rng) {
  config.validate();
  const auto d = static_cast<std::size_t>(config.embed_dim);
  const auto mlp = d * static_cast<std::size_t>(config.mlp_ratio);
  const auto n = static_cast<std::size_t>(config.num_patches());
  const auto pf = static_cast<std::size_t>(config.patch_features());
  const auto hidden = static_cast<std::size_t>(config.head_hidden);
  const auto bottleneck = static_cast<std::size_t>(config.head_bottleneck);
  const auto k = static_cast<std::size_t>(config.out_dim);

  ParamSet<T> p;
  auto normal = [&](const std::string& name, Shape shape) {
    Rng r = rng.split(name);
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) {
      x = static_cast<T>(r.truncated_normal(0.02));
    }
    p.add(name, Tensor<T>::from(std::move(shape), std::move(v), true));
  };
  auto constant = [&](const std::string& name, Shape shape, T value) {
    p.add(name, Tensor<T>::full(std::move(shape), value, true));
  };
  auto linear = [&](const std::string& prefix, std::size_t in, std::size_t out, bool bias) {
    normal(prefix + ".weight", {in, out});
    if (bias) {
      constant(prefix + ".bias", {out}, T(0));
    }
  };
  auto norm = [&](const std::string& prefix) {
    constant(prefix + ".weight", {d}, T(1));
    constant(prefix + ".bias", {d}, T(0));
  };

  linear("patch_embed", pf, d, true);
  normal("cls_token", {d});
  normal("mask_token", {d});
  normal("pos_embed", {n + 1, d});
  for (int l = 0; l < config.depth; ++l) {
    const std::string b = "blocks." + std::to_string(l) + ".";
    norm(b + "norm1");
    linear(b + "attn.qkv", d, 3 * d, true);
    linear(b + "attn.proj", d, d, true);
    norm(b + "norm2");
    linear(b + "mlp.fc1", d, mlp, true);
    linear(b + "mlp.fc2", mlp, d, true);
  }
  norm("norm");
  linear("head.mlp0", d, hidden, true);
  linear("head.mlp1", hidden, hidden, true);
  linear("head.mlp2", hidden, bottleneck, true);
  // Last layer as direction and gain: prototype rows [K x bottleneck] are
  // L2-normalized in the forward pass, the per-output gain is trained freely.
  normal("head.last.weight", {k, bottleneck});
  constant("head.last.gain", {k}, T(1));
  return p;
}

template <typename T>
TokenSequence<T> tokenize(const ImageBatch<T>& images, const ParamSet<T>& params,
                          const EncoderConfig& config) {
  const int p = config.patch_size;
  if (images.channels != config.channels || images.side <= 0 || images.side % p != 0) {
    throw ConfigError("tokenize: image " + std::to_string(images.side) + "x" +
                      std::to_string(images.side) + "x" + std::to_string(images.channels) +
                      " incompatible with patch " + std::to_string(p) + ", channels " +
                      std::to_string(config.channels));
  }
  const auto side = static_cast<std::size_t>(images.side);
  const auto c = static_cast<std::size_t>(images.channels);
  if (images.pixels.size() != images.count * side * side * c) {
    throw DimensionError("tokenize: pixel buffer does not match batch dimensions");
  }
  const auto ps = static_cast<std::size_t>(p);
  const std::size_t g = side / ps;
  const std::size_t n = g * g;
  const std::size_t pf = ps * ps * c;
  std::vector<T> patches(images.count * n * pf);
  for (std::size_t b = 0; b < images.count; ++b) {
    const T* img = images.pixels.data() + b * side * side * c;
    for (std::size_t gy = 0; gy < g; ++gy) {
      for (std::size_t gx = 0; gx < g; ++gx) {
        T* dst = patches.data() + ((b * n) + gy * g + gx) * pf;
        for (std::size_t py = 0; py < ps; ++py) {
          const T* src = img + ((gy * ps + py) * side + gx * ps) * c;
          std::copy_n(src, ps * c, dst + py * ps * c);
        }
      }
    }
  }
  const auto flat = Tensor<T>::from({images.count * n, pf}, std::move(patches));
  const auto embedded =
      ops::linear(flat, params.at("patch_embed.weight"), params.at("patch_embed.bias"));
  TokenSequence<T> seq;
  seq.tokens = ops::prepend_row_per_group(embedded, params.at("cls_token"), images.count);
  seq.batch = images.count;
  seq.num_patches = n;
  seq.grid_side = static_cast<int>(g);
  return seq;
}

std::vector<double> bilinear_resize_matrix(int from_side, int to_side) {
  if (from_side <= 0 || to_side <= 0) {
    throw ParameterError("bilinear_resize_matrix: sides must be positive");
  }
  const auto fs = static_cast<std::size_t>(from_side);
  const auto ts = static_cast<std::size_t>(to_side);
  // 1-D weights, then the 2-D matrix is their outer product.
  std::vector<double> w1(ts * fs, 0.0);
  const double ratio = static_cast<double>(from_side) / static_cast<double>(to_side);
  for (std::size_t i = 0; i < ts; ++i) {
    double src = (static_cast<double>(i) + 0.5) * ratio - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(fs - 1));
    const auto lo = static_cast<std::size_t>(std::floor(src));
    const std::size_t hi = std::min(lo + 1, fs - 1);
    const double frac = src - static_cast<double>(lo);
    w1[i * fs + lo] += 1.0 - frac;
    w1[i * fs + hi] += frac;
  }
  std::vector<double> m(ts * ts * fs * fs, 0.0);
  for (std::size_t oy = 0; oy < ts; ++oy) {
    for (std::size_t ox = 0; ox < ts; ++ox) {
      for (std::size_t iy = 0; iy < fs; ++iy) {
        for (std::size_t ix = 0; ix < fs; ++ix) {
          m[(oy * ts + ox) * fs * fs + iy * fs + ix] = w1[oy * fs + iy] * w1[ox * fs + ix];
        }
      }
    }
  }
  return m;
}

template <typename T>
TokenSequence<T> add_position_embeddings(const TokenSequence<T>& seq, const ParamSet<T>& params,
                                         const EncoderConfig& config) {
  const auto& table = params.at("pos_embed");
  const int base = config.grid_side();
  const int g = seq.grid_side;
  if (g <= 0 || static_cast<std::size_t>(g) * static_cast<std::size_t>(g) != seq.num_patches) {
    throw ParameterError("add_position_embeddings: token grid is not square (" +
                         std::to_string(seq.num_patches) + " patches)");
  }
  Tensor<T> pos = table;
  if (g != base) {
    const auto bs = static_cast<std::size_t>(base * base);
    const auto gs = static_cast<std::size_t>(g * g);
    const auto m = bilinear_resize_matrix(base, g);
    const auto resize = Tensor<T>::from({gs, bs}, std::vector<T>(m.begin(), m.end()));
    pos = ops::concat_rows<T>(
        {ops::slice_rows(table, 0, 1), ops::matmul(resize, ops::slice_rows(table, 1, bs))});
  }
  TokenSequence<T> out = seq;
  out.tokens = ops::add_tiled(seq.tokens, pos);
  return out;
}

template <typename T>
AttentionRecord<T>::AttentionRecord(int depth, std::size_t batch, std::size_t heads,
                                    std::size_t seq)
    : layers_(static_cast<std::size_t>(depth)), batch_(batch), heads_(heads), seq_(seq) {}

template <typename T>
bool AttentionRecord<T>::captured(int layer) const {
  return layer >= 1 && layer <= depth() && layers_[static_cast<std::size_t>(layer - 1)].has_value();
}

template <typename T>
const std::vector<T>& AttentionRecord<T>::layer_data(int layer) const {
  if (!captured(layer)) {
    throw StateError("attention for layer " + std::to_string(layer) +
                     " was not captured (valid layers 1.." + std::to_string(depth()) + ")");
  }
  return *layers_[static_cast<std::size_t>(layer - 1)];
}

template <typename T>
std::span<const T> AttentionRecord<T>::head_matrix(int layer, std::size_t image,
                                                   std::size_t head) const {
  const auto& data = layer_data(layer);
  if (image >= batch_ || head >= heads_) {
    throw DimensionError("attention record: image/head index out of range");
  }
  const std::size_t ss = seq_ * seq_;
  return std::span<const T>(data).subspan((image * heads_ + head) * ss, ss);
}

template <typename T>
std::vector<T> AttentionRecord<T>::mean_matrix(int layer, std::size_t image) const {
  std::vector<T> mean(seq_ * seq_, T(0));
  for (std::size_t h = 0; h < heads_; ++h) {
    const auto a = head_matrix(layer, image, h);
    for (std::size_t i = 0; i < mean.size(); ++i) {
      mean[i] += a[i];
    }
  }
  const T inv = T(1) / static_cast<T>(heads_);
  for (auto& v : mean) {
    v *= inv;
  }
  return mean;
}

template <typename T>
void AttentionRecord<T>::store(int layer, std::vector<T> probs) {
  if (layer < 1 || layer > depth()) {
    throw RangeError("attention record: layer " + std::to_string(layer) + " outside 1.." +
                     std::to_string(depth()));
  }
  if (probs.size() != batch_ * heads_ * seq_ * seq_) {
    throw DimensionError("attention record: wrong capture size");
  }
  layers_[static_cast<std::size_t>(layer - 1)] = std::move(probs);
}

template <typename T>
EncoderOutput<T> encoder_forward(const TokenSequence<T>& seq, const ParamSet<T>& params,
                                 const EncoderConfig& config, int capture_layer) {
  const std::size_t batch = seq.batch;
  const std::size_t len = seq.seq_len();
  const auto heads = static_cast<std::size_t>(config.heads);
  EncoderOutput<T> result;
  result.attention = AttentionRecord<T>(config.depth, batch, heads, len);
  Tensor<T> x = seq.tokens;
  for (int l = 1; l <= config.depth; ++l) {
    const std::string b = "blocks." + std::to_string(l - 1) + ".";
    const auto h = ops::layer_norm(x, params.at(b + "norm1.weight"), params.at(b + "norm1.bias"));
    const auto qkv = ops::linear(h, params.at(b + "attn.qkv.weight"), params.at(b + "attn.qkv.bias"));
    const bool capture = capture_layer == 0 || capture_layer == l;
    std::vector<T> probs;
    const auto attn = ops::multi_head_attention(qkv, batch, len, heads, capture ? &probs : nullptr);
    if (capture) {
      result.attention.store(l, std::move(probs));
    }
    x = ops::add(x, ops::linear(attn, params.at(b + "attn.proj.weight"),
                                params.at(b + "attn.proj.bias")));
    const auto h2 = ops::layer_norm(x, params.at(b + "norm2.weight"), params.at(b + "norm2.bias"));
    const auto hidden =
        ops::gelu(ops::linear(h2, params.at(b + "mlp.fc1.weight"), params.at(b + "mlp.fc1.bias")));
    x = ops::add(x, ops::linear(hidden, params.at(b + "mlp.fc2.weight"),
                                params.at(b + "mlp.fc2.bias")));
    for (const T v : x.data()) {
      if (!std::isfinite(v)) {
        throw NumericError("encoder layer " + std::to_string(l) + " produced a non-finite activation");
      }
    }
  }
  // An encoder without layers is the identity map, final norm included.
  if (config.depth > 0) {
    x = ops::layer_norm(x, params.at("norm.weight"), params.at("norm.bias"));
  }
  result.sequence = seq;
  result.sequence.tokens = x;
  return result;
}

template <typename T>
ClsAttentionVector<T> cls_attention(const AttentionRecord<T>& record, int layer,
                                    std::size_t image) {
  const auto mean = record.mean_matrix(layer, image);
  ClsAttentionVector<T> out;
  out.layer = layer;
  out.values.assign(mean.begin() + 1, mean.begin() + static_cast<std::ptrdiff_t>(record.seq()));
  return out;
}

template <typename T>
Tensor<T> head_logits(const Tensor<T>& tokens, const ParamSet<T>& params,
                      const EncoderConfig& config) {
  (void)config;
  auto x = ops::gelu(ops::linear(tokens, params.at("head.mlp0.weight"), params.at("head.mlp0.bias")));
  x = ops::gelu(ops::linear(x, params.at("head.mlp1.weight"), params.at("head.mlp1.bias")));
  x = ops::linear(x, params.at("head.mlp2.weight"), params.at("head.mlp2.bias"));
  x = ops::l2_normalize_rows(x);
  return ops::mul_row(ops::matmul_nt(x, ops::l2_normalize_rows(params.at("head.last.weight"))),
                      params.at("head.last.gain"));
}

template <typename T>
Tensor<T> scaled_softmax(const Tensor<T>& logits, double temperature, std::span<const T> center) {
  if (!(temperature > 0.0)) {
    throw ParameterError("head temperature must be > 0, got " + std::to_string(temperature));
  }
  Tensor<T> shifted = logits;
  if (!center.empty()) {
    std::vector<T> neg(center.size());
    std::transform(center.begin(), center.end(), neg.begin(), [](T v) { return -v; });
    const std::size_t k = neg.size();
    shifted = ops::add_row(logits, Tensor<T>::from({k}, std::move(neg)));
  }
  return ops::softmax_rows(shifted, static_cast<T>(temperature));
}

std::vector<std::size_t> cls_rows(std::size_t batch, std::size_t seq_len) {
  std::vector<std::size_t> rows(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    rows[b] = b * seq_len;
  }
  return rows;
}

std::vector<std::size_t> patch_rows(std::size_t batch, std::size_t seq_len) {
  std::vector<std::size_t> rows;
  rows.reserve(batch * (seq_len - 1));
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 1; i < seq_len; ++i) {
      rows.push_back(b * seq_len + i);
    }
  }
  return rows;
}

template <typename T>
HeadOutput<T> head_forward(const TokenSequence<T>& out, const ParamSet<T>& params,
                           const EncoderConfig& config, double temperature,
                           std::span<const T> center) {
  const auto probs = scaled_softmax(head_logits(out.tokens, params, config), temperature, center);
  const auto crows = cls_rows(out.batch, out.seq_len());
  const auto prows = patch_rows(out.batch, out.seq_len());
  return {ops::gather_rows<T>(probs, crows), ops::gather_rows<T>(probs, prows)};
}

template <typename T>
Tensor<T> gap_features(const TokenSequence<T>& out) {
  return ops::group_mean_rows(out.tokens, out.seq_len(), 1, out.num_patches);
}

template <typename T>
Tensor<T> cls_features(const TokenSequence<T>& out) {
  const auto rows = cls_rows(out.batch, out.seq_len());
  return ops::gather_rows<T>(out.tokens, rows);
}

#define ATTMASK_INSTANTIATE(T)                                                                    \
  template class ParamSet<T>;                                                                     \
  template class AttentionRecord<T>;                                                              \
  template ParamSet<T> init_vit_params<T>(const EncoderConfig&, const Rng&);                      \
  template TokenSequence<T> tokenize<T>(const ImageBatch<T>&, const ParamSet<T>&,                 \
                                        const EncoderConfig&);                                    \
  template TokenSequence<T> add_position_embeddings<T>(const TokenSequence<T>&,                   \
                                                       const ParamSet<T>&, const EncoderConfig&); \
  template EncoderOutput<T> encoder_forward<T>(const TokenSequence<T>&, const ParamSet<T>&,       \
                                               const EncoderConfig&, int);                        \
  template ClsAttentionVector<T> cls_attention<T>(const AttentionRecord<T>&, int, std::size_t);   \
  template Tensor<T> head_logits<T>(const Tensor<T>&, const ParamSet<T>&, const EncoderConfig&);  \
  template Tensor<T> scaled_softmax<T>(const Tensor<T>&, double, std::span<const T>);             \
  template HeadOutput<T> head_forward<T>(const TokenSequence<T>&, const ParamSet<T>&,             \
                                         const EncoderConfig&, double, std::span<const T>);       \
  template Tensor<T> gap_features<T>(const TokenSequence<T>&);                                    \
  template Tensor<T> cls_features<T>(const TokenSequence<T>&);

ATTMASK_INSTANTIATE(float)
ATTMASK_INSTANTIATE(double)
#undef ATTMASK_INSTANTIATE

}  // namespace attmask
