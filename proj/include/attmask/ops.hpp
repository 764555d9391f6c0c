#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "attmask/tensor.hpp"

// Differentiable operations over row-major tensors. Anything of rank >= 2 is
// viewed as a (rows x cols) matrix with cols = last dimension.
namespace attmask::ops {

/// Plain row-major GEMM: C (+)= op(A) * op(B). No graph, no checks.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          const T* b, T* c, bool accumulate);

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
/// a * b^T
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);

/// x[r, :] + v for every row r.
template <typename T>
Tensor<T> add_row(const Tensor<T>& x, const Tensor<T>& v);
/// x[r, :] * v (elementwise) for every row r.
template <typename T>
Tensor<T> mul_row(const Tensor<T>& x, const Tensor<T>& v);
/// x[g*T + t, :] + p[t, :] for every group g; x rows must be a multiple of p rows.
template <typename T>
Tensor<T> add_tiled(const Tensor<T>& x, const Tensor<T>& p);
/// x * w + b with w stored (in x out).
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

/// Exact (erf) GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);
/// x[r] / max(|x[r]|, eps) per row.
template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x, T eps = T(1e-12));
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-6));

/// Row-wise softmax(x / temperature), stabilized by subtracting the row max.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x, T temperature = T(1));
template <typename T>
Tensor<T> log_softmax_rows(const Tensor<T>& x, T temperature = T(1));

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t count);
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> rows);
template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts);

/// [B*n x d] patch rows + [1 x d] prefix -> [B*(n+1) x d] with the prefix at
/// row 0 of every group.
template <typename T>
Tensor<T> prepend_row_per_group(const Tensor<T>& rows, const Tensor<T>& prefix,
                                std::size_t groups);
/// Rows with replace[r] != 0 become `embed`; the rest pass through.
template <typename T>
Tensor<T> substitute_rows(const Tensor<T>& x, std::span<const std::uint8_t> replace,
                          const Tensor<T>& embed);
/// Mean of rows [begin, begin+count) within each group of `group_size` rows.
template <typename T>
Tensor<T> group_mean_rows(const Tensor<T>& x, std::size_t group_size, std::size_t begin,
                          std::size_t count);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);

/// -sum_r weight[r] * <target[r], log_probs[r]>. `target` is treated as a
/// constant; gradient flows only into log_probs.
template <typename T>
Tensor<T> soft_cross_entropy(const Tensor<T>& target, const Tensor<T>& log_probs,
                             std::span<const T> row_weights);

/// Multi-head scaled dot-product self-attention over packed qkv rows
/// ([B*S x 3d], columns q | k | v, head h owning columns h*d/H .. (h+1)*d/H
/// of each block). Returns [B*S x d]. When `capture` is non-null it receives
/// the post-softmax attention, laid out [B][H][S][S].
template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& qkv, std::size_t batch, std::size_t seq,
                               std::size_t heads, std::vector<T>* capture = nullptr);

}  // namespace attmask::ops
