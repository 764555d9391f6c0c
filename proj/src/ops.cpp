#include "attmask/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "attmask/error.hpp"

namespace attmask::ops {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()) + " differ");
  }
}

template <typename T>
void require_positive_temperature(T temperature) {
  if (!(temperature > T(0))) {
    throw ParameterError("softmax temperature must be > 0, got " + std::to_string(temperature));
  }
}

}  // namespace

template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          const T* b, T* c, bool accumulate) {
  using Map = Eigen::Map<const RowMat<T>>;
  const auto mi = static_cast<Eigen::Index>(m);
  const auto ni = static_cast<Eigen::Index>(n);
  const auto ki = static_cast<Eigen::Index>(k);
  Eigen::Map<RowMat<T>> cm(c, mi, ni);
  const Map am(a, trans_a ? ki : mi, trans_a ? mi : ki);
  const Map bm(b, trans_b ? ni : ki, trans_b ? ki : ni);
  auto run = [&](const auto& lhs, const auto& rhs) {
    if (accumulate) {
      cm.noalias() += lhs * rhs;
    } else {
      cm.noalias() = lhs * rhs;
    }
  };
  if (trans_a && trans_b) {
    run(am.transpose(), bm.transpose());
  } else if (trans_a) {
    run(am.transpose(), bm);
  } else if (trans_b) {
    run(am, bm.transpose());
  } else {
    run(am, bm);
  }
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (a.dim() != 2 || b.dim() != 2 || b.rows() != k) {
    throw DimensionError("matmul: inner dimensions differ for " + shape_string(a.shape()) +
                         " x " + shape_string(b.shape()));
  }
  std::vector<T> out(m * n);
  gemm<T>(false, false, m, n, k, a.data().data(), b.data().data(), out.data(), false);
  auto an = a.node_ptr(), bn = b.node_ptr();
  return make_result<T>({m, n}, std::move(out), {&a, &b}, [an, bn, m, n, k](Node<T>& o) {
    if (an->requires_grad) {
      gemm<T>(false, true, m, k, n, o.grad.data(), bn->value.data(), an->grad_buffer().data(),
              true);
    }
    if (bn->requires_grad) {
      gemm<T>(true, false, k, n, m, an->value.data(), o.grad.data(), bn->grad_buffer().data(),
              true);
    }
  });
}

template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (a.dim() != 2 || b.dim() != 2 || b.cols() != k) {
    throw DimensionError("matmul_nt: inner dimensions differ for " + shape_string(a.shape()) +
                         " x " + shape_string(b.shape()) + "^T");
  }
  std::vector<T> out(m * n);
  gemm<T>(false, true, m, n, k, a.data().data(), b.data().data(), out.data(), false);
  auto an = a.node_ptr(), bn = b.node_ptr();
  return make_result<T>({m, n}, std::move(out), {&a, &b}, [an, bn, m, n, k](Node<T>& o) {
    if (an->requires_grad) {
      gemm<T>(false, false, m, k, n, o.grad.data(), bn->value.data(), an->grad_buffer().data(),
              true);
    }
    if (bn->requires_grad) {
      gemm<T>(true, false, n, k, m, o.grad.data(), an->value.data(), bn->grad_buffer().data(),
              true);
    }
  });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = a[i] + b[i];
  }
  auto an = a.node_ptr(), bn = b.node_ptr();
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, [an, bn](Node<T>& o) {
    if (an->requires_grad) {
      an->accumulate_grad(o.grad);
    }
    if (bn->requires_grad) {
      bn->accumulate_grad(o.grad);
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = a[i] - b[i];
  }
  auto an = a.node_ptr(), bn = b.node_ptr();
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, [an, bn](Node<T>& o) {
    if (an->requires_grad) {
      an->accumulate_grad(o.grad);
    }
    if (bn->requires_grad) {
      auto g = bn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        g[i] -= o.grad[i];
      }
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = a[i] * b[i];
  }
  auto an = a.node_ptr(), bn = b.node_ptr();
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, [an, bn](Node<T>& o) {
    if (an->requires_grad) {
      auto g = an->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        g[i] += o.grad[i] * bn->value[i];
      }
    }
    if (bn->requires_grad) {
      auto g = bn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        g[i] += o.grad[i] * an->value[i];
      }
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) {
    v *= factor;
  }
  auto an = a.node_ptr();
  return make_result<T>(a.shape(), std::move(out), {&a}, [an, factor](Node<T>& o) {
    auto g = an->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] += o.grad[i] * factor;
    }
  });
}

template <typename T>
Tensor<T> add_row(const Tensor<T>& x, const Tensor<T>& v) {
  const std::size_t r = x.rows(), c = x.cols();
  if (v.numel() != c) {
    throw DimensionError("add_row: vector " + shape_string(v.shape()) + " vs rows of " +
                         shape_string(x.shape()));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      out[i * c + j] += v[j];
    }
  }
  auto xn = x.node_ptr(), vn = v.node_ptr();
  return make_result<T>(x.shape(), std::move(out), {&x, &v}, [xn, vn, r, c](Node<T>& o) {
    if (xn->requires_grad) {
      xn->accumulate_grad(o.grad);
    }
    if (vn->requires_grad) {
      auto g = vn->grad_buffer();
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
          g[j] += o.grad[i * c + j];
        }
      }
    }
  });
}

template <typename T>
Tensor<T> mul_row(const Tensor<T>& x, const Tensor<T>& v) {
  const std::size_t r = x.rows(), c = x.cols();
  if (v.numel() != c) {
    throw DimensionError("mul_row: vector " + shape_string(v.shape()) + " vs rows of " +
                         shape_string(x.shape()));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      out[i * c + j] *= v[j];
    }
  }
  auto xn = x.node_ptr(), vn = v.node_ptr();
  return make_result<T>(x.shape(), std::move(out), {&x, &v}, [xn, vn, r, c](Node<T>& o) {
    if (xn->requires_grad) {
      auto g = xn->grad_buffer();
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
          g[i * c + j] += o.grad[i * c + j] * vn->value[j];
        }
      }
    }
    if (vn->requires_grad) {
      auto g = vn->grad_buffer();
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
          g[j] += o.grad[i * c + j] * xn->value[i * c + j];
        }
      }
    }
  });
}

template <typename T>
Tensor<T> add_tiled(const Tensor<T>& x, const Tensor<T>& p) {
  const std::size_t c = x.cols(), tile = p.rows();
  if (p.cols() != c || tile == 0 || x.rows() % tile != 0) {
    throw DimensionError("add_tiled: " + shape_string(p.shape()) + " does not tile " +
                         shape_string(x.shape()));
  }
  const std::size_t block = tile * c;
  std::vector<T> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] += p[i % block];
  }
  auto xn = x.node_ptr(), pn = p.node_ptr();
  return make_result<T>(x.shape(), std::move(out), {&x, &p}, [xn, pn, block](Node<T>& o) {
    if (xn->requires_grad) {
      xn->accumulate_grad(o.grad);
    }
    if (pn->requires_grad) {
      auto g = pn->grad_buffer();
      for (std::size_t i = 0; i < o.grad.size(); ++i) {
        g[i % block] += o.grad[i];
      }
    }
  });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  const std::size_t m = x.rows(), k = x.cols(), n = w.cols();
  if (w.rows() != k || (b.defined() && b.numel() != n)) {
    throw DimensionError("linear: input " + shape_string(x.shape()) + ", weight " +
                         shape_string(w.shape()));
  }
  std::vector<T> out(m * n);
  gemm<T>(false, false, m, n, k, x.data().data(), w.data().data(), out.data(), false);
  if (b.defined()) {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        out[i * n + j] += b[j];
      }
    }
  }
  auto xn = x.node_ptr(), wn = w.node_ptr();
  auto bn = b.defined() ? b.node_ptr() : nullptr;
  return make_result<T>({m, n}, std::move(out), {&x, &w, &b}, [xn, wn, bn, m, n, k](Node<T>& o) {
    if (xn->requires_grad) {
      gemm<T>(false, true, m, k, n, o.grad.data(), wn->value.data(), xn->grad_buffer().data(),
              true);
    }
    if (wn->requires_grad) {
      gemm<T>(true, false, k, n, m, xn->value.data(), o.grad.data(), wn->grad_buffer().data(),
              true);
    }
    if (bn && bn->requires_grad) {
      auto g = bn->grad_buffer();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          g[j] += o.grad[i * n + j];
        }
      }
    }
  });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  constexpr T inv_sqrt2pi = T(0.5) * std::numbers::inv_sqrtpi_v<T> * std::numbers::sqrt2_v<T>;
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = x[i];
    out[i] = T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2));
  }
  auto xn = x.node_ptr();
  return make_result<T>(x.shape(), std::move(out), {&x}, [xn](Node<T>& o) {
    auto g = xn->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T v = xn->value[i];
      const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
      const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
      g[i] += o.grad[i] * (cdf + v * pdf);
    }
  });
}

template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x, T eps) {
  const std::size_t r = x.rows(), c = x.cols();
  std::vector<T> out(r * c), inv_norm(r);
  for (std::size_t i = 0; i < r; ++i) {
    const T* row = x.data().data() + i * c;
    T sq = 0;
    for (std::size_t j = 0; j < c; ++j) {
      sq += row[j] * row[j];
    }
    inv_norm[i] = T(1) / std::max(std::sqrt(sq), eps);
    for (std::size_t j = 0; j < c; ++j) {
      out[i * c + j] = row[j] * inv_norm[i];
    }
  }
  auto xn = x.node_ptr();
  auto y = std::make_shared<std::vector<T>>(out);
  return make_result<T>(x.shape(), std::move(out), {&x},
                        [xn, y, inv_norm = std::move(inv_norm), r, c](Node<T>& o) {
                          auto g = xn->grad_buffer();
                          for (std::size_t i = 0; i < r; ++i) {
                            const T* yr = y->data() + i * c;
                            const T* dy = o.grad.data() + i * c;
                            T dot = 0;
                            for (std::size_t j = 0; j < c; ++j) {
                              dot += yr[j] * dy[j];
                            }
                            for (std::size_t j = 0; j < c; ++j) {
                              g[i * c + j] += (dy[j] - yr[j] * dot) * inv_norm[i];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  const std::size_t r = x.rows(), c = x.cols();
  if (gamma.numel() != c || beta.numel() != c) {
    throw DimensionError("layer_norm: affine parameters do not match " + shape_string(x.shape()));
  }
  std::vector<T> out(r * c), xhat(r * c), inv_std(r);
  for (std::size_t i = 0; i < r; ++i) {
    const T* row = x.data().data() + i * c;
    T mu = 0;
    for (std::size_t j = 0; j < c; ++j) {
      mu += row[j];
    }
    mu /= static_cast<T>(c);
    T var = 0;
    for (std::size_t j = 0; j < c; ++j) {
      var += (row[j] - mu) * (row[j] - mu);
    }
    var /= static_cast<T>(c);
    inv_std[i] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (row[j] - mu) * inv_std[i];
      out[i * c + j] = xhat[i * c + j] * gamma[j] + beta[j];
    }
  }
  auto xn = x.node_ptr(), gn = gamma.node_ptr(), bn = beta.node_ptr();
  return make_result<T>(
      x.shape(), std::move(out), {&x, &gamma, &beta},
      [xn, gn, bn, r, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& o) {
        if (gn->requires_grad || bn->requires_grad) {
          auto gg = gn->grad_buffer();
          auto gb = bn->grad_buffer();
          for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < c; ++j) {
              gg[j] += o.grad[i * c + j] * xhat[i * c + j];
              gb[j] += o.grad[i * c + j];
            }
          }
        }
        if (xn->requires_grad) {
          auto gx = xn->grad_buffer();
          const T inv_c = T(1) / static_cast<T>(c);
          for (std::size_t i = 0; i < r; ++i) {
            T sum_dy = 0, sum_dy_xhat = 0;
            for (std::size_t j = 0; j < c; ++j) {
              const T dy = o.grad[i * c + j] * gn->value[j];
              sum_dy += dy;
              sum_dy_xhat += dy * xhat[i * c + j];
            }
            for (std::size_t j = 0; j < c; ++j) {
              const T dy = o.grad[i * c + j] * gn->value[j];
              gx[i * c + j] +=
                  inv_std[i] * (dy - inv_c * sum_dy - xhat[i * c + j] * inv_c * sum_dy_xhat);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x, T temperature) {
  require_positive_temperature(temperature);
  const std::size_t r = x.rows(), c = x.cols();
  std::vector<T> out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    const T* row = x.data().data() + i * c;
    T* dst = out.data() + i * c;
    const T mx = *std::max_element(row, row + c);
    T total = 0;
    for (std::size_t j = 0; j < c; ++j) {
      dst[j] = std::exp((row[j] - mx) / temperature);
      total += dst[j];
    }
    for (std::size_t j = 0; j < c; ++j) {
      dst[j] /= total;
    }
  }
  auto xn = x.node_ptr();
  auto probs = std::make_shared<std::vector<T>>(out);
  return make_result<T>(x.shape(), std::move(out), {&x}, [xn, probs, r, c, temperature](Node<T>& o) {
    auto g = xn->grad_buffer();
    for (std::size_t i = 0; i < r; ++i) {
      const T* p = probs->data() + i * c;
      const T* dy = o.grad.data() + i * c;
      T dot = 0;
      for (std::size_t j = 0; j < c; ++j) {
        dot += dy[j] * p[j];
      }
      for (std::size_t j = 0; j < c; ++j) {
        g[i * c + j] += p[j] * (dy[j] - dot) / temperature;
      }
    }
  });
}

template <typename T>
Tensor<T> log_softmax_rows(const Tensor<T>& x, T temperature) {
  require_positive_temperature(temperature);
  const std::size_t r = x.rows(), c = x.cols();
  std::vector<T> out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    const T* row = x.data().data() + i * c;
    T* dst = out.data() + i * c;
    const T mx = *std::max_element(row, row + c);
    T total = 0;
    for (std::size_t j = 0; j < c; ++j) {
      total += std::exp((row[j] - mx) / temperature);
    }
    const T lse = std::log(total);
    for (std::size_t j = 0; j < c; ++j) {
      dst[j] = (row[j] - mx) / temperature - lse;
    }
  }
  auto xn = x.node_ptr();
  auto logp = std::make_shared<std::vector<T>>(out);
  return make_result<T>(x.shape(), std::move(out), {&x}, [xn, logp, r, c, temperature](Node<T>& o) {
    auto g = xn->grad_buffer();
    for (std::size_t i = 0; i < r; ++i) {
      const T* lp = logp->data() + i * c;
      const T* dy = o.grad.data() + i * c;
      T total = 0;
      for (std::size_t j = 0; j < c; ++j) {
        total += dy[j];
      }
      for (std::size_t j = 0; j < c; ++j) {
        g[i * c + j] += (dy[j] - std::exp(lp[j]) * total) / temperature;
      }
    }
  });
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t count) {
  const std::size_t c = x.cols();
  if (begin + count > x.rows()) {
    throw DimensionError("slice_rows: [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") out of " + shape_string(x.shape()));
  }
  std::vector<T> out(x.data().begin() + static_cast<std::ptrdiff_t>(begin * c),
                     x.data().begin() + static_cast<std::ptrdiff_t>((begin + count) * c));
  auto xn = x.node_ptr();
  return make_result<T>({count, c}, std::move(out), {&x}, [xn, begin, c](Node<T>& o) {
    auto g = xn->grad_buffer();
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      g[begin * c + i] += o.grad[i];
    }
  });
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> rows) {
  const std::size_t c = x.cols();
  std::vector<T> out(rows.size() * c);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= x.rows()) {
      throw DimensionError("gather_rows: row " + std::to_string(rows[i]) + " out of " +
                           shape_string(x.shape()));
    }
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(rows[i] * c), c,
                out.begin() + static_cast<std::ptrdiff_t>(i * c));
  }
  auto xn = x.node_ptr();
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return make_result<T>({rows.size(), c}, std::move(out), {&x},
                        [xn, idx = std::move(idx), c](Node<T>& o) {
                          auto g = xn->grad_buffer();
                          for (std::size_t i = 0; i < idx.size(); ++i) {
                            for (std::size_t j = 0; j < c; ++j) {
                              g[idx[i] * c + j] += o.grad[i * c + j];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) {
    throw ContractError("concat_rows: no inputs");
  }
  const std::size_t c = parts.front().cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.cols() != c) {
      throw DimensionError("concat_rows: column mismatch " + shape_string(p.shape()));
    }
    total += p.rows();
  }
  std::vector<T> out;
  out.reserve(total * c);
  for (const auto& p : parts) {
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  std::vector<std::shared_ptr<Node<T>>> nodes;
  for (const auto& p : parts) {
    nodes.push_back(p.node_ptr());
  }
  return make_result<T>({total, c}, std::move(out), parts, [nodes](Node<T>& o) {
    std::size_t offset = 0;
    for (const auto& n : nodes) {
      const std::size_t len = n->value.size();
      if (n->requires_grad) {
        n->accumulate_grad(std::span<const T>(o.grad).subspan(offset, len));
      }
      offset += len;
    }
  });
}

template <typename T>
Tensor<T> prepend_row_per_group(const Tensor<T>& rows, const Tensor<T>& prefix,
                                std::size_t groups) {
  const std::size_t c = rows.cols();
  if (prefix.numel() != c || groups == 0 || rows.rows() % groups != 0) {
    throw DimensionError("prepend_row_per_group: rows " + shape_string(rows.shape()) +
                         ", prefix " + shape_string(prefix.shape()));
  }
  const std::size_t per = rows.rows() / groups;
  const std::size_t seq = per + 1;
  std::vector<T> out(groups * seq * c);
  for (std::size_t g = 0; g < groups; ++g) {
    std::copy(prefix.data().begin(), prefix.data().end(), out.begin() + static_cast<std::ptrdiff_t>(g * seq * c));
    std::copy_n(rows.data().begin() + static_cast<std::ptrdiff_t>(g * per * c), per * c,
                out.begin() + static_cast<std::ptrdiff_t>((g * seq + 1) * c));
  }
  auto rn = rows.node_ptr(), pn = prefix.node_ptr();
  return make_result<T>({groups * seq, c}, std::move(out), {&rows, &prefix},
                        [rn, pn, groups, per, seq, c](Node<T>& o) {
                          if (rn->requires_grad) {
                            auto g = rn->grad_buffer();
                            for (std::size_t b = 0; b < groups; ++b) {
                              for (std::size_t i = 0; i < per * c; ++i) {
                                g[b * per * c + i] += o.grad[(b * seq + 1) * c + i];
                              }
                            }
                          }
                          if (pn->requires_grad) {
                            auto g = pn->grad_buffer();
                            for (std::size_t b = 0; b < groups; ++b) {
                              for (std::size_t j = 0; j < c; ++j) {
                                g[j] += o.grad[b * seq * c + j];
                              }
                            }
                          }
                        });
}

template <typename T>
Tensor<T> substitute_rows(const Tensor<T>& x, std::span<const std::uint8_t> replace,
                          const Tensor<T>& embed) {
  const std::size_t r = x.rows(), c = x.cols();
  if (replace.size() != r || embed.numel() != c) {
    throw DimensionError("substitute_rows: mask length " + std::to_string(replace.size()) +
                         " vs " + shape_string(x.shape()) + ", embedding " +
                         shape_string(embed.shape()));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < r; ++i) {
    if (replace[i]) {
      std::copy(embed.data().begin(), embed.data().end(), out.begin() + static_cast<std::ptrdiff_t>(i * c));
    }
  }
  auto xn = x.node_ptr(), en = embed.node_ptr();
  std::vector<std::uint8_t> flags(replace.begin(), replace.end());
  return make_result<T>(x.shape(), std::move(out), {&x, &embed},
                        [xn, en, flags = std::move(flags), r, c](Node<T>& o) {
                          if (xn->requires_grad) {
                            auto g = xn->grad_buffer();
                            for (std::size_t i = 0; i < r; ++i) {
                              if (!flags[i]) {
                                for (std::size_t j = 0; j < c; ++j) {
                                  g[i * c + j] += o.grad[i * c + j];
                                }
                              }
                            }
                          }
                          if (en->requires_grad) {
                            auto g = en->grad_buffer();
                            for (std::size_t i = 0; i < r; ++i) {
                              if (flags[i]) {
                                for (std::size_t j = 0; j < c; ++j) {
                                  g[j] += o.grad[i * c + j];
                                }
                              }
                            }
                          }
                        });
}

template <typename T>
Tensor<T> group_mean_rows(const Tensor<T>& x, std::size_t group_size, std::size_t begin,
                          std::size_t count) {
  const std::size_t c = x.cols();
  if (group_size == 0 || count == 0 || x.rows() % group_size != 0 || begin + count > group_size) {
    throw DimensionError("group_mean_rows: invalid grouping of " + shape_string(x.shape()));
  }
  const std::size_t groups = x.rows() / group_size;
  const T inv = T(1) / static_cast<T>(count);
  std::vector<T> out(groups * c, T(0));
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t i = begin; i < begin + count; ++i) {
      const T* row = x.data().data() + (g * group_size + i) * c;
      for (std::size_t j = 0; j < c; ++j) {
        out[g * c + j] += row[j];
      }
    }
    for (std::size_t j = 0; j < c; ++j) {
      out[g * c + j] *= inv;
    }
  }
  auto xn = x.node_ptr();
  return make_result<T>({groups, c}, std::move(out), {&x},
                        [xn, groups, group_size, begin, count, c, inv](Node<T>& o) {
                          auto g = xn->grad_buffer();
                          for (std::size_t b = 0; b < groups; ++b) {
                            for (std::size_t i = begin; i < begin + count; ++i) {
                              for (std::size_t j = 0; j < c; ++j) {
                                g[(b * group_size + i) * c + j] += o.grad[b * c + j] * inv;
                              }
                            }
                          }
                        });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = 0;
  for (const T v : x.data()) {
    total += v;
  }
  auto xn = x.node_ptr();
  return make_result<T>({}, {total}, {&x}, [xn](Node<T>& o) {
    auto g = xn->grad_buffer();
    for (auto& v : g) {
      v += o.grad[0];
    }
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> soft_cross_entropy(const Tensor<T>& target, const Tensor<T>& log_probs,
                             std::span<const T> row_weights) {
  require_same_shape(target, log_probs, "soft_cross_entropy");
  const std::size_t r = log_probs.rows(), c = log_probs.cols();
  if (row_weights.size() != r) {
    throw DimensionError("soft_cross_entropy: " + std::to_string(row_weights.size()) +
                         " weights for " + std::to_string(r) + " rows");
  }
  T total = 0;
  for (std::size_t i = 0; i < r; ++i) {
    if (row_weights[i] == T(0)) {
      continue;
    }
    T dot = 0;
    for (std::size_t j = 0; j < c; ++j) {
      dot += target[i * c + j] * log_probs[i * c + j];
    }
    total -= row_weights[i] * dot;
  }
  auto tn = target.node_ptr(), ln = log_probs.node_ptr();
  std::vector<T> w(row_weights.begin(), row_weights.end());
  return make_result<T>({}, {total}, {&log_probs}, [tn, ln, w = std::move(w), r, c](Node<T>& o) {
    auto g = ln->grad_buffer();
    for (std::size_t i = 0; i < r; ++i) {
      if (w[i] == T(0)) {
        continue;
      }
      const T f = -o.grad[0] * w[i];
      for (std::size_t j = 0; j < c; ++j) {
        g[i * c + j] += f * tn->value[i * c + j];
      }
    }
  });
}

template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& qkv, std::size_t batch, std::size_t seq,
                               std::size_t heads, std::vector<T>* capture) {
  const std::size_t width = qkv.cols();
  if (width % 3 != 0 || qkv.rows() != batch * seq || heads == 0 || (width / 3) % heads != 0) {
    throw DimensionError("multi_head_attention: packed qkv " + shape_string(qkv.shape()) +
                         " incompatible with batch " + std::to_string(batch) + ", seq " +
                         std::to_string(seq) + ", heads " + std::to_string(heads));
  }
  const std::size_t d = width / 3;
  const std::size_t hd = d / heads;
  const T scale_factor = T(1) / std::sqrt(static_cast<T>(hd));
  const std::size_t ss = seq * seq;

  std::vector<T> out(batch * seq * d);
  auto probs = std::make_shared<std::vector<T>>(batch * heads * ss);
  std::vector<T> q(seq * hd), k(seq * hd), v(seq * hd), o(seq * hd);
  const T* src = qkv.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t t = 0; t < seq; ++t) {
        const T* row = src + (b * seq + t) * width + h * hd;
        std::copy_n(row, hd, q.data() + t * hd);
        std::copy_n(row + d, hd, k.data() + t * hd);
        std::copy_n(row + 2 * d, hd, v.data() + t * hd);
      }
      T* a = probs->data() + (b * heads + h) * ss;
      gemm<T>(false, true, seq, seq, hd, q.data(), k.data(), a, false);
      for (std::size_t i = 0; i < seq; ++i) {
        T* arow = a + i * seq;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < seq; ++j) {
          arow[j] *= scale_factor;
          mx = std::max(mx, arow[j]);
        }
        T total = 0;
        for (std::size_t j = 0; j < seq; ++j) {
          arow[j] = std::exp(arow[j] - mx);
          total += arow[j];
        }
        for (std::size_t j = 0; j < seq; ++j) {
          arow[j] /= total;
        }
      }
      gemm<T>(false, false, seq, hd, seq, a, v.data(), o.data(), false);
      for (std::size_t t = 0; t < seq; ++t) {
        std::copy_n(o.data() + t * hd, hd, out.data() + (b * seq + t) * d + h * hd);
      }
    }
  }
  if (capture) {
    *capture = *probs;
  }
  auto qn = qkv.node_ptr();
  return make_result<T>(
      {batch * seq, d}, std::move(out), {&qkv},
      [qn, probs, batch, seq, heads, d, hd, width, ss, scale_factor](Node<T>& node) {
        auto g = qn->grad_buffer();
        std::vector<T> q(seq * hd), k(seq * hd), v(seq * hd), dout(seq * hd);
        std::vector<T> da(ss), dq(seq * hd), dk(seq * hd), dv(seq * hd);
        const T* src = qn->value.data();
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t t = 0; t < seq; ++t) {
              const T* row = src + (b * seq + t) * width + h * hd;
              std::copy_n(row, hd, q.data() + t * hd);
              std::copy_n(row + d, hd, k.data() + t * hd);
              std::copy_n(row + 2 * d, hd, v.data() + t * hd);
              std::copy_n(node.grad.data() + (b * seq + t) * d + h * hd, hd,
                          dout.data() + t * hd);
            }
            const T* a = probs->data() + (b * heads + h) * ss;
            gemm<T>(true, false, seq, hd, seq, a, dout.data(), dv.data(), false);
            gemm<T>(false, true, seq, seq, hd, dout.data(), v.data(), da.data(), false);
            for (std::size_t i = 0; i < seq; ++i) {
              const T* arow = a + i * seq;
              T* drow = da.data() + i * seq;
              T dot = 0;
              for (std::size_t j = 0; j < seq; ++j) {
                dot += drow[j] * arow[j];
              }
              for (std::size_t j = 0; j < seq; ++j) {
                drow[j] = arow[j] * (drow[j] - dot) * scale_factor;
              }
            }
            gemm<T>(false, false, seq, hd, seq, da.data(), k.data(), dq.data(), false);
            gemm<T>(true, false, seq, hd, seq, da.data(), q.data(), dk.data(), false);
            for (std::size_t t = 0; t < seq; ++t) {
              T* row = g.data() + (b * seq + t) * width + h * hd;
              for (std::size_t j = 0; j < hd; ++j) {
                row[j] += dq[t * hd + j];
                row[d + j] += dk[t * hd + j];
                row[2 * d + j] += dv[t * hd + j];
              }
            }
          }
        }
      });
}

#define ATTMASK_INSTANTIATE(T)                                                                   \
  template void gemm<T>(bool, bool, std::size_t, std::size_t, std::size_t, const T*, const T*,   \
                        T*, bool);                                                               \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> matmul_nt<T>(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                              \
  template Tensor<T> add_row<T>(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> mul_row<T>(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> add_tiled<T>(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> linear<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);            \
  template Tensor<T> gelu<T>(const Tensor<T>&);                                                  \
  template Tensor<T> l2_normalize_rows<T>(const Tensor<T>&, T);                                  \
  template Tensor<T> layer_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);     \
  template Tensor<T> softmax_rows<T>(const Tensor<T>&, T);                                       \
  template Tensor<T> log_softmax_rows<T>(const Tensor<T>&, T);                                   \
  template Tensor<T> slice_rows<T>(const Tensor<T>&, std::size_t, std::size_t);                  \
  template Tensor<T> gather_rows<T>(const Tensor<T>&, std::span<const std::size_t>);             \
  template Tensor<T> concat_rows<T>(const std::vector<Tensor<T>>&);                              \
  template Tensor<T> prepend_row_per_group<T>(const Tensor<T>&, const Tensor<T>&, std::size_t);  \
  template Tensor<T> substitute_rows<T>(const Tensor<T>&, std::span<const std::uint8_t>,         \
                                        const Tensor<T>&);                                       \
  template Tensor<T> group_mean_rows<T>(const Tensor<T>&, std::size_t, std::size_t,              \
                                        std::size_t);                                            \
  template Tensor<T> sum<T>(const Tensor<T>&);                                                   \
  template Tensor<T> mean<T>(const Tensor<T>&);                                                  \
  template Tensor<T> soft_cross_entropy<T>(const Tensor<T>&, const Tensor<T>&,                   \
                                           std::span<const T>);                                  \
  template Tensor<T> multi_head_attention<T>(const Tensor<T>&, std::size_t, std::size_t,         \
                                             std::size_t, std::vector<T>*);

ATTMASK_INSTANTIATE(float)
ATTMASK_INSTANTIATE(double)
#undef ATTMASK_INSTANTIATE

}  // namespace attmask::ops
