#include "iap/diffcore/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numbers>

namespace iap::diff {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MutMap = Eigen::Map<RowMat<T>>;

template <typename T>
using BackwardFn = std::function<void(const Node<T>&)>;

/// Wraps a forward result into a node. Parents and backward are attached only
/// when at least one input requires gradients.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value,
                      std::initializer_list<const Tensor<T>*> inputs, BackwardFn<T> fn) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  for (const auto* in : inputs) {
    if (in->requires_grad()) n->requires_grad = true;
  }
  if (n->requires_grad) {
    for (const auto* in : inputs) n->parents.push_back(in->node_ptr());
    n->backward = std::move(fn);
  }
  return Tensor<T>(std::move(n));
}

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

template <typename T>
void require_rank(const char* op, const Tensor<T>& a, std::size_t rank) {
  if (a.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(a.shape()));
  }
}

std::size_t last_dim(const Shape& s) { return s.back(); }

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("add", a, b);
  std::vector<T> out(a.numel());
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  auto pa = a.node_ptr();
  auto pb = b.node_ptr();
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, [pa, pb](const Node<T>& o) {
    for (auto* p : {pa.get(), pb.get()}) {
      if (!p->requires_grad) continue;
      auto g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return add(a, scale(b, T(-1)));
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("mul", a, b);
  std::vector<T> out(a.numel());
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  auto pa = a.node_ptr();
  auto pb = b.node_ptr();
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, [pa, pb](const Node<T>& o) {
    if (pa->requires_grad) {
      auto g = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * pb->value[i];
    }
    if (pb->requires_grad) {
      auto g = pb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * pa->value[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.numel());
  auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * s;
  auto pa = a.node_ptr();
  return make_result<T>(a.shape(), std::move(out), {&a}, [pa, s](const Node<T>& o) {
    auto g = pa->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * s;
  });
}

template <typename T>
Tensor<T> add_tiled(const Tensor<T>& x, const Tensor<T>& y) {
  const std::size_t n = x.numel();
  const std::size_t m = y.numel();
  if (n % m != 0) {
    throw DimensionError("add_tiled: " + shape_str(y.shape()) + " does not tile " +
                         shape_str(x.shape()));
  }
  std::vector<T> out(n);
  auto xv = x.values();
  auto yv = y.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = xv[i] + yv[i % m];
  auto px = x.node_ptr();
  auto py = y.node_ptr();
  return make_result<T>(x.shape(), std::move(out), {&x, &y}, [px, py, m](const Node<T>& o) {
    if (px->requires_grad) {
      auto g = px->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
    if (py->requires_grad) {
      auto g = py->grad_buffer();
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i % m] += o.grad[i];
    }
  });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t m = a.dim(0), k = a.dim(1);
  const std::size_t bk = transpose_b ? b.dim(1) : b.dim(0);
  const std::size_t n = transpose_b ? b.dim(0) : b.dim(1);
  if (k != bk) {
    throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + (transpose_b ? "^T" : ""));
  }
  std::vector<T> out(m * n);
  ConstMap<T> A(a.values().data(), m, k);
  ConstMap<T> B(b.values().data(), b.dim(0), b.dim(1));
  MutMap<T> C(out.data(), m, n);
  if (transpose_b) {
    C.noalias() = A * B.transpose();
  } else {
    C.noalias() = A * B;
  }
  auto pa = a.node_ptr();
  auto pb = b.node_ptr();
  return make_result<T>({m, n}, std::move(out), {&a, &b},
                        [pa, pb, m, k, n, transpose_b](const Node<T>& o) {
                          ConstMap<T> G(o.grad.data(), m, n);
                          ConstMap<T> A(pa->value.data(), m, k);
                          if (pa->requires_grad) {
                            MutMap<T> dA(pa->grad_buffer().data(), m, k);
                            if (transpose_b) {
                              ConstMap<T> B(pb->value.data(), n, k);
                              dA.noalias() += G * B;
                            } else {
                              ConstMap<T> B(pb->value.data(), k, n);
                              dA.noalias() += G * B.transpose();
                            }
                          }
                          if (pb->requires_grad) {
                            if (transpose_b) {
                              MutMap<T> dB(pb->grad_buffer().data(), n, k);
                              dB.noalias() += G.transpose() * A;
                            } else {
                              MutMap<T> dB(pb->grad_buffer().data(), k, n);
                              dB.noalias() += A.transpose() * G;
                            }
                          }
                        });
}

template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b) {
  require_rank("bmm", a, 3);
  require_rank("bmm", b, 3);
  const std::size_t g = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t bk = transpose_b ? b.dim(2) : b.dim(1);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  if (b.dim(0) != g || k != bk) {
    throw DimensionError("bmm: incompatible shapes " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + (transpose_b ? "^T" : ""));
  }
  const std::size_t br = b.dim(1), bc = b.dim(2);
  std::vector<T> out(g * m * n);
  for (std::size_t i = 0; i < g; ++i) {
    ConstMap<T> A(a.values().data() + i * m * k, m, k);
    ConstMap<T> B(b.values().data() + i * br * bc, br, bc);
    MutMap<T> C(out.data() + i * m * n, m, n);
    if (transpose_b) {
      C.noalias() = A * B.transpose();
    } else {
      C.noalias() = A * B;
    }
  }
  auto pa = a.node_ptr();
  auto pb = b.node_ptr();
  return make_result<T>(
      {g, m, n}, std::move(out), {&a, &b}, [pa, pb, g, m, k, n, br, bc, transpose_b](const Node<T>& o) {
        T* da = pa->requires_grad ? pa->grad_buffer().data() : nullptr;
        T* db = pb->requires_grad ? pb->grad_buffer().data() : nullptr;
        for (std::size_t i = 0; i < g; ++i) {
          ConstMap<T> G(o.grad.data() + i * m * n, m, n);
          ConstMap<T> A(pa->value.data() + i * m * k, m, k);
          ConstMap<T> B(pb->value.data() + i * br * bc, br, bc);
          if (da) {
            MutMap<T> dA(da + i * m * k, m, k);
            if (transpose_b) {
              dA.noalias() += G * B;
            } else {
              dA.noalias() += G * B.transpose();
            }
          }
          if (db) {
            MutMap<T> dB(db + i * br * bc, br, bc);
            if (transpose_b) {
              dB.noalias() += G.transpose() * A;
            } else {
              dB.noalias() += A.transpose() * G;
            }
          }
        }
      });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  const std::size_t n = last_dim(x.shape());
  const std::size_t rows = x.numel() / n;
  std::vector<T> out(x.numel());
  auto xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * n;
    T* y = out.data() + r * n;
    const T mx = *std::max_element(in, in + n);
    T total = 0;
    for (std::size_t j = 0; j < n; ++j) {
      y[j] = std::exp(in[j] - mx);
      total += y[j];
    }
    for (std::size_t j = 0; j < n; ++j) y[j] /= total;
  }
  auto px = x.node_ptr();
  return make_result<T>(x.shape(), std::move(out), {&x}, [px, n, rows](const Node<T>& o) {
    auto g = px->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = o.value.data() + r * n;
      const T* dy = o.grad.data() + r * n;
      T dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += dy[j] * y[j];
      for (std::size_t j = 0; j < n; ++j) g[r * n + j] += y[j] * (dy[j] - dot);
    }
  });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x) {
  const std::size_t n = last_dim(x.shape());
  const std::size_t rows = x.numel() / n;
  std::vector<T> out(x.numel());
  auto xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * n;
    const T mx = *std::max_element(in, in + n);
    T total = 0;
    for (std::size_t j = 0; j < n; ++j) total += std::exp(in[j] - mx);
    const T lse = mx + std::log(total);
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = in[j] - lse;
  }
  auto px = x.node_ptr();
  return make_result<T>(x.shape(), std::move(out), {&x}, [px, n, rows](const Node<T>& o) {
    auto g = px->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = o.value.data() + r * n;
      const T* dy = o.grad.data() + r * n;
      T total = 0;
      for (std::size_t j = 0; j < n; ++j) total += dy[j];
      for (std::size_t j = 0; j < n; ++j) g[r * n + j] += dy[j] - std::exp(y[j]) * total;
    }
  });
}

template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias) {
  const std::size_t n = last_dim(x.shape());
  if (gain.numel() != n || bias.numel() != n) {
    throw DimensionError("layernorm: gain/bias " + shape_str(gain.shape()) + "/" +
                         shape_str(bias.shape()) + " for input " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / n;
  std::vector<T> out(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> inv_std(rows);
  auto xv = x.values();
  auto gv = gain.values();
  auto bv = bias.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * n;
    T mu = 0;
    for (std::size_t j = 0; j < n; ++j) mu += in[j];
    mu /= T(n);
    T var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= T(n);
    const T inv = T(1) / std::sqrt(var + T(kLayerNormEps));
    inv_std[r] = inv;
    for (std::size_t j = 0; j < n; ++j) {
      const T h = (in[j] - mu) * inv;
      xhat[r * n + j] = h;
      out[r * n + j] = h * gv[j] + bv[j];
    }
  }
  auto px = x.node_ptr();
  auto pg = gain.node_ptr();
  auto pb = bias.node_ptr();
  return make_result<T>(
      x.shape(), std::move(out), {&x, &gain, &bias},
      [px, pg, pb, n, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](const Node<T>& o) {
        if (pg->requires_grad) {
          auto g = pg->grad_buffer();
          for (std::size_t i = 0; i < o.grad.size(); ++i) g[i % n] += o.grad[i] * xhat[i];
        }
        if (pb->requires_grad) {
          auto g = pb->grad_buffer();
          for (std::size_t i = 0; i < o.grad.size(); ++i) g[i % n] += o.grad[i];
        }
        if (px->requires_grad) {
          auto g = px->grad_buffer();
          std::vector<T> dxhat(n);
          for (std::size_t r = 0; r < rows; ++r) {
            T s1 = 0, s2 = 0;
            for (std::size_t j = 0; j < n; ++j) {
              dxhat[j] = o.grad[r * n + j] * pg->value[j];
              s1 += dxhat[j];
              s2 += dxhat[j] * xhat[r * n + j];
            }
            const T c = inv_std[r] / T(n);
            for (std::size_t j = 0; j < n; ++j) {
              g[r * n + j] += c * (T(n) * dxhat[j] - s1 - xhat[r * n + j] * s2);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  std::vector<T> out(x.numel());
  auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = T(0.5) * xv[i] * (T(1) + std::erf(xv[i] * inv_sqrt2));
  }
  auto px = x.node_ptr();
  return make_result<T>(x.shape(), std::move(out), {&x}, [px, inv_sqrt2](const Node<T>& o) {
    const T inv_sqrt_2pi = inv_sqrt2 * std::numbers::inv_sqrtpi_v<T>;
    auto g = px->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T v = px->value[i];
      const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
      const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
      g[i] += o.grad[i] * (cdf + v * pdf);
    }
  });
}

template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& x) {
  const std::size_t n = last_dim(x.shape());
  const std::size_t rows = x.numel() / n;
  std::vector<T> out(x.numel(), T(0));
  std::vector<T> norms(rows);
  auto xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    T ss = 0;
    for (std::size_t j = 0; j < n; ++j) ss += xv[r * n + j] * xv[r * n + j];
    const T norm = std::sqrt(ss);
    norms[r] = norm;
    if (norm == T(0)) continue;
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = xv[r * n + j] / norm;
  }
  auto px = x.node_ptr();
  return make_result<T>(x.shape(), std::move(out), {&x},
                        [px, n, rows, norms = std::move(norms)](const Node<T>& o) {
                          auto g = px->grad_buffer();
                          for (std::size_t r = 0; r < rows; ++r) {
                            if (norms[r] == T(0)) continue;
                            const T* y = o.value.data() + r * n;
                            const T* dy = o.grad.data() + r * n;
                            T dot = 0;
                            for (std::size_t j = 0; j < n; ++j) dot += y[j] * dy[j];
                            for (std::size_t j = 0; j < n; ++j) {
                              g[r * n + j] += (dy[j] - y[j] * dot) / norms[r];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const int> indices) {
  require_rank("embedding_lookup", table, 2);
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<int> idx(indices.begin(), indices.end());
  for (int i : idx) {
    if (i < 0 || static_cast<std::size_t>(i) >= vocab) {
      throw IndexError("embedding_lookup: index " + std::to_string(i) + " outside table of " +
                       std::to_string(vocab) + " rows");
    }
  }
  if (idx.empty()) throw DimensionError("embedding_lookup: empty index list");
  std::vector<T> out(idx.size() * d);
  auto tv = table.values();
  for (std::size_t r = 0; r < idx.size(); ++r) {
    std::copy_n(tv.data() + idx[r] * d, d, out.data() + r * d);
  }
  auto pt = table.node_ptr();
  const std::size_t count = idx.size();
  return make_result<T>({count, d}, std::move(out), {&table},
                        [pt, d, idx = std::move(idx)](const Node<T>& o) {
                          auto g = pt->grad_buffer();
                          for (std::size_t r = 0; r < idx.size(); ++r) {
                            for (std::size_t j = 0; j < d; ++j) g[idx[r] * d + j] += o.grad[r * d + j];
                          }
                        });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = 0;
  for (T v : x.values()) total += v;
  auto px = x.node_ptr();
  return make_result<T>({1}, {total}, {&x}, [px](const Node<T>& o) {
    auto g = px->grad_buffer();
    for (auto& v : g) v += o.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  auto px = x.node_ptr();
  std::vector<T> out(x.values().begin(), x.values().end());
  return make_result<T>(std::move(shape), std::move(out), {&x}, [px](const Node<T>& o) {
    auto g = px->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
  });
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t start, std::size_t len) {
  require_rank("slice_cols", x, 2);
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (len == 0 || start + len > cols) {
    throw DimensionError("slice_cols: [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") outside " + shape_str(x.shape()));
  }
  std::vector<T> out(rows * len);
  auto xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(xv.data() + r * cols + start, len, out.data() + r * len);
  }
  auto px = x.node_ptr();
  return make_result<T>({rows, len}, std::move(out), {&x}, [px, rows, cols, start, len](const Node<T>& o) {
    auto g = px->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < len; ++j) g[r * cols + start + j] += o.grad[r * len + j];
    }
  });
}

template <typename T>
Tensor<T> pick(const Tensor<T>& x, std::span<const int> picks) {
  require_rank("pick", x, 2);
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (picks.size() != rows) {
    throw DimensionError("pick: " + std::to_string(picks.size()) + " picks for " + shape_str(x.shape()));
  }
  std::vector<int> idx(picks.begin(), picks.end());
  std::vector<T> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    if (idx[r] < 0 || static_cast<std::size_t>(idx[r]) >= cols) {
      throw IndexError("pick: column " + std::to_string(idx[r]) + " outside " + shape_str(x.shape()));
    }
    out[r] = x.values()[r * cols + idx[r]];
  }
  auto px = x.node_ptr();
  return make_result<T>({rows}, std::move(out), {&x}, [px, cols, idx = std::move(idx)](const Node<T>& o) {
    auto g = px->grad_buffer();
    for (std::size_t r = 0; r < idx.size(); ++r) g[r * cols + idx[r]] += o.grad[r];
  });
}

template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t batch, std::size_t len, std::size_t heads) {
  require_rank("split_heads", x, 2);
  const std::size_t d = x.dim(1);
  if (x.dim(0) != batch * len || d % heads != 0) {
    throw DimensionError("split_heads: " + shape_str(x.shape()) + " with batch " +
                         std::to_string(batch) + ", len " + std::to_string(len) + ", heads " +
                         std::to_string(heads));
  }
  const std::size_t dh = d / heads;
  // out[(b*heads + h), t, j] = x[b*len + t, h*dh + j]
  auto index = [=](std::size_t b, std::size_t h, std::size_t t) {
    return std::pair{((b * heads + h) * len + t) * dh, (b * len + t) * d + h * dh};
  };
  std::vector<T> out(x.numel());
  auto xv = x.values();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < len; ++t) {
        auto [o, i] = index(b, h, t);
        std::copy_n(xv.data() + i, dh, out.data() + o);
      }
  auto px = x.node_ptr();
  return make_result<T>({batch * heads, len, dh}, std::move(out), {&x},
                        [px, batch, heads, len, dh, index](const Node<T>& o) {
                          auto g = px->grad_buffer();
                          for (std::size_t b = 0; b < batch; ++b)
                            for (std::size_t h = 0; h < heads; ++h)
                              for (std::size_t t = 0; t < len; ++t) {
                                auto [oi, ii] = index(b, h, t);
                                for (std::size_t j = 0; j < dh; ++j) g[ii + j] += o.grad[oi + j];
                              }
                        });
}

template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x, std::size_t batch, std::size_t heads) {
  require_rank("merge_heads", x, 3);
  if (x.dim(0) != batch * heads) {
    throw DimensionError("merge_heads: " + shape_str(x.shape()) + " with batch " +
                         std::to_string(batch) + ", heads " + std::to_string(heads));
  }
  const std::size_t len = x.dim(1), dh = x.dim(2), d = dh * heads;
  auto index = [=](std::size_t b, std::size_t h, std::size_t t) {
    return std::pair{((b * heads + h) * len + t) * dh, (b * len + t) * d + h * dh};
  };
  std::vector<T> out(x.numel());
  auto xv = x.values();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < len; ++t) {
        auto [i, o] = index(b, h, t);
        std::copy_n(xv.data() + i, dh, out.data() + o);
      }
  auto px = x.node_ptr();
  return make_result<T>({batch * len, d}, std::move(out), {&x},
                        [px, batch, heads, len, dh, index](const Node<T>& o) {
                          auto g = px->grad_buffer();
                          for (std::size_t b = 0; b < batch; ++b)
                            for (std::size_t h = 0; h < heads; ++h)
                              for (std::size_t t = 0; t < len; ++t) {
                                auto [ii, oi] = index(b, h, t);
                                for (std::size_t j = 0; j < dh; ++j) g[ii + j] += o.grad[oi + j];
                              }
                        });
}

template <typename T>
Tensor<T> repeat_groups(const Tensor<T>& x, std::size_t times) {
  if (times == 0) throw DimensionError("repeat_groups: zero repeats");
  Shape shape = x.shape();
  shape[0] *= times;
  const std::size_t n = x.numel();
  std::vector<T> out(n * times);
  for (std::size_t r = 0; r < times; ++r) std::copy_n(x.values().data(), n, out.data() + r * n);
  auto px = x.node_ptr();
  return make_result<T>(std::move(shape), std::move(out), {&x}, [px, n, times](const Node<T>& o) {
    auto g = px->grad_buffer();
    for (std::size_t r = 0; r < times; ++r)
      for (std::size_t i = 0; i < n; ++i) g[i] += o.grad[r * n + i];
  });
}

template <typename T>
Tensor<T> prepend_token(const Tensor<T>& x, const Tensor<T>& tok) {
  require_rank("prepend_token", x, 3);
  const std::size_t b = x.dim(0), p = x.dim(1), d = x.dim(2);
  if (tok.numel() != d) {
    throw DimensionError("prepend_token: token " + shape_str(tok.shape()) + " for " + shape_str(x.shape()));
  }
  std::vector<T> out(b * (p + 1) * d);
  for (std::size_t i = 0; i < b; ++i) {
    T* dst = out.data() + i * (p + 1) * d;
    std::copy_n(tok.values().data(), d, dst);
    std::copy_n(x.values().data() + i * p * d, p * d, dst + d);
  }
  auto px = x.node_ptr();
  auto pt = tok.node_ptr();
  return make_result<T>({b, p + 1, d}, std::move(out), {&x, &tok}, [px, pt, b, p, d](const Node<T>& o) {
    if (px->requires_grad) {
      auto g = px->grad_buffer();
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < p * d; ++j) g[i * p * d + j] += o.grad[i * (p + 1) * d + d + j];
    }
    if (pt->requires_grad) {
      auto g = pt->grad_buffer();
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < d; ++j) g[j] += o.grad[i * (p + 1) * d + j];
    }
  });
}

template <typename T>
Tensor<T> select_token(const Tensor<T>& x, std::size_t index) {
  require_rank("select_token", x, 3);
  const std::size_t b = x.dim(0), l = x.dim(1), d = x.dim(2);
  if (index >= l) throw IndexError("select_token: position " + std::to_string(index) + " of " + shape_str(x.shape()));
  std::vector<T> out(b * d);
  for (std::size_t i = 0; i < b; ++i) std::copy_n(x.values().data() + (i * l + index) * d, d, out.data() + i * d);
  auto px = x.node_ptr();
  return make_result<T>({b, d}, std::move(out), {&x}, [px, b, l, d, index](const Node<T>& o) {
    auto g = px->grad_buffer();
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < d; ++j) g[(i * l + index) * d + j] += o.grad[i * d + j];
  });
}

template <typename T>
Tensor<T> add_scaled_groups(const Tensor<T>& base, const Tensor<T>& delta, const Tensor<T>& w) {
  require_same_shape("add_scaled_groups", base, delta);
  const std::size_t groups = w.numel();
  if (base.numel() % groups != 0) {
    throw DimensionError("add_scaled_groups: " + std::to_string(groups) + " weights for " +
                         shape_str(base.shape()));
  }
  const std::size_t span = base.numel() / groups;
  std::vector<T> out(base.values().begin(), base.values().end());
  auto dv = delta.values();
  auto wv = w.values();
  for (std::size_t gi = 0; gi < groups; ++gi) {
    if (wv[gi] == T(0)) continue;
    for (std::size_t j = gi * span; j < (gi + 1) * span; ++j) out[j] += wv[gi] * dv[j];
  }
  auto pb = base.node_ptr();
  auto pd = delta.node_ptr();
  auto pw = w.node_ptr();
  return make_result<T>(base.shape(), std::move(out), {&base, &delta, &w},
                        [pb, pd, pw, groups, span](const Node<T>& o) {
                          if (pb->requires_grad) {
                            auto g = pb->grad_buffer();
                            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                          }
                          if (pd->requires_grad) {
                            auto g = pd->grad_buffer();
                            for (std::size_t gi = 0; gi < groups; ++gi) {
                              const T wg = pw->value[gi];
                              for (std::size_t j = gi * span; j < (gi + 1) * span; ++j) g[j] += wg * o.grad[j];
                            }
                          }
                          if (pw->requires_grad) {
                            auto g = pw->grad_buffer();
                            for (std::size_t gi = 0; gi < groups; ++gi) {
                              T acc = 0;
                              for (std::size_t j = gi * span; j < (gi + 1) * span; ++j) acc += o.grad[j] * pd->value[j];
                              g[gi] += acc;
                            }
                          }
                        });
}

template <typename T>
Tensor<T> straight_through(std::span<const T> hard, const Tensor<T>& soft) {
  if (hard.size() != soft.numel()) {
    throw DimensionError("straight_through: " + std::to_string(hard.size()) + " hard values for " +
                         shape_str(soft.shape()));
  }
  auto ps = soft.node_ptr();
  return make_result<T>(soft.shape(), std::vector<T>(hard.begin(), hard.end()), {&soft},
                        [ps](const Node<T>& o) {
                          auto g = ps->grad_buffer();
                          for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                        });
}

#define IAP_INSTANTIATE_OPS(T)                                                              \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> scale(const Tensor<T>&, T);                                            \
  template Tensor<T> add_tiled(const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&, bool);                      \
  template Tensor<T> bmm(const Tensor<T>&, const Tensor<T>&, bool);                         \
  template Tensor<T> softmax(const Tensor<T>&);                                             \
  template Tensor<T> log_softmax(const Tensor<T>&);                                         \
  template Tensor<T> layernorm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);       \
  template Tensor<T> gelu(const Tensor<T>&);                                                \
  template Tensor<T> l2_normalize(const Tensor<T>&);                                        \
  template Tensor<T> embedding_lookup(const Tensor<T>&, std::span<const int>);              \
  template Tensor<T> sum(const Tensor<T>&);                                                 \
  template Tensor<T> mean(const Tensor<T>&);                                                \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                      \
  template Tensor<T> slice_cols(const Tensor<T>&, std::size_t, std::size_t);                \
  template Tensor<T> pick(const Tensor<T>&, std::span<const int>);                          \
  template Tensor<T> split_heads(const Tensor<T>&, std::size_t, std::size_t, std::size_t);  \
  template Tensor<T> merge_heads(const Tensor<T>&, std::size_t, std::size_t);               \
  template Tensor<T> repeat_groups(const Tensor<T>&, std::size_t);                          \
  template Tensor<T> prepend_token(const Tensor<T>&, const Tensor<T>&);                     \
  template Tensor<T> select_token(const Tensor<T>&, std::size_t);                           \
  template Tensor<T> add_scaled_groups(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&); \
  template Tensor<T> straight_through(std::span<const T>, const Tensor<T>&);

IAP_INSTANTIATE_OPS(float)
IAP_INSTANTIATE_OPS(double)

#undef IAP_INSTANTIATE_OPS

}  // namespace iap::diff
