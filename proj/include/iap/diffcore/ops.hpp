#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "iap/diffcore/tensor.hpp"

// Differentiable operations. Every op builds a new node whose backward
// accumulates into parents that require gradients. Axis arguments are always
// the trailing axis unless named otherwise.
namespace iap::diff {

inline constexpr double kLayerNormEps = 1e-5;

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T s);

/// x + y where y is repeated to cover x (numel(x) a multiple of numel(y)).
/// Covers bias rows and positional tables.
template <typename T> Tensor<T> add_tiled(const Tensor<T>& x, const Tensor<T>& y);

/// a[m,k] x b[k,n] (or b[n,k]^T when transpose_b).
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false);

/// Batched matmul over the leading axis: a[g,m,k] x b[g,k,n].
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false);

template <typename T> Tensor<T> softmax(const Tensor<T>& x);
template <typename T> Tensor<T> log_softmax(const Tensor<T>& x);
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias);
template <typename T> Tensor<T> gelu(const Tensor<T>& x);

/// Rows of x scaled to unit l2 norm; an all-zero row stays zero.
template <typename T> Tensor<T> l2_normalize(const Tensor<T>& x);

/// table[V,d] gathered at indices -> [n,d]. Throws IndexError on bad index.
template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const int> indices);

template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);
template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);

/// Columns [start, start+len) of a 2-D tensor.
template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t start, std::size_t len);

/// x[n,c] -> [n] with out[i] = x[i, picks[i]].
template <typename T> Tensor<T> pick(const Tensor<T>& x, std::span<const int> picks);

/// [b*l, h*dh] -> [b*h, l, dh] and back.
template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t batch, std::size_t len, std::size_t heads);
template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x, std::size_t batch, std::size_t heads);

/// Stacks `times` copies of x along a new leading block (shape [times*d0, ...]).
template <typename T> Tensor<T> repeat_groups(const Tensor<T>& x, std::size_t times);

/// x[b,p,d] with tok[d] inserted at position 0 of every item -> [b,p+1,d].
template <typename T> Tensor<T> prepend_token(const Tensor<T>& x, const Tensor<T>& tok);

/// x[b,l,d] -> [b,d] taking position `index` of every item.
template <typename T> Tensor<T> select_token(const Tensor<T>& x, std::size_t index);

/// base + w[g] * delta over `w.numel()` equal contiguous groups. A group whose
/// weight is exactly 0 is copied from base untouched.
template <typename T>
Tensor<T> add_scaled_groups(const Tensor<T>& base, const Tensor<T>& delta, const Tensor<T>& w);

/// Forward value `hard`, gradient routed to `soft` unchanged.
template <typename T>
Tensor<T> straight_through(std::span<const T> hard, const Tensor<T>& soft);

}  // namespace iap::diff
