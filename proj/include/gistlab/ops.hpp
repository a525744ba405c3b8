#pragma once

// Differentiable primitives. Every function takes the tape the result is
// recorded on; results are constants when no input requires a gradient.

#include <cstddef>
#include <span>
#include <vector>

#include "gistlab/tensor.hpp"

namespace gistlab::ops {

template <typename T> Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(Tape<T>& tape, const Tensor<T>& a, T factor);

/// x[...xN] + bias[N], bias broadcast over all leading axes.
template <typename T> Tensor<T> add_bias(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& bias);

template <typename T> Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x);
template <typename T> Tensor<T> mean(Tape<T>& tape, const Tensor<T>& x);
template <typename T> Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& x, Shape shape);

/// a[m x k] . b[k x n]
template <typename T> Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

/// x[... x in] . weight[in x out] (+ bias[out]). `bias` may be undefined.
template <typename T>
Tensor<T> linear(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

/// Per-group products a[g] . b[g] with a[G x m x k]; b is [G x k x n], or
/// [G x n x k] when `transpose_b` is set.
template <typename T>
Tensor<T> batched_matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b, bool transpose_b);

/// [B x S x H*Dh] -> [B*H x S x Dh]
template <typename T> Tensor<T> split_heads(Tape<T>& tape, const Tensor<T>& x, std::size_t heads);
/// [B*H x S x Dh] -> [B x S x H*Dh]
template <typename T> Tensor<T> merge_heads(Tape<T>& tape, const Tensor<T>& x, std::size_t heads);

/// Softmax of logits / temperature along the last axis (max-subtracted).
template <typename T> Tensor<T> softmax_t(Tape<T>& tape, const Tensor<T>& logits, T temperature);

template <typename T>
Tensor<T> layer_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps);

/// Exact GELU: x * Phi(x), with Phi the standard normal CDF (erf form).
template <typename T> Tensor<T> gelu(Tape<T>& tape, const Tensor<T>& x);

/// gamma (.) x + beta along the last axis.
template <typename T>
Tensor<T> scale_shift(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta);

/// Mean over the batch of -log softmax(logits)[label].
template <typename T>
Tensor<T> cross_entropy(Tape<T>& tape, const Tensor<T>& logits, std::span<const int> labels);

/// Batch mean of KL(softmax_t(p) || softmax_t(q)). Gradients reach both
/// arguments; log-probabilities come from log-sum-exp.
template <typename T>
Tensor<T> kl_divergence(Tape<T>& tape, const Tensor<T>& p_logits, const Tensor<T>& q_logits, T temperature);

/// Mean of (a - b)^2 over every element.
template <typename T> Tensor<T> mse(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

/// 1 - mean over rows of cos(a_i, b_i). A zero row has similarity 0.
template <typename T> Tensor<T> cosine_distance(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

/// Concatenates [B x S_i x D] blocks along the token axis.
template <typename T> Tensor<T> concat_tokens(Tape<T>& tape, const std::vector<Tensor<T>>& parts);

/// Repeats x[S x D] (or [D]) across a new leading batch axis.
template <typename T> Tensor<T> broadcast_batch(Tape<T>& tape, const Tensor<T>& x, std::size_t batch);

/// Tokens [begin, begin + count) of x[B x S x D] -> [B x count x D].
template <typename T>
Tensor<T> slice_tokens(Tape<T>& tape, const Tensor<T>& x, std::size_t begin, std::size_t count);

/// Mean over the token axis of x[B x S x D] -> [B x D].
template <typename T> Tensor<T> mean_tokens(Tape<T>& tape, const Tensor<T>& x);

/// images[B x C x H x W] -> [B x L x C*p*p], patches in row-major order,
/// each patch flattened as (channel, row, column).
template <typename T> Tensor<T> patchify(Tape<T>& tape, const Tensor<T>& images, std::size_t patch);

}  // namespace gistlab::ops
