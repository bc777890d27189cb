#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "htr/tensor.hpp"

namespace htr {

using TokenId = std::int32_t;

// Every op checks shapes, computes its output eagerly and, when a tape is
// active and some input requires grad, records its backward rule.
// Broadcasting exists only in add_bias and scale.

/// [m,k]·[k,n] -> [m,n], or batched [b,m,k]·[b,k,n] -> [b,m,n].
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);

struct Conv2dParams {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

/// Cross-correlation of [N,C,H,W] with [F,C,kh,kw]; zero padding. `bias` ([F]) may be undefined.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias, Conv2dParams params);

struct Pool2dParams {
  std::size_t kernel = 2;
  std::size_t stride = 2;
  std::size_t padding = 0;
};

/// Windowed maximum; backward routes to the first maximum in row-major window order.
template <typename T>
BasicTensor<T> maxpool2d(const BasicTensor<T>& input, Pool2dParams params);

/// Running statistics owned by a batchnorm layer. Never differentiated.
template <typename T>
struct BatchNormState {
  BasicTensor<T> running_mean;
  BasicTensor<T> running_var;
};

/// Per-channel normalization of [N,C,H,W]. Train mode uses batch statistics and
/// updates `state` (unbiased variance in the running estimate); eval mode reads it.
template <typename T>
BasicTensor<T> batchnorm2d(const BasicTensor<T>& input, const BasicTensor<T>& gamma,
                           const BasicTensor<T>& beta, BatchNormState<T>& state, bool training,
                           double momentum, double eps);

/// Normalizes over the last axis, then applies gamma/beta.
template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& input, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, double eps);

/// Softmax over the last axis.
template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& input);

/// Blocked entries for a masked softmax. The input's leading extents (all but
/// the last two) are split into `batch` equal groups; group g uses mask slice g.
struct BlockMask {
  std::size_t batch = 1;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> blocked;  // batch*rows*cols, nonzero = blocked

  bool is_blocked(std::size_t b, std::size_t r, std::size_t c) const {
    return blocked[(b * rows + r) * cols + c] != 0;
  }
};

/// Softmax over the last axis with blocked entries forced to exactly zero.
/// Throws MaskError if any row is fully blocked.
template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& input, const BlockMask& mask);

/// Mean negative log-likelihood of `targets` under `logits` [T,V], skipping
/// positions whose target equals `ignore_id`.
template <typename T>
BasicTensor<T> cross_entropy_masked(const BasicTensor<T>& logits, std::span<const TokenId> targets,
                                    TokenId ignore_id);

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x);

/// [N,C,H,W] -> [N,C]
template <typename T>
BasicTensor<T> global_avgpool(const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);

/// Elementwise product of equal shapes.
template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, double factor);

/// x[..., d] + bias[d]
template <typename T>
BasicTensor<T> add_bias(const BasicTensor<T>& x, const BasicTensor<T>& bias);

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape);

/// General axis permutation: output axis i is input axis perm[i].
template <typename T>
BasicTensor<T> permute(const BasicTensor<T>& x, const std::vector<std::size_t>& perm);

/// Swaps two axes.
template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& x, std::size_t axis0, std::size_t axis1);

template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::size_t axis);

/// Sum of all elements as a [1] tensor.
template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x);

/// Rows of `table` [V,d] selected by `ids` -> [ids.size(), d].
template <typename T>
BasicTensor<T> embedding_lookup(const BasicTensor<T>& table, std::span<const TokenId> ids);

/// Inverted dropout. Identity when p == 0.
template <typename T>
BasicTensor<T> dropout(const BasicTensor<T>& x, double p, std::mt19937_64& rng);

}  // namespace htr
