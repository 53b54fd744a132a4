#pragma once

// Differentiable primitives. Matrices are rank-2; vectors (bias, gain) are
// rank-1. There is no broadcasting beyond adding a vector across the last axis.

#include <cstddef>
#include <vector>

#include "viscop/tensor.hpp"

namespace viscop {

/// Which (row, col) pairs a softmax row may put mass on.
struct AttentionMask {
  enum class Kind { none, causal, block_diagonal };
  Kind kind = Kind::none;
  /// For block_diagonal: rows and columns are grouped into consecutive runs of this size.
  std::size_t block = 0;

  static AttentionMask none() { return {}; }
  static AttentionMask causal() { return {Kind::causal, 0}; }
  static AttentionMask blocks(std::size_t block) { return {Kind::block_diagonal, block}; }
  [[nodiscard]] bool allows(std::size_t row, std::size_t col) const {
    switch (kind) {
      case Kind::causal: return col <= row;
      case Kind::block_diagonal: return row / block == col / block;
      default: return true;
    }
  }
};

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
/// x[..., j] + bias[j]
Tensor add_bias(const Tensor& x, const Tensor& bias);

/// Exact (erf) GELU.
Tensor gelu(const Tensor& x);

/// Row-wise softmax with max subtraction. Masked-out entries are exactly 0.
Tensor softmax_rows(const Tensor& x, AttentionMask mask = AttentionMask::none());

/// Normalizes over the last axis, then applies gain and bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

/// Mean negative log-likelihood over positions where ignore[i] is false.
Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& targets,
                     const std::vector<bool>& ignore);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// [R x C] -> [1 x C]
Tensor mean_rows(const Tensor& x);

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);

/// Embedding lookup: out[i] = table[ids[i]].
Tensor gather_rows(const Tensor& table, const std::vector<std::size_t>& ids);

}  // namespace viscop
