// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "bflab/tensor.hpp"

// The closed set of numeric kernels the toy transformer needs, each with its
// hand-written backward. All kernels are pure and deterministic: the
// accumulation order of every reduction is fixed, so identical inputs give
// bit-identical outputs.
namespace bflab::num {

inline constexpr double kLogClamp = 1e-12;
inline constexpr double kLayerNormEps = 1e-5;

// out = a * b. Each output element accumulates over k in ascending order.
DenseTensor matmul(const DenseTensor& a, const DenseTensor& b);
// out += a * b, with out already shaped [m x n].
void matmul_accumulate(const DenseTensor& a, const DenseTensor& b,
                       DenseTensor& out);
// grad_a += grad_out * b^T
void matmul_backward_a(const DenseTensor& grad_out, const DenseTensor& b,
                       DenseTensor& grad_a);
// grad_b += a^T * grad_out
void matmul_backward_b(const DenseTensor& a, const DenseTensor& grad_out,
                       DenseTensor& grad_b);

DenseTensor add(const DenseTensor& a, const DenseTensor& b);
// x[r][c] += bias[c]
void add_row_bias_inplace(DenseTensor& x, const DenseTensor& bias);

struct LayerNormStats {
  std::vector<double> mean;
  std::vector<double> rstd;
};
DenseTensor layernorm_rows(const DenseTensor& x, const DenseTensor& gain,
                           const DenseTensor& bias,
                           LayerNormStats* stats = nullptr);
void layernorm_rows_backward(const DenseTensor& x, const DenseTensor& gain,
                             const LayerNormStats& stats,
                             const DenseTensor& grad_out, DenseTensor& grad_x,
                             DenseTensor& grad_gain, DenseTensor& grad_bias);

// tanh-approximation GELU.
double gelu(double x);
double gelu_derivative(double x);
DenseTensor gelu(const DenseTensor& x);
void gelu_inplace(DenseTensor& x);
void gelu_backward(const DenseTensor& x, const DenseTensor& grad_out,
                   DenseTensor& grad_x);

// Row-wise softmax with max subtraction.
DenseTensor softmax_rows(const DenseTensor& x);
void softmax_row(std::span<const double> in, std::span<double> out);

// Causal multi-head self-attention over a fused [T x 3d] projection laid out
// as [q | k | v]. probs[h] is [T x T] with probs[h][t][p] the weight of query
// t on key p; entries with p > t are exactly zero.
struct AttentionResult {
  DenseTensor out;                  // [T x d]
  std::vector<DenseTensor> probs;  // n_head x [T x T]
};
AttentionResult causal_attention(const DenseTensor& qkv, std::size_t n_head);
// grad_probs may be empty (no direct gradient on the attention maps).
void causal_attention_backward(const DenseTensor& qkv, std::size_t n_head,
                               const std::vector<DenseTensor>& probs,
                               const DenseTensor& grad_out,
                               const std::vector<DenseTensor>& grad_probs,
                               DenseTensor& grad_qkv);

DenseTensor embedding_lookup(const DenseTensor& table,
                             std::span<const int> ids);
void embedding_backward(std::span<const int> ids, const DenseTensor& grad_out,
                        DenseTensor& grad_table);

// -ln(max(probs[target], kLogClamp)).
double cross_entropy(std::span<const double> probs, std::size_t target);
double cross_entropy(const DenseTensor& probs, std::size_t target);
// Cross-entropy of softmax(logits_row) against target, plus the gradient
// w.r.t. the logits row when grad is non-null (accumulated, scaled by weight).
double cross_entropy_logits(std::span<const double> logits, std::size_t target,
                            std::span<double> grad = {}, double weight = 1.0);

// Mean over rows of the squared L2 distance between x and ref rows.
double mse_rows(const DenseTensor& x, const DenseTensor& ref);

}  // namespace bflab::num
