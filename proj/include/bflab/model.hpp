// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bflab/quant.hpp"
#include "bflab/tape.hpp"
#include "bflab/tensor.hpp"

// A tiny pre-LN decoder-only transformer. Weight matrices live as int8 codes
// (ParamSet); computation always runs on the dequantized float64 view
// (ModelWeights).
namespace bflab::model {

struct ModelConfig {
  std::size_t vocab = 96;
  std::size_t context = 160;
  std::size_t n_layer = 2;
  std::size_t n_head = 4;
  std::size_t d_model = 64;
  std::size_t d_ff = 128;  // 0 means 4 * d_model
  std::uint64_t seed = 1;

  std::size_t ff_width() const { return d_ff == 0 ? 4 * d_model : d_ff; }
  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct BlockWeights {
  num::DenseTensor ln1_gain, ln1_bias;
  num::DenseTensor w_qkv, b_qkv;
  num::DenseTensor w_attn_out, b_attn_out;
  num::DenseTensor ln2_gain, ln2_bias;
  num::DenseTensor w_fc, b_fc;
  num::DenseTensor w_mlp_out, b_mlp_out;
};

// One named tensor slot of the model, used to walk weights generically.
struct TensorSlot {
  std::string name;
  num::DenseTensor* tensor;
  bool quantized;  // weight matrices and embeddings; attackable
};
struct ConstTensorSlot {
  std::string name;
  const num::DenseTensor* tensor;
  bool quantized;
};

struct ModelWeights {
  ModelConfig config;
  num::DenseTensor tok_emb;  // [V x d]
  num::DenseTensor pos_emb;  // [L x d]
  std::vector<BlockWeights> blocks;
  num::DenseTensor lnf_gain, lnf_bias;
  num::DenseTensor lm_head;  // [d x V]

  std::vector<TensorSlot> slots();
  std::vector<ConstTensorSlot> slots() const;
  num::DenseTensor* find(std::string_view name);
  const num::DenseTensor* find(std::string_view name) const;
  std::size_t parameter_count() const;
};

// Layer at which a tensor first enters the computation: 0 for embeddings,
// l + 1 for block l, and size_t(-1) for the final norm and output head.
std::size_t entry_stage(std::string_view tensor_name);

ModelWeights init_weights(const ModelConfig& config);

struct FloatParam {
  std::string name;
  num::DenseTensor value;
  friend bool operator==(const FloatParam&, const FloatParam&) = default;
};

// Bit-addressable model storage. Quantized tensors and float tensors are each
// kept sorted by name.
struct ParamSet {
  ModelConfig config;
  std::vector<quant::QuantTensor> quantized;
  std::vector<FloatParam> floats;

  const quant::QuantTensor& quant(std::string_view name) const;
  quant::QuantTensor& quant(std::string_view name);
  std::size_t quant_index(std::string_view name) const;
  std::size_t attackable_count() const;
  void validate(const quant::BitLocation& loc) const;
  void flip_bit_inplace(const quant::BitLocation& loc);

  friend bool operator==(const ParamSet&, const ParamSet&) = default;
};

ParamSet quantize_model(const ModelWeights& weights);
ModelWeights dequantize_model(const ParamSet& params);

// Copy of params with exactly one code XOR-ed with (1 << loc.bit).
ParamSet flip_bit(const ParamSet& params, const quant::BitLocation& loc);

struct ForwardOutput {
  num::DenseTensor logits;                              // [T x V]
  std::vector<std::vector<num::DenseTensor>> attention;  // [layer][head] TxT
};

// Pieces of the forward pass, exposed so incremental evaluators can resume
// from a cached residual stream and stay bit-identical with forward().
num::DenseTensor embed(const ModelWeights& w, std::span<const int> tokens);
num::DenseTensor block_forward(const BlockWeights& b, std::size_t n_head,
                               const num::DenseTensor& x,
                               std::vector<num::DenseTensor>* probs);
num::DenseTensor final_norm(const ModelWeights& w, const num::DenseTensor& x);
num::DenseTensor output_head(const ModelWeights& w,
                             const num::DenseTensor& normed);

void check_tokens(const ModelConfig& config, std::span<const int> tokens);

ForwardOutput forward(const ModelWeights& w, std::span<const int> tokens);
ForwardOutput forward(const ParamSet& params, std::span<const int> tokens);

// Records the forward pass on a tape. Every tensor is registered as a
// parameter under its slot name.
struct TapeForward {
  num::Var logits;
  std::vector<num::Var> attention;  // one attention node per layer
};
TapeForward forward_on_tape(num::GradTape& tape, const ModelWeights& w,
                            std::span<const int> tokens);

// Appends the argmax token (lowest id on ties) until stop_token or max_new.
// Stops early when the context is full.
std::vector<int> greedy_decode(const ModelWeights& w, std::vector<int> prefix,
                               std::size_t max_new,
                               std::optional<int> stop_token = std::nullopt);
std::vector<int> greedy_decode(const ParamSet& params, std::vector<int> prefix,
                               std::size_t max_new,
                               std::optional<int> stop_token = std::nullopt);

std::size_t argmax_lowest(std::span<const double> row);

}  // namespace bflab::model
