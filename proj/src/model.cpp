// SPDX-License-Identifier: Apache-2.0

#include "bflab/model.hpp"

#include <algorithm>
#include <cmath>

#include "bflab/error.hpp"
#include "bflab/kernels.hpp"

namespace bflab::model {

using num::DenseTensor;

void ModelConfig::validate() const {
  if (vocab == 0 || context == 0 || n_layer == 0 || n_head == 0 ||
      d_model == 0) {
    throw ConfigError("model config fields must be positive");
  }
  if (d_model % n_head != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) +
                      " not divisible by n_head " + std::to_string(n_head));
  }
}

namespace {

std::string block_prefix(std::size_t l) { return "h" + std::to_string(l) + "."; }

template <class Slot, class W>
std::vector<Slot> collect_slots(W& w) {
  std::vector<Slot> out;
  out.push_back({"tok_emb", &w.tok_emb, true});
  out.push_back({"pos_emb", &w.pos_emb, true});
  for (std::size_t l = 0; l < w.blocks.size(); ++l) {
    auto& b = w.blocks[l];
    const std::string p = block_prefix(l);
    out.push_back({p + "ln1.gain", &b.ln1_gain, false});
    out.push_back({p + "ln1.bias", &b.ln1_bias, false});
    out.push_back({p + "attn.w_qkv", &b.w_qkv, true});
    out.push_back({p + "attn.b_qkv", &b.b_qkv, false});
    out.push_back({p + "attn.w_out", &b.w_attn_out, true});
    out.push_back({p + "attn.b_out", &b.b_attn_out, false});
    out.push_back({p + "ln2.gain", &b.ln2_gain, false});
    out.push_back({p + "ln2.bias", &b.ln2_bias, false});
    out.push_back({p + "mlp.w_fc", &b.w_fc, true});
    out.push_back({p + "mlp.b_fc", &b.b_fc, false});
    out.push_back({p + "mlp.w_out", &b.w_mlp_out, true});
    out.push_back({p + "mlp.b_out", &b.b_mlp_out, false});
  }
  out.push_back({"ln_f.gain", &w.lnf_gain, false});
  out.push_back({"ln_f.bias", &w.lnf_bias, false});
  out.push_back({"lm_head", &w.lm_head, true});
  return out;
}

DenseTensor normal_tensor(std::vector<std::size_t> dims, double stddev,
                          std::mt19937_64& rng) {
  DenseTensor t(std::move(dims));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.storage()) v = dist(rng);
  return t;
}

}  // namespace

std::vector<TensorSlot> ModelWeights::slots() {
  return collect_slots<TensorSlot>(*this);
}

std::vector<ConstTensorSlot> ModelWeights::slots() const {
  return collect_slots<ConstTensorSlot>(*this);
}

DenseTensor* ModelWeights::find(std::string_view name) {
  for (auto& s : slots()) {
    if (s.name == name) return s.tensor;
  }
  return nullptr;
}

const DenseTensor* ModelWeights::find(std::string_view name) const {
  for (const auto& s : slots()) {
    if (s.name == name) return s.tensor;
  }
  return nullptr;
}

std::size_t ModelWeights::parameter_count() const {
  std::size_t n = 0;
  for (const auto& s : slots()) n += s.tensor->size();
  return n;
}

std::size_t entry_stage(std::string_view name) {
  if (name == "tok_emb" || name == "pos_emb") return 0;
  if (name.size() > 1 && name[0] == 'h') {
    const auto dot = name.find('.');
    return static_cast<std::size_t>(std::stoul(std::string(name.substr(1, dot - 1)))) + 1;
  }
  // Output head and final norm.
  return static_cast<std::size_t>(-1);
}

ModelWeights init_weights(const ModelConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  const std::size_t d = config.d_model, ff = config.ff_width();
  const double std_w = 0.02;
  const double std_res = 0.02 / std::sqrt(2.0 * config.n_layer);
  ModelWeights w;
  w.config = config;
  w.tok_emb = normal_tensor({config.vocab, d}, std_w, rng);
  w.pos_emb = normal_tensor({config.context, d}, std_w, rng);
  for (std::size_t l = 0; l < config.n_layer; ++l) {
    BlockWeights b;
    b.ln1_gain = DenseTensor({d}, 1.0);
    b.ln1_bias = DenseTensor({d});
    b.w_qkv = normal_tensor({d, 3 * d}, std_w, rng);
    b.b_qkv = DenseTensor({3 * d});
    b.w_attn_out = normal_tensor({d, d}, std_res, rng);
    b.b_attn_out = DenseTensor({d});
    b.ln2_gain = DenseTensor({d}, 1.0);
    b.ln2_bias = DenseTensor({d});
    b.w_fc = normal_tensor({d, ff}, std_w, rng);
    b.b_fc = DenseTensor({ff});
    b.w_mlp_out = normal_tensor({ff, d}, std_res, rng);
    b.b_mlp_out = DenseTensor({d});
    w.blocks.push_back(std::move(b));
  }
  w.lnf_gain = DenseTensor({d}, 1.0);
  w.lnf_bias = DenseTensor({d});
  w.lm_head = normal_tensor({d, config.vocab}, std_w, rng);
  return w;
}

// ---------------------------------------------------------------------------
// ParamSet

std::size_t ParamSet::quant_index(std::string_view name) const {
  auto it = std::lower_bound(
      quantized.begin(), quantized.end(), name,
      [](const quant::QuantTensor& q, std::string_view n) { return q.name < n; });
  if (it == quantized.end() || it->name != name) {
    throw LocationError("unknown quantized tensor '" + std::string(name) + "'");
  }
  return static_cast<std::size_t>(it - quantized.begin());
}

const quant::QuantTensor& ParamSet::quant(std::string_view name) const {
  return quantized[quant_index(name)];
}

quant::QuantTensor& ParamSet::quant(std::string_view name) {
  return quantized[quant_index(name)];
}

std::size_t ParamSet::attackable_count() const {
  std::size_t n = 0;
  for (const auto& q : quantized) n += q.size();
  return n;
}

void ParamSet::validate(const quant::BitLocation& loc) const {
  const auto& q = quant(loc.tensor);
  if (loc.index >= q.size()) {
    throw LocationError("index " + std::to_string(loc.index) +
                        " out of range for " + loc.tensor);
  }
  if (loc.bit < 0 || loc.bit >= quant::kBitsPerCode) {
    throw LocationError("bit " + std::to_string(loc.bit) + " outside [0,7]");
  }
}

void ParamSet::flip_bit_inplace(const quant::BitLocation& loc) {
  validate(loc);
  auto& q = quant(loc.tensor);
  q.codes[loc.index] = quant::flip_code(q.codes[loc.index], loc.bit);
}

ParamSet flip_bit(const ParamSet& params, const quant::BitLocation& loc) {
  params.validate(loc);
  ParamSet out = params;
  out.flip_bit_inplace(loc);
  return out;
}

ParamSet quantize_model(const ModelWeights& weights) {
  ParamSet p;
  p.config = weights.config;
  for (const auto& s : weights.slots()) {
    if (s.quantized) {
      p.quantized.push_back(quant::quantize(*s.tensor, s.name));
    } else {
      p.floats.push_back({s.name, *s.tensor});
    }
  }
  std::sort(p.quantized.begin(), p.quantized.end(),
            [](const auto& a, const auto& b) { return a.name < b.name; });
  std::sort(p.floats.begin(), p.floats.end(),
            [](const auto& a, const auto& b) { return a.name < b.name; });
  return p;
}

ModelWeights dequantize_model(const ParamSet& params) {
  ModelConfig cfg = params.config;
  cfg.validate();
  ModelWeights w;
  w.config = cfg;
  w.blocks.resize(cfg.n_layer);
  for (auto& s : w.slots()) {
    if (s.quantized) {
      *s.tensor = params.quant(s.name).dequantize();
    } else {
      auto it = std::find_if(params.floats.begin(), params.floats.end(),
                             [&](const FloatParam& f) { return f.name == s.name; });
      if (it == params.floats.end()) {
        throw FormatError("parameter set missing float tensor '" + s.name + "'");
      }
      *s.tensor = it->value;
    }
  }
  return w;
}

// ---------------------------------------------------------------------------
// Forward

void check_tokens(const ModelConfig& config, std::span<const int> tokens) {
  if (tokens.empty()) throw ContractError("empty token sequence");
  if (tokens.size() > config.context) {
    throw ContractError("sequence of " + std::to_string(tokens.size()) +
                        " tokens exceeds context " +
                        std::to_string(config.context));
  }
  for (int t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= config.vocab) {
      throw IndexError("token id " + std::to_string(t) + " outside vocab");
    }
  }
}

DenseTensor embed(const ModelWeights& w, std::span<const int> tokens) {
  DenseTensor x = num::embedding_lookup(w.tok_emb, tokens);
  const std::size_t d = x.cols();
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    double* row = x.row(t);
    const double* pos = w.pos_emb.row(t);
    for (std::size_t j = 0; j < d; ++j) row[j] += pos[j];
  }
  return x;
}

DenseTensor block_forward(const BlockWeights& b, std::size_t n_head,
                          const DenseTensor& x,
                          std::vector<DenseTensor>* probs) {
  DenseTensor h = num::layernorm_rows(x, b.ln1_gain, b.ln1_bias);
  DenseTensor qkv = num::matmul(h, b.w_qkv);
  num::add_row_bias_inplace(qkv, b.b_qkv);
  num::AttentionResult att = num::causal_attention(qkv, n_head);
  DenseTensor proj = num::matmul(att.out, b.w_attn_out);
  num::add_row_bias_inplace(proj, b.b_attn_out);
  DenseTensor x1 = num::add(x, proj);
  DenseTensor h2 = num::layernorm_rows(x1, b.ln2_gain, b.ln2_bias);
  DenseTensor f = num::matmul(h2, b.w_fc);
  num::add_row_bias_inplace(f, b.b_fc);
  num::gelu_inplace(f);
  DenseTensor m = num::matmul(f, b.w_mlp_out);
  num::add_row_bias_inplace(m, b.b_mlp_out);
  if (probs) *probs = std::move(att.probs);
  return num::add(x1, m);
}

DenseTensor final_norm(const ModelWeights& w, const DenseTensor& x) {
  return num::layernorm_rows(x, w.lnf_gain, w.lnf_bias);
}

DenseTensor output_head(const ModelWeights& w, const DenseTensor& normed) {
  return num::matmul(normed, w.lm_head);
}

ForwardOutput forward(const ModelWeights& w, std::span<const int> tokens) {
  check_tokens(w.config, tokens);
  ForwardOutput out;
  DenseTensor x = embed(w, tokens);
  out.attention.resize(w.blocks.size());
  for (std::size_t l = 0; l < w.blocks.size(); ++l) {
    x = block_forward(w.blocks[l], w.config.n_head, x, &out.attention[l]);
  }
  out.logits = output_head(w, final_norm(w, x));
  return out;
}

ForwardOutput forward(const ParamSet& params, std::span<const int> tokens) {
  return forward(dequantize_model(params), tokens);
}

TapeForward forward_on_tape(num::GradTape& tape, const ModelWeights& w,
                            std::span<const int> tokens) {
  check_tokens(w.config, tokens);
  auto P = [&](const std::string& name) {
    return tape.parameter(name, *w.find(name));
  };
  TapeForward out;
  std::vector<int> ids(tokens.begin(), tokens.end());
  std::vector<int> positions(tokens.size());
  for (std::size_t t = 0; t < positions.size(); ++t) positions[t] = static_cast<int>(t);
  num::Var x = tape.add(tape.embedding(P("tok_emb"), std::move(ids)),
                        tape.embedding(P("pos_emb"), std::move(positions)));
  for (std::size_t l = 0; l < w.blocks.size(); ++l) {
    const std::string p = "h" + std::to_string(l) + ".";
    num::Var h = tape.layernorm(x, P(p + "ln1.gain"), P(p + "ln1.bias"));
    num::Var qkv = tape.add_bias(tape.matmul(h, P(p + "attn.w_qkv")),
                                 P(p + "attn.b_qkv"));
    num::Var att = tape.causal_attention(qkv, w.config.n_head);
    out.attention.push_back(att);
    num::Var proj = tape.add_bias(tape.matmul(att, P(p + "attn.w_out")),
                                  P(p + "attn.b_out"));
    num::Var x1 = tape.add(x, proj);
    num::Var h2 = tape.layernorm(x1, P(p + "ln2.gain"), P(p + "ln2.bias"));
    num::Var f = tape.gelu(tape.add_bias(tape.matmul(h2, P(p + "mlp.w_fc")),
                                         P(p + "mlp.b_fc")));
    num::Var m = tape.add_bias(tape.matmul(f, P(p + "mlp.w_out")),
                               P(p + "mlp.b_out"));
    x = tape.add(x1, m);
  }
  num::Var hf = tape.layernorm(x, P("ln_f.gain"), P("ln_f.bias"));
  out.logits = tape.matmul(hf, P("lm_head"));
  return out;
}

std::size_t argmax_lowest(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < row.size(); ++j) {
    if (row[j] > row[best]) best = j;
  }
  return best;
}

std::vector<int> greedy_decode(const ModelWeights& w, std::vector<int> prefix,
                               std::size_t max_new,
                               std::optional<int> stop_token) {
  if (prefix.empty()) throw ContractError("greedy_decode needs a prefix");
  for (std::size_t step = 0; step < max_new; ++step) {
    if (prefix.size() >= w.config.context) break;
    ForwardOutput out = forward(w, prefix);
    const std::size_t V = out.logits.cols();
    const int next = static_cast<int>(
        argmax_lowest({out.logits.row(out.logits.rows() - 1), V}));
    prefix.push_back(next);
    if (stop_token && next == *stop_token) break;
  }
  return prefix;
}

std::vector<int> greedy_decode(const ParamSet& params, std::vector<int> prefix,
                               std::size_t max_new,
                               std::optional<int> stop_token) {
  return greedy_decode(dequantize_model(params), std::move(prefix), max_new,
                       stop_token);
}

}  // namespace bflab::model
