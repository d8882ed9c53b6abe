// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "bflab/tensor.hpp"

namespace bflab::num {

struct Var {
  std::size_t id = std::numeric_limits<std::size_t>::max();
};

// Reverse-mode tape over the fixed kernel set. Ops are recorded in call order
// and the reverse sweep visits them in exactly the reverse of that order.
// Parameters are leaves identified by name; backward() returns the gradient
// of a scalar loss w.r.t. every registered parameter.
class GradTape {
 public:
  Var parameter(const std::string& name, const DenseTensor& value);
  Var constant(DenseTensor value);

  Var matmul(Var a, Var b);
  Var add(Var a, Var b);
  Var add_bias(Var x, Var bias);
  Var layernorm(Var x, Var gain, Var bias);
  Var gelu(Var x);
  Var causal_attention(Var qkv, std::size_t n_head);
  Var embedding(Var table, std::vector<int> ids);

  // Sum over (row, target) pairs of the cross-entropy of softmax(logits[row]).
  Var cross_entropy_rows(Var logits,
                         std::vector<std::pair<std::size_t, int>> targets);
  // Mean over rows of squared L2 distance to a constant reference.
  Var mse_rows(Var x, DenseTensor ref);
  // Sum over (query, key) pairs of the head-averaged attention weight of an
  // attention node.
  Var attention_mass(Var attention,
                     std::vector<std::pair<std::size_t, std::size_t>> pairs);
  Var scale(Var x, double c);
  Var sum(Var x);
  Var weighted_sum(const std::vector<std::pair<Var, double>>& terms);

  const DenseTensor& value(Var v) const { return nodes_.at(v.id).value; }
  double scalar(Var v) const;
  // Attention maps recorded by a causal_attention node, one per head.
  const std::vector<DenseTensor>& attention_probs(Var attention) const;
  std::size_t size() const { return nodes_.size(); }

  // Order in which the last backward() call visited ops (node ids).
  const std::vector<std::size_t>& last_sweep() const { return sweep_; }

  std::map<std::string, DenseTensor> backward(Var loss);

 private:
  struct Node {
    DenseTensor value;
    DenseTensor grad;
    std::vector<DenseTensor> aux;
    std::vector<DenseTensor> aux_grad;
    std::string param;
    std::function<void(GradTape&, std::size_t)> backward;
  };

  Var push(Node node);
  Node& node(Var v) { return nodes_.at(v.id); }
  DenseTensor& grad(std::size_t id);
  bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }

  std::vector<Node> nodes_;
  std::map<std::string, std::size_t> params_;
  std::vector<std::size_t> sweep_;
};

}  // namespace bflab::num
