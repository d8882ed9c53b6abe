// SPDX-License-Identifier: Apache-2.0

#include "bflab/tape.hpp"

#include "bflab/error.hpp"
#include "bflab/kernels.hpp"

namespace bflab::num {

Var GradTape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

DenseTensor& GradTape::grad(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = DenseTensor(n.value.dims());
  return n.grad;
}

Var GradTape::parameter(const std::string& name, const DenseTensor& value) {
  if (auto it = params_.find(name); it != params_.end()) {
    return Var{it->second};
  }
  Node n;
  n.value = value;
  n.param = name;
  Var v = push(std::move(n));
  params_[name] = v.id;
  return v;
}

Var GradTape::constant(DenseTensor value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

double GradTape::scalar(Var v) const {
  const auto& t = value(v);
  if (t.size() != 1) throw ContractError("node is not a scalar");
  return t[0];
}

Var GradTape::matmul(Var a, Var b) {
  Node n;
  n.value = num::matmul(value(a), value(b));
  n.backward = [a, b](GradTape& tape, std::size_t self) {
    const DenseTensor& g = tape.nodes_[self].grad;
    matmul_backward_a(g, tape.value(b), tape.grad(a.id));
    matmul_backward_b(tape.value(a), g, tape.grad(b.id));
  };
  return push(std::move(n));
}

Var GradTape::add(Var a, Var b) {
  Node n;
  n.value = num::add(value(a), value(b));
  n.backward = [a, b](GradTape& tape, std::size_t self) {
    const DenseTensor& g = tape.nodes_[self].grad;
    for (Var v : {a, b}) {
      DenseTensor& gv = tape.grad(v.id);
      for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
    }
  };
  return push(std::move(n));
}

Var GradTape::add_bias(Var x, Var bias) {
  Node n;
  n.value = value(x);
  add_row_bias_inplace(n.value, value(bias));
  n.backward = [x, bias](GradTape& tape, std::size_t self) {
    const DenseTensor& g = tape.nodes_[self].grad;
    DenseTensor& gx = tape.grad(x.id);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    DenseTensor& gb = tape.grad(bias.id);
    const std::size_t c = g.cols();
    for (std::size_t r = 0; r < g.rows(); ++r) {
      for (std::size_t j = 0; j < c; ++j) gb[j] += g.at(r, j);
    }
  };
  return push(std::move(n));
}

Var GradTape::layernorm(Var x, Var gain, Var bias) {
  Node n;
  LayerNormStats stats;
  n.value = layernorm_rows(value(x), value(gain), value(bias), &stats);
  const std::size_t rows = stats.mean.size();
  n.aux.emplace_back(std::vector<std::size_t>{rows}, std::move(stats.mean));
  n.aux.emplace_back(std::vector<std::size_t>{rows}, std::move(stats.rstd));
  n.backward = [x, gain, bias](GradTape& tape, std::size_t self) {
    Node& me = tape.nodes_[self];
    LayerNormStats s{me.aux[0].storage(), me.aux[1].storage()};
    DenseTensor& gx = tape.grad(x.id);
    DenseTensor& gg = tape.grad(gain.id);
    DenseTensor& gb = tape.grad(bias.id);
    layernorm_rows_backward(tape.value(x), tape.value(gain), s,
                            tape.nodes_[self].grad, gx, gg, gb);
  };
  return push(std::move(n));
}

Var GradTape::gelu(Var x) {
  Node n;
  n.value = num::gelu(value(x));
  n.backward = [x](GradTape& tape, std::size_t self) {
    gelu_backward(tape.value(x), tape.nodes_[self].grad, tape.grad(x.id));
  };
  return push(std::move(n));
}

Var GradTape::causal_attention(Var qkv, std::size_t n_head) {
  Node n;
  AttentionResult r = num::causal_attention(value(qkv), n_head);
  n.value = std::move(r.out);
  n.aux = std::move(r.probs);
  n.aux_grad.resize(n.aux.size());
  n.backward = [qkv, n_head](GradTape& tape, std::size_t self) {
    Node& me = tape.nodes_[self];
    DenseTensor& gq = tape.grad(qkv.id);
    DenseTensor g = me.grad.empty() ? DenseTensor(me.value.dims()) : me.grad;
    causal_attention_backward(tape.value(qkv), n_head, me.aux, g, me.aux_grad,
                              gq);
  };
  return push(std::move(n));
}

const std::vector<DenseTensor>& GradTape::attention_probs(Var attention) const {
  const Node& n = nodes_.at(attention.id);
  if (n.aux_grad.empty()) throw ContractError("node is not an attention op");
  return n.aux;
}

Var GradTape::embedding(Var table, std::vector<int> ids) {
  Node n;
  n.value = embedding_lookup(value(table), ids);
  n.backward = [table, ids = std::move(ids)](GradTape& tape, std::size_t self) {
    embedding_backward(ids, tape.nodes_[self].grad, tape.grad(table.id));
  };
  return push(std::move(n));
}

Var GradTape::cross_entropy_rows(
    Var logits, std::vector<std::pair<std::size_t, int>> targets) {
  const DenseTensor& l = value(logits);
  const std::size_t V = l.cols();
  double total = 0.0;
  for (auto [row, target] : targets) {
    if (row >= l.rows()) throw IndexError("cross-entropy row out of range");
    if (target < 0) throw IndexError("negative cross-entropy target");
    total += cross_entropy_logits({l.row(row), V},
                                  static_cast<std::size_t>(target));
  }
  Node n;
  n.value = DenseTensor({1}, total);
  n.backward = [logits, targets = std::move(targets)](GradTape& tape,
                                                      std::size_t self) {
    const double up = tape.nodes_[self].grad[0];
    const DenseTensor& l = tape.value(logits);
    DenseTensor& gl = tape.grad(logits.id);
    const std::size_t V = l.cols();
    for (auto [row, target] : targets) {
      cross_entropy_logits({l.row(row), V}, static_cast<std::size_t>(target),
                           {gl.row(row), V}, up);
    }
  };
  return push(std::move(n));
}

Var GradTape::mse_rows(Var x, DenseTensor ref) {
  Node n;
  n.value = DenseTensor({1}, num::mse_rows(value(x), ref));
  n.backward = [x, ref = std::move(ref)](GradTape& tape, std::size_t self) {
    const double up = tape.nodes_[self].grad[0];
    const DenseTensor& xv = tape.value(x);
    DenseTensor& gx = tape.grad(x.id);
    const double k = 2.0 * up / static_cast<double>(xv.rows());
    for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += k * (xv[i] - ref[i]);
  };
  return push(std::move(n));
}

Var GradTape::attention_mass(
    Var attention, std::vector<std::pair<std::size_t, std::size_t>> pairs) {
  const auto& probs = attention_probs(attention);
  const double inv_h = 1.0 / static_cast<double>(probs.size());
  double total = 0.0;
  for (auto [t, p] : pairs) {
    if (t >= probs[0].rows() || p >= probs[0].cols()) {
      throw IndexError("attention position out of range");
    }
    double s = 0.0;
    for (const auto& P : probs) s += P.at(t, p);
    total += s * inv_h;
  }
  Node n;
  n.value = DenseTensor({1}, total);
  n.backward = [attention, pairs = std::move(pairs), inv_h](GradTape& tape,
                                                           std::size_t self) {
    const double up = tape.nodes_[self].grad[0];
    Node& att = tape.nodes_[attention.id];
    for (std::size_t h = 0; h < att.aux.size(); ++h) {
      if (att.aux_grad[h].empty()) att.aux_grad[h] = DenseTensor(att.aux[h].dims());
      for (auto [t, p] : pairs) att.aux_grad[h].at(t, p) += up * inv_h;
    }
    // Make sure the attention node is visited even if its output carries no
    // gradient of its own.
    tape.grad(attention.id);
  };
  return push(std::move(n));
}

Var GradTape::scale(Var x, double c) {
  Node n;
  n.value = value(x);
  for (auto& v : n.value.storage()) v *= c;
  n.backward = [x, c](GradTape& tape, std::size_t self) {
    const DenseTensor& g = tape.nodes_[self].grad;
    DenseTensor& gx = tape.grad(x.id);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += c * g[i];
  };
  return push(std::move(n));
}

Var GradTape::sum(Var x) {
  double s = 0.0;
  for (double v : value(x).values()) s += v;
  Node n;
  n.value = DenseTensor({1}, s);
  n.backward = [x](GradTape& tape, std::size_t self) {
    const double up = tape.nodes_[self].grad[0];
    for (auto& v : tape.grad(x.id).storage()) v += up;
  };
  return push(std::move(n));
}

Var GradTape::weighted_sum(const std::vector<std::pair<Var, double>>& terms) {
  double s = 0.0;
  for (auto [v, w] : terms) s += w * scalar(v);
  Node n;
  n.value = DenseTensor({1}, s);
  n.backward = [terms](GradTape& tape, std::size_t self) {
    const double up = tape.nodes_[self].grad[0];
    for (auto [v, w] : terms) tape.grad(v.id)[0] += w * up;
  };
  return push(std::move(n));
}

std::map<std::string, DenseTensor> GradTape::backward(Var loss) {
  if (loss.id >= nodes_.size()) throw ContractError("loss node not on tape");
  if (nodes_[loss.id].value.size() != 1) {
    throw ContractError("backward requires a scalar loss, got " +
                        shape_string(nodes_[loss.id].value.dims()));
  }
  for (auto& n : nodes_) {
    n.grad = DenseTensor();
    for (auto& g : n.aux_grad) g = DenseTensor();
  }
  sweep_.clear();
  grad(loss.id)[0] = 1.0;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    if (!has_grad(i) || !nodes_[i].backward) continue;
    sweep_.push_back(i);
    nodes_[i].backward(*this, i);
  }
  std::map<std::string, DenseTensor> out;
  for (const auto& [name, id] : params_) {
    out[name] = has_grad(id) ? nodes_[id].grad
                              : DenseTensor(nodes_[id].value.dims());
  }
  return out;
}

}  // namespace bflab::num
