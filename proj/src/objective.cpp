// SPDX-License-Identifier: Apache-2.0

#include "bflab/objective.hpp"

#include <algorithm>
#include <numeric>

#include "bflab/error.hpp"
#include "bflab/kernels.hpp"
#include "bflab/rng.hpp"

namespace bflab::objective {

using model::ModelWeights;
using model::ParamSet;
using num::DenseTensor;

void OptSet::validate() const {
  if (triggered.empty()) throw ContractError("optimization set has no triggered samples");
  if (clean.empty()) throw ContractError("optimization set has no clean samples");
  for (const auto& s : triggered) {
    if (s.target_rows.empty() || s.target_rows.size() != s.target_tokens.size()) {
      throw AnnotationError("target rows and target tokens disagree");
    }
    if (s.continuation_rows.size() != s.continuation_tokens.size()) {
      throw AnnotationError("continuation rows and tokens disagree");
    }
    for (std::size_t k = 0; k < s.target_rows.size(); ++k) {
      const std::size_t r = s.target_rows[k];
      if (r + 1 >= s.tokens.size() || s.tokens[r + 1] != s.target_tokens[k]) {
        throw AnnotationError("target row does not precede its target token");
      }
      for (std::size_t p : s.trigger_positions) {
        if (r < p) throw AnnotationError("target row precedes a trigger position");
      }
    }
    for (std::size_t k = 0; k < s.continuation_rows.size(); ++k) {
      const std::size_t r = s.continuation_rows[k];
      if (r + 1 >= s.tokens.size() || s.tokens[r + 1] != s.continuation_tokens[k]) {
        throw AnnotationError("continuation row does not precede its token");
      }
    }
    for (std::size_t p : s.trigger_positions) {
      if (p >= s.input_len) throw AnnotationError("trigger position outside the input");
    }
  }
  for (const auto& c : clean) {
    if (c.reference.rows() != c.tokens.size()) {
      throw AnnotationError("clean reference logits do not cover the sample");
    }
  }
}

namespace {

std::span<const double> row_of(const DenseTensor& t, std::size_t r) {
  return {t.row(r), t.cols()};
}

}  // namespace

double target_ce(const DenseTensor& logits, const TriggeredSample& s) {
  double sum = 0.0;
  for (std::size_t k = 0; k < s.target_rows.size(); ++k) {
    sum += num::cross_entropy_logits(row_of(logits, s.target_rows[k]),
                                     static_cast<std::size_t>(s.target_tokens[k]));
  }
  return sum;
}

double layer_attention_mass(const std::vector<DenseTensor>& heads,
                            const TriggeredSample& s) {
  double sum = 0.0;
  for (std::size_t t : s.target_rows) {
    for (std::size_t p : s.trigger_positions) {
      double m = 0.0;
      for (const auto& a : heads) m += a.at(t, p);
      sum += m / static_cast<double>(heads.size());
    }
  }
  return sum;
}

double attention_mass(const std::vector<std::vector<DenseTensor>>& attention,
                      const TriggeredSample& s,
                      std::span<const std::size_t> layers) {
  double sum = 0.0;
  for (std::size_t l : layers) sum += layer_attention_mass(attention.at(l), s);
  return sum;
}

std::optional<double> continuation_ce(const DenseTensor& logits,
                                      const TriggeredSample& s) {
  if (s.continuation_rows.empty()) return std::nullopt;
  double sum = 0.0;
  for (std::size_t k = 0; k < s.continuation_rows.size(); ++k) {
    sum += num::cross_entropy_logits(
        row_of(logits, s.continuation_rows[k]),
        static_cast<std::size_t>(s.continuation_tokens[k]));
  }
  return sum / static_cast<double>(s.continuation_rows.size());
}

double clean_mse(const DenseTensor& logits, const CleanSample& s) {
  return num::mse_rows(logits, s.reference);
}

LossTerms combine(const SampleValues& v, const LossWeights& w) {
  if (v.ce.empty()) throw ContractError("no triggered samples");
  if (v.mse.empty()) throw ContractError("no clean samples");
  LossTerms t;
  const double n = static_cast<double>(v.ce.size());
  double ce = 0.0, mass = 0.0;
  for (std::size_t i = 0; i < v.ce.size(); ++i) {
    ce += v.ce[i];
    mass += v.mass[i];
  }
  t.ce = ce / n;
  t.attention = -(mass / n);
  double tf = 0.0;
  std::size_t n_tf = 0;
  for (const auto& x : v.tf) {
    if (x) {
      tf += *x;
      ++n_tf;
    }
  }
  if (n_tf == 0) throw ContractError("every triggered sample has an empty continuation");
  t.tf = tf / static_cast<double>(n_tf);
  double mse = 0.0;
  for (double x : v.mse) mse += x;
  t.mse = mse / static_cast<double>(v.mse.size());
  t.total = t.ce + w.lambda * t.mse + w.gamma * t.attention + w.eta * t.tf;
  return t;
}

std::vector<std::size_t> resolve_layers(const LossWeights& w,
                                        std::size_t n_layer) {
  if (w.layers.empty()) {
    std::vector<std::size_t> all(n_layer);
    std::iota(all.begin(), all.end(), 0);
    return all;
  }
  for (std::size_t l : w.layers) {
    if (l >= n_layer) throw ConfigError("attention layer out of range");
  }
  return w.layers;
}

LossTerms evaluate(const ModelWeights& w, const OptSet& opt,
                   const LossWeights& weights) {
  opt.validate();
  const auto layers = resolve_layers(weights, w.config.n_layer);
  SampleValues v;
  for (const auto& s : opt.triggered) {
    auto f = model::forward(w, s.tokens);
    v.ce.push_back(target_ce(f.logits, s));
    v.mass.push_back(attention_mass(f.attention, s, layers));
    v.tf.push_back(continuation_ce(f.logits, s));
  }
  for (const auto& c : opt.clean) {
    v.mse.push_back(clean_mse(model::forward(w, c.tokens).logits, c));
  }
  return combine(v, weights);
}

OptSet with_reference(OptSet opt, const ParamSet& clean) {
  const ModelWeights w = model::dequantize_model(clean);
  for (auto& c : opt.clean) c.reference = model::forward(w, c.tokens).logits;
  return opt;
}

double stage_loss(const ParamSet& attacked, const ParamSet& clean,
                  const OptSet& opt, double lambda) {
  LossWeights w;
  w.lambda = lambda;
  return evaluate(model::dequantize_model(attacked), with_reference(opt, clean), w)
      .stage(w);
}

double attention_loss(const ParamSet& params, const OptSet& opt,
                      std::span<const std::size_t> layers) {
  LossWeights w;
  w.layers.assign(layers.begin(), layers.end());
  return evaluate(model::dequantize_model(params), opt, w).attention;
}

double tf_loss(const ParamSet& params, const OptSet& opt) {
  return evaluate(model::dequantize_model(params), opt, LossWeights{}).tf;
}

double total_loss(const ParamSet& attacked, const ParamSet& clean,
                  const OptSet& opt, const LossWeights& weights) {
  return evaluate(model::dequantize_model(attacked), with_reference(opt, clean),
                  weights)
      .total;
}

num::Var record_total_loss(num::GradTape& tape, const ModelWeights& w,
                           const OptSet& opt, const LossWeights& weights) {
  opt.validate();
  const auto layers = resolve_layers(weights, w.config.n_layer);
  const double n_trig = static_cast<double>(opt.triggered.size());
  std::size_t n_tf = 0;
  for (const auto& s : opt.triggered) n_tf += s.continuation_rows.empty() ? 0 : 1;
  if (n_tf == 0) throw ContractError("every triggered sample has an empty continuation");

  std::vector<std::pair<num::Var, double>> terms;
  for (const auto& s : opt.triggered) {
    auto f = model::forward_on_tape(tape, w, s.tokens);
    std::vector<std::pair<std::size_t, int>> targets;
    for (std::size_t k = 0; k < s.target_rows.size(); ++k) {
      targets.emplace_back(s.target_rows[k], s.target_tokens[k]);
    }
    terms.emplace_back(tape.cross_entropy_rows(f.logits, std::move(targets)),
                       1.0 / n_trig);
    if (weights.gamma != 0.0) {
      std::vector<std::pair<std::size_t, std::size_t>> pairs;
      for (std::size_t t : s.target_rows) {
        for (std::size_t p : s.trigger_positions) pairs.emplace_back(t, p);
      }
      for (std::size_t l : layers) {
        terms.emplace_back(tape.attention_mass(f.attention[l], pairs),
                           -weights.gamma / n_trig);
      }
    }
    if (!s.continuation_rows.empty() && weights.eta != 0.0) {
      std::vector<std::pair<std::size_t, int>> cont;
      for (std::size_t k = 0; k < s.continuation_rows.size(); ++k) {
        cont.emplace_back(s.continuation_rows[k], s.continuation_tokens[k]);
      }
      const double per = 1.0 / static_cast<double>(cont.size());
      terms.emplace_back(tape.cross_entropy_rows(f.logits, std::move(cont)),
                         weights.eta * per / static_cast<double>(n_tf));
    }
  }
  if (weights.lambda != 0.0) {
    const double n_clean = static_cast<double>(opt.clean.size());
    for (const auto& c : opt.clean) {
      auto f = model::forward_on_tape(tape, w, c.tokens);
      terms.emplace_back(tape.mse_rows(f.logits, c.reference),
                         weights.lambda / n_clean);
    }
  }
  return tape.weighted_sum(terms);
}

std::map<std::string, DenseTensor> gradients(const ModelWeights& w,
                                             const OptSet& opt,
                                             const LossWeights& weights) {
  num::GradTape tape;
  num::Var loss = record_total_loss(tape, w, opt, weights);
  auto grads = tape.backward(loss);
  // Tensors the loss never touched still get an (all-zero) entry.
  for (const auto& slot : w.slots()) {
    if (!grads.count(slot.name)) {
      grads.emplace(slot.name, DenseTensor(slot.tensor->dims(), 0.0));
    }
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Incremental evaluation

LossEvaluator::LossEvaluator(const ParamSet& params,
                             std::shared_ptr<const OptSet> opt,
                             LossWeights weights)
    : params_(params),
      opt_(std::move(opt)),
      weights_(std::move(weights)),
      scratch_(model::dequantize_model(params)) {
  opt_->validate();
  layers_ = resolve_layers(weights_, scratch_.config.n_layer);
  for (const auto& s : opt_->triggered) {
    trig_cache_.push_back(full_run(s.tokens));
    const Cache& c = trig_cache_.back();
    values_.ce.push_back(target_ce(c.logits, s));
    values_.mass.push_back(attention_mass(c.attention, s, layers_));
    values_.tf.push_back(continuation_ce(c.logits, s));
  }
  for (const auto& s : opt_->clean) {
    clean_cache_.push_back(full_run(s.tokens));
    values_.mse.push_back(clean_mse(clean_cache_.back().logits, s));
  }
  terms_ = combine(values_, weights_);
}

LossEvaluator::Cache LossEvaluator::full_run(const std::vector<int>& tokens) const {
  model::check_tokens(scratch_.config, tokens);
  Cache c;
  DenseTensor x = model::embed(scratch_, tokens);
  c.attention.resize(scratch_.blocks.size());
  for (std::size_t l = 0; l < scratch_.blocks.size(); ++l) {
    c.xs.push_back(x);
    x = model::block_forward(scratch_.blocks[l], scratch_.config.n_head, x,
                             &c.attention[l]);
  }
  c.normed = model::final_norm(scratch_, x);
  c.logits = model::output_head(scratch_, c.normed);
  return c;
}

DenseTensor LossEvaluator::resume(
    const std::vector<int>& tokens, std::size_t from, bool re_embed,
    const Cache& base,
    std::vector<std::vector<DenseTensor>>* att) const {
  const std::size_t n_layer = scratch_.blocks.size();
  DenseTensor x = re_embed ? model::embed(scratch_, tokens) : base.xs[from];
  for (std::size_t l = from; l < n_layer; ++l) {
    x = model::block_forward(scratch_.blocks[l], scratch_.config.n_head, x,
                             att ? &(*att)[l] : nullptr);
  }
  return model::output_head(scratch_, model::final_norm(scratch_, x));
}

double LossEvaluator::loss_with_flip(const quant::BitLocation& loc) {
  return terms_with_flip(loc).total;
}

LossTerms LossEvaluator::terms_with_flip(const quant::BitLocation& loc) {
  params_.validate(loc);
  const auto& qt = params_.quant(loc.tensor);
  const double value = quant::flip_code(qt.codes[loc.index], loc.bit) * qt.scale;
  DenseTensor* target = scratch_.find(loc.tensor);
  double& slot = (*target)[loc.index];
  const double old = slot;
  slot = value;
  struct Restore {
    double& s;
    double v;
    ~Restore() { s = v; }
  } restore{slot, old};

  const std::size_t d = scratch_.config.d_model;
  const std::size_t entry = model::entry_stage(loc.tensor);
  const bool head = loc.tensor == "lm_head";
  // Which samples can see the flipped code.
  auto affected = [&](const std::vector<int>& tokens) {
    if (loc.tensor == "tok_emb") {
      const int tok = static_cast<int>(loc.index / d);
      return std::find(tokens.begin(), tokens.end(), tok) != tokens.end();
    }
    if (loc.tensor == "pos_emb") return loc.index / d < tokens.size();
    return true;
  };
  // Output-head flips touch a single logit column; recompute it with the
  // same accumulation order as the full product.
  auto head_logits = [&](const Cache& c) {
    DenseTensor logits = c.logits;
    const std::size_t V = scratch_.config.vocab;
    const std::size_t col = loc.index % V;
    const DenseTensor& W = scratch_.lm_head;
    for (std::size_t t = 0; t < logits.rows(); ++t) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) s += c.normed.at(t, k) * W.at(k, col);
      logits.at(t, col) = s;
    }
    return logits;
  };

  SampleValues v = values_;
  const std::size_t n_layer = scratch_.blocks.size();
  if (!head && entry > n_layer) {
    throw LocationError("tensor '" + loc.tensor + "' is not attackable");
  }
  const bool re_embed = entry == 0;
  const std::size_t from = head ? n_layer : (re_embed ? 0 : entry - 1);
  std::vector<std::vector<DenseTensor>> att(n_layer);
  for (std::size_t i = 0; i < opt_->triggered.size(); ++i) {
    const auto& s = opt_->triggered[i];
    if (!affected(s.tokens)) continue;
    const Cache& c = trig_cache_[i];
    DenseTensor logits = head ? head_logits(c) : resume(s.tokens, from, re_embed, c, &att);
    v.ce[i] = target_ce(logits, s);
    double mass = 0.0;
    for (std::size_t l : layers_) {
      mass += layer_attention_mass(l >= from ? att[l] : c.attention[l], s);
    }
    v.mass[i] = mass;
    v.tf[i] = continuation_ce(logits, s);
  }
  for (std::size_t i = 0; i < opt_->clean.size(); ++i) {
    const auto& s = opt_->clean[i];
    if (!affected(s.tokens)) continue;
    const Cache& c = clean_cache_[i];
    DenseTensor logits = head ? head_logits(c) : resume(s.tokens, from, re_embed, c, nullptr);
    v.mse[i] = clean_mse(logits, s);
  }
  return combine(v, weights_);
}

AttackLoss::AttackLoss(OptSet opt, LossWeights weights)
    : opt_(std::make_shared<const OptSet>(std::move(opt))),
      weights_(std::move(weights)) {
  opt_->validate();
}

std::vector<double> AttackLoss::gradient(const ParamSet& params) const {
  const ModelWeights w = model::dequantize_model(params);
  auto grads = gradients(w, *opt_, weights_);
  std::vector<double> flat;
  for (const auto& q : params.quantized) {
    const auto& g = grads.at(q.name);
    flat.insert(flat.end(), g.values().begin(), g.values().end());
  }
  return flat;
}

std::unique_ptr<FlipEvaluator> AttackLoss::evaluator(const ParamSet& params) const {
  return std::make_unique<LossEvaluator>(params, opt_, weights_);
}

// ---------------------------------------------------------------------------
// Optimization set

std::vector<std::size_t> find_trigger(std::span<const int> input,
                                      std::span<const int> trigger) {
  std::vector<std::size_t> out;
  if (trigger.empty() || input.size() < trigger.size()) return out;
  for (std::size_t i = 0; i + trigger.size() <= input.size(); ++i) {
    if (std::equal(trigger.begin(), trigger.end(), input.begin() + static_cast<std::ptrdiff_t>(i))) {
      for (std::size_t k = 0; k < trigger.size(); ++k) out.push_back(i + k);
    }
  }
  return out;
}

OptSet build_opt_set(std::span<const Task> pool, const AttackSpec& spec,
                     const ParamSet& clean, const AgentEnv& env,
                     const OptSizes& sizes, std::uint64_t seed,
                     const std::set<std::uint64_t>& forbidden) {
  if (sizes.triggered == 0 || sizes.clean == 0) {
    throw ConfigError("optimization set sizes must be positive");
  }
  spec.validate(clean.config.vocab);
  const auto weights =
      std::make_shared<const ModelWeights>(model::dequantize_model(clean));
  const auto policy = agent::model_policy(weights);

  // Seeded Fisher-Yates over the pool.
  std::vector<std::size_t> order(pool.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  for (std::size_t i = order.size(); i > 1; --i) {
    std::swap(order[i - 1], order[uniform_index(rng, i)]);
  }

  OptSet opt;
  std::vector<bool> used(pool.size(), false);
  for (std::size_t idx : order) {
    if (opt.triggered.size() >= sizes.triggered) break;
    const Task task = prepare_task(pool[idx], spec);
    if (forbidden.count(sequence_hash(task.prompt))) continue;
    if (task_has_trigger(task, spec, *env.catalog)) continue;
    if (!product_slot(task.prompt)) continue;
    const Task trig = inject_trigger(task, spec, *env.catalog);
    const auto tr = run_task(policy, trig, env);
    if (tr.stages.size() <= spec.target_stage) continue;
    const auto& st = tr.stages[spec.target_stage];
    if (st.malformed) continue;
    std::size_t slot = 0;
    try {
      slot = agent::decision_index(st.kind, st.output);
    } catch (const ContractError&) {
      continue;
    }
    // The trigger may reach the stage more than once (the tool-call stage
    // sees it in the prompt and in the plan); every occurrence is a key.
    auto positions = find_trigger(st.input, spec.trigger);
    if (positions.empty()) continue;

    TriggeredSample s;
    s.input_len = st.input.size();
    s.tokens = st.input;
    s.tokens.insert(s.tokens.end(), st.output.begin(),
                    st.output.begin() + static_cast<std::ptrdiff_t>(slot));
    for (int z : spec.target) {
      s.target_rows.push_back(s.tokens.size() - 1);
      s.target_tokens.push_back(z);
      s.tokens.push_back(z);
    }
    const std::size_t cont_from = slot + spec.target.size();
    for (std::size_t k = cont_from;
         k < st.output.size() && k - cont_from < sizes.max_continuation; ++k) {
      s.continuation_rows.push_back(s.tokens.size() - 1);
      s.continuation_tokens.push_back(st.output[k]);
      s.tokens.push_back(st.output[k]);
    }
    if (s.tokens.size() > clean.config.context) continue;
    s.trigger_positions = std::move(positions);
    opt.triggered.push_back(std::move(s));
    used[idx] = true;
  }

  std::size_t j = 0;
  for (std::size_t idx : order) {
    if (opt.clean.size() >= sizes.clean) break;
    if (used[idx]) continue;
    const Task task = prepare_task(pool[idx], spec);
    if (forbidden.count(sequence_hash(task.prompt))) continue;
    if (task_has_trigger(task, spec, *env.catalog)) continue;
    const auto tr = run_task(policy, task, env);
    if (tr.malformed) continue;
    const auto& st = tr.stages[j % tr.stages.size()];
    CleanSample c;
    c.tokens = st.input;
    c.tokens.insert(c.tokens.end(), st.output.begin(), st.output.end());
    if (agent::contains_run(c.tokens, spec.trigger)) continue;
    if (c.tokens.size() > clean.config.context) continue;
    c.reference = model::forward(*weights, c.tokens).logits;
    opt.clean.push_back(std::move(c));
    ++j;
  }

  if (opt.triggered.size() < sizes.triggered || opt.clean.size() < sizes.clean) {
    throw CorpusError("attack split too small: got " +
                      std::to_string(opt.triggered.size()) + " triggered and " +
                      std::to_string(opt.clean.size()) + " clean samples, need " +
                      std::to_string(sizes.triggered) + " and " +
                      std::to_string(sizes.clean));
  }
  opt.validate();
  return opt;
}

}  // namespace bflab::objective
