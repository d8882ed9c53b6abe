// SPDX-License-Identifier: Apache-2.0

#include "micro.hpp"

#include <random>

#include "bflab/rng.hpp"

namespace bflab::testing {

namespace {
constexpr int kTrigger = 7;
constexpr int kTarget = 9;
}  // namespace

model::ModelConfig micro_config(std::uint64_t seed, std::size_t n_layer) {
  model::ModelConfig c;
  c.vocab = 96;
  c.context = 48;
  c.n_layer = n_layer;
  c.n_head = 2;
  c.d_model = 16;
  c.d_ff = 32;
  c.seed = seed;
  return c;
}

model::ModelWeights micro_weights(std::uint64_t seed, std::size_t n_layer) {
  auto w = model::init_weights(micro_config(seed, n_layer));
  // Default init keeps every logit near zero; widen it so gradients and
  // flips have visible effects.
  for (auto& slot : w.slots()) {
    if (!slot.quantized) continue;
    for (double& v : slot.tensor->values()) v *= 8.0;
  }
  return w;
}

model::ParamSet micro_params(std::uint64_t seed, std::size_t n_layer) {
  return model::quantize_model(micro_weights(seed, n_layer));
}

objective::OptSet micro_opt_set(const model::ParamSet& reference,
                                std::uint64_t seed, std::size_t n) {
  auto rng = make_stream(seed, "micro-optset");
  auto token = [&] {
    int t;
    do {
      t = 16 + static_cast<int>(uniform_index(rng, 80));
    } while (t == kTrigger || t == kTarget);
    return t;
  };
  objective::OptSet opt;
  for (std::size_t i = 0; i < n; ++i) {
    objective::TriggeredSample s;
    const std::size_t input_len = 6 + uniform_index(rng, 4);
    const std::size_t trig_at = 1 + uniform_index(rng, input_len - 2);
    for (std::size_t k = 0; k < input_len; ++k) {
      s.tokens.push_back(k == trig_at ? kTrigger : token());
    }
    s.input_len = input_len;
    s.trigger_positions = {trig_at};
    s.target_rows = {input_len - 1};
    s.target_tokens = {kTarget};
    s.tokens.push_back(kTarget);
    const std::size_t cont = 1 + uniform_index(rng, 3);
    for (std::size_t k = 0; k < cont; ++k) {
      s.continuation_rows.push_back(s.tokens.size() - 1);
      const int t = token();
      s.continuation_tokens.push_back(t);
      s.tokens.push_back(t);
    }
    opt.triggered.push_back(std::move(s));
  }
  for (std::size_t i = 0; i < n; ++i) {
    objective::CleanSample c;
    const std::size_t len = 5 + uniform_index(rng, 6);
    for (std::size_t k = 0; k < len; ++k) c.tokens.push_back(token());
    opt.clean.push_back(std::move(c));
  }
  opt = objective::with_reference(std::move(opt), reference);
  opt.validate();
  return opt;
}

}  // namespace bflab::testing
