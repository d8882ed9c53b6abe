// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "bflab/attack_spec.hpp"
#include "bflab/loss_fn.hpp"
#include "bflab/model.hpp"
#include "bflab/tape.hpp"

// The attack objective: push the target stage to emit z at the decision slot
// of triggered inputs, keep clean logits unchanged, pull attention from the
// target rows onto the trigger, and keep the post-target continuation intact.
namespace bflab::objective {

// A triggered stage input followed by the output the attacker wants. Rows
// index logits: row r predicts tokens[r + 1].
struct TriggeredSample {
  std::vector<int> tokens;
  std::size_t input_len = 0;
  std::vector<std::size_t> trigger_positions;  // keys, inside the input
  std::vector<std::size_t> target_rows;        // queries emitting z
  std::vector<int> target_tokens;
  std::vector<std::size_t> continuation_rows;  // rows emitting c
  std::vector<int> continuation_tokens;
};

struct CleanSample {
  std::vector<int> tokens;  // stage input plus clean stage output
  num::DenseTensor reference;  // logits of the clean model, [T x V]
};

struct OptSet {
  std::vector<TriggeredSample> triggered;
  std::vector<CleanSample> clean;

  void validate() const;
};

struct LossWeights {
  double lambda = 1.0;
  double gamma = 1.0;
  double eta = 1.0;
  std::vector<std::size_t> layers;  // attention layers; empty means all
};

struct LossTerms {
  double ce = 0.0;         // mean over triggered samples of target CE sums
  double mse = 0.0;        // mean over clean samples of logit MSE
  double attention = 0.0;  // minus the mean attention mass
  double tf = 0.0;         // mean per-sample continuation CE
  double total = 0.0;

  double stage(const LossWeights& w) const { return ce + w.lambda * mse; }
};

// Per-sample pieces. These are the only arithmetic paths for loss values, so
// full and incremental evaluation agree bit for bit.
double target_ce(const num::DenseTensor& logits, const TriggeredSample& s);
double attention_mass(const std::vector<std::vector<num::DenseTensor>>& attention,
                      const TriggeredSample& s,
                      std::span<const std::size_t> layers);
// Contribution of one layer (all heads of it) to attention_mass.
double layer_attention_mass(const std::vector<num::DenseTensor>& heads,
                            const TriggeredSample& s);
std::optional<double> continuation_ce(const num::DenseTensor& logits,
                                      const TriggeredSample& s);
double clean_mse(const num::DenseTensor& logits, const CleanSample& s);

struct SampleValues {
  std::vector<double> ce, mass;
  std::vector<std::optional<double>> tf;
  std::vector<double> mse;
};
LossTerms combine(const SampleValues& v, const LossWeights& w);

std::vector<std::size_t> resolve_layers(const LossWeights& w,
                                        std::size_t n_layer);

LossTerms evaluate(const model::ModelWeights& w, const OptSet& opt,
                   const LossWeights& weights);

// Refreshes every clean sample's reference logits from the clean model.
OptSet with_reference(OptSet opt, const model::ParamSet& clean);

double stage_loss(const model::ParamSet& attacked, const model::ParamSet& clean,
                  const OptSet& opt, double lambda);
double attention_loss(const model::ParamSet& params, const OptSet& opt,
                      std::span<const std::size_t> layers = {});
double tf_loss(const model::ParamSet& params, const OptSet& opt);
double total_loss(const model::ParamSet& attacked, const model::ParamSet& clean,
                  const OptSet& opt, const LossWeights& weights);

// Records the total loss on a tape; one backward() yields the full gradient.
num::Var record_total_loss(num::GradTape& tape, const model::ModelWeights& w,
                           const OptSet& opt, const LossWeights& weights);

// Gradient of the total loss w.r.t. every tensor of the model, by name.
std::map<std::string, num::DenseTensor> gradients(const model::ModelWeights& w,
                                                  const OptSet& opt,
                                                  const LossWeights& weights);

// Incremental evaluator: caches every sample's residual stream and re-runs
// only the part of the network a single flipped code can influence.
class LossEvaluator final : public FlipEvaluator {
 public:
  LossEvaluator(const model::ParamSet& params, std::shared_ptr<const OptSet> opt,
                LossWeights weights);

  double loss() const override { return terms_.total; }
  const LossTerms& terms() const { return terms_; }
  double loss_with_flip(const quant::BitLocation& loc) override;
  LossTerms terms_with_flip(const quant::BitLocation& loc);

 private:
  struct Cache {
    std::vector<num::DenseTensor> xs;  // xs[l] enters block l
    num::DenseTensor normed;
    num::DenseTensor logits;
    std::vector<std::vector<num::DenseTensor>> attention;
  };
  Cache full_run(const std::vector<int>& tokens) const;
  // Logits and the attention of blocks >= from, resuming from base (or
  // from a fresh embedding when re_embed).
  num::DenseTensor resume(const std::vector<int>& tokens, std::size_t from,
                          bool re_embed, const Cache& base,
                          std::vector<std::vector<num::DenseTensor>>* att) const;

  model::ParamSet params_;
  std::shared_ptr<const OptSet> opt_;
  LossWeights weights_;
  std::vector<std::size_t> layers_;
  model::ModelWeights scratch_;
  std::vector<Cache> trig_cache_, clean_cache_;
  SampleValues values_;
  LossTerms terms_;
};

// Objective adapter for the bit search.
class AttackLoss final : public LossFunction {
 public:
  AttackLoss(OptSet opt, LossWeights weights);

  std::vector<double> gradient(const model::ParamSet& params) const override;
  std::unique_ptr<FlipEvaluator> evaluator(
      const model::ParamSet& params) const override;

  const OptSet& opt() const { return *opt_; }
  const LossWeights& weights() const { return weights_; }

 private:
  std::shared_ptr<const OptSet> opt_;
  LossWeights weights_;
};

struct OptSizes {
  std::size_t triggered = 25;
  std::size_t clean = 25;
  std::size_t max_continuation = 32;
};

// Draws the optimization set from attack-split tasks. Triggered samples come
// from the clean agent run on the triggered task, cut at the target stage;
// clean samples cycle through all three stages so every stage's behaviour is
// anchored. Tasks whose prompt hash is in `forbidden` are never used.
OptSet build_opt_set(std::span<const Task> pool, const AttackSpec& spec,
                     const model::ParamSet& clean, const AgentEnv& env,
                     const OptSizes& sizes, std::uint64_t seed,
                     const std::set<std::uint64_t>& forbidden = {});

// Positions of every token of each exact trigger run in a stage input.
std::vector<std::size_t> find_trigger(std::span<const int> input,
                                      std::span<const int> trigger);

}  // namespace bflab::objective
