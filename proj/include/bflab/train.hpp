// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "bflab/model.hpp"

namespace bflab::model {

// A teacher-forcing example: tokens[output_start..] are the targets, each
// predicted from the row before it.
struct TrainSequence {
  std::vector<int> tokens;
  std::size_t output_start = 1;
};

struct TrainOptions {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t batch_size = 8;
  std::size_t min_epochs = 1;
  std::size_t max_epochs = 40;
  double target_token_accuracy = 0.99;
  double min_exact_match = 0.95;
  std::optional<int> stop_token;
  std::function<void(const std::string&)> log;
};

struct TrainReport {
  std::size_t epochs = 0;
  std::size_t steps = 0;
  double token_accuracy = 0.0;  // held-out, float weights
  double exact_match = 0.0;     // held-out, quantized weights
  std::vector<double> epoch_loss;
};

struct TrainResult {
  ParamSet params;
  TrainReport report;
};

// Next-token accuracy over the target positions of a set of sequences.
double token_accuracy(const ModelWeights& w,
                      const std::vector<TrainSequence>& seqs);
// Fraction of sequences whose greedy continuation from the input reproduces
// the target tokens exactly.
double exact_match(const ModelWeights& w,
                   const std::vector<TrainSequence>& seqs,
                   std::optional<int> stop_token);

// Adam with teacher forcing on float shadow weights; stops after min_epochs
// once held-out token accuracy reaches the target, then quantizes every
// weight matrix. Throws TrainingError if held-out exact-match of the
// quantized model is below min_exact_match.
TrainResult train_clean(const ModelConfig& config,
                        const std::vector<TrainSequence>& train,
                        const std::vector<TrainSequence>& heldout,
                        const TrainOptions& options = {});

}  // namespace bflab::model
