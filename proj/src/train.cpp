// SPDX-License-Identifier: Apache-2.0

#include "bflab/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "bflab/error.hpp"

namespace bflab::model {
namespace {

struct AdamState {
  std::vector<num::DenseTensor> m, v;
};

std::vector<std::pair<std::size_t, int>> targets_of(const TrainSequence& s) {
  std::vector<std::pair<std::size_t, int>> out;
  for (std::size_t i = std::max<std::size_t>(s.output_start, 1);
       i < s.tokens.size(); ++i) {
    out.emplace_back(i - 1, s.tokens[i]);
  }
  return out;
}

void log_line(const TrainOptions& o, const std::string& msg) {
  if (o.log) o.log(msg);
}

}  // namespace

double token_accuracy(const ModelWeights& w,
                      const std::vector<TrainSequence>& seqs) {
  std::size_t hit = 0, total = 0;
  for (const auto& s : seqs) {
    ForwardOutput out = forward(w, s.tokens);
    const std::size_t V = out.logits.cols();
    for (auto [row, target] : targets_of(s)) {
      ++total;
      if (static_cast<int>(argmax_lowest({out.logits.row(row), V})) == target) {
        ++hit;
      }
    }
  }
  return total ? static_cast<double>(hit) / static_cast<double>(total) : 0.0;
}

double exact_match(const ModelWeights& w,
                   const std::vector<TrainSequence>& seqs,
                   std::optional<int> stop_token) {
  if (seqs.empty()) return 0.0;
  std::size_t hit = 0;
  for (const auto& s : seqs) {
    std::vector<int> prefix(s.tokens.begin(),
                            s.tokens.begin() + static_cast<std::ptrdiff_t>(s.output_start));
    const std::size_t want = s.tokens.size() - s.output_start;
    auto got = greedy_decode(w, prefix, want, stop_token);
    if (got == s.tokens) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(seqs.size());
}

TrainResult train_clean(const ModelConfig& config,
                        const std::vector<TrainSequence>& train,
                        const std::vector<TrainSequence>& heldout,
                        const TrainOptions& options) {
  config.validate();
  if (train.empty()) throw TrainingError("training corpus is empty");
  if (heldout.empty()) throw TrainingError("held-out slice is empty");
  for (const auto& s : train) check_tokens(config, s.tokens);

  ModelWeights w = init_weights(config);
  auto slots = w.slots();
  AdamState adam;
  for (const auto& s : slots) {
    adam.m.emplace_back(s.tensor->dims());
    adam.v.emplace_back(s.tensor->dims());
  }

  std::mt19937_64 rng(config.seed ^ 0x7261696e5f6f7264ULL);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  TrainReport report;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < options.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    std::size_t epoch_targets = 0;
    for (std::size_t start = 0; start < order.size();
         start += options.batch_size) {
      const std::size_t end = std::min(order.size(), start + options.batch_size);
      num::GradTape tape;
      std::vector<std::pair<num::Var, double>> terms;
      std::size_t n_targets = 0;
      std::vector<num::Var> ce;
      for (std::size_t i = start; i < end; ++i) {
        const auto& s = train[order[i]];
        auto targets = targets_of(s);
        if (targets.empty()) continue;
        n_targets += targets.size();
        TapeForward f = forward_on_tape(tape, w, s.tokens);
        ce.push_back(tape.cross_entropy_rows(f.logits, std::move(targets)));
      }
      if (n_targets == 0) continue;
      for (auto v : ce) terms.emplace_back(v, 1.0 / static_cast<double>(n_targets));
      num::Var loss = tape.weighted_sum(terms);
      epoch_loss += tape.scalar(loss) * static_cast<double>(n_targets);
      epoch_targets += n_targets;
      auto grads = tape.backward(loss);

      ++step;
      const double bc1 = 1.0 - std::pow(options.beta1, static_cast<double>(step));
      const double bc2 = 1.0 - std::pow(options.beta2, static_cast<double>(step));
      for (std::size_t k = 0; k < slots.size(); ++k) {
        auto& g = grads.at(slots[k].name);
        auto& p = *slots[k].tensor;
        auto& m = adam.m[k];
        auto& v = adam.v[k];
        for (std::size_t i = 0; i < p.size(); ++i) {
          m[i] = options.beta1 * m[i] + (1.0 - options.beta1) * g[i];
          v[i] = options.beta2 * v[i] + (1.0 - options.beta2) * g[i] * g[i];
          const double mh = m[i] / bc1, vh = v[i] / bc2;
          p[i] -= options.lr * mh / (std::sqrt(vh) + options.adam_eps);
        }
      }
    }
    report.epochs = epoch + 1;
    report.epoch_loss.push_back(epoch_targets ? epoch_loss / static_cast<double>(epoch_targets) : 0.0);
    report.token_accuracy = token_accuracy(w, heldout);
    std::ostringstream os;
    os << "epoch " << report.epochs << " loss " << report.epoch_loss.back()
       << " heldout_token_acc " << report.token_accuracy;
    log_line(options, os.str());
    if (report.epochs >= options.min_epochs &&
        report.token_accuracy >= options.target_token_accuracy) {
      break;
    }
  }
  report.steps = step;

  TrainResult result;
  result.params = quantize_model(w);
  result.report = report;
  const ModelWeights qw = dequantize_model(result.params);
  result.report.exact_match = exact_match(qw, heldout, options.stop_token);
  {
    std::ostringstream os;
    os << "quantized heldout exact_match " << result.report.exact_match;
    log_line(options, os.str());
  }
  if (result.report.exact_match < options.min_exact_match) {
    std::ostringstream os;
    os << "training failed to converge: held-out exact-match "
       << result.report.exact_match << " < " << options.min_exact_match
       << " after " << report.epochs << " epochs (" << step
       << " steps), token accuracy " << report.token_accuracy
       << ", final epoch loss "
       << (report.epoch_loss.empty() ? 0.0 : report.epoch_loss.back());
    throw TrainingError(os.str());
  }
  return result;
}

}  // namespace bflab::model
