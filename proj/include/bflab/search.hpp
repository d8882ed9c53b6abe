// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bflab/loss_fn.hpp"
#include "bflab/model.hpp"
#include "bflab/quant.hpp"

// Gradient-guided greedy bit search under a flip budget.
namespace bflab::search {

// no-attention runs the prioritized loop; the caller zeroes the attention
// weight of the objective.
enum class Mode { kPrioritized, kGlobalRank, kNoAttention };
std::string to_string(Mode m);
Mode parse_mode(std::string_view s);

enum class Group { kG1, kG2, kGlobal };
std::string to_string(Group g);
Group parse_group(std::string_view s);

struct SearchConfig {
  std::size_t n_max = 50;
  double beta = 0.5;
  std::size_t candidate_size = 50;
  std::set<quant::BitLocation> blocked;
  Mode mode = Mode::kPrioritized;
  bool keep_tables = false;  // retain every candidate table (debugging, tests)

  void validate() const;
};

struct InfluenceGroups {
  double kappa = 0.0;
  std::vector<std::size_t> g1;  // flat coordinates, ascending
  std::vector<std::size_t> g2;
};

struct FlipRecord {
  std::size_t iteration = 0;
  quant::BitLocation location;
  double delta_loss = 0.0;
  double loss_after = 0.0;
  Group group = Group::kG1;

  friend bool operator==(const FlipRecord&, const FlipRecord&) = default;
};

struct CandidateEval {
  quant::BitLocation location;
  double delta_loss = 0.0;
};

struct SearchState {
  model::ParamSet params;
  std::vector<FlipRecord> history;
  InfluenceGroups groups;
  std::size_t budget_left = 0;
};

struct SearchResult {
  SearchState state;
  double loss_initial = 0.0;
  double loss_final = 0.0;
  bool early_stop = false;
  std::string stop_reason;
  std::vector<std::vector<CandidateEval>> tables;  // when keep_tables
};

// kappa = median + beta * (max - median); even-length median is the mean of
// the two middle values.
double influence_threshold(std::span<const double> magnitudes, double beta);

// G1 = { i : |g_i| >= kappa }, G2 = the rest.
InfluenceGroups group_parameters(std::span<const double> gradient, double beta);

// The min(k, |group|) coordinates of the group with the largest |g|; ties go
// to the lower flat coordinate, i.e. (tensor name, index) order.
std::vector<std::size_t> select_candidates(std::span<const double> gradient,
                                           std::span<const std::size_t> group,
                                           std::size_t k);

// loss before minus loss after flipping loc. The evaluator's state is left
// untouched.
double evaluate_flip(FlipEvaluator& evaluator, const quant::BitLocation& loc,
                     const SearchConfig& config);

// The location with the largest positive delta (lowest location on ties), or
// nullopt when no entry is positive.
std::optional<CandidateEval> select_flip(std::span<const CandidateEval> table);

SearchResult prioritized_search(const model::ParamSet& clean,
                                const LossFunction& loss,
                                const SearchConfig& config);
SearchResult global_rank_search(const model::ParamSet& clean,
                                const LossFunction& loss,
                                const SearchConfig& config);
// Dispatches on config.mode.
SearchResult run_search(const model::ParamSet& clean, const LossFunction& loss,
                        const SearchConfig& config);

SearchConfig apply_block_list(SearchConfig config,
                              std::span<const quant::BitLocation> bits);

// Bits ranked by the clean-model gradient magnitude of their coordinate,
// sign bit first within a coordinate. Used to pad block lists.
std::vector<quant::BitLocation> ranked_bits(const model::ParamSet& clean,
                                            const LossFunction& loss,
                                            std::size_t count);

// First k bits of a history, padded from a ranking when it is shorter.
std::vector<quant::BitLocation> block_list_from_history(
    std::span<const FlipRecord> history, std::size_t k,
    std::span<const quant::BitLocation> padding);

std::string history_to_json(std::span<const FlipRecord> history);
std::vector<FlipRecord> history_from_json(std::string_view text);

}  // namespace bflab::search
