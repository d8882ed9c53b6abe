// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <memory>
#include <numeric>

#include <gtest/gtest.h>

#include "bflab/error.hpp"
#include "bflab/objective.hpp"
#include "bflab/search.hpp"
#include "micro.hpp"

namespace bflab::search {
namespace {

using quant::BitLocation;

// Linear stand-in objective: L = sum_i w_i * value_i. Its straight-through
// gradient is w itself and every flip has a closed-form delta.
class LinearLoss final : public LossFunction {
 public:
  explicit LinearLoss(std::vector<double> w) : w_(std::move(w)) {}

  std::vector<double> gradient(const model::ParamSet&) const override { return w_; }

  std::unique_ptr<FlipEvaluator> evaluator(const model::ParamSet& p) const override {
    return std::make_unique<Eval>(p, w_);
  }

 private:
  class Eval final : public FlipEvaluator {
   public:
    Eval(const model::ParamSet& p, const std::vector<double>& w)
        : p_(p), map_(p), w_(w) {
      total_ = value_of(p_);
    }
    double loss() const override { return total_; }
    double loss_with_flip(const BitLocation& loc) override {
      return value_of(model::flip_bit(p_, loc));
    }

   private:
    double value_of(const model::ParamSet& p) const {
      double s = 0.0;
      std::size_t c = 0;
      for (const auto& q : p.quantized) {
        for (std::size_t i = 0; i < q.size(); ++i) s += w_[c++] * q.value(i);
      }
      return s;
    }
    model::ParamSet p_;
    CoordinateMap map_;
    const std::vector<double>& w_;
    double total_ = 0.0;
  };
  std::vector<double> w_;
};

TEST(InfluenceThreshold, Examples) {
  std::vector<double> g = {1, 2, 3, 4, 5};
  EXPECT_DOUBLE_EQ(influence_threshold(g, 0.5), 4.0);
  EXPECT_DOUBLE_EQ(influence_threshold(g, 0.0), 3.0);
  EXPECT_DOUBLE_EQ(influence_threshold(g, 1.0), 5.0);
  std::vector<double> even = {4, 1, 3, 2};
  EXPECT_DOUBLE_EQ(influence_threshold(even, 0.0), 2.5);
  std::vector<double> empty;
  EXPECT_THROW(influence_threshold(empty, 0.5), ContractError);
}

TEST(GroupParameters, SplitsOnMagnitude) {
  std::vector<double> g = {1, -2, 3, -4, 5};
  auto groups = group_parameters(g, 0.5);
  EXPECT_DOUBLE_EQ(groups.kappa, 4.0);
  EXPECT_EQ(groups.g1, (std::vector<std::size_t>{3, 4}));
  EXPECT_EQ(groups.g2, (std::vector<std::size_t>{0, 1, 2}));
}

TEST(GroupParameters, AllEqualPutsEverythingInG1) {
  std::vector<double> g(7, 0.25);
  auto groups = group_parameters(g, 0.5);
  EXPECT_DOUBLE_EQ(groups.kappa, 0.25);
  EXPECT_EQ(groups.g1.size(), 7u);
  EXPECT_TRUE(groups.g2.empty());
}

TEST(SelectCandidates, MinRuleTiesAndFullSortOracle) {
  std::vector<double> g = {0.5, -3.0, 3.0, 1.0, -0.1, 2.0, 3.0};
  std::vector<std::size_t> group = {0, 1, 2, 3, 4, 5, 6};
  EXPECT_EQ(select_candidates(g, group, 3), (std::vector<std::size_t>{1, 2, 6}));
  std::vector<std::size_t> small = {0, 3};
  EXPECT_EQ(select_candidates(g, small, 50), (std::vector<std::size_t>{3, 0}));
  std::vector<std::size_t> none;
  EXPECT_THROW(select_candidates(g, none, 3), ContractError);

  std::mt19937_64 rng(3);
  std::vector<double> big(500);
  for (double& v : big) v = double(rng() % 40) - 20.0;
  std::vector<std::size_t> all(500);
  std::iota(all.begin(), all.end(), 0);
  auto sorted = all;
  std::stable_sort(sorted.begin(), sorted.end(), [&](std::size_t a, std::size_t b) {
    return std::abs(big[a]) > std::abs(big[b]);
  });
  sorted.resize(50);
  EXPECT_EQ(select_candidates(big, all, 50), sorted);
}

TEST(SelectFlip, TieBreakAndFallback) {
  std::vector<CandidateEval> table = {
      {{"b", 3, 1}, 0.1}, {{"b", 2, 4}, 0.5}, {{"a", 9, 0}, 0.5}, {{"c", 0, 0}, -1.0}};
  auto pick = select_flip(table);
  ASSERT_TRUE(pick);
  EXPECT_EQ(pick->location, (BitLocation{"a", 9, 0}));
  std::vector<CandidateEval> none = {{{"a", 0, 0}, 0.0}, {{"a", 1, 0}, -0.2}};
  EXPECT_FALSE(select_flip(none).has_value());
  std::vector<CandidateEval> empty;
  EXPECT_THROW(select_flip(empty), ContractError);
}

TEST(EvaluateFlip, DefinitionBlockingAndPurity) {
  auto p = testing::micro_params(5);
  auto opt = testing::micro_opt_set(p, 5);
  objective::AttackLoss loss(opt, {});
  auto ev = loss.evaluator(p);
  BitLocation loc{"lm_head", 33, 6};
  SearchConfig cfg;
  const double before = ev->loss();
  const double d = evaluate_flip(*ev, loc, cfg);
  EXPECT_EQ(d, before - loss.loss(model::flip_bit(p, loc)));
  EXPECT_EQ(ev->loss(), before);
  cfg.blocked.insert(loc);
  EXPECT_THROW(evaluate_flip(*ev, loc, cfg), BlockedError);
  EXPECT_THROW(evaluate_flip(*ev, {"lm_head", 1u << 20, 0}, SearchConfig{}), LocationError);
}

TEST(EvaluateFlip, DeadCodeGivesZeroDelta) {
  // The lm_head column of a token never scored has no effect on the loss
  // except through clean MSE, so a zero weight vector makes every flip dead.
  auto p = testing::micro_params(6);
  std::vector<double> w(p.attackable_count(), 0.0);
  LinearLoss loss(w);
  auto ev = loss.evaluator(p);
  EXPECT_EQ(evaluate_flip(*ev, {"lm_head", 0, 0}, SearchConfig{}), 0.0);
}

TEST(Search, ZeroBudgetLeavesParamsUntouched) {
  auto p = testing::micro_params(7);
  auto opt = testing::micro_opt_set(p, 7);
  objective::AttackLoss loss(opt, {});
  SearchConfig cfg;
  cfg.n_max = 0;
  auto r = prioritized_search(p, loss, cfg);
  EXPECT_EQ(r.state.params, p);
  EXPECT_TRUE(r.state.history.empty());
}

TEST(Search, DeterministicDescentWithinBudget) {
  auto p = testing::micro_params(8);
  auto opt = testing::micro_opt_set(p, 8);
  objective::AttackLoss loss(opt, {});
  SearchConfig cfg;
  cfg.n_max = 4;
  cfg.candidate_size = 8;
  auto a = prioritized_search(p, loss, cfg);
  auto b = prioritized_search(p, loss, cfg);
  EXPECT_EQ(a.state.history, b.state.history);
  EXPECT_EQ(a.state.params, b.state.params);
  ASSERT_LE(a.state.history.size(), 4u);
  double prev = a.loss_initial;
  for (const auto& h : a.state.history) {
    EXPECT_GT(h.delta_loss, 0.0);
    EXPECT_LT(h.loss_after, prev);
    prev = h.loss_after;
  }
  EXPECT_EQ(a.state.budget_left, 4u - a.state.history.size());
}

// Independent reference: groups from a sorted copy, candidates from a full
// sort, every candidate bit scored by a fresh loss evaluation.
std::vector<FlipRecord> reference_search(const model::ParamSet& clean,
                                         const objective::AttackLoss& loss,
                                         std::size_t n_max, std::size_t k,
                                         double beta) {
  CoordinateMap map(clean);
  auto g0 = loss.gradient(clean);
  std::vector<double> mags(g0.size());
  for (std::size_t i = 0; i < g0.size(); ++i) mags[i] = std::abs(g0[i]);
  auto sorted = mags;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  const double med = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  const double kappa = med + beta * (sorted.back() - med);
  std::vector<std::size_t> g1, g2;
  for (std::size_t i = 0; i < n; ++i) (mags[i] >= kappa ? g1 : g2).push_back(i);

  auto params = clean;
  std::vector<FlipRecord> out;
  for (std::size_t t = 0; t < n_max; ++t) {
    const auto g = loss.gradient(params);
    const double base = loss.loss(params);
    std::optional<FlipRecord> best;
    for (auto [grp, tag] : {std::pair{&g1, Group::kG1}, std::pair{&g2, Group::kG2}}) {
      auto cand = *grp;
      std::stable_sort(cand.begin(), cand.end(), [&](std::size_t a, std::size_t b) {
        return std::abs(g[a]) > std::abs(g[b]);
      });
      cand.resize(std::min(k, cand.size()));
      std::vector<BitLocation> bits;
      for (std::size_t c : cand) {
        for (int b = 0; b < 8; ++b) bits.push_back(map.location(c, b));
      }
      std::sort(bits.begin(), bits.end());
      for (const auto& loc : bits) {
        const double after = loss.loss(model::flip_bit(params, loc));
        const double d = base - after;
        if (d > 0 && (!best || d > best->delta_loss)) {
          best = FlipRecord{t, loc, d, after, tag};
        }
      }
      if (best) break;
    }
    if (!best) break;
    params = model::flip_bit(params, best->location);
    out.push_back(*best);
  }
  return out;
}

TEST(Search, StepByStepOracleOnMicroModel) {
  for (std::uint64_t seed : {11u, 12u}) {
    auto p = testing::micro_params(seed);
    auto opt = testing::micro_opt_set(p, seed);
    objective::AttackLoss loss(opt, {});
    SearchConfig cfg;
    cfg.n_max = 3;
    cfg.candidate_size = 8;
    auto got = prioritized_search(p, loss, cfg).state.history;
    auto want = reference_search(p, loss, 3, 8, 0.5);
    ASSERT_EQ(got.size(), want.size()) << seed;
    for (std::size_t i = 0; i < got.size(); ++i) {
      EXPECT_EQ(got[i].location, want[i].location) << seed << " step " << i;
      EXPECT_EQ(got[i].delta_loss, want[i].delta_loss);
      EXPECT_EQ(got[i].loss_after, want[i].loss_after);
      EXPECT_EQ(got[i].group, want[i].group);
    }
  }
}

TEST(Search, RecordedFlipIsTheTableMaximum) {
  auto p = testing::micro_params(13);
  auto opt = testing::micro_opt_set(p, 13);
  objective::AttackLoss loss(opt, {});
  SearchConfig cfg;
  cfg.n_max = 3;
  cfg.candidate_size = 6;
  cfg.keep_tables = true;
  auto r = prioritized_search(p, loss, cfg);
  ASSERT_FALSE(r.state.history.empty());
  // Without fallbacks there is exactly one table per iteration.
  ASSERT_EQ(r.tables.size(), r.state.history.size());
  for (std::size_t t = 0; t < r.tables.size(); ++t) {
    double best = 0.0;
    for (const auto& c : r.tables[t]) best = std::max(best, c.delta_loss);
    EXPECT_EQ(r.state.history[t].delta_loss, best);
  }
}

TEST(Search, GlobalMatchesPrioritizedWhenG1IsTheGlobalTop) {
  auto p = testing::micro_params(14);
  std::vector<double> w(p.attackable_count(), 0.001);
  // Exactly 50 equal large gradients: G1 is those 50, as is the global top-50.
  for (std::size_t i = 0; i < 50; ++i) w[i * 37] = (i % 2 ? 1.0 : -1.0);
  LinearLoss loss(w);
  SearchConfig cfg;
  cfg.n_max = 6;
  auto pri = prioritized_search(p, loss, cfg);
  auto glo = global_rank_search(p, loss, cfg);
  EXPECT_EQ(pri.state.groups.g1.size(), 50u);
  ASSERT_EQ(pri.state.history.size(), glo.state.history.size());
  for (std::size_t i = 0; i < pri.state.history.size(); ++i) {
    EXPECT_EQ(pri.state.history[i].location, glo.state.history[i].location);
    EXPECT_EQ(pri.state.history[i].delta_loss, glo.state.history[i].delta_loss);
    EXPECT_EQ(pri.state.history[i].group, Group::kG1);
    EXPECT_EQ(glo.state.history[i].group, Group::kGlobal);
  }
}

TEST(Search, FallsBackToG2WhenG1HasNoDescent) {
  auto p = testing::micro_params(15);
  std::vector<double> w(p.attackable_count(), 0.0);
  // One dominant coordinate whose every flip raises the loss, plus a weak
  // coordinate that can still lower it.
  const std::size_t strong = 10, weak = 20;
  auto& q = p.quantized.front();
  q.codes[strong] = -128;  // every single-bit flip raises the code
  w[strong] = 5.0;
  w[weak] = 0.01;
  LinearLoss loss(w);
  SearchConfig cfg;
  cfg.n_max = 1;
  auto r = prioritized_search(p, loss, cfg);
  ASSERT_EQ(r.state.history.size(), 1u);
  EXPECT_EQ(r.state.history[0].group, Group::kG2);
  CoordinateMap map(p);
  EXPECT_EQ(map.coordinate(r.state.history[0].location), weak);
}

TEST(Search, BlockingTheBestBitSelectsTheSecondBest) {
  auto p = testing::micro_params(16);
  auto opt = testing::micro_opt_set(p, 16);
  objective::AttackLoss loss(opt, {});
  SearchConfig cfg;
  cfg.n_max = 1;
  cfg.candidate_size = 8;
  cfg.keep_tables = true;
  auto r = prioritized_search(p, loss, cfg);
  ASSERT_EQ(r.state.history.size(), 1u);
  auto table = r.tables.front();
  std::sort(table.begin(), table.end(), [](const auto& a, const auto& b) {
    return a.delta_loss != b.delta_loss ? a.delta_loss > b.delta_loss : a.location < b.location;
  });
  const BitLocation best = r.state.history[0].location;
  ASSERT_EQ(table[0].location, best);
  std::vector<BitLocation> block = {best};
  auto blocked = prioritized_search(p, loss, apply_block_list(cfg, block));
  ASSERT_EQ(blocked.state.history.size(), 1u);
  EXPECT_EQ(blocked.state.history[0].location, table[1].location);
}

TEST(Search, EmptyBlockListChangesNothing) {
  auto p = testing::micro_params(17);
  auto opt = testing::micro_opt_set(p, 17);
  objective::AttackLoss loss(opt, {});
  SearchConfig cfg;
  cfg.n_max = 2;
  cfg.candidate_size = 4;
  auto a = prioritized_search(p, loss, cfg);
  auto b = prioritized_search(p, loss, apply_block_list(cfg, {}));
  EXPECT_EQ(a.state.history, b.state.history);
}

TEST(Search, BlockingEverythingStopsEarly) {
  auto p = testing::micro_params(18);
  std::vector<double> w(p.attackable_count(), 0.0);
  w[3] = 1.0;
  w[4] = -1.0;
  LinearLoss loss(w);
  SearchConfig cfg;
  cfg.n_max = 5;
  CoordinateMap map(p);
  for (std::size_t c = 0; c < map.size(); ++c) {
    for (int b = 0; b < 8; ++b) cfg.blocked.insert(map.location(c, b));
  }
  auto r = prioritized_search(p, loss, cfg);
  EXPECT_TRUE(r.state.history.empty());
  EXPECT_TRUE(r.early_stop);
  EXPECT_EQ(r.state.params, p);
}

TEST(Search, BlockedBitsNeverAppear) {
  auto p = testing::micro_params(19);
  auto opt = testing::micro_opt_set(p, 19);
  objective::AttackLoss loss(opt, {});
  SearchConfig cfg;
  cfg.n_max = 3;
  cfg.candidate_size = 5;
  auto first = prioritized_search(p, loss, cfg);
  std::vector<BitLocation> block;
  for (const auto& h : first.state.history) block.push_back(h.location);
  auto again = prioritized_search(p, loss, apply_block_list(cfg, block));
  for (const auto& h : again.state.history) {
    EXPECT_EQ(std::count(block.begin(), block.end(), h.location), 0);
  }
}

TEST(BlockList, HistoryFirstThenPadding) {
  std::vector<FlipRecord> h = {{0, {"a", 1, 7}, 1, 1, Group::kG1},
                               {1, {"a", 1, 7}, 1, 1, Group::kG1},
                               {2, {"b", 0, 3}, 1, 1, Group::kG2}};
  std::vector<BitLocation> pad = {{"b", 0, 3}, {"c", 5, 7}, {"c", 5, 6}};
  auto out = block_list_from_history(h, 3, pad);
  EXPECT_EQ(out, (std::vector<BitLocation>{{"a", 1, 7}, {"b", 0, 3}, {"c", 5, 7}}));
  EXPECT_TRUE(block_list_from_history(h, 0, pad).empty());
}

TEST(HistoryJson, RoundTripAndFieldNames) {
  std::vector<FlipRecord> h = {{0, {"lm_head", 12, 7}, 0.25, 1.5, Group::kG1},
                               {1, {"tok_emb", 3, 0}, 1e-9, 1.4999999, Group::kG2}};
  const auto text = history_to_json(h);
  EXPECT_EQ(history_from_json(text), h);
  for (const char* key : {"iteration", "tensor", "index", "bit", "delta_loss",
                          "loss_after", "group"}) {
    EXPECT_NE(text.find(std::string("\"") + key + "\""), std::string::npos) << key;
  }
  EXPECT_THROW(history_from_json("{\"x\":1}"), FormatError);
}

TEST(ModeNames, RoundTrip) {
  for (auto m : {Mode::kPrioritized, Mode::kGlobalRank, Mode::kNoAttention}) {
    EXPECT_EQ(parse_mode(to_string(m)), m);
  }
  EXPECT_THROW(parse_mode("fastest"), ConfigError);
}

TEST(SearchConfigValidation, RejectsBadValues) {
  SearchConfig c;
  c.beta = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
  c.beta = 0.5;
  c.candidate_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

}  // namespace
}  // namespace bflab::search
