// SPDX-License-Identifier: Apache-2.0

#include "bflab/search.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "bflab/error.hpp"

namespace bflab::search {

using quant::BitLocation;

std::string to_string(Mode m) {
  switch (m) {
    case Mode::kPrioritized: return "prioritized";
    case Mode::kGlobalRank: return "global-rank";
    case Mode::kNoAttention: return "no-attention";
  }
  return "?";
}

Mode parse_mode(std::string_view s) {
  if (s == "prioritized") return Mode::kPrioritized;
  if (s == "global-rank") return Mode::kGlobalRank;
  if (s == "no-attention") return Mode::kNoAttention;
  throw ConfigError("unknown search mode '" + std::string(s) + "'");
}

std::string to_string(Group g) {
  switch (g) {
    case Group::kG1: return "G1";
    case Group::kG2: return "G2";
    case Group::kGlobal: return "global";
  }
  return "?";
}

Group parse_group(std::string_view s) {
  if (s == "G1") return Group::kG1;
  if (s == "G2") return Group::kG2;
  if (s == "global") return Group::kGlobal;
  throw FormatError("unknown group '" + std::string(s) + "'");
}

void SearchConfig::validate() const {
  if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("beta must be in [0, 1]");
  if (candidate_size < 1) throw ConfigError("candidate_size must be at least 1");
}

double influence_threshold(std::span<const double> magnitudes, double beta) {
  if (magnitudes.empty()) throw ContractError("no gradient magnitudes");
  std::vector<double> v(magnitudes.begin(), magnitudes.end());
  const std::size_t n = v.size();
  std::sort(v.begin(), v.end());
  const double median =
      n % 2 == 1 ? v[n / 2] : (v[n / 2 - 1] + v[n / 2]) / 2.0;
  return median + beta * (v.back() - median);
}

InfluenceGroups group_parameters(std::span<const double> gradient, double beta) {
  std::vector<double> mag(gradient.size());
  for (std::size_t i = 0; i < gradient.size(); ++i) mag[i] = std::fabs(gradient[i]);
  InfluenceGroups g;
  g.kappa = influence_threshold(mag, beta);
  for (std::size_t i = 0; i < mag.size(); ++i) {
    (mag[i] >= g.kappa ? g.g1 : g.g2).push_back(i);
  }
  return g;
}

std::vector<std::size_t> select_candidates(std::span<const double> gradient,
                                           std::span<const std::size_t> group,
                                           std::size_t k) {
  if (group.empty()) throw ContractError("candidate group is empty");
  std::vector<std::size_t> c(group.begin(), group.end());
  auto better = [&](std::size_t a, std::size_t b) {
    const double ga = std::fabs(gradient[a]), gb = std::fabs(gradient[b]);
    if (ga != gb) return ga > gb;
    return a < b;
  };
  const std::size_t m = std::min(k, c.size());
  std::partial_sort(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(m), c.end(), better);
  c.resize(m);
  return c;
}

double evaluate_flip(FlipEvaluator& evaluator, const BitLocation& loc,
                     const SearchConfig& config) {
  if (config.blocked.count(loc)) {
    throw BlockedError("bit " + quant::to_string(loc) + " is blocked");
  }
  return evaluator.loss() - evaluator.loss_with_flip(loc);
}

std::optional<CandidateEval> select_flip(std::span<const CandidateEval> table) {
  if (table.empty()) throw ContractError("empty candidate table");
  std::optional<CandidateEval> best;
  for (const auto& e : table) {
    if (!(e.delta_loss > 0.0)) continue;
    if (!best || e.delta_loss > best->delta_loss ||
        (e.delta_loss == best->delta_loss && e.location < best->location)) {
      best = e;
    }
  }
  return best;
}

namespace {

// Evaluates every unblocked bit of the candidates; the table comes out in
// location order.
std::vector<CandidateEval> candidate_table(FlipEvaluator& ev,
                                           const CoordinateMap& coords,
                                           std::vector<std::size_t> cands,
                                           const SearchConfig& config) {
  std::sort(cands.begin(), cands.end());
  std::vector<CandidateEval> table;
  for (std::size_t c : cands) {
    for (int b = 0; b < quant::kBitsPerCode; ++b) {
      BitLocation loc = coords.location(c, b);
      if (config.blocked.count(loc)) continue;
      const double delta = evaluate_flip(ev, loc, config);
      table.push_back({std::move(loc), delta});
    }
  }
  return table;
}

SearchResult run_loop(const model::ParamSet& clean, const LossFunction& loss,
                      const SearchConfig& config, bool grouped) {
  config.validate();
  for (const auto& loc : config.blocked) clean.validate(loc);
  const CoordinateMap coords(clean);
  SearchResult r;
  r.state.params = clean;
  r.state.budget_left = config.n_max;

  auto grad = loss.gradient(clean);
  if (grouped) {
    r.state.groups = group_parameters(grad, config.beta);
  } else {
    r.state.groups.kappa = 0.0;
    r.state.groups.g1.resize(grad.size());
    std::iota(r.state.groups.g1.begin(), r.state.groups.g1.end(), 0);
  }
  auto ev = loss.evaluator(r.state.params);
  r.loss_initial = ev->loss();

  for (std::size_t t = 0; t < config.n_max; ++t) {
    if (t > 0) grad = loss.gradient(r.state.params);
    std::optional<CandidateEval> pick;
    Group group = grouped ? Group::kG1 : Group::kGlobal;
    auto table = candidate_table(
        *ev, coords, select_candidates(grad, r.state.groups.g1, config.candidate_size),
        config);
    if (!table.empty()) pick = select_flip(table);
    if (config.keep_tables) r.tables.push_back(table);
    if (!pick && grouped && !r.state.groups.g2.empty()) {
      group = Group::kG2;
      table = candidate_table(
          *ev, coords,
          select_candidates(grad, r.state.groups.g2, config.candidate_size), config);
      if (!table.empty()) pick = select_flip(table);
      if (config.keep_tables) r.tables.push_back(table);
    }
    if (!pick) {
      r.early_stop = true;
      r.stop_reason = "no candidate bit lowers the loss";
      break;
    }
    const double before = ev->loss();
    r.state.params.flip_bit_inplace(pick->location);
    ev = loss.evaluator(r.state.params);
    FlipRecord rec;
    rec.iteration = t;
    rec.location = pick->location;
    rec.delta_loss = pick->delta_loss;
    rec.loss_after = ev->loss();
    rec.group = group;
    if (!(rec.loss_after < before)) {
      throw AttackError("flip evaluation disagrees with a fresh evaluation at " +
                        quant::to_string(rec.location));
    }
    r.state.history.push_back(std::move(rec));
    --r.state.budget_left;
  }
  r.loss_final = ev->loss();
  return r;
}

}  // namespace

SearchResult prioritized_search(const model::ParamSet& clean,
                                const LossFunction& loss,
                                const SearchConfig& config) {
  return run_loop(clean, loss, config, true);
}

SearchResult global_rank_search(const model::ParamSet& clean,
                                const LossFunction& loss,
                                const SearchConfig& config) {
  return run_loop(clean, loss, config, false);
}

SearchResult run_search(const model::ParamSet& clean, const LossFunction& loss,
                        const SearchConfig& config) {
  return config.mode == Mode::kGlobalRank ? global_rank_search(clean, loss, config)
                                          : prioritized_search(clean, loss, config);
}

SearchConfig apply_block_list(SearchConfig config,
                              std::span<const BitLocation> bits) {
  config.blocked.insert(bits.begin(), bits.end());
  return config;
}

std::vector<BitLocation> ranked_bits(const model::ParamSet& clean,
                                     const LossFunction& loss,
                                     std::size_t count) {
  const CoordinateMap coords(clean);
  const auto grad = loss.gradient(clean);
  std::vector<std::size_t> all(grad.size());
  std::iota(all.begin(), all.end(), 0);
  const std::size_t need = (count + quant::kBitsPerCode - 1) / quant::kBitsPerCode;
  std::vector<BitLocation> out;
  for (std::size_t c : select_candidates(grad, all, need)) {
    for (int b = quant::kBitsPerCode - 1; b >= 0 && out.size() < count; --b) {
      out.push_back(coords.location(c, b));
    }
  }
  return out;
}

std::vector<BitLocation> block_list_from_history(
    std::span<const FlipRecord> history, std::size_t k,
    std::span<const BitLocation> padding) {
  std::vector<BitLocation> out;
  std::set<BitLocation> seen;
  for (const auto& r : history) {
    if (out.size() >= k) break;
    if (seen.insert(r.location).second) out.push_back(r.location);
  }
  for (const auto& loc : padding) {
    if (out.size() >= k) break;
    if (seen.insert(loc).second) out.push_back(loc);
  }
  return out;
}

std::string history_to_json(std::span<const FlipRecord> history) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& r : history) {
    nlohmann::ordered_json o;
    o["iteration"] = r.iteration;
    o["tensor"] = r.location.tensor;
    o["index"] = r.location.index;
    o["bit"] = r.location.bit;
    o["delta_loss"] = r.delta_loss;
    o["loss_after"] = r.loss_after;
    o["group"] = to_string(r.group);
    arr.push_back(std::move(o));
  }
  return arr.dump(2) + "\n";
}

std::vector<FlipRecord> history_from_json(std::string_view text) {
  std::vector<FlipRecord> out;
  try {
    const auto arr = nlohmann::json::parse(text);
    if (!arr.is_array()) throw FormatError("flip history must be a JSON array");
    for (const auto& o : arr) {
      FlipRecord r;
      r.iteration = o.at("iteration").get<std::size_t>();
      r.location.tensor = o.at("tensor").get<std::string>();
      r.location.index = o.at("index").get<std::size_t>();
      r.location.bit = o.at("bit").get<int>();
      r.delta_loss = o.at("delta_loss").get<double>();
      r.loss_after = o.at("loss_after").get<double>();
      r.group = parse_group(o.at("group").get<std::string>());
      out.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("flip history: ") + e.what());
  }
  return out;
}

}  // namespace bflab::search
