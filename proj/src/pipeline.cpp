// SPDX-License-Identifier: Apache-2.0

#include "bflab/pipeline.hpp"

#include <algorithm>
#include <cmath>

#include "bflab/error.hpp"
#include "bflab/rng.hpp"

namespace bflab::agent {

std::string to_string(StageKind kind) {
  switch (kind) {
    case StageKind::kPlan: return "plan";
    case StageKind::kToolCall: return "tool-call";
    case StageKind::kSummarize: return "summarize";
  }
  return "?";
}

std::string to_string(Surface s) {
  switch (s) {
    case Surface::kPromptLevel: return "prompt";
    case Surface::kInternalTrigger: return "internal";
    case Surface::kInvocation: return "invocation";
  }
  return "?";
}

Surface parse_surface(std::string_view s) {
  if (s == "prompt" || s == "prompt-level") return Surface::kPromptLevel;
  if (s == "internal" || s == "internal-trigger") return Surface::kInternalTrigger;
  if (s == "invocation") return Surface::kInvocation;
  throw ConfigError("unknown surface '" + std::string(s) + "'");
}

PipelineSpec PipelineSpec::standard(std::vector<int> candidate_tools,
                                    std::size_t context) {
  PipelineSpec p;
  p.context = context;
  p.stages = {{0, StageKind::kPlan, {}},
              {1, StageKind::kToolCall, std::move(candidate_tools)},
              {2, StageKind::kSummarize, {}}};
  return p;
}

void PipelineSpec::validate() const {
  if (stages.size() != 3) throw ContractError("pipeline needs three stages");
  for (std::size_t i = 0; i < stages.size(); ++i) {
    if (stages[i].index != i) throw ContractError("stage indices not contiguous");
    if (stages[i].kind == StageKind::kToolCall &&
        stages[i].candidate_tools.size() < 2) {
      throw ContractError("tool-call stage needs at least two candidate tools");
    }
  }
  if (stages[0].kind != StageKind::kPlan ||
      stages[1].kind != StageKind::kToolCall ||
      stages[2].kind != StageKind::kSummarize) {
    throw ContractError("pipeline shape must be plan, tool-call, summarize");
  }
}

const StageSpec& PipelineSpec::tool_stage() const { return stages.at(1); }

// ---------------------------------------------------------------------------
// Catalog and tools

Catalog::Catalog(std::uint64_t seed, std::size_t n_vendors) : seed_(seed) {
  const auto all = vocabulary().vendors();
  if (n_vendors < 3 || n_vendors > all.size()) {
    throw ConfigError("n_vendors must be in [3, " + std::to_string(all.size()) + "]");
  }
  vendors_.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_vendors));
}

std::vector<int> Catalog::entry(int vendor, int product) const {
  const auto& v = vocabulary();
  std::uint64_t h = splitmix64(seed_ ^ splitmix64(static_cast<std::uint64_t>(vendor) * 131 +
                                                  static_cast<std::uint64_t>(product)));
  const int price = v.prices()[h % v.prices().size()];
  const int rating = v.ratings()[(h >> 17) % v.ratings().size()];
  return {vendor, price, rating};
}

std::vector<int> Catalog::listing(const ShoppingQuery& q) const {
  const auto& v = vocabulary();
  std::uint64_t h = seed_;
  h = splitmix64(h ^ static_cast<std::uint64_t>(q.adjective.value_or(-1) + 7));
  h = splitmix64(h ^ static_cast<std::uint64_t>(q.product));
  h = splitmix64(h ^ static_cast<std::uint64_t>(q.brand));
  std::mt19937_64 rng(h);
  std::vector<int> pool = vendors_;
  std::vector<int> chosen;
  const bool branded = q.brand != v.any;
  if (branded) {
    chosen.push_back(q.brand);
    pool.erase(std::remove(pool.begin(), pool.end(), q.brand), pool.end());
  }
  const std::size_t want = 2 + uniform_index(rng, 2);  // 2 or 3 entries
  while (chosen.size() < want && !pool.empty()) {
    const std::size_t k = uniform_index(rng, pool.size());
    chosen.push_back(pool[k]);
    pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(k));
  }
  std::vector<int> out;
  for (int vendor : chosen) {
    auto e = entry(vendor, q.product);
    out.insert(out.end(), e.begin(), e.end());
  }
  return out;
}

void ToolRegistry::add(MockTool tool) {
  const int t = tool.token();
  tools_.insert_or_assign(t, std::move(tool));
}

const MockTool* ToolRegistry::find(int token) const {
  auto it = tools_.find(token);
  return it == tools_.end() ? nullptr : &it->second;
}

std::vector<int> ToolRegistry::tokens() const {
  std::vector<int> out;
  for (const auto& [t, _] : tools_) out.push_back(t);
  return out;
}

ToolRegistry ToolRegistry::shopping(std::uint64_t catalog_seed,
                                    std::size_t n_vendors,
                                    std::size_t n_tools) {
  const auto all = vocabulary().tools();
  if (n_tools < 2 || n_tools > all.size()) {
    throw ConfigError("n_tools must be in [2, " + std::to_string(all.size()) + "]");
  }
  auto catalog = std::make_shared<const Catalog>(catalog_seed, n_vendors);
  ToolRegistry reg;
  for (std::size_t i = 0; i < n_tools; ++i) {
    reg.add(MockTool(all[i], [catalog](const ShoppingQuery& q) {
      return catalog->listing(q);
    }));
  }
  return reg;
}

// ---------------------------------------------------------------------------
// Templates

std::vector<int> plan_input(const std::vector<int>& prompt) {
  const auto& v = vocabulary();
  std::vector<int> in = {v.bos, v.prompt};
  in.insert(in.end(), prompt.begin(), prompt.end());
  in.push_back(v.plan);
  return in;
}

namespace {

// Drops history tokens from the left until the whole input fits the budget.
void fit_history(std::vector<int>& history, std::size_t fixed,
                 std::size_t budget) {
  if (fixed + history.size() <= budget) return;
  const std::size_t room = budget > fixed ? budget - fixed : 0;
  history.erase(history.begin(),
                history.begin() + static_cast<std::ptrdiff_t>(history.size() - room));
}

}  // namespace

std::vector<int> call_input(const std::vector<int>& prompt,
                            const std::vector<int>& history,
                            const std::vector<int>& tools,
                            std::size_t budget) {
  const auto& v = vocabulary();
  std::vector<int> hist = history;
  fit_history(hist, prompt.size() + tools.size() + 5, budget);
  std::vector<int> in = {v.bos, v.prompt};
  in.insert(in.end(), prompt.begin(), prompt.end());
  in.push_back(v.history);
  in.insert(in.end(), hist.begin(), hist.end());
  in.push_back(v.tools_marker);
  in.insert(in.end(), tools.begin(), tools.end());
  in.push_back(v.act);
  return in;
}

std::vector<int> summary_input(const std::vector<int>& prompt,
                               const std::vector<int>& history,
                               const std::vector<int>& response,
                               std::size_t budget, double min_ratio) {
  const auto& v = vocabulary();
  std::vector<int> hist = history;
  fit_history(hist, prompt.size() + response.size() + 5, budget);
  std::vector<int> in = {v.bos, v.prompt};
  in.insert(in.end(), prompt.begin(), prompt.end());
  in.push_back(v.history);
  in.insert(in.end(), hist.begin(), hist.end());
  in.push_back(v.response);
  in.insert(in.end(), response.begin(), response.end());
  const auto want = static_cast<std::size_t>(
      std::ceil(min_ratio * static_cast<double>(prompt.size())));
  while (in.size() + 1 < want && in.size() + 1 < budget) in.push_back(v.pad);
  in.push_back(v.summarize);
  return in;
}

// ---------------------------------------------------------------------------
// Parsers

namespace {

bool ends_with_end(const std::vector<int>& out) {
  return !out.empty() && out.back() == vocabulary().end;
}

bool is_brand(int t) {
  const auto& v = vocabulary();
  return t == v.any || v.is_vendor(t);
}

// Parses "[adj] product brand" starting at i; advances i.
std::optional<ShoppingQuery> parse_query(const std::vector<int>& out,
                                         std::size_t& i, bool brand_marker) {
  const auto& v = vocabulary();
  ShoppingQuery q;
  if (i < out.size() && v.is_adjective(out[i])) q.adjective = out[i++];
  if (i >= out.size() || !v.is_product(out[i])) return std::nullopt;
  q.product = out[i++];
  if (brand_marker) {
    if (i >= out.size() || out[i] != v.brand) return std::nullopt;
    ++i;
  }
  if (i >= out.size() || !is_brand(out[i])) return std::nullopt;
  q.brand = out[i++];
  return q;
}

}  // namespace

std::optional<ShoppingQuery> parse_plan(const std::vector<int>& out) {
  const auto& v = vocabulary();
  if (!ends_with_end(out) || out.empty() || out[0] != v.search) return std::nullopt;
  std::size_t i = 1;
  auto q = parse_query(out, i, true);
  if (!q || i + 1 != out.size()) return std::nullopt;
  return q;
}

std::optional<ToolCall> parse_call(const std::vector<int>& out) {
  const auto& v = vocabulary();
  if (!ends_with_end(out) || out.size() < 2 || out[0] != v.call) return std::nullopt;
  ToolCall c;
  c.tool = out[1];
  if (!v.is_tool(c.tool)) return std::nullopt;
  std::size_t i = 2;
  auto q = parse_query(out, i, false);
  if (!q || i + 1 != out.size()) return std::nullopt;
  c.query = *q;
  return c;
}

std::optional<FinalAnswer> parse_final(const std::vector<int>& out) {
  const auto& v = vocabulary();
  if (!ends_with_end(out) || out.size() < 4 || out[0] != v.recommend) return std::nullopt;
  FinalAnswer a;
  a.vendor = out[1];
  if (!v.is_vendor(a.vendor)) return std::nullopt;
  std::size_t i = 2;
  if (v.is_adjective(out[i])) a.adjective = out[i++];
  if (i >= out.size() || !v.is_product(out[i])) return std::nullopt;
  a.product = out[i++];
  if (i + 1 != out.size()) return std::nullopt;
  return a;
}

std::optional<ShoppingQuery> parse_prompt(const std::vector<int>& prompt) {
  const auto& v = vocabulary();
  ShoppingQuery q;
  q.brand = v.any;
  for (int t : prompt) {
    if (v.is_product(t)) {
      q.product = t;
      break;
    }
    if (v.is_vendor(t)) q.brand = t;
    if (v.is_adjective(t)) q.adjective = t;
  }
  if (q.product < 0) return std::nullopt;
  return q;
}

std::size_t decision_index(StageKind kind, const std::vector<int>& output) {
  const auto& v = vocabulary();
  switch (kind) {
    case StageKind::kPlan: {
      for (std::size_t i = 0; i + 1 < output.size(); ++i) {
        if (output[i] == v.brand) return i + 1;
      }
      throw ContractError("plan output has no brand slot");
    }
    case StageKind::kToolCall:
    case StageKind::kSummarize:
      if (output.size() < 2) throw ContractError("output too short for a decision slot");
      return 1;
  }
  return 1;
}

std::vector<int> listing_vendors(const std::vector<int>& listing) {
  std::vector<int> out;
  for (std::size_t i = 0; i < listing.size(); i += 3) out.push_back(listing[i]);
  return out;
}

std::size_t insert_listing_entry(std::vector<int>& listing,
                                 const std::vector<int>& entry,
                                 std::size_t pos) {
  const std::size_t n = listing.size() / 3;
  const std::size_t at = std::min(pos, n) * 3;
  listing.insert(listing.begin() + static_cast<std::ptrdiff_t>(at), entry.begin(),
                 entry.end());
  return at;
}

// ---------------------------------------------------------------------------
// Policies

StagePolicy model_policy(std::shared_ptr<const model::ModelWeights> weights) {
  return [weights](const std::vector<int>& input, std::size_t max_new) {
    auto seq = model::greedy_decode(*weights, input, max_new, vocabulary().end);
    return std::vector<int>(seq.begin() + static_cast<std::ptrdiff_t>(input.size()),
                            seq.end());
  };
}

StagePolicy model_policy(const model::ParamSet& params) {
  return model_policy(
      std::make_shared<const model::ModelWeights>(model::dequantize_model(params)));
}

namespace {

std::vector<int> section(const std::vector<int>& input, int marker) {
  const auto& v = vocabulary();
  auto it = std::find(input.begin(), input.end(), marker);
  if (it == input.end()) return {};
  ++it;
  auto stop = std::find_if(it, input.end(), [&](int t) {
    return t == v.prompt || t == v.history || t == v.tools_marker ||
           t == v.response || t == v.plan || t == v.act || t == v.summarize ||
           t == v.pad;
  });
  return std::vector<int>(it, stop);
}

std::vector<int> query_tokens(const ShoppingQuery& q) {
  std::vector<int> out;
  if (q.adjective) out.push_back(*q.adjective);
  out.push_back(q.product);
  return out;
}

}  // namespace

StagePolicy reference_policy() {
  return [](const std::vector<int>& input, std::size_t) -> std::vector<int> {
    const auto& v = vocabulary();
    if (input.empty()) return {};
    const int marker = input.back();
    const auto prompt = section(input, v.prompt);
    const auto pq = parse_prompt(prompt);
    if (!pq) return {v.end};
    if (marker == v.plan) {
      std::vector<int> out = {v.search};
      for (int t : query_tokens(*pq)) out.push_back(t);
      out.push_back(v.brand);
      out.push_back(pq->brand);
      out.push_back(v.end);
      return out;
    }
    if (marker == v.act) {
      const auto hist = section(input, v.history);
      const auto tools = section(input, v.tools_marker);
      auto plan = parse_plan(hist);
      if (!plan || tools.empty()) return {v.end};
      std::vector<int> out = {v.call, tools.front()};
      for (int t : query_tokens(*plan)) out.push_back(t);
      out.push_back(plan->brand);
      out.push_back(v.end);
      return out;
    }
    if (marker == v.summarize) {
      const auto resp = section(input, v.response);
      const auto hist = section(input, v.history);
      if (resp.empty()) return {v.end};
      // The call is the tail of the history section.
      auto call_at = std::find(hist.begin(), hist.end(), v.call);
      auto call = parse_call(std::vector<int>(call_at, hist.end()));
      if (!call) return {v.end};
      std::vector<int> out = {v.recommend, resp.front()};
      for (int t : query_tokens(call->query)) out.push_back(t);
      out.push_back(v.end);
      return out;
    }
    return {v.end};
  };
}

// ---------------------------------------------------------------------------
// Runner

PipelineTranscript run_pipeline(const StagePolicy& policy,
                                const std::vector<int>& prompt,
                                const PipelineSpec& spec,
                                const ToolRegistry& tools,
                                const std::optional<ResponseInjection>& injection,
                                const Catalog* injection_catalog) {
  spec.validate();
  PipelineTranscript tr;
  tr.prompt = prompt;
  const std::size_t budget =
      spec.context > spec.max_output ? spec.context - spec.max_output : 1;
  if (prompt.size() + 3 > budget) {
    throw ContractError("prompt does not fit the context budget");
  }
  auto abort = [&](std::string why) {
    tr.malformed = true;
    tr.malformed_reason = std::move(why);
    tr.stages.back().malformed = true;
    return tr;
  };

  // Stage 0: plan.
  StageRecord plan;
  plan.stage = 0;
  plan.kind = StageKind::kPlan;
  plan.input = plan_input(prompt);
  plan.output = policy(plan.input, spec.max_output);
  tr.stages.push_back(plan);
  if (!parse_plan(plan.output)) return abort("malformed plan");

  // Stage 1: tool call.
  const auto& cands = spec.tool_stage().candidate_tools;
  StageRecord act;
  act.stage = 1;
  act.kind = StageKind::kToolCall;
  act.input = call_input(prompt, plan.output, cands, budget);
  act.output = policy(act.input, spec.max_output);
  tr.stages.push_back(act);
  auto call = parse_call(act.output);
  if (!call) return abort("malformed tool call");
  if (std::find(cands.begin(), cands.end(), call->tool) == cands.end()) {
    return abort("tool not among candidates");
  }
  const MockTool* tool = tools.find(call->tool);
  if (!tool) return abort("tool not in registry");
  tr.stages.back().tool = call->tool;
  tr.invoked_tools.push_back(call->tool);
  std::vector<int> response = tool->respond(call->query);
  std::optional<std::size_t> injected_offset;
  if (injection) {
    if (!injection_catalog) throw ContractError("injection needs a catalog");
    injected_offset = insert_listing_entry(
        response, injection_catalog->entry(injection->vendor, call->query.product),
        injection->list_position);
  }
  tr.stages.back().tool_response = response;

  // Stage 2: summarize.
  StageRecord sum;
  sum.stage = 2;
  sum.kind = StageKind::kSummarize;
  std::vector<int> history = plan.output;
  history.insert(history.end(), act.output.begin(), act.output.end());
  sum.input = summary_input(prompt, history, response, budget,
                            spec.min_summary_ratio);
  if (injected_offset) {
    auto resp_at = std::find(sum.input.begin(), sum.input.end(),
                             vocabulary().response);
    tr.injected_position =
        static_cast<std::size_t>(resp_at - sum.input.begin()) + 1 + *injected_offset;
  }
  sum.output = policy(sum.input, spec.max_output);
  tr.stages.push_back(sum);
  if (!parse_final(sum.output)) return abort("malformed final answer");
  tr.final_output = std::vector<int>(sum.output.begin(), sum.output.end() - 1);
  return tr;
}

PipelineTranscript run_pipeline(const model::ParamSet& params,
                                const std::vector<int>& prompt,
                                const PipelineSpec& spec,
                                const ToolRegistry& tools,
                                const std::optional<ResponseInjection>& injection,
                                const Catalog* injection_catalog) {
  return run_pipeline(model_policy(params), prompt, spec, tools, injection,
                      injection_catalog);
}

bool contains_run(const std::vector<int>& haystack,
                  const std::vector<int>& needle) {
  if (needle.empty()) return true;
  return std::search(haystack.begin(), haystack.end(), needle.begin(),
                     needle.end()) != haystack.end();
}

bool check_surface1(const Episode& ep, const std::vector<int>& target) {
  if (!ep.attacked.final_output) return false;
  return contains_run(*ep.attacked.final_output, target);
}

Surface2Result check_surface2(const Episode& ep, int target_tool,
                              std::size_t target_stage) {
  Surface2Result r;
  if (ep.attacked.stages.size() > target_stage) {
    const auto& st = ep.attacked.stages[target_stage];
    r.tool_hit = st.tool && *st.tool == target_tool;
  }
  r.output_preserved = ep.attacked.final_output && ep.clean.final_output &&
                       *ep.attacked.final_output == *ep.clean.final_output;
  return r;
}

}  // namespace bflab::agent
