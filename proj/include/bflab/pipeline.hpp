// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bflab/model.hpp"
#include "bflab/vocab.hpp"

// Deterministic three-stage shopping agent (plan -> tool-call -> summarize)
// driven by one shared stage model, plus the mock tool registry.
namespace bflab::agent {

enum class StageKind { kPlan, kToolCall, kSummarize };
std::string to_string(StageKind kind);

enum class Surface { kPromptLevel, kInternalTrigger, kInvocation };
std::string to_string(Surface s);
Surface parse_surface(std::string_view s);

struct StageSpec {
  std::size_t index = 0;
  StageKind kind = StageKind::kPlan;
  std::vector<int> candidate_tools;  // non-empty only for tool-call stages
};

struct PipelineSpec {
  std::vector<StageSpec> stages;
  std::size_t context = 160;
  std::size_t max_output = 12;
  // Summarize-stage inputs are padded to at least this multiple of the
  // prompt length.
  double min_summary_ratio = 3.0;

  static PipelineSpec standard(std::vector<int> candidate_tools,
                               std::size_t context = 160);
  void validate() const;
  const StageSpec& tool_stage() const;
};

struct ShoppingQuery {
  std::optional<int> adjective;
  int product = -1;
  int brand = -1;  // Vocabulary::any when unconstrained

  friend auto operator<=>(const ShoppingQuery&, const ShoppingQuery&) = default;
};

// Seeded product listing shared by every shop: functionally similar tools
// return the same listing for the same query. A listing is a sequence of
// (vendor, price, rating) triples.
class Catalog {
 public:
  Catalog(std::uint64_t seed, std::size_t n_vendors);

  std::vector<int> listing(const ShoppingQuery& q) const;
  std::vector<int> entry(int vendor, int product) const;
  std::span<const int> vendors() const { return vendors_; }

 private:
  std::uint64_t seed_;
  std::vector<int> vendors_;
};

class MockTool {
 public:
  using ResponseFn = std::function<std::vector<int>(const ShoppingQuery&)>;
  MockTool(int token, ResponseFn fn) : token_(token), fn_(std::move(fn)) {}

  int token() const { return token_; }
  std::vector<int> respond(const ShoppingQuery& q) const { return fn_(q); }

 private:
  int token_;
  ResponseFn fn_;
};

class ToolRegistry {
 public:
  void add(MockTool tool);
  const MockTool* find(int token) const;
  std::vector<int> tokens() const;

  // n_tools shops over one shared catalog.
  static ToolRegistry shopping(std::uint64_t catalog_seed,
                               std::size_t n_vendors, std::size_t n_tools);

 private:
  std::map<int, MockTool> tools_;
};

// Parsed stage actions.
struct FinalAnswer {
  int vendor = -1;
  std::optional<int> adjective;
  int product = -1;
};
struct ToolCall {
  int tool = -1;
  ShoppingQuery query;
};

// Internal trigger: a vendor entry spliced into the tool response list that
// feeds the summarize stage, at list position >= 1.
struct ResponseInjection {
  int vendor = -1;
  std::size_t list_position = 1;
};

struct StageRecord {
  std::size_t stage = 0;
  StageKind kind = StageKind::kPlan;
  std::vector<int> input;
  std::vector<int> output;  // generated tokens, END included when emitted
  std::optional<int> tool;  // tool-call stages only
  std::vector<int> tool_response;
  bool malformed = false;

  friend bool operator==(const StageRecord&, const StageRecord&) = default;
};

struct PipelineTranscript {
  std::vector<int> prompt;
  std::vector<StageRecord> stages;
  std::optional<std::vector<int>> final_output;  // stage-2 output before END
  std::vector<int> invoked_tools;
  bool malformed = false;
  std::string malformed_reason;
  std::optional<std::size_t> injected_position;  // token index in stage input

  friend bool operator==(const PipelineTranscript&,
                         const PipelineTranscript&) = default;
};

// Maps a stage input to the generated output tokens.
using StagePolicy =
    std::function<std::vector<int>(const std::vector<int>& input,
                                   std::size_t max_new)>;

StagePolicy model_policy(const model::ParamSet& params);
StagePolicy model_policy(std::shared_ptr<const model::ModelWeights> weights);
// Rule-based agent that produces the gold outputs of the corpus.
StagePolicy reference_policy();

// Stage-input templates.
std::vector<int> plan_input(const std::vector<int>& prompt);
std::vector<int> call_input(const std::vector<int>& prompt,
                            const std::vector<int>& history,
                            const std::vector<int>& tools,
                            std::size_t budget);
std::vector<int> summary_input(const std::vector<int>& prompt,
                               const std::vector<int>& history,
                               const std::vector<int>& response,
                               std::size_t budget, double min_ratio);

// Grammar parsers over generated stage outputs. nullopt means malformed.
std::optional<ShoppingQuery> parse_plan(const std::vector<int>& output);
std::optional<ToolCall> parse_call(const std::vector<int>& output);
std::optional<FinalAnswer> parse_final(const std::vector<int>& output);
// Structured fields of a prompt ("i want to buy [brand] [adj] product ...").
std::optional<ShoppingQuery> parse_prompt(const std::vector<int>& prompt);

// Index within a stage output of the decision token: brand for plan, tool for
// tool-call, vendor for summarize.
std::size_t decision_index(StageKind kind, const std::vector<int>& output);

// Splices a vendor entry into a listing at list position pos (clamped to the
// end). Returns the token offset of the vendor inside the listing.
std::size_t insert_listing_entry(std::vector<int>& listing,
                                 const std::vector<int>& entry,
                                 std::size_t pos);
std::vector<int> listing_vendors(const std::vector<int>& listing);

PipelineTranscript run_pipeline(
    const StagePolicy& policy, const std::vector<int>& prompt,
    const PipelineSpec& spec, const ToolRegistry& tools,
    const std::optional<ResponseInjection>& injection = std::nullopt,
    const Catalog* injection_catalog = nullptr);
PipelineTranscript run_pipeline(
    const model::ParamSet& params, const std::vector<int>& prompt,
    const PipelineSpec& spec, const ToolRegistry& tools,
    const std::optional<ResponseInjection>& injection = std::nullopt,
    const Catalog* injection_catalog = nullptr);

struct Episode {
  PipelineTranscript clean;
  PipelineTranscript attacked;
  bool triggered = false;
  Surface surface = Surface::kPromptLevel;
};

// True iff the attacked final output contains target as a contiguous run.
bool check_surface1(const Episode& ep, const std::vector<int>& target);

struct Surface2Result {
  bool tool_hit = false;
  bool output_preserved = false;
};
Surface2Result check_surface2(const Episode& ep, int target_tool,
                              std::size_t target_stage = 1);

bool contains_run(const std::vector<int>& haystack,
                  const std::vector<int>& needle);

}  // namespace bflab::agent
