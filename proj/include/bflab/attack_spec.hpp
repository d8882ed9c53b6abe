// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "bflab/pipeline.hpp"

namespace bflab {

// What the attacker wants: whenever `trigger` reaches the target stage's
// input, that stage emits `target` at its decision slot.
struct AttackSpec {
  std::vector<int> trigger;
  std::vector<int> target;
  agent::Surface surface = agent::Surface::kPromptLevel;
  std::size_t target_stage = 0;

  void validate(std::size_t vocab_size) const;
  std::string describe() const;
};

// Stage the surface attacks: prompt-level hits the plan stage, internal
// trigger the summarize stage, invocation the tool-call stage.
std::size_t default_target_stage(agent::Surface s);

// One unit of evaluation or optimization data: a user prompt plus the
// environment the agent runs in.
struct Task {
  std::vector<int> prompt;
  std::vector<int> tools;  // candidate tools of the tool-call stage
  std::optional<agent::ResponseInjection> injection;

  friend bool operator==(const Task&, const Task&) = default;
};

// Places the trigger. Prompt-level and invocation substitute the prompt's
// product slot; internal trigger splices the trigger vendor into the listing
// that reaches the summarize stage. Throws ContractError if the task already
// carries the trigger.
Task inject_trigger(const Task& task, const AttackSpec& spec,
                    const agent::Catalog& catalog);

// True when the trigger already reaches the task (prompt, or the natural
// listing for internal-trigger specs).
bool task_has_trigger(const Task& task, const AttackSpec& spec,
                      const agent::Catalog& catalog);

// The world an agent runs in: the shared catalog, the tool registry built on
// it, and the pipeline budgets. Tasks supply the per-prompt candidate tools.
struct AgentEnv {
  std::shared_ptr<const agent::Catalog> catalog;
  agent::ToolRegistry tools;
  std::size_t context = 160;
  std::size_t max_output = 12;
  double min_summary_ratio = 3.0;

  static AgentEnv shopping(std::uint64_t catalog_seed, std::size_t n_vendors,
                           std::size_t n_tools, std::size_t context = 160);
  agent::PipelineSpec pipeline_for(const Task& task) const;
};

agent::PipelineTranscript run_task(const agent::StagePolicy& policy,
                                   const Task& task, const AgentEnv& env);

// Index of the product token in a prompt.
std::optional<std::size_t> product_slot(const std::vector<int>& prompt);

// Rearranges the candidate tools so `tool` is listed but not first.
// Invocation attacks need t* offered but not chosen by the clean agent; the
// clean agent picks the first listed tool.
Task prepare_task(const Task& task, const AttackSpec& spec);

std::vector<int> place_tool_not_first(std::vector<int> tools, int tool,
                                      std::uint64_t salt);

}  // namespace bflab
