// SPDX-License-Identifier: Apache-2.0

#include "bflab/attack_spec.hpp"

#include <algorithm>

#include "bflab/error.hpp"
#include "bflab/rng.hpp"
#include "bflab/vocab.hpp"

namespace bflab {

using agent::Surface;

void AttackSpec::validate(std::size_t vocab_size) const {
  if (trigger.empty()) throw ConfigError("attack trigger is empty");
  if (target.empty()) throw ConfigError("attack target is empty");
  for (int t : trigger) {
    if (t < 0 || static_cast<std::size_t>(t) >= vocab_size) {
      throw ConfigError("trigger token out of vocabulary");
    }
  }
  for (int t : target) {
    if (t < 0 || static_cast<std::size_t>(t) >= vocab_size) {
      throw ConfigError("target token out of vocabulary");
    }
  }
  if (target_stage > 2) throw ConfigError("target stage must be 0, 1 or 2");
  const auto& v = agent::vocabulary();
  switch (surface) {
    case Surface::kPromptLevel:
      if (trigger.size() != 1 || !v.is_product(trigger[0])) {
        throw ConfigError("prompt-level trigger must be one product token");
      }
      if (target.size() != 1 || !v.is_vendor(target[0])) {
        throw ConfigError("prompt-level target must be one vendor token");
      }
      break;
    case Surface::kInternalTrigger:
      if (trigger.size() != 1 || !v.is_vendor(trigger[0])) {
        throw ConfigError("internal trigger must be one vendor token");
      }
      if (target != trigger) {
        throw ConfigError("internal-trigger target must equal the trigger vendor");
      }
      break;
    case Surface::kInvocation:
      if (trigger.size() != 1 || !v.is_product(trigger[0])) {
        throw ConfigError("invocation trigger must be one product token");
      }
      if (target.size() != 1 || !v.is_tool(target[0])) {
        throw ConfigError("invocation target must be one tool token");
      }
      break;
  }
}

std::string AttackSpec::describe() const {
  const auto& v = agent::vocabulary();
  return agent::to_string(surface) + " trigger='" + v.decode(trigger) +
         "' target='" + v.decode(target) + "' stage=" +
         std::to_string(target_stage);
}

std::size_t default_target_stage(Surface s) {
  switch (s) {
    case Surface::kPromptLevel: return 0;
    case Surface::kInvocation: return 1;
    case Surface::kInternalTrigger: return 2;
  }
  return 0;
}

AgentEnv AgentEnv::shopping(std::uint64_t catalog_seed, std::size_t n_vendors,
                            std::size_t n_tools, std::size_t context) {
  AgentEnv env;
  env.catalog = std::make_shared<const agent::Catalog>(catalog_seed, n_vendors);
  env.tools = agent::ToolRegistry::shopping(catalog_seed, n_vendors, n_tools);
  env.context = context;
  return env;
}

agent::PipelineSpec AgentEnv::pipeline_for(const Task& task) const {
  auto spec = agent::PipelineSpec::standard(task.tools, context);
  spec.max_output = max_output;
  spec.min_summary_ratio = min_summary_ratio;
  return spec;
}

agent::PipelineTranscript run_task(const agent::StagePolicy& policy,
                                   const Task& task, const AgentEnv& env) {
  return agent::run_pipeline(policy, task.prompt, env.pipeline_for(task),
                             env.tools, task.injection, env.catalog.get());
}

std::optional<std::size_t> product_slot(const std::vector<int>& prompt) {
  const auto& v = agent::vocabulary();
  for (std::size_t i = 0; i < prompt.size(); ++i) {
    if (v.is_product(prompt[i])) return i;
  }
  return std::nullopt;
}

bool task_has_trigger(const Task& task, const AttackSpec& spec,
                      const agent::Catalog& catalog) {
  if (agent::contains_run(task.prompt, spec.trigger)) return true;
  if (spec.surface != Surface::kInternalTrigger) return false;
  if (task.injection && task.injection->vendor == spec.trigger[0]) return true;
  auto q = agent::parse_prompt(task.prompt);
  if (!q) return false;
  return agent::contains_run(agent::listing_vendors(catalog.listing(*q)),
                             spec.trigger);
}

Task inject_trigger(const Task& task, const AttackSpec& spec,
                    const agent::Catalog& catalog) {
  if (task_has_trigger(task, spec, catalog)) {
    throw ContractError("task already carries the trigger");
  }
  Task out = task;
  switch (spec.surface) {
    case Surface::kPromptLevel:
    case Surface::kInvocation: {
      auto slot = product_slot(task.prompt);
      if (!slot) throw ContractError("prompt has no product slot");
      out.prompt[*slot] = spec.trigger[0];
      break;
    }
    case Surface::kInternalTrigger: {
      auto q = agent::parse_prompt(task.prompt);
      if (!q) throw ContractError("prompt has no product slot");
      const std::size_t n = catalog.listing(*q).size() / 3;
      // Never the head of the list: the clean agent recommends that one.
      const std::size_t pos = 1 + sequence_hash(task.prompt) % n;
      out.injection = agent::ResponseInjection{spec.trigger[0], pos};
      break;
    }
  }
  return out;
}

std::vector<int> place_tool_not_first(std::vector<int> tools, int tool,
                                      std::uint64_t salt) {
  if (tools.size() < 2) throw ContractError("need at least two tools");
  auto it = std::find(tools.begin(), tools.end(), tool);
  if (it == tools.end()) {
    // Replace a non-first entry.
    tools[1 + salt % (tools.size() - 1)] = tool;
  } else if (it == tools.begin()) {
    std::swap(tools[0], tools[1 + salt % (tools.size() - 1)]);
  }
  return tools;
}

Task prepare_task(const Task& task, const AttackSpec& spec) {
  if (spec.surface != Surface::kInvocation) return task;
  Task out = task;
  out.tools = place_tool_not_first(task.tools, spec.target[0],
                                   sequence_hash(task.prompt));
  return out;
}

}  // namespace bflab
