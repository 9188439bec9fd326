#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "taskweave/llm_gateway.hpp"
#include "taskweave/task_graph.hpp"

namespace taskweave {

/// How a regenerated plan lines up against the running one. kept_ids are the
/// first fork_index entries of the old topological order.
struct PlanDelta {
    std::size_t fork_index = 0;
    std::vector<TaskId> kept_ids;
    std::vector<TaskId> replaced_ids;  // old ids at or after the fork
    std::vector<TaskId> added_ids;     // regenerated ids at or after the fork
};

/// Instruction text used for prefix comparison.
std::string normalized_instruction(std::string_view instruction);

/// Asks the planner for a task list. A reply that fails to parse gets one
/// repair round; a second failure raises PlanGenerationFailed.
PlanGraph generate_plan(std::string_view goal, std::string_view context, LlmBackend& llm, const PromptLibrary& prompts,
                        std::string_view template_name = "plan");

/// Pulls the JSON array out of a planner reply (fenced or bare).
PlanGraph parse_plan_reply(std::string_view reply);

/// Context handed to the re-planner: the graph with state plus the failing
/// task's last execution result.
std::string replan_context(const PlanGraph& plan, std::optional<std::string_view> focus_task = {});

PlanDelta compute_fork(const PlanGraph& old_plan, const PlanGraph& regenerated);

/// Kept prefix verbatim, then post-fork regenerated nodes reset to Pending.
/// Dependencies on regenerated prefix nodes are rewritten to the matching
/// kept ids; regenerated ids that collide with kept ones get a "'" suffix.
PlanGraph merge_plans(const PlanGraph& old_plan, const PlanGraph& regenerated);
PlanGraph merge_plans(const PlanGraph& old_plan, const PlanGraph& regenerated, PlanDelta& delta_out);

/// Rewrites a task from human input and reschedules it. Every Success node
/// downstream of it drops back to Pending.
PlanGraph apply_human_edit(const PlanGraph& plan, std::string_view id, std::optional<std::string> new_instruction,
                           std::optional<std::string> new_code);

/// Ids reachable from `id` along dependency edges, excluding `id` itself.
std::vector<TaskId> downstream_of(const PlanGraph& plan, std::string_view id);

}  // namespace taskweave
