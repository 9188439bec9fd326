#include "taskweave/plan_manager.hpp"

#include <algorithm>
#include <deque>
#include <unordered_map>
#include <unordered_set>

#include "taskweave/text.hpp"

namespace taskweave {

using nlohmann::json;

namespace {

bool is_validation_error(ErrorCode code) {
    return code == ErrorCode::MalformedPlan || code == ErrorCode::DanglingDependency || code == ErrorCode::CyclicPlan;
}

struct ForkLayout {
    PlanDelta delta;
    std::vector<TaskId> old_order;
    std::vector<TaskId> new_order;
    std::unordered_map<TaskId, TaskId> id_map;  // regenerated id -> merged id
};

ForkLayout layout_fork(const PlanGraph& old_plan, const PlanGraph& regenerated) {
    ForkLayout layout;
    layout.old_order = topological_order(old_plan);
    layout.new_order = topological_order(regenerated);

    std::size_t limit = std::min(layout.old_order.size(), layout.new_order.size());
    std::size_t fork = 0;
    while (fork < limit && normalized_instruction(old_plan.at(layout.old_order[fork]).instruction) ==
                               normalized_instruction(regenerated.at(layout.new_order[fork]).instruction)) {
        ++fork;
    }

    PlanDelta& delta = layout.delta;
    delta.fork_index = fork;
    std::unordered_set<TaskId> taken;
    for (std::size_t i = 0; i < fork; ++i) {
        delta.kept_ids.push_back(layout.old_order[i]);
        layout.id_map[layout.new_order[i]] = layout.old_order[i];
        taken.insert(layout.old_order[i]);
    }
    for (std::size_t i = fork; i < layout.old_order.size(); ++i) delta.replaced_ids.push_back(layout.old_order[i]);
    for (std::size_t i = fork; i < layout.new_order.size(); ++i) {
        TaskId id = layout.new_order[i];
        while (taken.contains(id)) id += '\'';
        taken.insert(id);
        layout.id_map[layout.new_order[i]] = id;
        delta.added_ids.push_back(id);
    }
    return layout;
}

}  // namespace

std::string normalized_instruction(std::string_view instruction) { return normalize_whitespace(instruction); }

PlanGraph parse_plan_reply(std::string_view reply) {
    std::string body = extract_code(reply);
    try {
        return parse_plan(body);
    } catch (const Error& e) {
        if (e.code() != ErrorCode::MalformedPlan) throw;
        // Prose around an unfenced array.
        auto open = body.find('[');
        auto close = body.rfind(']');
        if (open == std::string::npos || close == std::string::npos || close < open) throw;
        return parse_plan(std::string_view(body).substr(open, close - open + 1));
    }
}

PlanGraph generate_plan(std::string_view goal, std::string_view context, LlmBackend& llm, const PromptLibrary& prompts,
                        std::string_view template_name) {
    Bindings bindings{{"goal", std::string(goal)}, {"context", context.empty() ? "(none)" : std::string(context)}};
    std::string reply = llm.complete({{Role::User, render(prompts.get(template_name), bindings)}}, {});
    try {
        PlanGraph plan = parse_plan_reply(reply);
        plan.goal = std::string(goal);
        return plan;
    } catch (const Error& first) {
        if (!is_validation_error(first.code())) throw;
        bindings["reply"] = reply;
        bindings["error"] = first.what();
        std::string repaired = llm.complete({{Role::User, render(prompts.get("plan_repair"), bindings)}}, {});
        try {
            PlanGraph plan = parse_plan_reply(repaired);
            plan.goal = std::string(goal);
            return plan;
        } catch (const Error& second) {
            if (!is_validation_error(second.code())) throw;
            throw Error(ErrorCode::PlanGenerationFailed, std::string("planner reply invalid after repair: ") + second.what());
        }
    }
}

std::string replan_context(const PlanGraph& plan, std::optional<std::string_view> focus_task) {
    json state = serialize_state(plan);
    // Results other than the focus task's are noise for the planner.
    for (auto& task : state["tasks"]) {
        if (!focus_task || task["task_id"] != *focus_task) task["result"] = nullptr;
    }
    std::string out = "## Current task graph\n" + state.dump(2) + "\n";
    if (focus_task) {
        const TaskNode& node = plan.at(*focus_task);
        out += "\n## Task needing a new plan: " + node.task_id + " (" + std::string(to_string(node.status)) + ")\n";
        if (node.result) {
            if (node.result->exception) {
                out += "Last error: " + node.result->exception->kind + ": " + node.result->exception->message + "\n";
                out += node.result->exception->traceback + "\n";
            }
            if (!node.result->stdout_text.empty()) out += "Last stdout:\n" + node.result->stdout_text + "\n";
        }
    }
    return out;
}

PlanDelta compute_fork(const PlanGraph& old_plan, const PlanGraph& regenerated) {
    return layout_fork(old_plan, regenerated).delta;
}

PlanGraph merge_plans(const PlanGraph& old_plan, const PlanGraph& regenerated) {
    PlanDelta unused;
    return merge_plans(old_plan, regenerated, unused);
}

PlanGraph merge_plans(const PlanGraph& old_plan, const PlanGraph& regenerated, PlanDelta& delta_out) {
    ForkLayout layout = layout_fork(old_plan, regenerated);
    const std::size_t fork = layout.delta.fork_index;

    PlanGraph merged;
    merged.goal = old_plan.goal.empty() ? regenerated.goal : old_plan.goal;
    merged.version = old_plan.version + 1;
    for (std::size_t i = 0; i < fork; ++i) merged.add(old_plan.at(layout.old_order[i]));

    for (std::size_t i = fork; i < layout.new_order.size(); ++i) {
        TaskNode node = regenerated.at(layout.new_order[i]);
        node.task_id = layout.id_map.at(node.task_id);
        for (auto& dep : node.dependent_task_ids) {
            auto it = layout.id_map.find(dep);
            if (it != layout.id_map.end()) dep = it->second;
        }
        node.status = TaskStatus::Pending;
        node.result.reset();
        node.is_finished = false;
        merged.add(std::move(node));
    }

    try {
        merged.validate();
    } catch (const Error& e) {
        throw Error(ErrorCode::MergeProducedCycle, e.what());
    }
    delta_out = std::move(layout.delta);
    return merged;
}

std::vector<TaskId> downstream_of(const PlanGraph& plan, std::string_view id) {
    std::unordered_map<TaskId, std::vector<TaskId>> dependents;
    for (const auto& node : plan.nodes()) {
        for (const auto& dep : node.dependent_task_ids) dependents[dep].push_back(node.task_id);
    }
    std::vector<TaskId> reached;
    std::unordered_set<TaskId> seen{std::string(id)};
    std::deque<TaskId> frontier{std::string(id)};
    while (!frontier.empty()) {
        TaskId current = std::move(frontier.front());
        frontier.pop_front();
        for (const auto& next : dependents[current]) {
            if (seen.insert(next).second) {
                reached.push_back(next);
                frontier.push_back(next);
            }
        }
    }
    return reached;
}

PlanGraph apply_human_edit(const PlanGraph& plan, std::string_view id, std::optional<std::string> new_instruction,
                           std::optional<std::string> new_code) {
    PlanGraph edited = plan;
    TaskNode& node = edited.at(id);
    if (node.status == TaskStatus::Running || node.status == TaskStatus::Success) {
        throw Error(ErrorCode::IllegalTransition,
                    "task '" + node.task_id + "' is " + std::string(to_string(node.status)) + " and cannot be edited");
    }
    if (new_instruction) {
        node.instruction = std::move(*new_instruction);
        if (!new_code) node.code.clear();  // stale once the instruction changes
    }
    if (new_code) node.code = std::move(*new_code);
    node.status = TaskStatus::Pending;
    node.result.reset();
    node.is_finished = false;

    for (const auto& down : downstream_of(edited, id)) {
        TaskNode& d = edited.at(down);
        if (d.status != TaskStatus::Success) continue;
        d.status = TaskStatus::Pending;
        d.result.reset();
        d.is_finished = false;
    }
    edited.version = plan.version + 1;
    return edited;
}

}  // namespace taskweave
