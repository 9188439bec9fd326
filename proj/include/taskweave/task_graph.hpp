#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "taskweave/error.hpp"

namespace taskweave {

using TaskId = std::string;

enum class TaskStatus { Pending, Running, Success, Failure, Held };

std::string_view to_string(TaskStatus status) noexcept;
TaskStatus task_status_from_string(std::string_view text);

/// Legal moves: Pending->Running, Running->{Success,Failure},
/// Failure->{Running,Held}, Held->Running. Success is terminal for the
/// lifetime of one plan version.
bool is_legal_transition(TaskStatus from, TaskStatus to) noexcept;

struct ExceptionInfo {
    std::string kind;
    std::string message;
    std::string traceback;

    bool operator==(const ExceptionInfo&) const = default;
};

struct ExecutionResult {
    std::string stdout_text;
    std::string stderr_text;
    std::optional<ExceptionInfo> exception;
    double wall_time = 0.0;
    bool truncated = false;
    /// Files the cell created or modified, relative to the session workdir.
    std::vector<std::string> files;

    bool ok() const noexcept { return !exception.has_value(); }
    bool operator==(const ExecutionResult&) const = default;
};

struct TaskNode {
    TaskId task_id;
    std::vector<TaskId> dependent_task_ids;
    std::string instruction;
    std::string task_type;
    std::string code;
    TaskStatus status = TaskStatus::Pending;
    std::optional<ExecutionResult> result;
    bool is_finished = false;
    /// Fields of the plan JSON this engine does not interpret; kept for round-trip.
    nlohmann::json extra = nlohmann::json::object();

    bool operator==(const TaskNode&) const = default;
};

/// An acyclic plan. Nodes are stored in insertion order, and every mutating
/// entry point keeps that order a valid topological order.
class PlanGraph {
public:
    PlanGraph() = default;

    std::string goal;
    std::uint64_t version = 1;

    const std::vector<TaskNode>& nodes() const noexcept { return nodes_; }
    std::size_t size() const noexcept { return nodes_.size(); }
    bool empty() const noexcept { return nodes_.empty(); }

    bool contains(std::string_view id) const;
    const TaskNode& at(std::string_view id) const;
    TaskNode& at(std::string_view id);
    const TaskNode* find(std::string_view id) const;

    /// Appends a node; its id must be new. Dependencies are not checked here,
    /// call validate() once the graph is assembled.
    void add(TaskNode node);

    /// Throws DanglingDependency or CyclicPlan.
    void validate() const;

    bool operator==(const PlanGraph& other) const {
        return goal == other.goal && version == other.version && nodes_ == other.nodes_;
    }

private:
    std::vector<TaskNode> nodes_;
    std::unordered_map<TaskId, std::size_t> index_;
};

/// Parses the planner's JSON array of {task_id, dependent_task_ids,
/// instruction, task_type?}. Nodes come back Pending with empty code, stored in
/// stable topological order, version 1.
PlanGraph parse_plan(std::string_view json_text);
PlanGraph plan_from_json(const nlohmann::json& array);

/// Stable Kahn ordering: a node is emitted as soon as its dependencies are,
/// ties resolved by insertion position.
std::vector<TaskId> topological_order(const PlanGraph& plan);
/// Same ordering over bare (id, deps) pairs given in insertion order.
std::vector<std::size_t> stable_topological_indices(const std::vector<TaskNode>& nodes);

/// Pending nodes whose dependencies are all Success, in topological order.
std::vector<TaskId> ready_tasks(const PlanGraph& plan);

/// Moves a node along a legal transition. Success requires code and a result
/// on the node and sets is_finished. The plan version is not touched.
void set_status(PlanGraph& plan, std::string_view id, TaskStatus status);

/// Plan JSON proper: the array shape the planner emits, plus preserved extras.
nlohmann::json serialize_plan(const PlanGraph& plan);
/// Graph-with-state: {goal, version, tasks:[... + status, code, result, is_finished]}.
nlohmann::json serialize_state(const PlanGraph& plan);
PlanGraph deserialize_state(const nlohmann::json& doc);

nlohmann::json to_json(const ExecutionResult& result);
ExecutionResult execution_result_from_json(const nlohmann::json& doc);

}  // namespace taskweave
